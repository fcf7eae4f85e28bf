//! Dataset store: a directory holding `manifest.json` and one container per
//! image. Each image file uses the checkpoint codec with the image metadata
//! as its JSON and a single `image` entry.

use std::fs;
use std::path::Path;

use pcd_core::model::Entry;
use pcd_core::trainer::{Dataset, ImageMeta};
use serde::{Deserialize, Serialize};

use crate::codec::{decode_container, encode_container};
use crate::error::{io, Error, Result};

pub const MANIFEST: &str = "manifest.json";
const IMAGE_ENTRY: &str = "image";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub size: usize,
    pub seed: u64,
    pub files: Vec<String>,
}

fn file_name(id: u64) -> String {
    format!("img_{id:06}.pcd")
}

pub fn save_dataset(data: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    data.validate()?;
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut files = Vec::with_capacity(data.len());
    for (img, meta) in data.images.iter().zip(&data.meta) {
        let name = file_name(meta.id);
        let json = serde_json::to_string(meta).map_err(Error::Metadata)?;
        let bytes = encode_container(
            &json,
            &[Entry {
                path: IMAGE_ENTRY.into(),
                tensor: img.clone(),
            }],
        )?;
        let path = dir.join(&name);
        fs::write(&path, bytes).map_err(io(&path))?;
        files.push(name);
    }
    let manifest = Manifest {
        size: data.size,
        seed: data.seed,
        files,
    };
    let path = dir.join(MANIFEST);
    let mut text = serde_json::to_string_pretty(&manifest).map_err(Error::Metadata)?;
    text.push('\n');
    fs::write(&path, text).map_err(io(&path))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path).map_err(io(&path))?).map_err(Error::Metadata)?;
    let mut images = Vec::with_capacity(manifest.files.len());
    let mut meta = Vec::with_capacity(manifest.files.len());
    for name in &manifest.files {
        let path = dir.join(name);
        let (json, mut entries) = decode_container(&fs::read(&path).map_err(io(&path))?)?;
        let m: ImageMeta = serde_json::from_str(&json).map_err(Error::Metadata)?;
        if entries.len() != 1 || entries[0].path != IMAGE_ENTRY {
            return Err(Error::Malformed(format!("{}: expected a single `{IMAGE_ENTRY}` entry", path.display())));
        }
        images.push(entries.pop().expect("one entry").tensor);
        meta.push(m);
    }
    let data = Dataset {
        size: manifest.size,
        seed: manifest.seed,
        images,
        meta,
    };
    data.validate()?;
    Ok(data)
}

//! ERF heatmaps as binary PGM or CSV.

use std::fs;
use std::path::Path;

use pcd_core::erf::ErfMap;
use pcd_core::Tensor;

use crate::error::{io, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum HeatmapFormat {
    Pgm,
    Csv,
}

impl HeatmapFormat {
    pub fn extension(self) -> &'static str {
        match self {
            HeatmapFormat::Pgm => "pgm",
            HeatmapFormat::Csv => "csv",
        }
    }
}

fn dims(m: &Tensor) -> (usize, usize) {
    (m.shape()[0], m.shape()[1])
}

/// P5 with maxval 255, pixels `round(255·v)`.
pub fn encode_pgm(m: &Tensor) -> Vec<u8> {
    let (h, w) = dims(m);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(m.data().iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8));
    out
}

/// Header dims and pixels of a P5 file with maxval 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = || Error::Malformed("not an 8-bit P5 PGM".into());
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?.to_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let pixels = bytes.get(pos..).ok_or_else(bad)?;
    if pixels.len() != w * h {
        return Err(bad());
    }
    Ok((w, h, pixels.to_vec()))
}

/// Six significant digits, plain notation for moderate exponents.
pub fn format_sig6(v: f32) -> String {
    let v = v as f64;
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..6).contains(&exp) {
        let s = format!("{:.*}", (5 - exp).max(0) as usize, v);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_owned()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

/// Row-major, one image row per line.
pub fn encode_csv(m: &Tensor) -> String {
    let (_, w) = dims(m);
    let mut out = String::new();
    for row in m.data().chunks(w) {
        let line: Vec<String> = row.iter().map(|&v| format_sig6(v)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn decode_csv(text: &str) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut width = None;
    let mut h = 0;
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let row: Vec<f32> = line
            .split(',')
            .map(|s| s.trim().parse::<f32>())
            .collect::<Result<_, _>>()
            .map_err(|e| Error::Malformed(format!("csv line {}: {e}", i + 1)))?;
        if *width.get_or_insert(row.len()) != row.len() {
            return Err(Error::Malformed(format!("csv line {} has {} values", i + 1, row.len())));
        }
        data.extend(row);
        h += 1;
    }
    Ok(Tensor::new(&[h, width.unwrap_or(0)], data)?)
}

pub fn write_heatmap(m: &ErfMap, path: impl AsRef<Path>, format: HeatmapFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        HeatmapFormat::Pgm => encode_pgm(&m.values),
        HeatmapFormat::Csv => encode_csv(&m.values).into_bytes(),
    };
    fs::write(path, bytes).map_err(io(path))
}

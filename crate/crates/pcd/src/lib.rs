//! File formats, configuration and the `pcd` command line on top of `pcd-core`.

pub mod cli;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod heatmap;
pub mod verify;

pub use codec::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{canonical_json, load_config, parse_config_str};
pub use dataset::{load_dataset, save_dataset};
pub use error::{Error, Result};

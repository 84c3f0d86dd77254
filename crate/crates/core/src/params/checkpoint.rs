//! JSON checkpoint files.
//!
//! ```text
//! {"format_version": 1, "layers": [{"name": "W1", "shape": [32, 8], "values": [...]}, ...]}
//! ```
//!
//! Values are written with 17 significant digits so every `f64` round-trips
//! exactly; layer order is preserved.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use super::{ParamSet, Tensor};
use crate::error::{HamError, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCheckpoint {
    format_version: u32,
    layers: Vec<RawLayer>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

pub fn render_checkpoint(ps: &ParamSet) -> String {
    let mut out = String::new();
    let _ = write!(out, "{{\"format_version\": {CHECKPOINT_FORMAT_VERSION}, \"layers\": [");
    for (i, (name, tensor)) in ps.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let name = serde_json::to_string(name).expect("string serialization cannot fail");
        let shape = serde_json::to_string(tensor.shape()).expect("shape serialization cannot fail");
        let _ = write!(out, "\n  {{\"name\": {name}, \"shape\": {shape}, \"values\": [");
        for (j, v) in tensor.values().iter().enumerate() {
            if j > 0 {
                out.push_str(", ");
            }
            let _ = write!(out, "{v:.16e}");
        }
        out.push_str("]}");
    }
    out.push_str("\n]}\n");
    out
}

pub fn parse_checkpoint(text: &str) -> Result<ParamSet> {
    let raw: RawCheckpoint = serde_json::from_str(text)?;
    if raw.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(HamError::Structural(format!(
            "unsupported checkpoint format_version {}",
            raw.format_version
        )));
    }
    let entries = raw
        .layers
        .into_iter()
        .map(|l| Ok((l.name, Tensor::new(l.shape, l.values)?)))
        .collect::<Result<Vec<_>>>()?;
    ParamSet::from_entries(entries)
}

pub fn save_checkpoint(ps: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_checkpoint(ps)).map_err(|e| HamError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| HamError::io(path, e))?;
    parse_checkpoint(&text)
}

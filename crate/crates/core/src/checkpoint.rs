//! Parameter checkpoints: `<name>.json` lists each array's name and shape,
//! `<name>.bin` holds the values as little-endian `f32`, row-major, in the
//! listed order.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::synthgen::io::{read_f32, write_f32};

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn save(params: &ParamSet, dir: &Path, name: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<Entry> = params
        .iter()
        .map(|(n, v)| Entry {
            name: n.to_string(),
            rows: v.nrows(),
            cols: v.ncols(),
        })
        .collect();
    let path = dir.join(format!("{name}.json"));
    let json = serde_json::to_string_pretty(&entries).expect("entries serialize");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    write_f32(
        &dir.join(format!("{name}.bin")),
        params.iter().flat_map(|(_, v)| v.iter().map(|&x| x as f32).collect::<Vec<_>>()),
    )
}

/// Reads a checkpoint into a new parameter set.
pub fn load(dir: &Path, name: &str) -> Result<ParamSet> {
    let path = dir.join(format!("{name}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let entries: Vec<Entry> = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let bin = dir.join(format!("{name}.bin"));
    let values = read_f32(&bin)?;
    let total: usize = entries.iter().map(|e| e.rows * e.cols).sum();
    if total != values.len() {
        return Err(Error::format(bin, "array size does not match the manifest"));
    }
    let mut ps = ParamSet::new();
    let mut offset = 0;
    for e in entries {
        let n = e.rows * e.cols;
        let data = values[offset..offset + n].iter().map(|&x| x as f64).collect();
        ps.add(e.name, Array2::from_shape_vec((e.rows, e.cols), data).expect("sized"));
        offset += n;
    }
    Ok(ps)
}

/// Loads a checkpoint into an existing model's parameters.
pub fn restore(params: &mut ParamSet, dir: &Path, name: &str) -> Result<()> {
    params.load_from(&load(dir, name)?)
}

//! Dataset files: CSV with header `f0,…,fk,label`, or raw little-endian
//! tensors (`f64` features, `u32` labels) described by a JSON sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Split};
use crate::numerics::Tensor;
use crate::{Error, Result};

pub fn write_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let width = data.features.row_len();
    let mut header: Vec<String> = (0..width).map(|i| format!("f{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for (n, &y) in data.labels.iter().enumerate() {
        let mut rec: Vec<String> = data.features.row(n).iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV dataset as `(N, F)` features. `num_classes` defaults to one
/// more than the largest label.
pub fn read_csv(path: &Path, num_classes: Option<usize>, split: Split) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let width = header.len().checked_sub(1).filter(|&w| w > 0).ok_or_else(|| {
        Error::validation(format!("{}: expected columns f0..fk,label", path.display()))
    })?;
    if header.get(width) != Some("label") {
        return Err(Error::validation(format!("{}: last column must be `label`", path.display())));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::validation(format!("{}: row {}: bad {what}", path.display(), line + 1));
        for f in rec.iter().take(width) {
            data.push(f.trim().parse::<f64>().map_err(|_| bad("feature"))?);
        }
        labels.push(rec.get(width).ok_or_else(|| bad("label"))?.trim().parse::<usize>().map_err(|_| bad("label"))?);
    }
    let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(Tensor::new(vec![labels.len(), width], data)?, labels, classes, split)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawSidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub num_classes: usize,
    pub split: Split,
    pub features_file: String,
    pub labels_file: String,
}

/// Writes `<stem>.features.bin`, `<stem>.labels.bin` and `<stem>.json`
/// into `dir`; returns the sidecar path.
pub fn write_raw(dir: &Path, stem: &str, data: &Dataset) -> Result<PathBuf> {
    let features_file = format!("{stem}.features.bin");
    let labels_file = format!("{stem}.labels.bin");
    let feats: Vec<u8> = data.features.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let labels: Vec<u8> = data.labels.iter().flat_map(|&y| (y as u32).to_le_bytes()).collect();
    let fpath = dir.join(&features_file);
    fs::write(&fpath, feats).map_err(|e| Error::io(&fpath, e))?;
    let lpath = dir.join(&labels_file);
    fs::write(&lpath, labels).map_err(|e| Error::io(&lpath, e))?;
    let sidecar = RawSidecar {
        shape: data.features.shape().to_vec(),
        dtype: "f64-le".into(),
        num_classes: data.num_classes,
        split: data.split,
        features_file,
        labels_file,
    };
    let spath = dir.join(format!("{stem}.json"));
    fs::write(&spath, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&spath, e))?;
    Ok(spath)
}

pub fn read_raw(sidecar_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(sidecar_path).map_err(|e| Error::io(sidecar_path, e))?;
    let side: RawSidecar = serde_json::from_str(&text)?;
    if side.dtype != "f64-le" {
        return Err(Error::validation(format!("unsupported dtype {}", side.dtype)));
    }
    let dir = sidecar_path.parent().unwrap_or(Path::new("."));
    let fpath = dir.join(&side.features_file);
    let fbytes = fs::read(&fpath).map_err(|e| Error::io(&fpath, e))?;
    let lpath = dir.join(&side.labels_file);
    let lbytes = fs::read(&lpath).map_err(|e| Error::io(&lpath, e))?;
    if fbytes.len() % 8 != 0 || lbytes.len() % 4 != 0 {
        return Err(Error::validation("raw tensor file length is not a multiple of the element size"));
    }
    let feats = fbytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels = lbytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    Dataset::new(Tensor::new(side.shape, feats)?, labels, side.num_classes, side.split)
}

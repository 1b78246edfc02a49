//! Flat binary feature-matrix container plus the `row,image_id` sidecar.
//!
//! Layout (little-endian): magic `PQFM`, `u32` layout version, `u32` group
//! code, `u64` rows, `u64` dims, then `rows * dims` `f64` values row-major.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::FeatureGroup;

const MAGIC: &[u8; 4] = b"PQFM";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad feature container: {0}")]
    Format(String),
    #[error("sidecar csv: {0}")]
    Sidecar(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub group: FeatureGroup,
    pub layout_version: u32,
    pub dims: usize,
    pub image_ids: Vec<String>,
    /// Row-major `image_ids.len() x dims`.
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(group: FeatureGroup) -> Self {
        Self { group, layout_version: super::LAYOUT_VERSION, dims: group.dims(), image_ids: Vec::new(), values: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.image_ids.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }

    pub fn push(&mut self, image_id: impl Into<String>, row: &[f64]) {
        assert_eq!(row.len(), self.dims, "row width");
        self.image_ids.push(image_id.into());
        self.values.extend_from_slice(row);
    }

    pub fn index_of(&self, image_id: &str) -> Option<usize> {
        self.image_ids.iter().position(|id| id == image_id)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".ids.csv");
    PathBuf::from(p)
}

pub fn write_feature_matrix(path: &Path, m: &FeatureMatrix) -> Result<(), ContainerError> {
    let io_err = |source| ContainerError::Io { path: path.to_path_buf(), source };
    let mut buf = Vec::with_capacity(28 + m.values.len() * 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&m.layout_version.to_le_bytes());
    buf.extend_from_slice(&m.group.code().to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.dims as u64).to_le_bytes());
    for v in &m.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(io_err)?;

    let side = sidecar_path(path);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(&side)?;
    w.write_record(["row", "image_id"])?;
    for (i, id) in m.image_ids.iter().enumerate() {
        w.write_record([i.to_string().as_str(), id])?;
    }
    w.flush().map_err(|source| ContainerError::Io { path: side, source })?;
    Ok(())
}

pub fn read_feature_matrix(path: &Path) -> Result<FeatureMatrix, ContainerError> {
    let mut raw = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|source| ContainerError::Io { path: path.to_path_buf(), source })?;
    if raw.len() < 28 || &raw[..4] != MAGIC {
        return Err(ContainerError::Format("missing PQFM header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(raw[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(raw[o..o + 8].try_into().unwrap());
    let layout_version = u32_at(4);
    let group = FeatureGroup::from_code(u32_at(8))
        .ok_or_else(|| ContainerError::Format(format!("unknown group code {}", u32_at(8))))?;
    let rows = u64_at(12) as usize;
    let dims = u64_at(20) as usize;
    let body = &raw[28..];
    if body.len() != rows * dims * 8 {
        return Err(ContainerError::Format(format!("expected {} value bytes, found {}", rows * dims * 8, body.len())));
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();

    let mut rdr = csv::Reader::from_path(sidecar_path(path))?;
    let mut image_ids = Vec::with_capacity(rows);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.get(0) != Some(i.to_string().as_str()) {
            return Err(ContainerError::Format(format!("sidecar row {i} out of order")));
        }
        image_ids.push(rec.get(1).unwrap_or_default().to_string());
    }
    if image_ids.len() != rows {
        return Err(ContainerError::Format(format!("sidecar has {} ids for {rows} rows", image_ids.len())));
    }
    Ok(FeatureMatrix { group, layout_version, dims, image_ids, values })
}

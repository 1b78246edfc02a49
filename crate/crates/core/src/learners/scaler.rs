use serde::{Deserialize, Serialize};

pub const STD_FLOOR: f64 = 1e-12;

/// Per-dimension standardization. Columns whose spread is below the floor map to 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn dims(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| if *s <= STD_FLOOR { 0.0 } else { (x - m) / s })
            .collect()
    }
}

/// Fit on a row-major `n x dims` matrix (population standard deviation).
pub fn fit_scaler(x: &[f64], dims: usize) -> Scaler {
    let n = (x.len() / dims.max(1)).max(1) as f64;
    let mut mean = vec![0.0; dims];
    for row in x.chunks_exact(dims) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dims];
    for row in x.chunks_exact(dims) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
    Scaler { mean, std }
}

pub fn apply_scaler(scaler: &Scaler, x: &[f64]) -> Vec<f64> {
    x.chunks_exact(scaler.dims()).flat_map(|row| scaler.transform_row(row)).collect()
}

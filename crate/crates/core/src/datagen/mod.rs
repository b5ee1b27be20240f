//! Desk-scale datasets and per-member augmentation views.

mod io;
mod views;

pub use io::{read_csv, read_raw, write_csv, write_raw, RawSidecar};
pub use views::{stream_rng, MixTargets, Transform, View, ViewPipeline};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result};

/// Angular extent of every spiral arm, in full turns.
pub const SPIRAL_TURNS: f64 = 2.5;
/// Radius at the outer end of every arm.
pub const SPIRAL_RADIUS: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Tensor<f64>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::validation(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::validation(format!("label {bad} outside [0, {num_classes})")));
        }
        if !features.all_finite() {
            return Err(Error::validation("features must be finite"));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape, e.g. `[F]` or `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Splits off the first `n_train` samples as the training set; the rest
    /// become the test set.
    pub fn split_at(self, n_train: usize) -> Result<(Dataset, Dataset)> {
        if n_train > self.len() {
            return Err(Error::validation("split point beyond dataset size"));
        }
        let idx: Vec<usize> = (0..self.len()).collect();
        let (a, b) = idx.split_at(n_train);
        let take = |ids: &[usize], split| Dataset {
            features: self.features.select_rows(ids),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            split,
        };
        Ok((take(a, Split::Train), take(b, Split::Test)))
    }
}

/// Interleaved spiral arms in the plane. Sample `i` belongs to class
/// `i mod classes`; its position along the arm is uniform and Gaussian noise
/// of standard deviation `noise` is added to both coordinates.
pub fn spirals(n_total: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::validation("spirals need at least two classes"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::validation("noise must be a finite non-negative value"));
    }
    let mut rng = stream_rng(&[seed, 0x5b1a1]);
    let mut data = Vec::with_capacity(2 * n_total);
    let mut labels = Vec::with_capacity(n_total);
    for i in 0..n_total {
        let k = i % classes;
        let t: f64 = rng.gen();
        let (x, y) = spiral_point(k, classes, t);
        let nx: f64 = StandardNormal.sample(&mut rng);
        let ny: f64 = StandardNormal.sample(&mut rng);
        data.push(x + noise * nx);
        data.push(y + noise * ny);
        labels.push(k);
    }
    Dataset::new(Tensor::new(vec![n_total, 2], data)?, labels, classes, Split::Train)
}

/// Point at fraction `t ∈ [0, 1)` along arm `k`.
pub fn spiral_point(k: usize, classes: usize, t: f64) -> (f64, f64) {
    let angle = std::f64::consts::TAU * (k as f64 / classes as f64 + SPIRAL_TURNS * t);
    let r = SPIRAL_RADIUS * t;
    (r * angle.cos(), r * angle.sin())
}

pub fn make_spirals(n_per_class: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset> {
    spirals(n_per_class * classes, classes, noise, seed)
}

/// Isotropic Gaussian clusters with centres spread on a circle of radius 2
/// in the first two feature dimensions.
pub fn make_blobs(n_total: usize, classes: usize, dim: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim < 2 {
        return Err(Error::validation("blobs need at least two classes and two dimensions"));
    }
    let mut rng = stream_rng(&[seed, 0xb10b5]);
    let mut data = Vec::with_capacity(dim * n_total);
    let mut labels = Vec::with_capacity(n_total);
    for i in 0..n_total {
        let k = i % classes;
        let a = std::f64::consts::TAU * k as f64 / classes as f64;
        for d in 0..dim {
            let centre = match d {
                0 => 2.0 * a.cos(),
                1 => 2.0 * a.sin(),
                _ => 0.0,
            };
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(centre + noise * z);
        }
        labels.push(k);
    }
    Dataset::new(Tensor::new(vec![n_total, dim], data)?, labels, classes, Split::Train)
}

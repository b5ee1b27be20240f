//! Combining member outputs, and the PCA spread of final-layer weights.

use serde::{Deserialize, Serialize};

use crate::cotrain::softmax;
use crate::numerics::Tensor;
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combine {
    #[default]
    Average,
    /// Per sample, the member with the largest top score supplies its row.
    /// Ties go to the lowest member index.
    MaxConfidence,
}

/// Defaults to averaging raw (pre-softmax) outputs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleRule {
    pub combine: Combine,
    pub apply_softmax_first: bool,
}

impl EnsembleRule {
    pub const ALL: [EnsembleRule; 4] = [
        EnsembleRule {
            combine: Combine::Average,
            apply_softmax_first: false,
        },
        EnsembleRule {
            combine: Combine::Average,
            apply_softmax_first: true,
        },
        EnsembleRule {
            combine: Combine::MaxConfidence,
            apply_softmax_first: false,
        },
        EnsembleRule {
            combine: Combine::MaxConfidence,
            apply_softmax_first: true,
        },
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Combined<T> {
    pub scores: Tensor<T>,
    pub predictions: Vec<usize>,
}

pub fn combine<T: Scalar>(rule: EnsembleRule, outputs: &[Tensor<T>]) -> Result<Combined<T>> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::validation("ensemble needs at least one member"))?;
    if first.shape().len() != 2 {
        return Err(Error::validation("member outputs must be (batch, C) matrices"));
    }
    if outputs.iter().any(|o| o.shape() != first.shape()) {
        return Err(Error::validation("member outputs differ in shape"));
    }
    let prepared: Vec<Tensor<T>> = if rule.apply_softmax_first {
        outputs
            .iter()
            .map(|o| softmax(o).map(|p| p.values().clone()))
            .collect::<Result<_>>()?
    } else {
        outputs.to_vec()
    };
    let scores = match rule.combine {
        Combine::Average => {
            let s = T::of(prepared.len() as f64);
            let mut acc = Tensor::zeros(first.shape());
            for o in &prepared {
                for (a, &v) in acc.data_mut().iter_mut().zip(o.data()) {
                    *a = *a + v;
                }
            }
            acc.data_mut().iter_mut().for_each(|a| *a = *a / s);
            acc
        }
        Combine::MaxConfidence => {
            let mut acc = Tensor::zeros(first.shape());
            for n in 0..first.rows() {
                let mut best = 0;
                let mut best_conf = T::neg_infinity();
                for (m, o) in prepared.iter().enumerate() {
                    let conf = o.row(n).iter().copied().fold(T::neg_infinity(), T::max);
                    if conf > best_conf {
                        best = m;
                        best_conf = conf;
                    }
                }
                acc.row_mut(n).copy_from_slice(prepared[best].row(n));
            }
            acc
        }
    };
    let predictions = scores.argmax_rows();
    Ok(Combined { scores, predictions })
}

/// Fraction of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    /// One 2-D point per member.
    pub coords: Vec<[f64; 2]>,
    /// Population standard deviation over all `2·S` coordinates.
    pub std: f64,
}

/// Projects the centred weight vectors onto their top two principal
/// directions via the `S×S` Gram matrix.
pub fn weight_spread(weights: &[Vec<f64>]) -> Result<Spread> {
    let s = weights.len();
    if s < 2 {
        return Err(Error::validation("weight spread needs at least two members"));
    }
    let dim = weights[0].len();
    if dim == 0 || weights.iter().any(|w| w.len() != dim) {
        return Err(Error::validation("weight vectors must be non-empty and of equal length"));
    }
    let mean: Vec<f64> = (0..dim)
        .map(|j| weights.iter().map(|w| w[j]).sum::<f64>() / s as f64)
        .collect();
    let centred: Vec<Vec<f64>> = weights
        .iter()
        .map(|w| w.iter().zip(&mean).map(|(a, m)| a - m).collect())
        .collect();
    let mut gram = vec![0.0; s * s];
    for i in 0..s {
        for j in i..s {
            let v: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
            gram[i * s + j] = v;
            gram[j * s + i] = v;
        }
    }
    let (vals, vecs) = jacobi_eigen(gram, s);
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let mut coords = vec![[0.0; 2]; s];
    for (k, &e) in order.iter().take(2).enumerate() {
        let lambda = vals[e].max(0.0);
        if lambda <= 1e-12 * vals[order[0]].abs().max(f64::MIN_POSITIVE) {
            continue;
        }
        // sign convention: largest-magnitude component positive
        let col: Vec<f64> = (0..s).map(|i| vecs[i * s + e]).collect();
        let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for i in 0..s {
            coords[i][k] = sign * lambda.sqrt() * col[i];
        }
    }
    let all: Vec<f64> = coords.iter().flatten().copied().collect();
    let m = all.iter().sum::<f64>() / all.len() as f64;
    let std = (all.iter().map(|v| (v - m).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
    Ok(Spread { coords, std })
}

/// Cyclic Jacobi rotations on a symmetric row-major `n×n` matrix. Returns
/// eigenvalues and the eigenvector matrix (eigenvectors in columns).
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off.sqrt() <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

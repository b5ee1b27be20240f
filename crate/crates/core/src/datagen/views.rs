use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{Error, Result, Scalar};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Random stream fully determined by `key`; no state is shared between keys.
pub fn stream_rng(key: &[u64]) -> ChaCha8Rng {
    let seed = key.iter().fold(0x243f_6a88_85a3_08d3, |acc, &k| splitmix(acc ^ splitmix(k)));
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Transform {
    /// Mirrors image columns with probability `p`.
    HorizontalFlip { p: f64 },
    /// Zero-pads by `pad` pixels and crops back at a random offset.
    PadCrop { pad: usize },
    /// With probability `p` replaces one rectangle (images) or one contiguous
    /// feature span (vectors) whose area fraction lies in `area`. `fill`
    /// fixes the replacement value; otherwise standard-normal noise is used.
    RandomErasing {
        p: f64,
        area: (f64, f64),
        fill: Option<f64>,
    },
    /// Adds `sigma`-scaled Gaussian noise to every feature.
    FeatureJitter { sigma: f64 },
    /// Convex combination with a permuted copy of the batch, `λ ~ Beta(α, α)`.
    Mixup { alpha: f64 },
}

impl Transform {
    fn validate(&self) -> Result<()> {
        let prob = |p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::validation(format!("probability {p} outside [0, 1]")))
            }
        };
        match *self {
            Transform::HorizontalFlip { p } => prob(p),
            Transform::RandomErasing { p, area, .. } => {
                prob(p)?;
                if !(0.0 < area.0 && area.0 <= area.1 && area.1 <= 1.0) {
                    return Err(Error::validation(format!("erasing area range {area:?} invalid")));
                }
                Ok(())
            }
            Transform::FeatureJitter { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::validation("jitter sigma must be non-negative"))
            }
            Transform::Mixup { alpha } if !(alpha >= 0.0 && alpha.is_finite()) => {
                Err(Error::validation("mixup alpha must be non-negative"))
            }
            _ => Ok(()),
        }
    }
}

/// Mixed-label bookkeeping: the loss is `λ·CE(p, y_a) + (1−λ)·CE(p, y_b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixTargets {
    pub y_a: Vec<usize>,
    pub y_b: Vec<usize>,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View<T> {
    pub features: Tensor<T>,
    pub mix: Option<MixTargets>,
}

/// One member's augmentation pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewPipeline {
    pub member_index: usize,
    pub seed: u64,
    pub transforms: Vec<Transform>,
}

impl ViewPipeline {
    pub fn new(member_index: usize, seed: u64, transforms: Vec<Transform>) -> Result<Self> {
        for t in &transforms {
            t.validate()?;
        }
        Ok(ViewPipeline {
            member_index,
            seed,
            transforms,
        })
    }

    pub fn identity(member_index: usize) -> Self {
        ViewPipeline {
            member_index,
            seed: 0,
            transforms: Vec::new(),
        }
    }

    /// Applies the transforms in order. Randomness comes from a stream keyed
    /// by `(seed, member_index, epoch, batch_index)`.
    pub fn apply<T: Scalar>(
        &self,
        batch: &Tensor<T>,
        labels: &[usize],
        epoch: usize,
        batch_index: usize,
    ) -> Result<View<T>> {
        if batch.rows() != labels.len() {
            return Err(Error::validation("batch and label counts differ"));
        }
        if batch.shape().len() != 2 && batch.shape().len() != 4 {
            return Err(Error::validation(format!(
                "views expect (N, F) or (N, C, H, W) batches, got {:?}",
                batch.shape()
            )));
        }
        let mut rng = stream_rng(&[self.seed, self.member_index as u64, epoch as u64, batch_index as u64]);
        let mut x = batch.clone();
        let mut mix = None;
        for t in &self.transforms {
            match *t {
                Transform::HorizontalFlip { p } => flip(&mut x, p, &mut rng)?,
                Transform::PadCrop { pad } => pad_crop(&mut x, pad, &mut rng)?,
                Transform::RandomErasing { p, area, fill } => erase(&mut x, p, area, fill, &mut rng),
                Transform::FeatureJitter { sigma } => {
                    if sigma > 0.0 {
                        for v in x.data_mut() {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            *v = *v + T::of(sigma * z);
                        }
                    }
                }
                Transform::Mixup { alpha } => {
                    if alpha > 0.0 {
                        mix = Some(mixup(&mut x, labels, alpha, &mut rng)?);
                    }
                }
            }
        }
        if x.shape() != batch.shape() {
            return Err(Error::Internal("augmentation changed the batch shape".into()));
        }
        Ok(View { features: x, mix })
    }
}

fn image_dims<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [_, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::validation(format!("{what} needs (N, C, H, W) batches"))),
    }
}

fn flip<T: Scalar>(x: &mut Tensor<T>, p: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    let (c, h, w) = image_dims(x, "horizontal flip")?;
    for n in 0..x.rows() {
        if rng.gen::<f64>() < p {
            let sample = x.row_mut(n);
            for row in sample.chunks_exact_mut(w).take(c * h) {
                row.reverse();
            }
        }
    }
    Ok(())
}

fn pad_crop<T: Scalar>(x: &mut Tensor<T>, pad: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let (c, h, w) = image_dims(x, "pad-and-crop")?;
    if pad == 0 {
        return Ok(());
    }
    for n in 0..x.rows() {
        // offset of the crop window inside the padded image, minus the pad
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let src = x.row(n).to_vec();
        let dst = x.row_mut(n);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let sy = y as isize + dy;
                    let sx = xx as isize + dx;
                    dst[(ch * h + y) * w + xx] = if sy >= 0 && (sy as usize) < h && sx >= 0 && (sx as usize) < w {
                        src[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }
    Ok(())
}

fn erase<T: Scalar>(x: &mut Tensor<T>, p: f64, area: (f64, f64), fill: Option<f64>, rng: &mut ChaCha8Rng) {
    let dims = x.shape().to_vec();
    for n in 0..x.rows() {
        if rng.gen::<f64>() >= p {
            continue;
        }
        let frac = rng.gen_range(area.0..=area.1);
        let sample = x.row_mut(n);
        let put = |v: &mut T, rng: &mut ChaCha8Rng| {
            *v = T::of(fill.unwrap_or_else(|| StandardNormal.sample(rng)));
        };
        if let [_, c, h, w] = dims[..] {
            // aspect ratio log-uniform in [0.3, 1/0.3]
            let log_r = rng.gen_range((0.3f64).ln()..=(1.0 / 0.3f64).ln());
            let target = frac * (h * w) as f64;
            let eh = ((target * log_r.exp()).sqrt().round() as usize).clamp(1, h);
            let ew = ((target / log_r.exp()).sqrt().round() as usize).clamp(1, w);
            let y0 = rng.gen_range(0..=h - eh);
            let x0 = rng.gen_range(0..=w - ew);
            for ch in 0..c {
                for y in y0..y0 + eh {
                    for xx in x0..x0 + ew {
                        put(&mut sample[(ch * h + y) * w + xx], rng);
                    }
                }
            }
        } else {
            let f = sample.len();
            let span = ((frac * f as f64).round() as usize).clamp(1, f);
            let start = rng.gen_range(0..=f - span);
            for v in &mut sample[start..start + span] {
                put(v, rng);
            }
        }
    }
}

fn mixup<T: Scalar>(x: &mut Tensor<T>, labels: &[usize], alpha: f64, rng: &mut ChaCha8Rng) -> Result<MixTargets> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::validation(format!("mixup alpha: {e}")))?;
    let lambda: f64 = beta.sample(rng);
    let mut perm: Vec<usize> = (0..labels.len()).collect();
    perm.shuffle(rng);
    let src = x.clone();
    let (l, one_minus) = (T::of(lambda), T::of(1.0 - lambda));
    for (n, &m) in perm.iter().enumerate() {
        let other = src.row(m);
        for (v, &o) in x.row_mut(n).iter_mut().zip(other) {
            *v = l * *v + one_minus * o;
        }
    }
    Ok(MixTargets {
        y_a: labels.to_vec(),
        y_b: perm.iter().map(|&m| labels[m]).collect(),
        lambda,
    })
}

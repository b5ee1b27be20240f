//! Central finite differences against the analytic gradient of the joint
//! co-training loss.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{total_loss, Target};
use crate::datagen::stream_rng;
use crate::numerics::{MemberModel, Tensor};
use crate::{Error, Result};

const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
const GRAD_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub members: usize,
    pub lambda: f64,
    pub total_parameters: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// `(member, parameter tensor, flat index)` of the worst entry.
    pub worst: (usize, String, usize),
}

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn loss(models: &[MemberModel<f64>], x: &Tensor<f64>, y: &[usize], lambda: f64) -> Result<f64> {
    let logits = models.iter().map(|m| m.infer(x)).collect::<Result<Vec<_>>>()?;
    let targets = vec![Target::Hard(y); models.len()];
    Ok(total_loss(&logits, &targets, lambda)?.total)
}

/// Builds `members` random toy networks sharing one `(2, 5, 5)` input: member
/// 0 is a small conv net, the rest are MLPs over the flattened image. Checks
/// `samples` randomly chosen parameters of the joint loss.
pub fn gradcheck(seed: u64, members: usize, samples: usize, lambda: f64) -> Result<GradcheckReport> {
    if members == 0 || samples == 0 {
        return Err(Error::validation("gradcheck needs at least one member and one sample"));
    }
    let mut rng = stream_rng(&[0x9c, seed]);
    let classes = rng.gen_range(3..6);
    let mut models = (0..members)
        .map(|i| {
            let mut m = if i == 0 {
                MemberModel::<f64>::conv_net([2, 5, 5], &[rng.gen_range(2..5), rng.gen_range(2..5)], classes)?
            } else {
                let depth = rng.gen_range(1..3);
                let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(4..12)).collect();
                MemberModel::<f64>::mlp(50, &hidden, classes)?
            };
            m.init_params(rng.gen());
            // non-zero biases so their gradients are exercised too
            for p in m.params_mut() {
                if !p.decay {
                    p.value.data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.sample::<f64, _>(StandardNormal));
                }
            }
            Ok(m.with_member_index(i))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = 6;
    let x = Tensor::new(vec![n, 2, 5, 5], (0..n * 50).map(|_| rng.sample(StandardNormal)).collect())?;
    let y: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();

    let logits = models.iter_mut().map(|m| m.forward(&x)).collect::<Result<Vec<_>>>()?;
    let targets = vec![Target::Hard(&y); members];
    let terms = total_loss(&logits, &targets, lambda)?;
    for (m, g) in models.iter_mut().zip(&terms.logit_grads) {
        m.backward(g)?;
    }

    let mut slots = Vec::new();
    for (mi, m) in models.iter().enumerate() {
        for (pi, p) in m.params().iter().enumerate() {
            for k in 0..p.value.len() {
                slots.push((mi, pi, k));
            }
        }
    }
    let total_parameters = slots.len();
    let picks = sample(&mut rng, total_parameters, samples.min(total_parameters));

    let mut worst = (0.0, (0, String::new(), 0));
    let mut sum = 0.0;
    for idx in picks.iter() {
        let (mi, pi, k) = slots[idx];
        let analytic = models[mi].params()[pi].grad.data()[k];
        let orig = models[mi].params()[pi].value.data()[k];
        models[mi].params_mut()[pi].value.data_mut()[k] = orig + STEP;
        let up = loss(&models, &x, &y, lambda)?;
        models[mi].params_mut()[pi].value.data_mut()[k] = orig - STEP;
        let down = loss(&models, &x, &y, lambda)?;
        models[mi].params_mut()[pi].value.data_mut()[k] = orig;
        let err = rel_error(analytic, (up - down) / (2.0 * STEP));
        sum += err;
        if err >= worst.0 {
            worst = (err, (mi, models[mi].params()[pi].name.clone(), k));
        }
    }
    let checked = picks.len();
    Ok(GradcheckReport {
        seed,
        members,
        lambda,
        total_parameters,
        checked,
        max_rel_error: worst.0,
        mean_rel_error: sum / checked as f64,
        worst: worst.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_gradient_matches_finite_differences() {
        for seed in [1, 2] {
            let r = gradcheck(seed, 3, 60, 0.5).unwrap();
            assert_eq!(r.checked, 60);
            assert!(r.max_rel_error < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn single_member_has_no_cot_gradient() {
        let r = gradcheck(3, 1, 30, 0.5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn rel_error_floors_tiny_gradients() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!(rel_error(0.0, 1e-12) < 1e-4);
    }
}

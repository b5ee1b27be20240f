use crate::datagen::MixTargets;
use crate::numerics::Tensor;
use crate::{Error, Result, Scalar};

/// Logarithms are taken of `max(p, LOG_FLOOR)`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Row-stochastic batch of class probabilities, shape `(batch, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbBatch<T> {
    values: Tensor<T>,
    normalized: bool,
}

impl<T: Scalar> ProbBatch<T> {
    /// Wraps rows that must already be distributions.
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::validation("probabilities must be a (batch, C) matrix"));
        }
        let tol = (64.0 * T::epsilon().as_f64() * values.row_len() as f64).max(1e-9);
        for n in 0..values.rows() {
            let row = values.row(n);
            if row.iter().any(|&p| !(p >= T::zero())) {
                return Err(Error::validation(format!("row {n} has a negative or NaN entry")));
            }
            let s: f64 = row.iter().map(|p| p.as_f64()).sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::validation(format!("row {n} sums to {s}, not 1")));
            }
        }
        Ok(ProbBatch {
            values,
            normalized: true,
        })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn classes(&self) -> usize {
        self.values.row_len()
    }
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<ProbBatch<T>> {
    if logits.shape().len() != 2 {
        return Err(Error::validation("logits must be a (batch, C) matrix"));
    }
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::validation("NaN logit"));
    }
    let mut out = logits.clone();
    for n in 0..out.rows() {
        let row = out.row_mut(n);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(ProbBatch {
        values: out,
        normalized: true,
    })
}

fn clamped_ln<T: Scalar>(p: T) -> T {
    p.max(T::of(LOG_FLOOR)).ln()
}

fn check_labels(labels: &[usize], p_rows: usize, classes: usize) -> Result<()> {
    if labels.len() != p_rows {
        return Err(Error::validation(format!("{} labels for {p_rows} rows", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::validation(format!("label {y} outside [0, {classes})")));
    }
    Ok(())
}

/// Batch-mean cross-entropy against one-hot labels.
pub fn cross_entropy<T: Scalar>(p: &ProbBatch<T>, labels: &[usize]) -> Result<T> {
    check_labels(labels, p.rows(), p.classes())?;
    let n = T::of(p.rows() as f64);
    Ok(-labels
        .iter()
        .enumerate()
        .map(|(i, &y)| clamped_ln(p.values.row(i)[y]))
        .sum::<T>()
        / n)
}

/// `λ·CE(p, y_a) + (1−λ)·CE(p, y_b)` for a mixup batch.
pub fn cross_entropy_mixed<T: Scalar>(p: &ProbBatch<T>, mix: &MixTargets) -> Result<T> {
    let l = T::of(mix.lambda);
    Ok(l * cross_entropy(p, &mix.y_a)? + (T::one() - l) * cross_entropy(p, &mix.y_b)?)
}

/// Shannon entropy (natural log), averaged over the batch.
pub fn entropy<T: Scalar>(p: &ProbBatch<T>) -> T {
    let mut h = T::zero();
    for &v in p.values.data() {
        h = h - v * clamped_ln(v);
    }
    h / T::of(p.rows() as f64)
}

/// Generalized Jensen-Shannon divergence `H(mean p_i) − mean H(p_i)`.
pub fn cot_loss<T: Scalar>(ps: &[ProbBatch<T>]) -> Result<T> {
    if ps.len() < 2 {
        return Err(Error::validation("co-training loss needs at least two members"));
    }
    let shape = ps[0].values.shape();
    if ps.iter().any(|p| p.values.shape() != shape) {
        return Err(Error::validation("member probability batches differ in shape"));
    }
    let s = T::of(ps.len() as f64);
    let mean = mean_probs(ps);
    let mean_h = ps.iter().map(entropy).sum::<T>() / s;
    Ok(entropy(&mean) - mean_h)
}

fn mean_probs<T: Scalar>(ps: &[ProbBatch<T>]) -> ProbBatch<T> {
    let s = T::of(ps.len() as f64);
    let mut acc = Tensor::zeros(ps[0].values.shape());
    for p in ps {
        for (a, &v) in acc.data_mut().iter_mut().zip(p.values.data()) {
            *a = *a + v;
        }
    }
    acc.data_mut().iter_mut().for_each(|a| *a = *a / s);
    ProbBatch {
        values: acc,
        normalized: true,
    }
}

/// Supervision for one member's view of the batch.
#[derive(Clone, Copy, Debug)]
pub enum Target<'a> {
    Hard(&'a [usize]),
    Mixed(&'a MixTargets),
}

impl Target<'_> {
    fn loss<T: Scalar>(&self, p: &ProbBatch<T>) -> Result<T> {
        match *self {
            Target::Hard(y) => cross_entropy(p, y),
            Target::Mixed(m) => cross_entropy_mixed(p, m),
        }
    }

    /// Adds `−t/N` for the (soft) target distribution `t` to `grad`.
    fn subtract_target<T: Scalar>(&self, grad: &mut Tensor<T>, n: T) {
        let c = grad.row_len();
        let mut put = |labels: &[usize], w: T| {
            for (i, &y) in labels.iter().enumerate() {
                let g = &mut grad.data_mut()[i * c + y];
                *g = *g - w / n;
            }
        };
        match *self {
            Target::Hard(y) => put(y, T::one()),
            Target::Mixed(m) => {
                put(&m.y_a, T::of(m.lambda));
                put(&m.y_b, T::of(1.0 - m.lambda));
            }
        }
    }
}

/// Loss terms and the gradient of the total with respect to every member's
/// logits.
#[derive(Clone, Debug)]
pub struct LossTerms<T> {
    pub ce: Vec<T>,
    /// `None` when there is a single member; the term is then never evaluated.
    pub cot: Option<T>,
    pub total: T,
    pub logit_grads: Vec<Tensor<T>>,
}

/// `Σ_i CE(softmax(z_i), y_i) + λ·L_cot(softmax(z_1), …, softmax(z_S))`.
pub fn total_loss<T: Scalar>(logits: &[Tensor<T>], targets: &[Target<'_>], lambda: T) -> Result<LossTerms<T>> {
    if logits.is_empty() || logits.len() != targets.len() {
        return Err(Error::validation("need one target per member and at least one member"));
    }
    let probs = logits.iter().map(softmax).collect::<Result<Vec<_>>>()?;
    let ce = probs
        .iter()
        .zip(targets)
        .map(|(p, t)| t.loss(p))
        .collect::<Result<Vec<_>>>()?;
    let cot = if probs.len() > 1 { Some(cot_loss(&probs)?) } else { None };
    let total = ce.iter().copied().sum::<T>() + cot.map_or(T::zero(), |c| lambda * c);

    let n = T::of(probs[0].rows() as f64);
    let s = T::of(probs.len() as f64);
    let mean = (probs.len() > 1).then(|| mean_probs(&probs));
    let mut logit_grads = Vec::with_capacity(probs.len());
    for (p, t) in probs.iter().zip(targets) {
        // ∂CE/∂z = (p − t)/N
        let mut g = p.values.clone();
        g.data_mut().iter_mut().for_each(|v| *v = *v / n);
        t.subtract_target(&mut g, n);
        if let (Some(m), true) = (&mean, lambda != T::zero()) {
            // ∂L_cot/∂p = (ln p − ln m)/(N·S), pushed through the softmax Jacobian
            let c = g.row_len();
            let scale = lambda / (n * s);
            for i in 0..p.rows() {
                let pr = p.values.row(i);
                let mr = m.values.row(i);
                let dp: Vec<T> = pr
                    .iter()
                    .zip(mr)
                    .map(|(&pv, &mv)| (clamped_ln(pv) - clamped_ln(mv)) * scale)
                    .collect();
                let inner: T = dp.iter().zip(pr).map(|(&d, &pv)| d * pv).sum();
                let gr = &mut g.data_mut()[i * c..(i + 1) * c];
                for k in 0..c {
                    gr[k] = gr[k] + pr[k] * (dp[k] - inner);
                }
            }
        }
        logit_grads.push(g);
    }
    Ok(LossTerms {
        ce,
        cot,
        total,
        logit_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn probs(rows: &[&[f64]]) -> ProbBatch<f64> {
        ProbBatch::new(Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()).unwrap()
    }

    fn random_logits(n: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = stream_rng(&[seed]);
        Tensor::new(vec![n, c], (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&Tensor::<f64>::new(vec![1, 4], vec![0.3; 4]).unwrap()).unwrap();
        assert!(p.values().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax(&Tensor::<f64>::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap()).unwrap();
        assert!((p.values().data()[0] - 0.25).abs() < 1e-15);
        assert!((p.values().data()[1] - 0.75).abs() < 1e-15);
        let z = random_logits(3, 5, 1);
        let mut shifted = z.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 123.0);
        let (a, b) = (softmax(&z).unwrap(), softmax(&shifted).unwrap());
        for (x, y) in a.values().data().iter().zip(b.values().data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(softmax(&Tensor::<f64>::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap()).is_err());
        // huge logits stay finite
        let big = softmax(&Tensor::<f64>::new(vec![1, 2], vec![1e308, 0.0]).unwrap()).unwrap();
        assert_eq!(big.values().data(), &[1.0, 0.0]);
    }

    #[test]
    fn prob_batch_rejects_non_distributions() {
        assert!(ProbBatch::new(Tensor::<f64>::new(vec![1, 2], vec![0.5, 0.6]).unwrap()).is_err());
        assert!(ProbBatch::new(Tensor::<f64>::new(vec![1, 2], vec![1.5, -0.5]).unwrap()).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&probs(&[&[0.0, 1.0, 0.0]]), &[1]).unwrap(), 0.0);
        let uniform = probs(&[&[0.1; 10]]);
        assert!((cross_entropy(&uniform, &[7]).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&uniform, &[10]).is_err());
        // per-sample oracle
        let p = softmax(&random_logits(3, 4, 2)).unwrap();
        let y = [2, 0, 3];
        let mut oracle = 0.0;
        for i in 0..3 {
            oracle += -p.values().row(i)[y[i]].ln();
        }
        assert!((cross_entropy(&p, &y).unwrap() - oracle / 3.0).abs() < 1e-12);
        // the floor keeps a zero probability finite
        let zero = probs(&[&[1.0, 0.0]]);
        assert!((cross_entropy(&zero, &[1]).unwrap() + LOG_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn mixed_cross_entropy_interpolates() {
        let p = softmax(&random_logits(2, 3, 5)).unwrap();
        let mix = MixTargets {
            y_a: vec![0, 1],
            y_b: vec![2, 2],
            lambda: 0.3,
        };
        let e = 0.3 * cross_entropy(&p, &[0, 1]).unwrap() + 0.7 * cross_entropy(&p, &[2, 2]).unwrap();
        assert!((cross_entropy_mixed(&p, &mix).unwrap() - e).abs() < 1e-15);
    }

    #[test]
    fn cot_loss_examples() {
        let p = softmax(&random_logits(4, 3, 3)).unwrap();
        assert!(cot_loss(&[p.clone(), p.clone(), p.clone()]).unwrap().abs() < 1e-15);
        let a = probs(&[&[1.0, 0.0]]);
        let b = probs(&[&[0.0, 1.0]]);
        assert!((cot_loss(&[a.clone(), b]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!(cot_loss(&[a.clone()]).is_err());
        assert!(cot_loss(&[a, probs(&[&[0.5, 0.5], &[0.5, 0.5]])]).is_err());
    }

    #[test]
    fn cot_loss_matches_direct_summation() {
        let ps: Vec<ProbBatch<f64>> = (0..3).map(|i| softmax(&random_logits(5, 4, 10 + i)).unwrap()).collect();
        let mut oracle = 0.0;
        for n in 0..5 {
            let mut h_mean = 0.0;
            let mut mean_h = 0.0;
            for c in 0..4 {
                let m: f64 = ps.iter().map(|p| p.values().row(n)[c]).sum::<f64>() / 3.0;
                h_mean -= m * m.ln();
                for p in &ps {
                    let v = p.values().row(n)[c];
                    mean_h -= v * v.ln() / 3.0;
                }
            }
            oracle += (h_mean - mean_h) / 5.0;
        }
        assert!((cot_loss(&ps).unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn total_loss_special_cases() {
        let z: Vec<Tensor<f64>> = (0..3).map(|i| random_logits(4, 3, 20 + i)).collect();
        let y = [0, 1, 2, 1];
        let targets = [Target::Hard(&y); 3];
        let t = total_loss(&z, &targets, 0.0).unwrap();
        let ce_sum: f64 = z.iter().map(|zi| cross_entropy(&softmax(zi).unwrap(), &y).unwrap()).sum();
        assert!((t.total - ce_sum).abs() < 1e-12);

        let same = vec![z[0].clone(), z[0].clone()];
        let t = total_loss(&same, &targets[..2], 0.5).unwrap();
        assert!((t.total - t.ce.iter().sum::<f64>()).abs() < 1e-12);

        let single = total_loss(&z[..1], &targets[..1], 0.5).unwrap();
        assert!(single.cot.is_none());
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let z: Vec<Tensor<f64>> = (0..3).map(|i| random_logits(3, 4, 30 + i)).collect();
        let y = [3, 0, 1];
        let mix = MixTargets {
            y_a: vec![3, 0, 1],
            y_b: vec![1, 1, 2],
            lambda: 0.35,
        };
        let targets = [Target::Hard(&y), Target::Mixed(&mix), Target::Hard(&y)];
        let lambda = 0.7;
        let terms = total_loss(&z, &targets, lambda).unwrap();
        let h = 1e-6;
        for m in 0..3 {
            for j in 0..z[m].len() {
                let mut zp = z.clone();
                zp[m].data_mut()[j] += h;
                let up = total_loss(&zp, &targets, lambda).unwrap().total;
                zp[m].data_mut()[j] -= 2.0 * h;
                let down = total_loss(&zp, &targets, lambda).unwrap().total;
                let numeric = (up - down) / (2.0 * h);
                let analytic = terms.logit_grads[m].data()[j];
                assert!(
                    (numeric - analytic).abs() <= 1e-7 + 1e-5 * analytic.abs(),
                    "member {m} logit {j}: {analytic} vs {numeric}"
                );
            }
        }
    }

    fn arb_probs(s: usize) -> impl Strategy<Value = Vec<ProbBatch<f64>>> {
        proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3 * 4), s).prop_map(|sets| {
            sets.into_iter()
                .map(|raw| {
                    let rows: Vec<Vec<f64>> = raw
                        .chunks(4)
                        .map(|r| {
                            let s: f64 = r.iter().map(|v| v + 1e-9).sum();
                            r.iter().map(|v| (v + 1e-9) / s).collect()
                        })
                        .collect();
                    ProbBatch::new(Tensor::from_rows(&rows).unwrap()).unwrap()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn cot_loss_is_bounded_and_symmetric(ps in (2usize..6).prop_flat_map(arb_probs)) {
            let v = cot_loss(&ps).unwrap();
            let s = ps.len() as f64;
            prop_assert!(v >= -1e-12 && v <= s.ln() + 1e-12, "{}", v);
            let mut rev = ps.clone();
            rev.reverse();
            prop_assert!((cot_loss(&rev).unwrap() - v).abs() < 1e-12);
        }
    }
}

//! Sequential vs. concurrent inference of the members.

use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ensemble::{combine, Combined, EnsembleRule};
use crate::numerics::{MemberModel, Tensor};
use crate::{Error, Result, Scalar};

/// Repetitions excluded from the latency statistics.
pub const WARMUP_REPS: usize = 3;
pub const MIN_REPS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sequential,
    Concurrent,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" | "sequential" => Ok(Mode::Sequential),
            "par" | "concurrent" => Ok(Mode::Concurrent),
            _ => Err(Error::validation(format!("unknown bench mode `{s}` (seq|par)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: Mode,
    pub members: usize,
    pub batch_size: usize,
    pub repetitions: usize,
    pub workers: usize,
    /// Wall time of every repetition, warm-ups included.
    pub times_ms: Vec<f64>,
    /// Over the repetitions after the warm-ups.
    pub median_ms: f64,
    pub p95_ms: f64,
    /// Sequential reference times, interleaved with the concurrent ones.
    /// Empty in sequential mode.
    pub sequential_times_ms: Vec<f64>,
    pub sequential_median_ms: f64,
    /// `sequential_median_ms / median_ms`; 1 in sequential mode.
    pub speedup: f64,
    /// Whether the sequential and concurrent ensemble scores match bit for bit.
    pub outputs_identical: bool,
}

pub struct BenchOutcome<T> {
    pub report: LatencyReport,
    pub combined: Combined<T>,
}

/// Hardware execution units visible to this process.
pub fn execution_units() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

fn run_sequential<T: Scalar>(models: &[MemberModel<T>], batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    models.iter().map(|m| m.infer(batch)).collect()
}

/// Member `i` runs on lane `i % workers`; outputs come back in member order.
fn run_concurrent<T: Scalar>(models: &[MemberModel<T>], batch: &Tensor<T>, workers: usize) -> Result<Vec<Tensor<T>>> {
    let lanes = workers.min(models.len()).max(1);
    let mut slots: Vec<Option<Result<Tensor<T>>>> = (0..models.len()).map(|_| None).collect();
    thread::scope(|scope| {
        let handles: Vec<_> = (0..lanes)
            .map(|lane| {
                scope.spawn(move || {
                    (lane..models.len())
                        .step_by(lanes)
                        .map(|i| (i, models[i].infer(batch)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            match h.join() {
                Ok(outs) => {
                    for (i, r) in outs {
                        slots[i] = Some(r);
                    }
                }
                Err(_) => return Err(Error::Internal("bench worker panicked".into())),
            }
        }
        Ok(())
    })?;
    slots
        .into_iter()
        .map(|s| s.unwrap_or_else(|| Err(Error::Internal("member output missing".into()))))
        .collect()
}

fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed().as_secs_f64() * 1e3)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bits<T: Scalar>(t: &Tensor<T>) -> Vec<u64> {
    t.data().iter().map(|v| v.as_f64().to_bits()).collect()
}

/// Times `reps` ensemble inferences of `batch`. In concurrent mode every
/// repetition is paired with a sequential one so both see the same machine
/// state, and the two ensemble outputs are compared bit for bit.
pub fn bench<T: Scalar>(
    models: &[MemberModel<T>],
    batch: &Tensor<T>,
    mode: Mode,
    workers: usize,
    reps: usize,
    rule: EnsembleRule,
) -> Result<BenchOutcome<T>> {
    if workers < 1 {
        return Err(Error::validation("workers must be at least 1"));
    }
    if reps < MIN_REPS {
        return Err(Error::validation(format!("need at least {MIN_REPS} repetitions, got {reps}")));
    }
    if models.is_empty() {
        return Err(Error::validation("bench needs at least one member"));
    }
    let mut times = Vec::with_capacity(reps);
    let mut seq_times = Vec::new();
    let mut identical = true;
    let mut last = None;
    for _ in 0..reps {
        let (seq, seq_ms) = timed(|| run_sequential(models, batch).and_then(|o| combine(rule, &o)));
        let seq = seq?;
        match mode {
            Mode::Sequential => {
                times.push(seq_ms);
                last = Some(seq);
            }
            Mode::Concurrent => {
                let (par, ms) = timed(|| run_concurrent(models, batch, workers).and_then(|o| combine(rule, &o)));
                let par = par?;
                identical &= bits(&par.scores) == bits(&seq.scores) && par.predictions == seq.predictions;
                times.push(ms);
                seq_times.push(seq_ms);
                last = Some(par);
            }
        }
    }
    let kept = &times[WARMUP_REPS..];
    let mut sorted = kept.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median_ms = median(kept);
    let sequential_median_ms = if seq_times.is_empty() { median_ms } else { median(&seq_times[WARMUP_REPS..]) };
    let report = LatencyReport {
        mode,
        members: models.len(),
        batch_size: batch.rows(),
        repetitions: reps,
        workers,
        times_ms: times.clone(),
        median_ms,
        p95_ms: percentile(&sorted, 0.95),
        sequential_times_ms: seq_times,
        sequential_median_ms,
        speedup: sequential_median_ms / median_ms,
        outputs_identical: identical,
    };
    Ok(BenchOutcome {
        report,
        combined: last.expect("reps >= 1"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::stream_rng;
    use rand::Rng;

    fn members(s: usize, width: usize) -> Vec<MemberModel<f64>> {
        (0..s)
            .map(|i| {
                let mut m = MemberModel::mlp(8, &[width, width], 5).unwrap().with_member_index(i);
                m.init_params(i as u64 + 1);
                m
            })
            .collect()
    }

    fn batch(n: usize) -> Tensor<f64> {
        let mut rng = stream_rng(&[9]);
        Tensor::new(vec![n, 8], (0..n * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn modes_agree_bitwise() {
        let ms = members(3, 32);
        let x = batch(50);
        let seq = bench(&ms, &x, Mode::Sequential, 1, 10, EnsembleRule::default()).unwrap();
        for workers in 1..=4 {
            let par = bench(&ms, &x, Mode::Concurrent, workers, 10, EnsembleRule::default()).unwrap();
            assert!(par.report.outputs_identical);
            assert_eq!(par.combined, seq.combined);
        }
    }

    #[test]
    fn report_statistics_are_consistent() {
        let ms = members(2, 16);
        let r = bench(&ms, &batch(20), Mode::Concurrent, 2, 12, EnsembleRule::default())
            .unwrap()
            .report;
        assert_eq!(r.times_ms.len(), 12);
        assert_eq!(r.sequential_times_ms.len(), 12);
        assert!(r.p95_ms >= r.median_ms);
        assert!(r.speedup > 0.0 && r.speedup.is_finite());
        let s = bench(&ms, &batch(20), Mode::Sequential, 1, 10, EnsembleRule::default())
            .unwrap()
            .report;
        assert_eq!(s.speedup, 1.0);
        assert!(s.sequential_times_ms.is_empty());
    }

    #[test]
    fn single_member_is_identical_across_modes() {
        let ms = members(1, 16);
        let r = bench(&ms, &batch(10), Mode::Concurrent, 4, 10, EnsembleRule::default()).unwrap();
        assert!(r.report.outputs_identical);
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let ms = members(2, 4);
        let x = batch(4);
        assert!(matches!(bench(&ms, &x, Mode::Concurrent, 0, 10, EnsembleRule::default()), Err(Error::Validation(_))));
        assert!(bench(&ms, &x, Mode::Sequential, 1, 9, EnsembleRule::default()).is_err());
        assert!(bench::<f64>(&[], &x, Mode::Sequential, 1, 10, EnsembleRule::default()).is_err());
        assert!("par".parse::<Mode>().is_ok() && "gpu".parse::<Mode>().is_err());
    }

    #[test]
    fn percentile_and_median() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 19.0);
        assert_eq!(median(&v), 10.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }
}

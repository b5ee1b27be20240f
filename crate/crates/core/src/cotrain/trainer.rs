use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::thread;

use rand::seq::SliceRandom;
use rand::RngCore;
use sha2::{Digest, Sha256};

use super::{lambda_schedule, lr_schedule, total_loss, Target, TrainConfig};
use crate::archspec::ArchSpec;
use crate::datagen::{stream_rng, Dataset, View, ViewPipeline};
use crate::ensemble::{accuracy, combine, EnsembleRule};
use crate::numerics::{save_checkpoint, CheckpointMeta, MemberModel, Tensor};
use crate::{Error, Result, Scalar};

const INIT_STREAM: u64 = 0x1a17;
const SHUFFLE_STREAM: u64 = 0x5b0f;
const EVAL_CHUNK: usize = 1024;

/// Initialization seed of member `member` in a run seeded by `base_seed`.
pub fn init_seed(base_seed: u64, member: usize) -> u64 {
    stream_rng(&[INIT_STREAM, base_seed, member as u64]).next_u64()
}

/// Hex SHA-256 of the architecture's canonical JSON.
pub fn spec_hash(spec: &ArchSpec) -> String {
    hex::encode(Sha256::digest(spec.to_json().as_bytes()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Sample-weighted mean training cross-entropy of each member.
    pub ce: Vec<f64>,
    /// Mean co-training loss; absent for a single member.
    pub cot: Option<f64>,
    /// Test accuracy of each member.
    pub acc: Vec<f64>,
    /// Test accuracy of the averaged raw outputs.
    pub acc_ensemble: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    pub checkpoint_paths: Vec<PathBuf>,
}

impl TrainRecord {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let s = self.epochs.first().map_or(0, |e| e.ce.len());
        let mut out = String::from("epoch,lr,lambda");
        for i in 0..s {
            let _ = write!(out, ",ce_member_{i}");
        }
        out.push_str(",cot");
        for i in 0..s {
            let _ = write!(out, ",acc_member_{i}");
        }
        out.push_str(",acc_ensemble\n");
        for e in &self.epochs {
            let _ = write!(out, "{},{},{}", e.epoch, e.lr, e.lambda);
            for v in &e.ce {
                let _ = write!(out, ",{v}");
            }
            match e.cot {
                Some(c) => {
                    let _ = write!(out, ",{c}");
                }
                None => out.push(','),
            }
            for v in &e.acc {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", e.acc_ensemble);
        }
        out
    }
}

pub struct TrainOutcome<T> {
    pub record: TrainRecord,
    pub models: Vec<MemberModel<T>>,
}

/// Runs `f` on every member, on scoped threads when `concurrent`. Results
/// come back in member order either way.
fn for_each_member<T, R, F>(models: &mut [MemberModel<T>], concurrent: bool, f: F) -> Vec<Result<R>>
where
    T: Scalar,
    R: Send,
    F: Fn(usize, &mut MemberModel<T>) -> Result<R> + Sync,
{
    if !concurrent || models.len() < 2 {
        return models.iter_mut().enumerate().map(|(i, m)| f(i, m)).collect();
    }
    thread::scope(|scope| {
        let f = &f;
        let handles: Vec<_> = models
            .iter_mut()
            .enumerate()
            .map(|(i, m)| scope.spawn(move || f(i, m)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Internal("member worker panicked".into()))))
            .collect()
    })
}

fn evaluate<T: Scalar>(models: &[MemberModel<T>], test: &Dataset) -> Result<(Vec<f64>, f64)> {
    let s = models.len();
    let mut member_preds = vec![Vec::with_capacity(test.len()); s];
    let mut ens_preds = Vec::with_capacity(test.len());
    let all: Vec<usize> = (0..test.len()).collect();
    for chunk in all.chunks(EVAL_CHUNK) {
        let x: Tensor<T> = test.features.select_rows(chunk).cast();
        let outs = models.iter().map(|m| m.infer(&x)).collect::<Result<Vec<_>>>()?;
        for (preds, o) in member_preds.iter_mut().zip(&outs) {
            preds.extend(o.argmax_rows());
        }
        ens_preds.extend(combine(EnsembleRule::default(), &outs)?.predictions);
    }
    let acc = member_preds.iter().map(|p| accuracy(p, &test.labels)).collect();
    Ok((acc, accuracy(&ens_preds, &test.labels)))
}

/// Co-trains one member per spec. Member `i` is initialized from
/// [`init_seed`]`(base_seed, i)` and sees the batch through `views[i]`
/// (identity when `views` is empty). Every epoch ends with a test-set
/// evaluation.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    specs: &[ArchSpec],
    views: &[ViewPipeline],
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let s = cfg.s as usize;
    if specs.len() != s {
        return Err(Error::validation(format!("config has s = {s} but {} member specs were given", specs.len())));
    }
    let views: Vec<ViewPipeline> = if views.is_empty() {
        (0..s).map(ViewPipeline::identity).collect()
    } else if views.len() == s {
        views.to_vec()
    } else {
        return Err(Error::validation(format!("expected {s} view pipelines, got {}", views.len())));
    };
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::validation("train and test sets must be non-empty"));
    }
    let mut models = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut m = MemberModel::<T>::from_arch(spec)?.with_member_index(i);
            m.init_params(init_seed(cfg.base_seed, i));
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let masks: Vec<Vec<bool>> = models.iter().map(|m| m.decay_mask()).collect();
    let x_train: Tensor<T> = train_set.features.cast();
    let n = train_set.len();

    let mut record = TrainRecord::default();
    for epoch in 0..cfg.max_epoch {
        let lr = lr_schedule(epoch, cfg);
        let lambda = lambda_schedule(epoch, cfg);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(&[SHUFFLE_STREAM, cfg.base_seed, epoch as u64]));

        let mut ce_sum = vec![0.0; s];
        let mut cot_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let xb = x_train.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let batch_views = views
                .iter()
                .map(|v| v.apply(&xb, &yb, epoch, b))
                .collect::<Result<Vec<View<T>>>>()?;
            let logits = for_each_member(&mut models, cfg.concurrent_members, |i, m| m.forward(&batch_views[i].features))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            if logits.iter().any(|z| !z.all_finite()) {
                return Err(Error::Diverged { epoch, batch: b, loss: f64::NAN });
            }
            let targets: Vec<Target<'_>> = batch_views
                .iter()
                .map(|v| v.mix.as_ref().map_or(Target::Hard(&yb), Target::Mixed))
                .collect();
            let terms = total_loss(&logits, &targets, T::of(lambda))?;
            let total = terms.total.as_f64();
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss: total });
            }
            let weight = idx.len() as f64;
            for (acc, c) in ce_sum.iter_mut().zip(&terms.ce) {
                *acc += c.as_f64() * weight;
            }
            if let Some(c) = terms.cot {
                cot_sum += c.as_f64() * weight;
            }
            for r in for_each_member(&mut models, cfg.concurrent_members, |i, m| m.backward(&terms.logit_grads[i])) {
                r?;
            }
            for (m, mask) in models.iter_mut().zip(&masks) {
                m.sgd_step(T::of(lr), T::of(cfg.momentum), T::of(cfg.weight_decay), mask)?;
            }
        }

        let (acc, acc_ensemble) = evaluate(&models, test_set)?;
        record.epochs.push(EpochRecord {
            epoch,
            lr,
            lambda,
            ce: ce_sum.iter().map(|c| c / n as f64).collect(),
            cot: (s > 1).then(|| cot_sum / n as f64),
            acc,
            acc_ensemble,
        });
    }
    Ok(TrainOutcome { record, models })
}

/// Writes `member_<i>.ckpt` for every model into `dir`.
pub fn save_checkpoints<T: Scalar>(
    dir: &Path,
    models: &[MemberModel<T>],
    specs: &[ArchSpec],
    epoch: usize,
) -> Result<Vec<PathBuf>> {
    if models.len() != specs.len() {
        return Err(Error::validation("one spec per model is required"));
    }
    models
        .iter()
        .zip(specs)
        .map(|(m, spec)| {
            let path = dir.join(format!("member_{}.ckpt", m.member_index()));
            let meta = CheckpointMeta {
                spec_hash: spec_hash(spec),
                member_index: m.member_index(),
                epoch,
                seed: m.rng_seed(),
                arch: spec.clone(),
            };
            save_checkpoint(&path, m, &meta)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{make_blobs, make_spirals, Transform};

    fn data() -> (Dataset, Dataset) {
        make_spirals(100, 3, 0.1, 5).unwrap().split_at(240).unwrap()
    }

    fn cfg(s: u32) -> TrainConfig {
        TrainConfig {
            s,
            max_epoch: 6,
            slow_epoch: 1,
            lr: 0.1,
            cot_warm_epochs: 2,
            batch_size: 32,
            base_seed: 11,
            ..TrainConfig::default()
        }
    }

    fn specs(s: usize, width: u32) -> Vec<ArchSpec> {
        (0..s).map(|i| ArchSpec::mlp(&format!("m{i}"), 2, &[width, width], 3)).collect()
    }

    #[test]
    fn record_has_one_row_per_epoch_with_valid_accuracies() {
        let (tr, te) = data();
        let out = train::<f64>(&cfg(2), &specs(2, 16), &[], &tr, &te).unwrap();
        assert_eq!(out.record.epochs.len(), 6);
        for e in &out.record.epochs {
            assert!(e.acc.iter().chain([&e.acc_ensemble]).all(|a| (0.0..=1.0).contains(a)));
            assert!(e.cot.unwrap() >= 0.0);
        }
        assert_eq!(out.record.epochs[0].lr, 0.0);
    }

    #[test]
    fn single_member_has_no_cot_column_value() {
        let (tr, te) = data();
        let out = train::<f64>(&cfg(1), &specs(1, 16), &[], &tr, &te).unwrap();
        assert!(out.record.epochs.iter().all(|e| e.cot.is_none()));
        let csv = out.record.to_csv();
        assert!(csv.starts_with("epoch,lr,lambda,ce_member_0,cot,acc_member_0,acc_ensemble\n"));
        let row = csv.lines().nth(1).unwrap();
        assert_eq!(row.split(',').nth(4), Some(""));
        // a single member's ensemble is the member itself
        assert!(out.record.epochs.iter().all(|e| e.acc[0] == e.acc_ensemble));
    }

    #[test]
    fn runs_are_bitwise_reproducible_and_thread_independent() {
        let (tr, te) = data();
        let views: Vec<ViewPipeline> = (0..2)
            .map(|i| ViewPipeline::new(i, 3, vec![Transform::FeatureJitter { sigma: 0.05 }]).unwrap())
            .collect();
        let a = train::<f64>(&cfg(2), &specs(2, 12), &views, &tr, &te).unwrap();
        let b = train::<f64>(&cfg(2), &specs(2, 12), &views, &tr, &te).unwrap();
        let c = train::<f64>(
            &TrainConfig {
                concurrent_members: true,
                ..cfg(2)
            },
            &specs(2, 12),
            &views,
            &tr,
            &te,
        )
        .unwrap();
        assert_eq!(a.record.to_csv(), b.record.to_csv());
        assert_eq!(a.record.to_csv(), c.record.to_csv());
        assert_eq!(a.models[1].params()[0].value, c.models[1].params()[0].value);
    }

    #[test]
    fn members_start_from_different_weights() {
        assert_ne!(init_seed(0, 0), init_seed(0, 1));
        assert_ne!(init_seed(0, 1), init_seed(1, 0));
    }

    #[test]
    fn learns_separable_blobs() {
        let (tr, te) = make_blobs(600, 3, 2, 0.4, 1).unwrap().split_at(450).unwrap();
        let c = TrainConfig {
            max_epoch: 20,
            lr: 0.05,
            ..cfg(1)
        };
        let out = train::<f64>(&c, &specs(1, 16), &[], &tr, &te).unwrap();
        let last = out.record.last().unwrap();
        assert!(last.acc_ensemble > 0.9, "{last:?}");
    }

    #[test]
    fn divergence_names_epoch_and_batch() {
        let (tr, te) = data();
        let c = TrainConfig {
            lr: 1e38,
            ..cfg(1)
        };
        match train::<f32>(&c, &specs(1, 16), &[], &tr, &te) {
            Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.record)),
        }
    }

    #[test]
    fn mismatched_spec_count_is_rejected() {
        let (tr, te) = data();
        assert!(matches!(train::<f64>(&cfg(2), &specs(1, 8), &[], &tr, &te), Err(Error::Validation(_))));
    }

    #[test]
    fn checkpoints_round_trip() {
        let (tr, te) = data();
        let sp = specs(2, 8);
        let c = TrainConfig {
            max_epoch: 2,
            ..cfg(2)
        };
        let out = train::<f64>(&c, &sp, &[], &tr, &te).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = save_checkpoints(dir.path(), &out.models, &sp, 2).unwrap();
        let (meta, m) = crate::numerics::load_checkpoint::<f64>(&paths[1]).unwrap();
        assert_eq!(meta.member_index, 1);
        assert_eq!(meta.spec_hash, spec_hash(&sp[1]));
        let x: Tensor<f64> = te.features.cast();
        let want = out.models[1].infer(&x).unwrap();
        let got = m.infer(&x).unwrap();
        for (a, b) in want.data().iter().zip(got.data()) {
            assert!((a - b).abs() < 1e-4 * a.abs().max(1.0));
        }
    }
}

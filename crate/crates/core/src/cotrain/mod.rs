//! Losses, schedules and the joint training loop for `S` members.

mod gradcheck;
mod loss;
mod schedule;
mod trainer;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use gradcheck::{gradcheck, rel_error, GradcheckReport};
pub use loss::{cot_loss, cross_entropy, cross_entropy_mixed, entropy, softmax, total_loss, LossTerms, ProbBatch, Target, LOG_FLOOR};
pub use schedule::{lambda_schedule, lr_schedule};
pub use trainer::{init_seed, save_checkpoints, spec_hash, train, EpochRecord, TrainOutcome, TrainRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of members.
    pub s: u32,
    pub max_epoch: usize,
    /// Length of the linear learning-rate warm-up.
    pub slow_epoch: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub momentum: f64,
    /// Per-member weight decay, already adjusted for `S`.
    pub weight_decay: f64,
    /// Peak co-training weight.
    pub lambda_cot: f64,
    pub cot_warm_epochs: usize,
    pub batch_size: usize,
    pub base_seed: u64,
    pub precision: Precision,
    /// Fan member forward and backward passes out over threads. Results are
    /// identical either way.
    pub concurrent_members: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            s: 1,
            max_epoch: 200,
            slow_epoch: 5,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            lambda_cot: 0.5,
            cot_warm_epochs: 40,
            batch_size: 128,
            base_seed: 0,
            precision: Precision::F64,
            concurrent_members: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.s == 0 {
            return bad("s must be at least 1".into());
        }
        if self.max_epoch == 0 || self.slow_epoch >= self.max_epoch {
            return bad(format!(
                "need 0 <= slow_epoch < max_epoch, got {} and {}",
                self.slow_epoch, self.max_epoch
            ));
        }
        if self.cot_warm_epochs > self.max_epoch {
            return bad(format!("cot_warm_epochs {} exceeds max_epoch", self.cot_warm_epochs));
        }
        if !(self.lambda_cot >= 0.0 && self.lambda_cot.is_finite()) {
            return bad(format!("lambda_cot must be >= 0, got {}", self.lambda_cot));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be >= 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        Ok(())
    }
}

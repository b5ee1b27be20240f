use std::f64::consts::PI;

use super::TrainConfig;

/// Linear warm-up for `epoch < slow_epoch`, then cosine decay to zero at
/// `max_epoch`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let (e, slow, max) = (epoch as f64, cfg.slow_epoch as f64, cfg.max_epoch as f64);
    if epoch < cfg.slow_epoch {
        cfg.lr * e / slow
    } else {
        0.5 * cfg.lr * (1.0 + (PI * (e - slow) / (max - slow)).cos())
    }
}

/// Co-training weight ramped linearly from 0 to `lambda_cot` over
/// `cot_warm_epochs`, then held.
pub fn lambda_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.cot_warm_epochs == 0 {
        return cfg.lambda_cot;
    }
    cfg.lambda_cot * (epoch as f64 / cfg.cot_warm_epochs as f64).min(1.0)
}

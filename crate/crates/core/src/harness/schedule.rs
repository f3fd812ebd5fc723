use super::config::TrainConfig;
use crate::error::{Error, Result};

/// Warmup length and decay table in effect for `cfg.epochs`.
pub(crate) fn effective_schedule(cfg: &TrainConfig) -> (usize, Vec<(usize, f64)>) {
    if cfg.epochs == cfg.reference_epochs {
        return (
            cfg.warmup_epochs,
            cfg.decay_epochs
                .iter()
                .copied()
                .zip(cfg.decay_lrs.iter().copied())
                .collect(),
        );
    }
    let scale = cfg.epochs as f64 / cfg.reference_epochs as f64;
    let scaled = |e: usize| (e as f64 * scale).round() as usize;
    let warmup = scaled(cfg.warmup_epochs);
    let mut prev = warmup;
    let points = cfg
        .decay_epochs
        .iter()
        .zip(&cfg.decay_lrs)
        .map(|(&e, &lr)| {
            // Keep points strictly after the warmup and each other when
            // rounding collapses them.
            prev = scaled(e).max(prev + 1);
            (prev, lr)
        })
        .collect();
    (warmup, points)
}

/// Learning rate for 0-based `epoch`: linear warmup from `base_lr` to
/// `peak_lr`, then `peak_lr` until the first decay point, then the rate of
/// the latest decay point reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidInput(format!(
            "epoch {epoch} outside a {}-epoch run",
            cfg.epochs
        )));
    }
    let (warmup, points) = effective_schedule(cfg);
    if epoch < warmup {
        return Ok(cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * epoch as f64 / warmup as f64);
    }
    Ok(points
        .iter()
        .rev()
        .find(|(e, _)| *e <= epoch)
        .map_or(cfg.peak_lr, |&(_, lr)| lr))
}

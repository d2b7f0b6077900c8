use super::TrainConfig;

/// Learning rate for optimizer step `step` (0-based): a linear ramp from 0
/// to `peak_lr` over the warmup epochs, then a half cosine down to 0 at the
/// last step of the run.
pub fn lr_at(step: usize, config: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let warmup = config.warmup_epochs * steps_per_epoch;
    let total = config.epochs * steps_per_epoch;
    if step < warmup {
        return config.peak_lr * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    config.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 100,
            warmup_epochs: 10,
            peak_lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn anchor_points() {
        let c = cfg();
        let spe = 13;
        assert_eq!(lr_at(0, &c, spe), 0.0);
        assert!((lr_at(10 * spe, &c, spe) - 1e-3).abs() < 1e-12);
        let mid = 10 * spe + 45 * spe;
        assert!((lr_at(mid, &c, spe) - 5e-4).abs() < 1e-12);
        assert!(lr_at(100 * spe, &c, spe).abs() < 1e-12);
    }

    #[test]
    fn ramps_up_then_never_increases() {
        let c = cfg();
        let spe = 7;
        let lrs: Vec<f64> = (0..=100 * spe).map(|s| lr_at(s, &c, spe)).collect();
        let boundary = 10 * spe;
        assert!(lrs[..=boundary].windows(2).all(|w| w[1] > w[0]));
        assert!(lrs[boundary..].windows(2).all(|w| w[1] <= w[0]));
        // continuity across the boundary: one warmup increment
        assert!((lrs[boundary] - lrs[boundary - 1] - 1e-3 / boundary as f64).abs() < 1e-15);
    }
}

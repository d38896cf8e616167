use super::TrainConfig;

/// Learning rate for a 0-based epoch: a linear ramp `base·(e+1)/warmup`
/// during warmup, then `base·decay^(e − warmup)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64
    } else {
        cfg.base_lr * cfg.decay_factor.powi((epoch - cfg.warmup_epochs) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_seams() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(10, &cfg), 5e-4);
        assert_eq!(lr_at(11, &cfg), 0.98 * 5e-4);
        assert_eq!(lr_at(0, &cfg), 5e-4 / 10.0);
        assert!((lr_at(9, &cfg) - 5e-4).abs() < 1e-18);
        let none = TrainConfig { warmup_epochs: 0, ..Default::default() };
        assert_eq!(lr_at(0, &none), 5e-4);
        assert!((lr_at(12, &cfg) - 5e-4 * 0.98 * 0.98).abs() < 1e-18);
    }
}

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_iters: u64,
    pub warmup_ratio: f64,
    pub max_steps: u64,
    pub min_lr_ratio: f64,
    pub grad_clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            base_lr: 1e-4,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_iters: 200,
            warmup_ratio: 1e-3,
            max_steps: 2000,
            min_lr_ratio: 0.01,
            grad_clip_norm: 5.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.base_lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.warmup_ratio >= 0.0
            && self.min_lr_ratio >= 0.0
            && self.grad_clip_norm > 0.0;
        if !ok {
            return Err(Error::Invalid("optimizer settings out of range".into()));
        }
        Ok(())
    }
}

/// Linear warmup from `base_lr * warmup_ratio`, then cosine decay to
/// `base_lr * min_lr_ratio` at `max_steps`.
pub fn lr_at(step: u64, cfg: &OptimizerConfig) -> f64 {
    let base = cfg.base_lr;
    if step < cfg.warmup_iters {
        let frac = step as f64 / cfg.warmup_iters as f64;
        return base * (cfg.warmup_ratio + (1.0 - cfg.warmup_ratio) * frac);
    }
    let min_lr = base * cfg.min_lr_ratio;
    let span = cfg.max_steps.saturating_sub(cfg.warmup_iters);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - cfg.warmup_iters) as f64 / span as f64).min(1.0)
    };
    if progress == 0.0 {
        return base;
    }
    min_lr + 0.5 * (base - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW moments and step counter for a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Self {
        OptimizerState {
            config,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }
}

/// One AdamW step: global-norm clipping, decoupled weight decay and a
/// bias-corrected Adam update. Returns the learning rate used.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("optimizer parameters", state.m.len(), grads.len()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(format!("flat index {i}")));
    }
    let cfg = state.config;
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    let clip = if norm > cfg.grad_clip_norm {
        cfg.grad_clip_norm / norm
    } else {
        1.0
    };
    let lr = lr_at(state.step, &cfg);
    let t = state.step as i32 + 1;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i] * clip;
        params[i] -= lr * cfg.weight_decay * params[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    state.step += 1;
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(lr: f64) -> OptimizerConfig {
        OptimizerConfig {
            base_lr: lr,
            weight_decay: 0.0,
            warmup_iters: 0,
            min_lr_ratio: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_points() {
        let c = OptimizerConfig::default();
        assert!((lr_at(0, &c) - 1e-7).abs() < 1e-20);
        assert_eq!(lr_at(200, &c), 1e-4);
        assert!((lr_at(2000, &c) - 1e-6).abs() < 1e-12);
        assert!((lr_at(199, &c) - 1e-4).abs() < 1e-6);
        assert!(lr_at(201, &c) < 1e-4 && lr_at(201, &c) > 1e-4 - 1e-9);
        assert!((lr_at(5000, &c) - 1e-6).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = OptimizerState::new(flat(0.01), 1);
        let mut p = [1.0];
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        assert!((1.0 - p[0] - 0.01).abs() < 1e-6 * 0.01);
    }

    #[test]
    fn clipping_halves_gradient() {
        let mut a = OptimizerState::new(flat(0.01), 2);
        let mut b = a.clone();
        let mut pa = [0.0, 0.0];
        let mut pb = [0.0, 0.0];
        adam_step(&mut pa, &[6.0, 8.0], &mut a).unwrap();
        let mut cfg = b.config;
        cfg.grad_clip_norm = 1e9;
        b.config = cfg;
        adam_step(&mut pb, &[3.0, 4.0], &mut b).unwrap();
        assert_eq!(a.m, b.m);
        assert_eq!(a.v, b.v);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut s = OptimizerState::new(flat(0.1), 3);
        let mut p = [0.3, -2.0, 5.0];
        adam_step(&mut p, &[0.0; 3], &mut s).unwrap();
        assert_eq!(p, [0.3, -2.0, 5.0]);
        assert!(matches!(
            adam_step(&mut p, &[f64::NAN, 0.0, 0.0], &mut s),
            Err(Error::NonFiniteGradient(_))
        ));
    }

    #[test]
    fn three_steps_match_hand_trace() {
        // f(x) = (x - 3)^2 from x = 0 with lr 0.1, wd 0.01, no warmup.
        let cfg = OptimizerConfig {
            base_lr: 0.1,
            weight_decay: 0.01,
            warmup_iters: 0,
            min_lr_ratio: 1.0,
            ..Default::default()
        };
        let mut s = OptimizerState::new(cfg, 1);
        let mut p = [0.0];
        let (b1, b2, eps, lr, wd): (f64, f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.1, 0.01);
        let (mut x, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (p[0] - 3.0);
            adam_step(&mut p, &[g], &mut s).unwrap();
            let mut g = 2.0 * (x - 3.0);
            if g.abs() > 5.0 {
                g *= 5.0 / g.abs();
            }
            x -= lr * wd * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            assert!((p[0] - x).abs() < 1e-10);
        }
    }
}

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Inverse-square-root decay after a linear warm-up.
    Warmup,
    /// `base_lr` at every step.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub model_dim_for_schedule: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub batch_size: usize,
    /// Global gradient-norm clip applied before the optimizer step.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            warmup_steps: 4000,
            model_dim_for_schedule: 512,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            max_steps: 1000,
            seed: 0,
            schedule: Schedule::Warmup,
            batch_size: 8,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.warmup_steps == 0 || self.model_dim_for_schedule == 0 {
            return bad("warmup_steps and model_dim_for_schedule must be ≥ 1");
        }
        if self.max_steps == 0 || self.batch_size == 0 {
            return bad("max_steps and batch_size must be ≥ 1");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        Ok(())
    }

    /// Effective learning rate at `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Warmup => warmup_schedule(step, self),
            Schedule::Constant => self.base_lr,
        }
    }
}

/// `base_lr · d^−½ · min(step^−½, step · warmup^−³ᐟ²)`.
pub fn warmup_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let s = step.max(1) as f64;
    let w = cfg.warmup_steps as f64;
    cfg.base_lr * (cfg.model_dim_for_schedule as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// First and second moment buffers, zero-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState { m: zeros.clone(), v: zeros }
    }
}

/// One Adam update at `step` (1-based) using the configured learning-rate schedule.
///
/// Parameters are left untouched if any gradient is non-finite.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    step: usize,
    cfg: &TrainConfig,
    state: &mut AdamState,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Contract("adam_step index is 1-based".into()));
    }
    if grads.len() != store.len() {
        return Err(Error::Contract(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for id in store.ids() {
        if !grads.get(id).is_finite() {
            return Err(Error::NonFiniteGradient { param: store.name(id).to_string(), step });
        }
    }
    let lr = cfg.lr_at(step);
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    for id in store.ids() {
        let g = grads.get(id).data();
        let (m, v) = (&mut state.m[id.0], &mut state.v[id.0]);
        let p = store.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn cfg(warmup: usize) -> TrainConfig {
        TrainConfig {
            base_lr: 1.0,
            warmup_steps: warmup,
            model_dim_for_schedule: 64,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_first_step_scales_with_warmup() {
        let c = cfg(4000);
        let expected = 64f64.powf(-0.5) * 4000f64.powf(-1.5);
        assert!((warmup_schedule(1, &c) - expected).abs() < 1e-18);
    }

    #[test]
    fn schedule_branches_meet_at_warmup() {
        let c = cfg(100);
        let s = 100f64;
        assert!((s.powf(-0.5) - s * 100f64.powf(-1.5)).abs() < 1e-15);
        let peak = warmup_schedule(100, &c);
        for step in 1..400 {
            assert!(warmup_schedule(step, &c) <= peak + 1e-18, "step {step}");
        }
        assert!(warmup_schedule(200, &c) < peak);
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![1.0, -2.0]));
        let before = store.clone();
        let mut st = AdamState::new(&store);
        let g = Gradients::zeros_like(&store);
        for step in 1..5 {
            adam_step(&mut store, &g, step, &cfg(10), &mut st).unwrap();
        }
        assert_eq!(store.get(id), before.get(id));
    }

    #[test]
    fn two_steps_match_hand_recurrence() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(0.5));
        let c = TrainConfig { schedule: Schedule::Constant, base_lr: 0.1, adam_eps: 1e-8, ..cfg(1) };
        let mut st = AdamState::new(&store);
        let g = Gradients::from_vec(vec![Tensor::scalar(2.0)]);
        adam_step(&mut store, &g, 1, &c, &mut st).unwrap();
        adam_step(&mut store, &g, 2, &c, &mut st).unwrap();
        // step 1: m=0.2, v=0.08 → m̂=2, v̂=4 → Δ=0.1·2/(2+1e-8)
        // step 2: m=0.38, v=0.1584 → m̂=2, v̂=4 → same Δ
        let d = 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((store.get(id).item() - (0.5 - 2.0 * d)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.add("enc.w", Tensor::scalar(0.0));
        let mut st = AdamState::new(&store);
        let g = Gradients::from_vec(vec![Tensor::scalar(f64::NAN)]);
        let err = adam_step(&mut store, &g, 1, &cfg(1), &mut st).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
        assert_eq!(store.get(crate::numerics::ParamId(0)).item(), 0.0);
    }
}

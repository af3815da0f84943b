use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    pub ema_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::finetune()
    }
}

impl OptimizerConfig {
    /// Finetuning defaults.
    pub fn finetune() -> Self {
        OptimizerConfig {
            base_lr: 1e-5,
            warmup_steps: 1000,
            total_steps: 5000,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            ema_decay: 0.99,
        }
    }

    /// Low learning rate and weight decay for continued pretraining.
    pub fn continued_pretraining() -> Self {
        OptimizerConfig {
            base_lr: 1e-7,
            weight_decay: 1e-6,
            ..Self::finetune()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in (0, 1)".into()));
        }
        if !open_unit(self.ema_decay) {
            return Err(Error::Config("ema_decay must lie in (0, 1)".into()));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config(
                "base_lr and weight_decay must be non-negative, eps and clip_norm positive".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
/// Steps past the end return zero.
pub fn lr_schedule(step: usize, cfg: &OptimizerConfig) -> f64 {
    if step >= cfg.total_steps {
        return 0.0;
    }
    if step < cfg.warmup_steps {
        return cfg.base_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    let progress = (step - cfg.warmup_steps) as f64 / span;
    cfg.base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// Euclidean norm over every gradient.
pub fn global_norm<F: Real>(grads: &BTreeMap<String, Tensor<F>>) -> f64 {
    grads.values().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut BTreeMap<String, Tensor<F>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = F::of(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x = *x * s;
            }
        }
    }
    norm
}

/// `shadow = decay * shadow + (1 - decay) * value` for every trainable parameter.
pub fn ema_update<F: Real>(store: &mut ParameterStore<F>, decay: f64) {
    let (d, e) = (F::of(decay), F::of(1.0 - decay));
    for (_, p) in store.iter_mut().filter(|(_, p)| !p.frozen) {
        for (s, &v) in p.ema.data_mut().iter_mut().zip(p.value.data()) {
            *s = d * *s + e * v;
        }
    }
}

#[derive(Debug, Clone)]
struct Moments<F> {
    m: Vec<F>,
    v: Vec<F>,
    t: u32,
}

/// Adam moments with decoupled weight decay and global-norm clipping.
#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    pub config: OptimizerConfig,
    state: BTreeMap<String, Moments<F>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub lr: f64,
    pub grad_norm: f64,
}

impl<F: Real> Optimizer<F> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            state: BTreeMap::new(),
        })
    }

    /// One update at schedule position `step`. Gradients of frozen or unknown
    /// parameters are ignored; trainable parameters without a gradient are
    /// treated as having a zero gradient. Non-finite gradients abort the step
    /// before anything is modified.
    pub fn step(
        &mut self,
        store: &mut ParameterStore<F>,
        mut grads: BTreeMap<String, Tensor<F>>,
        step: usize,
    ) -> Result<UpdateStats> {
        grads.retain(|name, _| store.get(name).map(|p| !p.frozen).unwrap_or(false));
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        for (name, g) in &grads {
            let p = store.value(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
            }
        }
        let cfg = self.config;
        let grad_norm = if cfg.clip_norm.is_finite() {
            clip_global_norm(&mut grads, cfg.clip_norm)
        } else {
            global_norm(&grads)
        };
        let lr = lr_schedule(step, &cfg);
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        for (name, p) in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let n = p.value.numel();
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![F::zero(); n],
                v: vec![F::zero(); n],
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - b1.powi(st.t as i32);
            let c2 = 1.0 - b2.powi(st.t as i32);
            let decay = F::of(1.0 - lr * cfg.weight_decay);
            let grad = grads.get(name).map(Tensor::data);
            for i in 0..n {
                let g = grad.map_or(0.0, |g| g[i].as_f64());
                let m = b1 * st.m[i].as_f64() + (1.0 - b1) * g;
                let v = b2 * st.v[i].as_f64() + (1.0 - b2) * g * g;
                st.m[i] = F::of(m);
                st.v[i] = F::of(v);
                let update = lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
                let x = &mut p.value.data_mut()[i];
                *x = F::of((*x * decay).as_f64() - update);
            }
            p.grad = grads.get(name).cloned();
        }
        Ok(UpdateStats { lr, grad_norm })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Component;

    fn cfg() -> OptimizerConfig {
        OptimizerConfig {
            base_lr: 0.1,
            warmup_steps: 5,
            total_steps: 10_000,
            clip_norm: f64::INFINITY,
            weight_decay: 0.0,
            ..OptimizerConfig::finetune()
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = OptimizerConfig::finetune();
        assert_eq!(lr_schedule(0, &c), 0.0);
        assert_eq!(lr_schedule(1000, &c), 1e-5);
        assert!(lr_schedule(c.total_steps, &c).abs() < 1e-12);
        assert!((lr_schedule(500, &c) - 0.5e-5).abs() < 1e-18);
    }

    #[test]
    fn clipping_scales_to_unit_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::<f64>::new(vec![2], vec![3.0, 4.0]).unwrap());
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
        assert!((g["a"].data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn two_step_adam_trace() {
        // f(x) = x^2 from x = 1.
        let mut store = ParameterStore::<f64>::new();
        store.insert("x", Tensor::scalar(1.0), Component::Loss).unwrap();
        let mut opt = Optimizer::new(cfg()).unwrap();
        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            let g = 2.0 * store.value("x").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::scalar(g));
            opt.step(&mut store, grads, 5).unwrap();
            let gh = 2.0 * x;
            m = 0.9 * m + 0.1 * gh;
            v = 0.99 * v + 0.01 * gh * gh;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.99f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((store.value("x").unwrap().data()[0] - x).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradients_abort_without_changes() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("x", Tensor::scalar(1.0), Component::Loss).unwrap();
        let mut opt = Optimizer::new(cfg()).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("x".to_string(), Tensor::scalar(f64::NAN));
        assert!(opt.step(&mut store, grads, 1).is_err());
        assert_eq!(store.value("x").unwrap().data()[0], 1.0);
    }

    #[test]
    fn ema_single_step() {
        let mut store = ParameterStore::<f64>::new();
        store.insert("x", Tensor::scalar(1.0), Component::Loss).unwrap();
        store.get_mut("x").unwrap().ema = Tensor::scalar(0.0);
        ema_update(&mut store, 0.99);
        assert!((store.get("x").unwrap().ema.data()[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = OptimizerConfig::finetune();
        c.beta2 = 1.0;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::finetune();
        c.warmup_steps = c.total_steps + 1;
        assert!(c.validate().is_err());
    }
}

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 100.0;

/// Weights of the two objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub contrastive: f64,
    pub captioning: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            contrastive: 1.0,
            captioning: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.contrastive >= 0.0 && self.captioning >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

/// Symmetric InfoNCE over unit rows `video` and `text` (`[B, d]`), with
/// temperature `exp(log_tau)`.
pub fn contrastive_loss<F: Real>(g: &mut Graph<F>, video: Var, text: Var, log_tau: Var) -> Result<Var> {
    let b = g.shape(video)[0];
    if b < 2 {
        return Err(Error::invalid("contrastive loss needs a batch of at least 2"));
    }
    if g.shape(video) != g.shape(text) {
        return Err(Error::shape("contrastive_loss", g.shape(video), g.shape(text)));
    }
    let tt = g.transpose(text)?;
    let sims = g.matmul(video, tt)?;
    let neg = g.scale(log_tau, -1.0);
    let inv_tau = g.exp(neg);
    let logits = g.mul_scalar(sims, inv_tau)?;
    let diag: Vec<Option<usize>> = (0..b).map(Some).collect();
    let v2t = g.cross_entropy(logits, &diag)?;
    let lt = g.transpose(logits)?;
    let t2v = g.cross_entropy(lt, &diag)?;
    let both = g.add(v2t, t2v)?;
    Ok(g.scale(both, 0.5))
}

/// Mean next-token cross-entropy over `[B, len, V]` logits; `None` targets are skipped.
pub fn captioning_loss<F: Real>(g: &mut Graph<F>, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 3 {
        return Err(Error::shape("captioning_loss", &s, &[0, 0, 0]));
    }
    let flat = g.reshape(logits, &[s[0] * s[1], s[2]])?;
    g.cross_entropy(flat, targets)
}

pub fn total_loss<F: Real>(g: &mut Graph<F>, con: Var, cap: Var, w: LossWeights) -> Result<Var> {
    w.validate()?;
    let a = g.scale(con, w.contrastive);
    let b = g.scale(cap, w.captioning);
    g.add(a, b)
}

/// Clamps a log-temperature to the admissible range.
pub fn clamp_log_tau(log_tau: f64) -> f64 {
    log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn con_value(v: &[f64], t: &[f64], b: usize, d: usize, tau: f64) -> f64 {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::new(vec![b, d], v.to_vec()).unwrap());
        let t = g.constant(Tensor::new(vec![b, d], t.to_vec()).unwrap());
        let lt = g.constant(Tensor::scalar(tau.ln()));
        let l = contrastive_loss(&mut g, v, t, lt).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn orthonormal_pairs_at_unit_temperature() {
        let e = [1.0, 0.0, 0.0, 1.0];
        let got = con_value(&e, &e, 2, 2, 1.0);
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn identical_candidates_give_log_batch() {
        let v = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        assert!((con_value(&v, &v, 3, 2, 0.07) - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let lt = g.constant(Tensor::scalar(0.0));
        assert!(contrastive_loss(&mut g, v, v, lt).is_err());
    }

    #[test]
    fn weights_combine_linearly() {
        let mut g = Graph::<f64>::new();
        let one = g.constant(Tensor::scalar(1.0));
        let t = total_loss(&mut g, one, one, LossWeights::default()).unwrap();
        assert_eq!(g.value(t).item().unwrap(), 3.0);
        let bad = LossWeights {
            contrastive: -1.0,
            captioning: 1.0,
        };
        assert!(total_loss(&mut g, one, one, bad).is_err());
    }

    #[test]
    fn tau_is_clamped() {
        assert_eq!(clamp_log_tau(10.0), 100f64.ln());
        assert_eq!(clamp_log_tau(-10.0), 0.01f64.ln());
        assert_eq!(clamp_log_tau(0.07f64.ln()), 0.07f64.ln());
    }
}

//! Adam with global-norm gradient clipping.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm bound; non-positive disables clipping.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip: 5.0 }
    }
}

/// First and second moment estimates per trainable parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub step: u64,
    moments: HashMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub grad_norm: f64,
    /// Factor applied to every gradient (1 when unclipped).
    pub clip_scale: f64,
}

/// L2 norm over all entries of all gradients.
pub fn global_norm<T: Scalar>(grads: &ParamGrads<T>) -> f64 {
    grads.entries.iter().flat_map(|(_, g)| g.data()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self { step: 0, moments: HashMap::new() }
    }

    /// Clip, then apply one bias-corrected Adam update to every parameter in `grads`.
    /// Frozen parameters are skipped even if a gradient is supplied.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, cfg: &AdamConfig) -> Result<StepReport> {
        for (id, g) in &grads.entries {
            if !g.all_finite() {
                return Err(Error::Training(format!("non-finite gradient for `{}`", store.get(*id).name)));
            }
        }
        let grad_norm = global_norm(grads);
        let clip_scale = if cfg.clip > 0.0 && grad_norm > cfg.clip { cfg.clip / grad_norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
        let c1 = T::lit(1.0 - cfg.beta1.powi(t));
        let c2 = T::lit(1.0 - cfg.beta2.powi(t));
        let (lr, eps, scale) = (T::lit(cfg.lr), T::lit(cfg.eps), T::lit(clip_scale));
        for (id, g) in &grads.entries {
            let p = store.get_mut(*id);
            if p.frozen {
                continue;
            }
            if g.shape() != p.tensor.shape() {
                return Err(Error::Training(format!(
                    "gradient shape {:?} for `{}` of shape {:?}",
                    g.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (w, &gi)) in p.tensor.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi * scale;
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepReport { grad_norm, clip_scale })
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    fn one_param(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(value)).unwrap();
        (s, id)
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let (mut s, id) = one_param(1.0);
        let grads = ParamGrads { entries: vec![(id, Tensor::scalar(-0.37))] };
        let cfg = AdamConfig { lr: 1e-3, clip: 0.0, ..Default::default() };
        AdamState::new().step(&mut s, &grads, &cfg).unwrap();
        let expected = 1.0 + 1e-3 * 0.37 / (0.37 + 1e-8);
        assert_abs_diff_eq!(s.get(id).tensor.item(), expected, epsilon = 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, id) = one_param(2.5);
        let mut st = AdamState::new();
        let grads = ParamGrads { entries: vec![(id, Tensor::scalar(0.0))] };
        st.step(&mut s, &grads, &AdamConfig::default()).unwrap();
        assert_eq!(s.get(id).tensor.item(), 2.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn clipping_rescales_to_bound() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::zeros(&[2])).unwrap();
        let grads = ParamGrads { entries: vec![(a, Tensor::from_f64(&[2], &[6.0, 8.0]).unwrap())] };
        let r = AdamState::new().step(&mut s, &grads, &AdamConfig { clip: 3.0, ..Default::default() }).unwrap();
        assert_abs_diff_eq!(r.grad_norm, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.grad_norm * r.clip_scale, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn frozen_and_non_finite() {
        let (mut s, id) = one_param(1.0);
        s.get_mut(id).frozen = true;
        let grads = ParamGrads { entries: vec![(id, Tensor::scalar(1.0))] };
        AdamState::new().step(&mut s, &grads, &AdamConfig::default()).unwrap();
        assert_eq!(s.get(id).tensor.item(), 1.0);

        let bad = ParamGrads { entries: vec![(id, Tensor::scalar(f64::NAN))] };
        match AdamState::new().step(&mut s, &bad, &AdamConfig::default()) {
            Err(Error::Training(msg)) => assert!(msg.contains("`w`")),
            other => panic!("{other:?}"),
        }
    }
}

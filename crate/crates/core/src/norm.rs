//! Batch normalization and its language-conditioned variant.
//!
//! A conditional layer keeps the pretrained `gamma`/`beta` frozen and adds per-sample
//! deltas predicted from the question embedding:
//!
//! ```text
//! gamma_hat[n, c] = gamma[c] + delta_gamma[n, c]
//! beta_hat[n, c]  = beta[c]  + delta_beta[n, c]
//! y[n, c, h, w]   = gamma_hat[n, c] * (x[n, c, h, w] - mean[c]) / sqrt(var[c] + eps) + beta_hat[n, c]
//! ```
//!
//! The predictor heads start at exactly zero, so an untrained conditional layer
//! reproduces the plain layer bit for bit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Result};
use crate::params::{BufferId, Forward, Mode, ObservedMoments, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Frozen per-channel scale/shift with running population statistics.
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub name: String,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

/// Predicted per-sample offsets, both `[N, C]`.
#[derive(Clone, Copy, Debug)]
pub struct DeltaPair {
    pub delta_gamma: Var,
    pub delta_beta: Var,
}

impl BatchNormState {
    /// Registers `gamma = 1`, `beta = 0`, `running_mean = 0`, `running_var = 1` under `name`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, eps: f64, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(config_err(format!("momentum {momentum} outside (0, 1)")));
        }
        Ok(Self {
            name: name.to_string(),
            channels,
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]))?,
            eps,
            momentum,
        })
    }

    fn normalized<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = fwd.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(config_err(format!(
                "{}: input {shape:?} does not have {} channels",
                self.name, self.channels
            )));
        }
        match fwd.mode {
            Mode::Train => {
                if shape[0] * shape[2] * shape[3] < 2 {
                    return Err(usage_err(format!(
                        "{}: train-mode normalization needs at least 2 values per channel, input {shape:?}",
                        self.name
                    )));
                }
                let (mean, var) = fwd.graph.moments_over(x)?;
                let observed = ObservedMoments {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    mean: fwd.graph.value(mean).clone(),
                    var: fwd.graph.value(var).clone(),
                    momentum: self.momentum,
                };
                fwd.observe(observed);
                fwd.graph.normalize_channels(x, mean, var, self.eps)
            }
            Mode::Infer => {
                let mean = fwd.graph.constant(fwd.buffer(self.running_mean).clone());
                let var = fwd.graph.constant(fwd.buffer(self.running_var).clone());
                fwd.graph.normalize_channels(x, mean, var, self.eps)
            }
        }
    }

    /// Plain batch normalization.
    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let xhat = self.normalized(fwd, x)?;
        let gamma = fwd.param(self.gamma);
        let beta = fwd.param(self.beta);
        fwd.graph.channel_affine(xhat, gamma, beta)
    }

    /// Batch normalization with per-sample parameters `gamma + delta_gamma`, `beta + delta_beta`.
    pub fn forward_conditional<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var, deltas: &DeltaPair) -> Result<Var> {
        let n = fwd.graph.shape(x)[0];
        for d in [deltas.delta_gamma, deltas.delta_beta] {
            if fwd.graph.shape(d) != [n, self.channels] {
                return Err(config_err(format!(
                    "{}: deltas {:?} do not match [{n}, {}]",
                    self.name,
                    fwd.graph.shape(d),
                    self.channels
                )));
            }
        }
        let xhat = self.normalized(fwd, x)?;
        let gamma = fwd.param(self.gamma);
        let beta = fwd.param(self.beta);
        let gamma_hat = fwd.graph.add_rows(deltas.delta_gamma, gamma)?;
        let beta_hat = fwd.graph.add_rows(deltas.delta_beta, beta)?;
        fwd.graph.channel_affine(xhat, gamma_hat, beta_hat)
    }
}

/// Whether the two delta heads share their hidden layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorLayout {
    #[default]
    Shared,
    Separate,
}

#[derive(Clone, Debug)]
struct Trunk {
    weight: ParamId,
    bias: ParamId,
}

/// One-hidden-layer MLP from the question embedding to `(delta_gamma, delta_beta)`.
#[derive(Clone, Debug)]
pub struct CbnPredictor {
    pub name: String,
    pub input_width: usize,
    pub hidden: usize,
    pub channels: usize,
    trunks: Vec<Trunk>,
    pub out_weight_gamma: ParamId,
    pub out_bias_gamma: ParamId,
    pub out_weight_beta: ParamId,
    pub out_bias_beta: ParamId,
}

impl CbnPredictor {
    /// Hidden layer uses uniform fan-in initialization; both output heads start at zero.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input_width: usize,
        hidden: usize,
        channels: usize,
        layout: PredictorLayout,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (input_width as f64).sqrt();
        let suffixes: &[&str] = match layout {
            PredictorLayout::Shared => &[""],
            PredictorLayout::Separate => &["_gamma", "_beta"],
        };
        let mut trunks = Vec::new();
        for s in suffixes {
            trunks.push(Trunk {
                weight: store.add(format!("{name}.hidden_weight{s}"), Tensor::uniform(&[input_width, hidden], bound, rng))?,
                bias: store.add(format!("{name}.hidden_bias{s}"), Tensor::uniform(&[hidden], bound, rng))?,
            });
        }
        Ok(Self {
            name: name.to_string(),
            input_width,
            hidden,
            channels,
            trunks,
            out_weight_gamma: store.add(format!("{name}.out_weight_gamma"), Tensor::zeros(&[hidden, channels]))?,
            out_bias_gamma: store.add(format!("{name}.out_bias_gamma"), Tensor::zeros(&[channels]))?,
            out_weight_beta: store.add(format!("{name}.out_weight_beta"), Tensor::zeros(&[hidden, channels]))?,
            out_bias_beta: store.add(format!("{name}.out_bias_beta"), Tensor::zeros(&[channels]))?,
        })
    }

    pub fn layout(&self) -> PredictorLayout {
        if self.trunks.len() == 1 {
            PredictorLayout::Shared
        } else {
            PredictorLayout::Separate
        }
    }

    /// Number of scalars this predictor owns.
    pub fn parameter_count(&self) -> usize {
        let trunk = self.input_width * self.hidden + self.hidden;
        self.trunks.len() * trunk + 2 * (self.hidden * self.channels + self.channels)
    }

    fn trunk<T: Scalar>(&self, fwd: &mut Forward<'_, T>, e_q: Var, t: &Trunk) -> Result<Var> {
        let w = fwd.param(t.weight);
        let b = fwd.param(t.bias);
        let h = fwd.graph.affine(e_q, w, Some(b))?;
        fwd.graph.relu(h)
    }

    /// Predict the deltas for a batch of question embeddings `[N, E]`.
    pub fn predict<T: Scalar>(&self, fwd: &mut Forward<'_, T>, e_q: Var) -> Result<DeltaPair> {
        let shape = fwd.graph.shape(e_q);
        if shape.len() != 2 || shape[1] != self.input_width {
            return Err(config_err(format!(
                "{}: embedding {shape:?} does not have width {}",
                self.name, self.input_width
            )));
        }
        let h_gamma = self.trunk(fwd, e_q, &self.trunks[0])?;
        let h_beta = match self.trunks.get(1) {
            Some(t) => self.trunk(fwd, e_q, t)?,
            None => h_gamma,
        };
        let (wg, bg) = (fwd.param(self.out_weight_gamma), fwd.param(self.out_bias_gamma));
        let delta_gamma = fwd.graph.affine(h_gamma, wg, Some(bg))?;
        let (wb, bb) = (fwd.param(self.out_weight_beta), fwd.param(self.out_bias_beta));
        let delta_beta = fwd.graph.affine(h_beta, wb, Some(bb))?;
        Ok(DeltaPair { delta_gamma, delta_beta })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::commit_running_stats;

    fn layer(channels: usize, eps: f64) -> (ParamStore<f64>, BatchNormState) {
        let mut store = ParamStore::new();
        let bn = BatchNormState::new(&mut store, "bn", channels, eps, DEFAULT_MOMENTUM).unwrap();
        (store, bn)
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let (store, bn) = layer(2, DEFAULT_EPS);
        let mut f = Forward::new(&store, Mode::Train);
        let x = f.graph.constant(Tensor::filled(&[3, 2, 2, 2], 4.25));
        let y = bn.forward(&mut f, x).unwrap();
        assert!(f.graph.value(y).max_abs() <= 1e-6);
    }

    #[test]
    fn three_values_standardize() {
        let (store, bn) = layer(1, 0.0);
        let mut f = Forward::new(&store, Mode::Train);
        let x = f.graph.constant(Tensor::new(&[3, 1, 1, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let y = bn.forward(&mut f, x).unwrap();
        // (v - 2) / sqrt(2/3)
        let s = (2.0f64 / 3.0).sqrt();
        let expected = [-1.0 / s, 0.0, 1.0 / s];
        for (a, b) in f.graph.value(y).data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((expected[2] - 1.22474).abs() < 1e-5);
    }

    #[test]
    fn infer_mode_applies_affine() {
        let (mut store, bn) = layer(1, 0.0);
        store.get_mut(bn.gamma).tensor = Tensor::scalar(2.0);
        store.get_mut(bn.beta).tensor = Tensor::scalar(1.0);
        let mut f = Forward::new(&store, Mode::Infer);
        let x = f.graph.constant(Tensor::new(&[3, 1, 1, 1], vec![-1.0, 0.0, 1.0]).unwrap());
        let y = bn.forward(&mut f, x).unwrap();
        assert_eq!(f.graph.value(y).data(), &[-1.0, 1.0, 3.0]);
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let (store, bn) = layer(3, DEFAULT_EPS);
        let mut f = Forward::new(&store, Mode::Infer);
        let x = f.graph.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(matches!(bn.forward(&mut f, x), Err(crate::Error::Config(_))));
    }

    #[test]
    fn train_mode_needs_two_values() {
        let (store, bn) = layer(1, DEFAULT_EPS);
        let mut f = Forward::new(&store, Mode::Train);
        let x = f.graph.constant(Tensor::zeros(&[1, 1, 1, 1]));
        assert!(matches!(bn.forward(&mut f, x), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let (mut store, bn) = layer(1, DEFAULT_EPS);
        let mut f = Forward::new(&store, Mode::Train);
        let x = f.graph.constant(Tensor::new(&[4, 1, 1, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap());
        bn.forward(&mut f, x).unwrap();
        let observed = f.into_observed();
        commit_running_stats(&mut store, &observed);
        assert!((store.buffer(bn.running_mean).item() - 0.3).abs() < 1e-12);
        // batch var = 3.5
        assert!((store.buffer(bn.running_var).item() - (0.9 + 0.35)).abs() < 1e-12);
    }

    fn predictor(store: &mut ParamStore<f64>, e: usize, h: usize, c: usize) -> CbnPredictor {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        CbnPredictor::new(store, "cbn", e, h, c, PredictorLayout::Shared, &mut rng).unwrap()
    }

    #[test]
    fn zero_initialized_heads_predict_zero() {
        let mut store = ParamStore::new();
        let p = predictor(&mut store, 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut f = Forward::new(&store, Mode::Train);
        let e = f.graph.constant(Tensor::uniform(&[5, 4], 3.0, &mut rng));
        let d = p.predict(&mut f, e).unwrap();
        assert!(f.graph.value(d.delta_gamma).data().iter().all(|&v| v == 0.0));
        assert!(f.graph.value(d.delta_beta).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_embedding_and_hidden_bias_predict_zero() {
        let mut store = ParamStore::new();
        let p = predictor(&mut store, 4, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        store.get_mut(store.id("cbn.hidden_bias").unwrap()).tensor = Tensor::zeros(&[3]);
        store.get_mut(p.out_weight_gamma).tensor = Tensor::uniform(&[3, 2], 1.0, &mut rng);
        store.get_mut(p.out_weight_beta).tensor = Tensor::uniform(&[3, 2], 1.0, &mut rng);
        let mut f = Forward::new(&store, Mode::Train);
        let e = f.graph.constant(Tensor::zeros(&[2, 4]));
        let d = p.predict(&mut f, e).unwrap();
        assert!(f.graph.value(d.delta_gamma).data().iter().all(|&v| v == 0.0));
        assert!(f.graph.value(d.delta_beta).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_delta() {
        let mut store = ParamStore::new();
        let p = predictor(&mut store, 1, 1, 1);
        store.get_mut(store.id("cbn.hidden_weight").unwrap()).tensor = Tensor::new(&[1, 1], vec![1.0]).unwrap();
        store.get_mut(store.id("cbn.hidden_bias").unwrap()).tensor = Tensor::zeros(&[1]);
        store.get_mut(p.out_weight_gamma).tensor = Tensor::new(&[1, 1], vec![0.5]).unwrap();
        let mut f = Forward::new(&store, Mode::Train);
        let e = f.graph.constant(Tensor::new(&[1, 1], vec![2.0]).unwrap());
        let d = p.predict(&mut f, e).unwrap();
        assert_eq!(f.graph.value(d.delta_gamma).item(), 1.0);
    }

    #[test]
    fn predictor_width_mismatch() {
        let mut store = ParamStore::new();
        let p = predictor(&mut store, 4, 3, 2);
        let mut f = Forward::new(&store, Mode::Train);
        let e = f.graph.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(p.predict(&mut f, e), Err(crate::Error::Config(_))));
    }

    #[test]
    fn separate_layout_counts() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shared = CbnPredictor::new(&mut store, "a", 4, 3, 2, PredictorLayout::Shared, &mut rng).unwrap();
        let separate = CbnPredictor::new(&mut store, "b", 4, 3, 2, PredictorLayout::Separate, &mut rng).unwrap();
        assert_eq!(shared.parameter_count(), 4 * 3 + 3 + 2 * (3 * 2 + 2));
        assert_eq!(separate.parameter_count(), 2 * (4 * 3 + 3) + 2 * (3 * 2 + 2));
        let counted: u64 = store.count(|n| n[..1].to_string()).per_component["b"];
        assert_eq!(counted as usize, separate.parameter_count());
        assert_eq!(separate.layout(), PredictorLayout::Separate);
    }

    fn conditional_output(mode: Mode, deltas: (Tensor<f64>, Tensor<f64>), x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
        let (mut store, bn) = layer(2, DEFAULT_EPS);
        store.get_mut(bn.gamma).tensor = Tensor::new(&[2], vec![1.5, -0.5]).unwrap();
        store.get_mut(bn.beta).tensor = Tensor::new(&[2], vec![0.25, 2.0]).unwrap();
        *store.buffer_mut(bn.running_mean) = Tensor::new(&[2], vec![0.1, -0.2]).unwrap();
        *store.buffer_mut(bn.running_var) = Tensor::new(&[2], vec![0.9, 1.7]).unwrap();
        let mut f = Forward::new(&store, mode);
        let xv = f.graph.constant(x.clone());
        let plain = bn.forward(&mut f, xv).unwrap();
        let d = DeltaPair { delta_gamma: f.graph.constant(deltas.0), delta_beta: f.graph.constant(deltas.1) };
        let cond = bn.forward_conditional(&mut f, xv, &d).unwrap();
        (f.graph.value(plain).clone(), f.graph.value(cond).clone())
    }

    #[test]
    fn zero_deltas_match_plain_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform(&[3, 2, 2, 3], 2.0, &mut rng);
        for mode in [Mode::Train, Mode::Infer] {
            let (plain, cond) = conditional_output(mode, (Tensor::zeros(&[3, 2]), Tensor::zeros(&[3, 2])), &x);
            assert!(plain.bit_eq(&cond));
        }
    }

    #[test]
    fn negated_gamma_shuts_off_feature_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform(&[2, 2, 2, 2], 2.0, &mut rng);
        let dg = Tensor::new(&[2, 2], vec![-1.5, 0.5, -1.5, 0.5]).unwrap();
        let db = Tensor::new(&[2, 2], vec![0.0, 1.0, 3.0, 0.0]).unwrap();
        let (_, cond) = conditional_output(Mode::Train, (dg, db), &x);
        // beta_hat = beta + delta_beta broadcast over each map
        let beta_hat = [[0.25, 3.0], [3.25, 2.0]];
        for n in 0..2 {
            for c in 0..2 {
                for v in &cond.data()[(n * 2 + c) * 4..(n * 2 + c + 1) * 4] {
                    assert_eq!(*v, beta_hat[n][c]);
                }
            }
        }
    }

    #[test]
    fn per_sample_shift() {
        let (store, bn) = layer(1, 1e-8);
        let mut f = Forward::new(&store, Mode::Train);
        let x = f.graph.constant(Tensor::filled(&[2, 1, 2, 2], 3.0));
        let d = DeltaPair {
            delta_gamma: f.graph.constant(Tensor::zeros(&[2, 1])),
            delta_beta: f.graph.constant(Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap()),
        };
        let y = bn.forward_conditional(&mut f, x, &d).unwrap();
        let v = f.graph.value(y).data();
        assert!(v[..4].iter().all(|a| a.abs() < 1e-6));
        assert!(v[4..].iter().all(|a| (a - 1.0).abs() < 1e-6));
    }

    #[test]
    fn delta_row_count_must_match_batch() {
        let (store, bn) = layer(1, 1e-5);
        let mut f = Forward::new(&store, Mode::Train);
        let x = f.graph.constant(Tensor::filled(&[2, 1, 2, 2], 3.0));
        let d = DeltaPair {
            delta_gamma: f.graph.constant(Tensor::zeros(&[3, 1])),
            delta_beta: f.graph.constant(Tensor::zeros(&[3, 1])),
        };
        assert!(bn.forward_conditional(&mut f, x, &d).is_err());
    }
}

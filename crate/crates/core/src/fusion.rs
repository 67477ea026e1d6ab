//! Spatial attention, MLB glimpse attention, element-wise product fusion, and the
//! oracle classifier head.
//!
//! Each layer comes in two forms: a free function over graph handles, which the
//! gradient checks drive directly, and a parameter-owning struct that binds its
//! weights from a [`Forward`] session.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::params::{Forward, Linear, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Var};

/// Pooled visual embedding and the attention weights that produced it.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[N, G·C]`, glimpse-major.
    pub e_v: Var,
    /// `[N, H·W, G]`; each `(sample, glimpse)` column sums to one over locations.
    pub weights: Var,
}

/// Handles for a one-hidden-layer ReLU MLP.
#[derive(Clone, Copy, Debug)]
pub struct MlpWeights {
    pub hidden_weight: Var,
    pub hidden_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
}

fn mlp<T: Scalar>(g: &mut Graph<T>, x: Var, w: &MlpWeights) -> Result<Var> {
    let h = g.affine(x, w.hidden_weight, Some(w.hidden_bias))?;
    let h = g.relu(h)?;
    g.affine(h, w.out_weight, Some(w.out_bias))
}

fn check_pair<T: Scalar>(g: &Graph<T>, features: Var, e_q: Var) -> Result<(usize, usize, usize)> {
    let fs = g.shape(features);
    let qs = g.shape(e_q);
    if fs.len() != 4 || qs.len() != 2 || fs[0] != qs[0] {
        return Err(config_err(format!("attention features {fs:?} and question {qs:?} disagree")));
    }
    Ok((fs[0], fs[1], fs[2] * fs[3]))
}

fn pool<T: Scalar>(g: &mut Graph<T>, logits: Var, locs: Var, n: usize, l: usize) -> Result<AttentionOutput> {
    let glimpses = g.shape(logits)[1];
    let logits = g.reshape(logits, &[n, l, glimpses])?;
    let weights = g.softmax_over(logits, 1)?;
    let e_v = g.attention_pool(weights, locs)?;
    Ok(AttentionOutput { e_v, weights })
}

/// `ξ = MLP([F_loc; e_q])` per location, softmax over locations, weighted feature sum.
pub fn spatial_attention<T: Scalar>(g: &mut Graph<T>, features: Var, e_q: Var, w: &MlpWeights) -> Result<AttentionOutput> {
    let (n, _, l) = check_pair(g, features, e_q)?;
    let locs = g.to_locations(features)?;
    let q = g.repeat_rows(e_q, l)?;
    let joint = g.concat_cols(&[locs, q])?;
    let logits = mlp(g, joint, w)?;
    if g.shape(logits)[1] != 1 {
        return Err(config_err("spatial attention MLP must produce one logit per location"));
    }
    pool(g, logits, locs, n, l)
}

/// Handles for MLB attention. `P` has one column per glimpse; `U'`, `V'` are shared.
#[derive(Clone, Copy, Debug)]
pub struct MlbWeights {
    pub u: Var,
    pub u_bias: Var,
    pub v: Var,
    pub v_bias: Var,
    pub p: Var,
    pub p_bias: Var,
}

/// `ξ^g = P_gᵀ(tanh(U'ᵀq) ∘ tanh(V'ᵀF))`, softmax per glimpse, glimpse outputs concatenated.
pub fn mlb_attention<T: Scalar>(g: &mut Graph<T>, features: Var, e_q: Var, w: &MlbWeights) -> Result<AttentionOutput> {
    let (n, _, l) = check_pair(g, features, e_q)?;
    let locs = g.to_locations(features)?;
    let q = g.affine(e_q, w.u, Some(w.u_bias))?;
    let q = g.tanh(q)?;
    let q = g.repeat_rows(q, l)?;
    let v = g.affine(locs, w.v, Some(w.v_bias))?;
    let v = g.tanh(v)?;
    let joint = g.mul(q, v)?;
    let logits = g.affine(joint, w.p, Some(w.p_bias))?;
    pool(g, logits, locs, n, l)
}

/// Handles for the element-wise product fusion head.
#[derive(Clone, Copy, Debug)]
pub struct FusionWeights {
    pub u: Var,
    pub v: Var,
    pub p: Var,
    pub p_bias: Var,
}

/// `Pᵀ(tanh(Uᵀe_q) ∘ tanh(Vᵀe_v)) + b_P`.
pub fn elementwise_fusion<T: Scalar>(g: &mut Graph<T>, e_q: Var, e_v: Var, w: &FusionWeights) -> Result<Var> {
    let q = g.affine(e_q, w.u, None)?;
    let q = g.tanh(q)?;
    let v = g.affine(e_v, w.v, None)?;
    let v = g.tanh(v)?;
    let joint = g.mul(q, v)?;
    g.affine(joint, w.p, Some(w.p_bias))
}

/// Concatenate the present oracle inputs and map them to three logits (yes, no, n/a).
pub fn oracle_head<T: Scalar>(g: &mut Graph<T>, parts: &[Var], w: &MlpWeights) -> Result<Var> {
    if parts.is_empty() {
        return Err(config_err("oracle head needs at least one input"));
    }
    let x = if parts.len() == 1 { parts[0] } else { g.concat_cols(parts)? };
    mlp(g, x, w)
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), inputs, hidden, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), hidden, outputs, true, rng)?,
        })
    }

    pub fn bind<T: Scalar>(&self, fwd: &mut Forward<'_, T>) -> MlpWeights {
        let (hidden_weight, hb) = self.hidden.bind(fwd);
        let (out_weight, ob) = self.out.bind(fwd);
        MlpWeights { hidden_weight, hidden_bias: hb.expect("biased"), out_weight, out_bias: ob.expect("biased") }
    }

    pub fn parameter_count(&self) -> usize {
        self.hidden.parameter_count() + self.out.parameter_count()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// Concatenation MLP per location.
    #[default]
    Spatial,
    /// Multimodal low-rank bilinear glimpses.
    Mlb,
}

/// Attention over a feature map, either form.
#[derive(Clone, Debug)]
pub enum Attention {
    Spatial(Mlp),
    Mlb { u: Linear, v: Linear, p: Linear },
}

impl Attention {
    /// `hidden` is the MLP width for spatial attention and the joint width for MLB.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: AttentionKind,
        channels: usize,
        embedding: usize,
        hidden: usize,
        glimpses: usize,
        rng: &mut R,
    ) -> Result<Self> {
        match kind {
            AttentionKind::Spatial => Ok(Self::Spatial(Mlp::new(store, name, channels + embedding, hidden, 1, rng)?)),
            AttentionKind::Mlb => {
                if glimpses == 0 {
                    return Err(config_err("MLB attention needs at least one glimpse"));
                }
                Ok(Self::Mlb {
                    u: Linear::new(store, &format!("{name}.u"), embedding, hidden, true, rng)?,
                    v: Linear::new(store, &format!("{name}.v"), channels, hidden, true, rng)?,
                    p: Linear::new(store, &format!("{name}.p"), hidden, glimpses, true, rng)?,
                })
            }
        }
    }

    pub fn glimpses(&self) -> usize {
        match self {
            Self::Spatial(_) => 1,
            Self::Mlb { p, .. } => p.outputs,
        }
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, features: Var, e_q: Var) -> Result<AttentionOutput> {
        match self {
            Self::Spatial(m) => {
                let w = m.bind(fwd);
                spatial_attention(&mut fwd.graph, features, e_q, &w)
            }
            Self::Mlb { u, v, p } => {
                let (u, u_bias) = u.bind(fwd);
                let (v, v_bias) = v.bind(fwd);
                let (p, p_bias) = p.bind(fwd);
                let w = MlbWeights { u, u_bias: u_bias.expect("biased"), v, v_bias: v_bias.expect("biased"), p, p_bias: p_bias.expect("biased") };
                mlb_attention(&mut fwd.graph, features, e_q, &w)
            }
        }
    }
}

/// Element-wise product fusion followed by the answer layer.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub u: Linear,
    pub v: Linear,
    pub p: Linear,
}

impl FusionHead {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        question_width: usize,
        visual_width: usize,
        joint: usize,
        answers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            u: Linear::new(store, &format!("{name}.u"), question_width, joint, false, rng)?,
            v: Linear::new(store, &format!("{name}.v"), visual_width, joint, false, rng)?,
            p: Linear::new(store, &format!("{name}.p"), joint, answers, true, rng)?,
        })
    }

    pub fn answer_count(&self) -> usize {
        self.p.outputs
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, e_q: Var, e_v: Var) -> Result<Var> {
        let (u, _) = self.u.bind(fwd);
        let (v, _) = self.v.bind(fwd);
        let (p, p_bias) = self.p.bind(fwd);
        let w = FusionWeights { u, v, p, p_bias: p_bias.expect("biased") };
        elementwise_fusion(&mut fwd.graph, e_q, e_v, &w)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::finite_diff::{check, probe, STEP};
    use crate::tensor::Tensor;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::uniform(shape, 1.0, rng)
    }

    fn mlp_consts(g: &mut Graph<f64>, d: usize, h: usize, o: usize, rng: &mut ChaCha8Rng) -> MlpWeights {
        MlpWeights {
            hidden_weight: g.constant(rand_t(&[d, h], rng)),
            hidden_bias: g.constant(rand_t(&[h], rng)),
            out_weight: g.constant(rand_t(&[h, o], rng)),
            out_bias: g.constant(rand_t(&[o], rng)),
        }
    }

    fn assert_simplex(w: &Tensor<f64>) {
        let (n, l, gl) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        for s in 0..n {
            for k in 0..gl {
                let col: Vec<f64> = (0..l).map(|i| w.data()[(s * l + i) * gl + k]).collect();
                assert!(col.iter().all(|&a| a >= 0.0));
                assert_abs_diff_eq!(col.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn constant_logits_give_spatial_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let f = g.constant(rand_t(&[2, 3, 2, 2], &mut rng));
        let q = g.constant(rand_t(&[2, 4], &mut rng));
        let mut w = mlp_consts(&mut g, 7, 5, 1, &mut rng);
        w.out_weight = g.constant(Tensor::zeros(&[5, 1]));
        let out = spatial_attention(&mut g, f, q, &w).unwrap();
        let mean = g.global_avg_pool(f).unwrap();
        let (a, b) = (g.value(out.e_v).to_f64_vec(), g.value(mean).to_f64_vec());
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_location_has_unit_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f64>::new();
        let ft = rand_t(&[2, 3, 1, 1], &mut rng);
        let f = g.constant(ft.clone());
        let q = g.constant(rand_t(&[2, 4], &mut rng));
        let w = mlp_consts(&mut g, 7, 5, 1, &mut rng);
        let out = spatial_attention(&mut g, f, q, &w).unwrap();
        assert_eq!(g.value(out.weights).to_f64_vec(), vec![1.0, 1.0]);
        assert_eq!(g.value(out.e_v).data(), ft.data());
    }

    #[test]
    fn two_locations_closed_form() {
        // The MLP's hidden layer passes the first feature channel through; the output
        // weight scales it so the logits are 0 and ln 3.
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_f64(&[1, 2, 1, 2], &[0.0, 1.0, 5.0, -2.0]).unwrap());
        let q = g.constant(Tensor::from_f64(&[1, 1], &[0.4]).unwrap());
        let w = MlpWeights {
            hidden_weight: g.constant(Tensor::from_f64(&[3, 1], &[1.0, 0.0, 0.0]).unwrap()),
            hidden_bias: g.constant(Tensor::zeros(&[1])),
            out_weight: g.constant(Tensor::from_f64(&[1, 1], &[3f64.ln()]).unwrap()),
            out_bias: g.constant(Tensor::zeros(&[1])),
        };
        let out = spatial_attention(&mut g, f, q, &w).unwrap();
        let a = g.value(out.weights).to_f64_vec();
        assert_abs_diff_eq!(a[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], 0.75, epsilon = 1e-12);
        let e = g.value(out.e_v).to_f64_vec();
        assert_abs_diff_eq!(e[0], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(e[1], 0.25 * 5.0 + 0.75 * -2.0, epsilon = 1e-12);
    }

    fn fusion_consts(g: &mut Graph<f64>, e: usize, c: usize, d: usize, a: usize, rng: &mut ChaCha8Rng) -> FusionWeights {
        FusionWeights {
            u: g.constant(rand_t(&[e, d], rng)),
            v: g.constant(rand_t(&[c, d], rng)),
            p: g.constant(rand_t(&[d, a], rng)),
            p_bias: g.constant(rand_t(&[a], rng)),
        }
    }

    #[test]
    fn zero_side_gives_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new();
        let w = fusion_consts(&mut g, 3, 4, 5, 6, &mut rng);
        let bias = g.value(w.p_bias).to_f64_vec();
        for zero_q in [true, false] {
            let (qt, vt) = if zero_q {
                (Tensor::zeros(&[2, 3]), rand_t(&[2, 4], &mut rng))
            } else {
                (rand_t(&[2, 3], &mut rng), Tensor::zeros(&[2, 4]))
            };
            let q = g.constant(qt);
            let v = g.constant(vt);
            let y = elementwise_fusion(&mut g, q, v, &w).unwrap();
            let out = g.value(y).to_f64_vec();
            assert_eq!(&out[..6], &bias[..]);
            assert_eq!(&out[6..], &bias[..]);
        }
    }

    #[test]
    fn saturated_scalar_fusion_tends_to_one() {
        let mut g = Graph::<f64>::new();
        let one = || Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
        let w = FusionWeights {
            u: g.constant(one()),
            v: g.constant(one()),
            p: g.constant(one()),
            p_bias: g.constant(Tensor::zeros(&[1])),
        };
        let big = g.constant(Tensor::from_f64(&[1, 1], &[40.0]).unwrap());
        let y = elementwise_fusion(&mut g, big, big, &w).unwrap();
        assert_abs_diff_eq!(g.value(y).item(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fusion_is_symmetric_under_role_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::<f64>::new();
        let u = rand_t(&[3, 5], &mut rng);
        let v = rand_t(&[3, 5], &mut rng);
        let p = g.constant(rand_t(&[5, 2], &mut rng));
        let p_bias = g.constant(rand_t(&[2], &mut rng));
        let a = g.constant(rand_t(&[4, 3], &mut rng));
        let b = g.constant(rand_t(&[4, 3], &mut rng));
        let (uv, vv) = (g.constant(u), g.constant(v));
        let fwd = elementwise_fusion(&mut g, a, b, &FusionWeights { u: uv, v: vv, p, p_bias }).unwrap();
        let swapped = elementwise_fusion(&mut g, b, a, &FusionWeights { u: vv, v: uv, p, p_bias }).unwrap();
        assert!(g.value(fwd).bit_eq(g.value(swapped)));
    }

    fn mlb_consts(g: &mut Graph<f64>, c: usize, e: usize, d: usize, glimpses: usize, rng: &mut ChaCha8Rng) -> MlbWeights {
        MlbWeights {
            u: g.constant(rand_t(&[e, d], rng)),
            u_bias: g.constant(rand_t(&[d], rng)),
            v: g.constant(rand_t(&[c, d], rng)),
            v_bias: g.constant(rand_t(&[d], rng)),
            p: g.constant(rand_t(&[d, glimpses], rng)),
            p_bias: g.constant(rand_t(&[glimpses], rng)),
        }
    }

    #[test]
    fn mlb_constant_logits_give_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let f = g.constant(rand_t(&[2, 3, 2, 3], &mut rng));
        let q = g.constant(rand_t(&[2, 4], &mut rng));
        let mut w = mlb_consts(&mut g, 3, 4, 5, 1, &mut rng);
        w.p = g.constant(Tensor::zeros(&[5, 1]));
        let out = mlb_attention(&mut g, f, q, &w).unwrap();
        let mean = g.global_avg_pool(f).unwrap();
        for (x, y) in g.value(out.e_v).data().iter().zip(g.value(mean).data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn identical_glimpses_give_equal_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::<f64>::new();
        let f = g.constant(rand_t(&[2, 3, 2, 2], &mut rng));
        let q = g.constant(rand_t(&[2, 4], &mut rng));
        let mut w = mlb_consts(&mut g, 3, 4, 5, 1, &mut rng);
        let col = g.value(w.p).to_f64_vec();
        let twice: Vec<f64> = col.iter().flat_map(|&x| [x, x]).collect();
        w.p = g.constant(Tensor::from_f64(&[5, 2], &twice).unwrap());
        let b = g.value(w.p_bias).item();
        w.p_bias = g.constant(Tensor::from_f64(&[2], &[b, b]).unwrap());
        let out = mlb_attention(&mut g, f, q, &w).unwrap();
        let e = g.value(out.e_v);
        for s in 0..2 {
            let row = &e.data()[s * 6..(s + 1) * 6];
            assert_eq!(row[..3], row[3..]);
        }
    }

    #[test]
    fn oracle_zero_hidden_gives_output_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::<f64>::new();
        let parts = [g.constant(rand_t(&[2, 4], &mut rng)), g.constant(rand_t(&[2, 8], &mut rng))];
        let mut w = mlp_consts(&mut g, 12, 6, 3, &mut rng);
        w.hidden_weight = g.constant(Tensor::zeros(&[12, 6]));
        w.hidden_bias = g.constant(Tensor::zeros(&[6]));
        let y = oracle_head(&mut g, &parts, &w).unwrap();
        let bias = g.value(w.out_bias).to_f64_vec();
        assert_eq!(g.value(y).to_f64_vec(), [bias.clone(), bias].concat());
    }

    #[test]
    fn attention_modules_report_glimpses() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let a = Attention::new(&mut store, "att", AttentionKind::Mlb, 3, 4, 5, 2, &mut rng).unwrap();
        assert_eq!(a.glimpses(), 2);
        assert!(Attention::new(&mut store, "bad", AttentionKind::Mlb, 3, 4, 5, 0, &mut rng).is_err());
        let s = Attention::new(&mut store, "sp", AttentionKind::Spatial, 3, 4, 5, 2, &mut rng).unwrap();
        assert_eq!(s.glimpses(), 1);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spatial = vec![
            rand_t(&[2, 3, 2, 2], &mut rng),
            rand_t(&[2, 2], &mut rng),
            rand_t(&[5, 4], &mut rng),
            rand_t(&[4], &mut rng),
            rand_t(&[4, 1], &mut rng),
        ];
        // The logit bias shifts every location equally and has zero gradient, so it
        // stays constant here and is checked exactly below.
        let r = check(
            &spatial,
            |g, v| {
                let out_bias = g.param(Tensor::scalar(0.3));
                let w = MlpWeights { hidden_weight: v[2], hidden_bias: v[3], out_weight: v[4], out_bias };
                let o = spatial_attention(g, v[0], v[1], &w)?;
                probe(g, o.e_v, 1)
            },
            STEP,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "spatial {}", r.max_rel_error);
        let mut g = Graph::<f64>::new();
        let v: Vec<Var> = spatial.iter().map(|t| g.constant(t.clone())).collect();
        let out_bias = g.param(Tensor::scalar(0.3));
        let w = MlpWeights { hidden_weight: v[2], hidden_bias: v[3], out_weight: v[4], out_bias };
        let o = spatial_attention(&mut g, v[0], v[1], &w).unwrap();
        let l = probe(&mut g, o.e_v, 1).unwrap();
        assert!(g.backward(l).unwrap().get(out_bias).unwrap().item().abs() < 1e-12);

        let mlb = vec![
            rand_t(&[2, 3, 2, 2], &mut rng),
            rand_t(&[2, 2], &mut rng),
            rand_t(&[2, 4], &mut rng),
            rand_t(&[4], &mut rng),
            rand_t(&[3, 4], &mut rng),
            rand_t(&[4], &mut rng),
            rand_t(&[4, 2], &mut rng),
        ];
        let r = check(
            &mlb,
            |g, v| {
                let p_bias = g.constant(Tensor::from_f64(&[2], &[0.1, -0.2])?);
                let w = MlbWeights { u: v[2], u_bias: v[3], v: v[4], v_bias: v[5], p: v[6], p_bias };
                let o = mlb_attention(g, v[0], v[1], &w)?;
                probe(g, o.e_v, 2)
            },
            STEP,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "mlb {}", r.max_rel_error);

        let fusion = vec![
            rand_t(&[3, 2], &mut rng),
            rand_t(&[3, 4], &mut rng),
            rand_t(&[2, 3], &mut rng),
            rand_t(&[4, 3], &mut rng),
            rand_t(&[3, 5], &mut rng),
            rand_t(&[5], &mut rng),
        ];
        let r = check(
            &fusion,
            |g, v| {
                let y = elementwise_fusion(g, v[0], v[1], &FusionWeights { u: v[2], v: v[3], p: v[4], p_bias: v[5] })?;
                probe(g, y, 3)
            },
            STEP,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "fusion {}", r.max_rel_error);
    }

    fn permute_locations(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let l = perm.len();
        Tensor::from_fn(&[n, c, 1, l], |i| {
            let (row, loc) = (i / l, i % l);
            t.data()[row * l + perm[loc]]
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn attention_is_simplex_and_permutation_equivariant(
            seed in 0u64..10_000,
            glimpses in prop::sample::select(vec![1usize, 2, 4]),
            use_mlb in any::<bool>(),
            perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ft = rand_t(&[2, 3, 1, 6], &mut rng);
            let qt = rand_t(&[2, 4], &mut rng);
            let mut g = Graph::<f64>::new();
            let (sw, mw) = (mlp_consts(&mut g, 7, 5, 1, &mut rng), mlb_consts(&mut g, 3, 4, 5, glimpses, &mut rng));
            let run = |g: &mut Graph<f64>, t: Tensor<f64>| {
                let f = g.constant(t);
                let q = g.constant(qt.clone());
                if use_mlb { mlb_attention(g, f, q, &mw).unwrap() } else { spatial_attention(g, f, q, &sw).unwrap() }
            };
            let base = run(&mut g, ft.clone());
            let moved = run(&mut g, permute_locations(&ft, &perm));
            let gl = if use_mlb { glimpses } else { 1 };
            prop_assert_eq!(g.shape(base.e_v), &[2, gl * 3]);
            assert_simplex(g.value(base.weights));
            for (x, y) in g.value(base.e_v).data().iter().zip(g.value(moved.e_v).data()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            let (wb, wm) = (g.value(base.weights), g.value(moved.weights));
            for s in 0..2 {
                for (loc, &src) in perm.iter().enumerate() {
                    for k in 0..gl {
                        let a = wm.data()[(s * 6 + loc) * gl + k];
                        let b = wb.data()[(s * 6 + src) * gl + k];
                        prop_assert!((a - b).abs() <= 1e-12);
                    }
                }
            }
        }
    }
}

//! Finite-difference suite over every differentiable operation and composite module.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, ModulationSpec, StageSet};
use crate::error::{Error, Result};
use crate::finite_diff::{check, check_module, probe, GradCheck, STEP};
use crate::fusion::{elementwise_fusion, mlb_attention, oracle_head, spatial_attention, FusionWeights, MlbWeights, MlpWeights};
use crate::language::{encode_question, lstm_step, LstmState, LstmWeights, PaddedBatch};
use crate::norm::{BatchNormState, CbnPredictor, PredictorLayout};
use crate::params::{Mode, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Relative-error bound every check must meet.
pub const TOLERANCE: f64 = 1e-4;
/// Random instances per entry.
pub const INSTANCES: usize = 20;
/// Instances with a ReLU input closer to zero than this are redrawn, since a central
/// difference that straddles the kink does not estimate either one-sided derivative.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 1000;

/// Worst instance of one entry.
#[derive(Clone, Debug)]
pub struct EntryReport {
    pub name: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    /// Instances redrawn because a ReLU input fell within [`KINK_MARGIN`] of zero.
    pub redrawn: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub entries: Vec<EntryReport>,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_error <= self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

type Case = fn(&mut ChaCha8Rng) -> Result<GradCheck>;

fn rt(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Uniform values with magnitude in `[0.1, 1.1)`, away from the ReLU kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    rt(shape, rng).map(|x| x + 0.1 * x.signum())
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

fn fd(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<GradCheck> {
    check(&inputs, f, STEP)
}

fn elementwise(rng: &mut ChaCha8Rng, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Result<GradCheck> {
    let shape = [dim(rng, 1, 4), dim(rng, 1, 5)];
    let seed = rng.gen();
    fd(vec![rt(&shape, rng), rt(&shape, rng)], move |g, v| {
        let y = op(g, v[0], v[1])?;
        probe(g, y, seed)
    })
}

fn unary(rng: &mut ChaCha8Rng, input: Tensor<f64>, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Result<GradCheck> {
    let seed = rng.gen();
    fd(vec![input], move |g, v| {
        let y = op(g, v[0])?;
        probe(g, y, seed)
    })
}

fn random_store_values(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        let shape = p.tensor.shape().to_vec();
        p.tensor = if p.name.ends_with(".gamma") { rt(&shape, rng).map(|x| 1.0 + 0.5 * x) } else { rt(&shape, rng).map(|x| 0.5 * x) };
    }
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("add", |r| elementwise(r, |g, a, b| g.add(a, b))),
        ("sub", |r| elementwise(r, |g, a, b| g.sub(a, b))),
        ("mul", |r| elementwise(r, |g, a, b| g.mul(a, b))),
        ("scale", |r| {
            let (s, f) = ([dim(r, 1, 4), dim(r, 1, 4)], r.gen_range(-2.0..2.0));
            let seed = r.gen();
            fd(vec![rt(&s, r)], move |g, v| {
                let y = g.scale(v[0], f)?;
                probe(g, y, seed)
            })
        }),
        ("add_rows", |r| {
            let (n, c) = (dim(r, 1, 4), dim(r, 1, 5));
            let seed = r.gen();
            fd(vec![rt(&[n, c], r), rt(&[c], r)], move |g, v| {
                let y = g.add_rows(v[0], v[1])?;
                probe(g, y, seed)
            })
        }),
        ("sum", |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 4)];
            fd(vec![rt(&s, r)], |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.sum(y)
            })
        }),
        ("mean", |r| {
            let s = [dim(r, 1, 4), dim(r, 1, 4)];
            fd(vec![rt(&s, r)], |g, v| {
                let y = g.mul(v[0], v[0])?;
                g.mean(y)
            })
        }),
        ("reshape", |r| {
            let (a, b) = (dim(r, 1, 4), dim(r, 1, 4));
            let seed = r.gen();
            fd(vec![rt(&[a, b], r)], move |g, v| {
                let y = g.reshape(v[0], &[b, a])?;
                probe(g, y, seed)
            })
        }),
        ("relu", |r| {
            let x = away_from_zero(&[dim(r, 1, 4), dim(r, 1, 5)], r);
            unary(r, x, |g, x| g.relu(x))
        }),
        ("tanh", |r| {
            let x = rt(&[dim(r, 1, 4), dim(r, 1, 5)], r).map(|x| 2.0 * x);
            unary(r, x, |g, x| g.tanh(x))
        }),
        ("sigmoid", |r| {
            let x = rt(&[dim(r, 1, 4), dim(r, 1, 5)], r).map(|x| 3.0 * x);
            unary(r, x, |g, x| g.sigmoid(x))
        }),
        ("affine", |r| {
            let (n, d, k) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 4));
            let bias = r.gen_bool(0.5);
            let seed = r.gen();
            fd(vec![rt(&[n, d], r), rt(&[d, k], r), rt(&[k], r)], move |g, v| {
                let y = g.affine(v[0], v[1], bias.then_some(v[2]))?;
                probe(g, y, seed)
            })
        }),
        ("conv2d", |r| {
            let (n, ci, co) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3));
            let (k, stride) = ([1, 3][dim(r, 0, 1)], dim(r, 1, 2));
            let pad = if k == 3 { dim(r, 0, 1) } else { 0 };
            let size = dim(r, k.max(2), 5);
            let bias = r.gen_bool(0.5);
            let seed = r.gen();
            fd(vec![rt(&[n, ci, size, size], r), rt(&[co, ci, k, k], r), rt(&[co], r)], move |g, v| {
                let y = g.conv2d(v[0], v[1], bias.then_some(v[2]), stride, pad)?;
                probe(g, y, seed)
            })
        }),
        ("softmax_over", |r| {
            let s = [dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 3)];
            let axis = dim(r, 0, 2);
            let seed = r.gen();
            fd(vec![rt(&s, r).map(|x| 3.0 * x)], move |g, v| {
                let y = g.softmax_over(v[0], axis)?;
                probe(g, y, seed)
            })
        }),
        ("moments_over", |r| {
            let s = [dim(r, 2, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
            let (s1, s2) = (r.gen(), r.gen());
            fd(vec![rt(&s, r)], move |g, v| {
                let (m, var) = g.moments_over(v[0])?;
                let a = probe(g, m, s1)?;
                let b = probe(g, var, s2)?;
                g.add(a, b)
            })
        }),
        ("normalize_channels", |r| {
            let (n, c, h) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            let seed = r.gen();
            let var = rt(&[c], r).map(|x| 0.6 + 0.5 * x);
            fd(vec![rt(&[n, c, h, h], r), rt(&[c], r), var], move |g, v| {
                let y = g.normalize_channels(v[0], v[1], v[2], 1e-5)?;
                probe(g, y, seed)
            })
        }),
        ("channel_affine", |r| {
            let (n, c, h) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            let per_sample = r.gen_bool(0.5);
            let ps: Vec<usize> = if per_sample { vec![n, c] } else { vec![c] };
            let seed = r.gen();
            fd(vec![rt(&[n, c, h, h], r), rt(&ps, r), rt(&ps, r)], move |g, v| {
                let y = g.channel_affine(v[0], v[1], v[2])?;
                probe(g, y, seed)
            })
        }),
        ("concat_cols", |r| {
            let n = dim(r, 1, 3);
            let (a, b) = (dim(r, 1, 3), dim(r, 1, 3));
            let seed = r.gen();
            fd(vec![rt(&[n, a], r), rt(&[n, b], r)], move |g, v| {
                let y = g.concat_cols(&[v[0], v[1]])?;
                probe(g, y, seed)
            })
        }),
        ("slice_cols", |r| {
            let (n, c) = (dim(r, 1, 3), dim(r, 2, 6));
            let start = dim(r, 0, c - 1);
            let len = dim(r, 1, c - start);
            let seed = r.gen();
            fd(vec![rt(&[n, c], r)], move |g, v| {
                let y = g.slice_cols(v[0], start, len)?;
                probe(g, y, seed)
            })
        }),
        ("gather_rows", |r| {
            let (rows, c) = (dim(r, 1, 5), dim(r, 1, 3));
            let ids: Vec<usize> = (0..dim(r, 1, 6)).map(|_| r.gen_range(0..rows)).collect();
            let seed = r.gen();
            fd(vec![rt(&[rows, c], r)], move |g, v| {
                let y = g.gather_rows(v[0], &ids)?;
                probe(g, y, seed)
            })
        }),
        ("repeat_rows", |r| {
            let (n, c, times) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 4));
            let seed = r.gen();
            fd(vec![rt(&[n, c], r)], move |g, v| {
                let y = g.repeat_rows(v[0], times)?;
                probe(g, y, seed)
            })
        }),
        ("to_locations", |r| {
            let s = [dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
            let seed = r.gen();
            fd(vec![rt(&s, r)], move |g, v| {
                let y = g.to_locations(v[0])?;
                probe(g, y, seed)
            })
        }),
        ("attention_pool", |r| {
            let (n, l, gl, c) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 3), dim(r, 1, 3));
            let seed = r.gen();
            fd(vec![rt(&[n, l, gl], r), rt(&[n * l, c], r)], move |g, v| {
                let y = g.attention_pool(v[0], v[1])?;
                probe(g, y, seed)
            })
        }),
        ("blend_rows", |r| {
            let (n, c) = (dim(r, 1, 4), dim(r, 1, 3));
            let mask: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
            let seed = r.gen();
            fd(vec![rt(&[n, c], r), rt(&[n, c], r)], move |g, v| {
                let y = g.blend_rows(v[0], v[1], &mask)?;
                probe(g, y, seed)
            })
        }),
        ("avg_pool2", |r| {
            let s = [dim(r, 1, 2), dim(r, 1, 3), 2 * dim(r, 1, 2), 2 * dim(r, 1, 2)];
            let seed = r.gen();
            fd(vec![rt(&s, r)], move |g, v| {
                let y = g.avg_pool2(v[0])?;
                probe(g, y, seed)
            })
        }),
        ("global_avg_pool", |r| {
            let s = [dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)];
            let seed = r.gen();
            fd(vec![rt(&s, r)], move |g, v| {
                let y = g.global_avg_pool(v[0])?;
                probe(g, y, seed)
            })
        }),
        ("cross_entropy", |r| {
            let (n, k) = (dim(r, 1, 5), dim(r, 2, 6));
            let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
            fd(vec![rt(&[n, k], r).map(|x| 3.0 * x)], move |g, v| g.cross_entropy(v[0], &targets))
        }),
        ("lstm_step", |r| {
            let (n, d, h) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 3));
            let seed = r.gen();
            let inputs = vec![rt(&[n, h], r), rt(&[n, h], r), rt(&[n, d], r), rt(&[d, 4 * h], r), rt(&[h, 4 * h], r), rt(&[4 * h], r)];
            fd(inputs, move |g, v| {
                let w = LstmWeights { input: v[3], recurrent: v[4], bias: v[5] };
                let s = lstm_step(g, LstmState { h: v[0], c: v[1] }, v[2], &w)?;
                let a = probe(g, s.h, seed)?;
                let b = probe(g, s.c, seed ^ 1)?;
                g.add(a, b)
            })
        }),
        ("lstm_encoder", |r| {
            let (vocab, d, h, rows) = (dim(r, 3, 6), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            let seqs: Vec<Vec<usize>> = (0..rows).map(|_| (0..dim(r, 1, 4)).map(|_| r.gen_range(1..vocab)).collect()).collect();
            let batch = PaddedBatch::new(&seqs)?;
            let seed = r.gen();
            let inputs = vec![rt(&[vocab, d], r), rt(&[d, 4 * h], r), rt(&[h, 4 * h], r), rt(&[4 * h], r)];
            fd(inputs, move |g, v| {
                let w = LstmWeights { input: v[1], recurrent: v[2], bias: v[3] };
                let e = encode_question(g, &batch, &[v[0]], &[w])?;
                probe(g, e, seed)
            })
        }),
        ("cbn_forward", |r| {
            let (n, c, hw, e, hidden) = (dim(r, 2, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            let layout = if r.gen_bool(0.5) { PredictorLayout::Shared } else { PredictorLayout::Separate };
            let mut store = ParamStore::new();
            let bn = BatchNormState::new(&mut store, "bn", c, 1e-5, 0.1)?;
            let pred = CbnPredictor::new(&mut store, "cbn", e, hidden, c, layout, r)?;
            random_store_values(&mut store, r);
            let seed = r.gen();
            let inputs = vec![rt(&[n, c, hw, hw], r), rt(&[n, e], r)];
            check_module(
                &store,
                &inputs,
                Mode::Train,
                move |fwd, v| {
                    let d = pred.predict(fwd, v[1])?;
                    let y = bn.forward_conditional(fwd, v[0], &d)?;
                    probe(&mut fwd.graph, y, seed)
                },
                STEP,
            )
        }),
        ("residual_block", |r| {
            let cfg = BackboneConfig {
                stem_channels: 2,
                stem_stride: 1,
                stem_pool: false,
                stage_channels: [2, 4, 8, 16],
                blocks_per_stage: [1, 1, 1, 1],
                bottleneck_divisor: 1,
                input_size: 8,
                modulated_stages: StageSet::ALL,
                modulate_shortcut: r.gen_bool(0.5),
                ..BackboneConfig::default()
            };
            let e = dim(r, 1, 3);
            let spec = ModulationSpec { embedding_width: e, hidden: 2, layout: PredictorLayout::Shared };
            let mut store = ParamStore::new();
            let bb = Backbone::new(&mut store, &cfg, Some(spec), r)?;
            random_store_values(&mut store, r);
            // Stage 1 keeps the identity shortcut; stage 2 projects with stride 2.
            let block = bb.stages[dim(r, 0, 1)][0].clone();
            let n = dim(r, 2, 3);
            // At least 2x2 outputs per channel after the stride, so batch statistics are
            // not degenerate (two values normalize to ±1 whatever the input).
            let size = 2 * dim(r, 2, 3);
            let seed = r.gen();
            let inputs = vec![rt(&[n, cfg.stage_channels[0], size, size], r), rt(&[n, e], r)];
            check_module(
                &store,
                &inputs,
                Mode::Train,
                move |fwd, v| {
                    let deltas = block.predictors.as_ref().map(|p| p.predict(fwd, v[1])).transpose()?;
                    let y = block.forward(fwd, v[0], deltas.as_ref())?;
                    probe(&mut fwd.graph, y, seed)
                },
                STEP,
            )
        }),
        ("spatial_attention", |r| {
            // One location would make the softmax weight constant and every MLP gradient zero.
            let (n, c, h, e, hidden) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 2, 3), dim(r, 1, 3), dim(r, 1, 4));
            let seed = r.gen();
            let bias = r.gen_range(-1.0..1.0);
            let inputs = vec![rt(&[n, c, h, h], r), rt(&[n, e], r), rt(&[c + e, hidden], r), rt(&[hidden], r), rt(&[hidden, 1], r)];
            // The logit bias moves every location equally, so its gradient is exactly
            // zero; it is held constant rather than compared against a noise floor.
            fd(inputs, move |g, v| {
                let out_bias = g.constant(Tensor::scalar(bias));
                let w = MlpWeights { hidden_weight: v[2], hidden_bias: v[3], out_weight: v[4], out_bias };
                let o = spatial_attention(g, v[0], v[1], &w)?;
                probe(g, o.e_v, seed)
            })
        }),
        ("mlb_attention", |r| {
            let (n, c, h, e, j, gl) = (dim(r, 1, 2), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3));
            let seed = r.gen();
            let p_bias = rt(&[gl], r);
            let inputs = vec![rt(&[n, c, h, h], r), rt(&[n, e], r), rt(&[e, j], r), rt(&[j], r), rt(&[c, j], r), rt(&[j], r), rt(&[j, gl], r)];
            fd(inputs, move |g, v| {
                let p_bias = g.constant(p_bias.clone());
                let w = MlbWeights { u: v[2], u_bias: v[3], v: v[4], v_bias: v[5], p: v[6], p_bias };
                let o = mlb_attention(g, v[0], v[1], &w)?;
                probe(g, o.e_v, seed)
            })
        }),
        ("elementwise_fusion", |r| {
            let (n, e, c, j, k) = (dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4), dim(r, 2, 5));
            let seed = r.gen();
            let inputs = vec![rt(&[n, e], r), rt(&[n, c], r), rt(&[e, j], r), rt(&[c, j], r), rt(&[j, k], r), rt(&[k], r)];
            fd(inputs, move |g, v| {
                let w = FusionWeights { u: v[2], v: v[3], p: v[4], p_bias: v[5] };
                let y = elementwise_fusion(g, v[0], v[1], &w)?;
                probe(g, y, seed)
            })
        }),
        ("oracle_head", |r| {
            let (n, a, b, hidden) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 4));
            let targets: Vec<usize> = (0..n).map(|_| r.gen_range(0..3)).collect();
            let inputs = vec![rt(&[n, a], r), rt(&[n, b], r), rt(&[a + b, hidden], r), rt(&[hidden], r), rt(&[hidden, 3], r), rt(&[3], r)];
            fd(inputs, move |g, v| {
                let w = MlpWeights { hidden_weight: v[2], hidden_bias: v[3], out_weight: v[4], out_bias: v[5] };
                let y = oracle_head(g, &[v[0], v[1]], &w)?;
                g.cross_entropy(y, &targets)
            })
        }),
    ]
}

/// Run every entry on `instances` random instances derived from `seed`.
pub fn run_suite(seed: u64, instances: usize) -> Result<SuiteReport> {
    let mut entries = Vec::new();
    for (i, (name, case)) in cases().into_iter().enumerate() {
        let clock = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut worst = 0.0f64;
        let mut redrawn = 0;
        for _ in 0..instances {
            let c = loop {
                let c = case(&mut rng)?;
                if c.relu_margin.map_or(true, |m| m >= KINK_MARGIN) {
                    break c;
                }
                redrawn += 1;
                if redrawn > MAX_REDRAWS {
                    return Err(Error::Validation(format!("{name}: no instance clears the ReLU kink margin")));
                }
            };
            worst = worst.max(c.max_rel_error);
        }
        let seconds = clock.elapsed().as_secs_f64();
        entries.push(EntryReport { name, instances, max_rel_error: worst, redrawn, seconds });
    }
    Ok(SuiteReport { entries, tolerance: TOLERANCE })
}

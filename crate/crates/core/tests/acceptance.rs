//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 1-5, 10 and 11 always run and take well under a minute. Criteria 6-9 train
//! dozens of models at desk scale and take hours on one core. They run only when
//! `CBN_ACCEPTANCE=full` is set; otherwise they print `NOT RUN`. Set `CBN_ACCEPTANCE_DIR`
//! to keep their run directories somewhere other than `target/acceptance`. Finished runs
//! with an identical config are reused, so an interrupted suite resumes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cbn::backbone::{count_parameters, StageSet};
use cbn::checkpoint::Checkpoint;
use cbn::config::{ExperimentConfig, Variant};
use cbn::data::{build_vocabulary, Prepared, PreparedSplits};
use cbn::experiment::{
    ablation_config, export_embeddings, generate_splits, load_pretrained, run_ablation, run_name, run_training,
    RunOptions, RunSummary, BEST_CHECKPOINT, LATEST_CHECKPOINT, METRICS_FILE, TIMINGS_FILE,
};
use cbn::gradcheck::{run_suite, INSTANCES, TOLERANCE};
use cbn::models::{build_variant, Built};
use cbn::norm::{BatchNormState, DEFAULT_EPS, DEFAULT_MOMENTUM};
use cbn::params::{Forward, Mode, ParamStore};
use cbn::probe::{linear_probe, ProbeConfig};
use cbn::tasks::{generate, write_dataset, Split, TaskKind};
use cbn::train::first_batch_loss;
use cbn::{Result, Tensor};

/// Outcome of one criterion.
enum Verdict {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn verdict(pass: bool, detail: String) -> Verdict {
    if pass {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

/// Small model used by the fast criteria.
fn tiny(task: TaskKind, variant: Variant) -> ExperimentConfig {
    let mut c = ExperimentConfig::default_for(task);
    c.variant = variant;
    c.data.image_size = 16;
    c.data.scenes = 40;
    c.oracle.crop_size = 16;
    c.backbone.stem_channels = 4;
    c.backbone.stage_channels = [4, 8, 16, 32];
    c.backbone.blocks_per_stage = [1, 1, 1, 1];
    c.backbone.stem_pool = false;
    c.language.embedding_width = 6;
    c.language.hidden = 8;
    c.modulation_hidden = 8;
    c.attention_hidden = 8;
    c.fusion_joint = 8;
    c.pretrain_threshold = 0.0;
    c
}

/// A pretraining-shaped store whose normalization parameters and running statistics
/// are far from their initial values, so equalities cannot hold by accident.
fn perturbed_pretrained(config: &ExperimentConfig) -> ParamStore<f64> {
    let mut c = config.clone();
    c.switch_task(TaskKind::Pretrain);
    c.variant = Variant::Raw;
    let mut store = build_variant::<f64>(&c, 0, None).unwrap().store;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.get_mut(id);
        if p.name.ends_with(".gamma") || p.name.ends_with(".beta") {
            let shift = if p.name.ends_with(".gamma") { 1.0 } else { 0.0 };
            p.tensor = Tensor::uniform(p.tensor.shape(), 0.5, &mut rng).map(|x| x + shift);
        }
    }
    let names: Vec<String> = store.buffers().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let id = store.buffer_id(&name).unwrap();
        let shape = store.buffer(id).shape().to_vec();
        let shift = if name.ends_with("running_var") { 1.0 } else { 0.0 };
        *store.buffer_mut(id) = Tensor::uniform(&shape, 0.5, &mut rng).map(|x| x + shift);
    }
    store
}

fn tiny_data(config: &ExperimentConfig) -> PreparedSplits<f64> {
    let splits = generate_splits(config).unwrap();
    let vocab = build_vocabulary(&splits);
    PreparedSplits::new(&splits, config, vocab).unwrap()
}

fn criterion_1() -> Verdict {
    let clock = Instant::now();
    let report = match run_suite(0, INSTANCES) {
        Ok(r) => r,
        Err(e) => return Verdict::Fail(format!("suite error: {e}")),
    };
    let seconds = clock.elapsed().as_secs_f64();
    let failing: Vec<&str> =
        report.entries.iter().filter(|e| e.max_rel_error > TOLERANCE).map(|e| e.name).collect();
    let fewest = report.entries.iter().map(|e| e.instances).min().unwrap_or(0);
    verdict(
        failing.is_empty() && fewest >= INSTANCES && seconds <= 120.0,
        format!(
            "{} entries, >= {fewest} instances each, worst relative error {:.2e} (tolerance {TOLERANCE:.0e}), {seconds:.1}s of 120s{}",
            report.entries.len(),
            report.worst(),
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(", ")) }
        ),
    )
}

fn criterion_2() -> Verdict {
    let raw_cfg = tiny(TaskKind::Vqa, Variant::Raw);
    let modern_cfg = tiny(TaskKind::Vqa, Variant::Modern);
    let pre = perturbed_pretrained(&raw_cfg);
    let data = tiny_data(&raw_cfg);
    let mut raw = build_variant::<f64>(&raw_cfg, data.vocab.len(), Some(&pre)).unwrap();
    // Non-zero heads, shared by both models, so the logits are not trivially zero.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for id in raw.store.ids().collect::<Vec<_>>() {
        let p = raw.store.get_mut(id);
        if p.name.starts_with("vqa.fusion") {
            p.tensor = Tensor::uniform(p.tensor.shape(), 0.3, &mut rng);
        }
    }
    let mut modern = build_variant::<f64>(&modern_cfg, data.vocab.len(), Some(&pre)).unwrap();
    modern.store.load_matching(&raw.store);

    let idx: Vec<usize> = (0..8).collect();
    let batch = data.train.batch(&idx).unwrap();
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for mode in [Mode::Train, Mode::Infer] {
        let mut fr = Forward::new(&raw.store, mode);
        let mut fm = Forward::new(&modern.store, mode);
        let (or, om) = (raw.model.forward(&mut fr, &batch).unwrap(), modern.model.forward(&mut fm, &batch).unwrap());
        let (sr, sm) = (or.features.unwrap(), om.features.unwrap());
        let mut pairs = vec![("stem".to_string(), sr.stem, sm.stem)];
        for s in 0..4 {
            pairs.push((format!("stage{}", s + 1), sr.stages[s], sm.stages[s]));
        }
        pairs.push(("logits".to_string(), or.logits, om.logits));
        for (name, a, b) in pairs {
            compared += 1;
            if !fr.graph.value(a).bit_eq(fm.graph.value(b)) {
                mismatches.push(format!("{name} ({mode:?})"));
            }
        }
        if fr.graph.value(or.logits).max_abs() == 0.0 {
            mismatches.push(format!("logits are zero ({mode:?})"));
        }
    }
    verdict(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("{compared} tensors bit-identical across train and infer mode")
        } else {
            format!("differ: {}", mismatches.join(", "))
        },
    )
}

fn criterion_3() -> Verdict {
    let config = ExperimentConfig::default();
    let built = build_variant::<f64>(&config, 64, None).unwrap();
    let counts = count_parameters(&built.store);
    let bn = counts.per_component.get("bn").copied().unwrap_or(0);
    let backbone = bn + counts.per_component.get("conv").copied().unwrap_or(0);
    let total = counts.total;
    verdict(
        100 * bn < backbone && 100 * bn < total,
        format!(
            "gamma+beta {bn} / backbone {backbone} = {:.4}%, / all parameters {total} = {:.4}% (limit 1%)",
            100.0 * bn as f64 / backbone as f64,
            100.0 * bn as f64 / total as f64
        ),
    )
}

fn criterion_4() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut pre_cfg = tiny(TaskKind::Pretrain, Variant::Raw);
    pre_cfg.data.scenes = 60;
    pre_cfg.train.epochs = 1;
    let pre_splits = generate_splits(&pre_cfg).unwrap();
    run_training(&pre_cfg, &pre_splits, None, &dir.path().join("pre"), RunOptions::default()).unwrap();
    let pre = load_pretrained(&dir.path().join("pre").join(BEST_CHECKPOINT)).unwrap();

    let mut cfg = tiny(TaskKind::Vqa, Variant::Modern);
    cfg.train.epochs = 2;
    cfg.train.patience = 10;
    let splits = generate_splits(&cfg).unwrap();
    let run = dir.path().join("modern");
    run_training(&cfg, &splits, Some(&pre), &run, RunOptions::default()).unwrap();
    let after = Checkpoint::<f64>::load(&run.join(LATEST_CHECKPOINT)).unwrap().store;

    let (mut backbone, mut changed_backbone) = (0, Vec::new());
    let (mut predictors, mut moved_predictors) = (0, 0);
    for p in after.iter() {
        if p.name.starts_with("backbone.") {
            backbone += 1;
            let original = pre.get(pre.id(&p.name).unwrap());
            if !p.tensor.bit_eq(&original.tensor) || !p.frozen {
                changed_backbone.push(p.name.clone());
            }
        } else if p.name.starts_with("cbn.") {
            predictors += 1;
            if p.name.contains(".out_weight") && p.tensor.max_abs() > 0.0 {
                moved_predictors += 1;
            }
        }
    }
    let heads = after.iter().filter(|p| p.name.contains(".out_weight")).count();
    verdict(
        changed_backbone.is_empty() && backbone > 0 && moved_predictors == heads && heads > 0,
        format!(
            "{backbone} backbone tensors bit-identical to pretraining{}, {moved_predictors}/{heads} predictor output heads moved off zero ({predictors} predictor tensors)",
            if changed_backbone.is_empty() { String::new() } else { format!(" except {}", changed_backbone.join(", ")) }
        ),
    )
}

fn criterion_5() -> Verdict {
    let mut store = ParamStore::<f64>::new();
    let channels = 6;
    let bn = BatchNormState::new(&mut store, "bn", channels, DEFAULT_EPS, DEFAULT_MOMENTUM).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Channel c has mean 3c - 7 and spread 4 + c, so every variance is at least 16 and
    // eps / variance stays below 1e-6.
    let (n, h, w) = (8, 5, 5);
    let mut data = Vec::with_capacity(n * channels * h * w);
    let noise = Tensor::<f64>::uniform(&[n, channels, h, w], 3f64.sqrt(), &mut rng);
    for (i, x) in noise.data().iter().enumerate() {
        let c = (i / (h * w)) % channels;
        data.push((3 * c) as f64 - 7.0 + (4.0 + c as f64) * x);
    }
    let x = Tensor::new(&[n, channels, h, w], data).unwrap();
    let mut f = Forward::new(&store, Mode::Train);
    let xv = f.graph.constant(x.clone());
    let y = bn.forward(&mut f, xv).unwrap();
    let y = f.graph.value(y).clone();
    let per = (n * h * w) as f64;
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for c in 0..channels {
        let vals: Vec<f64> = (0..n).flat_map(|i| (0..h * w).map(move |k| (i, k))).map(|(i, k)| y.data()[(i * channels + c) * h * w + k]).collect();
        let mean = vals.iter().sum::<f64>() / per;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per;
        worst_mean = worst_mean.max(mean.abs());
        worst_var = worst_var.max((var - 1.0).abs());
    }

    // Inference on a whole modulated model: one sample alone versus inside a batch of 8.
    let cfg = tiny(TaskKind::Vqa, Variant::Modern);
    let data = tiny_data(&cfg);
    let mut built = build_variant::<f64>(&cfg, data.vocab.len(), Some(&perturbed_pretrained(&cfg))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for id in built.store.ids().collect::<Vec<_>>() {
        let p = built.store.get_mut(id);
        if !p.frozen {
            p.tensor = Tensor::uniform(p.tensor.shape(), 0.2, &mut rng);
        }
    }
    let idx: Vec<usize> = (0..8).collect();
    let mut fb = Forward::new(&built.store, Mode::Infer);
    let full = built.model.forward(&mut fb, &data.val.batch(&idx).unwrap()).unwrap();
    let full_logits = fb.graph.value(full.logits).clone();
    let full_stage4 = fb.graph.value(full.features.unwrap().stages[3]).clone();
    let k = full_logits.shape()[1];
    let per_sample = full_stage4.numel() / 8;
    let mut worst_infer = 0.0f64;
    for i in idx {
        let mut f1 = Forward::new(&built.store, Mode::Infer);
        let one = built.model.forward(&mut f1, &data.val.batch(&[i]).unwrap()).unwrap();
        let logits = f1.graph.value(one.logits);
        let stage4 = f1.graph.value(one.features.unwrap().stages[3]);
        for (a, b) in logits.data().iter().zip(&full_logits.data()[i * k..(i + 1) * k]) {
            worst_infer = worst_infer.max((a - b).abs());
        }
        for (a, b) in stage4.data().iter().zip(&full_stage4.data()[i * per_sample..(i + 1) * per_sample]) {
            worst_infer = worst_infer.max((a - b).abs());
        }
    }
    verdict(
        worst_mean <= 1e-10 && worst_var <= 1e-6 && worst_infer <= 1e-12,
        format!(
            "train-mode |mean| {worst_mean:.1e} (<= 1e-10), |var - 1| {worst_var:.1e} (<= 1e-6); infer batch 1 vs 8 max diff {worst_infer:.1e} (<= 1e-12)"
        ),
    )
}

fn criterion_10() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut problems = Vec::new();

    let pre = perturbed_pretrained(&tiny(TaskKind::Vqa, Variant::Raw));
    let mut cfg = tiny(TaskKind::Vqa, Variant::Modern);
    cfg.train.epochs = 2;
    let splits = generate_splits(&cfg).unwrap();
    for name in ["a", "b"] {
        run_training(&cfg, &splits, Some(&pre), &dir.path().join(name), RunOptions::default()).unwrap();
    }
    let trail = |n: &str| fs::read(dir.path().join(n).join(METRICS_FILE)).unwrap();
    if trail("a") != trail("b") {
        problems.push("metrics trails differ".to_string());
    }

    let ckpt_path = dir.path().join("a").join(BEST_CHECKPOINT);
    let bytes = fs::read(&ckpt_path).unwrap();
    let loaded = Checkpoint::<f64>::load(&ckpt_path).unwrap();
    if loaded.to_bytes() != bytes {
        problems.push("checkpoint re-serializes differently".to_string());
    }
    let restored = loaded.restore().unwrap();
    let exact = restored.store.iter().all(|p| p.tensor.bit_eq(&loaded.store.get(loaded.store.id(&p.name).unwrap()).tensor));
    if !exact || restored.store.len() != loaded.store.len() {
        problems.push("restored parameters differ".to_string());
    }

    let mut containers = 0;
    for task in TaskKind::ALL {
        let c = tiny(task, Variant::Raw);
        let a = generate(task, &c.data, 4).unwrap();
        let b = generate(task, &c.data, 4).unwrap();
        let other = generate(task, &c.data, 5).unwrap();
        for split in Split::ALL {
            let (pa, pb) = (dir.path().join(format!("{task}-{split}-a")), dir.path().join(format!("{task}-{split}-b")));
            write_dataset(a.get(split), &pa).unwrap();
            write_dataset(b.get(split), &pb).unwrap();
            containers += 1;
            if fs::read(&pa).unwrap() != fs::read(&pb).unwrap() {
                problems.push(format!("{task} {split} container differs between runs"));
            }
            if a.get(split).to_bytes().unwrap() == other.get(split).to_bytes().unwrap() {
                problems.push(format!("{task} {split} container ignores the seed"));
            }
        }
    }
    verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("metrics trails byte-identical, checkpoint round-trip bitwise, {containers} dataset containers byte-identical per seed")
        } else {
            problems.join("; ")
        },
    )
}

fn criterion_11() -> Verdict {
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    let mut cases: Vec<ExperimentConfig> = Variant::ALL.iter().map(|&v| tiny(TaskKind::Vqa, v)).collect();
    for v in [Variant::Raw, Variant::Modern] {
        for inputs in ["crop,spatial,category", "spatial,category", "crop"] {
            let mut c = tiny(TaskKind::Oracle, v);
            c.oracle.inputs = inputs.parse().unwrap();
            if v == Variant::Modern && !c.oracle.inputs.crop {
                continue;
            }
            cases.push(c);
        }
    }
    cases.push(tiny(TaskKind::Pretrain, Variant::Raw));
    for c in cases {
        let data = tiny_data(&c);
        let pre = (c.task != TaskKind::Pretrain).then(|| perturbed_pretrained(&c));
        let built: Built<f64> = build_variant(&c, data.vocab.len(), pre.as_ref()).unwrap();
        let loss = first_batch_loss(&built, &data.train, c.train.batch_size).unwrap();
        let expected = (c.task.answers().len() as f64).ln();
        let rel = (loss - expected).abs() / expected;
        worst = worst.max(rel);
        lines.push(format!("{}/{}", c.task, c.variant));
    }
    verdict(worst <= 0.02, format!("{} models, worst |loss - ln K| / ln K = {worst:.2e} (<= 0.02)", lines.len()))
}

// ---------------------------------------------------------------------------------------
// Directional criteria at desk scale.

/// Desk-scale settings shared by every task in the directional criteria.
fn desk(task: TaskKind) -> ExperimentConfig {
    let mut c = ExperimentConfig::default_for(task);
    c.data.image_size = 32;
    c.backbone.stem_channels = 8;
    c.backbone.stem_pool = false;
    c.backbone.stage_channels = [8, 16, 32, 64];
    c.backbone.blocks_per_stage = [1, 1, 1, 1];
    c
}

const SEEDS: [u64; 3] = [0, 1, 2];
const RUN_LIMIT_SECONDS: f64 = 15.0 * 60.0;

struct Desk {
    root: PathBuf,
    pretrained: ParamStore<f64>,
}

impl Desk {
    fn prepare(root: &Path) -> Result<Self> {
        let cfg = desk(TaskKind::Pretrain);
        let dir = root.join("pretrain");
        run_training(&cfg, &generate_splits(&cfg)?, None, &dir, RunOptions { echo: true, resume: true })?;
        Ok(Self { root: root.to_path_buf(), pretrained: load_pretrained(&dir.join(BEST_CHECKPOINT))? })
    }

    fn run(&self, config: &ExperimentConfig) -> Result<RunSummary> {
        let dir = self.root.join(run_name(config));
        eprintln!("acceptance: {}", dir.display());
        run_training(config, &generate_splits(config)?, Some(&self.pretrained), &dir, RunOptions { echo: true, resume: true })
    }

    /// Wall-clock seconds of a finished run, from its timings sidecar.
    fn seconds(&self, config: &ExperimentConfig) -> f64 {
        let text = fs::read_to_string(self.root.join(run_name(config)).join(TIMINGS_FILE)).unwrap_or_default();
        text.lines()
            .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
            .filter_map(|v| v["seconds"].as_f64())
            .sum()
    }

    fn mean_accuracy(&self, configs: &[ExperimentConfig]) -> Result<(f64, f64)> {
        let mut sum = 0.0;
        let mut slowest = 0.0f64;
        for c in configs {
            sum += self.run(c)?.test_accuracy;
            slowest = slowest.max(self.seconds(c));
        }
        Ok((sum / configs.len() as f64, slowest))
    }
}

fn seeded(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    SEEDS
        .iter()
        .map(|&s| {
            let mut c = base.clone();
            c.seed = s;
            c
        })
        .collect()
}

/// VQA at desk scale. The 20 epochs of the task default see only a fraction of the
/// updates a reference-scale run gets, so the learning rate is raised and the scene
/// count grown until the raw baseline leaves chance on yes/no questions.
fn vqa(variant: Variant) -> ExperimentConfig {
    let mut c = desk(TaskKind::Vqa);
    c.variant = variant;
    c.train.adam.lr = 1e-3;
    c.data.scenes = 10_000;
    c
}

fn criterion_6(d: &Desk) -> Result<Verdict> {
    let mut acc = BTreeMap::new();
    let mut slowest = 0.0f64;
    for v in [Variant::Raw, Variant::FtStage4, Variant::FtBn, Variant::Modern] {
        let (a, s) = d.mean_accuracy(&seeded(&vqa(v)))?;
        acc.insert(v.to_string(), a);
        slowest = slowest.max(s);
    }
    let (raw, ft4, ftbn, modern) = (acc["raw"], acc["ft_stage4"], acc["ft_bn"], acc["modern"]);
    Ok(verdict(
        modern > ftbn && ftbn > raw && ft4 <= raw + 0.01 && slowest <= RUN_LIMIT_SECONDS,
        format!(
            "3-seed mean test accuracy: modern {:.2}, ft_bn {:.2}, raw {:.2}, ft_stage4 {:.2} (needs modern > ft_bn > raw, ft_stage4 <= raw + 1); slowest run {:.0}s",
            100.0 * modern,
            100.0 * ftbn,
            100.0 * raw,
            100.0 * ft4,
            slowest
        ),
    ))
}

fn criterion_7(d: &Desk) -> Result<Verdict> {
    let sets: Vec<StageSet> = ["none", "4", "3-4", "2-4", "all"].iter().map(|s| s.parse().unwrap()).collect();
    let root = &d.root;
    let splits = generate_splits(&vqa(Variant::Modern))?;
    let table = run_ablation(&vqa(Variant::Modern), &sets, &SEEDS, &splits, &d.pretrained, root, true)?;
    let means: Vec<f64> = table.rows.iter().map(|r| r.mean()).collect();
    let violations: Vec<String> = means
        .windows(2)
        .zip(table.rows.windows(2))
        .filter(|(m, _)| m[1] < m[0] - 0.005)
        .map(|(m, r)| format!("{} {:.2} -> {} {:.2}", r[0].stages.table_label(), 100.0 * m[0], r[1].stages.table_label(), 100.0 * m[1]))
        .collect();
    let slowest = sets
        .iter()
        .flat_map(|&s| SEEDS.iter().map(move |&seed| (s, seed)))
        .map(|(s, seed)| {
            let mut c = ablation_config(&vqa(Variant::Modern), s);
            c.seed = seed;
            let text = fs::read_to_string(root.join(run_name(&c)).join(TIMINGS_FILE)).unwrap_or_default();
            text.lines()
                .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
                .filter_map(|v| v["seconds"].as_f64())
                .sum::<f64>()
        })
        .fold(0.0, f64::max);
    let listed: Vec<String> =
        table.rows.iter().zip(&means).map(|(r, m)| format!("{} {:.2}", r.stages.table_label(), 100.0 * m)).collect();
    Ok(verdict(
        violations.is_empty() && slowest <= RUN_LIMIT_SECONDS,
        format!(
            "3-seed means: {}{}; slowest run {slowest:.0}s",
            listed.join(", "),
            if violations.is_empty() { String::new() } else { format!("; drops beyond 0.5 points: {}", violations.join(", ")) }
        ),
    ))
}

/// Oracle at desk scale, enlarged the same way as [`vqa`].
fn oracle(variant: Variant, inputs: &str) -> ExperimentConfig {
    let mut c = desk(TaskKind::Oracle);
    c.variant = variant;
    c.oracle.inputs = inputs.parse().unwrap();
    c.train.adam.lr = 1e-3;
    c.data.scenes = 10_000;
    c.train.epochs = 20;
    c
}

fn criterion_8(d: &Desk) -> Result<Verdict> {
    let (full, s1) = d.mean_accuracy(&seeded(&oracle(Variant::Modern, "crop,spatial,category")))?;
    let (plain, s2) = d.mean_accuracy(&seeded(&oracle(Variant::Raw, "spatial,category")))?;
    let (crop, s3) = d.mean_accuracy(&seeded(&oracle(Variant::Raw, "crop,spatial,category")))?;
    let err = |a: f64| 100.0 * (1.0 - a);
    let slowest = s1.max(s2).max(s3);
    Ok(verdict(
        err(full) < err(plain) && err(full) < err(crop) && slowest <= RUN_LIMIT_SECONDS,
        format!(
            "3-seed mean test error: crop+spatial+category with CBN {:.2}, spatial+category {:.2}, crop+spatial+category raw {:.2}; slowest run {slowest:.0}s",
            err(full),
            err(plain),
            err(crop)
        ),
    ))
}

fn probe_accuracy(d: &Desk, config: &ExperimentConfig) -> Result<f64> {
    d.run(config)?;
    let ck = Checkpoint::<f64>::load(&d.root.join(run_name(config)).join(BEST_CHECKPOINT))?;
    let built = ck.restore()?;
    let splits = generate_splits(&ck.config)?;
    let val = Prepared::new(splits.get(Split::Val), &ck.config, ck.vocab.as_ref().unwrap())?;
    let m = export_embeddings(&built.model, &built.store, &val, 500, 0)?;
    let r = linear_probe(&m.stage(4), &m.labels(), 3, &ProbeConfig::default())?;
    Ok(r.heldout_accuracy)
}

fn criterion_9(d: &Desk) -> Result<Verdict> {
    let (mut modern, mut raw) = (0.0, 0.0);
    for (m, r) in seeded(&vqa(Variant::Modern)).iter().zip(&seeded(&vqa(Variant::Raw))) {
        modern += probe_accuracy(d, m)? / SEEDS.len() as f64;
        raw += probe_accuracy(d, r)? / SEEDS.len() as f64;
    }
    let gap = 100.0 * (modern - raw);
    Ok(verdict(
        gap >= 10.0,
        format!(
            "held-out answer-type probe accuracy on stage-4 pooled features, 3-seed mean: modern {:.2}, raw {:.2}, gap {gap:.2} points (>= 10)",
            100.0 * modern,
            100.0 * raw
        ),
    ))
}

fn main() -> ExitCode {
    let full = std::env::var("CBN_ACCEPTANCE").is_ok_and(|v| v == "full");
    let mut results: Vec<(u32, &str, Verdict)> = vec![
        (1, "gradient suite", criterion_1()),
        (2, "zero-delta equivalence", criterion_2()),
        (3, "parameter economy", criterion_3()),
        (4, "freeze contract", criterion_4()),
        (5, "normalization semantics", criterion_5()),
    ];
    let directional: [(u32, &str, fn(&Desk) -> Result<Verdict>); 4] = [
        (6, "variant ordering on synthetic VQA", criterion_6),
        (7, "stage ablation on synthetic VQA", criterion_7),
        (8, "oracle input ablation", criterion_8),
        (9, "answer-type separability", criterion_9),
    ];
    if full {
        let root = std::env::var("CBN_ACCEPTANCE_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|_| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance"));
        match Desk::prepare(&root) {
            Ok(d) => {
                for (n, name, f) in directional {
                    let v = f(&d).unwrap_or_else(|e| Verdict::Fail(format!("error: {e}")));
                    results.push((n, name, v));
                }
            }
            Err(e) => {
                for (n, name, _) in directional {
                    results.push((n, name, Verdict::Fail(format!("pretraining failed: {e}"))));
                }
            }
        }
    } else {
        for (n, name, _) in directional {
            results.push((n, name, Verdict::NotRun("set CBN_ACCEPTANCE=full to train the desk-scale runs".into())));
        }
    }
    results.push((10, "determinism and persistence", criterion_10()));
    results.push((11, "initial loss", criterion_11()));
    results.sort_by_key(|r| r.0);

    let mut failed = false;
    for (n, name, v) in &results {
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed = true;
                ("FAIL", d)
            }
            Verdict::NotRun(d) => ("NOT RUN", d),
        };
        println!("criterion {n:>2} [{name}]: {tag}: {detail}");
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

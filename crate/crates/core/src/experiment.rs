//! Run directories, the stage ablation, and embedding export.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::StageSet;
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Variant};
use crate::data::{build_vocabulary, Prepared, PreparedSplits};
use crate::error::{config_err, Error, Result};
use crate::models::{build_variant, Model};
use crate::params::{Forward, Mode, ParamStore};
use crate::tasks::{generate, AnswerType, Splits, TaskKind};
use crate::train::{check_pretrain, train, MetricsRecord, MetricsSink, Timing};

pub const CONFIG_FILE: &str = "config.cfg";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ABLATION_FILE: &str = "ablation.tsv";
const EXPORT_STREAM: u64 = 30;

/// Final numbers of a completed run, written last so its presence marks completion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub test_loss: f64,
    pub test_accuracy: f64,
    #[serde(default)]
    pub test_per_type: std::collections::BTreeMap<String, f64>,
}

struct FileSink {
    metrics: BufWriter<File>,
    timings: BufWriter<File>,
    echo: bool,
}

impl MetricsSink for FileSink {
    fn record(&mut self, record: &MetricsRecord, timing: &Timing) -> Result<()> {
        writeln!(self.metrics, "{}", record.to_line())?;
        writeln!(self.timings, "{}", serde_json::to_string(timing)?)?;
        self.metrics.flush()?;
        self.timings.flush()?;
        if self.echo {
            eprintln!(
                "epoch {:>3} {:<5} loss {:.4} acc {:.4} ({:.1}s)",
                record.epoch, record.split, record.loss, record.accuracy, timing.seconds
            );
        }
        Ok(())
    }
}

/// Generate the config's dataset in memory.
pub fn generate_splits(config: &ExperimentConfig) -> Result<Splits> {
    generate(config.task, &config.data, config.data_seed)
}

/// Load the parameters of a pretraining checkpoint.
pub fn load_pretrained(path: &Path) -> Result<ParamStore<f64>> {
    let ck = Checkpoint::<f64>::load(path)?;
    if ck.config.task != TaskKind::Pretrain {
        return Err(Error::Load(format!("{} is a {} checkpoint, not a pretraining one", path.display(), ck.config.task)));
    }
    Ok(ck.store)
}

/// Read the summary of a finished run in `dir` if it was produced by `config`.
pub fn completed_run(config: &ExperimentConfig, dir: &Path) -> Result<Option<RunSummary>> {
    let (cfg_path, summary_path) = (dir.join(CONFIG_FILE), dir.join(SUMMARY_FILE));
    if !summary_path.exists() || !cfg_path.exists() {
        return Ok(None);
    }
    if fs::read_to_string(cfg_path)? != config.to_text() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(summary_path)?)?))
}

/// Options for [`run_training`].
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Print each metrics record to stderr.
    pub echo: bool,
    /// Reuse a finished run with an identical config instead of retraining.
    pub resume: bool,
}

/// Train one configuration into `dir`, writing the config, vocabulary, metrics trail,
/// timings, best and latest checkpoints, and finally the summary.
pub fn run_training(
    config: &ExperimentConfig,
    splits: &Splits,
    pretrained: Option<&ParamStore<f64>>,
    dir: &Path,
    options: RunOptions,
) -> Result<RunSummary> {
    config.validate()?;
    if options.resume {
        if let Some(s) = completed_run(config, dir)? {
            return Ok(s);
        }
    }
    if config.task != TaskKind::Pretrain && pretrained.is_none() {
        return Err(Error::MissingFile("a pretraining checkpoint is required for this task".into()));
    }
    fs::create_dir_all(dir)?;
    let _ = fs::remove_file(dir.join(SUMMARY_FILE));
    fs::write(dir.join(CONFIG_FILE), config.to_text())?;
    let vocab = build_vocabulary(splits);
    fs::write(dir.join(VOCAB_FILE), vocab.to_text())?;
    let data = PreparedSplits::<f64>::new(splits, config, vocab)?;
    let built = build_variant::<f64>(config, data.vocab.len(), pretrained)?;
    let mut sink = FileSink {
        metrics: BufWriter::new(File::create(dir.join(METRICS_FILE))?),
        timings: BufWriter::new(File::create(dir.join(TIMINGS_FILE))?),
        echo: options.echo,
    };
    let outcome = train(config, built, &data, &mut sink)?;
    let vocab = (config.task != TaskKind::Pretrain).then(|| data.vocab.clone());
    Checkpoint { config: config.clone(), vocab: vocab.clone(), store: outcome.best.clone() }.save(&dir.join(BEST_CHECKPOINT))?;
    Checkpoint { config: config.clone(), vocab, store: outcome.latest.clone() }.save(&dir.join(LATEST_CHECKPOINT))?;
    check_pretrain(config, &outcome)?;
    let summary = RunSummary {
        best_epoch: outcome.best_epoch,
        best_val_accuracy: outcome.best_val_accuracy,
        epochs_run: outcome.epochs_run,
        stopped_early: outcome.stopped_early,
        test_loss: outcome.test.loss,
        test_accuracy: outcome.test.accuracy,
        test_per_type: outcome.test.per_type,
    };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Directory name for one run: task, variant, modulated stages, oracle inputs (oracle
/// task only), and seed.
pub fn run_name(config: &ExperimentConfig) -> String {
    let stages = config.effective_stages().map_or_else(|_| "invalid".to_string(), |s| s.to_string());
    let inputs = match config.task {
        TaskKind::Oracle => format!("-inputs_{}", config.oracle.inputs.to_string().replace(',', "+")),
        _ => String::new(),
    };
    format!("{}-{}-stages_{}{inputs}-seed{}", config.task, config.variant, stages, config.seed)
}

/// Configuration for one ablation row: the empty set is the frozen baseline and the
/// full set is the default modern model.
pub fn ablation_config(base: &ExperimentConfig, stages: StageSet) -> ExperimentConfig {
    let mut c = base.clone();
    if stages.is_empty() {
        c.variant = Variant::Raw;
        c.modulated_stages = None;
    } else {
        if !c.variant.is_modern() {
            c.variant = Variant::Modern;
        }
        c.modulated_stages = if stages == StageSet::ALL { None } else { Some(stages) };
    }
    c
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub stages: StageSet,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    /// Mean per-answer-type test accuracy, in [`AnswerType::ALL`] order.
    pub per_type: [f64; 3],
}

impl AblationRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len().max(1) as f64
    }
}

pub const ABLATION_SCHEMA: &str = "# cbn-ablation-table v1 metric=test_accuracy";
const ABLATION_HEADER: [&str; 7] = ["cbn_applied_to", "stages", "mean", "yes/no", "number", "other", "per_seed"];

/// Mean test accuracy per modulated-stage set.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Tab-separated text: schema line, header, one row per stage set. Accuracies use
    /// the shortest exact decimal form, so parsing recovers them bitwise.
    pub fn to_text(&self) -> String {
        let mut out = format!("{ABLATION_SCHEMA}\n{}\n", ABLATION_HEADER.join("\t"));
        for r in &self.rows {
            let per_seed: Vec<String> = r.seeds.iter().zip(&r.accuracies).map(|(s, a)| format!("{s}:{a}")).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.stages.table_label(),
                r.stages,
                r.mean(),
                r.per_type[0],
                r.per_type[1],
                r.per_type[2],
                per_seed.join(",")
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Validation(format!("ablation table: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some(ABLATION_SCHEMA) {
            return Err(bad("missing or unsupported schema line".into()));
        }
        if lines.next().map(|h| h.split('\t').collect::<Vec<_>>()) != Some(ABLATION_HEADER.to_vec()) {
            return Err(bad("unexpected header".into()));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("`{s}` is not a number")));
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != ABLATION_HEADER.len() {
                return Err(bad(format!("row has {} fields", f.len())));
            }
            let stages: StageSet = f[1].parse()?;
            if stages.table_label() != f[0] {
                return Err(bad(format!("label `{}` does not match stages `{}`", f[0], f[1])));
            }
            let mut seeds = Vec::new();
            let mut accuracies = Vec::new();
            for item in f[6].split(',') {
                let (s, a) = item.split_once(':').ok_or_else(|| bad(format!("bad per-seed entry `{item}`")))?;
                seeds.push(s.parse().map_err(|_| bad(format!("bad seed `{s}`")))?);
                accuracies.push(num(a)?);
            }
            let row = AblationRow { stages, seeds, accuracies, per_type: [num(f[3])?, num(f[4])?, num(f[5])?] };
            if row.mean() != num(f[2])? {
                return Err(bad(format!("mean of `{}` disagrees with its seeds", f[0])));
            }
            rows.push(row);
        }
        Ok(Self { rows })
    }
}

/// Train one model per stage set and seed under `root`, skipping runs that already
/// finished, and tabulate mean test accuracy.
pub fn run_ablation(
    base: &ExperimentConfig,
    stage_sets: &[StageSet],
    seeds: &[u64],
    splits: &Splits,
    pretrained: &ParamStore<f64>,
    root: &Path,
    echo: bool,
) -> Result<AblationTable> {
    if base.task != TaskKind::Vqa {
        return Err(config_err("the stage ablation runs on the vqa task"));
    }
    if seeds.is_empty() || stage_sets.is_empty() {
        return Err(config_err("the ablation needs at least one seed and one stage set"));
    }
    let mut rows = Vec::new();
    for &stages in stage_sets {
        let mut accuracies = Vec::new();
        let mut per_type = [0.0; 3];
        for &seed in seeds {
            let mut c = ablation_config(base, stages);
            c.seed = seed;
            let dir = root.join(run_name(&c));
            if echo {
                eprintln!("ablation: {} seed {seed} -> {}", stages.table_label(), dir.display());
            }
            let s = run_training(&c, splits, Some(pretrained), &dir, RunOptions { echo, resume: true })?;
            accuracies.push(s.test_accuracy);
            for t in AnswerType::ALL {
                per_type[t.index()] += s.test_per_type.get(t.label()).copied().unwrap_or(0.0) / seeds.len() as f64;
            }
        }
        rows.push(AblationRow { stages, seeds: seeds.to_vec(), accuracies, per_type });
    }
    let table = AblationTable { rows };
    fs::create_dir_all(root)?;
    fs::write(root.join(ABLATION_FILE), table.to_text())?;
    Ok(table)
}

/// Exported per-stage pooled features, one row per sampled example.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingMatrix {
    pub fn to_tsv(&self) -> String {
        let mut out = self.columns.join("\t");
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.iter().map(ToString::to_string).collect::<Vec<_>>().join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let columns: Vec<String> =
            lines.next().ok_or_else(|| Error::Validation("empty embedding file".into()))?.split('\t').map(String::from).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let row = line
                .split('\t')
                .map(|v| v.parse::<f64>().map_err(|_| Error::Validation(format!("row {}: `{v}` is not a number", i + 1))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != columns.len() {
                return Err(Error::Validation(format!("row {} has {} fields, header has {}", i + 1, row.len(), columns.len())));
            }
            rows.push(row);
        }
        Ok(Self { columns, rows })
    }

    /// Feature columns of one stage, row by row.
    pub fn stage(&self, stage: usize) -> Vec<Vec<f64>> {
        let prefix = format!("stage{stage}_");
        let idx: Vec<usize> = self.columns.iter().enumerate().filter(|(_, c)| c.starts_with(&prefix)).map(|(i, _)| i).collect();
        self.rows.iter().map(|r| idx.iter().map(|&i| r[i]).collect()).collect()
    }

    /// The trailing label column as class indices.
    pub fn labels(&self) -> Vec<usize> {
        self.rows.iter().map(|r| *r.last().expect("label column") as usize).collect()
    }
}

/// Spatially averaged output of every stage for `n` examples drawn from `data` with
/// `seed`, followed by the answer type (VQA) or target class (other tasks).
pub fn export_embeddings(model: &Model, store: &ParamStore<f64>, data: &Prepared<f64>, n: usize, seed: u64) -> Result<EmbeddingMatrix> {
    if n == 0 || n > data.len() {
        return Err(Error::Usage(format!("cannot export {n} rows from a split of {}", data.len())));
    }
    let backbone = model.backbone().ok_or_else(|| config_err("this model has no backbone to export"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EXPORT_STREAM);
    let mut picked: Vec<usize> = (0..data.len()).collect();
    picked.shuffle(&mut rng);
    picked.truncate(n);

    let mut columns = Vec::new();
    for (s, &c) in backbone.config.stage_channels.iter().enumerate() {
        columns.extend((0..c).map(|k| format!("stage{}_{k}", s + 1)));
    }
    columns.push(if data.kind == TaskKind::Vqa { "answer_type" } else { "target" }.to_string());

    let mut rows = Vec::with_capacity(n);
    for chunk in picked.chunks(64) {
        let batch = data.batch(chunk)?;
        let mut fwd = Forward::new(store, Mode::Infer);
        let out = model.forward(&mut fwd, &batch)?;
        let maps = out.features.ok_or_else(|| config_err("model returned no feature maps"))?;
        let mut pooled = Vec::new();
        for &s in &maps.stages {
            let p = fwd.graph.global_avg_pool(s)?;
            pooled.push(fwd.graph.value(p).to_f64_vec());
        }
        for (r, &i) in chunk.iter().enumerate() {
            let mut row = Vec::with_capacity(columns.len());
            for (p, &c) in pooled.iter().zip(&backbone.config.stage_channels) {
                row.extend_from_slice(&p[r * c..(r + 1) * c]);
            }
            let e = &data.examples[i];
            row.push(match (data.kind, e.answer_type) {
                (TaskKind::Vqa, Some(t)) => t.index() as f64,
                _ => e.target as f64,
            });
            rows.push(row);
        }
    }
    Ok(EmbeddingMatrix { columns, rows })
}

/// Standard location of a run inside an output root.
pub fn run_dir(root: &Path, config: &ExperimentConfig) -> PathBuf {
    root.join(run_name(config))
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cbn::backbone::{count_parameters, StageSet};
use cbn::checkpoint::Checkpoint;
use cbn::config::ExperimentConfig;
use cbn::data::{build_vocabulary, Prepared};
use cbn::experiment::{export_embeddings, generate_splits, load_pretrained, run_ablation, run_training, RunOptions};
use cbn::gradcheck::{run_suite, INSTANCES};
use cbn::models::build_variant;
use cbn::tasks::{read_dataset, write_dataset, DataConfig, Dataset, Split, Splits, TaskKind};
use cbn::{Error, Result};

/// Conditional batch normalization experiments on synthetic scenes.
#[derive(Parser)]
#[command(name = "cbn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set optim.lr=1e-3`. Repeatable; applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test containers and a readable sample dump.
    GenerateData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Records per split in the sample dump.
        #[arg(long, default_value_t = 5)]
        samples: usize,
    },
    /// Pretrain the backbone on the classification task.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Directory written by `generate-data`; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Reuse a finished run with the same config.
        #[arg(long)]
        resume: bool,
    },
    /// Train one variant on top of a pretrained backbone.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Pretraining checkpoint (`best.ckpt` of a pretrain run).
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train one model per modulated-stage set and seed, then print the table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pretrained: PathBuf,
        /// Comma-separated stage sets: `none`, `4`, `3-4`, `2-4`, `all`.
        #[arg(long, default_value = "none,4,3-4,2-4,all")]
        stages: String,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write spatially pooled stage features of sampled examples as a TSV matrix.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print parameter counts per component and the normalization share of the backbone.
    CountParams {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Vocabulary size used for the question encoder; derived from generated data when absent.
        #[arg(long)]
        vocab_size: Option<usize>,
    },
    /// Run the finite-difference suite and print the worst relative error per entry.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = INSTANCES)]
        instances: usize,
    },
}

fn load_config(args: &ConfigArgs, task: Option<TaskKind>) -> Result<ExperimentConfig> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load_with_task(path, task.unwrap_or(TaskKind::Vqa))?,
        None => ExperimentConfig::default_for(task.unwrap_or(TaskKind::Vqa)),
    };
    config.apply_overrides(&args.overrides)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(t) = task {
        if config.task != t {
            return Err(Error::Config(format!("this command needs task = {t}, the config says {}", config.task)));
        }
    }
    config.validate()?;
    Ok(config)
}

fn container_path(dir: &Path, task: TaskKind, split: Split) -> PathBuf {
    dir.join(format!("{task}-{split}.cbnd"))
}

fn load_splits(config: &ExperimentConfig, data: Option<&Path>) -> Result<Splits> {
    match data {
        Some(dir) => {
            let read = |s| read_dataset(&container_path(dir, config.task, s));
            Ok(Splits { train: read(Split::Train)?, val: read(Split::Val)?, test: read(Split::Test)? })
        }
        None => generate_splits(config),
    }
}

fn sample_dump(d: &Dataset, n: usize) -> String {
    let mut out = format!("## {} {} ({} records, {} scenes)\n", d.kind, d.split, d.len(), d.scenes.len());
    for r in d.records.iter().take(n) {
        let scene = &d.scenes[r.scene];
        let objects: Vec<String> = scene
            .objects
            .iter()
            .map(|o| {
                let b = &o.bbox;
                format!("{} {} {} [{},{},{},{}]", o.size, o.color, o.shape, b.x_min, b.y_min, b.x_max, b.y_max)
            })
            .collect();
        out.push_str(&format!("scene {}: {}\n", r.scene, objects.join("; ")));
        if let Some(t) = r.target {
            out.push_str(&format!("  target: object {t}\n"));
        }
        let kind = r.answer_type.map_or(String::new(), |t| format!(" ({})", t.label()));
        out.push_str(&format!("  [{}] {} -> {}{}\n", r.family, r.question, r.answer, kind));
    }
    out
}

fn print_summary(s: &cbn::experiment::RunSummary) {
    println!(
        "best epoch {} (val {:.4}), {} epochs{}; test accuracy {:.4}, loss {:.4}",
        s.best_epoch,
        s.best_val_accuracy,
        s.epochs_run,
        if s.stopped_early { ", stopped early" } else { "" },
        s.test_accuracy,
        s.test_loss
    );
    for (k, v) in &s.test_per_type {
        println!("  {k}: {v:.4}");
    }
}

fn checkpoint_data(ck: &Checkpoint<f64>, split: Split, data: Option<&Path>) -> Result<(cbn::models::Built<f64>, Prepared<f64>)> {
    let built = ck.restore()?;
    let splits = load_splits(&ck.config, data)?;
    let vocab = match &ck.vocab {
        Some(v) => v.clone(),
        None => build_vocabulary(&splits),
    };
    let prepared = Prepared::new(splits.get(split), &ck.config, &vocab)?;
    Ok((built, prepared))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateData { cfg, out, samples } => {
            let config = load_config(&cfg, None)?;
            let splits = generate_splits(&config)?;
            fs::create_dir_all(&out)?;
            let mut dump = String::new();
            for d in splits.iter() {
                let path = container_path(&out, config.task, d.split);
                write_dataset(d, &path)?;
                println!("{}: {} records, {} scenes", path.display(), d.len(), d.scenes.len());
                dump.push_str(&sample_dump(d, samples));
            }
            fs::write(out.join("samples.txt"), dump)?;
            Ok(true)
        }
        Command::Pretrain { cfg, out, data, resume } => {
            let config = load_config(&cfg, Some(TaskKind::Pretrain))?;
            let splits = load_splits(&config, data.as_deref())?;
            let s = run_training(&config, &splits, None, &out, RunOptions { echo: true, resume })?;
            print_summary(&s);
            Ok(true)
        }
        Command::Train { cfg, out, pretrained, data, resume } => {
            let config = load_config(&cfg, None)?;
            if config.task == TaskKind::Pretrain {
                return Err(Error::Usage("use the pretrain command for task = pretrain".into()));
            }
            let store = load_pretrained(&pretrained)?;
            let splits = load_splits(&config, data.as_deref())?;
            let s = run_training(&config, &splits, Some(&store), &out, RunOptions { echo: true, resume })?;
            print_summary(&s);
            Ok(true)
        }
        Command::Eval { checkpoint, split, data } => {
            let ck = Checkpoint::<f64>::load(&checkpoint)?;
            let (built, prepared) = checkpoint_data(&ck, split, data.as_deref())?;
            let e = cbn::train::evaluate(&built.model, &built.store, &prepared, ck.config.train.eval_batch_size)?;
            println!("{split}: accuracy {:.4}, loss {:.4}, {} examples", e.accuracy, e.loss, prepared.len());
            for (k, v) in &e.per_type {
                println!("  {k}: {v:.4}");
            }
            Ok(true)
        }
        Command::Ablate { cfg, out, pretrained, stages, seeds, data } => {
            let config = load_config(&cfg, Some(TaskKind::Vqa))?;
            let sets = stages.split(',').map(str::parse).collect::<Result<Vec<StageSet>>>()?;
            let seeds = seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>().map_err(|_| Error::Usage(format!("bad seed `{s}`"))))
                .collect::<Result<Vec<_>>>()?;
            let store = load_pretrained(&pretrained)?;
            let splits = load_splits(&config, data.as_deref())?;
            let table = run_ablation(&config, &sets, &seeds, &splits, &store, &out, true)?;
            print!("{}", table.to_text());
            Ok(true)
        }
        Command::ExportEmbeddings { checkpoint, out, n, split, seed, data } => {
            let ck = Checkpoint::<f64>::load(&checkpoint)?;
            let (built, prepared) = checkpoint_data(&ck, split, data.as_deref())?;
            let m = export_embeddings(&built.model, &built.store, &prepared, n, seed)?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&out, m.to_tsv())?;
            println!("{}: {} rows x {} columns", out.display(), m.rows.len(), m.columns.len());
            Ok(true)
        }
        Command::CountParams { cfg, vocab_size } => {
            let config = load_config(&cfg, None)?;
            let vocab_size = match vocab_size {
                Some(v) => v,
                None if config.task == TaskKind::Pretrain => cbn::language::RESERVED,
                None => {
                    let data = DataConfig { scenes: config.data.scenes.min(200), ..config.data.clone() };
                    build_vocabulary(&cbn::tasks::generate(config.task, &data, config.data_seed)?).len()
                }
            };
            let built = build_variant::<f64>(&config, vocab_size, None)?;
            let counts = count_parameters(&built.store);
            println!("variant {} on {} (vocabulary {vocab_size})", config.variant, config.task);
            for (component, n) in &counts.per_component {
                println!("  {component:<10} {n:>10}");
            }
            println!("  {:<10} {:>10}", "total", counts.total);
            println!("  {:<10} {:>10}", "trainable", counts.trainable);
            let bn = counts.per_component.get("bn").copied().unwrap_or(0);
            let backbone = bn + counts.per_component.get("conv").copied().unwrap_or(0);
            // bn / backbone < 1/100, compared in integers.
            let pass = 100 * bn < backbone;
            println!(
                "normalization share: {bn} / {backbone} backbone parameters = {:.4}% {}",
                100.0 * bn as f64 / backbone.max(1) as f64,
                if pass { "PASS (< 1%)" } else { "FAIL (>= 1%)" }
            );
            Ok(pass)
        }
        Command::Gradcheck { seed, instances } => {
            let report = run_suite(seed, instances)?;
            for e in &report.entries {
                let verdict = if e.max_rel_error <= report.tolerance { "ok" } else { "FAIL" };
                println!(
                    "{:<20} {:>3} instances ({:>2} redrawn)  max rel error {:.3e}  {verdict}",
                    e.name, e.instances, e.redrawn, e.max_rel_error
                );
            }
            println!(
                "gradcheck: {} ({} entries, worst {:.3e}, tolerance {:.0e})",
                if report.passed() { "PASS" } else { "FAIL" },
                report.entries.len(),
                report.worst(),
                report.tolerance
            );
            Ok(report.passed())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

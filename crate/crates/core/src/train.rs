//! Training loop, evaluation, early stopping, and the metrics trail.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::{Prepared, PreparedSplits};
use crate::error::{Error, Result};
use crate::models::{Built, Model};
use crate::optim::AdamState;
use crate::params::{commit_running_stats, Forward, Mode, ParamStore};
use crate::scalar::Scalar;
use crate::tasks::{AnswerType, Split, TaskKind};

pub const METRICS_SCHEMA_VERSION: u32 = 1;
const BATCH_ORDER_STREAM: u64 = 20;

/// One evaluation, serialized as one line of the metrics trail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    /// Accuracy per answer type, keyed by label; empty for tasks without answer types.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_type: BTreeMap<String, f64>,
    /// On the test record: the epoch whose parameters were evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("metrics records serialize")
    }

    pub fn from_line(line: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(line)?;
        if r.schema_version != METRICS_SCHEMA_VERSION {
            return Err(Error::Version { found: r.schema_version.into(), expected: METRICS_SCHEMA_VERSION.into() });
        }
        Ok(r)
    }
}

/// Wall-clock seconds for one evaluation, kept apart from the reproducible trail.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub epoch: usize,
    pub split: Split,
    pub seconds: f64,
}

/// Loss and accuracy over one split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub per_type: BTreeMap<String, f64>,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    fn record(&self, epoch: usize, split: Split) -> MetricsRecord {
        MetricsRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            epoch,
            split,
            loss: self.loss,
            accuracy: self.accuracy,
            per_type: self.per_type.clone(),
            best_epoch: None,
        }
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn per_type_accuracy(data: &Prepared<impl Scalar>, correct: &[bool]) -> BTreeMap<String, f64> {
    let mut hits = [0usize; 3];
    let mut totals = [0usize; 3];
    for (e, &c) in data.examples.iter().zip(correct) {
        if let Some(t) = e.answer_type {
            totals[t.index()] += 1;
            hits[t.index()] += c as usize;
        }
    }
    AnswerType::ALL
        .iter()
        .filter(|t| totals[t.index()] > 0)
        .map(|t| (t.label().to_string(), hits[t.index()] as f64 / totals[t.index()] as f64))
        .collect()
}

/// Evaluate in inference mode with running statistics.
pub fn evaluate<T: Scalar>(model: &Model, store: &ParamStore<T>, data: &Prepared<T>, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    let mut loss_sum = 0.0;
    let mut predictions = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let targets = data.targets(chunk);
        let mut fwd = Forward::new(store, Mode::Infer);
        let out = model.forward(&mut fwd, &batch)?;
        let loss = fwd.graph.cross_entropy(out.logits, &targets)?;
        loss_sum += fwd.graph.value(loss).item().as_f64() * chunk.len() as f64;
        let logits = fwd.graph.value(out.logits);
        let k = logits.shape()[1];
        predictions.extend(logits.data().chunks(k).map(argmax));
    }
    let correct: Vec<bool> = predictions.iter().zip(&data.examples).map(|(p, e)| *p == e.target).collect();
    let accuracy = correct.iter().filter(|&&c| c).count() as f64 / data.len() as f64;
    Ok(Evaluation { loss: loss_sum / data.len() as f64, accuracy, per_type: per_type_accuracy(data, &correct), predictions })
}

/// Mean loss of the first training batch, before any update.
pub fn first_batch_loss<T: Scalar>(built: &Built<T>, data: &Prepared<T>, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..batch_size.min(data.len())).collect();
    let mut fwd = Forward::new(&built.store, Mode::Train);
    let out = built.model.forward(&mut fwd, &data.batch(&idx)?)?;
    let loss = fwd.graph.cross_entropy(out.logits, &data.targets(&idx))?;
    Ok(fwd.graph.value(loss).item().as_f64())
}

/// Receives each metrics record as it is produced.
pub trait MetricsSink {
    fn record(&mut self, record: &MetricsRecord, timing: &Timing) -> Result<()>;
}

impl MetricsSink for Vec<MetricsRecord> {
    fn record(&mut self, record: &MetricsRecord, _: &Timing) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

/// Result of a finished training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    /// Parameters at the best validation epoch.
    pub best: ParamStore<T>,
    /// Parameters after the last epoch.
    pub latest: ParamStore<T>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub test: Evaluation,
}

/// Train `built` on `data.train`, early-stop on `data.val` accuracy, and evaluate the
/// best parameters on `data.test` once. Epoch 0 is the untrained model's validation score.
pub fn train<T: Scalar>(
    config: &ExperimentConfig,
    built: Built<T>,
    data: &PreparedSplits<T>,
    sink: &mut dyn MetricsSink,
) -> Result<TrainOutcome<T>> {
    let Built { mut store, model } = built;
    let tc = &config.train;
    let mut adam = AdamState::new();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(BATCH_ORDER_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let clock = Instant::now();
    let initial = evaluate(&model, &store, &data.val, tc.eval_batch_size)?;
    emit(sink, initial.record(0, Split::Val), clock)?;
    let mut best = store.clone();
    let (mut best_epoch, mut best_acc) = (0, initial.accuracy);
    let mut since_best = 0;
    let mut epochs_run = 0;

    for epoch in 1..=tc.epochs {
        let clock = Instant::now();
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for chunk in order.chunks(tc.batch_size.max(1)) {
            let batch = data.train.batch(chunk)?;
            let targets = data.train.targets(chunk);
            let mut fwd = Forward::new(&store, Mode::Train);
            let out = model.forward(&mut fwd, &batch)?;
            let loss = fwd.graph.cross_entropy(out.logits, &targets)?;
            let loss_value = fwd.graph.value(loss).item().as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
            }
            loss_sum += loss_value * chunk.len() as f64;
            let logits = fwd.graph.value(out.logits);
            let k = logits.shape()[1];
            hits += logits.data().chunks(k).map(argmax).zip(&targets).filter(|(p, t)| p == *t).count();
            let grads = fwd.backward(loss)?;
            let observed = fwd.into_observed();
            if !tc.freeze_running_stats {
                commit_running_stats(&mut store, &observed);
            }
            adam.step(&mut store, &grads, &tc.adam)?;
        }
        let n = data.train.len() as f64;
        let train_record = MetricsRecord {
            schema_version: METRICS_SCHEMA_VERSION,
            epoch,
            split: Split::Train,
            loss: loss_sum / n,
            accuracy: hits as f64 / n,
            per_type: BTreeMap::new(),
            best_epoch: None,
        };
        emit(sink, train_record, clock)?;

        let clock = Instant::now();
        let val = evaluate(&model, &store, &data.val, tc.eval_batch_size)?;
        emit(sink, val.record(epoch, Split::Val), clock)?;
        epochs_run = epoch;
        if val.accuracy > best_acc {
            best = store.clone();
            best_epoch = epoch;
            best_acc = val.accuracy;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                break;
            }
        }
    }

    let clock = Instant::now();
    let test = evaluate(&model, &best, &data.test, tc.eval_batch_size)?;
    let mut test_record = test.record(epochs_run, Split::Test);
    test_record.best_epoch = Some(best_epoch);
    emit(sink, test_record, clock)?;
    Ok(TrainOutcome {
        best,
        latest: store,
        best_epoch,
        best_val_accuracy: best_acc,
        epochs_run,
        stopped_early: epochs_run < tc.epochs,
        test,
    })
}

fn emit(sink: &mut dyn MetricsSink, record: MetricsRecord, clock: Instant) -> Result<()> {
    let timing = Timing { epoch: record.epoch, split: record.split, seconds: clock.elapsed().as_secs_f64() };
    sink.record(&record, &timing)
}

/// Reject a pretraining run whose test accuracy misses the configured threshold.
pub fn check_pretrain(config: &ExperimentConfig, outcome: &TrainOutcome<impl Scalar>) -> Result<()> {
    if config.task != TaskKind::Pretrain {
        return Ok(());
    }
    if outcome.test.accuracy < config.pretrain_threshold {
        return Err(Error::Training(format!(
            "pretraining reached {:.3} test accuracy, below the threshold {:.3}",
            outcome.test.accuracy, config.pretrain_threshold
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::data::build_vocabulary;
    use crate::models::build_variant;
    use crate::tasks::{generate, DataConfig};

    fn tiny_vqa() -> ExperimentConfig {
        let mut c = ExperimentConfig::default_for(TaskKind::Vqa);
        c.variant = Variant::Modern;
        c.data = DataConfig { image_size: 16, scenes: 30, questions_per_scene: 2, max_objects: 3 };
        c.backbone.stem_channels = 4;
        c.backbone.stage_channels = [4, 8, 16, 32];
        c.backbone.blocks_per_stage = [1, 1, 1, 1];
        c.backbone.stem_pool = false;
        c.language.embedding_width = 6;
        c.language.hidden = 8;
        c.modulation_hidden = 8;
        c.attention_hidden = 8;
        c.fusion_joint = 8;
        c.train.epochs = 3;
        c.train.batch_size = 8;
        c.train.adam.lr = 1e-2;
        c
    }

    fn run(c: &ExperimentConfig) -> (Vec<MetricsRecord>, TrainOutcome<f64>) {
        let splits = generate(c.task, &c.data, c.data_seed).unwrap();
        let data = PreparedSplits::new(&splits, c, build_vocabulary(&splits)).unwrap();
        let built = build_variant::<f64>(c, data.vocab.len(), None).unwrap();
        let mut trail = Vec::new();
        let outcome = train(c, built, &data, &mut trail).unwrap();
        (trail, outcome)
    }

    #[test]
    fn trail_is_deterministic_and_ordered() {
        let c = tiny_vqa();
        let (a, out) = run(&c);
        let (b, _) = run(&c);
        let lines = |t: &[MetricsRecord]| t.iter().map(MetricsRecord::to_line).collect::<Vec<_>>();
        assert_eq!(lines(&a), lines(&b));
        assert!(a.windows(2).all(|w| w[0].epoch <= w[1].epoch));
        assert_eq!(a.last().unwrap().split, Split::Test);
        assert_eq!(a.iter().filter(|r| r.split == Split::Test).count(), 1);
        assert_eq!(a.last().unwrap().best_epoch, Some(out.best_epoch));
        for r in &a {
            assert_eq!(&MetricsRecord::from_line(&r.to_line()).unwrap(), r);
        }
    }

    #[test]
    fn patience_stops_early_on_a_plateau() {
        let c = tiny_vqa();
        let splits = generate(c.task, &c.data, 0).unwrap();
        let data = PreparedSplits::new(&splits, &c, build_vocabulary(&splits)).unwrap();
        let built = build_variant::<f64>(&c, data.vocab.len(), None).unwrap();
        let mut still = c.clone();
        still.train.adam.lr = 0.0;
        still.train.epochs = 10;
        still.train.patience = 2;
        still.train.freeze_running_stats = true;
        let mut trail = Vec::new();
        let out = train(&still, built, &data, &mut trail).unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.epochs_run, 2);
        assert_eq!(out.best_epoch, 0);
        assert_eq!(trail.iter().filter(|r| r.split == Split::Val).count(), 3);
    }

    #[test]
    fn frozen_parameters_are_untouched() {
        let c = tiny_vqa();
        let splits = generate(c.task, &c.data, 0).unwrap();
        let data = PreparedSplits::new(&splits, &c, build_vocabulary(&splits)).unwrap();
        let built = build_variant::<f64>(&c, data.vocab.len(), None).unwrap();
        let before = built.store.clone();
        let out = train(&c, built, &data, &mut Vec::new()).unwrap();
        for (a, b) in before.iter().zip(out.latest.iter()) {
            if a.frozen {
                assert!(a.tensor.bit_eq(&b.tensor), "{}", a.name);
            }
            if a.name.starts_with("cbn.") {
                assert!(!a.tensor.bit_eq(&b.tensor), "{}", a.name);
            }
        }
    }
}

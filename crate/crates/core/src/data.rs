//! Model-ready examples and mini-batch assembly.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::language::{PaddedBatch, Vocabulary};
use crate::models::Batch;
use crate::scalar::Scalar;
use crate::tasks::{crop_and_rescale, spatial_vector, AnswerType, Dataset, Splits, TaskKind};
use crate::tensor::Tensor;

/// One record with its inputs resolved.
#[derive(Clone, Debug)]
pub struct Example {
    /// Index into [`Prepared::images`].
    pub image: usize,
    /// Question ids ending in EOS; empty for pretraining.
    pub tokens: Vec<usize>,
    pub spatial: [f64; 8],
    pub category: usize,
    pub target: usize,
    pub answer_type: Option<AnswerType>,
}

/// A dataset split converted to model inputs. Oracle examples each own their crop;
/// other tasks share one image per scene.
#[derive(Clone, Debug)]
pub struct Prepared<T> {
    pub kind: TaskKind,
    pub images: Vec<Tensor<T>>,
    pub examples: Vec<Example>,
}

impl<T: Scalar> Prepared<T> {
    pub fn new(dataset: &Dataset, config: &ExperimentConfig, vocab: &Vocabulary) -> Result<Self> {
        if dataset.kind != config.task {
            return Err(Error::Validation(format!("a {} dataset cannot feed a {} run", dataset.kind, config.task)));
        }
        if config.task != TaskKind::Oracle && dataset.image_size != config.data.image_size {
            return Err(Error::Validation(format!(
                "dataset images are {} pixels, config expects {}",
                dataset.image_size, config.data.image_size
            )));
        }
        let mut images = Vec::new();
        let mut examples = Vec::with_capacity(dataset.len());
        if config.task != TaskKind::Oracle {
            images = dataset.images.iter().map(Tensor::cast).collect();
        }
        for r in &dataset.records {
            let target = r.answer_index(dataset.kind)?;
            let tokens = if dataset.kind == TaskKind::Pretrain { Vec::new() } else { vocab.encode(&r.question) };
            let (image, spatial, category) = match (dataset.kind, r.target) {
                (TaskKind::Oracle, Some(t)) => {
                    let obj = dataset.scenes[r.scene]
                        .objects
                        .get(t)
                        .ok_or_else(|| Error::Validation(format!("record targets missing object {t}")))?;
                    let crop = crop_and_rescale(dataset.image_of(r), &obj.bbox, config.oracle.crop_size, config.oracle.margin)?;
                    images.push(crop.cast());
                    (images.len() - 1, spatial_vector(&obj.bbox, dataset.image_size)?, obj.shape.index())
                }
                (TaskKind::Oracle, None) => return Err(Error::Validation("oracle record without a target".into())),
                _ => (r.scene, [0.0; 8], 0),
            };
            examples.push(Example { image, tokens, spatial, category, target, answer_type: r.answer_type });
        }
        Ok(Self { kind: dataset.kind, images, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Assemble the examples at `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch<T>> {
        let picked: Vec<&Example> = indices.iter().map(|&i| &self.examples[i]).collect();
        let images = Tensor::stack(&picked.iter().map(|e| self.images[e.image].clone()).collect::<Vec<_>>())?;
        let questions = if self.kind == TaskKind::Pretrain {
            None
        } else {
            Some(PaddedBatch::new(&picked.iter().map(|e| e.tokens.clone()).collect::<Vec<_>>())?)
        };
        let (spatial, categories) = if self.kind == TaskKind::Oracle {
            let flat: Vec<f64> = picked.iter().flat_map(|e| e.spatial).collect();
            (Some(Tensor::from_f64(&[picked.len(), 8], &flat)?), picked.iter().map(|e| e.category).collect())
        } else {
            (None, Vec::new())
        };
        Ok(Batch { images, questions, spatial, categories })
    }

    pub fn targets(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.examples[i].target).collect()
    }
}

/// Vocabulary built from the training questions.
pub fn build_vocabulary(splits: &Splits) -> Vocabulary {
    Vocabulary::from_corpus(splits.train.records.iter().map(|r| r.question.as_str()))
}

/// All three splits prepared with one vocabulary.
#[derive(Clone, Debug)]
pub struct PreparedSplits<T> {
    pub vocab: Vocabulary,
    pub train: Prepared<T>,
    pub val: Prepared<T>,
    pub test: Prepared<T>,
}

impl<T: Scalar> PreparedSplits<T> {
    pub fn new(splits: &Splits, config: &ExperimentConfig, vocab: Vocabulary) -> Result<Self> {
        Ok(Self {
            train: Prepared::new(&splits.train, config, &vocab)?,
            val: Prepared::new(&splits.val, config, &vocab)?,
            test: Prepared::new(&splits.test, config, &vocab)?,
            vocab,
        })
    }
}

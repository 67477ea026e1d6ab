//! Procedurally generated stand-ins for visual question answering, the guessing-game
//! oracle, and backbone pretraining.

mod checker;
mod container;
pub mod geometry;
mod generate;
pub mod scene;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::tensor::Tensor;

pub use checker::{check_oracle, check_vqa};
pub use container::{read_dataset, write_dataset, FORMAT_VERSION, MAGIC};
pub use generate::{generate, generate_oracle_dataset, generate_pretrain_dataset, generate_vqa_dataset};
pub use geometry::{crop_and_rescale, spatial_vector, DEFAULT_MARGIN};
pub use scene::{render, BBox, Color, Scene, SceneObject, Shape, SizeClass};

/// Answers of the synthetic VQA task, in logit order.
pub const VQA_ANSWERS: [&str; 15] = [
    "yes", "no", "0", "1", "2", "3", "4", "red", "green", "blue", "yellow", "circle", "square", "triangle", "cross",
];

/// Answers of the oracle task, in logit order.
pub const ORACLE_ANSWERS: [&str; 3] = ["yes", "no", "n/a"];

/// Pretraining classes: dominant-object shape × warm/cool colour.
pub const PRETRAIN_CLASSES: [&str; 8] = [
    "circle_warm",
    "circle_cool",
    "square_warm",
    "square_cool",
    "triangle_warm",
    "triangle_cool",
    "cross_warm",
    "cross_cool",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Vqa,
    Oracle,
    Pretrain,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Vqa, TaskKind::Oracle, TaskKind::Pretrain];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Vqa => "vqa",
            TaskKind::Oracle => "oracle",
            TaskKind::Pretrain => "pretrain",
        }
    }

    pub fn code(self) -> u64 {
        match self {
            TaskKind::Vqa => 0,
            TaskKind::Oracle => 1,
            TaskKind::Pretrain => 2,
        }
    }

    pub fn answers(self) -> &'static [&'static str] {
        match self {
            TaskKind::Vqa => &VQA_ANSWERS,
            TaskKind::Oracle => &ORACLE_ANSWERS,
            TaskKind::Pretrain => &PRETRAIN_CLASSES,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

macro_rules! coded_enum {
    ($t:ty) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $t {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL.iter().copied().find(|x| x.name() == s).ok_or_else(|| config_err(format!("unknown value `{s}`")))
            }
        }

        impl $t {
            pub fn from_code(code: u64) -> Option<Self> {
                Self::ALL.iter().copied().find(|x| x.code() == code)
            }
        }
    };
}

coded_enum!(TaskKind);
coded_enum!(Split);

/// The three answer-type columns of VQA evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerType {
    YesNo,
    Number,
    Other,
}

impl AnswerType {
    pub const ALL: [AnswerType; 3] = [AnswerType::YesNo, AnswerType::Number, AnswerType::Other];

    pub fn label(self) -> &'static str {
        match self {
            AnswerType::YesNo => "yes/no",
            AnswerType::Number => "number",
            AnswerType::Other => "other",
        }
    }

    pub fn index(self) -> usize {
        match self {
            AnswerType::YesNo => 0,
            AnswerType::Number => 1,
            AnswerType::Other => 2,
        }
    }

    pub fn of_answer(answer: &str) -> AnswerType {
        match answer {
            "yes" | "no" => AnswerType::YesNo,
            a if a.parse::<u32>().is_ok() => AnswerType::Number,
            _ => AnswerType::Other,
        }
    }
}

/// One question (or classification target) about one scene.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    /// Index into [`Dataset::scenes`].
    pub scene: usize,
    /// Template family, e.g. `exist`, `count`, `color`, `left_of`, `classify`.
    pub family: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_type: Option<AnswerType>,
    /// Oracle target object index within the scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
}

impl Record {
    /// Logit index of the answer for `kind`.
    pub fn answer_index(&self, kind: TaskKind) -> Result<usize> {
        kind.answers()
            .iter()
            .position(|a| *a == self.answer)
            .ok_or_else(|| Error::Validation(format!("answer `{}` is not in the {kind} answer set", self.answer)))
    }
}

/// One split of a generated dataset: scene metadata, rendered images, and records.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub kind: TaskKind,
    pub split: Split,
    pub seed: u64,
    pub image_size: usize,
    pub scenes: Vec<Scene>,
    /// One `[3, S, S]` image per scene.
    pub images: Vec<Tensor<f64>>,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_of(&self, record: &Record) -> &Tensor<f64> {
        &self.images[record.scene]
    }

    /// Records per answer type.
    pub fn answer_type_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for r in &self.records {
            if let Some(t) = r.answer_type {
                counts[t.index()] += 1;
            }
        }
        counts
    }
}

/// All three splits of one generated task.
#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Dataset> {
        [&self.train, &self.val, &self.test].into_iter()
    }
}

/// Sizes of a generated task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub image_size: usize,
    pub scenes: usize,
    pub questions_per_scene: usize,
    pub max_objects: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { image_size: 64, scenes: 3000, questions_per_scene: 3, max_objects: 4 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.questions_per_scene == 0 {
            return Err(config_err("data generation needs at least one scene and one question per scene"));
        }
        if !(1..=4).contains(&self.max_objects) {
            return Err(config_err("max_objects must be between 1 and 4"));
        }
        if self.image_size < 16 {
            return Err(config_err("image_size must be at least 16"));
        }
        Ok(())
    }
}

//! Flat `key = value` experiment configuration with a typed schema.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::{BackboneConfig, StageSet, STAGES};
use crate::error::{config_err, Error, Result};
use crate::language::LanguageConfig;
use crate::norm::PredictorLayout;
use crate::optim::AdamConfig;
use crate::tasks::{DataConfig, TaskKind, DEFAULT_MARGIN};

/// Model families compared in the experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Frozen backbone; heads and language encoder train.
    Raw,
    /// As `Raw`, with the last stage's convolutions and normalization also trainable.
    FtStage4,
    /// As `Raw`, with every backbone γ and β trainable.
    FtBn,
    /// Frozen backbone with question-conditioned normalization.
    Modern,
    /// `Modern` with MLB glimpse attention instead of concatenation attention.
    ModernMlb,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Raw, Variant::FtStage4, Variant::FtBn, Variant::Modern, Variant::ModernMlb];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Raw => "raw",
            Variant::FtStage4 => "ft_stage4",
            Variant::FtBn => "ft_bn",
            Variant::Modern => "modern",
            Variant::ModernMlb => "modern_mlb",
        }
    }

    pub fn is_modern(self) -> bool {
        matches!(self, Variant::Modern | Variant::ModernMlb)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.iter().copied().find(|v| v.name() == s).ok_or_else(|| config_err(format!("unknown variant `{s}`")))
    }
}

/// Which inputs the oracle head concatenates besides the question embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OracleInputs {
    pub crop: bool,
    pub spatial: bool,
    pub category: bool,
}

impl Default for OracleInputs {
    fn default() -> Self {
        Self { crop: true, spatial: true, category: true }
    }
}

impl fmt::Display for OracleInputs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [(self.crop, "crop"), (self.spatial, "spatial"), (self.category, "category")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

impl FromStr for OracleInputs {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = OracleInputs { crop: false, spatial: false, category: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
            match part {
                "crop" => out.crop = true,
                "spatial" => out.spatial = true,
                "category" => out.category = true,
                _ => return Err(config_err(format!("unknown oracle input `{part}`"))),
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleConfig {
    pub inputs: OracleInputs,
    pub category_width: usize,
    pub hidden: usize,
    pub crop_size: usize,
    pub margin: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { inputs: OracleInputs::default(), category_width: 16, hidden: 64, crop_size: 32, margin: DEFAULT_MARGIN }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Keep the pretrained running statistics fixed during fine-tuning.
    pub freeze_running_stats: bool,
}

/// Every hyperparameter of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub variant: Variant,
    pub seed: u64,
    pub data_seed: u64,
    pub data: DataConfig,
    /// `input_size` and `modulated_stages` are derived; see [`ExperimentConfig::backbone_config`].
    pub backbone: BackboneConfig,
    /// `None` selects the variant's default: all stages for modern variants, none otherwise.
    pub modulated_stages: Option<StageSet>,
    pub modulation_hidden: usize,
    pub modulation_layout: PredictorLayout,
    pub language: LanguageConfig,
    pub attention_hidden: usize,
    pub glimpses: usize,
    pub fusion_joint: usize,
    pub oracle: OracleConfig,
    pub train: TrainConfig,
    /// Minimum held-out accuracy a pretraining run must reach.
    pub pretrain_threshold: f64,
}

/// Learning rate, Adam epsilon, clip value, epochs, scenes, and questions per scene
/// for `task`.
///
/// The fine-tuning tasks use a large epsilon. Predictor gradients are tiny and noisy
/// at the start of training, and with `1e-8` Adam scales them up to full
/// learning-rate steps that swamp the visual features.
fn task_defaults(task: TaskKind) -> (f64, f64, f64, usize, usize, usize) {
    match task {
        TaskKind::Vqa => (2e-4, 1e-4, 5.0, 20, 3000, 3),
        TaskKind::Oracle => (1e-4, 1e-4, 3.0, 10, 3000, 3),
        TaskKind::Pretrain => (1e-3, 1e-8, 5.0, 15, 4000, 1),
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::default_for(TaskKind::Vqa)
    }
}

impl ExperimentConfig {
    /// Defaults with the optimizer and data sizes of `task`.
    pub fn default_for(task: TaskKind) -> Self {
        let (lr, eps, clip, epochs, scenes, questions) = task_defaults(task);
        Self {
            task,
            variant: Variant::Raw,
            seed: 0,
            data_seed: 0,
            data: DataConfig { image_size: 64, scenes, questions_per_scene: questions, max_objects: 4 },
            backbone: BackboneConfig::default(),
            modulated_stages: None,
            modulation_hidden: 64,
            modulation_layout: PredictorLayout::Shared,
            language: LanguageConfig::default(),
            attention_hidden: 64,
            glimpses: 2,
            fusion_joint: 64,
            oracle: OracleConfig::default(),
            train: TrainConfig {
                adam: AdamConfig { lr, eps, clip, ..AdamConfig::default() },
                epochs,
                batch_size: 32,
                eval_batch_size: 64,
                patience: 5,
                freeze_running_stats: false,
            },
            pretrain_threshold: 0.9,
        }
    }

    /// Switch to `task`, replacing only the task-dependent defaults: learning rate,
    /// Adam epsilon, clip value, epochs, scene count, and questions per scene.
    pub fn switch_task(&mut self, task: TaskKind) {
        let (lr, eps, clip, epochs, scenes, questions) = task_defaults(task);
        self.task = task;
        self.train.adam.lr = lr;
        self.train.adam.eps = eps;
        self.train.adam.clip = clip;
        self.train.epochs = epochs;
        self.data.scenes = scenes;
        self.data.questions_per_scene = questions;
    }

    /// Stage set actually modulated; rejects explicit stages on non-modern variants.
    pub fn effective_stages(&self) -> Result<StageSet> {
        match (self.variant.is_modern(), self.modulated_stages) {
            (true, stages) => Ok(stages.unwrap_or(StageSet::ALL)),
            (false, None) => Ok(StageSet::NONE),
            (false, Some(s)) if s.is_empty() => Ok(StageSet::NONE),
            (false, Some(s)) => Err(config_err(format!(
                "variant {} cannot modulate stages `{s}`; use modern or modern_mlb",
                self.variant
            ))),
        }
    }

    /// Input width of the backbone for this task.
    pub fn backbone_input_size(&self) -> usize {
        match self.task {
            TaskKind::Oracle => self.oracle.crop_size,
            _ => self.data.image_size,
        }
    }

    /// Backbone configuration with input size and modulation filled in.
    pub fn backbone_config(&self) -> Result<BackboneConfig> {
        let mut b = self.backbone.clone();
        b.input_size = self.backbone_input_size();
        b.modulated_stages = self.effective_stages()?;
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.language.validate()?;
        self.backbone_config()?;
        if self.variant == Variant::ModernMlb && self.task != TaskKind::Vqa {
            return Err(config_err("modern_mlb applies to the vqa task only"));
        }
        if self.task == TaskKind::Pretrain && self.variant != Variant::Raw {
            return Err(config_err("pretraining trains the whole backbone; leave variant = raw"));
        }
        if self.task == TaskKind::Oracle && self.variant.is_modern() && !self.oracle.inputs.crop {
            return Err(config_err("a modern oracle needs the crop input"));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.eval_batch_size == 0 {
            return Err(config_err("epochs and batch sizes must be positive"));
        }
        if !(t.adam.lr > 0.0) || !(0.0..1.0).contains(&t.adam.beta1) || !(0.0..1.0).contains(&t.adam.beta2) {
            return Err(config_err("optimizer settings out of range"));
        }
        if self.glimpses == 0 || self.attention_hidden == 0 || self.fusion_joint == 0 || self.modulation_hidden == 0 {
            return Err(config_err("head widths must be positive"));
        }
        if self.oracle.crop_size < 8 || self.oracle.margin < 1.0 {
            return Err(config_err("oracle crop must be at least 8 pixels with margin ≥ 1"));
        }
        Ok(())
    }

    /// Parse a config file body. `task` is read first so that task defaults apply
    /// before the remaining keys.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_task(text, TaskKind::Vqa)
    }

    /// Parse with `task` assumed when the text has no `task` key.
    pub fn parse_with_task(text: &str, task: TaskKind) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::MalformedConfig { line: i + 1, msg: format!("expected `key = value`, got `{line}`") })?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(Error::MalformedConfig { line: i + 1, msg: "empty key".into() });
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        Self::from_pairs_with_task(&pairs, task)
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        Self::from_pairs_with_task(pairs, TaskKind::Vqa)
    }

    fn from_pairs_with_task(pairs: &[(String, String)], task: TaskKind) -> Result<Self> {
        let task = match pairs.iter().rev().find(|(k, _)| k == "task") {
            Some((_, v)) => v.parse()?,
            None => task,
        };
        let mut cfg = Self::default_for(task);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_task(path, TaskKind::Vqa)
    }

    pub fn load_with_task(path: &Path, task: TaskKind) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.display().to_string()),
            _ => Error::Io(e),
        })?;
        Self::parse_with_task(&text, task)
    }

    /// Apply `key=value` overrides. A `task` override is applied first through
    /// [`ExperimentConfig::switch_task`]; the remaining overrides follow in order.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let mut pairs = Vec::with_capacity(overrides.len());
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::MalformedConfig { line: 0, msg: format!("override `{o}` is not key=value") })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        if let Some((_, v)) = pairs.iter().rev().find(|(k, _)| k == "task") {
            let task: TaskKind = v.parse()?;
            if task != self.task {
                self.switch_task(task);
            }
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "task") {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| config_err(format!("`{key}`: cannot parse `{v}`")))
        }
        fn b(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "yes" | "1" => Ok(true),
                "false" | "no" | "0" => Ok(false),
                _ => Err(config_err(format!("`{key}`: expected true or false, got `{v}`"))),
            }
        }
        fn list(key: &str, v: &str) -> Result<[usize; STAGES]> {
            let parts: Vec<usize> = v.split(',').map(|x| p(key, x.trim())).collect::<Result<_>>()?;
            parts.try_into().map_err(|_| config_err(format!("`{key}`: expected {STAGES} comma-separated integers")))
        }
        let v = value;
        match key {
            "task" => {
                let t: TaskKind = v.parse()?;
                if t != self.task {
                    return Err(config_err("`task` must be set before other keys"));
                }
            }
            "variant" => self.variant = v.parse()?,
            "seed" => self.seed = p(key, v)?,
            "data.seed" => self.data_seed = p(key, v)?,
            "data.image_size" => self.data.image_size = p(key, v)?,
            "data.scenes" => self.data.scenes = p(key, v)?,
            "data.questions_per_scene" => self.data.questions_per_scene = p(key, v)?,
            "data.max_objects" => self.data.max_objects = p(key, v)?,
            "backbone.stem_channels" => self.backbone.stem_channels = p(key, v)?,
            "backbone.stem_stride" => self.backbone.stem_stride = p(key, v)?,
            "backbone.stem_pool" => self.backbone.stem_pool = b(key, v)?,
            "backbone.stage_channels" => self.backbone.stage_channels = list(key, v)?,
            "backbone.blocks_per_stage" => self.backbone.blocks_per_stage = list(key, v)?,
            "backbone.bottleneck_divisor" => self.backbone.bottleneck_divisor = p(key, v)?,
            "backbone.eps" => self.backbone.eps = p(key, v)?,
            "backbone.momentum" => self.backbone.momentum = p(key, v)?,
            "backbone.modulate_shortcut" => self.backbone.modulate_shortcut = b(key, v)?,
            "modulation.stages" => {
                self.modulated_stages = if v == "default" { None } else { Some(v.parse()?) };
            }
            "modulation.hidden" => self.modulation_hidden = p(key, v)?,
            "modulation.layout" => {
                self.modulation_layout = match v {
                    "shared" => PredictorLayout::Shared,
                    "separate" => PredictorLayout::Separate,
                    _ => return Err(config_err(format!("`{key}`: expected shared or separate, got `{v}`"))),
                }
            }
            "language.embedding_width" => self.language.embedding_width = p(key, v)?,
            "language.hidden" => self.language.hidden = p(key, v)?,
            "language.layers" => self.language.layers = p(key, v)?,
            "language.frozen_table" => self.language.frozen_table = b(key, v)?,
            "attention.hidden" => self.attention_hidden = p(key, v)?,
            "attention.glimpses" => self.glimpses = p(key, v)?,
            "fusion.joint" => self.fusion_joint = p(key, v)?,
            "oracle.inputs" => self.oracle.inputs = v.parse()?,
            "oracle.category_width" => self.oracle.category_width = p(key, v)?,
            "oracle.hidden" => self.oracle.hidden = p(key, v)?,
            "oracle.crop_size" => self.oracle.crop_size = p(key, v)?,
            "oracle.margin" => self.oracle.margin = p(key, v)?,
            "optim.lr" => self.train.adam.lr = p(key, v)?,
            "optim.clip" => self.train.adam.clip = p(key, v)?,
            "optim.beta1" => self.train.adam.beta1 = p(key, v)?,
            "optim.beta2" => self.train.adam.beta2 = p(key, v)?,
            "optim.eps" => self.train.adam.eps = p(key, v)?,
            "optim.epochs" => self.train.epochs = p(key, v)?,
            "optim.batch_size" => self.train.batch_size = p(key, v)?,
            "optim.patience" => self.train.patience = p(key, v)?,
            "train.eval_batch_size" => self.train.eval_batch_size = p(key, v)?,
            "train.freeze_running_stats" => self.train.freeze_running_stats = b(key, v)?,
            "pretrain.threshold" => self.pretrain_threshold = p(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key with its current value and a comment, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String, &'static str)> {
        let list = |a: &[usize; STAGES]| a.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let b = &self.backbone;
        let t = &self.train;
        vec![
            ("task", self.task.to_string(), "vqa | oracle | pretrain"),
            ("variant", self.variant.to_string(), "raw | ft_stage4 | ft_bn | modern | modern_mlb"),
            ("seed", self.seed.to_string(), "initialization and batch order"),
            ("data.seed", self.data_seed.to_string(), "dataset generation"),
            ("data.image_size", self.data.image_size.to_string(), "square image side in pixels; reference scale 224"),
            ("data.scenes", self.data.scenes.to_string(), "scenes before the 70/15/15 split"),
            ("data.questions_per_scene", self.data.questions_per_scene.to_string(), ""),
            ("data.max_objects", self.data.max_objects.to_string(), "1..=4"),
            ("backbone.stem_channels", b.stem_channels.to_string(), "reference scale: ResNet-50 stem of 64"),
            ("backbone.stem_stride", b.stem_stride.to_string(), ""),
            ("backbone.stem_pool", b.stem_pool.to_string(), "2x2 average pool after the stem"),
            ("backbone.stage_channels", list(&b.stage_channels), "reference scale: 256,512,1024,2048"),
            ("backbone.blocks_per_stage", list(&b.blocks_per_stage), "reference scale: 3,4,6,3"),
            ("backbone.bottleneck_divisor", b.bottleneck_divisor.to_string(), "reference scale: 4"),
            ("backbone.eps", b.eps.to_string(), "normalization epsilon"),
            ("backbone.momentum", b.momentum.to_string(), "running-statistics momentum"),
            ("backbone.modulate_shortcut", b.modulate_shortcut.to_string(), "also modulate the projection shortcut"),
            (
                "modulation.stages",
                self.modulated_stages.map_or("default".to_string(), |s| s.to_string()),
                "none | all | 4 | 3-4 | 2-4 | default (all for modern variants, none otherwise)",
            ),
            ("modulation.hidden", self.modulation_hidden.to_string(), "hidden width of each delta predictor"),
            ("modulation.layout", match self.modulation_layout {
                PredictorLayout::Shared => "shared".to_string(),
                PredictorLayout::Separate => "separate".to_string(),
            }, "shared | separate hidden layer for the two deltas"),
            ("language.embedding_width", self.language.embedding_width.to_string(), "reference scale: 300"),
            ("language.hidden", self.language.hidden.to_string(), "reference scale: 1024"),
            ("language.layers", self.language.layers.to_string(), "stacked cells; reference scale: 2"),
            ("language.frozen_table", self.language.frozen_table.to_string(), "concatenate a frozen random width-30 table"),
            ("attention.hidden", self.attention_hidden.to_string(), "reference scale: 512"),
            ("attention.glimpses", self.glimpses.to_string(), "MLB glimpses"),
            ("fusion.joint", self.fusion_joint.to_string(), "common width of the fused projections"),
            ("oracle.inputs", self.oracle.inputs.to_string(), "comma list of crop, spatial, category"),
            ("oracle.category_width", self.oracle.category_width.to_string(), "category embedding width"),
            ("oracle.hidden", self.oracle.hidden.to_string(), "oracle MLP hidden width"),
            ("oracle.crop_size", self.oracle.crop_size.to_string(), "crop side after rescaling"),
            ("oracle.margin", self.oracle.margin.to_string(), "box enlargement before cropping; reference 1.1"),
            ("optim.lr", t.adam.lr.to_string(), "reference: 2e-4 for VQA, 1e-4 for the oracle"),
            ("optim.clip", t.adam.clip.to_string(), "global-norm clip; reference: 5 for VQA, 3 for the oracle"),
            ("optim.beta1", t.adam.beta1.to_string(), ""),
            ("optim.beta2", t.adam.beta2.to_string(), ""),
            ("optim.eps", t.adam.eps.to_string(), "Adam epsilon; 1e-8 for pretraining"),
            ("optim.epochs", t.epochs.to_string(), ""),
            ("optim.batch_size", t.batch_size.to_string(), "reference: 32"),
            ("optim.patience", t.patience.to_string(), "early-stopping patience in epochs"),
            ("train.eval_batch_size", t.eval_batch_size.to_string(), ""),
            ("train.freeze_running_stats", t.freeze_running_stats.to_string(), ""),
            ("pretrain.threshold", self.pretrain_threshold.to_string(), "required held-out pretraining accuracy"),
        ]
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries().into_iter().find(|(k, _, _)| *k == key).map(|(_, v, _)| v)
    }

    /// Full config file text; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v, c) in self.entries() {
            if !c.is_empty() {
                out.push_str(&format!("# {c}\n"));
            }
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = ExperimentConfig::default_for(TaskKind::Oracle);
        cfg.variant = Variant::Modern;
        cfg.modulated_stages = Some("3-4".parse().unwrap());
        cfg.oracle.inputs = "spatial,category".parse().unwrap();
        cfg.train.adam.lr = 3.5e-4;
        cfg.backbone.stage_channels = [8, 16, 32, 64];
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn task_defaults() {
        let o = ExperimentConfig::parse("task = oracle\n").unwrap();
        assert_eq!((o.train.adam.lr, o.train.adam.clip, o.train.epochs), (1e-4, 3.0, 10));
        let v = ExperimentConfig::parse("").unwrap();
        assert_eq!((v.train.adam.lr, v.train.adam.clip, v.train.epochs), (2e-4, 5.0, 20));
        assert_eq!(v.train.batch_size, 32);
        assert_eq!(v.train.adam.eps, 1e-4);
        let p = ExperimentConfig::parse("task = pretrain\n").unwrap();
        assert_eq!(p.train.adam.eps, 1e-8);
    }

    #[test]
    fn errors_are_distinct() {
        assert!(matches!(ExperimentConfig::parse("nope = 1"), Err(Error::UnknownKey(_))));
        assert!(matches!(ExperimentConfig::parse("# c\nseed 3"), Err(Error::MalformedConfig { line: 2, .. })));
        assert!(matches!(ExperimentConfig::parse("seed = x"), Err(Error::Config(_))));
    }

    #[test]
    fn stage_consistency() {
        let mut c = ExperimentConfig::default();
        assert_eq!(c.effective_stages().unwrap(), StageSet::NONE);
        c.modulated_stages = Some(StageSet::ALL);
        assert!(c.validate().is_err());
        c.variant = Variant::Modern;
        c.validate().unwrap();
        c.modulated_stages = None;
        assert_eq!(c.effective_stages().unwrap(), StageSet::ALL);
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut c = ExperimentConfig::default();
        c.apply_overrides(&["variant=modern".into(), "modulation.stages=4".into(), "task=oracle".into()]).unwrap();
        assert_eq!(c.task, TaskKind::Oracle);
        assert_eq!(c.variant, Variant::Modern);
        assert_eq!(c.train.adam.lr, 1e-4);
        assert_eq!(c.modulated_stages, Some(StageSet::from_stages(&[4]).unwrap()));
        assert!(c.apply_overrides(&["oops".into()]).is_err());

        let mut c = ExperimentConfig::default();
        c.apply_overrides(&["backbone.stem_channels=8".into(), "task=pretrain".into()]).unwrap();
        assert_eq!(c.backbone.stem_channels, 8);
        assert_eq!(c.train.adam.lr, ExperimentConfig::default_for(TaskKind::Pretrain).train.adam.lr);
    }
}

//! Task models and the construction of each experimental variant.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{is_backbone_norm_param, Backbone, BackboneConfig, FeatureMaps, ModulationSpec, StageSet};
use crate::config::{ExperimentConfig, Variant};
use crate::error::{config_err, Error, Result};
use crate::fusion::{oracle_head, Attention, AttentionKind, AttentionOutput, FusionHead, Mlp};
use crate::language::{PaddedBatch, QuestionEncoder, FROZEN_TABLE_NAME};
use crate::params::{Forward, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tasks::{Shape, TaskKind};
use crate::tensor::{Tensor, Var};

/// Seed streams for the independently initialized components.
const BACKBONE_STREAM: u64 = 10;
const LANGUAGE_STREAM: u64 = 11;
const HEAD_STREAM: u64 = 12;

fn component_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One mini-batch in model-ready form.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[N, 3, S, S]` scene images, or target crops for the oracle.
    pub images: Tensor<T>,
    pub questions: Option<PaddedBatch>,
    /// `[N, 8]` spatial vectors (oracle only).
    pub spatial: Option<Tensor<T>>,
    /// Target categories (oracle only).
    pub categories: Vec<usize>,
}

/// Logits plus the intermediate values the exports and tests inspect.
#[derive(Clone, Debug)]
pub struct Output {
    pub logits: Var,
    pub features: Option<FeatureMaps>,
    pub e_q: Option<Var>,
    pub attention: Option<AttentionOutput>,
}

/// Frozen backbone, question encoder, attention, and the element-wise fusion head.
#[derive(Clone, Debug)]
pub struct VqaModel {
    pub backbone: Backbone,
    pub encoder: QuestionEncoder,
    pub attention: Attention,
    pub fusion: FusionHead,
}

/// Oracle: question embedding plus optional crop features, spatial vector, and
/// category embedding, concatenated into an MLP.
#[derive(Clone, Debug)]
pub struct OracleModel {
    pub backbone: Option<Backbone>,
    pub encoder: QuestionEncoder,
    pub category: Option<ParamId>,
    pub spatial: bool,
    pub head: Mlp,
}

/// Backbone plus a linear classifier over globally pooled last-stage features.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub backbone: Backbone,
    pub head: Linear,
}

#[derive(Clone, Debug)]
pub enum Model {
    Vqa(VqaModel),
    Oracle(OracleModel),
    Pretrain(PretrainModel),
}

fn zero_linear<T: Scalar>(store: &mut ParamStore<T>, l: &Linear) {
    let w = store.get_mut(l.weight);
    w.tensor = Tensor::zeros(w.tensor.shape());
    if let Some(b) = l.bias {
        let p = store.get_mut(b);
        p.tensor = Tensor::zeros(p.tensor.shape());
    }
}

impl Model {
    pub fn backbone(&self) -> Option<&Backbone> {
        match self {
            Model::Vqa(m) => Some(&m.backbone),
            Model::Oracle(m) => m.backbone.as_ref(),
            Model::Pretrain(m) => Some(&m.backbone),
        }
    }

    pub fn answer_count(&self) -> usize {
        match self {
            Model::Vqa(m) => m.fusion.answer_count(),
            Model::Oracle(m) => m.head.out.outputs,
            Model::Pretrain(m) => m.head.outputs,
        }
    }

    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, batch: &Batch<T>) -> Result<Output> {
        let questions = || batch.questions.as_ref().ok_or_else(|| config_err("this model needs questions"));
        match self {
            Model::Vqa(m) => {
                let e_q = m.encoder.encode(fwd, questions()?)?;
                let image = fwd.graph.constant(batch.images.clone());
                let cond = m.backbone.is_modulated().then_some(e_q);
                let features = m.backbone.forward(fwd, image, cond)?;
                let attention = m.attention.forward(fwd, features.last(), e_q)?;
                let logits = m.fusion.forward(fwd, e_q, attention.e_v)?;
                Ok(Output { logits, features: Some(features), e_q: Some(e_q), attention: Some(attention) })
            }
            Model::Oracle(m) => {
                let e_q = m.encoder.encode(fwd, questions()?)?;
                let mut parts = vec![e_q];
                let mut features = None;
                if let Some(bb) = &m.backbone {
                    let crop = fwd.graph.constant(batch.images.clone());
                    let cond = bb.is_modulated().then_some(e_q);
                    let maps = bb.forward(fwd, crop, cond)?;
                    parts.push(fwd.graph.global_avg_pool(maps.last())?);
                    features = Some(maps);
                }
                if m.spatial {
                    let s = batch.spatial.clone().ok_or_else(|| config_err("oracle batch lacks spatial vectors"))?;
                    parts.push(fwd.graph.constant(s));
                }
                if let Some(table) = m.category {
                    let t = fwd.param(table);
                    parts.push(fwd.graph.gather_rows(t, &batch.categories)?);
                }
                let w = m.head.bind(fwd);
                let logits = oracle_head(&mut fwd.graph, &parts, &w)?;
                Ok(Output { logits, features, e_q: Some(e_q), attention: None })
            }
            Model::Pretrain(m) => {
                let image = fwd.graph.constant(batch.images.clone());
                let features = m.backbone.forward(fwd, image, None)?;
                let pooled = fwd.graph.global_avg_pool(features.last())?;
                let logits = m.head.apply(fwd, pooled)?;
                Ok(Output { logits, features: Some(features), e_q: None, attention: None })
            }
        }
    }
}

/// Fail unless `src` holds every backbone tensor of `bcfg` with the same shape.
fn check_pretrained_covers<T: Scalar>(bcfg: &BackboneConfig, src: &ParamStore<T>) -> Result<()> {
    let plain = BackboneConfig { modulated_stages: StageSet::NONE, ..bcfg.clone() };
    let mut reference = ParamStore::<T>::new();
    Backbone::new(&mut reference, &plain, None, &mut ChaCha8Rng::seed_from_u64(0))?;
    for p in reference.iter() {
        let found = src.id(&p.name).map(|id| src.get(id).tensor.shape());
        if found != Some(p.tensor.shape()) {
            return Err(Error::Load(format!("pretrained weights lack `{}` with shape {:?}", p.name, p.tensor.shape())));
        }
    }
    for (name, t) in reference.buffers() {
        if src.buffer_id(name).map(|id| src.buffer(id).shape()) != Some(t.shape()) {
            return Err(Error::Load(format!("pretrained weights lack buffer `{name}` with shape {:?}", t.shape())));
        }
    }
    Ok(())
}

/// Whether `variant` keeps parameter `name` fixed.
pub fn is_frozen(task: TaskKind, variant: Variant, name: &str) -> bool {
    if name == FROZEN_TABLE_NAME {
        return true;
    }
    if task == TaskKind::Pretrain || !name.starts_with("backbone.") {
        return false;
    }
    match variant {
        Variant::Raw | Variant::Modern | Variant::ModernMlb => true,
        Variant::FtStage4 => !name.starts_with("backbone.stage4."),
        Variant::FtBn => !is_backbone_norm_param(name),
    }
}

/// A model with its parameters.
#[derive(Clone, Debug)]
pub struct Built<T> {
    pub store: ParamStore<T>,
    pub model: Model,
}

/// Build the model for `config`, copy matching backbone weights and running statistics
/// from `pretrained`, and apply the variant's freeze mask. Heads producing logits start
/// at zero, so the initial prediction is uniform.
pub fn build_variant<T: Scalar>(
    config: &ExperimentConfig,
    vocab_size: usize,
    pretrained: Option<&ParamStore<T>>,
) -> Result<Built<T>> {
    config.validate()?;
    let bcfg = config.backbone_config()?;
    let mut store = ParamStore::new();
    let mut bb_rng = component_rng(config.seed, BACKBONE_STREAM);
    let mut lang_rng = component_rng(config.seed, LANGUAGE_STREAM);
    let mut head_rng = component_rng(config.seed, HEAD_STREAM);
    let modulation = ModulationSpec {
        embedding_width: config.language.hidden,
        hidden: config.modulation_hidden,
        layout: config.modulation_layout,
    };
    let last_channels = bcfg.stage_channels[3];

    let model = match config.task {
        TaskKind::Pretrain => {
            let backbone = Backbone::new(&mut store, &bcfg, None, &mut bb_rng)?;
            let head = Linear::new(&mut store, "pretrain.head", last_channels, TaskKind::Pretrain.answers().len(), true, &mut head_rng)?;
            zero_linear(&mut store, &head);
            Model::Pretrain(PretrainModel { backbone, head })
        }
        TaskKind::Vqa => {
            let backbone = Backbone::new(&mut store, &bcfg, Some(modulation), &mut bb_rng)?;
            let encoder = QuestionEncoder::new(&mut store, &config.language, vocab_size, &mut lang_rng)?;
            let kind = if config.variant == Variant::ModernMlb { AttentionKind::Mlb } else { AttentionKind::Spatial };
            let attention = Attention::new(
                &mut store,
                "vqa.attention",
                kind,
                last_channels,
                encoder.output_width(),
                config.attention_hidden,
                config.glimpses,
                &mut head_rng,
            )?;
            let fusion = FusionHead::new(
                &mut store,
                "vqa.fusion",
                encoder.output_width(),
                attention.glimpses() * last_channels,
                config.fusion_joint,
                TaskKind::Vqa.answers().len(),
                &mut head_rng,
            )?;
            zero_linear(&mut store, &fusion.p);
            Model::Vqa(VqaModel { backbone, encoder, attention, fusion })
        }
        TaskKind::Oracle => {
            let inputs = config.oracle.inputs;
            let backbone = if inputs.crop {
                Some(Backbone::new(&mut store, &bcfg, Some(modulation), &mut bb_rng)?)
            } else {
                None
            };
            let encoder = QuestionEncoder::new(&mut store, &config.language, vocab_size, &mut lang_rng)?;
            let category = if inputs.category {
                let bound = 1.0 / (config.oracle.category_width as f64).sqrt();
                let table = Tensor::uniform(&[Shape::ALL.len(), config.oracle.category_width], bound, &mut head_rng);
                Some(store.add("oracle.category", table)?)
            } else {
                None
            };
            let width = encoder.output_width()
                + if inputs.crop { last_channels } else { 0 }
                + if inputs.spatial { 8 } else { 0 }
                + if inputs.category { config.oracle.category_width } else { 0 };
            let head = Mlp::new(&mut store, "oracle.head", width, config.oracle.hidden, 3, &mut head_rng)?;
            zero_linear(&mut store, &head.out);
            Model::Oracle(OracleModel { backbone, encoder, category, spatial: inputs.spatial, head })
        }
    };

    if let Some(src) = pretrained {
        check_pretrained_covers(&bcfg, src)?;
        store.load_matching(src);
    }
    let (task, variant) = (config.task, config.variant);
    store.set_frozen_by(|name| is_frozen(task, variant, name));
    Ok(Built { store, model })
}

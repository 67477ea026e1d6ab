//! Miniature staged residual network whose normalization layers can be modulated
//! by a question embedding.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage_err, Error, Result};
use crate::norm::{BatchNormState, CbnPredictor, DeltaPair, PredictorLayout, DEFAULT_EPS, DEFAULT_MOMENTUM};
use crate::params::{Forward, ParamCounts, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

pub const STAGES: usize = 4;

/// Subset of the four stages, stored as a bit mask (bit `s-1` for stage `s`).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StageSet(u8);

impl StageSet {
    pub const NONE: StageSet = StageSet(0);
    pub const ALL: StageSet = StageSet(0b1111);

    pub fn from_stages(stages: &[usize]) -> Result<Self> {
        let mut bits = 0u8;
        for &s in stages {
            if !(1..=STAGES).contains(&s) {
                return Err(config_err(format!("stage {s} outside 1..=4")));
            }
            bits |= 1 << (s - 1);
        }
        Ok(StageSet(bits))
    }

    pub fn contains(self, stage: usize) -> bool {
        (1..=STAGES).contains(&stage) && self.0 & (1 << (stage - 1)) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: StageSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn stages(self) -> Vec<usize> {
        (1..=STAGES).filter(|&s| self.contains(s)).collect()
    }

    /// Row label in the style of an ablation table: `∅`, `Stage 4`, `Stages 3-4`, `All`.
    pub fn table_label(self) -> String {
        let stages = self.stages();
        match stages.as_slice() {
            [] => "∅".to_string(),
            [1, 2, 3, 4] => "All".to_string(),
            [s] => format!("Stage {s}"),
            [first, .., last] if stages.windows(2).all(|w| w[1] == w[0] + 1) => format!("Stages {first}-{last}"),
            _ => format!("Stages {}", stages.iter().map(ToString::to_string).collect::<Vec<_>>().join("+")),
        }
    }
}

impl fmt::Display for StageSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let stages = self.stages();
        match stages.as_slice() {
            [] => write!(f, "none"),
            [1, 2, 3, 4] => write!(f, "all"),
            [s] => write!(f, "{s}"),
            [first, .., last] if stages.windows(2).all(|w| w[1] == w[0] + 1) => write!(f, "{first}-{last}"),
            _ => write!(f, "{}", stages.iter().map(ToString::to_string).collect::<Vec<_>>().join("+")),
        }
    }
}

impl FromStr for StageSet {
    type Err = Error;

    /// Accepts `none`, `all`, a single stage `4`, a range `3-4`, or `+`-joined stages `1+3`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "" | "none" | "∅" | "empty" => return Ok(StageSet::NONE),
            "all" => return Ok(StageSet::ALL),
            _ => {}
        }
        let bad = || config_err(format!("cannot parse stage set `{s}`"));
        let mut stages = Vec::new();
        for part in s.split('+') {
            if let Some((a, b)) = part.split_once('-') {
                let a: usize = a.trim().parse().map_err(|_| bad())?;
                let b: usize = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                stages.extend(a..=b);
            } else {
                stages.push(part.trim().parse().map_err(|_| bad())?);
            }
        }
        StageSet::from_stages(&stages)
    }
}

/// Shape of the backbone and which stages are modulated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stem_stride: usize,
    /// 2×2 average pooling after the stem.
    pub stem_pool: bool,
    pub stage_channels: [usize; STAGES],
    pub blocks_per_stage: [usize; STAGES],
    /// Bottleneck width is `stage_channels / bottleneck_divisor`.
    pub bottleneck_divisor: usize,
    pub input_size: usize,
    pub modulated_stages: StageSet,
    /// Also modulate the projection shortcut's normalization.
    pub modulate_shortcut: bool,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem_channels: 16,
            stem_stride: 2,
            stem_pool: true,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: [2, 2, 2, 2],
            bottleneck_divisor: 1,
            input_size: 64,
            modulated_stages: StageSet::NONE,
            modulate_shortcut: false,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        for i in 1..STAGES {
            if self.stage_channels[i] != 2 * self.stage_channels[i - 1] {
                return Err(config_err(format!(
                    "stage channels must double at each transition, got {:?}",
                    self.stage_channels
                )));
            }
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(config_err("every stage needs at least one block"));
        }
        if self.bottleneck_divisor == 0 || self.stage_channels.iter().any(|&c| c % self.bottleneck_divisor != 0) {
            return Err(config_err(format!(
                "bottleneck divisor {} must divide every stage width",
                self.bottleneck_divisor
            )));
        }
        if self.stem_stride == 0 || self.stem_channels == 0 {
            return Err(config_err("stem stride and width must be positive"));
        }
        let sizes = self.stage_sizes();
        if sizes[STAGES - 1] == 0 {
            return Err(config_err(format!("input size {} too small for four stages", self.input_size)));
        }
        Ok(())
    }

    /// Spatial size after the stem (and optional pool).
    pub fn stem_size(&self) -> usize {
        let after_conv = (self.input_size + 2 - 3) / self.stem_stride + 1;
        if self.stem_pool {
            after_conv / 2
        } else {
            after_conv
        }
    }

    /// Spatial size of each stage's output.
    pub fn stage_sizes(&self) -> [usize; STAGES] {
        let mut sizes = [0; STAGES];
        let mut s = self.stem_size();
        for (i, out) in sizes.iter_mut().enumerate() {
            if i > 0 {
                s = if s == 0 { 0 } else { (s - 1) / 2 + 1 };
            }
            *out = s;
        }
        sizes
    }

    /// Channels of every normalization layer in the backbone, stem first.
    pub fn norm_layer_channels(&self) -> Vec<usize> {
        let mut out = vec![self.stem_channels];
        let mut in_ch = self.stem_channels;
        for s in 0..STAGES {
            let c = self.stage_channels[s];
            let mid = c / self.bottleneck_divisor;
            for b in 0..self.blocks_per_stage[s] {
                out.extend([mid, mid, c]);
                if b == 0 && needs_projection(in_ch, c, stage_stride(s)) {
                    out.push(c);
                }
                in_ch = c;
            }
        }
        out
    }

    /// `2 · Σ channels` over all normalization layers.
    pub fn bn_parameter_count(&self) -> u64 {
        2 * self.norm_layer_channels().iter().map(|&c| c as u64).sum::<u64>()
    }
}

fn stage_stride(stage_index: usize) -> usize {
    if stage_index == 0 {
        1
    } else {
        2
    }
}

fn needs_projection(in_ch: usize, out_ch: usize, stride: usize) -> bool {
    in_ch != out_ch || stride != 1
}

/// Convolution without bias followed by a normalization layer.
#[derive(Clone, Debug)]
pub struct ConvNorm {
    pub weight: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub norm: BatchNormState,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        conv_name: &str,
        norm_name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = store.add(format!("{conv_name}.weight"), Tensor::uniform(&[out_ch, in_ch, kernel, kernel], bound, rng))?;
        let norm = BatchNormState::new(store, norm_name, out_ch, cfg.eps, cfg.momentum)?;
        Ok(Self { weight, stride, padding: (kernel - 1) / 2, norm })
    }

    fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var, deltas: Option<&DeltaPair>) -> Result<Var> {
        let w = fwd.param(self.weight);
        let y = fwd.graph.conv2d(x, w, None, self.stride, self.padding)?;
        match deltas {
            Some(d) => self.norm.forward_conditional(fwd, y, d),
            None => self.norm.forward(fwd, y),
        }
    }
}

/// Deltas for every modulated normalization layer of one block.
#[derive(Clone, Debug)]
pub struct BlockDeltas {
    pub norms: [DeltaPair; 3],
    pub shortcut: Option<DeltaPair>,
}

/// Bottleneck block: 1×1, 3×3 and 1×1 convolutions, each followed by normalization.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub name: String,
    pub convs: [ConvNorm; 3],
    pub projection: Option<ConvNorm>,
    /// Present when the block's stage is modulated.
    pub predictors: Option<BlockPredictors>,
}

#[derive(Clone, Debug)]
pub struct BlockPredictors {
    pub norms: [CbnPredictor; 3],
    pub shortcut: Option<CbnPredictor>,
}

impl BlockPredictors {
    pub fn parameter_count(&self) -> usize {
        self.norms.iter().map(CbnPredictor::parameter_count).sum::<usize>()
            + self.shortcut.as_ref().map_or(0, CbnPredictor::parameter_count)
    }

    pub fn predict<T: Scalar>(&self, fwd: &mut Forward<'_, T>, e_q: Var) -> Result<BlockDeltas> {
        let norms = [
            self.norms[0].predict(fwd, e_q)?,
            self.norms[1].predict(fwd, e_q)?,
            self.norms[2].predict(fwd, e_q)?,
        ];
        let shortcut = self.shortcut.as_ref().map(|p| p.predict(fwd, e_q)).transpose()?;
        Ok(BlockDeltas { norms, shortcut })
    }
}

impl ResidualBlock {
    /// `ReLU(shortcut(x) + bn3(conv3(relu(bn2(conv2(relu(bn1(conv1(x)))))))))`.
    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, x: Var, deltas: Option<&BlockDeltas>) -> Result<Var> {
        if self.predictors.is_some() && deltas.is_none() {
            return Err(usage_err(format!("{} is modulated but no deltas were supplied", self.name)));
        }
        let d = |i: usize| deltas.map(|d| &d.norms[i]);
        let h = self.convs[0].forward(fwd, x, d(0))?;
        let h = fwd.graph.relu(h)?;
        let h = self.convs[1].forward(fwd, h, d(1))?;
        let h = fwd.graph.relu(h)?;
        let h = self.convs[2].forward(fwd, h, d(2))?;
        let shortcut = match &self.projection {
            Some(p) => p.forward(fwd, x, deltas.and_then(|d| d.shortcut.as_ref()))?,
            None => x,
        };
        let sum = fwd.graph.add(shortcut, h)?;
        fwd.graph.relu(sum)
    }
}

/// Outputs of the stem and each stage.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    pub stem: Var,
    pub stages: Vec<Var>,
}

impl FeatureMaps {
    /// Output of the last stage, consumed by attention.
    pub fn last(&self) -> Var {
        *self.stages.last().expect("four stages")
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: ConvNorm,
    pub stages: Vec<Vec<ResidualBlock>>,
}

/// Predictor settings used when the backbone has modulated stages.
#[derive(Clone, Copy, Debug)]
pub struct ModulationSpec {
    pub embedding_width: usize,
    pub hidden: usize,
    pub layout: PredictorLayout,
}

impl Backbone {
    /// Registers backbone parameters under `backbone.` and predictors under `cbn.`.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &BackboneConfig,
        modulation: Option<ModulationSpec>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        if !config.modulated_stages.is_empty() && modulation.is_none() {
            return Err(config_err("modulated stages need predictor settings"));
        }
        // Predictors draw from their own stream so backbone weights do not depend on
        // which stages are modulated.
        let mut predictor_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        let stem = ConvNorm::new(
            store,
            "backbone.stem.conv",
            "backbone.stem.bn",
            3,
            config.stem_channels,
            3,
            config.stem_stride,
            config,
            rng,
        )?;
        let mut stages = Vec::with_capacity(STAGES);
        let mut in_ch = config.stem_channels;
        for s in 0..STAGES {
            let c = config.stage_channels[s];
            let mid = c / config.bottleneck_divisor;
            let mut blocks = Vec::new();
            for b in 0..config.blocks_per_stage[s] {
                let name = format!("stage{}.block{}", s + 1, b + 1);
                let prefix = format!("backbone.{name}");
                let stride = if b == 0 { stage_stride(s) } else { 1 };
                let convs = [
                    ConvNorm::new(store, &format!("{prefix}.conv1"), &format!("{prefix}.bn1"), in_ch, mid, 1, 1, config, rng)?,
                    ConvNorm::new(store, &format!("{prefix}.conv2"), &format!("{prefix}.bn2"), mid, mid, 3, stride, config, rng)?,
                    ConvNorm::new(store, &format!("{prefix}.conv3"), &format!("{prefix}.bn3"), mid, c, 1, 1, config, rng)?,
                ];
                let projection = if needs_projection(in_ch, c, stride) {
                    Some(ConvNorm::new(
                        store,
                        &format!("{prefix}.shortcut"),
                        &format!("{prefix}.shortcut_bn"),
                        in_ch,
                        c,
                        1,
                        stride,
                        config,
                        rng,
                    )?)
                } else {
                    None
                };
                let predictors = match modulation {
                    Some(m) if config.modulated_stages.contains(s + 1) => {
                        let mut make = |suffix: &str, ch: usize| {
                            CbnPredictor::new(
                                store,
                                &format!("cbn.{name}.{suffix}"),
                                m.embedding_width,
                                m.hidden,
                                ch,
                                m.layout,
                                &mut predictor_rng,
                            )
                        };
                        let norms = [make("bn1", mid)?, make("bn2", mid)?, make("bn3", c)?];
                        let shortcut = match (&projection, config.modulate_shortcut) {
                            (Some(_), true) => Some(make("shortcut_bn", c)?),
                            _ => None,
                        };
                        Some(BlockPredictors { norms, shortcut })
                    }
                    _ => None,
                };
                blocks.push(ResidualBlock { name: prefix, convs, projection, predictors });
                in_ch = c;
            }
            stages.push(blocks);
        }
        Ok(Self { config: config.clone(), stem, stages })
    }

    pub fn is_modulated(&self) -> bool {
        !self.config.modulated_stages.is_empty()
    }

    /// Stem plus four stages. `e_q` must be given exactly when some stage is modulated.
    pub fn forward<T: Scalar>(&self, fwd: &mut Forward<'_, T>, image: Var, e_q: Option<Var>) -> Result<FeatureMaps> {
        match (self.is_modulated(), e_q.is_some()) {
            (true, false) => return Err(usage_err("modulated backbone needs a question embedding")),
            (false, true) => return Err(usage_err("question embedding given to an unmodulated backbone")),
            _ => {}
        }
        let shape = fwd.graph.shape(image);
        if shape.len() != 4 || shape[1] != 3 {
            return Err(config_err(format!("backbone expects [N,3,S,S] images, got {shape:?}")));
        }
        let stem = self.stem.forward(fwd, image, None)?;
        let mut x = fwd.graph.relu(stem)?;
        if self.config.stem_pool {
            x = fwd.graph.avg_pool2(x)?;
        }
        let stem_out = x;
        let mut stages = Vec::with_capacity(STAGES);
        for blocks in &self.stages {
            for block in blocks {
                let deltas = match (&block.predictors, e_q) {
                    (Some(p), Some(e)) => Some(p.predict(fwd, e)?),
                    _ => None,
                };
                x = block.forward(fwd, x, deltas.as_ref())?;
            }
            stages.push(x);
        }
        Ok(FeatureMaps { stem: stem_out, stages })
    }

    /// Total scalars in all predictors.
    pub fn predictor_parameter_count(&self) -> usize {
        self.stages.iter().flatten().filter_map(|b| b.predictors.as_ref()).map(BlockPredictors::parameter_count).sum()
    }
}

/// Component bucket for a parameter name: `bn` (backbone γ/β), `conv` (other backbone
/// weights), `cbn` (predictors), otherwise the first name segment.
pub fn component_of(name: &str) -> String {
    if let Some(rest) = name.strip_prefix("backbone.") {
        if rest.ends_with(".gamma") || rest.ends_with(".beta") {
            "bn".to_string()
        } else {
            "conv".to_string()
        }
    } else {
        name.split('.').next().unwrap_or(name).to_string()
    }
}

/// Exact parameter counts bucketed by [`component_of`].
pub fn count_parameters<T: Scalar>(store: &ParamStore<T>) -> ParamCounts {
    store.count(component_of)
}

/// Whether a parameter name is a backbone normalization scale or shift.
pub fn is_backbone_norm_param(name: &str) -> bool {
    component_of(name) == "bn"
}

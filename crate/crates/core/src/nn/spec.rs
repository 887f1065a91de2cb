//! Declarative architecture descriptions.

use std::fmt;
use std::str::FromStr;

use super::NnError;
use crate::config::{join_list, ConfigDoc, ConfigError, ConfigReader};
use crate::tensor::window_output_size;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    MaxPool,
    AvgPool,
    ResidualBlock,
    PoolMixerBlock,
    AttentionMixerBlock,
    GlobalAvgPool,
    Linear,
    Relu,
    BatchNorm,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::MaxPool => "maxpool",
            LayerKind::AvgPool => "avgpool",
            LayerKind::ResidualBlock => "residual-block",
            LayerKind::PoolMixerBlock => "pool-mixer-block",
            LayerKind::AttentionMixerBlock => "attention-mixer-block",
            LayerKind::GlobalAvgPool => "global-avg-pool",
            LayerKind::Linear => "linear",
            LayerKind::Relu => "relu",
            LayerKind::BatchNorm => "batchnorm",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One entry of an [`ArchitectureSpec`]. Kernel, stride and padding are
/// ignored by kinds without a spatial window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
}

impl LayerSpec {
    fn base(kind: LayerKind, channels: usize) -> Self {
        Self {
            kind,
            kernel: 1,
            stride: 1,
            padding: 0,
            in_channels: channels,
            out_channels: channels,
            bias: false,
        }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        Self {
            kind: LayerKind::Conv,
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
            bias,
        }
    }

    pub fn maxpool(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            ..Self::base(LayerKind::MaxPool, channels)
        }
    }

    pub fn avgpool(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            ..Self::base(LayerKind::AvgPool, channels)
        }
    }

    pub fn batchnorm(channels: usize) -> Self {
        Self::base(LayerKind::BatchNorm, channels)
    }

    pub fn relu(channels: usize) -> Self {
        Self::base(LayerKind::Relu, channels)
    }

    /// Basic residual block: two 3x3 convolutions, the first carrying the stride.
    pub fn residual(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::ResidualBlock,
            kernel: 3,
            stride,
            padding: 1,
            in_channels,
            out_channels,
            bias: false,
        }
    }

    /// Metaformer block; `out_channels` holds the hidden width of the channel MLP.
    pub fn pool_mixer(channels: usize, mlp_hidden: usize) -> Self {
        Self {
            kernel: 3,
            padding: 1,
            out_channels: mlp_hidden,
            ..Self::base(LayerKind::PoolMixerBlock, channels)
        }
    }

    pub fn attention_mixer(channels: usize, mlp_hidden: usize) -> Self {
        Self {
            out_channels: mlp_hidden,
            ..Self::base(LayerKind::AttentionMixerBlock, channels)
        }
    }

    pub fn global_avg_pool(channels: usize) -> Self {
        Self::base(LayerKind::GlobalAvgPool, channels)
    }

    pub fn linear(in_features: usize, out_features: usize) -> Self {
        Self {
            in_channels: in_features,
            out_channels: out_features,
            bias: true,
            ..Self::base(LayerKind::Linear, in_features)
        }
    }

    /// Channels seen by the next layer.
    pub fn output_channels(&self) -> usize {
        match self.kind {
            LayerKind::PoolMixerBlock | LayerKind::AttentionMixerBlock => self.in_channels,
            _ => self.out_channels,
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(
            self.kind,
            LayerKind::Conv | LayerKind::MaxPool | LayerKind::AvgPool | LayerKind::ResidualBlock
        )
    }
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial { channels: usize, height: usize, width: usize },
    Features(usize),
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial { channels, height, width } => write!(f, "{channels}x{height}x{width}"),
            Shape::Features(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchitectureSpec {
    pub name: String,
    pub input_channels: usize,
    pub input_resolution: usize,
    pub layers: Vec<LayerSpec>,
    /// `Some(n)` when the last layer is an `n`-output regression head,
    /// `None` for feature extractors ending in global average pooling.
    pub head_outputs: Option<usize>,
}

impl ArchitectureSpec {
    /// Output shape after every layer for the declared input resolution.
    pub fn shapes(&self) -> Result<Vec<Shape>, NnError> {
        let mut shape = Shape::Spatial {
            channels: self.input_channels,
            height: self.input_resolution,
            width: self.input_resolution,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let err = |reason: String| NnError::Spec {
                name: self.name.clone(),
                layer: i,
                reason,
            };
            if !matches!(l.stride, 1 | 2 | 4) {
                return Err(err(format!("stride {} outside {{1,2,4}}", l.stride)));
            }
            shape = match (l.kind, shape) {
                (LayerKind::Linear, Shape::Features(f)) => {
                    if f != l.in_channels {
                        return Err(err(format!("expects {} features, receives {f}", l.in_channels)));
                    }
                    Shape::Features(l.out_channels)
                }
                (LayerKind::Linear, s) => return Err(err(format!("linear after spatial shape {s}"))),
                (LayerKind::Relu | LayerKind::BatchNorm, Shape::Features(f)) => Shape::Features(f),
                (_, Shape::Features(_)) => return Err(err("spatial layer after features".into())),
                (kind, Shape::Spatial { channels, height, width }) => {
                    if channels != l.in_channels {
                        return Err(err(format!("expects {} input channels, receives {channels}", l.in_channels)));
                    }
                    if l.is_spatial() && l.stride > 1 && height.min(width) < 2 {
                        return Err(err(format!(
                            "stride {} applied to a {height}x{width} map: spatial dims collapse",
                            l.stride
                        )));
                    }
                    let window = |size: usize, axis: &str| {
                        let (k, s, p) = match kind {
                            LayerKind::Conv | LayerKind::MaxPool | LayerKind::ResidualBlock => (l.kernel, l.stride, l.padding),
                            LayerKind::AvgPool => (l.kernel, l.stride, 0),
                            _ => (1, 1, 0),
                        };
                        window_output_size("architecture", axis, size, k, s, p).map_err(|e| err(e.to_string()))
                    };
                    match kind {
                        LayerKind::GlobalAvgPool => Shape::Features(channels),
                        _ => Shape::Spatial {
                            channels: l.output_channels(),
                            height: window(height, "height")?,
                            width: window(width, "width")?,
                        },
                    }
                }
            };
            out.push(shape);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let shapes = self.shapes()?;
        let spec_err = |layer: usize, reason: &str| NnError::Spec {
            name: self.name.clone(),
            layer,
            reason: reason.to_string(),
        };
        let last = self.layers.len().checked_sub(1).ok_or_else(|| spec_err(0, "no layers"))?;
        match self.head_outputs {
            Some(n) => {
                let l = &self.layers[last];
                if l.kind != LayerKind::Linear || l.out_channels != n {
                    return Err(spec_err(last, &format!("must end in a linear head with {n} outputs")));
                }
                let heads = self.layers.iter().filter(|l| l.kind == LayerKind::Linear).count();
                if heads != 1 {
                    return Err(spec_err(last, "exactly one output head allowed"));
                }
            }
            None => {
                if self.layers[last].kind != LayerKind::GlobalAvgPool {
                    return Err(spec_err(last, "feature extractor must end in global average pooling"));
                }
            }
        }
        debug_assert_eq!(shapes.len(), self.layers.len());
        Ok(())
    }

    /// Width of the pooled feature vector feeding the head.
    pub fn feature_width(&self) -> Result<usize, NnError> {
        let shapes = self.shapes()?;
        let gap = self.layers.iter().position(|l| l.kind == LayerKind::GlobalAvgPool);
        match gap.map(|i| shapes[i]) {
            Some(Shape::Features(f)) => Ok(f),
            _ => Err(NnError::Spec {
                name: self.name.clone(),
                layer: self.layers.len(),
                reason: "no global average pooling".into(),
            }),
        }
    }
}

/// Three-branch model: face, left eye and right eye trunks whose pooled
/// features are concatenated as (face, left, right) and regressed by one
/// linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiRegionSpec {
    pub face_backbone: ArchitectureSpec,
    pub eye_backbone: ArchitectureSpec,
    pub share_eye_weights: bool,
    pub head_in_features: usize,
    pub head_outputs: usize,
}

/// Desk-scale residual network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniResConfig {
    pub first_stride: usize,
    pub input_resolution: usize,
    pub width: usize,
    pub blocks_per_stage: Vec<usize>,
    pub in_channels: usize,
}

impl Default for MiniResConfig {
    fn default() -> Self {
        Self {
            first_stride: 2,
            input_resolution: 64,
            width: 16,
            blocks_per_stage: vec![1, 1],
            in_channels: 1,
        }
    }
}

/// Metaformer with pooling (or attention) token mixers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolFormerConfig {
    pub patch_stride: usize,
    pub input_resolution: usize,
    pub width: usize,
    pub stages: usize,
    pub blocks_per_stage: usize,
    pub attention_stages: Vec<usize>,
    pub mlp_ratio: usize,
    pub in_channels: usize,
}

impl Default for PoolFormerConfig {
    fn default() -> Self {
        Self {
            patch_stride: 4,
            input_resolution: 64,
            width: 16,
            stages: 4,
            blocks_per_stage: 2,
            attention_stages: Vec::new(),
            mlp_ratio: 2,
            in_channels: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiRegionConfig {
    pub face: MiniResConfig,
    pub eye: MiniResConfig,
    pub share_eye_weights: bool,
}

impl Default for MultiRegionConfig {
    fn default() -> Self {
        Self {
            face: MiniResConfig::default(),
            eye: MiniResConfig {
                input_resolution: 32,
                ..MiniResConfig::default()
            },
            share_eye_weights: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    MiniRes,
    PoolFormer,
    MultiRegion,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::MiniRes => "minires",
            ArchKind::PoolFormer => "poolformer",
            ArchKind::MultiRegion => "multiregion",
        }
    }
}

impl FromStr for ArchKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "minires" => Ok(ArchKind::MiniRes),
            "poolformer" => Ok(ArchKind::PoolFormer),
            "multiregion" | "multi-region" => Ok(ArchKind::MultiRegion),
            other => Err(format!("unknown architecture `{other}` (minires|poolformer|multiregion)")),
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Serializable model selector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelConfig {
    MiniRes(MiniResConfig),
    PoolFormer(PoolFormerConfig),
    MultiRegion(MultiRegionConfig),
}

impl ModelConfig {
    pub fn kind(&self) -> ArchKind {
        match self {
            ModelConfig::MiniRes(_) => ArchKind::MiniRes,
            ModelConfig::PoolFormer(_) => ArchKind::PoolFormer,
            ModelConfig::MultiRegion(_) => ArchKind::MultiRegion,
        }
    }

    /// First-layer stride: stem stride or patch-embedding stride.
    pub fn first_stride(&self) -> usize {
        match self {
            ModelConfig::MiniRes(c) => c.first_stride,
            ModelConfig::PoolFormer(c) => c.patch_stride,
            ModelConfig::MultiRegion(c) => c.face.first_stride,
        }
    }

    /// Face (or single-region) input resolution.
    pub fn input_resolution(&self) -> usize {
        match self {
            ModelConfig::MiniRes(c) => c.input_resolution,
            ModelConfig::PoolFormer(c) => c.input_resolution,
            ModelConfig::MultiRegion(c) => c.face.input_resolution,
        }
    }

    pub fn eye_resolution(&self) -> Option<usize> {
        match self {
            ModelConfig::MultiRegion(c) => Some(c.eye.input_resolution),
            _ => None,
        }
    }

    pub fn is_multi_region(&self) -> bool {
        matches!(self, ModelConfig::MultiRegion(_))
    }

    pub fn shared_eyes(&self) -> bool {
        matches!(self, ModelConfig::MultiRegion(c) if c.share_eye_weights)
    }

    pub fn with_first_stride(&self, stride: usize) -> Self {
        let mut c = self.clone();
        match &mut c {
            ModelConfig::MiniRes(m) => m.first_stride = stride,
            ModelConfig::PoolFormer(p) => p.patch_stride = stride,
            ModelConfig::MultiRegion(m) => {
                m.face.first_stride = stride;
                m.eye.first_stride = stride;
            }
        }
        c
    }

    pub fn with_resolution(&self, resolution: usize) -> Self {
        let mut c = self.clone();
        match &mut c {
            ModelConfig::MiniRes(m) => m.input_resolution = resolution,
            ModelConfig::PoolFormer(p) => p.input_resolution = resolution,
            ModelConfig::MultiRegion(m) => m.face.input_resolution = resolution,
        }
        c
    }

    /// Writes the `[model]` section (plus `[eye]` for multi-region).
    pub fn write_config(&self, doc: &mut ConfigDoc) {
        fn minires(s: &mut crate::config::Section, c: &MiniResConfig) {
            s.set("first_stride", c.first_stride)
                .set("resolution", c.input_resolution)
                .set("width", c.width)
                .set("blocks", join_list(&c.blocks_per_stage))
                .set("in_channels", c.in_channels);
        }
        let s = doc.push_section("model");
        s.set("arch", self.kind());
        match self {
            ModelConfig::MiniRes(c) => minires(s, c),
            ModelConfig::PoolFormer(c) => {
                s.set("patch_stride", c.patch_stride)
                    .set("resolution", c.input_resolution)
                    .set("width", c.width)
                    .set("stages", c.stages)
                    .set("blocks_per_stage", c.blocks_per_stage)
                    .set("attention_stages", join_list(&c.attention_stages))
                    .set("mlp_ratio", c.mlp_ratio)
                    .set("in_channels", c.in_channels);
            }
            ModelConfig::MultiRegion(c) => {
                minires(s, &c.face);
                s.set("share_eye_weights", c.share_eye_weights);
                let e = doc.push_section("eye");
                minires(e, &c.eye);
            }
        }
    }

    pub fn to_config_string(&self) -> String {
        let mut doc = ConfigDoc::default();
        self.write_config(&mut doc);
        doc.render()
    }

    /// Reads `[model]` (and `[eye]`) from a strict reader.
    pub fn read_config(r: &mut ConfigReader<'_>) -> Result<Self, ConfigError> {
        fn minires(r: &mut ConfigReader<'_>, sec: &str, base: MiniResConfig) -> Result<MiniResConfig, ConfigError> {
            Ok(MiniResConfig {
                first_stride: r.get_or(sec, "first_stride", base.first_stride)?,
                input_resolution: r.get_or(sec, "resolution", base.input_resolution)?,
                width: r.get_or(sec, "width", base.width)?,
                blocks_per_stage: r.list(sec, "blocks")?.unwrap_or(base.blocks_per_stage),
                in_channels: r.get_or(sec, "in_channels", base.in_channels)?,
            })
        }
        if !r.has_section("model") {
            return Err(ConfigError::MissingSection("model".into()));
        }
        let kind: ArchKind = r.get_or("model", "arch", ArchKind::MiniRes)?;
        Ok(match kind {
            ArchKind::MiniRes => ModelConfig::MiniRes(minires(r, "model", MiniResConfig::default())?),
            ArchKind::PoolFormer => {
                let d = PoolFormerConfig::default();
                ModelConfig::PoolFormer(PoolFormerConfig {
                    patch_stride: r.get_or("model", "patch_stride", d.patch_stride)?,
                    input_resolution: r.get_or("model", "resolution", d.input_resolution)?,
                    width: r.get_or("model", "width", d.width)?,
                    stages: r.get_or("model", "stages", d.stages)?,
                    blocks_per_stage: r.get_or("model", "blocks_per_stage", d.blocks_per_stage)?,
                    attention_stages: r.list("model", "attention_stages")?.unwrap_or(d.attention_stages),
                    mlp_ratio: r.get_or("model", "mlp_ratio", d.mlp_ratio)?,
                    in_channels: r.get_or("model", "in_channels", d.in_channels)?,
                })
            }
            ArchKind::MultiRegion => {
                let d = MultiRegionConfig::default();
                let face = minires(r, "model", d.face)?;
                let share = r.get_or("model", "share_eye_weights", false)?;
                let eye_base = MiniResConfig {
                    first_stride: face.first_stride,
                    ..d.eye
                };
                let eye = minires(r, "eye", eye_base)?;
                ModelConfig::MultiRegion(MultiRegionConfig {
                    face,
                    eye,
                    share_eye_weights: share,
                })
            }
        })
    }

    pub fn from_config_str(text: &str) -> Result<Self, ConfigError> {
        let doc = ConfigDoc::parse(text)?;
        let mut r = doc.reader();
        let c = Self::read_config(&mut r)?;
        r.finish(None)?;
        Ok(c)
    }
}

/// Layer list of a MiniRes trunk: 7x7 stem, 3x3/2 max pool, residual stages
/// doubling width, global average pool, and optionally the 2-output head.
pub fn minires_spec(c: &MiniResConfig, with_head: bool) -> Result<ArchitectureSpec, NnError> {
    if !matches!(c.first_stride, 1 | 2) {
        return Err(NnError::Config(format!("first_stride must be 1 or 2, got {}", c.first_stride)));
    }
    if c.blocks_per_stage.is_empty() || c.width == 0 || c.in_channels == 0 {
        return Err(NnError::Config("minires needs width > 0 and at least one stage".into()));
    }
    let mut layers = vec![
        LayerSpec::conv(c.in_channels, c.width, 7, c.first_stride, 3, false),
        LayerSpec::batchnorm(c.width),
        LayerSpec::relu(c.width),
        LayerSpec::maxpool(c.width, 3, 2, 1),
    ];
    let mut ch = c.width;
    for (stage, &blocks) in c.blocks_per_stage.iter().enumerate() {
        let out = c.width << stage;
        for b in 0..blocks {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            layers.push(LayerSpec::residual(ch, out, stride));
            ch = out;
        }
    }
    layers.push(LayerSpec::global_avg_pool(ch));
    if with_head {
        layers.push(LayerSpec::linear(ch, 2));
    }
    let spec = ArchitectureSpec {
        name: format!("minires-s{}-r{}-w{}", c.first_stride, c.input_resolution, c.width),
        input_channels: c.in_channels,
        input_resolution: c.input_resolution,
        layers,
        head_outputs: with_head.then_some(2),
    };
    spec.validate()?;
    Ok(spec)
}

/// Patch-embedding kernel for a given stride: `max(stride, 3)`, padded so the
/// token grid is `resolution / stride` per axis.
pub fn patch_embedding(stride: usize) -> (usize, usize) {
    let kernel = stride.max(3);
    (kernel, (kernel - stride).div_ceil(2))
}

pub fn poolformer_spec(c: &PoolFormerConfig) -> Result<ArchitectureSpec, NnError> {
    if !matches!(c.patch_stride, 1 | 2 | 4) {
        return Err(NnError::Config(format!("patch_stride must be 1, 2 or 4, got {}", c.patch_stride)));
    }
    if c.stages == 0 || c.blocks_per_stage == 0 || c.width == 0 || c.mlp_ratio == 0 {
        return Err(NnError::Config("poolformer needs positive stages, blocks, width and mlp_ratio".into()));
    }
    if let Some(&bad) = c.attention_stages.iter().find(|&&s| s >= c.stages) {
        return Err(NnError::Config(format!(
            "attention stage {bad} out of range for {} stages",
            c.stages
        )));
    }
    let grid = c.input_resolution / c.patch_stride;
    if grid < 2 || c.input_resolution % c.patch_stride != 0 {
        return Err(NnError::Config(format!(
            "patch stride {} on {} input does not give a token grid of at least 2x2",
            c.patch_stride, c.input_resolution
        )));
    }
    let (k, p) = patch_embedding(c.patch_stride);
    let mut layers = vec![LayerSpec::conv(c.in_channels, c.width, k, c.patch_stride, p, true)];
    let mut ch = c.width;
    for stage in 0..c.stages {
        if stage > 0 {
            let out = ch * 2;
            layers.push(LayerSpec::conv(ch, out, 3, 2, 1, true));
            ch = out;
        }
        for _ in 0..c.blocks_per_stage {
            layers.push(if c.attention_stages.contains(&stage) {
                LayerSpec::attention_mixer(ch, ch * c.mlp_ratio)
            } else {
                LayerSpec::pool_mixer(ch, ch * c.mlp_ratio)
            });
        }
    }
    layers.push(LayerSpec::batchnorm(ch));
    layers.push(LayerSpec::global_avg_pool(ch));
    layers.push(LayerSpec::linear(ch, 2));
    let spec = ArchitectureSpec {
        name: format!(
            "poolformer-s{}-r{}{}",
            c.patch_stride,
            c.input_resolution,
            if c.attention_stages.is_empty() { "" } else { "-attn" }
        ),
        input_channels: c.in_channels,
        input_resolution: c.input_resolution,
        layers,
        head_outputs: Some(2),
    };
    spec.validate()?;
    Ok(spec)
}

pub fn multiregion_spec(c: &MultiRegionConfig) -> Result<MultiRegionSpec, NnError> {
    let face_backbone = minires_spec(&c.face, false)?;
    let eye_backbone = minires_spec(&c.eye, false)?;
    let head_in_features = face_backbone.feature_width()? + 2 * eye_backbone.feature_width()?;
    Ok(MultiRegionSpec {
        face_backbone,
        eye_backbone,
        share_eye_weights: c.share_eye_weights,
        head_in_features,
        head_outputs: 2,
    })
}

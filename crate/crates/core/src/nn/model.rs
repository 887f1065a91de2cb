//! Models built from architecture specs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{adam_update, Binder, BufferId, ParamId, ParamStore};
use super::spec::{
    minires_spec, multiregion_spec, poolformer_spec, ArchitectureSpec, LayerKind, LayerSpec, ModelConfig,
    MultiRegionSpec,
};
use super::NnError;
use crate::scalar::Scalar;
use crate::tensor::{BatchNormMode, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    fn bn(self) -> BatchNormMode {
        match self {
            Mode::Train => BatchNormMode::Train,
            Mode::Eval => BatchNormMode::Eval,
        }
    }
}

/// Windowed primitive of a spatial trunk, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrunkLayer {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl TrunkLayer {
    pub fn new(kind: LayerKind, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind,
            kernel,
            stride,
            padding,
        }
    }

    /// Attention mixes every token with every other one.
    pub fn is_global(&self) -> bool {
        self.kind == LayerKind::AttentionMixerBlock
    }
}

#[derive(Debug, Clone, Copy)]
struct Affine {
    weight: ParamId,
    bias: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: BufferId,
    var: BufferId,
}

#[derive(Debug, Clone)]
enum Block {
    Conv { conv: Affine, stride: usize, padding: usize },
    BatchNorm(Norm),
    Relu,
    MaxPool { kernel: usize, stride: usize, padding: usize },
    AvgPool { kernel: usize, stride: usize },
    Residual {
        conv1: Affine,
        bn1: Norm,
        conv2: Affine,
        bn2: Norm,
        projection: Option<(Affine, Norm)>,
        stride: usize,
    },
    Mixer {
        norm1: Norm,
        attention: Option<(Affine, Affine)>,
        norm2: Norm,
        fc1: Affine,
        fc2: Affine,
    },
    GlobalAvgPool,
    Linear(Affine),
}

#[derive(Debug, Clone)]
struct Trunk {
    blocks: Vec<Block>,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn affine(&mut self, name: &str, dims: &[usize], bias: bool) -> Result<Affine, NnError> {
        let weight = self.store.add_weight(&format!("{name}.weight"), dims, &mut self.rng)?;
        let bias = if bias {
            Some(self.store.add_param(&format!("{name}.bias"), Tensor::zeros(&[dims[0]]))?)
        } else {
            None
        };
        Ok(Affine { weight, bias })
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<Norm, NnError> {
        Ok(Norm {
            gamma: self.store.add_param(&format!("{name}.gamma"), Tensor::ones(&[c]))?,
            beta: self.store.add_param(&format!("{name}.beta"), Tensor::zeros(&[c]))?,
            mean: self.store.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[c]))?,
            var: self.store.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[c]))?,
        })
    }

    fn trunk(&mut self, prefix: &str, spec: &ArchitectureSpec) -> Result<Trunk, NnError> {
        spec.validate()?;
        let mut blocks = Vec::with_capacity(spec.layers.len());
        for (i, l) in spec.layers.iter().enumerate() {
            let name = format!("{prefix}{i}");
            blocks.push(self.block(&name, l)?);
        }
        Ok(Trunk { blocks })
    }

    fn block(&mut self, name: &str, l: &LayerSpec) -> Result<Block, NnError> {
        let (ci, co) = (l.in_channels, l.out_channels);
        Ok(match l.kind {
            LayerKind::Conv => Block::Conv {
                conv: self.affine(&format!("{name}.conv"), &[co, ci, l.kernel, l.kernel], l.bias)?,
                stride: l.stride,
                padding: l.padding,
            },
            LayerKind::BatchNorm => Block::BatchNorm(self.norm(&format!("{name}.bn"), ci)?),
            LayerKind::Relu => Block::Relu,
            LayerKind::MaxPool => Block::MaxPool {
                kernel: l.kernel,
                stride: l.stride,
                padding: l.padding,
            },
            LayerKind::AvgPool => Block::AvgPool {
                kernel: l.kernel,
                stride: l.stride,
            },
            LayerKind::ResidualBlock => {
                let k = l.kernel;
                let conv1 = self.affine(&format!("{name}.conv1"), &[co, ci, k, k], false)?;
                let bn1 = self.norm(&format!("{name}.bn1"), co)?;
                let conv2 = self.affine(&format!("{name}.conv2"), &[co, co, k, k], false)?;
                let bn2 = self.norm(&format!("{name}.bn2"), co)?;
                let projection = if ci != co || l.stride != 1 {
                    Some((
                        self.affine(&format!("{name}.proj"), &[co, ci, 1, 1], false)?,
                        self.norm(&format!("{name}.proj_bn"), co)?,
                    ))
                } else {
                    None
                };
                Block::Residual {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    projection,
                    stride: l.stride,
                }
            }
            LayerKind::PoolMixerBlock | LayerKind::AttentionMixerBlock => {
                let hidden = l.out_channels;
                let norm1 = self.norm(&format!("{name}.norm1"), ci)?;
                let attention = if l.kind == LayerKind::AttentionMixerBlock {
                    Some((
                        self.affine(&format!("{name}.query"), &[ci, ci], true)?,
                        self.affine(&format!("{name}.key"), &[ci, ci], true)?,
                    ))
                } else {
                    None
                };
                Block::Mixer {
                    norm1,
                    attention,
                    norm2: self.norm(&format!("{name}.norm2"), ci)?,
                    fc1: self.affine(&format!("{name}.fc1"), &[hidden, ci, 1, 1], true)?,
                    fc2: self.affine(&format!("{name}.fc2"), &[ci, hidden, 1, 1], true)?,
                }
            }
            LayerKind::GlobalAvgPool => Block::GlobalAvgPool,
            LayerKind::Linear => Block::Linear(self.affine(&format!("{name}.linear"), &[co, ci], true)?),
        })
    }
}

#[derive(Debug, Clone)]
enum Body {
    Single {
        spec: ArchitectureSpec,
        trunk: Trunk,
    },
    Multi {
        spec: MultiRegionSpec,
        face: Trunk,
        left: Trunk,
        right: Trunk,
        head: Affine,
    },
}

/// Network input already recorded on the tape.
#[derive(Debug, Clone, Copy)]
pub enum ModelInput {
    Single(Var),
    Regions { face: Var, left: Var, right: Var },
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `N x 2` (pitch, yaw) predictions.
    pub output: Var,
    /// Pooled feature vectors of (face, left, right); empty for single-region models.
    pub features: Vec<Var>,
    /// Output dims after every spec layer of the first trunk.
    pub layer_dims: Vec<Vec<usize>>,
}

/// A built network with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    body: Body,
}

struct Ctx<'a, T> {
    tape: &'a mut Tape<T>,
    binder: &'a mut Binder,
    store: &'a mut ParamStore<T>,
    mode: Mode,
}

impl<T: Scalar> Ctx<'_, T> {
    fn bind(&mut self, id: ParamId) -> Var {
        self.binder.bind(self.tape, self.store, id, self.mode == Mode::Train)
    }

    fn affine_conv(&mut self, x: Var, a: Affine, stride: usize, padding: usize) -> Result<Var, NnError> {
        let w = self.bind(a.weight);
        let b = a.bias.map(|b| self.bind(b));
        Ok(self.tape.conv2d(x, w, b, stride, padding)?)
    }

    fn linear(&mut self, x: Var, a: Affine) -> Result<Var, NnError> {
        let w = self.bind(a.weight);
        let b = a.bias.map(|b| self.bind(b));
        Ok(self.tape.linear(x, w, b)?)
    }

    fn norm(&mut self, x: Var, n: Norm) -> Result<Var, NnError> {
        let g = self.bind(n.gamma);
        let b = self.bind(n.beta);
        let (lo, hi) = (n.mean.0.min(n.var.0), n.mean.0.max(n.var.0));
        let (head, tail) = self.store.buffers.split_at_mut(hi);
        let (first, second) = (head[lo].value.data_mut(), tail[0].value.data_mut());
        let (mean, var) = if n.mean.0 < n.var.0 { (first, second) } else { (second, first) };
        Ok(self.tape.batchnorm2d(x, g, b, mean, var, self.mode.bn())?)
    }

    fn attention(&mut self, n: Var, query: Affine, key: Affine) -> Result<Var, NnError> {
        let d = self.tape.dims(n).to_vec();
        let (batch, c, h, w) = (d[0], d[1], d[2], d[3]);
        let tokens = self.tape.to_tokens(n)?;
        let flat = self.tape.reshape(tokens, &[batch * h * w, c])?;
        let q = self.linear(flat, query)?;
        let k = self.linear(flat, key)?;
        let q = self.tape.reshape(q, &[batch, h * w, c])?;
        let k = self.tape.reshape(k, &[batch, h * w, c])?;
        let scores = self.tape.bmm(q, k, true)?;
        let scores = self.tape.scale(scores, T::from_f64_lossy(1.0 / (c as f64).sqrt()));
        let weights = self.tape.softmax_lastdim(scores);
        let mixed = self.tape.bmm(weights, tokens, false)?;
        Ok(self.tape.from_tokens(mixed, h, w)?)
    }

    fn block(&mut self, x: Var, b: &Block) -> Result<Var, NnError> {
        Ok(match *b {
            Block::Conv { conv, stride, padding } => self.affine_conv(x, conv, stride, padding)?,
            Block::BatchNorm(n) => self.norm(x, n)?,
            Block::Relu => self.tape.relu(x),
            Block::MaxPool { kernel, stride, padding } => self.tape.maxpool2d(x, kernel, stride, padding)?,
            Block::AvgPool { kernel, stride } => self.tape.avgpool2d(x, kernel, stride)?,
            Block::Residual {
                conv1,
                bn1,
                conv2,
                bn2,
                projection,
                stride,
            } => {
                let y = self.affine_conv(x, conv1, stride, 1)?;
                let y = self.norm(y, bn1)?;
                let y = self.tape.relu(y);
                let y = self.affine_conv(y, conv2, 1, 1)?;
                let y = self.norm(y, bn2)?;
                let skip = match projection {
                    Some((p, pn)) => {
                        let s = self.affine_conv(x, p, stride, 0)?;
                        self.norm(s, pn)?
                    }
                    None => x,
                };
                let sum = self.tape.add(y, skip)?;
                self.tape.relu(sum)
            }
            Block::Mixer {
                norm1,
                attention,
                norm2,
                fc1,
                fc2,
            } => {
                let n = self.norm(x, norm1)?;
                let mixed = match attention {
                    Some((q, k)) => self.attention(n, q, k)?,
                    None => {
                        let padded = self.tape.pad2d(n, 1)?;
                        let pooled = self.tape.avgpool2d(padded, 3, 1)?;
                        self.tape.sub(pooled, n)?
                    }
                };
                let x = self.tape.add(x, mixed)?;
                let n = self.norm(x, norm2)?;
                let h = self.affine_conv(n, fc1, 1, 0)?;
                let h = self.tape.relu(h);
                let h = self.affine_conv(h, fc2, 1, 0)?;
                self.tape.add(x, h)?
            }
            Block::GlobalAvgPool => self.tape.global_avg_pool(x)?,
            Block::Linear(a) => self.linear(x, a)?,
        })
    }

    fn trunk(&mut self, x: Var, t: &Trunk, dims: Option<&mut Vec<Vec<usize>>>) -> Result<Var, NnError> {
        let mut x = x;
        let mut dims = dims;
        for b in &t.blocks {
            x = self.block(x, b)?;
            if let Some(d) = dims.as_deref_mut() {
                d.push(self.tape.dims(x).to_vec());
            }
        }
        Ok(x)
    }
}

fn trunk_layers(spec: &ArchitectureSpec) -> Vec<TrunkLayer> {
    let mut out = Vec::new();
    for l in &spec.layers {
        match l.kind {
            LayerKind::Conv | LayerKind::MaxPool => out.push(TrunkLayer::new(l.kind, l.kernel, l.stride, l.padding)),
            LayerKind::AvgPool => out.push(TrunkLayer::new(l.kind, l.kernel, l.stride, 0)),
            LayerKind::ResidualBlock => {
                out.push(TrunkLayer::new(LayerKind::Conv, l.kernel, l.stride, l.padding));
                out.push(TrunkLayer::new(LayerKind::Conv, l.kernel, 1, l.padding));
            }
            LayerKind::PoolMixerBlock => {
                out.push(TrunkLayer::new(LayerKind::AvgPool, 3, 1, 1));
                out.push(TrunkLayer::new(LayerKind::Conv, 1, 1, 0));
                out.push(TrunkLayer::new(LayerKind::Conv, 1, 1, 0));
            }
            LayerKind::AttentionMixerBlock => {
                out.push(TrunkLayer::new(LayerKind::AttentionMixerBlock, 1, 1, 0));
                out.push(TrunkLayer::new(LayerKind::Conv, 1, 1, 0));
                out.push(TrunkLayer::new(LayerKind::Conv, 1, 1, 0));
            }
            LayerKind::GlobalAvgPool | LayerKind::Linear | LayerKind::Relu | LayerKind::BatchNorm => {}
        }
    }
    out
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes a model; initialization is a pure function of `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self, NnError> {
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let body = match config {
            ModelConfig::MiniRes(c) => {
                let spec = minires_spec(c, true)?;
                let trunk = b.trunk("", &spec)?;
                Body::Single { spec, trunk }
            }
            ModelConfig::PoolFormer(c) => {
                let spec = poolformer_spec(c)?;
                let trunk = b.trunk("", &spec)?;
                Body::Single { spec, trunk }
            }
            ModelConfig::MultiRegion(c) => {
                let spec = multiregion_spec(c)?;
                Self::multi_body(&mut b, spec)?
            }
        };
        Ok(Self {
            config: config.clone(),
            store,
            body,
        })
    }

    fn multi_body(b: &mut Builder<'_, T>, spec: MultiRegionSpec) -> Result<Body, NnError> {
        let face = b.trunk("face.", &spec.face_backbone)?;
        let (left, right) = if spec.share_eye_weights {
            let eye = b.trunk("eye.", &spec.eye_backbone)?;
            (eye.clone(), eye)
        } else {
            (b.trunk("left_eye.", &spec.eye_backbone)?, b.trunk("right_eye.", &spec.eye_backbone)?)
        };
        let width = spec.face_backbone.feature_width()? + 2 * spec.eye_backbone.feature_width()?;
        if width != spec.head_in_features {
            return Err(NnError::Config(format!(
                "head expects {} features, branches produce {width}",
                spec.head_in_features
            )));
        }
        let head = b.affine("head", &[spec.head_outputs, spec.head_in_features], true)?;
        Ok(Body::Multi {
            spec,
            face,
            left,
            right,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn is_multi_region(&self) -> bool {
        matches!(self.body, Body::Multi { .. })
    }

    /// Single-region spec, or the face backbone of a multi-region model.
    pub fn architecture(&self) -> &ArchitectureSpec {
        match &self.body {
            Body::Single { spec, .. } => spec,
            Body::Multi { spec, .. } => &spec.face_backbone,
        }
    }

    pub fn multi_region_spec(&self) -> Option<&MultiRegionSpec> {
        match &self.body {
            Body::Multi { spec, .. } => Some(spec),
            Body::Single { .. } => None,
        }
    }

    /// Parameter handles used by the left and right eye branches.
    pub fn eye_param_ids(&self) -> Option<(Vec<ParamId>, Vec<ParamId>)> {
        match &self.body {
            Body::Multi { left, right, .. } => Some((trunk_params(left), trunk_params(right))),
            Body::Single { .. } => None,
        }
    }

    /// Zeroes the regression head so the model predicts (0, 0).
    pub fn zero_head(&mut self) {
        let head = match &self.body {
            Body::Single { trunk, .. } => match trunk.blocks.last() {
                Some(Block::Linear(a)) => *a,
                _ => return,
            },
            Body::Multi { head, .. } => *head,
        };
        for id in [Some(head.weight), head.bias].into_iter().flatten() {
            for v in self.store.param_mut(id).value.data_mut() {
                *v = T::zero();
            }
        }
    }

    /// Windowed layers per trunk in execution order: `[("main", ..)]` or
    /// face, left eye, right eye.
    pub fn list_layers(&self) -> Vec<(String, Vec<TrunkLayer>)> {
        match &self.body {
            Body::Single { spec, .. } => vec![("main".into(), trunk_layers(spec))],
            Body::Multi { spec, .. } => vec![
                ("face".into(), trunk_layers(&spec.face_backbone)),
                ("left_eye".into(), trunk_layers(&spec.eye_backbone)),
                ("right_eye".into(), trunk_layers(&spec.eye_backbone)),
            ],
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        binder: &mut Binder,
        input: ModelInput,
        mode: Mode,
    ) -> Result<ForwardPass, NnError> {
        let mut ctx = Ctx {
            tape,
            binder,
            store: &mut self.store,
            mode,
        };
        let mut layer_dims = Vec::new();
        match (&self.body, input) {
            (Body::Single { trunk, .. }, ModelInput::Single(x)) => {
                let output = ctx.trunk(x, trunk, Some(&mut layer_dims))?;
                Ok(ForwardPass {
                    output,
                    features: Vec::new(),
                    layer_dims,
                })
            }
            (
                Body::Multi {
                    face,
                    left,
                    right,
                    head,
                    ..
                },
                ModelInput::Regions {
                    face: f,
                    left: l,
                    right: r,
                },
            ) => {
                let ff = ctx.trunk(f, face, Some(&mut layer_dims))?;
                let lf = ctx.trunk(l, left, None)?;
                let rf = ctx.trunk(r, right, None)?;
                let cat = ctx.tape.concat(&[ff, lf, rf])?;
                let output = ctx.linear(cat, *head)?;
                Ok(ForwardPass {
                    output,
                    features: vec![ff, lf, rf],
                    layer_dims,
                })
            }
            (Body::Single { .. }, ModelInput::Regions { .. }) => {
                Err(NnError::Input("single-region model given face and eye inputs".into()))
            }
            (Body::Multi { .. }, ModelInput::Single(_)) => {
                Err(NnError::Input("multi-region model needs face, left and right inputs".into()))
            }
        }
    }

    /// Adam step on all parameters bound during the last forward pass.
    pub fn adam_update(&mut self, binder: &Binder, tape: &Tape<T>, lr: f64) -> Result<(), NnError> {
        adam_update(&mut self.store, binder, tape, lr)
    }
}

fn trunk_params(t: &Trunk) -> Vec<ParamId> {
    fn affine(a: &Affine, out: &mut Vec<ParamId>) {
        out.push(a.weight);
        out.extend(a.bias);
    }
    fn norm(n: &Norm, out: &mut Vec<ParamId>) {
        out.push(n.gamma);
        out.push(n.beta);
    }
    let mut out = Vec::new();
    for b in &t.blocks {
        match b {
            Block::Conv { conv, .. } => affine(conv, &mut out),
            Block::BatchNorm(n) => norm(n, &mut out),
            Block::Residual {
                conv1,
                bn1,
                conv2,
                bn2,
                projection,
                ..
            } => {
                affine(conv1, &mut out);
                norm(bn1, &mut out);
                affine(conv2, &mut out);
                norm(bn2, &mut out);
                if let Some((p, pn)) = projection {
                    affine(p, &mut out);
                    norm(pn, &mut out);
                }
            }
            Block::Mixer {
                norm1,
                attention,
                norm2,
                fc1,
                fc2,
            } => {
                norm(norm1, &mut out);
                if let Some((q, k)) = attention {
                    affine(q, &mut out);
                    affine(k, &mut out);
                }
                norm(norm2, &mut out);
                affine(fc1, &mut out);
                affine(fc2, &mut out);
            }
            Block::Linear(a) => affine(a, &mut out),
            Block::Relu | Block::MaxPool { .. } | Block::AvgPool { .. } | Block::GlobalAvgPool => {}
        }
    }
    out
}

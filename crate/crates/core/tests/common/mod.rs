//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use gazelab::data::{prepare_sample, render_sample, sample_name, PrepareConfig, PreparedSet, SynthConfig};
use gazelab::nn::{MiniResConfig, ModelConfig, MultiRegionConfig, PoolFormerConfig};
use gazelab::tensor::gradcheck::{finite_diff_check_inputs, keep_away_from, random_inputs, separate_values, FD_STEP};
use gazelab::tensor::BatchNormMode;
use gazelab::{Tape, Tensor, TensorError, Var};

pub const GRAD_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Direct cross-correlation with zero padding, the six loops spelled out.
pub fn conv2d_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (cout, kh, kw) = (w.dims()[0], w.dims()[2], w.dims()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for s in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b[co]);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[s, ci, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    out[((s * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, cout, oh, ow], out).unwrap()
}

/// Window reduction over every plane; out-of-range taps are skipped (max
/// pooling pads with negative infinity, so skipping is equivalent).
pub fn pool_reference(x: &Tensor<f64>, k: usize, stride: usize, pad: usize, max: bool) -> Tensor<f64> {
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut sum = 0.0;
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let v = x.at(&[s, ch, iy as usize, ix as usize]);
                            best = best.max(v);
                            sum += v;
                        }
                    }
                    out.push(if max { best } else { sum / (k * k) as f64 });
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out).unwrap()
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

pub struct GradCase {
    pub name: &'static str,
    pub dims: Vec<Vec<usize>>,
    /// Moves inputs away from non-differentiable points.
    pub prepare: fn(&mut [Tensor<f64>]),
    pub op: OpFn,
}

fn no_prep(_: &mut [Tensor<f64>]) {}

fn separate_first(t: &mut [Tensor<f64>]) {
    separate_values(&mut t[0], 0.01);
}

fn away_from_zero(t: &mut [Tensor<f64>]) {
    keep_away_from(&mut t[0], 0.0, 0.01);
}

/// Shift the target so every |pred - target| is at least 0.01.
fn separate_l1(t: &mut [Tensor<f64>]) {
    let pred = t[0].data().to_vec();
    for (v, p) in t[1].data_mut().iter_mut().zip(pred) {
        if (*v - p).abs() < 0.01 {
            *v = p + if *v >= p { 0.01 } else { -0.01 };
        }
    }
}

fn case(name: &'static str, dims: &[&[usize]], prepare: fn(&mut [Tensor<f64>]), op: OpFn) -> GradCase {
    GradCase {
        name,
        dims: dims.iter().map(|d| d.to_vec()).collect(),
        prepare,
        op,
    }
}

fn bn(t: &mut Tape<f64>, x: Var, g: Var, b: Var, mode: BatchNormMode) -> Result<Var, TensorError> {
    let c = t.dims(g)[0];
    let (mut rm, mut rv) = (vec![0.1; c], vec![0.8; c]);
    t.batchnorm2d(x, g, b, &mut rm, &mut rv, mode)
}

/// Every differentiable operator plus two composed networks.
pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        case("conv2d", &[&[1, 2, 5, 5], &[3, 2, 3, 3], &[3]], no_prep, Box::new(|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1))),
        case("conv2d_pointwise", &[&[2, 3, 4, 4], &[2, 3, 1, 1]], no_prep, Box::new(|t, v| t.conv2d(v[0], v[1], None, 1, 0))),
        case("maxpool2d", &[&[1, 2, 6, 6]], separate_first, Box::new(|t, v| t.maxpool2d(v[0], 3, 2, 1))),
        case("avgpool2d", &[&[1, 2, 6, 6]], no_prep, Box::new(|t, v| t.avgpool2d(v[0], 2, 2))),
        case("pad2d", &[&[1, 2, 3, 3]], no_prep, Box::new(|t, v| t.pad2d(v[0], 1))),
        case("global_avg_pool", &[&[2, 3, 3, 4]], no_prep, Box::new(|t, v| t.global_avg_pool(v[0]))),
        case("linear", &[&[2, 3], &[4, 3], &[4]], no_prep, Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])))),
        case("bmm", &[&[2, 3, 4], &[2, 4, 5]], no_prep, Box::new(|t, v| t.bmm(v[0], v[1], false))),
        case("bmm_transposed", &[&[2, 3, 4], &[2, 5, 4]], no_prep, Box::new(|t, v| t.bmm(v[0], v[1], true))),
        case("to_tokens", &[&[2, 3, 2, 3]], no_prep, Box::new(|t, v| t.to_tokens(v[0]))),
        case("from_tokens", &[&[2, 6, 3]], no_prep, Box::new(|t, v| t.from_tokens(v[0], 2, 3))),
        case("reshape", &[&[2, 3, 4]], no_prep, Box::new(|t, v| t.reshape(v[0], &[6, 4]))),
        case("concat", &[&[2, 3], &[2, 2], &[2, 4]], no_prep, Box::new(|t, v| t.concat(&[v[0], v[1], v[2]]))),
        case("relu", &[&[3, 4]], away_from_zero, Box::new(|t, v| Ok(t.relu(v[0])))),
        case("add", &[&[2, 3], &[2, 3]], no_prep, Box::new(|t, v| t.add(v[0], v[1]))),
        case("sub", &[&[2, 3], &[2, 3]], no_prep, Box::new(|t, v| t.sub(v[0], v[1]))),
        case("scale", &[&[2, 3]], no_prep, Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        case("softmax_lastdim", &[&[3, 5]], no_prep, Box::new(|t, v| Ok(t.softmax_lastdim(v[0])))),
        case("sum", &[&[3, 4]], no_prep, Box::new(|t, v| Ok(t.sum(v[0])))),
        case("mean", &[&[3, 4]], no_prep, Box::new(|t, v| Ok(t.mean(v[0])))),
        case("weighted_sum", &[&[2, 3]], no_prep, Box::new(|t, v| t.weighted_sum(v[0], vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75]))),
        case("select", &[&[2, 3]], no_prep, Box::new(|t, v| t.select(v[0], 4))),
        case("l1_loss", &[&[4, 2], &[4, 2]], separate_l1, Box::new(|t, v| t.l1_loss(v[0], v[1]))),
        case(
            "batchnorm2d_train",
            &[&[3, 2, 2, 2], &[2], &[2]],
            no_prep,
            Box::new(|t, v| bn(t, v[0], v[1], v[2], BatchNormMode::Train)),
        ),
        case(
            "batchnorm2d_eval",
            &[&[2, 2, 2, 2], &[2], &[2]],
            no_prep,
            Box::new(|t, v| bn(t, v[0], v[1], v[2], BatchNormMode::Eval)),
        ),
        case(
            "residual_network",
            &[&[2, 1, 6, 6], &[2, 1, 3, 3], &[2], &[2], &[2, 2, 3, 3], &[2, 2]],
            no_prep,
            Box::new(|t, v| {
                let c = t.conv2d(v[0], v[1], None, 1, 1)?;
                let n = bn(t, c, v[2], v[3], BatchNormMode::Train)?;
                let r = t.relu(n);
                let p = t.maxpool2d(r, 2, 2, 0)?;
                let c2 = t.conv2d(p, v[4], None, 1, 1)?;
                let s = t.add(c2, p)?;
                let g = t.global_avg_pool(s)?;
                t.linear(g, v[5], None)
            }),
        ),
        case(
            "attention_network",
            &[&[2, 3, 2, 2], &[3, 3], &[3], &[3, 3], &[3]],
            no_prep,
            Box::new(|t, v| {
                let tok = t.to_tokens(v[0])?;
                let flat = t.reshape(tok, &[8, 3])?;
                let q = t.linear(flat, v[1], Some(v[2]))?;
                let k = t.linear(flat, v[3], Some(v[4]))?;
                let q = t.reshape(q, &[2, 4, 3])?;
                let k = t.reshape(k, &[2, 4, 3])?;
                let scores = t.bmm(q, k, true)?;
                let scores = t.scale(scores, 1.0 / 3f64.sqrt());
                let attn = t.softmax_lastdim(scores);
                let mixed = t.bmm(attn, tok, false)?;
                let back = t.from_tokens(mixed, 2, 2)?;
                let pooled = t.pad2d(back, 1)?;
                let pooled = t.avgpool2d(pooled, 3, 1)?;
                t.sub(pooled, back)
            }),
        ),
    ]
}

/// `(op, seed, max relative error)` for every case and seed.
pub fn run_gradient_suite(seeds: &[u64]) -> Vec<(&'static str, u64, f64)> {
    let mut out = Vec::new();
    for c in gradient_cases() {
        let dims: Vec<&[usize]> = c.dims.iter().map(Vec::as_slice).collect();
        for &seed in seeds {
            let mut inputs = random_inputs(&dims, seed);
            (c.prepare)(&mut inputs);
            let report = finite_diff_check_inputs(inputs, seed, FD_STEP, &c.op)
                .unwrap_or_else(|e| panic!("{} seed {seed}: {e}", c.name));
            out.push((c.name, seed, report.max_rel_error));
        }
    }
    out
}

/// Model configurations of the experiment grids, at the given face resolution.
pub fn grid_model_configs(resolution: usize) -> Vec<(String, ModelConfig)> {
    let mut out = Vec::new();
    for stride in [2, 1] {
        out.push((
            format!("minires s{stride}"),
            ModelConfig::MiniRes(MiniResConfig {
                first_stride: stride,
                input_resolution: resolution,
                ..MiniResConfig::default()
            }),
        ));
        for shared in [false, true] {
            out.push((
                format!("multiregion s{stride} shared={shared}"),
                ModelConfig::MultiRegion(MultiRegionConfig {
                    face: MiniResConfig {
                        first_stride: stride,
                        input_resolution: resolution,
                        ..MiniResConfig::default()
                    },
                    eye: MiniResConfig {
                        first_stride: stride,
                        input_resolution: 32,
                        ..MiniResConfig::default()
                    },
                    share_eye_weights: shared,
                }),
            ));
        }
    }
    for stride in [4, 2, 1] {
        out.push((
            format!("poolformer s{stride}"),
            ModelConfig::PoolFormer(PoolFormerConfig {
                patch_stride: stride,
                input_resolution: resolution,
                ..PoolFormerConfig::default()
            }),
        ));
    }
    out
}

/// In-memory prepared split rendered straight from the generator.
pub fn tiny_set(synth: &SynthConfig, split: usize, n: usize, cfg: &PrepareConfig) -> PreparedSet {
    prepared_sets(synth, split, n, std::slice::from_ref(cfg)).pop().unwrap()
}

/// Renders each raw sample once and prepares it under every config.
pub fn prepared_sets(synth: &SynthConfig, split: usize, n: usize, cfgs: &[PrepareConfig]) -> Vec<PreparedSet> {
    let mut sets: Vec<PreparedSet> = cfgs
        .iter()
        .map(|c| PreparedSet {
            config: *c,
            samples: Vec::with_capacity(n),
            skipped: 0,
        })
        .collect();
    for i in 0..n {
        let r = render_sample(synth, split, i).unwrap();
        for set in &mut sets {
            let s = prepare_sample(&sample_name(split, i), &r.image, (r.pitch, r.yaw), &r.pose, synth, &set.config).unwrap();
            set.samples.push(s);
        }
    }
    sets
}

pub fn face_config(resolution: usize) -> PrepareConfig {
    PrepareConfig {
        resolution,
        ..PrepareConfig::default()
    }
}

pub fn small_minires(resolution: usize, width: usize) -> ModelConfig {
    ModelConfig::MiniRes(MiniResConfig {
        input_resolution: resolution,
        width,
        ..MiniResConfig::default()
    })
}

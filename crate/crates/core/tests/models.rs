mod common;

use common::grid_model_configs;
use gazelab::nn::{
    Binder, LayerKind, Mode, Model, ModelConfig, ModelInput, MultiRegionConfig, ParamStore, PoolFormerConfig, Shape,
};
use gazelab::{Tape32, Tensor32};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_image(n: usize, size: usize, seed: u64) -> Tensor32 {
    Tensor32::uniform(&[n, 1, size, size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn parameter_count_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut s = ParamStore::<f32>::new();
    s.add_weight("fc.weight", &[2, 4], &mut rng).unwrap();
    s.add_param("fc.bias", Tensor32::zeros(&[2])).unwrap();
    assert_eq!(s.parameter_count(), 10);
    let mut s = ParamStore::<f32>::new();
    s.add_weight("conv.weight", &[8, 3, 3, 3], &mut rng).unwrap();
    s.add_param("conv.bias", Tensor32::zeros(&[8])).unwrap();
    assert_eq!(s.parameter_count(), 224);
}

#[test]
fn forward_dims_match_declared_shapes_for_grid_models() {
    for res in [64, 128] {
        for (name, cfg) in grid_model_configs(res) {
            let mut model = Model::<f32>::build(&cfg, 3).unwrap();
            let declared = match &cfg {
                ModelConfig::MultiRegion(_) => model.multi_region_spec().unwrap().face_backbone.shapes().unwrap(),
                _ => model.architecture().shapes().unwrap(),
            };
            let mut tape = Tape32::new();
            let mut binder = Binder::new();
            let face = tape.constant(random_image(2, res, 1));
            let input = match &cfg {
                ModelConfig::MultiRegion(m) => ModelInput::Regions {
                    face,
                    left: tape.constant(random_image(2, m.eye.input_resolution, 2)),
                    right: tape.constant(random_image(2, m.eye.input_resolution, 3)),
                },
                _ => ModelInput::Single(face),
            };
            let pass = model.forward(&mut tape, &mut binder, input, Mode::Train).unwrap();
            assert_eq!(tape.dims(pass.output), &[2, 2], "{name}");
            assert_eq!(declared.len(), pass.layer_dims.len(), "{name}");
            for (d, m) in declared.iter().zip(&pass.layer_dims) {
                let want = match *d {
                    Shape::Spatial { channels, height, width } => vec![2, channels, height, width],
                    Shape::Features(f) => vec![2, f],
                };
                assert_eq!(&want, m, "{name} at {res}");
            }
        }
    }
}

#[test]
fn patch_stride_sets_token_grid() {
    let tokens = |stride| {
        let cfg = ModelConfig::PoolFormer(PoolFormerConfig {
            patch_stride: stride,
            ..PoolFormerConfig::default()
        });
        match Model::<f32>::build(&cfg, 0).unwrap().architecture().shapes().unwrap()[0] {
            Shape::Spatial { height, width, .. } => (height, width),
            Shape::Features(_) => unreachable!(),
        }
    };
    assert_eq!(tokens(4), (16, 16));
    assert_eq!(tokens(1).0 * tokens(1).1, 16 * tokens(4).0 * tokens(4).1);
}

#[test]
fn layer_listing_order() {
    let m = Model::<f32>::build(&ModelConfig::MiniRes(Default::default()), 0).unwrap();
    let trunks = m.list_layers();
    assert_eq!(trunks.len(), 1);
    let l = &trunks[0].1;
    assert_eq!((l[0].kind, l[0].kernel, l[0].stride, l[0].padding), (LayerKind::Conv, 7, 2, 3));
    assert_eq!((l[1].kind, l[1].kernel, l[1].stride, l[1].padding), (LayerKind::MaxPool, 3, 2, 1));
    let p = Model::<f32>::build(&ModelConfig::PoolFormer(PoolFormerConfig::default()), 0).unwrap();
    assert_eq!(p.list_layers()[0].1[0].stride, 4);
    let mr = Model::<f32>::build(&ModelConfig::MultiRegion(MultiRegionConfig::default()), 0).unwrap();
    let names: Vec<String> = mr.list_layers().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), 3);
    assert_eq!(names[0], "face");
}

fn eye_features(model: &mut Model<f32>, left: &Tensor32, right: &Tensor32) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut tape = Tape32::new();
    let mut binder = Binder::new();
    let input = ModelInput::Regions {
        face: tape.constant(random_image(1, 64, 7)),
        left: tape.constant(left.clone()),
        right: tape.constant(right.clone()),
    };
    let pass = model.forward(&mut tape, &mut binder, input, Mode::Eval).unwrap();
    (tape.data(pass.features[1]).to_vec(), tape.data(pass.features[2]).to_vec(), tape.data(pass.output).to_vec())
}

#[test]
fn shared_eye_branches_are_symmetric() {
    let cfg = ModelConfig::MultiRegion(MultiRegionConfig {
        share_eye_weights: true,
        ..MultiRegionConfig::default()
    });
    let mut model = Model::<f32>::build(&cfg, 5).unwrap();
    let (a, b) = (random_image(1, 32, 1), random_image(1, 32, 2));
    let (l, r, _) = eye_features(&mut model, &a, &a);
    assert_eq!(l, r);
    let (l1, r1, _) = eye_features(&mut model, &a, &b);
    let (l2, r2, _) = eye_features(&mut model, &b, &a);
    assert_eq!((l1, r1), (r2, l2));
}

#[test]
fn shared_eye_step_updates_one_storage() {
    let cfg = ModelConfig::MultiRegion(MultiRegionConfig {
        share_eye_weights: true,
        ..MultiRegionConfig::default()
    });
    let mut model = Model::<f32>::build(&cfg, 5).unwrap();
    let (left_ids, right_ids) = model.eye_param_ids().unwrap();
    assert_eq!(left_ids, right_ids);
    let before: Vec<Vec<f32>> = left_ids.iter().map(|&id| model.store().param(id).value.data().to_vec()).collect();
    let mut tape = Tape32::new();
    let mut binder = Binder::new();
    let input = ModelInput::Regions {
        face: tape.constant(random_image(2, 64, 1)),
        left: tape.constant(random_image(2, 32, 2)),
        right: tape.constant(random_image(2, 32, 3)),
    };
    let pass = model.forward(&mut tape, &mut binder, input, Mode::Train).unwrap();
    let target = tape.constant(Tensor32::full(&[2, 2], 0.3));
    let loss = tape.l1_loss(pass.output, target).unwrap();
    tape.backward(loss).unwrap();
    model.adam_update(&binder, &tape, 1e-3).unwrap();
    let changed = left_ids
        .iter()
        .zip(&before)
        .filter(|(&id, b)| model.store().param(id).value.data() != b.as_slice())
        .count();
    assert!(changed > 0);
    let unshared = Model::<f32>::build(&ModelConfig::MultiRegion(MultiRegionConfig::default()), 5).unwrap();
    let eye_backbone = Model::<f32>::build(&ModelConfig::MiniRes(MultiRegionConfig::default().eye), 0).unwrap();
    let eye_trunk = eye_backbone.parameter_count() - head_params(&eye_backbone);
    assert_eq!(unshared.parameter_count() - model.parameter_count(), eye_trunk);
}

fn head_params(m: &Model<f32>) -> usize {
    m.store().params().iter().filter(|p| p.name.contains("linear")).map(|p| p.value.numel()).sum()
}

#[test]
fn zero_head_gives_zero_output() {
    let mut model = Model::<f32>::build(&ModelConfig::MultiRegion(MultiRegionConfig::default()), 8).unwrap();
    model.zero_head();
    let (_, _, out) = eye_features(&mut model, &random_image(1, 32, 4), &random_image(1, 32, 5));
    assert_eq!(out, vec![0.0, 0.0]);
}

#[test]
fn wrong_input_kind_rejected() {
    let mut model = Model::<f32>::build(&ModelConfig::MiniRes(Default::default()), 0).unwrap();
    let mut tape = Tape32::new();
    let mut binder = Binder::new();
    let x = tape.constant(random_image(1, 64, 0));
    let input = ModelInput::Regions { face: x, left: x, right: x };
    assert!(model.forward(&mut tape, &mut binder, input, Mode::Eval).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn stride_never_changes_parameter_count(res in prop::sample::select(vec![64usize, 128, 224]), seed in 0u64..4) {
        for (name, cfg) in grid_model_configs(res) {
            let count = |s: usize| Model::<f32>::build(&cfg.with_first_stride(s), seed).unwrap().parameter_count();
            prop_assert_eq!(count(1), count(2), "{}", name);
            if let ModelConfig::PoolFormer(p) = &cfg {
                // The 4x4 patch kernel at stride 4 is the only stride-dependent weight shape.
                prop_assert_eq!(count(4) - count(2), p.width * p.in_channels * (16 - 9));
            }
        }
    }
}

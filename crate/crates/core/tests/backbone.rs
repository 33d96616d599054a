mod common;

use common::*;
use proptest::prelude::*;
use spgnet::backbone::{ContextHead, Encoder, EncoderSpec, FeatureMap, PoolingStrategy, Ratio, PYRAMID_STRIDES};
use spgnet::graph::Graph;
use spgnet::nn::{Ctx, Declarations};
use spgnet::tensor::Shape;

fn run_encoder(spec: EncoderSpec, h: usize, w: usize) -> Vec<(usize, Shape)> {
    let enc = Encoder::new("s1.", spec, None).unwrap();
    let mut decl = Declarations::default();
    enc.declare(&mut decl);
    let store = store_for(&decl, 1);
    let mut g = Graph::new(false);
    let x = g.input(random_tensor(Shape::new(1, 3, h, w), 2));
    let mut ctx = Ctx::new(&mut g, &store);
    let pyr = enc
        .forward(&mut ctx, FeatureMap { var: x, stride: 1 }, &mut |_, _, v| Ok(v))
        .unwrap();
    pyr.iter().map(|f| (f.stride, g.shape(f.var))).collect()
}

#[test]
fn stage_channels_follow_depth_and_width() {
    let r18 = EncoderSpec::resnet(18);
    assert_eq!(r18.stage_channels().unwrap(), [64, 128, 256, 512]);
    let r50 = EncoderSpec::resnet(50);
    assert_eq!(r50.stage_channels().unwrap(), [256, 512, 1024, 2048]);
    let narrow = EncoderSpec::new(50, eighth());
    assert_eq!(narrow.stage_channels().unwrap(), [32, 64, 128, 256]);
    assert_eq!(narrow.stem_width().unwrap(), 8);
}

#[test]
fn unsupported_depth_is_rejected() {
    assert!(EncoderSpec::resnet(19).validate().is_err());
    assert!(Encoder::new("s1.", EncoderSpec::resnet(34), None).is_err());
    assert!(Encoder::new("s1.", EncoderSpec::resnet(152), None).is_ok());
}

#[test]
fn width_ratio_must_divide_channels() {
    let r = Ratio::new(1, 128).unwrap();
    assert!(EncoderSpec::new(18, r).validate().is_err());
    assert!(Ratio::new(1, 0).is_err());
}

#[test]
fn input_below_minimum_is_a_shape_error() {
    let enc = Encoder::new("s1.", EncoderSpec::new(18, eighth()), None).unwrap();
    let mut decl = Declarations::default();
    enc.declare(&mut decl);
    let store = store_for(&decl, 1);
    let mut g = Graph::new(false);
    let x = g.input(random_tensor(Shape::new(1, 3, 7, 20), 2));
    let mut ctx = Ctx::new(&mut g, &store);
    assert!(enc.stem_forward(&mut ctx, x).is_err());
}

#[test]
fn entry_block_needs_stride_four() {
    let enc = Encoder::new("s2.", EncoderSpec::new(18, eighth()), Some(16)).unwrap();
    let mut decl = Declarations::default();
    enc.declare(&mut decl);
    assert!(decl.params.iter().any(|p| p.name == "s2.entry.conv.weight"));
    let store = store_for(&decl, 1);
    let mut g = Graph::new(false);
    let x = g.input(random_tensor(Shape::new(1, 16, 6, 6), 2));
    let mut ctx = Ctx::new(&mut g, &store);
    assert!(enc.forward(&mut ctx, FeatureMap { var: x, stride: 8 }, &mut |_, _, v| Ok(v)).is_err());
    let pyr = enc.forward(&mut ctx, FeatureMap { var: x, stride: 4 }, &mut |_, _, v| Ok(v)).unwrap();
    assert_eq!(g.shape(pyr[0].var), Shape::new(1, 8, 6, 6));
    assert_eq!(g.shape(pyr[3].var), Shape::new(1, 64, 1, 1));
}

#[test]
fn ap_centre_matches_gap_when_kernel_spans_map() {
    let head = ContextHead::new("s1.", 8, 8);
    let mut decl = Declarations::default();
    head.declare(&mut decl);
    let store = store_for(&decl, 3);
    let feat = random_tensor(Shape::new(1, 8, 5, 5), 4);
    let mut outs = Vec::new();
    for p in [PoolingStrategy::Gap, PoolingStrategy::Ap { crop: 160 }] {
        let mut g = Graph::new(false);
        let x = g.input(feat.clone());
        let mut ctx = Ctx::new(&mut g, &store);
        let y = head.forward(&mut ctx, FeatureMap { var: x, stride: 32 }, p).unwrap();
        outs.push(g.value(y.var).clone());
    }
    let (gap, ap) = (&outs[0], &outs[1]);
    assert_eq!(gap.shape(), Shape::new(1, 8, 1, 1));
    assert_eq!(ap.shape(), Shape::new(1, 8, 5, 5));
    for c in 0..8 {
        assert!((ap.at(0, c, 2, 2) - gap.at(0, c, 0, 0)).abs() <= 1e-12);
    }
}

#[test]
fn ap_pooling_averages_in_bounds_positions() {
    let mut feat = random_tensor(Shape::new(1, 2, 6, 7), 5);
    let mut g = Graph::new(false);
    let x = g.input(feat.clone());
    let store = spgnet::nn::ParamStore::new();
    let mut ctx = Ctx::new(&mut g, &store);
    let pooled = ContextHead::pool(&mut ctx, FeatureMap { var: x, stride: 32 }, PoolingStrategy::Ap { crop: 96 }).unwrap();
    let y = g.value(pooled).clone();
    // kernel 3, centred: brute-force window mean over the clipped neighbourhood
    for c in 0..2 {
        for i in 0..6i64 {
            for j in 0..7i64 {
                let (mut sum, mut n) = (0.0, 0.0);
                for di in -1..=1 {
                    for dj in -1..=1 {
                        let (a, b) = (i + di, j + dj);
                        if (0..6).contains(&a) && (0..7).contains(&b) {
                            sum += feat.at(0, c, a as usize, b as usize);
                            n += 1.0;
                        }
                    }
                }
                assert!((y.at(0, c, i as usize, j as usize) - sum / n).abs() < 1e-12);
            }
        }
    }
    // constants stay constant
    feat.data_mut().iter_mut().for_each(|v| *v = 2.5);
    let mut g = Graph::new(false);
    let x = g.input(feat);
    let mut ctx = Ctx::new(&mut g, &store);
    let pooled = ContextHead::pool(&mut ctx, FeatureMap { var: x, stride: 32 }, PoolingStrategy::Ap { crop: 96 }).unwrap();
    assert!(g.value(pooled).data().iter().all(|v| (v - 2.5).abs() < 1e-12));
}

#[test]
fn ap_kernel_rounds_up() {
    assert_eq!(PoolingStrategy::ap_kernel(769).unwrap(), 25);
    assert_eq!(PoolingStrategy::ap_kernel(768).unwrap(), 24);
    assert!(PoolingStrategy::ap_kernel(16).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pyramid_strides_and_sizes(h in 8usize..80, w in 8usize..80) {
        let levels = run_encoder(EncoderSpec::new(18, eighth()), h, w);
        let (mut eh, mut ew) = (h.div_ceil(4), w.div_ceil(4));
        for (i, (stride, s)) in levels.iter().enumerate() {
            if i > 0 {
                eh = eh.div_ceil(2);
                ew = ew.div_ceil(2);
            }
            prop_assert_eq!(*stride, PYRAMID_STRIDES[i]);
            prop_assert_eq!((s.h, s.w), (eh, ew));
            prop_assert_eq!(*stride, 4 << i);
        }
    }
}

#[test]
fn bottleneck_pyramid_at_odd_size() {
    let levels = run_encoder(EncoderSpec::new(50, eighth()), 65, 33);
    let sizes: Vec<(usize, usize, usize)> = levels.iter().map(|(_, s)| (s.c, s.h, s.w)).collect();
    assert_eq!(sizes, vec![(32, 17, 9), (64, 9, 5), (128, 5, 3), (256, 3, 2)]);
}

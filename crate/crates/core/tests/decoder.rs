mod common;

use common::*;
use spgnet::backbone::{EncoderSpec, FeatureMap, PoolingStrategy, PYRAMID_STRIDES};
use spgnet::decoder::{Decoder, DecoderSpec, UpsampleModule};
use spgnet::gradcheck;
use spgnet::graph::Graph;
use spgnet::nn::{Ctx, Declarations, ParamStore};
use spgnet::tensor::{Shape, Tensor};

fn module_store(m: &UpsampleModule, seed: u64) -> ParamStore {
    let mut decl = Declarations::default();
    m.declare(&mut decl);
    store_for(&decl, seed)
}

#[test]
fn bilinear_doubling_matches_closed_form() {
    // a plane linear in (y, x) is reproduced exactly at clamped source coordinates
    let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]);
    let mut g = Graph::new(false);
    let v = g.input(x);
    let up = g.resize_bilinear(v, 4, 4);
    let y = g.value(up);
    for oy in 0..4 {
        for ox in 0..4 {
            let sy = ((oy as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
            let sx = ((ox as f64 + 0.5) * 0.5 - 0.5).clamp(0.0, 1.0);
            assert!((y.at(0, 0, oy, ox) - (2.0 * sy + sx)).abs() < 1e-15, "({oy}, {ox})");
        }
    }
    assert_eq!(y.at(0, 0, 0, 0), 0.0);
    assert_eq!(y.at(0, 0, 3, 3), 3.0);
    assert_eq!(y.at(0, 0, 1, 2), 1.25);
}

#[test]
fn broadcast_context_equals_explicit_constant_map() {
    let m = UpsampleModule::new("s1.", 32, 16, 8);
    let store = module_store(&m, 1);
    let enc = random_tensor(Shape::new(1, 16, 5, 3), 2);
    let ctxv = random_tensor(Shape::new(1, 8, 1, 1), 3);
    let mut tiled = Tensor::zeros(Shape::new(1, 8, 5, 3));
    for c in 0..8 {
        tiled.plane_mut(0, c).iter_mut().for_each(|v| *v = ctxv.at(0, c, 0, 0));
    }
    let mut outs = Vec::new();
    for prev in [ctxv, tiled] {
        let mut g = Graph::new(false);
        let e = g.input(enc.clone());
        let p = g.input(prev);
        let mut ctx = Ctx::new(&mut g, &store);
        let y = m
            .forward(&mut ctx, FeatureMap { var: e, stride: 32 }, Some(FeatureMap { var: p, stride: 32 }))
            .unwrap();
        assert_eq!(y.stride, 32);
        outs.push(g.value(y.var).clone());
    }
    assert_eq!(outs[0].shape(), Shape::new(1, 8, 5, 3));
    assert!(outs[0].max_abs_diff(&outs[1]) < 1e-12);
}

#[test]
fn odd_sizes_interpolate_to_the_encoder_map() {
    let m = UpsampleModule::new("s1.", 8, 16, 8);
    let store = module_store(&m, 4);
    let mut g = Graph::new(false);
    let e = g.input(random_tensor(Shape::new(1, 16, 13, 7), 5));
    let p = g.input(random_tensor(Shape::new(1, 8, 7, 4), 6));
    let mut ctx = Ctx::new(&mut g, &store);
    let y = m
        .forward(&mut ctx, FeatureMap { var: e, stride: 8 }, Some(FeatureMap { var: p, stride: 16 }))
        .unwrap();
    assert_eq!(g.shape(y.var), Shape::new(1, 8, 13, 7));
}

#[test]
fn mismatched_inputs_are_shape_errors() {
    let m = UpsampleModule::new("s1.", 8, 16, 8);
    let store = module_store(&m, 4);
    let mut g = Graph::new(false);
    let e = g.input(random_tensor(Shape::new(1, 16, 6, 6), 5));
    let bad_c = g.input(random_tensor(Shape::new(1, 12, 6, 6), 5));
    let p = g.input(random_tensor(Shape::new(1, 4, 3, 3), 6));
    let mut ctx = Ctx::new(&mut g, &store);
    assert!(m.forward(&mut ctx, FeatureMap { var: e, stride: 16 }, None).is_err());
    assert!(m.forward(&mut ctx, FeatureMap { var: bad_c, stride: 8 }, None).is_err());
    assert!(m
        .forward(&mut ctx, FeatureMap { var: e, stride: 8 }, Some(FeatureMap { var: p, stride: 16 }))
        .is_err());
}

#[test]
fn channels_must_be_a_multiple_of_four() {
    assert!(Decoder::new("s1.", [8, 16, 32, 64], DecoderSpec::upsample(10)).is_err());
    assert!(Decoder::new("s1.", [8, 16, 32, 64], DecoderSpec::upsample(0)).is_err());
}

fn decode(spec: DecoderSpec, h: usize, w: usize) -> (Vec<(usize, Shape)>, Shape, Vec<String>) {
    let channels = EncoderSpec::new(18, eighth()).stage_channels().unwrap();
    let dec = Decoder::new("s1.", channels, spec).unwrap();
    let mut decl = Declarations::default();
    dec.declare(&mut decl);
    let names = decl.params.iter().map(|p| p.name.clone()).collect();
    let store = store_for(&decl, 7);
    let mut g = Graph::new(false);
    let mut pyramid = Vec::new();
    let (mut ph, mut pw) = (h, w);
    for (i, &c) in channels.iter().enumerate() {
        let var = g.input(random_tensor(Shape::new(1, c, ph, pw), 10 + i as u64));
        pyramid.push(FeatureMap { var, stride: PYRAMID_STRIDES[i] });
        (ph, pw) = (ph.div_ceil(2), pw.div_ceil(2));
    }
    let mut ctx = Ctx::new(&mut g, &store);
    let out = dec.forward(&mut ctx, &pyramid, PoolingStrategy::Gap).unwrap();
    assert_eq!(out.out.stride, 4);
    let levels = out.levels.iter().map(|l| (l.stride, g.shape(l.var))).collect();
    (levels, g.shape(out.out.var), names)
}

#[test]
fn upsample_decoder_levels_and_output() {
    let (levels, out, names) = decode(DecoderSpec::upsample(16), 17, 11);
    let expect = [(4, 17, 11), (8, 9, 6), (16, 5, 3), (32, 3, 2)];
    for ((stride, s), (es, eh, ew)) in levels.iter().zip(expect) {
        assert_eq!((*stride, s.c, s.h, s.w), (es, 16, eh, ew));
    }
    assert_eq!(out, Shape::new(1, 16, 17, 11));
    for n in ["s1.context.proj.conv.weight", "s1.decoder.level32.transform.conv1.conv.weight", "s1.decoder.refine.conv.weight"] {
        assert!(names.iter().any(|x| x == n), "{n} missing");
    }
}

#[test]
fn fpn_decoder_levels_and_output() {
    let (levels, out, names) = decode(DecoderSpec::fpn(16), 12, 20);
    assert_eq!(levels.iter().map(|l| l.0).collect::<Vec<_>>(), vec![4, 8, 16, 32]);
    assert_eq!(out, Shape::new(1, 16, 12, 20));
    assert!(names.iter().any(|n| n == "s1.decoder.lateral32.conv.weight"));
    assert!(names.iter().any(|n| n == "s1.decoder.smooth4.conv.weight"));
    assert!(!names.iter().any(|n| n.contains("smooth32") || n.contains("context")));
}

#[test]
fn no_context_variant_drops_the_projection() {
    let mut spec = DecoderSpec::upsample(8);
    spec.global_context = false;
    let (_, out, names) = decode(spec, 8, 8);
    assert_eq!(out.c, 8);
    assert!(!names.iter().any(|n| n.contains("context")));
}

#[test]
fn upsample_gradients_at_sixteen_pixels() {
    let m = UpsampleModule::new("s1.", 4, 8, 8);
    let mut store = module_store(&m, 21);
    store.insert("enc", random_tensor(Shape::new(1, 8, 16, 16), 22), false);
    store.insert("prev", random_tensor(Shape::new(1, 8, 8, 8), 23), false);
    let probe = random_tensor(Shape::new(1, 8, 16, 16), 24);
    let rep = gradcheck::check(&store, true, gradcheck::DEFAULT_EPS, 24, |g, s| {
        let mut ctx = Ctx::new(g, s);
        let e = ctx.param("enc");
        let p = ctx.param("prev");
        let y = m.forward(&mut ctx, FeatureMap { var: e, stride: 4 }, Some(FeatureMap { var: p, stride: 8 }))?;
        Ok(g.dot_const(y.var, probe.clone()))
    })
    .unwrap();
    assert!(rep.passed(gradcheck::DEFAULT_TOLERANCE), "{:?}", rep.worst());
}

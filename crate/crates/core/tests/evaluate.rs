mod common;

use common::*;
use proptest::prelude::*;
use spgnet::assembly::Network;
use spgnet::attention::SpgVariant;
use spgnet::backbone::PoolingStrategy;
use spgnet::datapipe::{Dataset, Normalization};
use spgnet::evaluate::{
    argmax, evaluate_dataset, fuse_multi_scale_flip, predict, renormalize, ConfusionMatrix, EvalStrategy,
    StrategyKind,
};
use spgnet::nn::ParamStore;
use spgnet::profile::{tile_count, tile_offsets, tile_stride};
use spgnet::tensor::{LabelMap, Shape, Tensor};

fn net_and_store(classes: usize, seed: u64) -> (Network, ParamStore) {
    let net = Network::build(&tiny_plan(2, 8, classes, spg(SpgVariant::Sigmoid))).unwrap();
    let store = net.init_params(seed);
    (net, store)
}

fn softmax_oracle(logits: &Tensor) -> Tensor {
    let s = logits.shape();
    let mut out = Tensor::zeros(s);
    for y in 0..s.h {
        for x in 0..s.w {
            let m = (0..s.c).map(|c| logits.at(0, c, y, x)).fold(f64::MIN, f64::max);
            let z: f64 = (0..s.c).map(|c| (logits.at(0, c, y, x) - m).exp()).sum();
            for c in 0..s.c {
                out.set(0, c, y, x, (logits.at(0, c, y, x) - m).exp() / z);
            }
        }
    }
    out
}

fn strategy(kind: StrategyKind, crop: usize) -> EvalStrategy {
    EvalStrategy {
        kind,
        crop,
        ..EvalStrategy::default()
    }
}

#[test]
fn gap_prediction_is_a_softmax_of_the_logits() {
    let (net, store) = net_and_store(3, 1);
    let img = random_tensor(Shape::new(1, 3, 40, 24), 2);
    let p = predict(&net, &store, &img, &EvalStrategy::default()).unwrap();
    let oracle = softmax_oracle(&net.predict_logits(&store, &img, PoolingStrategy::Gap).unwrap());
    assert!(p.max_abs_diff(&oracle) < 1e-14);
}

#[test]
fn tiles_average_where_they_overlap() {
    let (net, store) = net_and_store(3, 3);
    let img = random_tensor(Shape::new(1, 3, 32, 48), 4);
    assert_eq!(tile_offsets(48, 32, 1.0 / 3.0), vec![0, 16]);
    let p = predict(&net, &store, &img, &strategy(StrategyKind::Tiled, 32)).unwrap();
    let left = softmax_oracle(&net.predict_logits(&store, &img.crop(0, 0, 32, 32), PoolingStrategy::Gap).unwrap());
    let right = softmax_oracle(&net.predict_logits(&store, &img.crop(0, 16, 32, 32), PoolingStrategy::Gap).unwrap());
    for c in 0..3 {
        for y in [0, 13, 31] {
            for x in 0..48 {
                let expect = match x {
                    0..16 => left.at(0, c, y, x),
                    16..32 => 0.5 * (left.at(0, c, y, x) + right.at(0, c, y, x - 16)),
                    _ => right.at(0, c, y, x - 16),
                };
                assert!((p.at(0, c, y, x) - expect).abs() < 1e-14, "({c}, {y}, {x})");
            }
        }
    }
}

#[test]
fn one_tile_is_the_whole_image() {
    let (net, store) = net_and_store(3, 5);
    let img = random_tensor(Shape::new(1, 3, 30, 20), 6);
    let tiled = predict(&net, &store, &img, &strategy(StrategyKind::Tiled, 64)).unwrap();
    let whole = predict(&net, &store, &img, &EvalStrategy::default()).unwrap();
    assert!(tiled.bitwise_eq(&whole));
}

#[test]
fn ap_strategy_uses_the_sliding_context() {
    let (net, store) = net_and_store(3, 7);
    let img = random_tensor(Shape::new(1, 3, 96, 96), 8);
    let ap = predict(&net, &store, &img, &strategy(StrategyKind::Ap, 64)).unwrap();
    let oracle = softmax_oracle(&net.predict_logits(&store, &img, PoolingStrategy::Ap { crop: 64 }).unwrap());
    assert!(ap.max_abs_diff(&oracle) < 1e-14);
    let gap = predict(&net, &store, &img, &EvalStrategy::default()).unwrap();
    assert!(ap.max_abs_diff(&gap) > 1e-9);
}

#[test]
fn flipping_the_input_flips_the_fused_prediction() {
    let (net, store) = net_and_store(4, 9);
    let img = random_tensor(Shape::new(1, 3, 33, 27), 10);
    let s = EvalStrategy {
        scales: vec![0.75, 1.0],
        flip: true,
        ..EvalStrategy::default()
    };
    let a = fuse_multi_scale_flip(&net, &store, &img, &s).unwrap();
    let b = fuse_multi_scale_flip(&net, &store, &img.flip_horizontal(), &s).unwrap();
    assert!(a.max_abs_diff(&b.flip_horizontal()) < 1e-12);
}

#[test]
fn fused_maps_are_distributions_at_input_size() {
    let (net, store) = net_and_store(3, 11);
    let img = random_tensor(Shape::new(1, 3, 28, 36), 12);
    let s = EvalStrategy {
        scales: vec![0.5, 1.0, 1.5],
        flip: true,
        ..EvalStrategy::default()
    };
    let p = fuse_multi_scale_flip(&net, &store, &img, &s).unwrap();
    assert_eq!(p.shape(), Shape::new(1, 3, 28, 36));
    for y in 0..28 {
        for x in 0..36 {
            let sum: f64 = (0..3).map(|c| p.at(0, c, y, x)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn repeated_scales_change_nothing() {
    let (net, store) = net_and_store(3, 13);
    let img = random_tensor(Shape::new(1, 3, 24, 24), 14);
    let once = fuse_multi_scale_flip(&net, &store, &img, &EvalStrategy::default()).unwrap();
    let twice = EvalStrategy {
        scales: vec![1.0, 1.0],
        ..EvalStrategy::default()
    };
    let p = fuse_multi_scale_flip(&net, &store, &img, &twice).unwrap();
    assert!(p.max_abs_diff(&once) < 1e-15);
}

#[test]
fn strategies_are_validated() {
    for bad in [
        EvalStrategy { overlap_fraction: 0.0, ..EvalStrategy::default() },
        EvalStrategy { overlap_fraction: 1.0, ..EvalStrategy::default() },
        EvalStrategy { scales: vec![], ..EvalStrategy::default() },
        EvalStrategy { scales: vec![1.0, -0.5], ..EvalStrategy::default() },
        EvalStrategy { crop: 4, ..EvalStrategy::default() },
        strategy(StrategyKind::Ap, 0),
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
    let s: EvalStrategy = toml::from_str("kind = \"tiled\"\nflip = true").unwrap();
    assert_eq!((s.kind, s.crop, s.flip), (StrategyKind::Tiled, 769, true));
}

#[test]
fn argmax_breaks_ties_low_and_renormalize_sums_to_one() {
    let p = Tensor::from_vec(Shape::new(1, 3, 1, 2), vec![0.2, 0.1, 0.5, 0.1, 0.5, 0.1]);
    assert_eq!(argmax(&p).data, vec![1, 0]);
    let mut q = Tensor::from_vec(Shape::new(1, 2, 1, 2), vec![1.0, 0.0, 3.0, 0.0]);
    renormalize(&mut q);
    assert_eq!(q.data(), &[0.25, 0.0, 0.75, 0.0]);
}

#[test]
fn dataset_reports_are_consistent() {
    let (net, store) = net_and_store(3, 15);
    let data = Dataset::open("synth://2/3/3/32", "val").unwrap();
    let s = EvalStrategy::default();
    let rep = evaluate_dataset(&net, &store, &data, &s, &Normalization::default(), 255).unwrap();
    assert_eq!(rep.samples, 3);
    assert_eq!(rep.class_names, vec!["class0", "class1", "class2"]);
    let mut conf = ConfusionMatrix::new(3);
    for i in 0..3 {
        let sample = data.get(i).unwrap();
        let p = predict(&net, &store, &Normalization::default().apply(&sample.image), &s).unwrap();
        conf.accumulate(&argmax(&p), &sample.labels, 255);
    }
    assert_eq!(rep.miou, conf.miou());
    assert_eq!(rep.pixel_accuracy, conf.pixel_accuracy());
    assert_eq!(conf.total(), 3 * 32 * 32);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn miou_matches_set_oracle(seed in 0u64..10_000, classes in 2usize..8, len in 1usize..400) {
        let mut r = rng(seed);
        let gt = random_labels(&mut r, 1, 1, len, classes, 0.1);
        let pred = random_labels(&mut r, 1, 1, len, classes, 0.0);
        let mut m = ConfusionMatrix::new(classes);
        m.accumulate(&pred, &gt, 255);
        let (ious, miou) = miou_oracle(&pred.data, &gt.data, classes, 255);
        prop_assert_eq!(m.per_class_iou(), ious);
        prop_assert_eq!(m.miou(), miou);
    }

    #[test]
    fn tiles_cover_every_pixel(extent in 1usize..3000, crop in 8usize..900, overlap in 0.01f64..0.99) {
        let offs = tile_offsets(extent, crop, overlap);
        let window = crop.min(extent);
        let mut covered = vec![false; extent];
        for &o in &offs {
            prop_assert!(o + window <= extent);
            covered[o..o + window].iter_mut().for_each(|c| *c = true);
        }
        prop_assert!(covered.iter().all(|c| *c));
        prop_assert_eq!(offs[0], 0);
        prop_assert_eq!(*offs.last().unwrap(), extent - window);
        prop_assert!(offs.windows(2).all(|w| w[0] < w[1] && w[1] - w[0] <= tile_stride(crop, overlap)));
        prop_assert_eq!(tile_count(extent, 5, crop, overlap), offs.len());
    }

    #[test]
    fn constant_images_stay_constant_in_labels(v in -1.0f64..1.0) {
        // identical inputs at every scale: the fused argmax matches the single scale one
        let (net, store) = net_and_store(3, 16);
        let img = Tensor::full(Shape::new(1, 3, 16, 16), v);
        let multi = EvalStrategy { scales: vec![1.0, 1.0], flip: false, ..EvalStrategy::default() };
        let a = argmax(&fuse_multi_scale_flip(&net, &store, &img, &multi).unwrap());
        let b = argmax(&predict(&net, &store, &img, &EvalStrategy::default()).unwrap());
        prop_assert_eq!(a, b);
    }
}

#[test]
fn label_maps_must_align() {
    let r = std::panic::catch_unwind(|| {
        let mut m = ConfusionMatrix::new(2);
        m.accumulate(&LabelMap::filled(1, 2, 2, 0), &LabelMap::filled(1, 2, 3, 0), 255);
    });
    assert!(r.is_err());
}

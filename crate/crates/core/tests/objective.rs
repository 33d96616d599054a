mod common;

use common::*;
use proptest::prelude::*;
use spgnet::graph::Graph;
use spgnet::objective::{
    cross_entropy_ignore, multi_stage_loss, ohem_select, ohem_top_k, poly_lr, LossConfig, OhemConfig, OhemMode,
    ScheduleConfig,
};
use spgnet::tensor::{LabelMap, Shape, Tensor};

fn loss_of(logits: &[Tensor], labels: &LabelMap, cfg: &LossConfig) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new(true);
    let vars: Vec<_> = logits.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let sup = vec![true; vars.len()];
    let l = multi_stage_loss(&mut g, &vars, &sup, labels, cfg).unwrap();
    let value = g.value(l.total).data()[0];
    let grads = g.backward(l.total);
    let gs = vars
        .iter()
        .zip(logits)
        .map(|(v, t)| grads.input(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, gs)
}

#[test]
fn uniform_logits_cost_log_four() {
    let logits = Tensor::zeros(Shape::new(1, 4, 3, 5));
    let labels = random_labels(&mut rng(1), 1, 3, 5, 4, 0.0);
    let (per_pixel, mean) = cross_entropy_ignore(&logits, &labels, 255).unwrap();
    assert!((mean - 4f64.ln()).abs() < 1e-12);
    assert!(per_pixel.data().iter().all(|v| (v - 1.3862943611198906).abs() < 1e-12));
}

#[test]
fn confident_correct_logits_cost_nothing() {
    let labels = random_labels(&mut rng(2), 1, 4, 4, 3, 0.0);
    let mut logits = Tensor::zeros(Shape::new(1, 3, 4, 4));
    for y in 0..4 {
        for x in 0..4 {
            logits.set(0, labels.at(0, y, x) as usize, y, x, 60.0);
        }
    }
    let (_, mean) = cross_entropy_ignore(&logits, &labels, 255).unwrap();
    assert!(mean < 1e-20);
}

#[test]
fn all_ignored_gives_zero_loss_and_gradient() {
    let logits = random_tensor(Shape::new(1, 3, 4, 4), 3);
    let labels = LabelMap::filled(1, 4, 4, 255);
    let (per_pixel, mean) = cross_entropy_ignore(&logits, &labels, 255).unwrap();
    assert_eq!(mean, 0.0);
    assert!(per_pixel.data().iter().all(|v| *v == 0.0));
    let (v, g) = loss_of(&[logits], &labels, &LossConfig::default());
    assert_eq!(v, 0.0);
    assert!(g[0].data().iter().all(|x| *x == 0.0));
}

#[test]
fn out_of_range_labels_are_rejected() {
    let logits = random_tensor(Shape::new(1, 3, 2, 2), 4);
    let labels = LabelMap::new(1, 2, 2, vec![0, 1, 3, 255]);
    assert!(cross_entropy_ignore(&logits, &labels, 255).is_err());
}

#[test]
fn ohem_examples() {
    let p = |v: &[f64]| v.iter().map(|x| Some(*x)).collect::<Vec<_>>();
    assert_eq!(ohem_select(&p(&[0.9, 0.6, 0.3, 0.1]), 0.7, 1), vec![false, true, true, true]);
    assert_eq!(ohem_select(&p(&[0.99; 5]), 0.7, 2), vec![true, true, false, false, false]);
    assert_eq!(ohem_select(&p(&[0.99, 0.2, 0.5]), 1.0, 0), vec![true; 3]);
    // ignored pixels are never kept, even to satisfy the floor
    assert_eq!(ohem_select(&[None, Some(0.9), None], 0.7, 3), vec![false, true, false]);
    assert_eq!(ohem_top_k(&p(&[0.5, 0.1, 0.5, 0.05]), 2), vec![false, true, false, true]);
    assert_eq!(ohem_top_k(&p(&[0.5, 0.5, 0.5]), 2), vec![true, true, false]);
}

#[test]
fn min_kept_scales_with_supervised_pixels() {
    let c = OhemConfig::default();
    assert_eq!(c.min_kept_for(8 * 769 * 769), 100_000);
    assert_eq!(c.min_kept_for(8 * 64 * 64), 693);
    assert_eq!(c.min_kept_for(0), 0);
    let fixed = OhemConfig {
        min_kept: Some(5),
        ..c
    };
    assert_eq!(fixed.min_kept_for(1000), 5);
}

#[test]
fn one_stage_loss_is_plain_cross_entropy() {
    let logits = random_tensor(Shape::new(2, 3, 8, 8), 5);
    let labels = random_labels(&mut rng(6), 2, 8, 8, 3, 0.2);
    let (_, mean) = cross_entropy_ignore(&logits, &labels, 255).unwrap();
    let (v, _) = loss_of(&[logits], &labels, &LossConfig::default());
    assert!((v - mean).abs() < 1e-12);
}

#[test]
fn identical_stages_double_the_loss() {
    let logits = random_tensor(Shape::new(1, 4, 4, 4), 7);
    let labels = random_labels(&mut rng(8), 1, 16, 16, 4, 0.1);
    let cfg = LossConfig::default();
    let (one, _) = loss_of(&[logits.clone()], &labels, &cfg);
    let (two, _) = loss_of(&[logits.clone(), logits], &labels, &cfg);
    assert_eq!(two, 2.0 * one);
}

#[test]
fn zero_weight_stage_gets_zero_gradient() {
    let a = random_tensor(Shape::new(1, 4, 4, 4), 9);
    let b = random_tensor(Shape::new(1, 4, 4, 4), 10);
    let labels = random_labels(&mut rng(11), 1, 16, 16, 4, 0.1);
    for ohem in [None, Some(OhemConfig::default())] {
        let cfg = LossConfig {
            stage_weights: vec![0.0, 1.0],
            ohem,
            ..LossConfig::default()
        };
        let (_, g) = loss_of(&[a.clone(), b.clone()], &labels, &cfg);
        assert!(g[0].data().iter().all(|v| *v == 0.0));
        assert!(g[1].norm() > 0.0);
    }
}

#[test]
fn stage_weight_count_must_match() {
    let cfg = LossConfig {
        stage_weights: vec![1.0],
        ..LossConfig::default()
    };
    assert!(cfg.weights(2).is_err());
    let neg = LossConfig {
        stage_weights: vec![-1.0, 1.0],
        ..LossConfig::default()
    };
    assert!(neg.weights(2).is_err());
}

#[test]
fn poly_schedule_examples() {
    let cfg = ScheduleConfig {
        base_lr: 0.01,
        max_iter: 1000,
        power: 0.9,
    };
    assert_eq!(poly_lr(0, &cfg).unwrap(), 0.01);
    assert_eq!(poly_lr(1000, &cfg).unwrap(), 0.0);
    let half = poly_lr(500, &cfg).unwrap();
    assert!((half - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
    assert!((half - 0.0053589).abs() < 5e-8);
    assert!(poly_lr(1001, &cfg).is_err());
    assert!(ScheduleConfig { power: 1.5, ..cfg }.validate().is_err());
    assert!(ScheduleConfig { base_lr: 0.0, ..cfg }.validate().is_err());
}

#[test]
fn ohem_mode_reads_from_toml() {
    let c: OhemConfig = toml::from_str("mode = \"top_k\"\nmin_kept = 10").unwrap();
    assert_eq!(c.mode, OhemMode::TopK);
    let d: OhemConfig = toml::from_str("").unwrap();
    assert_eq!(d, OhemConfig::default());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ohem_matches_sort_oracle(
        probs in prop::collection::vec(prop::option::weighted(0.9, 0.0f64..1.0), 1..2000),
        thr in 0.0f64..=1.0,
        min_kept in 0usize..2100,
    ) {
        prop_assert_eq!(ohem_select(&probs, thr, min_kept), ohem_oracle(&probs, thr, min_kept));
    }

    #[test]
    fn ohem_keeps_a_hardest_prefix(
        probs in prop::collection::vec(prop::option::weighted(0.8, (0u8..10).prop_map(|v| v as f64 / 10.0)), 1..300),
        min_kept in 0usize..320,
    ) {
        let keep = ohem_select(&probs, 0.7, min_kept);
        let supervised = probs.iter().flatten().count();
        let kept = keep.iter().filter(|k| **k).count();
        prop_assert!(kept >= min_kept.min(supervised));
        for (i, p) in probs.iter().enumerate() {
            match p {
                None => prop_assert!(!keep[i]),
                Some(v) if *v < 0.7 => prop_assert!(keep[i]),
                _ => {}
            }
        }
        let max_kept = probs.iter().zip(&keep).filter(|(_, k)| **k).filter_map(|(p, _)| *p).fold(f64::MIN, f64::max);
        let min_dropped = probs.iter().zip(&keep).filter(|(_, k)| !**k).filter_map(|(p, _)| *p).fold(f64::MAX, f64::min);
        prop_assert!(max_kept <= min_dropped);
    }

    #[test]
    fn ignored_pixels_do_not_matter(seed in 0u64..500, use_ohem in any::<bool>()) {
        let mut r = rng(seed);
        let labels = random_labels(&mut r, 1, 8, 8, 3, 0.3);
        let logits = random_tensor(Shape::new(1, 3, 8, 8), seed + 1).map(|v| 3.0 * v);
        let mut mutated = logits.clone();
        for y in 0..8 {
            for x in 0..8 {
                if labels.at(0, y, x) == 255 {
                    for c in 0..3 {
                        mutated.set(0, c, y, x, 10.0 * (c as f64 - 1.0));
                    }
                }
            }
        }
        let cfg = LossConfig {
            ohem: use_ohem.then(|| OhemConfig { min_kept: Some(10), ..OhemConfig::default() }),
            ..LossConfig::default()
        };
        let (a, ga) = loss_of(&[logits], &labels, &cfg);
        let (b, _) = loss_of(&[mutated], &labels, &cfg);
        prop_assert_eq!(a, b);
        for y in 0..8 {
            for x in 0..8 {
                if labels.at(0, y, x) == 255 {
                    prop_assert!((0..3).all(|c| ga[0].at(0, c, y, x) == 0.0));
                }
            }
        }
    }

    #[test]
    fn poly_is_strictly_decreasing(max_iter in 2u64..100_000, power in 0.05f64..=1.0, frac in 0.0f64..1.0) {
        let cfg = ScheduleConfig { base_lr: 0.01, max_iter, power };
        let i = ((max_iter - 1) as f64 * frac) as u64;
        prop_assert!(poly_lr(i + 1, &cfg).unwrap() < poly_lr(i, &cfg).unwrap());
    }
}

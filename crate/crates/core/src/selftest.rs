//! Quick invariant suite behind the `selftest` subcommand.

use crate::assembly::{Network, NetworkPlan};
use crate::attention::{mask_invariant_holds, LinkSpec, SpgConfig, SpgVariant, StageLink};
use crate::backbone::{EncoderSpec, FeatureMap, PoolingStrategy, Ratio};
use crate::decoder::DecoderSpec;
use crate::error::Result;
use crate::evaluate::{fuse_multi_scale_flip, ConfusionMatrix, EvalStrategy, StrategyKind};
use crate::gradcheck;
use crate::graph::Graph;
use crate::nn::{self, Ctx, Declarations, ParamStore};
use crate::objective::ohem_select;
use crate::profile::{profile, tile_count};
use crate::tensor::{LabelMap, Shape, Tensor};
use rand::Rng;

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn tiny_plan(stages: usize, variant: SpgVariant) -> NetworkPlan {
    let enc = EncoderSpec::new(18, Ratio::new(1, 8).expect("valid ratio"));
    let link = LinkSpec::Spg(SpgConfig {
        variant,
        ..SpgConfig::default()
    });
    NetworkPlan::uniform(stages, enc, DecoderSpec::upsample(8), link, 3)
}

pub fn random_tensor(shape: Shape, seed: u64) -> Tensor {
    let mut r = nn::rng(seed, 0);
    let data = (0..shape.len()).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::from_vec(shape, data)
}

fn stride_bookkeeping() -> Result<(bool, String)> {
    let plan = tiny_plan(1, SpgVariant::Sigmoid);
    let report = profile(&plan, 769, 769, PoolingStrategy::Gap)?;
    let stem = report
        .layers
        .iter()
        .find(|l| l.name == "s1.stem.pool")
        .map(|l| l.output_shape);
    Ok((stem == Some([8, 193, 193]), format!("stride-4 map {stem:?}")))
}

fn mask_ranges() -> Result<(bool, String)> {
    let mut ok = true;
    for variant in [SpgVariant::Sigmoid, SpgVariant::Softmax] {
        let link = StageLink::new(1, LinkSpec::Spg(SpgConfig { variant, ..SpgConfig::default() }), 8, 3)?;
        let mut d = Declarations::default();
        link.declare(&mut d);
        let store = ParamStore::initialize(&d, 1);
        let mut g = Graph::new(false);
        let x = g.input(random_tensor(Shape::new(1, 8, 6, 6), 2));
        let mut ctx = Ctx::new(&mut g, &store);
        let b = link.forward(&mut ctx, FeatureMap { var: x, stride: 4 })?;
        ok &= mask_invariant_holds(g.value(b.mask.expect("excite link")), variant);
    }
    Ok((ok, "sigmoid and softmax masks".into()))
}

fn residual_identity() -> Result<(bool, String)> {
    let link = StageLink::new(1, LinkSpec::Spg(SpgConfig::default()), 8, 3)?;
    let mut d = Declarations::default();
    link.declare(&mut d);
    let mut store = ParamStore::initialize(&d, 3);
    store
        .get_mut("spg.stage1.transform.weight")
        .expect("declared")
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = 0.0);
    let xt = random_tensor(Shape::new(1, 8, 5, 5), 4);
    let mut g = Graph::new(false);
    let x = g.input(xt.clone());
    let mut ctx = Ctx::new(&mut g, &store);
    let b = link.forward(&mut ctx, FeatureMap { var: x, stride: 4 })?;
    let got = g.value(b.next_input.var).clone();
    let mut g2 = Graph::new(false);
    let x2 = g2.input(xt);
    let mut ctx2 = Ctx::new(&mut g2, &store);
    let direct = link.out.forward(&mut ctx2, x2);
    let same = got.data().iter().zip(g2.value(direct).data()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((same, "bitwise".into()))
}

fn fusion_normalized() -> Result<(bool, String)> {
    let plan = tiny_plan(2, SpgVariant::Sigmoid);
    let net = Network::build(&plan)?;
    let store = net.init_params(5);
    let image = random_tensor(Shape::new(1, 3, 48, 40), 6);
    let strategy = EvalStrategy {
        kind: StrategyKind::Tiled,
        crop: 32,
        scales: vec![0.75, 1.0],
        flip: true,
        ..EvalStrategy::default()
    };
    let p = fuse_multi_scale_flip(&net, &store, &image, &strategy)?;
    let s = p.shape();
    let mut worst: f64 = 0.0;
    for i in 0..s.plane() {
        let sum: f64 = (0..s.c).map(|c| p.plane(0, c)[i]).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    Ok((worst <= 1e-6 && (s.h, s.w) == (48, 40), format!("max deviation {worst:.2e}")))
}

fn spg_gradient() -> Result<(bool, String)> {
    let link = StageLink::new(1, LinkSpec::Spg(SpgConfig::default()), 8, 3)?;
    let mut d = Declarations::default();
    link.declare(&mut d);
    let mut store = ParamStore::initialize(&d, 7);
    store.insert("input", random_tensor(Shape::new(2, 8, 4, 4), 8), false);
    let probe = random_tensor(Shape::new(2, 8, 4, 4), 9);
    let report = gradcheck::check(&store, true, gradcheck::DEFAULT_EPS, 24, |g, s| {
        let mut ctx = Ctx::new(g, s);
        let x = ctx.param("input");
        let b = link.forward(&mut ctx, FeatureMap { var: x, stride: 4 })?;
        Ok(g.dot_const(b.next_input.var, probe.clone()))
    })?;
    let err = report.max_rel_error();
    Ok((report.passed(gradcheck::DEFAULT_TOLERANCE), format!("max relative error {err:.2e}")))
}

fn ohem_oracle() -> Result<(bool, String)> {
    let mut r = nn::rng(10, 0);
    let mut ok = true;
    for _ in 0..20 {
        let n = r.random_range(1..60);
        let probs: Vec<Option<f64>> = (0..n)
            .map(|_| (r.random::<f64>() > 0.2).then(|| (r.random_range(0..10) as f64) / 10.0))
            .collect();
        let min_kept = r.random_range(0..n + 2);
        let got = ohem_select(&probs, 0.7, min_kept);
        let mut order: Vec<(usize, f64)> = probs.iter().enumerate().filter_map(|(i, p)| p.map(|p| (i, p))).collect();
        order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let below = order.iter().filter(|x| x.1 < 0.7).count();
        let k = below.max(min_kept.min(order.len()));
        let mut want = vec![false; n];
        order[..k].iter().for_each(|&(i, _)| want[i] = true);
        ok &= got == want;
    }
    Ok((ok, "20 random instances".into()))
}

fn miou_example() -> Result<(bool, String)> {
    let gt = LabelMap::new(1, 1, 4, vec![0, 0, 1, 2]);
    let pred = LabelMap::new(1, 1, 4, vec![0, 1, 1, 1]);
    let mut m = ConfusionMatrix::new(3);
    m.accumulate(&pred, &gt, 255);
    let v = m.miou();
    Ok(((v - 5.0 / 18.0).abs() < 1e-12, format!("mIoU {v:.4}")))
}

fn tiling() -> Result<(bool, String)> {
    let n = tile_count(1024, 2048, 769, 1.0 / 3.0);
    Ok((n == 8, format!("{n} tiles")))
}

fn executed_macs() -> Result<(bool, String)> {
    let plan = tiny_plan(2, SpgVariant::Sigmoid);
    let net = Network::build(&plan)?;
    let store = net.init_params(11);
    let mut g = Graph::new(false);
    let x = g.input(random_tensor(Shape::new(1, 3, 64, 48), 12));
    let mut ctx = Ctx::new(&mut g, &store);
    net.forward(&mut ctx, x, PoolingStrategy::Gap)?;
    let symbolic = profile(&plan, 64, 48, PoolingStrategy::Gap)?;
    let params_ok = symbolic.total_params as usize == store.count_params();
    Ok((
        g.macs() == symbolic.total_macs && params_ok,
        format!("executed {} symbolic {}", g.macs(), symbolic.total_macs),
    ))
}

type Check = (&'static str, fn() -> Result<(bool, String)>);

const CHECKS: &[Check] = &[
    ("stride bookkeeping", stride_bookkeeping),
    ("mask ranges", mask_ranges),
    ("zeroed-excite residual identity", residual_identity),
    ("fused probabilities normalized", fusion_normalized),
    ("link gradient check", spg_gradient),
    ("OHEM matches sort oracle", ohem_oracle),
    ("mIoU worked example", miou_example),
    ("tiling count", tiling),
    ("symbolic vs executed MACs", executed_macs),
];

pub fn run() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

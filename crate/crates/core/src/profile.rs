//! Parameter and multiply-accumulate counts by symbolic shape propagation.
//!
//! Nothing here allocates tensors: the plan is walked layer by layer with
//! spatial extents tracked as integers. Only convolutions carry a cost;
//! normalization, activations, pooling and interpolation count zero.

use crate::assembly::NetworkPlan;
use crate::attention::{LinkSpec, SpgVariant};
use crate::backbone::{BlockKind, PoolingStrategy, PYRAMID_STRIDES};
use crate::decoder::DecoderStyle;
use crate::error::{shape, Result};
use serde::Serialize;
use std::fmt::Write;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerRecord {
    pub name: String,
    pub kind: String,
    /// Channels, height, width for a batch of one.
    pub output_shape: [usize; 3],
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ProfileReport {
    pub input_size: [usize; 2],
    pub layers: Vec<LayerRecord>,
    pub total_params: u64,
    pub total_macs: u64,
}

impl ProfileReport {
    pub fn table(&self, per_layer: bool) -> String {
        let mut s = String::new();
        if per_layer {
            let _ = writeln!(s, "{:<52} {:<10} {:>16} {:>12} {:>16}", "layer", "kind", "output", "params", "MACs");
            for l in &self.layers {
                let shape = format!("{}x{}x{}", l.output_shape[0], l.output_shape[1], l.output_shape[2]);
                let _ = writeln!(s, "{:<52} {:<10} {:>16} {:>12} {:>16}", l.name, l.kind, shape, l.params, l.macs);
            }
        }
        let _ = writeln!(
            s,
            "input {}x{}: {:.2}M params, {:.1}B MACs",
            self.input_size[0],
            self.input_size[1],
            self.total_params as f64 / 1e6,
            self.total_macs as f64 / 1e9
        );
        s
    }
}

struct Walker {
    layers: Vec<LayerRecord>,
}

impl Walker {
    fn record(&mut self, name: String, kind: &str, out: [usize; 3], params: u64, macs: u64) {
        self.layers.push(LayerRecord {
            name,
            kind: kind.to_string(),
            output_shape: out,
            params,
            macs,
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool, hw: (usize, usize)) -> (usize, usize) {
        let (h, w) = (hw.0.div_ceil(stride), hw.1.div_ceil(stride));
        let weights = (k * k * cin * cout) as u64;
        let params = weights + if bias { cout as u64 } else { 0 };
        self.record(name.to_string(), "conv", [cout, h, w], params, weights * (h * w) as u64);
        (h, w)
    }

    fn bn(&mut self, name: &str, c: usize, hw: (usize, usize)) {
        self.record(name.to_string(), "batchnorm", [c, hw.0, hw.1], 2 * c as u64, 0);
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, hw: (usize, usize)) -> (usize, usize) {
        let out = self.conv(&format!("{name}.conv"), cin, cout, k, stride, false, hw);
        self.bn(&format!("{name}.bn"), cout, out);
        out
    }

    fn free(&mut self, name: &str, kind: &str, c: usize, hw: (usize, usize)) {
        self.record(name.to_string(), kind, [c, hw.0, hw.1], 0, 0);
    }

    fn bottleneck(&mut self, name: &str, cin: usize, mid: usize, cout: usize, stride: usize, hw: (usize, usize)) -> (usize, usize) {
        self.conv_bn(&format!("{name}.conv1"), cin, mid, 1, 1, hw);
        let out = self.conv_bn(&format!("{name}.conv2"), mid, mid, 3, stride, hw);
        self.conv_bn(&format!("{name}.conv3"), mid, cout, 1, 1, out);
        if cin != cout || stride != 1 {
            self.conv_bn(&format!("{name}.downsample"), cin, cout, 1, stride, hw);
        }
        out
    }

    fn basic(&mut self, name: &str, cin: usize, cout: usize, stride: usize, hw: (usize, usize)) -> (usize, usize) {
        let out = self.conv_bn(&format!("{name}.conv1"), cin, cout, 3, stride, hw);
        self.conv_bn(&format!("{name}.conv2"), cout, cout, 3, 1, out);
        if cin != cout || stride != 1 {
            self.conv_bn(&format!("{name}.downsample"), cin, cout, 1, stride, hw);
        }
        out
    }
}

/// Profile a plan at `input_h x input_w` with the given context pooling.
pub fn profile(plan: &NetworkPlan, input_h: usize, input_w: usize, pooling: PoolingStrategy) -> Result<ProfileReport> {
    plan.validate()?;
    if input_h < 8 || input_w < 8 {
        return shape(format!("input {input_h}x{input_w} is smaller than the 8x8 minimum"));
    }
    let d = plan.decoder_channels();
    let c = plan.num_classes;
    let mut wk = Walker { layers: Vec::new() };
    let s4 = (input_h.div_ceil(4), input_w.div_ceil(4));
    let mut prev_channels: Option<[usize; 4]> = None;

    for (si, sp) in plan.stages.iter().enumerate() {
        let p = format!("s{}.", si + 1);
        let (kind, counts) = sp.encoder.block_layout()?;
        let planes = sp.encoder.planes()?;
        let chans = sp.encoder.stage_channels()?;
        let stem_w = sp.encoder.stem_width()?;

        let mut hw = if si == 0 {
            let h2 = wk.conv_bn(&format!("{p}stem"), 3, stem_w, 7, 2, (input_h, input_w));
            let pooled = (h2.0.div_ceil(2), h2.1.div_ceil(2));
            wk.free(&format!("{p}stem.pool"), "maxpool", stem_w, pooled);
            pooled
        } else {
            wk.conv_bn(&format!("{p}entry"), d, stem_w, 3, 1, s4)
        };
        let mut cin = stem_w;
        let mut level_hw = Vec::new();
        for i in 0..4 {
            for b in 0..counts[i] {
                let stride = if i > 0 && b == 0 { 2 } else { 1 };
                let name = format!("{p}stage{}.block{b}", i + 1);
                hw = match kind {
                    BlockKind::Basic => wk.basic(&name, cin, chans[i], stride, hw),
                    BlockKind::Bottleneck => wk.bottleneck(&name, cin, planes[i], chans[i], stride, hw),
                };
                cin = chans[i];
            }
            if let (Some(prev), true) = (prev_channels, plan.csfa) {
                let base = format!("{p}csfa.level{}", PYRAMID_STRIDES[i]);
                wk.conv_bn(&format!("{base}.enc"), prev[i], chans[i], 1, 1, hw);
                wk.conv_bn(&format!("{base}.dec"), d, chans[i], 1, 1, hw);
            }
            level_hw.push(hw);
        }

        match sp.decoder.style {
            DecoderStyle::Upsample => {
                if sp.decoder.uses_context() {
                    let ctx_hw = match pooling {
                        PoolingStrategy::Gap => (1, 1),
                        PoolingStrategy::Ap { crop } => {
                            PoolingStrategy::ap_kernel(crop)?;
                            level_hw[3]
                        }
                    };
                    wk.free(&format!("{p}context.pool"), "pool", chans[3], ctx_hw);
                    wk.conv_bn(&format!("{p}context.proj"), chans[3], d, 1, 1, ctx_hw);
                }
                for i in (0..4).rev() {
                    let name = format!("{p}decoder.level{}", PYRAMID_STRIDES[i]);
                    wk.bottleneck(&format!("{name}.transform"), chans[i], d / 4, d, 1, level_hw[i]);
                    wk.free(&format!("{name}.upsample"), "resize", d, level_hw[i]);
                    wk.bottleneck(&format!("{name}.fuse"), d, d / 4, d, 1, level_hw[i]);
                }
            }
            DecoderStyle::Fpn => {
                wk.conv_bn(&format!("{p}decoder.lateral32"), chans[3], d, 1, 1, level_hw[3]);
                for i in (0..3).rev() {
                    let s = PYRAMID_STRIDES[i];
                    wk.conv_bn(&format!("{p}decoder.lateral{s}"), chans[i], d, 1, 1, level_hw[i]);
                    wk.free(&format!("{p}decoder.upsample{s}"), "resize", d, level_hw[i]);
                    wk.conv_bn(&format!("{p}decoder.smooth{s}"), d, d, 3, 1, level_hw[i]);
                }
            }
        }
        wk.conv_bn(&format!("{p}decoder.refine"), d, d, 3, 1, s4);

        match sp.link {
            Some(link) => {
                let lp = format!("spg.stage{}", si + 1);
                wk.conv(&format!("{lp}.cls"), d, c, 1, 1, true, s4);
                match link {
                    LinkSpec::Spg(cfg) if cfg.variant == SpgVariant::Sum => {
                        wk.conv(&format!("{lp}.remap"), c, d, 1, 1, true, s4);
                    }
                    LinkSpec::Spg(_) => {
                        wk.conv(&format!("{lp}.mask"), c, d, 1, 1, true, s4);
                        wk.conv(&format!("{lp}.transform"), d, d, 1, 1, false, s4);
                    }
                    LinkSpec::Se { reduction, .. } => {
                        wk.conv(&format!("{lp}.se.fc1"), d, d / reduction, 1, 1, true, (1, 1));
                        wk.conv(&format!("{lp}.se.fc2"), d / reduction, d, 1, 1, true, (1, 1));
                    }
                    LinkSpec::Pass { .. } | LinkSpec::Ge { .. } => {}
                }
                wk.conv_bn(&format!("{lp}.out"), d, d, 1, 1, s4);
            }
            None => {
                wk.conv("head", d, c, 1, 1, true, s4);
                wk.free("upsample", "resize", c, (input_h, input_w));
            }
        }
        prev_channels = Some(chans);
    }

    let total_params = wk.layers.iter().map(|l| l.params).sum();
    let total_macs = wk.layers.iter().map(|l| l.macs).sum();
    Ok(ProfileReport {
        input_size: [input_h, input_w],
        layers: wk.layers,
        total_params,
        total_macs,
    })
}

/// Top-left corners of edge-aligned tiles along one axis: stride
/// `crop - ceil(crop * overlap)`, the last tile shifted inward to end at the
/// border.
pub fn tile_offsets(extent: usize, crop: usize, overlap: f64) -> Vec<usize> {
    if extent <= crop {
        return vec![0];
    }
    let stride = tile_stride(crop, overlap);
    let n = (extent - crop).div_ceil(stride) + 1;
    (0..n).map(|i| (i * stride).min(extent - crop)).collect()
}

pub fn tile_stride(crop: usize, overlap: f64) -> usize {
    let o = (crop as f64 * overlap).ceil() as usize;
    crop.saturating_sub(o).max(1)
}

pub fn tile_count(h: usize, w: usize, crop: usize, overlap: f64) -> usize {
    tile_offsets(h, crop, overlap).len() * tile_offsets(w, crop, overlap).len()
}

//! Guided-attention maps and PNG rendering.

use crate::assembly::Network;
use crate::backbone::PoolingStrategy;
use crate::datapipe::{synth_color, Normalization};
use crate::error::{config, shape, Result};
use crate::evaluate::argmax;
use crate::graph::Graph;
use crate::kernels;
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{LabelMap, Shape, Tensor};
use image::{Rgb, RgbImage};
use std::path::{Path, PathBuf};

pub const DEFAULT_TOP_K: usize = 15;
pub const ALPHA: f64 = 0.5;

/// Indices of the `top_k` largest weights linking `class` to the mask
/// channels, largest first, ties to the smaller index. `weights` is the mask
/// convolution kernel, `D x C x 1 x 1`.
pub fn top_channel_indices(weights: &Tensor, class: usize, top_k: usize) -> Result<Vec<usize>> {
    let s = weights.shape();
    if class >= s.c {
        return config(format!("class {class} out of range for {} classes", s.c));
    }
    if top_k == 0 || top_k > s.n {
        return config(format!("top_k {top_k} must lie in 1..={}", s.n));
    }
    let mut idx: Vec<usize> = (0..s.n).collect();
    idx.sort_by(|&a, &b| {
        let (wa, wb) = (weights.at(a, class, 0, 0), weights.at(b, class, 0, 0));
        wb.total_cmp(&wa).then(a.cmp(&b))
    });
    idx.truncate(top_k);
    Ok(idx)
}

/// Per-pixel Euclidean norm over the selected channels of item 0 of
/// `mask`, before normalization.
pub fn channel_norm(mask: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let s = mask.shape();
    if indices.is_empty() {
        return config("attention map needs at least one channel");
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= s.c) {
        return config(format!("channel {bad} out of range for {} channels", s.c));
    }
    // fixed summation order, so any ordering of `indices` gives the same bits
    let mut order = indices.to_vec();
    order.sort_unstable();
    let mut out = Tensor::zeros(Shape::new(1, 1, s.h, s.w));
    for &c in &order {
        for (o, v) in out.data_mut().iter_mut().zip(mask.plane(0, c)) {
            *o += v * v;
        }
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.sqrt());
    Ok(out)
}

/// Min-max normalized channel norm; a constant map becomes all zeros.
pub fn attention_map(mask: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let mut m = channel_norm(mask, indices)?;
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    m.data_mut()
        .iter_mut()
        .for_each(|v| *v = if range > 0.0 { ((*v - lo) / range).clamp(0.0, 1.0) } else { 0.0 });
    Ok(m)
}

/// Polynomial fit of the Turbo colormap, `t` in `[0, 1]`.
pub fn turbo(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let r = 0.13572138 + t * (4.61539260 + t * (-42.66032258 + t * (132.13108234 + t * (-152.94239396 + t * 59.28637943))));
    let g = 0.09140261 + t * (2.19418839 + t * (4.84296658 + t * (-14.18503333 + t * (4.27729857 + t * 2.82956604))));
    let b = 0.10667330 + t * (12.64194608 + t * (-60.58204836 + t * (110.36276771 + t * (-89.90310912 + t * 27.34824973))));
    [r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0)]
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Blend `map` (resized to the image) over an RGB image in `[0, 1]`.
/// Returns `(overlay, heatmap)`.
pub fn render_overlay(image: &Tensor, map: &Tensor) -> Result<(RgbImage, RgbImage)> {
    let s = image.shape();
    if s.c != 3 {
        return shape("overlay needs an RGB image");
    }
    let m = kernels::resize_bilinear(map, s.h, s.w);
    let mut overlay = RgbImage::new(s.w as u32, s.h as u32);
    let mut heat = RgbImage::new(s.w as u32, s.h as u32);
    for y in 0..s.h {
        for x in 0..s.w {
            let col = turbo(m.at(0, 0, y, x));
            let mut o = [0u8; 3];
            for c in 0..3 {
                o[c] = to_u8((1.0 - ALPHA) * image.at(0, c, y, x) + ALPHA * col[c]);
            }
            overlay.put_pixel(x as u32, y as u32, Rgb(o));
            heat.put_pixel(x as u32, y as u32, Rgb(col.map(to_u8)));
        }
    }
    Ok((overlay, heat))
}

/// Writes `<stem>_overlay.png` and `<stem>_heatmap.png` into `dir`.
pub fn emit_overlay(image: &Tensor, map: &Tensor, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let (overlay, heat) = render_overlay(image, map)?;
    std::fs::create_dir_all(dir)?;
    let a = dir.join(format!("{stem}_overlay.png"));
    let b = dir.join(format!("{stem}_heatmap.png"));
    overlay.save(&a)?;
    heat.save(&b)?;
    Ok(vec![a, b])
}

pub fn render_labels(labels: &LabelMap) -> RgbImage {
    let mut img = RgbImage::new(labels.w as u32, labels.h as u32);
    for y in 0..labels.h {
        for x in 0..labels.w {
            let l = labels.at(0, y, x);
            let col = if l == 255 { [0.0; 3] } else { synth_color(l as usize) };
            img.put_pixel(x as u32, y as u32, Rgb(col.map(to_u8)));
        }
    }
    img
}

/// Prediction panel plus one overlay/heatmap pair per class, from the
/// first link's attention mask.
pub fn visualize(
    network: &Network,
    store: &ParamStore,
    image: &Tensor,
    norm: &Normalization,
    classes: &[usize],
    top_k: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    let Some(link) = network.stages[0].link.as_ref() else {
        return config("visualization needs a multi-stage network");
    };
    let crate::attention::LinkBody::Excite { mask: mask_conv, .. } = &link.body else {
        return config("the first link has no attention mask");
    };
    let weights = store
        .get(&format!("{}.weight", mask_conv.name))
        .expect("validated store")
        .clone();
    let mut g = Graph::new(false);
    let x = g.input(norm.apply(image));
    let out = {
        let mut ctx = Ctx::new(&mut g, store);
        network.forward(&mut ctx, x, PoolingStrategy::Gap)?
    };
    let mask = g.value(out.traces[0].mask.expect("excite link has a mask")).clone();
    let pred = argmax(&kernels::channel_softmax(g.value(out.final_prediction)));
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let p = dir.join("prediction.png");
    render_labels(&pred).save(&p)?;
    written.push(p);
    for &c in classes {
        let idx = top_channel_indices(&weights, c, top_k)?;
        let map = attention_map(&mask, &idx)?;
        written.extend(emit_overlay(image, &map, dir, &format!("class{c:02}"))?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn turbo_runs_dark_through_blue_green_to_red() {
        assert!(turbo(0.0).iter().all(|v| *v < 0.15));
        let blue = turbo(0.1);
        assert!(blue[2] > blue[1] && blue[2] > blue[0]);
        let green = turbo(0.5);
        assert!(green[1] > green[0] && green[1] > green[2]);
        let red = turbo(0.9);
        assert!(red[0] > red[1] && red[0] > red[2]);
        assert_eq!(turbo(1.0)[2], 0.0);
    }
}

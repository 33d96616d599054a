//! Samples, augmentation, the synthetic shape dataset and Cityscapes ingestion.

use crate::error::{config, Error, Result};
use crate::kernels;
use crate::nn;
use crate::objective::IGNORE_LABEL;
use crate::tensor::{LabelMap, Shape, Tensor};
use image::ImageReader;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Default raw-id to train-id table.
pub const CITYSCAPES_LABELS: &str = include_str!("../data/cityscapes_labels.csv");

/// Environment variable naming the root against which relative dataset
/// paths resolve.
pub const DATA_ROOT_ENV: &str = "SPGNET_DATA_ROOT";

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `1 x 3 x h x w`, values in `[0, 1]`.
    pub image: Tensor,
    pub labels: LabelMap,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "d_scale_min")]
    pub scale_min: f64,
    #[serde(default = "d_scale_max")]
    pub scale_max: f64,
    #[serde(default = "d_scale_step")]
    pub scale_step: f64,
    #[serde(default = "d_crop")]
    pub crop: usize,
    #[serde(default = "d_hflip")]
    pub hflip_prob: f64,
}

fn d_scale_min() -> f64 {
    0.5
}
fn d_scale_max() -> f64 {
    2.0
}
fn d_scale_step() -> f64 {
    0.25
}
fn d_crop() -> usize {
    769
}
fn d_hflip() -> f64 {
    0.5
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_min: d_scale_min(),
            scale_max: d_scale_max(),
            scale_step: d_scale_step(),
            crop: d_crop(),
            hflip_prob: d_hflip(),
        }
    }
}

impl AugmentConfig {
    /// `{scale_min, scale_min + step, ..., scale_max}`.
    pub fn scale_grid(&self) -> Result<Vec<f64>> {
        if !(self.scale_min > 0.0) || self.scale_max < self.scale_min {
            return config("scale range must satisfy 0 < scale_min <= scale_max");
        }
        if self.scale_min == self.scale_max {
            return Ok(vec![self.scale_min]);
        }
        if !(self.scale_step > 0.0) {
            return config("scale_step must be positive");
        }
        let n = ((self.scale_max - self.scale_min) / self.scale_step + 1e-9).floor() as usize;
        Ok((0..=n).map(|i| self.scale_min + i as f64 * self.scale_step).collect())
    }
}

/// Per-channel standardization applied after augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    pub fn apply(&self, image: &Tensor) -> Tensor {
        let s = image.shape();
        assert_eq!(s.c, 3, "normalization expects RGB");
        let mut out = image.clone();
        for n in 0..s.n {
            for c in 0..3 {
                let (m, sd) = (self.mean[c], self.std[c]);
                out.plane_mut(n, c).iter_mut().for_each(|v| *v = (*v - m) / sd);
            }
        }
        out
    }
}

/// Nearest-neighbour label resize with the same taps as feature resizing.
pub fn resize_labels(labels: &LabelMap, h: usize, w: usize) -> LabelMap {
    let ty = kernels::nearest_taps(labels.h, h);
    let tx = kernels::nearest_taps(labels.w, w);
    let mut out = LabelMap::filled(labels.n, h, w, 0);
    for n in 0..labels.n {
        for (oy, &iy) in ty.iter().enumerate() {
            for (ox, &ix) in tx.iter().enumerate() {
                out.set(n, oy, ox, labels.at(n, iy, ix));
            }
        }
    }
    out
}

/// Random scale from the grid, horizontal flip, then a random `crop x crop`
/// window; short sides are padded with zeros (image) and the ignore label.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let grid = cfg.scale_grid()?;
    let scale = grid[rng.random_range(0..grid.len())];
    let flip = nn::uniform(rng) < cfg.hflip_prob;
    let s = sample.image.shape();
    let h = ((s.h as f64 * scale).round() as usize).max(1);
    let w = ((s.w as f64 * scale).round() as usize).max(1);
    let mut image = kernels::resize_bilinear(&sample.image, h, w);
    let mut labels = resize_labels(&sample.labels, h, w);
    if flip {
        image = image.flip_horizontal();
        labels = labels.flip_horizontal();
    }
    let crop = cfg.crop;
    let (ph, pw) = (h.max(crop), w.max(crop));
    if (ph, pw) != (h, w) {
        let mut padded = Tensor::zeros(Shape::new(1, 3, ph, pw));
        let mut plabels = LabelMap::filled(1, ph, pw, IGNORE_LABEL);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    padded.set(0, c, y, x, image.at(0, c, y, x));
                }
            }
        }
        for y in 0..h {
            for x in 0..w {
                plabels.set(0, y, x, labels.at(0, y, x));
            }
        }
        image = padded;
        labels = plabels;
    }
    let y0 = rng.random_range(0..=ph - crop);
    let x0 = rng.random_range(0..=pw - crop);
    Ok(Sample {
        image: image.crop(y0, x0, crop, crop),
        labels: labels.crop(y0, x0, crop, crop),
        id: sample.id.clone(),
    })
}

/// RGB colour of class `c` in the synthetic dataset.
pub fn synth_color(c: usize) -> [f64; 3] {
    const BASE: [[f64; 3]; 8] = [
        [0.15, 0.15, 0.15],
        [0.90, 0.20, 0.20],
        [0.20, 0.75, 0.25],
        [0.20, 0.35, 0.90],
        [0.95, 0.85, 0.20],
        [0.80, 0.30, 0.85],
        [0.20, 0.85, 0.85],
        [0.95, 0.55, 0.15],
    ];
    if c < BASE.len() {
        return BASE[c];
    }
    // Golden-angle hues beyond the fixed palette.
    let hue = (c as f64 * 0.618_033_988_75).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.1 + 0.8 * r, 0.1 + 0.8 * g, 0.1 + 0.8 * b]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub count: usize,
    pub classes: usize,
    pub size: usize,
}

impl SynthSpec {
    pub fn id(&self, index: usize) -> String {
        format!("synth-{}-{}-{}-{}-{index}", self.seed, self.count, self.classes, self.size)
    }
}

/// Render synthetic sample `index`: a background class overdrawn with
/// rectangles and disks, later shapes occluding earlier ones.
pub fn synth_sample(spec: &SynthSpec, index: usize) -> Sample {
    assert!(spec.classes >= 2, "synthetic data needs at least two classes");
    let size = spec.size;
    let mut rng = nn::rng(spec.seed, index as u64);
    let background = rng.random_range(0..spec.classes) as u8;
    let mut labels = LabelMap::filled(1, size, size, background);
    let shapes = rng.random_range(2..=5);
    let min_extent = (size / 6).max(1);
    let max_extent = (size / 2).max(min_extent + 1);
    for _ in 0..shapes {
        let class = rng.random_range(0..spec.classes) as u8;
        let disk = rng.random_bool(0.5);
        let cy = rng.random_range(0..size) as f64 + 0.5;
        let cx = rng.random_range(0..size) as f64 + 0.5;
        let a = rng.random_range(min_extent..max_extent) as f64 / 2.0;
        let b = rng.random_range(min_extent..max_extent) as f64 / 2.0;
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = if disk {
                    dy * dy + dx * dx <= a * a
                } else {
                    dy.abs() <= a && dx.abs() <= b
                };
                if inside {
                    labels.set(0, y, x, class);
                }
            }
        }
    }
    let mut image = Tensor::zeros(Shape::new(1, 3, size, size));
    for y in 0..size {
        for x in 0..size {
            let col = synth_color(labels.at(0, y, x) as usize);
            for (c, v) in col.iter().enumerate() {
                image.set(0, c, y, x, *v);
            }
        }
    }
    Sample {
        image,
        labels,
        id: spec.id(index),
    }
}

pub fn synth_dataset(spec: &SynthSpec) -> Vec<Sample> {
    (0..spec.count).map(|i| synth_sample(spec, i)).collect()
}

/// Re-render a synthetic sample from its identifier.
pub fn synth_from_id(id: &str) -> Result<Sample> {
    let parts: Vec<&str> = id.strip_prefix("synth-").unwrap_or("").split('-').collect();
    let nums: Vec<u64> = parts.iter().filter_map(|p| p.parse().ok()).collect();
    if parts.len() != 5 || nums.len() != 5 {
        return Err(Error::Data(format!("not a synthetic identifier: {id}")));
    }
    let spec = SynthSpec {
        seed: nums[0],
        count: nums[1] as usize,
        classes: nums[2] as usize,
        size: nums[3] as usize,
    };
    Ok(synth_sample(&spec, nums[4] as usize))
}

/// Raw label id to train id, plus train-id class names.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTable {
    map: [u8; 256],
    names: BTreeMap<u8, String>,
}

#[derive(Deserialize)]
struct LabelRow {
    name: String,
    id: u8,
    train_id: u8,
}

impl LabelTable {
    pub fn parse(csv_text: &str) -> Result<Self> {
        let mut map = [IGNORE_LABEL; 256];
        let mut names = BTreeMap::new();
        let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
        for row in rdr.deserialize::<LabelRow>() {
            let row = row.map_err(|e| Error::Data(format!("label table: {e}")))?;
            map[row.id as usize] = row.train_id;
            if row.train_id != IGNORE_LABEL {
                names.insert(row.train_id, row.name);
            }
        }
        Ok(LabelTable { map, names })
    }

    pub fn cityscapes() -> Self {
        Self::parse(CITYSCAPES_LABELS).expect("bundled table parses")
    }

    pub fn train_id(&self, raw: u8) -> u8 {
        self.map[raw as usize]
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn class_name(&self, train_id: u8) -> Option<&str> {
        self.names.get(&train_id).map(String::as_str)
    }

    pub fn class_index(&self, name: &str) -> Option<u8> {
        self.names.iter().find(|(_, n)| n.as_str() == name).map(|(k, _)| *k)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairPaths {
    pub id: String,
    pub image: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    Synthetic(SynthSpec),
    Cityscapes { pairs: Vec<PairPaths>, table: LabelTable },
}

impl Dataset {
    /// `synth://seed/count/classes/size`, or a Cityscapes root (relative
    /// paths resolve against the data-root environment variable).
    pub fn open(uri: &str, split: &str) -> Result<Self> {
        if let Some(rest) = uri.strip_prefix("synth://") {
            let nums: Vec<&str> = rest.split('/').collect();
            let parsed: Vec<usize> = nums.iter().filter_map(|n| n.parse().ok()).collect();
            if nums.len() != 4 || parsed.len() != 4 {
                return config(format!("malformed synthetic uri {uri:?}"));
            }
            if parsed[2] < 2 || parsed[3] == 0 {
                return config("synthetic data needs at least two classes and a positive size");
            }
            return Ok(Dataset::Synthetic(SynthSpec {
                seed: parsed[0] as u64,
                count: parsed[1],
                classes: parsed[2],
                size: parsed[3],
            }));
        }
        let path = uri.strip_prefix("cityscapes://").unwrap_or(uri);
        let mut root = PathBuf::from(path);
        if root.is_relative() {
            if let Ok(base) = std::env::var(DATA_ROOT_ENV) {
                root = Path::new(&base).join(root);
            }
        }
        let pairs = cityscapes_pairs(&root, split)?;
        Ok(Dataset::Cityscapes {
            pairs,
            table: LabelTable::cityscapes(),
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Synthetic(s) => s.count,
            Dataset::Cityscapes { pairs, .. } => pairs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Dataset::Synthetic(s) => s.classes,
            Dataset::Cityscapes { table, .. } => table.num_classes(),
        }
    }

    pub fn class_name(&self, c: usize) -> String {
        match self {
            Dataset::Cityscapes { table, .. } => table.class_name(c as u8).unwrap_or("?").to_string(),
            Dataset::Synthetic(_) => format!("class{c}"),
        }
    }

    pub fn get(&self, index: usize) -> Result<Sample> {
        match self {
            Dataset::Synthetic(s) => Ok(synth_sample(s, index)),
            Dataset::Cityscapes { pairs, table } => load_pair(&pairs[index], table),
        }
    }
}

/// Pairs under `leftImg8bit/<split>/<city>/*_leftImg8bit.png` and
/// `gtFine/<split>/<city>/*_gtFine_labelIds.png`, sorted by identifier.
pub fn cityscapes_pairs(root: &Path, split: &str) -> Result<Vec<PairPaths>> {
    let img_root = root.join("leftImg8bit").join(split);
    let gt_root = root.join("gtFine").join(split);
    let read_dir = |p: &Path| {
        std::fs::read_dir(p).map_err(|e| Error::Data(format!("cannot read {}: {e}", p.display())))
    };
    let mut pairs = Vec::new();
    for city in read_dir(&img_root)? {
        let city = city?.path();
        if !city.is_dir() {
            continue;
        }
        let city_name = city.file_name().unwrap_or_default().to_owned();
        for f in read_dir(&city)? {
            let f = f?.path();
            let name = f.file_name().and_then(|n| n.to_str()).unwrap_or("");
            let Some(id) = name.strip_suffix("_leftImg8bit.png") else {
                continue;
            };
            let labels = gt_root.join(&city_name).join(format!("{id}_gtFine_labelIds.png"));
            if !labels.is_file() {
                return Err(Error::Data(format!("missing label map for {id}")));
            }
            pairs.push(PairPaths {
                id: id.to_string(),
                image: f.clone(),
                labels,
            });
        }
    }
    pairs.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(pairs)
}

fn rgb_to_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut image = Tensor::zeros(Shape::new(1, 3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            image.set(0, c, y as usize, x as usize, px.0[c] as f64 / 255.0);
        }
    }
    image
}

/// An image file as a `1 x 3 x h x w` tensor in `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    Ok(rgb_to_tensor(&ImageReader::open(path)?.decode()?.to_rgb8()))
}

pub fn load_pair(pair: &PairPaths, table: &LabelTable) -> Result<Sample> {
    let img = ImageReader::open(&pair.image)?.decode()?.to_rgb8();
    let lab = ImageReader::open(&pair.labels)?.decode()?.to_luma8();
    if img.dimensions() != lab.dimensions() {
        return Err(Error::Data(format!("image and labels of {} differ in size", pair.id)));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let image = rgb_to_tensor(&img);
    let data = lab.as_raw().iter().map(|&r| table.train_id(r)).collect();
    Ok(Sample {
        image,
        labels: LabelMap::new(1, h, w, data),
        id: pair.id.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cityscapes_table() {
        let t = LabelTable::cityscapes();
        assert_eq!(t.train_id(7), 0);
        assert_eq!(t.train_id(0), 255);
        assert_eq!(t.train_id(33), 18);
        assert_eq!(t.num_classes(), 19);
        assert_eq!(t.class_index("car"), Some(13));
    }

    #[test]
    fn default_scale_grid() {
        let g = AugmentConfig::default().scale_grid().unwrap();
        assert_eq!(g, vec![0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0]);
    }

    #[test]
    fn synth_uri() {
        let d = Dataset::open("synth://0/64/4/64", "train").unwrap();
        assert_eq!(d.len(), 64);
        assert_eq!(d.num_classes(), 4);
        assert!(Dataset::open("synth://0/64/1/64", "train").is_err());
        assert!(Dataset::open("synth://x", "train").is_err());
    }
}

//! Dense NCHW tensors of `f64`.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Batch, channel, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Elements per batch item.
    pub fn item(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.len(),
            data.len(),
            "tensor data length does not match shape {shape}"
        );
        Tensor { shape, data }
    }

    /// A 1-D parameter vector stored as `len x 1 x 1 x 1`.
    pub fn vector(data: Vec<f64>) -> Self {
        let shape = Shape::new(data.len(), 1, 1, 1);
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Slice holding one `h x w` plane.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// Slice holding one batch item.
    pub fn item(&self, n: usize) -> &[f64] {
        let s = self.shape.item();
        &self.data[n * s..(n + 1) * s]
    }

    pub fn reshape(mut self, shape: Shape) -> Self {
        assert_eq!(shape.len(), self.data.len(), "reshape changes length");
        self.shape = shape;
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "shape mismatch in zip_map");
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Extract batch item `n` as a tensor with batch size 1.
    pub fn select(&self, n: usize) -> Tensor {
        let s = self.shape;
        Tensor::from_vec(Shape::new(1, s.c, s.h, s.w), self.item(n).to_vec())
    }

    /// Concatenate tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let s = items[0].shape;
        let mut data = Vec::with_capacity(s.item() * items.len());
        let mut n = 0;
        for t in items {
            let ts = t.shape;
            assert_eq!((ts.c, ts.h, ts.w), (s.c, s.h, s.w), "stack shape mismatch");
            data.extend_from_slice(&t.data);
            n += ts.n;
        }
        Tensor::from_vec(Shape::new(n, s.c, s.h, s.w), data)
    }

    /// Copy a window `[y0, y0+h) x [x0, x0+w)` out of every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Tensor {
        let s = self.shape;
        assert!(y0 + h <= s.h && x0 + w <= s.w, "crop window out of bounds");
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, h, w));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = self.plane(n, c);
                let dst = out.plane_mut(n, c);
                for y in 0..h {
                    let row = (y0 + y) * s.w + x0;
                    dst[y * w..(y + 1) * w].copy_from_slice(&src[row..row + w]);
                }
            }
        }
        out
    }

    /// Mirror every plane left-right.
    pub fn flip_horizontal(&self) -> Tensor {
        let s = self.shape;
        let mut out = self.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let dst = out.plane_mut(n, c);
                for row in dst.chunks_mut(s.w) {
                    row.reverse();
                }
            }
        }
        out
    }
}

/// Integer class map of shape `n x h x w`, scanline order within each item.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), n * h * w, "label data length does not match {n}x{h}x{w}");
        LabelMap { n, h, w, data }
    }

    pub fn filled(n: usize, h: usize, w: usize, value: u8) -> Self {
        LabelMap::new(n, h, w, vec![value; n * h * w])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u8) {
        self.data[(n * self.h + y) * self.w + x] = v;
    }

    pub fn item(&self, n: usize) -> LabelMap {
        let p = self.h * self.w;
        LabelMap::new(1, self.h, self.w, self.data[n * p..(n + 1) * p].to_vec())
    }

    pub fn stack(items: &[LabelMap]) -> LabelMap {
        assert!(!items.is_empty(), "cannot stack zero label maps");
        let (h, w) = (items[0].h, items[0].w);
        let mut data = Vec::new();
        let mut n = 0;
        for it in items {
            assert_eq!((it.h, it.w), (h, w), "label stack size mismatch");
            data.extend_from_slice(&it.data);
            n += it.n;
        }
        LabelMap::new(n, h, w, data)
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> LabelMap {
        assert!(y0 + h <= self.h && x0 + w <= self.w, "label crop out of bounds");
        let mut out = LabelMap::filled(self.n, h, w, 0);
        for n in 0..self.n {
            for y in 0..h {
                for x in 0..w {
                    out.set(n, y, x, self.at(n, y0 + y, x0 + x));
                }
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.w) {
            row.reverse();
        }
        out
    }
}

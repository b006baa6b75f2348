//! Dense row-major arrays in double precision.

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;

/// A rank 1–4 array with contiguous row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return shape_err(format!("rank must be 1..=4, got {}", shape.len()));
        }
        if shape.iter().any(|&d| d == 0) {
            return shape_err(format!("extents must be positive, got {shape:?}"));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        check_finite(&self.data, what)
    }
}

pub(crate) fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Numeric(format!(
            "{what} has non-finite value {} at flat index {i}",
            data[i]
        ))),
        None => Ok(()),
    }
}

/// Height × width × channels array; channel index varies fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return shape_err(format!("feature map extents must be positive, got {h}x{w}x{c}"));
        }
        if data.len() != h * w * c {
            return shape_err(format!(
                "{h}x{w}x{c} feature map needs {} values, got {}",
                h * w * c,
                data.len()
            ));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self::filled(h, w, c, 0.0)
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        assert!(h > 0 && w > 0 && c > 0, "feature map extents must be positive");
        Self {
            h,
            w,
            c,
            data: vec![value; h * w * c],
        }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out.data[(y * w + x) * c + ch] = f(y, x, ch);
                }
            }
        }
        out
    }

    /// Entries drawn i.i.d. from `N(0, scale²)`.
    pub fn random_normal(h: usize, w: usize, c: usize, scale: f64, rng: &mut Rng) -> Self {
        let mut out = Self::zeros(h, w, c);
        for v in &mut out.data {
            *v = scale * rng.normal();
        }
        out
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, ch: usize) -> usize {
        (y * self.w + x) * self.c + ch
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[self.index(y, x, ch)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, ch: usize, value: f64) {
        let i = self.index(y, x, ch);
        self.data[i] = value;
    }

    /// Channel vector at one spatial position.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.w + x) * self.c;
        &self.data[start..start + self.c]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let start = (y * self.w + x) * self.c;
        &mut self.data[start..start + self.c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scaled(&self, s: f64) -> FeatureMap {
        self.map(|v| v * s)
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &FeatureMap, s: f64) -> Result<()> {
        self.ensure_congruent(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn ensure_congruent(&self, other: &FeatureMap, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return shape_err(format!(
                "{what}: {:?} and {:?} are not congruent",
                self.dims(),
                other.dims()
            ));
        }
        Ok(())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        check_finite(&self.data, what)
    }

    /// Concatenates maps of equal width and channel count along the height axis.
    pub fn stack_rows(maps: &[FeatureMap]) -> Result<FeatureMap> {
        let Some(first) = maps.first() else {
            return shape_err("stack_rows needs at least one map");
        };
        let (w, c) = (first.w, first.c);
        let mut data = Vec::new();
        let mut h = 0;
        for m in maps {
            if m.w != w || m.c != c {
                return shape_err(format!(
                    "stack_rows: width/channels {}x{} differ from {w}x{c}",
                    m.w, m.c
                ));
            }
            h += m.h;
            data.extend_from_slice(&m.data);
        }
        FeatureMap::new(h, w, c, data)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: vec![self.h, self.w, self.c],
            data: self.data.clone(),
        }
    }
}

impl TryFrom<Tensor> for FeatureMap {
    type Error = Error;

    fn try_from(t: Tensor) -> Result<Self> {
        match *t.shape() {
            [h, w, c] => FeatureMap::new(h, w, c, t.into_data()),
            _ => shape_err(format!("feature map needs rank 3, got {:?}", t.shape())),
        }
    }
}

impl From<FeatureMap> for Tensor {
    fn from(f: FeatureMap) -> Self {
        Tensor {
            shape: vec![f.h, f.w, f.c],
            data: f.data,
        }
    }
}

/// Rank-2 integer array, used for labels and predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    h: usize,
    w: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != h * w {
            return shape_err(format!("{h}x{w} label map needs {} values, got {}", h * w, data.len()));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, value: u8) -> Self {
        Self {
            h,
            w,
            data: vec![value; h * w],
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

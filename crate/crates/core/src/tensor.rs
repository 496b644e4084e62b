//! Dense feature maps and filters plus the reference (oracle) operations:
//! direct convolution, ReLU, pooling, im2col lowering and sparsity.
//!
//! Every convolution in this crate is "valid" (no padding). Window counts
//! use floor division, so trailing rows/columns that cannot host a full
//! window are dropped.

use serde::{Deserialize, Serialize};

use crate::metrics::OpCount;
use crate::{Error, Result, Scalar};

/// Dense multi-channel 2-D tensor, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        check_positive(&[("channels", channels), ("height", height), ("width", width)])?;
        let expected = channels * height * width;
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "feature map {channels}x{height}x{width} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![T::zero(); channels * height * width],
        )
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(
            channels,
            height,
            width,
            vec![value; channels * height * width],
        )
    }

    /// Builds a map by evaluating `f(channel, y, x)` at every position.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    values.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, values)
    }

    /// Single-channel map from nested rows.
    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(
            1,
            height,
            width,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    #[inline]
    pub fn offset(&self, c: usize, y: usize, x: usize) -> usize {
        debug_assert!(c < self.channels && y < self.height && x < self.width);
        (c * self.height + y) * self.width + x
    }

    /// Inverse of [`offset`](Self::offset).
    #[inline]
    pub fn coords(&self, offset: usize) -> (usize, usize, usize) {
        let plane = self.height * self.width;
        (
            offset / plane,
            (offset % plane) / self.width,
            offset % self.width,
        )
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.values[self.offset(c, y, x)]
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let plane = self.height * self.width;
        &self.values[c * plane..(c + 1) * plane]
    }

    /// Extracts one channel as a single-channel map.
    pub fn channel_map(&self, c: usize) -> Result<Self> {
        if c >= self.channels {
            return Err(Error::Shape(format!(
                "channel {c} out of range ({})",
                self.channels
            )));
        }
        Self::new(1, self.height, self.width, self.channel(c).to_vec())
    }

    /// Stacks equally sized maps along the channel axis.
    pub fn stack(maps: &[FeatureMap<T>]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero maps".into()))?;
        let (h, w) = (first.height, first.width);
        if maps.iter().any(|m| m.height != h || m.width != w) {
            return Err(Error::Shape("stacked maps differ in height/width".into()));
        }
        let channels = maps.iter().map(|m| m.channels).sum();
        let values = maps.iter().flat_map(|m| m.values.iter().copied()).collect();
        Self::new(channels, h, w, values)
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Self {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn cast<U: Scalar>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|v| U::from(*v).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|v| !v.is_exact_zero()).count()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Largest absolute elementwise difference, or an error on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "compare {}x{}x{} with {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a.to_f64().unwrap_or(f64::NAN) - b.to_f64().unwrap_or(f64::NAN)).abs())
            .fold(0.0, f64::max))
    }

    /// Elementwise bit equality (distinguishes `+0.0` from `-0.0`).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.same_shape(other)
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.integer_decode() == b.integer_decode())
    }
}

/// Convolution kernel for one output channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter<T = f32> {
    channels: usize,
    k_h: usize,
    k_w: usize,
    weights: Vec<T>,
}

impl<T: Scalar> Filter<T> {
    pub fn new(channels: usize, k_h: usize, k_w: usize, weights: Vec<T>) -> Result<Self> {
        check_positive(&[("channels", channels), ("k_h", k_h), ("k_w", k_w)])?;
        let expected = channels * k_h * k_w;
        if weights.len() != expected {
            return Err(Error::Shape(format!(
                "filter {channels}x{k_h}x{k_w} needs {expected} weights, got {}",
                weights.len()
            )));
        }
        Ok(Self {
            channels,
            k_h,
            k_w,
            weights,
        })
    }

    pub fn from_fn(
        channels: usize,
        k_h: usize,
        k_w: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut weights = Vec::with_capacity(channels * k_h * k_w);
        for c in 0..channels {
            for i in 0..k_h {
                for j in 0..k_w {
                    weights.push(f(c, i, j));
                }
            }
        }
        Self::new(channels, k_h, k_w, weights)
    }

    /// Reinterprets a feature map as a filter (the CLI stores kernels as FMAP files).
    pub fn from_map(map: &FeatureMap<T>) -> Self {
        Self {
            channels: map.channels(),
            k_h: map.height(),
            k_w: map.width(),
            weights: map.values().to_vec(),
        }
    }

    pub fn to_map(&self) -> FeatureMap<T> {
        FeatureMap {
            channels: self.channels,
            height: self.k_h,
            width: self.k_w,
            values: self.weights.clone(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn k_h(&self) -> usize {
        self.k_h
    }

    pub fn k_w(&self) -> usize {
        self.k_w
    }

    /// Flattened weights, channel-major then row-major.
    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> T {
        self.weights[(c * self.k_h + i) * self.k_w + j]
    }

    pub fn cast<U: Scalar>(&self) -> Filter<U> {
        Filter {
            channels: self.channels,
            k_h: self.k_h,
            k_w: self.k_w,
            weights: self
                .weights
                .iter()
                .map(|v| U::from(*v).unwrap_or_else(U::nan))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub stride: usize,
}

impl ConvConfig {
    pub fn new(stride: usize) -> Result<Self> {
        check_positive(&[("convolution stride", stride)])?;
        Ok(Self { stride })
    }
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self { stride: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Mean,
}

impl std::str::FromStr for PoolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolMode::Max),
            "mean" => Ok(PoolMode::Mean),
            other => Err(Error::Config(format!("unknown pooling mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    pub mode: PoolMode,
}

impl PoolConfig {
    pub fn new(width: usize, height: usize, stride: usize, mode: PoolMode) -> Result<Self> {
        check_positive(&[
            ("pool width", width),
            ("pool height", height),
            ("pool stride", stride),
        ])?;
        Ok(Self {
            width,
            height,
            stride,
            mode,
        })
    }

    pub fn max(width: usize, height: usize, stride: usize) -> Result<Self> {
        Self::new(width, height, stride, PoolMode::Max)
    }

    pub fn mean(width: usize, height: usize, stride: usize) -> Result<Self> {
        Self::new(width, height, stride, PoolMode::Mean)
    }

    pub fn window_len(&self) -> usize {
        self.width * self.height
    }
}

/// Shape of one convolution: input map, kernel and stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn of<T: Scalar>(map: &FeatureMap<T>, filter: &Filter<T>, cfg: ConvConfig) -> Result<Self> {
        if map.channels() != filter.channels() {
            return Err(Error::Shape(format!(
                "map has {} channels but filter has {}",
                map.channels(),
                filter.channels()
            )));
        }
        let g = Self {
            channels: map.channels(),
            in_h: map.height(),
            in_w: map.width(),
            k_h: filter.k_h(),
            k_w: filter.k_w(),
            stride: cfg.stride,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        check_positive(&[
            ("channels", self.channels),
            ("input height", self.in_h),
            ("input width", self.in_w),
            ("kernel height", self.k_h),
            ("kernel width", self.k_w),
            ("convolution stride", self.stride),
        ])?;
        conv_output_dims(self.in_w, self.in_h, self.k_w, self.k_h, self.stride).map(|_| ())
    }

    /// `(o_w, o_h)`; assumes [`validate`](Self::validate) passed.
    pub fn out_dims(&self) -> (usize, usize) {
        (
            (self.in_w - self.k_w) / self.stride + 1,
            (self.in_h - self.k_h) / self.stride + 1,
        )
    }

    pub fn out_w(&self) -> usize {
        self.out_dims().0
    }

    pub fn out_h(&self) -> usize {
        self.out_dims().1
    }

    /// Elements in one (all-channel) convolution window.
    pub fn window_len(&self) -> usize {
        self.channels * self.k_h * self.k_w
    }

    pub fn input_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }
}

/// Convolution followed by pooling over the convolution output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvPoolGeometry {
    pub conv: ConvGeometry,
    pub pool: PoolConfig,
}

impl ConvPoolGeometry {
    pub fn validate(&self) -> Result<()> {
        self.conv.validate()?;
        self.pool_out_dims().map(|_| ())
    }

    /// `(width, height)` of the pooled output under floor semantics.
    pub fn pool_out_dims(&self) -> Result<(usize, usize)> {
        let (o_w, o_h) = self.conv.out_dims();
        let p = &self.pool;
        check_positive(&[
            ("pool width", p.width),
            ("pool height", p.height),
            ("pool stride", p.stride),
        ])?;
        if p.width > o_w || p.height > o_h {
            return Err(Error::Dimension(format!(
                "pool window {}x{} does not fit in convolution output {o_h}x{o_w}",
                p.height, p.width
            )));
        }
        Ok((
            (o_w - p.width) / p.stride + 1,
            (o_h - p.height) / p.stride + 1,
        ))
    }
}

pub(crate) fn check_positive(fields: &[(&str, usize)]) -> Result<()> {
    match fields.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(Error::Config(format!("{name} must be positive"))),
        None => Ok(()),
    }
}

/// Output width and height of a valid convolution.
pub fn conv_output_dims(
    i_w: usize,
    i_h: usize,
    k_w: usize,
    k_h: usize,
    c_s: usize,
) -> Result<(usize, usize)> {
    check_positive(&[
        ("kernel width", k_w),
        ("kernel height", k_h),
        ("convolution stride", c_s),
    ])?;
    if k_w > i_w || k_h > i_h {
        return Err(Error::Dimension(format!(
            "kernel {k_h}x{k_w} does not fit in map {i_h}x{i_w}"
        )));
    }
    Ok(((i_w - k_w) / c_s + 1, (i_h - k_h) / c_s + 1))
}

/// Reference direct convolution producing one output channel.
///
/// Accumulates channel-major, then row-major within the window, into a
/// single accumulator. With counters attached, every multiply is tallied and
/// every add after the first product of an output (`C*k_w*k_h - 1` per output).
pub fn dense_conv<T: Scalar>(
    map: &FeatureMap<T>,
    filter: &Filter<T>,
    cfg: ConvConfig,
    counters: Option<&mut OpCount>,
) -> Result<FeatureMap<T>> {
    let g = ConvGeometry::of(map, filter, cfg)?;
    let (o_w, o_h) = g.out_dims();
    let s = g.stride;
    let mut out = Vec::with_capacity(o_w * o_h);
    let (mut muls, mut adds) = (0u64, 0u64);
    for y in 0..o_h {
        for x in 0..o_w {
            let mut acc = T::zero();
            let mut first = true;
            for c in 0..g.channels {
                for i in 0..g.k_h {
                    for j in 0..g.k_w {
                        let prod = map.get(c, y * s + i, x * s + j) * filter.get(c, i, j);
                        muls += 1;
                        if first {
                            acc = prod;
                            first = false;
                        } else {
                            acc += prod;
                            adds += 1;
                        }
                    }
                }
            }
            out.push(acc);
        }
    }
    if let Some(ops) = counters {
        ops.multiplications += muls;
        ops.additions += adds;
    }
    FeatureMap::new(1, o_h, o_w, out)
}

/// Elementwise `max(x, 0)`; negative zero becomes positive zero.
pub fn relu<T: Scalar>(map: &FeatureMap<T>) -> FeatureMap<T> {
    map.map(relu_scalar)
}

#[inline]
pub(crate) fn relu_scalar<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

/// Channel-wise pooling with floor window counts.
pub fn pool<T: Scalar>(map: &FeatureMap<T>, cfg: PoolConfig) -> Result<FeatureMap<T>> {
    check_positive(&[
        ("pool width", cfg.width),
        ("pool height", cfg.height),
        ("pool stride", cfg.stride),
    ])?;
    if cfg.width > map.width() || cfg.height > map.height() {
        return Err(Error::Dimension(format!(
            "pool window {}x{} does not fit in map {}x{}",
            cfg.height,
            cfg.width,
            map.height(),
            map.width()
        )));
    }
    let o_w = (map.width() - cfg.width) / cfg.stride + 1;
    let o_h = (map.height() - cfg.height) / cfg.stride + 1;
    let n = T::from_usize(cfg.window_len()).unwrap_or_else(T::nan);
    FeatureMap::from_fn(map.channels(), o_h, o_w, |c, y, x| {
        let window = (0..cfg.height)
            .flat_map(|i| (0..cfg.width).map(move |j| (i, j)))
            .map(|(i, j)| map.get(c, y * cfg.stride + i, x * cfg.stride + j));
        match cfg.mode {
            PoolMode::Max => window.fold(T::neg_infinity(), T::max),
            PoolMode::Mean => {
                let mut sum = T::zero();
                for v in window {
                    sum += v;
                }
                sum / n
            }
        }
    })
}

/// im2col lowering: one row per output position, one column per window element.
#[derive(Debug, Clone, PartialEq)]
pub struct Im2colMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<T>,
}

impl<T: Scalar> Im2colMatrix<T> {
    pub fn row(&self, r: usize) -> &[T] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// Row-by-row dot product with `vector`, accumulated left to right.
    pub fn matvec(&self, vector: &[T]) -> Result<Vec<T>> {
        if vector.len() != self.cols {
            return Err(Error::Shape(format!(
                "vector length {} != {} columns",
                vector.len(),
                self.cols
            )));
        }
        Ok((0..self.rows)
            .map(|r| {
                let mut acc = T::zero();
                for (a, b) in self.row(r).iter().zip(vector) {
                    acc += *a * *b;
                }
                acc
            })
            .collect())
    }

    pub fn zero_fraction(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.iter().filter(|v| v.is_exact_zero()).count() as f64 / self.values.len() as f64
    }
}

/// Extends every convolution window of `map` into one matrix row.
pub fn im2col_extend<T: Scalar>(
    map: &FeatureMap<T>,
    k_h: usize,
    k_w: usize,
    cfg: ConvConfig,
) -> Result<Im2colMatrix<T>> {
    let (o_w, o_h) = conv_output_dims(map.width(), map.height(), k_w, k_h, cfg.stride)?;
    let s = cfg.stride;
    let cols = map.channels() * k_h * k_w;
    let mut values = Vec::with_capacity(o_w * o_h * cols);
    for y in 0..o_h {
        for x in 0..o_w {
            for c in 0..map.channels() {
                for i in 0..k_h {
                    for j in 0..k_w {
                        values.push(map.get(c, y * s + i, x * s + j));
                    }
                }
            }
        }
    }
    Ok(Im2colMatrix {
        rows: o_w * o_h,
        cols,
        values,
    })
}

/// Fraction of exactly-zero elements.
pub fn sparsity<T: Scalar>(map: &FeatureMap<T>) -> f64 {
    let zeros = map.len() - map.nonzero_count();
    zeros as f64 / map.len() as f64
}

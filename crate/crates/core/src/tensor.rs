//! Dense containers shared by every stage of the benchmark, plus the handful
//! of low-level operations built directly on them: min-max normalization,
//! top-k pixel selection, mean-value occlusion, bilinear resampling and
//! Pearson correlation.
//!
//! All images are stored channel-major (`[c][y][x]`, row-major inside a
//! channel) in `f64`.

use crate::error::{Error, Result};

/// Guard added to every ratio denominator in the metric suite.
pub const EPSILON: f64 = 1e-6;

/// Number of colour channels of every [`Image`].
pub const CHANNELS: usize = 3;

/// A 3-channel image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from channel-major data, rejecting non-finite or
    /// out-of-range values.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("image dimensions must be positive"));
        }
        if data.len() != CHANNELS * height * width {
            return Err(Error::invalid(format!(
                "image data has {} values, expected {}",
                data.len(),
                CHANNELS * height * width
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image, clamping every value into `[0, 1]`. NaN is rejected.
    pub fn from_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in data.iter_mut() {
            if v.is_nan() {
                return Err(Error::invalid("NaN in image data"));
            }
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; CHANNELS]) -> Result<Self> {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for v in rgb {
            data.extend(std::iter::repeat_n(v, height * width));
        }
        Self::new(height, width, data)
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn channel_means(&self) -> [f64; CHANNELS] {
        let n = self.plane_len() as f64;
        let mut means = [0.0; CHANNELS];
        for (c, m) in means.iter_mut().enumerate() {
            // Offset by the first sample so constant channels average exactly.
            let plane = self.channel(c);
            let pivot = plane[0];
            *m = pivot + plane.iter().map(|v| v - pivot).sum::<f64>() / n;
        }
        means
    }

    /// Mirror image across the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    /// Copy of the image with the given pixels replaced by `fill`.
    pub(crate) fn with_pixels(&self, pixels: &PixelSet, fill: [f64; CHANNELS]) -> Self {
        let mut data = self.data.clone();
        let n = self.plane_len();
        for &(y, x) in pixels.coords() {
            let idx = y * self.width + x;
            for (c, v) in fill.iter().enumerate() {
                data[c * n + idx] = *v;
            }
        }
        Self { data, ..*self }
    }
}

/// Integer label map; `0` is background and `255` is the ignore label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

pub const BACKGROUND_LABEL: u8 = 0;
pub const IGNORE_LABEL: u8 = 255;

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::invalid(format!(
                "label map of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Indicator mask of one class.
    pub fn class_mask(&self, class: u8) -> BinaryMask {
        BinaryMask::from_bools(self.height, self.width, self.data.iter().map(|&l| l == class).collect())
            .expect("dimensions taken from a valid label map")
    }
}

/// `{0,1}` target-region mask with a cached popcount.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
    popcount: usize,
}

impl BinaryMask {
    pub fn from_bools(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::invalid(format!(
                "mask of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        let popcount = data.iter().filter(|b| **b).count();
        Ok(Self { height, width, data, popcount })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::from_bools(height, width, data).expect("from_fn builds matching data")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn popcount(&self) -> usize {
        self.popcount
    }

    pub fn complement(&self) -> Self {
        Self {
            data: self.data.iter().map(|b| !b).collect(),
            popcount: self.data.len() - self.popcount,
            ..*self
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    pub(crate) fn check_matches(&self, height: usize, width: usize) -> Result<()> {
        if self.height != height || self.width != width {
            return Err(Error::invalid(format!(
                "mask is {}x{}, expected {height}x{width}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

/// A dense single-plane real map (raw attribution evidence, score fields).
#[derive(Debug, Clone, PartialEq)]
pub struct Map2 {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Map2 {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::invalid(format!(
                "map of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
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

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { data: self.data.iter().map(|v| f(*v)).collect(), ..*self }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_exact_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }
}

/// An attribution map normalized to `[0, 1]`: min 0 and max 1, or all zeros
/// when the source map was constant.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap(Map2);

impl Heatmap {
    /// Wraps a map that already satisfies the normalization contract.
    pub fn from_normalized(map: Map2) -> Result<Self> {
        let (lo, hi) = map.min_max();
        let all_zero = lo == 0.0 && hi == 0.0;
        if !(all_zero || (lo == 0.0 && hi == 1.0)) {
            return Err(Error::invalid(format!("map range [{lo}, {hi}] is not normalized")));
        }
        Ok(Self(map))
    }

    pub fn as_map(&self) -> &Map2 {
        &self.0
    }

    pub fn into_map(self) -> Map2 {
        self.0
    }
}

impl std::ops::Deref for Heatmap {
    type Target = Map2;

    fn deref(&self) -> &Map2 {
        &self.0
    }
}

/// Affine rescale to `[0, 1]`; a constant map becomes all zeros.
pub fn minmax_normalize(map: &Map2) -> Result<Heatmap> {
    if map.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite value in attribution map"));
    }
    let (lo, hi) = map.min_max();
    if hi <= lo {
        return Ok(Heatmap(Map2::zeros(map.height, map.width)));
    }
    let range = hi - lo;
    // Divide rather than multiply by the reciprocal so the maximum maps to
    // exactly 1.0 and normalized input passes through bit-for-bit.
    Ok(Heatmap(map.map(|v| (v - lo) / range)))
}

/// Ordered pixel coordinates `(row, col)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PixelSet {
    coords: Vec<(usize, usize)>,
}

impl PixelSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(coords: Vec<(usize, usize)>) -> Self {
        Self { coords }
    }

    pub fn coords(&self) -> &[(usize, usize)] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    /// All pixels of an axis-aligned block `rows × cols`.
    pub fn rect(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Self {
        let coords = rows.flat_map(|y| cols.clone().map(move |x| (y, x))).collect();
        Self { coords }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Inside,
    Outside,
}

/// Number of pixels a top-k selection keeps from a region of `region_len`.
pub fn topk_count(k: f64, region_len: usize) -> usize {
    // The small offset absorbs products such as 0.29 * 100 = 28.999999999999996.
    let n = (k * region_len as f64 + 1e-9).floor() as usize;
    n.clamp(1, region_len.max(1))
}

/// Selects the top `k` fraction of pixels of `map` inside (or outside) `mask`.
///
/// Pixels are ordered by descending value with ascending row-major index
/// breaking ties, so the result is fully deterministic.
pub fn topk_select(map: &Map2, mask: &BinaryMask, k: f64, region: Region) -> Result<PixelSet> {
    mask.check_matches(map.height, map.width)?;
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::invalid(format!("top-k fraction {k} outside (0, 1]")));
    }
    let want = region == Region::Inside;
    let mut candidates: Vec<usize> =
        (0..map.data.len()).filter(|&i| mask.data[i] == want).collect();
    if candidates.is_empty() {
        let which = if want { "target mask" } else { "mask complement" };
        return Err(Error::EmptyRegion(format!("{which} has no pixels")));
    }
    let n = topk_count(k, candidates.len());
    candidates.sort_by(|&a, &b| map.data[b].total_cmp(&map.data[a]).then(a.cmp(&b)));
    let coords = candidates[..n].iter().map(|&i| (i / map.width, i % map.width)).collect();
    Ok(PixelSet { coords })
}

/// Mean-value occlusion: every pixel in `pixels` is replaced by the
/// per-channel mean of `image` itself.
pub fn occlude(image: &Image, pixels: &PixelSet) -> Image {
    if pixels.is_empty() {
        return image.clone();
    }
    image.with_pixels(pixels, image.channel_means())
}

/// Per-axis interpolation taps for half-pixel-centre bilinear resampling:
/// `(lower index, upper index, weight of the upper sample)`.
fn resample_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    let last = (src_len - 1) as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear resampling of one plane with half-pixel-centre alignment and
/// clamped borders.
pub fn bilinear_upsample(map: &Map2, height: usize, width: usize) -> Map2 {
    if map.height == height && map.width == width {
        return map.clone();
    }
    let rows = resample_taps(map.height, height);
    let cols = resample_taps(map.width, width);
    let mut out = Vec::with_capacity(height * width);
    for &(y0, y1, fy) in &rows {
        for &(x0, x1, fx) in &cols {
            let top = map.get(y0, x0) * (1.0 - fx) + map.get(y0, x1) * fx;
            let bottom = map.get(y1, x0) * (1.0 - fx) + map.get(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Map2 { height, width, data: out }
}

/// Adjoint of [`bilinear_upsample`]: scatters a gradient at the output
/// resolution back onto the `height × width` source grid.
pub fn bilinear_upsample_adjoint(grad: &Map2, height: usize, width: usize) -> Map2 {
    if grad.height == height && grad.width == width {
        return grad.clone();
    }
    let rows = resample_taps(height, grad.height);
    let cols = resample_taps(width, grad.width);
    let mut out = Map2::zeros(height, width);
    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            let g = grad.get(oy, ox);
            out.data[y0 * width + x0] += g * (1.0 - fy) * (1.0 - fx);
            out.data[y0 * width + x1] += g * (1.0 - fy) * fx;
            out.data[y1 * width + x0] += g * fy * (1.0 - fx);
            out.data[y1 * width + x1] += g * fy * fx;
        }
    }
    out
}

/// Pearson correlation of two equally sized maps.
///
/// Zero-variance convention: both constant gives 1, exactly one constant
/// gives 0.
pub fn pearson(a: &Map2, b: &Map2) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::invalid("pearson: maps differ in size"));
    }
    let (a_lo, a_hi) = a.min_max();
    let (b_lo, b_hi) = b.min_max();
    match (a_lo == a_hi, b_lo == b_hi) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let n = a.data.len() as f64;
    let ma = a.data.iter().sum::<f64>() / n;
    let mb = b.data.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data.iter().zip(&b.data) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

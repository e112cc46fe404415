//! Attribution methods for a target region of a segmentation output.
//!
//! * GPA: channel weights from spatially pooled gradients (Grad-CAM style).
//! * EGA: elementwise gradient × activation products.
//! * RIA: region-score drop when each cell of a fixed grid is occluded.
//! * DEA: agreement-weighted fusion of the EGA and RIA maps.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::region_score;
use crate::model::{check_class, FeatureBundle, ModelAdapter};
use crate::tensor::{bilinear_upsample, minmax_normalize, occlude, BinaryMask, Heatmap, Image, Map2, PixelSet};

pub const DEFAULT_ALPHA: f64 = 0.65;
pub const DEFAULT_BETA: f64 = 0.35;
pub const DEFAULT_GRID: usize = 14;

/// Mixing weights of the dual-evidence fusion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    alpha: f64,
    beta: f64,
}

impl FusionParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
        }
        if !beta.is_finite() || beta < 0.0 {
            return Err(Error::invalid(format!("beta {beta} must be finite and non-negative")));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `alpha * g * (1 + beta * r) + (1 - alpha) * r`
    #[inline]
    pub fn fuse(&self, gradient: f64, intervention: f64) -> f64 {
        self.alpha * gradient * (1.0 + self.beta * intervention) + (1.0 - self.alpha) * intervention
    }
}

impl Default for FusionParams {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, beta: DEFAULT_BETA }
    }
}

/// Number of intervention cells per image side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec(usize);

impl GridSpec {
    pub fn new(cells: usize) -> Result<Self> {
        if cells == 0 {
            return Err(Error::invalid("grid must have at least one cell per side"));
        }
        Ok(Self(cells))
    }

    pub fn cells(&self) -> usize {
        self.0
    }

    /// Cell `(i, j)` spans rows `[⌊iH/g⌋, ⌊(i+1)H/g⌋)` and likewise for
    /// columns; returned in row-major cell order.
    pub fn cells_for(&self, height: usize, width: usize) -> Result<Vec<(Range<usize>, Range<usize>)>> {
        let g = self.0;
        if g > height.min(width) {
            return Err(Error::invalid(format!("grid {g} exceeds image size {height}x{width}")));
        }
        let bounds = |len: usize| -> Vec<Range<usize>> { (0..g).map(|i| i * len / g..(i + 1) * len / g).collect() };
        let rows = bounds(height);
        let cols = bounds(width);
        Ok(rows.iter().flat_map(|r| cols.iter().map(move |c| (r.clone(), c.clone()))).collect())
    }
}

impl Default for GridSpec {
    fn default() -> Self {
        Self(DEFAULT_GRID)
    }
}

fn upsample_and_normalize(raw: Map2, height: usize, width: usize) -> Result<Heatmap> {
    minmax_normalize(&bilinear_upsample(&raw, height, width))
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// ReLU of the pooled-gradient weighted activation sum, at feature resolution.
pub fn gpa_raw(bundle: &FeatureBundle) -> Map2 {
    let shape = bundle.shape;
    let plane = shape.plane_len();
    let mut acc = vec![0.0; plane];
    for ch in 0..shape.channels {
        let weight = bundle.gradient_plane(ch).iter().sum::<f64>() / plane as f64;
        for (a, v) in acc.iter_mut().zip(bundle.activation_plane(ch)) {
            *a += weight * v;
        }
    }
    Map2::new(shape.height, shape.width, acc.into_iter().map(relu).collect())
        .expect("feature shape is non-empty")
}

/// ReLU of the channel-summed elementwise gradient × activation product.
pub fn ega_raw(bundle: &FeatureBundle) -> Map2 {
    let shape = bundle.shape;
    let plane = shape.plane_len();
    let mut acc = vec![0.0; plane];
    for ch in 0..shape.channels {
        for ((a, g), v) in acc.iter_mut().zip(bundle.gradient_plane(ch)).zip(bundle.activation_plane(ch)) {
            *a += g * v;
        }
    }
    Map2::new(shape.height, shape.width, acc.into_iter().map(relu).collect())
        .expect("feature shape is non-empty")
}

pub fn gpa(adapter: &mut dyn ModelAdapter, image: &Image, class: usize, mask: &BinaryMask) -> Result<Heatmap> {
    let bundle = adapter.features_and_gradient(image, class, mask)?;
    upsample_and_normalize(gpa_raw(&bundle), image.height(), image.width())
}

pub fn ega(adapter: &mut dyn ModelAdapter, image: &Image, class: usize, mask: &BinaryMask) -> Result<Heatmap> {
    let bundle = adapter.features_and_gradient(image, class, mask)?;
    upsample_and_normalize(ega_raw(&bundle), image.height(), image.width())
}

/// Region-score drop for each grid cell, in row-major cell order.
///
/// Issues one baseline prediction plus one prediction per cell.
pub fn ria_deltas(
    adapter: &mut dyn ModelAdapter,
    image: &Image,
    class: usize,
    mask: &BinaryMask,
    grid: GridSpec,
) -> Result<Vec<f64>> {
    check_class(adapter, class)?;
    mask.check_matches(image.height(), image.width())?;
    if mask.popcount() == 0 {
        return Err(Error::EmptyRegion("target mask has no pixels".into()));
    }
    let cells = grid.cells_for(image.height(), image.width())?;
    let base = region_score(&adapter.predict(image)?, class, mask);
    cells
        .into_iter()
        .map(|(rows, cols)| {
            let occluded = occlude(image, &PixelSet::rect(rows, cols));
            Ok(base - region_score(&adapter.predict(&occluded)?, class, mask))
        })
        .collect()
}

/// Piecewise-constant map assigning each pixel its cell's delta. Negative
/// deltas are kept.
pub fn ria_raw(
    adapter: &mut dyn ModelAdapter,
    image: &Image,
    class: usize,
    mask: &BinaryMask,
    grid: GridSpec,
) -> Result<Map2> {
    let deltas = ria_deltas(adapter, image, class, mask, grid)?;
    let cells = grid.cells_for(image.height(), image.width())?;
    let mut raw = Map2::zeros(image.height(), image.width());
    let width = image.width();
    for ((rows, cols), delta) in cells.into_iter().zip(deltas) {
        for y in rows {
            raw.data_mut()[y * width + cols.start..y * width + cols.end].fill(delta);
        }
    }
    Ok(raw)
}

pub fn ria(
    adapter: &mut dyn ModelAdapter,
    image: &Image,
    class: usize,
    mask: &BinaryMask,
    grid: GridSpec,
) -> Result<Heatmap> {
    minmax_normalize(&ria_raw(adapter, image, class, mask, grid)?)
}

/// Pre-normalization fused map of a gradient map and an intervention map.
pub fn fuse_raw(gradient: &Heatmap, intervention: &Heatmap, params: FusionParams) -> Result<Map2> {
    if gradient.height() != intervention.height() || gradient.width() != intervention.width() {
        return Err(Error::invalid("fusion inputs differ in size"));
    }
    let data = gradient
        .data()
        .iter()
        .zip(intervention.data())
        .map(|(g, r)| params.fuse(*g, *r))
        .collect();
    Map2::new(gradient.height(), gradient.width(), data)
}

pub fn dea(
    adapter: &mut dyn ModelAdapter,
    image: &Image,
    class: usize,
    mask: &BinaryMask,
    params: FusionParams,
    grid: GridSpec,
) -> Result<Heatmap> {
    let gradient = ega(adapter, image, class, mask)?;
    let intervention = ria(adapter, image, class, mask, grid)?;
    minmax_normalize(&fuse_raw(&gradient, &intervention, params)?)
}

/// Anything that turns `(model, image, class, mask)` into a heatmap.
pub trait Explainer {
    fn name(&self) -> String;

    fn explain(
        &self,
        adapter: &mut dyn ModelAdapter,
        image: &Image,
        class: usize,
        mask: &BinaryMask,
    ) -> Result<Heatmap>;
}

/// Stable lowercase identifiers of the built-in methods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Gpa,
    Ega,
    Ria,
    Dea,
}

impl MethodName {
    pub const ALL: [MethodName; 4] = [MethodName::Gpa, MethodName::Ega, MethodName::Ria, MethodName::Dea];

    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::Gpa => "gpa",
            MethodName::Ega => "ega",
            MethodName::Ria => "ria",
            MethodName::Dea => "dea",
        }
    }
}

impl fmt::Display for MethodName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method `{s}` (expected gpa, ega, ria or dea)")))
    }
}

/// A built-in method together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Gpa,
    Ega,
    Ria { grid: GridSpec },
    Dea { params: FusionParams, grid: GridSpec },
}

impl Method {
    pub fn from_name(name: MethodName, params: FusionParams, grid: GridSpec) -> Self {
        match name {
            MethodName::Gpa => Method::Gpa,
            MethodName::Ega => Method::Ega,
            MethodName::Ria => Method::Ria { grid },
            MethodName::Dea => Method::Dea { params, grid },
        }
    }

    pub fn kind(&self) -> MethodName {
        match self {
            Method::Gpa => MethodName::Gpa,
            Method::Ega => MethodName::Ega,
            Method::Ria { .. } => MethodName::Ria,
            Method::Dea { .. } => MethodName::Dea,
        }
    }
}

impl Explainer for Method {
    fn name(&self) -> String {
        self.kind().to_string()
    }

    fn explain(
        &self,
        adapter: &mut dyn ModelAdapter,
        image: &Image,
        class: usize,
        mask: &BinaryMask,
    ) -> Result<Heatmap> {
        match *self {
            Method::Gpa => gpa(adapter, image, class, mask),
            Method::Ega => ega(adapter, image, class, mask),
            Method::Ria { grid } => ria(adapter, image, class, mask, grid),
            Method::Dea { params, grid } => dea(adapter, image, class, mask, params, grid),
        }
    }
}

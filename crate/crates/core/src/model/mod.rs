//! The segmentation-model contract consumed by every attribution method and
//! metric, and the built-in micro network used for desk-scale verification.

mod micro;

pub use micro::{fd_gradient_oracle, gradient_relative_error, Conv2d, MicroModel};

use crate::error::{Error, Result};
use crate::tensor::{BinaryMask, Image};

/// Per-pixel class logits, `[class][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn softmax(&self) -> ProbMap {
        let n = self.height * self.width;
        let mut out = vec![0.0; self.data.len()];
        for p in 0..n {
            softmax_pixel(&self.data, &mut out, self.classes, n, p);
        }
        ProbMap { classes: self.classes, height: self.height, width: self.width, data: out }
    }
}

/// Softmax over the class axis at one pixel of `[class][pixel]` data.
pub(crate) fn softmax_pixel(logits: &[f64], out: &mut [f64], classes: usize, n: usize, p: usize) {
    let max = (0..classes).map(|k| logits[k * n + p]).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for k in 0..classes {
        let e = (logits[k * n + p] - max).exp();
        out[k * n + p] = e;
        total += e;
    }
    for k in 0..classes {
        out[k * n + p] /= total;
    }
}

/// Per-pixel class probabilities, `[class][y][x]`; each pixel's class vector
/// sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ProbMap {
    /// Wraps externally produced probabilities, checking the simplex
    /// constraint to `tolerance` at every pixel.
    pub fn new(
        classes: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
        tolerance: f64,
    ) -> Result<Self> {
        let n = height * width;
        if classes == 0 || n == 0 || data.len() != classes * n {
            return Err(Error::invalid(format!(
                "probability map of {} values does not match {classes}x{height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < -tolerance || *v > 1.0 + tolerance) {
            return Err(Error::invalid("probability outside [0, 1]"));
        }
        for p in 0..n {
            let s: f64 = (0..classes).map(|k| data[k * n + p]).sum();
            if (s - 1.0).abs() > tolerance {
                return Err(Error::invalid(format!("pixel {p} probabilities sum to {s}")));
            }
        }
        Ok(Self { classes, height, width, data })
    }

    pub fn classes(&self) -> usize {
        self.classes
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

    pub fn class_plane(&self, class: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[class * n..(class + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }
}

/// Feature-layer activations and the gradient of the region score with
/// respect to them, both `[channel][y][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub shape: FeatureShape,
    pub activations: Vec<f64>,
    pub gradient: Vec<f64>,
}

impl FeatureBundle {
    pub fn new(shape: FeatureShape, activations: Vec<f64>, gradient: Vec<f64>) -> Result<Self> {
        if activations.len() != shape.len() || gradient.len() != shape.len() {
            return Err(Error::invalid("feature bundle tensors do not match the declared shape"));
        }
        if activations.iter().chain(&gradient).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite feature activation or gradient"));
        }
        Ok(Self { shape, activations, gradient })
    }

    pub fn activation_plane(&self, channel: usize) -> &[f64] {
        let n = self.shape.plane_len();
        &self.activations[channel * n..(channel + 1) * n]
    }

    pub fn gradient_plane(&self, channel: usize) -> &[f64] {
        let n = self.shape.plane_len();
        &self.gradient[channel * n..(channel + 1) * n]
    }
}

/// A segmentation model as seen by the benchmark.
///
/// Implementations must be deterministic for fixed weights and input.
/// `features_and_gradient` returns the gradient of the masked mean class
/// probability (see [`crate::metrics::region_score`]) at the adapter's
/// designated feature layer. Intervention methods and metrics only call
/// `predict`, so gradient-free backends can still serve them.
pub trait ModelAdapter {
    fn num_classes(&self) -> usize;

    /// Feature-layer shape for an input of the given size, when known up front.
    fn feature_shape(&self, _height: usize, _width: usize) -> Option<FeatureShape> {
        None
    }

    /// Softmax probabilities at input resolution.
    fn predict(&mut self, image: &Image) -> Result<ProbMap>;

    fn features_and_gradient(
        &mut self,
        image: &Image,
        class: usize,
        mask: &BinaryMask,
    ) -> Result<FeatureBundle>;
}

impl<T: ModelAdapter + ?Sized> ModelAdapter for Box<T> {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }

    fn feature_shape(&self, height: usize, width: usize) -> Option<FeatureShape> {
        (**self).feature_shape(height, width)
    }

    fn predict(&mut self, image: &Image) -> Result<ProbMap> {
        (**self).predict(image)
    }

    fn features_and_gradient(
        &mut self,
        image: &Image,
        class: usize,
        mask: &BinaryMask,
    ) -> Result<FeatureBundle> {
        (**self).features_and_gradient(image, class, mask)
    }
}

pub(crate) fn check_class(adapter: &dyn ModelAdapter, class: usize) -> Result<()> {
    if class >= adapter.num_classes() {
        return Err(Error::invalid(format!(
            "class {class} out of range for a {}-class model",
            adapter.num_classes()
        )));
    }
    Ok(())
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::ops::Range;

use super::{check_class, softmax_pixel, FeatureBundle, FeatureShape, Logits, ModelAdapter, ProbMap};
use crate::error::{Error, Result};
use crate::metrics::region_score;
use crate::tensor::{bilinear_upsample, bilinear_upsample_adjoint, BinaryMask, Image, Map2, CHANNELS, EPSILON};

const HIDDEN: usize = 8;

/// A square-kernel, stride-1 convolution with reflect padding.
///
/// `weight` is laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    fn seeded(rng: &mut ChaCha8Rng, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let scale = 1.0 / fan_in.sqrt();
        let weight = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| rng.random_range(-0.5..=0.5) * scale)
            .collect();
        let bias = (0..out_channels).map(|_| rng.random_range(-0.5..=0.5) * scale).collect();
        Self { out_channels, in_channels, kernel, weight, bias }
    }

    fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0
            || self.weight.len() != self.out_channels * self.in_channels * self.kernel * self.kernel
            || self.bias.len() != self.out_channels
        {
            return Err(Error::invalid("convolution parameters do not match their declared shape"));
        }
        Ok(())
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }

    /// Applies the convolution to `[in][h][w]` data.
    fn forward(&self, input: &[f64], height: usize, width: usize) -> Vec<f64> {
        let pad = self.kernel / 2;
        let (ph, pw) = (height + 2 * pad, width + 2 * pad);
        let plane = height * width;
        let padded: Vec<Vec<f64>> = (0..self.in_channels)
            .map(|i| reflect_pad(&input[i * plane..(i + 1) * plane], height, width, pad))
            .collect();
        let mut out = vec![0.0; self.out_channels * plane];
        for (o, out_plane) in out.chunks_exact_mut(plane).enumerate() {
            out_plane.fill(self.bias[o]);
            for (i, src) in padded.iter().enumerate() {
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let wv = self.w(o, i, ky, kx);
                        for y in 0..height {
                            let row = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + width];
                            let dst = &mut out_plane[y * width..(y + 1) * width];
                            for (d, s) in dst.iter_mut().zip(row) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        debug_assert_eq!(padded.first().map_or(ph * pw, Vec::len), ph * pw);
        out
    }

    /// Recomputes the output pixels inside `rows × cols` into `out`, with
    /// the same per-pixel accumulation order as [`Conv2d::forward`] so the
    /// values are bit-identical to a full pass.
    fn forward_window(
        &self,
        input: &[f64],
        height: usize,
        width: usize,
        rows: Range<usize>,
        cols: Range<usize>,
        out: &mut [f64],
    ) {
        let pad = self.kernel as isize / 2;
        let plane = height * width;
        for o in 0..self.out_channels {
            for y in rows.clone() {
                for x in cols.clone() {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_channels {
                        let src = &input[i * plane..(i + 1) * plane];
                        for ky in 0..self.kernel {
                            let sy = reflect(y as isize + ky as isize - pad, height);
                            for kx in 0..self.kernel {
                                let sx = reflect(x as isize + kx as isize - pad, width);
                                acc += self.w(o, i, ky, kx) * src[sy * width + sx];
                            }
                        }
                    }
                    out[o * plane + y * width + x] = acc;
                }
            }
        }
    }
}

/// Reflect index into `[0, len)` without repeating the edge sample.
fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

fn reflect_pad(plane: &[f64], height: usize, width: usize, pad: usize) -> Vec<f64> {
    if pad == 0 {
        return plane.to_vec();
    }
    let pw = width + 2 * pad;
    let mut out = Vec::with_capacity((height + 2 * pad) * pw);
    for py in 0..height + 2 * pad {
        let y = reflect(py as isize - pad as isize, height);
        for px in 0..pw {
            let x = reflect(px as isize - pad as isize, width);
            out.push(plane[y * width + x]);
        }
    }
    out
}

/// Deterministic desk-scale segmentation network:
///
/// `conv3x3(3→8) → ReLU → conv3x3(8→8) → ReLU → conv1x1(8→K) → bilinear
/// upsample → softmax`.
///
/// The feature layer is the output of the second convolution after its
/// ReLU, so the head above it is smooth and its gradient can be checked
/// against finite differences without straddling ReLU kinks.
///
/// `predict` keeps the intermediate tensors of its last full forward pass.
/// A later input that differs from it only inside a small window (as in
/// grid occlusion) is evaluated by recomputing just that window's receptive
/// field; the result is bit-identical to a full pass.
#[derive(Debug, Clone)]
pub struct MicroModel {
    conv1: Conv2d,
    conv2: Conv2d,
    head: Conv2d,
    cache: ForwardCache,
}

impl PartialEq for MicroModel {
    fn eq(&self, other: &Self) -> bool {
        self.conv1 == other.conv1 && self.conv2 == other.conv2 && self.head == other.head
    }
}

#[derive(Clone, Default)]
struct ForwardCache {
    image: Option<Image>,
    hidden: Vec<f64>,
    features: Vec<f64>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

impl std::fmt::Debug for ForwardCache {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ForwardCache").field("filled", &self.image.is_some()).finish()
    }
}

/// Bounding window of the pixels where `a` and `b` differ in any channel.
fn changed_window(a: &Image, b: &Image) -> Option<(Range<usize>, Range<usize>)> {
    let (h, w) = (a.height(), a.width());
    let n = h * w;
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for (i, (p, q)) in a.data().iter().zip(b.data()).enumerate() {
        if p.to_bits() != q.to_bits() {
            let (y, x) = ((i % n) / w, i % w);
            y0 = y0.min(y);
            y1 = y1.max(y + 1);
            x0 = x0.min(x);
            x1 = x1.max(x + 1);
        }
    }
    (y0 != usize::MAX).then_some((y0..y1, x0..x1))
}

fn dilate(r: &Range<usize>, by: usize, len: usize) -> Range<usize> {
    r.start.saturating_sub(by)..(r.end + by).min(len)
}

impl MicroModel {
    pub fn new(seed: u64, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("micro model needs at least two classes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = Conv2d::seeded(&mut rng, CHANNELS, HIDDEN, 3);
        let conv2 = Conv2d::seeded(&mut rng, HIDDEN, HIDDEN, 3);
        let head = Conv2d::seeded(&mut rng, HIDDEN, classes, 1);
        Ok(Self { conv1, conv2, head, cache: ForwardCache::default() })
    }

    /// Builds a model from explicit layers.
    pub fn from_layers(conv1: Conv2d, conv2: Conv2d, head: Conv2d) -> Result<Self> {
        for c in [&conv1, &conv2, &head] {
            c.validate()?;
        }
        if conv1.in_channels != CHANNELS
            || conv2.in_channels != conv1.out_channels
            || head.in_channels != conv2.out_channels
            || head.kernel != 1
            || head.out_channels < 2
        {
            return Err(Error::invalid("micro model layers do not chain"));
        }
        Ok(Self { conv1, conv2, head, cache: ForwardCache::default() })
    }

    pub fn layers(&self) -> (&Conv2d, &Conv2d, &Conv2d) {
        (&self.conv1, &self.conv2, &self.head)
    }

    pub fn layers_mut(&mut self) -> (&mut Conv2d, &mut Conv2d, &mut Conv2d) {
        self.cache = ForwardCache::default();
        (&mut self.conv1, &mut self.conv2, &mut self.head)
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        if image.height() < 2 || image.width() < 2 {
            return Err(Error::invalid("micro model needs inputs of at least 2x2 pixels"));
        }
        Ok(())
    }

    /// Feature-layer activations, `[channel][y][x]`.
    pub fn features(&self, image: &Image) -> Result<Vec<f64>> {
        self.check_image(image)?;
        let (h, w) = (image.height(), image.width());
        let mut a = self.conv1.forward(image.data(), h, w);
        relu_in_place(&mut a);
        let mut f = self.conv2.forward(&a, h, w);
        relu_in_place(&mut f);
        Ok(f)
    }

    /// Logits at input resolution from feature activations of shape `shape`.
    pub fn head_logits(&self, activations: &[f64], shape: FeatureShape, height: usize, width: usize) -> Logits {
        let low = self.head.forward(activations, shape.height, shape.width);
        let classes = self.head.out_channels;
        let plane = shape.plane_len();
        let mut data = Vec::with_capacity(classes * height * width);
        for k in 0..classes {
            let m = Map2::new(shape.height, shape.width, low[k * plane..(k + 1) * plane].to_vec())
                .expect("head output matches the feature grid");
            data.extend(bilinear_upsample(&m, height, width).into_data());
        }
        Logits { classes, height, width, data }
    }

    /// Region score evaluated from feature activations alone.
    pub fn head_region_score(
        &self,
        activations: &[f64],
        shape: FeatureShape,
        class: usize,
        mask: &BinaryMask,
    ) -> f64 {
        let probs = self.head_logits(activations, shape, mask.height(), mask.width()).softmax();
        region_score(&probs, class, mask)
    }

    fn cached_probs(&self, height: usize, width: usize) -> ProbMap {
        ProbMap { classes: self.head.out_channels, height, width, data: self.cache.probs.clone() }
    }

    /// Forward pass of an input that differs from the cached one only inside
    /// `rows × cols`. Each layer recomputes the window grown by its kernel
    /// radius; the feature grid equals the input grid, so the upsample is the
    /// identity and logits are the head output.
    fn predict_window(&self, image: &Image, rows: Range<usize>, cols: Range<usize>) -> ProbMap {
        let (h, w) = (image.height(), image.width());
        let c = &self.cache;
        let (r1, c1) = (dilate(&rows, 1, h), dilate(&cols, 1, w));
        let (r2, c2) = (dilate(&rows, 2, h), dilate(&cols, 2, w));
        let plane = h * w;

        let mut hidden = c.hidden.clone();
        self.conv1.forward_window(image.data(), h, w, r1.clone(), c1.clone(), &mut hidden);
        relu_window(&mut hidden, self.conv1.out_channels, w, plane, &r1, &c1);
        let mut features = c.features.clone();
        self.conv2.forward_window(&hidden, h, w, r2.clone(), c2.clone(), &mut features);
        relu_window(&mut features, self.conv2.out_channels, w, plane, &r2, &c2);
        let mut logits = c.logits.clone();
        self.head.forward_window(&features, h, w, r2.clone(), c2.clone(), &mut logits);
        let mut probs = c.probs.clone();
        let classes = self.head.out_channels;
        for y in r2 {
            for x in c2.clone() {
                softmax_pixel(&logits, &mut probs, classes, plane, y * w + x);
            }
        }
        ProbMap { classes, height: h, width: w, data: probs }
    }

    fn shape_for(&self, height: usize, width: usize) -> FeatureShape {
        FeatureShape { channels: self.conv2.out_channels, height, width }
    }
}

fn relu_window(v: &mut [f64], channels: usize, width: usize, plane: usize, rows: &Range<usize>, cols: &Range<usize>) {
    for ch in 0..channels {
        for y in rows.clone() {
            relu_in_place(&mut v[ch * plane + y * width + cols.start..ch * plane + y * width + cols.end]);
        }
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

impl ModelAdapter for MicroModel {
    fn num_classes(&self) -> usize {
        self.head.out_channels
    }

    fn feature_shape(&self, height: usize, width: usize) -> Option<FeatureShape> {
        Some(self.shape_for(height, width))
    }

    fn predict(&mut self, image: &Image) -> Result<ProbMap> {
        self.check_image(image)?;
        let (h, w) = (image.height(), image.width());
        if let Some(cached) = &self.cache.image {
            if cached.height() == h && cached.width() == w {
                match changed_window(cached, image) {
                    None => return Ok(self.cached_probs(h, w)),
                    Some((rows, cols)) => {
                        let (r, c) = (dilate(&rows, 2, h), dilate(&cols, 2, w));
                        if 2 * r.len() * c.len() <= h * w {
                            return Ok(self.predict_window(image, rows, cols));
                        }
                    }
                }
            }
        }
        let mut hidden = self.conv1.forward(image.data(), h, w);
        relu_in_place(&mut hidden);
        let mut features = self.conv2.forward(&hidden, h, w);
        relu_in_place(&mut features);
        let logits = self.head_logits(&features, self.shape_for(h, w), h, w);
        let probs = logits.softmax();
        self.cache = ForwardCache {
            image: Some(image.clone()),
            hidden,
            features,
            logits: logits.data,
            probs: probs.data.clone(),
        };
        Ok(probs)
    }

    fn features_and_gradient(
        &mut self,
        image: &Image,
        class: usize,
        mask: &BinaryMask,
    ) -> Result<FeatureBundle> {
        check_class(self, class)?;
        mask.check_matches(image.height(), image.width())?;
        if mask.popcount() == 0 {
            return Err(Error::EmptyRegion("target mask has no pixels".into()));
        }
        let (h, w) = (image.height(), image.width());
        let activations = self.features(image)?;
        let shape = self.shape_for(h, w);
        let probs = self.head_logits(&activations, shape, h, w).softmax();

        // d s / d z_k(p) = m(p) / (|M| + eps) * p_c(p) * (delta_ck - p_k(p))
        let classes = self.num_classes();
        let plane = h * w;
        let norm = 1.0 / (mask.popcount() as f64 + EPSILON);
        let pc = probs.class_plane(class);
        let mut logit_grad = vec![0.0; classes * plane];
        for (p, inside) in mask.data().iter().enumerate() {
            if !inside {
                continue;
            }
            let scale = norm * pc[p];
            for k in 0..classes {
                let delta = if k == class { 1.0 } else { 0.0 };
                logit_grad[k * plane + p] = scale * (delta - probs.data()[k * plane + p]);
            }
        }

        let fplane = shape.plane_len();
        let mut low_grad = Vec::with_capacity(classes * fplane);
        for k in 0..classes {
            let g = Map2::new(h, w, logit_grad[k * plane..(k + 1) * plane].to_vec())?;
            low_grad.extend(bilinear_upsample_adjoint(&g, shape.height, shape.width).into_data());
        }

        let mut gradient = vec![0.0; shape.len()];
        for (j, out) in gradient.chunks_exact_mut(fplane).enumerate() {
            for k in 0..classes {
                let wkj = self.head.w(k, j, 0, 0);
                if wkj == 0.0 {
                    continue;
                }
                for (o, g) in out.iter_mut().zip(&low_grad[k * fplane..(k + 1) * fplane]) {
                    *o += wkj * g;
                }
            }
        }
        FeatureBundle::new(shape, activations, gradient)
    }
}

/// Central finite differences of the region score with respect to every
/// feature activation, re-running only the head above the feature layer.
pub fn fd_gradient_oracle(
    model: &MicroModel,
    image: &Image,
    class: usize,
    mask: &BinaryMask,
    step: f64,
) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    check_class(model, class)?;
    mask.check_matches(image.height(), image.width())?;
    let mut acts = model.features(image)?;
    let shape = model.shape_for(image.height(), image.width());
    let mut grad = Vec::with_capacity(acts.len());
    for i in 0..acts.len() {
        let orig = acts[i];
        acts[i] = orig + step;
        let up = model.head_region_score(&acts, shape, class, mask);
        acts[i] = orig - step;
        let down = model.head_region_score(&acts, shape, class, mask);
        acts[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Largest elementwise deviation relative to the reference gradient's
/// largest magnitude: `max|a - b| / max|b|`.
///
/// Elementwise ratios are meaningless where softmax cross-terms cancel a
/// component to near zero, so the error is scaled by the gradient's
/// infinity norm instead.
pub fn gradient_relative_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if scale == 0.0 {
        worst
    } else {
        worst / scale
    }
}

//! The five-element perturbation battery behind the stability metric.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Image, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    AdditiveNoise,
    Brightness,
    Contrast,
    GaussianBlur,
    HorizontalFlip,
}

impl PerturbationKind {
    pub const ALL: [PerturbationKind; 5] = [
        PerturbationKind::AdditiveNoise,
        PerturbationKind::Brightness,
        PerturbationKind::Contrast,
        PerturbationKind::GaussianBlur,
        PerturbationKind::HorizontalFlip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbationKind::AdditiveNoise => "additive-noise",
            PerturbationKind::Brightness => "brightness",
            PerturbationKind::Contrast => "contrast",
            PerturbationKind::GaussianBlur => "gaussian-blur",
            PerturbationKind::HorizontalFlip => "horizontal-flip",
        }
    }
}

impl fmt::Display for PerturbationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PerturbationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown perturbation kind `{s}`")))
    }
}

/// How the single scalar strength maps onto each perturbation's own
/// parameter. Every field multiplies the strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationCoefficients {
    /// Noise standard deviation per unit strength.
    pub noise_std: f64,
    /// Additive brightness shift per unit strength.
    pub brightness: f64,
    /// Contrast gain change per unit strength.
    pub contrast: f64,
    /// Gaussian sigma in pixels per unit strength.
    pub blur_sigma: f64,
}

impl Default for PerturbationCoefficients {
    fn default() -> Self {
        Self { noise_std: 1.0, brightness: 1.0, contrast: 1.0, blur_sigma: 33.33 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub kind: PerturbationKind,
    pub strength: f64,
    /// Only used by additive noise.
    pub seed: u64,
    pub coefficients: PerturbationCoefficients,
}

impl Perturbation {
    pub fn new(kind: PerturbationKind, strength: f64, seed: u64) -> Self {
        Self { kind, strength, seed, coefficients: PerturbationCoefficients::default() }
    }
}

/// Applies one perturbation, clamping the result back into `[0, 1]`.
pub fn apply(image: &Image, p: &Perturbation) -> Result<Image> {
    if !p.strength.is_finite() || p.strength < 0.0 {
        return Err(Error::invalid(format!("perturbation strength {} must be finite and non-negative", p.strength)));
    }
    let (h, w) = (image.height(), image.width());
    let coef = p.coefficients;
    match p.kind {
        PerturbationKind::AdditiveNoise => {
            let std = p.strength * coef.noise_std;
            if std == 0.0 {
                return Ok(image.clone());
            }
            let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
            let data = image.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
            Image::from_clamped(h, w, data)
        }
        PerturbationKind::Brightness => {
            let shift = p.strength * coef.brightness;
            Image::from_clamped(h, w, image.data().iter().map(|v| v + shift).collect())
        }
        PerturbationKind::Contrast => {
            let gain = 1.0 + p.strength * coef.contrast;
            let means = image.channel_means();
            let mut data = Vec::with_capacity(image.data().len());
            for (c, mean) in means.iter().enumerate() {
                data.extend(image.channel(c).iter().map(|v| mean + gain * (v - mean)));
            }
            Image::from_clamped(h, w, data)
        }
        PerturbationKind::GaussianBlur => {
            let sigma = p.strength * coef.blur_sigma;
            if sigma == 0.0 {
                return Ok(image.clone());
            }
            let kernel = gaussian_kernel(sigma);
            let mut data = Vec::with_capacity(image.data().len());
            for c in 0..CHANNELS {
                let rows = blur_axis(image.channel(c), h, w, &kernel, true);
                data.extend(blur_axis(&rows, h, w, &kernel, false));
            }
            Image::from_clamped(h, w, data)
        }
        PerturbationKind::HorizontalFlip => Ok(image.flip_horizontal()),
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Half-sample symmetric index (`d c b a | a b c d`), valid for any offset.
fn symmetric(i: isize, len: usize) -> usize {
    let period = 2 * len as isize;
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Convolves a plane along x (`horizontal`) or y with a symmetric boundary.
/// The symmetric extension keeps the blur operator doubly stochastic, so the
/// plane mean is preserved.
fn blur_axis(plane: &[f64], height: usize, width: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, kv) in kernel.iter().enumerate() {
                let off = t as isize - radius;
                let v = if horizontal {
                    plane[y * width + symmetric(x as isize + off, width)]
                } else {
                    plane[symmetric(y as isize + off, height) * width + x]
                };
                acc += kv * v;
            }
            out[y * width + x] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _, _| rng.random_range(0.0..=1.0)).unwrap()
    }

    #[test]
    fn zero_strength_brightness_is_identity() {
        let x = random_image(1, 9, 7);
        let out = apply(&x, &Perturbation::new(PerturbationKind::Brightness, 0.0, 0)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = random_image(2, 6, 5);
        let p = Perturbation::new(PerturbationKind::HorizontalFlip, 0.03, 0);
        assert_eq!(apply(&apply(&x, &p).unwrap(), &p).unwrap(), x);
    }

    #[test]
    fn noise_is_seeded() {
        let x = random_image(3, 8, 8);
        let p = Perturbation::new(PerturbationKind::AdditiveNoise, 0.03, 42);
        let a = apply(&x, &p).unwrap();
        assert_eq!(a, apply(&x, &p).unwrap());
        assert_ne!(a, x);
        let other = apply(&x, &Perturbation { seed: 43, ..p }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn blur_preserves_channel_means() {
        let x = random_image(4, 32, 24);
        let out = apply(&x, &Perturbation::new(PerturbationKind::GaussianBlur, 0.03, 0)).unwrap();
        for (a, b) in x.channel_means().iter().zip(out.channel_means()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        // Blur reduces local variance.
        let tv = |img: &Image| img.channel(0).windows(2).map(|p| (p[0] - p[1]).abs()).sum::<f64>();
        assert!(tv(&out) < tv(&x));
    }

    #[test]
    fn contrast_pivots_on_channel_mean() {
        let x = Image::new(1, 2, vec![0.4, 0.6, 0.5, 0.5, 0.1, 0.3]).unwrap();
        let out = apply(&x, &Perturbation::new(PerturbationKind::Contrast, 0.5, 0)).unwrap();
        let expect = [0.35, 0.65, 0.5, 0.5, 0.05, 0.35];
        for (a, b) in out.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn outputs_stay_in_range() {
        let x = random_image(5, 10, 10);
        for kind in PerturbationKind::ALL {
            let out = apply(&x, &Perturbation::new(kind, 0.8, 9)).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)), "{kind}");
        }
    }

    #[test]
    fn parse_kinds() {
        for kind in PerturbationKind::ALL {
            assert_eq!(kind.name().parse::<PerturbationKind>().unwrap(), kind);
        }
        assert!("rotate".parse::<PerturbationKind>().is_err());
        assert!(apply(&random_image(0, 3, 3), &Perturbation::new(PerturbationKind::Brightness, -1.0, 0)).is_err());
    }

    #[test]
    fn symmetric_indexing() {
        let idx: Vec<usize> = (-3..7).map(|i| symmetric(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }
}

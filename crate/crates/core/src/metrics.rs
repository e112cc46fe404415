//! Faithfulness, leakage, robustness and runtime metrics.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attribution::Explainer;
use crate::error::{Error, Result};
use crate::model::{check_class, ModelAdapter, ProbMap};
use crate::perturb::{apply, Perturbation, PerturbationCoefficients, PerturbationKind};
use crate::tensor::{occlude, pearson, topk_select, BinaryMask, Image, Map2, PixelSet, Region, EPSILON};

/// Reported leakage ratios are capped here so aggregates stay finite when
/// the target deletion drop is close to zero.
pub const LEAK_CAP: f64 = 1e6;

/// Masked mean probability of `class` inside `mask`.
pub fn region_score(probs: &ProbMap, class: usize, mask: &BinaryMask) -> f64 {
    assert!(
        probs.height() == mask.height() && probs.width() == mask.width(),
        "probability map and mask differ in size"
    );
    let inside: f64 = probs
        .class_plane(class)
        .iter()
        .zip(mask.data())
        .filter(|(_, m)| **m)
        .map(|(p, _)| p)
        .sum();
    inside / (mask.popcount() as f64 + EPSILON)
}

/// Region score of a fresh prediction.
pub fn score(adapter: &mut dyn ModelAdapter, image: &Image, class: usize, mask: &BinaryMask) -> Result<f64> {
    check_class(adapter, class)?;
    mask.check_matches(image.height(), image.width())?;
    let probs = adapter.predict(image)?;
    if probs.height() != image.height() || probs.width() != image.width() {
        return Err(Error::invalid("model returned probabilities at the wrong resolution"));
    }
    Ok(region_score(&probs, class, mask))
}

fn relative_change(before: f64, after: f64) -> f64 {
    (before - after) / (before.abs() + EPSILON)
}

/// Normalized score drop after occluding an explicit pixel set.
pub fn occlusion_drop(
    adapter: &mut dyn ModelAdapter,
    image: &Image,
    class: usize,
    mask: &BinaryMask,
    pixels: &PixelSet,
) -> Result<f64> {
    let before = score(adapter, image, class, mask)?;
    let after = score(adapter, &occlude(image, pixels), class, mask)?;
    Ok(relative_change(before, after))
}

/// Drop in region score after occluding the top-`k` attributed pixels inside
/// the target mask.
pub fn target_deletion_drop(
    adapter: &mut dyn ModelAdapter,
    image: &Image,
    map: &Map2,
    class: usize,
    mask: &BinaryMask,
    k: f64,
) -> Result<f64> {
    let selected = topk_select(map, mask, k, Region::Inside)?;
    occlusion_drop(adapter, image, class, mask, &selected)
}

/// Same intervention applied to the top-`k` attributed pixels outside the
/// target mask. Negative values (score went up) are legal.
pub fn offtarget_deletion_drop(
    adapter: &mut dyn ModelAdapter,
    image: &Image,
    map: &Map2,
    class: usize,
    mask: &BinaryMask,
    k: f64,
) -> Result<f64> {
    let selected = topk_select(map, mask, k, Region::Outside)?;
    occlusion_drop(adapter, image, class, mask, &selected)
}

/// `|odd| / (|tdd| + ε)`, uncapped.
pub fn leak_abs(tdd: f64, odd: f64) -> f64 {
    odd.abs() / (tdd.abs() + EPSILON)
}

/// Signed diagnostic companion of [`leak_abs`]: `odd / (|tdd| + ε)`.
pub fn leak_signed(tdd: f64, odd: f64) -> f64 {
    odd / (tdd.abs() + EPSILON)
}

/// Per-channel-mean baseline image with `pixels` restored from `image`.
fn insertion_image(image: &Image, pixels: &PixelSet) -> (Image, Image) {
    let means = image.channel_means();
    let baseline = Image::filled(image.height(), image.width(), means).expect("means of a valid image");
    let mut data = baseline.data().to_vec();
    let n = image.plane_len();
    for &(y, x) in pixels.coords() {
        let idx = y * image.width() + x;
        for c in 0..crate::tensor::CHANNELS {
            data[c * n + idx] = image.data()[c * n + idx];
        }
    }
    let inserted = Image::new(image.height(), image.width(), data).expect("values copied from valid images");
    (baseline, inserted)
}

/// Score gain from restoring an explicit pixel set onto the mean baseline,
/// normalized by the clean-image score.
pub fn insertion_gain_for(
    adapter: &mut dyn ModelAdapter,
    image: &Image,
    class: usize,
    mask: &BinaryMask,
    pixels: &PixelSet,
) -> Result<f64> {
    let clean = score(adapter, image, class, mask)?;
    let (baseline, inserted) = insertion_image(image, pixels);
    let base = score(adapter, &baseline, class, mask)?;
    let gained = score(adapter, &inserted, class, mask)?;
    Ok((gained - base) / (clean.abs() + EPSILON))
}

pub fn insertion_gain(
    adapter: &mut dyn ModelAdapter,
    image: &Image,
    map: &Map2,
    class: usize,
    mask: &BinaryMask,
    k: f64,
) -> Result<f64> {
    let selected = topk_select(map, mask, k, Region::Inside)?;
    insertion_gain_for(adapter, image, class, mask, &selected)
}

/// Settings of the perturbation battery used by [`stability`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilitySettings {
    pub strength: f64,
    pub seed: u64,
    pub coefficients: PerturbationCoefficients,
}

impl StabilitySettings {
    pub fn new(strength: f64, seed: u64) -> Self {
        Self { strength, seed, coefficients: PerturbationCoefficients::default() }
    }
}

/// Mean Pearson correlation between the heatmap of the clean image and the
/// heatmaps of its five perturbed variants.
///
/// Under horizontal flip the mask is flipped along with the image and the
/// resulting heatmap is flipped back before comparison.
pub fn stability(
    method: &dyn Explainer,
    adapter: &mut dyn ModelAdapter,
    image: &Image,
    class: usize,
    mask: &BinaryMask,
    settings: &StabilitySettings,
) -> Result<f64> {
    let reference = method.explain(adapter, image, class, mask)?;
    stability_against(method, adapter, image, class, mask, settings, reference.as_map())
}

/// [`stability`] with the clean-image heatmap supplied by the caller.
pub fn stability_against(
    method: &dyn Explainer,
    adapter: &mut dyn ModelAdapter,
    image: &Image,
    class: usize,
    mask: &BinaryMask,
    settings: &StabilitySettings,
    reference: &Map2,
) -> Result<f64> {
    let mut total = 0.0;
    for kind in PerturbationKind::ALL {
        let p = Perturbation {
            kind,
            strength: settings.strength,
            seed: settings.seed,
            coefficients: settings.coefficients,
        };
        let perturbed = apply(image, &p)?;
        let corr = if kind == PerturbationKind::HorizontalFlip {
            let flipped_mask = mask.flip_horizontal();
            let h = method.explain(adapter, &perturbed, class, &flipped_mask)?;
            pearson(reference, &h.flip_horizontal())?
        } else {
            let h = method.explain(adapter, &perturbed, class, mask)?;
            pearson(reference, h.as_map())?
        };
        total += corr;
    }
    Ok(total / PerturbationKind::ALL.len() as f64)
}

/// Runs one explanation and measures its wall-clock duration in
/// milliseconds. Only the attribution call itself is timed.
pub fn time_explanation(
    method: &dyn Explainer,
    adapter: &mut dyn ModelAdapter,
    image: &Image,
    class: usize,
    mask: &BinaryMask,
) -> Result<(crate::tensor::Heatmap, f64)> {
    let start = Instant::now();
    let heatmap = method.explain(adapter, image, class, mask)?;
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    Ok((heatmap, elapsed))
}

/// One evaluated (sample, method) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub tdd: f64,
    pub odd: f64,
    pub leak_abs: f64,
    pub leak_signed: f64,
    pub insertion: f64,
    pub stability: f64,
    pub runtime_ms: f64,
}

impl MetricRow {
    /// Derives the leakage ratios from `tdd` and `odd`, capped at
    /// [`LEAK_CAP`] in magnitude.
    pub fn new(tdd: f64, odd: f64, insertion: f64, stability: f64, runtime_ms: f64) -> Self {
        Self {
            tdd,
            odd,
            leak_abs: capped_leak_abs(tdd, odd),
            leak_signed: leak_signed(tdd, odd).clamp(-LEAK_CAP, LEAK_CAP),
            insertion,
            stability,
            runtime_ms,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.tdd, self.odd, self.leak_abs, self.leak_signed, self.insertion, self.stability, self.runtime_ms]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn capped_leak_abs(tdd: f64, odd: f64) -> f64 {
    leak_abs(tdd, odd).min(LEAK_CAP)
}

/// Computes every metric for one heatmap-producing method on one sample and
/// hands back the timed heatmap.
#[derive(Debug, Clone, Copy)]
pub struct Evaluation {
    pub k: f64,
    pub stability: StabilitySettings,
}

impl Evaluation {
    pub fn evaluate(
        &self,
        method: &dyn Explainer,
        adapter: &mut dyn ModelAdapter,
        image: &Image,
        class: usize,
        mask: &BinaryMask,
    ) -> Result<(MetricRow, crate::tensor::Heatmap)> {
        if mask.popcount() == 0 || mask.popcount() == mask.data().len() {
            return Err(Error::EmptyRegion("target mask must leave pixels both inside and outside".into()));
        }
        let (heatmap, runtime_ms) = time_explanation(method, adapter, image, class, mask)?;
        let tdd = target_deletion_drop(adapter, image, &heatmap, class, mask, self.k)?;
        let odd = offtarget_deletion_drop(adapter, image, &heatmap, class, mask, self.k)?;
        let insertion = insertion_gain(adapter, image, &heatmap, class, mask, self.k)?;
        let stab = stability_against(method, adapter, image, class, mask, &self.stability, heatmap.as_map())?;
        Ok((MetricRow::new(tdd, odd, insertion, stab, runtime_ms), heatmap))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FeatureBundle, FeatureShape};
    use crate::tensor::{minmax_normalize, Heatmap};

    fn probs(plane: &[f64]) -> ProbMap {
        let mut data = plane.to_vec();
        data.extend(plane.iter().map(|p| 1.0 - p));
        ProbMap::new(2, 2, plane.len() / 2, data, 1e-12).unwrap()
    }

    #[test]
    fn region_score_cases() {
        let p = probs(&[0.7, 0.7, 0.7, 0.7]);
        let m = BinaryMask::from_fn(2, 2, |y, _| y == 0);
        assert!((region_score(&p, 0, &m) - 0.7).abs() < 1e-6);
        let empty = BinaryMask::from_fn(2, 2, |_, _| false);
        assert_eq!(region_score(&p, 0, &empty), 0.0);
        let p = probs(&[1.0, 0.0, 0.0, 0.0]);
        let expect = 1.0 / (2.0 + EPSILON);
        assert_eq!(region_score(&p, 0, &m), expect);
        assert!((expect - 0.5).abs() < 1e-6);
    }

    #[test]
    fn drop_arithmetic() {
        assert!((relative_change(0.8, 0.4) - 0.5).abs() < 1e-5);
        assert!((relative_change(0.8, 0.9) + 0.125).abs() < 1e-5);
    }

    #[test]
    fn leak_arithmetic() {
        assert_eq!(leak_abs(0.3, 0.0), 0.0);
        assert!((leak_abs(0.5, -0.125) - 0.25).abs() < 1e-5);
        assert!((leak_abs(0.0, 0.1) - 1e5).abs() < 1e-6);
        assert_eq!(capped_leak_abs(0.0, 5.0), LEAK_CAP);
        let row = MetricRow::new(0.5, -0.125, 0.0, 1.0, 0.0);
        assert!(row.leak_signed < 0.0);
        assert_eq!(row.leak_abs, leak_abs(0.5, -0.125));
    }

    /// Class-0 probability at each pixel is the red channel value inside the
    /// mask region it was built for, 0.5 elsewhere. Pixels outside the mask
    /// can never influence the score.
    struct InsideReader {
        mask: BinaryMask,
    }

    impl ModelAdapter for InsideReader {
        fn num_classes(&self) -> usize {
            2
        }

        fn predict(&mut self, image: &Image) -> Result<ProbMap> {
            let red = image.channel(0);
            let p0: Vec<f64> = red
                .iter()
                .zip(self.mask.data())
                .map(|(r, m)| if *m { *r } else { 0.5 })
                .collect();
            let mut data = p0.clone();
            data.extend(p0.iter().map(|p| 1.0 - p));
            ProbMap::new(2, image.height(), image.width(), data, 1e-12)
        }

        fn features_and_gradient(&mut self, _: &Image, _: usize, _: &BinaryMask) -> Result<FeatureBundle> {
            FeatureBundle::new(FeatureShape { channels: 1, height: 1, width: 1 }, vec![0.0], vec![0.0])
        }
    }

    fn fixture() -> (Image, BinaryMask, Heatmap) {
        let x = Image::from_fn(6, 6, |c, y, x| ((c + 2 * y + 3 * x) % 7) as f64 / 6.0).unwrap();
        let m = BinaryMask::from_fn(6, 6, |y, x| y < 3 && x < 4);
        let a = minmax_normalize(&Map2::from_fn(6, 6, |y, x| ((5 * y + x) % 9) as f64)).unwrap();
        (x, m, a)
    }

    #[test]
    fn offtarget_is_zero_for_inside_reader() {
        let (x, m, a) = fixture();
        let mut model = InsideReader { mask: m.clone() };
        assert_eq!(offtarget_deletion_drop(&mut model, &x, &a, 0, &m, 0.2).unwrap(), 0.0);
        assert!(target_deletion_drop(&mut model, &x, &a, 0, &m, 0.2).unwrap() != 0.0);
    }

    #[test]
    fn empty_sets_give_zero() {
        let (x, m, _) = fixture();
        let mut model = InsideReader { mask: m.clone() };
        assert_eq!(occlusion_drop(&mut model, &x, 0, &m, &PixelSet::empty()).unwrap(), 0.0);
        assert_eq!(insertion_gain_for(&mut model, &x, 0, &m, &PixelSet::empty()).unwrap(), 0.0);
    }

    #[test]
    fn constant_image_insertion_is_zero() {
        let x = Image::filled(6, 6, [0.2, 0.5, 0.9]).unwrap();
        let (_, m, a) = fixture();
        let mut model = InsideReader { mask: m.clone() };
        assert_eq!(insertion_gain(&mut model, &x, &a, 0, &m, 0.2).unwrap(), 0.0);
    }

    #[test]
    fn insertion_restores_selected_pixels() {
        let (x, _, _) = fixture();
        let sel = PixelSet::new(vec![(1, 1), (4, 5)]);
        let (baseline, inserted) = insertion_image(&x, &sel);
        let means = x.channel_means();
        for c in 0..3 {
            for y in 0..6 {
                for xx in 0..6 {
                    assert_eq!(baseline.get(c, y, xx), means[c]);
                    let expect = if sel.coords().contains(&(y, xx)) { x.get(c, y, xx) } else { means[c] };
                    assert_eq!(inserted.get(c, y, xx), expect);
                }
            }
        }
    }

    struct ConstantMap;

    impl Explainer for ConstantMap {
        fn name(&self) -> String {
            "constant".into()
        }

        fn explain(&self, _: &mut dyn ModelAdapter, image: &Image, _: usize, _: &BinaryMask) -> Result<Heatmap> {
            minmax_normalize(&Map2::zeros(image.height(), image.width()))
        }
    }

    /// Heatmap = normalized red channel. Flip-equivariant and unaffected by
    /// identity-strength perturbations.
    struct RedChannel;

    impl Explainer for RedChannel {
        fn name(&self) -> String {
            "red".into()
        }

        fn explain(&self, _: &mut dyn ModelAdapter, image: &Image, _: usize, _: &BinaryMask) -> Result<Heatmap> {
            minmax_normalize(&Map2::new(image.height(), image.width(), image.channel(0).to_vec())?)
        }
    }

    #[test]
    fn stability_identities() {
        let (x, m, _) = fixture();
        let mut model = InsideReader { mask: m.clone() };
        let s = stability(&ConstantMap, &mut model, &x, 0, &m, &StabilitySettings::new(0.03, 0)).unwrap();
        assert_eq!(s, 1.0);
        let s = stability(&RedChannel, &mut model, &x, 0, &m, &StabilitySettings::new(0.0, 0)).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let s = stability(&RedChannel, &mut model, &x, 0, &m, &StabilitySettings::new(0.2, 0)).unwrap();
        assert!((-1.0..1.0).contains(&s));
    }

    #[test]
    fn timing_is_non_negative() {
        let (x, m, _) = fixture();
        let mut model = InsideReader { mask: m.clone() };
        let (_, ms) = time_explanation(&RedChannel, &mut model, &x, 0, &m).unwrap();
        assert!(ms >= 0.0);
    }

    #[test]
    fn evaluation_rejects_full_mask() {
        let (x, _, _) = fixture();
        let full = BinaryMask::from_fn(6, 6, |_, _| true);
        let mut model = InsideReader { mask: full.clone() };
        let eval = Evaluation { k: 0.2, stability: StabilitySettings::new(0.03, 0) };
        assert!(eval.evaluate(&RedChannel, &mut model, &x, 0, &full).unwrap_err().is_sample_skip());
    }
}

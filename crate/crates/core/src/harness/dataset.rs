//! Samples, target selection, the synthetic generator and the on-disk
//! `<id>.ppm` + `<id>_mask.pgm` dataset layout.

use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::netpbm;
use crate::error::{Error, Result};
use crate::tensor::{bilinear_upsample, BinaryMask, Image, LabelMask, Map2, BACKGROUND_LABEL, CHANNELS, IGNORE_LABEL};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub labels: LabelMask,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Image, labels: LabelMask) -> Result<Self> {
        let id = id.into();
        if image.height() != labels.height() || image.width() != labels.width() {
            return Err(Error::invalid(format!(
                "sample {id}: image is {}x{} but labels are {}x{}",
                image.height(),
                image.width(),
                labels.height(),
                labels.width()
            )));
        }
        Ok(Self { id, image, labels })
    }
}

/// Picks the most frequent foreground label (ignoring background and the
/// ignore label; smallest id wins ties) and returns it with its mask.
pub fn select_target(labels: &LabelMask) -> Result<(u8, BinaryMask)> {
    let mut counts = [0usize; 256];
    for &l in labels.data() {
        counts[l as usize] += 1;
    }
    let best = (0..=255u8)
        .filter(|&l| l != BACKGROUND_LABEL && l != IGNORE_LABEL && counts[l as usize] > 0)
        .max_by(|&a, &b| counts[a as usize].cmp(&counts[b as usize]).then(b.cmp(&a)));
    match best {
        Some(class) => Ok((class, labels.class_mask(class))),
        None => Err(Error::NoForeground),
    }
}

/// Largest foreground class id the synthetic generator uses by default.
pub const DEFAULT_SYNTH_CLASSES: u8 = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

/// One flat-coloured foreground shape of a synthetic sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthShape {
    pub kind: ShapeKind,
    pub class: u8,
    pub center: (f64, f64),
    pub half_extent: (f64, f64),
}

impl SynthShape {
    pub fn covers(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.center.0) / self.half_extent.0;
        let dx = (x as f64 + 0.5 - self.center.1) / self.half_extent.1;
        match self.kind {
            ShapeKind::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }
}

/// Flat colour for a class id, from the usual bit-interleaved segmentation
/// palette so that different classes never share a colour.
pub fn class_color(class: u8) -> [f64; CHANNELS] {
    let mut rgb = [0u8; 3];
    let mut c = class;
    for bit in 0..8 {
        for (ch, v) in rgb.iter_mut().enumerate() {
            *v |= ((c >> ch) & 1) << (7 - bit);
        }
        c >>= 3;
        if c == 0 {
            break;
        }
    }
    rgb.map(|v| v as f64 / 255.0)
}

/// The shapes a synthetic sample is built from, in drawing order.
pub fn synth_shapes(seed: u64, size: usize, max_class: u8) -> Vec<SynthShape> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a4d_91e5);
    let count = rng.random_range(1..=3usize).min(max_class as usize);
    let s = size as f64;
    sample_indices(&mut rng, max_class as usize, count)
        .into_iter()
        .map(|i| {
            let kind = if rng.random_bool(0.5) { ShapeKind::Rectangle } else { ShapeKind::Ellipse };
            let half_extent = (rng.random_range(s / 10.0..=s / 4.0), rng.random_range(s / 10.0..=s / 4.0));
            let center = (rng.random_range(s / 4.0..=3.0 * s / 4.0), rng.random_range(s / 4.0..=3.0 * s / 4.0));
            SynthShape { kind, class: i as u8 + 1, center, half_extent }
        })
        .collect()
}

/// Deterministic synthetic sample: 1–3 flat-coloured rectangles/ellipses of
/// distinct classes over a textured background. Later shapes occlude
/// earlier ones; the label map records the visible shape at every pixel.
pub fn synth_sample(seed: u64, size: usize) -> Result<Sample> {
    synth_sample_with(seed, size, DEFAULT_SYNTH_CLASSES)
}

pub fn synth_sample_with(seed: u64, size: usize, max_class: u8) -> Result<Sample> {
    if size < 16 {
        return Err(Error::invalid("synthetic samples need size >= 16"));
    }
    if max_class == 0 || max_class == IGNORE_LABEL {
        return Err(Error::invalid("synthetic class range must be 1..=254"));
    }
    let shapes = synth_shapes(seed, size, max_class);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.6));
    let freq = (rng.random_range(0.2..0.6), rng.random_range(0.2..0.6));
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));

    let n = size * size;
    let mut labels = vec![BACKGROUND_LABEL; n];
    let mut data = vec![0.0; CHANNELS * n];
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let top = shapes.iter().rev().find(|s| s.covers(y, x));
            match top {
                Some(shape) => {
                    labels[p] = shape.class;
                    let color = class_color(shape.class);
                    for c in 0..CHANNELS {
                        data[c * n + p] = color[c];
                    }
                }
                None => {
                    for c in 0..CHANNELS {
                        let wave = 0.12 * (freq.0 * y as f64 + freq.1 * x as f64 + phase[c]).sin();
                        let grain = rng.random_range(-0.05..0.05);
                        data[c * n + p] = (base[c] + wave + grain).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    let image = Image::new(size, size, data)?;
    let labels = LabelMask::new(size, size, labels)?;
    Sample::new(format!("synth-{seed}"), image, labels)
}

/// Resamples a sample to `size × size`: bilinear for the image, nearest
/// neighbour for labels.
pub fn resize_sample(sample: &Sample, size: usize) -> Result<Sample> {
    let (h, w) = (sample.image.height(), sample.image.width());
    if h == size && w == size {
        return Ok(sample.clone());
    }
    let mut data = Vec::with_capacity(CHANNELS * size * size);
    for c in 0..CHANNELS {
        let plane = Map2::new(h, w, sample.image.channel(c).to_vec())?;
        data.extend(bilinear_upsample(&plane, size, size).into_data());
    }
    let image = Image::from_clamped(size, size, data)?;
    let near = |dst: usize, src_len: usize| ((dst as f64 + 0.5) * src_len as f64 / size as f64).floor() as usize;
    let labels: Vec<u8> = (0..size * size)
        .map(|i| sample.labels.get(near(i / size, h).min(h - 1), near(i % size, w).min(w - 1)))
        .collect();
    Sample::new(sample.id.clone(), image, LabelMask::new(size, size, labels)?)
}

/// Sample ids of a `<id>.ppm` / `<id>_mask.pgm` directory, sorted.
pub fn directory_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn sample_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.ppm")), dir.join(format!("{id}_mask.pgm")))
}

pub fn load_sample(dir: &Path, id: &str) -> Result<Sample> {
    let (image_path, mask_path) = sample_paths(dir, id);
    let image = netpbm::read_ppm(&image_path)?;
    let labels = netpbm::read_labels(&mask_path)?;
    Sample::new(id, image, labels)
}

pub fn write_sample(dir: &Path, sample: &Sample) -> Result<()> {
    let (image_path, mask_path) = sample_paths(dir, &sample.id);
    netpbm::write_bytes(&image_path, &netpbm::encode_ppm(&sample.image))?;
    netpbm::write_bytes(&mask_path, &netpbm::encode_labels(&sample.labels))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_from_counts(counts: &[(u8, usize)]) -> LabelMask {
        let data: Vec<u8> = counts.iter().flat_map(|&(l, n)| std::iter::repeat_n(l, n)).collect();
        LabelMask::new(1, data.len(), data).unwrap()
    }

    #[test]
    fn target_is_most_frequent_foreground() {
        let labels = labels_from_counts(&[(0, 100), (1, 50), (2, 30)]);
        let (class, mask) = select_target(&labels).unwrap();
        assert_eq!(class, 1);
        assert_eq!(mask.popcount(), 50);
        assert!(mask.data()[100..150].iter().all(|b| *b));
    }

    #[test]
    fn target_tie_takes_smallest_id() {
        let labels = labels_from_counts(&[(0, 10), (7, 5), (3, 5)]);
        assert_eq!(select_target(&labels).unwrap().0, 3);
    }

    #[test]
    fn target_ignores_void_label() {
        let labels = labels_from_counts(&[(255, 40), (4, 2)]);
        assert_eq!(select_target(&labels).unwrap().0, 4);
        let only_bg = labels_from_counts(&[(0, 10), (255, 3)]);
        assert!(matches!(select_target(&only_bg), Err(Error::NoForeground)));
    }

    #[test]
    fn synth_is_deterministic_and_has_foreground() {
        for seed in 0..50 {
            let a = synth_sample(seed, 32).unwrap();
            assert_eq!(a, synth_sample(seed, 32).unwrap());
            let (_, mask) = select_target(&a.labels).unwrap();
            assert!(mask.popcount() > 0 && mask.popcount() < 32 * 32);
        }
        assert_ne!(synth_sample(0, 32).unwrap().image, synth_sample(1, 32).unwrap().image);
        assert!(synth_sample(0, 15).is_err());
    }

    #[test]
    fn synth_labels_match_shapes() {
        for seed in 0..20 {
            let size = 40;
            let sample = synth_sample(seed, size).unwrap();
            let shapes = synth_shapes(seed, size, DEFAULT_SYNTH_CLASSES);
            let classes: std::collections::HashSet<u8> = shapes.iter().map(|s| s.class).collect();
            assert_eq!(classes.len(), shapes.len(), "classes are distinct");
            for shape in &shapes {
                let visible = (0..size * size)
                    .filter(|&p| {
                        let (y, x) = (p / size, p % size);
                        shapes.iter().rev().find(|s| s.covers(y, x)).map(|s| s.class) == Some(shape.class)
                    })
                    .count();
                let labelled = sample.labels.data().iter().filter(|&&l| l == shape.class).count();
                assert_eq!(visible, labelled);
            }
            let color = class_color(shapes.last().unwrap().class);
            let (cy, cx) = shapes.last().unwrap().center;
            let (y, x) = (cy as usize, cx as usize);
            for c in 0..3 {
                assert_eq!(sample.image.get(c, y, x), color[c]);
            }
        }
    }

    #[test]
    fn palette_is_distinct() {
        let colors: Vec<_> = (1..=40u8).map(class_color).map(|c| c.map(|v| (v * 255.0) as u8)).collect();
        let unique: std::collections::HashSet<_> = colors.iter().collect();
        assert_eq!(unique.len(), colors.len());
        assert_eq!(class_color(1), [128.0 / 255.0, 0.0, 0.0]);
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for seed in [3, 1, 2] {
            let mut s = synth_sample(seed, 16).unwrap();
            s.id = format!("img{seed}");
            write_sample(dir.path(), &s).unwrap();
        }
        let ids = directory_ids(dir.path()).unwrap();
        assert_eq!(ids, vec!["img1", "img2", "img3"]);
        let back = load_sample(dir.path(), "img2").unwrap();
        assert_eq!(back.labels, synth_sample(2, 16).unwrap().labels);
        assert!(load_sample(dir.path(), "missing").is_err());
    }

    #[test]
    fn resize_keeps_labels_categorical() {
        let s = synth_sample(5, 32).unwrap();
        let r = resize_sample(&s, 20).unwrap();
        assert_eq!((r.image.height(), r.labels.width()), (20, 20));
        let original: std::collections::HashSet<u8> = s.labels.data().iter().copied().collect();
        assert!(r.labels.data().iter().all(|l| original.contains(l)));
    }
}

//! Built-in correctness checks run by `segattr selftest`.
//!
//! Each check compares a production code path against an independent,
//! slower recomputation on seeded inputs.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attribution::{dea, ega, ria, ria_deltas, FusionParams, GridSpec};
use crate::error::Result;
use crate::metrics::region_score;
use crate::model::{fd_gradient_oracle, gradient_relative_error, MicroModel, ModelAdapter};
use crate::tensor::{BinaryMask, Image, CHANNELS};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

/// A seeded `(model, image, class, mask)` case with a non-empty,
/// non-full rectangular mask.
pub struct Triple {
    pub model: MicroModel,
    pub image: Image,
    pub class: usize,
    pub mask: BinaryMask,
}

pub fn random_triple(seed: u64, size: usize, classes: usize) -> Result<Triple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = MicroModel::new(rng.random(), classes)?;
    let image = Image::from_fn(size, size, |_, _, _| rng.random_range(0.0..=1.0))?;
    let class = rng.random_range(0..classes);
    let y0 = rng.random_range(0..size - 1);
    let x0 = rng.random_range(0..size - 1);
    let y1 = rng.random_range(y0 + 1..=size.min(y0 + size / 2 + 1));
    let x1 = rng.random_range(x0 + 1..=size.min(x0 + size / 2 + 1));
    let mask = BinaryMask::from_fn(size, size, |y, x| (y0..y1).contains(&y) && (x0..x1).contains(&x));
    Ok(Triple { model, image, class, mask })
}

/// Analytic feature gradients against central finite differences.
pub fn gradient_check(triples: u64, size: usize, step: f64, tolerance: f64) -> Result<Check> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..triples {
        let mut t = random_triple(seed, size, 5)?;
        let analytic = t.model.features_and_gradient(&t.image, t.class, &t.mask)?;
        let numeric = fd_gradient_oracle(&t.model, &t.image, t.class, &t.mask, step)?;
        worst = worst.max(gradient_relative_error(&analytic.gradient, &numeric));
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Check {
        name: "gradient",
        passed: worst < tolerance,
        detail: format!("{triples} triples at {size}x{size}, h={step}: max relative error {worst:.3e} (< {tolerance:e}) in {secs:.2}s"),
    })
}

/// Brute-force RIA delta for one cell: per-channel means computed here,
/// pixels overwritten here, fresh predictions scored here.
pub fn brute_force_cell_delta(
    adapter: &mut dyn ModelAdapter,
    image: &Image,
    class: usize,
    mask: &BinaryMask,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> Result<f64> {
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    let mut data = image.data().to_vec();
    for c in 0..CHANNELS {
        let plane = &image.data()[c * n..(c + 1) * n];
        let mean = plane.iter().sum::<f64>() / n as f64;
        // Snap the mean into the plane's range, as the production mean does
        // for constant planes; the clamp is a no-op otherwise.
        let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = mean.clamp(lo, hi);
        for y in rows.clone() {
            for x in cols.clone() {
                data[c * n + y * w + x] = mean;
            }
        }
    }
    let occluded = Image::new(h, w, data)?;
    let before = region_score(&adapter.predict(image)?, class, mask);
    let after = region_score(&adapter.predict(&occluded)?, class, mask);
    Ok(before - after)
}

/// Every RIA cell delta against [`brute_force_cell_delta`].
pub fn ria_oracle_check(samples: u64, grids: &[usize], tolerance: f64) -> Result<Check> {
    let mut worst = 0.0f64;
    let mut cells = 0usize;
    for seed in 0..samples {
        let mut t = random_triple(1000 + seed, 16, 4)?;
        let (h, w) = (t.image.height(), t.image.width());
        for &g in grids {
            let deltas = ria_deltas(&mut t.model, &t.image, t.class, &t.mask, GridSpec::new(g)?)?;
            let mut i = 0;
            for r in 0..g {
                for c in 0..g {
                    let rows = r * h / g..(r + 1) * h / g;
                    let cols = c * w / g..(c + 1) * w / g;
                    let expected = brute_force_cell_delta(&mut t.model, &t.image, t.class, &t.mask, rows, cols)?;
                    worst = worst.max((deltas[i] - expected).abs());
                    i += 1;
                }
            }
            cells += deltas.len();
        }
    }
    Ok(Check {
        name: "ria-oracle",
        passed: worst < tolerance,
        detail: format!("{cells} cells over {samples} samples, grids {grids:?}: max |diff| {worst:.3e} (< {tolerance:e})"),
    })
}

/// DEA at its boundary parameters must reproduce its inputs bit for bit.
pub fn fusion_identity_check(samples: u64) -> Result<Check> {
    let mut failures = Vec::new();
    let grid = GridSpec::new(4)?;
    for seed in 0..samples {
        let mut t = random_triple(2000 + seed, 16, 4)?;
        let e = ega(&mut t.model, &t.image, t.class, &t.mask)?;
        let r = ria(&mut t.model, &t.image, t.class, &t.mask, grid)?;
        let d = dea(&mut t.model, &t.image, t.class, &t.mask, FusionParams::new(1.0, 0.0)?, grid)?;
        if d != e {
            failures.push(format!("seed {seed}: DEA(1,0) != EGA"));
        }
        for beta in [0.0, 0.35] {
            let d = dea(&mut t.model, &t.image, t.class, &t.mask, FusionParams::new(0.0, beta)?, grid)?;
            if d != r {
                failures.push(format!("seed {seed}: DEA(0,{beta}) != RIA"));
            }
        }
    }
    Ok(Check {
        name: "fusion-identities",
        passed: failures.is_empty(),
        detail: if failures.is_empty() {
            format!("{samples} samples, alpha=1/beta=0 and alpha=0/beta in {{0, 0.35}} bit-identical")
        } else {
            failures.join("; ")
        },
    })
}

pub fn run_all() -> Result<Vec<Check>> {
    Ok(vec![
        gradient_check(20, 16, 1e-3, 1e-3)?,
        ria_oracle_check(10, &[2, 4, 7], 1e-9)?,
        fusion_identity_check(5)?,
    ])
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segattr::attribution::{ria_deltas, Explainer, GridSpec, Method, MethodName};
use segattr::harness::aggregate::{aggregate_files, aggregate_runs, mean_std};
use segattr::harness::dataset::{select_target, synth_sample_with, write_sample};
use segattr::harness::{run_benchmark, AdapterSpec, DatasetSpec, RunConfig, SampleRecord};
use segattr::metrics::{
    occlusion_drop, offtarget_deletion_drop, region_score, stability, target_deletion_drop, StabilitySettings,
};
use segattr::model::{MicroModel, ModelAdapter};
use segattr::tensor::{minmax_normalize, BinaryMask, Heatmap, Image, Map2, PixelSet};

const EPS: f64 = 1e-6;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_segattr")
}

fn random_triple(seed: u64) -> (MicroModel, Image, usize, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce_0000 + seed);
    let classes = rng.random_range(2..8);
    let model = MicroModel::new(rng.random(), classes).unwrap();
    let image = Image::from_fn(16, 16, |_, _, _| rng.random_range(0.0..=1.0)).unwrap();
    let class = rng.random_range(0..classes);
    let mask = loop {
        let bits: Vec<bool> = (0..256).map(|_| rng.random_bool(0.3)).collect();
        let m = BinaryMask::from_bools(16, 16, bits).unwrap();
        if m.popcount() > 0 {
            break m;
        }
    };
    (model, image, class, mask)
}

/// Central differences of the region score over every feature activation,
/// evaluated through the head only.
fn finite_differences(model: &MicroModel, image: &Image, class: usize, mask: &BinaryMask, h: f64) -> Vec<f64> {
    let mut acts = model.features(image).unwrap();
    let shape = model.feature_shape(image.height(), image.width()).unwrap();
    (0..acts.len())
        .map(|i| {
            let orig = acts[i];
            acts[i] = orig + h;
            let up = model.head_region_score(&acts, shape, class, mask);
            acts[i] = orig - h;
            let down = model.head_region_score(&acts, shape, class, mask);
            acts[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let (mut model, image, class, mask) = random_triple(seed);
        let analytic = model.features_and_gradient(&image, class, &mask).unwrap().gradient;
        let numeric = finite_differences(&model, &image, class, &mask, 1e-3);
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        ensure(scale > 0.0, format!("triple {seed}: zero reference gradient"))?;
        let err = analytic.iter().zip(&numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-3, format!("max relative error {worst:.3e} >= 1e-3"))?;
    ensure(secs < 10.0, format!("took {secs:.1}s >= 10s"))?;
    Ok(format!("20 triples at 16x16, h=1e-3: max relative error {worst:.2e}, {secs:.2}s"))
}

/// Occludes `rows × cols` with per-channel image means and rescores with a
/// fresh prediction.
fn oracle_cell_delta(
    model: &mut MicroModel,
    image: &Image,
    class: usize,
    mask: &BinaryMask,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> f64 {
    let (h, w) = (image.height(), image.width());
    let n = h * w;
    let mut data = image.data().to_vec();
    for c in 0..3 {
        let plane = &image.data()[c * n..(c + 1) * n];
        let mean = plane.iter().sum::<f64>() / n as f64;
        for y in rows.clone() {
            for x in cols.clone() {
                data[c * n + y * w + x] = mean.clamp(0.0, 1.0);
            }
        }
    }
    let occluded = Image::new(h, w, data).unwrap();
    let before = region_score(&model.predict(image).unwrap(), class, mask);
    let after = region_score(&model.predict(&occluded).unwrap(), class, mask);
    before - after
}

fn ria_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut cells = 0;
    for i in 0..10u64 {
        let sample = synth_sample_with(100 + i, 32, 20).unwrap();
        let (class, mask) = select_target(&sample.labels).unwrap();
        let (class, image) = (class as usize, &sample.image);
        let mut model = MicroModel::new(i, 21).unwrap();
        let mut oracle_model = MicroModel::new(i, 21).unwrap();
        for g in [2usize, 4, 7] {
            let deltas = ria_deltas(&mut model, image, class, &mask, GridSpec::new(g).unwrap()).unwrap();
            ensure(deltas.len() == g * g, format!("g={g}: {} deltas", deltas.len()))?;
            for r in 0..g {
                for c in 0..g {
                    let rows = r * 32 / g..(r + 1) * 32 / g;
                    let cols = c * 32 / g..(c + 1) * 32 / g;
                    let expected = oracle_cell_delta(&mut oracle_model, image, class, &mask, rows, cols);
                    worst = worst.max((deltas[r * g + c] - expected).abs());
                    cells += 1;
                }
            }
        }
    }
    ensure(worst < 1e-9, format!("max |diff| {worst:.3e} >= 1e-9"))?;
    Ok(format!("{cells} cells over 10 samples, g in {{2,4,7}}: max |diff| {worst:.2e}"))
}

fn explain(dir: &Path, id: &str, method: &str, extra: &[&str]) -> Result<(Vec<u8>, Vec<u8>), String> {
    let out = dir.join(format!("{id}_{method}_{}.pgm", extra.join("_")));
    let values = out.with_extension("json");
    let status = Command::new(bin())
        .args(["explain", "--grid", "8", "--method", method])
        .arg("--image")
        .arg(dir.join(format!("{id}.ppm")))
        .arg("--mask")
        .arg(dir.join(format!("{id}_mask.pgm")))
        .arg("--out")
        .arg(&out)
        .arg("--values")
        .arg(&values)
        .args(extra)
        .status()
        .map_err(|e| e.to_string())?;
    ensure(status.success(), format!("explain {method} {extra:?} exited with {status}"))?;
    Ok((std::fs::read(&out).unwrap(), std::fs::read(&values).unwrap()))
}

fn fusion_identities() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut checked = 0;
    for seed in 0..3 {
        let mut sample = synth_sample_with(seed, 32, 20).unwrap();
        sample.id = format!("s{seed}");
        write_sample(dir.path(), &sample).unwrap();
        let ega = explain(dir.path(), &sample.id, "ega", &[])?;
        let ria = explain(dir.path(), &sample.id, "ria", &[])?;
        let dea_g = explain(dir.path(), &sample.id, "dea", &["--alpha", "1", "--beta", "0"])?;
        ensure(dea_g == ega, format!("{}: DEA(1,0) differs from EGA", sample.id))?;
        for beta in ["0", "0.35"] {
            let dea_r = explain(dir.path(), &sample.id, "dea", &["--alpha", "0", "--beta", beta])?;
            ensure(dea_r == ria, format!("{}: DEA(0,{beta}) differs from RIA", sample.id))?;
        }
        checked += 1;
    }
    Ok(format!(
        "{checked} samples via `segattr explain`: PGM and full-precision values byte-identical for DEA(1,0)=EGA, DEA(0,0)=RIA, DEA(0,0.35)=RIA"
    ))
}

/// A method whose heatmap ignores its input.
struct ConstantMethod;

impl Explainer for ConstantMethod {
    fn name(&self) -> String {
        "constant".into()
    }

    fn explain(
        &self,
        _adapter: &mut dyn ModelAdapter,
        image: &Image,
        _class: usize,
        _mask: &BinaryMask,
    ) -> segattr::Result<Heatmap> {
        minmax_normalize(&Map2::from_fn(image.height(), image.width(), |_, _| 0.3))
    }
}

fn small_config(dir: &Path, count: usize, output: &str) -> RunConfig {
    let mut c = RunConfig::new(
        DatasetSpec::Synthetic { name: None, count, size: 32, seed: None, max_class: 20 },
        AdapterSpec::Micro { seed: None, classes: 21 },
        dir.join(output),
    );
    c.grid = 4;
    c
}

fn metric_identities() -> Outcome {
    let mut notes = Vec::new();

    // Empty occlusion set.
    for i in 0..20u64 {
        let s = synth_sample_with(i, 32, 20).unwrap();
        let (c, m) = select_target(&s.labels).unwrap();
        let mut model = MicroModel::new(i, 21).unwrap();
        let tdd = occlusion_drop(&mut model, &s.image, c as usize, &m, &PixelSet::empty()).unwrap();
        ensure(tdd == 0.0, format!("sample {i}: TDD with empty set = {tdd}"))?;
    }
    notes.push("TDD(empty set) = 0 exactly on 20 samples".to_string());

    // LeakAbs recomputation on every emitted record.
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path(), 10, "leak.jsonl");
    config.seed = 5;
    let summary = run_benchmark(&config).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(&summary.output).unwrap();
    let mut records = 0;
    for line in text.lines() {
        let r: SampleRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let expected = (r.odd.abs() / (r.tdd.abs() + EPS)).min(1e6);
        ensure(
            (r.leak_abs - expected).abs() <= 1e-9,
            format!("{} {}: leak_abs {} vs {expected}", r.sample_id, r.method, r.leak_abs),
        )?;
        records += 1;
    }
    ensure(records == 40, format!("expected 40 records, got {records}"))?;
    notes.push(format!("LeakAbs recomputed on {records} emitted records"));

    // Constant-map method.
    for i in 0..5u64 {
        let s = synth_sample_with(i, 32, 20).unwrap();
        let (c, m) = select_target(&s.labels).unwrap();
        let mut model = MicroModel::new(i, 21).unwrap();
        let st = stability(&ConstantMethod, &mut model, &s.image, c as usize, &m, &StabilitySettings::new(0.03, i))
            .unwrap();
        ensure(st == 1.0, format!("sample {i}: constant-method stability {st}"))?;
    }
    notes.push("constant-map stability = 1.0".to_string());

    // Monotone rescaling A -> A^3.
    for i in 0..20u64 {
        let s = synth_sample_with(200 + i, 32, 20).unwrap();
        let (c, m) = select_target(&s.labels).unwrap();
        let mut model = MicroModel::new(i, 21).unwrap();
        let method = [Method::Gpa, Method::Ega, Method::Ria { grid: GridSpec::new(4).unwrap() }][i as usize % 3];
        let a = method.explain(&mut model, &s.image, c as usize, &m).unwrap().into_map();
        let cubed = a.map(|v| v * v * v);
        for (name, f) in [
            ("TDD", target_deletion_drop as fn(&mut dyn ModelAdapter, &Image, &Map2, usize, &BinaryMask, f64) -> _),
            ("ODD", offtarget_deletion_drop),
        ] {
            let x = f(&mut model, &s.image, &a, c as usize, &m, 0.2).unwrap();
            let y = f(&mut model, &s.image, &cubed, c as usize, &m, 0.2).unwrap();
            ensure(x == y, format!("sample {i}: {name} {x} vs {y} under A^3"))?;
        }
    }
    notes.push("TDD/ODD unchanged under A -> A^3 on 20 samples".to_string());
    Ok(notes.join("; "))
}

fn mean_of(records: &[SampleRecord], method: MethodName, f: fn(&SampleRecord) -> f64) -> f64 {
    let v: Vec<f64> = records.iter().filter(|r| r.method == method).map(f).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn trend_reproduction() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for seed in [0u64, 1] {
        let mut config = RunConfig::new(
            DatasetSpec::Synthetic { name: None, count: 100, size: 64, seed: None, max_class: 20 },
            AdapterSpec::Micro { seed: None, classes: 21 },
            dir.path().join(format!("trend{seed}.jsonl")),
        );
        config.seed = seed;
        config.grid = 8;
        let start = Instant::now();
        let summary = run_benchmark(&config).map_err(|e| e.to_string())?;
        let secs = start.elapsed().as_secs_f64();
        let r = &summary.records;
        ensure(r.len() == 400, format!("seed {seed}: {} records", r.len()))?;
        let tdd = |m| mean_of(r, m, |x| x.tdd);
        let stab = |m| mean_of(r, m, |x| x.stability);
        use MethodName::*;
        let checks = [
            ("TDD(RIA) > TDD(GPA)", tdd(Ria), tdd(Gpa), tdd(Ria) > tdd(Gpa)),
            ("TDD(DEA) >= TDD(EGA)", tdd(Dea), tdd(Ega), tdd(Dea) >= tdd(Ega)),
            ("stab(EGA) > stab(RIA)", stab(Ega), stab(Ria), stab(Ega) > stab(Ria)),
            ("stab(DEA) > stab(RIA)", stab(Dea), stab(Ria), stab(Dea) > stab(Ria)),
        ];
        for (name, lhs, rhs, ok) in checks {
            let line = format!("seed {seed}: {name} [{lhs:.6} vs {rhs:.6}] {}", if ok { "holds" } else { "VIOLATED" });
            if !ok {
                failures.push(line.clone());
            }
            lines.push(line);
        }
        lines.push(format!("seed {seed}: {secs:.0}s"));
        if secs >= 600.0 {
            failures.push(format!("seed {seed}: runtime {secs:.0}s >= 600s"));
        }
    }
    if failures.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(format!("{} | all: {}", failures.join("; "), lines.join("; ")))
    }
}

fn strip_runtime(text: &str) -> String {
    text.lines()
        .map(|l| match l.find(",\"runtime_ms\":") {
            Some(i) => format!("{}}}", &l[..i]),
            None => l.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    std::fs::write(
        &cfg,
        r#"{"run_id": "det", "dataset": {"kind": "synthetic", "count": 6, "size": 32},
            "adapter": {"kind": "micro"}, "grid": 4, "seed": 3, "output": "run.jsonl"}"#,
    )
    .unwrap();
    let mut outputs = Vec::new();
    for name in ["a.jsonl", "b.jsonl"] {
        let status = Command::new(bin())
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--output")
            .arg(dir.path().join(name))
            .stdout(std::process::Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), format!("run exited with {status}"))?;
        outputs.push(std::fs::read_to_string(dir.path().join(name)).unwrap());
    }
    ensure(outputs[0].lines().count() == 24, format!("{} records", outputs[0].lines().count()))?;
    ensure(outputs[0].contains("\"runtime_ms\":"), "records lack runtime_ms")?;
    ensure(strip_runtime(&outputs[0]) == strip_runtime(&outputs[1]), "record files differ beyond runtime_ms")?;
    Ok("two `segattr run` invocations: 24 records byte-identical after dropping runtime_ms".into())
}

fn record(run: &str, tdd: f64) -> SampleRecord {
    SampleRecord {
        run_id: run.into(),
        dataset: "d".into(),
        seed: 0,
        sample_id: format!("{run}-{tdd}"),
        method: MethodName::Ria,
        target_class: 1,
        tdd,
        odd: 0.0,
        leak_abs: 0.0,
        leak_signed: 0.0,
        insertion: 0.0,
        stability: 1.0,
        runtime_ms: 1.0,
    }
}

fn write_run(dir: &Path, name: &str, records: &[SampleRecord]) -> PathBuf {
    let path = dir.join(name);
    let text: String = records.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
    std::fs::write(&path, text).unwrap();
    path
}

fn aggregation_arithmetic() -> Outcome {
    let (m, s) = mean_std(&[0.4, 0.5]);
    // Hand arithmetic: deviations ±0.05, (0.0025 + 0.0025) / (2 - 1) = 0.005.
    ensure((m - 0.45).abs() < 1e-12, format!("mean {m}"))?;
    ensure((s - 0.0707).abs() < 1e-4, format!("std {s}"))?;
    ensure((s - 0.005f64.sqrt()).abs() < 1e-15, format!("std {s} vs sqrt(0.005)"))?;

    let dir = tempfile::tempdir().unwrap();
    // Unequal sample counts; run means 0.4 and 0.5.
    let a = write_run(dir.path(), "a.jsonl", &[record("a", 0.3), record("a", 0.5)]);
    let b = write_run(dir.path(), "b.jsonl", &[record("b", 0.5), record("b", 0.2), record("b", 0.8)]);
    let rows = aggregate_files(&[a.clone(), b]).map_err(|e| e.to_string())?;
    let tdd = rows.iter().find(|r| r.metric == "tdd").unwrap();
    ensure((tdd.mean - 0.45).abs() < 1e-12 && (tdd.std - 0.0707).abs() < 1e-4, format!("files: {tdd:?}"))?;

    let single = aggregate_files(std::slice::from_ref(&a)).map_err(|e| e.to_string())?;
    ensure(single.iter().all(|r| r.std == 0.0 && r.runs == 1), "single run has non-zero std")?;

    let run = vec![record("a", 0.3), record("a", 0.5)];
    let once = aggregate_runs(std::slice::from_ref(&run));
    let twice = aggregate_runs(&[run.clone(), run]);
    for (x, y) in once.iter().zip(&twice) {
        ensure(x.mean == y.mean && y.std == 0.0, format!("duplicated run changed {}: {x:?} vs {y:?}", x.metric))?;
    }
    Ok(format!("[0.4, 0.5] -> ({m}, {s:.6}); single run std 0; duplicated run keeps mean, std 0"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient-correctness", gradient_correctness),
        ("ria-oracle-equivalence", ria_oracle),
        ("fusion-identities", fusion_identities),
        ("metric-identities", metric_identities),
        ("trend-reproduction", trend_reproduction),
        ("determinism", determinism),
        ("aggregation-arithmetic", aggregation_arithmetic),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

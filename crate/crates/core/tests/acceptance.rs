//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always reach stdout.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use callprobe::classifiers::ProbeFamily;
use callprobe::dsp::{mfcc_sequence, SpectralConfig, Waveform};
use callprobe::eval::{average_precision, roc_auc_binary};
use callprobe::runner::{
    generate_layer_stores, generate_synthetic_store, layerwise_sweep, run_experiment, ExperimentResults,
    ExperimentSpec, SynthSpec,
};
use callprobe::store::{
    grid_aggregate, read_store, write_store, EmbeddingGrid, EmbeddingSequence, GridAggregation,
    SegmentEntry, StoreManifest,
};
use callprobe::matrix::Matrix;
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration, what: &str) -> Result<(), String> {
    let el = start.elapsed();
    ensure(el < limit, format!("{what} took {el:.1?}, limit {limit:?}"))
}

fn metric_oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(20240601);
    let mut worst_auc: f64 = 0.0;
    let mut ap_mismatch = 0;
    for i in 0..1000 {
        let n = rng.gen_range(2..=200);
        let levels = [2, 3, 5, 10, 50, 100_000][i % 6];
        let (s, p) = tied_fixture(&mut rng, n, levels);
        let auc = roc_auc_binary(&s, &p).map_err(|e| e.to_string())?;
        worst_auc = worst_auc.max((auc - brute_auc(&s, &p)).abs());
        let ap = average_precision(&s, &p).map_err(|e| e.to_string())?;
        if ap != prefix_ap(&s, &p) {
            ap_mismatch += 1;
        }
    }
    ensure(worst_auc <= 1e-12, format!("max AUC deviation {worst_auc:e}"))?;
    ensure(ap_mismatch == 0, format!("{ap_mismatch} AP fixtures differ from the prefix oracle"))?;
    within(start, Duration::from_secs(30), "oracle comparison")?;
    Ok(format!(
        "1000 AUC + 1000 AP fixtures, max AUC deviation {worst_auc:e}, AP exact, {:.1?}",
        start.elapsed()
    ))
}

fn hand_checked_metrics() -> Outcome {
    let b = |v: &[u8]| v.iter().map(|&x| x == 1).collect::<Vec<_>>();
    let auc = roc_auc_binary(&[0.9, 0.8, 0.7, 0.6], &b(&[1, 0, 1, 0])).map_err(|e| e.to_string())?;
    ensure(auc == 0.75, format!("AUC {auc} != 0.75"))?;
    let ap = average_precision(&[3.0, 2.0, 1.0], &b(&[1, 0, 1])).map_err(|e| e.to_string())?;
    // 5/6 has no exact binary form; accept the two doubles adjacent to it
    ensure((ap - 5.0 / 6.0).abs() <= f64::EPSILON, format!("AP {ap} != 5/6"))?;
    let ties = roc_auc_binary(&[0.3; 7], &b(&[1, 0, 0, 1, 0, 1, 1])).map_err(|e| e.to_string())?;
    ensure(ties == 0.5, format!("all-ties AUC {ties} != 0.5"))?;
    Ok(format!("AUC 0.75 exact, AP {ap} (nearest-double distance to 5/6: {:e}), all-ties AUC 0.5 exact", (ap - 5.0 / 6.0).abs()))
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let mut worst: (f64, String) = (0.0, String::new());
    for family in ProbeFamily::ALL {
        for layers in [1, 2] {
            for draw in 0..20 {
                let err = gradient_check(family, layers, draw);
                if !(err < 1e-4) {
                    return Err(format!("{} x{layers} draw {draw}: relative error {err:e}", family.label()));
                }
                if err > worst.0 {
                    worst = (err, format!("{} x{layers}", family.label()));
                }
            }
        }
    }
    within(start, Duration::from_secs(120), "gradient checks")?;
    Ok(format!(
        "5 families x {{1,2}} layers x 20 draws, worst {:e} ({}), {:.1?}",
        worst.0,
        worst.1,
        start.elapsed()
    ))
}

fn mfcc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rates = [8000u32, 16000, 22050, 44100];
    let mut worst: f64 = 0.0;
    let fixtures = 12;
    for i in 0..fixtures {
        let sr = rates[i % rates.len()];
        let n = (sr as f64 * rng.gen_range(0.04..0.12)) as usize;
        let f0 = rng.gen_range(50.0..sr as f64 / 2.5);
        let amp = 10f64.powf(rng.gen_range(-3.0..0.5));
        let x: Vec<f64> = (0..n)
            .map(|t| {
                amp * ((2.0 * std::f64::consts::PI * f0 * t as f64 / sr as f64).sin() + 0.3 * rng.gen_range(-1.0..1.0))
            })
            .collect();
        let cfg = SpectralConfig::mfcc().fitted_to(sr);
        let got = mfcc_sequence(&Waveform::mono(x.clone(), sr).map_err(|e| e.to_string())?, &cfg)
            .map_err(|e| e.to_string())?;
        let want = oracle_mfcc(
            &x,
            sr,
            &MfccOracleConfig {
                frame_len: 0.025,
                stride: 0.010,
                n_fft: cfg.n_fft,
                n_mels: 128,
                n_ceps: 40,
                floor: 1e-10,
            },
        );
        ensure(got.frames.rows() == want.len(), format!("fixture {i}: frame count differs"))?;
        for (t, row) in want.iter().enumerate() {
            for (k, &w) in row.iter().enumerate() {
                let rel = (got.frames.get(t, k) - w).abs() / w.abs().max(1.0);
                worst = worst.max(rel);
            }
        }
    }
    ensure(worst <= 1e-6, format!("max relative deviation {worst:e}"))?;

    let zero = Waveform::mono(vec![0.0; 1600], 16000).map_err(|e| e.to_string())?;
    let z = mfcc_sequence(&zero, &SpectralConfig::mfcc()).map_err(|e| e.to_string())?;
    let c0 = (128f64).sqrt() * 1e-10f64.ln();
    for t in 0..z.frames.rows() {
        for k in 0..40 {
            let want = if k == 0 { c0 } else { 0.0 };
            let d = (z.frames.get(t, k) - want).abs();
            ensure(d <= 1e-9, format!("zero signal frame {t} coefficient {k} off by {d:e}"))?;
        }
    }
    Ok(format!("{fixtures} fixtures at 8-44.1 kHz, max relative deviation {worst:e}; zero signal exact"))
}

fn lr_spec(out: &Path, stores: Vec<std::path::PathBuf>, plan: std::path::PathBuf) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(stores, plan, out.to_path_buf());
    spec.families = vec![ProbeFamily::Lr];
    spec.write_checkpoints = false;
    spec
}

fn macro_of(r: &ExperimentResults) -> (f64, f64) {
    let f = &r.families[0];
    (f.retrain.mean_auc, f.retrain.mean_ap)
}

fn end_to_end(dir: &Path) -> Outcome {
    let start = Instant::now();
    let synth = SynthSpec {
        classes: 4,
        per_class: 125,
        dim: 16,
        separation: 5.0,
        k: 5,
        ..SynthSpec::default()
    };
    let data = generate_synthetic_store(&synth, &dir.join("sep5")).map_err(|e| e.to_string())?;
    let res = run_experiment(&lr_spec(&dir.join("sep5/out"), data.stores, data.fold_plan)).map_err(|e| e.to_string())?;
    let (auc, map) = macro_of(&res);
    ensure(auc >= 0.99, format!("separable macro AUC {auc:.4} < 0.99"))?;
    ensure(map >= 0.95, format!("separable mAP {map:.4} < 0.95"))?;

    let chance = SynthSpec {
        separation: 0.0,
        ..synth
    };
    let data = generate_synthetic_store(&chance, &dir.join("sep0")).map_err(|e| e.to_string())?;
    let res = run_experiment(&lr_spec(&dir.join("sep0/out"), data.stores, data.fold_plan)).map_err(|e| e.to_string())?;
    let (auc0, _) = macro_of(&res);
    ensure((0.45..=0.55).contains(&auc0), format!("chance macro AUC {auc0:.4} outside [0.45, 0.55]"))?;
    within(start, Duration::from_secs(300), "end-to-end runs")?;
    Ok(format!(
        "separation 5: AUC {auc:.4}, mAP {map:.4}; separation 0: AUC {auc0:.4}; {:.1?}",
        start.elapsed()
    ))
}

fn protocol_integrity(dir: &Path) -> Outcome {
    let synth = SynthSpec {
        per_class: 60,
        separation: 1.0,
        ..SynthSpec::default()
    };
    let data = generate_synthetic_store(&synth, &dir.join("data")).map_err(|e| e.to_string())?;
    let mut spec = lr_spec(&dir.join("a"), data.stores.clone(), data.fold_plan.clone());
    spec.families = vec![ProbeFamily::Lr, ProbeFamily::Mlp];
    spec.seed = 42;
    let first = run_experiment(&spec).map_err(|e| format!("leakage or run failure: {e}"))?;
    ensure(first.leakage_checks > 0, "leakage guard never consulted")?;
    spec.output_dir = dir.join("b");
    run_experiment(&spec).map_err(|e| e.to_string())?;
    spec.output_dir = dir.join("c");
    spec.parallelism = 8;
    run_experiment(&spec).map_err(|e| e.to_string())?;
    let read = |d: &str| std::fs::read(dir.join(d).join("results.json")).map_err(|e| e.to_string());
    let (a, b, c) = (read("a")?, read("b")?, read("c")?);
    ensure(a == b, "rerun with the same seed changed results.json")?;
    ensure(a == c, "parallelism 8 changed results.json")?;
    Ok(format!(
        "{} leakage checks, none fired; results.json ({} bytes) identical on rerun and at parallelism 1 vs 8",
        first.leakage_checks,
        a.len()
    ))
}

fn layerwise_sanity(dir: &Path) -> Outcome {
    let synth = SynthSpec {
        per_class: 50,
        separation: 3.0,
        ..SynthSpec::default()
    };
    let data = generate_layer_stores(&synth, 13, 2, &dir.join("layers")).map_err(|e| e.to_string())?;
    let mut spec = lr_spec(&dir.join("sweep"), data.stores.clone(), data.fold_plan.clone());
    spec.parallelism = 4;
    let table = layerwise_sweep(&spec).map_err(|e| e.to_string())?;
    ensure(table.rows.len() == 13, format!("{} rows, expected 13", table.rows.len()))?;
    let peak = table.argmax();
    ensure(peak == Some(2), format!("table peaks at {peak:?}"))?;

    let mut dup = lr_spec(&dir.join("dup"), vec![data.stores[5].clone(); 13], data.fold_plan);
    dup.parallelism = 4;
    let flat = layerwise_sweep(&dup).map_err(|e| e.to_string())?;
    let maps: Vec<f64> = flat.rows.iter().map(|r| r.dev_map).collect();
    let spread = maps.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - maps.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(spread <= 1e-9, format!("duplicated stores spread {spread:e}"))?;
    Ok(format!(
        "peak at layer 2 (mAP {:.3} vs next best {:.3}); duplicated control spread {spread:e}",
        table.rows[2].dev_map,
        table
            .rows
            .iter()
            .filter(|r| r.layer_index != 2)
            .map(|r| r.dev_map)
            .fold(f64::NEG_INFINITY, f64::max)
    ))
}

fn mean_pool(m: &Matrix) -> Vec<f64> {
    m.column_means().expect("non-empty grid")
}

fn random_f32(rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let v = match rng.gen_range(0..6) {
            0 => f32::from_bits(rng.gen()),
            1 => f32::from_bits(rng.gen_range(1..0x0080_0000)),
            2 => -0.0,
            _ => rng.gen_range(-1e3..1e3),
        };
        if v.is_finite() {
            return v;
        }
    }
}

fn store_format(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let path = dir.join("rt.embs");
    for shape in 0..1000 {
        let dim = rng.gen_range(1..=12);
        let count = rng.gen_range(0..=6);
        let mut manifest = StoreManifest::new(dim, "layer03", true, vec!["a".into(), "b".into()]);
        let mut seqs = Vec::new();
        for i in 0..count {
            let t = rng.gen_range(1..=9);
            let id = rng.gen::<u64>() >> 8 | i;
            let values = (0..t * dim).map(|_| random_f32(&mut rng)).collect();
            seqs.push(EmbeddingSequence::new(id, t, dim, values).map_err(|e| e.to_string())?);
            manifest.segments.push(SegmentEntry {
                id,
                label: i as usize % 2,
                fold: None,
                recording_id: format!("r{i}"),
                start: 0.0,
                end: 1.0,
                frames: t,
                overlapping: Vec::new(),
            });
        }
        if manifest.segments.iter().map(|s| s.id).collect::<std::collections::BTreeSet<_>>().len() != count as usize {
            continue;
        }
        write_store(&path, &seqs, &manifest).map_err(|e| e.to_string())?;
        let (back, man) = read_store(&path).map_err(|e| format!("shape {shape}: {e}"))?;
        ensure(man == manifest, format!("shape {shape}: manifest changed"))?;
        for (a, b) in seqs.iter().zip(&back) {
            let bits = |s: &EmbeddingSequence| s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            ensure(
                a.segment_id == b.segment_id && a.frames() == b.frames() && bits(a) == bits(b),
                format!("shape {shape}: record {} not bit-exact", a.segment_id),
            )?;
        }
    }

    // corruption fixtures on a small valid store
    let mut manifest = StoreManifest::new(2, "feat", true, vec!["a".into()]);
    let seqs = vec![
        EmbeddingSequence::new(7, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        EmbeddingSequence::new(9, 1, 2, vec![5.0, 6.0]).unwrap(),
    ];
    for s in &seqs {
        manifest.segments.push(SegmentEntry {
            id: s.segment_id,
            label: 0,
            fold: None,
            recording_id: "r".into(),
            start: 0.0,
            end: 1.0,
            frames: s.frames(),
            overlapping: Vec::new(),
        });
    }
    let good = dir.join("good.embs");
    write_store(&good, &seqs, &manifest).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&good).map_err(|e| e.to_string())?;
    let bad = dir.join("bad.embs");
    std::fs::copy(good.with_extension("json"), bad.with_extension("json")).map_err(|e| e.to_string())?;
    let mut cases: Vec<(String, Vec<u8>)> = Vec::new();
    for cut in [0, 3, 10, 23, 24, 30, bytes.len() - 1] {
        cases.push((format!("truncated at {cut}"), bytes[..cut].to_vec()));
    }
    let mut patch = |name: &str, at: usize, with: &[u8]| {
        let mut b = bytes.clone();
        b[at..at + with.len()].copy_from_slice(with);
        cases.push((name.into(), b));
    };
    patch("bad magic", 0, b"EMBX");
    patch("bad version", 4, &2u32.to_le_bytes());
    patch("bad dim", 8, &3u32.to_le_bytes());
    patch("bad dtype", 12, &1u32.to_le_bytes());
    patch("bad count", 16, &3u64.to_le_bytes());
    patch("bad segment id", 24, &8u64.to_le_bytes());
    patch("bad frame count", 32, &5u32.to_le_bytes());
    patch("NaN payload", 36, &f32::NAN.to_le_bytes());
    let mut trailing = bytes.clone();
    trailing.push(0);
    cases.push(("trailing byte".into(), trailing));
    let mut diagnostics = Vec::new();
    for (name, data) in &cases {
        std::fs::write(&bad, data).map_err(|e| e.to_string())?;
        match read_store(&bad) {
            Ok(_) => return Err(format!("{name} accepted")),
            Err(e) => {
                let msg = e.to_string();
                ensure(!msg.is_empty(), format!("{name}: empty diagnostic"))?;
                diagnostics.push(msg);
            }
        }
    }

    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (t, f, d) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..5));
        let values = (0..t * f * d).map(|_| rng.gen_range(-1e4f32..1e4)).collect();
        let g = EmbeddingGrid::new(0, t, f, d, values).map_err(|e| e.to_string())?;
        let a = mean_pool(&grid_aggregate(&g, GridAggregation::Time));
        let b = mean_pool(&grid_aggregate(&g, GridAggregation::TimeSpec));
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    ensure(worst <= 1e-6, format!("grand-mean identity off by {worst:e}"))?;
    Ok(format!(
        "1000 shapes bit-exact; {} corrupt fixtures rejected (e.g. \"{}\"); grand-mean identity within {worst:e}",
        cases.len(),
        diagnostics[0]
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path().to_path_buf();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("metric oracle equivalence", Box::new(metric_oracle_equivalence)),
        ("hand-checkable metric values", Box::new(hand_checked_metrics)),
        ("gradient checks", Box::new(gradient_checks)),
        ("MFCC oracle", Box::new(mfcc_oracle)),
        ("end-to-end synthetic", Box::new({
            let d = root.join("e2e");
            move || end_to_end(&d)
        })),
        ("protocol integrity", Box::new({
            let d = root.join("protocol");
            move || protocol_integrity(&d)
        })),
        ("layerwise sanity", Box::new({
            let d = root.join("layerwise");
            move || layerwise_sanity(&d)
        })),
        ("store format", Box::new({
            let d = root.join("store");
            move || {
                std::fs::create_dir_all(&d).map_err(|e| e.to_string())?;
                store_format(&d)
            }
        })),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name}: {reason}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

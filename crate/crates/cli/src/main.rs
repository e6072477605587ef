use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use callprobe::dataset::{make_fold_plan, AnnotationSet};
use callprobe::dsp::read_wav;
use callprobe::runner::{
    build_feature_store, generate_layer_stores, generate_synthetic_store, layerwise_sweep, run_experiment,
    summary_table, write_report, ExperimentResults, ExperimentSpec, FeatureKind, FeatureRequest, RunnerError,
    SynthSpec,
};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "callprobe", version, about = "Linear and recurrent probes for animal call embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute MFCC or BEANS feature stores from annotated recordings.
    Features {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        audio_dir: PathBuf,
        #[arg(long, default_value = "mfcc")]
        kind: FeatureKind,
        #[arg(long, default_value_t = 0.0)]
        collar: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Assign recordings to K folds, balancing call types.
    Folds {
        #[arg(long)]
        annotations: PathBuf,
        /// Used to clamp collared segments to each recording's length.
        #[arg(long)]
        audio_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        collar: f64,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run nested cross-validation for every probe family in a spec.
    Train {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Sweep linear probes over one store per layer.
    Layerwise {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Write a synthetic store (or one store per layer) with its fold plan.
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 125)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        min_frames: usize,
        #[arg(long, default_value_t = 20)]
        max_frames: usize,
        #[arg(long, default_value_t = 5.0)]
        separation: f64,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        layers: Option<usize>,
        /// Index of the only layer carrying class structure.
        #[arg(long, default_value_t = 0)]
        separable: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate tables and curves from a results.json.
    Report {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 101)]
        curve_points: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e:#}");
            let invalid = matches!(
                e.downcast_ref::<RunnerError>(),
                Some(RunnerError::InvalidSpec(_) | RunnerError::MissingLayerStore(_))
            );
            ExitCode::from(if invalid { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> anyhow::Result<ExitCode> {
    match command {
        Command::Features {
            annotations,
            audio_dir,
            kind,
            collar,
            out,
        } => {
            let m = build_feature_store(&FeatureRequest {
                annotations,
                audio_dir,
                kind,
                collar,
                output: out.clone(),
            })?;
            log::info!("wrote {} segments of dim {} to {}", m.segments.len(), m.dim, out.display());
        }
        Command::Folds {
            annotations,
            audio_dir,
            collar,
            k,
            seed,
            out,
        } => {
            let set = AnnotationSet::load(&annotations)?;
            let lengths = match audio_dir {
                Some(dir) => recording_lengths(&set, &dir)?,
                None => BTreeMap::new(),
            };
            let segments = set.segments(collar, &lengths)?;
            let plan = make_fold_plan(&segments, k, set.classes.len(), seed)?;
            plan.save(&out)?;
            log::info!("wrote {k}-fold plan for {} segments to {}", segments.len(), out.display());
        }
        Command::Train { spec } => {
            let spec = load_spec(&spec)?;
            let results = run_experiment(&spec)?;
            println!("{}", summary_table(&results));
            if results.is_partial() {
                log::warn!("{} outer turn(s) failed", results.failures.len());
                return Ok(ExitCode::from(1));
            }
        }
        Command::Layerwise { spec } => {
            let spec = load_spec(&spec)?;
            let table = layerwise_sweep(&spec)?;
            print!("{}", table.to_csv());
            if let Some(best) = table.argmax() {
                log::info!("best layer: {best}");
            }
        }
        Command::Synth {
            classes,
            per_class,
            dim,
            min_frames,
            max_frames,
            separation,
            k,
            seed,
            layers,
            separable,
            out,
        } => {
            let spec = SynthSpec {
                classes,
                per_class,
                dim,
                min_frames,
                max_frames,
                separation,
                k,
                seed,
            };
            let written = match layers {
                Some(n) => generate_layer_stores(&spec, n, separable, &out)?,
                None => generate_synthetic_store(&spec, &out)?,
            };
            for s in &written.stores {
                println!("{}", s.display());
            }
            println!("{}", written.fold_plan.display());
        }
        Command::Report {
            results,
            out,
            curve_points,
        } => {
            let text = std::fs::read_to_string(&results).with_context(|| format!("reading {}", results.display()))?;
            let parsed: ExperimentResults = serde_json::from_str(&text)?;
            write_report(&parsed, &out, curve_points)?;
            println!("{}", summary_table(&parsed));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_spec(path: &Path) -> anyhow::Result<ExperimentSpec> {
    let spec = ExperimentSpec::load(path)?;
    spec.validate()?;
    Ok(spec)
}

fn recording_lengths(set: &AnnotationSet, dir: &Path) -> anyhow::Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for a in &set.annotations {
        if !out.contains_key(&a.recording_id) {
            let path = dir.join(format!("{}.wav", a.recording_id));
            let w = read_wav(&path).with_context(|| format!("reading {}", path.display()))?;
            out.insert(a.recording_id.clone(), w.duration());
        }
    }
    Ok(out)
}

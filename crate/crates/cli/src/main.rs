use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use streamdet_core::buffer::{Capacity, ReplacementPolicy};
use streamdet_core::datagen::{generate_dataset, load_dataset, write_dataset, SyntheticSpec};
use streamdet_core::driver::{run_experiment, ExperimentConfig, Learner, Seeds};
use streamdet_core::eval::{evaluate, omega_map, read_curves, ApMode, ImageDetections, OfflineReference};
use streamdet_core::io::{read_annotation, read_feature, read_json, write_atomic, write_json_atomic};
use streamdet_core::pq::{all_locations, subsample_locations, train_pq, PqConfig};
use streamdet_core::{ClassId, Error};

#[derive(Parser)]
#[command(name = "streamdet", version, about = "Streaming object-detection experiments over compressed feature replay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a JSON spec.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a product quantizer on every location of the feature files in a directory.
    TrainPq(TrainPqArgs),
    /// Run a full experiment: base initialization, streaming, checkpoints.
    Run(RunArgs),
    /// Score a detections file against annotation files.
    Eval(EvalArgs),
    /// Offline-normalized mean of a learning curve.
    Omega(OmegaArgs),
}

#[derive(Args)]
struct TrainPqArgs {
    /// Directory of `.rfm` feature files.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    num_codebooks: usize,
    #[arg(long, default_value_t = 256)]
    codebook_size: usize,
    #[arg(long, default_value_t = 25)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Sample this many locations per file instead of using all of them.
    #[arg(long)]
    locations_per_image: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory; overrides the config's `dataset`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Derives every component seed from this value.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learner: Option<Learner>,
    #[arg(long)]
    replay_n: Option<usize>,
    #[arg(long)]
    policy: Option<ReplacementPolicy>,
    #[arg(long, conflicts_with = "capacity_bytes")]
    capacity_entries: Option<usize>,
    #[arg(long)]
    capacity_bytes: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ApModeArg {
    AllPoint,
    ElevenPoint,
}

#[derive(Args)]
struct EvalArgs {
    /// JSON array of `{image_id, detections}` objects.
    #[arg(long)]
    detections: PathBuf,
    /// Directory of annotation JSON files.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated classes to score; all annotated classes by default.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<u32>>,
    #[arg(long, default_value_t = 0)]
    t: usize,
    #[arg(long, value_enum, default_value_t = ApModeArg::AllPoint)]
    ap_mode: ApModeArg,
}

#[derive(Args)]
struct OmegaArgs {
    /// Learning curve CSV with `t` and `map` columns.
    curves: PathBuf,
    #[arg(long, conflicts_with = "offline_curve", required_unless_present = "offline_curve")]
    offline_const: Option<f64>,
    #[arg(long)]
    offline_curve: Option<PathBuf>,
    /// Decimal places printed; further digits are cut off, not rounded.
    #[arg(long, default_value_t = 3)]
    precision: usize,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
}

fn error_json(kind: &str, message: String) -> String {
    serde_json::to_string(&ErrorReport { error: kind, message }).expect("plain strings serialize")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_json("usage", e.to_string().trim().to_string()));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.chain().find_map(|c| c.downcast_ref::<Error>()).map_or("error", Error::kind);
            eprintln!("{}", error_json(kind, format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Gen { config, out, seed } => cmd_gen(&config, &out, seed),
        Command::TrainPq(a) => cmd_train_pq(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Omega(a) => cmd_omega(&a),
    }
}

fn cmd_gen(config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let mut spec: SyntheticSpec = read_json(config).with_context(|| format!("reading {}", config.display()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = generate_dataset(&spec)?;
    write_dataset(out, &ds)?;
    println!(
        "{}",
        serde_json::json!({"images": ds.images.len(), "train": ds.split.train.len(), "test": ds.split.test.len()})
    );
    Ok(())
}

fn files_with_extension(dir: &Path, ext: &str) -> anyhow::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == ext));
    files.sort();
    Ok(files)
}

fn cmd_train_pq(a: &TrainPqArgs) -> anyhow::Result<()> {
    let files = files_with_extension(&a.features, "rfm")?;
    if files.is_empty() {
        bail!(Error::Ingestion(vec![format!("no .rfm files in {}", a.features.display())]));
    }
    let mut samples = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let fmap = read_feature(f).with_context(|| format!("reading {}", f.display()))?;
        match a.locations_per_image {
            Some(k) => samples.extend(subsample_locations(&fmap, k, a.seed.wrapping_add(i as u64))?),
            None => samples.extend(all_locations(&fmap)),
        }
    }
    let cfg = PqConfig { num_codebooks: a.num_codebooks, codebook_size: a.codebook_size, iters: a.iters, seed: a.seed };
    let model = train_pq(&samples, &cfg)?;
    write_atomic(&a.out, &model.to_bytes())?;
    println!(
        "{}",
        serde_json::json!({"files": files.len(), "samples": samples.len(), "reconstruction_mse": model.reconstruction_mse(&samples)})
    );
    Ok(())
}

/// Applies command-line overrides on top of the config file.
fn resolve_run_config(a: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = read_json(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(s) = a.seed {
        cfg.seeds = Seeds::from_base(s);
    }
    if let Some(l) = a.learner {
        cfg.learner = l;
    }
    if let Some(n) = a.replay_n {
        cfg.replay_n = n;
    }
    if let Some(p) = a.policy {
        cfg.buffer.policy = p;
    }
    if let Some(n) = a.capacity_entries {
        cfg.buffer.capacity = Capacity::Entries(n);
    }
    if let Some(n) = a.capacity_bytes {
        cfg.buffer.capacity = Capacity::Bytes(n);
    }
    if let Some(e) = a.eval_every {
        cfg.eval_every = e;
        if let Some(s) = &mut cfg.schedule {
            s.eval_every = e;
        }
    }
    Ok(cfg)
}

fn cmd_run(a: &RunArgs) -> anyhow::Result<()> {
    let mut cfg = resolve_run_config(a)?;
    cfg.validate()?;
    let Some(dir) = cfg.dataset.clone() else {
        bail!(Error::Config("no dataset: set `dataset` in the config or pass --dataset".into()));
    };
    let dir = dir.canonicalize().with_context(|| format!("opening dataset {}", dir.display()))?;
    cfg.dataset = Some(dir.clone());
    let ds = load_dataset(&dir)?;
    cfg.schedule = Some(cfg.resolve_schedule(&ds)?);
    let (report, _) = run_experiment(&cfg, &ds, Some(&a.out))?;
    println!(
        "{}",
        serde_json::json!({
            "learner": report.learner,
            "checkpoints": report.checkpoints.len(),
            "steps": report.steps,
            "mean_map": report.mean_map,
            "omega_map": report.omega_map,
        })
    );
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let dets: Vec<ImageDetections> = read_json(&a.detections).with_context(|| format!("reading {}", a.detections.display()))?;
    let files = files_with_extension(&a.annotations, "json")?;
    let mut anns = Vec::with_capacity(files.len());
    for f in &files {
        anns.push(read_annotation(f).with_context(|| format!("reading {}", f.display()))?);
    }
    let seen: BTreeSet<ClassId> = match &a.classes {
        Some(cs) => cs.iter().map(|&c| ClassId(c)).collect(),
        None => anns.iter().flat_map(|x| x.classes()).collect(),
    };
    if seen.is_empty() || seen.iter().any(|c| c.is_background()) {
        bail!(Error::Config("need at least one non-background class to score".into()));
    }
    // only images holding a scored class take part; other boxes are ignored
    let anns: Vec<_> = anns
        .into_iter()
        .map(|x| x.restricted_to(&seen))
        .filter(|x| !x.boxes.is_empty())
        .collect();
    let ids: BTreeSet<_> = anns.iter().map(|x| x.image_id.clone()).collect();
    let dets: Vec<ImageDetections> = dets.into_iter().filter(|d| ids.contains(&d.image_id)).collect();
    let mode = match a.ap_mode {
        ApModeArg::AllPoint => ApMode::AllPoint,
        ApModeArg::ElevenPoint => ApMode::ElevenPoint,
    };
    let report = evaluate(a.t, &dets, &anns, &seen, mode)?;
    write_json_atomic(&a.out, &report)?;
    println!("{}", serde_json::json!({"map": report.map, "images": anns.len()}));
    Ok(())
}

fn cmd_omega(a: &OmegaArgs) -> anyhow::Result<()> {
    let curve = read_curves(&a.curves).with_context(|| format!("reading {}", a.curves.display()))?;
    let alphas: Vec<f64> = curve.iter().map(|p| p.map).collect();
    let reference = match (&a.offline_const, &a.offline_curve) {
        (Some(c), _) => OfflineReference::Constant(*c),
        (None, Some(p)) => {
            let offline = read_curves(p).with_context(|| format!("reading {}", p.display()))?;
            if offline.iter().map(|p| p.t).ne(curve.iter().map(|p| p.t)) {
                bail!(Error::Domain("offline curve checkpoints do not match the run's".into()));
            }
            OfflineReference::PerStep(offline.iter().map(|p| p.map).collect())
        }
        (None, None) => unreachable!("clap requires one of the two"),
    };
    let omega = omega_map(&alphas, &reference)?;
    let scale = 10f64.powi(a.precision.min(15) as i32);
    println!("{:.*}", a.precision, (omega * scale + 1e-9).trunc() / scale);
    Ok(())
}

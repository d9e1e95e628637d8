use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context};
use biqa_core::dataset::{load_manifest, rescale_mos, split_dataset, DEFAULT_TRAIN_FRACTION};
use biqa_core::harness::{Experiment, ExperimentConfig};
use biqa_core::metrics::{
    cross_dataset_matrix, evaluate, repeated_split_eval, EvalSet, ModelEntry, Predictor,
    ScorerPredictor, DEFAULT_EVAL_SEED, DEFAULT_TEST_PATCHES,
};
use biqa_core::pseudolabel::{
    generate_pair_manifest, pool_crops, EnsembleMember, EnsembleSnapshot, MemberProvenance,
    PairManifest, Preprocess,
};
use biqa_core::scorer::{load_params, save_params, ScorerConfig};
use biqa_core::synthbench::{
    gen_biased_dataset, truth_path_for, BiasedDatasetConfig, DegradationKind, GroundTruth,
    LabelRemap, DEFAULT_IMAGE_SIZE,
};
use biqa_core::trainer::{train_pairwise, train_single, EpochLog, TrainConfig};
use biqa_core::{Error, ErrorClass};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "biqa",
    version,
    about = "Cross-dataset robust blind image quality assessment"
)]
struct Cli {
    /// Emit machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for commands that sample or train.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known true quality.
    SynthGen(SynthGenArgs),
    /// Train a scorer on one labelled dataset (80/20 split).
    TrainSingle(TrainSingleArgs),
    /// Label random pool pairs with an ensemble of scorers.
    GenPairs(GenPairsArgs),
    /// Train a scorer on a pair manifest with the fidelity loss.
    TrainCdr(TrainCdrArgs),
    /// Evaluate a model on a dataset, or train-and-test over k splits.
    Eval(EvalArgs),
    /// Every model on every dataset.
    CrossEval(CrossEvalArgs),
    /// Run an ablation from an experiment config.
    Ablate(AblateArgs),
    /// Run the whole pipeline from an experiment config.
    RunExperiment(RunArgs),
    /// Print the reference experiment config as TOML.
    PrintConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Blur,
    Noise,
    Contrast,
}

impl From<Kind> for DegradationKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Blur => DegradationKind::GaussianBlur,
            Kind::Noise => DegradationKind::AdditiveNoise,
            Kind::Contrast => DegradationKind::ContrastReduction,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Remap {
    Identity,
    Sqrt,
    Square,
    LogisticSteep,
}

impl From<Remap> for LabelRemap {
    fn from(r: Remap) -> Self {
        match r {
            Remap::Identity => LabelRemap::Identity,
            Remap::Sqrt => LabelRemap::Sqrt,
            Remap::Square => LabelRemap::Square,
            Remap::LogisticSteep => LabelRemap::LogisticSteep,
        }
    }
}

#[derive(Args)]
struct SynthGenArgs {
    #[arg(long)]
    name: String,
    #[arg(long, default_value_t = 300)]
    n_images: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    kinds: Vec<Kind>,
    #[arg(long, value_enum, default_value = "identity")]
    remap: Remap,
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
    image_size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with training settings; flags below override it.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, default_value_t = 32)]
    patch_size: usize,
}

impl TrainArgs {
    fn resolve(&self, seed: u64) -> anyhow::Result<(TrainConfig, ScorerConfig)> {
        let mut cfg = match &self.train_config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                toml_train(&text)?
            }
            None => TrainConfig::default(),
        };
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(w) = self.warmup_epochs {
            cfg.warmup_epochs = w;
        }
        if let Some(lr) = self.lr {
            cfg.base_lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        cfg.seed = seed;
        cfg.validate()?;
        let scorer = ScorerConfig {
            patch_size: self.patch_size,
            ..ScorerConfig::default()
        };
        scorer.validate()?;
        Ok((cfg, scorer))
    }
}

fn toml_train(text: &str) -> anyhow::Result<TrainConfig> {
    toml::from_str(text).map_err(|e| anyhow!(Error::Config(e.to_string())))
}

#[derive(Args)]
struct TrainSingleArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct GenPairsArgs {
    /// Ensemble members as NAME=PATH.
    #[arg(long = "models", value_delimiter = ',', required = true)]
    models: Vec<String>,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, default_value_t = 5000)]
    n_pairs: usize,
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
    short_side: usize,
    #[arg(long, default_value_t = 32)]
    crop: usize,
    /// Keep every member's probability in the manifest.
    #[arg(long)]
    keep_per_model: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCdrArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, default_value_t = DEFAULT_IMAGE_SIZE)]
    short_side: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Model to evaluate on the whole dataset.
    #[arg(long, conflicts_with = "splits")]
    model: Option<PathBuf>,
    /// Train and test a fresh scorer on k random 80/20 splits; report medians.
    #[arg(long)]
    splits: Option<usize>,
    /// Score against the dataset's true quality instead of its labels.
    #[arg(long)]
    truth: bool,
    #[arg(long, default_value_t = DEFAULT_TEST_PATCHES)]
    n_patches: usize,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct CrossEvalArgs {
    /// Models as NAME=PATH.
    #[arg(long = "models", value_delimiter = ',', required = true)]
    models: Vec<String>,
    #[arg(long = "datasets", value_delimiter = ',', required = true)]
    datasets: Vec<PathBuf>,
    #[arg(long)]
    truth: bool,
    #[arg(long, default_value_t = DEFAULT_TEST_PATCHES)]
    n_patches: usize,
    /// Write the matrix CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblationKind {
    Pairs,
    Ensemble,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(value_enum)]
    kind: AblationKind,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Recompute every stage even if its outputs are recorded.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let json = cli.json;
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            if json {
                let msg = serde_json::json!({ "error": format!("{e:#}"), "exit_code": code });
                println!("{msg}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(code)
        }
    }
}

/// Bad flag combinations that clap cannot express.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.chain().any(|c| c.is::<Usage>()) {
        return EXIT_USAGE;
    }
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(err) if err.class() == ErrorClass::Numerical => EXIT_NUMERICAL,
        Some(Error::Config(_)) => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) {
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(value).expect("serializes")
        );
    } else {
        println!("{}", text());
    }
}

fn progress(json: bool) -> impl Fn(&str) + Sync {
    move |line: &str| {
        if !json {
            eprintln!("{line}");
        }
    }
}

fn epoch_printer(json: bool) -> impl FnMut(&EpochLog) {
    move |l: &EpochLog| {
        if !json {
            eprintln!(
                "[{}] epoch {} lr {:.3e} loss {:.6} ({:.1}s)",
                l.stage, l.epoch, l.lr, l.loss, l.seconds
            );
        }
    }
}

fn parse_named(items: &[String]) -> anyhow::Result<Vec<(String, PathBuf)>> {
    items
        .iter()
        .map(|s| {
            let (name, path) = s
                .split_once('=')
                .ok_or_else(|| anyhow!(Usage(format!("expected NAME=PATH, got {s:?}"))))?;
            Ok((name.to_string(), PathBuf::from(path)))
        })
        .collect()
}

fn load_truth(manifest_csv: &Path) -> anyhow::Result<GroundTruth> {
    let p = truth_path_for(manifest_csv);
    GroundTruth::read_csv(&p).with_context(|| format!("--truth needs {}", p.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let json = cli.json;
    let seed = cli.seed;
    match cli.command {
        Command::SynthGen(a) => {
            let cfg = BiasedDatasetConfig {
                name: a.name,
                n_images: a.n_images,
                allowed_kinds: a.kinds.into_iter().map(Into::into).collect(),
                label_remap: a.remap.into(),
                seed,
                image_size: a.image_size,
            };
            let gen = gen_biased_dataset(&cfg, &a.out)?;
            let out = serde_json::json!({
                "manifest": gen.manifest_path,
                "truth": gen.truth_path,
                "n_images": gen.manifest.len(),
            });
            emit(json, &out, || {
                format!(
                    "wrote {} images to {}",
                    gen.manifest.len(),
                    gen.manifest_path.display()
                )
            });
        }
        Command::TrainSingle(a) => {
            let (train, scorer) = a.train.resolve(seed)?;
            let manifest = rescale_mos(&load_manifest(&a.manifest)?)?;
            let split = split_dataset(&manifest, seed, DEFAULT_TRAIN_FRACTION)?;
            let params = train_single(&manifest, &split, &scorer, &train, epoch_printer(json))?;
            save_params(&params, &a.out)?;
            let predictor = ScorerPredictor::new(Arc::new(params));
            let test = EvalSet::subset(&manifest, &split.test_ids)?;
            let report = evaluate(&predictor, &test, "single", &manifest.name, seed)?;
            emit(json, &report, || {
                format!(
                    "saved {}\nheld-out {}: n={} SRCC {:.4} PLCC {:.4}",
                    a.out.display(),
                    report.dataset,
                    report.n,
                    report.srcc,
                    report.plcc
                )
            });
        }
        Command::GenPairs(a) => {
            let mut members = Vec::new();
            for (name, path) in parse_named(&a.models)? {
                let bytes =
                    std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
                let params = biqa_core::scorer::decode_params(&bytes)?;
                members.push(EnsembleMember {
                    provenance: MemberProvenance {
                        source: name,
                        model_hash: biqa_core::harness::sha256_hex(&bytes),
                    },
                    params: Arc::new(params),
                });
            }
            let snapshot = EnsembleSnapshot::new(members)?;
            let pool = load_manifest(&a.pool)?;
            let prep = Preprocess {
                short_side: a.short_side,
                crop: a.crop,
            };
            let manifest =
                generate_pair_manifest(&snapshot, &pool, prep, a.n_pairs, seed, a.keep_per_model)?;
            let side = manifest.write(&a.out)?;
            let out =
                serde_json::json!({ "pairs": a.out, "sidecar": side, "n_pairs": manifest.n_pairs });
            emit(json, &out, || {
                format!("wrote {} pairs to {}", manifest.n_pairs, a.out.display())
            });
        }
        Command::TrainCdr(a) => {
            let (train, scorer) = a.train.resolve(seed)?;
            let pairs = PairManifest::read(&a.pairs)?;
            let pool = load_manifest(&a.pool)?;
            let prep = Preprocess {
                short_side: a.short_side,
                crop: scorer.patch_size,
            };
            let crops = pool_crops(&pool, prep)?;
            let params =
                train_pairwise(&pairs.pairs, &crops, &scorer, &train, epoch_printer(json))?;
            save_params(&params, &a.out)?;
            let out = serde_json::json!({ "model": a.out, "n_pairs": pairs.n_pairs });
            emit(json, &out, || format!("saved {}", a.out.display()));
        }
        Command::Eval(a) => {
            let manifest = rescale_mos(&load_manifest(&a.manifest)?)?;
            let truth = if a.truth {
                Some(load_truth(&a.manifest)?)
            } else {
                None
            };
            match (a.model, a.splits) {
                (Some(path), None) => {
                    let predictor = ScorerPredictor {
                        params: Arc::new(load_params(&path)?),
                        n_patches: a.n_patches,
                        seed: DEFAULT_EVAL_SEED,
                    };
                    let set = match &truth {
                        Some(t) => EvalSet::from_scores(&manifest, &t.0)?,
                        None => EvalSet::from_labels(&manifest),
                    };
                    let name = path
                        .file_stem()
                        .unwrap_or_default()
                        .to_string_lossy()
                        .to_string();
                    let report = evaluate(&predictor, &set, &name, "?", DEFAULT_EVAL_SEED)?;
                    emit(json, &report, || {
                        format!(
                            "{} on {}: n={} SRCC {:.4} PLCC {:.4}",
                            name, report.dataset, report.n, report.srcc, report.plcc
                        )
                    });
                }
                (None, Some(k)) => {
                    if truth.is_some() {
                        bail!(Usage("--truth is not supported with --splits".into()));
                    }
                    let (train, scorer) = a.train.resolve(seed)?;
                    let n_patches = a.n_patches;
                    let rep = repeated_split_eval(
                        &manifest,
                        |m, split| {
                            let params =
                                train_single(m, split, &scorer, &train, epoch_printer(json))?;
                            Ok(ScorerPredictor {
                                params: Arc::new(params),
                                n_patches,
                                seed: DEFAULT_EVAL_SEED,
                            })
                        },
                        k,
                        seed,
                        "single",
                    )?;
                    emit(json, &rep, || {
                        format!(
                            "median over {k} splits on {}: SRCC {:.4} PLCC {:.4}",
                            rep.median.dataset, rep.median.srcc, rep.median.plcc
                        )
                    });
                }
                _ => bail!(Usage(
                    "eval needs exactly one of --model or --splits".into()
                )),
            }
        }
        Command::CrossEval(a) => {
            let named = parse_named(&a.models)?;
            let mut predictors = Vec::new();
            for (_, path) in &named {
                predictors.push(ScorerPredictor {
                    params: Arc::new(load_params(path)?),
                    n_patches: a.n_patches,
                    seed: DEFAULT_EVAL_SEED,
                });
            }
            let entries: Vec<ModelEntry<'_>> = named
                .iter()
                .zip(&predictors)
                .map(|((name, _), p)| ModelEntry {
                    name: name.clone(),
                    trained_on: name.clone(),
                    predictor: p as &dyn Predictor,
                })
                .collect();
            let mut sets = Vec::new();
            for path in &a.datasets {
                let m = load_manifest(path)?;
                sets.push(if a.truth {
                    EvalSet::from_scores(&m, &load_truth(path)?.0)?
                } else {
                    EvalSet::from_labels(&m)
                });
            }
            let matrix = cross_dataset_matrix(&entries, &sets, DEFAULT_EVAL_SEED)?;
            if let Some(out) = &a.out {
                std::fs::write(out, matrix.to_csv())
                    .with_context(|| format!("writing {}", out.display()))?;
            }
            emit(json, &matrix, || matrix.to_csv());
        }
        Command::Ablate(a) => {
            let mut cfg = ExperimentConfig::load(&a.config)?;
            if let Some(dir) = a.output_dir {
                cfg.output_dir = dir;
            }
            let root = cfg.output_dir.clone();
            let report_fn = progress(json);
            let mut exp = Experiment::open(cfg, &root, a.force, &report_fn)?;
            let report = match a.kind {
                AblationKind::Pairs => exp.run_ablation_paircount()?,
                AblationKind::Ensemble => exp.run_ablation_ensemble()?,
            };
            emit(json, &report, || {
                report
                    .rows
                    .iter()
                    .map(|r| {
                        format!(
                            "{:<28} pairs={:<6} mean SRCC {:.4}",
                            r.label, r.n_pairs, r.mean_srcc
                        )
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            });
        }
        Command::RunExperiment(a) => {
            let mut cfg = ExperimentConfig::load(&a.config)?;
            if let Some(dir) = a.output_dir {
                cfg.output_dir = dir;
            }
            let root = cfg.output_dir.clone();
            let report_fn = progress(json);
            let mut exp = Experiment::open(cfg, &root, a.force, &report_fn)?;
            let summary = exp.run_all()?;
            let statuses = exp.statuses().to_vec();
            let out = serde_json::json!({ "summary": summary, "stages": statuses });
            emit(json, &out, || {
                let mut lines: Vec<String> = statuses
                    .iter()
                    .map(|s| format!("{:<12} {:<20} {}", s.stage, s.unit, s.status))
                    .collect();
                lines.push(String::new());
                lines.push(summary.cross_eval.truth.to_csv());
                lines.join("\n")
            });
        }
        Command::PrintConfig => {
            print!("{}", ExperimentConfig::reference().to_toml());
        }
    }
    Ok(())
}

//! `ntua`: the adapter pipeline as one subcommand per stage.
//!
//! Every stage reads its inputs from files and writes one artifact, so any
//! intermediate result can be inspected or swapped. The resolved run
//! configuration is printed to stdout as JSON; diagnostics go to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ntua::cache::{read_cache, write_cache, DEFAULT_ALPHA, DEFAULT_BETA};
use ntua::data_store::{
    parse_text_matrix, read_classifier, read_embeddings, read_json, read_labels, read_name_list, write_classifier,
    write_embeddings, write_json, write_labels, FORMAT_VERSION,
};
use ntua::evaluation::{evaluate, run_ablation_seeds, InferenceWeights, PipelineConfig};
use ntua::pseudo_labeling::DEFAULT_TEMPERATURE;
use ntua::{
    affinity_weights, build_cache, compute_prototypes, fallback_rows, generate, make_pseudo_labels, refine_cache,
    select_top_k, train_keys, Bundle, Cache, ClassifierWeights, EmbeddingSet, GroundTruthLabels, LabelSource,
    NtuaError, Omega, PseudoLabels, ShotSelection, SynthSpec, TrainConfig,
};

const EXIT_VALIDATION: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "ntua",
    about = "Noise-tolerant weighted key-value cache adapter",
    disable_version_flag = true
)]
struct Cli {
    /// Seed for every random choice (training shuffles, synthetic data).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for evaluation. Results do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// off, error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: log::LevelFilter,
    /// Print the version and the supported file format version.
    #[arg(long, short = 'V', action = clap::ArgAction::SetTrue)]
    #[serde(skip)]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Convert a whitespace-separated text matrix (or label list) to the binary format.
    Ingest(IngestArgs),
    /// Zero-shot pseudo-labels and confidences for a feature set.
    PseudoLabel(PseudoLabelArgs),
    /// Keep the k most confident samples per pseudo-class.
    Select(SelectArgs),
    /// Assemble the confidence-weighted cache from a selection.
    BuildCache(BuildCacheArgs),
    /// Replace cache values and weights with teacher pseudo-labels.
    Refine(RefineArgs),
    /// Prototype-affinity loss weights for each cache row.
    Weights(WeightsArgs),
    /// Fine-tune the cache keys.
    Train(TrainArgs),
    /// Test accuracy of a cache.
    Eval(EvalArgs),
    /// Run the four ablation variants over several training seeds.
    Ablate(AblateArgs),
    /// Generate a synthetic bundle.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum IngestKind {
    Embeddings,
    Classifier,
    Labels,
}

#[derive(Debug, Args, Serialize)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = IngestKind::Embeddings)]
    kind: IngestKind,
    /// Scale every row to unit length instead of rejecting it.
    #[arg(long)]
    normalize: bool,
    /// One sample id per line (embeddings). Defaults to `s0`, `s1`, ...
    #[arg(long)]
    ids: Option<PathBuf>,
    /// One class name per line (classifier). Defaults to `class0`, `class1`, ...
    #[arg(long)]
    names: Option<PathBuf>,
    /// Number of classes (labels).
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Source {
    Student,
    Teacher,
}

#[derive(Debug, Args, Serialize)]
struct PseudoLabelArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[arg(long, value_enum, default_value_t = Source::Student)]
    source: Source,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SelectArgs {
    #[arg(long)]
    pl: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct BuildCacheArgs {
    #[arg(long)]
    sel: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    pl: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct RefineArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    teacher_pl: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct WeightsArgs {
    #[arg(long)]
    teacher_features: PathBuf,
    #[arg(long)]
    teacher_pl: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Optimizer flags shared by `train` and `ablate`.
#[derive(Debug, Args, Serialize)]
struct OptimArgs {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    /// Multiplier on the zero-shot term inside the training logits.
    #[arg(long, default_value_t = 1.0)]
    clip_logit_scale: f64,
}

impl OptimArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            base_lr: self.lr,
            weight_decay: self.weight_decay,
            clip_logit_scale: self.clip_logit_scale,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Per-row loss weights; omit for an unweighted loss.
    #[arg(long)]
    omega: Option<PathBuf>,
    #[arg(long)]
    classifier: PathBuf,
    #[command(flatten)]
    optim: OptimArgs,
    /// Ignore the cache confidences in the training forward pass.
    #[arg(long)]
    no_cache_weights: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    use_weights_at_inference: bool,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct AblateArgs {
    /// Bundle manifest.
    #[arg(long)]
    bundle: PathBuf,
    /// Number of training seeds, starting at `--seed`.
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    #[arg(long, default_value_t = 16)]
    shots: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long, default_value_t = DEFAULT_TEMPERATURE)]
    temperature: f64,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    use_weights_at_inference: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    shots: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Unlabeled samples per class; defaults to `--shots`.
    #[arg(long)]
    pool_per_class: Option<usize>,
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
    #[arg(long, default_value_t = 4.0)]
    concentration: f64,
    #[arg(long, default_value_t = 0.2)]
    classifier_shift: f64,
    #[arg(long, default_value_t = 0.4)]
    eta_s: f64,
    #[arg(long, default_value_t = 0.1)]
    eta_t: f64,
    #[arg(long, default_value_t = 0.9)]
    rho: f64,
    /// Draw teacher label noise independently of the student's.
    #[arg(long)]
    independent_noise: bool,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.version {
        println!(
            "ntua {} (file format version {FORMAT_VERSION}; reads and writes version {FORMAT_VERSION} only)",
            env!("CARGO_PKG_VERSION")
        );
        return ExitCode::SUCCESS;
    }
    env_logger::Builder::new().filter_level(cli.log_level).init();
    let Some(command) = &cli.command else {
        eprintln!("error: a subcommand is required (see `ntua --help`)");
        return ExitCode::from(EXIT_USAGE);
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(EXIT_USAGE);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        log::warn!("thread pool already initialized: {e}");
    }
    match serde_json::to_string(&cli) {
        Ok(echo) => println!("{echo}"),
        Err(e) => log::warn!("could not echo config: {e}"),
    }
    match run(command, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_VALIDATION)
        }
    }
}

fn run(command: &Command, seed: u64) -> ntua::Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::PseudoLabel(a) => {
            let features = read_embeddings(&a.features)?;
            let classifier = read_classifier(&a.classifier)?;
            let source = match a.source {
                Source::Student => LabelSource::Student,
                Source::Teacher => LabelSource::Teacher,
            };
            let pl: PseudoLabels = make_pseudo_labels(&features, &classifier, a.temperature, source)?;
            write_json(&pl, &a.out)
        }
        Command::Select(a) => {
            let pl = read_pl(&a.pl)?;
            let sel = select_top_k(&pl, a.k)?;
            for d in &sel.padded {
                log::info!(
                    "class {} is {} samples short; padding with classifier rows",
                    d.class,
                    d.missing
                );
            }
            write_json(&sel, &a.out)
        }
        Command::BuildCache(a) => {
            let sel: ShotSelection = read_json(&a.sel)?;
            let features = read_embeddings(&a.features)?;
            let pl = read_pl(&a.pl)?;
            let classifier = read_classifier(&a.classifier)?;
            let fb = fallback_rows(&classifier, &sel.padded)?;
            let cache: Cache = build_cache(&sel, &features, &pl, &fb, a.alpha, a.beta)?;
            write_cache(&cache, &a.out)
        }
        Command::Refine(a) => {
            let cache: Cache = read_cache(&a.cache)?;
            let teacher = read_pl(&a.teacher_pl)?;
            write_cache(&refine_cache(&cache, &teacher)?, &a.out)
        }
        Command::Weights(a) => {
            let features = read_embeddings(&a.teacher_features)?;
            let teacher = read_pl(&a.teacher_pl)?;
            let cache: Cache = read_cache(&a.cache)?;
            let protos = compute_prototypes(&features, &teacher, &cache)?;
            let omega = affinity_weights(&features, &teacher, &cache, &protos)?;
            write_json(&omega, &a.out)
        }
        Command::Train(a) => {
            let cache: Cache = read_cache(&a.cache)?;
            let features = read_embeddings(&a.features)?;
            let classifier = read_classifier(&a.classifier)?;
            let omega: Option<Omega> = a.omega.as_deref().map(read_json).transpose()?;
            let cfg = TrainConfig {
                use_weights_in_loss: !a.no_cache_weights,
                include_omega: omega.is_some(),
                ..a.optim.config(seed)
            };
            let (trained, report) = train_keys(&cache, &features, omega.as_ref(), &classifier, &cfg)?;
            log::info!(
                "loss {:.6} -> {:.6} over {} steps",
                report.initial_loss,
                report.final_loss,
                report.steps
            );
            write_cache(&trained, &a.out)?;
            write_json(&report, &a.report)
        }
        Command::Eval(a) => {
            let cache: Cache = read_cache(&a.cache)?;
            let test = read_embeddings(&a.features)?;
            let labels = read_labels(&a.labels)?;
            let classifier = read_classifier(&a.classifier)?;
            let mut report = evaluate(&cache, &test, &labels, &classifier, a.use_weights_at_inference)?;
            report.split = a.split.clone();
            write_json(&report, &a.out)
        }
        Command::Ablate(a) => {
            let bundle = Bundle::read(&a.bundle)?;
            let cfg = PipelineConfig {
                shots: a.shots,
                alpha: a.alpha,
                beta: a.beta,
                temperature: a.temperature,
                inference: if a.use_weights_at_inference {
                    InferenceWeights::On
                } else {
                    InferenceWeights::Off
                },
                train: a.optim.config(seed),
            };
            let summary = run_ablation_seeds(&bundle, &cfg, a.seeds)?;
            write_json(&summary, &a.out)
        }
        Command::Synth(a) => {
            let spec = SynthSpec {
                classes: a.classes,
                shots: a.shots,
                dim: a.dim,
                pool_per_class: a.pool_per_class.unwrap_or(a.shots),
                test_per_class: a.test_per_class,
                concentration: a.concentration,
                classifier_shift: a.classifier_shift,
                eta_student: a.eta_s,
                eta_teacher: a.eta_t,
                rho: a.rho,
                nested: !a.independent_noise,
                seed,
            };
            let bundle = generate(&spec)?;
            bundle.write(&a.out)?;
            write_json(&spec, &a.out.join("synth_spec.json"))
        }
    }
}

fn read_pl(path: &Path) -> ntua::Result<PseudoLabels> {
    let pl: PseudoLabels = read_json(path)?;
    pl.validate()?;
    Ok(pl)
}

fn read_text(path: &Path) -> ntua::Result<String> {
    std::fs::read_to_string(path).map_err(|source| NtuaError::File {
        path: path.to_path_buf(),
        source,
    })
}

fn ingest(a: &IngestArgs) -> ntua::Result<()> {
    let text = read_text(&a.input)?;
    if let IngestKind::Labels = a.kind {
        let labels = text
            .split_whitespace()
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| NtuaError::invalid(format!("bad label {t:?}")))
            })
            .collect::<ntua::Result<Vec<_>>>()?;
        let n = a
            .num_classes
            .or_else(|| labels.iter().max().map(|m| m + 1))
            .ok_or_else(|| NtuaError::invalid("label file is empty"))?;
        return write_labels(&GroundTruthLabels::new(labels, n)?, &a.out);
    }
    let matrix = parse_text_matrix(&text)?;
    let names = |file: &Option<PathBuf>, prefix: &str| -> ntua::Result<Vec<String>> {
        match file {
            Some(p) => read_name_list(p),
            None => Ok((0..matrix.nrows()).map(|i| format!("{prefix}{i}")).collect()),
        }
    };
    match a.kind {
        IngestKind::Embeddings => {
            let ids = names(&a.ids, "s")?;
            let set = if a.normalize {
                EmbeddingSet::from_unnormalized(matrix, ids)?
            } else {
                EmbeddingSet::new(matrix, ids)?
            };
            write_embeddings(&set, &a.out)
        }
        IngestKind::Classifier => {
            let class_names = names(&a.names, "class")?;
            let w = if a.normalize {
                ClassifierWeights::from_unnormalized(matrix, class_names)?
            } else {
                ClassifierWeights::new(matrix, class_names)?
            };
            write_classifier(&w, &a.out)
        }
        IngestKind::Labels => unreachable!(),
    }
}

//! Command-line front end. `run` parses arguments, dispatches to a
//! subcommand and maps errors to exit codes.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{DatasetSource, RunConfig};
use crate::dataset::Dataset;
use crate::dsp::{self, Featurizer};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalContext, Metrics, DEFAULT_SIGMAS};
use crate::gradsuite::{self, SuiteOptions};
use crate::synth::{self, SynthSpec};
use crate::trainer::{self, load_checkpoint, Checkpoint, Scheme};

pub const THREADS_ENV: &str = "SOUNDCLR_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "soundclr",
    version,
    about = "Contrastive and hybrid-loss training for environmental sound classification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one split or cross-validate over all folds.
    Train(TrainArgs),
    /// Evaluate a checkpoint or an ensemble of checkpoints.
    Eval(EvalArgs),
    /// Write log-mel feature caches for every clip in a manifest.
    Featurize(FeaturizeArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write the synthetic corpus as WAV files plus meta.csv.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train a single split with this validation fold.
    #[arg(long)]
    pub val_fold: Option<usize>,
    /// Use this metadata CSV instead of the configured dataset.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "ensemble", required_unless_present = "ensemble")]
    pub checkpoint: Option<PathBuf>,
    /// Average softmax outputs of every `.sckp` file in this directory.
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    /// Run configuration naming the dataset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Evaluate only this fold; defaults to the config's `val_fold`, else
    /// every clip.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub noise_sweep: bool,
    /// Comma-separated noise standard deviations for the sweep.
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    #[arg(long)]
    pub margins: bool,
    /// Noise seed; defaults to the checkpoint's training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Run configuration supplying the feature settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub audio_root: Option<PathBuf>,
    #[arg(long, default_value_t = crate::audio_io::CANONICAL_RATE)]
    pub sample_rate: u32,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt one backward pass to confirm failures are detected.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// JSON generator specification.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub samples_per_class: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: Cli) -> Result<i32> {
    configure_threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Featurize(a) => cmd_featurize(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a non-negative integer, got '{raw}'")))?;
    if n > 0 {
        // a pool may already exist when embedded; the cap then does not apply
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::File::create(path).and_then(|mut f| f.write_all(text.as_bytes())).map_err(|e| Error::io(path, e))
}

fn manifest_source(path: PathBuf) -> DatasetSource {
    DatasetSource::Manifest { path, audio_root: None, sample_rate: crate::audio_io::CANONICAL_RATE }
}

/// Applies command-line overrides on top of the file configuration.
pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    if let Some(s) = a.scheme {
        t.scheme = s;
    }
    if let Some(v) = a.alpha {
        t.loss.alpha = v;
    }
    if let Some(v) = a.tau {
        t.loss.tau = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.base_lr {
        t.base_lr = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if a.val_fold.is_some() {
        cfg.val_fold = a.val_fold;
    }
    if let Some(m) = &a.manifest {
        cfg.dataset = manifest_source(m.clone());
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_metrics(label: &str, m: &Metrics) {
    println!("{label}: accuracy {:.4} ({} clips), mean loss {:.4}", m.accuracy, m.total(), m.mean_loss);
    for (k, acc) in m.per_class_accuracy.iter().enumerate() {
        let n: usize = m.confusion[k].iter().sum();
        println!("  class {k:>3}: {acc:.4} ({n} clips)");
    }
}

fn write_metrics_csv(m: &Metrics, path: &Path) -> Result<()> {
    let mut out = String::from("scope,count,accuracy,mean_loss\n");
    out.push_str(&format!("all,{},{},{}\n", m.total(), m.accuracy, m.mean_loss));
    for (k, acc) in m.per_class_accuracy.iter().enumerate() {
        let n: usize = m.confusion[k].iter().sum();
        out.push_str(&format!("class_{k},{n},{acc},\n"));
    }
    write_text(path, &out)
}

pub fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut cfg = resolve_train_config(&a)?;
    let dataset = cfg.dataset.load()?;
    // the classifier width always follows the data
    cfg.train.model.num_classes = dataset.num_classes;
    cfg.validate()?;
    if let Some(f) = cfg.val_fold {
        if f > dataset.num_folds {
            return Err(Error::Config(format!("val_fold {f} exceeds the {} folds available", dataset.num_folds)));
        }
    }
    let out = cfg.out.clone();
    create_dir(&out)?;
    write_text(&out.join("config.resolved.json"), &cfg.to_json())?;

    match cfg.val_fold {
        Some(fold) => {
            let outcome = trainer::train_fold(&dataset, fold, &cfg.train)?;
            save_outcome(&outcome, &out)?;
            if let Some(m) = &outcome.best_metrics {
                print_metrics(&format!("fold {fold} best"), m);
            }
        }
        None => {
            let mut save_err = None;
            let cv = evaluation::cross_validate_with(&dataset, &cfg.train, |fold, outcome| {
                let dir = out.join(format!("fold{fold}"));
                let res = create_dir(&dir).and_then(|_| save_outcome(outcome, &dir));
                if let Err(e) = res {
                    save_err.get_or_insert(e);
                }
                if let Some(m) = &outcome.best_metrics {
                    eprintln!("fold {fold}: best accuracy {:.4}", m.accuracy);
                }
            })?;
            if let Some(e) = save_err {
                return Err(e);
            }
            let mut csv = String::from("fold,accuracy,mean_loss,best_epoch\n");
            println!("{:>6} {:>9} {:>10}", "fold", "accuracy", "best_epoch");
            for f in &cv.folds {
                let be = f.best_epoch.map(|e| e.to_string()).unwrap_or_default();
                csv.push_str(&format!("{},{},{},{}\n", f.fold, f.metrics.accuracy, f.metrics.mean_loss, be));
                println!("{:>6} {:>9.4} {:>10}", f.fold, f.metrics.accuracy, be);
            }
            csv.push_str(&format!("mean,{},,\nstd,{},,\n", cv.mean_accuracy, cv.std_accuracy));
            println!("mean accuracy {:.4} ± {:.4}", cv.mean_accuracy, cv.std_accuracy);
            write_text(&out.join("metrics.csv"), &csv)?;
        }
    }
    Ok(0)
}

fn save_outcome(outcome: &trainer::TrainOutcome, dir: &Path) -> Result<()> {
    outcome.best.save(dir.join("best.sckp"))?;
    outcome.last.save(dir.join("last.sckp"))?;
    trainer::write_history_csv(&outcome.history, dir.join("metrics.csv"))?;
    Ok(())
}

/// Every `.sckp` file directly inside `dir`, in name order.
pub fn ensemble_members(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "sckp"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no .sckp files in {}", dir.display())));
    }
    Ok(paths)
}

pub fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let run_cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let source = match &a.manifest {
        Some(m) => manifest_source(m.clone()),
        None => run_cfg.dataset.clone(),
    };
    let paths = match (&a.checkpoint, &a.ensemble) {
        (Some(c), _) => vec![c.clone()],
        (None, Some(dir)) => ensemble_members(dir)?,
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --ensemble".into())),
    };
    let ckpts: Vec<Checkpoint> = paths.iter().map(load_checkpoint).collect::<Result<_>>()?;
    let first = &ckpts[0].config;
    if ckpts.iter().any(|c| c.config.features != first.features || c.config.augment != first.augment) {
        return Err(Error::Config("ensemble members use different feature settings".into()));
    }
    let dataset = source.load()?;
    let idx: Vec<usize> = match a.fold.or(run_cfg.val_fold) {
        Some(f) => dataset.fold_indices(f),
        None => (0..dataset.len()).collect(),
    };
    if idx.is_empty() {
        return Err(Error::Data("no clips selected for evaluation".into()));
    }
    let ctx = EvalContext::new(first, dataset.sample_rate)?;
    let models: Vec<&crate::nn::Model> = ckpts.iter().map(|c| &c.model).collect();
    let metrics = if models.len() == 1 {
        evaluation::evaluate(models[0], &dataset, &idx, &ctx)?
    } else {
        evaluation::evaluate_ensemble(&models, &dataset, &idx, &ctx)?
    };
    create_dir(&a.out)?;
    let label = if models.len() == 1 { "model".to_string() } else { format!("ensemble of {}", models.len()) };
    print_metrics(&label, &metrics);
    write_metrics_csv(&metrics, &a.out.join("metrics.csv"))?;

    if a.noise_sweep || a.sigmas.is_some() {
        if models.len() != 1 {
            return Err(Error::Config("--noise-sweep evaluates a single checkpoint".into()));
        }
        let sigmas = a.sigmas.clone().unwrap_or_else(|| DEFAULT_SIGMAS.to_vec());
        let seed = a.seed.unwrap_or(first.seed);
        let points = evaluation::noise_sweep(models[0], &dataset, &idx, &sigmas, seed, &ctx)?;
        println!("{:>10} {:>9}", "sigma", "accuracy");
        for p in &points {
            println!("{:>10.1e} {:>9.4}", p.sigma, p.accuracy);
        }
        evaluation::write_noise_csv(&points, a.out.join("noise_sweep.csv"))?;
    }
    if a.margins {
        if models.len() != 1 {
            return Err(Error::Config("--margins evaluates a single checkpoint".into()));
        }
        let m = evaluation::margin_stats(models[0], &dataset, &idx, &ctx)?;
        println!("margin {:.4} (intra {:.4}, inter {:.4})", m.margin, m.intra, m.inter);
        evaluation::write_margins_csv(&m, a.out.join("margins.csv"))?;
    }
    Ok(0)
}

/// Cache file name for a manifest entry: the clip name with a `.feat`
/// extension, directory separators flattened.
pub fn cache_name(filename: &str) -> String {
    let stem = Path::new(filename).with_extension("");
    format!("{}.feat", stem.to_string_lossy().replace(['/', '\\'], "__"))
}

pub fn cmd_featurize(a: FeaturizeArgs) -> Result<i32> {
    let stft = match &a.config {
        Some(p) => RunConfig::load(p)?.train.features,
        None => Default::default(),
    };
    let manifest = crate::audio_io::load_manifest(&a.manifest, a.audio_root.as_deref())?;
    let featurizer = Featurizer::new(&stft, a.sample_rate)?;
    create_dir(&a.out)?;
    for e in &manifest.entries {
        let w = crate::audio_io::load_wav(manifest.path_of(e))?;
        let w = crate::audio_io::normalize(&crate::audio_io::resample_linear(&w, a.sample_rate)?);
        let spec = featurizer.log_mel(&w)?;
        dsp::write_feature_cache(a.out.join(cache_name(&e.filename)), &spec.grid)?;
    }
    println!("wrote {} feature caches to {}", manifest.entries.len(), a.out.display());
    Ok(0)
}

pub fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let opts = SuiteOptions {
        instances: a.instances,
        seed: a.seed,
        inject_dense_fault: a.inject_fault,
        ..SuiteOptions::default()
    };
    let report = gradsuite::run_suite(&opts)?;
    print!("{report}");
    if report.passed() {
        Ok(0)
    } else {
        eprintln!("gradient check failed");
        Ok(3)
    }
}

pub fn cmd_synth(a: SynthArgs) -> Result<i32> {
    let mut spec: SynthSpec = match &a.spec {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(n) = a.samples_per_class {
        spec.samples_per_class = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let dataset: Dataset = synth::generate(&spec)?;
    synth::dump(&dataset, &a.out)?;
    println!("wrote {} clips to {}", dataset.len(), a.out.display());
    Ok(0)
}

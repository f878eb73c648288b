//! The `minipromptseg` command line: dataset generation, training,
//! evaluation, the two comparison protocols, overlays and self-checks.
//!
//! Exit codes: 0 success, 1 invalid usage or configuration, 2 runtime or
//! numeric failure.

mod config;
mod overlay;
pub mod selftest;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

pub use config::{apply_env_overrides, DataConfig, ProtocolConfig, RunConfig, ENV_PREFIX, RESOLVED_CONFIG};
pub use overlay::{contour, render_overlay, save_overlay};

use crate::data::{
    generate_synthetic_dataset, load_samples, split_dataset, CenterProfile, DatasetManifest, Split,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, evaluate_oracle, manifest_fingerprint, params_fingerprint, predict_full_res,
    run_cross_dataset, run_strategy_comparison,
};
use crate::gradcheck::{model_gradient_check, Coverage};
use crate::model::{init_params, load_checkpoint, ModelConfig};
use crate::training::{train, Strategy};
use crate::Real;

#[derive(Debug, Parser)]
#[command(name = "minipromptseg", version, about = "Box-promptable segmentation: data, training, evaluation")]
pub struct Cli {
    /// Seed for every random choice (overrides the config's model and train seeds)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel sample-level workers for gen-data and evaluation
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-center dataset with a stratified train/val split
    GenData(GenDataArgs),
    /// Train from random or checkpointed weights with best-validation restoration
    Train(TrainArgs),
    /// Evaluate a checkpoint (DSC / mIoU per center and overall)
    Eval(EvalArgs),
    /// Finetune a base checkpoint with both strategies and tabulate the results
    CompareStrategies(CompareArgs),
    /// Train on some centers and evaluate held-out centers without adaptation
    CrossDataset(CrossArgs),
    /// Draw ground-truth and predicted contours over one sample
    Overlay(OverlayArgs),
    /// Finite-difference check of the full model's gradients (64-bit)
    Gradcheck(GradcheckArgs),
    /// Run the built-in metric/loss/schedule/optimizer oracle suites
    Selftest,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Number of centers (built-in profiles, cycled with variations)
    #[arg(long, default_value_t = 5)]
    pub centers: usize,
    /// Images per center
    #[arg(long, default_value_t = 20)]
    pub per_center: usize,
    /// Fraction of each center's images assigned to train
    #[arg(long, default_value_t = 0.8)]
    pub train_fraction: f64,
    /// Run config whose data.profiles replace the built-in centers
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run config (JSON); defaults apply to missing keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (overrides data.dir)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Transfer strategy (overrides train.strategy)
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Optimizer steps (overrides train.total_steps)
    #[arg(long)]
    pub steps: Option<usize>,
    /// Start from this checkpoint instead of random weights
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint manifest (`best.json`); required unless --oracle
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Which split to evaluate
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    /// Comma-separated center filter
    #[arg(long, value_delimiter = ',')]
    pub centers: Vec<String>,
    /// Use the ground truth as the prediction (metric sanity check)
    #[arg(long)]
    pub oracle: bool,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run config (JSON); defaults apply to missing keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fine-tuning dataset directory (overrides data.dir)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Base ("pretrained") checkpoint both strategies start from
    #[arg(long)]
    pub base: PathBuf,
    /// Optimizer steps per strategy (overrides train.total_steps)
    #[arg(long)]
    pub steps: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CrossArgs {
    /// Run config (JSON); defaults apply to missing keys
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (overrides data.dir)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated training centers (overrides protocol.train_centers)
    #[arg(long, value_delimiter = ',')]
    pub train_centers: Vec<String>,
    /// Comma-separated held-out centers (overrides protocol.held_out_centers)
    #[arg(long, value_delimiter = ',')]
    pub held_out: Vec<String>,
    /// Transfer strategy (overrides train.strategy)
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Optimizer steps (overrides train.total_steps)
    #[arg(long)]
    pub steps: Option<usize>,
    /// Start from this checkpoint instead of random weights
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    /// Checkpoint manifest (`best.json`)
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Sample id from the manifest
    #[arg(long)]
    pub sample: String,
    /// Pixel magnification
    #[arg(long, default_value_t = 4)]
    pub scale: usize,
    /// Output PNG path
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run config whose model section is checked (default: 32 px, one block)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Perturb every element, or a seeded sample per tensor plus a directional probe
    #[arg(long, value_enum, default_value_t = CoverageArg::Sampled)]
    pub coverage: CoverageArg,
    /// Elements per tensor for sampled coverage
    #[arg(long, default_value_t = 24)]
    pub per_tensor: usize,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-3)]
    pub step: f64,
    /// Maximum accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Optional JSON report path
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    DecoderOnly,
    Full,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::DecoderOnly => Strategy::DecoderOnly,
            StrategyArg::Full => Strategy::Full,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CoverageArg {
    Sampled,
    Exhaustive,
}

/// Removes a directory this command created unless the command succeeds.
struct OutputGuard {
    path: PathBuf,
    owned: bool,
    keep: bool,
}

impl OutputGuard {
    fn create(path: &Path) -> Result<Self> {
        let owned = match fs::read_dir(path) {
            Ok(mut it) => it.next().is_none(),
            Err(_) => true,
        };
        fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            owned,
            keep: false,
        })
    }

    fn keep(&mut self) {
        self.keep = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.owned && !self.keep {
            let _ = fs::remove_dir_all(&self.path);
        }
    }
}

fn env_vars() -> Vec<(String, String)> {
    std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
}

fn require_dir(p: &Path, what: &str) -> Result<()> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", p.display())))
    }
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", p.display())))
    }
}

fn resolve(cli: &Cli, config: Option<&Path>, data: Option<&Path>) -> Result<RunConfig> {
    if let Some(c) = config {
        require_file(c, "config")?;
    }
    let mut cfg = RunConfig::load(config, env_vars())?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    if let Some(d) = data {
        cfg.data.dir = Some(d.to_path_buf());
    }
    Ok(cfg)
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let d = cfg
        .data
        .dir
        .clone()
        .ok_or_else(|| Error::Config("no dataset directory (use --data or data.dir)".into()))?;
    require_dir(&d, "data directory")?;
    Ok(d)
}

/// Loads a checkpoint, replacing the run's model config with the
/// checkpoint's own.
fn load_init(path: &Path, cfg: &mut RunConfig) -> Result<crate::ParameterStore<Real>> {
    let (manifest, store) = load_checkpoint::<Real>(path)?;
    cfg.model = manifest.config;
    Ok(store)
}

fn cmd_gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let cfg = resolve(cli, a.config.as_deref(), None)?;
    let profiles = if cfg.data.profiles.is_empty() {
        if a.centers == 0 {
            return Err(Error::Config("--centers must be >= 1".into()));
        }
        CenterProfile::builtin(a.centers)
    } else {
        cfg.data.profiles.clone()
    };
    for p in &profiles {
        p.validate()?;
    }
    if a.per_center == 0 || !(a.train_fraction > 0.0 && a.train_fraction < 1.0) {
        return Err(Error::Config("--per-center must be >= 1 and --train-fraction in (0, 1)".into()));
    }
    let seed = cli.seed.unwrap_or(0);
    let mut guard = OutputGuard::create(&a.out)?;
    let manifest = generate_synthetic_dataset(&profiles, a.per_center, &a.out, seed, cli.jobs)?;
    let (manifest, warnings) = split_dataset(&manifest, a.train_fraction, seed)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    manifest.save(&a.out)?;
    let resolved = RunConfig {
        data: DataConfig {
            dir: Some(a.out.clone()),
            profiles,
        },
        ..cfg
    };
    resolved.write_resolved(&a.out)?;
    println!(
        "wrote {} samples ({} train, {} val) from {} centers to {}",
        manifest.entries.len(),
        manifest.count(Split::Train),
        manifest.count(Split::Val),
        manifest.centers().len(),
        a.out.display()
    );
    guard.keep();
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve(cli, a.config.as_deref(), a.data.as_deref())?;
    if let Some(s) = a.strategy {
        cfg.train.strategy = s.into();
    }
    if let Some(n) = a.steps {
        cfg.train.total_steps = n;
    }
    let dir = data_dir(&cfg)?;
    let init = match &a.init {
        Some(p) => {
            require_file(p, "checkpoint")?;
            load_init(p, &mut cfg)?
        }
        None => init_params::<Real>(&cfg.model, cfg.model.seed)?,
    };
    cfg.validate()?;
    let manifest = DatasetManifest::load(&dir)?;
    manifest.validate(&dir)?;
    if manifest.count(Split::Train) == 0 || manifest.count(Split::Val) == 0 {
        return Err(Error::Config("the manifest needs train and val entries".into()));
    }
    let mut guard = OutputGuard::create(&a.out)?;
    cfg.write_resolved(&a.out)?;
    match train(&cfg.model, &cfg.train, &manifest, &dir, init, Some(&a.out)) {
        Ok(out) => {
            println!(
                "best step {} of {}: val DSC {:.4}, val mIoU {:.4}",
                out.history.best_step, cfg.train.total_steps, out.history.best_val_dsc, out.history.best_val_miou
            );
            guard.keep();
            Ok(())
        }
        Err(e @ Error::Numeric(_)) => {
            guard.keep();
            Err(e)
        }
        Err(e) => Err(e),
    }
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    require_dir(&a.data, "data directory")?;
    let manifest = DatasetManifest::load(&a.data)?;
    let centers: BTreeSet<String> = a.centers.iter().cloned().collect();
    let entries: Vec<_> = manifest
        .entries
        .iter()
        .filter(|e| match a.split {
            SplitArg::Train => e.split == Split::Train,
            SplitArg::Val => e.split == Split::Val,
            SplitArg::Test => e.split == Split::Test,
            SplitArg::All => true,
        })
        .filter(|e| centers.is_empty() || centers.contains(&e.center_id))
        .collect();
    if entries.is_empty() {
        return Err(Error::Config("the split/center filter selects no samples".into()));
    }
    let loaded = match (&a.checkpoint, a.oracle) {
        (_, true) => None,
        (Some(p), false) => {
            require_file(p, "checkpoint")?;
            Some(load_checkpoint::<Real>(p)?)
        }
        (None, false) => return Err(Error::Config("--checkpoint is required unless --oracle".into())),
    };
    let mut guard = OutputGuard::create(&a.out)?;
    let samples = load_samples(&a.data, &entries)?;
    let mut meta = std::collections::BTreeMap::from([
        ("manifest".to_string(), json!(manifest_fingerprint(&manifest)?)),
        ("split".to_string(), json!(format!("{:?}", a.split).to_lowercase())),
        ("seed".to_string(), json!(cli.seed)),
    ]);
    let (report, cfg) = match loaded {
        None => {
            let mut r = evaluate_oracle(&samples, "oracle")?;
            meta.insert("checkpoint".into(), json!("oracle"));
            r.metadata = meta;
            (r, RunConfig::default())
        }
        Some((m, store)) => {
            meta.insert("checkpoint".into(), json!(params_fingerprint(&store)));
            if let Some(s) = m.metadata.get("strategy") {
                meta.insert("strategy".into(), s.clone());
            }
            let r = evaluate(&store, &m.config, &samples, "multi-center", meta, cli.jobs)?;
            let cfg = RunConfig {
                model: m.config,
                ..RunConfig::default()
            };
            (r, cfg)
        }
    };
    let resolved = RunConfig {
        data: DataConfig {
            dir: Some(a.data.clone()),
            profiles: vec![],
        },
        ..cfg
    };
    resolved.write_resolved(&a.out)?;
    report.write(&a.out)?;
    print!("{}", report.to_markdown());
    guard.keep();
    Ok(())
}

fn cmd_compare(cli: &Cli, a: &CompareArgs) -> Result<()> {
    let mut cfg = resolve(cli, a.config.as_deref(), a.data.as_deref())?;
    if let Some(n) = a.steps {
        cfg.train.total_steps = n;
    }
    let dir = data_dir(&cfg)?;
    require_file(&a.base, "base checkpoint")?;
    let base = load_init(&a.base, &mut cfg)?;
    cfg.validate()?;
    let manifest = DatasetManifest::load(&dir)?;
    manifest.validate(&dir)?;
    let mut guard = OutputGuard::create(&a.out)?;
    cfg.write_resolved(&a.out)?;
    let table = run_strategy_comparison(&cfg.model, &cfg.train, &manifest, &dir, &base, Some(&a.out), cli.jobs)?;
    print!("{}", table.to_markdown());
    guard.keep();
    Ok(())
}

fn cmd_cross(cli: &Cli, a: &CrossArgs) -> Result<()> {
    let mut cfg = resolve(cli, a.config.as_deref(), a.data.as_deref())?;
    if let Some(s) = a.strategy {
        cfg.train.strategy = s.into();
    }
    if let Some(n) = a.steps {
        cfg.train.total_steps = n;
    }
    if !a.train_centers.is_empty() {
        cfg.protocol.train_centers = a.train_centers.iter().cloned().collect();
    }
    if !a.held_out.is_empty() {
        cfg.protocol.held_out_centers = a.held_out.iter().cloned().collect();
    }
    cfg.protocol.name = Some("cross-dataset".into());
    let dir = data_dir(&cfg)?;
    let init = match &a.init {
        Some(p) => {
            require_file(p, "checkpoint")?;
            load_init(p, &mut cfg)?
        }
        None => init_params::<Real>(&cfg.model, cfg.model.seed)?,
    };
    cfg.validate()?;
    let (tc, ho) = (&cfg.protocol.train_centers, &cfg.protocol.held_out_centers);
    if tc.is_empty() || ho.is_empty() || tc.intersection(ho).next().is_some() {
        return Err(Error::Config(
            "cross-dataset needs non-empty, disjoint --train-centers and --held-out".into(),
        ));
    }
    let manifest = DatasetManifest::load(&dir)?;
    manifest.validate(&dir)?;
    let mut guard = OutputGuard::create(&a.out)?;
    cfg.write_resolved(&a.out)?;
    let result = run_cross_dataset(&cfg.model, &cfg.train, &manifest, &dir, tc, ho, init, Some(&a.out), cli.jobs)?;
    print!("{}", result.to_markdown());
    println!(
        "in-domain val DSC {:.4}; disjointness audit {}",
        result.in_domain.overall.dsc,
        if result.audit.passed { "passed" } else { "FAILED" }
    );
    guard.keep();
    Ok(())
}

fn cmd_overlay(a: &OverlayArgs) -> Result<()> {
    require_dir(&a.data, "data directory")?;
    require_file(&a.checkpoint, "checkpoint")?;
    let manifest = DatasetManifest::load(&a.data)?;
    let entry = manifest
        .entries
        .iter()
        .find(|e| e.sample_id == a.sample)
        .ok_or_else(|| Error::Config(format!("sample {} is not in the manifest", a.sample)))?;
    let (m, store) = load_checkpoint::<Real>(&a.checkpoint)?;
    let sample = load_samples(&a.data, &[entry])?.remove(0);
    let pred = predict_full_res(&store, &m.config, &sample)?;
    let img = render_overlay(&sample, &pred, a.scale)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_overlay(&a.out, &img)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    let model = match &a.config {
        Some(_) => resolve(cli, a.config.as_deref(), None)?.model,
        None => ModelConfig::tiny(),
    };
    if !(a.step > 0.0 && a.step.is_finite()) || a.per_tensor == 0 {
        return Err(Error::Config("--step must be positive and --per-tensor >= 1".into()));
    }
    let seed = cli.seed.unwrap_or(0);
    let coverage = match a.coverage {
        CoverageArg::Exhaustive => Coverage::Exhaustive,
        CoverageArg::Sampled => Coverage::Sampled {
            per_tensor: a.per_tensor,
            seed,
        },
    };
    let report = model_gradient_check(&model, None, a.step, coverage, seed)?;
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| Error::io(p, e))?;
    }
    println!(
        "{} tensors, {} elements, {} directional probes: max relative error {:.3e}",
        report.tensors_checked, report.elements_checked, report.directional_probes, report.max_rel_error
    );
    if report.max_rel_error < a.tolerance {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "max relative error {:.3e} exceeds {:.1e} (worst: {:?})",
            report.max_rel_error, a.tolerance, report.worst
        )))
    }
}

fn cmd_selftest(cli: &Cli) -> Result<()> {
    let checks = selftest::run_all(cli.seed.unwrap_or(0))?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        println!("[{}] {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{failed} self-test check(s) failed")))
    }
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::CompareStrategies(a) => cmd_compare(cli, a),
        Command::CrossDataset(a) => cmd_cross(cli, a),
        Command::Overlay(a) => cmd_overlay(a),
        Command::Gradcheck(a) => cmd_gradcheck(cli, a),
        Command::Selftest => cmd_selftest(cli),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

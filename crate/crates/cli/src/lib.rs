//! The `latent-steer` command line.
//!
//! Exit codes: 0 success, 1 runtime failure (including a failing gradient
//! audit), 2 configuration or checkpoint problems, 3 training divergence.

use std::collections::BTreeMap;
use std::fmt;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use latent_steer::evaluation::{emit_pair_study, full_report};
use latent_steer::gradcheck::{loss_surveys, model_surveys, GradientSummary};
use latent_steer::persist::{write_atomic, Checkpoint, RunConfig};
use latent_steer::trainer::{gradient_audit, progress_line, AuditScope, IterationRecord, TrainObserver};
use latent_steer::{
    EditMode, EditSession, Error, Image, InversionConfig, LoadedEditor, LossWeights, ModelBundle, RegMode, SeededRng,
    Trainer, TransformKind, TransformModule,
};
use latent_steer_service::{AppState, BusyPolicy, Model, ServiceConfig, DEFAULT_INVERSION_STEPS, DEFAULT_PORT};
use serde_json::json;

pub const SEED_ENV: &str = "LATENT_STEER_SEED";

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. }
            | Error::Checkpoint(_)
            | Error::DimensionMismatch { .. }
            | Error::InvalidValue { .. }
            | Error::UnknownKind(_) => 2,
            Error::Divergence { .. } => 3,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self {
            code: 1,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "latent-steer", version, about = "Learned multi-attribute latent editing directions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a transform from a run config.
    Train(TrainArgs),
    /// Write leakage and identity reports for a checkpoint.
    Eval(EvalArgs),
    /// Edit one latent and write original and edited PNGs.
    Edit(EditArgs),
    /// Invert a PNG and write the result as JSON.
    Invert(InvertArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Serve interactive edit sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct WorldArgs {
    /// Run config; defaults to the checkpoint's own snapshot, then the toy world.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Print a progress line every N iterations.
    #[arg(long, default_value_t = 100)]
    pub progress_every: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long, default_value_t = 400)]
    pub images: usize,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    /// Output directory; defaults to the config's report dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also export ±0.4 image pairs for this attribute.
    #[arg(long)]
    pub pair_study: Option<String>,
    #[arg(long, default_value_t = 10)]
    pub pairs: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Relative,
    AbsoluteTarget,
}

impl From<ModeArg> for EditMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Relative => EditMode::Relative,
            ModeArg::AbsoluteTarget => EditMode::AbsoluteTarget,
        }
    }
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub world: WorldArgs,
    /// Sample the starting latent from the prior with this seed.
    #[arg(long, conflicts_with = "image", required_unless_present = "image")]
    pub z_seed: Option<u64>,
    /// Start from the inversion of this PNG.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Comma-separated `name=value` pairs, e.g. `background=+0.3,size=-0.2`.
    #[arg(long, allow_hyphen_values = true)]
    pub delta: String,
    #[arg(long, value_enum, default_value = "relative")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = DEFAULT_INVERSION_STEPS)]
    pub inversion_steps: usize,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long, default_value_t = DEFAULT_INVERSION_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = InversionConfig::default().restarts)]
    pub restarts: usize,
    #[arg(long, default_value_t = InversionConfig::default().learning_rate)]
    pub learning_rate: f64,
    #[arg(long, default_value = "inversion.json")]
    pub out: PathBuf,
    /// Also write the reconstruction as PNG.
    #[arg(long)]
    pub reconstruction: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Audit this checkpoint's transform; otherwise a fresh one of `--kind`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub world: WorldArgs,
    #[arg(long, default_value = "global-linear")]
    pub kind: String,
    #[arg(long, default_value_t = 100)]
    pub points: usize,
    /// Check each loss term end to end, not just the total.
    #[arg(long)]
    pub by_term: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BusyArg {
    Queue,
    Reject,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Without a checkpoint every model route answers 503.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PORT)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    #[arg(long, default_value_t = DEFAULT_INVERSION_STEPS)]
    pub inversion_steps: usize,
    /// Origin of the web UI; any origin when unset.
    #[arg(long)]
    pub cors_origin: Option<String>,
    #[arg(long, value_enum, default_value = "queue")]
    pub busy: BusyArg,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Edit(a) => cmd_edit(&a),
        Command::Invert(a) => cmd_invert(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Serve(a) => cmd_serve(&a),
    }
}

/// `LATENT_STEER_SEED`, if set.
fn seed_override() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::usage(format!("{SEED_ENV}: `{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// The run config for a command: `--config`, else the checkpoint snapshot,
/// else defaults.
fn resolve_config(world: &WorldArgs, ckpt: Option<&Checkpoint>) -> CliResult<RunConfig> {
    let mut cfg = match (&world.config, ckpt.and_then(|c| c.config.clone())) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(c)) => c,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::usage(format!("checkpoint {} not found", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

/// Checkpoint, config, bundle, and editor, with dimensions checked.
fn load_model(checkpoint: &Path, world: &WorldArgs) -> CliResult<(RunConfig, ModelBundle, LoadedEditor)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let cfg = resolve_config(world, Some(&ckpt))?;
    let bundle = cfg.bundle()?;
    let editor = ckpt.editor()?;
    editor.check_compatible(&bundle)?;
    Ok((cfg, bundle, editor))
}

struct CliObserver {
    run: RunConfig,
    progress_every: u64,
    total: u64,
}

impl TrainObserver for CliObserver {
    fn on_iteration(&mut self, r: &IterationRecord) -> latent_steer::Result<()> {
        if self.progress_every > 0 && (r.iteration.is_multiple_of(self.progress_every) || r.iteration == self.total) {
            println!("{}", progress_line(r.iteration, &r.loss));
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, t: &Trainer) -> latent_steer::Result<Option<String>> {
        let name = format!("iter_{:06}.json", t.iteration());
        save_training_checkpoint(&self.run, t, &self.run.paths.checkpoint_dir.join(&name))?;
        Ok(Some(name))
    }
}

fn save_training_checkpoint(run: &RunConfig, t: &Trainer, path: &Path) -> latent_steer::Result<()> {
    Checkpoint::for_transform(t.transform())
        .with_optimizer(t.optimizer_state())
        .with_config(run)
        .with_rng(t.rng().state())
        .with_iteration(t.iteration())
        .save(path)
}

pub fn cmd_train(a: &TrainArgs) -> CliResult {
    let run = load_config(&a.config)?;
    let bundle = run.bundle()?;
    let cfg = run.train_config();
    let mut t = Trainer::init_transform(&cfg, &bundle, run.transform)?;
    if let Some(scale) = run.normalization {
        t = t.with_normalization(scale)?;
    }
    let total = cfg.iterations;
    let mut trainer = Trainer::new(cfg, bundle, t)?;
    let mut observer = CliObserver {
        run: run.clone(),
        progress_every: a.progress_every,
        total,
    };
    let start = Instant::now();
    let record = trainer.run(&mut observer)?;
    let log = run.paths.report_dir.join("train_log.csv");
    write_atomic(&log, record.to_csv().as_bytes())?;
    let final_path = run.paths.checkpoint_dir.join("final.json");
    save_training_checkpoint(&run, &trainer, &final_path)?;
    println!(
        "trained {} iterations in {:.1}s; checkpoint {}; log {}",
        trainer.iteration(),
        start.elapsed().as_secs_f64(),
        final_path.display(),
        log.display()
    );
    Ok(())
}

fn attribute_index(bundle: &ModelBundle, name: &str) -> CliResult<usize> {
    bundle
        .regressor
        .attribute_names()
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| CliError::usage(format!("unknown attribute `{name}`")))
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult {
    let (cfg, bundle, editor) = load_model(&a.checkpoint, &a.world)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.report_dir.clone());
    let rng = SeededRng::new(cfg.seed);
    let report = full_report(&editor, &bundle, &cfg.bins, a.images, a.repeats, &rng.substream(&[0]))?;
    write_atomic(&out.join("eval_report.csv"), report.to_csv().as_bytes())?;
    write_atomic(
        &out.join("eval_report.json"),
        serde_json::to_string_pretty(&report).map_err(Error::from)?.as_bytes(),
    )?;
    print!("{}", report.to_table());
    if let Some(name) = &a.pair_study {
        let i = attribute_index(&bundle, name)?;
        let study = emit_pair_study(&editor, &bundle, i, a.pairs, &rng.substream(&[1]))?;
        let manifest = study.write(&out.join(format!("pairs_{name}")))?;
        println!("pair study: {}", manifest.display());
    }
    println!("reports written to {}", out.display());
    Ok(())
}

/// Parse `a=+0.3,b=-0.2`.
pub fn parse_delta(text: &str) -> CliResult<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("--delta: `{part}` is not name=value")))?;
        let value: f64 = v
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("--delta: `{v}` is not a number")))?;
        if out.insert(k.trim().to_string(), value).is_some() {
            return Err(CliError::usage(format!("--delta: `{k}` given twice")));
        }
    }
    Ok(out)
}

fn read_png(path: &Path) -> CliResult<Image> {
    let bytes = std::fs::read(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok(Image::from_png(&bytes)?)
}

fn check_shape(img: &Image, bundle: &ModelBundle) -> CliResult {
    if img.shape() != bundle.image_shape() {
        return Err(CliError::usage(format!(
            "image is {:?}, the model renders {:?}",
            img.shape(),
            bundle.image_shape()
        )));
    }
    Ok(())
}

pub fn cmd_edit(a: &EditArgs) -> CliResult {
    let (cfg, bundle, editor) = load_model(&a.checkpoint, &a.world)?;
    let request = parse_delta(&a.delta)?;
    let mut session = match (a.z_seed, &a.image) {
        (Some(seed), _) => EditSession::from_seed(&bundle, seed)?,
        (None, Some(path)) => {
            let target = read_png(path)?;
            check_shape(&target, &bundle)?;
            let inv = InversionConfig {
                steps: a.inversion_steps,
                ..InversionConfig::default()
            };
            EditSession::from_image(&bundle, &target, &inv, cfg.seed)?
        }
        (None, None) => return Err(CliError::usage("one of --z-seed or --image is required")),
    };
    let out = session.edit(&bundle, &editor, &request, a.mode.into())?;
    let original = a.out.join("original.png");
    let edited = a.out.join("edited.png");
    write_atomic(&original, &session.original().to_png()?)?;
    write_atomic(&edited, &out.image.to_png()?)?;
    let summary = json!({
        "attribute_names": bundle.regressor.attribute_names(),
        "attributes_before": session.baseline().as_slice(),
        "attributes_after": out.attributes.as_slice(),
        "requested": out.requested,
        "applied": out.applied.as_slice(),
        "clip_adjustments": out.clip_adjustments,
        "identity": out.identity,
        "inversion_mse": session.inversion_mse(),
        "original": original,
        "edited": edited,
    });
    println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
    Ok(())
}

pub fn cmd_invert(a: &InvertArgs) -> CliResult {
    let cfg = resolve_config(&a.world, None)?;
    let bundle = cfg.bundle()?;
    let target = read_png(&a.image)?;
    check_shape(&target, &bundle)?;
    let inv = InversionConfig {
        steps: a.steps,
        restarts: a.restarts,
        learning_rate: a.learning_rate,
        ..InversionConfig::default()
    };
    let result = latent_steer::invert(&target, &bundle, &inv, &SeededRng::new(cfg.seed))?;
    write_atomic(&a.out, serde_json::to_string_pretty(&result).map_err(Error::from)?.as_bytes())?;
    if let Some(p) = &a.reconstruction {
        write_atomic(p, &bundle.generator.generate(&result.z)?.to_png()?)?;
    }
    println!("final_mse={:.6e} steps={} -> {}", result.final_mse, result.trace.len(), a.out.display());
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> CliResult {
    let ckpt = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let cfg = resolve_config(&a.world, ckpt.as_ref())?;
    let bundle = cfg.bundle()?;
    let mut rng = SeededRng::new(cfg.seed);
    let t = match &ckpt {
        Some(c) => c.transform()?,
        None => {
            let kind: TransformKind = a.kind.parse()?;
            TransformModule::init(kind, bundle.latent_dim(), bundle.num_attributes(), &mut rng.substream(&[1]))?
        }
    };
    let mut surveys: Vec<GradientSummary> = loss_surveys(a.points, &mut rng)?;
    surveys.extend(model_surveys(&bundle, a.points, &mut rng)?);
    let scope = if a.by_term { AuditScope::ByTerm } else { AuditScope::Total };
    let weights: LossWeights = cfg.train.weights;
    let audit = gradient_audit(&bundle, &t, a.points, &weights, RegMode::Standard, scope, &mut rng)?;
    surveys.extend(audit.terms);
    let mut ok = true;
    for s in &surveys {
        println!("{s}");
        ok &= s.passes();
    }
    let worst = surveys.iter().map(|s| s.max_rel_error).fold(0.0, f64::max);
    println!("transform={} max_rel_error={worst:.3e} {}", t.kind(), if ok { "PASS" } else { "FAIL" });
    if ok {
        Ok(())
    } else {
        Err(CliError {
            code: 1,
            message: "gradient audit failed".into(),
        })
    }
}

pub fn cmd_serve(a: &ServeArgs) -> CliResult {
    let model = match &a.checkpoint {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            let cfg = resolve_config(&WorldArgs { config: None }, Some(&ckpt))?;
            Some(Model::new(cfg.bundle()?, ckpt.editor()?)?)
        }
        None => None,
    };
    let config = ServiceConfig {
        inversion: InversionConfig {
            steps: a.inversion_steps,
            ..InversionConfig::default()
        },
        busy: match a.busy {
            BusyArg::Queue => BusyPolicy::Queue,
            BusyArg::Reject => BusyPolicy::Reject,
        },
        cors_origin: a.cors_origin.clone(),
    };
    config.inversion.validate()?;
    let addr = SocketAddr::new(a.host, a.port);
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    eprintln!("serving on http://{addr}");
    runtime.block_on(latent_steer_service::serve(addr, AppState::new(model, config)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_parsing() {
        let d = parse_delta("background=+0.3, size=-0.2").unwrap();
        assert_eq!(d["background"], 0.3);
        assert_eq!(d["size"], -0.2);
        assert!(parse_delta("").unwrap().is_empty());
        assert!(parse_delta("a").is_err());
        assert!(parse_delta("a=x").is_err());
        assert!(parse_delta("a=1,a=2").is_err());
    }

    #[test]
    fn error_codes() {
        let c = |e: Error| CliError::from(e).code;
        assert_eq!(c(Error::Divergence { iteration: 3 }), 3);
        assert_eq!(
            c(Error::Config {
                field: "x".into(),
                reason: "y".into()
            }),
            2
        );
        assert_eq!(c(Error::Checkpoint("bad".into())), 2);
        assert_eq!(c(Error::InversionFailed { restarts: 1 }), 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}

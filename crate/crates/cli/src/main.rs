//! `dsdseg`: phantom generation, training, evaluation, ablation and the
//! verification suite from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsdseg::data::{generate_dataset, DatasetSpec, PhantomSpec, Split, SplitSpec};
use dsdseg::metrics::HdConvention;
use dsdseg::trainer::{ablate, evaluate, resume, train_with, Coefficients, EpochRecord, EvalOptions, TrainConfig};
use dsdseg::verify::{run_all, VerifyOptions};
use dsdseg::{AblationMode, Error};

mod exit {
    pub const OK: u8 = 0;
    pub const INTERNAL: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
}

#[derive(Parser)]
#[command(name = "dsdseg", version, about = "Dual self-distillation for U-shaped 3D segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write seeded phantom volumes and a manifest.
    GenData(GenDataArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Train and compare several ablation modes over several seeds.
    Ablate(AblateArgs),
    /// Run the oracle and gradient checks.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    output_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    num: usize,
    /// Edge length, or three comma-separated extents.
    #[arg(long, default_value = "32", value_parser = parse_shape)]
    shape: [usize; 3],
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.5)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ellipsoids per foreground class.
    #[arg(long, default_value_t = 1)]
    structures: usize,
    /// Train/val/test fractions.
    #[arg(long, value_parser = parse_triple::<f64>, conflicts_with = "split_counts")]
    split: Option<[f64; 3]>,
    /// Exact train/val/test counts; must sum to --num.
    #[arg(long, value_parser = parse_triple::<usize>)]
    split_counts: Option<[usize; 3]>,
    #[arg(long, value_parser = parse_triple::<f32>)]
    spacing: Option<[f32; 3]>,
}

#[derive(Args)]
struct RunOptions {
    /// JSON training configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    num_stages: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Explicit `eta,alpha1,alpha2` replacing the preset coefficients.
    #[arg(long, value_parser = parse_triple::<f64>)]
    coefficients: Option<[f64; 3]>,
    #[arg(long)]
    target_val_dice: Option<f64>,
    #[arg(long)]
    no_flips: bool,
    /// Replace existing results instead of refusing.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunOptions,
    #[arg(long, value_parser = parse_mode)]
    ablation_mode: Option<AblationMode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue the run in --output-dir from its last checkpoint.
    #[arg(long, conflicts_with = "overwrite")]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    Max,
    Pooled,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the manifest the checkpoint was trained on.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
    /// Defaults to the checkpoint's directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    include_background: bool,
    #[arg(long, value_enum, default_value = "max")]
    hd_convention: ConventionArg,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunOptions,
    #[arg(long, value_delimiter = ',', default_value = "DS,SDE,SDD,DSD", value_parser = parse_mode)]
    modes: Vec<AblationMode>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    json: bool,
    /// Shift the Dice smoothing constant on the implementation side only.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    perturb_dice_eps: f64,
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("invalid extent {p:?}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [a, b, c] => Ok([a, b, c]),
        _ => Err("expected one or three extents".into()),
    }
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("invalid value {p:?}")))
        .collect::<Result<_, _>>()?;
    <[T; 3]>::try_from(parts).map_err(|_| "expected three comma-separated values".to_string())
}

fn parse_mode(s: &str) -> Result<AblationMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure carried to `main`: an exit code plus a message.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: exit::USAGE,
            kind: "usage",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Io { .. } | Error::Format { .. } | Error::Csv(_) => (exit::IO, "io"),
            Error::Config(_) | Error::Json { .. } | Error::Contract(_) | Error::ShapeMismatch { .. } => {
                (exit::USAGE, "usage")
            }
            Error::NonFiniteLoss { .. } => (exit::INTERNAL, "non_finite_loss"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let message = e.render().to_string();
            report(&Failure::usage(message.trim_end()));
            return ExitCode::from(exit::USAGE);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            report(&f);
            ExitCode::from(f.code)
        }
    }
}

/// One JSON object per failure on stderr.
fn report(f: &Failure) {
    let obj = serde_json::json!({ "error": { "kind": f.kind, "exit_code": f.code, "message": f.message } });
    eprintln!("{obj}");
}

fn gen_data(a: GenDataArgs) -> Result<u8, Failure> {
    if a.classes < 2 {
        return Err(Failure::usage(format!("--classes must be >= 2, got {}", a.classes)));
    }
    let split = match (a.split, a.split_counts) {
        (_, Some(c)) => SplitSpec::Counts(c),
        (Some(r), None) => SplitSpec::Ratios(r),
        (None, None) => SplitSpec::default(),
    };
    let mut phantom = PhantomSpec::new(a.shape[0], a.classes, a.noise_sigma, a.seed);
    phantom.shape = a.shape;
    phantom.num_structures = vec![a.structures; a.classes - 1];
    if let Some(s) = a.spacing {
        phantom.spacing = s;
    }
    let spec = DatasetSpec {
        phantom,
        num_samples: a.num,
        split,
    };
    let manifest = generate_dataset(&a.output_dir, &spec)?;
    let [tr, va, te] = manifest.split_sizes();
    println!(
        "wrote {} samples to {} (train {tr}, val {va}, test {te})",
        manifest.samples.len(),
        a.output_dir.join("manifest.json").display()
    );
    Ok(exit::OK)
}

/// Configuration from `--config` (or defaults) with flag overrides applied.
fn build_config(r: &RunOptions) -> Result<TrainConfig, Failure> {
    let mut cfg = match &r.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = &r.manifest {
        cfg.manifest_path = m.clone();
    }
    if let Some(o) = &r.output_dir {
        cfg.output_dir = o.clone();
    }
    if let Some(v) = r.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = r.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = r.lr {
        cfg.optimizer.learning_rate = v;
    }
    if let Some(v) = r.base_channels {
        cfg.arch.base_channels = v;
    }
    if let Some(v) = r.num_stages {
        cfg.arch.num_stages = v;
    }
    if let Some(v) = r.tau {
        cfg.dsd.tau = v;
    }
    if let Some([eta, alpha1, alpha2]) = r.coefficients {
        cfg.coefficient_override = Some(Coefficients { eta, alpha1, alpha2 });
    }
    if r.target_val_dice.is_some() {
        cfg.target_val_dice = r.target_val_dice;
    }
    if r.no_flips {
        cfg.augment_flips = false;
    }
    Ok(cfg)
}

/// Refuses to reuse a non-empty directory unless `overwrite`, in which
/// case the directory is cleared first.
fn prepare_output(dir: &Path, overwrite: bool) -> Result<(), Failure> {
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if !occupied {
        return Ok(());
    }
    if !overwrite {
        return Err(Failure::usage(format!(
            "output directory {} is not empty; pass --overwrite to replace it",
            dir.display()
        )));
    }
    fs::remove_dir_all(dir).map_err(|e| Failure::from(Error::Io { path: dir.into(), source: e }))
}

fn print_epoch(r: &EpochRecord) {
    let l = &r.loss;
    let val = r.val_dice.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "epoch {:>4}  main {:.5}  deep_supervision {:.5}  kl_encoder {:.5}  kl_decoder {:.5}  total {:.5}  val_dice {val}",
        r.epoch, l.main, l.deep_supervision, l.kl_encoder, l.kl_decoder, l.total
    );
}

fn cmd_train(a: TrainArgs) -> Result<u8, Failure> {
    let mut print = |r: &EpochRecord| print_epoch(r);
    let summary = if a.resume {
        let dir = a
            .run
            .output_dir
            .as_ref()
            .ok_or_else(|| Failure::usage("--resume needs --output-dir"))?;
        resume(dir, a.run.epochs, &mut print)?
    } else {
        let mut cfg = build_config(&a.run)?;
        if let Some(m) = a.ablation_mode {
            cfg.ablation_mode = m;
        }
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        prepare_output(&cfg.output_dir, a.run.overwrite)?;
        train_with(&cfg, &mut print)?
    };
    let best = summary.best_val_dice.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "finished {} epochs{}; best val_dice {best} at epoch {}; run dir {}",
        summary.epochs_completed,
        if summary.stopped_early { " (target reached)" } else { "" },
        summary.best_epoch.map_or_else(|| "n/a".to_string(), |e| e.to_string()),
        summary.run_dir.display()
    );
    Ok(exit::OK)
}

fn cmd_eval(a: EvalArgs) -> Result<u8, Failure> {
    let manifest = match a.manifest {
        Some(m) => m,
        None => dsdseg::trainer::Checkpoint::load(&a.checkpoint)?.config.manifest_path,
    };
    let opts = EvalOptions {
        foreground_only: !a.include_background,
        convention: match a.hd_convention {
            ConventionArg::Max => HdConvention::MaxOfDirected,
            ConventionArg::Pooled => HdConvention::Pooled,
        },
    };
    let report = evaluate(&a.checkpoint, &manifest, a.split, opts)?;
    let dir = match a.output_dir {
        Some(d) => d,
        None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    report.write(&dir)?;
    let s = &report.summary;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!("{} samples on {}", s.num_samples, a.split.as_str());
    for c in &s.per_class {
        println!(
            "class {}  dice {} ± {}  hd95 {} ± {}",
            c.class_id,
            fmt(c.dice.mean),
            fmt(c.dice.std),
            fmt(c.hd95.mean),
            fmt(c.hd95.std)
        );
    }
    println!("mean dice {}  mean hd95 {}", fmt(s.mean_dice.mean), fmt(s.mean_hd95.mean));
    println!("report written to {}", dir.display());
    Ok(exit::OK)
}

fn cmd_ablate(a: AblateArgs) -> Result<u8, Failure> {
    let cfg = build_config(&a.run)?;
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    prepare_output(&out, a.run.overwrite)?;
    let table = ablate(&cfg, &a.modes, &a.seeds, &out, &mut |r| {
        println!(
            "{} seed {}: best epoch {}, test dice {}",
            r.mode,
            r.seed,
            r.best_epoch.map_or_else(|| "n/a".to_string(), |e| e.to_string()),
            r.test_dice.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
        )
    })?;
    print!("{}", table.to_text());
    println!("results written to {}", out.display());
    Ok(exit::OK)
}

fn cmd_verify(a: VerifyArgs) -> Result<u8, Failure> {
    let start = Instant::now();
    let report = run_all(&VerifyOptions {
        smooth_eps_perturbation: a.perturb_dice_eps,
    });
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        for c in &report.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            println!("{status} {:<22} {:>7.2}s  {}", c.name, c.seconds, c.detail);
        }
        println!("{} in {:.1}s", if report.passed { "all checks passed" } else { "verification FAILED" }, start.elapsed().as_secs_f64());
    }
    if report.passed {
        return Ok(exit::OK);
    }
    let failing: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    Err(Failure {
        code: exit::INTERNAL,
        kind: "verification_failed",
        message: format!("failing checks: {}", failing.join(", ")),
    })
}

//! One pass/fail line per acceptance criterion. Lines are written straight
//! to stdout so they show up even when the harness captures output.

mod common;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use dsdseg::backbone::ArchConfig;
use dsdseg::data::Split;
use dsdseg::trainer::{
    ablate, evaluate, resume, train, Checkpoint, Coefficients, EvalOptions, OptimizerConfig, TrainConfig, CKPT_BEST,
    CKPT_LAST, LOG_FILE,
};
use dsdseg::verify::{run_all, run_check, VerifyOptions, CHECKS};
use dsdseg::AblationMode;

use common::{dataset, small_config};

/// Noise level of the desk dataset; puts the baseline near 0.8 test Dice.
const DESK_SIGMA: f64 = 0.8;
const DESK_EPOCHS: usize = 30;
const DESK_SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn emit(o: &Outcome) {
    let mut out = std::io::stdout().lock();
    let status = if o.passed { "PASS" } else { "FAIL" };
    writeln!(out, "[{status}] {}: {}", o.name, o.detail).unwrap();
    out.flush().unwrap();
}

fn note(line: &str) {
    let mut out = std::io::stdout().lock();
    writeln!(out, "        {line}").unwrap();
    out.flush().unwrap();
}

/// A verification check with a runtime ceiling.
fn timed_check(name: &'static str, check: &str, limit: Duration) -> Outcome {
    let f = CHECKS.iter().find(|(n, _)| *n == check).expect("known check").1;
    let r = run_check(check, f, &VerifyOptions::default());
    let in_time = r.seconds < limit.as_secs_f64();
    Outcome {
        name,
        passed: r.passed && in_time,
        detail: format!("{} ({:.2}s, limit {}s)", r.detail, r.seconds, limit.as_secs()),
    }
}

fn max_param_diff(a: &Path, b: &Path, skip: impl Fn(&str) -> bool) -> f64 {
    let pa = Checkpoint::load(&a.join(CKPT_LAST)).unwrap().params;
    let pb = Checkpoint::load(&b.join(CKPT_LAST)).unwrap().params;
    pa.ids()
        .filter(|id| !skip(pa.name(*id)))
        .map(|id| (pa.get(id) - pb.get(id)).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v)))
        .fold(0.0, f64::max)
}

fn reduction_identity(work: &Path) -> Outcome {
    let pure = run_check("reduction_identity", CHECKS[2].1, &VerifyOptions::default());
    let manifest = dataset(&work.join("data"), 16, 3, 0.4, [10, 1, 1]);
    let ds = small_config(&manifest, &work.join("ds"), 3, AblationMode::Ds);
    let zeroed = TrainConfig {
        coefficient_override: Some(Coefficients {
            eta: 1.0,
            alpha1: 0.0,
            alpha2: 0.0,
        }),
        ..small_config(&manifest, &work.join("zeroed"), 3, AblationMode::Dsd)
    };
    let a = train(&ds).unwrap();
    let b = train(&zeroed).unwrap();
    let worst_step = a
        .steps
        .iter()
        .zip(&b.steps)
        .map(|(x, y)| (x.loss.total - y.loss.total).abs())
        .fold(0.0, f64::max);
    // Encoder heads only exist in the zeroed run's objective; weight decay
    // moves them, so they are excluded from the parameter comparison.
    let worst_param = max_param_diff(&work.join("ds"), &work.join("zeroed"), |n| n.starts_with("head.encoder"));
    let steps = a.steps.len();
    let passed = pure.passed && steps == 10 && b.steps.len() == 10 && worst_step <= 1e-12 && worst_param <= 1e-12;
    Outcome {
        name: "reduction identity",
        passed,
        detail: format!(
            "{}; DS vs zeroed DSD over {steps} steps: max |loss diff| {worst_step:.2e}, max |param diff| {worst_param:.2e} (tol 1e-12)",
            pure.detail
        ),
    }
}

fn determinism(work: &Path) -> Outcome {
    let manifest = dataset(&work.join("data"), 16, 3, 0.4, [6, 2, 2]);
    let cfg = |name: &str, epochs| TrainConfig {
        epochs,
        ..small_config(&manifest, &work.join(name), 3, AblationMode::Dsd)
    };
    let full = train(&cfg("a", 2)).unwrap();
    train(&cfg("b", 2)).unwrap();
    let log_a = fs::read(work.join("a").join(LOG_FILE)).unwrap();
    let log_b = fs::read(work.join("b").join(LOG_FILE)).unwrap();
    let bitwise = log_a == log_b;

    train(&cfg("cut", 1)).unwrap();
    let resumed = resume(&work.join("cut"), Some(2), &mut |_| {}).unwrap();
    let second_epoch = |s: &[dsdseg::trainer::StepRecord]| s.iter().filter(|r| r.epoch == 2).map(|r| r.loss.total).collect::<Vec<_>>();
    let (ra, rb) = (second_epoch(&resumed.steps), second_epoch(&full.steps));
    let worst = ra.iter().zip(&rb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let worst_param = max_param_diff(&work.join("cut"), &work.join("a"), |_| false);
    let passed = bitwise && !ra.is_empty() && ra.len() == rb.len() && worst <= 1e-6 && worst_param <= 1e-6;
    Outcome {
        name: "determinism",
        passed,
        detail: format!(
            "log.csv bitwise identical across reruns: {bitwise}; resumed epoch ({} steps) max |loss diff| {worst:.2e}, \
             max |param diff| {worst_param:.2e} (tol 1e-6)",
            ra.len()
        ),
    }
}

fn desk_config(manifest: &Path, out: &Path, mode: AblationMode, seed: u64) -> TrainConfig {
    TrainConfig {
        arch: ArchConfig {
            num_classes: 4,
            base_channels: 4,
            ..ArchConfig::default()
        },
        ablation_mode: mode,
        optimizer: OptimizerConfig {
            learning_rate: 3e-3,
            ..OptimizerConfig::default()
        },
        epochs: DESK_EPOCHS,
        batch_size: 1,
        seed,
        manifest_path: manifest.to_path_buf(),
        output_dir: out.to_path_buf(),
        ..TrainConfig::default()
    }
}

fn desk_experiment(work: &Path) -> Outcome {
    let manifest = dataset(&work.join("data"), 32, 4, DESK_SIGMA, [20, 6, 6]);

    let base_run = desk_config(&manifest, &work.join("baseline"), AblationMode::Baseline, 0);
    train(&base_run).unwrap();
    let baseline = evaluate(&work.join("baseline").join(CKPT_BEST), &manifest, Split::Test, EvalOptions::default()).unwrap();
    let baseline_dice = baseline.summary.mean_dice.mean.unwrap_or(0.0);
    let calibrated = (0.75..=0.90).contains(&baseline_dice);
    note(&format!("baseline test Dice {baseline_dice:.4} at noise_sigma {DESK_SIGMA} (target band 0.75-0.90)"));

    let modes = [AblationMode::Ds, AblationMode::Sde, AblationMode::Sdd, AblationMode::Dsd];
    let start = Instant::now();
    let template = desk_config(&manifest, &work.join("unused"), AblationMode::Dsd, 0);
    let table = ablate(&template, &modes, &DESK_SEEDS, &work.join("ablation"), &mut |r| {
        note(&format!(
            "{} seed {}: best epoch {:?}, test Dice {:.4}",
            r.mode,
            r.seed,
            r.best_epoch,
            r.test_dice.unwrap_or(f64::NAN)
        ))
    })
    .unwrap();
    let elapsed = start.elapsed();
    for line in table.to_text().lines() {
        note(line);
    }

    let dice = |m: AblationMode| table.row(m).and_then(|r| r.test_dice.mean).unwrap_or(0.0);
    let floor_ok = table.runs.iter().all(|r| r.test_dice.is_some_and(|d| d >= 0.70));
    let (ds, sde, sdd, dsd) = (dice(AblationMode::Ds), dice(AblationMode::Sde), dice(AblationMode::Sdd), dice(AblationMode::Dsd));
    let non_inferior = dsd >= ds - 0.005;
    let in_time = elapsed < Duration::from_secs(45 * 60);
    note(&format!(
        "expected direction DSD >= DS: {}; ordering DS < SDE, SDD < DSD: {}",
        dsd >= ds,
        ds < sde && ds < sdd && sde < dsd && sdd < dsd
    ));
    Outcome {
        name: "desk-scale directional experiment",
        passed: calibrated && floor_ok && non_inferior && in_time,
        detail: format!(
            "test Dice DS {ds:.4}, SDE {sde:.4}, SDD {sdd:.4}, DSD {dsd:.4}; every run >= 0.70: {floor_ok}; \
             DSD >= DS - 0.005: {non_inferior}; baseline in band: {calibrated}; ablation time {:.1} min (limit 45)",
            elapsed.as_secs_f64() / 60.0
        ),
    }
}

fn verification_gate() -> Outcome {
    let start = Instant::now();
    let report = run_all(&VerifyOptions::default());
    let elapsed = start.elapsed();
    let failing: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let mutated = run_all(&VerifyOptions {
        smooth_eps_perturbation: 1e-3,
    });
    let discriminates = !mutated.check("loss_oracle").unwrap().passed && mutated.check("reduction_identity").unwrap().passed;
    Outcome {
        name: "verification gate",
        passed: report.passed && elapsed < Duration::from_secs(300) && discriminates,
        detail: format!(
            "{} checks in {:.1}s (limit 300s), failing: {:?}; perturbed Dice eps caught by loss_oracle while reduction_identity holds: {discriminates}",
            report.checks.len(),
            elapsed.as_secs_f64(),
            failing
        ),
    }
}

#[test]
fn acceptance() {
    let work = tempfile::tempdir().unwrap();
    note("");
    let mut outcomes = Vec::new();
    let mut record = |o: Outcome| {
        emit(&o);
        outcomes.push(o);
    };
    record(timed_check("loss oracle equivalence", "loss_oracle", Duration::from_secs(60)));
    record(timed_check("gradient correctness", "gradients", Duration::from_secs(120)));
    record(reduction_identity(&work.path().join("reduction")));
    record(timed_check("softmax temperature", "softmax_temperature", Duration::from_secs(60)));
    record(timed_check("HD95 oracle", "hd95_oracle", Duration::from_secs(60)));
    record(timed_check("normalization and shape", "stage_distributions", Duration::from_secs(60)));
    record(timed_check("inference purity", "inference_purity", Duration::from_secs(60)));
    record(desk_experiment(&work.path().join("desk")));
    record(determinism(&work.path().join("determinism")));
    record(verification_gate());

    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    note(&format!("{} of {} criteria passed", outcomes.len() - failed.len(), outcomes.len()));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

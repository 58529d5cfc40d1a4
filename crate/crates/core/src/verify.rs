//! The verification suite: every fast path against its oracle, analytic
//! gradients against finite differences, and the structural guarantees
//! of heads and backbone. Nothing here trains a model.

use std::time::Instant;

use ndarray::{Array3, Array4, Axis, Ix4, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::backbone::{ArchConfig, Phase, UShapedBackbone};
use crate::config::DsdConfig;
use crate::error::Result;
use crate::heads::{bottleneck_forward, soften, BottleneckHead, FeatureMap, UpsampleMode};
use crate::losses::{
    deep_supervision_loss, dice_ce_loss, dice_ce_loss_grad, dice_ce_var, dsd_loss, dsd_loss_var, soft_kl_loss,
    soft_kl_loss_grad, soft_kl_var, LossOptions, StageVars, TermMask,
};
use crate::metrics::{dice_score, hausdorff_percentile, hd95, HdConvention};
use crate::model::DsdModel;
use crate::oracle::{self, OracleStage};
use crate::params::ParamStore;
use crate::volume::{LabelVolume, ProbVolume, Side, StageDistribution, NORMALIZATION_TOLERANCE};

pub const ORACLE_TOLERANCE: f64 = 1e-6;
pub const ORACLE_INSTANCES: usize = 100;
pub const FD_STEP: f64 = 1e-4;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative gradient error; below it the error is
/// effectively absolute.
pub const GRADIENT_REL_FLOOR: f64 = 1e-6;
pub const REDUCTION_TOLERANCE: f64 = 1e-12;
pub const HD95_INSTANCES: usize = 200;
pub const UNIFORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VerifyOptions {
    /// Added to the Dice smoothing constant on the implementation side
    /// only. A non-zero value must make the oracle check fail.
    pub smooth_eps_perturbation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

type Check = fn(&VerifyOptions) -> Result<(bool, String)>;

pub const CHECKS: [(&str, Check); 7] = [
    ("loss_oracle", check_loss_oracle),
    ("gradients", check_gradients),
    ("reduction_identity", check_reduction_identity),
    ("softmax_temperature", check_softmax_temperature),
    ("hd95_oracle", check_hd95_oracle),
    ("stage_distributions", check_stage_distributions),
    ("inference_purity", check_inference_purity),
];

/// Runs every check; a check that errors counts as failed.
pub fn run_all(opts: &VerifyOptions) -> VerifyReport {
    let checks: Vec<CheckResult> = CHECKS.iter().map(|(name, f)| run_check(name, *f, opts)).collect();
    VerifyReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

pub fn run_check(name: &str, f: Check, opts: &VerifyOptions) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = match f(opts) {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn random_prob(k: usize, dims: [usize; 3], rng: &mut ChaCha8Rng) -> Array4<f64> {
    let logits = Array4::from_shape_fn((k, dims[0], dims[1], dims[2]), |_| rng.random_range(-2.0..2.0));
    oracle::softmax(&logits, 1.0)
}

fn random_labels(k: usize, dims: [usize; 3], rng: &mut ChaCha8Rng) -> Array3<u8> {
    Array3::from_shape_fn(dims, |_| rng.random_range(0..k) as u8)
}

fn random_stage(k: usize, dims: [usize; 3], id: usize, side: Side, rng: &mut ChaCha8Rng) -> StageDistribution {
    StageDistribution {
        hard: ProbVolume::new(random_prob(k, dims, rng)).expect("softmax output"),
        soft: ProbVolume::new(random_prob(k, dims, rng)).expect("softmax output"),
        stage_id: id,
        side,
    }
}

fn oracle_stages(stages: &[StageDistribution]) -> Vec<OracleStage> {
    stages
        .iter()
        .map(|s| OracleStage {
            hard: s.hard.data().clone(),
            soft: s.soft.data().clone(),
        })
        .collect()
}

fn random_dsd_config(rng: &mut ChaCha8Rng) -> DsdConfig {
    DsdConfig {
        eta: rng.random_range(0.0..2.0),
        alpha1: rng.random_range(0.0..2.0),
        alpha2: rng.random_range(0.0..2.0),
        tau: rng.random_range(1.0..5.0),
        kl_tau_squared: rng.random(),
        supervise_softened: rng.random(),
        ..DsdConfig::default()
    }
}

/// Random small case: K in 2..=4, every axis in 1..=4.
struct Instance {
    truth: LabelVolume,
    main: ProbVolume,
    encoder: Vec<StageDistribution>,
    decoder: Vec<StageDistribution>,
    cfg: DsdConfig,
}

fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let k = rng.random_range(2..=4);
    let dims = [rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4)];
    let z = rng.random_range(2..=3);
    let labels = random_labels(k, dims, rng);
    Instance {
        truth: LabelVolume::from_labels(&labels, k).expect("labels in range"),
        main: ProbVolume::new(random_prob(k, dims, rng)).expect("softmax output"),
        encoder: (1..=z).map(|i| random_stage(k, dims, i, Side::Encoder, rng)).collect(),
        decoder: (1..=z).map(|i| random_stage(k, dims, i, Side::Decoder, rng)).collect(),
        cfg: random_dsd_config(rng),
    }
}

fn check_loss_oracle(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0_7ac1e);
    let mut worst = [0.0f64; 4];
    for _ in 0..ORACLE_INSTANCES {
        let inst = random_instance(&mut rng);
        let cfg = inst.cfg;
        let nominal = LossOptions::from(&cfg);
        let lo = LossOptions {
            smooth_eps: nominal.smooth_eps + opts.smooth_eps_perturbation,
            ..nominal
        };
        let impl_cfg = DsdConfig {
            dice_smooth_eps: lo.smooth_eps,
            ..cfg
        };
        let (eps, floor) = (cfg.dice_smooth_eps, cfg.prob_clamp_floor);
        let t = inst.truth.data();

        let a = dice_ce_loss(&inst.main, &inst.truth, lo)?;
        let b = oracle::dice_ce(inst.main.data(), t, eps, floor);
        worst[0] = worst[0].max((a - b).abs());

        let a = soft_kl_loss(&inst.encoder[0].soft, &inst.decoder[0].soft, floor)?;
        let b = oracle::kl(inst.encoder[0].soft.data(), inst.decoder[0].soft.data(), floor);
        worst[1] = worst[1].max((a - b).abs());

        let decs: Vec<ProbVolume> = inst.decoder.iter().map(|d| d.hard.clone()).collect();
        let a = deep_supervision_loss(&inst.main, &decs, &inst.truth, cfg.eta, lo)?;
        let dec_arrays: Vec<Array4<f64>> = decs.iter().map(|d| d.data().clone()).collect();
        let b = oracle::deep_supervision(inst.main.data(), &dec_arrays, t, cfg.eta, eps, floor);
        worst[2] = worst[2].max((a - b).abs());

        let a = dsd_loss(&inst.main, &inst.encoder, &inst.decoder, &inst.truth, &impl_cfg)?.total;
        let b = oracle::dsd(inst.main.data(), &oracle_stages(&inst.encoder), &oracle_stages(&inst.decoder), t, &cfg);
        worst[3] = worst[3].max((a - b).abs());
    }
    let passed = worst.iter().all(|w| *w <= ORACLE_TOLERANCE);
    Ok((
        passed,
        format!(
            "{ORACLE_INSTANCES} instances; max |diff| dice_ce {:.2e}, soft_kl {:.2e}, deep_supervision {:.2e}, dsd {:.2e} (tol {ORACLE_TOLERANCE:.0e})",
            worst[0], worst[1], worst[2], worst[3]
        ),
    ))
}

/// Pins a closure to the higher-ranked signature the tape helpers expect.
fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    f
}

/// Analytic gradients of a scalar function of several tensors, via the tape.
fn tape_gradients<F>(inputs: &[Tensor], f: &F) -> (f64, Vec<Tensor>)
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&vars);
    let g = tape.backward(out);
    let grads = vars.iter().map(|v| g.get_or_zeros(*v)).collect();
    (out.scalar(), grads)
}

fn tape_value<F>(inputs: &[Tensor], f: &F) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    f(&vars).scalar()
}

/// Worst relative error of tape gradients against central differences.
fn fd_error<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let (_, analytic) = tape_gradients(inputs, &f);
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let flat: Vec<f64> = inputs[i].iter().copied().collect();
        let numeric = oracle::central_difference(&flat, FD_STEP, |x| {
            let mut probe = inputs.to_vec();
            probe[i] = Tensor::from_shape_vec(inputs[i].raw_dim(), x.to_vec()).expect("same shape");
            tape_value(&probe, &f)
        });
        let a: Vec<f64> = analytic[i].iter().copied().collect();
        worst = worst.max(oracle::max_relative_error(&a, &numeric, GRADIENT_REL_FLOOR));
    }
    worst
}

fn batched(a: &Array4<f64>) -> Tensor {
    a.clone().insert_axis(Axis(0)).into_dyn()
}

fn check_gradients(_opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9_4ad);
    let (k, dims) = (3, [2, 2, 2]);
    let cfg = DsdConfig {
        detach_teacher: false,
        kl_tau_squared: true,
        ..random_dsd_config(&mut rng)
    };
    let opts = LossOptions::from(&cfg);
    let floor = cfg.prob_clamp_floor;
    let truth_labels = random_labels(k, dims, &mut rng);
    let truth = LabelVolume::from_labels(&truth_labels, k)?;
    let tb = batched(truth.data());
    let mut errors: Vec<(&str, f64)> = Vec::new();

    // Pure-API gradients against the tape and against finite differences.
    let pred = ProbVolume::new(random_prob(k, dims, &mut rng))?;
    let (_, g_pure) = dice_ce_loss_grad(&pred, &truth, opts)?;
    let dice_f = scalar_fn(|v| dice_ce_var(v[0], &tb, opts));
    let inputs = [batched(pred.data())];
    let numeric = oracle::central_difference(&inputs[0].iter().copied().collect::<Vec<_>>(), FD_STEP, |x| {
        tape_value(&[Tensor::from_shape_vec(inputs[0].raw_dim(), x.to_vec()).expect("shape")], &dice_f)
    });
    let pure: Vec<f64> = g_pure.iter().copied().collect();
    errors.push(("dice_ce", oracle::max_relative_error(&pure, &numeric, GRADIENT_REL_FLOOR).max(fd_error(&inputs, dice_f))));

    let (s, t) = (
        ProbVolume::new(random_prob(k, dims, &mut rng))?,
        ProbVolume::new(random_prob(k, dims, &mut rng))?,
    );
    let (_, gs, gt) = soft_kl_loss_grad(&s, &t, floor)?;
    let kl_f = scalar_fn(move |v| soft_kl_var(v[0], v[1], floor));
    let inputs = [batched(s.data()), batched(t.data())];
    let mut kl_err = fd_error(&inputs, kl_f);
    for (i, g) in [gs, gt].iter().enumerate() {
        let numeric = oracle::central_difference(&inputs[i].iter().copied().collect::<Vec<_>>(), FD_STEP, |x| {
            let mut probe = inputs.to_vec();
            probe[i] = Tensor::from_shape_vec(inputs[i].raw_dim(), x.to_vec()).expect("shape");
            tape_value(&probe, &kl_f)
        });
        let a: Vec<f64> = g.iter().copied().collect();
        kl_err = kl_err.max(oracle::max_relative_error(&a, &numeric, GRADIENT_REL_FLOOR));
    }
    errors.push(("soft_kl", kl_err));

    // Deep supervision: main + 3 decoder outputs.
    let ds_inputs: Vec<Tensor> = (0..4).map(|_| batched(&random_prob(k, dims, &mut rng))).collect();
    let ds_cfg = cfg;
    let ds_mask = TermMask {
        deep_supervision: true,
        encoder_kl: false,
        decoder_kl: false,
    };
    errors.push((
        "deep_supervision",
        fd_error(&ds_inputs, |v| {
            let dec: Vec<StageVars<'_>> = v[1..].iter().map(|&d| StageVars { hard: d, soft: d }).collect();
            dsd_loss_var(v[0], &[], &dec, &tb, &ds_cfg, ds_mask).expect("valid").total
        }),
    ));

    // Full objective: main, then (hard, soft) for 3 encoder and 3 decoder stages.
    let z = 3;
    let dsd_inputs: Vec<Tensor> = (0..1 + 4 * z).map(|_| batched(&random_prob(k, dims, &mut rng))).collect();
    errors.push((
        "dsd",
        fd_error(&dsd_inputs, |v| {
            let stage = |i: usize| StageVars {
                hard: v[1 + 2 * i],
                soft: v[2 + 2 * i],
            };
            let enc: Vec<_> = (0..z).map(stage).collect();
            let dec: Vec<_> = (z..2 * z).map(stage).collect();
            dsd_loss_var(v[0], &enc, &dec, &tb, &cfg, TermMask::ALL).expect("valid").total
        }),
    ));

    for mode in [UpsampleMode::LearnedDeconv, UpsampleMode::Trilinear] {
        let name = match mode {
            UpsampleMode::LearnedDeconv => "head_deconv",
            UpsampleMode::Trilinear => "head_trilinear",
        };
        errors.push((name, head_gradient_error(mode, &cfg, &truth, &mut rng)?));
    }
    let passed = errors.iter().all(|(_, e)| *e < GRADIENT_TOLERANCE);
    let detail = errors.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect::<Vec<_>>().join(", ");
    Ok((passed, format!("max relative error (h={FD_STEP:.0e}, tol {GRADIENT_TOLERANCE:.0e}): {detail}")))
}

/// Gradient check of one head w.r.t. its parameters and input features,
/// through `dice_ce(hard) + KL(soft ‖ fixed teacher)`.
fn head_gradient_error(mode: UpsampleMode, cfg: &DsdConfig, truth: &LabelVolume, rng: &mut ChaCha8Rng) -> Result<f64> {
    let k = truth.num_classes();
    let mut store = ParamStore::new();
    let head = BottleneckHead::new(&mut store, rng, Side::Encoder, 2, 4, k, [2, 2, 2], mode);
    // Move away from the initialization so every parameter matters.
    for id in store.ids() {
        store.get_mut(id).mapv_inplace(|v| v + rng.random_range(-0.5..0.5));
    }
    let feature = Tensor::from_shape_fn(IxDyn(&[1, 4, 1, 1, 1]), |_| rng.random_range(-1.0..1.0));
    let teacher = batched(&random_prob(k, [2, 2, 2], rng));
    let tb = batched(truth.data());
    let opts = LossOptions::from(cfg);
    let tau = cfg.tau;
    let objective = |tape: &Tape, store: &ParamStore, x: Tensor, trainable: bool| -> (f64, Vec<Tensor>) {
        let params = store.bind(tape, trainable);
        let xv = if trainable { tape.leaf(x) } else { tape.constant(x) };
        let out = head.forward(xv, &params, tau);
        let loss = dice_ce_var(out.hard, &tb, opts).add(&soft_kl_var(out.soft, tape.constant(teacher.clone()), cfg.prob_clamp_floor));
        if !trainable {
            return (loss.scalar(), Vec::new());
        }
        let g = tape.backward(loss);
        let mut grads: Vec<Tensor> = params.gradients(&g).into_iter().map(|g| g.expect("reached")).collect();
        grads.push(g.get_or_zeros(xv));
        (loss.scalar(), grads)
    };
    let (_, analytic) = objective(&Tape::new(), &store, feature.clone(), true);
    let mut worst = 0.0f64;
    for (i, id) in store.ids().enumerate() {
        let base: Vec<f64> = store.get(id).iter().copied().collect();
        let numeric = oracle::central_difference(&base, FD_STEP, |x| {
            let mut s = store.clone();
            *s.get_mut(id) = Tensor::from_shape_vec(store.get(id).raw_dim(), x.to_vec()).expect("shape");
            objective(&Tape::new(), &s, feature.clone(), false).0
        });
        let a: Vec<f64> = analytic[i].iter().copied().collect();
        worst = worst.max(oracle::max_relative_error(&a, &numeric, GRADIENT_REL_FLOOR));
    }
    let base: Vec<f64> = feature.iter().copied().collect();
    let numeric = oracle::central_difference(&base, FD_STEP, |x| {
        let f = Tensor::from_shape_vec(feature.raw_dim(), x.to_vec()).expect("shape");
        objective(&Tape::new(), &store, f, false).0
    });
    let a: Vec<f64> = analytic[store.len()].iter().copied().collect();
    Ok(worst.max(oracle::max_relative_error(&a, &numeric, GRADIENT_REL_FLOOR)))
}

fn check_reduction_identity(opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x2ed);
    let mut worst = 0.0f64;
    for _ in 0..ORACLE_INSTANCES {
        let inst = random_instance(&mut rng);
        let cfg = DsdConfig {
            alpha1: 0.0,
            alpha2: 0.0,
            dice_smooth_eps: inst.cfg.dice_smooth_eps + opts.smooth_eps_perturbation,
            ..inst.cfg
        };
        let supervised: Vec<ProbVolume> = inst
            .decoder
            .iter()
            .map(|d| if cfg.supervise_softened { d.soft.clone() } else { d.hard.clone() })
            .collect();
        let a = dsd_loss(&inst.main, &inst.encoder, &inst.decoder, &inst.truth, &cfg)?.total;
        let b = deep_supervision_loss(&inst.main, &supervised, &inst.truth, cfg.eta, LossOptions::from(&cfg))?;
        worst = worst.max((a - b).abs());
    }
    Ok((
        worst <= REDUCTION_TOLERANCE,
        format!("{ORACLE_INSTANCES} instances with alpha1 = alpha2 = 0; max |dsd - ds| = {worst:.2e} (tol {REDUCTION_TOLERANCE:.0e})"),
    ))
}

fn check_softmax_temperature(_opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x50f7);
    let mut exact = true;
    let mut argmax_stable = true;
    let mut worst_uniform = 0.0f64;
    for _ in 0..20 {
        let k = rng.random_range(2..=5);
        let logits = Array4::from_shape_fn((k, 4, 4, 4), |_| rng.random_range(-5.0..5.0));
        let p1 = soften(&logits, 1.0)?;
        exact &= p1.data() == oracle::softmax(&logits, 1.0);
        let tape = Tape::new();
        let recorded = tape.constant(batched(&logits)).softmax_channels(1.0);
        exact &= recorded.value().index_axis(Axis(0), 0) == p1.data().view().into_dyn();
        let reference = p1.argmax();
        for tau in [2.0, 3.0, 10.0] {
            argmax_stable &= soften(&logits, tau)?.argmax() == reference;
        }
        let flat = soften(&logits, 1e6)?;
        let u = 1.0 / k as f64;
        worst_uniform = flat.data().iter().fold(worst_uniform, |m, p| m.max((p - u).abs()));
    }
    let passed = exact && argmax_stable && worst_uniform <= UNIFORM_TOLERANCE;
    Ok((
        passed,
        format!(
            "tau=1 bitwise equal to plain softmax: {exact}; argmax stable over tau in {{1,2,3,10}}: {argmax_stable}; \
             tau=1e6 max |p - 1/K| = {worst_uniform:.2e} (tol {UNIFORM_TOLERANCE:.0e})"
        ),
    ))
}

fn random_mask(rng: &mut ChaCha8Rng) -> Array3<bool> {
    let density = rng.random_range(0.02..0.6);
    Array3::from_shape_fn((8, 8, 8), |_| rng.random_bool(density))
}

fn check_hd95_oracle(_opts: &VerifyOptions) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4d95);
    let (mut mismatches, mut scale_failures, mut other_failures) = (0, 0, 0);
    for i in 0..HD95_INSTANCES {
        let (a, b) = (random_mask(&mut rng), random_mask(&mut rng));
        let spacing = if i % 2 == 0 {
            [1.0; 3]
        } else {
            [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.5..3.0)]
        };
        let fast = hd95(a.view(), b.view(), spacing)?;
        if fast != oracle::hd95_brute_force(&a, &b, spacing) {
            mismatches += 1;
        }
        let doubled = hd95(a.view(), b.view(), spacing.map(|s| 2.0 * s))?;
        if doubled != fast.map(|v| 2.0 * v) {
            scale_failures += 1;
        }
        let symmetric = hd95(b.view(), a.view(), spacing)? == fast;
        let full = hausdorff_percentile(a.view(), b.view(), spacing, HdConvention::MaxOfDirected, 100.0)?;
        let bounded = match (fast, full) {
            (Some(p95), Some(max)) => p95 <= max && Some(max) == oracle::hausdorff_brute_force(&a, &b, spacing),
            (None, None) => true,
            _ => false,
        };
        let dice_ok = dice_score(a.view(), b.view())? == oracle::dice_count(&a, &b);
        if !(symmetric && bounded && dice_ok) {
            other_failures += 1;
        }
    }
    let passed = mismatches == 0 && scale_failures == 0 && other_failures == 0;
    Ok((
        passed,
        format!(
            "{HD95_INSTANCES} random 8^3 pairs: {mismatches} mismatches vs brute force, \
             {scale_failures} spacing-doubling failures, {other_failures} symmetry/bound/Dice failures"
        ),
    ))
}

fn check_stage_distributions(_opts: &VerifyOptions) -> Result<(bool, String)> {
    let arch = ArchConfig {
        num_stages: 3,
        num_classes: 3,
        base_channels: 4,
        ..ArchConfig::default()
    };
    let model = DsdModel::new(arch, 3, true)?;
    let heads = model.heads.as_ref().expect("model built with heads");
    let mut rng = ChaCha8Rng::seed_from_u64(0x16);
    let x = Tensor::from_shape_fn(IxDyn(&[1, 1, 16, 16, 16]), |_| rng.random_range(-1.0..1.0));
    let tape = Tape::new();
    let params = model.store.bind(&tape, false);
    let taps = model.net.forward_with_taps(tape.constant(x), &params, Phase::Train)?;
    taps.validate([16, 16, 16], 3)?;
    let mut checked = 0;
    let mut worst = 0.0f64;
    let mut shapes_ok = true;
    for (side, list, hs) in [
        (Side::Encoder, &taps.encoder_taps, &heads.encoder),
        (Side::Decoder, &taps.decoder_taps, &heads.decoder),
    ] {
        for (i, (tap, head)) in list.iter().zip(hs).enumerate() {
            let data = tap.value().index_axis(Axis(0), 0).to_owned().into_dimensionality::<Ix4>().expect("4-d tap");
            let fm = FeatureMap::new(data, i + 1, side)?;
            let dist = bottleneck_forward(head, &model.store, &fm, [16, 16, 16], 3.0)?;
            for p in [&dist.hard, &dist.soft] {
                shapes_ok &= p.shape() == [3, 16, 16, 16];
                let sums = p.data().sum_axis(Axis(0));
                worst = sums.iter().fold(worst, |m, s| m.max((s - 1.0).abs()));
            }
            checked += 1;
        }
    }
    let passed = checked == 6 && shapes_ok && worst <= NORMALIZATION_TOLERANCE;
    Ok((
        passed,
        format!(
            "{checked} heads on a Z=3 backbone, 16^3 input: shapes (K,16,16,16) {shapes_ok}, \
             max |sum - 1| = {worst:.2e} (tol {NORMALIZATION_TOLERANCE:.0e})"
        ),
    ))
}

fn check_inference_purity(_opts: &VerifyOptions) -> Result<(bool, String)> {
    let model = DsdModel::new(ArchConfig { base_channels: 4, ..ArchConfig::default() }, 5, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x1f);
    let x = Tensor::from_shape_fn(IxDyn(&[1, 1, 16, 16, 16]), |_| rng.random_range(-1.0..1.0));
    let inference = model.logits(x.clone())?;
    let calls_after_inference = model.head_calls();
    let tape = Tape::new();
    let params = model.store.bind(&tape, false);
    let taps = model.net.forward_with_taps(tape.constant(x), &params, Phase::Train)?;
    let heads = model.heads.as_ref().expect("model built with heads");
    heads.forward_decoder(&taps.decoder_taps, &params, 3.0);
    let identical = *taps.main_logits.value() == inference;
    let calls_after_training = model.head_calls();
    let passed = calls_after_inference == 0 && identical && calls_after_training == 3;
    Ok((
        passed,
        format!(
            "head evaluations during inference: {calls_after_inference}; logits bitwise equal to training path: {identical}"
        ),
    ))
}

//! Dice cross-entropy, temperature-softened KL, deep supervision and the
//! combined dual self-distillation objective.
//!
//! Every loss is available twice: as a pure function over validated
//! [`ProbVolume`]s, and as a recorded operation on a [`Tape`](crate::autograd::Tape)
//! over batched `(B, K, H, W, D)` variables. Both share the same slice
//! kernels below, so the analytic gradients used in training are the ones
//! exercised by the finite-difference checks.

use ndarray::{Array4, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{scalar_tensor, split5, Tensor, Var};
use crate::config::DsdConfig;
use crate::error::{Error, Result};
use crate::volume::{ensure_same_shape, voxel_count, LabelVolume, ProbVolume, StageDistribution};

/// Numerical guards shared by the losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub smooth_eps: f64,
    pub prob_clamp_floor: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        let cfg = DsdConfig::default();
        Self::from(&cfg)
    }
}

impl LossOptions {
    pub fn with_smooth_eps(smooth_eps: f64) -> Self {
        Self {
            smooth_eps,
            ..Self::default()
        }
    }
}

impl From<&DsdConfig> for LossOptions {
    fn from(cfg: &DsdConfig) -> Self {
        Self {
            smooth_eps: cfg.dice_smooth_eps,
            prob_clamp_floor: cfg.prob_clamp_floor,
        }
    }
}

/// Dice + cross-entropy of one sample laid out as `k` channels of `n`
/// voxels. When `grad` is given, `scale · ∂L/∂pred` is written into it.
fn dice_ce_kernel(
    pred: &[f64],
    truth: &[f64],
    k: usize,
    n: usize,
    opts: LossOptions,
    grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let eps = opts.smooth_eps;
    let floor = opts.prob_clamp_floor;
    let mut dice_sum = 0.0;
    let mut ce = 0.0;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let y = &pred[c * n..(c + 1) * n];
        let g = &truth[c * n..(c + 1) * n];
        let mut inter = 0.0;
        let mut gg = 0.0;
        let mut yy = 0.0;
        for (&yv, &gv) in y.iter().zip(g) {
            inter += gv * yv;
            gg += gv * gv;
            yy += yv * yv;
            if gv != 0.0 {
                ce += gv * yv.max(floor).ln();
            }
        }
        let num = 2.0 * inter + eps;
        let den = gg + yy + eps;
        dice_sum += num / den;
        per_class.push((num, den));
    }
    let loss = (1.0 - dice_sum / k as f64) - ce / n as f64;
    if let Some((out, scale)) = grad {
        let kf = k as f64;
        let nf = n as f64;
        for (c, &(num, den)) in per_class.iter().enumerate() {
            for p in c * n..(c + 1) * n {
                let (yv, gv) = (pred[p], truth[p]);
                let d_dice = -(2.0 * gv / den - num * 2.0 * yv / (den * den)) / kf;
                let d_ce = if gv != 0.0 && yv > floor { -gv / (nf * yv) } else { 0.0 };
                out[p] = scale * (d_dice + d_ce);
            }
        }
    }
    loss
}

/// KL(teacher ‖ student) averaged over voxels and summed over classes.
/// Writes `scale ·` gradients w.r.t. student and teacher when requested.
fn kl_kernel(
    student: &[f64],
    teacher: &[f64],
    n: usize,
    floor: f64,
    grad_student: Option<(&mut [f64], f64)>,
    grad_teacher: Option<(&mut [f64], f64)>,
) -> f64 {
    let mut total = 0.0;
    for (&s, &t) in student.iter().zip(teacher) {
        if t != 0.0 {
            total += t * (t.max(floor).ln() - s.max(floor).ln());
        }
    }
    let nf = n as f64;
    if let Some((gs, scale)) = grad_student {
        for ((o, &s), &t) in gs.iter_mut().zip(student).zip(teacher) {
            *o = if s > floor { -scale * t / (nf * s) } else { 0.0 };
        }
    }
    if let Some((gt, scale)) = grad_teacher {
        for ((o, &s), &t) in gt.iter_mut().zip(student).zip(teacher) {
            let step = if t > floor { 1.0 } else { 0.0 };
            *o = scale * (t.max(floor).ln() - s.max(floor).ln() + step) / nf;
        }
    }
    total / nf
}

fn standard(a: &Array4<f64>) -> std::borrow::Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

fn check_pair(pred: &[usize], truth: &[usize]) -> Result<()> {
    ensure_same_shape(truth, pred)
}

/// Dice cross-entropy of a probability field against one-hot truth.
pub fn dice_ce_loss(pred: &ProbVolume, truth: &LabelVolume, opts: LossOptions) -> Result<f64> {
    check_pair(pred.data().shape(), truth.data().shape())?;
    let k = pred.num_classes();
    let n = voxel_count(pred.data().shape());
    Ok(dice_ce_kernel(&standard(pred.data()), &standard(truth.data()), k, n, opts, None))
}

/// [`dice_ce_loss`] together with its gradient w.r.t. `pred`.
pub fn dice_ce_loss_grad(
    pred: &ProbVolume,
    truth: &LabelVolume,
    opts: LossOptions,
) -> Result<(f64, Array4<f64>)> {
    check_pair(pred.data().shape(), truth.data().shape())?;
    let k = pred.num_classes();
    let n = voxel_count(pred.data().shape());
    let mut g = vec![0.0; k * n];
    let loss = dice_ce_kernel(
        &standard(pred.data()),
        &standard(truth.data()),
        k,
        n,
        opts,
        Some((&mut g, 1.0)),
    );
    let g = Array4::from_shape_vec(pred.data().raw_dim(), g).expect("gradient shape");
    Ok((loss, g))
}

/// Pixel-averaged KL divergence with the teacher outside the log ratio.
pub fn soft_kl_loss(student: &ProbVolume, teacher: &ProbVolume, prob_clamp_floor: f64) -> Result<f64> {
    ensure_same_shape(teacher.data().shape(), student.data().shape())?;
    let n = voxel_count(student.data().shape());
    Ok(kl_kernel(
        &standard(student.data()),
        &standard(teacher.data()),
        n,
        prob_clamp_floor,
        None,
        None,
    ))
}

/// [`soft_kl_loss`] with gradients w.r.t. student and teacher.
pub fn soft_kl_loss_grad(
    student: &ProbVolume,
    teacher: &ProbVolume,
    prob_clamp_floor: f64,
) -> Result<(f64, Array4<f64>, Array4<f64>)> {
    ensure_same_shape(teacher.data().shape(), student.data().shape())?;
    let n = voxel_count(student.data().shape());
    let len = student.data().len();
    let (mut gs, mut gt) = (vec![0.0; len], vec![0.0; len]);
    let loss = kl_kernel(
        &standard(student.data()),
        &standard(teacher.data()),
        n,
        prob_clamp_floor,
        Some((&mut gs, 1.0)),
        Some((&mut gt, 1.0)),
    );
    let dim = student.data().raw_dim();
    Ok((
        loss,
        Array4::from_shape_vec(dim, gs).expect("gradient shape"),
        Array4::from_shape_vec(dim, gt).expect("gradient shape"),
    ))
}

/// `(L(main), Σ L(D_i))` with the sum taken in list order.
fn supervision_parts(
    main_pred: &ProbVolume,
    decoder_preds: &[&ProbVolume],
    truth: &LabelVolume,
    eta: f64,
    opts: LossOptions,
) -> Result<(f64, f64)> {
    if decoder_preds.is_empty() && eta != 0.0 {
        return Err(Error::contract("deep supervision with eta != 0 needs at least one decoder output"));
    }
    let main = dice_ce_loss(main_pred, truth, opts)?;
    let mut sum = 0.0;
    for d in decoder_preds {
        ensure_same_shape(main_pred.data().shape(), d.data().shape())?;
        sum += dice_ce_loss(d, truth, opts)?;
    }
    Ok((main, sum))
}

/// Main-output loss plus `eta`-weighted losses of every decoder output.
pub fn deep_supervision_loss(
    main_pred: &ProbVolume,
    decoder_preds: &[ProbVolume],
    truth: &LabelVolume,
    eta: f64,
    opts: LossOptions,
) -> Result<f64> {
    let refs: Vec<&ProbVolume> = decoder_preds.iter().collect();
    let (main, sum) = supervision_parts(main_pred, &refs, truth, eta, opts)?;
    Ok(main + eta * sum)
}

/// Weighted contribution of each term to the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Dice-CE of the main output.
    pub main: f64,
    /// `eta · Σ` decoder Dice-CE.
    pub deep_supervision: f64,
    /// `alpha1 · Σ` encoder KL.
    pub kl_encoder: f64,
    /// `alpha2 · Σ` decoder KL.
    pub kl_decoder: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.main, self.deep_supervision, self.kl_encoder, self.kl_decoder, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_stage_lists(encoder: &[StageDistribution], decoder: &[StageDistribution]) -> Result<()> {
    if encoder.len() != decoder.len() {
        return Err(Error::contract(format!(
            "expected as many encoder as decoder stages, got {} and {}",
            encoder.len(),
            decoder.len()
        )));
    }
    if encoder.len() < 2 {
        return Err(Error::contract("dual self-distillation needs at least 2 stages per side"));
    }
    Ok(())
}

/// Full dual self-distillation objective.
///
/// `encoder` is ordered shallow → deep, so its last entry is the encoder
/// teacher. `decoder` is ordered deep → shallow, so its first entry is the
/// decoder teacher. Deep supervision reads each decoder's `hard` field (or
/// `soft` when `cfg.supervise_softened`); KL terms read `soft` fields.
pub fn dsd_loss(
    main_pred: &ProbVolume,
    encoder: &[StageDistribution],
    decoder: &[StageDistribution],
    truth: &LabelVolume,
    cfg: &DsdConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    check_stage_lists(encoder, decoder)?;
    let opts = LossOptions::from(cfg);
    let supervised: Vec<&ProbVolume> = decoder
        .iter()
        .map(|d| if cfg.supervise_softened { &d.soft } else { &d.hard })
        .collect();
    let (main, ds_sum) = supervision_parts(main_pred, &supervised, truth, cfg.eta, opts)?;
    let supervision_total = main + cfg.eta * ds_sum;

    let enc_teacher = &encoder[encoder.len() - 1].soft;
    let mut kl_enc = 0.0;
    for e in &encoder[..encoder.len() - 1] {
        kl_enc += soft_kl_loss(&e.soft, enc_teacher, cfg.prob_clamp_floor)?;
    }
    let dec_teacher = &decoder[0].soft;
    let mut kl_dec = 0.0;
    for d in &decoder[1..] {
        kl_dec += soft_kl_loss(&d.soft, dec_teacher, cfg.prob_clamp_floor)?;
    }
    let (w1, w2) = cfg.kl_weights();
    let kl_encoder = w1 * kl_enc;
    let kl_decoder = w2 * kl_dec;
    Ok(LossBreakdown {
        main,
        deep_supervision: cfg.eta * ds_sum,
        kl_encoder,
        kl_decoder,
        total: supervision_total + kl_encoder + kl_decoder,
    })
}

// ---------------------------------------------------------------------------
// Recorded (differentiable) forms over batched variables.
// ---------------------------------------------------------------------------

/// Batch-mean Dice-CE of `pred: (B, K, H, W, D)` against constant one-hot
/// `truth` of the same shape.
pub fn dice_ce_var<'t>(pred: Var<'t>, truth: &Tensor, opts: LossOptions) -> Var<'t> {
    let pv = pred.value();
    assert_eq!(pv.shape(), truth.shape(), "dice_ce_var: shape mismatch");
    let (b, k, dims) = split5(pv.shape());
    let n: usize = dims.iter().product();
    let p = pv.as_slice().expect("standard layout");
    let t = truth.as_slice().expect("standard layout");
    let want_grad = pred.requires_grad();
    let mut grad = if want_grad { vec![0.0; p.len()] } else { Vec::new() };
    let mut total = 0.0;
    for s in 0..b {
        let r = s * k * n..(s + 1) * k * n;
        let g = want_grad.then(|| (&mut grad[r.clone()], 1.0 / b as f64));
        total += dice_ce_kernel(&p[r.clone()], &t[r], k, n, opts, g);
    }
    let shape = pv.shape().to_vec();
    pred.tape().record(scalar_tensor(total / b as f64), &[pred], move |g, _| {
        let scale = g[IxDyn(&[])];
        let data = grad.iter().map(|v| v * scale).collect();
        vec![Some(Tensor::from_shape_vec(IxDyn(&shape), data).expect("grad shape"))]
    })
}

/// Batch-mean KL(teacher ‖ student). Detach `teacher` beforehand to stop
/// gradients into it.
pub fn soft_kl_var<'t>(student: Var<'t>, teacher: Var<'t>, prob_clamp_floor: f64) -> Var<'t> {
    let sv = student.value();
    let tv = teacher.value();
    assert_eq!(sv.shape(), tv.shape(), "soft_kl_var: shape mismatch");
    let (b, k, dims) = split5(sv.shape());
    let n: usize = dims.iter().product();
    let s_data = sv.as_slice().expect("standard layout");
    let t_data = tv.as_slice().expect("standard layout");
    let (want_s, want_t) = (student.requires_grad(), teacher.requires_grad());
    let mut gs = if want_s { vec![0.0; s_data.len()] } else { Vec::new() };
    let mut gt = if want_t { vec![0.0; t_data.len()] } else { Vec::new() };
    let inv_b = 1.0 / b as f64;
    let mut total = 0.0;
    for s in 0..b {
        let r = s * k * n..(s + 1) * k * n;
        total += kl_kernel(
            &s_data[r.clone()],
            &t_data[r.clone()],
            n,
            prob_clamp_floor,
            want_s.then(|| (&mut gs[r.clone()], inv_b)),
            want_t.then(|| (&mut gt[r.clone()], inv_b)),
        );
    }
    let shape = sv.shape().to_vec();
    student
        .tape()
        .record(scalar_tensor(total * inv_b), &[student, teacher], move |g, need| {
            let scale = g[IxDyn(&[])];
            let make = |v: &Vec<f64>| {
                Tensor::from_shape_vec(IxDyn(&shape), v.iter().map(|x| x * scale).collect())
                    .expect("grad shape")
            };
            vec![
                (need[0] && !gs.is_empty()).then(|| make(&gs)),
                (need[1] && !gt.is_empty()).then(|| make(&gt)),
            ]
        })
}

/// A head's two distributions as recorded variables.
#[derive(Debug, Clone, Copy)]
pub struct StageVars<'t> {
    pub hard: Var<'t>,
    pub soft: Var<'t>,
}

/// Which auxiliary terms are evaluated. Terms that are not evaluated are
/// left out of the sum entirely; evaluated terms are always weighted by
/// their coefficient, even when it is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermMask {
    pub deep_supervision: bool,
    pub encoder_kl: bool,
    pub decoder_kl: bool,
}

impl TermMask {
    pub const ALL: TermMask = TermMask {
        deep_supervision: true,
        encoder_kl: true,
        decoder_kl: true,
    };
}

/// Recorded loss terms; `total` is the variable to differentiate.
pub struct DsdVars<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
}

/// Recorded form of [`dsd_loss`] with the same composition order.
pub fn dsd_loss_var<'t>(
    main_pred: Var<'t>,
    encoder: &[StageVars<'t>],
    decoder: &[StageVars<'t>],
    truth: &Tensor,
    cfg: &DsdConfig,
    mask: TermMask,
) -> Result<DsdVars<'t>> {
    let opts = LossOptions::from(cfg);
    let (w1, w2) = cfg.kl_weights();
    let main = dice_ce_var(main_pred, truth, opts);
    let mut breakdown = LossBreakdown {
        main: main.scalar(),
        ..Default::default()
    };
    let mut total = main;

    if mask.deep_supervision {
        if decoder.is_empty() && cfg.eta != 0.0 {
            return Err(Error::contract("deep supervision with eta != 0 needs decoder heads"));
        }
        let mut sum: Option<Var<'t>> = None;
        for d in decoder {
            let src = if cfg.supervise_softened { d.soft } else { d.hard };
            let term = dice_ce_var(src, truth, opts);
            sum = Some(match sum {
                Some(acc) => acc.add(&term),
                None => term,
            });
        }
        if let Some(sum) = sum {
            let weighted = sum.scale(cfg.eta);
            breakdown.deep_supervision = weighted.scalar();
            total = total.add(&weighted);
        }
    }
    let teacher = |v: Var<'t>| if cfg.detach_teacher { v.detach() } else { v };
    if mask.encoder_kl {
        if encoder.len() < 2 {
            return Err(Error::contract("encoder distillation needs at least 2 encoder heads"));
        }
        let t = teacher(encoder[encoder.len() - 1].soft);
        let weighted = kl_sum(&encoder[..encoder.len() - 1], t, cfg.prob_clamp_floor).scale(w1);
        breakdown.kl_encoder = weighted.scalar();
        total = total.add(&weighted);
    }
    if mask.decoder_kl {
        if decoder.len() < 2 {
            return Err(Error::contract("decoder distillation needs at least 2 decoder heads"));
        }
        let t = teacher(decoder[0].soft);
        let weighted = kl_sum(&decoder[1..], t, cfg.prob_clamp_floor).scale(w2);
        breakdown.kl_decoder = weighted.scalar();
        total = total.add(&weighted);
    }
    breakdown.total = total.scalar();
    Ok(DsdVars { total, breakdown })
}

fn kl_sum<'t>(students: &[StageVars<'t>], teacher: Var<'t>, floor: f64) -> Var<'t> {
    let mut acc: Option<Var<'t>> = None;
    for s in students {
        let term = soft_kl_var(s.soft, teacher, floor);
        acc = Some(match acc {
            Some(a) => a.add(&term),
            None => term,
        });
    }
    acc.expect("non-empty student list")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Side;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prob(values: &[f64], k: usize) -> ProbVolume {
        let n = values.len() / k;
        ProbVolume::new(Array4::from_shape_vec((k, n, 1, 1), values.to_vec()).unwrap()).unwrap()
    }

    fn random_prob(k: usize, dims: (usize, usize, usize), rng: &mut ChaCha8Rng) -> ProbVolume {
        let mut a = Array4::from_shape_fn((k, dims.0, dims.1, dims.2), |_| rng.random_range(0.05..1.0));
        let sums = a.sum_axis(ndarray::Axis(0));
        for mut lane in a.axis_iter_mut(ndarray::Axis(0)) {
            lane /= &sums;
        }
        ProbVolume::new(a).unwrap()
    }

    fn random_truth(k: usize, dims: (usize, usize, usize), rng: &mut ChaCha8Rng) -> LabelVolume {
        let labels = Array3::from_shape_fn(dims, |_| rng.random_range(0..k as u8));
        LabelVolume::from_labels(&labels, k).unwrap()
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let truth = random_truth(3, (2, 2, 2), &mut rng);
        let pred = ProbVolume::new(truth.data().clone()).unwrap();
        let l = dice_ce_loss(&pred, &truth, LossOptions::with_smooth_eps(0.0)).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn hand_evaluated_dice_ce() {
        let truth = LabelVolume::new(Array4::from_shape_vec((2, 1, 1, 1), vec![1.0, 0.0]).unwrap()).unwrap();
        let pred = prob(&[0.5, 0.5], 2);
        let l = dice_ce_loss(&pred, &truth, LossOptions::with_smooth_eps(0.0)).unwrap();
        assert_abs_diff_eq!(l, 0.6 + std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(l, 1.293147, epsilon = 1e-6);
    }

    #[test]
    fn hand_evaluated_kl() {
        let teacher = prob(&[0.25, 0.75], 2);
        let student = prob(&[0.5, 0.5], 2);
        let l = soft_kl_loss(&student, &teacher, 1e-7).unwrap();
        assert_abs_diff_eq!(l, 0.25 * 0.5f64.ln() + 0.75 * 1.5f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 0.130812, epsilon = 1e-6);
        assert_eq!(soft_kl_loss(&student, &student, 1e-7).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = random_truth(2, (2, 2, 2), &mut rng);
        let pred = random_prob(2, (2, 2, 1), &mut rng);
        assert!(matches!(
            dice_ce_loss(&pred, &truth, LossOptions::default()),
            Err(Error::ShapeMismatch { .. })
        ));
        let other = random_prob(2, (2, 2, 2), &mut rng);
        assert!(soft_kl_loss(&pred, &other, 1e-7).is_err());
    }

    #[test]
    fn zero_probabilities_are_clamped() {
        let truth = LabelVolume::new(Array4::from_shape_vec((2, 1, 1, 1), vec![1.0, 0.0]).unwrap()).unwrap();
        let pred = prob(&[0.0, 1.0], 2);
        let l = dice_ce_loss(&pred, &truth, LossOptions::default()).unwrap();
        assert!(l.is_finite());
        let teacher = prob(&[0.5, 0.5], 2);
        assert!(soft_kl_loss(&pred, &teacher, 1e-7).unwrap().is_finite());
    }

    #[test]
    fn deep_supervision_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth = random_truth(3, (2, 2, 2), &mut rng);
        let main = random_prob(3, (2, 2, 2), &mut rng);
        let opts = LossOptions::default();
        let single = dice_ce_loss(&main, &truth, opts).unwrap();
        let both = deep_supervision_loss(&main, &[main.clone(), main.clone()], &truth, 1.0, opts).unwrap();
        assert_eq!(both, 3.0 * single);
        let zero = deep_supervision_loss(&main, std::slice::from_ref(&main), &truth, 0.0, opts).unwrap();
        assert_eq!(zero, single);
        assert_eq!(deep_supervision_loss(&main, &[], &truth, 0.0, opts).unwrap(), single);
        assert!(deep_supervision_loss(&main, &[], &truth, 1.0, opts).is_err());
    }

    fn stage(rng: &mut ChaCha8Rng, side: Side, id: usize) -> StageDistribution {
        StageDistribution {
            hard: random_prob(3, (2, 2, 2), rng),
            soft: random_prob(3, (2, 2, 2), rng),
            stage_id: id,
            side,
        }
    }

    #[test]
    fn dsd_reduces_to_deep_supervision() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = random_truth(3, (2, 2, 2), &mut rng);
        let main = random_prob(3, (2, 2, 2), &mut rng);
        let enc: Vec<_> = (1..=3).map(|i| stage(&mut rng, Side::Encoder, i)).collect();
        let dec: Vec<_> = (1..=3).map(|i| stage(&mut rng, Side::Decoder, i)).collect();
        let cfg = DsdConfig { alpha1: 0.0, alpha2: 0.0, ..Default::default() };
        let b = dsd_loss(&main, &enc, &dec, &truth, &cfg).unwrap();
        let hard: Vec<_> = dec.iter().map(|d| d.hard.clone()).collect();
        let ds = deep_supervision_loss(&main, &hard, &truth, 1.0, LossOptions::from(&cfg)).unwrap();
        assert_eq!(b.total, ds);
        let none = DsdConfig { eta: 0.0, alpha1: 0.0, alpha2: 0.0, ..Default::default() };
        let b = dsd_loss(&main, &enc, &dec, &truth, &none).unwrap();
        assert_eq!(b.total, dice_ce_loss(&main, &truth, LossOptions::from(&none)).unwrap());
        assert!(dsd_loss(&main, &enc[..2], &dec, &truth, &cfg).is_err());
    }

    #[test]
    fn tau_squared_scales_kl_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = random_truth(3, (2, 2, 2), &mut rng);
        let main = random_prob(3, (2, 2, 2), &mut rng);
        let enc: Vec<_> = (1..=2).map(|i| stage(&mut rng, Side::Encoder, i)).collect();
        let dec: Vec<_> = (1..=2).map(|i| stage(&mut rng, Side::Decoder, i)).collect();
        let plain = dsd_loss(&main, &enc, &dec, &truth, &DsdConfig::default()).unwrap();
        let scaled_cfg = DsdConfig { kl_tau_squared: true, ..Default::default() };
        let scaled = dsd_loss(&main, &enc, &dec, &truth, &scaled_cfg).unwrap();
        assert_abs_diff_eq!(scaled.kl_encoder, 9.0 * plain.kl_encoder, epsilon = 1e-12);
        assert_abs_diff_eq!(scaled.kl_decoder, 9.0 * plain.kl_decoder, epsilon = 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn kl_is_nonnegative(seed in 0u64..10_000, k in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_prob(k, (2, 3, 2), &mut rng);
            let t = random_prob(k, (2, 3, 2), &mut rng);
            proptest::prop_assert!(soft_kl_loss(&s, &t, 1e-7).unwrap() >= 0.0);
        }

        #[test]
        fn dice_term_bounded(seed in 0u64..10_000, k in 2usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = random_truth(k, (2, 2, 3), &mut rng);
            let pred = random_prob(k, (2, 2, 3), &mut rng);
            // The CE part alone is obtained with a perfect-dice reference.
            let opts = LossOptions::with_smooth_eps(0.0);
            let total = dice_ce_loss(&pred, &truth, opts).unwrap();
            let n = 12.0;
            let ce: f64 = -pred.data().iter().zip(truth.data().iter())
                .map(|(y, g)| g * y.ln()).sum::<f64>() / n;
            let dice = total - ce;
            proptest::prop_assert!((-1e-12..=1.0 + 1e-12).contains(&dice), "dice term {}", dice);
        }
    }
}

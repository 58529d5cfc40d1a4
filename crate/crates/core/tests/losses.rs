use dsdseg::autograd::{Tape, Tensor};
use dsdseg::config::DsdConfig;
use dsdseg::losses::{dice_ce_loss, dsd_loss, dsd_loss_var, LossOptions, StageVars, TermMask};
use dsdseg::oracle;
use dsdseg::volume::{LabelVolume, ProbVolume, Side, StageDistribution};
use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn probs(rng: &mut ChaCha8Rng) -> Array4<f64> {
    oracle::softmax(&Array4::from_shape_fn((3, 2, 2, 2), |_| rng.random_range(-2.0..2.0)), 1.0)
}

fn batched(a: &Array4<f64>) -> Tensor {
    a.clone().insert_axis(Axis(0)).into_dyn()
}

/// Gradient of the recorded objective w.r.t. the deepest encoder's
/// softened distribution.
fn teacher_gradient(detach_teacher: bool) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels = Array3::from_shape_fn((2, 2, 2), |(i, j, k)| ((i + j + k) % 3) as u8);
    let truth = batched(LabelVolume::from_labels(&labels, 3).unwrap().data());
    let inputs: Vec<Tensor> = (0..13).map(|_| batched(&probs(&mut rng))).collect();
    let cfg = DsdConfig {
        detach_teacher,
        ..DsdConfig::default()
    };
    let tape = Tape::new();
    let v: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let stage = |i: usize| StageVars {
        hard: v[1 + 2 * i],
        soft: v[2 + 2 * i],
    };
    let enc: Vec<_> = (0..3).map(stage).collect();
    let dec: Vec<_> = (3..6).map(stage).collect();
    let loss = dsd_loss_var(v[0], &enc, &dec, &truth, &cfg, TermMask::ALL).unwrap();
    let g = tape.backward(loss.total);
    g.get_or_zeros(enc[2].soft)
}

#[test]
fn detached_teacher_receives_no_distillation_gradient() {
    assert!(teacher_gradient(true).iter().all(|v| *v == 0.0));
    assert!(teacher_gradient(false).iter().any(|v| v.abs() > 1e-8));
}

#[test]
fn all_coefficients_zero_leaves_the_main_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels = Array3::from_shape_fn((2, 2, 2), |(i, _, k)| ((i + k) % 3) as u8);
    let truth = LabelVolume::from_labels(&labels, 3).unwrap();
    let main = ProbVolume::new(probs(&mut rng)).unwrap();
    let mut stage = |id, side| StageDistribution {
        hard: ProbVolume::new(probs(&mut rng)).unwrap(),
        soft: ProbVolume::new(probs(&mut rng)).unwrap(),
        stage_id: id,
        side,
    };
    let enc: Vec<_> = (1..=2).map(|i| stage(i, Side::Encoder)).collect();
    let dec: Vec<_> = (1..=2).map(|i| stage(i, Side::Decoder)).collect();
    let cfg = DsdConfig {
        eta: 0.0,
        alpha1: 0.0,
        alpha2: 0.0,
        ..DsdConfig::default()
    };
    let total = dsd_loss(&main, &enc, &dec, &truth, &cfg).unwrap().total;
    assert_eq!(total, dice_ce_loss(&main, &truth, LossOptions::from(&cfg)).unwrap());

    // Z = 2 with unit coefficients: recomposed from the oracle's pieces.
    let cfg = DsdConfig::default();
    let b = dsd_loss(&main, &enc, &dec, &truth, &cfg).unwrap();
    let (eps, floor) = (cfg.dice_smooth_eps, cfg.prob_clamp_floor);
    let t = truth.data();
    let by_hand = oracle::dice_ce(main.data(), t, eps, floor)
        + dec.iter().map(|d| oracle::dice_ce(d.hard.data(), t, eps, floor)).sum::<f64>()
        + oracle::kl(enc[0].soft.data(), enc[1].soft.data(), floor)
        + oracle::kl(dec[1].soft.data(), dec[0].soft.data(), floor);
    assert!((b.total - by_hand).abs() <= 1e-9);
}

#[test]
fn empty_class_does_not_produce_nan() {
    let labels = Array3::<u8>::zeros((2, 2, 2));
    let truth = LabelVolume::from_labels(&labels, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let main = ProbVolume::new(probs(&mut rng)).unwrap();
    assert!(dice_ce_loss(&main, &truth, LossOptions::default()).unwrap().is_finite());
}

use dsdseg::config::DsdConfig;
use dsdseg::losses::{deep_supervision_loss, dice_ce_loss, dsd_loss, soft_kl_loss, LossOptions};
use dsdseg::oracle::{self, OracleStage};
use dsdseg::volume::{LabelVolume, ProbVolume, Side, StageDistribution};
use ndarray::{Array3, Array4};
use proptest::prelude::*;

#[derive(Debug)]
struct Case {
    truth: LabelVolume,
    main: ProbVolume,
    encoder: Vec<StageDistribution>,
    decoder: Vec<StageDistribution>,
}

fn probs(k: usize, d: [usize; 3]) -> impl Strategy<Value = Array4<f64>> {
    prop::collection::vec(-3.0f64..3.0, k * d[0] * d[1] * d[2])
        .prop_map(move |v| oracle::softmax(&Array4::from_shape_vec((k, d[0], d[1], d[2]), v).unwrap(), 1.0))
}

fn stage(k: usize, d: [usize; 3], id: usize, side: Side) -> impl Strategy<Value = StageDistribution> {
    (probs(k, d), probs(k, d)).prop_map(move |(h, s)| StageDistribution {
        hard: ProbVolume::new(h).unwrap(),
        soft: ProbVolume::new(s).unwrap(),
        stage_id: id,
        side,
    })
}

fn case() -> impl Strategy<Value = Case> {
    (2usize..=4, [1usize..=4, 1usize..=4, 1usize..=4], 2usize..=3).prop_flat_map(|(k, d, z)| {
        let labels = prop::collection::vec(0..k as u8, d[0] * d[1] * d[2]);
        let enc: Vec<_> = (1..=z).map(|i| stage(k, d, i, Side::Encoder)).collect();
        let dec: Vec<_> = (1..=z).map(|i| stage(k, d, i, Side::Decoder)).collect();
        (labels, probs(k, d), enc, dec).prop_map(move |(l, m, encoder, decoder)| Case {
            truth: LabelVolume::from_labels(&Array3::from_shape_vec(d, l).unwrap(), k).unwrap(),
            main: ProbVolume::new(m).unwrap(),
            encoder,
            decoder,
        })
    })
}

fn coefficients() -> impl Strategy<Value = DsdConfig> {
    (0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0, 1.0f64..5.0, any::<bool>()).prop_map(|(eta, alpha1, alpha2, tau, sq)| {
        DsdConfig {
            eta,
            alpha1,
            alpha2,
            tau,
            kl_tau_squared: sq,
            ..DsdConfig::default()
        }
    })
}

fn stages(s: &[StageDistribution]) -> Vec<OracleStage> {
    s.iter()
        .map(|s| OracleStage {
            hard: s.hard.data().clone(),
            soft: s.soft.data().clone(),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dsd_matches_oracle(c in case(), cfg in coefficients()) {
        let fast = dsd_loss(&c.main, &c.encoder, &c.decoder, &c.truth, &cfg).unwrap();
        let slow = oracle::dsd(c.main.data(), &stages(&c.encoder), &stages(&c.decoder), c.truth.data(), &cfg);
        prop_assert!((fast.total - slow).abs() <= 1e-9, "{} vs {}", fast.total, slow);
        let parts = fast.main + fast.deep_supervision + fast.kl_encoder + fast.kl_decoder;
        prop_assert!((parts - fast.total).abs() <= 1e-12);
    }

    #[test]
    fn zero_alphas_reduce_to_deep_supervision(c in case(), cfg in coefficients()) {
        let cfg = DsdConfig { alpha1: 0.0, alpha2: 0.0, ..cfg };
        let hard: Vec<ProbVolume> = c.decoder.iter().map(|d| d.hard.clone()).collect();
        let a = dsd_loss(&c.main, &c.encoder, &c.decoder, &c.truth, &cfg).unwrap().total;
        let b = deep_supervision_loss(&c.main, &hard, &c.truth, cfg.eta, LossOptions::from(&cfg)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_itself(c in case()) {
        let p = &c.encoder[0].soft;
        let q = &c.decoder[0].soft;
        prop_assert!(soft_kl_loss(p, q, 1e-7).unwrap() >= -1e-12);
        prop_assert!(soft_kl_loss(p, p, 1e-7).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn dice_ce_is_nonnegative_and_minimal_at_truth(c in case()) {
        let opts = LossOptions::default();
        let loss = dice_ce_loss(&c.main, &c.truth, opts).unwrap();
        prop_assert!(loss >= 0.0);
        let perfect = ProbVolume::new(c.truth.data().clone()).unwrap();
        prop_assert!(dice_ce_loss(&perfect, &c.truth, opts).unwrap() <= loss + 1e-9);
        let eps = opts.smooth_eps;
        let slow = oracle::dice_ce(c.main.data(), c.truth.data(), eps, opts.prob_clamp_floor);
        prop_assert!((loss - slow).abs() <= 1e-9);
    }
}

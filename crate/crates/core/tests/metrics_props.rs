use dsdseg::metrics::{dice_score, evaluate_labels, hausdorff_percentile, hd95, HdConvention};
use dsdseg::oracle;
use ndarray::Array3;
use proptest::prelude::*;

fn mask(dims: (usize, usize, usize)) -> impl Strategy<Value = Array3<bool>> {
    prop::collection::vec(prop::bool::weighted(0.3), dims.0 * dims.1 * dims.2)
        .prop_map(move |v| Array3::from_shape_vec(dims, v).unwrap())
}

fn pair() -> impl Strategy<Value = (Array3<bool>, Array3<bool>)> {
    (2usize..7, 2usize..7, 2usize..7).prop_flat_map(|d| (mask(d), mask(d)))
}

fn spacing() -> impl Strategy<Value = [f64; 3]> {
    [0.25f64..3.0, 0.25f64..3.0, 0.25f64..3.0]
}

proptest! {
    #[test]
    fn hd95_matches_brute_force((a, b) in pair(), s in spacing()) {
        prop_assert_eq!(hd95(a.view(), b.view(), s).unwrap(), oracle::hd95_brute_force(&a, &b, s));
    }

    #[test]
    fn hd95_is_symmetric_and_bounded((a, b) in pair(), s in spacing()) {
        let ab = hd95(a.view(), b.view(), s).unwrap();
        prop_assert_eq!(ab, hd95(b.view(), a.view(), s).unwrap());
        let full = hausdorff_percentile(a.view(), b.view(), s, HdConvention::MaxOfDirected, 100.0).unwrap();
        if let (Some(p), Some(m)) = (ab, full) {
            prop_assert!(p <= m);
            prop_assert!(p >= 0.0);
        }
    }

    #[test]
    fn pooled_never_exceeds_hausdorff((a, b) in pair(), s in spacing()) {
        let max = hausdorff_percentile(a.view(), b.view(), s, HdConvention::MaxOfDirected, 100.0).unwrap();
        let pooled = hausdorff_percentile(a.view(), b.view(), s, HdConvention::Pooled, 95.0).unwrap();
        if let (Some(m), Some(p)) = (max, pooled) {
            prop_assert!(p <= m + 1e-12);
        }
    }

    #[test]
    fn hd95_scales_with_uniform_spacing((a, b) in pair(), s in spacing(), f in prop::sample::select(vec![0.5, 2.0, 4.0])) {
        let base = hd95(a.view(), b.view(), s).unwrap();
        let scaled = hd95(a.view(), b.view(), s.map(|v| v * f)).unwrap();
        prop_assert_eq!(scaled, base.map(|v| v * f));
    }

    #[test]
    fn identical_masks_have_zero_distance((a, _) in pair(), s in spacing()) {
        let d = hd95(a.view(), a.view(), s).unwrap();
        prop_assert!(d.is_none() || d == Some(0.0));
        let dice = dice_score(a.view(), a.view()).unwrap();
        prop_assert!(dice.is_none() || dice == Some(1.0));
    }

    #[test]
    fn dice_is_symmetric_and_in_unit_range((a, b) in pair()) {
        let d = dice_score(a.view(), b.view()).unwrap();
        prop_assert_eq!(d, dice_score(b.view(), a.view()).unwrap());
        prop_assert_eq!(d, oracle::dice_count(&a, &b));
        if let Some(v) = d {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn perfect_prediction_scores_one_and_zero() {
    let truth = Array3::from_shape_fn((8, 8, 8), |(i, j, k)| ((i / 3 + j / 4 + k / 5) % 3) as u8);
    let r = evaluate_labels(&truth, &truth, 3, [1.0, 1.0, 2.0], true, HdConvention::MaxOfDirected).unwrap();
    assert_eq!(r.per_class.len(), 2);
    assert_eq!(r.mean_dice, Some(1.0));
    assert_eq!(r.mean_hd95, Some(0.0));
}

#[test]
fn single_voxel_offset_distance() {
    let mut a = Array3::from_elem((5, 5, 5), false);
    let mut b = a.clone();
    a[[2, 2, 2]] = true;
    b[[2, 2, 4]] = true;
    assert_eq!(hd95(a.view(), b.view(), [1.0, 1.0, 1.5]).unwrap(), Some(3.0));
    assert_eq!(dice_score(a.view(), b.view()).unwrap(), Some(0.0));
}

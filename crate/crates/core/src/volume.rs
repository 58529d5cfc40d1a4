//! Dense per-class fields over a 3D grid, shaped `(K, H, W, D)`.

use ndarray::{Array4, ArrayView4, Axis};

use crate::error::{ensure_shape, Error, Result};

/// Per-voxel channel sums of a probability field must match 1 within this.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-5;

/// One-hot ground truth: exactly one channel is 1 at every voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    data: Array4<f64>,
}

impl LabelVolume {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        check_dims(data.shape())?;
        let (k, n) = (data.shape()[0], voxel_count(data.shape()));
        let flat = data
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((k, n))
            .expect("standard layout reshape");
        for p in 0..n {
            let mut ones = 0;
            for c in 0..k {
                match flat[[c, p]] {
                    1.0 => ones += 1,
                    0.0 => {}
                    v => {
                        return Err(Error::contract(format!(
                            "label volume holds non-binary value {v} at class {c}, voxel {p}"
                        )))
                    }
                }
            }
            if ones != 1 {
                return Err(Error::contract(format!(
                    "label volume voxel {p} has {ones} active classes"
                )));
            }
        }
        Ok(Self { data })
    }

    /// One-hot encodes integer class ids `(H, W, D)`.
    pub fn from_labels(labels: &ndarray::Array3<u8>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::contract("num_classes must be at least 2"));
        }
        let (h, w, d) = labels.dim();
        let mut data = Array4::zeros((num_classes, h, w, d));
        for ((i, j, k), &l) in labels.indexed_iter() {
            let l = l as usize;
            if l >= num_classes {
                return Err(Error::contract(format!(
                    "label {l} at ({i},{j},{k}) out of range for {num_classes} classes"
                )));
            }
            data[[l, i, j, k]] = 1.0;
        }
        check_dims(data.shape())?;
        Ok(Self { data })
    }

    /// Per-voxel argmax back to integer class ids.
    pub fn to_labels(&self) -> ndarray::Array3<u8> {
        argmax_channels(self.data.view())
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn shape(&self) -> [usize; 4] {
        shape4(self.data.shape())
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.data
    }
}

/// A per-voxel categorical distribution over K classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    data: Array4<f64>,
}

impl ProbVolume {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        check_dims(data.shape())?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("probability {v} outside [0, 1]")));
        }
        let sums = data.sum_axis(Axis(0));
        if let Some(((i, j, k), s)) = sums
            .indexed_iter()
            .find(|(_, s)| (**s - 1.0).abs() > NORMALIZATION_TOLERANCE)
        {
            return Err(Error::contract(format!(
                "probabilities at ({i},{j},{k}) sum to {s}, not 1"
            )));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView4<'_, f64> {
        self.data.view()
    }

    pub fn num_classes(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn shape(&self) -> [usize; 4] {
        shape4(self.data.shape())
    }

    pub fn argmax(&self) -> ndarray::Array3<u8> {
        argmax_channels(self.data.view())
    }

    pub fn into_inner(self) -> Array4<f64> {
        self.data
    }
}

/// Which side of the U a stage sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

/// Output of a bottleneck head: the same logits softened twice.
#[derive(Debug, Clone)]
pub struct StageDistribution {
    /// Softmax at temperature 1, supervised against ground truth.
    pub hard: ProbVolume,
    /// Softmax at the distillation temperature.
    pub soft: ProbVolume,
    /// 1-based stage index in the tap ordering of `side`.
    pub stage_id: usize,
    pub side: Side,
}

pub(crate) fn shape4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

pub(crate) fn voxel_count(s: &[usize]) -> usize {
    s[1..].iter().product()
}

fn check_dims(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::contract(format!("empty volume shape {shape:?}")));
    }
    if shape[0] < 2 {
        return Err(Error::contract(format!(
            "need at least 2 classes, got {}",
            shape[0]
        )));
    }
    Ok(())
}

pub(crate) fn ensure_same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    ensure_shape(a, b)
}

/// First-maximum argmax over the leading axis.
pub fn argmax_channels(data: ArrayView4<'_, f64>) -> ndarray::Array3<u8> {
    let (k, h, w, d) = data.dim();
    ndarray::Array3::from_shape_fn((h, w, d), |(i, j, l)| {
        let mut best = 0;
        for c in 1..k {
            if data[[c, i, j, l]] > data[[best, i, j, l]] {
                best = c;
            }
        }
        best as u8
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn one_hot_of_zero_labels_fills_channel_zero() {
        let g = LabelVolume::from_labels(&Array3::zeros((2, 3, 4)), 3).unwrap();
        assert!(g.data().index_axis(Axis(0), 0).iter().all(|&v| v == 1.0));
        assert!(g.data().index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_hot_single_voxel() {
        let g = LabelVolume::from_labels(&Array3::from_elem((1, 1, 1), 1), 2).unwrap();
        assert_eq!(g.data().iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0]);
    }

    #[test]
    fn one_hot_rejects_out_of_range() {
        assert!(LabelVolume::from_labels(&Array3::from_elem((1, 1, 1), 3), 3).is_err());
        assert!(LabelVolume::from_labels(&Array3::zeros((1, 1, 1)), 1).is_err());
    }

    #[test]
    fn label_volume_rejects_two_hot() {
        let data = Array4::from_elem((2, 1, 1, 1), 1.0);
        assert!(matches!(LabelVolume::new(data), Err(Error::Contract(_))));
    }

    #[test]
    fn prob_volume_checks_normalization() {
        let ok = Array4::from_elem((2, 2, 2, 2), 0.5);
        assert!(ProbVolume::new(ok).is_ok());
        let bad = Array4::from_elem((2, 2, 2, 2), 0.6);
        assert!(ProbVolume::new(bad).is_err());
    }

    proptest::proptest! {
        #[test]
        fn argmax_inverts_one_hot(labels in proptest::collection::vec(0u8..4, 24)) {
            let x = Array3::from_shape_vec((2, 3, 4), labels).unwrap();
            let g = LabelVolume::from_labels(&x, 4).unwrap();
            proptest::prop_assert_eq!(g.to_labels(), x);
        }
    }
}

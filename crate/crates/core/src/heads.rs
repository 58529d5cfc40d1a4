//! Bottleneck heads: channel projection, upsampling to the output grid and
//! temperature softmax, turning any stage's feature map into an
//! output-shaped class distribution.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array4, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_slice, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::losses::StageVars;
use crate::params::{normal_tensor, zeros, Bound, ParamId, ParamStore};
pub use crate::volume::{Side, StageDistribution};
use crate::volume::ProbVolume;

/// Standard deviation of the channel-projection initialization.
pub const PROJECTION_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum UpsampleMode {
    /// Transposed convolution with kernel = stride = scale factor.
    #[default]
    LearnedDeconv,
    /// Parameter-free trilinear interpolation.
    Trilinear,
}

/// A stage feature map `(K', H', W', D')` tagged with its position.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub data: Array4<f64>,
    pub stage_id: usize,
    pub side: Side,
}

impl FeatureMap {
    pub fn new(data: Array4<f64>, stage_id: usize, side: Side) -> Result<Self> {
        if data.shape().contains(&0) {
            return Err(Error::contract(format!("empty feature map {:?}", data.shape())));
        }
        Ok(Self { data, stage_id, side })
    }

    pub fn spatial(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }
}

/// Per-axis integer factor from `from` to `to`.
pub fn scale_factor(from: [usize; 3], to: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if from[a] == 0 || !to[a].is_multiple_of(from[a]) {
            return Err(Error::contract(format!(
                "target shape {to:?} is not an integer multiple of {from:?}"
            )));
        }
        out[a] = to[a] / from[a];
    }
    Ok(out)
}

/// Per-voxel softmax of `logits / tau` over the class axis.
pub fn soften(logits: &Array4<f64>, tau: f64) -> Result<ProbVolume> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::contract(format!("temperature must be > 0, got {tau}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("logits must be finite"));
    }
    let k = logits.shape()[0];
    let n = logits.len() / k;
    let data: Vec<f64> = logits.iter().copied().collect();
    let p = softmax_slice(&data, 1, k, n, tau);
    ProbVolume::new(Array4::from_shape_vec(logits.raw_dim(), p).expect("softmax shape"))
}

/// One three-layer head attached to a single tap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BottleneckHead {
    pub side: Side,
    pub stage_id: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Upsampling factor from the tap grid to the output grid.
    pub scale: [usize; 3],
    pub mode: UpsampleMode,
    proj_weight: ParamId,
    proj_bias: ParamId,
    deconv: Option<(ParamId, ParamId)>,
}

impl BottleneckHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        side: Side,
        stage_id: usize,
        in_channels: usize,
        num_classes: usize,
        scale: [usize; 3],
        mode: UpsampleMode,
    ) -> Self {
        let prefix = format!("head.{}.{}", side_name(side), stage_id);
        let proj_weight = store.add(
            format!("{prefix}.proj.weight"),
            normal_tensor(&[num_classes, in_channels, 1, 1, 1], PROJECTION_INIT_STD, rng),
        );
        let proj_bias = store.add(format!("{prefix}.proj.bias"), zeros(&[num_classes]));
        let deconv = (mode == UpsampleMode::LearnedDeconv).then(|| {
            // Identity per class, replicated over the kernel block.
            let w = Tensor::from_shape_fn(
                IxDyn(&[num_classes, num_classes, scale[0], scale[1], scale[2]]),
                |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 },
            );
            (
                store.add(format!("{prefix}.deconv.weight"), w),
                store.add(format!("{prefix}.deconv.bias"), zeros(&[num_classes])),
            )
        });
        Self {
            side,
            stage_id,
            in_channels,
            num_classes,
            scale,
            mode,
            proj_weight,
            proj_bias,
            deconv,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.proj_weight, self.proj_bias];
        if let Some((w, b)) = self.deconv {
            ids.extend([w, b]);
        }
        ids
    }

    /// Kernel-size-1 channel mixer: `(B, K', …)` → `(B, K, …)`.
    pub fn project_channels<'t>(&self, f: Var<'t>, params: &Bound<'t>) -> Var<'t> {
        f.patch_conv(&params.var(self.proj_weight), &params.var(self.proj_bias), [1, 1, 1])
    }

    /// Upsamples projected features to logits on the output grid.
    pub fn upsample_to_output<'t>(&self, f: Var<'t>, params: &Bound<'t>) -> Var<'t> {
        match (self.mode, self.deconv) {
            (UpsampleMode::LearnedDeconv, Some((w, b))) => {
                f.patch_deconv(&params.var(w), &params.var(b), self.scale)
            }
            _ => f.upsample_trilinear(self.scale),
        }
    }

    pub fn logits<'t>(&self, f: Var<'t>, params: &Bound<'t>) -> Var<'t> {
        let projected = self.project_channels(f, params);
        self.upsample_to_output(projected, params)
    }

    /// Logits softened at τ = 1 and at `tau`.
    pub fn forward<'t>(&self, f: Var<'t>, params: &Bound<'t>, tau: f64) -> StageVars<'t> {
        let logits = self.logits(f, params);
        StageVars {
            hard: logits.softmax_channels(1.0),
            soft: logits.softmax_channels(tau),
        }
    }
}

fn side_name(side: Side) -> &'static str {
    match side {
        Side::Encoder => "encoder",
        Side::Decoder => "decoder",
    }
}

/// Evaluates one head on a single unbatched feature map.
pub fn bottleneck_forward(
    head: &BottleneckHead,
    params: &ParamStore,
    feature: &FeatureMap,
    target_shape: [usize; 3],
    tau: f64,
) -> Result<StageDistribution> {
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature must be > 0, got {tau}")));
    }
    if feature.data.shape()[0] != head.in_channels {
        return Err(Error::ShapeMismatch {
            expected: vec![head.in_channels],
            actual: vec![feature.data.shape()[0]],
        });
    }
    if scale_factor(feature.spatial(), target_shape)? != head.scale {
        return Err(Error::contract(format!(
            "head expects scale {:?} but {:?} → {target_shape:?} differs",
            head.scale,
            feature.spatial()
        )));
    }
    let tape = Tape::new();
    let bound = params.bind(&tape, false);
    let x = tape.constant(feature.data.clone().insert_axis(Axis(0)).into_dyn());
    let out = head.forward(x, &bound, tau);
    let to_prob = |v: Var<'_>| {
        let arr = v
            .value()
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("4-d head output");
        ProbVolume::new(arr)
    };
    Ok(StageDistribution {
        hard: to_prob(out.hard)?,
        soft: to_prob(out.soft)?,
        stage_id: head.stage_id,
        side: head.side,
    })
}

/// The 2Z heads attached to a U-shaped backbone, with a call counter.
#[derive(Debug, Serialize, Deserialize)]
pub struct HeadSet {
    /// Index 0 is encoder stage 1 (shallowest).
    pub encoder: Vec<BottleneckHead>,
    /// Index 0 is decoder stage 1 (deepest, full resolution).
    pub decoder: Vec<BottleneckHead>,
    #[serde(skip)]
    calls: AtomicUsize,
}

impl Clone for HeadSet {
    fn clone(&self) -> Self {
        Self {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            calls: AtomicUsize::new(0),
        }
    }
}

impl HeadSet {
    pub fn new(encoder: Vec<BottleneckHead>, decoder: Vec<BottleneckHead>) -> Self {
        Self {
            encoder,
            decoder,
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of head evaluations since construction.
    pub fn forward_calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn forward<'t>(
        &self,
        head: &BottleneckHead,
        f: Var<'t>,
        params: &Bound<'t>,
        tau: f64,
    ) -> StageVars<'t> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        head.forward(f, params, tau)
    }

    pub fn forward_encoder<'t>(&self, taps: &[Var<'t>], params: &Bound<'t>, tau: f64) -> Vec<StageVars<'t>> {
        self.encoder
            .iter()
            .zip(taps)
            .map(|(h, &t)| self.forward(h, t, params, tau))
            .collect()
    }

    pub fn forward_decoder<'t>(&self, taps: &[Var<'t>], params: &Bound<'t>, tau: f64) -> Vec<StageVars<'t>> {
        self.decoder
            .iter()
            .zip(taps)
            .map(|(h, &t)| self.forward(h, t, params, tau))
            .collect()
    }
}

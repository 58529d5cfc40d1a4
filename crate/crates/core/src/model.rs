//! A backbone with its 2Z bottleneck heads and their shared parameters.

use ndarray::{Array4, Axis, Ix4};

use crate::autograd::{Tape, Tensor, Var};
use crate::backbone::{ArchConfig, NormObservation, Phase, UNet3d, UShapedBackbone};
use crate::config::{AblationMode, DsdConfig};
use crate::error::{Error, Result};
use crate::heads::HeadSet;
use crate::losses::{dsd_loss_var, DsdVars, StageVars, TermMask};
use crate::params::{Bound, ParamId, ParamStore};

/// Loss terms that `mode` evaluates.
pub fn term_mask(mode: AblationMode) -> TermMask {
    TermMask {
        deep_supervision: mode.uses_decoder_heads(),
        encoder_kl: mode.uses_encoder_kl(),
        decoder_kl: mode.uses_decoder_kl(),
    }
}

pub struct DsdModel {
    pub net: UNet3d,
    /// `None` for a bare backbone.
    pub heads: Option<HeadSet>,
    pub store: ParamStore,
}

/// Result of one recorded training forward pass.
pub struct TrainForward<'t> {
    pub loss: DsdVars<'t>,
    pub norm_stats: Vec<NormObservation>,
}

impl DsdModel {
    /// Backbone parameters are registered first, so their ids and values do
    /// not depend on `with_heads`.
    pub fn new(arch: ArchConfig, seed: u64, with_heads: bool) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = UNet3d::new(arch, &mut store, seed)?;
        let heads = with_heads.then(|| net.build_heads(&mut store, seed, net.config().head_upsample));
        Ok(Self { net, heads, store })
    }

    pub fn arch(&self) -> &ArchConfig {
        self.net.config()
    }

    pub fn head_param_ids(&self) -> Vec<ParamId> {
        self.heads
            .iter()
            .flat_map(|h| h.encoder.iter().chain(&h.decoder))
            .flat_map(|h| h.param_ids())
            .collect()
    }

    pub fn backbone_param_ids(&self) -> Vec<ParamId> {
        let heads = self.head_param_ids();
        self.store.ids().filter(|id| !heads.contains(id)).collect()
    }

    /// Head evaluations so far (0 for a bare backbone).
    pub fn head_calls(&self) -> usize {
        self.heads.as_ref().map_or(0, HeadSet::forward_calls)
    }

    /// Records the full training loss for a batch `x: (B, C, H, W, D)` with
    /// one-hot `truth: (B, K, H, W, D)`. Heads run only where `mask` needs
    /// them.
    pub fn forward_train<'t>(
        &self,
        x: Var<'t>,
        params: &Bound<'t>,
        truth: &Tensor,
        dsd: &DsdConfig,
        mask: TermMask,
    ) -> Result<TrainForward<'t>> {
        let taps = self.net.forward_with_taps(x, params, Phase::Train)?;
        let main = taps.main_logits.softmax_channels(1.0);
        let need_heads = mask.deep_supervision || mask.encoder_kl || mask.decoder_kl;
        let (enc, dec): (Vec<StageVars<'t>>, Vec<StageVars<'t>>) = match (&self.heads, need_heads) {
            (_, false) => (Vec::new(), Vec::new()),
            (None, true) => return Err(Error::contract("loss needs heads but the model has none")),
            (Some(h), true) => {
                let enc = if mask.encoder_kl {
                    h.forward_encoder(&taps.encoder_taps, params, dsd.tau)
                } else {
                    Vec::new()
                };
                let dec = if mask.deep_supervision || mask.decoder_kl {
                    h.forward_decoder(&taps.decoder_taps, params, dsd.tau)
                } else {
                    Vec::new()
                };
                (enc, dec)
            }
        };
        let loss = dsd_loss_var(main, &enc, &dec, truth, dsd, mask)?;
        Ok(TrainForward {
            loss,
            norm_stats: taps.norm_stats,
        })
    }

    /// Main logits of the inference path; heads are never evaluated.
    pub fn logits(&self, x: Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.store.bind(&tape, false);
        let x = tape.constant(x);
        let out = self.net.forward_inference(x, &params, Phase::Eval)?;
        Ok(out.value().as_ref().clone())
    }

    /// Class probabilities `(K, H, W, D)` for one image `(C, H, W, D)`.
    pub fn predict(&self, image: &Array4<f64>) -> Result<Array4<f64>> {
        let x = image.clone().insert_axis(Axis(0)).into_dyn();
        let tape = Tape::new();
        let params = self.store.bind(&tape, false);
        let x = tape.constant(x);
        let probs = self.net.forward_inference(x, &params, Phase::Eval)?.softmax_channels(1.0);
        let out = probs.value().index_axis(Axis(0), 0).to_owned();
        Ok(out.into_dimensionality::<Ix4>().expect("4-d prediction"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn masks_follow_modes() {
        assert_eq!(
            term_mask(AblationMode::Baseline),
            TermMask { deep_supervision: false, encoder_kl: false, decoder_kl: false }
        );
        assert_eq!(term_mask(AblationMode::Dsd), TermMask::ALL);
        assert!(!term_mask(AblationMode::Sdd).encoder_kl);
    }

    #[test]
    fn head_and_backbone_ids_partition_the_store() {
        let m = DsdModel::new(ArchConfig { base_channels: 4, ..Default::default() }, 0, true).unwrap();
        let (h, b) = (m.head_param_ids(), m.backbone_param_ids());
        assert_eq!(h.len() + b.len(), m.store.len());
        assert!(h.iter().all(|id| m.store.name(*id).starts_with("head.")));
    }

    #[test]
    fn inference_skips_heads() {
        let m = DsdModel::new(ArchConfig { base_channels: 4, ..Default::default() }, 0, true).unwrap();
        let p = m.predict(&Array4::zeros((1, 8, 8, 8))).unwrap();
        assert_eq!(p.shape(), &[4, 8, 8, 8]);
        assert_eq!(m.head_calls(), 0);
        let x = Tensor::zeros(IxDyn(&[1, 1, 8, 8, 8]));
        m.logits(x).unwrap();
        assert_eq!(m.head_calls(), 0);
    }
}

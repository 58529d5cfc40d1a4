//! A small 3D U-Net and the tap interface that heads attach to.
//!
//! Any U-shaped network can take part in dual self-distillation by
//! implementing [`UShapedBackbone`]: it must expose `Z` encoder taps ordered
//! shallow → deep and `Z` decoder taps ordered deep (full resolution) →
//! shallow, where stage `i` on either side lives on a grid `2^(i-1)` times
//! coarser than the input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NormKind, NormStats, Var};
use crate::error::{Error, Result};
use crate::heads::{BottleneckHead, HeadSet, UpsampleMode};
use crate::params::{normal_tensor, ones, zeros, Bound, ParamId, ParamStore};
use crate::volume::Side;

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Number of encoder (and decoder) stages, `Z`.
    pub num_stages: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub channel_growth: usize,
    pub norm_kind: NormKind,
    pub activation: Activation,
    pub head_upsample: UpsampleMode,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            num_stages: 3,
            in_channels: 1,
            num_classes: 4,
            base_channels: 8,
            channel_growth: 2,
            norm_kind: NormKind::Instance,
            activation: Activation::LeakyRelu,
            head_upsample: UpsampleMode::LearnedDeconv,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_stages < 2 {
            return Err(Error::Config(format!("num_stages must be >= 2, got {}", self.num_stages)));
        }
        if self.in_channels < 1 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.base_channels < 4 {
            return Err(Error::Config(format!(
                "base_channels must be >= 4, got {}",
                self.base_channels
            )));
        }
        if self.channel_growth < 1 {
            return Err(Error::Config("channel_growth must be >= 1".into()));
        }
        Ok(())
    }

    /// Feature width of stage `i` (1-based), shared by encoder and decoder.
    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels * self.channel_growth.pow(stage as u32 - 1)
    }

    /// Spatial divisor of stage `i` relative to the input grid.
    pub fn stage_stride(&self, stage: usize) -> usize {
        1 << (stage - 1)
    }

    pub fn check_input_shape(&self, spatial: [usize; 3]) -> Result<()> {
        let f = self.stage_stride(self.num_stages);
        if spatial.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::contract(format!(
                "input spatial shape {spatial:?} must be divisible by {f} on every axis"
            )));
        }
        Ok(())
    }
}

/// Ordered taps plus the main logits of one forward pass.
pub struct TapSet<'t> {
    /// Index 0 = encoder stage 1 (full resolution) … index Z-1 = bottom.
    pub encoder_taps: Vec<Var<'t>>,
    /// Index 0 = decoder stage 1 (full resolution) … index Z-1 = coarsest.
    pub decoder_taps: Vec<Var<'t>>,
    pub main_logits: Var<'t>,
    /// Per-layer batch statistics observed in training-phase batch norm.
    pub norm_stats: Vec<NormObservation>,
}

impl TapSet<'_> {
    /// Checks the ordering and divisibility guarantees of the tap contract.
    pub fn validate(&self, input_spatial: [usize; 3], num_stages: usize) -> Result<()> {
        if self.encoder_taps.len() != num_stages || self.decoder_taps.len() != num_stages {
            return Err(Error::contract(format!(
                "expected {num_stages} taps per side, got {} encoder and {} decoder",
                self.encoder_taps.len(),
                self.decoder_taps.len()
            )));
        }
        for (side, taps) in [("encoder", &self.encoder_taps), ("decoder", &self.decoder_taps)] {
            for (i, t) in taps.iter().enumerate() {
                let s = t.shape();
                let f = 1 << i;
                let expect = [input_spatial[0] / f, input_spatial[1] / f, input_spatial[2] / f];
                if s.len() != 5 || [s[2], s[3], s[4]] != expect {
                    return Err(Error::contract(format!(
                        "{side} tap {} has shape {s:?}, expected spatial {expect:?}",
                        i + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NormObservation {
    pub buffer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Whether normalization uses batch statistics (training) or stored
/// running statistics (evaluation, batch norm only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Contract for networks that dual self-distillation can attach to.
pub trait UShapedBackbone {
    fn num_stages(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Channels of the tap at `stage` (1-based) on `side`.
    fn tap_channels(&self, side: Side, stage: usize) -> usize;
    fn forward_with_taps<'t>(&self, x: Var<'t>, params: &Bound<'t>, phase: Phase) -> Result<TapSet<'t>>;
    /// Main logits only; taps are not collected and heads are never run.
    fn forward_inference<'t>(&self, x: Var<'t>, params: &Bound<'t>, phase: Phase) -> Result<Var<'t>>;

    /// Builds one head per tap, each upsampling by its stage stride.
    fn build_heads(
        &self,
        store: &mut ParamStore,
        seed: u64,
        mode: UpsampleMode,
    ) -> HeadSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ HEAD_SEED_SALT);
        let z = self.num_stages();
        let k = self.num_classes();
        let mut make = |side: Side| -> Vec<BottleneckHead> {
            (1..=z)
                .map(|i| {
                    let s = 1 << (i - 1);
                    BottleneckHead::new(store, &mut rng, side, i, self.tap_channels(side, i), k, [s, s, s], mode)
                })
                .collect()
        };
        let encoder = make(Side::Encoder);
        let decoder = make(Side::Decoder);
        HeadSet::new(encoder, decoder)
    }
}

/// Heads draw from their own stream so backbone initialization does not
/// depend on whether heads are attached.
const HEAD_SEED_SALT: u64 = 0x6865_6164_7321;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConvNorm {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    buffer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Block {
    first: ConvNorm,
    second: ConvNorm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Patch {
    weight: ParamId,
    bias: ParamId,
}

/// Two conv-norm-activation blocks per stage, strided-conv downsampling,
/// transposed-conv upsampling and skip concatenation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UNet3d {
    cfg: ArchConfig,
    /// `down[i]` feeds encoder stage `i + 2`.
    down: Vec<Patch>,
    encoder: Vec<Block>,
    /// `up[i]` lifts decoder stage `i + 2` to the grid of stage `i + 1`.
    up: Vec<Patch>,
    /// `decoder[i]` produces decoder stage `i + 1`.
    decoder: Vec<Block>,
    seg_head: Patch,
}

fn conv_norm(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, ci: usize, co: usize) -> ConvNorm {
    let c = ConvNorm {
        weight: store.add(format!("{name}.weight"), normal_tensor(&[co, ci, 3, 3, 3], he_std(ci * 27), rng)),
        bias: store.add(format!("{name}.bias"), zeros(&[co])),
        gamma: store.add(format!("{name}.norm.gamma"), ones(&[co])),
        beta: store.add(format!("{name}.norm.beta"), zeros(&[co])),
        buffer: format!("{name}.norm"),
    };
    store.add_buffer(format!("{}.running_mean", c.buffer), vec![0.0; co]);
    store.add_buffer(format!("{}.running_var", c.buffer), vec![1.0; co]);
    c
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl UNet3d {
    /// Registers all parameters in `store`, initialized from `seed`.
    pub fn new(cfg: ArchConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = cfg.num_stages;
        let ch = |i: usize| cfg.stage_channels(i);

        let mut encoder = Vec::with_capacity(z);
        let mut down = Vec::with_capacity(z - 1);
        for i in 1..=z {
            let cin = if i == 1 { cfg.in_channels } else { ch(i - 1) };
            if i > 1 {
                let c = ch(i - 1);
                let name = format!("encoder.{i}.down");
                down.push(Patch {
                    weight: store.add(format!("{name}.weight"), normal_tensor(&[c, c, 2, 2, 2], he_std(c * 8), &mut rng)),
                    bias: store.add(format!("{name}.bias"), zeros(&[c])),
                });
            }
            encoder.push(Block {
                first: conv_norm(store, &mut rng, format!("encoder.{i}.conv1"), cin, ch(i)),
                second: conv_norm(store, &mut rng, format!("encoder.{i}.conv2"), ch(i), ch(i)),
            });
        }

        let mut decoder = Vec::with_capacity(z);
        let mut up = Vec::with_capacity(z - 1);
        // Built bottom-up so the RNG stream follows the data flow.
        let mut rev_blocks = Vec::with_capacity(z);
        let mut rev_up = Vec::with_capacity(z - 1);
        for i in (1..=z).rev() {
            if i == z {
                rev_blocks.push(Block {
                    first: conv_norm(store, &mut rng, format!("decoder.{i}.conv1"), ch(z), ch(z)),
                    second: conv_norm(store, &mut rng, format!("decoder.{i}.conv2"), ch(z), ch(z)),
                });
                continue;
            }
            let (c_in, c_out) = (ch(i + 1), ch(i));
            let name = format!("decoder.{i}.up");
            rev_up.push(Patch {
                weight: store.add(format!("{name}.weight"), normal_tensor(&[c_in, c_out, 2, 2, 2], he_std(c_in), &mut rng)),
                bias: store.add(format!("{name}.bias"), zeros(&[c_out])),
            });
            // Skip concatenation: upsampled features + matching encoder tap.
            let concat = c_out + ch(i);
            rev_blocks.push(Block {
                first: conv_norm(store, &mut rng, format!("decoder.{i}.conv1"), concat, c_out),
                second: conv_norm(store, &mut rng, format!("decoder.{i}.conv2"), c_out, c_out),
            });
        }
        decoder.extend(rev_blocks.into_iter().rev());
        up.extend(rev_up.into_iter().rev());

        let k = cfg.num_classes;
        let seg_head = Patch {
            weight: store.add("seg_head.weight", normal_tensor(&[k, ch(1), 1, 1, 1], he_std(ch(1)), &mut rng)),
            bias: store.add("seg_head.bias", zeros(&[k])),
        };
        Ok(Self {
            cfg,
            down,
            encoder,
            up,
            decoder,
            seg_head,
        })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    /// Encoder widths, shallow → deep.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (1..=self.cfg.num_stages).map(|i| self.cfg.stage_channels(i)).collect()
    }

    fn conv_norm_act<'t>(
        &self,
        x: Var<'t>,
        layer: &ConvNorm,
        p: &Bound<'t>,
        phase: Phase,
        stats: &mut Vec<NormObservation>,
    ) -> Var<'t> {
        let y = x.conv3(&p.var(layer.weight), &p.var(layer.bias));
        let mean_key = format!("{}.running_mean", layer.buffer);
        let var_key = format!("{}.running_var", layer.buffer);
        let ns = match (self.cfg.norm_kind, phase) {
            (NormKind::Batch, Phase::Eval) => NormStats::Fixed {
                mean: p.store().buffer(&mean_key).expect("running mean buffer"),
                var: p.store().buffer(&var_key).expect("running var buffer"),
            },
            _ => NormStats::FromInput,
        };
        let (y, mean, var) = y.norm(&p.var(layer.gamma), &p.var(layer.beta), self.cfg.norm_kind, ns, NORM_EPS);
        if self.cfg.norm_kind == NormKind::Batch && phase == Phase::Train {
            stats.push(NormObservation {
                buffer: layer.buffer.clone(),
                mean,
                var,
            });
        }
        match self.cfg.activation {
            Activation::Relu => y.relu(),
            Activation::LeakyRelu => y.leaky_relu(LEAKY_SLOPE),
        }
    }

    fn block<'t>(
        &self,
        x: Var<'t>,
        block: &Block,
        p: &Bound<'t>,
        phase: Phase,
        stats: &mut Vec<NormObservation>,
    ) -> Var<'t> {
        let y = self.conv_norm_act(x, &block.first, p, phase, stats);
        self.conv_norm_act(y, &block.second, p, phase, stats)
    }

    fn check_input(&self, x: &Var<'_>) -> Result<()> {
        let s = x.shape();
        if s.len() != 5 || s[1] != self.cfg.in_channels {
            return Err(Error::contract(format!(
                "expected input (B, {}, H, W, D), got {s:?}",
                self.cfg.in_channels
            )));
        }
        self.cfg.check_input_shape([s[2], s[3], s[4]])
    }

    /// Runs the network; batch-norm running statistics come from `p`'s store.
    pub fn run<'t>(&self, x: Var<'t>, p: &Bound<'t>, phase: Phase) -> Result<TapSet<'t>> {
        self.check_input(&x)?;
        let z = self.cfg.num_stages;
        let mut stats = Vec::new();
        let mut enc = Vec::with_capacity(z);
        let mut h = x;
        for i in 0..z {
            if i > 0 {
                let d = &self.down[i - 1];
                h = h.patch_conv(&p.var(d.weight), &p.var(d.bias), [2, 2, 2]);
            }
            h = self.block(h, &self.encoder[i], p, phase, &mut stats);
            enc.push(h);
        }
        let mut dec: Vec<Option<Var<'t>>> = vec![None; z];
        let mut d = self.block(enc[z - 1], &self.decoder[z - 1], p, phase, &mut stats);
        dec[z - 1] = Some(d);
        for i in (0..z - 1).rev() {
            let u = &self.up[i];
            let lifted = d.patch_deconv(&p.var(u.weight), &p.var(u.bias), [2, 2, 2]);
            let merged = lifted.concat_channels(&enc[i]);
            d = self.block(merged, &self.decoder[i], p, phase, &mut stats);
            dec[i] = Some(d);
        }
        let main_logits = d.patch_conv(&p.var(self.seg_head.weight), &p.var(self.seg_head.bias), [1, 1, 1]);
        Ok(TapSet {
            encoder_taps: enc,
            decoder_taps: dec.into_iter().map(|t| t.expect("every decoder stage ran")).collect(),
            main_logits,
            norm_stats: stats,
        })
    }
}

impl UShapedBackbone for UNet3d {
    fn num_stages(&self) -> usize {
        self.cfg.num_stages
    }

    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    fn tap_channels(&self, _side: Side, stage: usize) -> usize {
        self.cfg.stage_channels(stage)
    }

    fn forward_with_taps<'t>(&self, x: Var<'t>, params: &Bound<'t>, phase: Phase) -> Result<TapSet<'t>> {
        self.run(x, params, phase)
    }

    fn forward_inference<'t>(&self, x: Var<'t>, params: &Bound<'t>, phase: Phase) -> Result<Var<'t>> {
        Ok(self.run(x, params, phase)?.main_logits)
    }
}

/// Moves running statistics towards observed batch statistics.
pub fn update_running_stats(store: &mut ParamStore, observed: &[NormObservation]) {
    for obs in observed {
        for (key, batch) in [("running_mean", &obs.mean), ("running_var", &obs.var)] {
            if let Some(buf) = store.buffer_mut(&format!("{}.{key}", obs.buffer)) {
                for (r, b) in buf.iter_mut().zip(batch.iter()) {
                    *r = (1.0 - BATCH_NORM_MOMENTUM) * *r + BATCH_NORM_MOMENTUM * b;
                }
            }
        }
    }
}

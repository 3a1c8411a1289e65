//! Miniature multi-scale denoiser hosting fused cross-attention.
//!
//! Feature maps are token matrices `[H*W x C]`; convolutions are im2col
//! gathers followed by a matmul, so the whole forward pass stays inside the
//! tape's operation set. The generation stream and every face reference
//! stream share the frozen trunk; face streams use text-only attention and
//! their per-layer hidden states feed the generation stream's fused layers.

use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

use crate::attention::{
    build_identity_attention_mask, fused_attention_on_tape, AttentionError, AttentionVars,
    AttentionWeights, IdentityMaskSet, ReferenceSet, TrainSelection,
};
use crate::raster::BoolRaster;
use crate::tape::{GatherMap, ParamId, Tape, Var};
use crate::tensor::{randn, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum UNetError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("latent is {got_rows}x{got_cols}, expected {want_rows}x{want_cols}")]
    LatentShape {
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("timestep {t} out of range (schedule has {max} steps)")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("identity masks supplied without any face reference")]
    MasksWithoutRefs,
    #[error("{refs} reference latents but {ids} identity assignments")]
    IdentityCountMismatch { refs: usize, ids: usize },
}

pub type Result<T> = std::result::Result<T, UNetError>;

/// Architecture description. `scales` are the attention scales, each exactly
/// half the previous (the base resolution is conv-only).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// Latent side length, e.g. 16 for a 16x16 latent.
    pub base_resolution: usize,
    /// Channels at base resolution.
    pub base_channels: usize,
    /// Latent channel count.
    pub latent_channels: usize,
    /// Attention scales, halving: base/2, base/4, ...
    pub scales: Vec<usize>,
    /// Channels at each attention scale.
    pub channels: Vec<usize>,
    /// Cross-attention layers at each scale (at least one each).
    pub attn_layers: Vec<usize>,
    /// Text condition width.
    pub d_c: usize,
    /// Timestep embedding width (even).
    pub d_time: usize,
    /// Diffusion step count; sizes the timestep embedding table.
    pub timesteps: usize,
    /// Multiplier on the default 1/sqrt(D) attention score scale.
    pub alpha_mult: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_resolution: 16,
            base_channels: 16,
            latent_channels: 3,
            scales: vec![8, 4],
            channels: vec![32, 48],
            attn_layers: vec![2, 2],
            d_c: 32,
            d_time: 16,
            timesteps: 1000,
            alpha_mult: 1.0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(UNetError::Config("need at least one attention scale".into()));
        }
        if self.scales.len() != self.channels.len() || self.scales.len() != self.attn_layers.len() {
            return Err(UNetError::Config(
                "scales, channels and attn_layers must have equal length".into(),
            ));
        }
        let mut prev = self.base_resolution;
        for &s in &self.scales {
            if s == 0 || s * 2 != prev {
                return Err(UNetError::Config(format!(
                    "scale {s} must be exactly half of the previous extent {prev}"
                )));
            }
            prev = s;
        }
        if self.attn_layers.iter().any(|&a| a == 0) {
            return Err(UNetError::Config(
                "every attention scale needs at least one layer".into(),
            ));
        }
        if self.d_time % 2 != 0 || self.d_time == 0 {
            return Err(UNetError::Config("d_time must be even and positive".into()));
        }
        if self.timesteps == 0 {
            return Err(UNetError::Config("timesteps must be positive".into()));
        }
        if self.alpha_mult <= 0.0 {
            return Err(UNetError::Config("alpha_mult must be positive".into()));
        }
        Ok(())
    }

    /// Number of levels: base plus one per attention scale.
    fn levels(&self) -> usize {
        1 + self.scales.len()
    }

    fn level_res(&self, l: usize) -> usize {
        if l == 0 {
            self.base_resolution
        } else {
            self.scales[l - 1]
        }
    }

    fn level_ch(&self, l: usize) -> usize {
        if l == 0 {
            self.base_channels
        } else {
            self.channels[l - 1]
        }
    }

    pub fn latent_tokens(&self) -> usize {
        self.base_resolution * self.base_resolution
    }

    /// Attention scales in forward order: down pass gets the first
    /// ceil(a/2) layers of each scale, the rest land after mid (deepest
    /// scale) or on the up pass.
    pub fn attention_placements(&self) -> Vec<usize> {
        let deepest = self.levels() - 1;
        let n_down = |l: usize| {
            let a = self.attn_layers[l - 1];
            a - a / 2
        };
        let n_late = |l: usize| self.attn_layers[l - 1] / 2;
        let mut out = Vec::new();
        for l in 1..=deepest {
            for _ in 0..n_down(l) {
                out.push(self.level_res(l));
            }
        }
        for _ in 0..n_late(deepest) {
            out.push(self.level_res(deepest));
        }
        for l in (1..deepest).rev() {
            for _ in 0..n_late(l) {
                out.push(self.level_res(l));
            }
        }
        out
    }
}

/// Residual block parameters: two 3x3 convs plus the timestep bias
/// projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ResBlockParams {
    pub conv1: Tensor,
    pub conv2: Tensor,
    pub time_w: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayer {
    pub scale: usize,
    pub weights: AttentionWeights,
}

/// Which tensors a parameter visit reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Frozen after base training.
    Base,
    /// The trainable face projections.
    Face,
}

#[derive(Debug, Clone)]
struct Maps {
    conv_in: Rc<GatherMap>,
    /// im2col stride-1 per level (also serves conv_out at level 0).
    res: Vec<Rc<GatherMap>>,
    /// im2col stride-2 entering level i (index i-1).
    down: Vec<Rc<GatherMap>>,
    /// nearest 2x upsample leaving level i (index i-1).
    up: Vec<Rc<GatherMap>>,
    /// im2col stride-1 at level i-1 extents with level i channels (index i-1).
    up_conv: Vec<Rc<GatherMap>>,
    /// broadcast [1 x C] -> [H*W x C] per level.
    bcast: Vec<Rc<GatherMap>>,
}

fn im2col_map(h_in: usize, w_in: usize, c_in: usize, stride: usize) -> GatherMap {
    let (h_out, w_out) = (h_in / stride, w_in / stride);
    let cols = 9 * c_in;
    let mut idx = Vec::with_capacity(h_out * w_out * cols);
    for y in 0..h_out {
        for x in 0..w_out {
            for dy in 0..3usize {
                for dx in 0..3usize {
                    let yy = (y * stride + dy) as i64 - 1;
                    let xx = (x * stride + dx) as i64 - 1;
                    for c in 0..c_in {
                        if yy < 0 || yy >= h_in as i64 || xx < 0 || xx >= w_in as i64 {
                            idx.push(GatherMap::NONE);
                        } else {
                            idx.push((yy * w_in as i64 + xx) * c_in as i64 + c as i64);
                        }
                    }
                }
            }
        }
    }
    GatherMap::new(h_out * w_out, cols, h_in * w_in * c_in, idx)
}

fn upsample_map(res: usize, c: usize) -> GatherMap {
    let out_res = res * 2;
    let mut idx = Vec::with_capacity(out_res * out_res * c);
    for y in 0..out_res {
        for x in 0..out_res {
            for ch in 0..c {
                idx.push((((y / 2) * res + x / 2) * c + ch) as i64);
            }
        }
    }
    GatherMap::new(out_res * out_res, c, res * res * c, idx)
}

fn broadcast_map(tokens: usize, c: usize) -> GatherMap {
    let idx = (0..tokens * c).map(|i| (i % c) as i64).collect();
    GatherMap::new(tokens, c, c, idx)
}

fn sinusoidal_table(t_max: usize, d: usize) -> Tensor {
    let mut table = Tensor::zeros(t_max, d);
    for t in 0..t_max {
        for i in 0..d / 2 {
            let freq = (10000f64).powf(-2.0 * i as f64 / d as f64);
            table.set(t, 2 * i, (t as f64 * freq).sin());
            table.set(t, 2 * i + 1, (t as f64 * freq).cos());
        }
    }
    table
}

/// Full parameter set of the denoiser plus derived index maps.
#[derive(Debug, Clone)]
pub struct UNetState {
    pub config: UNetConfig,
    pub conv_in: Tensor,
    /// One residual block per level, down pass (index = level).
    pub res_down: Vec<ResBlockParams>,
    /// Stride-2 convs entering level i (index i-1).
    pub down_convs: Vec<Tensor>,
    pub mid_res: ResBlockParams,
    /// Up-pass convs; index j is the transition from level deepest-j.
    pub up_convs: Vec<Tensor>,
    /// Up-pass residual blocks at the landing level (same indexing).
    pub res_up: Vec<ResBlockParams>,
    pub conv_out: Tensor,
    /// Attention layers in forward order.
    pub attn: Vec<AttnLayer>,
    /// Sinusoidal timestep embedding table `[timesteps x d_time]`.
    pub time_table: Tensor,
    maps: Maps,
}

fn conv_tensor(c_in: usize, c_out: usize, rng: &mut impl rand::Rng) -> Tensor {
    randn(9 * c_in, c_out, 1.0 / (9.0 * c_in as f64).sqrt(), rng)
}

fn res_params(c: usize, d_time: usize, rng: &mut impl rand::Rng) -> ResBlockParams {
    ResBlockParams {
        conv1: conv_tensor(c, c, rng),
        conv2: conv_tensor(c, c, rng),
        time_w: randn(d_time, c, 0.2 / (d_time as f64).sqrt(), rng),
    }
}

impl UNetState {
    pub fn init(config: UNetConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        config.validate()?;
        let levels = config.levels();
        let deepest = levels - 1;

        let conv_in = conv_tensor(config.latent_channels, config.base_channels, rng);
        let res_down: Vec<ResBlockParams> = (0..levels)
            .map(|l| res_params(config.level_ch(l), config.d_time, rng))
            .collect();
        let down_convs: Vec<Tensor> = (1..levels)
            .map(|l| conv_tensor(config.level_ch(l - 1), config.level_ch(l), rng))
            .collect();
        let mid_res = res_params(config.level_ch(deepest), config.d_time, rng);
        let up_convs: Vec<Tensor> = (0..deepest)
            .map(|j| {
                let from = deepest - j;
                conv_tensor(config.level_ch(from), config.level_ch(from - 1), rng)
            })
            .collect();
        let res_up: Vec<ResBlockParams> = (0..deepest)
            .map(|j| res_params(config.level_ch(deepest - j - 1), config.d_time, rng))
            .collect();
        // zero final projection: the untrained denoiser predicts zero noise
        let conv_out = Tensor::zeros(9 * config.base_channels, config.latent_channels);

        let attn = config
            .attention_placements()
            .into_iter()
            .map(|scale| {
                let level = config.scales.iter().position(|&s| s == scale).unwrap() + 1;
                let d_h = config.level_ch(level);
                Ok(AttnLayer {
                    scale,
                    weights: AttentionWeights::init(d_h, config.d_c, d_h, config.alpha_mult, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let maps = Maps {
            conv_in: Rc::new(im2col_map(
                config.base_resolution,
                config.base_resolution,
                config.latent_channels,
                1,
            )),
            res: (0..levels)
                .map(|l| {
                    Rc::new(im2col_map(
                        config.level_res(l),
                        config.level_res(l),
                        config.level_ch(l),
                        1,
                    ))
                })
                .collect(),
            down: (1..levels)
                .map(|l| {
                    Rc::new(im2col_map(
                        config.level_res(l - 1),
                        config.level_res(l - 1),
                        config.level_ch(l - 1),
                        2,
                    ))
                })
                .collect(),
            up: (1..levels)
                .map(|l| Rc::new(upsample_map(config.level_res(l), config.level_ch(l))))
                .collect(),
            up_conv: (1..levels)
                .map(|l| {
                    Rc::new(im2col_map(
                        config.level_res(l - 1),
                        config.level_res(l - 1),
                        config.level_ch(l),
                        1,
                    ))
                })
                .collect(),
            bcast: (0..levels)
                .map(|l| {
                    let r = config.level_res(l);
                    Rc::new(broadcast_map(r * r, config.level_ch(l)))
                })
                .collect(),
        };

        Ok(Self {
            time_table: sinusoidal_table(config.timesteps, config.d_time),
            config,
            conv_in,
            res_down,
            down_convs,
            mid_res,
            up_convs,
            res_up,
            conv_out,
            attn,
            maps,
        })
    }

    /// Visit every parameter tensor with its name and kind, in a fixed order.
    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor, ParamKind)) {
        f("conv_in.w", &self.conv_in, ParamKind::Base);
        for (l, r) in self.res_down.iter().enumerate() {
            f(&format!("res_down.{l}.conv1"), &r.conv1, ParamKind::Base);
            f(&format!("res_down.{l}.conv2"), &r.conv2, ParamKind::Base);
            f(&format!("res_down.{l}.time_w"), &r.time_w, ParamKind::Base);
        }
        for (i, w) in self.down_convs.iter().enumerate() {
            f(&format!("down.{}.conv", i + 1), w, ParamKind::Base);
        }
        f("mid.conv1", &self.mid_res.conv1, ParamKind::Base);
        f("mid.conv2", &self.mid_res.conv2, ParamKind::Base);
        f("mid.time_w", &self.mid_res.time_w, ParamKind::Base);
        for (j, w) in self.up_convs.iter().enumerate() {
            f(&format!("up.{j}.conv"), w, ParamKind::Base);
        }
        for (j, r) in self.res_up.iter().enumerate() {
            f(&format!("res_up.{j}.conv1"), &r.conv1, ParamKind::Base);
            f(&format!("res_up.{j}.conv2"), &r.conv2, ParamKind::Base);
            f(&format!("res_up.{j}.time_w"), &r.time_w, ParamKind::Base);
        }
        f("conv_out.w", &self.conv_out, ParamKind::Base);
        for (n, layer) in self.attn.iter().enumerate() {
            let w = &layer.weights;
            f(&format!("attn.{n}.w_q"), &w.w_q, ParamKind::Base);
            f(&format!("attn.{n}.w_k"), &w.w_k, ParamKind::Base);
            f(&format!("attn.{n}.w_v"), &w.w_v, ParamKind::Base);
            f(&format!("attn.{n}.w_out"), &w.w_out, ParamKind::Base);
            f(&format!("attn.{n}.w_kf"), &w.w_kf, ParamKind::Face);
            f(&format!("attn.{n}.w_vf"), &w.w_vf, ParamKind::Face);
        }
    }

    /// Mutable counterpart of [`UNetState::visit_params`]; same order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor, ParamKind)) {
        f("conv_in.w", &mut self.conv_in, ParamKind::Base);
        for (l, r) in self.res_down.iter_mut().enumerate() {
            f(&format!("res_down.{l}.conv1"), &mut r.conv1, ParamKind::Base);
            f(&format!("res_down.{l}.conv2"), &mut r.conv2, ParamKind::Base);
            f(&format!("res_down.{l}.time_w"), &mut r.time_w, ParamKind::Base);
        }
        for (i, w) in self.down_convs.iter_mut().enumerate() {
            f(&format!("down.{}.conv", i + 1), w, ParamKind::Base);
        }
        f("mid.conv1", &mut self.mid_res.conv1, ParamKind::Base);
        f("mid.conv2", &mut self.mid_res.conv2, ParamKind::Base);
        f("mid.time_w", &mut self.mid_res.time_w, ParamKind::Base);
        for (j, w) in self.up_convs.iter_mut().enumerate() {
            f(&format!("up.{j}.conv"), w, ParamKind::Base);
        }
        for (j, r) in self.res_up.iter_mut().enumerate() {
            f(&format!("res_up.{j}.conv1"), &mut r.conv1, ParamKind::Base);
            f(&format!("res_up.{j}.conv2"), &mut r.conv2, ParamKind::Base);
            f(&format!("res_up.{j}.time_w"), &mut r.time_w, ParamKind::Base);
        }
        f("conv_out.w", &mut self.conv_out, ParamKind::Base);
        for (n, layer) in self.attn.iter_mut().enumerate() {
            let w = &mut layer.weights;
            f(&format!("attn.{n}.w_q"), &mut w.w_q, ParamKind::Base);
            f(&format!("attn.{n}.w_k"), &mut w.w_k, ParamKind::Base);
            f(&format!("attn.{n}.w_v"), &mut w.w_v, ParamKind::Base);
            f(&format!("attn.{n}.w_out"), &mut w.w_out, ParamKind::Base);
            f(&format!("attn.{n}.w_kf"), &mut w.w_kf, ParamKind::Face);
            f(&format!("attn.{n}.w_vf"), &mut w.w_vf, ParamKind::Face);
        }
    }

    /// Exactly the face projections, `{w_kf, w_vf} x attention layers`.
    pub fn trainable_parameters(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        self.visit_params(|name, _, kind| {
            if kind == ParamKind::Face {
                out.push(ParamId::new(name));
            }
        });
        out
    }

    /// Total trainable scalar count, for the parameter audit.
    pub fn trainable_scalar_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t, kind| {
            if kind == ParamKind::Face {
                n += t.len();
            }
        });
        n
    }

    pub fn attention_layer_count(&self) -> usize {
        self.attn.len()
    }
}

/// Conditioning inputs for one denoiser evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Conditioning<'a> {
    /// Text condition `[N_c x D_c]`.
    pub text: &'a Tensor,
    /// Clean face reference latents at base resolution, `[tokens x channels]`.
    pub refs: &'a [Tensor],
    /// Identity index per reference latent.
    pub identity_of: &'a [usize],
    /// Per-identity location masks (multi-identity generation only).
    pub masks: Option<&'a IdentityMaskSet>,
    /// Opt-in stricter mask rule: face keys visible only inside their own
    /// identity's region.
    pub strict_mask: bool,
}

impl<'a> Conditioning<'a> {
    pub fn text_only(text: &'a Tensor) -> Self {
        Self {
            text,
            refs: &[],
            identity_of: &[],
            masks: None,
            strict_mask: false,
        }
    }
}

/// Optional instrumentation filled during a forward pass.
#[derive(Debug, Default)]
pub struct ForwardTrace {
    /// Scale of each attention layer, forward order.
    pub attn_scales: Vec<usize>,
    /// Scaled identity masks delivered to each attention layer, when masking
    /// was active.
    pub delivered_masks: Vec<Option<Vec<BoolRaster>>>,
    /// Face hidden states per attention layer (outer) and stream (inner).
    pub face_hidden: Vec<Vec<Tensor>>,
}

struct TrunkVars {
    conv_in: Var,
    res_down: Vec<[Var; 3]>,
    down_convs: Vec<Var>,
    mid_res: [Var; 3],
    up_convs: Vec<Var>,
    res_up: Vec<[Var; 3]>,
    conv_out: Var,
    attn: Vec<AttentionVars>,
}

impl UNetState {
    fn trunk_on_tape(&self, tape: &mut Tape, selection: TrainSelection) -> TrunkVars {
        let base = selection == TrainSelection::Base;
        let mut put = |t: &Tensor, name: String| {
            if base {
                tape.trainable(t.clone(), ParamId::new(name))
            } else {
                tape.leaf(t.clone())
            }
        };
        let conv_in = put(&self.conv_in, "conv_in.w".into());
        let res_down = self
            .res_down
            .iter()
            .enumerate()
            .map(|(l, r)| {
                [
                    put(&r.conv1, format!("res_down.{l}.conv1")),
                    put(&r.conv2, format!("res_down.{l}.conv2")),
                    put(&r.time_w, format!("res_down.{l}.time_w")),
                ]
            })
            .collect();
        let down_convs = self
            .down_convs
            .iter()
            .enumerate()
            .map(|(i, w)| put(w, format!("down.{}.conv", i + 1)))
            .collect();
        let mid_res = [
            put(&self.mid_res.conv1, "mid.conv1".into()),
            put(&self.mid_res.conv2, "mid.conv2".into()),
            put(&self.mid_res.time_w, "mid.time_w".into()),
        ];
        let up_convs = self
            .up_convs
            .iter()
            .enumerate()
            .map(|(j, w)| put(w, format!("up.{j}.conv")))
            .collect();
        let res_up = self
            .res_up
            .iter()
            .enumerate()
            .map(|(j, r)| {
                [
                    put(&r.conv1, format!("res_up.{j}.conv1")),
                    put(&r.conv2, format!("res_up.{j}.conv2")),
                    put(&r.time_w, format!("res_up.{j}.time_w")),
                ]
            })
            .collect();
        let conv_out = put(&self.conv_out, "conv_out.w".into());
        let attn = self
            .attn
            .iter()
            .enumerate()
            .map(|(n, layer)| layer.weights.on_tape(tape, &format!("attn.{n}"), selection))
            .collect();
        TrunkVars {
            conv_in,
            res_down,
            down_convs,
            mid_res,
            up_convs,
            res_up,
            conv_out,
            attn,
        }
    }

    fn conv(&self, tape: &mut Tape, x: Var, w: Var, map: &Rc<GatherMap>) -> Result<Var> {
        let cols = tape.gather(x, map.clone());
        Ok(tape.matmul(cols, w)?)
    }

    fn resblock(
        &self,
        tape: &mut Tape,
        x: Var,
        params: &[Var; 3],
        t_emb: Var,
        level: usize,
    ) -> Result<Var> {
        let [conv1, conv2, time_w] = *params;
        let h = tape.silu(x);
        let h = self.conv(tape, h, conv1, &self.maps.res[level].clone())?;
        let bias = tape.matmul(t_emb, time_w)?;
        let bias = tape.gather(bias, self.maps.bcast[level].clone());
        let h = tape.add(h, bias)?;
        let h = tape.silu(h);
        let h = self.conv(tape, h, conv2, &self.maps.res[level].clone())?;
        Ok(tape.add(x, h)?)
    }

    /// One pass through the trunk. `fused` carries per-layer reference vars
    /// and per-layer masks for the generation stream; `collect` receives each
    /// attention layer's input hidden state (used for face streams).
    #[allow(clippy::too_many_arguments)]
    fn stream_pass(
        &self,
        tape: &mut Tape,
        vars: &TrunkVars,
        z: Var,
        t_emb: Var,
        c: Var,
        fused: Option<(&[Vec<Var>], &[Option<Rc<Tensor>>])>,
        mut collect: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let deepest = self.config.levels() - 1;
        let placements = self.config.attention_placements();
        let mut attn_idx = 0usize;

        let mut run_attention_stack = |tape: &mut Tape, x: Var, count: usize| -> Result<Var> {
            let mut x = x;
            for _ in 0..count {
                let layer = &vars.attn[attn_idx];
                debug_assert_eq!(
                    self.attn[attn_idx].scale * self.attn[attn_idx].scale,
                    tape.value(x).rows()
                );
                let out = match fused {
                    Some((layer_refs, layer_masks)) => fused_attention_on_tape(
                        tape,
                        x,
                        c,
                        &layer_refs[attn_idx],
                        layer_masks[attn_idx].clone(),
                        layer,
                    )?,
                    None => {
                        if let Some(sink) = collect.as_deref_mut() {
                            sink.push(x);
                        }
                        fused_attention_on_tape(tape, x, c, &[], None, layer)?
                    }
                };
                x = tape.add(x, out)?;
                attn_idx += 1;
            }
            Ok(x)
        };

        let n_down = |l: usize| {
            let a = self.config.attn_layers[l - 1];
            a - a / 2
        };
        let n_late = |l: usize| self.config.attn_layers[l - 1] / 2;

        let mut x = self.conv(tape, z, vars.conv_in, &self.maps.conv_in.clone())?;
        x = self.resblock(tape, x, &vars.res_down[0], t_emb, 0)?;
        let mut skips = vec![x];
        for l in 1..=deepest {
            x = self.conv(tape, x, vars.down_convs[l - 1], &self.maps.down[l - 1].clone())?;
            x = self.resblock(tape, x, &vars.res_down[l], t_emb, l)?;
            x = run_attention_stack(tape, x, n_down(l))?;
            skips.push(x);
        }
        x = self.resblock(tape, x, &vars.mid_res, t_emb, deepest)?;
        x = run_attention_stack(tape, x, n_late(deepest))?;
        for j in 0..deepest {
            let from = deepest - j;
            let landing = from - 1;
            x = tape.gather(x, self.maps.up[from - 1].clone());
            x = self.conv(tape, x, vars.up_convs[j], &self.maps.up_conv[from - 1].clone())?;
            x = tape.add(x, skips[landing])?;
            x = self.resblock(tape, x, &vars.res_up[j], t_emb, landing)?;
            if landing >= 1 {
                x = run_attention_stack(tape, x, n_late(landing))?;
            }
        }
        debug_assert_eq!(attn_idx, placements.len());
        let x = tape.silu(x);
        Ok(self.conv(tape, x, vars.conv_out, &self.maps.res[0].clone())?)
    }

    /// Noise prediction for `z_t` at timestep `t` under the given
    /// conditioning, recorded on `tape`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        z_t: &Tensor,
        t: usize,
        cond: &Conditioning,
        selection: TrainSelection,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let want = (self.config.latent_tokens(), self.config.latent_channels);
        for latent in std::iter::once(z_t).chain(cond.refs.iter()) {
            if latent.shape() != want {
                return Err(UNetError::LatentShape {
                    got_rows: latent.rows(),
                    got_cols: latent.cols(),
                    want_rows: want.0,
                    want_cols: want.1,
                });
            }
        }
        if t >= self.config.timesteps {
            return Err(UNetError::TimestepOutOfRange {
                t,
                max: self.config.timesteps,
            });
        }
        if cond.masks.is_some() && cond.refs.is_empty() {
            return Err(UNetError::MasksWithoutRefs);
        }
        if cond.refs.len() != cond.identity_of.len() {
            return Err(UNetError::IdentityCountMismatch {
                refs: cond.refs.len(),
                ids: cond.identity_of.len(),
            });
        }

        let vars = self.trunk_on_tape(tape, selection);
        let t_emb = tape.leaf(self.time_table.slice_rows(t, 1));
        let c = tape.leaf(cond.text.clone());

        // face streams first: clean latents, same timestep embedding,
        // text-only attention, forward-only
        let n_layers = self.attn.len();
        let mut layer_refs: Vec<Vec<Var>> = vec![Vec::new(); n_layers];
        for face in cond.refs {
            let fz = tape.leaf(face.clone());
            let mut sink = Vec::with_capacity(n_layers);
            self.stream_pass(tape, &vars, fz, t_emb, c, None, Some(&mut sink))?;
            for (layer, h_f) in sink.into_iter().enumerate() {
                layer_refs[layer].push(h_f);
            }
        }

        // per-layer additive masks from the downscaled identity rasters
        let mut layer_masks: Vec<Option<Rc<Tensor>>> = vec![None; n_layers];
        let mut delivered: Vec<Option<Vec<BoolRaster>>> = vec![None; n_layers];
        if let Some(mask_set) = cond.masks {
            let mut per_scale: HashMap<usize, (Rc<Tensor>, Vec<BoolRaster>)> = HashMap::new();
            for (layer, info) in self.attn.iter().enumerate() {
                let entry = match per_scale.get(&info.scale) {
                    Some(e) => e.clone(),
                    None => {
                        let scaled = mask_set.at_scale(info.scale)?;
                        let streams: Vec<Tensor> = layer_refs[layer]
                            .iter()
                            .map(|&v| tape.value(v).clone())
                            .collect();
                        let refs = ReferenceSet::new(streams, cond.identity_of.to_vec())?;
                        let mask = build_identity_attention_mask(
                            &scaled,
                            cond.text.rows(),
                            &refs,
                            cond.strict_mask,
                        )?;
                        let e = (Rc::new(mask.tensor().clone()), scaled);
                        per_scale.insert(info.scale, e.clone());
                        e
                    }
                };
                layer_masks[layer] = Some(entry.0);
                delivered[layer] = Some(entry.1);
            }
        }

        let z = tape.leaf(z_t.clone());
        let out = self.stream_pass(
            tape,
            &vars,
            z,
            t_emb,
            c,
            Some((&layer_refs, &layer_masks)),
            None,
        )?;

        if let Some(trace) = trace.as_deref_mut() {
            trace.attn_scales = self.attn.iter().map(|a| a.scale).collect();
            trace.delivered_masks = delivered;
            trace.face_hidden = layer_refs
                .iter()
                .map(|vars| vars.iter().map(|&v| tape.value(v).clone()).collect())
                .collect();
        }
        Ok(out)
    }

    /// Forward-only convenience wrapper.
    pub fn forward(&self, z_t: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, z_t, t, cond, TrainSelection::Frozen, None)?;
        Ok(tape.value(out).clone())
    }
}

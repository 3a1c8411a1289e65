//! Identity-fused cross-attention.
//!
//! The layer's keys and values are the text-condition projections concatenated
//! with face-identity projections of one or more reference hidden states. The
//! two face projections are the only trainable pieces of the whole pipeline.
//! Multi-identity generation restricts each face's keys to its spatial region
//! through an additive pre-softmax mask.

use std::rc::Rc;

use thiserror::Error;

use crate::raster::{BoolRaster, RasterError};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::{Tensor, TensorError, MASK_NEG_INF};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("text condition must have at least one token")]
    EmptyCondition,
    #[error("attention mask is {got_rows}x{got_cols}, expected {want_rows}x{want_cols}")]
    MaskShape {
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("reference stream {index} is {got_rows}x{got_cols}, expected {want_rows}x{want_cols}")]
    StreamShape {
        index: usize,
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("reference set is empty")]
    EmptyReferenceSet,
    #[error("reference stream {stream} is assigned identity {identity}, but only {masks} masks exist")]
    MissingIdentityMask {
        stream: usize,
        identity: usize,
        masks: usize,
    },
    #[error("identity masks {a} and {b} overlap at base resolution")]
    OverlappingMasks { a: usize, b: usize },
    #[error("mask raster has {cells} cells but the layer has {queries} queries")]
    QueryCountMismatch { cells: usize, queries: usize },
    #[error("mask text columns must stay finite; found sentinel at row {row}, col {col}")]
    MaskedTextColumn { row: usize, col: usize },
    #[error("mask row {row} has no finite entry")]
    FullyMaskedMaskRow { row: usize },
    #[error("mask entries must be 0 or the negative-infinity sentinel; found {value} at row {row}, col {col}")]
    BadMaskValue { row: usize, col: usize, value: f64 },
    #[error("alpha must be positive, got {0}")]
    NonPositiveAlpha(f64),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

/// Projection weights of one attention layer. The base set (`w_q`, `w_k`,
/// `w_v`, `w_out`) is frozen after base training; `w_kf`/`w_vf` are the
/// trainable face projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_out: Tensor,
    pub w_kf: Tensor,
    pub w_vf: Tensor,
    pub alpha: f64,
}

impl AttentionWeights {
    /// Random init. `w_kf`/`w_vf` use the same distribution as `w_k`/`w_v`
    /// (zero-init is deliberately avoided: zero keys would still receive
    /// softmax mass and distort the text-only baseline).
    pub fn init(
        d_h: usize,
        d_c: usize,
        d: usize,
        alpha_mult: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let alpha = alpha_mult / (d as f64).sqrt();
        if alpha <= 0.0 {
            return Err(AttentionError::NonPositiveAlpha(alpha));
        }
        fn ws(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Tensor {
            crate::tensor::randn(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
        }
        Ok(Self {
            w_q: ws(d_h, d, rng),
            w_k: ws(d_c, d, rng),
            w_v: ws(d_c, d, rng),
            w_out: ws(d, d_h, rng),
            w_kf: ws(d_h, d, rng),
            w_vf: ws(d_h, d, rng),
            alpha,
        })
    }

    pub fn d_h(&self) -> usize {
        self.w_q.rows()
    }

    pub fn d_c(&self) -> usize {
        self.w_k.rows()
    }

    pub fn d(&self) -> usize {
        self.w_q.cols()
    }
}

/// Ordered face-reference hidden states, one per reference image, each tagged
/// with the identity it renders. Order is preserved and observable in the
/// concatenated key/value blocks.
#[derive(Debug, Clone)]
pub struct ReferenceSet {
    streams: Vec<Tensor>,
    identity_of: Vec<usize>,
}

impl ReferenceSet {
    pub fn empty() -> Self {
        Self {
            streams: Vec::new(),
            identity_of: Vec::new(),
        }
    }

    /// All streams must share one shape `[N_h x D_h]`.
    pub fn new(streams: Vec<Tensor>, identity_of: Vec<usize>) -> Result<Self> {
        assert_eq!(streams.len(), identity_of.len(), "one identity per stream");
        if let Some(first) = streams.first() {
            let want = first.shape();
            for (i, s) in streams.iter().enumerate() {
                if s.shape() != want {
                    return Err(AttentionError::StreamShape {
                        index: i,
                        got_rows: s.rows(),
                        got_cols: s.cols(),
                        want_rows: want.0,
                        want_cols: want.1,
                    });
                }
            }
        }
        Ok(Self {
            streams,
            identity_of,
        })
    }

    /// Single identity (index 0) for every stream.
    pub fn single_identity(streams: Vec<Tensor>) -> Result<Self> {
        let ids = vec![0; streams.len()];
        Self::new(streams, ids)
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn streams(&self) -> &[Tensor] {
        &self.streams
    }

    pub fn identity_of(&self, stream: usize) -> usize {
        self.identity_of[stream]
    }

    pub fn stream_rows(&self) -> usize {
        self.streams.first().map_or(0, |s| s.rows())
    }

    pub fn total_face_keys(&self) -> usize {
        self.streams.iter().map(|s| s.rows()).sum()
    }
}

/// Per-identity location masks at base latent resolution. Masks of distinct
/// identities must be pairwise disjoint.
#[derive(Debug, Clone)]
pub struct IdentityMaskSet {
    masks: Vec<BoolRaster>,
}

impl IdentityMaskSet {
    pub fn new(masks: Vec<BoolRaster>) -> Result<Self> {
        for a in 0..masks.len() {
            for b in a + 1..masks.len() {
                if masks[a].intersects(&masks[b]) {
                    return Err(AttentionError::OverlappingMasks { a, b });
                }
            }
        }
        Ok(Self { masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[BoolRaster] {
        &self.masks
    }

    /// Downscaled variants for one attention scale.
    pub fn at_scale(&self, scale: usize) -> Result<Vec<BoolRaster>> {
        self.masks
            .iter()
            .map(|m| m.downscale_to(scale).map_err(AttentionError::from))
            .collect()
    }
}

/// Additive pre-softmax mask over `[N_h x (N_c + total face keys)]`. Entries
/// are 0 or [`MASK_NEG_INF`]; the first `n_c` (text) columns are always
/// finite, and every row keeps at least one finite entry.
#[derive(Debug, Clone)]
pub struct AdditiveAttentionMask {
    values: Tensor,
    n_c: usize,
}

impl AdditiveAttentionMask {
    pub fn new(values: Tensor, n_c: usize) -> Result<Self> {
        for r in 0..values.rows() {
            let mut any_finite = false;
            for c in 0..values.cols() {
                let v = values.at(r, c);
                if v == 0.0 {
                    any_finite = true;
                } else if v == MASK_NEG_INF {
                    if c < n_c {
                        return Err(AttentionError::MaskedTextColumn { row: r, col: c });
                    }
                } else {
                    return Err(AttentionError::BadMaskValue {
                        row: r,
                        col: c,
                        value: v,
                    });
                }
            }
            if !any_finite {
                return Err(AttentionError::FullyMaskedMaskRow { row: r });
            }
        }
        Ok(Self { values, n_c })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn n_c(&self) -> usize {
        self.n_c
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }
}

/// Face key/value blocks for every reference stream, concatenated in set
/// order: `K_faces = [K_f1; ...; K_fn]`, values likewise.
pub fn concat_reference_kv(refs: &ReferenceSet, w: &AttentionWeights) -> Result<(Tensor, Tensor)> {
    if refs.is_empty() {
        return Err(AttentionError::EmptyReferenceSet);
    }
    let mut ks = Vec::with_capacity(refs.len());
    let mut vs = Vec::with_capacity(refs.len());
    for h_f in refs.streams() {
        ks.push(h_f.matmul(&w.w_kf)?);
        vs.push(h_f.matmul(&w.w_vf)?);
    }
    let k_refs: Vec<&Tensor> = ks.iter().collect();
    let v_refs: Vec<&Tensor> = vs.iter().collect();
    Ok((
        Tensor::concat_rows(&k_refs)?,
        Tensor::concat_rows(&v_refs)?,
    ))
}

/// Intermediate products of one fused attention evaluation, kept around for
/// tests and the mask-demo visualization.
#[derive(Debug)]
pub struct FusedAttentionParts {
    /// Pre-softmax scores including the additive mask, `[N_h x (N_c + faces)]`.
    pub scores: Tensor,
    /// Row-stochastic attention weights.
    pub weights: Tensor,
    /// Layer output `[N_h x D_h]`.
    pub output: Tensor,
}

/// Cross-attention with face-fused keys/values.
///
/// With an empty reference set and no mask this is exactly the baseline
/// text-only cross-attention.
pub fn fused_cross_attention(
    h: &Tensor,
    c: &Tensor,
    refs: &ReferenceSet,
    mask: Option<&AdditiveAttentionMask>,
    w: &AttentionWeights,
) -> Result<Tensor> {
    Ok(fused_cross_attention_parts(h, c, refs, mask, w)?.output)
}

pub fn fused_cross_attention_parts(
    h: &Tensor,
    c: &Tensor,
    refs: &ReferenceSet,
    mask: Option<&AdditiveAttentionMask>,
    w: &AttentionWeights,
) -> Result<FusedAttentionParts> {
    if c.rows() == 0 {
        return Err(AttentionError::EmptyCondition);
    }
    let q = h.matmul(&w.w_q)?;
    let k_c = c.matmul(&w.w_k)?;
    let v_c = c.matmul(&w.w_v)?;
    let (k_all, v_all) = if refs.is_empty() {
        (k_c, v_c)
    } else {
        let (k_f, v_f) = concat_reference_kv(refs, w)?;
        (
            Tensor::concat_rows(&[&k_c, &k_f])?,
            Tensor::concat_rows(&[&v_c, &v_f])?,
        )
    };
    let mut scores = q.matmul_nt(&k_all)?.scale(w.alpha);
    if let Some(m) = mask {
        let want = (h.rows(), c.rows() + refs.total_face_keys());
        if m.shape() != want || m.n_c() != c.rows() {
            return Err(AttentionError::MaskShape {
                got_rows: m.shape().0,
                got_cols: m.shape().1,
                want_rows: want.0,
                want_cols: want.1,
            });
        }
        scores = scores.add(m.tensor())?;
    }
    let weights = scores.softmax_rows()?;
    let output = weights.matmul(&v_all)?.matmul(&w.w_out)?;
    Ok(FusedAttentionParts {
        scores,
        weights,
        output,
    })
}

/// Tape handles for one attention layer's weights.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_out: Var,
    pub w_kf: Var,
    pub w_vf: Var,
    pub alpha: f64,
}

/// Which of a layer's weights are trainable in the current phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainSelection {
    /// Forward only (sampling).
    Frozen,
    /// Base pretraining: base projections train, face projections are unused.
    Base,
    /// Fused phase: only `w_kf`/`w_vf` train.
    FaceOnly,
}

impl AttentionWeights {
    /// Record this layer's weights on a tape, marking trainables per phase.
    /// `name` prefixes the parameter ids, e.g. `attn.2`.
    pub fn on_tape(&self, tape: &mut Tape, name: &str, selection: TrainSelection) -> AttentionVars {
        let mut put = |t: &Tensor, suffix: &str, trainable: bool| {
            if trainable {
                tape.trainable(t.clone(), ParamId::new(format!("{name}.{suffix}")))
            } else {
                tape.leaf(t.clone())
            }
        };
        let base = selection == TrainSelection::Base;
        let face = selection == TrainSelection::FaceOnly;
        AttentionVars {
            w_q: put(&self.w_q, "w_q", base),
            w_k: put(&self.w_k, "w_k", base),
            w_v: put(&self.w_v, "w_v", base),
            w_out: put(&self.w_out, "w_out", base),
            w_kf: put(&self.w_kf, "w_kf", face),
            w_vf: put(&self.w_vf, "w_vf", face),
            alpha: self.alpha,
        }
    }
}

/// Tape-recorded fused attention; mirrors [`fused_cross_attention_parts`]
/// operation for operation so the two paths agree bit for bit.
pub fn fused_attention_on_tape(
    tape: &mut Tape,
    h: Var,
    c: Var,
    ref_streams: &[Var],
    mask: Option<Rc<Tensor>>,
    w: &AttentionVars,
) -> Result<Var> {
    if tape.value(c).rows() == 0 {
        return Err(AttentionError::EmptyCondition);
    }
    let q = tape.matmul(h, w.w_q)?;
    let k_c = tape.matmul(c, w.w_k)?;
    let v_c = tape.matmul(c, w.w_v)?;
    let (k_all, v_all) = if ref_streams.is_empty() {
        (k_c, v_c)
    } else {
        let mut k_parts = vec![k_c];
        let mut v_parts = vec![v_c];
        for &hf in ref_streams {
            k_parts.push(tape.matmul(hf, w.w_kf)?);
            v_parts.push(tape.matmul(hf, w.w_vf)?);
        }
        (tape.concat_rows(&k_parts)?, tape.concat_rows(&v_parts)?)
    };
    let scores = tape.matmul_nt(q, k_all)?;
    let scores = tape.scale(scores, w.alpha);
    let weights = tape.masked_softmax_rows(scores, mask)?;
    let mixed = tape.matmul(weights, v_all)?;
    Ok(tape.matmul(mixed, w.w_out)?)
}

/// The multi-identity additive mask.
///
/// Entry `(q, k)` is the sentinel iff `k` is a face key of identity `i` and
/// some *other* identity `j` has its scaled mask set at query position `q`.
/// All remaining entries are 0 (row-wise softmax shift invariance makes this
/// equivalent to any other shared finite constant). With `strict` set, a face
/// key is instead visible only at queries inside its own identity's mask.
pub fn build_identity_attention_mask(
    scaled_masks: &[BoolRaster],
    n_c: usize,
    refs: &ReferenceSet,
    strict: bool,
) -> Result<AdditiveAttentionMask> {
    if refs.is_empty() {
        return Err(AttentionError::EmptyReferenceSet);
    }
    let queries = refs.stream_rows();
    if let Some(first) = scaled_masks.first() {
        if first.cells() != queries {
            return Err(AttentionError::QueryCountMismatch {
                cells: first.cells(),
                queries,
            });
        }
    }
    for s in 0..refs.len() {
        let identity = refs.identity_of(s);
        if identity >= scaled_masks.len() {
            return Err(AttentionError::MissingIdentityMask {
                stream: s,
                identity,
                masks: scaled_masks.len(),
            });
        }
    }
    let cols = n_c + refs.total_face_keys();
    let mut values = Tensor::zeros(queries, cols);
    let mut col = n_c;
    for s in 0..refs.len() {
        let identity = refs.identity_of(s);
        let rows = refs.streams()[s].rows();
        for q in 0..queries {
            let blocked = if strict {
                !scaled_masks[identity].get_flat(q)
            } else {
                scaled_masks
                    .iter()
                    .enumerate()
                    .any(|(j, m)| j != identity && m.get_flat(q))
            };
            if blocked {
                for k in col..col + rows {
                    values.set(q, k, MASK_NEG_INF);
                }
            }
        }
        col += rows;
    }
    AdditiveAttentionMask::new(values, n_c)
}

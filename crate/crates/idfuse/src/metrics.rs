//! Evaluation metric primitives and the small frozen embedders behind them:
//! identity cosine distance, face-region PSNR/SSIM, and prompt alignment.

use thiserror::Error;

use crate::faces::{
    PromptSpec, BACKGROUNDS, D_C, EXPRESSIONS, STYLES,
};
use crate::imageio::Image;
use crate::raster::BoolRaster;
use crate::tape::{ParamId, Tape};
use crate::tensor::{randn, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("vector norm {norm} deviates from 1 by more than 1e-6")]
    NotUnit { norm: f64 },
    #[error("vectors have lengths {a} and {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("images have sides {a} and {b}")]
    SideMismatch { a: usize, b: usize },
    #[error("mask is {mh}x{mw} but images are {side}x{side}")]
    MaskShape { mh: usize, mw: usize, side: usize },
    #[error("mask is empty")]
    EmptyMask,
    #[error("no {side}x{side} SSIM window has a masked center")]
    MaskTooSmallForSsim { side: usize },
    #[error("training set is empty or labels disagree with sample count")]
    BadTrainingSet,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// `1 - a.b` for unit vectors; 0 means identical direction, 2 opposite.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    for v in [a, b] {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(MetricsError::NotUnit { norm });
        }
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(1.0 - dot)
}

fn check_pair(a: &Image, b: &Image, mask: &BoolRaster) -> Result<()> {
    if a.side != b.side {
        return Err(MetricsError::SideMismatch {
            a: a.side,
            b: b.side,
        });
    }
    if mask.height() != a.side || mask.width() != a.side {
        return Err(MetricsError::MaskShape {
            mh: mask.height(),
            mw: mask.width(),
            side: a.side,
        });
    }
    if !mask.any() {
        return Err(MetricsError::EmptyMask);
    }
    Ok(())
}

/// Masked PSNR in dB for unit-range images: `10 log10(1 / MSE)` over masked
/// pixels, all three channels. Identical masked regions return `+inf`; the
/// report layer excludes the sentinel from means.
pub fn psnr(a: &Image, b: &Image, mask: &BoolRaster) -> Result<f64> {
    check_pair(a, b, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..a.side {
        for x in 0..a.side {
            if !mask.get(y, x) {
                continue;
            }
            for c in 0..3 {
                let d = a.at(y, x, c) - b.at(y, x, c);
                sum += d * d;
                n += 1;
            }
        }
    }
    let mse = sum / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn luminance(img: &Image) -> Vec<f64> {
    let mut out = Vec::with_capacity(img.side * img.side);
    for y in 0..img.side {
        for x in 0..img.side {
            out.push(0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2));
        }
    }
    out
}

/// Masked SSIM on the luminance channel: 8x8 sliding windows, averaged over
/// windows whose center pixel (offset (3, 3) in the window) is masked.
pub fn ssim(a: &Image, b: &Image, mask: &BoolRaster) -> Result<f64> {
    check_pair(a, b, mask)?;
    let side = a.side;
    let (ga, gb) = (luminance(a), luminance(b));
    let w = SSIM_WINDOW;
    let npix = (w * w) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y0 in 0..=side.saturating_sub(w) {
        for x0 in 0..=side.saturating_sub(w) {
            if !mask.get(y0 + w / 2 - 1, x0 + w / 2 - 1) {
                continue;
            }
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + w {
                for x in x0..x0 + w {
                    let (va, vb) = (ga[y * side + x], gb[y * side + x]);
                    sa += va;
                    sb += vb;
                    saa += va * va;
                    sbb += vb * vb;
                    sab += va * vb;
                }
            }
            let (ma, mb) = (sa / npix, sb / npix);
            let va = saa / npix - ma * ma;
            let vb = sbb / npix - mb * mb;
            let cov = sab / npix - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            windows += 1;
        }
    }
    if windows == 0 {
        return Err(MetricsError::MaskTooSmallForSsim { side: w });
    }
    Ok(total / windows as f64)
}

/// Face-crop feature side: masked crops are resampled to this square before
/// entering an embedder.
pub const CROP_SIDE: usize = 16;
pub const FEATURE_DIM: usize = CROP_SIDE * CROP_SIDE * 3;
pub const EMBED_DIM: usize = 64;

/// Crop the mask's bounding box and area-resample it to `CROP_SIDE`,
/// returning a `[1 x FEATURE_DIM]` row.
pub fn crop_resize_masked(img: &Image, mask: &BoolRaster) -> Result<Tensor> {
    if mask.height() != img.side || mask.width() != img.side {
        return Err(MetricsError::MaskShape {
            mh: mask.height(),
            mw: mask.width(),
            side: img.side,
        });
    }
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0usize, usize::MAX, 0usize);
    for y in 0..img.side {
        for x in 0..img.side {
            if mask.get(y, x) {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    if y0 == usize::MAX {
        return Err(MetricsError::EmptyMask);
    }
    Ok(resample_region(img, y0, y1, x0, x1))
}

/// Area-resample the full frame to `CROP_SIDE` as a `[1 x FEATURE_DIM]` row.
pub fn downsample_full(img: &Image) -> Tensor {
    resample_region(img, 0, img.side, 0, img.side)
}

fn resample_region(img: &Image, y0: usize, y1: usize, x0: usize, x1: usize) -> Tensor {
    let (h, w) = (y1 - y0, x1 - x0);
    let mut out = Tensor::zeros(1, FEATURE_DIM);
    for ty in 0..CROP_SIDE {
        let sy0 = y0 + ty * h / CROP_SIDE;
        let sy1 = (y0 + (ty + 1) * h / CROP_SIDE).max(sy0 + 1).min(y1);
        for tx in 0..CROP_SIDE {
            let sx0 = x0 + tx * w / CROP_SIDE;
            let sx1 = (x0 + (tx + 1) * w / CROP_SIDE).max(sx0 + 1).min(x1);
            let n = ((sy1 - sy0) * (sx1 - sx0)) as f64;
            for c in 0..3 {
                let mut acc = 0.0;
                for y in sy0..sy1 {
                    for x in sx0..sx1 {
                        acc += img.at(y, x, c);
                    }
                }
                // centered to [-1, 1]: zero-mean features condition the
                // downstream classifiers far better than raw intensities
                out.set(0, (ty * CROP_SIDE + tx) * 3 + c, 2.0 * (acc / n) - 1.0);
            }
        }
    }
    out
}

/// One hidden layer MLP trained as a softmax classifier; a group is one
/// softmax over a column range of the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpClassifier {
    pub w1: Tensor,
    pub w2: Tensor,
    /// Logit column count per softmax group.
    pub groups: Vec<usize>,
}

impl MlpClassifier {
    pub fn hidden(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w1)?.map(|v| v * (1.0 / (1.0 + (-v).exp()))))
    }

    /// Per-group softmax probabilities, concatenated, `[rows x sum(groups)]`.
    pub fn probs(&self, x: &Tensor) -> Result<Tensor> {
        let logits = self.hidden(x)?.matmul(&self.w2)?;
        let mut out = logits.clone();
        let mut col = 0;
        for &g in &self.groups {
            for r in 0..logits.rows() {
                let mut max = f64::NEG_INFINITY;
                for j in 0..g {
                    max = max.max(logits.at(r, col + j));
                }
                let mut denom = 0.0;
                for j in 0..g {
                    denom += (logits.at(r, col + j) - max).exp();
                }
                for j in 0..g {
                    out.set(r, col + j, (logits.at(r, col + j) - max).exp() / denom);
                }
            }
            col += g;
        }
        Ok(out)
    }

    /// Penultimate features, L2-normalized per row.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.hidden(x)?;
        let mut out = h.clone();
        for r in 0..h.rows() {
            let norm = h.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for c in 0..h.cols() {
                out.set(r, c, h.at(r, c) / norm);
            }
        }
        Ok(out)
    }

    /// Train on `(x, targets)` with full-batch gradient descent. Targets are
    /// concatenated one-hot blocks matching `groups`; the loss is the mean
    /// squared gap between group softmax outputs and the targets.
    pub fn train(
        x: &Tensor,
        targets: &Tensor,
        groups: Vec<usize>,
        steps: usize,
        lr: f64,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let out_dim: usize = groups.iter().sum();
        if x.rows() == 0 || targets.rows() != x.rows() || targets.cols() != out_dim {
            return Err(MetricsError::BadTrainingSet);
        }
        let mut w1 = randn(x.cols(), EMBED_DIM, 1.0 / (x.cols() as f64).sqrt(), rng);
        let mut w2 = randn(EMBED_DIM, out_dim, 1.0 / (EMBED_DIM as f64).sqrt(), rng);
        let mut v1 = Tensor::zeros(x.cols(), EMBED_DIM);
        let mut v2 = Tensor::zeros(EMBED_DIM, out_dim);
        for _ in 0..steps {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let w1v = tape.trainable(w1.clone(), ParamId::new("w1"));
            let w2v = tape.trainable(w2.clone(), ParamId::new("w2"));
            let h = tape.matmul(xv, w1v)?;
            let h = tape.silu(h);
            let logits = tape.matmul(h, w2v)?;
            // one softmax per group over a column slice of the logits, then
            // cross-entropy against the one-hot targets
            let mut parts = Vec::new();
            let mut col = 0;
            for &g in &groups {
                let rows = logits_cols_rows(&tape, logits).0;
                let cols: Vec<i64> = (0..rows)
                    .flat_map(|r| (0..g).map(move |j| (r * out_dim + col + j) as i64))
                    .collect();
                let map = std::rc::Rc::new(crate::tape::GatherMap::new(
                    rows,
                    g,
                    rows * out_dim,
                    cols,
                ));
                let sliced = tape.gather(logits, map);
                let p = tape.masked_softmax_rows(sliced, None)?;
                parts.push(p);
                col += g;
            }
            let probs = concat_cols(&mut tape, &parts, out_dim)?;
            let tv = tape.leaf(targets.clone());
            // epsilon floor keeps the log finite when a softmax underflows
            let eps = tape.leaf(Tensor::filled(x.rows(), out_dim, 1e-12));
            let probs = tape.add(probs, eps)?;
            let logp = tape.ln(probs);
            let picked = tape.mul(logp, tv)?;
            let loss = tape.mean(picked);
            let loss = tape.scale(loss, -(out_dim as f64));
            let grads = tape.backward(loss)?;
            v1 = v1.scale(0.9).add(&grads[&ParamId::new("w1")])?;
            v2 = v2.scale(0.9).add(&grads[&ParamId::new("w2")])?;
            w1 = w1.sub(&v1.scale(lr))?;
            w2 = w2.sub(&v2.scale(lr))?;
        }
        Ok(Self { w1, w2, groups })
    }
}

fn logits_cols_rows(tape: &Tape, v: crate::tape::Var) -> (usize, usize) {
    let t = tape.value(v);
    (t.rows(), t.cols())
}

fn concat_cols(
    tape: &mut Tape,
    parts: &[crate::tape::Var],
    out_dim: usize,
) -> Result<crate::tape::Var> {
    let rows = tape.value(parts[0]).rows();
    let mut col = 0;
    let mut placed = Vec::new();
    for &p in parts {
        let g = tape.value(p).cols();
        let idx: Vec<i64> = (0..rows * out_dim)
            .map(|i| {
                let (r, c) = (i / out_dim, i % out_dim);
                if c >= col && c < col + g {
                    (r * g + (c - col)) as i64
                } else {
                    crate::tape::GatherMap::NONE
                }
            })
            .collect();
        let map = std::rc::Rc::new(crate::tape::GatherMap::new(rows, out_dim, rows * g, idx));
        placed.push(tape.gather(p, map));
        col += g;
    }
    let mut acc = placed[0];
    for &p in &placed[1..] {
        acc = tape.add(acc, p)?;
    }
    Ok(acc)
}

/// Identity embedder: masked-crop features to identity classes; evaluation
/// uses the 64-d penultimate layer, centered by the training-population
/// mean and L2-normalized. Centering removes the direction every face
/// shares, so cosine distances between unrelated identities land near 1
/// instead of bunching up around the generic-face component.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedder {
    pub net: MlpClassifier,
    /// Mean penultimate feature over the training crops, `[1 x EMBED_DIM]`.
    pub center: Tensor,
}

impl IdentityEmbedder {
    pub fn train(
        samples: &[(Tensor, usize)],
        n_classes: usize,
        steps: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let rows: Vec<&Tensor> = samples.iter().map(|(x, _)| x).collect();
        let x = Tensor::concat_rows(&rows)?;
        let mut targets = Tensor::zeros(samples.len(), n_classes);
        for (i, (_, label)) in samples.iter().enumerate() {
            targets.set(i, *label, 1.0);
        }
        let net = MlpClassifier::train(&x, &targets, vec![n_classes], steps, 0.1, rng)?;
        let h = net.hidden(&x)?;
        let mut center = Tensor::zeros(1, h.cols());
        for r in 0..h.rows() {
            for c in 0..h.cols() {
                center.set(0, c, center.at(0, c) + h.at(r, c) / h.rows() as f64);
            }
        }
        Ok(Self { net, center })
    }

    /// Unit-norm 64-d identity embedding of a masked face crop.
    pub fn embedding(&self, img: &Image, mask: &BoolRaster) -> Result<Vec<f64>> {
        let x = crop_resize_masked(img, mask)?;
        let h = self.net.hidden(&x)?.sub(&self.center)?;
        let norm = h.row(0).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        Ok(h.row(0).iter().map(|v| v / norm).collect())
    }
}

/// Attribute classifier behind the prompt-alignment score: three softmax
/// heads (style, expression, background) over full-frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptClassifier {
    pub net: MlpClassifier,
}

/// Concatenated one-hot prompt target (style, expression, background),
/// matching [`PromptClassifier`] group order.
pub fn prompt_one_hot(prompt: &PromptSpec) -> Vec<f64> {
    let mut v = vec![0.0; STYLES.len() + EXPRESSIONS.len() + BACKGROUNDS.len()];
    v[STYLES.iter().position(|&s| s == prompt.style).unwrap()] = 1.0;
    v[STYLES.len()
        + EXPRESSIONS
            .iter()
            .position(|&e| e == prompt.expression)
            .unwrap()] = 1.0;
    v[STYLES.len()
        + EXPRESSIONS.len()
        + BACKGROUNDS
            .iter()
            .position(|&b| b == prompt.background)
            .unwrap()] = 1.0;
    v
}

impl PromptClassifier {
    pub fn train(
        samples: &[(Tensor, PromptSpec)],
        steps: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let rows: Vec<&Tensor> = samples.iter().map(|(x, _)| x).collect();
        let x = Tensor::concat_rows(&rows)?;
        let out_dim = STYLES.len() + EXPRESSIONS.len() + BACKGROUNDS.len();
        let mut targets = Tensor::zeros(samples.len(), out_dim);
        for (i, (_, prompt)) in samples.iter().enumerate() {
            for (j, v) in prompt_one_hot(prompt).into_iter().enumerate() {
                targets.set(i, j, v);
            }
        }
        let net = MlpClassifier::train(
            &x,
            &targets,
            vec![STYLES.len(), EXPRESSIONS.len(), BACKGROUNDS.len()],
            steps,
            0.1,
            rng,
        )?;
        Ok(Self { net })
    }

    /// Cosine similarity in `[-1, 1]` between the classifier's normalized
    /// head probabilities and the prompt's normalized one-hot encoding.
    pub fn alignment_score(&self, img: &Image, prompt: &PromptSpec) -> Result<f64> {
        let x = downsample_full(img);
        let probs = self.net.probs(&x)?;
        let p = probs.row(0);
        let t = prompt_one_hot(prompt);
        let dot: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
        let np = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(dot / (np * nt))
    }
}

/// Sanity marker tying an embedder build to the prompt vocabulary width.
pub const _VOCAB_WIDTH_GUARD: usize = D_C;

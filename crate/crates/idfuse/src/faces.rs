//! Procedural face dataset: parametric identities, an analytic renderer,
//! and the fixed prompt-embedding table.
//!
//! Faces are drawn in a canonical coordinate frame and sampled per pixel
//! through the inverse pose transform, so rendering is pure and exactly
//! reproducible. The face-region mask is the rendered face-oval support.

use std::fmt;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imageio::{self, Image, ImageError};
use crate::raster::BoolRaster;
use crate::seeding::derive_rng;
use crate::tensor::{randn, Tensor};

pub const IMAGE_SIDE: usize = 64;
/// Identity parameter count.
pub const N_PARAMS: usize = 12;
/// Two identities must differ by at least this much in at least
/// [`MIN_DIFFERING_PARAMS`] coordinates.
pub const PARAM_MARGIN: f64 = 0.12;
pub const MIN_DIFFERING_PARAMS: usize = 3;
/// Rejection attempts per identity before giving up.
const REJECTION_BUDGET: usize = 20_000;

/// Prompt embedding slots and width.
pub const N_C: usize = 8;
pub const D_C: usize = 32;
/// Pinned seed for the token embedding table; chosen so all pairwise token
/// cosines stay below 0.2 (asserted by a regression test).
const EMBED_TABLE_SEED: u64 = 11;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("need at least 2 identities, got {0}")]
    TooFewIdentities(usize),
    #[error("could not find {wanted} sufficiently separated identities within the rejection budget (got {got})")]
    SeparationBudget { wanted: usize, got: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("pose out of bounds: rotation {rot} rad, translation ({dx}, {dy}) px")]
    PoseOutOfBounds { rot: f64, dx: f64, dy: f64 },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Expression {
    Neutral,
    Smile,
    Cry,
    Anger,
    Laugh,
}

pub const EXPRESSIONS: [Expression; 5] = [
    Expression::Neutral,
    Expression::Smile,
    Expression::Cry,
    Expression::Anger,
    Expression::Laugh,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    Garden,
    Plain,
    Night,
}

pub const BACKGROUNDS: [Background; 3] = [
    Background::Garden,
    Background::Plain,
    Background::Night,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    Photo,
    LineArt,
    Watercolor,
}

pub const STYLES: [Style; 3] = [Style::Photo, Style::LineArt, Style::Watercolor];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub expression: Expression,
    pub background: Background,
    pub style: Style,
}

impl fmt::Display for PromptSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?}-{:?}-{:?}",
            self.expression, self.background, self.style
        )
    }
}

impl PromptSpec {
    pub fn neutral_photo() -> Self {
        Self {
            expression: Expression::Neutral,
            background: Background::Plain,
            style: Style::Photo,
        }
    }

    pub fn sample(rng: &mut impl rand::Rng) -> Self {
        Self {
            expression: EXPRESSIONS[rng.gen_range(0..EXPRESSIONS.len())],
            background: BACKGROUNDS[rng.gen_range(0..BACKGROUNDS.len())],
            style: STYLES[rng.gen_range(0..STYLES.len())],
        }
    }

    /// All 45 prompt combinations in a fixed order.
    pub fn all() -> Vec<PromptSpec> {
        let mut out = Vec::new();
        for &style in &STYLES {
            for &expression in &EXPRESSIONS {
                for &background in &BACKGROUNDS {
                    out.push(PromptSpec {
                        expression,
                        background,
                        style,
                    });
                }
            }
        }
        out
    }
}

/// One procedural identity: 12 bounded parameters, all in `[0, 1]`, mapped to
/// geometry and color ranges inside the renderer.
///
/// Parameter meanings, in order: face oval width, face oval height, skin
/// tone, eye spacing, eye color, eye size, hair length, hair color, mouth
/// width, mouth curvature baseline, eyebrow thickness, nose size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticIdentity {
    pub id: usize,
    pub params: Vec<f64>,
}

impl SyntheticIdentity {
    fn separated_from(&self, other: &SyntheticIdentity) -> bool {
        let differing = self
            .params
            .iter()
            .zip(&other.params)
            .filter(|(a, b)| (*a - *b).abs() >= PARAM_MARGIN)
            .count();
        differing >= MIN_DIFFERING_PARAMS
    }
}

/// Rejection-sample `n` identities whose pairwise parameter vectors differ in
/// at least [`MIN_DIFFERING_PARAMS`] coordinates by [`PARAM_MARGIN`].
pub fn sample_identities(n: usize, rng: &mut impl rand::Rng) -> Result<Vec<SyntheticIdentity>> {
    if n < 2 {
        return Err(DatasetError::TooFewIdentities(n));
    }
    let mut out: Vec<SyntheticIdentity> = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        if attempts >= REJECTION_BUDGET {
            return Err(DatasetError::SeparationBudget {
                wanted: n,
                got: out.len(),
            });
        }
        attempts += 1;
        let cand = SyntheticIdentity {
            id: out.len(),
            params: (0..N_PARAMS).map(|_| rng.gen::<f64>()).collect(),
        };
        if out.iter().all(|prev| cand.separated_from(prev)) {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Small in-plane pose: rotation within 15 degrees, translation within 4 px.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rot: f64,
    pub dx: f64,
    pub dy: f64,
}

pub const MAX_ROT: f64 = 15.0 * std::f64::consts::PI / 180.0;
pub const MAX_SHIFT: f64 = 4.0;

impl Pose {
    pub fn centered() -> Self {
        Self {
            rot: 0.0,
            dx: 0.0,
            dy: 0.0,
        }
    }

    /// Dataset pose jitter: half the hard bounds, so identity stays the
    /// dominant source of pixel variation.
    pub fn sample(rng: &mut impl rand::Rng) -> Self {
        Self {
            rot: rng.gen_range(-MAX_ROT / 2.0..=MAX_ROT / 2.0),
            dx: rng.gen_range(-MAX_SHIFT / 2.0..=MAX_SHIFT / 2.0),
            dy: rng.gen_range(-MAX_SHIFT / 2.0..=MAX_SHIFT / 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rot.abs() > MAX_ROT + 1e-12
            || self.dx.abs() > MAX_SHIFT + 1e-12
            || self.dy.abs() > MAX_SHIFT + 1e-12
        {
            return Err(DatasetError::PoseOutOfBounds {
                rot: self.rot,
                dx: self.dx,
                dy: self.dy,
            });
        }
        Ok(())
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn lerp3(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        lerp(a[0], b[0], t),
        lerp(a[1], b[1], t),
        lerp(a[2], b[2], t),
    ]
}

/// Piecewise-linear sweep through a list of color anchors at `t` in `[0, 1]`.
/// Wider than a two-point lerp, so identities spread across distinct hues
/// instead of a single light-to-dark axis.
fn palette3(anchors: &[[f64; 3]], t: f64) -> [f64; 3] {
    let segs = anchors.len() - 1;
    let scaled = t.clamp(0.0, 1.0) * segs as f64;
    let i = (scaled.floor() as usize).min(segs - 1);
    lerp3(anchors[i], anchors[i + 1], scaled - i as f64)
}

/// Integer hash for deterministic background texture.
fn pixel_hash(x: usize, y: usize, salt: u64) -> u64 {
    let mut h = (x as u64)
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((y as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f))
        .wrapping_add(salt);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

/// Semantic layer per pixel, used for photo coloring and line-art inking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layer {
    Background,
    Hair,
    Skin,
    Nose,
    Sclera,
    Iris,
    Pupil,
    Brow,
    MouthLip,
    MouthOpen,
    Tooth,
    Tear,
}

struct Geometry {
    rx: f64,
    ry: f64,
    skin: [f64; 3],
    eye_dx: f64,
    iris: [f64; 3],
    eye_w: f64,
    eye_h: f64,
    hair_drop: f64,
    hair: [f64; 3],
    mouth_w: f64,
    mouth_curve: f64,
    brow_th: f64,
    brow_slope: f64,
    nose_r: f64,
    open_mouth: bool,
    tears: bool,
}

fn geometry(identity: &SyntheticIdentity, expression: Expression) -> Geometry {
    let p = &identity.params;
    let skin_anchors = [
        [0.97, 0.82, 0.70],
        [0.88, 0.66, 0.46],
        [0.66, 0.50, 0.30],
        [0.48, 0.30, 0.22],
        [0.30, 0.18, 0.12],
    ];
    let hair_anchors = [
        [0.08, 0.06, 0.05],
        [0.35, 0.12, 0.06],
        [0.62, 0.22, 0.10],
        [0.85, 0.68, 0.25],
        [0.92, 0.90, 0.86],
    ];
    let iris_anchors = [
        [0.15, 0.30, 0.70],
        [0.20, 0.55, 0.55],
        [0.30, 0.55, 0.18],
        [0.48, 0.30, 0.12],
    ];
    let eye_curve = match expression {
        Expression::Neutral => 0.0,
        Expression::Smile => -0.35,
        Expression::Cry => 0.40,
        Expression::Anger => 0.15,
        Expression::Laugh => -0.55,
    };
    let eye_h_mod = match expression {
        Expression::Neutral | Expression::Smile => 1.0,
        Expression::Cry => 0.65,
        Expression::Anger => 0.8,
        Expression::Laugh => 0.7,
    };
    let brow_slope = match expression {
        Expression::Neutral => 0.0,
        Expression::Smile => -0.05,
        Expression::Cry => -0.30,
        Expression::Anger => 0.40,
        Expression::Laugh => -0.12,
    };
    Geometry {
        rx: lerp(0.50, 0.70, p[0]),
        ry: lerp(0.62, 0.82, p[1]),
        skin: palette3(&skin_anchors, p[2]),
        eye_dx: lerp(0.18, 0.32, p[3]),
        iris: palette3(&iris_anchors, p[4]),
        eye_w: lerp(0.08, 0.13, p[5]),
        eye_h: lerp(0.05, 0.08, p[5]) * eye_h_mod,
        hair_drop: lerp(-0.25, 0.55, p[6]),
        hair: palette3(&hair_anchors, p[7]),
        mouth_w: lerp(0.16, 0.32, p[8]),
        mouth_curve: lerp(-0.20, 0.20, p[9]) + eye_curve,
        brow_th: lerp(0.020, 0.045, p[10]),
        brow_slope,
        nose_r: lerp(0.035, 0.070, p[11]),
        open_mouth: expression == Expression::Laugh,
        tears: expression == Expression::Cry,
    }
}

/// Layer classification at canonical coordinates `(cu, cv)`; `cv` grows
/// downward, chin at positive `cv`.
fn classify(g: &Geometry, cu: f64, cv: f64) -> Layer {
    let oval = (cu / g.rx).powi(2) + (cv / g.ry).powi(2);
    let in_face = oval <= 1.0;
    let hair_oval = (cu / (g.rx * 1.18)).powi(2) + ((cv + 0.06) / (g.ry * 1.16)).powi(2);
    let in_hair_shell = hair_oval <= 1.0 && !in_face && cv < g.hair_drop;
    let in_fringe = in_face && cv < -0.62 * g.ry;

    if in_face && !in_fringe {
        let eye_y = -0.16;
        // eyes
        for side in [-1.0, 1.0] {
            let ex = cu - side * g.eye_dx;
            let ey = cv - eye_y;
            let s = (ex / g.eye_w).powi(2) + (ey / g.eye_h).powi(2);
            if s <= 1.0 {
                let iris = (ex / (g.eye_w * 0.45)).powi(2) + (ey / (g.eye_h * 0.75)).powi(2);
                if iris <= 0.2 {
                    return Layer::Pupil;
                }
                if iris <= 1.0 {
                    return Layer::Iris;
                }
                return Layer::Sclera;
            }
            // eyebrow: slanted band above the eye
            let brow_y = eye_y - 0.14 + side.signum() * 0.0; // symmetric baseline
            let slant = g.brow_slope * side * ex;
            if ex.abs() <= g.eye_w * 1.5 && (cv - (brow_y + slant)).abs() <= g.brow_th {
                return Layer::Brow;
            }
            // tears: vertical streaks from the lower lid
            if g.tears && ex.abs() <= 0.025 && cv > eye_y + g.eye_h && cv < eye_y + 0.45 {
                return Layer::Tear;
            }
        }
        // mouth
        let mouth_y = 0.45;
        if g.open_mouth {
            let m = (cu / g.mouth_w).powi(2) + ((cv - mouth_y) / 0.11).powi(2);
            if m <= 1.0 {
                if cv < mouth_y - 0.03 {
                    return Layer::Tooth;
                }
                return Layer::MouthOpen;
            }
        } else if cu.abs() <= g.mouth_w {
            let center = mouth_y + g.mouth_curve * ((cu / g.mouth_w).powi(2) - 0.5);
            if (cv - center).abs() <= 0.030 {
                return Layer::MouthLip;
            }
        }
        // nose
        if (cu / g.nose_r).powi(2) + ((cv - 0.12) / (g.nose_r * 1.5)).powi(2) <= 1.0 {
            return Layer::Nose;
        }
        return Layer::Skin;
    }
    if in_fringe || in_hair_shell {
        return Layer::Hair;
    }
    Layer::Background
}

fn background_color(bg: Background, x: usize, y: usize, side: usize) -> [f64; 3] {
    match bg {
        Background::Plain => [0.80, 0.82, 0.85],
        Background::Garden => {
            let t = y as f64 / side as f64;
            let mut c = [0.35, lerp(0.75, 0.50, t), 0.30];
            // sparse deterministic flowers on an 8px lattice
            let (cx, cy) = (x / 8, y / 8);
            let h = pixel_hash(cx, cy, 17);
            if h % 5 == 0 {
                let fx = (cx * 8 + 4) as f64;
                let fy = (cy * 8 + 4) as f64;
                let d2 = (x as f64 - fx).powi(2) + (y as f64 - fy).powi(2);
                if d2 <= 4.0 {
                    c = if h % 2 == 0 {
                        [0.90, 0.25, 0.30]
                    } else {
                        [0.95, 0.85, 0.25]
                    };
                }
            }
            c
        }
        Background::Night => {
            if pixel_hash(x, y, 23) % 97 == 0 {
                [0.95, 0.95, 0.90]
            } else {
                [0.05, 0.06, 0.16]
            }
        }
    }
}

fn layer_color(layer: Layer, g: &Geometry, bg: Background, x: usize, y: usize, side: usize) -> [f64; 3] {
    match layer {
        Layer::Background => background_color(bg, x, y, side),
        Layer::Hair => g.hair,
        Layer::Skin => g.skin,
        Layer::Nose => [g.skin[0] * 0.85, g.skin[1] * 0.82, g.skin[2] * 0.80],
        Layer::Sclera => [0.96, 0.96, 0.94],
        Layer::Iris => g.iris,
        Layer::Pupil => [0.05, 0.05, 0.05],
        Layer::Brow => [0.10, 0.07, 0.05],
        Layer::MouthLip => [0.75, 0.25, 0.28],
        Layer::MouthOpen => [0.45, 0.10, 0.12],
        Layer::Tooth => [0.95, 0.95, 0.92],
        Layer::Tear => [0.55, 0.75, 0.95],
    }
}

/// Render one face. Deterministic in all inputs; the returned mask is the
/// pose-transformed face-oval support.
pub fn render(
    identity: &SyntheticIdentity,
    prompt: &PromptSpec,
    pose: &Pose,
) -> Result<(Image, BoolRaster)> {
    pose.validate()?;
    let g = geometry(identity, prompt.expression);
    let side = IMAGE_SIDE;
    let half = side as f64 / 2.0;
    let (sin, cos) = (-pose.rot).sin_cos();

    let mut layers = vec![Layer::Background; side * side];
    let mut mask = BoolRaster::falses(side, side);
    for y in 0..side {
        for x in 0..side {
            // inverse pose transform into canonical [-1, 1] coordinates
            let px = (x as f64 + 0.5 - half - pose.dx) / half;
            let py = (y as f64 + 0.5 - half - pose.dy) / half;
            let cu = cos * px - sin * py;
            let cv = sin * px + cos * py;
            let layer = classify(&g, cu, cv);
            layers[y * side + x] = layer;
            let oval = (cu / g.rx).powi(2) + (cv / g.ry).powi(2);
            mask.set(y, x, oval <= 1.0);
        }
    }

    let photo = |x: usize, y: usize| layer_color(layers[y * side + x], &g, prompt.background, x, y, side);
    let mut pixels = Tensor::zeros(side * side, 3);
    match prompt.style {
        Style::Photo => {
            for y in 0..side {
                for x in 0..side {
                    let c = photo(x, y);
                    for ch in 0..3 {
                        pixels.set(y * side + x, ch, c[ch]);
                    }
                }
            }
        }
        Style::Watercolor => {
            // 3x3 soften, then wash 35% toward white
            for y in 0..side {
                for x in 0..side {
                    let mut acc = [0.0; 3];
                    let mut n = 0.0;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                            if yy >= 0 && yy < side as i64 && xx >= 0 && xx < side as i64 {
                                let c = photo(xx as usize, yy as usize);
                                for ch in 0..3 {
                                    acc[ch] += c[ch];
                                }
                                n += 1.0;
                            }
                        }
                    }
                    for ch in 0..3 {
                        let v = lerp(acc[ch] / n, 1.0, 0.35);
                        pixels.set(y * side + x, ch, v);
                    }
                }
            }
        }
        Style::LineArt => {
            // ink layer boundaries on the figure, flat paper inside it, and a
            // half-washed background so the scene stays recognizable
            for y in 0..side {
                for x in 0..side {
                    let here = layers[y * side + x];
                    let mut ink = false;
                    for (dy, dx) in [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)] {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if yy < 0 || yy >= side as i64 || xx < 0 || xx >= side as i64 {
                            continue;
                        }
                        if layers[yy as usize * side + xx as usize] != here {
                            ink = true;
                            break;
                        }
                    }
                    let c = if ink {
                        [0.12, 0.12, 0.12]
                    } else if here == Layer::Background {
                        let b = background_color(prompt.background, x, y, side);
                        [
                            lerp(b[0], 1.0, 0.5),
                            lerp(b[1], 1.0, 0.5),
                            lerp(b[2], 1.0, 0.5),
                        ]
                    } else {
                        [0.97, 0.97, 0.95]
                    };
                    for ch in 0..3 {
                        pixels.set(y * side + x, ch, c[ch]);
                    }
                }
            }
        }
    }
    Ok((Image::new(side, pixels)?, mask))
}

/// Token order in the fixed embedding table.
fn token_index(prompt_slot: usize, prompt: &PromptSpec) -> usize {
    match prompt_slot {
        0 => STYLES.iter().position(|&s| s == prompt.style).unwrap(),
        1 => {
            3 + EXPRESSIONS
                .iter()
                .position(|&e| e == prompt.expression)
                .unwrap()
        }
        2 => {
            8 + BACKGROUNDS
                .iter()
                .position(|&b| b == prompt.background)
                .unwrap()
        }
        _ => PAD_TOKEN,
    }
}

const PAD_TOKEN: usize = 11;
const VOCAB: usize = 12;

/// The frozen token embedding table, `[12 x D_C]`: 3 styles, 5 expressions,
/// 3 backgrounds, 1 pad. Random rows are Gram-Schmidt orthogonalized and
/// rescaled to norm `sqrt(D_C)`, so distinct tokens are exactly orthogonal.
pub fn embedding_table() -> Tensor {
    let mut rng = derive_rng(EMBED_TABLE_SEED, "prompt-embedding-table", 0);
    let raw = randn(VOCAB, D_C, 1.0, &mut rng);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(VOCAB);
    for i in 0..VOCAB {
        let mut v: Vec<f64> = raw.row(i).to_vec();
        for prev in &rows {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in v.iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm > 1e-9, "degenerate embedding row");
        for x in v.iter_mut() {
            *x /= norm;
        }
        rows.push(v);
    }
    let scale = (D_C as f64).sqrt();
    let data = rows.into_iter().flatten().map(|x| x * scale).collect();
    Tensor::new(VOCAB, D_C, data).expect("length by construction")
}

/// Fixed deterministic prompt embedding, `[N_C x D_C]`:
/// style, expression, background, then pad rows.
pub fn embed_prompt(prompt: &PromptSpec) -> Tensor {
    let table = embedding_table();
    let mut out = Tensor::zeros(N_C, D_C);
    for slot in 0..N_C {
        let tok = token_index(slot, prompt);
        for j in 0..D_C {
            out.set(slot, j, table.at(tok, j));
        }
    }
    out
}

/// The unconditional branch's null condition: every slot is the pad token.
pub fn null_prompt_embedding() -> Tensor {
    let table = embedding_table();
    let mut out = Tensor::zeros(N_C, D_C);
    for slot in 0..N_C {
        for j in 0..D_C {
            out.set(slot, j, table.at(PAD_TOKEN, j));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Eval,
}

/// One dataset record; paths are relative to the dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub identity: usize,
    pub prompt: PromptSpec,
    pub pose: Pose,
    pub split: Split,
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const IDENTITIES_NAME: &str = "identities.json";
/// Held-out fraction of identities (by id, disjoint from training).
pub const EVAL_FRACTION: f64 = 0.2;

/// Generate the dataset on disk: images, masks, identity table, manifest.
pub fn make_dataset(
    dir: &Path,
    n_identities: usize,
    renders_per_identity: usize,
    seed: u64,
) -> Result<Vec<ManifestRow>> {
    let identities = sample_identities(n_identities, &mut derive_rng(seed, "identities", 0))?;
    let n_eval = ((n_identities as f64) * EVAL_FRACTION).round() as usize;
    let n_train = n_identities - n_eval;

    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let id_path = dir.join(IDENTITIES_NAME);
    let id_json = serde_json::to_string_pretty(&identities).expect("serializable");
    std::fs::write(&id_path, id_json).map_err(|e| io_err(&id_path, e))?;

    let mut rows = Vec::with_capacity(n_identities * renders_per_identity);
    for identity in &identities {
        for r in 0..renders_per_identity {
            let item = (identity.id * renders_per_identity + r) as u64;
            let mut rng = derive_rng(seed, "render", item);
            let prompt = if r == 0 {
                // guarantee one canonical reference render per identity
                PromptSpec::neutral_photo()
            } else {
                PromptSpec::sample(&mut rng)
            };
            let pose = if r == 0 {
                Pose::centered()
            } else {
                Pose::sample(&mut rng)
            };
            let (image, mask) = render(identity, &prompt, &pose)?;
            let image_rel = PathBuf::from(format!("images/id{:03}_r{:02}.png", identity.id, r));
            let mask_rel = PathBuf::from(format!("masks/id{:03}_r{:02}.png", identity.id, r));
            imageio::write_rgb_png(&dir.join(&image_rel), &image)?;
            imageio::write_mask_png(&dir.join(&mask_rel), &mask)?;
            rows.push(ManifestRow {
                image: image_rel,
                mask: mask_rel,
                identity: identity.id,
                prompt,
                pose,
                split: if identity.id < n_train {
                    Split::Train
                } else {
                    Split::Eval
                },
            });
        }
    }

    let manifest_path = dir.join(MANIFEST_NAME);
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?,
    );
    for row in &rows {
        let line = serde_json::to_string(row).expect("serializable");
        writeln!(file, "{line}").map_err(|e| io_err(&manifest_path, e))?;
    }
    Ok(rows)
}

pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = dir.join(MANIFEST_NAME);
    let file = std::fs::File::open(&path).map_err(|e| io_err(&path, e))?;
    let mut rows = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(&line).map_err(|e| DatasetError::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_identities(dir: &Path) -> Result<Vec<SyntheticIdentity>> {
    let path = dir.join(IDENTITIES_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Manifest {
        line: 0,
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_identities(n: usize, seed: u64) -> Vec<SyntheticIdentity> {
        sample_identities(n, &mut derive_rng(seed, "identities", 0)).unwrap()
    }

    #[test]
    fn identities_are_pairwise_separated() {
        let ids = test_identities(30, 1);
        for a in &ids {
            assert_eq!(a.params.len(), N_PARAMS);
            assert!(a.params.iter().all(|&p| (0.0..=1.0).contains(&p)));
            for b in &ids {
                if a.id != b.id {
                    assert!(a.separated_from(b), "{} vs {}", a.id, b.id);
                }
            }
        }
    }

    #[test]
    fn render_is_deterministic() {
        let ids = test_identities(2, 2);
        let prompt = PromptSpec {
            expression: Expression::Smile,
            background: Background::Garden,
            style: Style::Photo,
        };
        let pose = Pose {
            rot: 0.1,
            dx: 2.0,
            dy: -1.0,
        };
        let (a, ma) = render(&ids[0], &prompt, &pose).unwrap();
        let (b, mb) = render(&ids[0], &prompt, &pose).unwrap();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert!(ma.any());
    }

    #[test]
    fn expressions_differ_only_inside_the_face_mask() {
        let ids = test_identities(2, 3);
        let pose = Pose::centered();
        let base = PromptSpec::neutral_photo();
        for expr in [Expression::Smile, Expression::Cry, Expression::Anger, Expression::Laugh] {
            let p = PromptSpec {
                expression: expr,
                ..base
            };
            let (a, mask) = render(&ids[0], &base, &pose).unwrap();
            let (b, _) = render(&ids[0], &p, &pose).unwrap();
            let mut changed_outside = 0;
            let mut changed_inside = 0;
            for y in 0..IMAGE_SIDE {
                for x in 0..IMAGE_SIDE {
                    let differs = (0..3).any(|c| (a.at(y, x, c) - b.at(y, x, c)).abs() > 1e-12);
                    if differs {
                        if mask.get(y, x) {
                            changed_inside += 1;
                        } else {
                            changed_outside += 1;
                        }
                    }
                }
            }
            assert!(changed_inside > 0, "{expr:?} changed nothing");
            assert_eq!(changed_outside, 0, "{expr:?} leaked outside the mask");
        }
    }

    #[test]
    fn identities_differ_measurably_in_pixel_space() {
        let ids = test_identities(6, 4);
        let prompt = PromptSpec::neutral_photo();
        let pose = Pose::centered();
        let renders: Vec<Image> = ids
            .iter()
            .map(|i| render(i, &prompt, &pose).unwrap().0)
            .collect();
        for i in 0..renders.len() {
            for j in i + 1..renders.len() {
                let d = renders[i]
                    .pixels
                    .sub(&renders[j].pixels)
                    .unwrap()
                    .frobenius_norm();
                assert!(d > 1.0, "identities {i} and {j} too close: {d}");
            }
        }
    }

    #[test]
    fn prompt_embedding_shape_and_determinism() {
        for prompt in PromptSpec::all() {
            let e = embed_prompt(&prompt);
            assert_eq!(e.shape(), (N_C, D_C));
            assert_eq!(e, embed_prompt(&prompt));
        }
        assert_eq!(null_prompt_embedding().shape(), (N_C, D_C));
    }

    #[test]
    fn token_embeddings_have_low_pairwise_cosine() {
        let table = embedding_table();
        for i in 0..VOCAB {
            for j in i + 1..VOCAB {
                let (a, b) = (table.row(i), table.row(j));
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                let cos = dot / (na * nb);
                assert!(cos.abs() < 0.2, "tokens {i},{j}: cosine {cos}");
            }
        }
    }

    #[test]
    fn dataset_roundtrip_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let rows = make_dataset(dir.path(), 5, 3, 7).unwrap();
        assert_eq!(rows.len(), 15);
        let train: std::collections::BTreeSet<_> = rows
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.identity)
            .collect();
        let eval: std::collections::BTreeSet<_> = rows
            .iter()
            .filter(|r| r.split == Split::Eval)
            .map(|r| r.identity)
            .collect();
        assert_eq!(train.len(), 4);
        assert_eq!(eval.len(), 1);
        assert!(train.is_disjoint(&eval));
        for row in &rows {
            let img = imageio::read_rgb_png(&dir.path().join(&row.image)).unwrap();
            assert_eq!(img.side, IMAGE_SIDE);
            let mask = imageio::read_mask_png(&dir.path().join(&row.mask)).unwrap();
            assert!(mask.any());
        }
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded, rows);
        assert_eq!(load_identities(dir.path()).unwrap().len(), 5);
    }

    #[test]
    fn dataset_regeneration_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let r1 = make_dataset(d1.path(), 3, 2, 9).unwrap();
        let r2 = make_dataset(d2.path(), 3, 2, 9).unwrap();
        assert_eq!(r1, r2);
        for row in &r1 {
            let a = std::fs::read(d1.path().join(&row.image)).unwrap();
            let b = std::fs::read(d2.path().join(&row.image)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn nearest_centroid_pixel_classifier_separates_identities() {
        // the dataset must be easy: raw-pixel nearest centroid should get
        // held-out renders right almost always
        let ids = test_identities(8, 5);
        let mut centroids = Vec::new();
        let mut held_out = Vec::new();
        for (k, identity) in ids.iter().enumerate() {
            let mut sum = Tensor::zeros(IMAGE_SIDE * IMAGE_SIDE, 3);
            let mut count = 0.0;
            for r in 0..10u64 {
                let mut rng = derive_rng(6, "nc-test", (k * 10) as u64 + r);
                let prompt = PromptSpec {
                    expression: EXPRESSIONS[rng.gen_range(0..EXPRESSIONS.len())],
                    background: Background::Plain,
                    style: Style::Photo,
                };
                let pose = Pose::sample(&mut rng);
                let (img, _) = render(identity, &prompt, &pose).unwrap();
                if r < 7 {
                    sum = sum.add(&img.pixels).unwrap();
                    count += 1.0;
                } else {
                    held_out.push((k, img));
                }
            }
            centroids.push(sum.scale(1.0 / count));
        }
        let mut correct = 0;
        for (truth, img) in &held_out {
            let mut best = (f64::INFINITY, usize::MAX);
            for (k, c) in centroids.iter().enumerate() {
                let d = img.pixels.sub(c).unwrap().frobenius_norm();
                if d < best.0 {
                    best = (d, k);
                }
            }
            if best.1 == *truth {
                correct += 1;
            }
        }
        let acc = correct as f64 / held_out.len() as f64;
        assert!(acc > 0.9, "nearest-centroid accuracy {acc}");
    }

    use rand::Rng as _;
}

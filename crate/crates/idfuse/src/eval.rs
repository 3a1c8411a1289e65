//! Evaluation harness: generates images per (held-out identity, prompt) cell
//! and scores identity cosine distance, masked PSNR/SSIM against the
//! reference render, and prompt alignment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::RunConfig;
use crate::diffusion::{sample, DiffusionError, NoiseSchedule, SamplerConfig};
use crate::faces::{
    self, embed_prompt, null_prompt_embedding, Background, DatasetError, PromptSpec, Split, Style,
    EXPRESSIONS,
};
use crate::imageio::{self, Image, ImageError};
use crate::metrics::{
    cosine_distance, crop_resize_masked, downsample_full, psnr, ssim, IdentityEmbedder,
    MetricsError, PromptClassifier,
};
use crate::raster::BoolRaster;
use crate::seeding::derive_rng;
use crate::tensor::Tensor;
use crate::unet::{Conditioning, UNetError, UNetState};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    UNet(#[from] UNetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("no held-out identities in the dataset")]
    NoEvalIdentities,
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn io_err(path: &Path, source: std::io::Error) -> EvalError {
    EvalError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Deterministic evaluation prompt list. The first five cover every
/// expression as a plain photo; further entries walk the remaining
/// combinations in a fixed order.
pub fn eval_prompt_list(n: usize) -> Vec<PromptSpec> {
    let mut out: Vec<PromptSpec> = EXPRESSIONS
        .iter()
        .map(|&expression| PromptSpec {
            expression,
            background: Background::Plain,
            style: Style::Photo,
        })
        .collect();
    for p in PromptSpec::all() {
        if !out.contains(&p) {
            out.push(p);
        }
    }
    out.truncate(n);
    out
}

/// Fixed fixture seed: the evaluation embedders must not move when the run
/// seed changes.
pub const EMBEDDER_FIXTURE_SEED: u64 = 97;

/// Train both evaluation networks from ground-truth renders.
pub fn train_embedders(
    dataset_dir: &Path,
    cfg: &RunConfig,
) -> Result<(IdentityEmbedder, PromptClassifier)> {
    let rows = faces::load_manifest(dataset_dir)?;
    let mut class_of: BTreeMap<usize, usize> = BTreeMap::new();
    for row in &rows {
        let next = class_of.len();
        class_of.entry(row.identity).or_insert(next);
    }
    let mut id_samples = Vec::with_capacity(rows.len());
    let mut prompt_samples = Vec::with_capacity(rows.len());
    for row in &rows {
        let image = imageio::read_rgb_png(&dataset_dir.join(&row.image))?;
        let mask = imageio::read_mask_png(&dataset_dir.join(&row.mask))?;
        id_samples.push((crop_resize_masked(&image, &mask)?, class_of[&row.identity]));
        prompt_samples.push((downsample_full(&image), row.prompt));
    }
    let identity = IdentityEmbedder::train(
        &id_samples,
        class_of.len(),
        cfg.identity_embedder_steps,
        &mut derive_rng(EMBEDDER_FIXTURE_SEED, "identity-embedder", 0),
    )?;
    let prompt = PromptClassifier::train(
        &prompt_samples,
        cfg.prompt_classifier_steps,
        &mut derive_rng(EMBEDDER_FIXTURE_SEED, "prompt-classifier", 0),
    )?;
    Ok((identity, prompt))
}

/// Load the frozen embedder fixture, training and saving it on first use.
/// Returns the fixture checkpoint's hash alongside the networks.
pub fn embedder_fixture(
    dataset_dir: &Path,
    cfg: &RunConfig,
) -> Result<(IdentityEmbedder, PromptClassifier, String)> {
    let path = cfg.checkpoint_dir.join("embedders.ckpt");
    if !path.exists() {
        let (identity, prompt) = train_embedders(dataset_dir, cfg)?;
        checkpoint::save_embedders(&path, &identity, &prompt)?;
    }
    let (identity, prompt) = checkpoint::load_embedders(&path)?;
    let hash = checkpoint::sha256_file(&path)?;
    Ok((identity, prompt, hash))
}

/// One canonical reference render per held-out identity.
pub struct EvalReference {
    pub identity: usize,
    /// Reference image after a latent-space round trip, so comparisons see
    /// the same representable palette the generator does.
    pub image: Image,
    pub mask: BoolRaster,
    pub latent: Tensor,
}

pub fn load_eval_references(dataset_dir: &Path, limit: usize) -> Result<Vec<EvalReference>> {
    let rows = faces::load_manifest(dataset_dir)?;
    let mut out: Vec<EvalReference> = Vec::new();
    for row in rows.iter().filter(|r| r.split == Split::Eval) {
        if out.iter().any(|r| r.identity == row.identity) {
            continue;
        }
        let image = imageio::read_rgb_png(&dataset_dir.join(&row.image))?;
        let mask = imageio::read_mask_png(&dataset_dir.join(&row.mask))?;
        let latent = imageio::encode_latent(&image)?;
        out.push(EvalReference {
            identity: row.identity,
            image: imageio::pyramid_roundtrip(&image)?,
            mask,
            latent,
        });
        if out.len() == limit {
            break;
        }
    }
    if out.is_empty() {
        return Err(EvalError::NoEvalIdentities);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub identity: usize,
    pub prompt: PromptSpec,
    pub sample_index: usize,
    pub cosine_distance: f64,
    /// `None` when the masked regions are identical (the +infinity
    /// sentinel), excluded from means.
    pub psnr_face: Option<f64>,
    pub ssim_face: f64,
    pub prompt_alignment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub records: usize,
    pub cosine_distance_mean: f64,
    pub cosine_distance_std: f64,
    pub psnr_face_mean: f64,
    pub ssim_face_mean: f64,
    pub prompt_alignment_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub checkpoint_hash: String,
    pub with_refs: bool,
    pub guidance: f64,
    pub summary: Summary,
    pub records: Vec<SampleRecord>,
}

fn summarize(records: &[SampleRecord]) -> Summary {
    let n = records.len().max(1) as f64;
    let cos_mean = records.iter().map(|r| r.cosine_distance).sum::<f64>() / n;
    let cos_var = records
        .iter()
        .map(|r| (r.cosine_distance - cos_mean).powi(2))
        .sum::<f64>()
        / n;
    let finite_psnr: Vec<f64> = records.iter().filter_map(|r| r.psnr_face).collect();
    Summary {
        records: records.len(),
        cosine_distance_mean: cos_mean,
        cosine_distance_std: cos_var.sqrt(),
        psnr_face_mean: finite_psnr.iter().sum::<f64>() / finite_psnr.len().max(1) as f64,
        ssim_face_mean: records.iter().map(|r| r.ssim_face).sum::<f64>() / n,
        prompt_alignment_mean: records.iter().map(|r| r.prompt_alignment).sum::<f64>() / n,
    }
}

impl MetricsReport {
    pub fn json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable report");
        s.push('\n');
        s
    }

    pub fn csv_string(&self) -> String {
        let mut s = String::from(
            "identity,style,expression,background,sample,cosine_distance,psnr_face,ssim_face,prompt_alignment\n",
        );
        for r in &self.records {
            let psnr = r
                .psnr_face
                .map(|v| v.to_string())
                .unwrap_or_else(|| "inf".into());
            s.push_str(&format!(
                "{},{:?},{:?},{:?},{},{},{},{},{}\n",
                r.identity,
                r.prompt.style,
                r.prompt.expression,
                r.prompt.background,
                r.sample_index,
                r.cosine_distance,
                psnr,
                r.ssim_face,
                r.prompt_alignment
            ));
        }
        s
    }

    fn file_stem(&self, tag: &str) -> String {
        format!(
            "eval_{tag}_seed{}_{}",
            self.seed,
            &self.checkpoint_hash[..self.checkpoint_hash.len().min(12)]
        )
    }

    /// Write the JSON report and CSV summary; names carry seed and
    /// checkpoint hash.
    pub fn write(&self, dir: &Path, tag: &str) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let json = dir.join(format!("{}.json", self.file_stem(tag)));
        let csv = dir.join(format!("{}.csv", self.file_stem(tag)));
        std::fs::write(&json, self.json_string()).map_err(|e| io_err(&json, e))?;
        std::fs::write(&csv, self.csv_string()).map_err(|e| io_err(&csv, e))?;
        Ok((json, csv))
    }
}

/// Side-by-side comparison of two reports, CSV formatted.
pub fn delta_table(label_a: &str, a: &MetricsReport, label_b: &str, b: &MetricsReport) -> String {
    let rows: [(&str, f64, f64); 4] = [
        (
            "cosine_distance_mean",
            a.summary.cosine_distance_mean,
            b.summary.cosine_distance_mean,
        ),
        ("psnr_face_mean", a.summary.psnr_face_mean, b.summary.psnr_face_mean),
        ("ssim_face_mean", a.summary.ssim_face_mean, b.summary.ssim_face_mean),
        (
            "prompt_alignment_mean",
            a.summary.prompt_alignment_mean,
            b.summary.prompt_alignment_mean,
        ),
    ];
    let mut s = format!("metric,{label_a},{label_b},delta\n");
    for (name, va, vb) in rows {
        s.push_str(&format!("{name},{va},{vb},{}\n", vb - va));
    }
    s
}

/// Generate and score every (identity, prompt, sample) cell. Deterministic
/// given (state, embedders, seed): cell RNG streams are derived from the
/// cell index, so paired runs over the same grid see identical noise.
pub fn evaluate_run(
    state: &UNetState,
    identity: &IdentityEmbedder,
    prompt_net: &PromptClassifier,
    dataset_dir: &Path,
    cfg: &RunConfig,
    seed: u64,
    with_refs: bool,
    checkpoint_hash: String,
) -> Result<MetricsReport> {
    let references = load_eval_references(dataset_dir, cfg.eval_identities)?;
    let prompts = eval_prompt_list(cfg.eval_prompts);
    let schedule = NoiseSchedule::linear(cfg.unet.timesteps);
    let sampler = SamplerConfig {
        steps: cfg.sample_steps,
        guidance: cfg.guidance,
    };
    let null_text = null_prompt_embedding();

    let mut records = Vec::new();
    let mut cell = 0u64;
    for reference in &references {
        for prompt in &prompts {
            let text = embed_prompt(prompt);
            for sample_index in 0..cfg.eval_samples {
                let mut rng = derive_rng(seed, "eval-sample", cell);
                cell += 1;
                let refs: Vec<Tensor> = if with_refs {
                    vec![reference.latent.clone()]
                } else {
                    Vec::new()
                };
                let identity_of = vec![0usize; refs.len()];
                let cond = Conditioning {
                    text: &text,
                    refs: &refs,
                    identity_of: &identity_of,
                    masks: None,
                    strict_mask: false,
                };
                let latent = sample(state, &schedule, &cond, &null_text, sampler, &mut rng)?;
                let generated =
                    imageio::decode_latent(&latent, cfg.unet.base_resolution)?;
                let emb_gen = identity.embedding(&generated, &reference.mask)?;
                let emb_ref = identity.embedding(&reference.image, &reference.mask)?;
                let psnr_v = psnr(&generated, &reference.image, &reference.mask)?;
                records.push(SampleRecord {
                    identity: reference.identity,
                    prompt: *prompt,
                    sample_index,
                    cosine_distance: cosine_distance(&emb_gen, &emb_ref)?,
                    psnr_face: psnr_v.is_finite().then_some(psnr_v),
                    ssim_face: ssim(&generated, &reference.image, &reference.mask)?,
                    prompt_alignment: prompt_net.alignment_score(&generated, prompt)?,
                });
            }
        }
    }
    Ok(MetricsReport {
        seed,
        checkpoint_hash,
        with_refs,
        guidance: cfg.guidance,
        summary: summarize(&records),
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::faces::{make_dataset, Expression};
    use crate::unet::UNetConfig;

    #[test]
    fn prompt_list_is_deterministic_and_covers_expressions() {
        let five = eval_prompt_list(5);
        assert_eq!(five.len(), 5);
        for e in EXPRESSIONS {
            assert!(five.iter().any(|p| p.expression == e));
        }
        assert_eq!(five, eval_prompt_list(7)[..5]);
        assert_eq!(eval_prompt_list(50).len(), 45 + 5 - 5);
    }

    fn tiny_cfg(root: &Path) -> RunConfig {
        RunConfig {
            dataset_dir: root.join("data"),
            checkpoint_dir: root.join("ckpt"),
            out_dir: root.join("out"),
            unet: UNetConfig {
                base_resolution: 16,
                base_channels: 6,
                latent_channels: 3,
                scales: vec![8],
                channels: vec![8],
                attn_layers: vec![1],
                d_c: 32,
                d_time: 8,
                timesteps: 40,
                alpha_mult: 1.0,
            },
            n_identities: 5,
            renders_per_identity: 3,
            eval_identities: 1,
            eval_prompts: 2,
            eval_samples: 1,
            sample_steps: 4,
            identity_embedder_steps: 30,
            prompt_classifier_steps: 30,
            ..RunConfig::default()
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_counts_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        make_dataset(
            &cfg.dataset_dir,
            cfg.n_identities,
            cfg.renders_per_identity,
            cfg.seed,
        )
        .unwrap();
        let (identity, prompt, hash) = embedder_fixture(&cfg.dataset_dir, &cfg).unwrap();
        let state = UNetState::init(cfg.unet.clone(), &mut derive_rng(3, "init", 0)).unwrap();
        let run = |s: u64| {
            evaluate_run(
                &state,
                &identity,
                &prompt,
                &cfg.dataset_dir,
                &cfg,
                s,
                true,
                hash.clone(),
            )
            .unwrap()
        };
        let a = run(11);
        let b = run(11);
        assert_eq!(a.json_string(), b.json_string());
        assert_eq!(
            a.records.len(),
            cfg.eval_identities * cfg.eval_prompts * cfg.eval_samples
        );
        let c = run(12);
        assert_ne!(a.json_string(), c.json_string());
        // summary stays honest about its inputs
        assert_eq!(a.summary.records, a.records.len());
        for r in &a.records {
            assert!(r.ssim_face >= -1.0 && r.ssim_face <= 1.0);
            assert!(r.prompt_alignment >= -1.0 && r.prompt_alignment <= 1.0);
            assert!(r.cosine_distance >= 0.0 && r.cosine_distance <= 2.0);
        }
    }

    #[test]
    fn report_files_and_delta_table() {
        let dir = tempfile::tempdir().unwrap();
        let report = MetricsReport {
            seed: 4,
            checkpoint_hash: "abcdef0123456789".into(),
            with_refs: false,
            guidance: 1.0,
            summary: summarize(&[]),
            records: vec![SampleRecord {
                identity: 80,
                prompt: PromptSpec {
                    expression: Expression::Smile,
                    background: Background::Plain,
                    style: Style::Photo,
                },
                sample_index: 0,
                cosine_distance: 0.5,
                psnr_face: None,
                ssim_face: 0.9,
                prompt_alignment: 0.7,
            }],
        };
        let (json, csv) = report.write(dir.path(), "base").unwrap();
        assert!(json.file_name().unwrap().to_str().unwrap().contains("seed4"));
        assert!(json.file_name().unwrap().to_str().unwrap().contains("abcdef012345"));
        let csv_text = std::fs::read_to_string(csv).unwrap();
        assert!(csv_text.contains("80,Photo,Smile,Plain,0,0.5,inf,0.9,0.7"));
        let table = delta_table("base", &report, "fused", &report);
        assert!(table.starts_with("metric,base,fused,delta\n"));
        assert_eq!(table.lines().count(), 5);
    }

    #[test]
    fn embedder_fixture_is_stable_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg(dir.path());
        make_dataset(
            &cfg.dataset_dir,
            cfg.n_identities,
            cfg.renders_per_identity,
            cfg.seed,
        )
        .unwrap();
        let (_, _, h1) = embedder_fixture(&cfg.dataset_dir, &cfg).unwrap();
        let (_, _, h2) = embedder_fixture(&cfg.dataset_dir, &cfg).unwrap();
        assert_eq!(h1, h2);
    }
}

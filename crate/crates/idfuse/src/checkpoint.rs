//! Checkpoint serialization: named f64 tensors behind a JSON header.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
//! header (kind, metadata, tensor index), then each tensor's data as
//! little-endian f64 in index order. Everything is written deterministically
//! so identical states produce identical bytes.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::metrics::{IdentityEmbedder, MlpClassifier, PromptClassifier};
use crate::tensor::Tensor;
use crate::unet::{ParamKind, UNetConfig, UNetError, UNetState};

const MAGIC: &[u8; 8] = b"IDFUSECK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint: {message}")]
    Format { path: String, message: String },
    #[error("checkpoint kind is {got}, expected {want}")]
    WrongKind { got: String, want: String },
    #[error("checkpoint tensor set mismatch: {0}")]
    TensorSet(String),
    #[error(transparent)]
    UNet(#[from] UNetError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorIndexEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorIndexEntry>,
}

/// A named-tensor archive plus free-form JSON metadata.
#[derive(Debug, Clone)]
pub struct TensorArchive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn save(path: &Path, archive: &TensorArchive) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let header = Header {
        kind: archive.kind.clone(),
        meta: archive.meta.clone(),
        tensors: archive
            .tensors
            .iter()
            .map(|(name, t)| TensorIndexEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header).expect("serializable header");
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let res: std::io::Result<()> = (|| {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        w.write_all(&header_bytes)?;
        for (_, t) in &archive.tensors {
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| io_err(path, e))
}

pub fn load(path: &Path) -> Result<TensorArchive> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4).map_err(|e| io_err(path, e))?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8).map_err(|e| io_err(path, e))?;
    let hlen = u64::from_le_bytes(l8) as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes).map_err(|e| io_err(path, e))?;
    let header: Header = serde_json::from_slice(&hbytes)
        .map_err(|e| format_err(path, format!("bad header: {e}")))?;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n = entry.rows * entry.cols;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes).map_err(|e| io_err(path, e))?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let t = Tensor::new(entry.rows, entry.cols, data)
            .map_err(|e| format_err(path, e.to_string()))?;
        tensors.push((entry.name.clone(), t));
    }
    Ok(TensorArchive {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of named tensors: names, shapes and exact f64 bytes.
pub fn sha256_tensors<'a>(tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update((t.rows() as u64).to_le_bytes());
        h.update((t.cols() as u64).to_le_bytes());
        for &v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

const UNET_KIND: &str = "unet";
const EMBEDDERS_KIND: &str = "eval-embedders";

/// Digest of the frozen (base) trunk only; the fused training phase asserts
/// this never moves.
pub fn base_trunk_checksum(state: &UNetState) -> String {
    let mut parts: Vec<(String, Tensor)> = Vec::new();
    state.visit_params(|name, t, kind| {
        if kind == ParamKind::Base {
            parts.push((name.to_string(), t.clone()));
        }
    });
    sha256_tensors(parts.iter().map(|(n, t)| (n.as_str(), t)))
}

pub fn save_unet(path: &Path, state: &UNetState) -> Result<()> {
    let mut tensors = Vec::new();
    state.visit_params(|name, t, _| tensors.push((name.to_string(), t.clone())));
    save(
        path,
        &TensorArchive {
            kind: UNET_KIND.into(),
            meta: serde_json::to_value(&state.config).expect("serializable config"),
            tensors,
        },
    )
}

pub fn load_unet(path: &Path) -> Result<UNetState> {
    let archive = load(path)?;
    if archive.kind != UNET_KIND {
        return Err(CheckpointError::WrongKind {
            got: archive.kind,
            want: UNET_KIND.into(),
        });
    }
    let config: UNetConfig = serde_json::from_value(archive.meta.clone())
        .map_err(|e| format_err(path, format!("bad config: {e}")))?;
    // shape the state with a throwaway seed, then overwrite every tensor
    let mut state = UNetState::init(config, &mut crate::seeding::derive_rng(0, "load", 0))?;
    let by_name: std::collections::BTreeMap<&str, &Tensor> = archive
        .tensors
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    let mut missing = Vec::new();
    let mut wrong_shape = Vec::new();
    let mut seen = 0usize;
    state.visit_params_mut(|name, t, _| match by_name.get(name) {
        Some(src) if src.shape() == t.shape() => {
            *t = (*src).clone();
            seen += 1;
        }
        Some(src) => wrong_shape.push(format!(
            "{name}: file {}x{}, model {}x{}",
            src.rows(),
            src.cols(),
            t.rows(),
            t.cols()
        )),
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() || !wrong_shape.is_empty() || seen != archive.tensors.len() {
        return Err(CheckpointError::TensorSet(format!(
            "missing {missing:?}, wrong shapes {wrong_shape:?}, matched {seen} of {}",
            archive.tensors.len()
        )));
    }
    Ok(state)
}

fn classifier_tensors(prefix: &str, net: &MlpClassifier, out: &mut Vec<(String, Tensor)>) {
    out.push((format!("{prefix}.w1"), net.w1.clone()));
    out.push((format!("{prefix}.w2"), net.w2.clone()));
}

pub fn save_embedders(
    path: &Path,
    identity: &IdentityEmbedder,
    prompt: &PromptClassifier,
) -> Result<()> {
    let mut tensors = Vec::new();
    classifier_tensors("identity", &identity.net, &mut tensors);
    tensors.push(("identity.center".into(), identity.center.clone()));
    classifier_tensors("prompt", &prompt.net, &mut tensors);
    save(
        path,
        &TensorArchive {
            kind: EMBEDDERS_KIND.into(),
            meta: serde_json::json!({
                "identity_groups": identity.net.groups,
                "prompt_groups": prompt.net.groups,
            }),
            tensors,
        },
    )
}

pub fn load_embedders(path: &Path) -> Result<(IdentityEmbedder, PromptClassifier)> {
    let archive = load(path)?;
    if archive.kind != EMBEDDERS_KIND {
        return Err(CheckpointError::WrongKind {
            got: archive.kind,
            want: EMBEDDERS_KIND.into(),
        });
    }
    let groups = |key: &str| -> Result<Vec<usize>> {
        serde_json::from_value(archive.meta[key].clone())
            .map_err(|e| format_err(path, format!("bad {key}: {e}")))
    };
    let tensor = |name: &str| -> Result<Tensor> {
        archive
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| CheckpointError::TensorSet(format!("missing {name}")))
    };
    let identity = IdentityEmbedder {
        net: MlpClassifier {
            w1: tensor("identity.w1")?,
            w2: tensor("identity.w2")?,
            groups: groups("identity_groups")?,
        },
        center: tensor("identity.center")?,
    };
    let prompt = PromptClassifier {
        net: MlpClassifier {
            w1: tensor("prompt.w1")?,
            w2: tensor("prompt.w2")?,
            groups: groups("prompt_groups")?,
        },
    };
    Ok((identity, prompt))
}

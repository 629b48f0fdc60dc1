//! Parameter checkpoints.
//!
//! Each tensor file is the magic `PVC1`, a little-endian `u32` header
//! length, a UTF-8 JSON header `{"kind","d_in","d_out","frozen","dtype"}`,
//! then the weights (`d_in x d_out`, row-major) followed by the bias
//! (`d_out` values) for kinds that carry one. Values are little-endian
//! `f64` so a saved model reloads bit-identically.
//!
//! A model checkpoint is a directory with `config.json` and one tensor file
//! per trainable tensor group.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FusionHead, ModelConfig, ModelParams};
use crate::projection::{CoordProjector, LinearProjector};
use crate::prototypes::SlotWeights;

pub const TENSOR_MAGIC: &[u8; 4] = b"PVC1";

const CONFIG_FILE: &str = "config.json";
const QUESTION_FILE: &str = "question_projector.pvc";
const COORD_FILE: &str = "coord_projector.pvc";
const SLOT_FILE: &str = "slot_weights.pvc";
const HEAD_FILE: &str = "head.pvc";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub kind: String,
    pub d_in: usize,
    pub d_out: usize,
    pub frozen: bool,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub header: TensorHeader,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl TensorRecord {
    pub fn projector(kind: &str, p: &LinearProjector) -> Self {
        TensorRecord {
            header: TensorHeader {
                kind: kind.to_string(),
                d_in: p.d_in(),
                d_out: p.d_out(),
                frozen: p.is_frozen(),
                dtype: "f64".into(),
            },
            weights: p.weights().iter().copied().collect(),
            bias: Some(p.bias().to_vec()),
        }
    }

    pub fn to_projector(&self) -> Result<LinearProjector> {
        let h = &self.header;
        let w = Array2::from_shape_vec((h.d_in, h.d_out), self.weights.clone())
            .map_err(|e| Error::format("payload length", e.to_string()))?;
        let b = Array1::from(
            self.bias
                .clone()
                .ok_or_else(|| Error::format("kind", "projector record without bias"))?,
        );
        let p = LinearProjector::new(w, b)?;
        Ok(if h.frozen { p.freeze_copy() } else { p })
    }
}

fn has_bias(kind: &str) -> bool {
    kind != "slot_weights"
}

pub fn encode_tensor(rec: &TensorRecord) -> Vec<u8> {
    let header = serde_json::to_vec(&rec.header).expect("header serialises");
    let mut out = Vec::with_capacity(8 + header.len() + 8 * rec.weights.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in rec.weights.iter().chain(rec.bias.iter().flatten()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<TensorRecord> {
    if bytes.get(..4) != Some(TENSOR_MAGIC.as_slice()) {
        return Err(Error::format("magic", "expected \"PVC1\""));
    }
    let len_bytes = bytes
        .get(4..8)
        .ok_or_else(|| Error::format("header length", "truncated"))?;
    let hlen = u32::from_le_bytes(len_bytes.try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes
        .get(8..8usize.saturating_add(hlen))
        .ok_or_else(|| Error::format("header length", "header runs past end of file"))?;
    let header: TensorHeader =
        serde_json::from_slice(header_bytes).map_err(|e| Error::format("header", e.to_string()))?;
    if header.dtype != "f64" {
        return Err(Error::format(
            "dtype",
            format!("unsupported dtype {:?}", header.dtype),
        ));
    }
    let n_weights = header
        .d_in
        .checked_mul(header.d_out)
        .ok_or_else(|| Error::format("d_in", "shape overflows"))?;
    let n_bias = if has_bias(&header.kind) {
        header.d_out
    } else {
        0
    };
    let payload = &bytes[8 + hlen..];
    let expected = n_weights
        .checked_add(n_bias)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::format("payload length", "shape overflows"))?;
    if payload.len() != expected {
        return Err(Error::format(
            "payload length",
            format!("expected {expected} bytes, found {}", payload.len()),
        ));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::format("values", "non-finite parameter"));
    }
    let (w, b) = values.split_at(n_weights);
    Ok(TensorRecord {
        header,
        weights: w.to_vec(),
        bias: (n_bias > 0).then(|| b.to_vec()),
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn expect_kind(rec: &TensorRecord, kind: &str) -> Result<()> {
    if rec.header.kind != kind {
        return Err(Error::format(
            "kind",
            format!("expected {kind:?}, found {:?}", rec.header.kind),
        ));
    }
    Ok(())
}

pub fn save_model(params: &ModelParams, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut config = serde_json::to_string_pretty(&params.config).expect("config serialises");
    config.push('\n');
    write(&dir.join(CONFIG_FILE), config.as_bytes())?;

    let q = TensorRecord::projector("linear", &params.question_projector);
    write(&dir.join(QUESTION_FILE), &encode_tensor(&q))?;

    let c = TensorRecord {
        header: TensorHeader {
            kind: "coord".into(),
            d_in: 4,
            d_out: params.coord_projector.d_out(),
            frozen: false,
            dtype: "f64".into(),
        },
        weights: params.coord_projector.weights().iter().copied().collect(),
        bias: Some(params.coord_projector.bias().to_vec()),
    };
    write(&dir.join(COORD_FILE), &encode_tensor(&c))?;

    let raw = params.slot_weights.raw();
    let s = TensorRecord {
        header: TensorHeader {
            kind: "slot_weights".into(),
            d_in: raw.nrows(),
            d_out: raw.ncols(),
            frozen: false,
            dtype: "f64".into(),
        },
        weights: raw.iter().copied().collect(),
        bias: None,
    };
    write(&dir.join(SLOT_FILE), &encode_tensor(&s))?;

    let h = TensorRecord {
        header: TensorHeader {
            kind: "head".into(),
            d_in: params.head.weights.len(),
            d_out: 1,
            frozen: false,
            dtype: "f64".into(),
        },
        weights: params.head.weights.to_vec(),
        bias: Some(vec![params.head.bias]),
    };
    write(&dir.join(HEAD_FILE), &encode_tensor(&h))
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelParams> {
    let dir = dir.as_ref();
    let config: ModelConfig = serde_json::from_slice(&read(&dir.join(CONFIG_FILE))?)
        .map_err(|e| Error::format("config", e.to_string()))?;
    config.validate()?;

    let q = decode_tensor(&read(&dir.join(QUESTION_FILE))?)?;
    expect_kind(&q, "linear")?;
    let question_projector = q.to_projector()?;

    let c = decode_tensor(&read(&dir.join(COORD_FILE))?)?;
    expect_kind(&c, "coord")?;
    let cp = c.to_projector()?;
    let coord_projector = CoordProjector::new(cp.weights().clone(), cp.bias().clone())?;

    let s = decode_tensor(&read(&dir.join(SLOT_FILE))?)?;
    expect_kind(&s, "slot_weights")?;
    let raw = Array2::from_shape_vec((s.header.d_in, s.header.d_out), s.weights)
        .map_err(|e| Error::format("payload length", e.to_string()))?;
    let slot_weights = SlotWeights::new(raw, config.slot_normalization)?;

    let h = decode_tensor(&read(&dir.join(HEAD_FILE))?)?;
    expect_kind(&h, "head")?;
    let head = FusionHead {
        weights: Array1::from(h.weights),
        bias: h
            .bias
            .as_ref()
            .and_then(|b| b.first().copied())
            .unwrap_or(0.0),
    };

    let params = ModelParams {
        question_projector,
        coord_projector,
        slot_weights,
        head,
        config,
    };
    let cfg = &params.config;
    if params.question_projector.d_in() != cfg.d_text
        || params.question_projector.d_out() != cfg.d
        || params.coord_projector.d_out() != cfg.d
        || params.head.weights.len() != cfg.fused_dim()
        || params.slot_weights.k() != cfg.k
    {
        return Err(Error::Config(
            "checkpoint tensors disagree with config.json".into(),
        ));
    }
    Ok(params)
}

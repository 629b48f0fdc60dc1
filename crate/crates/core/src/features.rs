//! Feature and annotation files.
//!
//! Two little-endian binary containers are used:
//!
//! * `PVF1`: image features. Magic `PVF1`, five `u32` fields
//!   `[N, D, rows, cols, patch_size]`, then `(N + 1) * D` `f32` values with the
//!   CLS row first and patches row-major.
//! * `PVT1`: token embeddings. Magic `PVT1`, two `u32` fields `[L, D_text]`,
//!   then `L * D_text` `f32` values.
//!
//! Datasets are described by a JSON manifest whose paths are resolved
//! relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, GridSpec};
use crate::model::{AnswerInput, Pathway};

pub const FEATURE_MAGIC: &[u8; 4] = b"PVF1";
pub const TOKEN_MAGIC: &[u8; 4] = b"PVT1";

/// CLS token plus one feature vector per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    cls: Array1<f32>,
    patches: Array2<f32>,
    grid: GridSpec,
}

impl FeatureMap {
    pub fn new(cls: Array1<f32>, patches: Array2<f32>, grid: GridSpec) -> Result<Self> {
        if patches.nrows() != grid.num_patches() {
            return Err(Error::format(
                "N",
                format!(
                    "{} patch rows for a {}x{} grid",
                    patches.nrows(),
                    grid.rows(),
                    grid.cols()
                ),
            ));
        }
        if cls.len() != patches.ncols() || cls.is_empty() {
            return Err(Error::format(
                "D",
                format!(
                    "cls has {} dims, patches have {}",
                    cls.len(),
                    patches.ncols()
                ),
            ));
        }
        if let Some(pos) = cls
            .iter()
            .chain(patches.iter())
            .position(|v| !v.is_finite())
        {
            return Err(Error::format(
                "values",
                format!("non-finite value at offset {pos}"),
            ));
        }
        Ok(FeatureMap { cls, patches, grid })
    }

    pub fn cls(&self) -> ArrayView1<'_, f32> {
        self.cls.view()
    }

    pub fn patches(&self) -> &Array2<f32> {
        &self.patches
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.cls.len()
    }

    pub fn num_patches(&self) -> usize {
        self.patches.nrows()
    }
}

/// Patch features after CLS subtraction, in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhancedFeatures {
    pub patches: Array2<f64>,
}

impl EnhancedFeatures {
    pub fn num_patches(&self) -> usize {
        self.patches.nrows()
    }

    pub fn dim(&self) -> usize {
        self.patches.ncols()
    }
}

/// Subtracts the CLS token from every patch.
pub fn enhance(f: &FeatureMap) -> EnhancedFeatures {
    let cls = f.cls.mapv(f64::from);
    let mut patches = f.patches.mapv(f64::from);
    for mut row in patches.rows_mut() {
        row -= &cls;
    }
    EnhancedFeatures { patches }
}

/// Per-token text embeddings, `L x D_text`, `L >= 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbeddings {
    tokens: Array2<f32>,
}

impl TokenEmbeddings {
    pub fn new(tokens: Array2<f32>) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(Error::format("L", "token sequence is empty"));
        }
        if tokens.ncols() == 0 {
            return Err(Error::format("D_text", "token dimension is zero"));
        }
        if let Some(pos) = tokens.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                "values",
                format!("non-finite value at offset {pos}"),
            ));
        }
        Ok(TokenEmbeddings { tokens })
    }

    pub fn tokens(&self) -> &Array2<f32> {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::format(field, "header truncated"))?;
        self.pos = end;
        Ok(u32::from_le_bytes(chunk.try_into().expect("4-byte slice")))
    }

    fn floats(&mut self, count: usize) -> Result<Vec<f32>> {
        let need = count
            .checked_mul(4)
            .ok_or_else(|| Error::format("payload length", "declared size overflows"))?;
        let rest = &self.bytes[self.pos..];
        if rest.len() != need {
            return Err(Error::format(
                "payload length",
                format!("expected {need} bytes, found {}", rest.len()),
            ));
        }
        let values: Vec<f32> = rest
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(
                "values",
                format!("non-finite value at offset {pos}"),
            ));
        }
        Ok(values)
    }
}

fn check_magic(bytes: &[u8], magic: &[u8; 4]) -> Result<()> {
    match bytes.get(..4) {
        Some(m) if m == magic => Ok(()),
        _ => Err(Error::format(
            "magic",
            format!("expected {:?}", String::from_utf8_lossy(magic)),
        )),
    }
}

pub fn encode_features(f: &FeatureMap) -> Vec<u8> {
    let g = f.grid;
    let n = f.num_patches();
    let d = f.dim();
    let mut out = Vec::with_capacity(24 + (n + 1) * d * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [
        n as u32,
        d as u32,
        g.rows() as u32,
        g.cols() as u32,
        g.patch_size(),
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in f.cls.iter().chain(f.patches.iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureMap> {
    check_magic(bytes, FEATURE_MAGIC)?;
    let mut r = Reader { bytes, pos: 4 };
    let n = r.u32("N")? as usize;
    let d = r.u32("D")? as usize;
    let rows = r.u32("rows")?;
    let cols = r.u32("cols")?;
    let patch_size = r.u32("patch_size")?;
    if n == 0 {
        return Err(Error::format("N", "no patches"));
    }
    if d == 0 {
        return Err(Error::format("D", "zero feature dimension"));
    }
    if (rows as u64) * (cols as u64) != n as u64 {
        return Err(Error::format(
            "rows",
            format!("{rows}x{cols} grid does not hold N={n}"),
        ));
    }
    let grid = GridSpec::from_patches(rows, cols, patch_size)
        .map_err(|e| Error::format("patch_size", e.to_string()))?;
    let count = (n as u64 + 1)
        .checked_mul(d as u64)
        .filter(|c| *c <= usize::MAX as u64 / 4)
        .ok_or_else(|| Error::format("payload length", "declared size overflows"))?;
    let values = r.floats(count as usize)?;
    let cls = Array1::from(values[..d].to_vec());
    let patches = Array2::from_shape_vec((n, d), values[d..].to_vec())
        .map_err(|e| Error::format("payload length", e.to_string()))?;
    FeatureMap::new(cls, patches, grid)
}

pub fn encode_tokens(t: &TokenEmbeddings) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + t.tokens.len() * 4);
    out.extend_from_slice(TOKEN_MAGIC);
    out.extend_from_slice(&(t.len() as u32).to_le_bytes());
    out.extend_from_slice(&(t.dim() as u32).to_le_bytes());
    for v in t.tokens.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tokens(bytes: &[u8]) -> Result<TokenEmbeddings> {
    check_magic(bytes, TOKEN_MAGIC)?;
    let mut r = Reader { bytes, pos: 4 };
    let l = r.u32("L")? as usize;
    let d = r.u32("D_text")? as usize;
    if l == 0 {
        return Err(Error::format("L", "token sequence is empty"));
    }
    if d == 0 {
        return Err(Error::format("D_text", "token dimension is zero"));
    }
    let count = (l as u64)
        .checked_mul(d as u64)
        .filter(|c| *c <= usize::MAX as u64 / 4)
        .ok_or_else(|| Error::format("payload length", "declared size overflows"))?;
    let values = r.floats(count as usize)?;
    let tokens = Array2::from_shape_vec((l, d), values)
        .map_err(|e| Error::format("payload length", e.to_string()))?;
    TokenEmbeddings::new(tokens)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_features(&read(path.as_ref())?)
}

pub fn save_features(f: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_features(f))
}

pub fn load_tokens(path: impl AsRef<Path>) -> Result<TokenEmbeddings> {
    decode_tokens(&read(path.as_ref())?)
}

pub fn save_tokens(t: &TokenEmbeddings, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_tokens(t))
}

/// One multiple-choice question over one image.
#[derive(Debug, Clone)]
pub struct QAExample {
    pub qa_id: String,
    pub image_id: String,
    pub features: FeatureMap,
    pub question: TokenEmbeddings,
    pub candidates: Vec<AnswerInput>,
    pub correct_index: usize,
    pub evidence_box: Option<BBox>,
}

impl QAExample {
    /// Checks the cross-field invariants of an example.
    pub fn validate(&self) -> Result<()> {
        let id = &self.qa_id;
        let Some(first) = self.candidates.first() else {
            return Err(Error::validation(id, "no candidates"));
        };
        if self.correct_index >= self.candidates.len() {
            return Err(Error::validation(
                id,
                format!(
                    "correct_index {} out of range for {} candidates",
                    self.correct_index,
                    self.candidates.len()
                ),
            ));
        }
        let pathway = first.pathway();
        if self.candidates.iter().any(|c| c.pathway() != pathway) {
            return Err(Error::validation(
                id,
                "candidates mix coordinate and text pathways",
            ));
        }
        let grid = self.features.grid();
        for c in &self.candidates {
            match c {
                AnswerInput::Coord(b) if !grid.contains(b) => {
                    return Err(Error::validation(
                        id,
                        "candidate box lies outside the image",
                    ));
                }
                AnswerInput::Text(t) if t.dim() != self.question.dim() => {
                    return Err(Error::validation(
                        id,
                        format!(
                            "candidate text dimension {} differs from question dimension {}",
                            t.dim(),
                            self.question.dim()
                        ),
                    ));
                }
                _ => {}
            }
        }
        if let Some(b) = &self.evidence_box {
            if !grid.contains(b) {
                return Err(Error::validation(id, "evidence box lies outside the image"));
            }
        }
        Ok(())
    }

    pub fn pathway(&self) -> Pathway {
        self.candidates[0].pathway()
    }
}

/// Dataset manifest as stored on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Coordinate convention of the original annotations, when converted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_convention: Option<String>,
    pub examples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qa_id: Option<String>,
    pub image_id: String,
    pub features_path: String,
    pub question_path: String,
    pub candidates: Vec<CandidateEntry>,
    pub correct_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_box: Option<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum CandidateEntry {
    Coord {
        #[serde(rename = "box")]
        bbox: BBox,
    },
    Text {
        path: String,
    },
}

impl ManifestEntry {
    /// `qa_id` if present, otherwise `<image_id>_<position>`.
    pub fn resolved_id(&self, position: usize) -> String {
        self.qa_id
            .clone()
            .unwrap_or_else(|| format!("{}_{position}", self.image_id))
    }
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    serde_json::from_str(text).map_err(|e| Error::format("manifest", e.to_string()))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = read(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|e| Error::format("manifest", format!("not UTF-8: {e}")))?;
    parse_manifest(text)
}

pub fn save_manifest(m: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(m).expect("manifest serialises");
    text.push('\n');
    write(path.as_ref(), text.as_bytes())
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    base.join(rel)
}

/// Loads every example referenced by a manifest, in manifest order.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Vec<QAExample>> {
    let path = manifest_path.as_ref();
    let manifest = load_manifest(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    materialize(&manifest, base)
}

/// Resolves and validates the entries of an already-parsed manifest.
pub fn materialize(manifest: &Manifest, base: &Path) -> Result<Vec<QAExample>> {
    manifest
        .examples
        .iter()
        .enumerate()
        .map(|(i, entry)| load_entry(entry, i, base))
        .collect()
}

fn load_entry(entry: &ManifestEntry, position: usize, base: &Path) -> Result<QAExample> {
    let id = entry.resolved_id(position);
    let wrap = |e: Error| Error::validation(&id, e.to_string());
    let features = load_features(resolve(base, &entry.features_path)).map_err(wrap)?;
    let question = load_tokens(resolve(base, &entry.question_path)).map_err(wrap)?;
    let candidates = entry
        .candidates
        .iter()
        .map(|c| match c {
            CandidateEntry::Coord { bbox } => Ok(AnswerInput::Coord(*bbox)),
            CandidateEntry::Text { path } => load_tokens(resolve(base, path))
                .map(AnswerInput::Text)
                .map_err(wrap),
        })
        .collect::<Result<Vec<_>>>()?;
    let example = QAExample {
        qa_id: id,
        image_id: entry.image_id.clone(),
        features,
        question,
        candidates,
        correct_index: entry.correct_index,
        evidence_box: entry.evidence_box,
    };
    example.validate()?;
    Ok(example)
}

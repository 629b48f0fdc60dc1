//! Planted-evidence synthetic datasets.
//!
//! Every example gets a random unit direction `u`. Two adjacent patches (the
//! evidence) carry `2u` plus small noise after CLS subtraction; every other
//! patch is isotropic Gaussian. Question tokens are built so that the
//! seeded initial question projector maps each of them close to `u`, which
//! makes the prototypes point at the evidence from the first step. Text
//! candidates are built the same way: the correct one maps to `u`, each
//! distractor to its own random direction. The label is therefore
//! recoverable from `pooled ⊙ answer`, which is what the gated head sees.
//!
//! Coordinate-pathway datasets use the evidence box and three disjoint
//! two-patch boxes as candidates. They exercise the loaders and the coord
//! projector but carry no per-example signal a linear head could learn.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    save_features, save_manifest, save_tokens, CandidateEntry, FeatureMap, Manifest, ManifestEntry,
    QAExample, TokenEmbeddings,
};
use crate::geometry::{patch_to_box, pixel_count_iou, union_box_region_iou, BBox, PatchIndex};
use crate::matching::top_k_patches;
use crate::model::{match_question, AnswerInput, ModelConfig, ModelParams, Pathway};
use crate::projection::LinearProjector;

/// Fraction of examples whose planted patches must show up in the top-k.
pub const MIN_RECOVERY: f64 = 0.95;

const EVIDENCE_GAIN: f64 = 2.0;
const EVIDENCE_NOISE: f64 = 0.15;
const TOKEN_NOISE: f64 = 0.1;
const N_CANDIDATES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub model: ModelConfig,
    pub n_train: usize,
    pub n_test: usize,
    pub pathway: Pathway,
    pub theta: f64,
}

#[derive(Debug, Clone)]
pub struct SynthExample {
    pub example: QAExample,
    pub planted: Vec<PatchIndex>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: Vec<SynthExample>,
    pub test: Vec<SynthExample>,
}

/// Maps target vectors in the projected space back to token embeddings.
struct Lifter {
    w: DMatrix<f64>,
    gram: Cholesky<f64, Dyn>,
    bias: DVector<f64>,
}

impl Lifter {
    fn new(p: &LinearProjector) -> Result<Self> {
        let (d_in, d_out) = (p.d_in(), p.d_out());
        let w = DMatrix::from_row_slice(
            d_in,
            d_out,
            p.weights()
                .as_slice()
                .expect("projector weights are contiguous"),
        );
        let gram = Cholesky::new(w.transpose() * &w).ok_or_else(|| {
            Error::Config(format!(
                "synthetic questions need a full-rank projector; d_text = {d_in} < d = {d_out}?"
            ))
        })?;
        Ok(Lifter {
            w,
            gram,
            bias: DVector::from_column_slice(p.bias().as_slice().expect("contiguous")),
        })
    }

    /// A token `e` with `e · W + b = target`, plus a random component in the
    /// null space of `Wᵀ`.
    fn lift<R: Rng + ?Sized>(&self, target: &Array1<f64>, rng: &mut R) -> Vec<f32> {
        let t = DVector::from_iterator(target.len(), target.iter().copied()) - &self.bias;
        let exact = &self.w * self.gram.solve(&t);
        let g = DVector::from_fn(self.w.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let null = &g - &self.w * self.gram.solve(&(self.w.transpose() * &g));
        (exact + null).iter().map(|v| *v as f32).collect()
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.sample(StandardNormal))
}

fn unit<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Array1<f64> {
    loop {
        let v = gaussian(rng, n);
        let norm = v.dot(&v).sqrt();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

fn tokens_toward<R: Rng + ?Sized>(
    lifter: &Lifter,
    dir: &Array1<f64>,
    len: usize,
    d_text: usize,
    rng: &mut R,
) -> Result<TokenEmbeddings> {
    let mut rows = Vec::with_capacity(len * d_text);
    for _ in 0..len {
        let target = dir + &(gaussian(rng, dir.len()) * TOKEN_NOISE);
        rows.extend(lifter.lift(&target, rng));
    }
    TokenEmbeddings::new(Array2::from_shape_vec((len, d_text), rows).expect("token shape"))
}

/// Two adjacent patches, horizontal or vertical, uniformly placed.
fn domino<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Result<[usize; 2]> {
    let mut options = Vec::new();
    if cols >= 2 {
        options.push((0usize, 1usize));
    }
    if rows >= 2 {
        options.push((1, 0));
    }
    if options.is_empty() {
        return Err(Error::Config(
            "synthetic evidence needs at least two patches".into(),
        ));
    }
    let (dr, dc) = options[rng.random_range(0..options.len())];
    let r = rng.random_range(0..rows - dr);
    let c = rng.random_range(0..cols - dc);
    Ok([r * cols + c, (r + dr) * cols + c + dc])
}

fn evidence_box(cfg: &ModelConfig, planted: &[usize]) -> Result<BBox> {
    let a = patch_to_box(&cfg.grid, PatchIndex(planted[0]))?;
    let b = patch_to_box(&cfg.grid, PatchIndex(planted[1]))?;
    Ok(a.hull(&b))
}

fn generate_one<R: Rng + ?Sized>(
    cfg: &SynthConfig,
    lifter: &Lifter,
    qa_id: String,
    rng: &mut R,
) -> Result<SynthExample> {
    let mc = &cfg.model;
    let (rows, cols) = (mc.grid.rows(), mc.grid.cols());
    let n = rows * cols;
    let u = unit(rng, mc.d);
    let planted = domino(rng, rows, cols)?;

    let cls = gaussian(rng, mc.d);
    let mut patches = Array2::<f32>::zeros((n, mc.d));
    for p in 0..n {
        let enhanced = if planted.contains(&p) {
            &u * EVIDENCE_GAIN + gaussian(rng, mc.d) * EVIDENCE_NOISE
        } else {
            gaussian(rng, mc.d)
        };
        patches
            .row_mut(p)
            .assign(&(enhanced + &cls).mapv(|v| v as f32));
    }
    let features = FeatureMap::new(cls.mapv(|v| v as f32), patches, mc.grid)?;

    let len = rng.random_range(mc.k..=mc.m * mc.k + 4);
    let question = tokens_toward(lifter, &u, len, mc.d_text, rng)?;

    let gt = evidence_box(mc, &planted)?;
    let correct_index = rng.random_range(0..N_CANDIDATES);
    let mut candidates = Vec::with_capacity(N_CANDIDATES);
    for c in 0..N_CANDIDATES {
        let cand = match cfg.pathway {
            Pathway::Text => {
                let dir = if c == correct_index {
                    u.clone()
                } else {
                    unit(rng, mc.d)
                };
                let len = rng.random_range(1..=3);
                AnswerInput::Text(tokens_toward(lifter, &dir, len, mc.d_text, rng)?)
            }
            Pathway::Coord => {
                if c == correct_index {
                    AnswerInput::Coord(gt)
                } else {
                    AnswerInput::Coord(distractor_box(mc, &gt, rng)?)
                }
            }
        };
        candidates.push(cand);
    }

    let example = QAExample {
        image_id: format!("img_{qa_id}"),
        qa_id,
        features,
        question,
        candidates,
        correct_index,
        evidence_box: Some(gt),
    };
    example.validate()?;
    Ok(SynthExample {
        example,
        planted: planted.iter().map(|p| PatchIndex(*p)).collect(),
    })
}

fn distractor_box<R: Rng + ?Sized>(cfg: &ModelConfig, gt: &BBox, rng: &mut R) -> Result<BBox> {
    let (rows, cols) = (cfg.grid.rows(), cfg.grid.cols());
    for _ in 0..1000 {
        let cells = domino(rng, rows, cols)?;
        let b = evidence_box(cfg, &cells)?;
        if b.intersection(gt).is_none() {
            return Ok(b);
        }
    }
    // grid too small for a disjoint pair; fall back to the whole image
    Ok(cfg.grid.full_image())
}

/// Generates train then test examples from one seeded stream.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.model.validate()?;
    let params = ModelParams::init(cfg.model.clone())?;
    let lifter = Lifter::new(&params.question_projector)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed);
    rng.set_stream(1);
    let train = (0..cfg.n_train)
        .map(|i| generate_one(cfg, &lifter, format!("train_{i:04}"), &mut rng))
        .collect::<Result<_>>()?;
    let test = (0..cfg.n_test)
        .map(|i| generate_one(cfg, &lifter, format!("test_{i:04}"), &mut rng))
        .collect::<Result<_>>()?;
    Ok(SynthDataset { train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantRecord {
    pub qa_id: String,
    pub planted: Vec<PatchIndex>,
    pub top_patches: Vec<PatchIndex>,
    pub recovered: bool,
    pub iou_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCheck {
    pub n: usize,
    pub recovered: usize,
    pub recovery_rate: f64,
    pub hits_at_1: usize,
    pub vlas_at_1: Option<f64>,
    pub hits_at_k: usize,
    pub vlas_at_k: Option<f64>,
    pub records: Vec<PlantRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthReport {
    pub seed: u64,
    pub pathway: Pathway,
    pub theta: f64,
    pub k: usize,
    pub min_recovery: f64,
    pub recovery_rate: f64,
    pub train: SplitCheck,
    pub test: SplitCheck,
}

fn check_split(params: &ModelParams, theta: f64, split: &[SynthExample]) -> Result<SplitCheck> {
    let cfg = &params.config;
    let mut records = Vec::with_capacity(split.len());
    let (mut recovered, mut hits1, mut hitsk) = (0, 0, 0);
    for s in split {
        let ex = &s.example;
        let matches = match_question(params, &ex.features, &ex.question)?;
        let top = top_k_patches(&matches, cfg.k)?;
        let found = top.iter().any(|p| s.planted.contains(p));
        let gt = ex.evidence_box.expect("synthetic examples carry evidence");
        let mut ious = Vec::with_capacity(2);
        for kk in [1, cfg.k] {
            let boxes = top
                .iter()
                .take(kk)
                .map(|p| patch_to_box(&cfg.grid, *p))
                .collect::<Result<Vec<_>>>()?;
            let fast = union_box_region_iou(&boxes, &gt)?;
            let slow = pixel_count_iou(&boxes, &gt)?;
            if fast != slow {
                return Err(Error::Invariant(format!(
                    "{}: region IoU {fast} disagrees with pixel count {slow}",
                    ex.qa_id
                )));
            }
            ious.push(fast);
        }
        recovered += usize::from(found);
        hits1 += usize::from(ious[0] >= theta);
        hitsk += usize::from(ious[1] >= theta);
        records.push(PlantRecord {
            qa_id: ex.qa_id.clone(),
            planted: s.planted.clone(),
            top_patches: top,
            recovered: found,
            iou_at_1: ious[0],
        });
    }
    let n = split.len();
    let rate = |h: usize| (n > 0).then(|| h as f64 / n as f64);
    Ok(SplitCheck {
        n,
        recovered,
        recovery_rate: rate(recovered).unwrap_or(1.0),
        hits_at_1: hits1,
        vlas_at_1: rate(hits1),
        hits_at_k: hitsk,
        vlas_at_k: rate(hitsk),
        records,
    })
}

/// Runs the initial-parameter matcher over every example and verifies that
/// planted patches are recovered often enough.
pub fn self_check(cfg: &SynthConfig, data: &SynthDataset) -> Result<SynthReport> {
    let params = ModelParams::init(cfg.model.clone())?;
    let train = check_split(&params, cfg.theta, &data.train)?;
    let test = check_split(&params, cfg.theta, &data.test)?;
    let n = train.n + test.n;
    let recovery_rate = if n == 0 {
        1.0
    } else {
        (train.recovered + test.recovered) as f64 / n as f64
    };
    let report = SynthReport {
        seed: cfg.model.seed,
        pathway: cfg.pathway,
        theta: cfg.theta,
        k: cfg.model.k,
        min_recovery: MIN_RECOVERY,
        recovery_rate,
        train,
        test,
    };
    if recovery_rate < MIN_RECOVERY {
        return Err(Error::Invariant(format!(
            "planted patches recovered in only {:.3} of examples (need {MIN_RECOVERY})",
            recovery_rate
        )));
    }
    Ok(report)
}

fn write_split(split: &[SynthExample], out: &Path) -> Result<Manifest> {
    let mut entries = Vec::with_capacity(split.len());
    for s in split {
        let ex = &s.example;
        let features_path = format!("features/{}.pvf", ex.qa_id);
        let question_path = format!("questions/{}.pvt", ex.qa_id);
        save_features(&ex.features, out.join(&features_path))?;
        save_tokens(&ex.question, out.join(&question_path))?;
        let mut candidates = Vec::with_capacity(ex.candidates.len());
        for (c, cand) in ex.candidates.iter().enumerate() {
            candidates.push(match cand {
                AnswerInput::Coord(b) => CandidateEntry::Coord { bbox: *b },
                AnswerInput::Text(t) => {
                    let path = format!("answers/{}_{c}.pvt", ex.qa_id);
                    save_tokens(t, out.join(&path))?;
                    CandidateEntry::Text { path }
                }
            });
        }
        entries.push(ManifestEntry {
            qa_id: Some(ex.qa_id.clone()),
            image_id: ex.image_id.clone(),
            features_path,
            question_path,
            candidates,
            correct_index: ex.correct_index,
            evidence_box: ex.evidence_box,
        });
    }
    Ok(Manifest {
        box_convention: None,
        examples: entries,
    })
}

pub const TRAIN_MANIFEST: &str = "train.json";
pub const TEST_MANIFEST: &str = "test.json";
pub const REPORT_FILE: &str = "synth_report.json";

/// Generates, self-checks and writes a dataset under `out`.
pub fn write_dataset(cfg: &SynthConfig, out: impl AsRef<Path>) -> Result<SynthReport> {
    let out = out.as_ref();
    let data = generate(cfg)?;
    let report = self_check(cfg, &data)?;
    for sub in ["features", "questions", "answers"] {
        let dir = out.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    save_manifest(&write_split(&data.train, out)?, out.join(TRAIN_MANIFEST))?;
    save_manifest(&write_split(&data.test, out)?, out.join(TEST_MANIFEST))?;
    let mut text = serde_json::to_string_pretty(&report).expect("report serialises");
    text.push('\n');
    let path = out.join(REPORT_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Preset, RunConfig};
    use crate::projection::LinearProjector;

    fn desk(n_train: usize, n_test: usize, pathway: Pathway) -> SynthConfig {
        SynthConfig {
            model: RunConfig::preset(Preset::Desk).model_config(),
            n_train,
            n_test,
            pathway,
            theta: 0.5,
        }
    }

    #[test]
    fn lifted_tokens_hit_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LinearProjector::init(24, 16, &mut rng);
        let lifter = Lifter::new(&p).unwrap();
        let target = unit(&mut rng, 16);
        let e = Array1::from(lifter.lift(&target, &mut rng)).mapv(f64::from);
        let got = p.project(e.view()).unwrap();
        assert!((&got - &target).iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn rank_deficient_projector_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LinearProjector::init(8, 16, &mut rng);
        assert!(Lifter::new(&p).is_err());
    }

    #[test]
    fn deterministic_and_valid() {
        let cfg = desk(5, 3, Pathway::Text);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.train.len(), 5);
        for (x, y) in a
            .train
            .iter()
            .chain(&a.test)
            .zip(b.train.iter().chain(&b.test))
        {
            assert_eq!(x.example.features, y.example.features);
            assert_eq!(x.example.question, y.example.question);
            assert_eq!(x.example.correct_index, y.example.correct_index);
            assert_eq!(x.planted, y.planted);
            let gt = x.example.evidence_box.unwrap();
            assert_eq!(gt.area(), 2 * 16 * 16);
        }
        let report = self_check(&cfg, &a).unwrap();
        assert!(report.recovery_rate >= MIN_RECOVERY);
    }

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let report = write_dataset(&desk(0, 0, Pathway::Text), dir.path()).unwrap();
        assert_eq!(report.recovery_rate, 1.0);
        assert_eq!(report.train.vlas_at_1, None);
        let m = crate::features::load_manifest(dir.path().join(TRAIN_MANIFEST)).unwrap();
        assert!(m.examples.is_empty());
    }

    #[test]
    fn coord_pathway_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&desk(4, 2, Pathway::Coord), dir.path()).unwrap();
        let data = crate::features::load_dataset(dir.path().join(TEST_MANIFEST)).unwrap();
        assert_eq!(data.len(), 2);
        assert!(data.iter().all(|e| e.pathway() == Pathway::Coord));
    }
}

//! Forward pass, loss and analytic gradients of the answer classifier.
//!
//! Pipeline for one example:
//!
//! 1. CLS-subtract the patch features.
//! 2. Project the question tokens and reshape them into `m` prototypes.
//! 3. Greedy-match every prototype against the patches.
//! 4. Pool the matched patches of prototype `i` with softmax weights over
//!    their similarities and scale by the prototype score: `b_i`.
//! 5. Embed each candidate answer (`a_c`): a box through the coordinate
//!    projector, or text through a frozen copy of the question projector,
//!    mean-pooled over tokens.
//! 6. Fuse into an `m·D + D` vector and apply a linear head.
//!
//! In [`FusionMode::Gated`] the image blocks are `b_i ⊙ a_c`; in
//! [`FusionMode::Concat`] they are `b_i` verbatim. With `Concat` the image
//! blocks are identical across candidates and cancel in the softmax, so only
//! `Gated` lets the image influence which candidate wins.
//!
//! Gradients treat the greedy selections as constants and differentiate
//! through the selected similarities only.

use ndarray::{s, Array1, Array2, Array3, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{enhance, EnhancedFeatures, FeatureMap, QAExample, TokenEmbeddings};
use crate::geometry::{BBox, GridSpec};
use crate::matching::{match_all, MatchResult};
use crate::projection::{normalize_box, CoordProjector, LinearProjector};
use crate::prototypes::{
    build_prototypes, softmax, source_token, PrototypeSet, SlotLayout, SlotNormalization,
    SlotWeights,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    /// Grounding: candidates are boxes.
    Coord,
    /// Descriptive QA: candidates are token sequences.
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnswerInput {
    Coord(BBox),
    Text(TokenEmbeddings),
}

impl AnswerInput {
    pub fn pathway(&self) -> Pathway {
        match self {
            AnswerInput::Coord(_) => Pathway::Coord,
            AnswerInput::Text(_) => Pathway::Text,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Gated,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub m: usize,
    pub k: usize,
    pub r: usize,
    pub grid: GridSpec,
    pub d: usize,
    pub d_text: usize,
    pub seed: u64,
    #[serde(default)]
    pub slot_layout: SlotLayout,
    #[serde(default)]
    pub slot_normalization: SlotNormalization,
    #[serde(default)]
    pub fusion: FusionMode,
}

impl ModelConfig {
    pub fn fused_dim(&self) -> usize {
        self.m * self.d + self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 || self.d == 0 || self.d_text == 0 {
            return Err(Error::Config(
                "m, k, d and d_text must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Linear classification layer over the fused vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub weights: Array1<f64>,
    pub bias: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub question_projector: LinearProjector,
    pub coord_projector: CoordProjector,
    pub slot_weights: SlotWeights,
    pub head: FusionHead,
    pub config: ModelConfig,
}

impl ModelParams {
    /// Seeded initialisation. The question projector is drawn first from a
    /// ChaCha8 stream seeded with `config.seed`.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let question_projector = LinearProjector::init(config.d_text, config.d, &mut rng);
        let coord_projector = CoordProjector::init(config.d, &mut rng);
        let fused = config.fused_dim();
        let head_proj = LinearProjector::init(fused, 1, &mut rng);
        let head = FusionHead {
            weights: head_proj.weights().column(0).to_owned(),
            bias: 0.0,
        };
        let slot_weights = SlotWeights::init(
            config.slot_layout,
            config.slot_normalization,
            config.m,
            config.k,
            config.seed,
        )?;
        Ok(ModelParams {
            question_projector,
            coord_projector,
            slot_weights,
            head,
            config,
        })
    }

    /// The answer-side projector: a frozen copy of the question projector.
    pub fn answer_projector(&self) -> LinearProjector {
        self.question_projector.freeze_copy()
    }

    pub fn tensor(&self, t: ParamTensor) -> &[f64] {
        let slice = match t {
            ParamTensor::QuestionWeights => self.question_projector.weights().as_slice(),
            ParamTensor::QuestionBias => self.question_projector.bias().as_slice(),
            ParamTensor::CoordWeights => self.coord_projector.weights().as_slice(),
            ParamTensor::CoordBias => self.coord_projector.bias().as_slice(),
            ParamTensor::SlotWeights => self.slot_weights.raw().as_slice(),
            ParamTensor::HeadWeights => self.head.weights.as_slice(),
            ParamTensor::HeadBias => Some(std::slice::from_ref(&self.head.bias)),
        };
        slice.expect("parameters are stored contiguously")
    }

    pub fn tensor_mut(&mut self, t: ParamTensor) -> Result<&mut [f64]> {
        let slice = match t {
            ParamTensor::QuestionWeights => self.question_projector.params_mut()?.0.as_slice_mut(),
            ParamTensor::QuestionBias => self.question_projector.params_mut()?.1.as_slice_mut(),
            ParamTensor::CoordWeights => self.coord_projector.params_mut().0.as_slice_mut(),
            ParamTensor::CoordBias => self.coord_projector.params_mut().1.as_slice_mut(),
            ParamTensor::SlotWeights => self.slot_weights.raw_mut().as_slice_mut(),
            ParamTensor::HeadWeights => self.head.weights.as_slice_mut(),
            ParamTensor::HeadBias => Some(std::slice::from_mut(&mut self.head.bias)),
        };
        Ok(slice.expect("parameters are stored contiguously"))
    }
}

/// Trainable tensors, in a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamTensor {
    QuestionWeights,
    QuestionBias,
    CoordWeights,
    CoordBias,
    SlotWeights,
    HeadWeights,
    HeadBias,
}

impl ParamTensor {
    pub const ALL: [ParamTensor; 7] = [
        ParamTensor::QuestionWeights,
        ParamTensor::QuestionBias,
        ParamTensor::CoordWeights,
        ParamTensor::CoordBias,
        ParamTensor::SlotWeights,
        ParamTensor::HeadWeights,
        ParamTensor::HeadBias,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamTensor::QuestionWeights => "question_projector.weights",
            ParamTensor::QuestionBias => "question_projector.bias",
            ParamTensor::CoordWeights => "coord_projector.weights",
            ParamTensor::CoordBias => "coord_projector.bias",
            ParamTensor::SlotWeights => "slot_weights",
            ParamTensor::HeadWeights => "head.weights",
            ParamTensor::HeadBias => "head.bias",
        }
    }
}

/// Gradients of the loss, one per [`ParamTensor`]. The frozen answer
/// projector has no entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub question_weights: Array2<f64>,
    pub question_bias: Array1<f64>,
    pub coord_weights: Array2<f64>,
    pub coord_bias: Array1<f64>,
    pub slot_weights: Array2<f64>,
    pub head_weights: Array1<f64>,
    pub head_bias: f64,
}

impl Gradients {
    pub fn zeros_like(p: &ModelParams) -> Self {
        Gradients {
            question_weights: Array2::zeros(p.question_projector.weights().dim()),
            question_bias: Array1::zeros(p.question_projector.d_out()),
            coord_weights: Array2::zeros(p.coord_projector.weights().dim()),
            coord_bias: Array1::zeros(p.coord_projector.d_out()),
            slot_weights: Array2::zeros(p.slot_weights.raw().dim()),
            head_weights: Array1::zeros(p.head.weights.len()),
            head_bias: 0.0,
        }
    }

    pub fn tensor(&self, t: ParamTensor) -> &[f64] {
        let s = match t {
            ParamTensor::QuestionWeights => self.question_weights.as_slice(),
            ParamTensor::QuestionBias => self.question_bias.as_slice(),
            ParamTensor::CoordWeights => self.coord_weights.as_slice(),
            ParamTensor::CoordBias => self.coord_bias.as_slice(),
            ParamTensor::SlotWeights => self.slot_weights.as_slice(),
            ParamTensor::HeadWeights => self.head_weights.as_slice(),
            ParamTensor::HeadBias => Some(std::slice::from_ref(&self.head_bias)),
        };
        s.expect("gradients are stored contiguously")
    }

    /// `self += other`, element by element in a fixed order.
    pub fn accumulate(&mut self, other: &Gradients) {
        self.question_weights += &other.question_weights;
        self.question_bias += &other.question_bias;
        self.coord_weights += &other.coord_weights;
        self.coord_bias += &other.coord_bias;
        self.slot_weights += &other.slot_weights;
        self.head_weights += &other.head_weights;
        self.head_bias += other.head_bias;
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub matches: Vec<MatchResult>,
}

struct Trace {
    enhanced: EnhancedFeatures,
    question: Array2<f64>,
    protos: Array3<f64>,
    matches: Vec<MatchResult>,
    alphas: Vec<Vec<f64>>,
    pooled: Vec<Array1<f64>>,
    scores: Vec<f64>,
    answers: Vec<Array1<f64>>,
    coord_inputs: Vec<[f64; 4]>,
    logits: Vec<f64>,
}

fn check_example(params: &ModelParams, answer: &LinearProjector, ex: &QAExample) -> Result<()> {
    let cfg = &params.config;
    if ex.features.dim() != cfg.d {
        return Err(Error::Config(format!(
            "example {} has {}-dim features, model expects {}",
            ex.qa_id,
            ex.features.dim(),
            cfg.d
        )));
    }
    if ex.features.grid() != cfg.grid {
        return Err(Error::Config(format!(
            "example {} uses grid {}, model expects {}",
            ex.qa_id,
            ex.features.grid(),
            cfg.grid
        )));
    }
    if ex.question.dim() != cfg.d_text || answer.d_in() != cfg.d_text || answer.d_out() != cfg.d {
        return Err(Error::Config(format!(
            "example {} question dimension {} does not fit the {}->{} projector",
            ex.qa_id,
            ex.question.dim(),
            cfg.d_text,
            cfg.d
        )));
    }
    if params.head.weights.len() != cfg.fused_dim() {
        return Err(Error::Config(format!(
            "head has {} weights, fused dimension is {}",
            params.head.weights.len(),
            cfg.fused_dim()
        )));
    }
    if ex.candidates.is_empty() {
        return Err(Error::Config(format!(
            "example {} has no candidates",
            ex.qa_id
        )));
    }
    Ok(())
}

fn trace(params: &ModelParams, answer: &LinearProjector, ex: &QAExample) -> Result<Trace> {
    check_example(params, answer, ex)?;
    let cfg = &params.config;
    let grid = ex.features.grid();
    let enhanced = enhance(&ex.features);
    let question = ex.question.tokens().mapv(f64::from);
    let projected = params.question_projector.project_tokens(&ex.question)?;
    let protos = build_prototypes(projected.view(), cfg.m, cfg.k)?;
    let set = PrototypeSet::new(protos, params.slot_weights.clone())?;
    let matches = match_all(&enhanced, &set, &grid, cfg.r)?;

    let mut alphas = Vec::with_capacity(cfg.m);
    let mut pooled = Vec::with_capacity(cfg.m);
    let mut scores = Vec::with_capacity(cfg.m);
    for res in &matches {
        let mut p = Array1::zeros(cfg.d);
        let alpha = if res.selections.is_empty() {
            Vec::new()
        } else {
            let sims = Array1::from_iter(res.selections.iter().map(|s| s.sim));
            let a = softmax(sims.view());
            for (w, s) in a.iter().zip(&res.selections) {
                p.scaled_add(*w, &enhanced.patches.row(s.patch));
            }
            a.to_vec()
        };
        alphas.push(alpha);
        pooled.push(p);
        scores.push(res.score);
    }

    let mut answers = Vec::with_capacity(ex.candidates.len());
    let mut coord_inputs = Vec::new();
    for c in &ex.candidates {
        match c {
            AnswerInput::Coord(b) => {
                let z = normalize_box(b, &grid)?;
                coord_inputs.push(z);
                answers.push(params.coord_projector.project(b, &grid)?);
            }
            AnswerInput::Text(t) => {
                let proj = answer.project_tokens(t)?;
                answers.push(
                    proj.mean_axis(ndarray::Axis(0))
                        .expect("at least one token"),
                );
            }
        }
    }

    let d = cfg.d;
    let h = &params.head.weights;
    let logits = answers
        .iter()
        .map(|a| {
            let mut logit = params.head.bias;
            for (i, (p, sc)) in pooled.iter().zip(&scores).enumerate() {
                let hi = h.slice(s![i * d..(i + 1) * d]);
                logit += match cfg.fusion {
                    FusionMode::Gated => sc * (&hi * p).dot(a),
                    FusionMode::Concat => sc * hi.dot(p),
                };
            }
            logit + h.slice(s![cfg.m * d..]).dot(a)
        })
        .collect();

    Ok(Trace {
        enhanced,
        question,
        protos: set.protos().clone(),
        matches,
        alphas,
        pooled,
        scores,
        answers,
        coord_inputs,
        logits,
    })
}

/// Greedy matches of the question's prototypes, without any candidates.
pub fn match_question(
    params: &ModelParams,
    features: &FeatureMap,
    question: &TokenEmbeddings,
) -> Result<Vec<MatchResult>> {
    let cfg = &params.config;
    if features.dim() != cfg.d || features.grid() != cfg.grid || question.dim() != cfg.d_text {
        return Err(Error::Config(format!(
            "inputs ({}-dim features on {}, {}-dim tokens) do not fit the model ({}, {}, {})",
            features.dim(),
            features.grid(),
            question.dim(),
            cfg.d,
            cfg.grid,
            cfg.d_text
        )));
    }
    let projected = params.question_projector.project_tokens(question)?;
    let set = PrototypeSet::new(
        build_prototypes(projected.view(), cfg.m, cfg.k)?,
        params.slot_weights.clone(),
    )?;
    match_all(&enhance(features), &set, &cfg.grid, cfg.r)
}

pub fn forward(params: &ModelParams, ex: &QAExample) -> Result<Forward> {
    forward_with(params, &params.answer_projector(), ex)
}

/// Forward pass with an explicit (frozen) answer projector snapshot.
pub fn forward_with(
    params: &ModelParams,
    answer: &LinearProjector,
    ex: &QAExample,
) -> Result<Forward> {
    let t = trace(params, answer, ex)?;
    Ok(Forward {
        logits: t.logits,
        matches: t.matches,
    })
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Softmax cross-entropy of the correct candidate.
pub fn loss(logits: &[f64], correct_index: usize) -> Result<f64> {
    if correct_index >= logits.len() {
        return Err(Error::Range {
            index: correct_index,
            limit: logits.len(),
        });
    }
    Ok((log_sum_exp(logits) - logits[correct_index]).max(0.0))
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &ModelParams, ex: &QAExample) -> Result<usize> {
    Ok(argmax(&forward(params, ex)?.logits))
}

/// Loss, logits and gradients of one example.
#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub gradients: Gradients,
}

pub fn backward(params: &ModelParams, ex: &QAExample) -> Result<Backward> {
    backward_with(params, &params.answer_projector(), ex)
}

pub fn backward_with(
    params: &ModelParams,
    answer: &LinearProjector,
    ex: &QAExample,
) -> Result<Backward> {
    let t = trace(params, answer, ex)?;
    let cfg = &params.config;
    let (m, k, d) = (cfg.m, cfg.k, cfg.d);
    let value = loss(&t.logits, ex.correct_index)?;
    let mut g = Gradients::zeros_like(params);

    let max = t.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = t.logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let dlogit: Vec<f64> = exps
        .iter()
        .enumerate()
        .map(|(c, e)| e / z - if c == ex.correct_index { 1.0 } else { 0.0 })
        .collect();

    let h = &params.head.weights;
    let h_answer = h.slice(s![m * d..]);
    g.head_bias = dlogit.iter().sum();

    let blocks: Vec<Array1<f64>> = t
        .pooled
        .iter()
        .zip(&t.scores)
        .map(|(p, sc)| p * *sc)
        .collect();

    // head and the fused inputs
    let mut dblocks: Vec<Array1<f64>> = vec![Array1::zeros(d); m];
    let mut danswers: Vec<Array1<f64>> = Vec::with_capacity(t.answers.len());
    for (a, gc) in t.answers.iter().zip(&dlogit) {
        let mut da = &h_answer * *gc;
        for (i, b) in blocks.iter().enumerate() {
            let hi = h.slice(s![i * d..(i + 1) * d]);
            let mut dh = g.head_weights.slice_mut(s![i * d..(i + 1) * d]);
            match cfg.fusion {
                FusionMode::Gated => {
                    dh.scaled_add(*gc, &(b * a));
                    dblocks[i].scaled_add(*gc, &(&hi * a));
                    da.scaled_add(*gc, &(&hi * b));
                }
                FusionMode::Concat => {
                    dh.scaled_add(*gc, b);
                    dblocks[i].scaled_add(*gc, &hi);
                }
            }
        }
        g.head_weights.slice_mut(s![m * d..]).scaled_add(*gc, a);
        danswers.push(da);
    }

    for (c, da) in danswers.iter().enumerate() {
        if let AnswerInput::Coord(_) = ex.candidates[c] {
            let zi = &t.coord_inputs[c];
            for (q, zq) in zi.iter().enumerate() {
                g.coord_weights.row_mut(q).scaled_add(*zq, da);
            }
            g.coord_bias += da;
        }
    }

    // back through pooling, scores and similarities into the prototypes
    let len = t.question.nrows();
    let mut dprojected = Array2::<f64>::zeros((len, d));
    for (i, res) in t.matches.iter().enumerate() {
        if res.selections.is_empty() {
            continue;
        }
        let dscore = dblocks[i].dot(&t.pooled[i]);
        let dpooled = &dblocks[i] * t.scores[i];
        let alpha = &t.alphas[i];
        let dalpha: Vec<f64> = res
            .selections
            .iter()
            .map(|s| dpooled.dot(&t.enhanced.patches.row(s.patch)))
            .collect();
        let mean: f64 = alpha.iter().zip(&dalpha).map(|(a, da)| a * da).sum();
        let omega = params.slot_weights.effective(i);

        let mut domega = vec![0.0; k];
        for (ti, s) in res.selections.iter().enumerate() {
            let dsim = alpha[ti] * (dalpha[ti] - mean) + omega[s.t] * dscore;
            domega[s.t] = s.sim * dscore;

            let f = t.enhanced.patches.row(s.patch);
            let p = t.protos.slice(s![i, s.subpatch, ..]);
            let dp = cosine_grad(f, p, s.sim) * dsim;
            let token = source_token(i, s.subpatch, k, len);
            dprojected.row_mut(token).scaled_add(1.0, &dp);
        }

        let row = params.slot_weights.row_index(i);
        let mut gw = g.slot_weights.row_mut(row);
        match params.slot_weights.normalization() {
            SlotNormalization::Raw => {
                for (j, v) in domega.iter().enumerate() {
                    gw[j] += v;
                }
            }
            SlotNormalization::Softmax => {
                let inner: f64 = omega.iter().zip(&domega).map(|(o, v)| o * v).sum();
                for j in 0..k {
                    gw[j] += omega[j] * (domega[j] - inner);
                }
            }
        }
    }

    g.question_weights = t.question.t().dot(&dprojected);
    g.question_bias = dprojected.sum_axis(ndarray::Axis(0));
    Ok(Backward {
        loss: value,
        logits: t.logits,
        gradients: g,
    })
}

/// `d cos(f, p) / d p`.
fn cosine_grad(f: ArrayView1<'_, f64>, p: ArrayView1<'_, f64>, sim: f64) -> Array1<f64> {
    let nf = f.dot(&f).sqrt();
    let pp = p.dot(&p);
    let np = pp.sqrt();
    &f / (nf * np) - &p * (sim / pp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_values() {
        assert!((loss(&[0.0; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((loss(&[1.0, 2.0, 3.0, 0.0], 2).unwrap() - 0.440190).abs() < 1e-3);
        assert!(loss(&[0.0, 50.0, 0.0, 0.0], 1).unwrap() < 1e-20);
        assert!(loss(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.0, 0.0, 0.0, 1.0]), 3);
        assert_eq!(argmax(&[0.5; 4]), 0);
    }
}

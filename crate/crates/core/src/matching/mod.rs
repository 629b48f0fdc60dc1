//! Spatially constrained greedy matching of sub-patch prototypes to patches.
//!
//! For one prototype (`k` sub-patches) the matcher runs up to `k` iterations.
//! Each iteration takes the highest-similarity `(patch, sub-patch)` pair among
//! patches that are still available and lie within Chebyshev radius `r` of the
//! previous pick, using each sub-patch at most once. Ties go to the smallest
//! patch index, then the smallest sub-patch index.
//!
//! If no pair is feasible the adjacency mask is re-anchored on the last pick
//! and the search repeated once; if that still fails the match stops early and
//! the remaining iterations contribute nothing to the score.

pub mod reference;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::EnhancedFeatures;
use crate::geometry::{within_radius, GridSpec, PatchIndex};
use crate::prototypes::PrototypeSet;

pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!(
            "cosine of vectors with {} and {} entries",
            a.len(),
            b.len()
        )));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok(a.dot(&b) / (na * nb))
}

/// Patch-by-sub-patch cosine similarities (`N x k`).
///
/// Entries involving a zero-norm vector are `-inf` so they are never picked.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Array2<f64>,
}

impl SimilarityMatrix {
    pub fn compute(features: &EnhancedFeatures, proto: ArrayView2<'_, f64>) -> Result<Self> {
        if features.dim() != proto.ncols() {
            return Err(Error::Config(format!(
                "features have {} dims, prototype has {}",
                features.dim(),
                proto.ncols()
            )));
        }
        let patch_norms: Vec<f64> = features
            .patches
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let proto_norms: Vec<f64> = proto.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let dots = features.patches.dot(&proto.t());
        let values = Array2::from_shape_fn(dots.dim(), |(n, j)| {
            let denom = patch_norms[n] * proto_norms[j];
            if denom == 0.0 {
                f64::NEG_INFINITY
            } else {
                dots[[n, j]] / denom
            }
        });
        Ok(SimilarityMatrix { values })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, n: usize, j: usize) -> f64 {
        self.values[[n, j]]
    }

    pub fn num_patches(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_subpatches(&self) -> usize {
        self.values.ncols()
    }
}

/// Availability and adjacency masks of one greedy run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskState {
    pub available: Vec<bool>,
    pub adjacent: Vec<bool>,
    pub subpatch_free: Vec<bool>,
    pub last_selected: Option<PatchIndex>,
}

impl MaskState {
    pub fn new(num_patches: usize, k: usize) -> Self {
        MaskState {
            available: vec![true; num_patches],
            adjacent: vec![true; num_patches],
            subpatch_free: vec![true; k],
            last_selected: None,
        }
    }

    pub fn is_feasible(&self, n: usize, j: usize) -> bool {
        self.available[n] && self.adjacent[n] && self.subpatch_free[j]
    }

    fn anchor(&mut self, grid: &GridSpec, at: PatchIndex, r: usize) {
        for (n, adj) in self.adjacent.iter_mut().enumerate() {
            *adj = within_radius(grid, at, PatchIndex(n), r);
        }
    }

    fn select(&mut self, grid: &GridSpec, n: usize, j: usize, r: usize) {
        self.available[n] = false;
        self.subpatch_free[j] = false;
        self.last_selected = Some(PatchIndex(n));
        self.anchor(grid, PatchIndex(n), r);
    }

    /// Best feasible pair under the lexicographic tie-break.
    fn best(&self, sims: &SimilarityMatrix) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for n in 0..sims.num_patches() {
            for j in 0..sims.num_subpatches() {
                let s = sims.get(n, j);
                if !self.is_feasible(n, j) || s == f64::NEG_INFINITY {
                    continue;
                }
                if best.is_none_or(|(_, _, b)| s > b) {
                    best = Some((n, j, s));
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Zero-based iteration.
    pub t: usize,
    pub patch: usize,
    pub subpatch: usize,
    pub sim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    #[serde(rename = "prototype")]
    pub prototype_index: usize,
    pub score: f64,
    pub selections: Vec<Selection>,
}

/// Greedy match of one prototype (`k x D`) with slot `weights` (`k`).
pub fn greedy_match(
    features: &EnhancedFeatures,
    proto: ArrayView2<'_, f64>,
    grid: &GridSpec,
    r: usize,
    weights: ArrayView1<'_, f64>,
) -> Result<MatchResult> {
    let sims = SimilarityMatrix::compute(features, proto)?;
    match_with_similarities(&sims, grid, r, weights)
}

/// Greedy selection over precomputed similarities.
pub fn match_with_similarities(
    sims: &SimilarityMatrix,
    grid: &GridSpec,
    r: usize,
    weights: ArrayView1<'_, f64>,
) -> Result<MatchResult> {
    let n = sims.num_patches();
    let k = sims.num_subpatches();
    if n != grid.num_patches() {
        return Err(Error::Config(format!(
            "{n} patch features for a grid of {} patches",
            grid.num_patches()
        )));
    }
    if weights.len() != k {
        return Err(Error::Config(format!(
            "{} slot weights for k={k}",
            weights.len()
        )));
    }
    if n < k {
        return Err(Error::InstanceTooSmall {
            patches: n,
            subpatches: k,
        });
    }

    let mut mask = MaskState::new(n, k);
    let mut selections = Vec::with_capacity(k);
    let mut score = 0.0;
    for t in 0..k {
        let mut pick = mask.best(sims);
        if pick.is_none() {
            if let Some(last) = mask.last_selected {
                mask.anchor(grid, last, r);
                pick = mask.best(sims);
            }
        }
        let Some((patch, subpatch, sim)) = pick else {
            break;
        };
        mask.select(grid, patch, subpatch, r);
        score += weights[t] * sim;
        selections.push(Selection {
            t,
            patch,
            subpatch,
            sim,
        });
    }
    Ok(MatchResult {
        prototype_index: 0,
        score,
        selections,
    })
}

/// Matches every prototype independently; masks reset between prototypes.
pub fn match_all(
    features: &EnhancedFeatures,
    protos: &PrototypeSet,
    grid: &GridSpec,
    r: usize,
) -> Result<Vec<MatchResult>> {
    (0..protos.m())
        .map(|i| {
            let w = protos.slot_weights().effective(i);
            let mut res = greedy_match(features, protos.prototype(i), grid, r, w.view())?;
            res.prototype_index = i;
            Ok(res)
        })
        .collect()
}

/// How the `K` of a top-`K` explanation is read.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KSemantics {
    /// The `K` best-matched distinct patches over all prototypes.
    #[default]
    TopKPatches,
    /// Every patch selected by the `K` highest-scoring prototypes.
    TopKPrototypes,
}

impl KSemantics {
    pub fn as_str(&self) -> &'static str {
        match self {
            KSemantics::TopKPatches => "top_k_patches",
            KSemantics::TopKPrototypes => "top_k_prototypes",
        }
    }
}

/// Distinct patches ranked by similarity (descending, lower index first on ties).
pub fn top_k_patches(results: &[MatchResult], k: usize) -> Result<Vec<PatchIndex>> {
    if results.is_empty() {
        return Err(Error::Argument("no match results".into()));
    }
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    let mut ranked: Vec<(f64, usize)> = results
        .iter()
        .flat_map(|r| r.selections.iter().map(|s| (s.sim, s.patch)))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut out: Vec<PatchIndex> = Vec::with_capacity(k);
    for (_, p) in ranked {
        if out.len() == k {
            break;
        }
        if !out.contains(&PatchIndex(p)) {
            out.push(PatchIndex(p));
        }
    }
    Ok(out)
}

/// Patches selected by the `k` best-scoring prototypes, in rank then
/// iteration order, deduplicated.
pub fn top_k_prototype_patches(results: &[MatchResult], k: usize) -> Result<Vec<PatchIndex>> {
    if results.is_empty() {
        return Err(Error::Argument("no match results".into()));
    }
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    let mut order: Vec<&MatchResult> = results.iter().collect();
    order.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.prototype_index.cmp(&b.prototype_index))
    });
    let mut out = Vec::new();
    for r in order.into_iter().take(k) {
        for s in &r.selections {
            if !out.contains(&PatchIndex(s.patch)) {
                out.push(PatchIndex(s.patch));
            }
        }
    }
    Ok(out)
}

pub fn attended_patches(
    results: &[MatchResult],
    k: usize,
    semantics: KSemantics,
) -> Result<Vec<PatchIndex>> {
    match semantics {
        KSemantics::TopKPatches => top_k_patches(results, k),
        KSemantics::TopKPrototypes => top_k_prototype_patches(results, k),
    }
}

//! Slow reference matchers for benchmarking the greedy path.
//!
//! Neither routine shares code with the greedy matcher: similarities, masks
//! and the radius test are recomputed from scratch.

use ndarray::{ArrayView1, ArrayView2};

use crate::features::EnhancedFeatures;

/// One picked `(patch, sub-patch, similarity)`.
pub type Pick = (usize, usize, f64);

fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Option<f64> {
    let (mut dot, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        None
    } else {
        Some(dot / (aa.sqrt() * bb.sqrt()))
    }
}

fn close(cols: usize, a: usize, b: usize, r: usize) -> bool {
    let (ra, ca) = ((a / cols) as i64, (a % cols) as i64);
    let (rb, cb) = ((b / cols) as i64, (b % cols) as i64);
    (ra - rb).abs() <= r as i64 && (ca - cb).abs() <= r as i64
}

/// Every feasible next pick given the picks made so far.
fn candidates(sims: &[Vec<Option<f64>>], cols: usize, r: usize, taken: &[Pick]) -> Vec<Pick> {
    let mut out = Vec::new();
    for (n, row) in sims.iter().enumerate() {
        if taken.iter().any(|p| p.0 == n) {
            continue;
        }
        if let Some(last) = taken.last() {
            if !close(cols, last.0, n, r) {
                continue;
            }
        }
        for (j, s) in row.iter().enumerate() {
            if taken.iter().any(|p| p.1 == j) {
                continue;
            }
            if let Some(s) = s {
                out.push((n, j, *s));
            }
        }
    }
    out
}

fn table(features: &EnhancedFeatures, proto: ArrayView2<'_, f64>) -> Vec<Vec<Option<f64>>> {
    features
        .patches
        .rows()
        .into_iter()
        .map(|f| proto.rows().into_iter().map(|p| cosine(f, p)).collect())
        .collect()
}

/// Sequential argmax: at each step list all feasible pairs and keep the
/// largest similarity, earliest `(patch, sub-patch)` on ties.
pub fn sequential_argmax(
    features: &EnhancedFeatures,
    proto: ArrayView2<'_, f64>,
    cols: usize,
    r: usize,
    weights: &[f64],
) -> (Vec<Pick>, f64) {
    let sims = table(features, proto);
    let k = proto.nrows();
    let mut taken: Vec<Pick> = Vec::new();
    while taken.len() < k {
        let mut pool = candidates(&sims, cols, r, &taken);
        pool.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
        match pool.first() {
            Some(p) => taken.push(*p),
            None => break,
        }
    }
    let score = taken.iter().zip(weights).map(|(p, w)| w * p.2).sum();
    (taken, score)
}

/// Highest weighted score over every feasible pick sequence. Sequences end
/// after `k` picks or when no feasible extension remains.
pub fn exhaustive_best(
    features: &EnhancedFeatures,
    proto: ArrayView2<'_, f64>,
    cols: usize,
    r: usize,
    weights: &[f64],
) -> (Vec<Pick>, f64) {
    let sims = table(features, proto);
    let k = proto.nrows();
    let mut best: (Vec<Pick>, f64) = (Vec::new(), f64::NEG_INFINITY);
    let mut path = Vec::with_capacity(k);
    search(&sims, cols, r, weights, k, &mut path, 0.0, &mut best);
    if best.1 == f64::NEG_INFINITY {
        best.1 = 0.0;
    }
    best
}

#[allow(clippy::too_many_arguments)]
fn search(
    sims: &[Vec<Option<f64>>],
    cols: usize,
    r: usize,
    weights: &[f64],
    k: usize,
    path: &mut Vec<Pick>,
    acc: f64,
    best: &mut (Vec<Pick>, f64),
) {
    let next = if path.len() < k {
        candidates(sims, cols, r, path)
    } else {
        Vec::new()
    };
    if next.is_empty() {
        if acc > best.1 {
            *best = (path.clone(), acc);
        }
        return;
    }
    for p in next {
        let w = weights[path.len()];
        path.push(p);
        search(sims, cols, r, weights, k, path, acc + w * p.2, best);
        path.pop();
    }
}

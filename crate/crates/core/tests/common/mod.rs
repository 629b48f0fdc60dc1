#![allow(dead_code)]

use ndarray::{Array1, Array2};
use protomatch_core::model::{FusionMode, ModelConfig};
use protomatch_core::prototypes::{SlotLayout, SlotNormalization};
use protomatch_core::{
    AnswerInput, BBox, FeatureMap, GridSpec, ModelParams, QAExample, TokenEmbeddings,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Plain-loop greedy matcher over row-major patch features.
#[allow(clippy::needless_range_loop)]
pub fn greedy_oracle(
    feats: &Array2<f64>,
    proto: &Array2<f64>,
    cols: usize,
    r: usize,
) -> Vec<(usize, usize, f64)> {
    let (n, k) = (feats.nrows(), proto.nrows());
    let norm = |v: ndarray::ArrayView1<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut sim = vec![vec![None; k]; n];
    for a in 0..n {
        for j in 0..k {
            let (fa, pj) = (feats.row(a), proto.row(j));
            let d = norm(fa) * norm(pj);
            if d > 0.0 {
                sim[a][j] = Some(fa.iter().zip(pj.iter()).map(|(x, y)| x * y).sum::<f64>() / d);
            }
        }
    }
    let mut picks: Vec<(usize, usize, f64)> = Vec::new();
    for _ in 0..k {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..n {
            if picks.iter().any(|p| p.0 == a) {
                continue;
            }
            if let Some(last) = picks.last() {
                let dr = (a / cols).abs_diff(last.0 / cols);
                let dc = (a % cols).abs_diff(last.0 % cols);
                if dr.max(dc) > r {
                    continue;
                }
            }
            for j in 0..k {
                if picks.iter().any(|p| p.1 == j) {
                    continue;
                }
                if let Some(s) = sim[a][j] {
                    if best.is_none_or(|b| s > b.2) {
                        best = Some((a, j, s));
                    }
                }
            }
        }
        match best {
            Some(b) => picks.push(b),
            None => break,
        }
    }
    picks
}

pub fn small_config(
    seed: u64,
    layout: SlotLayout,
    norm: SlotNormalization,
    fusion: FusionMode,
) -> ModelConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    ModelConfig {
        m: rng.random_range(1..=3),
        k: rng.random_range(1..=3),
        r: rng.random_range(0..=2),
        grid: GridSpec::from_patches(rng.random_range(2..=4), rng.random_range(2..=4), 8).unwrap(),
        d: 5,
        d_text: 6,
        seed,
        slot_layout: layout,
        slot_normalization: norm,
        fusion,
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f32 {
    rng.sample::<f64, _>(StandardNormal) as f32
}

fn tokens(rng: &mut ChaCha8Rng, len: usize, d: usize) -> TokenEmbeddings {
    TokenEmbeddings::new(Array2::from_shape_simple_fn((len, d), || gauss(rng))).unwrap()
}

fn random_box(rng: &mut ChaCha8Rng, grid: &GridSpec) -> BBox {
    let (w, h) = (grid.image_width(), grid.image_height());
    let x = rng.random_range(0..w - 1);
    let y = rng.random_range(0..h - 1);
    BBox::new(
        x,
        y,
        rng.random_range(x + 1..=w),
        rng.random_range(y + 1..=h),
    )
    .unwrap()
}

/// A random example fitting `cfg`, with text or coordinate candidates.
pub fn random_example(cfg: &ModelConfig, seed: u64, text: bool) -> QAExample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.grid.num_patches();
    let features = FeatureMap::new(
        Array1::from_shape_simple_fn(cfg.d, || gauss(&mut rng)),
        Array2::from_shape_simple_fn((n, cfg.d), || gauss(&mut rng)),
        cfg.grid,
    )
    .unwrap();
    let len = rng.random_range(1..=cfg.m * cfg.k + 2);
    let question = tokens(&mut rng, len, cfg.d_text);
    let n_cand = rng.random_range(2..=4);
    let candidates = (0..n_cand)
        .map(|_| {
            if text {
                let l = rng.random_range(1..=3);
                AnswerInput::Text(tokens(&mut rng, l, cfg.d_text))
            } else {
                AnswerInput::Coord(random_box(&mut rng, &cfg.grid))
            }
        })
        .collect();
    QAExample {
        qa_id: format!("ex{seed}"),
        image_id: format!("img{seed}"),
        features,
        question,
        candidates,
        correct_index: rng.random_range(0..n_cand),
        evidence_box: None,
    }
}

/// Initial parameters with every tensor nudged away from its init so that
/// biases and the head bias are nonzero.
pub fn perturbed_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for t in protomatch_core::model::ParamTensor::ALL {
        for v in p.tensor_mut(t).unwrap() {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

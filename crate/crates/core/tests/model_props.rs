mod common;

use common::{greedy_oracle, perturbed_params, random_example, small_config};
use protomatch_core::model::{
    backward_with, forward, forward_with, loss, FusionMode, ModelParams, ParamTensor,
};
use protomatch_core::projection::LinearProjector;
use protomatch_core::prototypes::{SlotLayout, SlotNormalization};
use protomatch_core::{AnswerInput, QAExample};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const LAYOUTS: [SlotLayout; 2] = [SlotLayout::Shared, SlotLayout::PerPrototype];
const NORMS: [SlotNormalization; 2] = [SlotNormalization::Raw, SlotNormalization::Softmax];

/// Logits computed with explicit loops from the raw parameter slices.
fn straight_line_logits(p: &ModelParams, answer: &LinearProjector, ex: &QAExample) -> Vec<f64> {
    let c = &p.config;
    let (m, k, d, dt) = (c.m, c.k, c.d, c.d_text);
    let n = c.grid.num_patches();
    let cls = ex.features.cls();
    let mut enh = ndarray::Array2::<f64>::zeros((n, d));
    for a in 0..n {
        for j in 0..d {
            enh[[a, j]] = f64::from(ex.features.patches()[[a, j]]) - f64::from(cls[j]);
        }
    }
    let project = |w: &[f64], b: &[f64], tok: ndarray::ArrayView1<f32>| -> Vec<f64> {
        (0..d)
            .map(|o| {
                b[o] + (0..dt)
                    .map(|i| f64::from(tok[i]) * w[i * d + o])
                    .sum::<f64>()
            })
            .collect()
    };
    let qw = p.tensor(ParamTensor::QuestionWeights);
    let qb = p.tensor(ParamTensor::QuestionBias);
    let toks = ex.question.tokens();
    let len = toks.nrows();
    let slots = p.tensor(ParamTensor::SlotWeights);
    let h = p.tensor(ParamTensor::HeadWeights);
    let hb = p.tensor(ParamTensor::HeadBias)[0];

    let mut blocks = Vec::new();
    for i in 0..m {
        let mut proto = ndarray::Array2::<f64>::zeros((k, d));
        for j in 0..k {
            let row = project(qw, qb, toks.row((i * k + j) % len));
            for o in 0..d {
                proto[[j, o]] = row[o];
            }
        }
        let picks = greedy_oracle(&enh, &proto, c.grid.cols(), c.r);
        let row = if slots.len() == k { 0 } else { i };
        let raw: Vec<f64> = slots[row * k..(row + 1) * k].to_vec();
        let omega: Vec<f64> = match c.slot_normalization {
            SlotNormalization::Raw => raw,
            SlotNormalization::Softmax => {
                let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = raw.iter().map(|v| (v - mx).exp()).sum();
                raw.iter().map(|v| (v - mx).exp() / z).collect()
            }
        };
        let score: f64 = picks
            .iter()
            .enumerate()
            .map(|(t, pk)| omega[t] * pk.2)
            .sum();
        let mut pooled = vec![0.0; d];
        if !picks.is_empty() {
            let mx = picks
                .iter()
                .map(|pk| pk.2)
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = picks.iter().map(|pk| (pk.2 - mx).exp()).sum();
            for pk in &picks {
                let a = (pk.2 - mx).exp() / z;
                for o in 0..d {
                    pooled[o] += a * enh[[pk.0, o]];
                }
            }
        }
        blocks.push(pooled.iter().map(|v| v * score).collect::<Vec<f64>>());
    }

    let aw = answer.weights().as_slice().unwrap();
    let ab = answer.bias().as_slice().unwrap();
    let cw = p.tensor(ParamTensor::CoordWeights);
    let cb = p.tensor(ParamTensor::CoordBias);
    ex.candidates
        .iter()
        .map(|cand| {
            let a: Vec<f64> = match cand {
                AnswerInput::Text(t) => {
                    let rows: Vec<Vec<f64>> = t
                        .tokens()
                        .rows()
                        .into_iter()
                        .map(|r| project(aw, ab, r))
                        .collect();
                    (0..d)
                        .map(|o| rows.iter().map(|r| r[o]).sum::<f64>() / rows.len() as f64)
                        .collect()
                }
                AnswerInput::Coord(b) => {
                    let w = f64::from(c.grid.image_width());
                    let hh = f64::from(c.grid.image_height());
                    let z = [
                        f64::from(b.x_min()) / w,
                        f64::from(b.y_min()) / hh,
                        f64::from(b.x_max()) / w,
                        f64::from(b.y_max()) / hh,
                    ];
                    (0..d)
                        .map(|o| cb[o] + (0..4).map(|q| z[q] * cw[q * d + o]).sum::<f64>())
                        .collect()
                }
            };
            let mut logit = hb;
            for (i, blk) in blocks.iter().enumerate() {
                for o in 0..d {
                    logit += h[i * d + o]
                        * match c.fusion {
                            FusionMode::Gated => blk[o] * a[o],
                            FusionMode::Concat => blk[o],
                        };
                }
            }
            logit + (0..d).map(|o| h[m * d + o] * a[o]).sum::<f64>()
        })
        .collect()
}

#[test]
fn forward_matches_straight_line_oracle() {
    let mut seed = 0;
    for layout in LAYOUTS {
        for norm in NORMS {
            for fusion in [FusionMode::Gated, FusionMode::Concat] {
                for text in [true, false] {
                    for _ in 0..5 {
                        seed += 1;
                        let cfg = small_config(seed, layout, norm, fusion);
                        let p = perturbed_params(&cfg, seed);
                        let ex = random_example(&cfg, seed * 7, text);
                        let answer = p.answer_projector();
                        let got = forward_with(&p, &answer, &ex).unwrap().logits;
                        let want = straight_line_logits(&p, &answer, &ex);
                        for (g, w) in got.iter().zip(&want) {
                            assert!((g - w).abs() <= 1e-6 * w.abs().max(1.0), "{g} vs {w}");
                        }
                    }
                }
            }
        }
    }
}

fn selections(p: &ModelParams, answer: &LinearProjector, ex: &QAExample) -> Vec<(usize, usize)> {
    forward_with(p, answer, ex)
        .unwrap()
        .matches
        .iter()
        .flat_map(|m| m.selections.iter().map(|s| (s.patch, s.subpatch)))
        .collect()
}

fn example_loss(p: &ModelParams, answer: &LinearProjector, ex: &QAExample) -> f64 {
    loss(
        &forward_with(p, answer, ex).unwrap().logits,
        ex.correct_index,
    )
    .unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error of the analytic gradient of every tensor against central
/// differences, shrinking the step whenever a perturbation changes the
/// greedy selections.
fn worst_relative_error(p: &ModelParams, ex: &QAExample) -> f64 {
    let answer = p.answer_projector();
    let analytic = backward_with(p, &answer, ex).unwrap().gradients;
    let base = selections(p, &answer, ex);
    let mut worst: f64 = 0.0;
    for t in ParamTensor::ALL {
        let a = analytic.tensor(t).to_vec();
        let mut numeric = vec![0.0; a.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let mut h = 1e-4;
            loop {
                let mut plus = p.clone();
                plus.tensor_mut(t).unwrap()[i] += h;
                let mut minus = p.clone();
                minus.tensor_mut(t).unwrap()[i] -= h;
                let stable = selections(&plus, &answer, ex) == base
                    && selections(&minus, &answer, ex) == base;
                if stable || h < 1e-9 {
                    *slot = (example_loss(&plus, &answer, ex) - example_loss(&minus, &answer, ex))
                        / (2.0 * h);
                    break;
                }
                h /= 2.0;
            }
        }
        let diff: Vec<f64> = a.iter().zip(&numeric).map(|(x, y)| x - y).collect();
        let scale = norm(&a).max(norm(&numeric)).max(1e-6);
        worst = worst.max(norm(&diff) / scale);
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    let mut seed = 100;
    let mut checked = 0;
    for layout in LAYOUTS {
        for norm in NORMS {
            for fusion in [FusionMode::Gated, FusionMode::Concat] {
                for text in [true, false] {
                    for _ in 0..3 {
                        seed += 1;
                        let cfg = small_config(seed, layout, norm, fusion);
                        let p = perturbed_params(&cfg, seed);
                        let ex = random_example(&cfg, seed * 13, text);
                        let err = worst_relative_error(&p, &ex);
                        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
                        checked += 1;
                    }
                }
            }
        }
    }
    assert!(checked >= 20);
}

#[test]
fn loss_change_is_first_order_in_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 200..230 {
        let cfg = small_config(
            seed,
            SlotLayout::PerPrototype,
            SlotNormalization::Softmax,
            FusionMode::Gated,
        );
        let p = perturbed_params(&cfg, seed);
        let ex = random_example(&cfg, seed, seed % 2 == 0);
        let answer = p.answer_projector();
        let g = backward_with(&p, &answer, &ex).unwrap().gradients;
        let step = 1e-6;
        let mut moved = p.clone();
        let mut predicted = 0.0;
        for t in ParamTensor::ALL {
            let gt = g.tensor(t).to_vec();
            for (v, gi) in moved.tensor_mut(t).unwrap().iter_mut().zip(gt) {
                let dir: f64 = StandardNormal.sample(&mut rng);
                *v += step * dir;
                predicted += step * dir * gi;
            }
        }
        if selections(&moved, &answer, &ex) != selections(&p, &answer, &ex) {
            continue;
        }
        let actual = example_loss(&moved, &answer, &ex) - example_loss(&p, &answer, &ex);
        assert!(
            (actual - predicted).abs() <= 1e-10 + 1e-3 * predicted.abs(),
            "{actual} vs {predicted}"
        );
    }
}

#[test]
fn candidate_permutation_permutes_logits() {
    for seed in 300..320 {
        let cfg = small_config(
            seed,
            SlotLayout::Shared,
            SlotNormalization::Raw,
            FusionMode::Gated,
        );
        let p = perturbed_params(&cfg, seed);
        let ex = random_example(&cfg, seed, seed % 2 == 1);
        let base = forward(&p, &ex).unwrap().logits;
        let n = ex.candidates.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut shuffled = ex.clone();
        shuffled.candidates = perm.iter().map(|i| ex.candidates[*i].clone()).collect();
        shuffled.correct_index = perm.iter().position(|i| *i == ex.correct_index).unwrap();
        let out = forward(&p, &shuffled).unwrap().logits;
        for (pos, i) in perm.iter().enumerate() {
            assert_eq!(out[pos], base[*i]);
        }
        let l0 = loss(&base, ex.correct_index).unwrap();
        let l1 = loss(&out, shuffled.correct_index).unwrap();
        assert!((l0 - l1).abs() < 1e-12);
    }
}

#[test]
fn init_and_forward_are_deterministic() {
    let cfg = small_config(
        5,
        SlotLayout::PerPrototype,
        SlotNormalization::Raw,
        FusionMode::Gated,
    );
    let a = ModelParams::init(cfg.clone()).unwrap();
    let b = ModelParams::init(cfg.clone()).unwrap();
    assert_eq!(a, b);
    let ex = random_example(&cfg, 9, true);
    let fa = forward(&a, &ex).unwrap();
    let fb = forward(&b, &ex).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&fa.logits), bits(&fb.logits));
    assert_eq!(fa.matches, fb.matches);
}

#[test]
fn concat_image_gradient_vanishes() {
    let cfg = small_config(
        7,
        SlotLayout::Shared,
        SlotNormalization::Raw,
        FusionMode::Concat,
    );
    let p = perturbed_params(&cfg, 7);
    let ex = random_example(&cfg, 7, true);
    let g = backward_with(&p, &p.answer_projector(), &ex)
        .unwrap()
        .gradients;
    assert!(g.question_weights.iter().all(|v| v.abs() < 1e-12));
    assert!(g.slot_weights.iter().all(|v| v.abs() < 1e-12));
    assert!(g
        .head_weights
        .slice(ndarray::s![..cfg.m * cfg.d])
        .iter()
        .all(|v| v.abs() < 1e-12));
}

#[test]
fn frozen_answer_projector_gets_no_update() {
    let cfg = small_config(
        8,
        SlotLayout::Shared,
        SlotNormalization::Raw,
        FusionMode::Gated,
    );
    let p = ModelParams::init(cfg).unwrap();
    let mut frozen = p.answer_projector();
    assert!(frozen.params_mut().is_err());
    assert_eq!(frozen.weights(), p.question_projector.weights());
}

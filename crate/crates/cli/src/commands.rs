//! Command implementations. Each returns a short summary for stdout.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use protomatch_core::checkpoint::{load_model, save_model};
use protomatch_core::explain::Explanation;
use protomatch_core::features::{load_dataset, load_features, load_tokens};
use protomatch_core::instance::{random_instance, InstanceSpec};
use protomatch_core::matching::reference::{exhaustive_best, sequential_argmax};
use protomatch_core::matching::{attended_patches, greedy_match, KSemantics};
use protomatch_core::model::match_question;
use protomatch_core::synth::{write_dataset, SynthConfig};
use protomatch_core::train::{evaluate, metric_log_jsonl, train};
use protomatch_core::vlas::{vlas, ThresholdMode, VlasInput};
use protomatch_core::{
    Error, FeatureMap, MatchResult, ModelParams, QAExample, Result, RunConfig, TokenEmbeddings,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{BenchArgs, EvalArgs, ExplainArgs, MatchArgs, SynthArgs, TrainArgs, VlasArgs};

pub const METRIC_LOG: &str = "metrics.jsonl";

fn to_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("value serialises");
    text.push('\n');
    text
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.into(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

/// Rejects ids that would escape an output directory when used as a file name.
fn file_stem(qa_id: &str) -> Result<&str> {
    let bad =
        qa_id.is_empty() || qa_id == "." || qa_id == ".." || qa_id.contains(['/', '\\', '\0']);
    if bad {
        return Err(Error::Validation {
            example: qa_id.into(),
            message: "qa_id cannot be used as a file name".into(),
        });
    }
    Ok(qa_id)
}

/// Fits the run configuration's dimensions to the data.
fn fit_dims(cfg: &RunConfig, features: &FeatureMap, question: &TokenEmbeddings) -> RunConfig {
    RunConfig {
        d: features.dim(),
        d_text: question.dim(),
        grid: features.grid(),
        ..cfg.clone()
    }
}

/// Checkpoint weights, or seeded initial weights sized to the data.
fn model_for(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    features: &FeatureMap,
    question: &TokenEmbeddings,
) -> Result<ModelParams> {
    match checkpoint {
        Some(dir) => load_model(dir),
        None => ModelParams::init(fit_dims(cfg, features, question).model_config()),
    }
}

fn dataset_model(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    data: &[QAExample],
) -> Result<Option<ModelParams>> {
    match (checkpoint, data.first()) {
        (Some(dir), _) => load_model(dir).map(Some),
        (None, Some(ex)) => model_for(cfg, None, &ex.features, &ex.question).map(Some),
        (None, None) => Ok(None),
    }
}

fn non_empty(data: Vec<QAExample>, manifest: &Path) -> Result<Vec<QAExample>> {
    if data.is_empty() {
        return Err(Error::Argument(format!(
            "manifest {} has no examples",
            manifest.display()
        )));
    }
    Ok(data)
}

pub fn cmd_match(a: &MatchArgs) -> Result<String> {
    let cfg = a.config.resolve()?;
    let ckpt = a.checkpoint.as_deref();
    match (&a.features, &a.question, &a.manifest) {
        (Some(f), Some(q), None) => {
            let features = load_features(f)?;
            let question = load_tokens(q)?;
            let params = model_for(&cfg, ckpt, &features, &question)?;
            let matches = match_question(&params, &features, &question)?;
            write_file(&a.out, to_json(&matches).as_bytes())?;
            Ok(format!(
                "wrote {} prototype matches to {}",
                matches.len(),
                a.out.display()
            ))
        }
        (None, None, Some(m)) => {
            let data = load_dataset(m)?;
            fs::create_dir_all(&a.out).map_err(|e| Error::Io {
                path: a.out.clone(),
                source: e,
            })?;
            let Some(params) = dataset_model(&cfg, ckpt, &data)? else {
                return Ok("manifest has no examples".into());
            };
            for ex in &data {
                let matches = match_question(&params, &ex.features, &ex.question)?;
                let path = a.out.join(format!("{}.json", file_stem(&ex.qa_id)?));
                write_file(&path, to_json(&matches).as_bytes())?;
            }
            Ok(format!(
                "wrote matches for {} examples to {}",
                data.len(),
                a.out.display()
            ))
        }
        _ => Err(Error::Argument(
            "give either --features with --question, or --manifest".into(),
        )),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<String> {
    let cfg = a.config.resolve()?;
    let synth = SynthConfig {
        model: cfg.model_config(),
        n_train: a.n,
        n_test: a.n_test,
        pathway: a.pathway.into(),
        theta: cfg.theta,
    };
    let report = write_dataset(&synth, &a.out)?;
    Ok(format!(
        "wrote {} train and {} test examples to {}; planted recovery {:.3}",
        report.train.n,
        report.test.n,
        a.out.display(),
        report.recovery_rate
    ))
}

pub fn cmd_train(a: &TrainArgs) -> Result<String> {
    let cfg = a.config.resolve()?;
    let data = non_empty(load_dataset(&a.manifest)?, &a.manifest)?;
    let cfg = fit_dims(&cfg, &data[0].features, &data[0].question);
    let params = ModelParams::init(cfg.model_config())?;
    let (trained, log) = train(params, &data, &cfg.train_config())?;
    save_model(&trained, &a.out)?;
    write_file(&a.out.join(METRIC_LOG), metric_log_jsonl(&log).as_bytes())?;
    Ok(match log.last() {
        Some(last) => format!(
            "trained {} epochs: loss {:.6}, accuracy {:.4}; checkpoint in {}",
            last.epoch,
            last.loss,
            last.accuracy,
            a.out.display()
        ),
        None => format!("saved untrained checkpoint in {}", a.out.display()),
    })
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let cfg = a.config.resolve()?;
    let data = non_empty(load_dataset(&a.manifest)?, &a.manifest)?;
    let params = dataset_model(&cfg, a.checkpoint.as_deref(), &data)?.expect("non-empty");
    let result = evaluate(&params, &data)?;
    let text = serde_json::to_string(&result).expect("evaluation serialises");
    if let Some(out) = &a.out {
        write_file(out, to_json(&result).as_bytes())?;
    }
    Ok(text)
}

fn read_matches(dir: &Path, qa_id: &str) -> Result<Vec<MatchResult>> {
    let path = dir.join(format!("{}.json", file_stem(qa_id)?));
    let bytes = fs::read(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        field: "matches",
        message: format!("{}: {e}", path.display()),
    })
}

pub fn cmd_vlas(a: &VlasArgs) -> Result<String> {
    let cfg = a.config.resolve()?;
    let data = non_empty(load_dataset(&a.manifest)?, &a.manifest)?;
    let semantics = if a.per_prototype {
        KSemantics::TopKPrototypes
    } else {
        cfg.k_semantics
    };
    let mode = if a.strict {
        ThresholdMode::Strict
    } else {
        cfg.threshold
    };
    let params = match &a.matches {
        Some(_) => None,
        None => dataset_model(&cfg, a.checkpoint.as_deref(), &data)?,
    };
    let mut inputs = Vec::new();
    for ex in &data {
        let Some(gt) = ex.evidence_box else { continue };
        let matches = match (&a.matches, &params) {
            (Some(dir), _) => read_matches(dir, &ex.qa_id)?,
            (None, Some(p)) => match_question(p, &ex.features, &ex.question)?,
            (None, None) => unreachable!("dataset is non-empty"),
        };
        if matches.is_empty() {
            inputs.push(VlasInput {
                qa_id: ex.qa_id.clone(),
                attended: Vec::new(),
                gt,
            });
            continue;
        }
        let grid = ex.features.grid();
        inputs.push(VlasInput::from_matches(
            &ex.qa_id, &matches, cfg.vlas_k, semantics, &grid, gt,
        )?);
    }
    let skipped = data.len() - inputs.len();
    let report = vlas(&inputs, cfg.theta, cfg.vlas_k, mode, semantics)?;
    write_file(&a.out, to_json(&report).as_bytes())?;
    Ok(format!(
        "VLAS@{} (theta {}) = {} ({}/{}); {} examples without evidence skipped",
        report.k, report.theta, report.score, report.hits, report.n_qa, skipped
    ))
}

fn sidecar_path(out: &Path) -> Result<PathBuf> {
    if out.extension().is_some_and(|e| e == "json") {
        return Err(Error::Argument(
            "explain output must not end in .json; the sidecar uses that name".into(),
        ));
    }
    Ok(out.with_extension("json"))
}

pub fn cmd_explain(a: &ExplainArgs) -> Result<String> {
    let cfg = a.config.resolve()?;
    if a.top == 0 {
        return Err(Error::Argument("--top must be at least 1".into()));
    }
    let sidecar = sidecar_path(&a.out)?;
    let data = non_empty(load_dataset(&a.manifest)?, &a.manifest)?;
    let ex = match &a.qa_id {
        Some(id) => data
            .iter()
            .find(|e| &e.qa_id == id)
            .ok_or_else(|| Error::Argument(format!("no example with qa_id {id:?}")))?,
        None => data.get(a.index).ok_or(Error::Range {
            index: a.index,
            limit: data.len(),
        })?,
    };
    let params = model_for(&cfg, a.checkpoint.as_deref(), &ex.features, &ex.question)?;
    let matches = match_question(&params, &ex.features, &ex.question)?;
    let ranked = if matches.iter().all(|m| m.selections.is_empty()) {
        Vec::new()
    } else {
        attended_patches(&matches, a.top, cfg.k_semantics)?
    };
    let grid = ex.features.grid();
    let e = Explanation::new(
        &ex.qa_id,
        &grid,
        ex.evidence_box,
        &ranked,
        a.top,
        cfg.k_semantics,
    )?;
    write_file(&a.out, e.to_svg().as_bytes())?;
    write_file(&sidecar, to_json(&e).as_bytes())?;
    Ok(format!(
        "wrote {} and {} ({} patches)",
        a.out.display(),
        sidecar.display(),
        e.patches.len()
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub seed: u64,
    pub instances: usize,
    pub too_small: usize,
    pub compared: usize,
    pub oracle_agreement: usize,
    pub agreement_rate: f64,
    pub mean_score_gap: f64,
    pub max_score_gap: f64,
    pub greedy_optimal: usize,
}

pub fn cmd_bench(a: &BenchArgs) -> Result<String> {
    let cfg = a.config.resolve()?;
    if a.max_patches == 0 || a.max_k == 0 {
        return Err(Error::Argument(
            "--max-patches and --max-k must be positive".into(),
        ));
    }
    let spec = InstanceSpec {
        max_patches: a.max_patches,
        max_k: a.max_k,
        max_r: 3,
        dim: 8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let instances: Vec<_> = (0..a.instances)
        .map(|_| random_instance(&mut rng, &spec))
        .collect();

    let (mut too_small, mut agree, mut optimal) = (0, 0, 0);
    let (mut gap_sum, mut gap_max) = (0.0f64, 0.0f64);
    let mut greedy_results = Vec::with_capacity(instances.len());
    let t0 = Instant::now();
    for inst in &instances {
        match greedy_match(
            &inst.features,
            inst.proto.view(),
            &inst.grid,
            inst.r,
            inst.weights.view(),
        ) {
            Ok(res) => greedy_results.push(Some(res)),
            Err(Error::InstanceTooSmall { .. }) => {
                too_small += 1;
                greedy_results.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let greedy_time = t0.elapsed();

    let t1 = Instant::now();
    for (inst, res) in instances.iter().zip(&greedy_results) {
        let Some(res) = res else { continue };
        let w = inst.weights.as_slice().expect("contiguous weights");
        let (picks, score) = sequential_argmax(
            &inst.features,
            inst.proto.view(),
            inst.grid.cols(),
            inst.r,
            w,
        );
        let same = picks.len() == res.selections.len()
            && picks
                .iter()
                .zip(&res.selections)
                .all(|(p, s)| p.0 == s.patch && p.1 == s.subpatch)
            && (score - res.score).abs() <= 1e-9;
        agree += usize::from(same);
        let (_, best) = exhaustive_best(
            &inst.features,
            inst.proto.view(),
            inst.grid.cols(),
            inst.r,
            w,
        );
        let gap = (best - res.score).max(0.0);
        gap_sum += gap;
        gap_max = gap_max.max(gap);
        optimal += usize::from(gap <= 1e-9);
    }
    let oracle_time = t1.elapsed();

    let compared = instances.len() - too_small;
    let report = BenchReport {
        seed: cfg.seed,
        instances: instances.len(),
        too_small,
        compared,
        oracle_agreement: agree,
        agreement_rate: if compared == 0 {
            1.0
        } else {
            agree as f64 / compared as f64
        },
        mean_score_gap: if compared == 0 {
            0.0
        } else {
            gap_sum / compared as f64
        },
        max_score_gap: gap_max,
        greedy_optimal: optimal,
    };
    if let Some(out) = &a.out {
        write_file(out, to_json(&report).as_bytes())?;
    }
    if agree != compared {
        return Err(Error::Invariant(format!(
            "greedy disagreed with the sequential oracle on {} of {compared} instances",
            compared - agree
        )));
    }
    Ok(format!(
        "{compared} instances: oracle agreement {agree}/{compared}, greedy optimal {optimal}, \
         mean gap {:.6}, max gap {:.6}; greedy {:.3} ms, oracles {:.3} ms",
        report.mean_score_gap,
        report.max_score_gap,
        greedy_time.as_secs_f64() * 1e3,
        oracle_time.as_secs_f64() * 1e3
    ))
}

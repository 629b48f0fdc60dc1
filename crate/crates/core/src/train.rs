//! Seeded minibatch training with Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::QAExample;
use crate::model::{
    argmax, backward_with, forward_with, loss, Gradients, ModelParams, ParamTensor,
};
use crate::projection::LinearProjector;

/// When the frozen answer projector is re-copied from the question projector.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshPolicy {
    /// At the start of every epoch.
    #[default]
    PerEpoch,
    /// Once, when training starts.
    Once,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub refresh: RefreshPolicy,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn new(epochs: usize, lr: f64, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            epochs,
            lr,
            batch_size,
            seed,
            refresh: RefreshPolicy::PerEpoch,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

struct Adam {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = ParamTensor::ALL
            .iter()
            .map(|t| vec![0.0; params.tensor(*t).len()])
            .collect();
        Adam {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &Gradients,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for (slot, t) in ParamTensor::ALL.iter().enumerate() {
            let g = grads.tensor(*t);
            let p = params.tensor_mut(*t)?;
            let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Owns the parameters during training and steps through epochs.
pub struct Trainer<'a> {
    params: ModelParams,
    answer: LinearProjector,
    dataset: &'a [QAExample],
    config: TrainConfig,
    adam: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(params: ModelParams, dataset: &'a [QAExample], config: TrainConfig) -> Result<Self> {
        let Some(first) = dataset.first() else {
            return Err(Error::Argument("cannot train on an empty dataset".into()));
        };
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !config.lr.is_finite() || config.lr < 0.0 {
            return Err(Error::Config(format!(
                "invalid learning rate {}",
                config.lr
            )));
        }
        let pathway = first.pathway();
        if let Some(ex) = dataset.iter().find(|e| e.pathway() != pathway) {
            return Err(Error::validation(
                &ex.qa_id,
                "dataset mixes coordinate and text answer pathways",
            ));
        }
        let answer = params.answer_projector();
        let adam = Adam::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(2);
        Ok(Trainer {
            params,
            answer,
            dataset,
            config,
            adam,
            rng,
            order: (0..dataset.len()).collect(),
            epoch: 0,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// The frozen snapshot currently used for text answers.
    pub fn answer_projector(&self) -> &LinearProjector {
        &self.answer
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    /// One pass over the dataset in a freshly shuffled order. Gradients are
    /// summed over each minibatch in example order.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        if self.config.refresh == RefreshPolicy::PerEpoch {
            self.answer = self.params.question_projector.freeze_copy();
        }
        self.order.shuffle(&mut self.rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in self.order.chunks(self.config.batch_size) {
            let mut acc = Gradients::zeros_like(&self.params);
            for &i in batch {
                let ex = &self.dataset[i];
                let step = backward_with(&self.params, &self.answer, ex)?;
                total += step.loss;
                if argmax(&step.logits) == ex.correct_index {
                    correct += 1;
                }
                acc.accumulate(&step.gradients);
            }
            self.adam.apply(&mut self.params, &acc, &self.config)?;
        }
        self.epoch += 1;
        let n = self.dataset.len() as f64;
        Ok(EpochLog {
            epoch: self.epoch,
            loss: total / n,
            accuracy: correct as f64 / n,
        })
    }
}

pub fn train(
    params: ModelParams,
    dataset: &[QAExample],
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(params, dataset, config.clone())?;
    let mut log = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        log.push(trainer.run_epoch()?);
    }
    Ok((trainer.into_params(), log))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Accuracy and mean loss with the answer projector derived from `params`.
pub fn evaluate(params: &ModelParams, dataset: &[QAExample]) -> Result<Evaluation> {
    let answer = params.answer_projector();
    let (mut correct, mut total) = (0usize, 0.0);
    for ex in dataset {
        let f = forward_with(params, &answer, ex)?;
        total += loss(&f.logits, ex.correct_index)?;
        if argmax(&f.logits) == ex.correct_index {
            correct += 1;
        }
    }
    let n = dataset.len();
    let denom = n.max(1) as f64;
    Ok(Evaluation {
        n,
        correct,
        accuracy: correct as f64 / denom,
        mean_loss: total / denom,
    })
}

/// JSON-lines rendering of a metric log.
pub fn metric_log_jsonl(log: &[EpochLog]) -> String {
    log.iter()
        .map(|e| serde_json::to_string(e).expect("log entry serialises") + "\n")
        .collect()
}

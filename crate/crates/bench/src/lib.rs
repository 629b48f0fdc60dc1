//! Seeded workloads shared by the benchmarks.

use protomatch_core::config::{Preset, RunConfig};
use protomatch_core::instance::{random_instance, Instance, InstanceSpec};
use protomatch_core::model::Pathway;
use protomatch_core::synth::{generate, SynthConfig};
use protomatch_core::{ModelParams, QAExample, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SEED: u64 = 42;

/// Matching instances that have at least `k` patches.
pub fn feasible_instances(count: usize, spec: &InstanceSpec) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let inst = random_instance(&mut rng, spec);
        if inst.grid.num_patches() >= inst.proto.nrows() {
            out.push(inst);
        }
    }
    out
}

/// Desk-preset initial parameters and `n` planted training examples.
pub fn planted(n: usize) -> Result<(ModelParams, Vec<QAExample>)> {
    let rc = RunConfig::preset(Preset::Desk);
    let data = generate(&SynthConfig {
        model: rc.model_config(),
        n_train: n,
        n_test: 0,
        pathway: Pathway::Text,
        theta: rc.theta,
    })?;
    let params = ModelParams::init(rc.model_config())?;
    Ok((params, data.train.into_iter().map(|s| s.example).collect()))
}

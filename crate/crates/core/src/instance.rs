//! Random matching instances for fuzzing and benchmarks.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::features::EnhancedFeatures;
use crate::geometry::GridSpec;

/// A single-prototype matching problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub features: EnhancedFeatures,
    pub proto: Array2<f64>,
    pub grid: GridSpec,
    pub r: usize,
    pub weights: Array1<f64>,
}

/// Bounds for [`random_instance`].
#[derive(Debug, Clone, Copy)]
pub struct InstanceSpec {
    pub max_patches: usize,
    pub max_k: usize,
    pub max_r: usize,
    pub dim: usize,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        InstanceSpec {
            max_patches: 16,
            max_k: 3,
            max_r: 3,
            dim: 8,
        }
    }
}

/// Grid of at most `max_patches` patches, `k` sub-patches, radius, Gaussian
/// features and prototype rows, and positive slot weights. With probability
/// 1/4 values are rounded to multiples of 1/8 and a patch row and a
/// prototype row are duplicated, so exact ties occur.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, spec: &InstanceSpec) -> Instance {
    let max = spec.max_patches.max(1);
    let (rows, cols) = loop {
        let rows = rng.random_range(1..=max);
        let cols = rng.random_range(1..=max);
        if rows * cols <= max {
            break (rows, cols);
        }
    };
    let grid = GridSpec::from_patches(rows as u32, cols as u32, 4).expect("positive grid");
    let k = rng.random_range(1..=spec.max_k.max(1));
    let r = rng.random_range(0..=spec.max_r);
    let coarse = rng.random_bool(0.25);
    let draw = |rng: &mut R| {
        let v: f64 = rng.sample(StandardNormal);
        if coarse {
            (v * 8.0).round() / 8.0
        } else {
            v
        }
    };
    let n = rows * cols;
    let mut patches = Array2::from_shape_simple_fn((n, spec.dim), || draw(rng));
    let mut proto = Array2::from_shape_simple_fn((k, spec.dim), || draw(rng));
    if coarse && n >= 2 {
        let dup = rng.random_range(1..n);
        let row = patches.row(0).to_owned();
        patches.row_mut(dup).assign(&row);
    }
    if coarse && k >= 2 {
        let row = proto.row(0).to_owned();
        proto.row_mut(k - 1).assign(&row);
    }
    let weights = Array1::from_shape_simple_fn(k, || rng.random_range(0.5..1.5));
    Instance {
        features: EnhancedFeatures { patches },
        proto,
        grid,
        r,
        weights,
    }
}

//! Question-conditioned sub-patch prototypes and slot weights.
//!
//! Prototypes are not free parameters: they are the first `m * k` projected
//! question tokens reshaped row-major to `m x k x D`. Questions shorter than
//! `m * k` tokens are padded cyclically from their first token.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest admissible init noise around `1/k`.
pub const MAX_SLOT_NOISE: f64 = 0.01;

/// Index into the projected question tokens feeding slot `(i, j)`.
pub fn source_token(i: usize, j: usize, k: usize, len: usize) -> usize {
    (i * k + j) % len
}

/// Reshapes projected tokens (`L x D`) into an `m x k x D` prototype tensor.
pub fn build_prototypes(projected: ArrayView2<'_, f64>, m: usize, k: usize) -> Result<Array3<f64>> {
    if m == 0 || k == 0 {
        return Err(Error::Argument(format!("prototype shape {m}x{k} is empty")));
    }
    let len = projected.nrows();
    if len == 0 {
        return Err(Error::Argument("no projected question tokens".into()));
    }
    let d = projected.ncols();
    let mut out = Array3::zeros((m, k, d));
    for i in 0..m {
        for j in 0..k {
            out.slice_mut(s![i, j, ..])
                .assign(&projected.row(source_token(i, j, k, len)));
        }
    }
    Ok(out)
}

/// `1/k` per slot plus uniform noise in `±noise` (`noise <= 0.01`).
pub fn init_slot_weights(k: usize, noise: f64, seed: u64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if !(0.0..=MAX_SLOT_NOISE).contains(&noise) {
        return Err(Error::Argument(format!(
            "slot weight noise {noise} outside [0, {MAX_SLOT_NOISE}]"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = 1.0 / k as f64;
    Ok((0..k)
        .map(|_| {
            if noise > 0.0 {
                base + rng.random_range(-noise..=noise)
            } else {
                base
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotLayout {
    /// One weight per iteration, shared by all prototypes.
    #[default]
    Shared,
    /// A separate row of `k` weights for each prototype.
    PerPrototype,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotNormalization {
    #[default]
    Raw,
    Softmax,
}

/// Learnable weights for the per-iteration similarities of a match.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotWeights {
    values: Array2<f64>,
    normalization: SlotNormalization,
}

impl SlotWeights {
    pub fn new(values: Array2<f64>, normalization: SlotNormalization) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Config("slot weights must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("slot weights must be finite".into()));
        }
        Ok(SlotWeights {
            values: values.as_standard_layout().into_owned(),
            normalization,
        })
    }

    /// Shared layout from a plain vector.
    pub fn shared(values: &[f64]) -> Result<Self> {
        SlotWeights::new(
            Array2::from_shape_vec((1, values.len()), values.to_vec())
                .map_err(|e| Error::Config(e.to_string()))?,
            SlotNormalization::Raw,
        )
    }

    pub fn init(
        layout: SlotLayout,
        normalization: SlotNormalization,
        m: usize,
        k: usize,
        seed: u64,
    ) -> Result<Self> {
        let rows = match layout {
            SlotLayout::Shared => 1,
            SlotLayout::PerPrototype => m,
        };
        let mut values = Array2::zeros((rows, k));
        for (r, mut row) in values.rows_mut().into_iter().enumerate() {
            let w = init_slot_weights(k, MAX_SLOT_NOISE, seed.wrapping_add(r as u64))?;
            row.assign(&ArrayView1::from(&w));
        }
        SlotWeights::new(values, normalization)
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn layout(&self) -> SlotLayout {
        if self.values.nrows() == 1 {
            SlotLayout::Shared
        } else {
            SlotLayout::PerPrototype
        }
    }

    pub fn normalization(&self) -> SlotNormalization {
        self.normalization
    }

    pub fn raw(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn raw_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    /// Row of raw weights used by prototype `i`.
    pub fn row_index(&self, i: usize) -> usize {
        if self.values.nrows() == 1 {
            0
        } else {
            i
        }
    }

    /// Weights applied to iterations `0..k` of prototype `i`.
    pub fn effective(&self, i: usize) -> Array1<f64> {
        let row = self.values.row(self.row_index(i));
        match self.normalization {
            SlotNormalization::Raw => row.to_owned(),
            SlotNormalization::Softmax => softmax(row),
        }
    }
}

pub(crate) fn softmax(x: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = x.mapv(|v| (v - max).exp());
    let z = e.sum();
    e / z
}

/// Prototypes of one question together with the weights used to score them.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    protos: Array3<f64>,
    slot_weights: SlotWeights,
}

impl PrototypeSet {
    pub fn new(protos: Array3<f64>, slot_weights: SlotWeights) -> Result<Self> {
        let (m, k, d) = protos.dim();
        if m == 0 || k == 0 || d == 0 {
            return Err(Error::Config(format!(
                "prototype tensor {m}x{k}x{d} is empty"
            )));
        }
        if slot_weights.k() != k {
            return Err(Error::Config(format!(
                "{} slot weights for {k} sub-patches",
                slot_weights.k()
            )));
        }
        if slot_weights.layout() == SlotLayout::PerPrototype && slot_weights.raw().nrows() != m {
            return Err(Error::Config(format!(
                "{} slot weight rows for {m} prototypes",
                slot_weights.raw().nrows()
            )));
        }
        Ok(PrototypeSet {
            protos,
            slot_weights,
        })
    }

    pub fn m(&self) -> usize {
        self.protos.dim().0
    }

    pub fn k(&self) -> usize {
        self.protos.dim().1
    }

    pub fn dim(&self) -> usize {
        self.protos.dim().2
    }

    pub fn protos(&self) -> &Array3<f64> {
        &self.protos
    }

    /// `k x D` sub-patches of prototype `i`.
    pub fn prototype(&self, i: usize) -> ArrayView2<'_, f64> {
        self.protos.slice(s![i, .., ..])
    }

    pub fn slot_weights(&self) -> &SlotWeights {
        &self.slot_weights
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tokens(n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |(t, c)| (t * 10 + c) as f64)
    }

    #[test]
    fn row_major_reshape() {
        let p = build_prototypes(tokens(6, 2).view(), 2, 3).unwrap();
        assert_eq!(p.slice(s![1, 2, ..]), tokens(6, 2).row(5));
        let flat: Vec<f64> = p.iter().copied().collect();
        let want: Vec<f64> = tokens(6, 2).iter().copied().collect();
        assert_eq!(flat, want);
    }

    #[test]
    fn cyclic_padding_of_single_token() {
        let t = tokens(1, 3);
        let p = build_prototypes(t.view(), 2, 3).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(p.slice(s![i, j, ..]), t.row(0));
            }
        }
    }

    #[test]
    fn cyclic_padding_index_arithmetic() {
        // 4 tokens, 2x3 slots: 0 1 2 / 3 0 1
        let got: Vec<usize> = (0..2)
            .flat_map(|i| (0..3).map(move |j| source_token(i, j, 3, 4)))
            .collect();
        assert_eq!(got, vec![0, 1, 2, 3, 0, 1]);
    }

    #[test]
    fn tokens_past_m_times_k_unused() {
        let mut t = tokens(10, 2);
        let a = build_prototypes(t.view(), 2, 3).unwrap();
        t.slice_mut(s![6.., ..]).fill(-99.0);
        let b = build_prototypes(t.view(), 2, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(build_prototypes(tokens(3, 2).view(), 0, 3).is_err());
        assert!(build_prototypes(tokens(3, 2).view(), 2, 0).is_err());
    }

    #[test]
    fn slot_weight_init() {
        assert_eq!(init_slot_weights(1, 0.0, 0).unwrap(), vec![1.0]);
        assert_eq!(init_slot_weights(3, 0.0, 0).unwrap(), vec![1.0 / 3.0; 3]);
        let w = init_slot_weights(3, 0.01, 42).unwrap();
        assert_eq!(w, init_slot_weights(3, 0.01, 42).unwrap());
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() <= 0.01));
        assert!(init_slot_weights(3, 0.5, 42).is_err());
        assert!(init_slot_weights(0, 0.0, 42).is_err());
    }

    #[test]
    fn softmax_normalisation() {
        let w = SlotWeights::new(
            Array2::from_shape_vec((1, 3), vec![0.0, 0.0, 0.0]).unwrap(),
            SlotNormalization::Softmax,
        )
        .unwrap();
        let e = w.effective(5);
        assert!(e.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
    }
}

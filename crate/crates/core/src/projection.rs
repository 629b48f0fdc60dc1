//! Affine projectors into the shared feature space.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;

use crate::error::{Error, Result};
use crate::features::TokenEmbeddings;
use crate::geometry::{BBox, GridSpec};

/// `out = x · weights + bias`, with `weights` shaped `d_in x d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProjector {
    weights: Array2<f64>,
    bias: Array1<f64>,
    frozen: bool,
}

impl LinearProjector {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.ncols() != bias.len() {
            return Err(Error::Config(format!(
                "projector weights are {}x{} but bias has {} entries",
                weights.nrows(),
                weights.ncols(),
                bias.len()
            )));
        }
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::Config(
                "projector dimensions must be positive".into(),
            ));
        }
        Ok(LinearProjector {
            weights: weights.as_standard_layout().into_owned(),
            bias,
            frozen: false,
        })
    }

    /// Weights uniform in `±1/sqrt(d_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        let weights =
            Array2::from_shape_simple_fn((d_in, d_out), || rng.random_range(-scale..scale));
        LinearProjector {
            weights,
            bias: Array1::zeros(d_out),
            frozen: false,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mutable access to `(weights, bias)`. Fails on a frozen projector.
    pub fn params_mut(&mut self) -> Result<(&mut Array2<f64>, &mut Array1<f64>)> {
        if self.frozen {
            return Err(Error::FrozenParameters);
        }
        Ok((&mut self.weights, &mut self.bias))
    }

    /// Snapshot of the current parameters that rejects further updates.
    pub fn freeze_copy(&self) -> LinearProjector {
        LinearProjector {
            weights: self.weights.clone(),
            bias: self.bias.clone(),
            frozen: true,
        }
    }

    pub fn project(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if x.len() != self.d_in() {
            return Err(Error::Config(format!(
                "projector expects {} inputs, got {}",
                self.d_in(),
                x.len()
            )));
        }
        Ok(x.dot(&self.weights) + &self.bias)
    }

    /// Projects every token; output is `L x d_out`.
    pub fn project_tokens(&self, e: &TokenEmbeddings) -> Result<Array2<f64>> {
        if e.dim() != self.d_in() {
            return Err(Error::Config(format!(
                "projector expects {}-dim tokens, got {}",
                self.d_in(),
                e.dim()
            )));
        }
        Ok(e.tokens().mapv(f64::from).dot(&self.weights) + &self.bias)
    }
}

/// Projects a box, normalised by image size, into the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordProjector {
    inner: LinearProjector,
}

impl CoordProjector {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != 4 {
            return Err(Error::Config(format!(
                "coordinate projector needs 4 input rows, got {}",
                weights.nrows()
            )));
        }
        Ok(CoordProjector {
            inner: LinearProjector::new(weights, bias)?,
        })
    }

    pub fn init<R: Rng + ?Sized>(d_out: usize, rng: &mut R) -> Self {
        CoordProjector {
            inner: LinearProjector::init(4, d_out, rng),
        }
    }

    pub fn d_out(&self) -> usize {
        self.inner.d_out()
    }

    pub fn weights(&self) -> &Array2<f64> {
        self.inner.weights()
    }

    pub fn bias(&self) -> &Array1<f64> {
        self.inner.bias()
    }

    pub fn params_mut(&mut self) -> (&mut Array2<f64>, &mut Array1<f64>) {
        self.inner
            .params_mut()
            .expect("coordinate projectors are never frozen")
    }

    pub fn project(&self, b: &BBox, grid: &GridSpec) -> Result<Array1<f64>> {
        let z = normalize_box(b, grid)?;
        self.inner.project(ArrayView1::from(&z))
    }
}

/// `(x_min/W, y_min/H, x_max/W, y_max/H)`.
pub fn normalize_box(b: &BBox, grid: &GridSpec) -> Result<[f64; 4]> {
    if !grid.contains(b) {
        return Err(Error::Argument(format!(
            "box {b:?} lies outside the {}x{} image",
            grid.image_width(),
            grid.image_height()
        )));
    }
    let w = f64::from(grid.image_width());
    let h = f64::from(grid.image_height());
    Ok([
        f64::from(b.x_min()) / w,
        f64::from(b.y_min()) / h,
        f64::from(b.x_max()) / w,
        f64::from(b.y_max()) / h,
    ])
}

pub fn project_coords(c: &CoordProjector, b: &BBox, grid: &GridSpec) -> Result<Array1<f64>> {
    c.project(b, grid)
}

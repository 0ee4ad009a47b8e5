//! Linear projection of visual tokens into the language model's embedding width.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use super::{CompressionError, Result};
use crate::rng::SplitMix64;

/// Width of the language model's token embeddings.
pub const DEFAULT_PROJECTED_DIM: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    /// `[d, d']`
    pub weight: Array2<f32>,
    /// `[d']`
    pub bias: Array1<f32>,
}

impl Projection {
    pub fn new(weight: Array2<f32>, bias: Array1<f32>) -> Result<Self> {
        let p = Self { weight, bias };
        p.validate()?;
        Ok(p)
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bias.len() != self.output_dim() {
            return Err(CompressionError::DimMismatch(format!(
                "projection weight {:?} with bias of length {}",
                self.weight.dim(),
                self.bias.len()
            )));
        }
        if self.weight.iter().chain(self.bias.iter()).any(|v| !v.is_finite()) {
            return Err(CompressionError::NonFinite("projection parameters".into()));
        }
        Ok(())
    }

    /// Identity on the first `d` output features, zeros after.
    pub fn identity_padded(d: usize, d_out: usize) -> Self {
        let mut weight = Array2::zeros((d, d_out));
        for i in 0..d.min(d_out) {
            weight[[i, i]] = 1.0;
        }
        Self { weight, bias: Array1::zeros(d_out) }
    }

    /// Untrained weights drawn from `N(0, 1/d)` with zero bias.
    pub fn seeded(seed: u64, d: usize, d_out: usize) -> Self {
        let mut rng = SplitMix64::with_stream(seed, 0x50524F4A);
        let scale = 1.0 / (d as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((d, d_out), || (rng.normal() * scale) as f32);
        Self { weight, bias: Array1::zeros(d_out) }
    }

    /// `vision · W + b`, each row accumulated sequentially in f64. Rows run in
    /// parallel; the result does not depend on scheduling.
    pub fn project(&self, vision: ArrayView2<'_, f32>) -> Result<Array2<f32>> {
        let (rows, d) = vision.dim();
        if d != self.input_dim() {
            return Err(CompressionError::DimMismatch(format!(
                "vision width {d}, projection expects {}",
                self.input_dim()
            )));
        }
        let d_out = self.output_dim();
        let projected: Vec<Vec<f32>> = (0..rows)
            .into_par_iter()
            .map(|i| {
                let mut acc: Vec<f64> = self.bias.iter().map(|b| *b as f64).collect();
                for (x, w_row) in vision.row(i).iter().zip(self.weight.outer_iter()) {
                    let x = *x as f64;
                    for (a, w) in acc.iter_mut().zip(w_row.iter()) {
                        *a += x * *w as f64;
                    }
                }
                acc.into_iter().map(|a| a as f32).collect()
            })
            .collect();
        let mut out = Array2::<f32>::zeros((rows, d_out));
        for (mut dst, src) in out.axis_iter_mut(Axis(0)).zip(projected) {
            dst.assign(&ndarray::ArrayView1::from(&src));
        }
        Ok(out)
    }
}

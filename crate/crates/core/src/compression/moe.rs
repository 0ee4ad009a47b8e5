//! Token-wise mixture of experts and slice averaging (the global pathway).
//!
//! Every token of every slice is gated independently:
//! `alpha = softmax(W_g z + b_g)`, and the refined token is
//! `sum_{e in topk(alpha)} alpha_e * expert_e(z)`. The selected weights are
//! used as-is; they are not renormalized over the top-k set, so the output
//! magnitude shrinks when routing is sparse.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{top_indices, CompressionError, Result};
use crate::rng::SplitMix64;

/// Hidden-layer nonlinearity of an expert MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Linear expert; with identity weights the expert is the identity map.
    Identity,
    /// tanh approximation of GELU.
    Gelu,
    Silu,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Gelu => 1,
            Activation::Silu => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Gelu),
            2 => Some(Activation::Silu),
            _ => None,
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Gelu => {
                const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }
}

/// One expert: `d -> hidden -> d` with a single nonlinearity.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertMlp {
    /// `[hidden, d]`
    pub w_in: Array2<f32>,
    pub b_in: Array1<f32>,
    /// `[d, hidden]`
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
    pub activation: Activation,
}

impl ExpertMlp {
    /// Linear expert with identity weights and zero biases.
    pub fn identity(d: usize) -> Self {
        Self {
            w_in: Array2::eye(d),
            b_in: Array1::zeros(d),
            w_out: Array2::eye(d),
            b_out: Array1::zeros(d),
            activation: Activation::Identity,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_in.nrows()
    }

    fn validate(&self, d: usize) -> Result<()> {
        let h = self.hidden_dim();
        if self.w_in.dim() != (h, d)
            || self.b_in.len() != h
            || self.w_out.dim() != (d, h)
            || self.b_out.len() != d
        {
            return Err(CompressionError::DimMismatch(format!(
                "expert shapes w_in {:?} b_in {} w_out {:?} b_out {} do not form a {d}->{h}->{d} MLP",
                self.w_in.dim(),
                self.b_in.len(),
                self.w_out.dim(),
                self.b_out.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, z: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = self
            .w_in
            .outer_iter()
            .zip(self.b_in.iter())
            .map(|(row, b)| {
                let pre = row.iter().zip(z).fold(*b as f64, |acc, (w, x)| acc + *w as f64 * x);
                self.activation.apply(pre)
            })
            .collect();
        self.w_out
            .outer_iter()
            .zip(self.b_out.iter())
            .map(|(row, b)| row.iter().zip(&hidden).fold(*b as f64, |acc, (w, x)| acc + *w as f64 * x))
            .collect()
    }
}

/// Gate and experts of the token-wise MoE.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    /// `[E, d]`
    pub gate_w: Array2<f32>,
    /// `[E]`
    pub gate_b: Array1<f32>,
    pub experts: Vec<ExpertMlp>,
    pub top_k: usize,
}

impl MoeParams {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.gate_w.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.experts.len();
        let d = self.dim();
        if e == 0 || self.gate_w.nrows() != e || self.gate_b.len() != e {
            return Err(CompressionError::DimMismatch(format!(
                "gate {:?} / bias {} for {e} experts",
                self.gate_w.dim(),
                self.gate_b.len()
            )));
        }
        if self.top_k == 0 || self.top_k > e {
            return Err(CompressionError::InvalidConfig(format!(
                "top_k={} must be in 1..={e}",
                self.top_k
            )));
        }
        for ex in &self.experts {
            ex.validate(d)?;
        }
        Ok(())
    }

    /// `E` identity experts with a zero gate: every token is routed uniformly.
    pub fn identity(d: usize, experts: usize, top_k: usize) -> Self {
        Self {
            gate_w: Array2::zeros((experts, d)),
            gate_b: Array1::zeros(experts),
            experts: (0..experts).map(|_| ExpertMlp::identity(d)).collect(),
            top_k,
        }
    }

    /// Untrained weights drawn from `N(0, 1/fan_in)` with zero biases.
    pub fn seeded(seed: u64, d: usize, num_experts: usize, top_k: usize, hidden: usize) -> Self {
        let mut rng = SplitMix64::with_stream(seed, 0x4D6F45);
        let mut gauss = |rows: usize, cols: usize| {
            let scale = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || (rng.normal() * scale) as f32)
        };
        let gate_w = gauss(num_experts, d);
        let experts = (0..num_experts)
            .map(|_| ExpertMlp {
                w_in: gauss(hidden, d),
                b_in: Array1::zeros(hidden),
                w_out: gauss(d, hidden),
                b_out: Array1::zeros(d),
                activation: Activation::Gelu,
            })
            .collect();
        Self { gate_w, gate_b: Array1::zeros(num_experts), experts, top_k }
    }
}

/// Gate weights `softmax(W_g z + b_g)` for one token, computed in f64.
pub fn moe_gate(z: ArrayView1<'_, f32>, p: &MoeParams) -> Result<Vec<f64>> {
    if z.len() != p.dim() {
        return Err(CompressionError::DimMismatch(format!(
            "token has {} features, gate expects {}",
            z.len(),
            p.dim()
        )));
    }
    let logits: Vec<f64> = p
        .gate_w
        .outer_iter()
        .zip(p.gate_b.iter())
        .map(|(row, b)| row.iter().zip(z.iter()).fold(*b as f64, |acc, (w, x)| acc + *w as f64 * *x as f64))
        .collect();
    Ok(softmax(&logits))
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Refines one token; returns the f64 accumulator.
pub fn moe_refine_token(z: ArrayView1<'_, f32>, p: &MoeParams) -> Result<Vec<f64>> {
    let gates = moe_gate(z, p)?;
    let zf: Vec<f64> = z.iter().map(|x| *x as f64).collect();
    let mut out = vec![0.0f64; zf.len()];
    for e in top_indices(&gates, p.top_k) {
        let y = p.experts[e].forward(&zf);
        for (o, v) in out.iter_mut().zip(y) {
            *o += gates[e] * v;
        }
    }
    Ok(out)
}

/// Applies the MoE to every token of an `[N, d]` slice; the shape is kept.
pub fn moe_refine_slice(slice: ArrayView2<'_, f32>, p: &MoeParams) -> Result<Array2<f32>> {
    p.validate()?;
    let (n, d) = slice.dim();
    if d != p.dim() {
        return Err(CompressionError::DimMismatch(format!("slice width {d}, MoE width {}", p.dim())));
    }
    let mut out = Array2::<f32>::zeros((n, d));
    for (src, mut dst) in slice.outer_iter().zip(out.outer_iter_mut()) {
        let refined = moe_refine_token(src, p)?;
        for (o, v) in dst.iter_mut().zip(refined) {
            *o = v as f32;
        }
    }
    Ok(out)
}

/// Elementwise mean over refined slices, accumulated sequentially in f64.
pub fn aggregate_global(refined: &[Array2<f32>]) -> Result<Array2<f32>> {
    let first = refined.first().ok_or(CompressionError::EmptyVolume)?;
    let shape = first.dim();
    let mut acc = Array2::<f64>::zeros(shape);
    for (t, s) in refined.iter().enumerate() {
        if s.dim() != shape {
            return Err(CompressionError::DimMismatch(format!(
                "slice {t} has shape {:?}, expected {shape:?}",
                s.dim()
            )));
        }
        acc.zip_mut_with(s, |a, v| *a += *v as f64);
    }
    let t = refined.len() as f64;
    Ok(acc.mapv(|v| (v / t) as f32))
}

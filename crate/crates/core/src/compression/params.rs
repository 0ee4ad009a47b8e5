//! `CTPW` parameter files holding the MoE and projection weights.
//!
//! ```text
//! "CTPW" | u32 version=1 | u32 E | u32 k | u32 d | u32 d' | u32 hidden | u32 activation
//! f32 gate_w[E][d] | f32 gate_b[E]
//! per expert: f32 w_in[hidden][d] | b_in[hidden] | w_out[d][hidden] | b_out[d]
//! f32 proj_w[d][d'] | f32 proj_b[d']
//! ```
//!
//! All experts in one file share the hidden width and activation.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::moe::{Activation, ExpertMlp, MoeParams};
use super::projection::Projection;
use crate::container::{f32_bytes, write_atomic, ContainerReader, ContainerWriter, FormatError, Result};

pub const CTPW_MAGIC: &[u8; 4] = b"CTPW";

pub fn params_to_bytes(moe: &MoeParams, proj: &Projection) -> Result<Vec<u8>> {
    moe.validate().map_err(|e| FormatError::Invariant(e.to_string()))?;
    proj.validate().map_err(|e| FormatError::Invariant(e.to_string()))?;
    let d = moe.dim();
    if proj.input_dim() != d {
        return Err(FormatError::InvalidDims(format!(
            "MoE width {d} but projection input {}",
            proj.input_dim()
        )));
    }
    let first = &moe.experts[0];
    let (hidden, activation) = (first.hidden_dim(), first.activation);
    if moe.experts.iter().any(|e| e.hidden_dim() != hidden || e.activation != activation) {
        return Err(FormatError::InvalidField(
            "experts must share hidden width and activation".into(),
        ));
    }

    let mut w = ContainerWriter::new(CTPW_MAGIC);
    for v in [moe.num_experts(), moe.top_k, d, proj.output_dim(), hidden] {
        w.put_u32(u32::try_from(v).map_err(|_| FormatError::InvalidDims(format!("{v} exceeds u32")))?);
    }
    w.put_u32(activation.code());
    w.put_f32s(moe.gate_w.iter());
    w.put_f32s(moe.gate_b.iter());
    for e in &moe.experts {
        w.put_f32s(e.w_in.iter());
        w.put_f32s(e.b_in.iter());
        w.put_f32s(e.w_out.iter());
        w.put_f32s(e.b_out.iter());
    }
    w.put_f32s(proj.weight.iter());
    w.put_f32s(proj.bias.iter());
    Ok(w.finish())
}

pub fn params_from_bytes(bytes: &[u8]) -> Result<(MoeParams, Projection)> {
    let mut r = ContainerReader::open(bytes, CTPW_MAGIC)?;
    let e = r.u32()? as usize;
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let d_out = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let code = r.u32()?;
    let activation = Activation::from_code(code)
        .ok_or_else(|| FormatError::InvalidField(format!("unknown activation code {code}")))?;
    if e == 0 || k == 0 || k > e || d == 0 || d_out == 0 || hidden == 0 {
        return Err(FormatError::InvalidDims(format!(
            "E={e} k={k} d={d} d'={d_out} hidden={hidden}"
        )));
    }

    let per_expert = [
        f32_bytes(&[hidden, d])?,
        f32_bytes(&[hidden])?,
        f32_bytes(&[d, hidden])?,
        f32_bytes(&[d])?,
    ]
    .iter()
    .sum::<u64>();
    let expected = f32_bytes(&[e, d])?
        + f32_bytes(&[e])?
        + per_expert
            .checked_mul(e as u64)
            .ok_or_else(|| FormatError::InvalidDims("expert payload overflows".into()))?
        + f32_bytes(&[d, d_out])?
        + f32_bytes(&[d_out])?;
    r.expect_remaining(expected)?;

    let mat = |rows: usize, cols: usize, v: Vec<f32>| {
        Array2::from_shape_vec((rows, cols), v).map_err(|err| FormatError::InvalidDims(err.to_string()))
    };
    let gate_w = mat(e, d, r.f32s(e * d)?)?;
    let gate_b = Array1::from(r.f32s(e)?);
    let mut experts = Vec::with_capacity(e);
    for _ in 0..e {
        let w_in = mat(hidden, d, r.f32s(hidden * d)?)?;
        let b_in = Array1::from(r.f32s(hidden)?);
        let w_out = mat(d, hidden, r.f32s(d * hidden)?)?;
        let b_out = Array1::from(r.f32s(d)?);
        experts.push(ExpertMlp { w_in, b_in, w_out, b_out, activation });
    }
    let weight = mat(d, d_out, r.f32s(d * d_out)?)?;
    let bias = Array1::from(r.f32s(d_out)?);
    r.finish()?;

    let moe = MoeParams { gate_w, gate_b, experts, top_k: k };
    let proj = Projection { weight, bias };
    proj.validate().map_err(|err| FormatError::Invariant(err.to_string()))?;
    Ok((moe, proj))
}

pub fn save_params(path: impl AsRef<Path>, moe: &MoeParams, proj: &Projection) -> Result<()> {
    write_atomic(path.as_ref(), &params_to_bytes(moe, proj)?)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<(MoeParams, Projection)> {
    params_from_bytes(&fs::read(path)?)
}

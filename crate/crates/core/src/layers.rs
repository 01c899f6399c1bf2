//! Transformer building blocks and the GPAS gate.
//!
//! Everything here is a pure function of tape variables; parameters are
//! owned elsewhere and bound to the tape by the caller.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, GateActivation, Tape, Var};
use crate::error::{Error, Result};

/// How the gate's subtraction is wired into the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum GpasVariant {
    /// `x - Act(a) * sg(x)`: scales values, identity Jacobian in `x`.
    #[default]
    StopGrad,
    /// `x - Act(a) * x`: same values, but the gradient is scaled too.
    Naive,
}

/// Per-layer gate settings. The scalar `alpha` itself lives in the
/// parameter store so it can be optimised with everything else.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GpasGate {
    pub activation: GateActivation,
    pub variant: GpasVariant,
    pub learnable: bool,
    /// Max |grad(alpha)| per step.
    pub grad_clip: Option<f64>,
}

impl GpasGate {
    /// Applies the gate to `x` with scalar parameter `alpha` (shape `[1]`).
    pub fn apply<T: Float>(&self, tape: &Tape<T>, x: Var, alpha: Var) -> Result<Var> {
        match self.variant {
            GpasVariant::StopGrad => gpas_apply(tape, x, alpha, self.activation),
            GpasVariant::Naive => gpas_apply_naive(tape, x, alpha, self.activation),
        }
    }
}

/// `x - Act(alpha) * sg(x)`.
///
/// Forward values are `x * (1 - Act(alpha))`; the gradient reaching `x` is the
/// upstream gradient untouched, and `alpha` receives
/// `-Act'(alpha) * <x, upstream>`.
pub fn gpas_apply<T: Float>(tape: &Tape<T>, x: Var, alpha: Var, act: GateActivation) -> Result<Var> {
    let a = tape.activation(alpha, act)?;
    let held = tape.stop_gradient(x)?;
    let shrink = tape.mul(a, held)?;
    tape.sub(x, shrink)
}

/// `x - Act(alpha) * x`. Forward is bitwise equal to [`gpas_apply`].
pub fn gpas_apply_naive<T: Float>(tape: &Tape<T>, x: Var, alpha: Var, act: GateActivation) -> Result<Var> {
    let a = tape.activation(alpha, act)?;
    let shrink = tape.mul(a, x)?;
    tape.sub(x, shrink)
}

pub fn rmsnorm<T: Float>(tape: &Tape<T>, x: Var, gain: Var, eps: f64) -> Result<Var> {
    tape.rms_norm(x, gain, T::of(eps))
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub n_heads: usize,
    pub rope_base: f64,
}

/// Causal multi-head self-attention with rotary positions on `[batch, seq, d]`.
pub fn attention<T: Float>(tape: &Tape<T>, x: Var, p: &AttentionParams) -> Result<Var> {
    let shape = tape.shape(x);
    let [b, t, d] = shape[..] else {
        return Err(Error::InvalidShape {
            op: "attention",
            shape,
            reason: "expected [batch, seq, d_model]".into(),
        });
    };
    if p.n_heads == 0 || d % p.n_heads != 0 {
        return Err(Error::Config(format!("d_model {d} not divisible by {} heads", p.n_heads)));
    }
    let dh = d / p.n_heads;
    let heads = |w: Var| -> Result<Var> {
        let y = tape.matmul(x, w)?;
        let y = tape.reshape(y, &[b, t, p.n_heads, dh])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = tape.rope(heads(p.wq)?, p.rope_base)?;
    let k = tape.rope(heads(p.wk)?, p.rope_base)?;
    let v = heads(p.wv)?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let probs = tape.causal_softmax(scores, T::of(1.0 / (dh as f64).sqrt()))?;
    let ctx = tape.matmul(probs, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, t, d])?;
    tape.matmul(ctx, p.wo)
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub w_gate: Var,
    pub w_up: Var,
    pub w_down: Var,
}

/// `(SiLU(x W_gate) * (x W_up)) W_down`.
pub fn ffn_swiglu<T: Float>(tape: &Tape<T>, x: Var, p: &FfnParams) -> Result<Var> {
    let g = tape.matmul(x, p.w_gate)?;
    let g = tape.silu(g)?;
    let u = tape.matmul(x, p.w_up)?;
    let h = tape.mul(g, u)?;
    tape.matmul(h, p.w_down)
}

/// Token lookup for a `[batch, seq]` id grid, optionally scaled by √d.
pub fn embed<T: Float>(
    tape: &Tape<T>,
    table: Var,
    ids: &[usize],
    batch: usize,
    seq: usize,
    scale_embed: bool,
) -> Result<Var> {
    let e = tape.embedding(table, ids, &[batch, seq])?;
    if scale_embed {
        let d = tape.shape(table)[1];
        tape.scale(e, T::of((d as f64).sqrt()))
    } else {
        Ok(e)
    }
}

/// SwiGLU hidden width: 8/3 of `d_model`, rounded up to a multiple of 8.
pub fn default_ffn_dim(d_model: usize) -> usize {
    let raw = (8 * d_model).div_ceil(3);
    raw.div_ceil(8) * 8
}

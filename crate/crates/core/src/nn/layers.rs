//! Parameterized building blocks. Each block only remembers its parameter
//! names; values live in a [`ParamStore`] and are loaded onto a [`Tape`] per
//! forward pass.

use rand::Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], bound, rng)
}

/// `y = x W + b` with `W: in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        group: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        let bias = format!("{name}.bias");
        ps.insert(&weight, group, xavier(in_dim, out_dim, rng))?;
        ps.insert(&bias, group, Tensor::zeros(&[1, out_dim]))?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(ps, &self.weight)?;
        let b = tape.param(ps, &self.bias)?;
        linear(tape, x, w, b)
    }

    /// Set weight and bias to zero (used to switch a path off).
    pub fn zero(&self, ps: &mut ParamStore) {
        for n in [&self.weight, &self.bias] {
            if let Some(t) = ps.get_mut(n) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// `x W + b` on existing tape nodes.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

/// Layer normalization with learned gain and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: String,
    pub shift: String,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, group: &str, dim: usize) -> Result<Self> {
        let gain = format!("{name}.gain");
        let shift = format!("{name}.shift");
        ps.insert(&gain, group, Tensor::full(&[1, dim], 1.0))?;
        ps.insert(&shift, group, Tensor::zeros(&[1, dim]))?;
        Ok(Self { gain, shift })
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(ps, &self.gain)?;
        let s = tape.param(ps, &self.shift)?;
        let n = tape.layernorm(x, LN_EPS)?;
        let y = tape.mul(n, g)?;
        tape.add(y, s)
    }
}

/// Two-layer ReLU MLP.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        group: &str,
        dim: usize,
        hidden: usize,
        out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), group, dim, hidden, rng)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), group, hidden, out, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, ps, x)?;
        let h = tape.relu(h)?;
        self.fc2.forward(tape, ps, h)
    }
}

/// Standard multi-head scaled dot-product attention with input and output
/// projections.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention result with the per-head weight matrices (`n_q × n_kv`, rows sum to 1).
pub struct AttnOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    /// `kv_dim` is the feature width of keys/values before projection.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        group: &str,
        dim: usize,
        kv_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::dim(
                "multi_head_attention",
                format!("feature dim {dim} not divisible by {heads} heads"),
            ));
        }
        Ok(Self {
            q_proj: Linear::new(ps, &format!("{name}.q"), group, dim, dim, rng)?,
            k_proj: Linear::new(ps, &format!("{name}.k"), group, kv_dim, dim, rng)?,
            v_proj: Linear::new(ps, &format!("{name}.v"), group, kv_dim, dim, rng)?,
            out_proj: Linear::new(ps, &format!("{name}.out"), group, dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// `bias`, when given, is an `n_q × n_kv` additive term on the attention logits
    /// shared by all heads.
    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &ParamStore,
        query: Var,
        key: Var,
        value: Var,
        bias: Option<Var>,
    ) -> Result<AttnOutput> {
        let nk = tape.value(key).rows();
        let nv = tape.value(value).rows();
        if nk != nv {
            return Err(Error::dim(
                "multi_head_attention",
                format!("key has {nk} rows, value has {nv}"),
            ));
        }
        let q = self.q_proj.forward(tape, ps, query)?;
        let k = self.k_proj.forward(tape, ps, key)?;
        let v = self.v_proj.forward(tape, ps, value)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, 1, h * dh, dh)?,
                    tape.slice(k, 1, h * dh, dh)?,
                    tape.slice(v, 1, h * dh, dh)?,
                )
            };
            let mut logits = tape.matmul_t(qh, kh)?;
            logits = tape.scale(logits, scale)?;
            if let Some(b) = bias {
                logits = tape.add(logits, b)?;
            }
            let a = tape.softmax(logits, 1)?;
            outs.push(tape.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        let output = self.out_proj.forward(tape, ps, cat)?;
        Ok(AttnOutput { output, weights })
    }

    /// Zero the value and output projections, making the block output exactly zero.
    pub fn zero_value_path(&self, ps: &mut ParamStore) {
        self.v_proj.zero(ps);
        self.out_proj.zero(ps);
    }
}

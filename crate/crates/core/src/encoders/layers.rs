use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamGroup, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tape, Var};

pub const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

/// Transformer sizes shared by the text and vision encoders.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            ff: 128,
            max_len: 24,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.ff == 0 || self.max_len == 0 {
            return Err(Error::Config("ff and max_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Weight `[inp×out]` drawn from normal(0, 0.02), zero bias.
    pub fn normal<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        inp: usize,
        out: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            w: store.normal(format!("{name}.w"), group, &[inp, out], INIT_STD, rng),
            b: store.filled(format!("{name}.b"), group, &[out], 0.0),
        }
    }

    /// Weight and bias uniform in `±1/sqrt(inp)`.
    pub fn uniform<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        inp: usize,
        out: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        Self {
            w: store.uniform(format!("{name}.w"), group, &[inp, out], bound, rng),
            b: store.uniform(format!("{name}.b"), group, &[out], bound, rng),
        }
    }

    /// `x·W + b` for `x` of shape `[n×inp]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.w))?;
        Ok(tape.add_row(y, p.var(self.b))?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, d: usize) -> Self {
        Self {
            gain: store.filled(format!("{name}.g"), group, &[d], 1.0),
            bias: store.filled(format!("{name}.b"), group, &[d], 0.0),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, p.var(self.gain), p.var(self.bias), T::lit(LN_EPS))?)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ff(ln(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        cfg: &EncoderConfig,
        rng: &mut SplitMix64,
    ) -> Self {
        let d = cfg.d_model;
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), group, d),
            q: Linear::normal(store, &format!("{name}.q"), group, d, d, rng),
            k: Linear::normal(store, &format!("{name}.k"), group, d, d, rng),
            v: Linear::normal(store, &format!("{name}.v"), group, d, d, rng),
            o: Linear::normal(store, &format!("{name}.o"), group, d, d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), group, d),
            ff1: Linear::normal(store, &format!("{name}.ff1"), group, d, cfg.ff, rng),
            ff2: Linear::normal(store, &format!("{name}.ff2"), group, cfg.ff, d, rng),
        }
    }

    /// `x` is `[batch·seq × d]`; `key_mask` (`[batch×seq]`) hides padding keys.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let d = tape.shape(x)[1];
        let dh = d / heads;
        let h = self.ln1.forward(tape, p, x)?;
        let split = |tape: &mut Tape<T>, lin: &Linear| -> Result<Var> {
            let y = lin.forward(tape, p, h)?;
            let y = tape.reshape(y, &[batch, seq, heads, dh])?;
            let y = tape.permute(y, &[0, 2, 1, 3])?;
            Ok(tape.reshape(y, &[batch * heads, seq, dh])?)
        };
        let q = split(tape, &self.q)?;
        let k = split(tape, &self.k)?;
        let v = split(tape, &self.v)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, T::lit(1.0 / (dh as f64).sqrt()))?;
        let attn = match key_mask {
            Some(m) => {
                let expanded: Vec<bool> = m
                    .chunks(seq)
                    .flat_map(|row| std::iter::repeat(row).take(heads).flatten().copied())
                    .collect();
                tape.masked_softmax(scores, &expanded)?
            }
            None => tape.softmax(scores)?,
        };
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.reshape(ctx, &[batch, heads, seq, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[batch * seq, d])?;
        let out = self.o.forward(tape, p, ctx)?;
        let x = tape.add(x, out)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.ff1.forward(tape, p, h)?;
        let h = tape.gelu(h)?;
        let h = self.ff2.forward(tape, p, h)?;
        Ok(tape.add(x, h)?)
    }
}

/// Output projection into the shared embedding space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionHead {
    pub linear: Linear,
    pub dim: usize,
}

impl ProjectionHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        d_model: usize,
        dim: usize,
        rng: &mut SplitMix64,
    ) -> Self {
        Self {
            linear: Linear::uniform(store, name, ParamGroup::Head, d_model, dim, rng),
            dim,
        }
    }

    /// Projects pooled `[n×d]` features and L2-normalizes each row.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, pooled: Var) -> Result<Var> {
        let y = self.linear.forward(tape, p, pooled)?;
        Ok(tape.l2_normalize(y, 1)?)
    }
}

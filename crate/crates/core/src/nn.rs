//! Layer building blocks recorded on a [`Tape`].

use rand::Rng;

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = ps.xavier(format!("{name}.weight"), in_dim, out_dim, rng);
        let bias = Some(ps.zeros(format!("{name}.bias"), 1, out_dim));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn no_bias(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let weight = ps.xavier(format!("{name}.weight"), in_dim, out_dim, rng);
        Self { weight, bias: None, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Two linear layers with a ReLU (and dropout) between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
    pub dropout: f64,
}

impl Mlp {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(ps, &format!("{name}.0"), in_dim, hidden, rng),
            out: Linear::new(ps, &format!("{name}.1"), hidden, out_dim, rng),
            dropout,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden.forward(tape, x);
        let h = tape.relu(h);
        let h = tape.dropout(h, self.dropout);
        self.out.forward(tape, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self { gamma: ps.ones(format!("{name}.gamma"), 1, dim), beta: ps.zeros(format!("{name}.beta"), 1, dim) }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let n = tape.layer_norm_rows(x);
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}

/// Scaled dot-product attention with `heads` parallel heads.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Output of [`MultiHeadAttention::forward`]; `weights[h]` is the `R×S`
/// attention matrix of head `h`.
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dimension {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// `queries` is `R×C`, `keys_values` is `S×C`; `mask` (row-major `R×S`)
    /// restricts which keys each query may see.
    pub fn forward(&self, tape: &mut Tape, queries: Var, keys_values: Var, mask: Option<&[bool]>) -> Result<Attended> {
        let (qc, kc) = (tape.value(queries).cols(), tape.value(keys_values).cols());
        if qc != self.dim || kc != self.dim {
            return Err(Error::Shape(format!("attention expects width {}, got queries {qc} and keys {kc}", self.dim)));
        }
        let q = self.q.forward(tape, queries);
        let k = self.k.forward(tape, keys_values);
        let v = self.v.forward(tape, keys_values);
        let d = self.dim / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * d, d);
            let kh = tape.slice_cols(k, h * d, d);
            let vh = tape.slice_cols(v, h * d, d);
            let s = tape.matmul_nt(qh, kh);
            let s = tape.scale(s, scale);
            let a = match mask {
                Some(m) => tape.masked_softmax_rows(s, m),
                None => tape.softmax_rows(s),
            };
            outs.push(tape.matmul(a, vh));
            weights.push(a);
        }
        let cat = tape.concat_cols(&outs);
        Ok(Attended { out: self.o.forward(tape, cat), weights })
    }
}

/// `LayerNorm(x + Attention(x, kv))`.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub attn: MultiHeadAttention,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl AttentionBlock {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, dropout: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng)?,
            norm: LayerNorm::new(ps, &format!("{name}.norm"), dim),
            dropout,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, kv: Var, mask: Option<&[bool]>) -> Result<Var> {
        let a = self.attn.forward(tape, x, kv, mask)?.out;
        let a = tape.dropout(a, self.dropout);
        let r = tape.add(x, a);
        Ok(self.norm.forward(tape, r))
    }
}

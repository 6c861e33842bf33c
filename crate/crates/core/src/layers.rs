//! Transformer building blocks recorded onto a [`Graph`].

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_linear(format!("{name}.w"), group, fan_in, fan_out, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), group, 1, fan_out));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gamma: store.add_filled(format!("{name}.gamma"), group, 1, dim, 1.0),
            beta: store.add_zeros(format!("{name}.beta"), group, 1, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta)
    }
}

/// Two-layer GELU feed-forward block.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), group, dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), group, hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention without positional terms.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

/// Attention output plus the per-head weight matrices (rows sum to 1).
pub struct Attended {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim must be divisible by heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), group, dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), group, dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), group, dim, dim, true, rng),
            o: Linear::new(store, &format!("{name}.o"), group, dim, dim, true, rng),
            heads,
            dim,
        }
    }

    /// Rows of `query` attend over rows of `context`.
    pub fn forward(&self, g: &mut Graph, query: Var, context: Var) -> Attended {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let hd = self.dim / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, head * hd, hd),
                    g.slice_cols(k, head * hd, hd),
                    g.slice_cols(v, head * hd, hd),
                )
            };
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            outs.push(g.matmul(attn, vh));
            weights.push(attn);
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        Attended {
            out: self.o.forward(g, joined),
            weights,
        }
    }
}

/// Post-norm transformer block: attention sublayer then feed-forward
/// sublayer, each wrapped in a residual connection and layer norm.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl AttentionBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), group, dim, heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), group, dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), group, dim, 2 * dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), group, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, context: Var) -> Attended {
        let a = self.attn.forward(g, x, context);
        let x = g.add(x, a.out);
        let x = self.ln1.forward(g, x);
        let f = self.ffn.forward(g, x);
        let x = g.add(x, f);
        Attended {
            out: self.ln2.forward(g, x),
            weights: a.weights,
        }
    }
}

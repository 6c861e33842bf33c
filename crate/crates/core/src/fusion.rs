//! Query-guided fusion net.
//!
//! Each layer runs three sublayers in a fixed order:
//!
//! 1. query-text cross-attention (queries read the text, then the text reads
//!    the updated queries),
//! 2. query-region prefix integration (region self-attention whose keys and
//!    values are prefixed with projections of the queries),
//! 3. the similarity-aware aggregator, which pools text and region rows by
//!    dot-product similarity and folds them back into each query.
//!
//! No positional information is attached to the queries, so the whole stack
//! is equivariant to permutations of the query rows.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::QfnetConfig;
use crate::error::{Error, Result};
use crate::layers::{AttentionBlock, FeedForward, LayerNorm, Linear};
use crate::params::{ParamGroup, ParamStore};

const GROUP: ParamGroup = ParamGroup::Fusion;

/// `H_Q`, `H_T`, `H_V` at some depth of the stack.
#[derive(Debug, Clone, Copy)]
pub struct FusionState {
    pub queries: Var,
    pub text: Var,
    pub regions: Var,
}

/// Attention distributions recorded during one layer, for inspection.
#[derive(Debug, Clone, Default)]
pub struct LayerTrace {
    /// Per head, `u × n`.
    pub query_to_text: Vec<Var>,
    /// Per head, `n × u`.
    pub text_to_query: Vec<Var>,
    /// `(k+1) × (u + k + 1)` with the prefix slots first, or `(k+1) × (k+1)`
    /// when prefix integration is off.
    pub prefix: Option<Var>,
    /// `u × n` similarity weights over text.
    pub sag_text: Option<Var>,
    /// `u × (k+1)` similarity weights over regions.
    pub sag_regions: Option<Var>,
}

/// Region self-attention with optional query-derived key/value prefixes.
#[derive(Debug, Clone)]
pub struct PrefixIntegration {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub rho_k: Linear,
    pub rho_v: Linear,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
    pub dim: usize,
}

impl PrefixIntegration {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        let lin = |store: &mut ParamStore, part: &str, rng: &mut R| {
            Linear::new(store, &format!("{name}.{part}"), GROUP, dim, dim, true, rng)
        };
        Self {
            wq: lin(store, "wq", rng),
            wk: lin(store, "wk", rng),
            wv: lin(store, "wv", rng),
            rho_k: lin(store, "rho_k", rng),
            rho_v: lin(store, "rho_v", rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), GROUP, dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), GROUP, dim, 2 * dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), GROUP, dim),
            dim,
        }
    }

    /// Refine `regions`; with `queries = None` the prefixes are dropped and
    /// this is plain region self-attention. Returns the new regions and the
    /// attention matrix.
    pub fn forward(&self, g: &mut Graph, regions: Var, queries: Option<Var>) -> (Var, Var) {
        let q = self.wq.forward(g, regions);
        let mut k = self.wk.forward(g, regions);
        let mut v = self.wv.forward(g, regions);
        if let Some(hq) = queries {
            let pk = self.rho_k.forward(g, hq);
            let pv = self.rho_v.forward(g, hq);
            k = g.concat_rows(&[pk, k]);
            v = g.concat_rows(&[pv, v]);
        }
        let scores = g.matmul_nt(q, k);
        let scores = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let attn = g.softmax_rows(scores);
        let pi = g.matmul(attn, v);
        let x = g.add(regions, pi);
        let x = self.ln1.forward(g, x);
        let f = self.ffn.forward(g, x);
        let x = g.add(x, f);
        (self.ln2.forward(g, x), attn)
    }
}

/// `Q ← LN(Q + tanh(Q·W1 + λ_T·α_T·T + λ_V·α_V·V)·W2 + b)`, with
/// `α_T = softmax(Q·Tᵀ)` and `α_V = softmax(Q·Vᵀ)` row-wise.
#[derive(Debug, Clone)]
pub struct SimilarityAggregator {
    pub w1: Linear,
    pub w2: Linear,
    pub ln: LayerNorm,
}

/// Output of [`SimilarityAggregator::forward`].
pub struct Aggregated {
    pub queries: Var,
    pub alpha_text: Var,
    pub alpha_regions: Var,
}

impl SimilarityAggregator {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            w1: Linear::new(store, &format!("{name}.w1"), GROUP, dim, dim, false, rng),
            w2: Linear::new(store, &format!("{name}.w2"), GROUP, dim, dim, true, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), GROUP, dim),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        state: FusionState,
        lambda_t: f64,
        lambda_v: f64,
    ) -> Aggregated {
        let FusionState {
            queries,
            text,
            regions,
        } = state;
        let st = g.matmul_nt(queries, text);
        let alpha_text = g.softmax_rows(st);
        let sv = g.matmul_nt(queries, regions);
        let alpha_regions = g.softmax_rows(sv);

        let pooled_t = g.matmul(alpha_text, text);
        let pooled_t = g.scale(pooled_t, lambda_t);
        let pooled_v = g.matmul(alpha_regions, regions);
        let pooled_v = g.scale(pooled_v, lambda_v);
        let pooled = g.add(pooled_t, pooled_v);

        let z = self.w1.forward(g, queries);
        let z = g.add(z, pooled);
        let z = g.tanh(z);
        let f = self.w2.forward(g, z);
        let x = g.add(queries, f);
        Aggregated {
            queries: self.ln.forward(g, x),
            alpha_text,
            alpha_regions,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QfnetLayer {
    /// Queries attend over text.
    pub query_cross: AttentionBlock,
    /// Text attends over queries.
    pub text_cross: AttentionBlock,
    pub prefix: PrefixIntegration,
    pub aggregator: SimilarityAggregator,
}

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub layers: Vec<QfnetLayer>,
    pub config: QfnetConfig,
    pub lambda_v: f64,
}

impl FusionParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        dim: usize,
        heads: usize,
        config: &QfnetConfig,
        lambda_v: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if config.layers < 1 {
            return Err(Error::config("qfnet.layers must be at least 1"));
        }
        if !(0.0..=1.0).contains(&lambda_v) {
            return Err(Error::config("lambda_v must lie in [0, 1]"));
        }
        let layers = (0..config.layers)
            .map(|l| {
                let name = format!("qfnet.{l}");
                QfnetLayer {
                    query_cross: AttentionBlock::new(store, &format!("{name}.qct_q"), GROUP, dim, heads, rng),
                    text_cross: AttentionBlock::new(store, &format!("{name}.qct_t"), GROUP, dim, heads, rng),
                    prefix: PrefixIntegration::new(store, &format!("{name}.qpi"), dim, rng),
                    aggregator: SimilarityAggregator::new(store, &format!("{name}.sag"), dim, rng),
                }
            })
            .collect();
        Ok(Self {
            layers,
            config: config.clone(),
            lambda_v,
        })
    }

    pub fn lambda_t(&self) -> f64 {
        1.0 - self.lambda_v
    }
}

/// Query-text cross-attention: returns updated `(H_Q, H_T)`.
pub fn query_text_cross_attention(
    g: &mut Graph,
    layer: &QfnetLayer,
    state: FusionState,
    text_update: bool,
    trace: &mut LayerTrace,
) -> (Var, Var) {
    let q = layer.query_cross.forward(g, state.queries, state.text);
    trace.query_to_text = q.weights;
    let text = if text_update {
        let t = layer.text_cross.forward(g, state.text, q.out);
        trace.text_to_query = t.weights;
        t.out
    } else {
        state.text
    };
    (q.out, text)
}

/// Prefix integration: returns updated `H_V`.
pub fn prefix_attention(
    g: &mut Graph,
    layer: &QfnetLayer,
    state: FusionState,
    use_prefix: bool,
    trace: &mut LayerTrace,
) -> Var {
    let (out, attn) = layer
        .prefix
        .forward(g, state.regions, use_prefix.then_some(state.queries));
    trace.prefix = Some(attn);
    out
}

/// Similarity-aware aggregation: returns updated `H_Q`.
pub fn similarity_aggregate(
    g: &mut Graph,
    layer: &QfnetLayer,
    state: FusionState,
    lambda_t: f64,
    lambda_v: f64,
    trace: &mut LayerTrace,
) -> Var {
    let a = layer.aggregator.forward(g, state, lambda_t, lambda_v);
    trace.sag_text = Some(a.alpha_text);
    trace.sag_regions = Some(a.alpha_regions);
    a.queries
}

/// Run the full stack. Returns the final state and one trace per layer.
pub fn run_qfnet(
    g: &mut Graph,
    params: &FusionParams,
    mut state: FusionState,
) -> (FusionState, Vec<LayerTrace>) {
    let cfg = &params.config;
    let mut traces = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let mut trace = LayerTrace::default();
        if cfg.qct {
            let (q, t) = query_text_cross_attention(g, layer, state, cfg.text_update, &mut trace);
            state.queries = q;
            state.text = t;
        }
        state.regions = prefix_attention(g, layer, state, cfg.qpi, &mut trace);
        if cfg.sag {
            state.queries =
                similarity_aggregate(g, layer, state, params.lambda_t(), params.lambda_v, &mut trace);
        }
        traces.push(trace);
    }
    (state, traces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const U: usize = 4;
    const N: usize = 6;
    const K1: usize = 4;
    const H: usize = 8;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn setup(cfg: QfnetConfig, lambda_v: f64) -> (ParamStore, FusionParams, [Matrix; 3]) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let params = FusionParams::new(&mut store, H, 2, &cfg, lambda_v, &mut rng).unwrap();
        let inputs = [random(&mut rng, U, H), random(&mut rng, N, H), random(&mut rng, K1, H)];
        (store, params, inputs)
    }

    fn state(g: &mut Graph, m: &[Matrix; 3]) -> FusionState {
        FusionState {
            queries: g.input(m[0].clone()),
            text: g.input(m[1].clone()),
            regions: g.input(m[2].clone()),
        }
    }

    fn assert_stochastic(m: &Matrix, cols: usize) {
        assert_eq!(m.cols(), cols);
        for r in 0..m.rows() {
            assert!(m.row(r).iter().all(|&v| v >= 0.0));
            let s: f64 = m.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sums to {s}");
        }
    }

    #[test]
    fn shapes_and_attention_rows() {
        let (store, params, m) = setup(QfnetConfig::default(), 0.5);
        let mut g = Graph::new(&store);
        let s = state(&mut g, &m);
        let (out, traces) = run_qfnet(&mut g, &params, s);
        assert_eq!(g.shape(out.queries), (U, H));
        assert_eq!(g.shape(out.text), (N, H));
        assert_eq!(g.shape(out.regions), (K1, H));
        assert_eq!(traces.len(), 3);
        for t in &traces {
            for &w in &t.query_to_text {
                assert_stochastic(g.value(w), N);
            }
            for &w in &t.text_to_query {
                assert_stochastic(g.value(w), U);
            }
            assert_stochastic(g.value(t.prefix.unwrap()), U + K1);
            assert_stochastic(g.value(t.sag_text.unwrap()), N);
            assert_stochastic(g.value(t.sag_regions.unwrap()), K1);
        }
    }

    #[test]
    fn prefix_off_is_plain_self_attention() {
        let cfg = QfnetConfig {
            layers: 1,
            qpi: false,
            ..QfnetConfig::default()
        };
        let (store, params, m) = setup(cfg, 0.5);
        let mut g = Graph::new(&store);
        let s = state(&mut g, &m);
        let mut trace = LayerTrace::default();
        let r = prefix_attention(&mut g, &params.layers[0], s, false, &mut trace);
        assert_stochastic(g.value(trace.prefix.unwrap()), K1);
        // same computation written out without any prefix rows
        let (manual, _) = params.layers[0].prefix.forward(&mut g, s.regions, None);
        assert_eq!(g.value(r), g.value(manual));
    }

    #[test]
    fn text_only_mixing_ignores_regions() {
        let (store, params, m) = setup(QfnetConfig::default(), 0.0);
        let run = |regions: Matrix| {
            let mut g = Graph::new(&store);
            let mut inputs = m.clone();
            inputs[2] = regions;
            let s = state(&mut g, &inputs);
            let mut trace = LayerTrace::default();
            let q = similarity_aggregate(&mut g, &params.layers[0], s, 1.0, 0.0, &mut trace);
            g.value(q).clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        assert_eq!(run(m[2].clone()), run(random(&mut rng, K1, H)));
    }

    #[test]
    fn layers_are_not_idempotent() {
        let one = QfnetConfig {
            layers: 1,
            ..QfnetConfig::default()
        };
        let (store, params, m) = setup(QfnetConfig::default(), 0.5);
        let mut g = Graph::new(&store);
        let s = state(&mut g, &m);
        let (deep, _) = run_qfnet(&mut g, &params, s);
        let shallow_params = FusionParams {
            layers: params.layers[..1].to_vec(),
            config: one,
            lambda_v: 0.5,
        };
        let (shallow, _) = run_qfnet(&mut g, &shallow_params, s);
        assert_ne!(g.value(deep.queries), g.value(shallow.queries));
    }

    #[test]
    fn fully_ablated_stack_keeps_queries() {
        let cfg = QfnetConfig {
            qct: false,
            qpi: false,
            sag: false,
            ..QfnetConfig::default()
        };
        let (store, params, m) = setup(cfg, 0.5);
        let mut g = Graph::new(&store);
        let s = state(&mut g, &m);
        let (out, _) = run_qfnet(&mut g, &params, s);
        assert_eq!(g.value(out.queries), &m[0]);
        assert_eq!(g.value(out.text), &m[1]);
    }

    #[test]
    fn zero_layers_rejected() {
        let cfg = QfnetConfig {
            layers: 0,
            ..QfnetConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            FusionParams::new(&mut ParamStore::new(), H, 2, &cfg, 0.5, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn query_permutation_equivariance() {
        let (store, params, m) = setup(QfnetConfig::default(), 0.5);
        let perm = [2, 0, 3, 1];
        let mut g = Graph::new(&store);
        let s = state(&mut g, &m);
        let (a, _) = run_qfnet(&mut g, &params, s);
        let mut permuted = m.clone();
        permuted[0] = m[0].select_rows(&perm);
        let s2 = state(&mut g, &permuted);
        let (b, _) = run_qfnet(&mut g, &params, s2);
        let qa = g.value(a.queries).select_rows(&perm);
        let close = |x: &Matrix, y: &Matrix| {
            x.data().iter().zip(y.data()).all(|(p, q)| (p - q).abs() < 1e-10)
        };
        assert!(close(&qa, g.value(b.queries)));
        assert!(close(g.value(a.text), g.value(b.text)));
        assert!(close(g.value(a.regions), g.value(b.regions)));
    }
}

//! Prediction heads and decoding.
//!
//! Span and region heads score every (query, row) pair with
//! `sigmoid(w · relu(Q·W_Q + X·W_X))`; the existence head reads the query
//! together with the probability-pooled text and region evidence.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::layers::Linear;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::types::{Quadruple, Region};

const GROUP: ParamGroup = ParamGroup::Head;

/// Probability matrices for one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    /// `u × n` start probabilities.
    pub start: Matrix,
    /// `u × n` end probabilities.
    pub end: Matrix,
    /// `u × (k+1)` region probabilities; column 0 is the ungroundable slot.
    pub region: Matrix,
    /// Existence probability per query.
    pub exist: Vec<f64>,
}

impl PredictionBundle {
    pub fn num_queries(&self) -> usize {
        self.exist.len()
    }

    /// Same bundle with query rows reordered: row `i` of the result is row
    /// `perm[i]` of `self`.
    pub fn permute_queries(&self, perm: &[usize]) -> Self {
        Self {
            start: self.start.select_rows(perm),
            end: self.end.select_rows(perm),
            region: self.region.select_rows(perm),
            exist: perm.iter().map(|&q| self.exist[q]).collect(),
        }
    }
}

/// Graph nodes of the four head outputs.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub start: Var,
    pub end: Var,
    pub region: Var,
    /// `u × 1`
    pub exist: Var,
}

impl HeadVars {
    pub fn bundle(&self, g: &Graph) -> PredictionBundle {
        PredictionBundle {
            start: g.value(self.start).clone(),
            end: g.value(self.end).clone(),
            region: g.value(self.region).clone(),
            exist: g.value(self.exist).data().to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SpanHead {
    pub wq: Linear,
    pub wt: Linear,
    pub w_start: ParamId,
    pub w_end: ParamId,
}

impl SpanHead {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self {
            wq: Linear::new(store, "head.span.wq", GROUP, dim, dim, false, rng),
            wt: Linear::new(store, "head.span.wt", GROUP, dim, dim, false, rng),
            w_start: store.add_linear("head.span.w_start", GROUP, dim, 1, rng),
            w_end: store.add_linear("head.span.w_end", GROUP, dim, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, text: Var) -> (Var, Var) {
        let a = self.wq.forward(g, queries);
        let b = self.wt.forward(g, text);
        let ws = g.param(self.w_start);
        let we = g.param(self.w_end);
        (g.pairwise_sigmoid(a, b, ws), g.pairwise_sigmoid(a, b, we))
    }
}

#[derive(Debug, Clone)]
pub struct RegionHead {
    pub wq: Linear,
    pub wv: Linear,
    pub w: ParamId,
}

impl RegionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self {
            wq: Linear::new(store, "head.region.wq", GROUP, dim, dim, false, rng),
            wv: Linear::new(store, "head.region.wv", GROUP, dim, dim, false, rng),
            w: store.add_linear("head.region.w", GROUP, dim, 1, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, regions: Var) -> Var {
        let a = self.wq.forward(g, queries);
        let b = self.wv.forward(g, regions);
        let w = g.param(self.w);
        g.pairwise_sigmoid(a, b, w)
    }
}

#[derive(Debug, Clone)]
pub struct ClassHead {
    pub wq: Linear,
    pub w: ParamId,
}

impl ClassHead {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self {
            wq: Linear::new(store, "head.class.wq", GROUP, dim, dim, false, rng),
            w: store.add_linear("head.class.w", GROUP, 4 * dim, 1, rng),
        }
    }

    /// `sigmoid(relu([Q·W ; P_s·T ; P_e·T ; P_r·V]) · w)` as a `u × 1` node.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        queries: Var,
        text: Var,
        regions: Var,
        p_start: Var,
        p_end: Var,
        p_region: Var,
    ) -> Var {
        let q = self.wq.forward(g, queries);
        let s = g.matmul(p_start, text);
        let e = g.matmul(p_end, text);
        let r = g.matmul(p_region, regions);
        let joint = g.concat_cols(&[q, s, e, r]);
        let joint = g.relu(joint);
        let w = g.param(self.w);
        let logits = g.matmul(joint, w);
        g.sigmoid(logits)
    }
}

#[derive(Debug, Clone)]
pub struct Heads {
    pub span: SpanHead,
    pub region: RegionHead,
    pub class: ClassHead,
}

impl Heads {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        Self {
            span: SpanHead::new(store, dim, rng),
            region: RegionHead::new(store, dim, rng),
            class: ClassHead::new(store, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, text: Var, regions: Var) -> HeadVars {
        let (start, end) = self.span.forward(g, queries, text);
        let region = self.region.forward(g, queries, regions);
        let exist = self
            .class
            .forward(g, queries, text, regions, start, end, region);
        HeadVars {
            start,
            end,
            region,
            exist,
        }
    }
}

/// One decoded entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub quad: Quadruple,
    pub confidence: f64,
    /// Query that produced it.
    pub query: usize,
}

/// Deduplicated predictions in canonical `(start, end, type, region)` order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DecodedSet {
    pub predictions: Vec<Prediction>,
}

impl DecodedSet {
    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    /// `(quadruple, confidence)` pairs, ignoring which query produced them.
    pub fn entries(&self) -> Vec<(Quadruple, f64)> {
        self.predictions
            .iter()
            .map(|p| (p.quad.clone(), p.confidence))
            .collect()
    }
}

/// First index of the maximum (NaN never wins).
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn region_key(r: &Region) -> usize {
    match r {
        Region::Candidate(i) => *i,
        _ => 0,
    }
}

/// Turn probability matrices into a quadruple set.
pub fn decode(bundle: &PredictionBundle, type_of: &[usize], tau_c: f64) -> DecodedSet {
    assert_eq!(type_of.len(), bundle.num_queries(), "type map length mismatch");
    let mut found: Vec<Prediction> = Vec::new();
    for (q, &pc) in bundle.exist.iter().enumerate() {
        if !(pc >= tau_c) {
            continue;
        }
        let start = argmax(bundle.start.row(q));
        let end = start + argmax(&bundle.end.row(q)[start..]);
        let slot = argmax(bundle.region.row(q));
        let region = if slot == 0 {
            Region::Ungroundable
        } else {
            Region::Candidate(slot)
        };
        let quad = Quadruple {
            start,
            end,
            type_id: type_of[q],
            region,
        };
        match found.iter_mut().find(|p| p.quad == quad) {
            Some(prev) => {
                let better = pc > prev.confidence || (pc == prev.confidence && q < prev.query);
                if better {
                    prev.confidence = pc;
                    prev.query = q;
                }
            }
            None => found.push(Prediction {
                quad,
                confidence: pc,
                query: q,
            }),
        }
    }
    found.sort_by_key(|p| (p.quad.start, p.quad.end, p.quad.type_id, region_key(&p.quad.region)));
    DecodedSet { predictions: found }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn zeroed(store: &ParamStore) -> ParamStore {
        let mut z = store.clone();
        let ids: Vec<_> = z.ids().collect();
        for id in ids {
            z.value_mut(id).scale(0.0);
        }
        z
    }

    fn run(store: &ParamStore, heads: &Heads, q: &Matrix, t: &Matrix, v: &Matrix) -> PredictionBundle {
        let mut g = Graph::new(store);
        let (q, t, v) = (g.input(q.clone()), g.input(t.clone()), g.input(v.clone()));
        heads.forward(&mut g, q, t, v).bundle(&g)
    }

    fn setup() -> (ParamStore, Heads, [Matrix; 3]) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let heads = Heads::new(&mut store, 8, &mut rng);
        let m = [random(&mut rng, 4, 8), random(&mut rng, 6, 8), random(&mut rng, 4, 8)];
        (store, heads, m)
    }

    #[test]
    fn shapes_and_ranges() {
        let (store, heads, [q, t, v]) = setup();
        let b = run(&store, &heads, &q, &t, &v);
        assert_eq!(b.start.shape(), (4, 6));
        assert_eq!(b.end.shape(), (4, 6));
        assert_eq!(b.region.shape(), (4, 4));
        assert_eq!(b.exist.len(), 4);
        for m in [&b.start, &b.end, &b.region] {
            assert!(m.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
        assert!(b.exist.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn zero_params_give_one_half() {
        let (store, heads, [q, t, v]) = setup();
        let b = run(&zeroed(&store), &heads, &q, &t, &v);
        for m in [&b.start, &b.end, &b.region] {
            assert!(m.data().iter().all(|&p| p == 0.5));
        }
        assert!(b.exist.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn duplicated_token_duplicates_column() {
        let (store, heads, [q, t, v]) = setup();
        let mut rows: Vec<Vec<f64>> = (0..6).map(|r| t.row(r).to_vec()).collect();
        rows[4] = rows[1].clone();
        let b = run(&store, &heads, &q, &Matrix::from_rows(&rows), &v);
        for r in 0..4 {
            assert_eq!(b.start.get(r, 1), b.start.get(r, 4));
            assert_eq!(b.end.get(r, 1), b.end.get(r, 4));
        }
    }

    #[test]
    fn region_permutation_permutes_columns() {
        let (store, heads, [q, t, v]) = setup();
        let perm = [0, 3, 1, 2];
        let a = run(&store, &heads, &q, &t, &v);
        let b = run(&store, &heads, &q, &t, &v.select_rows(&perm));
        for r in 0..4 {
            for (c, &src) in perm.iter().enumerate() {
                assert_eq!(b.region.get(r, c), a.region.get(r, src));
            }
        }
    }

    #[test]
    fn existence_depends_on_head_probabilities() {
        // Nudging the pooled start probabilities moves P_c: the Jacobian of
        // the class head with respect to P_s is nonzero.
        let (store, heads, [q, t, v]) = setup();
        let eval = |delta: f64| {
            let mut g = Graph::new(&store);
            let (qv, tv, vv) = (g.input(q.clone()), g.input(t.clone()), g.input(v.clone()));
            let (s, e) = heads.span.forward(&mut g, qv, tv);
            let r = heads.region.forward(&mut g, qv, vv);
            let mut sm = g.value(s).clone();
            sm.set(0, 2, sm.get(0, 2) + delta);
            let s2 = g.input(sm);
            let c = heads.class.forward(&mut g, qv, tv, vv, s2, e, r);
            g.value(c).get(0, 0)
        };
        let d = crate::gradcheck::central_difference(eval, 0.0, 1e-5);
        assert!(d.abs() > 1e-8, "derivative {d}");
    }

    fn bundle(u: usize, n: usize, k1: usize) -> PredictionBundle {
        PredictionBundle {
            start: Matrix::filled(u, n, 0.1),
            end: Matrix::filled(u, n, 0.1),
            region: Matrix::filled(u, k1, 0.1),
            exist: vec![0.1; u],
        }
    }

    #[test]
    fn decode_examples() {
        assert!(decode(&bundle(3, 5, 3), &[0, 1, 0], 0.5).is_empty());

        let mut b = bundle(1, 6, 3);
        b.exist[0] = 0.9;
        b.start.set(0, 2, 0.8);
        b.end.set(0, 4, 0.8);
        b.region.set(0, 0, 0.8);
        let d = decode(&b, &[0], 0.5);
        assert_eq!(d.len(), 1);
        assert_eq!(d.predictions[0].quad, Quadruple::new(2, 4, 0, Region::Ungroundable).unwrap());

        let mut b = bundle(2, 4, 3);
        b.exist = vec![0.6, 0.8];
        let d = decode(&b, &[1, 1], 0.5);
        assert_eq!(d.len(), 1);
        assert_eq!(d.predictions[0].confidence, 0.8);
        assert_eq!(d.predictions[0].query, 1);
    }

    #[test]
    fn end_never_precedes_start() {
        let mut b = bundle(1, 5, 2);
        b.exist[0] = 0.9;
        b.start.set(0, 3, 0.9);
        b.end.set(0, 1, 0.99);
        let d = decode(&b, &[0], 0.5);
        assert_eq!((d.predictions[0].quad.start, d.predictions[0].quad.end), (3, 3));
    }

    fn random_bundle(seed: u64, u: usize, n: usize, k1: usize) -> PredictionBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.random_range(0.0..1.0));
        PredictionBundle {
            start: m(u, n),
            end: m(u, n),
            region: m(u, k1),
            exist: m(1, u).into_vec(),
        }
    }

    proptest! {
        #[test]
        fn decode_permutation_invariant(seed in 0u64..10_000, perm in Just((0..6usize).collect::<Vec<_>>()).prop_shuffle()) {
            let b = random_bundle(seed, 6, 5, 4);
            let types = [0, 1, 2, 0, 1, 2];
            let d1 = decode(&b, &types, 0.4);
            let permuted_types: Vec<usize> = perm.iter().map(|&q| types[q]).collect();
            let d2 = decode(&b.permute_queries(&perm), &permuted_types, 0.4);
            prop_assert_eq!(d1.entries(), d2.entries());
        }

        #[test]
        fn raising_threshold_never_grows(seed in 0u64..10_000, lo in 0.01..0.99f64, step in 0.0..0.5f64) {
            let b = random_bundle(seed, 6, 5, 4);
            let types = [0, 1, 0, 1, 0, 1];
            let hi = (lo + step).min(0.999);
            prop_assert!(decode(&b, &types, hi).len() <= decode(&b, &types, lo).len());
        }

        #[test]
        fn spans_well_formed(seed in 0u64..10_000) {
            let b = random_bundle(seed, 4, 7, 3);
            for p in decode(&b, &[0, 1, 0, 1], 0.0).predictions {
                prop_assert!(p.quad.start <= p.quad.end && p.quad.end < 7);
            }
        }
    }
}

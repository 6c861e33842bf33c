//! Multi-grained query set: a learnable `u × h` entity table added to the
//! `p` type rows repeated `u / p` times.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::{QueryLayout, QueryMode, TypeQuerySource};
use crate::encoders::{TextEncoder, Vocab, MASK};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Matrix;
use crate::types::TypeSchema;

#[derive(Debug, Clone)]
pub struct QuerySetParams {
    /// Trainable `p × h` type table (unused when type rows come from prompts).
    pub type_table: ParamId,
    /// Learnable `u × h` entity-grained queries.
    pub entity_table: ParamId,
    pub source: TypeQuerySource,
    pub mode: QueryMode,
    pub layout: QueryLayout,
    pub u: usize,
    pub p: usize,
}

impl QuerySetParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        u: usize,
        p: usize,
        dim: usize,
        entity_std: f64,
        type_std: f64,
        source: TypeQuerySource,
        mode: QueryMode,
        layout: QueryLayout,
        rng: &mut R,
    ) -> Result<Self> {
        check_divisible(u, p)?;
        let g = ParamGroup::Query;
        let type_table = store.add_normal("queries.type", g, p, dim, type_std, rng);
        let entity_table = store.add_normal("queries.entity", g, u, dim, entity_std, rng);
        if mode == QueryMode::NoEntity {
            store.get_mut(entity_table).trainable = false;
        }
        if source == TypeQuerySource::Prompt {
            store.get_mut(type_table).trainable = false;
        }
        Ok(Self {
            type_table,
            entity_table,
            source,
            mode,
            layout,
            u,
            p,
        })
    }

    pub fn type_of(&self, q: usize) -> usize {
        self.layout.type_of(q, self.u, self.p)
    }

    pub fn type_map(&self) -> Vec<usize> {
        self.layout.type_map(self.u, self.p)
    }

    /// `p × h` type-grained rows.
    pub fn build_type_queries(
        &self,
        g: &mut Graph,
        schema: &TypeSchema,
        text: &TextEncoder,
        vocab: &Vocab,
    ) -> Result<Var> {
        if schema.len() != self.p {
            return Err(Error::config(format!(
                "schema has {} types but the query set was built for {}",
                schema.len(),
                self.p
            )));
        }
        match self.source {
            TypeQuerySource::Table => Ok(g.param(self.type_table)),
            TypeQuerySource::Prompt => {
                let rows = schema
                    .prompts()
                    .iter()
                    .map(|prompt| {
                        let tokens: Vec<&str> = prompt.split_whitespace().collect();
                        let slot = tokens.iter().position(|t| *t == MASK).ok_or_else(|| {
                            Error::config(format!("prompt {prompt:?} has no {MASK} slot"))
                        })?;
                        let enc = text.encode(g, &vocab.ids(&tokens))?;
                        Ok(g.slice_rows(enc, slot, 1))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(g.concat_rows(&rows))
            }
        }
    }

    /// `u × h` query set for this configuration.
    pub fn build(
        &self,
        g: &mut Graph,
        schema: &TypeSchema,
        text: &TextEncoder,
        vocab: &Vocab,
    ) -> Result<Var> {
        let type_q = match self.mode {
            QueryMode::NoType => None,
            _ => Some(self.build_type_queries(g, schema, text, vocab)?),
        };
        let ent_q = g.param(self.entity_table);
        compose_queries(g, type_q, ent_q, self.mode, self.layout)
    }
}

fn check_divisible(u: usize, p: usize) -> Result<()> {
    if p == 0 || u % p != 0 {
        return Err(Error::config(format!(
            "u must be a multiple of p (u = {u}, p = {p})"
        )));
    }
    Ok(())
}

/// Compose queries: `H[q] = E[q] + T[type_of(q)]` in full mode, `E[q]`
/// without type rows, and `T[type_of(q)]` without entity rows.
pub fn compose_queries(
    g: &mut Graph,
    type_q: Option<Var>,
    ent_q: Var,
    mode: QueryMode,
    layout: QueryLayout,
) -> Result<Var> {
    let u = g.shape(ent_q).0;
    let tiled = match type_q {
        Some(t) => {
            let p = g.shape(t).0;
            check_divisible(u, p)?;
            let idx = layout.type_map(u, p);
            Some(g.gather_rows(t, &idx))
        }
        None => None,
    };
    match (mode, tiled) {
        (QueryMode::Full, Some(t)) => Ok(g.add(ent_q, t)),
        (QueryMode::NoEntity, Some(t)) => Ok(t),
        (QueryMode::NoType, _) => Ok(ent_q),
        (_, None) => Err(Error::config("type-grained rows required for this query mode")),
    }
}

/// Matrix-level composition (no gradient tracking).
pub fn compose_matrices(
    type_q: &Matrix,
    ent_q: &Matrix,
    mode: QueryMode,
    layout: QueryLayout,
) -> Result<Matrix> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let t = g.input(type_q.clone());
    let e = g.input(ent_q.clone());
    let out = compose_queries(&mut g, Some(t), e, mode, layout)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::TextEncoder;
    use crate::types::DEFAULT_PROMPT_TEMPLATE;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_m(seed: u64, r: usize, c: usize) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    fn schema(p: usize) -> TypeSchema {
        TypeSchema::new((0..p).map(|i| format!("T{i}")).collect(), DEFAULT_PROMPT_TEMPLATE).unwrap()
    }

    fn setup(u: usize, p: usize, source: TypeQuerySource, mode: QueryMode) -> (ParamStore, QuerySetParams, TextEncoder, Vocab) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let s = schema(p);
        let vocab = Vocab::build(s.prompts().iter().flat_map(|p| p.split_whitespace()));
        let text = TextEncoder::new(&mut store, vocab.len(), 64, 4, 1, None, &mut rng);
        let qs = QuerySetParams::new(&mut store, u, p, 64, 0.02, 1.0, source, mode, QueryLayout::Tile, &mut rng).unwrap();
        (store, qs, text, vocab)
    }

    #[test]
    fn type_query_shapes() {
        for p in [4, 51] {
            let (store, qs, text, vocab) = setup(p, p, TypeQuerySource::Table, QueryMode::Full);
            let mut g = Graph::new(&store);
            let t = qs.build_type_queries(&mut g, &schema(p), &text, &vocab).unwrap();
            assert_eq!(g.shape(t), (p, 64));
            let mut g2 = Graph::new(&store);
            let t2 = qs.build_type_queries(&mut g2, &schema(p), &text, &vocab).unwrap();
            assert_eq!(g.value(t), g2.value(t2));
        }
    }

    #[test]
    fn prompt_type_queries_read_mask_rows() {
        let (store, qs, text, vocab) = setup(8, 4, TypeQuerySource::Prompt, QueryMode::Full);
        let mut g = Graph::new(&store);
        let t = qs.build_type_queries(&mut g, &schema(4), &text, &vocab).unwrap();
        let m = g.value(t).clone();
        assert_eq!(m.shape(), (4, 64));
        // the mask row is contextualized by the type name, so types differ
        assert_ne!(m.row(0), m.row(1));
    }

    #[test]
    fn prompt_without_mask_is_config_error() {
        let (store, qs, text, vocab) = setup(8, 4, TypeQuerySource::Prompt, QueryMode::Full);
        let bad = TypeSchema::new((0..4).map(|i| format!("T{i}")).collect(), "[TYPE] is a type").unwrap();
        let mut g = Graph::new(&store);
        assert!(matches!(
            qs.build_type_queries(&mut g, &bad, &text, &vocab),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn compose_full_scale_shape() {
        let t = rand_m(1, 4, 16);
        let e = rand_m(2, 60, 16);
        let h = compose_matrices(&t, &e, QueryMode::Full, QueryLayout::Tile).unwrap();
        assert_eq!(h.shape(), (60, 16));
        for q in 0..60 {
            for c in 0..16 {
                assert_eq!(h.get(q, c), e.get(q, c) + t.get(q % 4, c));
            }
        }
    }

    #[test]
    fn compose_identity_and_divisibility() {
        let t = rand_m(3, 4, 8);
        let h = compose_matrices(&t, &Matrix::zeros(4, 8), QueryMode::Full, QueryLayout::Tile).unwrap();
        assert_eq!(h, t);
        let err = compose_matrices(&t, &Matrix::zeros(6, 8), QueryMode::Full, QueryLayout::Tile).unwrap_err();
        assert!(err.to_string().contains("u must be a multiple of p"));
        assert!(QuerySetParams::new(
            &mut ParamStore::new(), 6, 4, 8, 0.02, 1.0,
            TypeQuerySource::Table, QueryMode::Full, QueryLayout::Tile,
            &mut ChaCha8Rng::seed_from_u64(0)
        ).is_err());
    }

    #[test]
    fn block_layout() {
        let t = rand_m(4, 2, 3);
        let h = compose_matrices(&t, &Matrix::zeros(4, 3), QueryMode::Full, QueryLayout::Block).unwrap();
        assert_eq!(h.row(0), t.row(0));
        assert_eq!(h.row(1), t.row(0));
        assert_eq!(h.row(2), t.row(1));
    }

    #[test]
    fn ablations() {
        let t = rand_m(5, 4, 8);
        let e = rand_m(6, 12, 8);
        let no_type = compose_matrices(&t, &e, QueryMode::NoType, QueryLayout::Tile).unwrap();
        assert_eq!(no_type, e);
        let no_entity = compose_matrices(&t, &e, QueryMode::NoEntity, QueryLayout::Tile).unwrap();
        for q in 0..8 {
            assert_eq!(no_entity.row(q), no_entity.row(q + 4));
        }
        let mut distinct: Vec<Vec<u64>> = (0..12)
            .map(|q| no_entity.row(q).iter().map(|v| v.to_bits()).collect())
            .collect();
        distinct.sort();
        distinct.dedup();
        assert!(distinct.len() <= 4);
    }

    #[test]
    fn no_entity_table_is_frozen() {
        let (store, qs, _, _) = setup(8, 4, TypeQuerySource::Table, QueryMode::NoEntity);
        assert!(!store.is_updatable(qs.entity_table));
        assert!(store.is_updatable(qs.type_table));
    }

    proptest! {
        #[test]
        fn compose_is_linear(seed in 0u64..1000, a in -3.0..3.0f64) {
            let t = rand_m(seed, 4, 5);
            let e = rand_m(seed + 1, 8, 5);
            let base = compose_matrices(&t, &e, QueryMode::Full, QueryLayout::Tile).unwrap();
            let scaled = compose_matrices(&t.map(|v| a * v), &e.map(|v| a * v), QueryMode::Full, QueryLayout::Tile).unwrap();
            for (x, y) in scaled.data().iter().zip(base.data()) {
                prop_assert!((x - a * y).abs() < 1e-12);
            }
        }
    }
}

//! Bipartite matching between the padded gold set and the queries, and the
//! set loss computed under that matching.
//!
//! Rows of every cost matrix are padded-gold positions and columns are
//! queries, so an [`Assignment`] maps position `i` to query `perm[i]`.

use crate::autograd::{BceTerm, Graph, Var};
use crate::config::{CostKind, LossConfig, Padding};
use crate::error::{Error, Result};
use crate::geometry::RegionTarget;
use crate::heads::{HeadVars, PredictionBundle};
use crate::params::ParamStore;
use crate::tensor::Matrix;

const PROB_EPS: f64 = crate::autograd::PROB_EPS;

/// A gold entity in training form: span, type and region target vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldTarget {
    pub start: usize,
    pub end: usize,
    pub type_id: usize,
    pub region: RegionTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PaddedEntry {
    Null,
    Gold(GoldTarget),
}

impl PaddedEntry {
    pub fn gold(&self) -> Option<&GoldTarget> {
        match self {
            PaddedEntry::Gold(g) => Some(g),
            PaddedEntry::Null => None,
        }
    }
}

/// Exactly `u` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedGold {
    pub entries: Vec<PaddedEntry>,
}

impl PaddedGold {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_gold(&self) -> usize {
        self.entries.iter().filter(|e| e.gold().is_some()).count()
    }
}

/// Pad `gold` to `u` entries: gold first, then the null label (or, with
/// [`Padding::Replicate`], the gold list cycled).
pub fn pad_gold(gold: &[GoldTarget], u: usize, padding: Padding) -> Result<PaddedGold> {
    if gold.len() > u {
        return Err(Error::Capacity {
            what: "example".into(),
            gold: gold.len(),
            queries: u,
        });
    }
    let entries = (0..u)
        .map(|i| match (i < gold.len(), padding, gold.is_empty()) {
            (true, _, _) => PaddedEntry::Gold(gold[i].clone()),
            (false, Padding::Replicate, false) => PaddedEntry::Gold(gold[i % gold.len()].clone()),
            _ => PaddedEntry::Null,
        })
        .collect();
    Ok(PaddedGold { entries })
}

/// A bijection from padded-gold positions to queries.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    /// Total cost of `perm` under `cost`, summed in row order.
    pub fn evaluate(cost: &Matrix, perm: Vec<usize>) -> Self {
        let total = perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
        Self { perm, cost: total }
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn nll(p: f64) -> f64 {
    -clamp(p).ln()
}

fn nll_neg(p: f64) -> f64 {
    -(1.0 - clamp(p)).ln()
}

/// Cost of pairing padded entry `entry` with query `q`.
pub fn pair_cost(
    entry: &PaddedEntry,
    q: usize,
    bundle: &PredictionBundle,
    type_of: &[usize],
    cfg: &LossConfig,
) -> f64 {
    let pc = bundle.exist[q];
    let gold = match entry {
        PaddedEntry::Null => {
            return match cfg.cost {
                CostKind::Probability => 0.0,
                CostKind::LogLikelihood => nll_neg(pc),
            }
        }
        PaddedEntry::Gold(g) => g,
    };
    let mismatch = type_of[q] != gold.type_id;
    match cfg.cost {
        CostKind::Probability if mismatch => cfg.type_penalty,
        CostKind::Probability => {
            let active: Vec<usize> = gold.region.active().collect();
            let r_mean =
                active.iter().map(|&j| bundle.region.get(q, j)).sum::<f64>() / active.len() as f64;
            -(pc + bundle.start.get(q, gold.start) + bundle.end.get(q, gold.end) + r_mean)
        }
        CostKind::LogLikelihood => {
            // The penalty is added on top of the loss terms, so the cost of a
            // whole assignment is its loss plus `M` per type mismatch.
            let mut total = nll(pc) + if mismatch { cfg.type_penalty } else { 0.0 };
            for term in gold_terms(gold, q, bundle.start.cols(), bundle.region.cols(), cfg.negatives) {
                let m = match term.0 {
                    Target::Start => &bundle.start,
                    Target::End => &bundle.end,
                    Target::Region => &bundle.region,
                };
                let p = m.get(term.1.row, term.1.col);
                total += term.1.weight * if term.1.positive { nll(p) } else { nll_neg(p) };
            }
            total
        }
    }
}

/// `u × u` matching cost matrix.
pub fn cost_matrix(
    padded: &PaddedGold,
    bundle: &PredictionBundle,
    type_of: &[usize],
    cfg: &LossConfig,
) -> Matrix {
    let u = padded.len();
    Matrix::from_fn(u, u, |i, q| pair_cost(&padded.entries[i], q, bundle, type_of, cfg))
}

#[derive(Clone, Copy)]
enum Target {
    Start,
    End,
    Region,
}

/// Per-pair BCE terms on the span and region matrices for one gold entity
/// assigned to query `q`. Positives of each matrix are averaged, and with
/// `negatives` the remaining positions of the row contribute the mean of
/// `-log(1 - p)`.
fn gold_terms(
    gold: &GoldTarget,
    q: usize,
    n: usize,
    k1: usize,
    negatives: bool,
) -> Vec<(Target, BceTerm)> {
    let mut terms = Vec::new();
    let mut row = |target: Target, width: usize, active: &dyn Fn(usize) -> bool| {
        let pos = (0..width).filter(|&c| active(c)).count();
        let neg = width - pos;
        for c in 0..width {
            let positive = active(c);
            if !positive && !negatives {
                continue;
            }
            let weight = 1.0 / if positive { pos } else { neg } as f64;
            terms.push((
                target,
                BceTerm {
                    row: q,
                    col: c,
                    weight,
                    positive,
                },
            ));
        }
    };
    row(Target::Start, n, &|c| c == gold.start);
    row(Target::End, n, &|c| c == gold.end);
    row(Target::Region, k1, &|c| gold.region.contains(c));
    terms
}

/// Set loss under `perm` as a scalar graph node.
pub fn set_loss(g: &mut Graph, heads: &HeadVars, padded: &PaddedGold, perm: &[usize], negatives: bool) -> Var {
    let (_, n) = g.shape(heads.start);
    let (_, k1) = g.shape(heads.region);
    let mut exist = Vec::with_capacity(padded.len());
    let (mut start, mut end, mut region) = (Vec::new(), Vec::new(), Vec::new());
    for (entry, &q) in padded.entries.iter().zip(perm) {
        match entry {
            PaddedEntry::Null => exist.push(BceTerm {
                row: q,
                col: 0,
                weight: 1.0,
                positive: false,
            }),
            PaddedEntry::Gold(gold) => {
                exist.push(BceTerm {
                    row: q,
                    col: 0,
                    weight: 1.0,
                    positive: true,
                });
                for (target, term) in gold_terms(gold, q, n, k1, negatives) {
                    match target {
                        Target::Start => start.push(term),
                        Target::End => end.push(term),
                        Target::Region => region.push(term),
                    }
                }
            }
        }
    }
    let parts = [
        g.bce(heads.exist, exist),
        g.bce(heads.start, start),
        g.bce(heads.end, end),
        g.bce(heads.region, region),
    ];
    g.sum(&parts)
}

/// Set loss value for fixed probabilities (no parameters involved).
pub fn set_loss_value(bundle: &PredictionBundle, padded: &PaddedGold, perm: &[usize], negatives: bool) -> f64 {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let heads = HeadVars {
        start: g.input(bundle.start.clone()),
        end: g.input(bundle.end.clone()),
        region: g.input(bundle.region.clone()),
        exist: g.input(Matrix::from_vec(bundle.exist.len(), 1, bundle.exist.clone())),
    };
    let l = set_loss(&mut g, &heads, padded, perm, negatives);
    g.value(l).get(0, 0)
}

/// Optimal assignment for `padded` against `bundle` under `cfg`.
pub fn match_queries(
    padded: &PaddedGold,
    bundle: &PredictionBundle,
    type_of: &[usize],
    cfg: &LossConfig,
) -> Result<Assignment> {
    solve_hungarian(&cost_matrix(padded, bundle, type_of, cfg))
}

/// Fixed assignment used without bipartite matching: gold entries sorted by
/// `(start, end, type)` fill the queries of their own type in index order;
/// entries that do not fit, then the null entries, take the remaining
/// queries in index order.
pub fn fixed_order_assignment(padded: &PaddedGold, type_of: &[usize]) -> Vec<usize> {
    let u = padded.len();
    let mut gold: Vec<usize> = (0..u).filter(|&i| padded.entries[i].gold().is_some()).collect();
    gold.sort_by_key(|&i| {
        let g = padded.entries[i].gold().unwrap();
        (g.start, g.end, g.type_id, i)
    });
    let mut perm = vec![usize::MAX; u];
    let mut taken = vec![false; u];
    let mut overflow = Vec::new();
    for &i in &gold {
        let t = padded.entries[i].gold().unwrap().type_id;
        match (0..u).find(|&q| !taken[q] && type_of[q] == t) {
            Some(q) => {
                perm[i] = q;
                taken[q] = true;
            }
            None => overflow.push(i),
        }
    }
    let rest = overflow
        .into_iter()
        .chain((0..u).filter(|&i| padded.entries[i].gold().is_none()));
    let mut free = (0..u).filter(|&q| !taken[q]).collect::<Vec<_>>().into_iter();
    for i in rest {
        perm[i] = free.next().expect("a free query per remaining entry");
    }
    perm
}

/// Fixed-order loss value (the loss used when matching is ablated).
pub fn fixed_order_loss_value(
    bundle: &PredictionBundle,
    padded: &PaddedGold,
    type_of: &[usize],
    negatives: bool,
) -> f64 {
    set_loss_value(bundle, padded, &fixed_order_assignment(padded, type_of), negatives)
}

const NONE: usize = usize::MAX;

/// Minimum-cost assignment; among all minimizers the lexicographically
/// smallest `perm` is returned.
pub fn solve_hungarian(cost: &Matrix) -> Result<Assignment> {
    let n = cost.rows();
    if cost.cols() != n {
        return Err(Error::invalid(format!(
            "cost matrix must be square, got {}×{}",
            n,
            cost.cols()
        )));
    }
    if !cost.all_finite() {
        return Err(Error::invalid("cost matrix has non-finite entries"));
    }
    if n == 0 {
        return Ok(Assignment {
            perm: Vec::new(),
            cost: 0.0,
        });
    }
    let (row_pot, col_pot, mut col_of_row) = potentials(cost);

    // Edges with zero reduced cost are exactly those used by optimal
    // assignments; search that subgraph for the lexicographically first one.
    let scale = 1.0 + cost.max_abs();
    let tol = 1e-11 * scale * n as f64;
    let tight =
        |i: usize, j: usize| (cost.get(i, j) - row_pot[i] - col_pot[j]).abs() <= tol;
    let mut row_of_col = vec![NONE; n];
    for (i, &j) in col_of_row.iter().enumerate() {
        row_of_col[j] = i;
    }
    let mut fixed_col = vec![false; n];
    for i in 0..n {
        for j in 0..n {
            if fixed_col[j] || !tight(i, j) {
                continue;
            }
            if col_of_row[i] == j {
                fixed_col[j] = true;
                break;
            }
            let (r, c0) = (row_of_col[j], col_of_row[i]);
            col_of_row[i] = j;
            row_of_col[j] = i;
            col_of_row[r] = NONE;
            row_of_col[c0] = NONE;
            let mut visited = fixed_col.clone();
            visited[j] = true;
            if augment(r, &tight, &mut visited, &mut col_of_row, &mut row_of_col) {
                fixed_col[j] = true;
                break;
            }
            col_of_row[i] = c0;
            row_of_col[c0] = i;
            col_of_row[r] = j;
            row_of_col[j] = r;
        }
        debug_assert!(fixed_col[col_of_row[i]]);
    }
    Ok(Assignment::evaluate(cost, col_of_row))
}

/// Kuhn augmenting path from free row `r` over unvisited columns.
fn augment(
    r: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    visited: &mut [bool],
    col_of_row: &mut [usize],
    row_of_col: &mut [usize],
) -> bool {
    for c in 0..visited.len() {
        if visited[c] || !tight(r, c) {
            continue;
        }
        visited[c] = true;
        let owner = row_of_col[c];
        if owner == NONE || augment(owner, tight, visited, col_of_row, row_of_col) {
            col_of_row[r] = c;
            row_of_col[c] = r;
            return true;
        }
    }
    false
}

/// Shortest-augmenting-path Hungarian method with row/column potentials.
/// Returns `(row potentials, column potentials, column of each row)`.
fn potentials(cost: &Matrix) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = cost.rows();
    // 1-based internally; index 0 is the virtual source column.
    let mut pu = vec![0.0; n + 1];
    let mut pv = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - pu[i0] - pv[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    pu[row_of[j]] += delta;
                    pv[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        col_of_row[row_of[j] - 1] = j - 1;
    }
    (pu[1..].to_vec(), pv[1..].to_vec(), col_of_row)
}

/// Exhaustive search over all `n!` permutations in lexicographic order,
/// keeping the first strict minimum. Only usable for small `n`.
pub fn brute_force_assignment(cost: &Matrix) -> Assignment {
    let n = cost.rows();
    assert_eq!(cost.cols(), n, "cost matrix must be square");
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = Assignment::evaluate(cost, perm.clone());
    // Iterate permutations in lexicographic order (next_permutation).
    loop {
        let Some(i) = (1..n).rev().find(|&i| perm[i - 1] < perm[i]) else {
            break;
        };
        let j = (i..n).rev().find(|&j| perm[j] > perm[i - 1]).unwrap();
        perm.swap(i - 1, j);
        perm[i..].reverse();
        let cand = Assignment::evaluate(cost, perm.clone());
        if cand.cost < best.cost {
            best = cand;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn target(k1: usize, active: &[usize]) -> RegionTarget {
        RegionTarget::from_mask((0..k1).map(|i| active.contains(&i)).collect()).unwrap()
    }

    fn gold(start: usize, end: usize, type_id: usize, k1: usize, active: &[usize]) -> GoldTarget {
        GoldTarget {
            start,
            end,
            type_id,
            region: target(k1, active),
        }
    }

    fn halves(u: usize, n: usize, k1: usize) -> PredictionBundle {
        PredictionBundle {
            start: Matrix::filled(u, n, 0.5),
            end: Matrix::filled(u, n, 0.5),
            region: Matrix::filled(u, k1, 0.5),
            exist: vec![0.5; u],
        }
    }

    fn random_bundle(rng: &mut ChaCha8Rng, u: usize, n: usize, k1: usize) -> PredictionBundle {
        let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.random_range(0.01..0.99));
        PredictionBundle {
            start: m(u, n),
            end: m(u, n),
            region: m(u, k1),
            exist: m(1, u).into_vec(),
        }
    }

    fn exact_cfg() -> LossConfig {
        LossConfig {
            negatives: false,
            ..LossConfig::default()
        }
    }

    #[test]
    fn padding() {
        let g = [gold(0, 0, 0, 3, &[0]), gold(1, 2, 1, 3, &[1])];
        let p = pad_gold(&g, 4, Padding::Null).unwrap();
        assert_eq!(p.num_gold(), 2);
        assert_eq!(p.entries[2], PaddedEntry::Null);
        assert_eq!(pad_gold(&[], 4, Padding::Null).unwrap().num_gold(), 0);
        let five = vec![g[0].clone(); 5];
        assert!(matches!(pad_gold(&five, 4, Padding::Null), Err(Error::Capacity { .. })));
        let r = pad_gold(&g, 5, Padding::Replicate).unwrap();
        assert_eq!(r.num_gold(), 5);
        assert_eq!(r.entries[4], PaddedEntry::Gold(g[0].clone()));
    }

    #[test]
    fn pair_cost_examples() {
        let cfg = LossConfig::default();
        let b = halves(2, 4, 3);
        assert_eq!(pair_cost(&PaddedEntry::Null, 1, &b, &[0, 1], &cfg), 0.0);
        let ones = PredictionBundle {
            start: Matrix::filled(2, 4, 1.0),
            end: Matrix::filled(2, 4, 1.0),
            region: Matrix::filled(2, 3, 1.0),
            exist: vec![1.0; 2],
        };
        let g = PaddedEntry::Gold(gold(1, 2, 0, 3, &[1, 2]));
        assert_eq!(pair_cost(&g, 0, &ones, &[0, 1], &cfg), -4.0);
        assert_eq!(pair_cost(&g, 1, &ones, &[0, 1], &cfg), 1e4);
    }

    #[test]
    fn hungarian_fixtures() {
        let zero = solve_hungarian(&Matrix::zeros(5, 5)).unwrap();
        assert_eq!(zero.perm, vec![0, 1, 2, 3, 4]);
        let a = solve_hungarian(&Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]])).unwrap();
        assert_eq!(a.perm, vec![1, 0]);
        assert_eq!(a.cost, 4.0);
        let mut bad = Matrix::zeros(2, 2);
        bad.set(0, 1, f64::NAN);
        assert!(matches!(solve_hungarian(&bad), Err(Error::InvalidInput(_))));
        assert!(solve_hungarian(&Matrix::zeros(2, 3)).is_err());
        assert!(solve_hungarian(&Matrix::zeros(0, 0)).unwrap().perm.is_empty());
    }

    #[test]
    fn loss_examples() {
        // all probabilities one half, one gold, two queries
        let b = halves(2, 3, 2);
        let p = pad_gold(&[gold(0, 1, 0, 2, &[1])], 2, Padding::Null).unwrap();
        let a = match_queries(&p, &b, &[0, 1], &exact_cfg()).unwrap();
        let l = set_loss_value(&b, &p, &a.perm, false);
        assert!((l - 5.0 * std::f64::consts::LN_2).abs() < 1e-12, "{l}");

        // perfect prediction
        let mut b = halves(2, 3, 2);
        b.exist = vec![1.0, 0.0];
        b.start.set(0, 0, 1.0);
        b.end.set(0, 1, 1.0);
        b.region.set(0, 1, 1.0);
        let a = match_queries(&p, &b, &[0, 1], &exact_cfg()).unwrap();
        let l = set_loss_value(&b, &p, &a.perm, false);
        assert!(l < 1e-6, "{l}");
    }

    #[test]
    fn fixed_order_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random_bundle(&mut rng, 4, 5, 3);
        let types = [0, 1, 0, 1];
        let cfg = LossConfig {
            cost: CostKind::LogLikelihood,
            ..LossConfig::default()
        };
        // no gold
        let p = pad_gold(&[], 4, Padding::Null).unwrap();
        let a = match_queries(&p, &b, &types, &cfg).unwrap();
        let set = set_loss_value(&b, &p, &a.perm, true);
        assert!((set - fixed_order_loss_value(&b, &p, &types, true)).abs() < 1e-12);

        // adversarial: the query that fits the gold is index 2, not 0
        let mut b = halves(4, 5, 3);
        b.exist = vec![0.01, 0.01, 0.99, 0.01];
        b.start.set(2, 1, 0.99);
        b.end.set(2, 3, 0.99);
        b.region.set(2, 2, 0.99);
        let p = pad_gold(&[gold(1, 3, 0, 3, &[2])], 4, Padding::Null).unwrap();
        let a = match_queries(&p, &b, &types, &cfg).unwrap();
        assert_eq!(a.perm[0], 2);
        let set = set_loss_value(&b, &p, &a.perm, true);
        let fixed = fixed_order_loss_value(&b, &p, &types, true);
        assert!(set < fixed, "{set} vs {fixed}");

        // identity happens to be optimal
        let b2 = b.permute_queries(&[2, 1, 0, 3]);
        let a = match_queries(&p, &b2, &types, &cfg).unwrap();
        assert_eq!(a.perm[0], 0);
        let set = set_loss_value(&b2, &p, &a.perm, true);
        assert!((set - fixed_order_loss_value(&b2, &p, &types, true)).abs() < 1e-12);
    }

    #[test]
    fn fixed_order_respects_types() {
        let p = pad_gold(
            &[gold(3, 3, 1, 2, &[0]), gold(0, 0, 1, 2, &[0]), gold(1, 1, 0, 2, &[0])],
            6,
            Padding::Null,
        )
        .unwrap();
        let perm = fixed_order_assignment(&p, &[0, 1, 0, 1, 0, 1]);
        assert_eq!(perm[1], 1); // earliest type-1 gold takes the first type-1 query
        assert_eq!(perm[0], 3);
        assert_eq!(perm[2], 0);
        let mut sorted = perm.clone();
        sorted.sort();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
    }

    fn cost_strategy() -> impl Strategy<Value = Matrix> {
        (1usize..=6, any::<u64>(), any::<bool>()).prop_map(|(n, seed, ties)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Matrix::from_fn(n, n, |_, _| {
                if ties {
                    rng.random_range(0..3) as f64
                } else {
                    rng.random_range(0.0..1.0)
                }
            })
        })
    }

    proptest! {
        #[test]
        fn hungarian_matches_oracle(cost in cost_strategy()) {
            let h = solve_hungarian(&cost).unwrap();
            let b = brute_force_assignment(&cost);
            prop_assert_eq!(h.cost, b.cost);
            prop_assert_eq!(h.perm, b.perm);
        }

        #[test]
        fn loss_gold_order_invariant(seed in any::<u64>(), m in 0usize..=4, ll in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (u, n, k1) = (6, 5, 4);
            let types = [0, 1, 0, 1, 0, 1];
            let b = random_bundle(&mut rng, u, n, k1);
            let golds: Vec<GoldTarget> = (0..m).map(|_| {
                let s = rng.random_range(0..n);
                gold(s, rng.random_range(s..n), rng.random_range(0..2), k1, &[rng.random_range(0..k1)])
            }).collect();
            let cfg = LossConfig { cost: if ll { CostKind::LogLikelihood } else { CostKind::Probability }, ..LossConfig::default() };
            let loss = |gs: &[GoldTarget]| {
                let p = pad_gold(gs, u, Padding::Null).unwrap();
                let a = match_queries(&p, &b, &types, &cfg).unwrap();
                set_loss_value(&b, &p, &a.perm, true)
            };
            let base = loss(&golds);
            let mut rev = golds.clone();
            rev.reverse();
            prop_assert!((loss(&rev) - base).abs() <= 1e-9);
            prop_assert!(base >= 0.0);
        }

        #[test]
        fn set_loss_dominates(seed in any::<u64>(), m in 0usize..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (u, n, k1) = (6, 5, 4);
            let types = [0, 1, 0, 1, 0, 1];
            let b = random_bundle(&mut rng, u, n, k1);
            let golds: Vec<GoldTarget> = (0..m).map(|_| {
                let s = rng.random_range(0..n);
                gold(s, s, rng.random_range(0..2), k1, &[rng.random_range(0..k1)])
            }).collect();
            let cfg = LossConfig { cost: CostKind::LogLikelihood, ..LossConfig::default() };
            let p = pad_gold(&golds, u, Padding::Null).unwrap();
            let a = match_queries(&p, &b, &types, &cfg).unwrap();
            let set = set_loss_value(&b, &p, &a.perm, true);
            prop_assert!(set <= fixed_order_loss_value(&b, &p, &types, true) + 1e-9);
        }
    }
}

//! Property checks shared by the `selftest` command and the acceptance
//! tests. Each check compares against an independent oracle (exhaustive
//! search, finite differences, hand-computed fixtures) and reports a single
//! pass/fail line.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{CostKind, LossConfig, Padding, QfnetConfig, RunConfig};
use crate::data::{generate_synthetic, SyntheticSpec};
use crate::error::Result;
use crate::geometry::{iou, BoundingBox, RegionTarget};
use crate::gradcheck::check_params;
use crate::heads::{decode, DecodedSet, PredictionBundle};
use crate::matching::{
    brute_force_assignment, fixed_order_loss_value, match_queries, pad_gold, set_loss_value,
    solve_hungarian, Assignment, GoldTarget,
};
use crate::metrics::{correctness, score, ScoredPrediction, Task};
use crate::model::{build_vocab, Model};
use crate::params::ParamGroup;
use crate::tensor::Matrix;
use crate::train::Checkpoint;
use crate::types::{Example, Quadruple, Region};
use crate::autograd::Graph;

/// Signature of an assignment solver under test.
pub type Solver = fn(&Matrix) -> Result<Assignment>;

/// Deliberately wrong solver (always the identity) used as a negative
/// control for the oracle check.
pub fn identity_solver(cost: &Matrix) -> Result<Assignment> {
    Ok(Assignment::evaluate(cost, (0..cost.rows()).collect()))
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:<34} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckResult {
        name: name.to_string(),
        passed,
        detail,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn random_cost(rng: &mut ChaCha8Rng, n: usize, ties: bool) -> Matrix {
    Matrix::from_fn(n, n, |_, _| {
        if ties {
            rng.random_range(0..4) as f64
        } else {
            rng.random_range(0.0..1.0)
        }
    })
}

/// Solver cost versus the exhaustive minimum, `trials` uniform matrices and
/// `trials` small-integer (tie-heavy) matrices per size.
pub fn hungarian_oracle(sizes: std::ops::RangeInclusive<usize>, trials: usize, seed: u64, solver: Solver) -> CheckResult {
    timed("hungarian oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut count = 0;
        for n in sizes {
            for t in 0..2 * trials {
                let cost = random_cost(&mut rng, n, t % 2 == 1);
                let got = solver(&cost)?;
                let want = brute_force_assignment(&cost);
                if got.cost != want.cost {
                    return Ok((false, format!("n={n}: solver {} vs exhaustive {}", got.cost, want.cost)));
                }
                count += 1;
            }
        }
        Ok((true, format!("{count} matrices agree exactly")))
    })
}

/// Random bundle with probabilities away from the clamp.
pub fn random_bundle(rng: &mut ChaCha8Rng, u: usize, n: usize, k1: usize) -> PredictionBundle {
    let mut m = |r, c| Matrix::from_fn(r, c, |_, _| rng.random_range(0.01..0.99));
    PredictionBundle {
        start: m(u, n),
        end: m(u, n),
        region: m(u, k1),
        exist: m(1, u).into_vec(),
    }
}

fn random_gold(rng: &mut ChaCha8Rng, m: usize, n: usize, k1: usize, p: usize) -> Vec<GoldTarget> {
    (0..m)
        .map(|_| {
            let start = rng.random_range(0..n);
            let end = rng.random_range(start..n);
            let mut mask = vec![false; k1];
            if rng.random_bool(0.3) {
                mask[0] = true;
            } else {
                for slot in mask.iter_mut().skip(1) {
                    *slot = rng.random_bool(0.3);
                }
                let j = rng.random_range(1..k1);
                mask[j] = true;
            }
            GoldTarget {
                start,
                end,
                type_id: rng.random_range(0..p),
                region: RegionTarget::from_mask(mask).expect("one active slot"),
            }
        })
        .collect()
}

fn tile(u: usize, p: usize) -> Vec<usize> {
    (0..u).map(|q| q % p).collect()
}

/// Set loss is unchanged by every tested permutation of the gold list.
pub fn loss_permutation_invariance(trials: usize, seed: u64) -> CheckResult {
    timed("loss permutation invariance", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0_f64;
        let mut perms = 0;
        for trial in 0..trials {
            let (u, p) = (8, 2);
            let (n, k1) = (rng.random_range(3..10), rng.random_range(2..7));
            let bundle = random_bundle(&mut rng, u, n, k1);
            let m = rng.random_range(0..=5);
            let gold = random_gold(&mut rng, m, n, k1, p);
            let cfg = LossConfig {
                cost: if trial % 2 == 0 { CostKind::Probability } else { CostKind::LogLikelihood },
                negatives: trial % 3 != 0,
                ..LossConfig::default()
            };
            let loss = |g: &[GoldTarget]| -> Result<f64> {
                let padded = pad_gold(g, u, Padding::Null)?;
                let a = match_queries(&padded, &bundle, &tile(u, p), &cfg)?;
                Ok(set_loss_value(&bundle, &padded, &a.perm, cfg.negatives))
            };
            let base = loss(&gold)?;
            for _ in 0..6 {
                let mut shuffled = gold.clone();
                shuffled.shuffle(&mut rng);
                worst = worst.max((loss(&shuffled)? - base).abs());
                perms += 1;
            }
            let mut rev = gold.clone();
            rev.reverse();
            worst = worst.max((loss(&rev)? - base).abs());
            perms += 1;
        }
        Ok((worst <= 1e-9, format!("{perms} permutations, max |Δ| = {worst:.2e}")))
    })
}

/// Bundle where the best query for a single gold entity is not the one the
/// fixed order assigns.
pub fn adversarial_instance() -> (PredictionBundle, Vec<GoldTarget>, Vec<usize>) {
    let (u, n, k1) = (4, 5, 3);
    let mut b = PredictionBundle {
        start: Matrix::filled(u, n, 0.5),
        end: Matrix::filled(u, n, 0.5),
        region: Matrix::filled(u, k1, 0.5),
        exist: vec![0.05, 0.5, 0.95, 0.5],
    };
    b.start.set(2, 1, 0.95);
    b.end.set(2, 3, 0.95);
    b.region.set(2, 2, 0.95);
    let gold = vec![GoldTarget {
        start: 1,
        end: 3,
        type_id: 0,
        region: RegionTarget::from_mask(vec![false, false, true]).expect("active slot"),
    }];
    (b, gold, tile(u, 2))
}

/// Optimal matching never loses to the fixed order, and wins strictly on
/// the adversarial instance.
pub fn loss_dominance(trials: usize, seed: u64) -> CheckResult {
    timed("set loss <= fixed-order loss", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = LossConfig {
            cost: CostKind::LogLikelihood,
            ..LossConfig::default()
        };
        let mut min_gap = f64::INFINITY;
        for _ in 0..trials {
            let (u, p) = (8, 2);
            let (n, k1) = (rng.random_range(3..10), rng.random_range(2..7));
            let bundle = random_bundle(&mut rng, u, n, k1);
            let m = rng.random_range(0..=6);
            let gold = random_gold(&mut rng, m, n, k1, p);
            let padded = pad_gold(&gold, u, Padding::Null)?;
            let types = tile(u, p);
            let a = match_queries(&padded, &bundle, &types, &cfg)?;
            let set = set_loss_value(&bundle, &padded, &a.perm, cfg.negatives);
            let fixed = fixed_order_loss_value(&bundle, &padded, &types, cfg.negatives);
            min_gap = min_gap.min(fixed - set);
        }
        let (b, gold, types) = adversarial_instance();
        let padded = pad_gold(&gold, b.num_queries(), Padding::Null)?;
        let a = match_queries(&padded, &b, &types, &cfg)?;
        let set = set_loss_value(&b, &padded, &a.perm, cfg.negatives);
        let fixed = fixed_order_loss_value(&b, &padded, &types, cfg.negatives);
        let passed = min_gap >= -1e-9 && set < fixed;
        Ok((
            passed,
            format!("min(fixed - set) = {min_gap:.3e}; adversarial {set:.4} < {fixed:.4}"),
        ))
    })
}

/// Configuration used for gradient checks: `h=8, u=4, p=2, L=1`.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        h: 8,
        u: 4,
        p: 2,
        k: 3,
        heads: 2,
        raw_feature_dim: 4,
        max_positions: 8,
        types: vec!["A".into(), "B".into()],
        qfnet: QfnetConfig {
            layers: 1,
            ..QfnetConfig::default()
        },
        ..RunConfig::desk()
    }
}

/// Synthetic spec matching [`tiny_config`]: `n=6`, `k=3`.
pub fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        vocab_size: 10,
        types: vec!["A".into(), "B".into()],
        entities_per_type: 4,
        entities_per_example: (2, 2),
        entity_length: (1, 2),
        sentence_length: (6, 6),
        regions: 3,
        raw_feature_dim: 4,
        groundable_prob: 0.7,
        ambiguity_rate: 0.25,
        ..SyntheticSpec::default()
    }
}

/// Denominator floor of the relative gradient error. Gradients that are
/// exactly zero (attention key biases, which softmax cancels) come back from
/// central differences as roundoff of order `eps * |loss| / step`, about
/// 1e-10 here, so the floor has to sit well above that.
pub const GRAD_FLOOR: f64 = 1e-5;
pub const GRAD_STEP: f64 = 1e-5;

/// Largest relative error per parameter group between analytic gradients
/// of the set loss and central differences.
pub fn gradient_errors(config: &RunConfig, example: &Example) -> Result<Vec<(ParamGroup, f64, String)>> {
    let vocab = build_vocab(std::slice::from_ref(example), &config.schema()?);
    let model = Model::new(config.clone(), vocab)?;
    let padded = model.pad(&model.gold_targets(example)?)?;
    let grads = model.loss_and_grads(example, &padded)?.grads;
    let mut store = model.store.clone();
    let mut out = Vec::new();
    for group in ParamGroup::ALL {
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.group == group && p.trainable)
            .map(|(id, _)| id)
            .collect();
        let report = check_params(&mut store, &ids, &grads, GRAD_STEP, GRAD_FLOOR, |s| {
            model
                .loss_value_in(s, example, &padded)
                .expect("loss evaluates")
        });
        let worst = report.worst().map_or(String::new(), |w| w.name.clone());
        out.push((group, report.max_rel_error(), worst));
    }
    Ok(out)
}

/// Gradient check over `examples` tiny synthetic inputs; reports the worst
/// error per parameter group.
pub fn gradient_check(examples: usize, seed: u64) -> CheckResult {
    timed("gradient check (h=8,u=4,p=2,L=1)", || {
        let data = generate_synthetic(&tiny_spec(), examples, seed)?;
        let mut worst: Vec<(ParamGroup, f64)> = ParamGroup::ALL.iter().map(|&g| (g, 0.0)).collect();
        for ex in &data {
            for (group, err, _) in gradient_errors(&tiny_config(), ex)? {
                if let Some(w) = worst.iter_mut().find(|w| w.0 == group) {
                    w.1 = w.1.max(err);
                }
            }
        }
        let max = worst.iter().map(|e| e.1).fold(0.0, f64::max);
        let detail = worst
            .iter()
            .map(|(g, e)| format!("{g:?} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", ");
        Ok((max < 1e-4, format!("{} examples; {detail}", data.len())))
    })
}

/// Two decoded sets agree when they hold the same quadruples with
/// confidences equal up to `tol`.
pub fn same_decoded(a: &DecodedSet, b: &DecodedSet, tol: f64) -> bool {
    a.len() == b.len()
        && a.predictions
            .iter()
            .zip(&b.predictions)
            .all(|(x, y)| x.quad == y.quad && (x.confidence - y.confidence).abs() <= tol)
}

/// Configuration used for the equivariance check.
pub fn small_config(seed: u64) -> RunConfig {
    RunConfig {
        h: 16,
        u: 8,
        p: 4,
        heads: 2,
        raw_feature_dim: 8,
        max_positions: 32,
        seed,
        qfnet: QfnetConfig {
            layers: 2,
            ..QfnetConfig::default()
        },
        ..RunConfig::desk()
    }
}

/// Decoding is unchanged when the query rows and their type labels are
/// permuted together.
pub fn query_equivariance(trials: usize, seed: u64) -> CheckResult {
    timed("query permutation equivariance", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = SyntheticSpec {
            raw_feature_dim: 8,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec, trials, seed)?;
        let mut nonempty = 0;
        for (t, ex) in data.iter().enumerate() {
            let config = small_config(seed.wrapping_add(t as u64));
            let vocab = build_vocab(std::slice::from_ref(ex), &config.schema()?);
            let model = Model::new(config, vocab)?;
            let mut perm: Vec<usize> = (0..model.config.u).collect();
            perm.shuffle(&mut rng);
            let types = model.type_map();
            let permuted_types: Vec<usize> = perm.iter().map(|&q| types[q]).collect();

            let mut g = Graph::new(&model.store);
            let (text, regions) = model.encode(&mut g, ex)?;
            let q = model.build_queries(&mut g)?;
            let base = model.forward_from(&mut g, q, text, regions).heads.bundle(&g);
            let qp = g.gather_rows(q, &perm);
            let moved = model.forward_from(&mut g, qp, text, regions).heads.bundle(&g);

            // Threshold between two existence scores so that a fresh model
            // still emits predictions. Sitting exactly on one of them would
            // let roundoff from the reordered sums decide that query.
            let mut pc = base.exist.clone();
            pc.sort_by(f64::total_cmp);
            let i = pc.len() / 3;
            let tau = 0.5 * (pc[i - 1] + pc[i]);
            let a = decode(&base, &types, tau);
            let b = decode(&moved, &permuted_types, tau);
            if !same_decoded(&a, &b, 1e-9) {
                return Ok((false, format!("trial {t}: decoded sets differ")));
            }
            nonempty += usize::from(!a.is_empty());
        }
        Ok((true, format!("{trials} model/input pairs, {nonempty} with predictions")))
    })
}

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
    BoundingBox::new(x1, y1, x2, y2).expect("valid fixture box")
}

/// Hand-built metric cases plus randomized predicate subsumption.
pub fn metric_fixtures(trials: usize, seed: u64) -> CheckResult {
    timed("metric fixtures", || {
        let ug = |s: usize| Quadruple::new(s, s, 0, Region::Ungroundable).expect("valid");
        let pred = |s: usize, t: usize, region: Option<BoundingBox>| ScoredPrediction {
            start: s,
            end: s,
            type_id: t,
            region,
            confidence: 0.9,
        };
        let golds = vec![vec![ug(0), ug(1), ug(2), ug(3)]];
        let preds = vec![vec![pred(0, 0, None), pred(1, 0, None), pred(5, 0, None)]];
        let c = score(&preds, &golds, Task::Gmner)?;
        let fixture_ok = c.correct == 2
            && c.predict == 3
            && c.gold == 4
            && (c.precision() - 2.0 / 3.0).abs() < 1e-15
            && c.recall() == 0.5
            && (c.f1() - 4.0 / 7.0).abs() < 1e-15;

        let half_pred = pred(0, 0, Some(bx(0.0, 0.0, 1.0, 1.0)));
        let half_gold = Quadruple::new(0, 0, 0, Region::GoldBoxes(vec![bx(0.0, 0.0, 2.0, 1.0)]))?;
        let boundary_ok = iou(&bx(0.0, 0.0, 1.0, 1.0), &bx(0.0, 0.0, 2.0, 1.0)) == 0.5
            && !correctness(&half_pred, &half_gold, Task::Gmner)
            && !correctness(&half_pred, &half_gold, Task::Eeg)
            && correctness(&half_pred, &half_gold, Task::Mner);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rand_box = |rng: &mut ChaCha8Rng| {
            let (x, y) = (rng.random_range(0.0..4.0), rng.random_range(0.0..4.0));
            bx(x, y, x + rng.random_range(0.5..3.0), y + rng.random_range(0.5..3.0))
        };
        let mut gmner = 0;
        let mut subsumed = true;
        for _ in 0..trials {
            let gs = rng.random_range(0..3);
            let region = if rng.random_bool(0.3) {
                Region::Ungroundable
            } else {
                Region::GoldBoxes((0..rng.random_range(1..3)).map(|_| rand_box(&mut rng)).collect())
            };
            let g = Quadruple::new(gs, gs + rng.random_range(0..2), rng.random_range(0..2), region)?;
            // Half the predictions are perturbed copies of the gold entry so
            // that plenty of pairs are GMNER-correct.
            let p = if rng.random_bool(0.5) {
                let mut start = g.start;
                let mut end = g.end;
                if rng.random_bool(0.2) {
                    end += 1;
                    start = start.min(end);
                }
                let region = match &g.region {
                    Region::GoldBoxes(b) if rng.random_bool(0.8) => {
                        let s = rng.random_range(-0.3..0.3);
                        Some(b[rng.random_range(0..b.len())].translate(s, s)?)
                    }
                    Region::GoldBoxes(_) => Some(rand_box(&mut rng)),
                    _ => rng.random_bool(0.2).then(|| rand_box(&mut rng)),
                };
                ScoredPrediction {
                    start,
                    end,
                    type_id: if rng.random_bool(0.8) { g.type_id } else { 1 - g.type_id },
                    region,
                    confidence: rng.random_range(0.0..1.0),
                }
            } else {
                let s = rng.random_range(0..3);
                ScoredPrediction {
                    start: s,
                    end: s + rng.random_range(0..2),
                    type_id: rng.random_range(0..2),
                    region: rng.random_bool(0.7).then(|| rand_box(&mut rng)),
                    confidence: rng.random_range(0.0..1.0),
                }
            };
            if correctness(&p, &g, Task::Gmner) {
                gmner += 1;
                subsumed &= correctness(&p, &g, Task::Mner) && correctness(&p, &g, Task::Eeg);
            }
        }
        Ok((
            fixture_ok && boundary_ok && subsumed && gmner > 0,
            format!(
                "P=2/3 R=1/2 F1=4/7: {fixture_ok}; IoU=0.5 rejected: {boundary_ok}; subsumption on {gmner} GMNER-correct pairs: {subsumed}"
            ),
        ))
    })
}

/// Save a fresh model's checkpoint to disk, reload it, and compare bundles
/// bit for bit.
pub fn checkpoint_roundtrip(seed: u64) -> CheckResult {
    timed("checkpoint round-trip", || {
        let config = small_config(seed);
        let spec = SyntheticSpec {
            raw_feature_dim: 8,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec, 4, seed)?;
        let vocab = build_vocab(&data, &config.schema()?);
        let model = Model::new(config.clone(), vocab.clone())?;
        let ckpt = Checkpoint {
            config,
            vocab,
            params: model.store.clone(),
            optimizer: crate::params::Adam::new(Default::default(), &model.store),
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dev_f1: None,
        };
        let path = std::env::temp_dir().join(format!("groundset-roundtrip-{}-{seed}.json", std::process::id()));
        ckpt.save(&path)?;
        let back = Checkpoint::load(&path);
        std::fs::remove_file(&path)?;
        let reloaded = back?.model()?;
        for ex in &data {
            if model.bundle(ex)? != reloaded.bundle(ex)? {
                return Ok((false, "bundles differ after reload".into()));
            }
        }
        Ok((true, format!("{} examples bit-identical", data.len())))
    })
}

#[derive(Debug, Clone, Copy)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Swap in [`identity_solver`] to confirm the oracle check can fail.
    pub corrupt_solver: bool,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            seed: 7,
            corrupt_solver: false,
        }
    }
}

/// The full property suite at release-gate sizes.
pub fn run_selftest(opts: SelftestOptions) -> Vec<CheckResult> {
    let solver: Solver = if opts.corrupt_solver {
        identity_solver
    } else {
        solve_hungarian
    };
    vec![
        hungarian_oracle(2..=7, 1000, opts.seed, solver),
        loss_permutation_invariance(200, opts.seed),
        loss_dominance(200, opts.seed),
        gradient_check(5, opts.seed),
        query_equivariance(100, opts.seed),
        metric_fixtures(1000, opts.seed),
        checkpoint_roundtrip(opts.seed),
    ]
}

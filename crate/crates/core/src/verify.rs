//! Executable equivalence checks: the recursive federation against pooled
//! ridge regression, against itself under reordering and regrouping, and
//! the two forms of the aggregation recursion against each other.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::client::{local_train, FeatureBundle, LocalUpdate};
use crate::linalg::{frobenius_rel_error, ridge_solve};
use crate::oracle::{joint_solution, permute_rows, pool, regroup};
use crate::registry::{encode_labels, ClassRegistry};
use crate::server::{AggregationMode, GlobalModel, ServerState};
use crate::synth::{random_federation, FederationShape};
use crate::Error;

/// Relative Frobenius tolerance for every check.
pub const TOLERANCE: f64 = 1e-8;

/// Runs clients through a bare [`ServerState`] in slice order. `tamper`
/// may rewrite an upload before it is folded in.
pub fn federate_with(
    bundles: &[FeatureBundle],
    gamma: f64,
    mode: AggregationMode,
    mut tamper: impl FnMut(usize, &mut LocalUpdate),
) -> Result<ServerState, Error> {
    let width = bundles.first().map(FeatureBundle::embedding_width).ok_or_else(|| {
        Error::Config("no clients to federate".into())
    })?;
    let mut server = ServerState::new(width, gamma)?;
    for (k, b) in bundles.iter().enumerate() {
        let split = server.register(&b.declared_classes)?;
        let mut update = local_train(b, &split, gamma)?;
        tamper(k, &mut update);
        server.aggregate_with(&update, &split, mode)?;
    }
    Ok(server)
}

pub fn federate(bundles: &[FeatureBundle], gamma: f64, mode: AggregationMode) -> Result<ServerState, Error> {
    federate_with(bundles, gamma, mode, |_, _| {})
}

/// Relative error of the recursive model against pooled ridge regression.
pub fn exactness_error(model: &GlobalModel, bundles: &[FeatureBundle], registry: &ClassRegistry, gamma: f64) -> Result<f64, Error> {
    let pooled = pool(bundles)?;
    let oracle = joint_solution(&pooled, registry, gamma)?;
    Ok(frobenius_rel_error(&model.weights, &oracle.weights)?)
}

/// Compares two models column by column after sorting columns by class.
/// Different class sets count as an infinite error.
pub fn aligned_error(a: &GlobalModel, b: &GlobalModel) -> Result<f64, Error> {
    let (ca, wa) = a.aligned_by_class();
    let (cb, wb) = b.aligned_by_class();
    if ca != cb {
        return Ok(f64::INFINITY);
    }
    Ok(frobenius_rel_error(&wa, &wb)?)
}

/// Largest class-aligned error over the given client orders.
pub fn order_invariance_error(bundles: &[FeatureBundle], gamma: f64, orders: &[Vec<usize>]) -> Result<f64, Error> {
    let base = federate(bundles, gamma, AggregationMode::Simplified)?.finalize()?;
    let mut worst: f64 = 0.0;
    for order in orders {
        let shuffled: Vec<FeatureBundle> = order.iter().map(|&i| bundles[i].clone()).collect();
        let model = federate(&shuffled, gamma, AggregationMode::Simplified)?.finalize()?;
        worst = worst.max(aligned_error(&model, &base)?);
    }
    Ok(worst)
}

/// Largest class-aligned error after shuffling the pooled rows and cutting
/// them into new clients of the given sizes.
pub fn regrouping_error(
    bundles: &[FeatureBundle],
    gamma: f64,
    groupings: &[(Vec<usize>, Vec<usize>)],
) -> Result<f64, Error> {
    let base = federate(bundles, gamma, AggregationMode::Simplified)?.finalize()?;
    let pooled = pool(bundles)?;
    let mut worst: f64 = 0.0;
    for (perm, sizes) in groupings {
        let groups = regroup(&permute_rows(&pooled, perm)?, sizes)?;
        let model = federate(&groups, gamma, AggregationMode::Simplified)?.finalize()?;
        worst = worst.max(aligned_error(&model, &base)?);
    }
    Ok(worst)
}

/// Largest error, over all rounds, between the knowledge matrix and its
/// closed form `(F₁:ₖᵀF₁:ₖ + kγI)⁻¹F₁:ₖᵀY₁:ₖ`.
pub fn closed_form_error(bundles: &[FeatureBundle], gamma: f64) -> Result<f64, Error> {
    let width = bundles.first().map(FeatureBundle::embedding_width).unwrap_or(0);
    let mut server = ServerState::new(width, gamma)?;
    let mut worst: f64 = 0.0;
    for k in 1..=bundles.len() {
        let b = &bundles[k - 1];
        let split = server.register(&b.declared_classes)?;
        server.aggregate(&local_train(b, &split, gamma)?, &split)?;
        let pooled = pool(&bundles[..k])?;
        let y = encode_labels(&pooled.labels, server.registry().encoder());
        let expected = ridge_solve(&pooled.features, &y, k as f64 * gamma)?;
        worst = worst.max(frobenius_rel_error(server.knowledge(), &expected)?);
    }
    Ok(worst)
}

/// Relative difference between literal and simplified aggregation.
pub fn literal_error(bundles: &[FeatureBundle], gamma: f64) -> Result<f64, Error> {
    let simplified = federate(bundles, gamma, AggregationMode::Simplified)?.finalize()?;
    let literal = federate(bundles, gamma, AggregationMode::Literal)?.finalize()?;
    Ok(frobenius_rel_error(&literal.weights, &simplified.weights)?)
}

/// A random permutation of `0..n`.
pub fn random_order(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    v
}

/// Random split of `total` into `groups` positive sizes, each at least
/// `min` (clamped so that the split exists).
pub fn random_sizes(total: usize, groups: usize, min: usize, rng: &mut impl Rng) -> Vec<usize> {
    let groups = groups.clamp(1, total.max(1));
    let min = min.max(1).min(total / groups);
    let mut sizes = vec![min; groups];
    for _ in 0..total - min * groups {
        sizes[rng.random_range(0..groups)] += 1;
    }
    sizes
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyConfig {
    pub shape: FederationShape,
    pub gamma: f64,
    pub seed: u64,
    pub permutations: usize,
    pub regroupings: usize,
    /// Perturb the first client's upload; the exactness check must fail.
    pub corrupt: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            shape: FederationShape { clients: 5, width: 8, classes: 6, samples: (10, 40) },
            gamma: 1.0,
            seed: 0,
            permutations: 5,
            regroupings: 2,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let verdict = if c.passed() { "PASS" } else { "FAIL" };
            let _ = writeln!(out, "{verdict}  {:<20} error {:.3e}  tolerance {:.0e}", c.name, c.error, c.tolerance);
        }
        out
    }
}

/// Every check on one random federation. The literal form needs invertible
/// client Gram matrices and is skipped at γ = 0.
pub fn run(config: &VerifyConfig) -> Result<Report, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let bundles = random_federation(&config.shape, &mut rng);
    let gamma = config.gamma;
    let mut checks = Vec::new();

    let server = federate_with(&bundles, gamma, AggregationMode::Simplified, |k, u| {
        if config.corrupt && k == 0 {
            u.w_unknown = u.w_unknown.scale(1.0 + 1e-3);
        }
    })?;
    let model = server.finalize()?;
    checks.push(Check {
        name: "pooled-equivalence",
        error: exactness_error(&model, &bundles, server.registry(), gamma)?,
        tolerance: TOLERANCE,
    });

    let orders: Vec<Vec<usize>> = (0..config.permutations).map(|_| random_order(bundles.len(), &mut rng)).collect();
    checks.push(Check {
        name: "order-invariance",
        error: order_invariance_error(&bundles, gamma, &orders)?,
        tolerance: TOLERANCE,
    });

    let total: usize = bundles.iter().map(FeatureBundle::samples).sum();
    let min = if gamma == 0.0 { config.shape.width } else { 1 };
    let groupings: Vec<(Vec<usize>, Vec<usize>)> = (0..config.regroupings)
        .map(|_| {
            let most = (bundles.len() + 3).min(total / min).max(1);
            let groups = rng.random_range(1..=most);
            (random_order(total, &mut rng), random_sizes(total, groups, min, &mut rng))
        })
        .collect();
    checks.push(Check {
        name: "regrouping",
        error: regrouping_error(&bundles, gamma, &groupings)?,
        tolerance: TOLERANCE,
    });

    checks.push(Check { name: "closed-form", error: closed_form_error(&bundles, gamma)?, tolerance: TOLERANCE });
    if gamma > 0.0 {
        checks.push(Check { name: "literal-recursion", error: literal_error(&bundles, gamma)?, tolerance: TOLERANCE });
    }
    Ok(Report { checks })
}

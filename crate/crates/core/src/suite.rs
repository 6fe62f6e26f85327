//! Seeded random instances and the invariant runner behind `fdual suite`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::convex::{solve_lp, ConcaveOptions, InitialPoint, Relation, Sense, Status};
use crate::cps::{extremal_on, find_cps, CpsPolytope};
use crate::duality::{
    duality_residuals, extract_dual_from_primal, primal_solve, primal_solve_with, random_admissible_portfolio,
    Deflator,
};
use crate::market::{EndowmentSet, Instance, MarketModel, ScenarioTree};
use crate::portfolio::{feasible_k, hedge_lp, superhedge_price};
use crate::shadow::{candidate_shadow, frictionless_solve};
use crate::utility::Utility;

pub const LAMBDAS: [f64; 3] = [0.01, 0.1, 0.3];

/// A random full tree: every path has the same length, every inner node
/// has between two and `max_branch` children (one if `max_branch` is 1).
/// The first child moves up and the second down, so a martingale measure
/// exists for every `λ`.
pub fn random_model<R: Rng>(rng: &mut R, max_depth: usize, max_branch: usize, lambda: f64) -> MarketModel {
    let depth = rng.gen_range(1..=max_depth.max(1));
    let mut spec: Vec<(Option<usize>, f64)> = vec![(None, 1.0)];
    let mut asks = vec![rng.gen_range(2.0..10.0)];
    let mut frontier = vec![0usize];
    for _ in 0..depth {
        let mut next = Vec::new();
        for &v in &frontier {
            let b = rng.gen_range(max_branch.clamp(1, 2)..=max_branch.max(1));
            let weights: Vec<f64> = (0..b).map(|_| rng.gen_range(0.2..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for (k, w) in weights.iter().enumerate() {
                let factor = match (b, k) {
                    (1, _) => 1.0,
                    (_, 0) => rng.gen_range(1.05..1.6),
                    (_, 1) => rng.gen_range(0.6..0.95),
                    _ => rng.gen_range(0.6..1.6),
                };
                spec.push((Some(v), w / total));
                asks.push(asks[v] * factor);
                next.push(spec.len() - 1);
            }
        }
        frontier = next;
    }
    let tree = ScenarioTree::new(&spec).expect("generated tree is valid");
    MarketModel::new(tree, asks, lambda).expect("generated market is valid")
}

pub fn random_claim<R: Rng>(rng: &mut R, model: &MarketModel) -> Vec<f64> {
    (0..model.n_terminals()).map(|_| rng.gen_range(0.0..5.0)).collect()
}

pub fn random_instance<R: Rng>(rng: &mut R, max_depth: usize, max_branch: usize) -> Instance {
    let lambda = *LAMBDAS.choose(rng).unwrap();
    let model = random_model(rng, max_depth, max_branch, lambda);
    let claim = random_claim(rng, &model);
    let endowments = EndowmentSet::new(vec![claim], model.n_terminals()).unwrap();
    let utility = match rng.gen_range(0..4) {
        0 => Utility::Power { p: 0.5 },
        1 => Utility::Power { p: -1.0 },
        _ => Utility::Log,
    };
    Instance {
        model,
        endowments,
        utility,
    }
}

/// Deliberate corruption used to check that the suite notices failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Reverse the `k`-th inequality row (mod their count) of the CPS
    /// polytope used for superhedging prices.
    FlipCpsRow(usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteConfig {
    pub seed: u64,
    pub count: usize,
    pub max_depth: usize,
    pub max_branch: usize,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, Serialize)]
pub struct InstanceOutcome {
    pub index: usize,
    pub nodes: usize,
    pub lambda: f64,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub passed: usize,
    pub failed: usize,
    pub failures_by_invariant: BTreeMap<String, usize>,
    pub outcomes: Vec<InstanceOutcome>,
}

impl SuiteReport {
    pub fn ok(&self) -> bool {
        self.failed == 0
    }
}

pub fn run_suite(cfg: &SuiteConfig) -> SuiteReport {
    let mut outcomes = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64);
        let inst = random_instance(&mut rng, cfg.max_depth, cfg.max_branch);
        let failures = check_instance(&inst, &mut rng, cfg.fault);
        outcomes.push(InstanceOutcome {
            index,
            nodes: inst.model.tree.len(),
            lambda: inst.model.lambda(),
            failures,
        });
    }
    let mut by = BTreeMap::new();
    for o in &outcomes {
        for f in &o.failures {
            *by.entry(f.clone()).or_insert(0) += 1;
        }
    }
    let failed = outcomes.iter().filter(|o| !o.failures.is_empty()).count();
    SuiteReport {
        passed: outcomes.len() - failed,
        failed,
        failures_by_invariant: by,
        outcomes,
    }
}

fn flipped(poly: &mut CpsPolytope, k: usize) {
    let ineq: Vec<usize> = (0..poly.lp.constraints.len())
        .filter(|&i| poly.lp.constraints[i].rel != Relation::Eq)
        .collect();
    let row = &mut poly.lp.constraints[ineq[k % ineq.len()]];
    row.rel = match row.rel {
        Relation::Le => Relation::Ge,
        Relation::Ge => Relation::Le,
        Relation::Eq => Relation::Eq,
    };
}

/// Superhedging LP duality for one claim, optionally on a corrupted
/// polytope. Returns `|sup_Q E^Q[g] − min capital|`.
pub fn superhedge_gap(model: &MarketModel, claim: &[f64], fault: Option<Fault>) -> Option<f64> {
    let mut poly = CpsPolytope::new(model, model.lambda());
    if let Some(Fault::FlipCpsRow(k)) = fault {
        flipped(&mut poly, k);
    }
    let price = extremal_on(model, &poly, claim, Sense::Max).ok()?.value;
    let rep = solve_lp(&hedge_lp(model, claim)).ok()?;
    (rep.status == Status::Optimal).then(|| (price - rep.objective).abs())
}

/// Runs every invariant on one instance and returns the names of those that
/// failed.
pub fn check_instance<R: Rng>(inst: &Instance, rng: &mut R, fault: Option<Fault>) -> Vec<String> {
    let model = &inst.model;
    let tree = &model.tree;
    let mut failures = Vec::new();
    let mut fail = |name: &str| failures.push(name.to_string());

    match find_cps(model, model.lambda()) {
        Ok(cps) if cps.is_valid(model) => {
            let d = Deflator::from_cps(tree, &cps, rng.gen_range(0.5..2.0));
            if d.residuals(model).max() > 1e-9 {
                fail("deflator-cone-density");
            }
        }
        _ => fail("cps-exists"),
    }

    let claim = random_claim(rng, model);
    match superhedge_gap(model, &claim, fault) {
        Some(g) if g <= 1e-7 => {}
        _ => fail("superhedge-duality"),
    }
    match superhedge_price(model, &claim) {
        Ok(sh) => {
            let ok = sh.hedge.terminal_values(model).iter().zip(&claim).all(|(v, g)| v >= &(g - 1e-9));
            if !ok {
                fail("hedge-dominates");
            }
        }
        Err(_) => fail("hedge-dominates"),
    }

    let defl = Deflator::random(model, 1.0, rng);
    let port = random_admissible_portfolio(model, rng.gen_range(0.5..2.0), rng);
    if defl.residuals(model).max() > 1e-9 || defl.wealth_drift(tree, &port) > 1e-9 {
        fail("deflator-drift");
    }

    let q = [rng.gen_range(-0.5..1.0)];
    let s = match feasible_k(model, &inst.endowments, 0.0, &q) {
        Ok((_, s)) => s,
        Err(_) => {
            fail("k-boundary");
            return failures;
        }
    };
    let x = s + rng.gen_range(0.5..2.0);
    let primal = match primal_solve(model, &inst.endowments, x, &q, inst.utility) {
        Ok(p) => p,
        Err(_) => {
            fail("primal-solve");
            return failures;
        }
    };
    let dual = match extract_dual_from_primal(model, &inst.endowments, &primal) {
        Ok(d) => d,
        Err(_) => {
            fail("dual-extraction");
            return failures;
        }
    };
    let res = duality_residuals(model, &primal, &dual);
    if res.gap > 1e-5 {
        fail("duality-gap");
    }
    if res.first_order > 1e-6 {
        fail("first-order");
    }
    if res.complementary > 1e-6 {
        fail("complementary-slackness");
    }
    let opts = ConcaveOptions {
        start: InitialPoint::Perturbed { seed: rng.gen() },
        ..Default::default()
    };
    match primal_solve_with(model, &inst.endowments, x, &q, inst.utility, &opts) {
        Ok(other) => {
            let d = other.wealth.iter().zip(&primal.wealth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if d > 1e-6 {
                fail("terminal-uniqueness");
            }
        }
        Err(_) => fail("terminal-uniqueness"),
    }
    match candidate_shadow(model, &dual) {
        Ok(c) if c.spread_violation <= 1e-7 => match frictionless_solve(model, &c, &inst.endowments, x, &q, inst.utility) {
            Ok(f) if f.value >= primal.value - 1e-9 && (f.value - primal.value).abs() <= 1e-5 => {}
            _ => fail("shadow-value"),
        },
        _ => fail("shadow-spread"),
    }
    failures
}

//! Command implementations. Each returns the `results` and `residuals`
//! sections of the report, or a failure carrying the exit code.

use serde_json::{json, Value};

use fdual_core::convex::{ConcaveOptions, DEFAULT_MAX_ITER};
use fdual_core::cps::{
    cps_with_price, find_cps, price_interval, ConsistentPriceSystem, CpsError, PriceQuery, MARTINGALE_TOL,
};
use fdual_core::duality::{
    duality_residuals, extract_dual_from_primal, primal_solve_with, DualityError, KKT_TOL,
};
use fdual_core::portfolio::superhedge_price;
use fdual_core::shadow::{candidate_shadow, check_classic, ShadowError};
use fdual_core::suite::{run_suite, Fault, SuiteConfig};
use fdual_core::{Instance, ModelError};

use crate::report::{num, nums};

pub const EXIT_SUITE: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_NO_CPS: u8 = 3;
pub const EXIT_SOLVER: u8 = 4;
pub const EXIT_OUTSIDE_K: u8 = 5;

/// Agreement required between the CPS price and the hedging LP.
pub const HEDGE_GAP_TOL: f64 = 1e-7;
/// Gap tolerance for the primal/dual values.
pub const GAP_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Failure {
    pub code: u8,
    pub message: String,
    /// Partial results gathered before the failure.
    pub results: Value,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
            results: json!({}),
        }
    }
}

pub struct Output {
    pub results: Value,
    pub residuals: Value,
    /// Nonzero for outcomes that are reports rather than errors (failing
    /// suites).
    pub code: u8,
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::new(EXIT_INVALID, e.to_string())
    }
}

impl From<CpsError> for Failure {
    fn from(e: CpsError) -> Self {
        let code = match e {
            CpsError::Infeasible { .. } | CpsError::NotEquivalent { .. } => EXIT_NO_CPS,
            CpsError::BadLevel(_) => EXIT_INVALID,
            CpsError::Solver(_) | CpsError::Convex(_) => EXIT_SOLVER,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<DualityError> for Failure {
    fn from(e: DualityError) -> Self {
        let code = match &e {
            DualityError::OutsideK { .. } | DualityError::BoundaryK { .. } => EXIT_OUTSIDE_K,
            DualityError::Replicable | DualityError::Dimension(_) => EXIT_INVALID,
            DualityError::Cps(c) => return Failure::from(c.clone()),
            _ => EXIT_SOLVER,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<ShadowError> for Failure {
    fn from(e: ShadowError) -> Self {
        match e {
            ShadowError::Duality(d) => Failure::from(d),
            other => Failure::new(EXIT_SOLVER, other.to_string()),
        }
    }
}

fn cps_json(inst: &Instance, cps: &ConsistentPriceSystem) -> Value {
    let tree = &inst.model.tree;
    json!({
        "q_cond": cps.q_cond,
        "measure": cps.measure(tree),
        "s_tilde": cps.s_tilde,
        "violation": num(cps.violation(&inst.model, inst.model.lambda()), MARTINGALE_TOL),
    })
}

pub fn validate(inst: &Instance) -> Output {
    let m = &inst.model;
    Output {
        results: json!({
            "valid": true,
            "nodes": m.tree.len(),
            "terminals": m.n_terminals(),
            "horizon": m.tree.horizon(),
            "lambda": m.lambda(),
            "claims": inst.endowments.n_claims(),
            "utility": format!("{:?}", inst.utility),
        }),
        residuals: json!({}),
        code: 0,
    }
}

pub fn cps(inst: &Instance, lambda_prime: Option<f64>, price_of: Option<(usize, f64)>) -> Result<Output, Failure> {
    let m = &inst.model;
    let lp = lambda_prime.unwrap_or(m.lambda());
    let witness = find_cps(m, lp)?;
    let mut results = json!({ "lambda_prime": lp, "witness": cps_json(inst, &witness) });
    if let Some((idx, p)) = price_of {
        if idx >= inst.endowments.n_claims() {
            return Err(Failure::new(EXIT_INVALID, format!("no claim with index {idx}")));
        }
        let mut q = vec![0.0; inst.endowments.n_claims()];
        q[idx] = 1.0;
        let (lo, hi) = price_interval(m, &inst.endowments, &q)?;
        let query = match cps_with_price(m, &inst.endowments, &q, p)? {
            PriceQuery::Interior(c) => json!({ "kind": "interior", "cps": cps_json(inst, &c) }),
            PriceQuery::Boundary(point) => json!({ "kind": "boundary", "mass": point.mass, "value": point.value }),
            PriceQuery::Outside => {
                let mut f = Failure::new(EXIT_NO_CPS, format!("price {p} is outside the interval [{lo}, {hi}]"));
                f.results = json!({ "interval": [lo, hi] });
                return Err(f);
            }
        };
        results["price_query"] = json!({ "claim": idx, "price": p, "interval": nums(&[lo, hi], MARTINGALE_TOL), "result": query });
    }
    Ok(Output {
        results,
        residuals: json!({ "witness_violation": num(witness.violation(m, lp), MARTINGALE_TOL) }),
        code: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Upper,
    Lower,
}

/// A claim given as a claim index or as comma-separated terminal payoffs.
pub fn resolve_claim(inst: &Instance, spec: &str) -> Result<Vec<f64>, Failure> {
    let n = inst.model.n_terminals();
    if !spec.contains(',') {
        if let Ok(idx) = spec.trim().parse::<usize>() {
            if idx < inst.endowments.n_claims() {
                return Ok(inst.endowments.claim(idx).to_vec());
            }
            if n != 1 {
                return Err(Failure::new(EXIT_INVALID, format!("no claim with index {idx}")));
            }
        }
    }
    let values = parse_vector(spec).map_err(|e| Failure::new(EXIT_INVALID, e))?;
    if values.len() != n {
        return Err(Failure::new(
            EXIT_INVALID,
            format!("claim has {} payoffs but the tree has {n} terminal nodes", values.len()),
        ));
    }
    Ok(values)
}

pub fn parse_vector(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("bad number `{t}`: {e}")))
        .collect()
}

pub fn superhedge(inst: &Instance, claim: &[f64], side: Side) -> Result<Output, Failure> {
    let m = &inst.model;
    let (target, sign) = match side {
        Side::Upper => (claim.to_vec(), 1.0),
        Side::Lower => (claim.iter().map(|v| -v).collect(), -1.0),
    };
    let sh = superhedge_price(m, &target)?;
    let gap = sh.duality_gap();
    let results = json!({
        "side": if side == Side::Upper { "upper" } else { "lower" },
        "claim": claim,
        "price": num(sign * sh.price, HEDGE_GAP_TOL),
        "hedge_capital": num(sign * sh.hedge_lp_capital, HEDGE_GAP_TOL),
        "hedge_trades": sh.hedge.trades.iter().map(|t| t.net()).collect::<Vec<_>>(),
        "attaining_cps": {
            "boundary": sh.extremal.boundary,
            "witness": cps_json(inst, &sh.extremal.witness),
        },
    });
    if gap > HEDGE_GAP_TOL {
        let mut f = Failure::new(EXIT_SOLVER, format!("CPS price and hedging capital differ by {gap:e}"));
        f.results = results;
        return Err(f);
    }
    Ok(Output {
        results,
        residuals: json!({ "price_hedge_gap": num(gap, HEDGE_GAP_TOL) }),
        code: 0,
    })
}

pub struct SolveArgs {
    pub x: f64,
    pub q: Vec<f64>,
    pub dual: bool,
    pub shadow: bool,
    pub tol: f64,
    pub solver_tol: f64,
    pub max_iter: usize,
}

impl Default for SolveArgs {
    fn default() -> Self {
        SolveArgs {
            x: 1.0,
            q: Vec::new(),
            dual: false,
            shadow: false,
            tol: 1e-6,
            solver_tol: 1e-10,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

pub fn solve(inst: &Instance, args: &SolveArgs) -> Result<Output, Failure> {
    let m = &inst.model;
    let e = &inst.endowments;
    let q = if args.q.is_empty() { vec![0.0; e.n_claims()] } else { args.q.clone() };
    if q.len() != e.n_claims() {
        return Err(Failure::new(
            EXIT_INVALID,
            format!("--q has {} entries but the instance has {} claims", q.len(), e.n_claims()),
        ));
    }
    let opts = ConcaveOptions {
        tol: args.solver_tol,
        max_iter: args.max_iter,
        ..Default::default()
    };
    let primal = primal_solve_with(m, e, args.x, &q, inst.utility, &opts)?;
    let mut results = json!({
        "x": args.x,
        "q": q,
        "primal": {
            "value": num(primal.value, args.tol),
            "terminal_wealth": nums(&primal.wealth, args.tol),
            "net_trades": primal.net_trades,
            "k_margin": primal.k_margin,
            "iterations": primal.report.iterations,
        },
    });
    let mut residuals = json!({ "primal_kkt": num(primal.report.kkt.max(), KKT_TOL) });
    if !(args.dual || args.shadow) {
        return Ok(Output { results, residuals, code: 0 });
    }

    let dual = extract_dual_from_primal(m, e, &primal)?;
    let res = duality_residuals(m, &primal, &dual);
    let prices: Vec<f64> = dual.r.iter().map(|r| r / dual.y).collect();
    results["dual"] = json!({
        "y": num(dual.y, args.tol),
        "r": nums(&dual.r, args.tol),
        "value": num(dual.value, args.tol),
        "marginal_prices": nums(&prices, args.tol),
        "y0": dual.deflator.y0,
        "y1": dual.deflator.y1,
    });
    residuals["duality_gap"] = num(res.gap, GAP_TOL);
    residuals["first_order"] = num(res.first_order, args.tol);
    residuals["complementary_slackness"] = num(res.complementary, args.tol);
    residuals["endowment"] = num(dual.endowment_residual, args.tol);
    let mut code = 0;
    if res.gap > GAP_TOL {
        code = EXIT_SOLVER;
    }

    if args.shadow {
        let cand = candidate_shadow(m, &dual)?;
        let verdict = check_classic(m, e, &primal, &dual, args.tol)?;
        results["shadow"] = json!({
            "s_hat": cand.s_hat,
            "well_defined": cand.well_defined,
            "verdict": verdict.verdict,
            "trade_conditions_ok": verdict.trade_conditions_ok,
            "frictionless_value": num(verdict.frictionless_value, args.tol),
            "trade_checks": verdict.trades,
        });
        residuals["shadow_spread"] = num(cand.spread_violation, args.tol);
        residuals["shadow_value_gap"] = num(verdict.value_gap, args.tol);
        residuals["y0_martingale"] = num(verdict.y0_martingale_residual, args.tol);
        residuals["y1_martingale"] = num(verdict.y1_martingale_residual, args.tol);
        residuals["price_match"] = num(verdict.price_match_residual, args.tol);
    }
    Ok(Output { results, residuals, code })
}

pub fn suite(seed: u64, count: usize, max_depth: usize, max_branch: usize, fault: Option<usize>) -> Output {
    let cfg = SuiteConfig {
        seed,
        count,
        max_depth,
        max_branch,
        fault: fault.map(Fault::FlipCpsRow),
    };
    let rep = run_suite(&cfg);
    let failing: Vec<_> = rep.outcomes.iter().filter(|o| !o.failures.is_empty()).collect();
    Output {
        results: json!({
            "config": cfg,
            "passed": rep.passed,
            "failed": rep.failed,
            "failures_by_invariant": rep.failures_by_invariant,
            "failing_instances": failing,
        }),
        residuals: json!({}),
        code: if rep.ok() { 0 } else { EXIT_SUITE },
    }
}

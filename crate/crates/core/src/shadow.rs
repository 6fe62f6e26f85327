//! Shadow prices built from the dual optimizer and their verification.

use serde::Serialize;
use thiserror::Error;

use crate::convex::{solve_concave_with, ConcaveOptions, ConcaveTerm, ConvexError, SeparableConcaveProgram, Status, TermKind};
use crate::cps::price_interval;
use crate::duality::{subdifferential, DualSolution, DualityError, PrimalSolution, Subgradient, PROBE_STEP};
use crate::market::{EndowmentSet, MarketModel};
use crate::utility::Utility;

/// Net trades smaller than this count as solver noise.
pub const TRADE_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShadowError {
    #[error("deflator vanishes everywhere")]
    ZeroDeflator,
    #[error("candidate undefined at node {0}")]
    Undefined(usize),
    #[error("needs exactly one endowment claim, got {0}")]
    ClaimCount(usize),
    #[error(transparent)]
    Duality(#[from] DualityError),
    #[error(transparent)]
    Convex(#[from] ConvexError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShadowCandidate {
    /// `Ŝ = Y¹/Y⁰`, `NaN` where `Y⁰ = 0`.
    pub s_hat: Vec<f64>,
    pub well_defined: Vec<bool>,
    /// Largest distance of `Ŝ` outside `[(1−λ)S, S]` over defined nodes.
    pub spread_violation: f64,
    /// `(y, r)` of the dual solution the candidate came from.
    pub y: f64,
    pub r: Vec<f64>,
}

impl ShadowCandidate {
    pub fn from_prices(model: &MarketModel, s_hat: Vec<f64>) -> Self {
        let spread_violation = spread_violation(model, &s_hat, &vec![true; s_hat.len()]);
        ShadowCandidate {
            well_defined: vec![true; s_hat.len()],
            s_hat,
            spread_violation,
            y: f64::NAN,
            r: Vec::new(),
        }
    }
}

fn spread_violation(model: &MarketModel, s_hat: &[f64], defined: &[bool]) -> f64 {
    s_hat
        .iter()
        .zip(defined)
        .enumerate()
        .filter(|(_, (_, &d))| d)
        .map(|(v, (&s, _))| (s - model.ask(v)).max(model.bid(v) - s).max(0.0))
        .fold(0.0, f64::max)
}

pub fn candidate_shadow(model: &MarketModel, dual: &DualSolution) -> Result<ShadowCandidate, ShadowError> {
    let d = &dual.deflator;
    if d.y0.iter().all(|&v| v <= 0.0) {
        return Err(ShadowError::ZeroDeflator);
    }
    let well_defined: Vec<bool> = d.y0.iter().map(|&v| v > 0.0).collect();
    let s_hat: Vec<f64> = d
        .y0
        .iter()
        .zip(&d.y1)
        .zip(&well_defined)
        .map(|((a, b), &ok)| if ok { b / a } else { f64::NAN })
        .collect();
    let spread_violation = spread_violation(model, &s_hat, &well_defined);
    Ok(ShadowCandidate {
        s_hat,
        well_defined,
        spread_violation,
        y: dual.y,
        r: dual.r.clone(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TradeCheck {
    pub node: usize,
    pub net: f64,
    pub s_hat: f64,
    /// `S` for purchases, `(1−λ)S` for sales.
    pub target: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TradeReport {
    pub checks: Vec<TradeCheck>,
    pub violations: Vec<usize>,
    pub ok: bool,
}

/// Purchases must happen where `Ŝ = S`, sales where `Ŝ = (1−λ)S`.
pub fn verify_trade_conditions(model: &MarketModel, primal: &PrimalSolution, cand: &ShadowCandidate, tol: f64) -> TradeReport {
    let mut checks = Vec::new();
    let mut violations = Vec::new();
    for (v, &net) in primal.net_trades.iter().enumerate() {
        if net.abs() <= TRADE_EPS {
            continue;
        }
        let target = if net > 0.0 { model.ask(v) } else { model.bid(v) };
        let deviation = (cand.s_hat[v] - target).abs();
        if !(deviation <= tol) {
            violations.push(v);
        }
        checks.push(TradeCheck {
            node: v,
            net,
            s_hat: cand.s_hat[v],
            target,
            deviation,
        });
    }
    TradeReport {
        ok: violations.is_empty(),
        checks,
        violations,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FrictionlessSolution {
    pub status: Status,
    /// `+∞` when trading at `Ŝ` is unbounded.
    pub value: f64,
    /// Net trade per node (terminal nodes carry zero).
    pub trades: Vec<f64>,
    pub wealth: Vec<f64>,
}

/// `u(x, q; Ŝ)`: trades at `Ŝ` without a spread and the wealth
/// `X_T + q·E_T` kept positive.
pub fn frictionless_solve(
    model: &MarketModel,
    cand: &ShadowCandidate,
    endowments: &EndowmentSet,
    x: f64,
    q: &[f64],
    u: Utility,
) -> Result<FrictionlessSolution, ShadowError> {
    let tree = &model.tree;
    if let Some(v) = cand.well_defined.iter().position(|&d| !d) {
        return Err(ShadowError::Undefined(v));
    }
    let n = tree.len();
    let qe = endowments.combination(q, model.n_terminals());
    let mut prog = SeparableConcaveProgram::new(n);
    let kind = match u {
        Utility::Log => TermKind::Log,
        Utility::Power { p } => TermKind::Power(p),
    };
    for (k, &t) in tree.terminals().iter().enumerate() {
        // X_T = x + Σ_{a < ω} θ_a (Ŝ_ω − Ŝ_a)
        let coeffs: Vec<(usize, f64)> = tree
            .path(t)
            .into_iter()
            .filter(|&a| a != t)
            .map(|a| (a, cand.s_hat[t] - cand.s_hat[a]))
            .collect();
        prog.add_term(ConcaveTerm::new(tree.prob(t), kind, coeffs, x + qe[k]));
    }
    for &t in tree.terminals() {
        prog.set_bounds(t, 0.0, 0.0);
    }
    let opts = ConcaveOptions::default();
    let rep = match solve_concave_with(&prog, &opts) {
        Ok(r) => r,
        Err(ConvexError::EmptyInterior { .. }) | Err(ConvexError::Infeasible { .. }) => {
            return Err(DualityError::OutsideK { x, s: f64::NAN }.into())
        }
        Err(e) => return Err(e.into()),
    };
    let value = match rep.status {
        Status::Optimal => tree.expectation(
            &prog.terms.iter().map(|t| u.value_unchecked(t.argument(&rep.x))).collect::<Vec<_>>(),
        ),
        Status::Unbounded => f64::INFINITY,
        s => return Err(DualityError::Solver(s).into()),
    };
    Ok(FrictionlessSolution {
        status: rep.status,
        value,
        wealth: prog.terms.iter().map(|t| t.argument(&rep.x)).collect(),
        trades: rep.x,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Classic,
    VerifiedAtOptimum,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShadowVerdict {
    pub trade_conditions_ok: bool,
    pub trades: TradeReport,
    pub frictionless_value: f64,
    /// `|u(x, q) − u(x, q; Ŝ)|`.
    pub value_gap: f64,
    pub y0_martingale_residual: f64,
    pub y1_martingale_residual: f64,
    /// `max_i |E^{Q*}[E^i_T] − r_i/y|` with `dQ*/dP = Y⁰_T/y`.
    pub price_match_residual: f64,
    pub verdict: Verdict,
}

/// Classic when the deflator is a density pair pricing the claims at
/// `r/y` and frictionless trading at `Ŝ` reproduces `u`; verified at the
/// optimum when only the trade conditions and value match hold.
pub fn check_classic(
    model: &MarketModel,
    endowments: &EndowmentSet,
    primal: &PrimalSolution,
    dual: &DualSolution,
    tol: f64,
) -> Result<ShadowVerdict, ShadowError> {
    let tree = &model.tree;
    let cand = candidate_shadow(model, dual)?;
    let trades = verify_trade_conditions(model, primal, &cand, tol);
    let fr = frictionless_solve(model, &cand, endowments, primal.x, &primal.q, primal.utility)?;
    let value_gap = (fr.value - primal.value).abs();
    let (y0_martingale_residual, y1_martingale_residual) = dual.deflator.martingale_residuals(tree);
    let y0_t = dual.terminal_y0(tree);
    let price_match_residual = (0..endowments.n_claims())
        .map(|i| {
            let ye: Vec<f64> = y0_t.iter().zip(endowments.claim(i)).map(|(a, b)| a * b).collect();
            (tree.expectation(&ye) / dual.y - dual.r[i] / dual.y).abs()
        })
        .fold(0.0, f64::max);
    let value_ok = value_gap <= tol;
    let verdict = if value_ok
        && trades.ok
        && y0_martingale_residual <= tol
        && y1_martingale_residual <= tol
        && price_match_residual <= tol
    {
        Verdict::Classic
    } else if value_ok && trades.ok {
        Verdict::VerifiedAtOptimum
    } else {
        Verdict::Failed
    };
    Ok(ShadowVerdict {
        trade_conditions_ok: trades.ok,
        trades,
        frictionless_value: fr.value,
        value_gap,
        y0_martingale_residual,
        y1_martingale_residual,
        price_match_residual,
        verdict,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EndowmentDomination {
    /// Smallest `a` with `E_T ≤ a(1−λ)S_T` (long claim) or largest `a`
    /// with `E_T ≥ a S_T` (short claim).
    pub a: f64,
    pub satisfiable: bool,
}

/// Sufficient endowment bounds for a classic shadow price with one claim,
/// chosen by the sign of `q`.
pub fn check_endowment_domination(model: &MarketModel, endowments: &EndowmentSet, q_sign: f64) -> Result<EndowmentDomination, ShadowError> {
    if endowments.n_claims() != 1 {
        return Err(ShadowError::ClaimCount(endowments.n_claims()));
    }
    let terms = model.tree.terminals().iter().zip(endowments.claim(0));
    if q_sign > 0.0 {
        let a = terms.map(|(&t, &e)| e / model.bid(t)).fold(0.0, f64::max);
        Ok(EndowmentDomination { a, satisfiable: a.is_finite() })
    } else {
        let a = terms.map(|(&t, &e)| e / model.ask(t)).fold(f64::INFINITY, f64::min);
        Ok(EndowmentDomination { a, satisfiable: a > 0.0 })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginalPrices {
    /// `r_i / y` per claim.
    pub prices: Vec<f64>,
    /// Arbitrage-free interval of each claim.
    pub intervals: Vec<(f64, f64)>,
    pub inside: Vec<bool>,
    pub subgradient: Subgradient,
}

pub fn marginal_price_report(
    model: &MarketModel,
    endowments: &EndowmentSet,
    x: f64,
    q: &[f64],
    u: Utility,
) -> Result<MarginalPrices, ShadowError> {
    let sub = subdifferential(model, endowments, x, q, u, PROBE_STEP)?;
    let prices = sub.marginal_prices();
    let mut intervals = Vec::new();
    let mut inside = Vec::new();
    for (i, &p) in prices.iter().enumerate() {
        let mut unit = vec![0.0; endowments.n_claims()];
        unit[i] = 1.0;
        let (lo, hi) = price_interval(model, endowments, &unit).map_err(DualityError::from)?;
        inside.push(p >= lo - 1e-9 && p <= hi + 1e-9);
        intervals.push((lo, hi));
    }
    Ok(MarginalPrices {
        prices,
        intervals,
        inside,
        subgradient: sub,
    })
}

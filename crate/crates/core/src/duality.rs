//! Utility maximization with random endowments, its dual over
//! supermartingale deflators, and numerical checks of the duality relations.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::convex::{
    solve_concave_with, solve_lp, ConcaveOptions, ConcaveTerm, ConvexError, LinearProgram, Relation,
    SeparableConcaveProgram, Sense, SolveReport, Status, TermKind,
};
use crate::cps::{
    check_replicable, claim_interval, cps_to_density, extremal_expectation, extreme_point_superset, ConsistentPriceSystem,
    CpsError, CpsPolytope, DensityPair, POSITIVITY_FLOOR, REPLICABLE_WIDTH,
};
use crate::market::{EndowmentSet, MarketModel, ScenarioTree};
use crate::portfolio::{feasible_k, hedge_lp, make_portfolio, superhedge_price, KMembership, Portfolio, Trade, TradeLayout};
use crate::utility::Utility;

/// Accepted KKT residual of a primal or dual solve.
pub const KKT_TOL: f64 = 1e-7;
/// Probe step for the supergradient certificate.
pub const PROBE_STEP: f64 = 1e-3;
pub const PROBE_TOL: f64 = 1e-6;
/// Dual optimum above the extracted value by more than this is reported
/// as transcription slack.
pub const TRANSCRIPTION_SLACK: f64 = 1e-5;
/// Largest enumerated vertex set used by the bipolar checks.
pub const VERTEX_CAP: usize = 20_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DualityError {
    #[error("(x, q) is outside K: x = {x} but the boundary is {s}")]
    OutsideK { x: f64, s: f64 },
    #[error("(x, q) is on the boundary of K (x = s = {s})")]
    BoundaryK { s: f64 },
    #[error("q·E_T is replicable, so the duality pair is degenerate")]
    Replicable,
    #[error("(y, r) is outside L")]
    OutsideL,
    #[error("(y, r) is in L but the deflator rows have no strictly feasible point")]
    TranscriptionInfeasible,
    #[error("solver stopped with status {0:?}")]
    Solver(Status),
    #[error("solver KKT residual {0:.3e} exceeds the acceptance level")]
    Inaccurate(f64),
    #[error("extracted multipliers violate the deflator rows by {0:.3e}")]
    MultiplierInconsistency(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Cps(#[from] CpsError),
    #[error(transparent)]
    Convex(#[from] ConvexError),
}

/// Node-indexed pair `(Y⁰, Y¹)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Deflator {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

/// Worst violation of each family of deflator rows.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DeflatorResiduals {
    pub negativity: f64,
    pub spread: f64,
    /// `m⁰ ≤ Y⁰` and the two mixed drift rows.
    pub drift: f64,
}

impl DeflatorResiduals {
    pub fn max(&self) -> f64 {
        self.negativity.max(self.spread).max(self.drift)
    }
}

impl Deflator {
    /// `y · (Z⁰, Z¹)` for a CPS density pair.
    pub fn from_density(density: &DensityPair, y: f64) -> Self {
        Deflator {
            y0: density.z0.iter().map(|z| y * z).collect(),
            y1: density.z1.iter().map(|z| y * z).collect(),
        }
    }

    pub fn from_cps(tree: &ScenarioTree, cps: &ConsistentPriceSystem, y: f64) -> Self {
        Self::from_density(&cps_to_density(tree, cps), y)
    }

    /// Fills both components from terminal values by `P`-conditional
    /// expectation.
    pub fn from_terminal(tree: &ScenarioTree, y0_t: &[f64], y1_t: &[f64]) -> Self {
        Deflator {
            y0: tree.conditional_expectation(y0_t),
            y1: tree.conditional_expectation(y1_t),
        }
    }

    pub fn terminal_y0(&self, tree: &ScenarioTree) -> Vec<f64> {
        tree.terminals().iter().map(|&t| self.y0[t]).collect()
    }

    pub fn terminal_y1(&self, tree: &ScenarioTree) -> Vec<f64> {
        tree.terminals().iter().map(|&t| self.y1[t]).collect()
    }

    pub fn residuals(&self, model: &MarketModel) -> DeflatorResiduals {
        let tree = &model.tree;
        let mut r = DeflatorResiduals::default();
        for v in 0..tree.len() {
            let (s, b) = (model.ask(v), model.bid(v));
            r.negativity = r.negativity.max(-self.y0[v]).max(-self.y1[v]);
            r.spread = r.spread.max(self.y1[v] - s * self.y0[v]).max(b * self.y0[v] - self.y1[v]);
        }
        for v in tree.non_terminals() {
            let (m0, m1) = self.drift_means(tree, v);
            let (s, b) = (model.ask(v), model.bid(v));
            let d0 = m0 - self.y0[v];
            let d1 = m1 - self.y1[v];
            r.drift = r.drift.max(d0).max(s * d0 - d1).max(d1 - b * d0);
        }
        r
    }

    pub fn is_valid(&self, model: &MarketModel, tol: f64) -> bool {
        self.residuals(model).max() <= tol
    }

    /// `(E[Y⁰(c) | ν], E[Y¹(c) | ν])` over the children of `ν`.
    pub fn drift_means(&self, tree: &ScenarioTree, v: usize) -> (f64, f64) {
        tree.children(v).iter().fold((0.0, 0.0), |(a, b), &c| {
            let p = tree.cond_prob(c);
            (a + p * self.y0[c], b + p * self.y1[c])
        })
    }

    /// Largest `|E[Y⁰(c)|ν] − Y⁰(ν)|` and the same for `Y¹`.
    pub fn martingale_residuals(&self, tree: &ScenarioTree) -> (f64, f64) {
        (
            tree.martingale_residual_with(&self.y0, |c| tree.cond_prob(c)),
            tree.martingale_residual_with(&self.y1, |c| tree.cond_prob(c)),
        )
    }

    /// Largest one-step drift `E[X(c)|ν] − X(ν)` of the deflated wealth
    /// `X = φ⁰Y⁰ + φ¹Y¹`, with post-trade holdings at every node.
    pub fn wealth_drift(&self, tree: &ScenarioTree, portfolio: &Portfolio) -> f64 {
        let x: Vec<f64> = portfolio
            .holdings
            .iter()
            .enumerate()
            .map(|(v, &(h0, h1))| h0 * self.y0[v] + h1 * self.y1[v])
            .collect();
        tree.non_terminals()
            .map(|v| tree.children(v).iter().map(|&c| tree.cond_prob(c) * x[c]).sum::<f64>() - x[v])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// A random point of the deflator cone with `Y⁰(root) = y`, built
    /// bottom-up. About half the nodes get a strictly negative drift.
    pub fn random<R: Rng>(model: &MarketModel, y: f64, rng: &mut R) -> Self {
        let tree = &model.tree;
        let n = tree.len();
        let lam = model.lambda();
        let mut y0 = vec![0.0; n];
        let mut y1 = vec![0.0; n];
        for v in (0..n).rev() {
            let (s, b) = (model.ask(v), model.bid(v));
            if tree.is_terminal(v) {
                y0[v] = rng.gen_range(0.2..2.0);
                y1[v] = y0[v] * rng.gen_range(b..=s);
                continue;
            }
            let (m0, m1) = tree
                .children(v)
                .iter()
                .fold((0.0, 0.0), |(a, c0), &c| (a + tree.cond_prob(c) * y0[c], c0 + tree.cond_prob(c) * y1[c]));
            let need = 0.0f64.max((m1 - s * m0) / (lam * s)).max((b * m0 - m1) / (lam * s));
            let extra = if rng.gen_bool(0.5) { rng.gen_range(0.0..0.3) * m0 } else { 0.0 };
            let d = need + extra;
            y0[v] = m0 + d;
            let lo = (b * y0[v]).max(m1 + b * d);
            let hi = (s * y0[v]).min(m1 + s * d);
            y1[v] = if hi > lo { rng.gen_range(lo..=hi) } else { 0.5 * (lo + hi) };
        }
        let k = y / y0[0];
        Deflator {
            y0: y0.iter().map(|v| v * k).collect(),
            y1: y1.iter().map(|v| v * k).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrimalSolution {
    pub x: f64,
    pub q: Vec<f64>,
    pub utility: Utility,
    /// Netted, liquidated portfolio.
    pub portfolio: Portfolio,
    /// Net share trade per node as returned by the solver.
    pub net_trades: Vec<f64>,
    /// `W_T = V_T + q·E_T` per terminal, from the solver iterate.
    pub wealth: Vec<f64>,
    pub value: f64,
    /// Multipliers of the terminal liquidation rows, in terminal order.
    pub liquidation_duals: Vec<f64>,
    /// `x` minus the boundary of `K` at `q`.
    pub k_margin: f64,
    pub report: SolveReport,
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    pub y: f64,
    pub r: Vec<f64>,
    pub deflator: Deflator,
    pub value: f64,
    /// `max_i |E[Y⁰_T E^i_T] − r_i|`.
    pub endowment_residual: f64,
    pub report: Option<SolveReport>,
}

impl DualSolution {
    pub fn terminal_y0(&self, tree: &ScenarioTree) -> Vec<f64> {
        self.deflator.terminal_y0(tree)
    }
}

fn term_kind(u: Utility) -> TermKind {
    match u {
        Utility::Log => TermKind::Log,
        Utility::Power { p } => TermKind::Power(p),
    }
}

fn check_dims(model: &MarketModel, endowments: &EndowmentSet, q: &[f64]) -> Result<(), DualityError> {
    if q.len() != endowments.n_claims() {
        return Err(DualityError::Dimension(format!(
            "q has {} entries for {} claims",
            q.len(),
            endowments.n_claims()
        )));
    }
    if endowments.n_claims() > 0 && endowments.claim(0).len() != model.n_terminals() {
        return Err(DualityError::Dimension("endowments do not match the tree".into()));
    }
    Ok(())
}

/// The primal problem as a separable concave program over `[b; s]`.
pub fn primal_program(model: &MarketModel, endowments: &EndowmentSet, x: f64, q: &[f64], u: Utility) -> SeparableConcaveProgram {
    let tree = &model.tree;
    let layout = TradeLayout::new(model);
    let qe = endowments.combination(q, model.n_terminals());
    let mut prog = SeparableConcaveProgram::new(layout.n_vars());
    for j in 0..layout.n_vars() {
        prog.set_bounds(j, 0.0, f64::INFINITY);
    }
    for (k, &t) in tree.terminals().iter().enumerate() {
        prog.add_term(ConcaveTerm::new(tree.prob(t), term_kind(u), layout.wealth_coeffs(model, t), x + qe[k]));
    }
    for &t in tree.terminals() {
        prog.add_row(layout.position_coeffs(model, t), Relation::Eq, 0.0);
    }
    prog
}

pub fn primal_solve(model: &MarketModel, endowments: &EndowmentSet, x: f64, q: &[f64], u: Utility) -> Result<PrimalSolution, DualityError> {
    primal_solve_with(model, endowments, x, q, u, &ConcaveOptions::default())
}

pub fn primal_solve_with(
    model: &MarketModel,
    endowments: &EndowmentSet,
    x: f64,
    q: &[f64],
    u: Utility,
    opts: &ConcaveOptions,
) -> Result<PrimalSolution, DualityError> {
    check_dims(model, endowments, q)?;
    let (membership, s) = feasible_k(model, endowments, x, q)?;
    match membership {
        KMembership::Outside => return Err(DualityError::OutsideK { x, s }),
        KMembership::Boundary => return Err(DualityError::BoundaryK { s }),
        KMembership::Interior => {}
    }
    if q.iter().any(|&v| v != 0.0) && check_replicable(model, endowments, q)? {
        return Err(DualityError::Replicable);
    }
    let prog = primal_program(model, endowments, x, q, u);
    let rep = match solve_concave_with(&prog, opts) {
        Ok(r) => r,
        Err(ConvexError::EmptyInterior { .. }) | Err(ConvexError::Infeasible { .. }) => {
            return Err(DualityError::OutsideK { x, s })
        }
        Err(e) => return Err(e.into()),
    };
    if rep.status != Status::Optimal {
        return Err(DualityError::Solver(rep.status));
    }
    if !rep.kkt.within(KKT_TOL) {
        return Err(DualityError::Inaccurate(rep.kkt.max()));
    }
    let tree = &model.tree;
    let layout = TradeLayout::new(model);
    let wealth: Vec<f64> = prog.terms.iter().map(|t| t.argument(&rep.x)).collect();
    let value = tree.expectation(&wealth.iter().map(|&w| u.value_unchecked(w)).collect::<Vec<_>>());
    let net_trades = (0..tree.len()).map(|v| rep.x[layout.buy(v)] - rep.x[layout.sell(v)]).collect();
    let trades: Vec<Trade> = layout.netted(&rep.x);
    let portfolio = make_portfolio(model, x, &trades, true);
    let liquidation_duals = rep.multipliers.rows.clone();
    Ok(PrimalSolution {
        x,
        q: q.to_vec(),
        utility: u,
        portfolio,
        net_trades,
        wealth,
        value,
        liquidation_duals,
        k_margin: x - s,
        report: rep,
    })
}

/// Reads the dual optimizer off the primal multipliers: `Y⁰_T = U′(W_T)`,
/// `Y¹_T` from the liquidation rows, interior values by conditional
/// expectation.
pub fn extract_dual_from_primal(model: &MarketModel, endowments: &EndowmentSet, primal: &PrimalSolution) -> Result<DualSolution, DualityError> {
    let tree = &model.tree;
    let u = primal.utility;
    let y0_t: Vec<f64> = primal.wealth.iter().map(|&w| u.deriv_unchecked(w)).collect();
    let y1_t: Vec<f64> = tree
        .terminals()
        .iter()
        .zip(&primal.liquidation_duals)
        .map(|(&t, m)| -m / tree.prob(t))
        .collect();
    let deflator = Deflator::from_terminal(tree, &y0_t, &y1_t);
    let scale = 1.0 + deflator.y1.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let bad = deflator.residuals(model).max();
    if bad > KKT_TOL * scale {
        return Err(DualityError::MultiplierInconsistency(bad));
    }
    let y = deflator.y0[0];
    let r: Vec<f64> = (0..endowments.n_claims())
        .map(|i| tree.expectation(&y0_t.iter().zip(endowments.claim(i)).map(|(a, e)| a * e).collect::<Vec<_>>()))
        .collect();
    let value = tree.expectation(&y0_t.iter().map(|&v| u.conjugate_unchecked(v)).collect::<Vec<_>>());
    Ok(DualSolution {
        y,
        r,
        deflator,
        value,
        endowment_residual: 0.0,
        report: None,
    })
}

/// Drift rows of the dual problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DualTranscription {
    /// Zero drift for both components. Combined with the equality
    /// endowment rows this is the set weak duality is proved on.
    #[default]
    MartingaleClosure,
    /// The full supermartingale cone rows.
    Supermartingale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LMembership {
    Interior,
    /// In the closed cone, but no equivalent measure prices at `r/y`.
    Boundary,
    Outside,
}

/// Closed-cone membership of `(y, r)`: `r/y` must be a vector of CPS
/// prices of the claims; a positivity probe separates boundary points.
pub fn l_membership(model: &MarketModel, endowments: &EndowmentSet, y: f64, r: &[f64]) -> Result<LMembership, DualityError> {
    if r.len() != endowments.n_claims() {
        return Err(DualityError::Dimension("r has the wrong length".into()));
    }
    if y <= 0.0 {
        return Ok(if y == 0.0 && r.iter().all(|&v| v == 0.0) {
            LMembership::Boundary
        } else {
            LMembership::Outside
        });
    }
    let tree = &model.tree;
    let poly = CpsPolytope::new(model, model.lambda());
    let mut lp = poly.lp.clone();
    for (i, ri) in r.iter().enumerate() {
        let row = tree
            .terminals()
            .iter()
            .zip(endowments.claim(i))
            .map(|(&t, &e)| (poly.mass_var(t), e))
            .collect();
        lp.add_row(row, Relation::Eq, ri / y);
    }
    let t = lp.n_vars();
    lp.objective.push(1.0);
    lp.bounds.push((f64::NEG_INFINITY, 1.0));
    for &w in tree.terminals() {
        lp.add_row(vec![(poly.mass_var(w), 1.0), (t, -tree.prob(w))], Relation::Ge, 0.0);
    }
    let rep = solve_lp(&lp)?;
    match rep.status {
        Status::Optimal if rep.x[t] > POSITIVITY_FLOOR => {
            // an endpoint of some claim's price interval is a relative
            // boundary point even when an equivalent measure attains it
            for (i, ri) in r.iter().enumerate() {
                let (lo, hi) = claim_interval(model, endowments.claim(i))?;
                let p = ri / y;
                if hi - lo > REPLICABLE_WIDTH && ((p - lo).abs() <= REPLICABLE_WIDTH || (hi - p).abs() <= REPLICABLE_WIDTH) {
                    return Ok(LMembership::Boundary);
                }
            }
            Ok(LMembership::Interior)
        }
        Status::Optimal => Ok(LMembership::Boundary),
        Status::Infeasible => Ok(LMembership::Outside),
        s => Err(DualityError::Solver(s)),
    }
}

/// The dual problem over `[y0; y1]`, maximizing `−Σ P Ũ(y0_T)`.
pub fn dual_program(
    model: &MarketModel,
    endowments: &EndowmentSet,
    y: f64,
    r: &[f64],
    u: Utility,
    transcription: DualTranscription,
) -> SeparableConcaveProgram {
    let tree = &model.tree;
    let n = tree.len();
    let mut prog = SeparableConcaveProgram::new(2 * n);
    for j in 0..2 * n {
        prog.set_bounds(j, 0.0, f64::INFINITY);
    }
    for &t in tree.terminals() {
        let p = tree.prob(t);
        match u.conjugate_exponent() {
            None => {
                prog.add_term(ConcaveTerm::new(p, TermKind::Log, vec![(t, 1.0)], 0.0));
                prog.constant += p;
            }
            Some(e) => prog.add_term(ConcaveTerm::new(p, TermKind::Power(e), vec![(t, 1.0)], 0.0)),
        }
    }
    prog.add_row(vec![(0, 1.0)], Relation::Eq, y);
    for v in 0..n {
        let (s, b) = (model.ask(v), model.bid(v));
        prog.add_row(vec![(n + v, 1.0), (v, -s)], Relation::Le, 0.0);
        prog.add_row(vec![(n + v, 1.0), (v, -b)], Relation::Ge, 0.0);
    }
    for v in tree.non_terminals() {
        // d0 = m0 − y0(ν), d1 = m1 − y1(ν) as sparse rows
        let mut d0 = vec![(v, -1.0)];
        let mut d1 = vec![(n + v, -1.0)];
        for &c in tree.children(v) {
            d0.push((c, tree.cond_prob(c)));
            d1.push((n + c, tree.cond_prob(c)));
        }
        match transcription {
            DualTranscription::MartingaleClosure => {
                prog.add_row(d0, Relation::Eq, 0.0);
                prog.add_row(d1, Relation::Eq, 0.0);
            }
            DualTranscription::Supermartingale => {
                let (s, b) = (model.ask(v), model.bid(v));
                let comb = |k0: f64, k1: f64| -> Vec<(usize, f64)> {
                    d0.iter().map(|&(j, a)| (j, k0 * a)).chain(d1.iter().map(|&(j, a)| (j, k1 * a))).collect()
                };
                prog.add_row(d0.clone(), Relation::Le, 0.0);
                prog.add_row(comb(s, -1.0), Relation::Le, 0.0);
                prog.add_row(comb(-b, 1.0), Relation::Le, 0.0);
            }
        }
    }
    for (i, ri) in r.iter().enumerate() {
        let row = tree
            .terminals()
            .iter()
            .zip(endowments.claim(i))
            .map(|(&t, &e)| (t, tree.prob(t) * e))
            .collect();
        prog.add_row(row, Relation::Eq, *ri);
    }
    prog
}

pub fn dual_solve(model: &MarketModel, endowments: &EndowmentSet, y: f64, r: &[f64], u: Utility) -> Result<DualSolution, DualityError> {
    dual_solve_with(model, endowments, y, r, u, DualTranscription::default(), &ConcaveOptions::default())
}

pub fn dual_solve_with(
    model: &MarketModel,
    endowments: &EndowmentSet,
    y: f64,
    r: &[f64],
    u: Utility,
    transcription: DualTranscription,
    opts: &ConcaveOptions,
) -> Result<DualSolution, DualityError> {
    if l_membership(model, endowments, y, r)? == LMembership::Outside {
        return Err(DualityError::OutsideL);
    }
    let mut prog = dual_program(model, endowments, y, r, u, transcription);
    let rep = match solve_concave_with(&prog, opts) {
        Ok(rep) => rep,
        Err(ConvexError::EmptyInterior { .. }) | Err(ConvexError::Infeasible { .. }) => {
            // the feasible set can sit in a face of the spread rows, e.g. when
            // r/y pins a measure whose price process touches bid or ask
            prog = with_implicit_equalities(&prog, 1.0 + y * model.asks().iter().fold(0.0f64, |a, &b| a.max(b)))?;
            match solve_concave_with(&prog, opts) {
                Ok(rep) => rep,
                Err(ConvexError::EmptyInterior { .. }) | Err(ConvexError::Infeasible { .. }) => {
                    return Err(DualityError::TranscriptionInfeasible)
                }
                Err(e) => return Err(e.into()),
            }
        }
        Err(e) => return Err(e.into()),
    };
    if rep.status != Status::Optimal {
        return Err(DualityError::Solver(rep.status));
    }
    if !rep.kkt.within(KKT_TOL) {
        return Err(DualityError::Inaccurate(rep.kkt.max()));
    }
    let tree = &model.tree;
    let n = tree.len();
    let deflator = Deflator {
        y0: rep.x[..n].to_vec(),
        y1: rep.x[n..].to_vec(),
    };
    let y0_t = deflator.terminal_y0(tree);
    let endowment_residual = (0..endowments.n_claims())
        .map(|i| {
            let e: Vec<f64> = y0_t.iter().zip(endowments.claim(i)).map(|(a, b)| a * b).collect();
            (tree.expectation(&e) - r[i]).abs()
        })
        .fold(0.0, f64::max);
    let value = tree.expectation(&y0_t.iter().map(|&v| u.conjugate_unchecked(v)).collect::<Vec<_>>());
    Ok(DualSolution {
        y,
        r: r.to_vec(),
        deflator,
        value,
        endowment_residual,
        report: Some(rep),
    })
}

/// Turns inequality rows and bounds that no feasible point satisfies
/// strictly into equalities, one LP per candidate.
fn with_implicit_equalities(prog: &SeparableConcaveProgram, scale: f64) -> Result<SeparableConcaveProgram, DualityError> {
    let band = 1e-9 * scale;
    let tol = 1e-6 * scale;
    let mut base = LinearProgram::new(prog.n, Sense::Max);
    base.bounds = prog.bounds.clone();
    // equalities get a band of width `tol` so that data sitting a rounding
    // error outside a degenerate face still has feasible points
    for c in &prog.constraints {
        if c.rel == Relation::Eq {
            base.add_row(c.coeffs.clone(), Relation::Le, c.rhs + band);
            base.add_row(c.coeffs.clone(), Relation::Ge, c.rhs - band);
        } else {
            base.constraints.push(c.clone());
        }
    }
    for t in prog.terms.iter().filter(|t| t.is_strict()) {
        base.add_row(t.coeffs.clone(), Relation::Ge, -t.offset);
    }
    let max_slack = |obj: &[(usize, f64)]| -> Result<f64, DualityError> {
        let mut lp = base.clone();
        for &(j, a) in obj {
            lp.objective[j] += a;
        }
        let rep = solve_lp(&lp)?;
        match rep.status {
            Status::Optimal => Ok(rep.objective),
            Status::Unbounded => Ok(f64::INFINITY),
            Status::Infeasible => Err(DualityError::TranscriptionInfeasible),
            s => Err(DualityError::Solver(s)),
        }
    };
    let mut out = prog.clone();
    for (i, c) in prog.constraints.iter().enumerate() {
        let slack = match c.rel {
            Relation::Eq => continue,
            Relation::Le => max_slack(&c.coeffs.iter().map(|&(j, a)| (j, -a)).collect::<Vec<_>>())? + c.rhs,
            Relation::Ge => max_slack(&c.coeffs)? - c.rhs,
        };
        if slack <= tol {
            out.constraints[i].rel = Relation::Eq;
        }
    }
    for (j, &(lo, hi)) in prog.bounds.iter().enumerate() {
        if lo.is_finite() && max_slack(&[(j, 1.0)])? - lo <= tol {
            out.bounds[j] = (lo, lo);
        } else if hi.is_finite() && max_slack(&[(j, -1.0)])? + hi <= tol {
            out.bounds[j] = (hi, hi);
        }
    }
    drop_dependent_equalities(&mut out);
    Ok(out)
}

/// Removes equality rows in the span of earlier ones (Gram–Schmidt on
/// dense copies).
fn drop_dependent_equalities(prog: &mut SeparableConcaveProgram) {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut keep = Vec::with_capacity(prog.constraints.len());
    for c in &prog.constraints {
        if c.rel != Relation::Eq {
            keep.push(true);
            continue;
        }
        let mut v = vec![0.0; prog.n];
        for &(j, a) in &c.coeffs {
            v[j] += a;
        }
        let norm0 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(b).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-10 * norm0.max(1.0) {
            basis.push(v.iter().map(|a| a / norm).collect());
            keep.push(true);
        } else {
            keep.push(false);
        }
    }
    let mut it = keep.into_iter();
    prog.constraints.retain(|_| it.next().unwrap());
}

/// Checks of the optimality relations between a primal and a dual solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DualityResiduals {
    /// `|u − (v + xy + q·r)|`.
    pub gap: f64,
    /// `max_ω |Y⁰_T − U′(W_T)|`.
    pub first_order: f64,
    /// `|E[Y⁰_T W_T] − (xy + q·r)|`.
    pub complementary: f64,
}

pub fn duality_residuals(model: &MarketModel, primal: &PrimalSolution, dual: &DualSolution) -> DualityResiduals {
    let tree = &model.tree;
    let y0_t = dual.terminal_y0(tree);
    let budget = primal.x * dual.y + primal.q.iter().zip(&dual.r).map(|(a, b)| a * b).sum::<f64>();
    let first_order = y0_t
        .iter()
        .zip(&primal.wealth)
        .map(|(y, &w)| (y - primal.utility.deriv_unchecked(w)).abs())
        .fold(0.0, f64::max);
    let yw: Vec<f64> = y0_t.iter().zip(&primal.wealth).map(|(a, b)| a * b).collect();
    DualityResiduals {
        gap: (primal.value - dual.value - budget).abs(),
        first_order,
        complementary: (tree.expectation(&yw) - budget).abs(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConjugacyEntry {
    pub x: f64,
    pub q: Vec<f64>,
    pub u: f64,
    /// `min (v + xy + q·r)` over the dual grid plus the extracted point.
    pub dual_bound: f64,
    pub gap: f64,
    pub extracted: (f64, Vec<f64>),
    /// Excess of the dual optimum at the extracted point over the
    /// extracted value, when it exceeds `TRANSCRIPTION_SLACK`.
    pub transcription_slack: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConjugacyReport {
    pub entries: Vec<ConjugacyEntry>,
    /// Largest `u − (v + xy + q·r)` over all grid pairs.
    pub max_weak_violation: f64,
    pub weak_violations: usize,
    /// Dual grid points rejected as outside `L` or without interior.
    pub skipped_dual: usize,
}

/// Weak duality on every grid pair and attainment of `u` by the dual side.
pub fn conjugacy_check(
    model: &MarketModel,
    endowments: &EndowmentSet,
    u: Utility,
    primal_grid: &[(f64, Vec<f64>)],
    dual_grid: &[(f64, Vec<f64>)],
) -> Result<ConjugacyReport, DualityError> {
    let mut duals = Vec::new();
    let mut skipped = 0;
    for (y, r) in dual_grid {
        match dual_solve(model, endowments, *y, r, u) {
            Ok(d) => duals.push(d),
            Err(DualityError::OutsideL) | Err(DualityError::TranscriptionInfeasible) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    let bound = |x: f64, q: &[f64], d: &DualSolution| d.value + x * d.y + q.iter().zip(&d.r).map(|(a, b)| a * b).sum::<f64>();
    let mut entries = Vec::new();
    let mut max_weak = f64::NEG_INFINITY;
    let mut weak_violations = 0;
    for (x, q) in primal_grid {
        let p = primal_solve(model, endowments, *x, q, u)?;
        let mut best = f64::INFINITY;
        for d in &duals {
            let b = bound(*x, q, d);
            let viol = p.value - b;
            max_weak = max_weak.max(viol);
            if viol > 1e-9 {
                weak_violations += 1;
            }
            best = best.min(b);
        }
        let ext = extract_dual_from_primal(model, endowments, &p)?;
        best = best.min(bound(*x, q, &ext));
        let transcription_slack = match dual_solve(model, endowments, ext.y, &ext.r, u) {
            Ok(d) if d.value - ext.value > TRANSCRIPTION_SLACK => Some(d.value - ext.value),
            _ => None,
        };
        entries.push(ConjugacyEntry {
            x: *x,
            q: q.clone(),
            u: p.value,
            dual_bound: best,
            gap: best - p.value,
            extracted: (ext.y, ext.r.clone()),
            transcription_slack,
        });
    }
    Ok(ConjugacyReport {
        entries,
        max_weak_violation: max_weak,
        weak_violations,
        skipped_dual: skipped,
    })
}

/// `sup (u(x,q) − xy − q·r)` over a primal grid: the conjugate formula for
/// `v(y, r)`, evaluated from below.
pub fn conjugate_value(
    model: &MarketModel,
    endowments: &EndowmentSet,
    u: Utility,
    y: f64,
    r: &[f64],
    primal_grid: &[(f64, Vec<f64>)],
) -> Result<f64, DualityError> {
    let mut best = f64::NEG_INFINITY;
    for (x, q) in primal_grid {
        match primal_solve(model, endowments, *x, q, u) {
            Ok(p) => best = best.max(p.value - x * y - q.iter().zip(r).map(|(a, b)| a * b).sum::<f64>()),
            Err(DualityError::OutsideK { .. }) | Err(DualityError::BoundaryK { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Serialize)]
pub struct Probe {
    pub x: f64,
    pub q: Vec<f64>,
    /// `None` when the probe left `K` (there `u = −∞`).
    pub u: Option<f64>,
    pub violation: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Subgradient {
    pub y: f64,
    pub r: Vec<f64>,
    pub u: f64,
    pub probes: Vec<Probe>,
    pub worst_violation: f64,
    pub in_l: LMembership,
    pub certified: bool,
}

impl Subgradient {
    pub fn marginal_prices(&self) -> Vec<f64> {
        self.r.iter().map(|r| r / self.y).collect()
    }
}

/// Candidate `(y, r) ∈ ∂u(x, q)` with the supergradient inequality checked
/// at `(x ± h, q)` and `(x, q ± h eᵢ)`.
pub fn subdifferential(
    model: &MarketModel,
    endowments: &EndowmentSet,
    x: f64,
    q: &[f64],
    u: Utility,
    h: f64,
) -> Result<Subgradient, DualityError> {
    let base = primal_solve(model, endowments, x, q, u)?;
    let dual = extract_dual_from_primal(model, endowments, &base)?;
    let mut points: Vec<(f64, Vec<f64>)> = vec![(x + h, q.to_vec()), (x - h, q.to_vec())];
    for i in 0..q.len() {
        for sgn in [1.0, -1.0] {
            let mut qq = q.to_vec();
            qq[i] += sgn * h;
            points.push((x, qq));
        }
    }
    let mut probes = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    for (xp, qp) in points {
        let up = match primal_solve(model, endowments, xp, &qp, u) {
            Ok(p) => Some(p.value),
            Err(DualityError::OutsideK { .. }) | Err(DualityError::BoundaryK { .. }) => None,
            Err(e) => return Err(e),
        };
        let lin = dual.y * (xp - x) + dual.r.iter().zip(qp.iter().zip(q)).map(|(r, (a, b))| r * (a - b)).sum::<f64>();
        let violation = up.map_or(f64::NEG_INFINITY, |v| v - base.value - lin);
        worst = worst.max(violation);
        probes.push(Probe { x: xp, q: qp, u: up, violation });
    }
    let in_l = l_membership(model, endowments, dual.y, &dual.r)?;
    Ok(Subgradient {
        y: dual.y,
        r: dual.r,
        u: base.value,
        probes,
        worst_violation: worst,
        certified: worst <= PROBE_TOL && in_l != LMembership::Outside,
        in_l,
    })
}

/// Where the vertex inequalities come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VertexSource {
    Enumerated,
    /// Too many vertices; the LP maximum over the polytope stands in.
    LpMaximum,
}

#[derive(Debug, Clone, Serialize)]
pub struct BipolarCase {
    /// `x − max_h E^h[g − q·E_T]` over the dual vertices.
    pub vertex_margin: f64,
    /// `x` minus the hedging capital of `g − q·E_T`.
    pub hedge_margin: f64,
    pub member_by_vertices: bool,
    pub member_by_hedge: bool,
    pub consistent: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct BipolarReport {
    pub source: VertexSource,
    pub vertices: usize,
    pub cases: Vec<BipolarCase>,
    pub inconsistent: usize,
}

/// Tolerance of the two membership tests.
pub const BIPOLAR_TOL: f64 = 1e-7;

/// Membership of each sample `g ≥ 0` in `C(x, q)`, tested against the dual
/// vertices with `y = 1` and independently by the hedging LP.
pub fn verify_bipolar(
    model: &MarketModel,
    endowments: &EndowmentSet,
    x: f64,
    q: &[f64],
    samples: &[Vec<f64>],
) -> Result<BipolarReport, DualityError> {
    let tree = &model.tree;
    let qe = endowments.combination(q, model.n_terminals());
    let vertices = extreme_point_superset(model, VERTEX_CAP);
    let source = if vertices.is_some() { VertexSource::Enumerated } else { VertexSource::LpMaximum };
    let mut cases = Vec::new();
    for g in samples {
        let net: Vec<f64> = g.iter().zip(&qe).map(|(a, b)| a - b).collect();
        let sigma = match &vertices {
            Some(vs) => vs.iter().map(|h| h.expectation(tree, &net)).fold(f64::NEG_INFINITY, f64::max),
            None => extremal_expectation(model, &net, Sense::Max)?.value,
        };
        let rep = solve_lp(&hedge_lp(model, &net))?;
        if rep.status != Status::Optimal {
            return Err(DualityError::Solver(rep.status));
        }
        let capital = rep.objective;
        let vertex_margin = x - sigma;
        let hedge_margin = x - capital;
        let member_by_vertices = vertex_margin >= -BIPOLAR_TOL && g.iter().all(|&v| v >= 0.0);
        let member_by_hedge = hedge_margin >= -BIPOLAR_TOL && g.iter().all(|&v| v >= 0.0);
        cases.push(BipolarCase {
            vertex_margin,
            hedge_margin,
            member_by_vertices,
            member_by_hedge,
            consistent: member_by_vertices == member_by_hedge,
        });
    }
    let inconsistent = cases.iter().filter(|c| !c.consistent).count();
    Ok(BipolarReport {
        source,
        vertices: vertices.map_or(0, |v| v.len()),
        cases,
        inconsistent,
    })
}

/// Random trade sizes at non-terminal nodes, scaled by `theta`.
fn random_trades<R: Rng>(model: &MarketModel, rng: &mut R) -> Vec<Trade> {
    (0..model.tree.len())
        .map(|v| {
            if model.tree.is_terminal(v) {
                Trade::default()
            } else {
                Trade::from_net(rng.gen_range(-1.0..1.0))
            }
        })
        .collect()
}

fn add_trades(a: &[Trade], b: &[Trade], theta: f64) -> Vec<Trade> {
    a.iter()
        .zip(b)
        .map(|(a, b)| Trade {
            buy: a.buy + theta * b.buy,
            sell: a.sell + theta * b.sell,
        })
        .collect()
}

/// A random element of `C(x, q)`: `u·(V_T + q·E_T)` for a strategy made of
/// the hedge of `−q·E_T`, the spare cash, and a scaled random strategy
/// that never spends more than the spare cash.
pub fn member_claim<R: Rng>(model: &MarketModel, endowments: &EndowmentSet, x: f64, q: &[f64], rng: &mut R) -> Result<Vec<f64>, DualityError> {
    let qe = endowments.combination(q, model.n_terminals());
    let neg: Vec<f64> = qe.iter().map(|v| -v).collect();
    let base = superhedge_price(model, &neg)?;
    let spare = x - base.capital();
    if spare < 0.0 {
        return Err(DualityError::OutsideK { x, s: base.capital() });
    }
    let rand = random_trades(model, rng);
    let probe = make_portfolio(model, 0.0, &rand, true);
    let worst = probe.terminal_values(model).into_iter().fold(0.0f64, |a, v| a.min(v));
    let theta_max = if worst < 0.0 { (spare / -worst).min(10.0) } else { 10.0 };
    let theta = rng.gen_range(0.0..=1.0) * theta_max;
    let port = make_portfolio(model, x, &add_trades(&base.hedge.trades, &rand, theta), true);
    let scale = rng.gen_range(0.0..=1.0);
    Ok(port
        .terminal_values(model)
        .iter()
        .zip(&qe)
        .map(|(v, e)| (scale * (v + e)).max(0.0))
        .collect())
}

/// Raises `g` at the terminal carrying most mass under the maximizing
/// measure so that exactly one vertex inequality fails by `excess`.
pub fn perturb_to_non_member(
    model: &MarketModel,
    endowments: &EndowmentSet,
    x: f64,
    q: &[f64],
    g: &[f64],
    excess: f64,
) -> Result<Vec<f64>, DualityError> {
    let tree = &model.tree;
    let qe = endowments.combination(q, model.n_terminals());
    let net: Vec<f64> = g.iter().zip(&qe).map(|(a, b)| a - b).collect();
    let ext = extremal_expectation(model, &net, Sense::Max)?;
    let (k, mass) = tree
        .terminals()
        .iter()
        .enumerate()
        .map(|(k, &t)| (k, ext.point.mass[t]))
        .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let bump = (x - ext.value + excess) / mass;
    let mut out = g.to_vec();
    out[k] += bump.max(0.0);
    Ok(out)
}

/// A random admissible portfolio from `x`: random trades scaled so the
/// liquidation value stays nonnegative at every node.
pub fn random_admissible_portfolio<R: Rng>(model: &MarketModel, x: f64, rng: &mut R) -> Portfolio {
    let trades = random_trades(model, rng);
    let at = |theta: f64| {
        let scaled: Vec<Trade> = trades
            .iter()
            .map(|t| Trade {
                buy: theta * t.buy,
                sell: theta * t.sell,
            })
            .collect();
        make_portfolio(model, x, &scaled, false)
    };
    let ok = |theta: f64| at(theta).liquidation_values(model).iter().all(|&v| v >= 0.0);
    // liquidation values are concave in theta, so the feasible set is an interval
    let (mut lo, mut hi) = (0.0, 1.0);
    while ok(hi) && hi < 1e6 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(rng.gen_range(0.0..=1.0) * lo)
}

#[derive(Debug, Clone, Serialize)]
pub struct LambdaSweep {
    pub lambdas: Vec<f64>,
    pub values: Vec<f64>,
    /// Largest increase of `u` between consecutive grid points.
    pub worst_increase: f64,
}

/// `u(x, q)` along a grid of transaction costs.
pub fn lambda_sweep(
    model: &MarketModel,
    endowments: &EndowmentSet,
    x: f64,
    q: &[f64],
    u: Utility,
    lambdas: &[f64],
) -> Result<LambdaSweep, DualityError> {
    let mut values = Vec::new();
    for &l in lambdas {
        let m = model.with_lambda(l).map_err(|e| DualityError::Dimension(e.to_string()))?;
        values.push(primal_solve(&m, endowments, x, q, u)?.value);
    }
    let worst_increase = values.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    Ok(LambdaSweep {
        lambdas: lambdas.to_vec(),
        values,
        worst_increase,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convex::InitialPoint;
    use crate::cps::find_cps;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instance_a(lambda: f64) -> (MarketModel, EndowmentSet) {
        let tree = ScenarioTree::new(&[(None, 1.0), (Some(0), 0.5), (Some(0), 0.5)]).unwrap();
        let model = MarketModel::new(tree, vec![4.0, 8.0, 2.0], lambda).unwrap();
        let e = EndowmentSet::new(vec![vec![3.0, 0.0]], 2).unwrap();
        (model, e)
    }

    // Golden-section maximum of a one-dimensional concave function.
    fn golden_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
        let r = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if f(c) > f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let m = 0.5 * (a + b);
        (m, f(m))
    }

    // One-period Instance A utility of a root trade `d` (positive buys).
    fn one_period(lambda: f64, x: f64, q: f64, d: f64) -> f64 {
        let (s0, su, sd) = (4.0, 8.0, 2.0);
        let k = 1.0 - lambda;
        let (wu, wd) = if d >= 0.0 {
            (x - s0 * d + k * su * d + 3.0 * q, x - s0 * d + k * sd * d)
        } else {
            (x - k * s0 * d + su * d + 3.0 * q, x - k * s0 * d + sd * d)
        };
        if wu <= 0.0 || wd <= 0.0 {
            return f64::NEG_INFINITY;
        }
        0.5 * wu.ln() + 0.5 * wd.ln()
    }

    #[test]
    fn instance_a_no_trade_optima() {
        let (m, e) = instance_a(0.25);
        let p = primal_solve(&m, &e, 1.0, &[0.0], Utility::Log).unwrap();
        assert!(p.value.abs() < 1e-8, "{}", p.value);
        let (d, best) = golden_max(|d| one_period(0.25, 1.0, 0.0, d), -0.3, 0.3);
        assert!(d.abs() < 1e-6 && best.abs() < 1e-12);

        let p = primal_solve(&m, &e, 1.0, &[1.0], Utility::Log).unwrap();
        assert!((p.value - 2f64.ln()).abs() < 1e-8);
        assert!((p.wealth[0] - 4.0).abs() < 1e-6 && (p.wealth[1] - 1.0).abs() < 1e-6, "{:?}", p.wealth);
        assert!(p.net_trades.iter().all(|t| t.abs() < 1e-6));
        let (_, best) = golden_max(|d| one_period(0.25, 1.0, 1.0, d), -0.3, 0.3);
        assert!((best - p.value).abs() < 1e-8);
    }

    #[test]
    fn frictionless_binomial_trade() {
        let (m, e) = instance_a(1e-12);
        let p = primal_solve(&m, &e, 1.0, &[0.0], Utility::Log).unwrap();
        assert!((p.net_trades[0] - 0.125).abs() < 1e-6, "{:?}", p.net_trades);
        assert!((p.value - 0.5 * (9.0f64 / 8.0).ln()).abs() < 1e-9);
        let d = extract_dual_from_primal(&m, &e, &p).unwrap();
        let y0 = d.terminal_y0(&m.tree);
        assert!((y0[0] - 2.0 / 3.0).abs() < 1e-6 && (y0[1] - 4.0 / 3.0).abs() < 1e-6);
        assert!((d.y - 1.0).abs() < 1e-6);
        let es = m.tree.expectation(&[y0[0] * 8.0, y0[1] * 2.0]);
        assert!((es - 4.0).abs() < 1e-6);
    }

    #[test]
    fn extraction_on_instance_a() {
        let (m, e) = instance_a(0.25);
        let p = primal_solve(&m, &e, 1.0, &[1.0], Utility::Log).unwrap();
        let d = extract_dual_from_primal(&m, &e, &p).unwrap();
        assert!((d.y - 0.625).abs() < 1e-7 && (d.r[0] - 0.375).abs() < 1e-7, "{} {:?}", d.y, d.r);
        assert!(d.deflator.is_valid(&m, 1e-7));
        let res = duality_residuals(&m, &p, &d);
        assert!(res.gap < 1e-7 && res.first_order < 1e-7 && res.complementary < 1e-7, "{res:?}");
        assert!((d.value - (0.5 * 4f64.ln() - 1.0)).abs() < 1e-7);
    }

    #[test]
    fn dual_solve_on_instance_a() {
        let (m, e) = instance_a(0.25);
        let d = dual_solve(&m, &e, 0.625, &[0.375], Utility::Log).unwrap();
        assert!((d.value - (0.5 * 4f64.ln() - 1.0)).abs() < 1e-8, "{}", d.value);
        let y0 = d.terminal_y0(&m.tree);
        assert!((y0[0] - 0.25).abs() < 1e-7 && (y0[1] - 1.0).abs() < 1e-7);
        assert!(d.endowment_residual < 1e-9);
        assert!((d.value + 0.625 + 0.375 - 2f64.ln()).abs() < 1e-8);

        let k = 3.0;
        let dk = dual_solve(&m, &e, k * 0.625, &[k * 0.375], Utility::Log).unwrap();
        let scaled = m.tree.expectation(&y0.iter().map(|v| Utility::Log.conjugate(k * v).unwrap()).collect::<Vec<_>>());
        assert!((dk.value - scaled).abs() < 1e-7);

        for r in [0.2, 1.1] {
            assert_eq!(dual_solve(&m, &e, 0.625, &[r], Utility::Log).unwrap_err(), DualityError::OutsideL);
        }
    }

    #[test]
    fn l_membership_classes() {
        let (m, e) = instance_a(0.25);
        assert_eq!(l_membership(&m, &e, 1.0, &[0.6]).unwrap(), LMembership::Interior);
        assert_eq!(l_membership(&m, &e, 1.0, &[2.0]).unwrap(), LMembership::Outside);
        assert_eq!(l_membership(&m, &e, -1.0, &[0.6]).unwrap(), LMembership::Outside);
        assert_eq!(l_membership(&m, &e, 2.0, &[1.0]).unwrap(), LMembership::Boundary);
    }

    #[test]
    fn primal_errors() {
        let (m, e) = instance_a(0.25);
        assert!(matches!(primal_solve(&m, &e, -1.0, &[1.0], Utility::Log), Err(DualityError::OutsideK { .. })));
        assert!(matches!(primal_solve(&m, &e, 0.0, &[0.0], Utility::Log), Err(DualityError::BoundaryK { .. })));
        let (mf, ef) = instance_a(1e-12);
        assert_eq!(primal_solve(&mf, &ef, 1.0, &[1.0], Utility::Log).unwrap_err(), DualityError::Replicable);
    }

    #[test]
    fn power_utility_relations() {
        let (m, e) = instance_a(0.1);
        for p in [0.5, -1.0] {
            let u = Utility::power(p).unwrap();
            let sol = primal_solve(&m, &e, 2.0, &[0.5], u).unwrap();
            let d = extract_dual_from_primal(&m, &e, &sol).unwrap();
            let res = duality_residuals(&m, &sol, &d);
            assert!(res.gap < 1e-7 && res.complementary < 1e-7, "{p}: {res:?}");
            let ds = dual_solve(&m, &e, d.y, &d.r, u).unwrap();
            assert!((ds.value - d.value).abs() < 1e-6, "{} vs {}", ds.value, d.value);
        }
    }

    #[test]
    fn conjugacy_on_instance_a() {
        let (m, e) = instance_a(0.25);
        let primal = vec![(1.0, vec![1.0]), (2.0, vec![0.5])];
        let dual: Vec<(f64, Vec<f64>)> = [0.4, 0.625, 1.0]
            .iter()
            .flat_map(|&y| [0.55, 0.6, 1.2].iter().map(move |&p| (y, vec![y * p])))
            .collect();
        let rep = conjugacy_check(&m, &e, Utility::Log, &primal, &dual).unwrap();
        assert_eq!(rep.weak_violations, 0, "{}", rep.max_weak_violation);
        assert!(rep.entries[0].gap <= 1e-6);
        assert!((rep.entries[0].extracted.0 - 0.625).abs() < 1e-6);
        assert!(rep.entries.iter().all(|e| e.transcription_slack.is_none()));
    }

    #[test]
    fn conjugacy_without_endowment() {
        let (m, _) = instance_a(0.25);
        let e = EndowmentSet::empty();
        let primal = vec![(1.0, vec![]), (3.0, vec![])];
        let dual: Vec<(f64, Vec<f64>)> = [0.2, 0.5, 1.0, 2.0].iter().map(|&y| (y, vec![])).collect();
        let rep = conjugacy_check(&m, &e, Utility::Log, &primal, &dual).unwrap();
        assert_eq!(rep.weak_violations, 0);
        // no trade at any x, so u(x) = ln x and y = 1/x
        for en in &rep.entries {
            assert!((en.u - en.x.ln()).abs() < 1e-8);
            assert!((en.extracted.0 - 1.0 / en.x).abs() < 1e-7);
            assert!(en.gap.abs() < 1e-7);
        }
    }

    #[test]
    fn subdifferential_on_instance_a() {
        let (m, e) = instance_a(0.25);
        let s = subdifferential(&m, &e, 1.0, &[1.0], Utility::Log, PROBE_STEP).unwrap();
        assert!(s.certified, "{:?}", s.probes);
        assert_eq!(s.probes.len(), 4);
        assert!((s.marginal_prices()[0] - 0.6).abs() < 1e-6);
        assert_eq!(s.in_l, LMembership::Interior);
    }

    #[test]
    fn scaled_cps_densities_are_deflators() {
        let (m, _) = instance_a(0.25);
        let cps = find_cps(&m, 0.25).unwrap();
        let d = Deflator::from_cps(&m.tree, &cps, 2.5);
        assert!(d.residuals(&m).max() <= 1e-9, "{:?}", d.residuals(&m));
        let (r0, r1) = d.martingale_residuals(&m.tree);
        assert!(r0 <= 1e-9 && r1 <= 1e-9);
    }

    #[test]
    fn random_deflators_and_portfolios() {
        let (m, _) = instance_a(0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let d = Deflator::random(&m, 1.0, &mut rng);
            assert!(d.residuals(&m).max() <= 1e-12, "{:?}", d.residuals(&m));
            let p = random_admissible_portfolio(&m, 1.0, &mut rng);
            assert!(p.liquidation_values(&m).iter().all(|&v| v >= -1e-12));
            assert!(d.wealth_drift(&m.tree, &p) <= 1e-12);
        }
    }

    #[test]
    fn bipolar_on_instance_a() {
        let (m, e) = instance_a(0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x, q) = (1.0, [1.0]);
        let p = primal_solve(&m, &e, x, &q, Utility::Log).unwrap();
        let mut samples = vec![p.wealth.clone(), vec![0.5, 0.5]];
        let g = member_claim(&m, &e, x, &q, &mut rng).unwrap();
        samples.push(g.clone());
        samples.push(perturb_to_non_member(&m, &e, x, &q, &g, 1e-3).unwrap());
        let rep = verify_bipolar(&m, &e, x, &q, &samples).unwrap();
        assert_eq!(rep.source, VertexSource::Enumerated);
        assert_eq!(rep.inconsistent, 0);
        // the optimal wealth sits on the boundary of C(x, q)
        assert!(rep.cases[0].vertex_margin.abs() < 1e-6 && rep.cases[0].member_by_vertices);
        assert!(rep.cases[1].member_by_vertices);
        assert!(rep.cases[2].member_by_vertices);
        assert!(!rep.cases[3].member_by_vertices && !rep.cases[3].member_by_hedge);
        assert!((rep.cases[3].vertex_margin + 1e-3).abs() < 1e-7);
    }

    #[test]
    fn uniqueness_across_starts() {
        let (m, e) = instance_a(0.1);
        let base = primal_solve(&m, &e, 1.5, &[0.3], Utility::Log).unwrap();
        for seed in 0..3 {
            let opts = ConcaveOptions {
                start: InitialPoint::Perturbed { seed },
                ..Default::default()
            };
            let other = primal_solve_with(&m, &e, 1.5, &[0.3], Utility::Log, &opts).unwrap();
            for (a, b) in other.wealth.iter().zip(&base.wealth) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn supermartingale_transcription_is_a_relaxation() {
        let (m, e) = instance_a(0.25);
        let opts = ConcaveOptions::default();
        let mart = dual_solve_with(&m, &e, 1.0, &[0.8], Utility::Log, DualTranscription::MartingaleClosure, &opts).unwrap();
        let sup = dual_solve_with(&m, &e, 1.0, &[0.8], Utility::Log, DualTranscription::Supermartingale, &opts).unwrap();
        assert!(sup.value <= mart.value + 1e-8);
        assert!(sup.deflator.is_valid(&m, 1e-8));
    }

    #[test]
    fn lambda_monotone_on_instance_a() {
        let (m, e) = instance_a(0.25);
        let sweep = lambda_sweep(&m, &e, 1.0, &[0.5], Utility::Log, &[0.01, 0.05, 0.1, 0.2, 0.3]).unwrap();
        assert!(sweep.worst_increase <= 1e-9, "{:?}", sweep.values);
    }
}

//! Interior-point solvers for linear programs and separable concave
//! programs over linear constraints.
//!
//! Multipliers follow one sign convention for both solvers: a row multiplier
//! is the sensitivity of the optimal objective to that row's right-hand
//! side, and at a KKT point
//!
//! ```text
//! ∇objective(x) = Σ_i m_i a_i + r
//! ```
//!
//! where `r` holds the per-variable bound multipliers (reduced costs). For a
//! maximization, `m_i ≥ 0` on `≤` rows and `m_i ≤ 0` on `≥` rows; signs flip
//! for a minimization. Equality multipliers are free.

mod concave;
mod kkt;
mod linalg;
mod lp;
mod stdform;

pub use concave::{solve_concave, solve_concave_with, ConcaveOptions, InitialPoint};
pub use kkt::check_kkt;
pub use lp::{solve_lp, solve_lp_with, LP_TOL};

use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;
/// Phase-1 optimum below this declares the constraints infeasible.
pub const INFEASIBLE_SLACK: f64 = -1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConvexError {
    #[error("malformed program: {0}")]
    Malformed(String),
    #[error("constraints are infeasible (phase-1 slack {slack:.3e})")]
    Infeasible { slack: f64 },
    #[error("feasible region has empty interior (phase-1 slack {slack:.3e})")]
    EmptyInterior { slack: f64 },
    #[error("phase-1 solve failed with status {0:?}")]
    Phase1(Status),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    Le,
    Eq,
    Ge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sense {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIter,
}

/// A sparse row `Σ coeffs · x  (rel)  rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub coeffs: Vec<(usize, f64)>,
    pub rel: Relation,
    pub rhs: f64,
}

impl Constraint {
    pub fn activity(&self, x: &[f64]) -> f64 {
        self.coeffs.iter().map(|&(j, a)| a * x[j]).sum()
    }

    /// Amount by which `x` violates the row (0 when satisfied).
    pub fn violation(&self, x: &[f64]) -> f64 {
        let ax = self.activity(x);
        match self.rel {
            Relation::Le => (ax - self.rhs).max(0.0),
            Relation::Ge => (self.rhs - ax).max(0.0),
            Relation::Eq => (ax - self.rhs).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    pub sense: Sense,
    pub objective: Vec<f64>,
    pub constraints: Vec<Constraint>,
    pub bounds: Vec<(f64, f64)>,
}

impl LinearProgram {
    /// `n` variables, zero objective, bounds `[0, ∞)`.
    pub fn new(n: usize, sense: Sense) -> Self {
        LinearProgram {
            sense,
            objective: vec![0.0; n],
            constraints: Vec::new(),
            bounds: vec![(0.0, f64::INFINITY); n],
        }
    }

    pub fn n_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn add_row(&mut self, coeffs: Vec<(usize, f64)>, rel: Relation, rhs: f64) -> usize {
        self.constraints.push(Constraint { coeffs, rel, rhs });
        self.constraints.len() - 1
    }

    pub fn set_bounds(&mut self, j: usize, lo: f64, hi: f64) {
        self.bounds[j] = (lo, hi);
    }

    pub fn set_free(&mut self, j: usize) {
        self.bounds[j] = (f64::NEG_INFINITY, f64::INFINITY);
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.objective.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    pub fn validate(&self) -> Result<(), ConvexError> {
        validate_rows(self.n_vars(), &self.constraints, &self.bounds)?;
        if self.objective.iter().any(|c| !c.is_finite()) {
            return Err(ConvexError::Malformed("non-finite objective coefficient".into()));
        }
        Ok(())
    }
}

fn validate_rows(n: usize, rows: &[Constraint], bounds: &[(f64, f64)]) -> Result<(), ConvexError> {
    if bounds.len() != n {
        return Err(ConvexError::Malformed(format!("{} bounds for {n} variables", bounds.len())));
    }
    for (i, row) in rows.iter().enumerate() {
        if !row.rhs.is_finite() {
            return Err(ConvexError::Malformed(format!("row {i} has a non-finite right-hand side")));
        }
        for &(j, a) in &row.coeffs {
            if j >= n {
                return Err(ConvexError::Malformed(format!("row {i} references variable {j} of {n}")));
            }
            if !a.is_finite() {
                return Err(ConvexError::Malformed(format!("row {i} has a non-finite coefficient")));
            }
        }
    }
    for (j, &(lo, hi)) in bounds.iter().enumerate() {
        if lo.is_nan() || hi.is_nan() || lo > hi || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
            return Err(ConvexError::Malformed(format!("invalid bounds [{lo}, {hi}] on variable {j}")));
        }
    }
    Ok(())
}

/// Scalar concave function applied to an affine form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TermKind {
    Log,
    /// `u^a / a` with `a < 1`, `a ≠ 0`.
    Power(f64),
    Linear,
}

impl TermKind {
    pub(crate) fn value(&self, u: f64) -> f64 {
        match *self {
            TermKind::Log => u.ln(),
            TermKind::Power(a) => u.powf(a) / a,
            TermKind::Linear => u,
        }
    }

    pub(crate) fn d1(&self, u: f64) -> f64 {
        match *self {
            TermKind::Log => 1.0 / u,
            TermKind::Power(a) => u.powf(a - 1.0),
            TermKind::Linear => 1.0,
        }
    }

    pub(crate) fn d2(&self, u: f64) -> f64 {
        match *self {
            TermKind::Log => -1.0 / (u * u),
            TermKind::Power(a) => (a - 1.0) * u.powf(a - 2.0),
            TermKind::Linear => 0.0,
        }
    }

    fn needs_domain(&self) -> bool {
        !matches!(self, TermKind::Linear)
    }
}

/// `weight · f(coeffs·x + offset)`. Log and power terms always keep their
/// argument strictly positive; `strict` adds the same requirement to a
/// linear term.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcaveTerm {
    pub weight: f64,
    pub kind: TermKind,
    pub coeffs: Vec<(usize, f64)>,
    pub offset: f64,
    pub strict: bool,
}

impl ConcaveTerm {
    pub fn new(weight: f64, kind: TermKind, coeffs: Vec<(usize, f64)>, offset: f64) -> Self {
        ConcaveTerm {
            weight,
            kind,
            coeffs,
            offset,
            strict: kind.needs_domain(),
        }
    }

    pub fn argument(&self, x: &[f64]) -> f64 {
        self.offset + self.coeffs.iter().map(|&(j, a)| a * x[j]).sum::<f64>()
    }

    pub fn is_strict(&self) -> bool {
        self.strict || self.kind.needs_domain()
    }
}

/// Maximize `constant + Σ terms` subject to linear rows and bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct SeparableConcaveProgram {
    pub n: usize,
    pub terms: Vec<ConcaveTerm>,
    pub constant: f64,
    pub constraints: Vec<Constraint>,
    pub bounds: Vec<(f64, f64)>,
}

impl SeparableConcaveProgram {
    /// `n` free variables and no terms.
    pub fn new(n: usize) -> Self {
        SeparableConcaveProgram {
            n,
            terms: Vec::new(),
            constant: 0.0,
            constraints: Vec::new(),
            bounds: vec![(f64::NEG_INFINITY, f64::INFINITY); n],
        }
    }

    pub fn add_term(&mut self, term: ConcaveTerm) {
        self.terms.push(term);
    }

    pub fn add_row(&mut self, coeffs: Vec<(usize, f64)>, rel: Relation, rhs: f64) -> usize {
        self.constraints.push(Constraint { coeffs, rel, rhs });
        self.constraints.len() - 1
    }

    pub fn set_bounds(&mut self, j: usize, lo: f64, hi: f64) {
        self.bounds[j] = (lo, hi);
    }

    /// Objective value, or `None` outside the strict domain.
    pub fn value(&self, x: &[f64]) -> Option<f64> {
        let mut total = self.constant;
        for t in &self.terms {
            let u = t.argument(x);
            if t.is_strict() && u <= 0.0 {
                return None;
            }
            total += t.weight * t.kind.value(u);
        }
        Some(total)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.n];
        for t in &self.terms {
            let d = t.weight * t.kind.d1(t.argument(x));
            for &(j, a) in &t.coeffs {
                g[j] += d * a;
            }
        }
        g
    }

    /// Smallest strict-domain argument (∞ when there are none).
    pub fn domain_margin(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.is_strict())
            .map(|t| t.argument(x))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn validate(&self) -> Result<(), ConvexError> {
        validate_rows(self.n, &self.constraints, &self.bounds)?;
        for (k, t) in self.terms.iter().enumerate() {
            if !(t.weight > 0.0 && t.weight.is_finite()) {
                return Err(ConvexError::Malformed(format!("term {k} has non-positive weight")));
            }
            if let TermKind::Power(a) = t.kind {
                if !(a < 1.0 && a != 0.0 && a.is_finite()) {
                    return Err(ConvexError::Malformed(format!("term {k} has power exponent {a}")));
                }
            }
            if t.coeffs.iter().any(|&(j, a)| j >= self.n || !a.is_finite()) || !t.offset.is_finite() {
                return Err(ConvexError::Malformed(format!("term {k} has a bad affine form")));
            }
        }
        Ok(())
    }

    /// A linear program viewed as a concave program (objective negated for
    /// minimization so that it is always maximized).
    pub fn from_lp(lp: &LinearProgram) -> Self {
        let sign = match lp.sense {
            Sense::Max => 1.0,
            Sense::Min => -1.0,
        };
        let coeffs = lp
            .objective
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(j, &c)| (j, sign * c))
            .collect();
        SeparableConcaveProgram {
            n: lp.n_vars(),
            terms: vec![ConcaveTerm {
                weight: 1.0,
                kind: TermKind::Linear,
                coeffs,
                offset: 0.0,
                strict: false,
            }],
            constant: 0.0,
            constraints: lp.constraints.clone(),
            bounds: lp.bounds.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub primal_feas: f64,
    pub dual_feas: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_feas)
            .max(self.dual_feas)
            .max(self.complementarity)
    }

    pub fn within(&self, tol: f64) -> bool {
        self.max() <= tol
    }
}

/// Row and bound multipliers in the convention described at module level.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Multipliers {
    pub rows: Vec<f64>,
    pub bounds: Vec<f64>,
}

/// Farkas-type evidence attached to infeasible or unbounded outcomes.
#[derive(Debug, Clone, PartialEq)]
pub enum Certificate {
    /// Row and bound multipliers `(m, r)` with `Σ m_i a_i + r = 0` whose
    /// dual objective `Σ m_i b_i + Σ r_j·bound_j` is negative.
    Infeasible { multipliers: Multipliers, dual_value: f64 },
    /// A recession direction that keeps every row satisfied and improves
    /// the objective by `gain` per unit step.
    Unbounded { ray: Vec<f64>, gain: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub status: Status,
    pub x: Vec<f64>,
    pub multipliers: Multipliers,
    pub objective: f64,
    pub dual_objective: f64,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub certificate: Option<Certificate>,
    /// Iterates on which the primal-dual gap identity reported a negative
    /// gap beyond rounding (must be zero).
    pub weak_duality_violations: usize,
    /// Final barrier parameter `sᵀz / m` (concave solver).
    pub final_mu: f64,
    /// Phase-1 minimum slack of the starting point (concave solver).
    pub phase1_slack: Option<f64>,
}

impl SolveReport {
    pub fn is_optimal(&self) -> bool {
        self.status == Status::Optimal
    }

    pub fn row_dual(&self, i: usize) -> f64 {
        self.multipliers.rows[i]
    }
}

#[cfg(test)]
mod tests;

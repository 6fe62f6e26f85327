use super::linalg::norm_inf;
use super::{Constraint, KktResiduals, LinearProgram, Multipliers, Relation, SeparableConcaveProgram, Sense};

/// KKT residuals of `(x, multipliers)` for the maximization of `program`.
///
/// Stationarity is scaled by `max(1, ‖∇F‖∞)`; the other three are absolute.
pub fn check_kkt(program: &SeparableConcaveProgram, x: &[f64], mult: &Multipliers) -> KktResiduals {
    let mut res = residuals(&program.gradient(x), &program.constraints, &program.bounds, x, mult);
    let margin = program.domain_margin(x);
    if margin <= 0.0 {
        res.primal_feas = res.primal_feas.max(-margin).max(f64::MIN_POSITIVE);
    }
    res
}

pub(crate) fn lp_kkt(lp: &LinearProgram, x: &[f64], mult: &Multipliers) -> KktResiduals {
    let grad = lp.objective.clone();
    let mut r = residuals(&grad, &lp.constraints, &lp.bounds, x, mult);
    if lp.sense == Sense::Min {
        // the sign rules flip; re-evaluate on the negated problem
        let neg = Multipliers {
            rows: mult.rows.iter().map(|v| -v).collect(),
            bounds: mult.bounds.iter().map(|v| -v).collect(),
        };
        let g: Vec<f64> = grad.iter().map(|v| -v).collect();
        r = residuals(&g, &lp.constraints, &lp.bounds, x, &neg);
    }
    r
}

fn residuals(
    grad: &[f64],
    rows: &[Constraint],
    bounds: &[(f64, f64)],
    x: &[f64],
    mult: &Multipliers,
) -> KktResiduals {
    let n = grad.len();
    let mut stat = grad.to_vec();
    let mut out = KktResiduals::default();
    for (row, &m) in rows.iter().zip(&mult.rows) {
        for &(j, a) in &row.coeffs {
            stat[j] -= m * a;
        }
        out.primal_feas = out.primal_feas.max(row.violation(x));
        let slack = row.rhs - row.activity(x);
        match row.rel {
            Relation::Le => {
                out.dual_feas = out.dual_feas.max(-m);
                out.complementarity = out.complementarity.max((m * slack).abs());
            }
            Relation::Ge => {
                out.dual_feas = out.dual_feas.max(m);
                out.complementarity = out.complementarity.max((m * slack).abs());
            }
            Relation::Eq => {}
        }
    }
    for j in 0..n {
        let r = mult.bounds.get(j).copied().unwrap_or(0.0);
        stat[j] -= r;
        let (lo, hi) = bounds[j];
        out.primal_feas = out.primal_feas.max(lo - x[j]).max(x[j] - hi);
        if lo == hi {
            continue;
        }
        if r > 0.0 {
            if hi.is_finite() {
                out.complementarity = out.complementarity.max(r * (hi - x[j]).abs());
            } else {
                out.dual_feas = out.dual_feas.max(r);
            }
        } else if r < 0.0 {
            if lo.is_finite() {
                out.complementarity = out.complementarity.max(-r * (x[j] - lo).abs());
            } else {
                out.dual_feas = out.dual_feas.max(-r);
            }
        }
    }
    out.stationarity = norm_inf(&stat) / norm_inf(grad).max(1.0);
    out
}

//! Conversion between user rows/bounds and the internal cone form
//! `A x = b`, `G x + s = h`, `s ≥ 0`.

use super::linalg::SparseRows;
use super::{Constraint, Multipliers, Relation};

#[derive(Debug, Clone, Copy)]
pub(crate) enum RowSlot {
    Eq(usize),
    /// Index into `G`; sign is `+1` for `≤` rows and `−1` for `≥` rows.
    Ineq(usize, f64),
}

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct BoundSlot {
    pub lo: Option<usize>,
    pub hi: Option<usize>,
    pub fixed: Option<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct StdForm {
    pub n: usize,
    pub a: SparseRows,
    pub b: Vec<f64>,
    pub g: SparseRows,
    pub h: Vec<f64>,
    pub rows: Vec<RowSlot>,
    pub bounds: Vec<BoundSlot>,
}

impl StdForm {
    pub fn build(n: usize, constraints: &[Constraint], bounds: &[(f64, f64)]) -> Self {
        let mut sf = StdForm {
            n,
            a: SparseRows::new(n),
            b: Vec::new(),
            g: SparseRows::new(n),
            h: Vec::new(),
            rows: Vec::with_capacity(constraints.len()),
            bounds: vec![BoundSlot::default(); n],
        };
        for c in constraints {
            let coeffs = merge(&c.coeffs);
            let slot = match c.rel {
                Relation::Eq => {
                    sf.b.push(c.rhs);
                    RowSlot::Eq(sf.a.push(coeffs))
                }
                Relation::Le => {
                    sf.h.push(c.rhs);
                    RowSlot::Ineq(sf.g.push(coeffs), 1.0)
                }
                Relation::Ge => {
                    sf.h.push(-c.rhs);
                    RowSlot::Ineq(sf.g.push(coeffs.into_iter().map(|(j, a)| (j, -a)).collect()), -1.0)
                }
            };
            sf.rows.push(slot);
        }
        for (j, &(lo, hi)) in bounds.iter().enumerate() {
            if lo == hi {
                sf.b.push(lo);
                sf.bounds[j].fixed = Some(sf.a.push(vec![(j, 1.0)]));
                continue;
            }
            if hi.is_finite() {
                sf.h.push(hi);
                sf.bounds[j].hi = Some(sf.g.push(vec![(j, 1.0)]));
            }
            if lo.is_finite() {
                sf.h.push(-lo);
                sf.bounds[j].lo = Some(sf.g.push(vec![(j, -1.0)]));
            }
        }
        sf
    }

    /// Map internal duals to user multipliers; `sign` is `+1` when the
    /// internal objective is the negated user objective (maximization).
    pub fn multipliers(&self, y: &[f64], z: &[f64], sign: f64) -> Multipliers {
        let rows = self
            .rows
            .iter()
            .map(|slot| match *slot {
                RowSlot::Eq(i) => sign * y[i],
                RowSlot::Ineq(i, s) => sign * s * z[i],
            })
            .collect();
        let bounds = self
            .bounds
            .iter()
            .map(|bs| {
                let mut r = 0.0;
                if let Some(i) = bs.fixed {
                    r += y[i];
                }
                if let Some(i) = bs.hi {
                    r += z[i];
                }
                if let Some(i) = bs.lo {
                    r -= z[i];
                }
                sign * r
            })
            .collect();
        Multipliers { rows, bounds }
    }
}

fn merge(coeffs: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut v = coeffs.to_vec();
    v.sort_by_key(|&(j, _)| j);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(v.len());
    for (j, a) in v {
        match out.last_mut() {
            Some(last) if last.0 == j => last.1 += a,
            _ => out.push((j, a)),
        }
    }
    out.retain(|&(_, a)| a != 0.0);
    out
}

//! Consistent price systems: pairs `(Q, S̃)` with `Q ~ P` and `S̃` a
//! `Q`-martingale inside the bid-ask spread.
//!
//! The polytope is written in unconditional masses `m(ν) = Q(ν)` and
//! values `w(ν) = Q(ν)·S̃(ν)`, which keeps every row linear:
//!
//! ```text
//! m(root) = 1,   m(ν) = Σ_c m(c),   w(ν) = Σ_c w(c),
//! (1−λ)S(ν)·m(ν) ≤ w(ν) ≤ S(ν)·m(ν),   m ≥ 0.
//! ```

use thiserror::Error;

use crate::convex::{solve_lp, ConvexError, LinearProgram, Relation, Sense, SolveReport, Status};
use crate::market::{EndowmentSet, MarketModel, ScenarioTree};

/// Martingale residual accepted on returned price systems.
pub const MARTINGALE_TOL: f64 = 1e-9;
/// Smallest admissible max-min density ratio for an equivalent witness.
pub const POSITIVITY_FLOOR: f64 = 1e-9;
/// Interval width at or below which a claim counts as replicable.
pub const REPLICABLE_WIDTH: f64 = 1e-9;
/// Weight of the strictly positive system mixed into boundary optimizers.
pub const MIX_WEIGHT: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CpsError {
    #[error("no consistent price system at spread level {lambda_prime}")]
    Infeasible { lambda_prime: f64 },
    #[error("only non-equivalent price systems exist (max-min density ratio {ratio:.3e})")]
    NotEquivalent { ratio: f64 },
    #[error("spread level {0} must lie in (0, λ]")]
    BadLevel(f64),
    #[error("solver returned {0:?}")]
    Solver(Status),
    #[error(transparent)]
    Convex(#[from] ConvexError),
}

/// `q_cond[ν]` is `Q(ν | parent)` (1 at the root); `s_tilde[ν]` is `S̃(ν)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistentPriceSystem {
    pub q_cond: Vec<f64>,
    pub s_tilde: Vec<f64>,
}

impl ConsistentPriceSystem {
    /// Builds a system from masses and values; masses must be positive.
    pub fn from_masses(tree: &ScenarioTree, mass: &[f64], value: &[f64]) -> Self {
        let q_cond = (0..tree.len())
            .map(|v| match tree.parent(v) {
                Some(p) => mass[v] / mass[p],
                None => 1.0,
            })
            .collect();
        let s_tilde = mass.iter().zip(value).map(|(m, w)| w / m).collect();
        ConsistentPriceSystem { q_cond, s_tilde }
    }

    /// Unconditional `Q(ν)`.
    pub fn measure(&self, tree: &ScenarioTree) -> Vec<f64> {
        let mut q = vec![1.0; tree.len()];
        for v in 1..tree.len() {
            q[v] = q[tree.parent(v).expect("non-root")] * self.q_cond[v];
        }
        q
    }

    /// `E^Q[g]` of a terminal payoff.
    pub fn expectation(&self, tree: &ScenarioTree, terminal: &[f64]) -> f64 {
        let q = self.measure(tree);
        tree.terminals().iter().zip(terminal).map(|(&t, g)| q[t] * g).sum()
    }

    /// `Q`-martingale closure of a terminal payoff, per node.
    pub fn conditional(&self, tree: &ScenarioTree, terminal: &[f64]) -> Vec<f64> {
        tree.conditional_expectation_with(terminal, |c| self.q_cond[c])
    }

    /// Largest violation of positivity, sibling sums, spread membership
    /// (scaled by `S`) and the martingale property.
    pub fn violation(&self, model: &MarketModel, lambda: f64) -> f64 {
        let tree = &model.tree;
        let mut worst = 0.0f64;
        for v in 0..tree.len() {
            if self.q_cond[v] <= 0.0 {
                worst = worst.max(1.0);
            }
            let s = model.ask(v);
            worst = worst.max((self.s_tilde[v] - s) / s);
            worst = worst.max(((1.0 - lambda) * s - self.s_tilde[v]) / s);
        }
        for v in tree.non_terminals() {
            let sum: f64 = tree.children(v).iter().map(|&c| self.q_cond[c]).sum();
            worst = worst.max((sum - 1.0).abs());
        }
        worst.max(tree.martingale_residual_with(&self.s_tilde, |c| self.q_cond[c]))
    }

    pub fn is_valid(&self, model: &MarketModel) -> bool {
        self.violation(model, model.lambda()) <= MARTINGALE_TOL
    }

    /// Removes LP rounding: sibling probabilities are renormalized, `S̃`
    /// is clamped into the spread and rebuilt bottom-up as a martingale
    /// wherever the conditional mean stays inside the spread.
    pub fn polished(mut self, model: &MarketModel, lambda_prime: f64) -> Self {
        let tree = &model.tree;
        for v in tree.non_terminals() {
            let sum: f64 = tree.children(v).iter().map(|&c| self.q_cond[c]).sum();
            for &c in tree.children(v) {
                self.q_cond[c] /= sum;
            }
        }
        let bounds = |v: usize| ((1.0 - lambda_prime) * model.ask(v), model.ask(v));
        for v in (0..tree.len()).rev() {
            let (lo, hi) = bounds(v);
            if tree.is_terminal(v) {
                self.s_tilde[v] = self.s_tilde[v].clamp(lo, hi);
                continue;
            }
            let mean = |q: &[f64], s: &[f64]| tree.children(v).iter().map(|&c| q[c] * s[c]).sum::<f64>();
            let m = mean(&self.q_cond, &self.s_tilde);
            let target = m.clamp(lo, hi);
            if target != m {
                self.shift_mass(tree, v, target - m);
            }
            self.s_tilde[v] = mean(&self.q_cond, &self.s_tilde).clamp(lo, hi);
        }
        self
    }

    // Moves conditional mass between the children of `v` with the largest
    // and smallest `S̃` so the conditional mean changes by `delta`, keeping
    // every probability at least half its old value.
    fn shift_mass(&mut self, tree: &ScenarioTree, v: usize, delta: f64) {
        let kids = tree.children(v);
        let by = |a: &&usize, b: &&usize| self.s_tilde[**a].total_cmp(&self.s_tilde[**b]);
        let (Some(&top), Some(&bottom)) = (kids.iter().max_by(by), kids.iter().min_by(by)) else { return };
        let width = self.s_tilde[top] - self.s_tilde[bottom];
        if width <= 0.0 {
            return;
        }
        // mass ε moved from `bottom` to `top` raises the mean by ε·width
        let eps = delta / width;
        let eps = if eps >= 0.0 {
            eps.min(0.5 * self.q_cond[bottom])
        } else {
            eps.max(-0.5 * self.q_cond[top])
        };
        self.q_cond[top] += eps;
        self.q_cond[bottom] -= eps;
    }
}

/// `z0 = dQ/dP` conditional densities and `z1 = S̃·z0`, per node.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPair {
    pub z0: Vec<f64>,
    pub z1: Vec<f64>,
}

pub fn cps_to_density(tree: &ScenarioTree, cps: &ConsistentPriceSystem) -> DensityPair {
    let q = cps.measure(tree);
    let z0: Vec<f64> = (0..tree.len()).map(|v| q[v] / tree.prob(v)).collect();
    let z1 = z0.iter().zip(&cps.s_tilde).map(|(z, s)| z * s).collect();
    DensityPair { z0, z1 }
}

/// A point of the closed polytope in mass/value coordinates. Masses may
/// vanish, in which case `S̃` is undefined below that node.
#[derive(Debug, Clone, PartialEq)]
pub struct CpsPoint {
    pub mass: Vec<f64>,
    pub value: Vec<f64>,
}

impl CpsPoint {
    pub fn min_density(&self, tree: &ScenarioTree) -> f64 {
        tree.terminals()
            .iter()
            .map(|&t| self.mass[t] / tree.prob(t))
            .fold(f64::INFINITY, f64::min)
    }

    /// True when some terminal mass is (numerically) zero.
    pub fn is_boundary(&self, tree: &ScenarioTree) -> bool {
        self.min_density(tree) <= POSITIVITY_FLOOR
    }

    pub fn expectation(&self, tree: &ScenarioTree, terminal: &[f64]) -> f64 {
        tree.terminals().iter().zip(terminal).map(|(&t, g)| self.mass[t] * g).sum()
    }

    pub fn mix(&self, other: &CpsPoint, beta: f64) -> CpsPoint {
        let blend = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(a, b)| (1.0 - beta) * a + beta * b).collect();
        CpsPoint {
            mass: blend(&self.mass, &other.mass),
            value: blend(&self.value, &other.value),
        }
    }

    pub fn to_cps(&self, tree: &ScenarioTree) -> ConsistentPriceSystem {
        ConsistentPriceSystem::from_masses(tree, &self.mass, &self.value)
    }
}

/// The CPS polytope as a linear program over `[m; w]`, before an
/// objective is attached.
#[derive(Debug, Clone)]
pub struct CpsPolytope {
    pub lp: LinearProgram,
    n_nodes: usize,
}

impl CpsPolytope {
    pub fn new(model: &MarketModel, lambda_prime: f64) -> Self {
        let tree = &model.tree;
        let n = tree.len();
        let mut lp = LinearProgram::new(2 * n, Sense::Max);
        for v in 0..n {
            lp.set_free(n + v);
        }
        lp.add_row(vec![(0, 1.0)], Relation::Eq, 1.0);
        for v in tree.non_terminals() {
            let mut mrow = vec![(v, 1.0)];
            let mut wrow = vec![(n + v, 1.0)];
            for &c in tree.children(v) {
                mrow.push((c, -1.0));
                wrow.push((n + c, -1.0));
            }
            lp.add_row(mrow, Relation::Eq, 0.0);
            lp.add_row(wrow, Relation::Eq, 0.0);
        }
        for v in 0..n {
            let s = model.ask(v);
            lp.add_row(vec![(n + v, 1.0), (v, -s)], Relation::Le, 0.0);
            lp.add_row(vec![(n + v, 1.0), (v, -(1.0 - lambda_prime) * s)], Relation::Ge, 0.0);
        }
        CpsPolytope { lp, n_nodes: n }
    }

    pub fn mass_var(&self, v: usize) -> usize {
        v
    }

    pub fn value_var(&self, v: usize) -> usize {
        self.n_nodes + v
    }

    pub fn point(&self, x: &[f64]) -> CpsPoint {
        let n = self.n_nodes;
        CpsPoint {
            mass: x[..n].to_vec(),
            value: x[n..2 * n].to_vec(),
        }
    }

    /// The polytope with objective `Σ_ω g(ω)·m(ω)`.
    pub fn pricing_lp(&self, tree: &ScenarioTree, claim: &[f64], sense: Sense) -> LinearProgram {
        let mut lp = self.lp.clone();
        lp.sense = sense;
        for (&t, &g) in tree.terminals().iter().zip(claim) {
            lp.objective[self.mass_var(t)] = g;
        }
        lp
    }
}

fn check_level(model: &MarketModel, lambda_prime: f64) -> Result<(), CpsError> {
    if !(lambda_prime > 0.0 && lambda_prime <= model.lambda()) {
        return Err(CpsError::BadLevel(lambda_prime));
    }
    Ok(())
}

fn optimal(rep: SolveReport, lambda_prime: f64) -> Result<SolveReport, CpsError> {
    match rep.status {
        Status::Optimal => Ok(rep),
        Status::Infeasible => Err(CpsError::Infeasible { lambda_prime }),
        s => Err(CpsError::Solver(s)),
    }
}

/// Maximizes `t` subject to `Q(ω) ≥ t·P(ω)` for every terminal `ω`, and
/// then, with `Q` held fixed, pushes `S̃` towards the ask.
pub fn find_cps(model: &MarketModel, lambda_prime: f64) -> Result<ConsistentPriceSystem, CpsError> {
    Ok(find_cps_point(model, lambda_prime)?.to_cps(&model.tree).polished(model, lambda_prime))
}

pub(crate) fn find_cps_point(model: &MarketModel, lambda_prime: f64) -> Result<CpsPoint, CpsError> {
    check_level(model, lambda_prime)?;
    let tree = &model.tree;
    let poly = CpsPolytope::new(model, lambda_prime);
    let mut lp = poly.lp.clone();
    let t = lp.n_vars();
    lp.objective.push(1.0);
    lp.bounds.push((f64::NEG_INFINITY, 1.0));
    for &w in tree.terminals() {
        lp.add_row(vec![(poly.mass_var(w), 1.0), (t, -tree.prob(w))], Relation::Ge, 0.0);
    }
    let rep = optimal(solve_lp(&lp)?, lambda_prime)?;
    let ratio = rep.x[t];
    if ratio <= POSITIVITY_FLOOR {
        return Err(CpsError::NotEquivalent { ratio });
    }
    let mass = poly.point(&rep.x).mass;

    let n = tree.len();
    let mut second = LinearProgram::new(n, Sense::Max);
    for v in 0..n {
        let s = model.ask(v);
        second.set_bounds(v, (1.0 - lambda_prime) * s * mass[v], s * mass[v]);
        second.objective[v] = 1.0 / s;
    }
    for v in tree.non_terminals() {
        let mut row = vec![(v, 1.0)];
        row.extend(tree.children(v).iter().map(|&c| (c, -1.0)));
        second.add_row(row, Relation::Eq, 0.0);
    }
    let rep2 = optimal(solve_lp(&second)?, lambda_prime)?;
    Ok(CpsPoint { mass, value: rep2.x })
}

/// Result of optimizing `E^Q[g]` over the closed polytope.
#[derive(Debug, Clone, PartialEq)]
pub struct Extremal {
    pub value: f64,
    /// The optimizer as returned by the LP (closure of the CPS set).
    pub point: CpsPoint,
    /// True when the optimizer has a vanishing terminal mass.
    pub boundary: bool,
    /// The optimizer mixed with a strictly positive system at weight
    /// `MIX_WEIGHT`; always an equivalent CPS.
    pub witness: ConsistentPriceSystem,
    pub report: SolveReport,
}

pub fn extremal_expectation(model: &MarketModel, claim: &[f64], sense: Sense) -> Result<Extremal, CpsError> {
    extremal_on(model, &CpsPolytope::new(model, model.lambda()), claim, sense)
}

pub fn extremal_on(model: &MarketModel, poly: &CpsPolytope, claim: &[f64], sense: Sense) -> Result<Extremal, CpsError> {
    let tree = &model.tree;
    assert_eq!(claim.len(), tree.terminals().len(), "claim must cover every terminal node");
    let lp = poly.pricing_lp(tree, claim, sense);
    let rep = optimal(solve_lp(&lp)?, model.lambda())?;
    let point = poly.point(&rep.x);
    let boundary = point.is_boundary(tree);
    let witness = if boundary {
        let inner = find_cps_point(model, model.lambda())?;
        point.mix(&inner, MIX_WEIGHT).to_cps(tree).polished(model, model.lambda())
    } else {
        point.to_cps(tree).polished(model, model.lambda())
    };
    Ok(Extremal {
        value: rep.objective,
        point,
        boundary,
        witness,
        report: rep,
    })
}

/// `[min_Q E^Q[q·E], max_Q E^Q[q·E]]`.
pub fn price_interval(model: &MarketModel, endowments: &EndowmentSet, q: &[f64]) -> Result<(f64, f64), CpsError> {
    let claim = endowments.combination(q, model.n_terminals());
    claim_interval(model, &claim)
}

pub fn claim_interval(model: &MarketModel, claim: &[f64]) -> Result<(f64, f64), CpsError> {
    let lo = extremal_expectation(model, claim, Sense::Min)?.value;
    let hi = extremal_expectation(model, claim, Sense::Max)?.value;
    Ok((lo, hi))
}

#[derive(Debug, Clone, PartialEq)]
pub enum PriceQuery {
    /// An equivalent CPS pricing the claim at `p`.
    Interior(ConsistentPriceSystem),
    /// `p` is an interval endpoint: only closure points attain it.
    Boundary(CpsPoint),
    Outside,
}

pub fn cps_with_price(
    model: &MarketModel,
    endowments: &EndowmentSet,
    q: &[f64],
    p: f64,
) -> Result<PriceQuery, CpsError> {
    let tree = &model.tree;
    let claim = endowments.combination(q, model.n_terminals());
    let (lo, hi) = claim_interval(model, &claim)?;
    if p < lo - REPLICABLE_WIDTH || p > hi + REPLICABLE_WIDTH {
        return Ok(PriceQuery::Outside);
    }
    let poly = CpsPolytope::new(model, model.lambda());
    let mut lp = poly.lp.clone();
    let row: Vec<(usize, f64)> = tree.terminals().iter().zip(&claim).map(|(&t, &g)| (poly.mass_var(t), g)).collect();
    lp.add_row(row, Relation::Eq, p);
    let t = lp.n_vars();
    lp.objective.push(1.0);
    lp.bounds.push((f64::NEG_INFINITY, 1.0));
    for &w in tree.terminals() {
        lp.add_row(vec![(poly.mass_var(w), 1.0), (t, -tree.prob(w))], Relation::Ge, 0.0);
    }
    let rep = solve_lp(&lp)?;
    match rep.status {
        Status::Optimal if rep.x[t] > POSITIVITY_FLOOR && (p - lo).abs() > REPLICABLE_WIDTH && (hi - p).abs() > REPLICABLE_WIDTH => {
            Ok(PriceQuery::Interior(poly.point(&rep.x).to_cps(tree).polished(model, model.lambda())))
        }
        Status::Optimal => Ok(PriceQuery::Boundary(poly.point(&rep.x))),
        Status::Infeasible => Ok(PriceQuery::Outside),
        s => Err(CpsError::Solver(s)),
    }
}

pub fn check_replicable(model: &MarketModel, endowments: &EndowmentSet, q: &[f64]) -> Result<bool, CpsError> {
    let (lo, hi) = price_interval(model, endowments, q)?;
    Ok(hi - lo <= REPLICABLE_WIDTH)
}

/// A finite set of polytope points containing every extreme point, built
/// bottom-up: a subtree's set at `ν` is the convex hull of its children's
/// embedded sets cut by the spread slab at `ν`, and the cut adds at most the
/// crossings of segments between hull points. Returns `None` once the set
/// would exceed `cap` points.
pub fn extreme_point_superset(model: &MarketModel, cap: usize) -> Option<Vec<CpsPoint>> {
    let tree = &model.tree;
    let n = tree.len();
    let lambda = model.lambda();
    // sparse points: (node, mass, value) triples for the subtree
    type Pt = Vec<(usize, f64, f64)>;
    let mut sets: Vec<Vec<Pt>> = vec![Vec::new(); n];
    for v in (0..n).rev() {
        let s = model.ask(v);
        let (lo, hi) = ((1.0 - lambda) * s, s);
        if tree.is_terminal(v) {
            sets[v] = vec![vec![(v, 1.0, lo)], vec![(v, 1.0, hi)]];
            continue;
        }
        let mut hull: Vec<Pt> = Vec::new();
        for &c in tree.children(v) {
            hull.extend(std::mem::take(&mut sets[c]));
        }
        // value at v of a hull point equals the value at its child root
        let root_value = |p: &Pt| p[0].2;
        let mut out: Vec<Pt> = Vec::new();
        for p in &hull {
            let w = root_value(p);
            if w >= lo - 1e-12 && w <= hi + 1e-12 {
                out.push(p.clone());
            }
        }
        for i in 0..hull.len() {
            for j in i + 1..hull.len() {
                let (wi, wj) = (root_value(&hull[i]), root_value(&hull[j]));
                for level in [lo, hi] {
                    if (wi - level) * (wj - level) < 0.0 {
                        let t = (level - wi) / (wj - wi);
                        let mut p: Pt = hull[i].iter().map(|&(k, m, w)| (k, (1.0 - t) * m, (1.0 - t) * w)).collect();
                        p.extend(hull[j].iter().map(|&(k, m, w)| (k, t * m, t * w)));
                        out.push(p);
                    }
                }
                if out.len() > cap {
                    return None;
                }
            }
        }
        for p in out.iter_mut() {
            let w = child_root_sum(tree, v, p);
            p.insert(0, (v, 1.0, w));
        }
        sets[v] = out;
    }
    let points = sets[0]
        .iter()
        .map(|p| {
            let mut mass = vec![0.0; n];
            let mut value = vec![0.0; n];
            for &(k, m, w) in p {
                mass[k] += m;
                value[k] += w;
            }
            CpsPoint { mass, value }
        })
        .collect();
    Some(points)
}

fn child_root_sum(tree: &ScenarioTree, v: usize, p: &[(usize, f64, f64)]) -> f64 {
    p.iter().filter(|e| tree.parent(e.0) == Some(v)).map(|e| e.2).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::ScenarioTree;

    fn instance_a(lambda: f64) -> (MarketModel, EndowmentSet) {
        let tree = ScenarioTree::new(&[(None, 1.0), (Some(0), 0.5), (Some(0), 0.5)]).unwrap();
        let model = MarketModel::new(tree, vec![4.0, 8.0, 2.0], lambda).unwrap();
        let e = EndowmentSet::new(vec![vec![3.0, 0.0]], 2).unwrap();
        (model, e)
    }

    // Instance A Q(up) range by enumerating the extreme (S̃₀, S̃_u, S̃_d)
    // combinations of the spread box: Q(up) = (S̃₀ − S̃_d)/(S̃_u − S̃_d).
    fn q_up_range_by_enumeration(lambda: f64) -> (f64, f64) {
        let box_ = |s: f64| [(1.0 - lambda) * s, s];
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s0 in box_(4.0) {
            for su in box_(8.0) {
                for sd in box_(2.0) {
                    let q = (s0 - sd) / (su - sd);
                    if (0.0..=1.0).contains(&q) {
                        lo = lo.min(q);
                        hi = hi.max(q);
                    }
                }
            }
        }
        (lo, hi)
    }

    #[test]
    fn find_cps_on_instance_a() {
        let (m, _) = instance_a(0.25);
        let cps = find_cps(&m, 0.25).unwrap();
        assert!(cps.is_valid(&m), "{cps:?}");
        assert!(cps.q_cond.iter().all(|&q| q > 0.0));
    }

    #[test]
    fn find_cps_infeasible_single_path() {
        let tree = ScenarioTree::new(&[(None, 1.0), (Some(0), 1.0)]).unwrap();
        let m = MarketModel::new(tree, vec![1.0, 5.0], 0.25).unwrap();
        assert!(matches!(find_cps(&m, 0.25), Err(CpsError::Infeasible { .. })));
    }

    #[test]
    fn find_cps_constant_price() {
        let tree = ScenarioTree::new(&[(None, 1.0), (Some(0), 0.3), (Some(0), 0.7)]).unwrap();
        let m = MarketModel::new(tree.clone(), vec![2.0; 3], 0.1).unwrap();
        let cps = find_cps(&m, 0.1).unwrap();
        assert!(cps.is_valid(&m));
        assert!((cps.q_cond[1] - 0.3).abs() < 1e-8 && (cps.q_cond[2] - 0.7).abs() < 1e-8);
        for s in &cps.s_tilde {
            assert!((s - 2.0).abs() < 1e-8, "{cps:?}");
        }
    }

    #[test]
    fn find_cps_tighter_level() {
        let (m, _) = instance_a(0.25);
        let cps = find_cps(&m, 0.01).unwrap();
        assert!(cps.violation(&m, 0.01) <= 1e-9);
        assert!(matches!(find_cps(&m, 0.3), Err(CpsError::BadLevel(_))));
    }

    #[test]
    fn density_examples() {
        let (m, _) = instance_a(0.25);
        let cps = ConsistentPriceSystem {
            q_cond: vec![1.0, 1.0 / 3.0, 2.0 / 3.0],
            s_tilde: vec![4.0, 8.0, 2.0],
        };
        assert!(cps.is_valid(&m));
        let d = cps_to_density(&m.tree, &cps);
        assert!((d.z0[1] - 2.0 / 3.0).abs() < 1e-15 && (d.z0[2] - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.z0[0], 1.0);
        assert_eq!(d.z1[0], 4.0);
        let p = ConsistentPriceSystem {
            q_cond: vec![1.0, 0.5, 0.5],
            s_tilde: vec![3.5, 6.5, 1.8],
        };
        let dp = cps_to_density(&m.tree, &p);
        assert_eq!(dp.z0, vec![1.0; 3]);
        assert_eq!(dp.z1, p.s_tilde);
    }

    #[test]
    fn instance_a_extremal_prices() {
        let (m, _) = instance_a(0.25);
        let (qlo, qhi) = q_up_range_by_enumeration(0.25);
        assert!((qlo - 1.0 / 6.0).abs() < 1e-15 && (qhi - 5.0 / 9.0).abs() < 1e-15);
        let hi = extremal_expectation(&m, &[3.0, 0.0], Sense::Max).unwrap();
        assert!((hi.value - 3.0 * qhi).abs() < 1e-9, "{}", hi.value);
        assert!((hi.witness.q_cond[1] - qhi).abs() < 1e-6);
        assert!(hi.witness.is_valid(&m));
        let lo = extremal_expectation(&m, &[3.0, 0.0], Sense::Min).unwrap();
        assert!((lo.value - 3.0 * qlo).abs() < 1e-9);
        assert!((lo.witness.q_cond[1] - qlo).abs() < 1e-6);
        let c = extremal_expectation(&m, &[2.5, 2.5], Sense::Max).unwrap();
        assert!((c.value - 2.5).abs() < 1e-9);
    }

    #[test]
    fn intervals_and_queries() {
        let (m, e) = instance_a(0.25);
        let (lo, hi) = price_interval(&m, &e, &[1.0]).unwrap();
        assert!((lo - 0.5).abs() < 1e-9 && (hi - 5.0 / 3.0).abs() < 1e-9);
        let (lo0, hi0) = price_interval(&m, &e, &[0.0]).unwrap();
        assert!(lo0.abs() < 1e-9 && hi0.abs() < 1e-9);
        let (lon, hin) = price_interval(&m, &e, &[-1.0]).unwrap();
        assert!((lon + 5.0 / 3.0).abs() < 1e-9 && (hin + 0.5).abs() < 1e-9);

        match cps_with_price(&m, &e, &[1.0], 0.6).unwrap() {
            PriceQuery::Interior(cps) => {
                assert!(cps.is_valid(&m));
                assert!((cps.q_cond[1] - 0.2).abs() < 1e-8);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(cps_with_price(&m, &e, &[1.0], 10.0).unwrap(), PriceQuery::Outside);
        assert!(matches!(cps_with_price(&m, &e, &[1.0], lo).unwrap(), PriceQuery::Boundary(_)));
    }

    #[test]
    fn replicability() {
        let (m, e) = instance_a(0.25);
        assert!(!check_replicable(&m, &e, &[1.0]).unwrap());
        assert!(!check_replicable(&m, &e, &[2.0]).unwrap());
        let (f, e) = instance_a(1e-12);
        assert!(check_replicable(&f, &e, &[1.0]).unwrap());
        let (lo, _) = price_interval(&f, &e, &[1.0]).unwrap();
        assert!((lo - 1.0).abs() < 1e-8);
    }

    #[test]
    fn extreme_points_match_lp_extremes() {
        let (m, _) = instance_a(0.25);
        let pts = extreme_point_superset(&m, 10_000).unwrap();
        let poly = CpsPolytope::new(&m, 0.25);
        for p in &pts {
            let mut x = p.mass.clone();
            x.extend(&p.value);
            assert!(poly.lp.constraints.iter().all(|c| c.violation(&x) <= 1e-12));
        }
        let q_up: Vec<f64> = pts.iter().map(|p| p.mass[1]).collect();
        let hi = q_up.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = q_up.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((hi - 5.0 / 9.0).abs() < 1e-12 && (lo - 1.0 / 6.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn binomial2(s: [f64; 7], lambda: f64) -> MarketModel {
            let tree = ScenarioTree::new(&[
                (None, 1.0),
                (Some(0), 0.4),
                (Some(0), 0.6),
                (Some(1), 0.5),
                (Some(1), 0.5),
                (Some(2), 0.3),
                (Some(2), 0.7),
            ])
            .unwrap();
            MarketModel::new(tree, s.to_vec(), lambda).unwrap()
        }

        fn prices() -> impl Strategy<Value = [f64; 7]> {
            (2.0..6.0f64, 0.5..2.0f64, 0.5..2.0f64, 0.5..2.0f64, 0.5..2.0f64, 0.5..2.0f64, 0.5..2.0f64)
                .prop_map(|(s0, a, b, c, d, e, f)| [s0, s0 * a, s0 / b, s0 * a * c, s0 * a / d, s0 / b * e, s0 / b / f])
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn found_systems_are_valid_martingales(s in prices(), lambda in 0.05..0.4f64) {
                let m = binomial2(s, lambda);
                if let Ok(cps) = find_cps(&m, lambda) {
                    prop_assert!(cps.is_valid(&m));
                    let d = cps_to_density(&m.tree, &cps);
                    prop_assert!(m.tree.martingale_residual_with(&d.z0, |c| m.tree.cond_prob(c)) <= 1e-9);
                    prop_assert!(m.tree.martingale_residual_with(&d.z1, |c| m.tree.cond_prob(c)) <= 1e-9);
                }
            }

            #[test]
            fn extremal_order_monotone_and_subadditive(
                s in prices(),
                g in proptest::collection::vec(0.0..5.0f64, 4),
                bump in proptest::collection::vec(0.0..1.0f64, 4),
                h in proptest::collection::vec(-3.0..3.0f64, 4),
            ) {
                let m = binomial2(s, 0.3);
                prop_assume!(find_cps(&m, 0.3).is_ok());
                let (lo, hi) = claim_interval(&m, &g).unwrap();
                prop_assert!(lo <= hi + 1e-9);
                prop_assert!(lo >= -1e-9);
                let g2: Vec<f64> = g.iter().zip(&bump).map(|(a, b)| a + b).collect();
                let (lo2, hi2) = claim_interval(&m, &g2).unwrap();
                prop_assert!(lo <= lo2 + 1e-9 && hi <= hi2 + 1e-9);
                let (hlo, hhi) = claim_interval(&m, &h).unwrap();
                let sum: Vec<f64> = g.iter().zip(&h).map(|(a, b)| a + b).collect();
                let (slo, shi) = claim_interval(&m, &sum).unwrap();
                prop_assert!(slo >= lo + hlo - 1e-8 && shi <= hi + hhi + 1e-8);
            }

            #[test]
            fn superset_points_are_feasible_and_reach_the_lp_optimum(
                s in prices(),
                g in proptest::collection::vec(-3.0..3.0f64, 4),
            ) {
                let m = binomial2(s, 0.3);
                prop_assume!(find_cps(&m, 0.3).is_ok());
                let pts = extreme_point_superset(&m, 100_000).unwrap();
                let poly = CpsPolytope::new(&m, 0.3);
                for p in &pts {
                    let mut x = p.mass.clone();
                    x.extend(&p.value);
                    for c in &poly.lp.constraints {
                        prop_assert!(c.violation(&x) <= 1e-9);
                    }
                    prop_assert!(p.mass.iter().all(|&v| v >= -1e-12));
                }
                let best = pts.iter().map(|p| p.expectation(&m.tree, &g)).fold(f64::NEG_INFINITY, f64::max);
                let lp = extremal_expectation(&m, &g, Sense::Max).unwrap().value;
                prop_assert!((best - lp).abs() <= 1e-8, "{} vs {}", best, lp);
            }
        }
    }
}

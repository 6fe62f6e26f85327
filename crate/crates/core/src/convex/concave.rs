//! Primal-dual interior-point method for separable concave objectives over
//! linear constraints, with an LP phase 1 for the starting point.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kkt::check_kkt;
use super::linalg::{dot, dot_sparse, norm_inf, KktFactor, SparseRows};
use super::lp::solve_lp;
use super::stdform::StdForm;
use super::{
    ConvexError, LinearProgram, Relation, SeparableConcaveProgram, Sense, SolveReport, Status, DEFAULT_MAX_ITER,
    INFEASIBLE_SLACK,
};

#[derive(Debug, Clone, PartialEq)]
pub enum InitialPoint {
    /// The phase-1 maximin-slack point.
    Phase1,
    /// A caller-supplied strictly feasible point.
    Given(Vec<f64>),
    /// The phase-1 point moved a random distance along a random direction
    /// in the null space of the equality rows, staying strictly inside.
    Perturbed { seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcaveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub start: InitialPoint,
}

impl Default for ConcaveOptions {
    fn default() -> Self {
        ConcaveOptions {
            tol: 1e-10,
            max_iter: DEFAULT_MAX_ITER,
            start: InitialPoint::Phase1,
        }
    }
}

const NEAR_TOL: f64 = 1e-7;
const DIVERGENCE: f64 = 1e9;
/// Iterations without a new best error before the barrier loop gives up.
const STALL_ITERS: usize = 15;

pub fn solve_concave(program: &SeparableConcaveProgram) -> Result<SolveReport, ConvexError> {
    solve_concave_with(program, &ConcaveOptions::default())
}

pub fn solve_concave_with(program: &SeparableConcaveProgram, opts: &ConcaveOptions) -> Result<SolveReport, ConvexError> {
    program.validate()?;
    let sf = StdForm::build(program.n, &program.constraints, &program.bounds);
    let (x0, slack) = match &opts.start {
        InitialPoint::Given(x) => {
            if x.len() != program.n {
                return Err(ConvexError::Malformed("start point has the wrong dimension".into()));
            }
            (x.clone(), None)
        }
        InitialPoint::Phase1 => {
            let (x, t) = phase1(program)?;
            (x, Some(t))
        }
        InitialPoint::Perturbed { seed } => {
            let (x, t) = phase1(program)?;
            (perturb(program, &sf, &x, t, *seed), Some(t))
        }
    };
    let s0: Vec<f64> = sf.h.iter().zip(sf.g.mul(&x0)).map(|(h, gx)| h - gx).collect();
    if s0.iter().any(|&s| s <= 0.0) || program.domain_margin(&x0) <= 0.0 {
        return Err(ConvexError::Malformed("starting point is not strictly feasible".into()));
    }
    let mut report = barrier(program, &sf, x0, s0, opts);
    report.phase1_slack = slack;
    Ok(report)
}

/// Maximize the smallest slack `t ≤ 1` over inequality rows, finite bounds
/// and strict-domain arguments, with equality rows kept exact.
fn phase1(program: &SeparableConcaveProgram) -> Result<(Vec<f64>, f64), ConvexError> {
    let n = program.n;
    let t = n;
    let mut lp = LinearProgram::new(n + 1, Sense::Max);
    for j in 0..n {
        lp.set_free(j);
    }
    lp.set_bounds(t, f64::NEG_INFINITY, 1.0);
    lp.objective[t] = 1.0;
    for row in &program.constraints {
        let mut coeffs = row.coeffs.clone();
        match row.rel {
            Relation::Eq => {}
            Relation::Le => coeffs.push((t, 1.0)),
            Relation::Ge => coeffs.push((t, -1.0)),
        }
        lp.add_row(coeffs, row.rel, row.rhs);
    }
    for (j, &(lo, hi)) in program.bounds.iter().enumerate() {
        if lo == hi {
            lp.add_row(vec![(j, 1.0)], Relation::Eq, lo);
            continue;
        }
        if hi.is_finite() {
            lp.add_row(vec![(j, 1.0), (t, 1.0)], Relation::Le, hi);
        }
        if lo.is_finite() {
            lp.add_row(vec![(j, 1.0), (t, -1.0)], Relation::Ge, lo);
        }
    }
    for term in program.terms.iter().filter(|t| t.is_strict()) {
        let mut coeffs = term.coeffs.clone();
        coeffs.push((t, -1.0));
        lp.add_row(coeffs, Relation::Ge, -term.offset);
    }
    let rep = solve_lp(&lp)?;
    match rep.status {
        Status::Optimal => {}
        Status::Infeasible => return Err(ConvexError::Infeasible { slack: f64::NEG_INFINITY }),
        other => return Err(ConvexError::Phase1(other)),
    }
    let slack = rep.x[t];
    if slack < INFEASIBLE_SLACK {
        return Err(ConvexError::Infeasible { slack });
    }
    if slack <= -INFEASIBLE_SLACK {
        return Err(ConvexError::EmptyInterior { slack });
    }
    let mut x = rep.x;
    x.truncate(n);
    Ok((x, slack))
}

fn perturb(program: &SeparableConcaveProgram, sf: &StdForm, x0: &[f64], slack: f64, seed: u64) -> Vec<f64> {
    let n = program.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = sf.a.len();
    if p > 0 {
        let mut aat = DMatrix::zeros(p, p);
        for (i, ri) in sf.a.rows.iter().enumerate() {
            for (k, rk) in sf.a.rows.iter().enumerate() {
                aat[(i, k)] = ri
                    .iter()
                    .map(|&(j, a)| rk.iter().filter(|&&(l, _)| l == j).map(|&(_, b)| a * b).sum::<f64>())
                    .sum();
            }
            aat[(i, i)] += 1e-12;
        }
        if let Some(ch) = aat.cholesky() {
            let mut w = DVector::from_vec(sf.a.mul(&d));
            ch.solve_mut(&mut w);
            sf.a.tmul(w.as_slice()).iter().zip(d.iter_mut()).for_each(|(c, v)| *v -= c);
        }
    }
    let scale = norm_inf(&d);
    if scale < 1e-12 {
        return x0.to_vec();
    }
    d.iter_mut().for_each(|v| *v /= scale);
    // largest β keeping every slack above half its phase-1 floor
    let floor = 0.5 * slack;
    let mut beta_max = 1.0 + norm_inf(x0);
    for (row, &h) in sf.g.rows.iter().zip(&sf.h) {
        let rate = dot_sparse(row, &d);
        let s = h - dot_sparse(row, x0);
        if rate > 0.0 {
            beta_max = beta_max.min((s - floor).max(0.0) / rate);
        }
    }
    for term in program.terms.iter().filter(|t| t.is_strict()) {
        let rate = -dot_sparse(&term.coeffs, &d);
        let u = term.argument(x0);
        if rate > 0.0 {
            beta_max = beta_max.min((u - floor).max(0.0) / rate);
        }
    }
    let beta = rng.gen_range(0.25..0.75) * beta_max;
    x0.iter().zip(&d).map(|(x, d)| x + beta * d).collect()
}

fn kkt_error(sf: &StdForm, grad: &[f64], x: &[f64], y: &[f64], z: &[f64], s: &[f64], bnorm: f64) -> f64 {
    let r = residuals(sf, grad, x, y, z, s);
    let m = s.len();
    let mu = if m > 0 { dot(s, z) / m as f64 } else { 0.0 };
    let gscale = 1f64.max(norm_inf(grad));
    (norm_inf(&r.rd) / gscale)
        .max(norm_inf(&r.rp) / bnorm)
        .max(norm_inf(&r.rg) / bnorm)
        .max(mu / gscale)
}

/// Active-set Newton iterations from a stalled barrier iterate: rows with
/// slack below their multiplier are held as equalities, the rest dropped,
/// and the stationarity system is solved without a barrier. Violated rows
/// join the set and rows with negative multipliers leave it, for a few
/// rounds. Returns the KKT error and the point once it is feasible with
/// signed multipliers.
#[allow(clippy::type_complexity)]
fn polish(
    program: &SeparableConcaveProgram,
    sf: &StdForm,
    x0: &[f64],
    y0: &[f64],
    z0: &[f64],
    s0: &[f64],
) -> Option<(f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let bnorm = 1f64.max(norm_inf(&sf.b)).max(norm_inf(&sf.h));
    let mut active: Vec<bool> = s0.iter().zip(z0).map(|(s, z)| s <= z).collect();
    for _ in 0..10 {
        let set: Vec<usize> = (0..s0.len()).filter(|&i| active[i]).collect();
        let (x, y, za) = newton_on_active(program, sf, &set, x0, y0, z0)?;
        let (grad, _) = derivatives(program, &x);
        let gscale = 1f64.max(norm_inf(&grad));
        let gx = sf.g.mul(&x);
        let mut changed = false;
        for (&i, &zi) in set.iter().zip(&za) {
            if zi < -1e-10 * gscale {
                active[i] = false;
                changed = true;
            }
        }
        for (i, (g, h)) in gx.iter().zip(&sf.h).enumerate() {
            if g - h > 1e-12 * bnorm && !active[i] {
                active[i] = true;
                changed = true;
            }
        }
        if changed {
            continue;
        }
        let s: Vec<f64> = gx.iter().zip(&sf.h).map(|(g, h)| (h - g).max(0.0)).collect();
        let mut z = vec![0.0; s.len()];
        for (&i, &zi) in set.iter().zip(&za) {
            z[i] = zi.max(0.0);
        }
        let err = kkt_error(sf, &grad, &x, &y, &z, &s, bnorm);
        return Some((err, x, y, z, s));
    }
    None
}

/// Damped Newton on `∇f + Aᵀy + G_Sᵀz_S = 0`, `Ax = b`, `G_S x = h_S`.
#[allow(clippy::type_complexity)]
fn newton_on_active(
    program: &SeparableConcaveProgram,
    sf: &StdForm,
    set: &[usize],
    x0: &[f64],
    y0: &[f64],
    z0: &[f64],
) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = program.n;
    let p = sf.a.len();
    let dim = n + p + set.len();
    let bnorm = 1f64.max(norm_inf(&sf.b)).max(norm_inf(&sf.h));
    let mut x = x0.to_vec();
    let mut y = y0.to_vec();
    let mut za: Vec<f64> = set.iter().map(|&i| z0[i]).collect();
    let residual = |x: &[f64], y: &[f64], za: &[f64]| {
        let (grad, _) = derivatives(program, x);
        let mut r = grad;
        sf.a.tmul_add(y, &mut r);
        for (&i, &zi) in set.iter().zip(za) {
            for &(j, v) in &sf.g.rows[i] {
                r[j] += v * zi;
            }
        }
        r.extend(sf.a.mul(x).iter().zip(&sf.b).map(|(ax, b)| ax - b));
        r.extend(set.iter().map(|&i| dot_sparse(&sf.g.rows[i], x) - sf.h[i]));
        r
    };
    let mut r = residual(&x, &y, &za);
    for _ in 0..30 {
        if norm_inf(&r) <= 1e-14 * bnorm {
            break;
        }
        let (_, hess) = derivatives(program, &x);
        let mut jac = DMatrix::zeros(dim, dim);
        jac.view_mut((0, 0), (n, n)).copy_from(&hess);
        for (row, coeffs) in sf.a.rows.iter().enumerate() {
            for &(j, v) in coeffs {
                jac[(n + row, j)] += v;
                jac[(j, n + row)] += v;
            }
        }
        for (slot, &i) in set.iter().enumerate() {
            for &(j, v) in &sf.g.rows[i] {
                jac[(n + p + slot, j)] += v;
                jac[(j, n + p + slot)] += v;
            }
        }
        // singular when active rows are dependent; take the least-squares step
        let svd = jac.svd(true, true);
        let cut = 1e-13 * svd.singular_values.max();
        let step = svd.solve(&DVector::from_iterator(dim, r.iter().map(|v| -v)), cut).ok()?;
        if step.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let xn: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + alpha * d).collect();
            if program.domain_margin(&xn) > 0.0 {
                let yn: Vec<f64> = y.iter().zip(step.iter().skip(n)).map(|(a, d)| a + alpha * d).collect();
                let zn: Vec<f64> = za.iter().zip(step.iter().skip(n + p)).map(|(a, d)| a + alpha * d).collect();
                let rn = residual(&xn, &yn, &zn);
                if norm_inf(&rn) < norm_inf(&r) {
                    (x, y, za, r) = (xn, yn, zn, rn);
                    moved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    Some((x, y, za))
}

/// `∇f` and `∇²f` of `f = −Σ terms` (the minimized function).
fn derivatives(program: &SeparableConcaveProgram, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let n = program.n;
    let mut grad = vec![0.0; n];
    let mut hess = DMatrix::zeros(n, n);
    for t in &program.terms {
        let u = t.argument(x);
        let d1 = t.weight * t.kind.d1(u);
        let d2 = -t.weight * t.kind.d2(u);
        for &(j, a) in &t.coeffs {
            grad[j] -= d1 * a;
            if d2 != 0.0 {
                for &(k, b) in &t.coeffs {
                    hess[(j, k)] += d2 * a * b;
                }
            }
        }
    }
    (grad, hess)
}

struct Residuals {
    rd: Vec<f64>,
    rp: Vec<f64>,
    rg: Vec<f64>,
}

fn residuals(sf: &StdForm, grad: &[f64], x: &[f64], y: &[f64], z: &[f64], s: &[f64]) -> Residuals {
    let mut rd = grad.to_vec();
    sf.a.tmul_add(y, &mut rd);
    sf.g.tmul_add(z, &mut rd);
    let rp = sf.a.mul(x).iter().zip(&sf.b).map(|(ax, b)| ax - b).collect();
    let rg = sf.g.mul(x).iter().zip(s).zip(&sf.h).map(|((gx, s), h)| gx + s - h).collect();
    Residuals { rd, rp, rg }
}

fn merit(program: &SeparableConcaveProgram, sf: &StdForm, x: &[f64], y: &[f64], z: &[f64], s: &[f64], target: f64) -> f64 {
    let grad = program.gradient(x).iter().map(|v| -v).collect::<Vec<_>>();
    let r = residuals(sf, &grad, x, y, z, s);
    let comp: f64 = s.iter().zip(z).map(|(s, z)| (s * z - target).powi(2)).sum();
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    (sq(&r.rd) + sq(&r.rp) + sq(&r.rg) + comp).sqrt()
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(v, d)| -v / d)
        .fold(f64::INFINITY, f64::min)
}

fn barrier(program: &SeparableConcaveProgram, sf: &StdForm, x0: Vec<f64>, s0: Vec<f64>, opts: &ConcaveOptions) -> SolveReport {
    let m = sf.g.len();
    let mut x = x0;
    let mut s = s0;
    let mut z: Vec<f64> = s.iter().map(|s| 1.0 / s).collect();
    let mut y = vec![0.0; sf.a.len()];
    let bnorm = 1f64.max(norm_inf(&sf.b)).max(norm_inf(&sf.h));
    let strict: SparseRows = SparseRows {
        ncols: program.n,
        rows: program.terms.iter().filter(|t| t.is_strict()).map(|t| t.coeffs.clone()).collect(),
    };
    let mut status = Status::MaxIter;
    let mut iterations = opts.max_iter;
    let mut best: Option<(f64, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = None;
    let mut best_iter = 0;

    for iter in 0..opts.max_iter {
        let (grad, hess) = derivatives(program, &x);
        let r = residuals(sf, &grad, &x, &y, &z, &s);
        let mu = if m > 0 { dot(&s, &z) / m as f64 } else { 0.0 };
        let gscale = 1f64.max(norm_inf(&grad));
        let err = (norm_inf(&r.rd) / gscale)
            .max(norm_inf(&r.rp) / bnorm)
            .max(norm_inf(&r.rg) / bnorm)
            .max(mu / gscale);
        if !err.is_finite() {
            break;
        }
        if norm_inf(&x) > DIVERGENCE {
            status = Status::Unbounded;
            iterations = iter;
            break;
        }
        if best.as_ref().map_or(true, |b| err < b.0) {
            best = Some((err, x.clone(), y.clone(), z.clone(), s.clone()));
            best_iter = iter;
        } else if iter - best_iter > STALL_ITERS {
            iterations = iter;
            break;
        }
        if err <= opts.tol {
            status = Status::Optimal;
            iterations = iter;
            break;
        }

        let d: Vec<f64> = s.iter().zip(&z).map(|(s, z)| s / z).collect();
        let Some(kkt) = KktFactor::new(Some(&hess), &sf.a, &sf.g, &d) else {
            break;
        };
        let q1: Vec<f64> = r.rd.iter().map(|v| -v).collect();
        let q2: Vec<f64> = r.rp.iter().map(|v| -v).collect();
        let solve = |target: f64| {
            let rc: Vec<f64> = s.iter().zip(&z).map(|(s, z)| target - s * z).collect();
            let q3: Vec<f64> = r.rg.iter().zip(&rc).zip(&z).map(|((r, rc), z)| -r - rc / z).collect();
            let (dx, dy, dz) = kkt.solve(&q1, &q2, &q3);
            let ds: Vec<f64> = rc.iter().zip(&s).zip(&dz).zip(&z).map(|(((rc, s), dz), z)| (rc - s * dz) / z).collect();
            (dx, dy, dz, ds)
        };
        let (_, _, dz_a, ds_a) = solve(0.0);
        let alpha_aff = max_step(&s, &ds_a).min(max_step(&z, &dz_a)).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(1e-4, 0.5);
        let target = sigma * mu;
        let (dx, dy, dz, ds) = solve(target);

        let mut alpha = (0.99 * max_step(&s, &ds).min(max_step(&z, &dz))).min(1.0);
        // stay strictly inside the objective's domain
        for (row, t) in strict.rows.iter().zip(program.terms.iter().filter(|t| t.is_strict())) {
            let du = dot_sparse(row, &dx);
            if du < 0.0 {
                alpha = alpha.min(0.99 * t.argument(&x) / -du);
            }
        }
        let phi0 = merit(program, sf, &x, &y, &z, &s, target);
        let mut accepted = false;
        for _ in 0..40 {
            let xn: Vec<f64> = x.iter().zip(&dx).map(|(a, b)| a + alpha * b).collect();
            let yn: Vec<f64> = y.iter().zip(&dy).map(|(a, b)| a + alpha * b).collect();
            let zn: Vec<f64> = z.iter().zip(&dz).map(|(a, b)| a + alpha * b).collect();
            let sn: Vec<f64> = s.iter().zip(&ds).map(|(a, b)| a + alpha * b).collect();
            if program.domain_margin(&xn) > 0.0 {
                let phi = merit(program, sf, &xn, &yn, &zn, &sn, target);
                if phi <= (1.0 - 1e-4 * alpha) * phi0 || alpha < 1e-8 {
                    x = xn;
                    y = yn;
                    z = zn;
                    s = sn;
                    accepted = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        if !accepted {
            break;
        }
    }

    if status == Status::MaxIter {
        if let Some((err, bx, by, bz, bs)) = best {
            x = bx;
            y = by;
            z = bz;
            s = bs;
            if let Some(p) = polish(program, sf, &x, &y, &z, &s) {
                if p.0 < err {
                    (x, y, z, s) = (p.1, p.2, p.3, p.4);
                }
            }
            let (grad, _) = derivatives(program, &x);
            if kkt_error(sf, &grad, &x, &y, &z, &s, bnorm) <= NEAR_TOL {
                status = Status::Optimal;
            }
        }
    }
    let multipliers = sf.multipliers(&y, &z, 1.0);
    let kkt = check_kkt(program, &x, &multipliers);
    let objective = program.value(&x).unwrap_or(f64::NAN);
    let final_mu = if m > 0 { dot(&s, &z) / m as f64 } else { 0.0 };
    SolveReport {
        status,
        dual_objective: objective + dot(&s, &z),
        objective,
        x,
        multipliers,
        kkt,
        iterations,
        certificate: None,
        weak_duality_violations: 0,
        final_mu,
        phase1_slack: None,
    }
}

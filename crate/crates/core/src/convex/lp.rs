//! Homogeneous self-dual interior-point method with Mehrotra
//! predictor-corrector steps.

use super::kkt::lp_kkt;
use super::linalg::{dot, norm_inf, KktFactor};
use super::stdform::StdForm;
use super::{Certificate, ConvexError, LinearProgram, Multipliers, Sense, SolveReport, Status, DEFAULT_MAX_ITER};

/// Relative tolerance on residuals and gap.
pub const LP_TOL: f64 = 1e-10;
/// Accepted when the iteration stalls before reaching `LP_TOL`.
const NEAR_TOL: f64 = 1e-7;
const CERT_TOL: f64 = 1e-9;

pub fn solve_lp(lp: &LinearProgram) -> Result<SolveReport, ConvexError> {
    solve_lp_with(lp, LP_TOL, DEFAULT_MAX_ITER)
}

pub fn solve_lp_with(lp: &LinearProgram, tol: f64, max_iter: usize) -> Result<SolveReport, ConvexError> {
    lp.validate()?;
    let sf = StdForm::build(lp.n_vars(), &lp.constraints, &lp.bounds);
    let sign = match lp.sense {
        Sense::Max => 1.0,
        Sense::Min => -1.0,
    };
    let c: Vec<f64> = lp.objective.iter().map(|v| -sign * v).collect();
    let out = hsd(&sf, &c, tol, max_iter);
    let n = lp.n_vars();
    let report = match out.status {
        Status::Optimal | Status::MaxIter => {
            let t = out.tau;
            let x: Vec<f64> = out.x.iter().map(|v| v / t).collect();
            let y: Vec<f64> = out.y.iter().map(|v| v / t).collect();
            let z: Vec<f64> = out.z.iter().map(|v| v / t).collect();
            let multipliers = sf.multipliers(&y, &z, sign);
            let kkt = lp_kkt(lp, &x, &multipliers);
            SolveReport {
                status: out.status,
                objective: lp.objective_value(&x),
                dual_objective: sign * (dot(&sf.b, &y) + dot(&sf.h, &z)),
                x,
                multipliers,
                kkt,
                iterations: out.iterations,
                certificate: None,
                weak_duality_violations: out.wd_violations,
                final_mu: dot(&out.s, &out.z) / (t * t * sf.h.len().max(1) as f64),
                phase1_slack: None,
            }
        }
        Status::Infeasible => {
            let scale = -(dot(&sf.b, &out.y) + dot(&sf.h, &out.z));
            let y: Vec<f64> = out.y.iter().map(|v| v / scale).collect();
            let z: Vec<f64> = out.z.iter().map(|v| v / scale).collect();
            let multipliers = sf.multipliers(&y, &z, 1.0);
            SolveReport {
                status: Status::Infeasible,
                x: vec![f64::NAN; n],
                multipliers: Multipliers::default(),
                objective: f64::NAN,
                dual_objective: f64::NAN,
                kkt: Default::default(),
                iterations: out.iterations,
                certificate: Some(Certificate::Infeasible {
                    multipliers,
                    dual_value: -1.0,
                }),
                weak_duality_violations: out.wd_violations,
                final_mu: f64::NAN,
                phase1_slack: None,
            }
        }
        Status::Unbounded => {
            let scale = -dot(&c, &out.x);
            let ray: Vec<f64> = out.x.iter().map(|v| v / scale).collect();
            SolveReport {
                status: Status::Unbounded,
                x: vec![f64::NAN; n],
                multipliers: Multipliers::default(),
                objective: sign * f64::INFINITY,
                dual_objective: f64::NAN,
                kkt: Default::default(),
                iterations: out.iterations,
                certificate: Some(Certificate::Unbounded { ray, gain: 1.0 }),
                weak_duality_violations: out.wd_violations,
                final_mu: f64::NAN,
                phase1_slack: None,
            }
        }
    };
    Ok(report)
}

#[derive(Debug, Clone)]
struct Hsd {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    kappa: f64,
}

struct HsdOut {
    status: Status,
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    iterations: usize,
    wd_violations: usize,
}

impl HsdOut {
    fn from(it: &Hsd, status: Status, iterations: usize, wd_violations: usize) -> Self {
        HsdOut {
            status,
            x: it.x.clone(),
            y: it.y.clone(),
            z: it.z.clone(),
            s: it.s.clone(),
            tau: it.tau,
            iterations,
            wd_violations,
        }
    }
}

fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(v, d)| -v / d)
        .fold(f64::INFINITY, f64::min)
}

fn axpy(a: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(x, y)| a * x + y).collect()
}

fn hsd(sf: &StdForm, c: &[f64], tol: f64, max_iter: usize) -> HsdOut {
    let (n, p, m) = (sf.n, sf.a.len(), sf.g.len());
    let (a, g, b, h) = (&sf.a, &sf.g, &sf.b, &sf.h);
    let mut it = Hsd {
        x: vec![0.0; n],
        y: vec![0.0; p],
        z: vec![1.0; m],
        s: vec![1.0; m],
        tau: 1.0,
        kappa: 1.0,
    };
    let bnorm = 1f64.max(norm_inf(b)).max(norm_inf(h));
    let cnorm = 1f64.max(norm_inf(c));
    let mut best: Option<(f64, Hsd)> = None;
    let mut wd_violations = 0;
    let mut stalls = 0;

    for iter in 0..max_iter {
        let Hsd { x, y, z, s, tau, kappa } = &it;
        let (tau, kappa) = (*tau, *kappa);
        let mut r1 = a.tmul(y);
        g.tmul_add(z, &mut r1);
        r1.iter_mut().zip(c).for_each(|(r, c)| *r += c * tau);
        let r2: Vec<f64> = a.mul(x).iter().zip(b).map(|(ax, b)| ax - b * tau).collect();
        let r3: Vec<f64> = g.mul(x).iter().zip(s).zip(h).map(|((gx, s), h)| gx + s - h * tau).collect();
        let cx = dot(c, x);
        let byhz = dot(b, y) + dot(h, z);
        let r4 = kappa + cx + byhz;
        let sz = dot(s, z);
        let mu = (sz + tau * kappa) / (m as f64 + 1.0);

        let pres = norm_inf(&r2).max(norm_inf(&r3)) / tau / bnorm;
        let dres = norm_inf(&r1) / tau / cnorm;
        let pcost = cx / tau;
        let dcost = -byhz / tau;
        let relgap = (pcost - dcost).abs() / (1.0 + pcost.abs());
        let merit = pres.max(dres).max(relgap);
        if !merit.is_finite() {
            break;
        }
        if pres <= 1e-6 && dres <= 1e-6 {
            let identity = (dot(x, &r1) - dot(y, &r2) - dot(z, &r3) + sz) / (tau * tau);
            let slop = (dot(x, &r1).abs() + dot(y, &r2).abs() + dot(z, &r3).abs()) / (tau * tau);
            let scale = 1e-9 * (1.0 + pcost.abs() + dcost.abs());
            if (pcost - dcost - identity).abs() > scale + 1e-9 * slop || pcost - dcost < -slop - scale {
                wd_violations += 1;
            }
        }
        if best.as_ref().map_or(true, |(bm, _)| merit < *bm) {
            best = Some((merit, it.clone()));
        }
        if pres <= tol && dres <= tol && relgap <= tol {
            return HsdOut::from(&it, Status::Optimal, iter, wd_violations);
        }
        if byhz < 0.0 && tau < kappa {
            let mut aty = a.tmul(y);
            g.tmul_add(z, &mut aty);
            if norm_inf(&aty) / -byhz <= CERT_TOL {
                return HsdOut::from(&it, Status::Infeasible, iter, wd_violations);
            }
        }
        if cx < 0.0 && tau < kappa {
            let ax = a.mul(x);
            let gxs: Vec<f64> = g.mul(x).iter().zip(s).map(|(gx, s)| gx + s).collect();
            if norm_inf(&ax).max(norm_inf(&gxs)) / -cx <= CERT_TOL {
                return HsdOut::from(&it, Status::Unbounded, iter, wd_violations);
            }
        }

        let d: Vec<f64> = s.iter().zip(z).map(|(s, z)| s / z).collect();
        let Some(kkt) = KktFactor::new(None, a, g, &d) else {
            break;
        };
        let neg_c: Vec<f64> = c.iter().map(|v| -v).collect();
        let (x1, y1, z1) = kkt.solve(&neg_c, b, h);
        let denom1 = dot(c, &x1) + dot(b, &y1) + dot(h, &z1) - kappa / tau;

        let direction = |eta: f64, rc: &[f64], rk: f64| {
            let q1: Vec<f64> = r1.iter().map(|v| -eta * v).collect();
            let q2: Vec<f64> = r2.iter().map(|v| -eta * v).collect();
            let q3: Vec<f64> = r3.iter().zip(rc).zip(z).map(|((r, rc), z)| -eta * r - rc / z).collect();
            let (x2, y2, z2) = kkt.solve(&q1, &q2, &q3);
            let dtau = (-eta * r4 - rk / tau - dot(c, &x2) - dot(b, &y2) - dot(h, &z2)) / denom1;
            let dx = axpy(dtau, &x1, &x2);
            let dy = axpy(dtau, &y1, &y2);
            let dz = axpy(dtau, &z1, &z2);
            let ds: Vec<f64> = rc.iter().zip(s).zip(&dz).zip(z).map(|(((rc, s), dz), z)| (rc - s * dz) / z).collect();
            let dkappa = (rk - kappa * dtau) / tau;
            (dx, dy, dz, ds, dtau, dkappa)
        };
        let step = |dz: &[f64], ds: &[f64], dtau: f64, dkappa: f64| {
            let mut alpha = max_step(s, ds).min(max_step(z, dz));
            if dtau < 0.0 {
                alpha = alpha.min(-tau / dtau);
            }
            if dkappa < 0.0 {
                alpha = alpha.min(-kappa / dkappa);
            }
            alpha
        };

        let rc_aff: Vec<f64> = s.iter().zip(z).map(|(s, z)| -s * z).collect();
        let (_, _, dz_a, ds_a, dtau_a, dkappa_a) = direction(1.0, &rc_aff, -tau * kappa);
        let alpha_aff = step(&dz_a, &ds_a, dtau_a, dkappa_a).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);
        let rc: Vec<f64> = s
            .iter()
            .zip(z)
            .zip(ds_a.iter().zip(&dz_a))
            .map(|((s, z), (dsa, dza))| -s * z + sigma * mu - dsa * dza)
            .collect();
        let rk = -tau * kappa + sigma * mu - dtau_a * dkappa_a;
        let (dx, dy, dz, ds, dtau, dkappa) = direction(1.0 - sigma, &rc, rk);
        let alpha = (0.99 * step(&dz, &ds, dtau, dkappa)).min(1.0);
        if !(alpha > 1e-12) || !alpha.is_finite() {
            stalls += 1;
            if stalls >= 3 || !alpha.is_finite() {
                break;
            }
            continue;
        }
        let next = Hsd {
            x: axpy(alpha, &dx, x),
            y: axpy(alpha, &dy, y),
            z: axpy(alpha, &dz, z),
            s: axpy(alpha, &ds, s),
            tau: tau + alpha * dtau,
            kappa: kappa + alpha * dkappa,
        };
        if next.x.iter().chain(&next.y).chain(&next.z).any(|v| !v.is_finite()) {
            break;
        }
        it = next;
    }
    let iterations = max_iter;
    match best {
        Some((merit, b)) if merit <= NEAR_TOL => HsdOut::from(&b, Status::Optimal, iterations, wd_violations),
        _ => HsdOut::from(&it, Status::MaxIter, iterations, wd_violations),
    }
}

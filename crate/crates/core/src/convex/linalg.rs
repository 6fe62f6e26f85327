use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Row-major sparse matrix.
#[derive(Debug, Clone, Default)]
pub(crate) struct SparseRows {
    pub ncols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(ncols: usize) -> Self {
        SparseRows { ncols, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<(usize, f64)>) -> usize {
        self.rows.push(row);
        self.rows.len() - 1
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|r| dot_sparse(r, x)).collect()
    }

    /// `out += selfᵀ y`.
    pub fn tmul_add(&self, y: &[f64], out: &mut [f64]) {
        for (r, &yi) in self.rows.iter().zip(y) {
            if yi != 0.0 {
                for &(j, a) in r {
                    out[j] += a * yi;
                }
            }
        }
    }

    pub fn tmul(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.ncols];
        self.tmul_add(y, &mut out);
        out
    }

    /// `m += Σ_i w_i r_i r_iᵀ`.
    pub fn add_weighted_gram(&self, w: &[f64], m: &mut DMatrix<f64>) {
        for (r, &wi) in self.rows.iter().zip(w) {
            for &(j, a) in r {
                for &(k, b) in r {
                    m[(j, k)] += wi * a * b;
                }
            }
        }
    }
}

pub(crate) fn dot_sparse(r: &[(usize, f64)], x: &[f64]) -> f64 {
    r.iter().map(|&(j, a)| a * x[j]).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn cholesky_with_shift(mut m: DMatrix<f64>, base: f64) -> Option<(Cholesky<f64, Dyn>, f64)> {
    let n = m.nrows();
    let mut shift = base;
    for i in 0..n {
        m[(i, i)] += shift;
    }
    for _ in 0..200 {
        if let Some(ch) = m.clone().cholesky() {
            return Some((ch, shift));
        }
        let bump = shift.max(1e-300) * 99.0;
        for i in 0..n {
            m[(i, i)] += bump;
        }
        shift += bump;
    }
    None
}

/// Factorization of
///
/// ```text
/// [ H  Aᵀ  Gᵀ ]
/// [ A  0   0  ]
/// [ G  0  −D  ]
/// ```
///
/// with `D` positive diagonal, via `M = H + Gᵀ D⁻¹ G` and the Schur
/// complement `A M⁻¹ Aᵀ`. Small diagonal shifts keep both factorizations
/// defined; iterative refinement against the unshifted system removes their
/// effect.
pub(crate) struct KktFactor<'a> {
    h: Option<&'a DMatrix<f64>>,
    a: &'a SparseRows,
    g: &'a SparseRows,
    d: Vec<f64>,
    m_chol: Cholesky<f64, Dyn>,
    minv_at: DMatrix<f64>,
    s_chol: Option<Cholesky<f64, Dyn>>,
}

impl<'a> KktFactor<'a> {
    pub fn new(h: Option<&'a DMatrix<f64>>, a: &'a SparseRows, g: &'a SparseRows, d: &[f64]) -> Option<Self> {
        let n = a.ncols.max(g.ncols);
        let mut m = match h {
            Some(h) => h.clone(),
            None => DMatrix::zeros(n, n),
        };
        let w: Vec<f64> = d.iter().map(|v| 1.0 / v).collect();
        g.add_weighted_gram(&w, &mut m);
        let scale = (0..n).map(|i| m[(i, i)]).fold(0.0f64, f64::max);
        let (m_chol, _) = cholesky_with_shift(m, 1e-14 * scale)?;
        let p = a.len();
        let mut minv_at = DMatrix::zeros(n, p);
        for (k, row) in a.rows.iter().enumerate() {
            let mut col = DVector::zeros(n);
            for &(j, v) in row {
                col[j] += v;
            }
            m_chol.solve_mut(&mut col);
            minv_at.set_column(k, &col);
        }
        let s_chol = if p > 0 {
            let mut s = DMatrix::zeros(p, p);
            for (k, row) in a.rows.iter().enumerate() {
                for l in 0..p {
                    s[(k, l)] = row.iter().map(|&(j, v)| v * minv_at[(j, l)]).sum();
                }
            }
            let s = (&s + s.transpose()) * 0.5;
            let sscale = (0..p).map(|i| s[(i, i)]).fold(0.0f64, f64::max);
            Some(cholesky_with_shift(s, 1e-13 * sscale)?.0)
        } else {
            None
        };
        Some(KktFactor {
            h,
            a,
            g,
            d: d.to_vec(),
            m_chol,
            minv_at,
            s_chol,
        })
    }

    fn solve_once(&self, r1: &[f64], r2: &[f64], r3: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.minv_at.nrows();
        let r3d: Vec<f64> = r3.iter().zip(&self.d).map(|(r, d)| r / d).collect();
        let mut f = r1.to_vec();
        self.g.tmul_add(&r3d, &mut f);
        let mut minv_f = DVector::from_vec(f.clone());
        self.m_chol.solve_mut(&mut minv_f);
        let (dx, dy) = match &self.s_chol {
            Some(s_chol) => {
                let mut rhs = DVector::from_vec(self.a.mul(minv_f.as_slice()));
                for (v, r) in rhs.iter_mut().zip(r2) {
                    *v -= r;
                }
                s_chol.solve_mut(&mut rhs);
                let dx = &minv_f - &self.minv_at * &rhs;
                (dx.as_slice().to_vec(), rhs.as_slice().to_vec())
            }
            None => (minv_f.as_slice().to_vec(), Vec::new()),
        };
        debug_assert_eq!(dx.len(), n);
        let gdx = self.g.mul(&dx);
        let dz = gdx.iter().zip(r3).zip(&self.d).map(|((g, r), d)| (g - r) / d).collect();
        (dx, dy, dz)
    }

    fn apply(&self, x: &[f64], y: &[f64], z: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut o1 = match self.h {
            Some(h) => (h * DVector::from_column_slice(x)).as_slice().to_vec(),
            None => vec![0.0; x.len()],
        };
        self.a.tmul_add(y, &mut o1);
        self.g.tmul_add(z, &mut o1);
        let o2 = self.a.mul(x);
        let o3 = self.g.mul(x).iter().zip(z).zip(&self.d).map(|((g, z), d)| g - d * z).collect();
        (o1, o2, o3)
    }

    /// Solve `K (x, y, z) = (r1, r2, r3)` with iterative refinement.
    pub fn solve(&self, r1: &[f64], r2: &[f64], r3: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (mut x, mut y, mut z) = self.solve_once(r1, r2, r3);
        let rnorm = norm_inf(r1).max(norm_inf(r2)).max(norm_inf(r3));
        let mut last = f64::INFINITY;
        for _ in 0..6 {
            let (k1, k2, k3) = self.apply(&x, &y, &z);
            let e1: Vec<f64> = r1.iter().zip(&k1).map(|(a, b)| a - b).collect();
            let e2: Vec<f64> = r2.iter().zip(&k2).map(|(a, b)| a - b).collect();
            let e3: Vec<f64> = r3.iter().zip(&k3).map(|(a, b)| a - b).collect();
            let err = norm_inf(&e1).max(norm_inf(&e2)).max(norm_inf(&e3));
            if err <= 1e-15 * (1.0 + rnorm) || err >= 0.5 * last {
                break;
            }
            last = err;
            let (cx, cy, cz) = self.solve_once(&e1, &e2, &e3);
            x.iter_mut().zip(&cx).for_each(|(a, b)| *a += b);
            y.iter_mut().zip(&cy).for_each(|(a, b)| *a += b);
            z.iter_mut().zip(&cz).for_each(|(a, b)| *a += b);
        }
        (x, y, z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kkt_solve_matches_dense() {
        let mut a = SparseRows::new(3);
        a.push(vec![(0, 1.0), (1, 1.0), (2, 1.0)]);
        let mut g = SparseRows::new(3);
        g.push(vec![(0, -1.0)]);
        g.push(vec![(1, -1.0)]);
        g.push(vec![(2, 2.0), (0, 1.0)]);
        let d = [0.5, 2.0, 1.5];
        let h = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.0, 0.0, 0.0, 0.0, 0.5]);
        let f = KktFactor::new(Some(&h), &a, &g, &d).unwrap();
        let (x, y, z) = f.solve(&[1.0, -2.0, 0.5], &[0.3], &[1.0, 0.0, -1.0]);
        let (o1, o2, o3) = f.apply(&x, &y, &z);
        for (o, r) in o1.iter().zip([1.0, -2.0, 0.5]) {
            assert!((o - r).abs() < 1e-12);
        }
        assert!((o2[0] - 0.3).abs() < 1e-12);
        for (o, r) in o3.iter().zip([1.0, 0.0, -1.0]) {
            assert!((o - r).abs() < 1e-12);
        }
    }
}

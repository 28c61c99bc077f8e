//! Small dense linear algebra for Jacobians of maps in dimension <= 10:
//! one-sided Jacobi singular values, LU determinants and solves, and
//! Gram-Schmidt frames. Everything is row-major `Vec<f64>` backed; sizes are
//! tiny, so clarity beats blocking.

use rand::Rng;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub a: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            a: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Mat {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.a[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Mat {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut a = Vec::with_capacity(r * c);
        for row in rows {
            debug_assert_eq!(row.len(), c);
            a.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, a }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * self.cols + j] = v;
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for l in 0..self.cols {
                let v = self.get(i, l);
                if v == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.a[i * other.cols + j] += v * other.get(l, j);
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        let mut y = vec![0.0; self.rows];
        for i in 0..self.rows {
            let mut s = 0.0;
            for j in 0..self.cols {
                s += self.get(i, j) * x[j];
            }
            y[i] = s;
        }
        y
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

// ---------------------------------------------------------------------------
// Singular values: one-sided Jacobi
// ---------------------------------------------------------------------------

/// Singular values of an arbitrary rows x cols matrix, sorted descending.
///
/// One-sided Jacobi: rotate column pairs of a working copy until all pairs
/// are numerically orthogonal; column norms are then the singular values.
/// Matrices here are at most 10x10, so the O(sweeps * c^2 * r) cost is
/// irrelevant and accuracy is excellent (pair orthogonality is driven below
/// 1e-14 relative).
pub fn singular_values(m: &Mat) -> Vec<f64> {
    // Work on the tall orientation so column count is minimal.
    let work = if m.rows >= m.cols {
        m.clone()
    } else {
        m.transpose()
    };
    let (r, c) = (work.rows, work.cols);
    let mut a = work.a;
    let col = |a: &Vec<f64>, j: usize, i: usize| a[i * c + j];

    let tol = 1e-15;
    for _sweep in 0..60 {
        let mut off = 0.0f64;
        for p in 0..c {
            for q in (p + 1)..c {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..r {
                    let x = col(&a, p, i);
                    let y = col(&a, q, i);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                let denom = (app * aqq).sqrt();
                if denom > 0.0 {
                    off = off.max(apq.abs() / denom);
                }
                if apq.abs() <= tol * denom {
                    continue;
                }
                // Jacobi rotation zeroing the (p,q) Gram entry.
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let cth = 1.0 / (1.0 + t * t).sqrt();
                let sth = cth * t;
                for i in 0..r {
                    let x = a[i * c + p];
                    let y = a[i * c + q];
                    a[i * c + p] = cth * x - sth * y;
                    a[i * c + q] = sth * x + cth * y;
                }
            }
        }
        if off < tol {
            break;
        }
    }

    let mut sv: Vec<f64> = (0..c)
        .map(|j| (0..r).map(|i| col(&a, j, i).powi(2)).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|x, y| y.partial_cmp(x).unwrap());
    sv
}

/// Product of the `k` largest singular values (the operator norm of the k-th
/// exterior power). `k = 0` gives 1; `k` beyond the rank gives 0-ish values
/// naturally.
pub fn top_k_sv_product(m: &Mat, k: usize) -> f64 {
    let sv = singular_values(m);
    sv.iter().take(k).product()
}

// ---------------------------------------------------------------------------
// LU: determinant and solve
// ---------------------------------------------------------------------------

/// Determinant via partially pivoted LU.
pub fn det(m: &Mat) -> f64 {
    assert_eq!(m.rows, m.cols);
    let n = m.rows;
    let mut a = m.a.clone();
    let mut sign = 1.0f64;
    let mut d = 1.0f64;
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in (col + 1)..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            sign = -sign;
        }
        let p = a[col * n + col];
        d *= p;
        for r in (col + 1)..n {
            let f = a[r * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= f * a[col * n + j];
            }
        }
    }
    sign * d
}

/// Solves `m x = b` for square well-conditioned `m`; returns None if the
/// pivot collapses.
pub fn solve(m: &Mat, b: &[f64]) -> Option<Vec<f64>> {
    assert_eq!(m.rows, m.cols);
    assert_eq!(m.rows, b.len());
    let n = m.rows;
    let mut a = m.a.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in (col + 1)..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return None;
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            x.swap(col, piv);
        }
        let p = a[col * n + col];
        for r in (col + 1)..n {
            let f = a[r * n + col] / p;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= f * a[col * n + j];
            }
            x[r] -= f * x[col];
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in (i + 1)..n {
            s -= a[i * n + j] * x[j];
        }
        x[i] = s / a[i * n + i];
    }
    Some(x)
}

// ---------------------------------------------------------------------------
// Frames and rotations
// ---------------------------------------------------------------------------

/// Gram-Schmidt orthonormalization of the columns of `m` (in place
/// semantics: returns a fresh matrix). Returns None when a column is
/// numerically dependent.
pub fn orthonormalize_columns(m: &Mat) -> Option<Mat> {
    let (r, c) = (m.rows, m.cols);
    let mut q = m.clone();
    for j in 0..c {
        for prev in 0..j {
            let mut dot = 0.0;
            for i in 0..r {
                dot += q.get(i, j) * q.get(i, prev);
            }
            for i in 0..r {
                let v = q.get(i, j) - dot * q.get(i, prev);
                q.set(i, j, v);
            }
        }
        let nrm = (0..r).map(|i| q.get(i, j).powi(2)).sum::<f64>().sqrt();
        if nrm < 1e-12 {
            return None;
        }
        for i in 0..r {
            let v = q.get(i, j) / nrm;
            q.set(i, j, v);
        }
    }
    Some(q)
}

/// Random n x k matrix with standard Gaussian entries.
pub fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in m.a.iter_mut() {
        // Box-Muller; rand's StandardNormal lives in rand_distr which we do
        // not need for anything else.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        *v = (-2.0 * u1.ln()).sqrt() * u2.cos();
    }
    m
}

/// Haar-ish random orthonormal n x k frame (columns).
pub fn random_frame<R: Rng>(rng: &mut R, n: usize, k: usize) -> Mat {
    loop {
        if let Some(q) = orthonormalize_columns(&gaussian_matrix(rng, n, k)) {
            return q;
        }
    }
}

/// Random rotation of R^n (orthonormal with determinant +1).
pub fn random_rotation<R: Rng>(rng: &mut R, n: usize) -> Mat {
    let mut q = random_frame(rng, n, n);
    if det(&q) < 0.0 {
        for i in 0..n {
            let v = -q.get(i, 0);
            q.set(i, 0, v);
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn assert_near(a: f64, b: f64, tol: f64, msg: &str) {
        assert!(
            (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs())),
            "{msg}: {a} vs {b}"
        );
    }

    #[test]
    fn singular_values_of_diagonal() {
        let m = Mat::from_rows(&[
            vec![3.0, 0.0, 0.0],
            vec![0.0, -5.0, 0.0],
            vec![0.0, 0.0, 2.0],
        ]);
        let sv = singular_values(&m);
        assert_near(sv[0], 5.0, 1e-12, "s1");
        assert_near(sv[1], 3.0, 1e-12, "s2");
        assert_near(sv[2], 2.0, 1e-12, "s3");
    }

    #[test]
    fn singular_values_match_gram_eigen_on_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(1..=6);
            let k = rng.gen_range(1..=6);
            let m = gaussian_matrix(&mut rng, n, k);
            let sv = singular_values(&m);
            // Check sum of squares equals Frobenius norm squared and the
            // product equals sqrt(det(M^T M)) when square.
            let fro2: f64 = m.a.iter().map(|v| v * v).sum();
            let sv2: f64 = sv.iter().map(|v| v * v).sum();
            assert_near(fro2, sv2, 1e-10, "frobenius");
            if n == k {
                let d = det(&m).abs();
                let p: f64 = sv.iter().product();
                assert_near(d, p, 1e-9, "det vs product");
            }
        }
    }

    #[test]
    fn singular_values_of_rank_deficient() {
        // Rank one, so the top singular value is the Frobenius norm.
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        let sv = singular_values(&m);
        assert_near(sv[0], 5.0, 1e-10, "s1");
        assert!(sv[1].abs() < 1e-12, "s2 should vanish, got {}", sv[1]);
    }

    #[test]
    fn det_and_solve() {
        let m = Mat::from_rows(&[
            vec![2.0, 1.0, 0.0],
            vec![1.0, 3.0, 1.0],
            vec![0.0, 1.0, 4.0],
        ]);
        assert_near(det(&m), 2.0 * (3.0 * 4.0 - 1.0) - 1.0 * 4.0, 1e-12, "det");
        let b = vec![1.0, 2.0, 3.0];
        let x = solve(&m, &b).unwrap();
        let back = m.matvec(&x);
        for i in 0..3 {
            assert_near(back[i], b[i], 1e-12, "solve residual");
        }
    }

    #[test]
    fn frames_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_frame(&mut rng, 5, 3);
        let g = f.transpose().matmul(&f);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_near(g.get(i, j), want, 1e-12, "gram");
            }
        }
        let rot = random_rotation(&mut rng, 4);
        assert_near(det(&rot), 1.0, 1e-10, "rotation det");
    }
}

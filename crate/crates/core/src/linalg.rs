//! Dense least-squares kernels.
//!
//! The EM M-step solves weighted problems whose weights can differ by ten
//! orders of magnitude, so everything goes through a column-pivoted
//! Householder QR of the row-scaled design. Rows are ordered by decreasing
//! weight before factoring, which keeps Householder QR accurate on stiff
//! weighted problems. Normal equations are never formed.

use nalgebra::DMatrix;

/// Columns (indices into the original design) that the pivoted factorization
/// judged linearly dependent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankDeficient {
    pub columns: Vec<usize>,
}

/// Householder QR with column pivoting, `A P = Q R`.
#[derive(Debug, Clone)]
pub struct PivotedQr {
    rows: usize,
    cols: usize,
    /// Column-major working copy; R lives in the upper triangle.
    a: Vec<f64>,
    /// Householder vectors, `reflectors[k]` acts on rows `k..rows`.
    reflectors: Vec<Vec<f64>>,
    tau: Vec<f64>,
    perm: Vec<usize>,
    rank: usize,
}

impl PivotedQr {
    /// Factor a column-major `rows x cols` matrix (requires `rows >= cols`).
    pub fn from_column_major(rows: usize, cols: usize, mut a: Vec<f64>) -> Self {
        assert_eq!(a.len(), rows * cols);
        assert!(rows >= cols, "least squares needs at least as many rows as columns");
        let mut perm: Vec<usize> = (0..cols).collect();
        let mut reflectors = Vec::with_capacity(cols);
        let mut tau = Vec::with_capacity(cols);
        let mut norms = vec![0.0; cols];

        for k in 0..cols {
            // Recompute trailing column norms exactly; p is small.
            for (j, nj) in norms.iter_mut().enumerate().skip(k) {
                let col = &a[j * rows + k..(j + 1) * rows];
                *nj = col.iter().map(|v| v * v).sum::<f64>();
            }
            let mut best = k;
            for j in k + 1..cols {
                if norms[j] > norms[best] {
                    best = j;
                }
            }
            if best != k {
                for i in 0..rows {
                    a.swap(k * rows + i, best * rows + i);
                }
                perm.swap(k, best);
                norms.swap(k, best);
            }

            let x = &a[k * rows + k..(k + 1) * rows];
            let norm = norms[k].sqrt();
            if norm == 0.0 {
                reflectors.push(vec![0.0; rows - k]);
                tau.push(0.0);
                continue;
            }
            let alpha = if x[0] >= 0.0 { -norm } else { norm };
            let mut v = x.to_vec();
            v[0] -= alpha;
            let vtv: f64 = v.iter().map(|t| t * t).sum();
            let t = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };

            for j in k + 1..cols {
                let col = &mut a[j * rows + k..(j + 1) * rows];
                let s = t * v.iter().zip(col.iter()).map(|(p, q)| p * q).sum::<f64>();
                for (c, vi) in col.iter_mut().zip(&v) {
                    *c -= s * vi;
                }
            }
            a[k * rows + k] = alpha;
            for i in k + 1..rows {
                a[k * rows + i] = 0.0;
            }
            reflectors.push(v);
            tau.push(t);
        }

        let r00 = if cols > 0 { a[0].abs() } else { 0.0 };
        let threshold = (rows.max(cols) as f64) * f64::EPSILON * r00;
        let mut rank = 0;
        while rank < cols && a[rank * rows + rank].abs() > threshold {
            rank += 1;
        }

        Self {
            rows,
            cols,
            a,
            reflectors,
            tau,
            perm,
            rank,
        }
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self::from_column_major(m.nrows(), m.ncols(), m.as_slice().to_vec())
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_full_rank(&self) -> bool {
        self.rank == self.cols
    }

    /// Original column indices beyond the numerical rank.
    pub fn deficient_columns(&self) -> Vec<usize> {
        let mut cols = self.perm[self.rank..].to_vec();
        cols.sort_unstable();
        cols
    }

    fn r(&self, i: usize, j: usize) -> f64 {
        self.a[j * self.rows + i]
    }

    /// Overwrites `b` with `Q^T b`.
    pub fn apply_qt(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.rows);
        for (k, (v, &t)) in self.reflectors.iter().zip(&self.tau).enumerate() {
            if t == 0.0 {
                continue;
            }
            let tail = &mut b[k..];
            let s = t * v.iter().zip(tail.iter()).map(|(p, q)| p * q).sum::<f64>();
            for (bi, vi) in tail.iter_mut().zip(v) {
                *bi -= s * vi;
            }
        }
    }

    /// Least-squares solution of `A x ~ b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, RankDeficient> {
        if !self.is_full_rank() {
            return Err(RankDeficient {
                columns: self.deficient_columns(),
            });
        }
        let mut c = b.to_vec();
        self.apply_qt(&mut c);
        let n = self.cols;
        let mut z = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = c[i];
            for j in i + 1..n {
                s -= self.r(i, j) * z[j];
            }
            z[i] = s / self.r(i, i);
        }
        let mut x = vec![0.0; n];
        for (k, &col) in self.perm.iter().enumerate() {
            x[col] = z[k];
        }
        Ok(x)
    }

    /// Solves `R^T z = P^T g`, so that `g^T (A^T A)^{-1} g = |z|^2`.
    pub fn rt_solve(&self, g: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.cols];
        self.rt_solve_into(g, &mut z);
        z
    }

    /// [`rt_solve`](Self::rt_solve) into a caller-owned buffer of length `cols`.
    pub fn rt_solve_into(&self, g: &[f64], z: &mut [f64]) {
        for i in 0..self.cols {
            let mut s = g[self.perm[i]];
            for (j, zj) in z.iter().enumerate().take(i) {
                s -= self.r(j, i) * zj;
            }
            z[i] = s / self.r(i, i);
        }
    }

    /// `(A^T A)^{-1} = P R^{-1} R^{-T} P^T`.
    pub fn gram_inverse(&self) -> Result<DMatrix<f64>, RankDeficient> {
        if !self.is_full_rank() {
            return Err(RankDeficient {
                columns: self.deficient_columns(),
            });
        }
        let n = self.cols;
        // Upper-triangular inverse of R, column by column.
        let mut rinv = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            rinv[(j, j)] = 1.0 / self.r(j, j);
            for i in (0..j).rev() {
                let mut s = 0.0;
                for k in i + 1..=j {
                    s += self.r(i, k) * rinv[(k, j)];
                }
                rinv[(i, j)] = -s / self.r(i, i);
            }
        }
        let inner = &rinv * rinv.transpose();
        let mut out = DMatrix::<f64>::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                out[(self.perm[a], self.perm[b])] = inner[(a, b)];
            }
        }
        Ok(out)
    }
}

/// Integer sort key that orders non-negative floats from largest to smallest.
/// Their IEEE bit patterns are monotone in the value, so flipping the bits
/// reverses the order.
pub(crate) fn descending_key(v: f64) -> u64 {
    debug_assert!(v >= 0.0 && !v.is_sign_negative(), "sort key needs a non-negative value, got {v}");
    !v.to_bits()
}

/// Row-scales `x` by `sqrt(weights)`, sorted by decreasing weight, and factors it.
/// Returns the factorization and the row order used, so right-hand sides can
/// be permuted the same way.
pub fn weighted_qr(x: &DMatrix<f64>, weights: &[f64]) -> (PivotedQr, Vec<usize>) {
    let (n, p) = x.shape();
    assert_eq!(weights.len(), n);
    let mut keyed: Vec<(u64, usize)> = weights.iter().map(|&w| descending_key(w)).zip(0..n).collect();
    // Ties keep data order, so the result is deterministic.
    keyed.sort_unstable();
    let order: Vec<usize> = keyed.into_iter().map(|(_, i)| i).collect();
    let mut a = vec![0.0; n * p];
    let xs = x.as_slice();
    for (dst, &src) in order.iter().enumerate() {
        let s = weights[src].sqrt();
        for j in 0..p {
            a[j * n + dst] = s * xs[j * n + src];
        }
    }
    (PivotedQr::from_column_major(n, p, a), order)
}

/// Minimizes `sum_i w_i (rhs_i - x_i' b)^2`.
pub fn weighted_least_squares(
    x: &DMatrix<f64>,
    weights: &[f64],
    rhs: &[f64],
) -> Result<Vec<f64>, RankDeficient> {
    let (qr, order) = weighted_qr(x, weights);
    let b: Vec<f64> = order.iter().map(|&i| weights[i].sqrt() * rhs[i]).collect();
    qr.solve(&b)
}

/// Gaussian elimination with partial pivoting for a small dense square
/// system given row-major. Returns `None` when a pivot vanishes relative to
/// the largest entry.
pub fn solve_square(a: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    let scale = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    let tol = 1e-12 * scale;
    for k in 0..n {
        let mut piv = k;
        for i in k + 1..n {
            if m[i * n + k].abs() > m[piv * n + k].abs() {
                piv = i;
            }
        }
        if m[piv * n + k].abs() <= tol {
            return None;
        }
        if piv != k {
            for j in 0..n {
                m.swap(k * n + j, piv * n + j);
            }
            x.swap(k, piv);
        }
        for i in k + 1..n {
            let f = m[i * n + k] / m[k * n + k];
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                m[i * n + j] -= f * m[k * n + j];
            }
            x[i] -= f * x[k];
        }
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= m[i * n + j] * x[j];
        }
        x[i] = s / m[i * n + i];
    }
    Some(x)
}

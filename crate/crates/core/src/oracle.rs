//! Direct minimizers of the summed check loss, used to validate the EM solver.
//!
//! The objective `sum_i rho_q(y_i - x_i' b)` is convex and piecewise linear, so
//! some minimizer interpolates `p` observations ("basic solution").
//! [`minimize_exact`] enumerates every basic solution for small problems;
//! [`minimize_search`] walks from vertex to vertex along descending edges and
//! scales to larger `p`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ald::{check_loss, total_check_loss, QuantileLevel};
use crate::data::Dataset;
use crate::em::ols_init;
use crate::error::{QremError, Result};
use crate::linalg::solve_square;

/// Largest problem [`minimize_exact`] will enumerate.
pub const EXACT_MAX_P: usize = 3;
pub const EXACT_MAX_N: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleMethod {
    VertexEnumeration,
    DerivativeFree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub beta: Vec<f64>,
    /// `sum rho_q(u_i)` recomputed at `beta`.
    pub objective: f64,
    pub method: OracleMethod,
    /// Every other basic solution whose objective is within `1e-9 n` of the
    /// optimum. Empty when the minimizer is unique among vertices.
    pub alternatives: Vec<Vec<f64>>,
    /// For one-column designs, the closed interval of optimal coefficients.
    pub tie_interval: Option<(f64, f64)>,
}

impl OracleResult {
    pub fn is_unique(&self) -> bool {
        self.alternatives.is_empty()
    }

    /// Largest coordinate-wise distance from `beta` to any reported optimal vertex.
    /// Only meaningful when the optimum is unique.
    pub fn coefficient_gap(&self, beta: &[f64]) -> f64 {
        crate::em::max_abs_diff(&self.beta, beta)
    }
}

fn tie_tolerance(n: usize) -> f64 {
    1e-9 * n as f64
}

/// Row-major copy of the design, for cache-friendly row access.
fn rows_of(data: &Dataset) -> Vec<f64> {
    let (n, p) = (data.n(), data.p());
    let x = data.x();
    let mut out = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..p {
            out.push(x[(i, j)]);
        }
    }
    out
}

fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Exhaustive search over all basic solutions. Requires `p <= 3` and `n <= 500`.
pub fn minimize_exact(data: &Dataset, q: QuantileLevel) -> Result<OracleResult> {
    let (n, p) = (data.n(), data.p());
    if p > EXACT_MAX_P || n > EXACT_MAX_N {
        return Err(QremError::UnsupportedSize { p, n });
    }
    let xr = rows_of(data);
    let y = data.y();
    let tol = tie_tolerance(n);

    // Visit rows in order of decreasing |OLS residual| so that poor candidates
    // overshoot the incumbent after only a few terms.
    let ols = ols_init(data)?;
    let u0 = data.residuals(&ols);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| u0[b].abs().total_cmp(&u0[a].abs()).then(a.cmp(&b)));

    let mut best = f64::INFINITY;
    let mut pool: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut a = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];
    let mut idx = vec![0usize; p];

    let consider = |beta: Vec<f64>, best: &mut f64, pool: &mut Vec<(f64, Vec<f64>)>| {
        let cutoff = *best + tol;
        let mut total = 0.0;
        for &i in &order {
            let fit: f64 = (0..p).map(|j| xr[i * p + j] * beta[j]).sum();
            total += check_loss(y[i] - fit, q);
            if total > cutoff {
                return;
            }
        }
        if total < *best {
            *best = total;
            let limit = total + tol;
            pool.retain(|(f, _)| *f <= limit);
        }
        pool.push((total, beta));
    };

    // Iterate over index tuples i0 < i1 < ... < i_{p-1}.
    for (k, slot) in idx.iter_mut().enumerate() {
        *slot = k;
    }
    loop {
        for (r, &i) in idx.iter().enumerate() {
            a[r * p..(r + 1) * p].copy_from_slice(&xr[i * p..(i + 1) * p]);
            rhs[r] = y[i];
        }
        if let Some(beta) = solve_square(&a, &rhs, p) {
            consider(beta, &mut best, &mut pool);
        }
        // advance to the next combination
        let mut k = p;
        loop {
            if k == 0 {
                return Ok(finish_exact(pool, best, tol, q, data));
            }
            k -= 1;
            if idx[k] < n - p + k {
                idx[k] += 1;
                for j in k + 1..p {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn finish_exact(
    pool: Vec<(f64, Vec<f64>)>,
    best: f64,
    tol: f64,
    q: QuantileLevel,
    data: &Dataset,
) -> OracleResult {
    let mut optimal: Vec<Vec<f64>> = pool
        .into_iter()
        .filter(|(f, _)| *f <= best + tol)
        .map(|(_, b)| b)
        .collect();
    optimal.sort_by(|a, b| {
        if lex_less(a, b) {
            std::cmp::Ordering::Less
        } else if lex_less(b, a) {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Equal
        }
    });
    optimal.dedup_by(|a, b| crate::em::max_abs_diff(a, b) <= 1e-12 * (1.0 + crate::em::max_abs(b)));
    let beta = optimal.remove(0);
    let tie_interval = (data.p() == 1).then(|| {
        let lo = beta[0];
        let hi = optimal.last().map_or(lo, |b| b[0]);
        (lo, hi)
    });
    let objective = total_check_loss(&data.residuals(&beta), q);
    OracleResult {
        beta,
        objective,
        method: OracleMethod::VertexEnumeration,
        alternatives: optimal,
        tie_interval,
    }
}

/// Vertex-to-vertex descent from an OLS-guided basis plus `restarts - 1`
/// random bases. The returned objective never exceeds the objective at OLS.
pub fn minimize_search(data: &Dataset, q: QuantileLevel, restarts: usize, seed: u64) -> Result<OracleResult> {
    if restarts < 1 {
        return Err(QremError::InvalidConfig("restarts must be at least 1".into()));
    }
    let (n, p) = (data.n(), data.p());
    let xr = rows_of(data);
    let y = data.y();
    let ols = ols_init(data)?;
    let u0 = data.residuals(&ols);

    let mut by_fit: Vec<usize> = (0..n).collect();
    by_fit.sort_by(|&a, &b| u0[a].abs().total_cmp(&u0[b].abs()).then(a.cmp(&b)));

    let starts: Vec<Option<Vec<usize>>> = (0..restarts)
        .map(|r| {
            if r == 0 {
                independent_rows(&xr, p, by_fit.iter().copied())
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(r as u64);
                let perm = sample(&mut rng, n, n).into_vec();
                independent_rows(&xr, p, perm.into_iter())
            }
        })
        .collect();

    let searcher = VertexSearch { xr: &xr, y, p, q };
    let mut best_beta = ols.clone();
    let mut best = total_check_loss(&u0, q);
    let results: Vec<(f64, Vec<f64>)> = starts
        .into_par_iter()
        .flatten()
        .map(|basis| searcher.descend(basis))
        .collect();
    for (f, beta) in results {
        if f < best {
            best = f;
            best_beta = beta;
        }
    }
    let objective = total_check_loss(&data.residuals(&best_beta), q);
    Ok(OracleResult {
        beta: best_beta,
        objective,
        method: OracleMethod::DerivativeFree,
        alternatives: Vec::new(),
        tie_interval: None,
    })
}

/// Greedily picks `p` rows with linearly independent design vectors.
fn independent_rows(xr: &[f64], p: usize, candidates: impl Iterator<Item = usize>) -> Option<Vec<usize>> {
    // Orthonormal basis of the span collected so far (Gram-Schmidt, twice).
    let mut q_basis: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut rows = Vec::with_capacity(p);
    for i in candidates {
        let row = &xr[i * p..(i + 1) * p];
        let norm0 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        let mut v = row.to_vec();
        for _ in 0..2 {
            for b in &q_basis {
                let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                for (vk, bk) in v.iter_mut().zip(b) {
                    *vk -= d * bk;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 * norm0 {
            v.iter_mut().for_each(|a| *a /= norm);
            q_basis.push(v);
            rows.push(i);
            if rows.len() == p {
                return Some(rows);
            }
        }
    }
    None
}

struct VertexSearch<'a> {
    xr: &'a [f64],
    y: &'a [f64],
    p: usize,
    q: QuantileLevel,
}

impl VertexSearch<'_> {
    fn row(&self, i: usize) -> &[f64] {
        &self.xr[i * self.p..(i + 1) * self.p]
    }

    fn solve_basis(&self, basis: &[usize]) -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
        let p = self.p;
        let mut a = Vec::with_capacity(p * p);
        let mut rhs = Vec::with_capacity(p);
        for &i in basis {
            a.extend_from_slice(self.row(i));
            rhs.push(self.y[i]);
        }
        let beta = solve_square(&a, &rhs, p)?;
        let mut dirs = Vec::with_capacity(p);
        for k in 0..p {
            let mut e = vec![0.0; p];
            e[k] = 1.0;
            dirs.push(solve_square(&a, &e, p)?);
        }
        Some((beta, dirs))
    }

    fn objective(&self, beta: &[f64]) -> f64 {
        let n = self.y.len();
        (0..n)
            .map(|i| {
                let fit: f64 = self.row(i).iter().zip(beta).map(|(a, b)| a * b).sum();
                check_loss(self.y[i] - fit, self.q)
            })
            .sum()
    }

    /// Runs edge descent from `basis` and returns the final vertex.
    fn descend(&self, mut basis: Vec<usize>) -> (f64, Vec<f64>) {
        let n = self.y.len();
        let qv = self.q.value();
        let Some((mut beta, mut dirs)) = self.solve_basis(&basis) else {
            return (f64::INFINITY, Vec::new());
        };
        let mut current = self.objective(&beta);
        let max_steps = 50 * n + 100;
        let mut in_basis = vec![false; n];
        for &i in &basis {
            in_basis[i] = true;
        }

        for _ in 0..max_steps {
            let u: Vec<f64> = (0..n)
                .map(|i| self.y[i] - self.row(i).iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let scale = 1e-12 * (1.0 + u.iter().fold(0.0f64, |m, v| m.max(v.abs())));

            // Steepest edge among the 2p candidates.
            let mut choice: Option<(f64, usize, f64)> = None;
            for (k, d) in dirs.iter().enumerate() {
                let a: Vec<f64> = (0..n)
                    .map(|i| self.row(i).iter().zip(d).map(|(x, v)| x * v).sum())
                    .collect();
                for sign in [1.0, -1.0] {
                    let mut slope = 0.0;
                    for i in 0..n {
                        let ai = sign * a[i];
                        if in_basis[i] || u[i].abs() <= scale {
                            slope += if ai > 0.0 { ai * (1.0 - qv) } else { -ai * qv };
                        } else if u[i] > 0.0 {
                            slope -= ai * qv;
                        } else {
                            slope += ai * (1.0 - qv);
                        }
                    }
                    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let rate = slope / norm;
                    if rate < -1e-12 && choice.is_none_or(|(r, _, _)| rate < r) {
                        choice = Some((rate, k, sign));
                    }
                }
            }
            let Some((_, k, sign)) = choice else { break };

            // Exact line search along beta + t * sign * d_k, t > 0.
            let d: Vec<f64> = dirs[k].iter().map(|v| sign * v).collect();
            let a: Vec<f64> = (0..n)
                .map(|i| self.row(i).iter().zip(&d).map(|(x, v)| x * v).sum())
                .collect();
            let mut slope = 0.0;
            let mut breaks: Vec<(f64, usize)> = Vec::new();
            for i in 0..n {
                let ai = a[i];
                if in_basis[i] || u[i].abs() <= scale {
                    slope += if ai > 0.0 { ai * (1.0 - qv) } else { -ai * qv };
                } else {
                    if u[i] > 0.0 {
                        slope -= ai * qv;
                    } else {
                        slope += ai * (1.0 - qv);
                    }
                    if ai != 0.0 {
                        let t = u[i] / ai;
                        if t > 0.0 {
                            breaks.push((t, i));
                        }
                    }
                }
            }
            breaks.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            let mut entering = None;
            for &(_, i) in &breaks {
                slope += a[i].abs();
                if slope >= 0.0 {
                    entering = Some(i);
                    break;
                }
            }
            // Unbounded descent cannot happen for a check loss with n > p rows.
            let Some(entering) = entering else { break };

            let mut trial = basis.clone();
            trial[k] = entering;
            let Some((b2, d2)) = self.solve_basis(&trial) else { break };
            let f2 = self.objective(&b2);
            if f2 >= current - 1e-15 * (1.0 + current.abs()) {
                break;
            }
            in_basis[basis[k]] = false;
            in_basis[entering] = true;
            basis = trial;
            beta = b2;
            dirs = d2;
            current = f2;
        }
        (current, beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn ql(q: f64) -> QuantileLevel {
        QuantileLevel::new(q).unwrap()
    }

    /// Independent scan: the optimal intercept for an intercept-only model is
    /// an order statistic, so minimize over all of them.
    fn scan_order_statistics(y: &[f64], q: QuantileLevel) -> (f64, f64) {
        let mut best = f64::INFINITY;
        let mut arg = f64::NAN;
        for &c in y {
            let f: f64 = y.iter().map(|v| check_loss(v - c, q)).sum();
            if f < best {
                best = f;
                arg = c;
            }
        }
        (arg, best)
    }

    #[test]
    fn odd_median() {
        let y = vec![3.0, -1.0, 7.5, 2.0, 4.0];
        let ds = Dataset::builder(y).build().unwrap();
        let r = minimize_exact(&ds, ql(0.5)).unwrap();
        assert_eq!(r.beta, vec![3.0]);
        assert!(r.is_unique());
        assert_eq!(r.tie_interval, Some((3.0, 3.0)));
    }

    #[test]
    fn intercept_only_matches_order_statistic_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &n in &[9usize, 20, 33] {
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 10.0).collect();
            let ds = Dataset::builder(y.clone()).build().unwrap();
            for qv in [0.1, 0.25, 0.5, 0.8] {
                let q = ql(qv);
                let r = minimize_exact(&ds, q).unwrap();
                let (_, best) = scan_order_statistics(&y, q);
                assert_relative_eq!(r.objective, best, epsilon = 1e-9);
                let (lo, hi) = r.tie_interval.unwrap();
                let mut s = y.clone();
                s.sort_by(f64::total_cmp);
                let k = (n as f64 * qv).ceil() as usize;
                if (n as f64 * qv).fract() == 0.0 {
                    // nq integral: every point between the kth and (k+1)th order statistics
                    assert_relative_eq!(lo, s[k - 1]);
                    assert_relative_eq!(hi, s[k]);
                } else {
                    assert_eq!((lo, hi), (s[k - 1], s[k - 1]));
                }
            }
        }
    }

    #[test]
    fn two_points_are_interpolated() {
        let ds = Dataset::builder(vec![1.0, 3.0, 2.0])
            .continuous("x", vec![0.0, 1.0, 0.5])
            .build()
            .unwrap();
        let r = minimize_exact(&ds, ql(0.5)).unwrap();
        assert!(r.objective.abs() < 1e-12);
        assert_relative_eq!(r.beta[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(r.beta[1], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_large_problems() {
        let n = 12;
        let cols: Vec<Vec<f64>> = (0..4).map(|j| (0..n).map(|i| ((i * (j + 3)) % 7) as f64 + (i * i) as f64 * 0.01 * (j + 1) as f64).collect()).collect();
        let mut b = Dataset::builder((0..n).map(|i| i as f64).collect());
        for (j, c) in cols.into_iter().enumerate() {
            b = b.continuous(&format!("x{j}"), c);
        }
        let ds = b.build().unwrap();
        assert!(matches!(minimize_exact(&ds, ql(0.5)), Err(QremError::UnsupportedSize { p: 5, .. })));
    }

    fn random_line(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let y: Vec<f64> = x
            .iter()
            .zip(&x2)
            .map(|(a, b)| 1.0 + 2.0 * a - b + (rng.random::<f64>() - 0.5) * (1.0 + a))
            .collect();
        Dataset::builder(y).continuous("x", x).continuous("x2", x2).build().unwrap()
    }

    #[test]
    fn search_agrees_with_enumeration() {
        for seed in 0..6 {
            let ds = random_line(41, seed);
            for qv in [0.1, 0.5, 0.77] {
                let exact = minimize_exact(&ds, ql(qv)).unwrap();
                let search = minimize_search(&ds, ql(qv), 3, seed).unwrap();
                assert!(
                    (exact.objective - search.objective).abs() <= 1e-6,
                    "seed {seed} q {qv}: {} vs {}",
                    exact.objective,
                    search.objective
                );
            }
        }
    }

    #[test]
    fn search_on_interpolable_data_reaches_zero() {
        let x: Vec<f64> = (0..15).map(|i| i as f64 * 0.3).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
        let ds = Dataset::builder(y).continuous("x", x).build().unwrap();
        let r = minimize_search(&ds, ql(0.3), 1, 0).unwrap();
        assert!(r.objective < 1e-12);
    }

    #[test]
    fn search_never_worse_than_ols() {
        let ds = random_line(60, 99);
        let q = ql(0.9);
        let ols = total_check_loss(&ds.residuals(&ols_init(&ds).unwrap()), q);
        let r = minimize_search(&ds, q, 1, 1).unwrap();
        assert!(r.objective <= ols);
        assert_eq!(r.method, OracleMethod::DerivativeFree);
    }
}

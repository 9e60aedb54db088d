//! Numerical helpers shared by the integration tests. They are written
//! independently of the library so they can serve as oracles.

#![allow(dead_code)]

use std::path::Path;

use qrem::Dataset;

#[allow(clippy::too_many_arguments)]
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson quadrature on `[a, b]`, pre-split into `pieces` panels.
pub fn integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let pieces = 64;
    let h = (b - a) / pieces as f64;
    (0..pieces)
        .map(|k| {
            let (lo, hi) = (a + k as f64 * h, a + (k + 1) as f64 * h);
            let (fa, fm, fb) = (f(lo), f(0.5 * (lo + hi)), f(hi));
            let whole = (hi - lo) / 6.0 * (fa + 4.0 * fm + fb);
            simpson(&f, lo, hi, fa, fm, fb, whole, tol / pieces as f64, 40)
        })
        .sum()
}

/// Writes the response and continuous columns of `data` (and its cluster
/// labels, if any) to a CSV file.
pub fn write_csv(data: &Dataset, path: &Path) {
    let names = data.column_names();
    let cols: Vec<usize> = (0..data.p()).filter(|&j| names[j] != "(Intercept)").collect();
    let mut w = csv::Writer::from_path(path).unwrap();
    let mut header = vec!["y".to_string()];
    header.extend(cols.iter().map(|&j| names[j].clone()));
    if data.clusters().is_some() {
        header.push("subject".into());
    }
    w.write_record(&header).unwrap();
    for i in 0..data.n() {
        let mut row = vec![format!("{:e}", data.y()[i])];
        row.extend(cols.iter().map(|&j| format!("{:e}", data.x()[(i, j)])));
        if let Some(c) = data.clusters() {
            row.push(c.labels()[c.index()[i]].clone());
        }
        w.write_record(&row).unwrap();
    }
    w.flush().unwrap();
}

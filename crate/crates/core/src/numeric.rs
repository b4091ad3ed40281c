//! Small dense linear-algebra and summation helpers.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut acc = KahanSum::new();
    for &x in xs {
        acc.add(x);
    }
    acc.total() / xs.len() as f64
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cholesky factorisation of a symmetric positive-definite `n x n` matrix
/// stored row-major. Returns the lower factor, or `None` if a pivot is not
/// strictly positive.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solves the square system `a x = b` by Gaussian elimination with partial
/// pivoting. Returns `None` when a pivot is numerically zero.
pub fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if !(scale > 0.0) {
        return None;
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs()))?;
        if a[pivot * n + col].abs() <= 1e-13 * scale {
            return None;
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            b.swap(col, pivot);
        }
        for r in col + 1..n {
            let factor = a[r * n + col] / a[col * n + col];
            if factor != 0.0 {
                for j in col..n {
                    a[r * n + j] -= factor * a[col * n + j];
                }
                b[r] -= factor * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let tail: f64 = (r + 1..n).map(|j| a[r * n + j] * x[j]).sum();
        x[r] = (b[r] - tail) / a[r * n + r];
    }
    Some(x)
}

/// Solves `L L^T x = b` given the lower Cholesky factor.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Ordinary least squares `min |X b - y|^2` via the normal equations, with a
/// ridge jitter retry on singular Gram matrices.
pub fn least_squares(x: &[f64], n_rows: usize, n_cols: usize, y: &[f64], jitter: f64) -> Option<Vec<f64>> {
    let mut gram = vec![0.0; n_cols * n_cols];
    let mut rhs = vec![0.0; n_cols];
    for r in 0..n_rows {
        let row = &x[r * n_cols..(r + 1) * n_cols];
        for i in 0..n_cols {
            rhs[i] += row[i] * y[r];
            for j in 0..=i {
                gram[i * n_cols + j] += row[i] * row[j];
            }
        }
    }
    for i in 0..n_cols {
        for j in 0..i {
            gram[j * n_cols + i] = gram[i * n_cols + j];
        }
    }
    let l = match cholesky(&gram, n_cols) {
        Some(l) => l,
        None => {
            let scale = (0..n_cols).map(|i| gram[i * n_cols + i]).fold(1.0_f64, f64::max);
            for i in 0..n_cols {
                gram[i * n_cols + i] += jitter * scale;
            }
            cholesky(&gram, n_cols)?
        }
    };
    let sol = cholesky_solve(&l, n_cols, &rhs);
    sol.iter().all(|v| v.is_finite()).then_some(sol)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn max_eigenvalue_psd(a: &[f64], n: usize) -> f64 {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    let mut w = vec![0.0; n];
    for _ in 0..64 {
        for i in 0..n {
            w[i] = dot(&a[i * n..(i + 1) * n], &v);
        }
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        for i in 0..n {
            v[i] = w[i] / norm;
        }
        let next = norm;
        if (next - lambda).abs() <= 1e-12 * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Fits `y ≈ c0 + c1 x + c2 x^2` and returns the coefficients and R².
pub fn quadratic_fit(xs: &[f64], ys: &[f64]) -> Option<([f64; 3], f64)> {
    let n = xs.len();
    let mut design = Vec::with_capacity(3 * n);
    for &x in xs {
        design.extend_from_slice(&[1.0, x, x * x]);
    }
    let coef = least_squares(&design, n, 3, ys, 0.0)?;
    let m = mean(ys);
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        let fit = coef[0] + coef[1] * x + coef[2] * x * x;
        ss_res += (y - fit) * (y - fit);
        ss_tot += (y - m) * (y - m);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Some(([coef[0], coef[1], coef[2]], r2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_recovers_small_terms() {
        let mut acc = KahanSum::new();
        acc.add(1e16);
        for _ in 0..1000 {
            acc.add(1.0);
        }
        acc.add(-1e16);
        assert_eq!(acc.total(), 1000.0);
    }

    #[test]
    fn least_squares_exact_line() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut design = Vec::new();
        let mut y = Vec::new();
        for &x in &xs {
            design.extend_from_slice(&[1.0, x]);
            y.push(2.0 * x + 1.0);
        }
        let b = least_squares(&design, 10, 2, &y, 1e-8).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-9 && (b[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn power_iteration_diagonal() {
        let a = [3.0, 0.0, 0.0, 0.0, 7.0, 0.0, 0.0, 0.0, 1.0];
        assert!((max_eigenvalue_psd(&a, 3) - 7.0).abs() < 1e-9);
    }

    #[test]
    fn quadratic_fit_is_exact_on_parabola() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 * x * x - 0.25 * x + 3.0).collect();
        let (c, r2) = quadratic_fit(&xs, &ys).unwrap();
        assert!((c[2] - 0.5).abs() < 1e-9 && (c[1] + 0.25).abs() < 1e-9);
        assert!(r2 > 1.0 - 1e-12);
    }

    #[test]
    fn dense_solve_needs_pivoting() {
        let mut a = vec![0.0, 1.0, 1.0, 1.0];
        let mut b = vec![2.0, 3.0];
        let x = solve_dense(&mut a, &mut b, 2).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 2.0).abs() < 1e-12);
        let mut singular = vec![1.0, 2.0, 2.0, 4.0];
        assert!(solve_dense(&mut singular, &mut [1.0, 1.0], 2).is_none());
    }
}

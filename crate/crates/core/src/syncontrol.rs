//! Synthetic-control counterfactuals.
//!
//! For one (OD, interval) cell the counterfactual flow of the treated day is
//! a convex combination of the same cell on donor days. Donor weights `W`
//! minimise the V-weighted distance between the donors' covariates and the
//! treated day's covariates over the probability simplex; the positive
//! diagonal `V` is chosen to minimise the reconstruction error of the treated
//! day's pre-period flows.
//!
//! The inner problem is solved exactly as a minimum-norm-point problem over
//! the convex hull of the V-scaled donor offsets; the outer problem by
//! Nelder–Mead over `log V` restarted from the identity and from seeded
//! random points.

use alloc::vec;
use alloc::vec::Vec;
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{self, IncidentRecord, OdPanel};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Pre-period length used to choose V.
    pub t_pre: usize,
    pub inner_max_iter: usize,
    /// Stop the inner solve once no donor can lower the squared objective by more.
    pub inner_tol: f64,
    /// Random Nelder–Mead restarts in addition to the identity start.
    pub outer_restarts: usize,
    /// Objective evaluations allowed per Nelder–Mead run.
    pub outer_max_evals: usize,
    /// z-score covariates over donors before matching.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            t_pre: 2,
            inner_max_iter: 10_000,
            inner_tol: 1e-10,
            outer_restarts: 3,
            outer_max_evals: 120,
            standardize: true,
            seed: 0,
        }
    }
}

/// Donor days and the treated day for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DonorSet {
    n_donors: usize,
    d: usize,
    t: usize,
    /// `A`, row-major `(n_donors, d)`.
    covariates: Vec<f64>,
    outcomes: Vec<f64>,
    /// `X`, row-major `(t, n_donors)`.
    pre_outcomes: Vec<f64>,
    target_covariates: Vec<f64>,
    target_pre_outcomes: Vec<f64>,
}

impl DonorSet {
    pub fn new(
        donor_covariates: Vec<Vec<f64>>,
        donor_outcomes: Vec<f64>,
        donor_pre_outcomes: Vec<Vec<f64>>,
        target_covariates: Vec<f64>,
        target_pre_outcomes: Vec<f64>,
    ) -> Result<Self> {
        let n_donors = donor_covariates.len();
        if n_donors == 0 {
            return Err(Error::InsufficientDonors { available: 0, required: 1 });
        }
        let d = target_covariates.len();
        let t = target_pre_outcomes.len();
        if d == 0 || t == 0 {
            return Err(Error::domain("covariate dimension and pre-period length must be >= 1"));
        }
        if donor_outcomes.len() != n_donors {
            return Err(Error::Shape { expected: n_donors, got: donor_outcomes.len() });
        }
        if donor_pre_outcomes.len() != t {
            return Err(Error::Shape { expected: t, got: donor_pre_outcomes.len() });
        }
        let mut covariates = Vec::with_capacity(n_donors * d);
        for row in &donor_covariates {
            if row.len() != d {
                return Err(Error::Shape { expected: d, got: row.len() });
            }
            covariates.extend_from_slice(row);
        }
        let mut pre_outcomes = Vec::with_capacity(t * n_donors);
        for row in &donor_pre_outcomes {
            if row.len() != n_donors {
                return Err(Error::Shape { expected: n_donors, got: row.len() });
            }
            pre_outcomes.extend_from_slice(row);
        }
        let finite = covariates
            .iter()
            .chain(&donor_outcomes)
            .chain(&pre_outcomes)
            .chain(&target_covariates)
            .chain(&target_pre_outcomes)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::domain("donor set contains non-finite values"));
        }
        Ok(Self {
            n_donors,
            d,
            t,
            covariates,
            outcomes: donor_outcomes,
            pre_outcomes,
            target_covariates,
            target_pre_outcomes,
        })
    }

    pub fn n_donors(&self) -> usize {
        self.n_donors
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn pre_len(&self) -> usize {
        self.t
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn donor_covariates(&self, i: usize) -> &[f64] {
        &self.covariates[i * self.d..(i + 1) * self.d]
    }

    pub fn target_covariates(&self) -> &[f64] {
        &self.target_covariates
    }

    /// Copy with every covariate dimension z-scored over the donors. A
    /// dimension that is constant across donors is only centred.
    pub fn standardized(&self) -> DonorSet {
        let mut out = self.clone();
        let n = self.n_donors as f64;
        for j in 0..self.d {
            let mean = (0..self.n_donors).map(|i| self.covariates[i * self.d + j]).sum::<f64>() / n;
            let var = (0..self.n_donors)
                .map(|i| {
                    let z = self.covariates[i * self.d + j] - mean;
                    z * z
                })
                .sum::<f64>()
                / n;
            let sd = var.sqrt();
            let scale = if sd > 1e-12 * (1.0 + mean.abs()) { sd } else { 1.0 };
            for i in 0..self.n_donors {
                let c = &mut out.covariates[i * self.d + j];
                *c = (*c - mean) / scale;
            }
            out.target_covariates[j] = (self.target_covariates[j] - mean) / scale;
        }
        out
    }

    /// `|X W - X0|_2`.
    pub fn pre_period_error(&self, weights: &[f64]) -> f64 {
        let mut acc = 0.0;
        for s in 0..self.t {
            let row = &self.pre_outcomes[s * self.n_donors..(s + 1) * self.n_donors];
            let fit: f64 = row.iter().zip(weights).map(|(x, w)| x * w).sum();
            let r = fit - self.target_pre_outcomes[s];
            acc += r * r;
        }
        acc.sqrt()
    }

    /// V-norm of `a - W A`.
    pub fn covariate_distance(&self, weights: &[f64], v_diag: &[f64]) -> f64 {
        let mut acc = 0.0;
        for j in 0..self.d {
            let synth: f64 = (0..self.n_donors).map(|i| weights[i] * self.covariates[i * self.d + j]).sum();
            let r = self.target_covariates[j] - synth;
            acc += v_diag[j] * r * r;
        }
        acc.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFit {
    pub weights: Vec<f64>,
    pub v_diag: Vec<f64>,
    pub inner_objective: f64,
    pub outer_objective: f64,
    pub counterfactual: f64,
}

/// Exact solver for `min_W |a - W A|_V^2` over the simplex.
///
/// With `P_i = V^1/2 (A_i - a)` the weighted residual of `W` is `sum_i w_i P_i`,
/// so the problem is the minimum-norm point of the convex hull of the `P_i`.
/// Wolfe's active-set method finds it exactly, keeping an affinely
/// independent working set ("corral") of at most `d + 1` donors. When the
/// minimiser is not unique, the least-norm optimal weights are returned.
struct InnerSolver<'a> {
    donors: &'a DonorSet,
    max_iter: usize,
    tol: f64,
    points: Vec<f64>,
    norms: Vec<f64>,
}

impl<'a> InnerSolver<'a> {
    fn new(donors: &'a DonorSet, max_iter: usize, tol: f64) -> Self {
        Self {
            donors,
            max_iter,
            tol,
            points: vec![0.0; donors.n_donors * donors.d],
            norms: vec![0.0; donors.n_donors],
        }
    }

    fn point(&self, i: usize) -> &[f64] {
        let d = self.donors.d;
        &self.points[i * d..(i + 1) * d]
    }

    fn solve(&mut self, v: &[f64]) -> (Vec<f64>, f64) {
        let donors = self.donors;
        let n = donors.n_donors;
        let d = donors.d;
        let sqrt_v: Vec<f64> = v.iter().map(|x| x.sqrt()).collect();
        for (i, row) in donors.covariates.chunks_exact(d).enumerate() {
            let p = &mut self.points[i * d..(i + 1) * d];
            for j in 0..d {
                p[j] = sqrt_v[j] * (row[j] - donors.target_covariates[j]);
            }
            self.norms[i] = p.iter().map(|x| x * x).sum();
        }
        let scale = self.norms.iter().copied().fold(0.0_f64, f64::max);
        let gap_tol = (0.5 * self.tol).max(1e-13 * scale);

        let start = argmin(&self.norms);
        let mut corral = vec![start];
        let mut lambda = vec![1.0];
        let mut x = self.point(start).to_vec();
        for _ in 0..self.max_iter {
            let xx: f64 = x.iter().map(|c| c * c).sum();
            if xx <= gap_tol {
                break;
            }
            let dots: Vec<f64> = (0..n).map(|i| crate::numeric::dot(&x, self.point(i))).collect();
            let j = argmin(&dots);
            // Frank-Wolfe gap of the squared objective, halved.
            if xx - dots[j] <= gap_tol || corral.contains(&j) {
                break;
            }
            corral.push(j);
            lambda.push(0.0);
            loop {
                let Some(alpha) = self.affine_minimizer(&corral) else {
                    // Numerically dependent corral: drop the entering point.
                    corral.pop();
                    lambda.pop();
                    return self.finish(&corral, &lambda, v);
                };
                if alpha.iter().all(|&a| a > 0.0) {
                    lambda = alpha;
                    break;
                }
                let theta = lambda
                    .iter()
                    .zip(&alpha)
                    .filter(|(_, &a)| a <= 0.0)
                    .map(|(&l, &a)| l / (l - a))
                    .fold(1.0_f64, f64::min);
                let mut leaving = 0;
                let mut smallest = f64::INFINITY;
                for (k, (l, a)) in lambda.iter_mut().zip(&alpha).enumerate() {
                    *l += theta * (a - *l);
                    if *a <= 0.0 && *l < smallest {
                        smallest = *l;
                        leaving = k;
                    }
                }
                lambda[leaving] = 0.0;
                let mut k = 0;
                corral.retain(|_| {
                    let keep = lambda[k] > 0.0;
                    k += 1;
                    keep
                });
                lambda.retain(|&l| l > 0.0);
                let total: f64 = lambda.iter().sum();
                lambda.iter_mut().for_each(|l| *l /= total);
            }
            x.iter_mut().for_each(|c| *c = 0.0);
            for (&i, &l) in corral.iter().zip(&lambda) {
                for (c, p) in x.iter_mut().zip(self.point(i)) {
                    *c += l * p;
                }
            }
        }
        self.finish(&corral, &lambda, v)
    }

    /// Affine combination of the corral points with minimum norm.
    fn affine_minimizer(&self, corral: &[usize]) -> Option<Vec<f64>> {
        let k = corral.len();
        if k == 1 {
            return Some(vec![1.0]);
        }
        // Minimise |P_0 + sum_m beta_m (P_m - P_0)| over free beta.
        let d = self.donors.d;
        let base = self.point(corral[0]);
        let m = k - 1;
        let mut diffs = vec![0.0; m * d];
        for (r, &i) in corral[1..].iter().enumerate() {
            for (c, (p, b)) in self.point(i).iter().zip(base).enumerate() {
                diffs[r * d + c] = p - b;
            }
        }
        let mut gram = vec![0.0; m * m];
        let mut rhs = vec![0.0; m];
        for r in 0..m {
            let dr = &diffs[r * d..(r + 1) * d];
            for c in 0..m {
                gram[r * m + c] = crate::numeric::dot(dr, &diffs[c * d..(c + 1) * d]);
            }
            rhs[r] = -crate::numeric::dot(dr, base);
        }
        let beta = crate::numeric::solve_dense(&mut gram, &mut rhs, m)?;
        let mut alpha = Vec::with_capacity(k);
        alpha.push(1.0 - beta.iter().sum::<f64>());
        alpha.extend(beta);
        Some(alpha)
    }

    fn finish(&self, corral: &[usize], lambda: &[f64], v: &[f64]) -> (Vec<f64>, f64) {
        let mut w = vec![0.0; self.donors.n_donors];
        for (&i, &l) in corral.iter().zip(lambda) {
            w[i] = l;
        }
        let obj = self.donors.covariate_distance(&w, v);
        if let Some(spread) = self.min_norm_weights(&w, corral.len()) {
            let spread_obj = self.donors.covariate_distance(&spread, v);
            let slack = 1e-9 * (1.0 + self.norms.iter().copied().fold(0.0_f64, f64::max));
            if spread_obj * spread_obj <= obj * obj + slack {
                return (spread, spread_obj);
            }
        }
        (w, obj)
    }

    /// Among all optimal weights, the one of least Euclidean norm (the limit
    /// of projected gradient from uniform weights).
    ///
    /// Solves `min |w|^2/2` s.t. `sum w_i P_i = x*`, `sum w_i = 1`, `w >= 0`
    /// through its `d + 1` dimensional dual: `w = max(0, M^T l)` with
    /// `M = [P; 1]`, maximised by damped Newton. A tiny ridge on `l`
    /// absorbs the rounding in `x*`.
    fn min_norm_weights(&self, w_star: &[f64], support: usize) -> Option<Vec<f64>> {
        let n = self.donors.n_donors;
        let d = self.donors.d;
        let k = d + 1;
        let mut target = vec![0.0; k];
        for (i, &wi) in w_star.iter().enumerate() {
            for (t, p) in target.iter_mut().zip(self.point(i)) {
                *t += wi * p;
            }
        }
        target[d] = 1.0;
        let scale = 1.0 + self.norms.iter().copied().fold(0.0_f64, f64::max);
        // Optimal weights live on the face of donors supporting `x*`.
        let xx = crate::numeric::dot(&target[..d], &target[..d]);
        let face: Vec<usize> = (0..n)
            .filter(|&i| crate::numeric::dot(&target[..d], self.point(i)) - xx <= 1e-9 * scale)
            .collect();
        if face.len() <= support {
            return None;
        }
        let mut cols = vec![1.0; face.len() * k];
        for (c, &i) in cols.chunks_exact_mut(k).zip(&face) {
            c[..d].copy_from_slice(self.point(i));
        }
        let ridge = 1e-12 * scale;
        let dual = |l: &[f64]| -> f64 {
            let mut value = crate::numeric::dot(&target, l) - 0.5 * ridge * crate::numeric::dot(l, l);
            for m in cols.chunks_exact(k) {
                let s = crate::numeric::dot(m, l);
                if s > 0.0 {
                    value -= 0.5 * s * s;
                }
            }
            value
        };
        let n = face.len();

        let mut l = vec![0.0; k];
        l[d] = 1.0 / n as f64;
        let mut grad = vec![0.0; k];
        let mut hess = vec![0.0; k * k];
        let mut active = vec![false; n];
        let mut value = dual(&l);
        for iter in 0..100 {
            grad.copy_from_slice(&target);
            hess.iter_mut().for_each(|h| *h = 0.0);
            for (g, li) in grad.iter_mut().zip(&l) {
                *g -= ridge * li;
            }
            for r in 0..k {
                hess[r * k + r] = ridge;
            }
            let mut changed = iter == 0;
            for (i, m) in cols.chunks_exact(k).enumerate() {
                let s = crate::numeric::dot(m, &l);
                changed |= active[i] != (s > 0.0);
                active[i] = s > 0.0;
                if s <= 0.0 {
                    continue;
                }
                for r in 0..k {
                    grad[r] -= s * m[r];
                    for c in 0..k {
                        hess[r * k + c] += m[r] * m[c];
                    }
                }
            }
            // The dual is quadratic on each active pattern, so a full Newton
            // step that keeps the pattern lands on the optimum.
            if !changed || grad.iter().fold(0.0_f64, |a, g| a.max(g.abs())) <= 1e-13 * scale {
                break;
            }
            let mut rhs = grad.clone();
            let step = crate::numeric::solve_dense(&mut hess, &mut rhs, k)?;
            let slope = crate::numeric::dot(&grad, &step);
            let mut t = 1.0;
            loop {
                let trial: Vec<f64> = l.iter().zip(&step).map(|(l0, s)| l0 + t * s).collect();
                let v = dual(&trial);
                if v >= value + 1e-4 * t * slope {
                    value = v;
                    l = trial;
                    break;
                }
                t *= 0.5;
                if t < 1e-12 {
                    return None;
                }
            }
        }

        let mut w = vec![0.0; self.donors.n_donors];
        for (m, &i) in cols.chunks_exact(k).zip(&face) {
            w[i] = crate::numeric::dot(m, &l).max(0.0);
        }
        let total: f64 = w.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return None;
        }
        w.iter_mut().for_each(|x| *x /= total);
        Some(w)
    }
}

/// Index of the smallest value; the lowest index wins ties.
fn argmin(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x < xs[best] {
            best = i;
        }
    }
    best
}

pub fn solve_weights(donors: &DonorSet, v_diag: &[f64]) -> Result<(Vec<f64>, f64)> {
    solve_weights_with(donors, v_diag, &SynthConfig::default())
}

pub fn solve_weights_with(donors: &DonorSet, v_diag: &[f64], config: &SynthConfig) -> Result<(Vec<f64>, f64)> {
    if v_diag.len() != donors.d {
        return Err(Error::Shape { expected: donors.d, got: v_diag.len() });
    }
    if v_diag.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::domain("v_diag entries must be finite and strictly positive"));
    }
    let mut solver = InnerSolver::new(donors, config.inner_max_iter, config.inner_tol);
    Ok(solver.solve(v_diag))
}

/// Bound on free log-weights; keeps V well conditioned.
const LOG_V_BOUND: f64 = 8.0;

/// Maps `d-1` free log-weights (last coordinate pinned at 0) to a positive
/// diagonal normalised to sum `d`.
fn v_from_params(theta: &[f64], d: usize, out: &mut [f64]) {
    for (o, t) in out.iter_mut().zip(theta) {
        *o = t.clamp(-LOG_V_BOUND, LOG_V_BOUND).exp();
    }
    out[d - 1] = 1.0;
    let total: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o *= d as f64 / total;
    }
}

/// Minimal Nelder–Mead; returns the best point and value seen.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(mut f: F, start: &[f64], step: f64, max_evals: usize, ftol: f64) -> (Vec<f64>, f64) {
    let n = start.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(start.to_vec());
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += step;
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    let mut evals = n + 1;
    let mut centroid = vec![0.0; n];
    let mut trial = vec![0.0; n];
    let mut trial2 = vec![0.0; n];
    while evals < max_evals {
        // Stable order: ties keep earlier vertices first.
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();
        if (values[n] - values[0]).abs() <= ftol * (1.0 + values[0].abs()) {
            break;
        }
        centroid.iter_mut().for_each(|c| *c = 0.0);
        for p in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(p) {
                *c += x / n as f64;
            }
        }
        for i in 0..n {
            trial[i] = centroid[i] + (centroid[i] - simplex[n][i]);
        }
        let fr = f(&trial);
        evals += 1;
        if fr < values[0] {
            for i in 0..n {
                trial2[i] = centroid[i] + 2.0 * (trial[i] - centroid[i]);
            }
            let fe = f(&trial2);
            evals += 1;
            if fe < fr {
                simplex[n].copy_from_slice(&trial2);
                values[n] = fe;
            } else {
                simplex[n].copy_from_slice(&trial);
                values[n] = fr;
            }
        } else if fr < values[n - 1] {
            simplex[n].copy_from_slice(&trial);
            values[n] = fr;
        } else {
            let outside = fr < values[n];
            for i in 0..n {
                trial2[i] = if outside {
                    centroid[i] + 0.5 * (trial[i] - centroid[i])
                } else {
                    centroid[i] + 0.5 * (simplex[n][i] - centroid[i])
                };
            }
            let fc = f(&trial2);
            evals += 1;
            if fc < values[n].min(fr) {
                simplex[n].copy_from_slice(&trial2);
                values[n] = fc;
            } else {
                for k in 1..=n {
                    for i in 0..n {
                        simplex[k][i] = simplex[0][i] + 0.5 * (simplex[k][i] - simplex[0][i]);
                    }
                    values[k] = f(&simplex[k]);
                    evals += 1;
                }
            }
        }
    }
    let best = (0..=n).min_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b))).unwrap_or(0);
    (simplex[best].clone(), values[best])
}

/// Chooses V by minimising the pre-period error and returns the full fit.
pub fn optimize_v(donors: &DonorSet, config: &SynthConfig, seed: u64) -> Result<SyntheticFit> {
    let scaled;
    let work = if config.standardize {
        scaled = donors.standardized();
        &scaled
    } else {
        donors
    };
    let d = work.d;
    let mut solver = InnerSolver::new(work, config.inner_max_iter, config.inner_tol);
    let mut v = vec![1.0; d];
    if d == 1 {
        let (weights, inner) = solver.solve(&v);
        return Ok(finish_fit(donors, weights, v, inner));
    }

    // Pre-period errors this small are indistinguishable from an exact match
    // given the inner tolerance; flattening them lets the search stop early.
    let scale = work
        .pre_outcomes
        .iter()
        .chain(&work.target_pre_outcomes)
        .fold(0.0_f64, |m, x| m.max(x.abs()));
    let exact = 1e-6 * (1.0 + scale);
    let objective = |theta: &[f64], v: &mut [f64], solver: &mut InnerSolver| {
        v_from_params(theta, d, v);
        let (w, _) = solver.solve(v);
        let err = work.pre_period_error(&w);
        if err <= exact {
            0.0
        } else {
            err
        }
    };

    let mut best_theta = vec![0.0; d - 1];
    let mut best_value = f64::INFINITY;
    let mut rng = rng::stream(seed, 0x5ca1ab1e);
    for restart in 0..=config.outer_restarts {
        let start: Vec<f64> = if restart == 0 {
            vec![0.0; d - 1]
        } else {
            (0..d - 1).map(|_| rng.random_range(-2.0..2.0)).collect()
        };
        let (theta, value) = nelder_mead(
            |th| objective(th, &mut v, &mut solver),
            &start,
            1.0,
            config.outer_max_evals,
            1e-10,
        );
        if value < best_value {
            best_value = value;
            best_theta = theta;
        }
        if best_value == 0.0 {
            break;
        }
    }
    v_from_params(&best_theta, d, &mut v);
    let (weights, inner) = solver.solve(&v);
    Ok(finish_fit(donors, weights, v, inner))
}

fn finish_fit(donors: &DonorSet, weights: Vec<f64>, v_diag: Vec<f64>, inner_objective: f64) -> SyntheticFit {
    let outer_objective = donors.pre_period_error(&weights);
    let counterfactual = weighted_outcome(donors, &weights);
    SyntheticFit { weights, v_diag, inner_objective, outer_objective, counterfactual }
}

/// `sum_i w_i x_i`, clamped into the donor outcome range.
fn weighted_outcome(donors: &DonorSet, weights: &[f64]) -> f64 {
    let raw: f64 = weights.iter().zip(&donors.outcomes).map(|(w, x)| w * x).sum();
    let lo = donors.outcomes.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = donors.outcomes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    raw.clamp(lo, hi)
}

/// Counterfactual of a fit produced from `donors`.
pub fn counterfactual(donors: &DonorSet, fit: &SyntheticFit) -> Result<f64> {
    if fit.weights.len() != donors.n_donors {
        return Err(Error::Shape { expected: donors.n_donors, got: fit.weights.len() });
    }
    Ok(weighted_outcome(donors, &fit.weights))
}

/// Fit reusing a fixed V (no outer search).
pub fn fit_with_v(donors: &DonorSet, v_diag: &[f64], config: &SynthConfig) -> Result<SyntheticFit> {
    let scaled;
    let work = if config.standardize {
        scaled = donors.standardized();
        &scaled
    } else {
        donors
    };
    let (weights, inner) = solve_weights_with(work, v_diag, config)?;
    Ok(finish_fit(donors, weights, v_diag.to_vec(), inner))
}

/// Donor set for cell `(od, interval)` with `target_day` treated and the
/// given donor days.
pub fn build_donor_set(panel: &OdPanel, od: usize, target_day: usize, interval: usize, donor_days: &[usize], t_pre: usize) -> Result<DonorSet> {
    panel.check_cell(od, target_day, interval)?;
    let required = t_pre.max(2);
    if interval < required {
        return Err(Error::InsufficientHistory { interval, required });
    }
    if donor_days.is_empty() {
        return Err(Error::InsufficientDonors { available: 0, required: 1 });
    }
    let mut cov = Vec::with_capacity(donor_days.len());
    let mut outcomes = Vec::with_capacity(donor_days.len());
    for &day in donor_days {
        cov.push(panel.covariates_at(od, day, interval)?.values);
        outcomes.push(panel.flow(od, day, interval));
    }
    let pre: Vec<Vec<f64>> = (interval - t_pre..interval)
        .map(|k| donor_days.iter().map(|&day| panel.flow(od, day, k)).collect())
        .collect();
    let target_pre = (interval - t_pre..interval).map(|k| panel.flow(od, target_day, k)).collect();
    let target_cov = panel.covariates_at(od, target_day, interval)?.values;
    DonorSet::new(cov, outcomes, pre, target_cov, target_pre)
}

/// Seed of the outer search for one cell.
pub fn cell_seed(config: &SynthConfig, od: usize, day: usize, interval: usize) -> u64 {
    rng::derive(config.seed, &[od as u64, day as u64, interval as u64])
}

/// Synthetic-control effect of one cell (no significance test).
#[derive(Debug, Clone, PartialEq)]
pub struct EffectPoint {
    pub od: usize,
    pub day: usize,
    pub interval: usize,
    pub observed: f64,
    pub counterfactual: f64,
    pub effect: f64,
    pub fit: SyntheticFit,
}

/// Observed minus synthetic counterfactual, with every incident day removed
/// from the donor pool.
pub fn estimate_effect(panel: &OdPanel, incidents: &[IncidentRecord], od: usize, day: usize, interval: usize, config: &SynthConfig) -> Result<EffectPoint> {
    panel.check_cell(od, day, interval)?;
    let required = config.t_pre.max(2);
    if interval < required {
        return Err(Error::InsufficientHistory { interval, required });
    }
    let donors: Vec<usize> = panel::clean_days(panel, incidents).into_iter().filter(|&d| d != day).collect();
    if donors.is_empty() {
        return Err(Error::InsufficientDonors { available: 0, required: 1 });
    }
    let set = build_donor_set(panel, od, day, interval, &donors, config.t_pre)?;
    let fit = optimize_v(&set, config, cell_seed(config, od, day, interval))?;
    let observed = panel.flow(od, day, interval);
    Ok(EffectPoint { od, day, interval, observed, counterfactual: fit.counterfactual, effect: observed - fit.counterfactual, fit })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simplex_grid(n: usize, step: f64) -> Vec<Vec<f64>> {
        let k = (1.0 / step).round() as usize;
        let mut out = Vec::new();
        let mut cur = vec![0usize; n];
        fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<f64>>, k: usize) {
            let n = cur.len();
            if pos == n - 1 {
                cur[pos] = left;
                out.push(cur.iter().map(|&c| c as f64 / k as f64).collect());
                return;
            }
            for c in 0..=left {
                cur[pos] = c;
                rec(pos + 1, left - c, cur, out, k);
            }
        }
        rec(0, k, &mut cur, &mut out, k);
        out
    }

    fn grid_min(donors: &DonorSet, v: &[f64], step: f64) -> f64 {
        simplex_grid(donors.n_donors(), step)
            .iter()
            .map(|w| donors.covariate_distance(w, v))
            .fold(f64::INFINITY, f64::min)
    }

    fn toy() -> DonorSet {
        DonorSet::new(
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![3.0, 9.0, 27.0],
            vec![vec![1.0, 2.0, 3.0]],
            vec![0.4, 0.3],
            vec![2.0],
        )
        .unwrap()
    }

    #[test]
    fn exact_match_donor_gets_all_weight() {
        let set = DonorSet::new(
            vec![vec![1.0, 5.0], vec![3.0, 2.0], vec![7.0, 7.0]],
            vec![1.0, 2.0, 3.0],
            vec![vec![1.0, 2.0, 3.0]],
            vec![3.0, 2.0],
            vec![2.0],
        )
        .unwrap();
        let (w, obj) = solve_weights(&set, &[1.0, 1.0]).unwrap();
        assert!((w[1] - 1.0).abs() < 1e-4, "{w:?}");
        assert!(obj < 1e-4);
    }

    #[test]
    fn tied_optima_take_least_norm_weights() {
        // Two copies of the matching donor split the weight evenly.
        let dup = DonorSet::new(
            vec![vec![3.0, 2.0], vec![1.0, 5.0], vec![3.0, 2.0], vec![7.0, 7.0]],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![vec![1.0, 2.0, 3.0, 4.0]],
            vec![3.0, 2.0],
            vec![2.0],
        )
        .unwrap();
        let (w, obj) = solve_weights(&dup, &[1.0, 1.0]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-9 && (w[2] - 0.5).abs() < 1e-9, "{w:?}");
        assert!(obj < 1e-9);

        // Target at the centre of a square: all four corners weigh 1/4.
        let square = DonorSet::new(
            vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0], vec![2.0, 2.0]],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![vec![0.0; 4]],
            vec![1.0, 1.0],
            vec![0.0],
        )
        .unwrap();
        for v in [[1.0, 1.0], [0.2, 5.0]] {
            let (w, _) = solve_weights(&square, &v).unwrap();
            assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-9), "{w:?}");
        }

        // Outside the hull the optimal face is the edge x = 1; its two
        // donors at the same point share equally with the third.
        let edge = DonorSet::new(
            vec![vec![1.0, 0.0], vec![1.0, 2.0], vec![1.0, 2.0], vec![3.0, 1.0]],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![vec![0.0; 4]],
            vec![0.0, 4.0 / 3.0],
            vec![0.0],
        )
        .unwrap();
        let (w, _) = solve_weights(&edge, &[1.0, 1.0]).unwrap();
        let third = 1.0 / 3.0;
        assert!(w[..3].iter().all(|x| (x - third).abs() < 1e-9) && w[3] == 0.0, "{w:?}");
    }

    #[test]
    fn single_donor_weight_is_one() {
        let set = DonorSet::new(vec![vec![1.0, 2.0]], vec![4.0], vec![vec![1.0]], vec![5.0, -1.0], vec![0.0]).unwrap();
        for v in [[1.0, 1.0], [0.1, 1.9]] {
            let (w, _) = solve_weights(&set, &v).unwrap();
            assert_eq!(w, vec![1.0]);
        }
    }

    #[test]
    fn three_donor_toy_matches_grid() {
        let set = toy();
        let (w, obj) = solve_weights(&set, &[1.0, 1.0]).unwrap();
        let grid = grid_min(&set, &[1.0, 1.0], 0.005);
        assert!(obj <= grid + 1e-3, "{obj} vs {grid}");
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // target lies inside the triangle: exact barycentric weights
        assert!((w[1] - 0.4).abs() < 1e-3 && (w[2] - 0.3).abs() < 1e-3);
    }

    #[test]
    fn errors_on_bad_input() {
        assert_eq!(
            DonorSet::new(vec![], vec![], vec![vec![]], vec![1.0], vec![1.0]),
            Err(Error::InsufficientDonors { available: 0, required: 1 })
        );
        assert!(matches!(
            DonorSet::new(vec![vec![f64::NAN]], vec![1.0], vec![vec![1.0]], vec![1.0], vec![1.0]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(solve_weights(&toy(), &[1.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn one_dimensional_v_is_forced() {
        let set = DonorSet::new(
            vec![vec![0.0], vec![2.0], vec![5.0]],
            vec![1.0, 2.0, 3.0],
            vec![vec![0.0, 2.0, 5.0]],
            vec![1.0],
            vec![1.0],
        )
        .unwrap();
        let cfg = SynthConfig { standardize: false, ..SynthConfig::default() };
        let fit = optimize_v(&set, &cfg, 1).unwrap();
        assert_eq!(fit.v_diag, vec![1.0]);
        let (w, obj) = solve_weights(&set, &[1.0]).unwrap();
        assert_eq!(fit.weights, w);
        assert_eq!(fit.inner_objective, obj);
    }

    #[test]
    fn planted_weights_give_zero_outer_error() {
        // Target (0.8, 0.8) lies outside the hull; under V* = (1.5, 0.5) its
        // V-projection onto the edge (1,0)-(0,1) is (s, 1 - s) with
        // s = (0.8 v1 + 0.2 v2) / (v1 + v2) = 0.65, so W* = (0, 0.65, 0.35, 0).
        let cov = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, -1.0]];
        let w_star = [0.0, 0.65, 0.35, 0.0];
        let (w_check, _) = solve_weights(
            &DonorSet::new(cov.clone(), vec![0.0; 4], vec![vec![0.0; 4]], vec![0.8, 0.8], vec![0.0]).unwrap(),
            &[1.5, 0.5],
        )
        .unwrap();
        for (a, b) in w_check.iter().zip(&w_star) {
            assert!((a - b).abs() < 1e-9);
        }
        let pre = vec![vec![1.0, 3.0, 2.0, 6.0], vec![4.0, 1.0, 5.0, 2.0]];
        let x0: Vec<f64> = pre.iter().map(|row| row.iter().zip(&w_star).map(|(x, w)| x * w).sum()).collect();
        let set = DonorSet::new(cov, vec![1.0, 2.0, 3.0, 4.0], pre, vec![0.8, 0.8], x0).unwrap();
        let cfg = SynthConfig { standardize: false, ..SynthConfig::default() };
        let fit = optimize_v(&set, &cfg, 9).unwrap();
        assert!(fit.outer_objective < 1e-3, "{}", fit.outer_objective);
    }

    #[test]
    fn outer_search_matches_nested_grid_oracle() {
        // Target outside the triangle so W(V) is unique and moves with V.
        let set = DonorSet::new(
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![1.0, 2.0, 3.0],
            vec![vec![0.0, 1.0, 3.0], vec![2.0, 0.0, 1.0]],
            vec![1.2, 0.9],
            vec![1.6, 0.5],
        )
        .unwrap();
        let cfg = SynthConfig { standardize: false, ..SynthConfig::default() };
        let fit = optimize_v(&set, &cfg, 3).unwrap();
        let weights = simplex_grid(3, 0.005);
        let mut grid_best = f64::INFINITY;
        for step in 1..=39 {
            let v1 = 0.05 * step as f64;
            let v = [v1, 2.0 - v1];
            let w = weights
                .iter()
                .min_by(|a, b| set.covariate_distance(a, &v).total_cmp(&set.covariate_distance(b, &v)))
                .unwrap();
            grid_best = grid_best.min(set.pre_period_error(w));
        }
        assert!((fit.outer_objective - grid_best).abs() < 1e-3 || fit.outer_objective < grid_best, "{} vs {grid_best}", fit.outer_objective);
        assert!(fit.outer_objective <= grid_best + 1e-3);
        assert!((fit.v_diag.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn counterfactual_examples() {
        let set = toy();
        let fit = SyntheticFit { weights: vec![1.0, 0.0, 0.0], v_diag: vec![1.0, 1.0], inner_objective: 0.0, outer_objective: 0.0, counterfactual: 0.0 };
        assert_eq!(counterfactual(&set, &fit).unwrap(), 3.0);
        let flat = DonorSet::new(vec![vec![0.0], vec![1.0], vec![2.0]], vec![7.5; 3], vec![vec![1.0; 3]], vec![0.3], vec![1.0]).unwrap();
        for w in [[0.2, 0.3, 0.5], [1.0 / 3.0; 3]] {
            let fit = SyntheticFit { weights: w.to_vec(), ..fit.clone() };
            assert_eq!(counterfactual(&flat, &fit).unwrap(), 7.5);
        }
    }

    #[test]
    fn v_norm_scaling_covariance() {
        let set = DonorSet::new(
            vec![vec![0.0, 1.0], vec![2.0, 0.5], vec![1.0, 3.0], vec![4.0, 2.0]],
            vec![1.0, 2.0, 3.0, 4.0],
            vec![vec![1.0, 2.0, 3.0, 4.0]],
            vec![5.0, -1.0],
            vec![2.0],
        )
        .unwrap();
        let v = [0.7, 1.3];
        let (_, base) = solve_weights(&set, &v).unwrap();
        let c = 3.0;
        let mut cov = Vec::new();
        for i in 0..4 {
            let r = set.donor_covariates(i);
            cov.push(vec![r[0] * c, r[1]]);
        }
        let scaled = DonorSet::new(cov, vec![1.0, 2.0, 3.0, 4.0], vec![vec![1.0, 2.0, 3.0, 4.0]], vec![5.0 * c, -1.0], vec![2.0]).unwrap();
        let (_, other) = solve_weights(&scaled, &[0.7 / (c * c), 1.3]).unwrap();
        assert!((base - other).abs() < 1e-6, "{base} vs {other}");
    }

    #[test]
    fn nelder_mead_minimises_quadratic() {
        let (x, f) = nelder_mead(|p| (p[0] - 1.0).powi(2) + 10.0 * (p[1] + 2.0).powi(2), &[0.0, 0.0], 1.0, 500, 1e-14);
        assert!(f < 1e-8 && (x[0] - 1.0).abs() < 1e-3 && (x[1] + 2.0).abs() < 1e-3);
    }
}

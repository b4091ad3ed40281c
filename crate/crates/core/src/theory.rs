//! Monte Carlo checks of the two threshold results: the parameter loss of a
//! least-squares fit on partly unaffected samples, and the risk of adjusting
//! only cells whose affected probability exceeds a threshold.

use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{self, KahanSum};
use crate::pipeline::TheoremInputs;
use crate::rng;
#[allow(unused_imports)]
use num_traits::Float;

/// Samples follow `y = e1` with probability `1 - p`, else
/// `y = e1 + beta'x + e2`, with `x` entries iid `N(0, sigma_x^2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyLinearSpec {
    pub beta: Vec<f64>,
    pub p: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma_x: f64,
    pub n: usize,
    pub trials: usize,
}

impl NoisyLinearSpec {
    pub fn validate(&self) -> Result<()> {
        let d = self.beta.len();
        if d == 0 || self.n <= d + 1 || self.trials == 0 {
            return Err(Error::Config("need d >= 1, n > d + 1 and at least one trial".into()));
        }
        if !(0.0..=1.0).contains(&self.p) || !(self.sigma1 >= 0.0) || !(self.sigma2 >= 0.0) || !(self.sigma_x > 0.0) {
            return Err(Error::Config("p, sigma1, sigma2 or sigma_x out of range".into()));
        }
        Ok(())
    }

    fn beta_sq(&self) -> f64 {
        self.beta.iter().map(|b| b * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamLoss {
    /// Mean of `|beta - beta_hat|^2` over trials.
    pub loss: f64,
    /// Trials redrawn because the design was singular.
    pub resampled: usize,
}

/// Trial `t` uses generator `derive(seed, [t, attempt])`, so trials can be
/// evaluated in any order.
pub fn empirical_param_loss(spec: &NoisyLinearSpec, seed: u64) -> Result<ParamLoss> {
    spec.validate()?;
    let mut acc = KahanSum::new();
    let mut resampled = 0;
    for t in 0..spec.trials {
        let (loss, redraws) = param_loss_trial(spec, seed, t as u64)?;
        acc.add(loss);
        resampled += redraws;
    }
    Ok(ParamLoss { loss: acc.total() / spec.trials as f64, resampled })
}

/// One trial's loss and its number of singular redraws.
pub fn param_loss_trial(spec: &NoisyLinearSpec, seed: u64, trial: u64) -> Result<(f64, usize)> {
    let d = spec.beta.len();
    let mut x = vec![0.0; spec.n * d];
    let mut y = vec![0.0; spec.n];
    for attempt in 0..64u64 {
        let mut rng = rng::stream(rng::derive(seed, &[trial, attempt]), 0);
        for i in 0..spec.n {
            let row = &mut x[i * d..(i + 1) * d];
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = spec.sigma_x * z;
            }
            let e1: f64 = StandardNormal.sample(&mut rng);
            let e2: f64 = StandardNormal.sample(&mut rng);
            let affected = rng.random_bool(spec.p);
            y[i] = spec.sigma1 * e1;
            if affected {
                y[i] += numeric::dot(&spec.beta, row) + spec.sigma2 * e2;
            }
        }
        if let Some(beta_hat) = numeric::least_squares(&x, spec.n, d, &y, 0.0) {
            let loss = spec.beta.iter().zip(&beta_hat).map(|(b, h)| (b - h) * (b - h)).sum();
            return Ok((loss, attempt as usize));
        }
    }
    Err(Error::SingularDesign)
}

/// `(1-p)^2 |beta|^2 + (d / sigma_x^2) (sigma1^2 + p sigma2^2) / n`.
pub fn closed_form_param_loss(spec: &NoisyLinearSpec) -> f64 {
    let q = 1.0 - spec.p;
    q * q * spec.beta_sq() + variance_term(spec)
}

/// The variant with a linear `(1-p)` bias coefficient.
pub fn closed_form_param_loss_linear(spec: &NoisyLinearSpec) -> f64 {
    (1.0 - spec.p) * spec.beta_sq() + variance_term(spec)
}

fn variance_term(spec: &NoisyLinearSpec) -> f64 {
    let d = spec.beta.len() as f64;
    d / (spec.sigma_x * spec.sigma_x) * (spec.sigma1 * spec.sigma1 + spec.p * spec.sigma2 * spec.sigma2) / spec.n as f64
}

/// Effect `f`, model `fhat` and noise of the adjustment experiment; `x` is
/// standard normal and the affected probability of each draw is uniform.
#[derive(Debug, Clone)]
pub struct AdjustmentSpec<F, G> {
    pub f: F,
    pub fhat: G,
    pub sigma1: f64,
    pub sigma2: f64,
    pub p_grid: Vec<f64>,
    pub draws: usize,
}

/// Draws of one block share a generator.
const BLOCK: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustmentRisk {
    pub p_grid: Vec<f64>,
    pub empirical: Vec<f64>,
    /// Closed form with every moment taken from the same draws.
    pub closed_form: Vec<f64>,
    pub inputs: TheoremInputs,
    pub c: f64,
}

impl AdjustmentRisk {
    pub fn argmin(&self) -> f64 {
        let mut best = 0;
        for (i, r) in self.empirical.iter().enumerate() {
            if *r < self.empirical[best] {
                best = i;
            }
        }
        self.p_grid[best]
    }
}

/// Adjusts a draw iff its affected probability exceeds `P` and records the
/// mean squared error of the final value for every `P` of the grid.
pub fn empirical_adjustment_risk<F, G>(spec: &AdjustmentSpec<F, G>, seed: u64) -> Result<AdjustmentRisk>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    if spec.draws == 0 || spec.p_grid.is_empty() || spec.p_grid.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::Config("draws must be positive and the P grid inside [0,1]".into()));
    }
    let n = spec.draws;
    let mut probs = Vec::with_capacity(n);
    // Squared error if adjusted minus squared error if left alone.
    let mut gain = Vec::with_capacity(n);
    let mut base = KahanSum::new();
    let (mut f2, mut fh2, mut sq, mut cross, mut e1sq, mut e2sq) =
        (KahanSum::new(), KahanSum::new(), KahanSum::new(), KahanSum::new(), KahanSum::new(), KahanSum::new());
    for block in 0..n.div_ceil(BLOCK) {
        let mut rng = rng::stream(rng::derive(seed, &[block as u64]), 0);
        for _ in 0..BLOCK.min(n - block * BLOCK) {
            let x: f64 = StandardNormal.sample(&mut rng);
            let p: f64 = rng.random();
            let e1 = spec.sigma1 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            let e2 = spec.sigma2 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            let affected = rng.random::<f64>() < p;
            let (fx, fhx) = ((spec.f)(x), (spec.fhat)(x));
            let y = if affected { e1 + fx + e2 } else { e1 };
            let keep = y * y;
            let adjust = (fhx - y) * (fhx - y);
            base.add(keep);
            probs.push(p);
            gain.push(adjust - keep);
            f2.add(fx * fx);
            fh2.add(fhx * fhx);
            sq.add((fhx - fx) * (fhx - fx));
            cross.add(fx * fhx);
            e1sq.add(e1 * e1);
            e2sq.add(e2 * e2);
        }
    }
    let m = n as f64;
    // Risk(P) = (sum of keep + sum of gain over draws with p > P) / n.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_unstable_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(a.cmp(&b)));
    let mut suffix = vec![0.0; n + 1];
    let mut acc = KahanSum::new();
    for i in (0..n).rev() {
        acc.add(gain[order[i]]);
        suffix[i] = acc.total();
    }
    let base = base.total();
    let empirical = spec
        .p_grid
        .iter()
        .map(|&p_thr| {
            let first = order.partition_point(|&i| probs[i] <= p_thr);
            (base + suffix[first]) / m
        })
        .collect();
    let inputs = TheoremInputs { e_f2: f2.total() / m, e_fhat2: fh2.total() / m, e_sq_err: sq.total() / m };
    let c = risk_constant(inputs.e_fhat2, inputs.e_f2, cross.total() / m, (e1sq.total() / m).sqrt(), (e2sq.total() / m).sqrt());
    let closed_form = spec.p_grid.iter().map(|&p| closed_form_adjustment_risk(&inputs, p, c)).collect();
    Ok(AdjustmentRisk { p_grid: spec.p_grid.clone(), empirical, closed_form, inputs, c })
}

/// Constant of the risk: `E(fhat^2 + f^2/2 - f fhat) + sigma1^2 + sigma2^2/2`.
pub fn risk_constant(e_fhat2: f64, e_f2: f64, e_f_fhat: f64, sigma1: f64, sigma2: f64) -> f64 {
    e_fhat2 + e_f2 / 2.0 - e_f_fhat + sigma1 * sigma1 + sigma2 * sigma2 / 2.0
}

/// `P^2 D / 2 - P E fhat^2 + c` with `D = E f^2 + E fhat^2 - E (fhat - f)^2`.
pub fn closed_form_adjustment_risk(inputs: &TheoremInputs, p: f64, c: f64) -> f64 {
    0.5 * p * p * inputs.denominator() - p * inputs.e_fhat2 + c
}

/// Evenly spaced grid `0, step, ..., 1`.
pub fn unit_grid(step: f64) -> Vec<f64> {
    let n = libm::round(1.0 / step) as usize;
    (0..=n).map(|i| i as f64 / n as f64).collect()
}

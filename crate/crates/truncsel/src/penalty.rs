//! SCAD-penalized estimation of the share coefficients and BIC selection of
//! the number of reference groups.
//!
//! The penalty is written as `lambda |v| - h2(v)` with both parts convex.
//! Each outer iteration replaces `h2` by its tangent, which leaves a weighted
//! LASSO; that problem is solved on successive Gauss-Newton models by
//! proximal gradient steps with Barzilai-Borwein step sizes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::fmt_real;
use crate::error::{Error, Result};
use crate::estimator::{
    fit_plsim, fit_plsim_from, profile_linear, residuals, residuals_and_jacobian, DesignBundle, FitConfig, Layout,
};
use crate::sieve::SieveSpec;

/// Magnitudes below this count as zero.
pub const ZERO_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScadParams {
    pub lambda: f64,
    pub a: f64,
}

impl ScadParams {
    pub fn new(lambda: f64, a: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) || !(a > 2.0 && a.is_finite()) {
            return Err(Error::InvalidConfig(format!("scad needs lambda >= 0 and a > 2, got {lambda}, {a}")));
        }
        Ok(Self { lambda, a })
    }
}

/// SCAD penalty at `v >= 0`.
pub fn scad(v: f64, p: &ScadParams) -> Result<f64> {
    if v < 0.0 {
        return Err(Error::NegativeInput(v));
    }
    Ok(scad_abs(v, p))
}

fn scad_abs(v: f64, p: &ScadParams) -> f64 {
    let (l, a) = (p.lambda, p.a);
    if v <= l {
        l * v
    } else if v < a * l {
        -(v * v - 2.0 * a * l * v + l * l) / (2.0 * (a - 1.0))
    } else {
        (a + 1.0) * l * l / 2.0
    }
}

pub fn scad_derivative(v: f64, p: &ScadParams) -> f64 {
    let (l, a) = (p.lambda, p.a);
    let s = if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    };
    let m = v.abs();
    if m <= l {
        l * s
    } else if m <= a * l {
        (a * l * s - v) / (a - 1.0)
    } else {
        0.0
    }
}

/// Convex parts with `h1 - h2 = scad(|v|)`.
pub fn dc_parts(v: f64, p: &ScadParams) -> (f64, f64) {
    let h1 = p.lambda * v.abs();
    (h1, h1 - scad_abs(v.abs(), p))
}

/// Derivative of `h2` (zero at the origin).
fn h2_derivative(v: f64, p: &ScadParams) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        p.lambda * v.signum() - scad_derivative(v, p)
    }
}

pub fn soft_threshold(u: f64, a: f64) -> f64 {
    u.signum() * (u.abs() - a).max(0.0)
}

/// Barzilai-Borwein curvature estimate, 1.0 when it is not positive and finite.
pub fn bb_step(grad_k: &[f64], grad_prev: &[f64], x_k: &[f64], x_prev: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..x_k.len() {
        let dx = x_k[i] - x_prev[i];
        num += (grad_k[i] - grad_prev[i]) * dx;
        den += dx * dx;
    }
    let a = num / den;
    if a > 0.0 && a.is_finite() {
        a
    } else {
        1.0
    }
}

/// Gradient step of length `1/alpha` followed by coordinate-wise soft thresholding.
pub fn proximal_step(params: &[f64], grad: &[f64], alpha: f64, lambda_tilde: &[f64]) -> Vec<f64> {
    params
        .iter()
        .zip(grad)
        .zip(lambda_tilde)
        .map(|((x, g), l)| soft_threshold(x - g / alpha, l / alpha))
        .collect()
}

pub fn bic(mse: f64, n: usize, df: usize) -> Result<f64> {
    if !(mse > 0.0) {
        return Err(Error::NonPositiveMse(mse));
    }
    let nf = n as f64;
    Ok(mse.ln() + nf.ln() / nf * df as f64)
}

/// Result of one sign-search step.
#[derive(Debug, Clone, PartialEq)]
pub struct SignSearchStep {
    pub beta: Vec<f64>,
    /// Sign vector of the chosen candidate over the penalized coordinates.
    pub signs: Vec<i8>,
    /// False when no candidate was fully self-consistent and the fallback was used.
    pub consistent: bool,
    /// Quadratic model of the smooth part plus the SCAD penalty at the new point.
    pub value: f64,
}

/// Branch-local curvature `R_kk` and slope weight `r_k` of the penalty at `v`.
fn branch_weights(v: f64, p: &ScadParams) -> (f64, f64) {
    let m = v.abs();
    if m <= p.lambda {
        (0.0, 1.0)
    } else if m <= p.a * p.lambda {
        (1.0 / (p.a - 1.0), p.a / (p.a - 1.0))
    } else {
        (0.0, 0.0)
    }
}

/// One modified soft-thresholding step over all sign patterns of the
/// penalized coordinates. `penalized` lists the positions of those
/// coordinates in `beta`; the rest are free.
pub fn modified_soft_threshold_step(
    beta: &[f64],
    grad: &[f64],
    hessian: &DMatrix<f64>,
    params: &ScadParams,
    penalized: &[usize],
    cap: usize,
) -> Result<SignSearchStep> {
    let dim = beta.len();
    let m = penalized.len();
    if grad.len() != dim || hessian.shape() != (dim, dim) {
        return Err(Error::DimensionMismatch("sign search inputs".into()));
    }
    if m > cap {
        return Err(Error::InvalidConfig(format!("sign search over {m} coordinates exceeds cap {cap}")));
    }
    let lam = params.lambda;
    let mut rmat = DMatrix::zeros(dim, dim);
    let mut rvec = vec![0.0; dim];
    for &k in penalized {
        let (rk, wk) = branch_weights(beta[k], params);
        rmat[(k, k)] = rk;
        rvec[k] = wk;
    }
    let a = hessian - &rmat;
    if a.clone().lu().try_inverse().is_none() {
        return Err(Error::SingularSystem);
    }
    let x = DVector::from_column_slice(beta);
    let g = DVector::from_column_slice(grad);
    let hx = hessian * &x;
    let model = |xn: &DVector<f64>| -> f64 {
        let d = xn - &x;
        let smooth = g.dot(&d) + 0.5 * d.dot(&(hessian * &d));
        smooth + penalized.iter().map(|&k| scad_abs(xn[k].abs(), params)).sum::<f64>()
    };
    let total = 3usize.pow(m as u32);
    let mut best: Option<SignSearchStep> = None;
    let mut fallback: Option<(usize, SignSearchStep)> = None;
    for code in 0..total {
        let mut signs = vec![0i8; m];
        let mut c = code;
        for s in signs.iter_mut() {
            *s = (c % 3) as i8 - 1;
            c /= 3;
        }
        let mut gvec = vec![0.0; dim];
        let mut zeroed = vec![false; dim];
        for (q, &k) in penalized.iter().enumerate() {
            gvec[k] = signs[q] as f64;
            zeroed[k] = signs[q] == 0;
        }
        let free: Vec<usize> = (0..dim).filter(|&i| !zeroed[i]).collect();
        let nf = free.len();
        let mut xn = DVector::zeros(dim);
        if nf > 0 {
            let sub = DMatrix::from_fn(nf, nf, |i, j| a[(free[i], free[j])]);
            let rhs = DVector::from_fn(nf, |i, _| {
                let k = free[i];
                hx[k] - g[k] - lam * rvec[k] * gvec[k]
            });
            let Some(sol) = sub.lu().solve(&rhs) else {
                continue;
            };
            for (i, &k) in free.iter().enumerate() {
                xn[k] = sol[i];
            }
        }
        let signs_ok = penalized.iter().zip(&signs).all(|(&k, &s)| s == 0 || (xn[k] > 0.0) == (s > 0) && xn[k] != 0.0);
        if !signs_ok {
            continue;
        }
        let model_grad = &g + hessian * (&xn - &x);
        let kkt_ok = penalized
            .iter()
            .zip(&signs)
            .all(|(&k, &s)| s != 0 || model_grad[k].abs() <= lam * (1.0 + 1e-9) + 1e-12);
        let step = SignSearchStep { value: model(&xn), beta: xn.iter().cloned().collect(), signs: signs.clone(), consistent: true };
        if kkt_ok {
            if best.as_ref().is_none_or(|b| step.value < b.value) {
                best = Some(step);
            }
        } else {
            let nz = signs.iter().filter(|&&s| s != 0).count();
            let better = match &fallback {
                None => true,
                Some((bn, b)) => nz > *bn || (nz == *bn && step.value < b.value),
            };
            if better {
                fallback = Some((nz, SignSearchStep { consistent: false, ..step }));
            }
        }
    }
    best.or(fallback.map(|f| f.1)).ok_or(Error::SingularSystem)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathSolver {
    /// DC outer loop around proximal gradient on Gauss-Newton models.
    Proximal,
    /// Damped Gauss-Newton steps through the exhaustive sign search.
    SignSearch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    SequentialWarm,
    ParallelCold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PenaltyConfig {
    pub a: f64,
    pub n_lambda: usize,
    pub lambda_ratio: f64,
    pub solver: PathSolver,
    pub mode: PathMode,
    pub max_outer: usize,
    pub outer_tol: f64,
    pub max_inner: usize,
    pub sign_search_cap: usize,
    /// Penalize share columns scaled to unit standard deviation; reported
    /// coefficients are mapped back to the original columns.
    pub standardize: bool,
    pub fit: FitConfig,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            a: 3.7,
            n_lambda: 25,
            lambda_ratio: 1e-3,
            solver: PathSolver::Proximal,
            mode: PathMode::SequentialWarm,
            max_outer: 200,
            outer_tol: 1e-6,
            max_inner: 3,
            sign_search_cap: 12,
            standardize: false,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub lambda: f64,
    pub params: Vec<f64>,
    pub beta: Vec<f64>,
    pub beta_plus: Vec<f64>,
    pub beta_minus: Vec<f64>,
    pub mse: f64,
    pub df: usize,
    pub bic: f64,
    pub converged: bool,
    /// Penalized objective after each outer iteration.
    #[serde(skip)]
    pub outer_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionPath {
    pub entries: Vec<PathEntry>,
    pub selected_index: usize,
    pub sieve: SieveSpec,
}

/// Half mean squared residual plus the SCAD penalty on the share coefficients.
pub fn penalized_objective(params: &[f64], bundle: &DesignBundle, sieve: &SieveSpec, p: &ScadParams) -> Result<f64> {
    let layout = bundle.layout(sieve);
    let r = residuals(params, bundle, sieve)?;
    let pen: f64 = params[layout.beta()].iter().map(|b| scad_abs(b.abs(), p)).sum();
    Ok(0.5 * r.norm_squared() / bundle.n() as f64 + pen)
}

/// Smooth half-MSE, its gradient and Gauss-Newton curvature.
fn local_model(params: &[f64], bundle: &DesignBundle, sieve: &SieveSpec) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let (r, j) = residuals_and_jacobian(params, bundle, sieve)?;
    let n = bundle.n() as f64;
    let f = 0.5 * r.norm_squared() / n;
    let g = j.tr_mul(&r) / n;
    let h = j.tr_mul(&j) / n;
    Ok((f, g, h))
}

fn smooth_value(params: &[f64], bundle: &DesignBundle, sieve: &SieveSpec) -> f64 {
    residuals(params, bundle, sieve).map_or(f64::INFINITY, |r| 0.5 * r.norm_squared() / bundle.n() as f64)
}

/// Minimizes `0.5 d'Hd + c'd + sum w_k |x0_k + d_k|` over `x = x0 + d`.
/// Unweighted coordinates are profiled out through the Schur complement, which
/// leaves a small lasso solved by cyclic coordinate descent. The `fixed`
/// coordinate does not move.
fn weighted_lasso_on_model(
    x0: &DVector<f64>,
    c: &DVector<f64>,
    h: &DMatrix<f64>,
    weights: &[f64],
    fixed: Option<usize>,
    max_iter: usize,
) -> DVector<f64> {
    let dim = x0.len();
    let pen: Vec<usize> = (0..dim).filter(|&k| weights[k] > 0.0 && Some(k) != fixed).collect();
    let unp: Vec<usize> = (0..dim).filter(|&k| weights[k] == 0.0 && Some(k) != fixed).collect();
    let (np, nu) = (pen.len(), unp.len());
    let sub = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| h[(rows[i], cols[j])]);
    let huu = sub(&unp, &unp);
    let hup = sub(&unp, &pen);
    let cu = DVector::from_fn(nu, |i, _| c[unp[i]]);
    let cp = DVector::from_fn(np, |i, _| c[pen[i]]);
    let solve_uu = |rhs: &DMatrix<f64>| -> DMatrix<f64> {
        let mut m = huu.clone();
        let mut jitter = 0.0;
        loop {
            if let Some(ch) = m.clone().cholesky() {
                return ch.solve(rhs);
            }
            jitter = if jitter == 0.0 { 1e-12 * (1.0 + huu.diagonal().amax()) } else { jitter * 10.0 };
            m = &huu + DMatrix::identity(nu, nu) * jitter;
        }
    };
    let mut rhs = DMatrix::zeros(nu, np + 1);
    rhs.columns_mut(0, np).copy_from(&hup);
    rhs.column_mut(np).copy_from(&cu);
    let sol = solve_uu(&rhs);
    let (s_p, s_c) = (sol.columns(0, np).into_owned(), sol.column(np).into_owned());
    let hr = sub(&pen, &pen) - hup.tr_mul(&s_p);
    let cr = cp - hup.tr_mul(&s_c);
    // coordinate descent on 0.5 d'Hr d + cr'd + sum w |x0 + d|
    let mut d = DVector::zeros(np);
    let mut grad = cr.clone();
    for _ in 0..max_iter {
        let mut moved: f64 = 0.0;
        for i in 0..np {
            let hii = hr[(i, i)].max(1e-300);
            let k = pen[i];
            let cur: f64 = x0[k] + d[i];
            let target = soft_threshold(cur - grad[i] / hii, weights[k] / hii);
            let delta = target - cur;
            if delta != 0.0 {
                d[i] += delta;
                grad += hr.column(i) * delta;
                moved = moved.max(delta.abs());
            }
        }
        if moved <= 1e-14 * (1.0 + d.amax()) {
            break;
        }
    }
    let du = -(&s_c + &s_p * &d);
    let mut x = x0.clone();
    for (i, &k) in pen.iter().enumerate() {
        x[k] = x0[k] + d[i];
    }
    for (i, &k) in unp.iter().enumerate() {
        x[k] = x0[k] + du[i];
    }
    x
}

fn df_of(params: &[f64]) -> usize {
    params.iter().filter(|v| v.abs() >= ZERO_THRESHOLD).count()
}

fn zero_dust(params: &mut [f64], layout: &Layout) {
    for k in layout.beta() {
        if params[k].abs() < ZERO_THRESHOLD {
            params[k] = 0.0;
        }
    }
}

/// Weighted-LASSO surrogate solved by damped Gauss-Newton passes.
fn solve_surrogate(
    start: &[f64],
    bundle: &DesignBundle,
    sieve: &SieveSpec,
    layout: &Layout,
    lambda: f64,
    linear: &[f64],
    anchor: Option<usize>,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let mut weights = vec![0.0; layout.len()];
    for k in layout.beta() {
        weights[k] = lambda;
    }
    let surrogate = |x: &[f64]| -> f64 {
        let l1: f64 = x.iter().zip(&weights).map(|(v, w)| w * v.abs()).sum();
        let lin: f64 = x.iter().zip(linear).map(|(v, l)| v * l).sum();
        smooth_value(x, bundle, sieve) + l1 - lin
    };
    let mut x = start.to_vec();
    let mut fx = surrogate(&x);
    let mut damping = 1e-6;
    for _ in 0..max_iter {
        let (_, g, h) = local_model(&x, bundle, sieve)?;
        let c = g - DVector::from_column_slice(linear);
        let xv = DVector::from_column_slice(&x);
        let scale = h.diagonal().map(|d| d.max(1e-12));
        let mut improved = false;
        let mut step_size = 0.0;
        for _ in 0..30 {
            let hd = &h + DMatrix::from_diagonal(&(&scale * damping));
            let xn = weighted_lasso_on_model(&xv, &c, &hd, &weights, anchor, 5000);
            let mut xn: Vec<f64> = xn.iter().cloned().collect();
            zero_dust(&mut xn, layout);
            // the linear block is solved exactly at the new index
            let mut profiled = xn.clone();
            profile_linear(&mut profiled, bundle, sieve, layout, true);
            if surrogate(&profiled) < surrogate(&xn) {
                xn = profiled;
            }
            let fnew = surrogate(&xn);
            if fnew <= fx {
                step_size = xn.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                improved = fnew < fx;
                x = xn;
                fx = fnew;
                damping = (damping / 10.0).max(1e-12);
                break;
            }
            damping *= 10.0;
        }
        if !improved || step_size < 1e-10 {
            break;
        }
    }
    Ok(x)
}

fn split_beta(beta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (beta.iter().map(|b| b.max(0.0)).collect(), beta.iter().map(|b| (-b).max(0.0)).collect())
}

fn make_entry(
    lambda: f64,
    params: Vec<f64>,
    bundle: &DesignBundle,
    sieve: &SieveSpec,
    converged: bool,
    outer_trace: Vec<f64>,
) -> Result<PathEntry> {
    let layout = bundle.layout(sieve);
    let r = residuals(&params, bundle, sieve)?;
    let n = bundle.n();
    let mse = r.norm_squared() / n as f64;
    let df = df_of(&params);
    let beta = params[layout.beta()].to_vec();
    let (beta_plus, beta_minus) = split_beta(&beta);
    Ok(PathEntry { lambda, bic: bic(mse, n, df)?, params, beta, beta_plus, beta_minus, mse, df, converged, outer_trace })
}

/// The index is only identified up to scale, and the penalty is not scale
/// invariant: left free, the whole index shrinks toward zero while the sieve
/// compensates. The largest unpenalized index coefficient is therefore held at
/// its starting value during penalized fits.
fn anchor(layout: &Layout, start: &[f64]) -> Option<usize> {
    layout
        .eta()
        .chain(layout.delta())
        .filter(|&k| start[k].abs() > ZERO_THRESHOLD)
        .max_by(|&a, &b| start[a].abs().total_cmp(&start[b].abs()))
}

/// DC outer loop: the proximal solver runs on the tangent surrogate at each iterate.
fn solve_dc(
    start: &[f64],
    bundle: &DesignBundle,
    sieve: &SieveSpec,
    p: &ScadParams,
    config: &PenaltyConfig,
) -> Result<(Vec<f64>, bool, Vec<f64>)> {
    let layout = bundle.layout(sieve);
    let mut x = start.to_vec();
    let mut trace = vec![penalized_objective(&x, bundle, sieve, p)?];
    for _ in 0..config.max_outer {
        let mut linear = vec![0.0; layout.len()];
        for k in layout.beta() {
            linear[k] = h2_derivative(x[k], p);
        }
        let xn = solve_surrogate(&x, bundle, sieve, &layout, p.lambda, &linear, anchor(&layout, start), config.max_inner)?;
        let change = xn.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        x = xn;
        trace.push(penalized_objective(&x, bundle, sieve, p)?);
        if change < config.outer_tol {
            return Ok((x, true, trace));
        }
    }
    Ok((x, false, trace))
}

/// Damped Gauss-Newton iterations through the sign search.
fn solve_sign_search(
    start: &[f64],
    bundle: &DesignBundle,
    sieve: &SieveSpec,
    p: &ScadParams,
    config: &PenaltyConfig,
) -> Result<(Vec<f64>, bool, Vec<f64>)> {
    let layout = bundle.layout(sieve);
    let fixed = anchor(&layout, start);
    let keep: Vec<usize> = (0..layout.len()).filter(|&k| Some(k) != fixed).collect();
    let penalized: Vec<usize> = keep.iter().enumerate().filter(|(_, &k)| layout.beta().contains(&k)).map(|(i, _)| i).collect();
    let mut x = start.to_vec();
    let mut fx = penalized_objective(&x, bundle, sieve, p)?;
    let mut trace = vec![fx];
    let mut damping = 1e-6;
    for _ in 0..config.max_outer {
        let (_, g, h) = local_model(&x, bundle, sieve)?;
        let g = DVector::from_fn(keep.len(), |i, _| g[keep[i]]);
        let h = DMatrix::from_fn(keep.len(), keep.len(), |i, j| h[(keep[i], keep[j])]);
        let xr: Vec<f64> = keep.iter().map(|&k| x[k]).collect();
        let scale = h.diagonal().map(|d| d.max(1e-12));
        let mut moved = None;
        for _ in 0..30 {
            let hd = &h + DMatrix::from_diagonal(&(&scale * damping));
            let step = match modified_soft_threshold_step(&xr, g.as_slice(), &hd, p, &penalized, config.sign_search_cap) {
                Ok(s) => s,
                Err(Error::SingularSystem) => {
                    damping *= 10.0;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut xn = x.clone();
            for (i, &k) in keep.iter().enumerate() {
                xn[k] = step.beta[i];
            }
            let fnew = penalized_objective(&xn, bundle, sieve, p)?;
            if fnew <= fx {
                let change = xn.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                x = xn;
                fx = fnew;
                damping = (damping / 10.0).max(1e-12);
                moved = Some(change);
                break;
            }
            damping *= 10.0;
        }
        trace.push(fx);
        match moved {
            Some(c) if c >= config.outer_tol => {}
            Some(_) => return Ok((x, true, trace)),
            None => return Ok((x, false, trace)),
        }
    }
    Ok((x, false, trace))
}

/// Penalized fit at one tuning value from a given start.
pub fn fit_penalized(
    bundle: &DesignBundle,
    sieve: &SieveSpec,
    start: &[f64],
    lambda: f64,
    config: &PenaltyConfig,
) -> Result<PathEntry> {
    let p = ScadParams::new(lambda, config.a)?;
    let layout = bundle.layout(sieve);
    let use_sign = config.solver == PathSolver::SignSearch && layout.ls <= config.sign_search_cap;
    let (mut x, conv, trace) = if use_sign {
        solve_sign_search(start, bundle, sieve, &p, config)?
    } else {
        solve_dc(start, bundle, sieve, &p, config)?
    };
    zero_dust(&mut x, &layout);
    make_entry(lambda, x, bundle, sieve, conv, trace)
}

fn all_beta_zero(entry: &PathEntry) -> bool {
    entry.beta.iter().all(|b| b.abs() < ZERO_THRESHOLD)
}

/// Unpenalized fit and the smallest tuning value that removes every share
/// coefficient when started from it.
pub fn lambda_max(bundle: &DesignBundle, sieve: &SieveSpec, unpenalized: &[f64], config: &PenaltyConfig) -> Result<f64> {
    let layout = bundle.layout(sieve);
    // stationarity of the zero solution gives a starting bracket
    let mut restricted = unpenalized.to_vec();
    for k in layout.beta() {
        restricted[k] = 0.0;
    }
    let mut free = vec![true; layout.len()];
    for k in layout.beta() {
        free[k] = false;
    }
    let fit = fit_plsim_from(bundle, sieve, &restricted, &free, &config.fit)?;
    let (_, g, _) = local_model(&fit.params(), bundle, sieve)?;
    let kkt = layout.beta().map(|k| g[k].abs()).fold(0.0, f64::max);
    let big = layout.beta().map(|k| unpenalized[k].abs()).fold(0.0, f64::max);
    let mut hi = kkt.max(big).max(1e-8) * 1.01;
    let mut tries = 0;
    while !all_beta_zero(&fit_penalized(bundle, sieve, unpenalized, hi, config)?) {
        hi *= 2.0;
        tries += 1;
        if tries > 40 {
            return Err(Error::InvalidConfig("could not bracket the largest tuning value".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..12 {
        let mid = 0.5 * (lo + hi);
        if all_beta_zero(&fit_penalized(bundle, sieve, unpenalized, mid, config)?) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Zero followed by `n` log-spaced values from `max * ratio` up to `max`.
pub fn lambda_grid(max: f64, n: usize, ratio: f64) -> Vec<f64> {
    let mut g = vec![0.0];
    if n == 1 {
        g.push(max);
    } else if n > 1 {
        let (lo, hi) = ((max * ratio).ln(), max.ln());
        g.extend((0..n).map(|i| (lo + (hi - lo) * i as f64 / (n - 1) as f64).exp()));
    }
    g
}

/// Index of the smallest BIC; ties go to the larger tuning value.
pub fn select_index(entries: &[PathEntry]) -> usize {
    let mut best = 0;
    for (i, e) in entries.iter().enumerate() {
        let b = &entries[best];
        if e.bic < b.bic || (e.bic == b.bic && e.lambda > b.lambda) {
            best = i;
        }
    }
    best
}

/// Penalized path over an increasing grid. The zero entry is the unpenalized
/// fit, whose transform center and scale are then used along the whole path.
pub fn fit_penalized_path(
    bundle: &DesignBundle,
    spec: &SieveSpec,
    grid: Option<&[f64]>,
    config: &PenaltyConfig,
) -> Result<SolutionPath> {
    if !config.standardize {
        return path_on(bundle, spec, grid, config);
    }
    let scales: Vec<f64> = bundle
        .shares
        .column_iter()
        .map(|c| {
            let n = c.len() as f64;
            let mean = c.sum() / n;
            let sd = (c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            if sd > 1e-12 { sd } else { 1.0 }
        })
        .collect();
    let mut shares = bundle.shares.clone();
    for (j, s) in scales.iter().enumerate() {
        shares.column_mut(j).scale_mut(1.0 / s);
    }
    let mut path = path_on(&bundle.with_shares(shares)?, spec, grid, config)?;
    let layout = bundle.layout(&path.sieve);
    for e in path.entries.iter_mut() {
        for (j, k) in layout.beta().enumerate() {
            e.params[k] /= scales[j];
        }
        e.beta = e.params[layout.beta()].to_vec();
        (e.beta_plus, e.beta_minus) = split_beta(&e.beta);
    }
    Ok(path)
}

fn path_on(
    bundle: &DesignBundle,
    spec: &SieveSpec,
    grid: Option<&[f64]>,
    config: &PenaltyConfig,
) -> Result<SolutionPath> {
    let base = fit_plsim(bundle, spec, &config.fit)?;
    let sieve = base.sieve;
    let start = base.params();
    let grid: Vec<f64> = match grid {
        Some(g) => g.to_vec(),
        None => lambda_grid(lambda_max(bundle, &sieve, &start, config)?, config.n_lambda, config.lambda_ratio),
    };
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty tuning grid".into()));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) || grid[0] < 0.0 {
        return Err(Error::InvalidConfig("tuning grid must be nonnegative and strictly increasing".into()));
    }
    let solve = |lambda: f64, from: &[f64]| -> Result<PathEntry> {
        if lambda == 0.0 {
            make_entry(0.0, start.clone(), bundle, &sieve, base.converged, vec![base.objective / 2.0])
        } else {
            fit_penalized(bundle, &sieve, from, lambda, config)
        }
    };
    let entries: Vec<PathEntry> = match config.mode {
        PathMode::ParallelCold => grid.par_iter().map(|&l| solve(l, &start)).collect::<Result<_>>()?,
        PathMode::SequentialWarm => {
            let mut out = Vec::with_capacity(grid.len());
            let mut from = start.clone();
            for &l in grid.iter().rev() {
                let e = solve(l, &from)?;
                if l > 0.0 {
                    from = e.params.clone();
                }
                out.push(e);
            }
            out.reverse();
            out
        }
    };
    let selected_index = select_index(&entries);
    Ok(SolutionPath { entries, selected_index, sieve })
}

/// Number of nonzero share coefficients at the selected entry, and whether
/// the selection is degenerate (no share kept).
pub fn select_class_count(path: &SolutionPath) -> (usize, bool) {
    let e = &path.entries[path.selected_index];
    let count = e.beta.iter().filter(|b| b.abs() >= ZERO_THRESHOLD).count();
    (count, count == 0)
}

/// Writes `lambda,mse,df,bic,beta1..` rows.
pub fn write_path_csv(path: &SolutionPath, file: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(file)?);
    let ls = path.entries.first().map_or(0, |e| e.beta.len());
    let mut header = vec!["lambda".to_string(), "mse".into(), "df".into(), "bic".into()];
    header.extend((1..=ls).map(|k| format!("beta{k}")));
    writeln!(out, "{}", header.join(","))?;
    for e in &path.entries {
        let mut row = vec![fmt_real(e.lambda), fmt_real(e.mse), e.df.to_string(), fmt_real(e.bic)];
        row.extend(e.beta.iter().map(|b| fmt_real(*b)));
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assume, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn sp(l: f64) -> ScadParams {
        ScadParams::new(l, 3.7).unwrap()
    }

    #[test]
    fn scad_examples() {
        assert_eq!(scad(0.0, &sp(2.0)).unwrap(), 0.0);
        assert_eq!(scad(1.0, &sp(2.0)).unwrap(), 2.0);
        assert!((scad(10.0, &sp(2.0)).unwrap() - 9.4).abs() < 1e-12);
        assert!(matches!(scad(-1.0, &sp(2.0)), Err(Error::NegativeInput(_))));
        assert!(ScadParams::new(1.0, 2.0).is_err());
    }

    #[test]
    fn derivative_examples() {
        assert_eq!(scad_derivative(1.0, &sp(2.0)), 2.0);
        assert!((scad_derivative(5.0, &sp(2.0)) - 2.4 / 2.7).abs() < 1e-12);
        assert!((scad_derivative(5.0, &sp(2.0)) - 0.8889).abs() < 1e-4);
        assert_eq!(scad_derivative(10.0, &sp(2.0)), 0.0);
        assert_eq!(scad_derivative(-1.0, &sp(2.0)), -2.0);
    }

    #[test]
    fn dc_examples() {
        let (h1, h2) = dc_parts(0.5, &sp(1.0));
        assert_eq!((h1, h2), (0.5, 0.0));
        let (h1, h2) = dc_parts(5.0, &sp(1.0));
        assert_eq!(h1, 5.0);
        assert!((h2 - 2.65).abs() < 1e-12);
    }

    #[test]
    fn soft_and_bb_examples() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.5, 1.0), 0.0);
        assert_eq!(soft_threshold(-0.7, 0.0), -0.7);
        assert_eq!(bb_step(&[3.0, 4.0], &[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0]), 3.0);
        assert_eq!(bb_step(&[0.0, 1.0], &[0.0, 0.0], &[1.0, 0.0], &[0.0, 0.0]), 1.0);
        let c = 2.5;
        assert!((bb_step(&[c * 1.0, c * -2.0], &[0.0, 0.0], &[1.0, -2.0], &[0.0, 0.0]) - c).abs() < 1e-15);
    }

    #[test]
    fn proximal_examples() {
        assert_eq!(proximal_step(&[1.0, 2.0], &[0.5, -1.0], 2.0, &[0.0, 0.0]), vec![0.75, 2.5]);
        assert_eq!(proximal_step(&[0.1], &[0.0], 1.0, &[0.5]), vec![0.0]);
    }

    #[test]
    fn bic_examples() {
        assert_eq!(bic(1.0, 10, 0).unwrap(), 0.0);
        assert!((bic(0.25, 100, 2).unwrap() - (-1.29419)).abs() < 1e-5);
        assert!(bic(0.25, 100, 3).unwrap() > bic(0.25, 100, 2).unwrap());
        assert!(matches!(bic(0.0, 10, 1), Err(Error::NonPositiveMse(_))));
    }

    #[test]
    fn sign_search_inactive_penalty_is_newton() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let beta = [10.0, -12.0];
        let grad = [0.4, -0.2];
        let s = modified_soft_threshold_step(&beta, &grad, &h, &sp(0.5), &[0, 1], 12).unwrap();
        let newton = DVector::from_column_slice(&beta) - h.lu().solve(&DVector::from_column_slice(&grad)).unwrap();
        for k in 0..2 {
            assert!((s.beta[k] - newton[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn sign_search_scalar_matches_grid() {
        // f = (b - u)^2 / 2 with the solution inside the linear branch
        for &(u, lam) in &[(1.3, 1.0), (-0.4, 0.3), (0.2, 0.5), (-1.9, 1.0)] {
            let b0 = 0.1f64.min(lam);
            let s = modified_soft_threshold_step(&[b0], &[b0 - u], &DMatrix::from_element(1, 1, 1.0), &sp(lam), &[0], 12)
                .unwrap();
            let grid = (-40_000..=40_000)
                .map(|i| i as f64 * 1e-4)
                .min_by(|a, b| {
                    let f = |v: f64| 0.5 * (v - u).powi(2) + lam * v.abs();
                    f(*a).total_cmp(&f(*b))
                })
                .unwrap();
            assert!((s.beta[0] - grid).abs() < 1e-4, "u {u}: {} vs {grid}", s.beta[0]);
        }
    }

    #[test]
    fn lambda_grid_shape() {
        let g = lambda_grid(2.0, 25, 1e-3);
        assert_eq!(g.len(), 26);
        assert_eq!(g[0], 0.0);
        assert!((g[25] - 2.0).abs() < 1e-12 && (g[1] - 2e-3).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    fn path_entry(bic: f64, lambda: f64, beta: Vec<f64>) -> PathEntry {
        PathEntry {
            lambda,
            params: beta.clone(),
            beta_plus: vec![],
            beta_minus: vec![],
            beta,
            mse: 1.0,
            df: 0,
            bic,
            converged: true,
            outer_trace: vec![],
        }
    }

    #[test]
    fn selection_rules() {
        let one = SolutionPath { entries: vec![path_entry(0.0, 0.0, vec![1.0, 0.0, -2.0])], selected_index: 0, sieve: SieveSpec::default() };
        assert_eq!(select_class_count(&one), (2, false));
        let entries = vec![
            path_entry(1.0, 0.0, vec![1.0, 1.0, 1.0]),
            path_entry(0.5, 0.1, vec![1.0, 0.0, 0.0]),
            path_entry(0.9, 0.2, vec![0.0, 0.0, 0.0]),
        ];
        assert_eq!(select_index(&entries), 1);
        let p = SolutionPath { selected_index: 2, entries, sieve: SieveSpec::default() };
        assert_eq!(select_class_count(&p), (0, true));
        let tied = vec![path_entry(0.5, 0.1, vec![1.0]), path_entry(0.5, 0.3, vec![0.0])];
        assert_eq!(select_index(&tied), 1);
    }

    fn toy_bundle(n: usize, seed: u64) -> DesignBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || rng.sample::<f64, _>(StandardNormal);
        let w = DMatrix::from_fn(n, 2, |_, _| g());
        let shares = DMatrix::from_fn(n, 3, |_, _| g());
        let z = DMatrix::from_fn(n, 1, |_, _| g());
        let xc = DMatrix::from_fn(n, 0, |_, _| 0.0);
        let noise: Vec<f64> = (0..n).map(|_| 0.3 * g()).collect();
        let y = DVector::from_fn(n, |i, _| {
            let b = 1.0 * shares[(i, 0)] + 0.8 * shares[(i, 1)] - 0.6 * z[(i, 0)];
            2.0 * w[(i, 0)] + 4.0 * w[(i, 1)] + (0.8 * b).tanh() * 2.0 + noise[i]
        });
        DesignBundle::new(y, w, shares, z, xc).unwrap()
    }

    #[test]
    fn path_zero_entry_and_shrinkage() {
        let bundle = toy_bundle(400, 1);
        let spec = SieveSpec::default();
        let cfg = PenaltyConfig::default();
        let path = fit_penalized_path(&bundle, &spec, None, &cfg).unwrap();
        let unpen = fit_plsim(&bundle, &spec, &cfg.fit).unwrap();
        assert!((path.entries[0].mse - unpen.objective).abs() < 1e-6);
        let last = path.entries.last().unwrap();
        assert!(last.beta.iter().all(|&b| b == 0.0));
        assert_eq!(last.df, last.params.iter().filter(|v| v.abs() >= ZERO_THRESHOLD).count());
        for e in &path.entries {
            for w in e.outer_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "outer iteration increased the objective");
            }
            for (p, m) in e.beta_plus.iter().zip(&e.beta_minus) {
                assert_eq!(p.min(*m), 0.0);
            }
        }
        let (count, _) = select_class_count(&path);
        assert_eq!(count, 2, "{:?}", path.entries[path.selected_index].beta);
    }

    #[test]
    fn sign_search_solver_agrees() {
        let bundle = toy_bundle(300, 2);
        let spec = SieveSpec::default();
        let base = fit_plsim(&bundle, &spec, &FitConfig::default()).unwrap();
        let cfg = PenaltyConfig { solver: PathSolver::SignSearch, ..PenaltyConfig::default() };
        let lam = 0.05;
        let a = fit_penalized(&bundle, &base.sieve, &base.params(), lam, &cfg).unwrap();
        let b = fit_penalized(&bundle, &base.sieve, &base.params(), lam, &PenaltyConfig::default()).unwrap();
        let p = ScadParams::new(lam, 3.7).unwrap();
        let fa = penalized_objective(&a.params, &bundle, &base.sieve, &p).unwrap();
        let fb = penalized_objective(&b.params, &bundle, &base.sieve, &p).unwrap();
        assert!((fa - fb).abs() < 1e-4 * fa.abs().max(1.0), "{fa} vs {fb}");
        for w in a.outer_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn penalized_objective_at_zero_lambda() {
        let bundle = toy_bundle(50, 3);
        let spec = SieveSpec::default();
        let layout = bundle.layout(&spec);
        let x: Vec<f64> = (0..layout.len()).map(|i| (i as f64).cos()).collect();
        let f = crate::estimator::objective(&x, &bundle, &spec).unwrap();
        assert_eq!(penalized_objective(&x, &bundle, &spec, &sp(0.0)).unwrap(), 0.5 * f);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn scad_continuous_at_knots(l in 1e-3f64..10.0, a in 2.01f64..10.0) {
            let p = ScadParams::new(l, a).unwrap();
            let quad = |v: f64| -(v * v - 2.0 * a * l * v + l * l) / (2.0 * (a - 1.0));
            prop_assert!((quad(l) - l * l).abs() < 1e-12 * (1.0 + l * l));
            prop_assert!((quad(a * l) - (a + 1.0) * l * l / 2.0).abs() < 1e-12 * (1.0 + a * l * l));
            prop_assert!((scad_abs(l, &p) - l * l).abs() < 1e-12 * (1.0 + l * l));
        }

        #[test]
        fn scad_derivative_matches_differences(l in 0.1f64..5.0, a in 2.5f64..6.0, t in 0.0f64..1.0) {
            let p = ScadParams::new(l, a).unwrap();
            let v = t * 1.5 * a * l;
            prop_assume!(v > 1e-3 && (v - l).abs() > 1e-3 && (v - a * l).abs() > 1e-3);
            let h = 1e-6 * (1.0 + v);
            let fd = (scad_abs(v + h, &p) - scad_abs(v - h, &p)) / (2.0 * h);
            let d = scad_derivative(v, &p);
            prop_assert!((fd - d).abs() <= 1e-6 * d.abs().max(1e-3));
        }

        #[test]
        fn dc_identity(v in -50.0f64..50.0, l in 0.0f64..5.0) {
            let p = ScadParams::new(l, 3.7).unwrap();
            let (h1, h2) = dc_parts(v, &p);
            prop_assert!((h1 - h2 - scad_abs(v.abs(), &p)).abs() < 1e-14 * (1.0 + h1));
        }

        #[test]
        fn proximal_matches_grid(u in -3.0f64..3.0, w in 0.0f64..2.0) {
            let x = proximal_step(&[u], &[0.0], 1.0, &[w])[0];
            let grid = (-40_000..=40_000)
                .map(|i| i as f64 * 1e-4)
                .min_by(|a, b| {
                    let f = |v: f64| 0.5 * (v - u).powi(2) + w * v.abs();
                    f(*a).total_cmp(&f(*b))
                })
                .unwrap();
            prop_assert!((x - grid).abs() <= 2e-4);
        }
    }
}

//! OLS baselines and the partially linear single-index NLS estimator.
//!
//! The outcome is `y = W theta + g(b) + e` where the bias term `g` is a sieve
//! series in the selection index `b = shares beta + z eta + x_c delta`.
//! Parameters are packed as `[theta, beta, eta, delta, alpha, tau]`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, TruncatedDataset};
use crate::error::{Error, Result};
use crate::opinion::{participant_share, OpinionSpace};
use crate::sieve::{SieveCoeffs, SieveSpec};

/// Least squares by Householder QR; errors when a column is (numerically) dependent.
pub fn fit_ols(y: &DVector<f64>, w: &DMatrix<f64>) -> Result<DVector<f64>> {
    let (n, p) = w.shape();
    if y.len() != n {
        return Err(Error::DimensionMismatch(format!("{} outcomes for {} rows", y.len(), n)));
    }
    if n <= p || p == 0 {
        return Err(Error::RankDeficient);
    }
    let qr = w.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().amax();
    if scale == 0.0 || r.diagonal().iter().any(|d| d.abs() <= 1e-10 * scale) {
        return Err(Error::RankDeficient);
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty).ok_or(Error::RankDeficient)
}

/// OLS with an appended intercept column; returns the slopes then the intercept.
pub fn fit_ols_intercept(y: &DVector<f64>, w: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = w.nrows();
    let x = w.clone().insert_column(w.ncols(), 1.0);
    debug_assert_eq!(x.nrows(), n);
    fit_ols(y, &x)
}

/// Regression inputs: outcome, substantive covariates and the index parts.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignBundle {
    pub y1: DVector<f64>,
    pub w: DMatrix<f64>,
    pub shares: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub xc: DMatrix<f64>,
}

impl DesignBundle {
    pub fn new(
        y1: DVector<f64>,
        w: DMatrix<f64>,
        shares: DMatrix<f64>,
        z: DMatrix<f64>,
        xc: DMatrix<f64>,
    ) -> Result<Self> {
        let n = y1.len();
        for (name, m) in [("w", &w), ("shares", &shares), ("z", &z), ("xc", &xc)] {
            if m.nrows() != n {
                return Err(Error::DimensionMismatch(format!("{name} has {} rows, expected {n}", m.nrows())));
            }
        }
        Ok(Self { y1, w, shares, z, xc })
    }

    pub fn n(&self) -> usize {
        self.y1.len()
    }

    pub fn layout(&self, spec: &SieveSpec) -> Layout {
        Layout {
            lw: self.w.ncols(),
            ls: self.shares.ncols(),
            lz: self.z.ncols(),
            lc: self.xc.ncols(),
            nb: spec.n_basis(),
        }
    }

    /// Same bundle with the share columns replaced.
    pub fn with_shares(&self, shares: DMatrix<f64>) -> Result<Self> {
        Self::new(self.y1.clone(), self.w.clone(), shares, self.z.clone(), self.xc.clone())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            y1: self.y1.select_rows(rows.iter()),
            w: self.w.select_rows(rows.iter()),
            shares: self.shares.select_rows(rows.iter()),
            z: self.z.select_rows(rows.iter()),
            xc: self.xc.select_rows(rows.iter()),
        }
    }
}

/// Positions of each parameter block in the packed vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub lw: usize,
    pub ls: usize,
    pub lz: usize,
    pub lc: usize,
    pub nb: usize,
}

impl Layout {
    pub fn theta(&self) -> std::ops::Range<usize> {
        0..self.lw
    }
    pub fn beta(&self) -> std::ops::Range<usize> {
        self.lw..self.lw + self.ls
    }
    pub fn eta(&self) -> std::ops::Range<usize> {
        let s = self.lw + self.ls;
        s..s + self.lz
    }
    pub fn delta(&self) -> std::ops::Range<usize> {
        let s = self.lw + self.ls + self.lz;
        s..s + self.lc
    }
    /// All index coefficients (beta, eta, delta).
    pub fn index(&self) -> std::ops::Range<usize> {
        self.lw..self.lw + self.ls + self.lz + self.lc
    }
    pub fn alpha(&self) -> usize {
        self.lw + self.ls + self.lz + self.lc
    }
    pub fn tau(&self) -> std::ops::Range<usize> {
        let s = self.alpha() + 1;
        s..s + self.nb
    }
    pub fn len(&self) -> usize {
        self.alpha() + 1 + self.nb
    }
    pub fn is_empty(&self) -> bool {
        false
    }
}

fn check_len(params: &[f64], layout: &Layout) -> Result<()> {
    if params.len() != layout.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} parameters, layout needs {}",
            params.len(),
            layout.len()
        )));
    }
    Ok(())
}

/// Selection index for every row.
pub fn index_values(params: &[f64], bundle: &DesignBundle, layout: &Layout) -> DVector<f64> {
    let coef = |r: std::ops::Range<usize>| DVector::from_column_slice(&params[r]);
    &bundle.shares * coef(layout.beta()) + &bundle.z * coef(layout.eta()) + &bundle.xc * coef(layout.delta())
}

/// Residuals plus, for each row, the bias-term slope in the index.
fn residuals_inner(
    params: &[f64],
    bundle: &DesignBundle,
    spec: &SieveSpec,
    layout: &Layout,
    basis_out: Option<&mut DMatrix<f64>>,
) -> (DVector<f64>, DVector<f64>) {
    let n = bundle.n();
    let b = index_values(params, bundle, layout);
    let theta = DVector::from_column_slice(&params[layout.theta()]);
    let tau = &params[layout.tau()];
    let alpha = params[layout.alpha()];
    let mut r = &bundle.y1 - &bundle.w * theta;
    let mut slope = DVector::zeros(n);
    let nb = layout.nb;
    let (mut f, mut df) = (vec![0.0; nb], vec![0.0; nb]);
    let mut basis_out = basis_out;
    for i in 0..n {
        spec.basis_with_derivative(b[i], &mut f, &mut df);
        let g: f64 = tau.iter().zip(&f).map(|(a, c)| a * c).sum();
        slope[i] = tau.iter().zip(&df).map(|(a, c)| a * c).sum();
        r[i] -= alpha + g;
        if let Some(m) = basis_out.as_deref_mut() {
            for j in 0..nb {
                m[(i, j)] = f[j];
            }
        }
    }
    (r, slope)
}

pub fn residuals(params: &[f64], bundle: &DesignBundle, spec: &SieveSpec) -> Result<DVector<f64>> {
    let layout = bundle.layout(spec);
    check_len(params, &layout)?;
    Ok(residuals_inner(params, bundle, spec, &layout, None).0)
}

/// Mean squared residual.
pub fn objective(params: &[f64], bundle: &DesignBundle, spec: &SieveSpec) -> Result<f64> {
    let r = residuals(params, bundle, spec)?;
    Ok(r.norm_squared() / bundle.n() as f64)
}

/// Residuals and their Jacobian with respect to the packed parameters.
pub fn residuals_and_jacobian(
    params: &[f64],
    bundle: &DesignBundle,
    spec: &SieveSpec,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let layout = bundle.layout(spec);
    check_len(params, &layout)?;
    let n = bundle.n();
    let mut basis = DMatrix::zeros(n, layout.nb);
    let (r, slope) = residuals_inner(params, bundle, spec, &layout, Some(&mut basis));
    let mut j = DMatrix::zeros(n, layout.len());
    for i in 0..n {
        for c in 0..layout.lw {
            j[(i, c)] = -bundle.w[(i, c)];
        }
        let (sr, zr, cr) = (bundle.shares.row(i), bundle.z.row(i), bundle.xc.row(i));
        for (c, v) in layout.index().zip(sr.iter().chain(zr.iter()).chain(cr.iter())) {
            j[(i, c)] = -slope[i] * v;
        }
        j[(i, layout.alpha())] = -1.0;
        for (c, k) in layout.tau().zip(0..layout.nb) {
            j[(i, c)] = -basis[(i, k)];
        }
    }
    Ok((r, j))
}

fn value_and_gradient(params: &[f64], bundle: &DesignBundle, spec: &SieveSpec, layout: &Layout) -> (f64, Vec<f64>) {
    let n = bundle.n();
    let nf = n as f64;
    let mut basis = DMatrix::zeros(n, layout.nb);
    let (r, slope) = residuals_inner(params, bundle, spec, layout, Some(&mut basis));
    let mut g = vec![0.0; layout.len()];
    let c = -2.0 / nf;
    let wr = bundle.w.tr_mul(&r);
    for (k, v) in layout.theta().zip(wr.iter()) {
        g[k] = c * v;
    }
    let rs = r.component_mul(&slope);
    let parts = [&bundle.shares, &bundle.z, &bundle.xc];
    let mut pos = layout.lw;
    for m in parts {
        let v = m.tr_mul(&rs);
        for x in v.iter() {
            g[pos] = c * x;
            pos += 1;
        }
    }
    g[layout.alpha()] = c * r.sum();
    let br = basis.tr_mul(&r);
    for (k, v) in layout.tau().zip(br.iter()) {
        g[k] = c * v;
    }
    (r.norm_squared() / nf, g)
}

/// Analytic gradient of the mean squared residual.
pub fn gradient(params: &[f64], bundle: &DesignBundle, spec: &SieveSpec) -> Result<Vec<f64>> {
    let layout = bundle.layout(spec);
    check_len(params, &layout)?;
    Ok(value_and_gradient(params, bundle, spec, &layout).1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    /// Re-center and re-scale the sieve transform at the starting index.
    pub auto_scale: bool,
    /// When false the sieve weights stay at zero, leaving OLS with an intercept.
    pub sieve_free: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { restarts: 3, max_iter: 2000, tol: 1e-6, seed: 0, auto_scale: true, sieve_free: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub eta: Vec<f64>,
    pub delta: Vec<f64>,
    pub sieve: SieveSpec,
    pub sieve_coeffs: SieveCoeffs,
    pub objective: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    pub n_evals: usize,
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

impl FitResult {
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.theta.clone();
        p.extend(&self.beta);
        p.extend(&self.eta);
        p.extend(&self.delta);
        p.push(self.sieve_coeffs.alpha);
        p.extend(&self.sieve_coeffs.tau);
        p
    }

    fn from_params(p: &[f64], layout: &Layout, sieve: SieveSpec) -> Self {
        Self {
            theta: p[layout.theta()].to_vec(),
            beta: p[layout.beta()].to_vec(),
            eta: p[layout.eta()].to_vec(),
            delta: p[layout.delta()].to_vec(),
            sieve,
            sieve_coeffs: SieveCoeffs { alpha: p[layout.alpha()], tau: p[layout.tau()].to_vec() },
            objective: f64::NAN,
            gradient_norm: f64::NAN,
            converged: false,
            n_evals: 0,
            objective_trace: Vec::new(),
        }
    }
}

/// Outcome of a quasi-Newton minimization.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    pub n_evals: usize,
    pub trace: Vec<f64>,
}

/// BFGS with Armijo backtracking over the coordinates where `free` is true.
pub fn minimize_bfgs<F>(mut f: F, x0: &[f64], free: &[bool], max_iter: usize, tol: f64) -> Minimum
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let idx: Vec<usize> = (0..x0.len()).filter(|&i| free[i]).collect();
    let m = idx.len();
    let mut x = x0.to_vec();
    let (mut fx, g) = f(&x);
    let mut n_evals = 1;
    let pick = |g: &[f64]| DVector::from_iterator(m, idx.iter().map(|&i| g[i]));
    let mut gx = pick(&g);
    let mut h = DMatrix::<f64>::identity(m, m);
    let mut trace = vec![fx];
    let mut converged = gx.norm() < tol;
    let mut iter = 0;
    while !converged && iter < max_iter {
        iter += 1;
        let mut dir = -(&h * &gx);
        let mut slope = gx.dot(&dir);
        if !(slope < 0.0) {
            h = DMatrix::identity(m, m);
            dir = -gx.clone();
            slope = -gx.norm_squared();
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut xn = x.clone();
            for (k, &i) in idx.iter().enumerate() {
                xn[i] += step * dir[k];
            }
            let (fnew, gnew) = f(&xn);
            n_evals += 1;
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            break;
        };
        let gn = pick(&gnew);
        let s = DVector::from_iterator(m, idx.iter().map(|&i| xn[i] - x[i]));
        let yv = &gn - &gx;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            h += (&s * s.transpose()) * (rho * rho * yhy + rho) - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        let small_change = (fx - fnew).abs() <= 1e-15 * fx.abs().max(1e-300);
        x = xn;
        fx = fnew;
        gx = gn;
        trace.push(fx);
        converged = gx.norm() < tol;
        if small_change && !converged && s.norm() < 1e-14 {
            break;
        }
    }
    Minimum { x, value: fx, gradient_norm: gx.norm(), converged, n_evals, trace }
}

/// Sample mean and standard deviation.
fn mean_sd(v: &DVector<f64>) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.sum() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

/// Starting index coefficients: slopes of a linear regression of the outcome
/// on W, a constant and the index parts.
fn index_direction(bundle: &DesignBundle, layout: &Layout) -> Vec<f64> {
    let n = bundle.n();
    let mut cols = vec![bundle.w.clone(), DMatrix::from_element(n, 1, 1.0)];
    cols.extend([bundle.shares.clone(), bundle.z.clone(), bundle.xc.clone()]);
    let total: usize = cols.iter().map(|c| c.ncols()).sum();
    let mut x = DMatrix::zeros(n, total);
    let mut pos = 0;
    for c in &cols {
        x.columns_mut(pos, c.ncols()).copy_from(c);
        pos += c.ncols();
    }
    let k = layout.ls + layout.lz + layout.lc;
    let svd = x.svd(true, true);
    match svd.solve(&bundle.y1, 1e-10) {
        Ok(c) => {
            let d: Vec<f64> = c.rows(layout.lw + 1, k).iter().cloned().collect();
            if d.iter().all(|v| v.is_finite()) && d.iter().any(|v| v.abs() > 1e-10) {
                return d;
            }
            let mut d = vec![0.0; k];
            d[0] = 1.0;
            d
        }
        Err(_) => {
            let mut d = vec![0.0; k];
            d[0] = 1.0;
            d
        }
    }
}

/// Profile least squares for `theta`, `alpha` and `tau` at fixed index coefficients.
pub(crate) fn profile_linear(params: &mut [f64], bundle: &DesignBundle, spec: &SieveSpec, layout: &Layout, sieve_free: bool) {
    let n = bundle.n();
    let b = index_values(params, bundle, layout);
    let nb = if sieve_free { layout.nb } else { 0 };
    let mut x = DMatrix::zeros(n, layout.lw + 1 + nb);
    x.columns_mut(0, layout.lw).copy_from(&bundle.w);
    for i in 0..n {
        x[(i, layout.lw)] = 1.0;
        if sieve_free {
            let f = spec.basis(b[i]);
            for j in 0..nb {
                x[(i, layout.lw + 1 + j)] = f[j];
            }
        }
    }
    if let Ok(c) = x.svd(true, true).solve(&bundle.y1, 1e-10) {
        params[layout.theta()].copy_from_slice(&c.as_slice()[..layout.lw]);
        params[layout.alpha()] = c[layout.lw];
        for (k, j) in layout.tau().zip(0..nb) {
            params[k] = c[layout.lw + 1 + j];
        }
    }
}

/// Starting point and the (possibly re-centered) sieve specification.
pub fn warm_start(bundle: &DesignBundle, spec: &SieveSpec, config: &FitConfig) -> Result<(Vec<f64>, SieveSpec)> {
    spec.validate()?;
    let layout = bundle.layout(spec);
    let mut p = vec![0.0; layout.len()];
    let dir = index_direction(bundle, &layout);
    p[layout.index()].copy_from_slice(&dir);
    let mut sieve = *spec;
    if config.auto_scale {
        let (c, s) = mean_sd(&index_values(&p, bundle, &layout));
        sieve.center = c;
        sieve.scale = if s > 1e-12 && s.is_finite() { s } else { 1.0 };
    }
    profile_linear(&mut p, bundle, &sieve, &layout, config.sieve_free);
    Ok((p, sieve))
}

/// Minimizes the objective from a given start with the sieve specification fixed.
pub fn fit_plsim_from(
    bundle: &DesignBundle,
    sieve: &SieveSpec,
    start: &[f64],
    free: &[bool],
    config: &FitConfig,
) -> Result<FitResult> {
    let layout = bundle.layout(sieve);
    check_len(start, &layout)?;
    let min = minimize_bfgs(
        |x| value_and_gradient(x, bundle, sieve, &layout),
        start,
        free,
        config.max_iter,
        config.tol,
    );
    let mut out = FitResult::from_params(&min.x, &layout, *sieve);
    out.objective = min.value;
    out.gradient_norm = min.gradient_norm;
    out.converged = min.converged;
    out.n_evals = min.n_evals;
    out.objective_trace = min.trace;
    Ok(out)
}

/// Mask of free coordinates for an unrestricted fit.
pub fn free_mask(layout: &Layout, sieve_free: bool) -> Vec<bool> {
    let mut free = vec![true; layout.len()];
    if !sieve_free {
        for k in layout.index().chain(layout.tau()) {
            free[k] = false;
        }
    }
    free
}

/// Quasi-Newton NLS with seeded restarts around a deterministic warm start.
pub fn fit_plsim(bundle: &DesignBundle, spec: &SieveSpec, config: &FitConfig) -> Result<FitResult> {
    let layout = bundle.layout(spec);
    if bundle.n() <= layout.len() {
        return Err(Error::InvalidDataset(format!(
            "{} rows for {} parameters",
            bundle.n(),
            layout.len()
        )));
    }
    let (start, sieve) = warm_start(bundle, spec, config)?;
    let free = free_mask(&layout, config.sieve_free);
    let mut best = fit_plsim_from(bundle, &sieve, &start, &free, config)?;
    let mut evals = best.n_evals;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    for _ in 1..config.restarts.max(1) {
        if !config.sieve_free {
            break;
        }
        let mut p = start.clone();
        for k in layout.index() {
            p[k] *= 1.0 + 0.3 * unit.sample(&mut rng);
        }
        profile_linear(&mut p, bundle, &sieve, &layout, true);
        let fit = fit_plsim_from(bundle, &sieve, &p, &free, config)?;
        evals += fit.n_evals;
        if fit.objective < best.objective {
            best = fit;
        }
    }
    best.n_evals = evals;
    Ok(best)
}

/// One column of participant shares for rows labeled under a fitted class model.
pub fn share_column(labeled: &LabeledDataset<TruncatedDataset>, space: &OpinionSpace) -> Result<DVector<f64>> {
    let x = &labeled.base.x;
    let mut out = DVector::zeros(labeled.base.n());
    let mut row = vec![0.0; x.ncols()];
    for i in 0..out.len() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = x[(i, c)];
        }
        out[i] = participant_share(space, &row, labeled.labels[i])?;
    }
    Ok(out)
}

/// Design bundle with one share column per (labels, opinion space) source.
pub fn build_bundle(
    truncated: &TruncatedDataset,
    sources: &[(&[usize], &OpinionSpace)],
) -> Result<DesignBundle> {
    let n = truncated.n();
    let mut shares = DMatrix::zeros(n, sources.len());
    for (c, (labels, space)) in sources.iter().enumerate() {
        let labeled = LabeledDataset::new(truncated.clone(), labels.to_vec(), space.k)?;
        shares.set_column(c, &share_column(&labeled, space)?);
    }
    DesignBundle::new(truncated.y1.clone(), truncated.w.clone(), shares, truncated.z.clone(), truncated.x_contextual())
}

/// Recodes nested share columns as successive differences so that a model
/// using only the first `k` sources has nonzero weights on exactly `k` columns.
pub fn nested_increments(shares: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = shares.clone();
    for c in (1..shares.ncols()).rev() {
        let diff = shares.column(c) - shares.column(c - 1);
        out.set_column(c, &diff);
    }
    out
}

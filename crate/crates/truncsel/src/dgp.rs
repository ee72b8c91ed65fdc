//! Monte Carlo data generation for the selection model.
//!
//! Each reference group (a covariate cell and a latent class) has a target
//! participant share. The individual covariate `z` is drawn from a group
//! specific mixture over a density dictionary whose weights are solved so
//! that the expected participation in each class equals its target. The two
//! disturbances share a Clayton copula and a three-component mixture marginal.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use gauss_quad::GaussLegendre;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Gamma, Normal};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::data::{Responses, SurveyDataset, TruncatedDataset};
use crate::error::{Error, Result};
use crate::lca::{prior_probs, PriorParams};
use crate::sieve::logistic;

const MIX_WEIGHTS: [f64; 3] = [0.4, 0.5, 0.1];

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub mu: f64,
    pub sigma_a: f64,
    pub sigma_b: f64,
    pub phi: f64,
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        Self { mu: 4.0, sigma_a: 3.5, sigma_b: 2.5, phi: 2.0 }
    }
}

/// Mixture `0.4 N(mu, sa^2) + 0.5 N(-mu, sb^2) + 0.1 Gamma(shape mu*phi, rate phi)`.
#[derive(Debug, Clone)]
pub struct Disturbance {
    a: Normal,
    b: Normal,
    g: Gamma,
}

impl Disturbance {
    pub fn new(spec: &DisturbanceSpec) -> Result<Self> {
        let bad = |e: String| Error::InvalidConfig(format!("disturbance: {e}"));
        Ok(Self {
            a: Normal::new(spec.mu, spec.sigma_a).map_err(|e| bad(e.to_string()))?,
            b: Normal::new(-spec.mu, spec.sigma_b).map_err(|e| bad(e.to_string()))?,
            g: Gamma::new(spec.mu * spec.phi, spec.phi).map_err(|e| bad(e.to_string()))?,
        })
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let g = if x > 0.0 { self.g.cdf(x) } else { 0.0 };
        MIX_WEIGHTS[0] * self.a.cdf(x) + MIX_WEIGHTS[1] * self.b.cdf(x) + MIX_WEIGHTS[2] * g
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let g = if x > 0.0 { self.g.pdf(x) } else { 0.0 };
        MIX_WEIGHTS[0] * self.a.pdf(x) + MIX_WEIGHTS[1] * self.b.pdf(x) + MIX_WEIGHTS[2] * g
    }

    /// Inverse CDF by safeguarded Newton iterations inside a shrinking bracket.
    pub fn quantile(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if u >= 1.0 {
            return f64::INFINITY;
        }
        let (mut lo, mut hi) = (-50.0, 50.0);
        while self.cdf(lo) > u {
            lo *= 2.0;
        }
        while self.cdf(hi) < u {
            hi *= 2.0;
        }
        let mut x = 0.0f64.clamp(lo, hi);
        for _ in 0..200 {
            let fx = self.cdf(x) - u;
            if fx == 0.0 {
                return x;
            }
            if fx > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            if hi - lo < 1e-10 {
                break;
            }
            let d = self.pdf(x);
            let newton = x - fx / d;
            let next = if d > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if (next - x).abs() < 1e-13 {
                return next;
            }
            x = next;
        }
        x
    }
}

/// One entry of the density dictionary for the individual covariate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DensitySpec {
    Normal { mean: f64, sd: f64 },
    Gamma { shape: f64, scale: f64 },
    /// Negative of a lognormal variable with the given median and log-scale.
    ReflectedLogNormal { median: f64, sigma: f64 },
}

impl DensitySpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DensitySpec::Normal { mean, sd } => mean.is_finite() && sd > 0.0,
            DensitySpec::Gamma { shape, scale } => shape > 0.0 && scale > 0.0,
            DensitySpec::ReflectedLogNormal { median, sigma } => median > 0.0 && sigma > 0.0,
        };
        if ok && self.sd().is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid dictionary density {self:?}")))
        }
    }

    pub fn pdf(&self, z: f64) -> f64 {
        match *self {
            DensitySpec::Normal { mean, sd } => {
                let u = (z - mean) / sd;
                (-0.5 * u * u).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            }
            DensitySpec::Gamma { shape, scale } => {
                if z <= 0.0 {
                    return 0.0;
                }
                ((shape - 1.0) * z.ln() - z / scale - ln_gamma(shape) - shape * scale.ln()).exp()
            }
            DensitySpec::ReflectedLogNormal { median, sigma } => {
                if z >= 0.0 {
                    return 0.0;
                }
                let y = -z;
                let u = (y.ln() - median.ln()) / sigma;
                (-0.5 * u * u).exp() / (y * sigma * (2.0 * std::f64::consts::PI).sqrt())
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            DensitySpec::Normal { mean, .. } => mean,
            DensitySpec::Gamma { shape, scale } => shape * scale,
            DensitySpec::ReflectedLogNormal { median, sigma } => -median * (0.5 * sigma * sigma).exp(),
        }
    }

    pub fn sd(&self) -> f64 {
        match *self {
            DensitySpec::Normal { sd, .. } => sd,
            DensitySpec::Gamma { shape, scale } => shape.sqrt() * scale,
            DensitySpec::ReflectedLogNormal { median, sigma } => {
                let s2 = sigma * sigma;
                median * (0.5 * s2).exp() * (s2.exp() - 1.0).sqrt()
            }
        }
    }

    /// Mean plus or minus ten standard deviations, clipped to the support.
    pub fn support(&self) -> (f64, f64) {
        let (m, s) = (self.mean(), self.sd());
        let (mut lo, mut hi) = (m - 10.0 * s, m + 10.0 * s);
        match self {
            DensitySpec::Gamma { .. } => lo = lo.max(0.0),
            DensitySpec::ReflectedLogNormal { .. } => hi = hi.min(0.0),
            DensitySpec::Normal { .. } => {}
        }
        (lo, hi)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            DensitySpec::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            DensitySpec::Gamma { shape, scale } => GammaDist::new(shape, scale).unwrap().sample(rng),
            DensitySpec::ReflectedLogNormal { median, sigma } => {
                -(median.ln() + sigma * rng.sample::<f64, _>(StandardNormal)).exp()
            }
        }
    }
}

fn gl_nodes(n: usize) -> &'static [(f64, f64)] {
    static GL64: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    static GL128: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    let build = || GaussLegendre::new(n.try_into().unwrap()).as_node_weight_pairs().to_vec();
    match n {
        64 => GL64.get_or_init(build),
        128 => GL128.get_or_init(build),
        _ => panic!("unsupported quadrature size {n}"),
    }
}

/// `∫ f(z) pdf(z) dz` over the density's effective support.
fn integrate_density(d: &DensitySpec, nodes: &[(f64, f64)], f: impl Fn(f64) -> f64) -> f64 {
    let (lo, hi) = d.support();
    let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
    nodes
        .iter()
        .map(|&(x, w)| {
            let z = mid + half * x;
            w * d.pdf(z) * f(z)
        })
        .sum::<f64>()
        * half
}

/// Dictionary tuned so that three-class equilibria exist over the covariate
/// range; locations are expressed in units of `4 / |eta|`.
pub fn calibrated_dictionary(eta: f64) -> Vec<DensitySpec> {
    let sc = 4.0 / eta.abs().max(1e-12);
    let mut d: Vec<DensitySpec> = [-7.5, -6.0, -5.0, -4.0, -3.0, -2.0]
        .iter()
        .map(|m| DensitySpec::Normal { mean: m * sc, sd: 0.3 * sc })
        .collect();
    d.extend([16.0, 36.0, 64.0].iter().map(|&shape| DensitySpec::Gamma { shape, scale: 0.25 * sc }));
    d.extend([10.0, 14.0, 18.0].iter().map(|m| DensitySpec::ReflectedLogNormal { median: m * sc, sigma: 0.05 }));
    d
}

/// Narrow normals on a wide grid, appended when the base dictionary cannot
/// reach a target.
pub fn dictionary_extension(eta: f64) -> Vec<DensitySpec> {
    let sc = 4.0 / eta.abs().max(1e-12);
    (0..=28).map(|i| DensitySpec::Normal { mean: (-10.0 + 0.5 * i as f64) * sc, sd: 0.15 * sc }).collect()
}

/// Class-conditional response frequencies, `[item][class][category]`.
pub fn default_manifest_frequencies() -> Vec<Vec<Vec<f64>>> {
    vec![
        vec![vec![0.6, 0.1, 0.3], vec![0.4, 0.4, 0.2], vec![0.3, 0.1, 0.6]],
        vec![vec![0.2, 0.8], vec![0.5, 0.5], vec![0.7, 0.3]],
        vec![vec![0.3, 0.6, 0.1], vec![0.1, 0.4, 0.5], vec![0.7, 0.2, 0.1]],
        vec![vec![0.1, 0.6, 0.2, 0.1], vec![0.5, 0.3, 0.1, 0.1], vec![0.3, 0.1, 0.1, 0.5]],
        vec![vec![0.1, 0.1, 0.8], vec![0.6, 0.3, 0.1], vec![0.8, 0.1, 0.1]],
        vec![vec![0.9, 0.02, 0.08], vec![0.02, 0.08, 0.9], vec![0.08, 0.9, 0.02]],
        vec![vec![0.95, 0.05], vec![0.05, 0.95], vec![0.5, 0.5]],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpSpec {
    pub n_population: usize,
    pub n_experts: usize,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub eta: f64,
    pub theta: [f64; 2],
    pub class_count: usize,
    pub share_ranges: Vec<[f64; 2]>,
    pub disturbance: DisturbanceSpec,
    pub copula_theta: f64,
    pub dictionary: Vec<DensitySpec>,
    pub dictionary_extension: Vec<DensitySpec>,
    pub covariate_cov: [[f64; 2]; 2],
    pub manifest_freqs: Vec<Vec<Vec<f64>>>,
    pub true_prior: PriorParams,
    pub seed: u64,
    pub enforce_uniqueness: bool,
    pub weight_grid_step: f64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        let eta = -10.0;
        let c = 0.5 * 6f64.sqrt();
        Self {
            n_population: 2000,
            n_experts: 10_000,
            alpha: -30.0,
            beta: 25.0,
            delta: 1.5,
            eta,
            theta: [2.0, 4.0],
            class_count: 3,
            share_ranges: vec![[0.05, 0.4], [0.4, 0.75], [0.65, 0.95]],
            disturbance: DisturbanceSpec::default(),
            copula_theta: 4.0,
            dictionary: calibrated_dictionary(eta),
            dictionary_extension: dictionary_extension(eta),
            covariate_cov: [[2.0, c], [c, 3.0]],
            manifest_freqs: default_manifest_frequencies(),
            true_prior: PriorParams {
                intercepts: vec![-0.2, 0.0],
                slopes: vec![vec![0.8, -0.5], vec![-0.4, 0.6]],
            },
            seed: 20_240_601,
            enforce_uniqueness: false,
            weight_grid_step: 0.01,
        }
    }
}

impl DgpSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        let g = self.class_count;
        if g == 0 || self.share_ranges.len() != g {
            return bad("share_ranges must have one entry per class");
        }
        if self.share_ranges.iter().any(|r| !(0.0 < r[0] && r[0] < r[1] && r[1] < 1.0)) {
            return bad("share ranges must satisfy 0 < low < high < 1");
        }
        if !(self.copula_theta > 0.0) {
            return bad("copula_theta must be positive");
        }
        let c = self.covariate_cov;
        if !(c[0][0] > 0.0 && c[0][0] * c[1][1] - c[0][1] * c[1][0] > 0.0 && c[0][1] == c[1][0]) {
            return bad("covariate_cov must be symmetric positive definite");
        }
        if self.dictionary.is_empty() {
            return bad("dictionary is empty");
        }
        for d in self.dictionary.iter().chain(&self.dictionary_extension) {
            d.validate()?;
        }
        if self.manifest_freqs.is_empty() {
            return bad("manifest_freqs is empty");
        }
        for item in &self.manifest_freqs {
            if item.len() != g {
                return bad("manifest_freqs needs one column per class");
            }
            for cls in item {
                if cls.len() != item[0].len()
                    || cls.iter().any(|p| !(0.0..=1.0).contains(p))
                    || (cls.iter().sum::<f64>() - 1.0).abs() > 1e-9
                {
                    return bad("manifest frequencies must be probability vectors");
                }
            }
        }
        if self.true_prior.intercepts.len() != g - 1 || self.true_prior.slopes.iter().any(|s| s.len() != 2) {
            return bad("true_prior must have class_count-1 rows of two slopes");
        }
        if !(self.weight_grid_step > 0.0) {
            return bad("weight_grid_step must be positive");
        }
        Disturbance::new(&self.disturbance).map(|_| ())
    }

    fn selection_offset(&self, p: f64, x_c: f64) -> f64 {
        self.alpha + self.beta * p + self.delta * x_c
    }
}

/// Target participant share of class `t` (0-based) at covariates `(x, x_c)`.
pub fn target_share(x: f64, x_c: f64, t: usize, ranges: &[[f64; 2]]) -> f64 {
    let [lo, hi] = ranges[t];
    lo + (hi - lo) * logistic(-2.0 + 3.6 * (std_normal_cdf(x) * std_normal_cdf(x_c)).sqrt())
}

/// Participation probability of an individual with covariate `z` in a group with share `p`.
pub fn q_value(p: f64, z: f64, x_c: f64, spec: &DgpSpec) -> Result<f64> {
    let d = Disturbance::new(&spec.disturbance)?;
    Ok(participation(&d, spec.selection_offset(p, x_c) + spec.eta * z))
}

/// `P(index + e >= 0) = 1 - F(-index)`.
fn participation(d: &Disturbance, index: f64) -> f64 {
    1.0 - d.cdf(-index)
}

/// Expected participation for each class target under each dictionary density.
pub fn mixture_moment_matrix(spec: &DgpSpec, targets: &[f64], x_c: f64) -> Result<DMatrix<f64>> {
    let d = Disturbance::new(&spec.disturbance)?;
    moment_matrix_with(&d, spec, &spec.dictionary, targets, x_c, |dens, f| {
        let coarse = integrate_density(dens, gl_nodes(64), &f);
        let fine = integrate_density(dens, gl_nodes(128), &f);
        let diff = (coarse - fine).abs();
        if diff > 1e-8 {
            Err(Error::QuadratureNotConverged { diff })
        } else {
            Ok(coarse)
        }
    })
}

fn moment_matrix_with<Q>(
    d: &Disturbance,
    spec: &DgpSpec,
    dict: &[DensitySpec],
    targets: &[f64],
    x_c: f64,
    quad: Q,
) -> Result<DMatrix<f64>>
where
    Q: Fn(&DensitySpec, &dyn Fn(f64) -> f64) -> Result<f64>,
{
    let mut m = DMatrix::zeros(targets.len(), dict.len());
    for (t, &p) in targets.iter().enumerate() {
        let off = spec.selection_offset(p, x_c);
        for (l, dens) in dict.iter().enumerate() {
            m[(t, l)] = quad(dens, &|z| participation(d, off + spec.eta * z))?;
        }
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub w: Vec<f64>,
    pub residual: f64,
}

/// Inequality rows keeping the solved equilibrium locally unique.
#[derive(Debug, Clone, PartialEq)]
pub struct UniquenessRows {
    /// Moments at shares just below the targets; require `lower_m w > lower`.
    pub lower_m: DMatrix<f64>,
    pub lower: Vec<f64>,
    /// Moments at shares just above the targets; require `upper_m w < upper`.
    pub upper_m: DMatrix<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightOptions {
    pub uniqueness: Option<UniquenessRows>,
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let mut scratch = v.to_vec();
    project_simplex_into(v, &mut out, &mut scratch);
    out
}

fn project_simplex_into(v: &[f64], out: &mut [f64], scratch: &mut [f64]) {
    scratch.copy_from_slice(v);
    scratch.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut tau = 0.0;
    for (i, &ui) in scratch.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            tau = t;
        }
    }
    for (o, x) in out.iter_mut().zip(v) {
        *o = (x - tau).max(0.0);
    }
}

const UNIQUENESS_WEIGHT: f64 = 100.0;
/// Largest accepted distance between reached and target shares.
const MAX_WEIGHT_RESIDUAL: f64 = 1e-4;

/// Buffers for the weight objective; `grad` is filled when requested.
struct WeightWork {
    r: Vec<f64>,
    grad: Vec<f64>,
}

/// `a w - b` into `out`.
fn affine_into(a: &DMatrix<f64>, w: &[f64], b: &[f64], out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(b);
    for o in out.iter_mut() {
        *o = -*o;
    }
    for (l, &wl) in w.iter().enumerate() {
        for (t, o) in out.iter_mut().enumerate() {
            *o += a[(t, l)] * wl;
        }
    }
}

/// Adds `scale * a' v` to `grad`.
fn add_transposed(a: &DMatrix<f64>, v: &[f64], scale: f64, grad: &mut [f64]) {
    for (l, g) in grad.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (t, &vt) in v.iter().enumerate() {
            acc += a[(t, l)] * vt;
        }
        *g += scale * acc;
    }
}

fn weight_objective(m: &DMatrix<f64>, p: &[f64], opt: &WeightOptions, w: &[f64], work: &mut WeightWork, with_grad: bool) -> f64 {
    affine_into(m, w, p, &mut work.r);
    let mut f: f64 = work.r.iter().map(|v| v * v).sum();
    if with_grad {
        work.grad.iter_mut().for_each(|g| *g = 0.0);
        add_transposed(m, &work.r, 2.0, &mut work.grad);
    }
    if let Some(u) = &opt.uniqueness {
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        affine_into(&u.lower_m, w, &u.lower, &mut lo);
        affine_into(&u.upper_m, w, &u.upper, &mut hi);
        // violations of lower_m w > lower and upper_m w < upper
        lo.iter_mut().for_each(|v| *v = (-*v).max(0.0));
        hi.iter_mut().for_each(|v| *v = v.max(0.0));
        f += UNIQUENESS_WEIGHT * (lo.iter().chain(&hi).map(|v| v * v).sum::<f64>());
        if with_grad {
            add_transposed(&u.upper_m, &hi, 2.0 * UNIQUENESS_WEIGHT, &mut work.grad);
            add_transposed(&u.lower_m, &lo, -2.0 * UNIQUENESS_WEIGHT, &mut work.grad);
        }
    }
    f
}

/// Least-squares mixture weights on the simplex by accelerated projected gradient.
pub fn solve_mixture_weights(m: &DMatrix<f64>, targets: &[f64], opt: &WeightOptions) -> Result<MixtureWeights> {
    let (g, l) = m.shape();
    if targets.len() != g || l == 0 {
        return Err(Error::DimensionMismatch("moment matrix and targets".into()));
    }
    let mut lip = 2.0 * m.norm_squared();
    if let Some(u) = &opt.uniqueness {
        lip += 2.0 * UNIQUENESS_WEIGHT * (u.lower_m.norm_squared() + u.upper_m.norm_squared());
    }
    let lip = lip.max(1e-12);
    let mut work = WeightWork { r: Vec::with_capacity(g), grad: vec![0.0; l] };
    let mut w = vec![1.0 / l as f64; l];
    let mut fw = weight_objective(m, targets, opt, &w, &mut work, false);
    let mut y = w.clone();
    let mut step = vec![0.0; l];
    let mut wn = vec![0.0; l];
    let mut scratch = vec![0.0; l];
    let mut t = 1.0f64;
    for _ in 0..200_000 {
        let fy = weight_objective(m, targets, opt, &y, &mut work, true);
        if opt.uniqueness.is_none() {
            // convexity bound on the optimum; stop once it proves infeasibility
            let gy: f64 = work.grad.iter().zip(&y).map(|(a, b)| a * b).sum();
            let gmin = work.grad.iter().cloned().fold(f64::INFINITY, f64::min);
            if fy + gmin - gy > MAX_WEIGHT_RESIDUAL * MAX_WEIGHT_RESIDUAL {
                break;
            }
        }
        for ((s, a), b) in step.iter_mut().zip(&y).zip(&work.grad) {
            *s = a - b / lip;
        }
        project_simplex_into(&step, &mut wn, &mut scratch);
        let mapping = wn.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() * lip;
        let fn_ = weight_objective(m, targets, opt, &wn, &mut work, false);
        if fn_ > fw {
            // restart momentum
            y.copy_from_slice(&w);
            t = 1.0;
            continue;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let c = (t - 1.0) / tn;
        for ((yi, a), b) in y.iter_mut().zip(&wn).zip(&w) {
            *yi = a + (a - b) * c;
        }
        t = tn;
        std::mem::swap(&mut w, &mut wn);
        fw = fn_;
        if mapping < 1e-10 || fw < 1e-22 {
            break;
        }
    }
    let s: f64 = w.iter().sum();
    let w: Vec<f64> = w.iter().map(|v| v / s).collect();
    let residual = (m * DVector::from_column_slice(&w) - DVector::from_column_slice(targets)).norm();
    if residual > MAX_WEIGHT_RESIDUAL {
        return Err(Error::InfeasibleTarget { residual });
    }
    Ok(MixtureWeights { w, residual })
}

/// Pairs `(u1, u2)` from a Clayton copula by conditional inversion.
pub fn sample_clayton(n: usize, theta: f64, rng: &mut impl Rng) -> Vec<(f64, f64)> {
    (0..n).map(|_| clayton_pair(theta, rng)).collect()
}

fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

fn clayton_pair(theta: f64, rng: &mut impl Rng) -> (f64, f64) {
    let u1 = open_unit(rng);
    let t = open_unit(rng);
    let u2 = ((t.powf(-theta / (1.0 + theta)) - 1.0) * u1.powf(-theta) + 1.0).powf(-1.0 / theta);
    (u1, u2)
}

pub fn sample_disturbances(n: usize, spec: &DgpSpec, rng: &mut impl Rng) -> Result<Vec<(f64, f64)>> {
    let d = Disturbance::new(&spec.disturbance)?;
    Ok(sample_clayton(n, spec.copula_theta, rng)
        .into_iter()
        .map(|(u1, u2)| (d.quantile(u1), d.quantile(u2)))
        .collect())
}

/// Tabulated `a -> ∫ P(a + eta z + e >= 0) pdf_l(z) dz` with its derivative,
/// interpolated by cubic Hermite polynomials.
#[derive(Debug)]
struct MomentTable {
    a0: f64,
    step: f64,
    values: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
}

impl MomentTable {
    fn build(d: &Disturbance, eta: f64, dict: &[DensitySpec], a0: f64, a1: f64, step: f64) -> Self {
        let n = ((a1 - a0) / step).ceil() as usize + 1;
        let nodes = gl_nodes(64);
        let mut values = Vec::with_capacity(dict.len());
        let mut slopes = Vec::with_capacity(dict.len());
        for dens in dict {
            let (lo, hi) = dens.support();
            let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
            let pts: Vec<(f64, f64)> = nodes
                .iter()
                .map(|&(x, w)| {
                    let z = mid + half * x;
                    (z, w * half * dens.pdf(z))
                })
                .collect();
            let mut v = Vec::with_capacity(n);
            let mut s = Vec::with_capacity(n);
            for i in 0..n {
                let a = a0 + step * i as f64;
                let (mut h, mut dh) = (0.0, 0.0);
                for &(z, wz) in &pts {
                    let u = -(a + eta * z);
                    h += wz * (1.0 - d.cdf(u));
                    dh += wz * d.pdf(u);
                }
                v.push(h);
                s.push(dh);
            }
            values.push(v);
            slopes.push(s);
        }
        Self { a0, step, values, slopes }
    }

    fn eval(&self, l: usize, a: f64) -> Option<f64> {
        let pos = (a - self.a0) / self.step;
        let n = self.values[l].len();
        if !(pos >= 0.0) || pos > (n - 1) as f64 {
            return None;
        }
        let i = (pos.floor() as usize).min(n - 2);
        let s = pos - i as f64;
        let (y0, y1) = (self.values[l][i], self.values[l][i + 1]);
        let (m0, m1) = (self.slopes[l][i] * self.step, self.slopes[l][i + 1] * self.step);
        let s2 = s * s;
        let s3 = s2 * s;
        Some(
            (2.0 * s3 - 3.0 * s2 + 1.0) * y0
                + (s3 - 2.0 * s2 + s) * m0
                + (-2.0 * s3 + 3.0 * s2) * y1
                + (s3 - s2) * m1,
        )
    }
}

/// A complete simulated population before truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct CompleteDataset {
    /// Group covariates `(x, x_c)`.
    pub x: DMatrix<f64>,
    /// True class, 0-based in the order of `share_ranges`.
    pub class: Vec<usize>,
    /// True participant share of each row's reference group.
    pub share: Vec<f64>,
    pub z: Vec<f64>,
    pub w: Vec<f64>,
    pub d: Vec<f64>,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub responses: Responses,
    /// How many rows needed the extended dictionary.
    pub extended_rows: usize,
}

/// Generator holding the precomputed moment tables and the weight cache.
#[derive(Debug)]
pub struct Generator {
    pub spec: DgpSpec,
    disturbance: Disturbance,
    chol: [[f64; 2]; 2],
    range: (f64, f64),
    base: MomentTable,
    extended: OnceLock<MomentTable>,
    cache: Mutex<HashMap<(i64, i64), Arc<MixtureWeights>>>,
}

const TABLE_STEP: f64 = 0.05;

fn row_rng(seed: u64, row: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(row);
    r
}

fn draw_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let mut u: f64 = rng.random();
    for (i, p) in probs.iter().enumerate() {
        if u < *p {
            return i;
        }
        u -= p;
    }
    probs.len() - 1
}

impl Generator {
    pub fn new(spec: DgpSpec) -> Result<Self> {
        spec.validate()?;
        let disturbance = Disturbance::new(&spec.disturbance)?;
        let c = spec.covariate_cov;
        let l11 = c[0][0].sqrt();
        let l21 = c[1][0] / l11;
        let l22 = (c[1][1] - l21 * l21).sqrt();
        let sd_c = c[1][1].sqrt();
        let lo_p = spec.share_ranges.iter().map(|r| r[0]).fold(1.0, f64::min);
        let hi_p = spec.share_ranges.iter().map(|r| r[1]).fold(0.0, f64::max);
        let a = [spec.selection_offset(lo_p, 0.0), spec.selection_offset(hi_p, 0.0)];
        let spread = spec.delta.abs() * 8.0 * sd_c + 1.0;
        let range = (a[0].min(a[1]) - spread, a[0].max(a[1]) + spread);
        let base = MomentTable::build(&disturbance, spec.eta, &spec.dictionary, range.0, range.1, TABLE_STEP);
        Ok(Self {
            spec,
            disturbance,
            chol: [[l11, 0.0], [l21, l22]],
            range,
            base,
            extended: OnceLock::new(),
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn disturbance(&self) -> &Disturbance {
        &self.disturbance
    }

    fn extended_table(&self) -> &MomentTable {
        self.extended.get_or_init(|| {
            MomentTable::build(
                &self.disturbance,
                self.spec.eta,
                &self.spec.dictionary_extension,
                self.range.0,
                self.range.1,
                TABLE_STEP,
            )
        })
    }

    /// All dictionary densities, base first then extension.
    pub fn densities(&self) -> Vec<DensitySpec> {
        self.spec.dictionary.iter().chain(&self.spec.dictionary_extension).cloned().collect()
    }

    fn quadrature_moment(&self, dens: &DensitySpec, a: f64) -> f64 {
        integrate_density(dens, gl_nodes(64), |z| participation(&self.disturbance, a + self.spec.eta * z))
    }

    /// Moment matrix from the tables, optionally including the extension.
    pub fn moment_matrix(&self, targets: &[f64], x_c: f64, extended: bool) -> DMatrix<f64> {
        let nb = self.spec.dictionary.len();
        let ne = if extended { self.spec.dictionary_extension.len() } else { 0 };
        let mut m = DMatrix::zeros(targets.len(), nb + ne);
        for (t, &p) in targets.iter().enumerate() {
            let a = self.spec.selection_offset(p, x_c);
            for l in 0..nb {
                m[(t, l)] = self
                    .base
                    .eval(l, a)
                    .unwrap_or_else(|| self.quadrature_moment(&self.spec.dictionary[l], a));
            }
            if extended {
                let tab = self.extended_table();
                for l in 0..ne {
                    m[(t, nb + l)] = tab
                        .eval(l, a)
                        .unwrap_or_else(|| self.quadrature_moment(&self.spec.dictionary_extension[l], a));
                }
            }
        }
        m
    }

    pub fn targets(&self, x: f64, x_c: f64) -> Vec<f64> {
        (0..self.spec.class_count).map(|t| target_share(x, x_c, t, &self.spec.share_ranges)).collect()
    }

    fn uniqueness_rows(&self, targets: &[f64], x_c: f64, extended: bool) -> UniquenessRows {
        let lower: Vec<f64> = targets.iter().map(|p| (p - 0.05).max(1e-3)).collect();
        let upper: Vec<f64> = targets.iter().map(|p| (p + 0.05).min(1.0 - 1e-3)).collect();
        UniquenessRows {
            lower_m: self.moment_matrix(&lower, x_c, extended),
            lower,
            upper_m: self.moment_matrix(&upper, x_c, extended),
            upper,
        }
    }

    /// Mixture weights for the group at `(x, x_c)`, enlarging the dictionary
    /// if the base one cannot reach the targets.
    pub fn weights_at(&self, x: f64, x_c: f64) -> Result<MixtureWeights> {
        let targets = self.targets(x, x_c);
        let mut last = None;
        for extended in [false, true] {
            if extended && self.spec.dictionary_extension.is_empty() {
                break;
            }
            let m = self.moment_matrix(&targets, x_c, extended);
            let opt = WeightOptions {
                uniqueness: self.spec.enforce_uniqueness.then(|| self.uniqueness_rows(&targets, x_c, extended)),
            };
            match solve_mixture_weights(&m, &targets, &opt) {
                Ok(w) => return Ok(w),
                Err(e @ Error::InfeasibleTarget { .. }) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap())
    }

    fn cell(&self, v: f64) -> i64 {
        (v / self.spec.weight_grid_step).round() as i64
    }

    /// Cached weights for the grid cell containing `(x, x_c)`, solved at the cell center.
    pub fn cached_weights(&self, x: f64, x_c: f64) -> Result<(Arc<MixtureWeights>, f64, f64)> {
        let key = (self.cell(x), self.cell(x_c));
        let step = self.spec.weight_grid_step;
        let (cx, cc) = (key.0 as f64 * step, key.1 as f64 * step);
        if let Some(w) = self.cache.lock().unwrap().get(&key) {
            return Ok((w.clone(), cx, cc));
        }
        let w = Arc::new(self.weights_at(cx, cc)?);
        self.cache.lock().unwrap().entry(key).or_insert_with(|| w.clone());
        Ok((w, cx, cc))
    }

    fn draw_covariates(&self, rng: &mut impl Rng) -> (f64, f64) {
        let e1: f64 = rng.sample(StandardNormal);
        let e2: f64 = rng.sample(StandardNormal);
        (self.chol[0][0] * e1, self.chol[1][0] * e1 + self.chol[1][1] * e2)
    }

    fn draw_class(&self, x: f64, x_c: f64, rng: &mut impl Rng) -> usize {
        let p = prior_probs(&self.spec.true_prior, &[x, x_c], self.spec.class_count)
            .expect("validated prior parameters");
        draw_categorical(&p, rng)
    }

    fn draw_responses(&self, class: usize, rng: &mut impl Rng, out: &mut Vec<u16>) {
        for item in &self.spec.manifest_freqs {
            out.push(draw_categorical(&item[class], rng) as u16 + 1);
        }
    }

    fn category_counts(&self) -> Vec<usize> {
        self.spec.manifest_freqs.iter().map(|i| i[0].len()).collect()
    }

    /// Expert survey with the true class of each expert.
    pub fn survey(&self, n: usize, seed: u64) -> Result<(SurveyDataset, Vec<usize>)> {
        let mut x = DMatrix::zeros(n, 2);
        let mut codes = Vec::with_capacity(n * self.spec.manifest_freqs.len());
        let mut opinions = Vec::with_capacity(n);
        let mut classes = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = row_rng(seed, i as u64);
            let (a, b) = self.draw_covariates(&mut rng);
            x[(i, 0)] = a;
            x[(i, 1)] = b;
            let t = self.draw_class(a, b, &mut rng);
            self.draw_responses(t, &mut rng, &mut codes);
            let share = target_share(a, b, t, &self.spec.share_ranges);
            opinions.push(u8::from(rng.random::<f64>() < share));
            classes.push(t);
        }
        let r = Responses::new(n, self.spec.manifest_freqs.len(), codes)?;
        Ok((SurveyDataset::new(x, r, opinions, self.category_counts())?, classes))
    }

    pub fn population(&self, n: usize, seed: u64) -> Result<CompleteDataset> {
        let s = &self.spec;
        let dens = self.densities();
        let mut out = CompleteDataset {
            x: DMatrix::zeros(n, 2),
            class: Vec::with_capacity(n),
            share: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            w: Vec::with_capacity(n),
            d: Vec::with_capacity(n),
            y1: Vec::with_capacity(n),
            y2: Vec::with_capacity(n),
            responses: Responses::new(0, 0, vec![])?,
            extended_rows: 0,
        };
        let mut codes = Vec::with_capacity(n * s.manifest_freqs.len());
        for i in 0..n {
            let mut rng = row_rng(seed, i as u64);
            let (a, b) = self.draw_covariates(&mut rng);
            out.x[(i, 0)] = a;
            out.x[(i, 1)] = b;
            let t = self.draw_class(a, b, &mut rng);
            self.draw_responses(t, &mut rng, &mut codes);
            let (weights, cx, cc) = self.cached_weights(a, b)?;
            if weights.w.len() > s.dictionary.len() {
                out.extended_rows += 1;
            }
            let share = target_share(cx, cc, t, &s.share_ranges);
            let l = draw_categorical(&weights.w, &mut rng);
            let z = dens[l].sample(&mut rng);
            let (u1, u2) = clayton_pair(s.copula_theta, &mut rng);
            let (e1, e2) = (self.disturbance.quantile(u1), self.disturbance.quantile(u2));
            let y2 = s.selection_offset(share, b) + s.eta * z + e2;
            let w = z + rng.sample::<f64, _>(StandardNormal);
            let d = f64::from(u8::from(rng.random::<f64>() < std_normal_cdf(z / 2.0)));
            out.class.push(t);
            out.share.push(share);
            out.z.push(z);
            out.w.push(w);
            out.d.push(d);
            out.y1.push(s.theta[0] * w + s.theta[1] * d + e1);
            out.y2.push(y2);
        }
        out.responses = Responses::new(n, s.manifest_freqs.len(), codes)?;
        Ok(out)
    }
}

pub fn generate_survey(spec: &DgpSpec, seed: u64) -> Result<SurveyDataset> {
    Generator::new(spec.clone())?.survey(spec.n_experts, seed).map(|(s, _)| s)
}

pub fn generate_population(spec: &DgpSpec, seed: u64) -> Result<CompleteDataset> {
    Generator::new(spec.clone())?.population(spec.n_population, seed)
}

/// Keeps rows with a nonnegative selection index; also returns their positions.
pub fn truncate_with_index(complete: &CompleteDataset) -> Result<(TruncatedDataset, Vec<usize>)> {
    let keep: Vec<usize> = (0..complete.y2.len()).filter(|&i| complete.y2[i] >= 0.0).collect();
    if keep.is_empty() {
        return Err(Error::EmptySelection);
    }
    let n = keep.len();
    let y1 = DVector::from_iterator(n, keep.iter().map(|&i| complete.y1[i]));
    let w = DMatrix::from_fn(n, 2, |r, c| if c == 0 { complete.w[keep[r]] } else { complete.d[keep[r]] });
    let z = DMatrix::from_fn(n, 1, |r, _| complete.z[keep[r]]);
    let x = DMatrix::from_fn(n, 2, |r, c| complete.x[(keep[r], c)]);
    let responses = complete.responses.select_rows(&keep);
    Ok((TruncatedDataset::new(y1, w, z, x, vec![1], responses)?, keep))
}

pub fn truncate(complete: &CompleteDataset) -> Result<TruncatedDataset> {
    truncate_with_index(complete).map(|(t, _)| t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn generator() -> &'static Generator {
        static G: OnceLock<Generator> = OnceLock::new();
        G.get_or_init(|| Generator::new(DgpSpec::default()).unwrap())
    }

    #[test]
    fn target_share_examples() {
        let r = DgpSpec::default().share_ranges;
        let lim = target_share(-40.0, -40.0, 0, &r);
        assert!((lim - (0.05 + 0.35 * logistic(-2.0))).abs() < 1e-12);
        assert!((lim - 0.09172).abs() < 1e-5);
        let top = target_share(40.0, 40.0, 0, &r);
        assert!((top - 0.34121).abs() < 1e-5);
        for t in 0..3 {
            let v = target_share(0.3, -1.2, t, &r);
            assert!(v > r[t][0] && v < r[t][1]);
        }
    }

    #[test]
    fn q_value_limits_and_quantile() {
        let spec = DgpSpec::default();
        // index = alpha + beta p + delta x_c + eta z; large positive index participates
        assert!(q_value(0.5, -1e3, 0.0, &spec).unwrap() > 1.0 - 1e-12);
        assert!(q_value(0.5, 1e3, 0.0, &spec).unwrap() < 1e-12);
        let d = Disturbance::new(&spec.disturbance).unwrap();
        let q3 = d.quantile(0.3);
        assert!((d.cdf(q3) - 0.3).abs() < 1e-12);
        // choose z so that the index equals -q3
        let z = (-q3 - spec.selection_offset(0.5, 0.0)) / spec.eta;
        assert!((q_value(0.5, z, 0.0, &spec).unwrap() - 0.7).abs() < 1e-9);
    }

    #[test]
    fn moment_matrix_examples() {
        // q identically one: every entry is the density's mass
        let mut spec = DgpSpec { eta: 0.0, alpha: 1e3, beta: 0.0, delta: 0.0, ..DgpSpec::default() };
        let m = mixture_moment_matrix(&spec, &[0.3, 0.6], 0.0).unwrap();
        for v in m.iter() {
            assert!((v - 1.0).abs() < 1e-9, "{v}");
        }
        // constant q = 1 - F(-alpha)
        spec.alpha = 1.3;
        let c = 1.0 - Disturbance::new(&spec.disturbance).unwrap().cdf(-1.3);
        let m = mixture_moment_matrix(&spec, &[0.3], 0.0).unwrap();
        for v in m.iter() {
            assert!((v - c).abs() < 1e-9);
        }
        // a symmetric check: ∫Φ(z)φ(z)dz = 1/2
        let gl = gl_nodes(64);
        let n = DensitySpec::Normal { mean: 0.0, sd: 1.0 };
        let v = integrate_density(&n, gl, std_normal_cdf);
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn calibrated_quadrature_converges() {
        let spec = DgpSpec::default();
        let g = generator();
        for &(x, xc) in &[(0.0, 0.0), (-2.0, 3.0), (2.5, -3.5)] {
            let t = g.targets(x, xc);
            let direct = mixture_moment_matrix(&spec, &t, xc).unwrap();
            let table = g.moment_matrix(&t, xc, false);
            assert!((direct - table).amax() < 1e-8);
        }
    }

    #[test]
    fn weight_examples() {
        let m = DMatrix::from_row_slice(1, 1, &[0.4]);
        let w = solve_mixture_weights(&m, &[0.4], &WeightOptions::default()).unwrap();
        assert_eq!(w.w, vec![1.0]);
        let m = DMatrix::from_row_slice(1, 2, &[0.2, 0.8]);
        let w = solve_mixture_weights(&m, &[0.5], &WeightOptions::default()).unwrap();
        // grid-search oracle over the one-dimensional simplex
        let best = (0..=1000)
            .map(|i| i as f64 / 1000.0)
            .min_by(|a, b| {
                let f = |v: f64| (0.2 * v + 0.8 * (1.0 - v) - 0.5f64).powi(2);
                f(*a).total_cmp(&f(*b))
            })
            .unwrap();
        assert!((w.w[0] - best).abs() < 1e-3);
        assert!((w.w[0] - 0.5).abs() < 1e-6);
        assert!(matches!(
            solve_mixture_weights(&m, &[0.9], &WeightOptions::default()),
            Err(Error::InfeasibleTarget { .. })
        ));
    }

    #[test]
    fn weights_with_uniqueness_rows() {
        let mut spec = DgpSpec::default();
        spec.enforce_uniqueness = true;
        let g = Generator::new(spec).unwrap();
        let w = g.weights_at(0.2, -0.4).unwrap();
        assert!(w.residual <= 1e-4);
        assert!((w.w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn clayton_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs = sample_clayton(2000, 1e-4, &mut rng);
        assert!(pairs.iter().all(|&(a, b)| a > 0.0 && a < 1.0 && b > 0.0 && b <= 1.0));
    }

    #[test]
    fn quantile_round_trip_points() {
        let d = Disturbance::new(&DisturbanceSpec::default()).unwrap();
        for x in [-12.0, -4.0, -0.3, 0.0, 0.01, 2.5, 4.0, 9.0, 15.0] {
            let back = d.quantile(d.cdf(x));
            assert!((back - x).abs() < 1e-8, "{x} -> {back}");
        }
    }

    #[test]
    fn degenerate_selection_is_constant() {
        let spec = DgpSpec { beta: 0.0, delta: 0.0, eta: 0.0, ..DgpSpec::default() };
        let d = Disturbance::new(&spec.disturbance).unwrap();
        let want = 1.0 - d.cdf(-spec.alpha);
        for (p, z, xc) in [(0.1, -3.0, 1.0), (0.9, 2.0, -2.0)] {
            assert!((q_value(p, z, xc, &spec).unwrap() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn survey_is_deterministic() {
        let g = generator();
        let (a, ca) = g.survey(300, 5).unwrap();
        let (b, cb) = g.survey(300, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca, cb);
        let (c, _) = g.survey(300, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn population_truncation_and_cache() {
        let g = generator();
        let pop = g.population(400, 9).unwrap();
        let again = g.population(400, 9).unwrap();
        assert_eq!(pop, again);
        let (t, keep) = truncate_with_index(&pop).unwrap();
        assert_eq!(t.n(), keep.len());
        assert!(keep.iter().all(|&i| pop.y2[i] >= 0.0));
        let (w1, _, _) = g.cached_weights(0.123, -0.456).unwrap();
        let (w2, _, _) = g.cached_weights(0.1234, -0.4561).unwrap();
        assert!(Arc::ptr_eq(&w1, &w2) || w1 == w2);
    }

    #[test]
    fn truncation_edge_cases() {
        let g = generator();
        let mut pop = g.population(50, 1).unwrap();
        pop.y2.iter_mut().for_each(|v| *v = v.abs());
        assert_eq!(truncate(&pop).unwrap().n(), 50);
        pop.y2.iter_mut().for_each(|v| *v = -1.0 - v.abs());
        assert!(matches!(truncate(&pop), Err(Error::EmptySelection)));
    }

    #[test]
    fn dgp_config_toml_round_trip() {
        let spec = DgpSpec::default();
        let text = toml::to_string(&spec).unwrap();
        let back: DgpSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let partial: DgpSpec = toml::from_str("eta = -8.0\nn_experts = 500\n").unwrap();
        assert_eq!(partial.n_experts, 500);
        assert_eq!(partial.alpha, -30.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn cdf_monotone(mut pts in proptest::collection::vec(-30.0f64..30.0, 2..20)) {
            let d = Disturbance::new(&DisturbanceSpec::default()).unwrap();
            pts.sort_by(f64::total_cmp);
            for w in pts.windows(2) {
                prop_assert!(d.cdf(w[0]) <= d.cdf(w[1]));
            }
        }

        #[test]
        fn quantile_inverts_cdf(x in -15.0f64..15.0) {
            let d = Disturbance::new(&DisturbanceSpec::default()).unwrap();
            prop_assert!((d.quantile(d.cdf(x)) - x).abs() < 1e-8);
        }

        #[test]
        fn weights_on_simplex(x in -3.0f64..3.0, xc in -4.0f64..4.0) {
            let w = generator().weights_at(x, xc).unwrap();
            prop_assert!(w.w.iter().all(|&v| v >= 0.0));
            prop_assert!((w.w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(w.residual <= 1e-4);
        }

        #[test]
        fn projection_lands_on_simplex(v in proptest::collection::vec(-5.0f64..5.0, 1..15)) {
            let p = project_simplex(&v);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

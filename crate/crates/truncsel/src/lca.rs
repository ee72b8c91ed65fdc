//! Latent class analysis with covariate-dependent class priors.
//!
//! Class priors follow a multinomial logit in the group covariates with the
//! last class as reference. Recruitment probabilities are item-by-class
//! categorical distributions. EM alternates posterior computation with a
//! closed-form recruitment update and a Newton fit of the prior logit.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Responses, SurveyDataset};
use crate::error::{Error, Result};
use crate::seeding::stream_seed;

const PROB_FLOOR: f64 = 1e-12;

/// Logit parameters for classes `0..k-1`; the last class has a zero index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub intercepts: Vec<f64>,
    pub slopes: Vec<Vec<f64>>,
}

impl PriorParams {
    pub fn zeros(k: usize, lx: usize) -> Self {
        let m = k.saturating_sub(1);
        Self { intercepts: vec![0.0; m], slopes: vec![vec![0.0; lx]; m] }
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        for (c, s) in self.intercepts.iter().zip(&self.slopes) {
            v.push(*c);
            v.extend_from_slice(s);
        }
        v
    }

    fn from_flat(v: &[f64], k: usize, lx: usize) -> Self {
        let mut p = Self::zeros(k, lx);
        for t in 0..k.saturating_sub(1) {
            let row = &v[t * (lx + 1)..(t + 1) * (lx + 1)];
            p.intercepts[t] = row[0];
            p.slopes[t].copy_from_slice(&row[1..]);
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LcaModel {
    pub k: usize,
    pub prior_params: PriorParams,
    /// `recruitment[j][t][r]`: probability of category `r+1` on item `j` in class `t`.
    pub recruitment: Vec<Vec<Vec<f64>>>,
    pub log_likelihood: f64,
    pub n_iterations: usize,
    pub converged: bool,
    /// Log-likelihood after each E-step of the winning run.
    #[serde(default)]
    pub log_likelihood_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    pub values: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LcaConfig {
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    pub n_restarts: usize,
}

impl Default for LcaConfig {
    fn default() -> Self {
        Self { max_iter: 1000, tol: 1e-8, seed: 0, n_restarts: 5 }
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|a| (a - m).exp()).sum::<f64>().ln()
}

fn linear_indices(prior: &PriorParams, x: &[f64], k: usize, out: &mut [f64]) {
    for t in 0..k - 1 {
        let s = &prior.slopes[t];
        out[t] = prior.intercepts[t] + s.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
    out[k - 1] = 0.0;
}

pub fn prior_probs(prior: &PriorParams, x: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::InvalidConfig("class count must be positive".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput("covariate vector".into()));
    }
    if prior.intercepts.len() != k - 1 || prior.slopes.iter().any(|s| s.len() != x.len()) {
        return Err(Error::DimensionMismatch("prior parameters do not match k or x".into()));
    }
    let mut eta = vec![0.0; k];
    linear_indices(prior, x, k, &mut eta);
    let lse = log_sum_exp(&eta);
    if !lse.is_finite() {
        return Err(Error::NonFiniteInput("prior linear index".into()));
    }
    Ok(eta.iter().map(|e| (e - lse).exp()).collect())
}

pub fn class_conditional_prob(recruitment: &[Vec<Vec<f64>>], row: &[u16], t: usize) -> Result<f64> {
    let mut p = 1.0;
    for (j, &c) in row.iter().enumerate() {
        let probs = &recruitment[j][t];
        if c == 0 || c as usize > probs.len() {
            return Err(Error::OutOfRangeCategory { row: 0, column: format!("m{}", j + 1), value: c as i64 });
        }
        p *= probs[c as usize - 1];
    }
    Ok(p)
}

/// Posterior class memberships and the total log-likelihood.
pub fn posterior_with_loglik(
    model: &LcaModel,
    x: &DMatrix<f64>,
    responses: &Responses,
) -> Result<(PosteriorMatrix, f64)> {
    let k = model.k;
    let n = responses.n_rows();
    if x.nrows() != n {
        return Err(Error::DimensionMismatch("covariate and response rows differ".into()));
    }
    if responses.n_items() != model.recruitment.len() {
        return Err(Error::DimensionMismatch("item count differs from the model".into()));
    }
    let logp: Vec<Vec<Vec<f64>>> = model
        .recruitment
        .iter()
        .map(|item| {
            item.iter()
                .map(|cls| cls.iter().map(|p| p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln()).collect())
                .collect()
        })
        .collect();
    let mut values = DMatrix::zeros(n, k);
    let mut ll = 0.0;
    let mut comp = 0.0;
    let mut eta = vec![0.0; k];
    let mut xi = vec![0.0; x.ncols()];
    for i in 0..n {
        for (c, v) in xi.iter_mut().enumerate() {
            *v = x[(i, c)];
        }
        if k > 1 {
            linear_indices(&model.prior_params, &xi, k, &mut eta);
            let lse = log_sum_exp(&eta);
            for e in eta.iter_mut() {
                *e -= lse;
            }
        } else {
            eta[0] = 0.0;
        }
        let row = responses.row(i);
        for (j, &c) in row.iter().enumerate() {
            let item = &logp[j];
            let kj = item[0].len();
            if c == 0 || c as usize > kj {
                return Err(Error::OutOfRangeCategory { row: i, column: format!("m{}", j + 1), value: c as i64 });
            }
            for t in 0..k {
                eta[t] += item[t][c as usize - 1];
            }
        }
        let lse = log_sum_exp(&eta);
        if !lse.is_finite() {
            return Err(Error::DegenerateRow { row: i });
        }
        for t in 0..k {
            values[(i, t)] = (eta[t] - lse).exp();
        }
        // Neumaier summation keeps the total stable across iterations
        let s = ll + lse;
        if ll.abs() >= lse.abs() {
            comp += (ll - s) + lse;
        } else {
            comp += (lse - s) + ll;
        }
        ll = s;
    }
    Ok((PosteriorMatrix { values }, ll + comp))
}

pub fn e_step(model: &LcaModel, survey: &SurveyDataset) -> Result<PosteriorMatrix> {
    posterior_with_loglik(model, &survey.x, &survey.responses).map(|(p, _)| p)
}

pub fn m_step_recruitment(
    post: &PosteriorMatrix,
    responses: &Responses,
    category_counts: &[usize],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let k = post.values.ncols();
    let n = responses.n_rows();
    let mut mass = vec![0.0; k];
    for t in 0..k {
        mass[t] = post.values.column(t).sum();
        if mass[t] < 1e-12 {
            return Err(Error::EmptyClass { class: t });
        }
    }
    let mut out: Vec<Vec<Vec<f64>>> =
        category_counts.iter().map(|&kj| vec![vec![0.0; kj]; k]).collect();
    for i in 0..n {
        for (j, &c) in responses.row(i).iter().enumerate() {
            if c == 0 || c as usize > category_counts[j] {
                return Err(Error::OutOfRangeCategory { row: i, column: format!("m{}", j + 1), value: c as i64 });
            }
            for t in 0..k {
                out[j][t][c as usize - 1] += post.values[(i, t)];
            }
        }
    }
    for item in out.iter_mut() {
        for cls in item.iter_mut() {
            let s: f64 = cls.iter().sum();
            for p in cls.iter_mut() {
                *p /= s;
            }
        }
    }
    Ok(out)
}

/// Rows `(1, x_i)` stored contiguously.
fn design_rows(x: &DMatrix<f64>) -> Vec<f64> {
    let (n, lx) = x.shape();
    let d = lx + 1;
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        out[i * d] = 1.0;
        for c in 0..lx {
            out[i * d + c + 1] = x[(i, c)];
        }
    }
    out
}

/// Log class probabilities for one design row; `flat` holds `m` blocks of `d`.
fn row_log_probs(flat: &[f64], xt: &[f64], eta: &mut [f64]) {
    let d = xt.len();
    let m = eta.len() - 1;
    for t in 0..m {
        eta[t] = flat[t * d..(t + 1) * d].iter().zip(xt).map(|(a, b)| a * b).sum();
    }
    eta[m] = 0.0;
    let lse = log_sum_exp(eta);
    for e in eta.iter_mut() {
        *e -= lse;
    }
}

fn prior_objective_flat(post: &PosteriorMatrix, rows: &[f64], d: usize, flat: &[f64]) -> f64 {
    let (n, k) = post.values.shape();
    let mut eta = vec![0.0; k];
    let mut q = 0.0;
    for i in 0..n {
        row_log_probs(flat, &rows[i * d..(i + 1) * d], &mut eta);
        for t in 0..k {
            q += post.values[(i, t)] * eta[t];
        }
    }
    q
}

/// Posterior-weighted multinomial-logit fit of the class priors by Newton ascent.
pub fn m_step_prior(
    post: &PosteriorMatrix,
    x: &DMatrix<f64>,
    start: Option<&PriorParams>,
) -> Result<PriorParams> {
    newton_prior(post, x, start, 100)
}

// Inside EM a few warm-started steps suffice: each one raises the expected
// complete-data log-likelihood, which keeps the likelihood monotone.
const EM_NEWTON_STEPS: usize = 2;

fn newton_prior(
    post: &PosteriorMatrix,
    x: &DMatrix<f64>,
    start: Option<&PriorParams>,
    max_steps: usize,
) -> Result<PriorParams> {
    let (n, k) = post.values.shape();
    let lx = x.ncols();
    if x.nrows() != n {
        return Err(Error::DimensionMismatch("posterior and covariate rows differ".into()));
    }
    if k == 1 {
        return Ok(PriorParams::zeros(1, lx));
    }
    let d = lx + 1;
    let m = k - 1;
    let dim = m * d;
    let rows = design_rows(x);
    let mut flat = match start {
        Some(p) if p.intercepts.len() == m => p.flat(),
        _ => vec![0.0; dim],
    };
    let mut q = prior_objective_flat(post, &rows, d, &flat);
    let mut eta = vec![0.0; k];
    let mut outer = vec![0.0; d * d];
    for _ in 0..max_steps {
        let mut grad = DVector::<f64>::zeros(dim);
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..n {
            let xt = &rows[i * d..(i + 1) * d];
            row_log_probs(&flat, xt, &mut eta);
            for e in eta.iter_mut() {
                *e = e.exp();
            }
            for c in 0..d {
                for e in 0..d {
                    outer[c * d + e] = xt[c] * xt[e];
                }
            }
            for t in 0..m {
                let r = post.values[(i, t)] - eta[t];
                for c in 0..d {
                    grad[t * d + c] += r * xt[c];
                }
                for u in t..m {
                    let w = if t == u { eta[t] * (1.0 - eta[t]) } else { -eta[t] * eta[u] };
                    for c in 0..d {
                        for e in 0..d {
                            hess[(t * d + c, u * d + e)] += w * outer[c * d + e];
                        }
                    }
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                hess[(a, b)] = hess[(b, a)];
            }
        }
        if grad.norm() < 1e-8 {
            break;
        }
        let mut h = hess;
        let step = loop {
            if let Some(ch) = h.clone().cholesky() {
                break ch.solve(&grad);
            }
            let ridge = 1e-8 * (1.0 + h.diagonal().amax());
            for a in 0..dim {
                h[(a, a)] += ridge.max(h[(a, a)] * 1e-6);
            }
        };
        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand: Vec<f64> = flat.iter().zip(step.iter()).map(|(b, s)| b + scale * s).collect();
            let cq = prior_objective_flat(post, &rows, d, &cand);
            if cq >= q {
                improved = cq > q;
                flat = cand;
                q = cq;
                break;
            }
            scale *= 0.5;
        }
        let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > 1e4 {
            return Err(Error::SeparationDetected { norm });
        }
        if !improved {
            break;
        }
    }
    Ok(PriorParams::from_flat(&flat, k, lx))
}

fn within_class_opinion(post: &PosteriorMatrix, opinions: &[u8]) -> Vec<f64> {
    let k = post.values.ncols();
    (0..k)
        .map(|t| {
            let col = post.values.column(t);
            let mass: f64 = col.sum();
            let yes: f64 = col.iter().zip(opinions).map(|(p, &o)| p * o as f64).sum();
            yes / mass
        })
        .collect()
}

/// Reorders classes so that `order[s]` becomes class `s`.
fn permute(model: &mut LcaModel, post: &mut PosteriorMatrix, order: &[usize]) {
    let k = model.k;
    let lx = model.prior_params.slopes.first().map_or(0, |s| s.len());
    if k > 1 {
        let mut intercepts = vec![0.0; k];
        let mut slopes = vec![vec![0.0; lx]; k];
        intercepts[..k - 1].copy_from_slice(&model.prior_params.intercepts);
        slopes[..k - 1].clone_from_slice(&model.prior_params.slopes);
        let r = order[k - 1];
        let mut np = PriorParams::zeros(k, lx);
        for s in 0..k - 1 {
            let o = order[s];
            np.intercepts[s] = intercepts[o] - intercepts[r];
            for c in 0..lx {
                np.slopes[s][c] = slopes[o][c] - slopes[r][c];
            }
        }
        model.prior_params = np;
    }
    for item in model.recruitment.iter_mut() {
        let old = item.clone();
        for s in 0..k {
            item[s] = old[order[s]].clone();
        }
    }
    let old = post.values.clone();
    for s in 0..k {
        post.values.set_column(s, &old.column(order[s]));
    }
}

fn relabel(model: &mut LcaModel, post: &mut PosteriorMatrix, opinions: &[u8]) {
    let means = within_class_opinion(post, opinions);
    let mut order: Vec<usize> = (0..model.k).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    permute(model, post, &order);
}

/// One EM run started from the given posterior matrix.
pub fn fit_lca_from(
    survey: &SurveyDataset,
    init: PosteriorMatrix,
    config: &LcaConfig,
) -> Result<(LcaModel, PosteriorMatrix)> {
    let k = init.values.ncols();
    let recruitment = m_step_recruitment(&init, &survey.responses, &survey.category_counts)?;
    let prior_params = m_step_prior(&init, &survey.x, None)?;
    let mut model = LcaModel {
        k,
        prior_params,
        recruitment,
        log_likelihood: f64::NEG_INFINITY,
        n_iterations: 0,
        converged: false,
        log_likelihood_trace: Vec::new(),
    };
    let mut post;
    loop {
        let (p, ll) = posterior_with_loglik(&model, &survey.x, &survey.responses)?;
        post = p;
        model.n_iterations += 1;
        let prev = model.log_likelihood;
        model.log_likelihood = ll;
        model.log_likelihood_trace.push(ll);
        if (ll - prev).abs() < config.tol {
            model.converged = true;
            break;
        }
        if model.n_iterations >= config.max_iter {
            break;
        }
        model.recruitment = m_step_recruitment(&post, &survey.responses, &survey.category_counts)?;
        model.prior_params = newton_prior(&post, &survey.x, Some(&model.prior_params), EM_NEWTON_STEPS)?;
    }
    relabel(&mut model, &mut post, &survey.opinions);
    Ok((model, post))
}

fn dirichlet_posteriors(n: usize, k: usize, rng: &mut impl Rng) -> PosteriorMatrix {
    let mut values = DMatrix::zeros(n, k);
    for i in 0..n {
        let mut s = 0.0;
        for t in 0..k {
            // unit exponentials normalized are Dirichlet(1, ..., 1)
            let e = -(1.0 - rng.random::<f64>()).ln();
            values[(i, t)] = e;
            s += e;
        }
        for t in 0..k {
            values[(i, t)] /= s;
        }
    }
    PosteriorMatrix { values }
}

/// Fits a `k`-class model, keeping the best of several seeded restarts.
pub fn fit_lca(survey: &SurveyDataset, k: usize, config: &LcaConfig) -> Result<(LcaModel, PosteriorMatrix)> {
    if k == 0 {
        return Err(Error::InvalidConfig("class count must be positive".into()));
    }
    if survey.n_experts() <= k {
        return Err(Error::InvalidDataset("need more experts than classes".into()));
    }
    let n = survey.n_experts();
    if k == 1 {
        let init = PosteriorMatrix { values: DMatrix::from_element(n, 1, 1.0) };
        return fit_lca_from(survey, init, config);
    }
    let restarts = config.n_restarts.max(1);
    let runs: Vec<Result<(LcaModel, PosteriorMatrix)>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, r as u64, "lca-restart"));
            let init = dirichlet_posteriors(n, k, &mut rng);
            fit_lca_from(survey, init, config)
        })
        .collect();
    let mut best: Option<(LcaModel, PosteriorMatrix)> = None;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok(fit) => {
                if best.as_ref().is_none_or(|b| fit.0.log_likelihood > b.0.log_likelihood) {
                    best = Some(fit);
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.unwrap())
}

/// Hard labels by maximum posterior; ties go to the lowest class index.
pub fn assign_labels(model: &LcaModel, responses: &Responses, x: &DMatrix<f64>) -> Result<Vec<usize>> {
    let (post, _) = posterior_with_loglik(model, x, responses)?;
    Ok(argmax_rows(&post))
}

pub fn argmax_rows(post: &PosteriorMatrix) -> Vec<usize> {
    post.values
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for t in 1..row.len() {
                if row[t] > row[best] {
                    best = t;
                }
            }
            best
        })
        .collect()
}

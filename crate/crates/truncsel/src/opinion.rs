//! Reference-group participant shares from expert opinions.
//!
//! Experts are split by fitted class and by opinion. Each (class, opinion)
//! cell gets a Gaussian kernel density estimate over group covariates with a
//! diagonal Scott bandwidth, and Bayes' rule combines the two densities with
//! the class's opinion share.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::{fmt_real, LabeledDataset, SurveyDataset};
use crate::error::{Error, Result};

const SHARE_CLAMP: f64 = 1e-6;
const SD_FLOOR: f64 = 1e-6;

/// Diagonal Scott bandwidth, `H_dd = (sd_d * m^(-1/(L+4)))^2`.
pub fn scott_bandwidth(points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, l) = points.shape();
    if m < 2 {
        return Err(Error::DegenerateDimension { dim: 0 });
    }
    let sd = column_sd(points);
    if let Some(d) = sd.iter().position(|&s| s == 0.0) {
        return Err(Error::DegenerateDimension { dim: d });
    }
    Ok(scott_from_sd(&sd, m, l))
}

fn column_sd(points: &DMatrix<f64>) -> Vec<f64> {
    let m = points.nrows() as f64;
    points
        .column_iter()
        .map(|c| {
            let mean = c.sum() / m;
            (c.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
        })
        .collect()
}

fn scott_from_sd(sd: &[f64], m: usize, l: usize) -> DMatrix<f64> {
    let f = (m as f64).powf(-1.0 / (l as f64 + 4.0));
    DMatrix::from_diagonal(&DVector::from_iterator(l, sd.iter().map(|s| (s * f).powi(2))))
}

/// A kernel density estimate with its points pre-whitened by the bandwidth.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeCell {
    pub points: DMatrix<f64>,
    pub bandwidth: DMatrix<f64>,
    whitened: Vec<f64>,
    chol_inv: DMatrix<f64>,
    log_norm: f64,
}

impl KdeCell {
    pub fn new(points: DMatrix<f64>, bandwidth: DMatrix<f64>) -> Result<Self> {
        let (m, l) = points.shape();
        if bandwidth.shape() != (l, l) {
            return Err(Error::DimensionMismatch("bandwidth shape".into()));
        }
        if m == 0 {
            return Err(Error::InvalidDataset("kernel density over no points".into()));
        }
        let sym = (&bandwidth - bandwidth.transpose()).amax() <= 1e-12 * bandwidth.amax().max(1.0);
        let chol = if sym { bandwidth.clone().cholesky() } else { None };
        let chol = chol.ok_or(Error::SingularBandwidth)?;
        let lower = chol.l();
        let chol_inv = lower.clone().try_inverse().ok_or(Error::SingularBandwidth)?;
        let log_det: f64 = 2.0 * lower.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::SingularBandwidth);
        }
        let mut whitened = Vec::with_capacity(m * l);
        for i in 0..m {
            let p = chol_inv.clone() * points.row(i).transpose();
            whitened.extend(p.iter());
        }
        let log_norm = -(m as f64).ln() - 0.5 * l as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det;
        Ok(Self { points, bandwidth, whitened, chol_inv, log_norm })
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let l = self.points.ncols();
        let xv = &self.chol_inv * DVector::from_column_slice(x);
        let sq = |i: usize| -> f64 {
            let p = &self.whitened[i * l..(i + 1) * l];
            p.iter().zip(xv.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
        };
        let m = self.len();
        let direct: f64 = (0..m).map(|i| (-0.5 * sq(i)).exp()).sum();
        if direct > 1e-250 {
            return self.log_norm + direct.ln();
        }
        let mut best = f64::INFINITY;
        for i in 0..m {
            best = best.min(sq(i));
        }
        let s: f64 = (0..m).map(|i| (-0.5 * (sq(i) - best)).exp()).sum();
        self.log_norm - 0.5 * best + s.ln()
    }

    pub fn density(&self, x: &[f64]) -> f64 {
        self.log_density(x).exp()
    }
}

pub fn kde_density(points: &DMatrix<f64>, bandwidth: &DMatrix<f64>, x: &[f64]) -> Result<f64> {
    if x.len() != points.ncols() {
        return Err(Error::DimensionMismatch("evaluation point dimension".into()));
    }
    Ok(KdeCell::new(points.clone(), bandwidth.clone())?.density(x))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassOpinions {
    /// Fraction of the class's experts with opinion 1; `None` for an empty class.
    pub share: Option<f64>,
    /// Density cells for opinion 0 and opinion 1.
    pub cells: [Option<KdeCell>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpinionSpace {
    pub k: usize,
    pub classes: Vec<ClassOpinions>,
}

fn sorted_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut r: Vec<Vec<f64>> = rows.iter().map(|&i| x.row(i).iter().cloned().collect()).collect();
    r.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let l = x.ncols();
    DMatrix::from_row_iterator(r.len(), l, r.into_iter().flatten())
}

/// Scott bandwidth with fallbacks for cells too small or flat to estimate one:
/// the spread is borrowed from the class, then from all experts, then floored.
fn cell_bandwidth(cell: &DMatrix<f64>, class_pts: &DMatrix<f64>, all: &DMatrix<f64>) -> DMatrix<f64> {
    let l = cell.ncols();
    let m = cell.nrows().max(2);
    for pts in [cell, class_pts, all] {
        if pts.nrows() >= 2 {
            let sd = column_sd(pts);
            if sd.iter().all(|&s| s > 0.0) {
                return scott_from_sd(&sd, m, l);
            }
        }
    }
    let sd: Vec<f64> = if all.nrows() >= 2 {
        column_sd(all).into_iter().map(|s| s.max(SD_FLOOR)).collect()
    } else {
        vec![SD_FLOOR; l]
    };
    scott_from_sd(&sd, m, l)
}

pub fn partition_opinions(labeled: &LabeledDataset<SurveyDataset>) -> Result<OpinionSpace> {
    let survey = &labeled.base;
    let k = labeled.k;
    let mut classes = Vec::with_capacity(k);
    for t in 0..k {
        let members: Vec<usize> = (0..survey.n_experts()).filter(|&i| labeled.labels[i] == t).collect();
        if members.is_empty() {
            classes.push(ClassOpinions { share: None, cells: [None, None] });
            continue;
        }
        let class_pts = sorted_rows(&survey.x, &members);
        let yes = members.iter().filter(|&&i| survey.opinions[i] == 1).count();
        let share = yes as f64 / members.len() as f64;
        let mut cells = [None, None];
        for (omega, slot) in cells.iter_mut().enumerate() {
            let idx: Vec<usize> =
                members.iter().cloned().filter(|&i| survey.opinions[i] as usize == omega).collect();
            if idx.is_empty() {
                continue;
            }
            let pts = sorted_rows(&survey.x, &idx);
            let h = cell_bandwidth(&pts, &class_pts, &survey.x);
            *slot = Some(KdeCell::new(pts, h)?);
        }
        classes.push(ClassOpinions { share: Some(share), cells });
    }
    Ok(OpinionSpace { k, classes })
}

impl OpinionSpace {
    /// Number of experts in cell (t, omega).
    pub fn cell_size(&self, t: usize, omega: usize) -> usize {
        self.classes[t].cells[omega].as_ref().map_or(0, |c| c.len())
    }
}

pub fn participant_share(space: &OpinionSpace, x: &[f64], t: usize) -> Result<f64> {
    if t >= space.k {
        return Err(Error::EmptyClass { class: t });
    }
    let class = &space.classes[t];
    let p = class.share.ok_or(Error::EmptyClass { class: t })?;
    let raw = match (&class.cells[0], &class.cells[1]) {
        (Some(c0), Some(c1)) if p > 0.0 && p < 1.0 => {
            let l1 = p.ln() + c1.log_density(x);
            let l0 = (1.0 - p).ln() + c0.log_density(x);
            crate::sieve::logistic(l1 - l0)
        }
        _ => p,
    };
    Ok(raw.clamp(SHARE_CLAMP, 1.0 - SHARE_CLAMP))
}

/// Writes `class,x1..xL,share` rows for every class over the given grid.
pub fn write_share_grid(space: &OpinionSpace, grid: &[Vec<f64>], path: &Path) -> Result<()> {
    let l = grid.first().map_or(0, |g| g.len());
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = vec!["class".to_string()];
    header.extend((1..=l).map(|i| format!("x{i}")));
    header.push("share".into());
    writeln!(out, "{}", header.join(","))?;
    for t in 0..space.k {
        if space.classes[t].share.is_none() {
            continue;
        }
        for g in grid {
            let s = participant_share(space, g, t)?;
            let mut row = vec![(t + 1).to_string()];
            row.extend(g.iter().map(|v| fmt_real(*v)));
            row.push(fmt_real(s));
            writeln!(out, "{}", row.join(","))?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Responses;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labeled(x: DMatrix<f64>, labels: Vec<usize>, opinions: Vec<u8>, k: usize) -> LabeledDataset<SurveyDataset> {
        let n = opinions.len();
        let r = Responses::new(n, 1, vec![1; n]).unwrap();
        let s = SurveyDataset::new(x, r, opinions, vec![1]).unwrap();
        LabeledDataset::new(s, labels, k).unwrap()
    }

    #[test]
    fn partition_example() {
        let x = DMatrix::from_column_slice(6, 1, &[0.1, 0.5, -0.3, 1.2, 0.8, -1.0]);
        let ls = labeled(x, vec![0, 0, 1, 1, 1, 1], vec![1, 0, 1, 1, 0, 0], 2);
        let sp = partition_opinions(&ls).unwrap();
        assert_eq!(sp.classes[0].share, Some(0.5));
        assert_eq!(sp.classes[1].share, Some(0.5));
        assert_eq!(sp.cell_size(1, 1), 2);
        assert_eq!(sp.cell_size(0, 0), 1);
    }

    #[test]
    fn degenerate_shares() {
        let x = DMatrix::from_column_slice(4, 1, &[0.1, 0.5, -0.3, 1.2]);
        let sp = partition_opinions(&labeled(x.clone(), vec![0; 4], vec![1; 4], 1)).unwrap();
        assert_eq!(sp.classes[0].share, Some(1.0));
        assert_eq!(participant_share(&sp, &[3.0], 0).unwrap(), 1.0 - 1e-6);
        let sp = partition_opinions(&labeled(x, vec![0; 4], vec![1, 0, 1, 0], 1)).unwrap();
        assert_eq!(sp.classes[0].share, Some(0.5));
    }

    #[test]
    fn empty_class_errors() {
        let x = DMatrix::from_column_slice(3, 1, &[0.1, 0.5, -0.3]);
        let sp = partition_opinions(&labeled(x, vec![0; 3], vec![1, 0, 1], 2)).unwrap();
        assert!(matches!(participant_share(&sp, &[0.0], 1), Err(Error::EmptyClass { class: 1 })));
    }

    #[test]
    fn scott_examples() {
        assert!(matches!(
            scott_bandwidth(&DMatrix::from_element(1, 1, 0.3)),
            Err(Error::DegenerateDimension { .. })
        ));
        assert!(matches!(
            scott_bandwidth(&DMatrix::from_element(5, 1, 0.3)),
            Err(Error::DegenerateDimension { dim: 0 })
        ));
        // 32 points with unit sample SD: h = 32^(-1/5) = 0.5
        let raw: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let mean = raw.iter().sum::<f64>() / 32.0;
        let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 31.0).sqrt();
        let pts = DMatrix::from_iterator(32, 1, raw.iter().map(|v| (v - mean) / sd));
        let h = scott_bandwidth(&pts).unwrap();
        assert!((h[(0, 0)] - 0.25).abs() < 1e-12);
        let scaled = scott_bandwidth(&(pts * 3.0)).unwrap();
        assert!((scaled[(0, 0)].sqrt() - 3.0 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn kde_examples() {
        let one = DMatrix::from_element(1, 1, 0.7);
        let h = DMatrix::identity(1, 1);
        let peak = kde_density(&one, &h, &[0.7]).unwrap();
        assert!((peak - 0.398_942_280_401_432_7).abs() < 1e-15);
        assert!(kde_density(&one, &h, &[0.7 + 41.0]).unwrap() <= 1e-300);
        let two = DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]);
        let v = kde_density(&two, &h, &[0.0]).unwrap();
        assert!((v - 0.241_970_724_519_143_37).abs() < 1e-12);
        assert!(matches!(
            kde_density(&two, &DMatrix::from_element(1, 1, -1.0), &[0.0]),
            Err(Error::SingularBandwidth)
        ));
    }

    #[test]
    fn kde_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = DMatrix::from_fn(50, 1, |_, _| rng.random::<f64>() * 2.0);
        let h = scott_bandwidth(&pts).unwrap();
        let sd = column_sd(&pts)[0];
        let mean = pts.mean();
        let (lo, hi) = (mean - 10.0 * sd, mean + 10.0 * sd);
        let gl = gauss_quad::GaussLegendre::new(400.try_into().unwrap());
        let cell = KdeCell::new(pts, h).unwrap();
        let total = gl.integrate(lo, hi, |x| cell.density(&[x]));
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn share_examples() {
        // symmetric cells give 0.5
        let x = DMatrix::from_column_slice(4, 1, &[-1.0, 1.0, -1.0, 1.0]);
        let sp = partition_opinions(&labeled(x, vec![0; 4], vec![1, 1, 0, 0], 1)).unwrap();
        assert!((participant_share(&sp, &[0.3], 0).unwrap() - 0.5).abs() < 1e-12);

        // two single-point cells with unit bandwidth
        let c1 = KdeCell::new(DMatrix::from_element(1, 1, 1.0), DMatrix::identity(1, 1)).unwrap();
        let c0 = KdeCell::new(DMatrix::from_element(1, 1, -1.0), DMatrix::identity(1, 1)).unwrap();
        let sp = OpinionSpace { k: 1, classes: vec![ClassOpinions { share: Some(0.5), cells: [Some(c0), Some(c1)] }] };
        let s = participant_share(&sp, &[1.0], 0).unwrap();
        let want = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((s - want).abs() < 1e-12);
        assert!((s - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn share_grid_csv() {
        let x = DMatrix::from_column_slice(4, 1, &[-1.0, 1.0, -0.5, 0.5]);
        let sp = partition_opinions(&labeled(x, vec![0; 4], vec![1, 1, 0, 0], 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.csv");
        write_share_grid(&sp, &[vec![0.0], vec![1.0]], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("class,x1,share\n"));
    }

    fn random_survey(seed: u64, n: usize) -> (DMatrix<f64>, Vec<usize>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 3.0);
        let labels = (0..n).map(|_| rng.random_range(0..2)).collect();
        let ops = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
        (x, labels, ops)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn share_in_open_interval(seed in 0u64..1000, a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let (x, l, o) = random_survey(seed, 40);
            let sp = partition_opinions(&labeled(x, l, o, 2)).unwrap();
            for t in 0..2 {
                let s = participant_share(&sp, &[a, b], t).unwrap();
                prop_assert!(s > 0.0 && s < 1.0);
            }
        }

        #[test]
        fn share_increases_with_prior(p1 in 0.05f64..0.9, gap in 0.01f64..0.09, x in -2.0f64..2.0) {
            let c1 = KdeCell::new(DMatrix::from_column_slice(3, 1, &[0.0, 0.5, 1.0]), DMatrix::identity(1, 1)).unwrap();
            let c0 = KdeCell::new(DMatrix::from_column_slice(2, 1, &[-0.5, 0.2]), DMatrix::identity(1, 1)).unwrap();
            let mk = |p| OpinionSpace { k: 1, classes: vec![ClassOpinions { share: Some(p), cells: [Some(c0.clone()), Some(c1.clone())] }] };
            let lo = participant_share(&mk(p1), &[x], 0).unwrap();
            let hi = participant_share(&mk(p1 + gap), &[x], 0).unwrap();
            prop_assert!(hi > lo);
        }

        #[test]
        fn permutation_invariant(seed in 0u64..1000, shift in 0usize..40) {
            let (x, l, o) = random_survey(seed, 40);
            let perm: Vec<usize> = (0..40).map(|i| (i * 7 + shift) % 40).collect();
            let xp = DMatrix::from_fn(40, 2, |i, j| x[(perm[i], j)]);
            let lp = perm.iter().map(|&i| l[i]).collect();
            let op = perm.iter().map(|&i| o[i]).collect();
            let a = partition_opinions(&labeled(x, l, o, 2)).unwrap();
            let b = partition_opinions(&labeled(xp, lp, op, 2)).unwrap();
            for t in 0..2 {
                let q = [0.4, 1.7];
                prop_assert_eq!(participant_share(&a, &q, t).unwrap().to_bits(), participant_share(&b, &q, t).unwrap().to_bits());
            }
        }
    }
}

//! Transformed cosine and Fourier series for the selection-bias function.
//!
//! The index is first centered and scaled, then squashed into (0,1) by a
//! logistic map (cosine family) or into (-1,1) by tanh (Fourier family).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SieveFamily {
    Cosine,
    Fourier,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SieveSpec {
    pub family: SieveFamily,
    pub terms: usize,
    /// Transform scale `s > 0`.
    pub scale: f64,
    /// Index value mapped to the transform's midpoint.
    #[serde(default)]
    pub center: f64,
}

impl Default for SieveSpec {
    fn default() -> Self {
        Self { family: SieveFamily::Fourier, terms: 4, scale: 1.0, center: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SieveCoeffs {
    pub alpha: f64,
    /// Cosine family: K weights. Fourier family: K cosine weights then K sine weights.
    pub tau: Vec<f64>,
}

pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

pub fn transform_phi(b: f64, s: f64) -> f64 {
    logistic(b / s)
}

pub fn transform_zeta(b: f64, s: f64) -> f64 {
    (b / (2.0 * s)).tanh()
}

impl SieveSpec {
    pub fn new(family: SieveFamily, terms: usize, scale: f64) -> Result<Self> {
        let spec = Self { family, terms, scale, center: 0.0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) || !self.center.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "sieve scale must be positive and finite, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    pub fn n_basis(&self) -> usize {
        match self.family {
            SieveFamily::Cosine => self.terms,
            SieveFamily::Fourier => 2 * self.terms,
        }
    }

    /// Transformed index and its derivative with respect to the raw index.
    pub fn transform(&self, b: f64) -> (f64, f64) {
        let u = b - self.center;
        match self.family {
            SieveFamily::Cosine => {
                let p = transform_phi(u, self.scale);
                (p, p * (1.0 - p) / self.scale)
            }
            SieveFamily::Fourier => {
                let t = transform_zeta(u, self.scale);
                (t, (1.0 - t * t) / (2.0 * self.scale))
            }
        }
    }

    /// Writes the basis at raw index `b` into `out` and its derivative in `b`
    /// into `dout`.
    pub fn basis_with_derivative(&self, b: f64, out: &mut [f64], dout: &mut [f64]) {
        let (t, dt) = self.transform(b);
        let k = self.terms;
        for j in 0..k {
            let w = std::f64::consts::PI * (j + 1) as f64;
            let (s, c) = (w * t).sin_cos();
            out[j] = c;
            dout[j] = -w * s * dt;
            if self.family == SieveFamily::Fourier {
                out[k + j] = s;
                dout[k + j] = w * c * dt;
            }
        }
    }

    pub fn basis(&self, b: f64) -> Vec<f64> {
        let n = self.n_basis();
        let mut out = vec![0.0; n];
        let mut d = vec![0.0; n];
        self.basis_with_derivative(b, &mut out, &mut d);
        out
    }
}

/// Basis evaluated directly at a transformed value (φ for cosine, ζ for Fourier).
pub fn basis_at_transformed(family: SieveFamily, terms: usize, t: f64) -> Vec<f64> {
    let mut out: Vec<f64> = (1..=terms).map(|k| (std::f64::consts::PI * k as f64 * t).cos()).collect();
    if family == SieveFamily::Fourier {
        out.extend((1..=terms).map(|k| (std::f64::consts::PI * k as f64 * t).sin()));
    }
    out
}

pub fn basis(spec: &SieveSpec, b: f64) -> Vec<f64> {
    spec.basis(b)
}

pub fn evaluate(spec: &SieveSpec, coeffs: &SieveCoeffs, b: f64) -> Result<f64> {
    if coeffs.tau.len() != spec.n_basis() {
        return Err(Error::DimensionMismatch(format!(
            "{} sieve coefficients for {} basis terms",
            coeffs.tau.len(),
            spec.n_basis()
        )));
    }
    let f = spec.basis(b);
    Ok(coeffs.alpha + coeffs.tau.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use gauss_quad::GaussLegendre;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn phi_values() {
        assert_eq!(transform_phi(0.0, 2.0), 0.5);
        assert!(transform_phi(30.0, 1.0) < 1.0 && transform_phi(30.0, 1.0) > 0.999_999);
        assert!(close(transform_phi(1.5, 1.5), 1.0 / (1.0 + (-1.0f64).exp()), 1e-15));
        assert!(close(transform_phi(1.5, 1.5), 0.73106, 1e-5));
    }

    #[test]
    fn zeta_values() {
        assert_eq!(transform_zeta(0.0, 3.0), 0.0);
        assert!(close(transform_zeta(-0.7, 0.4), -transform_zeta(0.7, 0.4), 1e-16));
        assert!(close(transform_zeta(2.0 * 0.8, 0.8), 0.76159, 1e-5));
        assert!(close(transform_zeta(0.9, 0.3), 2.0 * transform_phi(0.9, 0.3) - 1.0, 1e-15));
    }

    #[test]
    fn basis_examples() {
        let c = basis_at_transformed(SieveFamily::Cosine, 2, 0.5);
        assert!(close(c[0], 0.0, 1e-15) && close(c[1], -1.0, 1e-15));
        assert_eq!(basis_at_transformed(SieveFamily::Fourier, 2, 0.0), vec![1.0, 1.0, 0.0, 0.0]);
        let c = basis_at_transformed(SieveFamily::Cosine, 3, 1.0 / 3.0);
        for (a, b) in c.iter().zip([0.5, -0.5, -1.0]) {
            assert!(close(*a, b, 1e-14));
        }
        // φ(0) = 0.5 through a SieveSpec
        let spec = SieveSpec::new(SieveFamily::Cosine, 2, 1.0).unwrap();
        let v = spec.basis(0.0);
        assert!(close(v[0], 0.0, 1e-15) && close(v[1], -1.0, 1e-15));
    }

    #[test]
    fn evaluate_examples() {
        let spec = SieveSpec::new(SieveFamily::Cosine, 1, 1.0).unwrap();
        let c = SieveCoeffs { alpha: 1.0, tau: vec![2.0] };
        assert!(close(evaluate(&spec, &c, 0.0).unwrap(), 1.0, 1e-15));
        let zero = SieveCoeffs { alpha: -0.3, tau: vec![0.0] };
        assert_eq!(evaluate(&spec, &zero, 12.0).unwrap(), -0.3);
        let bad = SieveCoeffs { alpha: 0.0, tau: vec![1.0, 2.0] };
        assert!(matches!(evaluate(&spec, &bad, 0.0), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn evaluate_is_linear_in_tau() {
        let spec = SieveSpec::new(SieveFamily::Fourier, 3, 0.7).unwrap();
        let tau = vec![0.3, -1.2, 0.5, 2.0, 0.1, -0.4];
        let b = 0.37;
        let one = evaluate(&spec, &SieveCoeffs { alpha: 0.2, tau: tau.clone() }, b).unwrap();
        let two = evaluate(&spec, &SieveCoeffs { alpha: 0.2, tau: tau.iter().map(|t| 2.0 * t).collect() }, b)
            .unwrap();
        let dot: f64 = tau.iter().zip(spec.basis(b)).map(|(t, f)| t * f).sum();
        assert!(close(two - one, dot, 1e-12));
    }

    #[test]
    fn orthogonality_by_quadrature() {
        let gl = GaussLegendre::new(64.try_into().unwrap());
        for k in 1..=6 {
            for kk in 1..=6 {
                let v = gl.integrate(0.0, 1.0, |x| (PI * k as f64 * x).cos() * (PI * kk as f64 * x).cos());
                let want = if k == kk { 0.5 } else { 0.0 };
                assert!(close(v, want, 1e-10), "cos {k} {kk}: {v}");
                let s = gl.integrate(-1.0, 1.0, |x| (PI * k as f64 * x).cos() * (PI * kk as f64 * x).sin());
                assert!(close(s, 0.0, 1e-10));
                let ss = gl.integrate(-1.0, 1.0, |x| (PI * k as f64 * x).sin() * (PI * kk as f64 * x).sin());
                assert!(close(ss, if k == kk { 1.0 } else { 0.0 }, 1e-10));
            }
        }
    }

    #[test]
    fn cosine_series_approximates_square() {
        // g(b) = b^2 on 200 index values, regressed on cos(pi k phi(b)), K = 8
        let n = 200;
        let k = 8;
        let grid: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
        let spec = SieveSpec::new(SieveFamily::Cosine, k, 1.0).unwrap();
        let x = DMatrix::from_fn(n, k + 1, |i, j| if j == 0 { 1.0 } else { spec.basis(grid[i])[j - 1] });
        let y = DVector::from_iterator(n, grid.iter().map(|g| g * g));
        let coef = x.clone().svd(true, true).solve(&y, 1e-14).unwrap();
        let err = (&x * coef - y).amax();
        assert!(err < 0.01, "max error {err}");
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for family in [SieveFamily::Cosine, SieveFamily::Fourier] {
            let spec = SieveSpec { family, terms: 4, scale: 0.8, center: 0.3 };
            let n = spec.n_basis();
            let (mut f, mut d) = (vec![0.0; n], vec![0.0; n]);
            let b = 0.71;
            spec.basis_with_derivative(b, &mut f, &mut d);
            let h = 1e-6;
            let up = spec.basis(b + h);
            let dn = spec.basis(b - h);
            for j in 0..n {
                let fd = (up[j] - dn[j]) / (2.0 * h);
                assert!(close(fd, d[j], 1e-6), "{family:?} term {j}: {fd} vs {}", d[j]);
            }
        }
    }

    proptest! {
        #[test]
        fn phi_strictly_increasing(a in -10.0f64..10.0, gap in 1e-6f64..10.0, s in 1.0f64..5.0) {
            prop_assert!(transform_phi(a, s) < transform_phi(a + gap, s));
        }

        #[test]
        fn superposition(t1 in prop::collection::vec(-3.0f64..3.0, 6),
                         t2 in prop::collection::vec(-3.0f64..3.0, 6),
                         b in -4.0f64..4.0) {
            let spec = SieveSpec::new(SieveFamily::Fourier, 3, 1.3).unwrap();
            let ev = |tau: Vec<f64>, alpha| evaluate(&spec, &SieveCoeffs { alpha, tau }, b).unwrap();
            let sum: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| a + b).collect();
            let lhs = ev(sum, 1.0);
            let rhs = ev(t1.clone(), 0.5) + ev(t2.clone(), 0.5);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}

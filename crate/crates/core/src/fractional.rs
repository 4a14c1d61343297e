//! Spectral functions of `-Δ_g`: analysis/synthesis, fractional powers and
//! discrete Sobolev norms.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::spectrum::Spectrum;

/// Consistency tolerance between the two representations of a [`Field`].
pub const FIELD_CONSISTENCY_TOL: f64 = 1e-10;

/// Fractional order `s` in `(0, 1]`.
///
/// `s = 1` is admitted as a check against the classical Laplacian.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct FracParam(f64);

impl FracParam {
    pub fn new(s: f64) -> Result<Self> {
        if s > 0.0 && s <= 1.0 {
            Ok(Self(s))
        } else {
            Err(Error::InvalidArgument(format!(
                "fractional order s = {s} must lie in (0, 1]"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// A real function on the manifold: grid samples, optionally paired with its
/// spectral coefficients `(u, phi_k)`.
#[derive(Debug, Clone)]
pub struct Field {
    spectrum: Arc<Spectrum>,
    values: DVector<f64>,
    coeffs: Option<DVector<f64>>,
}

impl Field {
    /// Field from grid samples.
    pub fn from_values(spectrum: &Arc<Spectrum>, values: Vec<f64>) -> Result<Self> {
        if values.len() != spectrum.num_points() {
            return Err(Error::LengthMismatch {
                expected: spectrum.num_points(),
                actual: values.len(),
            });
        }
        Ok(Self {
            spectrum: Arc::clone(spectrum),
            values: DVector::from_vec(values),
            coeffs: None,
        })
    }

    /// Band-limited field from spectral coefficients; both representations set.
    pub fn from_coeffs(spectrum: &Arc<Spectrum>, coeffs: DVector<f64>) -> Result<Self> {
        let values = synthesize(spectrum, &coeffs)?;
        Ok(Self {
            spectrum: Arc::clone(spectrum),
            values,
            coeffs: Some(coeffs),
        })
    }

    pub fn from_fn<F: Fn(&[f64]) -> f64>(spectrum: &Arc<Spectrum>, f: F) -> Self {
        let grid = spectrum.grid();
        let values = (0..grid.len()).map(|p| f(grid.point(p))).collect();
        Self {
            spectrum: Arc::clone(spectrum),
            values: DVector::from_vec(values),
            coeffs: None,
        }
    }

    pub fn zeros(spectrum: &Arc<Spectrum>) -> Self {
        Self {
            spectrum: Arc::clone(spectrum),
            values: DVector::zeros(spectrum.num_points()),
            coeffs: Some(DVector::zeros(spectrum.num_modes())),
        }
    }

    pub fn constant(spectrum: &Arc<Spectrum>, c: f64) -> Self {
        Self::from_fn(spectrum, |_| c)
    }

    /// Eigenfunction `phi_k`.
    pub fn mode(spectrum: &Arc<Spectrum>, k: usize) -> Result<Self> {
        if k >= spectrum.num_modes() {
            return Err(Error::InvalidArgument(format!(
                "mode {k} out of range for K = {}",
                spectrum.num_modes()
            )));
        }
        let mut c = DVector::zeros(spectrum.num_modes());
        c[k] = 1.0;
        Self::from_coeffs(spectrum, c)
    }

    pub fn spectrum(&self) -> &Arc<Spectrum> {
        &self.spectrum
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values.as_slice()
    }

    /// Stored coefficients, if this field carries them.
    pub fn stored_coeffs(&self) -> Option<&DVector<f64>> {
        self.coeffs.as_ref()
    }

    /// Spectral coefficients, analyzing the samples when none are stored.
    pub fn coeffs(&self) -> DVector<f64> {
        match &self.coeffs {
            Some(c) => c.clone(),
            None => analyze_unchecked(&self.spectrum, &self.values),
        }
    }

    /// Weighted max-norm gap between the samples and the synthesis of the
    /// stored coefficients (zero when only samples are stored).
    pub fn consistency_residual(&self) -> f64 {
        match &self.coeffs {
            None => 0.0,
            Some(c) => {
                let synth = self.spectrum.modes().tr_mul(c);
                weighted_max_norm(&self.spectrum, &(synth - &self.values))
            }
        }
    }

    pub(crate) fn check_same_grid(&self, other: &Field) -> Result<()> {
        if self.spectrum.same_as(&other.spectrum) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub(crate) fn check_on(&self, spectrum: &Spectrum) -> Result<()> {
        if self.spectrum.same_as(spectrum) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    /// Pointwise product of samples (no coefficients kept).
    pub fn pointwise_mul(&self, other: &Field) -> Result<Field> {
        self.check_same_grid(other)?;
        Ok(Field {
            spectrum: Arc::clone(&self.spectrum),
            values: self.values.component_mul(&other.values),
            coeffs: None,
        })
    }

    pub fn scaled(&self, a: f64) -> Field {
        Field {
            spectrum: Arc::clone(&self.spectrum),
            values: &self.values * a,
            coeffs: self.coeffs.as_ref().map(|c| c * a),
        }
    }

    /// `self + a * other`; coefficients kept only if both carry them.
    pub fn axpy(&self, a: f64, other: &Field) -> Result<Field> {
        self.check_same_grid(other)?;
        let coeffs = match (&self.coeffs, &other.coeffs) {
            (Some(x), Some(y)) => Some(x + y * a),
            _ => None,
        };
        Ok(Field {
            spectrum: Arc::clone(&self.spectrum),
            values: &self.values + &other.values * a,
            coeffs,
        })
    }
}

/// `max_p w_p^{1/2} |x_p|`, the weighted max norm used for consistency.
pub fn weighted_max_norm(spectrum: &Spectrum, x: &DVector<f64>) -> f64 {
    spectrum
        .weights()
        .iter()
        .zip(x.iter())
        .map(|(w, v)| (w.sqrt() * v).abs())
        .fold(0.0, f64::max)
}

fn analyze_unchecked(spectrum: &Spectrum, values: &DVector<f64>) -> DVector<f64> {
    let weighted = values.component_mul(&DVector::from_column_slice(spectrum.weights()));
    spectrum.modes() * weighted
}

/// `c_k = sum_p w_p u(x_p) phi_k(x_p)`.
pub fn analyze(spectrum: &Spectrum, values: &DVector<f64>) -> Result<DVector<f64>> {
    if values.len() != spectrum.num_points() {
        return Err(Error::LengthMismatch {
            expected: spectrum.num_points(),
            actual: values.len(),
        });
    }
    Ok(analyze_unchecked(spectrum, values))
}

/// `u(x_p) = sum_k c_k phi_k(x_p)`.
pub fn synthesize(spectrum: &Spectrum, coeffs: &DVector<f64>) -> Result<DVector<f64>> {
    if coeffs.len() != spectrum.num_modes() {
        return Err(Error::LengthMismatch {
            expected: spectrum.num_modes(),
            actual: coeffs.len(),
        });
    }
    Ok(spectrum.modes().tr_mul(coeffs))
}

/// `lambda^a` with `0^a = 0` for `a > 0` and `lambda^0 = 1`.
pub(crate) fn spectral_power(lambda: f64, a: f64) -> f64 {
    if a == 0.0 {
        1.0
    } else if lambda == 0.0 {
        0.0
    } else {
        lambda.powf(a)
    }
}

/// Apply `(-Δ_g)^{s * multiplier}` by scaling coefficients.
pub fn apply_frac(u: &Field, s: FracParam, multiplier: f64) -> Result<Field> {
    if !(multiplier >= 0.0 && multiplier.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "power multiplier {multiplier} must be finite and nonnegative"
        )));
    }
    let a = s.value() * multiplier;
    let mut c = u.coeffs();
    for (ck, &l) in c.iter_mut().zip(u.spectrum.eigenvalues()) {
        *ck *= spectral_power(l, a);
    }
    Field::from_coeffs(&u.spectrum, c)
}

/// `(u, v)_{L^2(M)} = sum_p w_p u_p v_p`.
pub fn l2_inner(u: &Field, v: &Field) -> Result<f64> {
    u.check_same_grid(v)?;
    Ok(u.spectrum
        .weights()
        .iter()
        .zip(u.values.iter().zip(v.values.iter()))
        .map(|(w, (a, b))| w * a * b)
        .sum())
}

pub fn l2_norm(u: &Field) -> f64 {
    l2_inner(u, u).expect("same field").max(0.0).sqrt()
}

/// Inhomogeneous Sobolev norm `(sum_k (1 + lambda_k)^a c_k^2)^{1/2}`.
pub fn sobolev_norm(u: &Field, a: f64) -> Result<f64> {
    if !(a >= 0.0) {
        return Err(Error::InvalidArgument(format!("Sobolev index {a} must be nonnegative")));
    }
    Ok(sobolev_norm_coeffs(u.spectrum.eigenvalues(), &u.coeffs(), a))
}

pub(crate) fn sobolev_norm_coeffs(eigenvalues: &[f64], c: &DVector<f64>, a: f64) -> f64 {
    eigenvalues
        .iter()
        .zip(c.iter())
        .map(|(l, ck)| (1.0 + l).powf(a) * ck * ck)
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::spectrum::build_torus_spectrum;

    fn circle(n: usize, g: usize) -> Arc<Spectrum> {
        Arc::new(build_torus_spectrum(1, &[2.0 * PI], n, g).unwrap())
    }

    #[test]
    fn frac_param_bounds() {
        assert!(FracParam::new(0.0).is_err());
        assert!(FracParam::new(1.2).is_err());
        assert!(FracParam::new(f64::NAN).is_err());
        assert!(FracParam::new(1.0).is_ok());
    }

    #[test]
    fn analyze_single_mode_and_constant() {
        let sp = circle(5, 11);
        let u = Field::from_values(&sp, sp.mode(3)).unwrap();
        let c = u.coeffs();
        for k in 0..sp.num_modes() {
            let e = if k == 3 { 1.0 } else { 0.0 };
            assert!((c[k] - e).abs() < 1e-12);
        }
        let one = Field::constant(&sp, 1.0).coeffs();
        assert!((one[0] - (2.0 * PI).sqrt()).abs() < 1e-12);
        assert!(one.iter().skip(1).all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn synthesize_basics() {
        let sp = circle(3, 7);
        let e0 = Field::mode(&sp, 0).unwrap();
        assert!(e0.as_slice().iter().all(|v| (v - (2.0 * PI).powf(-0.5)).abs() < 1e-15));
        let z = synthesize(&sp, &DVector::zeros(7)).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert!(synthesize(&sp, &DVector::zeros(6)).is_err());
        assert!(analyze(&sp, &DVector::zeros(6)).is_err());
    }

    #[test]
    fn frac_of_cos2x() {
        let sp = circle(4, 16);
        let u = Field::from_fn(&sp, |x| (2.0 * x[0]).cos());
        let v = apply_frac(&u, FracParam::new(0.5).unwrap(), 1.0).unwrap();
        for (p, val) in v.as_slice().iter().enumerate() {
            let x = sp.grid().point(p)[0];
            assert!((val - 2.0 * (2.0 * x).cos()).abs() < 1e-12);
        }
        let c = Field::constant(&sp, 3.0);
        let z = apply_frac(&c, FracParam::new(0.3).unwrap(), 1.0).unwrap();
        assert!(z.as_slice().iter().all(|v| v.abs() < 1e-12));
        assert!(z.consistency_residual() < FIELD_CONSISTENCY_TOL);
    }

    #[test]
    fn sobolev_norm_cases() {
        let sp = circle(4, 12);
        let u = Field::from_fn(&sp, |x| 1.0 + x[0].sin() - 0.5 * (3.0 * x[0]).cos());
        let l2 = l2_norm(&u);
        assert!((sobolev_norm(&u, 0.0).unwrap() - l2).abs() < 1e-12);
        assert!(sobolev_norm(&u, -1.0).is_err());
        let phi = Field::mode(&sp, 5).unwrap();
        let lam = sp.eigenvalues()[5];
        assert!((sobolev_norm(&phi, 0.7).unwrap() - (1.0 + lam).powf(0.35)).abs() < 1e-12);
        let mut prev = 0.0;
        for i in 0..10 {
            let n = sobolev_norm(&u, i as f64 * 0.3).unwrap();
            assert!(n >= prev);
            prev = n;
        }
    }

    #[test]
    fn inner_products() {
        let sp = circle(3, 9);
        let one = Field::constant(&sp, 1.0);
        assert!((l2_inner(&one, &one).unwrap() - 2.0 * PI).abs() < 1e-12);
        let other = circle(3, 10);
        let o = Field::constant(&other, 1.0);
        assert!(matches!(l2_inner(&one, &o), Err(Error::GridMismatch)));
    }

    #[test]
    fn negative_multiplier_rejected() {
        let sp = circle(2, 5);
        let u = Field::constant(&sp, 1.0);
        assert!(apply_frac(&u, FracParam::new(0.5).unwrap(), -1.0).is_err());
    }
}

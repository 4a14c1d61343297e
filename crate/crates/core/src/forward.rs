//! Galerkin discretization of `((-Δ_g)^s + V) u = f` in the eigenbasis.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fractional::{spectral_power, Field, FracParam};
use crate::spectrum::Spectrum;

/// Samples below this count as zero when deciding whether `V ≡ 0`.
pub const ZERO_POTENTIAL_TOL: f64 = 1e-14;
/// Compatibility bound on `|(f, 1)|` when `V ≡ 0`.
pub const COMPATIBILITY_TOL: f64 = 1e-10;
/// Relative residual bound `||A c_u - c_f|| <= tol ||c_f||`.
pub const SOLVE_RESIDUAL_TOL: f64 = 1e-10;

/// Nonnegative potential `V` sampled on the grid.
#[derive(Debug, Clone)]
pub struct Potential(Field);

impl Potential {
    pub fn new(field: Field) -> Result<Self> {
        if let Some((index, &value)) = field
            .as_slice()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0) || !v.is_finite())
        {
            return Err(Error::NegativePotential { index, value });
        }
        Ok(Self(field))
    }

    pub fn from_values(spectrum: &Arc<Spectrum>, values: Vec<f64>) -> Result<Self> {
        Self::new(Field::from_values(spectrum, values)?)
    }

    pub fn zero(spectrum: &Arc<Spectrum>) -> Self {
        Self(Field::zeros(spectrum))
    }

    pub fn constant(spectrum: &Arc<Spectrum>, c: f64) -> Result<Self> {
        Self::new(Field::constant(spectrum, c))
    }

    pub fn field(&self) -> &Field {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn is_zero(&self) -> bool {
        self.as_slice().iter().all(|v| v.abs() < ZERO_POTENTIAL_TOL)
    }
}

#[derive(Debug, Clone)]
enum Factor {
    Full(Cholesky<f64, Dyn>),
    /// `V ≡ 0`: factorization of the block acting on modes `1..K`.
    MeanZero(Cholesky<f64, Dyn>),
    Failed {
        condition_estimate: f64,
    },
}

/// Solver diagnostics, serialized alongside solver output.
#[derive(Debug, Clone, Serialize)]
pub struct SolverDiagnostics {
    pub num_modes: usize,
    pub s: f64,
    pub mean_zero_mode: bool,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub condition_estimate: f64,
    pub symmetry_residual: f64,
}

/// `diag(lambda_k^s) + M_V` with `M_V[j,k] = sum_p w_p V_p phi_j phi_k`,
/// the Galerkin matrix of `B_{g,V}`.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    spectrum: Arc<Spectrum>,
    potential: Potential,
    s: FracParam,
    matrix: DMatrix<f64>,
    factor: Factor,
}

/// `Phi diag(w V) Phi^T`, symmetric by construction.
pub fn potential_matrix(spectrum: &Spectrum, v: &[f64]) -> DMatrix<f64> {
    let modes = spectrum.modes();
    let mut scaled = modes.clone();
    for (p, (w, vp)) in spectrum.weights().iter().zip(v).enumerate() {
        scaled.column_mut(p).scale_mut(w * vp);
    }
    let mut m = &scaled * modes.transpose();
    let k = m.nrows();
    for j in 0..k {
        for i in (j + 1)..k {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    m
}

fn condition_of(matrix: &DMatrix<f64>) -> (f64, f64, f64) {
    let eig = SymmetricEigen::new(matrix.clone()).eigenvalues;
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    (min, max, cond)
}

/// Assemble and factor the operator for potential `v` and order `s`.
pub fn assemble(spectrum: &Arc<Spectrum>, v: &Potential, s: FracParam) -> Result<OperatorMatrix> {
    v.field().check_on(spectrum)?;
    let mut matrix = potential_matrix(spectrum, v.as_slice());
    for (k, &l) in spectrum.eigenvalues().iter().enumerate() {
        matrix[(k, k)] += spectral_power(l, s.value());
    }
    let factor = if v.is_zero() {
        let k = matrix.nrows();
        let block = matrix.view((1, 1), (k - 1, k - 1)).into_owned();
        match Cholesky::new(block.clone()) {
            Some(c) => Factor::MeanZero(c),
            None => Factor::Failed {
                condition_estimate: condition_of(&block).2,
            },
        }
    } else {
        match Cholesky::new(matrix.clone()) {
            Some(c) => Factor::Full(c),
            None => Factor::Failed {
                condition_estimate: condition_of(&matrix).2,
            },
        }
    };
    Ok(OperatorMatrix {
        spectrum: Arc::clone(spectrum),
        potential: v.clone(),
        s,
        matrix,
        factor,
    })
}

impl OperatorMatrix {
    pub fn spectrum(&self) -> &Arc<Spectrum> {
        &self.spectrum
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn s(&self) -> FracParam {
        self.s
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn is_mean_zero(&self) -> bool {
        matches!(self.factor, Factor::MeanZero(_))
    }

    pub fn symmetry_residual(&self) -> f64 {
        (&self.matrix - self.matrix.transpose()).amax()
    }

    pub fn diagnostics(&self) -> SolverDiagnostics {
        let (min, max, cond) = if self.potential.is_zero() {
            let k = self.matrix.nrows();
            condition_of(&self.matrix.view((1, 1), (k - 1, k - 1)).into_owned())
        } else {
            condition_of(&self.matrix)
        };
        SolverDiagnostics {
            num_modes: self.matrix.nrows(),
            s: self.s.value(),
            mean_zero_mode: self.potential.is_zero(),
            min_eigenvalue: min,
            max_eigenvalue: max,
            condition_estimate: cond,
            symmetry_residual: self.symmetry_residual(),
        }
    }

    /// `A c`.
    pub fn apply_coeffs(&self, c: &DVector<f64>) -> Result<DVector<f64>> {
        if c.len() != self.matrix.ncols() {
            return Err(Error::LengthMismatch {
                expected: self.matrix.ncols(),
                actual: c.len(),
            });
        }
        Ok(&self.matrix * c)
    }

    /// Solve `A c_u = c_f` in coefficient space.
    pub fn solve_coeffs(&self, cf: &DVector<f64>) -> Result<DVector<f64>> {
        let k = self.matrix.nrows();
        if cf.len() != k {
            return Err(Error::LengthMismatch {
                expected: k,
                actual: cf.len(),
            });
        }
        match &self.factor {
            Factor::Failed { condition_estimate } => Err(Error::Factorization {
                condition_estimate: *condition_estimate,
            }),
            Factor::Full(chol) => {
                let mut cu = chol.solve(cf);
                self.refine(&mut cu, cf, |r| chol.solve(r))?;
                Ok(cu)
            }
            Factor::MeanZero(chol) => {
                // (f, 1) = c_0 vol^{1/2}
                let mean = cf[0] * self.spectrum.volume().sqrt();
                if mean.abs() >= COMPATIBILITY_TOL {
                    return Err(Error::IncompatibleSource { mean });
                }
                let mut projected = cf.clone();
                projected[0] = 0.0;
                let solve_block = |r: &DVector<f64>| {
                    let tail = chol.solve(&r.rows(1, k - 1).into_owned());
                    let mut out = DVector::zeros(k);
                    out.rows_mut(1, k - 1).copy_from(&tail);
                    out
                };
                let mut cu = solve_block(&projected);
                self.refine(&mut cu, &projected, solve_block)?;
                Ok(cu)
            }
        }
    }

    /// One step of iterative refinement if needed, then the residual gate.
    fn refine<F>(&self, cu: &mut DVector<f64>, cf: &DVector<f64>, solve: F) -> Result<()>
    where
        F: Fn(&DVector<f64>) -> DVector<f64>,
    {
        let tol = SOLVE_RESIDUAL_TOL * cf.norm();
        let mut r = cf - &self.matrix * &*cu;
        if r.norm() > tol {
            *cu += solve(&r);
            r = cf - &self.matrix * &*cu;
        }
        let residual = r.norm();
        if residual > tol {
            return Err(Error::Residual {
                residual,
                tolerance: tol,
            });
        }
        Ok(())
    }

    /// Solve for `u_f`; both representations of the result are populated.
    pub fn solve(&self, f: &Field) -> Result<Field> {
        f.check_on(&self.spectrum)?;
        let cu = self.solve_coeffs(&f.coeffs())?;
        Field::from_coeffs(&self.spectrum, cu)
    }

    /// Solve the adjoint equation `((-Δ_g)^s + V) w = rhs`. The operator is
    /// self-adjoint, so this is [`OperatorMatrix::solve`].
    pub fn solve_adjoint(&self, rhs: &Field) -> Result<Field> {
        self.solve(rhs)
    }

    /// Evaluate the left-hand side `((-Δ_g)^s + V) u`.
    pub fn apply(&self, u: &Field) -> Result<Field> {
        u.check_on(&self.spectrum)?;
        Field::from_coeffs(&self.spectrum, self.apply_coeffs(&u.coeffs())?)
    }

    /// `c^T A c`.
    pub fn quadratic_form(&self, u: &Field) -> Result<f64> {
        u.check_on(&self.spectrum)?;
        let c = u.coeffs();
        Ok(c.dot(&(&self.matrix * &c)))
    }

    /// `sum_k lambda_k^s c_k^2 + sum_p w_p V_p u_p^2`, evaluated on the
    /// synthesized samples of `u`.
    pub fn energy(&self, u: &Field) -> Result<f64> {
        u.check_on(&self.spectrum)?;
        let c = u.coeffs();
        let frac: f64 = self
            .spectrum
            .eigenvalues()
            .iter()
            .zip(c.iter())
            .map(|(l, ck)| spectral_power(*l, self.s.value()) * ck * ck)
            .sum();
        let samples = self.spectrum.modes().tr_mul(&c);
        let pot: f64 = self
            .spectrum
            .weights()
            .iter()
            .zip(self.potential.as_slice())
            .zip(samples.iter())
            .map(|((w, v), up)| w * v * up * up)
            .sum();
        Ok(frac + pot)
    }

    /// Ratio of consecutive coefficient-block energies of `u`, a crude
    /// smoothness read-out (tail energy over head energy).
    pub fn coefficient_decay(u: &Field) -> f64 {
        let c = u.coeffs();
        let half = c.len() / 2;
        let head: f64 = c.rows(0, half.max(1)).norm_squared();
        let tail: f64 = c.rows(half, c.len() - half).norm_squared();
        if head == 0.0 {
            0.0
        } else {
            (tail / head).sqrt()
        }
    }
}

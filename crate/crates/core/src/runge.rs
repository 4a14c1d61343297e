//! Runge approximation: region-supported sources whose solutions, restricted
//! to the region, approximate a prescribed target.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::OperatorMatrix;
use crate::fractional::{sobolev_norm_coeffs, Field, FracParam};
use crate::measurement::{gram_matrix, SourceBasis};
use crate::spectrum::{Region, Spectrum};

/// Condition number above which the normal equations are solved by a
/// truncated eigen-decomposition.
pub const NORMAL_EQUATION_COND_LIMIT: f64 = 1e15;
/// Relative singular-value cutoff of the truncated fallback.
pub const SVD_TRUNCATION: f64 = 1e-12;
/// Slack allowed in the monotonicity checks of a sweep.
pub const MONOTONE_SLACK: f64 = 1e-12;

/// Norm used for the misfit on the region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MisfitNorm {
    #[default]
    L2,
    /// `H^s` surrogate: Sobolev norm of the residual extended by zero.
    Hs,
}

impl fmt::Display for MisfitNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MisfitNorm::L2 => "l2",
            MisfitNorm::Hs => "hs",
        })
    }
}

impl FromStr for MisfitNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l2" => Ok(MisfitNorm::L2),
            "hs" => Ok(MisfitNorm::Hs),
            other => Err(Error::InvalidArgument(format!("unknown misfit norm {other:?}"))),
        }
    }
}

/// The restricted linear map `a -> R S (sum_i a_i f_i)` together with the
/// source mass matrix. Built from an operator or read from measurements.
#[derive(Debug, Clone)]
pub struct RestrictedMap {
    spectrum: Arc<Spectrum>,
    s: FracParam,
    region: Region,
    /// `R x m`, column j = `u_j|_O`.
    columns: DMatrix<f64>,
    /// `B_ij = (f_i, f_j)_{L^2}`.
    mass: DMatrix<f64>,
}

impl RestrictedMap {
    pub fn new(
        spectrum: &Arc<Spectrum>,
        s: FracParam,
        region: &Region,
        columns: DMatrix<f64>,
        mass: DMatrix<f64>,
    ) -> Result<Self> {
        if columns.nrows() != region.len() {
            return Err(Error::LengthMismatch {
                expected: region.len(),
                actual: columns.nrows(),
            });
        }
        if mass.nrows() != columns.ncols() || mass.ncols() != columns.ncols() {
            return Err(Error::LengthMismatch {
                expected: columns.ncols(),
                actual: mass.nrows(),
            });
        }
        if columns.ncols() == 0 {
            return Err(Error::InvalidArgument("restricted map has no sources".into()));
        }
        Ok(Self {
            spectrum: Arc::clone(spectrum),
            s,
            region: region.clone(),
            columns,
            mass,
        })
    }

    /// Solve for every basis element against `op`.
    pub fn from_operator(op: &OperatorMatrix, basis: &SourceBasis) -> Result<Self> {
        let map = gram_matrix(op, basis)?;
        let r = basis.region().len();
        let columns = DMatrix::from_fn(r, basis.len(), |i, j| map.restricted_solutions[j][i]);
        Self::new(op.spectrum(), op.s(), basis.region(), columns, basis.mass_matrix())
    }

    pub fn spectrum(&self) -> &Arc<Spectrum> {
        &self.spectrum
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn s(&self) -> FracParam {
        self.s
    }

    pub fn columns(&self) -> &DMatrix<f64> {
        &self.columns
    }

    pub fn mass(&self) -> &DMatrix<f64> {
        &self.mass
    }

    pub fn num_sources(&self) -> usize {
        self.columns.ncols()
    }

    /// `U a`, region samples.
    pub fn evaluate(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        &self.columns * coeffs
    }

    /// Gram matrix `Q` of the misfit norm on region samples.
    pub fn misfit_form(&self, norm: MisfitNorm) -> DMatrix<f64> {
        let idx = self.region.indices();
        let w = self.spectrum.weights();
        match norm {
            MisfitNorm::L2 => DMatrix::from_diagonal(&DVector::from_iterator(idx.len(), idx.iter().map(|&p| w[p]))),
            MisfitNorm::Hs => {
                let k = self.spectrum.num_modes();
                let modes = self.spectrum.modes();
                // analysis of the zero extension: c = Phi_O W_O r
                let analysis = DMatrix::from_fn(k, idx.len(), |kk, i| modes[(kk, idx[i])] * w[idx[i]]);
                let scale = DVector::from_iterator(
                    k,
                    self.spectrum
                        .eigenvalues()
                        .iter()
                        .map(|l| (1.0 + l).powf(self.s.value())),
                );
                let mut scaled = analysis.clone();
                for (kk, d) in scale.iter().enumerate() {
                    scaled.row_mut(kk).scale_mut(*d);
                }
                analysis.transpose() * scaled
            }
        }
    }

    /// Misfit norm of region samples `r`.
    pub fn misfit_norm(&self, r: &DVector<f64>, norm: MisfitNorm) -> f64 {
        match norm {
            MisfitNorm::L2 => self
                .region
                .inner(&self.spectrum, r.as_slice(), r.as_slice())
                .max(0.0)
                .sqrt(),
            MisfitNorm::Hs => {
                let ext = self.region.extend_by_zero(r.as_slice()).expect("region length");
                let c = crate::fractional::analyze(&self.spectrum, &DVector::from_vec(ext)).expect("grid length");
                sobolev_norm_coeffs(self.spectrum.eigenvalues(), &c, self.s.value())
            }
        }
    }
}

/// One Runge approximation problem.
#[derive(Debug, Clone)]
pub struct RungeProblem<'a> {
    pub map: &'a RestrictedMap,
    /// Target samples on the region.
    pub target: DVector<f64>,
    pub alpha: f64,
    pub norm: MisfitNorm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RungeResult {
    /// `f = sum_i coeffs_i f_i`.
    pub source_coeffs: Vec<f64>,
    pub achieved_error: f64,
    /// `achieved_error / ||h||` (zero for a zero target).
    pub relative_error: f64,
    pub source_norm: f64,
    pub alpha: f64,
    pub norm: MisfitNorm,
    /// `||N a - b|| / ||b||` of the normal equations.
    pub optimality_residual: f64,
    pub truncated_solve: bool,
    /// `U a - h` on the region.
    pub residual: Vec<f64>,
}

/// Solve `N x = b` for symmetric positive semidefinite `N`, by Cholesky when
/// the condition number allows, else by truncated eigen-decomposition.
/// Returns the solution and whether the fallback was used.
pub(crate) fn solve_spd_or_truncated(n: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> (DVector<f64>, bool) {
    let eig = SymmetricEigen::new(n.clone());
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let cond = if min > 0.0 { max / min } else { f64::INFINITY };
    if cond <= NORMAL_EQUATION_COND_LIMIT {
        if let Some(chol) = Cholesky::new(n.clone()) {
            return (chol.solve(b), false);
        }
    }
    log::warn!("{what}: condition {cond:e} beyond {NORMAL_EQUATION_COND_LIMIT:e}, using truncated solve");
    let proj = eig.eigenvectors.transpose() * b;
    let mut x = DVector::zeros(b.len());
    for (i, lam) in eig.eigenvalues.iter().enumerate() {
        if *lam > SVD_TRUNCATION * max {
            x.axpy(proj[i] / lam, &eig.eigenvectors.column(i), 1.0);
        }
    }
    (x, true)
}

/// Minimize `||U a - h||^2 + alpha ||f||^2_{L^2}` over the source span.
pub fn approximate(problem: &RungeProblem<'_>) -> Result<RungeResult> {
    let map = problem.map;
    if !(problem.alpha > 0.0 && problem.alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "regularization alpha = {} must be positive",
            problem.alpha
        )));
    }
    if problem.target.len() != map.region.len() {
        return Err(Error::LengthMismatch {
            expected: map.region.len(),
            actual: problem.target.len(),
        });
    }
    if problem.target.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("target has non-finite samples".into()));
    }
    let q = map.misfit_form(problem.norm);
    let qu = &q * &map.columns;
    let normal = map.columns.transpose() * &qu + &map.mass * problem.alpha;
    let rhs = qu.transpose() * &problem.target;
    let (coeffs, truncated) = solve_spd_or_truncated(&normal, &rhs, "runge normal equations");
    let opt = (&normal * &coeffs - &rhs).norm();
    let optimality_residual = if rhs.norm() > 0.0 { opt / rhs.norm() } else { opt };
    let residual = map.evaluate(&coeffs) - &problem.target;
    let achieved_error = map.misfit_norm(&residual, problem.norm);
    let target_norm = map.misfit_norm(&problem.target, problem.norm);
    let source_norm = coeffs.dot(&(&map.mass * &coeffs)).max(0.0).sqrt();
    Ok(RungeResult {
        source_coeffs: coeffs.as_slice().to_vec(),
        achieved_error,
        relative_error: if target_norm > 0.0 {
            achieved_error / target_norm
        } else {
            0.0
        },
        source_norm,
        alpha: problem.alpha,
        norm: problem.norm,
        optimality_residual,
        truncated_solve: truncated,
        residual: residual.as_slice().to_vec(),
    })
}

/// `start, start/factor, ...` down to `stop` (inclusive up to rounding).
pub fn geometric_ladder(start: f64, stop: f64, factor: f64) -> Result<Vec<f64>> {
    if !(start > 0.0 && stop > 0.0 && stop <= start && factor > 1.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid alpha ladder start={start} stop={stop} factor={factor}"
        )));
    }
    let steps = ((start / stop).ln() / factor.ln() + 1e-9).floor() as i32;
    Ok((0..=steps).map(|i| start / factor.powi(i)).collect())
}

/// Default ladder `1e-1, 1e-2, ..., 1e-10`.
pub fn default_ladder() -> Vec<f64> {
    (1..=10).map(|i| 10f64.powi(-i)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub target_id: usize,
    pub alpha: f64,
    pub error: f64,
    pub relative_error: f64,
    pub source_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub norm: MisfitNorm,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target_id,alpha,error,source_norm\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:e},{:e},{:e}\n",
                r.target_id, r.alpha, r.error, r.source_norm
            ));
        }
        out
    }

    /// Rows of one target ordered by decreasing alpha.
    pub fn target_rows(&self, target_id: usize) -> Vec<&SweepRow> {
        let mut rows: Vec<&SweepRow> = self.rows.iter().filter(|r| r.target_id == target_id).collect();
        rows.sort_by(|a, b| b.alpha.total_cmp(&a.alpha));
        rows
    }

    /// Violations of "error nonincreasing, source norm nondecreasing" as
    /// alpha decreases, described one per entry.
    pub fn monotonicity_violations(&self) -> Vec<String> {
        let mut ids: Vec<usize> = self.rows.iter().map(|r| r.target_id).collect();
        ids.dedup();
        let mut out = Vec::new();
        for id in ids {
            let rows = self.target_rows(id);
            for pair in rows.windows(2) {
                let (a, b) = (pair[0], pair[1]);
                if b.error > a.error + MONOTONE_SLACK * a.error.max(1.0) {
                    out.push(format!(
                        "target {id}: error rises from {:e} (alpha {:e}) to {:e} (alpha {:e})",
                        a.error, a.alpha, b.error, b.alpha
                    ));
                }
                if b.source_norm + MONOTONE_SLACK * a.source_norm.max(1.0) < a.source_norm {
                    out.push(format!(
                        "target {id}: source norm falls from {:e} (alpha {:e}) to {:e} (alpha {:e})",
                        a.source_norm, a.alpha, b.source_norm, b.alpha
                    ));
                }
            }
        }
        out
    }
}

/// Run [`approximate`] over every `(target, alpha)` cell. Output order follows
/// the input order regardless of scheduling.
pub fn density_sweep(
    map: &RestrictedMap,
    targets: &[DVector<f64>],
    alphas: &[f64],
    norm: MisfitNorm,
) -> Result<SweepTable> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("density sweep needs at least one target".into()));
    }
    if alphas.is_empty() {
        return Err(Error::InvalidArgument("density sweep needs at least one alpha".into()));
    }
    let cells: Vec<(usize, f64)> = (0..targets.len())
        .flat_map(|t| alphas.iter().map(move |&a| (t, a)))
        .collect();
    let rows = cells
        .par_iter()
        .map(|&(t, alpha)| {
            let res = approximate(&RungeProblem {
                map,
                target: targets[t].clone(),
                alpha,
                norm,
            })?;
            Ok(SweepRow {
                target_id: t,
                alpha,
                error: res.achieved_error,
                relative_error: res.relative_error,
                source_norm: res.source_norm,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { norm, rows })
}

/// Adjoint-solution read-out for a Runge residual.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdjointCertificate {
    /// `||w||_{L^2(O)}`.
    pub region_norm: f64,
    /// `int_M |(-Δ)^{s/2} w|^2 + V w^2`.
    pub energy: f64,
    /// `c_w^T A c_w`.
    pub quadratic_form: f64,
}

/// Solve the adjoint equation with the zero-extended residual as right-hand
/// side and report the size of `w` on the region and its energy.
pub fn adjoint_certificate(op: &OperatorMatrix, region: &Region, residual: &[f64]) -> Result<AdjointCertificate> {
    let rhs = Field::from_values(op.spectrum(), region.extend_by_zero(residual)?)?;
    let w = op.solve_adjoint(&rhs)?;
    let restricted = region.restrict(w.as_slice());
    Ok(AdjointCertificate {
        region_norm: region.inner(op.spectrum(), &restricted, &restricted).max(0.0).sqrt(),
        energy: op.energy(&w)?,
        quadratic_form: op.quadratic_form(&w)?,
    })
}

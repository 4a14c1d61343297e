//! Potential recovery from local source-to-solution data.
//!
//! Two inverters are provided. [`linearized_recover`] compares two measured
//! maps whose potentials agree outside the region and reads off moments of
//! the difference through Runge approximants. [`gauss_newton_recover`] fits a
//! potential to one measured map by output least squares, using the exact
//! derivative `dG_ij / dV_p = -w_p u_i(x_p) u_j(x_p)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{assemble, Potential};
use crate::fractional::{Field, FracParam};
use crate::measurement::{gram_matrix, region_cutoff, SourceBasis, SourceSolutionMap};
use crate::runge::{approximate, solve_spd_or_truncated, MisfitNorm, RestrictedMap, RungeProblem};
use crate::spectrum::{Region, Spectrum};

/// Tolerance for the bundle self-consistency checks.
pub const BUNDLE_TOL: f64 = 1e-10;
/// Default relative Tikhonov weight for the moment system.
pub const DEFAULT_MOMENT_BETA: f64 = 1e-8;
/// Relative singular-value threshold below which the probe family counts as dependent.
pub const PROBE_RANK_TOL: f64 = 1e-10;

/// Everything an inverter may see: a finite slice of `L_{V,O}`.
#[derive(Debug, Clone)]
pub struct MeasurementBundle {
    spectrum: Arc<Spectrum>,
    s: FracParam,
    basis: SourceBasis,
    gram: DMatrix<f64>,
    restricted_solutions: Vec<Vec<f64>>,
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |a, v| a.max(v.abs()))
}

impl MeasurementBundle {
    /// Bundle from raw parts, checked for symmetry and for agreement of the
    /// Gram entries with the restricted solutions.
    pub fn new(
        spectrum: &Arc<Spectrum>,
        s: FracParam,
        basis: SourceBasis,
        gram: DMatrix<f64>,
        restricted_solutions: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let m = basis.len();
        if gram.nrows() != m || gram.ncols() != m {
            return Err(Error::LengthMismatch {
                expected: m,
                actual: gram.nrows(),
            });
        }
        if restricted_solutions.len() != m {
            return Err(Error::LengthMismatch {
                expected: m,
                actual: restricted_solutions.len(),
            });
        }
        let region = basis.region();
        for u in &restricted_solutions {
            if u.len() != region.len() {
                return Err(Error::LengthMismatch {
                    expected: region.len(),
                    actual: u.len(),
                });
            }
        }
        for f in basis.elements() {
            f.check_on(spectrum)?;
        }
        let scale = max_abs(&gram).max(f64::MIN_POSITIVE);
        let asym = max_abs(&(&gram - gram.transpose()));
        if asym > BUNDLE_TOL * scale {
            return Err(Error::BundleMismatch(format!(
                "Gram matrix not symmetric: residual {asym:e}"
            )));
        }
        for i in 0..m {
            let fi = region.restrict(basis.elements()[i].as_slice());
            for (j, uj) in restricted_solutions.iter().enumerate() {
                let g = region.inner(spectrum, &fi, uj);
                if (g - gram[(i, j)]).abs() > BUNDLE_TOL * scale {
                    return Err(Error::BundleMismatch(format!(
                        "Gram entry ({i}, {j}) = {:e} disagrees with restricted solutions ({g:e})",
                        gram[(i, j)]
                    )));
                }
            }
        }
        Ok(Self {
            spectrum: Arc::clone(spectrum),
            s,
            basis,
            gram,
            restricted_solutions,
        })
    }

    /// Bundle from a computed source-to-solution map.
    pub fn from_map(
        spectrum: &Arc<Spectrum>,
        s: FracParam,
        basis: SourceBasis,
        map: SourceSolutionMap,
    ) -> Result<Self> {
        Self::new(spectrum, s, basis, map.matrix, map.restricted_solutions)
    }

    /// Simulate the measurements of potential `v`. Harness side only.
    pub fn simulate(spectrum: &Arc<Spectrum>, v: &Potential, s: FracParam, basis: &SourceBasis) -> Result<Self> {
        let op = assemble(spectrum, v, s)?;
        let map = gram_matrix(&op, basis)?;
        Self::from_map(spectrum, s, basis.clone(), map)
    }

    pub fn spectrum(&self) -> &Arc<Spectrum> {
        &self.spectrum
    }

    pub fn s(&self) -> FracParam {
        self.s
    }

    pub fn region(&self) -> &Region {
        self.basis.region()
    }

    pub fn basis(&self) -> &SourceBasis {
        &self.basis
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn restricted_solutions(&self) -> &[Vec<f64>] {
        &self.restricted_solutions
    }

    pub fn num_sources(&self) -> usize {
        self.basis.len()
    }

    /// Numerical rank of the Gram matrix at relative threshold `rtol`.
    pub fn numerical_rank(&self, rtol: f64) -> usize {
        let sv = self.gram.singular_values();
        let max = sv.iter().copied().fold(0.0, f64::max);
        sv.iter().filter(|&&x| x > rtol * max).count()
    }

    /// The restricted map `a -> sum_j a_j u_j|_O` these measurements define.
    pub fn restricted_map(&self) -> Result<RestrictedMap> {
        let r = self.region().len();
        let columns = DMatrix::from_fn(r, self.num_sources(), |i, j| self.restricted_solutions[j][i]);
        RestrictedMap::new(&self.spectrum, self.s, self.region(), columns, self.basis.mass_matrix())
    }

    fn check_compatible(&self, other: &MeasurementBundle) -> Result<()> {
        if !self.spectrum.same_as(&other.spectrum) {
            return Err(Error::BundleMismatch("bundles live on different spectra".into()));
        }
        if self.s != other.s {
            return Err(Error::BundleMismatch(format!(
                "bundles have different orders s ({} vs {})",
                self.s.value(),
                other.s.value()
            )));
        }
        if self.region().mask() != other.region().mask() {
            return Err(Error::BundleMismatch("bundles have different regions".into()));
        }
        let same_basis = self.num_sources() == other.num_sources()
            && self
                .basis
                .elements()
                .iter()
                .zip(other.basis.elements())
                .all(|(a, b)| a.values() == b.values());
        if !same_basis {
            return Err(Error::BundleMismatch(
                "bundles were measured with different source bases".into(),
            ));
        }
        Ok(())
    }
}

/// Default probe family on the region: the constant followed by the
/// restrictions of `phi_1, ..., phi_r`.
pub fn default_probes(spectrum: &Spectrum, region: &Region, r: usize) -> Vec<DVector<f64>> {
    let mut probes = vec![DVector::from_element(region.len(), 1.0)];
    for k in 1..=r.min(spectrum.num_modes() - 1) {
        let row = spectrum.modes().row(k);
        probes.push(DVector::from_iterator(
            region.len(),
            region.indices().iter().map(|&p| row[p]),
        ));
    }
    probes
}

/// Probe family of windowed eigenfunctions: `chi phi_k` for `k < r`, plus the constant.
pub fn windowed_probes(spectrum: &Spectrum, region: &Region, r: usize) -> Vec<DVector<f64>> {
    let cutoff = region_cutoff(spectrum, region);
    let mut probes = vec![DVector::from_element(region.len(), 1.0)];
    for k in 0..r.min(spectrum.num_modes()) {
        let row = spectrum.modes().row(k);
        probes.push(DVector::from_iterator(
            region.len(),
            region.indices().iter().map(|&p| row[p] * cutoff[p]),
        ));
    }
    probes
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearizedConfig {
    /// Runge regularization weight.
    pub alpha: f64,
    /// Moment-system Tikhonov weight relative to the largest eigenvalue of
    /// the probe Gram matrix.
    pub beta: f64,
    pub norm: MisfitNorm,
}

impl Default for LinearizedConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-10,
            beta: DEFAULT_MOMENT_BETA,
            norm: MisfitNorm::L2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearizedRecovery {
    /// Estimate of `V_1 - V_2` on the region, in region index order.
    pub delta_v: Vec<f64>,
    /// `d(h) = -((L_1 - L_2) f_1, f_2)` per probe.
    pub moments: Vec<f64>,
    /// Relative Runge errors of `u_1 ≈ h` per probe.
    pub probe_errors: Vec<f64>,
    /// Relative Runge error of `u_2 ≈ 1`.
    pub constant_error: f64,
    /// Source coefficients of each `f_1` approximant.
    pub probe_sources: Vec<Vec<f64>>,
    /// Source coefficients of the `f_2` approximant.
    pub constant_source: Vec<f64>,
    pub probe_rank: usize,
    /// Case hypothesis the recovery relies on.
    pub hypothesis: String,
}

/// Recover `V_1 - V_2` on the region from two bundles, assuming the
/// potentials agree outside it.
pub fn linearized_recover(
    bundle1: &MeasurementBundle,
    bundle2: &MeasurementBundle,
    probes: &[DVector<f64>],
    config: &LinearizedConfig,
) -> Result<LinearizedRecovery> {
    bundle1.check_compatible(bundle2)?;
    if probes.is_empty() {
        return Err(Error::InvalidArgument("no probe targets".into()));
    }
    let region = bundle1.region();
    let spectrum = &bundle1.spectrum;
    for h in probes {
        if h.len() != region.len() {
            return Err(Error::LengthMismatch {
                expected: region.len(),
                actual: h.len(),
            });
        }
    }
    let w: DVector<f64> = DVector::from_iterator(region.len(), region.indices().iter().map(|&p| spectrum.weights()[p]));
    let probe_gram = DMatrix::from_fn(probes.len(), probes.len(), |i, j| {
        probes[i].component_mul(&w).dot(&probes[j])
    });
    let eig = probe_gram.clone().symmetric_eigenvalues();
    let top = eig.iter().copied().fold(0.0, f64::max);
    // eigenvalues of the probe Gram are squared singular values
    let probe_rank = eig
        .iter()
        .filter(|&&l| l > PROBE_RANK_TOL * PROBE_RANK_TOL * top)
        .count();
    if probe_rank < probes.len() {
        return Err(Error::RankDeficient {
            rank: probe_rank,
            requested: probes.len(),
        });
    }

    let map1 = bundle1.restricted_map()?;
    let map2 = bundle2.restricted_map()?;
    let one = DVector::from_element(region.len(), 1.0);
    let approx_one = approximate(&RungeProblem {
        map: &map2,
        target: one,
        alpha: config.alpha,
        norm: config.norm,
    })?;
    let a2 = DVector::from_vec(approx_one.source_coeffs.clone());
    let diff = &bundle1.gram - &bundle2.gram;
    let per_probe = probes
        .par_iter()
        .map(|h| {
            approximate(&RungeProblem {
                map: &map1,
                target: h.clone(),
                alpha: config.alpha,
                norm: config.norm,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // ((L1 - L2) f1, f2) = a2^T (G1 - G2) a1 with G_ij = (f_i, L f_j)
    let moments: Vec<f64> = per_probe
        .iter()
        .map(|r| -a2.dot(&(&diff * DVector::from_column_slice(&r.source_coeffs))))
        .collect();

    let beta = config.beta * top;
    let mut reg = probe_gram;
    for i in 0..reg.nrows() {
        reg[(i, i)] += beta;
    }
    let (c, _) = solve_spd_or_truncated(&reg, &DVector::from_column_slice(&moments), "moment system");
    let mut delta_v = DVector::zeros(region.len());
    for (ci, h) in c.iter().zip(probes) {
        delta_v.axpy(*ci, h, 1.0);
    }
    Ok(LinearizedRecovery {
        delta_v: delta_v.as_slice().to_vec(),
        moments,
        probe_errors: per_probe.iter().map(|r| r.relative_error).collect(),
        constant_error: approx_one.relative_error,
        probe_sources: per_probe.into_iter().map(|r| r.source_coeffs).collect(),
        constant_source: approx_one.source_coeffs,
        probe_rank,
        hypothesis: "V1 = V2 outside the region".into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupportMode {
    InsideO,
    OutsideO,
}

impl fmt::Display for SupportMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SupportMode::InsideO => "inside-O",
            SupportMode::OutsideO => "outside-O",
        })
    }
}

/// Grid points where `V` is unknown; elsewhere it is held at its initial value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownSupport {
    mode: SupportMode,
    indices: Vec<usize>,
}

impl UnknownSupport {
    /// Unknowns on every region point.
    pub fn inside(region: &Region) -> Self {
        Self {
            mode: SupportMode::InsideO,
            indices: region.indices().to_vec(),
        }
    }

    /// Unknowns on every point outside the region.
    pub fn outside(region: &Region) -> Self {
        Self {
            mode: SupportMode::OutsideO,
            indices: region.complement().indices().to_vec(),
        }
    }

    /// Unknowns on a subset of the region (`InsideO`) or of its complement.
    pub fn subset(region: &Region, mode: SupportMode, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("unknown support is empty".into()));
        }
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &p in &sorted {
            if p >= region.num_points() {
                return Err(Error::InvalidArgument(format!("unknown index {p} out of range")));
            }
            let inside = region.contains(p);
            if inside != (mode == SupportMode::InsideO) {
                return Err(Error::InvalidArgument(format!(
                    "unknown index {p} is not in the {mode} support"
                )));
            }
        }
        Ok(Self { mode, indices: sorted })
    }

    pub fn mode(&self) -> SupportMode {
        self.mode
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussNewtonConfig {
    pub max_iterations: usize,
    /// Stop when the misfit falls below this value.
    pub misfit_tolerance: f64,
    /// Stop when a step changes the misfit by less than this fraction.
    pub relative_tolerance: f64,
    /// Tikhonov weight on `sum_p w_p (V_p - V_init,p)^2` over the unknowns.
    pub beta: f64,
    pub max_backtracks: usize,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo: f64,
}

impl Default for GaussNewtonConfig {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            misfit_tolerance: 1e-24,
            relative_tolerance: 1e-12,
            beta: 0.0,
            max_backtracks: 30,
            armijo: 1e-4,
        }
    }
}

/// Outcome of an inversion.
#[derive(Debug, Clone)]
pub struct InversionResult {
    pub v_recovered: Potential,
    pub support_mode: SupportMode,
    pub unknown_indices: Vec<usize>,
    /// Misfit at the initial guess and after every accepted step.
    pub misfit_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// No acceptable step was found within the backtracking budget.
    pub stagnated: bool,
    /// Smallest singular value of the Jacobian at the final iterate.
    pub jacobian_min_singular_value: f64,
    /// Set by [`InversionResult::evaluate_against`].
    pub relative_error: Option<f64>,
}

impl InversionResult {
    /// Relative `L^2` error over the unknown points against a ground truth.
    pub fn relative_error_against(&self, truth: &Potential) -> f64 {
        let w = self.v_recovered.field().spectrum().weights();
        let (mut num, mut den) = (0.0, 0.0);
        for &p in &self.unknown_indices {
            let t = truth.as_slice()[p];
            num += w[p] * (self.v_recovered.as_slice()[p] - t).powi(2);
            den += w[p] * t * t;
        }
        if den > 0.0 {
            (num / den).sqrt()
        } else {
            num.sqrt()
        }
    }

    pub fn evaluate_against(&mut self, truth: &Potential) {
        self.relative_error = Some(self.relative_error_against(truth));
    }

    pub fn report(&self) -> InversionReport {
        InversionReport {
            support_mode: self.support_mode,
            unknown_indices: self.unknown_indices.clone(),
            misfit_history: self.misfit_history.clone(),
            iterations: self.iterations,
            converged: self.converged,
            stagnated: self.stagnated,
            jacobian_min_singular_value: self.jacobian_min_singular_value,
            relative_error: self.relative_error,
        }
    }
}

/// Serializable summary of an [`InversionResult`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionReport {
    pub support_mode: SupportMode,
    pub unknown_indices: Vec<usize>,
    pub misfit_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub stagnated: bool,
    pub jacobian_min_singular_value: f64,
    pub relative_error: Option<f64>,
}

/// `-w_p u_i(x_p) u_j(x_p)`, the derivative of `G_ij` with respect to `V(x_p)`.
pub fn jacobian_entry(u_i: &Field, u_j: &Field, point_index: usize, weight: f64) -> Result<f64> {
    u_i.check_same_grid(u_j)?;
    let n = u_i.as_slice().len();
    if point_index >= n {
        return Err(Error::InvalidArgument(format!(
            "point index {point_index} out of range for {n} points"
        )));
    }
    Ok(-weight * (u_i.as_slice()[point_index] * u_j.as_slice()[point_index]))
}

/// Simulated Gram matrix and global solutions at potential `v`.
fn simulate(bundle: &MeasurementBundle, v: &Potential) -> Result<SourceSolutionMap> {
    let op = assemble(&bundle.spectrum, v, bundle.s)?;
    gram_matrix(&op, &bundle.basis)
}

/// Jacobian `(m^2) x |unknowns|`, row `i * m + j`.
fn jacobian(spectrum: &Spectrum, solutions: &[Field], unknowns: &[usize]) -> DMatrix<f64> {
    let m = solutions.len();
    let w = spectrum.weights();
    DMatrix::from_fn(m * m, unknowns.len(), |row, col| {
        let (i, j) = (row / m, row % m);
        let p = unknowns[col];
        -w[p] * (solutions[i].as_slice()[p] * solutions[j].as_slice()[p])
    })
}

/// Jacobian of the Gram matrix with respect to `V` on `unknown`, at `v`.
pub fn jacobian_at(bundle: &MeasurementBundle, v: &Potential, unknown: &UnknownSupport) -> Result<DMatrix<f64>> {
    let sim = simulate(bundle, v)?;
    Ok(jacobian(&bundle.spectrum, &sim.solutions, unknown.indices()))
}

fn data_residual(sim: &SourceSolutionMap, measured: &DMatrix<f64>) -> DVector<f64> {
    let m = measured.nrows();
    DVector::from_fn(m * m, |row, _| {
        sim.matrix[(row / m, row % m)] - measured[(row / m, row % m)]
    })
}

struct Objective<'a> {
    bundle: &'a MeasurementBundle,
    reference: &'a [f64],
    unknowns: &'a [usize],
    beta: f64,
}

impl Objective<'_> {
    fn regularization(&self, v: &[f64]) -> f64 {
        let w = self.bundle.spectrum.weights();
        self.unknowns
            .iter()
            .map(|&p| w[p] * (v[p] - self.reference[p]).powi(2))
            .sum::<f64>()
            * self.beta
    }

    fn evaluate(&self, v: &Potential) -> Result<(f64, SourceSolutionMap, DVector<f64>)> {
        let sim = simulate(self.bundle, v)?;
        let r = data_residual(&sim, &self.bundle.gram);
        let misfit = r.norm_squared() + self.regularization(v.as_slice());
        Ok((misfit, sim, r))
    }

    /// Gauss–Newton direction and the gradient of the misfit.
    fn direction(&self, v: &[f64], sim: &SourceSolutionMap, r: &DVector<f64>) -> (DVector<f64>, DVector<f64>, f64) {
        let jac = jacobian(&self.bundle.spectrum, &sim.solutions, self.unknowns);
        let w = self.bundle.spectrum.weights();
        let reg_grad = DVector::from_iterator(
            self.unknowns.len(),
            self.unknowns
                .iter()
                .map(|&p| self.beta * w[p] * (v[p] - self.reference[p])),
        );
        let half_grad = jac.tr_mul(r) + &reg_grad;
        let mut normal = jac.tr_mul(&jac);
        for (c, &p) in self.unknowns.iter().enumerate() {
            normal[(c, c)] += self.beta * w[p];
        }
        let (step, _) = solve_spd_or_truncated(&normal, &(-&half_grad), "Gauss-Newton normal equations");
        let sv = jac.singular_values();
        let min_sv = if jac.nrows() < jac.ncols() {
            0.0
        } else {
            sv.iter().copied().fold(f64::INFINITY, f64::min)
        };
        (step, half_grad * 2.0, min_sv)
    }
}

fn with_unknowns(base: &[f64], unknowns: &[usize], values: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut out = base.to_vec();
    for (c, &p) in unknowns.iter().enumerate() {
        out[p] = values(c, p);
    }
    out
}

/// First Gauss–Newton step from `v` (before line search and projection).
pub fn gauss_newton_step(
    bundle: &MeasurementBundle,
    v: &Potential,
    unknown: &UnknownSupport,
    config: &GaussNewtonConfig,
) -> Result<DVector<f64>> {
    let objective = Objective {
        bundle,
        reference: v.as_slice(),
        unknowns: unknown.indices(),
        beta: config.beta,
    };
    let (_, sim, r) = objective.evaluate(v)?;
    Ok(objective.direction(v.as_slice(), &sim, &r).0)
}

/// Output least-squares recovery of `V` on the unknown support.
///
/// Minimizes `sum_ij (G_ij(V) - G_ij^meas)^2 + beta sum_p w_p (V_p - V_init,p)^2`
/// with projected Gauss–Newton steps and Armijo backtracking; the misfit
/// history is nonincreasing and every iterate is nonnegative.
pub fn gauss_newton_recover(
    bundle: &MeasurementBundle,
    v_init: &Potential,
    unknown: &UnknownSupport,
    config: &GaussNewtonConfig,
) -> Result<InversionResult> {
    v_init.field().check_on(&bundle.spectrum)?;
    if unknown.indices().iter().any(|&p| p >= bundle.spectrum.num_points()) {
        return Err(Error::InvalidArgument("unknown support exceeds the grid".into()));
    }
    let objective = Objective {
        bundle,
        reference: v_init.as_slice(),
        unknowns: unknown.indices(),
        beta: config.beta,
    };
    let spectrum = &bundle.spectrum;
    let mut v = v_init.clone();
    let (mut misfit, mut sim, mut r) = objective.evaluate(&v)?;
    let mut history = vec![misfit];
    let mut converged = misfit <= config.misfit_tolerance;
    let mut stagnated = false;
    let mut iterations = 0;
    let mut min_sv = f64::NAN;

    while !converged && iterations < config.max_iterations {
        let (step, grad, sv) = objective.direction(v.as_slice(), &sim, &r);
        min_sv = sv;
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=config.max_backtracks {
            let trial = with_unknowns(v.as_slice(), unknown.indices(), |c, p| {
                (v.as_slice()[p] + t * step[c]).max(0.0)
            });
            let delta = DVector::from_iterator(
                unknown.indices().len(),
                unknown.indices().iter().map(|&p| trial[p] - v.as_slice()[p]),
            );
            let candidate = Potential::from_values(spectrum, trial)?;
            let (m_new, sim_new, r_new) = objective.evaluate(&candidate)?;
            if m_new <= misfit && m_new <= misfit + config.armijo * grad.dot(&delta) {
                accepted = Some((candidate, m_new, sim_new, r_new));
                break;
            }
            t *= 0.5;
        }
        let Some((candidate, m_new, sim_new, r_new)) = accepted else {
            log::warn!("Gauss-Newton stagnated after {iterations} iterations (misfit {misfit:e})");
            stagnated = true;
            break;
        };
        iterations += 1;
        let decrease = misfit - m_new;
        v = candidate;
        misfit = m_new;
        sim = sim_new;
        r = r_new;
        history.push(misfit);
        if misfit <= config.misfit_tolerance || decrease <= config.relative_tolerance * history[0] {
            converged = true;
        }
    }
    if min_sv.is_nan() {
        let jac = jacobian(spectrum, &sim.solutions, unknown.indices());
        min_sv = if jac.nrows() < jac.ncols() {
            0.0
        } else {
            jac.singular_values().iter().copied().fold(f64::INFINITY, f64::min)
        };
    }
    Ok(InversionResult {
        v_recovered: v,
        support_mode: unknown.mode(),
        unknown_indices: unknown.indices().to_vec(),
        misfit_history: history,
        iterations,
        converged,
        stagnated,
        jacobian_min_singular_value: min_sv,
        relative_error: None,
    })
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::measurement::BasisKind;
    use crate::spectrum::build_torus_spectrum;

    fn setup() -> (Arc<Spectrum>, Region, SourceBasis, FracParam) {
        let sp = Arc::new(build_torus_spectrum(1, &[2.0 * PI], 10, 32).unwrap());
        let region = Region::from_predicate(&sp, "half", |x| x[0] > 0.0 && x[0] < PI).unwrap();
        let basis = SourceBasis::build(&sp, &region, BasisKind::Bump, 8).unwrap();
        (sp, region, basis, FracParam::new(0.5).unwrap())
    }

    #[test]
    fn jacobian_entry_cases() {
        let (sp, ..) = setup();
        let u = Field::from_fn(&sp, |x| x[0].sin());
        let v = Field::from_fn(&sp, |x| 1.0 + x[0].cos());
        assert_eq!(jacobian_entry(&u, &v, 0, 0.3).unwrap(), 0.0);
        assert_eq!(
            jacobian_entry(&u, &v, 5, 0.3).unwrap(),
            jacobian_entry(&v, &u, 5, 0.3).unwrap()
        );
        assert!(jacobian_entry(&u, &v, 32, 0.3).is_err());
    }

    #[test]
    fn bundle_checks() {
        let (sp, _, basis, s) = setup();
        let v = Potential::constant(&sp, 1.0).unwrap();
        let b = MeasurementBundle::simulate(&sp, &v, s, &basis).unwrap();
        let mut g = b.gram().clone();
        g[(0, 1)] += 1e-3;
        assert!(matches!(
            MeasurementBundle::new(&sp, s, basis.clone(), g, b.restricted_solutions().to_vec()),
            Err(Error::BundleMismatch(_))
        ));
        let mut sols = b.restricted_solutions().to_vec();
        sols[2][3] += 1e-3;
        assert!(MeasurementBundle::new(&sp, s, basis, b.gram().clone(), sols).is_err());
    }

    #[test]
    fn fixed_point_converges_immediately() {
        let (sp, region, basis, s) = setup();
        let v = Potential::new(Field::from_fn(&sp, |x| 1.0 + 0.4 * x[0].sin().powi(2))).unwrap();
        let b = MeasurementBundle::simulate(&sp, &v, s, &basis).unwrap();
        let res =
            gauss_newton_recover(&b, &v, &UnknownSupport::inside(&region), &GaussNewtonConfig::default()).unwrap();
        assert_eq!(res.iterations, 0);
        assert!(res.converged);
        assert!(res.misfit_history[0] < 1e-20);
    }

    #[test]
    fn zero_data_zero_step() {
        let (sp, region, basis, s) = setup();
        let v = Potential::constant(&sp, 1.3).unwrap();
        let b = MeasurementBundle::simulate(&sp, &v, s, &basis).unwrap();
        let step = gauss_newton_step(&b, &v, &UnknownSupport::inside(&region), &GaussNewtonConfig::default()).unwrap();
        assert!(step.norm() < 1e-8, "{}", step.norm());
    }

    #[test]
    fn identical_bundles_give_zero_delta() {
        let (sp, region, basis, s) = setup();
        let v = Potential::constant(&sp, 1.0).unwrap();
        let b = MeasurementBundle::simulate(&sp, &v, s, &basis).unwrap();
        let probes = default_probes(&sp, &region, 6);
        let rec = linearized_recover(&b, &b.clone(), &probes, &LinearizedConfig::default()).unwrap();
        let norm = region.inner(&sp, &rec.delta_v, &rec.delta_v).sqrt();
        assert!(norm < 1e-6);
    }

    #[test]
    fn mismatched_bundles_rejected() {
        let (sp, region, basis, s) = setup();
        let v = Potential::constant(&sp, 1.0).unwrap();
        let b1 = MeasurementBundle::simulate(&sp, &v, s, &basis).unwrap();
        let other = SourceBasis::build(&sp, &region, BasisKind::WindowedMode, 8).unwrap();
        let b2 = MeasurementBundle::simulate(&sp, &v, s, &other).unwrap();
        let probes = default_probes(&sp, &region, 4);
        assert!(matches!(
            linearized_recover(&b1, &b2, &probes, &LinearizedConfig::default()),
            Err(Error::BundleMismatch(_))
        ));
        let b3 = MeasurementBundle::simulate(&sp, &v, FracParam::new(0.3).unwrap(), &basis).unwrap();
        assert!(linearized_recover(&b1, &b3, &probes, &LinearizedConfig::default()).is_err());
    }

    #[test]
    fn dependent_probes_rejected() {
        let (sp, region, basis, s) = setup();
        let v = Potential::constant(&sp, 1.0).unwrap();
        let b = MeasurementBundle::simulate(&sp, &v, s, &basis).unwrap();
        let h = DVector::from_element(region.len(), 1.0);
        let probes = vec![h.clone(), h * 2.0];
        assert!(matches!(
            linearized_recover(&b, &b, &probes, &LinearizedConfig::default()),
            Err(Error::RankDeficient { rank: 1, requested: 2 })
        ));
    }

    #[test]
    fn support_subsets_validated() {
        let (_, region, ..) = setup();
        let inside = region.indices()[0];
        let outside = region.complement().indices()[0];
        assert!(UnknownSupport::subset(&region, SupportMode::OutsideO, &[outside]).is_ok());
        assert!(UnknownSupport::subset(&region, SupportMode::OutsideO, &[inside]).is_err());
        assert!(UnknownSupport::subset(&region, SupportMode::InsideO, &[]).is_err());
    }
}

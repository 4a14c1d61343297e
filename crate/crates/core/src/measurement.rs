//! Local source-to-solution map `f -> u_f|_O` and its structural identities.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::OperatorMatrix;
use crate::fractional::{spectral_power, Field, FracParam};
use crate::spectrum::{Region, Spectrum};

/// Samples with `|f| > SUPPORT_TOL` outside the region violate the support constraint.
pub const SUPPORT_TOL: f64 = 1e-12;
/// Minimum singular value of the source sample matrix.
pub const INDEPENDENCE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    /// Mollified bumps centered at quasi-uniform region points.
    Bump,
    /// Eigenfunctions multiplied by a smooth cutoff inside the region.
    WindowedMode,
    /// Caller-supplied elements.
    Custom,
}

impl fmt::Display for BasisKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BasisKind::Bump => "bump",
            BasisKind::WindowedMode => "windowed-mode",
            BasisKind::Custom => "custom",
        })
    }
}

impl FromStr for BasisKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bump" => Ok(BasisKind::Bump),
            "windowed-mode" => Ok(BasisKind::WindowedMode),
            "custom" => Ok(BasisKind::Custom),
            other => Err(Error::InvalidArgument(format!("unknown basis kind {other:?}"))),
        }
    }
}

/// Finite family of region-supported sources.
#[derive(Debug, Clone)]
pub struct SourceBasis {
    region: Region,
    kind: BasisKind,
    requested: usize,
    elements: Vec<Field>,
}

/// `exp(1 - 1/(1 - t^2))` on `|t| < 1`, normalized to 1 at the origin.
pub fn bump_profile(t: f64) -> f64 {
    if t.abs() < 1.0 {
        (1.0 - 1.0 / (1.0 - t * t)).exp()
    } else {
        0.0
    }
}

/// Smooth step: 0 for `t <= 0`, 1 for `t >= 1`, `C^inf` in between.
pub fn smooth_step(t: f64) -> f64 {
    let e = |x: f64| if x > 0.0 { (-1.0 / x).exp() } else { 0.0 };
    let a = e(t);
    let b = e(1.0 - t);
    if a + b == 0.0 {
        0.0
    } else {
        a / (a + b)
    }
}

fn columns_matrix(columns: &[&DVector<f64>]) -> DMatrix<f64> {
    let rows = columns.first().map_or(0, |c| c.len());
    DMatrix::from_fn(rows, columns.len(), |i, j| columns[j][i])
}

fn min_singular_value(columns: &[&DVector<f64>]) -> f64 {
    if columns.is_empty() {
        return f64::INFINITY;
    }
    let mat = columns_matrix(columns);
    let sv = mat.singular_values();
    if mat.nrows() < mat.ncols() {
        return 0.0;
    }
    sv.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Distance from each region point to the nearest grid point outside it.
fn depth_in_region(spectrum: &Spectrum, region: &Region) -> Vec<f64> {
    let grid = spectrum.grid();
    let outside = region.complement();
    region
        .indices()
        .iter()
        .map(|&p| {
            outside
                .indices()
                .iter()
                .map(|&q| grid.distance(grid.point(p), grid.point(q)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Smooth cutoff equal to 1 deep inside the region, vanishing outside it.
pub fn region_cutoff(spectrum: &Spectrum, region: &Region) -> Vec<f64> {
    let depth = depth_in_region(spectrum, region);
    let width = 0.5 * depth.iter().copied().fold(0.0, f64::max);
    let mut out = vec![0.0; spectrum.num_points()];
    for (&p, &d) in region.indices().iter().zip(&depth) {
        out[p] = smooth_step(d / width);
    }
    out
}

/// Farthest-point ordering of region points, seeded at the deepest point.
fn quasi_uniform_centers(spectrum: &Spectrum, region: &Region, m: usize) -> Vec<usize> {
    let grid = spectrum.grid();
    let idx = region.indices();
    let depth = depth_in_region(spectrum, region);
    let mut first = 0;
    for (i, d) in depth.iter().enumerate() {
        if *d > depth[first] {
            first = i;
        }
    }
    let mut chosen = vec![idx[first]];
    let mut dist: Vec<f64> = idx
        .iter()
        .map(|&p| grid.distance(grid.point(p), grid.point(idx[first])))
        .collect();
    while chosen.len() < m {
        let mut best = 0;
        for i in 0..idx.len() {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        let c = idx[best];
        chosen.push(c);
        for (i, &p) in idx.iter().enumerate() {
            dist[i] = dist[i].min(grid.distance(grid.point(p), grid.point(c)));
        }
    }
    chosen
}

impl SourceBasis {
    /// Build `m` sources of the given kind inside `region`.
    ///
    /// If the candidates are numerically dependent, the dependent ones are
    /// dropped and the reduction is reported through [`SourceBasis::requested`].
    pub fn build(spectrum: &Arc<Spectrum>, region: &Region, kind: BasisKind, m: usize) -> Result<Self> {
        if region.num_points() != spectrum.num_points() {
            return Err(Error::GridMismatch);
        }
        if m == 0 {
            return Err(Error::InvalidArgument("basis size m must be positive".into()));
        }
        if m > region.len() {
            return Err(Error::InvalidArgument(format!(
                "basis size {m} exceeds the {} region points",
                region.len()
            )));
        }
        let grid = spectrum.grid();
        let candidates: Vec<Vec<f64>> = match kind {
            BasisKind::Bump => {
                let dim = grid.dim() as f64;
                let spacing = (region.volume(spectrum) / m as f64).powf(1.0 / dim);
                let radius = (1.5 * spacing).max(1.01 * grid.spacing());
                quasi_uniform_centers(spectrum, region, m)
                    .into_iter()
                    .map(|c| {
                        (0..grid.len())
                            .map(|p| {
                                if region.contains(p) {
                                    bump_profile(grid.distance(grid.point(p), grid.point(c)) / radius)
                                } else {
                                    0.0
                                }
                            })
                            .collect()
                    })
                    .collect()
            }
            BasisKind::WindowedMode => {
                let cutoff = region_cutoff(spectrum, region);
                let k = spectrum.num_modes();
                if m > k {
                    return Err(Error::InvalidArgument(format!(
                        "windowed-mode basis needs m <= K = {k}, got {m}"
                    )));
                }
                (0..m)
                    .map(|k| {
                        spectrum
                            .modes()
                            .row(k)
                            .iter()
                            .zip(&cutoff)
                            .map(|(phi, chi)| phi * chi)
                            .collect()
                    })
                    .collect()
            }
            BasisKind::Custom => {
                return Err(Error::InvalidArgument(
                    "custom bases are built with SourceBasis::from_elements".into(),
                ))
            }
        };

        let columns: Vec<DVector<f64>> = candidates.into_iter().map(DVector::from_vec).collect();
        let mut kept: Vec<&DVector<f64>> = Vec::with_capacity(m);
        for col in &columns {
            kept.push(col);
            if min_singular_value(&kept) <= INDEPENDENCE_TOL {
                kept.pop();
            }
        }
        if kept.len() < m {
            log::warn!(
                "{kind} basis on {}: numerical rank {} of {m} requested, reduced",
                region.name(),
                kept.len()
            );
        }
        let elements = kept
            .into_iter()
            .map(|c| Field::from_values(spectrum, c.as_slice().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            region: region.clone(),
            kind,
            requested: m,
            elements,
        })
    }

    /// Basis from explicit fields; every element must vanish outside the
    /// region and the family must be independent.
    pub fn from_elements(region: &Region, kind: BasisKind, elements: Vec<Field>) -> Result<Self> {
        if elements.is_empty() {
            return Err(Error::InvalidArgument("empty source basis".into()));
        }
        for f in &elements {
            check_support(f, region)?;
        }
        let cols: Vec<&DVector<f64>> = elements.iter().map(|f| f.values()).collect();
        let sigma = min_singular_value(&cols);
        if sigma <= INDEPENDENCE_TOL {
            let mat = columns_matrix(&cols);
            let rank = mat.rank(INDEPENDENCE_TOL);
            return Err(Error::RankDeficient {
                rank,
                requested: elements.len(),
            });
        }
        Ok(Self {
            region: region.clone(),
            kind,
            requested: elements.len(),
            elements,
        })
    }

    pub fn region(&self) -> &Region {
        &self.region
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// Size asked for; exceeds [`SourceBasis::len`] when the family was reduced.
    pub fn requested(&self) -> usize {
        self.requested
    }

    pub fn elements(&self) -> &[Field] {
        &self.elements
    }

    /// Smallest singular value of the `P x m` sample matrix.
    pub fn min_singular_value(&self) -> f64 {
        let cols: Vec<&DVector<f64>> = self.elements.iter().map(|f| f.values()).collect();
        min_singular_value(&cols)
    }

    /// `B_ij = (f_i, f_j)_{L^2}`.
    pub fn mass_matrix(&self) -> DMatrix<f64> {
        let m = self.len();
        let w = self.elements[0].spectrum().weights();
        DMatrix::from_fn(m, m, |i, j| {
            self.elements[i]
                .as_slice()
                .iter()
                .zip(self.elements[j].as_slice())
                .zip(w)
                .map(|((a, b), w)| w * a * b)
                .sum()
        })
    }

    /// `sum_i a_i f_i`.
    pub fn combine(&self, coeffs: &[f64]) -> Result<Field> {
        if coeffs.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: coeffs.len(),
            });
        }
        let sp = self.elements[0].spectrum();
        let mut values = DVector::zeros(sp.num_points());
        for (a, f) in coeffs.iter().zip(&self.elements) {
            values.axpy(*a, f.values(), 1.0);
        }
        Field::from_values(sp, values.as_slice().to_vec())
    }
}

/// Reject `f` if it is nonzero outside `region`.
pub fn check_support(f: &Field, region: &Region) -> Result<()> {
    if region.num_points() != f.as_slice().len() {
        return Err(Error::GridMismatch);
    }
    for (p, v) in f.as_slice().iter().enumerate() {
        if !region.contains(p) && v.abs() > SUPPORT_TOL {
            return Err(Error::SupportViolation { index: p, value: *v });
        }
    }
    Ok(())
}

/// `L_{V,O} f = u_f|_O`, as region samples in index order.
pub fn apply_map(op: &OperatorMatrix, f: &Field, region: &Region) -> Result<Vec<f64>> {
    check_support(f, region)?;
    let u = op.solve(f)?;
    Ok(region.restrict(u.as_slice()))
}

/// Dense realization of `L_{V,O}` on a source basis.
#[derive(Debug, Clone)]
pub struct SourceSolutionMap {
    /// `G_ij = (f_i, L f_j)_{L^2(M)}`.
    pub matrix: DMatrix<f64>,
    /// `u_j|_O` for each basis element.
    pub restricted_solutions: Vec<Vec<f64>>,
    /// Global solutions `u_j`.
    pub solutions: Vec<Field>,
    /// `max_ij |G_ij - G_ji| / (||f_i|| ||f_j||)`.
    pub symmetry_residual: f64,
}

impl SourceSolutionMap {
    /// Numerical rank of the Gram matrix at relative threshold `rtol`.
    pub fn numerical_rank(&self, rtol: f64) -> usize {
        let sv = self.matrix.singular_values();
        let max = sv.iter().copied().fold(0.0, f64::max);
        sv.iter().filter(|&&s| s > rtol * max).count()
    }

    /// Smallest eigenvalue of the symmetric part of `G`.
    pub fn min_eigenvalue(&self) -> f64 {
        let sym = (&self.matrix + self.matrix.transpose()) * 0.5;
        sym.symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

/// Gram matrix `(f_i, L f_j)` of the source-to-solution map.
///
/// Solves run in parallel over basis elements; each entry is computed
/// independently so the result does not depend on the schedule.
pub fn gram_matrix(op: &OperatorMatrix, basis: &SourceBasis) -> Result<SourceSolutionMap> {
    let elements = basis.elements();
    for f in elements {
        f.check_on(op.spectrum())?;
    }
    let solutions: Vec<Field> = elements.par_iter().map(|f| op.solve(f)).collect::<Result<_>>()?;
    let w = op.spectrum().weights();
    let m = elements.len();
    let matrix: DMatrix<f64> = DMatrix::from_fn(m, m, |i, j| {
        elements[i]
            .as_slice()
            .iter()
            .zip(solutions[j].as_slice())
            .zip(w)
            .map(|((f, u), w)| w * f * u)
            .sum()
    });
    let norms: Vec<f64> = elements.iter().map(crate::fractional::l2_norm).collect();
    let mut symmetry_residual: f64 = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            let r = (matrix[(i, j)] - matrix[(j, i)]).abs() / (norms[i] * norms[j]);
            symmetry_residual = symmetry_residual.max(r);
        }
    }
    let region = basis.region();
    let restricted_solutions = solutions.iter().map(|u| region.restrict(u.as_slice())).collect();
    Ok(SourceSolutionMap {
        matrix,
        restricted_solutions,
        solutions,
        symmetry_residual,
    })
}

/// Both sides of the integral identity for one source pair.
#[derive(Debug, Clone, Copy)]
pub struct IdentityTerms {
    /// `((L_1 - L_2) f_1, f_2)_{L^2}`.
    pub map_difference: f64,
    /// `((V_1 - V_2) u_1^{f_1}, u_2^{f_2})_{L^2}`.
    pub potential_pairing: f64,
}

impl IdentityTerms {
    pub fn residual(&self) -> f64 {
        (self.map_difference + self.potential_pairing).abs()
    }
}

pub fn integral_identity_terms(
    op1: &OperatorMatrix,
    op2: &OperatorMatrix,
    f1: &Field,
    f2: &Field,
    region: &Region,
) -> Result<IdentityTerms> {
    if !op1.spectrum().same_as(op2.spectrum()) {
        return Err(Error::GridMismatch);
    }
    if op1.s() != op2.s() {
        return Err(Error::InvalidArgument("operators have different orders s".into()));
    }
    check_support(f1, region)?;
    check_support(f2, region)?;
    let u1 = op1.solve(f1)?;
    let u2 = op2.solve(f2)?;
    let v12 = op2.solve(f1)?;
    let w = op1.spectrum().weights();
    // (L f, g) only sees u on O since g vanishes outside
    let pair = |u: &Field, g: &Field| -> f64 {
        region
            .indices()
            .iter()
            .map(|&p| w[p] * u.as_slice()[p] * g.as_slice()[p])
            .sum()
    };
    let map_difference = pair(&u1, f2) - pair(&v12, f2);
    let potential_pairing = w
        .iter()
        .zip(op1.potential().as_slice())
        .zip(op2.potential().as_slice())
        .zip(u1.as_slice().iter().zip(u2.as_slice()))
        .map(|(((w, a), b), (x, y))| w * (a - b) * x * y)
        .sum();
    Ok(IdentityTerms {
        map_difference,
        potential_pairing,
    })
}

/// `|((L_1 - L_2) f_1, f_2) + ((V_1 - V_2) u_1, u_2)|`, zero up to rounding.
pub fn integral_identity_residual(
    op1: &OperatorMatrix,
    op2: &OperatorMatrix,
    f1: &Field,
    f2: &Field,
    region: &Region,
) -> Result<f64> {
    Ok(integral_identity_terms(op1, op2, f1, f2, region)?.residual())
}

/// Smallest singular value of `u -> (u|_O, ((-Δ_g)^s u)|_O)` on the span of
/// the retained modes, in `L^2` norms. A positive value is the
/// finite-dimensional shadow of unique continuation.
pub fn discrete_ucp_margin(spectrum: &Spectrum, s: FracParam, region: &Region) -> f64 {
    let k = spectrum.num_modes();
    let r = region.len();
    if 2 * r < k {
        return 0.0;
    }
    let w = spectrum.weights();
    let modes = spectrum.modes();
    let powers: Vec<f64> = spectrum
        .eigenvalues()
        .iter()
        .map(|l| spectral_power(*l, s.value()))
        .collect();
    let mat = DMatrix::from_fn(2 * r, k, |row, col| {
        let (p, scale) = if row < r {
            (region.indices()[row], 1.0)
        } else {
            (region.indices()[row - r], powers[col])
        };
        w[p].sqrt() * scale * modes[(col, p)]
    });
    mat.singular_values().iter().copied().fold(f64::INFINITY, f64::min)
}

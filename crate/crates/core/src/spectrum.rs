//! Discrete spectral data of a closed manifold.
//!
//! A [`Spectrum`] bundles the first `K` Laplace–Beltrami eigenvalues, the
//! samples of the matching orthonormal eigenfunctions on a quadrature grid,
//! and the quadrature weights. Flat tori are built analytically; any other
//! manifold enters through [`crate::io::load_spectrum`].

use std::cmp::Ordering;
use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Relative tolerance on `sum(weights) == volume`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;
/// Orthonormality tolerance the analytic backends guarantee.
pub const TORUS_ORTHONORMALITY_TOL: f64 = 1e-10;
/// Orthonormality tolerance applied to ingested spectra.
pub const LOADED_ORTHONORMALITY_TOL: f64 = 1e-6;
/// Allowed distance of the first ingested eigenvalue from zero.
pub const ZERO_EIGENVALUE_TOL: f64 = 1e-10;

/// Quadrature grid: points with positive volume weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    /// Row-major `P x dim` coordinates.
    coords: Vec<f64>,
    weights: Vec<f64>,
    volume: f64,
    /// Axis periods for periodic distance, when the manifold is a torus.
    periods: Option<Vec<f64>>,
}

impl Grid {
    pub fn new(
        dim: usize,
        coords: Vec<f64>,
        weights: Vec<f64>,
        volume: f64,
        periods: Option<Vec<f64>>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::SpectrumInvariant("grid dimension must be >= 1".into()));
        }
        if coords.len() != weights.len() * dim {
            return Err(Error::LengthMismatch {
                expected: weights.len() * dim,
                actual: coords.len(),
            });
        }
        if weights.is_empty() {
            return Err(Error::SpectrumInvariant("grid has no points".into()));
        }
        if let Some(p) = &periods {
            if p.len() != dim || p.iter().any(|&c| !(c > 0.0)) {
                return Err(Error::SpectrumInvariant("invalid periods".into()));
            }
        }
        if !(volume > 0.0 && volume.is_finite()) {
            return Err(Error::SpectrumInvariant(format!("volume {volume} must be positive")));
        }
        if let Some((p, &w)) = weights.iter().enumerate().find(|(_, &w)| !(w > 0.0 && w.is_finite())) {
            return Err(Error::SpectrumInvariant(format!(
                "weight {p} is {w}; weights must be strictly positive"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if ((sum - volume) / volume).abs() > WEIGHT_SUM_TOL {
            return Err(Error::SpectrumInvariant(format!(
                "weights sum to {sum}, declared volume is {volume}"
            )));
        }
        Ok(Self {
            dim,
            coords,
            weights,
            volume,
            periods,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, p: usize) -> &[f64] {
        &self.coords[p * self.dim..(p + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    pub fn periods(&self) -> Option<&[f64]> {
        self.periods.as_deref()
    }

    /// Euclidean distance, wrapped along periodic axes.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim {
            let mut d = (a[i] - b[i]).abs();
            if let Some(per) = &self.periods {
                d %= per[i];
                d = d.min(per[i] - d);
            }
            acc += d * d;
        }
        acc.sqrt()
    }

    /// Typical point spacing, `(vol / P)^(1/dim)`.
    pub fn spacing(&self) -> f64 {
        (self.volume / self.len() as f64).powf(1.0 / self.dim as f64)
    }
}

/// Eigen-data `(lambda_k, phi_k)` sampled on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    name: String,
    eigenvalues: Vec<f64>,
    /// `K x P`, row k holds `phi_k` at the grid points.
    modes: DMatrix<f64>,
    grid: Grid,
    /// Signed frequency labels of torus modes (negative representative = sine).
    frequencies: Option<Vec<Vec<i64>>>,
}

impl Spectrum {
    /// Assemble a spectrum from raw parts and check every invariant.
    ///
    /// `orth_tol` bounds the discrete orthonormality residual and the
    /// deviation of row 0 from the constant `vol^{-1/2}`.
    pub fn from_parts(
        name: impl Into<String>,
        mut eigenvalues: Vec<f64>,
        modes: DMatrix<f64>,
        grid: Grid,
        orth_tol: f64,
    ) -> Result<Self> {
        let k = eigenvalues.len();
        if k == 0 {
            return Err(Error::SpectrumInvariant("no eigenvalues".into()));
        }
        if modes.nrows() != k {
            return Err(Error::LengthMismatch {
                expected: k,
                actual: modes.nrows(),
            });
        }
        if modes.ncols() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                actual: modes.ncols(),
            });
        }
        if eigenvalues[0].abs() > ZERO_EIGENVALUE_TOL {
            return Err(Error::SpectrumInvariant(format!(
                "first eigenvalue {} is not zero",
                eigenvalues[0]
            )));
        }
        eigenvalues[0] = 0.0;
        if eigenvalues.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::SpectrumInvariant(
                "eigenvalues must be finite and nonnegative".into(),
            ));
        }
        if eigenvalues.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::SpectrumInvariant("eigenvalues not ascending".into()));
        }
        let c0 = grid.volume().powf(-0.5);
        if let Some((p, v)) = modes
            .row(0)
            .iter()
            .enumerate()
            .find(|(_, v)| (*v - c0).abs() > orth_tol)
        {
            return Err(Error::SpectrumInvariant(format!(
                "mode 0 is not constant vol^(-1/2) = {c0}: sample {p} is {v}"
            )));
        }
        let spectrum = Self {
            name: name.into(),
            eigenvalues,
            modes,
            grid,
            frequencies: None,
        };
        let (j, kk, residual) = spectrum.orthonormality_residual();
        if residual > orth_tol {
            return Err(Error::Orthonormality { j, k: kk, residual });
        }
        Ok(spectrum)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn num_points(&self) -> usize {
        self.grid.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn modes(&self) -> &DMatrix<f64> {
        &self.modes
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        self.grid.weights()
    }

    pub fn volume(&self) -> f64 {
        self.grid.volume()
    }

    pub fn frequencies(&self) -> Option<&[Vec<i64>]> {
        self.frequencies.as_deref()
    }

    /// Samples of `phi_k`.
    pub fn mode(&self, k: usize) -> Vec<f64> {
        self.modes.row(k).iter().copied().collect()
    }

    /// Worst entry of `Phi W Phi^T - I` as `(j, k, |residual|)`.
    pub fn orthonormality_residual(&self) -> (usize, usize, f64) {
        let mut scaled = self.modes.clone();
        for (p, w) in self.grid.weights().iter().enumerate() {
            scaled.column_mut(p).scale_mut(*w);
        }
        let gram = &scaled * self.modes.transpose();
        let mut worst = (0, 0, 0.0);
        for j in 0..gram.nrows() {
            for k in j..gram.ncols() {
                let target = if j == k { 1.0 } else { 0.0 };
                let r = (gram[(j, k)] - target).abs();
                if r > worst.2 || r.is_nan() {
                    worst = (j, k, r);
                }
            }
        }
        worst
    }

    /// `(index, eigenvalue)` rows as CSV text.
    pub fn eigenvalues_csv(&self) -> String {
        let mut out = String::from("index,eigenvalue\n");
        for (k, l) in self.eigenvalues.iter().enumerate() {
            out.push_str(&format!("{k},{l:e}\n"));
        }
        out
    }

    pub(crate) fn same_as(&self, other: &Spectrum) -> bool {
        std::ptr::eq(self, other)
            || (self.eigenvalues == other.eigenvalues && self.grid == other.grid && self.modes == other.modes)
    }
}

impl fmt::Display for Spectrum {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} (dim {}, K = {}, P = {}, vol = {})",
            self.name,
            self.grid.dim(),
            self.num_modes(),
            self.num_points(),
            self.volume()
        )
    }
}

/// A torus mode, labelled by its frequency tuple.
#[derive(Debug, Clone)]
struct TorusMode {
    label: Vec<i64>,
    /// Frequency with first nonzero component positive (zero for the constant).
    rep: Vec<i64>,
    sine: bool,
    eigenvalue: f64,
}

fn is_positive(m: &[i64]) -> bool {
    m.iter().find(|&&x| x != 0).is_some_and(|&x| x > 0)
}

/// Analytic spectrum of the flat torus `prod_i R / (c_i Z)`.
///
/// Frequencies range over `[-modes_per_axis, modes_per_axis]^dim`; each
/// `+-m` pair yields one cosine and one sine. Equal eigenvalues are ordered
/// by the lexicographic order of the representative frequency, cosine first.
pub fn build_torus_spectrum(
    dim: usize,
    circumferences: &[f64],
    modes_per_axis: usize,
    grid_per_axis: usize,
) -> Result<Spectrum> {
    if !(dim == 1 || dim == 2) {
        return Err(Error::InvalidArgument(format!(
            "torus dimension must be 1 or 2, got {dim}"
        )));
    }
    if circumferences.len() != dim {
        return Err(Error::LengthMismatch {
            expected: dim,
            actual: circumferences.len(),
        });
    }
    if let Some(c) = circumferences.iter().find(|c| !(**c > 0.0 && c.is_finite())) {
        return Err(Error::InvalidArgument(format!("circumference {c} must be positive")));
    }
    if modes_per_axis == 0 {
        return Err(Error::InvalidArgument("modes_per_axis must be positive".into()));
    }
    if grid_per_axis < 2 * modes_per_axis + 1 {
        return Err(Error::InvalidArgument(format!(
            "grid_per_axis {grid_per_axis} below exactness bound 2*{modes_per_axis}+1"
        )));
    }

    let n = modes_per_axis as i64;
    let side = 2 * modes_per_axis + 1;
    let mut modes: Vec<TorusMode> = Vec::with_capacity(side.pow(dim as u32));
    for flat in 0..side.pow(dim as u32) {
        let mut rem = flat;
        let mut label = vec![0i64; dim];
        for axis in (0..dim).rev() {
            label[axis] = (rem % side) as i64 - n;
            rem /= side;
        }
        let sine = !is_positive(&label) && label.iter().any(|&x| x != 0);
        let rep: Vec<i64> = if sine {
            label.iter().map(|x| -x).collect()
        } else {
            label.clone()
        };
        let eigenvalue = rep
            .iter()
            .zip(circumferences)
            .map(|(&m, &c)| (2.0 * PI * m as f64 / c).powi(2))
            .sum();
        modes.push(TorusMode {
            label,
            rep,
            sine,
            eigenvalue,
        });
    }
    modes.sort_by(|a, b| {
        a.eigenvalue
            .partial_cmp(&b.eigenvalue)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.rep.cmp(&b.rep))
            .then_with(|| a.sine.cmp(&b.sine))
    });

    let volume: f64 = circumferences.iter().product();
    let total = grid_per_axis.pow(dim as u32);
    let mut coords = Vec::with_capacity(total * dim);
    for p in 0..total {
        let mut rem = p;
        let mut idx = vec![0usize; dim];
        for axis in (0..dim).rev() {
            idx[axis] = rem % grid_per_axis;
            rem /= grid_per_axis;
        }
        for axis in 0..dim {
            coords.push(circumferences[axis] * idx[axis] as f64 / grid_per_axis as f64);
        }
    }
    let weights = vec![volume / total as f64; total];
    let grid = Grid::new(dim, coords, weights, volume, Some(circumferences.to_vec()))?;

    let c0 = volume.powf(-0.5);
    let amp = (2.0 / volume).sqrt();
    let k_total = modes.len();
    let mut mat = DMatrix::zeros(k_total, total);
    for (k, mode) in modes.iter().enumerate() {
        for p in 0..total {
            let x = grid.point(p);
            mat[(k, p)] = if mode.rep.iter().all(|&m| m == 0) {
                c0
            } else {
                let phase: f64 = mode
                    .rep
                    .iter()
                    .zip(x)
                    .zip(circumferences)
                    .map(|((&m, &xi), &c)| 2.0 * PI * m as f64 * xi / c)
                    .sum();
                if mode.sine {
                    amp * phase.sin()
                } else {
                    amp * phase.cos()
                }
            };
        }
    }
    let eigenvalues = modes.iter().map(|m| m.eigenvalue).collect();
    let name = format!(
        "torus{dim}d-c{}-n{modes_per_axis}-g{grid_per_axis}",
        circumferences
            .iter()
            .map(|c| format!("{c}"))
            .collect::<Vec<_>>()
            .join("x")
    );
    let mut spectrum = Spectrum::from_parts(name, eigenvalues, mat, grid, TORUS_ORTHONORMALITY_TOL)?;
    spectrum.frequencies = Some(modes.into_iter().map(|m| m.label).collect());
    Ok(spectrum)
}

/// The open set `O` as a grid mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    name: String,
    mask: Vec<bool>,
    indices: Vec<usize>,
}

impl Region {
    /// Region from a mask; at least one point must lie inside and one outside.
    pub fn from_mask(name: impl Into<String>, mask: Vec<bool>) -> Result<Self> {
        let indices: Vec<usize> = mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        if indices.is_empty() {
            return Err(Error::InvalidRegion("selection is empty".into()));
        }
        if indices.len() == mask.len() {
            return Err(Error::InvalidRegion(
                "selection covers the whole grid; the region must be a proper subset".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            mask,
            indices,
        })
    }

    /// Region of grid points whose coordinates satisfy `predicate`.
    pub fn from_predicate<F>(spectrum: &Spectrum, name: impl Into<String>, predicate: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> bool,
    {
        let grid = spectrum.grid();
        let mask = (0..grid.len()).map(|p| predicate(grid.point(p))).collect();
        Self::from_mask(name, mask)
    }

    /// Region from explicit grid indices.
    pub fn from_indices(spectrum: &Spectrum, name: impl Into<String>, indices: &[usize]) -> Result<Self> {
        let p = spectrum.num_points();
        let mut mask = vec![false; p];
        for &i in indices {
            if i >= p {
                return Err(Error::InvalidRegion(format!("index {i} out of range for {p} points")));
            }
            mask[i] = true;
        }
        Self::from_mask(name, mask)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Grid indices inside the region, ascending.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.mask.len()
    }

    pub fn contains(&self, p: usize) -> bool {
        self.mask[p]
    }

    pub fn complement(&self) -> Region {
        let mask: Vec<bool> = self.mask.iter().map(|b| !b).collect();
        let indices = mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        Region {
            name: format!("complement({})", self.name),
            mask,
            indices,
        }
    }

    /// Restrict full-grid samples to the region, in index order.
    pub fn restrict(&self, values: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&p| values[p]).collect()
    }

    /// Extend region samples to the full grid by zero.
    pub fn extend_by_zero(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: values.len(),
            });
        }
        let mut out = vec![0.0; self.mask.len()];
        for (&p, &v) in self.indices.iter().zip(values) {
            out[p] = v;
        }
        Ok(out)
    }

    /// Weighted `L2(O)` inner product of region samples.
    pub fn inner(&self, spectrum: &Spectrum, a: &[f64], b: &[f64]) -> f64 {
        let w = spectrum.weights();
        self.indices
            .iter()
            .zip(a.iter().zip(b))
            .map(|(&p, (x, y))| w[p] * x * y)
            .sum()
    }

    /// Region volume `sum_{p in O} w_p`.
    pub fn volume(&self, spectrum: &Spectrum) -> f64 {
        let w = spectrum.weights();
        self.indices.iter().map(|&p| w[p]).sum()
    }
}

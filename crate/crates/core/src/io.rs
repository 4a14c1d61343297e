//! File formats: spectrum manifests, fields and measurement bundles.
//!
//! Arrays are raw little-endian `f64` files; manifests are JSON and refer to
//! their arrays by paths relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fractional::{Field, FracParam};
use crate::inversion::MeasurementBundle;
use crate::measurement::{BasisKind, SourceBasis};
use crate::spectrum::{Grid, Region, Spectrum, LOADED_ORTHONORMALITY_TOL};

pub fn write_f64_le(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a raw little-endian `f64` array, optionally checking its length.
pub fn read_f64_le(path: &Path, expected: Option<usize>) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::malformed(
            path,
            format!("{} bytes is not a whole number of f64", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if let Some(n) = expected {
        if data.len() != n {
            return Err(Error::malformed(
                path,
                format!("expected {n} values, found {}", data.len()),
            ));
        }
    }
    Ok(data)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::malformed(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// JSON manifest of a spectrum file set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumManifest {
    pub name: String,
    pub dim: usize,
    pub volume: f64,
    pub num_modes: usize,
    pub num_points: usize,
    pub eigenvalues_file: String,
    /// Row-major `K x P`.
    pub modes_file: String,
    pub weights_file: String,
    /// Row-major `P x dim`.
    pub points_file: String,
    /// Axis periods when the manifold is a flat torus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub periods: Option<Vec<f64>>,
}

/// Write `<stem>.json` and its arrays into `dir`; returns the manifest path.
pub fn save_spectrum(spectrum: &Spectrum, dir: &Path, stem: &str) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let manifest = SpectrumManifest {
        name: spectrum.name().to_string(),
        dim: spectrum.grid().dim(),
        volume: spectrum.volume(),
        num_modes: spectrum.num_modes(),
        num_points: spectrum.num_points(),
        eigenvalues_file: format!("{stem}_eigenvalues.bin"),
        modes_file: format!("{stem}_modes.bin"),
        weights_file: format!("{stem}_weights.bin"),
        points_file: format!("{stem}_points.bin"),
        periods: spectrum.grid().periods().map(<[f64]>::to_vec),
    };
    write_f64_le(&dir.join(&manifest.eigenvalues_file), spectrum.eigenvalues())?;
    let modes = spectrum.modes();
    let row_major: Vec<f64> = (0..modes.nrows())
        .flat_map(|k| modes.row(k).iter().copied().collect::<Vec<_>>())
        .collect();
    write_f64_le(&dir.join(&manifest.modes_file), &row_major)?;
    write_f64_le(&dir.join(&manifest.weights_file), spectrum.weights())?;
    write_f64_le(&dir.join(&manifest.points_file), spectrum.grid().coords())?;
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Load a spectrum, re-validating every invariant.
pub fn load_spectrum(manifest_path: &Path) -> Result<Spectrum> {
    let manifest: SpectrumManifest = read_json(manifest_path)?;
    let base = base_dir(manifest_path);
    let (k, p, dim) = (manifest.num_modes, manifest.num_points, manifest.dim);
    if k == 0 || p == 0 || dim == 0 {
        return Err(Error::malformed(
            manifest_path,
            "num_modes, num_points and dim must be positive",
        ));
    }
    let eigenvalues = read_f64_le(&base.join(&manifest.eigenvalues_file), Some(k))?;
    let modes = read_f64_le(&base.join(&manifest.modes_file), Some(k * p))?;
    let weights = read_f64_le(&base.join(&manifest.weights_file), Some(p))?;
    let coords = read_f64_le(&base.join(&manifest.points_file), Some(p * dim))?;
    let grid = Grid::new(dim, coords, weights, manifest.volume, manifest.periods.clone())?;
    Spectrum::from_parts(
        manifest.name,
        eigenvalues,
        DMatrix::from_row_slice(k, p, &modes),
        grid,
        LOADED_ORTHONORMALITY_TOL,
    )
}

/// Field as CSV: point coordinates then the value.
pub fn field_to_csv(field: &Field) -> String {
    let grid = field.spectrum().grid();
    let mut out: String = (0..grid.dim()).map(|i| format!("x{i},")).collect();
    out.push_str("value\n");
    for (p, v) in field.as_slice().iter().enumerate() {
        for c in grid.point(p) {
            out.push_str(&format!("{c:e},"));
        }
        out.push_str(&format!("{v:e}\n"));
    }
    out
}

pub fn write_field_csv(field: &Field, path: &Path) -> Result<()> {
    fs::write(path, field_to_csv(field)).map_err(|e| Error::io(path, e))
}

/// Read a field CSV; coordinates must match the grid.
pub fn read_field_csv(spectrum: &Arc<Spectrum>, path: &Path) -> Result<Field> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let grid = spectrum.grid();
    let mut values = Vec::with_capacity(grid.len());
    for (line_no, line) in text.lines().skip(1).filter(|l| !l.trim().is_empty()).enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != grid.dim() + 1 {
            return Err(Error::malformed(
                path,
                format!("row {line_no} has {} columns", cols.len()),
            ));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::malformed(path, format!("row {line_no}: {e}")))
        };
        if line_no >= grid.len() {
            return Err(Error::malformed(
                path,
                format!("more rows than the {} grid points", grid.len()),
            ));
        }
        for (i, c) in cols[..grid.dim()].iter().enumerate() {
            let x = parse(c)?;
            if (x - grid.point(line_no)[i]).abs() > 1e-9 * (1.0 + x.abs()) {
                return Err(Error::malformed(
                    path,
                    format!("row {line_no}: coordinate does not match the grid"),
                ));
            }
        }
        values.push(parse(cols[grid.dim()])?);
    }
    if values.len() != grid.len() {
        return Err(Error::malformed(
            path,
            format!("expected {} rows, found {}", grid.len(), values.len()),
        ));
    }
    Field::from_values(spectrum, values)
}

pub fn write_field_bin(field: &Field, path: &Path) -> Result<()> {
    write_f64_le(path, field.as_slice())
}

pub fn read_field_bin(spectrum: &Arc<Spectrum>, path: &Path) -> Result<Field> {
    let values = read_f64_le(path, Some(spectrum.num_points()))?;
    Field::from_values(spectrum, values)
}

/// Read a field from `.csv` or raw binary, by extension.
pub fn read_field(spectrum: &Arc<Spectrum>, path: &Path) -> Result<Field> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_field_csv(spectrum, path),
        _ => read_field_bin(spectrum, path),
    }
}

/// JSON manifest of a measurement bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub s: f64,
    pub region_name: String,
    /// `P` values, 1.0 inside the region and 0.0 outside.
    pub region_mask_file: String,
    pub basis_kind: BasisKind,
    pub m: usize,
    pub num_points: usize,
    pub region_points: usize,
    pub spectrum_manifest: String,
    /// Row-major `m x m`.
    pub gram_file: String,
    /// Row-major `m x P` source samples.
    pub basis_file: String,
    /// One file per source: `u_j` on the region points, in index order.
    pub solution_files: Vec<String>,
}

/// Write a bundle (and its spectrum) into `dir`; returns the manifest path.
pub fn save_bundle(bundle: &MeasurementBundle, dir: &Path) -> Result<PathBuf> {
    ensure_dir(dir)?;
    let spectrum_manifest = save_spectrum(bundle.spectrum(), dir, "spectrum")?;
    let region = bundle.region();
    let m = bundle.num_sources();
    let manifest = BundleManifest {
        s: bundle.s().value(),
        region_name: region.name().to_string(),
        region_mask_file: "region_mask.bin".into(),
        basis_kind: bundle.basis().kind(),
        m,
        num_points: region.num_points(),
        region_points: region.len(),
        spectrum_manifest: spectrum_manifest
            .file_name()
            .and_then(|n| n.to_str())
            .expect("utf-8 file name")
            .to_string(),
        gram_file: "gram.bin".into(),
        basis_file: "basis.bin".into(),
        solution_files: (0..m).map(|j| format!("solution_{j:04}.bin")).collect(),
    };
    let mask: Vec<f64> = region.mask().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    write_f64_le(&dir.join(&manifest.region_mask_file), &mask)?;
    let gram = bundle.gram();
    let gram_rm: Vec<f64> = (0..m).flat_map(|i| (0..m).map(move |j| gram[(i, j)])).collect();
    write_f64_le(&dir.join(&manifest.gram_file), &gram_rm)?;
    let basis: Vec<f64> = bundle
        .basis()
        .elements()
        .iter()
        .flat_map(|f| f.as_slice().to_vec())
        .collect();
    write_f64_le(&dir.join(&manifest.basis_file), &basis)?;
    for (name, u) in manifest.solution_files.iter().zip(bundle.restricted_solutions()) {
        write_f64_le(&dir.join(name), u)?;
    }
    let path = dir.join("bundle.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Load and validate a bundle.
pub fn load_bundle(manifest_path: &Path) -> Result<MeasurementBundle> {
    let manifest: BundleManifest = read_json(manifest_path)?;
    let base = base_dir(manifest_path);
    let spectrum = Arc::new(load_spectrum(&base.join(&manifest.spectrum_manifest))?);
    let p = spectrum.num_points();
    if manifest.num_points != p {
        return Err(Error::malformed(
            manifest_path,
            format!("num_points {} disagrees with the spectrum ({p})", manifest.num_points),
        ));
    }
    let s = FracParam::new(manifest.s)?;
    let mask_vals = read_f64_le(&base.join(&manifest.region_mask_file), Some(p))?;
    let mut mask = Vec::with_capacity(p);
    for v in mask_vals {
        if v != 0.0 && v != 1.0 {
            return Err(Error::malformed(manifest_path, format!("region mask value {v}")));
        }
        mask.push(v == 1.0);
    }
    let region = Region::from_mask(manifest.region_name.clone(), mask)?;
    if region.len() != manifest.region_points {
        return Err(Error::malformed(manifest_path, "region_points disagrees with the mask"));
    }
    let m = manifest.m;
    if manifest.solution_files.len() != m {
        return Err(Error::malformed(manifest_path, "solution_files count differs from m"));
    }
    let basis_vals = read_f64_le(&base.join(&manifest.basis_file), Some(m * p))?;
    let elements = basis_vals
        .chunks_exact(p)
        .map(|c| Field::from_values(&spectrum, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let basis = SourceBasis::from_elements(&region, manifest.basis_kind, elements)?;
    let gram_vals = read_f64_le(&base.join(&manifest.gram_file), Some(m * m))?;
    let gram = DMatrix::from_row_slice(m, m, &gram_vals);
    let solutions = manifest
        .solution_files
        .iter()
        .map(|f| read_f64_le(&base.join(f), Some(region.len())))
        .collect::<Result<Vec<_>>>()?;
    MeasurementBundle::new(&spectrum, s, basis, gram, solutions)
}

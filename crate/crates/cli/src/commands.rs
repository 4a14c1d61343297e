//! One function per subcommand. Each writes its artifacts under the output
//! directory and returns the process outcome.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fracsch::forward::SolverDiagnostics;
use fracsch::fractional::{apply_frac, l2_inner};
use fracsch::inversion::{
    default_probes, gauss_newton_recover, linearized_recover, windowed_probes, InversionReport, LinearizedConfig,
    MeasurementBundle, SupportMode, UnknownSupport,
};
use fracsch::measurement::{discrete_ucp_margin, gram_matrix, integral_identity_terms, BasisKind, SourceBasis};
use fracsch::runge::{density_sweep, RestrictedMap};
use fracsch::spectrum::{LOADED_ORTHONORMALITY_TOL, TORUS_ORTHONORMALITY_TOL};
use fracsch::{assemble, build_torus_spectrum, io, Field, FracParam, Region, Spectrum};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{InvertMode, InvertSpec, Loaded, ManifoldSpec, ProbeFamily, SupportSpec};
use crate::CliError;

pub const IDENTITY_TOL: f64 = 1e-10;

/// Exit status plus a one-line summary for the terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub summary: String,
}

impl Outcome {
    fn ok(summary: impl Into<String>) -> Self {
        Self {
            code: 0,
            summary: summary.into(),
        }
    }
}

/// A loaded config with command-line overrides applied.
#[derive(Debug, Clone)]
pub struct Run {
    pub loaded: Loaded,
    pub out: PathBuf,
    pub seed: u64,
}

impl Run {
    pub fn new(loaded: Loaded, out: Option<PathBuf>, seed: Option<u64>) -> Self {
        let out = out.unwrap_or_else(|| loaded.resolve(&loaded.config.output_dir));
        let seed = seed.unwrap_or(loaded.config.seed);
        Self { loaded, out, seed }
    }

    fn out_dir(&self) -> Result<&Path, CliError> {
        fs::create_dir_all(&self.out).map_err(|e| CliError::Output(format!("{}: {e}", self.out.display())))?;
        Ok(&self.out)
    }

    fn basis(&self, sp: &Arc<Spectrum>, region: &Region) -> Result<SourceBasis, CliError> {
        let spec = self
            .loaded
            .config
            .basis
            .as_ref()
            .ok_or_else(|| CliError::Config("basis: required for this subcommand".into()))?;
        Ok(SourceBasis::build(sp, region, spec.kind, spec.m)?)
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))
}

/// Region samples as CSV: point coordinates then the value.
pub fn region_csv(sp: &Spectrum, region: &Region, values: &[f64]) -> String {
    let dim = sp.grid().dim();
    let mut out: String = (0..dim).map(|i| format!("x{i},")).collect();
    out.push_str("value\n");
    for (&p, v) in region.indices().iter().zip(values) {
        for c in sp.grid().point(p) {
            out.push_str(&format!("{c:e},"));
        }
        out.push_str(&format!("{v:e}\n"));
    }
    out
}

#[derive(Debug, Serialize)]
struct SpectrumSummary {
    name: String,
    num_modes: usize,
    num_points: usize,
    orthonormality_residual: f64,
    region_points: usize,
    ucp_margin: f64,
}

/// Margin-vs-K table over torus truncations on one grid.
pub fn ucp_decay_csv(
    circumferences: &[f64],
    grid_per_axis: usize,
    modes_per_axis: &[usize],
    s_values: &[f64],
    region_of: impl Fn(&Spectrum) -> Result<Region, CliError>,
) -> Result<String, CliError> {
    let mut csv = String::from("modes_per_axis,num_modes,s,region_points,margin\n");
    for &n in modes_per_axis {
        let sp = build_torus_spectrum(circumferences.len(), circumferences, n, grid_per_axis)?;
        let region = region_of(&sp)?;
        for &s in s_values {
            let margin = discrete_ucp_margin(&sp, FracParam::new(s)?, &region);
            csv.push_str(&format!("{n},{},{s},{},{margin:e}\n", sp.num_modes(), region.len()));
        }
    }
    Ok(csv)
}

pub fn cmd_spectrum(run: &Run) -> Result<Outcome, CliError> {
    let l = &run.loaded;
    let sp = l.spectrum()?;
    let region = l.region(&sp)?;
    let out = run.out_dir()?;
    io::save_spectrum(&sp, &out.join("spectrum"), "spectrum")?;
    write_text(&out.join("eigenvalues.csv"), &sp.eigenvalues_csv())?;
    let summary = SpectrumSummary {
        name: sp.name().to_string(),
        num_modes: sp.num_modes(),
        num_points: sp.num_points(),
        orthonormality_residual: sp.orthonormality_residual().2,
        region_points: region.len(),
        ucp_margin: discrete_ucp_margin(&sp, l.s(), &region),
    };
    io::write_json(&out.join("spectrum_summary.json"), &summary)?;
    if let Some(ucp) = l.config.spectrum.as_ref().and_then(|t| t.ucp.as_ref()) {
        let ManifoldSpec::Torus {
            circumferences,
            grid_per_axis,
            ..
        } = &l.config.manifold
        else {
            unreachable!("validated")
        };
        let csv = ucp_decay_csv(
            circumferences,
            *grid_per_axis,
            &ucp.modes_per_axis,
            &ucp.s_values,
            |sp| l.region(sp),
        )?;
        write_text(&out.join("ucp_margin.csv"), &csv)?;
    }
    Ok(Outcome::ok(format!(
        "spectrum {}: {} modes, {} points, UCP margin {:e}",
        summary.name, summary.num_modes, summary.num_points, summary.ucp_margin
    )))
}

#[derive(Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub trials: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Serialize)]
pub struct VerifyReport {
    pub spectrum: String,
    pub s: f64,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub solvers: BTreeMap<String, SolverDiagnostics>,
}

fn check(name: &str, trials: usize, residuals: impl IntoIterator<Item = f64>, tolerance: f64) -> Check {
    let max_residual = residuals
        .into_iter()
        .fold(0.0f64, |a, r| if r.is_nan() { f64::NAN } else { a.max(r) });
    Check {
        name: name.into(),
        trials,
        max_residual,
        tolerance,
        passed: max_residual < tolerance,
    }
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn random_field(sp: &Arc<Spectrum>, rng: &mut ChaCha8Rng) -> Result<Field, CliError> {
    let c = DVector::from_fn(sp.num_modes(), |_, _| rng.gen_range(-1.0..1.0));
    Ok(Field::from_coeffs(sp, c)?)
}

fn random_source(sp: &Arc<Spectrum>, region: &Region, rng: &mut ChaCha8Rng) -> Result<Field, CliError> {
    let vals = (0..sp.num_points())
        .map(|p| {
            if region.contains(p) {
                rng.gen_range(-1.0..1.0)
            } else {
                0.0
            }
        })
        .collect();
    Ok(Field::from_values(sp, vals)?)
}

pub fn cmd_verify(run: &Run) -> Result<Outcome, CliError> {
    let l = &run.loaded;
    let spec = l
        .config
        .verify
        .as_ref()
        .ok_or_else(|| CliError::Config("verify: block required".into()))?;
    let sp = l.spectrum()?;
    let region = l.region(&sp)?;
    let s = l.s();
    let v1 = l.potential(&sp, &spec.potentials[0])?;
    let v2 = l.potential(&sp, &spec.potentials[1])?;
    let op1 = assemble(&sp, &v1, s)?;
    let op2 = assemble(&sp, &v2, s)?;
    let basis = match &l.config.basis {
        Some(_) => run.basis(&sp, &region)?,
        None => SourceBasis::build(&sp, &region, BasisKind::Bump, region.len().min(8))?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let n = spec.trials;
    let orth_tol = match l.config.manifold {
        ManifoldSpec::Torus { .. } => TORUS_ORTHONORMALITY_TOL,
        ManifoldSpec::File { .. } => LOADED_ORTHONORMALITY_TOL,
    };

    let mut checks = vec![check("orthonormality", 1, [sp.orthonormality_residual().2], orth_tol)];

    let mut ibp = Vec::with_capacity(2 * n);
    let mut semigroup = Vec::with_capacity(n);
    let mut energy = Vec::with_capacity(n);
    for _ in 0..n {
        let u = random_field(&sp, &mut rng)?;
        let v = random_field(&sp, &mut rng)?;
        let lhs = l2_inner(&apply_frac(&u, s, 1.0)?, &v)?;
        let mid = l2_inner(&apply_frac(&u, s, 0.5)?, &apply_frac(&v, s, 0.5)?)?;
        let rhs = l2_inner(&u, &apply_frac(&v, s, 1.0)?)?;
        ibp.push(relative(lhs, mid));
        ibp.push(relative(lhs, rhs));
        let twice = apply_frac(&apply_frac(&u, s, 1.0)?, s, 1.0)?;
        let direct = apply_frac(&u, s, 2.0)?;
        let scale = direct.values().amax().max(1.0);
        semigroup.push((twice.values() - direct.values()).amax() / scale);
        for op in [&op1, &op2] {
            energy.push(relative(op.quadratic_form(&u)?, op.energy(&u)?));
        }
    }
    checks.push(check("integration_by_parts", n, ibp, IDENTITY_TOL));
    checks.push(check("semigroup", n, semigroup, IDENTITY_TOL));
    checks.push(check("energy_identity", n, energy, IDENTITY_TOL));

    let sym: Vec<f64> = [&op1, &op2]
        .iter()
        .map(|op| gram_matrix(op, &basis).map(|m| m.symmetry_residual))
        .collect::<Result<_, _>>()?;
    checks.push(check("self_adjointness", 2, sym, IDENTITY_TOL));

    let mut identity = Vec::with_capacity(n);
    for _ in 0..n {
        let f1 = random_source(&sp, &region, &mut rng)?;
        let f2 = random_source(&sp, &region, &mut rng)?;
        let t = integral_identity_terms(&op1, &op2, &f1, &f2, &region)?;
        let scale = t.map_difference.abs().max(t.potential_pairing.abs());
        identity.push(if scale > 0.0 { t.residual() / scale } else { 0.0 });
    }
    checks.push(check("integral_identity", n, identity, IDENTITY_TOL));

    let passed = checks.iter().all(|c| c.passed);
    let report = VerifyReport {
        spectrum: sp.name().to_string(),
        s: s.value(),
        seed: run.seed,
        passed,
        solvers: BTreeMap::from([
            (spec.potentials[0].clone(), op1.diagnostics()),
            (spec.potentials[1].clone(), op2.diagnostics()),
        ]),
        checks,
    };
    io::write_json(&run.out_dir()?.join("verify_report.json"), &report)?;
    let failed: Vec<&str> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    Ok(if passed {
        Outcome::ok(format!("verify: all {} checks passed", report.checks.len()))
    } else {
        Outcome {
            code: 1,
            summary: format!("verify: failed {}", failed.join(", ")),
        }
    })
}

#[derive(Debug, Serialize)]
struct MeasureSummary {
    num_sources: usize,
    requested: usize,
    basis_min_singular_value: f64,
    gram_min_eigenvalue: f64,
    gram_max_eigenvalue: f64,
    numerical_rank: usize,
    symmetry_residual: f64,
    solver: SolverDiagnostics,
}

pub fn cmd_measure(run: &Run) -> Result<Outcome, CliError> {
    let l = &run.loaded;
    let spec = l
        .config
        .measure
        .as_ref()
        .ok_or_else(|| CliError::Config("measure: block required".into()))?;
    let sp = l.spectrum()?;
    let region = l.region(&sp)?;
    let basis = run.basis(&sp, &region)?;
    let s = l.s();
    let out = run.out_dir()?.to_path_buf();
    let mut summary = BTreeMap::new();
    for name in &spec.potentials {
        let v = l.potential(&sp, name)?;
        let op = assemble(&sp, &v, s)?;
        let map = gram_matrix(&op, &basis)?;
        let eig = map.matrix.clone().symmetric_eigenvalues();
        summary.insert(
            name.clone(),
            MeasureSummary {
                num_sources: basis.len(),
                requested: basis.requested(),
                basis_min_singular_value: basis.min_singular_value(),
                gram_min_eigenvalue: eig.min(),
                gram_max_eigenvalue: eig.max(),
                numerical_rank: map.numerical_rank(1e-12),
                symmetry_residual: map.symmetry_residual,
                solver: op.diagnostics(),
            },
        );
        let bundle = MeasurementBundle::from_map(&sp, s, basis.clone(), map)?;
        io::save_bundle(&bundle, &out.join("bundles").join(name))?;
    }
    io::write_json(&out.join("measure_summary.json"), &summary)?;
    Ok(Outcome::ok(format!(
        "measure: wrote {} bundle(s) with {} sources on {} region points",
        spec.potentials.len(),
        basis.len(),
        region.len()
    )))
}

#[derive(Debug, Serialize)]
struct RungeSummary {
    norm: String,
    alphas: Vec<f64>,
    final_relative_errors: Vec<f64>,
    monotonicity_violations: Vec<String>,
}

pub fn cmd_runge(run: &Run) -> Result<Outcome, CliError> {
    let l = &run.loaded;
    let spec = l
        .config
        .runge
        .as_ref()
        .ok_or_else(|| CliError::Config("runge: block required".into()))?;
    let sp = l.spectrum()?;
    let region = l.region(&sp)?;
    let basis = run.basis(&sp, &region)?;
    let v = l.potential(&sp, &spec.potential)?;
    let op = assemble(&sp, &v, l.s())?;
    let map = RestrictedMap::from_operator(&op, &basis)?;
    let targets = spec
        .targets
        .iter()
        .map(|t| {
            let f = l.profile(&sp, t)?;
            Ok(DVector::from_vec(region.restrict(f.as_slice())))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let alphas = l.alphas(spec)?;
    let table = density_sweep(&map, &targets, &alphas, spec.norm)?;
    let out = run.out_dir()?;
    write_text(&out.join("runge_sweep.csv"), &table.to_csv())?;
    let violations = table.monotonicity_violations();
    let summary = RungeSummary {
        norm: spec.norm.to_string(),
        final_relative_errors: (0..targets.len())
            .map(|t| table.target_rows(t).last().map_or(f64::NAN, |r| r.relative_error))
            .collect(),
        alphas,
        monotonicity_violations: violations.clone(),
    };
    io::write_json(&out.join("runge_summary.json"), &summary)?;
    Ok(if violations.is_empty() {
        Outcome::ok(format!(
            "runge: {} targets x {} alphas, error column nonincreasing",
            targets.len(),
            summary.alphas.len()
        ))
    } else {
        Outcome {
            code: 1,
            summary: format!("runge: {} monotonicity violation(s)", violations.len()),
        }
    })
}

#[derive(Debug, Serialize)]
struct GaussNewtonOutput<'a> {
    result: InversionReport,
    config: &'a InvertSpec,
}

#[derive(Debug, Serialize)]
struct GaussNewtonError {
    /// `||V_rec - V_true|| / ||V_true||` over the unknowns.
    relative_error: f64,
    /// `||V_rec - V_true|| / ||V_true - V_init||` over the unknowns.
    perturbation_relative_error: f64,
}

#[derive(Debug, Serialize)]
struct LinearizedOutput<'a> {
    delta_v_norm: f64,
    relative_error: Option<f64>,
    probe_rank: usize,
    constant_error: f64,
    probe_errors: Vec<f64>,
    moments: Vec<f64>,
    hypothesis: String,
    config: &'a InvertSpec,
}

fn load_bundle(l: &Loaded, path: &Path) -> Result<MeasurementBundle, CliError> {
    let path = l.resolve(path);
    if !path.exists() {
        return Err(CliError::Config(format!(
            "invert.bundles: {} does not exist",
            path.display()
        )));
    }
    Ok(io::load_bundle(&path)?)
}

fn weighted_norm(w: &[f64], idx: &[usize], f: impl Fn(usize) -> f64) -> f64 {
    idx.iter().map(|&p| w[p] * f(p).powi(2)).sum::<f64>().sqrt()
}

pub fn cmd_invert(run: &Run) -> Result<Outcome, CliError> {
    let l = &run.loaded;
    let spec = l
        .config
        .invert
        .as_ref()
        .ok_or_else(|| CliError::Config("invert: block required".into()))?;
    match spec.mode {
        InvertMode::GaussNewton => invert_gauss_newton(run, spec),
        InvertMode::Linearized => invert_linearized(run, spec),
    }
}

fn invert_gauss_newton(run: &Run, spec: &InvertSpec) -> Result<Outcome, CliError> {
    let l = &run.loaded;
    let bundle = load_bundle(l, &spec.bundles[0])?;
    let sp = bundle.spectrum().clone();
    let v_init = l.potential(&sp, spec.initial_potential.as_deref().expect("validated"))?;
    let region = bundle.region();
    let mode = match spec.support {
        SupportSpec::Inside => SupportMode::InsideO,
        SupportSpec::Outside => SupportMode::OutsideO,
    };
    let unknown = match (&spec.unknown_indices, mode) {
        (Some(idx), _) => UnknownSupport::subset(region, mode, idx)?,
        (None, SupportMode::InsideO) => UnknownSupport::inside(region),
        (None, SupportMode::OutsideO) => UnknownSupport::outside(region),
    };
    // the inverter sees only the bundle, the initial guess and the support
    let mut result = gauss_newton_recover(&bundle, &v_init, &unknown, &spec.gauss_newton)?;

    let out = run.out_dir()?;
    if let Some(name) = &spec.ground_truth {
        let truth = l.potential(&sp, name)?;
        result.evaluate_against(&truth);
        let w = sp.weights();
        let idx = unknown.indices();
        let t = truth.as_slice();
        let err = weighted_norm(w, idx, |p| result.v_recovered.as_slice()[p] - t[p]);
        let pert = weighted_norm(w, idx, |p| t[p] - v_init.as_slice()[p]);
        let sidecar = GaussNewtonError {
            relative_error: result.relative_error.expect("evaluated"),
            perturbation_relative_error: if pert > 0.0 { err / pert } else { err },
        };
        io::write_json(&out.join("inversion_error.json"), &sidecar)?;
    }
    io::write_json(
        &out.join("inversion_result.json"),
        &GaussNewtonOutput {
            result: result.report(),
            config: spec,
        },
    )?;
    io::write_field_csv(result.v_recovered.field(), &out.join("v_recovered.csv"))?;
    let last = result.misfit_history.last().copied().unwrap_or(f64::NAN);
    if result.stagnated {
        return Ok(Outcome {
            code: 3,
            summary: format!(
                "invert: Gauss-Newton stagnated after {} iterations (misfit {last:e})",
                result.iterations
            ),
        });
    }
    Ok(Outcome::ok(format!(
        "invert: Gauss-Newton {} after {} iterations, misfit {last:e}, min singular value {:e}",
        if result.converged { "converged" } else { "stopped" },
        result.iterations,
        result.jacobian_min_singular_value
    )))
}

fn invert_linearized(run: &Run, spec: &InvertSpec) -> Result<Outcome, CliError> {
    let l = &run.loaded;
    let b1 = load_bundle(l, &spec.bundles[0])?;
    let b2 = load_bundle(l, &spec.bundles[1])?;
    let sp = b1.spectrum().clone();
    let region = b1.region();
    let probes = match spec.probe_family {
        ProbeFamily::Restricted => default_probes(&sp, region, spec.probes),
        ProbeFamily::Windowed => windowed_probes(&sp, region, spec.probes),
    };
    let cfg = LinearizedConfig {
        alpha: spec.alpha,
        beta: spec.beta,
        norm: spec.norm,
    };
    let rec = linearized_recover(&b1, &b2, &probes, &cfg)?;
    let norm = region.inner(&sp, &rec.delta_v, &rec.delta_v).sqrt();
    let relative_error = match &spec.ground_truth {
        Some(name) => {
            let truth = region.restrict(l.named_profile(&sp, name)?.as_slice());
            let diff: Vec<f64> = rec.delta_v.iter().zip(&truth).map(|(a, b)| a - b).collect();
            let tn = region.inner(&sp, &truth, &truth).sqrt();
            let en = region.inner(&sp, &diff, &diff).sqrt();
            Some(if tn > 0.0 { en / tn } else { en })
        }
        None => None,
    };
    let out = run.out_dir()?;
    write_text(&out.join("delta_v.csv"), &region_csv(&sp, region, &rec.delta_v))?;
    io::write_json(
        &out.join("linearized_result.json"),
        &LinearizedOutput {
            delta_v_norm: norm,
            relative_error,
            probe_rank: rec.probe_rank,
            constant_error: rec.constant_error,
            probe_errors: rec.probe_errors,
            moments: rec.moments,
            hypothesis: rec.hypothesis,
            config: spec,
        },
    )?;
    Ok(Outcome::ok(format!(
        "invert: linearized recovery with {} probes, |dV|_L2(O) = {norm:e}",
        probes.len()
    )))
}

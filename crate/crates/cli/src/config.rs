//! Strict JSON experiment configuration.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fracsch::inversion::GaussNewtonConfig;
use fracsch::measurement::{bump_profile, BasisKind};
use fracsch::runge::{default_ladder, geometric_ladder, MisfitNorm};
use fracsch::{build_torus_spectrum, io, Field, FracParam, Potential, Region, Spectrum};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub manifold: ManifoldSpec,
    pub s: f64,
    pub region: RegionSpec,
    #[serde(default)]
    pub potentials: BTreeMap<String, ProfileSpec>,
    #[serde(default)]
    pub basis: Option<BasisSpec>,
    #[serde(default)]
    pub verify: Option<VerifySpec>,
    #[serde(default)]
    pub measure: Option<MeasureSpec>,
    #[serde(default)]
    pub runge: Option<RungeSpec>,
    #[serde(default)]
    pub invert: Option<InvertSpec>,
    #[serde(default)]
    pub spectrum: Option<SpectrumTask>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ManifoldSpec {
    /// Flat torus; `circumferences` has one entry per axis (1 or 2).
    Torus {
        circumferences: Vec<f64>,
        modes_per_axis: usize,
        grid_per_axis: usize,
    },
    /// Spectrum manifest written by `fracsch spectrum` or an external tool.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionSpec {
    /// Open box `lower < x < upper`, componentwise.
    Box {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    /// Geodesic ball (periodic distance on tori).
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Indices {
        indices: Vec<usize>,
    },
    /// Raw `f64` mask file, 1.0 inside and 0.0 outside.
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrigTerm {
    /// Integer frequency per axis; the argument is `2 pi k . x / c`.
    pub frequency: Vec<i64>,
    #[serde(default)]
    pub cos: f64,
    #[serde(default)]
    pub sin: f64,
}

/// Named analytic profile or a field file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProfileSpec {
    Constant {
        value: f64,
    },
    /// `base + amplitude * exp(1 - 1/(1 - (d/radius)^2))` inside the ball.
    Bump {
        #[serde(default)]
        base: f64,
        amplitude: f64,
        center: Vec<f64>,
        radius: f64,
    },
    Trig {
        #[serde(default)]
        constant: f64,
        terms: Vec<TrigTerm>,
    },
    /// `.csv` (coordinates, value) or raw `f64` samples.
    File {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub m: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySpec {
    /// Exactly two potential names.
    pub potentials: Vec<String>,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

fn default_trials() -> usize {
    20
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpec {
    pub potentials: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LadderSpec {
    List { alphas: Vec<f64> },
    Geometric { start: f64, stop: f64, factor: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RungeSpec {
    pub potential: String,
    #[serde(default)]
    pub ladder: Option<LadderSpec>,
    pub targets: Vec<ProfileSpec>,
    #[serde(default)]
    pub norm: MisfitNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvertMode {
    Linearized,
    GaussNewton,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupportSpec {
    #[default]
    Inside,
    Outside,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeFamily {
    #[default]
    Restricted,
    Windowed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InvertSpec {
    pub mode: InvertMode,
    #[serde(default)]
    pub support: SupportSpec,
    /// Bundle manifests: one for gauss-newton, two (V1 then V2) for linearized.
    pub bundles: Vec<PathBuf>,
    /// Potential name; required for gauss-newton.
    #[serde(default)]
    pub initial_potential: Option<String>,
    /// Profile name used only for the error sidecar. For linearized mode it
    /// is the true difference `V1 - V2`.
    #[serde(default)]
    pub ground_truth: Option<String>,
    /// Grid indices of the unknowns, a subset of the chosen support.
    #[serde(default)]
    pub unknown_indices: Option<Vec<usize>>,
    #[serde(default)]
    pub gauss_newton: GaussNewtonConfig,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default)]
    pub probe_family: ProbeFamily,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub norm: MisfitNorm,
}

fn default_probes() -> usize {
    20
}

fn default_alpha() -> f64 {
    1e-10
}

fn default_beta() -> f64 {
    fracsch::inversion::DEFAULT_MOMENT_BETA
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumTask {
    #[serde(default)]
    pub ucp: Option<UcpSpec>,
}

/// Margin-vs-K sweep over torus truncations sharing the configured grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UcpSpec {
    pub modes_per_axis: Vec<usize>,
    pub s_values: Vec<f64>,
}

/// A parsed config plus the directory relative paths resolve against.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ExperimentConfig,
    pub base: PathBuf,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl Loaded {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
        let config = parse(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn s(&self) -> FracParam {
        FracParam::new(self.config.s).expect("validated")
    }

    pub fn spectrum(&self) -> Result<Arc<Spectrum>, CliError> {
        let sp = match &self.config.manifold {
            ManifoldSpec::Torus {
                circumferences,
                modes_per_axis,
                grid_per_axis,
            } => build_torus_spectrum(circumferences.len(), circumferences, *modes_per_axis, *grid_per_axis)?,
            ManifoldSpec::File { path } => io::load_spectrum(&self.resolve(path))?,
        };
        Ok(Arc::new(sp))
    }

    pub fn region(&self, sp: &Spectrum) -> Result<Region, CliError> {
        let dim = sp.grid().dim();
        let region = match &self.config.region {
            RegionSpec::Box { lower, upper } => {
                if lower.len() != dim || upper.len() != dim {
                    return Err(bad(format!("region.box: bounds need {dim} components")));
                }
                Region::from_predicate(sp, "box", |x| {
                    x.iter().zip(lower.iter().zip(upper)).all(|(x, (l, u))| l < x && x < u)
                })?
            }
            RegionSpec::Ball { center, radius } => {
                if center.len() != dim {
                    return Err(bad(format!("region.ball.center: needs {dim} components")));
                }
                Region::from_predicate(sp, "ball", |x| sp.grid().distance(x, center) < *radius)?
            }
            RegionSpec::Indices { indices } => Region::from_indices(sp, "indices", indices)?,
            RegionSpec::File { path } => {
                let vals = io::read_f64_le(&self.resolve(path), Some(sp.num_points()))?;
                if vals.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(bad("region.file: mask values must be 0 or 1"));
                }
                Region::from_mask("file", vals.iter().map(|&v| v == 1.0).collect())?
            }
        };
        Ok(region)
    }

    fn profile_spec(&self, name: &str) -> Result<&ProfileSpec, CliError> {
        self.config
            .potentials
            .get(name)
            .ok_or_else(|| bad(format!("unknown potential name {name:?}")))
    }

    /// Evaluate a profile on the spectrum's grid (no sign constraint).
    pub fn profile(&self, sp: &Arc<Spectrum>, spec: &ProfileSpec) -> Result<Field, CliError> {
        let dim = sp.grid().dim();
        let field = match spec {
            ProfileSpec::Constant { value } => Field::constant(sp, *value),
            ProfileSpec::Bump {
                base,
                amplitude,
                center,
                radius,
            } => {
                if center.len() != dim {
                    return Err(bad(format!("bump center needs {dim} components")));
                }
                Field::from_fn(sp, |x| {
                    base + amplitude * bump_profile(sp.grid().distance(x, center) / radius)
                })
            }
            ProfileSpec::Trig { constant, terms } => {
                let periods = sp
                    .grid()
                    .periods()
                    .ok_or_else(|| bad("trig profiles need a torus grid with known periods"))?
                    .to_vec();
                if terms.iter().any(|t| t.frequency.len() != dim) {
                    return Err(bad(format!("trig frequency needs {dim} components")));
                }
                Field::from_fn(sp, |x| {
                    constant
                        + terms
                            .iter()
                            .map(|t| {
                                let arg: f64 = t
                                    .frequency
                                    .iter()
                                    .zip(x.iter().zip(&periods))
                                    .map(|(&k, (x, c))| 2.0 * PI * k as f64 * x / c)
                                    .sum();
                                t.cos * arg.cos() + t.sin * arg.sin()
                            })
                            .sum::<f64>()
                })
            }
            ProfileSpec::File { path } => io::read_field(sp, &self.resolve(path))?,
        };
        Ok(field)
    }

    pub fn named_profile(&self, sp: &Arc<Spectrum>, name: &str) -> Result<Field, CliError> {
        self.profile(sp, self.profile_spec(name)?)
    }

    pub fn potential(&self, sp: &Arc<Spectrum>, name: &str) -> Result<Potential, CliError> {
        Ok(Potential::new(self.named_profile(sp, name)?)?)
    }

    pub fn alphas(&self, spec: &RungeSpec) -> Result<Vec<f64>, CliError> {
        match &spec.ladder {
            None => Ok(default_ladder()),
            Some(LadderSpec::List { alphas }) => {
                if alphas.is_empty() || alphas.iter().any(|a| !(*a > 0.0 && a.is_finite())) {
                    return Err(bad("runge.ladder.list: alphas must be positive and nonempty"));
                }
                Ok(alphas.clone())
            }
            Some(LadderSpec::Geometric { start, stop, factor }) => Ok(geometric_ladder(*start, *stop, *factor)?),
        }
    }
}

/// Parse and validate, reporting the JSON path of the first bad field.
pub fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let config: ExperimentConfig =
        serde_path_to_error::deserialize(de).map_err(|e| bad(format!("{}: {}", e.path(), e.inner())))?;
    validate(&config)?;
    Ok(config)
}

fn validate(c: &ExperimentConfig) -> Result<(), CliError> {
    if !(c.s > 0.0 && c.s <= 1.0) {
        return Err(bad(format!("s: {} is outside (0, 1]", c.s)));
    }
    if let ManifoldSpec::Torus {
        circumferences,
        modes_per_axis,
        grid_per_axis,
    } = &c.manifold
    {
        if !(1..=2).contains(&circumferences.len()) {
            return Err(bad("manifold.torus.circumferences: 1 or 2 entries"));
        }
        if circumferences.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(bad("manifold.torus.circumferences: must be positive"));
        }
        if *grid_per_axis < 2 * modes_per_axis + 1 {
            return Err(bad(
                "manifold.torus.grid_per_axis: must be at least 2 * modes_per_axis + 1",
            ));
        }
    }
    match &c.region {
        RegionSpec::Ball { radius, .. } if !(*radius > 0.0) => {
            return Err(bad("region.ball.radius: must be positive"));
        }
        RegionSpec::Indices { indices } if indices.is_empty() => {
            return Err(bad("region.indices.indices: must be nonempty"));
        }
        _ => {}
    }
    for (name, p) in &c.potentials {
        if let ProfileSpec::Bump { radius, .. } = p {
            if !(*radius > 0.0) {
                return Err(bad(format!("potentials.{name}.bump.radius: must be positive")));
            }
        }
    }
    let known = |n: &String, field: &str| -> Result<(), CliError> {
        if c.potentials.contains_key(n) {
            Ok(())
        } else {
            Err(bad(format!("{field}: unknown potential name {n:?}")))
        }
    };
    if let Some(b) = &c.basis {
        if b.m == 0 {
            return Err(bad("basis.m: must be positive"));
        }
    }
    if let Some(v) = &c.verify {
        if v.potentials.len() != 2 {
            return Err(bad("verify.potentials: exactly two names required"));
        }
        if v.trials == 0 {
            return Err(bad("verify.trials: must be positive"));
        }
        for n in &v.potentials {
            known(n, "verify.potentials")?;
        }
    }
    if let Some(m) = &c.measure {
        if m.potentials.is_empty() {
            return Err(bad("measure.potentials: must be nonempty"));
        }
        for n in &m.potentials {
            known(n, "measure.potentials")?;
        }
    }
    if let Some(r) = &c.runge {
        known(&r.potential, "runge.potential")?;
        if r.targets.is_empty() {
            return Err(bad("runge.targets: must be nonempty"));
        }
    }
    if let Some(inv) = &c.invert {
        let expected = match inv.mode {
            InvertMode::Linearized => 2,
            InvertMode::GaussNewton => 1,
        };
        if inv.bundles.len() != expected {
            return Err(bad(format!(
                "invert.bundles: {expected} bundle(s) required for this mode"
            )));
        }
        match inv.mode {
            InvertMode::Linearized => {
                if inv.support != SupportSpec::Inside {
                    return Err(bad("invert.support: linearized recovery works inside the region only"));
                }
                if inv.probes == 0 {
                    return Err(bad("invert.probes: must be positive"));
                }
            }
            InvertMode::GaussNewton => match &inv.initial_potential {
                Some(n) => known(n, "invert.initial_potential")?,
                None => return Err(bad("invert.initial_potential: required for gauss-newton")),
            },
        }
        if !(inv.alpha > 0.0) {
            return Err(bad("invert.alpha: must be positive"));
        }
        if !(inv.beta >= 0.0) {
            return Err(bad("invert.beta: must be nonnegative"));
        }
        if let Some(n) = &inv.ground_truth {
            known(n, "invert.ground_truth")?;
        }
    }
    if let Some(SpectrumTask { ucp: Some(u) }) = &c.spectrum {
        if !matches!(c.manifold, ManifoldSpec::Torus { .. }) {
            return Err(bad("spectrum.ucp: needs a torus manifold"));
        }
        if u.modes_per_axis.is_empty() || u.s_values.is_empty() {
            return Err(bad("spectrum.ucp: modes_per_axis and s_values must be nonempty"));
        }
        if u.s_values.iter().any(|s| !(*s > 0.0 && *s <= 1.0)) {
            return Err(bad("spectrum.ucp.s_values: each must lie in (0, 1]"));
        }
    }
    Ok(())
}

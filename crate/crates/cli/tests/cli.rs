use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn base() -> Value {
    json!({
        "manifold": {"torus": {"circumferences": [TAU], "modes_per_axis": 8, "grid_per_axis": 24}},
        "s": 0.5,
        "region": {"box": {"lower": [0.0], "upper": [PI]}},
        "potentials": {
            "one": {"constant": {"value": 1.0}},
            "bumped": {"bump": {"base": 1.0, "amplitude": 0.4, "center": [FRAC_PI_2], "radius": 1.0}}
        },
        "basis": {"kind": "bump", "m": 8},
        "verify": {"potentials": ["one", "bumped"], "trials": 10},
        "measure": {"potentials": ["one", "bumped"]},
        "runge": {"potential": "one", "targets": [{"constant": {"value": 1.0}}]},
        "output_dir": "out"
    })
}

fn run(dir: &Path, sub: &str, config: &Value) -> Output {
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(config).unwrap()).unwrap();
    Command::new(env!("CARGO_BIN_EXE_fracsch"))
        .args([sub, "--config", "config.json"])
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn verify_default_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "verify", &base());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = read_json(&dir.path().join("out/verify_report.json"));
    assert_eq!(report["passed"], true);
    for c in report["checks"].as_array().unwrap() {
        assert!(c["max_residual"].as_f64().unwrap() < 1e-10, "{c}");
    }
}

#[test]
fn negative_potential_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base();
    c["potentials"]["bumped"] = json!({"trig": {"constant": 0.5, "terms": [{"frequency": [1], "cos": 1.0}]}});
    let o = run(dir.path(), "verify", &c);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Potential nonnegativity"), "{}", stderr(&o));
}

#[test]
fn corrupted_spectrum_file_names_the_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "spectrum", &base());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let modes = dir.path().join("out/spectrum/spectrum_modes.bin");
    let mut bytes = fs::read(&modes).unwrap();
    // scale one sample of mode 3 by 1.01
    let idx = (3 * 24 + 5) * 8;
    let v = f64::from_le_bytes(bytes[idx..idx + 8].try_into().unwrap()) * 1.01;
    bytes[idx..idx + 8].copy_from_slice(&v.to_le_bytes());
    fs::write(&modes, bytes).unwrap();
    let mut c = base();
    c["manifold"] = json!({"file": {"path": "out/spectrum/spectrum.json"}});
    let o = run(dir.path(), "verify", &c);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("orthonormality"), "{}", stderr(&o));
}

#[test]
fn loaded_spectrum_drives_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), "spectrum", &base()).status.code(), Some(0));
    let mut c = base();
    c["manifold"] = json!({"file": {"path": "out/spectrum/spectrum.json"}});
    c["output_dir"] = json!("loaded");
    let o = run(dir.path(), "verify", &c);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn strict_parsing() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base();
    c["basis"]["colour"] = json!("red");
    let o = run(dir.path(), "measure", &c);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("basis"), "{}", stderr(&o));
    let mut c = base();
    c["s"] = json!(1.5);
    assert_eq!(run(dir.path(), "measure", &c).status.code(), Some(2));
}

#[test]
fn runge_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), "runge", &base());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("out/runge_sweep.csv")).unwrap();
    let errors: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(errors.len(), 10);
    assert!(errors.windows(2).all(|w| w[1] <= w[0]));

    let mut c = base();
    c["runge"]["targets"] = json!([]);
    assert_eq!(run(dir.path(), "runge", &c).status.code(), Some(2));

    fs::write(dir.path().join("short.bin"), [0u8; 8 * 10]).unwrap();
    let mut c = base();
    c["runge"]["targets"] = json!([{"file": {"path": "short.bin"}}]);
    assert_eq!(run(dir.path(), "runge", &c).status.code(), Some(2));
}

#[test]
fn measure_matches_diagonal_predictions_for_constant_potential() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = base();
    c["basis"] = json!({"kind": "windowed-mode", "m": 6});
    c["measure"] = json!({"potentials": ["one"]});
    c["output_dir"] = json!("nested/new/dir");
    let o = run(dir.path(), "measure", &c);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bundle = fracsch::io::load_bundle(&dir.path().join("nested/new/dir/bundles/one/bundle.json")).unwrap();
    // V = 1 makes the operator diagonal: G_ij = sum_k c_ik c_jk / (lambda_k^s + 1)
    let sp = bundle.spectrum();
    let coeffs: Vec<_> = bundle.basis().elements().iter().map(|f| f.coeffs()).collect();
    for i in 0..coeffs.len() {
        for j in 0..coeffs.len() {
            let predicted: f64 = sp
                .eigenvalues()
                .iter()
                .enumerate()
                .map(|(k, l)| coeffs[i][k] * coeffs[j][k] / (l.sqrt() + 1.0))
                .sum();
            assert!((bundle.gram()[(i, j)] - predicted).abs() < 1e-12);
        }
    }
}

#[test]
fn invert_modes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), "measure", &base()).status.code(), Some(0));

    // twin bundles with the same potential give a vanishing difference
    let mut c = base();
    c["invert"] = json!({
        "mode": "linearized",
        "bundles": ["out/bundles/one/bundle.json", "out/bundles/one/bundle.json"],
        "probes": 6
    });
    let o = run(dir.path(), "invert", &c);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let res = read_json(&dir.path().join("out/linearized_result.json"));
    assert!(res["delta_v_norm"].as_f64().unwrap() < 1e-6);

    let mut c = base();
    c["invert"] = json!({
        "mode": "gauss-newton",
        "bundles": ["out/bundles/bumped/bundle.json"],
        "initial_potential": "one",
        "ground_truth": "bumped"
    });
    let o = run(dir.path(), "invert", &c);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let res = read_json(&dir.path().join("out/inversion_result.json"));
    let history: Vec<f64> = res["result"]["misfit_history"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(history.windows(2).all(|w| w[1] <= w[0]));
    assert!(res["result"]["relative_error"].as_f64().unwrap() < 0.05);
    assert!(dir.path().join("out/v_recovered.csv").exists());

    c["invert"]["bundles"] = json!(["out/bundles/missing/bundle.json"]);
    assert_eq!(run(dir.path(), "invert", &c).status.code(), Some(2));
}

#[test]
fn stagnation_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), "measure", &base()).status.code(), Some(0));
    let mut c = base();
    // with no backtracking room and a step that overshoots, the line search gives up
    c["invert"] = json!({
        "mode": "gauss-newton",
        "bundles": ["out/bundles/bumped/bundle.json"],
        "initial_potential": "one",
        "gauss_newton": {"max_backtracks": 0, "armijo": 0.9999}
    });
    let o = run(dir.path(), "invert", &c);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(dir.path().join("out/inversion_result.json").exists());
}

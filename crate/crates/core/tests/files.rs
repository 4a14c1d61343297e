use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use fracsch::io::*;
use fracsch::*;

fn saved(dir: &Path) -> (Spectrum, std::path::PathBuf) {
    let sp = build_torus_spectrum(2, &[2.0 * PI, 1.5], 2, 7).unwrap();
    let path = save_spectrum(&sp, dir, "torus").unwrap();
    (sp, path)
}

#[test]
fn spectrum_roundtrip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (sp, path) = saved(dir.path());
    let back = load_spectrum(&path).unwrap();
    assert_eq!(back.eigenvalues(), sp.eigenvalues());
    assert_eq!(back.modes(), sp.modes());
    assert_eq!(back.weights(), sp.weights());
    assert_eq!(back.grid().coords(), sp.grid().coords());
    assert_eq!(back.grid().periods(), sp.grid().periods());
    assert_eq!(back.name(), sp.name());
    assert_eq!(back.eigenvalues_csv(), sp.eigenvalues_csv());
    // saving the loaded copy reproduces the same bytes
    let dir2 = tempfile::tempdir().unwrap();
    save_spectrum(&back, dir2.path(), "torus").unwrap();
    for f in ["torus.json", "torus_modes.bin", "torus_eigenvalues.bin"] {
        assert_eq!(
            fs::read(dir.path().join(f)).unwrap(),
            fs::read(dir2.path().join(f)).unwrap()
        );
    }
}

#[test]
fn shuffled_eigenvalues_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (sp, path) = saved(dir.path());
    let mut ev = sp.eigenvalues().to_vec();
    ev.swap(3, 9);
    write_f64_le(&dir.path().join("torus_eigenvalues.bin"), &ev).unwrap();
    let err = load_spectrum(&path).unwrap_err().to_string();
    assert!(err.contains("eigenvalues not ascending"), "{err}");
}

#[test]
fn perturbed_mode_is_rejected_naming_the_pair() {
    let dir = tempfile::tempdir().unwrap();
    let (sp, path) = saved(dir.path());
    let (k, p) = (sp.num_modes(), sp.num_points());
    let mut modes = read_f64_le(&dir.path().join("torus_modes.bin"), Some(k * p)).unwrap();
    for x in &mut modes[4 * p..5 * p] {
        *x *= 1.0 + 1e-3;
    }
    write_f64_le(&dir.path().join("torus_modes.bin"), &modes).unwrap();
    match load_spectrum(&path).unwrap_err() {
        Error::Orthonormality { j, k, residual } => {
            assert_eq!((j, k), (4, 4));
            assert!(residual > 1e-6);
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn malformed_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, path) = saved(dir.path());
    let text = fs::read_to_string(&path).unwrap();
    fs::write(&path, text.replacen('{', "{\n  \"colour\": 1,", 1)).unwrap();
    assert!(matches!(load_spectrum(&path), Err(Error::Malformed { .. })));
    fs::write(&path, text).unwrap();
    fs::write(dir.path().join("torus_weights.bin"), [0u8; 16]).unwrap();
    assert!(matches!(load_spectrum(&path), Err(Error::Malformed { .. })));
    assert!(matches!(
        load_spectrum(&dir.path().join("missing.json")),
        Err(Error::Io { .. })
    ));
}

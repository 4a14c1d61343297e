use std::f64::consts::PI;
use std::sync::{Arc, OnceLock};

use fracsch::fractional::{analyze, apply_frac, l2_inner, l2_norm, synthesize};
use fracsch::*;
use nalgebra::DVector;
use proptest::collection::vec;
use proptest::prelude::*;

fn circle() -> Arc<Spectrum> {
    static SP: OnceLock<Arc<Spectrum>> = OnceLock::new();
    SP.get_or_init(|| Arc::new(build_torus_spectrum(1, &[2.0 * PI], 6, 16).unwrap()))
        .clone()
}

fn square() -> Arc<Spectrum> {
    static SP: OnceLock<Arc<Spectrum>> = OnceLock::new();
    SP.get_or_init(|| Arc::new(build_torus_spectrum(2, &[2.0 * PI, 3.0], 2, 6).unwrap()))
        .clone()
}

fn field(sp: &Arc<Spectrum>, c: &[f64]) -> Field {
    Field::from_coeffs(sp, DVector::from_column_slice(&c[..sp.num_modes()])).unwrap()
}

fn coeffs() -> impl Strategy<Value = Vec<f64>> {
    vec(-1.0f64..1.0, 25)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn integration_by_parts(a in coeffs(), b in coeffs(), s in 0.05f64..=1.0, two_d in any::<bool>()) {
        let sp = if two_d { square() } else { circle() };
        let s = FracParam::new(s).unwrap();
        let (u, v) = (field(&sp, &a), field(&sp, &b));
        let lhs = l2_inner(&apply_frac(&u, s, 1.0).unwrap(), &v).unwrap();
        let mid = l2_inner(&apply_frac(&u, s, 0.5).unwrap(), &apply_frac(&v, s, 0.5).unwrap()).unwrap();
        let rhs = l2_inner(&u, &apply_frac(&v, s, 1.0).unwrap()).unwrap();
        prop_assert!(close(lhs, mid, 1e-12));
        prop_assert!(close(lhs, rhs, 1e-12));
    }

    #[test]
    fn semigroup(a in coeffs(), s in 0.05f64..=1.0, t in 0.05f64..=1.0) {
        let sp = circle();
        let u = field(&sp, &a);
        let fs = FracParam::new(s).unwrap();
        let composed = apply_frac(&apply_frac(&u, fs, 1.0).unwrap(), fs, t / s).unwrap();
        let direct = apply_frac(&u, FracParam::new(1.0).unwrap(), (s + t) / 1.0).unwrap();
        prop_assert!((composed.values() - direct.values()).amax() < 1e-10);
    }

    #[test]
    fn annihilates_constants(c in -5.0f64..5.0, s in 0.05f64..=1.0, two_d in any::<bool>()) {
        let sp = if two_d { square() } else { circle() };
        let u = Field::constant(&sp, c);
        let out = apply_frac(&u, FracParam::new(s).unwrap(), 1.0).unwrap();
        prop_assert!(out.values().amax() < 1e-12);
    }

    #[test]
    fn analysis_synthesis_roundtrip(a in coeffs(), two_d in any::<bool>()) {
        let sp = if two_d { square() } else { circle() };
        let c = DVector::from_column_slice(&a[..sp.num_modes()]);
        let back = analyze(&sp, &synthesize(&sp, &c).unwrap()).unwrap();
        prop_assert!((back - &c).amax() < 1e-12);
    }

    #[test]
    fn parseval(a in coeffs()) {
        let sp = circle();
        let u = field(&sp, &a);
        prop_assert!(close(l2_norm(&u), u.coeffs().norm(), 1e-12));
    }

    #[test]
    fn energy_identity(a in coeffs(), vals in vec(0.0f64..3.0, 36), s in 0.05f64..=1.0, two_d in any::<bool>()) {
        let sp = if two_d { square() } else { circle() };
        let v = Potential::from_values(&sp, vals[..sp.num_points()].to_vec()).unwrap();
        let op = assemble(&sp, &v, FracParam::new(s).unwrap()).unwrap();
        let u = field(&sp, &a);
        let q = op.quadratic_form(&u).unwrap();
        let e = op.energy(&u).unwrap();
        let lu = op.apply(&u).unwrap();
        prop_assert!(close(q, e, 1e-11));
        prop_assert!(close(q, l2_inner(&lu, &u).unwrap(), 1e-11));
        prop_assert!(q >= -1e-12);
    }

    #[test]
    fn rayleigh_quotient_monotone_in_potential(a in coeffs(), vals in vec(0.0f64..2.0, 16), bump in vec(0.0f64..1.0, 16)) {
        let sp = circle();
        let s = FracParam::new(0.5).unwrap();
        let v1 = Potential::from_values(&sp, vals.clone()).unwrap();
        let v2 = Potential::from_values(&sp, vals.iter().zip(&bump).map(|(a, b)| a + b).collect()).unwrap();
        let u = field(&sp, &a);
        let q1 = assemble(&sp, &v1, s).unwrap().quadratic_form(&u).unwrap();
        let q2 = assemble(&sp, &v2, s).unwrap().quadratic_form(&u).unwrap();
        prop_assert!(q2 >= q1 - 1e-12);
    }

    #[test]
    fn solve_is_bilinear(a in coeffs(), b in coeffs(), x in -2.0f64..2.0, y in -2.0f64..2.0, vals in vec(0.1f64..2.0, 16)) {
        let sp = circle();
        let v = Potential::from_values(&sp, vals).unwrap();
        let op = assemble(&sp, &v, FracParam::new(0.7).unwrap()).unwrap();
        let (f, g) = (field(&sp, &a), field(&sp, &b));
        let combo = f.scaled(x).axpy(y, &g).unwrap();
        let lhs = op.solve(&combo).unwrap();
        let rhs = op.solve(&f).unwrap().scaled(x).axpy(y, &op.solve(&g).unwrap()).unwrap();
        prop_assert!((lhs.values() - rhs.values()).amax() < 1e-10 * (1.0 + rhs.values().amax()));
    }

    #[test]
    fn solve_inverts_apply(a in coeffs(), vals in vec(0.1f64..2.0, 36), s in 0.05f64..=1.0, two_d in any::<bool>()) {
        let sp = if two_d { square() } else { circle() };
        let v = Potential::from_values(&sp, vals[..sp.num_points()].to_vec()).unwrap();
        let op = assemble(&sp, &v, FracParam::new(s).unwrap()).unwrap();
        let u = field(&sp, &a);
        let back = op.solve(&op.apply(&u).unwrap()).unwrap();
        prop_assert!((back.coeffs() - u.coeffs()).amax() < 1e-9);
    }
}

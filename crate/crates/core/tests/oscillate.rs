use std::f64::consts::PI;

use homog::fiber::{adjoint, symmetrize, ScalarFiberField};
use homog::homogenize::tensor_preset;
use homog::nets::{build_net_for_scale, NetAlignment};
use homog::oscillate::*;
use homog::partition::{PartitionConfig, PartitionOfUnity};
use homog::{HomogError, ManifoldModel, Mat, Point, Vector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BETA: f64 = 0.6;

fn partition(model: &ManifoldModel, eps: f64, alignment: NetAlignment) -> PartitionOfUnity {
    let net = build_net_for_scale(model, eps, BETA, 5, alignment).unwrap();
    PartitionOfUnity::new(model, net, eps, PartitionConfig::default()).unwrap()
}

fn random_points(count: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| Point::new(&[rng.gen(), rng.gen()])).collect()
}

fn warped() -> ManifoldModel {
    ManifoldModel::preset("warped-sin").unwrap()
}

#[test]
fn constant_one_is_reproduced() {
    let model = warped();
    let pou = partition(&model, 0.02, NetAlignment::Free);
    let one = OscillatingField::new(scalar_preset("one", 2).unwrap(), &pou).unwrap();
    let mut buf = Vec::new();
    for q in random_points(300, 1) {
        assert!((one.value(&q, &mut buf).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn base_function_is_approximated_at_net_scale() {
    let model = ManifoldModel::flat(2);
    let eps: f64 = 0.01;
    let pou = partition(&model, eps, NetAlignment::Free);
    let h = OscillatingField::new(scalar_preset("h", 2).unwrap(), &pou).unwrap();
    // h = 1 + sin(2 pi x_1) / 2 has Lipschitz constant pi
    let lip = PI;
    let mut buf = Vec::new();
    let mut worst = 0.0f64;
    for q in random_points(2000, 2) {
        let exact = 1.0 + 0.5 * (2.0 * PI * q.coords()[0]).sin();
        worst = worst.max((h.value(&q, &mut buf).unwrap() - exact).abs());
    }
    assert!(worst <= lip * eps.powf(BETA), "{worst} vs {}", lip * eps.powf(BETA));
}

#[test]
fn lattice_nets_reproduce_the_classical_oscillation() {
    let model = ManifoldModel::flat(2);
    let eps = 0.02;
    let pou = partition(&model, eps, NetAlignment::Lattice);
    let mut buf = Vec::new();
    for name in ["sin", "two-plus-cos"] {
        let f = scalar_preset(name, 2).unwrap();
        let osc = OscillatingField::new(f.clone(), &pou).unwrap();
        for q in random_points(300, 3) {
            let classical = f.eval(q.coords(), &(*q.coords() * (1.0 / eps)));
            assert!((osc.value(&q, &mut buf).unwrap() - classical).abs() < 1e-12, "{name}");
            // exact commutation of eps d and d_v
            let (a, b) = osc.scaled_differential(&q, &mut buf).unwrap();
            assert!((a - b).max_abs() < 1e-9, "{name}");
        }
    }
    // with a base-dependent factor the identity holds where psi_j = 1
    let f = scalar_preset("h-sin", 2).unwrap();
    let osc = OscillatingField::new(f.clone(), &pou).unwrap();
    let mut inner = 0;
    for q in random_points(300, 4) {
        let vals = pou.values(&q).unwrap();
        if vals.len() == 1 {
            inner += 1;
            let p = pou.net().point(vals[0].0);
            let classical = f.eval(p.coords(), &(*q.coords() * (1.0 / eps)));
            assert!((osc.value(&q, &mut buf).unwrap() - classical).abs() < 1e-12);
        }
    }
    assert!(inner > 10);
}

#[test]
fn tensor_modes_agree_on_flat_models() {
    let model = ManifoldModel::flat(2);
    let pou = partition(&model, 0.02, NetAlignment::Free);
    let a = tensor_preset("anisotropic", 2).unwrap();
    let coords = OscillatingTensor::new(a.clone(), &pou, TensorMode::Coords, false).unwrap();
    let pull = OscillatingTensor::new(a, &pou, TensorMode::Pullback, false).unwrap();
    let c = tensor_preset("constant", 2).unwrap();
    let a0 = c.eval(&Vector::zeros(2), &Vector::zeros(2));
    let constant = OscillatingTensor::new(c, &pou, TensorMode::Pullback, false).unwrap();
    let mut buf = Vec::new();
    for q in random_points(200, 5) {
        assert_eq!(coords.chart_endomorphism(&q, &mut buf).unwrap(), pull.chart_endomorphism(&q, &mut buf).unwrap());
        assert!((constant.chart_endomorphism(&q, &mut buf).unwrap() - a0).max_abs() < 1e-14);
    }
}

#[test]
fn symmetrized_tensor_is_self_adjoint_on_warped_model() {
    let model = warped();
    let pou = partition(&model, 0.02, NetAlignment::Free);
    let a = tensor_preset("anisotropic", 2).unwrap();
    let sym = OscillatingTensor::new(a, &pou, TensorMode::Pullback, true).unwrap();
    let mut buf = Vec::new();
    for q in random_points(100, 6) {
        let s = sym.chart_endomorphism(&q, &mut buf).unwrap();
        let g = model.metric(&q);
        assert!((adjoint(&s, &g) - s).max_abs() <= 1e-14 * s.max_abs());
    }
}

#[test]
fn scale_order_is_enforced() {
    let model = ManifoldModel::flat(2);
    // delta = 0.2^0.8 = 0.276 < 2 eps
    let pou = partition(&model, 0.2, NetAlignment::Free);
    let r = OscillatingField::new(scalar_preset("sin", 2).unwrap(), &pou);
    assert!(matches!(r.err(), Some(HomogError::ScaleOrderViolated { .. })));
    assert!(check_scale_order(&partition(&model, 0.02, NetAlignment::Free)).is_ok());
}

#[test]
fn base_quadrature_measures_the_volume() {
    let model = warped();
    let vol = integrate_base(&model, 256, |_, _| Ok(1.0)).unwrap();
    // sqrt det G depends on x_1 only
    let m = 1 << 16;
    let oracle = (0..m)
        .map(|i| {
            let x = Vector::from_slice(&[(i as f64 + 0.5) / m as f64, 0.0]);
            model.metric_at(&x).det().sqrt()
        })
        .sum::<f64>()
        / m as f64;
    assert!((vol - oracle).abs() < 1e-10, "{vol} vs {oracle}");
    assert!(sup_base(&model, 64, |q, _| Ok(q.coords()[0])).unwrap() < 1.0);
}

#[test]
fn trivial_ladder_identities() {
    let model = ManifoldModel::preset("skew-frame").unwrap();
    let ladder = Ladder::build(&model, &[0.02, 0.01], BETA, PartitionConfig::default(), 7, NetAlignment::Free).unwrap();
    let vol = integrate_base(&model, 256, |_, _| Ok(1.0)).unwrap();
    let sin = scalar_preset("sin", 2).unwrap();
    let one = scalar_preset("one", 2).unwrap();

    let r = algebra_check(&ladder, &sin, &one, "sin*1").unwrap();
    assert!(r.error.iter().all(|&e| e < 1e-12) && r.passed);

    let c = ScalarFiberField::constant(2, 1.5);
    let r = admissibility_check(&ladder, &c, "const", 1e-12).unwrap();
    for (m, t) in r.measured.iter().zip(&r.target) {
        assert!((m / t - 1.0).abs() < 1e-12);
        assert!((t - 2.25 * vol).abs() < 1e-9);
    }

    let phi = base_function("const").unwrap();
    let comp = compensated_pairing(&ladder, &sin, &one, &phi, None, "sin*1", 1.0).unwrap();
    let rl = riemann_lebesgue_check(&ladder, &sin, "sin", 1.0).unwrap();
    for (a, b) in comp.measured.iter().zip(&rl.measured) {
        assert!((a - b).abs() < 1e-12);
    }

    let u = base_function("const").unwrap();
    let lift = byparts_field("lift").unwrap();
    let r = by_parts_residual(&ladder, &u, &lift, "const/lift", 4.0).unwrap();
    assert!(r.measured.iter().all(|&m| m == 0.0));
}

#[test]
fn lattice_fiber_averages() {
    let model = ManifoldModel::flat(2);
    let ladder = Ladder::build(&model, &[0.02, 0.01], BETA, PartitionConfig::default(), 1, NetAlignment::Lattice).unwrap();
    let r = riemann_lebesgue_check(&ladder, &scalar_preset("two-plus-cos", 2).unwrap(), "two-plus-cos", 1e-10).unwrap();
    assert!((r.target[0] - 2.0).abs() < 1e-12);
    assert!(r.passed, "{r:?}");
    let r = admissibility_check(&ladder, &scalar_preset("sin", 2).unwrap(), "sin", 1e-10).unwrap();
    assert!((r.target[0] - 0.5).abs() < 1e-12);
    assert!(r.passed, "{r:?}");
    let r = tensor_mode_gap(&ladder, &tensor_preset("laminate", 2).unwrap(), "laminate").unwrap();
    assert!(r.passed && r.measured.iter().all(|&m| m == 0.0));
}

#[test]
fn floor_aware_monotonicity() {
    assert!(strictly_decreasing(&[3.0, 2.0, 1.0]));
    assert!(!strictly_decreasing(&[3.0, 3.0, 1.0]));
    assert!(decreasing_above_floor(&[1e-3, 1e-14, 2e-14], 1e-13));
    assert!(!decreasing_above_floor(&[1e-3, 1e-4, 2e-4], 1e-13));
}

fn spd(a: f64, b: f64, c: f64) -> Mat {
    let l = Mat::from_rows(&[&[1.0 + a.abs(), 0.0], &[b, 0.5 + c.abs()]]);
    l * l.transpose()
}

proptest! {
    #[test]
    fn symmetrization_is_idempotent(m in proptest::array::uniform4(-2.0..2.0f64), g in proptest::array::uniform3(-1.0..1.0f64)) {
        let a = Mat::from_rows(&[&[m[0], m[1]], &[m[2], m[3]]]);
        let g = spd(g[0], g[1], g[2]);
        let s = symmetrize(&a, &g);
        let scale = 1.0 + a.max_abs();
        prop_assert!((symmetrize(&s, &g) - s).max_abs() < 1e-13 * scale);
        prop_assert!((adjoint(&s, &g) - s).max_abs() < 1e-13 * scale);
        prop_assert!((adjoint(&adjoint(&a, &g), &g) - a).max_abs() < 1e-13 * scale);
        // G-self-adjoint means G A is symmetric
        let ga = g * s;
        prop_assert!((ga - ga.transpose()).max_abs() < 1e-13 * scale * g.max_abs());
    }
}

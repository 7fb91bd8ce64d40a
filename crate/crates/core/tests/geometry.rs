use homog::geometry::chart_difference;
use homog::linalg::loglog_slope;
use homog::{ManifoldModel, Point, Vector};
use proptest::prelude::*;

fn warped() -> ManifoldModel {
    ManifoldModel::preset("warped-sin(0.5)").unwrap()
}

#[test]
fn warped_distances_with_exact_lower_bounds() {
    let m = warped();
    // g >= dx_1^2, and the x_1-axis is a geodesic of that length
    let d = m.distance(&Point::new(&[0.0, 0.0]), &Point::new(&[0.3, 0.0])).unwrap();
    assert!((d - 0.3).abs() < 1e-10, "{d}");
    // g_22 is minimal on x_1 = 3/4, so the vertical segment there is minimizing
    let d = m.distance(&Point::new(&[0.75, 0.0]), &Point::new(&[0.75, 0.2])).unwrap();
    assert!((d - 0.2 * 0.5f64.sqrt()).abs() < 1e-10, "{d}");
}

#[test]
fn frames_are_nondegenerate() {
    for name in ["flat", "skew-frame", "warped-sin", "warped-ortho"] {
        let m = ManifoldModel::preset(name).unwrap();
        let mut min_det = f64::INFINITY;
        for i in 0..64 * 64 {
            let x = Vector::from_slice(&[(i % 64) as f64 / 64.0, (i / 64) as f64 / 64.0]);
            min_det = min_det.min(m.frame_at(&x).det().abs());
        }
        assert!(min_det > 0.1, "{name}: {min_det}");
    }
}

#[test]
fn orthonormal_frame_has_identity_frame_metric() {
    let m = ManifoldModel::preset("warped-ortho").unwrap();
    for x in [[0.1, 0.2], [0.6, 0.9], [0.25, 0.0]] {
        let p = Point::new(&x);
        assert!((m.frame_metric(&p) - homog::Mat::identity(2)).max_abs() < 1e-12);
    }
}

#[test]
fn exp_differential_matches_finite_differences() {
    let m = warped();
    let p = Point::new(&[0.2, 0.35]);
    let v = Vector::from_slice(&[0.07, -0.05]);
    let d = m.exp_differential(&p, &v).unwrap();
    let h = 1e-5;
    for j in 0..2 {
        let mut vp = v;
        let mut vm = v;
        vp.c[j] += h;
        vm.c[j] -= h;
        let qp = m.exp_map(&p, &vp).unwrap();
        let qm = m.exp_map(&p, &vm).unwrap();
        let col = chart_difference(&qm, &qp) * (0.5 / h);
        assert!((col - d.column(j)).max_abs() < 1e-7);
    }
}

#[test]
fn down_frame_deviation_is_first_order() {
    let m = warped();
    let p = Point::new(&[0.1, 0.4]);
    let dir = Vector::from_slice(&[0.6, 0.8]);
    let ds = [0.02, 0.04, 0.08];
    let errs: Vec<f64> = ds
        .iter()
        .map(|&d| {
            let q = m.exp_map(&p, &(dir * d)).unwrap();
            (m.down_frame(&p, &q).unwrap() - m.frame(&q)).frobenius()
        })
        .collect();
    let slope = loglog_slope(&ds, &errs);
    assert!((0.9..=1.1).contains(&slope), "slope {slope}, errors {errs:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn exp_log_round_trip_at_net_scale(
        x in 0.0..1.0f64, y in 0.0..1.0f64, r in 0.001..0.19f64, t in 0.0..std::f64::consts::TAU,
    ) {
        let m = warped();
        let p = Point::new(&[x, y]);
        let q = m.exp_map(&p, &Vector::from_slice(&[r * t.cos(), r * t.sin()])).unwrap();
        let v = m.log_map(&p, &q).unwrap();
        let back = m.exp_map(&p, &v).unwrap();
        prop_assert!(chart_difference(&q, &back).max_abs() < 1e-8);
    }

    #[test]
    fn geodesic_speed_is_conserved(x in 0.0..1.0f64, y in 0.0..1.0f64, a in -0.3..0.3f64, b in -0.3..0.3f64) {
        prop_assume!(a.abs() + b.abs() > 1e-3);
        let m = warped();
        let path = m.geodesic_path(&Point::new(&[x, y]), &Vector::from_slice(&[a, b]), 128).unwrap();
        let speed = |i: usize| m.metric_at(&path[i].0).form(&path[i].1, &path[i].1).sqrt();
        let s0 = speed(0);
        for i in 0..path.len() {
            prop_assert!(((speed(i) - s0) / s0).abs() < 1e-8);
        }
    }

    #[test]
    fn flat_exp_is_translation(x in 0.0..1.0f64, y in 0.0..1.0f64, a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let m = ManifoldModel::flat(2);
        let q = m.exp_map(&Point::new(&[x, y]), &Vector::from_slice(&[a, b]));
        if let Ok(q) = q {
            let want = Point::new(&[(x + a).rem_euclid(1.0), (y + b).rem_euclid(1.0)]);
            prop_assert!(chart_difference(&want, &q).max_abs() < 1e-12);
        }
    }
}

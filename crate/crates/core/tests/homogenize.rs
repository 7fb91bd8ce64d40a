use std::f64::consts::PI;

use homog::fiber::{FiberGrid, FiberMetric};
use homog::homogenize::*;
use homog::{HomogError, ManifoldModel, Mat, Vector};
use proptest::prelude::*;

fn cfg(modes: usize) -> CellSolverConfig {
    CellSolverConfig { modes, ..Default::default() }
}

fn flat_cell(name: &str, modes: usize) -> CellSolution {
    let a = tensor_preset(name, 2).unwrap();
    solve_cell(&ManifoldModel::flat(2), &a, &Vector::zeros(2), &cfg(modes)).unwrap()
}

fn coef(t: f64) -> f64 {
    2.0 + (2.0 * PI * t).cos()
}

/// Zero-mean solution of `(a (w' + 1))' = 0` by cumulative Simpson quadrature
/// of `w' = c / a - 1`, sampled at `k / samples`.
fn laminate_corrector_1d(samples: usize) -> Vec<f64> {
    let sub = 64;
    let fine = samples * sub;
    let h = 1.0 / fine as f64;
    let c = 1.0 / (0..fine).map(|i| 1.0 / coef((i as f64 + 0.5) * h)).sum::<f64>() * fine as f64;
    let deriv = |t: f64| c / coef(t) - 1.0;
    let mut w = vec![0.0; samples];
    let mut acc = 0.0;
    for i in 0..fine {
        if i % sub == 0 {
            w[i / sub] = acc;
        }
        let t = i as f64 * h;
        acc += h / 6.0 * (deriv(t) + 4.0 * deriv(t + 0.5 * h) + deriv(t + h));
    }
    let mean = w.iter().sum::<f64>() / samples as f64;
    w.iter().map(|x| x - mean).collect()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[test]
fn identity_tensor_has_no_corrector() {
    let cell = flat_cell("identity", 16);
    for (w, s) in cell.correctors.iter().zip(&cell.stats) {
        assert_eq!(max_abs(w), 0.0);
        assert_eq!(s.iterations, 0);
        assert_eq!(s.method, KrylovMethod::None);
    }
    assert_eq!(assemble_astar_frame(&cell).unwrap().endo, Mat::identity(2));
    assert_eq!(max_abs(&build_corrector_u1(&cell, &Vector::from_slice(&[1.0, -2.0]))), 0.0);
}

#[test]
fn constant_tensor_is_its_own_homogenization() {
    let cell = flat_cell("constant", 16);
    let a0 = cell.tensor[0];
    assert!((assemble_astar_frame(&cell).unwrap().endo - a0).max_abs() < 1e-15);
}

#[test]
fn identity_under_constant_metric() {
    let g = Mat::from_rows(&[&[3.0, 0.5], &[0.5, 1.0]]);
    let grid = FiberGrid::new(2, 8);
    let tensor = vec![Mat::identity(2); grid.len()];
    let cell = solve_cell_with(grid, FiberMetric::new(g).unwrap(), Vector::zeros(2), tensor, &cfg(8)).unwrap();
    let star = assemble_astar_general(&cell);
    assert!((star.form - g).max_abs() < 1e-14);
    let x = Vector::from_slice(&[0.3, -1.1]);
    let y = Vector::from_slice(&[2.0, 0.7]);
    assert!((star.bilinear(&x, &y) - g.form(&x, &y)).abs() < 1e-14);
    let dirs = orthonormal_directions(&cell.metric);
    for i in 0..2 {
        for j in 0..2 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((cell.metric.inner(&dirs[i], &dirs[j]) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn laminate_matches_one_dimensional_oracle() {
    let cell = flat_cell("laminate", 32);
    let m = cell.grid.points_per_axis();
    let oracle = laminate_corrector_1d(m);
    assert_eq!(max_abs(&cell.correctors[1]), 0.0);
    for s in 0..cell.grid.len() {
        let v = cell.grid.point(s);
        let i = (v[0] * m as f64).round() as usize % m;
        assert!((cell.correctors[0][s] - oracle[i]).abs() < 1e-8, "at {v:?}");
    }
    let mean = cell.correctors[0].iter().sum::<f64>() / cell.grid.len() as f64;
    assert!(mean.abs() < 1e-14);
    let star = assemble_astar_frame(&cell).unwrap().endo;
    let inv_mean = (0..4096).map(|i| 1.0 / coef((i as f64 + 0.5) / 4096.0)).sum::<f64>() / 4096.0;
    assert!((star.a[0][0] * inv_mean - 1.0).abs() < 1e-8);
    assert!((star.a[1][1] / 2.0 - 1.0).abs() < 1e-8);
    assert!(star.a[0][1].abs() < 1e-12 && star.a[1][0].abs() < 1e-12);
    // Voigt-Reuss bracket
    assert!(1.0 / inv_mean - 1e-12 <= star.a[0][0] && star.a[0][0] <= 2.0 + 1e-12);
}

#[test]
fn laminate_corrector_u1_follows_the_first_derivative() {
    let cell = flat_cell("laminate", 16);
    let grad = Vector::from_slice(&[2.5, -4.0]);
    let u1 = build_corrector_u1(&cell, &grad);
    for (s, u) in u1.iter().enumerate() {
        assert!((u - 2.5 * cell.correctors[0][s]).abs() < 1e-15);
    }
    assert!(corrector_gradient_gap(&cell, &grad) < 1e-10);
}

#[test]
fn swapped_laminate_is_symmetric() {
    let a = flat_cell("laminate", 16);
    let b = flat_cell("laminate2", 16);
    assert_eq!(max_abs(&b.correctors[0]), 0.0);
    let m = a.grid.points_per_axis();
    for s in 0..a.grid.len() {
        let (i, j) = (s % m, s / m);
        let t = i * m + j;
        assert!((a.correctors[0][s] - b.correctors[1][t]).abs() < 1e-12);
    }
    let (sa, sb) = (assemble_astar_frame(&a).unwrap().endo, assemble_astar_frame(&b).unwrap().endo);
    assert!((sa.a[0][0] - sb.a[1][1]).abs() < 1e-12 && (sa.a[1][1] - sb.a[0][0]).abs() < 1e-12);
}

#[test]
fn checkerboard_is_isotropic() {
    let star = assemble_astar_frame(&flat_cell("checkerboard", 32)).unwrap();
    let e = star.endo;
    assert!((e.a[0][0] - e.a[1][1]).abs() < 1e-10);
    assert!(e.a[0][1].abs() < 1e-10 && e.a[1][0].abs() < 1e-10);
    // strictly between the harmonic and arithmetic means of the coefficient
    assert!(e.a[0][0] < 2.0 && e.a[0][0] > 3f64.sqrt());
    let fine = assemble_astar_frame(&flat_cell("checkerboard", 48)).unwrap().endo;
    assert!((fine - e).max_abs() < 1e-6);
}

#[test]
fn refinement_is_stable_on_smooth_presets() {
    for name in ["laminate", "anisotropic"] {
        let a = assemble_astar_general(&flat_cell(name, 32)).endo;
        let b = assemble_astar_general(&flat_cell(name, 48)).endo;
        assert!((a - b).max_abs() < 1e-6, "{name}");
    }
}

#[test]
fn scaled_metric_matches_change_of_variables() {
    // in y = (2 v_1, v_2) the metric is Euclidean and the laminate keeps its
    // harmonic mean, so A* = diag(sqrt 3, 2) in g-orthonormal coordinates
    let g = Mat::from_rows(&[&[4.0, 0.0], &[0.0, 1.0]]);
    let grid = FiberGrid::new(2, 32);
    let tensor: Vec<Mat> = (0..grid.len()).map(|s| Mat::identity(2).scale(coef(grid.point(s)[0]))).collect();
    let cell = solve_cell_with(grid, FiberMetric::new(g).unwrap(), Vector::zeros(2), tensor, &cfg(32)).unwrap();
    let star = assemble_astar_general(&cell);
    let want = Mat::from_rows(&[&[4.0 * 3f64.sqrt(), 0.0], &[0.0, 2.0]]);
    assert!((star.form - want).max_abs() < 1e-10, "{:?}", star.form);
    assert!((star.endo - Mat::from_rows(&[&[3f64.sqrt(), 0.0], &[0.0, 2.0]])).max_abs() < 1e-10);
}

#[test]
fn non_elliptic_tensor_is_rejected() {
    let grid = FiberGrid::new(2, 4);
    let tensor = vec![Mat::identity(2).scale(-1.0); grid.len()];
    let r = solve_cell_with(grid, FiberMetric::identity(2), Vector::zeros(2), tensor, &cfg(4));
    assert!(matches!(r, Err(HomogError::NotElliptic { .. })));
    assert!(tensor_preset("no-such", 2).is_err());
}

/// Symmetric positive field `a(v) = B(v) B(v)^T + I` from a few trigonometric terms.
fn random_tensor(grid: &FiberGrid, c: &[f64; 8]) -> Vec<Mat> {
    (0..grid.len())
        .map(|s| {
            let v = grid.point(s);
            let (x, y) = (2.0 * PI * v[0], 2.0 * PI * v[1]);
            let b = Mat::from_rows(&[
                &[c[0] * x.cos() + c[1] * y.sin(), c[2] * (x + y).cos()],
                &[c[3] * (x - y).sin() + c[4], c[5] * y.cos() + c[6] * x.sin() + c[7]],
            ]);
            b * b.transpose() + Mat::identity(2)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_symmetric_tensors(c in proptest::array::uniform8(-0.8..0.8f64)) {
        let grid = FiberGrid::new(2, 12);
        let tensor = random_tensor(&grid, &c);
        let (lo, hi) = tensor.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), a| {
            let (l, h) = ellipticity_bounds(a, &Mat::identity(2));
            (lo.min(l), hi.max(h))
        });
        let cell = solve_cell_with(grid, FiberMetric::identity(2), Vector::zeros(2), tensor, &cfg(12)).unwrap();
        prop_assert!(cell.weak_residual() < 1e-10);
        for w in &cell.correctors {
            prop_assert!((w.iter().sum::<f64>() / w.len() as f64).abs() < 1e-13);
        }
        let frame = assemble_astar_frame(&cell).unwrap();
        let general = assemble_astar_general(&cell);
        prop_assert!((frame.form - general.form).max_abs() < 1e-10);
        prop_assert!(general.symmetry_defect() < 1e-10);
        prop_assert!((flux_average(&cell) - general.endo).max_abs() < 1e-10);
        let (l, h) = general.eigen_bounds();
        prop_assert!(l >= lo - 1e-10 && h <= hi + 1e-10);
        // the quadratic form is the corrector energy
        for i in 0..2 {
            let energy: Vec<f64> = (0..cell.grid.len())
                .map(|s| {
                    let x = cell.gradients[i][s] + Vector::unit(2, i);
                    cell.tensor[s].mul_vec(&x).dot(&x)
                })
                .collect();
            prop_assert!((cell.grid.average(&energy) - general.form.a[i][i]).abs() < 1e-10);
        }
        let grad = Vector::from_slice(&[c[0] + 1.0, c[1] - 0.5]);
        prop_assert!(corrector_gradient_gap(&cell, &grad) < 1e-10);
    }

    #[test]
    fn skewed_metric_keeps_symmetry(c in proptest::array::uniform8(-0.8..0.8f64), off in -0.4..0.4f64) {
        let g = Mat::from_rows(&[&[1.5, off], &[off, 0.8]]);
        let grid = FiberGrid::new(2, 12);
        // scalar coefficients are self-adjoint in every metric
        let tensor: Vec<Mat> = random_tensor(&grid, &c).iter().map(|a| Mat::identity(2).scale(a.trace())).collect();
        let cell = solve_cell_with(grid, FiberMetric::new(g).unwrap(), Vector::zeros(2), tensor, &cfg(12)).unwrap();
        prop_assert!(cell.weak_residual() < 1e-10);
        let star = assemble_astar_general(&cell);
        prop_assert!(star.symmetry_defect() < 1e-10);
        prop_assert!(star.eigen_bounds().0 > 0.0);
    }
}

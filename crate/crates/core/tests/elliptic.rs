use std::f64::consts::PI;

use homog::elliptic::*;
use homog::{HomogError, ManifoldModel, Mat, Vector};

fn square(model: &ManifoldModel, cells: usize) -> Domain {
    Domain::new(model, DomainPreset::parse("square").unwrap(), cells).unwrap()
}

fn identity(_: &Vector) -> homog::Result<Mat> {
    Ok(Mat::identity(2))
}

fn exact(x: &Vector) -> f64 {
    (PI * x[0]).sin() * (PI * x[1]).sin()
}

fn l2_error(cells: usize) -> f64 {
    let model = ManifoldModel::flat(2);
    let d = square(&model, cells);
    let (u, _) = solve_dirichlet(&model, &d, identity, load_preset("sinsin").unwrap(), &SolverConfig::default()).unwrap();
    integrate(&model, &d, &u.values, |x, v, _| (v - exact(x)).powi(2)).sqrt()
}

#[test]
fn manufactured_solution_converges_at_second_order() {
    let e: Vec<f64> = [16, 32, 64].iter().map(|&c| l2_error(c)).collect();
    for w in e.windows(2) {
        let ratio = w[0] / w[1];
        assert!((3.5..=4.5).contains(&ratio), "errors {e:?}");
    }
}

#[test]
fn zero_load_gives_zero() {
    let model = ManifoldModel::preset("warped-sin").unwrap();
    let d = square(&model, 16);
    let (u, rep) = solve_dirichlet(&model, &d, identity, |_| 0.0, &SolverConfig::default()).unwrap();
    assert!(u.values.iter().all(|&v| v == 0.0));
    assert_eq!(rep.iterations, 0);
}

#[test]
fn maximum_principle() {
    let model = ManifoldModel::flat(2);
    let d = square(&model, 32);
    let cfg = SolverConfig::default();
    // the weak form int <grad u, grad phi> = int f phi: a nonnegative load gives u >= 0
    let (u, _) = solve_dirichlet(&model, &d, identity, |x| 1.0 + x[0], &cfg).unwrap();
    assert!(u.values.iter().cloned().fold(f64::INFINITY, f64::min) >= -1e-12);
    let (u, _) = solve_dirichlet(&model, &d, identity, |x| -(1.0 + x[1]), &cfg).unwrap();
    assert!(u.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max) <= 1e-12);
}

#[test]
fn boundary_values_and_galerkin_orthogonality() {
    let model = ManifoldModel::preset("warped-sin").unwrap();
    for (preset, cells) in [("square(0.1,0.9)", 32), ("punctured", 32)] {
        let d = Domain::new(&model, DomainPreset::parse(preset).unwrap(), cells).unwrap();
        let coef = |x: &Vector| Ok(Mat::identity(2).scale(2.0 + x[0] * x[1]));
        let (st, b) = assemble(&model, &d, coef, load_preset("bump").unwrap()).unwrap();
        let cfg = SolverConfig { tol: 1e-12, ..Default::default() };
        let (u, _) = solve_system(&st, d.cells, &b, &cfg).unwrap();
        for k in d.boundary_nodes() {
            assert_eq!(u.values[k], 0.0, "{preset}");
        }
        assert!(galerkin_residual(&st, &u, &b) < 1e-10, "{preset}");
        assert!(st.symmetry_defect() < 1e-12, "{preset}");
        assert!(st.min_eig > 0.0);
    }
}

#[test]
fn laplace_rows_sum_to_zero_in_the_interior() {
    let model = ManifoldModel::flat(2);
    let d = square(&model, 8);
    let (st, _) = assemble(&model, &d, identity, |_| 0.0).unwrap();
    for k in 0..d.len() {
        if !d.dirichlet[k] {
            let (i, j) = (k % d.nodes, k / d.nodes);
            if i > 1 && j > 1 && i + 2 < d.nodes && j + 2 < d.nodes {
                assert!(st.a[k].iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }
}

/// `int_T G^{-1} sqrt(det G)` over a triangle by centroids of `m^2` congruent subtriangles.
fn triangle_weight(model: &ManifoldModel, a: Vector, b: Vector, c: Vector, area: f64, m: usize) -> Mat {
    let mut acc = Mat::zeros(2);
    let mut add = |s: f64, t: f64| {
        let x = a + (b - a) * s + (c - a) * t;
        let g = model.metric_at(&x);
        acc = acc + g.inverse().unwrap().scale(g.det().sqrt());
    };
    let mf = m as f64;
    for i in 0..m {
        for j in 0..m - i {
            add((i as f64 + 1.0 / 3.0) / mf, (j as f64 + 1.0 / 3.0) / mf);
            if i + j + 1 < m {
                add((i as f64 + 2.0 / 3.0) / mf, (j as f64 + 2.0 / 3.0) / mf);
            }
        }
    }
    acc.scale(area / (mf * mf))
}

#[test]
fn warped_energy_matches_independent_quadrature() {
    let model = ManifoldModel::preset("warped-sin").unwrap();
    let d = square(&model, 32);
    let (st, _) = assemble(&model, &d, identity, |_| 0.0).unwrap();
    let u: Vec<f64> = (0..d.len()).map(|k| if d.dirichlet[k] { 0.0 } else { exact(&d.node(k)) }).collect();
    let h = d.h;
    let mut oracle = 0.0;
    for cj in 0..d.cells {
        for ci in 0..d.cells {
            let nodes = cell_node_indices(&d, ci, cj);
            let corner = |l: usize| d.node(nodes[0]) + Vector::from_slice(&[(l % 2) as f64 * h, (l / 2) as f64 * h]);
            for verts in cell_triangle_vertices(ci, cj) {
                let gr = unit_triangle_gradients(&verts);
                let mut du = Vector::zeros(2);
                for r in 0..3 {
                    du = du + gr[r] * (u[nodes[verts[r]]] / h);
                }
                let w = triangle_weight(&model, corner(verts[0]), corner(verts[1]), corner(verts[2]), 0.5 * h * h, 6);
                oracle += w.form(&du, &du);
            }
        }
    }
    let energy = st.energy(&u);
    assert!((energy / oracle - 1.0).abs() < 1e-6, "{energy} vs {oracle}");
}

#[test]
fn pairing_with_one_is_the_integral() {
    let model = ManifoldModel::preset("warped-sin").unwrap();
    let d = square(&model, 32);
    let (u, _) = solve_dirichlet(&model, &d, identity, load_preset("one").unwrap(), &SolverConfig::default()).unwrap();
    let total = integrate(&model, &d, &u.values, |_, v, _| v);
    assert_eq!(weak_pairing(&model, &d, &u, |_| 1.0), total);
    assert!(total > 0.0);
    let n = norms(&model, &d, &u);
    let l2 = integrate(&model, &d, &u.values, |_, v, _| v * v).sqrt();
    assert_eq!(n.l2, l2);
    // Poincare on the unit square: |u|_L2 <= |grad u| / (pi sqrt 2) up to the metric bounds
    assert!(n.l2 < n.h1_semi);
}

#[test]
fn guards_reject_bad_inputs() {
    let model = ManifoldModel::flat(2);
    assert!(matches!(check_resolution(0.01, 0.05), Err(HomogError::UnderResolved { .. })));
    assert!(check_resolution(0.05 / 8.0, 0.05).is_ok());
    let d = square(&model, 64);
    let tiny = SolverConfig { memory_limit_mb: 1e-6, ..Default::default() };
    assert!(matches!(solve_dirichlet(&model, &d, identity, |_| 1.0, &tiny), Err(HomogError::MemoryGuard { .. })));
    let short = SolverConfig { max_iter: 1, tol: 1e-14, ..Default::default() };
    assert!(matches!(solve_dirichlet(&model, &d, identity, |x| x[0], &short), Err(HomogError::NoConvergence { .. })));
    assert!(DomainPreset::parse("circle").is_err());
    assert!(DomainPreset::parse("square(0.5,0.2)").is_err());
    assert!(load_preset("nope").is_err());
    assert!(Domain::new(&ManifoldModel::flat(3), DomainPreset::parse("square").unwrap(), 8).is_err());
}

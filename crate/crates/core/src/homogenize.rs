//! Periodic cell problems, the homogenized tensor and the first-order corrector.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{HomogError, Result};
use crate::fiber::{FiberGrid, FiberMetric, TensorFiberField};
use crate::geometry::{ManifoldModel, Point};
use crate::linalg::{pairwise_sum, Mat, Vector};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct CellSolverConfig {
    /// Fiber mode cutoff `N`; the fiber grid has `2N` points per axis.
    pub modes: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CellSolverConfig {
    fn default() -> Self {
        Self { modes: 32, tol: 1e-12, max_iter: 2000 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub enum KrylovMethod {
    None,
    Cg,
    BiCgStab,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: usize,
    /// Relative residual `|b - L w| / |b|` of the Galerkin system (0 when `b = 0`).
    pub residual: f64,
    pub method: KrylovMethod,
}

/// Correctors for all directions at one base point.
#[derive(Clone, Debug)]
pub struct CellSolution {
    pub point: Vector,
    pub metric: FiberMetric,
    /// `g`-orthonormal directions `o_i` in frame components.
    pub directions: Vec<Vector>,
    /// Samples of `w_i` on the fiber grid (zero mean).
    pub correctors: Vec<Vec<f64>>,
    /// Samples of `grad_v w_i` in frame components.
    pub gradients: Vec<Vec<Vector>>,
    /// Samples of `A` on the fiber grid.
    pub tensor: Vec<Mat>,
    pub stats: Vec<SolveStats>,
    pub grid: FiberGrid,
}

/// Gram-Schmidt on the frame vectors `e_1, .., e_n` in the inner product `g`.
pub fn orthonormal_directions(metric: &FiberMetric) -> Vec<Vector> {
    let n = metric.g.n;
    let mut out: Vec<Vector> = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = Vector::unit(n, i);
        for o in &out {
            let c = metric.inner(&v, o);
            v = v - *o * c;
        }
        let nv = metric.inner(&v, &v).sqrt();
        out.push(v * (1.0 / nv));
    }
    out
}

/// Smallest and largest eigenvalue of the `g`-symmetric part of `A` relative to `g`.
pub fn ellipticity_bounds(a: &Mat, g: &Mat) -> (f64, f64) {
    let s = (*g * *a).sym_part();
    let e = Mat::generalized_sym_eigenvalues(&s, g);
    (e[0], e[e.len() - 1])
}

fn is_g_selfadjoint(samples: &[Mat], g: &Mat) -> bool {
    samples.iter().all(|a| {
        let ga = *g * *a;
        (ga - ga.transpose()).max_abs() <= 1e-13 * ga.max_abs().max(1.0)
    })
}

struct CellOperator<'a> {
    grid: &'a FiberGrid,
    /// `C = A G^{-1}` per sample: the flux is `C d w`.
    c: Vec<Mat>,
    /// Diagonal spectral preconditioner `1 / (4 pi^2 k^T C_bar k)`; zero on the mean and Nyquist modes.
    precond: Vec<f64>,
}

impl<'a> CellOperator<'a> {
    fn new(grid: &'a FiberGrid, metric: &FiberMetric, a: &[Mat]) -> Self {
        let c: Vec<Mat> = a.iter().map(|m| *m * metric.ginv).collect();
        let cbar = grid.average_tensor(&c).sym_part();
        let precond = (0..grid.len())
            .map(|i| match grid.wavenumber(i) {
                Some(k) if k.max_abs() > 0.0 => 1.0 / (4.0 * PI * PI * cbar.form(&k, &k)),
                _ => 0.0,
            })
            .collect();
        Self { grid, c, precond }
    }

    /// `-div(C d w)`.
    fn apply(&self, w: &[f64]) -> Vec<f64> {
        let d = self.grid.coordinate_gradient(w);
        let flux: Vec<Vector> = d.iter().zip(&self.c).map(|(g, c)| c.mul_vec(g)).collect();
        self.grid.divergence(&flux).into_iter().map(|x| -x).collect()
    }

    fn precondition(&self, r: &[f64]) -> Vec<f64> {
        let spec: Vec<Complex64> =
            self.grid.forward(r).into_iter().zip(&self.precond).map(|(c, &p)| c * p).collect();
        self.grid.inverse_real(&spec)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let p: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    pairwise_sum(&p)
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += a * xi);
}

fn pcg(op: &CellOperator, b: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, SolveStats)> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok((x, SolveStats { iterations: 0, residual: 0.0, method: KrylovMethod::None }));
    }
    let mut r = b.to_vec();
    let mut z = op.precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    for it in 1..=max_iter {
        let ap = op.apply(&p);
        let alpha = rz / dot(&p, &ap);
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &ap);
        let rel = dot(&r, &r).sqrt() / bnorm;
        if rel < tol {
            let true_r: Vec<f64> = b.iter().zip(op.apply(&x)).map(|(bi, ai)| bi - ai).collect();
            let res = dot(&true_r, &true_r).sqrt() / bnorm;
            return Ok((x, SolveStats { iterations: it, residual: res, method: KrylovMethod::Cg }));
        }
        z = op.precondition(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    Err(HomogError::NoConvergence { iterations: max_iter, residual: dot(&r, &r).sqrt() / bnorm })
}

/// Right-preconditioned BiCGStab for coefficients that are not `g`-self-adjoint.
fn bicgstab(op: &CellOperator, b: &[f64], tol: f64, max_iter: usize) -> Result<(Vec<f64>, SolveStats)> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok((x, SolveStats { iterations: 0, residual: 0.0, method: KrylovMethod::None }));
    }
    let mut r = b.to_vec();
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    for it in 1..=max_iter {
        let rho_new = dot(&r0, &r);
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        let ph = op.precondition(&p);
        v = op.apply(&ph);
        alpha = rho / dot(&r0, &v);
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        let sh = op.precondition(&s);
        let t = op.apply(&sh);
        omega = dot(&t, &s) / dot(&t, &t);
        axpy(&mut x, alpha, &ph);
        axpy(&mut x, omega, &sh);
        r = s.iter().zip(&t).map(|(si, ti)| si - omega * ti).collect();
        if dot(&r, &r).sqrt() / bnorm < tol {
            let true_r: Vec<f64> = b.iter().zip(op.apply(&x)).map(|(bi, ai)| bi - ai).collect();
            let res = dot(&true_r, &true_r).sqrt() / bnorm;
            return Ok((x, SolveStats { iterations: it, residual: res, method: KrylovMethod::BiCgStab }));
        }
    }
    Err(HomogError::NoConvergence { iterations: max_iter, residual: dot(&r, &r).sqrt() / bnorm })
}

/// Solve `-div^v(A[grad_v w + o]) = 0` for the zero-mean periodic `w`.
pub fn solve_cell_samples(
    grid: &FiberGrid,
    metric: &FiberMetric,
    a: &[Mat],
    direction: &Vector,
    cfg: &CellSolverConfig,
) -> Result<(Vec<f64>, Vec<Vector>, SolveStats)> {
    for s in a {
        let (lo, _) = ellipticity_bounds(s, &metric.g);
        if lo <= 0.0 {
            return Err(HomogError::NotElliptic { min_eig: lo });
        }
    }
    if a.iter().all(|m| *m == a[0]) {
        // constant coefficients: w = 0 solves the cell problem exactly
        let n = metric.g.n;
        let stats = SolveStats { iterations: 0, residual: 0.0, method: KrylovMethod::None };
        return Ok((vec![0.0; grid.len()], vec![Vector::zeros(n); grid.len()], stats));
    }
    let op = CellOperator::new(grid, metric, a);
    let flux: Vec<Vector> = a.iter().map(|m| m.mul_vec(direction)).collect();
    let b = grid.divergence(&flux);
    let (w, stats) = if is_g_selfadjoint(a, &metric.g) {
        pcg(&op, &b, cfg.tol, cfg.max_iter)?
    } else {
        bicgstab(&op, &b, cfg.tol, cfg.max_iter)?
    };
    let grad = crate::fiber::vertical_gradient(grid, metric, &w);
    Ok((w, grad, stats))
}

/// Correctors in the `g`-orthonormal directions at the chart position `x`.
pub fn solve_cell(
    model: &ManifoldModel,
    a: &TensorFiberField,
    x: &Vector,
    cfg: &CellSolverConfig,
) -> Result<CellSolution> {
    let grid = FiberGrid::new(model.dim(), cfg.modes);
    let metric = FiberMetric::at(model, &Point::from_vector(*x));
    let tensor = a.sample(&grid, x);
    solve_cell_with(grid, metric, *x, tensor, cfg)
}

/// As [`solve_cell`] with explicit fiber metric and tensor samples.
pub fn solve_cell_with(
    grid: FiberGrid,
    metric: FiberMetric,
    point: Vector,
    tensor: Vec<Mat>,
    cfg: &CellSolverConfig,
) -> Result<CellSolution> {
    let directions = orthonormal_directions(&metric);
    let mut correctors = Vec::new();
    let mut gradients = Vec::new();
    let mut stats = Vec::new();
    for o in &directions {
        let (w, g, s) = solve_cell_samples(&grid, &metric, &tensor, o, cfg)?;
        correctors.push(w);
        gradients.push(g);
        stats.push(s);
    }
    Ok(CellSolution { point, metric, directions, correctors, gradients, tensor, stats, grid })
}

impl CellSolution {
    pub fn dim(&self) -> usize {
        self.metric.g.n
    }

    /// `D_v w` at sample `s`: the endomorphism `X -> sum_i <X, o_i>_g grad_v w_i`.
    pub fn corrector_differential(&self, s: usize) -> Mat {
        let n = self.dim();
        let w = Mat::from_columns(&(0..n).map(|i| self.gradients[i][s]).collect::<Vec<_>>());
        let o = Mat::from_columns(&self.directions);
        w * o.transpose() * self.metric.g
    }

    /// `I + D_v w` at every sample.
    pub fn lift_maps(&self) -> Vec<Mat> {
        let n = self.dim();
        (0..self.grid.len()).map(|s| Mat::identity(n) + self.corrector_differential(s)).collect()
    }

    /// Largest weak cell residual `|mean_v <A(grad_v w_i + o_i), grad_v chi>_g|` over
    /// all resolved Fourier modes `chi = cos, sin(2 pi k.v)`, relative to `|grad_v chi|`.
    pub fn weak_residual(&self) -> f64 {
        let n = self.dim();
        let len = self.grid.len();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let flux: Vec<Vector> = (0..len)
                .map(|s| self.tensor[s].mul_vec(&(self.gradients[i][s] + self.directions[i])))
                .collect();
            // mean_v <F, grad chi>_g = mean_v F . d chi; per mode this is the
            // Fourier coefficient of F paired with 2 pi i k.
            let spec: Vec<Vec<Complex64>> =
                (0..n).map(|a| self.grid.forward(&flux.iter().map(|f| f.c[a]).collect::<Vec<_>>())).collect();
            for idx in 0..len {
                let Some(k) = self.grid.wavenumber(idx) else { continue };
                if k.max_abs() == 0.0 {
                    continue;
                }
                let mut z = Complex64::new(0.0, 0.0);
                for a in 0..n {
                    z += spec[a][idx] * k.c[a];
                }
                let chi_norm = 2.0 * PI * self.metric.mode_norm2(&k).sqrt();
                worst = worst.max(2.0 * PI * z.norm() / chi_norm);
            }
        }
        worst
    }
}

/// Homogenized tensor at one base point.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct HomogenizedTensor {
    /// Endomorphism in frame components.
    pub endo: Mat,
    /// Bilinear form `B` with `A*[X, Y] = Y^T B X`.
    pub form: Mat,
    /// Fiber metric used to relate the two.
    pub g: Mat,
}

impl HomogenizedTensor {
    pub fn from_form(form: Mat, g: Mat) -> Self {
        let endo = g.inverse().expect("SPD metric") * form;
        Self { endo, form, g }
    }

    pub fn bilinear(&self, x: &Vector, y: &Vector) -> f64 {
        self.form.form(y, x)
    }

    pub fn symmetry_defect(&self) -> f64 {
        (self.form - self.form.transpose()).max_abs()
    }

    pub fn eigen_bounds(&self) -> (f64, f64) {
        let e = Mat::generalized_sym_eigenvalues(&self.form.sym_part(), &self.g);
        (e[0], e[e.len() - 1])
    }
}

/// `A*[e_i, e_j] = mean_v <A(grad_v w_i + e_i), grad_v w_j + e_j>` for an orthonormal frame.
pub fn assemble_astar_frame(cell: &CellSolution) -> Result<HomogenizedTensor> {
    let n = cell.dim();
    if (cell.metric.g - Mat::identity(n)).max_abs() > 1e-12 {
        return Err(HomogError::InvalidConfig("frame formula requires an orthonormal frame".into()));
    }
    let mut form = Mat::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let vals: Vec<f64> = (0..cell.grid.len())
                .map(|s| {
                    let xi = cell.gradients[i][s] + Vector::unit(n, i);
                    let xj = cell.gradients[j][s] + Vector::unit(n, j);
                    cell.tensor[s].mul_vec(&xi).dot(&xj)
                })
                .collect();
            // entry (j, i) holds A*[e_i, e_j]
            form.a[j][i] = cell.grid.average(&vals);
        }
    }
    Ok(HomogenizedTensor::from_form(form, Mat::identity(n)))
}

/// `A* = mean_v (I + D_v w)^ad A (I + D_v w)` with the adjoint taken in `g`.
pub fn assemble_astar_general(cell: &CellSolution) -> HomogenizedTensor {
    let n = cell.dim();
    let g = cell.metric.g;
    let lifts = cell.lift_maps();
    let mut form = Mat::zeros(n);
    for r in 0..n {
        for c in 0..n {
            let vals: Vec<f64> = lifts
                .iter()
                .zip(&cell.tensor)
                .map(|(l, a)| (l.transpose() * g * *a * *l).a[r][c])
                .collect();
            form.a[r][c] = cell.grid.average(&vals);
        }
    }
    HomogenizedTensor::from_form(form, g)
}

/// `mean_v A (I + D_v w)`, which equals `A*` by the cell equation.
pub fn flux_average(cell: &CellSolution) -> Mat {
    let prods: Vec<Mat> = cell.lift_maps().iter().zip(&cell.tensor).map(|(l, a)| *a * *l).collect();
    cell.grid.average_tensor(&prods)
}

/// Samples of `u_1 = sum_i <grad u, o_i>_g w_i` for `grad u` in frame components.
pub fn build_corrector_u1(cell: &CellSolution, grad_u: &Vector) -> Vec<f64> {
    let coeffs: Vec<f64> = cell.directions.iter().map(|o| cell.metric.inner(grad_u, o)).collect();
    (0..cell.grid.len())
        .map(|s| coeffs.iter().enumerate().map(|(i, c)| c * cell.correctors[i][s]).sum())
        .collect()
}

/// `grad_v u_1` by spectral differentiation and by `D_v w grad u`; returns the largest
/// componentwise gap between the two.
pub fn corrector_gradient_gap(cell: &CellSolution, grad_u: &Vector) -> f64 {
    let u1 = build_corrector_u1(cell, grad_u);
    let direct = crate::fiber::vertical_gradient(&cell.grid, &cell.metric, &u1);
    direct
        .iter()
        .enumerate()
        .map(|(s, d)| (*d - cell.corrector_differential(s).mul_vec(grad_u)).max_abs())
        .fold(0.0, f64::max)
}

/// Tensor presets in frame components; scalar multiples of the identity are
/// self-adjoint in every fiber metric.
pub fn tensor_preset(name: &str, dim: usize) -> Result<TensorFiberField> {
    let id = Mat::identity(dim);
    let scalar = |f: Arc<dyn Fn(&Vector, &Vector) -> f64 + Send + Sync>| -> TensorFiberField {
        TensorFiberField::new(dim, Arc::new(move |x, v| id.scale(f(x, v))))
    };
    let t = match name {
        "identity" => TensorFiberField::constant(id),
        "constant" => {
            let mut a = Mat::identity(dim).scale(1.5);
            a.a[0][0] = 2.0;
            a.a[0][1] = 0.3;
            a.a[1][0] = 0.3;
            TensorFiberField::constant(a)
        }
        "laminate" => scalar(Arc::new(|_, v| 2.0 + (2.0 * PI * v[0]).cos())).with_flags(false, true),
        "laminate2" => scalar(Arc::new(|_, v| 2.0 + (2.0 * PI * v[1]).cos())).with_flags(false, true),
        "checkerboard" => scalar(Arc::new(|_, v| 2.0 + (2.0 * PI * v[0]).cos() * (2.0 * PI * v[1]).cos()))
            .with_flags(false, true),
        "laminate-p" => scalar(Arc::new(|x, v| 2.0 + (0.5 + 0.4 * (2.0 * PI * x[0]).sin()) * (2.0 * PI * v[0]).cos())),
        "anisotropic" => TensorFiberField::new(
            dim,
            Arc::new(move |_, v| {
                // rotated diag(2 + cos, 1) with angle 0.4 sin(2 pi v_2); symmetric in frame components
                let th = 0.4 * (2.0 * PI * v[1 % dim]).sin();
                let (c, s) = (th.cos(), th.sin());
                let l1 = 2.0 + (2.0 * PI * v[0]).cos();
                let mut a = Mat::identity(dim);
                a.a[0][0] = l1 * c * c + s * s;
                a.a[1][1] = l1 * s * s + c * c;
                a.a[0][1] = (l1 - 1.0) * c * s;
                a.a[1][0] = a.a[0][1];
                a
            }),
        )
        .with_flags(false, true),
        _ => return Err(HomogError::InvalidConfig(format!("unknown tensor preset '{name}'"))),
    };
    if dim < 2 {
        return Err(HomogError::InvalidConfig("tensor presets need dimension >= 2".into()));
    }
    Ok(t)
}

/// Residual of the coupled two-scale weak form at the decoupled solution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TwoScaleReport {
    /// `A*` endomorphism in frame components.
    pub astar: Mat,
    /// Largest relative residual over base tests `(phi, 0)`.
    pub base_residual: f64,
    /// Largest relative residual over fiber tests `(0, phi(p) chi(v))`.
    pub fiber_residual: f64,
    pub max_residual: f64,
    pub tests: usize,
    pub fem: crate::elliptic::SolverReport,
    /// Largest gap between the two evaluations of `grad_v u_1`.
    pub corrector_identity_gap: f64,
    pub cell_weak_residual: f64,
}

/// Solve the homogenized problem, lift `u` to `(u, u_1)` and evaluate
/// `B[(u, u_1), (phi, phi_1)] - int f phi` on base hats `phi` and on products
/// of base hats with fiber modes `cos, sin(2 pi k.v)`, `0 < |k|_inf <= fiber_test_modes`.
///
/// The tensor must not depend on the base point and the frame metric must be
/// constant, so that one cell solve serves the whole domain.
pub fn two_scale_residual<F>(
    model: &ManifoldModel,
    domain: &crate::elliptic::Domain,
    a: &TensorFiberField,
    f: F,
    cell_cfg: &CellSolverConfig,
    solver_cfg: &crate::elliptic::SolverConfig,
    fiber_test_modes: i64,
) -> Result<TwoScaleReport>
where
    F: Fn(&Vector) -> f64 + Sync,
{
    use crate::elliptic::{
        assemble, cell_node_indices, cell_triangle_vertices, frame_to_chart, solve_system, unit_triangle_gradients,
    };
    if !a.is_base_constant() || !model.is_flat() {
        return Err(HomogError::InvalidConfig(
            "two-scale residual needs a base-independent tensor on a model with constant metric".into(),
        ));
    }
    let x0 = Vector::zeros(2);
    let cell = solve_cell(model, a, &x0, cell_cfg)?;
    let star = assemble_astar_general(&cell);
    let (st, load) = assemble(model, domain, |x| Ok(frame_to_chart(model, x, &star.endo)), &f)?;
    let (u, fem) = solve_system(&st, domain.cells, &load, solver_cfg)?;

    let g = model.metric_at(&x0);
    let e = model.frame_at(&x0);
    let to_frame = e.inverse().expect("frame invertible") * g.inverse().expect("SPD");
    let gf = cell.metric.g;
    let sqrt_g = g.det().sqrt();
    let grid = &cell.grid;
    let n_nodes = domain.len();
    let h = domain.h;
    let area = 0.5 * h * h;
    let abar = grid.average_tensor(&cell.tensor);

    // fiber test modes in a half space: the real and imaginary parts give cos and sin
    let mut modes: Vec<Vector> = Vec::new();
    for k1 in -fiber_test_modes..=fiber_test_modes {
        for k2 in -fiber_test_modes..=fiber_test_modes {
            if k1 > 0 || (k1 == 0 && k2 > 0) {
                modes.push(Vector::from_slice(&[k1 as f64, k2 as f64]));
            }
        }
    }
    let mode_idx: Vec<usize> = modes.iter().map(|k| grid.index_of(&[-(k[0] as i64), -(k[1] as i64)])).collect();
    // mean_v <A grad chi, grad chi>_g for chi = cos and sin of each mode
    let chi_energy: Vec<[f64; 2]> = modes
        .iter()
        .map(|k| {
            let mut acc = [Vec::new(), Vec::new()];
            for s in 0..grid.len() {
                let ph = 2.0 * PI * k.dot(&grid.point(s));
                let c = cell.tensor[s] * cell.metric.ginv;
                let q = 4.0 * PI * PI * c.form(k, k);
                acc[0].push(q * ph.sin().powi(2));
                acc[1].push(q * ph.cos().powi(2));
            }
            [grid.average(&acc[0]), grid.average(&acc[1])]
        })
        .collect();

    let mut base_b = vec![0.0; n_nodes];
    let mut base_norm2 = vec![0.0; n_nodes];
    let mut fiber_b = vec![vec![Complex64::new(0.0, 0.0); modes.len()]; n_nodes];
    let mut hat_mass = vec![0.0; n_nodes];
    let mut energy = Vec::new();
    let mut identity_gap: f64 = 0.0;

    for cj in 0..domain.cells {
        for ci in 0..domain.cells {
            let nodes = cell_node_indices(domain, ci, cj);
            for verts in cell_triangle_vertices(ci, cj) {
                let grads = unit_triangle_gradients(&verts);
                let mut du = Vector::zeros(2);
                for r in 0..3 {
                    du = du + grads[r] * (u.values[nodes[verts[r]]] / h);
                }
                let gu = to_frame.mul_vec(&du);
                let u1 = build_corrector_u1(&cell, &gu);
                let gu1 = crate::fiber::vertical_gradient(grid, &cell.metric, &u1);
                if ci == cj {
                    identity_gap = identity_gap.max(corrector_gradient_gap(&cell, &gu));
                }
                let flux: Vec<Vector> = (0..grid.len()).map(|s| cell.tensor[s].mul_vec(&(gu + gu1[s]))).collect();
                let en: Vec<f64> = (0..grid.len()).map(|s| gf.form(&(gu + gu1[s]), &flux[s])).collect();
                energy.push(area * sqrt_g * grid.average(&en));
                let fbar = Vector::from_slice(&[
                    grid.average(&flux.iter().map(|v| v[0]).collect::<Vec<_>>()),
                    grid.average(&flux.iter().map(|v| v[1]).collect::<Vec<_>>()),
                ]);
                let spec = [
                    grid.forward(&flux.iter().map(|v| v[0]).collect::<Vec<_>>()),
                    grid.forward(&flux.iter().map(|v| v[1]).collect::<Vec<_>>()),
                ];
                for r in 0..3 {
                    let node = nodes[verts[r]];
                    let gphi = to_frame.mul_vec(&(grads[r] * (1.0 / h)));
                    base_b[node] += area * sqrt_g * gf.form(&gphi, &fbar);
                    base_norm2[node] += area * sqrt_g * gf.form(&gphi, &abar.mul_vec(&gphi));
                    hat_mass[node] += area / 6.0 * sqrt_g;
                    for (m, k) in modes.iter().enumerate() {
                        // mean_v F . d chi for chi = exp(2 pi i k.v)
                        let idx = mode_idx[m];
                        let z = (spec[0][idx] * k[0] + spec[1][idx] * k[1]) * Complex64::new(0.0, 2.0 * PI);
                        fiber_b[node][m] += z * (area / 3.0 * sqrt_g);
                    }
                }
            }
        }
    }
    let unorm = pairwise_sum(&energy).sqrt();
    let mut base_residual: f64 = 0.0;
    let mut fiber_residual: f64 = 0.0;
    let mut tests = 0;
    for k in 0..n_nodes {
        if domain.dirichlet[k] {
            continue;
        }
        tests += 1 + 2 * modes.len();
        base_residual = base_residual.max((base_b[k] - load[k]).abs() / (unorm * base_norm2[k].sqrt()));
        for (m, z) in fiber_b[k].iter().enumerate() {
            // Re z pairs with cos (gradient -sin), Im z with sin
            let rc = z.re.abs() / (unorm * (hat_mass[k] * chi_energy[m][0]).sqrt());
            let rs = z.im.abs() / (unorm * (hat_mass[k] * chi_energy[m][1]).sqrt());
            fiber_residual = fiber_residual.max(rc).max(rs);
        }
    }
    Ok(TwoScaleReport {
        astar: star.endo,
        base_residual,
        fiber_residual,
        max_residual: base_residual.max(fiber_residual),
        tests,
        fem,
        corrector_identity_gap: identity_gap,
        cell_weak_residual: cell.weak_residual(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_no_corrector() {
        let model = ManifoldModel::flat(2);
        let a = tensor_preset("identity", 2).unwrap();
        let cell = solve_cell(&model, &a, &Vector::zeros(2), &CellSolverConfig { modes: 8, ..Default::default() })
            .unwrap();
        assert!(cell.correctors.iter().flatten().all(|w| *w == 0.0));
        assert_eq!(cell.stats[0].iterations, 0);
    }

    #[test]
    fn orthonormal_in_metric() {
        let m = FiberMetric::new(Mat::from_rows(&[&[2.0, 0.3], &[0.3, 1.0]])).unwrap();
        let o = orthonormal_directions(&m);
        for i in 0..2 {
            for j in 0..2 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((m.inner(&o[i], &o[j]) - e).abs() < 1e-14);
            }
        }
    }
}

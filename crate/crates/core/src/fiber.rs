//! Periodic fields on the torus fibers and their vertical calculus.
//!
//! A fiber is sampled on `m = 2N` points per frame coordinate. Spectra are
//! normalized so that `f(v) = sum_k f_hat(k) exp(2 pi i k.v)`; the Nyquist
//! mode is dropped by every derivative.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{HomogError, Result};
use crate::geometry::{grid_point, wrap01, ManifoldModel, Point};
use crate::linalg::{pairwise_sum, Mat, Vector, MAX_DIM};

pub type ScalarFn = Arc<dyn Fn(&Vector, &Vector) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&Vector, &Vector) -> Vector + Send + Sync>;
pub type TensorFn = Arc<dyn Fn(&Vector, &Vector) -> Mat + Send + Sync>;

/// Reduce a fiber coordinate into `[0,1)^n`.
pub fn reduce_fiber(v: &Vector) -> Vector {
    let mut r = *v;
    for i in 0..r.n {
        r.c[i] = wrap01(r.c[i]);
    }
    r
}

/// Scalar field `f[p, v]`, 1-periodic in the frame coordinates `v`.
#[derive(Clone)]
pub struct ScalarFiberField {
    dim: usize,
    f: ScalarFn,
    grad_v: Option<VectorFn>,
}

impl ScalarFiberField {
    pub fn new(dim: usize, f: ScalarFn) -> Self {
        Self { dim, f, grad_v: None }
    }

    /// Attach the exact coordinate derivative `d f / d v`.
    pub fn with_derivative(mut self, d: VectorFn) -> Self {
        self.grad_v = Some(d);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::new(dim, Arc::new(move |_, _| c)).with_derivative(Arc::new(move |_, _| Vector::zeros(dim)))
    }

    /// `eval` at chart position `x` and fiber point `v` (reduced mod 1 first).
    pub fn eval(&self, x: &Vector, v: &Vector) -> f64 {
        (self.f)(x, &reduce_fiber(v))
    }

    pub fn eval_at(&self, p: &Point, v: &Vector) -> f64 {
        self.eval(p.coords(), v)
    }

    /// Coordinate derivative in `v`; spectral on a `grid` when no exact form is attached.
    pub fn dv(&self, x: &Vector, v: &Vector) -> Option<Vector> {
        self.grad_v.as_ref().map(|d| d(x, &reduce_fiber(v)))
    }

    pub fn has_derivative(&self) -> bool {
        self.grad_v.is_some()
    }

    pub fn sample(&self, grid: &FiberGrid, x: &Vector) -> Vec<f64> {
        (0..grid.len()).map(|i| (self.f)(x, &grid.point(i))).collect()
    }

    pub fn product(&self, other: &ScalarFiberField) -> ScalarFiberField {
        let (f, g) = (self.f.clone(), other.f.clone());
        let mut out = ScalarFiberField::new(self.dim, Arc::new(move |x, v| f(x, v) * g(x, v)));
        if let (Some(df), Some(dg)) = (self.grad_v.clone(), other.grad_v.clone()) {
            let (f, g) = (self.f.clone(), other.f.clone());
            out.grad_v = Some(Arc::new(move |x, v| df(x, v) * g(x, v) + dg(x, v) * f(x, v)));
        }
        out
    }
}

/// Vertical vector field in frame components.
#[derive(Clone)]
pub struct VectorFiberField {
    dim: usize,
    f: VectorFn,
    /// `div^v X = sum_i d X^i / d v_i` when known in closed form.
    div: Option<ScalarFn>,
}

impl VectorFiberField {
    pub fn new(dim: usize, f: VectorFn) -> Self {
        Self { dim, f, div: None }
    }

    pub fn with_divergence(mut self, d: ScalarFn) -> Self {
        self.div = Some(d);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &Vector, v: &Vector) -> Vector {
        (self.f)(x, &reduce_fiber(v))
    }

    pub fn divergence(&self, x: &Vector, v: &Vector) -> Option<f64> {
        self.div.as_ref().map(|d| d(x, &reduce_fiber(v)))
    }

    pub fn sample(&self, grid: &FiberGrid, x: &Vector) -> Vec<Vector> {
        (0..grid.len()).map(|i| (self.f)(x, &grid.point(i))).collect()
    }
}

/// Vertical (1,1)-tensor field `A_i^j[p, v]` in frame components.
#[derive(Clone)]
pub struct TensorFiberField {
    dim: usize,
    f: TensorFn,
    /// The field does not depend on `v`.
    fiber_constant: bool,
    /// The field does not depend on `p`.
    base_constant: bool,
}

impl TensorFiberField {
    pub fn new(dim: usize, f: TensorFn) -> Self {
        Self { dim, f, fiber_constant: false, base_constant: false }
    }

    pub fn constant(a: Mat) -> Self {
        Self { dim: a.n, f: Arc::new(move |_, _| a), fiber_constant: true, base_constant: true }
    }

    pub fn with_flags(mut self, fiber_constant: bool, base_constant: bool) -> Self {
        self.fiber_constant = fiber_constant;
        self.base_constant = base_constant;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_fiber_constant(&self) -> bool {
        self.fiber_constant
    }

    pub fn is_base_constant(&self) -> bool {
        self.base_constant
    }

    pub fn eval(&self, x: &Vector, v: &Vector) -> Mat {
        (self.f)(x, &reduce_fiber(v))
    }

    pub fn sample(&self, grid: &FiberGrid, x: &Vector) -> Vec<Mat> {
        (0..grid.len()).map(|i| (self.f)(x, &grid.point(i))).collect()
    }

    /// `(A + A^ad) / 2` with respect to the frame metric of `model`.
    pub fn symmetrized(&self, model: &ManifoldModel) -> TensorFiberField {
        let f = self.f.clone();
        let m = model.clone();
        TensorFiberField {
            dim: self.dim,
            f: Arc::new(move |x, v| {
                let gf = m.frame_metric(&Point::from_vector(*x));
                symmetrize(&f(x, v), &gf)
            }),
            fiber_constant: self.fiber_constant,
            base_constant: self.base_constant && model.is_flat(),
        }
    }
}

/// Adjoint of an endomorphism with respect to `g` (columns are images): `G^{-1} A^T G`.
pub fn adjoint(a: &Mat, g: &Mat) -> Mat {
    g.inverse().expect("metric invertible") * a.transpose() * *g
}

pub fn symmetrize(a: &Mat, g: &Mat) -> Mat {
    (*a + adjoint(a, g)).scale(0.5)
}

/// Constant Gram matrix `g_ij(p)` of the frame lift on one fiber.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiberMetric {
    pub g: Mat,
    pub ginv: Mat,
    pub sqrt_det: f64,
}

impl FiberMetric {
    pub fn new(g: Mat) -> Result<Self> {
        let e = g.sym_eigenvalues();
        if e[0] <= 0.0 || (g - g.transpose()).max_abs() > 1e-12 * g.max_abs() {
            return Err(HomogError::InvalidConfig("fiber metric must be symmetric positive definite".into()));
        }
        Ok(Self { g, ginv: g.inverse().expect("SPD"), sqrt_det: g.det().sqrt() })
    }

    pub fn identity(n: usize) -> Self {
        Self::new(Mat::identity(n)).expect("identity is SPD")
    }

    pub fn at(model: &ManifoldModel, p: &Point) -> Self {
        Self::new(model.frame_metric(p)).expect("frame metric is SPD")
    }

    /// `|k|_p^2 = k_i k_j g^{ij}`.
    pub fn mode_norm2(&self, k: &Vector) -> f64 {
        self.ginv.form(k, k)
    }

    /// Volume of the fiber torus, `sqrt det g_ij`.
    pub fn volume(&self) -> f64 {
        self.sqrt_det
    }

    pub fn inner(&self, a: &Vector, b: &Vector) -> f64 {
        self.g.form(a, b)
    }
}

/// Uniform sampling of a fiber with FFT plans.
#[derive(Clone)]
pub struct FiberGrid {
    n: usize,
    m: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FiberGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FiberGrid {{ n: {}, m: {} }}", self.n, self.m)
    }
}

impl FiberGrid {
    /// Grid resolving `|k_i| < modes`, with `2 * modes` points per axis.
    pub fn new(n: usize, modes: usize) -> Self {
        assert!((1..=MAX_DIM).contains(&n) && modes >= 1);
        let m = 2 * modes;
        let mut planner = FftPlanner::new();
        Self { n, m, fwd: planner.plan_fft_forward(m), inv: planner.plan_fft_inverse(m) }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn points_per_axis(&self) -> usize {
        self.m
    }

    pub fn modes(&self) -> usize {
        self.m / 2
    }

    pub fn len(&self) -> usize {
        self.m.pow(self.n as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, idx: usize) -> Vector {
        crate::geometry::vertex_point(idx, self.m, self.n)
    }

    /// Integer wavenumber of spectral index `idx`; `None` for Nyquist modes.
    pub fn wavenumber(&self, idx: usize) -> Option<Vector> {
        let mut k = Vector::zeros(self.n);
        let mut r = idx;
        for i in 0..self.n {
            let a = r % self.m;
            r /= self.m;
            if a == self.m / 2 {
                return None;
            }
            k.c[i] = if a < self.m / 2 { a as f64 } else { a as f64 - self.m as f64 };
        }
        Some(k)
    }

    /// Spectral index of an integer wavenumber with `|k_i| < m/2`.
    pub fn index_of(&self, k: &[i64]) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for &ki in k.iter().take(self.n) {
            idx += ki.rem_euclid(self.m as i64) as usize * stride;
            stride *= self.m;
        }
        idx
    }

    fn transform(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let m = self.m;
        let mut line = vec![Complex64::new(0.0, 0.0); m];
        let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        let total = self.len();
        let mut stride = 1;
        for _ in 0..self.n {
            for start in 0..total {
                if (start / stride) % m != 0 {
                    continue;
                }
                for (t, l) in line.iter_mut().enumerate() {
                    *l = data[start + t * stride];
                }
                plan.process_with_scratch(&mut line, &mut scratch);
                for (t, l) in line.iter().enumerate() {
                    data[start + t * stride] = *l;
                }
            }
            stride *= m;
        }
    }

    /// Normalized coefficients `f_hat(k) = mean_v f(v) exp(-2 pi i k.v)`.
    pub fn forward_complex(&self, data: &[Complex64]) -> Vec<Complex64> {
        let mut d = data.to_vec();
        self.transform(&mut d, &self.fwd);
        let s = 1.0 / self.len() as f64;
        d.iter_mut().for_each(|c| *c *= s);
        d
    }

    pub fn forward(&self, data: &[f64]) -> Vec<Complex64> {
        let c: Vec<Complex64> = data.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward_complex(&c)
    }

    pub fn inverse(&self, spec: &[Complex64]) -> Vec<Complex64> {
        let mut d = spec.to_vec();
        self.transform(&mut d, &self.inv);
        d
    }

    pub fn inverse_real(&self, spec: &[Complex64]) -> Vec<f64> {
        self.inverse(spec).into_iter().map(|c| c.re).collect()
    }

    /// Spectrum of `d/dv_axis`.
    pub fn derivative_spectrum(&self, spec: &[Complex64], axis: usize) -> Vec<Complex64> {
        spec.iter()
            .enumerate()
            .map(|(i, &c)| match self.wavenumber(i) {
                Some(k) => c * Complex64::new(0.0, 2.0 * PI * k.c[axis]),
                None => Complex64::new(0.0, 0.0),
            })
            .collect()
    }

    /// Coordinate gradient `(d f/d v_i)` at every sample.
    pub fn coordinate_gradient(&self, f: &[f64]) -> Vec<Vector> {
        let spec = self.forward(f);
        self.coordinate_gradient_spec(&spec)
    }

    pub fn coordinate_gradient_spec(&self, spec: &[Complex64]) -> Vec<Vector> {
        let mut out = vec![Vector::zeros(self.n); self.len()];
        for a in 0..self.n {
            let d = self.inverse_real(&self.derivative_spectrum(spec, a));
            for (o, v) in out.iter_mut().zip(d) {
                o.c[a] = v;
            }
        }
        out
    }

    /// `sum_i d X^i / d v_i`.
    pub fn divergence(&self, x: &[Vector]) -> Vec<f64> {
        let mut acc = vec![Complex64::new(0.0, 0.0); self.len()];
        for a in 0..self.n {
            let comp: Vec<f64> = x.iter().map(|v| v.c[a]).collect();
            let d = self.derivative_spectrum(&self.forward(&comp), a);
            for (s, v) in acc.iter_mut().zip(d) {
                *s += v;
            }
        }
        self.inverse_real(&acc)
    }

    /// `mean_v f` with fixed-order summation.
    pub fn average(&self, f: &[f64]) -> f64 {
        pairwise_sum(f) / self.len() as f64
    }

    pub fn average_tensor(&self, t: &[Mat]) -> Mat {
        let mut out = Mat::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                let c: Vec<f64> = t.iter().map(|a| a.a[i][j]).collect();
                out.a[i][j] = self.average(&c);
            }
        }
        out
    }

    /// Fiber `L^2` inner product in the metric, normalized: `mean_v <X, Y>_g`.
    pub fn inner_vectors(&self, metric: &FiberMetric, x: &[Vector], y: &[Vector]) -> f64 {
        let v: Vec<f64> = x.iter().zip(y).map(|(a, b)| metric.inner(a, b)).collect();
        self.average(&v)
    }
}

/// `grad_v f = G^{-1} d f / d v` in frame components.
pub fn vertical_gradient(grid: &FiberGrid, metric: &FiberMetric, f: &[f64]) -> Vec<Vector> {
    grid.coordinate_gradient(f).into_iter().map(|d| metric.ginv.mul_vec(&d)).collect()
}

/// `div^v X = sum_i d X^i / d v_i` for frame components `X^i`.
pub fn vertical_divergence(grid: &FiberGrid, x: &[Vector]) -> Vec<f64> {
    grid.divergence(x)
}

/// Fiber average of a tensor field at one base point.
pub fn fiber_average(grid: &FiberGrid, t: &TensorFiberField, x: &Vector) -> Mat {
    grid.average_tensor(&t.sample(grid, x))
}

/// `X = grad_v u + Y` with `div^v Y = 0` and `u` of zero mean.
#[derive(Clone, Debug)]
pub struct LerayDecomposition {
    pub u: Vec<f64>,
    pub grad_u: Vec<Vector>,
    pub y: Vec<Vector>,
}

/// Mode-wise solution `u_hat(k) = k.X_hat(k) / (2 pi i |k|_p^2)`.
pub fn vertical_leray(grid: &FiberGrid, metric: &FiberMetric, x: &[Vector]) -> LerayDecomposition {
    let n = grid.dim();
    let comps: Vec<Vec<Complex64>> = (0..n)
        .map(|a| grid.forward(&x.iter().map(|v| v.c[a]).collect::<Vec<_>>()))
        .collect();
    let u_hat: Vec<Complex64> = (0..grid.len())
        .map(|i| match grid.wavenumber(i) {
            Some(k) if k.max_abs() > 0.0 => {
                let mut kx = Complex64::new(0.0, 0.0);
                for a in 0..n {
                    kx += comps[a][i] * k.c[a];
                }
                kx / Complex64::new(0.0, 2.0 * PI * metric.mode_norm2(&k))
            }
            _ => Complex64::new(0.0, 0.0),
        })
        .collect();
    let u = grid.inverse_real(&u_hat);
    let grad_u: Vec<Vector> =
        grid.coordinate_gradient_spec(&u_hat).into_iter().map(|d| metric.ginv.mul_vec(&d)).collect();
    let y = x.iter().zip(&grad_u).map(|(a, b)| *a - *b).collect();
    LerayDecomposition { u, grad_u, y }
}

/// `P_k f = <k, grad f> / (2 pi i |k|^2)` for complex samples on the unit torus.
pub fn p_k_operator(grid: &FiberGrid, f: &[Complex64], k: &[i64]) -> Result<Vec<Complex64>> {
    if k.iter().all(|&c| c == 0) {
        return Err(HomogError::ZeroMode);
    }
    let n = grid.dim();
    let spec = grid.forward_complex(f);
    let k2: f64 = k.iter().map(|&c| (c * c) as f64).sum();
    let mut acc = vec![Complex64::new(0.0, 0.0); grid.len()];
    for a in 0..n {
        let d = grid.derivative_spectrum(&spec, a);
        for (s, v) in acc.iter_mut().zip(d) {
            *s += v * k[a] as f64;
        }
    }
    let out = grid.inverse(&acc);
    let denom = Complex64::new(0.0, 2.0 * PI * k2);
    Ok(out.into_iter().map(|c| c / denom).collect())
}

/// Spectral gradient of complex samples on the unit torus.
pub fn complex_gradient(grid: &FiberGrid, f: &[Complex64]) -> Vec<Vec<Complex64>> {
    let spec = grid.forward_complex(f);
    (0..grid.dim()).map(|a| grid.inverse(&grid.derivative_spectrum(&spec, a))).collect()
}

/// `int_M mean_v f(x, v) dvol(x)` with a cell-centred base grid of `base_m`
/// points per axis.
pub fn normalized_integral(model: &ManifoldModel, base_m: usize, grid: &FiberGrid, f: &ScalarFiberField) -> f64 {
    use rayon::prelude::*;
    let n = model.dim();
    let total = base_m.pow(n as u32);
    let cell = (1.0 / base_m as f64).powi(n as i32);
    let vals: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let x = grid_point(idx, base_m, n);
            model.volume_density(&x) * cell * grid.average(&f.sample(grid, &x))
        })
        .collect();
    pairwise_sum(&vals)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wavenumbers_and_nyquist() {
        let g = FiberGrid::new(2, 4);
        assert_eq!(g.points_per_axis(), 8);
        assert!(g.wavenumber(4).is_none());
        assert_eq!(g.wavenumber(g.index_of(&[-3, 2])).unwrap().as_slice(), &[-3.0, 2.0]);
    }

    #[test]
    fn gradient_of_sine() {
        let g = FiberGrid::new(2, 8);
        let f: Vec<f64> = (0..g.len()).map(|i| (2.0 * PI * g.point(i)[0]).sin()).collect();
        let metric = FiberMetric::new(Mat::diag(&[2.0, 1.0])).unwrap();
        let gr = vertical_gradient(&g, &metric, &f);
        for (i, v) in gr.iter().enumerate() {
            let expect = PI * (2.0 * PI * g.point(i)[0]).cos();
            assert!((v[0] - expect).abs() < 1e-12);
            assert!(v[1].abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_is_involutive() {
        let g = Mat::from_rows(&[&[2.0, 0.3], &[0.3, 1.0]]);
        let a = Mat::from_rows(&[&[1.0, 2.0], &[-0.5, 3.0]]);
        assert!((adjoint(&adjoint(&a, &g), &g) - a).max_abs() < 1e-12);
        let s = symmetrize(&a, &g);
        assert!((adjoint(&s, &g) - s).max_abs() < 1e-12);
        // <A x, y>_g = <x, A^ad y>_g
        let (x, y) = (Vector::from_slice(&[0.3, -1.0]), Vector::from_slice(&[1.2, 0.7]));
        let lhs = g.form(&a.mul_vec(&x), &y);
        let rhs = g.form(&x, &adjoint(&a, &g).mul_vec(&y));
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

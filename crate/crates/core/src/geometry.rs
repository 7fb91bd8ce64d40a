//! Closed parallelizable manifolds presented in one periodic chart `[0,1)^n`.
//!
//! A [`ManifoldModel`] carries a periodic metric `G(x)` and a periodic frame
//! `E(x)` (columns are the frame vectors `e_i(x)` in chart coordinates).
//! Geodesics are integrated with classical RK4 on the Christoffel ODE; the
//! flat case short-circuits to exact arithmetic.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{HomogError, Result};
use crate::linalg::{Mat, Vector, MAX_DIM};

pub type MetricFn = Arc<dyn Fn(&Vector) -> Mat + Send + Sync>;
/// Partial derivative `dG/dx_k` at a point.
pub type MetricDerivFn = Arc<dyn Fn(&Vector, usize) -> Mat + Send + Sync>;
pub type FrameFn = Arc<dyn Fn(&Vector) -> Mat + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Flat,
    Warped,
    General,
}

/// A point of the chart torus, coordinates reduced into `[0,1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point(Vector);

impl Point {
    pub fn new(coords: &[f64]) -> Self {
        Self::from_vector(Vector::from_slice(coords))
    }

    pub fn from_vector(mut v: Vector) -> Self {
        for i in 0..v.n {
            v.c[i] = wrap01(v.c[i]);
        }
        Point(v)
    }

    pub fn dim(&self) -> usize {
        self.0.n
    }

    pub fn coords(&self) -> &Vector {
        &self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    /// Translate by a chart vector, reducing mod 1.
    pub fn shifted(&self, v: &Vector) -> Point {
        Point::from_vector(self.0 + *v)
    }
}

pub fn wrap01(x: f64) -> f64 {
    let r = x - x.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Nearest lattice representative of `q - p`, componentwise in `[-1/2, 1/2)`.
pub fn chart_difference(p: &Point, q: &Point) -> Vector {
    let mut d = *q.coords() - *p.coords();
    for i in 0..d.n {
        d.c[i] -= (d.c[i] + 0.5).floor();
    }
    d
}

/// Tangent vector with components in chart coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TangentVector {
    pub base: Point,
    pub v: Vector,
}

impl TangentVector {
    pub fn new(base: Point, v: Vector) -> Self {
        Self { base, v }
    }

    /// Components in the frame `e_i(base)`.
    pub fn frame_components(&self, model: &ManifoldModel) -> Vector {
        model
            .frame(&self.base)
            .inverse()
            .expect("frame is nondegenerate")
            .mul_vec(&self.v)
    }

    pub fn from_frame_components(model: &ManifoldModel, base: Point, f: &Vector) -> Self {
        Self { base, v: model.frame(&base).mul_vec(f) }
    }

    pub fn norm(&self, model: &ManifoldModel) -> f64 {
        model.metric(&self.base).form(&self.v, &self.v).max(0.0).sqrt()
    }
}

/// Output of a shooting solve: initial velocity at `p` and the velocity with
/// which the geodesic arrives at `q`.
#[derive(Clone, Copy, Debug)]
pub struct LogResult {
    pub v: Vector,
    pub end_velocity: Vector,
}

/// Serializable description of a model preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `flat`, `warped-sin(a)`, `warped-ortho(a)`, `skew-frame(b)`.
    pub preset: String,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default)]
    pub injectivity_floor: Option<f64>,
}

fn default_dim() -> usize {
    2
}

impl ModelConfig {
    pub fn new(preset: &str) -> Self {
        Self { preset: preset.to_string(), dim: 2, injectivity_floor: None }
    }
}

#[derive(Clone)]
pub struct ManifoldModel {
    name: String,
    dim: usize,
    kind: MetricKind,
    metric_fn: MetricFn,
    metric_deriv: Option<MetricDerivFn>,
    frame_fn: FrameFn,
    injectivity_floor: f64,
    lambda_min: f64,
    lambda_max: f64,
    /// Metric is the identity matrix everywhere.
    euclidean: bool,
    steps_per_unit: f64,
    min_steps: usize,
    christoffel_step: f64,
}

impl std::fmt::Debug for ManifoldModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ManifoldModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("kind", &self.kind)
            .field("injectivity_floor", &self.injectivity_floor)
            .finish()
    }
}

const DENSE_CHECK: usize = 64;

impl ManifoldModel {
    /// Build a model from closures. The metric and frame are sampled on a
    /// `64^n` grid to validate symmetry, positivity and nondegeneracy.
    pub fn new(
        name: &str,
        dim: usize,
        kind: MetricKind,
        metric: MetricFn,
        frame: FrameFn,
        injectivity_floor: f64,
    ) -> Result<Self> {
        if !(2..=MAX_DIM).contains(&dim) {
            return Err(HomogError::InvalidConfig(format!("dimension {dim} not supported")));
        }
        if injectivity_floor <= 0.0 {
            return Err(HomogError::InvalidConfig("injectivity floor must be positive".into()));
        }
        let mut model = Self {
            name: name.to_string(),
            dim,
            kind,
            metric_fn: metric,
            metric_deriv: None,
            frame_fn: frame,
            injectivity_floor,
            lambda_min: 1.0,
            lambda_max: 1.0,
            euclidean: false,
            steps_per_unit: 64.0,
            min_steps: 8,
            christoffel_step: 1e-4,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&mut self) -> Result<()> {
        let m = if self.dim == 2 { DENSE_CHECK } else { 24 };
        let total = m.pow(self.dim as u32);
        let mut lmin = f64::INFINITY;
        let mut lmax: f64 = 0.0;
        let mut min_det = f64::INFINITY;
        let mut euclid = true;
        for idx in 0..total {
            let x = grid_point(idx, m, self.dim);
            let g = (self.metric_fn)(&x);
            if (g - g.transpose()).max_abs() > 1e-12 * g.max_abs().max(1.0) {
                return Err(HomogError::InvalidConfig("metric is not symmetric".into()));
            }
            let e = g.sym_eigenvalues();
            lmin = lmin.min(e[0]);
            lmax = lmax.max(e[self.dim - 1]);
            if (g - Mat::identity(self.dim)).max_abs() != 0.0 {
                euclid = false;
            }
            let f = (self.frame_fn)(&x);
            min_det = min_det.min(f.det().abs());
        }
        if lmin <= 0.0 {
            return Err(HomogError::InvalidConfig("metric is not positive definite".into()));
        }
        if min_det <= 1e-10 {
            return Err(HomogError::InvalidConfig("frame degenerates".into()));
        }
        self.lambda_min = lmin;
        self.lambda_max = lmax;
        self.euclidean = euclid && self.kind == MetricKind::Flat;
        Ok(())
    }

    pub fn with_metric_derivative(mut self, d: MetricDerivFn) -> Self {
        self.metric_deriv = Some(d);
        self
    }

    /// Drop any analytic metric derivative so Christoffels come from finite differences.
    pub fn without_metric_derivative(mut self) -> Self {
        self.metric_deriv = None;
        self
    }

    pub fn with_steps_per_unit(mut self, steps: f64, min_steps: usize) -> Self {
        self.steps_per_unit = steps;
        self.min_steps = min_steps;
        self
    }

    pub fn with_injectivity_floor(mut self, floor: f64) -> Self {
        self.injectivity_floor = floor;
        self
    }

    pub fn flat(dim: usize) -> Self {
        Self::new(
            "flat",
            dim,
            MetricKind::Flat,
            Arc::new(move |_| Mat::identity(dim)),
            Arc::new(move |_| Mat::identity(dim)),
            0.5,
        )
        .expect("flat model is valid")
    }

    /// Flat metric with a constant skewed frame `e_2 = (b, 1)`.
    pub fn skew_frame(dim: usize, b: f64) -> Result<Self> {
        let mut e = Mat::identity(dim);
        e.a[0][1] = b;
        Self::new(
            &format!("skew-frame({b})"),
            dim,
            MetricKind::Flat,
            Arc::new(move |_| Mat::identity(dim)),
            Arc::new(move |_| e),
            0.5,
        )
    }

    /// `G = diag(1, 1 + a sin 2 pi x_1, 1...)`, coordinate frame.
    pub fn warped_sin(dim: usize, a: f64) -> Result<Self> {
        Self::warped(dim, a, false)
    }

    /// Same metric as [`Self::warped_sin`] with the `g`-orthonormal frame
    /// `e_2 = (1 + a sin 2 pi x_1)^{-1/2} d/dx_2`.
    pub fn warped_ortho(dim: usize, a: f64) -> Result<Self> {
        Self::warped(dim, a, true)
    }

    fn warped(dim: usize, a: f64, ortho: bool) -> Result<Self> {
        if a.abs() >= 1.0 {
            return Err(HomogError::InvalidConfig("warp amplitude must satisfy |a| < 1".into()));
        }
        let metric: MetricFn = Arc::new(move |x: &Vector| {
            let mut g = Mat::identity(dim);
            g.a[1][1] = 1.0 + a * (2.0 * PI * x.c[0]).sin();
            g
        });
        let deriv: MetricDerivFn = Arc::new(move |x: &Vector, k: usize| {
            let mut d = Mat::zeros(dim);
            if k == 0 {
                d.a[1][1] = 2.0 * PI * a * (2.0 * PI * x.c[0]).cos();
            }
            d
        });
        let frame: FrameFn = Arc::new(move |x: &Vector| {
            let mut e = Mat::identity(dim);
            if ortho {
                e.a[1][1] = 1.0 / (1.0 + a * (2.0 * PI * x.c[0]).sin()).sqrt();
            }
            e
        });
        // Half the length of the shortest closed geodesic x_1 = const, with margin.
        let floor = 0.5 * (1.0 - a.abs()).sqrt() * 0.95;
        let name = if ortho { format!("warped-ortho({a})") } else { format!("warped-sin({a})") };
        Ok(Self::new(&name, dim, MetricKind::Warped, metric, frame, floor)?.with_metric_derivative(deriv))
    }

    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        let (head, arg) = parse_preset(&cfg.preset)?;
        let model = match head.as_str() {
            "flat" => Ok(Self::flat(cfg.dim)),
            "skew-frame" => Self::skew_frame(cfg.dim, arg.unwrap_or(0.3)),
            "warped-sin" => Self::warped_sin(cfg.dim, arg.unwrap_or(0.5)),
            "warped-ortho" => Self::warped_ortho(cfg.dim, arg.unwrap_or(0.5)),
            other => Err(HomogError::InvalidConfig(format!("unknown model preset '{other}'"))),
        }?;
        Ok(match cfg.injectivity_floor {
            Some(f) => model.with_injectivity_floor(f),
            None => model,
        })
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::from_config(&ModelConfig::new(name))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    pub fn is_flat(&self) -> bool {
        self.kind == MetricKind::Flat
    }

    pub fn injectivity_floor(&self) -> f64 {
        self.injectivity_floor
    }

    /// Global eigenvalue bounds of `G` measured on the validation grid.
    pub fn metric_bounds(&self) -> (f64, f64) {
        (self.lambda_min, self.lambda_max)
    }

    pub fn metric(&self, p: &Point) -> Mat {
        (self.metric_fn)(p.coords())
    }

    pub fn metric_at(&self, x: &Vector) -> Mat {
        (self.metric_fn)(x)
    }

    pub fn frame(&self, p: &Point) -> Mat {
        (self.frame_fn)(p.coords())
    }

    pub fn frame_at(&self, x: &Vector) -> Mat {
        (self.frame_fn)(x)
    }

    /// Gram matrix of the frame, `g_ij(p) = g(e_i, e_j)`.
    pub fn frame_metric(&self, p: &Point) -> Mat {
        let e = self.frame(p);
        e.transpose() * self.metric(p) * e
    }

    pub fn volume_density(&self, x: &Vector) -> f64 {
        (self.metric_fn)(x).det().sqrt()
    }

    /// `dG/dx_k` from the analytic derivative when present, otherwise by
    /// fourth-order central differences with step `h_chr`.
    pub fn metric_derivative(&self, x: &Vector, k: usize) -> Mat {
        if let Some(d) = &self.metric_deriv {
            return d(x, k);
        }
        self.metric_derivative_fd(x, k)
    }

    pub fn metric_derivative_fd(&self, x: &Vector, k: usize) -> Mat {
        let h = self.christoffel_step;
        let at = |s: f64| {
            let mut y = *x;
            y.c[k] += s;
            (self.metric_fn)(&y)
        };
        (at(-2.0 * h) - at(2.0 * h) + (at(h) - at(-h)).scale(8.0)).scale(1.0 / (12.0 * h))
    }

    /// Christoffel symbols; `out[k].a[i][j] = Gamma^k_ij`.
    pub fn christoffel(&self, x: &Vector) -> [Mat; MAX_DIM] {
        let n = self.dim;
        let ginv = (self.metric_fn)(x).inverse().expect("metric invertible");
        let mut dg = [Mat::zeros(n); MAX_DIM];
        for (k, d) in dg.iter_mut().enumerate().take(n) {
            *d = self.metric_derivative(x, k);
        }
        let mut out = [Mat::zeros(n); MAX_DIM];
        for i in 0..n {
            for j in i..n {
                // lowered symbol Gamma_{l,ij}
                let mut low = [0.0; MAX_DIM];
                for (l, lv) in low.iter_mut().enumerate().take(n) {
                    *lv = 0.5 * (dg[i].a[l][j] + dg[j].a[l][i] - dg[l].a[i][j]);
                }
                for (k, ok) in out.iter_mut().enumerate().take(n) {
                    let mut s = 0.0;
                    for (l, lv) in low.iter().enumerate().take(n) {
                        s += ginv.a[k][l] * lv;
                    }
                    ok.a[i][j] = s;
                    ok.a[j][i] = s;
                }
            }
        }
        out
    }

    fn geodesic_rhs(&self, x: &Vector, xd: &Vector) -> Vector {
        let gam = self.christoffel(x);
        let mut acc = Vector::zeros(self.dim);
        for k in 0..self.dim {
            acc.c[k] = -gam[k].form(xd, xd);
        }
        acc
    }

    fn step_count(&self, v: &Vector, base: &Vector) -> usize {
        let len = (self.metric_fn)(base).form(v, v).max(0.0).sqrt();
        ((self.steps_per_unit * len).ceil() as usize).max(self.min_steps)
    }

    /// Integrate the geodesic from chart position `x0` (not reduced) with
    /// initial velocity `v` over `t in [0,1]`. Returns unreduced end position
    /// and end velocity.
    pub fn integrate_geodesic(&self, x0: &Vector, v: &Vector, steps: usize) -> Result<(Vector, Vector)> {
        if self.is_flat() {
            return Ok((*x0 + *v, *v));
        }
        let h = 1.0 / steps as f64;
        let mut x = *x0;
        let mut xd = *v;
        for _ in 0..steps {
            let k1x = xd;
            let k1v = self.geodesic_rhs(&x, &xd);
            let k2x = xd + k1v * (0.5 * h);
            let k2v = self.geodesic_rhs(&(x + k1x * (0.5 * h)), &k2x);
            let k3x = xd + k2v * (0.5 * h);
            let k3v = self.geodesic_rhs(&(x + k2x * (0.5 * h)), &k3x);
            let k4x = xd + k3v * h;
            let k4v = self.geodesic_rhs(&(x + k3x * h), &k4x);
            x = x + (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
            xd = xd + (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (h / 6.0);
            if !x.as_slice().iter().chain(xd.as_slice()).all(|c| c.is_finite()) {
                return Err(HomogError::StepSizeUnderflow);
            }
        }
        Ok((x, xd))
    }

    /// Sampled geodesic `(x(t), x'(t))` at `steps + 1` equispaced times.
    pub fn geodesic_path(&self, p: &Point, v: &Vector, steps: usize) -> Result<Vec<(Vector, Vector)>> {
        let mut out = Vec::with_capacity(steps + 1);
        let mut x = *p.coords();
        let mut xd = *v;
        out.push((x, xd));
        let h = 1.0 / steps as f64;
        for _ in 0..steps {
            let (nx, nxd) = self.integrate_geodesic_segment(&x, &xd, h)?;
            x = nx;
            xd = nxd;
            out.push((x, xd));
        }
        Ok(out)
    }

    fn integrate_geodesic_segment(&self, x: &Vector, xd: &Vector, t: f64) -> Result<(Vector, Vector)> {
        // one RK4 step of length t on the rescaled problem
        let (nx, nxd) = self.integrate_geodesic(x, &(*xd * t), 1)?;
        Ok((nx, nxd * (1.0 / t)))
    }

    fn check_radius(&self, p: &Point, v: &Vector) -> Result<f64> {
        let len = self.metric(p).form(v, v).max(0.0).sqrt();
        if len > self.injectivity_floor {
            return Err(HomogError::RadiusExceeded { length: len, floor: self.injectivity_floor });
        }
        Ok(len)
    }

    /// `exp_p(v)` for `v` in chart components.
    pub fn exp_map(&self, p: &Point, v: &Vector) -> Result<Point> {
        self.check_radius(p, v)?;
        if self.is_flat() {
            return Ok(p.shifted(v));
        }
        let steps = self.step_count(v, p.coords());
        let (x, _) = self.integrate_geodesic(p.coords(), v, steps)?;
        Ok(Point::from_vector(x))
    }

    /// Unreduced endpoint of the geodesic; used by shooting and Jacobians.
    fn exp_unwrapped(&self, p: &Point, v: &Vector, steps: usize) -> Result<(Vector, Vector)> {
        self.integrate_geodesic(p.coords(), v, steps)
    }

    /// `exp_p^{-1}(q)` in chart components.
    pub fn log_map(&self, p: &Point, q: &Point) -> Result<Vector> {
        Ok(self.log_map_full(p, q)?.v)
    }

    /// Shooting solve returning both the initial and the arrival velocity.
    pub fn log_map_full(&self, p: &Point, q: &Point) -> Result<LogResult> {
        let delta = chart_difference(p, q);
        if self.is_flat() {
            let v = if self.euclidean { delta } else { self.nearest_flat_rep(p, delta) };
            return Ok(LogResult { v, end_velocity: v });
        }
        let n = self.dim;
        let target = *p.coords() + delta;
        let mut v = delta;
        if delta.max_abs() == 0.0 {
            return Ok(LogResult { v, end_velocity: v });
        }
        let steps = self.step_count(&delta, p.coords()).max(self.min_steps);
        let jac = |v: &Vector, base: &Vector| -> Result<Mat> {
            let h = 1e-7 * v.norm().max(1e-3);
            let mut cols = [Vector::zeros(n); MAX_DIM];
            for (j, col) in cols.iter_mut().enumerate().take(n) {
                let mut vp = *v;
                vp.c[j] += h;
                let (xp, _) = self.exp_unwrapped(p, &vp, steps)?;
                *col = (xp - *base) * (1.0 / h);
            }
            Ok(Mat::from_columns(&cols[..n]))
        };
        // Second-order start: exp_p(v) ~ p + v - Gamma_mid(v, v) / 2.
        let mid = *p.coords() + delta * 0.5;
        let gam = self.christoffel(&mid);
        let quad = |w: &Vector| {
            let mut out = Vector::zeros(n);
            for k in 0..n {
                out.c[k] = gam[k].form(w, w);
            }
            out
        };
        v = delta + quad(&delta) * 0.5;
        let mut approx = Mat::identity(n);
        for k in 0..n {
            let row = gam[k].mul_vec(&v);
            for l in 0..n {
                approx.a[k][l] -= row.c[l];
            }
        }
        let mut jinv = self.guarded_inverse(&approx, &v)?;
        let (mut x, mut xd) = self.exp_unwrapped(p, &v, steps)?;
        let mut exact_jacobian = false;
        let tol = 1e-14;
        let mut prev = f64::INFINITY;
        for it in 0..50 {
            let r = x - target;
            let res = r.max_abs();
            if res < tol {
                self.check_radius(p, &v)?;
                if !exact_jacobian && v.norm() * self.lambda_max.sqrt() > 0.5 * self.injectivity_floor {
                    self.guarded_inverse(&jac(&v, &x)?, &v)?;
                }
                return Ok(LogResult { v, end_velocity: xd });
            }
            if res > 0.1 * prev {
                jinv = self.guarded_inverse(&jac(&v, &x)?, &v)?;
                exact_jacobian = true;
            }
            prev = res;
            v = v - jinv.mul_vec(&r);
            if v.norm() > 4.0 * self.injectivity_floor / self.lambda_min.sqrt() {
                return Err(HomogError::NewtonDivergence { iterations: it + 1, residual: res });
            }
            let (nx, nxd) = self.exp_unwrapped(p, &v, steps)?;
            x = nx;
            xd = nxd;
        }
        Err(HomogError::NewtonDivergence { iterations: 50, residual: (x - target).max_abs() })
    }

    fn guarded_inverse(&self, j: &Mat, v: &Vector) -> Result<Mat> {
        // Conjugate-point guard: d exp must stay orientation preserving.
        if j.det() <= 0.0 {
            let len = v.norm();
            return Err(HomogError::RadiusExceeded { length: len, floor: self.injectivity_floor });
        }
        j.inverse().ok_or(HomogError::NewtonDivergence { iterations: 0, residual: f64::NAN })
    }

    fn nearest_flat_rep(&self, p: &Point, delta: Vector) -> Vector {
        let g = self.metric(p);
        let n = self.dim;
        let mut best = delta;
        let mut best_len = g.form(&delta, &delta);
        let combos = 3usize.pow(n as u32);
        for c in 0..combos {
            let mut d = delta;
            let mut cc = c;
            for i in 0..n {
                d.c[i] += (cc % 3) as f64 - 1.0;
                cc /= 3;
            }
            let l = g.form(&d, &d);
            if l < best_len - 1e-15 {
                best_len = l;
                best = d;
            }
        }
        best
    }

    pub fn distance(&self, p: &Point, q: &Point) -> Result<f64> {
        let v = self.log_map(p, q)?;
        Ok(self.metric(p).form(&v, &v).max(0.0).sqrt())
    }

    /// Distance together with its differential in `q` (a covector in chart components).
    pub fn distance_with_differential(&self, p: &Point, q: &Point) -> Result<(f64, Vector, Vector)> {
        let lr = self.log_map_full(p, q)?;
        let d = self.metric(p).form(&lr.v, &lr.v).max(0.0).sqrt();
        if d == 0.0 {
            return Ok((0.0, Vector::zeros(self.dim), lr.v));
        }
        let gq = self.metric(q);
        let w = gq.mul_vec(&lr.end_velocity);
        let speed = gq.form(&lr.end_velocity, &lr.end_velocity).sqrt();
        Ok((d, w * (1.0 / speed), lr.v))
    }

    /// Lower bound on `d(p, q)` from the chart displacement.
    pub fn distance_lower_bound(&self, p: &Point, q: &Point) -> f64 {
        self.lambda_min.sqrt() * chart_difference(p, q).norm()
    }

    /// Chart radius that contains the geodesic ball of radius `r`.
    pub fn chart_radius(&self, r: f64) -> f64 {
        r / self.lambda_min.sqrt()
    }

    /// `d exp_p` at `v` applied to the columns of the identity, by central differences.
    pub fn exp_differential(&self, p: &Point, v: &Vector) -> Result<Mat> {
        let n = self.dim;
        if self.is_flat() {
            return Ok(Mat::identity(n));
        }
        let steps = self.step_count(v, p.coords()).max(self.min_steps);
        let h = 1e-5;
        let mut cols = [Vector::zeros(n); MAX_DIM];
        for (j, col) in cols.iter_mut().enumerate().take(n) {
            let mut vp = *v;
            let mut vm = *v;
            vp.c[j] += h;
            vm.c[j] -= h;
            let (xp, _) = self.exp_unwrapped(p, &vp, steps)?;
            let (xm, _) = self.exp_unwrapped(p, &vm, steps)?;
            *col = (xp - xm) * (0.5 / h);
        }
        Ok(Mat::from_columns(&cols[..n]))
    }

    /// Columns are `e_i^down(p_j; q) = (d exp_{p_j})_v e_i(p_j)` with `q = exp_{p_j}(v)`.
    pub fn down_frame(&self, pj: &Point, q: &Point) -> Result<Mat> {
        let e = self.frame(pj);
        if self.is_flat() {
            return Ok(e);
        }
        let v = self.log_map(pj, q)?;
        self.down_frame_from_log(pj, &v)
    }

    pub fn down_frame_from_log(&self, pj: &Point, v: &Vector) -> Result<Mat> {
        let e = self.frame(pj);
        if self.is_flat() {
            return Ok(e);
        }
        Ok(self.exp_differential(pj, v)? * e)
    }

    /// Integral of the volume density over the chart (midpoint rule, `m` per axis).
    pub fn volume(&self) -> f64 {
        if self.is_flat() {
            let g = self.metric_at(&Vector::zeros(self.dim));
            return g.det().sqrt();
        }
        let m: usize = if self.dim == 2 { 256 } else { 48 };
        let total = m.pow(self.dim as u32);
        let w = 1.0 / total as f64;
        let vals: Vec<f64> = (0..total).map(|i| self.volume_density(&grid_point(i, m, self.dim)) * w).collect();
        crate::linalg::pairwise_sum(&vals)
    }
}

/// Cell-centred grid point `idx` of an `m^n` grid on `[0,1)^n` (first axis fastest).
pub fn grid_point(idx: usize, m: usize, n: usize) -> Vector {
    let mut v = Vector::zeros(n);
    let mut r = idx;
    let h = 1.0 / m as f64;
    for i in 0..n {
        v.c[i] = ((r % m) as f64 + 0.5) * h;
        r /= m;
    }
    v
}

/// Vertex grid point `idx` of an `m^n` grid (`i * h`).
pub fn vertex_point(idx: usize, m: usize, n: usize) -> Vector {
    let mut v = Vector::zeros(n);
    let mut r = idx;
    let h = 1.0 / m as f64;
    for i in 0..n {
        v.c[i] = (r % m) as f64 * h;
        r /= m;
    }
    v
}

fn parse_preset(s: &str) -> Result<(String, Option<f64>)> {
    let s = s.trim();
    if let Some(open) = s.find('(') {
        let close = s
            .rfind(')')
            .ok_or_else(|| HomogError::InvalidConfig(format!("unbalanced preset '{s}'")))?;
        let arg: f64 = s[open + 1..close]
            .trim()
            .parse()
            .map_err(|_| HomogError::InvalidConfig(format!("bad preset argument in '{s}'")))?;
        Ok((s[..open].trim().to_string(), Some(arg)))
    } else {
        Ok((s.to_string(), None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn warped() -> ManifoldModel {
        ManifoldModel::warped_sin(2, 0.5).unwrap()
    }

    #[test]
    fn flat_exp_is_translation_mod_one() {
        let m = ManifoldModel::flat(2);
        let q = m.exp_map(&Point::new(&[0.2, 0.3]), &Vector::from_slice(&[0.5, 0.9])).unwrap_err();
        // |v| > 0.5 exceeds the flat injectivity floor
        assert!(matches!(q, HomogError::RadiusExceeded { .. }));
        let m = m.with_injectivity_floor(2.0);
        let q = m.exp_map(&Point::new(&[0.2, 0.3]), &Vector::from_slice(&[0.5, 0.9])).unwrap();
        assert!((q.as_slice()[0] - 0.7).abs() < 1e-15);
        assert!((q.as_slice()[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn zero_vector_is_identity() {
        for m in [ManifoldModel::flat(2), warped()] {
            let p = Point::new(&[0.31, 0.77]);
            let q = m.exp_map(&p, &Vector::zeros(2)).unwrap();
            assert!(chart_difference(&p, &q).max_abs() < 1e-15);
            assert!(m.log_map(&p, &p).unwrap().max_abs() < 1e-15);
            assert_eq!(m.distance(&p, &p).unwrap(), 0.0);
        }
    }

    #[test]
    fn flat_log_nearest_representative() {
        let m = ManifoldModel::flat(2);
        let v = m.log_map(&Point::new(&[0.2, 0.3]), &Point::new(&[0.7, 0.2])).unwrap();
        // 0.7 - 0.2 = 0.5 sits on the cut locus; nearest representative reduces to -0.5
        assert!((v[0].abs() - 0.5).abs() < 1e-15);
        assert!((v[1] + 0.1).abs() < 1e-15);
        let d = m.distance(&Point::new(&[0.0, 0.0]), &Point::new(&[0.5, 0.0])).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
    }

    #[test]
    fn warped_exp_matches_refined_rk4() {
        let m = warped();
        let p = Point::new(&[0.0, 0.0]);
        let v = Vector::from_slice(&[0.1, 0.1]);
        let q = m.exp_map(&p, &v).unwrap();
        let steps = m.step_count(&v, p.coords());
        let (fine, _) = m.integrate_geodesic(p.coords(), &v, 10 * steps).unwrap();
        let diff = chart_difference(&q, &Point::from_vector(fine)).max_abs();
        assert!(diff < 1e-8, "diff {diff}");
    }

    #[test]
    fn fd_christoffels_match_analytic() {
        let m = warped();
        let fd = m.clone().without_metric_derivative();
        let x = Vector::from_slice(&[0.37, 0.11]);
        let a = m.christoffel(&x);
        let b = fd.christoffel(&x);
        for k in 0..2 {
            assert!((a[k] - b[k]).max_abs() < 1e-9);
        }
    }

    #[test]
    fn warped_log_exp_roundtrip() {
        use rand::{Rng, SeedableRng};
        let m = warped();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut worst: f64 = 0.0;
        let mut count = 0;
        while count < 100 {
            let p = Point::new(&[rng.gen(), rng.gen()]);
            let d = Vector::from_slice(&[rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)]);
            let q = p.shifted(&d);
            if m.distance_lower_bound(&p, &q) > 0.2 {
                continue;
            }
            let Ok(dist) = m.distance(&p, &q) else { continue };
            if dist >= 0.2 {
                continue;
            }
            let v = m.log_map(&p, &q).unwrap();
            let back = m.exp_map(&p, &v).unwrap();
            worst = worst.max(chart_difference(&q, &back).max_abs());
            count += 1;
        }
        assert!(worst < 1e-8, "worst {worst}");
    }

    #[test]
    fn energy_conserved_along_geodesic() {
        let m = warped();
        let p = Point::new(&[0.13, 0.4]);
        let v = Vector::from_slice(&[0.2, -0.15]);
        let path = m.geodesic_path(&p, &v, 200).unwrap();
        let e0 = m.metric_at(&path[0].0).form(&path[0].1, &path[0].1).sqrt();
        for (x, xd) in &path {
            let e = m.metric_at(x).form(xd, xd).sqrt();
            assert!(((e - e0) / e0).abs() < 1e-8);
        }
    }

    #[test]
    fn down_frame_trivial_cases() {
        let f = ManifoldModel::flat(2);
        let d = f.down_frame(&Point::new(&[0.1, 0.2]), &Point::new(&[0.15, 0.3])).unwrap();
        assert!((d - Mat::identity(2)).max_abs() == 0.0);
        let m = warped();
        let p = Point::new(&[0.3, 0.6]);
        let d = m.down_frame(&p, &p).unwrap();
        assert!((d - m.frame(&p)).max_abs() < 1e-9);
    }

    #[test]
    fn frame_roundtrip() {
        let m = ManifoldModel::skew_frame(2, 0.4).unwrap();
        let p = Point::new(&[0.4, 0.1]);
        let t = TangentVector::new(p, Vector::from_slice(&[0.3, -0.2]));
        let f = t.frame_components(&m);
        let back = TangentVector::from_frame_components(&m, p, &f);
        assert!((back.v - t.v).max_abs() < 1e-12);
    }
}

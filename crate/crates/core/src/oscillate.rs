//! Oscillating functions and tensors built from fiber data, and the two-scale
//! diagnostics that measure their limits on a ladder of scales.
//!
//! `f^eps(q) = sum_j psi_j(q) f[p_j, v_j(q)]` with `v_j(q)` the frame
//! components of `exp_{p_j}^{-1}(q) / eps`. Only net points with
//! `psi_j(q) > 0` contribute.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HomogError, Result};
use crate::fiber::{normalized_integral, FiberGrid, ScalarFiberField, TensorFiberField, VectorFiberField};
use crate::geometry::{grid_point, ManifoldModel, Point};
use crate::linalg::{loglog_slope, pairwise_sum, Mat, Vector};
use crate::nets::{build_net_for_scale, Net, NetAlignment};
use crate::partition::{PartitionConfig, PartitionOfUnity};

const CHUNK: usize = 4096;

/// `eps` must sit well inside the transition width `delta = eps^alpha`.
pub fn check_scale_order(pou: &PartitionOfUnity) -> Result<()> {
    let (eps, width) = (pou.eps(), pou.delta());
    if eps > width / 2.0 {
        return Err(HomogError::ScaleOrderViolated { eps, width });
    }
    Ok(())
}

/// One net point contributing at `q`.
#[derive(Clone, Copy, Debug)]
pub struct Contribution {
    pub j: usize,
    pub psi: f64,
    /// `d psi_j(q)` in chart components; zero unless differentials were requested.
    pub dpsi: Vector,
    /// Frame components of `exp_{p_j}^{-1}(q) / eps`, not reduced mod 1.
    pub v: Vector,
    /// Down frame `e_i^down(p_j; q)` as columns, chart components.
    pub down: Mat,
}

/// Contributions at `q`. `differentials` requests `d psi_j`; `down` requests
/// the down frames (otherwise the frame at `p_j` is stored).
pub fn contributions(
    pou: &PartitionOfUnity,
    q: &Point,
    differentials: bool,
    down: bool,
    buf: &mut Vec<usize>,
) -> Result<Vec<Contribution>> {
    let model = pou.model();
    let n = model.dim();
    let eps = pou.eps();
    let raw: Vec<(usize, f64, Vector)> = if differentials {
        pou.samples_with(q, buf)?.into_iter().map(|s| (s.j, s.value, s.differential)).collect()
    } else {
        pou.values_with(q, buf)?.into_iter().map(|(j, v)| (j, v, Vector::zeros(n))).collect()
    };
    raw.into_iter()
        .map(|(j, psi, dpsi)| {
            let pj = pou.net().point(j);
            let log = model.log_map(pj, q)?;
            let e = model.frame(pj);
            let v = e.inverse().expect("frame invertible").mul_vec(&log) * (1.0 / eps);
            let d = if down { model.down_frame_from_log(pj, &log)? } else { e };
            Ok(Contribution { j, psi, dpsi, v, down: d })
        })
        .collect()
}

/// `f^eps` for a scalar fiber field.
#[derive(Clone)]
pub struct OscillatingField<'a> {
    pub field: ScalarFiberField,
    pub pou: &'a PartitionOfUnity,
}

impl<'a> OscillatingField<'a> {
    pub fn new(field: ScalarFiberField, pou: &'a PartitionOfUnity) -> Result<Self> {
        check_scale_order(pou)?;
        Ok(Self { field, pou })
    }

    pub fn value(&self, q: &Point, buf: &mut Vec<usize>) -> Result<f64> {
        let cs = contributions(self.pou, q, false, false, buf)?;
        Ok(cs.iter().map(|c| c.psi * self.field.eval(self.pou.net().point(c.j).coords(), &c.v)).sum())
    }

    /// `eps * d(f^eps)` and `(d_v f)^eps` pushed to `q`, both as chart covectors.
    ///
    /// The second is `sum_j psi_j D_j^{-T} d_v f`, which is the covector of
    /// `(grad_v f)^eps` when the down frame is an isometry.
    pub fn scaled_differential(&self, q: &Point, buf: &mut Vec<usize>) -> Result<(Vector, Vector)> {
        if !self.field.has_derivative() {
            return Err(HomogError::InvalidConfig("field needs an exact fiber derivative".into()));
        }
        let model = self.pou.model();
        let eps = self.pou.eps();
        let cs = contributions(self.pou, q, true, !model.is_flat(), buf)?;
        let n = model.dim();
        let mut total = Vector::zeros(n);
        let mut fiber = Vector::zeros(n);
        for c in &cs {
            let x = self.pou.net().point(c.j).coords();
            let f = self.field.eval(x, &c.v);
            let dv = self.field.dv(x, &c.v).expect("checked");
            let dinv_t = c.down.inverse().expect("down frame invertible").transpose();
            let pulled = dinv_t.mul_vec(&dv);
            total = total + c.dpsi * (eps * f) + pulled * c.psi;
            fiber = fiber + pulled * c.psi;
        }
        Ok((total, fiber))
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum TensorMode {
    /// Coefficients against the global frame at `q`.
    Coords,
    /// Coefficients against the down frames of each net point.
    #[default]
    Pullback,
}

/// `A^eps` as a chart endomorphism field.
#[derive(Clone)]
pub struct OscillatingTensor<'a> {
    pub field: TensorFiberField,
    pub pou: &'a PartitionOfUnity,
    pub mode: TensorMode,
    pub symmetrized: bool,
}

impl<'a> OscillatingTensor<'a> {
    pub fn new(field: TensorFiberField, pou: &'a PartitionOfUnity, mode: TensorMode, symmetrized: bool) -> Result<Self> {
        check_scale_order(pou)?;
        Ok(Self { field, pou, mode, symmetrized })
    }

    pub fn chart_endomorphism(&self, q: &Point, buf: &mut Vec<usize>) -> Result<Mat> {
        let model = self.pou.model();
        let pull = self.mode == TensorMode::Pullback && !model.is_flat();
        let cs = contributions(self.pou, q, false, pull, buf)?;
        let n = model.dim();
        let mut out = Mat::zeros(n);
        let eq = model.frame(q);
        let eq_inv = eq.inverse().expect("frame invertible");
        for c in &cs {
            let a = self.field.eval(self.pou.net().point(c.j).coords(), &c.v);
            let m = match self.mode {
                TensorMode::Coords => eq * a * eq_inv,
                TensorMode::Pullback => c.down * a * c.down.inverse().expect("down frame invertible"),
            };
            out = out + m.scale(c.psi);
        }
        if self.symmetrized {
            let g = model.metric(q);
            out = crate::fiber::symmetrize(&out, &g);
        }
        Ok(out)
    }
}

/// `X^eps = sum_j psi_j D_j X[p_j, v_j]` in chart components.
#[derive(Clone)]
pub struct OscillatingVector<'a> {
    pub field: VectorFiberField,
    pub pou: &'a PartitionOfUnity,
}

impl<'a> OscillatingVector<'a> {
    pub fn new(field: VectorFiberField, pou: &'a PartitionOfUnity) -> Result<Self> {
        check_scale_order(pou)?;
        Ok(Self { field, pou })
    }

    pub fn value(&self, q: &Point, buf: &mut Vec<usize>) -> Result<Vector> {
        let model = self.pou.model();
        let cs = contributions(self.pou, q, false, !model.is_flat(), buf)?;
        let mut out = Vector::zeros(model.dim());
        for c in &cs {
            let x = self.field.eval(self.pou.net().point(c.j).coords(), &c.v);
            out = out + c.down.mul_vec(&x) * c.psi;
        }
        Ok(out)
    }

    /// `X^eps(q)` together with `h^eps(q)` for `h = div^v X`.
    pub fn value_and_divergence(&self, q: &Point, buf: &mut Vec<usize>) -> Result<(Vector, f64)> {
        let model = self.pou.model();
        let cs = contributions(self.pou, q, false, !model.is_flat(), buf)?;
        let mut out = Vector::zeros(model.dim());
        let mut div = 0.0;
        for c in &cs {
            let p = self.pou.net().point(c.j).coords();
            out = out + c.down.mul_vec(&self.field.eval(p, &c.v)) * c.psi;
            let h = self
                .field
                .divergence(p, &c.v)
                .ok_or_else(|| HomogError::InvalidConfig("vector field needs a closed-form divergence".into()))?;
            div += c.psi * h;
        }
        Ok((out, div))
    }
}

/// Midpoint rule on `m^n` cell-centred points with the volume density.
pub fn integrate_base<F>(model: &ManifoldModel, m: usize, f: F) -> Result<f64>
where
    F: Fn(&Point, &mut Vec<usize>) -> Result<f64> + Sync,
{
    let n = model.dim();
    let total = m.pow(n as u32);
    let cell = (1.0 / m as f64).powi(n as i32);
    let parts: Vec<f64> = (0..total.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut buf = Vec::new();
            let mut vals = Vec::with_capacity(CHUNK);
            for idx in c * CHUNK..((c + 1) * CHUNK).min(total) {
                let x = grid_point(idx, m, n);
                vals.push(f(&Point::from_vector(x), &mut buf)? * model.volume_density(&x) * cell);
            }
            Ok(pairwise_sum(&vals))
        })
        .collect::<Result<_>>()?;
    Ok(pairwise_sum(&parts))
}

/// Largest value of `f` over the cell-centred grid.
pub fn sup_base<F>(model: &ManifoldModel, m: usize, f: F) -> Result<f64>
where
    F: Fn(&Point, &mut Vec<usize>) -> Result<f64> + Sync,
{
    let n = model.dim();
    let total = m.pow(n as u32);
    let parts: Vec<f64> = (0..total.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut buf = Vec::new();
            let mut best: f64 = 0.0;
            for idx in c * CHUNK..((c + 1) * CHUNK).min(total) {
                best = best.max(f(&Point::from_vector(grid_point(idx, m, n)), &mut buf)?);
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    Ok(parts.into_iter().fold(0.0, f64::max))
}

/// Quadrature resolution for scale `eps`: at least 256 and at least `per_eps / eps` points per axis.
pub fn quadrature_points(eps: f64, per_eps: f64) -> usize {
    let m = (per_eps / eps).ceil() as usize;
    m.max(256)
}

/// Partitions for each scale of a ladder.
#[derive(Clone, Debug)]
pub struct Ladder {
    pub model: ManifoldModel,
    pub partitions: Vec<PartitionOfUnity>,
}

impl Ladder {
    pub fn build(
        model: &ManifoldModel,
        eps_list: &[f64],
        beta: f64,
        cfg: PartitionConfig,
        seed: u64,
        alignment: NetAlignment,
    ) -> Result<Self> {
        let mut partitions = Vec::with_capacity(eps_list.len());
        for &eps in eps_list {
            let net = build_net_for_scale(model, eps, beta, seed, alignment)?;
            let pou = PartitionOfUnity::new(model, net, eps, cfg)?;
            check_scale_order(&pou)?;
            partitions.push(pou);
        }
        Ok(Self { model: model.clone(), partitions })
    }

    pub fn eps(&self) -> Vec<f64> {
        self.partitions.iter().map(|p| p.eps()).collect()
    }
}

/// Measured values against targets over a ladder.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LadderReport {
    pub suite: String,
    pub case: String,
    pub eps: Vec<f64>,
    pub measured: Vec<f64>,
    pub target: Vec<f64>,
    pub error: Vec<f64>,
    /// `error / scale`, with the scale stated per diagnostic.
    pub relative: Vec<f64>,
    pub slope: f64,
    /// Errors strictly decrease along the ladder.
    pub decreasing: bool,
    pub passed: bool,
    pub note: String,
}

impl LadderReport {
    fn finish(mut self, scale: f64) -> Self {
        self.error = self.measured.iter().zip(&self.target).map(|(m, t)| (m - t).abs()).collect();
        self.relative = self.error.iter().map(|e| e / scale).collect();
        self.decreasing = decreasing_above_floor(&self.error, ROUNDOFF_FLOOR * scale.max(f64::MIN_POSITIVE));
        self.slope = loglog_slope(&self.eps, &self.error);
        self
    }

    /// Relative error at the finest scale.
    pub fn final_relative(&self) -> f64 {
        *self.relative.last().unwrap_or(&f64::NAN)
    }
}

pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Errors at or below this multiple of the diagnostic's scale are roundoff:
/// lattice-aligned nets reproduce the classical oscillation exactly.
pub const ROUNDOFF_FLOOR: f64 = 1e-12;

/// Each step strictly decreases, unless the later error is already at the floor.
pub fn decreasing_above_floor(v: &[f64], floor: f64) -> bool {
    v.windows(2).all(|w| w[1] < w[0] || w[1] <= floor)
}

/// `int f^eps dvol` against `oint f`. Relative errors use `(oint |f|^2)^{1/2}`.
pub fn riemann_lebesgue_check(ladder: &Ladder, f: &ScalarFiberField, case: &str, tol: f64) -> Result<LadderReport> {
    let model = &ladder.model;
    let grid = FiberGrid::new(model.dim(), 16);
    let target = normalized_integral(model, 256, &grid, f);
    let norm = normalized_integral(model, 256, &grid, &f.product(f)).sqrt();
    let mut r = LadderReport { suite: "rl".into(), case: case.into(), ..Default::default() };
    for pou in &ladder.partitions {
        let osc = OscillatingField::new(f.clone(), pou)?;
        let m = quadrature_points(pou.eps(), 4.0);
        r.measured.push(integrate_base(model, m, |q, b| osc.value(q, b))?);
        r.eps.push(pou.eps());
        r.target.push(target);
    }
    let mut r = r.finish(norm);
    r.passed = r.decreasing && r.final_relative() < tol;
    Ok(r)
}

/// `int |f^eps|^2 dvol` against `oint |f|^2`, relative to the target.
pub fn admissibility_check(ladder: &Ladder, f: &ScalarFiberField, case: &str, tol: f64) -> Result<LadderReport> {
    let model = &ladder.model;
    let grid = FiberGrid::new(model.dim(), 16);
    let target = normalized_integral(model, 256, &grid, &f.product(f));
    let mut r = LadderReport { suite: "admissible".into(), case: case.into(), ..Default::default() };
    for pou in &ladder.partitions {
        let osc = OscillatingField::new(f.clone(), pou)?;
        let m = quadrature_points(pou.eps(), 4.0);
        r.measured.push(integrate_base(model, m, |q, b| osc.value(q, b).map(|v| v * v))?);
        r.eps.push(pou.eps());
        r.target.push(target);
    }
    let mut r = r.finish(target.abs());
    let bound = r.measured.iter().map(|m| m / target).fold(0.0, f64::max);
    r.note = format!("max ratio to target {bound:.4}");
    r.passed = r.decreasing && r.final_relative() < tol;
    Ok(r)
}

/// `d(eps) = |int f^eps g^eps - int (fg)^eps|`; the log-log slope must reach `(alpha - beta) - 0.2`.
pub fn algebra_check(ladder: &Ladder, f: &ScalarFiberField, g: &ScalarFiberField, case: &str) -> Result<LadderReport> {
    let model = &ladder.model;
    let fg = f.product(g);
    let mut r = LadderReport { suite: "algebra".into(), case: case.into(), ..Default::default() };
    let mut expo = 0.0;
    for pou in &ladder.partitions {
        let (of, og, ofg) = (
            OscillatingField::new(f.clone(), pou)?,
            OscillatingField::new(g.clone(), pou)?,
            OscillatingField::new(fg.clone(), pou)?,
        );
        let m = quadrature_points(pou.eps(), 4.0);
        let d = integrate_base(model, m, |q, b| Ok(of.value(q, b)? * og.value(q, b)? - ofg.value(q, b)?))?;
        r.measured.push(d.abs());
        r.target.push(0.0);
        r.eps.push(pou.eps());
        expo = pou.alpha() - pou.beta();
    }
    let mut r = r.finish(1.0);
    let exact_zero = r.error.iter().all(|&e| e <= ROUNDOFF_FLOOR);
    r.passed = exact_zero || (r.decreasing && r.slope >= expo - 0.2);
    r.note = format!("required slope >= {:.3}", expo - 0.2);
    Ok(r)
}

/// `sup |eps d(f^eps) - (d_v f)^eps|_g` on a grid of `per_eps / eps` points per axis.
pub fn gradient_commutator_check(ladder: &Ladder, f: &ScalarFiberField, case: &str) -> Result<LadderReport> {
    let model = &ladder.model;
    let mut r = LadderReport { suite: "gradcomm".into(), case: case.into(), ..Default::default() };
    let mut alpha = 0.0;
    for pou in &ladder.partitions {
        let osc = OscillatingField::new(f.clone(), pou)?;
        let m = quadrature_points(pou.eps(), 2.0);
        let e = sup_base(model, m, |q, b| {
            let (a, c) = osc.scaled_differential(q, b)?;
            let gi = model.metric(q).inverse().expect("SPD");
            let d = a - c;
            Ok(gi.form(&d, &d).sqrt())
        })?;
        r.measured.push(e);
        r.target.push(0.0);
        r.eps.push(pou.eps());
        alpha = pou.alpha();
    }
    let mut r = r.finish(1.0);
    let need = (1.0 - alpha) - 0.2;
    let exact_zero = r.error.iter().all(|&e| e <= ROUNDOFF_FLOOR);
    r.passed = exact_zero || (r.decreasing && r.slope >= need && r.slope <= 1.0);
    r.note = format!("required slope in [{need:.3}, 1]");
    Ok(r)
}

/// Smooth periodic function on the base with its chart differential.
#[derive(Clone)]
pub struct BaseFunction {
    pub name: String,
    pub value: Arc<dyn Fn(&Vector) -> f64 + Send + Sync>,
    pub differential: Arc<dyn Fn(&Vector) -> Vector + Send + Sync>,
}

/// Vertical field presets for the integration-by-parts diagnostic.
pub fn byparts_field(name: &str) -> Result<VectorFiberField> {
    let tau = 2.0 * PI;
    Ok(match name {
        // lift of a base field, constant along the fibers
        "lift" => VectorFiberField::new(
            2,
            Arc::new(move |x, _| {
                Vector::from_slice(&[(tau * x[0]).cos() * (tau * x[1]).cos(), 0.5 * (tau * x[0]).sin()])
            }),
        )
        .with_divergence(Arc::new(|_, _| 0.0)),
        // a(p) * (d_2 s, -d_1 s) with s = cos(2 pi v_1) cos(2 pi v_2): vertically divergence free
        "solenoidal" => VectorFiberField::new(
            2,
            Arc::new(move |x, v| {
                let a = 1.0 + 0.5 * (tau * x[0]).sin();
                let (c1, s1, c2, s2) = ((tau * v[0]).cos(), (tau * v[0]).sin(), (tau * v[1]).cos(), (tau * v[1]).sin());
                Vector::from_slice(&[-a * tau * c1 * s2, a * tau * s1 * c2])
            }),
        )
        .with_divergence(Arc::new(|_, _| 0.0)),
        // a(p) sin(2 pi v_1) e_1 plus a lifted part, with div^v = 2 pi a cos(2 pi v_1)
        "mixed" => VectorFiberField::new(
            2,
            Arc::new(move |x, v| {
                let a = 1.0 + 0.5 * (tau * x[1]).cos();
                Vector::from_slice(&[a * (tau * v[0]).sin() + 0.3, 0.2 * (tau * x[0]).sin()])
            }),
        )
        .with_divergence(Arc::new(move |x, v| {
            let a = 1.0 + 0.5 * (tau * x[1]).cos();
            a * tau * (tau * v[0]).cos()
        })),
        _ => return Err(HomogError::InvalidConfig(format!("unknown vertical field '{name}'"))),
    })
}

pub fn base_function(name: &str) -> Result<BaseFunction> {
    let tau = 2.0 * PI;
    let (value, differential): (Arc<dyn Fn(&Vector) -> f64 + Send + Sync>, Arc<dyn Fn(&Vector) -> Vector + Send + Sync>) =
        match name {
            "sincos" => (
                Arc::new(move |x| (tau * x[0]).sin() * (tau * x[1]).cos() + 0.5),
                Arc::new(move |x| {
                    Vector::from_slice(&[
                        tau * (tau * x[0]).cos() * (tau * x[1]).cos(),
                        -tau * (tau * x[0]).sin() * (tau * x[1]).sin(),
                    ])
                }),
            ),
            "cosx" => (
                Arc::new(move |x| (tau * x[0]).cos() + 0.3 * (tau * x[1]).sin()),
                Arc::new(move |x| Vector::from_slice(&[-tau * (tau * x[0]).sin(), 0.3 * tau * (tau * x[1]).cos()])),
            ),
            "const" => (Arc::new(|_| 1.0), Arc::new(|_| Vector::zeros(2))),
            _ => return Err(HomogError::InvalidConfig(format!("unknown base function '{name}'"))),
        };
    Ok(BaseFunction { name: name.into(), value, differential })
}

/// `|-int <grad u, X^eps> - (1/eps) int u h^eps + int <grad u, X~>|` with
/// `h = div^v X` and `X~` the fiber average of `X` (lifted through the frame).
/// On a closed base the last term equals `-int u div X~`.
pub fn by_parts_residual(
    ladder: &Ladder,
    u: &BaseFunction,
    x: &VectorFiberField,
    case: &str,
    per_eps: f64,
) -> Result<LadderReport> {
    let model = &ladder.model;
    let n = model.dim();
    let grid = FiberGrid::new(n, 4);
    let xavg = |p: &Vector| -> Vector {
        let s = x.sample(&grid, p);
        let mut out = Vector::zeros(n);
        for i in 0..n {
            out.c[i] = grid.average(&s.iter().map(|v| v[i]).collect::<Vec<_>>());
        }
        model.frame_at(p).mul_vec(&out)
    };
    let mut r = LadderReport { suite: "byparts".into(), case: case.into(), ..Default::default() };
    for pou in &ladder.partitions {
        let eps = pou.eps();
        let osc = OscillatingVector::new(x.clone(), pou)?;
        let m = quadrature_points(eps, per_eps);
        let res = integrate_base(model, m, |q, b| {
            let (xe, he) = osc.value_and_divergence(q, b)?;
            let du = (u.differential)(q.coords());
            let uv = (u.value)(q.coords());
            Ok(-du.dot(&xe) - uv * he / eps + du.dot(&xavg(q.coords())))
        })?;
        r.measured.push(res.abs());
        r.target.push(0.0);
        r.eps.push(eps);
    }
    let mut r = r.finish(1.0);
    let k = r.error.len();
    r.passed = k >= 2 && r.error[k - 1] <= 0.5 * r.error[0];
    r.note = "finest residual at most half the coarsest".into();
    Ok(r)
}

/// `int phi f^eps g^eps` against `int phi mean_v (f g)`; with `shift`, `g` is
/// oscillated on the net translated by `shift * eps` (lattice nets), whose
/// limit is `mean_v f(v) g(v - shift)`.
pub fn compensated_pairing(
    ladder: &Ladder,
    f: &ScalarFiberField,
    g: &ScalarFiberField,
    phi: &BaseFunction,
    shift: Option<Vector>,
    case: &str,
    tol: f64,
) -> Result<LadderReport> {
    let model = &ladder.model;
    let grid = FiberGrid::new(model.dim(), 16);
    let limit: ScalarFiberField = match shift {
        None => f.product(g),
        Some(s) => {
            let (ff, gg) = (f.clone(), g.clone());
            ScalarFiberField::new(model.dim(), Arc::new(move |x, v| ff.eval(x, v) * gg.eval(x, &(*v - s))))
        }
    };
    let phi_v = phi.value.clone();
    let weighted = ScalarFiberField::new(model.dim(), Arc::new(move |x, v| phi_v(x) * limit.eval(x, v)));
    let target = normalized_integral(model, 256, &grid, &weighted);
    let scale = normalized_integral(model, 256, &grid, &f.product(f)).sqrt()
        * normalized_integral(model, 256, &grid, &g.product(g)).sqrt();
    let mut r = LadderReport { suite: "compensated".into(), case: case.into(), ..Default::default() };
    for pou in &ladder.partitions {
        let shifted;
        let gpou = match shift {
            None => pou,
            Some(s) => {
                shifted = shifted_partition(pou, &(s * pou.eps()))?;
                &shifted
            }
        };
        let of = OscillatingField::new(f.clone(), pou)?;
        let og = OscillatingField::new(g.clone(), gpou)?;
        let m = quadrature_points(pou.eps(), 4.0);
        let val = integrate_base(model, m, |q, b| Ok((phi.value)(q.coords()) * of.value(q, b)? * og.value(q, b)?))?;
        r.measured.push(val);
        r.target.push(target);
        r.eps.push(pou.eps());
    }
    let mut r = r.finish(scale);
    r.passed = r.decreasing && r.final_relative() < tol;
    Ok(r)
}

/// The same partition on the net translated by `shift` (chart components).
pub fn shifted_partition(pou: &PartitionOfUnity, shift: &Vector) -> Result<PartitionOfUnity> {
    let pts: Vec<Point> = pou.net().points().iter().map(|p| p.shifted(shift)).collect();
    let net = Net::from_points(pts, pou.net().separation());
    let cfg = PartitionConfig { alpha: pou.alpha(), profile: pou.step().profile, ..Default::default() };
    let dec = crate::nets::voronoi(pou.model(), &net)?;
    PartitionOfUnity::with_decomposition(pou.model(), net, dec, pou.eps(), pou.beta(), cfg)
}

/// `int |A_bar^eps - A^eps|` (Frobenius norm of chart endomorphisms) along the ladder.
pub fn tensor_mode_gap(ladder: &Ladder, a: &TensorFiberField, case: &str) -> Result<LadderReport> {
    let model = &ladder.model;
    let mut r = LadderReport { suite: "tensorgap".into(), case: case.into(), ..Default::default() };
    for pou in &ladder.partitions {
        let coords = OscillatingTensor::new(a.clone(), pou, TensorMode::Coords, false)?;
        let pull = OscillatingTensor::new(a.clone(), pou, TensorMode::Pullback, false)?;
        let m = quadrature_points(pou.eps(), 2.0);
        let gap = integrate_base(model, m, |q, b| {
            Ok((coords.chart_endomorphism(q, b)? - pull.chart_endomorphism(q, b)?).frobenius())
        })?;
        r.measured.push(gap);
        r.target.push(0.0);
        r.eps.push(pou.eps());
    }
    let mut r = r.finish(1.0);
    let exact_zero = r.error.iter().all(|&e| e <= ROUNDOFF_FLOOR);
    r.passed = exact_zero || r.decreasing;
    Ok(r)
}

/// Scalar fiber presets with exact derivatives.
pub fn scalar_preset(name: &str, dim: usize) -> Result<ScalarFiberField> {
    let tau = 2.0 * PI;
    let unit = move |i: usize, s: f64| {
        let mut v = Vector::zeros(dim);
        v.c[i] = s;
        v
    };
    Ok(match name {
        "sin" => ScalarFiberField::new(dim, Arc::new(move |_, v| (tau * v[0]).sin()))
            .with_derivative(Arc::new(move |_, v| unit(0, tau * (tau * v[0]).cos()))),
        "cos" => ScalarFiberField::new(dim, Arc::new(move |_, v| (tau * v[0]).cos()))
            .with_derivative(Arc::new(move |_, v| unit(0, -tau * (tau * v[0]).sin()))),
        "two-plus-cos" => ScalarFiberField::new(dim, Arc::new(move |_, v| 2.0 + (tau * v[0]).cos()))
            .with_derivative(Arc::new(move |_, v| unit(0, -tau * (tau * v[0]).sin()))),
        "one" => ScalarFiberField::constant(dim, 1.0),
        "h-sin" => ScalarFiberField::new(dim, Arc::new(move |x, v| (1.0 + 0.5 * (tau * x[0]).sin()) * (tau * v[0]).sin()))
            .with_derivative(Arc::new(move |x, v| unit(0, (1.0 + 0.5 * (tau * x[0]).sin()) * tau * (tau * v[0]).cos()))),
        "h" => ScalarFiberField::new(dim, Arc::new(move |x, _| 1.0 + 0.5 * (tau * x[0]).sin()))
            .with_derivative(Arc::new(move |_, _| Vector::zeros(dim))),
        _ => return Err(HomogError::InvalidConfig(format!("unknown fiber function '{name}'"))),
    })
}

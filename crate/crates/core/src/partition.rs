//! Smooth partition of unity subordinate to a Voronoi decomposition.
//!
//! `phi_ik(q) = H_delta(d_k(q) - d_i(q))`, `phi_i = prod_{k in I(i)} phi_ik`,
//! `psi_i = phi_i / sum_k phi_k`, with `delta = eps^alpha`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HomogError, Result};
use crate::geometry::{ManifoldModel, Point, TangentVector};
use crate::linalg::{pairwise_sum, Vector};
use crate::nets::{voronoi, Net, VoronoiDecomposition};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepProfile {
    /// `S(u) = 6u^5 - 15u^4 + 10u^3`, C^2 at the seams.
    #[default]
    Quintic,
    /// `e(u) / (e(u) + e(1-u))` with `e(u) = exp(-1/u)`, C^infinity.
    Mollified,
}

/// `H_delta(t)`: 0 for `t <= -delta`, 1 for `t >= delta`, increasing in between.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmoothStep {
    pub delta: f64,
    pub profile: StepProfile,
}

fn mollifier_e(u: f64) -> f64 {
    if u <= 0.0 {
        0.0
    } else {
        (-1.0 / u).exp()
    }
}

impl SmoothStep {
    pub fn new(delta: f64, profile: StepProfile) -> Self {
        Self { delta, profile }
    }

    fn unit(&self, t: f64) -> f64 {
        (t + self.delta) / (2.0 * self.delta)
    }

    pub fn value(&self, t: f64) -> f64 {
        let u = self.unit(t);
        if u <= 0.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return 1.0;
        }
        match self.profile {
            StepProfile::Quintic => u * u * u * (10.0 + u * (-15.0 + 6.0 * u)),
            StepProfile::Mollified => {
                let a = mollifier_e(u);
                a / (a + mollifier_e(1.0 - u))
            }
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let u = self.unit(t);
        if u <= 0.0 || u >= 1.0 {
            return 0.0;
        }
        let du = match self.profile {
            StepProfile::Quintic => 30.0 * u * u * (1.0 - u) * (1.0 - u),
            StepProfile::Mollified => {
                let (a, b) = (mollifier_e(u), mollifier_e(1.0 - u));
                let (da, db) = (a / (u * u), b / ((1.0 - u) * (1.0 - u)));
                (da * b + a * db) / ((a + b) * (a + b))
            }
        };
        du / (2.0 * self.delta)
    }

    /// Exact supremum of `H'`.
    pub fn sup_derivative(&self) -> f64 {
        match self.profile {
            StepProfile::Quintic => 15.0 / (16.0 * self.delta),
            StepProfile::Mollified => 1.0 / self.delta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub alpha: f64,
    #[serde(default)]
    pub profile: StepProfile,
    /// Smallest admissible `sum_k phi_k`. At a point whose nearest net point
    /// has `m` competitors within `delta` the sum is only bounded by `2^-m`.
    #[serde(default = "default_gap_floor")]
    pub gap_floor: f64,
}

fn default_gap_floor() -> f64 {
    1.0 / 64.0
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self { alpha: 0.8, profile: StepProfile::Quintic, gap_floor: default_gap_floor() }
    }
}

pub fn check_exponents(alpha: f64, beta: f64) -> Result<()> {
    if !(0.5 < beta && beta < alpha && alpha < 1.0) {
        return Err(HomogError::ExponentOrderViolated { alpha, beta });
    }
    Ok(())
}

/// One non-zero partition function at a point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsiSample {
    pub j: usize,
    pub value: f64,
    /// Differential `d psi_j` in chart components (a covector).
    pub differential: Vector,
}

#[derive(Clone, Debug)]
pub struct PartitionOfUnity {
    model: ManifoldModel,
    net: Net,
    decomposition: VoronoiDecomposition,
    eps: f64,
    alpha: f64,
    beta: f64,
    step: SmoothStep,
    gap_floor: f64,
    /// Sorted index sets `I(i)`.
    index_sets: Vec<Vec<usize>>,
}

struct Local {
    ids: Vec<usize>,
    dist: Vec<f64>,
}

impl PartitionOfUnity {
    /// Partition with `delta = eps^alpha` on a net of separation `eps^beta`.
    pub fn new(model: &ManifoldModel, net: Net, eps: f64, cfg: PartitionConfig) -> Result<Self> {
        let beta = net.beta().unwrap_or_else(|| net.separation().ln() / eps.ln());
        check_exponents(cfg.alpha, beta)?;
        let decomposition = voronoi(model, &net)?;
        Self::with_decomposition(model, net, decomposition, eps, beta, cfg)
    }

    pub fn with_decomposition(
        model: &ManifoldModel,
        net: Net,
        decomposition: VoronoiDecomposition,
        eps: f64,
        beta: f64,
        cfg: PartitionConfig,
    ) -> Result<Self> {
        check_exponents(cfg.alpha, beta)?;
        let delta = eps.powf(cfg.alpha);
        let r = net.separation();
        let reach = 2.0 * r + 2.0 * delta;
        let index_sets: Vec<Vec<usize>> = (0..net.len())
            .into_par_iter()
            .map_init(Vec::new, |buf, i| {
                let pi = net.point(i);
                let mut set: Vec<usize> = decomposition.neighbours(i).to_vec();
                net.near(pi.coords(), model.chart_radius(reach), buf);
                for &k in buf.iter() {
                    if k == i || model.distance_lower_bound(pi, net.point(k)) > reach {
                        continue;
                    }
                    match model.distance(pi, net.point(k)) {
                        Ok(d) if d <= reach => set.push(k),
                        Ok(_) | Err(HomogError::RadiusExceeded { .. }) => {}
                        Err(e) => return Err(e),
                    }
                }
                set.sort_unstable();
                set.dedup();
                Ok(set)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            model: model.clone(),
            net,
            decomposition,
            eps,
            alpha: cfg.alpha,
            beta,
            step: SmoothStep::new(delta, cfg.profile),
            gap_floor: cfg.gap_floor,
            index_sets,
        })
    }

    pub fn model(&self) -> &ManifoldModel {
        &self.model
    }

    pub fn net(&self) -> &Net {
        &self.net
    }

    pub fn decomposition(&self) -> &VoronoiDecomposition {
        &self.decomposition
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn delta(&self) -> f64 {
        self.step.delta
    }

    pub fn step(&self) -> &SmoothStep {
        &self.step
    }

    pub fn index_set(&self, i: usize) -> &[usize] {
        &self.index_sets[i]
    }

    /// Radius outside of which `psi_j` vanishes.
    pub fn support_radius(&self) -> f64 {
        self.net.separation() + self.step.delta
    }

    fn local(&self, q: &Point, buf: &mut Vec<usize>) -> Result<Local> {
        let reach = self.net.separation() + 2.0 * self.step.delta;
        self.net.near(q.coords(), self.model.chart_radius(reach), buf);
        let mut ids = Vec::with_capacity(buf.len());
        let mut dist = Vec::with_capacity(buf.len());
        for &k in buf.iter() {
            let pk = self.net.point(k);
            if self.model.distance_lower_bound(pk, q) >= reach {
                continue;
            }
            let d = self.model.distance(pk, q)?;
            if d < reach {
                ids.push(k);
                dist.push(d);
            }
        }
        Ok(Local { ids, dist })
    }

    /// Unnormalized `phi_i` for every local `i`. On a covering net the
    /// nearest point lies in `I(i)` whenever `d_i >= sep + delta`, so no
    /// explicit radial cutoff is needed.
    fn phis(&self, loc: &Local) -> Vec<f64> {
        let delta = self.step.delta;
        loc.ids
            .iter()
            .enumerate()
            .map(|(a, &i)| {
                let di = loc.dist[a];
                let set = &self.index_sets[i];
                let mut prod = 1.0;
                for (b, &k) in loc.ids.iter().enumerate() {
                    let t = loc.dist[b] - di;
                    if b == a || t >= delta || set.binary_search(&k).is_err() {
                        continue;
                    }
                    prod *= self.step.value(t);
                    if prod == 0.0 {
                        break;
                    }
                }
                prod
            })
            .collect()
    }

    fn normalizer(&self, phis: &[f64]) -> Result<f64> {
        let s: f64 = phis.iter().sum();
        if s < self.gap_floor {
            return Err(HomogError::PartitionGap { value: s });
        }
        Ok(s)
    }

    /// `sum_k phi_k(q)`, the normalizing denominator.
    pub fn denominator(&self, q: &Point) -> Result<f64> {
        let mut buf = Vec::new();
        let loc = self.local(q, &mut buf)?;
        Ok(self.phis(&loc).iter().sum())
    }

    /// Non-zero `psi_j(q)` as `(j, value)`, sorted by `j`.
    pub fn values(&self, q: &Point) -> Result<Vec<(usize, f64)>> {
        let mut buf = Vec::new();
        self.values_with(q, &mut buf)
    }

    pub fn values_with(&self, q: &Point, buf: &mut Vec<usize>) -> Result<Vec<(usize, f64)>> {
        let loc = self.local(q, buf)?;
        let phis = self.phis(&loc);
        let s = self.normalizer(&phis)?;
        Ok(loc
            .ids
            .iter()
            .zip(&phis)
            .filter(|(_, &p)| p > 0.0)
            .map(|(&j, &p)| (j, p / s))
            .collect())
    }

    /// Non-zero `psi_j(q)` with their differentials.
    pub fn samples(&self, q: &Point) -> Result<Vec<PsiSample>> {
        let mut buf = Vec::new();
        self.samples_with(q, &mut buf)
    }

    pub fn samples_with(&self, q: &Point, buf: &mut Vec<usize>) -> Result<Vec<PsiSample>> {
        let n = self.model.dim();
        let loc = self.local(q, buf)?;
        let phis = self.phis(&loc);
        let s = self.normalizer(&phis)?;
        let delta = self.step.delta;
        let mut grads: Vec<Option<Vector>> = vec![None; loc.ids.len()];
        let ddist = |a: usize, grads: &mut Vec<Option<Vector>>| -> Result<Vector> {
            if let Some(g) = grads[a] {
                return Ok(g);
            }
            let (_, w, _) = self.model.distance_with_differential(self.net.point(loc.ids[a]), q)?;
            grads[a] = Some(w);
            Ok(w)
        };
        let mut dphi = vec![Vector::zeros(n); loc.ids.len()];
        for (a, &i) in loc.ids.iter().enumerate() {
            if phis[a] == 0.0 {
                continue;
            }
            let di = loc.dist[a];
            let set = &self.index_sets[i];
            // factors strictly inside the transition band
            let mut active: Vec<(usize, f64, f64)> = Vec::new();
            for (b, &k) in loc.ids.iter().enumerate() {
                let t = loc.dist[b] - di;
                if b == a || t >= delta || set.binary_search(&k).is_err() {
                    continue;
                }
                active.push((b, self.step.value(t), self.step.derivative(t)));
            }
            for (c, &(b, _, dh)) in active.iter().enumerate() {
                if dh == 0.0 {
                    continue;
                }
                let mut others = 1.0;
                for (c2, &(_, h2, _)) in active.iter().enumerate() {
                    if c2 != c {
                        others *= h2;
                    }
                }
                let g = ddist(b, &mut grads)? - ddist(a, &mut grads)?;
                dphi[a] = dphi[a] + g * (others * dh);
            }
        }
        let mut total = Vector::zeros(n);
        for g in &dphi {
            total = total + *g;
        }
        let mut out = Vec::new();
        for (a, &j) in loc.ids.iter().enumerate() {
            if phis[a] == 0.0 {
                continue;
            }
            let value = phis[a] / s;
            let differential = (dphi[a] - total * value) * (1.0 / s);
            out.push(PsiSample { j, value, differential });
        }
        Ok(out)
    }

    pub fn value(&self, j: usize, q: &Point) -> Result<f64> {
        Ok(self.values(q)?.into_iter().find(|e| e.0 == j).map_or(0.0, |e| e.1))
    }

    /// Gradient vector `grad psi_j = G^{-1} d psi_j`.
    pub fn gradient(&self, j: usize, q: &Point) -> Result<TangentVector> {
        let n = self.model.dim();
        let d = self.samples(q)?.into_iter().find(|e| e.j == j).map_or(Vector::zeros(n), |e| e.differential);
        let ginv = self.model.metric(q).inverse().expect("metric invertible");
        Ok(TangentVector::new(*q, ginv.mul_vec(&d)))
    }

    /// `q` lies in `D_j^-`, where `psi_j = 1`.
    pub fn in_inner(&self, j: usize, q: &Point) -> Result<bool> {
        let dj = self.model.distance(self.net.point(j), q)?;
        for &k in &self.index_sets[j] {
            if self.model.distance(self.net.point(k), q)? - dj < self.step.delta {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// `q` lies in `D_j^+`, outside of which `psi_j = 0`.
    pub fn in_outer(&self, j: usize, q: &Point) -> Result<bool> {
        let dj = self.model.distance(self.net.point(j), q)?;
        if dj >= self.support_radius() {
            return Ok(false);
        }
        for &k in &self.index_sets[j] {
            if self.model.distance(self.net.point(k), q)? - dj <= -self.step.delta {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionDiagnostics {
    pub eps: f64,
    pub alpha: f64,
    pub beta: f64,
    pub delta: f64,
    pub points: usize,
    pub grid: usize,
    pub max_normalization_error: f64,
    pub min_denominator: f64,
    pub sup_gradient: f64,
    pub sup_gradient_scaled: f64,
    pub max_gradient_support_volume: f64,
    pub sum_gradient_support_volume: f64,
    pub union_gradient_support_volume: f64,
    pub max_transition_multiplicity: usize,
    pub product_violations: usize,
    pub square_violations: usize,
}

/// Grid diagnostics with `m` cell-centred samples per axis.
pub fn partition_diagnostics(pou: &PartitionOfUnity, m: usize) -> Result<PartitionDiagnostics> {
    let model = pou.model();
    let n = model.dim();
    let total = m.pow(n as u32);
    let h = 1.0 / m as f64;
    let cell = h.powi(n as i32);
    let jn = pou.net().len();
    const CHUNK: usize = 4096;
    #[derive(Default)]
    struct Acc {
        norm_err: f64,
        min_den: f64,
        sup_grad: f64,
        per_j: Vec<f64>,
        union: Vec<f64>,
        multiplicity: usize,
        prod_viol: usize,
        sq_viol: usize,
    }
    let chunks: Vec<Acc> = (0..total.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = Acc { per_j: vec![0.0; jn], min_den: f64::INFINITY, ..Default::default() };
            let mut buf = Vec::new();
            for idx in c * CHUNK..((c + 1) * CHUNK).min(total) {
                let x = crate::geometry::grid_point(idx, m, n);
                let q = Point::from_vector(x);
                let w = model.volume_density(&x) * cell;
                acc.min_den = acc.min_den.min(pou.denominator(&q)?);
                let s = pou.samples_with(&q, &mut buf)?;
                let sum: f64 = s.iter().map(|e| e.value).sum();
                acc.norm_err = acc.norm_err.max((sum - 1.0).abs());
                let ginv = model.metric(&q).inverse().expect("metric invertible");
                let mut any = false;
                let mut mult = 0;
                for e in &s {
                    let nonzero = e.differential.max_abs() > 0.0;
                    if nonzero {
                        any = true;
                        acc.per_j[e.j] += w;
                        let g = ginv.form(&e.differential, &e.differential).max(0.0).sqrt();
                        acc.sup_grad = acc.sup_grad.max(g);
                    }
                    if e.value > 0.0 && e.value < 1.0 {
                        mult += 1;
                    }
                    if !nonzero && e.value > 0.0 && e.value < 1.0 {
                        acc.sq_viol += 1;
                    }
                    if !nonzero && e.value > 0.0 && s.iter().any(|o| o.j != e.j && o.value > 0.0) {
                        acc.prod_viol += 1;
                    }
                }
                acc.multiplicity = acc.multiplicity.max(mult);
                if any {
                    acc.union.push(w);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut per_j = vec![0.0; jn];
    let mut union = Vec::new();
    let mut d = PartitionDiagnostics {
        eps: pou.eps(),
        alpha: pou.alpha(),
        beta: pou.beta(),
        delta: pou.delta(),
        points: jn,
        grid: m,
        min_denominator: f64::INFINITY,
        ..Default::default()
    };
    for a in chunks {
        d.max_normalization_error = d.max_normalization_error.max(a.norm_err);
        d.min_denominator = d.min_denominator.min(a.min_den);
        d.sup_gradient = d.sup_gradient.max(a.sup_grad);
        d.max_transition_multiplicity = d.max_transition_multiplicity.max(a.multiplicity);
        d.product_violations += a.prod_viol;
        d.square_violations += a.sq_viol;
        for (t, v) in per_j.iter_mut().zip(&a.per_j) {
            *t += v;
        }
        union.push(pairwise_sum(&a.union));
    }
    d.sup_gradient_scaled = d.sup_gradient * pou.eps().powf(pou.alpha());
    d.max_gradient_support_volume = per_j.iter().cloned().fold(0.0, f64::max);
    d.sum_gradient_support_volume = pairwise_sum(&per_j);
    d.union_gradient_support_volume = pairwise_sum(&union);
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quintic_step_endpoints_and_slope() {
        let h = SmoothStep::new(0.1, StepProfile::Quintic);
        assert_eq!(h.value(-0.1), 0.0);
        assert_eq!(h.value(0.1), 1.0);
        assert!((h.value(0.0) - 0.5).abs() < 1e-15);
        assert!((h.derivative(0.0) - 15.0 / 16.0 / 0.1).abs() < 1e-12);
        assert!(h.sup_derivative() <= 2.0 / 0.1);
    }

    #[test]
    fn mollified_step_is_monotone_and_bounded() {
        let h = SmoothStep::new(0.2, StepProfile::Mollified);
        let mut prev = 0.0;
        let mut sup: f64 = 0.0;
        for i in 0..=4000 {
            let t = -0.25 + 0.5 * i as f64 / 4000.0;
            let v = h.value(t);
            assert!(v >= prev);
            prev = v;
            sup = sup.max(h.derivative(t));
        }
        assert!((sup - h.sup_derivative()).abs() < 1e-6 * h.sup_derivative());
    }

    #[test]
    fn exponent_guard() {
        assert!(check_exponents(0.8, 0.6).is_ok());
        assert!(matches!(check_exponents(0.6, 0.8), Err(HomogError::ExponentOrderViolated { .. })));
        assert!(check_exponents(0.8, 0.5).is_err());
    }
}

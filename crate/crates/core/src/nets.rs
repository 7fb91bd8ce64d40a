//! Maximal separated nets, nearest-point (Voronoi) labelling and the
//! geometric diagnostics of the slow-variable discretization.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HomogError, Result};
use crate::geometry::{chart_difference, vertex_point, ManifoldModel, Point};
use crate::linalg::{Mat, Vector};

/// How net points are placed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetAlignment {
    /// Greedy farthest-point insertion over a jittered candidate grid.
    #[default]
    Free,
    /// Tensor lattice with every point on `eps Z^n` (flat models, identity frame).
    Lattice,
    /// Near-equilateral triangular lattice fitted to the torus (flat 2D models).
    Hex,
}

/// Uniform periodic bins over the chart for neighbour queries.
#[derive(Clone, Debug)]
pub struct NetIndex {
    dim: usize,
    bins: usize,
    cells: Vec<Vec<usize>>,
}

impl NetIndex {
    pub fn new(dim: usize, bin_size: f64) -> Self {
        let bins = ((1.0 / bin_size).floor() as usize).clamp(1, 512);
        let total = bins.pow(dim as u32);
        Self { dim, bins, cells: vec![Vec::new(); total] }
    }

    fn bin_of(&self, x: &Vector) -> usize {
        let mut idx = 0;
        let mut stride = 1;
        for i in 0..self.dim {
            let b = ((x.c[i] * self.bins as f64) as usize).min(self.bins - 1);
            idx += b * stride;
            stride *= self.bins;
        }
        idx
    }

    pub fn insert(&mut self, j: usize, p: &Point) {
        let b = self.bin_of(p.coords());
        self.cells[b].push(j);
    }

    /// Indices whose chart displacement from `x` may be below `r` in every axis.
    pub fn query(&self, x: &Vector, r: f64, out: &mut Vec<usize>) {
        out.clear();
        let nb = self.bins as i64;
        let mut axes: Vec<Vec<usize>> = Vec::with_capacity(self.dim);
        for i in 0..self.dim {
            let lo = ((x.c[i] - r) * nb as f64).floor() as i64;
            let hi = ((x.c[i] + r) * nb as f64).floor() as i64;
            if hi - lo + 1 >= nb {
                axes.push((0..self.bins).collect());
            } else {
                axes.push((lo..=hi).map(|b| b.rem_euclid(nb) as usize).collect());
            }
        }
        let mut counters = vec![0usize; self.dim];
        loop {
            let mut idx = 0;
            let mut stride = 1;
            for i in 0..self.dim {
                idx += axes[i][counters[i]] * stride;
                stride *= self.bins;
            }
            out.extend_from_slice(&self.cells[idx]);
            let mut k = 0;
            loop {
                if k == self.dim {
                    out.sort_unstable();
                    return;
                }
                counters[k] += 1;
                if counters[k] < axes[k].len() {
                    break;
                }
                counters[k] = 0;
                k += 1;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Net {
    points: Vec<Point>,
    separation: f64,
    seed: u64,
    epsilon: Option<f64>,
    beta: Option<f64>,
    alignment: NetAlignment,
    index: NetIndex,
}

impl Net {
    /// Wrap explicit points. Separation and covering are not validated.
    pub fn from_points(points: Vec<Point>, separation: f64) -> Self {
        let dim = points.first().map(|p| p.dim()).unwrap_or(2);
        let mut index = NetIndex::new(dim, separation.max(1e-3));
        for (j, p) in points.iter().enumerate() {
            index.insert(j, p);
        }
        Self { points, separation, seed: 0, epsilon: None, beta: None, alignment: NetAlignment::Free, index }
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, j: usize) -> &Point {
        &self.points[j]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn separation(&self) -> f64 {
        self.separation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.epsilon
    }

    pub fn beta(&self) -> Option<f64> {
        self.beta
    }

    pub fn alignment(&self) -> NetAlignment {
        self.alignment
    }

    /// Net points whose chart displacement from `x` is at most `r` per axis (superset).
    pub fn near(&self, x: &Vector, chart_r: f64, out: &mut Vec<usize>) {
        self.index.query(x, chart_r, out);
    }

    fn push(&mut self, p: Point) {
        let j = self.points.len();
        self.index.insert(j, &p);
        self.points.push(p);
    }
}

/// Distance from `q` to the nearest net point among those whose chart lower
/// bound is below `cap`; returns `cap` if none is closer.
fn nearest_distance(model: &ManifoldModel, net: &Net, q: &Point, cap: f64, buf: &mut Vec<usize>) -> Result<f64> {
    net.near(q.coords(), model.chart_radius(cap), buf);
    let mut best = cap;
    for &j in buf.iter() {
        let p = net.point(j);
        if model.distance_lower_bound(p, q) >= best {
            continue;
        }
        match model.distance(p, q) {
            Ok(d) => best = best.min(d),
            Err(HomogError::RadiusExceeded { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(best)
}

/// Largest admissible separation: a third of the injectivity floor, or the
/// floor itself on flat models where nearest-representative distances are exact.
pub fn separation_limit(model: &ManifoldModel) -> f64 {
    if model.is_flat() {
        model.injectivity_floor()
    } else {
        model.injectivity_floor() / 3.0
    }
}

/// Greedy farthest-point net with separation `sep` and covering radius at most `sep`.
pub fn build_net(model: &ManifoldModel, sep: f64, seed: u64) -> Result<Net> {
    let limit = separation_limit(model);
    if !(sep > 0.0 && sep < limit) {
        return Err(HomogError::SeparationTooLarge { separation: sep, limit });
    }
    let n = model.dim();
    let (_, lmax) = model.metric_bounds();
    let m = (8.0 * lmax.sqrt() / sep).ceil() as usize;
    let h = 1.0 / m as f64;
    let total = m.pow(n as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cands: Vec<Point> = (0..total)
        .map(|idx| {
            let mut x = vertex_point(idx, m, n);
            for i in 0..n {
                x.c[i] += (0.5 + rng.gen_range(-0.25..0.25)) * h;
            }
            Point::from_vector(x)
        })
        .collect();
    let cap = if model.is_flat() {
        0.9 * model.injectivity_floor()
    } else {
        (3.0 * sep).min(0.9 * model.injectivity_floor())
    };
    let mut dmin = vec![cap; total];
    let mut net = Net::from_points(Vec::new(), sep);
    net.index = NetIndex::new(n, sep);
    net.seed = seed;
    let mut next = rng.gen_range(0..total);
    loop {
        let p = cands[next];
        net.push(p);
        let updates: Vec<(usize, f64)> = dmin
            .par_iter()
            .enumerate()
            .filter_map(|(c, &cur)| {
                if model.distance_lower_bound(&p, &cands[c]) >= cur {
                    return None;
                }
                match model.distance(&p, &cands[c]) {
                    Ok(d) if d < cur => Some(Ok((c, d))),
                    Ok(_) | Err(HomogError::RadiusExceeded { .. }) => None,
                    Err(e) => Some(Err(e)),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        for (c, d) in updates {
            dmin[c] = d;
        }
        let mut best = 0usize;
        for c in 1..total {
            if dmin[c] > dmin[best] {
                best = c;
            }
        }
        if dmin[best] < sep {
            break;
        }
        next = best;
    }
    // Continuum covering: cells whose candidate is within the Lipschitz
    // margin of `sep` are bisected until certified or a point is inserted.
    let radius_g = |hh: f64| lmax.sqrt() * hh * (n as f64).sqrt();
    let mut buf = Vec::new();
    for idx in 0..total {
        if dmin[idx] < sep - radius_g(h) {
            continue;
        }
        let lo = vertex_point(idx, m, n);
        refine_cover(model, &mut net, lo, h, sep, 0, &radius_g, &mut buf)?;
    }
    Ok(net)
}

#[allow(clippy::too_many_arguments)]
fn refine_cover(
    model: &ManifoldModel,
    net: &mut Net,
    lo: Vector,
    h: f64,
    sep: f64,
    depth: usize,
    radius_g: &dyn Fn(f64) -> f64,
    buf: &mut Vec<usize>,
) -> Result<()> {
    let n = model.dim();
    let mut centre = lo;
    for i in 0..n {
        centre.c[i] += 0.5 * h;
    }
    let q = Point::from_vector(centre);
    let d = nearest_distance(model, net, &q, 2.0 * sep, buf)?;
    if d >= sep {
        net.push(q);
        return Ok(());
    }
    // half-diagonal of the box in g-length
    if d < sep - 0.5 * radius_g(h) || depth >= 24 {
        return Ok(());
    }
    for corner in 0..(1usize << n) {
        let mut sub = lo;
        for i in 0..n {
            if corner >> i & 1 == 1 {
                sub.c[i] += 0.5 * h;
            }
        }
        refine_cover(model, net, sub, 0.5 * h, sep, depth + 1, radius_g, buf)?;
    }
    Ok(())
}

/// Net at scale `eps^beta` with the requested alignment.
pub fn build_net_for_scale(
    model: &ManifoldModel,
    eps: f64,
    beta: f64,
    seed: u64,
    alignment: NetAlignment,
) -> Result<Net> {
    let sep = eps.powf(beta);
    let mut net = match alignment {
        NetAlignment::Free => build_net(model, sep, seed)?,
        NetAlignment::Lattice => lattice_net(model, eps, sep)?,
        NetAlignment::Hex => hex_net(model, sep, seed)?,
    };
    net.epsilon = Some(eps);
    net.beta = Some(beta);
    net.seed = seed;
    Ok(net)
}

fn require_euclidean(model: &ManifoldModel, what: &str) -> Result<()> {
    let n = model.dim();
    let origin = Point::new(&vec![0.0; n]);
    if !model.is_flat() || (model.metric(&origin) - Mat::identity(n)).max_abs() > 0.0 {
        return Err(HomogError::InvalidConfig(format!("{what} nets need the flat metric")));
    }
    Ok(())
}

/// Triangular lattice with `m` points per row and an even number `k` of rows,
/// shifted by a seeded random offset. Separation at least `sep`, covering
/// radius (the triangle circumradius) at most `sep`.
pub fn hex_net(model: &ManifoldModel, sep: f64, seed: u64) -> Result<Net> {
    require_euclidean(model, "hexagonal")?;
    if model.dim() != 2 {
        return Err(HomogError::InvalidConfig("hexagonal nets are two-dimensional".into()));
    }
    let limit = separation_limit(model);
    if !(sep > 0.0 && sep < limit) {
        return Err(HomogError::SeparationTooLarge { separation: sep, limit });
    }
    // Densest fit whose legs stay within 20% of the base, so every scale sees
    // the same near-equilateral shape; least skewed otherwise.
    let mut dense: Option<(usize, f64, usize, usize)> = None;
    let mut best: Option<(f64, usize, usize)> = None;
    let m_max = (1.0 / sep).floor() as usize;
    for m in (m_max / 2).max(1)..=m_max {
        let sx = 1.0 / m as f64;
        for k in (2..=4 * m_max + 2).step_by(2) {
            let sy = 1.0 / k as f64;
            let leg = (0.25 * sx * sx + sy * sy).sqrt();
            let circum = leg * leg / (2.0 * sy);
            if sx.min(leg) < sep || circum > sep {
                continue;
            }
            let skew = (leg / sx - 1.0).abs();
            if best.map_or(true, |b| skew < b.0) {
                best = Some((skew, m, k));
            }
            if skew <= 0.2 && dense.map_or(true, |d| m * k > d.0 || (m * k == d.0 && skew < d.1)) {
                dense = Some((m * k, skew, m, k));
            }
        }
    }
    if let Some((_, skew, m, k)) = dense {
        best = Some((skew, m, k));
    }
    let (_, m, k) = best.ok_or_else(|| HomogError::InvalidConfig(format!("no triangular lattice fits separation {sep}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ox, oy): (f64, f64) = (rng.gen(), rng.gen());
    let mut points = Vec::with_capacity(m * k);
    for r in 0..k {
        for c in 0..m {
            let x = (c as f64 + 0.5 * (r % 2) as f64) / m as f64 + ox;
            let y = r as f64 / k as f64 + oy;
            points.push(Point::new(&[x, y]));
        }
    }
    let mut net = Net::from_points(points, sep);
    net.alignment = NetAlignment::Hex;
    net.seed = seed;
    Ok(net)
}

/// Tensor-product net with all points on `eps Z^n`, gaps of `floor` or `ceil`
/// lattice steps, separation at least `sep` and covering radius at most `sep`.
pub fn lattice_net(model: &ManifoldModel, eps: f64, sep: f64) -> Result<Net> {
    require_euclidean(model, "lattice")?;
    let n = model.dim();
    let origin = Point::new(&vec![0.0; n]);
    if (model.frame(&origin) - Mat::identity(n)).max_abs() > 0.0 {
        return Err(HomogError::InvalidConfig("lattice nets need the identity frame".into()));
    }
    let steps = (1.0 / eps).round();
    if (steps * eps - 1.0).abs() > 1e-9 {
        return Err(HomogError::InvalidConfig(format!("1/eps must be an integer for lattice nets (eps = {eps})")));
    }
    let steps = steps as usize;
    let limit = separation_limit(model);
    if sep >= limit {
        return Err(HomogError::SeparationTooLarge { separation: sep, limit });
    }
    let mut chosen = None;
    for m in 1..=steps {
        let pos: Vec<usize> = (0..m).map(|a| (a * steps + m / 2) / m).collect();
        let gaps: Vec<usize> = (0..m).map(|a| (pos[(a + 1) % m] + steps - pos[a]) % steps).map(|g| if g == 0 { steps } else { g }).collect();
        let gmin = *gaps.iter().min().unwrap() as f64 * eps;
        let gmax = *gaps.iter().max().unwrap() as f64 * eps;
        if gmax * (n as f64).sqrt() / 2.0 <= sep {
            if gmin < sep {
                return Err(HomogError::InvalidConfig(format!("no lattice net with separation {sep} at eps = {eps}")));
            }
            chosen = Some(pos);
            break;
        }
    }
    let pos = chosen.ok_or_else(|| HomogError::InvalidConfig("lattice net not found".into()))?;
    let m = pos.len();
    let total = m.pow(n as u32);
    let points = (0..total)
        .map(|idx| {
            let mut r = idx;
            let mut x = Vector::zeros(n);
            for i in 0..n {
                x.c[i] = pos[r % m] as f64 / steps as f64;
                r /= m;
            }
            Point::from_vector(x)
        })
        .collect();
    let mut net = Net::from_points(points, sep);
    net.alignment = NetAlignment::Lattice;
    net.epsilon = Some(eps);
    Ok(net)
}

/// Nearest net point to `q`, lowest index on ties.
pub fn voronoi_assign(model: &ManifoldModel, net: &Net, q: &Point) -> Result<(usize, f64)> {
    let mut buf = Vec::new();
    voronoi_assign_with(model, net, q, &mut buf)
}

fn voronoi_assign_with(model: &ManifoldModel, net: &Net, q: &Point, buf: &mut Vec<usize>) -> Result<(usize, f64)> {
    if net.is_empty() {
        return Err(HomogError::InvalidConfig("empty net".into()));
    }
    let mut r = net.separation() * 1.000001;
    loop {
        net.near(q.coords(), model.chart_radius(r), buf);
        let mut best: Option<(usize, f64)> = None;
        for &j in buf.iter() {
            let p = net.point(j);
            if let Some((_, bd)) = best {
                if model.distance_lower_bound(p, q) > bd {
                    continue;
                }
            }
            let d = match model.distance(p, q) {
                Ok(d) => d,
                Err(HomogError::RadiusExceeded { .. }) => continue,
                Err(e) => return Err(e),
            };
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        if let Some((j, d)) = best {
            if d <= r {
                return Ok((j, d));
            }
        }
        if model.chart_radius(r) >= 1.0 {
            return best.ok_or(HomogError::InvalidConfig("no net point in reach".into()));
        }
        r *= 2.0;
    }
}

/// Nearest-point labels on a vertex grid together with the adjacency graph.
#[derive(Clone, Debug)]
pub struct VoronoiDecomposition {
    /// Grid points per axis.
    pub m: usize,
    pub labels: Vec<usize>,
    /// Distance from each grid point to its net point.
    pub dist: Vec<f64>,
    neighbours: Vec<Vec<usize>>,
}

impl VoronoiDecomposition {
    pub fn grid_spacing(&self) -> f64 {
        1.0 / self.m as f64
    }

    pub fn neighbours(&self, i: usize) -> &[usize] {
        &self.neighbours[i]
    }

    pub fn pairs(&self) -> BTreeSet<(usize, usize)> {
        let mut s = BTreeSet::new();
        for (i, nb) in self.neighbours.iter().enumerate() {
            for &k in nb {
                if i < k {
                    s.insert((i, k));
                }
            }
        }
        s
    }

    pub fn are_adjacent(&self, i: usize, k: usize) -> bool {
        self.neighbours[i].binary_search(&k).is_ok()
    }
}

/// Label a grid of g-spacing at most `sep/8` and extract adjacency.
pub fn voronoi(model: &ManifoldModel, net: &Net) -> Result<VoronoiDecomposition> {
    let (_, lmax) = model.metric_bounds();
    let m = (8.0 * lmax.sqrt() / net.separation()).ceil().max(8.0) as usize;
    voronoi_with_grid(model, net, m)
}

pub fn voronoi_with_grid(model: &ManifoldModel, net: &Net, m: usize) -> Result<VoronoiDecomposition> {
    let n = model.dim();
    let total = m.pow(n as u32);
    let assigned: Vec<(usize, f64)> = (0..total)
        .into_par_iter()
        .map_init(Vec::new, |buf, idx| {
            voronoi_assign_with(model, net, &Point::from_vector(vertex_point(idx, m, n)), buf)
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = assigned.iter().map(|a| a.0).collect();
    let dist: Vec<f64> = assigned.iter().map(|a| a.1).collect();
    // candidate pairs with one witnessing grid edge each
    let mut cand: std::collections::BTreeMap<(usize, usize), Vec<(usize, usize)>> = Default::default();
    let mut stride = 1;
    for _ in 0..n {
        for idx in 0..total {
            let coord = (idx / stride) % m;
            let nb = if coord + 1 == m { idx + stride - m * stride } else { idx + stride };
            let (a, b) = (labels[idx], labels[nb]);
            if a != b {
                let key = (a.min(b), a.max(b));
                let e = cand.entry(key).or_default();
                if e.len() < 8 {
                    e.push((idx, nb));
                }
            }
        }
        stride *= m;
    }
    let entries: Vec<((usize, usize), Vec<(usize, usize)>)> = cand.into_iter().collect();
    let confirmed: Vec<Option<(usize, usize)>> = entries
        .par_iter()
        .map_init(Vec::new, |buf, ((i, k), edges)| {
            for &(a, b) in edges {
                let pa = vertex_point(a, m, n);
                let pb = vertex_point(b, m, n);
                if witness(model, net, *i, *k, &pa, &pb, buf)? {
                    return Ok(Some((*i, *k)));
                }
            }
            Ok(None)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut neighbours = vec![Vec::new(); net.len()];
    for (i, k) in confirmed.into_iter().flatten() {
        neighbours[i].push(k);
        neighbours[k].push(i);
    }
    for nb in &mut neighbours {
        nb.sort_unstable();
        nb.dedup();
    }
    Ok(VoronoiDecomposition { m, labels, dist, neighbours })
}

/// Bisect the grid edge for the point equidistant from `p_i` and `p_k` and
/// check no other net point is strictly closer there.
fn witness(
    model: &ManifoldModel,
    net: &Net,
    i: usize,
    k: usize,
    a: &Vector,
    b: &Vector,
    buf: &mut Vec<usize>,
) -> Result<bool> {
    let pa = Point::from_vector(*a);
    let step = chart_difference(&pa, &Point::from_vector(*b));
    let f = |t: f64| -> Result<f64> {
        let q = pa.shifted(&(step * t));
        Ok(model.distance(net.point(i), &q)? - model.distance(net.point(k), &q)?)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut flo = f(lo)?;
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid)?;
        if (fm <= 0.0) == (flo <= 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    let q = pa.shifted(&(step * (0.5 * (lo + hi))));
    let di = model.distance(net.point(i), &q)?;
    let tol = 1e-9 * net.separation();
    net.near(q.coords(), model.chart_radius(di + tol), buf);
    for &m in buf.iter() {
        if m == i || m == k || model.distance_lower_bound(net.point(m), &q) >= di - tol {
            continue;
        }
        if model.distance(net.point(m), &q)? < di - tol {
            return Ok(false);
        }
    }
    Ok(true)
}

/// `max_q #{i : d(q, p_i) <= sep}` over the decomposition grid.
pub fn overlap_constant(model: &ManifoldModel, net: &Net, vor: &VoronoiDecomposition) -> Result<usize> {
    let n = model.dim();
    let m = vor.m;
    let sep = net.separation();
    let counts: Vec<usize> = (0..m.pow(n as u32))
        .into_par_iter()
        .map_init(Vec::new, |buf, idx| {
            let q = Point::from_vector(vertex_point(idx, m, n));
            net.near(q.coords(), model.chart_radius(sep), buf);
            let mut c = 0;
            for &j in buf.iter() {
                let p = net.point(j);
                if model.distance_lower_bound(p, &q) > sep {
                    continue;
                }
                if model.distance(p, &q)? <= sep {
                    c += 1;
                }
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(counts.into_iter().max().unwrap_or(0))
}

/// Smallest angle at `p_i` of triangles formed by mutually adjacent cells;
/// `pi` when no such triangle exists.
pub fn min_adjacent_angle(model: &ManifoldModel, net: &Net, vor: &VoronoiDecomposition) -> Result<f64> {
    let mut best = PI;
    for i in 0..net.len() {
        let nb = vor.neighbours(i);
        if nb.len() < 2 {
            continue;
        }
        let pi = net.point(i);
        let g = model.metric(pi);
        let logs: Vec<Vector> = nb.iter().map(|&j| model.log_map(pi, net.point(j))).collect::<Result<_>>()?;
        for a in 0..nb.len() {
            for b in a + 1..nb.len() {
                if !vor.are_adjacent(nb[a], nb[b]) {
                    continue;
                }
                let (u, v) = (&logs[a], &logs[b]);
                let c = g.form(u, v) / (g.form(u, u) * g.form(v, v)).sqrt();
                best = best.min(c.clamp(-1.0, 1.0).acos());
            }
        }
    }
    Ok(best)
}

/// Signed distance surrogate to the boundary of `D_i`: positive inside.
/// Exact for flat metrics (distance to the nearest bisector), first order otherwise.
pub fn boundary_offset(model: &ManifoldModel, net: &Net, vor: &VoronoiDecomposition, i: usize, q: &Point) -> Result<f64> {
    let pi = net.point(i);
    let di = model.distance(pi, q)?;
    let mut s = f64::INFINITY;
    for &k in vor.neighbours(i) {
        let pk = net.point(k);
        let dk = model.distance(pk, q)?;
        let l = model.distance(pi, pk)?;
        s = s.min((dk * dk - di * di) / (2.0 * l));
    }
    Ok(s)
}

/// Volume of `{q : dist(q, boundary of D_i) < delta}` by a cell-centred grid
/// of spacing at most `delta / 8`.
pub fn boundary_tube_volume(model: &ManifoldModel, net: &Net, vor: &VoronoiDecomposition, i: usize, delta: f64) -> Result<f64> {
    let n = model.dim();
    let reach = model.chart_radius(net.separation() * 1.5 + delta);
    let (_, lmax) = model.metric_bounds();
    let h_target = delta / (8.0 * lmax.sqrt());
    let whole = reach >= 0.5;
    let width = if whole { 1.0 } else { 2.0 * reach };
    let k = (width / h_target).ceil() as usize;
    let h = width / k as f64;
    let base = if whole { Vector::zeros(n) } else { *net.point(i).coords() - Vector::from_slice(&vec![reach; n]) };
    let total = k.pow(n as u32);
    let vals: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let mut x = base;
            let mut r = idx;
            for a in 0..n {
                x.c[a] += ((r % k) as f64 + 0.5) * h;
                r /= k;
            }
            let q = Point::from_vector(x);
            let s = boundary_offset(model, net, vor, i, &q)?;
            Ok(if s.abs() < delta { model.volume_density(q.coords()) * h.powi(n as i32) } else { 0.0 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::linalg::pairwise_sum(&vals))
}

/// Minimum pairwise distance among net points (checked against `limit`).
pub fn min_pair_distance(model: &ManifoldModel, net: &Net) -> Result<f64> {
    let reach = 2.0 * net.separation();
    let per: Vec<f64> = (0..net.len())
        .into_par_iter()
        .map_init(Vec::new, |buf, i| {
            let p = net.point(i);
            net.near(p.coords(), model.chart_radius(reach), buf);
            let mut best = f64::INFINITY;
            for &j in buf.iter() {
                if j == i || model.distance_lower_bound(p, net.point(j)) >= best {
                    continue;
                }
                match model.distance(p, net.point(j)) {
                    Ok(d) => best = best.min(d),
                    Err(HomogError::RadiusExceeded { .. }) => {}
                    Err(e) => return Err(e),
                }
            }
            Ok(best)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().fold(f64::INFINITY, f64::min))
}

/// Largest distance from a sample to its nearest net point.
pub fn covering_radius(model: &ManifoldModel, net: &Net, samples: &[Point]) -> Result<f64> {
    let d: Vec<f64> = samples
        .par_iter()
        .map_init(Vec::new, |buf, q| voronoi_assign_with(model, net, q, buf).map(|a| a.1))
        .collect::<Result<Vec<_>>>()?;
    Ok(d.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NetDiagnostics {
    pub points: usize,
    pub separation: f64,
    pub min_pair_distance: f64,
    pub covering_radius: f64,
    pub overlap_constant: usize,
    pub min_adjacent_angle: f64,
    pub min_adjacent_distance: f64,
    pub max_adjacent_distance: f64,
    pub max_neighbours: usize,
}

pub fn net_diagnostics(model: &ManifoldModel, net: &Net, vor: &VoronoiDecomposition) -> Result<NetDiagnostics> {
    let mut dmin = f64::INFINITY;
    let mut dmax: f64 = 0.0;
    for (i, k) in vor.pairs() {
        let d = model.distance(net.point(i), net.point(k))?;
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    Ok(NetDiagnostics {
        points: net.len(),
        separation: net.separation(),
        min_pair_distance: min_pair_distance(model, net)?,
        covering_radius: vor.dist.iter().cloned().fold(0.0, f64::max),
        overlap_constant: overlap_constant(model, net, vor)?,
        min_adjacent_angle: min_adjacent_angle(model, net, vor)?,
        min_adjacent_distance: dmin,
        max_adjacent_distance: dmax,
        max_neighbours: (0..net.len()).map(|i| vor.neighbours(i).len()).max().unwrap_or(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assign_ties_to_lowest_index() {
        let m = ManifoldModel::flat(2);
        let net = Net::from_points(vec![Point::new(&[0.0, 0.0]), Point::new(&[0.5, 0.0])], 0.5);
        assert_eq!(voronoi_assign(&m, &net, &Point::new(&[0.2, 0.0])).unwrap().0, 0);
        assert_eq!(voronoi_assign(&m, &net, &Point::new(&[0.25, 0.0])).unwrap().0, 0);
        assert_eq!(voronoi_assign(&m, &net, &Point::new(&[0.5, 0.0])).unwrap().0, 1);
    }

    #[test]
    fn index_query_wraps() {
        let mut idx = NetIndex::new(2, 0.1);
        idx.insert(0, &Point::new(&[0.99, 0.01]));
        let mut out = Vec::new();
        idx.query(&Vector::from_slice(&[0.01, 0.99]), 0.05, &mut out);
        assert_eq!(out, vec![0]);
    }

    #[test]
    fn lattice_net_sits_on_eps_lattice() {
        let m = ManifoldModel::flat(2);
        let eps: f64 = 0.01;
        let net = lattice_net(&m, eps, eps.powf(0.6)).unwrap();
        for p in net.points() {
            for &c in p.as_slice() {
                assert!((c / eps - (c / eps).round()).abs() < 1e-9);
            }
        }
        assert!(min_pair_distance(&m, &net).unwrap() >= eps.powf(0.6));
    }
}

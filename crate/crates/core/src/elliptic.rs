//! P1 finite elements for `-div(A grad u) = f`, `u = 0` on the boundary, on
//! chart domains of a 2-dimensional model.
//!
//! The triangulation is the union-jack split of a uniform square grid: cell
//! `(i, j)` is cut along the diagonal through `(i, j)` when `i + j` is even and
//! along the other diagonal otherwise. Both diagonals pass through the cell
//! centre, so every element quadrature point (edge midpoints) is one of five
//! per-cell points, and the stiffness is a 9-point stencil.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{HomogError, Result};
use crate::geometry::{ManifoldModel, Point};
use crate::linalg::{pairwise_sum, Mat, Vector};

/// Rows of cells assembled per parallel block.
const BLOCK_ROWS: usize = 64;
/// Fixed chunk length for reductions, independent of the thread count.
const CHUNK: usize = 8192;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub enum DomainPreset {
    /// `(lo, hi)^2` in the chart.
    Square { lo: f64, hi: f64 },
    /// The whole torus minus the closed geodesic ball of `radius` around `center`.
    PuncturedTorus { center: [f64; 2], radius: f64 },
}

impl DomainPreset {
    /// `square`, `square(lo,hi)`, `punctured`, `punctured(r)`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, args) = match s.find('(') {
            Some(i) => {
                let inner = s[i + 1..].trim_end_matches(')');
                let args: std::result::Result<Vec<f64>, _> = inner.split(',').map(|t| t.trim().parse::<f64>()).collect();
                let args = args.map_err(|_| HomogError::InvalidConfig(format!("bad domain arguments in '{s}'")))?;
                (&s[..i], args)
            }
            None => (s, vec![]),
        };
        match (name, args.as_slice()) {
            ("square", []) => Ok(Self::Square { lo: 0.0, hi: 1.0 }),
            ("square", [lo, hi]) if lo < hi && *lo >= 0.0 && *hi <= 1.0 => Ok(Self::Square { lo: *lo, hi: *hi }),
            ("punctured", []) => Ok(Self::PuncturedTorus { center: [0.5, 0.5], radius: 0.2 }),
            ("punctured", [r]) if *r > 0.0 && *r < 0.5 => Ok(Self::PuncturedTorus { center: [0.5, 0.5], radius: *r }),
            _ => Err(HomogError::InvalidConfig(format!("unknown domain preset '{s}'"))),
        }
    }
}

/// Structured node grid with a Dirichlet mask.
#[derive(Clone, Debug)]
pub struct Domain {
    pub preset: DomainPreset,
    /// Cells per axis.
    pub cells: usize,
    /// Nodes per axis (`cells + 1` on a square, `cells` on the torus).
    pub nodes: usize,
    pub periodic: bool,
    pub origin: f64,
    pub h: f64,
    pub dirichlet: Vec<bool>,
}

impl Domain {
    pub fn new(model: &ManifoldModel, preset: DomainPreset, cells: usize) -> Result<Self> {
        if model.dim() != 2 {
            return Err(HomogError::InvalidConfig("the finite element solver is 2-dimensional".into()));
        }
        if cells < 4 {
            return Err(HomogError::InvalidConfig("need at least 4 cells per axis".into()));
        }
        let d = match preset {
            DomainPreset::Square { lo, hi } => {
                let nodes = cells + 1;
                let mut dirichlet = vec![false; nodes * nodes];
                for j in 0..nodes {
                    for i in 0..nodes {
                        if i == 0 || j == 0 || i == cells || j == cells {
                            dirichlet[i + nodes * j] = true;
                        }
                    }
                }
                Self { preset, cells, nodes, periodic: false, origin: lo, h: (hi - lo) / cells as f64, dirichlet }
            }
            DomainPreset::PuncturedTorus { center, radius } => {
                let nodes = cells;
                let h = 1.0 / cells as f64;
                let c = Point::new(&center);
                let chart_r = model.chart_radius(radius);
                let mut dirichlet = vec![false; nodes * nodes];
                for j in 0..nodes {
                    for i in 0..nodes {
                        let q = Point::new(&[i as f64 * h, j as f64 * h]);
                        if model.distance_lower_bound(&c, &q) > radius {
                            continue;
                        }
                        let delta = crate::geometry::chart_difference(&c, &q);
                        if delta.norm() > chart_r + h {
                            continue;
                        }
                        dirichlet[i + nodes * j] = model.distance(&c, &q)? <= radius;
                    }
                }
                if !dirichlet.iter().any(|&b| b) {
                    return Err(HomogError::InvalidConfig("removed disk contains no grid node".into()));
                }
                Self { preset, cells, nodes, periodic: true, origin: 0.0, h, dirichlet }
            }
        };
        d.check_connected()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.nodes * self.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, idx: usize) -> Vector {
        let (i, j) = (idx % self.nodes, idx / self.nodes);
        Vector::from_slice(&[self.origin + i as f64 * self.h, self.origin + j as f64 * self.h])
    }

    pub fn free_count(&self) -> usize {
        self.dirichlet.iter().filter(|&&b| !b).count()
    }

    pub fn boundary_nodes(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.dirichlet[i]).collect()
    }

    fn neighbour(&self, i: usize, j: usize, dx: i64, dy: i64) -> Option<usize> {
        let n = self.nodes as i64;
        let (mut a, mut b) = (i as i64 + dx, j as i64 + dy);
        if self.periodic {
            a = a.rem_euclid(n);
            b = b.rem_euclid(n);
        } else if a < 0 || b < 0 || a >= n || b >= n {
            return None;
        }
        Some(a as usize + self.nodes * b as usize)
    }

    /// Free nodes form one component under grid adjacency.
    fn check_connected(&self) -> Result<()> {
        let total = self.free_count();
        let Some(start) = (0..self.len()).find(|&i| !self.dirichlet[i]) else {
            return Err(HomogError::InvalidConfig("domain has no interior nodes".into()));
        };
        let mut seen = vec![false; self.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut count = 0;
        while let Some(k) = stack.pop() {
            count += 1;
            let (i, j) = (k % self.nodes, k / self.nodes);
            for (dx, dy) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                if let Some(m) = self.neighbour(i, j, dx, dy) {
                    if !seen[m] && !self.dirichlet[m] {
                        seen[m] = true;
                        stack.push(m);
                    }
                }
            }
        }
        if count != total {
            return Err(HomogError::InvalidConfig("domain interior is not connected".into()));
        }
        Ok(())
    }

    /// Corner nodes of cell `(ci, cj)` in local order (0,0), (1,0), (0,1), (1,1).
    fn cell_nodes(&self, ci: usize, cj: usize) -> [usize; 4] {
        let w = |a: usize| if self.periodic { a % self.nodes } else { a };
        let (i1, j1) = (w(ci + 1), w(cj + 1));
        [ci + self.nodes * cj, i1 + self.nodes * cj, ci + self.nodes * j1, i1 + self.nodes * j1]
    }

    /// Quadrature points of a cell: lower, upper, left, right edge midpoints and the centre.
    fn cell_points(&self, ci: usize, cj: usize) -> [Vector; 5] {
        let h = self.h;
        let (x0, y0) = (self.origin + ci as f64 * h, self.origin + cj as f64 * h);
        let p = |a: f64, b: f64| Vector::from_slice(&[x0 + a * h, y0 + b * h]);
        [p(0.5, 0.0), p(0.5, 1.0), p(0.0, 0.5), p(1.0, 0.5), p(0.5, 0.5)]
    }

    /// Estimated solver memory in MB.
    pub fn memory_estimate_mb(&self) -> f64 {
        // stencils over all levels (factor 4/3) plus about ten work vectors
        self.len() as f64 * (9.0 * 8.0 * 4.0 / 3.0 + 10.0 * 8.0) / 1.048_576e6
    }
}

/// Triangles of a cell as local node triples `[a, b, c]` with the quadrature
/// point of edges `ab`, `bc`, `ca`.
fn cell_triangles(ci: usize, cj: usize) -> [([usize; 3], [usize; 3]); 2] {
    if (ci + cj) % 2 == 0 {
        [([0, 1, 3], [0, 3, 4]), ([0, 3, 2], [4, 1, 2])]
    } else {
        [([0, 1, 2], [0, 4, 2]), ([1, 3, 2], [3, 1, 4])]
    }
}

const LOCAL: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];

/// Gradients of the three barycentric functions in units of `1/h`.
fn triangle_gradients(t: &[usize; 3]) -> [Vector; 3] {
    let (a, b, c) = (LOCAL[t[0]], LOCAL[t[1]], LOCAL[t[2]]);
    let j = Mat::from_rows(&[&[b[0] - a[0], c[0] - a[0]], &[b[1] - a[1], c[1] - a[1]]]);
    let jit = j.inverse().expect("nondegenerate").transpose();
    let r = [[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]];
    [0, 1, 2].map(|k| jit.mul_vec(&Vector::from_slice(&r[k])))
}

/// Frame components to chart components: `E A E^{-1}`.
pub fn frame_to_chart(model: &ManifoldModel, x: &Vector, a: &Mat) -> Mat {
    let e = model.frame_at(x);
    e * *a * e.inverse().expect("frame invertible")
}

/// `K = A G^{-1} sqrt(det G)`, the matrix of the weak form acting on `du`.
fn weak_tensor(model: &ManifoldModel, x: &Vector, a: &Mat) -> Result<Mat> {
    let g = model.metric_at(x);
    let det = g.det();
    if det <= 0.0 {
        return Err(HomogError::SingularAssembly { element: 0 });
    }
    Ok((*a * g.inverse().expect("det > 0")).scale(det.sqrt()))
}

/// Assembled 9-point operator with the Dirichlet rows replaced by identity.
#[derive(Clone, Debug)]
pub struct Stiffness {
    pub nodes: usize,
    pub periodic: bool,
    pub a: Vec<[f64; 9]>,
    pub dirichlet: Vec<bool>,
    /// Smallest eigenvalue of the symmetric part of `K` seen during assembly.
    pub min_eig: f64,
    pub max_eig: f64,
}

#[inline]
fn stencil_slot(dx: i64, dy: i64) -> usize {
    ((dy + 1) * 3 + (dx + 1)) as usize
}

impl Stiffness {
    fn offset_index(&self, k: usize, s: usize) -> Option<usize> {
        let (dx, dy) = ((s % 3) as i64 - 1, (s / 3) as i64 - 1);
        let n = self.nodes as i64;
        let (i, j) = ((k % self.nodes) as i64 + dx, (k / self.nodes) as i64 + dy);
        if self.periodic {
            Some(i.rem_euclid(n) as usize + self.nodes * j.rem_euclid(n) as usize)
        } else if i < 0 || j < 0 || i >= n || j >= n {
            None
        } else {
            Some(i as usize + self.nodes * j as usize)
        }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    /// Neighbour indices along one axis for position `i`: `i - 1`, `i`, `i + 1`.
    #[inline]
    fn axis_neighbours(&self, i: usize) -> [Option<usize>; 3] {
        let n = self.nodes;
        if self.periodic {
            [Some((i + n - 1) % n), Some(i), Some((i + 1) % n)]
        } else {
            [i.checked_sub(1), Some(i), if i + 1 < n { Some(i + 1) } else { None }]
        }
    }

    #[inline]
    fn row_product(&self, k: usize, x: &[f64], skip_centre: bool) -> f64 {
        let n = self.nodes;
        let (i, j) = (k % n, k / n);
        if i > 0 && j > 0 && i + 1 < n && j + 1 < n {
            let row = &self.a[k];
            let (lo, hi) = (k - n, k + n);
            let centre = if skip_centre { 0.0 } else { row[4] * x[k] };
            return row[0] * x[lo - 1] + row[1] * x[lo] + row[2] * x[lo + 1]
                + row[3] * x[k - 1] + centre + row[5] * x[k + 1]
                + row[6] * x[hi - 1] + row[7] * x[hi] + row[8] * x[hi + 1];
        }
        let xs = self.axis_neighbours(i);
        let ys = self.axis_neighbours(j);
        let row = &self.a[k];
        let mut s = 0.0;
        for (dy, yj) in ys.iter().enumerate() {
            let Some(yj) = yj else { continue };
            for (dx, xi) in xs.iter().enumerate() {
                let slot = dy * 3 + dx;
                if skip_centre && slot == 4 {
                    continue;
                }
                let v = row[slot];
                if v != 0.0 {
                    if let Some(xi) = xi {
                        s += v * x[xi + n * yj];
                    }
                }
            }
        }
        s
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.par_chunks_mut(CHUNK).enumerate().for_each(|(c, out)| {
            for (t, yk) in out.iter_mut().enumerate() {
                *yk = self.row_product(c * CHUNK + t, x, false);
            }
        });
    }

    /// Largest entrywise asymmetry `|A_km - A_mk|`.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.len() {
            for s in 0..9 {
                if let Some(m) = self.offset_index(k, s) {
                    worst = worst.max((self.a[k][s] - self.a[m][8 - s]).abs());
                }
            }
        }
        worst
    }

    /// `x^T A x`.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let mut y = vec![0.0; x.len()];
        self.apply(x, &mut y);
        dot(x, &y)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let partial: Vec<f64> = a
        .par_chunks(CHUNK)
        .zip(b.par_chunks(CHUNK))
        .map(|(x, y)| {
            let p: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
            pairwise_sum(&p)
        })
        .collect();
    pairwise_sum(&partial)
}

/// Where the coefficient is sampled on each triangle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoefficientRule {
    /// Mean over the three edge midpoints, exact for quadratic coefficients.
    #[default]
    EdgeMidpoints,
    /// One point at the centroid of each triangle.
    Centroid,
    /// One point at the centre of each square cell, shared by its two triangles.
    CellCentre,
}

/// Assemble the stiffness for the chart endomorphism field `coef` and the load for `f`.
///
/// `coef(x)` returns `A` in chart components; the weak form is
/// `int <A grad u, grad phi>_g dvol = int f phi dvol`.
pub fn assemble<C, F>(model: &ManifoldModel, domain: &Domain, coef: C, f: F) -> Result<(Stiffness, Vec<f64>)>
where
    C: Fn(&Vector) -> Result<Mat> + Sync,
    F: Fn(&Vector) -> f64 + Sync,
{
    assemble_with(model, domain, coef, f, CoefficientRule::EdgeMidpoints)
}

/// As [`assemble`] with an explicit coefficient rule. The load always uses edge midpoints.
pub fn assemble_with<C, F>(
    model: &ManifoldModel,
    domain: &Domain,
    coef: C,
    f: F,
    rule: CoefficientRule,
) -> Result<(Stiffness, Vec<f64>)>
where
    C: Fn(&Vector) -> Result<Mat> + Sync,
    F: Fn(&Vector) -> f64 + Sync,
{
    let nc = domain.cells;
    let nn = domain.nodes;
    let mut a = vec![[0.0f64; 9]; nn * nn];
    let mut load = vec![0.0; nn * nn];
    let mut min_eig = f64::INFINITY;
    let mut max_eig: f64 = 0.0;
    let grads: Vec<[[Vector; 3]; 2]> = (0..2)
        .map(|parity| {
            let t = cell_triangles(parity, 0);
            [triangle_gradients(&t[0].0), triangle_gradients(&t[1].0)]
        })
        .collect();
    let area = 0.5 * domain.h * domain.h;

    type CellOut = ([usize; 4], [[f64; 4]; 4], [f64; 4]);
    let mut row0 = 0;
    while row0 < nc {
        let rows: Vec<usize> = (row0..(row0 + BLOCK_ROWS).min(nc)).collect();
        let block: Vec<Result<(Vec<CellOut>, f64, f64)>> = rows
            .par_iter()
            .map(|&cj| {
                let mut out = Vec::with_capacity(nc);
                let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
                for ci in 0..nc {
                    let pts = domain.cell_points(ci, cj);
                    let tris = cell_triangles(ci, cj);
                    let mut k = [Mat::zeros(2); 5];
                    let mut fw = [0.0; 5];
                    let mut sample = |x: &Vector| -> Result<Mat> {
                        let kq = weak_tensor(model, x, &coef(x)?)
                            .map_err(|_| HomogError::SingularAssembly { element: ci + nc * cj })?;
                        let e = kq.sym_part().sym_eigenvalues();
                        lo = lo.min(e[0]);
                        hi = hi.max(e[1]);
                        Ok(kq)
                    };
                    let mut kc = [Mat::zeros(2); 2];
                    for q in 0..5 {
                        if rule == CoefficientRule::EdgeMidpoints {
                            k[q] = sample(&pts[q])?;
                        }
                        fw[q] = f(&pts[q]) * model.volume_density(&pts[q]);
                    }
                    if rule == CoefficientRule::CellCentre {
                        kc = [sample(&pts[4])?; 2];
                    }
                    if rule == CoefficientRule::Centroid {
                        // pts[4] is the cell centre
                        for (t, (verts, _)) in tris.iter().enumerate() {
                            let mut x = pts[4];
                            for d in 0..2 {
                                let c = verts.iter().map(|&v| LOCAL[v][d]).sum::<f64>() / 3.0;
                                x.c[d] += (c - 0.5) * domain.h;
                            }
                            kc[t] = sample(&x)?;
                        }
                    }
                    let mut m = [[0.0; 4]; 4];
                    let mut l = [0.0; 4];
                    for (t, (verts, mids)) in tris.iter().enumerate() {
                        let kbar = match rule {
                            CoefficientRule::EdgeMidpoints => (k[mids[0]] + k[mids[1]] + k[mids[2]]).scale(1.0 / 3.0),
                            CoefficientRule::Centroid | CoefficientRule::CellCentre => kc[t],
                        };
                        let g = &grads[(ci + cj) % 2][t];
                        for r in 0..3 {
                            for c in 0..3 {
                                // row = test function, column = trial function
                                m[verts[r]][verts[c]] += 0.5 * kbar.form(&g[r], &g[c]);
                            }
                            // midpoints of the two edges incident to vertex r carry phi = 1/2
                            l[verts[r]] += area / 6.0 * (fw[mids[r]] + fw[mids[(r + 2) % 3]]);
                        }
                    }
                    out.push((domain.cell_nodes(ci, cj), m, l));
                }
                Ok((out, lo, hi))
            })
            .collect();
        for r in block {
            let (cells, lo, hi) = r?;
            min_eig = min_eig.min(lo);
            max_eig = max_eig.max(hi);
            for (ci, (nodes, m, l)) in cells.into_iter().enumerate() {
                let _ = ci;
                for r in 0..4 {
                    load[nodes[r]] += l[r];
                    for c in 0..4 {
                        let (dx, dy) = (
                            LOCAL[c][0] as i64 - LOCAL[r][0] as i64,
                            LOCAL[c][1] as i64 - LOCAL[r][1] as i64,
                        );
                        a[nodes[r]][stencil_slot(dx, dy)] += m[r][c];
                    }
                }
            }
        }
        row0 += BLOCK_ROWS;
    }
    if min_eig <= 0.0 {
        return Err(HomogError::NotElliptic { min_eig });
    }
    let mut st = Stiffness { nodes: nn, periodic: domain.periodic, a, dirichlet: domain.dirichlet.clone(), min_eig, max_eig };
    apply_dirichlet(&mut st);
    for (k, l) in load.iter_mut().enumerate() {
        if domain.dirichlet[k] {
            *l = 0.0;
        }
    }
    Ok((st, load))
}

fn apply_dirichlet(st: &mut Stiffness) {
    for k in 0..st.len() {
        if st.dirichlet[k] {
            st.a[k] = [0.0; 9];
            st.a[k][4] = 1.0;
            continue;
        }
        for s in 0..9 {
            if let Some(m) = st.offset_index(k, s) {
                if st.dirichlet[m] && s != 4 {
                    st.a[k][s] = 0.0;
                }
            }
        }
    }
}

/// One level of the multigrid hierarchy.
struct Level {
    op: Stiffness,
    cells: usize,
}

/// Galerkin multigrid with bilinear transfer and symmetric Gauss-Seidel.
pub struct Multigrid {
    levels: Vec<Level>,
    coarse_free: Vec<usize>,
    coarse_factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

/// Parents of fine index `i` in one axis with interpolation weights.
fn parents(i: usize, coarse_nodes: usize, periodic: bool) -> ([(usize, f64); 2], usize) {
    if i % 2 == 0 {
        ([(i / 2, 1.0), (0, 0.0)], 1)
    } else {
        let hi = (i + 1) / 2;
        let hi = if periodic { hi % coarse_nodes } else { hi };
        ([((i - 1) / 2, 0.5), (hi, 0.5)], 2)
    }
}

impl Multigrid {
    pub fn new(fine: &Stiffness, cells: usize) -> Result<Self> {
        let mut levels = vec![Level { op: fine.clone(), cells }];
        loop {
            let last = levels.last().expect("nonempty");
            let free = last.op.dirichlet.iter().filter(|&&d| !d).count();
            let c = last.cells;
            let can = c % 2 == 0 && (if last.op.periodic { c / 2 >= 4 } else { c / 2 >= 2 });
            if free <= 600 || !can {
                break;
            }
            let coarse = Self::coarsen(&last.op, c);
            levels.push(Level { op: coarse, cells: c / 2 });
        }
        let last = &levels.last().expect("nonempty").op;
        let coarse_free: Vec<usize> = (0..last.len()).filter(|&k| !last.dirichlet[k]).collect();
        if coarse_free.len() > 6000 {
            return Err(HomogError::InvalidConfig(format!(
                "grid does not coarsen far enough ({} coarse unknowns); use a cell count of the form c * 2^k",
                coarse_free.len()
            )));
        }
        let mut pos = vec![usize::MAX; last.len()];
        for (i, &k) in coarse_free.iter().enumerate() {
            pos[k] = i;
        }
        let nf = coarse_free.len();
        let mut dense = nalgebra::DMatrix::<f64>::zeros(nf, nf);
        for (i, &k) in coarse_free.iter().enumerate() {
            for s in 0..9 {
                if let Some(m) = last.offset_index(k, s) {
                    if pos[m] != usize::MAX {
                        dense[(i, pos[m])] += last.a[k][s];
                    }
                }
            }
        }
        let dense = (&dense + dense.transpose()) * 0.5;
        let coarse_factor = nalgebra::Cholesky::new(dense).ok_or(HomogError::SingularAssembly { element: 0 })?;
        Ok(Self { levels, coarse_free, coarse_factor })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    fn coarsen(fine: &Stiffness, cells: usize) -> Stiffness {
        let cc = cells / 2;
        let cn = if fine.periodic { cc } else { cc + 1 };
        let fnn = fine.nodes;
        let mut cdir = vec![false; cn * cn];
        for j in 0..cn {
            for i in 0..cn {
                cdir[i + cn * j] = fine.dirichlet[2 * i + fnn * 2 * j];
            }
        }
        let pw = |k: usize| -> ([(usize, f64); 4], usize) {
            let mut out = [(0, 0.0); 4];
            let mut len = 0;
            if fine.dirichlet[k] {
                return (out, 0);
            }
            let (px, nx) = parents(k % fnn, cn, fine.periodic);
            let (py, ny) = parents(k / fnn, cn, fine.periodic);
            for a in &px[..nx] {
                for b in &py[..ny] {
                    let c = a.0 + cn * b.0;
                    if !cdir[c] {
                        out[len] = (c, a.1 * b.1);
                        len += 1;
                    }
                }
            }
            (out, len)
        };
        let mut ca = vec![[0.0f64; 9]; cn * cn];
        let wrap = |d: i64| -> i64 {
            if fine.periodic {
                let n = cn as i64;
                let r = d.rem_euclid(n);
                if r > n / 2 { r - n } else { r }
            } else {
                d
            }
        };
        for k in 0..fine.len() {
            let (pk, nk) = pw(k);
            if nk == 0 {
                continue;
            }
            let pk = &pk[..nk];
            for s in 0..9 {
                let v = fine.a[k][s];
                if v == 0.0 {
                    continue;
                }
                let Some(m) = fine.offset_index(k, s) else { continue };
                let (pm, nm) = pw(m);
                for &(ci, wi) in pk {
                    for &(cj, wj) in &pm[..nm] {
                        let dx = wrap((cj % cn) as i64 - (ci % cn) as i64);
                        let dy = wrap((cj / cn) as i64 - (ci / cn) as i64);
                        ca[ci][stencil_slot(dx, dy)] += wi * v * wj;
                    }
                }
            }
        }
        for (k, row) in ca.iter_mut().enumerate() {
            if cdir[k] {
                *row = [0.0; 9];
                row[4] = 1.0;
            }
        }
        Stiffness { nodes: cn, periodic: fine.periodic, a: ca, dirichlet: cdir, min_eig: fine.min_eig, max_eig: fine.max_eig }
    }

    fn smooth(op: &Stiffness, b: &[f64], x: &mut [f64], forward: bool) {
        let n = op.len();
        let mut step = |k: usize| {
            x[k] = (b[k] - op.row_product(k, x, true)) / op.a[k][4];
        };
        if forward {
            (0..n).for_each(&mut step);
        } else {
            (0..n).rev().for_each(&mut step);
        }
    }

    fn restrict(fine: &Stiffness, r: &[f64], coarse: &Stiffness) -> Vec<f64> {
        let cn = coarse.nodes;
        let fnn = fine.nodes;
        let mut out = vec![0.0; cn * cn];
        for k in 0..fine.len() {
            if fine.dirichlet[k] || r[k] == 0.0 {
                continue;
            }
            let (px, nx) = parents(k % fnn, cn, fine.periodic);
            let (py, ny) = parents(k / fnn, cn, fine.periodic);
            for a in &px[..nx] {
                for b in &py[..ny] {
                    let c = a.0 + cn * b.0;
                    if !coarse.dirichlet[c] {
                        out[c] += a.1 * b.1 * r[k];
                    }
                }
            }
        }
        out
    }

    fn prolong_add(fine: &Stiffness, e: &[f64], coarse: &Stiffness, x: &mut [f64]) {
        let cn = coarse.nodes;
        let fnn = fine.nodes;
        for k in 0..fine.len() {
            if fine.dirichlet[k] {
                continue;
            }
            let (px, nx) = parents(k % fnn, cn, fine.periodic);
            let (py, ny) = parents(k / fnn, cn, fine.periodic);
            let mut s = 0.0;
            for a in &px[..nx] {
                for b in &py[..ny] {
                    let c = a.0 + cn * b.0;
                    if !coarse.dirichlet[c] {
                        s += a.1 * b.1 * e[c];
                    }
                }
            }
            x[k] += s;
        }
    }

    fn cycle(&self, l: usize, b: &[f64]) -> Vec<f64> {
        let op = &self.levels[l].op;
        if l + 1 == self.levels.len() {
            let rhs = nalgebra::DVector::from_iterator(self.coarse_free.len(), self.coarse_free.iter().map(|&k| b[k]));
            let sol = self.coarse_factor.solve(&rhs);
            let mut x = vec![0.0; op.len()];
            for (i, &k) in self.coarse_free.iter().enumerate() {
                x[k] = sol[i];
            }
            return x;
        }
        let mut x = vec![0.0; op.len()];
        Self::smooth(op, b, &mut x, true);
        let mut ax = vec![0.0; op.len()];
        op.apply(&x, &mut ax);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let coarse = &self.levels[l + 1].op;
        let rc = Self::restrict(op, &r, coarse);
        let ec = self.cycle(l + 1, &rc);
        Self::prolong_add(op, &ec, coarse, &mut x);
        Self::smooth(op, b, &mut x, false);
        x
    }

    /// One symmetric V-cycle applied to `b` from a zero initial guess.
    pub fn precondition(&self, b: &[f64]) -> Vec<f64> {
        self.cycle(0, b)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolverReport {
    pub iterations: usize,
    pub residual: f64,
    pub levels: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub memory_limit_mb: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 500, memory_limit_mb: 3072.0 }
    }
}

/// Nodal values, zero on Dirichlet nodes.
#[derive(Clone, Debug)]
pub struct DiscreteField {
    pub values: Vec<f64>,
}

/// Multigrid-preconditioned conjugate gradients to relative residual `cfg.tol`.
pub fn solve_system(st: &Stiffness, cells: usize, b: &[f64], cfg: &SolverConfig) -> Result<(DiscreteField, SolverReport)> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return Ok((DiscreteField { values: vec![0.0; n] }, SolverReport { iterations: 0, residual: 0.0, levels: 0 }));
    }
    let mg = Multigrid::new(st, cells)?;
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z = mg.precondition(&r);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=cfg.max_iter {
        st.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        x.par_iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.par_iter_mut().zip(&ap).for_each(|(ri, ai)| *ri -= alpha * ai);
        let rel = dot(&r, &r).sqrt() / bnorm;
        if rel < cfg.tol {
            return Ok((DiscreteField { values: x }, SolverReport { iterations: it, residual: rel, levels: mg.depth() }));
        }
        z = mg.precondition(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    Err(HomogError::NoConvergence { iterations: cfg.max_iter, residual: dot(&r, &r).sqrt() / bnorm })
}

/// Assemble and solve `-div(A grad u) = f` with `u = 0` on the boundary.
pub fn solve_dirichlet<C, F>(
    model: &ManifoldModel,
    domain: &Domain,
    coef: C,
    f: F,
    cfg: &SolverConfig,
) -> Result<(DiscreteField, SolverReport)>
where
    C: Fn(&Vector) -> Result<Mat> + Sync,
    F: Fn(&Vector) -> f64 + Sync,
{
    solve_dirichlet_with(model, domain, coef, f, CoefficientRule::EdgeMidpoints, cfg)
}

/// As [`solve_dirichlet`] with an explicit coefficient rule.
pub fn solve_dirichlet_with<C, F>(
    model: &ManifoldModel,
    domain: &Domain,
    coef: C,
    f: F,
    rule: CoefficientRule,
    cfg: &SolverConfig,
) -> Result<(DiscreteField, SolverReport)>
where
    C: Fn(&Vector) -> Result<Mat> + Sync,
    F: Fn(&Vector) -> f64 + Sync,
{
    check_memory(domain, cfg)?;
    let (st, b) = assemble_with(model, domain, coef, f, rule)?;
    solve_system(&st, domain.cells, &b, cfg)
}

pub fn check_memory(domain: &Domain, cfg: &SolverConfig) -> Result<()> {
    let need = domain.memory_estimate_mb();
    if need > cfg.memory_limit_mb {
        return Err(HomogError::MemoryGuard { needed_mb: need.ceil() as usize, limit_mb: cfg.memory_limit_mb as usize });
    }
    Ok(())
}

/// Oscillating coefficients must be resolved: `h <= eps / 8`.
pub fn check_resolution(h: f64, eps: f64) -> Result<()> {
    if h > eps / 8.0 * (1.0 + 1e-12) {
        return Err(HomogError::UnderResolved { h, eps });
    }
    Ok(())
}

/// Largest residual of the weak form against the nodal hats of free nodes.
pub fn galerkin_residual(st: &Stiffness, u: &DiscreteField, b: &[f64]) -> f64 {
    let mut au = vec![0.0; b.len()];
    st.apply(&u.values, &mut au);
    (0..b.len()).filter(|&k| !st.dirichlet[k]).map(|k| (au[k] - b[k]).abs()).fold(0.0, f64::max)
}

/// Edge-midpoint quadrature of `g(x, u(x), grad u)` over the domain, with
/// `grad u` the chart gradient on the element containing the point. The rule
/// is exact for piecewise quadratics.
pub fn integrate<G>(model: &ManifoldModel, domain: &Domain, u: &[f64], g: G) -> f64
where
    G: Fn(&Vector, f64, &Vector) -> f64 + Sync,
{
    integrate_many(model, domain, u, 1, |x, v, du, out| out[0] = g(x, v, du))[0]
}

/// [`integrate`] for `k` integrands in one pass; `g` writes the `k` values at a
/// quadrature point. Each result matches a separate [`integrate`] call bitwise.
pub fn integrate_many<G>(model: &ManifoldModel, domain: &Domain, u: &[f64], k: usize, g: G) -> Vec<f64>
where
    G: Fn(&Vector, f64, &Vector, &mut [f64]) + Sync,
{
    let nc = domain.cells;
    let h = domain.h;
    let area = 0.5 * h * h;
    let rows: Vec<Vec<f64>> = (0..nc)
        .into_par_iter()
        .map(|cj| {
            let mut acc = vec![Vec::with_capacity(nc); k];
            let mut vals = vec![0.0; k];
            let mut s = vec![0.0; k];
            for ci in 0..nc {
                let nodes = domain.cell_nodes(ci, cj);
                let pts = domain.cell_points(ci, cj);
                s.iter_mut().for_each(|x| *x = 0.0);
                for (verts, mids) in cell_triangles(ci, cj) {
                    let gr = triangle_gradients(&verts);
                    let mut du = Vector::zeros(2);
                    for r in 0..3 {
                        du = du + gr[r] * (u[nodes[verts[r]]] / h);
                    }
                    for e in 0..3 {
                        let val = 0.5 * (u[nodes[verts[e]]] + u[nodes[verts[(e + 1) % 3]]]);
                        let x = &pts[mids[e]];
                        let w = model.volume_density(x);
                        g(x, val, &du, &mut vals);
                        for (sq, v) in s.iter_mut().zip(&vals) {
                            *sq += area / 3.0 * v * w;
                        }
                    }
                }
                for (a, v) in acc.iter_mut().zip(&s) {
                    a.push(*v);
                }
            }
            acc.iter().map(|a| pairwise_sum(a)).collect()
        })
        .collect();
    (0..k).map(|q| pairwise_sum(&rows.iter().map(|r| r[q]).collect::<Vec<_>>())).collect()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Norms {
    pub l2: f64,
    /// `(int |grad u|_g^2 dvol)^{1/2}`.
    pub h1_semi: f64,
}

pub fn norms(model: &ManifoldModel, domain: &Domain, u: &DiscreteField) -> Norms {
    let s = integrate_many(model, domain, &u.values, 2, |x, v, du, out| {
        out[0] = v * v;
        out[1] = model.metric_at(x).inverse().expect("SPD").form(du, du);
    });
    Norms { l2: s[0].sqrt(), h1_semi: s[1].sqrt() }
}

/// `int u phi dvol`.
pub fn weak_pairing<P>(model: &ManifoldModel, domain: &Domain, u: &DiscreteField, phi: P) -> f64
where
    P: Fn(&Vector) -> f64 + Sync,
{
    integrate(model, domain, &u.values, |x, v, _| v * phi(x))
}

pub fn difference(a: &DiscreteField, b: &DiscreteField) -> DiscreteField {
    DiscreteField { values: a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect() }
}

/// Right-hand sides: `one`, `sinsin` (manufactured for `u = sin pi x sin pi y`), `bump`.
pub fn load_preset(name: &str) -> Result<fn(&Vector) -> f64> {
    use std::f64::consts::PI;
    fn one(_: &Vector) -> f64 {
        1.0
    }
    fn sinsin(x: &Vector) -> f64 {
        2.0 * PI * PI * (PI * x[0]).sin() * (PI * x[1]).sin()
    }
    fn bump(x: &Vector) -> f64 {
        let r2 = (x[0] - 0.4).powi(2) + (x[1] - 0.6).powi(2);
        4.0 * (-r2 / 0.05).exp()
    }
    match name {
        "one" => Ok(one),
        "sinsin" => Ok(sinsin),
        "bump" => Ok(bump),
        _ => Err(HomogError::InvalidConfig(format!("unknown load preset '{name}'"))),
    }
}

/// Five fixed smooth test functions used for weak-convergence witnesses.
pub fn pairing_functions() -> Vec<(&'static str, fn(&Vector) -> f64)> {
    use std::f64::consts::PI;
    vec![
        ("one", |_| 1.0),
        ("x", |x| x[0]),
        ("cos2pix_y", |x| (2.0 * PI * x[0]).cos() * x[1]),
        ("sinpixy", |x| (PI * x[0] * x[1]).sin()),
        ("gauss", |x| (-((x[0] - 0.3).powi(2) + (x[1] - 0.7).powi(2)) / 0.1).exp()),
    ]
}

/// Corner nodes of cell `(ci, cj)` in local order (0,0), (1,0), (0,1), (1,1).
pub fn cell_node_indices(d: &Domain, ci: usize, cj: usize) -> [usize; 4] {
    d.cell_nodes(ci, cj)
}

/// Local vertex triples of the two triangles of cell `(ci, cj)`.
pub fn cell_triangle_vertices(ci: usize, cj: usize) -> [[usize; 3]; 2] {
    let t = cell_triangles(ci, cj);
    [t[0].0, t[1].0]
}

/// Gradients of the barycentric functions of a local triangle, in units of `1/h`.
pub fn unit_triangle_gradients(verts: &[usize; 3]) -> [Vector; 3] {
    triangle_gradients(verts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn laplace_stencil() {
        let model = ManifoldModel::flat(2);
        let d = Domain::new(&model, DomainPreset::Square { lo: 0.0, hi: 1.0 }, 8).unwrap();
        let (st, _) = assemble(&model, &d, |_| Ok(Mat::identity(2)), |_| 0.0).unwrap();
        // interior node away from the boundary: union-jack P1 Laplacian is the 5-point stencil
        let k = 4 + 9 * 4;
        let row = st.a[k];
        assert!((row[4] - 4.0).abs() < 1e-14);
        assert!(row.iter().sum::<f64>().abs() < 1e-14);
        assert!((row[1] + 1.0).abs() < 1e-14 && (row[3] + 1.0).abs() < 1e-14);
        assert!(row[0].abs() < 1e-14 && row[8].abs() < 1e-14);
    }

    #[test]
    fn preset_parsing() {
        assert_eq!(DomainPreset::parse("square").unwrap(), DomainPreset::Square { lo: 0.0, hi: 1.0 });
        assert!(DomainPreset::parse("square(0.9,0.1)").is_err());
        assert!(DomainPreset::parse("punctured(0.3)").is_ok());
    }
}

//! Experiment pipelines: the oscillating-versus-homogenized convergence study
//! and the aggregated two-scale diagnostic suites.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::elliptic::{
    check_resolution, difference, frame_to_chart, integrate, integrate_many, load_preset, pairing_functions, solve_dirichlet,
    solve_dirichlet_with, CoefficientRule, Domain, DomainPreset, SolverConfig, SolverReport,
};
use crate::error::{HomogError, Result};
use crate::fiber::{vertical_leray, FiberGrid, FiberMetric, TensorFiberField};
use crate::geometry::{ManifoldModel, ModelConfig, Point};
use crate::homogenize::{
    assemble_astar_general, solve_cell, tensor_preset, two_scale_residual, CellSolverConfig, TwoScaleReport,
};
use crate::linalg::{Mat, Vector};
use crate::nets::{build_net_for_scale, NetAlignment};
use crate::oscillate::{
    admissibility_check, algebra_check, base_function, by_parts_residual, byparts_field, compensated_pairing,
    decreasing_above_floor, gradient_commutator_check, riemann_lebesgue_check, scalar_preset, strictly_decreasing,
    tensor_mode_gap, Ladder, LadderReport, OscillatingTensor, TensorMode,
};
use crate::partition::{check_exponents, PartitionConfig, PartitionOfUnity};

/// Everything a study or diagnostic run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub model: ModelConfig,
    pub tensor: String,
    pub eps: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub fiber_modes: usize,
    pub domain: String,
    pub load: String,
    pub seed: u64,
    pub alignment: NetAlignment,
    /// Mesh cells per `eps`: `h = eps / resolution`.
    pub resolution: f64,
    /// Coefficient sampling for the oscillating problem.
    pub coefficient_rule: CoefficientRule,
    /// Base lattice for `A*` when it varies with the base point.
    pub astar_lattice: usize,
    /// Base cells for the two-scale residual; 0 skips it.
    pub two_scale_cells: usize,
    pub solver_tol: f64,
    pub cell_tol: f64,
    pub memory_limit_mb: f64,
    pub suites: Vec<String>,
    pub output_dir: Option<String>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::new("flat"),
            tensor: "laminate".into(),
            eps: vec![0.02, 0.01, 0.005],
            alpha: 0.8,
            beta: 0.6,
            fiber_modes: 32,
            domain: "square".into(),
            load: "one".into(),
            seed: 1,
            alignment: NetAlignment::Lattice,
            resolution: 8.0,
            coefficient_rule: CoefficientRule::CellCentre,
            astar_lattice: 16,
            two_scale_cells: 64,
            solver_tol: 1e-10,
            cell_tol: 1e-12,
            memory_limit_mb: 3072.0,
            suites: DEFAULT_SUITES.iter().map(|s| s.to_string()).collect(),
            output_dir: None,
        }
    }
}

pub const DEFAULT_SUITES: [&str; 8] =
    ["rl", "admissible", "algebra", "gradcomm", "byparts", "compensated", "tensorgap", "leray"];

impl StudyConfig {
    /// Exponent order, scale order on every rung, and mesh resolution.
    pub fn validate(&self) -> Result<()> {
        check_exponents(self.alpha, self.beta)?;
        for &eps in &self.eps {
            if !(eps > 0.0 && eps < 1.0) {
                return Err(HomogError::InvalidConfig(format!("eps must lie in (0, 1), got {eps}")));
            }
            let width = eps.powf(self.alpha);
            if eps > width / 2.0 {
                return Err(HomogError::ScaleOrderViolated { eps, width });
            }
        }
        if self.resolution < 8.0 {
            return Err(HomogError::InvalidConfig("resolution below 8 cells per eps".into()));
        }
        if self.fiber_modes < 2 {
            return Err(HomogError::InvalidConfig("need at least 2 fiber modes".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig { tol: self.solver_tol, memory_limit_mb: self.memory_limit_mb, ..Default::default() }
    }

    pub fn cell_solver(&self) -> CellSolverConfig {
        CellSolverConfig { modes: self.fiber_modes, tol: self.cell_tol, ..Default::default() }
    }

    pub fn partition(&self) -> PartitionConfig {
        PartitionConfig { alpha: self.alpha, ..Default::default() }
    }
}

/// Tolerances embedded in every JSON header.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tolerances {
    pub fem_relative_residual: f64,
    pub cell_relative_residual: f64,
    pub roundoff_floor: f64,
    pub final_gap_ratio: f64,
    pub oscillation_relative: f64,
}

impl Tolerances {
    pub fn of(cfg: &StudyConfig) -> Self {
        Self {
            fem_relative_residual: cfg.solver_tol,
            cell_relative_residual: cfg.cell_tol,
            roundoff_floor: crate::oscillate::ROUNDOFF_FLOOR,
            final_gap_ratio: FINAL_GAP_RATIO,
            oscillation_relative: OSCILLATION_TOL,
        }
    }
}

/// The last `L^2` gap must fall below this fraction of the first.
pub const FINAL_GAP_RATIO: f64 = 0.35;
/// Relative error allowed at the finest scale for oscillation limits.
pub const OSCILLATION_TOL: f64 = 0.05;

/// `A*` over the base, as a frame endomorphism field.
#[derive(Clone, Debug)]
pub struct HomogenizedCoefficient {
    constant: Option<Mat>,
    lattice: usize,
    table: Vec<Mat>,
    /// Smallest and largest generalized eigenvalue over all cell solves.
    pub bounds: (f64, f64),
    pub cell_solves: usize,
}

impl HomogenizedCoefficient {
    /// One cell solve when neither the tensor nor the frame metric depends on
    /// the base point, otherwise solves on a periodic `lattice^n` grid that is
    /// interpolated bilinearly.
    pub fn build(model: &ManifoldModel, a: &TensorFiberField, cfg: &CellSolverConfig, lattice: usize) -> Result<Self> {
        let n = model.dim();
        if a.is_base_constant() && model.is_flat() {
            let cell = solve_cell(model, a, &Vector::zeros(n), cfg)?;
            let t = assemble_astar_general(&cell);
            return Ok(Self { constant: Some(t.endo), lattice: 0, table: vec![], bounds: t.eigen_bounds(), cell_solves: 1 });
        }
        if n != 2 {
            return Err(HomogError::InvalidConfig("base-dependent A* is tabulated in 2 dimensions only".into()));
        }
        let lattice = lattice.max(4);
        let solved: Vec<(Mat, (f64, f64))> = (0..lattice * lattice)
            .into_par_iter()
            .map(|idx| {
                let x = Vector::from_slice(&[(idx % lattice) as f64 / lattice as f64, (idx / lattice) as f64 / lattice as f64]);
                let t = assemble_astar_general(&solve_cell(model, a, &x, cfg)?);
                Ok((t.endo, t.eigen_bounds()))
            })
            .collect::<Result<_>>()?;
        let lo = solved.iter().map(|s| s.1 .0).fold(f64::INFINITY, f64::min);
        let hi = solved.iter().map(|s| s.1 .1).fold(0.0, f64::max);
        Ok(Self {
            constant: None,
            lattice,
            table: solved.into_iter().map(|s| s.0).collect(),
            bounds: (lo, hi),
            cell_solves: lattice * lattice,
        })
    }

    /// Frame endomorphism at chart position `x`.
    pub fn frame_endomorphism(&self, x: &Vector) -> Mat {
        if let Some(m) = self.constant {
            return m;
        }
        let l = self.lattice;
        let (sx, sy) = (x[0].rem_euclid(1.0) * l as f64, x[1].rem_euclid(1.0) * l as f64);
        let (i0, j0) = (sx.floor() as usize % l, sy.floor() as usize % l);
        let (tx, ty) = (sx - sx.floor(), sy - sy.floor());
        let (i1, j1) = ((i0 + 1) % l, (j0 + 1) % l);
        let at = |i: usize, j: usize| self.table[i + l * j];
        at(i0, j0).scale((1.0 - tx) * (1.0 - ty))
            + at(i1, j0).scale(tx * (1.0 - ty))
            + at(i0, j1).scale((1.0 - tx) * ty)
            + at(i1, j1).scale(tx * ty)
    }

    pub fn is_constant(&self) -> bool {
        self.constant.is_some()
    }
}

/// One rung of the convergence study.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudyRow {
    pub eps: f64,
    pub cells: usize,
    pub h: f64,
    pub net_points: usize,
    pub l2_gap: f64,
    pub h1_gap: f64,
    pub l2_star: f64,
    /// `|int (u_eps - u*) phi|` for each named test function.
    pub pairing_gaps: Vec<f64>,
    pub fem_eps: SolverReport,
    pub fem_star: SolverReport,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudyVerdict {
    pub l2_decreasing: bool,
    pub final_ratio: f64,
    pub pairings_decreasing: Vec<bool>,
    /// Every gap is at solver precision (no oscillation to homogenize).
    pub at_solver_precision: bool,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudyReport {
    pub config_hash: String,
    pub tolerances: Tolerances,
    pub config: StudyConfig,
    pub astar_bounds: (f64, f64),
    pub astar_cell_solves: usize,
    pub pairing_names: Vec<String>,
    pub rows: Vec<StudyRow>,
    pub two_scale: Option<TwoScaleReport>,
    pub verdict: StudyVerdict,
}

fn mesh_cells(preset: &DomainPreset, eps: f64, resolution: f64) -> usize {
    let span = match preset {
        DomainPreset::Square { lo, hi } => hi - lo,
        DomainPreset::PuncturedTorus { .. } => 1.0,
    };
    ((span * resolution / eps) - 1e-9).ceil() as usize
}

/// Solve the oscillating problem with `A^eps` (symmetrized, pulled back) and
/// the homogenized problem with `A*` on the same mesh for every `eps`, and
/// compare them. `progress` receives each finished row.
pub fn run_homogenization_study<P>(cfg: &StudyConfig, mut progress: P) -> Result<StudyReport>
where
    P: FnMut(&StudyRow),
{
    cfg.validate()?;
    let model = ManifoldModel::from_config(&cfg.model)?;
    let a = tensor_preset(&cfg.tensor, model.dim())?;
    let a_sym = a.symmetrized(&model);
    let f = load_preset(&cfg.load)?;
    let preset = DomainPreset::parse(&cfg.domain)?;
    let solver = cfg.solver();
    let cell_cfg = cfg.cell_solver();
    let astar = HomogenizedCoefficient::build(&model, &a_sym, &cell_cfg, cfg.astar_lattice)?;
    let star_coef = |x: &Vector| Ok(frame_to_chart(&model, x, &astar.frame_endomorphism(x)));
    let phis = pairing_functions();

    let mut rows = Vec::new();
    for &eps in &cfg.eps {
        let start = Instant::now();
        let net = build_net_for_scale(&model, eps, cfg.beta, cfg.seed, cfg.alignment)?;
        let net_points = net.len();
        let pou = PartitionOfUnity::new(&model, net, eps, cfg.partition())?;
        let osc = OscillatingTensor::new(a.clone(), &pou, TensorMode::Pullback, true)?;
        let cells = mesh_cells(&preset, eps, cfg.resolution);
        let domain = Domain::new(&model, preset, cells)?;
        check_resolution(domain.h, eps)?;
        let (u_eps, fem_eps) = solve_dirichlet_with(
            &model,
            &domain,
            |x| osc.chart_endomorphism(&Point::from_vector(*x), &mut Vec::new()),
            f,
            cfg.coefficient_rule,
            &solver,
        )?;
        let (u_star, fem_star) = solve_dirichlet(&model, &domain, star_coef, f, &solver)?;
        let gap = difference(&u_eps, &u_star);
        // squared L2 and H1 norms of the gap, then the pairings, in one pass
        let k = 2 + phis.len();
        let sums = integrate_many(&model, &domain, &gap.values, k, |x, v, du, out| {
            out[0] = v * v;
            out[1] = model.metric_at(x).inverse().expect("SPD").form(du, du);
            for (o, (_, phi)) in out[2..].iter_mut().zip(&phis) {
                *o = v * phi(x);
            }
        });
        let row = StudyRow {
            eps,
            cells,
            h: domain.h,
            net_points,
            l2_gap: sums[0].sqrt(),
            h1_gap: sums[1].sqrt(),
            l2_star: integrate(&model, &domain, &u_star.values, |_, v, _| v * v).sqrt(),
            pairing_gaps: sums[2..].iter().map(|p| p.abs()).collect(),
            fem_eps,
            fem_star,
            seconds: start.elapsed().as_secs_f64(),
        };
        progress(&row);
        rows.push(row);
    }

    let two_scale = if cfg.two_scale_cells >= 4 && a.is_base_constant() && model.is_flat() {
        let domain = Domain::new(&model, preset, cfg.two_scale_cells)?;
        Some(two_scale_residual(&model, &domain, &a_sym, f, &cell_cfg, &solver, 2)?)
    } else {
        None
    };

    let verdict = study_verdict(&rows, cfg.solver_tol);
    Ok(StudyReport {
        config_hash: cfg.hash(),
        tolerances: Tolerances::of(cfg),
        config: cfg.clone(),
        astar_bounds: astar.bounds,
        astar_cell_solves: astar.cell_solves,
        pairing_names: phis.iter().map(|(n, _)| n.to_string()).collect(),
        rows,
        two_scale,
        verdict,
    })
}

/// Gaps at or below `100 * solver_tol * |u*|` are solver noise.
pub fn study_verdict(rows: &[StudyRow], solver_tol: f64) -> StudyVerdict {
    let l2: Vec<f64> = rows.iter().map(|r| r.l2_gap).collect();
    let scale = rows.iter().map(|r| r.l2_star).fold(0.0, f64::max);
    let floor = 100.0 * solver_tol * scale;
    let at_solver_precision = l2.iter().all(|&g| g <= floor);
    let l2_decreasing = strictly_decreasing(&l2);
    let final_ratio = match (l2.first(), l2.last()) {
        (Some(&a), Some(&b)) if a > 0.0 => b / a,
        _ => f64::NAN,
    };
    let k = rows.first().map_or(0, |r| r.pairing_gaps.len());
    let pairings_decreasing: Vec<bool> = (0..k)
        .map(|i| decreasing_above_floor(&rows.iter().map(|r| r.pairing_gaps[i]).collect::<Vec<_>>(), floor))
        .collect();
    let passed = rows.len() >= 2
        && (at_solver_precision
            || (l2_decreasing && final_ratio < FINAL_GAP_RATIO && pairings_decreasing.iter().all(|&b| b)));
    StudyVerdict { l2_decreasing, final_ratio, pairings_decreasing, at_solver_precision, passed }
}

/// Header of `study.csv`.
pub fn csv_header(pairing_names: &[String]) -> String {
    let mut csv = String::from("eps,cells,h,net_points,l2_gap,h1_gap,l2_star");
    for n in pairing_names {
        csv.push_str(&format!(",pairing_{n}"));
    }
    csv.push_str(",iterations_eps,iterations_star\n");
    csv
}

/// One line of `study.csv`. Timings are left out so that identical configs
/// give identical bytes.
pub fn csv_row(r: &StudyRow) -> String {
    let mut line = format!(
        "{},{},{:.12e},{},{:.12e},{:.12e},{:.12e}",
        r.eps, r.cells, r.h, r.net_points, r.l2_gap, r.h1_gap, r.l2_star
    );
    for g in &r.pairing_gaps {
        line.push_str(&format!(",{g:.12e}"));
    }
    line.push_str(&format!(",{},{}\n", r.fem_eps.iterations, r.fem_star.iterations));
    line
}

/// `study.csv` and `study.json` in `dir`.
pub fn write_study_outputs(report: &StudyReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = csv_header(&report.pairing_names);
    for r in &report.rows {
        csv.push_str(&csv_row(r));
    }
    write_file(&dir.join("study.csv"), csv.as_bytes())?;
    write_file(&dir.join("study.json"), &serde_json::to_vec_pretty(report)?)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Worst errors of the vertical Leray decomposition on random inputs with a
/// known gradient part and a known divergence-free part.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LerayCheck {
    pub fields: usize,
    pub reconstruction: f64,
    pub orthogonality: f64,
    pub divergence: f64,
    pub passed: bool,
}

/// `count` random band-limited fields (alternating 2 and 3 dimensions) with
/// random SPD fiber metrics; errors are relative to the sup norm of the input.
pub fn leray_random_check(count: usize, seed: u64, tol: f64) -> LerayCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LerayCheck { fields: count, ..Default::default() };
    for t in 0..count {
        let n = if t % 2 == 0 { 2 } else { 3 };
        let grid = FiberGrid::new(n, if n == 2 { 8 } else { 4 });
        let mut b = Mat::zeros(n);
        for r in 0..n {
            for c in 0..n {
                b.a[r][c] = rng.gen_range(-1.0..1.0);
            }
        }
        let g = b * b.transpose() + Mat::identity(n).scale(0.5);
        let metric = FiberMetric::new(g.sym_part()).expect("SPD by construction");
        let band = if n == 2 { 3 } else { 2 };
        let modes: Vec<Vec<i64>> = band_modes(n, band);
        let coef = |rng: &mut ChaCha8Rng| -> Vec<(f64, f64)> {
            modes.iter().map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
        };
        let cu = coef(&mut rng);
        let cpsi: Vec<Vec<(f64, f64)>> = (0..n).map(|_| coef(&mut rng)).collect();
        let trig = |c: &[(f64, f64)], v: &Vector| -> (f64, Vector) {
            let mut val = 0.0;
            let mut d = Vector::zeros(n);
            for (k, &(a, s)) in modes.iter().zip(c) {
                let phase = 2.0 * PI * k.iter().enumerate().map(|(i, &ki)| ki as f64 * v[i]).sum::<f64>();
                val += a * phase.cos() + s * phase.sin();
                for (i, &ki) in k.iter().enumerate() {
                    d.c[i] += 2.0 * PI * ki as f64 * (-a * phase.sin() + s * phase.cos());
                }
            }
            (val, d)
        };
        let mut u0 = Vec::with_capacity(grid.len());
        let mut grad0 = Vec::with_capacity(grid.len());
        let mut y0 = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            let v = grid.point(i);
            let (uv, du) = trig(&cu, &v);
            u0.push(uv);
            grad0.push(metric.ginv.mul_vec(&du));
            let dpsi: Vec<Vector> = cpsi.iter().map(|c| trig(c, &v).1).collect();
            y0.push(if n == 2 {
                // (d_2 psi, -d_1 psi)
                Vector::from_slice(&[dpsi[0][1], -dpsi[0][0]])
            } else {
                Vector::from_slice(&[
                    dpsi[2][1] - dpsi[1][2],
                    dpsi[0][2] - dpsi[2][0],
                    dpsi[1][0] - dpsi[0][1],
                ])
            });
        }
        let x: Vec<Vector> = grad0.iter().zip(&y0).map(|(a, b)| *a + *b).collect();
        let scale = x.iter().map(|v| v.max_abs()).fold(0.0, f64::max).max(1.0);
        let dec = vertical_leray(&grid, &metric, &x);
        let mut rec: f64 = 0.0;
        for i in 0..grid.len() {
            rec = rec.max((dec.u[i] - u0[i]).abs()).max((dec.grad_u[i] - grad0[i]).max_abs()).max((dec.y[i] - y0[i]).max_abs());
        }
        let orth = grid.inner_vectors(&metric, &dec.grad_u, &dec.y).abs() / (scale * scale);
        let div = crate::fiber::vertical_divergence(&grid, &dec.y).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        out.reconstruction = out.reconstruction.max(rec / scale);
        out.orthogonality = out.orthogonality.max(orth);
        out.divergence = out.divergence.max(div / (2.0 * PI * band as f64 * scale));
    }
    out.passed = out.reconstruction < tol && out.orthogonality < tol && out.divergence < tol;
    out
}

fn band_modes(n: usize, band: i64) -> Vec<Vec<i64>> {
    let side = (2 * band + 1) as usize;
    (0..side.pow(n as u32))
        .map(|mut idx| {
            (0..n)
                .map(|_| {
                    let k = (idx % side) as i64 - band;
                    idx /= side;
                    k
                })
                .collect::<Vec<i64>>()
        })
        .filter(|k| k.iter().any(|&c| c != 0))
        .collect()
}

/// One suite's outcome; ladder suites carry their reports.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub passed: bool,
    pub reports: Vec<LadderReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub leray: Option<LerayCheck>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub config_hash: String,
    pub tolerances: Tolerances,
    pub model: String,
    pub results: Vec<SuiteResult>,
    pub passed: bool,
}

/// Run the named suites in order. Unknown names are a configuration error
/// raised before any work starts; an empty list succeeds trivially.
pub fn run_diagnostic_suite(cfg: &StudyConfig) -> Result<DiagnosticReport> {
    for s in &cfg.suites {
        if !DEFAULT_SUITES.contains(&s.as_str()) {
            return Err(HomogError::InvalidConfig(format!(
                "unknown suite '{s}' (known: {})",
                DEFAULT_SUITES.join(", ")
            )));
        }
    }
    let mut results = Vec::new();
    if !cfg.suites.is_empty() {
        cfg.validate()?;
    }
    let model = ManifoldModel::from_config(&cfg.model)?;
    let n = model.dim();
    let mut ladders: Vec<(NetAlignment, Ladder)> = Vec::new();
    let mut ladder = |al: NetAlignment| -> Result<Ladder> {
        if let Some((_, l)) = ladders.iter().find(|(a, _)| *a == al) {
            return Ok(l.clone());
        }
        let l = Ladder::build(&model, &cfg.eps, cfg.beta, cfg.partition(), cfg.seed, al)?;
        ladders.push((al, l.clone()));
        Ok(l)
    };
    // the commutator vanishes identically on lattice-aligned nets
    let incoherent = if model.is_flat() && n == 2 { NetAlignment::Hex } else { NetAlignment::Free };
    for s in &cfg.suites {
        let start = Instant::now();
        let mut leray = None;
        let reports: Vec<LadderReport> = match s.as_str() {
            "rl" | "admissible" => {
                let l = ladder(cfg.alignment)?;
                let mut v = Vec::new();
                for name in ["sin", "two-plus-cos"] {
                    let f = scalar_preset(name, n)?;
                    v.push(if s == "rl" {
                        riemann_lebesgue_check(&l, &f, name, OSCILLATION_TOL)?
                    } else {
                        admissibility_check(&l, &f, name, OSCILLATION_TOL)?
                    });
                }
                v
            }
            "algebra" => {
                let l = ladder(incoherent)?;
                let f = scalar_preset("sin", n)?;
                vec![algebra_check(&l, &f, &f, "sin*sin")?]
            }
            "gradcomm" => {
                let l = ladder(incoherent)?;
                vec![
                    gradient_commutator_check(&l, &scalar_preset("sin", n)?, "sin")?,
                    gradient_commutator_check(&l, &scalar_preset("h-sin", n)?, "h-sin")?,
                ]
            }
            "byparts" => {
                if n != 2 {
                    return Err(HomogError::InvalidConfig("by-parts presets are 2-dimensional".into()));
                }
                let l = ladder(cfg.alignment)?;
                let mut v = Vec::new();
                for (u, x) in BYPARTS_PAIRS {
                    v.push(by_parts_residual(&l, &base_function(u)?, &byparts_field(x)?, &format!("{u}/{x}"), 8.0)?);
                }
                v
            }
            "compensated" => {
                let l = ladder(cfg.alignment)?;
                let f = scalar_preset("sin", n)?;
                let phi = base_function("sincos")?;
                let mut v = vec![compensated_pairing(&l, &f, &f, &phi, None, "sin*sin", OSCILLATION_TOL)?];
                if cfg.alignment == NetAlignment::Lattice {
                    let shift = Vector::unit(n, 0) * COMPENSATED_SHIFT;
                    v.push(compensated_pairing(&l, &f, &f, &phi, Some(shift), "sin*shifted-sin", OSCILLATION_TOL)?);
                }
                v
            }
            "tensorgap" => {
                let l = ladder(cfg.alignment)?;
                vec![tensor_mode_gap(&l, &tensor_preset("anisotropic", n)?, "anisotropic")?]
            }
            "leray" => {
                let c = leray_random_check(100, cfg.seed, 1e-12);
                leray = Some(c);
                vec![]
            }
            _ => unreachable!("validated above"),
        };
        let passed = reports.iter().all(|r| r.passed) && leray.as_ref().map_or(true, |c| c.passed);
        results.push(SuiteResult { suite: s.clone(), passed, reports, leray, seconds: start.elapsed().as_secs_f64() });
    }
    Ok(DiagnosticReport {
        config_hash: cfg.hash(),
        tolerances: Tolerances::of(cfg),
        model: model.name().to_string(),
        passed: results.iter().all(|r| r.passed),
        results,
    })
}

/// Base function and vertical field presets of the by-parts suite; the
/// second field is vertically divergence free.
pub const BYPARTS_PAIRS: [(&str, &str); 3] = [("sincos", "lift"), ("cosx", "solenoidal"), ("sincos", "mixed")];

/// Fiber offset, in units of `eps`, of the shifted net in the compensated pairing.
pub const COMPENSATED_SHIFT: f64 = 0.125;

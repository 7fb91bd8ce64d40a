//! `homog`: nets, partitions, cell problems, elliptic solves and the
//! homogenization study from the command line.
//!
//! Exit codes: 0 on success, 1 when a run finishes but misses a threshold
//! (or a solver fails), 2 on usage or configuration errors.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use homog::elliptic::{
    frame_to_chart, load_preset, norms, solve_dirichlet_with, CoefficientRule, Domain, DomainPreset,
};
use homog::fiber::{fiber_average, FiberGrid};
use homog::homogenize::{assemble_astar_general, solve_cell, tensor_preset};
use homog::nets::{build_net_for_scale, net_diagnostics, voronoi, NetAlignment};
use homog::oscillate::{OscillatingTensor, TensorMode};
use homog::partition::{partition_diagnostics, PartitionOfUnity};
use homog::study::{
    csv_header, csv_row, run_diagnostic_suite, run_homogenization_study, write_file, write_study_outputs,
    HomogenizedCoefficient, StudyConfig,
};
use homog::{HomogError, ManifoldModel, ModelConfig, Point, Vector};

#[derive(Parser)]
#[command(name = "homog", version, about = "Periodic homogenization on parallelizable manifolds")]
struct Cli {
    /// JSON file with a study configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for CSV and JSON outputs (JSON goes to stdout otherwise).
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Model preset: flat, warped-sin(a), warped-ortho(a), skew-frame(b).
    #[arg(long)]
    model: Option<String>,
    /// Model dimension.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    alignment: Option<Alignment>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Alignment {
    Free,
    Lattice,
    Hex,
}

impl From<Alignment> for NetAlignment {
    fn from(a: Alignment) -> Self {
        match a {
            Alignment::Free => NetAlignment::Free,
            Alignment::Lattice => NetAlignment::Lattice,
            Alignment::Hex => NetAlignment::Hex,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Coef {
    /// Oscillating `A^eps`.
    Eps,
    /// Homogenized `A*`.
    Star,
    /// Fiber average of `A`.
    Const,
}

#[derive(Subcommand)]
enum Command {
    /// Build an eps^beta-separated net and report its geometry.
    Net {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps: f64,
    },
    /// Build the partition of unity and report its bounds.
    Partition {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        eps: f64,
        /// Cell-centred samples per axis for the diagnostics.
        #[arg(long, default_value_t = 256)]
        grid: usize,
        /// Also write `psi.csv` with every nonzero psi_j on a grid of this size.
        #[arg(long)]
        dump: Option<usize>,
    },
    /// Run two-scale diagnostic suites.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Suite names; repeat for several. Defaults to all.
        #[arg(long = "suite")]
        suites: Vec<String>,
        /// Run no suites at all.
        #[arg(long)]
        none: bool,
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
    },
    /// Tabulate A* over a base grid.
    Homogenize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tensor_preset: Option<String>,
        #[arg(long)]
        fiber_modes: Option<usize>,
        #[arg(long, default_value_t = 8)]
        base_grid: usize,
    },
    /// Solve one Dirichlet problem.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        domain_preset: Option<String>,
        #[arg(long, value_enum, default_value_t = Coef::Star)]
        coef: Coef,
        #[arg(long)]
        tensor_preset: Option<String>,
        #[arg(long, default_value_t = 0.02)]
        eps: f64,
        #[arg(long)]
        f_preset: Option<String>,
        /// Cells per axis; defaults to resolving eps with the configured resolution.
        #[arg(long)]
        cells: Option<usize>,
    },
    /// Oscillating-versus-homogenized convergence study.
    Study {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tensor_preset: Option<String>,
        #[arg(long, value_delimiter = ',')]
        eps: Option<Vec<f64>>,
        #[arg(long)]
        domain_preset: Option<String>,
        #[arg(long)]
        f_preset: Option<String>,
    },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Threshold(String),
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<HomogError>() {
            Some(
                HomogError::InvalidConfig(_)
                | HomogError::ExponentOrderViolated { .. }
                | HomogError::ScaleOrderViolated { .. }
                | HomogError::SeparationTooLarge { .. }
                | HomogError::UnderResolved { .. }
                | HomogError::MemoryGuard { .. }
                | HomogError::Json(_),
            ) => Failure::Usage(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl From<HomogError> for Failure {
    fn from(e: HomogError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Threshold(msg)) => {
            eprintln!("threshold not met: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// `HOMOG_THREADS` caps the worker pool.
fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("HOMOG_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("HOMOG_THREADS must be a positive integer, got '{v}'"))?;
        anyhow::ensure!(n > 0, "HOMOG_THREADS must be positive");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<StudyConfig, Failure> {
    match path {
        None => Ok(StudyConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))
                .map_err(Failure::Usage)?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", p.display()))
                .map_err(Failure::Usage)
        }
    }
}

fn apply_common(cfg: &mut StudyConfig, c: &Common) {
    if let Some(m) = &c.model {
        cfg.model = ModelConfig { preset: m.clone(), ..cfg.model.clone() };
    }
    if let Some(d) = c.dim {
        cfg.model.dim = d;
    }
    if let Some(a) = c.alpha {
        cfg.alpha = a;
    }
    if let Some(b) = c.beta {
        cfg.beta = b;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(a) = c.alignment {
        cfg.alignment = a.into();
    }
}

fn emit_json(out: Option<&Path>, name: &str, value: &serde_json::Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.into()))?;
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
            write_file(&dir.join(name), text.as_bytes())?;
        }
        None => {
            let _ = writeln!(std::io::stdout().lock(), "{text}");
        }
    }
    Ok(())
}

fn header(cfg: &StudyConfig) -> serde_json::Value {
    serde_json::json!({
        "config_hash": cfg.hash(),
        "tolerances": homog::study::Tolerances::of(cfg),
    })
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(cli.config.as_deref())?;
    let out = cli.out.as_deref();
    match cli.command {
        Command::Net { common, eps } => {
            apply_common(&mut cfg, &common);
            let model = ManifoldModel::from_config(&cfg.model)?;
            let net = build_net_for_scale(&model, eps, cfg.beta, cfg.seed, cfg.alignment)?;
            let vor = voronoi(&model, &net)?;
            let diag = net_diagnostics(&model, &net, &vor)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
                let mut csv = String::from("j,x1");
                for i in 1..model.dim() {
                    csv.push_str(&format!(",x{}", i + 1));
                }
                csv.push('\n');
                for (j, p) in net.points().iter().enumerate() {
                    let xs: Vec<String> = p.coords().as_slice().iter().map(|x| format!("{x:.15e}")).collect();
                    csv.push_str(&format!("{j},{}\n", xs.join(",")));
                }
                write_file(&dir.join("net.csv"), csv.as_bytes())?;
            }
            let value = serde_json::json!({ "header": header(&cfg), "eps": eps, "diagnostics": diag });
            emit_json(out, "net.json", &value)
        }
        Command::Partition { common, eps, grid, dump } => {
            apply_common(&mut cfg, &common);
            homog::partition::check_exponents(cfg.alpha, cfg.beta)?;
            let model = ManifoldModel::from_config(&cfg.model)?;
            let net = build_net_for_scale(&model, eps, cfg.beta, cfg.seed, cfg.alignment)?;
            let pou = PartitionOfUnity::new(&model, net, eps, cfg.partition())?;
            let diag = partition_diagnostics(&pou, grid)?;
            if let (Some(m), Some(dir)) = (dump, out) {
                std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
                write_file(&dir.join("psi.csv"), psi_dump(&pou, m)?.as_bytes())?;
            }
            let value = serde_json::json!({ "header": header(&cfg), "diagnostics": diag });
            emit_json(out, "partition.json", &value)
        }
        Command::Verify { common, suites, none, eps } => {
            apply_common(&mut cfg, &common);
            if none {
                cfg.suites.clear();
            } else if !suites.is_empty() {
                cfg.suites = suites;
            }
            if let Some(e) = eps {
                cfg.eps = e;
            }
            let report = run_diagnostic_suite(&cfg)?;
            for r in &report.results {
                eprintln!("{:<12} {} ({:.1} s)", r.suite, if r.passed { "PASS" } else { "FAIL" }, r.seconds);
            }
            let value = serde_json::to_value(&report).map_err(|e| Failure::Runtime(e.into()))?;
            emit_json(out, "verify.json", &value)?;
            if report.passed {
                Ok(())
            } else {
                let failed: Vec<&str> =
                    report.results.iter().filter(|r| !r.passed).map(|r| r.suite.as_str()).collect();
                Err(Failure::Threshold(format!("suites failed: {}", failed.join(", "))))
            }
        }
        Command::Homogenize { common, tensor_preset: tp, fiber_modes, base_grid } => {
            apply_common(&mut cfg, &common);
            if let Some(t) = tp {
                cfg.tensor = t;
            }
            if let Some(m) = fiber_modes {
                cfg.fiber_modes = m;
            }
            homogenize(&cfg, base_grid, out)
        }
        Command::Solve { common, domain_preset, coef, tensor_preset: tp, eps, f_preset, cells } => {
            apply_common(&mut cfg, &common);
            if let Some(d) = domain_preset {
                cfg.domain = d;
            }
            if let Some(t) = tp {
                cfg.tensor = t;
            }
            if let Some(f) = f_preset {
                cfg.load = f;
            }
            solve(&cfg, coef, eps, cells, out)
        }
        Command::Study { common, tensor_preset: tp, eps, domain_preset, f_preset } => {
            apply_common(&mut cfg, &common);
            if let Some(t) = tp {
                cfg.tensor = t;
            }
            if let Some(e) = eps {
                cfg.eps = e;
            }
            if let Some(d) = domain_preset {
                cfg.domain = d;
            }
            if let Some(f) = f_preset {
                cfg.load = f;
            }
            study(&cfg, out.map(Path::to_path_buf).or_else(|| cfg.output_dir.clone().map(PathBuf::from)))
        }
    }
}

fn psi_dump(pou: &PartitionOfUnity, m: usize) -> Result<String, Failure> {
    let model = pou.model();
    let n = model.dim();
    let mut csv = String::new();
    for i in 0..n {
        csv.push_str(&format!("x{},", i + 1));
    }
    csv.push_str("j,psi,grad_psi\n");
    for idx in 0..m.pow(n as u32) {
        let x = homog::geometry::grid_point(idx, m, n);
        let q = Point::from_vector(x);
        let gi = model.metric_at(&x).inverse().expect("SPD metric");
        for s in pou.samples(&q)? {
            for i in 0..n {
                csv.push_str(&format!("{:.9e},", x[i]));
            }
            let g = gi.form(&s.differential, &s.differential).sqrt();
            csv.push_str(&format!("{},{:.15e},{:.15e}\n", s.j, s.value, g));
        }
    }
    Ok(csv)
}

fn homogenize(cfg: &StudyConfig, base_grid: usize, out: Option<&Path>) -> Result<(), Failure> {
    use rayon::prelude::*;
    let model = ManifoldModel::from_config(&cfg.model)?;
    let n = model.dim();
    let a = tensor_preset(&cfg.tensor, n)?.symmetrized(&model);
    let cell_cfg = cfg.cell_solver();
    let m = base_grid.max(1);
    let rows: Vec<(Vector, homog::homogenize::HomogenizedTensor, usize)> = (0..m.pow(n as u32))
        .into_par_iter()
        .map(|idx| {
            let x = homog::geometry::grid_point(idx, m, n);
            let cell = solve_cell(&model, &a, &x, &cell_cfg)?;
            let iters = cell.stats.iter().map(|s| s.iterations).max().unwrap_or(0);
            Ok((x, assemble_astar_general(&cell), iters))
        })
        .collect::<homog::Result<_>>()?;
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    let mut asym: f64 = 0.0;
    let mut csv = String::new();
    for i in 0..n {
        csv.push_str(&format!("x{},", i + 1));
    }
    let entries: Vec<String> = (0..n).flat_map(|r| (0..n).map(move |c| format!("a{}{}", r + 1, c + 1))).collect();
    csv.push_str(&entries.join(","));
    csv.push_str(",lambda_min,lambda_max\n");
    for (x, t, _) in &rows {
        let (l, h) = t.eigen_bounds();
        lo = lo.min(l);
        hi = hi.max(h);
        asym = asym.max(t.symmetry_defect());
        for i in 0..n {
            csv.push_str(&format!("{:.9e},", x[i]));
        }
        let vals: Vec<String> = (0..n).flat_map(|r| (0..n).map(move |c| format!("{:.15e}", t.endo.a[r][c]))).collect();
        csv.push_str(&vals.join(","));
        csv.push_str(&format!(",{l:.15e},{h:.15e}\n"));
    }
    let mut summary = serde_json::json!({
        "header": header(cfg),
        "model": model.name(),
        "tensor": cfg.tensor,
        "fiber_modes": cfg.fiber_modes,
        "base_grid": m,
        "ellipticity": { "lambda_min": lo, "lambda_max": hi },
        "max_symmetry_defect": asym,
        "max_cell_iterations": rows.iter().map(|r| r.2).max().unwrap_or(0),
    });
    if cfg.tensor == "laminate" && model.is_flat() && n >= 2 {
        // harmonic and arithmetic means of 2 + cos
        let t = rows[0].1.endo;
        let (h, ar) = (3f64.sqrt(), 2.0);
        summary["laminate_check"] = serde_json::json!({
            "a11": t.a[0][0], "harmonic_mean": h, "a11_relative_error": (t.a[0][0] - h).abs() / h,
            "a22": t.a[1][1], "arithmetic_mean": ar, "a22_relative_error": (t.a[1][1] - ar).abs() / ar,
        });
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
        write_file(&dir.join("astar.csv"), csv.as_bytes())?;
    }
    emit_json(out, "homogenize.json", &summary)
}

fn solve(cfg: &StudyConfig, coef: Coef, eps: f64, cells: Option<usize>, out: Option<&Path>) -> Result<(), Failure> {
    let model = ManifoldModel::from_config(&cfg.model)?;
    let preset = DomainPreset::parse(&cfg.domain)?;
    let f = load_preset(&cfg.load)?;
    let a = tensor_preset(&cfg.tensor, model.dim())?;
    let cells = cells.unwrap_or_else(|| match preset {
        DomainPreset::Square { lo, hi } => ((hi - lo) * cfg.resolution / eps).ceil() as usize,
        DomainPreset::PuncturedTorus { .. } => (cfg.resolution / eps).ceil() as usize,
    });
    let domain = Domain::new(&model, preset, cells)?;
    let solver = cfg.solver();
    let (u, report) = match coef {
        Coef::Eps => {
            homog::elliptic::check_resolution(domain.h, eps)?;
            let net = build_net_for_scale(&model, eps, cfg.beta, cfg.seed, cfg.alignment)?;
            let pou = PartitionOfUnity::new(&model, net, eps, cfg.partition())?;
            let osc = OscillatingTensor::new(a, &pou, TensorMode::Pullback, true)?;
            solve_dirichlet_with(
                &model,
                &domain,
                |x| osc.chart_endomorphism(&Point::from_vector(*x), &mut Vec::new()),
                f,
                cfg.coefficient_rule,
                &solver,
            )?
        }
        Coef::Star => {
            let astar = HomogenizedCoefficient::build(&model, &a.symmetrized(&model), &cfg.cell_solver(), cfg.astar_lattice)?;
            solve_dirichlet_with(
                &model,
                &domain,
                |x| Ok(frame_to_chart(&model, x, &astar.frame_endomorphism(x))),
                f,
                CoefficientRule::EdgeMidpoints,
                &solver,
            )?
        }
        Coef::Const => {
            let grid = FiberGrid::new(model.dim(), cfg.fiber_modes);
            let sym = a.symmetrized(&model);
            solve_dirichlet_with(
                &model,
                &domain,
                |x| Ok(frame_to_chart(&model, x, &fiber_average(&grid, &sym, x))),
                f,
                CoefficientRule::EdgeMidpoints,
                &solver,
            )?
        }
    };
    let nm = norms(&model, &domain, &u);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
        let mut csv = String::from("x1,x2,u\n");
        for (k, v) in u.values.iter().enumerate() {
            let x = domain.node(k);
            csv.push_str(&format!("{:.9e},{:.9e},{:.15e}\n", x[0], x[1], v));
        }
        write_file(&dir.join("solution.csv"), csv.as_bytes())?;
    }
    let value = serde_json::json!({
        "header": header(cfg),
        "cells": cells,
        "h": domain.h,
        "norms": { "l2": nm.l2, "h1_semi": nm.h1_semi },
        "solver": report,
    });
    emit_json(out, "solve.json", &value)
}

fn study(cfg: &StudyConfig, out: Option<PathBuf>) -> Result<(), Failure> {
    let names: Vec<String> = homog::elliptic::pairing_functions().iter().map(|(n, _)| n.to_string()).collect();
    // rows are flushed as they finish so that a failure keeps partial results
    let partial = match &out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(e.into()))?;
            let path = dir.join("study.csv");
            write_file(&path, csv_header(&names).as_bytes())?;
            Some(path)
        }
        None => None,
    };
    let report = run_homogenization_study(cfg, |row| {
        eprintln!("eps {:<8} cells {:<6} L2 gap {:.4e} ({:.1} s)", row.eps, row.cells, row.l2_gap, row.seconds);
        if let Some(p) = &partial {
            if let Ok(mut f) = OpenOptions::new().append(true).open(p) {
                let _ = f.write_all(csv_row(row).as_bytes());
            }
        }
    })?;
    match &out {
        Some(dir) => write_study_outputs(&report, dir)?,
        None => {
            let value = serde_json::to_value(&report).map_err(|e| Failure::Runtime(e.into()))?;
            emit_json(None, "study.json", &value)?;
        }
    }
    if report.verdict.passed {
        Ok(())
    } else {
        Err(Failure::Threshold(format!(
            "L2 decreasing {}, final ratio {:.3}, pairings decreasing {:?}",
            report.verdict.l2_decreasing, report.verdict.final_ratio, report.verdict.pairings_decreasing
        )))
    }
}

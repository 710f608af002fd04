//! Command implementations and artifact writers.
//!
//! CSV headers are fixed:
//!
//! * `stages.csv`: `t, rate_nats, rate_bits, distortion, grid_index, belief,
//!   iterations, final_gap, output, policy, marginal`. Matrices are written
//!   column by column, columns separated by `|` and entries by `;`;
//!   policy branches are separated by `/`.
//!   `iterations` lists one count per branch.
//! * `convergence.csv`: `t, branch, iteration, objective, lagrangian, gap`,
//!   where `objective` includes the look-ahead term.
//! * `sweep.csv`: `s, avg_distortion, avg_rate_nats, avg_rate_bits,
//!   rate_nonincreasing, status`, sorted by distortion.
//! * `bench.csv`: `workers, wall_seconds, cells, cells_per_sec, checksum`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nrdf_core::am_stage::run_branch_am;
use nrdf_core::backward::{
    backward_pass, build_grids, load_tables, save_tables, BackwardConfig, BackwardTables,
};
use nrdf_core::forward::{forward_pass_traced, ForwardOptions, Trajectory};
use nrdf_core::model::{LagrangeSchedule, ProbVector, StageAlphabets, StochasticMatrix};
use serde::Serialize;

use crate::config::{Problem, RunConfig};
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "tables.ckpt";
pub const TRAJECTORY_FILE: &str = "trajectory.json";
pub const STAGES_FILE: &str = "stages.csv";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const BENCH_FILE: &str = "bench.csv";

pub const STAGES_HEADER: [&str; 11] = [
    "t",
    "rate_nats",
    "rate_bits",
    "distortion",
    "grid_index",
    "belief",
    "iterations",
    "final_gap",
    "output",
    "policy",
    "marginal",
];
pub const CONVERGENCE_HEADER: [&str; 6] =
    ["t", "branch", "iteration", "objective", "lagrangian", "gap"];
pub const SWEEP_HEADER: [&str; 6] = [
    "s",
    "avg_distortion",
    "avg_rate_nats",
    "avg_rate_bits",
    "rate_nonincreasing",
    "status",
];
pub const BENCH_HEADER: [&str; 5] = [
    "workers",
    "wall_seconds",
    "cells",
    "cells_per_sec",
    "checksum",
];

pub fn to_bits(nats: f64) -> f64 {
    nats / std::f64::consts::LN_2
}

/// Files created by a command; removed on drop unless committed.
struct Artifacts {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            paths: Vec::new(),
            committed: false,
        })
    }

    fn track(&mut self, path: PathBuf) -> PathBuf {
        self.paths.push(path.clone());
        path
    }

    fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.paths)
    }
}

impl Drop for Artifacts {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.paths {
                let _ = fs::remove_file(p);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub t: usize,
    pub branch: usize,
    pub iteration: usize,
    pub objective: f64,
    pub lagrangian: f64,
    pub gap: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub tables: BackwardTables,
    pub trajectory: Trajectory,
    pub convergence: Vec<ConvergenceRow>,
    pub backward_seconds: f64,
}

impl Solution {
    pub fn converged(&self) -> bool {
        self.tables.non_converged.is_empty() && self.trajectory.stages.iter().all(|s| s.converged)
    }
}

pub fn run_backward(problem: &Problem) -> Result<(BackwardTables, f64), CliError> {
    let alphabets = StageAlphabets::from_model(&problem.source, &problem.distortion)?;
    let grids = build_grids(&alphabets, &problem.levels)?;
    let config = BackwardConfig {
        schedule: problem.schedule.clone(),
        am: problem.am,
        workers: problem.workers,
        memory_cap_bytes: problem.memory_cap_bytes,
    };
    let start = Instant::now();
    let tables = backward_pass(&problem.source, &problem.distortion, &grids, &config)?;
    let seconds = start.elapsed().as_secs_f64();
    info!(
        "backward pass: {} cells in {seconds:.3} s, {} not converged",
        tables.total_cells(),
        tables.non_converged.len()
    );
    Ok((tables, seconds))
}

/// Forward pass recording convergence traces for every `every`-th stage
/// (`0` records none).
pub fn run_forward(
    problem: &Problem,
    tables: &BackwardTables,
    every: usize,
) -> Result<(Trajectory, Vec<ConvergenceRow>), CliError> {
    let mut rows = Vec::new();
    let options = ForwardOptions {
        initial_output: problem.initial_output.clone(),
    };
    let trajectory = forward_pass_traced(
        tables,
        &problem.source,
        &problem.distortion,
        &problem.schedule,
        &options,
        |t, branch, rec| {
            if every > 0 && t % every == 0 {
                rows.push(ConvergenceRow {
                    t,
                    branch,
                    iteration: rec.iteration,
                    objective: rec.rate,
                    lagrangian: rec.lagrangian,
                    gap: rec.gap,
                });
            }
        },
    )?;
    Ok((trajectory, rows))
}

pub fn solve_problem(problem: &Problem, every: usize) -> Result<Solution, CliError> {
    let (tables, backward_seconds) = run_backward(problem)?;
    let (trajectory, convergence) = run_forward(problem, &tables, every)?;
    Ok(Solution {
        tables,
        trajectory,
        convergence,
        backward_seconds,
    })
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    horizon: usize,
    total_rate_nats: f64,
    total_rate_bits: f64,
    avg_rate_nats: f64,
    avg_rate_bits: f64,
    avg_distortion: f64,
    converged: bool,
    checksum: &'a str,
    stages: &'a [nrdf_core::forward::StageRecord],
}

fn write_trajectory(
    path: &Path,
    trajectory: &Trajectory,
    converged: bool,
    checksum: &str,
) -> Result<(), CliError> {
    let summary = Summary {
        horizon: trajectory.horizon(),
        total_rate_nats: trajectory.total_sum,
        total_rate_bits: to_bits(trajectory.total_sum),
        avg_rate_nats: trajectory.total_avg,
        avg_rate_bits: to_bits(trajectory.total_avg),
        avg_distortion: trajectory.average_distortion,
        converged,
        checksum,
        stages: &trajectory.stages,
    };
    fs::write(path, serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

fn join(values: impl IntoIterator<Item = impl ToString>) -> String {
    values
        .into_iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(";")
}

fn matrix_cell(m: &StochasticMatrix) -> String {
    m.columns()
        .map(|c| join(c.iter()))
        .collect::<Vec<_>>()
        .join("|")
}

pub fn write_stages_csv(path: &Path, trajectory: &Trajectory) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(STAGES_HEADER)?;
    for s in &trajectory.stages {
        let policy = s
            .policy
            .branches()
            .iter()
            .map(|b| matrix_cell(b.matrix()))
            .collect::<Vec<_>>()
            .join("/");
        w.write_record([
            s.t.to_string(),
            s.rate.to_string(),
            to_bits(s.rate).to_string(),
            s.distortion.to_string(),
            s.grid_index.map_or(String::new(), |i| i.to_string()),
            matrix_cell(s.belief.matrix()),
            join(&s.iterations),
            s.final_gap.to_string(),
            matrix_cell(s.output.matrix()),
            policy,
            join(s.marginal.as_slice()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_convergence_csv(path: &Path, rows: &[ConvergenceRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CONVERGENCE_HEADER)?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            r.branch.to_string(),
            r.iteration.to_string(),
            r.objective.to_string(),
            r.lagrangian.to_string(),
            r.gap.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn forward_artifacts(
    artifacts: &mut Artifacts,
    dir: &Path,
    trajectory: &Trajectory,
    convergence: &[ConvergenceRow],
    converged: bool,
    checksum: &str,
) -> Result<(), CliError> {
    write_trajectory(
        &artifacts.track(dir.join(TRAJECTORY_FILE)),
        trajectory,
        converged,
        checksum,
    )?;
    write_stages_csv(&artifacts.track(dir.join(STAGES_FILE)), trajectory)?;
    write_convergence_csv(&artifacts.track(dir.join(CONVERGENCE_FILE)), convergence)?;
    Ok(())
}

fn non_convergence(tables: &BackwardTables, trajectory: Option<&Trajectory>) -> Option<CliError> {
    let forward: Vec<usize> = trajectory
        .map(|t| {
            t.stages
                .iter()
                .filter(|s| !s.converged)
                .map(|s| s.t)
                .collect()
        })
        .unwrap_or_default();
    if tables.non_converged.is_empty() && forward.is_empty() {
        return None;
    }
    Some(CliError::NonConvergence(format!(
        "{} backward cells and forward stages {forward:?} hit max_iter before the gap reached {}",
        tables.non_converged.len(),
        tables.epsilon
    )))
}

#[derive(Debug)]
pub struct SolveReport {
    pub solution: Solution,
    pub files: Vec<PathBuf>,
}

/// Backward then forward pass. Artifacts of a non-converged run are kept
/// with `"converged": false` in the summary; the error is still returned.
pub fn cmd_solve(cfg: &RunConfig) -> Result<SolveReport, CliError> {
    let problem = cfg.problem()?;
    let dir = &cfg.output.dir;
    let mut artifacts = Artifacts::new(dir)?;
    let solution = solve_problem(&problem, cfg.output.convergence_every)?;
    let checksum = solution.tables.checksum();
    save_tables(
        &solution.tables,
        &artifacts.track(dir.join(CHECKPOINT_FILE)),
    )?;
    forward_artifacts(
        &mut artifacts,
        dir,
        &solution.trajectory,
        &solution.convergence,
        solution.converged(),
        &checksum,
    )?;
    let files = artifacts.commit();
    if let Some(e) = non_convergence(&solution.tables, Some(&solution.trajectory)) {
        return Err(e);
    }
    Ok(SolveReport { solution, files })
}

pub fn cmd_backward(cfg: &RunConfig) -> Result<(BackwardTables, PathBuf), CliError> {
    let problem = cfg.problem()?;
    let dir = &cfg.output.dir;
    let mut artifacts = Artifacts::new(dir)?;
    let (tables, _) = run_backward(&problem)?;
    let path = artifacts.track(dir.join(CHECKPOINT_FILE));
    save_tables(&tables, &path)?;
    artifacts.commit();
    if let Some(e) = non_convergence(&tables, None) {
        return Err(e);
    }
    Ok((tables, path))
}

pub fn cmd_forward(cfg: &RunConfig, checkpoint: &Path) -> Result<Trajectory, CliError> {
    let problem = cfg.problem()?;
    let tables = load_tables(checkpoint)?;
    if tables.resolutions != problem.levels
        || tables.epsilon != problem.am.epsilon
        || tables.max_iter != problem.am.max_iter
    {
        return Err(nrdf_core::Error::ConfigMismatch(
            "grid levels or AM settings differ from the checkpoint".into(),
        )
        .into());
    }
    let dir = &cfg.output.dir;
    let mut artifacts = Artifacts::new(dir)?;
    let (trajectory, convergence) = run_forward(&problem, &tables, cfg.output.convergence_every)?;
    let converged = trajectory.stages.iter().all(|s| s.converged);
    forward_artifacts(
        &mut artifacts,
        dir,
        &trajectory,
        &convergence,
        converged,
        &tables.checksum(),
    )?;
    artifacts.commit();
    if !converged {
        return Err(
            non_convergence(&tables, Some(&trajectory)).expect("a forward stage did not converge")
        );
    }
    Ok(trajectory)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub s: f64,
    pub avg_distortion: f64,
    pub avg_rate_nats: f64,
    pub rate_nonincreasing: bool,
    /// `ok`, or the error message for a failed point.
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Average rate never increases with average distortion over the
    /// successful points.
    pub monotone: bool,
}

/// One full solve per price `s` (constant over the horizon).
pub fn sweep(cfg: &RunConfig, s_list: &[f64]) -> Result<SweepReport, CliError> {
    let base = cfg.problem()?;
    if let Some(bad) = s_list.iter().find(|&&s| !(s <= 0.0)) {
        return Err(CliError::Validation(format!(
            "sweep price {bad} is not <= 0"
        )));
    }
    let mut rows = Vec::with_capacity(s_list.len());
    for &s in s_list {
        let mut problem = base.clone();
        problem.schedule = LagrangeSchedule::constant(s, cfg.horizon)?;
        let row = match solve_problem(&problem, 0).and_then(|sol| {
            non_convergence(&sol.tables, Some(&sol.trajectory)).map_or(Ok(sol), Err)
        }) {
            Ok(sol) => SweepRow {
                s,
                avg_distortion: sol.trajectory.average_distortion,
                avg_rate_nats: sol.trajectory.total_avg,
                rate_nonincreasing: true,
                status: "ok".into(),
            },
            Err(e) => {
                warn!("sweep point s = {s} failed: {e}");
                SweepRow {
                    s,
                    avg_distortion: f64::NAN,
                    avg_rate_nats: f64::NAN,
                    rate_nonincreasing: false,
                    status: e.to_string(),
                }
            }
        };
        rows.push(row);
    }
    rows.sort_by(|a, b| {
        a.avg_distortion
            .total_cmp(&b.avg_distortion)
            .then(b.s.total_cmp(&a.s))
    });
    let mut monotone = true;
    let mut previous = f64::INFINITY;
    for row in rows.iter_mut().filter(|r| r.status == "ok") {
        row.rate_nonincreasing = row.avg_rate_nats <= previous;
        monotone &= row.rate_nonincreasing;
        previous = row.avg_rate_nats;
    }
    Ok(SweepReport { rows, monotone })
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_HEADER)?;
    for r in rows {
        w.write_record([
            r.s.to_string(),
            r.avg_distortion.to_string(),
            r.avg_rate_nats.to_string(),
            to_bits(r.avg_rate_nats).to_string(),
            r.rate_nonincreasing.to_string(),
            r.status.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_sweep(cfg: &RunConfig, s_list: &[f64]) -> Result<SweepReport, CliError> {
    let mut artifacts = Artifacts::new(&cfg.output.dir)?;
    let report = sweep(cfg, s_list)?;
    write_sweep_csv(
        &artifacts.track(cfg.output.dir.join(SWEEP_FILE)),
        &report.rows,
    )?;
    artifacts.commit();
    if !report.monotone {
        warn!("sweep: average rate increases with distortion somewhere");
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub workers: usize,
    pub wall_seconds: f64,
    pub cells: usize,
    pub checksum: String,
}

impl BenchRow {
    pub fn cells_per_sec(&self) -> f64 {
        self.cells as f64 / self.wall_seconds.max(f64::MIN_POSITIVE)
    }
}

/// Backward pass once per worker count; fails if any two checksums differ.
pub fn bench(cfg: &RunConfig, workers: &[usize]) -> Result<Vec<BenchRow>, CliError> {
    let base = cfg.problem()?;
    if workers.is_empty() || workers.contains(&0) {
        return Err(CliError::Validation(
            "bench needs worker counts >= 1".into(),
        ));
    }
    let mut rows: Vec<BenchRow> = Vec::with_capacity(workers.len());
    for &w in workers {
        let mut problem = base.clone();
        problem.workers = w;
        let (tables, seconds) = run_backward(&problem)?;
        let row = BenchRow {
            workers: w,
            wall_seconds: seconds,
            cells: tables.total_cells(),
            checksum: tables.checksum(),
        };
        if let Some(first) = rows.first() {
            if first.checksum != row.checksum {
                return Err(CliError::Determinism(format!(
                    "{} workers gave checksum {}, {} workers gave {}",
                    first.workers, first.checksum, w, row.checksum
                )));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(BENCH_HEADER)?;
    for r in rows {
        w.write_record([
            r.workers.to_string(),
            r.wall_seconds.to_string(),
            r.cells.to_string(),
            r.cells_per_sec().to_string(),
            r.checksum.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_bench(cfg: &RunConfig, workers: &[usize]) -> Result<Vec<BenchRow>, CliError> {
    let mut artifacts = Artifacts::new(&cfg.output.dir)?;
    let rows = bench(cfg, workers)?;
    write_bench_csv(&artifacts.track(cfg.output.dir.join(BENCH_FILE)), &rows)?;
    artifacts.commit();
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleReport {
    pub rate_nats: f64,
    pub rate_bits: f64,
    pub distortion: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Single AM solve without look-ahead on `pred` (default: the configured
/// initial law) with the stage-0 distortion and price.
pub fn cmd_oracle(cfg: &RunConfig, pred: Option<&[f64]>) -> Result<OracleReport, CliError> {
    let problem = cfg.problem()?;
    let pred = match pred {
        Some(p) => ProbVector::new(p.to_vec())?,
        None => problem.source.initial().clone(),
    };
    let rho = problem.distortion.stage(0);
    let zeros = vec![0.0; rho.y_size()];
    let am = run_branch_am(
        pred.as_slice(),
        rho,
        problem.schedule.at(0),
        &zeros,
        problem.am,
        None,
    )?;
    let report = OracleReport {
        rate_nats: am.point.rate,
        rate_bits: to_bits(am.point.rate),
        distortion: am.point.distortion,
        iterations: am.iterations,
        converged: am.converged,
    };
    if !am.converged {
        return Err(CliError::NonConvergence(format!(
            "oracle stopped after {} sweeps with gap {}",
            am.iterations, am.final_gap
        )));
    }
    Ok(report)
}

//! Offline backward sweep over stages `t = n..1`.
//!
//! Every cell `(b, b', y_{t-1})` pairs a current grid point `b` in `B_t`
//! with a next grid point `b'` in `B_{t+1}`: the branch solves the stage
//! AM with the predictive belief `K_t b[:, y_{t-1}]` and look-ahead
//! `L(y_t) = V_{t+1}(y_t, b')`. The value closure is
//! `V_t(y, b) = min_{b'} rate[t][b][b'][y]`, the lower envelope over the
//! next-stage grid; `V_{n+1} = 0` and `B_{n+1}` is a single dummy point.
//!
//! Only scalar tables are kept. The forward pass re-solves the few cells
//! it visits to recover policies.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::am_stage::{run_branch_am, AmSettings};
use crate::error::{Error, Result};
use crate::grid::{BeliefGrid, DEFAULT_POINT_CAP};
use crate::model::{DistortionModel, LagrangeSchedule, MarkovSource, StageAlphabets};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NRDFTBLS";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 32;

/// Default cap on the in-memory size of the scalar tables (4 GiB).
pub const DEFAULT_MEMORY_CAP: u64 = 4 << 30;

const BYTES_PER_CELL: u128 = 8 + 8 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BackwardConfig {
    pub schedule: LagrangeSchedule,
    pub am: AmSettings,
    pub workers: usize,
    pub memory_cap_bytes: u64,
}

/// Builds `B_1..=B_n` from per-stage resolutions (`levels[t - 1]` for stage
/// `t`). Stage `t` quantizes `P(x_{t-1} | y_{t-1})`.
pub fn build_grids(alphabets: &StageAlphabets, levels: &[usize]) -> Result<Vec<BeliefGrid>> {
    let n = alphabets.horizon();
    if levels.len() != n {
        return Err(Error::InvalidParameter(format!(
            "need {n} grid resolutions (stages 1..={n}), got {}",
            levels.len()
        )));
    }
    (1..=n)
        .map(|t| {
            BeliefGrid::generate_capped(
                alphabets.x_sizes[t - 1],
                alphabets.y_sizes[t - 1],
                levels[t - 1],
                DEFAULT_POINT_CAP,
            )
        })
        .collect()
}

/// Tables of one stage, flattened as `[b][b'][y_{t-1}]` (cells) and
/// `[y_{t-1}][b]` (value).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTable {
    pub stage: usize,
    pub current_points: usize,
    pub next_points: usize,
    pub branches: usize,
    pub rate: Vec<f64>,
    pub dist: Vec<f64>,
    pub iters: Vec<u32>,
    pub value: Vec<f64>,
}

impl StageTable {
    fn cell(&self, b: usize, b_next: usize, y_prev: usize) -> usize {
        (b * self.next_points + b_next) * self.branches + y_prev
    }

    pub fn rate(&self, b: usize, b_next: usize, y_prev: usize) -> f64 {
        self.rate[self.cell(b, b_next, y_prev)]
    }

    pub fn dist(&self, b: usize, b_next: usize, y_prev: usize) -> f64 {
        self.dist[self.cell(b, b_next, y_prev)]
    }

    pub fn iters(&self, b: usize, b_next: usize, y_prev: usize) -> u32 {
        self.iters[self.cell(b, b_next, y_prev)]
    }

    pub fn value(&self, y_prev: usize, b: usize) -> f64 {
        self.value[y_prev * self.current_points + b]
    }

    pub fn cell_count(&self) -> usize {
        self.rate.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellId {
    pub stage: usize,
    pub current: usize,
    pub next: usize,
    pub branch: usize,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackwardTables {
    pub source: MarkovSource,
    pub distortion: DistortionModel,
    pub schedule: Vec<f64>,
    pub epsilon: f64,
    pub max_iter: usize,
    pub resolutions: Vec<usize>,
    pub grids: Vec<BeliefGrid>,
    /// `stages[t - 1]` holds stage `t`.
    pub stages: Vec<StageTable>,
    pub non_converged: Vec<CellId>,
}

impl BackwardTables {
    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn stage(&self, t: usize) -> &StageTable {
        &self.stages[t - 1]
    }

    /// `B_t` for `t` in `1..=n`.
    pub fn grid(&self, t: usize) -> &BeliefGrid {
        &self.grids[t - 1]
    }

    /// `V_t(y_{t-1}, b)`; identically zero past the horizon.
    pub fn value(&self, t: usize, y_prev: usize, b: usize) -> f64 {
        if t > self.horizon() {
            0.0
        } else {
            self.stage(t).value(y_prev, b)
        }
    }

    /// Look-ahead over `y_t` seen from stage `t` when the next belief is `b_next`.
    pub fn lookahead(&self, t: usize, y_size: usize, b_next: usize) -> Vec<f64> {
        (0..y_size).map(|y| self.value(t + 1, y, b_next)).collect()
    }

    pub fn total_cells(&self) -> usize {
        self.stages.iter().map(StageTable::cell_count).sum()
    }

    pub fn settings(&self) -> AmSettings {
        AmSettings {
            epsilon: self.epsilon,
            max_iter: self.max_iter,
        }
    }

    /// Hex SHA-256 of the serialized tables.
    pub fn checksum(&self) -> String {
        hex_digest(&Sha256::digest(self.payload()))
    }

    fn payload(&self) -> Vec<u8> {
        bincode::serialize(self).expect("tables serialize")
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn estimate_bytes(grids: &[BeliefGrid]) -> u128 {
    (0..grids.len())
        .map(|i| {
            let next = grids.get(i + 1).map_or(1, BeliefGrid::len) as u128;
            grids[i].len() as u128 * next * grids[i].y_size() as u128 * BYTES_PER_CELL
        })
        .sum()
}

pub fn backward_pass(
    source: &MarkovSource,
    distortion: &DistortionModel,
    grids: &[BeliefGrid],
    config: &BackwardConfig,
) -> Result<BackwardTables> {
    let alphabets = StageAlphabets::from_model(source, distortion)?;
    let n = alphabets.horizon();
    config.am.validate()?;
    if config.schedule.len() != n + 1 {
        return Err(Error::InvalidParameter(format!(
            "Lagrange schedule has {} entries, horizon needs {}",
            config.schedule.len(),
            n + 1
        )));
    }
    if grids.len() != n {
        return Err(Error::InvalidParameter(format!(
            "need grids for stages 1..={n}, got {}",
            grids.len()
        )));
    }
    for (i, g) in grids.iter().enumerate() {
        let t = i + 1;
        if g.x_size() != alphabets.x_sizes[t - 1] || g.y_size() != alphabets.y_sizes[t - 1] {
            return Err(Error::Shape(format!(
                "grid for stage {t} is {}x{}, alphabets need {}x{}",
                g.x_size(),
                g.y_size(),
                alphabets.x_sizes[t - 1],
                alphabets.y_sizes[t - 1]
            )));
        }
    }
    let bytes = estimate_bytes(grids);
    if bytes > config.memory_cap_bytes as u128 {
        return Err(Error::TablesTooLarge {
            bytes,
            cap: config.memory_cap_bytes,
        });
    }
    if config.workers == 0 {
        return Err(Error::InvalidParameter(
            "worker count must be at least 1".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;

    let mut stages: Vec<StageTable> = Vec::with_capacity(n);
    let mut non_converged = Vec::new();
    for t in (1..=n).rev() {
        let grid = &grids[t - 1];
        let next_value = stages.last();
        let next_points = next_value.map_or(1, |s| s.current_points);
        let y_prev = grid.y_size();
        let y_size = alphabets.y_sizes[t];
        let kernel = source.kernel(t);
        let rho = distortion.stage(t);
        let s = config.schedule.at(t);

        // predictive columns per (b, y_prev), look-ahead per b'
        let preds: Vec<Vec<f64>> = grid
            .points()
            .iter()
            .flat_map(|p| (0..y_prev).map(move |y| kernel.apply(p.column(y))))
            .collect::<Result<_>>()?;
        let lookaheads: Vec<Vec<f64>> = (0..next_points)
            .map(|bn| {
                (0..y_size)
                    .map(|y| next_value.map_or(0.0, |v| v.value(y, bn)))
                    .collect()
            })
            .collect();

        let cells: Vec<Result<Vec<(f64, f64, u32, Option<f64>)>>> = pool.install(|| {
            (0..grid.len() * next_points)
                .into_par_iter()
                .map(|pair| {
                    let (b, bn) = (pair / next_points, pair % next_points);
                    (0..y_prev)
                        .map(|y| {
                            let r = run_branch_am(
                                &preds[b * y_prev + y],
                                rho,
                                s,
                                &lookaheads[bn],
                                config.am,
                                None,
                            )?;
                            let iters = u32::try_from(r.iterations).unwrap_or(u32::MAX);
                            let flag = (!r.converged).then_some(r.final_gap);
                            Ok((r.point.rate, r.point.distortion, iters, flag))
                        })
                        .collect()
                })
                .collect()
        });

        let count = grid.len() * next_points * y_prev;
        let mut table = StageTable {
            stage: t,
            current_points: grid.len(),
            next_points,
            branches: y_prev,
            rate: Vec::with_capacity(count),
            dist: Vec::with_capacity(count),
            iters: Vec::with_capacity(count),
            value: vec![0.0; y_prev * grid.len()],
        };
        for (pair, cell) in cells.into_iter().enumerate() {
            let (b, bn) = (pair / next_points, pair % next_points);
            for (y, (rate, dist, iters, flag)) in cell?.into_iter().enumerate() {
                table.rate.push(rate);
                table.dist.push(dist);
                table.iters.push(iters);
                if let Some(gap) = flag {
                    non_converged.push(CellId {
                        stage: t,
                        current: b,
                        next: bn,
                        branch: y,
                        gap,
                    });
                }
            }
        }
        // closure in ascending b' order
        for b in 0..grid.len() {
            for y in 0..y_prev {
                let mut best = f64::INFINITY;
                for bn in 0..next_points {
                    let r = table.rate(b, bn, y);
                    if r < best {
                        best = r;
                    }
                }
                table.value[y * grid.len() + b] = best;
            }
        }
        debug!(
            "stage {t}: {} cells, value range [{:.6}, {:.6}]",
            count,
            table.value.iter().copied().fold(f64::INFINITY, f64::min),
            table
                .value
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
        );
        stages.push(table);
    }
    stages.reverse();
    if !non_converged.is_empty() {
        warn!(
            "{} backward cells stopped at max_iter without meeting the tolerance",
            non_converged.len()
        );
    }

    Ok(BackwardTables {
        source: source.clone(),
        distortion: distortion.clone(),
        schedule: config.schedule.as_slice().to_vec(),
        epsilon: config.am.epsilon,
        max_iter: config.am.max_iter,
        resolutions: grids.iter().map(BeliefGrid::resolution).collect(),
        grids: grids.to_vec(),
        stages,
        non_converged,
    })
}

/// Checkpoint layout: magic, format version (u32 LE), payload length
/// (u64 LE), SHA-256 of the payload, then the bincode payload.
pub fn save_tables(tables: &BackwardTables, path: &Path) -> Result<()> {
    let payload = tables.payload();
    let digest = Sha256::digest(&payload);
    let mut file = fs::File::create(path)?;
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(payload.len() as u64).to_le_bytes())?;
    file.write_all(&digest)?;
    file.write_all(&payload)?;
    file.sync_all()?;
    Ok(())
}

pub fn load_tables(path: &Path) -> Result<BackwardTables> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<BackwardTables> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::CorruptCheckpoint(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != len {
        return Err(Error::CorruptCheckpoint(format!(
            "payload is {} bytes, header says {len}",
            payload.len()
        )));
    }
    if Sha256::digest(payload).as_slice() != &bytes[20..52] {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    bincode::deserialize(payload).map_err(|e| Error::CorruptCheckpoint(e.to_string()))
}

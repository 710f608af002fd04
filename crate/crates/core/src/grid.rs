//! Finite quantization of the belief space.
//!
//! A grid point is a [`Belief`] whose every column is drawn from a fixed set
//! of candidate columns ("levels"). For a binary source alphabet the
//! candidates are `(1 - a_i, a_i)` with `a_i = i / (N + 1)`, `i = 1..=N`.
//! Larger alphabets use the interior simplex lattice: compositions
//! `(k_1, .., k_m) / q` with every `k_j >= 1` and `q = N + m - 1`, which
//! reduces to the binary rule for `m = 2`.
//!
//! Points are ordered lexicographically in their level indices, first column
//! most significant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Belief, ProbVector};

/// Default cap on the number of points in one grid.
pub const DEFAULT_POINT_CAP: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridIndex(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefGrid {
    x_size: usize,
    y_size: usize,
    resolution: usize,
    levels: Vec<ProbVector>,
    points: Vec<Belief>,
}

impl BeliefGrid {
    pub fn generate(x_size: usize, y_size: usize, resolution: usize) -> Result<Self> {
        Self::generate_capped(x_size, y_size, resolution, DEFAULT_POINT_CAP)
    }

    pub fn generate_capped(
        x_size: usize,
        y_size: usize,
        resolution: usize,
        cap: usize,
    ) -> Result<Self> {
        if resolution == 0 || x_size == 0 || y_size == 0 {
            return Err(Error::InvalidParameter(format!(
                "grid needs positive sizes, got |X| = {x_size}, |Y| = {y_size}, N = {resolution}"
            )));
        }
        let level_count = binomial(resolution as u128 + x_size as u128 - 2, x_size as u128 - 1);
        let points = level_count.checked_pow(y_size as u32).unwrap_or(u128::MAX);
        if points > cap as u128 {
            return Err(Error::GridTooLarge { points, cap });
        }
        let levels = simplex_levels(x_size, resolution);
        debug_assert_eq!(levels.len() as u128, level_count);

        let total = points as usize;
        let mut out = Vec::with_capacity(total);
        let mut digits = vec![0usize; y_size];
        for _ in 0..total {
            let columns = digits.iter().map(|&d| levels[d].clone()).collect();
            out.push(Belief::from_columns(columns)?);
            // odometer, last column fastest
            for d in digits.iter_mut().rev() {
                *d += 1;
                if *d < levels.len() {
                    break;
                }
                *d = 0;
            }
        }
        Ok(Self {
            x_size,
            y_size,
            resolution,
            levels,
            points: out,
        })
    }

    pub fn x_size(&self) -> usize {
        self.x_size
    }

    pub fn y_size(&self) -> usize {
        self.y_size
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn levels(&self) -> &[ProbVector] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, idx: GridIndex) -> &Belief {
        &self.points[idx.0]
    }

    pub fn points(&self) -> &[Belief] {
        &self.points
    }

    /// Level index used by each column of point `idx`.
    pub fn level_indices(&self, idx: GridIndex) -> Vec<usize> {
        let base = self.levels.len();
        let mut rest = idx.0;
        let mut digits = vec![0; self.y_size];
        for d in digits.iter_mut().rev() {
            *d = rest % base;
            rest /= base;
        }
        digits
    }

    fn index_of(&self, digits: &[usize]) -> GridIndex {
        GridIndex(digits.iter().fold(0, |acc, &d| acc * self.levels.len() + d))
    }

    /// Nearest grid point in total L1 distance, lowest index on ties.
    ///
    /// The distance separates over columns and the grid is a full product
    /// of the level set, so each column is matched independently; the
    /// per-column lowest level among ties gives the lowest overall index.
    pub fn project(&self, belief: &Belief) -> Result<GridIndex> {
        if belief.rows() != self.x_size || belief.cols() != self.y_size {
            return Err(Error::Shape(format!(
                "belief is {}x{}, grid expects {}x{}",
                belief.rows(),
                belief.cols(),
                self.x_size,
                self.y_size
            )));
        }
        let digits: Vec<usize> = (0..self.y_size)
            .map(|c| {
                let col = belief.column(c);
                let mut best = (f64::INFINITY, 0);
                for (i, level) in self.levels.iter().enumerate() {
                    let d = l1(col, level.as_slice());
                    if d < best.0 {
                        best = (d, i);
                    }
                }
                best.1
            })
            .collect();
        Ok(self.index_of(&digits))
    }

    /// Total L1 distance between `belief` and grid point `idx`.
    pub fn distance(&self, belief: &Belief, idx: GridIndex) -> f64 {
        let p = self.point(idx);
        (0..self.y_size)
            .map(|c| l1(belief.column(c), p.column(c)))
            .sum()
    }
}

pub fn generate_grid(x_size: usize, y_size: usize, resolution: usize) -> Result<BeliefGrid> {
    BeliefGrid::generate(x_size, y_size, resolution)
}

pub fn project(belief: &Belief, grid: &BeliefGrid) -> Result<GridIndex> {
    grid.project(belief)
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n.saturating_sub(k));
    (0..k).fold(1u128, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Interior lattice points of the simplex, ordered by the reversed part
/// tuple so that the binary case runs through `a = 1/(N+1) .. N/(N+1)`.
fn simplex_levels(x_size: usize, resolution: usize) -> Vec<ProbVector> {
    let q = resolution + x_size - 1;
    let mut parts = Vec::new();
    let mut current = vec![0usize; x_size];
    compositions(&mut current, x_size - 1, q, &mut parts);
    parts.sort_by(|a, b| a.iter().rev().cmp(b.iter().rev()));
    parts
        .into_iter()
        .map(|p| {
            ProbVector::normalized(p.iter().map(|&k| k as f64 / q as f64).collect())
                .expect("positive parts")
        })
        .collect()
}

fn compositions(
    current: &mut Vec<usize>,
    slot: usize,
    remaining: usize,
    out: &mut Vec<Vec<usize>>,
) {
    if slot == 0 {
        if remaining >= 1 {
            current[0] = remaining;
            out.push(current.clone());
        }
        return;
    }
    // leave at least one unit for each of the `slot` lower slots
    for k in 1..=remaining.saturating_sub(slot) {
        current[slot] = k;
        compositions(current, slot - 1, remaining - k, out);
    }
}

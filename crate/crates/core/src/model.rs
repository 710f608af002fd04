//! Probability objects, the source and distortion model, and the stage-level
//! information and distortion functionals.
//!
//! Orientation convention, asserted by every constructor: a
//! [`StochasticMatrix`] stores entry `(row, col)` as `P(row | col)`, so each
//! column is a [`ProbVector`]. Concretely:
//!
//! | type                | rows      | columns   |
//! |---------------------|-----------|-----------|
//! | source kernel `K_t` | `x_t`     | `x_{t-1}` |
//! | [`Belief`]          | `x_{t-1}` | `y_{t-1}` |
//! | [`PredictiveBelief`]| `x_t`     | `y_{t-1}` |
//! | [`OutputKernel`]    | `y_t`     | `y_{t-1}` |
//! | [`PolicyBranch`]    | `y_t`     | `x_t`     |
//!
//! A [`Policy`] holds one [`PolicyBranch`] per conditioning symbol `y_{t-1}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance on the sum of a probability vector.
pub const SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates `entries` as a probability vector without touching them.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        check_simplex(&entries)?;
        Ok(Self(entries))
    }

    /// Divides nonnegative weights by their sum.
    pub fn normalized(mut weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::NotStochastic("empty vector".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::NotStochastic(format!("invalid weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::NotStochastic("weights sum to zero".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self(weights))
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0, "uniform distribution over an empty alphabet");
        Self(vec![1.0 / len as f64; len])
    }

    pub fn point_mass(len: usize, symbol: usize) -> Self {
        assert!(
            symbol < len,
            "symbol {symbol} outside alphabet of size {len}"
        );
        let mut v = vec![0.0; len];
        v[symbol] = 1.0;
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.0.iter().all(|&p| p > 0.0)
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

fn check_simplex(entries: &[f64]) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::NotStochastic("empty vector".into()));
    }
    if let Some(p) = entries.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::NotStochastic(format!("entry {p} outside [0, 1]")));
    }
    let total: f64 = entries.iter().sum();
    if (total - 1.0).abs() > SUM_TOL {
        return Err(Error::NotStochastic(format!("entries sum to {total}")));
    }
    Ok(())
}

/// Column-stochastic matrix, stored column-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StochasticMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl StochasticMatrix {
    pub fn from_columns(columns: Vec<ProbVector>) -> Result<Self> {
        let cols = columns.len();
        if cols == 0 {
            return Err(Error::Shape("matrix without columns".into()));
        }
        let rows = columns[0].len();
        if let Some(c) = columns.iter().find(|c| c.len() != rows) {
            return Err(Error::Shape(format!(
                "column of length {} in a matrix with {rows} rows",
                c.len()
            )));
        }
        let data = columns
            .into_iter()
            .flat_map(ProbVector::into_inner)
            .collect();
        Ok(Self { rows, cols, data })
    }

    /// Builds from a row-major table `table[row][col]`, the way transition
    /// matrices are usually written down.
    pub fn from_table(table: &[Vec<f64>]) -> Result<Self> {
        let rows = table.len();
        if rows == 0 {
            return Err(Error::Shape("matrix without rows".into()));
        }
        let cols = table[0].len();
        if table.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged matrix rows".into()));
        }
        let columns = (0..cols)
            .map(|c| ProbVector::new(table.iter().map(|r| r[c]).collect()))
            .collect::<Result<Vec<_>>>()?;
        Self::from_columns(columns)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_columns((0..n).map(|i| ProbVector::point_mass(n, i)).collect())
            .expect("identity is stochastic")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[col * self.rows + row]
    }

    pub fn column(&self, col: usize) -> &[f64] {
        &self.data[col * self.rows..(col + 1) * self.rows]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.rows)
    }

    /// `K v`, renormalized.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::Shape(format!(
                "vector of length {} against a matrix with {} columns",
                v.len(),
                self.cols
            )));
        }
        let mut out = vec![0.0; self.rows];
        for (col, &w) in self.columns().zip(v) {
            for (o, &k) in out.iter_mut().zip(col) {
                *o += k * w;
            }
        }
        Ok(ProbVector::normalized(out)?.into_inner())
    }
}

macro_rules! stochastic_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct $name(StochasticMatrix);

        impl $name {
            pub fn new(matrix: StochasticMatrix) -> Self {
                Self(matrix)
            }

            pub fn from_columns(columns: Vec<ProbVector>) -> Result<Self> {
                StochasticMatrix::from_columns(columns).map(Self)
            }

            pub fn matrix(&self) -> &StochasticMatrix {
                &self.0
            }

            pub fn column(&self, col: usize) -> &[f64] {
                self.0.column(col)
            }

            pub fn cols(&self) -> usize {
                self.0.cols()
            }

            pub fn rows(&self) -> usize {
                self.0.rows()
            }

            pub fn get(&self, row: usize, col: usize) -> f64 {
                self.0.get(row, col)
            }
        }
    };
}

stochastic_newtype!(
    /// `P_t(x_{t-1} | y_{t-1})`, one column per `y_{t-1}`.
    Belief
);
stochastic_newtype!(
    /// `P_t(x_t | y_{t-1})`: the source prediction seen by each branch.
    PredictiveBelief
);
stochastic_newtype!(
    /// `P_t(y_t | y_{t-1})`, one column per `y_{t-1}`.
    OutputKernel
);
stochastic_newtype!(
    /// `P_t(y_t | y_{t-1} = fixed, x_t)`, one column per `x_t`.
    PolicyBranch
);

impl Belief {
    /// Renormalizes every column; exact no-op up to rounding on valid beliefs.
    pub fn renormalized(&self) -> Self {
        let columns = self
            .0
            .columns()
            .map(|c| ProbVector::normalized(c.to_vec()).expect("belief column has mass"))
            .collect();
        Self::from_columns(columns).expect("same shape")
    }
}

/// `P_t(y_t | y_{t-1}, x_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    branches: Vec<PolicyBranch>,
}

impl Policy {
    pub fn new(branches: Vec<PolicyBranch>) -> Result<Self> {
        let first = branches
            .first()
            .ok_or_else(|| Error::Shape("policy without branches".into()))?;
        let (r, c) = (first.rows(), first.cols());
        if branches.iter().any(|b| b.rows() != r || b.cols() != c) {
            return Err(Error::Shape("policy branches differ in shape".into()));
        }
        Ok(Self { branches })
    }

    pub fn branch(&self, y_prev: usize) -> &PolicyBranch {
        &self.branches[y_prev]
    }

    pub fn branches(&self) -> &[PolicyBranch] {
        &self.branches
    }

    pub fn y_prev_size(&self) -> usize {
        self.branches.len()
    }

    pub fn x_size(&self) -> usize {
        self.branches[0].cols()
    }

    pub fn y_size(&self) -> usize {
        self.branches[0].rows()
    }
}

/// Source with initial law `P_0(x_0)` and kernels `K_t`, `t = 1..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovSource {
    initial: ProbVector,
    kernels: Vec<StochasticMatrix>,
}

impl MarkovSource {
    pub fn new(initial: ProbVector, kernels: Vec<StochasticMatrix>) -> Result<Self> {
        let mut prev = initial.len();
        for (i, k) in kernels.iter().enumerate() {
            if k.cols() != prev {
                return Err(Error::Shape(format!(
                    "kernel for stage {} has {} columns, previous alphabet has {prev} symbols",
                    i + 1,
                    k.cols()
                )));
            }
            prev = k.rows();
        }
        Ok(Self { initial, kernels })
    }

    /// Binary symmetric chain, `K_t = [[1-a_t, a_t], [a_t, 1-a_t]]` for
    /// `t = 1..=alphas.len()`.
    pub fn binary_symmetric(initial: ProbVector, alphas: &[f64]) -> Result<Self> {
        let kernels = alphas
            .iter()
            .map(|&a| {
                if !(0.0..=1.0).contains(&a) {
                    return Err(Error::InvalidParameter(format!(
                        "crossover {a} outside [0, 1]"
                    )));
                }
                StochasticMatrix::from_table(&[vec![1.0 - a, a], vec![a, 1.0 - a]])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(initial, kernels)
    }

    pub fn horizon(&self) -> usize {
        self.kernels.len()
    }

    pub fn initial(&self) -> &ProbVector {
        &self.initial
    }

    /// `K_t` for `t` in `1..=n`.
    pub fn kernel(&self, t: usize) -> &StochasticMatrix {
        assert!(t >= 1, "stage 0 has no transition kernel");
        &self.kernels[t - 1]
    }

    pub fn x_size(&self, t: usize) -> usize {
        if t == 0 {
            self.initial.len()
        } else {
            self.kernels[t - 1].rows()
        }
    }
}

/// Single-letter fidelity `rho_t(x_t, y_t)`, row-major over `x_t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionMatrix {
    x_size: usize,
    y_size: usize,
    data: Vec<f64>,
}

impl DistortionMatrix {
    pub fn from_table(table: &[Vec<f64>]) -> Result<Self> {
        let x_size = table.len();
        let y_size = table.first().map_or(0, Vec::len);
        if x_size == 0 || y_size == 0 || table.iter().any(|r| r.len() != y_size) {
            return Err(Error::Shape(
                "distortion table must be a nonempty rectangle".into(),
            ));
        }
        if table.iter().flatten().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::InvalidParameter(
                "distortion entries must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            x_size,
            y_size,
            data: table.concat(),
        })
    }

    pub fn hamming(x_size: usize, y_size: usize) -> Self {
        let data = (0..x_size)
            .flat_map(|x| (0..y_size).map(move |y| if x == y { 0.0 } else { 1.0 }))
            .collect();
        Self {
            x_size,
            y_size,
            data,
        }
    }

    pub fn x_size(&self) -> usize {
        self.x_size
    }

    pub fn y_size(&self) -> usize {
        self.y_size
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[x * self.y_size + y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionModel {
    stages: Vec<DistortionMatrix>,
}

impl DistortionModel {
    pub fn new(stages: Vec<DistortionMatrix>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::Shape("distortion model needs stage 0".into()));
        }
        Ok(Self { stages })
    }

    /// Hamming distortion at every stage `0..=horizon`.
    pub fn hamming(size: usize, horizon: usize) -> Self {
        Self {
            stages: vec![DistortionMatrix::hamming(size, size); horizon + 1],
        }
    }

    pub fn stage(&self, t: usize) -> &DistortionMatrix {
        &self.stages[t]
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }
}

/// Per-stage alphabet sizes for stages `0..=n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageAlphabets {
    pub x_sizes: Vec<usize>,
    pub y_sizes: Vec<usize>,
}

impl StageAlphabets {
    pub fn from_model(source: &MarkovSource, distortion: &DistortionModel) -> Result<Self> {
        let n = source.horizon();
        if distortion.stage_count() != n + 1 {
            return Err(Error::Shape(format!(
                "source has {} stages, distortion model has {}",
                n + 1,
                distortion.stage_count()
            )));
        }
        let x_sizes: Vec<usize> = (0..=n).map(|t| source.x_size(t)).collect();
        for (t, &x) in x_sizes.iter().enumerate() {
            if distortion.stage(t).x_size() != x {
                return Err(Error::Shape(format!(
                    "stage {t}: source alphabet has {x} symbols, distortion has {} rows",
                    distortion.stage(t).x_size()
                )));
            }
        }
        let y_sizes = (0..=n).map(|t| distortion.stage(t).y_size()).collect();
        Ok(Self { x_sizes, y_sizes })
    }

    pub fn horizon(&self) -> usize {
        self.x_sizes.len() - 1
    }
}

/// Lagrange prices `s_t <= 0` for `t = 0..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagrangeSchedule(Vec<f64>);

impl LagrangeSchedule {
    pub fn new(prices: Vec<f64>) -> Result<Self> {
        if prices.is_empty() {
            return Err(Error::InvalidParameter("empty Lagrange schedule".into()));
        }
        if let Some(s) = prices.iter().find(|s| !s.is_finite() || **s > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "Lagrange multiplier {s} must be finite and <= 0"
            )));
        }
        Ok(Self(prices))
    }

    pub fn constant(s: f64, horizon: usize) -> Result<Self> {
        Self::new(vec![s; horizon + 1])
    }

    pub fn at(&self, t: usize) -> f64 {
        self.0[t]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A (rate, distortion) pair; the rate includes any look-ahead term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StagePoint {
    pub rate: f64,
    pub distortion: f64,
}

pub fn predictive_belief(kernel: &StochasticMatrix, belief: &Belief) -> Result<PredictiveBelief> {
    if kernel.cols() != belief.rows() {
        return Err(Error::Shape(format!(
            "kernel has {} columns, belief has {} rows",
            kernel.cols(),
            belief.rows()
        )));
    }
    let columns = belief
        .matrix()
        .columns()
        .map(|c| ProbVector::new(kernel.apply(c)?))
        .collect::<Result<Vec<_>>>()?;
    PredictiveBelief::from_columns(columns)
}

/// Output law induced by a branch policy: `sum_x pred(x) W(y|x)`.
pub fn induced_output(pred: &[f64], policy: &PolicyBranch) -> Result<ProbVector> {
    if pred.len() != policy.cols() {
        return Err(Error::Shape(format!(
            "prediction over {} symbols, policy over {}",
            pred.len(),
            policy.cols()
        )));
    }
    let mut out = vec![0.0; policy.rows()];
    for (x, &p) in pred.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(policy.column(x)) {
            *o += p * w;
        }
    }
    ProbVector::normalized(out)
}

/// Single-branch form of [`stage_objective`].
///
/// `sum_{x,y} pred(x) W(y|x) [ln(W(y|x) / q(y)) + lookahead(y)]`, with
/// `0 ln(0/q) = 0`.
pub fn branch_objective(
    pred: &[f64],
    policy: &PolicyBranch,
    output: &[f64],
    lookahead: &[f64],
) -> Result<f64> {
    let (y_size, x_size) = (policy.rows(), policy.cols());
    if pred.len() != x_size || output.len() != y_size || lookahead.len() != y_size {
        return Err(Error::Shape(format!(
            "objective: pred {} / policy {y_size}x{x_size} / output {} / lookahead {}",
            pred.len(),
            output.len(),
            lookahead.len()
        )));
    }
    let log_output: Vec<f64> = output.iter().map(|q| q.ln()).collect();
    let mut total = 0.0;
    for (x, &p) in pred.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let mut inner = 0.0;
        for (y, &w) in policy.column(x).iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            if output[y] == 0.0 {
                return Err(Error::SupportViolation { symbol: y });
            }
            inner += w * (w.ln() - log_output[y] + lookahead[y]);
        }
        total += p * inner;
    }
    Ok(total)
}

pub fn stage_objective(
    pred: &PredictiveBelief,
    policy: &Policy,
    output: &OutputKernel,
    lookahead: &[f64],
    branch: usize,
) -> Result<f64> {
    check_branch(branch, pred.cols(), policy.y_prev_size(), output.cols())?;
    branch_objective(
        pred.column(branch),
        policy.branch(branch),
        output.column(branch),
        lookahead,
    )
}

/// Single-branch form of [`stage_distortion`].
pub fn branch_distortion(
    pred: &[f64],
    policy: &PolicyBranch,
    rho: &DistortionMatrix,
) -> Result<f64> {
    if pred.len() != policy.cols() || rho.x_size() != policy.cols() || rho.y_size() != policy.rows()
    {
        return Err(Error::Shape(format!(
            "distortion: pred {} / policy {}x{} / rho {}x{}",
            pred.len(),
            policy.rows(),
            policy.cols(),
            rho.x_size(),
            rho.y_size()
        )));
    }
    Ok(pred
        .iter()
        .enumerate()
        .map(|(x, &p)| {
            p * policy
                .column(x)
                .iter()
                .enumerate()
                .map(|(y, &w)| w * rho.get(x, y))
                .sum::<f64>()
        })
        .sum())
}

pub fn stage_distortion(
    pred: &PredictiveBelief,
    policy: &Policy,
    rho: &DistortionMatrix,
    branch: usize,
) -> Result<f64> {
    check_branch(
        branch,
        pred.cols(),
        policy.y_prev_size(),
        policy.y_prev_size(),
    )?;
    branch_distortion(pred.column(branch), policy.branch(branch), rho)
}

fn check_branch(branch: usize, pred: usize, policy: usize, output: usize) -> Result<()> {
    if pred != policy || policy != output {
        return Err(Error::Shape(format!(
            "branch counts differ: pred {pred}, policy {policy}, output {output}"
        )));
    }
    if branch >= pred {
        return Err(Error::Shape(format!("branch {branch} out of {pred}")));
    }
    Ok(())
}

/// Result of [`bayes_belief_update`]. Output symbols with zero probability
/// get a uniform column and are listed in `unreachable`.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesUpdate {
    pub belief: Belief,
    pub unreachable: Vec<usize>,
}

/// `P_{t+1}(x_t | y_t)` from `P_t(x_{t-1} | y_{t-1})`, the policy and `K_t`:
/// column `y_t` is
/// `sum_{y_{t-1}, x_{t-1}} W(y_t | y_{t-1}, x_t) K(x_t | x_{t-1}) P(x_{t-1} | y_{t-1})`
/// normalized over `x_t`.
pub fn bayes_belief_update(
    belief: &Belief,
    policy: &Policy,
    kernel: &StochasticMatrix,
) -> Result<BayesUpdate> {
    if belief.cols() != policy.y_prev_size() {
        return Err(Error::Shape(format!(
            "belief has {} columns, policy has {} branches",
            belief.cols(),
            policy.y_prev_size()
        )));
    }
    if kernel.cols() != belief.rows() || kernel.rows() != policy.x_size() {
        return Err(Error::Shape(format!(
            "kernel {}x{} does not connect belief rows {} to policy inputs {}",
            kernel.rows(),
            kernel.cols(),
            belief.rows(),
            policy.x_size()
        )));
    }
    let (x_size, y_size) = (policy.x_size(), policy.y_size());
    // joint[y][x]
    let mut joint = vec![vec![0.0; x_size]; y_size];
    for y_prev in 0..belief.cols() {
        let mut predicted = vec![0.0; x_size];
        for (x_prev, &b) in belief.column(y_prev).iter().enumerate() {
            for (x, p) in predicted.iter_mut().enumerate() {
                *p += kernel.get(x, x_prev) * b;
            }
        }
        let branch = policy.branch(y_prev);
        for (x, &p) in predicted.iter().enumerate() {
            for (y, row) in joint.iter_mut().enumerate() {
                row[x] += branch.get(y, x) * p;
            }
        }
    }
    let mut unreachable = Vec::new();
    let columns = joint
        .into_iter()
        .enumerate()
        .map(|(y, col)| {
            if col.iter().sum::<f64>() > 0.0 {
                ProbVector::normalized(col)
            } else {
                unreachable.push(y);
                Ok(ProbVector::uniform(x_size))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BayesUpdate {
        belief: Belief::from_columns(columns)?,
        unreachable,
    })
}

pub fn output_marginal_step(prev: &ProbVector, output: &OutputKernel) -> Result<ProbVector> {
    ProbVector::normalized(output.matrix().apply(prev.as_slice())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = 1e-12;

    fn alpha_kernel(a: f64) -> StochasticMatrix {
        StochasticMatrix::from_table(&[vec![1.0 - a, a], vec![a, 1.0 - a]]).unwrap()
    }

    fn belief(cols: &[[f64; 2]]) -> Belief {
        Belief::from_columns(
            cols.iter()
                .map(|c| ProbVector::new(c.to_vec()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn branch(cols: &[&[f64]]) -> PolicyBranch {
        PolicyBranch::from_columns(
            cols.iter()
                .map(|c| ProbVector::new(c.to_vec()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![0.3, 0.7]).is_ok());
        assert!(ProbVector::new(vec![0.3, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        assert!(ProbVector::normalized(vec![0.0, 0.0]).is_err());
        let v = ProbVector::normalized(vec![1.0, 3.0]).unwrap();
        assert_eq!(v.as_slice(), &[0.25, 0.75]);
    }

    #[test]
    fn matrix_orientation_is_column_stochastic() {
        // [row][col] table: P(x_t = row | x_{t-1} = col)
        let k = StochasticMatrix::from_table(&[vec![0.9, 0.2], vec![0.1, 0.8]]).unwrap();
        assert_eq!(k.column(0), &[0.9, 0.1]);
        assert_eq!(k.get(0, 1), 0.2);
        // rows summing to one but columns not
        assert!(StochasticMatrix::from_table(&[vec![0.5, 0.5], vec![0.1, 0.9]]).is_err());
    }

    #[test]
    fn predictive_belief_examples() {
        let k = alpha_kernel(0.4);
        let p = predictive_belief(&k, &belief(&[[1.0, 0.0], [0.5, 0.5], [0.7, 0.3]])).unwrap();
        assert!((p.get(0, 0) - 0.6).abs() < EPS && (p.get(1, 0) - 0.4).abs() < EPS);
        assert!((p.get(0, 1) - 0.5).abs() < EPS && (p.get(1, 1) - 0.5).abs() < EPS);
        // 0.6*0.7 + 0.4*0.3
        assert!((p.get(0, 2) - 0.54).abs() < EPS && (p.get(1, 2) - 0.46).abs() < EPS);
    }

    #[test]
    fn predictive_belief_shape_error() {
        let k = StochasticMatrix::identity(3);
        let b = belief(&[[0.5, 0.5]]);
        assert!(matches!(predictive_belief(&k, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn objective_examples() {
        let pred = [0.5, 0.5];
        let out = [0.3, 0.7];
        let same = branch(&[&out, &out]);
        assert!(
            branch_objective(&pred, &same, &out, &[0.0, 0.0])
                .unwrap()
                .abs()
                < EPS
        );
        let c = 1.75;
        assert!((branch_objective(&pred, &same, &out, &[c, c]).unwrap() - c).abs() < EPS);

        let identity = branch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = branch_objective(&pred, &identity, &[0.5, 0.5], &[0.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < EPS);
    }

    #[test]
    fn objective_support_violation() {
        let identity = branch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let err = branch_objective(&[0.5, 0.5], &identity, &[1.0, 0.0], &[0.0, 0.0]);
        assert!(matches!(err, Err(Error::SupportViolation { symbol: 1 })));
    }

    #[test]
    fn stage_objective_selects_branch() {
        let pred = PredictiveBelief::from_columns(vec![
            ProbVector::uniform(2),
            ProbVector::new(vec![1.0, 0.0]).unwrap(),
        ])
        .unwrap();
        let identity = branch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let policy = Policy::new(vec![identity.clone(), identity]).unwrap();
        let output = OutputKernel::from_columns(vec![ProbVector::uniform(2); 2]).unwrap();
        let b0 = stage_objective(&pred, &policy, &output, &[0.0, 0.0], 0).unwrap();
        let b1 = stage_objective(&pred, &policy, &output, &[0.0, 0.0], 1).unwrap();
        assert!((b0 - std::f64::consts::LN_2).abs() < EPS);
        // x = 0 surely, y = 0 surely, output 1/2: ln 2
        assert!((b1 - std::f64::consts::LN_2).abs() < EPS);
        assert!(stage_objective(&pred, &policy, &output, &[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn distortion_examples() {
        let rho = DistortionMatrix::hamming(2, 2);
        let identity = branch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(
            branch_distortion(&[0.3, 0.7], &identity, &rho).unwrap(),
            0.0
        );

        let coin = branch(&[&[0.5, 0.5], &[0.5, 0.5]]);
        assert!((branch_distortion(&[0.5, 0.5], &coin, &rho).unwrap() - 0.5).abs() < EPS);

        let soft = branch(&[&[0.8808, 0.1192], &[0.1192, 0.8808]]);
        // 0.54*0.1192 + 0.46*0.1192
        let d = branch_distortion(&[0.54, 0.46], &soft, &rho).unwrap();
        assert!((d - 0.1192).abs() < EPS);
    }

    #[test]
    fn bayes_deterministic_chain() {
        let identity = branch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let policy = Policy::new(vec![identity.clone(), identity]).unwrap();
        let b = belief(&[[1.0, 0.0], [1.0, 0.0]]);
        let up = bayes_belief_update(&b, &policy, &StochasticMatrix::identity(2)).unwrap();
        assert_eq!(up.belief.column(0), &[1.0, 0.0]);
        // y = 1 cannot occur when x = 0 surely
        assert_eq!(up.unreachable, vec![1]);
        assert_eq!(up.belief.column(1), &[0.5, 0.5]);
    }

    #[test]
    fn bayes_preserves_swap_symmetry() {
        let k = alpha_kernel(0.3);
        let b0 = branch(&[&[0.9, 0.1], &[0.2, 0.8]]);
        let b1 = branch(&[&[0.8, 0.2], &[0.1, 0.9]]);
        let policy = Policy::new(vec![b0, b1]).unwrap();
        let b = belief(&[[0.75, 0.25], [0.25, 0.75]]);
        let up = bayes_belief_update(&b, &policy, &k).unwrap();
        let (c0, c1) = (up.belief.column(0), up.belief.column(1));
        assert!((c0[0] - c1[1]).abs() < EPS && (c0[1] - c1[0]).abs() < EPS);
        assert!(up.unreachable.is_empty());
    }

    #[test]
    fn bayes_matches_joint_enumeration() {
        // policy of a converged s = -2 symmetric stage
        let d = (-2.0f64).exp() / (1.0 + (-2.0f64).exp());
        let k = alpha_kernel(0.4);
        let br = branch(&[&[1.0 - d, d], &[d, 1.0 - d]]);
        let policy = Policy::new(vec![br.clone(), br]).unwrap();
        let prior = belief(&[[0.5, 0.5], [0.5, 0.5]]);
        let up = bayes_belief_update(&prior, &policy, &k).unwrap();

        // enumerate the unnormalized joint over (x_{t-1}, y_{t-1}, x_t, y_t)
        let mut joint = [[0.0; 2]; 2];
        for yp in 0..2 {
            for xp in 0..2 {
                for x in 0..2 {
                    for y in 0..2 {
                        joint[y][x] +=
                            prior.get(xp, yp) * k.get(x, xp) * policy.branch(yp).get(y, x);
                    }
                }
            }
        }
        for y in 0..2 {
            let z = joint[y][0] + joint[y][1];
            for x in 0..2 {
                assert!((up.belief.get(x, y) - joint[y][x] / z).abs() < EPS);
            }
        }
    }

    #[test]
    fn output_marginal_examples() {
        let kernel = OutputKernel::from_columns(vec![
            ProbVector::new(vec![0.9, 0.1]).unwrap(),
            ProbVector::new(vec![0.2, 0.8]).unwrap(),
        ])
        .unwrap();
        let m = output_marginal_step(&ProbVector::point_mass(2, 0), &kernel).unwrap();
        assert_eq!(m.as_slice(), &[0.9, 0.1]);
        let m = output_marginal_step(&ProbVector::new(vec![0.3, 0.7]).unwrap(), &kernel).unwrap();
        assert!((m[0] - 0.41).abs() < EPS && (m[1] - 0.59).abs() < EPS);
        let ds = OutputKernel::from_columns(vec![
            ProbVector::new(vec![0.3, 0.7]).unwrap(),
            ProbVector::new(vec![0.7, 0.3]).unwrap(),
        ])
        .unwrap();
        let m = output_marginal_step(&ProbVector::uniform(2), &ds).unwrap();
        assert!((m[0] - 0.5).abs() < EPS);
    }

    #[test]
    fn alphabets_and_schedule_validation() {
        let src = MarkovSource::binary_symmetric(ProbVector::uniform(2), &[0.1, 0.2]).unwrap();
        let dist = DistortionModel::hamming(2, 2);
        let ab = StageAlphabets::from_model(&src, &dist).unwrap();
        assert_eq!(ab.horizon(), 2);
        assert!(StageAlphabets::from_model(&src, &DistortionModel::hamming(2, 1)).is_err());
        assert!(LagrangeSchedule::new(vec![-1.0, 0.5]).is_err());
        assert!(LagrangeSchedule::new(vec![-1.0, 0.0]).is_ok());
        assert!(MarkovSource::binary_symmetric(ProbVector::uniform(2), &[1.5]).is_err());
    }
}

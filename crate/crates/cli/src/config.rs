//! Run configuration, read from a TOML file.
//!
//! ```toml
//! horizon = 20
//! grid_levels = 10          # or one entry per stage 1..=n
//! s = -2.0                  # or one entry per stage 0..=n
//! epsilon = 1e-6
//! max_iter = 10000
//! workers = 1
//! log_base = "nats"
//!
//! [source]
//! kind = "binary_symmetric" # or "seeded_binary_symmetric", "explicit"
//! alpha = 0.4               # or a list, one per stage 1..=n
//!
//! [distortion]
//! kind = "hamming"          # or "explicit" with `matrices`
//!
//! [output]
//! dir = "out"
//! convergence_every = 1
//! ```

use std::path::{Path, PathBuf};

use nrdf_core::am_stage::{AmSettings, DEFAULT_EPSILON, DEFAULT_MAX_ITER};
use nrdf_core::backward::DEFAULT_MEMORY_CAP;
use nrdf_core::model::{
    DistortionMatrix, DistortionModel, LagrangeSchedule, MarkovSource, ProbVector, StochasticMatrix,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerStage<T> {
    Scalar(T),
    List(Vec<T>),
}

impl<T: Copy> PerStage<T> {
    fn expand(&self, count: usize, what: &str) -> Result<Vec<T>, CliError> {
        match self {
            PerStage::Scalar(v) => Ok(vec![*v; count]),
            PerStage::List(v) if v.len() == count => Ok(v.clone()),
            PerStage::List(v) => Err(CliError::Validation(format!(
                "{what}: expected {count} entries, got {}",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    /// `[[1-a, a], [a, 1-a]]` kernels; `alpha` per stage `1..=n` or scalar.
    BinarySymmetric {
        alpha: PerStage<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        initial: Option<Vec<f64>>,
    },
    /// Crossovers drawn uniformly from `[alpha_min, alpha_max]` by a seeded
    /// ChaCha8 generator.
    SeededBinarySymmetric {
        seed: u64,
        alpha_min: f64,
        alpha_max: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        initial: Option<Vec<f64>>,
    },
    /// `kernels[t - 1][x_t][x_{t-1}]` for `t = 1..=n`.
    Explicit {
        initial: Vec<f64>,
        kernels: Vec<Vec<Vec<f64>>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistortionSpec {
    #[default]
    Hamming,
    /// `matrices[t][x_t][y_t]` for `t = 0..=n`.
    Explicit { matrices: Vec<Vec<Vec<f64>>> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LogBase {
    #[default]
    Nats,
    Bits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    /// Record AM convergence traces for every k-th stage; 0 disables them.
    #[serde(default = "default_every")]
    pub convergence_every: usize,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            convergence_every: default_every(),
        }
    }
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_every() -> usize {
    1
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub horizon: usize,
    pub grid_levels: PerStage<usize>,
    pub s: PerStage<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub log_base: LogBase,
    /// Fixed `P_0(y_0)`; derived by the stage-0 solve when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_output: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory_cap_bytes: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_s: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench_workers: Option<Vec<usize>>,
    pub source: SourceSpec,
    #[serde(default)]
    pub distortion: DistortionSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

/// Fully validated problem, ready for the solver.
#[derive(Debug, Clone)]
pub struct Problem {
    pub source: MarkovSource,
    pub distortion: DistortionModel,
    pub schedule: LagrangeSchedule,
    pub levels: Vec<usize>,
    pub am: AmSettings,
    pub workers: usize,
    pub memory_cap_bytes: u64,
    pub initial_output: Option<ProbVector>,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub horizon: Option<usize>,
    pub grid_levels: Option<usize>,
    pub s: Option<f64>,
    pub workers: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(n) = o.horizon {
            self.horizon = n;
        }
        if let Some(levels) = o.grid_levels {
            self.grid_levels = PerStage::Scalar(levels);
        }
        if let Some(s) = o.s {
            self.s = PerStage::Scalar(s);
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(dir) = &o.out_dir {
            self.output.dir = dir.clone();
        }
    }

    pub fn problem(&self) -> Result<Problem, CliError> {
        let n = self.horizon;
        let source = self.build_source()?;
        let distortion = match &self.distortion {
            DistortionSpec::Hamming => DistortionModel::new(
                (0..=n)
                    .map(|t| DistortionMatrix::hamming(source.x_size(t), source.x_size(t)))
                    .collect(),
            )?,
            DistortionSpec::Explicit { matrices } => {
                if matrices.len() != n + 1 {
                    return Err(CliError::Validation(format!(
                        "distortion: expected {} matrices, got {}",
                        n + 1,
                        matrices.len()
                    )));
                }
                DistortionModel::new(
                    matrices
                        .iter()
                        .map(|m| DistortionMatrix::from_table(m))
                        .collect::<Result<_, _>>()?,
                )?
            }
        };
        let schedule = LagrangeSchedule::new(self.s.expand(n + 1, "s")?)?;
        let levels = self.grid_levels.expand(n, "grid_levels")?;
        if levels.contains(&0) {
            return Err(CliError::Validation("grid_levels must be >= 1".into()));
        }
        let am = AmSettings {
            epsilon: self.epsilon,
            max_iter: self.max_iter,
        };
        am.validate()?;
        if self.workers == 0 {
            return Err(CliError::Validation("workers must be >= 1".into()));
        }
        let initial_output = self
            .initial_output
            .as_ref()
            .map(|q| ProbVector::new(q.clone()))
            .transpose()?;
        if let Some(q) = &initial_output {
            if q.len() != distortion.stage(0).y_size() || !q.is_strictly_positive() {
                return Err(CliError::Validation(
                    "initial_output must be a strictly positive law over Y_0".into(),
                ));
            }
        }
        nrdf_core::model::StageAlphabets::from_model(&source, &distortion)?;
        Ok(Problem {
            source,
            distortion,
            schedule,
            levels,
            am,
            workers: self.workers,
            memory_cap_bytes: self.memory_cap_bytes.unwrap_or(DEFAULT_MEMORY_CAP),
            initial_output,
        })
    }

    fn build_source(&self) -> Result<MarkovSource, CliError> {
        let n = self.horizon;
        let initial = |v: &Option<Vec<f64>>| -> Result<ProbVector, CliError> {
            Ok(match v {
                Some(v) => ProbVector::new(v.clone())?,
                None => ProbVector::uniform(2),
            })
        };
        let source = match &self.source {
            SourceSpec::BinarySymmetric { alpha, initial: p0 } => {
                MarkovSource::binary_symmetric(initial(p0)?, &alpha.expand(n, "alpha")?)?
            }
            SourceSpec::SeededBinarySymmetric {
                seed,
                alpha_min,
                alpha_max,
                initial: p0,
            } => {
                if !(0.0..=1.0).contains(alpha_min)
                    || !(0.0..=1.0).contains(alpha_max)
                    || alpha_min > alpha_max
                {
                    return Err(CliError::Validation(format!(
                        "alpha range [{alpha_min}, {alpha_max}] is not inside [0, 1]"
                    )));
                }
                MarkovSource::binary_symmetric(
                    initial(p0)?,
                    &seeded_alphas(*seed, *alpha_min, *alpha_max, n),
                )?
            }
            SourceSpec::Explicit { initial, kernels } => {
                if kernels.len() != n {
                    return Err(CliError::Validation(format!(
                        "source: expected {n} kernels, got {}",
                        kernels.len()
                    )));
                }
                MarkovSource::new(
                    ProbVector::new(initial.clone())?,
                    kernels
                        .iter()
                        .map(|k| StochasticMatrix::from_table(k))
                        .collect::<Result<_, _>>()?,
                )?
            }
        };
        Ok(source)
    }
}

pub fn seeded_alphas(seed: u64, lo: f64, hi: f64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| if hi > lo { rng.gen_range(lo..=hi) } else { lo })
        .collect()
}

//! Online forward computation along the best belief trajectory.
//!
//! Stage 0 is a single-branch AM on `P_0(x_0)` whose look-ahead is
//! `min_{b'} V_1(y_0, b')`; its Bayes posterior, projected on `B_1`, is the
//! first belief `b*_1`. For `t >= 1` the next belief minimizes
//! `sum_{y_{t-1}} rate[t][b*_t][b'][y_{t-1}] P(y_{t-1})`, and the chosen
//! cell is re-solved to recover the policy and output kernel. Candidates
//! within the solver tolerance of the minimum have the same look-ahead for
//! all practical purposes (symmetric sources produce exact mirror ties);
//! among them the one nearest the Bayes update of the current belief wins,
//! then the lowest index.
//!
//! Reported stage rates are the conditional mutual information
//! `I(X_t; Y_t | Y_{t-1})` without the look-ahead term; the stored table
//! rates include it.

use log::debug;
use serde::Serialize;

use crate::am_stage::{run_branch_am, run_branch_am_traced, AmResult, AmSettings, IterationRecord};
use crate::backward::BackwardTables;
use crate::error::{Error, Result};
use crate::grid::GridIndex;
use crate::model::{
    bayes_belief_update, branch_distortion, branch_objective, output_marginal_step, Belief,
    DistortionMatrix, DistortionModel, LagrangeSchedule, MarkovSource, OutputKernel, Policy,
    PolicyBranch, ProbVector, StagePoint, StochasticMatrix,
};

/// Forward re-runs must reproduce stored rates within this many tolerances.
pub const CONSISTENCY_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRecord {
    pub t: usize,
    /// `b*_t`; absent at stage 0.
    pub grid_index: Option<usize>,
    /// `P*_t(x_{t-1} | y_{t-1})`; at stage 0 this is the posterior
    /// `P_1(x_0 | y_0)` before projection.
    pub belief: Belief,
    pub policy: Policy,
    pub output: OutputKernel,
    /// `P_t(y_t)`.
    pub marginal: ProbVector,
    /// Conditional mutual information of the stage, nats.
    pub rate: f64,
    pub distortion: f64,
    /// Per-branch stage objective including look-ahead, as re-solved.
    pub rerun_rates: Vec<f64>,
    /// Per-branch stored backward table rates (empty at stage 0).
    pub table_rates: Vec<f64>,
    pub iterations: Vec<usize>,
    pub final_gap: f64,
    pub converged: bool,
    /// L1 distance between the Bayes update of this stage and the chosen
    /// next grid point; absent at the last stage.
    pub projection_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub stages: Vec<StageRecord>,
    pub total_sum: f64,
    pub total_avg: f64,
    pub average_distortion: f64,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.stages.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage0 {
    pub policy: PolicyBranch,
    pub output: ProbVector,
    pub posterior: Belief,
    pub unreachable: Vec<usize>,
    pub point: StagePoint,
    pub am: AmResult,
}

/// Stage-0 solve. With `output_override` the policy is the single policy
/// update from the given `P_0(y_0)`; otherwise `P_0(y_0)` is the converged
/// AM output started from uniform. `point.rate` excludes the look-ahead.
pub fn init_stage0(
    initial: &ProbVector,
    rho: &DistortionMatrix,
    s0: f64,
    lookahead: &[f64],
    settings: AmSettings,
    output_override: Option<&ProbVector>,
    observer: impl FnMut(&IterationRecord),
) -> Result<Stage0> {
    let pred = initial.as_slice();
    let am = match output_override {
        None => run_branch_am_traced(pred, rho, s0, lookahead, settings, None, observer)?,
        Some(q) => run_branch_am_traced(
            pred,
            rho,
            s0,
            lookahead,
            AmSettings {
                max_iter: 1,
                ..settings
            },
            Some(q),
            observer,
        )?,
    };
    let zeros = vec![0.0; rho.y_size()];
    let rate = branch_objective(pred, &am.policy, am.output.as_slice(), &zeros)?;
    let distortion = branch_distortion(pred, &am.policy, rho)?;

    // P(x_0 | y_0) as a one-branch Bayes step through the identity kernel
    let prior = Belief::from_columns(vec![initial.clone()])?;
    let policy = Policy::new(vec![am.policy.clone()])?;
    let update = bayes_belief_update(&prior, &policy, &StochasticMatrix::identity(initial.len()))?;

    Ok(Stage0 {
        policy: am.policy.clone(),
        output: am.output.clone(),
        posterior: update.belief,
        unreachable: update.unreachable,
        point: StagePoint {
            rate: rate.max(0.0),
            distortion,
        },
        am,
    })
}

/// `argmin_{b'} sum_{y} rate[t][b*_t][b'][y] P(y)`, lowest index on ties.
pub fn best_next_belief(
    t: usize,
    current: GridIndex,
    tables: &BackwardTables,
    marginal: &ProbVector,
) -> Result<GridIndex> {
    let stage = tables.stage(t);
    if marginal.len() != stage.branches {
        return Err(Error::Shape(format!(
            "marginal over {} symbols, stage {t} has {} branches",
            marginal.len(),
            stage.branches
        )));
    }
    if current.0 >= stage.current_points {
        return Err(Error::Shape(format!(
            "grid index {} outside B_{t} of size {}",
            current.0, stage.current_points
        )));
    }
    let mut best = (f64::INFINITY, 0);
    for bn in 0..stage.next_points {
        let avg: f64 = (0..stage.branches)
            .map(|y| stage.rate(current.0, bn, y) * marginal[y])
            .sum();
        if avg < best.0 {
            best = (avg, bn);
        }
    }
    Ok(GridIndex(best.1))
}

/// Every `b'` whose averaged rate is within `tolerance` of the minimum, in
/// ascending index order. The first entry is [`best_next_belief`].
pub fn near_best_next_beliefs(
    t: usize,
    current: GridIndex,
    tables: &BackwardTables,
    marginal: &ProbVector,
    tolerance: f64,
) -> Result<Vec<GridIndex>> {
    let best = best_next_belief(t, current, tables, marginal)?;
    let stage = tables.stage(t);
    let averaged = |bn: usize| -> f64 {
        (0..stage.branches)
            .map(|y| stage.rate(current.0, bn, y) * marginal[y])
            .sum()
    };
    let floor = averaged(best.0);
    Ok((0..stage.next_points)
        .filter(|&bn| averaged(bn) <= floor + tolerance)
        .map(GridIndex)
        .collect())
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub initial_output: Option<ProbVector>,
}

pub fn forward_pass(
    tables: &BackwardTables,
    source: &MarkovSource,
    distortion: &DistortionModel,
    schedule: &LagrangeSchedule,
    options: &ForwardOptions,
) -> Result<Trajectory> {
    forward_pass_traced(tables, source, distortion, schedule, options, |_, _, _| {})
}

/// [`forward_pass`] reporting every AM sweep as `(stage, branch, record)`.
pub fn forward_pass_traced(
    tables: &BackwardTables,
    source: &MarkovSource,
    distortion: &DistortionModel,
    schedule: &LagrangeSchedule,
    options: &ForwardOptions,
    mut observer: impl FnMut(usize, usize, &IterationRecord),
) -> Result<Trajectory> {
    check_tables(tables, source, distortion, schedule)?;
    let n = source.horizon();
    let settings = tables.settings();
    let tolerance = CONSISTENCY_FACTOR * settings.epsilon;

    let rho0 = distortion.stage(0);
    let lookahead0: Vec<f64> = (0..rho0.y_size())
        .map(|y| {
            if n == 0 {
                0.0
            } else {
                let st = tables.stage(1);
                (0..st.current_points)
                    .map(|b| st.value(y, b))
                    .fold(f64::INFINITY, f64::min)
            }
        })
        .collect();
    let s0 = init_stage0(
        source.initial(),
        rho0,
        schedule.at(0),
        &lookahead0,
        settings,
        options.initial_output.as_ref(),
        |rec| observer(0, 0, rec),
    )?;
    if !s0.unreachable.is_empty() {
        debug!("stage 0: output symbols {:?} unreachable", s0.unreachable);
    }

    let mut current = if n >= 1 {
        Some(tables.grid(1).project(&s0.posterior)?)
    } else {
        None
    };
    let mut stages = vec![StageRecord {
        t: 0,
        grid_index: None,
        belief: s0.posterior.clone(),
        policy: Policy::new(vec![s0.policy.clone()])?,
        output: OutputKernel::from_columns(vec![s0.output.clone()])?,
        marginal: s0.output.clone(),
        rate: s0.point.rate,
        distortion: s0.point.distortion,
        rerun_rates: vec![s0.am.point.rate],
        table_rates: Vec::new(),
        iterations: vec![s0.am.iterations],
        final_gap: s0.am.final_gap,
        converged: s0.am.converged,
        projection_distance: current.map(|b| tables.grid(1).distance(&s0.posterior, b)),
    }];
    let mut marginal = s0.output;

    for t in 1..=n {
        let b = current.expect("stage t >= 1 has a current belief");
        let belief = tables.grid(t).point(b).clone();
        let kernel = source.kernel(t);
        let rho = distortion.stage(t);
        let s = schedule.at(t);
        let stage_table = tables.stage(t);
        let preds = belief
            .matrix()
            .columns()
            .map(|c| kernel.apply(c))
            .collect::<Result<Vec<_>>>()?;

        let candidates = near_best_next_beliefs(t, b, tables, &marginal, settings.epsilon)?;
        let next = if candidates.len() == 1 {
            candidates[0]
        } else {
            // equal look-ahead up to the solver tolerance: follow the Bayes posterior
            let lookahead = tables.lookahead(t, rho.y_size(), candidates[0].0);
            let branches = preds
                .iter()
                .map(|p| run_branch_am(p, rho, s, &lookahead, settings, None).map(|r| r.policy))
                .collect::<Result<Vec<_>>>()?;
            let update = bayes_belief_update(&belief, &Policy::new(branches)?, kernel)?;
            let grid = tables.grid(t + 1);
            let mut best = (f64::INFINITY, candidates[0]);
            for &c in &candidates {
                let d = grid.distance(&update.belief, c);
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1
        };
        let lookahead = tables.lookahead(t, rho.y_size(), next.0);
        let zeros = vec![0.0; rho.y_size()];

        let mut record = StageRecord {
            t,
            grid_index: Some(b.0),
            belief: belief.clone(),
            policy: Policy::new(vec![PolicyBranch::new(StochasticMatrix::identity(1))])?,
            output: OutputKernel::from_columns(vec![ProbVector::uniform(1)])?,
            marginal: marginal.clone(),
            rate: 0.0,
            distortion: 0.0,
            rerun_rates: Vec::new(),
            table_rates: Vec::new(),
            iterations: Vec::new(),
            final_gap: 0.0,
            converged: true,
            projection_distance: None,
        };
        let mut branches = Vec::with_capacity(preds.len());
        let mut outputs = Vec::with_capacity(preds.len());
        for (y_prev, pred) in preds.iter().enumerate() {
            let am = run_branch_am_traced(pred, rho, s, &lookahead, settings, None, |rec| {
                observer(t, y_prev, rec)
            })?;
            let stored = stage_table.rate(b.0, next.0, y_prev);
            if (am.point.rate - stored).abs() > tolerance {
                return Err(Error::Consistency {
                    stage: t,
                    branch: y_prev,
                    rerun: am.point.rate,
                    stored,
                });
            }
            let weight = marginal[y_prev];
            let mi = branch_objective(pred, &am.policy, am.output.as_slice(), &zeros)?;
            record.rate += weight * mi.max(0.0);
            record.distortion += weight * branch_distortion(pred, &am.policy, rho)?;
            record.rerun_rates.push(am.point.rate);
            record.table_rates.push(stored);
            record.iterations.push(am.iterations);
            record.final_gap = record.final_gap.max(am.final_gap);
            record.converged &= am.converged;
            branches.push(am.policy);
            outputs.push(am.output);
        }
        record.policy = Policy::new(branches)?;
        record.output = OutputKernel::from_columns(outputs)?;
        marginal = output_marginal_step(&marginal, &record.output)?;
        record.marginal = marginal.clone();

        if t < n {
            let update = bayes_belief_update(&belief, &record.policy, kernel)?;
            let next_grid = tables.grid(t + 1);
            let distance = next_grid.distance(&update.belief, next);
            debug!(
                "stage {t}: next belief {} (nearest to Bayes update: {}, distance {distance:.4})",
                next.0,
                next_grid.project(&update.belief)?.0
            );
            record.projection_distance = Some(distance);
        }
        stages.push(record);
        current = Some(next);
    }

    let total_sum: f64 = stages.iter().map(|s| s.rate).sum();
    let count = (n + 1) as f64;
    let average_distortion = stages.iter().map(|s| s.distortion).sum::<f64>() / count;
    Ok(Trajectory {
        stages,
        total_sum,
        total_avg: total_sum / count,
        average_distortion,
    })
}

fn check_tables(
    tables: &BackwardTables,
    source: &MarkovSource,
    distortion: &DistortionModel,
    schedule: &LagrangeSchedule,
) -> Result<()> {
    if &tables.source != source {
        return Err(Error::ConfigMismatch(
            "source differs from the tables".into(),
        ));
    }
    if &tables.distortion != distortion {
        return Err(Error::ConfigMismatch(
            "distortion model differs from the tables".into(),
        ));
    }
    if tables.schedule != schedule.as_slice() {
        return Err(Error::ConfigMismatch(
            "Lagrange schedule differs from the tables".into(),
        ));
    }
    if tables.horizon() != source.horizon() {
        return Err(Error::ConfigMismatch(format!(
            "tables cover {} stages, source has {}",
            tables.horizon(),
            source.horizon()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backward::{backward_pass, build_grids, BackwardConfig, DEFAULT_MEMORY_CAP};
    use crate::model::StageAlphabets;

    fn hb(d: f64) -> f64 {
        if d <= 0.0 || d >= 1.0 {
            return 0.0;
        }
        -d * d.ln() - (1.0 - d) * (1.0 - d).ln()
    }

    fn setup(
        alphas: &[f64],
        resolution: usize,
        s: f64,
    ) -> (
        MarkovSource,
        DistortionModel,
        LagrangeSchedule,
        BackwardTables,
    ) {
        let n = alphas.len();
        let src = MarkovSource::binary_symmetric(ProbVector::uniform(2), alphas).unwrap();
        let dist = DistortionModel::hamming(2, n);
        let ab = StageAlphabets::from_model(&src, &dist).unwrap();
        let grids = build_grids(&ab, &vec![resolution; n]).unwrap();
        let schedule = LagrangeSchedule::constant(s, n).unwrap();
        let cfg = BackwardConfig {
            schedule: schedule.clone(),
            am: AmSettings::default(),
            workers: 1,
            memory_cap_bytes: DEFAULT_MEMORY_CAP,
        };
        let tables = backward_pass(&src, &dist, &grids, &cfg).unwrap();
        (src, dist, schedule, tables)
    }

    #[test]
    fn stage0_examples() {
        let rho = DistortionMatrix::hamming(2, 2);
        let zero = [0.0, 0.0];
        let s0 = init_stage0(
            &ProbVector::uniform(2),
            &rho,
            -2.0,
            &zero,
            AmSettings::default(),
            None,
            |_| {},
        )
        .unwrap();
        assert!((s0.point.rate - 0.327813).abs() < 1e-6);
        assert!((s0.point.distortion - 0.11920).abs() < 1e-5);

        let s0 = init_stage0(
            &ProbVector::uniform(2),
            &rho,
            0.0,
            &zero,
            AmSettings::default(),
            None,
            |_| {},
        )
        .unwrap();
        assert_eq!(s0.point.rate, 0.0);
        assert_eq!(s0.output.as_slice(), &[0.5, 0.5]);
        assert!((s0.point.distortion - 0.5).abs() < 1e-15);

        let s0 = init_stage0(
            &ProbVector::point_mass(2, 0),
            &rho,
            -3.0,
            &zero,
            AmSettings::default(),
            None,
            |_| {},
        )
        .unwrap();
        assert!(s0.point.rate.abs() < 1e-9);
    }

    #[test]
    fn stage0_override_fixes_output() {
        let rho = DistortionMatrix::hamming(2, 2);
        let q = ProbVector::new(vec![0.5, 0.5]).unwrap();
        let s0 = init_stage0(
            &ProbVector::uniform(2),
            &rho,
            -2.0,
            &[0.0, 0.0],
            AmSettings::default(),
            Some(&q),
            |_| {},
        )
        .unwrap();
        assert_eq!(s0.am.iterations, 1);
        assert!((s0.point.rate - 0.327813).abs() < 1e-6);
    }

    #[test]
    fn best_next_belief_examples() {
        let (_, _, _, mut tables) = setup(&[0.4, 0.4], 1, -1.0);
        // hand-built 3-point slice at stage 1, b* = 0
        let st = &mut tables.stages[0];
        st.next_points = 3;
        st.rate = vec![1.0, 0.2, 0.5, 0.5, 0.4, 0.9];
        let idx = best_next_belief(1, GridIndex(0), &tables, &ProbVector::uniform(2)).unwrap();
        assert_eq!(idx, GridIndex(1));
        let idx =
            best_next_belief(1, GridIndex(0), &tables, &ProbVector::point_mass(2, 0)).unwrap();
        assert_eq!(idx, GridIndex(2));

        let (_, _, _, tables) = setup(&[0.4], 2, -1.0);
        let idx = best_next_belief(1, GridIndex(3), &tables, &ProbVector::uniform(2)).unwrap();
        assert_eq!(idx, GridIndex(0));
    }

    #[test]
    fn horizon_zero_reduces_to_stage0() {
        let (src, dist, schedule, tables) = setup(&[], 3, -2.0);
        let traj =
            forward_pass(&tables, &src, &dist, &schedule, &ForwardOptions::default()).unwrap();
        assert_eq!(traj.stages.len(), 1);
        assert!((traj.total_avg - 0.327813).abs() < 1e-6);
        assert_eq!(traj.total_sum, traj.total_avg);
    }

    #[test]
    fn zero_price_has_zero_rate() {
        let (src, dist, schedule, tables) = setup(&[0.1, 0.3, 0.2], 3, 0.0);
        let traj =
            forward_pass(&tables, &src, &dist, &schedule, &ForwardOptions::default()).unwrap();
        assert_eq!(traj.total_avg, 0.0);
        for st in &traj.stages {
            assert_eq!(st.rate, 0.0);
            assert!((st.distortion - 0.5).abs() < 1e-12, "t = {}", st.t);
        }
    }

    #[test]
    fn memoryless_source_stages_are_classical() {
        // a = 0.5 kernels forget the past: every stage sees a uniform source
        let (src, dist, schedule, tables) = setup(&[0.5; 4], 4, -1.5);
        let traj =
            forward_pass(&tables, &src, &dist, &schedule, &ForwardOptions::default()).unwrap();
        for st in &traj.stages {
            let expected = std::f64::consts::LN_2 - hb(st.distortion);
            assert!((st.rate - expected).abs() < 1e-3, "t = {}", st.t);
            assert!(st.rate <= std::f64::consts::LN_2 + 1e-12);
        }
    }

    #[test]
    fn rejects_mismatched_tables() {
        let (src, dist, _, tables) = setup(&[0.4, 0.4], 2, -1.0);
        let other = LagrangeSchedule::constant(-2.0, 2).unwrap();
        assert!(matches!(
            forward_pass(&tables, &src, &dist, &other, &ForwardOptions::default()),
            Err(Error::ConfigMismatch(_))
        ));
    }

    #[test]
    fn corrupted_table_entry_is_detected() {
        let (src, dist, schedule, mut tables) = setup(&[0.4, 0.4], 2, -1.0);
        for r in tables.stages[1].rate.iter_mut() {
            *r += 1e-3;
        }
        assert!(matches!(
            forward_pass(&tables, &src, &dist, &schedule, &ForwardOptions::default()),
            Err(Error::Consistency { stage: 2, .. })
        ));
    }
}

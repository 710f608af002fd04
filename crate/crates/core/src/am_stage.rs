//! One DP cell: fixed stage, branch `y_{t-1}`, predictive belief and
//! look-ahead values, solved by alternating minimization between the policy
//! `W(y|x)` and the output law `q(y)`.
//!
//! With exponent weights `A(x, y) = exp(s rho(x, y) - L(y))` one sweep is
//!
//! ```text
//! Z(x)  = sum_y q(y) A(x, y)
//! W(y|x) = q(y) A(x, y) / Z(x)
//! c(y)  = sum_x p(x) A(x, y) / Z(x)
//! q'(y) = q(y) c(y)
//! ```
//!
//! and the stage value is bracketed by
//! `s D - sum_x p(x) ln Z(x) - T_U` (upper) and `... - T_L` (lower), with
//! `T_U = sum_y q(y) c(y) ln c(y)` and `T_L = max_y ln c(y)`. Since
//! `q c` is a distribution, `T_L >= T_U` and the certificate is
//! `T_L - T_U <= eps`.
//!
//! With `L = 0` this is the classical Blahut-Arimoto iteration.

use crate::error::{Error, Result};
use crate::model::{
    branch_distortion, branch_objective, DistortionMatrix, PolicyBranch, ProbVector, StagePoint,
};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 10_000;

/// `A(x, y) = exp(s rho(x, y) - L(y))`, kept in log form plus a per-row
/// shifted copy so strongly negative prices never underflow. Every update
/// is invariant to scaling a row of `A`, so the shifted copy is what the
/// iteration uses; the shift only enters the bound base term.
#[derive(Debug, Clone, PartialEq)]
pub struct ExponentWeights {
    x_size: usize,
    y_size: usize,
    log: Vec<f64>,
    scaled: Vec<f64>,
    row_shift: Vec<f64>,
}

impl ExponentWeights {
    pub fn x_size(&self) -> usize {
        self.x_size
    }

    pub fn y_size(&self) -> usize {
        self.y_size
    }

    pub fn log_value(&self, x: usize, y: usize) -> f64 {
        self.log[x * self.y_size + y]
    }

    pub fn value(&self, x: usize, y: usize) -> f64 {
        self.log_value(x, y).exp()
    }

    fn scaled_row(&self, x: usize) -> &[f64] {
        &self.scaled[x * self.y_size..(x + 1) * self.y_size]
    }
}

pub fn exponent_weights(
    rho: &DistortionMatrix,
    s: f64,
    lookahead: &[f64],
) -> Result<ExponentWeights> {
    if lookahead.len() != rho.y_size() {
        return Err(Error::Shape(format!(
            "look-ahead over {} symbols, distortion over {}",
            lookahead.len(),
            rho.y_size()
        )));
    }
    if !s.is_finite() || s > 0.0 {
        return Err(Error::InvalidParameter(format!(
            "price {s} must be finite and <= 0"
        )));
    }
    if let Some(l) = lookahead.iter().find(|l| !l.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "look-ahead value {l} is not finite"
        )));
    }
    let (x_size, y_size) = (rho.x_size(), rho.y_size());
    let log: Vec<f64> = (0..x_size)
        .flat_map(|x| (0..y_size).map(move |y| (x, y)))
        .map(|(x, y)| s * rho.get(x, y) - lookahead[y])
        .collect();
    let row_shift: Vec<f64> = log
        .chunks_exact(y_size)
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let scaled = log
        .chunks_exact(y_size)
        .zip(&row_shift)
        .flat_map(|(row, &m)| row.iter().map(move |v| (v - m).exp()))
        .collect();
    Ok(ExponentWeights {
        x_size,
        y_size,
        log,
        scaled,
        row_shift,
    })
}

/// `Z(x)` in shifted units: `sum_y q(y) A(x, y) exp(-shift(x))`.
fn partition(output: &[f64], a: &ExponentWeights) -> Vec<f64> {
    (0..a.x_size)
        .map(|x| a.scaled_row(x).iter().zip(output).map(|(w, q)| w * q).sum())
        .collect()
}

fn check_output(output: &[f64], a: &ExponentWeights) -> Result<()> {
    if output.len() != a.y_size {
        return Err(Error::Shape(format!(
            "output over {} symbols, weights over {}",
            output.len(),
            a.y_size
        )));
    }
    Ok(())
}

fn check_pred(pred: &[f64], a: &ExponentWeights) -> Result<()> {
    if pred.len() != a.x_size {
        return Err(Error::Shape(format!(
            "prediction over {} symbols, weights over {}",
            pred.len(),
            a.x_size
        )));
    }
    Ok(())
}

/// `W(y|x) = q(y) A(x, y) / sum_y' q(y') A(x, y')`.
pub fn policy_update(prev_output: &[f64], a: &ExponentWeights) -> Result<PolicyBranch> {
    check_output(prev_output, a)?;
    let columns = (0..a.x_size)
        .map(|x| {
            ProbVector::normalized(
                a.scaled_row(x)
                    .iter()
                    .zip(prev_output)
                    .map(|(w, q)| w * q)
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    PolicyBranch::from_columns(columns)
}

/// Removes output symbols whose mass underflowed to zero from every column,
/// so the policy stays supported on its induced output.
fn drop_vanished(policy: &PolicyBranch, output: &[f64]) -> Result<PolicyBranch> {
    let columns = (0..policy.cols())
        .map(|x| {
            ProbVector::normalized(
                policy
                    .column(x)
                    .iter()
                    .zip(output)
                    .map(|(&w, &q)| if q == 0.0 { 0.0 } else { w })
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    PolicyBranch::from_columns(columns)
}

/// `q'(y) = q(y) sum_x p(x) A(x, y) / sum_y' q(y') A(x, y')`.
pub fn output_update(prev_output: &[f64], pred: &[f64], a: &ExponentWeights) -> Result<ProbVector> {
    check_output(prev_output, a)?;
    check_pred(pred, a)?;
    let z = partition(prev_output, a);
    let c = gap_factors(pred, a, &z);
    let next: Vec<f64> = prev_output.iter().zip(&c).map(|(q, c)| q * c).collect();
    let total: f64 = next.iter().sum();
    debug_assert!(
        (total - 1.0).abs() < 1e-9,
        "output update lost mass: {total}"
    );
    ProbVector::normalized(next)
}

fn gap_factors(pred: &[f64], a: &ExponentWeights, z: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; a.y_size];
    for (x, (&p, &zx)) in pred.iter().zip(z).enumerate() {
        if p == 0.0 {
            continue;
        }
        for (cy, w) in c.iter_mut().zip(a.scaled_row(x)) {
            *cy += p * w / zx;
        }
    }
    c
}

/// Ingredients of the stopping certificate at a given output law.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingGap {
    /// `sum_y q(y) c(y) ln c(y)`
    pub upper_term: f64,
    /// `max_y ln c(y)`
    pub lower_term: f64,
    pub c: Vec<f64>,
}

impl StoppingGap {
    /// Upper bound minus lower bound; nonnegative up to rounding.
    pub fn gap(&self) -> f64 {
        self.lower_term - self.upper_term
    }
}

pub fn stopping_gap(output: &[f64], pred: &[f64], a: &ExponentWeights) -> Result<StoppingGap> {
    check_output(output, a)?;
    check_pred(pred, a)?;
    let z = partition(output, a);
    Ok(gap_from(output, gap_factors(pred, a, &z)))
}

fn gap_from(output: &[f64], c: Vec<f64>) -> StoppingGap {
    let upper_term = output
        .iter()
        .zip(&c)
        .filter(|(q, c)| **q > 0.0 && **c > 0.0)
        .map(|(q, c)| q * c * c.ln())
        .sum();
    let lower_term = c.iter().map(|c| c.ln()).fold(f64::NEG_INFINITY, f64::max);
    StoppingGap {
        upper_term,
        lower_term,
        c,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmSettings {
    pub epsilon: f64,
    pub max_iter: usize,
}

impl Default for AmSettings {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

impl AmSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "tolerance {} must be positive",
                self.epsilon
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter(
                "max_iter must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-sweep diagnostics, reported to the observer of [`run_branch_am_traced`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Stage objective (with look-ahead) at the sweep's policy and its
    /// induced output.
    pub rate: f64,
    pub distortion: f64,
    /// `rate - s * distortion`
    pub lagrangian: f64,
    pub upper_bound: f64,
    pub lower_bound: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmResult {
    pub policy: PolicyBranch,
    pub output: ProbVector,
    pub point: StagePoint,
    pub iterations: usize,
    pub final_gap: f64,
    pub converged: bool,
}

pub fn run_branch_am(
    pred: &[f64],
    rho: &DistortionMatrix,
    s: f64,
    lookahead: &[f64],
    settings: AmSettings,
    init_output: Option<&ProbVector>,
) -> Result<AmResult> {
    run_branch_am_traced(pred, rho, s, lookahead, settings, init_output, |_| {})
}

/// [`run_branch_am`] reporting an [`IterationRecord`] after every sweep.
pub fn run_branch_am_traced(
    pred: &[f64],
    rho: &DistortionMatrix,
    s: f64,
    lookahead: &[f64],
    settings: AmSettings,
    init_output: Option<&ProbVector>,
    mut observer: impl FnMut(&IterationRecord),
) -> Result<AmResult> {
    settings.validate()?;
    let a = exponent_weights(rho, s, lookahead)?;
    check_pred(pred, &a)?;
    let mut output = match init_output {
        Some(q) => {
            check_output(q.as_slice(), &a)?;
            if !q.is_strictly_positive() {
                return Err(Error::InvalidParameter(
                    "initial output law must be strictly positive".into(),
                ));
            }
            q.as_slice().to_vec()
        }
        None => vec![1.0 / a.y_size as f64; a.y_size],
    };

    let mut iterations = 0;
    loop {
        iterations += 1;
        let z = partition(&output, &a);
        let mut policy = policy_update(&output, &a)?;
        let certificate = gap_from(&output, gap_factors(pred, &a, &z));
        let gap = certificate.gap();
        let next = ProbVector::normalized(
            output
                .iter()
                .zip(&certificate.c)
                .map(|(q, c)| q * c)
                .collect(),
        )?;
        if next.as_slice().contains(&0.0) {
            policy = drop_vanished(&policy, next.as_slice())?;
        }

        let rate = branch_objective(pred, &policy, next.as_slice(), lookahead)?;
        let distortion = branch_distortion(pred, &policy, rho)?;
        let record = {
            let log_partition: f64 = pred
                .iter()
                .zip(&z)
                .zip(&a.row_shift)
                .filter(|((p, _), _)| **p > 0.0)
                .map(|((p, zx), shift)| p * (zx.ln() + shift))
                .sum();
            let base = s * distortion - log_partition;
            IterationRecord {
                iteration: iterations,
                rate,
                distortion,
                lagrangian: rate - s * distortion,
                upper_bound: base - certificate.upper_term,
                lower_bound: base - certificate.lower_term,
                gap,
            }
        };
        observer(&record);

        let converged = gap <= settings.epsilon;
        if converged || iterations >= settings.max_iter {
            return Ok(AmResult {
                policy,
                output: next,
                point: StagePoint { rate, distortion },
                iterations,
                final_gap: gap,
                converged,
            });
        }
        output = next.into_inner();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const E2: f64 = 0.1353352832366127; // exp(-2)

    fn hamming() -> DistortionMatrix {
        DistortionMatrix::hamming(2, 2)
    }

    fn hb(d: f64) -> f64 {
        -d * d.ln() - (1.0 - d) * (1.0 - d).ln()
    }

    #[test]
    fn weights_examples() {
        let a = exponent_weights(&hamming(), 0.0, &[0.0, 0.0]).unwrap();
        for x in 0..2 {
            for y in 0..2 {
                assert_eq!(a.value(x, y), 1.0);
            }
        }
        let a = exponent_weights(&hamming(), -2.0, &[0.0, 0.0]).unwrap();
        assert_eq!(a.value(0, 0), 1.0);
        assert!((a.value(0, 1) - E2).abs() < 1e-15);
        let b = exponent_weights(&hamming(), -2.0, &[0.5, 0.5]).unwrap();
        for x in 0..2 {
            for y in 0..2 {
                assert!((b.value(x, y) - a.value(x, y) * (-0.5f64).exp()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn weights_reject_bad_inputs() {
        assert!(exponent_weights(&hamming(), 1.0, &[0.0, 0.0]).is_err());
        assert!(exponent_weights(&hamming(), -1.0, &[0.0]).is_err());
        assert!(exponent_weights(&hamming(), -1.0, &[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn extreme_prices_stay_finite() {
        let a = exponent_weights(&hamming(), -2000.0, &[0.0, 700.0]).unwrap();
        let w = policy_update(&[0.5, 0.5], &a).unwrap();
        assert!(w.column(0).iter().all(|v| v.is_finite()));
        assert_eq!(w.column(0), &[1.0, 0.0]);
        let r = run_branch_am(
            &[0.5, 0.5],
            &hamming(),
            -800.0,
            &[0.0, 0.0],
            AmSettings::default(),
            None,
        )
        .unwrap();
        assert!(r.converged);
        assert!((r.point.rate - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn policy_update_examples() {
        let ones = exponent_weights(&hamming(), 0.0, &[0.0, 0.0]).unwrap();
        let w = policy_update(&[0.3, 0.7], &ones).unwrap();
        assert_eq!(w.column(0), &[0.3, 0.7]);
        assert_eq!(w.column(1), &[0.3, 0.7]);

        let a = exponent_weights(&hamming(), -2.0, &[0.0, 0.0]).unwrap();
        let w = policy_update(&[0.5, 0.5], &a).unwrap();
        assert!((w.get(0, 0) - 1.0 / (1.0 + E2)).abs() < 1e-15);
        assert!((w.get(1, 0) - E2 / (1.0 + E2)).abs() < 1e-15);

        let w = policy_update(&[1.0, 0.0], &a).unwrap();
        assert_eq!(w.column(0), &[1.0, 0.0]);
        assert_eq!(w.column(1), &[1.0, 0.0]);
    }

    #[test]
    fn output_update_examples() {
        let ones = exponent_weights(&hamming(), 0.0, &[0.0, 0.0]).unwrap();
        let q = output_update(&[0.3, 0.7], &[0.9, 0.1], &ones).unwrap();
        assert!((q[0] - 0.3).abs() < 1e-15);

        let a = exponent_weights(&hamming(), -2.0, &[0.0, 0.0]).unwrap();
        let q = output_update(&[0.5, 0.5], &[0.5, 0.5], &a).unwrap();
        assert!((q[0] - 0.5).abs() < 1e-15);

        // hand evaluation: Z(x) = 0.5 (1 + e^-2) for both rows,
        // q'(0) = 0.5 (0.7 + 0.3 e^-2) / (0.5 (1 + e^-2))
        let q = output_update(&[0.5, 0.5], &[0.7, 0.3], &a).unwrap();
        let expected = (0.7 + 0.3 * E2) / (1.0 + E2);
        assert!((q[0] - expected).abs() < 1e-14);
        assert!((q[0] + q[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stopping_gap_examples() {
        let ones = exponent_weights(&hamming(), 0.0, &[0.0, 0.0]).unwrap();
        let g = stopping_gap(&[0.4, 0.6], &[0.2, 0.8], &ones).unwrap();
        assert_eq!(g.c, vec![1.0, 1.0]);
        assert_eq!(g.gap(), 0.0);

        // symmetric fixed point
        let a = exponent_weights(&hamming(), -2.0, &[0.0, 0.0]).unwrap();
        let g = stopping_gap(&[0.5, 0.5], &[0.5, 0.5], &a).unwrap();
        assert!(g.upper_term.abs() < 1e-15 && g.lower_term.abs() < 1e-15);

        // asymmetric source, uniform output: c(y) = 2 (p(y) + p(1-y) e^-2) / (1 + e^-2)
        let g = stopping_gap(&[0.5, 0.5], &[0.7, 0.3], &a).unwrap();
        let c0 = 2.0 * (0.7 + 0.3 * E2) / (1.0 + E2);
        let c1 = 2.0 * (0.3 + 0.7 * E2) / (1.0 + E2);
        assert!((g.c[0] - c0).abs() < 1e-14 && (g.c[1] - c1).abs() < 1e-14);
        let tu = 0.5 * c0 * c0.ln() + 0.5 * c1 * c1.ln();
        assert!((g.upper_term - tu).abs() < 1e-14);
        assert!((g.lower_term - c0.ln()).abs() < 1e-14);
        assert!(g.gap() > 0.0);
    }

    #[test]
    fn classical_binary_rate_distortion() {
        for s in [-0.5, -1.0, -2.0, -4.0] {
            let r = run_branch_am(
                &[0.5, 0.5],
                &hamming(),
                s,
                &[0.0, 0.0],
                AmSettings::default(),
                None,
            )
            .unwrap();
            let d = s.exp() / (1.0 + s.exp());
            assert!(r.converged);
            assert!((r.point.distortion - d).abs() < 1e-9, "s = {s}");
            assert!((r.point.rate - (std::f64::consts::LN_2 - hb(d))).abs() < 1e-9);
        }
        let r = run_branch_am(
            &[0.5, 0.5],
            &hamming(),
            -2.0,
            &[0.0, 0.0],
            AmSettings::default(),
            None,
        )
        .unwrap();
        assert!((r.point.distortion - 0.11920).abs() < 1e-5);
        assert!((r.point.rate - 0.327813).abs() < 1e-6);
    }

    #[test]
    fn zero_price_transmits_nothing() {
        let r = run_branch_am(
            &[0.7, 0.3],
            &hamming(),
            0.0,
            &[0.0, 0.0],
            AmSettings::default(),
            None,
        )
        .unwrap();
        assert!(r.point.rate.abs() < 1e-15);
        for x in 0..2 {
            assert_eq!(r.policy.column(x), r.output.as_slice());
        }
    }

    #[test]
    fn brute_force_policy_search() {
        // minimize I - s D over binary policies on a 2000 x 2000 lattice
        let (pred, s) = ([0.7, 0.3], -1.5);
        let r = run_branch_am(
            &pred,
            &hamming(),
            s,
            &[0.0, 0.0],
            AmSettings::default(),
            None,
        )
        .unwrap();
        let steps = 2000;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=steps {
            let w0 = i as f64 / steps as f64; // P(y=1 | x=0)
            for j in 0..=steps {
                let w1 = j as f64 / steps as f64; // P(y=0 | x=1)
                let q1 = pred[0] * w0 + pred[1] * (1.0 - w1);
                let q = [1.0 - q1, q1];
                let joint = [
                    [pred[0] * (1.0 - w0), pred[0] * w0],
                    [pred[1] * w1, pred[1] * (1.0 - w1)],
                ];
                let mut mi = 0.0;
                for (x, row) in joint.iter().enumerate() {
                    for (y, &pxy) in row.iter().enumerate() {
                        if pxy > 0.0 {
                            mi += pxy * (pxy / (pred[x] * q[y])).ln();
                        }
                    }
                }
                let d = joint[0][1] + joint[1][0];
                let l = mi - s * d;
                if l < best.0 {
                    best = (l, mi, d);
                }
            }
        }
        let am_l = r.point.rate - s * r.point.distortion;
        assert!(am_l <= best.0 + 1e-9, "AM {am_l} vs grid {}", best.0);
        assert!(best.0 - am_l < 1e-5);
        assert!((r.point.distortion - best.2).abs() < 2e-3);
        assert!((r.point.rate - best.1).abs() < 2e-3);
    }

    #[test]
    fn trace_is_monotone_and_sandwiched() {
        let mut records = Vec::new();
        let r = run_branch_am_traced(
            &[0.8, 0.2],
            &hamming(),
            -1.2,
            &[0.3, 1.1],
            AmSettings::default(),
            None,
            |rec| records.push(*rec),
        )
        .unwrap();
        assert!(r.converged && r.final_gap <= 1e-6);
        assert_eq!(records.len(), r.iterations);
        for pair in records.windows(2) {
            assert!(pair[1].lagrangian <= pair[0].lagrangian + 1e-10);
        }
        for rec in &records {
            assert!(rec.upper_bound >= rec.rate - 1e-9);
            assert!(rec.rate >= rec.lower_bound - 1e-9);
        }
        let last = records.last().unwrap();
        assert_eq!(last.rate, r.point.rate);
    }

    #[test]
    fn uniform_lookahead_shift() {
        let base = run_branch_am(
            &[0.6, 0.4],
            &hamming(),
            -1.0,
            &[0.2, 0.9],
            AmSettings::default(),
            None,
        )
        .unwrap();
        let shifted = run_branch_am(
            &[0.6, 0.4],
            &hamming(),
            -1.0,
            &[1.2, 1.9],
            AmSettings::default(),
            None,
        )
        .unwrap();
        assert_eq!(base.iterations, shifted.iterations);
        for x in 0..2 {
            for y in 0..2 {
                assert!((base.policy.get(y, x) - shifted.policy.get(y, x)).abs() < 1e-14);
            }
        }
        assert!((shifted.point.rate - base.point.rate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn non_convergence_is_flagged() {
        let settings = AmSettings {
            epsilon: 1e-14,
            max_iter: 3,
        };
        let r = run_branch_am(&[0.9, 0.1], &hamming(), -0.3, &[0.0, 0.4], settings, None).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 3);
        assert!(r.final_gap > 1e-14);
    }

    #[test]
    fn rejects_bad_initial_output() {
        let init = ProbVector::new(vec![1.0, 0.0]).unwrap();
        assert!(run_branch_am(
            &[0.5, 0.5],
            &hamming(),
            -1.0,
            &[0.0, 0.0],
            AmSettings::default(),
            Some(&init)
        )
        .is_err());
    }
}

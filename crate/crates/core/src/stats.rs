//! Parametric-bias statistics.
//!
//! Outcomes split into two groups by whether the parametric answer appears
//! in the context. Each group is a run of Bernoulli trials with unknown
//! success probability under a uniform Beta prior. Under the null
//! hypothesis that both groups share one probability, the posterior fitted
//! to the no-containment group yields a Beta-binomial predictive over the
//! containment group's success count; the p-value comes from that
//! predictive, both as the pmf at the observed count and as the lower tail.
//!
//! Everything runs in log space: paper-scale group sizes (thousands of
//! examples) overflow naive factorials long before they stress log-gamma.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{Category, OpenBookOutcome};

/// What counts as a Bernoulli success when splitting outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuccessDefinition {
    /// Success = the knowledge update succeeded (category U_c). The default
    /// for the significance test.
    CorrectUpdate,
    /// Success = the model retained its parametric answer (category R).
    /// Used for the failure-likelihood delta.
    RetainFailure,
    /// Success = anything but retention (complement of R).
    NotRetain,
}

impl SuccessDefinition {
    fn hit(&self, category: Category) -> bool {
        match self {
            SuccessDefinition::CorrectUpdate => category == Category::Uc,
            SuccessDefinition::RetainFailure => category == Category::R,
            SuccessDefinition::NotRetain => category != Category::R,
        }
    }
}

/// Trial/success counts for the two containment groups. Group 1 is
/// (a_p in context), group 0 is its complement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub n0: u64,
    pub m0: u64,
    pub n1: u64,
    pub m1: u64,
    pub success_definition: SuccessDefinition,
}

/// Split outcomes into containment groups and count successes per the given
/// definition.
pub fn split_by_containment(
    outcomes: &[OpenBookOutcome],
    success_definition: SuccessDefinition,
) -> GroupCounts {
    let mut counts = GroupCounts {
        n0: 0,
        m0: 0,
        n1: 0,
        m1: 0,
        success_definition,
    };
    for outcome in outcomes {
        let hit = success_definition.hit(outcome.category) as u64;
        if outcome.case.ap_in_context {
            counts.n1 += 1;
            counts.m1 += hit;
        } else {
            counts.n0 += 1;
            counts.m0 += hit;
        }
    }
    counts
}

// Lanczos approximation (g = 7, 9 terms), accurate to ~1e-13 relative for
// positive arguments.
const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS_COEFFICIENTS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the Gamma function for x > 0.
pub fn log_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // Reflection keeps accuracy near zero.
        let pi = std::f64::consts::PI;
        return pi.ln() - (pi * x).sin().ln() - log_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEFFICIENTS[0];
    for (i, c) in LANCZOS_COEFFICIENTS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// ln B(a, b) = ln Gamma(a) + ln Gamma(b) - ln Gamma(a + b), for a, b > 0.
pub fn log_beta(a: f64, b: f64) -> Result<f64> {
    if a <= 0.0 || b <= 0.0 || a.is_nan() || b.is_nan() {
        return Err(Error::domain(format!(
            "log_beta needs positive arguments, got ({a}, {b})"
        )));
    }
    Ok(log_gamma(a) + log_gamma(b) - log_gamma(a + b))
}

fn log_choose(n: u64, k: u64) -> f64 {
    log_gamma(n as f64 + 1.0) - log_gamma(k as f64 + 1.0) - log_gamma((n - k) as f64 + 1.0)
}

fn check_counts(m: u64, n: u64, which: &str) -> Result<()> {
    if m > n {
        return Err(Error::domain(format!(
            "{which}: successes {m} exceed trials {n}"
        )));
    }
    Ok(())
}

/// Beta-binomial predictive mass at m1 successes out of n1 trials, under the
/// posterior fitted to (m0, n0) with a uniform Beta(1, 1) prior:
///
///   C(n1, m1) * B(m1 + m0 + 1, (n1 - m1) + (n0 - m0) + 1) / B(m0 + 1, (n0 - m0) + 1)
pub fn beta_binomial_pmf(m1: u64, n1: u64, m0: u64, n0: u64) -> Result<f64> {
    check_counts(m1, n1, "group 1")?;
    check_counts(m0, n0, "group 0")?;
    let numerator = log_beta((m1 + m0) as f64 + 1.0, ((n1 - m1) + (n0 - m0)) as f64 + 1.0)?;
    let denominator = log_beta(m0 as f64 + 1.0, (n0 - m0) as f64 + 1.0)?;
    Ok((log_choose(n1, m1) + numerator - denominator).exp())
}

/// Probability of observing m1 or fewer successes under the predictive.
pub fn beta_binomial_tail(m1: u64, n1: u64, m0: u64, n0: u64) -> Result<f64> {
    check_counts(m1, n1, "group 1")?;
    check_counts(m0, n0, "group 0")?;
    let mut total = 0.0;
    for k in 0..=m1 {
        total += beta_binomial_pmf(k, n1, m0, n0)?;
    }
    Ok(total.clamp(0.0, 1.0))
}

/// Two-group comparison: rate difference in percentage points plus both
/// p-value readings of the predictive at the observed m1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasAnalysis {
    pub counts: GroupCounts,
    /// 100 * (m1/n1 - m0/n0).
    pub delta_pp: f64,
    pub p_value_pmf: f64,
    pub p_value_tail: f64,
    pub significant_at_005: bool,
}

/// Pure function of the counts: delta and p-values for whatever success
/// definition the counts were built with.
pub fn bias_test(counts: &GroupCounts) -> Result<BiasAnalysis> {
    if counts.n0 == 0 {
        return Err(Error::domain(
            "bias test: group 0 (a_p not in context) is empty",
        ));
    }
    if counts.n1 == 0 {
        return Err(Error::domain(
            "bias test: group 1 (a_p in context) is empty",
        ));
    }
    check_counts(counts.m1, counts.n1, "group 1")?;
    check_counts(counts.m0, counts.n0, "group 0")?;
    let rate1 = counts.m1 as f64 / counts.n1 as f64;
    let rate0 = counts.m0 as f64 / counts.n0 as f64;
    let p_value_pmf = beta_binomial_pmf(counts.m1, counts.n1, counts.m0, counts.n0)?;
    let p_value_tail = beta_binomial_tail(counts.m1, counts.n1, counts.m0, counts.n0)?;
    Ok(BiasAnalysis {
        counts: *counts,
        delta_pp: 100.0 * (rate1 - rate0),
        p_value_pmf,
        p_value_tail,
        significant_at_005: p_value_tail < 0.05,
    })
}

/// The headline analysis: the failure-likelihood delta comes from the
/// retention rates, while the significance test runs on knowledge-update
/// successes (U_c by default, not-R by flag).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParametricBiasSummary {
    /// Retention-rate comparison; `delta_pp` here is the reported delta.
    pub retain: BiasAnalysis,
    /// Success-rate comparison; its tail p-value decides significance.
    pub success: BiasAnalysis,
}

impl ParametricBiasSummary {
    pub fn delta_pp(&self) -> f64 {
        self.retain.delta_pp
    }

    pub fn p_value_tail(&self) -> f64 {
        self.success.p_value_tail
    }

    pub fn p_value_pmf(&self) -> f64 {
        self.success.p_value_pmf
    }

    pub fn significant(&self) -> bool {
        self.success.significant_at_005
    }
}

pub fn summarize_parametric_bias(
    outcomes: &[OpenBookOutcome],
    success_definition: SuccessDefinition,
) -> Result<ParametricBiasSummary> {
    let retain = bias_test(&split_by_containment(
        outcomes,
        SuccessDefinition::RetainFailure,
    ))?;
    let success = bias_test(&split_by_containment(outcomes, success_definition))?;
    Ok(ParametricBiasSummary { retain, success })
}

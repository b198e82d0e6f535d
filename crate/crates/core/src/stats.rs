//! Summary statistics and the dependent two-sample t-test.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Outcome of a paired t-test on `a - b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairedTTest {
    Computed {
        t: f64,
        df: usize,
        mean_diff: f64,
        /// Two-sided p-value.
        p_value: f64,
    },
    /// Every difference is identical, so the statistic is undefined.
    /// `mean_diff == 0` is an exact tie, anything else an exact shift.
    ZeroVariance { mean_diff: f64 },
}

impl PairedTTest {
    pub fn p_value(&self) -> Option<f64> {
        match self {
            PairedTTest::Computed { p_value, .. } => Some(*p_value),
            PairedTTest::ZeroVariance { .. } => None,
        }
    }

    /// One-sided p-value for the alternative `mean(a - b) > 0`.
    /// An exact positive shift yields 0, an exact tie or negative shift 1.
    pub fn p_greater(&self) -> f64 {
        match *self {
            PairedTTest::Computed { t, df, .. } => {
                1.0 - student_t_cdf(t, df)
            }
            PairedTTest::ZeroVariance { mean_diff } => {
                if mean_diff > 0.0 {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    pub fn is_exact_tie(&self) -> bool {
        matches!(self, PairedTTest::ZeroVariance { mean_diff } if *mean_diff == 0.0)
    }
}

fn student_t_cdf(t: f64, df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df as f64)
        .expect("df >= 1")
        .cdf(t)
}

/// Dependent two-sample t-test on paired observations.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() {
        return Err(Error::Size(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Size("a paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = diffs.len();
    let m = mean(&diffs);
    let sd = std_dev(&diffs);
    // Differences that agree to rounding error count as constant.
    let scale = diffs.iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
    if sd <= 1e-12 * scale.max(1.0) {
        return Ok(PairedTTest::ZeroVariance { mean_diff: m });
    }
    let t = m / (sd / (n as f64).sqrt());
    let df = n - 1;
    let p_value = (2.0 * (1.0 - student_t_cdf(t.abs(), df))).clamp(0.0, 1.0);
    Ok(PairedTTest::Computed {
        t,
        df,
        mean_diff: m,
        p_value,
    })
}

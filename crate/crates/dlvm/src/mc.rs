//! Monte Carlo estimate bookkeeping.

use crate::distributions::log_sum_exp;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A log-scale Monte Carlo estimate with its delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
}

/// `log((1/S) sum exp(terms))` with the standard error of the log estimate.
///
/// For `w_s = exp(term_s)`, the delta method gives
/// `se(log mean w) ~= sd(w) / (sqrt(S) * mean(w))`, computed here entirely in
/// log space so huge or tiny weights are safe.
pub fn log_mean_exp_with_stderr(terms: &[f64]) -> Result<McEstimate> {
    if terms.is_empty() {
        return Err(Error::contract("log_mean_exp of an empty slice"));
    }
    let s = terms.len() as f64;
    let log_mean = log_sum_exp(terms)? - s.ln();
    let doubled: Vec<f64> = terms.iter().map(|t| 2.0 * t).collect();
    let log_mean_sq = log_sum_exp(&doubled)? - s.ln();
    // relative variance of w: E[w^2]/E[w]^2 - 1
    let rel_var = ((log_mean_sq - 2.0 * log_mean).exp() - 1.0).max(0.0);
    Ok(McEstimate {
        value: log_mean,
        stderr: (rel_var / s).sqrt(),
    })
}

/// Streaming accumulator for [`log_mean_exp_with_stderr`]-style reductions,
/// mergeable across ordered chunks.
#[derive(Debug, Clone, Copy)]
pub struct LogMeanAcc {
    max: f64,
    /// `sum exp(term - max)`
    sum1: f64,
    /// `sum exp(2 (term - max))`
    sum2: f64,
    count: u64,
}

impl Default for LogMeanAcc {
    fn default() -> Self {
        LogMeanAcc {
            max: f64::NEG_INFINITY,
            sum1: 0.0,
            sum2: 0.0,
            count: 0,
        }
    }
}

impl LogMeanAcc {
    pub fn push(&mut self, term: f64) {
        self.merge(&LogMeanAcc {
            max: term,
            sum1: 1.0,
            sum2: 1.0,
            count: 1,
        });
    }

    pub fn merge(&mut self, other: &LogMeanAcc) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let m = self.max.max(other.max);
        let (a, b) = ((self.max - m).exp(), (other.max - m).exp());
        self.sum1 = self.sum1 * a + other.sum1 * b;
        self.sum2 = self.sum2 * (a * a) + other.sum2 * (b * b);
        self.max = m;
        self.count += other.count;
    }

    pub fn finish(&self) -> Result<McEstimate> {
        if self.count == 0 {
            return Err(Error::contract("log-mean accumulator is empty"));
        }
        let s = self.count as f64;
        let log_mean = self.max + (self.sum1 / s).ln();
        let log_mean_sq = 2.0 * self.max + (self.sum2 / s).ln();
        let rel_var = ((log_mean_sq - 2.0 * log_mean).exp() - 1.0).max(0.0);
        Ok(McEstimate {
            value: log_mean,
            stderr: (rel_var / s).sqrt(),
        })
    }
}

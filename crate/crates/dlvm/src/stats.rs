//! Paired statistical comparison of the two samplers: Wilcoxon signed-rank
//! tests and the per-scenario results table.

use crate::error::{Error, Result};
use crate::imputation::ImputeItemResult;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Largest effective sample size handled by exact enumeration.
pub const EXACT_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PvalueMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`
    pub w: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_effective: usize,
    /// Two-sided p-value.
    pub p_value: f64,
    pub method: PvalueMethod,
}

/// Outcome of a signed-rank test; all-zero differences yield no test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WilcoxonTest {
    Degenerate { n_zero: usize },
    Completed(WilcoxonResult),
}

impl WilcoxonTest {
    pub fn p_value(&self) -> Option<f64> {
        match self {
            WilcoxonTest::Degenerate { .. } => None,
            WilcoxonTest::Completed(r) => Some(r.p_value),
        }
    }
}

/// Midranks of absolute values (average rank within tie groups).
fn midranks(abs: &[f64]) -> Vec<f64> {
    let n = abs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs[a].partial_cmp(&abs[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test of paired samples `a`, `b` on the
/// differences `b - a`. Zero differences are dropped (Wilcoxon's original
/// treatment; the Pratt variant, which ranks zeros before dropping them, is a
/// known alternative policy and is deliberately not applied here). Ties get
/// midranks. The p-value is exact by enumeration of all sign assignments up
/// to [`EXACT_LIMIT`] effective pairs, and a tie-corrected,
/// continuity-corrected normal approximation beyond.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonTest> {
    if a.len() != b.len() {
        return Err(Error::contract("paired test needs equal-length samples"));
    }
    let diffs: Vec<f64> = b
        .iter()
        .zip(a)
        .map(|(bi, ai)| bi - ai)
        .filter(|d| *d != 0.0)
        .collect();
    let n_zero = a.len() - diffs.len();
    if diffs.is_empty() {
        return Ok(WilcoxonTest::Degenerate { n_zero });
    }
    let n = diffs.len();
    if n < 5 {
        return Err(Error::contract(format!(
            "need at least 5 nonzero differences, got {n}"
        )));
    }

    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = midranks(&abs);
    let w_plus: f64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;
    let w = w_plus.min(w_minus);

    let (p_value, method) = if n <= EXACT_LIMIT {
        (exact_two_sided_p(&ranks, w_plus), PvalueMethod::Exact)
    } else {
        (normal_two_sided_p(&ranks, w_plus, n), PvalueMethod::NormalApprox)
    };

    Ok(WilcoxonTest::Completed(WilcoxonResult {
        w,
        w_plus,
        w_minus,
        n_effective: n,
        p_value,
        method,
    }))
}

/// Exact null distribution of `W+` by dynamic programming over doubled ranks
/// (doubling keeps midranks integral), then
/// `p = min(1, 2 min(P(W+ <= w), P(W+ >= w)))`.
fn exact_two_sided_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in &doubled {
        reach += r;
        for w in (r..=reach).rev() {
            counts[w] += counts[w - r];
        }
    }
    let denom = 2.0f64.powi(ranks.len() as i32);
    let obs = (2.0 * w_plus).round() as usize;
    let p_le: f64 = counts[..=obs].iter().sum::<f64>() / denom;
    let p_ge: f64 = counts[obs..].iter().sum::<f64>() / denom;
    (2.0 * p_le.min(p_ge)).min(1.0)
}

/// Normal approximation with tie-corrected variance and continuity
/// correction.
fn normal_two_sided_p(ranks: &[f64], w_plus: f64, n: usize) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    // tie correction: group multiplicities of equal ranks
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
    let sigma = var.sqrt();
    let centered = w_plus - mean;
    let correction = 0.5 * centered.signum();
    let z = (centered - correction) / sigma;
    let upper = 0.5 * libm::erfc(z / std::f64::consts::SQRT_2);
    let lower = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
    (2.0 * upper.min(lower)).min(1.0)
}

/// Per-item paired scores for one `(dataset, scenario)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub dataset: String,
    pub scenario: String,
    pub item_id: usize,
    pub f1_pg: f64,
    pub f1_mwg: f64,
}

/// Pairs pseudo-Gibbs and Metropolis-within-Gibbs per-item results by
/// `(scenario, item_id)`.
pub fn paired_scores(
    dataset: &str,
    pg: &[ImputeItemResult],
    mwg: &[ImputeItemResult],
) -> Result<Vec<ScoreRow>> {
    if pg.len() != mwg.len() {
        return Err(Error::contract("paired scoring needs equally many results per sampler"));
    }
    let mut rows = Vec::with_capacity(pg.len());
    for p in pg {
        let m = mwg
            .iter()
            .find(|m| m.item_id == p.item_id && m.scenario == p.scenario)
            .ok_or_else(|| {
                Error::contract(format!(
                    "no Metropolis-within-Gibbs result for item {} scenario {}",
                    p.item_id, p.scenario
                ))
            })?;
        rows.push(ScoreRow {
            dataset: dataset.to_string(),
            scenario: p.scenario.clone(),
            item_id: p.item_id,
            f1_pg: p.f1,
            f1_mwg: m.f1,
        });
    }
    Ok(rows)
}

/// One `(dataset, scenario)` row of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub dataset: String,
    pub scenario: String,
    pub n_items: usize,
    pub mean_f1_pg: f64,
    pub mean_f1_mwg: f64,
    /// `mean_f1_mwg - mean_f1_pg`
    pub f1_diff: f64,
    pub w_statistic: Option<f64>,
    pub p_value: Option<f64>,
    /// Human-readable p with the conventional `<1e-15` truncation.
    pub p_display: String,
    pub degenerate: bool,
}

/// Formats a p-value the way the comparison tables do.
pub fn display_p(p: f64) -> String {
    if p < 1e-15 {
        "<1e-15".to_string()
    } else {
        format!("{p:.3e}")
    }
}

/// Aggregates paired scores into one row per `(dataset, scenario)`, in first-
/// appearance order.
pub fn results_table(scores: &[ScoreRow]) -> Result<Vec<TableRow>> {
    if scores.is_empty() {
        return Err(Error::contract("results_table needs at least one score"));
    }
    let mut keys: Vec<(String, String)> = Vec::new();
    for s in scores {
        let key = (s.dataset.clone(), s.scenario.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut table = Vec::with_capacity(keys.len());
    for (dataset, scenario) in keys {
        let cell: Vec<&ScoreRow> = scores
            .iter()
            .filter(|s| s.dataset == dataset && s.scenario == scenario)
            .collect();
        let ids: Vec<usize> = cell.iter().map(|s| s.item_id).collect();
        let mut deduped = ids.clone();
        deduped.sort_unstable();
        deduped.dedup();
        if deduped.len() != ids.len() {
            return Err(Error::contract(format!(
                "duplicate item ids in cell ({dataset}, {scenario})"
            )));
        }
        let pg: Vec<f64> = cell.iter().map(|s| s.f1_pg).collect();
        let mwg: Vec<f64> = cell.iter().map(|s| s.f1_mwg).collect();
        let mean_pg = pg.iter().sum::<f64>() / pg.len() as f64;
        let mean_mwg = mwg.iter().sum::<f64>() / mwg.len() as f64;
        let test = wilcoxon_signed_rank(&pg, &mwg)?;
        let (w_statistic, p_value, p_display, degenerate) = match &test {
            WilcoxonTest::Degenerate { .. } => (None, None, "degenerate".to_string(), true),
            WilcoxonTest::Completed(r) => {
                (Some(r.w), Some(r.p_value), display_p(r.p_value), false)
            }
        };
        table.push(TableRow {
            dataset,
            scenario,
            n_items: cell.len(),
            mean_f1_pg: mean_pg,
            mean_f1_mwg: mean_mwg,
            f1_diff: mean_mwg - mean_pg,
            w_statistic,
            p_value,
            p_display,
            degenerate,
        });
    }
    Ok(table)
}

pub fn write_table_csv(rows: &[TableRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(Error::from)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_table_csv(path: impl AsRef<Path>) -> Result<Vec<TableRow>> {
    let mut r = csv::Reader::from_path(path.as_ref()).map_err(Error::from)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    /// Brute-force oracle: enumerate all sign assignments over the nonzero
    /// differences and recompute the two-sided tail from scratch.
    fn enumeration_p(a: &[f64], b: &[f64]) -> f64 {
        let diffs: Vec<f64> = b
            .iter()
            .zip(a)
            .map(|(bi, ai)| bi - ai)
            .filter(|d| *d != 0.0)
            .collect();
        let n = diffs.len();
        let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        // independent midrank computation
        let mut ranks = vec![0.0; n];
        for i in 0..n {
            let below = abs.iter().filter(|&&x| x < abs[i]).count();
            let equal = abs.iter().filter(|&&x| x == abs[i]).count();
            ranks[i] = below as f64 + (equal as f64 + 1.0) / 2.0;
        }
        let w_obs: f64 = ranks
            .iter()
            .zip(&diffs)
            .filter(|(_, d)| **d > 0.0)
            .map(|(r, _)| r)
            .sum();
        let mut le = 0usize;
        let mut ge = 0usize;
        for assignment in 0u64..(1 << n) {
            let w: f64 = (0..n)
                .filter(|i| assignment >> i & 1 == 1)
                .map(|i| ranks[i])
                .sum();
            if w <= w_obs + 1e-12 {
                le += 1;
            }
            if w >= w_obs - 1e-12 {
                ge += 1;
            }
        }
        let denom = (1u64 << n) as f64;
        (2.0 * (le as f64 / denom).min(ge as f64 / denom)).min(1.0)
    }

    #[test]
    fn all_positive_distinct_n6_gives_1_over_32() {
        let a = vec![0.0; 6];
        let b = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        match wilcoxon_signed_rank(&a, &b).unwrap() {
            WilcoxonTest::Completed(r) => {
                assert_eq!(r.method, PvalueMethod::Exact);
                assert!((r.p_value - 0.03125).abs() < 1e-15, "p = {}", r.p_value);
                assert_eq!(r.w_plus, 21.0);
                assert_eq!(r.w, 0.0);
            }
            _ => panic!("expected a completed test"),
        }
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let a = vec![0.5, 0.7, 0.9];
        match wilcoxon_signed_rank(&a, &a).unwrap() {
            WilcoxonTest::Degenerate { n_zero } => assert_eq!(n_zero, 3),
            _ => panic!("expected degenerate"),
        }
    }

    #[test]
    fn too_few_nonzero_differences_is_contract_error() {
        let a = vec![0.0, 0.0, 0.0, 0.0];
        let b = vec![1.0, 0.0, 0.0, 0.0];
        assert!(wilcoxon_signed_rank(&a, &b).is_err());
        assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn exact_branch_matches_full_enumeration_up_to_n12() {
        let mut rng = RngStream::seed(5);
        for trial in 0..40 {
            let n = 5 + (trial % 8); // 5..=12
            let a: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let b: Vec<f64> = (0..n)
                .map(|i| {
                    // mix ties into the differences
                    if rng.uniform() < 0.3 {
                        a[i] + if rng.uniform() < 0.5 { 0.25 } else { -0.25 }
                    } else {
                        rng.uniform_in(-1.0, 1.0)
                    }
                })
                .collect();
            let got = match wilcoxon_signed_rank(&a, &b).unwrap() {
                WilcoxonTest::Completed(r) => r,
                WilcoxonTest::Degenerate { .. } => continue,
            };
            assert_eq!(got.method, PvalueMethod::Exact);
            let want = enumeration_p(&a, &b);
            assert!(
                (got.p_value - want).abs() < 1e-12,
                "trial {trial}: implementation {} vs enumeration {want}",
                got.p_value
            );
        }
    }

    #[test]
    fn normal_branch_close_to_exact_at_boundary() {
        // n = 20 sits on the exact side; recompute its normal approximation
        // and require agreement within 0.01 as a cross-check of the formula
        let mut rng = RngStream::seed(6);
        for _ in 0..20 {
            let n = 20;
            let a: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.0, 1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.uniform_in(0.0, 1.0)).collect();
            let exact = match wilcoxon_signed_rank(&a, &b).unwrap() {
                WilcoxonTest::Completed(r) => r,
                _ => continue,
            };
            let diffs: Vec<f64> = b
                .iter()
                .zip(&a)
                .map(|(bi, ai)| bi - ai)
                .filter(|d| *d != 0.0)
                .collect();
            let ranks = super::midranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
            let approx = super::normal_two_sided_p(&ranks, exact.w_plus, diffs.len());
            assert!(
                (exact.p_value - approx).abs() <= 0.01,
                "exact {} vs normal {approx}",
                exact.p_value
            );
        }
    }

    #[test]
    fn p_in_unit_interval_and_symmetric_under_swap() {
        let mut rng = RngStream::seed(7);
        for trial in 0..30 {
            let n = 5 + (trial % 30);
            let a: Vec<f64> = (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            let (r_ab, r_ba) = match (
                wilcoxon_signed_rank(&a, &b).unwrap(),
                wilcoxon_signed_rank(&b, &a).unwrap(),
            ) {
                (WilcoxonTest::Completed(x), WilcoxonTest::Completed(y)) => (x, y),
                _ => continue,
            };
            assert!(r_ab.p_value > 0.0 && r_ab.p_value <= 1.0);
            assert_eq!(r_ab.p_value, r_ba.p_value);
            assert_eq!(r_ab.w, r_ba.w);
        }
    }

    #[test]
    fn permutation_of_pairs_changes_nothing() {
        let a = vec![0.3, 0.9, 0.1, 0.7, 0.5, 0.2, 0.8];
        let b = vec![0.4, 0.8, 0.3, 0.9, 0.45, 0.6, 0.75];
        let base = wilcoxon_signed_rank(&a, &b).unwrap();
        let mut rng = RngStream::seed(8);
        for _ in 0..10 {
            let mut idx: Vec<usize> = (0..a.len()).collect();
            rng.shuffle(&mut idx);
            let pa: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
            let pb: Vec<f64> = idx.iter().map(|&i| b[i]).collect();
            assert_eq!(wilcoxon_signed_rank(&pa, &pb).unwrap(), base);
        }
    }

    #[test]
    fn dominating_sampler_yields_tiny_p() {
        // 50 items, every difference positive
        let scores: Vec<ScoreRow> = (0..50)
            .map(|i| ScoreRow {
                dataset: "synthetic".into(),
                scenario: "mar-0.5".into(),
                item_id: i,
                f1_pg: 0.5,
                f1_mwg: 0.6 + (i as f64) * 1e-4,
            })
            .collect();
        let table = results_table(&scores).unwrap();
        assert_eq!(table.len(), 1);
        let p = table[0].p_value.unwrap();
        assert!(p < 1e-9, "p = {p}");
        assert!(table[0].f1_diff > 0.0);
    }

    #[test]
    fn identical_scores_flag_degenerate_row() {
        let scores: Vec<ScoreRow> = (0..10)
            .map(|i| ScoreRow {
                dataset: "d".into(),
                scenario: "s".into(),
                item_id: i,
                f1_pg: 0.7,
                f1_mwg: 0.7,
            })
            .collect();
        let table = results_table(&scores).unwrap();
        assert!(table[0].degenerate);
        assert_eq!(table[0].p_value, None);
        assert_eq!(table[0].f1_diff, 0.0);
    }

    #[test]
    fn table_roundtrips_csv() {
        let scores: Vec<ScoreRow> = (0..8)
            .map(|i| ScoreRow {
                dataset: "synthetic".into(),
                scenario: "bottom-half".into(),
                item_id: i,
                f1_pg: 0.4 + 0.01 * i as f64,
                f1_mwg: 0.5 + 0.012 * i as f64,
            })
            .collect();
        let table = results_table(&scores).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("table.csv");
        write_table_csv(&table, &path).unwrap();
        assert_eq!(read_table_csv(&path).unwrap(), table);
    }

    #[test]
    fn p_display_truncates_below_1e15() {
        assert_eq!(display_p(1e-16), "<1e-15");
        assert_eq!(display_p(0.01), "1.000e-2");
    }
}

//! PLCC, SROCC, KROCC (tau-b), their sum, and MAE.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labelled prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub target: f64,
    pub prediction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub plcc: f64,
    pub srocc: f64,
    pub krocc: f64,
    pub overall: f64,
    pub mae: f64,
    pub n: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n={}", self.n)?;
        writeln!(f, "plcc={:.6}", self.plcc)?;
        writeln!(f, "srocc={:.6}", self.srocc)?;
        writeln!(f, "krocc={:.6}", self.krocc)?;
        writeln!(f, "overall={:.6}", self.overall)?;
        write!(f, "mae={:.6}", self.mae)
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::config(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least 2 samples, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn fractional_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman correlation: Pearson of fractional ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&fractional_ranks(x), &fractional_ranks(y))
}

/// Pair counts behind Kendall's tau-b.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KendallCounts {
    /// All `n (n - 1) / 2` pairs.
    pub pairs: u64,
    /// Pairs tied in `x` (including joint ties).
    pub x_ties: u64,
    /// Pairs tied in `y` (including joint ties).
    pub y_ties: u64,
    /// Pairs tied in both.
    pub joint_ties: u64,
    /// `concordant - discordant`.
    pub score: i64,
}

impl KendallCounts {
    pub fn tau_b(&self) -> Result<f64> {
        let left = self.pairs - self.x_ties;
        let right = self.pairs - self.y_ties;
        if left == 0 || right == 0 {
            return Err(Error::UndefinedCorrelation("one side is fully tied".into()));
        }
        Ok(self.score as f64 / (left as f64 * right as f64).sqrt())
    }
}

fn tie_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Merge sort counting inversions (strictly decreasing pairs).
fn sort_count_swaps(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = sort_count_swaps(&mut v[..mid], &mut buf[..mid]);
    swaps += sort_count_swaps(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// O(n log n) pair counting (Knight's method).
pub fn kendall_counts(x: &[f64], y: &[f64]) -> Result<KendallCounts> {
    check_pair(x, y)?;
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| match x[a].total_cmp(&x[b]) {
        Ordering::Equal => y[a].total_cmp(&y[b]),
        o => o,
    });
    let xs: Vec<f64> = order.iter().map(|&i| x[i]).collect();
    let mut ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();

    let x_ties = tie_pairs(&xs);
    let mut joint_ties = 0u64;
    let mut run = 1u64;
    for k in 1..n {
        if xs[k] == xs[k - 1] && ys[k] == ys[k - 1] {
            run += 1;
        } else {
            joint_ties += run * (run - 1) / 2;
            run = 1;
        }
    }
    joint_ties += run * (run - 1) / 2;

    let mut buf = vec![0.0; n];
    let swaps = sort_count_swaps(&mut ys, &mut buf);
    let y_ties = tie_pairs(&ys);
    let pairs = (n as u64) * (n as u64 - 1) / 2;
    // concordant + discordant = pairs - x_ties - y_ties + joint_ties, discordant = swaps
    let untied = pairs + joint_ties - x_ties - y_ties;
    let score = untied as i64 - 2 * swaps as i64;
    Ok(KendallCounts {
        pairs,
        x_ties,
        y_ties,
        joint_ties,
        score,
    })
}

/// Kendall's tau-b.
pub fn kendall(x: &[f64], y: &[f64]) -> Result<f64> {
    kendall_counts(x, y)?.tau_b()
}

pub fn mae(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::config("mae needs equal, non-empty inputs"));
    }
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

pub fn evaluate(samples: &[ScoredSample]) -> Result<EvalReport> {
    let pred: Vec<f64> = samples.iter().map(|s| s.prediction).collect();
    let target: Vec<f64> = samples.iter().map(|s| s.target).collect();
    evaluate_slices(&pred, &target)
}

pub fn evaluate_slices(pred: &[f64], target: &[f64]) -> Result<EvalReport> {
    let plcc = pearson(pred, target)?;
    let srocc = spearman(pred, target)?;
    let krocc = kendall(pred, target)?;
    Ok(EvalReport {
        plcc,
        srocc,
        krocc,
        overall: plcc + srocc + krocc,
        mae: mae(pred, target)?,
        n: pred.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_basic() {
        let y = [0.5, 1.5, 3.0, 2.0];
        assert!((pearson(&y, &y).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        assert!((pearson(&neg, &y).unwrap() + 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_variance_is_undefined() {
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::UndefinedCorrelation(_))
        ));
        assert!(spearman(&[2.0; 4], &[1.0, 2.0, 3.0, 4.0]).is_err());
        assert!(kendall(&[1.0, 2.0, 3.0], &[0.0; 3]).is_err());
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_cases() {
        let y = [0.3, 1.0, 2.5, 3.1, 3.9];
        let warped: Vec<f64> = y.iter().map(|v| (v * 2.0_f64).exp()).collect();
        assert_eq!(spearman(&warped, &y).unwrap(), 1.0);
        assert_eq!(
            spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]).unwrap(),
            0.8
        );
    }

    #[test]
    fn fractional_ranks_average_ties() {
        assert_eq!(fractional_ranks(&[1.0, 1.0, 2.0]), vec![1.5, 1.5, 3.0]);
        assert_eq!(fractional_ranks(&[3.0, 1.0, 3.0, 3.0]), vec![3.0, 1.0, 3.0, 3.0]);
    }

    #[test]
    fn kendall_cases() {
        assert_eq!(kendall(&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 5.0, 8.0]).unwrap(), 1.0);
        assert_eq!(kendall(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        // x ties one pair, y none: C=2, D=0, tau_b = 2 / sqrt(2 * 3)
        let t = kendall(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((t - 2.0 / 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn table_one_overall_is_consistent() {
        let sum: f64 = 0.9575 + 0.9561 + 0.8301;
        assert!((sum - 2.7436).abs() <= 5e-4);
    }

    #[test]
    fn perfect_predictions() {
        let samples: Vec<ScoredSample> = [0.0, 1.0, 1.0, 2.5, 4.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| ScoredSample {
                id: i.to_string(),
                target: v,
                prediction: v,
            })
            .collect();
        let r = evaluate(&samples).unwrap();
        assert!((r.plcc - 1.0).abs() < 1e-15);
        assert_eq!((r.srocc, r.krocc, r.mae), (1.0, 1.0, 0.0));
        assert!((r.overall - 3.0).abs() < 1e-15);
    }

    #[test]
    fn report_display_is_key_value() {
        let r = evaluate_slices(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap();
        let text = r.to_string();
        assert!(text.lines().any(|l| l.starts_with("plcc=0.5")));
        assert_eq!(text.lines().count(), 6);
    }
}

//! Exponent sweep over simulated ensembles, optimum selection, the
//! optimum-versus-SNR linear model and population statistics.
//!
//! The sweep needs ground truth, so it only runs on simulated data. Each
//! repetition regenerates trajectories and image noise for the same true
//! sizes; repetitions and grid points are independent work items reduced
//! in index order, so results are bit-reproducible under a fixed seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{fit_weighted, MsdCurve, SizeEstimate};
use crate::similarity::{weights, SimilarityMatrix};
use crate::types::PhysicalContext;

/// Fit configuration shared by every estimate in a sweep.
#[derive(Debug, Clone, Copy)]
pub struct FitParams {
    pub ctx: PhysicalContext,
    pub n_fit_lags: usize,
}

/// Aggregated sweep outcome over all repetitions.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    /// Strictly increasing exponent grid; may end with infinity.
    pub grid: Vec<f64>,
    /// Mean over repetitions of the per-repetition mean |d_hat - d| / d.
    pub mean_rel_diff: Vec<f64>,
    /// Standard deviation of the per-repetition means.
    pub sd_rel_diff: Vec<f64>,
    /// Classic baseline over the grid: `gain = classic / value`.
    pub gain: Vec<f64>,
    /// Mean relative difference of the classic (infinite exponent) fit.
    pub classic_mean_rel_diff: f64,
    pub repetitions: u32,
}

/// Data of one sweep repetition: aligned MSD curves and the similarity
/// matrix measured on that repetition's images.
pub type Repetition = (Vec<MsdCurve>, SimilarityMatrix);

/// Run the exponent sweep.
///
/// `generate` produces the curves and similarity matrix of repetition `r`
/// (fresh randomness per repetition, same true sizes). For every exponent
/// the weighted estimate of every particle is compared to its true size;
/// the per-repetition mean of |relative difference| over valid estimates
/// is aggregated into mean and SD across repetitions. The gain at an
/// exponent is the classic value divided by the sweep value, so the gain
/// at infinity is exactly 1.
pub fn sweep_exponent<F>(
    true_diameters: &[f64],
    grid: &[f64],
    repetitions: u32,
    fit: &FitParams,
    generate: F,
) -> Result<SweepResult>
where
    F: Fn(u32) -> Result<Repetition> + Sync,
{
    if grid.is_empty() || repetitions == 0 {
        return Err(Error::EmptySweep);
    }
    for w in grid.windows(2) {
        // partial_cmp keeps NaN grids out as well.
        if w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less) {
            return Err(Error::Config(
                "exponent grid must be strictly increasing".to_string(),
            ));
        }
    }
    if grid.iter().any(|&g| g.is_nan() || g < 0.0) {
        return Err(Error::NegativeExponent(
            *grid.iter().find(|g| g.is_nan() || **g < 0.0).unwrap(),
        ));
    }

    // rows[r][g]: per-repetition mean relative difference at grid point g;
    // the last column is the classic baseline.
    let rows: Vec<(Vec<f64>, f64)> = (0..repetitions)
        .into_par_iter()
        .map(|rep| -> Result<(Vec<f64>, f64)> {
            let (curves, similarity) = generate(rep)?;
            if curves.len() != true_diameters.len() {
                return Err(Error::Config(format!(
                    "repetition {rep} produced {} curves for {} true sizes",
                    curves.len(),
                    true_diameters.len()
                )));
            }
            let mut row = Vec::with_capacity(grid.len());
            for &n_w in grid {
                let w = weights(&similarity, n_w)?;
                let mut estimates = Vec::with_capacity(curves.len());
                for target in 0..curves.len() {
                    estimates.push(fit_weighted(&curves, &w, target, &fit.ctx, fit.n_fit_lags)?);
                }
                row.push(mean_abs_relative_difference(&estimates, true_diameters)?);
            }
            let w_inf = weights(&similarity, f64::INFINITY)?;
            let mut classic = Vec::with_capacity(curves.len());
            for target in 0..curves.len() {
                classic.push(fit_weighted(
                    &curves,
                    &w_inf,
                    target,
                    &fit.ctx,
                    fit.n_fit_lags,
                )?);
            }
            let classic_val = mean_abs_relative_difference(&classic, true_diameters)?;
            Ok((row, classic_val))
        })
        .collect::<Result<_>>()?;

    let n_rep = repetitions as f64;
    let mut mean_rel_diff = vec![0.0; grid.len()];
    let mut sd_rel_diff = vec![0.0; grid.len()];
    for (row, _) in &rows {
        for (acc, v) in mean_rel_diff.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for m in &mut mean_rel_diff {
        *m /= n_rep;
    }
    if repetitions > 1 {
        for (row, _) in &rows {
            for ((acc, v), m) in sd_rel_diff.iter_mut().zip(row).zip(&mean_rel_diff) {
                let d = v - m;
                *acc += d * d;
            }
        }
        for s in &mut sd_rel_diff {
            *s = (*s / (n_rep - 1.0)).sqrt();
        }
    }
    let classic_mean_rel_diff = rows.iter().map(|(_, c)| c).sum::<f64>() / n_rep;
    let gain = mean_rel_diff
        .iter()
        .map(|&v| classic_mean_rel_diff / v)
        .collect();

    Ok(SweepResult {
        grid: grid.to_vec(),
        mean_rel_diff,
        sd_rel_diff,
        gain,
        classic_mean_rel_diff,
        repetitions,
    })
}

/// Mean of |d_hat - d| / d over valid estimates.
fn mean_abs_relative_difference(estimates: &[SizeEstimate], truth: &[f64]) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (est, &d_true) in estimates.iter().zip(truth) {
        if let Some(d) = est.diameter {
            acc += ((d - d_true) / d_true).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::AllInvalid);
    }
    Ok(acc / n as f64)
}

/// Grid point minimizing the mean relative difference; ties break toward
/// the larger exponent (less averaging).
pub fn optimal_exponent(result: &SweepResult) -> Result<f64> {
    if result.grid.is_empty() {
        return Err(Error::EmptySweep);
    }
    let mut best = result.grid[0];
    let mut best_val = result.mean_rel_diff[0];
    for (&g, &v) in result.grid.iter().zip(&result.mean_rel_diff).skip(1) {
        if v <= best_val {
            best = g;
            best_val = v;
        }
    }
    Ok(best)
}

/// Straight line `n_w_opt = slope / SNR + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrModel {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub n_points: usize,
}

impl SnrModel {
    /// Predicted optimal exponent at an SNR.
    pub fn predict(&self, snr: f64) -> f64 {
        self.slope / snr + self.intercept
    }
}

/// Ordinary least squares of the optimal exponent against the reciprocal
/// SNR. Needs at least four points with distinct, finite SNR and finite
/// optima.
pub fn fit_snr_model(points: &[(f64, f64)]) -> Result<SnrModel> {
    if points.len() < 4 {
        return Err(Error::TooFewSnrPoints {
            got: points.len(),
            need: 4,
        });
    }
    for (i, &(snr, n_w)) in points.iter().enumerate() {
        if !(snr.is_finite() && snr > 0.0) || !n_w.is_finite() {
            return Err(Error::Config(format!(
                "SNR model point {i} is not finite: ({snr}, {n_w})"
            )));
        }
        if points[..i].iter().any(|&(s, _)| s == snr) {
            return Err(Error::TooFewSnrPoints {
                got: points.len() - 1,
                need: 4,
            });
        }
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(snr, _)| 1.0 / snr).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, y)| y).collect();
    let x_bar = xs.iter().sum::<f64>() / n;
    let y_bar = ys.iter().sum::<f64>() / n;
    let s_xy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - x_bar) * (y - y_bar))
        .sum();
    let s_xx: f64 = xs.iter().map(|x| (x - x_bar) * (x - x_bar)).sum();
    let slope = s_xy / s_xx;
    let intercept = y_bar - slope * x_bar;
    let sst: f64 = ys.iter().map(|y| (y - y_bar) * (y - y_bar)).sum();
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (slope * x + intercept);
            r * r
        })
        .sum();
    let r_squared = if sst == 0.0 { 1.0 } else { 1.0 - sse / sst };
    Ok(SnrModel {
        slope,
        intercept,
        r_squared,
        n_points: points.len(),
    })
}

/// Histogram binning policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinSpec {
    /// Fixed number of equal bins over the value range.
    Count(u32),
    /// Fixed bin width in meters, bins aligned to multiples of the width.
    Width(f64),
}

/// One histogram bin: `[lo, hi)`, the last bin closed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Summary of a set of size estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationStats {
    pub mean: f64,
    /// Sample standard deviation (n - 1), zero for a single estimate.
    pub sd: f64,
    pub count: usize,
    pub invalid_count: usize,
    pub histogram: Vec<HistogramBin>,
}

/// Bin edges for a value range under a policy. Degenerate ranges give a
/// single point bin.
pub fn histogram_edges(min: f64, max: f64, bins: &BinSpec) -> Result<Vec<f64>> {
    if !(min.is_finite() && max.is_finite() && min <= max) {
        return Err(Error::Config(format!("bad histogram range [{min}, {max}]")));
    }
    match *bins {
        BinSpec::Count(n) => {
            if n == 0 {
                return Err(Error::Config("histogram needs at least one bin".to_string()));
            }
            if min == max {
                return Ok(vec![min, max]);
            }
            let w = (max - min) / n as f64;
            Ok((0..=n).map(|i| min + w * i as f64).collect())
        }
        BinSpec::Width(w) => {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::Config("bin width must be > 0".to_string()));
            }
            let start = (min / w).floor() * w;
            let mut edges = vec![start];
            let mut hi = start;
            while hi < max || edges.len() < 2 {
                hi += w;
                edges.push(hi);
            }
            Ok(edges)
        }
    }
}

/// Count values into bins given by `edges` (values outside are clamped to
/// the boundary bins; callers derive edges from the same value range).
pub fn histogram_counts(values: &[f64], edges: &[f64]) -> Vec<HistogramBin> {
    let n_bins = edges.len() - 1;
    let mut bins: Vec<HistogramBin> = (0..n_bins)
        .map(|i| HistogramBin {
            lo: edges[i],
            hi: edges[i + 1],
            count: 0,
        })
        .collect();
    let (lo, hi) = (edges[0], edges[n_bins]);
    for &v in values {
        let idx = if hi == lo {
            0
        } else {
            (((v - lo) / (hi - lo) * n_bins as f64).floor() as i64).clamp(0, n_bins as i64 - 1)
                as usize
        };
        bins[idx].count += 1;
    }
    bins
}

/// Mean, SD and histogram of the valid estimates; invalid ones are
/// counted, not dropped silently. Errors when nothing is valid.
pub fn population_stats(estimates: &[SizeEstimate], bins: &BinSpec) -> Result<PopulationStats> {
    let valid: Vec<f64> = estimates.iter().filter_map(|e| e.diameter).collect();
    let invalid_count = estimates.len() - valid.len();
    if valid.is_empty() {
        return Err(Error::AllInvalid);
    }
    let n = valid.len() as f64;
    let mean = valid.iter().sum::<f64>() / n;
    let sd = if valid.len() > 1 {
        (valid.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let min = valid.iter().copied().fold(f64::INFINITY, f64::min);
    let max = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let edges = histogram_edges(min, max, bins)?;
    let histogram = histogram_counts(&valid, &edges);
    Ok(PopulationStats {
        mean,
        sd,
        count: valid.len(),
        invalid_count,
        histogram,
    })
}

/// Separation of two populations: distance of the means over the pooled
/// standard deviation. Larger is better separated.
pub fn separation_index(a: &PopulationStats, b: &PopulationStats) -> f64 {
    let pooled = (0.5 * (a.sd * a.sd + b.sd * b.sd)).sqrt();
    (a.mean - b.mean).abs() / pooled
}

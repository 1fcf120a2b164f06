//! MSD curves, classic and similarity-weighted linear fits, diameter
//! extraction and complex-refractive-index inversion.
//!
//! The weighted fit pools the MSD points of every particle, each curve
//! carrying the weight of its similarity to the target particle. Because
//! all curves share one lag grid, the pooled weighted least squares line
//! reduces algebraically to a weight-averaged combination of per-curve
//! sufficient statistics; both the classic and the weighted paths go
//! through the same statistics so the infinite-exponent weighted fit is
//! bit-identical to the classic fit.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::similarity::WeightMatrix;
use crate::types::{Dimensionality, ParticleRecord, PhysicalContext, Trajectory, BOLTZMANN};

/// One lag of an MSD curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MsdPoint {
    /// Time lag in seconds.
    pub tau: f64,
    /// Mean squared displacement in m².
    pub msd: f64,
    /// Number of displacement pairs averaged into this lag.
    pub n_pairs: usize,
}

/// MSD as a function of time lag for one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct MsdCurve {
    pub particle_id: u64,
    pub dim: Dimensionality,
    /// Strictly increasing lags starting at one frame interval.
    pub lags: Vec<MsdPoint>,
}

/// Compute the MSD curve with the overlapping estimator:
/// `MSD(k dt) = mean over i of |r_{i+k} - r_i|^2`, using all `N - k` pairs.
pub fn msd_curve(traj: &Trajectory, max_lag: usize) -> Result<MsdCurve> {
    let n = traj.len();
    if max_lag < 1 || max_lag >= n {
        return Err(Error::BadLagRange { max_lag, len: n });
    }
    let mut lags = Vec::with_capacity(max_lag);
    for k in 1..=max_lag {
        let pairs = n - k;
        let mut acc = 0.0;
        for i in 0..pairs {
            acc += traj.squared_displacement(i, i + k);
        }
        lags.push(MsdPoint {
            tau: k as f64 * traj.dt,
            msd: acc / pairs as f64,
            n_pairs: pairs,
        });
    }
    Ok(MsdCurve {
        particle_id: traj.particle_id,
        dim: traj.dim,
        lags,
    })
}

/// How a size estimate was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitMethod {
    /// Per-particle fit of the particle's own MSD curve.
    Classic,
    /// Similarity-weighted fit over all curves.
    Weighted,
    /// Zero-exponent limit: every curve weighted equally.
    Arithmetic,
}

/// Result of inverting one MSD line into a diameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SizeEstimate {
    pub particle_id: u64,
    /// Hydrodynamic diameter in meters; `None` when the fitted slope was
    /// not positive (the estimate is carried, not dropped, so population
    /// statistics can report exclusion counts).
    pub diameter: Option<f64>,
    /// Fitted MSD slope in m²/s.
    pub slope: f64,
    /// Fitted intercept in m² (absorbs localization error).
    pub intercept: f64,
    pub method: FitMethod,
    /// Exponent used to build the weights; infinity for the classic limit.
    pub n_w_used: f64,
    /// Set when a degenerate weight row forced a fall back to the classic
    /// fit of the target particle.
    pub fallback: bool,
}

impl SizeEstimate {
    pub fn is_valid(&self) -> bool {
        self.diameter.is_some()
    }
}

/// Per-curve sufficient statistics of an OLS line over the first `n` lags.
#[derive(Debug, Clone, Copy)]
struct LineStats {
    slope: f64,
    mean_y: f64,
}

/// Shared lag-grid geometry of a fit window.
#[derive(Debug, Clone, Copy)]
struct LagGrid {
    tau_bar: f64,
    /// `sum_k (tau_k - tau_bar)^2`
    s_tt: f64,
}

fn check_fit_lags(curve: &MsdCurve, n_fit_lags: usize) -> Result<()> {
    if n_fit_lags < 2 || n_fit_lags > curve.lags.len() {
        return Err(Error::BadFitLags {
            requested: n_fit_lags,
            available: curve.lags.len(),
        });
    }
    Ok(())
}

fn lag_grid(curve: &MsdCurve, n: usize) -> LagGrid {
    let tau_bar = curve.lags[..n].iter().map(|p| p.tau).sum::<f64>() / n as f64;
    let s_tt = curve.lags[..n]
        .iter()
        .map(|p| {
            let d = p.tau - tau_bar;
            d * d
        })
        .sum::<f64>();
    LagGrid { tau_bar, s_tt }
}

fn line_stats(curve: &MsdCurve, n: usize, grid: &LagGrid) -> LineStats {
    let mut s_ty = 0.0;
    let mut sum_y = 0.0;
    for p in &curve.lags[..n] {
        s_ty += (p.tau - grid.tau_bar) * p.msd;
        sum_y += p.msd;
    }
    LineStats {
        slope: s_ty / grid.s_tt,
        mean_y: sum_y / n as f64,
    }
}

/// Invert an MSD slope into a diameter. The slope of free diffusion is
/// `2 * axes * D`, so `d = 2 k_B T / (pi eta s)` in 3D and
/// `d = 4 k_B T / (3 pi eta s)` in 2D. Non-positive or non-finite slopes
/// give `None`.
pub fn diameter_from_slope(ctx: &PhysicalContext, dim: Dimensionality, slope: f64) -> Option<f64> {
    if !(slope.is_finite() && slope > 0.0) {
        return None;
    }
    let d_coef = slope / dim.slope_factor();
    Some(BOLTZMANN * ctx.temperature / (3.0 * std::f64::consts::PI * ctx.viscosity * d_coef))
}

#[allow(clippy::too_many_arguments)]
fn estimate_from_line(
    particle_id: u64,
    ctx: &PhysicalContext,
    dim: Dimensionality,
    grid: &LagGrid,
    line: LineStats,
    method: FitMethod,
    n_w_used: f64,
    fallback: bool,
) -> SizeEstimate {
    let intercept = line.mean_y - line.slope * grid.tau_bar;
    SizeEstimate {
        particle_id,
        diameter: diameter_from_slope(ctx, dim, line.slope),
        slope: line.slope,
        intercept,
        method,
        n_w_used,
        fallback,
    }
}

/// Ordinary least squares line over the first `n_fit_lags` MSD points,
/// inverted into a diameter. The intercept is free so localization error
/// does not bias the slope.
pub fn fit_classic(
    curve: &MsdCurve,
    ctx: &PhysicalContext,
    n_fit_lags: usize,
) -> Result<SizeEstimate> {
    check_fit_lags(curve, n_fit_lags)?;
    let grid = lag_grid(curve, n_fit_lags);
    let line = line_stats(curve, n_fit_lags, &grid);
    Ok(estimate_from_line(
        curve.particle_id,
        ctx,
        curve.dim,
        &grid,
        line,
        FitMethod::Classic,
        f64::INFINITY,
        false,
    ))
}

/// Weighted least squares over the pooled point set of all curves, each
/// point of curve `j` carrying the weight `W[target, j]`.
///
/// All curves must share the lag grid over the fit window. With the
/// infinite exponent (weights are exactly 0/1) the result is bit-identical
/// to [`fit_classic`] of the target; with the zero exponent every target
/// gets the same pooled estimate. A numerically degenerate weight row
/// falls back to the classic fit and sets the `fallback` flag.
pub fn fit_weighted(
    curves: &[MsdCurve],
    weights: &WeightMatrix,
    target: usize,
    ctx: &PhysicalContext,
    n_fit_lags: usize,
) -> Result<SizeEstimate> {
    if weights.size() != curves.len() {
        return Err(Error::WeightSizeMismatch {
            expected: curves.len(),
            got: weights.size(),
        });
    }
    let target_curve = &curves[target];
    check_fit_lags(target_curve, n_fit_lags)?;
    let grid = lag_grid(target_curve, n_fit_lags);
    for (j, c) in curves.iter().enumerate() {
        check_fit_lags(c, n_fit_lags)?;
        if c.dim != target_curve.dim {
            return Err(Error::InvalidTrajectory(format!(
                "curve {j} has a different dimensionality"
            )));
        }
        for (a, b) in c.lags[..n_fit_lags]
            .iter()
            .zip(&target_curve.lags[..n_fit_lags])
        {
            if a.tau != b.tau {
                return Err(Error::InvalidTrajectory(format!(
                    "curve {j} is on a different lag grid"
                )));
            }
        }
    }

    // The infinite exponent is the classic limit: only the target's own
    // curve counts, even if clamping left other entries at exactly 1.
    if weights.exponent().is_infinite() {
        let line = line_stats(target_curve, n_fit_lags, &grid);
        return Ok(estimate_from_line(
            target_curve.particle_id,
            ctx,
            target_curve.dim,
            &grid,
            line,
            FitMethod::Weighted,
            f64::INFINITY,
            false,
        ));
    }

    // Pooled WLS over points (tau_k, msd_jk) with per-curve weights w_j
    // and a shared lag grid collapses to weight averages of the per-curve
    // statistics: slope = sum_j w_j s_j / sum_j w_j, and likewise for the
    // mean level. Accumulation order is fixed by the curve index.
    let mut w_sum = 0.0;
    let mut slope_acc = 0.0;
    let mut mean_y_acc = 0.0;
    for (j, c) in curves.iter().enumerate() {
        let w = weights.get(target, j);
        let stats = line_stats(c, n_fit_lags, &grid);
        w_sum += w;
        slope_acc += w * stats.slope;
        mean_y_acc += w * stats.mean_y;
    }

    if !(w_sum.is_finite() && w_sum > 0.0) {
        let mut est = fit_classic(target_curve, ctx, n_fit_lags)?;
        est.method = FitMethod::Weighted;
        est.n_w_used = weights.exponent();
        est.fallback = true;
        return Ok(est);
    }

    let line = LineStats {
        slope: slope_acc / w_sum,
        mean_y: mean_y_acc / w_sum,
    };
    let n_w = weights.exponent();
    let method = if n_w == 0.0 {
        FitMethod::Arithmetic
    } else {
        FitMethod::Weighted
    };
    Ok(estimate_from_line(
        target_curve.particle_id,
        ctx,
        target_curve.dim,
        &grid,
        line,
        method,
        n_w,
        false,
    ))
}

/// Complex refractive index recovered from an averaged field image.
#[derive(Debug, Clone, PartialEq)]
pub struct RefractiveIndexEstimate {
    pub particle_id: u64,
    /// Real part of the recovered index.
    pub n: f64,
    /// Imaginary part (absorption) of the recovered index.
    pub k: f64,
    /// Particle volume `pi/6 d^3` used in the inversion, in m³.
    pub volume_used: f64,
    /// Raw surface integral of the real part, in m³.
    pub integral_re: f64,
    /// Raw surface integral of the imaginary part, in m³.
    pub integral_im: f64,
}

/// Invert the integrated field image into a complex refractive index:
/// the index shift from the medium scales with the inverse particle
/// volume, the real shift taking half the real-part integral and the
/// imaginary shift the imaginary-part integral. Both raw integrals are
/// reported so either sign/assignment convention can be reconstructed.
pub fn refractive_index(
    record: &ParticleRecord,
    diameter: f64,
    ctx: &PhysicalContext,
) -> Result<RefractiveIndexEstimate> {
    refractive_index_from_image(record.id, &record.rytov, diameter, ctx)
}

/// Image-level form of [`refractive_index`] for callers that do not carry
/// a full record (the command-line refindex stage reads bare images).
pub fn refractive_index_from_image(
    particle_id: u64,
    image: &crate::types::RytovImage,
    diameter: f64,
    ctx: &PhysicalContext,
) -> Result<RefractiveIndexEstimate> {
    if !(diameter.is_finite() && diameter > 0.0) {
        return Err(Error::NonPositiveDiameter(diameter));
    }
    let volume = std::f64::consts::PI / 6.0 * diameter.powi(3);
    let integral: Complex64 = image.surface_integral();
    let n = ctx.n_medium - 0.5 * integral.re / (ctx.n_medium * volume);
    let k = -integral.im / (ctx.n_medium * volume);
    Ok(RefractiveIndexEstimate {
        particle_id,
        n,
        // Normalize -0.0 so a zero image reports exactly n_medium + 0i.
        k: k + 0.0,
        volume_used: volume,
        integral_re: integral.re,
        integral_im: integral.im,
    })
}

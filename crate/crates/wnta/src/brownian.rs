//! Seeded Brownian trajectory generation for ensembles of particles with
//! normally distributed true sizes.
//!
//! Free diffusion only: no drift, no flow, no inter-particle interactions.
//! Every operation is pure given `(spec, seed)`, so per-particle generation
//! parallelizes trivially.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{
    diffusion_coefficient, streams, Dimensionality, PhysicalContext, RngSeed, Trajectory,
};

/// Complex refractive index `n + i k` of a particle material.
///
/// `n >= 1` is not required (metals are allowed); `k` must be non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialSpec {
    /// Real part of the refractive index.
    pub n: f64,
    /// Absorption coefficient (imaginary part).
    pub k: f64,
}

impl MaterialSpec {
    pub fn new(n: f64, k: f64) -> Result<Self> {
        let m = MaterialSpec { n, k };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n.is_finite() && self.n > 0.0) {
            return Err(Error::InvalidEnsemble(format!(
                "material n must be finite and > 0, got {}",
                self.n
            )));
        }
        if !(self.k.is_finite() && self.k >= 0.0) {
            return Err(Error::InvalidEnsemble(format!(
                "material k must be >= 0, got {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// One normally distributed particle population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Population {
    pub count: u32,
    #[serde(rename = "mean_diameter_m")]
    pub mean_diameter: f64,
    #[serde(rename = "sd_diameter_m")]
    pub sd_diameter: f64,
    pub material: MaterialSpec,
    /// Free-form tag carried through to output tables ([A-Za-z0-9_-] only).
    #[serde(default)]
    pub label: String,
}

/// Mixture of populations plus the tracking protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub populations: Vec<Population>,
    /// Number of tracked points per trajectory.
    pub n_steps: u32,
    /// Frame interval in seconds.
    #[serde(rename = "dt_s")]
    pub dt: f64,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.populations.is_empty() {
            return Err(Error::InvalidEnsemble("no populations".to_string()));
        }
        for (i, p) in self.populations.iter().enumerate() {
            if p.count < 1 {
                return Err(Error::InvalidEnsemble(format!(
                    "population {i}: count must be >= 1"
                )));
            }
            if !(p.mean_diameter.is_finite() && p.mean_diameter > 0.0) {
                return Err(Error::InvalidEnsemble(format!(
                    "population {i}: mean_diameter_m must be > 0"
                )));
            }
            if !(p.sd_diameter.is_finite() && p.sd_diameter >= 0.0) {
                return Err(Error::InvalidEnsemble(format!(
                    "population {i}: sd_diameter_m must be >= 0"
                )));
            }
            if !p
                .label
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(Error::InvalidEnsemble(format!(
                    "population {i}: label must match [A-Za-z0-9_-]*"
                )));
            }
            p.material.validate()?;
        }
        if self.n_steps < 2 {
            return Err(Error::InvalidEnsemble("n_steps must be >= 2".to_string()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidEnsemble("dt_s must be > 0".to_string()));
        }
        Ok(())
    }

    /// Total particle count over all populations.
    pub fn total_count(&self) -> usize {
        self.populations.iter().map(|p| p.count as usize).sum()
    }
}

/// True size and material of one simulated particle.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueParticle {
    pub diameter: f64,
    pub material: MaterialSpec,
    /// Index of the population the particle was drawn from.
    pub population: usize,
}

/// Draw the true diameters of every particle in the ensemble.
///
/// Each population contributes `count` draws from `N(mean, sd²)`;
/// non-positive draws are rejected and redrawn, which preserves the
/// unimodal shape of the distribution. With `sd = 0` the mean is used
/// verbatim without consuming randomness.
pub fn sample_true_sizes(spec: &EnsembleSpec, seed: RngSeed) -> Result<Vec<TrueParticle>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.total_count());
    let mut rng = seed.derive(streams::SIZES).rng();
    for (pop_idx, pop) in spec.populations.iter().enumerate() {
        for _ in 0..pop.count {
            let diameter = if pop.sd_diameter == 0.0 {
                pop.mean_diameter
            } else {
                loop {
                    let z: f64 = rng.sample(StandardNormal);
                    let d = pop.mean_diameter + pop.sd_diameter * z;
                    if d > 0.0 {
                        break d;
                    }
                }
            };
            out.push(TrueParticle {
                diameter,
                material: pop.material,
                population: pop_idx,
            });
        }
    }
    Ok(out)
}

/// Generate one free-diffusion trajectory starting at the origin.
///
/// Each step adds an independent `N(0, 2 D dt)` displacement per diffusing
/// axis; `n_steps` is the number of tracked points, so `n_steps - 1` steps
/// are taken. Identical `(inputs, seed)` give bit-identical output.
pub fn simulate_trajectory(
    ctx: &PhysicalContext,
    particle_id: u64,
    diameter: f64,
    n_steps: u32,
    dt: f64,
    dim: Dimensionality,
    seed: RngSeed,
) -> Result<Trajectory> {
    if n_steps < 2 {
        return Err(Error::InvalidTrajectory(
            "n_steps must be >= 2".to_string(),
        ));
    }
    let d_coef = diffusion_coefficient(ctx, diameter)?;
    let step_sigma = (2.0 * d_coef * dt).sqrt();
    let mut rng = seed.rng();
    let mut positions = Vec::with_capacity(n_steps as usize);
    let mut current = [0.0f64; 3];
    positions.push(current);
    for _ in 1..n_steps {
        for coord in current.iter_mut().take(dim.axes()) {
            let z: f64 = rng.sample(StandardNormal);
            *coord += step_sigma * z;
        }
        positions.push(current);
    }
    Trajectory::new(particle_id, dt, positions, dim)
}

/// Corrupt a trajectory with per-frame localization error: independent
/// `N(0, sigma_lateral²)` on x and y, `N(0, sigma_axial²)` on z.
///
/// In 2D mode the axial coordinate stays exactly zero.
pub fn apply_localization_error(
    traj: &Trajectory,
    sigma_lateral: f64,
    sigma_axial: f64,
    seed: RngSeed,
) -> Result<Trajectory> {
    if !(sigma_lateral.is_finite() && sigma_lateral >= 0.0)
        || !(sigma_axial.is_finite() && sigma_axial >= 0.0)
    {
        return Err(Error::InvalidTrajectory(
            "localization sigmas must be >= 0".to_string(),
        ));
    }
    let mut rng = seed.rng();
    let mut positions = Vec::with_capacity(traj.len());
    for p in &traj.positions {
        let mut q = *p;
        for coord in q.iter_mut().take(2) {
            let z: f64 = rng.sample(StandardNormal);
            *coord += sigma_lateral * z;
        }
        if traj.dim == Dimensionality::Three {
            let z: f64 = rng.sample(StandardNormal);
            q[2] += sigma_axial * z;
        }
        positions.push(q);
    }
    Trajectory::new(traj.particle_id, traj.dt, positions, traj.dim)
}

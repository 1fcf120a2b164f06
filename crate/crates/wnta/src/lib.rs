//! Weighted nanoparticle tracking analysis.
//!
//! Sizing a Brownian nanoparticle from a single short trajectory is noisy:
//! the mean squared displacement converges slowly, so per-particle
//! diameters scatter far beyond the true size dispersion. This crate
//! implements a weighted variant of tracking analysis in which every
//! particle's MSD curve is fitted jointly with all other curves, each
//! weighted by how optically similar the two particles look in complex
//! field images. The weight is a similarity in `[0, 1]` raised to an
//! exponent: zero pools everything into one average, infinity recovers the
//! per-particle classic analysis, and a calibrated exponent in between
//! trades averaging against bias.
//!
//! The crate also ships the simulation pipeline used to validate and
//! calibrate the method (Brownian ensembles, a simplified field-image
//! forward model, noise estimation from split stacks, exponent sweeps)
//! plus the file formats and orchestration behind the `wnta` command-line
//! tool.
//!
//! ```
//! use wnta::brownian::{simulate_trajectory};
//! use wnta::estimator::{fit_classic, msd_curve};
//! use wnta::types::{Dimensionality, PhysicalContext, RngSeed};
//!
//! let ctx = PhysicalContext::new(293.0, 1.0e-3, 550e-9, 1.33)?;
//! let traj = simulate_trajectory(
//!     &ctx, 0, 100e-9, 200, 0.01, Dimensionality::Three, RngSeed(7),
//! )?;
//! let curve = msd_curve(&traj, 4)?;
//! let estimate = fit_classic(&curve, &ctx, 4)?;
//! assert!(estimate.diameter.is_some());
//! # Ok::<(), wnta::Error>(())
//! ```

pub mod brownian;
pub mod calibration;
pub mod config;
pub mod error;
pub mod estimator;
pub mod formats;
pub mod optics;
pub mod pipeline;
pub mod similarity;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    diffusion_coefficient, Dimensionality, ParticleRecord, PhysicalContext, RngSeed, RytovImage,
    Trajectory, BOLTZMANN,
};

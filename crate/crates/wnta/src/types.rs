//! Shared domain types: physical context, trajectories, complex field images,
//! per-particle records and the seeding scheme for reproducible runs.
//!
//! All quantities are SI. Positions and field values are stored in meters;
//! nanometers only appear at I/O boundaries. Every type here is immutable
//! after construction and safe to share across worker threads.

use num_complex::Complex64;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Boltzmann constant in J/K (CODATA exact value, not configurable).
pub const BOLTZMANN: f64 = 1.380649e-23;

/// Medium and illumination parameters shared by a whole acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalContext {
    /// Absolute temperature in kelvin.
    #[serde(rename = "temperature_k")]
    pub temperature: f64,
    /// Dynamic viscosity of the medium in Pa·s.
    #[serde(rename = "viscosity_pa_s")]
    pub viscosity: f64,
    /// Illumination wavelength in meters.
    #[serde(rename = "wavelength_m")]
    pub wavelength: f64,
    /// Refractive index of the surrounding medium.
    pub n_medium: f64,
}

impl PhysicalContext {
    pub fn new(temperature: f64, viscosity: f64, wavelength: f64, n_medium: f64) -> Result<Self> {
        let ctx = PhysicalContext {
            temperature,
            viscosity,
            wavelength,
            n_medium,
        };
        ctx.validate()?;
        Ok(ctx)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidContext(msg.to_string()))
            }
        };
        check(
            self.temperature.is_finite() && self.temperature > 0.0,
            "temperature_k must be > 0",
        )?;
        check(
            self.viscosity.is_finite() && self.viscosity > 0.0,
            "viscosity_pa_s must be > 0",
        )?;
        check(
            self.wavelength.is_finite() && self.wavelength > 0.0,
            "wavelength_m must be > 0",
        )?;
        check(
            self.n_medium.is_finite() && self.n_medium >= 1.0,
            "n_medium must be >= 1",
        )
    }
}

/// Stokes-Einstein diffusion coefficient `k_B T / (3 pi eta d)` in m²/s.
///
/// Strictly decreasing in the diameter and increasing in temperature.
pub fn diffusion_coefficient(ctx: &PhysicalContext, diameter: f64) -> Result<f64> {
    if !(diameter.is_finite() && diameter > 0.0) {
        return Err(Error::NonPositiveDiameter(diameter));
    }
    ctx.validate()?;
    Ok(BOLTZMANN * ctx.temperature / (3.0 * std::f64::consts::PI * ctx.viscosity * diameter))
}

/// Number of spatial dimensions a trajectory diffuses in.
///
/// 2D mode keeps the axial coordinate at zero; the MSD slope of free
/// diffusion is `4 D` instead of `6 D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Dimensionality {
    Two,
    Three,
}

impl Dimensionality {
    /// Number of diffusing axes.
    pub fn axes(self) -> usize {
        match self {
            Dimensionality::Two => 2,
            Dimensionality::Three => 3,
        }
    }

    /// MSD slope of free diffusion in units of the diffusion coefficient:
    /// `2 * axes`.
    pub fn slope_factor(self) -> f64 {
        2.0 * self.axes() as f64
    }
}

impl TryFrom<u8> for Dimensionality {
    type Error = String;

    fn try_from(value: u8) -> std::result::Result<Self, String> {
        match value {
            2 => Ok(Dimensionality::Two),
            3 => Ok(Dimensionality::Three),
            other => Err(format!("dimensionality must be 2 or 3, got {other}")),
        }
    }
}

impl From<Dimensionality> for u8 {
    fn from(value: Dimensionality) -> u8 {
        value.axes() as u8
    }
}

/// Time-ordered positions of one tracked particle.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub particle_id: u64,
    /// Frame interval in seconds.
    pub dt: f64,
    /// Positions in meters; `[x, y, z]` with `z = 0` in 2D mode.
    pub positions: Vec<[f64; 3]>,
    pub dim: Dimensionality,
}

impl Trajectory {
    pub fn new(
        particle_id: u64,
        dt: f64,
        positions: Vec<[f64; 3]>,
        dim: Dimensionality,
    ) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::InvalidTrajectory(format!(
                "need at least 2 positions, got {}",
                positions.len()
            )));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidTrajectory(format!("dt must be > 0, got {dt}")));
        }
        if let Some(i) = positions
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::InvalidTrajectory(format!(
                "non-finite position at frame {i}"
            )));
        }
        Ok(Trajectory {
            particle_id,
            dt,
            positions,
            dim,
        })
    }

    /// Number of tracked points.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Squared displacement between two frames over the diffusing axes only.
    pub fn squared_displacement(&self, from: usize, to: usize) -> f64 {
        let a = self.positions[from];
        let b = self.positions[to];
        (0..self.dim.axes())
            .map(|ax| {
                let d = b[ax] - a[ax];
                d * d
            })
            .sum()
    }
}

/// Complex field image of one particle. The real part carries refraction,
/// the imaginary part attenuation; values have the dimension of length.
#[derive(Debug, Clone, PartialEq)]
pub struct RytovImage {
    pub width: u32,
    pub height: u32,
    /// Size of one pixel in meters.
    pub pixel_size: f64,
    /// Row-major pixel values in meters.
    pub values: Vec<Complex64>,
    /// Noise variance of the image (Var Re + Var Im, in m²), if estimated.
    pub epsilon: Option<f64>,
}

impl RytovImage {
    pub fn new(width: u32, height: u32, pixel_size: f64, values: Vec<Complex64>) -> Result<Self> {
        if width as usize * height as usize != values.len() {
            return Err(Error::InvalidImage(format!(
                "{width} x {height} does not match {} values",
                values.len()
            )));
        }
        if !(pixel_size.is_finite() && pixel_size > 0.0) {
            return Err(Error::InvalidImage(format!(
                "pixel_size must be > 0, got {pixel_size}"
            )));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::InvalidImage("non-finite pixel value".to_string()));
        }
        Ok(RytovImage {
            width,
            height,
            pixel_size,
            values,
            epsilon: None,
        })
    }

    /// Attach a noise variance estimate.
    pub fn with_epsilon(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(Error::InvalidImage(format!(
                "epsilon must be >= 0, got {epsilon}"
            )));
        }
        self.epsilon = Some(epsilon);
        Ok(self)
    }

    pub fn zeros(width: u32, height: u32, pixel_size: f64) -> Result<Self> {
        RytovImage::new(
            width,
            height,
            pixel_size,
            vec![Complex64::new(0.0, 0.0); width as usize * height as usize],
        )
    }

    #[inline]
    pub fn index(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Complex64 {
        self.values[self.index(x, y)]
    }

    pub fn same_dims(&self, other: &RytovImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Largest modulus over all pixels.
    pub fn peak_amplitude(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    /// Population variance pooled over parts: `Var(Re) + Var(Im)`.
    ///
    /// Two-pass so that near-zero-mean images do not lose precision to
    /// cancellation.
    pub fn complex_variance(&self) -> f64 {
        complex_variance(self.values.iter().copied())
    }

    /// Sum of pixel values times pixel area: the discrete surface integral
    /// of the field, in m³.
    pub fn surface_integral(&self) -> Complex64 {
        let sum: Complex64 = self.values.iter().sum();
        sum * (self.pixel_size * self.pixel_size)
    }
}

/// `Var(Re) + Var(Im)` of a pixel stream (population variance).
pub(crate) fn complex_variance(values: impl Iterator<Item = Complex64> + Clone) -> f64 {
    let mut n = 0usize;
    let mut sum = Complex64::new(0.0, 0.0);
    for v in values.clone() {
        sum += v;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    let mean = sum / n as f64;
    let mut acc = 0.0;
    for v in values {
        let d = v - mean;
        acc += d.re * d.re + d.im * d.im;
    }
    acc / n as f64
}

/// Everything measured for one particle: its track, its averaged field
/// image and the signal-to-noise ratio of that image.
#[derive(Debug, Clone)]
pub struct ParticleRecord {
    pub id: u64,
    pub trajectory: Trajectory,
    pub rytov: RytovImage,
    /// Peak amplitude over noise standard deviation; `None` until computed.
    pub snr: Option<f64>,
}

impl ParticleRecord {
    pub fn new(
        id: u64,
        trajectory: Trajectory,
        rytov: RytovImage,
        snr: Option<f64>,
    ) -> Result<Self> {
        if let Some(s) = snr {
            if s.is_nan() || s <= 0.0 {
                return Err(Error::InvalidImage(format!("snr must be > 0, got {s}")));
            }
        }
        Ok(ParticleRecord {
            id,
            trajectory,
            rytov,
            snr,
        })
    }
}

/// Named sub-stream tags for [`RngSeed::derive`]. Each independent source
/// of randomness in a run hangs off its own tag so streams never collide.
pub mod streams {
    /// True diameter draws.
    pub const SIZES: u64 = 0x53495A45;
    /// Brownian steps.
    pub const TRAJECTORY: u64 = 0x5452414A;
    /// Localization error.
    pub const LOCALIZATION: u64 = 0x4C4F4341;
    /// Camera shot noise.
    pub const SHOT_NOISE: u64 = 0x53484F54;
    /// Sweep repetitions.
    pub const REPETITION: u64 = 0x52455045;
}

/// Top-level seed of a run. Sub-streams are derived by hashing the seed
/// with a stream tag (see [`streams`]), so per-particle generators are
/// independent and insensitive to generation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RngSeed(pub u64);

/// Identity string of the generator stack, recorded in run manifests.
pub const RNG_IDENTITY: &str = "chacha8+splitmix64-substreams/v1";

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl RngSeed {
    /// Derive the seed of an independent sub-stream. Chaining derives is
    /// order-sensitive: `seed.derive(TAG).derive(id)` is the per-particle
    /// convention used everywhere in this crate.
    pub fn derive(self, stream: u64) -> RngSeed {
        RngSeed(splitmix64(self.0 ^ splitmix64(stream)))
    }

    /// Instantiate the stream cipher generator for this seed.
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

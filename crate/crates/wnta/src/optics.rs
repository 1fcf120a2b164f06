//! Field-image formation, noise injection, recentered time-lapse averaging,
//! split-ensemble noise estimation and SNR.
//!
//! The forward model is deliberately simple: a sub-resolution particle is a
//! point scatterer imaged as a unit-peak Gaussian whose complex amplitude is
//! the particle volume times the Clausius-Mossotti contrast of its material,
//! normalized so the integrated field equals volume times contrast. This
//! keeps the two things the similarity metric cares about, the complex
//! amplitude and the footprint shape, while dropping diffraction structure;
//! defocus, fringes and vectorial effects are out of scope.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::brownian::MaterialSpec;
use crate::error::{Error, Result};
use crate::types::{complex_variance, PhysicalContext, RngSeed, RytovImage};

/// Geometry and noise level of the synthetic imaging channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagingSpec {
    #[serde(rename = "width_px")]
    pub width: u32,
    #[serde(rename = "height_px")]
    pub height: u32,
    /// Pixel pitch in meters.
    #[serde(rename = "pixel_size_m")]
    pub pixel_size: f64,
    /// Gaussian envelope sigma of the particle signature in meters. This
    /// stands in for the extent of the full interference signature of a
    /// real acquisition, so it is wider than a diffraction-limited spot.
    #[serde(rename = "psf_sigma_m")]
    pub psf_sigma: f64,
    /// Radial period of the interference rings riding on the envelope, in
    /// meters. Zero disables the rings and leaves a plain Gaussian spot.
    #[serde(rename = "fringe_period_m")]
    pub fringe_period: f64,
    /// Per-frame noise standard deviation added independently to the real
    /// and imaginary parts of every pixel (field units, i.e. meters).
    /// Zero means noiseless.
    pub photon_noise_sigma: f64,
}

impl ImagingSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::InvalidImage(format!(
                "image must be at least 8x8 pixels, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.pixel_size.is_finite() && self.pixel_size > 0.0) {
            return Err(Error::InvalidImage("pixel_size_m must be > 0".to_string()));
        }
        if !(self.psf_sigma.is_finite() && self.psf_sigma > 0.0) {
            return Err(Error::InvalidImage("psf_sigma_m must be > 0".to_string()));
        }
        if !(self.fringe_period.is_finite() && self.fringe_period >= 0.0) {
            return Err(Error::InvalidImage(
                "fringe_period_m must be >= 0".to_string(),
            ));
        }
        if self.fringe_period > 0.0 && self.fringe_period < 4.0 * self.pixel_size {
            return Err(Error::InvalidImage(
                "fringe_period_m must cover at least 4 pixels".to_string(),
            ));
        }
        if !(self.photon_noise_sigma.is_finite() && self.photon_noise_sigma >= 0.0) {
            return Err(Error::InvalidImage(
                "photon_noise_sigma must be >= 0".to_string(),
            ));
        }
        Ok(())
    }

    fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Real-valued image (intensity or phase) on the same grid as [`RytovImage`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarImage {
    pub width: u32,
    pub height: u32,
    pub pixel_size: f64,
    pub values: Vec<f64>,
}

impl ScalarImage {
    pub fn new(width: u32, height: u32, pixel_size: f64, values: Vec<f64>) -> Result<Self> {
        if width as usize * height as usize != values.len() {
            return Err(Error::InvalidImage(format!(
                "{width} x {height} does not match {} values",
                values.len()
            )));
        }
        Ok(ScalarImage {
            width,
            height,
            pixel_size,
            values,
        })
    }
}

/// Merge an intensity and a phase image into the complex field observable:
/// per pixel `Re = -(lambda n_m / pi) * phi` and
/// `Im = (lambda n_m / pi) * ln(I) / 2`.
///
/// Intensity must be strictly positive everywhere; the offending pixel is
/// named otherwise.
pub fn rytov_from_intensity_phase(
    intensity: &ScalarImage,
    phase: &ScalarImage,
    ctx: &PhysicalContext,
) -> Result<RytovImage> {
    if intensity.width != phase.width || intensity.height != phase.height {
        return Err(Error::DimensionMismatch {
            a_width: intensity.width,
            a_height: intensity.height,
            b_width: phase.width,
            b_height: phase.height,
            pair: None,
        });
    }
    let scale = ctx.wavelength * ctx.n_medium / std::f64::consts::PI;
    let mut values = Vec::with_capacity(intensity.values.len());
    for (idx, (&i, &phi)) in intensity
        .values
        .iter()
        .zip(phase.values.iter())
        .enumerate()
    {
        if !(i.is_finite() && i > 0.0) {
            let x = idx as u32 % intensity.width;
            let y = idx as u32 / intensity.width;
            return Err(Error::NonPositiveIntensity { x, y, value: i });
        }
        values.push(Complex64::new(-scale * phi, scale * i.ln() / 2.0));
    }
    RytovImage::new(
        intensity.width,
        intensity.height,
        intensity.pixel_size,
        values,
    )
}

/// Inverse of [`rytov_from_intensity_phase`]: recover `(intensity, phase)`.
pub fn intensity_phase_from_rytov(
    field: &RytovImage,
    ctx: &PhysicalContext,
) -> (ScalarImage, ScalarImage) {
    let scale = ctx.wavelength * ctx.n_medium / std::f64::consts::PI;
    let mut intensity = Vec::with_capacity(field.values.len());
    let mut phase = Vec::with_capacity(field.values.len());
    for v in &field.values {
        phase.push(-v.re / scale);
        intensity.push((2.0 * v.im / scale).exp());
    }
    (
        ScalarImage {
            width: field.width,
            height: field.height,
            pixel_size: field.pixel_size,
            values: intensity,
        },
        ScalarImage {
            width: field.width,
            height: field.height,
            pixel_size: field.pixel_size,
            values: phase,
        },
    )
}

/// Clausius-Mossotti contrast `(m^2 - n_m^2) / (m^2 + 2 n_m^2)` of a
/// material with complex index `m = n + i k` in a medium `n_m`.
pub fn clausius_mossotti(material: &MaterialSpec, n_medium: f64) -> Complex64 {
    let m = Complex64::new(material.n, material.k);
    let m2 = m * m;
    let nm2 = Complex64::new(n_medium * n_medium, 0.0);
    (m2 - nm2) / (m2 + 2.0 * nm2)
}

/// Complex peak amplitude of a particle image: volume times contrast,
/// normalized by the Gaussian footprint area so the integrated field is
/// footprint-independent (`integral E dS = V * contrast`).
pub fn particle_amplitude(
    diameter: f64,
    material: &MaterialSpec,
    ctx: &PhysicalContext,
    img: &ImagingSpec,
) -> Result<Complex64> {
    if !(diameter.is_finite() && diameter >= 0.0) {
        return Err(Error::NonPositiveDiameter(diameter));
    }
    material.validate()?;
    img.validate()?;
    let volume = std::f64::consts::PI / 6.0 * diameter.powi(3);
    let kappa = 1.0 / (2.0 * std::f64::consts::PI * img.psf_sigma * img.psf_sigma);
    Ok(clausius_mossotti(material, ctx.n_medium) * volume * kappa)
}

/// Render one noiseless frame with the particle displaced from the image
/// center by `offset` (meters, lateral). The image is `amplitude * G` with
/// `G` a unit-peak Gaussian of width `psf_sigma`.
pub fn render_particle_frame(
    diameter: f64,
    material: &MaterialSpec,
    ctx: &PhysicalContext,
    img: &ImagingSpec,
    offset: [f64; 2],
) -> Result<RytovImage> {
    let amplitude = particle_amplitude(diameter, material, ctx, img)?;
    if diameter > ctx.wavelength / 2.0 {
        log::warn!(
            "particle diameter {:.0} nm exceeds half the wavelength; the point-scatterer model is out of its validity range",
            diameter * 1e9
        );
    }
    let footprint = gaussian_footprint(img, [offset[0] / img.pixel_size, offset[1] / img.pixel_size]);
    let values = footprint.iter().map(|&g| amplitude * g).collect();
    RytovImage::new(img.width, img.height, img.pixel_size, values)
}

/// Ideal centered image of a particle (zero offset frame).
pub fn synthesize_particle_image(
    diameter: f64,
    material: &MaterialSpec,
    ctx: &PhysicalContext,
    img: &ImagingSpec,
) -> Result<RytovImage> {
    render_particle_frame(diameter, material, ctx, img, [0.0, 0.0])
}

/// What the recentered average of a particle signature looks like
/// statistically, per unit amplitude. Used to aim the camera noise at a
/// target SNR.
#[derive(Debug, Clone, Copy)]
pub struct SignatureStats {
    /// Discrete peak of the signature blurred by the registration scatter
    /// (the continuous center falls between pixels on even crops, and ring
    /// modulation attenuates under blur).
    pub blurred_peak: f64,
    /// Pixel variance of a single sharp signature.
    pub sharp_variance: f64,
    /// Pixel variance of the blurred signature.
    pub blurred_variance: f64,
}

impl SignatureStats {
    /// Compute for a registration scatter of `blur_sigma` (meters, per
    /// axis).
    pub fn compute(img: &ImagingSpec, blur_sigma: f64) -> SignatureStats {
        let sharp = gaussian_footprint(img, [0.0, 0.0]);
        let blurred = blurred_footprint(img, blur_sigma);
        let var = |v: &[f64]| {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64
        };
        SignatureStats {
            blurred_peak: blurred.iter().fold(0.0f64, |m, &g| m.max(g.abs())),
            sharp_variance: var(&sharp),
            blurred_variance: var(&blurred),
        }
    }

    /// Residual registration variance of an `n_frames` average, per unit
    /// squared amplitude: individual frames scatter around the blurred
    /// mean signature, and an average of `n` of them keeps `1/n` of that
    /// scatter. This residual is part of the measured noise level of the
    /// average, exactly like camera noise.
    pub fn registration_epsilon(&self, n_frames: u32) -> f64 {
        ((self.sharp_variance - self.blurred_variance) / n_frames as f64).max(0.0)
    }
}

/// Per-frame camera noise sigma that brings the reference particle to the
/// target SNR after recentered averaging, budgeting for the registration
/// residual that averaging cannot remove. Errors when the target is
/// unreachable because the registration residual alone exceeds it.
pub fn noise_sigma_for_target(
    peak_amplitude: f64,
    stats: &SignatureStats,
    n_frames: u32,
    target_snr: f64,
) -> Result<f64> {
    let peak = peak_amplitude * stats.blurred_peak;
    let epsilon_total = (peak / target_snr).powi(2);
    let epsilon_registration =
        stats.registration_epsilon(n_frames) * peak_amplitude * peak_amplitude;
    let epsilon_noise = epsilon_total - epsilon_registration;
    if epsilon_noise <= 0.0 {
        return Err(Error::InvalidImage(format!(
            "target SNR {target_snr} is unreachable: registration residual alone gives SNR {:.1}",
            peak / epsilon_registration.sqrt()
        )));
    }
    Ok((epsilon_noise * n_frames as f64 / 2.0).sqrt())
}

/// Add `scale` times one unit-peak particle signature, centered on the
/// image center plus `offset_px`, into an accumulator. The signature is a
/// Gaussian envelope, optionally modulated by concentric rings of the
/// configured radial period.
pub(crate) fn accumulate_footprint_scaled(
    img: &ImagingSpec,
    offset_px: [f64; 2],
    scale: f64,
    acc: &mut [f64],
) {
    let sigma_px = img.psf_sigma / img.pixel_size;
    let cx = 0.5 * (img.width as f64 - 1.0) + offset_px[0];
    let cy = 0.5 * (img.height as f64 - 1.0) + offset_px[1];
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    let gx: Vec<f64> = (0..img.width)
        .map(|x| {
            let d = x as f64 - cx;
            (-d * d * inv).exp()
        })
        .collect();
    let dx2: Vec<f64> = (0..img.width)
        .map(|x| {
            let d = x as f64 - cx;
            d * d
        })
        .collect();
    let ring_freq = if img.fringe_period > 0.0 {
        Some(2.0 * std::f64::consts::PI * img.pixel_size / img.fringe_period)
    } else {
        None
    };
    for y in 0..img.height as usize {
        let dy = y as f64 - cy;
        let gy = (-dy * dy * inv).exp();
        let dy2 = dy * dy;
        let row = &mut acc[y * img.width as usize..(y + 1) * img.width as usize];
        match ring_freq {
            None => {
                for (slot, gx_v) in row.iter_mut().zip(&gx) {
                    *slot += scale * gy * gx_v;
                }
            }
            Some(freq) => {
                for ((slot, gx_v), dx2_v) in row.iter_mut().zip(&gx).zip(&dx2) {
                    let r = (dx2_v + dy2).sqrt();
                    *slot += scale * gy * gx_v * (freq * r).cos();
                }
            }
        }
    }
}

/// Add one unit-peak particle signature into an accumulator.
pub(crate) fn accumulate_footprint(img: &ImagingSpec, offset_px: [f64; 2], acc: &mut [f64]) {
    accumulate_footprint_scaled(img, offset_px, 1.0, acc);
}

/// Unit-peak particle signature sampled on the pixel grid.
pub(crate) fn gaussian_footprint(img: &ImagingSpec, offset_px: [f64; 2]) -> Vec<f64> {
    let mut out = vec![0.0; img.pixel_count()];
    accumulate_footprint(img, offset_px, &mut out);
    out
}

/// Gauss-Hermite nodes and weights (7 points) for averaging over a
/// Gaussian offset distribution.
const GH_NODES: [f64; 7] = [
    -2.651961356835233,
    -1.673551628767471,
    -0.8162878828589647,
    0.0,
    0.8162878828589647,
    1.673551628767471,
    2.651961356835233,
];
const GH_WEIGHTS: [f64; 7] = [
    0.0009717812450995192,
    0.05451558281912703,
    0.4256072526101278,
    0.8102646175568073,
    0.4256072526101278,
    0.05451558281912703,
    0.0009717812450995192,
];

/// Footprint expected after recentering residuals: the unit-peak signature
/// averaged over an isotropic Gaussian offset distribution of standard
/// deviation `blur_sigma` (meters) per axis.
pub(crate) fn blurred_footprint(img: &ImagingSpec, blur_sigma: f64) -> Vec<f64> {
    let mut out = vec![0.0; img.pixel_count()];
    if blur_sigma <= 0.0 {
        accumulate_footprint(img, [0.0, 0.0], &mut out);
        return out;
    }
    let scale_px = std::f64::consts::SQRT_2 * blur_sigma / img.pixel_size;
    let norm = 1.0 / std::f64::consts::PI;
    for (i, &ti) in GH_NODES.iter().enumerate() {
        for (j, &tj) in GH_NODES.iter().enumerate() {
            let weight = GH_WEIGHTS[i] * GH_WEIGHTS[j] * norm;
            accumulate_footprint_scaled(img, [scale_px * ti, scale_px * tj], weight, &mut out);
        }
    }
    out
}

/// Add independent `N(0, sigma^2)` noise to the real and the imaginary
/// part of every pixel. Deterministic for a given seed.
pub fn add_shot_noise(image: &RytovImage, sigma: f64, seed: RngSeed) -> Result<RytovImage> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidImage(format!(
            "noise sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let mut rng = seed.rng();
    let values = image
        .values
        .iter()
        .map(|v| {
            let nr: f64 = rng.sample(StandardNormal);
            let ni: f64 = rng.sample(StandardNormal);
            Complex64::new(v.re + sigma * nr, v.im + sigma * ni)
        })
        .collect();
    let mut out = RytovImage::new(image.width, image.height, image.pixel_size, values)?;
    out.epsilon = image.epsilon;
    Ok(out)
}

/// Shift a frame by minus its offset, rounded to whole pixels. Pixels
/// shifted in from outside the field are zero.
fn shift_by_offset(frame: &RytovImage, offset: [f64; 2], index: usize) -> Result<Vec<Complex64>> {
    let sx = (offset[0] / frame.pixel_size).round() as i64;
    let sy = (offset[1] / frame.pixel_size).round() as i64;
    if sx.unsigned_abs() >= frame.width as u64 || sy.unsigned_abs() >= frame.height as u64 {
        return Err(Error::ShiftOutOfFrame { frame: index });
    }
    let (w, h) = (frame.width as i64, frame.height as i64);
    let mut out = vec![Complex64::new(0.0, 0.0); frame.values.len()];
    for y in 0..h {
        let src_y = y + sy;
        if src_y < 0 || src_y >= h {
            continue;
        }
        for x in 0..w {
            let src_x = x + sx;
            if src_x < 0 || src_x >= w {
                continue;
            }
            out[(y * w + x) as usize] = frame.values[(src_y * w + src_x) as usize];
        }
    }
    Ok(out)
}

fn check_stack(frames: &[RytovImage], offsets: &[[f64; 2]], min_frames: usize) -> Result<()> {
    if frames.len() < min_frames {
        return Err(Error::TooFewFrames {
            got: frames.len(),
            need: min_frames,
        });
    }
    if offsets.len() != frames.len() {
        return Err(Error::InvalidImage(format!(
            "{} offsets for {} frames",
            offsets.len(),
            frames.len()
        )));
    }
    for f in &frames[1..] {
        if !f.same_dims(&frames[0]) {
            return Err(Error::DimensionMismatch {
                a_width: frames[0].width,
                a_height: frames[0].height,
                b_width: f.width,
                b_height: f.height,
                pair: None,
            });
        }
    }
    Ok(())
}

fn mean_of_shifted(
    frames: &[RytovImage],
    offsets: &[[f64; 2]],
    pick: impl Fn(usize) -> bool,
) -> Result<(Vec<Complex64>, usize)> {
    let template = &frames[0];
    let mut acc = vec![Complex64::new(0.0, 0.0); template.values.len()];
    let mut count = 0usize;
    for (idx, (frame, off)) in frames.iter().zip(offsets.iter()).enumerate() {
        if !pick(idx) {
            continue;
        }
        let shifted = shift_by_offset(frame, *off, idx)?;
        for (a, v) in acc.iter_mut().zip(shifted) {
            *a += v;
        }
        count += 1;
    }
    let inv = 1.0 / count as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok((acc, count))
}

/// Recenter every frame by minus its estimated offset (nearest pixel) and
/// average. Needs at least two frames.
pub fn timelapse_average(frames: &[RytovImage], offsets: &[[f64; 2]]) -> Result<RytovImage> {
    check_stack(frames, offsets, 2)?;
    let (mean, _) = mean_of_shifted(frames, offsets, |_| true)?;
    RytovImage::new(
        frames[0].width,
        frames[0].height,
        frames[0].pixel_size,
        mean,
    )
}

/// Noise variance of the difference of two half-averages, scaled to the
/// variance of the mean of all `n_a + n_b` frames.
pub(crate) fn noise_from_half_averages(
    half_a: &[Complex64],
    half_b: &[Complex64],
    n_a: usize,
    n_b: usize,
) -> f64 {
    let var_diff = complex_variance(half_a.iter().zip(half_b.iter()).map(|(a, b)| a - b));
    let n = (n_a + n_b) as f64;
    var_diff * (n_a as f64 * n_b as f64) / (n * n)
}

/// Split the stack into even/odd interleaved halves, average each after
/// recentering, and read the noise level off their difference: the halves
/// share the signal and differ only by noise, so the variance of their
/// difference, scaled by the half sizes, is the noise variance of the
/// full average. Returns the full recentered average with the estimate
/// attached. Needs at least four frames.
///
/// The interleaved split (rather than first/second half) keeps the
/// estimate robust against slow drifts across the stack.
pub fn estimate_noise(frames: &[RytovImage], offsets: &[[f64; 2]]) -> Result<(RytovImage, f64)> {
    check_stack(frames, offsets, 4)?;
    let (half_a, n_a) = mean_of_shifted(frames, offsets, |i| i % 2 == 0)?;
    let (half_b, n_b) = mean_of_shifted(frames, offsets, |i| i % 2 == 1)?;
    let epsilon = noise_from_half_averages(&half_a, &half_b, n_a, n_b);

    let n = (n_a + n_b) as f64;
    let full: Vec<Complex64> = half_a
        .iter()
        .zip(half_b.iter())
        .map(|(a, b)| (a * n_a as f64 + b * n_b as f64) / n)
        .collect();
    let image = RytovImage::new(
        frames[0].width,
        frames[0].height,
        frames[0].pixel_size,
        full,
    )?
    .with_epsilon(epsilon)?;
    Ok((image, epsilon))
}

/// Signal-to-noise ratio: peak field amplitude over the noise standard
/// deviation. A zero noise estimate signals infinite SNR.
pub fn compute_snr(image: &RytovImage) -> Result<f64> {
    let epsilon = image
        .epsilon
        .ok_or(Error::MissingEpsilon(u64::MAX))?;
    if epsilon == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(image.peak_amplitude() / epsilon.sqrt())
}

/// Per-frame noise sigma that makes an `n_frames` average of a signal with
/// the given peak amplitude reach the target SNR: the averaged noise
/// variance is `2 sigma^2 / n`, so `sigma = peak sqrt(n / 2) / snr`.
pub fn noise_sigma_for_target_snr(peak_amplitude: f64, n_frames: u32, target_snr: f64) -> f64 {
    peak_amplitude * (n_frames as f64 / 2.0).sqrt() / target_snr
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::streams;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn ctx() -> PhysicalContext {
        PhysicalContext::new(293.0, 1.0e-3, 550e-9, 1.33).unwrap()
    }

    fn ps() -> MaterialSpec {
        MaterialSpec::new(1.59, 0.0).unwrap()
    }

    fn spec() -> ImagingSpec {
        ImagingSpec {
            width: 32,
            height: 32,
            pixel_size: 100e-9,
            psf_sigma: 400e-9,
            fringe_period: 0.0,
            photon_noise_sigma: 0.0,
        }
    }

    fn flat(width: u32, height: u32, value: f64) -> ScalarImage {
        ScalarImage::new(
            width,
            height,
            100e-9,
            vec![value; (width * height) as usize],
        )
        .unwrap()
    }

    #[test]
    fn unit_intensity_zero_phase_gives_zero_field() {
        let field =
            rytov_from_intensity_phase(&flat(8, 8, 1.0), &flat(8, 8, 0.0), &ctx()).unwrap();
        assert!(field.values.iter().all(|v| v.re == 0.0 && v.im == 0.0));
    }

    #[test]
    fn constant_phase_maps_to_real_part() {
        let ctx = ctx();
        let phi = 0.25;
        let field = rytov_from_intensity_phase(&flat(8, 8, 1.0), &flat(8, 8, phi), &ctx).unwrap();
        let expected = -ctx.wavelength * ctx.n_medium * phi / std::f64::consts::PI;
        for v in &field.values {
            assert_relative_eq!(v.re, expected, max_relative = 1e-12);
            assert_eq!(v.im, 0.0);
        }
    }

    #[test]
    fn non_positive_intensity_names_pixel() {
        let mut i = flat(8, 8, 1.0);
        i.values[8 * 2 + 5] = 0.0;
        match rytov_from_intensity_phase(&i, &flat(8, 8, 0.0), &ctx()) {
            Err(Error::NonPositiveIntensity { x: 5, y: 2, .. }) => {}
            other => panic!("expected pixel error, got {other:?}"),
        }
    }

    #[test]
    fn rytov_and_inverse_compose_to_identity() {
        let ctx = ctx();
        let mut intensity = flat(8, 8, 1.0);
        let mut phase = flat(8, 8, 0.0);
        for (i, (iv, pv)) in intensity
            .values
            .iter_mut()
            .zip(phase.values.iter_mut())
            .enumerate()
        {
            *iv = 0.5 + 0.02 * i as f64;
            *pv = -0.3 + 0.01 * i as f64;
        }
        let field = rytov_from_intensity_phase(&intensity, &phase, &ctx).unwrap();
        let (i2, p2) = intensity_phase_from_rytov(&field, &ctx);
        for (a, b) in intensity.values.iter().zip(i2.values.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
        for (a, b) in phase.values.iter().zip(p2.values.iter()) {
            assert_relative_eq!(a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_diameter_gives_zero_image() {
        let img = synthesize_particle_image(0.0, &ps(), &ctx(), &spec()).unwrap();
        assert!(img.values.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn synthesis_is_pure() {
        let a = synthesize_particle_image(100e-9, &ps(), &ctx(), &spec()).unwrap();
        let b = synthesize_particle_image(100e-9, &ps(), &ctx(), &spec()).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn peak_scales_with_diameter_cubed() {
        let a = synthesize_particle_image(100e-9, &ps(), &ctx(), &spec()).unwrap();
        let b = synthesize_particle_image(200e-9, &ps(), &ctx(), &spec()).unwrap();
        assert_relative_eq!(
            b.peak_amplitude(),
            8.0 * a.peak_amplitude(),
            max_relative = 1e-12
        );
    }

    #[test]
    fn peak_monotone_in_diameter_and_contrast() {
        let ctx = ctx();
        let spec = spec();
        let mut last = 0.0;
        for d_nm in [40.0, 80.0, 120.0, 160.0] {
            let peak = synthesize_particle_image(d_nm * 1e-9, &ps(), &ctx, &spec)
                .unwrap()
                .peak_amplitude();
            assert!(peak > last);
            last = peak;
        }
        let mut last = 0.0;
        for n in [1.4, 1.59, 1.8, 2.1] {
            let mat = MaterialSpec::new(n, 0.0).unwrap();
            let peak = synthesize_particle_image(100e-9, &mat, &ctx, &spec)
                .unwrap()
                .peak_amplitude();
            assert!(peak > last, "contrast not monotone at n = {n}");
            last = peak;
        }
    }

    #[test]
    fn integrated_field_is_volume_times_contrast() {
        // The footprint normalization makes the surface integral equal
        // V * contrast regardless of the psf width.
        let ctx = ctx();
        let d = 150e-9;
        for sigma in [300e-9, 400e-9, 500e-9] {
            let mut s = spec();
            s.width = 64;
            s.height = 64;
            s.psf_sigma = sigma;
            let img = synthesize_particle_image(d, &ps(), &ctx, &s).unwrap();
            let integral = img.surface_integral();
            let expected = clausius_mossotti(&ps(), ctx.n_medium)
                * (std::f64::consts::PI / 6.0 * d.powi(3));
            assert_relative_eq!(integral.re, expected.re, max_relative = 1e-3);
            assert!(integral.im.abs() < expected.re.abs() * 1e-10);
        }
    }

    #[test]
    fn ring_modulation_keeps_peak_and_oscillates() {
        let ctx = ctx();
        let mut s = spec();
        s.width = 64;
        s.height = 64;
        s.psf_sigma = 2.0e-6;
        s.fringe_period = 600e-9;
        // Odd size puts a pixel exactly on the continuous center.
        s.width = 65;
        s.height = 65;
        let ringed = synthesize_particle_image(100e-9, &ps(), &ctx, &s).unwrap();
        let mut plain = s;
        plain.fringe_period = 0.0;
        let smooth = synthesize_particle_image(100e-9, &ps(), &ctx, &plain).unwrap();
        // Same center value, sign changes along a row only with rings.
        let c = ringed.get(32, 32).re;
        assert_relative_eq!(c, smooth.get(32, 32).re, max_relative = 1e-9);
        let signs: Vec<bool> = (0..65).map(|x| ringed.get(x, 32).re < 0.0).collect();
        assert!(signs.iter().filter(|&&neg| neg).count() > 5);
        assert!(smooth.values.iter().all(|v| v.re >= 0.0));
        // Rings oscillate around zero, so the crop mean nearly cancels.
        let mean = |img: &RytovImage| {
            img.values.iter().map(|v| v.re).sum::<f64>() / img.values.len() as f64
        };
        assert!(mean(&ringed).abs() < 0.05 * mean(&smooth));
    }

    #[test]
    fn shot_noise_zero_sigma_is_identity() {
        let img = synthesize_particle_image(100e-9, &ps(), &ctx(), &spec()).unwrap();
        let noisy = add_shot_noise(&img, 0.0, RngSeed(1)).unwrap();
        assert_eq!(img.values, noisy.values);
    }

    #[test]
    fn shot_noise_is_seed_deterministic() {
        let img = synthesize_particle_image(100e-9, &ps(), &ctx(), &spec()).unwrap();
        let a = add_shot_noise(&img, 1e-10, RngSeed(7)).unwrap();
        let b = add_shot_noise(&img, 1e-10, RngSeed(7)).unwrap();
        assert_eq!(a.values, b.values);
        let c = add_shot_noise(&img, 1e-10, RngSeed(8)).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn shot_noise_variance_matches_sigma() {
        let mut s = spec();
        s.width = 64;
        s.height = 64;
        let img = RytovImage::zeros(64, 64, s.pixel_size).unwrap();
        let sigma = 2e-10;
        let noisy = add_shot_noise(&img, sigma, RngSeed(12)).unwrap();
        let var = noisy.complex_variance();
        assert_relative_eq!(var, 2.0 * sigma * sigma, max_relative = 0.05);
    }

    #[test]
    fn averaging_identical_frames_with_zero_offsets_is_identity() {
        let img = synthesize_particle_image(100e-9, &ps(), &ctx(), &spec()).unwrap();
        let frames = vec![img.clone(); 4];
        let offsets = vec![[0.0, 0.0]; 4];
        let avg = timelapse_average(&frames, &offsets).unwrap();
        for (a, b) in avg.values.iter().zip(img.values.iter()) {
            assert_relative_eq!(a.re, b.re, max_relative = 1e-12);
        }
    }

    #[test]
    fn averaging_reduces_noise_variance_by_frame_count() {
        let clean = synthesize_particle_image(100e-9, &ps(), &ctx(), &spec()).unwrap();
        let n = 25usize;
        let sigma = 3e-10;
        let seed = RngSeed(77);
        let frames: Vec<RytovImage> = (0..n)
            .map(|i| add_shot_noise(&clean, sigma, seed.derive(i as u64)).unwrap())
            .collect();
        let offsets = vec![[0.0, 0.0]; n];
        let avg = timelapse_average(&frames, &offsets).unwrap();
        let residual: Vec<Complex64> = avg
            .values
            .iter()
            .zip(clean.values.iter())
            .map(|(a, b)| a - b)
            .collect();
        let var = complex_variance(residual.iter().copied());
        assert_relative_eq!(var, 2.0 * sigma * sigma / n as f64, max_relative = 0.10);
    }

    #[test]
    fn single_frame_average_is_rejected() {
        let img = synthesize_particle_image(100e-9, &ps(), &ctx(), &spec()).unwrap();
        assert!(matches!(
            timelapse_average(&[img], &[[0.0, 0.0]]),
            Err(Error::TooFewFrames { got: 1, need: 2 })
        ));
    }

    #[test]
    fn shift_moves_the_peak_back_to_center() {
        let s = spec();
        let off = [3.0 * s.pixel_size, -2.0 * s.pixel_size];
        let frame = render_particle_frame(100e-9, &ps(), &ctx(), &s, off).unwrap();
        let avg = timelapse_average(&[frame.clone(), frame], &[off, off]).unwrap();
        let centered = synthesize_particle_image(100e-9, &ps(), &ctx(), &s).unwrap();
        let (mut best_idx, mut best) = (0, 0.0);
        for (i, v) in avg.values.iter().enumerate() {
            if v.norm() > best {
                best = v.norm();
                best_idx = i;
            }
        }
        let (mut want_idx, mut want) = (0, 0.0);
        for (i, v) in centered.values.iter().enumerate() {
            if v.norm() > want {
                want = v.norm();
                want_idx = i;
            }
        }
        assert_eq!(best_idx, want_idx);
    }

    #[test]
    fn shift_fully_out_of_frame_is_an_error() {
        let s = spec();
        let frame = synthesize_particle_image(100e-9, &ps(), &ctx(), &s).unwrap();
        let off = [40.0 * s.pixel_size, 0.0];
        assert!(matches!(
            timelapse_average(&[frame.clone(), frame], &[off, off]),
            Err(Error::ShiftOutOfFrame { frame: 0 })
        ));
    }

    #[test]
    fn noiseless_stack_estimates_zero_noise() {
        let img = synthesize_particle_image(100e-9, &ps(), &ctx(), &spec()).unwrap();
        let frames = vec![img; 8];
        let offsets = vec![[0.0, 0.0]; 8];
        let (avg, eps) = estimate_noise(&frames, &offsets).unwrap();
        assert_eq!(eps, 0.0);
        assert_eq!(avg.epsilon, Some(0.0));
    }

    #[test]
    fn estimate_noise_splits_stack_in_interleaved_halves() {
        // 200 frames -> two averages of 100 each. A marker visible in even
        // frames only survives averaging in exactly one half, so the
        // difference image is the marker itself and the scaling
        // n_a n_b / N^2 = 1/4 is exposed exactly.
        let s = spec();
        let base = RytovImage::zeros(s.width, s.height, s.pixel_size).unwrap();
        let mut marked = base.clone();
        marked.values[0] = Complex64::new(1.0, 0.0);
        let frames: Vec<RytovImage> = (0..200)
            .map(|i| if i % 2 == 0 { marked.clone() } else { base.clone() })
            .collect();
        let offsets = vec![[0.0, 0.0]; 200];
        let (_, eps) = estimate_noise(&frames, &offsets).unwrap();
        let m = (s.width * s.height) as f64;
        let marker_variance = (1.0 / m) * (1.0 - 1.0 / m);
        assert_relative_eq!(eps, marker_variance / 4.0, max_relative = 1e-12);
    }

    #[test]
    fn estimate_noise_recovers_injected_variance() {
        // Monte Carlo over seeds: recovered epsilon approximates the
        // variance of the mean image, 2 sigma^2 / n.
        let clean = synthesize_particle_image(100e-9, &ps(), &ctx(), &spec()).unwrap();
        let n = 64usize;
        let sigma = 2e-10;
        let expected = 2.0 * sigma * sigma / n as f64;
        let offsets = vec![[0.0, 0.0]; n];
        let mut worst: f64 = 0.0;
        for trial in 0..20u64 {
            let seed = RngSeed(9000).derive(streams::SHOT_NOISE).derive(trial);
            let frames: Vec<RytovImage> = (0..n)
                .map(|i| add_shot_noise(&clean, sigma, seed.derive(i as u64)).unwrap())
                .collect();
            let (_, eps) = estimate_noise(&frames, &offsets).unwrap();
            worst = worst.max((eps - expected).abs() / expected);
        }
        assert!(worst < 0.15, "worst relative deviation {worst}");
    }

    #[test]
    fn fewer_than_four_frames_rejected() {
        let img = synthesize_particle_image(100e-9, &ps(), &ctx(), &spec()).unwrap();
        let frames = vec![img; 3];
        let offsets = vec![[0.0, 0.0]; 3];
        assert!(matches!(
            estimate_noise(&frames, &offsets),
            Err(Error::TooFewFrames { got: 3, need: 4 })
        ));
    }

    #[test]
    fn snr_scales_linearly_with_signal() {
        let img = synthesize_particle_image(100e-9, &ps(), &ctx(), &spec()).unwrap();
        let eps = 1e-22;
        let a = img.clone().with_epsilon(eps).unwrap();
        let doubled: Vec<Complex64> = img.values.iter().map(|v| v * 2.0).collect();
        let b = RytovImage::new(img.width, img.height, img.pixel_size, doubled)
            .unwrap()
            .with_epsilon(eps)
            .unwrap();
        let snr_a = compute_snr(&a).unwrap();
        let snr_b = compute_snr(&b).unwrap();
        assert_relative_eq!(snr_b, 2.0 * snr_a, max_relative = 1e-12);
    }

    #[test]
    fn snr_edge_cases() {
        let zero = RytovImage::zeros(8, 8, 100e-9)
            .unwrap()
            .with_epsilon(1e-22)
            .unwrap();
        assert_eq!(compute_snr(&zero).unwrap(), 0.0);
        let noiseless = RytovImage::zeros(8, 8, 100e-9)
            .unwrap()
            .with_epsilon(0.0)
            .unwrap();
        assert!(compute_snr(&noiseless).unwrap().is_infinite());
        let unset = RytovImage::zeros(8, 8, 100e-9).unwrap();
        assert!(compute_snr(&unset).is_err());
    }

    #[test]
    fn target_snr_round_trip() {
        let peak = 3e-9;
        let n = 200u32;
        let sigma = noise_sigma_for_target_snr(peak, n, 55.0);
        let eps = 2.0 * sigma * sigma / n as f64;
        assert_relative_eq!(peak / eps.sqrt(), 55.0, max_relative = 1e-12);
    }

    proptest! {
        #[test]
        fn rytov_round_trip_property(
            intensities in proptest::collection::vec(0.05f64..20.0, 64),
            phases in proptest::collection::vec(-3.0f64..3.0, 64),
        ) {
            let ctx = ctx();
            let i = ScalarImage::new(8, 8, 100e-9, intensities.clone()).unwrap();
            let p = ScalarImage::new(8, 8, 100e-9, phases.clone()).unwrap();
            let field = rytov_from_intensity_phase(&i, &p, &ctx).unwrap();
            let (i2, p2) = intensity_phase_from_rytov(&field, &ctx);
            for (a, b) in intensities.iter().zip(i2.values.iter()) {
                prop_assert!((a - b).abs() <= a.abs() * 1e-12);
            }
            for (a, b) in phases.iter().zip(p2.values.iter()) {
                prop_assert!((a - b).abs() <= a.abs().max(1e-3) * 1e-12);
            }
        }
    }
}

//! Run configuration and manifest.
//!
//! Configs are strict JSON: unknown keys are rejected, and every field the
//! run depends on is materialized into the manifest before any artifact is
//! written, so a manifest (minus its timestamp) fully determines the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::brownian::{EnsembleSpec, MaterialSpec, Population};
use crate::error::{Error, Result};
use crate::optics::{noise_sigma_for_target, particle_amplitude, ImagingSpec, SignatureStats};
use crate::types::{Dimensionality, PhysicalContext, RngSeed, RNG_IDENTITY};

/// Exponent value that may be the string `"inf"` in JSON.
mod nw_value {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    fn to_f64<E: serde::de::Error>(repr: Repr) -> Result<f64, E> {
        match repr {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Repr::Str(s) => Err(E::custom(format!(
                "expected a number or \"inf\", got \"{s}\""
            ))),
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        to_f64(Repr::deserialize(d)?)
    }

    pub mod list {
        use super::*;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            #[derive(serde::Serialize)]
            #[serde(untagged)]
            enum Out<'a> {
                Num(f64),
                Str(&'a str),
            }
            s.collect_seq(v.iter().map(|&x| {
                if x.is_infinite() {
                    Out::Str("inf")
                } else {
                    Out::Num(x)
                }
            }))
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            let raw: Vec<Repr> = Vec::deserialize(d)?;
            raw.into_iter().map(to_f64).collect()
        }
    }
}

/// Parse an exponent from the command line: a non-negative number or `inf`.
pub fn parse_n_w(s: &str) -> Result<f64> {
    let v = if s == "inf" {
        f64::INFINITY
    } else {
        s.parse::<f64>()
            .map_err(|e| Error::Config(format!("bad exponent {s:?}: {e}")))?
    };
    if v.is_nan() || v < 0.0 {
        return Err(Error::NegativeExponent(v));
    }
    Ok(v)
}

/// Imaging geometry as written in configs; the per-frame noise level is
/// resolved separately (see [`NoiseConfig`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagingConfig {
    pub width_px: u32,
    pub height_px: u32,
    pub pixel_size_m: f64,
    pub psf_sigma_m: f64,
    #[serde(default = "default_fringe_period")]
    pub fringe_period_m: f64,
}

fn default_fringe_period() -> f64 {
    600e-9
}

impl Default for ImagingConfig {
    fn default() -> Self {
        ImagingConfig {
            width_px: 64,
            height_px: 64,
            pixel_size_m: 100e-9,
            psf_sigma_m: 2.0e-6,
            fringe_period_m: default_fringe_period(),
        }
    }
}

/// Noise level of the synthetic camera. Either an explicit per-frame sigma
/// or, by default, the sigma that brings the reference particle to the
/// target SNR after frame averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub snr_target: f64,
    pub reference_diameter_m: f64,
    pub reference_material: MaterialSpec,
    /// Explicit per-frame noise sigma; resolved from the SNR target when
    /// absent. The manifest always carries the resolved value.
    pub photon_noise_sigma: Option<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            snr_target: 55.0,
            reference_diameter_m: 100e-9,
            reference_material: MaterialSpec { n: 1.59, k: 0.0 },
            photon_noise_sigma: None,
        }
    }
}

/// Tracking protocol: frame interval, track length, dimensionality and
/// localization error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackingConfig {
    pub dt_s: f64,
    pub n_steps: u32,
    pub dimensionality: Dimensionality,
    pub localization_sigma_lateral_m: f64,
    pub localization_sigma_axial_m: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            dt_s: 0.01,
            n_steps: 200,
            dimensionality: Dimensionality::Three,
            localization_sigma_lateral_m: 30e-9,
            localization_sigma_axial_m: 100e-9,
        }
    }
}

/// Fit and reporting options of the analysis stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub n_fit_lags: usize,
    #[serde(with = "nw_value")]
    pub n_w: f64,
    pub histogram_bins: u32,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            n_fit_lags: 4,
            n_w: 1.125,
            histogram_bins: 30,
        }
    }
}

/// Exponent sweep options used by the calibrate stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    #[serde(with = "nw_value::list")]
    pub grid: Vec<f64>,
    pub repetitions: u32,
    /// SNR operating points for the optimum-versus-SNR model; empty skips
    /// the model.
    pub snr_points: Vec<f64>,
}

/// Exponent grid from 0 to `max` in steps of 0.125, with infinity last.
pub fn default_grid(max: f64) -> Vec<f64> {
    let mut grid = Vec::new();
    let mut i = 0u32;
    loop {
        let v = i as f64 * 0.125;
        if v > max + 1e-12 {
            break;
        }
        grid.push(v);
        i += 1;
    }
    grid.push(f64::INFINITY);
    grid
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            grid: default_grid(5.0),
            repetitions: 50,
            snr_points: Vec::new(),
        }
    }
}

/// Complete run configuration. Every field has a default; defaults are
/// materialized before the manifest is written, never implied at run time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub physical: PhysicalContext,
    pub imaging: ImagingConfig,
    pub noise: NoiseConfig,
    pub tracking: TrackingConfig,
    pub analysis: AnalysisConfig,
    pub populations: Vec<Population>,
    pub calibration: CalibrationConfig,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            physical: PhysicalContext {
                temperature: 293.0,
                viscosity: 1.0e-3,
                wavelength: 550e-9,
                n_medium: 1.33,
            },
            imaging: ImagingConfig::default(),
            noise: NoiseConfig::default(),
            tracking: TrackingConfig::default(),
            analysis: AnalysisConfig::default(),
            populations: vec![Population {
                count: 200,
                mean_diameter: 100e-9,
                sd_diameter: 15e-9,
                material: MaterialSpec { n: 1.59, k: 0.0 },
                label: "PS".to_string(),
            }],
            calibration: CalibrationConfig::default(),
            seed: 1234,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// Parse a strict-schema JSON config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    /// Validate and materialize into a resolved run.
    pub fn resolve(&self) -> Result<ResolvedRun> {
        self.physical.validate()?;
        let ensemble = EnsembleSpec {
            populations: self.populations.clone(),
            n_steps: self.tracking.n_steps,
            dt: self.tracking.dt_s,
        };
        ensemble.validate()?;

        if self.analysis.n_fit_lags < 2 {
            return Err(Error::Config("analysis.n_fit_lags must be >= 2".to_string()));
        }
        if self.analysis.n_fit_lags >= self.tracking.n_steps as usize {
            return Err(Error::Config(
                "analysis.n_fit_lags must be below tracking.n_steps".to_string(),
            ));
        }
        if self.analysis.n_w.is_nan() || self.analysis.n_w < 0.0 {
            return Err(Error::NegativeExponent(self.analysis.n_w));
        }
        if self.analysis.histogram_bins == 0 {
            return Err(Error::Config("analysis.histogram_bins must be >= 1".to_string()));
        }
        if !(self.tracking.localization_sigma_lateral_m >= 0.0
            && self.tracking.localization_sigma_axial_m >= 0.0)
        {
            return Err(Error::Config("localization sigmas must be >= 0".to_string()));
        }
        if self.calibration.grid.is_empty() {
            return Err(Error::Config("calibration.grid must not be empty".to_string()));
        }
        for w in self.calibration.grid.windows(2) {
            if w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less) {
                return Err(Error::Config(
                    "calibration.grid must be strictly increasing".to_string(),
                ));
            }
        }
        if self.calibration.grid.iter().any(|&g| g.is_nan() || g < 0.0) {
            return Err(Error::Config(
                "calibration.grid entries must be >= 0".to_string(),
            ));
        }
        if self.calibration.repetitions == 0 {
            return Err(Error::Config(
                "calibration.repetitions must be >= 1".to_string(),
            ));
        }
        for (i, &s) in self.calibration.snr_points.iter().enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!(
                    "calibration.snr_points[{i}] must be > 0"
                )));
            }
        }

        let mut imaging = ImagingSpec {
            width: self.imaging.width_px,
            height: self.imaging.height_px,
            pixel_size: self.imaging.pixel_size_m,
            psf_sigma: self.imaging.psf_sigma_m,
            fringe_period: self.imaging.fringe_period_m,
            photon_noise_sigma: 0.0,
        };
        imaging.validate()?;

        let sigma = match self.noise.photon_noise_sigma {
            Some(s) => {
                if !(s.is_finite() && s >= 0.0) {
                    return Err(Error::Config(
                        "noise.photon_noise_sigma must be >= 0".to_string(),
                    ));
                }
                s
            }
            None => {
                if !(self.noise.snr_target.is_finite() && self.noise.snr_target > 0.0) {
                    return Err(Error::Config("noise.snr_target must be > 0".to_string()));
                }
                let blur = (self.tracking.localization_sigma_lateral_m.powi(2)
                    + imaging.pixel_size * imaging.pixel_size / 12.0)
                    .sqrt();
                let stats = SignatureStats::compute(&imaging, blur);
                let amplitude = particle_amplitude(
                    self.noise.reference_diameter_m,
                    &self.noise.reference_material,
                    &self.physical,
                    &imaging,
                )?
                .norm();
                noise_sigma_for_target(
                    amplitude,
                    &stats,
                    self.tracking.n_steps,
                    self.noise.snr_target,
                )?
            }
        };
        imaging.photon_noise_sigma = sigma;

        let mut materialized = self.clone();
        materialized.noise.photon_noise_sigma = Some(sigma);

        Ok(ResolvedRun {
            ctx: self.physical,
            imaging,
            ensemble,
            dim: self.tracking.dimensionality,
            loc_sigma_lateral: self.tracking.localization_sigma_lateral_m,
            loc_sigma_axial: self.tracking.localization_sigma_axial_m,
            n_fit_lags: self.analysis.n_fit_lags,
            n_w: self.analysis.n_w,
            histogram_bins: self.analysis.histogram_bins,
            calibration: self.calibration.clone(),
            seed: RngSeed(self.seed),
            out_dir: self.out_dir.clone(),
            config: materialized,
        })
    }
}

/// A validated configuration with every derived quantity materialized.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub ctx: PhysicalContext,
    pub imaging: ImagingSpec,
    pub ensemble: EnsembleSpec,
    pub dim: Dimensionality,
    pub loc_sigma_lateral: f64,
    pub loc_sigma_axial: f64,
    pub n_fit_lags: usize,
    pub n_w: f64,
    pub histogram_bins: u32,
    pub calibration: CalibrationConfig,
    pub seed: RngSeed,
    pub out_dir: Option<PathBuf>,
    /// Fully explicit copy of the config, as written to the manifest.
    pub config: RunConfig,
}

/// Versions of the on-disk formats, recorded in every manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVersions {
    pub tracks_csv: u32,
    pub rytov_binary: u32,
}

pub const FORMAT_VERSIONS: FormatVersions = FormatVersions {
    tracks_csv: 1,
    rytov_binary: 1,
};

/// Written before any artifact. Identical manifests (ignoring the
/// timestamp) produce byte-identical artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_name: String,
    pub tool_version: String,
    pub rng: String,
    pub formats: FormatVersions,
    pub created_utc: String,
    pub config: RunConfig,
}

impl RunManifest {
    pub fn new(resolved: &ResolvedRun) -> RunManifest {
        RunManifest {
            tool_name: env!("CARGO_PKG_NAME").to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            rng: format!("{RNG_IDENTITY}; normal: rand_distr ziggurat"),
            formats: FORMAT_VERSIONS,
            created_utc: chrono::Utc::now().to_rfc3339(),
            config: resolved.config.clone(),
        }
    }
}

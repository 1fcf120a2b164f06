//! End-to-end orchestration: ensemble simulation, analysis, calibration,
//! refractive-index extraction and noise estimation, plus the artifact
//! writers used by the command line.
//!
//! Every stage is a pure function of `(resolved config, seed)`; parallel
//! sections reduce their results in particle or repetition order, so a
//! run is bit-reproducible on a given platform.

use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::brownian::{
    apply_localization_error, sample_true_sizes, simulate_trajectory, TrueParticle,
};
use crate::calibration::{
    fit_snr_model, histogram_counts, histogram_edges, optimal_exponent, population_stats,
    sweep_exponent, BinSpec, FitParams, PopulationStats, SnrModel, SweepResult,
};
use crate::config::{ResolvedRun, RunManifest};
use crate::error::{Error, Result};
use crate::estimator::{
    fit_classic, fit_weighted, msd_curve, refractive_index_from_image, MsdCurve, SizeEstimate,
};
use crate::formats::{self, RefIndexRow, SizesRow, TruthRow};
use crate::optics::{
    self, compute_snr, estimate_noise, noise_from_half_averages, particle_amplitude,
};
use crate::similarity::{similarity_matrix, weights, SimilarityMatrix};
use crate::types::{streams, ParticleRecord, RngSeed, RytovImage, Trajectory};

/// Salt for the per-SNR-point sweeps of the calibration stage.
const SNR_POINT_STREAM: u64 = 0x534E5250;

/// Pin the global worker pool size. Zero keeps the automatic size. Safe to
/// call more than once; only the first call takes effect.
pub fn configure_threads(threads: usize) {
    if threads == 0 {
        return;
    }
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global();
}

/// A simulated ensemble: observable records plus the ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedEnsemble {
    pub records: Vec<ParticleRecord>,
    pub truth: Vec<TruthRow>,
}

/// Simulate the configured ensemble with the configured seed.
pub fn simulate(resolved: &ResolvedRun) -> Result<SimulatedEnsemble> {
    let truth = sample_true_sizes(&resolved.ensemble, resolved.seed)?;
    let records = generate_records(resolved, &truth, resolved.seed)?;
    let labels: Vec<&str> = resolved
        .ensemble
        .populations
        .iter()
        .map(|p| p.label.as_str())
        .collect();
    let truth_rows = truth
        .iter()
        .enumerate()
        .map(|(id, t)| TruthRow {
            particle_id: id as u64,
            population: t.population,
            label: labels[t.population].to_string(),
            diameter_m: t.diameter,
            n: t.material.n,
            k: t.material.k,
        })
        .collect();
    Ok(SimulatedEnsemble {
        records,
        truth: truth_rows,
    })
}

/// Generate the records of an ensemble whose true sizes are already fixed.
/// Used both by [`simulate`] and by sweep repetitions (same truth, fresh
/// seed).
pub fn generate_records(
    resolved: &ResolvedRun,
    truth: &[TrueParticle],
    seed: RngSeed,
) -> Result<Vec<ParticleRecord>> {
    if resolved.ensemble.n_steps < 4 {
        return Err(Error::Config(
            "tracking.n_steps must be at least 4 to split the image stack".to_string(),
        ));
    }
    truth
        .par_iter()
        .enumerate()
        .map(|(idx, particle)| {
            let id = idx as u64;
            let true_traj = simulate_trajectory(
                &resolved.ctx,
                id,
                particle.diameter,
                resolved.ensemble.n_steps,
                resolved.ensemble.dt,
                resolved.dim,
                seed.derive(streams::TRAJECTORY).derive(id),
            )?;
            let observed = apply_localization_error(
                &true_traj,
                resolved.loc_sigma_lateral,
                resolved.loc_sigma_axial,
                seed.derive(streams::LOCALIZATION).derive(id),
            )?;
            let amplitude = particle_amplitude(
                particle.diameter,
                &particle.material,
                &resolved.ctx,
                &resolved.imaging,
            )?;
            let (image, snr) = image_particle(
                resolved,
                &true_traj,
                &observed,
                amplitude,
                seed.derive(streams::SHOT_NOISE).derive(id),
            )?;
            ParticleRecord::new(id, observed, image, Some(snr))
        })
        .collect()
}

/// Produce the recentered, averaged field image of one particle.
///
/// Each frame is a crop anchored on the nearest pixel of the estimated
/// position, so the particle is rendered at its true position relative to
/// that anchor: the sub-pixel jitter plus the localization error is the
/// realistic residual blur of the recentering step. Frames alternate
/// between two half-stacks; per-frame shot noise is drawn directly at the
/// half-average level (the mean of n draws of N(0, s²) is one draw of
/// N(0, s²/n)), which keeps the statistics of the literal per-frame
/// protocol at a fraction of the cost. The noise level is then measured
/// off the half difference exactly as [`estimate_noise`] does.
fn image_particle(
    resolved: &ResolvedRun,
    true_traj: &Trajectory,
    observed: &Trajectory,
    amplitude: Complex64,
    seed: RngSeed,
) -> Result<(RytovImage, f64)> {
    let img = &resolved.imaging;
    let n_frames = true_traj.len();
    let px = img.pixel_size;
    let n_pixels = img.width as usize * img.height as usize;

    let mut det = [vec![0.0f64; n_pixels], vec![0.0f64; n_pixels]];
    let mut counts = [0usize; 2];
    for t in 0..n_frames {
        let est = observed.positions[t];
        let tru = true_traj.positions[t];
        let anchor = [(est[0] / px).round(), (est[1] / px).round()];
        let offset_px = [tru[0] / px - anchor[0], tru[1] / px - anchor[1]];
        let half = t % 2;
        optics::accumulate_footprint(img, offset_px, &mut det[half]);
        counts[half] += 1;
    }

    let sigma = img.photon_noise_sigma;
    let mut rng = seed.rng();
    let mut halves: [Vec<Complex64>; 2] = [Vec::with_capacity(n_pixels), Vec::with_capacity(n_pixels)];
    for half in 0..2 {
        let inv = 1.0 / counts[half] as f64;
        let sigma_half = sigma * inv.sqrt();
        for &det_value in det[half].iter() {
            let signal = amplitude * (det_value * inv);
            let value = if sigma > 0.0 {
                let nr: f64 = rng.sample(StandardNormal);
                let ni: f64 = rng.sample(StandardNormal);
                Complex64::new(signal.re + sigma_half * nr, signal.im + sigma_half * ni)
            } else {
                signal
            };
            halves[half].push(value);
        }
    }

    let epsilon = noise_from_half_averages(&halves[0], &halves[1], counts[0], counts[1]);
    let n_total = (counts[0] + counts[1]) as f64;
    let full: Vec<Complex64> = halves[0]
        .iter()
        .zip(halves[1].iter())
        .map(|(a, b)| (a * counts[0] as f64 + b * counts[1] as f64) / n_total)
        .collect();
    let image = RytovImage::new(img.width, img.height, px, full)?.with_epsilon(epsilon)?;
    let snr = compute_snr(&image)?;
    Ok((image, snr))
}

/// Analysis of a set of records at one exponent: per-particle classic and
/// weighted estimates plus the similarity matrix they came from.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub ids: Vec<u64>,
    pub curves: Vec<MsdCurve>,
    pub similarity: SimilarityMatrix,
    pub rows: Vec<SizesRow>,
}

impl Analysis {
    pub fn classic_estimates(&self) -> Vec<SizeEstimate> {
        self.rows.iter().map(|r| r.classic.clone()).collect()
    }

    pub fn weighted_estimates(&self) -> Vec<SizeEstimate> {
        self.rows.iter().map(|r| r.weighted.clone()).collect()
    }
}

/// Run the full analysis on in-memory records.
pub fn analyze_records(
    records: &[ParticleRecord],
    resolved: &ResolvedRun,
    n_w: f64,
) -> Result<Analysis> {
    for r in records {
        if r.rytov.epsilon.is_none() {
            return Err(Error::MissingEpsilon(r.id));
        }
    }
    let curves: Vec<MsdCurve> = records
        .iter()
        .map(|r| msd_curve(&r.trajectory, resolved.n_fit_lags))
        .collect::<Result<_>>()?;
    let similarity = similarity_matrix(records)?;
    let weight_matrix = weights(&similarity, n_w)?;
    let rows: Vec<SizesRow> = (0..records.len())
        .into_par_iter()
        .map(|target| -> Result<SizesRow> {
            let classic = fit_classic(&curves[target], &resolved.ctx, resolved.n_fit_lags)?;
            let weighted = fit_weighted(
                &curves,
                &weight_matrix,
                target,
                &resolved.ctx,
                resolved.n_fit_lags,
            )?;
            Ok(SizesRow {
                particle_id: records[target].id,
                snr: records[target].snr,
                classic,
                weighted,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Analysis {
        ids: records.iter().map(|r| r.id).collect(),
        curves,
        similarity,
        rows,
    })
}

/// Shared-bin histograms of the classic and weighted diameters.
pub fn shared_histograms(
    analysis: &Analysis,
    bins: u32,
) -> Result<(Vec<crate::calibration::HistogramBin>, Vec<crate::calibration::HistogramBin>)> {
    let classic: Vec<f64> = analysis.rows.iter().filter_map(|r| r.classic.diameter).collect();
    let weighted: Vec<f64> = analysis
        .rows
        .iter()
        .filter_map(|r| r.weighted.diameter)
        .collect();
    if classic.is_empty() && weighted.is_empty() {
        return Err(Error::AllInvalid);
    }
    let min = classic
        .iter()
        .chain(&weighted)
        .copied()
        .fold(f64::INFINITY, f64::min);
    let max = classic
        .iter()
        .chain(&weighted)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let edges = histogram_edges(min, max, &BinSpec::Count(bins))?;
    Ok((
        histogram_counts(&classic, &edges),
        histogram_counts(&weighted, &edges),
    ))
}

/// Outcome of the calibrate stage.
#[derive(Debug, Clone)]
pub struct CalibrationOutput {
    pub sweep: SweepResult,
    pub optimal_n_w: f64,
    /// One `(snr, optimal exponent)` point per configured SNR.
    pub snr_points: Vec<(f64, f64)>,
    /// Present when at least four finite points were available.
    pub snr_model: Option<SnrModel>,
}

/// Exponent sweep (and optional SNR model) for the configured ensemble.
/// Requires ground truth, so this always simulates.
pub fn calibrate(resolved: &ResolvedRun) -> Result<CalibrationOutput> {
    let truth = sample_true_sizes(&resolved.ensemble, resolved.seed)?;
    let true_diameters: Vec<f64> = truth.iter().map(|t| t.diameter).collect();
    let fit = FitParams {
        ctx: resolved.ctx,
        n_fit_lags: resolved.n_fit_lags,
    };
    let base = resolved.seed.derive(streams::REPETITION);
    let sweep = sweep_exponent(
        &true_diameters,
        &resolved.calibration.grid,
        resolved.calibration.repetitions,
        &fit,
        sweep_generator(resolved, &truth, base),
    )?;
    let optimal_n_w = optimal_exponent(&sweep)?;

    let mut snr_points = Vec::new();
    for (idx, &snr) in resolved.calibration.snr_points.iter().enumerate() {
        let mut cfg = resolved.config.clone();
        cfg.noise.snr_target = snr;
        cfg.noise.photon_noise_sigma = None;
        let point_run = cfg.resolve()?;
        let point_base = resolved
            .seed
            .derive(SNR_POINT_STREAM)
            .derive(idx as u64)
            .derive(streams::REPETITION);
        let point_sweep = sweep_exponent(
            &true_diameters,
            &point_run.calibration.grid,
            point_run.calibration.repetitions,
            &fit,
            sweep_generator(&point_run, &truth, point_base),
        )?;
        snr_points.push((snr, optimal_exponent(&point_sweep)?));
    }
    let snr_model = if snr_points.len() >= 4 && snr_points.iter().all(|&(_, o)| o.is_finite()) {
        Some(fit_snr_model(&snr_points)?)
    } else {
        if !snr_points.is_empty() {
            log::warn!(
                "skipping SNR model: need >= 4 finite optima, got {:?}",
                snr_points
            );
        }
        None
    };
    Ok(CalibrationOutput {
        sweep,
        optimal_n_w,
        snr_points,
        snr_model,
    })
}

/// Repetition closure for the exponent sweep: fresh trajectories and image
/// noise per repetition, fixed true sizes.
fn sweep_generator<'a>(
    resolved: &'a ResolvedRun,
    truth: &'a [TrueParticle],
    base: RngSeed,
) -> impl Fn(u32) -> Result<(Vec<MsdCurve>, SimilarityMatrix)> + Sync + 'a {
    move |rep: u32| {
        let records = generate_records(resolved, truth, base.derive(rep as u64))?;
        let curves: Vec<MsdCurve> = records
            .iter()
            .map(|r| msd_curve(&r.trajectory, resolved.n_fit_lags))
            .collect::<Result<_>>()?;
        let similarity = similarity_matrix(&records)?;
        Ok((curves, similarity))
    }
}

/// Per-population statistics keyed by truth label (simulation only).
pub fn stats_by_population(
    estimates: &[SizeEstimate],
    truth: &[TruthRow],
    bins: &BinSpec,
) -> Result<BTreeMap<usize, PopulationStats>> {
    let mut grouped: BTreeMap<usize, Vec<SizeEstimate>> = BTreeMap::new();
    let by_id: BTreeMap<u64, usize> = truth.iter().map(|t| (t.particle_id, t.population)).collect();
    for est in estimates {
        let pop = by_id.get(&est.particle_id).copied().ok_or_else(|| {
            Error::IdMismatch(vec![est.particle_id])
        })?;
        grouped.entry(pop).or_default().push(est.clone());
    }
    grouped
        .into_iter()
        .map(|(pop, ests)| Ok((pop, population_stats(&ests, bins)?)))
        .collect()
}

// ---------------------------------------------------------------------------
// File-level stages used by the command line
// ---------------------------------------------------------------------------

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_manifest(resolved: &ResolvedRun, dir: &Path) -> Result<()> {
    let manifest = RunManifest::new(resolved);
    let json = serde_json::to_string_pretty(&manifest)?;
    formats::atomic_write(&dir.join("manifest.json"), json.as_bytes())
}

/// Simulate and write `manifest.json`, `tracks.csv`, `truth.csv` and one
/// image per particle under `images/`. The manifest goes first.
pub fn run_simulate(resolved: &ResolvedRun, out_dir: &Path) -> Result<SimulatedEnsemble> {
    let ensemble = simulate(resolved)?;
    ensure_dir(out_dir)?;
    ensure_dir(&out_dir.join("images"))?;
    write_manifest(resolved, out_dir)?;
    let trajectories: Vec<Trajectory> = ensemble
        .records
        .iter()
        .map(|r| r.trajectory.clone())
        .collect();
    formats::write_tracks(&out_dir.join("tracks.csv"), &trajectories)?;
    formats::write_truth(&out_dir.join("truth.csv"), &ensemble.truth)?;
    for record in &ensemble.records {
        formats::write_rytov(
            &out_dir.join("images").join(formats::image_filename(record.id)),
            &record.rytov,
        )?;
    }
    Ok(ensemble)
}

/// Load records from a run directory (`tracks.csv` + `images/`), checking
/// id consistency and noise availability.
pub fn load_records(in_dir: &Path) -> Result<Vec<ParticleRecord>> {
    let tracks = formats::read_tracks(&in_dir.join("tracks.csv"))?;
    let mut images = formats::read_images_dir(&in_dir.join("images"))?;
    let track_ids: Vec<u64> = tracks.iter().map(|t| t.particle_id).collect();
    let mut orphans: Vec<u64> = Vec::new();
    for id in &track_ids {
        if !images.contains_key(id) {
            orphans.push(*id);
        }
    }
    for id in images.keys() {
        if !track_ids.contains(id) {
            orphans.push(*id);
        }
    }
    if !orphans.is_empty() {
        orphans.sort_unstable();
        return Err(Error::IdMismatch(orphans));
    }
    tracks
        .into_iter()
        .map(|traj| {
            let id = traj.particle_id;
            let image = images.remove(&id).expect("id checked");
            let snr = match image.epsilon {
                Some(e) if e > 0.0 => Some(compute_snr(&image)?),
                _ => None,
            };
            ParticleRecord::new(id, traj, image, snr)
        })
        .collect()
}

/// Analyze a run directory and write `sizes.csv`, `similarity.csv` and
/// `histogram.csv`. Everything is computed before anything is written.
pub fn run_analyze(resolved: &ResolvedRun, in_dir: &Path, out_dir: &Path) -> Result<Analysis> {
    let records = load_records(in_dir)?;
    let analysis = analyze_records(&records, resolved, resolved.n_w)?;
    let histograms = shared_histograms(&analysis, resolved.histogram_bins)?;
    ensure_dir(out_dir)?;
    write_manifest(resolved, out_dir)?;
    formats::write_sizes(&out_dir.join("sizes.csv"), &analysis.rows)?;
    formats::write_similarity(
        &out_dir.join("similarity.csv"),
        &analysis.ids,
        &analysis.similarity,
    )?;
    formats::write_histogram(&out_dir.join("histogram.csv"), &histograms.0, &histograms.1)?;
    Ok(analysis)
}

/// Calibrate and write `sweep.csv` (and `snr_model.csv` when configured).
pub fn run_calibrate(resolved: &ResolvedRun, out_dir: &Path) -> Result<CalibrationOutput> {
    let output = calibrate(resolved)?;
    ensure_dir(out_dir)?;
    write_manifest(resolved, out_dir)?;
    formats::write_sweep(&out_dir.join("sweep.csv"), &output.sweep)?;
    if let Some(model) = &output.snr_model {
        formats::write_snr_model(&out_dir.join("snr_model.csv"), &output.snr_points, model)?;
    }
    Ok(output)
}

/// Recover per-particle refractive indices from a sizes table plus the
/// averaged images, one row per method. Particles without a valid size of
/// a method get a warning row with empty numeric fields.
pub fn run_refindex(
    resolved: &ResolvedRun,
    sizes_path: &Path,
    images_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<RefIndexRow>> {
    let sizes = formats::read_sizes(sizes_path)?;
    let images = formats::read_images_dir(images_dir)?;
    let mut orphans: Vec<u64> = images
        .keys()
        .filter(|id| !sizes.iter().any(|r| r.particle_id == **id))
        .copied()
        .collect();
    orphans.extend(
        sizes
            .iter()
            .map(|r| r.particle_id)
            .filter(|id| !images.contains_key(id)),
    );
    if !orphans.is_empty() {
        orphans.sort_unstable();
        return Err(Error::IdMismatch(orphans));
    }

    let mut rows = Vec::with_capacity(sizes.len() * 2);
    for size_row in &sizes {
        let image = &images[&size_row.particle_id];
        for (method, estimate) in [("classic", &size_row.classic), ("weighted", &size_row.weighted)]
        {
            let row = match estimate.diameter {
                Some(d) => RefIndexRow {
                    particle_id: size_row.particle_id,
                    method: method.to_string(),
                    diameter_m: Some(d),
                    estimate: Some(refractive_index_from_image(
                        size_row.particle_id,
                        image,
                        d,
                        &resolved.ctx,
                    )?),
                },
                None => {
                    log::warn!(
                        "particle {}: no valid {method} size, writing warning row",
                        size_row.particle_id
                    );
                    RefIndexRow {
                        particle_id: size_row.particle_id,
                        method: method.to_string(),
                        diameter_m: None,
                        estimate: None,
                    }
                }
            };
            rows.push(row);
        }
    }
    ensure_dir(out_dir)?;
    formats::write_refindex(&out_dir.join("refindex.csv"), &rows)?;
    Ok(rows)
}

/// Average raw frame stacks (`frames/` + `offsets.csv`), estimate the
/// noise level of each average, and write per-particle images with the
/// estimate attached plus a `noise.csv` summary.
pub fn run_noise_estimate(in_dir: &Path, out_dir: &Path) -> Result<Vec<(u64, f64, f64, usize)>> {
    let stacks = formats::read_frames_dir(&in_dir.join("frames"))?;
    if stacks.is_empty() {
        return Err(Error::Parse {
            path: in_dir.join("frames"),
            format: "rytov",
            line: 0,
            message: "no frame stacks found".to_string(),
        });
    }
    let offsets = formats::read_offsets(&in_dir.join("offsets.csv"))?;
    let mut summary = Vec::new();
    let mut outputs = Vec::new();
    for (id, frames) in &stacks {
        let offs = offsets
            .get(id)
            .ok_or_else(|| Error::IdMismatch(vec![*id]))?;
        if offs.len() != frames.len()
            || offs
                .iter()
                .zip(frames.iter())
                .any(|((of, _), (ff, _))| of != ff)
        {
            return Err(Error::Config(format!(
                "particle {id}: offsets do not match frames"
            )));
        }
        let images: Vec<RytovImage> = frames.iter().map(|(_, img)| img.clone()).collect();
        let vectors: Vec<[f64; 2]> = offs.iter().map(|(_, o)| *o).collect();
        let (average, epsilon) = estimate_noise(&images, &vectors)?;
        let snr = compute_snr(&average)?;
        summary.push((*id, epsilon, snr, images.len()));
        outputs.push((*id, average));
    }
    ensure_dir(out_dir)?;
    ensure_dir(&out_dir.join("images"))?;
    for (id, average) in &outputs {
        formats::write_rytov(
            &out_dir.join("images").join(formats::image_filename(*id)),
            average,
        )?;
    }
    formats::write_noise(&out_dir.join("noise.csv"), &summary)?;
    Ok(summary)
}

#![allow(clippy::field_reassign_with_default)]

//! Behavior of the full synthetic model across modules: similarity decay
//! with particle difference, block structure of mixtures, SNR targeting,
//! sweep shape and reproducibility.

use wnta::brownian::{MaterialSpec, Population};
use wnta::calibration::{optimal_exponent, population_stats, separation_index, BinSpec};
use wnta::config::RunConfig;
use wnta::pipeline::{analyze_records, calibrate, simulate, stats_by_population};
use wnta::similarity::similarity;

fn base_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg
}

/// Mean similarity between particles of two populations in one simulated
/// ensemble, addressed by truth population index.
fn mean_similarity(
    analysis: &wnta::pipeline::Analysis,
    truth: &[wnta::formats::TruthRow],
    pop_a: usize,
    pop_b: usize,
) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, ti) in truth.iter().enumerate() {
        for (j, tj) in truth.iter().enumerate() {
            if j <= i || ti.population != pop_a || tj.population != pop_b {
                continue;
            }
            sum += analysis.similarity.get(i, j);
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn similarity_decays_with_size_difference() {
    // Pairs of a 100 nm reference and one partner of growing size; the
    // measured similarity starts at ~1 for twins and falls monotonically
    // over a +-50 nm sweep (averaged over a few noise realizations).
    let mut cfg = base_config(2100);
    cfg.populations = vec![
        Population {
            count: 1,
            mean_diameter: 100e-9,
            sd_diameter: 0.0,
            material: MaterialSpec { n: 1.59, k: 0.0 },
            label: "ref".to_string(),
        };
        2
    ];
    let deltas_nm = [0.0, 10.0, 20.0, 30.0, 40.0, 50.0];
    let mut curve = Vec::new();
    for (k, d) in deltas_nm.iter().enumerate() {
        let mut mean_c = 0.0;
        let reps = 6;
        for rep in 0..reps {
            let mut c = cfg.clone();
            c.seed = 3000 + (k * reps + rep) as u64;
            c.populations[1].mean_diameter = (100.0 + d) * 1e-9;
            let resolved = c.resolve().unwrap();
            let ensemble = simulate(&resolved).unwrap();
            let a = &ensemble.records[0].rytov;
            let b = &ensemble.records[1].rytov;
            let pooled = 0.5 * (a.epsilon.unwrap() + b.epsilon.unwrap());
            mean_c += similarity(a, b, pooled).unwrap();
        }
        curve.push(mean_c / reps as f64);
    }
    assert!(curve[0] > 0.45, "twin similarity {:.3}", curve[0]);
    for w in curve.windows(2) {
        assert!(w[1] < w[0] + 0.05, "similarity not decaying: {curve:?}");
    }
    assert!(
        curve.last().unwrap() < &0.25,
        "similarity at +50 nm too high: {curve:?}"
    );
    // Strict decrease over the sweep as a whole.
    assert!(curve.last().unwrap() < &(curve[0] - 0.2));
}

#[test]
fn mixture_similarity_has_block_structure() {
    let mut cfg = base_config(2200);
    cfg.physical = wnta::PhysicalContext::new(293.0, 1.0e-3, 400e-9, 1.343).unwrap();
    cfg.noise.snr_target = 35.0;
    cfg.noise.reference_diameter_m = 200e-9;
    cfg.noise.reference_material = MaterialSpec { n: 1.63, k: 0.0 };
    cfg.populations = vec![
        Population {
            count: 40,
            mean_diameter: 200e-9,
            sd_diameter: 25e-9,
            material: MaterialSpec { n: 1.63, k: 0.0 },
            label: "PS".to_string(),
        },
        Population {
            count: 40,
            mean_diameter: 100e-9,
            sd_diameter: 20e-9,
            material: MaterialSpec { n: 1.47, k: 1.95 },
            label: "Au".to_string(),
        },
    ];
    let resolved = cfg.resolve().unwrap();
    let ensemble = simulate(&resolved).unwrap();
    let analysis = analyze_records(&ensemble.records, &resolved, 1.125).unwrap();

    let within_ps = mean_similarity(&analysis, &ensemble.truth, 0, 0);
    let within_au = mean_similarity(&analysis, &ensemble.truth, 1, 1);
    let cross = mean_similarity(&analysis, &ensemble.truth, 0, 1);
    assert!(
        within_ps > cross && within_au > cross,
        "within PS {within_ps:.3}, within Au {within_au:.3}, cross {cross:.3}"
    );
}

#[test]
fn reference_particle_reaches_target_snr() {
    // A monodisperse ensemble at exactly the reference size must come out
    // of the imaging pipeline at the configured SNR within 10%. The
    // per-particle noise estimate is a heavy-tailed statistic, so the
    // ensemble SNR is read as the typical peak over the root of the mean
    // noise level.
    let mut cfg = base_config(2300);
    cfg.populations[0].count = 120;
    cfg.populations[0].sd_diameter = 0.0;
    let resolved = cfg.resolve().unwrap();
    let ensemble = simulate(&resolved).unwrap();
    let mut peaks: Vec<f64> = ensemble
        .records
        .iter()
        .map(|r| r.rytov.peak_amplitude())
        .collect();
    peaks.sort_by(f64::total_cmp);
    let median_peak = peaks[peaks.len() / 2];
    let mean_eps = ensemble
        .records
        .iter()
        .map(|r| r.rytov.epsilon.unwrap())
        .sum::<f64>()
        / ensemble.records.len() as f64;
    let snr = median_peak / mean_eps.sqrt();
    assert!(
        (snr - 55.0).abs() / 55.0 < 0.10,
        "ensemble SNR {snr:.1} not within 10% of 55"
    );
}

#[test]
fn truth_sample_sd_matches_population() {
    let mut cfg = base_config(2400);
    cfg.populations[0].count = 200;
    let resolved = cfg.resolve().unwrap();
    let ensemble = simulate(&resolved).unwrap();
    let d: Vec<f64> = ensemble.truth.iter().map(|t| t.diameter_m).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let sd = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (d.len() - 1) as f64)
        .sqrt();
    assert!(
        (12e-9..=18e-9).contains(&sd),
        "sample SD {:.2} nm outside 15 +- 3",
        sd * 1e9
    );
}

#[test]
fn sweep_is_bit_reproducible_and_has_interior_gain_maximum() {
    let mut cfg = base_config(2500);
    cfg.populations[0].count = 60;
    cfg.calibration.repetitions = 4;
    cfg.calibration.grid = vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0, f64::INFINITY];
    let resolved = cfg.resolve().unwrap();

    let a = calibrate(&resolved).unwrap();
    let b = calibrate(&resolved).unwrap();
    assert_eq!(a.sweep.mean_rel_diff, b.sweep.mean_rel_diff);
    assert_eq!(a.sweep.sd_rel_diff, b.sweep.sd_rel_diff);
    assert_eq!(a.optimal_n_w, b.optimal_n_w);

    // Interior maximum of the gain: better than full pooling and than the
    // classic limit (whose gain is exactly 1).
    let best = optimal_exponent(&a.sweep).unwrap();
    let best_idx = a.sweep.grid.iter().position(|&g| g == best).unwrap();
    assert!(best > 0.0 && best.is_finite(), "optimum {best}");
    assert!(a.sweep.gain[best_idx] > a.sweep.gain[0]);
    assert!(a.sweep.gain[best_idx] > 1.0);
    assert_eq!(*a.sweep.gain.last().unwrap(), 1.0);
}

#[test]
fn full_pooling_understates_dispersion() {
    // The zero-exponent artifact: every estimate collapses toward the
    // ensemble mean, so the apparent size SD drops below both the classic
    // spread and the true dispersion.
    let mut cfg = base_config(2600);
    cfg.populations[0].count = 80;
    let resolved = cfg.resolve().unwrap();
    let ensemble = simulate(&resolved).unwrap();
    let at = |n_w: f64| {
        let analysis = analyze_records(&ensemble.records, &resolved, n_w).unwrap();
        population_stats(&analysis.weighted_estimates(), &BinSpec::Count(20))
            .unwrap()
            .sd
    };
    let sd_zero = at(0.0);
    let sd_classic = at(f64::INFINITY);
    assert!(
        sd_zero < sd_classic,
        "pooled SD {sd_zero} not below classic {sd_classic}"
    );
    assert!(sd_zero < 10e-9, "pooled SD {sd_zero} should collapse");
}

#[test]
fn weighted_histograms_separate_mixture_populations_better() {
    let mut cfg = base_config(2700);
    cfg.physical = wnta::PhysicalContext::new(293.0, 1.0e-3, 400e-9, 1.343).unwrap();
    cfg.noise.snr_target = 35.0;
    cfg.noise.reference_diameter_m = 200e-9;
    cfg.noise.reference_material = MaterialSpec { n: 1.63, k: 0.0 };
    cfg.populations = vec![
        Population {
            count: 50,
            mean_diameter: 200e-9,
            sd_diameter: 25e-9,
            material: MaterialSpec { n: 1.63, k: 0.0 },
            label: "PS".to_string(),
        },
        Population {
            count: 50,
            mean_diameter: 100e-9,
            sd_diameter: 20e-9,
            material: MaterialSpec { n: 1.47, k: 1.95 },
            label: "Au".to_string(),
        },
    ];
    let resolved = cfg.resolve().unwrap();
    let ensemble = simulate(&resolved).unwrap();
    let analysis = analyze_records(&ensemble.records, &resolved, 1.125).unwrap();
    let bins = BinSpec::Count(20);
    let classic = stats_by_population(&analysis.classic_estimates(), &ensemble.truth, &bins).unwrap();
    let weighted =
        stats_by_population(&analysis.weighted_estimates(), &ensemble.truth, &bins).unwrap();
    assert!(
        separation_index(&weighted[&0], &weighted[&1])
            > separation_index(&classic[&0], &classic[&1])
    );
}

#![allow(clippy::field_reassign_with_default)]

//! Acceptance suite: one test per release criterion, each printing a
//! single PASS/FAIL line (run with `--nocapture` or `--show-output` to see
//! them). Every threshold is pinned here, not computed from the run.

use std::time::Instant;

use wnta::brownian::{simulate_trajectory, MaterialSpec, Population};
use wnta::calibration::{optimal_exponent, population_stats, separation_index, BinSpec};
use wnta::config::RunConfig;
use wnta::estimator::{fit_classic, fit_weighted, msd_curve, refractive_index_from_image};
use wnta::pipeline::{analyze_records, calibrate, simulate, stats_by_population};
use wnta::similarity::weights;
use wnta::types::{diffusion_coefficient, Dimensionality, PhysicalContext, RngSeed};

/// Check one criterion clause, collecting a printable verdict.
struct Criterion {
    name: &'static str,
    clauses: Vec<(String, bool)>,
}

impl Criterion {
    fn new(name: &'static str) -> Self {
        Criterion {
            name,
            clauses: Vec::new(),
        }
    }

    fn check(&mut self, detail: String, pass: bool) {
        self.clauses.push((detail, pass));
    }

    fn finish(self) {
        let passed = self.clauses.iter().all(|(_, p)| *p);
        let details: Vec<String> = self
            .clauses
            .iter()
            .map(|(d, p)| format!("{d} [{}]", if *p { "ok" } else { "FAIL" }))
            .collect();
        println!(
            "criterion {}: {} — {}",
            self.name,
            if passed { "PASS" } else { "FAIL" },
            details.join("; ")
        );
        assert!(passed, "criterion {} failed: {}", self.name, details.join("; "));
    }
}

fn nm(v: f64) -> f64 {
    v * 1e9
}

fn default_context() -> PhysicalContext {
    PhysicalContext::new(293.0, 1.0e-3, 550e-9, 1.33).unwrap()
}

/// Stock monodisperse run: 200 x PS 100+-15 nm, 200 frames, SNR 55.
fn ps100_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg
}

/// Two-population run at matched field amplitudes: PS 200+-25 nm and
/// Au 100+-20 nm with 400 nm-band optical constants, moderate SNR.
fn mixture_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.physical = PhysicalContext::new(293.0, 1.0e-3, 400e-9, 1.343).unwrap();
    cfg.noise.snr_target = 35.0;
    cfg.noise.reference_diameter_m = 200e-9;
    cfg.noise.reference_material = MaterialSpec { n: 1.63, k: 0.0 };
    cfg.populations = vec![
        Population {
            count: 100,
            mean_diameter: 200e-9,
            sd_diameter: 25e-9,
            material: MaterialSpec { n: 1.63, k: 0.0 },
            label: "PS".to_string(),
        },
        Population {
            count: 100,
            mean_diameter: 100e-9,
            sd_diameter: 20e-9,
            material: MaterialSpec { n: 1.47, k: 1.95 },
            label: "Au".to_string(),
        },
    ];
    cfg
}

#[test]
fn criterion_1_monodisperse_recovery() {
    let start = Instant::now();
    let mut c = Criterion::new("1 (monodisperse recovery)");
    let resolved = ps100_config(42).resolve().unwrap();
    let ensemble = simulate(&resolved).unwrap();
    let analysis = analyze_records(&ensemble.records, &resolved, 1.125).unwrap();

    let classic = population_stats(&analysis.classic_estimates(), &BinSpec::Count(30)).unwrap();
    let weighted = population_stats(&analysis.weighted_estimates(), &BinSpec::Count(30)).unwrap();

    c.check(
        format!("classic SD {:.2} nm in [15, 26]", nm(classic.sd)),
        (15.0..=26.0).contains(&nm(classic.sd)),
    );
    c.check(
        format!("weighted SD {:.2} nm in [10, 17.5]", nm(weighted.sd)),
        (10.0..=17.5).contains(&nm(weighted.sd)),
    );
    c.check(
        format!("classic mean {:.2} nm within 100 +- 4", nm(classic.mean)),
        (96.0..=104.0).contains(&nm(classic.mean)),
    );
    c.check(
        format!("weighted mean {:.2} nm within 100 +- 4", nm(weighted.mean)),
        (96.0..=104.0).contains(&nm(weighted.mean)),
    );
    let elapsed = start.elapsed().as_secs_f64();
    c.check(format!("runtime {elapsed:.1} s < 120 s"), elapsed < 120.0);
    c.finish();
}

#[test]
fn criterion_2_exponent_sweep() {
    let start = Instant::now();
    let mut c = Criterion::new("2 (exponent sweep)");
    let mut cfg = ps100_config(42);
    cfg.calibration.repetitions = 10;
    let resolved = cfg.resolve().unwrap();
    let output = calibrate(&resolved).unwrap();
    let sweep = &output.sweep;

    let classic = sweep.classic_mean_rel_diff;
    c.check(
        format!("classic relative difference {:.2}% in [8, 16]", classic * 100.0),
        (0.08..=0.16).contains(&classic),
    );
    let best = optimal_exponent(sweep).unwrap();
    let best_idx = sweep.grid.iter().position(|&g| g == best).unwrap();
    let best_val = sweep.mean_rel_diff[best_idx];
    let best_gain = sweep.gain[best_idx];
    c.check(
        format!("optimum relative difference {:.2}% <= 6%", best_val * 100.0),
        best_val <= 0.06,
    );
    c.check(format!("gain at optimum {best_gain:.2} >= 2"), best_gain >= 2.0);
    c.check(
        format!("optimal n_w {best} in [0.75, 1.75]"),
        (0.75..=1.75).contains(&best),
    );
    let elapsed = start.elapsed().as_secs_f64();
    c.check(format!("runtime {elapsed:.1} s < 900 s"), elapsed < 900.0);
    c.finish();
}

#[test]
fn criterion_3_material_independence() {
    let mut c = Criterion::new("3 (material independence)");
    let mut ps = ps100_config(99);
    ps.calibration.repetitions = 10;
    let ps_opt = calibrate(&ps.resolve().unwrap()).unwrap().optimal_n_w;

    // Same sizes, gold optical constants, SNR matched via the reference.
    let mut au = ps100_config(99);
    au.calibration.repetitions = 10;
    let gold = MaterialSpec { n: 1.47, k: 1.95 };
    au.noise.reference_material = gold;
    au.populations[0].material = gold;
    au.populations[0].label = "Au".to_string();
    let au_opt = calibrate(&au.resolve().unwrap()).unwrap().optimal_n_w;

    c.check(
        format!("|opt(PS) - opt(Au)| = |{ps_opt} - {au_opt}| <= 0.5"),
        (ps_opt - au_opt).abs() <= 0.5,
    );
    c.finish();
}

#[test]
fn criterion_4_snr_law() {
    let mut c = Criterion::new("4 (SNR law)");
    let mut cfg = ps100_config(99);
    cfg.calibration.repetitions = 8;
    cfg.calibration.snr_points = vec![10.0, 20.0, 35.0, 55.0];
    let output = calibrate(&cfg.resolve().unwrap()).unwrap();

    let points = &output.snr_points;
    c.check(format!("{} SNR points", points.len()), points.len() == 4);
    let mut non_increasing = true;
    for w in points.windows(2) {
        // Points are ordered by increasing SNR; optima must not rise.
        if w[1].1 > w[0].1 {
            non_increasing = false;
        }
    }
    c.check(
        format!(
            "optimum non-increasing in SNR: {:?}",
            points.iter().map(|p| p.1).collect::<Vec<_>>()
        ),
        non_increasing,
    );
    let model = output.snr_model.expect("4 finite optima give a model");
    c.check(
        format!("R^2 of n_w_opt vs 1/SNR = {:.3} > 0.8", model.r_squared),
        model.r_squared > 0.8,
    );
    c.finish();
}

#[test]
fn criterion_5_mixture_separation() {
    let mut c = Criterion::new("5 (mixture separation)");
    let resolved = mixture_config(7001).resolve().unwrap();
    let ensemble = simulate(&resolved).unwrap();
    let analysis = analyze_records(&ensemble.records, &resolved, 1.125).unwrap();

    let bins = BinSpec::Count(30);
    let classic = stats_by_population(&analysis.classic_estimates(), &ensemble.truth, &bins).unwrap();
    let weighted =
        stats_by_population(&analysis.weighted_estimates(), &ensemble.truth, &bins).unwrap();
    let truth_mean = |pop: usize| {
        let v: Vec<f64> = ensemble
            .truth
            .iter()
            .filter(|t| t.population == pop)
            .map(|t| t.diameter_m)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };

    for (pop, label) in [(0usize, "PS-200"), (1usize, "Au-100")] {
        let ratio = weighted[&pop].sd / classic[&pop].sd;
        c.check(
            format!("{label}: weighted SD {:.1} nm < 0.75 x classic SD {:.1} nm (ratio {ratio:.3})",
                nm(weighted[&pop].sd), nm(classic[&pop].sd)),
            ratio < 0.75,
        );
        let truth = truth_mean(pop);
        let bias = (weighted[&pop].mean - truth) / truth;
        c.check(
            format!("{label}: weighted mean {:.1} nm within 8% of truth {:.1} nm ({:+.2}%)",
                nm(weighted[&pop].mean), nm(truth), bias * 100.0),
            bias.abs() <= 0.08,
        );
    }
    let sep_classic = separation_index(&classic[&0], &classic[&1]);
    let sep_weighted = separation_index(&weighted[&0], &weighted[&1]);
    c.check(
        format!("separation index improves: {sep_classic:.2} -> {sep_weighted:.2}"),
        sep_weighted > sep_classic,
    );
    c.finish();
}

#[test]
fn criterion_6_estimator_oracles() {
    let mut c = Criterion::new("6 (estimator oracles)");
    let ctx = default_context();

    // (a) lag-1 ensemble MSD against 6 D dt over >= 1000 trajectories.
    {
        let d = 100e-9;
        let dt = 0.01;
        let d_coef = diffusion_coefficient(&ctx, d).unwrap();
        let expected = 6.0 * d_coef * dt;
        let n_traj = 1200;
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..n_traj {
            let traj = simulate_trajectory(
                &ctx,
                i,
                d,
                120,
                dt,
                Dimensionality::Three,
                RngSeed(600).derive(i),
            )
            .unwrap();
            for t in 0..traj.len() - 1 {
                sum += traj.squared_displacement(t, t + 1);
                count += 1;
            }
        }
        let msd = sum / count as f64;
        let se = expected * (2.0 / 3.0f64).sqrt() / (count as f64).sqrt();
        c.check(
            format!(
                "(a) ensemble MSD(dt) {:.4e} vs 6 D dt {expected:.4e} within 3 SE ({:.1e})",
                msd,
                3.0 * se
            ),
            (msd - expected).abs() < 3.0 * se,
        );
    }

    // (b) noiseless synthetic MSD line inverts to the true diameter.
    {
        let d_true = 100e-9;
        let d_coef = diffusion_coefficient(&ctx, d_true).unwrap();
        let dt = 0.01;
        let curve = wnta::estimator::MsdCurve {
            particle_id: 0,
            dim: Dimensionality::Three,
            lags: (1..=4)
                .map(|k| wnta::estimator::MsdPoint {
                    tau: k as f64 * dt,
                    msd: 6.0 * d_coef * k as f64 * dt,
                    n_pairs: 100,
                })
                .collect(),
        };
        let est = fit_classic(&curve, &ctx, 4).unwrap();
        let rel = (est.diameter.unwrap() - d_true).abs() / d_true;
        c.check(format!("(b) noiseless inversion error {rel:.2e} < 1e-9"), rel < 1e-9);
    }

    // (c) injected image noise recovered by the split-half estimator
    // within 15% over >= 20 seeds (exercised through the full imaging
    // pipeline of a stationary reference particle).
    {
        let clean = wnta::optics::synthesize_particle_image(
            100e-9,
            &MaterialSpec { n: 1.59, k: 0.0 },
            &ctx,
            &wnta::optics::ImagingSpec {
                width: 64,
                height: 64,
                pixel_size: 100e-9,
                psf_sigma: 2.0e-6,
                fringe_period: 600e-9,
                photon_noise_sigma: 0.0,
            },
        )
        .unwrap();
        let n = 64usize;
        let sigma = clean.peak_amplitude() / 10.0;
        let expected = 2.0 * sigma * sigma / n as f64;
        let offsets = vec![[0.0, 0.0]; n];
        let mut worst: f64 = 0.0;
        for trial in 0..20u64 {
            let seed = RngSeed(8800).derive(trial);
            let frames: Vec<_> = (0..n)
                .map(|i| wnta::optics::add_shot_noise(&clean, sigma, seed.derive(i as u64)).unwrap())
                .collect();
            let (_, eps) = wnta::optics::estimate_noise(&frames, &offsets).unwrap();
            worst = worst.max((eps - expected).abs() / expected);
        }
        c.check(
            format!("(c) worst noise-recovery deviation {:.1}% within 15%", worst * 100.0),
            worst < 0.15,
        );
    }

    // (d) localization-noise intercept in the noise-dominated regime.
    {
        let (sl, sa) = (30e-9, 100e-9);
        let expected_b = 2.0 * (2.0 * sl * sl + sa * sa);
        let d = 1e-6;
        let dt = 1e-3;
        let n_traj = 1500;
        let mut acc = 0.0;
        for i in 0..n_traj {
            let seed = RngSeed(61).derive(i);
            let traj =
                simulate_trajectory(&ctx, i, d, 200, dt, Dimensionality::Three, seed).unwrap();
            let noisy =
                wnta::brownian::apply_localization_error(&traj, sl, sa, seed.derive(1)).unwrap();
            let est = fit_classic(&msd_curve(&noisy, 4).unwrap(), &ctx, 4).unwrap();
            acc += est.intercept;
        }
        let mean_b = acc / n_traj as f64;
        let rel = (mean_b - expected_b).abs() / expected_b;
        c.check(
            format!(
                "(d) intercept {:.3e} vs 2(2s_l^2+s_a^2) {:.3e}, deviation {:.1}% within 10%",
                mean_b,
                expected_b,
                rel * 100.0
            ),
            rel < 0.10,
        );
    }
    c.finish();
}

#[test]
fn criterion_7_limit_identities() {
    let mut c = Criterion::new("7 (limit identities)");
    // 20 particles spread over a wide size range so every pair is
    // optically distinguishable.
    let mut cfg = ps100_config(77);
    cfg.populations = (0..20)
        .map(|i| Population {
            count: 1,
            mean_diameter: (60.0 + 12.0 * i as f64) * 1e-9,
            sd_diameter: 0.0,
            material: MaterialSpec { n: 1.59, k: 0.0 },
            label: format!("p{i}"),
        })
        .collect();
    let resolved = cfg.resolve().unwrap();
    let ensemble = simulate(&resolved).unwrap();
    let analysis = analyze_records(&ensemble.records, &resolved, 1.125).unwrap();
    let similarity = &analysis.similarity;
    let curves = &analysis.curves;

    let mut symmetric = true;
    let mut unit_diag = true;
    for i in 0..20 {
        unit_diag &= similarity.get(i, i) == 1.0;
        for j in 0..20 {
            symmetric &= similarity.get(i, j).to_bits() == similarity.get(j, i).to_bits();
        }
    }
    c.check("similarity matrix symmetric".to_string(), symmetric);
    c.check("similarity diagonal exactly 1".to_string(), unit_diag);

    let w_inf = weights(similarity, f64::INFINITY).unwrap();
    let mut inf_bit_equal = true;
    for target in 0..20 {
        let classic = fit_classic(&curves[target], &resolved.ctx, resolved.n_fit_lags).unwrap();
        let weighted =
            fit_weighted(curves, &w_inf, target, &resolved.ctx, resolved.n_fit_lags).unwrap();
        inf_bit_equal &= classic.slope.to_bits() == weighted.slope.to_bits()
            && classic.intercept.to_bits() == weighted.intercept.to_bits()
            && classic.diameter.unwrap().to_bits() == weighted.diameter.unwrap().to_bits();
    }
    c.check(
        "n_w = inf weighted fit bit-equals classic fit for all 20 particles".to_string(),
        inf_bit_equal,
    );

    let w_zero = weights(similarity, 0.0).unwrap();
    let first = fit_weighted(curves, &w_zero, 0, &resolved.ctx, resolved.n_fit_lags).unwrap();
    let mut zero_identical = true;
    for target in 1..20 {
        let est = fit_weighted(curves, &w_zero, target, &resolved.ctx, resolved.n_fit_lags).unwrap();
        zero_identical &= est.slope.to_bits() == first.slope.to_bits()
            && est.diameter.unwrap().to_bits() == first.diameter.unwrap().to_bits();
    }
    c.check(
        "n_w = 0 gives one identical pooled estimate for every target".to_string(),
        zero_identical,
    );

    let mut weights_in_range = true;
    for &n_w in &resolved.calibration.grid {
        let w = weights(similarity, n_w).unwrap();
        for i in 0..20 {
            weights_in_range &= w.get(i, i) == 1.0;
            for j in 0..20 {
                let v = w.get(i, j);
                weights_in_range &= (0.0..=1.0).contains(&v);
            }
        }
    }
    c.check(
        "all weights in [0, 1] with unit diagonal over the whole grid".to_string(),
        weights_in_range,
    );
    c.finish();
}

#[test]
fn criterion_8_track_length_error_scaling() {
    let mut c = Criterion::new("8 (track-length error scaling)");
    let ctx = default_context();
    let d_true = 100e-9;

    // The track-length scaling is a statement about the spread of the
    // fitted diffusion estimate. At N = 10 the diameter inversion 1/D is
    // heavy-tailed (slopes near zero give unbounded diameters), so the
    // spread is measured on the slope scale, where every fit counts and
    // the statistic is stable.
    let d_coef = diffusion_coefficient(&ctx, d_true).unwrap();
    let slope_true = 6.0 * d_coef * 0.01 / 0.01;
    let run = |n_steps: u32, seed: u64| -> f64 {
        let repeats = 600usize;
        let mut errs = Vec::with_capacity(repeats);
        for i in 0..repeats {
            let traj = simulate_trajectory(
                &ctx,
                i as u64,
                d_true,
                n_steps,
                0.01,
                Dimensionality::Three,
                RngSeed(seed).derive(i as u64),
            )
            .unwrap();
            let est = fit_classic(&msd_curve(&traj, 4).unwrap(), &ctx, 4).unwrap();
            errs.push((est.slope - slope_true) / slope_true);
        }
        let n = errs.len() as f64;
        let mean = errs.iter().sum::<f64>() / n;
        (errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };

    let sd10 = run(10, 810);
    c.check(
        format!("N=10: relative-error SD {:.1}% in [45, 100]", sd10 * 100.0),
        (0.45..=1.00).contains(&sd10),
    );
    let sd100 = run(100, 811);
    c.check(
        format!("N=100: relative-error SD {:.1}% in [13, 30]", sd100 * 100.0),
        (0.13..=0.30).contains(&sd100),
    );
    c.finish();
}

#[test]
fn criterion_9_refractive_index_dispersion() {
    let mut c = Criterion::new("9 (refractive-index dispersion)");
    let mut cfg = ps100_config(4242);
    cfg.noise.reference_diameter_m = 200e-9;
    cfg.populations[0].mean_diameter = 200e-9;
    cfg.populations[0].sd_diameter = 25e-9;
    // Quantitative-integral configuration: the plain Gaussian footprint
    // keeps the integrated field proportional to the particle volume, so
    // the index estimate is signal-dominated and its dispersion reflects
    // the sizing error it inherits.
    cfg.imaging.fringe_period_m = 0.0;
    let resolved = cfg.resolve().unwrap();
    let ensemble = simulate(&resolved).unwrap();
    let analysis = analyze_records(&ensemble.records, &resolved, 1.125).unwrap();

    let dispersion = |pick: &dyn Fn(&wnta::formats::SizesRow) -> Option<f64>| -> f64 {
        let ns: Vec<f64> = analysis
            .rows
            .iter()
            .zip(&ensemble.records)
            .filter_map(|(row, record)| {
                pick(row).map(|d| {
                    refractive_index_from_image(record.id, &record.rytov, d, &resolved.ctx)
                        .unwrap()
                        .n
                })
            })
            .collect();
        let n = ns.len() as f64;
        let mean = ns.iter().sum::<f64>() / n;
        (ns.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let sd_classic = dispersion(&|row| row.classic.diameter);
    let sd_weighted = dispersion(&|row| row.weighted.diameter);
    let ratio = sd_weighted / sd_classic;
    c.check(
        format!(
            "SD of Re(n) weighted {sd_weighted:.4} <= 0.7 x classic {sd_classic:.4} (ratio {ratio:.3})"
        ),
        ratio <= 0.7,
    );
    c.finish();
}

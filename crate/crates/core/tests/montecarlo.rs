mod common;

use common::*;
use manova_spectra::eigenvector::predict_alignments;
use manova_spectra::model::{build_one_way_layout, build_sample_covariance, NoiseModel, SignalModel};
use manova_spectra::montecarlo::{
    compare, manova_estimate, run_experiment, simulate, simulate_alpha, simulate_response, stream, symmetric_eigen,
    SimulationConfig, StreamRole, XiDistribution,
};
use manova_spectra::outlier::{predict_outliers, ScanConfig};
use manova_spectra::spectrum::{density_on_grid, detect_support, uniform_grid};
use nalgebra::DMatrix;

fn config(replicates: usize, seed: u64) -> SimulationConfig {
    SimulationConfig {
        replicates,
        seed,
        ..SimulationConfig::default()
    }
}

#[test]
fn noise_rows_are_standard_gaussian() {
    let (n_r, p, reps) = (100, 50, 100);
    let noise = NoiseModel::isotropic(p, &[1.0]).unwrap();
    let empty = DMatrix::zeros(0, p);
    let mut sums = vec![0.0; p];
    for rep in 0..reps {
        let mut s = stream(3, rep, 0, StreamRole::Signal);
        let mut e = stream(3, rep, 0, StreamRole::Noise);
        let alpha = simulate_alpha(n_r, &empty, noise.sqrt_component(0), XiDistribution::Gaussian, &mut s, &mut e);
        for j in 0..p {
            sums[j] += alpha.column(j).sum();
        }
    }
    let bound = 5.0 / ((n_r * reps) as f64).sqrt();
    for s in sums {
        assert!((s / (n_r * reps) as f64).abs() < bound);
    }
}

#[test]
fn noiseless_spike_covariance() {
    let (n_r, p) = (2000, 20);
    let noise = NoiseModel::isotropic(p, &[0.0]).unwrap();
    let gamma = DMatrix::from_row_slice(1, p, &basis(p, 3, 3.0).as_slice().to_vec());
    for xi in [XiDistribution::Gaussian, XiDistribution::Rademacher] {
        let mut s = stream(5, 0, 0, StreamRole::Signal);
        let mut e = stream(5, 0, 0, StreamRole::Noise);
        let alpha = simulate_alpha(n_r, &gamma, noise.sqrt_component(0), xi, &mut s, &mut e);
        let cov = alpha.transpose() * &alpha / n_r as f64;
        let top = cov.symmetric_eigenvalues().max();
        assert!((top - 9.0).abs() < 0.9, "{top}");
    }
}

#[test]
fn simulation_is_reproducible() {
    let design = build_one_way_layout(10, 8, 2).unwrap();
    let noise = twin_noise(8);
    let signal = SignalModel::from_rows(2, 8, &[(0, basis(8, 0, 3.0)), (1, basis(8, 1, 2.0))]).unwrap();
    let cfg = config(3, 42);
    let a = simulate_response(&design, &noise, &signal, &cfg, 1);
    let b = simulate_response(&design, &noise, &signal, &cfg, 1);
    assert_eq!(a, b);
    assert_ne!(a, simulate_response(&design, &noise, &signal, &cfg, 2));
    let support = support_of(&problem(&design, &noise), -20.0, 20.0, 0.05);
    let s1 = simulate(&design, &noise, &signal, &support, &cfg).unwrap();
    let s2 = simulate(&design, &noise, &signal, &support, &cfg).unwrap();
    assert_eq!(s1.outliers_to_csv(), s2.outliers_to_csv());
    for (r1, r2) in s1.replicates.iter().zip(&s2.replicates) {
        assert_eq!(r1.eigenvalues, r2.eigenvalues);
    }
}

#[test]
fn sample_second_moment_diagonal() {
    let (n, p) = (300, 40);
    let design = build_sample_covariance(n, p).unwrap();
    let noise = NoiseModel::isotropic(p, &[1.0]).unwrap();
    let y = simulate_response(&design, &noise, &SignalModel::empty(1, p), &config(1, 9), 0);
    let s = manova_estimate(&y, design.kernel()).unwrap();
    let mean = s.diagonal().mean();
    assert!((mean - 1.0).abs() < 3.0 / ((n * p) as f64).sqrt(), "{mean}");
    assert_eq!(s, s.transpose());
}

#[test]
fn manova_estimate_is_unbiased() {
    let (n_pairs, p, reps) = (10, 5, 200);
    let design = build_one_way_layout(n_pairs, p, 2).unwrap();
    let noise = NoiseModel::isotropic(p, &[1.0, 2.0]).unwrap();
    let signal = SignalModel::from_rows(2, p, &[(0, basis(p, 0, 2.0)), (1, basis(p, 1, 1.5))]).unwrap();
    let cfg = config(reps, 17);
    let draws: Vec<DMatrix<f64>> = (0..reps)
        .map(|rep| manova_estimate(&simulate_response(&design, &noise, &signal, &cfg, rep), design.kernel()).unwrap())
        .collect();
    let mut expected = DMatrix::zeros(p, p);
    for r in 0..2 {
        let u = design.incidence(r);
        let w = (u.transpose() * design.kernel() * u).trace();
        expected += signal.population_covariance(&noise, r) * w;
    }
    for i in 0..p {
        for j in 0..p {
            let xs: Vec<f64> = draws.iter().map(|m| m[(i, j)]).collect();
            let mean = xs.iter().sum::<f64>() / reps as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
            let se = (var / reps as f64).sqrt();
            assert!((mean - expected[(i, j)]).abs() < 5.0 * se, "({i},{j}): {mean} vs {}", expected[(i, j)]);
        }
    }
}

/// Edge eigenvalues fluctuate on the scale of the bulk width times p^(-2/3),
/// about 0.3 here, so the neighbourhood is widened to δ = 0.5.
#[test]
fn isotropic_noise_eigenvalues_stick_to_the_support() {
    let design = build_one_way_layout(200, 800, 2).unwrap();
    let noise = NoiseModel::isotropic(800, &[1.0, 2.0]).unwrap();
    let support = support_of(&problem(&design, &noise), -15.0, 30.0, 0.01);
    let cfg = SimulationConfig {
        delta: 0.5,
        ..config(20, 5)
    };
    let summary = simulate(&design, &noise, &SignalModel::empty(2, 800), &support, &cfg).unwrap();
    let empty = summary.outlier_counts().iter().filter(|&&c| c == 0).count();
    assert!(empty as f64 >= 0.95 * summary.replicates.len() as f64, "{:?}", summary.outlier_counts());
}

/// Exponential noise puts its largest variances in a thin support piece that
/// carries a single eigenvalue. That eigenvalue fluctuates like an outlier,
/// so it can leave the δ-neighbourhood; everything else must stick.
#[test]
fn noise_eigenvalues_stick_to_the_support() {
    let (design, noise) = twin_design(200);
    let prob = problem(&design, &noise);
    let grid = uniform_grid(-30.0, 40.0, 0.02).unwrap();
    let sd = density_on_grid(&prob, &grid, 1e-8).unwrap();
    let support = detect_support(&sd, 1e-5, 3);
    let p = 800.0;
    let eigenvalue_count = |(lo, hi): (f64, f64)| {
        let mass: f64 = sd
            .grid
            .iter()
            .zip(&sd.density)
            .filter(|(x, _)| **x >= lo && **x <= hi)
            .map(|(_, d)| d.unwrap_or(0.0) * 0.02)
            .sum();
        mass * p
    };
    let summary = simulate(&design, &noise, &SignalModel::empty(2, 800), &support, &config(20, 5)).unwrap();
    let pieces = &support.intervals;
    for o in summary.replicates.iter().flat_map(|r| &r.outliers) {
        let above = pieces.iter().position(|&(lo, _)| lo > o.lambda).unwrap_or(pieces.len());
        let neighbours = [above.checked_sub(1), (above < pieces.len()).then_some(above)];
        let beside_single = neighbours.iter().flatten().any(|&i| eigenvalue_count(pieces[i]) < 1.5);
        assert!(beside_single, "{} escaped away from any single-eigenvalue piece", o.lambda);
        assert!(o.distance_to_support < 0.5, "{}", o.lambda);
    }
    assert!(summary.mean_excess_outside(0) <= 0.01);
}

#[test]
fn bbp_outlier_and_alignment() {
    let (n, p, mu) = (2000, 1000, 4.0);
    let design = build_sample_covariance(n, p).unwrap();
    let noise = NoiseModel::isotropic(p, &[1.0]).unwrap();
    let prob = problem(&design, &noise);
    let signal = bbp_signal(p, mu);
    let support = support_of(&prob, -1.0, 4.0, 0.01);
    let (roots, _) = predict_outliers(&prob, &signal, &support, &ScanConfig::default()).unwrap();
    let aligns: Vec<_> = predict_alignments(&prob, &signal, &roots).into_iter().map(|a| a.unwrap()).collect();
    let (summary, report) = run_experiment(&design, &noise, &signal, &support, &roots, &aligns, &config(60, 11)).unwrap();
    assert!(summary.outlier_counts().iter().all(|&c| c == 1), "{:?}", summary.outlier_counts());
    let root = &report.roots[0];
    let oracle = Bbp { gamma: 0.5, mu }.outlier();
    assert!((root.empirical_mean - oracle).abs() < 0.05, "{} ± {}", root.empirical_mean, root.empirical_stderr);
    let cos2: f64 = summary
        .replicates
        .iter()
        .map(|r| r.outliers[0].projection[0].powi(2) / mu)
        .sum::<f64>()
        / summary.replicates.len() as f64;
    assert!((cos2 - Bbp { gamma: 0.5, mu }.squared_cosine()).abs() < 0.02, "{cos2}");
    assert!(report.mean_ordered_dist < 0.2);
    assert_eq!(report.count_agreement, 1.0);
    assert!(root.mean_projection[0] > 0.0);
}

#[test]
fn rademacher_signal_gives_the_same_outlier() {
    let (n, p, mu) = (400, 200, 4.0);
    let design = build_sample_covariance(n, p).unwrap();
    let noise = NoiseModel::isotropic(p, &[1.0]).unwrap();
    let prob = problem(&design, &noise);
    let signal = bbp_signal(p, mu);
    let support = support_of(&prob, -1.0, 4.0, 0.01);
    let (roots, _) = predict_outliers(&prob, &signal, &support, &ScanConfig::default()).unwrap();
    let cfg = SimulationConfig {
        xi: XiDistribution::Rademacher,
        ..config(50, 2)
    };
    let summary = simulate(&design, &noise, &signal, &support, &cfg).unwrap();
    let report = compare(&summary, &roots, &[]);
    assert!((report.roots[0].empirical_mean - 5.625).abs() < 0.15, "{:?}", report.roots[0]);
}

#[test]
fn eigensolver_reconstructs_the_matrix() {
    let design = build_one_way_layout(8, 6, 2).unwrap();
    let noise = twin_noise(6);
    let y = simulate_response(&design, &noise, &SignalModel::empty(2, 6), &config(1, 1), 0);
    let s = manova_estimate(&y, design.kernel()).unwrap();
    let e = symmetric_eigen(&s).unwrap();
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(e.values.clone()));
    let back = &e.vectors * d * e.vectors.transpose();
    assert!((back - &s).abs().max() < 1e-10 * s.abs().max());
    assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
}

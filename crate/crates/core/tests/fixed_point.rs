mod common;

use common::*;
use manova_spectra::fixed_point::{
    continue_real_axis, derivative_b, derivative_b_at, derivative_b_with_step, SolverOptions, SpectralProblem,
};
use manova_spectra::model::{build_one_way_layout, compute_interaction_matrix, NoiseModel};
use manova_spectra::C64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn marchenko_pastur_stieltjes_at_reference_point() {
    let prob = mp_problem(400, 200);
    let z = C64::new(-1.0, 2.0);
    let s = prob.solve_at(z, None, &SolverOptions::default()).unwrap();
    let oracle = MarchenkoPastur { gamma: 0.5 }.stieltjes(z);
    assert!((s.m0 - oracle).norm() < 1e-10, "{} vs {oracle}", s.m0);
    assert!((s.a[0] - s.m0 * 0.5).norm() < 1e-12);
    assert!((s.b[0] + (s.a[0] + 1.0).inv()).norm() < 1e-12);
}

#[test]
fn large_argument_linearization_on_one_way_layout() {
    let (design, noise) = twin_design(100);
    let f = compute_interaction_matrix(&design);
    let prob = SpectralProblem::new(&f, &noise).unwrap();
    let z = C64::new(1e6, 1.0);
    let s = prob.solve_at(z, None, &SolverOptions::default()).unwrap();
    for r in 0..2 {
        let nr = design.sizes()[r] as f64;
        let a_lin = -C64::new(noise.component(r).trace() / nr, 0.0) / z;
        assert!((s.a[r] - a_lin).norm() <= 1e-4 * a_lin.norm());
        let b_lin = -f.block_trace(r) / nr;
        assert!((s.b[r] - C64::new(b_lin, 0.0)).norm() <= 1e-4 * b_lin.abs().max(1.0));
    }
    assert!((z * s.m0 + 1.0).norm() * z.norm() < 100.0 * prob.spectral_scale());
}

#[test]
fn stieltjes_normalization_decays_like_inverse_argument() {
    let (design, noise) = twin_design(50);
    let prob = problem(&design, &noise);
    let base = 100.0 * prob.spectral_scale();
    let mut scaled = Vec::new();
    for t in [1.0, 10.0, 100.0] {
        let z = C64::new(base * t, base * t);
        let s = prob.solve_at(z, None, &SolverOptions::default()).unwrap();
        scaled.push((z * s.m0 + 1.0).norm() * z.norm());
    }
    // |z m₀ + 1| · |z| stays bounded (converges to |mean of μ₀|).
    assert!(scaled.iter().all(|&c| c < 10.0 * prob.spectral_scale()), "{scaled:?}");
}

#[test]
fn conjugate_points_give_conjugate_states() {
    let (design, noise) = twin_design(50);
    let prob = problem(&design, &noise);
    for z in [C64::new(3.0, 0.5), C64::new(-2.0, 0.1), C64::new(30.0, 4.0)] {
        let s = prob.solve_at(z, None, &SolverOptions::default()).unwrap();
        let c = prob.solve_at(z.conj(), None, &SolverOptions::default()).unwrap();
        assert!(s.m0.im > 0.0);
        assert!((s.m0.conj() - c.m0).norm() < 1e-9);
        for r in 0..2 {
            assert!((s.b[r].conj() - c.b[r]).norm() < 1e-9);
        }
    }
}

#[test]
fn random_initializations_reach_one_state() {
    let (design, noise) = twin_design(50);
    let prob = problem(&design, &noise);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for z in [C64::new(1.0, 0.05), C64::new(-4.0, 0.2), C64::new(12.0, 1.0)] {
        let reference = prob.solve_at(z, None, &SolverOptions::default()).unwrap();
        for _ in 0..5 {
            let init: Vec<C64> = (0..2)
                .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(0.0..1.0)))
                .collect();
            let s = prob.solve_at(z, Some(&init), &SolverOptions::default()).unwrap();
            for r in 0..2 {
                assert!((s.a[r] - reference.a[r]).norm() < 1e-8);
                assert!((s.b[r] - reference.b[r]).norm() < 1e-8);
            }
            assert!((s.m0 - reference.m0).norm() < 1e-8);
        }
    }
}

#[test]
fn single_point_track_matches_direct_solve() {
    let prob = mp_problem(400, 200);
    let track = continue_real_axis(&prob, &[50.0], 0.0, prob.spectral_scale()).unwrap();
    let direct = prob.solve_at(C64::new(50.0, 0.0), None, &SolverOptions::default()).unwrap();
    assert!((track.states[0].b[0] - direct.b[0]).norm() < 1e-12);
}

#[test]
fn real_axis_track_matches_marchenko_pastur() {
    let prob = mp_problem(400, 200);
    let mp = MarchenkoPastur { gamma: 0.5 };
    let lo = mp.edges().1 + 0.01;
    let grid: Vec<f64> = (0..300).map(|i| lo + 0.01 * i as f64).collect();
    let track = continue_real_axis(&prob, &grid, 0.0, 5.0).unwrap();
    for (x, s) in grid.iter().zip(&track.states) {
        assert_eq!(s.b[0].im, 0.0);
        assert!((s.b[0].re - mp.b_right(*x)).abs() < 1e-9, "λ = {x}");
    }
    let b: Vec<f64> = track.states.iter().map(|s| s.b[0].re).collect();
    assert!(b.windows(2).all(|w| w[1] >= w[0] - 1e-8));
    assert!(track.lipschitz.is_finite());
}

#[test]
fn reversed_grid_gives_same_values() {
    let (design, noise) = twin_design(50);
    let prob = problem(&design, &noise);
    let grid: Vec<f64> = (0..200).map(|i| 60.0 + 0.05 * i as f64).collect();
    let fwd = continue_real_axis(&prob, &grid, 0.0, prob.spectral_scale()).unwrap();
    let mut back = Vec::new();
    let mut prev: Option<Vec<C64>> = None;
    for &x in grid.iter().rev() {
        let s = match &prev {
            Some(a) => prob.solve_at(C64::new(x, 0.0), Some(a), &SolverOptions::default()).unwrap(),
            None => prob.solve_descending(x, 0.0, prob.spectral_scale()).unwrap(),
        };
        prev = Some(s.a.clone());
        back.push(s);
    }
    back.reverse();
    for (f, b) in fwd.states.iter().zip(&back) {
        for r in 0..2 {
            assert!((f.b[r] - b.b[r]).norm() < 1e-8);
        }
    }
}

#[test]
fn b_nondecreasing_off_support_on_one_way_layout() {
    let (design, noise) = twin_design(50);
    let prob = problem(&design, &noise);
    for (lo, hi) in [(40.0, 80.0), (-80.0, -40.0)] {
        let grid: Vec<f64> = (0..400).map(|i| lo + (hi - lo) * i as f64 / 399.0).collect();
        let track = continue_real_axis(&prob, &grid, 0.0, prob.spectral_scale()).unwrap();
        for r in 0..2 {
            let b: Vec<f64> = track.states.iter().map(|s| s.b[r].re).collect();
            assert!(b.windows(2).all(|w| w[1] >= w[0] - 1e-10), "component {r} on [{lo}, {hi}]");
        }
    }
}

#[test]
fn derivative_matches_marchenko_pastur() {
    let prob = mp_problem(400, 200);
    let mp = MarchenkoPastur { gamma: 0.5 };
    let grid: Vec<f64> = (0..50).map(|i| 3.5 + 0.1 * i as f64).collect();
    let track = continue_real_axis(&prob, &grid, 0.0, 5.0).unwrap();
    for x in [3.6, 4.0, 5.625, 8.0] {
        let d = derivative_b(&prob, &track, x).unwrap();
        let exact = mp.b_right_derivative(x);
        assert!((d[0] - exact).abs() < 1e-6 * exact.abs(), "λ = {x}: {} vs {exact}", d[0]);
    }
}

#[test]
fn derivative_richardson_step_halving() {
    let (design, noise) = twin_design(50);
    let prob = problem(&design, &noise);
    for x in [45.0, -50.0] {
        let near = prob.solve_descending(x, 0.0, prob.spectral_scale()).unwrap();
        let h = 1e-4 * x.abs();
        let d1 = derivative_b_with_step(&prob, x, &near, h).unwrap();
        let d2 = derivative_b_with_step(&prob, x, &near, h / 2.0).unwrap();
        for r in 0..2 {
            assert!((d1[r] - d2[r]).abs() < 1e-6 * d1[r].abs().max(1e-3), "{d1:?} {d2:?}");
        }
    }
}

#[test]
fn derivative_vanishes_without_noise() {
    let design = build_one_way_layout(10, 8, 2).unwrap();
    let noise = NoiseModel::isotropic(8, &[0.0, 0.0]).unwrap();
    let prob = problem(&design, &noise);
    let near = prob.solve_descending(3.0, 0.0, 10.0).unwrap();
    let d = derivative_b_at(&prob, 3.0, &near).unwrap();
    assert_eq!(d, vec![0.0, 0.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn stieltjes_value_in_upper_half_plane(re in -60.0f64..60.0, log_im in -3.0f64..1.5) {
        let (design, noise) = twin_design(20);
        let prob = problem(&design, &noise);
        let z = C64::new(re, 10f64.powf(log_im));
        let s = prob.solve_at(z, None, &SolverOptions::default()).unwrap();
        prop_assert!(s.m0.im > 0.0);
        prop_assert!(s.residual <= 1e-12 * f64::max(1.0, 1.0 / z.norm()));
        prop_assert!(s.a.iter().chain(&s.b).all(|x| x.im >= -1e-10));
    }
}

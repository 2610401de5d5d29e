//! Closed-form oracles and shared fixtures for the integration tests.
#![allow(dead_code)]

use manova_spectra::fixed_point::SpectralProblem;
use manova_spectra::model::{
    build_one_way_layout, build_sample_covariance, compute_interaction_matrix, sample_exponential_noise, Covariance,
    ModelDesign, NoiseModel, SignalModel,
};
use manova_spectra::spectrum::{density_on_grid, detect_support, uniform_grid, SupportSet};
use manova_spectra::C64;
use nalgebra::DVector;

/// Marchenko–Pastur law with aspect ratio `γ = p/n` and unit variance.
pub struct MarchenkoPastur {
    pub gamma: f64,
}

impl MarchenkoPastur {
    pub fn edges(&self) -> (f64, f64) {
        let s = self.gamma.sqrt();
        ((1.0 - s).powi(2), (1.0 + s).powi(2))
    }

    /// Root of `γ z m² − (1 − γ − z) m + 1 = 0` with `Im m > 0`.
    pub fn stieltjes(&self, z: C64) -> C64 {
        let g = self.gamma;
        let bq = -(C64::new(1.0 - g, 0.0) - z);
        let a = z * g;
        let disc = (bq * bq - a * 4.0).sqrt();
        let r1 = (-bq + disc) / (a * 2.0);
        let r2 = (-bq - disc) / (a * 2.0);
        if r1.im > r2.im {
            r1
        } else {
            r2
        }
    }

    /// Real Stieltjes value to the right of the bulk.
    pub fn stieltjes_right(&self, lambda: f64) -> f64 {
        let g = self.gamma;
        let c = 1.0 - g - lambda;
        (c + (c * c - 4.0 * g * lambda).sqrt()) / (2.0 * g * lambda)
    }

    pub fn stieltjes_right_derivative(&self, lambda: f64) -> f64 {
        let g = self.gamma;
        let m = self.stieltjes_right(lambda);
        -(g * m * m + m) / (2.0 * g * lambda * m - (1.0 - g - lambda))
    }

    /// `b(λ) = −1/(1 + γ m(λ))` for `F = Id`, `Σ̊ = Id`.
    pub fn b_right(&self, lambda: f64) -> f64 {
        -1.0 / (1.0 + self.gamma * self.stieltjes_right(lambda))
    }

    pub fn b_right_derivative(&self, lambda: f64) -> f64 {
        let m = self.stieltjes_right(lambda);
        self.gamma * self.stieltjes_right_derivative(lambda) / (1.0 + self.gamma * m).powi(2)
    }

    pub fn density(&self, lambda: f64) -> f64 {
        let (lo, hi) = self.edges();
        if lambda <= lo || lambda >= hi {
            return 0.0;
        }
        ((hi - lambda) * (lambda - lo)).sqrt() / (2.0 * std::f64::consts::PI * self.gamma * lambda)
    }
}

/// Single spike of strength `μ` on top of identity noise (`ℓ = 1 + μ`).
pub struct Bbp {
    pub gamma: f64,
    pub mu: f64,
}

impl Bbp {
    pub fn supercritical(&self) -> bool {
        self.mu > self.gamma.sqrt()
    }

    pub fn outlier(&self) -> f64 {
        let l = 1.0 + self.mu;
        l * (1.0 + self.gamma / (l - 1.0))
    }

    /// Squared cosine between the top sample eigenvector and the spike.
    pub fn squared_cosine(&self) -> f64 {
        let (g, m) = (self.gamma, self.mu);
        (1.0 - g / (m * m)) / (1.0 + g / m)
    }
}

pub fn mp_design(n: usize, p: usize) -> (ModelDesign, NoiseModel) {
    (build_sample_covariance(n, p).unwrap(), NoiseModel::isotropic(p, &[1.0]).unwrap())
}

pub fn problem(design: &ModelDesign, noise: &NoiseModel) -> SpectralProblem {
    SpectralProblem::new(&compute_interaction_matrix(design), noise).unwrap()
}

pub fn mp_problem(n: usize, p: usize) -> SpectralProblem {
    let (d, noise) = mp_design(n, p);
    problem(&d, &noise)
}

pub fn bbp_signal(p: usize, mu: f64) -> SignalModel {
    let mut g = DVector::zeros(p);
    g[0] = mu.sqrt();
    SignalModel::from_rows(1, p, &[(0, g)]).unwrap()
}

/// One-way layout with exponential-spectrum noise in both components, as in
/// the twin-study simulations (`n = 2 n₁`, `p = 2 n`).
pub fn twin_noise(p: usize) -> NoiseModel {
    let s1 = sample_exponential_noise(p, 4, 11).unwrap();
    let s2 = sample_exponential_noise(p, 4, 22).unwrap();
    NoiseModel::new(vec![s1, s2]).unwrap()
}

pub fn twin_design(n_pairs: usize) -> (ModelDesign, NoiseModel) {
    let p = 4 * n_pairs;
    (build_one_way_layout(n_pairs, p, 2).unwrap(), twin_noise(p))
}

pub fn basis(p: usize, j: usize, scale: f64) -> DVector<f64> {
    let mut v = DVector::zeros(p);
    v[j] = scale;
    v
}

/// `w = (e₁ + e₂ + e₃)/√3`, the second-component signal direction.
pub fn twin_w(p: usize) -> DVector<f64> {
    let mut w = DVector::zeros(p);
    for j in 0..3 {
        w[j] = 1.0 / 3f64.sqrt();
    }
    w
}

/// Signals `32, 16, 8` on `e₁..e₃` for component 1; `32 wwᵀ + 64 e₄e₄ᵀ` for
/// component 2.
pub fn twin_signal(p: usize) -> SignalModel {
    SignalModel::from_rows(
        2,
        p,
        &[
            (0, basis(p, 0, 32f64.sqrt())),
            (0, basis(p, 1, 16f64.sqrt())),
            (0, basis(p, 2, 8f64.sqrt())),
            (1, twin_w(p) * 32f64.sqrt()),
            (1, basis(p, 3, 8.0)),
        ],
    )
    .unwrap()
}

pub fn isotropic(p: usize, sigma2: &[f64]) -> NoiseModel {
    NoiseModel::new(sigma2.iter().map(|&s| Covariance::Diagonal(DVector::from_element(p, s))).collect()).unwrap()
}

/// Support at threshold 1e-5 read off a density grid at ε = 1e-8.
pub fn support_of(prob: &SpectralProblem, lo: f64, hi: f64, step: f64) -> SupportSet {
    let grid = uniform_grid(lo, hi, step).unwrap();
    detect_support(&density_on_grid(prob, &grid, 1e-8).unwrap(), 1e-5, 3)
}

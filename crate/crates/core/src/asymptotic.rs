//! Large-signal expansions for the two-spike vignette: spike `√μ₁ v₁` in the
//! target component, `√μ₂ v₂` in another, `ρ = ⟨v₁, v₂⟩`.
//!
//! ```text
//! b_r(λ) ≈ −1{r = target} − c_r/λ
//! λ_max ≈ μ₁ + c₁ + c₂μ₂ρ²/μ₁
//! λ_alias ≈ ±√(c₂μ₂)
//! wᵀ(α^{-1/2}u) ≈ (c₂μ₂/μ₁²) ρ √(1 − ρ²)
//! ```

use nalgebra::DVector;
use serde::Serialize;
use std::fmt::Write as _;

use crate::eigenvector::predict_alignment;
use crate::error::{Error, Result};
use crate::fixed_point::SpectralProblem;
use crate::model::{compute_interaction_matrix, InteractionMatrix, ModelDesign, NoiseModel, SignalModel};
use crate::outlier::{predict_outliers, ScanConfig};
use crate::spectrum::SupportSet;

pub const EXPANSION_SCHEMA: &str = "# schema_version=1 kind=expansion";

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionConstants {
    pub c: Vec<f64>,
    pub rho: f64,
    pub mu: Vec<f64>,
}

/// `c_r = Σ_t Tr[(U_rᵀBU_t)(U_tᵀBU_r)] · Tr Σ̊_t`.
pub fn compute_c(design: &ModelDesign, noise: &NoiseModel) -> Result<Vec<f64>> {
    compute_c_from_interaction(&compute_interaction_matrix(design), noise)
}

/// Same as `compute_c`, reading `U_rᵀBU_t = F_rt / √(n_r n_t)` off `F`.
pub fn compute_c_from_interaction(f: &InteractionMatrix, noise: &NoiseModel) -> Result<Vec<f64>> {
    let k = f.k();
    if noise.k() != k {
        return Err(Error::DimensionMismatch(format!(
            "design has {k} components but noise model has {}",
            noise.k()
        )));
    }
    let sizes = f.sizes();
    let traces = noise.traces();
    Ok((0..k)
        .map(|r| {
            (0..k)
                .map(|t| {
                    let block = f.block(r, t);
                    block.norm_squared() / (sizes[r] * sizes[t]) as f64 * traces[t]
                })
                .sum()
        })
        .collect())
}

/// `μ₁ + c₁ + c₂μ₂ρ²/μ₁`.
pub fn bias_expansion(mu1: f64, mu2: f64, rho: f64, c1: f64, c2: f64) -> Result<f64> {
    if !(mu1 > 0.0) {
        return Err(Error::InvalidArgument(format!("μ₁ must be positive, got {mu1}")));
    }
    Ok(mu1 + c1 + c2 * mu2 * rho * rho / mu1)
}

/// `(+√(c₂μ₂), −√(c₂μ₂))`.
pub fn alias_expansion(mu2: f64, c2: f64) -> Result<(f64, f64)> {
    let prod = c2 * mu2;
    if prod < 0.0 {
        return Err(Error::InvalidArgument(format!("c₂μ₂ = {prod} is negative")));
    }
    let s = prod.sqrt();
    Ok((s, -s))
}

/// `(c₂μ₂/μ₁²) ρ √(1 − ρ²)`.
pub fn eigenvector_bias_expansion(mu1: f64, mu2: f64, rho: f64, c2: f64) -> Result<f64> {
    if !(mu1 > 0.0) {
        return Err(Error::InvalidArgument(format!("μ₁ must be positive, got {mu1}")));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("|ρ| = {} leaves no residual direction", rho.abs())));
    }
    Ok(c2 * mu2 / (mu1 * mu1) * rho * (1.0 - rho * rho).sqrt())
}

/// `w ∝ (−ρ√μ₂, √μ₁)`, normalized so that `Γᵀw` is the unit vector
/// obtained by residualizing `v₁` out of `v₂`.
pub fn w_vector(mu1: f64, mu2: f64, rho: f64) -> Result<[f64; 2]> {
    if !(mu1 > 0.0 && mu2 > 0.0) {
        return Err(Error::InvalidArgument("w needs μ₁, μ₂ > 0".into()));
    }
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidArgument(format!("|ρ| = {} leaves no residual direction", rho.abs())));
    }
    let norm = (mu1 * mu2 * (1.0 - rho * rho)).sqrt();
    Ok([-rho * mu2.sqrt() / norm, mu1.sqrt() / norm])
}

/// Spike `√μ₁ e_i` in component `target` and `√μ₂ (ρ e_i + √(1−ρ²) e_j)` in
/// component `other`.
#[allow(clippy::too_many_arguments)]
pub fn vignette_signal(
    k: usize,
    p: usize,
    target: usize,
    other: usize,
    mu1: f64,
    mu2: f64,
    rho: f64,
    axes: (usize, usize),
) -> Result<SignalModel> {
    let (i, j) = axes;
    if i >= p || j >= p || i == j {
        return Err(Error::InvalidArgument(format!("vignette axes {axes:?} invalid for p = {p}")));
    }
    let mut v1 = DVector::zeros(p);
    v1[i] = mu1.sqrt();
    let mut v2 = DVector::zeros(p);
    v2[i] = mu2.sqrt() * rho;
    v2[j] = mu2.sqrt() * (1.0 - rho * rho).sqrt();
    let mut rows = Vec::new();
    if mu1 > 0.0 {
        rows.push((target, v1));
    }
    if mu2 > 0.0 {
        rows.push((other, v2));
    }
    SignalModel::from_rows(k, p, &rows)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpansionCheck {
    pub quantity: String,
    pub mu1: f64,
    pub mu2: f64,
    pub rho: f64,
    pub exact: f64,
    pub expansion: f64,
    pub relative_gap: f64,
}

fn check(quantity: &str, mu1: f64, mu2: f64, rho: f64, exact: f64, expansion: f64) -> ExpansionCheck {
    ExpansionCheck {
        quantity: quantity.into(),
        mu1,
        mu2,
        rho,
        exact,
        expansion,
        relative_gap: (exact - expansion).abs() / exact.abs().max(f64::MIN_POSITIVE),
    }
}

/// Compares the expansions with the exact pipeline for the vignette signal.
/// The vignette rows must be ordered (target spike, other spike).
pub fn check_vignette(
    problem: &SpectralProblem,
    signal: &SignalModel,
    support: &SupportSet,
    consts: &ExpansionConstants,
    target: usize,
    other: usize,
    config: &ScanConfig,
) -> Result<Vec<ExpansionCheck>> {
    let (mu1, mu2, rho) = (consts.mu[0], consts.mu[1], consts.rho);
    let (c1, c2) = (consts.c[target], consts.c[other]);
    let (roots, _) = predict_outliers(problem, signal, support, config)?;
    let locations: Vec<f64> = roots.roots.iter().map(|r| r.lambda).collect();
    let mut out = Vec::new();
    if mu1 > 0.0 {
        let top = roots
            .roots
            .iter()
            .filter(|r| r.multiplicity == 1 && !r.heuristic)
            .max_by(|a, b| a.lambda.total_cmp(&b.lambda))
            .ok_or_else(|| Error::Inconsistency("no simple root for the target spike".into()))?;
        out.push(check("largest_root", mu1, mu2, rho, top.lambda, bias_expansion(mu1, mu2, rho, c1, c2)?));
        if mu2 > 0.0 && rho.abs() < 1.0 {
            let pred = predict_alignment(problem, signal, top, &locations, roots.delta)?;
            let w = w_vector(mu1, mu2, rho)?;
            let proj = &pred.predicted_projection;
            // Fix the sign so that the v₁ component is positive.
            let sign = proj[0].signum();
            let exact = sign * (w[0] * proj[0] + w[1] * proj[1]);
            out.push(check(
                "eigenvector_bias",
                mu1,
                mu2,
                rho,
                exact,
                eigenvector_bias_expansion(mu1, mu2, rho, c2)?,
            ));
        }
    }
    if mu2 > 0.0 {
        let (plus, minus) = alias_expansion(mu2, c2)?;
        let nearest = |target: f64| {
            locations
                .iter()
                .cloned()
                .min_by(|a, b| (a - target).abs().total_cmp(&(b - target).abs()))
        };
        if mu1 == 0.0 {
            if let Some(x) = nearest(plus) {
                out.push(check("alias_positive", mu1, mu2, rho, x, plus));
            }
        }
        if let Some(x) = nearest(minus) {
            out.push(check("alias_negative", mu1, mu2, rho, x, minus));
        }
    }
    Ok(out)
}

/// `b_r(λ) + 1{r = target} + c_r/λ` for each `r`.
pub fn linearization_residual(
    problem: &SpectralProblem,
    c: &[f64],
    target: usize,
    lambda: f64,
) -> Result<Vec<f64>> {
    let s = problem.solve_descending(lambda, 0.0, problem.spectral_scale().max(lambda))?;
    Ok(s
        .b_real()
        .iter()
        .enumerate()
        .map(|(r, b)| b + if r == target { 1.0 } else { 0.0 } + c[r] / lambda)
        .collect())
}

/// Least-squares slope of `log|y|` against `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.abs().ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

pub fn checks_to_csv(checks: &[ExpansionCheck]) -> String {
    let mut s = String::new();
    writeln!(s, "{EXPANSION_SCHEMA}").unwrap();
    s.push_str("quantity,mu1,mu2,rho,exact,expansion,relative_gap\n");
    for c in checks {
        writeln!(
            s,
            "{},{},{},{},{:.10e},{:.10e},{:.6e}",
            c.quantity, c.mu1, c.mu2, c.rho, c.exact, c.expansion, c.relative_gap
        )
        .unwrap();
    }
    s
}

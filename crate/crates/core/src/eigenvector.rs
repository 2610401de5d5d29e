//! Predicted sample-eigenvector alignments `Γv̂ ≈ α^{-1/2}u` at simple
//! outliers, where `u ∈ ker T(λ)` and
//!
//! ```text
//! α = uᵀ(−diag_ℓ(b) Γ ∂_λ[(λ Id + b·Σ̊)⁻¹] Γᵀ diag_ℓ(b) + diag_ℓ(b′)) u.
//! ```

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fixed_point::{derivative_b_at, derivative_step, FixedPointState, SpectralProblem};
use crate::linalg::svd_ascending;
use crate::model::{Covariance, NoiseModel, SignalModel};
use crate::outlier::{diag_ell, evaluate_t, solve_real, OutlierEquationValue, PredictedOutlierSet, PredictedRoot};
use crate::C64;

const KERNEL_SMALLEST: f64 = 1e-6;
const KERNEL_SECOND: f64 = 1e-3;
const KERNEL_RESIDUAL: f64 = 1e-6;

pub const ALIGNMENT_SCHEMA: &str = "# schema_version=1 kind=alignment";

/// Right singular vector of the smallest singular value of `T`, with the
/// largest-magnitude entry made positive. Returns the vector and that pivot.
pub fn kernel_vector(value: &OutlierEquationValue) -> Result<(DVector<f64>, usize)> {
    let (sv, vecs) = svd_ascending(&value.t);
    if sv.is_empty() {
        return Err(Error::InvalidArgument("T(λ) is empty; there is no kernel".into()));
    }
    let second = sv.get(1).copied().unwrap_or(f64::INFINITY);
    if !(sv[0] < KERNEL_SMALLEST) || !(second > KERNEL_SECOND) {
        return Err(Error::Multiplicity {
            lambda: value.lambda,
            smallest: sv[0],
            second,
        });
    }
    let mut u: DVector<f64> = vecs.column(0).into_owned();
    let pivot = u.iamax();
    if u[pivot] < 0.0 {
        u = -u;
    }
    let residual = (&value.t * &u).norm();
    if residual > KERNEL_RESIDUAL {
        return Err(Error::Inconsistency(format!(
            "‖T u‖ = {residual:.3e} at λ = {}",
            value.lambda
        )));
    }
    Ok((u, pivot))
}

/// `α` with the resolvent derivative in the chain-rule form
/// `∂_λ R = −R(Id + b′·Σ̊)R`.
pub fn compute_alpha(
    problem: &SpectralProblem,
    signal: &SignalModel,
    state: &FixedPointState,
    b_prime: &[f64],
    u: &DVector<f64>,
) -> Result<f64> {
    let gamma = signal.stacked();
    let (_, n2) = problem
        .resolvent_forms(state.z, &state.b, &gamma, Some(b_prime))
        .ok_or(Error::NearSupport(state.z.re))?;
    let n2 = n2.expect("requested second form");
    let db = diag_ell(signal, &state.b_real());
    let dbp = diag_ell(signal, b_prime);
    let l = u.len();
    let mut alpha = 0.0;
    for i in 0..l {
        alpha += dbp[i] * u[i] * u[i];
        for j in 0..l {
            alpha += u[i] * db[i] * n2[(i, j)].re * db[j] * u[j];
        }
    }
    check_alpha(alpha, state.z.re)
}

fn check_alpha(alpha: f64, lambda: f64) -> Result<f64> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(alpha)
    } else {
        Err(Error::Inconsistency(format!("α = {alpha:e} ≤ 0 at λ = {lambda}")))
    }
}

/// The normalizer in the form `xᵀ(Id + b′·Σ̊ + Γᵀdiag_ℓ(b′)Γ)x` with
/// `x = (λ Id + b·Σ̊)⁻¹ Γᵀ diag_ℓ(b) u`, computed on dense `p`-vectors.
/// It agrees with `compute_alpha` because `Γx = −u` on the kernel.
pub fn alpha_isotropic_form(
    noise: &NoiseModel,
    signal: &SignalModel,
    state: &FixedPointState,
    b_prime: &[f64],
    u: &DVector<f64>,
) -> Result<f64> {
    let lambda = state.z.re;
    let b = state.b_real();
    let p = noise.p();
    let gamma = signal.stacked();
    let db = DVector::from_vec(diag_ell(signal, &b));
    let dbp = DVector::from_vec(diag_ell(signal, b_prime));
    let rhs = gamma.transpose() * db.component_mul(u);
    let all_diagonal = noise.components().iter().all(|c| matches!(c, Covariance::Diagonal(_)));
    let (x, mid_x) = if all_diagonal {
        let diag = |coef: &[f64], shift: f64| -> DVector<f64> {
            let mut d = DVector::from_element(p, shift);
            for (r, c) in noise.components().iter().enumerate() {
                if let Covariance::Diagonal(v) = c {
                    d += v * coef[r];
                }
            }
            d
        };
        let m = diag(&b, lambda);
        let x = rhs.component_div(&m);
        let mid = diag(b_prime, 1.0);
        let mid_x = mid.component_mul(&x);
        (x, mid_x)
    } else {
        let mut m = DMatrix::<f64>::identity(p, p) * lambda;
        let mut mid = DMatrix::<f64>::identity(p, p);
        for (r, c) in noise.components().iter().enumerate() {
            let dense = c.to_dense();
            m += &dense * b[r];
            mid += &dense * b_prime[r];
        }
        let x = m.lu().solve(&rhs).ok_or(Error::NearSupport(lambda))?;
        let mid_x = &mid * &x;
        (x, mid_x)
    };
    let gx = &gamma * &x;
    let alpha = x.dot(&mid_x) + gx.component_mul(&gx).dot(&dbp);
    check_alpha(alpha, lambda)
}

/// `α` with the whole quadratic form differenced:
/// `Γ ∂_λ[R] Γᵀ ≈ (N(λ+h) − N(λ−h)) / 2h`, each side a fresh solve.
pub fn alpha_finite_difference(
    problem: &SpectralProblem,
    signal: &SignalModel,
    state: &FixedPointState,
    u: &DVector<f64>,
    h: f64,
) -> Result<f64> {
    let lambda = state.z.re;
    let gamma = signal.stacked();
    let form = |x: f64| -> Result<(DMatrix<C64>, Vec<f64>)> {
        let s = solve_real(problem, x, Some(&state.a))?;
        let (n, _) = problem
            .resolvent_forms(s.z, &s.b, &gamma, None)
            .ok_or(Error::NearSupport(x))?;
        Ok((n, s.b_real()))
    };
    let (np, bp) = form(lambda + h)?;
    let (nm, bm) = form(lambda - h)?;
    let b_prime: Vec<f64> = bp.iter().zip(&bm).map(|(p, m)| (p - m) / (2.0 * h)).collect();
    let db = diag_ell(signal, &state.b_real());
    let dbp = diag_ell(signal, &b_prime);
    let l = u.len();
    let mut alpha = 0.0;
    for i in 0..l {
        alpha += dbp[i] * u[i] * u[i];
        for j in 0..l {
            let dn = (np[(i, j)].re - nm[(i, j)].re) / (2.0 * h);
            alpha -= u[i] * db[i] * dn * db[j] * u[j];
        }
    }
    check_alpha(alpha, lambda)
}

#[derive(Debug, Clone, Serialize)]
pub struct AlignmentPrediction {
    pub lambda: f64,
    pub u: Vec<f64>,
    pub alpha: f64,
    /// `α^{-1/2}u`, indexed like the rows of `Γ`.
    pub predicted_projection: Vec<f64>,
    /// `(component, spike)` of each row of `Γ`, both 0-based.
    pub rows: Vec<(usize, usize)>,
    /// Index of the entry of `u` made positive.
    pub sign_convention: usize,
    pub b: Vec<f64>,
    pub b_prime: Vec<f64>,
    /// Distance to the nearest other root.
    pub separation: f64,
    pub separation_warning: bool,
}

impl AlignmentPrediction {
    /// Predicted cosine `⟨γ_i/‖γ_i‖, v̂⟩` for row `i` of `Γ`.
    pub fn predicted_cosine(&self, signal: &SignalModel, i: usize) -> f64 {
        let (r, j) = self.rows[i];
        self.predicted_projection[i] / signal.component(r).row(j).norm()
    }
}

fn row_labels(signal: &SignalModel) -> Vec<(usize, usize)> {
    signal
        .ell()
        .iter()
        .enumerate()
        .flat_map(|(r, &l)| (0..l).map(move |j| (r, j)))
        .collect()
}

/// Alignment at one simple root. `others` are the remaining root locations,
/// used for the separation check against `delta`.
pub fn predict_alignment(
    problem: &SpectralProblem,
    signal: &SignalModel,
    root: &PredictedRoot,
    others: &[f64],
    delta: f64,
) -> Result<AlignmentPrediction> {
    let value = evaluate_t(problem, signal, &root.state)?;
    let (u, pivot) = kernel_vector(&value)?;
    let b_prime = derivative_b_at(problem, root.lambda, &root.state)?;
    let alpha = compute_alpha(problem, signal, &root.state, &b_prime, &u)?;
    let scale = alpha.powf(-0.5);
    let separation = others
        .iter()
        .filter(|&&x| x != root.lambda)
        .map(|x| (x - root.lambda).abs())
        .fold(f64::INFINITY, f64::min);
    Ok(AlignmentPrediction {
        lambda: root.lambda,
        u: u.iter().cloned().collect(),
        alpha,
        predicted_projection: u.iter().map(|x| x * scale).collect(),
        rows: row_labels(signal),
        sign_convention: pivot,
        b: root.state.b_real(),
        b_prime,
        separation,
        separation_warning: separation <= delta,
    })
}

/// Alignments for every simple, non-heuristic root, in root order.
pub fn predict_alignments(
    problem: &SpectralProblem,
    signal: &SignalModel,
    roots: &PredictedOutlierSet,
) -> Vec<Result<AlignmentPrediction>> {
    let locations: Vec<f64> = roots.roots.iter().map(|r| r.lambda).collect();
    roots
        .roots
        .par_iter()
        .filter(|r| r.multiplicity == 1 && !r.heuristic)
        .map(|r| predict_alignment(problem, signal, r, &locations, roots.delta))
        .collect()
}

/// Step used by `alpha_finite_difference` when the caller has no opinion.
pub fn default_alpha_step(lambda: f64) -> f64 {
    derivative_step(lambda)
}

pub fn alignments_to_csv(preds: &[AlignmentPrediction]) -> String {
    let l = preds.first().map_or(0, |p| p.u.len());
    let mut s = String::new();
    writeln!(s, "{ALIGNMENT_SCHEMA}").unwrap();
    s.push_str("lambda,alpha");
    for i in 1..=l {
        write!(s, ",u_{i}").unwrap();
    }
    for i in 1..=l {
        write!(s, ",projection_{i}").unwrap();
    }
    s.push_str(",separation_warning\n");
    for p in preds {
        write!(s, "{:.10},{:.12e}", p.lambda, p.alpha).unwrap();
        for x in p.u.iter().chain(&p.predicted_projection) {
            write!(s, ",{x:.12e}").unwrap();
        }
        writeln!(s, ",{}", p.separation_warning).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn value(t: DMatrix<f64>) -> OutlierEquationValue {
        OutlierEquationValue {
            lambda: 1.0,
            t,
            det_t: 0.0,
            smallest_singular: 0.0,
            second_singular: 0.0,
            imag_residue: 0.0,
        }
    }

    #[test]
    fn kernel_of_block_diagonal_matrix() {
        let t = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.7]);
        let (u, pivot) = kernel_vector(&value(t)).unwrap();
        assert_eq!(pivot, 0);
        assert_eq!(u, DVector::from_vec(vec![1.0, 0.0]));
        let t = DMatrix::from_row_slice(2, 2, &[-0.3, 0.0, 0.0, 0.0]);
        let (u, _) = kernel_vector(&value(t)).unwrap();
        assert_eq!(u, DVector::from_vec(vec![0.0, 1.0]));
    }

    #[test]
    fn kernel_sign_fixed_by_largest_entry() {
        let t = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        let (u, pivot) = kernel_vector(&value(t.clone())).unwrap();
        assert_eq!(pivot, 0);
        assert!(u[0] > 0.0 && u[1] < 0.0);
        assert!((&t * &u).norm() <= 1e-12);
    }

    #[test]
    fn degenerate_kernel_rejected() {
        let t = DMatrix::zeros(2, 2);
        assert!(matches!(kernel_vector(&value(t)), Err(Error::Multiplicity { .. })));
        let t = DMatrix::identity(2, 2);
        assert!(matches!(kernel_vector(&value(t)), Err(Error::Multiplicity { .. })));
    }
}

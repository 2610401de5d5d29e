//! Monte Carlo simulation of `Y = Σ_r U_r α_r` with
//! `α_r = √n_r Ξ_r Γ_r + E_r`, the MANOVA estimate `Σ̂ = YᵀBY`, and
//! comparison of its outliers with the predictions.

use faer::{Mat, Side};
use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::str::FromStr;

use crate::eigenvector::AlignmentPrediction;
use crate::error::{Error, Result};
use crate::model::{Covariance, ModelDesign, NoiseModel, SignalModel};
use crate::outlier::PredictedOutlierSet;
use crate::spectrum::SupportSet;

pub const OUTLIERS_SCHEMA: &str = "# schema_version=1 kind=empirical_outliers";
pub const HISTOGRAM_SCHEMA: &str = "# schema_version=1 kind=eigenvalue_histogram";

/// Law of the standardized signal coefficients `√n_r Ξ_r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XiDistribution {
    Gaussian,
    Rademacher,
}

impl FromStr for XiDistribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "rademacher" => Ok(Self::Rademacher),
            other => Err(Error::Config(format!("unknown xi distribution `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub replicates: usize,
    pub seed: u64,
    pub xi: XiDistribution,
    /// Empirical eigenvalues closer than this to the support are bulk.
    pub delta: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            replicates: 200,
            seed: 1,
            xi: XiDistribution::Gaussian,
            delta: 0.1,
        }
    }
}

/// What a random stream is used for within one replicate and component.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    Signal = 0,
    Noise = 1,
}

/// Independent ChaCha20 stream for `(seed, replicate, component, role)`.
/// Streams never depend on scheduling, so replicates run in any order.
pub fn stream(seed: u64, replicate: usize, component: usize, role: StreamRole) -> ChaCha20Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(replicate as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(component as u64).to_le_bytes());
    key[24..].copy_from_slice(&(role as u64).to_le_bytes());
    ChaCha20Rng::from_seed(key)
}

/// `α_r` (`n_r × p`): `Z Γ_r + G Σ̊_r^{1/2}` with `Z` i.i.d. unit-variance
/// `xi` entries (so `Ξ_r = Z/√n_r`) and `G` standard Gaussian.
pub fn simulate_alpha(
    n_r: usize,
    gamma_r: &DMatrix<f64>,
    noise_sqrt: &Covariance,
    xi: XiDistribution,
    signal_rng: &mut ChaCha20Rng,
    noise_rng: &mut ChaCha20Rng,
) -> DMatrix<f64> {
    let p = noise_sqrt.dim();
    let g = DMatrix::from_fn(n_r, p, |_, _| noise_rng.sample::<f64, _>(StandardNormal));
    let mut alpha = noise_sqrt.right_apply(&g);
    if gamma_r.nrows() > 0 {
        let z = DMatrix::from_fn(n_r, gamma_r.nrows(), |_, _| match xi {
            XiDistribution::Gaussian => signal_rng.sample::<f64, _>(StandardNormal),
            XiDistribution::Rademacher => {
                if signal_rng.gen::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
        });
        alpha += z * gamma_r;
    }
    alpha
}

/// One draw of `Y = Σ_r U_r α_r` (no fixed effects).
pub fn simulate_response(
    design: &ModelDesign,
    noise: &NoiseModel,
    signal: &SignalModel,
    config: &SimulationConfig,
    replicate: usize,
) -> DMatrix<f64> {
    let mut y = DMatrix::zeros(design.n(), design.p());
    for r in 0..design.k() {
        let mut srng = stream(config.seed, replicate, r, StreamRole::Signal);
        let mut nrng = stream(config.seed, replicate, r, StreamRole::Noise);
        let alpha = simulate_alpha(
            design.sizes()[r],
            signal.component(r),
            noise.sqrt_component(r),
            config.xi,
            &mut srng,
            &mut nrng,
        );
        let u = design.incidence(r);
        if u.nrows() == u.ncols() && *u == DMatrix::identity(u.nrows(), u.ncols()) {
            y += alpha;
        } else {
            y += to_nalgebra(&(to_faer(u) * to_faer(&alpha)));
        }
    }
    y
}

fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn to_nalgebra(m: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m.read(i, j))
}

/// `Σ̂ = YᵀBY`, symmetrized.
pub fn manova_estimate(y: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != y.nrows() || b.ncols() != y.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "B is {}x{} but Y has {} rows",
            b.nrows(),
            b.ncols(),
            y.nrows()
        )));
    }
    let yf = to_faer(y);
    let by = to_faer(b) * &yf;
    let s = yf.transpose() * by;
    let p = y.ncols();
    Ok(DMatrix::from_fn(p, p, |i, j| 0.5 * (s.read(i, j) + s.read(j, i))))
}

/// Eigenvalues ascending with the matching unit eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct Eigenpairs {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

/// Full dense symmetric eigendecomposition.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> Result<Eigenpairs> {
    let evd = to_faer(m).selfadjoint_eigendecomposition(Side::Lower);
    let s = evd.s().column_vector();
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    let values: Vec<f64> = (0..m.nrows()).map(|i| s.read(i)).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Inconsistency("non-finite eigenvalue of Σ̂".into()));
    }
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let u = evd.u();
    Ok(Eigenpairs {
        values: order.iter().map(|&i| values[i]).collect(),
        vectors: DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| u.read(i, order[j])),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalOutlier {
    pub lambda: f64,
    pub distance_to_support: f64,
    /// `Γv̂` for the unit eigenvector `v̂`, sign as returned by the solver.
    pub projection: Vec<f64>,
}

/// Eigenpairs with `dist(λ̂, supp) > δ`, sorted by descending eigenvalue.
pub fn extract_empirical_outliers(
    eig: &Eigenpairs,
    support: &SupportSet,
    delta: f64,
    gamma: &DMatrix<f64>,
) -> Vec<EmpiricalOutlier> {
    let mut out: Vec<EmpiricalOutlier> = eig
        .values
        .iter()
        .enumerate()
        .filter_map(|(j, &lambda)| {
            let d = support.distance(lambda);
            (d > delta).then(|| EmpiricalOutlier {
                lambda,
                distance_to_support: d,
                projection: (gamma * eig.vectors.column(j)).iter().cloned().collect(),
            })
        })
        .collect();
    out.sort_by(|a, b| b.lambda.total_cmp(&a.lambda));
    out
}

/// Flips `projection` so that it has nonnegative inner product with
/// `reference`.
pub fn sign_align(projection: &[f64], reference: &[f64]) -> Vec<f64> {
    let dot: f64 = projection.iter().zip(reference).map(|(a, b)| a * b).sum();
    if dot < 0.0 {
        projection.iter().map(|x| -x).collect()
    } else {
        projection.to_vec()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    /// All eigenvalues of `Σ̂`, ascending.
    pub eigenvalues: Vec<f64>,
    pub outliers: Vec<EmpiricalOutlier>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalSummary {
    pub config: SimulationConfig,
    pub replicates: Vec<ReplicateResult>,
    /// Replicates whose eigensolve failed; excluded from every statistic.
    pub failed: Vec<usize>,
    pub p: usize,
    /// Support used for the outlier cut.
    pub support: SupportSet,
}

impl EmpiricalSummary {
    pub fn outlier_counts(&self) -> Vec<usize> {
        self.replicates.iter().map(|r| r.outliers.len()).collect()
    }

    /// Average of `(#eigenvalues outside supp_δ − expected) / p`.
    pub fn mean_excess_outside(&self, expected: usize) -> f64 {
        let n = self.replicates.len().max(1) as f64;
        self.replicates
            .iter()
            .map(|r| (r.outliers.len() as f64 - expected as f64) / self.p as f64)
            .sum::<f64>()
            / n
    }

    pub fn outliers_to_csv(&self) -> String {
        let l = self
            .replicates
            .iter()
            .flat_map(|r| r.outliers.first())
            .map(|o| o.projection.len())
            .next()
            .unwrap_or(0);
        let mut s = String::new();
        writeln!(s, "{OUTLIERS_SCHEMA} seed={} delta={}", self.config.seed, self.config.delta).unwrap();
        s.push_str("replicate,rank,lambda,distance");
        for i in 1..=l {
            write!(s, ",projection_{i}").unwrap();
        }
        s.push('\n');
        for r in &self.replicates {
            for (rank, o) in r.outliers.iter().enumerate() {
                write!(s, "{},{},{:.10},{:.10}", r.replicate, rank, o.lambda, o.distance_to_support).unwrap();
                for x in &o.projection {
                    write!(s, ",{x:.10e}").unwrap();
                }
                s.push('\n');
            }
        }
        s
    }

    /// Counts of all pooled eigenvalues in `bins` equal bins over `[lo, hi)`;
    /// values outside are dropped.
    pub fn histogram(&self, lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64, usize)> {
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for r in &self.replicates {
            for &x in &r.eigenvalues {
                if x >= lo && x < hi {
                    counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
                }
            }
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
            .collect()
    }

    pub fn histogram_to_csv(&self, lo: f64, hi: f64, bins: usize) -> String {
        let mut s = String::new();
        writeln!(s, "{HISTOGRAM_SCHEMA} replicates={}", self.replicates.len()).unwrap();
        s.push_str("bin_lo,bin_hi,count\n");
        for (a, b, c) in self.histogram(lo, hi, bins) {
            writeln!(s, "{a:.10},{b:.10},{c}").unwrap();
        }
        s
    }
}

fn run_replicate(
    design: &ModelDesign,
    noise: &NoiseModel,
    signal: &SignalModel,
    support: &SupportSet,
    gamma: &DMatrix<f64>,
    config: &SimulationConfig,
    replicate: usize,
) -> Result<ReplicateResult> {
    let y = simulate_response(design, noise, signal, config, replicate);
    let sigma_hat = manova_estimate(&y, design.kernel())?;
    let eig = symmetric_eigen(&sigma_hat)?;
    let outliers = extract_empirical_outliers(&eig, support, config.delta, gamma);
    Ok(ReplicateResult {
        replicate,
        eigenvalues: eig.values,
        outliers,
    })
}

/// Runs all replicates in parallel; order and values do not depend on the
/// thread count.
pub fn simulate(
    design: &ModelDesign,
    noise: &NoiseModel,
    signal: &SignalModel,
    support: &SupportSet,
    config: &SimulationConfig,
) -> Result<EmpiricalSummary> {
    if config.replicates == 0 {
        return Err(Error::InvalidArgument("at least one replicate is required".into()));
    }
    if noise.p() != design.p() || signal.p() != design.p() || noise.k() != design.k() || signal.k() != design.k() {
        return Err(Error::DimensionMismatch("design, noise and signal disagree on p or k".into()));
    }
    let gamma = signal.stacked();
    let results: Vec<Result<ReplicateResult>> = (0..config.replicates)
        .into_par_iter()
        .map(|rep| run_replicate(design, noise, signal, support, &gamma, config, rep))
        .collect();
    let mut replicates = Vec::new();
    let mut failed = Vec::new();
    for (rep, res) in results.into_iter().enumerate() {
        match res {
            Ok(r) => replicates.push(r),
            Err(e) => {
                warn!("replicate {rep} failed: {e}");
                failed.push(rep);
            }
        }
    }
    Ok(EmpiricalSummary {
        config: config.clone(),
        replicates,
        failed,
        p: design.p(),
        support: support.clone(),
    })
}

/// Max absolute difference of the sorted multisets; infinite when their
/// sizes differ.
pub fn ordered_dist(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Pairs of `(predicted index, empirical index)`, taken greedily by
/// increasing distance. A pair is allowed only when no piece of the support
/// lies between its two values. Unlike sorted-order pairing, a missing root
/// and an extra edge eigenvalue do not shift every other pair by one.
pub fn match_outliers(predicted: &[f64], empirical: &[f64], support: &SupportSet) -> Vec<(usize, usize)> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in predicted.iter().enumerate() {
        for (j, e) in empirical.iter().enumerate() {
            if !support.separates(*p, *e) {
                pairs.push(((p - e).abs(), i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; predicted.len()];
    let mut used_e = vec![false; empirical.len()];
    let mut out = Vec::new();
    for (_, i, j) in pairs {
        if !used_p[i] && !used_e[j] {
            used_p[i] = true;
            used_e[j] = true;
            out.push((i, j));
        }
    }
    out.sort();
    out
}

fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct RootComparison {
    pub predicted: f64,
    pub predicted_projection: Option<Vec<f64>>,
    /// Replicates in which this root was matched.
    pub matched: usize,
    pub empirical_mean: f64,
    pub empirical_stderr: f64,
    pub relative_error: f64,
    /// Mean of `Γv̂` after sign alignment to the prediction (or to the first
    /// row when there is none).
    pub mean_projection: Vec<f64>,
    pub stderr_projection: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub roots: Vec<RootComparison>,
    /// Fraction of replicates whose outlier count equals the predicted count.
    pub count_agreement: f64,
    /// Mean ordered-dist over replicates with matching counts.
    pub mean_ordered_dist: f64,
    pub ordered_dist: Vec<f64>,
    pub mean_excess_outside: f64,
    pub failed_replicates: usize,
}

/// Matches each replicate's outliers with the predicted roots at distance
/// `> δ` from the support and accumulates per-root statistics.
pub fn compare(
    summary: &EmpiricalSummary,
    predicted: &PredictedOutlierSet,
    alignments: &[AlignmentPrediction],
) -> ComparisonReport {
    let targets = predicted.matched_multiset();
    let proj_of = |lambda: f64| {
        alignments
            .iter()
            .find(|a| a.lambda == lambda)
            .map(|a| a.predicted_projection.clone())
    };
    let l = summary
        .replicates
        .iter()
        .flat_map(|r| r.outliers.first())
        .map(|o| o.projection.len())
        .next()
        .unwrap_or(0);
    let mut lambdas: Vec<Vec<f64>> = vec![Vec::new(); targets.len()];
    let mut projections: Vec<Vec<Vec<f64>>> = vec![Vec::new(); targets.len()];
    let mut dists = Vec::new();
    for rep in &summary.replicates {
        let emp: Vec<f64> = rep.outliers.iter().map(|o| o.lambda).collect();
        dists.push(ordered_dist(&targets, &emp));
        for (i, j) in match_outliers(&targets, &emp, &summary.support) {
            lambdas[i].push(emp[j]);
            let raw = &rep.outliers[j].projection;
            let reference = proj_of(targets[i]).unwrap_or_else(|| {
                let mut e = vec![0.0; raw.len()];
                if let Some(x) = e.first_mut() {
                    *x = 1.0;
                }
                e
            });
            projections[i].push(sign_align(raw, &reference));
        }
    }
    let roots = targets
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let (mean, se) = mean_and_stderr(&lambdas[i]);
            let (mp, sp): (Vec<f64>, Vec<f64>) = (0..l)
                .map(|c| {
                    let col: Vec<f64> = projections[i].iter().map(|v| v[c]).collect();
                    mean_and_stderr(&col)
                })
                .unzip();
            RootComparison {
                predicted: lambda,
                predicted_projection: proj_of(lambda),
                matched: lambdas[i].len(),
                empirical_mean: mean,
                empirical_stderr: se,
                relative_error: (mean - lambda).abs() / lambda.abs(),
                mean_projection: mp,
                stderr_projection: sp,
            }
        })
        .collect();
    let finite: Vec<f64> = dists.iter().cloned().filter(|d| d.is_finite()).collect();
    let n = summary.replicates.len().max(1) as f64;
    ComparisonReport {
        roots,
        count_agreement: finite.len() as f64 / n,
        mean_ordered_dist: if finite.is_empty() {
            f64::INFINITY
        } else {
            finite.iter().sum::<f64>() / finite.len() as f64
        },
        ordered_dist: dists,
        mean_excess_outside: summary.mean_excess_outside(targets.len()),
        failed_replicates: summary.failed.len(),
    }
}

/// `simulate` followed by `compare`.
#[allow(clippy::too_many_arguments)]
pub fn run_experiment(
    design: &ModelDesign,
    noise: &NoiseModel,
    signal: &SignalModel,
    support: &SupportSet,
    predicted: &PredictedOutlierSet,
    alignments: &[AlignmentPrediction],
    config: &SimulationConfig,
) -> Result<(EmpiricalSummary, ComparisonReport)> {
    let summary = simulate(design, noise, signal, support, config)?;
    let report = compare(&summary, predicted, alignments);
    Ok((summary, report))
}

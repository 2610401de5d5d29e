//! Outlier locations from `det T(λ) = 0`, with
//! `T(λ) = Id + Γ(λ Id + b(λ)·Σ̊)⁻¹ Γᵀ diag_ℓ(b(λ))`.

use nalgebra::DMatrix;
use serde::Serialize;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fixed_point::{track_grid, FixedPointState, SolverOptions, SpectralProblem};
use crate::linalg::svd_ascending;
use crate::model::SignalModel;
use crate::spectrum::SupportSet;
use crate::C64;

pub const DEFAULT_SCAN_STEP: f64 = 0.01;
pub const DEFAULT_REFINE_TOL: f64 = 1e-9;
/// Imaginary residue of `T` tolerated on the real axis before it counts as
/// an error.
const IMAG_RESIDUE_TOL: f64 = 1e-8;
/// `σ_min(T)` below which an unsigned `|det T|` dip is reported as a
/// candidate double root.
const DOUBLE_ROOT_SINGULAR: f64 = 1e-6;
const GOLDEN_ITERS: usize = 60;

pub const SCAN_SCHEMA: &str = "# schema_version=1 kind=det_scan";
pub const ROOTS_SCHEMA: &str = "# schema_version=1 kind=outlier_roots";

#[derive(Debug, Clone, Serialize)]
pub struct OutlierEquationValue {
    pub lambda: f64,
    #[serde(skip)]
    pub t: DMatrix<f64>,
    pub det_t: f64,
    pub smallest_singular: f64,
    pub second_singular: f64,
    pub imag_residue: f64,
}

/// `diag_ℓ(v)`: each row of `Γ` gets the value of its component.
pub fn diag_ell(signal: &SignalModel, v: &[f64]) -> Vec<f64> {
    signal.row_components().into_iter().map(|r| v[r]).collect()
}

/// `T(λ)` at a converged real-axis state.
pub fn evaluate_t(
    problem: &SpectralProblem,
    signal: &SignalModel,
    state: &FixedPointState,
) -> Result<OutlierEquationValue> {
    let lambda = state.z.re;
    if state.z.im != 0.0 {
        return Err(Error::InvalidArgument(format!(
            "T(λ) needs a real-axis state, got Im z = {}",
            state.z.im
        )));
    }
    let l = signal.ell_plus();
    if l == 0 {
        // Empty matrix: det = 1, no singular values.
        return Ok(OutlierEquationValue {
            lambda,
            t: DMatrix::zeros(0, 0),
            det_t: 1.0,
            smallest_singular: 1.0,
            second_singular: 1.0,
            imag_residue: 0.0,
        });
    }
    let gamma = signal.stacked();
    let (n, _) = problem
        .resolvent_forms(state.z, &state.b, &gamma, None)
        .ok_or(Error::NearSupport(lambda))?;
    let db: Vec<C64> = signal.row_components().into_iter().map(|r| state.b[r]).collect();
    let mut imag_residue = 0.0_f64;
    let t = DMatrix::from_fn(l, l, |i, j| {
        let v = n[(i, j)] * db[j] + if i == j { 1.0 } else { 0.0 };
        imag_residue = imag_residue.max(v.im.abs());
        v.re
    });
    if !(imag_residue < IMAG_RESIDUE_TOL) {
        return Err(Error::Inconsistency(format!(
            "T({lambda}) has imaginary residue {imag_residue:.3e}"
        )));
    }
    if t.iter().any(|x| !x.is_finite()) {
        return Err(Error::NearSupport(lambda));
    }
    let det_t = t.clone().lu().determinant();
    let (sv, _) = svd_ascending(&t);
    Ok(OutlierEquationValue {
        lambda,
        det_t,
        smallest_singular: sv[0],
        second_singular: sv.get(1).copied().unwrap_or(f64::INFINITY),
        imag_residue,
        t,
    })
}

/// Real-axis solve at `lambda`, warm-started from `near` when given and
/// falling back to descent from the upper half-plane.
pub fn solve_real(problem: &SpectralProblem, lambda: f64, near: Option<&[C64]>) -> Result<FixedPointState> {
    if let Some(a) = near {
        if let Ok(s) = problem.solve_at(C64::new(lambda, 0.0), Some(a), &SolverOptions::default()) {
            return Ok(s);
        }
    }
    problem.solve_descending(lambda, 0.0, problem.spectral_scale())
}

pub fn evaluate_t_at(
    problem: &SpectralProblem,
    signal: &SignalModel,
    lambda: f64,
    near: Option<&[C64]>,
) -> Result<(OutlierEquationValue, FixedPointState)> {
    let state = solve_real(problem, lambda, near)?;
    Ok((evaluate_t(problem, signal, &state)?, state))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScanConfig {
    pub step: f64,
    /// Distance to the support below which roots carry `inside_delta`.
    pub delta: f64,
    /// Grid points closer than `delta · scan_padding_fraction` to the support
    /// are not scanned.
    pub scan_padding_fraction: f64,
    /// Overrides the default half-width beyond the support.
    pub span: Option<f64>,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            step: DEFAULT_SCAN_STEP,
            delta: crate::spectrum::DEFAULT_DELTA,
            scan_padding_fraction: 0.25,
            span: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetScan {
    pub grid: Vec<f64>,
    pub values: Vec<Option<OutlierEquationValue>>,
    pub states: Vec<Option<FixedPointState>>,
    pub domain: (f64, f64),
    pub config: ScanConfig,
}

impl DetScan {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{SCAN_SCHEMA} step={} delta={} domain={},{}",
            self.config.step, self.config.delta, self.domain.0, self.domain.1
        )
        .unwrap();
        s.push_str("lambda,detT,smallest_singular\n");
        for (x, v) in self.grid.iter().zip(&self.values) {
            match v {
                Some(v) => writeln!(s, "{x:.10},{:.12e},{:.12e}", v.det_t, v.smallest_singular).unwrap(),
                None => writeln!(s, "{x:.10},,").unwrap(),
            }
        }
        s
    }
}

/// `[supp_min − span, supp_max + span]`, with `span = max(5, 2·‖Σ‖)` for
/// `‖Σ‖ ≈ Σ_r ‖Γ_r‖_F² + max |supp|`.
pub fn scan_domain(signal: &SignalModel, support: &SupportSet, span: Option<f64>) -> (f64, f64) {
    let lo = support.min().unwrap_or(0.0);
    let hi = support.max().unwrap_or(0.0);
    let signal_norm: f64 = (0..signal.k()).map(|r| signal.component(r).norm_squared()).sum();
    let span = span.unwrap_or_else(|| (2.0 * (signal_norm + lo.abs().max(hi.abs()))).max(5.0));
    (lo - span, hi + span)
}

/// Evaluates `T` on the scan grid. The grid is split into maximal runs that
/// avoid the padded support, and each run is continued independently.
pub fn scan_det(
    problem: &SpectralProblem,
    signal: &SignalModel,
    support: &SupportSet,
    config: &ScanConfig,
) -> Result<DetScan> {
    if !(config.step > 0.0) {
        return Err(Error::InvalidArgument(format!("scan step must be positive, got {}", config.step)));
    }
    let domain = scan_domain(signal, support, config.span);
    let n = ((domain.1 - domain.0) / config.step).round() as usize;
    let pad = config.delta * config.scan_padding_fraction;
    let grid: Vec<f64> = (0..=n)
        .map(|i| domain.0 + i as f64 * config.step)
        .filter(|&x| support.distance(x) >= pad)
        .collect();
    scan_det_on_grid(problem, signal, support, &grid, config, domain)
}

pub fn scan_det_on_grid(
    problem: &SpectralProblem,
    signal: &SignalModel,
    support: &SupportSet,
    grid: &[f64],
    config: &ScanConfig,
    domain: (f64, f64),
) -> Result<DetScan> {
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("scan grid must be strictly increasing".into()));
    }
    let warm = problem.spectral_scale();
    let mut values = Vec::with_capacity(grid.len());
    let mut states = Vec::with_capacity(grid.len());
    for run in off_support_runs(grid, support) {
        let tracked = track_grid(problem, &grid[run.0..run.1], 0.0, warm);
        for res in tracked {
            match res.and_then(|s| evaluate_t(problem, signal, &s).map(|v| (v, s))) {
                Ok((v, s)) => {
                    values.push(Some(v));
                    states.push(Some(s));
                }
                Err(_) => {
                    values.push(None);
                    states.push(None);
                }
            }
        }
    }
    Ok(DetScan {
        grid: grid.to_vec(),
        values,
        states,
        domain,
        config: *config,
    })
}

/// Maximal index ranges of consecutive grid points with no support interval
/// between them.
fn off_support_runs(grid: &[f64], support: &SupportSet) -> Vec<(usize, usize)> {
    let mut runs = Vec::new();
    let mut start = 0;
    for i in 1..=grid.len() {
        let split = i == grid.len()
            || support
                .intervals
                .iter()
                .any(|&(lo, hi)| grid[i - 1] < hi && grid[i] > lo);
        if split {
            if i > start {
                runs.push((start, i));
            }
            start = i;
        }
    }
    runs
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictedRoot {
    pub lambda: f64,
    pub multiplicity: usize,
    /// Closer than `δ` to the support; no sample eigenvalue is predicted to match it.
    pub inside_delta: bool,
    /// Even-multiplicity candidate from a `|det T|` dip without a sign change.
    pub heuristic: bool,
    pub distance_to_support: f64,
    pub smallest_singular: f64,
    pub second_singular: f64,
    #[serde(skip)]
    pub state: FixedPointState,
}

impl PredictedRoot {
    pub fn flag(&self) -> &'static str {
        match (self.heuristic, self.inside_delta) {
            (false, false) => "ok",
            (false, true) => "inside_delta",
            (true, false) => "candidate_double",
            (true, true) => "candidate_double+inside_delta",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictedOutlierSet {
    pub roots: Vec<PredictedRoot>,
    pub step: f64,
    pub delta: f64,
    pub domain: (f64, f64),
    pub refine_tol: f64,
    pub warnings: Vec<String>,
}

impl PredictedOutlierSet {
    /// Root locations with multiplicity, ascending.
    pub fn multiset(&self) -> Vec<f64> {
        self.roots
            .iter()
            .flat_map(|r| std::iter::repeat(r.lambda).take(r.multiplicity))
            .collect()
    }

    /// Roots at distance `> δ` from the support. These are the ones expected
    /// to appear as sample outliers.
    pub fn matched_multiset(&self) -> Vec<f64> {
        self.roots
            .iter()
            .filter(|r| !r.inside_delta)
            .flat_map(|r| std::iter::repeat(r.lambda).take(r.multiplicity))
            .collect()
    }

    pub fn positive(&self) -> usize {
        self.multiset().iter().filter(|&&x| x > 0.0).count()
    }

    pub fn negative(&self) -> usize {
        self.multiset().iter().filter(|&&x| x < 0.0).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{ROOTS_SCHEMA} step={} delta={} refine_tol={:e}",
            self.step, self.delta, self.refine_tol
        )
        .unwrap();
        s.push_str("lambda,multiplicity,flag\n");
        for r in &self.roots {
            writeln!(s, "{:.10},{},{}", r.lambda, r.multiplicity, r.flag()).unwrap();
        }
        s
    }
}

/// Refines sign changes of `det T` by bisection and reports unsigned
/// `|det T|` dips with `σ_min(T) < 1e-6` as candidate double roots.
pub fn find_roots(
    problem: &SpectralProblem,
    signal: &SignalModel,
    support: &SupportSet,
    scan: &DetScan,
    refine_tol: f64,
) -> Result<PredictedOutlierSet> {
    let mut roots = Vec::new();
    let mut warnings = Vec::new();
    let n = scan.grid.len();
    let adjacent = |i: usize| -> bool {
        // Consecutive scan points with no support (or skipped padding) between.
        (scan.grid[i + 1] - scan.grid[i]) <= 1.5 * scan.config.step
            && !support
                .intervals
                .iter()
                .any(|&(lo, hi)| scan.grid[i] < hi && scan.grid[i + 1] > lo)
    };
    let push = |roots: &mut Vec<PredictedRoot>, v: OutlierEquationValue, s: FixedPointState, mult, heuristic| {
        let d = support.distance(v.lambda);
        roots.push(PredictedRoot {
            lambda: v.lambda,
            multiplicity: mult,
            inside_delta: d < scan.config.delta,
            heuristic,
            distance_to_support: d,
            smallest_singular: v.smallest_singular,
            second_singular: v.second_singular,
            state: s,
        });
    };
    for i in 0..n {
        let Some(vi) = &scan.values[i] else { continue };
        if vi.det_t == 0.0 {
            push(&mut roots, vi.clone(), scan.states[i].clone().unwrap(), 1, false);
            continue;
        }
        if i + 1 < n && adjacent(i) {
            if let Some(vj) = &scan.values[i + 1] {
                if vj.det_t != 0.0 && vi.det_t.signum() != vj.det_t.signum() {
                    let (v, s) = bisect(
                        problem,
                        signal,
                        (scan.grid[i], vi.det_t, scan.states[i].as_ref().unwrap()),
                        (scan.grid[i + 1], scan.states[i + 1].as_ref().unwrap()),
                        refine_tol,
                    )?;
                    push(&mut roots, v, s, 1, false);
                    continue;
                }
            }
        }
        if i > 0 && i + 1 < n && adjacent(i - 1) && adjacent(i) {
            if let (Some(vl), Some(vr)) = (&scan.values[i - 1], &scan.values[i + 1]) {
                let same_sign = vl.det_t.signum() == vi.det_t.signum() && vr.det_t.signum() == vi.det_t.signum();
                if same_sign && vi.det_t.abs() < vl.det_t.abs() && vi.det_t.abs() <= vr.det_t.abs() {
                    let near = scan.states[i].as_ref().unwrap();
                    if let Ok((v, s)) = golden_min(problem, signal, scan.grid[i - 1], scan.grid[i + 1], near) {
                        if v.smallest_singular < DOUBLE_ROOT_SINGULAR {
                            push(&mut roots, v, s, 2, true);
                        }
                    }
                }
            }
        }
    }
    roots.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
    let total: usize = roots.iter().map(|r| r.multiplicity).sum();
    if total > 2 * signal.ell_plus() {
        warnings.push(format!(
            "{total} roots exceed the sanity cap 2ℓ₊ = {}",
            2 * signal.ell_plus()
        ));
    }
    for r in &roots {
        if r.inside_delta {
            warnings.push(format!(
                "root {:.6} lies within δ = {} of the support",
                r.lambda, scan.config.delta
            ));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(PredictedOutlierSet {
        roots,
        step: scan.config.step,
        delta: scan.config.delta,
        domain: scan.domain,
        refine_tol,
        warnings,
    })
}

fn bisect(
    problem: &SpectralProblem,
    signal: &SignalModel,
    left: (f64, f64, &FixedPointState),
    right: (f64, &FixedPointState),
    tol: f64,
) -> Result<(OutlierEquationValue, FixedPointState)> {
    let (mut lo, mut det_lo, s_lo) = left;
    let (mut hi, s_hi) = right;
    let mut a_lo = s_lo.a.clone();
    let mut a_hi = s_hi.a.clone();
    let mut best: Option<(OutlierEquationValue, FixedPointState)> = None;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let t = 0.5;
        let init: Vec<C64> = a_lo.iter().zip(&a_hi).map(|(x, y)| x + (y - x) * t).collect();
        let (v, s) = evaluate_t_at(problem, signal, mid, Some(&init))?;
        if v.det_t == 0.0 {
            return Ok((v, s));
        }
        if v.det_t.signum() == det_lo.signum() {
            lo = mid;
            det_lo = v.det_t;
            a_lo = s.a.clone();
        } else {
            hi = mid;
            a_hi = s.a.clone();
        }
        best = Some((v, s));
    }
    let mid = 0.5 * (lo + hi);
    let init: Vec<C64> = a_lo.iter().zip(&a_hi).map(|(x, y)| (x + y) * 0.5).collect();
    match evaluate_t_at(problem, signal, mid, Some(&init)) {
        Ok(r) => Ok(r),
        Err(e) => best.ok_or(e),
    }
}

/// Golden-section minimization of `|det T|` on `[lo, hi]`.
fn golden_min(
    problem: &SpectralProblem,
    signal: &SignalModel,
    mut lo: f64,
    mut hi: f64,
    near: &FixedPointState,
) -> Result<(OutlierEquationValue, FixedPointState)> {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let a = near.a.clone();
    let eval = |x: f64| evaluate_t_at(problem, signal, x, Some(&a));
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = eval(x1)?;
    let mut f2 = eval(x2)?;
    for _ in 0..GOLDEN_ITERS {
        if hi - lo < DEFAULT_REFINE_TOL {
            break;
        }
        if f1.0.det_t.abs() < f2.0.det_t.abs() {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = eval(x1)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = eval(x2)?;
        }
    }
    Ok(if f1.0.det_t.abs() < f2.0.det_t.abs() { f1 } else { f2 })
}

/// Full pipeline: scan and refine.
pub fn predict_outliers(
    problem: &SpectralProblem,
    signal: &SignalModel,
    support: &SupportSet,
    config: &ScanConfig,
) -> Result<(PredictedOutlierSet, DetScan)> {
    let scan = scan_det(problem, signal, support, config)?;
    let roots = find_roots(problem, signal, support, &scan, DEFAULT_REFINE_TOL)?;
    Ok((roots, scan))
}

//! Bulk density of `μ₀` by Stieltjes inversion, `ρ(λ) ≈ π⁻¹ Im m₀(λ + iε)`,
//! and numerical delimitation of its support.

use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fixed_point::{track_grid, SpectralProblem};

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_GRID_STEP: f64 = 0.01;
pub const DEFAULT_THRESHOLD: f64 = 1e-5;
pub const DEFAULT_MIN_GAP: usize = 3;
pub const DEFAULT_DELTA: f64 = 0.1;
/// Negative `Im m₀ / π` beyond this magnitude is treated as a solver fault.
pub const MAX_CLAMP: f64 = 1e-6;
/// Grid points per independently continued chunk. Fixed so that results do
/// not depend on the thread count.
const CHUNK: usize = 400;
/// Point masses at 0 below this are not reported as part of the support.
const MIN_ATOM_MASS: f64 = 1e-6;

pub const DENSITY_SCHEMA: &str = "# schema_version=1 kind=density";
pub const SUPPORT_SCHEMA: &str = "# schema_version=1 kind=support";

/// `n + 1` equispaced points from `lo` to `hi` (inclusive, up to rounding of
/// `(hi − lo) / step`).
pub fn uniform_grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(hi >= lo) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "invalid grid [{lo}, {hi}] with step {step}"
        )));
    }
    let n = ((hi - lo) / step).round() as usize;
    Ok((0..=n).map(|i| lo + i as f64 * step).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct SpectralDensity {
    pub grid: Vec<f64>,
    /// `None` where the solver failed; such points are never interpolated.
    pub density: Vec<Option<f64>>,
    pub epsilon: f64,
    /// Trapezoid integral over intervals with both endpoints present, plus
    /// `atom_mass`.
    pub mass_estimate: f64,
    /// Point mass of `μ₀` at 0, from rank deficiency of `Σ̂` or from
    /// coordinates on which every noise covariance vanishes. It is not part
    /// of `density`.
    pub atom_mass: f64,
    pub max_clamp: f64,
}

impl SpectralDensity {
    pub fn missing(&self) -> usize {
        self.density.iter().filter(|d| d.is_none()).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{DENSITY_SCHEMA} epsilon={:e} atom_mass={}", self.epsilon, self.atom_mass).unwrap();
        s.push_str("lambda,density\n");
        for (x, d) in self.grid.iter().zip(&self.density) {
            match d {
                Some(d) => writeln!(s, "{x:.10},{d:.12e}").unwrap(),
                None => writeln!(s, "{x:.10},").unwrap(),
            }
        }
        s
    }
}

/// Point mass of `μ₀` at 0 as `lim η Im m₀(iη)`, from two heights with the
/// linear term `π ρ(0) η` of any continuous density extrapolated away.
pub fn zero_atom_mass(problem: &SpectralProblem) -> Result<f64> {
    if problem.null_dimension() == problem.p() {
        return Ok(1.0);
    }
    let scale = problem.spectral_scale();
    let eta = 1e-6 * scale;
    let at = |h: f64| -> Result<f64> { Ok(h * problem.solve_descending(0.0, h, scale)?.m0.im) };
    let (m1, m2) = (at(eta)?, at(10.0 * eta)?);
    let mass = ((10.0 * m1 - m2) / 9.0).clamp(0.0, 1.0);
    Ok(if mass < 1e-10 { 0.0 } else { mass })
}

/// Evaluates the density on `grid` at height `epsilon`.
pub fn density_on_grid(problem: &SpectralProblem, grid: &[f64], epsilon: f64) -> Result<SpectralDensity> {
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("density grid must be strictly increasing".into()));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let warm = problem.spectral_scale();
    let chunks: Vec<&[f64]> = grid.chunks(CHUNK).collect();
    let atom_scale = problem.null_dimension() as f64 / problem.p() as f64;
    let per_chunk: Vec<Vec<Option<f64>>> = chunks
        .par_iter()
        .map(|chunk| {
            track_grid(problem, chunk, epsilon, warm)
                .into_iter()
                .zip(chunk.iter())
                .map(|(res, &x)| {
                    res.ok().map(|s| {
                        // Null coordinates contribute ε/(π(x² + ε²)) exactly;
                        // remove it. Other atoms at 0 are not picked up by the
                        // continuation and are measured separately.
                        let atom = atom_scale * epsilon / (x * x + epsilon * epsilon);
                        (s.m0.im - atom) / std::f64::consts::PI
                    })
                })
                .collect()
        })
        .collect();
    let raw: Vec<Option<f64>> = per_chunk.into_iter().flatten().collect();
    let mut max_clamp = 0.0_f64;
    let density: Vec<Option<f64>> = raw
        .iter()
        .map(|d| {
            d.map(|v| {
                if v < 0.0 {
                    max_clamp = max_clamp.max(-v);
                }
                v.max(0.0)
            })
        })
        .collect();
    if max_clamp > MAX_CLAMP {
        return Err(Error::Inconsistency(format!(
            "density clamp {max_clamp:.3e} exceeds {MAX_CLAMP:e}"
        )));
    }
    let mut integral = 0.0;
    for i in 1..grid.len() {
        if let (Some(l), Some(r)) = (density[i - 1], density[i]) {
            integral += 0.5 * (l + r) * (grid[i] - grid[i - 1]);
        }
    }
    let missing = density.iter().filter(|d| d.is_none()).count();
    if missing > 0 {
        log::warn!("density: {missing} of {} grid points failed to converge", grid.len());
    }
    let atom_mass = zero_atom_mass(problem)?.max(atom_scale);
    Ok(SpectralDensity {
        grid: grid.to_vec(),
        density,
        epsilon,
        mass_estimate: integral + atom_mass,
        atom_mass,
        max_clamp,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportSet {
    pub intervals: Vec<(f64, f64)>,
    pub delta: f64,
    pub threshold: f64,
    pub min_gap: usize,
}

impl SupportSet {
    pub fn empty(delta: f64) -> Self {
        Self {
            intervals: Vec::new(),
            delta,
            threshold: DEFAULT_THRESHOLD,
            min_gap: DEFAULT_MIN_GAP,
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Distance from `x` to the support (0 inside; infinite if empty).
    pub fn distance(&self, x: f64) -> f64 {
        self.intervals
            .iter()
            .map(|&(lo, hi)| {
                if x < lo {
                    lo - x
                } else if x > hi {
                    x - hi
                } else {
                    0.0
                }
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Membership in `supp_δ = {x : dist(x, supp) < δ}`.
    /// Whether some interval lies between `a` and `b`.
    pub fn separates(&self, a: f64, b: f64) -> bool {
        let (lo, hi) = (a.min(b), a.max(b));
        self.intervals.iter().any(|&(l, h)| l < hi && h > lo)
    }

    pub fn contains_delta(&self, x: f64) -> bool {
        self.distance(x) < self.delta
    }

    pub fn min(&self) -> Option<f64> {
        self.intervals.first().map(|i| i.0)
    }

    pub fn max(&self) -> Option<f64> {
        self.intervals.last().map(|i| i.1)
    }

    pub fn total_length(&self) -> f64 {
        self.intervals.iter().map(|(lo, hi)| hi - lo).sum()
    }

    /// Length of the intersection of the two unions of intervals.
    pub fn overlap_length(&self, other: &SupportSet) -> f64 {
        let mut total = 0.0;
        for &(a, b) in &self.intervals {
            for &(c, d) in &other.intervals {
                total += (b.min(d) - a.max(c)).max(0.0);
            }
        }
        total
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{SUPPORT_SCHEMA} threshold={:e} min_gap={} delta={}",
            self.threshold, self.min_gap, self.delta
        )
        .unwrap();
        s.push_str("lo,hi\n");
        for (lo, hi) in &self.intervals {
            writeln!(s, "{lo:.10},{hi:.10}").unwrap();
        }
        s
    }
}

/// Maximal runs of grid points with density above `threshold`, merged when
/// fewer than `min_gap` points separate them, each padded outward by one
/// grid step. Missing points count as support since nothing certifies them
/// as outside it. An atom at 0 adds `[−h, h]` for the grid step `h`.
pub fn detect_support(sd: &SpectralDensity, threshold: f64, min_gap: usize) -> SupportSet {
    let n = sd.grid.len();
    let inside: Vec<bool> = sd.density.iter().map(|d| d.map_or(true, |v| v > threshold)).collect();
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    while i < n {
        if inside[i] {
            let start = i;
            while i + 1 < n && inside[i + 1] {
                i += 1;
            }
            match runs.last_mut() {
                Some(last) if start - last.1 - 1 < min_gap => last.1 = i,
                _ => runs.push((start, i)),
            }
        }
        i += 1;
    }
    let step = |j: usize| -> f64 {
        if n < 2 {
            0.0
        } else if j + 1 < n {
            sd.grid[j + 1] - sd.grid[j]
        } else {
            sd.grid[j] - sd.grid[j - 1]
        }
    };
    let mut intervals: Vec<(f64, f64)> = runs
        .into_iter()
        .map(|(a, b)| {
            let lo = if a > 0 { sd.grid[a - 1] } else { sd.grid[a] - step(a) };
            let hi = if b + 1 < n { sd.grid[b + 1] } else { sd.grid[b] + step(b) };
            (lo, hi)
        })
        .collect();
    if sd.atom_mass > MIN_ATOM_MASS {
        let h = if n >= 2 { sd.grid[1] - sd.grid[0] } else { 0.0 };
        intervals.push((-h, h));
        intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    // Padding can make neighbouring intervals touch; keep them disjoint.
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(intervals.len());
    for iv in intervals.drain(..) {
        match merged.last_mut() {
            Some(last) if iv.0 <= last.1 => last.1 = last.1.max(iv.1),
            _ => merged.push(iv),
        }
    }
    SupportSet {
        intervals: merged,
        delta: DEFAULT_DELTA,
        threshold,
        min_gap,
    }
}

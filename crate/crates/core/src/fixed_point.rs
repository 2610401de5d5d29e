//! Solver for the coupled fixed-point system defining the deterministic
//! equivalent of `Σ̂ = YᵀBY`:
//!
//! ```text
//! a_r = −n_r⁻¹ Tr((z Id + b·Σ̊)⁻¹ Σ̊_r)
//! b_r = −n_r⁻¹ Tr_r((Id + F diag_n(a))⁻¹ F)
//! m₀  = −p⁻¹ Tr((z Id + b·Σ̊)⁻¹)
//! ```
//!
//! Both traces are evaluated blockwise. `F` and the stacked noise matrices are
//! split into the connected components of their sparsity graphs, and
//! components of `F` that are bitwise identical (same entries, same component
//! labels) are evaluated once and weighted by their multiplicity. A balanced
//! one-way layout collapses to a single 3×3 block this way; designs without
//! such structure fall back to one dense block.
//!
//! The iteration is damped Picard on `a` with a Newton step on the `k`-dimensional
//! map `a ↦ a − G(H(a))` tried first at every iteration. Picard alone contracts
//! like `1 − O(Im z)` on the support, which is useless at `Im z = 1e-8`.

use nalgebra::DMatrix;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::linalg::{connected_components, solve_complex};
use crate::model::{Covariance, InteractionMatrix, NoiseModel};
use crate::C64;

const F_DROP_TOL: f64 = 1e-14;
const DEFAULT_MAX_ITER: usize = 10_000;
const DEFAULT_TOL: f64 = 1e-12;
const DAMPING_FLOOR: f64 = 0.05;
const BRANCH_TOL: f64 = 1e-12;
const DESCENT_STEPS: usize = 20;
const MAX_SUBDIVISIONS: usize = 12;
/// Imaginary part (relative) above which a point reached by shrinking
/// `Im z → 0` is declared to lie on the support.
const ON_SUPPORT_IMAG: f64 = 1e-6;
const MONOTONE_SLACK: f64 = 1e-8;

#[derive(Debug, Clone)]
struct FBlock {
    weight: f64,
    labels: Vec<usize>,
    f: DMatrix<C64>,
}

#[derive(Debug, Clone)]
struct DenseNoiseBlock {
    mats: Vec<DMatrix<C64>>,
    coords: Vec<usize>,
}

/// Precomputed, immutable description of one fixed-point system.
#[derive(Debug, Clone)]
pub struct SpectralProblem {
    k: usize,
    p: usize,
    sizes: Vec<f64>,
    f_blocks: Vec<FBlock>,
    scalar_coords: Vec<usize>,
    /// `scalar_values[c * k + r]` is `(Σ̊_r)_{cc}` for the c-th scalar coordinate.
    scalar_values: Vec<f64>,
    dense_noise: Vec<DenseNoiseBlock>,
    null_coords: Vec<usize>,
    noise_trace: Vec<f64>,
    f_trace: Vec<f64>,
    active: Vec<bool>,
    scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointState {
    pub z: C64,
    pub a: Vec<C64>,
    pub b: Vec<C64>,
    pub m0: C64,
    pub iterations: usize,
    pub residual: f64,
}

impl FixedPointState {
    pub fn b_real(&self) -> Vec<f64> {
        self.b.iter().map(|b| b.re).collect()
    }

    pub fn a_real(&self) -> Vec<f64> {
        self.a.iter().map(|a| a.re).collect()
    }

    pub fn lambda(&self) -> f64 {
        self.z.re
    }

    fn max_imag(&self) -> f64 {
        self.a
            .iter()
            .chain(self.b.iter())
            .map(|x| x.im.abs() / (1.0 + x.norm()))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Absolute residual tolerance; `None` means `1e-12 · max(1, 1/|z|)`.
    pub tol: Option<f64>,
    pub max_iter: usize,
    /// Try a Newton step before each damped Picard step.
    pub newton: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: None,
            max_iter: DEFAULT_MAX_ITER,
            newton: true,
        }
    }
}

impl SolverOptions {
    pub fn picard_only() -> Self {
        Self {
            newton: false,
            ..Self::default()
        }
    }

    fn tolerance(&self, z: C64) -> f64 {
        self.tol
            .unwrap_or_else(|| DEFAULT_TOL * f64::max(1.0, 1.0 / z.norm()))
    }
}

struct Evaluation {
    b: Vec<C64>,
    a_next: Vec<C64>,
    m0: C64,
    jac_b: DMatrix<C64>,
    jac_a: DMatrix<C64>,
    residual: f64,
}

impl SpectralProblem {
    pub fn new(f: &InteractionMatrix, noise: &NoiseModel) -> Result<Self> {
        let k = f.k();
        if noise.k() != k {
            return Err(Error::DimensionMismatch(format!(
                "design has {k} components but noise model has {}",
                noise.k()
            )));
        }
        let p = noise.p();
        let sizes: Vec<f64> = f.sizes().iter().map(|&s| s as f64).collect();
        let f_blocks = split_interaction(f);
        let (scalar_coords, scalar_values, dense_noise, null_coords) = split_noise(noise);
        let noise_trace = noise.traces();
        let f_trace = (0..k).map(|r| f.block_trace(r)).collect();
        let active = noise.components().iter().map(|c| !c.is_zero()).collect();

        let fm = f.matrix();
        let f_inf = (0..fm.nrows())
            .map(|i| fm.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let noise_inf = noise
            .components()
            .iter()
            .map(|c| match c {
                Covariance::Diagonal(d) => d.iter().fold(0.0_f64, |m, x| m.max(x.abs())),
                Covariance::Dense(m) => (0..m.nrows())
                    .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
                    .fold(0.0, f64::max),
            })
            .fold(0.0, f64::max);
        let n_min = sizes.iter().cloned().fold(f64::INFINITY, f64::min);
        let aspect = (1.0 + (p as f64 / n_min).sqrt()).powi(2);
        let scale = (aspect * f_inf * noise_inf).max(1.0);

        Ok(Self {
            k,
            p,
            sizes,
            f_blocks,
            scalar_coords,
            scalar_values,
            dense_noise,
            null_coords,
            noise_trace,
            f_trace,
            active,
            scale,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.sizes.iter().map(|&s| s as usize).collect()
    }

    /// Crude upper bound on the spectral radius of `Σ̂`, used to pick warm-start
    /// heights and scan ranges.
    pub fn spectral_scale(&self) -> f64 {
        self.scale
    }

    /// Number of coordinates on which every `Σ̊_r` vanishes; each contributes
    /// an exact atom `−1/(pz)` to `m₀`.
    pub fn null_dimension(&self) -> usize {
        self.null_coords.len()
    }

    /// Number of distinct blocks of `F` after deduplication.
    pub fn distinct_f_blocks(&self) -> usize {
        self.f_blocks.len()
    }

    /// `n_r⁻¹ Tr F_rr`.
    pub fn normalized_f_trace(&self, r: usize) -> f64 {
        self.f_trace[r] / self.sizes[r]
    }

    pub fn noise_trace(&self, r: usize) -> f64 {
        self.noise_trace[r]
    }

    /// Large-`|z|` linearization: `a_r ≈ −Tr Σ̊_r / (n_r z)`.
    pub fn cold_start(&self, z: C64) -> Vec<C64> {
        (0..self.k)
            .map(|r| -C64::new(self.noise_trace[r] / self.sizes[r], 0.0) / z)
            .collect()
    }

    /// `b = H(a)` from the `F`-side equation, with `∂b/∂a` when requested.
    pub fn b_from_a(&self, a: &[C64]) -> Option<Vec<C64>> {
        self.eval_b(a, false).map(|(b, _)| b)
    }

    /// `(a, m₀) = G(z, b)` from the noise-side equations.
    pub fn a_from_b(&self, z: C64, b: &[C64]) -> Option<(Vec<C64>, C64)> {
        self.eval_a(z, b, false).map(|(a, m0, _)| (a, m0))
    }

    fn eval_b(&self, a: &[C64], jac: bool) -> Option<(Vec<C64>, DMatrix<C64>)> {
        let k = self.k;
        let one = C64::new(1.0, 0.0);
        let mut b = vec![C64::new(0.0, 0.0); k];
        let mut j = DMatrix::zeros(if jac { k } else { 0 }, if jac { k } else { 0 });
        for blk in &self.f_blocks {
            let m = blk.labels.len();
            let w = blk.weight;
            if m == 1 {
                let f = blk.f[(0, 0)];
                let r = blk.labels[0];
                let d = one + f * a[r];
                if d.norm() == 0.0 {
                    return None;
                }
                let kk = f / d;
                b[r] -= kk * w;
                if jac {
                    j[(r, r)] += kk * kk * w;
                }
                continue;
            }
            let mut mat = DMatrix::from_fn(m, m, |i, c| blk.f[(i, c)] * a[blk.labels[c]]);
            for i in 0..m {
                mat[(i, i)] += one;
            }
            let kmat = solve_complex(mat, &blk.f)?;
            for i in 0..m {
                b[blk.labels[i]] -= kmat[(i, i)] * w;
            }
            if jac {
                for i in 0..m {
                    for c in 0..m {
                        j[(blk.labels[i], blk.labels[c])] += kmat[(i, c)] * kmat[(c, i)] * w;
                    }
                }
            }
        }
        for r in 0..k {
            b[r] /= self.sizes[r];
            if jac {
                for s in 0..k {
                    j[(r, s)] /= self.sizes[r];
                }
            }
        }
        Some((b, j))
    }

    fn eval_a(&self, z: C64, b: &[C64], jac: bool) -> Option<(Vec<C64>, C64, DMatrix<C64>)> {
        let k = self.k;
        let zero = C64::new(0.0, 0.0);
        let mut a = vec![zero; k];
        let mut m0 = zero;
        let mut j = DMatrix::zeros(if jac { k } else { 0 }, if jac { k } else { 0 });
        for (c, _) in self.scalar_coords.iter().enumerate() {
            let vals = &self.scalar_values[c * k..(c + 1) * k];
            let mut d = z;
            for r in 0..k {
                d += b[r] * vals[r];
            }
            if d.norm() == 0.0 {
                return None;
            }
            let res = d.inv();
            m0 -= res;
            for r in 0..k {
                if vals[r] != 0.0 {
                    a[r] -= res * vals[r];
                }
            }
            if jac {
                let r2 = res * res;
                for r in 0..k {
                    for s in 0..k {
                        j[(r, s)] += r2 * (vals[r] * vals[s]);
                    }
                }
            }
        }
        for blk in &self.dense_noise {
            let m = blk.coords.len();
            let mut mat = DMatrix::from_diagonal_element(m, m, z);
            for r in 0..k {
                mat += &blk.mats[r] * b[r];
            }
            let ident = DMatrix::identity(m, m);
            let res = solve_complex(mat, &ident)?;
            m0 -= res.trace();
            let rs: Vec<DMatrix<C64>> = blk.mats.iter().map(|s| &res * s).collect();
            for r in 0..k {
                a[r] -= rs[r].trace();
            }
            if jac {
                for r in 0..k {
                    for s in 0..k {
                        // Tr(R Σ̊_s R Σ̊_r)
                        j[(r, s)] += (&rs[s] * &rs[r]).trace();
                    }
                }
            }
        }
        if !self.null_coords.is_empty() {
            m0 -= C64::new(self.null_coords.len() as f64, 0.0) / z;
        }
        for r in 0..k {
            a[r] /= self.sizes[r];
            if jac {
                for s in 0..k {
                    j[(r, s)] /= self.sizes[r];
                }
            }
        }
        m0 /= self.p as f64;
        Some((a, m0, j))
    }

    fn evaluate(&self, z: C64, a: &[C64], jac: bool) -> Option<Evaluation> {
        let (b, jac_b) = self.eval_b(a, jac)?;
        let (a_next, m0, jac_a) = self.eval_a(z, &b, jac)?;
        let residual = a
            .iter()
            .zip(&a_next)
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max);
        if !residual.is_finite() {
            return None;
        }
        Some(Evaluation {
            b,
            a_next,
            m0,
            jac_b,
            jac_a,
            residual,
        })
    }

    /// Residual of both equations at `(a, b)`, evaluated from scratch.
    pub fn residual(&self, z: C64, a: &[C64], b: &[C64]) -> f64 {
        let Some((a_img, _, _)) = self.eval_a(z, b, false) else {
            return f64::INFINITY;
        };
        let Some((b_img, _)) = self.eval_b(a, false) else {
            return f64::INFINITY;
        };
        a.iter()
            .zip(&a_img)
            .chain(b.iter().zip(&b_img))
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max)
    }

    fn newton_step(&self, a: &[C64], ev: &Evaluation) -> Option<Vec<C64>> {
        let k = self.k;
        let mut jac = -(&ev.jac_a * &ev.jac_b);
        for r in 0..k {
            jac[(r, r)] += C64::new(1.0, 0.0);
        }
        let rhs = DMatrix::from_fn(k, 1, |r, _| a[r] - ev.a_next[r]);
        let delta = solve_complex(jac, &rhs)?;
        Some((0..k).map(|r| a[r] - delta[(r, 0)]).collect())
    }

    /// Solves the system at `z`. `init` is a starting value for `a`; without
    /// it the large-`|z|` linearization is used.
    pub fn solve_at(&self, z: C64, init: Option<&[C64]>, opts: &SolverOptions) -> Result<FixedPointState> {
        let tol = opts.tolerance(z);
        let mut a: Vec<C64> = match init {
            Some(a0) => a0.to_vec(),
            None => self.cold_start(z),
        };
        for r in 0..self.k {
            if !self.active[r] {
                a[r] = C64::new(0.0, 0.0);
            }
        }
        let mut ev = self.evaluate(z, &a, opts.newton).ok_or_else(|| Error::singular(z))?;
        let mut theta = 1.0_f64;
        let mut iterations = 0;
        while ev.residual > tol {
            if iterations >= opts.max_iter {
                return Err(Error::non_convergence(z, iterations, ev.residual));
            }
            iterations += 1;
            let mut accepted = false;
            if opts.newton {
                if let Some(full) = self.newton_step(&a, &ev) {
                    let mut t = 1.0;
                    for _ in 0..4 {
                        let trial: Vec<C64> = (0..self.k).map(|r| a[r] + (full[r] - a[r]) * t).collect();
                        if let Some(next) = self.evaluate(z, &trial, true) {
                            if next.residual < (1.0 - 1e-4 * t) * ev.residual
                                && (z.im <= 0.0 || self.in_upper_half_plane(&trial, &next.b))
                            {
                                a = trial;
                                ev = next;
                                accepted = true;
                                break;
                            }
                        }
                        t *= 0.5;
                    }
                }
            }
            if !accepted {
                let trial: Vec<C64> = (0..self.k)
                    .map(|r| a[r] * (1.0 - theta) + ev.a_next[r] * theta)
                    .collect();
                match self.evaluate(z, &trial, opts.newton) {
                    Some(next) => {
                        if next.residual > ev.residual {
                            theta = (theta * 0.5).max(DAMPING_FLOOR);
                        }
                        a = trial;
                        ev = next;
                    }
                    None => {
                        if theta <= DAMPING_FLOOR {
                            return Err(Error::singular(z));
                        }
                        theta = (theta * 0.5).max(DAMPING_FLOOR);
                    }
                }
            }
        }
        let state = FixedPointState {
            z,
            residual: self.residual(z, &a, &ev.b),
            a,
            b: ev.b,
            m0: ev.m0,
            iterations,
        };
        if z.im > 0.0 && !self.on_physical_branch(&state) {
            return Err(Error::wrong_branch(z));
        }
        Ok(state)
    }

    /// Newton steps may not leave the closed upper half-plane; Picard steps
    /// never do, so the iteration cannot wander onto a non-physical branch.
    fn in_upper_half_plane(&self, a: &[C64], b: &[C64]) -> bool {
        let a_ok = a
            .iter()
            .zip(&self.active)
            .all(|(a, &act)| !act || a.im >= -BRANCH_TOL * (1.0 + a.norm()));
        a_ok && b.iter().all(|b| b.im >= -BRANCH_TOL * (1.0 + b.norm()))
    }

    fn on_physical_branch(&self, s: &FixedPointState) -> bool {
        let a_ok = s
            .a
            .iter()
            .zip(&self.active)
            .all(|(a, &act)| !act || a.im >= -BRANCH_TOL * (1.0 + a.norm()));
        let b_ok = s.b.iter().all(|b| b.im >= -BRANCH_TOL * (1.0 + b.norm()));
        a_ok && b_ok && s.m0.im > 0.0
    }

    /// Solves at `λ + i·target_height` by starting at `λ + i·warm_height`
    /// and following the solution down in `≤ 20` geometric steps (refined
    /// locally on failure). With `target_height == 0` the last complex state
    /// seeds a real solve, and the point is rejected as on-support when that
    /// state still carries a non-negligible imaginary part.
    pub fn solve_descending(&self, lambda: f64, target_height: f64, warm_height: f64) -> Result<FixedPointState> {
        let opts = SolverOptions::default();
        let warm = warm_height.max(target_height);
        let floor = if target_height > 0.0 {
            target_height
        } else {
            1e-10 * self.scale
        };
        let mut state = self.solve_at(C64::new(lambda, warm), None, &opts)?;
        if warm > floor {
            let ratio = (floor / warm).powf(1.0 / DESCENT_STEPS as f64);
            let mut h = warm;
            let mut step = ratio;
            let mut subdivisions = 0;
            while h > floor {
                let next_h = (h * step).max(floor);
                match self.solve_at(C64::new(lambda, next_h), Some(&state.a), &opts) {
                    Ok(s) => {
                        state = s;
                        h = next_h;
                        step = ratio;
                    }
                    Err(e) if e.is_solver_failure() && subdivisions < MAX_SUBDIVISIONS => {
                        subdivisions += 1;
                        step = step.sqrt();
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        if target_height > 0.0 {
            return Ok(state);
        }
        if state.max_imag() > ON_SUPPORT_IMAG {
            return Err(Error::NearSupport(lambda));
        }
        let real_init: Vec<C64> = state.a.iter().map(|a| C64::new(a.re, 0.0)).collect();
        self.solve_at(C64::new(lambda, 0.0), Some(&real_init), &opts)
    }

    /// `Γ (z Id + b·Σ̊)⁻¹ Γᵀ` and, when `b_prime` is given, also
    /// `Γ R (Id + b′·Σ̊) R Γᵀ` with `R = (z Id + b·Σ̊)⁻¹`.
    pub fn resolvent_forms(
        &self,
        z: C64,
        b: &[C64],
        gamma: &DMatrix<f64>,
        b_prime: Option<&[f64]>,
    ) -> Option<(DMatrix<C64>, Option<DMatrix<C64>>)> {
        let k = self.k;
        let l = gamma.nrows();
        let zero = C64::new(0.0, 0.0);
        let mut n = DMatrix::from_element(l, l, zero);
        let mut n2 = b_prime.map(|_| DMatrix::from_element(l, l, zero));
        if l == 0 {
            return Some((n, n2));
        }
        let add_rank_one = |target: &mut DMatrix<C64>, col: usize, w: C64| {
            for i in 0..l {
                let gi = gamma[(i, col)];
                if gi == 0.0 {
                    continue;
                }
                for j in 0..l {
                    let gj = gamma[(j, col)];
                    if gj != 0.0 {
                        target[(i, j)] += w * (gi * gj);
                    }
                }
            }
        };
        for (c, &coord) in self.scalar_coords.iter().enumerate() {
            let vals = &self.scalar_values[c * k..(c + 1) * k];
            let mut d = z;
            for r in 0..k {
                d += b[r] * vals[r];
            }
            if d.norm() == 0.0 {
                return None;
            }
            let res = d.inv();
            add_rank_one(&mut n, coord, res);
            if let (Some(bp), Some(n2)) = (b_prime, n2.as_mut()) {
                let mid: f64 = 1.0 + (0..k).map(|r| bp[r] * vals[r]).sum::<f64>();
                add_rank_one(n2, coord, res * res * mid);
            }
        }
        if !self.null_coords.is_empty() {
            let res = z.inv();
            for &coord in &self.null_coords {
                add_rank_one(&mut n, coord, res);
                if let Some(n2) = n2.as_mut() {
                    add_rank_one(n2, coord, res * res);
                }
            }
        }
        for blk in &self.dense_noise {
            let m = blk.coords.len();
            let mut mat = DMatrix::from_diagonal_element(m, m, z);
            for r in 0..k {
                mat += &blk.mats[r] * b[r];
            }
            let g_blk = DMatrix::from_fn(m, l, |i, j| C64::new(gamma[(j, blk.coords[i])], 0.0));
            let rg = solve_complex(mat, &g_blk)?;
            n += g_blk.transpose() * &rg;
            if let (Some(bp), Some(n2)) = (b_prime, n2.as_mut()) {
                let mut mid = DMatrix::identity(m, m);
                for r in 0..k {
                    mid += &blk.mats[r] * C64::new(bp[r], 0.0);
                }
                // R is complex symmetric, so (RΓᵀ)ᵀ = ΓR.
                *n2 += rg.transpose() * mid * &rg;
            }
        }
        Some((n, n2))
    }
}

/// Splits `F` into connected components and deduplicates identical ones.
fn split_interaction(f: &InteractionMatrix) -> Vec<FBlock> {
    let fm = f.matrix();
    let n_plus = fm.nrows();
    let fmax = fm.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let drop = F_DROP_TOL * fmax;
    let mut edges = Vec::new();
    for j in 0..n_plus {
        for i in 0..j {
            if fm[(i, j)].abs() > drop {
                edges.push((i, j));
            }
        }
    }
    let comps = connected_components(n_plus, edges);
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut blocks: Vec<FBlock> = Vec::new();
    for comp in comps {
        let m = comp.len();
        let labels: Vec<usize> = comp.iter().map(|&i| f.component_of(i)).collect();
        let local = DMatrix::from_fn(m, m, |i, j| {
            let v = fm[(comp[i], comp[j])];
            if v.abs() > drop {
                v
            } else {
                0.0
            }
        });
        if local.iter().all(|&x| x == 0.0) {
            continue;
        }
        let mut key: Vec<u64> = labels.iter().map(|&l| l as u64).collect();
        key.extend(local.iter().map(|x| x.to_bits()));
        match index.get(&key) {
            Some(&idx) => blocks[idx].weight += 1.0,
            None => {
                index.insert(key, blocks.len());
                blocks.push(FBlock {
                    weight: 1.0,
                    labels,
                    f: local.map(|x| C64::new(x, 0.0)),
                });
            }
        }
    }
    blocks
}

type NoiseSplit = (Vec<usize>, Vec<f64>, Vec<DenseNoiseBlock>, Vec<usize>);

fn split_noise(noise: &NoiseModel) -> NoiseSplit {
    let k = noise.k();
    let p = noise.p();
    let mut edges = Vec::new();
    for c in noise.components() {
        if let Covariance::Dense(m) = c {
            for j in 0..p {
                for i in 0..j {
                    if m[(i, j)] != 0.0 {
                        edges.push((i, j));
                    }
                }
            }
        }
    }
    let comps = connected_components(p, edges);
    let mut scalar_coords = Vec::new();
    let mut scalar_values = Vec::new();
    let mut dense = Vec::new();
    let mut null = Vec::new();
    for comp in comps {
        if comp.len() == 1 {
            let c = comp[0];
            let vals: Vec<f64> = (0..k).map(|r| noise.component(r).get(c, c)).collect();
            if vals.iter().all(|&v| v == 0.0) {
                null.push(c);
            } else {
                scalar_coords.push(c);
                scalar_values.extend(vals);
            }
        } else {
            let mats = (0..k)
                .map(|r| {
                    let cov = noise.component(r);
                    DMatrix::from_fn(comp.len(), comp.len(), |i, j| C64::new(cov.get(comp[i], comp[j]), 0.0))
                })
                .collect();
            dense.push(DenseNoiseBlock { mats, coords: comp });
        }
    }
    (scalar_coords, scalar_values, dense, null)
}

/// Fixed-point states along an ascending real grid at a common height
/// `Im z = height` (zero for real-axis solutions).
#[derive(Debug, Clone)]
pub struct ContinuationTrack {
    pub grid: Vec<f64>,
    pub height: f64,
    pub states: Vec<FixedPointState>,
    /// Largest observed `‖b(λ_{i+1}) − b(λ_i)‖_∞ / Δλ`.
    pub lipschitz: f64,
}

impl ContinuationTrack {
    /// Index of the grid point nearest to `lambda`.
    pub fn nearest(&self, lambda: f64) -> usize {
        let idx = self.grid.partition_point(|&x| x < lambda);
        if idx == 0 {
            0
        } else if idx >= self.grid.len() {
            self.grid.len() - 1
        } else if (self.grid[idx] - lambda).abs() < (lambda - self.grid[idx - 1]).abs() {
            idx
        } else {
            idx - 1
        }
    }

    /// Linear interpolation of `a` between the two states bracketing `lambda`.
    pub fn interpolate_a(&self, lambda: f64) -> Vec<C64> {
        let n = self.grid.len();
        if n == 1 {
            return self.states[0].a.clone();
        }
        let hi = self.grid.partition_point(|&x| x < lambda).clamp(1, n - 1);
        let lo = hi - 1;
        let t = (lambda - self.grid[lo]) / (self.grid[hi] - self.grid[lo]);
        self.states[lo]
            .a
            .iter()
            .zip(&self.states[hi].a)
            .map(|(x, y)| x + (y - x) * t)
            .collect()
    }

    pub fn b_values(&self) -> Vec<Vec<f64>> {
        self.states.iter().map(FixedPointState::b_real).collect()
    }
}

fn extrapolate(prev: &[(f64, Vec<C64>)], lambda: f64) -> Option<Vec<C64>> {
    match prev {
        [] => None,
        [(_, a)] => Some(a.clone()),
        [.., (l0, a0), (l1, a1)] => {
            let t = (lambda - l1) / (l1 - l0);
            Some(a0.iter().zip(a1).map(|(x, y)| y + (y - x) * t).collect())
        }
    }
}

fn solve_grid_point(
    problem: &SpectralProblem,
    lambda: f64,
    height: f64,
    warm_height: f64,
    history: &[(f64, Vec<C64>)],
    previous_b: Option<&[C64]>,
) -> Result<FixedPointState> {
    let opts = SolverOptions::default();
    if let Some(init) = extrapolate(history, lambda) {
        if let Ok(s) = problem.solve_at(C64::new(lambda, height), Some(&init), &opts) {
            // Off the support b_r is nondecreasing in λ; a decrease means the
            // warm start jumped to a different real solution.
            let monotone = height > 0.0
                || previous_b.map_or(true, |pb| {
                    pb.iter()
                        .zip(&s.b)
                        .all(|(x, y)| y.re >= x.re - MONOTONE_SLACK * (1.0 + x.norm()))
                });
            if monotone {
                return Ok(s);
            }
        }
    }
    problem.solve_descending(lambda, height, warm_height)
}

/// Solves at every grid point, warm-starting each from the linear
/// extrapolation of its two predecessors. Failed points are reported
/// individually and restart the extrapolation history.
pub fn track_grid(
    problem: &SpectralProblem,
    grid: &[f64],
    height: f64,
    warm_start_height: f64,
) -> Vec<Result<FixedPointState>> {
    let mut out = Vec::with_capacity(grid.len());
    let mut history: Vec<(f64, Vec<C64>)> = Vec::new();
    let mut previous_b: Option<Vec<C64>> = None;
    for &lambda in grid {
        let res = solve_grid_point(problem, lambda, height, warm_start_height, &history, previous_b.as_deref());
        match &res {
            Ok(s) => {
                history.push((lambda, s.a.clone()));
                if history.len() > 2 {
                    history.remove(0);
                }
                previous_b = Some(s.b.clone());
            }
            Err(_) => {
                history.clear();
                previous_b = None;
            }
        }
        out.push(res);
    }
    out
}

/// Real-axis (or fixed-height) continuation along an ascending grid. The
/// first point is reached from `λ₀ + i·warm_start_height`.
pub fn continue_real_axis(
    problem: &SpectralProblem,
    grid: &[f64],
    height: f64,
    warm_start_height: f64,
) -> Result<ContinuationTrack> {
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("continuation grid must be strictly increasing".into()));
    }
    let states = track_grid(problem, grid, height, warm_start_height)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let lipschitz = grid
        .windows(2)
        .zip(states.windows(2))
        .map(|(g, s)| {
            let db = s[0]
                .b
                .iter()
                .zip(&s[1].b)
                .map(|(x, y)| (x - y).norm())
                .fold(0.0, f64::max);
            db / (g[1] - g[0])
        })
        .fold(0.0, f64::max);
    Ok(ContinuationTrack {
        grid: grid.to_vec(),
        height,
        states,
        lipschitz,
    })
}

/// Central-difference step used for `b′(λ)`.
pub fn derivative_step(lambda: f64) -> f64 {
    1e-4 * lambda.abs().max(1.0)
}

/// `b′_r(λ)` by central differences of fresh real solves at `λ ± h`,
/// warm-started from `near` (a converged state close to `λ`).
pub fn derivative_b_with_step(
    problem: &SpectralProblem,
    lambda: f64,
    near: &FixedPointState,
    h: f64,
) -> Result<Vec<f64>> {
    let opts = SolverOptions::default();
    let plus = problem.solve_at(C64::new(lambda + h, 0.0), Some(&near.a), &opts)?;
    let minus = problem.solve_at(C64::new(lambda - h, 0.0), Some(&near.a), &opts)?;
    let d: Vec<f64> = plus
        .b
        .iter()
        .zip(&minus.b)
        .map(|(p, m)| (p.re - m.re) / (2.0 * h))
        .collect();
    if let Some(bad) = d.iter().find(|&&x| x < -1e-8) {
        return Err(Error::Inconsistency(format!(
            "b′ = {bad:.3e} < 0 at λ = {lambda}; the point is probably on the support"
        )));
    }
    Ok(d)
}

pub fn derivative_b_at(problem: &SpectralProblem, lambda: f64, near: &FixedPointState) -> Result<Vec<f64>> {
    derivative_b_with_step(problem, lambda, near, derivative_step(lambda))
}

pub fn derivative_b(problem: &SpectralProblem, track: &ContinuationTrack, lambda: f64) -> Result<Vec<f64>> {
    let near = &track.states[track.nearest(lambda)];
    derivative_b_at(problem, lambda, near)
}

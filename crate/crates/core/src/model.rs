//! Mixed-model designs, noise and signal models, and the interaction matrix.
//!
//! A design describes `Y = U₁α₁ + … + U_kα_k` (the fixed-effect term is only
//! validated, never estimated) together with the estimator kernel `B` of
//! `Σ̂ = YᵀBY`. Component indices are zero-based throughout the library.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{max_abs, max_asymmetry, psd_sqrt, spectral_norm_estimate, symmetrize};

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;
const MANOVA_TOL: f64 = 1e-10;
const BX_TOL: f64 = 1e-12;
const INCIDENCE_NORM_WARN: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct ModelDesign {
    n: usize,
    p: usize,
    sizes: Vec<usize>,
    incidence: Vec<DMatrix<f64>>,
    kernel: DMatrix<f64>,
    fixed_effects: Option<DMatrix<f64>>,
    ingested_asymmetry: f64,
}

impl ModelDesign {
    /// Builds a design from incidence matrices `U_r` (each `n × n_r`) and the
    /// estimator kernel `B` (`n × n`). `B` is symmetrized on ingestion.
    pub fn new(
        p: usize,
        incidence: Vec<DMatrix<f64>>,
        kernel: DMatrix<f64>,
        fixed_effects: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidArgument("p must be positive".into()));
        }
        if incidence.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one random-effect component is required".into(),
            ));
        }
        let n = kernel.nrows();
        if n == 0 || kernel.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "B must be square and non-empty, got {}x{}",
                kernel.nrows(),
                kernel.ncols()
            )));
        }
        for (r, u) in incidence.iter().enumerate() {
            if u.nrows() != n || u.ncols() == 0 {
                return Err(Error::DimensionMismatch(format!(
                    "U_{} is {}x{}, expected {} rows and at least one column",
                    r + 1,
                    u.nrows(),
                    u.ncols(),
                    n
                )));
            }
            let norm = spectral_norm_estimate(u);
            if norm > INCIDENCE_NORM_WARN {
                warn!("U_{} has spectral norm {norm:.1}, outside the bounded-design regime", r + 1);
            }
        }
        if let Some(x) = &fixed_effects {
            if x.nrows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "X has {} rows, expected {n}",
                    x.nrows()
                )));
            }
        }
        let asym = max_asymmetry(&kernel);
        if asym > 0.0 {
            log::info!("symmetrizing B (max |B - Bᵀ| = {asym:.3e})");
        }
        let kernel = symmetrize(&kernel);
        let sizes = incidence.iter().map(|u| u.ncols()).collect();
        Ok(Self {
            n,
            p,
            sizes,
            incidence,
            kernel,
            fixed_effects,
            ingested_asymmetry: asym,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn incidence(&self, r: usize) -> &DMatrix<f64> {
        &self.incidence[r]
    }

    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    pub fn fixed_effects(&self) -> Option<&DMatrix<f64>> {
        self.fixed_effects.as_ref()
    }

    pub fn ingested_asymmetry(&self) -> f64 {
        self.ingested_asymmetry
    }

    /// Same design with the kernel multiplied by `factor`.
    pub fn with_scaled_kernel(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.kernel *= factor;
        out
    }

    pub fn with_fixed_effects(&self, x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "X has {} rows, expected {}",
                x.nrows(),
                self.n
            )));
        }
        let mut out = self.clone();
        out.fixed_effects = Some(x);
        Ok(out)
    }
}

/// Balanced one-way layout: `n_pairs` groups of `group_size` samples, a group
/// effect (`U₁`, one indicator column per group) and an individual effect
/// (`U₂ = Id`). `B` is the unbiased MANOVA kernel for the group component,
/// `π/n − π^⊥/(n(g−1))`, which for pairs is `(π − π^⊥)/n`.
pub fn build_one_way_layout(n_pairs: usize, p: usize, group_size: usize) -> Result<ModelDesign> {
    if n_pairs < 2 || p == 0 || group_size < 2 {
        return Err(Error::InvalidArgument(format!(
            "one-way layout needs n_pairs >= 2, p >= 1, group_size >= 2 (got {n_pairs}, {p}, {group_size})"
        )));
    }
    let g = group_size;
    let n = g * n_pairs;
    let u1 = DMatrix::from_fn(n, n_pairs, |i, j| if i / g == j { 1.0 } else { 0.0 });
    let u2 = DMatrix::identity(n, n);
    let within = 1.0 / n as f64;
    let between = 1.0 / (n as f64 * (g as f64 - 1.0));
    let inv_g = 1.0 / g as f64;
    // B = c₁π − c₂(I − π) with π block-diagonal (1/g)·ones(g,g).
    let kernel = DMatrix::from_fn(n, n, |i, j| {
        let pi = if i / g == j / g { inv_g } else { 0.0 };
        let eye = if i == j { 1.0 } else { 0.0 };
        within * pi - between * (eye - pi)
    });
    ModelDesign::new(p, vec![u1, u2], kernel, None)
}

/// Single-component design `U₁ = Id_n`, `B = Id/n`: `Σ̂` is the ordinary
/// sample covariance of `n` independent rows.
pub fn build_sample_covariance(n: usize, p: usize) -> Result<ModelDesign> {
    if n == 0 || p == 0 {
        return Err(Error::InvalidArgument("n and p must be positive".into()));
    }
    ModelDesign::new(
        p,
        vec![DMatrix::identity(n, n)],
        DMatrix::identity(n, n) / n as f64,
        None,
    )
}

/// `F_{rs} = √(n_r n_s) U_rᵀ B U_s` assembled into a symmetric `n₊ × n₊`
/// matrix with block offsets given by prefix sums of `n_r`.
#[derive(Debug, Clone)]
pub struct InteractionMatrix {
    f: DMatrix<f64>,
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl InteractionMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_plus(&self) -> usize {
        self.f.nrows()
    }

    pub fn block(&self, r: usize, s: usize) -> DMatrix<f64> {
        self.f
            .view((self.offsets[r], self.offsets[s]), (self.sizes[r], self.sizes[s]))
            .into_owned()
    }

    /// `Tr_r` of `F`, the trace of the `(r, r)` block.
    pub fn block_trace(&self, r: usize) -> f64 {
        let o = self.offsets[r];
        (o..o + self.sizes[r]).map(|i| self.f[(i, i)]).sum()
    }

    /// Component index of row `i` of `F`.
    pub fn component_of(&self, i: usize) -> usize {
        self.offsets.partition_point(|&o| o <= i) - 1
    }
}

pub fn compute_interaction_matrix(design: &ModelDesign) -> InteractionMatrix {
    let sizes = design.sizes().to_vec();
    let mut offsets = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    for &s in &sizes {
        offsets.push(acc);
        acc += s;
    }
    let n_plus = acc;
    let mut stacked = DMatrix::zeros(design.n(), n_plus);
    for (r, &o) in offsets.iter().enumerate() {
        let scale = (sizes[r] as f64).sqrt();
        stacked
            .view_mut((0, o), (design.n(), sizes[r]))
            .copy_from(&(design.incidence(r) * scale));
    }
    let bu = design.kernel() * &stacked;
    let f = stacked.transpose() * bu;
    InteractionMatrix {
        f: symmetrize(&f),
        sizes,
        offsets,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub target: usize,
    /// `n_r⁻¹ Tr F_rr` for each component.
    pub values: Vec<f64>,
    pub tolerance: f64,
    pub unbiased: bool,
    /// `‖BX‖_max / (‖B‖_max ‖X‖_max)` when fixed effects are present.
    pub bx_residual: Option<f64>,
    pub bx_pass: Option<bool>,
    pub pass: bool,
}

/// Checks the MANOVA moment conditions `n_r⁻¹ Tr F_rr = 1{r = target}` and,
/// if fixed effects are present, `BX = 0`.
pub fn validate_manova(design: &ModelDesign, target: usize) -> Result<ValidationReport> {
    if target >= design.k() {
        return Err(Error::InvalidArgument(format!(
            "target component {} out of range (k = {})",
            target + 1,
            design.k()
        )));
    }
    let values: Vec<f64> = (0..design.k())
        .map(|r| {
            let bu = design.kernel() * design.incidence(r);
            let tr: f64 = design
                .incidence(r)
                .column_iter()
                .zip(bu.column_iter())
                .map(|(u, v)| u.dot(&v))
                .sum();
            tr
        })
        .collect();
    let unbiased = values.iter().enumerate().all(|(r, &v)| {
        let expected = if r == target { 1.0 } else { 0.0 };
        (v - expected).abs() <= MANOVA_TOL
    });
    let (bx_residual, bx_pass) = match design.fixed_effects() {
        Some(x) => {
            let bx = design.kernel() * x;
            let denom = max_abs(design.kernel()) * max_abs(x);
            let rel = if denom > 0.0 { max_abs(&bx) / denom } else { 0.0 };
            (Some(rel), Some(rel <= BX_TOL))
        }
        None => (None, None),
    };
    Ok(ValidationReport {
        target,
        values,
        tolerance: MANOVA_TOL,
        unbiased,
        bx_residual,
        bx_pass,
        pass: unbiased && bx_pass.unwrap_or(true),
    })
}

/// A symmetric PSD `p × p` covariance, stored compactly when diagonal.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Diagonal(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(d) => d.len(),
            Covariance::Dense(m) => m.nrows(),
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            Covariance::Diagonal(d) => d.sum(),
            Covariance::Dense(m) => m.trace(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Covariance::Diagonal(d) => DMatrix::from_diagonal(d),
            Covariance::Dense(m) => m.clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Covariance::Diagonal(d) => d.iter().all(|&x| x == 0.0),
            Covariance::Dense(m) => m.iter().all(|&x| x == 0.0),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            Covariance::Diagonal(d) => {
                if i == j {
                    d[i]
                } else {
                    0.0
                }
            }
            Covariance::Dense(m) => m[(i, j)],
        }
    }

    fn sqrt(&self) -> Covariance {
        match self {
            Covariance::Diagonal(d) => Covariance::Diagonal(d.map(|x| x.max(0.0).sqrt())),
            Covariance::Dense(m) => Covariance::Dense(psd_sqrt(m)),
        }
    }

    /// Right-multiplies `g` (rows are samples) by this matrix.
    pub fn right_apply(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Covariance::Diagonal(d) => {
                let mut out = g.clone();
                for (j, mut col) in out.column_iter_mut().enumerate() {
                    col *= d[j];
                }
                out
            }
            Covariance::Dense(m) => g * m,
        }
    }
}

/// Noise covariances `Σ̊_r`, validated symmetric PSD, with their square roots
/// cached for the simulator.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    sigma: Vec<Covariance>,
    sqrt: Vec<Covariance>,
}

impl NoiseModel {
    pub fn new(sigma: Vec<Covariance>) -> Result<Self> {
        if sigma.is_empty() {
            return Err(Error::InvalidArgument("noise model needs at least one component".into()));
        }
        let p = sigma[0].dim();
        for (r, s) in sigma.iter().enumerate() {
            if s.dim() != p {
                return Err(Error::DimensionMismatch(format!(
                    "noise component {} has dimension {}, expected {p}",
                    r + 1,
                    s.dim()
                )));
            }
            match s {
                Covariance::Diagonal(d) => {
                    let scale = d.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
                    if d.iter().any(|&x| x < -PSD_TOL * scale.max(f64::MIN_POSITIVE)) {
                        return Err(Error::InvalidArgument(format!(
                            "noise component {} has a negative diagonal entry",
                            r + 1
                        )));
                    }
                }
                Covariance::Dense(m) => {
                    if m.ncols() != p {
                        return Err(Error::DimensionMismatch(format!(
                            "noise component {} is not square",
                            r + 1
                        )));
                    }
                    let scale = max_abs(m);
                    if max_asymmetry(m) > SYMMETRY_TOL * scale.max(1.0) {
                        return Err(Error::InvalidArgument(format!(
                            "noise component {} is not symmetric",
                            r + 1
                        )));
                    }
                    let min_eig = m.clone().symmetric_eigenvalues().min();
                    let norm = m.clone().symmetric_eigenvalues().abs().max();
                    if min_eig < -PSD_TOL * norm {
                        return Err(Error::InvalidArgument(format!(
                            "noise component {} is not PSD (smallest eigenvalue {min_eig:.3e})",
                            r + 1
                        )));
                    }
                }
            }
        }
        let sigma: Vec<Covariance> = sigma
            .into_iter()
            .map(|s| match s {
                Covariance::Dense(m) => {
                    let m = symmetrize(&m);
                    if is_diagonal(&m) {
                        Covariance::Diagonal(m.diagonal())
                    } else {
                        Covariance::Dense(m)
                    }
                }
                d => d,
            })
            .collect();
        let sqrt = sigma.iter().map(Covariance::sqrt).collect();
        Ok(Self { sigma, sqrt })
    }

    pub fn isotropic(p: usize, variances: &[f64]) -> Result<Self> {
        Self::new(
            variances
                .iter()
                .map(|&s| Covariance::Diagonal(DVector::from_element(p, s)))
                .collect(),
        )
    }

    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    pub fn p(&self) -> usize {
        self.sigma[0].dim()
    }

    pub fn component(&self, r: usize) -> &Covariance {
        &self.sigma[r]
    }

    pub fn components(&self) -> &[Covariance] {
        &self.sigma
    }

    pub fn sqrt_component(&self, r: usize) -> &Covariance {
        &self.sqrt[r]
    }

    pub fn traces(&self) -> Vec<f64> {
        self.sigma.iter().map(Covariance::trace).collect()
    }
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i != j && m[(i, j)] != 0.0 {
                return false;
            }
        }
    }
    true
}

/// Replaces each `Σ̊_r` by `(p⁻¹ Tr Σ̊_r) Id`.
pub fn isotropic_approximation(noise: &NoiseModel) -> NoiseModel {
    let p = noise.p();
    let variances: Vec<f64> = noise.traces().iter().map(|t| t / p as f64).collect();
    NoiseModel::isotropic(p, &variances).expect("isotropic noise is always valid")
}

/// Diagonal noise whose first `zeroed_leading` entries are zero and whose
/// remaining entries are i.i.d. Exponential(1), deterministic in `seed`.
pub fn sample_exponential_noise(p: usize, zeroed_leading: usize, seed: u64) -> Result<Covariance> {
    if zeroed_leading >= p {
        return Err(Error::InvalidArgument(format!(
            "zeroed_leading ({zeroed_leading}) must be smaller than p ({p})"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let diag = DVector::from_fn(p, |i, _| {
        if i < zeroed_leading {
            0.0
        } else {
            Exp1.sample(&mut rng)
        }
    });
    Ok(Covariance::Diagonal(diag))
}

/// Spike matrices `Γ_r` (`ℓ_r × p`, possibly empty) whose rows are the signal
/// vectors of each component.
#[derive(Debug, Clone)]
pub struct SignalModel {
    gamma: Vec<DMatrix<f64>>,
    p: usize,
}

impl SignalModel {
    pub fn new(p: usize, gamma: Vec<DMatrix<f64>>) -> Result<Self> {
        for (r, g) in gamma.iter().enumerate() {
            if g.nrows() > 0 && g.ncols() != p {
                return Err(Error::DimensionMismatch(format!(
                    "Γ_{} has {} columns, expected {p}",
                    r + 1,
                    g.ncols()
                )));
            }
        }
        let gamma: Vec<DMatrix<f64>> = gamma
            .into_iter()
            .map(|g| if g.nrows() == 0 { DMatrix::zeros(0, p) } else { g })
            .collect();
        let out = Self { gamma, p };
        if out.ell_plus() as f64 > p as f64 / 10.0 {
            warn!(
                "{} signal rows for p = {p}; the low-rank regime assumes far fewer",
                out.ell_plus()
            );
        }
        Ok(out)
    }

    pub fn empty(k: usize, p: usize) -> Self {
        Self {
            gamma: vec![DMatrix::zeros(0, p); k],
            p,
        }
    }

    /// Builds from `(component, vector)` rows, in the given order within each
    /// component.
    pub fn from_rows(k: usize, p: usize, rows: &[(usize, DVector<f64>)]) -> Result<Self> {
        let mut per: Vec<Vec<&DVector<f64>>> = vec![Vec::new(); k];
        for (r, v) in rows {
            if *r >= k {
                return Err(Error::InvalidArgument(format!(
                    "signal component {} out of range (k = {k})",
                    r + 1
                )));
            }
            if v.len() != p {
                return Err(Error::DimensionMismatch(format!(
                    "signal vector has length {}, expected {p}",
                    v.len()
                )));
            }
            per[*r].push(v);
        }
        let gamma = per
            .into_iter()
            .map(|vs| DMatrix::from_fn(vs.len(), p, |i, j| vs[i][j]))
            .collect();
        Self::new(p, gamma)
    }

    pub fn k(&self) -> usize {
        self.gamma.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn component(&self, r: usize) -> &DMatrix<f64> {
        &self.gamma[r]
    }

    pub fn ell(&self) -> Vec<usize> {
        self.gamma.iter().map(|g| g.nrows()).collect()
    }

    pub fn ell_plus(&self) -> usize {
        self.gamma.iter().map(|g| g.nrows()).sum()
    }

    /// `Γ`, the vertical stack of all `Γ_r`.
    pub fn stacked(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.ell_plus(), self.p);
        let mut row = 0;
        for g in &self.gamma {
            out.view_mut((row, 0), (g.nrows(), self.p)).copy_from(g);
            row += g.nrows();
        }
        out
    }

    /// Component index of each row of `Γ`.
    pub fn row_components(&self) -> Vec<usize> {
        self.gamma
            .iter()
            .enumerate()
            .flat_map(|(r, g)| std::iter::repeat(r).take(g.nrows()))
            .collect()
    }

    /// Population covariance `Σ_r = Γ_rᵀΓ_r + Σ̊_r`.
    pub fn population_covariance(&self, noise: &NoiseModel, r: usize) -> DMatrix<f64> {
        let g = &self.gamma[r];
        g.transpose() * g + noise.component(r).to_dense()
    }
}

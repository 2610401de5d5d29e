//! TOML run configuration: design, noise and signal models plus optional
//! grid and simulation settings.
//!
//! ```toml
//! design = "one_way"          # one_way | sample_covariance | custom
//! n_pairs = 200
//! p = 800
//!
//! [[noise]]
//! kind = "exponential"
//! zeroed = 4
//! seed = 11
//!
//! [[noise]]
//! kind = "isotropic"
//! sigma2 = 1.0
//!
//! [[signal]]
//! component = 1               # 1-based
//! basis = 1                   # 1-based coordinate
//! scale = 5.656854
//! ```
//!
//! Matrix files are whitespace-separated text whose first line is
//! `rows cols`, followed by one matrix row per line. Relative paths are
//! resolved against the directory of the config file.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{
    build_one_way_layout, build_sample_covariance, sample_exponential_noise, Covariance, ModelDesign, NoiseModel,
    SignalModel,
};
use crate::montecarlo::{SimulationConfig, XiDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    OneWay,
    SampleCovariance,
    Custom,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomDesign {
    pub incidence: Vec<PathBuf>,
    pub kernel: PathBuf,
    pub fixed_effects: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    Isotropic { sigma2: f64 },
    Diagonal { path: PathBuf },
    Dense { path: PathBuf },
    Exponential { zeroed: usize, seed: u64 },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    /// 1-based component index.
    pub component: usize,
    /// 1-based coordinate of a basis vector.
    pub basis: Option<usize>,
    /// Sparse `[coordinate, value]` pairs, coordinates 1-based.
    pub entries: Option<Vec<(usize, f64)>>,
    pub vector: Option<Vec<f64>>,
    pub path: Option<PathBuf>,
    /// Multiplies the vector; `√μ` for a basis spike of strength `μ`.
    pub scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub step: Option<f64>,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
    pub xi: Option<XiDistribution>,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub design: DesignKind,
    pub p: usize,
    pub n_pairs: Option<usize>,
    pub group_size: Option<usize>,
    pub n: Option<usize>,
    /// 1-based component the estimator targets; defaults to 1.
    pub target: Option<usize>,
    pub custom: Option<CustomDesign>,
    #[serde(default)]
    pub noise: Vec<NoiseSpec>,
    #[serde(default)]
    pub signal: Vec<SignalSpec>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub simulation: SimulationSpec,
}

/// A configuration with every model built.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub raw: RunConfig,
    pub design: ModelDesign,
    pub noise: NoiseModel,
    pub signal: SignalModel,
    /// 0-based target component.
    pub target: usize,
}

impl ResolvedConfig {
    pub fn simulation(&self) -> SimulationConfig {
        let d = SimulationConfig::default();
        let s = &self.raw.simulation;
        SimulationConfig {
            replicates: s.replicates.unwrap_or(d.replicates),
            seed: s.seed.unwrap_or(d.seed),
            xi: s.xi.unwrap_or(d.xi),
            delta: s.delta.unwrap_or(d.delta),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses a matrix file: a `rows cols` header, then whitespace-separated
/// rows.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_matrix(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn parse_matrix(text: &str) -> std::result::Result<DMatrix<f64>, String> {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or("empty matrix file")?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| format!("bad header `{header}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let [rows, cols] = dims[..] else {
        return Err(format!("header must be `rows cols`, got `{header}`"));
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for line in lines {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| format!("bad entry `{t}`: {e}")))
            .collect::<std::result::Result<_, _>>()?;
        if row.len() != cols {
            return Err(format!("row {} has {} entries, expected {cols}", seen + 1, row.len()));
        }
        data.extend(row);
        seen += 1;
    }
    if seen != rows {
        return Err(format!("found {seen} rows, expected {rows}"));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn write_matrix(m: &DMatrix<f64>) -> String {
    let mut s = format!("{} {}\n", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|x| format!("{x:e}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

fn as_vector(m: DMatrix<f64>, what: &str) -> Result<DVector<f64>> {
    if m.ncols() == 1 {
        Ok(m.column(0).into_owned())
    } else if m.nrows() == 1 {
        Ok(m.row(0).transpose())
    } else {
        Err(Error::Config(format!("{what} must be a single row or column, got {}x{}", m.nrows(), m.ncols())))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::parse(&text)
    }

    /// Builds the models; relative paths are taken from `base`.
    pub fn resolve(self, base: &Path) -> Result<ResolvedConfig> {
        let at = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let p = self.p;
        if p == 0 {
            return Err(Error::Config("p must be positive".into()));
        }
        let design = match self.design {
            DesignKind::OneWay => {
                let n_pairs = self.n_pairs.ok_or_else(|| Error::Config("one_way design needs n_pairs".into()))?;
                build_one_way_layout(n_pairs, p, self.group_size.unwrap_or(2))?
            }
            DesignKind::SampleCovariance => {
                let n = self.n.ok_or_else(|| Error::Config("sample_covariance design needs n".into()))?;
                build_sample_covariance(n, p)?
            }
            DesignKind::Custom => {
                let c = self
                    .custom
                    .as_ref()
                    .ok_or_else(|| Error::Config("custom design needs a [custom] section".into()))?;
                let u = c.incidence.iter().map(|f| read_matrix(&at(f))).collect::<Result<Vec<_>>>()?;
                let b = read_matrix(&at(&c.kernel))?;
                let x = c.fixed_effects.as_ref().map(|f| read_matrix(&at(f))).transpose()?;
                ModelDesign::new(p, u, b, x)?
            }
        };
        let k = design.k();
        if self.noise.len() != k {
            return Err(Error::Config(format!(
                "design has {k} components but {} noise entries were given",
                self.noise.len()
            )));
        }
        let covs = self
            .noise
            .iter()
            .map(|spec| -> Result<Covariance> {
                Ok(match spec {
                    NoiseSpec::Isotropic { sigma2 } => Covariance::Diagonal(DVector::from_element(p, *sigma2)),
                    NoiseSpec::Diagonal { path } => Covariance::Diagonal(as_vector(read_matrix(&at(path))?, "diagonal noise")?),
                    NoiseSpec::Dense { path } => Covariance::Dense(read_matrix(&at(path))?),
                    NoiseSpec::Exponential { zeroed, seed } => sample_exponential_noise(p, *zeroed, *seed)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let noise = NoiseModel::new(covs)?;
        let mut rows = Vec::new();
        for (i, s) in self.signal.iter().enumerate() {
            if s.component == 0 || s.component > k {
                return Err(Error::Config(format!("signal {}: component {} not in 1..={k}", i + 1, s.component)));
            }
            let given = [s.basis.is_some(), s.entries.is_some(), s.vector.is_some(), s.path.is_some()];
            if given.iter().filter(|&&g| g).count() != 1 {
                return Err(Error::Config(format!(
                    "signal {}: give exactly one of basis, entries, vector, path",
                    i + 1
                )));
            }
            let mut v = DVector::zeros(p);
            let coord = |j: usize| -> Result<usize> {
                if j == 0 || j > p {
                    Err(Error::Config(format!("signal {}: coordinate {j} not in 1..={p}", i + 1)))
                } else {
                    Ok(j - 1)
                }
            };
            if let Some(j) = s.basis {
                v[coord(j)?] = 1.0;
            }
            if let Some(entries) = &s.entries {
                for &(j, x) in entries {
                    v[coord(j)?] += x;
                }
            }
            if let Some(vec) = &s.vector {
                if vec.len() != p {
                    return Err(Error::Config(format!("signal {}: vector has length {}, expected {p}", i + 1, vec.len())));
                }
                v = DVector::from_column_slice(vec);
            }
            if let Some(path) = &s.path {
                v = as_vector(read_matrix(&at(path))?, "signal vector")?;
                if v.len() != p {
                    return Err(Error::Config(format!("signal {}: file vector has length {}, expected {p}", i + 1, v.len())));
                }
            }
            rows.push((s.component - 1, v * s.scale.unwrap_or(1.0)));
        }
        let signal = SignalModel::from_rows(k, p, &rows)?;
        let target = self.target.unwrap_or(1);
        if target == 0 || target > k {
            return Err(Error::Config(format!("target {target} not in 1..={k}")));
        }
        Ok(ResolvedConfig {
            raw: self,
            design,
            noise,
            signal,
            target: target - 1,
        })
    }
}

/// Reads and resolves a config file.
pub fn load_config(path: &Path) -> Result<ResolvedConfig> {
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    RunConfig::load(path)?.resolve(&base)
}

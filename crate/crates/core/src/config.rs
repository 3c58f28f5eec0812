//! TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fine::{Boundary, TimeGrid};
use crate::grid::{oversampling_layers, RegionBoundary};
use crate::media::{CrossedParams, LayeredParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MediumSpec {
    Crossed(CrossedParams),
    Layered(LayeredParams),
    /// Raster file, resolved relative to the config file.
    Raster { path: PathBuf },
    /// `kappa` everywhere, one continuum.
    Homogeneous { kappa: f64 },
}

/// Spatial data `f(x)`, `u0(x)` or `psi(x)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    #[default]
    Zero,
    Constant { value: f64 },
    /// `amplitude * exp(-decay |x - center|^2)`.
    Gaussian { amplitude: f64, decay: f64, center: [f64; 2] },
}

impl FieldSpec {
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        match *self {
            FieldSpec::Zero => 0.0,
            FieldSpec::Constant { value } => value,
            FieldSpec::Gaussian {
                amplitude,
                decay,
                center,
            } => amplitude * (-decay * ((x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2))).exp(),
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let ok = match *self {
            FieldSpec::Zero => true,
            FieldSpec::Constant { value } => value.is_finite(),
            FieldSpec::Gaussian {
                amplitude,
                decay,
                center,
            } => amplitude.is_finite() && decay.is_finite() && decay >= 0.0 && center.iter().all(|c| c.is_finite()),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{what}: parameters must be finite (decay >= 0)")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Fine cells per side.
    pub fine: usize,
    /// Coarse blocks per side `M`.
    pub coarse: usize,
    /// Oversampling layers; defaults to `ceil(-2 ln H)`.
    #[serde(default)]
    pub layers: Option<usize>,
    #[serde(default)]
    pub region_boundary: RegionBoundary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSpec {
    pub tau: f64,
    pub final_time: f64,
    /// One order for all continua or one per continuum.
    pub alpha: Vec<f64>,
    /// Times at which solutions are stored and compared.
    pub snapshots: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub boundary: Boundary,
    #[serde(default)]
    pub source: FieldSpec,
    #[serde(default)]
    pub initial: FieldSpec,
    #[serde(default)]
    pub velocity: FieldSpec,
}

/// Reaction field of the zero-order model: per-continuum values of `A` on
/// the labels of the medium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroOrderSpec {
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub medium: MediumSpec,
    pub grid: GridSpec,
    pub time: TimeSpec,
    pub problem: ProblemSpec,
    #[serde(default)]
    pub zero_order: Option<ZeroOrderSpec>,
    /// Directory the config was read from; resolves relative paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.name.trim().is_empty() {
            return bad("name", "must not be empty".into());
        }
        let g = &self.grid;
        if g.fine == 0 || g.coarse == 0 {
            return bad("grid", "cell and block counts must be positive".into());
        }
        if g.fine % g.coarse != 0 {
            return bad("grid.coarse", format!("{} blocks do not divide {} fine cells", g.coarse, g.fine));
        }
        let t = &self.time;
        if !(t.tau > 0.0 && t.tau.is_finite()) {
            return bad("time.tau", format!("must be positive, got {}", t.tau));
        }
        if !(t.final_time > 0.0 && t.final_time.is_finite()) {
            return bad("time.final_time", format!("must be positive, got {}", t.final_time));
        }
        if let Err(e) = TimeGrid::new(t.tau, t.final_time) {
            return bad("time", e.to_string());
        }
        let continua = self.continua();
        if t.alpha.is_empty() || (t.alpha.len() != 1 && Some(t.alpha.len()) != continua) {
            return bad("time.alpha", format!("{} orders given", t.alpha.len()));
        }
        if let Some(a) = t.alpha.iter().find(|a| !(**a > 1.0 && **a < 2.0)) {
            return bad("time.alpha", format!("orders must lie in (1, 2), got {a}"));
        }
        let grid = self.time_grid()?;
        for s in &t.snapshots {
            if let Err(e) = grid.step_of(*s) {
                return bad("time.snapshots", e.to_string());
            }
        }
        self.problem.source.validate("problem.source")?;
        self.problem.initial.validate("problem.initial")?;
        self.problem.velocity.validate("problem.velocity")?;
        match &self.medium {
            MediumSpec::Crossed(p) if p.kappa_low <= 0.0 || p.kappa_high <= 0.0 => {
                return bad("medium", "coefficients must be positive".into())
            }
            MediumSpec::Layered(p) if p.kappa_low <= 0.0 || p.kappa_high <= 0.0 => {
                return bad("medium", "coefficients must be positive".into())
            }
            MediumSpec::Homogeneous { kappa } if !(*kappa > 0.0) => {
                return bad("medium.kappa", format!("must be positive, got {kappa}"))
            }
            _ => {}
        }
        if let Some(z) = &self.zero_order {
            if z.values.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return bad("zero_order.values", "must be positive".into());
            }
            if continua.is_some_and(|n| n != z.values.len()) {
                return bad("zero_order.values", "need one value per continuum".into());
            }
        }
        Ok(())
    }

    /// Continuum count where the medium kind fixes it.
    pub fn continua(&self) -> Option<usize> {
        match self.medium {
            MediumSpec::Crossed(_) | MediumSpec::Layered(_) => Some(2),
            MediumSpec::Homogeneous { .. } => Some(1),
            MediumSpec::Raster { .. } => None,
        }
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.time.tau, self.time.final_time)
    }

    pub fn coarse_size(&self) -> f64 {
        1.0 / self.grid.coarse as f64
    }

    pub fn layers(&self) -> Result<usize> {
        match self.grid.layers {
            Some(l) => Ok(l),
            None => oversampling_layers(self.coarse_size()),
        }
    }

    pub fn snapshot_steps(&self) -> Result<Vec<usize>> {
        let grid = self.time_grid()?;
        self.time.snapshots.iter().map(|&t| grid.step_of(t)).collect()
    }

    pub fn raster_path(&self) -> Option<PathBuf> {
        match &self.medium {
            MediumSpec::Raster { path } => Some(self.base_dir.join(path)),
            _ => None,
        }
    }
}

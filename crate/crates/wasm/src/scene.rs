//! Browser-sized problems built on the same pipeline functions as the CLI.

use mchom::cells::solve_block_cells;
use mchom::config::{MediumSpec, RunConfig};
use mchom::grid::{
    build_coarse_partition, build_fine_mesh, build_region, CoarsePartition, RegionBoundary, StructuredMesh,
};
use mchom::macro_solver::continuum_slice;
use mchom::media::{crossed_field, layered_field, MediumField};
use mchom::metrics::{block_continuum_average, coarse_block_average};
use mchom::pipeline::{cell_set, effective_set, error_rows, fine_trajectory, macro_trajectory};
use mchom::{Error, Result};

/// Fine cells per side; twelve channel periods of ten cells.
pub const FINE: usize = 120;
const LAYERS: usize = 2;

fn config_text(medium: &str, coarse: usize, contrast: f64, alpha: &[f64], final_time: f64) -> Result<String> {
    let medium = match medium {
        "crossed" => "kind = \"crossed\"\ncells_per_side = 12\nchannel_width = 0.016666666666666666".to_string(),
        "layered" => "kind = \"layered\"\nstripes = 12\nstripe_width = 0.016666666666666666".to_string(),
        other => return Err(Error::InvalidArgument(format!("unknown medium `{other}`"))),
    };
    let alpha: Vec<String> = alpha.iter().map(|a| format!("{a:?}")).collect();
    Ok(format!(
        r#"name = "demo"

[medium]
{medium}
kappa_low = {low:e}
kappa_high = 1.0

[grid]
fine = {FINE}
coarse = {coarse}
layers = {LAYERS}

[time]
tau = 0.02
final_time = {final_time:?}
alpha = [{alpha}]
snapshots = [{final_time:?}]

[problem]
boundary = "dirichlet0"
source = {{ kind = "gaussian", amplitude = 1.0, decay = 40.0, center = [0.5, 0.5] }}
"#,
        low = 1.0 / contrast,
        alpha = alpha.join(", "),
    ))
}

/// Fine and upscaled solutions of one continuum at the final time.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    /// Relative error in percent, one entry per continuum.
    pub errors: Vec<f64>,
    /// Block averages of the fine solution over continuum 1, row-major.
    pub fine_blocks: Vec<f64>,
    /// Block averages of the coarse continuum-1 field, row-major.
    pub coarse_blocks: Vec<f64>,
}

pub struct Scene {
    medium_kind: String,
    coarse: usize,
    contrast: f64,
    mesh: StructuredMesh,
    part: CoarsePartition,
    medium: MediumField,
}

impl Scene {
    /// `medium` is `crossed` or `layered`; `coarse` blocks per side must
    /// divide 120 into whole channel periods.
    pub fn new(medium: &str, coarse: usize, contrast: f64) -> Result<Self> {
        if !(contrast >= 1.0 && contrast.is_finite()) {
            return Err(Error::InvalidArgument(format!("contrast must be at least 1, got {contrast}")));
        }
        if coarse == 0 || FINE % coarse != 0 || (FINE / coarse) % 10 != 0 {
            return Err(Error::InvalidArgument(format!("{coarse} blocks per side do not align with the channels")));
        }
        let cfg = RunConfig::from_toml(&config_text(medium, coarse, contrast, &[1.5], 1.0)?)?;
        let mesh = build_fine_mesh(FINE, FINE)?;
        let part = build_coarse_partition(&mesh, coarse)?;
        let medium_field = match &cfg.medium {
            MediumSpec::Crossed(p) => crossed_field(&mesh, p)?,
            MediumSpec::Layered(p) => layered_field(&mesh, p)?,
            _ => unreachable!("demo media are generated"),
        };
        Ok(Self {
            medium_kind: medium.to_string(),
            coarse,
            contrast,
            mesh,
            part,
            medium: medium_field,
        })
    }

    /// `log10(kappa)` per fine cell, row-major from `y = 0`; the two
    /// triangles of a cell carry the same coefficient.
    pub fn medium_image(&self) -> Vec<f64> {
        self.medium.values().chunks(2).map(|p| p[0].log10()).collect()
    }

    /// Nodes per side of one coarse block.
    pub fn block_nodes(&self) -> usize {
        FINE / self.coarse + 1
    }

    /// Nodal values of a basis on its block, row-major. `derivative` 0 is
    /// the average basis, 1 and 2 the x and y gradient bases.
    pub fn cell_basis(&self, block: usize, continuum: usize, derivative: usize) -> Result<Vec<f64>> {
        if block >= self.part.block_count() || continuum >= self.medium.continua() || derivative > 2 {
            return Err(Error::InvalidArgument("block, continuum or basis out of range".into()));
        }
        let region = build_region(&self.mesh, &self.part, block, LAYERS, RegionBoundary::Mirror)?;
        let cells = solve_block_cells(&region, &self.medium, &self.part)?;
        let basis = match derivative {
            0 => &cells.average[continuum],
            m => &cells.gradient[continuum][m - 1],
        };
        Ok(basis.values.clone())
    }

    /// Solves the fine problem and the upscaled model up to `final_time`
    /// (a multiple of 0.02) and compares block averages.
    pub fn simulate(&self, alpha: &[f64], final_time: f64) -> Result<Comparison> {
        let cfg = RunConfig::from_toml(&config_text(&self.medium_kind, self.coarse, self.contrast, alpha, final_time)?)?;
        let fine = fine_trajectory(&cfg, &self.mesh, &self.medium)?;
        let cells = cell_set(&cfg, &self.mesh, &self.medium, &self.part)?;
        let eff = effective_set(&cfg, &cells, &self.part)?;
        let coarse = macro_trajectory(&cfg, &self.mesh, &self.medium, &self.part, &eff)?;
        let rows = error_rows(&cfg, &self.mesh, &self.medium, &self.part, &fine, &coarse)?;
        let step = *cfg.snapshot_steps()?.last().expect("one snapshot");
        let fine_blocks = block_continuum_average(&self.mesh, &fine.snapshots[&step], &self.part, &self.medium, 0)?
            .into_iter()
            .map(|v| v.unwrap_or(f64::NAN))
            .collect();
        let nodes = self.part.coarse_mesh().node_count();
        let coarse_blocks = coarse_block_average(&self.part, continuum_slice(&coarse.snapshots[&step], nodes, 0))?;
        Ok(Comparison {
            errors: rows.last().map(|r| r.errors.clone()).unwrap_or_default(),
            fine_blocks,
            coarse_blocks,
        })
    }
}

//! Config-driven stages with content-addressed artifacts.
//!
//! Every artifact name carries a digest of exactly the configuration that
//! determines it, so re-running a stage whose artifact already exists is a
//! no-op and `full` resumes where an earlier run stopped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::caputo::FractionalOde;
use crate::cells::{solve_all_cells, CellSet};
use crate::config::{MediumSpec, RunConfig};
use crate::error::{Error, Result};
use crate::fine::{interpolate, FineSolver, Trajectory};
use crate::grid::{build_coarse_partition, build_fine_mesh, CoarsePartition, StructuredMesh};
use crate::macro_solver::{continuum_slice, macro_initial_conditions, solve_zero_order, MacroSolver};
use crate::media::{crossed_field, layered_field, load_raster, raster_to_string, MediumField};
use crate::metrics::{
    block_continuum_average, coarse_block_average, read_field, relative_error, table_to_string, ErrorRow, GridField,
    field_to_string,
};
use crate::upscale::{effective_to_string, load_effective, upscale, zero_order_constants, EffectiveSet};

fn digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn toml_of<T: serde::Serialize>(v: &T) -> String {
    toml::Value::try_from(v).expect("config section serializes").to_string()
}

/// Writes through a temporary file so partially written artifacts are never
/// mistaken for finished ones.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Result of the zero-order stage.
#[derive(Debug, Clone)]
pub struct ZeroOrderReport {
    pub path: PathBuf,
    /// Largest relative deviation from the scalar reference over all blocks,
    /// continua and steps.
    pub max_deviation: f64,
    /// Largest off-diagonal `|gamma_ijk|` or `|beta_ij|`.
    pub max_off_diagonal: f64,
}

pub struct Pipeline {
    cfg: RunConfig,
    out: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out.into();
        std::fs::create_dir_all(&out)?;
        Ok(Self { cfg, out })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn medium_key(&self) -> Result<String> {
        let raster = match self.cfg.raster_path() {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Ok(digest(&[&toml_of(&self.cfg.medium), &self.cfg.grid.fine.to_string(), &raster]))
    }

    fn fine_key(&self) -> Result<String> {
        Ok(digest(&[
            "fine",
            &self.medium_key()?,
            &toml_of(&self.cfg.time),
            &toml_of(&self.cfg.problem),
        ]))
    }

    fn cells_key(&self) -> Result<String> {
        Ok(digest(&[
            "cells",
            &self.medium_key()?,
            &self.cfg.grid.coarse.to_string(),
            &self.cfg.layers()?.to_string(),
            &toml_of(&self.cfg.grid.region_boundary),
        ]))
    }

    fn effective_key(&self) -> Result<String> {
        Ok(digest(&["effective", &self.cells_key()?, &toml_of(&self.cfg.problem.source)]))
    }

    fn macro_key(&self) -> Result<String> {
        Ok(digest(&[
            "macro",
            &self.effective_key()?,
            &toml_of(&self.cfg.time),
            &toml_of(&self.cfg.problem),
        ]))
    }

    pub fn medium_path(&self) -> Result<PathBuf> {
        Ok(self.out.join(format!("medium-{}.txt", self.medium_key()?)))
    }

    pub fn fine_dir(&self) -> Result<PathBuf> {
        Ok(self.out.join(format!("fine-{}", self.fine_key()?)))
    }

    pub fn cells_path(&self) -> Result<PathBuf> {
        Ok(self.out.join(format!("cells-{}.txt", self.cells_key()?)))
    }

    pub fn effective_path(&self) -> Result<PathBuf> {
        Ok(self.out.join(format!("effective-{}.txt", self.effective_key()?)))
    }

    pub fn macro_dir(&self) -> Result<PathBuf> {
        Ok(self.out.join(format!("macro-{}", self.macro_key()?)))
    }

    pub fn errors_path(&self) -> Result<PathBuf> {
        let key = digest(&["errors", &self.fine_key()?, &self.macro_key()?]);
        Ok(self.out.join(format!("errors-{key}.csv")))
    }

    pub fn zero_order_path(&self) -> Result<PathBuf> {
        let key = digest(&[
            "zero-order",
            &self.medium_key()?,
            &self.cfg.grid.coarse.to_string(),
            &self.cfg.zero_order.as_ref().map(toml_of).unwrap_or_default(),
            &toml_of(&self.cfg.time),
            &toml_of(&self.cfg.problem.source),
        ]);
        Ok(self.out.join(format!("zero-order-{key}.txt")))
    }

    pub fn mesh(&self) -> Result<StructuredMesh> {
        build_fine_mesh(self.cfg.grid.fine, self.cfg.grid.fine)
    }

    pub fn partition(&self, mesh: &StructuredMesh) -> Result<CoarsePartition> {
        build_coarse_partition(mesh, self.cfg.grid.coarse)
    }

    fn build_medium(&self, mesh: &StructuredMesh) -> Result<MediumField> {
        match &self.cfg.medium {
            MediumSpec::Crossed(p) => crossed_field(mesh, p),
            MediumSpec::Layered(p) => layered_field(mesh, p),
            MediumSpec::Homogeneous { kappa } => MediumField::homogeneous(mesh.element_count(), *kappa),
            MediumSpec::Raster { .. } => load_raster(self.cfg.raster_path().expect("raster medium"), mesh),
        }
    }

    /// Medium on `mesh`, read from its artifact when present.
    pub fn medium(&self, mesh: &StructuredMesh) -> Result<MediumField> {
        let path = self.medium_path()?;
        if path.exists() {
            load_raster(&path, mesh)
        } else {
            self.build_medium(mesh)
        }
    }

    pub fn generate_media(&self) -> Result<PathBuf> {
        let path = self.medium_path()?;
        if path.exists() {
            log::info!("medium: reusing {}", path.display());
            return Ok(path);
        }
        let mesh = self.mesh()?;
        let medium = self.build_medium(&mesh)?;
        write_atomic(&path, &raster_to_string(&mesh, &medium)?)?;
        log::info!("medium: wrote {}", path.display());
        Ok(path)
    }

    fn snapshot_file(dir: &Path, step: usize, continuum: Option<usize>) -> PathBuf {
        match continuum {
            Some(i) => dir.join(format!("U{}-step{step:04}.txt", i + 1)),
            None => dir.join(format!("u-step{step:04}.txt")),
        }
    }

    fn finish_dir(dir: &Path) -> Result<()> {
        write_atomic(&dir.join("complete"), "")
    }

    fn is_complete(dir: &Path) -> bool {
        dir.join("complete").exists()
    }

    pub fn solve_fine(&self) -> Result<PathBuf> {
        let dir = self.fine_dir()?;
        if Self::is_complete(&dir) {
            log::info!("fine: reusing {}", dir.display());
            return Ok(dir);
        }
        self.generate_media()?;
        let mesh = self.mesh()?;
        let medium = self.medium(&mesh)?;
        let trajectory = fine_trajectory(&self.cfg, &mesh, &medium)?;
        std::fs::create_dir_all(&dir)?;
        for (&step, u) in &trajectory.snapshots {
            let field = GridField {
                nx: mesh.nx(),
                ny: mesh.ny(),
                values: u.clone(),
            };
            write_atomic(&Self::snapshot_file(&dir, step, None), &field_to_string(&field)?)?;
        }
        Self::finish_dir(&dir)?;
        log::info!("fine: wrote {}", dir.display());
        Ok(dir)
    }

    fn cells_report(cells: &CellSet) -> String {
        let mut s = String::from("# mchom cells report v1\n");
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        let mut stationarity = 0.0f64;
        for b in cells.blocks.iter().flat_map(|b| b.bases()) {
            lo = lo.min(b.energy);
            hi = hi.max(b.energy);
            stationarity = stationarity.max(b.stationarity_residual);
        }
        let _ = writeln!(s, "blocks {}", cells.blocks.len());
        let _ = writeln!(s, "layers {}", cells.layers);
        let _ = writeln!(s, "distinct_regions {}", cells.distinct_regions);
        let _ = writeln!(s, "max_constraint_residual {:e}", cells.max_constraint_residual());
        let _ = writeln!(s, "max_stationarity_residual {stationarity:e}");
        let _ = writeln!(s, "energy_range {lo:e} {hi:e}");
        s
    }

    pub fn solve_cells(&self) -> Result<PathBuf> {
        let path = self.cells_path()?;
        if path.exists() {
            log::info!("cells: reusing {}", path.display());
            return Ok(path);
        }
        self.generate_media()?;
        let mesh = self.mesh()?;
        let medium = self.medium(&mesh)?;
        let part = self.partition(&mesh)?;
        let cells = cell_set(&self.cfg, &mesh, &medium, &part)?;
        write_atomic(&path, &Self::cells_report(&cells))?;
        Ok(path)
    }

    pub fn upscale(&self) -> Result<PathBuf> {
        let path = self.effective_path()?;
        if path.exists() {
            log::info!("upscale: reusing {}", path.display());
            return Ok(path);
        }
        self.generate_media()?;
        let mesh = self.mesh()?;
        let medium = self.medium(&mesh)?;
        let part = self.partition(&mesh)?;
        let cells = cell_set(&self.cfg, &mesh, &medium, &part)?;
        let cells_path = self.cells_path()?;
        if !cells_path.exists() {
            write_atomic(&cells_path, &Self::cells_report(&cells))?;
        }
        let eff = effective_set(&self.cfg, &cells, &part)?;
        write_atomic(&path, &effective_to_string(&eff))?;
        log::info!("upscale: wrote {}", path.display());
        Ok(path)
    }

    pub fn effective(&self) -> Result<EffectiveSet> {
        load_effective(self.upscale()?)
    }

    pub fn solve_macro(&self) -> Result<PathBuf> {
        let dir = self.macro_dir()?;
        if Self::is_complete(&dir) {
            log::info!("macro: reusing {}", dir.display());
            return Ok(dir);
        }
        let eff = self.effective()?;
        let mesh = self.mesh()?;
        let medium = self.medium(&mesh)?;
        let part = self.partition(&mesh)?;
        let trajectory = macro_trajectory(&self.cfg, &mesh, &medium, &part, &eff)?;
        std::fs::create_dir_all(&dir)?;
        let m = part.blocks_per_side();
        let nodes = part.coarse_mesh().node_count();
        for (&step, u) in &trajectory.snapshots {
            for i in 0..eff.continua {
                let field = GridField {
                    nx: m,
                    ny: m,
                    values: continuum_slice(u, nodes, i).to_vec(),
                };
                write_atomic(&Self::snapshot_file(&dir, step, Some(i)), &field_to_string(&field)?)?;
            }
        }
        Self::finish_dir(&dir)?;
        log::info!("macro: wrote {}", dir.display());
        Ok(dir)
    }

    /// Error table from stored fine and macro snapshots; fails if either is
    /// missing.
    pub fn compare(&self) -> Result<(PathBuf, Vec<ErrorRow>)> {
        let (fine_dir, macro_dir) = (self.fine_dir()?, self.macro_dir()?);
        for (what, dir) in [("fine", &fine_dir), ("macro", &macro_dir)] {
            if !Self::is_complete(dir) {
                return Err(Error::invalid(format!(
                    "no stored {what} solution at {}; run that stage first",
                    dir.display()
                )));
            }
        }
        let mesh = self.mesh()?;
        let medium = self.medium(&mesh)?;
        let part = self.partition(&mesh)?;
        let time = self.cfg.time_grid()?;
        let (mut fine, mut coarse) = (BTreeMap::new(), BTreeMap::new());
        for step in self.cfg.snapshot_steps()? {
            fine.insert(step, read_field(Self::snapshot_file(&fine_dir, step, None))?.values);
            let mut stacked = Vec::new();
            for i in 0..medium.continua() {
                stacked.extend(read_field(Self::snapshot_file(&macro_dir, step, Some(i)))?.values);
            }
            coarse.insert(step, stacked);
        }
        let rows = error_rows(
            &self.cfg,
            &mesh,
            &medium,
            &part,
            &Trajectory { time, snapshots: fine },
            &Trajectory { time, snapshots: coarse },
        )?;
        let path = self.errors_path()?;
        write_atomic(&path, &table_to_string(&rows, medium.continua()))?;
        log::info!("compare: wrote {}", path.display());
        Ok((path, rows))
    }

    /// generate, fine, cells, upscale, macro, compare.
    pub fn full(&self) -> Result<(PathBuf, Vec<ErrorRow>)> {
        self.generate_media()?;
        self.solve_fine()?;
        self.solve_cells()?;
        self.upscale()?;
        self.solve_macro()?;
        self.compare()
    }

    /// Decoupled zero-order model on the reaction field given by
    /// `[zero_order] values`, checked against scalar fractional ODEs with
    /// block-averaged sources.
    pub fn zero_order(&self) -> Result<ZeroOrderReport> {
        let spec = self
            .cfg
            .zero_order
            .as_ref()
            .ok_or_else(|| Error::Config("zero_order: section required for this mode".into()))?;
        self.generate_media()?;
        let mesh = self.mesh()?;
        let a = self.medium(&mesh)?.with_continuum_values(&spec.values)?;
        let part = self.partition(&mesh)?;
        let n = a.continua();
        let alphas = if self.cfg.time.alpha.len() == 1 {
            vec![self.cfg.time.alpha[0]; n]
        } else {
            self.cfg.time.alpha.clone()
        };
        let source = self.cfg.problem.source;
        let f = move |x: [f64; 2]| source.eval(x);
        let blocks = (0..part.block_count())
            .map(|b| zero_order_constants(&mesh, &part, &a, b, &f))
            .collect::<Result<Vec<_>>>()?;
        let time = self.cfg.time_grid()?;
        let solution = solve_zero_order(&blocks, &alphas, time)?;

        let mut max_off_diagonal = 0.0f64;
        for b in &blocks {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        max_off_diagonal = max_off_diagonal.max(b.beta_matrix[i * n + j].abs());
                    }
                    for k in 0..n {
                        if !(i == j && j == k) {
                            max_off_diagonal = max_off_diagonal.max(b.gamma_tensor[(i * n + j) * n + k].abs());
                        }
                    }
                }
            }
        }

        let mut report = String::from("# mchom zero-order report v1\n");
        let _ = writeln!(report, "# block,continuum,U_final,reference_final,max_relative_deviation");
        let mut max_deviation = 0.0f64;
        for (k, b) in blocks.iter().enumerate() {
            for i in 0..n {
                let (mut fs, mut vol) = (0.0, 0.0);
                for &e in part.block_elements(b.block) {
                    if a.labels()[e] == i {
                        fs += f(mesh.barycenter(e)) * mesh.element_area(e);
                        vol += mesh.element_area(e);
                    }
                }
                let rhs = fs / vol;
                let reference =
                    FractionalOde::single(alphas[i], 1.0, spec.values[i]).solve(time.tau, time.steps, 0.0, 0.0, |_| rhs)?;
                let mut dev = 0.0f64;
                for (s, r) in reference.iter().enumerate() {
                    let u = solution.values[s][k * n + i];
                    if *r != 0.0 {
                        dev = dev.max((u - r).abs() / r.abs());
                    } else {
                        dev = dev.max(u.abs());
                    }
                }
                max_deviation = max_deviation.max(dev);
                let _ = writeln!(
                    report,
                    "{},{},{:e},{:e},{:e}",
                    b.block,
                    i + 1,
                    solution.values[time.steps][k * n + i],
                    reference[time.steps],
                    dev
                );
            }
        }
        let _ = writeln!(report, "# max_relative_deviation {max_deviation:e}");
        let _ = writeln!(report, "# max_off_diagonal {max_off_diagonal:e}");
        let path = self.zero_order_path()?;
        write_atomic(&path, &report)?;
        log::info!("zero-order: wrote {}", path.display());
        Ok(ZeroOrderReport {
            path,
            max_deviation,
            max_off_diagonal,
        })
    }
}

/// Fine-scale solution at the configured snapshot steps.
pub fn fine_trajectory(cfg: &RunConfig, mesh: &StructuredMesh, medium: &MediumField) -> Result<Trajectory> {
    let time = cfg.time_grid()?;
    let solver = FineSolver::new(mesh, medium, &cfg.time.alpha, time, cfg.problem.boundary)?;
    let p = &cfg.problem;
    let u0 = interpolate(mesh, |x| p.initial.eval(x));
    let psi = interpolate(mesh, |x| p.velocity.eval(x));
    log::info!("fine: {} nodes, {} steps", mesh.node_count(), time.steps);
    solver.run(u0, psi, &|x, _| p.source.eval(x), &cfg.snapshot_steps()?)
}

pub fn cell_set(cfg: &RunConfig, mesh: &StructuredMesh, medium: &MediumField, part: &CoarsePartition) -> Result<CellSet> {
    let layers = cfg.layers()?;
    log::info!(
        "cells: {} blocks, l = {layers}, {:?} regions",
        part.block_count(),
        cfg.grid.region_boundary
    );
    solve_all_cells(mesh, medium, part, layers, cfg.grid.region_boundary)
}

/// Effective blocks with load moments of the (steady) configured source.
pub fn effective_set(cfg: &RunConfig, cells: &CellSet, part: &CoarsePartition) -> Result<EffectiveSet> {
    let source = cfg.problem.source;
    upscale(cells, part, &move |x, _| source.eval(x), &[0.0])
}

/// Coarse solution, continua stacked per snapshot.
pub fn macro_trajectory(
    cfg: &RunConfig,
    mesh: &StructuredMesh,
    medium: &MediumField,
    part: &CoarsePartition,
    eff: &EffectiveSet,
) -> Result<Trajectory> {
    let p = &cfg.problem;
    let u0 = macro_initial_conditions(mesh, &interpolate(mesh, |x| p.initial.eval(x)), part, medium)?;
    let psi = macro_initial_conditions(mesh, &interpolate(mesh, |x| p.velocity.eval(x)), part, medium)?;
    let solver = MacroSolver::new(part, eff, &cfg.time.alpha, cfg.time_grid()?, p.boundary)?;
    solver.run(u0, psi, &cfg.snapshot_steps()?)
}

/// Relative errors per continuum at every configured snapshot.
pub fn error_rows(
    cfg: &RunConfig,
    mesh: &StructuredMesh,
    medium: &MediumField,
    part: &CoarsePartition,
    fine: &Trajectory,
    coarse: &Trajectory,
) -> Result<Vec<ErrorRow>> {
    let nodes = part.coarse_mesh().node_count();
    let missing = |what: &str, step: usize| Error::invalid(format!("{what} snapshot for step {step} is missing"));
    let mut rows = Vec::new();
    for step in cfg.snapshot_steps()? {
        let u = fine.snapshots.get(&step).ok_or_else(|| missing("fine", step))?;
        let stacked = coarse.snapshots.get(&step).ok_or_else(|| missing("coarse", step))?;
        let mut errors = Vec::with_capacity(medium.continua());
        for i in 0..medium.continua() {
            let reference = block_continuum_average(mesh, u, part, medium, i)?;
            let averaged = coarse_block_average(part, continuum_slice(stacked, nodes, i))?;
            errors.push(relative_error(&averaged, &reference)?);
        }
        rows.push(ErrorRow {
            t: fine.time.time(step),
            errors,
        });
    }
    Ok(rows)
}

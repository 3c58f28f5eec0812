//! Constrained cell problems on oversampled regions.
//!
//! Each basis function minimizes `int_{R+} kappa |grad phi|^2` (natural
//! boundary conditions) subject to one constraint per member block `R^p`
//! and continuum `j`, written in normalized form
//!
//! ```text
//! int_{R^p} phi psi_j / int_{R^p} psi_j = delta_ij                        (average basis)
//! int_{R^p} phi psi_j / int_{R^p} psi_j = delta_ij (x_m^{p,j} - c_{mj})   (gradient basis)
//! ```
//!
//! where `x^{p,j}` is the centroid of continuum `j` in `R^p` and `c_{mj}`
//! the one in the center block. All local computations use coordinates
//! relative to the center block corner, so equal media give bitwise equal
//! bases regardless of position.

use std::collections::HashMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fem::{assemble_stiffness, ConstraintSet, SaddleSolver};
use crate::grid::{build_region, CoarsePartition, OversampledRegion, RegionBoundary, StructuredMesh};
use crate::media::MediumField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisKind {
    /// `phi_i`.
    Average,
    /// `phi_i^m` with direction `m` in `{0, 1}`.
    Gradient(usize),
}

/// One basis function with its solve diagnostics.
#[derive(Debug, Clone)]
pub struct CellBasis {
    pub block: usize,
    /// Zero-based continuum index `i`.
    pub continuum: usize,
    pub kind: BasisKind,
    /// Nodal values, on the oversampled region or restricted to the center
    /// block (see [`CellBasis::restrict`]).
    pub values: Vec<f64>,
    /// Multipliers `beta_ij^p = -lambda` of the constraint rows, indexed `p * N + j`.
    pub multipliers: Vec<f64>,
    pub constraint_residual: f64,
    pub stationarity_residual: f64,
    /// `int_{R+} kappa |grad phi|^2`.
    pub energy: f64,
}

impl CellBasis {
    /// Copy with values restricted to the given local nodes.
    pub fn restrict(&self, nodes: &[usize]) -> CellBasis {
        CellBasis {
            values: nodes.iter().map(|&n| self.values[n]).collect(),
            ..self.clone()
        }
    }
}

/// `(sum psi_j x, sum psi_j)` accumulators over elements.
fn continuum_moments(mesh: &StructuredMesh, labels: &[usize], elements: impl Iterator<Item = usize>, n: usize) -> Vec<[f64; 3]> {
    let mut acc = vec![[0.0; 3]; n];
    for e in elements {
        let a = mesh.element_area(e);
        let b = mesh.barycenter(e);
        let m = &mut acc[labels[e]];
        m[0] += a * b[0];
        m[1] += a * b[1];
        m[2] += a;
    }
    acc
}

/// Centroid `int x psi_j / int psi_j` of continuum `j` over the given
/// elements of `mesh`.
pub fn centroid(mesh: &StructuredMesh, labels: &[usize], elements: &[usize], j: usize) -> Result<[f64; 2]> {
    let n = labels.iter().copied().max().unwrap_or(0).max(j) + 1;
    let m = continuum_moments(mesh, labels, elements.iter().copied(), n)[j];
    if m[2] == 0.0 {
        return Err(Error::ConstraintDegeneracy(format!("continuum {} is empty", j + 1)));
    }
    Ok([m[0] / m[2], m[1] / m[2]])
}

/// Centroids `c_{mj}` of every continuum in every coarse block, in global
/// coordinates.
#[derive(Debug, Clone)]
pub struct CentroidTable {
    continua: usize,
    values: Vec<[f64; 2]>,
}

impl CentroidTable {
    pub fn new(fine: &StructuredMesh, medium: &MediumField, part: &CoarsePartition) -> Result<Self> {
        let n = medium.continua();
        let mut values = Vec::with_capacity(part.block_count() * n);
        for b in 0..part.block_count() {
            for j in 0..n {
                values.push(centroid(fine, medium.labels(), part.block_elements(b), j).map_err(|_| {
                    Error::ConstraintDegeneracy(format!("coarse block {b} contains no element of continuum {}", j + 1))
                })?);
            }
        }
        Ok(Self { continua: n, values })
    }

    /// `c_{mj}` for zero-based `j` and direction `m`.
    pub fn get(&self, block: usize, j: usize, m: usize) -> f64 {
        self.values[block * self.continua + j][m]
    }
}

/// Factorized cell problem of one oversampled region; solves every basis
/// function of its center block.
pub struct CellProblem {
    block: usize,
    continua: usize,
    members: usize,
    center_member: usize,
    /// Local centroid of continuum `j` in member `p`, indexed `p * N + j`.
    member_centroids: Vec<[f64; 2]>,
    solver: SaddleSolver,
}

impl CellProblem {
    pub fn new(region: &OversampledRegion, medium: &MediumField) -> Result<Self> {
        let mesh = region.mesh();
        let n = medium.continua();
        let kappa: Vec<f64> = region.element_map().iter().map(|&e| medium.values()[e]).collect();
        let labels: Vec<usize> = region.element_map().iter().map(|&e| medium.labels()[e]).collect();
        let members = region.members().len();
        let stiffness = assemble_stiffness(mesh, &kappa)?;

        // per (member, continuum): centroid moments and constraint row entries
        let mut moments = vec![[0.0; 3]; members * n];
        let mut entries: Vec<(usize, usize, f64)> = Vec::with_capacity(3 * mesh.element_count());
        for (e, tri) in mesh.triangles().iter().enumerate() {
            let row = region.element_member()[e] * n + labels[e];
            let a = mesh.element_area(e);
            let b = mesh.barycenter(e);
            let m = &mut moments[row];
            m[0] += a * b[0];
            m[1] += a * b[1];
            m[2] += a;
            for &v in tri {
                entries.push((row, v, a / 3.0));
            }
        }
        entries.sort_unstable_by_key(|t| (t.0, t.1));
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); members * n];
        for (r, v, w) in entries {
            match rows[r].last_mut() {
                Some(last) if last.0 == v => last.1 += w,
                _ => rows[r].push((v, w)),
            }
        }
        let mut constraints = ConstraintSet::new(mesh.node_count());
        let mut member_centroids = Vec::with_capacity(members * n);
        for (r, mut row) in rows.into_iter().enumerate() {
            let (p, j) = (r / n, r % n);
            let vol = moments[r][2];
            if vol == 0.0 {
                return Err(Error::ConstraintDegeneracy(format!(
                    "oversampled region of block {}: member block {} contains no element of continuum {}",
                    region.center_block(),
                    region.members()[p],
                    j + 1
                )));
            }
            member_centroids.push([moments[r][0] / vol, moments[r][1] / vol]);
            for entry in &mut row {
                entry.1 /= vol;
            }
            constraints.push(
                row,
                format!("block {} member {} continuum {}", region.center_block(), region.members()[p], j + 1),
            )?;
        }
        let solver = SaddleSolver::new(stiffness, constraints)?;
        Ok(Self {
            block: region.center_block(),
            continua: n,
            members,
            center_member: region.center_member(),
            member_centroids,
            solver,
        })
    }

    pub fn continua(&self) -> usize {
        self.continua
    }

    /// Local centroid `c_{mj}` of the center block.
    pub fn center_centroid(&self, j: usize) -> [f64; 2] {
        self.member_centroids[self.center_member * self.continua + j]
    }

    /// Constraint right-hand side for basis `(i, kind)`.
    pub fn constraint_values(&self, i: usize, kind: BasisKind) -> Vec<f64> {
        let n = self.continua;
        let mut g = vec![0.0; self.members * n];
        for p in 0..self.members {
            let r = p * n + i;
            g[r] = match kind {
                BasisKind::Average => 1.0,
                BasisKind::Gradient(m) => self.member_centroids[r][m] - self.center_centroid(i)[m],
            };
        }
        g
    }

    pub fn solve(&self, i: usize, kind: BasisKind) -> Result<CellBasis> {
        if i >= self.continua {
            return Err(Error::invalid(format!("continuum {} out of range", i + 1)));
        }
        if let BasisKind::Gradient(m) = kind {
            if m > 1 {
                return Err(Error::invalid(format!("direction {m} out of range")));
            }
        }
        let s = self.solver.solve(&self.constraint_values(i, kind))?;
        let energy = self.solver.matrix().bilinear(&s.solution, &s.solution);
        Ok(CellBasis {
            block: self.block,
            continuum: i,
            kind,
            values: s.solution,
            multipliers: s.multipliers.iter().map(|l| -l).collect(),
            constraint_residual: s.constraint_residual,
            stationarity_residual: s.stationarity_residual,
            energy,
        })
    }
}

pub fn solve_average_cell(region: &OversampledRegion, medium: &MediumField, i: usize) -> Result<CellBasis> {
    CellProblem::new(region, medium)?.solve(i, BasisKind::Average)
}

pub fn solve_gradient_cell(region: &OversampledRegion, medium: &MediumField, i: usize, m: usize) -> Result<CellBasis> {
    CellProblem::new(region, medium)?.solve(i, BasisKind::Gradient(m))
}

/// All bases of one coarse block restricted to the block, with the block's
/// own mesh (local coordinates `[0, H]^2`) and medium.
#[derive(Debug, Clone)]
pub struct BlockCells {
    pub block: usize,
    pub mesh: StructuredMesh,
    pub kappa: Vec<f64>,
    pub labels: Vec<usize>,
    /// `phi_i`.
    pub average: Vec<CellBasis>,
    /// `phi_i^m`.
    pub gradient: Vec<[CellBasis; 2]>,
    /// Lower-left corner of the block in global coordinates.
    pub origin: [f64; 2],
}

impl BlockCells {
    pub fn continua(&self) -> usize {
        self.average.len()
    }

    pub fn bases(&self) -> impl Iterator<Item = &CellBasis> {
        self.average.iter().chain(self.gradient.iter().flatten())
    }

    pub fn max_constraint_residual(&self) -> f64 {
        self.bases().fold(0.0, |m, b| m.max(b.constraint_residual))
    }

    fn relabel(&self, block: usize, origin: [f64; 2]) -> Self {
        let mut out = self.clone();
        out.block = block;
        out.origin = origin;
        for b in out.average.iter_mut().chain(out.gradient.iter_mut().flatten()) {
            b.block = block;
        }
        out
    }
}

/// Solves every basis of the region's center block.
pub fn solve_block_cells(
    region: &OversampledRegion,
    medium: &MediumField,
    part: &CoarsePartition,
) -> Result<BlockCells> {
    let problem = CellProblem::new(region, medium)?;
    let n = medium.continua();
    let center = region.center_nodes();
    let average = (0..n)
        .map(|i| Ok(problem.solve(i, BasisKind::Average)?.restrict(center)))
        .collect::<Result<Vec<_>>>()?;
    let gradient = (0..n)
        .map(|i| {
            Ok([
                problem.solve(i, BasisKind::Gradient(0))?.restrict(center),
                problem.solve(i, BasisKind::Gradient(1))?.restrict(center),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let [cx, cy] = part.cells_per_block();
    let off = region.center_offset_cells();
    let mesh = region.mesh().submesh(off.0, off.1, cx, cy, off);
    let center_elements = region.center_elements();
    Ok(BlockCells {
        block: region.center_block(),
        mesh,
        kappa: center_elements.iter().map(|&e| medium.values()[region.element_map()[e]]).collect(),
        labels: center_elements.iter().map(|&e| medium.labels()[region.element_map()[e]]).collect(),
        average,
        gradient,
        origin: part.block_origin(region.center_block()),
    })
}

/// Digest of everything a region's cell problems depend on.
fn region_digest(fine: &StructuredMesh, region: &OversampledRegion, medium: &MediumField, part: &CoarsePartition) -> [u8; 32] {
    let mut h = Sha256::new();
    let mesh = region.mesh();
    for v in [
        fine.nx(),
        fine.ny(),
        mesh.nx(),
        mesh.ny(),
        region.center_offset_cells().0,
        region.center_offset_cells().1,
        part.cells_per_block()[0],
        part.cells_per_block()[1],
        medium.continua(),
    ] {
        h.update((v as u64).to_le_bytes());
    }
    for &e in region.element_map() {
        h.update(medium.values()[e].to_bits().to_le_bytes());
        h.update((medium.labels()[e] as u32).to_le_bytes());
    }
    h.finalize().into()
}

/// Cell bases for every block of a partition.
#[derive(Debug, Clone)]
pub struct CellSet {
    pub layers: usize,
    pub blocks: Vec<BlockCells>,
    /// Number of distinct regions actually solved.
    pub distinct_regions: usize,
}

impl CellSet {
    pub fn max_constraint_residual(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_constraint_residual()))
    }
}

/// Solves the cell problems of all blocks. Regions with identical local
/// media are solved once.
pub fn solve_all_cells(
    fine: &StructuredMesh,
    medium: &MediumField,
    part: &CoarsePartition,
    layers: usize,
    boundary: RegionBoundary,
) -> Result<CellSet> {
    medium.check_blocks_contain_all(part)?;
    // Regions are rebuilt for solving rather than kept: all of them at once
    // would hold a full submesh per block.
    let ids: Vec<usize> = (0..part.block_count()).collect();
    let digests: Vec<[u8; 32]> = map_maybe_parallel(&ids, |&b| {
        build_region(fine, part, b, layers, boundary).map(|r| region_digest(fine, &r, medium, part))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut first_of: HashMap<[u8; 32], usize> = HashMap::new();
    let mut unique = Vec::new();
    for (b, d) in digests.iter().enumerate() {
        first_of.entry(*d).or_insert_with(|| {
            unique.push(b);
            b
        });
    }
    log::info!(
        "cell problems: {} blocks, {} distinct oversampled regions (l = {layers})",
        part.block_count(),
        unique.len()
    );
    let solved: Vec<Result<Arc<BlockCells>>> =
        map_maybe_parallel(&unique, |&b| {
        let region = build_region(fine, part, b, layers, boundary)?;
        solve_block_cells(&region, medium, part).map(Arc::new)
    });
    let mut by_digest = HashMap::new();
    for (&b, s) in unique.iter().zip(solved) {
        by_digest.insert(digests[b], s?);
    }
    let blocks = (0..part.block_count())
        .map(|b| by_digest[&digests[b]].relabel(b, part.block_origin(b)))
        .collect();
    Ok(CellSet {
        layers,
        blocks,
        distinct_regions: unique.len(),
    })
}

#[cfg(feature = "parallel")]
pub(crate) fn map_maybe_parallel<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_maybe_parallel<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync + Send) -> Vec<U> {
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_coarse_partition, build_fine_mesh, build_oversampled_region};
    use crate::media::{crossed_field, CrossedParams};

    fn setup(cells: usize, blocks: usize, periods: usize, width: f64) -> (StructuredMesh, MediumField, CoarsePartition) {
        let mesh = build_fine_mesh(cells, cells).unwrap();
        let p = CrossedParams {
            cells_per_side: periods,
            channel_width: width,
            ..CrossedParams::default()
        };
        let medium = crossed_field(&mesh, &p).unwrap();
        let part = build_coarse_partition(&mesh, blocks).unwrap();
        (mesh, medium, part)
    }

    #[test]
    fn centroid_cases() {
        let mesh = build_fine_mesh(4, 4).unwrap();
        let labels = vec![0; mesh.element_count()];
        let all: Vec<usize> = (0..mesh.element_count()).collect();
        let c = centroid(&mesh, &labels, &all, 0).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[1] - 0.5).abs() < 1e-15);
        let c = centroid(&mesh, &labels, &[5], 0).unwrap();
        assert_eq!(c, mesh.barycenter(5));
        assert!(matches!(centroid(&mesh, &labels, &all, 1), Err(Error::ConstraintDegeneracy(_))));
    }

    #[test]
    fn centroid_table_matches_element_sum() {
        let (mesh, medium, part) = setup(40, 4, 4, 0.05);
        let t = CentroidTable::new(&mesh, &medium, &part).unwrap();
        for b in 0..part.block_count() {
            for j in 0..2 {
                let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
                for e in 0..mesh.element_count() {
                    if part.block_of_element(&mesh, e) == b && medium.labels()[e] == j {
                        let a = mesh.element_area(e);
                        sx += a * mesh.barycenter(e)[0];
                        sy += a * mesh.barycenter(e)[1];
                        s += a;
                    }
                }
                assert!((t.get(b, j, 0) - sx / s).abs() < 1e-12);
                assert!((t.get(b, j, 1) - sy / s).abs() < 1e-12);
                // zero first moment about the centroid
                let mut first = 0.0;
                for &e in part.block_elements(b) {
                    if medium.labels()[e] == j {
                        first += mesh.element_area(e) * (mesh.barycenter(e)[0] - t.get(b, j, 0));
                    }
                }
                assert!(first.abs() <= 1e-12 * s);
            }
        }
    }

    #[test]
    fn homogeneous_average_basis_is_one() {
        let mesh = build_fine_mesh(40, 40).unwrap();
        let medium = MediumField::homogeneous(mesh.element_count(), 1.0).unwrap();
        let part = build_coarse_partition(&mesh, 8).unwrap();
        let region = build_oversampled_region(&mesh, &part, part.block_id(3, 4), 2).unwrap();
        let b = solve_average_cell(&region, &medium, 0).unwrap();
        assert!(b.values.iter().all(|v| (v - 1.0).abs() < 1e-10));
        assert!(b.energy.abs() < 1e-12);
        assert!(b.multipliers.iter().all(|m| m.abs() < 1e-10));
    }

    #[test]
    fn homogeneous_gradient_basis_is_nearly_linear() {
        let mesh = build_fine_mesh(80, 80).unwrap();
        let medium = MediumField::homogeneous(mesh.element_count(), 1.0).unwrap();
        let part = build_coarse_partition(&mesh, 16).unwrap();
        let block = part.block_id(8, 7);
        let region = build_oversampled_region(&mesh, &part, block, 3).unwrap();
        let problem = CellProblem::new(&region, &medium).unwrap();
        let c = problem.center_centroid(0);
        for m in 0..2 {
            let b = problem.solve(0, BasisKind::Gradient(m)).unwrap();
            let (mut num, mut den) = (0.0, 0.0);
            for &n in region.center_nodes() {
                let exact = region.mesh().nodes()[n][m] - c[m];
                num += (b.values[n] - exact).powi(2);
                den += exact * exact;
            }
            assert!((num / den).sqrt() < 0.02, "m={m}: {}", (num / den).sqrt());
        }
    }

    #[test]
    fn constant_kappa_two_continua_partition_of_unity() {
        let (mesh, medium, part) = setup(60, 6, 6, 0.0333333333333333333);
        let medium = medium.with_continuum_values(&[1.0, 1.0]).unwrap();
        let region = build_oversampled_region(&mesh, &part, part.block_id(2, 3), 2).unwrap();
        let p = CellProblem::new(&region, &medium).unwrap();
        let a = p.solve(0, BasisKind::Average).unwrap();
        let b = p.solve(1, BasisKind::Average).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x + y - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn constraints_hold_and_center_gradient_rows_vanish() {
        let (mesh, medium, part) = setup(60, 6, 6, 0.0333333333333333333);
        let region = build_oversampled_region(&mesh, &part, part.block_id(0, 2), 2).unwrap();
        let p = CellProblem::new(&region, &medium).unwrap();
        for i in 0..2 {
            for kind in [BasisKind::Average, BasisKind::Gradient(0), BasisKind::Gradient(1)] {
                let b = p.solve(i, kind).unwrap();
                assert!(b.constraint_residual <= 1e-10);
                assert!(b.stationarity_residual <= 1e-8);
                if let BasisKind::Gradient(_) = kind {
                    let g = p.constraint_values(i, kind);
                    assert!(g[region.center_member() * 2 + i].abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn translation_equivariance() {
        // period 10 cells and blocks of 10 cells: interior regions coincide
        let (mesh, medium, part) = setup(100, 10, 10, 0.02);
        let r1 = build_oversampled_region(&mesh, &part, part.block_id(3, 3), 2).unwrap();
        let r2 = build_oversampled_region(&mesh, &part, part.block_id(5, 6), 2).unwrap();
        let a = solve_block_cells(&r1, &medium, &part).unwrap();
        let b = solve_block_cells(&r2, &medium, &part).unwrap();
        for (x, y) in a.bases().zip(b.bases()) {
            for (u, v) in x.values.iter().zip(&y.values) {
                assert!((u - v).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn cached_set_matches_direct_solves() {
        let (mesh, medium, part) = setup(60, 6, 6, 0.0333333333333333333);
        for boundary in [RegionBoundary::Clip, RegionBoundary::Mirror] {
            let set = solve_all_cells(&mesh, &medium, &part, 1, boundary).unwrap();
            assert!(set.distinct_regions < part.block_count());
            for b in [0, 7, 14, 35] {
                let region = build_region(&mesh, &part, b, 1, boundary).unwrap();
                let direct = solve_block_cells(&region, &medium, &part).unwrap();
                assert_eq!(set.blocks[b].block, b);
                for (x, y) in set.blocks[b].bases().zip(direct.bases()) {
                    assert_eq!(x.values, y.values);
                }
            }
            assert!(set.max_constraint_residual() <= 1e-10);
        }
    }

    #[test]
    fn center_block_ordering() {
        let (mesh, medium, part) = setup(60, 6, 6, 0.0333333333333333333);
        let region = build_oversampled_region(&mesh, &part, part.block_id(4, 1), 1).unwrap();
        let cells = solve_block_cells(&region, &medium, &part).unwrap();
        let origin = part.block_origin(region.center_block());
        for (k, &e) in part.block_elements(region.center_block()).iter().enumerate() {
            let g = mesh.barycenter(e);
            let l = cells.mesh.barycenter(k);
            assert!((g[0] - origin[0] - l[0]).abs() < 1e-12 && (g[1] - origin[1] - l[1]).abs() < 1e-12);
            assert_eq!(cells.labels[k], medium.labels()[e]);
        }
    }

    #[test]
    fn degenerate_member_is_reported() {
        let mesh = build_fine_mesh(20, 20).unwrap();
        let labels: Vec<usize> = (0..mesh.element_count())
            .map(|e| usize::from(mesh.barycenter(e)[0] < 0.5))
            .collect();
        let values = labels.iter().map(|&l| if l == 1 { 1.0 } else { 1e-4 }).collect();
        let medium = MediumField::new(values, labels, 2).unwrap();
        let part = build_coarse_partition(&mesh, 4).unwrap();
        let region = build_oversampled_region(&mesh, &part, 0, 1).unwrap();
        match CellProblem::new(&region, &medium) {
            Err(Error::ConstraintDegeneracy(msg)) => assert!(msg.contains("continuum 1")),
            other => panic!("expected degeneracy, got {:?}", other.err()),
        }
        assert!(solve_all_cells(&mesh, &medium, &part, 1, RegionBoundary::Mirror).is_err());
    }
}

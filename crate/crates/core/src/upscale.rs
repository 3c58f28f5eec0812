//! Effective coefficients of the coarse model computed from cell bases,
//! and the closed-form constants of the zero-order (reaction-only) model.

use std::fmt::Write as _;
use std::path::Path;

use crate::cells::{BlockCells, CellSet};
use crate::error::{Error, Result};
use crate::fem::{assemble_load, assemble_stiffness, assemble_weighted_mass};
use crate::grid::{CoarsePartition, StructuredMesh};
use crate::media::MediumField;

/// `N x N` matrix stored row-major as `[j * N + i]`.
pub type Square = Vec<f64>;

/// Effective tensors of one coarse block, unscaled integrals over the RVE.
///
/// Index convention follows the bilinear forms: `c[j * N + i] = C_ji`.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveBlock {
    pub block: usize,
    pub continua: usize,
    /// `|R|`.
    pub area: f64,
    /// `C_ji = int phi_i phi_j`.
    pub c: Square,
    /// `C_jip = int phi_i phi_j psi_p` at `[(j * N + i) * N + p]`.
    pub c_p: Vec<f64>,
    /// `C^n_ji = int phi_i phi_j^n`.
    pub c_n: [Square; 2],
    /// `C^m_ji = int phi_i^m phi_j`.
    pub c_m: [Square; 2],
    /// `C^mn_ji = int phi_i^m phi_j^n` at `[m][n]`.
    pub c_mn: [[Square; 2]; 2],
    /// `B_ji = int kappa grad phi_i . grad phi_j`.
    pub b: Square,
    /// `B^n_ji = int kappa grad phi_i . grad phi_j^n`.
    pub b_n: [Square; 2],
    /// `B^m_ji = int kappa grad phi_i^m . grad phi_j`.
    pub b_m: [Square; 2],
    /// `B^mn_ji = int kappa grad phi_i^m . grad phi_j^n` at `[m][n]`.
    pub b_mn: [[Square; 2]; 2],
}

impl EffectiveBlock {
    fn at(&self, j: usize, i: usize) -> usize {
        j * self.continua + i
    }

    /// `C_ji / |R|`.
    pub fn c_hat(&self, j: usize, i: usize) -> f64 {
        self.c[self.at(j, i)] / self.area
    }

    /// `C_jip / |R|`.
    pub fn c_p_hat(&self, j: usize, i: usize, p: usize) -> f64 {
        self.c_p[self.at(j, i) * self.continua + p] / self.area
    }

    /// `eps^2 B_ji / |R|`.
    pub fn b_hat(&self, j: usize, i: usize, eps: f64) -> f64 {
        eps * eps * self.b[self.at(j, i)] / self.area
    }

    /// `eps B^m_ji / |R|`.
    pub fn b_m_hat(&self, m: usize, j: usize, i: usize, eps: f64) -> f64 {
        eps * self.b_m[m][self.at(j, i)] / self.area
    }

    /// `B^mn_ji / |R|`.
    pub fn b_mn_hat(&self, m: usize, n: usize, j: usize, i: usize) -> f64 {
        self.b_mn[m][n][self.at(j, i)] / self.area
    }

    /// Reaction coefficient `B_hat_ji / eps^2 = B_ji / |R|`.
    pub fn reaction(&self, j: usize, i: usize) -> f64 {
        self.b[self.at(j, i)] / self.area
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `[[a_ji]]` with `a_ji = f(j, i)`.
fn square(n: usize, f: impl Fn(usize, usize) -> f64) -> Square {
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            out.push(f(j, i));
        }
    }
    out
}

/// All effective integrals of one block.
pub fn compute_effective(cells: &BlockCells) -> Result<EffectiveBlock> {
    let mesh = &cells.mesh;
    let n = cells.continua();
    let area: f64 = (0..mesh.element_count()).map(|e| mesh.element_area(e)).sum();
    let stiffness = assemble_stiffness(mesh, &cells.kappa)?;
    let mass = assemble_weighted_mass(mesh, &vec![1.0; mesh.element_count()])?;
    let masses_p = (0..n)
        .map(|p| {
            let w: Vec<f64> = cells.labels.iter().map(|&l| (l == p) as u8 as f64).collect();
            assemble_weighted_mass(mesh, &w)
        })
        .collect::<Result<Vec<_>>>()?;

    let phi: Vec<&[f64]> = cells.average.iter().map(|b| b.values.as_slice()).collect();
    let grad: Vec<[&[f64]; 2]> = cells
        .gradient
        .iter()
        .map(|g| [g[0].values.as_slice(), g[1].values.as_slice()])
        .collect();
    let k_phi: Vec<Vec<f64>> = phi.iter().map(|v| stiffness.mul_vec(v)).collect();
    let k_grad: Vec<[Vec<f64>; 2]> = grad
        .iter()
        .map(|g| [stiffness.mul_vec(g[0]), stiffness.mul_vec(g[1])])
        .collect();
    let m_phi: Vec<Vec<f64>> = phi.iter().map(|v| mass.mul_vec(v)).collect();
    let m_grad: Vec<[Vec<f64>; 2]> = grad.iter().map(|g| [mass.mul_vec(g[0]), mass.mul_vec(g[1])]).collect();

    let mut c_p = Vec::with_capacity(n * n * n);
    for j in 0..n {
        for i in 0..n {
            for mp in &masses_p {
                c_p.push(mp.bilinear(phi[j], phi[i]));
            }
        }
    }
    let dirs = |f: &dyn Fn(usize) -> Square| [f(0), f(1)];
    Ok(EffectiveBlock {
        block: cells.block,
        continua: n,
        area,
        c: square(n, |j, i| dot(phi[j], &m_phi[i])),
        c_p,
        c_n: dirs(&|d| square(n, |j, i| dot(grad[j][d], &m_phi[i]))),
        c_m: dirs(&|d| square(n, |j, i| dot(phi[j], &m_grad[i][d]))),
        c_mn: [
            dirs(&|d| square(n, |j, i| dot(grad[j][d], &m_grad[i][0]))),
            dirs(&|d| square(n, |j, i| dot(grad[j][d], &m_grad[i][1]))),
        ],
        b: square(n, |j, i| dot(phi[j], &k_phi[i])),
        b_n: dirs(&|d| square(n, |j, i| dot(grad[j][d], &k_phi[i]))),
        b_m: dirs(&|d| square(n, |j, i| dot(phi[j], &k_grad[i][d]))),
        b_mn: [
            dirs(&|d| square(n, |j, i| dot(grad[j][d], &k_grad[i][0]))),
            dirs(&|d| square(n, |j, i| dot(grad[j][d], &k_grad[i][1]))),
        ],
    })
}

/// `f_j = |R|^{-1} int_R f phi_j` with `f` in global coordinates.
pub fn compute_load_moments(cells: &BlockCells, f: &dyn Fn([f64; 2]) -> f64) -> Vec<f64> {
    let o = cells.origin;
    let load = assemble_load(&cells.mesh, |x| f([x[0] + o[0], x[1] + o[1]]));
    let area: f64 = (0..cells.mesh.element_count()).map(|e| cells.mesh.element_area(e)).sum();
    cells.average.iter().map(|b| dot(&b.values, &load) / area).collect()
}

/// Effective blocks of a whole partition plus the load moments sampled at
/// `load_times`. A single load row means a time-independent source.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveSet {
    pub continua: usize,
    /// Coarse size `H`, used as `eps`.
    pub eps: f64,
    pub blocks_per_side: usize,
    pub blocks: Vec<EffectiveBlock>,
    pub load_times: Vec<f64>,
    /// `loads[k][block * N + j]` at `load_times[k]`.
    pub loads: Vec<Vec<f64>>,
}

impl EffectiveSet {
    /// Load moments of `block` at time `t`; uses the single row for
    /// time-independent sources.
    pub fn load(&self, block: usize, t: f64) -> Result<&[f64]> {
        let k = if self.loads.len() == 1 {
            0
        } else {
            self.load_times
                .iter()
                .position(|s| (s - t).abs() <= 1e-12 * t.abs().max(1.0))
                .ok_or_else(|| Error::invalid(format!("no load moments stored for t = {t}")))?
        };
        let n = self.continua;
        Ok(&self.loads[k][block * n..(block + 1) * n])
    }
}

/// Effective blocks for every block of a cell set; `load_times` lists the
/// times at which `f(x, t)` is sampled (one entry for a steady source).
pub fn upscale(
    cells: &CellSet,
    part: &CoarsePartition,
    source: &(dyn Fn([f64; 2], f64) -> f64 + Sync),
    load_times: &[f64],
) -> Result<EffectiveSet> {
    if load_times.is_empty() {
        return Err(Error::invalid("at least one load time required"));
    }
    let blocks = crate::cells::map_maybe_parallel(&cells.blocks, compute_effective)
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let continua = blocks.first().map(|b| b.continua).unwrap_or(0);
    let loads = load_times
        .iter()
        .map(|&t| {
            cells
                .blocks
                .iter()
                .flat_map(|b| compute_load_moments(b, &|x| source(x, t)))
                .collect()
        })
        .collect();
    Ok(EffectiveSet {
        continua,
        eps: part.coarse_size(),
        blocks_per_side: part.blocks_per_side(),
        blocks,
        load_times: load_times.to_vec(),
        loads,
    })
}

const EFFECTIVE_MAGIC: &str = "# mchom effective-blocks v1";

fn tensor_columns(n: usize) -> Vec<String> {
    let mut cols = vec!["block".to_string(), "area".to_string()];
    let pairs = |prefix: &str, cols: &mut Vec<String>| {
        for j in 1..=n {
            for i in 1..=n {
                cols.push(format!("{prefix}_{j}{i}"));
            }
        }
    };
    pairs("C", &mut cols);
    for j in 1..=n {
        for i in 1..=n {
            for p in 1..=n {
                cols.push(format!("Cp_{j}{i}{p}"));
            }
        }
    }
    for d in 1..=2 {
        pairs(&format!("Cn{d}"), &mut cols);
    }
    for d in 1..=2 {
        pairs(&format!("Cm{d}"), &mut cols);
    }
    for m in 1..=2 {
        for d in 1..=2 {
            pairs(&format!("Cmn{m}{d}"), &mut cols);
        }
    }
    pairs("B", &mut cols);
    for d in 1..=2 {
        pairs(&format!("Bn{d}"), &mut cols);
    }
    for d in 1..=2 {
        pairs(&format!("Bm{d}"), &mut cols);
    }
    for m in 1..=2 {
        for d in 1..=2 {
            pairs(&format!("Bmn{m}{d}"), &mut cols);
        }
    }
    cols
}

fn block_values(b: &EffectiveBlock) -> Vec<f64> {
    let mut v = vec![b.area];
    v.extend(&b.c);
    v.extend(&b.c_p);
    for s in b.c_n.iter().chain(&b.c_m).chain(b.c_mn.iter().flatten()) {
        v.extend(s);
    }
    v.extend(&b.b);
    for s in b.b_n.iter().chain(&b.b_m).chain(b.b_mn.iter().flatten()) {
        v.extend(s);
    }
    v
}

fn block_from_values(block: usize, n: usize, v: &[f64]) -> EffectiveBlock {
    let mut it = v.iter().copied();
    let mut take = |k: usize| -> Vec<f64> { it.by_ref().take(k).collect() };
    let sq = n * n;
    let area = take(1)[0];
    let c = take(sq);
    let c_p = take(sq * n);
    let c_n = [take(sq), take(sq)];
    let c_m = [take(sq), take(sq)];
    let c_mn = [[take(sq), take(sq)], [take(sq), take(sq)]];
    let b = take(sq);
    let b_n = [take(sq), take(sq)];
    let b_m = [take(sq), take(sq)];
    let b_mn = [[take(sq), take(sq)], [take(sq), take(sq)]];
    EffectiveBlock {
        block,
        continua: n,
        area,
        c,
        c_p,
        c_n,
        c_m,
        c_mn,
        b,
        b_n,
        b_m,
        b_mn,
    }
}

/// Columnar text form: header lines, then one line per block with the
/// columns named in the `# columns` line, then one `load` line per load
/// time holding `f_j` for every block.
pub fn effective_to_string(set: &EffectiveSet) -> String {
    let n = set.continua;
    let mut s = String::new();
    writeln!(s, "{EFFECTIVE_MAGIC}").unwrap();
    writeln!(s, "continua {n}").unwrap();
    writeln!(s, "eps {:e}", set.eps).unwrap();
    writeln!(s, "blocks_per_side {}", set.blocks_per_side).unwrap();
    writeln!(s, "blocks {}", set.blocks.len()).unwrap();
    writeln!(s, "# columns {}", tensor_columns(n).join(" ")).unwrap();
    for b in &set.blocks {
        write!(s, "{}", b.block).unwrap();
        for v in block_values(b) {
            write!(s, " {v:e}").unwrap();
        }
        s.push('\n');
    }
    writeln!(s, "# load t then f_j for block 0 j=1..N, block 1, ...").unwrap();
    for (t, row) in set.load_times.iter().zip(&set.loads) {
        write!(s, "load {t:e}").unwrap();
        for v in row {
            write!(s, " {v:e}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn effective_from_str(text: &str) -> Result<EffectiveSet> {
    let err = |m: String| Error::format("effective-block file", m);
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some(EFFECTIVE_MAGIC) {
        return Err(err("missing version line".into()));
    }
    let mut header = |key: &str| -> Result<String> {
        let line = lines.next().ok_or_else(|| err(format!("missing `{key}` line")))?;
        line.strip_prefix(key)
            .map(|v| v.trim().to_string())
            .ok_or_else(|| err(format!("expected `{key}`, found `{line}`")))
    };
    let parse_usize = |s: String, what: &str| s.parse::<usize>().map_err(|_| err(format!("bad {what} `{s}`")));
    let n = parse_usize(header("continua")?, "continua")?;
    let eps: f64 = header("eps")?.parse().map_err(|_| err("bad eps".into()))?;
    let blocks_per_side = parse_usize(header("blocks_per_side")?, "blocks_per_side")?;
    let count = parse_usize(header("blocks")?, "blocks")?;
    header("# columns")?;
    let width = tensor_columns(n).len();
    let parse_row = |line: &str| -> Result<Vec<f64>> {
        line.split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number `{t}`"))))
            .collect()
    };
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| err("truncated block table".into()))?;
        let (id, rest) = line.split_once(' ').ok_or_else(|| err("empty block row".into()))?;
        let id: usize = id.parse().map_err(|_| err(format!("bad block id `{id}`")))?;
        let vals = parse_row(rest)?;
        if vals.len() + 1 != width {
            return Err(err(format!("block {id}: {} columns, expected {}", vals.len() + 1, width)));
        }
        blocks.push(block_from_values(id, n, &vals));
    }
    let mut load_times = Vec::new();
    let mut loads = Vec::new();
    for line in lines {
        if line.starts_with('#') {
            continue;
        }
        let rest = line
            .strip_prefix("load ")
            .ok_or_else(|| err(format!("unexpected line `{line}`")))?;
        let vals = parse_row(rest)?;
        if vals.len() != 1 + count * n {
            return Err(err(format!("load row has {} values, expected {}", vals.len(), 1 + count * n)));
        }
        load_times.push(vals[0]);
        loads.push(vals[1..].to_vec());
    }
    if loads.is_empty() {
        return Err(err("no load rows".into()));
    }
    Ok(EffectiveSet {
        continua: n,
        eps,
        blocks_per_side,
        blocks,
        load_times,
        loads,
    })
}

pub fn save_effective(path: impl AsRef<Path>, set: &EffectiveSet) -> Result<()> {
    std::fs::write(path, effective_to_string(set))?;
    Ok(())
}

pub fn load_effective(path: impl AsRef<Path>) -> Result<EffectiveSet> {
    effective_from_str(&std::fs::read_to_string(path)?)
}

/// Constants of the zero-order model of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroOrderBlock {
    pub block: usize,
    /// `C_j = int psi_j / int psi_j^2 / A`.
    pub c: Vec<f64>,
    /// `gamma_i = C_i^2 int psi_i^3 / A^2`.
    pub gamma: Vec<f64>,
    /// `beta_i = C_i int psi_i`.
    pub beta: Vec<f64>,
    /// `b_i = int f phi_i` with `phi_i = C_i psi_i / A`.
    pub b: Vec<f64>,
    /// Full `gamma_ijk = int psi_k C_i C_j psi_i psi_j / A^2` at `[(i * N + j) * N + k]`.
    pub gamma_tensor: Vec<f64>,
    /// Full `beta_ij = int A phi_i phi_j` at `[i * N + j]`.
    pub beta_matrix: Vec<f64>,
}

/// Zero-order constants of `block` for the reaction field `a` (values `A`,
/// labels `psi_j`) and a steady source `f`.
pub fn zero_order_constants(
    fine: &StructuredMesh,
    part: &CoarsePartition,
    a: &MediumField,
    block: usize,
    f: &dyn Fn([f64; 2]) -> f64,
) -> Result<ZeroOrderBlock> {
    let n = a.continua();
    let elems = part.block_elements(block);
    if let Some(v) = elems.iter().map(|&e| a.values()[e]).find(|v| !(*v > 0.0)) {
        return Err(Error::invalid(format!("reaction coefficient must be positive, got {v}")));
    }
    let mut vol = vec![0.0; n];
    let mut inv = vec![0.0; n];
    for &e in elems {
        let l = a.labels()[e];
        let area = fine.element_area(e);
        vol[l] += area;
        inv[l] += area / a.values()[e];
    }
    if let Some(j) = vol.iter().position(|v| *v == 0.0) {
        return Err(Error::ConstraintDegeneracy(format!(
            "coarse block {block} contains no element of continuum {}",
            j + 1
        )));
    }
    let c: Vec<f64> = (0..n).map(|j| vol[j] / inv[j]).collect();
    let mut gamma_tensor = vec![0.0; n * n * n];
    let mut beta_matrix = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for &e in elems {
        let l = a.labels()[e];
        let area = fine.element_area(e);
        let av = a.values()[e];
        let psi = |j: usize| (j == l) as u8 as f64;
        let phi = |j: usize| c[j] * psi(j) / av;
        for i in 0..n {
            for j in 0..n {
                beta_matrix[i * n + j] += area * av * phi(i) * phi(j);
                for k in 0..n {
                    gamma_tensor[(i * n + j) * n + k] += area * psi(k) * c[i] * c[j] * psi(i) * psi(j) / (av * av);
                }
            }
        }
        b[l] += area * f(fine.barycenter(e)) * phi(l);
    }
    Ok(ZeroOrderBlock {
        block,
        gamma: (0..n).map(|i| gamma_tensor[(i * n + i) * n + i]).collect(),
        beta: (0..n).map(|i| c[i] * vol[i]).collect(),
        c,
        b,
        gamma_tensor,
        beta_matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{solve_all_cells, solve_block_cells};
    use crate::grid::{build_coarse_partition, build_fine_mesh, build_oversampled_region, RegionBoundary};
    use crate::media::{crossed_field, CrossedParams};

    fn crossed(cells: usize, periods: usize, width: f64) -> (StructuredMesh, MediumField) {
        let mesh = build_fine_mesh(cells, cells).unwrap();
        let p = CrossedParams {
            cells_per_side: periods,
            channel_width: width,
            ..CrossedParams::default()
        };
        let m = crossed_field(&mesh, &p).unwrap();
        (mesh, m)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn homogeneous_block_values() {
        let mesh = build_fine_mesh(80, 80).unwrap();
        let medium = MediumField::homogeneous(mesh.element_count(), 1.0).unwrap();
        let part = build_coarse_partition(&mesh, 8).unwrap();
        let region = build_oversampled_region(&mesh, &part, part.block_id(4, 4), 3).unwrap();
        let cells = solve_block_cells(&region, &medium, &part).unwrap();
        let eff = compute_effective(&cells).unwrap();
        assert!((eff.c_hat(0, 0) - 1.0).abs() < 1e-10);
        assert!(eff.b[0].abs() < 1e-12);
        for m in 0..2 {
            for n in 0..2 {
                let expect = if m == n { 1.0 } else { 0.0 };
                assert!((eff.b_mn_hat(m, n, 0, 0) - expect).abs() < 0.05, "{m}{n}: {}", eff.b_mn_hat(m, n, 0, 0));
            }
        }
        let f1 = compute_load_moments(&cells, &|_| 1.0);
        assert!((f1[0] - 1.0).abs() < 1e-10);
        assert_eq!(compute_load_moments(&cells, &|_| 0.0), vec![0.0]);
    }

    #[test]
    fn crossed_block_symmetries_and_dense_sums() {
        let (mesh, medium) = crossed(60, 6, 1.0 / 30.0);
        let part = build_coarse_partition(&mesh, 6).unwrap();
        let region = build_oversampled_region(&mesh, &part, part.block_id(2, 3), 2).unwrap();
        let cells = solve_block_cells(&region, &medium, &part).unwrap();
        let eff = compute_effective(&cells).unwrap();
        let n = 2;
        let eps = part.coarse_size();
        for j in 0..n {
            for i in 0..n {
                assert!(rel(eff.b[j * n + i], eff.b[i * n + j]) < 1e-10);
                let s: f64 = (0..n).map(|p| eff.c_p[(j * n + i) * n + p]).sum();
                assert!((s - eff.c[j * n + i]).abs() <= 1e-12 * eff.c[j * n + i].abs().max(eff.area));
                for m in 0..2 {
                    // B^n_ji pairs with B^m_ij
                    // relative to the Cauchy-Schwarz bound; the entries themselves may cancel to ~0
                    let bound = (eff.b[i * n + i] * eff.b_mn[m][m][j * n + j]).sqrt();
                    assert!((eff.b_n[m][j * n + i] - eff.b_m[m][i * n + j]).abs() <= 1e-10 * bound);
                    for d in 0..2 {
                        let a = eff.b_mn[m][d][j * n + i];
                        let b = eff.b_mn[d][m][i * n + j];
                        assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()).max(1e-14));
                    }
                }
            }
            assert!(eff.c[j * n + j] > 0.0);
        }
        // dense elementwise oracle for C with exact P1 products
        let mut c00 = 0.0;
        let phi = &cells.average[0].values;
        for (e, tri) in cells.mesh.triangles().iter().enumerate() {
            let a = cells.mesh.element_area(e);
            let v = tri.map(|k| phi[k]);
            let sum: f64 = v.iter().sum();
            let sq: f64 = v.iter().map(|x| x * x).sum();
            c00 += a / 12.0 * (sq + sum * sum);
        }
        assert!(rel(c00, eff.c[0]) < 1e-12);
        // row sums of the reaction block vanish since phi_1 + phi_2 is near constant
        let row: f64 = eff.b[0] + eff.b[1];
        assert!(row.abs() <= 1e-3 * eff.b[0].abs());
        for j in 0..n {
            for i in 0..n {
                let b = eff.b_hat(j, i, eps).abs();
                let bmn = eff.b_mn_hat(0, 0, j, i).abs();
                let c = eff.c_hat(j, i).abs();
                for v in [b, bmn, c] {
                    assert!(v <= 1e4, "{v}");
                }
            }
            assert!(eff.c_hat(j, j) >= 1e-4 && eff.b_mn_hat(0, 0, j, j) >= 1e-4);
        }
    }

    #[test]
    fn kappa_scaling_is_linear() {
        let (mesh, medium) = crossed(60, 6, 1.0 / 30.0);
        let part = build_coarse_partition(&mesh, 6).unwrap();
        let region = build_oversampled_region(&mesh, &part, part.block_id(3, 3), 1).unwrap();
        let a = compute_effective(&solve_block_cells(&region, &medium, &part).unwrap()).unwrap();
        let scaled = medium.scaled(7.0).unwrap();
        let cells = solve_block_cells(&region, &scaled, &part).unwrap();
        let b = compute_effective(&cells).unwrap();
        for (x, y) in a.b_mn.iter().flatten().flatten().zip(b.b_mn.iter().flatten().flatten()) {
            assert!((7.0 * x - y).abs() <= 1e-8 * y.abs().max(1e-10));
        }
        for (x, y) in a.c.iter().zip(&b.c) {
            assert!((x - y).abs() <= 1e-9 * x.abs());
        }
    }

    #[test]
    fn gaussian_load_matches_summation() {
        let (mesh, medium) = crossed(60, 6, 1.0 / 30.0);
        let part = build_coarse_partition(&mesh, 6).unwrap();
        let block = part.block_id(3, 2);
        let region = build_oversampled_region(&mesh, &part, block, 1).unwrap();
        let cells = solve_block_cells(&region, &medium, &part).unwrap();
        let g = |x: [f64; 2]| (-40.0 * ((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2))).exp();
        let moments = compute_load_moments(&cells, &g);
        for j in 0..2 {
            let phi = &cells.average[j].values;
            let mut s = 0.0;
            for (k, &e) in part.block_elements(block).iter().enumerate() {
                let tri = cells.mesh.triangles()[k];
                let avg = tri.iter().map(|&v| phi[v]).sum::<f64>() / 3.0;
                s += g(mesh.barycenter(e)) * avg * mesh.element_area(e);
            }
            assert!(rel(s / part.block_area(), moments[j]) < 1e-12);
        }
    }

    #[test]
    fn effective_file_roundtrip() {
        let (mesh, medium) = crossed(60, 6, 1.0 / 30.0);
        let part = build_coarse_partition(&mesh, 6).unwrap();
        let cells = solve_all_cells(&mesh, &medium, &part, 1, RegionBoundary::Clip).unwrap();
        let set = upscale(&cells, &part, &|x, t| x[0] + t, &[0.01, 0.03]).unwrap();
        let text = effective_to_string(&set);
        let back = effective_from_str(&text).unwrap();
        assert_eq!(set, back);
        assert_eq!(set.load(3, 0.03).unwrap(), back.load(3, 0.03).unwrap());
        assert!(set.load(3, 0.05).is_err());
        assert!(effective_from_str(&text.replace("v1", "v9")).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("eff.txt");
        save_effective(&p, &set).unwrap();
        assert_eq!(load_effective(&p).unwrap(), set);
    }

    #[test]
    fn zero_order_piecewise_constant() {
        let (mesh, medium) = crossed(60, 6, 1.0 / 30.0);
        let a = medium.with_continuum_values(&[1.0, 1e4]).unwrap();
        let part = build_coarse_partition(&mesh, 6).unwrap();
        for block in [0, 14, 35] {
            let z = zero_order_constants(&mesh, &part, &a, block, &|_| 1.0).unwrap();
            let mut vol = [0.0; 2];
            for &e in part.block_elements(block) {
                vol[a.labels()[e]] += mesh.element_area(e);
            }
            for j in 0..2 {
                let aj = [1.0, 1e4][j];
                assert!(rel(z.c[j], aj) < 1e-12);
                assert!(rel(z.gamma[j], vol[j]) < 1e-12);
                assert!(rel(z.beta[j], aj * vol[j]) < 1e-12);
                assert!(rel(z.b[j], vol[j]) < 1e-12);
            }
            for i in 0..2 {
                for j in 0..2 {
                    if i != j {
                        assert!(z.beta_matrix[i * 2 + j].abs() <= 1e-12);
                    }
                    for k in 0..2 {
                        if !(i == j && j == k) {
                            assert!(z.gamma_tensor[(i * 2 + j) * 2 + k].abs() <= 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn zero_order_smooth_a_matches_quadrature() {
        let (mesh, medium) = crossed(60, 6, 1.0 / 30.0);
        let part = build_coarse_partition(&mesh, 6).unwrap();
        let a_of = |x: [f64; 2]| 2.0 + (3.0 * x[0]).sin() * x[1];
        let values = (0..mesh.element_count()).map(|e| a_of(mesh.barycenter(e))).collect();
        let a = MediumField::new(values, medium.labels().to_vec(), 2).unwrap();
        let block = part.block_id(1, 4);
        let z = zero_order_constants(&mesh, &part, &a, block, &|x| x[0]).unwrap();
        for j in 0..2 {
            let (mut v, mut inv, mut inv2, mut fb) = (0.0, 0.0, 0.0, 0.0);
            for &e in part.block_elements(block) {
                if a.labels()[e] == j {
                    let ar = mesh.element_area(e);
                    let av = a_of(mesh.barycenter(e));
                    v += ar;
                    inv += ar / av;
                    inv2 += ar / (av * av);
                    fb += ar * mesh.barycenter(e)[0] / av;
                }
            }
            let c = v / inv;
            assert!(rel(z.c[j], c) < 1e-12);
            assert!(rel(z.gamma[j], c * c * inv2) < 1e-12);
            assert!(rel(z.beta[j], c * v) < 1e-12);
            assert!(rel(z.b[j], c * fb) < 1e-12);
        }
        let bad = a.scaled(-1.0);
        assert!(bad.is_err() || zero_order_constants(&mesh, &part, &bad.unwrap(), block, &|_| 1.0).is_err());
    }
}

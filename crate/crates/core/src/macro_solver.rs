//! Coarse multicontinuum model
//!
//! ```text
//! sum_p C_jip D^{alpha_p} U_i - div(B^{mn}_ji grad_m U_i) + (B_ji / |R|) U_i = f_j
//! ```
//!
//! discretized with P1 elements on the coarse triangulation and
//! blockwise-constant effective tensors, plus the decoupled zero-order
//! equations `gamma_i D^{alpha_i} U_i + beta_i U_i = b_i`.

use std::collections::BTreeMap;

use crate::caputo::{FractionalOde, MixedCaputo};
use crate::error::{Error, Result};
use crate::fem::{local_mass, p1_gradients, SparseMatrix};
use crate::fine::{group_orders, Boundary, TimeGrid, Trajectory};
use crate::grid::{CoarsePartition, StructuredMesh};
use crate::media::MediumField;
use crate::metrics::block_continuum_average;
use crate::stepper::{FractionalStepper, TransientState};
use crate::upscale::{EffectiveSet, ZeroOrderBlock};

/// Assembled coarse operators over `N` continua; unknown `(i, node)` sits
/// at `i * nodes + node`.
pub struct MacroOperators {
    pub continua: usize,
    pub nodes: usize,
    /// Mass-like operators, one per distinct order.
    pub masses: Vec<SparseMatrix>,
    /// Distinct orders matching `masses`.
    pub orders: Vec<f64>,
    /// Diffusion plus reaction.
    pub stiffness: SparseMatrix,
    /// `int_K phi_a` per coarse element and local vertex, for loads.
    pub element_weights: Vec<[f64; 3]>,
    pub fixed: Vec<usize>,
}

/// `alphas` holds one order or one per continuum.
pub fn assemble_macro_operators(
    part: &CoarsePartition,
    eff: &EffectiveSet,
    alphas: &[f64],
    boundary: Boundary,
) -> Result<MacroOperators> {
    let n = eff.continua;
    if eff.blocks.len() != part.block_count() {
        return Err(Error::invalid(format!(
            "{} effective blocks for {} coarse blocks",
            eff.blocks.len(),
            part.block_count()
        )));
    }
    if alphas.len() != 1 && alphas.len() != n {
        return Err(Error::invalid(format!("{} orders given for {n} continua", alphas.len())));
    }
    let mesh = part.coarse_mesh();
    let nodes = mesh.node_count();
    let (orders, index) = group_orders(alphas);
    let group_of = |p: usize| if alphas.len() == 1 { 0 } else { index[p] };

    for b in &eff.blocks {
        for j in 0..n {
            for i in 0..n {
                let scale = b.reaction(j, j).abs().max(b.reaction(i, i).abs());
                if (b.reaction(j, i) - b.reaction(i, j)).abs() > 1e-8 * scale.max(f64::MIN_POSITIVE) {
                    return Err(Error::invalid(format!("block {}: reaction tensor is not symmetric", b.block)));
                }
            }
        }
    }

    let mut mass_trips = vec![Vec::new(); orders.len()];
    let mut stiff_trips = Vec::new();
    let mut element_weights = Vec::with_capacity(mesh.element_count());
    for (e, tri) in mesh.triangles().iter().enumerate() {
        let b = &eff.blocks[e / 2];
        let verts = tri.map(|v| mesh.nodes()[v]);
        let (g, area) = p1_gradients(verts);
        let unit_mass = local_mass(verts, 1.0);
        element_weights.push([area / 3.0; 3]);
        for j in 0..n {
            for i in 0..n {
                let mut cg = vec![0.0; orders.len()];
                if orders.len() == 1 {
                    cg[0] = b.c_hat(j, i);
                } else {
                    for p in 0..n {
                        cg[group_of(p)] += b.c_p_hat(j, i, p);
                    }
                }
                let reaction = b.reaction(j, i);
                for (bl, &vb) in tri.iter().enumerate() {
                    let row = j * nodes + vb;
                    for (al, &va) in tri.iter().enumerate() {
                        let col = i * nodes + va;
                        for (k, c) in cg.iter().enumerate() {
                            if *c != 0.0 {
                                mass_trips[k].push((row, col, c * unit_mass[bl][al]));
                            }
                        }
                        let mut d = 0.0;
                        for m in 0..2 {
                            for dn in 0..2 {
                                d += b.b_mn_hat(m, dn, j, i) * g[al][m] * g[bl][dn];
                            }
                        }
                        stiff_trips.push((row, col, area * d + reaction * unit_mass[bl][al]));
                    }
                }
            }
        }
    }
    let total = n * nodes;
    let masses = mass_trips
        .iter()
        .map(|t| SparseMatrix::from_triplets(total, t, true))
        .collect::<Result<Vec<_>>>()?;
    let stiffness = SparseMatrix::from_triplets(total, &stiff_trips, true)?;
    let fixed = match boundary {
        Boundary::Dirichlet0 => (0..n)
            .flat_map(|i| mesh.boundary_nodes().iter().map(move |&v| i * nodes + v))
            .collect(),
        Boundary::Neumann0 => Vec::new(),
    };
    Ok(MacroOperators {
        continua: n,
        nodes,
        masses,
        orders,
        stiffness,
        element_weights,
        fixed,
    })
}

impl MacroOperators {
    /// `F_(j, b) = sum_K f_j(K) int_K phi_b`.
    pub fn load_vector(&self, mesh: &StructuredMesh, eff: &EffectiveSet, t: f64) -> Result<Vec<f64>> {
        load_vector(mesh, &self.element_weights, eff, t)
    }
}

fn load_vector(mesh: &StructuredMesh, weights: &[[f64; 3]], eff: &EffectiveSet, t: f64) -> Result<Vec<f64>> {
    let nodes = mesh.node_count();
    let mut out = vec![0.0; eff.continua * nodes];
    for (e, tri) in mesh.triangles().iter().enumerate() {
        let f = eff.load(e / 2, t)?;
        for (j, fj) in f.iter().enumerate() {
            for (k, &v) in tri.iter().enumerate() {
                out[j * nodes + v] += fj * weights[e][k];
            }
        }
    }
    Ok(out)
}

/// Continuum-wise initial values at coarse nodes: each node takes the mean
/// of the masked block averages of the blocks touching it.
pub fn macro_initial_conditions(
    fine: &StructuredMesh,
    field: &[f64],
    part: &CoarsePartition,
    medium: &MediumField,
) -> Result<Vec<f64>> {
    let mesh = part.coarse_mesh();
    let m = part.blocks_per_side();
    let nodes = mesh.node_count();
    let mut out = vec![0.0; medium.continua() * nodes];
    for i in 0..medium.continua() {
        let avg = block_continuum_average(fine, field, part, medium, i)?;
        for y in 0..=m {
            for x in 0..=m {
                let (mut s, mut c) = (0.0, 0usize);
                for by in y.saturating_sub(1)..(y + 1).min(m) {
                    for bx in x.saturating_sub(1)..(x + 1).min(m) {
                        if let Some(a) = avg[part.block_id(bx, by)] {
                            s += a;
                            c += 1;
                        }
                    }
                }
                if c == 0 {
                    return Err(Error::ConstraintDegeneracy(format!(
                        "coarse node ({x}, {y}) touches no block containing continuum {}",
                        i + 1
                    )));
                }
                out[i * nodes + mesh.node_index(x, y)] = s / c as f64;
            }
        }
    }
    Ok(out)
}

/// Factorized coarse model ready for time stepping.
pub struct MacroSolver<'a> {
    part: &'a CoarsePartition,
    eff: &'a EffectiveSet,
    operators_dim: (usize, usize),
    element_weights: Vec<[f64; 3]>,
    stepper: FractionalStepper,
    time: TimeGrid,
}

impl<'a> MacroSolver<'a> {
    pub fn new(
        part: &'a CoarsePartition,
        eff: &'a EffectiveSet,
        alphas: &[f64],
        time: TimeGrid,
        boundary: Boundary,
    ) -> Result<Self> {
        let ops = assemble_macro_operators(part, eff, alphas, boundary)?;
        let caputo = MixedCaputo::from_orders(&ops.orders, time.tau, time.steps)?;
        let stepper = FractionalStepper::new(caputo, ops.masses, &ops.stiffness, &ops.fixed)?;
        Ok(Self {
            part,
            eff,
            operators_dim: (ops.continua, ops.nodes),
            element_weights: ops.element_weights,
            stepper,
            time,
        })
    }

    pub fn continua(&self) -> usize {
        self.operators_dim.0
    }

    pub fn coarse_nodes(&self) -> usize {
        self.operators_dim.1
    }

    /// Runs the model; snapshots hold all continua stacked continuum-major.
    pub fn run(&self, u0: Vec<f64>, psi: Vec<f64>, snapshot_steps: &[usize]) -> Result<Trajectory> {
        let (n, nodes) = self.operators_dim;
        if u0.len() != n * nodes {
            return Err(Error::invalid("initial data does not match the coarse unknowns"));
        }
        let mesh = self.part.coarse_mesh();
        let mut state = TransientState::new(u0, psi)?;
        let mut snapshots = BTreeMap::new();
        snapshots.insert(0, state.solution().to_vec());
        for step in 1..=self.time.steps {
            let t = self.stepper.next_half_time(&state);
            let load = load_vector(mesh, &self.element_weights, self.eff, t)?;
            self.stepper.advance(&mut state, &load)?;
            if snapshot_steps.contains(&step) {
                snapshots.insert(step, state.solution().to_vec());
            }
        }
        Ok(Trajectory {
            time: self.time,
            snapshots,
        })
    }
}

/// Continuum `i` of a stacked coarse solution.
pub fn continuum_slice(stacked: &[f64], nodes: usize, i: usize) -> &[f64] {
    &stacked[i * nodes..(i + 1) * nodes]
}

/// Per-block solutions of the zero-order model, `values[step][block * N + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroOrderSolution {
    pub time: TimeGrid,
    pub continua: usize,
    pub values: Vec<Vec<f64>>,
}

/// Solves `gamma_i D^{alpha_i} U_i + beta_i U_i = b_i` per block with zero
/// initial data; `alphas` holds one order per continuum.
pub fn solve_zero_order(blocks: &[ZeroOrderBlock], alphas: &[f64], time: TimeGrid) -> Result<ZeroOrderSolution> {
    let n = alphas.len();
    let mut values = vec![vec![0.0; blocks.len() * n]; time.steps + 1];
    for (k, b) in blocks.iter().enumerate() {
        if b.gamma.len() != n {
            return Err(Error::invalid(format!("block {} has {} continua, {n} orders given", b.block, b.gamma.len())));
        }
        for i in 0..n {
            let ode = FractionalOde::single(alphas[i], b.gamma[i], b.beta[i]);
            let rhs = b.b[i];
            let u = ode.solve(time.tau, time.steps, 0.0, 0.0, |_| rhs)?;
            for (s, v) in u.into_iter().enumerate() {
                values[s][k * n + i] = v;
            }
        }
    }
    Ok(ZeroOrderSolution {
        time,
        continua: n,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::solve_all_cells;
    use crate::fem::{assemble_stiffness, assemble_weighted_mass};
    use crate::grid::{build_coarse_partition, build_fine_mesh, RegionBoundary};
    use crate::media::{crossed_field, CrossedParams};
    use crate::metrics::coarse_block_average;
    use crate::upscale::{upscale, zero_order_constants};

    fn gaussian(x: [f64; 2], _t: f64) -> f64 {
        (-40.0 * ((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2))).exp()
    }

    fn crossed_setup() -> (StructuredMesh, MediumField, CoarsePartition, EffectiveSet) {
        let mesh = build_fine_mesh(60, 60).unwrap();
        let p = CrossedParams {
            cells_per_side: 6,
            channel_width: 1.0 / 30.0,
            ..CrossedParams::default()
        };
        let medium = crossed_field(&mesh, &p).unwrap();
        let part = build_coarse_partition(&mesh, 6).unwrap();
        let cells = solve_all_cells(&mesh, &medium, &part, 2, RegionBoundary::Mirror).unwrap();
        let eff = upscale(&cells, &part, &gaussian, &[0.0]).unwrap();
        (mesh, medium, part, eff)
    }

    #[test]
    fn scalar_operators_match_plain_fem() {
        let mesh = build_fine_mesh(40, 40).unwrap();
        let medium = MediumField::homogeneous(mesh.element_count(), 1.0).unwrap();
        let part = build_coarse_partition(&mesh, 8).unwrap();
        let cells = solve_all_cells(&mesh, &medium, &part, 2, RegionBoundary::Mirror).unwrap();
        let mut eff = upscale(&cells, &part, &gaussian, &[0.0]).unwrap();
        let kappa: Vec<f64> = (0..eff.blocks.len()).map(|b| 1.0 + (b % 5) as f64).collect();
        for (b, blk) in eff.blocks.iter_mut().enumerate() {
            blk.b_mn = [[vec![kappa[b] * blk.area], vec![0.0]], [vec![0.0], vec![kappa[b] * blk.area]]];
            blk.b = vec![0.0];
        }
        let ops = assemble_macro_operators(&part, &eff, &[1.5], Boundary::Neumann0).unwrap();
        let cm = part.coarse_mesh();
        let coef: Vec<f64> = (0..cm.element_count()).map(|e| kappa[e / 2]).collect();
        let k = assemble_stiffness(cm, &coef).unwrap();
        let m = assemble_weighted_mass(cm, &vec![1.0; cm.element_count()]).unwrap();
        let v: Vec<f64> = cm.nodes().iter().map(|p| (p[0] * 2.0).sin() * p[1]).collect();
        for (x, y) in ops.stiffness.mul_vec(&v).iter().zip(k.mul_vec(&v)) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
        for (x, y) in ops.masses[0].mul_vec(&v).iter().zip(m.mul_vec(&v)) {
            assert!((x - y).abs() <= 1e-12);
        }
        let load = ops.load_vector(cm, &eff, 0.0).unwrap();
        let total: f64 = load.iter().sum();
        let expected: f64 = (0..eff.blocks.len()).map(|b| eff.load(b, 0.0).unwrap()[0] * part.block_area()).sum();
        assert!((total - expected).abs() <= 1e-12);
    }

    #[test]
    fn crossed_operators_are_symmetric_with_exchange_structure() {
        let (_, _, part, eff) = crossed_setup();
        let ops = assemble_macro_operators(&part, &eff, &[1.5], Boundary::Dirichlet0).unwrap();
        assert!(ops.stiffness.asymmetry() <= 1e-10 * ops.stiffness.max_abs());
        for b in &eff.blocks {
            assert!(b.reaction(0, 1) < 0.0 && b.reaction(1, 0) < 0.0);
            let row = b.reaction(0, 0) + b.reaction(0, 1);
            assert!(row.abs() <= 1e-3 * b.reaction(0, 0));
        }
        let mixed = assemble_macro_operators(&part, &eff, &[1.1, 1.9], Boundary::Dirichlet0).unwrap();
        assert_eq!(mixed.masses.len(), 2);
        let total = SparseMatrix::combine(&[(1.0, &mixed.masses[0]), (1.0, &mixed.masses[1])]).unwrap();
        let v: Vec<f64> = (0..total.dim()).map(|k| (k as f64 * 0.1).cos()).collect();
        let a = total.mul_vec(&v);
        let b = ops.masses[0].mul_vec(&v);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_data_stays_zero_and_equal_orders_collapse() {
        let (_, _, part, eff) = crossed_setup();
        let time = TimeGrid::new(0.1, 1.0).unwrap();
        let zero_load = EffectiveSet {
            loads: vec![vec![0.0; eff.loads[0].len()]],
            ..eff.clone()
        };
        let s = MacroSolver::new(&part, &zero_load, &[1.5], time, Boundary::Dirichlet0).unwrap();
        let dim = 2 * s.coarse_nodes();
        let tr = s.run(vec![0.0; dim], vec![0.0; dim], &[10]).unwrap();
        assert!(tr.snapshots[&10].iter().all(|v| *v == 0.0));

        let a = MacroSolver::new(&part, &eff, &[1.3], time, Boundary::Dirichlet0)
            .unwrap()
            .run(vec![0.0; dim], vec![0.0; dim], &[10])
            .unwrap();
        let b = MacroSolver::new(&part, &eff, &[1.3, 1.3], time, Boundary::Dirichlet0)
            .unwrap()
            .run(vec![0.0; dim], vec![0.0; dim], &[10])
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bounded_over_fifty_steps() {
        let (_, _, part, eff) = crossed_setup();
        for alphas in [vec![1.5], vec![1.1, 1.9]] {
            let time = TimeGrid::new(0.02, 1.0).unwrap();
            let s = MacroSolver::new(&part, &eff, &alphas, time, Boundary::Dirichlet0).unwrap();
            let dim = 2 * s.coarse_nodes();
            let tr = s.run(vec![0.0; dim], vec![0.0; dim], &(1..=50).collect::<Vec<_>>()).unwrap();
            let max = tr.snapshots.values().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max.is_finite() && max < 10.0);
        }
    }

    #[test]
    fn initial_conditions() {
        let (mesh, medium, part, _) = crossed_setup();
        let nodes = part.coarse_mesh().node_count();
        let zero = macro_initial_conditions(&mesh, &vec![0.0; mesh.node_count()], &part, &medium).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        let one = macro_initial_conditions(&mesh, &vec![1.0; mesh.node_count()], &part, &medium).unwrap();
        assert!(one.iter().all(|v| (v - 1.0).abs() < 1e-14));
        let u0: Vec<f64> = mesh.nodes().iter().map(|&p| 0.5 * gaussian(p, 0.0)).collect();
        let ic = macro_initial_conditions(&mesh, &u0, &part, &medium).unwrap();
        // brute-force masked averages of the four blocks around an interior node
        let (x, y) = (3, 2);
        for i in 0..2 {
            let mut sum = 0.0;
            for (bx, by) in [(2, 1), (3, 1), (2, 2), (3, 2)] {
                let b = part.block_id(bx, by);
                let (mut s, mut a) = (0.0, 0.0);
                for e in 0..mesh.element_count() {
                    if part.block_of_element(&mesh, e) == b && medium.labels()[e] == i {
                        let t = mesh.triangles()[e];
                        s += mesh.element_area(e) * t.iter().map(|&k| u0[k]).sum::<f64>() / 3.0;
                        a += mesh.element_area(e);
                    }
                }
                sum += s / a;
            }
            let got = ic[i * nodes + part.coarse_mesh().node_index(x, y)];
            assert!((got - sum / 4.0).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_order_matches_scalar_reference() {
        let mesh = build_fine_mesh(60, 60).unwrap();
        let p = CrossedParams {
            cells_per_side: 6,
            channel_width: 1.0 / 30.0,
            ..CrossedParams::default()
        };
        let a = crossed_field(&mesh, &p).unwrap().with_continuum_values(&[1.0, 1e4]).unwrap();
        let part = build_coarse_partition(&mesh, 6).unwrap();
        let f = |x: [f64; 2]| gaussian(x, 0.0);
        let blocks: Vec<_> = (0..part.block_count())
            .map(|b| zero_order_constants(&mesh, &part, &a, b, &f).unwrap())
            .collect();
        let time = TimeGrid::new(0.02, 1.0).unwrap();
        let alphas = [1.3, 1.7];
        let sol = solve_zero_order(&blocks, &alphas, time).unwrap();
        for b in [0, 17, 35] {
            for i in 0..2 {
                let (mut fs, mut vol) = (0.0, 0.0);
                for &e in part.block_elements(b) {
                    if a.labels()[e] == i {
                        fs += f(mesh.barycenter(e)) * mesh.element_area(e);
                        vol += mesh.element_area(e);
                    }
                }
                let ai = [1.0, 1e4][i];
                let reference = FractionalOde::single(alphas[i], 1.0, ai)
                    .solve(time.tau, time.steps, 0.0, 0.0, |_| fs / vol)
                    .unwrap();
                for s in 0..=time.steps {
                    let got = sol.values[s][b * 2 + i];
                    assert!((got - reference[s]).abs() <= 1e-10 * reference[s].abs().max(1e-300));
                }
            }
        }
    }

    #[test]
    fn coarse_average_helper_on_solution() {
        let (_, _, part, eff) = crossed_setup();
        let time = TimeGrid::new(0.1, 0.5).unwrap();
        let s = MacroSolver::new(&part, &eff, &[1.5], time, Boundary::Dirichlet0).unwrap();
        let dim = 2 * s.coarse_nodes();
        let tr = s.run(vec![0.0; dim], vec![0.0; dim], &[5]).unwrap();
        let u = &tr.snapshots[&5];
        for i in 0..2 {
            let avg = coarse_block_average(&part, continuum_slice(u, s.coarse_nodes(), i)).unwrap();
            assert!(avg.iter().all(|v| v.is_finite()));
            assert!(avg.iter().any(|v| *v > 0.0));
        }
    }
}

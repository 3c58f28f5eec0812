//! Reference solver for `sum_p psi_p D^{alpha_p} u - div(kappa grad u) = f`
//! on the full fine mesh.

use std::collections::BTreeMap;

use crate::caputo::MixedCaputo;
use crate::error::{Error, Result};
use crate::fem::{assemble_load, assemble_stiffness, assemble_weighted_mass, SparseMatrix};
use crate::grid::StructuredMesh;
use crate::media::MediumField;
use crate::stepper::{FractionalStepper, TransientState};

/// Homogeneous boundary condition on all of the domain boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    Dirichlet0,
    Neumann0,
}

/// Uniform time grid `t_n = n tau`, `n = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub tau: f64,
    pub steps: usize,
}

impl TimeGrid {
    /// Grid with `final_time / tau` steps; the ratio must be an integer.
    pub fn new(tau: f64, final_time: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) || !(final_time > 0.0 && final_time.is_finite()) {
            return Err(Error::invalid(format!("need tau > 0 and T > 0, got tau={tau}, T={final_time}")));
        }
        let ratio = final_time / tau;
        let steps = ratio.round();
        if steps < 1.0 || (ratio - steps).abs() > 1e-9 * ratio {
            return Err(Error::invalid(format!("T={final_time} is not a multiple of tau={tau}")));
        }
        Ok(Self {
            tau,
            steps: steps as usize,
        })
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.tau
    }

    pub fn final_time(&self) -> f64 {
        self.time(self.steps)
    }

    /// Nearest step index of `t`, if `t` lies on the grid.
    pub fn step_of(&self, t: f64) -> Result<usize> {
        let s = (t / self.tau).round();
        if s < 0.0 || s as usize > self.steps || (s * self.tau - t).abs() > 1e-9 {
            return Err(Error::invalid(format!("time {t} is not on the time grid")));
        }
        Ok(s as usize)
    }
}

/// Distinct orders in first-appearance order and, per continuum, the index
/// of its order.
pub(crate) fn group_orders(alphas: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut distinct: Vec<f64> = Vec::new();
    let mut index = Vec::with_capacity(alphas.len());
    for &a in alphas {
        match distinct.iter().position(|d| *d == a) {
            Some(i) => index.push(i),
            None => {
                distinct.push(a);
                index.push(distinct.len() - 1);
            }
        }
    }
    (distinct, index)
}

/// Stored snapshots of a run, keyed by step index.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub time: TimeGrid,
    pub snapshots: BTreeMap<usize, Vec<f64>>,
}

impl Trajectory {
    pub fn at_time(&self, t: f64) -> Option<&[f64]> {
        let s = self.time.step_of(t).ok()?;
        self.snapshots.get(&s).map(Vec::as_slice)
    }
}

/// Assembled and factorized fine-scale problem.
pub struct FineSolver<'m> {
    mesh: &'m StructuredMesh,
    stepper: FractionalStepper,
    time: TimeGrid,
}

impl<'m> FineSolver<'m> {
    /// `alphas` holds one order for all continua or one per continuum.
    pub fn new(
        mesh: &'m StructuredMesh,
        medium: &MediumField,
        alphas: &[f64],
        time: TimeGrid,
        boundary: Boundary,
    ) -> Result<Self> {
        if medium.element_count() != mesh.element_count() {
            return Err(Error::invalid("medium does not match the mesh"));
        }
        if alphas.len() != 1 && alphas.len() != medium.continua() {
            return Err(Error::invalid(format!(
                "{} orders given for {} continua",
                alphas.len(),
                medium.continua()
            )));
        }
        let (distinct, index) = group_orders(alphas);
        let stiffness = assemble_stiffness(mesh, medium.values())?;
        let masses = if distinct.len() == 1 {
            vec![assemble_weighted_mass(mesh, &vec![1.0; mesh.element_count()])?]
        } else {
            (0..distinct.len())
                .map(|g| {
                    let w: Vec<f64> = medium.labels().iter().map(|&l| (index[l] == g) as u8 as f64).collect();
                    assemble_weighted_mass(mesh, &w)
                })
                .collect::<Result<Vec<SparseMatrix>>>()?
        };
        let caputo = MixedCaputo::from_orders(&distinct, time.tau, time.steps)?;
        let fixed: &[usize] = match boundary {
            Boundary::Dirichlet0 => mesh.boundary_nodes(),
            Boundary::Neumann0 => &[],
        };
        let stepper = FractionalStepper::new(caputo, masses, &stiffness, fixed)?;
        Ok(Self { mesh, stepper, time })
    }

    pub fn time(&self) -> TimeGrid {
        self.time
    }

    pub fn initial_state(&self, u0: Vec<f64>, psi: Vec<f64>) -> Result<TransientState> {
        if u0.len() != self.mesh.node_count() {
            return Err(Error::invalid("initial field does not match the mesh"));
        }
        TransientState::new(u0, psi)
    }

    /// One step with `f(x, t)` sampled at the half step.
    pub fn step(&self, state: &mut TransientState, source: &dyn Fn([f64; 2], f64) -> f64) -> Result<()> {
        let t = self.stepper.next_half_time(state);
        let load = assemble_load(self.mesh, |x| source(x, t));
        self.stepper.advance(state, &load)
    }

    /// Full run; stores the initial state and every step in `snapshot_steps`.
    pub fn run(
        &self,
        u0: Vec<f64>,
        psi: Vec<f64>,
        source: &dyn Fn([f64; 2], f64) -> f64,
        snapshot_steps: &[usize],
    ) -> Result<Trajectory> {
        if let Some(s) = snapshot_steps.iter().find(|s| **s > self.time.steps) {
            return Err(Error::invalid(format!("snapshot step {s} beyond final step {}", self.time.steps)));
        }
        let mut state = self.initial_state(u0, psi)?;
        let mut snapshots = BTreeMap::new();
        snapshots.insert(0, state.solution().to_vec());
        for n in 1..=self.time.steps {
            self.step(&mut state, source)?;
            log::debug!("fine step {n}/{}", self.time.steps);
            if snapshot_steps.contains(&n) {
                snapshots.insert(n, state.solution().to_vec());
            }
        }
        Ok(Trajectory {
            time: self.time,
            snapshots,
        })
    }
}

/// Nodal interpolation of `g`.
pub fn interpolate(mesh: &StructuredMesh, g: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
    mesh.nodes().iter().map(|&p| g(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caputo::gamma;
    use crate::grid::build_fine_mesh;
    use crate::media::{crossed_field, CrossedParams};

    fn small_crossed(mesh: &StructuredMesh) -> MediumField {
        let p = CrossedParams {
            cells_per_side: 4,
            channel_width: 0.05,
            ..CrossedParams::default()
        };
        crossed_field(mesh, &p).unwrap()
    }

    fn gaussian(x: [f64; 2], _t: f64) -> f64 {
        (-40.0 * ((x[0] - 0.5).powi(2) + (x[1] - 0.5).powi(2))).exp()
    }

    #[test]
    fn time_grid() {
        let g = TimeGrid::new(0.02, 1.0).unwrap();
        assert_eq!(g.steps, 50);
        assert_eq!(g.step_of(0.1).unwrap(), 5);
        assert!(TimeGrid::new(0.03, 1.0).is_err());
        assert!(TimeGrid::new(0.0, 1.0).is_err());
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let mesh = build_fine_mesh(8, 8).unwrap();
        let medium = MediumField::homogeneous(mesh.element_count(), 1.0).unwrap();
        let s = FineSolver::new(&mesh, &medium, &[1.5], TimeGrid::new(0.1, 1.0).unwrap(), Boundary::Dirichlet0).unwrap();
        let n = mesh.node_count();
        let tr = s.run(vec![0.0; n], vec![0.0; n], &|_, _| 0.0, &[5, 10]).unwrap();
        assert_eq!(tr.snapshots.len(), 3);
        assert!(tr.snapshots.values().all(|u| u.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn uniform_manufactured_problem_tracks_t_squared() {
        let mesh = build_fine_mesh(4, 4).unwrap();
        let medium = MediumField::homogeneous(mesh.element_count(), 1.0).unwrap();
        let n = mesh.node_count();
        let mut errors = Vec::new();
        let alpha = 1.5;
        for tau in [0.04, 0.02, 0.01] {
            let time = TimeGrid::new(tau, 1.0).unwrap();
            let s = FineSolver::new(&mesh, &medium, &[alpha], time, Boundary::Neumann0).unwrap();
            let f = move |_: [f64; 2], t: f64| 2.0 * t.powf(2.0 - alpha) / gamma(3.0 - alpha);
            let tr = s.run(vec![0.0; n], vec![0.0; n], &f, &[time.steps]).unwrap();
            let u = &tr.snapshots[&time.steps];
            let spread = u.iter().fold(0.0f64, |m, v| m.max((v - u[0]).abs()));
            assert!(spread < 1e-10);
            errors.push((u[0] - 1.0).abs());
        }
        for w in errors.windows(2) {
            let p = (w[0] / w[1]).log2();
            assert!((p - (3.0 - alpha)).abs() <= 0.2, "order {p}");
        }
    }

    #[test]
    fn deterministic_and_symmetric() {
        let mesh = build_fine_mesh(20, 20).unwrap();
        let medium = MediumField::homogeneous(mesh.element_count(), 1.0).unwrap();
        let time = TimeGrid::new(0.1, 1.0).unwrap();
        let s = FineSolver::new(&mesh, &medium, &[1.5], time, Boundary::Dirichlet0).unwrap();
        let n = mesh.node_count();
        let a = s.run(vec![0.0; n], vec![0.0; n], &gaussian, &[10]).unwrap();
        let b = s.run(vec![0.0; n], vec![0.0; n], &gaussian, &[10]).unwrap();
        assert_eq!(a, b);
        let u = &a.snapshots[&10];
        assert!(u.iter().any(|v| *v > 0.0));
        for j in 0..=20 {
            for i in 0..=20 {
                let d = (u[mesh.node_index(i, j)] - u[mesh.node_index(j, i)]).abs();
                assert!(d <= 1e-10, "asymmetry {d}");
            }
        }
    }

    #[test]
    fn equal_orders_collapse_to_single_order() {
        let mesh = build_fine_mesh(40, 40).unwrap();
        let medium = small_crossed(&mesh);
        let time = TimeGrid::new(0.05, 0.5).unwrap();
        let n = mesh.node_count();
        let single = FineSolver::new(&mesh, &medium, &[1.3], time, Boundary::Dirichlet0).unwrap();
        let mixed = FineSolver::new(&mesh, &medium, &[1.3, 1.3], time, Boundary::Dirichlet0).unwrap();
        let a = single.run(vec![0.0; n], vec![0.0; n], &gaussian, &[10]).unwrap();
        let b = mixed.run(vec![0.0; n], vec![0.0; n], &gaussian, &[10]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bounded_over_fifty_steps() {
        let mesh = build_fine_mesh(40, 40).unwrap();
        let medium = small_crossed(&mesh);
        let n = mesh.node_count();
        for tau in [0.08, 0.04, 0.02] {
            let time = TimeGrid { tau, steps: 50 };
            let s = FineSolver::new(&mesh, &medium, &[1.5], time, Boundary::Dirichlet0).unwrap();
            let tr = s.run(vec![0.0; n], vec![0.0; n], &gaussian, &(1..=50).collect::<Vec<_>>()).unwrap();
            let max = tr.snapshots.values().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max.is_finite() && max < 10.0, "tau {tau}: max {max}");
        }
    }

    #[test]
    fn mixed_orders_differ_from_single() {
        let mesh = build_fine_mesh(40, 40).unwrap();
        let medium = small_crossed(&mesh);
        let time = TimeGrid::new(0.1, 0.5).unwrap();
        let n = mesh.node_count();
        let a = FineSolver::new(&mesh, &medium, &[1.1, 1.9], time, Boundary::Dirichlet0)
            .unwrap()
            .run(vec![0.0; n], vec![0.0; n], &gaussian, &[5])
            .unwrap();
        let b = FineSolver::new(&mesh, &medium, &[1.1], time, Boundary::Dirichlet0)
            .unwrap()
            .run(vec![0.0; n], vec![0.0; n], &gaussian, &[5])
            .unwrap();
        assert_ne!(a.snapshots[&5], b.snapshots[&5]);
        assert!(FineSolver::new(&mesh, &medium, &[1.1, 1.5, 1.9], time, Boundary::Dirichlet0).is_err());
    }
}

//! Time stepping for `sum_p M_p D^{alpha_p} u + K u = F` shared by the fine
//! and coarse solvers. The stiffness acts on the half-step average
//! `(u^n + u^{n-1}) / 2`; each order carries its own mass-like operator.

use crate::caputo::{FractionalHistory, MixedCaputo};
use crate::error::{Error, Result};
use crate::fem::{DirichletReduction, SparseMatrix, SpdSolver};

/// Solution state of a running time loop.
#[derive(Debug, Clone)]
pub struct TransientState {
    step: usize,
    u: Vec<f64>,
    history: FractionalHistory,
}

impl TransientState {
    pub fn new(u0: Vec<f64>, psi: Vec<f64>) -> Result<Self> {
        if u0.len() != psi.len() {
            return Err(Error::invalid("initial value and velocity lengths differ"));
        }
        Ok(Self {
            step: 0,
            u: u0,
            history: FractionalHistory::new(psi),
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn solution(&self) -> &[f64] {
        &self.u
    }

    pub fn history(&self) -> &FractionalHistory {
        &self.history
    }
}

/// Factorized update operator for one set of orders, masses and stiffness.
pub struct FractionalStepper {
    caputo: MixedCaputo,
    masses: Vec<SparseMatrix>,
    /// `sum_p c_p M_p - K / 2`.
    explicit: SparseMatrix,
    reduction: DirichletReduction,
    solver: SpdSolver,
}

impl FractionalStepper {
    /// `masses[p]` pairs with `caputo.schemes()[p]`; `fixed` lists unknowns
    /// held at zero.
    pub fn new(caputo: MixedCaputo, masses: Vec<SparseMatrix>, stiffness: &SparseMatrix, fixed: &[usize]) -> Result<Self> {
        if masses.len() != caputo.schemes().len() {
            return Err(Error::invalid("one mass operator per order required"));
        }
        if masses.iter().any(|m| m.dim() != stiffness.dim()) {
            return Err(Error::invalid("mass and stiffness sizes differ"));
        }
        let coefs = caputo.implicit_coefficients();
        let mut lhs_terms: Vec<(f64, &SparseMatrix)> = coefs.iter().copied().zip(&masses).collect();
        let mut rhs_terms = lhs_terms.clone();
        lhs_terms.push((0.5, stiffness));
        rhs_terms.push((-0.5, stiffness));
        let lhs = SparseMatrix::combine(&lhs_terms)?;
        let explicit = SparseMatrix::combine(&rhs_terms)?;
        let reduction = DirichletReduction::new(stiffness.dim(), fixed, &vec![0.0; fixed.len()])?;
        let solver = SpdSolver::new(reduction.reduce_matrix(&lhs)?)?;
        Ok(Self {
            caputo,
            masses,
            explicit,
            reduction,
            solver,
        })
    }

    pub fn caputo(&self) -> &MixedCaputo {
        &self.caputo
    }

    pub fn dim(&self) -> usize {
        self.explicit.dim()
    }

    pub fn tau(&self) -> f64 {
        self.caputo.tau()
    }

    /// Midpoint time of the next step.
    pub fn next_half_time(&self, state: &TransientState) -> f64 {
        (state.step as f64 + 0.5) * self.tau()
    }

    /// Advances `state` by one step with load vector `load = F(t_{n-1/2})`.
    pub fn advance(&self, state: &mut TransientState, load: &[f64]) -> Result<()> {
        let n = state.step + 1;
        if n > self.caputo.steps() {
            return Err(Error::invalid(format!("step {n} beyond the configured {}", self.caputo.steps())));
        }
        if load.len() != self.dim() || state.u.len() != self.dim() {
            return Err(Error::invalid("state or load length differs from operator size"));
        }
        let mut rhs = load.to_vec();
        self.explicit.mul_vec_add(&state.u, 1.0, &mut rhs);
        for (mass, hist) in self.masses.iter().zip(self.caputo.explicit_terms(&state.history, n)?) {
            mass.mul_vec_add(&hist, 1.0, &mut rhs);
        }
        let reduced: Vec<f64> = self.reduction.free().iter().map(|&i| rhs[i]).collect();
        let next = self.reduction.expand(&self.solver.solve(&reduced)?);
        state.history.push_step(&state.u, &next, self.tau())?;
        state.u = next;
        state.step = n;
        Ok(())
    }
}

//! L1-type discretization of the Caputo derivative of order `1 < alpha < 2`
//! applied to the time derivative `v = du/dt`, evaluated at half steps.
//!
//! With `d_k = (u^k - u^{k-1}) / tau` and `psi = du/dt(0)`,
//!
//! ```text
//! D^alpha u(t_{n-1/2}) ~ sigma * [ a_0 d_n - sum_{k=1}^{n-1} (a_{n-k-1} - a_{n-k}) d_k - a_{n-1} psi ]
//! sigma = tau^{1-alpha} / Gamma(3 - alpha),   a_k = (k+1)^{2-alpha} - k^{2-alpha}
//! ```

use crate::error::{Error, Result};

fn check_order(alpha: f64) -> Result<()> {
    if alpha > 1.0 && alpha < 2.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("fractional order must lie in (1, 2), got {alpha}")))
    }
}

/// Gamma function.
pub fn gamma(x: f64) -> f64 {
    libm::tgamma(x)
}

/// The first `count` weights `a_k = (k+1)^{2-alpha} - k^{2-alpha}`.
pub fn weights(alpha: f64, count: usize) -> Result<Vec<f64>> {
    check_order(alpha)?;
    if count == 0 {
        return Err(Error::invalid("at least one weight required"));
    }
    let beta = 2.0 - alpha;
    Ok((0..count)
        .map(|k| {
            if k == 0 {
                1.0
            } else {
                // k^beta * ((1 + 1/k)^beta - 1), free of cancellation
                let k = k as f64;
                k.powf(beta) * (beta * (1.0 / k).ln_1p()).exp_m1()
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct CaputoScheme {
    alpha: f64,
    tau: f64,
    sigma: f64,
    weights: Vec<f64>,
}

impl CaputoScheme {
    /// Scheme for `steps` time steps of size `tau`.
    pub fn new(alpha: f64, tau: f64, steps: usize) -> Result<Self> {
        check_order(alpha)?;
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!("time step must be positive, got {tau}")));
        }
        Ok(Self {
            alpha,
            tau,
            sigma: tau.powf(1.0 - alpha) / gamma(3.0 - alpha),
            weights: weights(alpha, steps.max(1))?,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn steps(&self) -> usize {
        self.weights.len()
    }

    /// Coefficient of `u^n` (and of `-u^{n-1}`): `sigma * a_0 / tau`.
    pub fn implicit_coefficient(&self) -> f64 {
        self.sigma * self.weights[0] / self.tau
    }

    /// `sum_{k=1}^{n-1} (a_{n-k-1} - a_{n-k}) d_k + a_{n-1} psi` for step `n`,
    /// where `history` holds `d_1 .. d_{n-1}`.
    pub fn history_term(&self, history: &FractionalHistory, n: usize) -> Result<Vec<f64>> {
        let mut out = vec![0.0; history.dim()];
        self.history_term_into(history, n, 1.0, &mut out)?;
        Ok(out)
    }

    /// Adds `scale * history_term(history, n)` to `out`.
    pub fn history_term_into(&self, history: &FractionalHistory, n: usize, scale: f64, out: &mut [f64]) -> Result<()> {
        if n == 0 || history.len() != n - 1 {
            return Err(Error::invalid(format!(
                "step {n} needs {} stored quotients, history has {}",
                n.saturating_sub(1),
                history.len()
            )));
        }
        if n > self.weights.len() {
            return Err(Error::invalid(format!("step {n} beyond the {} configured steps", self.weights.len())));
        }
        if out.len() != history.dim() {
            return Err(Error::invalid("history and output lengths differ"));
        }
        let a = &self.weights;
        axpy(scale * a[n - 1], &history.psi, out);
        for (k, d) in (1..n).zip(&history.quotients) {
            axpy(scale * (a[n - k - 1] - a[n - k]), d, out);
        }
        Ok(())
    }
}

fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    if s == 0.0 {
        return;
    }
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

/// Initial velocity and the past difference quotients `d_k = (u^k - u^{k-1}) / tau`.
#[derive(Debug, Clone)]
pub struct FractionalHistory {
    psi: Vec<f64>,
    quotients: Vec<Vec<f64>>,
}

impl FractionalHistory {
    pub fn new(psi: Vec<f64>) -> Self {
        Self {
            psi,
            quotients: Vec::new(),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.psi.len()
    }

    pub fn len(&self) -> usize {
        self.quotients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quotients.is_empty()
    }

    pub fn psi(&self) -> &[f64] {
        &self.psi
    }

    pub fn quotients(&self) -> &[Vec<f64>] {
        &self.quotients
    }

    /// Records the step `u_prev -> u_next`.
    pub fn push_step(&mut self, u_prev: &[f64], u_next: &[f64], tau: f64) -> Result<()> {
        if u_prev.len() != self.dim() || u_next.len() != self.dim() {
            return Err(Error::invalid("state length differs from history"));
        }
        self.quotients
            .push(u_next.iter().zip(u_prev).map(|(a, b)| (a - b) / tau).collect());
        Ok(())
    }
}

/// Several Caputo orders sharing one time step and one history of `u`.
///
/// For `sum_p c_p D^{alpha_p} u` the step-`n` contribution is
/// `sum_p c_p [ implicit_p (u^n - u^{n-1}) - sigma_p history_p ]`, where the
/// `c_p` may be scalars or matrices supplied by the caller.
#[derive(Debug, Clone)]
pub struct MixedCaputo {
    schemes: Vec<CaputoScheme>,
}

impl MixedCaputo {
    pub fn new(schemes: Vec<CaputoScheme>) -> Result<Self> {
        let Some(first) = schemes.first() else {
            return Err(Error::invalid("at least one order required"));
        };
        if let Some(s) = schemes.iter().find(|s| s.tau != first.tau || s.steps() != first.steps()) {
            return Err(Error::invalid(format!(
                "orders must share the time grid (tau {} vs {})",
                first.tau, s.tau
            )));
        }
        Ok(Self { schemes })
    }

    pub fn from_orders(alphas: &[f64], tau: f64, steps: usize) -> Result<Self> {
        Self::new(alphas.iter().map(|&a| CaputoScheme::new(a, tau, steps)).collect::<Result<_>>()?)
    }

    pub fn schemes(&self) -> &[CaputoScheme] {
        &self.schemes
    }

    pub fn tau(&self) -> f64 {
        self.schemes[0].tau
    }

    pub fn steps(&self) -> usize {
        self.schemes[0].steps()
    }

    /// `sigma_p a_0 / tau` per order.
    pub fn implicit_coefficients(&self) -> Vec<f64> {
        self.schemes.iter().map(|s| s.implicit_coefficient()).collect()
    }

    /// `sigma_p * history_term_p(n)` per order.
    pub fn explicit_terms(&self, history: &FractionalHistory, n: usize) -> Result<Vec<Vec<f64>>> {
        self.schemes
            .iter()
            .map(|s| {
                let mut out = vec![0.0; history.dim()];
                s.history_term_into(history, n, s.sigma, &mut out)?;
                Ok(out)
            })
            .collect()
    }
}

/// Scalar equation `sum_p c_p D^{alpha_p} u + lambda u = g(t)` stepped with
/// the same half-step averaging as the spatial solvers.
#[derive(Debug, Clone)]
pub struct FractionalOde {
    /// `(alpha_p, c_p)` pairs.
    pub terms: Vec<(f64, f64)>,
    pub reaction: f64,
}

impl FractionalOde {
    pub fn single(alpha: f64, coef: f64, reaction: f64) -> Self {
        Self {
            terms: vec![(alpha, coef)],
            reaction,
        }
    }

    /// Values `u^0 .. u^steps`.
    pub fn solve(&self, tau: f64, steps: usize, u0: f64, psi: f64, g: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
        let alphas: Vec<f64> = self.terms.iter().map(|t| t.0).collect();
        let mixed = MixedCaputo::from_orders(&alphas, tau, steps)?;
        let lead: f64 = self
            .terms
            .iter()
            .zip(mixed.implicit_coefficients())
            .map(|(t, k)| t.1 * k)
            .sum();
        let lhs = lead + 0.5 * self.reaction;
        if lhs == 0.0 {
            return Err(Error::invalid("degenerate scalar fractional equation"));
        }
        let mut history = FractionalHistory::new(vec![psi]);
        let mut u = vec![u0];
        for n in 1..=steps {
            let prev = u[n - 1];
            let hist: f64 = self
                .terms
                .iter()
                .zip(mixed.explicit_terms(&history, n)?)
                .map(|(t, h)| t.1 * h[0])
                .sum();
            let t_half = (n as f64 - 0.5) * tau;
            let next = ((lead - 0.5 * self.reaction) * prev + hist + g(t_half)) / lhs;
            history.push_step(&[prev], &[next], tau)?;
            u.push(next);
        }
        Ok(u)
    }
}

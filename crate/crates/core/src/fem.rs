//! P1 finite elements on [`StructuredMesh`] and the sparse solves built on
//! them: symmetric positive definite systems and equality-constrained
//! (saddle-point) systems.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Llt, Lu};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Mat, Side};

use crate::error::{Error, Result};
use crate::grid::StructuredMesh;

/// Sparse square matrix in compressed-column form.
#[derive(Debug, Clone)]
pub struct SparseMatrix {
    inner: SparseColMat<usize, f64>,
    symmetric: bool,
}

impl SparseMatrix {
    /// Builds a matrix from triplets; duplicate entries are summed.
    pub fn from_triplets(n: usize, entries: &[(usize, usize, f64)], symmetric: bool) -> Result<Self> {
        let trips: Vec<_> = entries.iter().map(|&(r, c, v)| Triplet::new(r, c, v)).collect();
        let inner = SparseColMat::try_new_from_triplets(n, n, &trips)
            .map_err(|e| Error::invalid(format!("bad triplets: {e:?}")))?;
        Ok(Self { inner, symmetric })
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn nnz(&self) -> usize {
        self.inner.as_ref().val().len()
    }

    pub(crate) fn faer(&self) -> &SparseColMat<usize, f64> {
        &self.inner
    }

    /// Iterates over stored `(row, col, value)` entries.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let r = self.inner.as_ref();
        let cp = r.symbolic().col_ptr();
        let ri = r.symbolic().row_idx();
        let v = r.val();
        (0..self.dim()).flat_map(move |c| (cp[c]..cp[c + 1]).map(move |k| (ri[k], c, v[k])))
    }

    /// `y = A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.dim()];
        self.mul_vec_add(x, 1.0, &mut y);
        y
    }

    /// `y += s * A x`.
    pub fn mul_vec_add(&self, x: &[f64], s: f64, y: &mut [f64]) {
        let r = self.inner.as_ref();
        let cp = r.symbolic().col_ptr();
        let ri = r.symbolic().row_idx();
        let v = r.val();
        for c in 0..self.dim() {
            let xc = s * x[c];
            if xc == 0.0 {
                continue;
            }
            for k in cp[c]..cp[c + 1] {
                y[ri[k]] += v[k] * xc;
            }
        }
    }

    /// `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let ay = self.mul_vec(y);
        x.iter().zip(&ay).map(|(a, b)| a * b).sum()
    }

    /// Entry-wise linear combination `sum_k c_k A_k` of matrices of equal size.
    pub fn combine(terms: &[(f64, &SparseMatrix)]) -> Result<Self> {
        let n = terms.first().map(|t| t.1.dim()).unwrap_or(0);
        let mut trips = Vec::new();
        let mut symmetric = true;
        for (c, m) in terms {
            if m.dim() != n {
                return Err(Error::invalid("matrix sizes differ"));
            }
            symmetric &= m.symmetric;
            trips.extend(m.entries().map(|(r, col, v)| (r, col, c * v)));
        }
        Self::from_triplets(n, &trips, symmetric)
    }

    pub fn max_abs(&self) -> f64 {
        self.inner.as_ref().val().iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// `max |A - A^T|`.
    pub fn asymmetry(&self) -> f64 {
        let mut trips: Vec<_> = self.entries().collect();
        trips.extend(self.entries().map(|(r, c, v)| (c, r, -v)));
        Self::from_triplets(self.dim(), &trips, false)
            .map(|d| d.max_abs())
            .unwrap_or(f64::INFINITY)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        let mut d = vec![vec![0.0; n]; n];
        for (r, c, v) in self.entries() {
            d[r][c] += v;
        }
        d
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.dim()];
        for (r, c, v) in self.entries() {
            if r == c {
                d[r] += v;
            }
        }
        d
    }

    /// Principal submatrix on `keep` (in that order).
    pub fn restrict(&self, keep: &[usize]) -> Result<Self> {
        let mut map = vec![usize::MAX; self.dim()];
        for (k, &i) in keep.iter().enumerate() {
            map[i] = k;
        }
        let trips: Vec<_> = self
            .entries()
            .filter(|&(r, c, _)| map[r] != usize::MAX && map[c] != usize::MAX)
            .map(|(r, c, v)| (map[r], map[c], v))
            .collect();
        Self::from_triplets(keep.len(), &trips, self.symmetric)
    }
}

/// Gradients of the three P1 shape functions and the triangle area.
pub fn p1_gradients(tri: [[f64; 2]; 3]) -> ([[f64; 2]; 3], f64) {
    let [a, b, c] = tri;
    let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    let g = [
        [(b[1] - c[1]) / det, (c[0] - b[0]) / det],
        [(c[1] - a[1]) / det, (a[0] - c[0]) / det],
        [(a[1] - b[1]) / det, (b[0] - a[0]) / det],
    ];
    (g, 0.5 * det)
}

/// `int_T coef grad(phi_a) . grad(phi_b)` for a P1 triangle.
pub fn local_stiffness(tri: [[f64; 2]; 3], coef: f64) -> [[f64; 3]; 3] {
    let (g, area) = p1_gradients(tri);
    let mut k = [[0.0; 3]; 3];
    for a in 0..3 {
        for b in 0..3 {
            k[a][b] = coef * area * (g[a][0] * g[b][0] + g[a][1] * g[b][1]);
        }
    }
    k
}

/// `int_T w phi_a phi_b` for constant `w`.
pub fn local_mass(tri: [[f64; 2]; 3], weight: f64) -> [[f64; 3]; 3] {
    let (_, area) = p1_gradients(tri);
    let d = weight * area / 6.0;
    let o = weight * area / 12.0;
    [[d, o, o], [o, d, o], [o, o, d]]
}

fn element_vertices(mesh: &StructuredMesh, e: usize) -> [[f64; 2]; 3] {
    mesh.triangles()[e].map(|n| mesh.nodes()[n])
}

fn assemble_local(
    mesh: &StructuredMesh,
    mut local: impl FnMut(usize, [[f64; 2]; 3]) -> Option<[[f64; 3]; 3]>,
) -> Result<SparseMatrix> {
    let mut trips = Vec::with_capacity(9 * mesh.element_count());
    for (e, tri) in mesh.triangles().iter().enumerate() {
        if let Some(k) = local(e, element_vertices(mesh, e)) {
            for a in 0..3 {
                for b in 0..3 {
                    trips.push((tri[a], tri[b], k[a][b]));
                }
            }
        }
    }
    SparseMatrix::from_triplets(mesh.node_count(), &trips, true)
}

/// `int kappa grad u . grad v` with an element-wise constant coefficient.
pub fn assemble_stiffness(mesh: &StructuredMesh, coef: &[f64]) -> Result<SparseMatrix> {
    if mesh.element_count() == 0 {
        return Err(Error::invalid("empty mesh"));
    }
    if coef.len() != mesh.element_count() {
        return Err(Error::invalid("one coefficient per element required"));
    }
    if let Some(c) = coef.iter().find(|c| !(**c > 0.0)) {
        return Err(Error::invalid(format!("stiffness coefficient must be positive, got {c}")));
    }
    assemble_local(mesh, |e, tri| Some(local_stiffness(tri, coef[e])))
}

/// `int w u v` with an element-wise constant non-negative weight.
pub fn assemble_weighted_mass(mesh: &StructuredMesh, weight: &[f64]) -> Result<SparseMatrix> {
    if weight.len() != mesh.element_count() {
        return Err(Error::invalid("one weight per element required"));
    }
    if let Some(w) = weight.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::invalid(format!("mass weight must be non-negative, got {w}")));
    }
    assemble_local(mesh, |e, tri| (weight[e] != 0.0).then(|| local_mass(tri, weight[e])))
}

/// `int f v` with the one-point barycenter rule per triangle.
pub fn assemble_load(mesh: &StructuredMesh, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
    let mut b = vec![0.0; mesh.node_count()];
    for (e, tri) in mesh.triangles().iter().enumerate() {
        let share = f(mesh.barycenter(e)) * mesh.element_area(e) / 3.0;
        for &n in tri {
            b[n] += share;
        }
    }
    b
}

/// Elimination of prescribed nodal values from a linear system.
#[derive(Debug, Clone)]
pub struct DirichletReduction {
    n: usize,
    free: Vec<usize>,
    fixed: Vec<usize>,
    values: Vec<f64>,
}

impl DirichletReduction {
    pub fn new(n: usize, fixed: &[usize], values: &[f64]) -> Result<Self> {
        if fixed.len() != values.len() {
            return Err(Error::invalid("one value per constrained node required"));
        }
        let mut is_fixed = vec![false; n];
        for &i in fixed {
            if i >= n {
                return Err(Error::invalid(format!("constrained node {i} out of range")));
            }
            is_fixed[i] = true;
        }
        let mut order: Vec<(usize, f64)> = fixed.iter().copied().zip(values.iter().copied()).collect();
        order.sort_by_key(|p| p.0);
        order.dedup_by_key(|p| p.0);
        Ok(Self {
            n,
            free: (0..n).filter(|&i| !is_fixed[i]).collect(),
            fixed: order.iter().map(|p| p.0).collect(),
            values: order.iter().map(|p| p.1).collect(),
        })
    }

    /// No constrained nodes.
    pub fn none(n: usize) -> Self {
        Self {
            n,
            free: (0..n).collect(),
            fixed: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn free(&self) -> &[usize] {
        &self.free
    }

    pub fn fixed(&self) -> &[usize] {
        &self.fixed
    }

    pub fn full_len(&self) -> usize {
        self.n
    }

    /// `A_ff` of the constrained system.
    pub fn reduce_matrix(&self, a: &SparseMatrix) -> Result<SparseMatrix> {
        a.restrict(&self.free)
    }

    /// `b_f - A_fc g` for a full-length right-hand side.
    pub fn reduce_rhs(&self, a: &SparseMatrix, b: &[f64]) -> Vec<f64> {
        let mut lift = vec![0.0; self.n];
        for (&i, &v) in self.fixed.iter().zip(&self.values) {
            lift[i] = v;
        }
        let mut rhs = b.to_vec();
        if self.values.iter().any(|v| *v != 0.0) {
            a.mul_vec_add(&lift, -1.0, &mut rhs);
        }
        self.free.iter().map(|&i| rhs[i]).collect()
    }

    /// Full vector from free values plus the prescribed ones.
    pub fn expand(&self, free_values: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for (&i, &v) in self.free.iter().zip(free_values) {
            x[i] = v;
        }
        for (&i, &v) in self.fixed.iter().zip(&self.values) {
            x[i] = v;
        }
        x
    }
}

/// Symmetric elimination of Dirichlet values: returns the reduced matrix,
/// reduced right-hand side and the reduction used to expand solutions.
pub fn apply_dirichlet(
    a: &SparseMatrix,
    b: &[f64],
    fixed: &[usize],
    values: &[f64],
) -> Result<(SparseMatrix, Vec<f64>, DirichletReduction)> {
    let red = DirichletReduction::new(a.dim(), fixed, values)?;
    Ok((red.reduce_matrix(a)?, red.reduce_rhs(a, b), red))
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn relative_residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let mut r = b.to_vec();
    a.mul_vec_add(x, -1.0, &mut r);
    let nb = norm2(b);
    if nb == 0.0 {
        norm2(&r)
    } else {
        norm2(&r) / nb
    }
}

const SPD_TOLERANCE: f64 = 1e-10;

enum SpdBackend {
    Cholesky(Llt<usize, f64>),
    Cg { inv_diag: Vec<f64> },
}

/// Reusable solver for one SPD matrix: sparse Cholesky, with Jacobi
/// preconditioned CG as fallback when the factorization breaks down.
pub struct SpdSolver {
    matrix: SparseMatrix,
    backend: SpdBackend,
}

impl SpdSolver {
    pub fn new(matrix: SparseMatrix) -> Result<Self> {
        let backend = match matrix.faer().sp_cholesky(Side::Lower) {
            Ok(llt) => SpdBackend::Cholesky(llt),
            Err(e) => {
                log::warn!("sparse Cholesky failed ({e:?}); using preconditioned CG");
                let diag = matrix.diagonal();
                if diag.iter().any(|d| !(*d > 0.0)) {
                    return Err(Error::Solver {
                        message: "matrix has a non-positive diagonal entry".into(),
                        residual: f64::NAN,
                    });
                }
                SpdBackend::Cg {
                    inv_diag: diag.iter().map(|d| 1.0 / d).collect(),
                }
            }
        };
        Ok(Self { matrix, backend })
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.matrix.dim();
        if b.len() != n {
            return Err(Error::invalid("right-hand side length mismatch"));
        }
        if b.iter().all(|v| *v == 0.0) {
            return Ok(vec![0.0; n]);
        }
        let x = match &self.backend {
            SpdBackend::Cholesky(llt) => {
                let mut x = dense_solve(llt, b);
                // one step of refinement keeps the residual contract on
                // badly scaled high-contrast systems
                if relative_residual(&self.matrix, &x, b) > 0.1 * SPD_TOLERANCE {
                    let mut r = b.to_vec();
                    self.matrix.mul_vec_add(&x, -1.0, &mut r);
                    for (xi, di) in x.iter_mut().zip(dense_solve(llt, &r)) {
                        *xi += di;
                    }
                }
                x
            }
            SpdBackend::Cg { inv_diag } => conjugate_gradient(&self.matrix, inv_diag, b)?,
        };
        let res = relative_residual(&self.matrix, &x, b);
        if !(res <= SPD_TOLERANCE) {
            return Err(Error::Solver {
                message: "SPD solve did not reach the residual tolerance".into(),
                residual: res,
            });
        }
        Ok(x)
    }
}

fn dense_solve<S: Solve<f64>>(solver: &S, b: &[f64]) -> Vec<f64> {
    let mut rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
    solver.solve_in_place(rhs.as_mut());
    (0..b.len()).map(|i| rhs[(i, 0)]).collect()
}

fn conjugate_gradient(a: &SparseMatrix, inv_diag: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let nb = norm2(b);
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for _ in 0..(10 * n).max(1000) {
        let ap = a.mul_vec(&p);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            break;
        }
        let step = rz / pap;
        for i in 0..n {
            x[i] += step * p[i];
            r[i] -= step * ap[i];
        }
        if norm2(&r) <= 0.1 * SPD_TOLERANCE * nb {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Solver {
        message: "conjugate gradient did not converge".into(),
        residual: norm2(&r) / nb,
    })
}

/// One-shot SPD solve.
pub fn solve_spd(a: &SparseMatrix, b: &[f64]) -> Result<Vec<f64>> {
    SpdSolver::new(a.clone())?.solve(b)
}

/// Linear equality constraints `C u = g` over `n` unknowns, one sparse row
/// per constraint. Labels name each row in degeneracy reports.
#[derive(Debug, Clone, Default)]
pub struct ConstraintSet {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
    labels: Vec<String>,
}

impl ConstraintSet {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            rows: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<(usize, f64)>, label: impl Into<String>) -> Result<()> {
        if let Some(&(i, _)) = row.iter().find(|(i, _)| *i >= self.n) {
            return Err(Error::invalid(format!("constraint index {i} out of range")));
        }
        self.rows.push(row);
        self.labels.push(label.into());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn unknowns(&self) -> usize {
        self.n
    }

    pub fn rows(&self) -> &[Vec<(usize, f64)>] {
        &self.rows
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// `C u`.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(i, c)| c * u[i]).sum())
            .collect()
    }

    /// `C^T lambda`.
    pub fn apply_transpose(&self, lambda: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (row, &l) in self.rows.iter().zip(lambda) {
            for &(i, c) in row {
                out[i] += c * l;
            }
        }
        out
    }
}

/// Solution of `[[A, C^T], [C, 0]] (u, lambda) = (0, g)` with its residuals.
#[derive(Debug, Clone)]
pub struct SaddleSolution {
    pub solution: Vec<f64>,
    pub multipliers: Vec<f64>,
    /// `max |C u - g|`.
    pub constraint_residual: f64,
    /// `max |A u + C^T lambda|` relative to the larger of the two terms
    /// (floored by `max|A| max|u|`).
    pub stationarity_residual: f64,
}

const CONSTRAINT_TOLERANCE: f64 = 1e-10;
const STATIONARITY_TOLERANCE: f64 = 1e-8;

/// Factorized KKT system for a fixed `A` and constraint set; solves for any
/// number of constraint right-hand sides.
pub struct SaddleSolver {
    a: SparseMatrix,
    constraints: ConstraintSet,
    kkt: SparseColMat<usize, f64>,
    lu: Lu<usize, f64>,
    a_scale: f64,
}

impl SaddleSolver {
    pub fn new(a: SparseMatrix, constraints: ConstraintSet) -> Result<Self> {
        let n = a.dim();
        if constraints.unknowns() != n {
            return Err(Error::invalid("constraint and matrix dimensions differ"));
        }
        for (row, label) in constraints.rows.iter().zip(&constraints.labels) {
            if row.iter().all(|(_, c)| *c == 0.0) {
                return Err(Error::ConstraintDegeneracy(format!("empty constraint row ({label})")));
            }
        }
        let k = constraints.len();
        let mut trips: Vec<Triplet<usize, usize, f64>> = a.entries().map(|(r, c, v)| Triplet::new(r, c, v)).collect();
        for (r, row) in constraints.rows.iter().enumerate() {
            for &(i, c) in row {
                trips.push(Triplet::new(n + r, i, c));
                trips.push(Triplet::new(i, n + r, c));
            }
        }
        let kkt = SparseColMat::try_new_from_triplets(n + k, n + k, &trips)
            .map_err(|e| Error::invalid(format!("bad KKT structure: {e:?}")))?;
        let lu = kkt.sp_lu().map_err(|e| {
            Error::ConstraintDegeneracy(format!(
                "KKT matrix is singular ({e:?}); constraints [{}]",
                constraints.labels.join(", ")
            ))
        })?;
        Ok(Self {
            a_scale: a.max_abs(),
            a,
            constraints,
            kkt,
            lu,
        })
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.a
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn solve(&self, g: &[f64]) -> Result<SaddleSolution> {
        let n = self.a.dim();
        let k = self.constraints.len();
        if g.len() != k {
            return Err(Error::invalid("one constraint value per row required"));
        }
        let mut rhs = vec![0.0; n + k];
        rhs[n..].copy_from_slice(g);
        let kkt = SparseMatrix {
            inner: self.kkt.clone(),
            symmetric: true,
        };
        let mut x = dense_solve(&self.lu, &rhs);
        for _ in 0..2 {
            let mut r = rhs.clone();
            kkt.mul_vec_add(&x, -1.0, &mut r);
            if norm_inf(&r) == 0.0 {
                break;
            }
            for (xi, di) in x.iter_mut().zip(dense_solve(&self.lu, &r)) {
                *xi += di;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::ConstraintDegeneracy(format!(
                "non-finite KKT solution; constraints [{}]",
                self.constraints.labels.join(", ")
            )));
        }
        let multipliers = x.split_off(n);
        let solution = x;

        let cu = self.constraints.apply(&solution);
        let constraint_residual = cu.iter().zip(g).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let au = self.a.mul_vec(&solution);
        let ctl = self.constraints.apply_transpose(&multipliers);
        // floor the scale by |A| |u| so that exact cancellation (inactive
        // constraints) is not judged relative to rounding noise
        let scale = norm_inf(&au).max(norm_inf(&ctl)).max(self.a_scale * norm_inf(&solution));
        let stat: f64 = au.iter().zip(&ctl).fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
        let stationarity_residual = if scale == 0.0 { stat } else { stat / scale };

        if !(constraint_residual <= CONSTRAINT_TOLERANCE * norm_inf(g).max(1.0)) {
            return Err(Error::ConstraintDegeneracy(format!(
                "constraint residual {constraint_residual:e} above tolerance; constraints [{}]",
                self.constraints.labels.join(", ")
            )));
        }
        if !(stationarity_residual <= STATIONARITY_TOLERANCE) {
            return Err(Error::Solver {
                message: "KKT stationarity residual above tolerance".into(),
                residual: stationarity_residual,
            });
        }
        Ok(SaddleSolution {
            solution,
            multipliers,
            constraint_residual,
            stationarity_residual,
        })
    }
}

/// One-shot constrained minimization of `u^T A u / 2` subject to `C u = g`.
pub fn solve_saddle(a: &SparseMatrix, constraints: &ConstraintSet, g: &[f64]) -> Result<SaddleSolution> {
    SaddleSolver::new(a.clone(), constraints.clone())?.solve(g)
}

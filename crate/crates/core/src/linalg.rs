//! Small dense linear algebra over polytopes `{x : A x <= b}`.
//!
//! Everything here is sized for the handful of constraints that appear in
//! stochastic-approximation test beds: the proximal step of dual averaging is
//! solved exactly by enumerating candidate active subsets, which costs
//! `O(2^p)` small KKT solves for `p` general rows. Pure box constraints
//! (every row touches a single coordinate) skip the enumeration and are
//! handled by coordinate clipping in `O(s)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Singular values below `RANK_RTOL * sigma_max` are treated as zero.
pub const RANK_RTOL: f64 = 1e-12;

/// Largest number of general (non-box) rows accepted by the enumerating QP.
pub const MAX_GENERAL_ROWS: usize = 12;

const FEAS_RTOL: f64 = 1e-9;
const MULTIPLIER_TOL: f64 = 1e-10;
const STATIONARITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("constraint set is empty")]
    Infeasible,
    #[error("{rows} general constraint rows exceed the enumeration limit of {MAX_GENERAL_ROWS}")]
    TooManyRows { rows: usize },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

fn ensure_finite<'a>(what: &'static str, mut values: impl Iterator<Item = &'a f64>) -> Result<()> {
    if values.any(|v| !v.is_finite()) {
        Err(LinalgError::NonFinite(what))
    } else {
        Ok(())
    }
}

/// Thin SVD factors `(U, sigma, V^T)` with a verified reconstruction.
///
/// nalgebra's bidiagonal SVD occasionally returns factors that do not
/// multiply back to the input when some singular values are exactly zero
/// (the rank-deficient matrices projectors produce). Its output is checked
/// and replaced by a one-sided Jacobi SVD when the check fails.
fn svd_factors(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let reconstructs = |u: &DMatrix<f64>, sv: &DVector<f64>, v_t: &DMatrix<f64>| {
        (u * DMatrix::from_diagonal(sv) * v_t - m).amax() <= 1e-13 * scale
    };
    if let Some(svd) = m.clone().try_svd(true, true, f64::EPSILON, 0) {
        let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
        if reconstructs(&u, &svd.singular_values, &v_t) {
            return (u, svd.singular_values, v_t);
        }
    }
    jacobi_svd(m)
}

/// One-sided (Hestenes) Jacobi SVD; slow but accurate for tiny matrices.
fn jacobi_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    if m.nrows() < m.ncols() {
        let (u, sv, v_t) = jacobi_svd(&m.transpose());
        return (v_t.transpose(), sv, u.transpose());
    }
    let n = m.ncols();
    let mut a = m.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = a.column(p).norm_squared();
                let beta = a.column(q).norm_squared();
                let gamma = a.column(p).dot(&a.column(q));
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for mat in [&mut a, &mut v] {
                    for i in 0..mat.nrows() {
                        let (xp, xq) = (mat[(i, p)], mat[(i, q)]);
                        mat[(i, p)] = c * xp - s * xq;
                        mat[(i, q)] = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n).map(|j| a.column(j).norm()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let mut u = DMatrix::zeros(m.nrows(), n);
    let mut v_t = DMatrix::zeros(n, n);
    let mut sv = DVector::zeros(n);
    for (k, &j) in order.iter().enumerate() {
        sv[k] = norms[j];
        if norms[j] > 0.0 {
            u.set_column(k, &(a.column(j) / norms[j]));
        }
        v_t.set_row(k, &v.column(j).transpose());
    }
    (u, sv, v_t)
}

/// Moore-Penrose pseudoinverse via the SVD.
pub fn pseudoinverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    ensure_finite("matrix", m.iter())?;
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Ok(DMatrix::zeros(cols, rows));
    }
    let (u, singular_values, v_t) = svd_factors(m);
    let sigma_max = singular_values.max();
    let cutoff = RANK_RTOL * sigma_max;

    let mut out = DMatrix::zeros(cols, rows);
    for (k, &sigma) in singular_values.iter().enumerate() {
        if sigma > cutoff && sigma > 0.0 {
            let v_k = v_t.row(k).transpose();
            let u_k = u.column(k);
            out += (v_k * u_k.transpose()) / sigma;
        }
    }
    Ok(out)
}

/// Orthogonal projector onto the null space of a set of constraint rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    matrix: DMatrix<f64>,
    identity: bool,
}

impl Projector {
    pub fn identity(dim: usize) -> Self {
        Projector {
            matrix: DMatrix::identity(dim, dim),
            identity: true,
        }
    }

    /// `I - A^T (A A^T)^+ A`; an empty `A` gives the identity.
    pub fn onto_nullspace(a_active: &DMatrix<f64>) -> Result<Self> {
        ensure_finite("active rows", a_active.iter())?;
        let s = a_active.ncols();
        if a_active.nrows() == 0 {
            return Ok(Self::identity(s));
        }
        // I - A^T (A A^T)^+ A equals N N^T for an orthonormal basis N of the
        // right singular vectors with negligible singular values. Padding A
        // with zero rows makes V square, and working on A directly avoids
        // squaring its condition number.
        let k = a_active.nrows().max(s);
        let mut padded = DMatrix::zeros(k, s);
        padded.rows_mut(0, a_active.nrows()).copy_from(a_active);
        let (_, singular_values, v_t) = svd_factors(&padded);
        let cutoff = RANK_RTOL * singular_values.max();
        let mut p = DMatrix::zeros(s, s);
        for (i, &sigma) in singular_values.iter().enumerate() {
            if !(sigma > cutoff && sigma > 0.0) {
                let v = v_t.row(i);
                p += v.transpose() * v;
            }
        }
        let sym = (&p + p.transpose()) * 0.5;
        p.copy_from(&sym);
        Ok(Projector {
            matrix: p,
            identity: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn is_identity(&self) -> bool {
        self.identity
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        if self.identity {
            return v.to_vec();
        }
        let n = self.dim();
        (0..n)
            .map(|i| (0..n).map(|j| self.matrix[(i, j)] * v[j]).sum())
            .collect()
    }

    /// `||P v||^2`.
    pub fn norm_squared(&self, v: &[f64]) -> f64 {
        if self.identity {
            return v.iter().map(|x| x * x).sum();
        }
        self.apply(v).iter().map(|x| x * x).sum()
    }
}

/// Free-function form of [`Projector::onto_nullspace`].
pub fn projector_onto_nullspace(a_active: &DMatrix<f64>) -> Result<Projector> {
    Projector::onto_nullspace(a_active)
}

#[derive(Debug, Clone, PartialEq)]
struct BoxBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

/// Feasible set `{x in R^s : A x <= b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    a: DMatrix<f64>,
    b: DVector<f64>,
    names: Option<Vec<String>>,
    boxed: Option<BoxBounds>,
}

impl Polytope {
    /// Builds the polytope and checks that it is non-empty.
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.ncols() == 0 {
            return Err(LinalgError::Dimension("polytope needs s >= 1 columns".into()));
        }
        if a.nrows() != b.len() {
            return Err(LinalgError::Dimension(format!(
                "A has {} rows but b has {} entries",
                a.nrows(),
                b.len()
            )));
        }
        ensure_finite("A", a.iter())?;
        ensure_finite("b", b.iter())?;

        let boxed = detect_box(&a, &b)?;
        if boxed.is_none() && a.nrows() > MAX_GENERAL_ROWS {
            return Err(LinalgError::TooManyRows { rows: a.nrows() });
        }
        let k = Polytope {
            a,
            b,
            names: None,
            boxed,
        };
        // feasibility witness: the prox step from the origin with zero gradient
        let zeros = vec![0.0; k.dim()];
        k.prox(&zeros, &zeros)?;
        Ok(k)
    }

    pub fn from_rows(rows: &[Vec<f64>], rhs: &[f64]) -> Result<Self> {
        let s = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != s) {
            return Err(LinalgError::Dimension("ragged constraint rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(
            DMatrix::from_row_slice(rows.len(), s, &flat),
            DVector::from_column_slice(rhs),
        )
    }

    /// The whole space `R^dim` (no rows).
    pub fn unconstrained(dim: usize) -> Self {
        assert!(dim >= 1, "polytope needs s >= 1");
        Polytope {
            a: DMatrix::zeros(0, dim),
            b: DVector::zeros(0),
            names: None,
            boxed: Some(BoxBounds {
                lower: vec![f64::NEG_INFINITY; dim],
                upper: vec![f64::INFINITY; dim],
            }),
        }
    }

    /// Coordinate bounds; infinite entries produce no row. For each
    /// coordinate the upper-bound row precedes the lower-bound row.
    pub fn bounds(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(LinalgError::Dimension("bounds must have equal, non-zero length".into()));
        }
        let s = lower.len();
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        let mut names = Vec::new();
        for i in 0..s {
            if lower[i].is_nan() || upper[i].is_nan() {
                return Err(LinalgError::NonFinite("bounds"));
            }
            if upper[i].is_finite() {
                let mut r = vec![0.0; s];
                r[i] = 1.0;
                rows.push(r);
                rhs.push(upper[i]);
                names.push(format!("x{i} <= {}", upper[i]));
            }
            if lower[i].is_finite() {
                let mut r = vec![0.0; s];
                r[i] = -1.0;
                rows.push(r);
                rhs.push(-lower[i]);
                names.push(format!("x{i} >= {}", lower[i]));
            }
        }
        if rows.is_empty() {
            return Ok(Self::unconstrained(s));
        }
        Ok(Self::from_rows(&rows, &rhs)?.with_names(names))
    }

    /// Probability simplex `{mu >= 0, sum mu = 1}` written as `m + 2` rows.
    pub fn simplex(m: usize) -> Result<Self> {
        let mut rows = vec![vec![1.0; m], vec![-1.0; m]];
        let mut rhs = vec![1.0, -1.0];
        for i in 0..m {
            let mut r = vec![0.0; m];
            r[i] = -1.0;
            rows.push(r);
            rhs.push(0.0);
        }
        Self::from_rows(&rows, &rhs)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Self {
        if names.len() == self.rows() {
            self.names = Some(names);
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn is_box(&self) -> bool {
        self.boxed.is_some()
    }

    /// True when `-K == K` as a set (checked row-wise up to permutation).
    pub fn is_symmetric(&self) -> bool {
        (0..self.rows()).all(|i| {
            (0..self.rows()).any(|j| {
                (self.b[i] - self.b[j]).abs() <= 1e-12 * (1.0 + self.b[i].abs())
                    && (0..self.dim()).all(|c| (self.a[(i, c)] + self.a[(j, c)]).abs() <= 1e-12)
            })
        })
    }

    fn row_tol(&self, i: usize) -> f64 {
        FEAS_RTOL * (1.0 + self.b[i].abs())
    }

    fn slack(&self, i: usize, x: &[f64]) -> f64 {
        let lhs: f64 = (0..self.dim()).map(|c| self.a[(i, c)] * x[c]).sum();
        lhs - self.b[i]
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && (0..self.rows()).all(|i| self.slack(i, x) <= self.row_tol(i))
    }

    /// Rows of `A` selected by `indices`, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(indices.len(), self.dim(), |r, c| self.a[(indices[r], c)])
    }

    pub fn projector_for(&self, active: &ActiveSet) -> Result<Projector> {
        Projector::onto_nullspace(&self.select_rows(&active.indices))
    }

    fn prox(&self, g_sum: &[f64], x0: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.prox_into(g_sum, x0, &mut out)?;
        Ok(out)
    }

    fn prox_into(&self, g_sum: &[f64], x0: &[f64], out: &mut [f64]) -> Result<()> {
        let s = self.dim();
        if g_sum.len() != s || x0.len() != s || out.len() != s {
            return Err(LinalgError::Dimension(format!(
                "prox step in R^{s} got |g| = {}, |x0| = {}",
                g_sum.len(),
                x0.len()
            )));
        }
        if let Some(bx) = &self.boxed {
            for i in 0..s {
                out[i] = (x0[i] - g_sum[i]).max(bx.lower[i]).min(bx.upper[i]);
            }
            return Ok(());
        }
        let c = DVector::from_fn(s, |i, _| g_sum[i] - x0[i]);
        let sol = solve_qp(&DMatrix::identity(s, s), &c, self)?;
        out.copy_from_slice(sol.x.as_slice());
        Ok(())
    }
}

fn detect_box(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Option<BoxBounds>> {
    let s = a.ncols();
    let mut lower = vec![f64::NEG_INFINITY; s];
    let mut upper = vec![f64::INFINITY; s];
    for i in 0..a.nrows() {
        let nz: Vec<usize> = (0..s).filter(|&c| a[(i, c)] != 0.0).collect();
        match nz.as_slice() {
            [] => {
                if b[i] < -FEAS_RTOL * (1.0 + b[i].abs()) {
                    return Err(LinalgError::Infeasible);
                }
            }
            [c] => {
                let coef = a[(i, *c)];
                let bound = b[i] / coef;
                if coef > 0.0 {
                    upper[*c] = upper[*c].min(bound);
                } else {
                    lower[*c] = lower[*c].max(bound);
                }
            }
            _ => return Ok(None),
        }
    }
    if lower.iter().zip(&upper).any(|(l, u)| l > u) {
        return Err(LinalgError::Infeasible);
    }
    Ok(Some(BoxBounds { lower, upper }))
}

/// Rows of a polytope that are tight at a point.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct ActiveSet {
    pub indices: Vec<usize>,
}

impl ActiveSet {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains_all(&self, rows: &[usize]) -> bool {
        rows.iter().all(|r| self.indices.contains(r))
    }
}

/// Indices `i` with `|<A_i, x> - b_i| <= tol`. Without an explicit `tol`
/// each row uses `1e-9 * (1 + |b_i|)`.
pub fn active_set(x: &[f64], k: &Polytope, tol: Option<f64>) -> ActiveSet {
    let indices = (0..k.rows())
        .filter(|&i| {
            let t = tol.unwrap_or_else(|| k.row_tol(i));
            k.slack(i, x).abs() <= t
        })
        .collect();
    ActiveSet { indices }
}

/// `argmin_{x in K} <g_sum, x> + 1/2 ||x - x0||^2`.
pub fn dual_average_step(g_sum: &[f64], x0: &[f64], k: &Polytope) -> Result<Vec<f64>> {
    k.prox(g_sum, x0)
}

/// Allocation-free form of [`dual_average_step`].
pub fn dual_average_step_into(g_sum: &[f64], x0: &[f64], k: &Polytope, out: &mut [f64]) -> Result<()> {
    k.prox_into(g_sum, x0, out)
}

/// Solution of a strictly convex QP with its KKT multipliers (one per row).
#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
}

/// Max-abs KKT residual of `(x, lambda)` for `min 1/2 x'Hx + c'x s.t. Ax <= b`:
/// stationarity, primal feasibility, dual feasibility and complementarity.
pub fn kkt_residual(h: &DMatrix<f64>, c: &DVector<f64>, k: &Polytope, sol: &QpSolution) -> f64 {
    let stat = h * &sol.x + c + k.a().transpose() * &sol.multipliers;
    let mut r = stat.amax();
    for i in 0..k.rows() {
        let slack = k.slack(i, sol.x.as_slice());
        let lam = sol.multipliers[i];
        r = r.max(slack.max(0.0)).max((-lam).max(0.0)).max((lam * slack).abs());
    }
    r
}

/// Minimizes `1/2 x'Hx + c'x` over `K` for symmetric positive definite `H`
/// by enumerating candidate active subsets of size `<= s` in order of size,
/// then lexicographically. The first subset whose equality-constrained
/// solution is primal and dual feasible is returned.
pub fn solve_qp(h: &DMatrix<f64>, c: &DVector<f64>, k: &Polytope) -> Result<QpSolution> {
    let s = k.dim();
    let p = k.rows();
    if h.shape() != (s, s) || c.len() != s {
        return Err(LinalgError::Dimension(format!("QP in R^{s}: H is {:?}, |c| = {}", h.shape(), c.len())));
    }
    ensure_finite("H", h.iter())?;
    ensure_finite("c", c.iter())?;
    if p > MAX_GENERAL_ROWS {
        return Err(LinalgError::TooManyRows { rows: p });
    }

    let objective = |x: &DVector<f64>| 0.5 * x.dot(&(h * x)) + c.dot(x);
    let mut fallback: Option<(f64, QpSolution)> = None;

    for size in 0..=p.min(s) {
        for subset in Combinations::new(p, size) {
            let Some((x, lam)) = solve_equality_qp(h, c, k, &subset)? else {
                continue;
            };
            let xs = x.as_slice();
            let feasible = (0..p).all(|i| k.slack(i, xs) <= k.row_tol(i));
            if !feasible {
                continue;
            }
            let lam_scale = 1.0 + lam.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            let mut multipliers = DVector::zeros(p);
            for (j, &i) in subset.iter().enumerate() {
                multipliers[i] = lam[j];
            }
            let sol = QpSolution {
                x,
                multipliers,
                active: subset.clone(),
            };
            if lam.iter().all(|&l| l >= -MULTIPLIER_TOL * lam_scale) {
                let mut sol = sol;
                sol.multipliers.iter_mut().for_each(|l| *l = l.max(0.0));
                return Ok(sol);
            }
            let val = objective(&sol.x);
            if fallback.as_ref().is_none_or(|(best, _)| val < *best) {
                fallback = Some((val, sol));
            }
        }
    }
    fallback.map(|(_, sol)| sol).ok_or(LinalgError::Infeasible)
}

/// Solves `min 1/2 x'Hx + c'x s.t. A_S x = b_S` through the KKT system.
/// Returns `None` when the equalities are inconsistent.
fn solve_equality_qp(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    k: &Polytope,
    subset: &[usize],
) -> Result<Option<(DVector<f64>, Vec<f64>)>> {
    let s = k.dim();
    let m = subset.len();
    let a_s = k.select_rows(subset);
    let mut kkt = DMatrix::zeros(s + m, s + m);
    kkt.view_mut((0, 0), (s, s)).copy_from(h);
    kkt.view_mut((0, s), (s, m)).copy_from(&a_s.transpose());
    kkt.view_mut((s, 0), (m, s)).copy_from(&a_s);
    let mut rhs = DVector::zeros(s + m);
    for i in 0..s {
        rhs[i] = -c[i];
    }
    for (j, &i) in subset.iter().enumerate() {
        rhs[s + j] = k.b[i];
    }
    let sol = pseudoinverse(&kkt)? * &rhs;
    let x = sol.rows(0, s).into_owned();
    let lam: Vec<f64> = sol.rows(s, m).iter().copied().collect();

    let xs = x.as_slice();
    if subset.iter().any(|&i| k.slack(i, xs).abs() > k.row_tol(i)) {
        return Ok(None);
    }
    let stat = h * &x + c + a_s.transpose() * DVector::from_column_slice(&lam);
    let scale = 1.0 + c.amax() + h.amax() * x.amax();
    if stat.amax() > STATIONARITY_TOL * scale {
        return Ok(None);
    }
    Ok(Some((x, lam)))
}

/// k-subsets of `0..n` in lexicographic order.
struct Combinations {
    n: usize,
    current: Option<Vec<usize>>,
}

impl Combinations {
    fn new(n: usize, k: usize) -> Self {
        let current = (k <= n).then(|| (0..k).collect());
        Combinations { n, current }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let out = self.current.clone()?;
        let k = out.len();
        let mut next = out.clone();
        let mut i = k;
        loop {
            if i == 0 {
                self.current = None;
                break;
            }
            i -= 1;
            if next[i] < self.n - k + i {
                next[i] += 1;
                for j in i + 1..k {
                    next[j] = next[j - 1] + 1;
                }
                self.current = Some(next);
                break;
            }
        }
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        let c = rows[0].len();
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        DMatrix::from_row_slice(rows.len(), c, &flat)
    }

    #[test]
    fn combinations_are_lexicographic() {
        let all: Vec<_> = Combinations::new(4, 2).collect();
        assert_eq!(all, vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]);
        assert_eq!(Combinations::new(3, 0).collect::<Vec<_>>(), vec![Vec::<usize>::new()]);
        assert_eq!(Combinations::new(2, 3).count(), 0);
    }

    #[test]
    fn pseudoinverse_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_relative_eq!(pseudoinverse(&i2).unwrap(), i2, epsilon = 1e-14);
        assert_relative_eq!(pseudoinverse(&mat(&[&[2.0]])).unwrap()[(0, 0)], 0.5, epsilon = 1e-15);
        let m = mat(&[&[1.0, 1.0], &[2.0, 2.0]]);
        let expected = mat(&[&[1.0, 2.0], &[1.0, 2.0]]) / 10.0;
        assert_relative_eq!(pseudoinverse(&m).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn pseudoinverse_rejects_nan_and_handles_empty() {
        let m = mat(&[&[1.0, f64::NAN]]);
        assert_eq!(pseudoinverse(&m), Err(LinalgError::NonFinite("matrix")));
        let e = DMatrix::<f64>::zeros(0, 3);
        assert_eq!(pseudoinverse(&e).unwrap().shape(), (3, 0));
        let z = DMatrix::<f64>::zeros(2, 3);
        assert_eq!(pseudoinverse(&z).unwrap(), DMatrix::zeros(3, 2));
    }

    #[test]
    fn projector_examples() {
        let p = Projector::onto_nullspace(&DMatrix::zeros(0, 2)).unwrap();
        assert_eq!(p.matrix(), &DMatrix::identity(2, 2));
        let p = Projector::onto_nullspace(&mat(&[&[1.0, 0.0]])).unwrap();
        assert_relative_eq!(p.matrix().clone(), mat(&[&[0.0, 0.0], &[0.0, 1.0]]), epsilon = 1e-15);
        let p = Projector::onto_nullspace(&mat(&[&[1.0, 1.0], &[2.0, 2.0]])).unwrap();
        assert_relative_eq!(p.matrix().clone(), mat(&[&[0.5, -0.5], &[-0.5, 0.5]]), epsilon = 1e-14);
    }

    #[test]
    fn rank_deficient_projector_matches_orthonormal_basis() {
        // null space of [[1,1],[2,2]] is spanned by (1,-1)/sqrt(2)
        let p = Projector::onto_nullspace(&mat(&[&[1.0, 1.0], &[2.0, 2.0]])).unwrap();
        let q = DVector::from_column_slice(&[1.0, -1.0]) / 2f64.sqrt();
        assert_relative_eq!(p.matrix().clone(), &q * q.transpose(), epsilon = 1e-14);
    }

    #[test]
    fn dual_average_examples() {
        let free = Polytope::unconstrained(2);
        assert_eq!(dual_average_step(&[1.0, 2.0], &[0.0, 0.0], &free).unwrap(), vec![-1.0, -2.0]);

        let bx = Polytope::bounds(&[-1.0], &[1.0]).unwrap();
        assert!(bx.is_box());
        assert_eq!(dual_average_step(&[3.0], &[0.0], &bx).unwrap(), vec![-1.0]);

        let half = Polytope::from_rows(&[vec![1.0, 1.0]], &[1.0]).unwrap();
        assert!(!half.is_box());
        let x = dual_average_step(&[-2.0, -2.0], &[0.0, 0.0], &half).unwrap();
        assert_relative_eq!(x[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(x[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn halfspace_example_matches_grid_search() {
        let half = Polytope::from_rows(&[vec![1.0, 1.0]], &[1.0]).unwrap();
        let obj = |x: f64, y: f64| -2.0 * x - 2.0 * y + 0.5 * (x * x + y * y);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let steps = 800;
        for i in 0..=steps {
            for j in 0..=steps {
                let x = -1.0 + 3.0 * i as f64 / steps as f64;
                let y = -1.0 + 3.0 * j as f64 / steps as f64;
                if x + y <= 1.0 + 1e-12 && obj(x, y) < best.0 {
                    best = (obj(x, y), x, y);
                }
            }
        }
        let x = dual_average_step(&[-2.0, -2.0], &[0.0, 0.0], &half).unwrap();
        assert!((x[0] - best.1).abs() <= 3.0 / steps as f64);
        assert!((x[1] - best.2).abs() <= 3.0 / steps as f64);
    }

    #[test]
    fn zero_gradient_returns_feasible_center_exactly() {
        let half = Polytope::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]], &[1.0, 0.3]).unwrap();
        let x0 = [0.123456789, -0.3];
        assert!(half.contains(&x0));
        assert_eq!(dual_average_step(&[0.0, 0.0], &x0, &half).unwrap(), x0.to_vec());
    }

    #[test]
    fn infeasible_and_oversized_polytopes_are_rejected() {
        let bad = Polytope::from_rows(&[vec![1.0, 1.0], vec![-1.0, -1.0]], &[-1.0, -1.0]);
        assert_eq!(bad, Err(LinalgError::Infeasible));
        let bad_box = Polytope::bounds(&[1.0], &[0.0]);
        assert_eq!(bad_box, Err(LinalgError::Infeasible));
        let rows: Vec<Vec<f64>> = (0..13).map(|i| vec![1.0, i as f64]).collect();
        let rhs = vec![100.0; 13];
        assert_eq!(
            Polytope::from_rows(&rows, &rhs),
            Err(LinalgError::TooManyRows { rows: 13 })
        );
        assert!(matches!(
            Polytope::from_rows(&[vec![1.0]], &[1.0, 2.0]),
            Err(LinalgError::Dimension(_))
        ));
    }

    #[test]
    fn active_set_examples() {
        let bx = Polytope::bounds(&[-1.7], &[1.7]).unwrap();
        assert_eq!(active_set(&[1.7], &bx, None).indices, vec![0]);
        assert_eq!(active_set(&[-1.7], &bx, None).indices, vec![1]);
        assert!(active_set(&[0.0], &bx, None).is_empty());
        let dup = Polytope::from_rows(&[vec![1.0], vec![1.0]], &[1.0, 1.0]).unwrap();
        assert_eq!(active_set(&[1.0], &dup, None).indices, vec![0, 1]);
    }

    #[test]
    fn duplicated_rows_are_handled_in_the_kkt_solve() {
        let k = Polytope::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![2.0, 2.0]], &[1.0, 1.0, 2.0]).unwrap();
        let x = dual_average_step(&[-2.0, -2.0], &[0.0, 0.0], &k).unwrap();
        assert_relative_eq!(x[0], 0.5, epsilon = 1e-10);
        assert_relative_eq!(x[1], 0.5, epsilon = 1e-10);
    }

    #[test]
    fn simplex_prox_and_symmetry() {
        let k = Polytope::simplex(3).unwrap();
        assert!(!k.is_symmetric());
        let x = dual_average_step(&[0.0, 0.0, -10.0], &[1.0 / 3.0; 3], &k).unwrap();
        assert_relative_eq!(x[2], 1.0, epsilon = 1e-10);
        assert!(Polytope::bounds(&[-1.7], &[1.7]).unwrap().is_symmetric());
        assert!(!Polytope::bounds(&[-1.0], &[1.7]).unwrap().is_symmetric());
    }

    #[test]
    fn qp_solution_satisfies_kkt() {
        let h = mat(&[&[2.0, 0.5], &[0.5, 1.0]]);
        let c = DVector::from_column_slice(&[-3.0, -1.0]);
        let k = Polytope::from_rows(&[vec![1.0, 1.0], vec![-1.0, 0.0]], &[1.0, 0.0]).unwrap();
        let sol = solve_qp(&h, &c, &k).unwrap();
        assert!(kkt_residual(&h, &c, &k, &sol) <= 1e-9);
    }
}

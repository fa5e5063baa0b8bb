//! Principal eigenpairs of M-structured operators, and the nonlinear Dirichlet
//! eigenproblem `min_u [L^u V + c(·,u) V] = λ V` solved by policy iteration.
//!
//! The linear solver is a shifted inverse iteration whose shift tracks the
//! Collatz–Wielandt upper bound `max_i (Av)_i / v_i` of the principal
//! eigenvalue. Since that bound always dominates the spectral abscissa,
//! `sI − A` stays a nonsingular M-matrix, its inverse is entrywise positive,
//! and every iterate stays strictly positive. The gap between the upper and
//! lower Collatz–Wielandt bounds is a certified nodewise relative residual.

use serde::{Deserialize, Serialize};

use crate::discretize::{
    add_drift, assemble, diffusion_stencil, drift_capacity, Grid, OperatorMatrix, Policy,
};
use crate::error::{Error, Result};
use crate::model::{Model, MAX_DIM};

pub const DEFAULT_EIGEN_TOL: f64 = 1e-10;
pub const DEFAULT_LAMBDA_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_SWEEPS: usize = 100;
pub const DEFAULT_MAX_ITER: usize = 500;

/// Relative floor on the distance between the shift and the upper bound.
const SHIFT_FLOOR: f64 = 1e-10;
/// Extra iterations allowed after the tolerance is met while the
/// Collatz–Wielandt gap keeps halving.
const POLISH_ITERS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_EIGEN_TOL,
            max_iter: DEFAULT_MAX_ITER,
        }
    }
}

/// Principal eigenvalue and positive eigenvector, `v[origin] = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenPair {
    pub lambda: f64,
    pub v: Vec<f64>,
    /// `‖Av − λv‖∞ / ‖v‖∞`.
    pub residual: f64,
    pub iterations: usize,
    /// Collatz–Wielandt bounds `min_i (Av)_i/v_i ≤ λ ≤ max_i (Av)_i/v_i`.
    pub lower_bound: f64,
    pub upper_bound: f64,
}

/// Banded LU factorization without pivoting, valid for nonsingular M-matrices.
struct BandedLu {
    n: usize,
    p: usize,
    /// Row `i` stores columns `i-p ..= i+p` at offsets `0 ..= 2p`.
    band: Vec<f64>,
}

impl BandedLu {
    /// Factors `shift·I − A`.
    fn factor(op: &OperatorMatrix, p: usize, shift: f64) -> Result<Self> {
        let n = op.n;
        let w = 2 * p + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            for (j, a) in op.row(i) {
                band[i * w + (j + p - i)] -= a;
            }
            band[i * w + p] += shift;
        }
        for k in 0..n {
            let pivot = band[k * w + p];
            if !(pivot > 0.0) {
                return Err(Error::Invariant(format!(
                    "non-positive pivot {pivot:e} at row {k} of the shifted M-matrix"
                )));
            }
            let last = (k + p).min(n - 1);
            for i in k + 1..=last {
                let l = band[i * w + (k + p - i)] / pivot;
                if l == 0.0 {
                    continue;
                }
                band[i * w + (k + p - i)] = l;
                for j in k + 1..=last {
                    band[i * w + (j + p - i)] -= l * band[k * w + (j + p - k)];
                }
            }
        }
        Ok(Self { n, p, band })
    }

    // band offsets read more clearly with explicit indices
    #[allow(clippy::needless_range_loop)]
    fn solve(&self, rhs: &mut [f64]) {
        let (n, p, w) = (self.n, self.p, 2 * self.p + 1);
        for i in 0..n {
            let first = i.saturating_sub(p);
            let mut s = rhs[i];
            for j in first..i {
                s -= self.band[i * w + (j + p - i)] * rhs[j];
            }
            rhs[i] = s;
        }
        for i in (0..n).rev() {
            let last = (i + p).min(n - 1);
            let mut s = rhs[i];
            for j in i + 1..=last {
                s -= self.band[i * w + (j + p - i)] * rhs[j];
            }
            rhs[i] = s / self.band[i * w + p];
        }
    }
}

fn cw_bounds(op: &OperatorMatrix, v: &[f64], av: &mut [f64]) -> (f64, f64) {
    op.apply_into(v, av);
    av.iter()
        .zip(v)
        .map(|(a, x)| a / x)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| {
            (lo.min(q), hi.max(q))
        })
}

fn finish(op: &OperatorMatrix, v: Vec<f64>, av: &[f64], lo: f64, hi: f64, iterations: usize) -> EigenPair {
    let lambda = 0.5 * (lo + hi);
    let vmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let rmax = av
        .iter()
        .zip(&v)
        .fold(0.0f64, |m, (a, x)| m.max((a - lambda * x).abs()));
    debug_assert_eq!(v.len(), op.n);
    EigenPair {
        lambda,
        v,
        residual: rmax / vmax,
        iterations,
        lower_bound: lo,
        upper_bound: hi,
    }
}

/// Principal eigenpair of an operator with nonnegative off-diagonal entries.
pub fn principal_eigenpair(op: &OperatorMatrix, tol: f64, max_iter: usize) -> Result<EigenPair> {
    principal_eigenpair_from(op, tol, max_iter, None)
}

/// As [`principal_eigenpair`], starting from a positive initial vector.
pub fn principal_eigenpair_from(
    op: &OperatorMatrix,
    tol: f64,
    max_iter: usize,
    start: Option<&[f64]>,
) -> Result<EigenPair> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerance must be > 0, got {tol}")));
    }
    if op.n == 0 {
        return Err(Error::InvalidArgument("empty operator".into()));
    }
    op.check_m_structure()?;
    let n = op.n;
    let origin = op.origin_index;
    let p = op.bandwidth();
    let scale = op.diagonal().iter().fold(1.0f64, |m, d| m.max(d.abs()));

    let mut v: Vec<f64> = match start {
        Some(s) if s.len() == n && s.iter().all(|x| *x > 0.0 && x.is_finite()) => {
            let o = s[origin];
            s.iter().map(|x| x / o).collect()
        }
        _ => vec![1.0; n],
    };
    let mut av = vec![0.0; n];
    let (mut lo, mut hi) = cw_bounds(op, &v, &mut av);
    let mut converged_at: Option<usize> = None;
    let mut iterations = 0;
    loop {
        let gap = hi - lo;
        if gap <= tol && converged_at.is_none() {
            converged_at = Some(iterations);
        }
        if let Some(at) = converged_at {
            if iterations >= at + POLISH_ITERS {
                break;
            }
        }
        if iterations >= max_iter {
            if converged_at.is_some() {
                break;
            }
            let last = finish(op, v, &av, lo, hi, iterations);
            return Err(Error::EigenConvergence {
                iterations,
                residual: hi - lo,
                tol,
                last: Box::new(last),
            });
        }
        let shift = hi + (1e-3 * gap).max(SHIFT_FLOOR * scale);
        let lu = BandedLu::factor(op, p, shift)?;
        let mut w = v.clone();
        lu.solve(&mut w);
        if let Some((i, x)) = w.iter().enumerate().find(|(_, x)| !(**x > 0.0)) {
            return Err(Error::Invariant(format!(
                "inverse iterate lost positivity at node {i} ({x:e})"
            )));
        }
        let o = w[origin];
        for x in w.iter_mut() {
            *x /= o;
        }
        let (nlo, nhi) = cw_bounds(op, &w, &mut av);
        iterations += 1;
        if converged_at.is_some() && (nhi - nlo) > 0.5 * gap {
            // polishing stalled at round-off; keep the better iterate
            op.apply_into(&v, &mut av);
            break;
        }
        v = w;
        lo = nlo;
        hi = nhi;
    }
    Ok(finish(op, v, &av, lo, hi, iterations))
}

// ---------------------------------------------------------------------------
// Nonlinear Dirichlet eigenproblem
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HjbOptions {
    pub eigen: EigenOptions,
    /// Stop when consecutive principal eigenvalues differ by less than this.
    pub lambda_tol: f64,
    pub max_sweeps: usize,
}

impl Default for HjbOptions {
    fn default() -> Self {
        Self {
            eigen: EigenOptions::default(),
            lambda_tol: DEFAULT_LAMBDA_TOL,
            max_sweeps: DEFAULT_MAX_SWEEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HjbSolution {
    pub grid: Grid,
    pub eigenpair: EigenPair,
    /// Minimizing selector on the grid.
    pub policy: Policy,
    pub policy_sweeps: usize,
    pub lambda_history: Vec<f64>,
}

/// JSON view of a solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub lambda: f64,
    pub residual: f64,
    pub iterations: usize,
    pub grid: GridRecord,
    pub v: Vec<f64>,
    pub policy: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub r: f64,
    pub h: f64,
    pub dim: usize,
}

impl From<&Grid> for GridRecord {
    fn from(g: &Grid) -> Self {
        Self {
            r: g.radius,
            h: g.spacing,
            dim: g.dim,
        }
    }
}

impl HjbSolution {
    pub fn record(&self) -> SolutionRecord {
        SolutionRecord {
            lambda: self.eigenpair.lambda,
            residual: self.eigenpair.residual,
            iterations: self.eigenpair.iterations,
            grid: (&self.grid).into(),
            v: self.eigenpair.v.clone(),
            policy: self.policy.actions.clone(),
        }
    }
}

impl EigenPair {
    pub fn record(&self, grid: &Grid, policy: &Policy) -> SolutionRecord {
        SolutionRecord {
            lambda: self.lambda,
            residual: self.residual,
            iterations: self.iterations,
            grid: grid.into(),
            v: self.v.clone(),
            policy: policy.actions.clone(),
        }
    }
}

/// Value of the control-dependent part `bᵘ·∇ₕv + c(x,u) v(x)` at node `i`,
/// differenced exactly as in the assembled operator, with zero boundary data.
#[allow(clippy::too_many_arguments)]
fn control_term(
    model: &Model,
    grid: &Grid,
    v: &[f64],
    i: usize,
    x: &[f64],
    capacity: &[f64; MAX_DIM],
    action: usize,
    b: &mut [f64],
) -> f64 {
    let h = grid.spacing;
    model.drift_at(x, action, b);
    let at = |axis: usize, step: i64| -> f64 {
        let mut off = [0i64; MAX_DIM];
        off[axis] = step;
        grid.shifted(i, off).map_or(0.0, |j| v[j])
    };
    let mut acc = model.cost_at(x, action) * v[i];
    for (axis, bi) in b.iter().enumerate() {
        if bi.abs() * h <= capacity[axis] {
            acc += 0.5 * bi * (at(axis, 1) - at(axis, -1)) / h;
        } else if *bi >= 0.0 {
            acc += bi * (at(axis, 1) - v[i]) / h;
        } else {
            acc += bi.abs() * (at(axis, -1) - v[i]) / h;
        }
    }
    acc
}

fn node_capacity(model: &Model, grid: &Grid, x: &[f64]) -> [f64; MAX_DIM] {
    let d = grid.dim;
    let mut a = [0.0; MAX_DIM * MAX_DIM];
    model.diffusion_matrix(x, &mut a[..d * d]);
    drift_capacity(d, &a[..d * d])
}

/// Pointwise minimizer of the Hamiltonian for the current eigenvector;
/// ties go to the lowest action index.
pub fn select_policy(model: &Model, grid: &Grid, v: &[f64]) -> Policy {
    let d = grid.dim;
    let actions = (0..grid.len())
        .map(|i| {
            let mut x = [0.0; MAX_DIM];
            let mut b = [0.0; MAX_DIM];
            grid.node(i, &mut x[..d]);
            let cap = node_capacity(model, grid, &x[..d]);
            let mut best = (f64::INFINITY, 0usize);
            for k in 0..model.actions.len() {
                let val = control_term(model, grid, v, i, &x[..d], &cap, k, &mut b[..d]);
                if val < best.0 {
                    best = (val, k);
                }
            }
            best.1
        })
        .collect();
    Policy { actions }
}

/// Solves the Dirichlet HJB eigenproblem on `grid` by policy iteration.
pub fn solve_hjb_dirichlet(model: &Model, grid: &Grid, opts: &HjbOptions) -> Result<HjbSolution> {
    if model.actions.is_empty() {
        return Err(Error::InvalidModel("empty action set".into()));
    }
    let mut policy = Policy::constant(grid.len(), 0);
    let mut history = Vec::new();
    let mut warm: Option<Vec<f64>> = None;
    let mut previous_policy: Option<Policy> = None;
    loop {
        let op = assemble(model, grid, &policy)?;
        let ep = principal_eigenpair_from(&op, opts.eigen.tol, opts.eigen.max_iter, warm.as_deref())?;
        history.push(ep.lambda);
        let sweeps = history.len();
        if !model.is_controlled() {
            return Ok(HjbSolution {
                grid: *grid,
                eigenpair: ep,
                policy,
                policy_sweeps: sweeps,
                lambda_history: history,
            });
        }
        let next = select_policy(model, grid, &ep.v);
        let delta = if sweeps >= 2 {
            (history[sweeps - 1] - history[sweeps - 2]).abs()
        } else {
            f64::INFINITY
        };
        if next == policy || delta < opts.lambda_tol {
            return Ok(HjbSolution {
                grid: *grid,
                eigenpair: ep,
                policy,
                policy_sweeps: sweeps,
                lambda_history: history,
            });
        }
        if sweeps >= opts.max_sweeps {
            return Err(Error::PolicyConvergence {
                sweeps,
                delta,
                previous: Box::new(previous_policy.unwrap_or_else(|| policy.clone())),
                current: Box::new(next),
            });
        }
        warm = Some(ep.v);
        previous_policy = Some(std::mem::replace(&mut policy, next));
    }
}

/// Nodewise relative HJB residual
/// `|min_u[(L^u v)(x) + c(x,u) v(x)] − λ v(x)| / v(x)`.
pub fn hjb_residual_field(model: &Model, grid: &Grid, v: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if v.len() != grid.len() {
        return Err(Error::InvalidArgument("field length does not match grid".into()));
    }
    if v.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::InvalidArgument("hjb_residual needs a positive field".into()));
    }
    let d = grid.dim;
    let mut out = Vec::with_capacity(grid.len());
    let mut x = [0.0; MAX_DIM];
    let mut a = [0.0; MAX_DIM * MAX_DIM];
    let mut b = [0.0; MAX_DIM];
    for i in 0..grid.len() {
        grid.node(i, &mut x[..d]);
        model.diffusion_matrix(&x[..d], &mut a[..d * d]);
        let st = diffusion_stencil(d, &a[..d * d], grid.spacing, i)?;
        let diff: f64 = st
            .entries
            .iter()
            .map(|(off, w)| w * grid.shifted(i, *off).map_or(0.0, |j| v[j]))
            .sum();
        let cap = drift_capacity(d, &a[..d * d]);
        let min_u = (0..model.actions.len())
            .map(|k| control_term(model, grid, v, i, &x[..d], &cap, k, &mut b[..d]))
            .fold(f64::INFINITY, f64::min);
        out.push(((diff + min_u) - lambda * v[i]).abs() / v[i]);
    }
    Ok(out)
}

pub fn hjb_residual(model: &Model, grid: &Grid, v: &[f64], lambda: f64) -> Result<f64> {
    Ok(hjb_residual_field(model, grid, v, lambda)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Applies the full operator `L^u + c(·,u)` for a fixed policy to `v` without
/// assembling a matrix; used by tests and the certificate checks.
pub fn apply_policy_operator(model: &Model, grid: &Grid, policy: &Policy, v: &[f64]) -> Result<Vec<f64>> {
    let d = grid.dim;
    let mut out = Vec::with_capacity(grid.len());
    let mut x = [0.0; MAX_DIM];
    let mut a = [0.0; MAX_DIM * MAX_DIM];
    let mut b = [0.0; MAX_DIM];
    for i in 0..grid.len() {
        grid.node(i, &mut x[..d]);
        model.diffusion_matrix(&x[..d], &mut a[..d * d]);
        model.drift_at(&x[..d], policy.actions[i], &mut b[..d]);
        let mut st = diffusion_stencil(d, &a[..d * d], grid.spacing, i)?;
        add_drift(&mut st, &b[..d], grid.spacing, &drift_capacity(d, &a[..d * d]));
        st.entries.push(([0, 0], model.cost_at(&x[..d], policy.actions[i])));
        out.push(
            st.entries
                .iter()
                .map(|(off, w)| w * grid.shifted(i, *off).map_or(0.0, |j| v[j]))
                .sum(),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discretize::make_grid;
    use crate::model::{builtin, ou_quadratic, ActionSet};
    use std::sync::Arc;

    #[test]
    fn two_by_two_symmetric() {
        let a = OperatorMatrix::from_triplets(
            2,
            &[(0, 0, -1.0), (0, 1, 0.5), (1, 0, 0.5), (1, 1, -1.0)],
            0,
        )
        .unwrap();
        let ep = principal_eigenpair(&a, 1e-12, 100).unwrap();
        assert!((ep.lambda + 0.5).abs() < 1e-12);
        assert!((ep.v[0] - 1.0).abs() < 1e-15);
        assert!((ep.v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_shift_moves_lambda_only() {
        let a = OperatorMatrix::from_triplets(
            3,
            &[
                (0, 0, -2.0),
                (0, 1, 1.0),
                (1, 0, 0.3),
                (1, 1, -1.0),
                (1, 2, 0.4),
                (2, 1, 2.0),
                (2, 2, -3.0),
            ],
            1,
        )
        .unwrap();
        let e0 = principal_eigenpair(&a, 1e-12, 100).unwrap();
        let e1 = principal_eigenpair(&a.shifted(0.7), 1e-12, 100).unwrap();
        assert!((e1.lambda - e0.lambda - 0.7).abs() < 1e-12);
        for (x, y) in e0.v.iter().zip(&e1.v) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn dirichlet_laplacian_unit_ball() {
        let m = crate::model::InlineModel {
            dim: 1,
            drift: crate::model::DriftFamily::Zero,
            cost: crate::model::CostFamily::Zero,
            sigma: crate::model::SigmaSpec::Scalar(1.0),
            actions: None,
            label: None,
        }
        .build()
        .unwrap();
        let g = make_grid(1, 1.0, 0.01).unwrap();
        let op = assemble(&m, &g, &Policy::constant(g.len(), 0)).unwrap();
        let ep = principal_eigenpair(&op, 1e-10, 200).unwrap();
        let exact = -std::f64::consts::PI.powi(2) / 8.0;
        assert!((ep.lambda - exact).abs() < 5e-3, "{}", ep.lambda);
        assert!(ep.v.iter().all(|x| *x > 0.0));
        assert!(ep.residual <= 1e-10);
    }

    #[test]
    fn rejects_negative_off_diagonal() {
        let a = OperatorMatrix::from_triplets(2, &[(0, 0, -1.0), (0, 1, -0.5), (1, 1, -1.0)], 0)
            .unwrap();
        assert!(matches!(principal_eigenpair(&a, 1e-10, 10), Err(Error::Monotonicity { .. })));
    }

    #[test]
    fn iteration_cap_returns_last_iterate() {
        let m = ou_quadratic(1.0, 0.375).unwrap();
        let g = make_grid(1, 4.0, 0.05).unwrap();
        let op = assemble(&m, &g, &Policy::constant(g.len(), 0)).unwrap();
        match principal_eigenpair(&op, 1e-10, 1) {
            Err(Error::EigenConvergence { last, iterations, .. }) => {
                assert_eq!(iterations, 1);
                assert_eq!(last.v.len(), g.len());
                assert!(last.v.iter().all(|x| *x > 0.0));
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
    }

    #[test]
    fn uncontrolled_hjb_is_one_eigensolve() {
        let m = builtin("ou_quadratic").unwrap();
        let g = make_grid(1, 4.0, 0.05).unwrap();
        let sol = solve_hjb_dirichlet(&m, &g, &HjbOptions::default()).unwrap();
        assert_eq!(sol.policy_sweeps, 1);
        let res = hjb_residual(&m, &g, &sol.eigenpair.v, sol.eigenpair.lambda).unwrap();
        assert!(res <= 1e-10, "{res:e}");
        let shifted = hjb_residual(&m, &g, &sol.eigenpair.v, sol.eigenpair.lambda + 0.1).unwrap();
        assert!(shifted >= 0.1 * (1.0 - 1e-10));
    }

    #[test]
    fn constant_cost_shift_keeps_policy() {
        let m = builtin("lq_clamped").unwrap();
        let g = make_grid(1, 3.0, 0.05).unwrap();
        let opts = HjbOptions::default();
        let s0 = solve_hjb_dirichlet(&m, &g, &opts).unwrap();
        let s1 = solve_hjb_dirichlet(&m.with_cost_shift(0.7), &g, &opts).unwrap();
        assert_eq!(s0.policy, s1.policy);
        assert!((s1.eigenpair.lambda - s0.eigenpair.lambda - 0.7).abs() < 1e-10);
    }

    #[test]
    fn policy_iteration_descends() {
        let m = builtin("lq_clamped").unwrap();
        let g = make_grid(1, 4.0, 0.05).unwrap();
        let sol = solve_hjb_dirichlet(&m, &g, &HjbOptions::default()).unwrap();
        assert!(sol.policy_sweeps > 1);
        for w in sol.lambda_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{:?}", sol.lambda_history);
        }
        assert_eq!(select_policy(&m, &g, &sol.eigenpair.v), sol.policy);
        let res = hjb_residual(&m, &g, &sol.eigenpair.v, sol.eigenpair.lambda).unwrap();
        assert!(res <= 1e-10, "{res:e}");
    }

    #[test]
    fn apply_policy_operator_matches_assembly() {
        let m = builtin("double_well").unwrap();
        let g = make_grid(1, 2.0, 0.1).unwrap();
        let p = Policy::constant(g.len(), 0);
        let op = assemble(&m, &g, &p).unwrap();
        let v: Vec<f64> = (0..g.len()).map(|i| 1.0 + (i as f64).sin().abs()).collect();
        let a = crate::discretize::apply(&op, &v).unwrap();
        let b = apply_policy_operator(&m, &g, &p, &v).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn two_dimensional_solve_positive() {
        let m = crate::model::Model::new(
            2,
            Arc::new(|x, _u, out| {
                out[0] = -x[0];
                out[1] = -0.5 * x[1];
            }),
            Arc::new(|_x, out| {
                out.copy_from_slice(&[1.0, 0.0, 0.3, 0.9]);
            }),
            Arc::new(|x, _u| 0.2 * (x[0] * x[0] + x[1] * x[1])),
            ActionSet::singleton(),
            "ou2",
        )
        .unwrap();
        let g = make_grid(2, 3.0, 0.2).unwrap();
        let sol = solve_hjb_dirichlet(&m, &g, &HjbOptions::default()).unwrap();
        assert!(sol.eigenpair.v.iter().all(|x| *x > 0.0));
        assert_eq!(sol.eigenpair.v[g.origin_index()], 1.0);
        assert!(sol.eigenpair.residual <= 1e-10);
    }
}

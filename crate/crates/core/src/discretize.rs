//! Tensor-product grids on boxes `[-r, r]^d` and the monotone finite
//! difference discretization of `L_v + c_v` with zero Dirichlet data.
//!
//! Second derivatives use central differences (the 7-point positive
//! splitting for the mixed term in 2-D), first derivatives are upwinded on
//! the sign of the drift. Every assembled matrix therefore has nonnegative
//! off-diagonal entries.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, MAX_DIM};

/// Default cap on the number of interior nodes.
pub const DEFAULT_NODE_CAP: usize = 4_000_000;

/// Interior lattice `{k·h : |k·h| < r}^dim` of the box `B_r`.
///
/// The lattice always contains the origin and is symmetric about it. The
/// Dirichlet boundary sits one cell beyond the outermost interior node, at
/// half-width [`Grid::dirichlet_radius`]; when `h` divides `r` this is `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    pub radius: f64,
    pub spacing: f64,
    /// Interior nodes per half-axis, excluding the origin.
    pub half: usize,
}

impl Grid {
    /// Number of nodes along one axis.
    pub fn side(&self) -> usize {
        2 * self.half + 1
    }

    pub fn len(&self) -> usize {
        self.side().pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dirichlet_radius(&self) -> f64 {
        (self.half + 1) as f64 * self.spacing
    }

    /// Index of the node at the origin.
    pub fn origin_index(&self) -> usize {
        match self.dim {
            1 => self.half,
            _ => self.half * self.side() + self.half,
        }
    }

    /// Signed lattice offsets of node `idx` along each axis.
    #[inline]
    pub fn offsets(&self, idx: usize) -> [i64; MAX_DIM] {
        let side = self.side();
        let k = self.half as i64;
        match self.dim {
            1 => [idx as i64 - k, 0],
            _ => [(idx % side) as i64 - k, (idx / side) as i64 - k],
        }
    }

    #[inline]
    pub fn node(&self, idx: usize, out: &mut [f64]) {
        let off = self.offsets(idx);
        for (o, k) in out.iter_mut().zip(off.iter()).take(self.dim) {
            *o = *k as f64 * self.spacing;
        }
    }

    /// Coordinates of all nodes, flattened in node order.
    pub fn nodes(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len() * self.dim];
        for (i, chunk) in out.chunks_exact_mut(self.dim).enumerate() {
            self.node(i, chunk);
        }
        out
    }

    /// Index stride of one step along `axis`.
    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        if axis == 0 {
            1
        } else {
            self.side()
        }
    }

    /// Neighbour of `idx` shifted by `steps` along each axis, or `None` when it
    /// falls on or outside the Dirichlet boundary.
    #[inline]
    pub fn shifted(&self, idx: usize, steps: [i64; MAX_DIM]) -> Option<usize> {
        let off = self.offsets(idx);
        let k = self.half as i64;
        let mut out = 0usize;
        for axis in 0..self.dim {
            let o = off[axis] + steps[axis];
            if o.abs() > k {
                return None;
            }
            out += (o + k) as usize * self.stride(axis);
        }
        Some(out)
    }

    /// Index of the node with the given offsets, if interior.
    pub fn index_of(&self, offsets: [i64; MAX_DIM]) -> Option<usize> {
        self.shifted(self.origin_index(), offsets)
    }

    /// Distance (in the sup-norm) from node `idx` to the Dirichlet boundary,
    /// counted in cells; 1 for boundary-adjacent nodes.
    pub fn cells_to_boundary(&self, idx: usize) -> usize {
        let off = self.offsets(idx);
        let m = off[..self.dim].iter().map(|o| o.unsigned_abs()).max().unwrap_or(0);
        self.half + 1 - m as usize
    }

    /// Multilinear interpolation of a nodal field at `x`. Outside the interior
    /// lattice, values are taken from `outside` (zero Dirichlet data or the
    /// nearest interior node).
    pub fn interpolate(&self, field: &[f64], x: &[f64], outside: Extension) -> f64 {
        let h = self.spacing;
        let k = self.half as i64;
        let mut base = [0i64; MAX_DIM];
        let mut frac = [0.0; MAX_DIM];
        for axis in 0..self.dim {
            let mut s = x[axis] / h;
            if outside == Extension::Clamp {
                s = s.clamp(-(k as f64), k as f64);
            }
            let f = s.floor();
            base[axis] = f as i64;
            frac[axis] = s - f;
        }
        let value_at = |off: [i64; MAX_DIM]| -> f64 {
            let inside = off[..self.dim].iter().all(|o| o.abs() <= k);
            if inside {
                field[self.index_of(off).expect("inside lattice")]
            } else {
                match outside {
                    Extension::Zero => 0.0,
                    Extension::Clamp => {
                        let mut c = off;
                        for v in c[..self.dim].iter_mut() {
                            *v = (*v).clamp(-k, k);
                        }
                        field[self.index_of(c).expect("clamped inside lattice")]
                    }
                }
            }
        };
        match self.dim {
            1 => {
                let v0 = value_at([base[0], 0]);
                let v1 = value_at([base[0] + 1, 0]);
                v0 + frac[0] * (v1 - v0)
            }
            _ => {
                let v00 = value_at([base[0], base[1]]);
                let v10 = value_at([base[0] + 1, base[1]]);
                let v01 = value_at([base[0], base[1] + 1]);
                let v11 = value_at([base[0] + 1, base[1] + 1]);
                let (fx, fy) = (frac[0], frac[1]);
                (1.0 - fy) * ((1.0 - fx) * v00 + fx * v10) + fy * ((1.0 - fx) * v01 + fx * v11)
            }
        }
    }

    /// Nearest interior node to `x` (coordinates clamped to the lattice).
    pub fn nearest(&self, x: &[f64]) -> usize {
        let k = self.half as i64;
        let mut off = [0i64; MAX_DIM];
        for axis in 0..self.dim {
            off[axis] = ((x[axis] / self.spacing).round() as i64).clamp(-k, k);
        }
        self.index_of(off).expect("clamped inside lattice")
    }
}

/// How [`Grid::interpolate`] extends a nodal field past the interior lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Extension {
    /// Dirichlet data: zero on and beyond the boundary.
    Zero,
    /// Constant extension from the nearest interior node.
    Clamp,
}

/// Builds the interior lattice of `B_r` with spacing `h`.
pub fn make_grid(dim: usize, radius: f64, spacing: f64) -> Result<Grid> {
    make_grid_capped(dim, radius, spacing, DEFAULT_NODE_CAP)
}

pub fn make_grid_capped(dim: usize, radius: f64, spacing: f64, cap: usize) -> Result<Grid> {
    if dim == 0 || dim > MAX_DIM {
        return Err(Error::InvalidArgument(format!("grid dimension {dim} unsupported")));
    }
    if !(spacing > 0.0) || !(radius > spacing) || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "grid needs radius > spacing > 0 (radius={radius}, spacing={spacing})"
        )));
    }
    let q = radius / spacing;
    let nearest = q.round();
    // largest k with k·h < r, treating r/h within rounding of an integer as exact
    let half = if (q - nearest).abs() <= 1e-9 * q.max(1.0) {
        nearest as usize - 1
    } else {
        q.floor() as usize
    };
    let side = (2 * half + 1) as u128;
    let nodes = side.pow(dim as u32);
    if nodes > cap as u128 {
        return Err(Error::Resource {
            nodes: nodes.min(usize::MAX as u128) as usize,
            cap,
        });
    }
    Ok(Grid {
        dim,
        radius,
        spacing,
        half,
    })
}

/// One action index per grid node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub actions: Vec<usize>,
}

impl Policy {
    pub fn constant(nodes: usize, action: usize) -> Self {
        Self {
            actions: vec![action; nodes],
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn check(&self, grid: &Grid, model: &Model) -> Result<()> {
        if self.actions.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "policy has {} entries for a grid of {} nodes",
                self.actions.len(),
                grid.len()
            )));
        }
        if let Some(bad) = self.actions.iter().find(|a| **a >= model.actions.len()) {
            return Err(Error::InvalidArgument(format!(
                "policy action index {bad} out of range ({} actions)",
                model.actions.len()
            )));
        }
        Ok(())
    }
}

/// Row-compressed sparse matrix over the interior nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
    /// Row used to normalize eigenvectors (the node at the origin).
    pub origin_index: usize,
    pub grid: Option<Grid>,
    pub policy: Option<Policy>,
}

impl OperatorMatrix {
    /// Builds a matrix from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)], origin_index: usize) -> Result<Self> {
        if origin_index >= n.max(1) {
            return Err(Error::InvalidArgument("origin index out of range".into()));
        }
        let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            if i >= n || j >= n {
                return Err(Error::InvalidArgument(format!("entry ({i},{j}) outside {n}×{n}")));
            }
            rows[i].push((j, v));
        }
        let mut m = Self::from_rows(rows, origin_index);
        m.grid = None;
        Ok(m)
    }

    fn from_rows(rows: Vec<Vec<(usize, f64)>>, origin_index: usize) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|e| e.0);
            let mut last: Option<usize> = None;
            for (j, v) in row {
                if last == Some(j) {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(j);
                    values.push(v);
                    last = Some(j);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            n,
            row_ptr,
            col_idx,
            values,
            origin_index,
            grid: None,
            policy: None,
        }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.row(i).filter(|e| e.0 == i).map(|e| e.1).sum())
            .collect()
    }

    /// Largest `|i − j|` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, _)| i.abs_diff(j)))
            .max()
            .unwrap_or(0)
    }

    /// Checks that every off-diagonal entry is nonnegative and finite.
    pub fn check_m_structure(&self) -> Result<()> {
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                if !v.is_finite() {
                    return Err(Error::InvalidModel(format!("non-finite entry at ({i},{j})")));
                }
                if i != j && v < 0.0 {
                    return Err(Error::Monotonicity {
                        node: i,
                        reason: format!("negative off-diagonal {v:e} at column {j}"),
                    });
                }
            }
        }
        Ok(())
    }

    /// Returns `A + shift·I`.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                if self.col_idx[k] == i {
                    out.values[k] += shift;
                }
            }
        }
        out
    }

    pub fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = self.row(i).map(|(j, a)| a * v[j]).sum();
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] += v;
            }
        }
        d
    }

    /// Writes the matrix in Matrix Market coordinate format (1-based indices).
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.n, self.n, self.values.len())?;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                writeln!(w, "{} {} {:.17e}", i + 1, j + 1, v)?;
            }
        }
        Ok(())
    }
}

/// Matrix–vector product `A v`.
pub fn apply(op: &OperatorMatrix, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != op.n {
        return Err(Error::InvalidArgument(format!(
            "vector of length {} for a {}×{} operator",
            v.len(),
            op.n,
            op.n
        )));
    }
    let mut out = vec![0.0; op.n];
    op.apply_into(v, &mut out);
    Ok(out)
}

/// Local stencil of `L^u + c(·,u)` at one node: `(offsets, weight)` pairs
/// including the centre, before boundary neighbours are dropped.
#[derive(Debug, Clone, Default)]
pub(crate) struct Stencil {
    pub entries: Vec<([i64; MAX_DIM], f64)>,
}

/// Diffusion part `½ aⁱʲ ∂ᵢⱼ` at a node with diffusion matrix `a`.
pub(crate) fn diffusion_stencil(dim: usize, a: &[f64], h: f64, node: usize) -> Result<Stencil> {
    let h2 = h * h;
    let mut entries = Vec::with_capacity(9);
    match dim {
        1 => {
            let w = 0.5 * a[0] / h2;
            entries.push(([-1, 0], w));
            entries.push(([1, 0], w));
            entries.push(([0, 0], -2.0 * w));
        }
        _ => {
            let (a11, a22) = (a[0], a[3]);
            let a12 = 0.5 * (a[1] + a[2]);
            let slack = 1e-12 * a11.abs().max(a22.abs());
            if a12.abs() > a11.min(a22) + slack {
                return Err(Error::Monotonicity {
                    node,
                    reason: format!(
                        "mixed term |a12|={:e} exceeds min(a11, a22)={:e}",
                        a12.abs(),
                        a11.min(a22)
                    ),
                });
            }
            let m = a12.abs();
            let wx = 0.5 * (a11 - m) / h2;
            let wy = 0.5 * (a22 - m) / h2;
            let wd = 0.5 * m / h2;
            entries.push(([-1, 0], wx));
            entries.push(([1, 0], wx));
            entries.push(([0, -1], wy));
            entries.push(([0, 1], wy));
            if a12 >= 0.0 {
                entries.push(([1, 1], wd));
                entries.push(([-1, -1], wd));
            } else {
                entries.push(([1, -1], wd));
                entries.push(([-1, 1], wd));
            }
            entries.push(([0, 0], -(a11 + a22 - m) / h2));
        }
    }
    Ok(Stencil { entries })
}

/// Diffusion weight available along each axis to absorb a centred drift
/// difference: `aᵢᵢ − |a₁₂|` (the neighbour weight of the diffusion stencil,
/// times `2h²`).
pub(crate) fn drift_capacity(dim: usize, a: &[f64]) -> [f64; MAX_DIM] {
    match dim {
        1 => [a[0], 0.0],
        _ => {
            let m = (0.5 * (a[1] + a[2])).abs();
            [a[0] - m, a[3] - m]
        }
    }
}

/// Adds the first-order term `bⁱ ∂ᵢ`: centred where `|bⁱ| h ≤ capacity`
/// (the neighbour weights stay nonnegative), upwinded on the sign of `bⁱ`
/// otherwise.
pub(crate) fn add_drift(stencil: &mut Stencil, b: &[f64], h: f64, capacity: &[f64; MAX_DIM]) {
    for (axis, bi) in b.iter().enumerate() {
        let mut plus = [0i64; MAX_DIM];
        let mut minus = [0i64; MAX_DIM];
        plus[axis] = 1;
        minus[axis] = -1;
        if bi.abs() * h <= capacity[axis] {
            let w = 0.5 * bi / h;
            stencil.entries.push((plus, w));
            stencil.entries.push((minus, -w));
        } else {
            let w = bi.abs() / h;
            stencil.entries.push((if *bi >= 0.0 { plus } else { minus }, w));
            stencil.entries.push(([0, 0], -w));
        }
    }
}

/// Assembles the discretization of `L_v + c_v` for the stationary policy `v`.
pub fn assemble(model: &Model, grid: &Grid, policy: &Policy) -> Result<OperatorMatrix> {
    if model.dim != grid.dim {
        return Err(Error::InvalidArgument(format!(
            "model dimension {} does not match grid dimension {}",
            model.dim, grid.dim
        )));
    }
    policy.check(grid, model)?;
    let rows: Vec<Vec<(usize, f64)>> = (0..grid.len())
        .into_par_iter()
        .map(|i| assemble_row(model, grid, i, policy.actions[i]))
        .collect::<Result<_>>()?;
    let mut op = OperatorMatrix::from_rows(rows, grid.origin_index());
    op.grid = Some(*grid);
    op.policy = Some(policy.clone());
    op.check_m_structure().map_err(|e| match e {
        Error::Monotonicity { node, reason } => {
            Error::Invariant(format!("assembled row {node} lost M-structure: {reason}"))
        }
        other => other,
    })?;
    Ok(op)
}

pub(crate) fn node_stencil(model: &Model, grid: &Grid, i: usize, action: usize) -> Result<Stencil> {
    let d = grid.dim;
    let mut x = [0.0; MAX_DIM];
    let mut a = [0.0; MAX_DIM * MAX_DIM];
    let mut b = [0.0; MAX_DIM];
    grid.node(i, &mut x[..d]);
    model.diffusion_matrix(&x[..d], &mut a[..d * d]);
    model.drift_at(&x[..d], action, &mut b[..d]);
    let c = model.cost_at(&x[..d], action);
    if a[..d * d].iter().chain(&b[..d]).any(|v| !v.is_finite()) || !c.is_finite() {
        return Err(Error::InvalidModel(format!(
            "non-finite coefficient at node {i} (x={:?})",
            &x[..d]
        )));
    }
    let mut st = diffusion_stencil(d, &a[..d * d], grid.spacing, i)?;
    add_drift(&mut st, &b[..d], grid.spacing, &drift_capacity(d, &a[..d * d]));
    st.entries.push(([0, 0], c));
    Ok(st)
}

fn assemble_row(model: &Model, grid: &Grid, i: usize, action: usize) -> Result<Vec<(usize, f64)>> {
    let st = node_stencil(model, grid, i, action)?;
    Ok(st
        .entries
        .iter()
        .filter_map(|(off, w)| grid.shifted(i, *off).map(|j| (j, *w)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ActionSet, InlineModel};
    use std::sync::Arc;

    fn model_1d(b: f64, cost: fn(f64) -> f64) -> Model {
        Model::new(
            1,
            Arc::new(move |_x, _u, out| out[0] = b),
            Arc::new(|_x, out| out[0] = 1.0),
            Arc::new(move |x, _u| cost(x[0])),
            ActionSet::singleton(),
            "test",
        )
        .unwrap()
    }

    fn row_at(op: &OperatorMatrix, i: usize) -> Vec<(usize, f64)> {
        op.row(i).collect()
    }

    #[test]
    fn grid_examples() {
        let g = make_grid(1, 1.0, 0.5).unwrap();
        assert_eq!(g.nodes(), vec![-0.5, 0.0, 0.5]);
        assert_eq!(g.origin_index(), 1);
        assert_eq!(make_grid(2, 1.0, 0.5).unwrap().len(), 9);

        let g = make_grid(1, 1.0, 0.3).unwrap();
        let nodes = g.nodes();
        assert_eq!(nodes.len(), 7);
        let expect = [-0.9, -0.6, -0.3, 0.0, 0.3, 0.6, 0.9];
        for (a, b) in nodes.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(nodes[g.origin_index()], 0.0);
    }

    #[test]
    fn grid_exact_divisor_keeps_boundary_at_radius() {
        let g = make_grid(1, 1.0, 1e-3).unwrap();
        assert_eq!(g.len(), 1999);
        assert!((g.dirichlet_radius() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_errors() {
        assert!(matches!(make_grid(1, 1.0, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(make_grid(1, 0.5, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(make_grid(3, 1.0, 0.5), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            make_grid(2, 10.0, 1e-3),
            Err(Error::Resource { cap: DEFAULT_NODE_CAP, .. })
        ));
    }

    #[test]
    fn origin_is_unique_minimizer_2d() {
        let g = make_grid(2, 1.0, 0.3).unwrap();
        let mut x = [0.0; 2];
        g.node(g.origin_index(), &mut x);
        assert_eq!(x, [0.0, 0.0]);
    }

    #[test]
    fn laplacian_row() {
        let m = model_1d(0.0, |_| 0.0);
        let g = make_grid(1, 1.0, 0.1).unwrap();
        let op = assemble(&m, &g, &Policy::constant(g.len(), 0)).unwrap();
        let row = row_at(&op, 5);
        let vals: Vec<f64> = row.iter().map(|e| e.1).collect();
        assert_eq!(row.iter().map(|e| e.0).collect::<Vec<_>>(), vec![4, 5, 6]);
        for (v, e) in vals.iter().zip([50.0, -100.0, 50.0]) {
            assert!((v - e).abs() < 1e-9, "{vals:?}");
        }
    }

    #[test]
    fn drift_rows_centred_then_upwind() {
        let g = make_grid(1, 1.0, 0.1).unwrap();
        for (b, expect) in [(2.0, [40.0, -100.0, 60.0]), (20.0, [50.0, -300.0, 250.0])] {
            let m = model_1d(b, |_| 0.0);
            let op = assemble(&m, &g, &Policy::constant(g.len(), 0)).unwrap();
            let vals: Vec<f64> = op.row(5).map(|e| e.1).collect();
            for (v, e) in vals.iter().zip(expect) {
                assert!((v - e).abs() < 1e-9, "b={b}: {vals:?}");
            }
        }
    }

    #[test]
    fn cost_enters_diagonal() {
        let m0 = model_1d(0.0, |_| 0.0);
        let m1 = model_1d(0.0, |x| x * x);
        let g = make_grid(1, 1.0, 0.1).unwrap();
        let p = Policy::constant(g.len(), 0);
        let (a0, a1) = (assemble(&m0, &g, &p).unwrap(), assemble(&m1, &g, &p).unwrap());
        let i = g.index_of([5, 0]).unwrap();
        let d = a1.diagonal()[i] - a0.diagonal()[i];
        assert!((d - 0.25).abs() < 1e-12);
    }

    #[test]
    fn boundary_rows_drop_outside_neighbours() {
        let m = model_1d(0.0, |_| 0.0);
        let g = make_grid(1, 1.0, 0.5).unwrap();
        let op = assemble(&m, &g, &Policy::constant(3, 0)).unwrap();
        assert_eq!(row_at(&op, 0).len(), 2);
        assert_eq!(row_at(&op, 2).len(), 2);
        let ones = apply(&op, &[1.0; 3]).unwrap();
        assert!(ones[1].abs() < 1e-12);
        assert!(ones[0] < 0.0 && ones[2] < 0.0);
    }

    #[test]
    fn apply_small_cases() {
        let a = OperatorMatrix::from_triplets(1, &[(0, 0, -1.0)], 0).unwrap();
        assert_eq!(apply(&a, &[2.0]).unwrap(), vec![-2.0]);
        assert!(apply(&a, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mixed_term_dominance_enforced() {
        let ok: InlineModel = serde_json::from_str(
            r#"{"dim":2,"drift":{"family":"zero"},"cost":{"family":"zero"},
                "sigma":[[1.0,0.0],[0.5,0.8660254037844386]]}"#,
        )
        .unwrap();
        let g = make_grid(2, 1.0, 0.25).unwrap();
        let p = Policy::constant(g.len(), 0);
        let op = assemble(&ok.build().unwrap(), &g, &p).unwrap();
        op.check_m_structure().unwrap();
        // interior row sums to zero with c = 0
        let ones = apply(&op, &vec![1.0; g.len()]).unwrap();
        assert!(ones[g.origin_index()].abs() < 1e-9);

        let bad: InlineModel = serde_json::from_str(
            r#"{"dim":2,"drift":{"family":"zero"},"cost":{"family":"zero"},
                "sigma":[[1.0,0.0],[3.0,0.5]]}"#,
        )
        .unwrap();
        assert!(matches!(
            assemble(&bad.build().unwrap(), &g, &p),
            Err(Error::Monotonicity { .. })
        ));
    }

    #[test]
    fn nan_coefficient_is_invalid_model() {
        let m = model_1d(f64::NAN, |_| 0.0);
        let g = make_grid(1, 1.0, 0.5).unwrap();
        assert!(matches!(
            assemble(&m, &g, &Policy::constant(3, 0)),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn policy_shape_checked() {
        let m = model_1d(0.0, |_| 0.0);
        let g = make_grid(1, 1.0, 0.5).unwrap();
        assert!(assemble(&m, &g, &Policy::constant(2, 0)).is_err());
        assert!(assemble(&m, &g, &Policy::constant(3, 1)).is_err());
    }

    #[test]
    fn matrix_market_header() {
        let a = OperatorMatrix::from_triplets(2, &[(0, 0, -1.0), (0, 1, 0.5), (1, 1, -2.0)], 0)
            .unwrap();
        let mut buf = Vec::new();
        a.write_matrix_market(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "%%MatrixMarket matrix coordinate real general");
        assert_eq!(lines.next().unwrap(), "2 2 3");
        assert!(lines.next().unwrap().starts_with("1 1 -1.0"));
        assert!(lines.next().unwrap().starts_with("1 2 5.0"));
    }

    #[test]
    fn interpolation_is_exact_for_linear_fields() {
        let g = make_grid(2, 1.0, 0.25).unwrap();
        let field: Vec<f64> = g.nodes().chunks(2).map(|x| 2.0 * x[0] - x[1] + 0.5).collect();
        let v = g.interpolate(&field, &[0.13, -0.41], Extension::Zero);
        assert!((v - (0.26 + 0.41 + 0.5)).abs() < 1e-12);
        // clamped outside
        let v = g.interpolate(&field, &[5.0, 0.0], Extension::Clamp);
        assert!((v - (1.5 + 0.5)).abs() < 1e-12);
    }
}

//! Fixtures shared by the benchmarks.

use riskeig_core::{builtin, make_grid, Grid, Model, Policy};

/// The quadratic OU model on a 1-D box of the given radius and spacing, with
/// the trivial policy.
pub fn ou_fixture(radius: f64, spacing: f64) -> (Model, Grid, Policy) {
    let model = builtin("ou_quadratic").expect("builtin model");
    let grid = make_grid(1, radius, spacing).expect("valid grid");
    let policy = Policy::constant(grid.len(), 0);
    (model, grid, policy)
}

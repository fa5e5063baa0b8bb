//! Radius continuation: Dirichlet eigenvalues on growing boxes, saturation
//! detection and a geometric-tail estimate of the limit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discretize::{make_grid, DEFAULT_NODE_CAP};
use crate::eigensolve::{solve_hjb_dirichlet, HjbOptions, HjbSolution};
use crate::error::{Error, Result};
use crate::model::{check_drift_assumption, DriftAssumptionReport, Model};

pub const DEFAULT_SATURATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub radius: f64,
    pub spacing: f64,
    pub lambda: f64,
    pub residual: f64,
    pub policy_sweeps: usize,
}

/// Which limit the sweep approximates. The Dirichlet limit coincides with the
/// optimal risk-sensitive value when the bounded-drift hypothesis holds; in
/// general it is only known to be a lower bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    OptimalValue,
    DirichletLimit,
}

impl Regime {
    pub fn label(&self) -> &'static str {
        match self {
            Regime::OptimalValue => "Lambda*",
            Regime::DirichletLimit => "Dirichlet limit lambda*",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub lambda_star_estimate: f64,
    /// `λ(r_last) − λ(r_prev)`; `+∞` with a single radius.
    pub saturation_gap: f64,
    pub converged: bool,
    /// The last three eigenvalues do not increase.
    pub tail_non_monotone: bool,
    pub regime: Regime,
    pub regime_label: String,
    pub assumption: DriftAssumptionReport,
    /// Solution at the largest radius.
    #[serde(skip)]
    pub last: Option<HjbSolution>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub hjb: HjbOptions,
    /// Sweep counts as saturated when the last gap is below this.
    pub saturation_tol: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self {
            hjb: HjbOptions::default(),
            saturation_tol: DEFAULT_SATURATION_TOL,
        }
    }
}

/// Geometric fit `λ(r) ≈ Λ − C qʳ` through three consecutive values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub value: f64,
    /// Fitted ratio, when it lies in `(0, 1)`.
    pub ratio: Option<f64>,
    pub non_monotone: bool,
}

pub fn fit_geometric_tail(l1: f64, l2: f64, l3: f64) -> TailFit {
    let non_monotone = l3 < l2 || l2 < l1;
    let (d1, d2) = (l2 - l1, l3 - l2);
    let q = d2 / d1;
    if d1 != 0.0 && q > 0.0 && q < 1.0 {
        let fit = l3 + d2 * q / (1.0 - q);
        TailFit {
            value: fit.max(l3),
            ratio: Some(q),
            non_monotone,
        }
    } else {
        TailFit {
            value: l3,
            ratio: None,
            non_monotone,
        }
    }
}

/// Extrapolated limit of the sweep from its last three rows; the last
/// eigenvalue when fewer rows exist or the fit is not geometric.
pub fn estimate_lambda_star(sweep: &SweepResult) -> f64 {
    tail_of(&sweep.rows).value
}

fn tail_of(rows: &[SweepRow]) -> TailFit {
    match rows {
        [] => TailFit {
            value: f64::NAN,
            ratio: None,
            non_monotone: false,
        },
        [.., a, b, c] => fit_geometric_tail(a.lambda, b.lambda, c.lambda),
        [.., last] => TailFit {
            value: last.lambda,
            ratio: None,
            non_monotone: rows.len() == 2 && rows[1].lambda < rows[0].lambda,
        },
    }
}

/// Solves the Dirichlet problem on each radius (in parallel) and summarizes
/// the saturation of `λ̂_r`.
pub fn sweep(model: &Model, radii: &[f64], spacing: f64, opts: &SweepOptions) -> Result<SweepResult> {
    if radii.is_empty() {
        return Err(Error::InvalidArgument("empty radius schedule".into()));
    }
    if radii.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument(format!(
            "radii must be strictly increasing, got {radii:?}"
        )));
    }
    if radii.iter().any(|r| !(*r > spacing)) || !(spacing > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "every radius must exceed the spacing {spacing}"
        )));
    }
    let grids = radii
        .iter()
        .map(|r| make_grid(model.dim, *r, spacing))
        .collect::<Result<Vec<_>>>()?;
    let outcomes: Vec<Result<HjbSolution>> = grids
        .par_iter()
        .map(|g| solve_hjb_dirichlet(model, g, &opts.hjb))
        .collect();

    let mut rows = Vec::with_capacity(radii.len());
    let mut last = None;
    let mut failure = None;
    for (r, out) in radii.iter().zip(outcomes) {
        match out {
            Ok(sol) => {
                rows.push(SweepRow {
                    radius: *r,
                    spacing,
                    lambda: sol.eigenpair.lambda,
                    residual: sol.eigenpair.residual,
                    policy_sweeps: sol.policy_sweeps,
                });
                last = Some(sol);
            }
            Err(e) if failure.is_none() => failure = Some((*r, e)),
            Err(_) => {}
        }
    }
    if let Some((radius, e)) = failure {
        return Err(Error::Sweep {
            radius,
            source: Box::new(e),
            partial: rows,
        });
    }

    let n = rows.len();
    let saturation_gap = if n >= 2 {
        rows[n - 1].lambda - rows[n - 2].lambda
    } else {
        f64::INFINITY
    };
    let tail = tail_of(&rows);
    let assumption = check_drift_assumption(model, radii[radii.len() - 1], spacing.max(radii[0] / 50.0))?;
    let regime = if assumption.holds() {
        Regime::OptimalValue
    } else {
        Regime::DirichletLimit
    };
    Ok(SweepResult {
        lambda_star_estimate: tail.value,
        converged: saturation_gap.abs() < opts.saturation_tol,
        tail_non_monotone: tail.non_monotone,
        saturation_gap,
        regime,
        regime_label: regime.label().to_string(),
        assumption,
        rows,
        last,
    })
}

/// Default schedule: doubling from `start` until the saturation gap falls
/// below the tolerance. `max_radius` and the node cap bound the schedule.
pub fn sweep_doubling(
    model: &Model,
    start: f64,
    spacing: f64,
    max_radius: f64,
    opts: &SweepOptions,
) -> Result<SweepResult> {
    let mut radii = vec![start];
    let mut result = sweep(model, &radii, spacing, opts)?;
    loop {
        let next = radii[radii.len() - 1] * 2.0;
        if result.converged || next > max_radius {
            return Ok(result);
        }
        match make_grid(model.dim, next, spacing) {
            Err(Error::Resource { .. }) => return Ok(result),
            Err(e) => return Err(e),
            Ok(g) if g.len() > DEFAULT_NODE_CAP => return Ok(result),
            Ok(_) => {}
        }
        radii.push(next);
        result = sweep(model, &radii, spacing, opts)?;
    }
}

/// Dirichlet eigenvalue at `radius` on spacings `h` and `h/2`.
pub fn refinement_pair(model: &Model, radius: f64, spacing: f64, opts: &HjbOptions) -> Result<(f64, f64)> {
    let coarse = solve_hjb_dirichlet(model, &make_grid(model.dim, radius, spacing)?, opts)?;
    let fine = solve_hjb_dirichlet(model, &make_grid(model.dim, radius, 0.5 * spacing)?, opts)?;
    Ok((coarse.eigenpair.lambda, fine.eigenpair.lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin, InlineModel};

    fn rows(ls: &[f64]) -> SweepResult {
        SweepResult {
            rows: ls
                .iter()
                .enumerate()
                .map(|(i, l)| SweepRow {
                    radius: i as f64 + 1.0,
                    spacing: 0.1,
                    lambda: *l,
                    residual: 0.0,
                    policy_sweeps: 1,
                })
                .collect(),
            lambda_star_estimate: f64::NAN,
            saturation_gap: f64::NAN,
            converged: false,
            tail_non_monotone: false,
            regime: Regime::DirichletLimit,
            regime_label: String::new(),
            assumption: DriftAssumptionReport {
                bounded_coeffs: false,
                sup_drift: 0.0,
                sup_sigma: 0.0,
                radial_drift_decay: vec![],
            },
            last: None,
        }
    }

    #[test]
    fn geometric_tail_closed_form() {
        let est = estimate_lambda_star(&rows(&[0.2, 0.24, 0.248]));
        assert!((est - 0.25).abs() < 1e-12, "{est}");
        let fit = fit_geometric_tail(0.2, 0.24, 0.248);
        assert!((fit.ratio.unwrap() - 0.2).abs() < 1e-12);
    }

    #[test]
    fn saturated_tail() {
        assert_eq!(estimate_lambda_star(&rows(&[0.1, 0.1, 0.1])), 0.1);
    }

    #[test]
    fn non_monotone_tail_falls_back() {
        let fit = fit_geometric_tail(0.2, 0.25, 0.24);
        assert_eq!(fit.value, 0.24);
        assert!(fit.non_monotone);
        assert!(fit.ratio.is_none());
    }

    #[test]
    fn single_radius_cannot_saturate() {
        let m = builtin("ou_quadratic").unwrap();
        let s = sweep(&m, &[2.0], 0.05, &SweepOptions::default()).unwrap();
        assert_eq!(s.saturation_gap, f64::INFINITY);
        assert!(!s.converged);
        assert_eq!(s.lambda_star_estimate, s.rows[0].lambda);
    }

    #[test]
    fn schedule_validation() {
        let m = builtin("ou_quadratic").unwrap();
        let o = SweepOptions::default();
        assert!(sweep(&m, &[2.0, 2.0], 0.1, &o).is_err());
        assert!(sweep(&m, &[0.05, 1.0], 0.1, &o).is_err());
        assert!(sweep(&m, &[], 0.1, &o).is_err());
    }

    #[test]
    fn brownian_dirichlet_schedule() {
        let m: InlineModel = serde_json::from_str(
            r#"{"dim":1,"drift":{"family":"zero"},"cost":{"family":"zero"}}"#,
        )
        .unwrap();
        let s = sweep(&m.build().unwrap(), &[1.0, 2.0, 4.0], 0.01, &SweepOptions::default()).unwrap();
        let pi2 = std::f64::consts::PI.powi(2);
        for (row, r) in s.rows.iter().zip([1.0f64, 2.0, 4.0]) {
            let exact = -pi2 / (8.0 * r * r);
            assert!((row.lambda - exact).abs() < 1e-4 * exact.abs().max(1.0), "{row:?}");
        }
        assert!(s.rows.windows(2).all(|w| w[1].lambda > w[0].lambda));
        assert!(s.lambda_star_estimate.abs() < 1e-3);
        assert_eq!(s.regime, Regime::OptimalValue);
    }

    #[test]
    fn regime_follows_drift_assumption() {
        let s = sweep(&builtin("ou_quadratic").unwrap(), &[2.0, 3.0], 0.05, &SweepOptions::default()).unwrap();
        assert_eq!(s.regime, Regime::DirichletLimit);
        let s = sweep(&builtin("bounded_nm").unwrap(), &[2.0, 3.0], 0.05, &SweepOptions::default()).unwrap();
        assert_eq!(s.regime, Regime::OptimalValue);
    }
}

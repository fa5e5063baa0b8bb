//! Ground-state transform `ψ = log Ψ`, the twisted drift `b + a∇ψ`,
//! Foster–Lyapunov certificates for the twisted diffusion and the ergodic
//! decomposition `½μ(G) + μ(f) = Λ`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::discretize::{assemble, Extension, Grid, Policy};
use crate::eigensolve::{apply_policy_operator, principal_eigenpair, EigenOptions, EigenPair};
use crate::error::{Error, Result};
use crate::model::{BoxRegion, Model, MAX_DIM};
use crate::montecarlo::{occupation_averages, ControlLaw, Controlled, ProbeReport, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    RecurrentCertified,
    GeometricCertified,
    TransientSuspected,
    Inconclusive,
}

/// `ψ` and its gradient on a grid. Gradients are component-major: one nodal
/// vector per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundState {
    pub grid: Grid,
    pub psi: Vec<f64>,
    pub grad_psi: Vec<Vec<f64>>,
    pub twisted_drift: Vec<Vec<f64>>,
    pub classification: Classification,
}

impl GroundState {
    pub fn new(model: &Model, grid: &Grid, eigenpair: &EigenPair, policy: &Policy) -> Result<Self> {
        let (psi, grad_psi) = log_transform(eigenpair, grid)?;
        let twisted_drift = twisted_drift(model, grid, policy, &grad_psi)?;
        Ok(Self {
            grid: *grid,
            psi,
            grad_psi,
            twisted_drift,
            classification: Classification::Inconclusive,
        })
    }

    /// `G = ⟨∇ψ, a∇ψ⟩` at every node.
    pub fn carre_du_champ(&self, model: &Model) -> Vec<f64> {
        let d = self.grid.dim;
        let mut x = [0.0; MAX_DIM];
        let mut a = [0.0; MAX_DIM * MAX_DIM];
        (0..self.grid.len())
            .map(|i| {
                self.grid.node(i, &mut x[..d]);
                model.diffusion_matrix(&x[..d], &mut a[..d * d]);
                let mut g = 0.0;
                for r in 0..d {
                    for c in 0..d {
                        g += self.grad_psi[r][i] * a[r * d + c] * self.grad_psi[c][i];
                    }
                }
                g
            })
            .collect()
    }
}

/// `ψ = ln v` and `∇ψ`: central differences where both neighbours are
/// interior, second-order one-sided differences (first-order when the grid
/// is too thin) next to the boundary.
pub fn log_transform(eigenpair: &EigenPair, grid: &Grid) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let v = &eigenpair.v;
    if v.len() != grid.len() {
        return Err(Error::InvalidArgument("eigenvector does not match grid".into()));
    }
    if v.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::Invariant("eigenvector is not strictly positive".into()));
    }
    let psi: Vec<f64> = v.iter().map(|x| x.ln()).collect();
    Ok((psi.clone(), gradient(grid, &psi)))
}

/// Finite-difference gradient of a nodal field.
pub fn gradient(grid: &Grid, field: &[f64]) -> Vec<Vec<f64>> {
    let h = grid.spacing;
    (0..grid.dim)
        .map(|axis| {
            let step = |k: i64| {
                let mut s = [0i64; MAX_DIM];
                s[axis] = k;
                s
            };
            (0..grid.len())
                .map(|i| {
                    let at = |k: i64| grid.shifted(i, step(k)).map(|j| field[j]);
                    match (at(-1), at(1)) {
                        (Some(m), Some(p)) => (p - m) / (2.0 * h),
                        (Some(m), None) => match at(-2) {
                            Some(mm) => (3.0 * field[i] - 4.0 * m + mm) / (2.0 * h),
                            None => (field[i] - m) / h,
                        },
                        (None, Some(p)) => match at(2) {
                            Some(pp) => (-3.0 * field[i] + 4.0 * p - pp) / (2.0 * h),
                            None => (p - field[i]) / h,
                        },
                        (None, None) => 0.0,
                    }
                })
                .collect()
        })
        .collect()
}

/// Nodewise `b(x, v(x)) + a(x)∇ψ(x)`.
pub fn twisted_drift(model: &Model, grid: &Grid, policy: &Policy, grad_psi: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = grid.dim;
    if grad_psi.len() != d || grad_psi.iter().any(|g| g.len() != grid.len()) {
        return Err(Error::InvalidArgument("gradient field does not match grid".into()));
    }
    policy.check(grid, model)?;
    let mut out = vec![vec![0.0; grid.len()]; d];
    let mut x = [0.0; MAX_DIM];
    let mut a = [0.0; MAX_DIM * MAX_DIM];
    let mut b = [0.0; MAX_DIM];
    for i in 0..grid.len() {
        grid.node(i, &mut x[..d]);
        model.drift_at(&x[..d], policy.actions[i], &mut b[..d]);
        model.diffusion_matrix(&x[..d], &mut a[..d * d]);
        for r in 0..d {
            let ag: f64 = (0..d).map(|c| a[r * d + c] * grad_psi[c][i]).sum();
            out[r][i] = b[r] + ag;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Foster–Lyapunov certificate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub classification: Classification,
    pub gamma: f64,
    pub r_cut: f64,
    /// Eigenvalue of the auxiliary problem with potential `f − γ·1_{B_rcut}`.
    pub lambda_aux: f64,
    /// `λ − λ̃`.
    pub delta_hat: f64,
    /// Threshold `δ̂` had to clear.
    pub noise_floor: f64,
    /// Nodes outside `B_rcut` where the drift inequality was checked.
    pub nodes_checked: usize,
    /// Largest `(L*Ṽ)/Ṽ + δ̂/2` over the checked nodes; the inequality holds
    /// when this is `≤ 0`.
    pub worst_margin: f64,
    /// The Lyapunov function `Ṽ = Ψ̃/Ψ` at every node.
    #[serde(skip)]
    pub lyapunov: Vec<f64>,
}

/// Floor under the saturation-gap noise level for `δ̂`.
pub const DELTA_FLOOR: f64 = 1e-8;

/// Tries to certify geometric ergodicity of the twisted diffusion.
///
/// Solves the principal eigenproblem for the same policy with the potential
/// lowered by `γ` on `B_rcut`. A strict drop `δ̂` above the noise floor
/// `max(3·saturation_gap, 1e-8)` yields `Ṽ = Ψ̃/Ψ`, and the discrete drift
/// inequality `L*Ṽ ≤ (γ1_{B_rcut} − δ̂/2)Ṽ` is then checked node by node
/// outside `B_rcut`. The certificate never claims transience.
#[allow(clippy::too_many_arguments)]
pub fn ergodicity_certificate(
    model: &Model,
    grid: &Grid,
    policy: &Policy,
    eigenpair: &EigenPair,
    gamma: f64,
    r_cut: f64,
    saturation_gap: f64,
    opts: &EigenOptions,
) -> Result<Certificate> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    if !(r_cut > 0.0) || r_cut >= grid.dirichlet_radius() {
        return Err(Error::InvalidArgument(format!(
            "r_cut must lie in (0, {}), got {r_cut}",
            grid.dirichlet_radius()
        )));
    }
    let lambda = eigenpair.lambda;
    let ball = BoxRegion::centered(grid.dim, r_cut)?;
    let aux_model = model.with_cost_bump(ball.clone(), -gamma);
    let aux = principal_eigenpair(&assemble(&aux_model, grid, policy)?, opts.tol, opts.max_iter)?;
    let delta_hat = lambda - aux.lambda;
    let gap = if saturation_gap.is_finite() {
        saturation_gap.abs()
    } else {
        f64::INFINITY
    };
    let noise_floor = (3.0 * gap).max(DELTA_FLOOR);

    let lyapunov: Vec<f64> = aux.v.iter().zip(&eigenpair.v).map(|(a, b)| a / b).collect();
    let mut out = Certificate {
        classification: Classification::Inconclusive,
        gamma,
        r_cut,
        lambda_aux: aux.lambda,
        delta_hat,
        noise_floor,
        nodes_checked: 0,
        worst_margin: f64::NAN,
        lyapunov,
    };
    if !(delta_hat > noise_floor) {
        return Ok(out);
    }

    // L*Ṽ = Ψ⁻¹ (L + f − λ)(ΨṼ) = Ψ⁻¹ (L + f − λ) Ψ̃
    let l_aux = apply_policy_operator(model, grid, policy, &aux.v)?;
    let d = grid.dim;
    let mut x = [0.0; MAX_DIM];
    let mut worst = f64::NEG_INFINITY;
    let mut checked = 0;
    for (i, (la, va)) in l_aux.iter().zip(&aux.v).enumerate() {
        grid.node(i, &mut x[..d]);
        if ball.contains(&x[..d]) {
            continue;
        }
        // ratio (L*Ṽ)/Ṽ = ((L + f)Ψ̃ − λΨ̃)/Ψ̃
        let ratio = la / va - lambda;
        worst = worst.max(ratio + 0.5 * delta_hat);
        checked += 1;
    }
    out.nodes_checked = checked;
    out.worst_margin = worst;
    if checked > 0 && worst <= 0.0 {
        out.classification = Classification::GeometricCertified;
    }
    Ok(out)
}

/// Combines a certificate with the strict-monotonicity probe. A strict
/// probe certifies recurrence; a flat one only suggests transience.
pub fn classify(certificate: &Certificate, probe: Option<&ProbeReport>) -> Classification {
    match (certificate.classification, probe) {
        (Classification::GeometricCertified, _) => Classification::GeometricCertified,
        (_, Some(p)) if p.strict => Classification::RecurrentCertified,
        (_, Some(_)) => Classification::TransientSuspected,
        _ => Classification::Inconclusive,
    }
}

// ---------------------------------------------------------------------------
// Ergodic identity
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub mu_f: f64,
    pub half_mu_g: f64,
    pub sum: f64,
    pub lambda: f64,
    pub abs_gap: f64,
    /// Standard error of `sum` (the two averages are correlated along each
    /// path, so this is computed from the per-path sums).
    pub stderr: f64,
    pub truncated_fraction: f64,
    pub caveat: String,
}

/// Estimates `½μ(G) + μ(f)` from long-run occupation of the controlled
/// (untwisted) diffusion and compares it with `λ`. Paths are killed on
/// leaving the grid window.
pub fn ergodic_identity(
    model: &Model,
    state: &GroundState,
    policy: &Policy,
    lambda: f64,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<IdentityReport> {
    let grid = &state.grid;
    let g_field = state.carre_du_champ(model);
    let law = ControlLaw::for_policy(model, grid, policy);
    let dynamics = Controlled::new(model, law);
    let f = |x: &[f64]| model.cost_at(x, law.action(x));
    let half_g = |x: &[f64]| 0.5 * grid.interpolate(&g_field, x, Extension::Clamp);
    let mut cfg = *cfg;
    cfg.kill_radius = cfg.kill_radius.min(grid.dirichlet_radius());
    let avg = occupation_averages(&dynamics, &[&f, &half_g], x0, &cfg)?;
    if avg.truncated_fraction > 0.0 {
        log::warn!(
            "ergodic_identity: {:.3}% of paths left the grid window",
            100.0 * avg.truncated_fraction
        );
    }
    let sum = avg.means[0] + avg.means[1];
    Ok(IdentityReport {
        mu_f: avg.means[0],
        half_mu_g: avg.means[1],
        sum,
        lambda,
        abs_gap: (sum - lambda).abs(),
        stderr: avg.sum_stderr,
        truncated_fraction: avg.truncated_fraction,
        caveat: "assumes the controlled diffusion is positive recurrent".into(),
    })
}

// ---------------------------------------------------------------------------
// Export
// ---------------------------------------------------------------------------

/// Writes node coordinates followed by the named nodal columns.
pub fn write_field_csv<W: Write>(mut w: W, grid: &Grid, columns: &[(&str, &[f64])]) -> Result<()> {
    for (name, col) in columns {
        if col.len() != grid.len() {
            return Err(Error::InvalidArgument(format!("column {name} does not match grid")));
        }
    }
    let io = |e: std::io::Error| Error::InvalidArgument(format!("csv write failed: {e}"));
    let mut header: Vec<String> = (1..=grid.dim).map(|i| format!("x{i}")).collect();
    header.extend(columns.iter().map(|(n, _)| n.to_string()));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    let mut x = [0.0; MAX_DIM];
    for i in 0..grid.len() {
        grid.node(i, &mut x[..grid.dim]);
        let mut cells: Vec<String> = x[..grid.dim].iter().map(|v| format!("{v:.17e}")).collect();
        cells.extend(columns.iter().map(|(_, c)| format!("{:.17e}", c[i])));
        writeln!(w, "{}", cells.join(",")).map_err(io)?;
    }
    Ok(())
}

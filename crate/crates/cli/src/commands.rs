use riskeig_core::continuation::{sweep, SweepResult};
use riskeig_core::discretize::make_grid;
use riskeig_core::eigensolve::{hjb_residual, solve_hjb_dirichlet, HjbSolution};
use riskeig_core::groundstate::{classify, ergodicity_certificate, write_field_csv, Certificate, Classification};
use riskeig_core::model::{check_near_monotone, NearMonotoneReport};
use riskeig_core::montecarlo::{monotonicity_probe, Bump, ProbeReport};
use riskeig_core::{BoxRegion, GroundState};
use serde::Serialize;

use crate::config::Plan;
use crate::output::OutDir;
use crate::CliError;

/// What a subcommand hands back to `main`: the report and whether every
/// check passed.
pub struct Outcome {
    pub result: serde_json::Value,
    pub failed_checks: usize,
    pub total_checks: usize,
}

impl Outcome {
    fn report<T: Serialize>(value: &T) -> Result<Self, CliError> {
        Ok(Self {
            result: to_value(value)?,
            failed_checks: 0,
            total_checks: 0,
        })
    }
}

pub fn to_value<T: Serialize>(value: &T) -> Result<serde_json::Value, CliError> {
    serde_json::to_value(value).map_err(|e| CliError::Infra(format!("serializing report: {e}")))
}

#[derive(Serialize)]
struct SolveReport<'a> {
    command: &'static str,
    model: &'a str,
    lambda: f64,
    lower_bound: f64,
    upper_bound: f64,
    residual: f64,
    hjb_residual: f64,
    iterations: usize,
    policy_sweeps: usize,
    lambda_history: &'a [f64],
    grid: riskeig_core::eigensolve::GridRecord,
    nodes: usize,
    v: &'a [f64],
    policy: &'a [usize],
}

pub fn solve(plan: &Plan, out: &OutDir) -> Result<Outcome, CliError> {
    let r = plan.radii[plan.radii.len() - 1];
    let grid = make_grid(plan.model.dim, r, plan.spacing)?;
    let sol = solve_hjb_dirichlet(&plan.model, &grid, &plan.sweep.hjb)?;
    let ep = &sol.eigenpair;
    let res = hjb_residual(&plan.model, &grid, &ep.v, ep.lambda)?;
    write_solution_fields(plan, out, &sol, "solution.csv")?;
    Outcome::report(&SolveReport {
        command: "solve",
        model: &plan.model.label,
        lambda: ep.lambda,
        lower_bound: ep.lower_bound,
        upper_bound: ep.upper_bound,
        residual: ep.residual,
        hjb_residual: res,
        iterations: ep.iterations,
        policy_sweeps: sol.policy_sweeps,
        lambda_history: &sol.lambda_history,
        grid: (&grid).into(),
        nodes: grid.len(),
        v: &ep.v,
        policy: &sol.policy.actions,
    })
}

fn write_solution_fields(plan: &Plan, out: &OutDir, sol: &HjbSolution, name: &str) -> Result<(), CliError> {
    let v = &sol.eigenpair.v;
    let psi: Vec<f64> = v.iter().map(|x| x.ln()).collect();
    let control: Vec<f64> = sol
        .policy
        .actions
        .iter()
        .map(|k| plan.model.actions.get(*k)[0])
        .collect();
    write_field_csv(
        out.writer(&format!("fields/{name}"))?,
        &sol.grid,
        &[("v", v), ("psi", &psi), ("u1", &control)],
    )?;
    Ok(())
}

#[derive(Serialize)]
struct SweepReport<'a> {
    command: &'static str,
    model: &'a str,
    #[serde(flatten)]
    sweep: &'a SweepResult,
    monotone: bool,
    near_monotone: Option<NearMonotoneReport>,
}

/// Near-monotonicity of the cost relative to the sweep estimate, scanned on
/// the largest box.
fn near_monotone(plan: &Plan, lambda: f64) -> Option<NearMonotoneReport> {
    let r = plan.radii[plan.radii.len() - 1];
    let step = (r / 200.0).max(plan.spacing);
    check_near_monotone(&plan.model, lambda, 0.1, r, step).ok()
}

pub fn run_sweep(plan: &Plan) -> Result<SweepResult, CliError> {
    Ok(sweep(&plan.model, &plan.radii, plan.spacing, &plan.sweep)?)
}

pub fn sweep_cmd(plan: &Plan, out: &OutDir) -> Result<Outcome, CliError> {
    let s = run_sweep(plan)?;
    out.write_csv("sweep.csv", &s.rows)?;
    if let Some(sol) = &s.last {
        write_solution_fields(plan, out, sol, "solution.csv")?;
    }
    let monotone = s.rows.windows(2).all(|w| w[1].lambda >= w[0].lambda);
    Outcome::report(&SweepReport {
        command: "sweep",
        model: &plan.model.label,
        near_monotone: near_monotone(plan, s.lambda_star_estimate),
        sweep: &s,
        monotone,
    })
}

#[derive(Serialize)]
struct CertifyReport<'a> {
    command: &'static str,
    model: &'a str,
    lambda: f64,
    lambda_star_estimate: f64,
    saturation_gap: f64,
    classification: Classification,
    certificate: &'a Certificate,
    probe: Option<&'a ProbeReport>,
}

pub fn bump_probe(plan: &Plan) -> Result<ProbeReport, CliError> {
    let p = &plan.config.probes;
    let bump = Bump {
        region: BoxRegion::centered(plan.model.dim, p.bump_half_width)?,
        epsilon: p.bump_epsilon,
    };
    Ok(monotonicity_probe(&plan.model, &bump, &plan.radii, plan.spacing, &plan.sweep)?)
}

pub fn certify(plan: &Plan, out: &OutDir) -> Result<Outcome, CliError> {
    let s = run_sweep(plan)?;
    let sol = s.last.as_ref().expect("sweep keeps its last solution");
    let p = &plan.config.probes;
    let cert = ergodicity_certificate(
        &plan.model,
        &sol.grid,
        &sol.policy,
        &sol.eigenpair,
        p.certificate_gamma,
        p.r_cut,
        s.saturation_gap,
        &plan.sweep.hjb.eigen,
    )?;
    let probe = if cert.classification == Classification::GeometricCertified {
        None
    } else {
        Some(bump_probe(plan)?)
    };
    let mut gs = GroundState::new(&plan.model, &sol.grid, &sol.eigenpair, &sol.policy)?;
    gs.classification = classify(&cert, probe.as_ref());
    write_ground_state(out, &gs, &sol.eigenpair.v, &cert.lyapunov)?;
    out.write_csv("sweep.csv", &s.rows)?;
    Outcome::report(&CertifyReport {
        command: "certify",
        model: &plan.model.label,
        lambda: sol.eigenpair.lambda,
        lambda_star_estimate: s.lambda_star_estimate,
        saturation_gap: s.saturation_gap,
        classification: gs.classification,
        certificate: &cert,
        probe: probe.as_ref(),
    })
}

fn write_ground_state(out: &OutDir, gs: &GroundState, v: &[f64], lyapunov: &[f64]) -> Result<(), CliError> {
    let grad_names: Vec<String> = (1..=gs.grid.dim).map(|i| format!("grad_psi{i}")).collect();
    let drift_names: Vec<String> = (1..=gs.grid.dim).map(|i| format!("twisted_drift{i}")).collect();
    let mut cols: Vec<(&str, &[f64])> = vec![("v", v), ("psi", &gs.psi)];
    for (n, c) in grad_names.iter().zip(&gs.grad_psi) {
        cols.push((n, c));
    }
    for (n, c) in drift_names.iter().zip(&gs.twisted_drift) {
        cols.push((n, c));
    }
    cols.push(("lyapunov", lyapunov));
    write_field_csv(out.writer("fields/ground_state.csv")?, &gs.grid, &cols)?;
    Ok(())
}

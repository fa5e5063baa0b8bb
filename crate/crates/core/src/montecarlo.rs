//! Euler–Maruyama simulation of controlled and twisted diffusions, and the
//! Monte Carlo estimators built on it.
//!
//! Every path draws its Gaussian increments from its own ChaCha stream keyed
//! by `(seed, path index)`; within a path the stream position advances with
//! the step index. Paths run in parallel and are reduced in path order with
//! pairwise summation, so results do not depend on the thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::continuation::{sweep, SweepOptions};
use crate::discretize::{Extension, Grid, Policy};
use crate::error::{Error, Result};
use crate::model::{BoxRegion, Model, MAX_DIM};

pub const DEFAULT_DT: f64 = 1e-3;
/// Number of contiguous path batches used for batch-means error bars.
pub const BATCHES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
    pub seed: u64,
    /// Paths leaving `{|x|∞ ≤ kill_radius}` are truncated.
    pub kill_radius: f64,
    /// Initial time discarded by occupation-time averages.
    #[serde(default)]
    pub burn_in: f64,
    /// Negate every Gaussian increment (the antithetic partner ensemble).
    #[serde(default)]
    pub mirror_noise: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            horizon: 50.0,
            paths: 10_000,
            seed: 0x5eed,
            kill_radius: 16.0,
            burn_in: 0.0,
            mirror_noise: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.horizon > self.dt) {
            return Err(Error::InvalidArgument(format!(
                "simulation needs 0 < dt < horizon (dt={}, horizon={})",
                self.dt, self.horizon
            )));
        }
        if self.paths == 0 {
            return Err(Error::InvalidArgument("simulation needs at least one path".into()));
        }
        if !(self.kill_radius > 0.0) {
            return Err(Error::InvalidArgument("kill radius must be positive".into()));
        }
        if !(self.burn_in >= 0.0) || self.burn_in >= self.horizon {
            return Err(Error::InvalidArgument("burn-in must lie in [0, horizon)".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        steps_for(self.horizon, self.dt)
    }
}

fn steps_for(t: f64, dt: f64) -> usize {
    (t / dt - 1e-9).ceil().max(0.0) as usize
}

// ---------------------------------------------------------------------------
// Dynamics
// ---------------------------------------------------------------------------

/// Coefficients of a diffusion `dX = b(X) dt + σ(X) dW` together with the
/// running potential integrated by the Feynman–Kac estimators.
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;
    fn drift(&self, x: &[f64], out: &mut [f64]);
    fn sigma(&self, x: &[f64], out: &mut [f64]);
    fn potential(&self, x: &[f64]) -> f64;
}

/// Stationary Markov control: one fixed action or a selector on a grid
/// (nearest node, clamped outside the grid).
#[derive(Debug, Clone, Copy)]
pub enum ControlLaw<'a> {
    Fixed(usize),
    OnGrid { grid: &'a Grid, policy: &'a Policy },
}

impl<'a> ControlLaw<'a> {
    /// Grid selector, or the single action of an uncontrolled model.
    pub fn for_policy(model: &Model, grid: &'a Grid, policy: &'a Policy) -> Self {
        if model.actions.len() == 1 {
            ControlLaw::Fixed(0)
        } else {
            ControlLaw::OnGrid { grid, policy }
        }
    }

    #[inline]
    pub fn action(&self, x: &[f64]) -> usize {
        match self {
            ControlLaw::Fixed(k) => *k,
            ControlLaw::OnGrid { grid, policy } => policy.actions[grid.nearest(x)],
        }
    }
}

/// The model's own diffusion under a stationary Markov control; the
/// potential is the running cost `c(x, v(x))`.
pub struct Controlled<'a> {
    pub model: &'a Model,
    pub law: ControlLaw<'a>,
}

impl<'a> Controlled<'a> {
    pub fn new(model: &'a Model, law: ControlLaw<'a>) -> Self {
        Self { model, law }
    }
}

impl Dynamics for Controlled<'_> {
    fn dim(&self) -> usize {
        self.model.dim
    }

    #[inline]
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        self.model.drift_at(x, self.law.action(x), out)
    }

    #[inline]
    fn sigma(&self, x: &[f64], out: &mut [f64]) {
        self.model.sigma_at(x, out)
    }

    #[inline]
    fn potential(&self, x: &[f64]) -> f64 {
        self.model.cost_at(x, self.law.action(x))
    }
}

/// A diffusion whose drift is a nodal vector field (component-major, one
/// vector per axis), interpolated multilinearly and extended by its nearest
/// grid value; σ comes from the model. Its potential is zero.
pub struct FieldDrift<'a> {
    pub model: &'a Model,
    pub grid: &'a Grid,
    pub field: &'a [Vec<f64>],
}

impl Dynamics for FieldDrift<'_> {
    fn dim(&self) -> usize {
        self.model.dim
    }

    #[inline]
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        for (o, comp) in out.iter_mut().zip(self.field) {
            *o = self.grid.interpolate(comp, x, Extension::Clamp);
        }
    }

    #[inline]
    fn sigma(&self, x: &[f64], out: &mut [f64]) {
        self.model.sigma_at(x, out)
    }

    fn potential(&self, _x: &[f64]) -> f64 {
        0.0
    }
}

/// Wraps a dynamics and replaces its potential.
pub struct WithPotential<'a, D, F> {
    pub inner: &'a D,
    pub potential: F,
}

impl<D: Dynamics, F: Fn(&[f64]) -> f64 + Sync> Dynamics for WithPotential<'_, D, F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn drift(&self, x: &[f64], out: &mut [f64]) {
        self.inner.drift(x, out)
    }
    fn sigma(&self, x: &[f64], out: &mut [f64]) {
        self.inner.sigma(x, out)
    }
    fn potential(&self, x: &[f64]) -> f64 {
        (self.potential)(x)
    }
}

// ---------------------------------------------------------------------------
// Path engine
// ---------------------------------------------------------------------------

/// One Euler step seen by an observer: left point, right point, time of the
/// left point.
pub struct Step<'s> {
    pub index: usize,
    pub t: f64,
    pub x: &'s [f64],
    pub next: &'s [f64],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathEnd {
    /// Ran to the horizon.
    Completed,
    /// Observer stopped the path.
    Stopped,
    /// Left the kill window at this time.
    Killed(f64),
}

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Runs one Euler–Maruyama path. The observer is called after each step that
/// stays inside the kill window and returns `false` to stop the path.
pub fn run_path<D, O>(dynamics: &D, x0: &[f64], cfg: &SimConfig, path: usize, mut observer: O) -> PathEnd
where
    D: Dynamics + ?Sized,
    O: FnMut(&Step<'_>) -> bool,
{
    let d = dynamics.dim();
    let mut rng = path_rng(cfg.seed, path);
    let sign = if cfg.mirror_noise { -1.0 } else { 1.0 };
    let sqdt = cfg.dt.sqrt();
    let mut x = [0.0; MAX_DIM];
    let mut next = [0.0; MAX_DIM];
    let mut b = [0.0; MAX_DIM];
    let mut s = [0.0; MAX_DIM * MAX_DIM];
    let mut xi = [0.0; MAX_DIM];
    x[..d].copy_from_slice(x0);
    for index in 0..cfg.steps() {
        let t = index as f64 * cfg.dt;
        dynamics.drift(&x[..d], &mut b[..d]);
        dynamics.sigma(&x[..d], &mut s[..d * d]);
        for v in xi[..d].iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = sign * z * sqdt;
        }
        let mut outside = false;
        for i in 0..d {
            let noise: f64 = (0..d).map(|k| s[i * d + k] * xi[k]).sum();
            next[i] = x[i] + b[i] * cfg.dt + noise;
            outside |= !(next[i].abs() <= cfg.kill_radius);
        }
        if outside {
            return PathEnd::Killed(t + cfg.dt);
        }
        let go_on = observer(&Step {
            index,
            t,
            x: &x[..d],
            next: &next[..d],
        });
        x = next;
        if !go_on {
            return PathEnd::Stopped;
        }
    }
    PathEnd::Completed
}

/// Sampled trajectory of one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub times: Vec<f64>,
    /// States at `times`, flattened (`dim` entries per time).
    pub states: Vec<f64>,
    pub killed_at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub dim: usize,
    pub paths: Vec<PathRecord>,
}

impl Ensemble {
    pub fn truncated_fraction(&self) -> f64 {
        self.paths.iter().filter(|p| p.killed_at.is_some()).count() as f64 / self.paths.len() as f64
    }

    /// Final recorded state of each path.
    pub fn endpoints(&self) -> impl Iterator<Item = &[f64]> {
        self.paths.iter().map(move |p| &p.states[p.states.len() - self.dim..])
    }

    /// Writes `path,t,x1[,x2]` rows, at most `row_cap` of them.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W, row_cap: usize) -> std::io::Result<()> {
        let cols: Vec<String> = (1..=self.dim).map(|i| format!("x{i}")).collect();
        writeln!(w, "path,t,{}", cols.join(","))?;
        let mut rows = 0;
        for (p, rec) in self.paths.iter().enumerate() {
            for (t, x) in rec.times.iter().zip(rec.states.chunks_exact(self.dim)) {
                if rows >= row_cap {
                    return Ok(());
                }
                let xs: Vec<String> = x.iter().map(|v| format!("{v:.17e}")).collect();
                writeln!(w, "{p},{t:.17e},{}", xs.join(","))?;
                rows += 1;
            }
        }
        Ok(())
    }
}

/// Simulates the ensemble, recording every `record_every` steps (and the
/// final state).
pub fn simulate<D: Dynamics + ?Sized>(
    dynamics: &D,
    x0: &[f64],
    cfg: &SimConfig,
    record_every: usize,
) -> Result<Ensemble> {
    cfg.validate()?;
    check_start(dynamics.dim(), x0, cfg)?;
    let every = record_every.max(1);
    let d = dynamics.dim();
    let paths = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let mut times = vec![0.0];
            let mut states = x0.to_vec();
            let mut last: Option<(f64, Vec<f64>)> = None;
            let end = run_path(dynamics, x0, cfg, p, |s| {
                if (s.index + 1) % every == 0 {
                    times.push(s.t + cfg.dt);
                    states.extend_from_slice(s.next);
                    last = None;
                } else {
                    last = Some((s.t + cfg.dt, s.next.to_vec()));
                }
                true
            });
            if let Some((t, x)) = last {
                times.push(t);
                states.extend_from_slice(&x);
            }
            debug_assert_eq!(states.len(), times.len() * d);
            PathRecord {
                times,
                states,
                killed_at: match end {
                    PathEnd::Killed(t) => Some(t),
                    _ => None,
                },
            }
        })
        .collect();
    Ok(Ensemble { dim: d, paths })
}

fn check_start(dim: usize, x0: &[f64], cfg: &SimConfig) -> Result<()> {
    if x0.len() != dim {
        return Err(Error::InvalidArgument(format!(
            "start point has {} coordinates, model has {dim}",
            x0.len()
        )));
    }
    if x0.iter().any(|v| !(v.abs() < cfg.kill_radius)) {
        return Err(Error::InvalidArgument(format!(
            "start point {x0:?} is outside the kill radius {}",
            cfg.kill_radius
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

/// Pairwise summation in index order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

fn mean(xs: &[f64]) -> f64 {
    pairwise_sum(xs) / xs.len() as f64
}

/// Mean and standard error of the mean.
fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    let m = mean(xs);
    if n < 2 {
        return (m, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

/// `log(mean(exp(z)))` with max subtraction.
pub fn log_mean_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    m + (pairwise_sum(&e) / z.len() as f64).ln()
}

/// Standard error of a statistic from its values on contiguous batches.
fn batch_stderr<F: Fn(&[f64]) -> f64>(xs: &[f64], stat: F) -> f64 {
    let b = BATCHES.min(xs.len());
    if b < 2 {
        return 0.0;
    }
    let size = xs.len() / b;
    let vals: Vec<f64> = (0..b)
        .map(|k| {
            let end = if k + 1 == b { xs.len() } else { (k + 1) * size };
            stat(&xs[k * size..end])
        })
        .collect();
    mean_stderr(&vals).1
}

// ---------------------------------------------------------------------------
// Feynman–Kac growth rate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FkEstimate {
    pub value: f64,
    pub stderr: f64,
    pub paths_used: usize,
    pub truncated_fraction: f64,
}

/// `(1/T) log E[exp ∫₀ᵀ f(X_t) dt]` for the dynamics' potential `f`,
/// left-endpoint quadrature, batch-means error on the log scale.
pub fn fk_growth_rate<D: Dynamics + ?Sized>(dynamics: &D, x0: &[f64], cfg: &SimConfig) -> Result<FkEstimate> {
    cfg.validate()?;
    check_start(dynamics.dim(), x0, cfg)?;
    let integrals: Vec<Option<f64>> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            let end = run_path(dynamics, x0, cfg, p, |s| {
                acc += dynamics.potential(s.x) * cfg.dt;
                true
            });
            match end {
                PathEnd::Killed(_) => None,
                _ => Some(acc),
            }
        })
        .collect();
    let used: Vec<f64> = integrals.iter().flatten().copied().collect();
    let truncated_fraction = 1.0 - used.len() as f64 / cfg.paths as f64;
    if used.is_empty() {
        return Err(Error::EstimatorUndefined(
            "every path left the kill window".into(),
        ));
    }
    let t = cfg.steps() as f64 * cfg.dt;
    let value = log_mean_exp(&used) / t;
    let stderr = batch_stderr(&used, |z| log_mean_exp(z) / t);
    Ok(FkEstimate {
        value,
        stderr,
        paths_used: used.len(),
        truncated_fraction,
    })
}

/// Risk-sensitive value `Λ_x^v` of a stationary Markov control.
pub fn fk_lambda(model: &Model, law: ControlLaw<'_>, x0: &[f64], cfg: &SimConfig) -> Result<FkEstimate> {
    let dynamics = Controlled::new(model, law);
    let min_cost = (0..model.actions.len())
        .map(|k| model.cost_at(x0, k))
        .fold(f64::INFINITY, f64::min);
    if cfg.horizon * min_cost.max(0.0) < 1.0 {
        log::warn!(
            "fk_lambda: horizon {} is short relative to the cost scale near x0",
            cfg.horizon
        );
    }
    fk_growth_rate(&dynamics, x0, cfg)
}

// ---------------------------------------------------------------------------
// Exit-time functionals
// ---------------------------------------------------------------------------

/// Fraction `θ ∈ (0, 1]` of the segment `x → next` at which it enters the
/// closed box `{|y|∞ ≤ r}`, or `None` if `next` is outside.
fn box_entry(x: &[f64], next: &[f64], r: f64) -> Option<f64> {
    if next.iter().any(|v| v.abs() > r) {
        return None;
    }
    let mut theta: f64 = 0.0;
    for (a, b) in x.iter().zip(next) {
        if a.abs() > r {
            let face = r * a.signum();
            theta = theta.max((a - face) / (a - b));
        }
    }
    Some(theta.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub ratio: f64,
    pub stderr: f64,
    pub paths_used: usize,
    pub truncated_fraction: f64,
}

/// `E_x[exp(∫₀^τ (f − λ) dt) Ψ(X_τ)] / Ψ(x)` with `τ` the first entry into the
/// closed box `B_r`; `Ψ` is a nodal field interpolated on `grid`.
#[allow(clippy::too_many_arguments)]
pub fn exit_representation_check(
    model: &Model,
    law: ControlLaw<'_>,
    grid: &Grid,
    eigenfunction: &[f64],
    lambda: f64,
    r: f64,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<RatioEstimate> {
    cfg.validate()?;
    let dynamics = Controlled::new(model, law);
    check_start(model.dim, x0, cfg)?;
    if !x0.iter().any(|v| v.abs() > r) {
        return Err(Error::InvalidArgument(format!("x0={x0:?} must lie outside B_{r}")));
    }
    if eigenfunction.len() != grid.len() {
        return Err(Error::InvalidArgument("eigenfunction does not match grid".into()));
    }
    let psi0 = grid.interpolate(eigenfunction, x0, Extension::Zero);
    if !(psi0 > 0.0) {
        return Err(Error::InvalidArgument("eigenfunction vanishes at x0".into()));
    }
    let values: Vec<Option<f64>> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            let mut hit: Option<[f64; MAX_DIM]> = None;
            run_path(&dynamics, x0, cfg, p, |s| match box_entry(s.x, s.next, r) {
                Some(theta) => {
                    acc += (dynamics.potential(s.x) - lambda) * theta * cfg.dt;
                    let mut y = [0.0; MAX_DIM];
                    for (i, yi) in y.iter_mut().enumerate().take(s.x.len()) {
                        *yi = s.x[i] + theta * (s.next[i] - s.x[i]);
                    }
                    hit = Some(y);
                    false
                }
                None => {
                    acc += (dynamics.potential(s.x) - lambda) * cfg.dt;
                    true
                }
            });
            hit.map(|y| acc.exp() * grid.interpolate(eigenfunction, &y[..model.dim], Extension::Zero) / psi0)
        })
        .collect();
    let used: Vec<f64> = values.iter().flatten().copied().collect();
    let truncated_fraction = 1.0 - used.len() as f64 / cfg.paths as f64;
    if truncated_fraction > 0.5 {
        return Err(Error::Unreliable { truncated_fraction });
    }
    let (ratio, stderr) = mean_stderr(&used);
    Ok(RatioEstimate {
        ratio,
        stderr,
        paths_used: used.len(),
        truncated_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentVerdict {
    FiniteConsistent,
    DivergenceSuspected,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentLevel {
    pub horizon: f64,
    /// Mean of `exp ∫₀^{τ∧H} (f − λ + δ)` over all paths.
    pub mean: f64,
    pub stderr: f64,
    /// Mean of the same weight restricted to paths still outside at `H`.
    pub alive_mass: f64,
    pub alive: usize,
    pub truncated_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitMomentReport {
    pub estimate: FkEstimate,
    pub levels: Vec<MomentLevel>,
    pub verdict: MomentVerdict,
}

/// Levels of the doubling horizon schedule ending at `cfg.horizon`.
pub const MOMENT_LEVELS: usize = 6;
/// Paths needed at a level for it to enter the trend test.
const MIN_ALIVE: usize = 5;

/// `E_x[exp ∫₀^τ (f − λ + δ) dt]` for the first entry `τ` into `B_r`, with a
/// finiteness verdict read off a doubling horizon schedule.
///
/// The verdict is statistical. Divergence shows up as a running estimate that
/// keeps growing with the horizon while the weight carried by paths that
/// have not yet entered `B_r` grows too; a finite moment shows up as a
/// stabilized estimate with almost no paths left outside.
#[allow(clippy::too_many_arguments)]
pub fn exit_exponential_moment(
    model: &Model,
    law: ControlLaw<'_>,
    lambda: f64,
    delta: f64,
    r: f64,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<ExitMomentReport> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidArgument(format!("delta must be ≥ 0, got {delta}")));
    }
    cfg.validate()?;
    check_start(model.dim, x0, cfg)?;
    if !x0.iter().any(|v| v.abs() > r) {
        return Err(Error::InvalidArgument(format!("x0={x0:?} must lie outside B_{r}")));
    }
    let dynamics = Controlled::new(model, law);
    let horizons: Vec<f64> = (0..MOMENT_LEVELS)
        .map(|k| cfg.horizon / 2f64.powi((MOMENT_LEVELS - 1 - k) as i32))
        .collect();
    let marks: Vec<usize> = horizons.iter().map(|h| steps_for(*h, cfg.dt)).collect();

    // per path: exponent at each level and whether the path was still outside
    let per_path: Vec<(Vec<f64>, Vec<bool>, bool)> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            let mut at_level = vec![0.0; MOMENT_LEVELS];
            let mut alive = vec![true; MOMENT_LEVELS];
            let mut level = 0;
            let mut entered = false;
            let end = run_path(&dynamics, x0, cfg, p, |s| {
                let rate = dynamics.potential(s.x) - lambda + delta;
                match box_entry(s.x, s.next, r) {
                    Some(theta) => {
                        acc += rate * theta * cfg.dt;
                        entered = true;
                        false
                    }
                    None => {
                        acc += rate * cfg.dt;
                        while level < MOMENT_LEVELS && s.index + 1 == marks[level] {
                            at_level[level] = acc;
                            level += 1;
                        }
                        true
                    }
                }
            });
            for k in level..MOMENT_LEVELS {
                at_level[k] = acc;
                alive[k] = !entered;
            }
            let killed = matches!(end, PathEnd::Killed(_));
            (at_level, alive, killed)
        })
        .collect();

    let n = cfg.paths as f64;
    let levels: Vec<MomentLevel> = (0..MOMENT_LEVELS)
        .map(|k| {
            let w: Vec<f64> = per_path.iter().map(|(a, _, _)| a[k].exp()).collect();
            let alive_w: Vec<f64> = per_path
                .iter()
                .map(|(a, al, _)| if al[k] { a[k].exp() } else { 0.0 })
                .collect();
            let alive = per_path.iter().filter(|(_, al, _)| al[k]).count();
            let (m, se) = mean_stderr(&w);
            MomentLevel {
                horizon: horizons[k],
                mean: m,
                stderr: se,
                alive_mass: mean(&alive_w),
                alive,
                truncated_fraction: alive as f64 / n,
            }
        })
        .collect();

    let last = &levels[MOMENT_LEVELS - 1];
    let prev = &levels[MOMENT_LEVELS - 2];
    let killed = per_path.iter().filter(|p| p.2).count();

    let informative: Vec<&MomentLevel> = levels.iter().filter(|l| l.alive >= MIN_ALIVE).collect();
    let growing = informative.len() >= 3
        && informative.windows(2).all(|w| w[1].mean > w[0].mean && w[1].alive_mass >= w[0].alive_mass);
    let stable = (last.mean - prev.mean).abs()
        <= (3.0 * (last.stderr.powi(2) + prev.stderr.powi(2)).sqrt()).max(1e-3 * last.mean.abs());
    let verdict = if growing {
        MomentVerdict::DivergenceSuspected
    } else if last.truncated_fraction < 0.01 && stable {
        MomentVerdict::FiniteConsistent
    } else {
        MomentVerdict::Inconclusive
    };
    Ok(ExitMomentReport {
        estimate: FkEstimate {
            value: last.mean,
            stderr: last.stderr,
            paths_used: cfg.paths - killed,
            truncated_fraction: last.truncated_fraction,
        },
        levels,
        verdict,
    })
}

// ---------------------------------------------------------------------------
// Long-time behaviour of the normalized Feynman–Kac semigroup
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaVerdict {
    /// `g(t)` levels off at a positive constant, so `∫ g = ∞`.
    DivergentConsistent,
    /// `g(t)` decays geometrically.
    ConvergentSuspected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaReport {
    /// `(t, g(t), stderr)`.
    pub checkpoints: Vec<(f64, f64, f64)>,
    /// `−d log g / dt` fitted over the second half of the schedule.
    pub decay_rate: f64,
    pub truncated_fraction: f64,
    pub verdict: GammaVerdict,
}

pub const GAMMA_LEVELS: usize = 6;
/// Decay rates below this count as a plateau.
pub const PLATEAU_RATE: f64 = 0.02;

/// Estimates `g(t) = E_x[exp ∫₀ᵗ (f − λ)]` on `t = H/2^{K-1}, …, H/2, H`.
pub fn gamma_integral<D: Dynamics + ?Sized>(
    dynamics: &D,
    lambda: f64,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<GammaReport> {
    cfg.validate()?;
    check_start(dynamics.dim(), x0, cfg)?;
    let times: Vec<f64> = (0..GAMMA_LEVELS)
        .map(|k| cfg.horizon / 2f64.powi((GAMMA_LEVELS - 1 - k) as i32))
        .collect();
    let marks: Vec<usize> = times.iter().map(|t| steps_for(*t, cfg.dt)).collect();
    let per_path: Vec<Option<Vec<f64>>> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            let mut out = Vec::with_capacity(GAMMA_LEVELS);
            let end = run_path(dynamics, x0, cfg, p, |s| {
                acc += (dynamics.potential(s.x) - lambda) * cfg.dt;
                while out.len() < GAMMA_LEVELS && s.index + 1 == marks[out.len()] {
                    out.push(acc);
                }
                true
            });
            match end {
                PathEnd::Killed(_) => None,
                _ => Some(out),
            }
        })
        .collect();
    let used: Vec<&Vec<f64>> = per_path.iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::EstimatorUndefined("every path left the kill window".into()));
    }
    let truncated_fraction = 1.0 - used.len() as f64 / cfg.paths as f64;
    let checkpoints: Vec<(f64, f64, f64)> = (0..GAMMA_LEVELS)
        .map(|k| {
            let w: Vec<f64> = used.iter().map(|z| z[k].exp()).collect();
            let (m, se) = mean_stderr(&w);
            (times[k], m, se)
        })
        .collect();
    let tail = &checkpoints[GAMMA_LEVELS / 2 - 1..];
    let (slope, _, _) = least_squares(
        &tail.iter().map(|c| c.0).collect::<Vec<_>>(),
        &tail.iter().map(|c| c.1.ln()).collect::<Vec<_>>(),
    );
    let decay_rate = -slope;
    let g_last = checkpoints[GAMMA_LEVELS - 1].1;
    let verdict = if decay_rate < PLATEAU_RATE && g_last > 0.0 {
        GammaVerdict::DivergentConsistent
    } else {
        GammaVerdict::ConvergentSuspected
    };
    Ok(GammaReport {
        checkpoints,
        decay_rate,
        truncated_fraction,
        verdict,
    })
}

/// Least-squares line through `(x, y)`, returned as `(slope, intercept, R²)`.
pub fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if sxx > 0.0 && syy > 0.0 {
        sxy * sxy / (sxx * syy)
    } else {
        1.0
    };
    (slope, my - slope * mx, r2)
}

// ---------------------------------------------------------------------------
// Strict monotonicity of the value in the potential
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub region: BoxRegion,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub lambda_base: f64,
    pub lambda_bumped: f64,
    pub gap: f64,
    pub saturation_gap: f64,
    pub strict: bool,
}

pub const PROBE_FLOOR: f64 = 1e-6;

/// Compares the swept limits for `c` and `c + ε·1_A`.
pub fn monotonicity_probe(
    model: &Model,
    bump: &Bump,
    radii: &[f64],
    spacing: f64,
    opts: &SweepOptions,
) -> Result<ProbeReport> {
    if !(bump.epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("bump epsilon must be ≥ 0, got {}", bump.epsilon)));
    }
    if bump.region.lo.len() != model.dim {
        return Err(Error::InvalidArgument("bump region dimension mismatch".into()));
    }
    let base = sweep(model, radii, spacing, opts)?;
    let bumped_model = model.with_cost_bump(bump.region.clone(), bump.epsilon);
    let bumped = sweep(&bumped_model, radii, spacing, opts)?;
    let finite_gap = |g: f64| if g.is_finite() { g.abs() } else { 0.0 };
    let saturation_gap = finite_gap(base.saturation_gap).max(finite_gap(bumped.saturation_gap));
    let gap = bumped.lambda_star_estimate - base.lambda_star_estimate;
    Ok(ProbeReport {
        lambda_base: base.lambda_star_estimate,
        lambda_bumped: bumped.lambda_star_estimate,
        gap,
        saturation_gap,
        strict: gap > (10.0 * saturation_gap).max(PROBE_FLOOR),
    })
}

// ---------------------------------------------------------------------------
// Mixing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    /// Fitted exponential decay rate of the autocorrelation; `+∞` when the
    /// first lag is already indistinguishable from zero.
    pub rate: f64,
    pub r_squared: f64,
    /// `(lag, autocorrelation)`.
    pub acf: Vec<(f64, f64)>,
    pub lags_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    pub fit: DecayFit,
    pub warmup_insufficient: bool,
    pub truncated_fraction: f64,
}

/// Pooled autocorrelation of sampled series (one per path) and a log-linear
/// fit over the lags whose correlation clears the noise floor.
pub fn autocorrelation_decay(series: &[Vec<f64>], sample_dt: f64, max_lag: usize) -> DecayFit {
    let all: Vec<f64> = series.iter().flatten().copied().collect();
    let m = mean(&all);
    let var = mean(&all.iter().map(|x| (x - m) * (x - m)).collect::<Vec<_>>());
    let acf: Vec<(f64, f64)> = (1..=max_lag)
        .map(|k| {
            let prods: Vec<f64> = series
                .iter()
                .flat_map(|s| s.windows(k + 1).map(|w| (w[0] - m) * (w[k] - m)))
                .collect();
            let c = if prods.is_empty() { 0.0 } else { mean(&prods) / var };
            (k as f64 * sample_dt, c)
        })
        .collect();
    let pairs = all.len().max(1) as f64;
    let floor = (3.0 / pairs.sqrt()).max(0.05);
    let usable: Vec<(f64, f64)> = acf.iter().copied().take_while(|(_, c)| *c > floor).collect();
    if usable.is_empty() {
        return DecayFit {
            rate: f64::INFINITY,
            r_squared: 0.0,
            acf,
            lags_used: 0,
        };
    }
    // anchor the fit at lag 0 where the correlation is 1
    let mut xs = vec![0.0];
    let mut ys = vec![0.0];
    xs.extend(usable.iter().map(|p| p.0));
    ys.extend(usable.iter().map(|p| p.1.ln()));
    let (slope, _, r2) = least_squares(&xs, &ys);
    DecayFit {
        rate: -slope,
        r_squared: r2,
        acf,
        lags_used: usable.len(),
    }
}

/// Simulates the dynamics past `cfg.burn_in`, samples the first coordinate
/// every `sample_every` steps and fits the decay of its autocorrelation.
pub fn mixing_diagnostic<D: Dynamics + ?Sized>(
    dynamics: &D,
    x0: &[f64],
    cfg: &SimConfig,
    sample_every: usize,
    max_lag: usize,
) -> Result<MixingReport> {
    cfg.validate()?;
    check_start(dynamics.dim(), x0, cfg)?;
    let every = sample_every.max(1);
    let burn = steps_for(cfg.burn_in, cfg.dt);
    let per_path: Vec<Option<Vec<f64>>> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let mut out = Vec::new();
            let end = run_path(dynamics, x0, cfg, p, |s| {
                let k = s.index + 1;
                if k >= burn && (k - burn).is_multiple_of(every) {
                    out.push(s.next[0]);
                }
                true
            });
            match end {
                PathEnd::Killed(_) => None,
                _ => Some(out),
            }
        })
        .collect();
    let series: Vec<Vec<f64>> = per_path.iter().flatten().cloned().collect();
    if series.is_empty() {
        return Err(Error::EstimatorUndefined("every path left the kill window".into()));
    }
    let truncated_fraction = 1.0 - series.len() as f64 / cfg.paths as f64;
    let dt_sample = every as f64 * cfg.dt;
    let fit = autocorrelation_decay(&series, dt_sample, max_lag);

    // first-half vs second-half means across paths
    let diffs: Vec<f64> = series
        .iter()
        .filter(|s| s.len() >= 2)
        .map(|s| {
            let h = s.len() / 2;
            mean(&s[..h]) - mean(&s[h..])
        })
        .collect();
    let warmup_insufficient = if diffs.len() >= 2 {
        let (m, se) = mean_stderr(&diffs);
        m.abs() > 3.0 * se
    } else {
        false
    };
    if warmup_insufficient {
        log::warn!("mixing_diagnostic: halves of the sampled series disagree; increase burn-in");
    }
    Ok(MixingReport {
        fit,
        warmup_insufficient,
        truncated_fraction,
    })
}

// ---------------------------------------------------------------------------
// Occupation averages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationAverages {
    /// Per observable: mean over paths of the time average on `[burn_in, T]`.
    pub means: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// Standard error of the sum of all observables (accounts for their
    /// correlation).
    pub sum_stderr: f64,
    pub truncated_fraction: f64,
}

/// A scalar function of the state, shared across worker threads.
pub type Observable<'a> = &'a (dyn Fn(&[f64]) -> f64 + Sync);

/// Long-run time averages of several observables along the paths.
pub fn occupation_averages<D: Dynamics + ?Sized>(
    dynamics: &D,
    observables: &[Observable<'_>],
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<OccupationAverages> {
    cfg.validate()?;
    check_start(dynamics.dim(), x0, cfg)?;
    let burn = steps_for(cfg.burn_in, cfg.dt);
    let k = observables.len();
    let per_path: Vec<Option<Vec<f64>>> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let mut acc = vec![0.0; k];
            let mut count = 0usize;
            let end = run_path(dynamics, x0, cfg, p, |s| {
                if s.index >= burn {
                    for (a, f) in acc.iter_mut().zip(observables) {
                        *a += f(s.x);
                    }
                    count += 1;
                }
                true
            });
            match end {
                PathEnd::Killed(_) => None,
                _ => Some(acc.into_iter().map(|a| a / count.max(1) as f64).collect()),
            }
        })
        .collect();
    let used: Vec<&Vec<f64>> = per_path.iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::EstimatorUndefined("every path left the kill window".into()));
    }
    let mut means = Vec::with_capacity(k);
    let mut stderrs = Vec::with_capacity(k);
    for j in 0..k {
        let col: Vec<f64> = used.iter().map(|v| v[j]).collect();
        let (m, se) = mean_stderr(&col);
        means.push(m);
        stderrs.push(se);
    }
    let sums: Vec<f64> = used.iter().map(|v| pairwise_sum(v)).collect();
    let sum_stderr = mean_stderr(&sums).1;
    Ok(OccupationAverages {
        means,
        stderrs,
        sum_stderr,
        truncated_fraction: 1.0 - used.len() as f64 / cfg.paths as f64,
    })
}

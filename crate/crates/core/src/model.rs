//! Controlled diffusion models over a finite action set, with structural
//! checks and a small catalog of benchmark problems.
//!
//! Points and actions are passed as slices; a model of dimension `d` always
//! receives `x.len() == d`. Diffusion matrices are row-major `d × d`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `b(x, u)` written into `out` (length `dim`).
pub type DriftFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `σ(x)` written row-major into `out` (length `dim * dim`).
pub type DiffusionFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
/// `c(x, u)`.
pub type CostFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Smallest eigenvalue of `a = σσᵀ` accepted by [`Model::validate_at`].
pub const ELLIPTICITY_FLOOR: f64 = 1e-12;

pub const MAX_DIM: usize = 2;

/// A finite, ordered discretization of the compact action space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSet {
    dim: usize,
    points: Vec<f64>,
}

impl ActionSet {
    /// The trivial action set of an uncontrolled problem.
    pub fn singleton() -> Self {
        Self {
            dim: 1,
            points: vec![0.0],
        }
    }

    /// `count` equally spaced scalar actions covering `[lo, hi]`.
    pub fn interval(lo: f64, hi: f64, count: usize) -> Result<Self> {
        if count == 0 || !lo.is_finite() || !hi.is_finite() || hi < lo {
            return Err(Error::InvalidModel(format!(
                "bad action interval [{lo}, {hi}] with {count} points"
            )));
        }
        let points = if count == 1 {
            vec![0.5 * (lo + hi)]
        } else {
            let step = (hi - lo) / (count - 1) as f64;
            (0..count).map(|k| lo + step * k as f64).collect()
        };
        Ok(Self { dim: 1, points })
    }

    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        let dim = points.first().map(Vec::len).unwrap_or(0);
        if dim == 0 || points.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidModel(
                "action list must be non-empty with points of equal dimension".into(),
            ));
        }
        Ok(Self {
            dim,
            points: points.into_iter().flatten().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, index: usize) -> &[f64] {
        &self.points[index * self.dim..(index + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }
}

/// A controlled diffusion `dX = b(X,U) dt + σ(X) dW` with running cost `c`.
#[derive(Clone)]
pub struct Model {
    pub dim: usize,
    pub drift: DriftFn,
    pub diffusion: DiffusionFn,
    pub cost: CostFn,
    pub actions: ActionSet,
    pub label: String,
    /// User assertion that a smooth Lyapunov-type `ψ₀` exists for this model.
    /// Not checkable numerically; carried into reports.
    pub assume_h2: bool,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("label", &self.label)
            .field("dim", &self.dim)
            .field("actions", &self.actions.len())
            .finish()
    }
}

impl Model {
    pub fn new(
        dim: usize,
        drift: DriftFn,
        diffusion: DiffusionFn,
        cost: CostFn,
        actions: ActionSet,
        label: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidModel(format!(
                "dimension {dim} unsupported (1 or 2)"
            )));
        }
        if actions.is_empty() {
            return Err(Error::InvalidModel("empty action set".into()));
        }
        Ok(Self {
            dim,
            drift,
            diffusion,
            cost,
            actions,
            label: label.into(),
            assume_h2: false,
        })
    }

    pub fn is_controlled(&self) -> bool {
        self.actions.len() > 1
    }

    #[inline]
    pub fn drift_at(&self, x: &[f64], action: usize, out: &mut [f64]) {
        (self.drift)(x, self.actions.get(action), out)
    }

    #[inline]
    pub fn sigma_at(&self, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(x, out)
    }

    #[inline]
    pub fn cost_at(&self, x: &[f64], action: usize) -> f64 {
        (self.cost)(x, self.actions.get(action))
    }

    /// `a(x) = σ(x)σ(x)ᵀ`, row-major.
    pub fn diffusion_matrix(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut sigma = [0.0; MAX_DIM * MAX_DIM];
        self.sigma_at(x, &mut sigma[..d * d]);
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = (0..d).map(|k| sigma[i * d + k] * sigma[j * d + k]).sum();
            }
        }
    }

    /// Pointwise minimum of the cost over the action set, with the lowest
    /// minimizing index.
    pub fn min_cost(&self, x: &[f64]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (k, u) in self.actions.iter().enumerate() {
            let c = (self.cost)(x, u);
            if c < best.0 {
                best = (c, k);
            }
        }
        best
    }

    /// Checks nondegeneracy of `a` and finiteness/nonnegativity of the cost
    /// at the given points.
    pub fn validate_at<'a>(&self, points: impl IntoIterator<Item = &'a [f64]>) -> Result<()> {
        let d = self.dim;
        let mut a = [0.0; MAX_DIM * MAX_DIM];
        let mut b = [0.0; MAX_DIM];
        for x in points {
            self.diffusion_matrix(x, &mut a[..d * d]);
            let min_eig = smallest_symmetric_eigenvalue(&a[..d * d], d);
            if !(min_eig >= ELLIPTICITY_FLOOR) {
                return Err(Error::InvalidModel(format!(
                    "diffusion degenerate at {x:?} (smallest eigenvalue {min_eig:e})"
                )));
            }
            for k in 0..self.actions.len() {
                let c = self.cost_at(x, k);
                if !c.is_finite() || c < 0.0 {
                    return Err(Error::InvalidModel(format!(
                        "cost {c} at x={x:?}, action {k} is not finite and nonnegative"
                    )));
                }
                self.drift_at(x, k, &mut b[..d]);
                if b[..d].iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidModel(format!("non-finite drift at {x:?}")));
                }
            }
        }
        Ok(())
    }

    /// Validates on the scan lattice `{k·step : |k·step| ≤ radius}^dim`.
    pub fn validate_on_box(&self, radius: f64, step: f64) -> Result<()> {
        let pts = lattice(self.dim, radius, step)?;
        self.validate_at(pts.chunks_exact(self.dim))
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Same dynamics with running cost `c + extra(x)`.
    pub fn with_extra_potential<F>(&self, extra: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        let base = self.cost.clone();
        let mut out = self.clone();
        out.cost = Arc::new(move |x, u| base(x, u) + extra(x));
        out
    }

    /// Same dynamics with running cost `c + shift`.
    pub fn with_cost_shift(&self, shift: f64) -> Self {
        self.with_extra_potential(move |_| shift)
            .with_label(format!("{}+{shift}", self.label))
    }

    /// Adds `epsilon` on the closed box `[lo, hi]` (componentwise).
    pub fn with_cost_bump(&self, region: BoxRegion, epsilon: f64) -> Self {
        self.with_extra_potential(move |x| if region.contains(x) { epsilon } else { 0.0 })
    }
}

/// An axis-aligned closed box `{x : lo ≤ x ≤ hi}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidArgument(format!(
                "box [{lo:?}, {hi:?}] must have positive volume"
            )));
        }
        Ok(Self { lo, hi })
    }

    /// The centered box `[-r, r]^dim`.
    pub fn centered(dim: usize, r: f64) -> Result<Self> {
        Self::new(vec![-r; dim], vec![r; dim])
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }
}

fn smallest_symmetric_eigenvalue(a: &[f64], d: usize) -> f64 {
    match d {
        1 => a[0],
        2 => {
            let (p, q, r) = (a[0], 0.5 * (a[1] + a[2]), a[3]);
            let mean = 0.5 * (p + r);
            let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
            mean - rad
        }
        _ => unreachable!("dimension checked at construction"),
    }
}

/// Flat list of lattice points `{k·step}^dim` with every coordinate in
/// `[-radius, radius]`.
pub(crate) fn lattice(dim: usize, radius: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(radius >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scan needs step > 0 and radius ≥ 0 (got step={step}, radius={radius})"
        )));
    }
    let k = (radius / step + 1e-9).floor() as i64;
    let side: Vec<f64> = (-k..=k).map(|i| i as f64 * step).collect();
    let mut pts = Vec::with_capacity(side.len().pow(dim as u32) * dim);
    match dim {
        1 => pts.extend_from_slice(&side),
        2 => {
            for &y in &side {
                for &x in &side {
                    pts.push(x);
                    pts.push(y);
                }
            }
        }
        _ => return Err(Error::InvalidModel(format!("dimension {dim} unsupported"))),
    }
    Ok(pts)
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Outcome of the sampled near-monotonicity test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearMonotoneReport {
    pub lambda_ref: f64,
    pub epsilon: f64,
    pub scan_radius: f64,
    /// Largest `|x|` with `min_u c(x,u) ≤ lambda_ref + epsilon`; `None` when
    /// the sampled sublevel set reaches the edge of the scan window.
    pub sublevel_radius: Option<f64>,
    pub holds: bool,
}

/// Samples `min_u c` on a lattice and locates the outer edge of the sublevel
/// set `{min_u c ≤ λ + ε}`. Crossings between a lattice point inside the set
/// and its outward neighbour are refined by bisection.
pub fn check_near_monotone(
    model: &Model,
    lambda_ref: f64,
    epsilon: f64,
    scan_radius: f64,
    scan_step: f64,
) -> Result<NearMonotoneReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be > 0, got {epsilon}")));
    }
    let d = model.dim;
    let level = lambda_ref + epsilon;
    let pts = lattice(d, scan_radius, scan_step)?;
    let min_cost = |x: &[f64]| -> Result<f64> {
        let c = model.min_cost(x).0;
        if c.is_finite() {
            Ok(c)
        } else {
            Err(Error::InvalidModel(format!("non-finite cost at {x:?}")))
        }
    };

    let edge = (scan_radius / scan_step + 1e-9).floor() * scan_step;
    let mut radius: f64 = 0.0;
    let mut unbounded = false;
    let mut probe = [0.0; MAX_DIM];
    for x in pts.chunks_exact(d) {
        if min_cost(x)? > level {
            continue;
        }
        if x.iter().any(|v| v.abs() >= edge - 1e-9 * scan_step.max(1.0)) {
            unbounded = true;
            break;
        }
        radius = radius.max(norm(x));
        // refine towards each outward lattice neighbour
        for axis in 0..d {
            if x[axis] == 0.0 {
                continue;
            }
            let dir = x[axis].signum();
            probe[..d].copy_from_slice(x);
            probe[axis] += dir * scan_step;
            if min_cost(&probe[..d])? <= level {
                continue;
            }
            let (mut inside, mut outside) = (x[axis], probe[axis]);
            for _ in 0..60 {
                let mid = 0.5 * (inside + outside);
                probe[axis] = mid;
                if min_cost(&probe[..d])? <= level {
                    inside = mid;
                } else {
                    outside = mid;
                }
            }
            probe[axis] = inside;
            radius = radius.max(norm(&probe[..d]));
        }
    }
    let sublevel_radius = if unbounded { None } else { Some(radius) };
    Ok(NearMonotoneReport {
        lambda_ref,
        epsilon,
        scan_radius,
        sublevel_radius,
        holds: sublevel_radius.is_some(),
    })
}

/// Sampled view of the bounded-coefficient and radial-drift hypotheses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftAssumptionReport {
    pub bounded_coeffs: bool,
    pub sup_drift: f64,
    pub sup_sigma: f64,
    /// `(|x|, max_u ⟨b(x,u), x⟩⁺ / |x|)` per shell, ordered by radius.
    pub radial_drift_decay: Vec<(f64, f64)>,
}

impl DriftAssumptionReport {
    /// Heuristic reading of the decay table: the outward radial drift on the
    /// outer quarter of shells is negligible or has shrunk to a quarter of its
    /// inner-quarter level.
    pub fn radial_drift_decays(&self) -> bool {
        let n = self.radial_drift_decay.len();
        if n < 4 {
            return false;
        }
        let q = n / 4;
        let inner = self.radial_drift_decay[..q]
            .iter()
            .fold(0.0f64, |m, r| m.max(r.1));
        let outer = self.radial_drift_decay[n - q..]
            .iter()
            .fold(0.0f64, |m, r| m.max(r.1));
        outer <= 1e-2 || outer <= 0.25 * inner
    }

    pub fn holds(&self) -> bool {
        self.bounded_coeffs && self.radial_drift_decays()
    }
}

/// Relative growth allowed between the inner-half and outer-half sup-norms
/// before coefficients are considered unbounded.
const BOUNDED_GROWTH: f64 = 1.1;

pub fn check_drift_assumption(
    model: &Model,
    scan_radius: f64,
    scan_step: f64,
) -> Result<DriftAssumptionReport> {
    let d = model.dim;
    let pts = lattice(d, scan_radius, scan_step)?;
    let mut b = [0.0; MAX_DIM];
    let mut s = [0.0; MAX_DIM * MAX_DIM];
    let (mut inner_b, mut outer_b, mut inner_s, mut outer_s) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let nshells = (scan_radius / scan_step + 1e-9).floor() as usize;
    let mut shells = vec![0.0f64; nshells + 1];
    let mut seen = vec![false; nshells + 1];
    for x in pts.chunks_exact(d) {
        let r = norm(x);
        model.sigma_at(x, &mut s[..d * d]);
        let smax = s[..d * d].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut bmax = 0.0f64;
        let mut radial = 0.0f64;
        for k in 0..model.actions.len() {
            model.drift_at(x, k, &mut b[..d]);
            if b[..d].iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel(format!("non-finite drift at {x:?}")));
            }
            bmax = bmax.max(norm(&b[..d]));
            if r > 0.0 {
                let inner: f64 = b[..d].iter().zip(x).map(|(bi, xi)| bi * xi).sum();
                radial = radial.max(inner.max(0.0) / r);
            }
        }
        if r <= 0.5 * scan_radius {
            inner_b = inner_b.max(bmax);
            inner_s = inner_s.max(smax);
        } else {
            outer_b = outer_b.max(bmax);
            outer_s = outer_s.max(smax);
        }
        let shell = ((r / scan_step).round() as usize).min(nshells);
        if r > 0.0 && shell > 0 {
            shells[shell] = shells[shell].max(radial);
            seen[shell] = true;
        }
    }
    let grows = |inner: f64, outer: f64| outer > BOUNDED_GROWTH * inner + 1e-12;
    let bounded_coeffs = !grows(inner_b, outer_b) && !grows(inner_s, outer_s);
    let radial_drift_decay = (1..=nshells)
        .filter(|k| seen[*k])
        .map(|k| (k as f64 * scan_step, shells[k]))
        .collect();
    Ok(DriftAssumptionReport {
        bounded_coeffs,
        sup_drift: inner_b.max(outer_b),
        sup_sigma: inner_s.max(outer_s),
        radial_drift_decay,
    })
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

pub const BUILTIN_NAMES: [&str; 4] = ["ou_quadratic", "lq_clamped", "double_well", "bounded_nm"];

/// Parameters of the catalog models; unset fields take the defaults below.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuiltinParams {
    pub beta: Option<f64>,
    pub kappa: Option<f64>,
    pub rho: Option<f64>,
    pub max_control: Option<f64>,
    pub action_count: Option<usize>,
}

pub fn builtin(name: &str) -> Result<Model> {
    builtin_with(name, &BuiltinParams::default())
}

pub fn builtin_with(name: &str, p: &BuiltinParams) -> Result<Model> {
    let beta = p.beta.unwrap_or(1.0);
    let kappa = p.kappa.unwrap_or(0.375);
    match name {
        "ou_quadratic" => ou_quadratic(beta, kappa),
        "lq_clamped" => lq_clamped(
            beta,
            kappa,
            p.rho.unwrap_or(1.0),
            p.max_control.unwrap_or(5.0),
            p.action_count.unwrap_or(101),
        ),
        "double_well" => double_well(),
        "bounded_nm" => bounded_nm(p.max_control.unwrap_or(1.0), p.action_count.unwrap_or(21)),
        other => Err(Error::UnknownModel(other.to_string())),
    }
}

fn unit_sigma() -> DiffusionFn {
    Arc::new(|_x, out| out[0] = 1.0)
}

/// `b = −βx`, `σ = 1`, `f = κx²`. The ground state is `exp(a x²)` with
/// `a = (β − √(β² − 2κ))/2`, and the eigenvalue equals `a`.
pub fn ou_quadratic(beta: f64, kappa: f64) -> Result<Model> {
    if !(beta > 0.0) || !(kappa >= 0.0) || beta * beta < 2.0 * kappa {
        return Err(Error::InvalidModel(format!(
            "ou_quadratic needs β > 0 and β² ≥ 2κ (β={beta}, κ={kappa})"
        )));
    }
    Model::new(
        1,
        Arc::new(move |x, _u, out| out[0] = -beta * x[0]),
        unit_sigma(),
        Arc::new(move |x, _u| kappa * x[0] * x[0]),
        ActionSet::singleton(),
        "ou_quadratic",
    )
}

/// `b = −βx + u`, `c = κx² + ½ρu²`, `u ∈ [−M, M]` on `count` points.
pub fn lq_clamped(beta: f64, kappa: f64, rho: f64, max_control: f64, count: usize) -> Result<Model> {
    if !(rho > 0.0) || !(max_control > 0.0) {
        return Err(Error::InvalidModel("lq_clamped needs ρ > 0 and M > 0".into()));
    }
    Model::new(
        1,
        Arc::new(move |x, u, out| out[0] = -beta * x[0] + u[0]),
        unit_sigma(),
        Arc::new(move |x, u| kappa * x[0] * x[0] + 0.5 * rho * u[0] * u[0]),
        ActionSet::interval(-max_control, max_control, count)?,
        "lq_clamped",
    )
}

/// `b = −(x³ − x)`, `σ = 1`, `f = ½x²`.
pub fn double_well() -> Result<Model> {
    Model::new(
        1,
        Arc::new(|x, _u, out| out[0] = -(x[0] * x[0] * x[0] - x[0])),
        unit_sigma(),
        Arc::new(|x, _u| 0.5 * x[0] * x[0]),
        ActionSet::singleton(),
        "double_well",
    )
}

/// Bounded coefficients with a bounded near-monotone cost:
/// `b = −tanh(x) + 0.1u`, `σ = 1`, `c = x²/(1+x²) + 0.05u²`, `u ∈ [−M, M]`.
pub fn bounded_nm(max_control: f64, count: usize) -> Result<Model> {
    Model::new(
        1,
        Arc::new(|x, u, out| out[0] = -x[0].tanh() + 0.1 * u[0]),
        unit_sigma(),
        Arc::new(|x, u| {
            let r2 = x[0] * x[0];
            r2 / (1.0 + r2) + 0.05 * u[0] * u[0]
        }),
        ActionSet::interval(-max_control, max_control, count)?,
        "bounded_nm",
    )
}

// ---------------------------------------------------------------------------
// JSON model specification
// ---------------------------------------------------------------------------

/// Model description accepted in experiment configs: either a catalog entry
/// or an inline composition of parametric families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Builtin {
        builtin: String,
        #[serde(default)]
        params: BuiltinParams,
    },
    Inline(InlineModel),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineModel {
    pub dim: usize,
    pub drift: DriftFamily,
    pub cost: CostFamily,
    /// Constant σ: a number (scaled identity) or a `dim × dim` matrix.
    #[serde(default = "default_sigma")]
    pub sigma: SigmaSpec,
    #[serde(default)]
    pub actions: Option<ActionSpec>,
    #[serde(default)]
    pub label: Option<String>,
}

fn default_sigma() -> SigmaSpec {
    SigmaSpec::Scalar(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActionSpec {
    Interval { interval: [f64; 2], count: usize },
    Scalars(Vec<f64>),
    Points(Vec<Vec<f64>>),
}

/// Drift families; each acts componentwise, the control entering coordinate
/// `i` is `u[i]` when the action has that many components, else `u[0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftFamily {
    Zero,
    /// `−βx`
    Ou { beta: f64 },
    /// `−βx + g·u`
    LinearControl {
        beta: f64,
        #[serde(default = "one")]
        gain: f64,
    },
    /// `−tanh(x) + g·u`
    Tanh {
        #[serde(default)]
        gain: f64,
    },
    /// `−(x³ − x)`
    DoubleWell,
    /// Constant vector `v` (one entry per coordinate, or one for all).
    Constant { value: Vec<f64> },
}

/// Cost families in `|x|` and `|u|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostFamily {
    Zero,
    Constant { value: f64 },
    /// `κ|x|² + ½ρ|u|²`
    Quadratic {
        kappa: f64,
        #[serde(default)]
        rho: f64,
    },
    /// `|x|²/(1+|x|²) + ½ρ|u|²`
    Bounded {
        #[serde(default)]
        rho: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn builtin(name: &str) -> Self {
        ModelSpec::Builtin {
            builtin: name.to_string(),
            params: BuiltinParams::default(),
        }
    }

    pub fn build(&self) -> Result<Model> {
        match self {
            ModelSpec::Builtin { builtin, params } => builtin_with(builtin, params),
            ModelSpec::Inline(m) => m.build(),
        }
    }
}

impl InlineModel {
    pub fn build(&self) -> Result<Model> {
        let d = self.dim;
        if d == 0 || d > MAX_DIM {
            return Err(Error::InvalidModel(format!("dimension {d} unsupported (1 or 2)")));
        }
        let actions = match &self.actions {
            None => ActionSet::singleton(),
            Some(ActionSpec::Interval { interval, count }) => {
                ActionSet::interval(interval[0], interval[1], *count)?
            }
            Some(ActionSpec::Scalars(v)) => {
                ActionSet::from_points(v.iter().map(|u| vec![*u]).collect())?
            }
            Some(ActionSpec::Points(p)) => ActionSet::from_points(p.clone())?,
        };
        let sigma: Vec<f64> = match &self.sigma {
            SigmaSpec::Scalar(s) => (0..d * d)
                .map(|k| if k % (d + 1) == 0 { *s } else { 0.0 })
                .collect(),
            SigmaSpec::Matrix(rows) => {
                if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                    return Err(Error::InvalidModel(format!("sigma must be {d}×{d}")));
                }
                rows.iter().flatten().copied().collect()
            }
        };
        let diffusion: DiffusionFn = Arc::new(move |_x, out| out.copy_from_slice(&sigma));
        let drift: DriftFn = match self.drift.clone() {
            DriftFamily::Zero => Arc::new(|_x, _u, out| out.fill(0.0)),
            DriftFamily::Ou { beta } => Arc::new(move |x, _u, out| {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -beta * xi;
                }
            }),
            DriftFamily::LinearControl { beta, gain } => Arc::new(move |x, u, out| {
                for (i, (o, xi)) in out.iter_mut().zip(x).enumerate() {
                    *o = -beta * xi + gain * control_component(u, i);
                }
            }),
            DriftFamily::Tanh { gain } => Arc::new(move |x, u, out| {
                for (i, (o, xi)) in out.iter_mut().zip(x).enumerate() {
                    *o = -xi.tanh() + gain * control_component(u, i);
                }
            }),
            DriftFamily::DoubleWell => Arc::new(|x, _u, out| {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -(xi * xi * xi - xi);
                }
            }),
            DriftFamily::Constant { value } => {
                if value.len() != 1 && value.len() != d {
                    return Err(Error::InvalidModel(format!(
                        "constant drift needs 1 or {d} entries"
                    )));
                }
                Arc::new(move |_x, _u, out| {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = value[i.min(value.len() - 1)];
                    }
                })
            }
        };
        let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
        let cost: CostFn = match self.cost {
            CostFamily::Zero => Arc::new(|_x, _u| 0.0),
            CostFamily::Constant { value } => Arc::new(move |_x, _u| value),
            CostFamily::Quadratic { kappa, rho } => {
                Arc::new(move |x, u| kappa * sq(x) + 0.5 * rho * sq(u))
            }
            CostFamily::Bounded { rho } => Arc::new(move |x, u| {
                let r2 = sq(x);
                r2 / (1.0 + r2) + 0.5 * rho * sq(u)
            }),
        };
        let label = self.label.clone().unwrap_or_else(|| "inline".to_string());
        Model::new(d, drift, diffusion, cost, actions, label)
    }
}

#[inline]
fn control_component(u: &[f64], i: usize) -> f64 {
    if u.len() > i {
        u[i]
    } else {
        u[0]
    }
}

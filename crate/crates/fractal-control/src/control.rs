//! Controlled scalar state equations driven by the gasket walk.
//!
//! The driving noise decomposes into two mutually singular channels: calendar
//! time `dt` and the martingale pair `(d⟨W⟩, dW)`. A control therefore has
//! two faces — the value fed to the `dt`-integrands and the value fed to the
//! bracket/martingale integrands — and an optimal feedback law may genuinely
//! differ between them. This module provides forward integration of
//!
//! ```text
//! dx = b₁(t, x, u) dt + b₂(t, x, u) d⟨W⟩ + σ(t, x, u) dW
//! ```
//!
//! under such two-channel controls, cost evaluation, spike perturbations of a
//! control on a short time window, the first/second-order expansion processes
//! of the state around a base control, channel Hamiltonians, and a
//! least-squares Monte Carlo solver for the linear backward (adjoint) pair.
//!
//! All integrators use the left endpoint of each step for every integrand,
//! matching the walk's forward filtration.

use crate::diffusion::{sample_path_into, PathSample, WalkConfig};
use crate::dirichlet::KusuokaDensity;
use crate::gasket::PreGasket;
use crate::rng::par_fold_paths;
use crate::stats::{loglog_slope, Estimate, RunningMoments};
use crate::{Error, Result};

/// Step used by the fallback central-difference coefficient derivatives.
pub const DERIVATIVE_STEP: f64 = 1e-5;

fn central1(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + DERIVATIVE_STEP) - f(x - DERIVATIVE_STEP)) / (2.0 * DERIVATIVE_STEP)
}

fn central2(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + DERIVATIVE_STEP) - 2.0 * f(x) + f(x - DERIVATIVE_STEP))
        / (DERIVATIVE_STEP * DERIVATIVE_STEP)
}

/// Problem coefficients: drifts, noise, running and terminal costs.
///
/// First and second state derivatives default to central differences with
/// step [`DERIVATIVE_STEP`]; override them when analytic forms exist.
pub trait Dynamics: Sync {
    /// Drift against `dt`.
    fn drift_dt(&self, t: f64, x: f64, u: f64) -> f64;
    /// Drift against `d⟨W⟩`.
    fn drift_bracket(&self, t: f64, x: f64, u: f64) -> f64;
    /// Coefficient of `dW`.
    fn noise(&self, t: f64, x: f64, u: f64) -> f64;
    /// Running cost against `dt`.
    fn running_cost_dt(&self, _t: f64, _x: f64, _u: f64) -> f64 {
        0.0
    }
    /// Running cost against `d⟨W⟩`.
    fn running_cost_bracket(&self, _t: f64, _x: f64, _u: f64) -> f64 {
        0.0
    }
    /// Terminal cost.
    fn terminal_cost(&self, x: f64) -> f64;
    /// Uniform bound constant of the coefficient family (enters the default
    /// discount rate of the weighted norms).
    fn bound(&self) -> f64 {
        1.0
    }

    fn drift_dt_dx(&self, t: f64, x: f64, u: f64) -> f64 {
        central1(|s| self.drift_dt(t, s, u), x)
    }
    fn drift_bracket_dx(&self, t: f64, x: f64, u: f64) -> f64 {
        central1(|s| self.drift_bracket(t, s, u), x)
    }
    fn noise_dx(&self, t: f64, x: f64, u: f64) -> f64 {
        central1(|s| self.noise(t, s, u), x)
    }
    fn drift_dt_dxx(&self, t: f64, x: f64, u: f64) -> f64 {
        central2(|s| self.drift_dt(t, s, u), x)
    }
    fn drift_bracket_dxx(&self, t: f64, x: f64, u: f64) -> f64 {
        central2(|s| self.drift_bracket(t, s, u), x)
    }
    fn noise_dxx(&self, t: f64, x: f64, u: f64) -> f64 {
        central2(|s| self.noise(t, s, u), x)
    }
    fn running_cost_dt_dx(&self, t: f64, x: f64, u: f64) -> f64 {
        central1(|s| self.running_cost_dt(t, s, u), x)
    }
    fn running_cost_bracket_dx(&self, t: f64, x: f64, u: f64) -> f64 {
        central1(|s| self.running_cost_bracket(t, s, u), x)
    }
    fn running_cost_dt_dxx(&self, t: f64, x: f64, u: f64) -> f64 {
        central2(|s| self.running_cost_dt(t, s, u), x)
    }
    fn running_cost_bracket_dxx(&self, t: f64, x: f64, u: f64) -> f64 {
        central2(|s| self.running_cost_bracket(t, s, u), x)
    }
    fn terminal_cost_dx(&self, x: f64) -> f64 {
        central1(|s| self.terminal_cost(s), x)
    }
    fn terminal_cost_dxx(&self, x: f64) -> f64 {
        central2(|s| self.terminal_cost(s), x)
    }
}

/// Everything a feedback control may read at the left endpoint of a step.
#[derive(Debug, Clone, Copy)]
pub struct StepState {
    pub step: usize,
    pub t: f64,
    pub x: f64,
    /// Running martingale value `W_t`.
    pub w: f64,
    /// Running bracket value `⟨W⟩_t`.
    pub qv: f64,
    /// Walk vertex at the left endpoint.
    pub vertex: u32,
    /// Vertex the path started from (constant along a path, so feedback laws
    /// may carry per-path anchors that are fixed at time zero).
    pub start_vertex: u32,
}

/// A two-channel control law.
pub trait Control: Sync {
    /// Value fed to the `dt`-integrands `b₁` and `f₁`.
    fn dt_channel(&self, s: &StepState) -> f64;
    /// Value fed to the `d⟨W⟩`/`dW`-integrands `b₂`, `σ` and `f₂`.
    /// Defaults to the `dt`-channel value (single-valued control).
    fn bracket_channel(&self, s: &StepState) -> f64 {
        self.dt_channel(s)
    }
}

/// The constant control `u ≡ c` on both channels.
#[derive(Debug, Clone, Copy)]
pub struct Constant(pub f64);

impl Control for Constant {
    fn dt_channel(&self, _s: &StepState) -> f64 {
        self.0
    }
}

/// One forward solution together with its accumulated costs.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// State at every grid point; length `steps + 1`.
    pub states: Vec<f64>,
    /// Accumulated `∫ f₁ dt`.
    pub dt_cost: f64,
    /// Accumulated `∫ f₂ d⟨W⟩`.
    pub bracket_cost: f64,
    /// Terminal cost `h(x(T))`.
    pub terminal: f64,
}

impl Trajectory {
    pub fn terminal_state(&self) -> f64 {
        *self.states.last().expect("trajectory is never empty")
    }

    /// Total pathwise cost sample.
    pub fn total_cost(&self) -> f64 {
        self.dt_cost + self.bracket_cost + self.terminal
    }
}

/// Integrate the controlled state along one walk path from `x0`.
///
/// Left-endpoint rule for all three integrators and both running costs. A
/// non-finite state aborts with a blowup error; a non-finite cost accumulator
/// under a finite state aborts with an admissibility error. Both name the
/// offending step.
pub fn integrate_sde(
    model: &dyn Dynamics,
    control: &dyn Control,
    path: &PathSample,
    x0: f64,
) -> Result<Trajectory> {
    let steps = path.steps();
    let dt = path.dt;
    let mut states = Vec::with_capacity(steps + 1);
    let mut x = x0;
    states.push(x);
    let (mut dt_cost, mut bracket_cost) = (0.0f64, 0.0f64);
    for k in 0..steps {
        let s = StepState {
            step: k,
            t: k as f64 * dt,
            x,
            w: path.w[k],
            qv: path.qv[k],
            vertex: path.vertices[k],
            start_vertex: path.vertices[0],
        };
        let ua = control.dt_channel(&s);
        let ub = control.bracket_channel(&s);
        x += model.drift_dt(s.t, s.x, ua) * dt
            + model.drift_bracket(s.t, s.x, ub) * path.d_qv[k]
            + model.noise(s.t, s.x, ub) * path.d_w[k];
        dt_cost += model.running_cost_dt(s.t, s.x, ua) * dt;
        bracket_cost += model.running_cost_bracket(s.t, s.x, ub) * path.d_qv[k];
        if !x.is_finite() {
            return Err(Error::IntegrationBlowup { step: k });
        }
        if !(dt_cost.is_finite() && bracket_cost.is_finite()) {
            return Err(Error::Admissibility { step: k });
        }
        states.push(x);
    }
    let terminal = model.terminal_cost(x);
    if !terminal.is_finite() {
        return Err(Error::Admissibility { step: steps });
    }
    Ok(Trajectory {
        states,
        dt_cost,
        bracket_cost,
        terminal,
    })
}

/// Monte Carlo estimate of the cost functional `J(u)` over a fresh ensemble.
pub fn evaluate_cost(
    model: &dyn Dynamics,
    control: &dyn Control,
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    tag: u32,
    x0: f64,
) -> Result<Estimate> {
    cfg.validate(g)?;
    struct Acc {
        buf: PathSample,
        moments: RunningMoments,
        err: Option<Error>,
    }
    let acc = par_fold_paths(
        cfg.paths,
        || Acc {
            buf: PathSample::default(),
            moments: RunningMoments::new(),
            err: None,
        },
        |acc, i| {
            if acc.err.is_some() {
                return;
            }
            sample_path_into(&mut acc.buf, g, d, cfg, tag, i);
            match integrate_sde(model, control, &acc.buf, x0) {
                Ok(tr) => acc.moments.push(tr.total_cost()),
                Err(e) => acc.err = Some(e),
            }
        },
        |mut a, b| {
            a.moments = a.moments.merge(b.moments);
            a.err = a.err.or(b.err);
            a
        },
    );
    match acc.err {
        Some(e) => Err(e),
        None => Ok(acc.moments.estimate()),
    }
}

/// Cost estimates for several controls on one common path ensemble, with
/// paired cost gaps against the first control.
#[derive(Debug, Clone)]
pub struct CostTable {
    /// `J(u_k)` for each control, in input order.
    pub costs: Vec<Estimate>,
    /// Paired per-path mean of `J(u_k) − J(u_0)`; entry 0 is identically zero.
    pub gaps: Vec<Estimate>,
}

/// Evaluate several controls on common paths. The paired gap estimates have
/// far smaller standard errors than the difference of the marginal costs.
pub fn compare_costs(
    model: &dyn Dynamics,
    controls: &[&dyn Control],
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    tag: u32,
    x0: f64,
) -> Result<CostTable> {
    cfg.validate(g)?;
    if controls.is_empty() {
        return Err(Error::InvalidArgument("no controls to compare".into()));
    }
    struct Acc {
        buf: PathSample,
        costs: Vec<RunningMoments>,
        gaps: Vec<RunningMoments>,
        err: Option<Error>,
    }
    let k = controls.len();
    let acc = par_fold_paths(
        cfg.paths,
        || Acc {
            buf: PathSample::default(),
            costs: vec![RunningMoments::new(); k],
            gaps: vec![RunningMoments::new(); k],
            err: None,
        },
        |acc, i| {
            if acc.err.is_some() {
                return;
            }
            sample_path_into(&mut acc.buf, g, d, cfg, tag, i);
            let mut base = 0.0;
            for (j, u) in controls.iter().enumerate() {
                match integrate_sde(model, *u, &acc.buf, x0) {
                    Ok(tr) => {
                        let c = tr.total_cost();
                        if j == 0 {
                            base = c;
                        }
                        acc.costs[j].push(c);
                        acc.gaps[j].push(c - base);
                    }
                    Err(e) => {
                        acc.err = Some(e);
                        return;
                    }
                }
            }
        },
        |mut a, b| {
            for (x, y) in a.costs.iter_mut().zip(b.costs) {
                *x = x.merge(y);
            }
            for (x, y) in a.gaps.iter_mut().zip(b.gaps) {
                *x = x.merge(y);
            }
            a.err = a.err.or(b.err);
            a
        },
    );
    match acc.err {
        Some(e) => Err(e),
        None => Ok(CostTable {
            costs: acc.costs.iter().map(RunningMoments::estimate).collect(),
            gaps: acc.gaps.iter().map(RunningMoments::estimate).collect(),
        }),
    }
}

/// Which channel a spike replaces at a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelRule {
    /// Every spiked step perturbs the `dt`-channel only.
    DtOnly,
    /// Every spiked step perturbs the bracket/martingale channel only.
    BracketOnly,
    /// Even steps perturb the `dt`-channel, odd steps the bracket channel.
    Alternate,
}

impl ChannelRule {
    fn routes_dt(self, step: usize) -> bool {
        match self {
            ChannelRule::DtOnly => true,
            ChannelRule::BracketOnly => false,
            ChannelRule::Alternate => step.is_multiple_of(2),
        }
    }

    fn routes_bracket(self, step: usize) -> bool {
        match self {
            ChannelRule::DtOnly => false,
            ChannelRule::BracketOnly => true,
            ChannelRule::Alternate => step % 2 == 1,
        }
    }
}

/// The half-open perturbation window `[start, start + width)`.
#[derive(Debug, Clone, Copy)]
pub struct SpikeWindow {
    pub start: f64,
    pub width: f64,
}

impl SpikeWindow {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.start + self.width
    }
}

/// A base control overridden on a short window, channel by channel.
#[derive(Clone, Copy)]
pub struct SpikedControl<'a> {
    base: &'a dyn Control,
    dt_alt: &'a dyn Control,
    bracket_alt: &'a dyn Control,
    window: SpikeWindow,
    rule: ChannelRule,
}

/// Build the spike perturbation of `base`: inside `window`, steps routed to
/// the `dt`-channel read `dt_alt` there and steps routed to the bracket
/// channel read `bracket_alt` there; everything else falls through to
/// `base`.
pub fn spike_perturb<'a>(
    base: &'a dyn Control,
    dt_alt: &'a dyn Control,
    bracket_alt: &'a dyn Control,
    window: SpikeWindow,
    rule: ChannelRule,
) -> SpikedControl<'a> {
    SpikedControl {
        base,
        dt_alt,
        bracket_alt,
        window,
        rule,
    }
}

impl SpikedControl<'_> {
    /// Whether the perturbation is live at this step: the step lies in the
    /// window and the routed channel's value actually differs from the base.
    pub fn differs_at(&self, s: &StepState) -> bool {
        if !self.window.contains(s.t) {
            return false;
        }
        if self.rule.routes_dt(s.step) && self.dt_alt.dt_channel(s) != self.base.dt_channel(s) {
            return true;
        }
        self.rule.routes_bracket(s.step)
            && self.bracket_alt.bracket_channel(s) != self.base.bracket_channel(s)
    }

    pub fn window(&self) -> SpikeWindow {
        self.window
    }
}

impl Control for SpikedControl<'_> {
    fn dt_channel(&self, s: &StepState) -> f64 {
        if self.window.contains(s.t) && self.rule.routes_dt(s.step) {
            self.dt_alt.dt_channel(s)
        } else {
            self.base.dt_channel(s)
        }
    }

    fn bracket_channel(&self, s: &StepState) -> f64 {
        if self.window.contains(s.t) && self.rule.routes_bracket(s.step) {
            self.bracket_alt.bracket_channel(s)
        } else {
            self.base.bracket_channel(s)
        }
    }
}

/// First- and second-order expansion processes of the state around a base
/// control, on the same grid as the driving path.
#[derive(Debug, Clone)]
pub struct VariationPair {
    /// First-order process; length `steps + 1`, starts at 0.
    pub first: Vec<f64>,
    /// Second-order process; length `steps + 1`, starts at 0.
    pub second: Vec<f64>,
}

/// Integrate the two expansion processes along one path.
///
/// Both are driven by the base trajectory `base_traj` (which must come from
/// the same `path`): with `δφ(t) = φ(t, x̄(t), u^ε(t)) − φ(t, x̄(t), ū(t))`
/// and all derivatives at `(t, x̄(t), ū(t))`,
///
/// ```text
/// dy = ∂ₓb₁ y dt + ∂ₓb₂ y d⟨W⟩ + (δσ + ∂ₓσ y) dW
/// dz = (∂ₓb₁ z + δb₁ + ½ ∂ₓ²b₁ y²) dt
///    + (∂ₓb₂ z + δb₂ + ½ ∂ₓ²b₂ y²) d⟨W⟩
///    + (∂ₓσ z + δ(∂ₓσ) y + ½ ∂ₓ²σ y²) dW
/// ```
pub fn integrate_variations(
    model: &dyn Dynamics,
    base: &dyn Control,
    spiked: &dyn Control,
    path: &PathSample,
    base_traj: &Trajectory,
) -> Result<VariationPair> {
    let steps = path.steps();
    if base_traj.states.len() != steps + 1 {
        return Err(Error::InvalidArgument(
            "base trajectory does not match the driving path".into(),
        ));
    }
    let dt = path.dt;
    let mut first = Vec::with_capacity(steps + 1);
    let mut second = Vec::with_capacity(steps + 1);
    let (mut y, mut z) = (0.0f64, 0.0f64);
    first.push(y);
    second.push(z);
    for k in 0..steps {
        let s = StepState {
            step: k,
            t: k as f64 * dt,
            x: base_traj.states[k],
            w: path.w[k],
            qv: path.qv[k],
            vertex: path.vertices[k],
            start_vertex: path.vertices[0],
        };
        let (ua, ub) = (base.dt_channel(&s), base.bracket_channel(&s));
        let (va, vb) = (spiked.dt_channel(&s), spiked.bracket_channel(&s));
        let b1x = model.drift_dt_dx(s.t, s.x, ua);
        let b2x = model.drift_bracket_dx(s.t, s.x, ub);
        let sx = model.noise_dx(s.t, s.x, ub);
        let db1 = model.drift_dt(s.t, s.x, va) - model.drift_dt(s.t, s.x, ua);
        let db2 = model.drift_bracket(s.t, s.x, vb) - model.drift_bracket(s.t, s.x, ub);
        let dsig = model.noise(s.t, s.x, vb) - model.noise(s.t, s.x, ub);
        let dsig_x = model.noise_dx(s.t, s.x, vb) - sx;
        let b1xx = model.drift_dt_dxx(s.t, s.x, ua);
        let b2xx = model.drift_bracket_dxx(s.t, s.x, ub);
        let sxx = model.noise_dxx(s.t, s.x, ub);
        let (dqv, dw) = (path.d_qv[k], path.d_w[k]);
        let y2 = y * y;
        let ny = y + b1x * y * dt + b2x * y * dqv + (dsig + sx * y) * dw;
        let nz = z
            + (b1x * z + db1 + 0.5 * b1xx * y2) * dt
            + (b2x * z + db2 + 0.5 * b2xx * y2) * dqv
            + (sx * z + dsig_x * y + 0.5 * sxx * y2) * dw;
        if !(ny.is_finite() && nz.is_finite()) {
            return Err(Error::IntegrationBlowup { step: k });
        }
        y = ny;
        z = nz;
        first.push(y);
        second.push(z);
    }
    Ok(VariationPair { first, second })
}

/// Discount rate sufficient for the weighted a-priori bounds at order `2k`
/// with coefficient bound `m`: `8 k² (m+1)²`.
pub fn discount_rate(order: u32, bound: f64) -> f64 {
    let k = order as f64;
    8.0 * k * k * (bound + 1.0) * (bound + 1.0)
}

/// Pathwise value of the discounted norm of order `2k`:
/// `sup_t |φ_t|^{2k} e^{-κ⟨W⟩_t} + Σ_t |φ_t|^{2k} e^{-κ⟨W⟩_t} Δ⟨W⟩_t`
/// over the path's grid (left-endpoint rule for the bracket integral).
pub fn weighted_sup_norm(series: &[f64], path: &PathSample, kappa: f64, order: u32) -> f64 {
    assert_eq!(series.len(), path.steps() + 1, "series must live on the path grid");
    let p = 2 * order as i32;
    let mut sup = 0.0f64;
    let mut integral = 0.0f64;
    for (k, &phi) in series.iter().enumerate() {
        let weighted = phi.abs().powi(p) * (-kappa * path.qv[k]).exp();
        sup = sup.max(weighted);
        if k < path.steps() {
            integral += weighted * path.d_qv[k];
        }
    }
    sup + integral
}

/// Benchmark coefficient family for the spike-expansion decay measurement.
///
/// Chosen so that every term of the expansion is genuinely exercised:
/// smooth, bounded, state-dependent drifts with non-vanishing first and
/// second derivatives, and a noise coefficient whose control perturbation
/// is O(1) — the spike must enter through the martingale channel, otherwise
/// the state gap and the post-first-order remainder would decay at the same
/// rate and the order separation would be invisible. Running costs are zero
/// and the terminal cost is `x²`, so cost machinery stays out of the way.
/// All derivatives are analytic (no finite-difference noise in the
/// second-order expansion).
#[derive(Debug, Clone, Copy, Default)]
pub struct VariationBenchmark;

impl VariationBenchmark {
    /// Common starting state of the benchmark runs.
    pub const X0: f64 = 0.2;
    /// Left endpoint of the spike windows.
    pub const WINDOW_START: f64 = 0.25;
    /// Constant value the spike switches the control to.
    pub const SPIKE_VALUE: f64 = 1.0;
}

impl Dynamics for VariationBenchmark {
    fn drift_dt(&self, _t: f64, x: f64, u: f64) -> f64 {
        0.3 * x.tanh() + 0.5 * u
    }
    fn drift_bracket(&self, _t: f64, x: f64, u: f64) -> f64 {
        0.25 * x.cos() + 0.5 * u
    }
    fn noise(&self, _t: f64, x: f64, u: f64) -> f64 {
        0.5 + 0.3 * x.sin() * (1.0 + 0.2 * u) + 0.5 * u
    }
    fn terminal_cost(&self, x: f64) -> f64 {
        x * x
    }
    fn bound(&self) -> f64 {
        2.0
    }
    fn drift_dt_dx(&self, _t: f64, x: f64, _u: f64) -> f64 {
        let th = x.tanh();
        0.3 * (1.0 - th * th)
    }
    fn drift_dt_dxx(&self, _t: f64, x: f64, _u: f64) -> f64 {
        let th = x.tanh();
        -0.6 * th * (1.0 - th * th)
    }
    fn drift_bracket_dx(&self, _t: f64, x: f64, _u: f64) -> f64 {
        -0.25 * x.sin()
    }
    fn drift_bracket_dxx(&self, _t: f64, x: f64, _u: f64) -> f64 {
        -0.25 * x.cos()
    }
    fn noise_dx(&self, _t: f64, x: f64, u: f64) -> f64 {
        0.3 * x.cos() * (1.0 + 0.2 * u)
    }
    fn noise_dxx(&self, _t: f64, x: f64, u: f64) -> f64 {
        -0.3 * x.sin() * (1.0 + 0.2 * u)
    }
    fn terminal_cost_dx(&self, x: f64) -> f64 {
        2.0 * x
    }
    fn terminal_cost_dxx(&self, _x: f64) -> f64 {
        2.0
    }
}

/// Decay table of the discounted norms across a spike-width grid.
#[derive(Debug, Clone, serde::Serialize)]
pub struct VariationReport {
    pub epsilons: Vec<f64>,
    /// Norm of the state gap `ξ = x^ε − x̄`.
    pub state_gap: Vec<Estimate>,
    /// Norm of the first-order process `y`.
    pub first_order: Vec<Estimate>,
    /// Norm of `ξ − y`.
    pub after_first: Vec<Estimate>,
    /// Norm of `ξ − y − z`.
    pub after_second: Vec<Estimate>,
    /// Bracket mass the live spike set actually carries, per width.
    pub window_bracket_mass: Vec<Estimate>,
    /// Pearson correlation of terminal `ξ` and `y` across paths, per width.
    pub terminal_correlation: Vec<f64>,
    /// Log-log slopes of the three gap norms against the width grid.
    pub slope_state_gap: f64,
    pub slope_after_first: f64,
    pub slope_after_second: f64,
    /// The same slopes measured against the window bracket mass.
    pub slope_state_gap_vs_mass: f64,
    pub slope_after_first_vs_mass: f64,
    pub slope_after_second_vs_mass: f64,
}

/// Spike the base control on `[window_start, window_start + ε)` for each `ε`
/// and measure the decay of the expansion errors on one common ensemble.
///
/// Common driving noise across all widths makes the fitted slopes nearly
/// noise-free even at moderate path counts.
///
/// `kappa` is the discount rate of the weighted norms. The theoretical decay
/// orders hold for any sufficiently large rate — [`discount_rate`] gives the
/// sufficient constant — but the orders themselves are rate-independent, and
/// a heavy discount concentrates the Monte Carlo mass on the few paths with
/// the smallest early bracket, so slope measurements want a mild rate.
#[allow(clippy::too_many_arguments)]
pub fn variation_report(
    model: &dyn Dynamics,
    base: &dyn Control,
    dt_alt: &dyn Control,
    bracket_alt: &dyn Control,
    rule: ChannelRule,
    window_start: f64,
    epsilons: &[f64],
    order: u32,
    kappa: f64,
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    tag: u32,
    x0: f64,
) -> Result<VariationReport> {
    cfg.validate(g)?;
    if epsilons.is_empty() {
        return Err(Error::InvalidArgument("empty spike-width grid".into()));
    }
    if order == 0 {
        return Err(Error::InvalidArgument("norm order must be at least 1".into()));
    }
    if kappa < 0.0 || !kappa.is_finite() {
        return Err(Error::InvalidArgument("discount rate must be finite and non-negative".into()));
    }

    #[derive(Clone)]
    struct WidthAcc {
        state_gap: RunningMoments,
        first_order: RunningMoments,
        after_first: RunningMoments,
        after_second: RunningMoments,
        mass: RunningMoments,
        // Terminal cross moments for the ξ/y correlation.
        sx: f64,
        sy: f64,
        sxx: f64,
        syy: f64,
        sxy: f64,
    }
    impl WidthAcc {
        fn new() -> Self {
            WidthAcc {
                state_gap: RunningMoments::new(),
                first_order: RunningMoments::new(),
                after_first: RunningMoments::new(),
                after_second: RunningMoments::new(),
                mass: RunningMoments::new(),
                sx: 0.0,
                sy: 0.0,
                sxx: 0.0,
                syy: 0.0,
                sxy: 0.0,
            }
        }
        fn merge(mut self, o: Self) -> Self {
            self.state_gap = self.state_gap.merge(o.state_gap);
            self.first_order = self.first_order.merge(o.first_order);
            self.after_first = self.after_first.merge(o.after_first);
            self.after_second = self.after_second.merge(o.after_second);
            self.mass = self.mass.merge(o.mass);
            self.sx += o.sx;
            self.sy += o.sy;
            self.sxx += o.sxx;
            self.syy += o.syy;
            self.sxy += o.sxy;
            self
        }
    }
    struct Acc {
        buf: PathSample,
        widths: Vec<WidthAcc>,
        err: Option<Error>,
    }

    let acc = par_fold_paths(
        cfg.paths,
        || Acc {
            buf: PathSample::default(),
            widths: vec![WidthAcc::new(); epsilons.len()],
            err: None,
        },
        |acc, i| {
            if acc.err.is_some() {
                return;
            }
            sample_path_into(&mut acc.buf, g, d, cfg, tag, i);
            let path = &acc.buf;
            let base_traj = match integrate_sde(model, base, path, x0) {
                Ok(tr) => tr,
                Err(e) => {
                    acc.err = Some(e);
                    return;
                }
            };
            for (ei, &eps) in epsilons.iter().enumerate() {
                let window = SpikeWindow {
                    start: window_start,
                    width: eps,
                };
                let spiked = spike_perturb(base, dt_alt, bracket_alt, window, rule);
                let spike_traj = match integrate_sde(model, &spiked, path, x0) {
                    Ok(tr) => tr,
                    Err(e) => {
                        acc.err = Some(e);
                        return;
                    }
                };
                let pair = match integrate_variations(model, base, &spiked, path, &base_traj) {
                    Ok(p) => p,
                    Err(e) => {
                        acc.err = Some(e);
                        return;
                    }
                };
                let steps = path.steps();
                let mut xi = Vec::with_capacity(steps + 1);
                let mut gap1 = Vec::with_capacity(steps + 1);
                let mut gap2 = Vec::with_capacity(steps + 1);
                for k in 0..=steps {
                    let e = spike_traj.states[k] - base_traj.states[k];
                    xi.push(e);
                    gap1.push(e - pair.first[k]);
                    gap2.push(e - pair.first[k] - pair.second[k]);
                }
                let wa = &mut acc.widths[ei];
                wa.state_gap.push(weighted_sup_norm(&xi, path, kappa, order));
                wa.first_order
                    .push(weighted_sup_norm(&pair.first, path, kappa, order));
                wa.after_first.push(weighted_sup_norm(&gap1, path, kappa, order));
                wa.after_second.push(weighted_sup_norm(&gap2, path, kappa, order));
                let mut live_mass = 0.0;
                for k in 0..steps {
                    let s = StepState {
                        step: k,
                        t: k as f64 * path.dt,
                        x: base_traj.states[k],
                        w: path.w[k],
                        qv: path.qv[k],
                        vertex: path.vertices[k],
                        start_vertex: path.vertices[0],
                    };
                    if spiked.differs_at(&s) {
                        live_mass += path.d_qv[k];
                    }
                }
                wa.mass.push(live_mass);
                let (xt, yt) = (xi[steps], pair.first[steps]);
                wa.sx += xt;
                wa.sy += yt;
                wa.sxx += xt * xt;
                wa.syy += yt * yt;
                wa.sxy += xt * yt;
            }
        },
        |mut a, b| {
            a.widths = a
                .widths
                .into_iter()
                .zip(b.widths)
                .map(|(x, y)| x.merge(y))
                .collect();
            a.err = a.err.or(b.err);
            a
        },
    );
    if let Some(e) = acc.err {
        return Err(e);
    }

    let n = cfg.paths as f64;
    let collect = |f: fn(&WidthAcc) -> &RunningMoments| -> Vec<Estimate> {
        acc.widths.iter().map(|w| f(w).estimate()).collect()
    };
    let state_gap = collect(|w| &w.state_gap);
    let after_first = collect(|w| &w.after_first);
    let after_second = collect(|w| &w.after_second);
    let mass = collect(|w| &w.mass);
    let corr: Vec<f64> = acc
        .widths
        .iter()
        .map(|w| {
            let cov = w.sxy / n - (w.sx / n) * (w.sy / n);
            let vx = w.sxx / n - (w.sx / n) * (w.sx / n);
            let vy = w.syy / n - (w.sy / n) * (w.sy / n);
            cov / (vx * vy).sqrt()
        })
        .collect();

    let means = |es: &[Estimate]| -> Result<Vec<f64>> {
        if es.iter().any(|e| e.value <= 0.0) {
            return Err(Error::InvalidArgument(
                "a variation norm vanished; the spike never activates on this window".into(),
            ));
        }
        Ok(es.iter().map(|e| e.value).collect())
    };
    let v_gap = means(&state_gap)?;
    let v_after1 = means(&after_first)?;
    let v_after2 = means(&after_second)?;
    let v_mass = means(&mass)?;

    Ok(VariationReport {
        epsilons: epsilons.to_vec(),
        slope_state_gap: loglog_slope(epsilons, &v_gap),
        slope_after_first: loglog_slope(epsilons, &v_after1),
        slope_after_second: loglog_slope(epsilons, &v_after2),
        slope_state_gap_vs_mass: loglog_slope(&v_mass, &v_gap),
        slope_after_first_vs_mass: loglog_slope(&v_mass, &v_after1),
        slope_after_second_vs_mass: loglog_slope(&v_mass, &v_after2),
        state_gap,
        first_order: collect(|w| &w.first_order),
        after_first,
        after_second,
        window_bracket_mass: mass,
        terminal_correlation: corr,
    })
}

/// The two channel Hamiltonians at one point, given adjoint values `(p, q, P)`
/// and the base-control value `u_ref` entering the quadratic noise correction:
///
/// ```text
/// H₁ = b₁(t,x,u) p − f₁(t,x,u)
/// H₂ = b₂(t,x,u) p + σ(t,x,u) q − f₂(t,x,u) + ½ [σ(t,x,u) − σ(t,x,u_ref)]² P
/// ```
#[allow(clippy::too_many_arguments)]
pub fn hamiltonians(
    model: &dyn Dynamics,
    t: f64,
    x: f64,
    u: f64,
    u_ref: f64,
    p: f64,
    q: f64,
    big_p: f64,
) -> (f64, f64) {
    let h1 = model.drift_dt(t, x, u) * p - model.running_cost_dt(t, x, u);
    let ds = model.noise(t, x, u) - model.noise(t, x, u_ref);
    let h2 = model.drift_bracket(t, x, u) * p + model.noise(t, x, u) * q
        - model.running_cost_bracket(t, x, u)
        + 0.5 * ds * ds * big_p;
    (h1, h2)
}

/// Regression design for the backward conditional-expectation solves: cell
/// indicators of the walk position at a coarse level, optionally crossed with
/// the quadratic monomials in `(W, ⟨W⟩)`.
#[derive(Debug, Clone, Copy)]
pub struct BasisSpec {
    /// Gasket level whose cells partition the basis; must not exceed the
    /// walk level.
    pub cell_level: u32,
    /// Include `{W, ⟨W⟩, W², W⟨W⟩, ⟨W⟩²}` on top of each indicator.
    pub quadratic: bool,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec {
            cell_level: 3,
            quadratic: true,
        }
    }
}

/// Backward pair values along one path, on the solver's coarse time grid.
#[derive(Debug, Clone)]
pub struct AdjointPath {
    /// First-order values at the grid points; length `grid + 1`.
    pub p: Vec<f64>,
    /// Martingale density of the first-order pair on each grid interval.
    pub q: Vec<f64>,
    /// Second-order values at the grid points.
    pub big_p: Vec<f64>,
    /// Martingale density of the second-order pair on each grid interval.
    pub big_q: Vec<f64>,
    /// Realized `W` increment of each grid interval.
    pub d_w: Vec<f64>,
    /// Realized bracket increment of each grid interval — the measure under
    /// which the densities live, for diagnostics that integrate against it.
    pub d_qv: Vec<f64>,
}

/// Callback that fills `out[j]` with the state of one sampled path at fine
/// step `ks[j]`.
pub type StateFill<'a> = &'a (dyn Fn(&PathSample, &[usize], &mut [f64]) + Sync);

/// Forward states for the backward solve: integrate the controlled equation
/// from a starting point, or supply the state at each grid point directly —
/// e.g. from a closed-form solution — when the forward law is known in a
/// form the step-driven integrator cannot reproduce exactly.
pub enum ForwardStates<'a> {
    /// Integrate `dx = b₁dt + b₂d⟨W⟩ + σdW` under the control from `x0`.
    Integrate {
        /// Starting state of every path.
        x0: f64,
    },
    /// Evaluate the supplied map at the grid points of every path.
    Supplied(StateFill<'a>),
}

/// Output of [`solve_linear_adjoint`].
#[derive(Debug)]
pub struct AdjointSolution {
    /// Fine-step index of each grid point; length `grid + 1`.
    pub grid_steps: Vec<usize>,
    /// Times of the grid points.
    pub grid_times: Vec<f64>,
    /// Backward values per simulated path, in path-index order.
    pub paths: Vec<AdjointPath>,
}

/// Columns whose Gram diagonal falls below this share of the row count are
/// dropped from a cell's regression (e.g. the `W` columns at `t = 0`, where
/// every path still has `W = 0`).
const COLUMN_FLOOR: f64 = 1e-20;

fn cholesky(a: &mut [f64], n: usize) -> bool {
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return false;
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
    }
    true
}

fn chol_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

fn features(w: f64, q: f64, quadratic: bool, out: &mut [f64]) {
    out[0] = 1.0;
    out[1] = w;
    out[2] = q;
    if quadratic {
        out[3] = w * w;
        out[4] = w * q;
        out[5] = q * q;
    }
}

/// Expected bracket mass collected over `tau` steps from each vertex:
/// the backward recursion `A_{s+1}(v) = β_v + mean_{v'~v} A_s(v')` with
/// `β_v = dt·ρ(v)`. Exact for the discrete walk.
fn bracket_forecast(g: &PreGasket, d: &KusuokaDensity, dt: f64, tau: usize) -> Vec<f64> {
    let nv = g.vertex_count();
    let beta: Vec<f64> = d.rho.iter().map(|r| dt * r).collect();
    let mut cur = vec![0.0f64; nv];
    let mut next = vec![0.0f64; nv];
    for _ in 0..tau {
        for v in 0..nv {
            let nbrs = g.neighbors(v as u32);
            let mean: f64 = nbrs.iter().map(|&u| cur[u as usize]).sum::<f64>() / nbrs.len() as f64;
            next[v] = beta[v] + mean;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// Solve the linear backward (adjoint) pair along a base-control ensemble by
/// least-squares Monte Carlo on a coarse time grid.
///
/// Backward step from grid point `j+1` to `j`, per coarse cell: project the
/// continuation value onto the basis to get the conditional mean, recover the
/// martingale density from the projected product of the residual with the
/// grid increment of `W` (divided by the exact expected bracket mass of the
/// interval), then add the left-endpoint drift terms of the backward
/// equations. For coefficient families with no state dependence the drift
/// terms vanish and a constant terminal value propagates exactly.
#[allow(clippy::too_many_arguments)]
pub fn solve_linear_adjoint(
    model: &dyn Dynamics,
    control: &dyn Control,
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    tag: u32,
    forward: &ForwardStates<'_>,
    grid: usize,
    basis: BasisSpec,
) -> Result<AdjointSolution> {
    cfg.validate(g)?;
    let steps = cfg.steps();
    if grid == 0 || grid > steps {
        return Err(Error::InvalidArgument(format!(
            "grid size {grid} must lie in 1..={steps}"
        )));
    }
    if basis.cell_level > cfg.level {
        return Err(Error::InvalidArgument(format!(
            "basis cell level {} exceeds walk level {}",
            basis.cell_level, cfg.level
        )));
    }
    let n = cfg.paths as usize;
    let grid_steps: Vec<usize> = (0..=grid)
        .map(|j| ((j * steps) as f64 / grid as f64).round() as usize)
        .collect();
    let dt = cfg.dt();
    let grid_times: Vec<f64> = grid_steps.iter().map(|&k| k as f64 * dt).collect();
    // Every level-m cell index divides down to its level-c ancestor.
    let cell_shrink = 3usize.pow(cfg.level - basis.cell_level);
    let n_cells = 3usize.pow(basis.cell_level);

    // Forward pass: record (coarse cell, W, ⟨W⟩, x̄, vertex) at the grid
    // points and the W-increments over the grid intervals.
    struct Fwd {
        buf: PathSample,
        xg: Vec<f64>,
        cells: Vec<u16>,
        w: Vec<f64>,
        qv: Vec<f64>,
        x: Vec<f64>,
        vert: Vec<u32>,
        dw: Vec<f64>,
        err: Option<Error>,
    }
    let gp = grid + 1;
    let fwd = par_fold_paths(
        cfg.paths,
        || Fwd {
            buf: PathSample::default(),
            xg: vec![0.0; gp],
            cells: Vec::new(),
            w: Vec::new(),
            qv: Vec::new(),
            x: Vec::new(),
            vert: Vec::new(),
            dw: Vec::new(),
            err: None,
        },
        |acc, i| {
            if acc.err.is_some() {
                return;
            }
            sample_path_into(&mut acc.buf, g, d, cfg, tag, i);
            match forward {
                ForwardStates::Integrate { x0 } => {
                    let traj = match integrate_sde(model, control, &acc.buf, *x0) {
                        Ok(tr) => tr,
                        Err(e) => {
                            acc.err = Some(e);
                            return;
                        }
                    };
                    for (j, &k) in grid_steps.iter().enumerate() {
                        acc.xg[j] = traj.states[k];
                    }
                }
                ForwardStates::Supplied(f) => f(&acc.buf, &grid_steps, &mut acc.xg),
            }
            for (j, &k) in grid_steps.iter().enumerate() {
                let v = acc.buf.vertices[k];
                let cell = match g.cells_containing(v) {
                    Ok(cs) => (cs[0] as usize / cell_shrink) as u16,
                    Err(e) => {
                        acc.err = Some(e);
                        return;
                    }
                };
                acc.cells.push(cell);
                acc.w.push(acc.buf.w[k]);
                acc.qv.push(acc.buf.qv[k]);
                acc.x.push(acc.xg[j]);
                acc.vert.push(v);
                if j > 0 {
                    acc.dw.push(acc.buf.w[k] - acc.buf.w[grid_steps[j - 1]]);
                }
            }
        },
        |mut a, b| {
            a.cells.extend_from_slice(&b.cells);
            a.w.extend_from_slice(&b.w);
            a.qv.extend_from_slice(&b.qv);
            a.x.extend_from_slice(&b.x);
            a.vert.extend_from_slice(&b.vert);
            a.dw.extend_from_slice(&b.dw);
            a.err = a.err.or(b.err);
            a
        },
    );
    if let Some(e) = fwd.err {
        return Err(e);
    }

    let at = |i: usize, j: usize| i * gp + j;
    let n_feat = if basis.quadratic { 6 } else { 3 };

    // Exact expected bracket mass per grid interval, per start vertex.
    let forecasts: Vec<Vec<f64>> = (0..grid)
        .map(|j| bracket_forecast(g, d, dt, grid_steps[j + 1] - grid_steps[j]))
        .collect();

    let mut out_p = vec![0.0f64; n * gp];
    let mut out_q = vec![0.0f64; n * grid];
    let mut out_bp = vec![0.0f64; n * gp];
    let mut out_bq = vec![0.0f64; n * grid];
    // Realized rollout targets for the regressions: the terminal values plus
    // the drift adjustments accumulated so far. Regressing on realized values
    // rather than on the previous step's fits keeps each projection's error
    // from compounding through the backward chain.
    let mut roll_p = vec![0.0f64; n];
    let mut roll_bp = vec![0.0f64; n];
    for i in 0..n {
        let xt = fwd.x[at(i, grid)];
        roll_p[i] = -model.terminal_cost_dx(xt);
        roll_bp[i] = -model.terminal_cost_dxx(xt);
        out_p[at(i, grid)] = roll_p[i];
        out_bp[at(i, grid)] = roll_bp[i];
    }

    // Reusable per-cell row buckets.
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); n_cells];
    let mut phi = vec![0.0f64; n_feat];
    let mut pred_p = vec![0.0f64; n];
    let mut pred_bp = vec![0.0f64; n];
    let mut pred_qn = vec![0.0f64; n];
    let mut pred_bqn = vec![0.0f64; n];

    for j in (0..grid).rev() {
        for b in &mut buckets {
            b.clear();
        }
        for i in 0..n {
            buckets[fwd.cells[at(i, j)] as usize].push(i as u32);
        }
        for rows in buckets.iter().filter(|r| !r.is_empty()) {
            // Center the non-constant columns within the cell: the constant
            // column then absorbs the cell mean exactly, so a constant target
            // survives the solve to float accuracy whatever the conditioning.
            let mut shift = vec![0.0f64; n_feat];
            for &r in rows {
                let i = r as usize;
                features(fwd.w[at(i, j)], fwd.qv[at(i, j)], basis.quadratic, &mut phi);
                for a in 1..n_feat {
                    shift[a] += phi[a];
                }
            }
            for s in shift.iter_mut() {
                *s /= rows.len() as f64;
            }
            // Gram matrix and continuation-value projections.
            let mut gram = vec![0.0f64; n_feat * n_feat];
            let mut rhs_p = vec![0.0f64; n_feat];
            let mut rhs_bp = vec![0.0f64; n_feat];
            for &r in rows {
                let i = r as usize;
                features(fwd.w[at(i, j)], fwd.qv[at(i, j)], basis.quadratic, &mut phi);
                for a in 0..n_feat {
                    let fa = phi[a] - shift[a];
                    for b in 0..=a {
                        gram[a * n_feat + b] += fa * (phi[b] - shift[b]);
                    }
                    rhs_p[a] += fa * roll_p[i];
                    rhs_bp[a] += fa * roll_bp[i];
                }
            }
            // Drop columns with no support (their diagonal is ~0 relative to
            // the row count), then factor the surviving block.
            let floor = COLUMN_FLOOR * rows.len() as f64;
            let active: Vec<usize> = (0..n_feat)
                .filter(|&a| gram[a * n_feat + a] > floor)
                .collect();
            let na = active.len();
            if na == 0 {
                return Err(Error::BasisDegeneracy { step: j });
            }
            let mut l = vec![0.0f64; na * na];
            for (ai, &a) in active.iter().enumerate() {
                for (bi, &b) in active.iter().enumerate() {
                    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
                    l[ai * na + bi] = gram[hi * n_feat + lo];
                }
            }
            if !cholesky(&mut l, na) {
                return Err(Error::BasisDegeneracy { step: j });
            }
            let solve = |l: &[f64], rhs: &[f64]| -> Vec<f64> {
                let mut b: Vec<f64> = active.iter().map(|&a| rhs[a]).collect();
                chol_solve(l, na, &mut b);
                b
            };
            let coef_p = solve(&l, &rhs_p);
            let coef_bp = solve(&l, &rhs_bp);
            // Continuation means, then the martingale-density projections of
            // residual × ΔW.
            let mut rhs_q = vec![0.0f64; n_feat];
            let mut rhs_bq = vec![0.0f64; n_feat];
            for &r in rows {
                let i = r as usize;
                features(fwd.w[at(i, j)], fwd.qv[at(i, j)], basis.quadratic, &mut phi);
                let mut mp = 0.0;
                let mut mbp = 0.0;
                for (ai, &a) in active.iter().enumerate() {
                    mp += coef_p[ai] * (phi[a] - shift[a]);
                    mbp += coef_bp[ai] * (phi[a] - shift[a]);
                }
                pred_p[i] = mp;
                pred_bp[i] = mbp;
                let dw = fwd.dw[i * grid + j];
                let rp = (roll_p[i] - mp) * dw;
                let rbp = (roll_bp[i] - mbp) * dw;
                for &a in &active {
                    rhs_q[a] += (phi[a] - shift[a]) * rp;
                    rhs_bq[a] += (phi[a] - shift[a]) * rbp;
                }
            }
            let coef_q = solve(&l, &rhs_q);
            let coef_bq = solve(&l, &rhs_bq);
            for &r in rows {
                let i = r as usize;
                features(fwd.w[at(i, j)], fwd.qv[at(i, j)], basis.quadratic, &mut phi);
                let mut mq = 0.0;
                let mut mbq = 0.0;
                for (ai, &a) in active.iter().enumerate() {
                    mq += coef_q[ai] * (phi[a] - shift[a]);
                    mbq += coef_bq[ai] * (phi[a] - shift[a]);
                }
                pred_qn[i] = mq;
                pred_bqn[i] = mbq;
            }
        }
        // Pointwise backward update with left-endpoint drift terms.
        let fc = &forecasts[j];
        let delta_t = (grid_steps[j + 1] - grid_steps[j]) as f64 * dt;
        for i in 0..n {
            let s = StepState {
                step: grid_steps[j],
                t: grid_times[j],
                x: fwd.x[at(i, j)],
                w: fwd.w[at(i, j)],
                qv: fwd.qv[at(i, j)],
                vertex: fwd.vert[at(i, j)],
                start_vertex: fwd.vert[at(i, 0)],
            };
            let (ua, ub) = (control.dt_channel(&s), control.bracket_channel(&s));
            let bexp = fc[s.vertex as usize];
            let q = pred_qn[i] / bexp;
            let bq = pred_bqn[i] / bexp;
            let b1x = model.drift_dt_dx(s.t, s.x, ua);
            let b2x = model.drift_bracket_dx(s.t, s.x, ub);
            let sx = model.noise_dx(s.t, s.x, ub);
            let f1x = model.running_cost_dt_dx(s.t, s.x, ua);
            let f2x = model.running_cost_bracket_dx(s.t, s.x, ub);
            let inc_p =
                (b1x * pred_p[i] - f1x) * delta_t + (b2x * pred_p[i] + sx * q - f2x) * bexp;
            let p = pred_p[i] + inc_p;
            let b1xx = model.drift_dt_dxx(s.t, s.x, ua);
            let b2xx = model.drift_bracket_dxx(s.t, s.x, ub);
            let sxx = model.noise_dxx(s.t, s.x, ub);
            let f1xx = model.running_cost_dt_dxx(s.t, s.x, ua);
            let f2xx = model.running_cost_bracket_dxx(s.t, s.x, ub);
            let inc_bp = (2.0 * b1x * pred_bp[i] + b1xx * p - f1xx) * delta_t
                + ((2.0 * b2x + sx * sx) * pred_bp[i] + sx * bq + b2xx * p + sxx * q - f2xx)
                    * bexp;
            let bp = pred_bp[i] + inc_bp;
            out_p[at(i, j)] = p;
            out_q[i * grid + j] = q;
            out_bp[at(i, j)] = bp;
            out_bq[i * grid + j] = bq;
            roll_p[i] += inc_p;
            roll_bp[i] += inc_bp;
        }
    }

    let paths = (0..n)
        .map(|i| AdjointPath {
            p: (0..gp).map(|j| out_p[at(i, j)]).collect(),
            q: (0..grid).map(|j| out_q[i * grid + j]).collect(),
            big_p: (0..gp).map(|j| out_bp[at(i, j)]).collect(),
            big_q: (0..grid).map(|j| out_bq[i * grid + j]).collect(),
            d_w: (0..grid).map(|j| fwd.dw[i * grid + j]).collect(),
            d_qv: (0..grid)
                .map(|j| fwd.qv[at(i, j + 1)] - fwd.qv[at(i, j)])
                .collect(),
        })
        .collect();
    Ok(AdjointSolution {
        grid_steps,
        grid_times,
        paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{sample_path, StartLaw};
    use crate::dirichlet::kusuoka_density;
    use crate::gasket::build_pregasket;
    use crate::rng::tag;
    use crate::tol;

    /// b₁ = u, b₂ = u, σ = u, f₁ = (a/2)u², h = x²: the linear-quadratic
    /// test family used throughout.
    struct Quadratic {
        a: f64,
    }
    impl Dynamics for Quadratic {
        fn drift_dt(&self, _t: f64, _x: f64, u: f64) -> f64 {
            u
        }
        fn drift_bracket(&self, _t: f64, _x: f64, u: f64) -> f64 {
            u
        }
        fn noise(&self, _t: f64, _x: f64, u: f64) -> f64 {
            u
        }
        fn running_cost_dt(&self, _t: f64, _x: f64, u: f64) -> f64 {
            0.5 * self.a * u * u
        }
        fn terminal_cost(&self, x: f64) -> f64 {
            x * x
        }
        fn terminal_cost_dx(&self, x: f64) -> f64 {
            2.0 * x
        }
        fn terminal_cost_dxx(&self, _x: f64) -> f64 {
            2.0
        }
    }

    struct Still;
    impl Dynamics for Still {
        fn drift_dt(&self, _t: f64, _x: f64, _u: f64) -> f64 {
            0.0
        }
        fn drift_bracket(&self, _t: f64, _x: f64, _u: f64) -> f64 {
            0.0
        }
        fn noise(&self, _t: f64, _x: f64, _u: f64) -> f64 {
            0.0
        }
        fn terminal_cost(&self, x: f64) -> f64 {
            x
        }
    }

    fn setup(level: u32, paths: u64) -> (crate::gasket::PreGasket, KusuokaDensity, WalkConfig) {
        let g = build_pregasket(level).unwrap();
        let d = kusuoka_density(&g).unwrap();
        let cfg = WalkConfig {
            level,
            horizon: 1.0,
            start: StartLaw::Uniform,
            seed: 7,
            paths,
        };
        (g, d, cfg)
    }

    #[test]
    fn zero_dynamics_holds_state_and_cost() {
        let (g, d, cfg) = setup(2, 4);
        let path = sample_path(&g, &d, &cfg, tag::CONTROL, 0);
        let tr = integrate_sde(&Still, &Constant(3.0), &path, 0.7).unwrap();
        assert!(tr.states.iter().all(|&x| x == 0.7));
        assert_eq!(tr.total_cost(), 0.7);
    }

    #[test]
    fn unit_drift_advances_by_horizon() {
        struct Drift;
        impl Dynamics for Drift {
            fn drift_dt(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                1.0
            }
            fn drift_bracket(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                0.0
            }
            fn noise(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                0.0
            }
            fn terminal_cost(&self, _x: f64) -> f64 {
                0.0
            }
        }
        let (g, d, cfg) = setup(3, 1);
        let path = sample_path(&g, &d, &cfg, tag::CONTROL, 0);
        let tr = integrate_sde(&Drift, &Constant(0.0), &path, -1.0).unwrap();
        assert!((tr.terminal_state() - 0.0).abs() < tol::PATHWISE_F64);
    }

    #[test]
    fn unit_noise_reproduces_the_martingale() {
        struct Noise;
        impl Dynamics for Noise {
            fn drift_dt(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                0.0
            }
            fn drift_bracket(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                0.0
            }
            fn noise(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                1.0
            }
            fn terminal_cost(&self, _x: f64) -> f64 {
                0.0
            }
        }
        let (g, d, cfg) = setup(3, 1);
        let path = sample_path(&g, &d, &cfg, tag::CONTROL, 5);
        let tr = integrate_sde(&Noise, &Constant(0.0), &path, 0.0).unwrap();
        for (k, &x) in tr.states.iter().enumerate() {
            assert_eq!(x, path.w[k], "state must track W bitwise at step {k}");
        }
    }

    #[test]
    fn running_costs_integrate_the_clocks() {
        struct Clocks;
        impl Dynamics for Clocks {
            fn drift_dt(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                0.0
            }
            fn drift_bracket(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                0.0
            }
            fn noise(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                0.0
            }
            fn running_cost_dt(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                1.0
            }
            fn running_cost_bracket(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                1.0
            }
            fn terminal_cost(&self, _x: f64) -> f64 {
                0.0
            }
        }
        let (g, d, cfg) = setup(3, 1);
        let path = sample_path(&g, &d, &cfg, tag::CONTROL, 9);
        let tr = integrate_sde(&Clocks, &Constant(0.0), &path, 0.0).unwrap();
        assert!((tr.dt_cost - 1.0).abs() < tol::PATHWISE_F64);
        let qv_total = *path.qv.last().unwrap();
        assert!((tr.bracket_cost - qv_total).abs() < tol::PATHWISE_F64);
    }

    #[test]
    fn runaway_drift_reports_blowup_step() {
        struct Runaway;
        impl Dynamics for Runaway {
            fn drift_dt(&self, _t: f64, x: f64, _u: f64) -> f64 {
                x * 1e120
            }
            fn drift_bracket(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                0.0
            }
            fn noise(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                0.0
            }
            fn terminal_cost(&self, _x: f64) -> f64 {
                0.0
            }
        }
        let (g, d, cfg) = setup(1, 1);
        let path = sample_path(&g, &d, &cfg, tag::CONTROL, 0);
        match integrate_sde(&Runaway, &Constant(0.0), &path, 1.0) {
            Err(Error::IntegrationBlowup { .. }) => {}
            other => panic!("expected a blowup error, got {other:?}"),
        }
    }

    #[test]
    fn infinite_running_cost_reports_admissibility() {
        struct Gargantuan;
        impl Dynamics for Gargantuan {
            fn drift_dt(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                0.0
            }
            fn drift_bracket(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                0.0
            }
            fn noise(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                0.0
            }
            fn running_cost_dt(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                f64::MAX
            }
            fn running_cost_bracket(&self, _t: f64, _x: f64, _u: f64) -> f64 {
                f64::MAX
            }
            fn terminal_cost(&self, _x: f64) -> f64 {
                0.0
            }
        }
        let (g, d, cfg) = setup(2, 1);
        let path = sample_path(&g, &d, &cfg, tag::CONTROL, 0);
        match integrate_sde(&Gargantuan, &Constant(0.0), &path, 0.0) {
            Err(Error::Admissibility { .. }) => {}
            other => panic!("expected an admissibility error, got {other:?}"),
        }
    }

    #[test]
    fn central_difference_defaults_match_analytic_quadratics() {
        let m = Quadratic { a: 2.0 };
        // h = x²: h' = 2x, h'' = 2, exactly representable differences.
        assert!((m.terminal_cost_dx(1.5) - 3.0).abs() < 1e-9);
        assert!((m.terminal_cost_dxx(1.5) - 2.0).abs() < 1e-5);
        // f₁ = u² has no x-dependence.
        assert!(m.running_cost_dt_dx(0.3, 1.0, 2.0).abs() < 1e-12);
    }

    #[test]
    fn paired_comparison_of_identical_controls_is_exactly_zero() {
        let (g, d, cfg) = setup(2, 64);
        let u = Constant(0.5);
        let table = compare_costs(
            &Quadratic { a: 1.0 },
            &[&u, &u],
            &g,
            &d,
            &cfg,
            tag::TOURNAMENT,
            1.0,
        )
        .unwrap();
        assert_eq!(table.gaps[1].value, 0.0);
        assert_eq!(table.gaps[1].stderr, 0.0);
        assert_eq!(table.costs[0].value, table.costs[1].value);
    }

    #[test]
    fn zero_control_cost_is_terminal_only() {
        // With u ≡ 0 the state never moves: J = h(x0) exactly, zero variance.
        let (g, d, cfg) = setup(2, 128);
        let est = evaluate_cost(
            &Quadratic { a: 1.0 },
            &Constant(0.0),
            &g,
            &d,
            &cfg,
            tag::CONTROL,
            1.0,
        )
        .unwrap();
        assert_eq!(est.value, 1.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn spike_with_identical_alternative_never_activates() {
        let (g, d, cfg) = setup(2, 1);
        let path = sample_path(&g, &d, &cfg, tag::SPIKE, 3);
        let base = Constant(0.25);
        let window = SpikeWindow {
            start: 0.2,
            width: 0.3,
        };
        let spiked = spike_perturb(&base, &base, &base, window, ChannelRule::Alternate);
        for k in 0..path.steps() {
            let s = StepState {
                step: k,
                t: k as f64 * path.dt,
                x: 0.0,
                w: path.w[k],
                qv: path.qv[k],
                vertex: path.vertices[k],
                start_vertex: path.vertices[0],
            };
            assert!(!spiked.differs_at(&s));
            assert_eq!(spiked.dt_channel(&s), base.dt_channel(&s));
            assert_eq!(spiked.bracket_channel(&s), base.bracket_channel(&s));
        }
    }

    #[test]
    fn empty_window_leaves_the_control_untouched() {
        let base = Constant(0.0);
        let alt = Constant(1.0);
        let window = SpikeWindow {
            start: 0.5,
            width: 0.0,
        };
        let spiked = spike_perturb(&base, &alt, &alt, window, ChannelRule::DtOnly);
        let s = StepState {
            step: 12,
            t: 0.5,
            x: 0.0,
            w: 0.0,
            qv: 0.0,
            vertex: 0,
            start_vertex: 0,
        };
        assert!(!spiked.differs_at(&s));
        assert_eq!(spiked.dt_channel(&s), 0.0);
    }

    #[test]
    fn channel_rules_route_the_spike() {
        let base = Constant(0.0);
        let alt = Constant(1.0);
        let window = SpikeWindow {
            start: 0.0,
            width: 1.0,
        };
        let s = |step: usize| StepState {
            step,
            t: 0.5,
            x: 0.0,
            w: 0.0,
            qv: 0.0,
            vertex: 0,
            start_vertex: 0,
        };
        let dt_only = spike_perturb(&base, &alt, &alt, window, ChannelRule::DtOnly);
        assert_eq!(dt_only.dt_channel(&s(0)), 1.0);
        assert_eq!(dt_only.bracket_channel(&s(0)), 0.0);
        let br_only = spike_perturb(&base, &alt, &alt, window, ChannelRule::BracketOnly);
        assert_eq!(br_only.dt_channel(&s(0)), 0.0);
        assert_eq!(br_only.bracket_channel(&s(0)), 1.0);
        let alt_rule = spike_perturb(&base, &alt, &alt, window, ChannelRule::Alternate);
        assert_eq!(alt_rule.dt_channel(&s(0)), 1.0);
        assert_eq!(alt_rule.bracket_channel(&s(0)), 0.0);
        assert_eq!(alt_rule.dt_channel(&s(1)), 0.0);
        assert_eq!(alt_rule.bracket_channel(&s(1)), 1.0);
    }

    #[test]
    fn variations_vanish_without_a_live_spike() {
        let (g, d, cfg) = setup(2, 1);
        let path = sample_path(&g, &d, &cfg, tag::VARIATION, 1);
        let base = Constant(0.4);
        let model = Quadratic { a: 1.0 };
        let traj = integrate_sde(&model, &base, &path, 1.0).unwrap();
        let window = SpikeWindow {
            start: 0.3,
            width: 0.0,
        };
        let spiked = spike_perturb(&base, &base, &base, window, ChannelRule::Alternate);
        let pair = integrate_variations(&model, &base, &spiked, &path, &traj).unwrap();
        assert!(pair.first.iter().all(|&y| y == 0.0));
        assert!(pair.second.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn state_free_coefficients_make_first_variation_exact() {
        // With b₁, b₂, σ all state-free, every x-derivative vanishes:
        // ξ − y − z = ∫ δb₁ dt + ∫ δb₂ d⟨W⟩ − ∫ (δb₁ dt + δb₂ d⟨W⟩) = 0,
        // i.e. ξ = y + z pathwise up to float roundoff.
        let (g, d, cfg) = setup(3, 1);
        let path = sample_path(&g, &d, &cfg, tag::VARIATION, 2);
        let model = Quadratic { a: 1.0 };
        let base = Constant(0.0);
        let alt = Constant(1.0);
        let window = SpikeWindow {
            start: 0.25,
            width: 0.25,
        };
        let spiked = spike_perturb(&base, &alt, &alt, window, ChannelRule::Alternate);
        let traj = integrate_sde(&model, &base, &path, 1.0).unwrap();
        let spike_traj = integrate_sde(&model, &spiked, &path, 1.0).unwrap();
        let pair = integrate_variations(&model, &base, &spiked, &path, &traj).unwrap();
        for k in 0..=path.steps() {
            let xi = spike_traj.states[k] - traj.states[k];
            assert!(
                (xi - pair.first[k] - pair.second[k]).abs() < tol::PATHWISE_F64,
                "expansion must be exact at step {k}"
            );
        }
    }

    #[test]
    fn weighted_norm_discounts_and_integrates() {
        let (g, d, cfg) = setup(2, 1);
        let path = sample_path(&g, &d, &cfg, tag::VARIATION, 0);
        let ones = vec![1.0f64; path.steps() + 1];
        // κ = 0: sup term is 1, integral term is the total bracket.
        let v = weighted_sup_norm(&ones, &path, 0.0, 1);
        let qv_total = *path.qv.last().unwrap();
        assert!((v - (1.0 + qv_total)).abs() < tol::PATHWISE_F64);
        // Large κ kills everything after the first step.
        let v2 = weighted_sup_norm(&ones, &path, 1e6, 1);
        assert!((v2 - (1.0 + path.d_qv[0])).abs() < tol::PATHWISE_F64);
    }

    #[test]
    fn discount_rate_matches_the_quadratic_rule() {
        assert_eq!(discount_rate(1, 2.0), 72.0);
        assert_eq!(discount_rate(2, 0.0), 32.0);
    }

    #[test]
    fn benchmark_analytic_derivatives_match_central_differences() {
        // First differences cancel to ~f·ε/(2h) ≈ 1e-11; second differences
        // to ~f·ε/h² ≈ 1e-2·f — hence the two tolerances.
        let m = VariationBenchmark;
        let close1 = |a: f64, b: f64| (a - b).abs() < 1e-6;
        let close2 = |a: f64, b: f64| (a - b).abs() < 1e-2;
        for &x in &[-1.3, -0.2, 0.0, 0.4, 1.7] {
            for &u in &[-0.5, 0.0, 0.7] {
                assert!(close1(m.drift_dt_dx(0.0, x, u), central1(|s| m.drift_dt(0.0, s, u), x)));
                assert!(close2(
                    m.drift_dt_dxx(0.0, x, u),
                    central2(|s| m.drift_dt(0.0, s, u), x)
                ));
                assert!(close1(
                    m.drift_bracket_dx(0.0, x, u),
                    central1(|s| m.drift_bracket(0.0, s, u), x)
                ));
                assert!(close2(
                    m.drift_bracket_dxx(0.0, x, u),
                    central2(|s| m.drift_bracket(0.0, s, u), x)
                ));
                assert!(close1(m.noise_dx(0.0, x, u), central1(|s| m.noise(0.0, s, u), x)));
                assert!(close2(m.noise_dxx(0.0, x, u), central2(|s| m.noise(0.0, s, u), x)));
                assert!(close1(m.terminal_cost_dx(x), central1(|s| m.terminal_cost(s), x)));
                assert!(close2(m.terminal_cost_dxx(x), central2(|s| m.terminal_cost(s), x)));
            }
        }
    }

    #[test]
    fn hamiltonians_recover_the_quadratic_forms() {
        // For b₁ = b₂ = σ = u, f₁ = (a/2)u², f₂ = 0:
        // H₁ = up − (a/2)u², H₂ = u(p+q) + ½(u − ū)²P.
        let m = Quadratic { a: 2.0 };
        let (p, q, big_p) = (0.8, -0.8, -2.0);
        let (u, ubar) = (0.3, 0.1);
        let (h1, h2) = hamiltonians(&m, 0.5, 1.0, u, ubar, p, q, big_p);
        assert!((h1 - (u * p - u * u)).abs() < tol::EXACT_F64);
        let expect2 = u * (p + q) - (u - ubar) * (u - ubar);
        assert!((h2 - expect2).abs() < tol::EXACT_F64);
    }

    #[test]
    fn quadratic_hamiltonians_peak_at_their_argmax() {
        // Grid scan against the analytic maximizers u* = p/a for H₁ and
        // ū + (p+q)/(2|P|)·… — for P = −2: ū + (p+q)/2 for H₂.
        let m = Quadratic { a: 2.0 };
        let (p, q, big_p) = (1.3, -1.3, -2.0);
        let ubar = 0.2;
        let star1 = p / 2.0;
        let star2 = ubar + (p + q) / 2.0;
        let (h1s, _) = hamiltonians(&m, 0.0, 0.0, star1, ubar, p, q, big_p);
        let (_, h2s) = hamiltonians(&m, 0.0, 0.0, star2, ubar, p, q, big_p);
        for j in -20..=20 {
            let u = j as f64 * 0.1;
            let (h1, h2) = hamiltonians(&m, 0.0, 0.0, u, ubar, p, q, big_p);
            assert!(h1 <= h1s + tol::PATHWISE_F64);
            assert!(h2 <= h2s + tol::PATHWISE_F64);
        }
    }

    #[test]
    fn adjoint_solver_propagates_constant_curvature_exactly() {
        // h = x² under state-free coefficients: the second-order pair is
        // P ≡ −2, Q ≡ 0, and the solver must reproduce it to float accuracy.
        let (g, d, cfg) = setup(3, 512);
        let sol = solve_linear_adjoint(
            &Quadratic { a: 1.0 },
            &Constant(0.2),
            &g,
            &d,
            &cfg,
            tag::ADJOINT,
            &ForwardStates::Integrate { x0: 1.0 },
            8,
            BasisSpec {
                cell_level: 1,
                quadratic: true,
            },
        )
        .unwrap();
        assert_eq!(sol.grid_steps.len(), 9);
        assert_eq!(sol.paths.len(), 512);
        for path in &sol.paths {
            for &bp in &path.big_p {
                assert!((bp + 2.0).abs() < tol::EXACT_F64);
            }
            for &bq in &path.big_q {
                assert!(bq.abs() < tol::EXACT_F64);
            }
        }
    }

    #[test]
    fn adjoint_solver_pins_the_terminal_values() {
        let (g, d, cfg) = setup(3, 256);
        let sol = solve_linear_adjoint(
            &Quadratic { a: 1.0 },
            &Constant(0.3),
            &g,
            &d,
            &cfg,
            tag::ADJOINT,
            &ForwardStates::Integrate { x0: 1.0 },
            8,
            BasisSpec {
                cell_level: 1,
                quadratic: true,
            },
        )
        .unwrap();
        // Re-simulate the ensemble to recover terminal states.
        let model = Quadratic { a: 1.0 };
        for (i, ap) in sol.paths.iter().enumerate() {
            let path = sample_path(&g, &d, &cfg, tag::ADJOINT, i as u64);
            let tr = integrate_sde(&model, &Constant(0.3), &path, 1.0).unwrap();
            let want = -2.0 * tr.terminal_state();
            assert!((ap.p[8] - want).abs() < tol::EXACT_F64);
        }
    }

    #[test]
    fn adjoint_mean_is_constant_across_the_grid() {
        // State-free coefficients make the first-order pair a martingale, and
        // per-cell projection preserves the ensemble mean exactly.
        let (g, d, cfg) = setup(3, 512);
        let sol = solve_linear_adjoint(
            &Quadratic { a: 1.0 },
            &Constant(0.2),
            &g,
            &d,
            &cfg,
            tag::ADJOINT,
            &ForwardStates::Integrate { x0: 1.0 },
            8,
            BasisSpec {
                cell_level: 1,
                quadratic: true,
            },
        )
        .unwrap();
        let n = sol.paths.len() as f64;
        let means: Vec<f64> = (0..sol.grid_steps.len())
            .map(|j| sol.paths.iter().map(|p| p.p[j]).sum::<f64>() / n)
            .collect();
        let last = *means.last().unwrap();
        for m in &means {
            assert!(
                (m - last).abs() < 1e-8,
                "projection must conserve the mean: {means:?}"
            );
        }
    }

    #[test]
    fn degenerate_grid_is_rejected() {
        let (g, d, cfg) = setup(2, 8);
        let err = solve_linear_adjoint(
            &Quadratic { a: 1.0 },
            &Constant(0.0),
            &g,
            &d,
            &cfg,
            tag::ADJOINT,
            &ForwardStates::Integrate { x0: 1.0 },
            0,
            BasisSpec::default(),
        )
        .unwrap_err();
        assert!(err.is_usage());
    }

    #[test]
    fn variation_report_shapes_and_slope_signs() {
        let (g, d, cfg) = setup(3, 256);
        let model = Quadratic { a: 1.0 };
        let base = Constant(0.0);
        let alt = Constant(1.0);
        let eps = [0.25, 0.125, 0.0625];
        let rep = variation_report(
            &model,
            &base,
            &alt,
            &alt,
            ChannelRule::Alternate,
            0.25,
            &eps,
            1,
            1.0,
            &g,
            &d,
            &cfg,
            tag::VARIATION,
            1.0,
        )
        .unwrap();
        assert_eq!(rep.state_gap.len(), 3);
        assert!(rep.slope_state_gap > 0.0, "norms must shrink with the window");
        for c in &rep.terminal_correlation {
            assert!((-1.0..=1.0).contains(c));
        }
        for (e, m) in eps.iter().zip(&rep.window_bracket_mass) {
            // The live window carries roughly its share of the total bracket
            // mass (≈ 2ε), certainly between 0 and the whole path budget.
            assert!(m.value > 0.0 && m.value < 2.0 * e * 4.0 + 1.0);
        }
    }
}

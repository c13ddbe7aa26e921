//! Nearest-neighbour diffusion on the level-`m` graph and its
//! one-dimensional driving martingale.
//!
//! # The walk and its clock
//!
//! One step of the simple random walk on the level-`m` graph represents a
//! time slice `dt = 5^{-m}` (the walk crossing time scales as `5^m`). The
//! walk chooses a neighbour uniformly; outer corners have degree 2, so paths
//! reflect there automatically.
//!
//! The scalar martingale `W` carried along a path earns quadratic variation
//! at the clock rate of the Kusuoka density at the current vertex:
//!
//! ```text
//! d<W>_j = 5^{-m} * rho_m(X_j),        dW_j = +/- sqrt(d<W>_j)
//! ```
//!
//! with independent fair signs, so `dW^2 = d<W>` holds exactly step by step.
//!
//! The degree-proportional vertex mass `nu_m` is stationary for the walk,
//! and `sum_v nu_m(v) rho_m(v) = 2` exactly, so in and only in stationarity
//! `E <W>_t = 2t`: the discrete model reproduces the Revuz pairing of the
//! Kusuoka measure against its own density without any tuning constant.
//!
//! # Estimators
//!
//! All estimators stream paths through fixed-size blocks (see
//! [`crate::rng::par_fold_paths`]); results are bit-identical for any worker
//! count.

use crate::dirichlet::KusuokaDensity;
use crate::error::{Error, Result};
use crate::gasket::PreGasket;
use crate::rng::{par_fold_paths, path_rng};
use crate::stats::{top_share, Estimate, RunningMoments};
use rand::Rng;

/// Initial law of the walk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartLaw {
    /// Uniform over all level-`m` vertices.
    Uniform,
    /// Uniform over non-corner vertices.
    UniformInterior,
    /// Deterministic start at one vertex.
    Point(u32),
}

/// Walk ensemble configuration.
#[derive(Debug, Clone, Copy)]
pub struct WalkConfig {
    pub level: u32,
    pub horizon: f64,
    pub start: StartLaw,
    pub seed: u64,
    pub paths: u64,
}

impl WalkConfig {
    /// Time step `5^{-m}`.
    pub fn dt(&self) -> f64 {
        5f64.powi(-(self.level as i32))
    }

    /// Number of steps covering the horizon.
    pub fn steps(&self) -> usize {
        (self.horizon * 5f64.powi(self.level as i32)).ceil() as usize
    }

    pub fn validate(&self, g: &PreGasket) -> Result<()> {
        if self.level != g.level() {
            return Err(Error::InvalidArgument(format!(
                "config level {} does not match graph level {}",
                self.level,
                g.level()
            )));
        }
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "horizon must be positive and finite, got {}",
                self.horizon
            )));
        }
        if self.paths == 0 {
            return Err(Error::InvalidArgument("path count must be positive".into()));
        }
        if let StartLaw::Point(v) = self.start {
            g.check_vertex(v)?;
        }
        Ok(())
    }
}

/// One simulated path: per-step records plus cumulative processes.
///
/// Invariants, step by step: `d_w[j]^2 == d_qv[j]` bitwise (the squared
/// increment IS the bracket increment), and `d_qv[j]` equals
/// `dt * rho(vertices[j])` up to one rounding of the square root.
#[derive(Debug, Clone, Default)]
pub struct PathSample {
    pub level: u32,
    pub dt: f64,
    /// Vertex before each step, plus the final vertex; length `steps + 1`.
    pub vertices: Vec<u32>,
    /// Martingale increments; length `steps`.
    pub d_w: Vec<f64>,
    /// Bracket increments; length `steps`.
    pub d_qv: Vec<f64>,
    /// Cumulative martingale, `w[0] = 0`; length `steps + 1`.
    pub w: Vec<f64>,
    /// Cumulative bracket, `qv[0] = 0`; length `steps + 1`.
    pub qv: Vec<f64>,
}

impl PathSample {
    pub fn steps(&self) -> usize {
        self.d_w.len()
    }

    fn reset(&mut self, cfg: &WalkConfig) {
        let k = cfg.steps();
        self.level = cfg.level;
        self.dt = cfg.dt();
        self.vertices.clear();
        self.d_w.clear();
        self.d_qv.clear();
        self.w.clear();
        self.qv.clear();
        self.vertices.reserve(k + 1);
        self.d_w.reserve(k);
        self.d_qv.reserve(k);
        self.w.reserve(k + 1);
        self.qv.reserve(k + 1);
    }

    /// Per-step CSV: `step,vertex,dW,dQV`, one row per step with the vertex
    /// the step departs from.
    pub fn csv(&self) -> String {
        let mut out = String::from("step,vertex,dW,dQV\n");
        for j in 0..self.steps() {
            out.push_str(&format!(
                "{j},{},{:.17e},{:.17e}\n",
                self.vertices[j], self.d_w[j], self.d_qv[j]
            ));
        }
        out
    }
}

fn start_vertex(g: &PreGasket, cfg: &WalkConfig, rng: &mut impl Rng) -> u32 {
    match cfg.start {
        StartLaw::Point(v) => v,
        StartLaw::Uniform => rng.random_range(0..g.vertex_count() as u32),
        StartLaw::UniformInterior => loop {
            let v = rng.random_range(0..g.vertex_count() as u32);
            if !g.is_corner(v) {
                return v;
            }
        },
    }
}

/// Simulate path `index` of the ensemble into a reusable buffer.
///
/// The RNG draw order per step — sign of `dW`, then neighbour choice — is
/// part of the reproducibility contract.
pub fn sample_path_into(
    s: &mut PathSample,
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    tag: u32,
    index: u64,
) {
    s.reset(cfg);
    let mut rng = path_rng(cfg.seed, tag, index);
    let mut v = start_vertex(g, cfg, &mut rng);
    let dt = cfg.dt();
    let (mut w, mut qv) = (0.0f64, 0.0f64);
    s.vertices.push(v);
    s.w.push(0.0);
    s.qv.push(0.0);
    for _ in 0..cfg.steps() {
        let root = (dt * d.rho[v as usize]).sqrt();
        let dw = if rng.random_bool(0.5) { root } else { -root };
        let dqv = dw * dw;
        let nbrs = g.neighbors(v);
        v = nbrs[rng.random_range(0..nbrs.len())];
        w += dw;
        qv += dqv;
        s.d_w.push(dw);
        s.d_qv.push(dqv);
        s.vertices.push(v);
        s.w.push(w);
        s.qv.push(qv);
    }
}

/// Simulate one path, allocating its sample.
pub fn sample_path(
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    tag: u32,
    index: u64,
) -> PathSample {
    let mut s = PathSample::default();
    sample_path_into(&mut s, g, d, cfg, tag, index);
    s
}

/// One exact transition of the walk's law: `dist -> dist P` with
/// `P(v, w) = 1/deg(v)` on neighbours. Useful as a noise-free oracle.
pub fn markov_step(g: &PreGasket, dist: &[f64]) -> Vec<f64> {
    let mut next = vec![0.0f64; dist.len()];
    for (v, mass) in dist.iter().enumerate() {
        let share = mass / g.degree(v as u32) as f64;
        for &n in g.neighbors(v as u32) {
            next[n as usize] += share;
        }
    }
    next
}

/// Map a time to its step index `round(t / dt)`, clamped to the horizon.
fn step_index(cfg: &WalkConfig, t: f64) -> usize {
    let k = (t / cfg.dt()).round() as usize;
    k.min(cfg.steps())
}

/// Mean of the cumulative bracket `<W>_t` at each requested time.
pub fn estimate_bracket_at(
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    times: &[f64],
    tag: u32,
) -> Result<Vec<Estimate>> {
    cfg.validate(g)?;
    for &t in times {
        if !(t > 0.0 && t <= cfg.horizon * (1.0 + 1e-12)) {
            return Err(Error::InvalidArgument(format!(
                "time {t} outside (0, horizon = {}]",
                cfg.horizon
            )));
        }
    }
    let idx: Vec<usize> = times.iter().map(|&t| step_index(cfg, t)).collect();
    struct Acc {
        moments: Vec<RunningMoments>,
        buf: PathSample,
    }
    let out = par_fold_paths(
        cfg.paths,
        || Acc { moments: vec![RunningMoments::new(); idx.len()], buf: PathSample::default() },
        |acc, i| {
            sample_path_into(&mut acc.buf, g, d, cfg, tag, i);
            for (m, &k) in acc.moments.iter_mut().zip(&idx) {
                m.push(acc.buf.qv[k]);
            }
        },
        |mut a, b| {
            for (x, y) in a.moments.iter_mut().zip(b.moments) {
                *x = x.merge(y);
            }
            a
        },
    );
    Ok(out.moments.iter().map(RunningMoments::estimate).collect())
}

/// Martingale identity panel at several times from one shared ensemble:
/// mean `W_t` (zero in law), the paired mean of `W_t² − ⟨W⟩_t` (zero in
/// law, since each squared increment IS a bracket increment and the fair
/// signs kill the cross terms), and mean `⟨W⟩_t` (the additive-functional
/// pairing puts its value at `2t` under the uniform start law).
#[derive(Debug, Clone, serde::Serialize)]
pub struct MartingalePanel {
    pub times: Vec<f64>,
    pub w_mean: Vec<Estimate>,
    pub w_square_minus_bracket: Vec<Estimate>,
    pub bracket_mean: Vec<Estimate>,
}

pub fn martingale_panel(
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    times: &[f64],
    tag: u32,
) -> Result<MartingalePanel> {
    cfg.validate(g)?;
    for &t in times {
        if !(t > 0.0 && t <= cfg.horizon * (1.0 + 1e-12)) {
            return Err(Error::InvalidArgument(format!(
                "time {t} outside (0, horizon = {}]",
                cfg.horizon
            )));
        }
    }
    let idx: Vec<usize> = times.iter().map(|&t| step_index(cfg, t)).collect();
    struct Acc {
        w: Vec<RunningMoments>,
        gap: Vec<RunningMoments>,
        qv: Vec<RunningMoments>,
        buf: PathSample,
    }
    let out = par_fold_paths(
        cfg.paths,
        || Acc {
            w: vec![RunningMoments::new(); idx.len()],
            gap: vec![RunningMoments::new(); idx.len()],
            qv: vec![RunningMoments::new(); idx.len()],
            buf: PathSample::default(),
        },
        |acc, i| {
            sample_path_into(&mut acc.buf, g, d, cfg, tag, i);
            for (j, &k) in idx.iter().enumerate() {
                let w = acc.buf.w[k];
                let qv = acc.buf.qv[k];
                acc.w[j].push(w);
                acc.gap[j].push(w * w - qv);
                acc.qv[j].push(qv);
            }
        },
        |mut a, b| {
            for (x, y) in a.w.iter_mut().zip(b.w) {
                *x = x.merge(y);
            }
            for (x, y) in a.gap.iter_mut().zip(b.gap) {
                *x = x.merge(y);
            }
            for (x, y) in a.qv.iter_mut().zip(b.qv) {
                *x = x.merge(y);
            }
            a
        },
    );
    Ok(MartingalePanel {
        times: times.to_vec(),
        w_mean: out.w.iter().map(RunningMoments::estimate).collect(),
        w_square_minus_bracket: out.gap.iter().map(RunningMoments::estimate).collect(),
        bracket_mean: out.qv.iter().map(RunningMoments::estimate).collect(),
    })
}

/// Minimum time resolvable by the kernel estimator: ten steps.
pub fn kernel_min_time(level: u32) -> f64 {
    10.0 * 5f64.powi(-(level as i32))
}

/// On-diagonal heat-kernel estimate at several times from one ensemble
/// started at `x`: `p_hat(t, x, x) = P(X_t = x) / nu_m(x)`.
pub fn kernel_curve(
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    x: u32,
    times: &[f64],
    tag: u32,
) -> Result<Vec<Estimate>> {
    kernel_hits(g, d, cfg, x, x, times, tag, 0)
}

/// Single-time on-diagonal kernel estimate.
pub fn estimate_kernel_on_diagonal(
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    x: u32,
    t: f64,
    tag: u32,
) -> Result<Estimate> {
    Ok(kernel_curve(g, d, cfg, x, &[t], tag)?.remove(0))
}

/// Two-sided kernel estimates for a symmetry check: returns
/// `(P_x(X_t = y) / nu(y), P_y(X_t = x) / nu(x))` from two independent
/// ensembles of `cfg.paths` paths each.
pub fn kernel_pair(
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    x: u32,
    y: u32,
    t: f64,
    tag: u32,
) -> Result<(Estimate, Estimate)> {
    let forward = kernel_hits(g, d, cfg, x, y, &[t], tag, 0)?.remove(0);
    let backward = kernel_hits(g, d, cfg, y, x, &[t], tag, cfg.paths)?.remove(0);
    Ok((forward, backward))
}

#[allow(clippy::too_many_arguments)]
fn kernel_hits(
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    from: u32,
    to: u32,
    times: &[f64],
    tag: u32,
    index_offset: u64,
) -> Result<Vec<Estimate>> {
    let cfg = WalkConfig { start: StartLaw::Point(from), ..*cfg };
    cfg.validate(g)?;
    g.check_vertex(to)?;
    let min = kernel_min_time(cfg.level);
    for &t in times {
        if t < min {
            return Err(Error::TimeBelowResolution { t, min, level: cfg.level });
        }
        if t > cfg.horizon * (1.0 + 1e-12) {
            return Err(Error::InvalidArgument(format!(
                "time {t} beyond horizon {}",
                cfg.horizon
            )));
        }
    }
    let idx: Vec<usize> = times.iter().map(|&t| step_index(&cfg, t)).collect();
    let weight = 1.0 / d.nu[to as usize];
    struct Acc {
        moments: Vec<RunningMoments>,
        buf: PathSample,
    }
    let out = par_fold_paths(
        cfg.paths,
        || Acc { moments: vec![RunningMoments::new(); idx.len()], buf: PathSample::default() },
        |acc, i| {
            sample_path_into(&mut acc.buf, g, d, &cfg, tag, index_offset + i);
            for (m, &k) in acc.moments.iter_mut().zip(&idx) {
                let hit = if acc.buf.vertices[k] == to { weight } else { 0.0 };
                m.push(hit);
            }
        },
        |mut a, b| {
            for (x, y) in a.moments.iter_mut().zip(b.moments) {
                *x = x.merge(y);
            }
            a
        },
    );
    Ok(out.moments.iter().map(RunningMoments::estimate).collect())
}

/// Restriction of bracket mass to a step subset.
#[derive(Debug, Clone)]
pub enum StepPredicate {
    /// Count every step.
    All,
    /// Count steps departing from a masked vertex.
    VertexMask(Vec<bool>),
}

impl StepPredicate {
    fn test(&self, v: u32) -> bool {
        match self {
            StepPredicate::All => true,
            StepPredicate::VertexMask(m) => m[v as usize],
        }
    }
}

/// One bracket-mass moment: `E[ ( integral over I of 1_E d<W> )^order ]`.
#[derive(Debug, Clone, Copy)]
pub struct MomentQuery {
    /// Moment order; any positive real.
    pub order: f64,
    /// Half-open time window `[a, b)`; a step counts when its left endpoint
    /// lies inside.
    pub interval: (f64, f64),
}

/// Estimate several bracket moments from one shared ensemble.
pub fn estimate_moments(
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    queries: &[MomentQuery],
    pred: &StepPredicate,
    tag: u32,
) -> Result<Vec<Estimate>> {
    cfg.validate(g)?;
    if let StepPredicate::VertexMask(m) = pred {
        if m.len() != g.vertex_count() {
            return Err(Error::ValueTableSize { got: m.len(), want: g.vertex_count() });
        }
    }
    let dt = cfg.dt();
    let steps = cfg.steps();
    let mut ranges = Vec::with_capacity(queries.len());
    for q in queries {
        let (a, b) = q.interval;
        if !(q.order.is_finite() && q.order > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "moment order must be positive, got {}",
                q.order
            )));
        }
        if !(0.0 <= a && a < b && b <= cfg.horizon * (1.0 + 1e-12)) {
            return Err(Error::InvalidArgument(format!(
                "interval [{a}, {b}) must sit inside [0, horizon = {}]",
                cfg.horizon
            )));
        }
        let ja = ((a / dt) - 1e-9).ceil().max(0.0) as usize;
        let jb = (((b / dt) - 1e-9).ceil() as usize).min(steps);
        ranges.push((ja, jb));
    }
    struct Acc {
        moments: Vec<RunningMoments>,
        buf: PathSample,
    }
    let out = par_fold_paths(
        cfg.paths,
        || Acc { moments: vec![RunningMoments::new(); queries.len()], buf: PathSample::default() },
        |acc, i| {
            sample_path_into(&mut acc.buf, g, d, cfg, tag, i);
            for ((m, q), &(ja, jb)) in acc.moments.iter_mut().zip(queries).zip(&ranges) {
                let mass = match pred {
                    StepPredicate::All => acc.buf.qv[jb] - acc.buf.qv[ja],
                    StepPredicate::VertexMask(_) => (ja..jb)
                        .filter(|&j| pred.test(acc.buf.vertices[j]))
                        .map(|j| acc.buf.d_qv[j])
                        .sum(),
                };
                m.push(mass.powf(q.order));
            }
        },
        |mut a, b| {
            for (x, y) in a.moments.iter_mut().zip(b.moments) {
                *x = x.merge(y);
            }
            a
        },
    );
    Ok(out.moments.iter().map(RunningMoments::estimate).collect())
}

/// First and second bracket moments over shrinking initial windows
/// `[0, eps)`, with their log-log slopes.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MomentScaling {
    pub epsilons: Vec<f64>,
    pub first: Vec<Estimate>,
    pub second: Vec<Estimate>,
    /// Log-log slope of `E <W>_eps` against `eps`.
    pub slope_first: f64,
    /// Log-log slope of the second moment.
    pub slope_second: f64,
    /// Slope of the ratio `m2 / m1` — the gap between the two.
    pub ratio_slope: f64,
}

pub fn moment_scaling(
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    epsilons: &[f64],
    tag: u32,
) -> Result<MomentScaling> {
    if epsilons.len() < 2 {
        return Err(Error::InvalidArgument("need at least two window widths".into()));
    }
    let mut queries = Vec::new();
    for &e in epsilons {
        queries.push(MomentQuery { order: 1.0, interval: (0.0, e) });
        queries.push(MomentQuery { order: 2.0, interval: (0.0, e) });
    }
    let all = estimate_moments(g, d, cfg, &queries, &StepPredicate::All, tag)?;
    let first: Vec<Estimate> = all.iter().step_by(2).copied().collect();
    let second: Vec<Estimate> = all.iter().skip(1).step_by(2).copied().collect();
    let m1: Vec<f64> = first.iter().map(|e| e.value).collect();
    let m2: Vec<f64> = second.iter().map(|e| e.value).collect();
    let slope_first = crate::stats::loglog_slope(epsilons, &m1);
    let slope_second = crate::stats::loglog_slope(epsilons, &m2);
    Ok(MomentScaling {
        epsilons: epsilons.to_vec(),
        first,
        second,
        slope_first,
        slope_second,
        ratio_slope: slope_second - slope_first,
    })
}

/// Distribution of bracket mass across equal time bins, averaged over paths
/// after sorting each path's bin shares in decreasing order.
#[derive(Debug, Clone, serde::Serialize)]
pub struct SingularityProfile {
    pub level: u32,
    pub bins: usize,
    /// Mean sorted share per bin, descending; sums to 1.
    pub mean_sorted_share: Vec<f64>,
    /// Share of total bracket mass in the top tenth of bins (per path,
    /// averaged), read off the sorted shares with fractional-rank
    /// interpolation.
    pub top_decile: Estimate,
}

pub fn singularity_profile(
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    bins: usize,
    tag: u32,
) -> Result<SingularityProfile> {
    cfg.validate(g)?;
    let steps = cfg.steps();
    if bins == 0 || !steps.is_multiple_of(bins) {
        return Err(Error::UnevenBins { bins, steps });
    }
    let chunk = steps / bins;
    struct Acc {
        share_sum: Vec<f64>,
        top: RunningMoments,
        buf: PathSample,
        scratch: Vec<f64>,
    }
    let out = par_fold_paths(
        cfg.paths,
        || Acc {
            share_sum: vec![0.0; bins],
            top: RunningMoments::new(),
            buf: PathSample::default(),
            scratch: vec![0.0; bins],
        },
        |acc, i| {
            sample_path_into(&mut acc.buf, g, d, cfg, tag, i);
            let total = acc.buf.qv[steps];
            for b in 0..bins {
                let mass = acc.buf.qv[(b + 1) * chunk] - acc.buf.qv[b * chunk];
                acc.scratch[b] = mass / total;
            }
            acc.top.push(top_share(&acc.scratch, 0.1));
            acc.scratch
                .sort_by(|a, b| b.partial_cmp(a).expect("shares are finite"));
            for (s, x) in acc.share_sum.iter_mut().zip(&acc.scratch) {
                *s += x;
            }
        },
        |mut a, b| {
            for (x, y) in a.share_sum.iter_mut().zip(b.share_sum) {
                *x += y;
            }
            a.top = a.top.merge(b.top);
            a
        },
    );
    let n = cfg.paths as f64;
    Ok(SingularityProfile {
        level: cfg.level,
        bins,
        mean_sorted_share: out.share_sum.iter().map(|s| s / n).collect(),
        top_decile: out.top.estimate(),
    })
}

/// Stability probe of `E[exp(kappa <W>_t)]`: the estimate at `cfg.paths`
/// paths, the estimate after doubling the sample (the first half reused),
/// and whether the doubled estimate stays within two 95% half-widths of the
/// base one.
#[derive(Debug, Clone, Copy)]
pub struct BracketCheck {
    pub base: Estimate,
    pub doubled: Estimate,
    pub stable: bool,
}

pub fn exp_bracket_check(
    g: &PreGasket,
    d: &KusuokaDensity,
    cfg: &WalkConfig,
    kappa: f64,
    t: f64,
    tag: u32,
) -> Result<BracketCheck> {
    cfg.validate(g)?;
    if !kappa.is_finite() {
        return Err(Error::InvalidArgument(format!("kappa must be finite, got {kappa}")));
    }
    if !(t > 0.0 && t <= cfg.horizon * (1.0 + 1e-12)) {
        return Err(Error::InvalidArgument(format!(
            "time {t} outside (0, horizon = {}]",
            cfg.horizon
        )));
    }
    let k = step_index(cfg, t);
    struct Acc {
        m: RunningMoments,
        buf: PathSample,
    }
    let run = |paths: u64| -> RunningMoments {
        par_fold_paths(
            paths,
            || Acc { m: RunningMoments::new(), buf: PathSample::default() },
            |acc, i| {
                sample_path_into(&mut acc.buf, g, d, cfg, tag, i);
                acc.m.push((kappa * acc.buf.qv[k]).exp());
            },
            |mut a, b| {
                a.m = a.m.merge(b.m);
                a
            },
        )
        .m
    };
    let base = run(cfg.paths).estimate();
    let doubled = run(2 * cfg.paths).estimate();
    let stable = (doubled.value - base.value).abs() < 2.0 * 1.96 * base.stderr;
    Ok(BracketCheck { base, doubled, stable })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dirichlet::kusuoka_density;
    use crate::gasket::build_pregasket;
    use crate::rng::tag;
    use crate::tol;

    fn setup(level: u32) -> (PreGasket, KusuokaDensity) {
        let g = build_pregasket(level).unwrap();
        let d = kusuoka_density(&g).unwrap();
        (g, d)
    }

    fn cfg(level: u32, horizon: f64, paths: u64) -> WalkConfig {
        WalkConfig { level, horizon, start: StartLaw::Uniform, seed: 7, paths }
    }

    #[test]
    fn path_increments_satisfy_exact_invariants() {
        let (g, d) = setup(3);
        let c = cfg(3, 1.0, 1);
        for i in 0..16 {
            let s = sample_path(&g, &d, &c, tag::WALK, i);
            assert_eq!(s.steps(), 125);
            for j in 0..s.steps() {
                // The squared increment IS the stored bracket increment.
                assert_eq!(s.d_w[j] * s.d_w[j], s.d_qv[j]);
                // And it matches the vertex clock rate up to one rounding.
                let beta = c.dt() * d.rho[s.vertices[j] as usize];
                assert!((s.d_qv[j] - beta).abs() <= 1e-15 * beta.max(1e-300));
                // Steps move to a neighbour, never stay.
                assert!(g.neighbors(s.vertices[j]).contains(&s.vertices[j + 1]));
            }
            // Cumulative arrays are prefix sums.
            assert!((s.w[s.steps()] - s.d_w.iter().sum::<f64>()).abs() < 1e-12);
            assert!((s.qv[s.steps()] - s.d_qv.iter().sum::<f64>()).abs() < 1e-12);
        }
    }

    #[test]
    fn point_start_is_honoured_and_corners_reflect() {
        let (g, d) = setup(2);
        let corner = g.corner_ids()[1];
        let c = WalkConfig { start: StartLaw::Point(corner), ..cfg(2, 0.5, 1) };
        for i in 0..8 {
            let s = sample_path(&g, &d, &c, tag::WALK, i);
            assert_eq!(s.vertices[0], corner);
            // A corner has exactly two (non-corner) exits.
            assert!(!g.is_corner(s.vertices[1]));
        }
    }

    #[test]
    fn interior_start_never_picks_corners() {
        let (g, d) = setup(2);
        let c = WalkConfig { start: StartLaw::UniformInterior, ..cfg(2, 0.1, 1) };
        for i in 0..64 {
            let s = sample_path(&g, &d, &c, tag::WALK, i);
            assert!(!g.is_corner(s.vertices[0]));
        }
    }

    #[test]
    fn stationary_law_is_preserved_by_exact_transition() {
        let (g, d) = setup(3);
        let next = markov_step(&g, &d.nu);
        for (v, (a, b)) in next.iter().zip(&d.nu).enumerate() {
            assert!((a - b).abs() < tol::EXACT_F64, "vertex {v}");
        }
    }

    #[test]
    fn bracket_mean_matches_exact_chain() {
        // Noise-free oracle: iterate the law and accumulate expected clock.
        let (g, d) = setup(2);
        let c = cfg(2, 1.0, 4_000);
        let nv = g.vertex_count();
        let mut dist = vec![1.0 / nv as f64; nv];
        let mut expected = 0.0f64;
        let k = c.steps();
        let t_half = step_index(&c, 0.5);
        let mut expected_half = 0.0;
        for j in 0..k {
            if j == t_half {
                expected_half = expected;
            }
            let rate: f64 =
                dist.iter().enumerate().map(|(v, p)| p * c.dt() * d.rho[v]).sum();
            expected += rate;
            dist = markov_step(&g, &dist);
        }
        let est = estimate_bracket_at(&g, &d, &c, &[0.5, 1.0], tag::WALK).unwrap();
        for (e, want) in est.iter().zip([expected_half, expected]) {
            assert!(
                (e.value - want).abs() < tol::MC_SIGMAS * e.stderr,
                "estimate {} vs oracle {want} (se {})",
                e.value,
                e.stderr
            );
        }
    }

    #[test]
    fn kernel_estimate_matches_exact_chain() {
        let (g, d) = setup(2);
        let c = WalkConfig { horizon: 0.5, ..cfg(2, 0.5, 20_000) };
        let x = g.corner_ids()[0];
        let t = 0.5;
        let est = estimate_kernel_on_diagonal(&g, &d, &c, x, t, tag::KERNEL).unwrap();
        // Exact return probability.
        let nv = g.vertex_count();
        let mut dist = vec![0.0; nv];
        dist[x as usize] = 1.0;
        for _ in 0..step_index(&c, t) {
            dist = markov_step(&g, &dist);
        }
        let want = dist[x as usize] / d.nu[x as usize];
        assert!(
            (est.value - want).abs() < tol::MC_SIGMAS * est.stderr,
            "kernel {} vs oracle {want} (se {})",
            est.value,
            est.stderr
        );
    }

    #[test]
    fn kernel_rejects_unresolvable_times() {
        let (g, d) = setup(3);
        let c = cfg(3, 1.0, 10);
        let t = 5.0 * c.dt();
        let err = estimate_kernel_on_diagonal(&g, &d, &c, 0, t, tag::KERNEL).unwrap_err();
        match err {
            Error::TimeBelowResolution { min, level, .. } => {
                assert_eq!(level, 3);
                assert!((min - kernel_min_time(3)).abs() < 1e-18);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn moment_of_full_window_matches_bracket_mean() {
        let (g, d) = setup(2);
        let c = cfg(2, 1.0, 2_000);
        let m = estimate_moments(
            &g,
            &d,
            &c,
            &[MomentQuery { order: 1.0, interval: (0.0, 1.0) }],
            &StepPredicate::All,
            tag::MOMENT,
        )
        .unwrap();
        let b = estimate_bracket_at(&g, &d, &c, &[1.0], tag::MOMENT).unwrap();
        assert!((m[0].value - b[0].value).abs() < 1e-12);
    }

    #[test]
    fn vertex_masked_moments_split_the_total() {
        let (g, d) = setup(2);
        let c = cfg(2, 1.0, 500);
        let mask: Vec<bool> = (0..g.vertex_count() as u32).map(|v| g.is_corner(v)).collect();
        let inverse: Vec<bool> = mask.iter().map(|b| !b).collect();
        let q = MomentQuery { order: 1.0, interval: (0.0, 1.0) };
        let at = estimate_moments(&g, &d, &c, &[q], &StepPredicate::VertexMask(mask), tag::MOMENT)
            .unwrap();
        let away =
            estimate_moments(&g, &d, &c, &[q], &StepPredicate::VertexMask(inverse), tag::MOMENT)
                .unwrap();
        let all = estimate_moments(&g, &d, &c, &[q], &StepPredicate::All, tag::MOMENT).unwrap();
        assert!((at[0].value + away[0].value - all[0].value).abs() < 1e-12);
    }

    #[test]
    fn second_moment_dominates_squared_first() {
        let (g, d) = setup(3);
        let c = cfg(3, 0.5, 2_000);
        let s = moment_scaling(&g, &d, &c, &[0.5, 0.25, 0.125], tag::MOMENT).unwrap();
        for (m1, m2) in s.first.iter().zip(&s.second) {
            assert!(m2.value >= m1.value * m1.value - 1e-12);
        }
    }

    #[test]
    fn singularity_profile_requires_divisible_bins() {
        let (g, d) = setup(3);
        let c = cfg(3, 1.0, 100);
        let err = singularity_profile(&g, &d, &c, 7, tag::SINGULARITY).unwrap_err();
        assert!(matches!(err, Error::UnevenBins { bins: 7, steps: 125 }));
    }

    #[test]
    fn singularity_profile_shares_are_sorted_and_sum_to_one() {
        let (g, d) = setup(3);
        let c = cfg(3, 1.0, 400);
        let p = singularity_profile(&g, &d, &c, 25, tag::SINGULARITY).unwrap();
        let total: f64 = p.mean_sorted_share.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        for pair in p.mean_sorted_share.windows(2) {
            assert!(pair[0] >= pair[1] - 1e-15);
        }
        // The top decile of bins must carry at least a tenth of the mass.
        assert!(p.top_decile.value >= 0.1);
        assert!(p.top_decile.value <= 1.0);
    }

    #[test]
    fn exp_bracket_check_is_stable_at_small_kappa() {
        let (g, d) = setup(3);
        let c = cfg(3, 1.0, 2_000);
        let chk = exp_bracket_check(&g, &d, &c, 0.5, 1.0, tag::BRACKET_CHECK).unwrap();
        assert!(chk.stable);
        // E[exp(kappa <W>)] >= exp(kappa E<W>): Jensen, with huge margin.
        assert!(chk.base.value > 1.0);
    }

    #[test]
    fn estimators_are_deterministic() {
        let (g, d) = setup(3);
        let c = cfg(3, 1.0, 512);
        let a = estimate_bracket_at(&g, &d, &c, &[1.0], tag::WALK).unwrap();
        let b = estimate_bracket_at(&g, &d, &c, &[1.0], tag::WALK).unwrap();
        assert_eq!(a[0].value.to_bits(), b[0].value.to_bits());
        assert_eq!(a[0].stderr.to_bits(), b[0].stderr.to_bits());
    }

    #[test]
    fn path_csv_has_one_row_per_step() {
        let (g, d) = setup(2);
        let c = cfg(2, 0.2, 1);
        let s = sample_path(&g, &d, &c, tag::WALK, 0);
        let csvtext = s.csv();
        let lines: Vec<&str> = csvtext.lines().collect();
        assert_eq!(lines[0], "step,vertex,dW,dQV");
        assert_eq!(lines.len(), s.steps() + 1);
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn config_validation_names_the_problem() {
        let (g, _) = setup(2);
        let bad = WalkConfig { horizon: -1.0, ..cfg(2, 1.0, 10) };
        assert!(bad.validate(&g).unwrap_err().to_string().contains("horizon"));
        let bad = WalkConfig { paths: 0, ..cfg(2, 1.0, 10) };
        assert!(bad.validate(&g).unwrap_err().to_string().contains("path count"));
        let bad = WalkConfig { start: StartLaw::Point(10_000), ..cfg(2, 1.0, 10) };
        assert!(matches!(bad.validate(&g).unwrap_err(), Error::UnknownVertex { .. }));
    }
}

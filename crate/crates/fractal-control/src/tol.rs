//! Centralised numerical tolerances.
//!
//! Every tolerance used by the library or its tests lives here with a note on
//! where it comes from, so a change in one experiment cannot silently loosen
//! another.

/// Identities that hold in exact arithmetic and are evaluated in `f64`:
/// a few ulps of headroom over machine epsilon accumulated across O(10^3)
/// operations.
pub const EXACT_F64: f64 = 1e-10;

/// Algebraic identities evaluated pathwise in `f64` over O(10^5) steps
/// (e.g. a Hamiltonian gap that is a perfect square): rounding noise only.
pub const PATHWISE_F64: f64 = 1e-12;

/// Number of standard errors for a Monte-Carlo consistency check.
/// Three standard errors give a ~0.3% false-alarm rate per check.
pub const MC_SIGMAS: f64 = 3.0;

/// Two-sided 99% normal quantile, used for confidence intervals on
/// sign checks.
pub const Z_99: f64 = 2.575_829_303_549_0;

/// Relative drift allowed for an exponential-martingale mean at unit
/// horizon with 10^5 paths (discretisation bias plus sampling noise).
pub const EXP_MARTINGALE_REL: f64 = 0.03;

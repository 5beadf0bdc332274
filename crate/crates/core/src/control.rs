//! The defragmentation control algorithm: a two-state machine balancing the
//! fragmentation ratio against the fraction of time spent defragmenting.
//!
//! In the waiting state the controller wakes every `poll_interval` (500 ms
//! by default) and checks fragmentation against `f_ub`. Crossing the bound
//! starts a run of partial passes, each budgeted at `alpha` times the
//! current heap extent. After a pass of duration `T`, the controller sleeps
//! `T / o_ub` to keep the defrag duty cycle under the overhead bound, and
//! returns to waiting once fragmentation drops below `f_lb` or a pass runs
//! out of movable bytes.
//!
//! Timestamps are plain nanosecond counts so the same machine runs under a
//! virtual clock in simulation and a monotonic clock live.

use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("fragmentation bounds must satisfy 1 < f_lb < f_ub (got {lb}, {ub})")]
    BadFragBounds { lb: f64, ub: f64 },
    #[error("overhead bounds must satisfy 0 <= o_lb <= o_ub <= 1 with o_ub > 0 (got {lb}, {ub})")]
    BadOverheadBounds { lb: f64, ub: f64 },
    #[error("alpha must lie in (0, 1], got {0}")]
    BadAlpha(f64),
    #[error("o_ub must be positive to compute a back-off sleep")]
    ZeroOverheadBound,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlParams {
    pub f_lb: f64,
    pub f_ub: f64,
    pub o_lb: f64,
    pub o_ub: f64,
    pub alpha: f64,
    pub poll_interval: Duration,
}

impl Default for ControlParams {
    fn default() -> Self {
        ControlParams {
            f_lb: 1.2,
            f_ub: 1.5,
            o_lb: 0.01,
            o_ub: 0.05,
            alpha: 0.25,
            poll_interval: Duration::from_millis(500),
        }
    }
}

impl ControlParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.f_lb > 1.0 && self.f_lb < self.f_ub) {
            return Err(ConfigError::BadFragBounds {
                lb: self.f_lb,
                ub: self.f_ub,
            });
        }
        if !(0.0..=1.0).contains(&self.o_lb)
            || !(0.0..=1.0).contains(&self.o_ub)
            || self.o_lb > self.o_ub
            || self.o_ub <= 0.0
        {
            return Err(ConfigError::BadOverheadBounds {
                lb: self.o_lb,
                ub: self.o_ub,
            });
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(ConfigError::BadAlpha(self.alpha));
        }
        Ok(())
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mode {
    Waiting,
    Defragmenting,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Waiting => write!(f, "waiting"),
            Mode::Defragmenting => write!(f, "defragmenting"),
        }
    }
}

/// What the driver should do next.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    Sleep(Duration),
    RunPartialPass { budget_bytes: u64 },
}

#[derive(Clone, Copy, Debug)]
struct PassOutcome {
    duration: Duration,
    moved_bytes: u64,
}

#[derive(Clone, Debug)]
pub struct ControlState {
    pub mode: Mode,
    pub next_wake_ns: u64,
    last_pass: Option<PassOutcome>,
    pub cumulative_defrag: Duration,
    pub passes_run: u64,
}

impl Default for ControlState {
    fn default() -> Self {
        Self::new()
    }
}

impl ControlState {
    pub fn new() -> ControlState {
        ControlState {
            mode: Mode::Waiting,
            next_wake_ns: 0,
            last_pass: None,
            cumulative_defrag: Duration::ZERO,
            passes_run: 0,
        }
    }

    /// The driver reports every completed pass here before ticking again.
    pub fn note_pass(&mut self, duration: Duration, moved_bytes: u64) {
        self.last_pass = Some(PassOutcome {
            duration,
            moved_bytes,
        });
        self.cumulative_defrag += duration;
        self.passes_run += 1;
    }
}

/// The back-off formula: sleep long enough that the pass just taken amounts
/// to at most an `o_ub` fraction of wall time.
pub fn compute_sleep(t_defrag: Duration, o_ub: f64) -> Result<Duration, ConfigError> {
    if o_ub <= 0.0 {
        return Err(ConfigError::ZeroOverheadBound);
    }
    Ok(Duration::from_nanos(
        (t_defrag.as_nanos() as f64 / o_ub) as u64,
    ))
}

/// Floor applied to every emitted sleep so a zero-duration pass cannot spin
/// the controller.
pub const SLEEP_FLOOR: Duration = Duration::from_millis(1);

/// One controller decision. Call when `now_ns >= state.next_wake_ns`, and
/// again immediately after reporting a pass via [`ControlState::note_pass`].
pub fn control_tick(
    state: &mut ControlState,
    params: &ControlParams,
    frag: f64,
    extent_bytes: u64,
    now_ns: u64,
) -> Action {
    debug_assert!(now_ns >= state.next_wake_ns || state.last_pass.is_some());
    let budget = || ((params.alpha * extent_bytes as f64) as u64).max(1);
    let sleep = |state: &mut ControlState, d: Duration| {
        let d = d.max(SLEEP_FLOOR);
        state.next_wake_ns = now_ns + d.as_nanos() as u64;
        Action::Sleep(d)
    };
    match state.mode {
        Mode::Waiting => {
            if frag > params.f_ub {
                state.mode = Mode::Defragmenting;
                state.last_pass = None;
                Action::RunPartialPass {
                    budget_bytes: budget(),
                }
            } else {
                sleep(state, params.poll_interval)
            }
        }
        Mode::Defragmenting => {
            if let Some(last) = state.last_pass.take() {
                // Just finished a pass: either we are done (fragmentation
                // under the lower bound, or nothing moved) or we back off
                // proportionally to what the pass cost.
                if frag < params.f_lb || last.moved_bytes == 0 {
                    state.mode = Mode::Waiting;
                    sleep(state, params.poll_interval)
                } else {
                    let mut back_off = compute_sleep(last.duration, params.o_ub)
                        .expect("params validated: o_ub > 0");
                    if params.o_lb > 0.0 {
                        // o_lb caps how long we are allowed to loaf.
                        let cap = Duration::from_nanos(
                            (last.duration.as_nanos() as f64 / params.o_lb) as u64,
                        );
                        back_off = back_off.min(cap);
                    }
                    sleep(state, back_off)
                }
            } else if frag < params.f_lb {
                state.mode = Mode::Waiting;
                sleep(state, params.poll_interval)
            } else {
                Action::RunPartialPass {
                    budget_bytes: budget(),
                }
            }
        }
    }
}

//! Adaptive Dormand–Prince 5(4) integration of the guidance equation
//! `dq/dt = v(q, t)`, forward or backward in time.
//!
//! The stepper is generic over small fixed-size systems so the same code
//! drives plain trajectories and trajectories augmented with `ln ρ`.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::wavefield::{Point2, Superposition, WaveError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub max_steps: u64,
    pub node_retry_jitter: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { rel_tol: 1e-10, abs_tol: 1e-12, max_step: 1.0, max_steps: 1_000_000, node_retry_jitter: 1e-9 }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.rel_tol > 0.0 && self.abs_tol > 0.0) {
            return Err("integrator tolerances must be positive".into());
        }
        if !(self.max_step > 0.0) {
            return Err("integrator max_step must be positive".into());
        }
        if self.max_steps < 1 {
            return Err("integrator max_steps must be at least 1".into());
        }
        if !(self.node_retry_jitter >= 0.0 && self.node_retry_jitter.is_finite()) {
            return Err("node_retry_jitter must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrateError {
    #[error("trajectory from ({x}, {y}) hit a wave-function node near t = {t}")]
    NodeEncountered { x: f64, y: f64, t: f64 },
    #[error("step limit of {steps} reached at t = {t}")]
    StepLimitExceeded { steps: u64, t: f64 },
    #[error("step size underflow at t = {t}")]
    StepSizeUnderflow { t: f64 },
}

/// Accepted point of a traced trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub t: f64,
    pub q: Point2,
}

/// Right-hand side of an `N`-dimensional first-order system.
pub trait OdeSystem<const N: usize> {
    fn rhs(&self, t: f64, y: &[f64; N]) -> Result<[f64; N], WaveError>;
}

#[derive(Debug)]
enum StepFailure {
    Node(f64),
    Limit(u64, f64),
    Underflow(f64),
}

// Dormand–Prince 5(4) tableau.
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

// PI controller constants (Hairer & Wanner's DOPRI5 defaults).
const BETA: f64 = 0.04;
const EXPO1: f64 = 0.2 - BETA * 0.75;
const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

fn combine<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for i in 0..N {
        let mut acc = 0.0;
        for (a, k) in terms {
            acc += a * k[i];
        }
        out[i] += h * acc;
    }
    out
}

fn scaled_norm<const N: usize>(v: &[f64; N], y: &[f64; N], cfg: &IntegratorConfig) -> f64 {
    let mut s = 0.0;
    for i in 0..N {
        let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs();
        s += (v[i] / sc).powi(2);
    }
    (s / N as f64).sqrt()
}

fn initial_step<const N: usize, S: OdeSystem<N>>(
    sys: &S,
    t0: f64,
    y0: &[f64; N],
    f0: &[f64; N],
    span: f64,
    cfg: &IntegratorConfig,
) -> Result<f64, WaveError> {
    let d0 = scaled_norm(y0, y0, cfg);
    let d1 = scaled_norm(f0, y0, cfg);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span.abs());
    let dir = span.signum();
    let y1 = combine(y0, dir * h0, &[(1.0, f0)]);
    let f1 = sys.rhs(t0 + dir * h0, &y1)?;
    let mut diff = [0.0; N];
    for i in 0..N {
        diff[i] = f1[i] - f0[i];
    }
    let d2 = scaled_norm(&diff, y0, cfg) / h0;
    let dmax = d1.max(d2);
    let h1 = if dmax <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / dmax).powf(0.2) };
    Ok((100.0 * h0).min(h1).min(cfg.max_step).min(span.abs()))
}

/// Integrates `sys` from `t0` to `t1`, calling `observe` at every accepted
/// step (including the initial point).
fn solve<const N: usize, S: OdeSystem<N>>(
    sys: &S,
    y0: [f64; N],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
    mut observe: Option<&mut dyn FnMut(f64, &[f64; N])>,
) -> Result<[f64; N], StepFailure> {
    if let Some(obs) = observe.as_mut() {
        obs(t0, &y0);
    }
    if t0 == t1 {
        return Ok(y0);
    }
    let span = t1 - t0;
    let dir = span.signum();
    let node = |e: WaveError| match e {
        WaveError::Node { t, .. } => StepFailure::Node(t),
        _ => StepFailure::Node(f64::NAN),
    };

    let mut t = t0;
    let mut y = y0;
    let mut k1 = sys.rhs(t, &y).map_err(node)?;
    let mut h = initial_step(sys, t0, &y0, &k1, span, cfg).map_err(node)?;
    let mut fac_old: f64 = 1e-4;
    let mut rejected_last = false;
    let mut steps: u64 = 0;

    loop {
        if steps >= cfg.max_steps {
            return Err(StepFailure::Limit(steps, t));
        }
        let mut last = false;
        if (t + dir * h - t1) * dir >= 0.0 {
            h = (t1 - t).abs();
            last = true;
        }
        if h <= 1e-15 * t.abs().max(1.0) {
            return Err(StepFailure::Underflow(t));
        }
        let hs = dir * h;
        steps += 1;

        let k2 = sys.rhs(t + C2 * hs, &combine(&y, hs, &[(A21, &k1)])).map_err(node)?;
        let k3 = sys.rhs(t + C3 * hs, &combine(&y, hs, &[(A31, &k1), (A32, &k2)])).map_err(node)?;
        let k4 = sys
            .rhs(t + C4 * hs, &combine(&y, hs, &[(A41, &k1), (A42, &k2), (A43, &k3)]))
            .map_err(node)?;
        let k5 = sys
            .rhs(t + C5 * hs, &combine(&y, hs, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]))
            .map_err(node)?;
        let k6 = sys
            .rhs(t + hs, &combine(&y, hs, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]))
            .map_err(node)?;
        let y_new = combine(&y, hs, &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
        let t_new = if last { t1 } else { t + hs };
        let k7 = sys.rhs(t_new, &y_new).map_err(node)?;

        let mut err = 0.0;
        for i in 0..N {
            let e = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let sc = cfg.abs_tol + cfg.rel_tol * y[i].abs().max(y_new[i].abs());
            err += (e / sc).powi(2);
        }
        let err = (err / N as f64).sqrt();
        let fac11 = err.powf(EXPO1);

        if err <= 1.0 {
            let fac = (fac11 / fac_old.powf(BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
            let mut h_new = h / fac;
            if rejected_last {
                h_new = h_new.min(h);
            }
            fac_old = err.max(1e-4);
            t = t_new;
            y = y_new;
            k1 = k7;
            rejected_last = false;
            if let Some(obs) = observe.as_mut() {
                obs(t, &y);
            }
            if last {
                return Ok(y);
            }
            h = h_new.min(cfg.max_step);
        } else {
            h /= (fac11 / SAFETY).min(1.0 / FAC_MIN);
            rejected_last = true;
        }
    }
}

struct Guidance<'a>(&'a Superposition);

impl OdeSystem<2> for Guidance<'_> {
    fn rhs(&self, t: f64, y: &[f64; 2]) -> Result<[f64; 2], WaveError> {
        self.0.velocity(Point2::new(y[0], y[1]), t)
    }
}

// (x, y, ln ρ) with d ln ρ/dt = -∇·v along the flow.
struct GuidanceLogDensity<'a>(&'a Superposition);

impl OdeSystem<3> for GuidanceLogDensity<'_> {
    fn rhs(&self, t: f64, y: &[f64; 3]) -> Result<[f64; 3], WaveError> {
        let (v, div) = self.0.velocity_and_divergence(Point2::new(y[0], y[1]), t)?;
        Ok([v[0], v[1], -div])
    }
}

/// Deterministic unit direction for the node-retry jitter of point `index`.
fn jitter_direction(index: usize) -> (f64, f64) {
    // golden-angle spiral
    let angle = 2.399_963_229_728_653 * (index as f64 + 1.0);
    (angle.cos(), angle.sin())
}

fn with_node_retry<const N: usize>(
    y0: [f64; N],
    index: usize,
    cfg: &IntegratorConfig,
    mut run: impl FnMut([f64; N]) -> Result<[f64; N], StepFailure>,
) -> Result<[f64; N], IntegrateError> {
    let map = |e: StepFailure| match e {
        StepFailure::Node(t) => IntegrateError::NodeEncountered { x: y0[0], y: y0[1], t },
        StepFailure::Limit(steps, t) => IntegrateError::StepLimitExceeded { steps, t },
        StepFailure::Underflow(t) => IntegrateError::StepSizeUnderflow { t },
    };
    match run(y0) {
        Err(StepFailure::Node(_)) => {
            let (dx, dy) = jitter_direction(index);
            let mut y = y0;
            y[0] += cfg.node_retry_jitter * dx;
            y[1] += cfg.node_retry_jitter * dy;
            run(y).map_err(map)
        }
        other => other.map_err(map),
    }
}

/// Position at `t1` of the trajectory through `q0` at `t0`.
pub fn integrate(
    state: &Superposition,
    q0: Point2,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<Point2, IntegrateError> {
    integrate_indexed(state, q0, t0, t1, cfg, 0)
}

fn integrate_indexed(
    state: &Superposition,
    q0: Point2,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
    index: usize,
) -> Result<Point2, IntegrateError> {
    let sys = Guidance(state);
    let y = with_node_retry([q0.x, q0.y], index, cfg, |y0| solve(&sys, y0, t0, t1, cfg, None))?;
    Ok(Point2::new(y[0], y[1]))
}

/// Like [`integrate`], recording every accepted step.
pub fn integrate_traced(
    state: &Superposition,
    q0: Point2,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<TrajectorySample>, IntegrateError> {
    let sys = Guidance(state);
    let mut trace = Vec::new();
    with_node_retry([q0.x, q0.y], 0, cfg, |y0| {
        trace.clear();
        let mut obs = |t: f64, y: &[f64; 2]| trace.push(TrajectorySample { t, q: Point2::new(y[0], y[1]) });
        solve(&sys, y0, t0, t1, cfg, Some(&mut obs))
    })?;
    Ok(trace)
}

/// Carries `ln ρ` along the trajectory using the continuity equation,
/// returning the endpoint and the transported `ln ρ`.
pub fn integrate_log_density(
    state: &Superposition,
    q0: Point2,
    ln_rho0: f64,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<(Point2, f64), IntegrateError> {
    let sys = GuidanceLogDensity(state);
    let y = with_node_retry([q0.x, q0.y, ln_rho0], 0, cfg, |y0| solve(&sys, y0, t0, t1, cfg, None))?;
    Ok((Point2::new(y[0], y[1]), y[2]))
}

/// Integrates every point independently; one failure never aborts the batch.
pub fn integrate_batch(
    state: &Superposition,
    points: &[Point2],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Vec<Result<Point2, IntegrateError>> {
    integrate_batch_with(Execution::default(), state, points, t0, t1, cfg)
}

pub fn integrate_batch_with(
    exec: Execution,
    state: &Superposition,
    points: &[Point2],
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Vec<Result<Point2, IntegrateError>> {
    exec.map(points, |i, q| integrate_indexed(state, *q, t0, t1, cfg, i))
}

/// Writes a trace as CSV with header `t,x,y`.
pub fn write_trajectory_csv<W: Write>(out: &mut W, trace: &[TrajectorySample]) -> std::io::Result<()> {
    writeln!(out, "t,x,y")?;
    for s in trace {
        writeln!(
            out,
            "{},{},{}",
            crate::io::fmt_g17(s.t),
            crate::io::fmt_g17(s.q.x),
            crate::io::fmt_g17(s.q.y)
        )?;
    }
    Ok(())
}

//! Continuous-time tank dynamics and the RK4 integrator.
//!
//! Level derivatives:
//!
//! ```text
//! dh1 = q1 - kv12*sign(h1-h2)*sqrt(|h1-h2|)
//! dh2 =      kv12*sign(h1-h2)*sqrt(|h1-h2|) - kv23*sign(h2-h3)*sqrt(|h2-h3|)
//! dh3 = q3 + kv23*sign(h2-h3)*sqrt(|h2-h3|) - kv3*sqrt(h3)
//! ```
//!
//! with `sign(0) = 0` exactly. The inter-tank terms appear with opposite
//! signs in adjacent rows, so the only net volume changes are the inflows
//! and the tank-3 outflow.

use crate::state::{ControlInput, TankState};
use crate::{Result, SimError};

/// Torricelli-style signed flow between two levels.
fn signed_flow(diff: f64) -> f64 {
    if diff > 0.0 {
        diff.sqrt()
    } else if diff < 0.0 {
        -(-diff).sqrt()
    } else {
        0.0
    }
}

/// Right-hand side used internally by the integrator. Intermediate RK4
/// stages may momentarily carry a slightly negative h3; the outflow term
/// reads `sqrt(max(h3, 0))` so those stages stay well-defined.
pub(crate) fn eval_stage(h: [f64; 3], c: &ControlInput) -> [f64; 3] {
    let flow12 = c.kv12 * signed_flow(h[0] - h[1]);
    let flow23 = c.kv23 * signed_flow(h[1] - h[2]);
    let out3 = c.kv3 * h[2].max(0.0).sqrt();
    [c.q1 - flow12, flow12 - flow23, c.q3 + flow23 - out3]
}

/// Level derivatives at a committed (physical) state.
pub fn derivatives(state: &TankState, control: &ControlInput) -> Result<(f64, f64, f64)> {
    if !state.is_finite() {
        return Err(SimError::InvalidState(format!("non-finite state {state:?}")));
    }
    control.validate()?;
    if state.h3 < 0.0 {
        return Err(SimError::InvalidState(format!(
            "h3 = {} is negative; the outflow term sqrt(h3) is undefined",
            state.h3
        )));
    }
    let d = eval_stage(state.as_array(), control);
    Ok((d[0], d[1], d[2]))
}

/// One classical 4th-order Runge–Kutta step of size `dt`, with each level
/// clamped at 0 afterwards (a drained tank stays empty). Deterministic:
/// identical inputs give bit-identical outputs.
pub fn step(state: &TankState, control: &ControlInput, dt: f64) -> Result<TankState> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(SimError::InvalidConfig(format!("dt = {dt} must be positive and finite")));
    }
    if !state.is_finite() {
        return Err(SimError::InvalidState(format!("non-finite state {state:?}")));
    }
    let s1 = state.as_array();
    let k1 = stage_checked(s1, control, "k1")?;
    let s2 = advance(s1, &k1, dt / 2.0);
    let k2 = stage_checked(s2, control, "k2")?;
    let s3 = advance(s1, &k2, dt / 2.0);
    let k3 = stage_checked(s3, control, "k3")?;
    let s4 = advance(s1, &k3, dt);
    let k4 = stage_checked(s4, control, "k4")?;

    let mut out = [0.0; 3];
    for i in 0..3 {
        let incr = dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        out[i] = (s1[i] + incr).max(0.0);
        if !out[i].is_finite() {
            return Err(SimError::IntegrationDiverged {
                context: format!("combination of stages for level {} (dt={dt})", i + 1),
            });
        }
    }
    Ok(TankState::new(out[0], out[1], out[2]))
}

fn advance(s: [f64; 3], k: &[f64; 3], h: f64) -> [f64; 3] {
    [s[0] + h * k[0], s[1] + h * k[1], s[2] + h * k[2]]
}

fn stage_checked(s: [f64; 3], control: &ControlInput, name: &str) -> Result<[f64; 3]> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(SimError::IntegrationDiverged {
            context: format!("stage {name}: non-finite stage state {s:?}"),
        });
    }
    let k = eval_stage(s, control);
    if k.iter().any(|v| !v.is_finite()) {
        return Err(SimError::IntegrationDiverged {
            context: format!("stage {name}: non-finite derivative {k:?} at state {s:?}"),
        });
    }
    Ok(k)
}

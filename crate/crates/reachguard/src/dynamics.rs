//! Planar constant-speed vehicles with bounded turn rate, and the relative
//! two-vehicle system the pairwise games are solved in.
//!
//! World dynamics of one vehicle:
//!
//! ```text
//! x' = v cos(theta)    y' = v sin(theta)    theta' = omega,  |omega| <= w
//! ```
//!
//! The pairwise game lives in the body frame of vehicle i: the state is
//! vehicle j's position rotated into i's frame plus the heading difference
//! `theta = theta_j - theta_i`. Pushing the world dynamics through that map
//! gives
//!
//! ```text
//! x' = -v + v cos(theta) + omega_i * y
//! y' =      v sin(theta) - omega_i * x
//! theta' = omega_j - omega_i
//! ```
//!
//! so the relative state depends on position only through the rotation
//! coupling of vehicle i's own turning. All Hamiltonians below are closed
//! forms of `max`/`min` of `costate . flow` over the admissible turn rates;
//! each is paired with the control that attains it. Ties in the optimal
//! control (zero switching function) resolve to the positive turn rate.

use serde::{Deserialize, Serialize};

/// Shared vehicle parameters: fixed forward speed and turn-rate bound.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DubinsParams {
    pub speed: f64,
    pub max_turn_rate: f64,
}

/// World-frame pose. `theta` is kept in `[-pi, pi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DubinsState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl DubinsState {
    pub fn new(x: f64, y: f64, theta: f64) -> DubinsState {
        DubinsState {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn coords(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }
}

/// State of the pairwise relative system, in vehicle i's body frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativeState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl RelativeState {
    pub fn coords(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }
}

/// Scalar turn rate.
pub type Control = f64;

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let w = (a + PI).rem_euclid(TAU) - PI;
    // rem_euclid can return exactly TAU when a + PI rounds to -0.0 epsilon
    // territory; normalize the right endpoint back to -PI.
    if w >= PI {
        w - TAU
    } else {
        w
    }
}

/// Time derivative of a world pose under turn rate `omega`.
pub fn dubins_flow(s: &DubinsState, p: &DubinsParams, omega: Control) -> [f64; 3] {
    [p.speed * s.theta.cos(), p.speed * s.theta.sin(), omega]
}

/// Map two world poses to the relative state: j's offset rotated into i's
/// body frame, heading difference wrapped.
pub fn relative_state_of(xi: &DubinsState, xj: &DubinsState) -> RelativeState {
    let dx = xj.x - xi.x;
    let dy = xj.y - xi.y;
    let (sin_i, cos_i) = xi.theta.sin_cos();
    RelativeState {
        x: cos_i * dx + sin_i * dy,
        y: -sin_i * dx + cos_i * dy,
        theta: wrap_angle(xj.theta - xi.theta),
    }
}

/// Time derivative of the relative state under the two turn rates.
pub fn relative_flow(
    r: &RelativeState,
    p: &DubinsParams,
    omega_i: Control,
    omega_j: Control,
) -> [f64; 3] {
    let (sin_t, cos_t) = r.theta.sin_cos();
    [
        -p.speed + p.speed * cos_t + omega_i * r.y,
        p.speed * sin_t - omega_i * r.x,
        omega_j - omega_i,
    ]
}

/// Switching function of vehicle i's turn rate in the relative game.
fn switch_pc(rel: &[f64; 3], costate: &[f64; 3]) -> f64 {
    costate[0] * rel[1] - costate[1] * rel[0] - costate[2]
}

/// Pairwise-game Hamiltonian: vehicle i maximizes (avoids), vehicle j
/// minimizes (forces the conflict).
///
/// `max_i min_j costate . relative_flow = v (l1 (cos t - 1) + l2 sin t)
///  + w |l1 y - l2 x - l3| - w |l3|`.
pub fn ham_pc(rel: &[f64; 3], costate: &[f64; 3], p: &DubinsParams) -> f64 {
    let drift = p.speed * (costate[0] * (rel[2].cos() - 1.0) + costate[1] * rel[2].sin());
    drift + p.max_turn_rate * switch_pc(rel, costate).abs() - p.max_turn_rate * costate[2].abs()
}

/// Cooperative-reach Hamiltonian: both vehicles minimize, steering the
/// relative state toward the target as fast as possible.
pub fn ham_exit(rel: &[f64; 3], costate: &[f64; 3], p: &DubinsParams) -> f64 {
    let drift = p.speed * (costate[0] * (rel[2].cos() - 1.0) + costate[1] * rel[2].sin());
    drift - p.max_turn_rate * switch_pc(rel, costate).abs() - p.max_turn_rate * costate[2].abs()
}

/// Single-vehicle maximal Hamiltonian, used for forward reachable sets:
/// `max_omega costate . dubins_flow`.
pub fn ham_frs_dubins(state: &[f64; 3], costate: &[f64; 3], p: &DubinsParams) -> f64 {
    p.speed * (costate[0] * state[2].cos() + costate[1] * state[2].sin())
        + p.max_turn_rate * costate[2].abs()
}

/// Single-vehicle maximal Hamiltonian in backward solves: the vehicle does
/// its best to avoid the target. Same closed form as [`ham_frs_dubins`].
pub fn ham_free_dubins(state: &[f64; 3], costate: &[f64; 3], p: &DubinsParams) -> f64 {
    ham_frs_dubins(state, costate, p)
}

/// Turn rate attaining [`ham_pc`] for vehicle i, given the gradient of the
/// pairwise value function at the relative state. Zero switching resolves
/// to `+max_turn_rate`.
pub fn opt_control_pc(rel: &RelativeState, grad: &[f64; 3], p: &DubinsParams) -> Control {
    let s = grad[0] * rel.y - grad[1] * rel.x - grad[2];
    if s >= 0.0 {
        p.max_turn_rate
    } else {
        -p.max_turn_rate
    }
}

/// Vehicle j's minimizing turn rate in the pairwise game; the adversary that
/// [`ham_pc`]'s inner `min` assumes.
pub fn opt_control_pursuit(grad: &[f64; 3], p: &DubinsParams) -> Control {
    if grad[2] >= 0.0 {
        -p.max_turn_rate
    } else {
        p.max_turn_rate
    }
}

/// Turn rate attaining [`ham_free_dubins`] / [`ham_frs_dubins`]. Zero
/// gradient resolves to `+max_turn_rate`.
pub fn opt_control_free(grad: &[f64; 3], p: &DubinsParams) -> Control {
    if grad[2] >= 0.0 {
        p.max_turn_rate
    } else {
        -p.max_turn_rate
    }
}

/// Proportional gain of the goal-pursuit heading law.
pub const GOAL_HEADING_GAIN: f64 = 2.0;

/// Turn toward a planar goal: proportional heading correction saturated at
/// the turn-rate limit.
pub fn goal_controller(s: &DubinsState, goal: &[f64; 2], p: &DubinsParams) -> Control {
    let bearing = (goal[1] - s.y).atan2(goal[0] - s.x);
    let err = wrap_angle(bearing - s.theta);
    (GOAL_HEADING_GAIN * err).clamp(-p.max_turn_rate, p.max_turn_rate)
}

/// One zero-order-hold midpoint step of the world dynamics.
pub fn step_dubins(s: &DubinsState, p: &DubinsParams, u: Control, dt: f64) -> DubinsState {
    let k1 = dubins_flow(s, p, u);
    let mid = DubinsState::new(
        s.x + 0.5 * dt * k1[0],
        s.y + 0.5 * dt * k1[1],
        s.theta + 0.5 * dt * k1[2],
    );
    let k2 = dubins_flow(&mid, p, u);
    DubinsState::new(s.x + dt * k2[0], s.y + dt * k2[1], s.theta + dt * k2[2])
}

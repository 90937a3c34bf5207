//! Plasticine ball squeezed by a parallel gripper.
//!
//! Elastic below the yield force, then creeping plastically at a rate
//! proportional to the excess force. Plastic deformation never recovers.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BallParams {
    /// mm.
    pub rest_diameter: f64,
    /// N/mm.
    pub stiffness: f64,
    /// N.
    pub yield_force: f64,
    /// mm/(N·s).
    pub plastic_rate: f64,
    /// Grip force (N) below which a lifted ball slips out.
    pub hold_min: f64,
}

impl Default for BallParams {
    fn default() -> Self {
        Self {
            rest_diameter: 40.0,
            stiffness: 2.0,
            yield_force: 3.0,
            plastic_rate: 0.5,
            hold_min: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallState {
    pub rest_diameter: f64,
    pub current_diameter: f64,
    pub stiffness: f64,
    pub yield_force: f64,
    pub plastic_rate: f64,
    pub hold_min: f64,
    pub lifted: bool,
    pub dropped: bool,
}

impl BallState {
    pub fn new(p: &BallParams) -> Self {
        Self {
            rest_diameter: p.rest_diameter,
            current_diameter: p.rest_diameter,
            stiffness: p.stiffness,
            yield_force: p.yield_force,
            plastic_rate: p.plastic_rate,
            hold_min: p.hold_min,
            lifted: false,
            dropped: false,
        }
    }

    /// (d0 − d)/d0.
    pub fn deformation_ratio(&self) -> f64 {
        (self.rest_diameter - self.current_diameter) / self.rest_diameter
    }

    pub fn min_diameter(&self) -> f64 {
        0.1 * self.rest_diameter
    }
}

/// Squeezes the ball to `aperture` (mm) for `dt` seconds. Returns the new
/// state and the contact force at the start of the step.
pub fn step_ball(ball: &BallState, aperture: f64, dt: f64) -> (BallState, f64) {
    let mut next = *ball;
    if ball.dropped {
        return (next, 0.0);
    }
    let overlap = (ball.current_diameter - aperture.max(0.0)).max(0.0);
    let force = ball.stiffness * overlap;
    if force > ball.yield_force {
        let shrink = ball.plastic_rate * (force - ball.yield_force) * dt;
        next.current_diameter = (ball.current_diameter - shrink).max(ball.min_diameter());
    }
    if ball.lifted && force < ball.hold_min {
        next.dropped = true;
    }
    (next, force)
}

//! Agent state types shared by the simulator, the policies, and the
//! observation pipeline.

use serde::{Deserialize, Serialize};

use crate::vec2::Vec2;

/// Full kinematic state of an agent, including the private fields (goal,
/// preferred speed, heading) that only the agent itself knows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentFullState {
    pub pos: Vec2,
    pub vel: Vec2,
    pub radius: f64,
    pub goal: Vec2,
    pub v_pref: f64,
    pub theta: f64,
}

impl AgentFullState {
    pub fn new(pos: Vec2, goal: Vec2, radius: f64, v_pref: f64) -> AgentFullState {
        assert!(radius > 0.0 && v_pref > 0.0);
        AgentFullState {
            pos,
            vel: Vec2::ZERO,
            radius,
            goal,
            v_pref,
            theta: 0.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pos.is_finite() && self.vel.is_finite() && self.theta.is_finite()
    }

    /// Distance from the body surface to the goal point; negative once the
    /// goal lies inside the body disc, which is the arrival condition.
    pub fn goal_surface_distance(&self) -> f64 {
        self.pos.dist(self.goal) - self.radius
    }
}

/// What an outside observer can see of a pedestrian.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PedestrianObservable {
    pub pos: Vec2,
    pub vel: Vec2,
    pub radius: f64,
}

impl From<&AgentFullState> for PedestrianObservable {
    fn from(s: &AgentFullState) -> PedestrianObservable {
        PedestrianObservable {
            pos: s.pos,
            vel: s.vel,
            radius: s.radius,
        }
    }
}

/// Disc-to-disc clearance: negative while the discs interpenetrate, bounded
/// below by -(ra + rb). Grouped so that swapping the discs gives the
/// bit-identical answer.
pub fn surface_distance(pa: Vec2, ra: f64, pb: Vec2, rb: f64) -> f64 {
    pa.dist(pb) - (ra + rb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vec2::vec2;

    #[test]
    fn surface_distance_is_symmetric_and_bounded() {
        let (a, b) = (vec2(0.0, 0.0), vec2(1.0, 0.0));
        let d = surface_distance(a, 0.3, b, 0.4);
        assert!((d - 0.3).abs() < 1e-12);
        assert_eq!(d, surface_distance(b, 0.4, a, 0.3));
        // Fully overlapping discs sit exactly at the analytic floor.
        let o = surface_distance(a, 0.3, a, 0.4);
        assert!(o >= -(0.3 + 0.4));
        assert!((o + 0.7).abs() < 1e-15);
    }

    #[test]
    fn goal_arrival_uses_body_surface() {
        let mut s = AgentFullState::new(vec2(0.0, 0.0), vec2(0.2, 0.0), 0.3, 1.0);
        assert!(s.goal_surface_distance() < 0.0);
        s.goal = vec2(0.31, 0.0);
        assert!(s.goal_surface_distance() > 0.0);
    }
}

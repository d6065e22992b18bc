//! Pedestrian steering policies and the noise mixture applied on top of
//! them.

pub mod orca;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rng::standard_normal_pair;
use crate::sim::agent::AgentFullState;
use crate::vec2::Vec2;

pub use orca::{orca_velocity, AgentView, OrcaParams};

/// Goal-seeking velocity that lands exactly on the goal instead of
/// oscillating around it: the full step (goal - pos) / dt clamped to the
/// preferred speed.
pub fn arrival_pref_velocity(pos: Vec2, goal: Vec2, v_pref: f64, dt: f64) -> Vec2 {
    ((goal - pos) / dt).clamp_norm(v_pref)
}

/// Straight to the goal, ignoring everyone.
pub fn linear_velocity(state: &AgentFullState, dt: f64) -> Vec2 {
    arrival_pref_velocity(state.pos, state.goal, state.v_pref, dt)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SocialForceParams {
    /// Strength of the exponential surface repulsion.
    pub repulsion_gain: f64,
    /// e-folding length of the repulsion in metres of surface clearance.
    pub decay_length: f64,
    /// Sideways evasion strength for neighbours ahead; breaks the head-on
    /// symmetry that pure radial forces cannot.
    pub lateral_gain: f64,
}

impl Default for SocialForceParams {
    fn default() -> SocialForceParams {
        SocialForceParams {
            repulsion_gain: 2.0,
            decay_length: 0.4,
            lateral_gain: 0.3,
        }
    }
}

/// First-order social force steering: goal attraction plus exponential
/// repulsion from each neighbour, with a lateral component for neighbours
/// in front. The resulting command is speed-clamped, never integrated as a
/// true force.
pub fn social_force_velocity(
    state: &AgentFullState,
    neighbors: &[AgentView],
    params: &SocialForceParams,
    dt: f64,
) -> Vec2 {
    let attract = arrival_pref_velocity(state.pos, state.goal, state.v_pref, dt);
    let goal_dir = (state.goal - state.pos).normalize_or_zero();
    let mut v = attract;
    for n in neighbors {
        let away = state.pos - n.pos;
        let dist = away.norm();
        let n_hat = if dist > 1e-12 {
            away / dist
        } else {
            // Coincident centres: fixed direction for determinism.
            Vec2 { x: 1.0, y: 0.0 }
        };
        let clearance = dist - state.radius - n.radius;
        let mag = params.repulsion_gain * (-clearance / params.decay_length).exp();
        // Neighbours ahead also push sideways, to the side they are not on.
        let ahead = (-n_hat.dot(goal_dir)).max(0.0);
        let side = if n_hat.det(goal_dir) >= 0.0 { 1.0 } else { -1.0 };
        let t_hat = side * n_hat.perp();
        v += mag * (n_hat + params.lateral_gain * ahead * t_hat);
    }
    v.clamp_norm(state.v_pref)
}

/// Convex mixture of a base command with isotropic Gaussian noise of
/// variance v_pref per component. The result is intentionally not clamped:
/// large deviations are the behaviour being modelled.
pub fn noisy_mixture(base: Vec2, rho: f64, v_pref: f64, rng: &mut ChaCha8Rng) -> Vec2 {
    assert!((0.0..=1.0).contains(&rho), "mixture weight {rho} outside [0, 1]");
    let (z1, z2) = standard_normal_pair(rng);
    let scale = v_pref.sqrt();
    let rand_v = Vec2 {
        x: scale * z1,
        y: scale * z2,
    };
    (1.0 - rho) * base + rho * rand_v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyTag {
    Orca,
    NoisyOrca,
    Linear,
    SocialForce,
}

impl PolicyTag {
    pub fn as_str(&self) -> &'static str {
        match self {
            PolicyTag::Orca => "orca",
            PolicyTag::NoisyOrca => "noisy_orca",
            PolicyTag::Linear => "linear",
            PolicyTag::SocialForce => "social_force",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PedPolicy {
    Orca(OrcaParams),
    NoisyOrca { params: OrcaParams, rho: f64 },
    Linear,
    SocialForce(SocialForceParams),
}

impl PedPolicy {
    pub fn tag(&self) -> PolicyTag {
        match self {
            PedPolicy::Orca(_) => PolicyTag::Orca,
            PedPolicy::NoisyOrca { .. } => PolicyTag::NoisyOrca,
            PedPolicy::Linear => PolicyTag::Linear,
            PedPolicy::SocialForce(_) => PolicyTag::SocialForce,
        }
    }

    /// Ground-truth mixture weight, when this pedestrian has one.
    pub fn rho(&self) -> Option<f64> {
        match self {
            PedPolicy::NoisyOrca { rho, .. } => Some(*rho),
            _ => None,
        }
    }
}

/// One pedestrian's velocity command for the coming step, given snapshot
/// views of everyone else it can see.
pub fn ped_velocity(
    state: &AgentFullState,
    policy: &PedPolicy,
    neighbors: &[AgentView],
    dt: f64,
    rng: &mut ChaCha8Rng,
) -> Vec2 {
    let me = AgentView {
        pos: state.pos,
        vel: state.vel,
        radius: state.radius,
    };
    match policy {
        PedPolicy::Orca(params) => {
            let pref = arrival_pref_velocity(state.pos, state.goal, state.v_pref, dt);
            orca_velocity(&me, neighbors, params, dt, pref, state.v_pref)
        }
        PedPolicy::NoisyOrca { params, rho } => {
            let pref = arrival_pref_velocity(state.pos, state.goal, state.v_pref, dt);
            let base = orca_velocity(&me, neighbors, params, dt, pref, state.v_pref);
            noisy_mixture(base, *rho, state.v_pref, rng)
        }
        PedPolicy::Linear => linear_velocity(state, dt),
        PedPolicy::SocialForce(params) => social_force_velocity(state, neighbors, params, dt),
    }
}

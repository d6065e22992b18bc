//! Discrete robot action lattice: one stop action plus five exponentially
//! spaced speeds crossed with sixteen evenly spaced headings.

use serde::{Deserialize, Serialize};

use crate::vec2::Vec2;

pub const N_SPEEDS: usize = 5;
pub const N_HEADINGS: usize = 16;
pub const N_ACTIONS: usize = 1 + N_SPEEDS * N_HEADINGS;

/// Tolerance for deciding whether a commanded (speed, heading) pair sits on
/// the lattice. Far tighter than any physically meaningful perturbation.
pub const LATTICE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DiscreteAction {
    /// Zero velocity; the robot keeps its previous heading.
    Stop,
    /// World-frame heading in radians, speed in m/s.
    Move { speed: f64, heading: f64 },
}

impl DiscreteAction {
    pub fn velocity(&self) -> Vec2 {
        match *self {
            DiscreteAction::Stop => Vec2::ZERO,
            DiscreteAction::Move { speed, heading } => Vec2::from_polar(speed, heading),
        }
    }
}

/// Speed rung i in 1..=5: ((e^{i/5} - 1) / (e - 1)) * v_pref. Rung 5 equals
/// v_pref exactly up to rounding of the quotient.
pub fn speed_rung(i: usize, v_pref: f64) -> f64 {
    assert!((1..=N_SPEEDS).contains(&i));
    ((i as f64 / N_SPEEDS as f64).exp() - 1.0) / (std::f64::consts::E - 1.0) * v_pref
}

pub fn heading_spoke(k: usize) -> f64 {
    assert!(k < N_HEADINGS);
    2.0 * std::f64::consts::PI * k as f64 / N_HEADINGS as f64
}

/// The full 81-action set, stop first, then ordered by (speed rung, heading
/// spoke). The ordering is part of the interface: indices identify actions
/// in logs and replay contents.
pub fn build_action_space(v_pref: f64) -> Vec<DiscreteAction> {
    assert!(v_pref > 0.0);
    let mut out = Vec::with_capacity(N_ACTIONS);
    out.push(DiscreteAction::Stop);
    for i in 1..=N_SPEEDS {
        let speed = speed_rung(i, v_pref);
        for k in 0..N_HEADINGS {
            out.push(DiscreteAction::Move {
                speed,
                heading: heading_spoke(k),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ActionError {
    #[error("speed {speed} is not a lattice speed for v_pref {v_pref}")]
    OffLatticeSpeed { speed: f64, v_pref: f64 },
    #[error("heading {heading} is not a lattice heading")]
    OffLatticeHeading { heading: f64 },
    #[error("non-finite action component")]
    NonFinite,
}

/// Accept only commands that sit on the lattice within `LATTICE_TOL`.
pub fn validate_action(action: &DiscreteAction, v_pref: f64) -> Result<(), ActionError> {
    match *action {
        DiscreteAction::Stop => Ok(()),
        DiscreteAction::Move { speed, heading } => {
            if !speed.is_finite() || !heading.is_finite() {
                return Err(ActionError::NonFinite);
            }
            let speed_ok = (1..=N_SPEEDS).any(|i| (speed - speed_rung(i, v_pref)).abs() <= LATTICE_TOL);
            if !speed_ok {
                return Err(ActionError::OffLatticeSpeed { speed, v_pref });
            }
            let heading_ok = (0..N_HEADINGS).any(|k| (heading - heading_spoke(k)).abs() <= LATTICE_TOL);
            if !heading_ok {
                return Err(ActionError::OffLatticeHeading { heading });
            }
            Ok(())
        }
    }
}

/// Nearest lattice action to a continuous velocity, by Euclidean distance in
/// velocity space. Ties cannot occur for generic inputs; for exact ties the
/// lowest action index wins.
pub fn snap_to_lattice(v: Vec2, actions: &[DiscreteAction]) -> DiscreteAction {
    let mut best = actions[0];
    let mut best_d = f64::INFINITY;
    for a in actions {
        let d = (a.velocity() - v).norm_sq();
        if d < best_d {
            best_d = d;
            best = *a;
        }
    }
    best
}

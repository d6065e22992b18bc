//! Observation preprocessing: robot-centric rotation of joint states,
//! pedestrian track histories with their speed/acceleration features, and
//! the constant-velocity propagation used by one-step lookahead.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::action::DiscreteAction;
use crate::sim::{AgentFullState, PedestrianObservable};
use crate::vec2::Vec2;

/// How the robot heading enters the rotated features. The raw pass-through
/// is the reference behaviour; the goal-relative variant subtracts the
/// goal bearing, which also makes the feature rotation-invariant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaMode {
    #[default]
    Raw,
    GoalRelative,
}

/// Joint robot-pedestrian state in the frame whose x-axis points from the
/// robot to its goal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotatedObservation {
    /// Centre distance from robot to goal.
    pub d_goal: f64,
    pub vx_r: f64,
    pub vy_r: f64,
    pub radius_r: f64,
    pub v_pref: f64,
    pub theta_r: f64,
    pub px_h: f64,
    pub py_h: f64,
    pub vx_h: f64,
    pub vy_h: f64,
    pub radius_h: f64,
    /// Centre distance from robot to pedestrian.
    pub d_ped: f64,
    pub radius_sum: f64,
}

impl RotatedObservation {
    pub const LEN: usize = 13;

    pub fn as_array(&self) -> [f64; 13] {
        [
            self.d_goal,
            self.vx_r,
            self.vy_r,
            self.radius_r,
            self.v_pref,
            self.theta_r,
            self.px_h,
            self.py_h,
            self.vx_h,
            self.vy_h,
            self.radius_h,
            self.d_ped,
            self.radius_sum,
        ]
    }

    /// The robot-only prefix fed to the value head alongside the crowd
    /// representation.
    pub fn self_state(&self) -> [f64; 6] {
        [
            self.d_goal,
            self.vx_r,
            self.vy_r,
            self.radius_r,
            self.v_pref,
            self.theta_r,
        ]
    }
}

/// Rotate one robot-pedestrian pair into the goal-aligned frame. The goal
/// bearing angle is atan2 of the goal offset, which is 0 at the goal
/// itself; by then the episode is already over, so the value is inert.
pub fn rotate_observation(
    robot: &AgentFullState,
    ped: &PedestrianObservable,
    theta_mode: ThetaMode,
) -> RotatedObservation {
    let to_goal = robot.goal - robot.pos;
    let phi = to_goal.y.atan2(to_goal.x);
    let (sin, cos) = phi.sin_cos();
    let rot = |v: Vec2| (v.x * cos + v.y * sin, v.y * cos - v.x * sin);

    let (vx_r, vy_r) = rot(robot.vel);
    let rel = ped.pos - robot.pos;
    let (px_h, py_h) = rot(rel);
    let (vx_h, vy_h) = rot(ped.vel);
    let theta_r = match theta_mode {
        ThetaMode::Raw => robot.theta,
        ThetaMode::GoalRelative => robot.theta - phi,
    };

    RotatedObservation {
        d_goal: to_goal.norm(),
        vx_r,
        vy_r,
        radius_r: robot.radius,
        v_pref: robot.v_pref,
        theta_r,
        px_h,
        py_h,
        vx_h,
        vy_h,
        radius_h: ped.radius,
        d_ped: rel.norm(),
        radius_sum: robot.radius + ped.radius,
    }
}

/// Recent world-frame positions of one pedestrian with their time stamps.
/// Capacity covers the longest feature window (20 speeds need 21 points).
#[derive(Clone, Debug, Default)]
pub struct TrackHistory {
    entries: VecDeque<(f64, Vec2)>,
}

pub const TRACK_CAPACITY: usize = 21;

impl TrackHistory {
    pub fn new() -> TrackHistory {
        TrackHistory {
            entries: VecDeque::with_capacity(TRACK_CAPACITY),
        }
    }

    pub fn push(&mut self, time: f64, pos: Vec2) {
        if let Some(&(last, _)) = self.entries.back() {
            debug_assert!(time > last, "stamps must increase");
        }
        if self.entries.len() == TRACK_CAPACITY {
            self.entries.pop_front();
        }
        self.entries.push_back((time, pos));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Steps of motion available, i.e. how many speeds can be formed.
    pub fn steps_available(&self) -> usize {
        self.entries.len().saturating_sub(1)
    }

    fn tail(&self, n: usize) -> impl Iterator<Item = &(f64, Vec2)> {
        self.entries.iter().skip(self.entries.len() - n)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("track has {have} positions, feature window t={t} needs {need}")]
pub struct InsufficientHistory {
    pub have: usize,
    pub t: usize,
    pub need: usize,
}

/// Scalar speed and acceleration features over the most recent `t` steps:
/// [speed_1..speed_t, accel_1..accel_t]. Speeds come from position
/// differences so logged and live tracks share this path; the first
/// acceleration is defined 0 so the length is exactly 2t.
pub fn track_features(history: &TrackHistory, t: usize) -> Result<Vec<f64>, InsufficientHistory> {
    assert!((1..=20).contains(&t), "feature window t={t} outside [1,20]");
    let need = t + 1;
    if history.len() < need {
        return Err(InsufficientHistory {
            have: history.len(),
            t,
            need,
        });
    }
    let pts: Vec<&(f64, Vec2)> = history.tail(need).collect();
    let mut speeds = Vec::with_capacity(t);
    for w in pts.windows(2) {
        let (t0, p0) = *w[0];
        let (t1, p1) = *w[1];
        speeds.push(p1.dist(p0) / (t1 - t0));
    }
    let mut out = speeds.clone();
    out.push(0.0);
    for k in 1..t {
        let dt = pts[k + 1].0 - pts[k].0;
        out.push((speeds[k] - speeds[k - 1]) / dt);
    }
    Ok(out)
}

/// One-step prediction for lookahead: the robot moves with the commanded
/// velocity, every pedestrian coasts at its observed velocity. No policy
/// is consulted.
pub fn propagate_state(
    robot: &AgentFullState,
    peds: &[PedestrianObservable],
    action: &DiscreteAction,
    dt: f64,
) -> (AgentFullState, Vec<PedestrianObservable>) {
    let mut next_robot = *robot;
    let v = action.velocity();
    next_robot.vel = v;
    next_robot.pos += dt * v;
    if let DiscreteAction::Move { heading, .. } = *action {
        next_robot.theta = heading;
    }
    let next_peds = peds
        .iter()
        .map(|p| PedestrianObservable {
            pos: p.pos + dt * p.vel,
            vel: p.vel,
            radius: p.radius,
        })
        .collect();
    (next_robot, next_peds)
}

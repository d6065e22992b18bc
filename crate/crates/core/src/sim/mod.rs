//! World state, the synchronous step rule, and episode rollouts.

pub mod agent;
pub mod scenario;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{snap_to_lattice, validate_action, ActionError, DiscreteAction};
use crate::policies::{
    arrival_pref_velocity, orca_velocity, ped_velocity, social_force_velocity, AgentView,
    OrcaParams, PedPolicy, SocialForceParams,
};
use crate::vec2::vec2;

pub use agent::{surface_distance, AgentFullState, PedestrianObservable};

#[derive(Clone, Debug)]
pub struct Pedestrian {
    pub state: AgentFullState,
    pub policy: PedPolicy,
    /// Stream for this pedestrian's private draws; cloning a world forks
    /// the stream state with it.
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug)]
pub struct ArenaBounds {
    pub half: f64,
}

#[derive(Clone, Debug)]
pub struct WorldState {
    pub robot: AgentFullState,
    pub peds: Vec<Pedestrian>,
    pub dt: f64,
    /// Steps taken so far; simulated time is steps * dt, kept as a count so
    /// the time grid never drifts.
    pub steps: u64,
    /// Whether pedestrians react to the robot.
    pub robot_visible: bool,
    /// When set, pedestrians draw a fresh goal inside these bounds each
    /// time they arrive.
    pub perpetual: Option<ArenaBounds>,
}

impl WorldState {
    pub fn sim_time(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn observables(&self) -> Vec<PedestrianObservable> {
        self.peds.iter().map(|p| (&p.state).into()).collect()
    }
}

#[derive(Clone, Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Action(#[from] ActionError),
    #[error("non-finite agent state after step {step}")]
    NonFiniteState { step: u64 },
}

/// What the step rule reports back about the transition it just applied.
#[derive(Clone, Debug)]
pub struct StepEvents {
    /// Per-pedestrian contact flags at the new positions.
    pub ped_collisions: Vec<bool>,
    /// Smallest robot-pedestrian surface distance at the new positions;
    /// infinite with an empty crowd.
    pub min_separation: f64,
    /// Goal point inside the robot's body disc at the new position.
    pub reached_goal: bool,
}

/// Advance everyone by one synchronous step: pedestrian commands are
/// computed from the same pre-step snapshot the robot acted on, then all
/// positions integrate together. Only lattice actions are accepted.
pub fn step_environment(world: &mut WorldState, action: &DiscreteAction) -> Result<StepEvents, SimError> {
    validate_action(action, world.robot.v_pref)?;

    let ped_views: Vec<AgentView> = world
        .peds
        .iter()
        .map(|p| AgentView {
            pos: p.state.pos,
            vel: p.state.vel,
            radius: p.state.radius,
        })
        .collect();
    let robot_view = AgentView {
        pos: world.robot.pos,
        vel: world.robot.vel,
        radius: world.robot.radius,
    };

    let dt = world.dt;
    let mut new_vels = Vec::with_capacity(world.peds.len());
    for (i, ped) in world.peds.iter_mut().enumerate() {
        let mut neighbors: Vec<AgentView> = ped_views
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, v)| *v)
            .collect();
        if world.robot_visible {
            neighbors.push(robot_view);
        }
        new_vels.push(ped_velocity(&ped.state, &ped.policy, &neighbors, dt, &mut ped.rng));
    }

    for (ped, v) in world.peds.iter_mut().zip(new_vels) {
        ped.state.vel = v;
        ped.state.pos += dt * v;
    }
    let rv = action.velocity();
    world.robot.vel = rv;
    world.robot.pos += dt * rv;
    if let DiscreteAction::Move { heading, .. } = *action {
        world.robot.theta = heading;
    }
    world.steps += 1;

    if !world.robot.is_finite() || world.peds.iter().any(|p| !p.state.is_finite()) {
        return Err(SimError::NonFiniteState { step: world.steps });
    }

    let mut ped_collisions = Vec::with_capacity(world.peds.len());
    let mut min_separation = f64::INFINITY;
    for ped in &world.peds {
        let d = surface_distance(
            world.robot.pos,
            world.robot.radius,
            ped.state.pos,
            ped.state.radius,
        );
        ped_collisions.push(d < 0.0);
        min_separation = min_separation.min(d);
    }
    let reached_goal = world.robot.goal_surface_distance() < 0.0;

    if let Some(bounds) = world.perpetual {
        for ped in &mut world.peds {
            if ped.state.pos.dist(ped.state.goal) < ped.state.radius {
                let h = bounds.half;
                ped.state.goal = vec2(ped.rng.gen_range(-h..h), ped.rng.gen_range(-h..h));
            }
        }
    }

    Ok(StepEvents {
        ped_collisions,
        min_separation,
        reached_goal,
    })
}

/// The observation a robot policy acts on: its own full state plus what it
/// can see of the crowd.
pub struct RobotView<'a> {
    pub robot: &'a AgentFullState,
    pub peds: &'a [PedestrianObservable],
    pub dt: f64,
}

pub trait RobotPolicy {
    fn act(&mut self, view: &RobotView) -> DiscreteAction;

    /// Per-pedestrian deviation estimates from the most recent act() call,
    /// index-aligned with the view it saw. None for policies that do not
    /// estimate.
    fn rho_estimates(&self) -> Option<Vec<f64>> {
        None
    }

    /// Clear any cross-step state before a new episode.
    fn reset(&mut self) {}
}

/// Stands still forever.
pub struct StopRobot;

impl RobotPolicy for StopRobot {
    fn act(&mut self, _view: &RobotView) -> DiscreteAction {
        DiscreteAction::Stop
    }
}

/// Reciprocal avoidance steering snapped to the action lattice.
pub struct OrcaRobot {
    pub params: OrcaParams,
}

impl Default for OrcaRobot {
    fn default() -> OrcaRobot {
        OrcaRobot {
            params: OrcaParams::default(),
        }
    }
}

impl RobotPolicy for OrcaRobot {
    fn act(&mut self, view: &RobotView) -> DiscreteAction {
        let me = AgentView {
            pos: view.robot.pos,
            vel: view.robot.vel,
            radius: view.robot.radius,
        };
        let neighbors: Vec<AgentView> = view
            .peds
            .iter()
            .map(|p| AgentView {
                pos: p.pos,
                vel: p.vel,
                radius: p.radius,
            })
            .collect();
        let pref = arrival_pref_velocity(view.robot.pos, view.robot.goal, view.robot.v_pref, view.dt);
        let v = orca_velocity(&me, &neighbors, &self.params, view.dt, pref, view.robot.v_pref);
        let actions = crate::action::build_action_space(view.robot.v_pref);
        snap_to_lattice(v, &actions)
    }
}

/// Social-force steering snapped to the action lattice.
pub struct SocialForceRobot {
    pub params: SocialForceParams,
}

impl Default for SocialForceRobot {
    fn default() -> SocialForceRobot {
        SocialForceRobot {
            params: SocialForceParams::default(),
        }
    }
}

impl RobotPolicy for SocialForceRobot {
    fn act(&mut self, view: &RobotView) -> DiscreteAction {
        let neighbors: Vec<AgentView> = view
            .peds
            .iter()
            .map(|p| AgentView {
                pos: p.pos,
                vel: p.vel,
                radius: p.radius,
            })
            .collect();
        let v = social_force_velocity(view.robot, &neighbors, &self.params, view.dt);
        let actions = crate::action::build_action_space(view.robot.v_pref);
        snap_to_lattice(v, &actions)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionMode {
    /// Contact ends the episode (training semantics).
    TerminateOnContact,
    /// Contact is counted and the episode continues (evaluation semantics).
    CountContacts,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeStatus {
    Success,
    Collision,
    Timeout,
}

impl EpisodeStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            EpisodeStatus::Success => "success",
            EpisodeStatus::Collision => "collision",
            EpisodeStatus::Timeout => "timeout",
        }
    }
}

#[derive(Clone, Debug)]
pub struct PedSnapshot {
    pub obs: PedestrianObservable,
    /// Ground-truth mixture weight, if this pedestrian has one.
    pub rho_true: Option<f64>,
    /// The robot's deviation estimate from the observation this step was
    /// chosen on, if the policy produces them.
    pub rho_hat: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub time: f64,
    pub robot: AgentFullState,
    pub peds: Vec<PedSnapshot>,
}

#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub status: EpisodeStatus,
    pub steps: u64,
    /// Simulated seconds until termination.
    pub elapsed: f64,
    /// Integrated robot path length.
    pub path_length: f64,
    /// Rising-edge contact count across pedestrians (evaluation mode keeps
    /// going after these).
    pub contact_events: u32,
    /// Steps during which at least one contact was active.
    pub contact_steps: u32,
    /// Smallest robot-pedestrian surface distance seen at any step.
    pub min_separation: f64,
    /// Present when recording was requested; first entry is the initial
    /// state.
    pub trajectory: Vec<Snapshot>,
}

fn snapshot(world: &WorldState, rho_hats: Option<&[f64]>) -> Snapshot {
    Snapshot {
        time: world.sim_time(),
        robot: world.robot,
        peds: world
            .peds
            .iter()
            .enumerate()
            .map(|(i, p)| PedSnapshot {
                obs: (&p.state).into(),
                rho_true: p.policy.rho(),
                rho_hat: rho_hats.and_then(|r| r.get(i).copied()),
            })
            .collect(),
    }
}

/// Roll one episode to termination. Collision beats success when both land
/// on the same step under training semantics; under evaluation semantics
/// contacts are tallied and only goal or time limit ends the run.
pub fn run_episode(
    world: &mut WorldState,
    policy: &mut dyn RobotPolicy,
    mode: CollisionMode,
    time_limit: f64,
    record: bool,
) -> Result<EpisodeOutcome, SimError> {
    policy.reset();
    let mut trajectory = Vec::new();
    if record {
        trajectory.push(snapshot(world, None));
    }

    let mut contact_events = 0u32;
    let mut contact_steps = 0u32;
    let mut min_separation = f64::INFINITY;
    let mut path_length = 0.0;
    let mut prev_contact = vec![false; world.peds.len()];
    let status;

    loop {
        if world.sim_time() >= time_limit - 1e-9 {
            status = EpisodeStatus::Timeout;
            break;
        }
        let obs = world.observables();
        let view = RobotView {
            robot: &world.robot,
            peds: &obs,
            dt: world.dt,
        };
        let action = policy.act(&view);
        let before = world.robot.pos;
        let events = step_environment(world, &action)?;
        path_length += world.robot.pos.dist(before);
        min_separation = min_separation.min(events.min_separation);
        if record {
            let hats = policy.rho_estimates();
            trajectory.push(snapshot(world, hats.as_deref()));
        }

        let any_contact = events.ped_collisions.iter().any(|&c| c);
        if any_contact {
            contact_steps += 1;
            for (i, &c) in events.ped_collisions.iter().enumerate() {
                if c && !prev_contact[i] {
                    contact_events += 1;
                }
            }
        }
        prev_contact.copy_from_slice(&events.ped_collisions);

        if any_contact && mode == CollisionMode::TerminateOnContact {
            status = EpisodeStatus::Collision;
            break;
        }
        if events.reached_goal {
            status = EpisodeStatus::Success;
            break;
        }
    }

    Ok(EpisodeOutcome {
        status,
        steps: world.steps,
        elapsed: world.sim_time(),
        path_length,
        contact_events,
        contact_steps,
        min_separation,
        trajectory,
    })
}

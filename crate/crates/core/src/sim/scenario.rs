//! Crowd scenario generators. All placement randomness comes from the
//! caller-provided stream, so a seed pins the whole initial world.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::policies::PedPolicy;
use crate::sim::agent::{surface_distance, AgentFullState};
use crate::sim::{ArenaBounds, Pedestrian, WorldState};
use crate::vec2::{vec2, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Start on a circle, cross to the antipode.
    CircleCrossing,
    /// Everyone starts on the robot's side of the room and walks across.
    OutgoingFlow,
    /// The crowd walks toward the robot's side.
    OncomingFlow,
    /// The crowd crosses the robot's path from the flanks.
    PerpendicularCrossing,
    /// Independent random start and goal per pedestrian.
    SingleRandomGoal,
    /// Random goals that are redrawn every time one is reached.
    PerpetualRandomGoals,
}

impl ScenarioKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScenarioKind::CircleCrossing => "circle_crossing",
            ScenarioKind::OutgoingFlow => "outgoing_flow",
            ScenarioKind::OncomingFlow => "oncoming_flow",
            ScenarioKind::PerpendicularCrossing => "perpendicular_crossing",
            ScenarioKind::SingleRandomGoal => "single_random_goal",
            ScenarioKind::PerpetualRandomGoals => "perpetual_random_goals",
        }
    }

    pub fn all() -> [ScenarioKind; 6] {
        [
            ScenarioKind::CircleCrossing,
            ScenarioKind::OutgoingFlow,
            ScenarioKind::OncomingFlow,
            ScenarioKind::PerpendicularCrossing,
            ScenarioKind::SingleRandomGoal,
            ScenarioKind::PerpetualRandomGoals,
        ]
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = String;

    fn from_str(s: &str) -> Result<ScenarioKind, String> {
        ScenarioKind::all()
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown scenario '{s}'"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioGeometry {
    /// Radius of the crossing circle.
    pub circle_radius: f64,
    /// Half-width of the square room used by the flow scenarios.
    pub room_half: f64,
    /// Half-width of the square arena used by the random-goal scenarios.
    pub arena_half: f64,
    /// Minimum surface clearance enforced between spawned bodies.
    pub spawn_clearance: f64,
}

impl Default for ScenarioGeometry {
    fn default() -> ScenarioGeometry {
        ScenarioGeometry {
            circle_radius: 4.0,
            room_half: 5.0,
            arena_half: 4.0,
            spawn_clearance: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotSpec {
    pub radius: f64,
    pub v_pref: f64,
}

impl Default for RobotSpec {
    fn default() -> RobotSpec {
        RobotSpec {
            radius: 0.3,
            v_pref: 1.0,
        }
    }
}

/// Everything about one pedestrian that is decided before placement.
#[derive(Clone, Debug)]
pub struct PedSpec {
    pub radius: f64,
    pub v_pref: f64,
    pub policy: PedPolicy,
    /// Private stream for this pedestrian's own draws (noise, goal
    /// resampling).
    pub rng: ChaCha8Rng,
}

#[derive(Clone, Debug, thiserror::Error)]
#[error("could not place pedestrian {ped} in {kind:?} after {attempts} attempts")]
pub struct PlacementError {
    pub kind: ScenarioKind,
    pub ped: usize,
    pub attempts: usize,
}

const MAX_PLACE_ATTEMPTS: usize = 1000;

struct Placement {
    start: Vec2,
    goal: Vec2,
}

fn conflicts(
    candidate: &Placement,
    radius: f64,
    placed: &[(Placement, f64)],
    robot: &Placement,
    robot_radius: f64,
    clearance: f64,
) -> bool {
    let pairs = placed
        .iter()
        .map(|(p, r)| (p, *r))
        .chain(std::iter::once((robot, robot_radius)));
    for (other, r) in pairs {
        if surface_distance(candidate.start, radius, other.start, r) < clearance
            || surface_distance(candidate.goal, radius, other.goal, r) < clearance
        {
            return true;
        }
    }
    false
}

fn draw_placement(kind: ScenarioKind, geom: &ScenarioGeometry, rng: &mut ChaCha8Rng) -> Placement {
    match kind {
        ScenarioKind::CircleCrossing => {
            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
            let start = Vec2::from_polar(geom.circle_radius, ang);
            Placement { start, goal: -start }
        }
        ScenarioKind::OutgoingFlow | ScenarioKind::OncomingFlow => {
            let h = geom.room_half;
            let x = rng.gen_range(-(h - 0.5)..(h - 0.5));
            let band_y = rng.gen_range((h - 2.5)..(h - 0.5));
            let jitter = rng.gen_range(-1.0..1.0);
            let gx = (x + jitter).clamp(-(h - 0.5), h - 0.5);
            // Goals spread over a band, not a line, or they cannot pack.
            let goal_y = rng.gen_range((h - 1.5)..(h - 0.5));
            // Outgoing: spawn low, walk high, same as the robot. Oncoming:
            // the reverse.
            let (sy, gy) = match kind {
                ScenarioKind::OutgoingFlow => (-band_y, goal_y),
                _ => (band_y, -goal_y),
            };
            Placement {
                start: vec2(x, sy),
                goal: vec2(gx, gy),
            }
        }
        ScenarioKind::PerpendicularCrossing => {
            let h = geom.room_half;
            let side = if rng.gen_range(0.0..1.0f64) < 0.5 { -1.0 } else { 1.0 };
            let x = side * rng.gen_range((h - 2.5)..(h - 0.5));
            let y = rng.gen_range(-(h - 0.5)..(h - 0.5));
            let jitter = rng.gen_range(-1.0..1.0);
            let gy = (y + jitter).clamp(-(h - 0.5), h - 0.5);
            Placement {
                start: vec2(x, y),
                goal: vec2(-x, gy),
            }
        }
        ScenarioKind::SingleRandomGoal | ScenarioKind::PerpetualRandomGoals => {
            let h = geom.arena_half;
            loop {
                let start = vec2(rng.gen_range(-h..h), rng.gen_range(-h..h));
                let goal = vec2(rng.gen_range(-h..h), rng.gen_range(-h..h));
                // Degenerate standing targets defeat the point of the
                // scenario.
                if start.dist(goal) >= 1.0 {
                    return Placement { start, goal };
                }
            }
        }
    }
}

fn robot_placement(kind: ScenarioKind, geom: &ScenarioGeometry) -> Placement {
    let reach = match kind {
        ScenarioKind::CircleCrossing => geom.circle_radius,
        ScenarioKind::OutgoingFlow
        | ScenarioKind::OncomingFlow
        | ScenarioKind::PerpendicularCrossing => geom.room_half - 1.0,
        ScenarioKind::SingleRandomGoal | ScenarioKind::PerpetualRandomGoals => geom.arena_half - 0.5,
    };
    Placement {
        start: vec2(0.0, -reach),
        goal: vec2(0.0, reach),
    }
}

/// Build the initial world: robot on its fixed crossing, pedestrians
/// rejection-sampled until starts and goals are clear of everything placed
/// before them. Fails explicitly when a spot cannot be found.
pub fn generate_scenario(
    kind: ScenarioKind,
    geom: &ScenarioGeometry,
    robot_spec: &RobotSpec,
    ped_specs: Vec<PedSpec>,
    dt: f64,
    robot_visible: bool,
    rng: &mut ChaCha8Rng,
) -> Result<WorldState, PlacementError> {
    let robot_place = robot_placement(kind, geom);
    let mut placed: Vec<(Placement, f64)> = Vec::with_capacity(ped_specs.len());

    for (i, spec) in ped_specs.iter().enumerate() {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_PLACE_ATTEMPTS {
                return Err(PlacementError {
                    kind,
                    ped: i,
                    attempts: MAX_PLACE_ATTEMPTS,
                });
            }
            let cand = draw_placement(kind, geom, rng);
            if !conflicts(
                &cand,
                spec.radius,
                &placed,
                &robot_place,
                robot_spec.radius,
                geom.spawn_clearance,
            ) {
                placed.push((cand, spec.radius));
                break;
            }
        }
    }

    let mut robot = AgentFullState::new(
        robot_place.start,
        robot_place.goal,
        robot_spec.radius,
        robot_spec.v_pref,
    );
    robot.theta = (robot.goal - robot.pos).angle();

    let peds = ped_specs
        .into_iter()
        .zip(placed)
        .map(|(spec, (place, _))| {
            let mut state = AgentFullState::new(place.start, place.goal, spec.radius, spec.v_pref);
            state.theta = (state.goal - state.pos).angle();
            Pedestrian {
                state,
                policy: spec.policy,
                rng: spec.rng,
            }
        })
        .collect();

    let perpetual = match kind {
        ScenarioKind::PerpetualRandomGoals => Some(ArenaBounds {
            half: geom.arena_half,
        }),
        _ => None,
    };

    Ok(WorldState {
        robot,
        peds,
        dt,
        steps: 0,
        robot_visible,
        perpetual,
    })
}

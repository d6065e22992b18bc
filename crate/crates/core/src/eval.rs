//! Trial scoring, tail-risk aggregation, and the paired benchmark runner.
//!
//! Every policy in one benchmark replays the identical seeded worlds, so
//! differences in the report are attributable to the policy alone. Reports
//! average each metric and add the mean of the worst 10% and 5% of trials,
//! which is where unsafe policies hide.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par::{map_indexed, ExecMode};
use crate::policies::{OrcaParams, PedPolicy, SocialForceParams};
use crate::rng::{domain, substream};
use crate::sim::scenario::{
    generate_scenario, PedSpec, PlacementError, RobotSpec, ScenarioGeometry, ScenarioKind,
};
use crate::sim::{
    run_episode, surface_distance, CollisionMode, OrcaRobot, RobotPolicy,
    SimError, Snapshot, SocialForceRobot, WorldState,
};
use crate::trainer::LearnedRobot;
use crate::uncertainty::{RhoSmoothing, UncertaintyBank};
use crate::value::{LookaheadConfig, ValueNetwork};
use crate::vec2::Vec2;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("trajectory has no steps to score")]
    EmptyTrajectory,
    #[error("tail average of an empty value list")]
    EmptyCvarInput,
    #[error("no policies to evaluate")]
    NoPolicies,
    #[error("no trials requested")]
    NoTrials,
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Personal-space Gaussian width in metres.
const PS_SIGMA: f64 = 0.5;
/// Hall's personal and intimate zone thresholds on surface distance.
const PERSONAL_SPACE: f64 = 1.2;
const INTIMATE_SPACE: f64 = 0.45;

/// Scores for one finished trial. The relative efficiency ratios are only
/// meaningful for clean runs, so they are absent unless the trial
/// succeeded without contact.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialMetrics {
    pub success: bool,
    pub timeout: bool,
    pub collision: bool,
    pub nav_time_rel: Option<f64>,
    pub path_len_rel: Option<f64>,
    /// Distinct penetration events (one per contact onset per pedestrian).
    pub n_collisions: u32,
    pub ps_cost: f64,
    /// Fraction of steps with any pedestrian closer than 1.2 m of surface.
    pub ps_violation: f64,
    /// Same with the 0.45 m intimate threshold.
    pub is_violation: f64,
}

/// Score a recorded trajectory. The first snapshot is the initial state;
/// every later one is a post-step state, and those are what get scored.
///
/// Efficiency baselines use the distance at which the goal check fires:
/// the robot is done once its body covers the goal point, so the shortest
/// possible path is the start-goal distance minus the robot radius. With
/// the raw start-goal distance a straight run would score below 1.
pub fn compute_trial_metrics(
    trajectory: &[Snapshot],
    goal: Vec2,
    v_pref: f64,
) -> Result<TrialMetrics, EvalError> {
    if trajectory.len() < 2 {
        return Err(EvalError::EmptyTrajectory);
    }
    let start = &trajectory[0];
    let steps = &trajectory[1..];
    let n_steps = steps.len() as f64;

    let mut n_collisions = 0u32;
    let mut prev_contact = vec![false; start.peds.len()];
    let mut ps_cost = 0.0;
    let mut ps_steps = 0usize;
    let mut is_steps = 0usize;
    let mut path_length = 0.0;
    let mut prev_pos = start.robot.pos;
    for snap in steps {
        path_length += snap.robot.pos.dist(prev_pos);
        prev_pos = snap.robot.pos;
        let mut any_personal = false;
        let mut any_intimate = false;
        for (i, ped) in snap.peds.iter().enumerate() {
            let d_center = snap.robot.pos.dist(ped.obs.pos);
            ps_cost += (-d_center * d_center / (2.0 * PS_SIGMA * PS_SIGMA)).exp();
            let d_surf = surface_distance(
                snap.robot.pos,
                snap.robot.radius,
                ped.obs.pos,
                ped.obs.radius,
            );
            any_personal |= d_surf < PERSONAL_SPACE;
            any_intimate |= d_surf < INTIMATE_SPACE;
            let contact = d_surf < 0.0;
            if contact && !prev_contact[i] {
                n_collisions += 1;
            }
            prev_contact[i] = contact;
        }
        ps_steps += any_personal as usize;
        is_steps += any_intimate as usize;
    }

    let last = steps.last().unwrap();
    let reached = last.robot.pos.dist(goal) - last.robot.radius < 0.0;
    let collision = n_collisions > 0;
    let success = reached && !collision;
    let timeout = !reached && !collision;

    let (nav_time_rel, path_len_rel) = if success {
        let ideal_dist = (start.robot.pos.dist(goal) - start.robot.radius).max(1e-9);
        let elapsed = last.time - start.time;
        (
            Some(elapsed / (ideal_dist / v_pref)),
            Some(path_length / ideal_dist),
        )
    } else {
        (None, None)
    };

    Ok(TrialMetrics {
        success,
        timeout,
        collision,
        nav_time_rel,
        path_len_rel,
        n_collisions,
        ps_cost,
        ps_violation: ps_steps as f64 / n_steps,
        is_violation: is_steps as f64 / n_steps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CvarDirection {
    /// Hardest trials are the largest values.
    Cost,
    /// Hardest trials are the smallest values.
    Benefit,
}

/// Indices of the worst ceil(q*n) values under the direction ordering,
/// ties resolved toward earlier input positions.
pub fn worst_indices(values: &[f64], q: f64, dir: CvarDirection) -> Vec<usize> {
    assert!(q > 0.0 && q <= 1.0);
    let k = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len().max(1));
    let mut idx: Vec<usize> = (0..values.len()).collect();
    // Stable sort keeps equal values in input order.
    match dir {
        CvarDirection::Cost => idx.sort_by(|&a, &b| values[b].total_cmp(&values[a])),
        CvarDirection::Benefit => idx.sort_by(|&a, &b| values[a].total_cmp(&values[b])),
    }
    idx.truncate(k);
    idx
}

/// Mean of the worst ceil(q*n) values: the expected outcome conditional on
/// landing in the hardest q-tail.
pub fn cvar(values: &[f64], q: f64, dir: CvarDirection) -> Result<f64, EvalError> {
    if values.is_empty() {
        return Err(EvalError::EmptyCvarInput);
    }
    let idx = worst_indices(values, q, dir);
    Ok(idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64)
}

/// Mean, tail-10%, tail-5% of a cost-like metric; None when there are no
/// values (e.g. relative time with zero clean successes).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    pub cvar10: Option<f64>,
    pub cvar05: Option<f64>,
}

fn summarize(values: &[f64]) -> MetricSummary {
    if values.is_empty() {
        return MetricSummary::default();
    }
    MetricSummary {
        mean: Some(values.iter().sum::<f64>() / values.len() as f64),
        cvar10: cvar(values, 0.10, CvarDirection::Cost).ok(),
        cvar05: cvar(values, 0.05, CvarDirection::Cost).ok(),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PolicyAggregate {
    pub policy: String,
    pub trials: u64,
    pub success_rate: f64,
    pub timeout_rate: f64,
    pub collision_rate: f64,
    pub total_collisions: u64,
    pub nav_time_rel: MetricSummary,
    pub path_len_rel: MetricSummary,
    pub ps_cost: MetricSummary,
    pub ps_violation: MetricSummary,
    pub is_violation: MetricSummary,
}

#[derive(Clone, Debug)]
pub struct TrialRecord {
    pub trial: u64,
    pub policy: String,
    pub world_hash: u64,
    pub metrics: TrialMetrics,
}

#[derive(Clone, Debug)]
pub struct RecordedTrial {
    pub trial: u64,
    pub policy: String,
    pub trajectory: Vec<Snapshot>,
}

#[derive(Clone, Debug)]
pub struct BenchmarkReport {
    pub policies: Vec<PolicyAggregate>,
    pub trials: Vec<TrialRecord>,
    pub trajectories: Vec<RecordedTrial>,
}

/// A navigation policy under test.
pub enum EvalPolicyKind<'a> {
    Orca,
    SocialForce,
    Learned {
        net: &'a ValueNetwork,
        lookahead: LookaheadConfig,
        bank: Option<&'a UncertaintyBank>,
        smoothing: RhoSmoothing,
    },
}

pub struct EvalPolicy<'a> {
    pub name: String,
    pub kind: EvalPolicyKind<'a>,
}

impl<'a> EvalPolicy<'a> {
    fn build(&self) -> Box<dyn RobotPolicy + 'a> {
        match &self.kind {
            EvalPolicyKind::Orca => Box::new(OrcaRobot::default()),
            EvalPolicyKind::SocialForce => Box::new(SocialForceRobot::default()),
            EvalPolicyKind::Learned {
                net,
                lookahead,
                bank,
                smoothing,
            } => Box::new(LearnedRobot::new(net, *lookahead, *bank, *smoothing)),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub trials: u64,
    /// Scenario kinds drawn uniformly per trial.
    pub scenarios: Vec<ScenarioKind>,
    pub geometry: ScenarioGeometry,
    pub peds_min: usize,
    pub peds_max: usize,
    pub dt: f64,
    pub time_limit: f64,
    pub robot: RobotSpec,
    pub robot_visible: bool,
    pub ped_v_pref: (f64, f64),
    pub ped_radius: (f64, f64),
    pub orca_horizon: (f64, f64),
    pub sf_repulsion: (f64, f64),
    pub record_trajectories: bool,
}

impl Default for BenchmarkConfig {
    fn default() -> BenchmarkConfig {
        BenchmarkConfig {
            trials: 100,
            scenarios: ScenarioKind::all().to_vec(),
            geometry: ScenarioGeometry::default(),
            peds_min: 1,
            peds_max: 20,
            dt: 0.25,
            time_limit: 30.0,
            robot: RobotSpec::default(),
            robot_visible: false,
            ped_v_pref: (0.6, 1.4),
            ped_radius: (0.25, 0.4),
            orca_horizon: (2.0, 8.0),
            sf_repulsion: (1.0, 3.0),
            record_trajectories: false,
        }
    }
}

/// Mixed-crowd pedestrian: one of three behaviors with randomized
/// parameters, drawn uniformly.
fn sample_ped_policy(cfg: &BenchmarkConfig, rng: &mut ChaCha8Rng) -> PedPolicy {
    match rng.gen_range(0u32..3) {
        0 => PedPolicy::Orca(OrcaParams {
            time_horizon: rng.gen_range(cfg.orca_horizon.0..cfg.orca_horizon.1),
            ..OrcaParams::default()
        }),
        1 => PedPolicy::SocialForce(SocialForceParams {
            repulsion_gain: rng.gen_range(cfg.sf_repulsion.0..cfg.sf_repulsion.1),
            ..SocialForceParams::default()
        }),
        _ => PedPolicy::Linear,
    }
}

fn benchmark_world(
    cfg: &BenchmarkConfig,
    seed: u64,
    trial: u64,
) -> Result<WorldState, PlacementError> {
    let mut scen_rng = substream(seed, &[domain::SCENARIO, trial]);
    let kind = cfg.scenarios[scen_rng.gen_range(0..cfg.scenarios.len())];
    let n_peds = scen_rng.gen_range(cfg.peds_min..=cfg.peds_max);
    let specs: Vec<PedSpec> = (0..n_peds as u64)
        .map(|i| {
            let mut assign_rng = substream(seed, &[domain::POLICY_ASSIGN, trial, i]);
            PedSpec {
                radius: assign_rng.gen_range(cfg.ped_radius.0..cfg.ped_radius.1),
                v_pref: assign_rng.gen_range(cfg.ped_v_pref.0..cfg.ped_v_pref.1),
                policy: sample_ped_policy(cfg, &mut assign_rng),
                rng: substream(seed, &[domain::PED_POLICY, trial, i]),
            }
        })
        .collect();
    generate_scenario(
        kind,
        &cfg.geometry,
        &cfg.robot,
        specs,
        cfg.dt,
        cfg.robot_visible,
        &mut scen_rng,
    )
}

/// Initial-world fingerprint used to verify that every policy saw the same
/// trial. FNV-1a over the canonical bit pattern of the placement.
pub fn world_fingerprint(world: &WorldState) -> u64 {
    fn eat_bytes(h: &mut u64, bytes: &[u8]) {
        for &byte in bytes {
            *h ^= byte as u64;
            *h = h.wrapping_mul(0x100000001b3);
        }
    }
    fn eat(h: &mut u64, x: f64) {
        eat_bytes(h, &x.to_bits().to_le_bytes());
    }
    let mut h = 0xcbf29ce484222325u64;
    eat(&mut h, world.robot.pos.x);
    eat(&mut h, world.robot.pos.y);
    eat(&mut h, world.robot.goal.x);
    eat(&mut h, world.robot.goal.y);
    eat(&mut h, world.robot.radius);
    eat(&mut h, world.robot.v_pref);
    for p in &world.peds {
        eat(&mut h, p.state.pos.x);
        eat(&mut h, p.state.pos.y);
        eat(&mut h, p.state.goal.x);
        eat(&mut h, p.state.goal.y);
        eat(&mut h, p.state.radius);
        eat(&mut h, p.state.v_pref);
        eat(&mut h, p.policy.rho().unwrap_or(-1.0));
        eat_bytes(&mut h, p.policy.tag().as_str().as_bytes());
    }
    h
}

struct TrialRun {
    metrics: TrialMetrics,
    world_hash: u64,
    trajectory: Option<Vec<Snapshot>>,
}

fn run_trial(
    world: &mut WorldState,
    policy: &mut dyn RobotPolicy,
    time_limit: f64,
    keep_trajectory: bool,
) -> Result<TrialRun, EvalError> {
    let world_hash = world_fingerprint(world);
    let goal = world.robot.goal;
    let v_pref = world.robot.v_pref;
    let outcome = run_episode(world, policy, CollisionMode::CountContacts, time_limit, true)?;
    let metrics = compute_trial_metrics(&outcome.trajectory, goal, v_pref)?;
    Ok(TrialRun {
        metrics,
        world_hash,
        trajectory: keep_trajectory.then(|| outcome.trajectory),
    })
}

fn aggregate(policy: &str, rows: &[&TrialMetrics]) -> PolicyAggregate {
    let n = rows.len() as f64;
    let nav: Vec<f64> = rows.iter().filter_map(|m| m.nav_time_rel).collect();
    let path: Vec<f64> = rows.iter().filter_map(|m| m.path_len_rel).collect();
    let ps: Vec<f64> = rows.iter().map(|m| m.ps_cost).collect();
    let psv: Vec<f64> = rows.iter().map(|m| m.ps_violation).collect();
    let isv: Vec<f64> = rows.iter().map(|m| m.is_violation).collect();
    PolicyAggregate {
        policy: policy.to_string(),
        trials: rows.len() as u64,
        success_rate: rows.iter().filter(|m| m.success).count() as f64 / n,
        timeout_rate: rows.iter().filter(|m| m.timeout).count() as f64 / n,
        collision_rate: rows.iter().filter(|m| m.collision).count() as f64 / n,
        total_collisions: rows.iter().map(|m| m.n_collisions as u64).sum(),
        nav_time_rel: summarize(&nav),
        path_len_rel: summarize(&path),
        ps_cost: summarize(&ps),
        ps_violation: summarize(&psv),
        is_violation: summarize(&isv),
    }
}

/// Run every policy over the identical seeded trial sequence and aggregate.
/// Trials fan out across the execution mode; the reduction is ordered, so
/// reports are deterministic for a given seed regardless of mode.
pub fn run_benchmark(
    policies: &[EvalPolicy],
    cfg: &BenchmarkConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<BenchmarkReport, EvalError> {
    if policies.is_empty() {
        return Err(EvalError::NoPolicies);
    }
    if cfg.trials == 0 {
        return Err(EvalError::NoTrials);
    }
    let per_trial: Vec<Result<Vec<TrialRun>, EvalError>> =
        map_indexed(mode, cfg.trials as usize, |trial| {
            let mut runs = Vec::with_capacity(policies.len());
            for policy in policies {
                let mut world = benchmark_world(cfg, seed, trial as u64)?;
                let mut robot = policy.build();
                runs.push(run_trial(
                    &mut world,
                    robot.as_mut(),
                    cfg.time_limit,
                    cfg.record_trajectories,
                )?);
            }
            // Paired-design self-check: one trial, one world, every policy.
            for run in &runs[1..] {
                assert_eq!(
                    run.world_hash, runs[0].world_hash,
                    "trial {trial} diverged between policies"
                );
            }
            Ok(runs)
        });

    let mut trials = Vec::new();
    let mut trajectories = Vec::new();
    let mut per_policy: Vec<Vec<TrialMetrics>> = vec![Vec::new(); policies.len()];
    for (trial, runs) in per_trial.into_iter().enumerate() {
        for (p, run) in runs?.into_iter().enumerate() {
            trials.push(TrialRecord {
                trial: trial as u64,
                policy: policies[p].name.clone(),
                world_hash: run.world_hash,
                metrics: run.metrics.clone(),
            });
            if let Some(traj) = run.trajectory {
                trajectories.push(RecordedTrial {
                    trial: trial as u64,
                    policy: policies[p].name.clone(),
                    trajectory: traj,
                });
            }
            per_policy[p].push(run.metrics);
        }
    }
    let policies_agg = policies
        .iter()
        .zip(&per_policy)
        .map(|(p, rows)| aggregate(&p.name, &rows.iter().collect::<Vec<_>>()))
        .collect();
    Ok(BenchmarkReport {
        policies: policies_agg,
        trials,
        trajectories,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One row per policy, metric, statistic. Stable order, fixed precision:
/// rerunning the same seed reproduces this byte for byte.
pub fn report_csv(report: &BenchmarkReport) -> String {
    let mut out = String::from("policy,metric,stat,value\n");
    for p in &report.policies {
        let mut row = |metric: &str, stat: &str, value: String| {
            let _ = writeln!(out, "{},{metric},{stat},{value}", p.policy);
        };
        row("success_rate", "mean", format!("{:.6}", p.success_rate));
        row("timeout_rate", "mean", format!("{:.6}", p.timeout_rate));
        row("collision_rate", "mean", format!("{:.6}", p.collision_rate));
        row("n_collisions", "total", p.total_collisions.to_string());
        for (name, s) in [
            ("nav_time_rel", &p.nav_time_rel),
            ("path_len_rel", &p.path_len_rel),
            ("ps_cost", &p.ps_cost),
            ("ps_violation", &p.ps_violation),
            ("is_violation", &p.is_violation),
        ] {
            row(name, "mean", fmt_opt(s.mean));
            row(name, "cvar10", fmt_opt(s.cvar10));
            row(name, "cvar05", fmt_opt(s.cvar05));
        }
    }
    out
}

/// Per-trial table, one row per policy per trial.
pub fn trials_csv(report: &BenchmarkReport) -> String {
    let mut out = String::from(
        "trial,policy,success,timeout,collision,nav_time_rel,path_len_rel,\
         n_collisions,ps_cost,ps_violation,is_violation,world_hash\n",
    );
    for r in &report.trials {
        let m = &r.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:016x}",
            r.trial,
            r.policy,
            m.success as u8,
            m.timeout as u8,
            m.collision as u8,
            fmt_opt(m.nav_time_rel),
            fmt_opt(m.path_len_rel),
            m.n_collisions,
            m.ps_cost,
            m.ps_violation,
            m.is_violation,
            r.world_hash,
        );
    }
    out
}

/// Human-readable summary: one block per policy, means on the first line,
/// tail values beneath.
pub fn text_table(report: &BenchmarkReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>8} {:>8} {:>8} {:>9} {:>9} {:>7} {:>9} {:>8} {:>8}",
        "policy",
        "success",
        "timeout",
        "collide",
        "nav_time",
        "path_len",
        "n_coll",
        "ps_cost",
        "ps_viol",
        "is_viol"
    );
    let pct = |x: f64| format!("{:.1}%", 100.0 * x);
    let f2 = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
    for p in &report.policies {
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>8} {:>8} {:>9} {:>9} {:>7} {:>9} {:>8} {:>8}",
            p.policy,
            pct(p.success_rate),
            pct(p.timeout_rate),
            pct(p.collision_rate),
            f2(p.nav_time_rel.mean),
            f2(p.path_len_rel.mean),
            p.total_collisions,
            f2(p.ps_cost.mean),
            f2(p.ps_violation.mean.map(|x| 100.0 * x)),
            f2(p.is_violation.mean.map(|x| 100.0 * x)),
        );
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>8} {:>8} {:>9} {:>9} {:>7} {:>9} {:>8} {:>8}",
            "  (10%/5% tail)",
            "",
            "",
            "",
            format!("{}/{}", f2(p.nav_time_rel.cvar10), f2(p.nav_time_rel.cvar05)),
            format!("{}/{}", f2(p.path_len_rel.cvar10), f2(p.path_len_rel.cvar05)),
            "",
            format!("{}/{}", f2(p.ps_cost.cvar10), f2(p.ps_cost.cvar05)),
            format!(
                "{}/{}",
                f2(p.ps_violation.cvar10.map(|x| 100.0 * x)),
                f2(p.ps_violation.cvar05.map(|x| 100.0 * x))
            ),
            format!(
                "{}/{}",
                f2(p.is_violation.cvar10.map(|x| 100.0 * x)),
                f2(p.is_violation.cvar05.map(|x| 100.0 * x))
            ),
        );
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub trials: u64,
    pub scenario: ScenarioKind,
    pub geometry: ScenarioGeometry,
    pub peds: usize,
    pub dt: f64,
    pub time_limit: f64,
    pub robot: RobotSpec,
    pub robot_visible: bool,
    pub ped_radius: f64,
    pub ped_v_pref: f64,
}

impl Default for SweepConfig {
    fn default() -> SweepConfig {
        SweepConfig {
            trials: 500,
            scenario: ScenarioKind::CircleCrossing,
            geometry: ScenarioGeometry::default(),
            peds: 5,
            dt: 0.25,
            time_limit: 30.0,
            robot: RobotSpec::default(),
            robot_visible: false,
            ped_radius: 0.3,
            ped_v_pref: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub rho_max: f64,
    pub policy: String,
    pub trials: u64,
    pub success_rate: f64,
    pub collision_rate: f64,
    pub timeout_rate: f64,
    pub total_collisions: u64,
}

fn sweep_world(
    cfg: &SweepConfig,
    seed: u64,
    grid_index: u64,
    trial: u64,
    rho_max: f64,
) -> Result<WorldState, PlacementError> {
    let mut rho_rng = substream(seed, &[domain::EPISODE_RHO, grid_index, trial]);
    let specs: Vec<PedSpec> = (0..cfg.peds as u64)
        .map(|i| {
            let rho = if rho_max == 0.0 {
                0.0
            } else {
                rho_rng.gen_range(0.0..rho_max)
            };
            PedSpec {
                radius: cfg.ped_radius,
                v_pref: cfg.ped_v_pref,
                policy: PedPolicy::NoisyOrca {
                    params: OrcaParams::default(),
                    rho,
                },
                rng: substream(seed, &[domain::PED_POLICY, grid_index, trial, i]),
            }
        })
        .collect();
    let mut scen_rng = substream(seed, &[domain::SCENARIO, grid_index, trial]);
    generate_scenario(
        cfg.scenario,
        &cfg.geometry,
        &cfg.robot,
        specs,
        cfg.dt,
        cfg.robot_visible,
        &mut scen_rng,
    )
}

/// Outcome-rate curves over a grid of deviation ceilings. Policies are
/// paired within each grid point exactly like the benchmark.
pub fn sweep_noisy_eval(
    policies: &[EvalPolicy],
    grid: &[f64],
    cfg: &SweepConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<SweepPoint>, EvalError> {
    if policies.is_empty() {
        return Err(EvalError::NoPolicies);
    }
    if cfg.trials == 0 {
        return Err(EvalError::NoTrials);
    }
    assert!(grid.iter().all(|&g| (0.0..=1.0).contains(&g)));
    let mut points = Vec::with_capacity(grid.len() * policies.len());
    for (gi, &rho_max) in grid.iter().enumerate() {
        let per_trial: Vec<Result<Vec<TrialRun>, EvalError>> =
            map_indexed(mode, cfg.trials as usize, |trial| {
                let mut runs = Vec::with_capacity(policies.len());
                for policy in policies {
                    let mut world = sweep_world(cfg, seed, gi as u64, trial as u64, rho_max)?;
                    let mut robot = policy.build();
                    runs.push(run_trial(&mut world, robot.as_mut(), cfg.time_limit, false)?);
                }
                for run in &runs[1..] {
                    assert_eq!(
                        run.world_hash, runs[0].world_hash,
                        "trial {trial} diverged between policies"
                    );
                }
                Ok(runs)
            });
        let mut per_policy: Vec<Vec<TrialMetrics>> = vec![Vec::new(); policies.len()];
        for runs in per_trial {
            for (p, run) in runs?.into_iter().enumerate() {
                per_policy[p].push(run.metrics);
            }
        }
        for (p, rows) in policies.iter().zip(&per_policy) {
            let agg = aggregate(&p.name, &rows.iter().collect::<Vec<_>>());
            points.push(SweepPoint {
                rho_max,
                policy: p.name.clone(),
                trials: agg.trials,
                success_rate: agg.success_rate,
                collision_rate: agg.collision_rate,
                timeout_rate: agg.timeout_rate,
                total_collisions: agg.total_collisions,
            });
        }
    }
    Ok(points)
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out =
        String::from("rho_max,policy,trials,success_rate,collision_rate,timeout_rate,n_collisions\n");
    for p in points {
        let _ = writeln!(
            out,
            "{:.3},{},{},{:.6},{:.6},{:.6},{}",
            p.rho_max,
            p.policy,
            p.trials,
            p.success_rate,
            p.collision_rate,
            p.timeout_rate,
            p.total_collisions,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{AgentFullState, PedSnapshot, PedestrianObservable};
    use crate::vec2::vec2;

    fn snapshot_at(time: f64, robot_pos: Vec2, ped_pos: Option<Vec2>) -> Snapshot {
        let mut robot = AgentFullState::new(robot_pos, vec2(10.0, 0.0), 0.3, 1.0);
        robot.vel = vec2(1.0, 0.0);
        Snapshot {
            time,
            robot,
            peds: ped_pos
                .map(|pos| PedSnapshot {
                    obs: PedestrianObservable {
                        pos,
                        vel: Vec2::ZERO,
                        radius: 0.3,
                    },
                    rho_true: None,
                    rho_hat: None,
                })
                .into_iter()
                .collect(),
        }
    }

    #[test]
    fn cvar_matches_hand_values() {
        let v: Vec<f64> = (1..=10).map(|x| x as f64).collect();
        assert_eq!(cvar(&v, 0.10, CvarDirection::Cost).unwrap(), 10.0);
        assert_eq!(cvar(&v, 0.50, CvarDirection::Cost).unwrap(), 8.0);
        assert_eq!(cvar(&v, 0.10, CvarDirection::Benefit).unwrap(), 1.0);
        let constant = vec![4.2; 17];
        for q in [0.05, 0.10, 0.5, 1.0] {
            let c = cvar(&constant, q, CvarDirection::Cost).unwrap();
            assert!((c - 4.2).abs() < 1e-12, "{c}");
        }
        assert!(matches!(
            cvar(&[], 0.1, CvarDirection::Cost),
            Err(EvalError::EmptyCvarInput)
        ));
    }

    #[test]
    fn cvar_tail_nesting_is_monotone() {
        let mut rng = substream(3, &[0xe0]);
        let v: Vec<f64> = (0..200).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let c10 = cvar(&v, 0.10, CvarDirection::Cost).unwrap();
        let c05 = cvar(&v, 0.05, CvarDirection::Cost).unwrap();
        assert!(c05 >= c10);
    }

    #[test]
    fn cvar_ties_resolve_in_input_order() {
        assert_eq!(worst_indices(&[3.0, 1.0, 3.0], 0.6, CvarDirection::Cost), vec![0, 2]);
        assert_eq!(
            worst_indices(&[2.0, 2.0, 2.0, 5.0], 0.5, CvarDirection::Benefit),
            vec![0, 1]
        );
    }

    #[test]
    fn straight_unobstructed_run_scores_unit_ratios() {
        let mut scen_rng = substream(5, &[domain::SCENARIO, 0]);
        let mut world = generate_scenario(
            ScenarioKind::CircleCrossing,
            &ScenarioGeometry::default(),
            &RobotSpec::default(),
            Vec::new(),
            0.25,
            false,
            &mut scen_rng,
        )
        .unwrap();
        let goal = world.robot.goal;
        let mut robot = OrcaRobot::default();
        let outcome = run_episode(
            &mut world,
            &mut robot,
            CollisionMode::CountContacts,
            30.0,
            true,
        )
        .unwrap();
        let m = compute_trial_metrics(&outcome.trajectory, goal, 1.0).unwrap();
        assert!(m.success && !m.timeout && !m.collision);
        let one_step_slack = 1.0 + 0.25 / (world.robot.pos.dist(goal) / 1.0 - 0.3).max(1.0);
        let nav = m.nav_time_rel.unwrap();
        let path = m.path_len_rel.unwrap();
        assert!(nav >= 1.0 - 1e-9 && nav <= one_step_slack + 0.05, "nav {nav}");
        assert!(path >= 1.0 - 1e-9 && path <= one_step_slack + 0.05, "path {path}");
        assert_eq!(m.ps_cost, 0.0);
        assert_eq!(m.ps_violation, 0.0);
        assert_eq!(m.is_violation, 0.0);
        assert_eq!(m.n_collisions, 0);
    }

    #[test]
    fn distant_pedestrian_never_violates() {
        let traj: Vec<Snapshot> = (0..12)
            .map(|k| snapshot_at(k as f64 * 0.25, vec2(k as f64 * 0.25, 0.0), Some(vec2(0.0, 50.0))))
            .collect();
        let m = compute_trial_metrics(&traj, vec2(10.0, 0.0), 1.0).unwrap();
        assert_eq!(m.ps_violation, 0.0);
        assert_eq!(m.is_violation, 0.0);
        assert!(m.ps_cost < 1e-300);
    }

    #[test]
    fn constant_half_metre_pedestrian_costs_exp_half_per_step() {
        let steps = 10;
        let traj: Vec<Snapshot> = (0..=steps)
            .map(|k| {
                let x = k as f64 * 0.25;
                snapshot_at(k as f64 * 0.25, vec2(x, 0.0), Some(vec2(x, 0.5)))
            })
            .collect();
        let m = compute_trial_metrics(&traj, vec2(100.0, 0.0), 1.0).unwrap();
        let expected = steps as f64 * (-0.5f64).exp();
        assert!((m.ps_cost - expected).abs() < 1e-12, "{} vs {expected}", m.ps_cost);
        // 0.5 m centres with 0.3 m radii leave negative surface clearance.
        assert_eq!(m.ps_violation, 1.0);
        assert_eq!(m.is_violation, 1.0);
    }

    #[test]
    fn collision_onsets_count_rising_edges_only() {
        // In at steps 1-2, out at 3, in again at 4: two onsets.
        let positions = [0.55, 0.55, 2.0, 0.55];
        let traj: Vec<Snapshot> = std::iter::once(snapshot_at(0.0, vec2(0.0, 0.0), Some(vec2(2.0, 0.0))))
            .chain(
                positions
                    .iter()
                    .enumerate()
                    .map(|(k, &d)| snapshot_at((k + 1) as f64 * 0.25, vec2(0.0, 0.0), Some(vec2(d, 0.0)))),
            )
            .collect();
        let m = compute_trial_metrics(&traj, vec2(100.0, 0.0), 1.0).unwrap();
        assert_eq!(m.n_collisions, 2);
        assert!(m.collision && !m.success && !m.timeout);
        assert_eq!(m.nav_time_rel, None);
        assert_eq!(m.path_len_rel, None);
    }

    #[test]
    fn metrics_agree_with_episode_contact_counter() {
        // Stationary invisible robot parked on a crossing pedestrian's path.
        let mut scen_rng = substream(40, &[domain::SCENARIO, 1]);
        let mut world = generate_scenario(
            ScenarioKind::CircleCrossing,
            &ScenarioGeometry::default(),
            &RobotSpec::default(),
            vec![PedSpec {
                radius: 0.3,
                v_pref: 1.0,
                policy: PedPolicy::Linear,
                rng: substream(40, &[domain::PED_POLICY, 1]),
            }],
            0.25,
            false,
            &mut scen_rng,
        )
        .unwrap();
        // Park the robot dead on the pedestrian's straight line to its
        // goal; its own goal stays unreachable so the run times out.
        let ped = world.peds[0].state;
        world.robot.pos = 0.5 * (ped.pos + ped.goal);
        world.robot.goal = vec2(50.0, 50.0);
        struct Freeze;
        impl RobotPolicy for Freeze {
            fn act(&mut self, _view: &RobotView) -> crate::action::DiscreteAction {
                crate::action::DiscreteAction::Stop
            }
        }
        let goal = world.robot.goal;
        let outcome = run_episode(
            &mut world,
            &mut Freeze,
            CollisionMode::CountContacts,
            30.0,
            true,
        )
        .unwrap();
        let m = compute_trial_metrics(&outcome.trajectory, goal, 1.0).unwrap();
        assert!(m.n_collisions > 0, "pedestrian should plough through");
        assert_eq!(m.n_collisions, outcome.contact_events);
    }

    use crate::sim::RobotView;

    #[test]
    fn empty_trajectory_is_an_error() {
        assert!(matches!(
            compute_trial_metrics(&[], vec2(0.0, 0.0), 1.0),
            Err(EvalError::EmptyTrajectory)
        ));
        let only_initial = [snapshot_at(0.0, vec2(0.0, 0.0), None)];
        assert!(matches!(
            compute_trial_metrics(&only_initial, vec2(0.0, 0.0), 1.0),
            Err(EvalError::EmptyTrajectory)
        ));
    }

    #[test]
    fn ped_policy_assignment_is_uniform_over_tags() {
        let cfg = BenchmarkConfig::default();
        let mut counts = [0u32; 3];
        for i in 0..3000u64 {
            let mut rng = substream(99, &[domain::POLICY_ASSIGN, i]);
            match sample_ped_policy(&cfg, &mut rng) {
                PedPolicy::Orca(p) => {
                    assert!((2.0..8.0).contains(&p.time_horizon));
                    counts[0] += 1;
                }
                PedPolicy::SocialForce(p) => {
                    assert!((1.0..3.0).contains(&p.repulsion_gain));
                    counts[1] += 1;
                }
                PedPolicy::Linear => counts[2] += 1,
                PedPolicy::NoisyOrca { .. } => panic!("mixed crowds have no noisy tag"),
            }
        }
        let expected = 1000.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 2 degrees of freedom; 13.8 is the 99.9th percentile.
        assert!(chi2 < 13.8, "chi2 {chi2}");
    }

    #[test]
    fn single_trial_report_reduces_to_that_trial() {
        let cfg = BenchmarkConfig {
            trials: 1,
            peds_min: 2,
            peds_max: 3,
            ..BenchmarkConfig::default()
        };
        let policies = [EvalPolicy {
            name: "orca".into(),
            kind: EvalPolicyKind::Orca,
        }];
        let report = run_benchmark(&policies, &cfg, 7, ExecMode::Sequential).unwrap();
        assert_eq!(report.trials.len(), 1);
        let agg = &report.policies[0];
        let m = &report.trials[0].metrics;
        assert_eq!(agg.trials, 1);
        assert_eq!(agg.success_rate, m.success as u8 as f64);
        assert_eq!(agg.total_collisions, m.n_collisions as u64);
        assert_eq!(agg.ps_cost.mean, Some(m.ps_cost));
        assert_eq!(agg.ps_cost.cvar10, Some(m.ps_cost));
    }

    #[test]
    fn benchmark_reports_are_reproducible_and_paired() {
        let cfg = BenchmarkConfig {
            trials: 4,
            peds_min: 1,
            peds_max: 6,
            ..BenchmarkConfig::default()
        };
        let policies = || {
            [
                EvalPolicy {
                    name: "orca".into(),
                    kind: EvalPolicyKind::Orca,
                },
                EvalPolicy {
                    name: "social_force".into(),
                    kind: EvalPolicyKind::SocialForce,
                },
            ]
        };
        let a = run_benchmark(&policies(), &cfg, 11, ExecMode::Sequential).unwrap();
        let b = run_benchmark(&policies(), &cfg, 11, ExecMode::Parallel).unwrap();
        assert_eq!(report_csv(&a), report_csv(&b));
        assert_eq!(trials_csv(&a), trials_csv(&b));
        let c = run_benchmark(&policies(), &cfg, 12, ExecMode::Sequential).unwrap();
        assert_ne!(report_csv(&a), report_csv(&c));
        // Rates add to one and the paired worlds matched per trial.
        for p in &a.policies {
            assert!((p.success_rate + p.timeout_rate + p.collision_rate - 1.0).abs() < 1e-12);
        }
        for pair in a.trials.chunks(2) {
            assert_eq!(pair[0].trial, pair[1].trial);
            assert_eq!(pair[0].world_hash, pair[1].world_hash);
        }
    }

    #[test]
    fn sweep_rates_sum_to_one_and_zero_noise_is_plain_orca() {
        let cfg = SweepConfig {
            trials: 6,
            peds: 3,
            ..SweepConfig::default()
        };
        let policies = [EvalPolicy {
            name: "orca".into(),
            kind: EvalPolicyKind::Orca,
        }];
        let points = sweep_noisy_eval(&policies, &[0.0, 0.4], &cfg, 21, ExecMode::Sequential).unwrap();
        assert_eq!(points.len(), 2);
        for p in &points {
            assert!((p.success_rate + p.collision_rate + p.timeout_rate - 1.0).abs() < 1e-12);
        }
        // At the zero point every pedestrian's mixture weight is exactly 0,
        // and zero-weight noise leaves the deterministic command bitwise
        // unchanged, so the world must match a plain reciprocal crowd.
        let mut noisy = sweep_world(&cfg, 21, 0, 0, 0.0).unwrap();
        let mut plain = sweep_world(&cfg, 21, 0, 0, 0.0).unwrap();
        for ped in &mut plain.peds {
            ped.policy = PedPolicy::Orca(OrcaParams::default());
        }
        let mut robot_a = OrcaRobot::default();
        let mut robot_b = OrcaRobot::default();
        let out_a = run_episode(&mut noisy, &mut robot_a, CollisionMode::CountContacts, 30.0, true).unwrap();
        let out_b = run_episode(&mut plain, &mut robot_b, CollisionMode::CountContacts, 30.0, true).unwrap();
        assert_eq!(out_a.trajectory.len(), out_b.trajectory.len());
        for (sa, sb) in out_a.trajectory.iter().zip(&out_b.trajectory) {
            assert_eq!(sa.robot.pos, sb.robot.pos);
            for (pa, pb) in sa.peds.iter().zip(&sb.peds) {
                assert_eq!(pa.obs.pos, pb.obs.pos);
                assert_eq!(pa.obs.vel, pb.obs.vel);
            }
        }
    }

    #[test]
    fn csv_shapes_are_stable() {
        let cfg = BenchmarkConfig {
            trials: 2,
            peds_min: 1,
            peds_max: 2,
            ..BenchmarkConfig::default()
        };
        let policies = [EvalPolicy {
            name: "orca".into(),
            kind: EvalPolicyKind::Orca,
        }];
        let report = run_benchmark(&policies, &cfg, 31, ExecMode::Sequential).unwrap();
        let csv = report_csv(&report);
        // 3 rate rows + 1 total + 5 metrics x 3 stats, plus the header.
        assert_eq!(csv.lines().count(), 1 + 3 + 1 + 15);
        assert!(csv.starts_with("policy,metric,stat,value\n"));
        let trials = trials_csv(&report);
        assert_eq!(trials.lines().count(), 1 + 2);
        let table = text_table(&report);
        assert_eq!(table.lines().count(), 1 + 2);
    }
}

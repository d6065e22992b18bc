//! Value-iteration training: replay buffer seeded by expert demonstrations,
//! one-step bootstrapped targets against a periodically frozen copy of the
//! network, epsilon-greedy exploration, and a curriculum that raises the
//! pedestrians' deviation ceiling as episodes pass.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::DiscreteAction;
use crate::nn::checkpoint::{CheckpointError, CheckpointMeta};
use crate::nn::NetError;
use crate::obs::{ThetaMode, TrackHistory};
use crate::policies::{OrcaParams, PedPolicy};
use crate::reward::{default_reward, modified_reward, RewardParams};
use crate::rng::{domain, substream};
use crate::sim::scenario::{
    generate_scenario, PedSpec, PlacementError, RobotSpec, ScenarioGeometry, ScenarioKind,
};
use crate::sim::{
    step_environment, AgentFullState, EpisodeStatus, OrcaRobot, PedestrianObservable, RobotPolicy,
    RobotView, SimError, WorldState,
};
use crate::uncertainty::{RhoSmoothing, UncertaintyBank};
use crate::value::{
    discount_factor, epsilon_greedy, load_value_net, save_value_net, select_action, CrowdState,
    DiscountMode, LookaheadConfig, RewardKind, ValueGrads, ValueNetwork,
};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingHyperparams {
    pub gamma: f64,
    pub lr: f64,
    pub batch: usize,
    pub episodes: usize,
    /// Episodes between target-network refreshes.
    pub target_update: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Episodes over which epsilon decays linearly before going flat.
    pub eps_decay: usize,
    pub momentum: f64,
    /// Step budget per episode.
    pub t_max: usize,
}

impl Default for TrainingHyperparams {
    fn default() -> TrainingHyperparams {
        TrainingHyperparams {
            gamma: 0.9,
            lr: 1e-3,
            batch: 100,
            episodes: 12_000,
            target_update: 50,
            eps_start: 0.5,
            eps_end: 0.1,
            eps_decay: 4000,
            momentum: 0.9,
            t_max: 120,
        }
    }
}

impl TrainingHyperparams {
    pub fn validate(&self) {
        assert!(self.gamma > 0.0 && self.lr > 0.0 && self.momentum >= 0.0);
        assert!(self.batch > 0 && self.episodes > 0 && self.target_update > 0);
        assert!(self.eps_decay > 0 && self.t_max > 0);
        assert!(self.eps_end <= self.eps_start);
    }
}

/// Pedestrian deviation ceiling as a function of the episode index.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub step_size: f64,
    pub interval: usize,
    pub cap: f64,
}

impl Default for CurriculumConfig {
    fn default() -> CurriculumConfig {
        CurriculumConfig {
            step_size: 0.1,
            interval: 2000,
            cap: 0.5,
        }
    }
}

pub fn curriculum_rho_max(episode: usize, c: &CurriculumConfig) -> f64 {
    (c.step_size * (episode / c.interval) as f64).min(c.cap)
}

/// Linear decay from eps_start to eps_end over eps_decay episodes, then
/// flat.
pub fn epsilon_schedule(episode: usize, hp: &TrainingHyperparams) -> f64 {
    if episode >= hp.eps_decay {
        hp.eps_end
    } else {
        hp.eps_start + (hp.eps_end - hp.eps_start) / hp.eps_decay as f64 * episode as f64
    }
}

/// The four ablation arms. They differ only in pedestrian noise, the
/// network input row, and the discomfort band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainVariant {
    /// Plain ORCA pedestrians, fixed band, 13-wide rows.
    Sarl,
    /// Curriculum noise only.
    Training,
    /// Curriculum noise plus the deviation input feature.
    Model,
    /// Curriculum noise, deviation feature, and the deviation-scaled band.
    Reward,
}

impl TrainVariant {
    pub fn include_rho(self) -> bool {
        matches!(self, TrainVariant::Model | TrainVariant::Reward)
    }

    pub fn uses_noise(self) -> bool {
        !matches!(self, TrainVariant::Sarl)
    }

    pub fn reward_kind(self) -> RewardKind {
        if self == TrainVariant::Reward {
            RewardKind::DeviationBand
        } else {
            RewardKind::FixedBand
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainVariant::Sarl => "sarl",
            TrainVariant::Training => "training",
            TrainVariant::Model => "model",
            TrainVariant::Reward => "reward",
        }
    }

    pub fn all() -> [TrainVariant; 4] {
        [
            TrainVariant::Sarl,
            TrainVariant::Training,
            TrainVariant::Model,
            TrainVariant::Reward,
        ]
    }
}

impl FromStr for TrainVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<TrainVariant, String> {
        match s {
            "sarl" => Ok(TrainVariant::Sarl),
            "training" => Ok(TrainVariant::Training),
            "model" => Ok(TrainVariant::Model),
            "reward" => Ok(TrainVariant::Reward),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

impl fmt::Display for TrainVariant {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub variant: TrainVariant,
    pub hp: TrainingHyperparams,
    pub curriculum: CurriculumConfig,
    pub scenario: ScenarioKind,
    pub geometry: ScenarioGeometry,
    pub peds: usize,
    pub dt: f64,
    pub robot: RobotSpec,
    pub ped_radius: f64,
    pub ped_v_pref: f64,
    /// Whether pedestrians react to the robot during learning episodes.
    /// Defaults to an unseen robot, which forces it to do all the avoiding.
    pub robot_visible: bool,
    /// Visibility during expert demonstrations. The reciprocal expert only
    /// plans half of each mutual avoidance, so it needs pedestrians that
    /// yield back to produce demonstrations that actually reach the goal.
    pub il_robot_visible: bool,
    pub discount: DiscountMode,
    pub theta_mode: ThetaMode,
    pub reward: RewardParams,
    /// Expert episodes pushed into the buffer before learning starts.
    pub il_episodes: usize,
    /// Supervised epochs over those demonstrations (targets are the
    /// demonstrations' discounted returns) before value iteration begins.
    pub il_epochs: usize,
    pub buffer_capacity: usize,
    /// Episode interval between checkpoint files; the final network is
    /// always written.
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> TrainerConfig {
        TrainerConfig {
            variant: TrainVariant::Sarl,
            hp: TrainingHyperparams::default(),
            curriculum: CurriculumConfig::default(),
            scenario: ScenarioKind::CircleCrossing,
            geometry: ScenarioGeometry::default(),
            peds: 5,
            dt: 0.25,
            robot: RobotSpec::default(),
            ped_radius: 0.3,
            ped_v_pref: 1.0,
            robot_visible: false,
            il_robot_visible: true,
            discount: DiscountMode::Bare,
            theta_mode: ThetaMode::Raw,
            reward: RewardParams::default(),
            il_episodes: 2000,
            il_epochs: 50,
            buffer_capacity: 100_000,
            checkpoint_every: 1000,
        }
    }
}

impl TrainerConfig {
    pub fn for_variant(variant: TrainVariant) -> TrainerConfig {
        TrainerConfig {
            variant,
            ..TrainerConfig::default()
        }
    }

    pub fn lookahead(&self) -> LookaheadConfig {
        LookaheadConfig {
            gamma: self.hp.gamma,
            discount: self.discount,
            reward_kind: self.variant.reward_kind(),
            reward: self.reward,
            theta_mode: self.theta_mode,
        }
    }
}

/// Joint world snapshot, exactly what the value network consumes plus the
/// ground-truth deviation weights active in that episode.
#[derive(Clone, Debug)]
pub struct JointSnapshot {
    pub robot: AgentFullState,
    pub peds: Vec<PedestrianObservable>,
    pub rhos: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Transition {
    pub state: JointSnapshot,
    pub action: DiscreteAction,
    pub reward: f64,
    pub next: JointSnapshot,
    /// True only when the episode ended here in success or collision; a
    /// step-budget truncation still bootstraps.
    pub terminal: bool,
    /// Discounted return from this step to the end of its episode; present
    /// on demonstration transitions, which the supervised warm start uses.
    pub mc_return: Option<f64>,
}

/// FIFO ring of transitions with uniform sampling.
pub struct ReplayBuffer {
    items: VecDeque<Transition>,
    cap: usize,
}

impl ReplayBuffer {
    pub fn new(cap: usize) -> ReplayBuffer {
        assert!(cap > 0);
        ReplayBuffer {
            items: VecDeque::with_capacity(cap.min(1 << 20)),
            cap,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.cap {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    /// Uniform independent draws over the current contents.
    pub fn sample_indices(&self, m: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        assert!(!self.items.is_empty());
        (0..m).map(|_| rng.gen_range(0..self.items.len())).collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainerError {
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("non-finite loss at episode {episode}, step {step}: {detail}")]
    NonFiniteLoss {
        episode: usize,
        step: usize,
        detail: String,
    },
}

/// Deterministic per-(phase, episode) streams. Demonstrations and learning
/// episodes share a seed but never a stream.
fn episode_world(
    cfg: &TrainerConfig,
    seed: u64,
    phase: u64,
    episode: u64,
    rho_max: f64,
    robot_visible: bool,
) -> Result<WorldState, PlacementError> {
    let mut rho_rng = substream(seed, &[domain::EPISODE_RHO, phase, episode]);
    let specs: Vec<PedSpec> = (0..cfg.peds as u64)
        .map(|i| {
            let policy = if cfg.variant.uses_noise() {
                let rho = if rho_max == 0.0 {
                    0.0
                } else {
                    rho_rng.gen_range(0.0..rho_max)
                };
                PedPolicy::NoisyOrca {
                    params: OrcaParams::default(),
                    rho,
                }
            } else {
                PedPolicy::Orca(OrcaParams::default())
            };
            PedSpec {
                radius: cfg.ped_radius,
                v_pref: cfg.ped_v_pref,
                policy,
                rng: substream(seed, &[domain::PED_POLICY, phase, episode, i]),
            }
        })
        .collect();
    let mut scen_rng = substream(seed, &[domain::SCENARIO, phase, episode]);
    generate_scenario(
        cfg.scenario,
        &cfg.geometry,
        &cfg.robot,
        specs,
        cfg.dt,
        robot_visible,
        &mut scen_rng,
    )
}

fn ground_truth_rhos(world: &WorldState) -> Vec<f64> {
    world
        .peds
        .iter()
        .map(|p| p.policy.rho().unwrap_or(0.0))
        .collect()
}

fn step_reward(cfg: &TrainerConfig, world: &WorldState, rhos: &[f64]) -> f64 {
    let robot = &world.robot;
    let d_g = robot.goal_surface_distance();
    match cfg.variant.reward_kind() {
        RewardKind::FixedBand => {
            let dists: Vec<f64> = world
                .peds
                .iter()
                .map(|p| {
                    crate::sim::surface_distance(
                        robot.pos,
                        robot.radius,
                        p.state.pos,
                        p.state.radius,
                    )
                })
                .collect();
            default_reward(d_g, &dists, &cfg.reward)
        }
        RewardKind::DeviationBand => {
            let pairs: Vec<(f64, f64)> = world
                .peds
                .iter()
                .zip(rhos)
                .map(|(p, &rho)| {
                    (
                        crate::sim::surface_distance(
                            robot.pos,
                            robot.radius,
                            p.state.pos,
                            p.state.radius,
                        ),
                        rho,
                    )
                })
                .collect();
            modified_reward(d_g, &pairs, &cfg.reward)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct DemoStats {
    pub episodes: usize,
    pub successes: usize,
    pub collisions: usize,
    pub timeouts: usize,
    pub transitions: usize,
}

const PHASE_DEMO: u64 = 0;
const PHASE_LEARN: u64 = 1;

/// Fill the buffer with expert rollouts. The expert is the reciprocal
/// planner snapped to the lattice; episode returns are attached so the
/// warm start can regress on them.
pub fn imitation_bootstrap(
    cfg: &TrainerConfig,
    n_episodes: usize,
    seed: u64,
    buffer: &mut ReplayBuffer,
) -> Result<DemoStats, TrainerError> {
    let mut stats = DemoStats::default();
    let mut expert = OrcaRobot::default();
    for ep in 0..n_episodes as u64 {
        // Demonstrations run at the curriculum floor: episode-zero crowds.
        let rho_max = curriculum_rho_max(0, &cfg.curriculum);
        let mut world = episode_world(cfg, seed, PHASE_DEMO, ep, rho_max, cfg.il_robot_visible)?;
        let rhos = ground_truth_rhos(&world);
        expert.reset();
        let (transitions, status) = rollout_episode(cfg, &mut world, &rhos, |view| {
            expert.act(view)
        })?;
        match status {
            EpisodeStatus::Success => stats.successes += 1,
            EpisodeStatus::Collision => stats.collisions += 1,
            EpisodeStatus::Timeout => stats.timeouts += 1,
        }
        let gamma_hat = discount_factor(cfg.discount, cfg.hp.gamma, cfg.dt, world.robot.v_pref);
        let mut g = 0.0;
        let mut with_returns = transitions;
        for tr in with_returns.iter_mut().rev() {
            // Truncated episodes close with the bare reward; the tail is
            // unknown and treated as zero.
            g = tr.reward + if tr.terminal { 0.0 } else { gamma_hat * g };
            tr.mc_return = Some(g);
        }
        stats.transitions += with_returns.len();
        for tr in with_returns {
            buffer.push(tr);
        }
        stats.episodes += 1;
    }
    Ok(stats)
}

/// Run one episode to success, collision, or the step budget, collecting a
/// transition per step. The caller supplies the action rule.
fn rollout_episode(
    cfg: &TrainerConfig,
    world: &mut WorldState,
    rhos: &[f64],
    mut act: impl FnMut(&RobotView) -> DiscreteAction,
) -> Result<(Vec<Transition>, EpisodeStatus), TrainerError> {
    let mut transitions = Vec::new();
    let mut status = EpisodeStatus::Timeout;
    for _ in 0..cfg.hp.t_max {
        let peds = world.observables();
        let action = {
            let view = RobotView {
                robot: &world.robot,
                peds: &peds,
                dt: world.dt,
            };
            act(&view)
        };
        let state = JointSnapshot {
            robot: world.robot,
            peds,
            rhos: rhos.to_vec(),
        };
        let events = step_environment(world, &action)?;
        let reward = step_reward(cfg, world, rhos);
        let collided = events.ped_collisions.iter().any(|&c| c);
        let terminal = collided || events.reached_goal;
        let next = JointSnapshot {
            robot: world.robot,
            peds: world.observables(),
            rhos: rhos.to_vec(),
        };
        transitions.push(Transition {
            state,
            action,
            reward,
            next,
            terminal,
            mc_return: None,
        });
        if terminal {
            status = if collided {
                EpisodeStatus::Collision
            } else {
                EpisodeStatus::Success
            };
            break;
        }
    }
    Ok((transitions, status))
}

/// One-step bootstrapped targets: y = r for terminal transitions, else
/// y = r + discount * V_target(next).
pub fn bootstrap_targets(
    target: &ValueNetwork,
    batch: &[&Transition],
    gamma: f64,
    mode: DiscountMode,
    dt: f64,
    theta_mode: ThetaMode,
) -> Vec<f64> {
    let next_states: Vec<CrowdState> = batch
        .iter()
        .map(|tr| target.encode(&tr.next.robot, &tr.next.peds, &tr.next.rhos, theta_mode))
        .collect();
    let next_values = target.values_batch(&next_states);
    batch
        .iter()
        .zip(&next_values)
        .map(|(tr, &v)| {
            if tr.terminal {
                tr.reward
            } else {
                tr.reward + discount_factor(mode, gamma, dt, tr.next.robot.v_pref) * v
            }
        })
        .collect()
}

fn mse_step(
    net: &mut ValueNetwork,
    grads: &mut ValueGrads,
    states: &[CrowdState],
    targets: &[f64],
    lr: f64,
    momentum: f64,
) -> Result<f64, NetError> {
    let cache = net.values_batch_cached(states);
    let m = states.len() as f64;
    let mut loss = 0.0;
    let dvalues: Vec<f64> = cache
        .values
        .iter()
        .zip(targets)
        .map(|(v, y)| {
            let r = v - y;
            loss += r * r;
            2.0 * r / m
        })
        .collect();
    loss /= m;
    grads.zero();
    net.backward_batch(&cache, &dvalues, grads)?;
    net.sgd_step(grads, lr, momentum)?;
    Ok(loss)
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub variant: TrainVariant,
    pub episodes: usize,
    pub successes: usize,
    pub collisions: usize,
    pub timeouts: usize,
    pub demo: DemoStats,
    pub wall_seconds: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

/// The full training run: demonstrations, supervised warm start, then
/// value iteration with an epsilon-greedy actor. Writes an append-only
/// episode log and periodic checkpoints under `outdir`; returns the final
/// network.
pub fn train_value_network(
    cfg: &TrainerConfig,
    seed: u64,
    outdir: &Path,
) -> Result<(ValueNetwork, TrainSummary), TrainerError> {
    cfg.hp.validate();
    fs::create_dir_all(outdir)?;
    let started = Instant::now();

    let mut net = ValueNetwork::init(
        cfg.variant.include_rho(),
        &mut substream(seed, &[domain::NET_INIT, 0]),
    );
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let demo = imitation_bootstrap(cfg, cfg.il_episodes, seed, &mut buffer)?;

    // Supervised warm start on the demonstrations' returns.
    let mut grads = ValueGrads::zeros_like(&net);
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    for epoch in 0..cfg.il_epochs as u64 {
        let mut rng = substream(seed, &[domain::SHUFFLE, epoch]);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.hp.batch) {
            let states: Vec<CrowdState> = chunk
                .iter()
                .map(|&i| {
                    let tr = buffer.get(i);
                    net.encode(&tr.state.robot, &tr.state.peds, &tr.state.rhos, cfg.theta_mode)
                })
                .collect();
            let targets: Vec<f64> = chunk
                .iter()
                .map(|&i| buffer.get(i).mc_return.expect("demo transitions carry returns"))
                .collect();
            let loss = mse_step(&mut net, &mut grads, &states, &targets, cfg.hp.lr, cfg.hp.momentum)?;
            if !loss.is_finite() {
                return Err(TrainerError::NonFiniteLoss {
                    episode: 0,
                    step: epoch as usize,
                    detail: format!("warm-start epoch {epoch}, loss {loss}"),
                });
            }
        }
    }

    let mut target = net.clone();
    let mut replay_rng = substream(seed, &[domain::REPLAY]);
    let lookahead = cfg.lookahead();

    let log_path = outdir.join("train.csv");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    writeln!(log, "episode,outcome,return,loss_mean,epsilon,rho_max,wall_s")?;

    let mut summary = TrainSummary {
        variant: cfg.variant,
        episodes: cfg.hp.episodes,
        successes: 0,
        collisions: 0,
        timeouts: 0,
        demo,
        wall_seconds: 0.0,
        checkpoint: outdir.join("value_net.ckpt"),
        log: log_path.clone(),
    };

    for ep in 0..cfg.hp.episodes {
        if ep % cfg.hp.target_update == 0 {
            target = net.clone();
        }
        let rho_max = curriculum_rho_max(ep, &cfg.curriculum);
        let eps = epsilon_schedule(ep, &cfg.hp);
        let mut world = episode_world(cfg, seed, PHASE_LEARN, ep as u64, rho_max, cfg.robot_visible)?;
        let rhos = ground_truth_rhos(&world);
        let mut explore_rng = substream(seed, &[domain::EXPLORE, ep as u64]);

        let gamma_hat = discount_factor(cfg.discount, cfg.hp.gamma, cfg.dt, world.robot.v_pref);
        let mut episode_return = 0.0;
        let mut disc_k = 1.0;
        let mut loss_sum = 0.0;
        let mut loss_steps = 0usize;
        let mut status = EpisodeStatus::Timeout;

        for step in 0..cfg.hp.t_max {
            let peds = world.observables();
            let greedy = select_action(&net, &world.robot, &peds, &rhos, cfg.dt, &lookahead);
            let action = epsilon_greedy(greedy, eps, world.robot.v_pref, &mut explore_rng);

            let state = JointSnapshot {
                robot: world.robot,
                peds,
                rhos: rhos.clone(),
            };
            let events = step_environment(&mut world, &action)?;
            let reward = step_reward(cfg, &world, &rhos);
            episode_return += disc_k * reward;
            disc_k *= gamma_hat;
            let collided = events.ped_collisions.iter().any(|&c| c);
            let terminal = collided || events.reached_goal;
            buffer.push(Transition {
                state,
                action,
                reward,
                next: JointSnapshot {
                    robot: world.robot,
                    peds: world.observables(),
                    rhos: rhos.clone(),
                },
                terminal,
                mc_return: None,
            });

            let idx = buffer.sample_indices(cfg.hp.batch, &mut replay_rng);
            let batch: Vec<&Transition> = idx.iter().map(|&i| buffer.get(i)).collect();
            let targets = bootstrap_targets(
                &target,
                &batch,
                cfg.hp.gamma,
                cfg.discount,
                cfg.dt,
                cfg.theta_mode,
            );
            let states: Vec<CrowdState> = batch
                .iter()
                .map(|tr| {
                    net.encode(&tr.state.robot, &tr.state.peds, &tr.state.rhos, cfg.theta_mode)
                })
                .collect();
            let loss = mse_step(&mut net, &mut grads, &states, &targets, cfg.hp.lr, cfg.hp.momentum)?;
            if !loss.is_finite() {
                let detail = format!(
                    "episode {ep}, env step {step}: targets [{:.3e}, {:.3e}]",
                    targets.iter().cloned().fold(f64::INFINITY, f64::min),
                    targets.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                );
                return Err(TrainerError::NonFiniteLoss {
                    episode: ep,
                    step,
                    detail,
                });
            }
            loss_sum += loss;
            loss_steps += 1;

            if terminal {
                status = if collided {
                    EpisodeStatus::Collision
                } else {
                    EpisodeStatus::Success
                };
                break;
            }
        }

        match status {
            EpisodeStatus::Success => summary.successes += 1,
            EpisodeStatus::Collision => summary.collisions += 1,
            EpisodeStatus::Timeout => summary.timeouts += 1,
        }
        let loss_mean = if loss_steps > 0 {
            loss_sum / loss_steps as f64
        } else {
            0.0
        };
        writeln!(
            log,
            "{ep},{},{episode_return:.6},{loss_mean:.6},{eps:.6},{rho_max:.3},{:.3}",
            status.as_str(),
            started.elapsed().as_secs_f64(),
        )?;

        if (ep + 1) % cfg.checkpoint_every == 0 && ep + 1 < cfg.hp.episodes {
            let path = outdir.join(format!("value_ep{:05}.ckpt", ep + 1));
            save_value_net(&path, &net, &train_meta(cfg, ep + 1))?;
        }
    }
    log.flush()?;

    save_value_net(&summary.checkpoint, &net, &train_meta(cfg, cfg.hp.episodes))?;
    summary.wall_seconds = started.elapsed().as_secs_f64();
    Ok((net, summary))
}

fn train_meta(cfg: &TrainerConfig, episode: usize) -> CheckpointMeta {
    let mut meta = CheckpointMeta::new();
    meta.insert("variant".into(), cfg.variant.as_str().into());
    meta.insert("episode".into(), episode.to_string());
    meta.insert("gamma".into(), format!("{}", cfg.hp.gamma));
    meta
}

/// Load a trained network and refuse silently mismatched variants.
pub fn load_trained_net(path: &Path) -> Result<(ValueNetwork, CheckpointMeta), CheckpointError> {
    load_value_net(path)
}

/// Deployment wrapper: tracks every pedestrian's recent positions, turns
/// them into deviation estimates (or zeros without a bank), and acts
/// greedily through the value network.
pub struct LearnedRobot<'a> {
    net: &'a ValueNetwork,
    lookahead: LookaheadConfig,
    bank: Option<&'a UncertaintyBank>,
    smoothing: RhoSmoothing,
    tracks: Vec<TrackHistory>,
    smoothed: Vec<Option<f64>>,
    last_rhos: Vec<f64>,
    step: u64,
}

impl<'a> LearnedRobot<'a> {
    pub fn new(
        net: &'a ValueNetwork,
        lookahead: LookaheadConfig,
        bank: Option<&'a UncertaintyBank>,
        smoothing: RhoSmoothing,
    ) -> LearnedRobot<'a> {
        LearnedRobot {
            net,
            lookahead,
            bank,
            smoothing,
            tracks: Vec::new(),
            smoothed: Vec::new(),
            last_rhos: Vec::new(),
            step: 0,
        }
    }
}

impl RobotPolicy for LearnedRobot<'_> {
    fn act(&mut self, view: &RobotView) -> DiscreteAction {
        if self.tracks.len() != view.peds.len() {
            self.tracks = (0..view.peds.len()).map(|_| TrackHistory::new()).collect();
            self.smoothed = vec![None; view.peds.len()];
        }
        let now = self.step as f64 * view.dt;
        self.step += 1;
        for (track, ped) in self.tracks.iter_mut().zip(view.peds) {
            track.push(now, ped.pos);
        }
        self.last_rhos = match self.bank {
            Some(bank) => self
                .tracks
                .iter()
                .enumerate()
                .map(|(i, track)| {
                    let est = bank.estimate(track);
                    let blended = self.smoothing.apply(self.smoothed[i], est.value);
                    self.smoothed[i] = Some(blended);
                    blended
                })
                .collect(),
            None => vec![0.0; view.peds.len()],
        };
        select_action(
            self.net,
            view.robot,
            view.peds,
            &self.last_rhos,
            view.dt,
            &self.lookahead,
        )
    }

    fn rho_estimates(&self) -> Option<Vec<f64>> {
        self.bank.map(|_| self.last_rhos.clone())
    }

    fn reset(&mut self) {
        self.tracks.clear();
        self.smoothed.clear();
        self.last_rhos.clear();
        self.step = 0;
    }
}

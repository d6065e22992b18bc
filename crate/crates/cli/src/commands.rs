//! One function per subcommand. Everything returns `Failure` so the exit
//! code always reflects what went wrong: bad inputs before any work
//! starts, runtime faults during it, unmet thresholds after it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use socnav_core::eval::{
    report_csv, run_benchmark, sweep_csv, sweep_noisy_eval, text_table, trials_csv, EvalPolicy,
    EvalPolicyKind,
};
use socnav_core::par::ExecMode;
use socnav_core::policies::{OrcaParams, PedPolicy};
use socnav_core::rng::{domain, substream};
use socnav_core::sim::scenario::{generate_scenario, PedSpec, ScenarioKind};
use socnav_core::sim::{run_episode, CollisionMode, OrcaRobot, RobotPolicy, SocialForceRobot};
use socnav_core::svg::{emit_svg_trajectory, SvgStyle};
use socnav_core::traj::{parse_trajectory_csv, trajectory_csv, TrajRecord};
use socnav_core::trainer::{
    load_trained_net, train_value_network, LearnedRobot, TrainVariant, TrainingHyperparams,
};
use socnav_core::uncertainty::{
    generate_training_set, read_window_set, train_uncertainty_models, write_window_set,
    UncertaintyBank, WindowSet, N_TRACK_MODELS,
};
use socnav_core::value::{LookaheadConfig, RewardKind, ValueNetwork};

use crate::config::AppConfig;
use crate::{config_err, runtime_err, Failure};

pub struct Ctx {
    pub app: AppConfig,
    pub seed: u64,
    pub outdir: PathBuf,
    pub mode: ExecMode,
}

impl Ctx {
    fn subdir(&self, name: &str) -> Result<PathBuf, Failure> {
        let dir = self.outdir.join(name);
        fs::create_dir_all(&dir)
            .map_err(|e| runtime_err(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn write(&self, rel: &str, contents: &str) -> Result<PathBuf, Failure> {
        let path = self.outdir.join(rel);
        fs::write(&path, contents)
            .map_err(|e| runtime_err(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

fn dataset_name(t: usize) -> String {
    format!("windows_t{t:02}.bin")
}

pub fn gen_uncertainty_data(
    ctx: Ctx,
    episodes: Option<usize>,
    rho_max: Option<f64>,
    peds: Option<usize>,
) -> Result<(), Failure> {
    let mut cfg = ctx.app.rollout.clone();
    if let Some(e) = episodes {
        cfg.episodes = e;
    }
    if let Some(r) = rho_max {
        cfg.rho_max = r;
    }
    if let Some(p) = peds {
        cfg.peds = p;
    }
    if cfg.episodes == 0 || cfg.peds == 0 || cfg.steps == 0 {
        return Err(config_err("rollout needs positive episodes, peds, steps"));
    }
    if !(0.0..=1.0).contains(&cfg.rho_max) {
        return Err(config_err(format!(
            "rho_max {} outside [0, 1]",
            cfg.rho_max
        )));
    }

    let ts: Vec<usize> = (1..=N_TRACK_MODELS).collect();
    let sets = generate_training_set(&cfg, &ts, ctx.app.estimator.window_cap, ctx.seed, ctx.mode)
        .map_err(runtime_err)?;

    let dir = ctx.subdir("datasets")?;
    for (t, ws) in ts.iter().zip(&sets) {
        let path = dir.join(dataset_name(*t));
        write_window_set(&path, ws)
            .map_err(|e| runtime_err(format!("cannot write {}: {e}", path.display())))?;
        println!("t={t:2}  windows={}", ws.len());
    }
    println!(
        "{} horizon datasets from {} episodes under {}",
        ts.len(),
        cfg.episodes,
        dir.display()
    );
    Ok(())
}

pub fn train_uncertainty(
    ctx: Ctx,
    data: Option<&Path>,
    epochs: Option<usize>,
) -> Result<(), Failure> {
    let mut dcfg = ctx.app.deviation.clone();
    if let Some(e) = epochs {
        dcfg.epochs = e;
    }
    if dcfg.epochs == 0 || dcfg.batch == 0 || dcfg.lr <= 0.0 {
        return Err(config_err("deviation training needs positive epochs, batch, lr"));
    }
    if !(0.0..1.0).contains(&dcfg.val_fraction) {
        return Err(config_err("val_fraction must sit in [0, 1)"));
    }

    let ts: Vec<usize> = (1..=N_TRACK_MODELS).collect();
    let sets: Vec<WindowSet> = match data {
        Some(dir) => {
            let mut sets = Vec::with_capacity(ts.len());
            for &t in &ts {
                let path = dir.join(dataset_name(t));
                if !path.exists() {
                    return Err(config_err(format!(
                        "missing dataset {}; run gen-uncertainty-data first",
                        path.display()
                    )));
                }
                sets.push(read_window_set(&path).map_err(|e| {
                    runtime_err(format!("cannot read {}: {e}", path.display()))
                })?);
            }
            sets
        }
        None => generate_training_set(
            &ctx.app.rollout,
            &ts,
            ctx.app.estimator.window_cap,
            ctx.seed,
            ctx.mode,
        )
        .map_err(runtime_err)?,
    };

    let trained = train_uncertainty_models(&sets, &dcfg, ctx.seed, ctx.mode)
        .map_err(runtime_err)?;

    let mut csv = String::from("t,train_count,val_count,val_mae,val_residual_std,final_train_mse\n");
    for m in &trained {
        let r = &m.report;
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.t, r.train_count, r.val_count, r.val_mae, r.val_residual_std, r.final_train_mse
        ));
        println!(
            "t={:2}  val_mae={:.4}  residual_std={:.4}",
            r.t, r.val_mae, r.val_residual_std
        );
    }
    ctx.write("report.csv", &csv)?;

    let bank = UncertaintyBank::new(
        trained.into_iter().map(|m| m.params).collect(),
        ctx.app.estimator.prior,
    );
    let bank_dir = ctx.subdir("checkpoints")?.join("uncertainty");
    bank.save(&bank_dir)
        .map_err(|e| runtime_err(format!("cannot save bank: {e}")))?;
    println!("uncertainty bank: {}", bank_dir.display());
    Ok(())
}

/// Mirror of the trainer's internal contract so bad numbers surface as a
/// config error instead of a panic.
fn check_hyperparams(hp: &TrainingHyperparams) -> Result<(), Failure> {
    if hp.gamma <= 0.0 || hp.lr <= 0.0 || hp.momentum < 0.0 {
        return Err(config_err("gamma and lr must be positive, momentum nonnegative"));
    }
    if hp.batch == 0 || hp.episodes == 0 || hp.target_update == 0 || hp.eps_decay == 0 || hp.t_max == 0
    {
        return Err(config_err(
            "batch, episodes, target_update, eps_decay, t_max must all be positive",
        ));
    }
    if hp.eps_end > hp.eps_start {
        return Err(config_err("eps_end must not exceed eps_start"));
    }
    Ok(())
}

pub fn train_policy(
    ctx: Ctx,
    variant: Option<&str>,
    episodes: Option<usize>,
) -> Result<(), Failure> {
    let mut tcfg = ctx.app.trainer.clone();
    if let Some(v) = variant {
        tcfg.variant = v.parse::<TrainVariant>().map_err(config_err)?;
    }
    if let Some(e) = episodes {
        tcfg.hp.episodes = e;
    }
    check_hyperparams(&tcfg.hp)?;

    let (_net, summary) =
        train_value_network(&tcfg, ctx.seed, &ctx.outdir).map_err(runtime_err)?;

    // The trainer drops its checkpoints next to the log; file them under
    // checkpoints/ to match the documented layout.
    let ckpt_dir = ctx.subdir("checkpoints")?;
    let mut final_ckpt = summary.checkpoint.clone();
    let entries = fs::read_dir(&ctx.outdir)
        .map_err(|e| runtime_err(format!("cannot list {}: {e}", ctx.outdir.display())))?;
    for entry in entries.flatten() {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if name.starts_with("value_") && name.ends_with(".ckpt") {
            let dest = ckpt_dir.join(name.as_ref());
            fs::rename(entry.path(), &dest)
                .map_err(|e| runtime_err(format!("cannot move checkpoint: {e}")))?;
            if entry.path() == summary.checkpoint {
                final_ckpt = dest;
            }
        }
    }

    println!(
        "{} variant, {} episodes: {} successes, {} collisions, {} timeouts ({:.1}s)",
        summary.variant.as_str(),
        summary.episodes,
        summary.successes,
        summary.collisions,
        summary.timeouts,
        summary.wall_seconds,
    );
    println!("checkpoint: {}", final_ckpt.display());
    println!("episode log: {}", summary.log.display());
    Ok(())
}

/// Load a value checkpoint plus the lookahead settings it was trained
/// under; the reward shape and horizon come from the checkpoint metadata,
/// the rest from the config.
fn load_policy(app: &AppConfig, path: &Path) -> Result<(ValueNetwork, LookaheadConfig), Failure> {
    if !path.exists() {
        return Err(config_err(format!("checkpoint not found: {}", path.display())));
    }
    let (net, meta) = load_trained_net(path)
        .map_err(|e| runtime_err(format!("cannot load checkpoint {}: {e}", path.display())))?;
    let gamma = meta
        .get("gamma")
        .and_then(|s| s.parse::<f64>().ok())
        .unwrap_or(app.trainer.hp.gamma);
    let reward_kind = meta
        .get("variant")
        .and_then(|s| s.parse::<TrainVariant>().ok())
        .map(|v| v.reward_kind())
        .unwrap_or(RewardKind::FixedBand);
    let lookahead = LookaheadConfig {
        gamma,
        discount: app.trainer.discount,
        reward_kind,
        reward: app.trainer.reward,
        theta_mode: app.trainer.theta_mode,
    };
    Ok((net, lookahead))
}

fn load_bank(dir: Option<&Path>) -> Result<Option<UncertaintyBank>, Failure> {
    let Some(dir) = dir else { return Ok(None) };
    if !dir.exists() {
        return Err(config_err(format!(
            "uncertainty bank not found: {}",
            dir.display()
        )));
    }
    UncertaintyBank::load(dir)
        .map(Some)
        .map_err(|e| config_err(format!("cannot load bank {}: {e}", dir.display())))
}

fn baseline_policy(name: &str) -> Result<EvalPolicy<'static>, Failure> {
    let kind = match name {
        "orca" => EvalPolicyKind::Orca,
        "social_force" => EvalPolicyKind::SocialForce,
        other => {
            return Err(config_err(format!(
                "unknown baseline '{other}', expected orca or social_force"
            )))
        }
    };
    Ok(EvalPolicy {
        name: name.to_string(),
        kind,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    ctx: Ctx,
    checkpoint: Option<&Path>,
    bank: Option<&Path>,
    baselines: &[String],
    trials: Option<u64>,
    record_trajectories: bool,
    min_success_rate: Option<f64>,
) -> Result<(), Failure> {
    let checkpoint = checkpoint.ok_or_else(|| {
        config_err("evaluate needs --checkpoint pointing at a trained value network")
    })?;
    let (net, lookahead) = load_policy(&ctx.app, checkpoint)?;
    let bank = load_bank(bank)?;
    if net.include_rho && bank.is_none() {
        eprintln!(
            "warning: this network consumes deviation estimates but no --bank was given; \
             estimates default to zero"
        );
    }

    let mut policies = vec![EvalPolicy {
        name: "learned".to_string(),
        kind: EvalPolicyKind::Learned {
            net: &net,
            lookahead,
            bank: bank.as_ref(),
            smoothing: ctx.app.estimator.smoothing,
        },
    }];
    for b in baselines {
        policies.push(baseline_policy(b)?);
    }

    let mut bcfg = ctx.app.benchmark.clone();
    if let Some(t) = trials {
        bcfg.trials = t;
    }
    if record_trajectories {
        bcfg.record_trajectories = true;
    }

    let report = run_benchmark(&policies, &bcfg, ctx.seed, ctx.mode).map_err(runtime_err)?;

    let report_path = ctx.write("report.csv", &report_csv(&report))?;
    ctx.write("trials.csv", &trials_csv(&report))?;
    if bcfg.record_trajectories {
        let dir = ctx.subdir("trajectories")?;
        for rt in &report.trajectories {
            let path = dir.join(format!("trial{:04}_{}.csv", rt.trial, rt.policy));
            fs::write(&path, trajectory_csv(rt.trial, &rt.trajectory))
                .map_err(|e| runtime_err(format!("cannot write {}: {e}", path.display())))?;
        }
    }

    print!("{}", text_table(&report));
    println!("report: {}", report_path.display());

    if let Some(min) = min_success_rate {
        let learned = report
            .policies
            .iter()
            .find(|p| p.policy == "learned")
            .expect("learned policy is always evaluated");
        if learned.success_rate + 1e-12 < min {
            return Err(Failure::Acceptance(format!(
                "learned success rate {:.3} below required {min:.3}",
                learned.success_rate
            )));
        }
    }
    Ok(())
}

pub fn sweep_noise(
    ctx: Ctx,
    checkpoint: Option<&Path>,
    bank: Option<&Path>,
    grid: &str,
    baselines: &[String],
    trials: Option<u64>,
) -> Result<(), Failure> {
    let grid: Vec<f64> = grid
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| config_err(format!("bad --grid: {e}")))?;
    if grid.is_empty() || grid.iter().any(|g| !(0.0..=1.0).contains(g)) {
        return Err(config_err("--grid needs values in [0, 1]"));
    }

    let loaded = match checkpoint {
        Some(p) => Some((load_policy(&ctx.app, p)?, load_bank(bank)?)),
        None => None,
    };
    let mut policies = Vec::new();
    if let Some(((net, lookahead), bank)) = &loaded {
        policies.push(EvalPolicy {
            name: "learned".to_string(),
            kind: EvalPolicyKind::Learned {
                net,
                lookahead: *lookahead,
                bank: bank.as_ref(),
                smoothing: ctx.app.estimator.smoothing,
            },
        });
    }
    for b in baselines {
        policies.push(baseline_policy(b)?);
    }
    if policies.is_empty() {
        return Err(config_err(
            "nothing to evaluate: pass --checkpoint and/or --baseline",
        ));
    }

    let mut scfg = ctx.app.sweep.clone();
    if let Some(t) = trials {
        scfg.trials = t;
    }

    let points = sweep_noisy_eval(&policies, &grid, &scfg, ctx.seed, ctx.mode)
        .map_err(runtime_err)?;
    let path = ctx.write("report.csv", &sweep_csv(&points))?;
    for p in &points {
        println!(
            "rho_max={:.2}  {:<12}  success={:.3}  collision={:.3}  timeout={:.3}",
            p.rho_max, p.policy, p.success_rate, p.collision_rate, p.timeout_rate
        );
    }
    println!("report: {}", path.display());
    Ok(())
}

/// Accept both the full scenario names and the short forms people type.
fn parse_scenario(s: &str) -> Result<ScenarioKind, Failure> {
    let canonical = match s {
        "circle" => "circle_crossing",
        "outgoing" => "outgoing_flow",
        "oncoming" => "oncoming_flow",
        "perpendicular" => "perpendicular_crossing",
        "random" => "single_random_goal",
        "perpetual" => "perpetual_random_goals",
        other => other,
    };
    canonical.parse::<ScenarioKind>().map_err(config_err)
}

pub fn simulate(
    ctx: Ctx,
    scenario: Option<&str>,
    peds: Option<usize>,
    policy: Option<&str>,
    checkpoint: Option<&Path>,
    bank: Option<&Path>,
    rho_max: Option<f64>,
) -> Result<(), Failure> {
    let scfg = &ctx.app.simulate;
    let kind = match scenario {
        Some(s) => parse_scenario(s)?,
        None => scfg.scenario,
    };
    let peds = peds.unwrap_or(scfg.peds);
    let rho_max = rho_max.unwrap_or(scfg.rho_max);
    if !(0.0..=1.0).contains(&rho_max) {
        return Err(config_err(format!("rho_max {rho_max} outside [0, 1]")));
    }

    let specs: Vec<PedSpec> = (0..peds as u64)
        .map(|i| {
            let policy = if rho_max > 0.0 {
                let mut rho_rng = substream(ctx.seed, &[domain::EPISODE_RHO, 0, i]);
                PedPolicy::NoisyOrca {
                    params: OrcaParams::default(),
                    rho: rho_rng.gen_range(0.0..rho_max),
                }
            } else {
                PedPolicy::Orca(OrcaParams::default())
            };
            PedSpec {
                radius: scfg.ped_radius,
                v_pref: scfg.ped_v_pref,
                policy,
                rng: substream(ctx.seed, &[domain::PED_POLICY, 0, i]),
            }
        })
        .collect();
    let mut world = generate_scenario(
        kind,
        &scfg.geometry,
        &scfg.robot,
        specs,
        scfg.dt,
        scfg.robot_visible,
        &mut substream(ctx.seed, &[domain::SCENARIO, 0]),
    )
    .map_err(runtime_err)?;

    let loaded;
    let loaded_bank;
    let mut robot: Box<dyn RobotPolicy> = match policy.unwrap_or("orca") {
        "orca" => Box::new(OrcaRobot::default()),
        "social_force" => Box::new(SocialForceRobot::default()),
        "learned" => {
            let ckpt = checkpoint
                .ok_or_else(|| config_err("--policy learned needs --checkpoint"))?;
            loaded = load_policy(&ctx.app, ckpt)?;
            loaded_bank = load_bank(bank)?;
            Box::new(LearnedRobot::new(
                &loaded.0,
                loaded.1,
                loaded_bank.as_ref(),
                ctx.app.estimator.smoothing,
            ))
        }
        other => {
            return Err(config_err(format!(
                "unknown policy '{other}', expected orca, social_force, or learned"
            )))
        }
    };

    let outcome = run_episode(
        &mut world,
        robot.as_mut(),
        CollisionMode::CountContacts,
        scfg.time_limit,
        true,
    )
    .map_err(runtime_err)?;

    let dir = ctx.subdir("trajectories")?;
    let path = dir.join("episode_00000.csv");
    fs::write(&path, trajectory_csv(0, &outcome.trajectory))
        .map_err(|e| runtime_err(format!("cannot write {}: {e}", path.display())))?;

    println!(
        "{}: {} steps, {:.1}s, path {:.2} m, {} contacts, min separation {:.3} m",
        outcome.status.as_str(),
        outcome.steps,
        outcome.elapsed,
        outcome.path_length,
        outcome.contact_events,
        outcome.min_separation,
    );
    println!("trajectory log: {}", path.display());
    Ok(())
}

pub fn plot(ctx: Ctx, input: &Path) -> Result<(), Failure> {
    if !input.exists() {
        return Err(config_err(format!("no such trajectory log: {}", input.display())));
    }
    let text = fs::read_to_string(input)
        .map_err(|e| runtime_err(format!("cannot read {}: {e}", input.display())))?;
    let records = parse_trajectory_csv(&text)
        .map_err(|e| runtime_err(format!("{}: {e}", input.display())))?;

    let mut by_episode: BTreeMap<u64, Vec<TrajRecord>> = BTreeMap::new();
    for r in records {
        by_episode.entry(r.episode).or_default().push(r);
    }

    let dir = ctx.subdir("plots")?;
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "trajectory".to_string());
    let single = by_episode.len() == 1;
    for (ep, recs) in &by_episode {
        let svg = emit_svg_trajectory(recs, &SvgStyle::default()).map_err(runtime_err)?;
        let name = if single {
            format!("{stem}.svg")
        } else {
            format!("{stem}_ep{ep:05}.svg")
        };
        let path = dir.join(name);
        fs::write(&path, svg)
            .map_err(|e| runtime_err(format!("cannot write {}: {e}", path.display())))?;
        println!("{}", path.display());
    }
    Ok(())
}

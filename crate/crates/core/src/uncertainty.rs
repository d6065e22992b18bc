//! Deviation estimation for observed pedestrians: supervised data from
//! noisy-crowd rollouts, one regression model per track length t = 1..20,
//! and inference over live track histories.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::action::DiscreteAction;
use crate::nn::checkpoint::{
    load_net_expecting, save_checkpoint, CheckpointError, CheckpointMeta,
};
use crate::nn::{MlpParams, MlpSpec, NetError};
use crate::obs::{track_features, TrackHistory};
use crate::par::{map_indexed, ExecMode};
use crate::policies::{OrcaParams, PedPolicy};
use crate::rng::{domain, substream};
use crate::sim::scenario::{
    generate_scenario, PedSpec, PlacementError, RobotSpec, ScenarioGeometry, ScenarioKind,
};
use crate::sim::step_environment;
use crate::vec2::Vec2;

pub const N_TRACK_MODELS: usize = 20;

/// Regression net for one track length: 2t inputs (speeds then
/// accelerations) down to a single deviation estimate.
pub fn deviation_spec(t: usize) -> MlpSpec {
    assert!((1..=N_TRACK_MODELS).contains(&t));
    MlpSpec::new(&[2 * t, 150, 100, 100, 100, 50, 1], false)
}

pub fn clamp_unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Crowd-only rollout settings for dataset generation. The robot is parked
/// and invisible; every pedestrian runs the noisy mixture with its own
/// fixed deviation weight drawn uniformly from [0, rho_max).
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub episodes: usize,
    pub peds: usize,
    pub steps: usize,
    pub rho_max: f64,
    pub kind: ScenarioKind,
    pub geometry: ScenarioGeometry,
    pub dt: f64,
    pub ped_radius: f64,
    pub ped_v_pref: f64,
}

impl Default for RolloutConfig {
    fn default() -> RolloutConfig {
        RolloutConfig {
            episodes: 500,
            peds: 5,
            steps: 120,
            rho_max: 1.0,
            kind: ScenarioKind::CircleCrossing,
            geometry: ScenarioGeometry::default(),
            dt: 0.25,
            ped_radius: 0.3,
            ped_v_pref: 1.0,
        }
    }
}

/// One pedestrian's recorded path: positions after each step, so the
/// position at index j carries simulation stamp (1 + j) * dt.
#[derive(Clone, Debug)]
pub struct PedTrack {
    pub rho: f64,
    pub positions: Vec<Vec2>,
}

#[derive(Clone, Debug)]
pub struct CrowdRollouts {
    pub dt: f64,
    pub tracks: Vec<PedTrack>,
}

pub fn rollout_noisy_crowds(
    cfg: &RolloutConfig,
    seed: u64,
) -> Result<CrowdRollouts, PlacementError> {
    assert!((0.0..=1.0).contains(&cfg.rho_max));
    let mut tracks = Vec::with_capacity(cfg.episodes * cfg.peds);
    for ep in 0..cfg.episodes as u64 {
        let mut rho_rng = substream(seed, &[domain::EPISODE_RHO, ep]);
        let specs: Vec<PedSpec> = (0..cfg.peds as u64)
            .map(|i| {
                let rho = if cfg.rho_max == 0.0 {
                    0.0
                } else {
                    rho_rng.gen_range(0.0..cfg.rho_max)
                };
                PedSpec {
                    radius: cfg.ped_radius,
                    v_pref: cfg.ped_v_pref,
                    policy: PedPolicy::NoisyOrca {
                        params: OrcaParams::default(),
                        rho,
                    },
                    rng: substream(seed, &[domain::PED_POLICY, ep, i]),
                }
            })
            .collect();
        let rhos: Vec<f64> = specs.iter().map(|s| s.policy.rho().unwrap()).collect();
        let mut scen_rng = substream(seed, &[domain::SCENARIO, ep]);
        let mut world = generate_scenario(
            cfg.kind,
            &cfg.geometry,
            &RobotSpec::default(),
            specs,
            cfg.dt,
            false,
            &mut scen_rng,
        )?;
        let mut recs: Vec<Vec<Vec2>> = vec![Vec::with_capacity(cfg.steps); cfg.peds];
        for _ in 0..cfg.steps {
            step_environment(&mut world, &DiscreteAction::Stop).expect("crowd rollout step");
            for (rec, ped) in recs.iter_mut().zip(&world.peds) {
                rec.push(ped.state.pos);
            }
        }
        for (positions, rho) in recs.into_iter().zip(rhos) {
            tracks.push(PedTrack { rho, positions });
        }
    }
    Ok(CrowdRollouts {
        dt: cfg.dt,
        tracks,
    })
}

/// Labeled feature windows for one track length.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub t: usize,
    /// Row-major, len() * 2t.
    pub features: Vec<f64>,
    pub labels: Vec<f64>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * 2 * self.t..(i + 1) * 2 * self.t]
    }
}

/// Features of one window of t+1 consecutive recorded positions starting
/// at track index `start`. Stamp arithmetic matches a live history that
/// observed the same positions, so training rows and inference rows agree
/// bit for bit.
fn window_features_into(positions: &[Vec2], start: usize, dt: f64, t: usize, out: &mut Vec<f64>) {
    let stamp = |j: usize| (1 + start + j) as f64 * dt;
    let base = out.len();
    for j in 0..t {
        let d = positions[start + j + 1].dist(positions[start + j]);
        out.push(d / (stamp(j + 1) - stamp(j)));
    }
    out.push(0.0);
    for k in 1..t {
        let dstamp = stamp(k + 1) - stamp(k);
        out.push((out[base + k] - out[base + k - 1]) / dstamp);
    }
}

fn decile_of(rho: f64) -> usize {
    debug_assert!((0.0..=1.0).contains(&rho));
    ((rho * 10.0) as usize).min(9)
}

/// All valid windows for one t, size-balanced across the ten label deciles
/// by uniform subsampling, then capped. Output order is (track, start),
/// so regeneration is byte-stable.
pub fn windows_for_t(roll: &CrowdRollouts, t: usize, cap: usize, seed: u64) -> WindowSet {
    assert!((1..=N_TRACK_MODELS).contains(&t));
    // Window id = (track, start offset); group ids by label decile.
    let mut by_decile: Vec<Vec<(u32, u32)>> = vec![Vec::new(); 10];
    for (ti, track) in roll.tracks.iter().enumerate() {
        let n_win = track.positions.len().saturating_sub(t);
        let ids = &mut by_decile[decile_of(track.rho)];
        for s in 0..n_win {
            ids.push((ti as u32, s as u32));
        }
    }
    let occupied = by_decile.iter().filter(|d| !d.is_empty()).count();
    let mut quota = by_decile
        .iter()
        .filter(|d| !d.is_empty())
        .map(|d| d.len())
        .min()
        .unwrap_or(0);
    if occupied > 0 {
        quota = quota.min(cap / occupied);
    }

    let mut chosen: Vec<(u32, u32)> = Vec::with_capacity(quota * occupied);
    for (dec, ids) in by_decile.iter_mut().enumerate() {
        if ids.is_empty() {
            continue;
        }
        let mut rng = substream(seed, &[domain::DATASET, t as u64, dec as u64]);
        // Partial Fisher-Yates: the first `quota` slots become a uniform
        // sample without replacement.
        for i in 0..quota {
            let j = rng.gen_range(i..ids.len());
            ids.swap(i, j);
        }
        chosen.extend_from_slice(&ids[..quota]);
    }
    chosen.sort_unstable();

    let mut features = Vec::with_capacity(chosen.len() * 2 * t);
    let mut labels = Vec::with_capacity(chosen.len());
    for (ti, s) in chosen {
        let track = &roll.tracks[ti as usize];
        window_features_into(&track.positions, s as usize, roll.dt, t, &mut features);
        labels.push(track.rho);
    }
    WindowSet { t, features, labels }
}

/// Roll out the crowds once, then cut window sets for each requested t.
pub fn generate_training_set(
    cfg: &RolloutConfig,
    ts: &[usize],
    cap: usize,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<WindowSet>, PlacementError> {
    let roll = rollout_noisy_crowds(cfg, seed)?;
    Ok(map_indexed(mode, ts.len(), |i| {
        windows_for_t(&roll, ts[i], cap, seed)
    }))
}

const DATASET_MAGIC: &[u8; 8] = b"SNAVUDS1";

pub fn write_window_set(path: &Path, ws: &WindowSet) -> io::Result<()> {
    let mut w = io::BufWriter::new(fs::File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&(ws.t as u32).to_le_bytes())?;
    w.write_all(&(ws.len() as u64).to_le_bytes())?;
    for x in ws.features.iter().chain(&ws.labels) {
        w.write_all(&x.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_window_set(path: &Path) -> io::Result<WindowSet> {
    let mut r = io::BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let t = u32::from_le_bytes(b4) as usize;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let mut read_f64s = |n: usize| -> io::Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            out.push(f64::from_le_bytes(buf));
        }
        Ok(out)
    };
    let features = read_f64s(count * 2 * t)?;
    let labels = read_f64s(count)?;
    Ok(WindowSet { t, features, labels })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviationTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub val_fraction: f64,
}

impl Default for DeviationTrainConfig {
    fn default() -> DeviationTrainConfig {
        DeviationTrainConfig {
            epochs: 20,
            batch: 100,
            lr: 1e-3,
            momentum: 0.9,
            val_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub t: usize,
    pub train_count: usize,
    pub val_count: usize,
    /// Mean |estimate - label| on the held-out split, estimates clamped as
    /// they would be at inference.
    pub val_mae: f64,
    /// Sample standard deviation of (estimate - label) on the held-out
    /// split.
    pub val_residual_std: f64,
    /// Raw (unclamped) mean squared error on the training split after the
    /// last epoch.
    pub final_train_mse: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub params: MlpParams,
    pub report: TrainReport,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("t={t}: split leaves train={train}, val={val}; both must be non-empty")]
    EmptySplit { t: usize, train: usize, val: usize },
    #[error(transparent)]
    Net(#[from] NetError),
}

fn gather_batch(ws: &WindowSet, idx: &[usize], xs: &mut Vec<f64>, ys: &mut Vec<f64>) {
    xs.clear();
    ys.clear();
    for &i in idx {
        xs.extend_from_slice(ws.feature(i));
        ys.push(ws.labels[i]);
    }
}

/// MSE regression on one window set. Deterministic for a given seed: the
/// split, the init, and every shuffle come from fixed substreams.
pub fn train_deviation_model(
    ws: &WindowSet,
    cfg: &DeviationTrainConfig,
    seed: u64,
) -> Result<TrainedModel, TrainError> {
    let n = ws.len();
    let n_val = (n as f64 * cfg.val_fraction).round() as usize;
    let n_train = n.saturating_sub(n_val);
    if n_val == 0 || n_train == 0 {
        return Err(TrainError::EmptySplit {
            t: ws.t,
            train: n_train,
            val: n_val,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = substream(seed, &[domain::VAL_SPLIT, ws.t as u64]);
    for i in (1..n).rev() {
        let j = split_rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut params = MlpParams::init(
        deviation_spec(ws.t),
        &mut substream(seed, &[domain::NET_INIT, ws.t as u64]),
    );

    let mut epoch_order: Vec<usize> = train_idx.to_vec();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for epoch in 0..cfg.epochs as u64 {
        let mut rng = substream(seed, &[domain::SHUFFLE, ws.t as u64, epoch]);
        for i in (1..epoch_order.len()).rev() {
            let j = rng.gen_range(0..=i);
            epoch_order.swap(i, j);
        }
        for batch in epoch_order.chunks(cfg.batch) {
            gather_batch(ws, batch, &mut xs, &mut ys);
            let m = batch.len();
            let cache = params.forward_batch_cached(&xs, m)?;
            let mut grads = crate::nn::MlpGrads::zeros_like(&params);
            let dys: Vec<f64> = cache
                .outputs()
                .iter()
                .zip(&ys)
                .map(|(p, y)| 2.0 * (p - y) / m as f64)
                .collect();
            params.backward_batch(&cache, &dys, &mut grads)?;
            params.sgd_step(&grads, cfg.lr, cfg.momentum)?;
        }
    }

    let eval_split = |idx: &[usize]| -> Result<Vec<f64>, NetError> {
        let mut preds = Vec::with_capacity(idx.len());
        let mut bx = Vec::new();
        let mut by = Vec::new();
        for chunk in idx.chunks(4096) {
            gather_batch(ws, chunk, &mut bx, &mut by);
            preds.extend(params.forward_batch(&bx, chunk.len())?);
        }
        Ok(preds)
    };

    let train_preds = eval_split(train_idx)?;
    let final_train_mse = train_idx
        .iter()
        .zip(&train_preds)
        .map(|(&i, p)| (p - ws.labels[i]).powi(2))
        .sum::<f64>()
        / n_train as f64;

    let val_preds = eval_split(val_idx)?;
    let residuals: Vec<f64> = val_idx
        .iter()
        .zip(&val_preds)
        .map(|(&i, p)| clamp_unit(*p) - ws.labels[i])
        .collect();
    let val_mae = residuals.iter().map(|r| r.abs()).sum::<f64>() / n_val as f64;
    let mean_r = residuals.iter().sum::<f64>() / n_val as f64;
    let val_residual_std = if n_val > 1 {
        (residuals.iter().map(|r| (r - mean_r).powi(2)).sum::<f64>() / (n_val - 1) as f64).sqrt()
    } else {
        0.0
    };

    Ok(TrainedModel {
        params,
        report: TrainReport {
            t: ws.t,
            train_count: n_train,
            val_count: n_val,
            val_mae,
            val_residual_std,
            final_train_mse,
        },
    })
}

/// Train one model per window set; the sets are independent, so they may
/// run in parallel without changing any result.
pub fn train_uncertainty_models(
    sets: &[WindowSet],
    cfg: &DeviationTrainConfig,
    seed: u64,
    mode: ExecMode,
) -> Result<Vec<TrainedModel>, TrainError> {
    map_indexed(mode, sets.len(), |i| {
        train_deviation_model(&sets[i], cfg, seed)
    })
    .into_iter()
    .collect()
}

/// Exponential smoothing of successive estimates for one pedestrian.
/// Disabled by default; the raw per-call estimate ships as is.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RhoSmoothing {
    pub enabled: bool,
    pub alpha: f64,
}

impl Default for RhoSmoothing {
    fn default() -> RhoSmoothing {
        RhoSmoothing {
            enabled: false,
            alpha: 0.6,
        }
    }
}

impl RhoSmoothing {
    pub fn apply(&self, prev: Option<f64>, fresh: f64) -> f64 {
        match (self.enabled, prev) {
            (true, Some(p)) => self.alpha * p + (1.0 - self.alpha) * fresh,
            _ => fresh,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RhoEstimate {
    pub value: f64,
    /// Set when the history was too short for any model and the prior was
    /// returned instead.
    pub low_confidence: bool,
    /// Which model produced the value; None for the prior.
    pub model_t: Option<usize>,
}

/// The twenty per-length models plus the cold-start prior.
#[derive(Clone, Debug)]
pub struct UncertaintyBank {
    models: Vec<MlpParams>,
    pub prior: f64,
}

impl UncertaintyBank {
    pub fn new(models: Vec<MlpParams>, prior: f64) -> UncertaintyBank {
        assert_eq!(models.len(), N_TRACK_MODELS, "one model per track length");
        for (i, m) in models.iter().enumerate() {
            assert_eq!(m.spec(), &deviation_spec(i + 1), "model {} shape", i + 1);
        }
        UncertaintyBank { models, prior }
    }

    pub fn model(&self, t: usize) -> &MlpParams {
        &self.models[t - 1]
    }

    /// Deviation estimate for one observed pedestrian. Model choice is
    /// min(observed steps, 20); shorter histories fall back to the prior.
    pub fn estimate(&self, history: &TrackHistory) -> RhoEstimate {
        let steps = history.steps_available();
        if steps == 0 {
            return RhoEstimate {
                value: clamp_unit(self.prior),
                low_confidence: true,
                model_t: None,
            };
        }
        let t = steps.min(N_TRACK_MODELS);
        let features = track_features(history, t).expect("length checked above");
        let raw = self.models[t - 1].forward(&features).expect("bank shape")[0];
        RhoEstimate {
            value: clamp_unit(raw),
            low_confidence: false,
            model_t: Some(t),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), CheckpointError> {
        fs::create_dir_all(dir).map_err(io::Error::from)?;
        let mut entries = Vec::with_capacity(N_TRACK_MODELS);
        for (i, m) in self.models.iter().enumerate() {
            let t = i + 1;
            let file = format!("model_t{t:02}.ckpt");
            let mut meta = CheckpointMeta::new();
            meta.insert("t".into(), t.to_string());
            save_checkpoint(&dir.join(&file), &meta, &[("deviation", m)])?;
            entries.push(BankEntry { t, file });
        }
        let manifest = BankManifest {
            format: BANK_FORMAT.to_string(),
            prior: self.prior,
            models: entries,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(dir.join("manifest.json"), json).map_err(io::Error::from)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<UncertaintyBank, BankLoadError> {
        let manifest_path = dir.join("manifest.json");
        let json = fs::read_to_string(&manifest_path)
            .map_err(|e| BankLoadError::Manifest(manifest_path.clone(), e.to_string()))?;
        let manifest: BankManifest = serde_json::from_str(&json)
            .map_err(|e| BankLoadError::Manifest(manifest_path.clone(), e.to_string()))?;
        if manifest.format != BANK_FORMAT {
            return Err(BankLoadError::Manifest(
                manifest_path,
                format!("unknown format {:?}", manifest.format),
            ));
        }
        if manifest.models.len() != N_TRACK_MODELS {
            return Err(BankLoadError::WrongCount(manifest.models.len()));
        }
        let mut models = Vec::with_capacity(N_TRACK_MODELS);
        for (i, entry) in manifest.models.iter().enumerate() {
            if entry.t != i + 1 {
                return Err(BankLoadError::Manifest(
                    manifest_path,
                    format!("entry {} claims t={}", i, entry.t),
                ));
            }
            let params = load_net_expecting(
                &dir.join(&entry.file),
                "deviation",
                &deviation_spec(entry.t),
            )?;
            models.push(params);
        }
        Ok(UncertaintyBank {
            models,
            prior: manifest.prior,
        })
    }
}

const BANK_FORMAT: &str = "deviation-bank-v1";

#[derive(Serialize, Deserialize)]
struct BankManifest {
    format: String,
    prior: f64,
    models: Vec<BankEntry>,
}

#[derive(Serialize, Deserialize)]
struct BankEntry {
    t: usize,
    file: String,
}

#[derive(Debug, thiserror::Error)]
pub enum BankLoadError {
    #[error("bank manifest {0}: {1}")]
    Manifest(PathBuf, String),
    #[error("bank lists {0} models, expected 20")]
    WrongCount(usize),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

//! Crowd-state value network: per-pedestrian embeddings pooled by softmax
//! attention into a fixed-size crowd representation, scored together with
//! the robot's own state. Also the one-step lookahead that turns the value
//! function into a policy over the discrete action lattice.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{build_action_space, DiscreteAction, N_ACTIONS};
use crate::nn::batch::BatchCache;
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CheckpointMeta};
use crate::nn::{MlpGrads, MlpParams, MlpSpec, NetError};
use crate::obs::{propagate_state, rotate_observation, ThetaMode};
use crate::reward::{default_reward, modified_reward, RewardParams};
use crate::sim::{surface_distance, AgentFullState, PedestrianObservable};

pub const SELF_LEN: usize = 6;
pub const EMBED_LEN: usize = 100;
pub const CROWD_LEN: usize = 50;

/// The four sub-networks. `include_rho` appends the per-pedestrian
/// deviation value to each rotated observation row.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueNetwork {
    /// Per-pedestrian embedding, relu on the output so downstream nets see
    /// non-negative features.
    pub embed: MlpParams,
    /// Embedding to the per-pedestrian crowd feature.
    pub feature: MlpParams,
    /// Attention logit from [embedding ; mean embedding].
    pub score: MlpParams,
    /// Scalar value from [self state ; pooled crowd feature].
    pub head: MlpParams,
    pub include_rho: bool,
}

pub fn value_net_specs(include_rho: bool) -> [MlpSpec; 4] {
    let d = 13 + include_rho as usize;
    [
        MlpSpec::new(&[d, 150, EMBED_LEN], true),
        MlpSpec::new(&[EMBED_LEN, 100, CROWD_LEN], false),
        MlpSpec::new(&[2 * EMBED_LEN, 100, 100, 1], false),
        MlpSpec::new(&[SELF_LEN + CROWD_LEN, 150, 100, 100, 1], false),
    ]
}

impl ValueNetwork {
    pub fn init(include_rho: bool, rng: &mut ChaCha8Rng) -> ValueNetwork {
        let [se, sf, ss, sh] = value_net_specs(include_rho);
        let net = ValueNetwork {
            embed: MlpParams::init(se, rng),
            feature: MlpParams::init(sf, rng),
            score: MlpParams::init(ss, rng),
            head: MlpParams::init(sh, rng),
            include_rho,
        };
        net.assert_coupled_widths();
        net
    }

    /// The intermediate widths couple the four nets; catch a mismatched
    /// assembly before it turns into a confusing dim error mid-forward.
    pub fn assert_coupled_widths(&self) {
        let e = self.embed.spec().output_dim();
        let h = self.feature.spec().output_dim();
        assert_eq!(self.feature.spec().input_dim(), e);
        assert_eq!(self.score.spec().input_dim(), 2 * e);
        assert_eq!(self.score.spec().output_dim(), 1);
        assert_eq!(self.head.spec().input_dim(), SELF_LEN + h);
        assert_eq!(self.head.spec().output_dim(), 1);
    }

    pub fn row_len(&self) -> usize {
        self.embed.spec().input_dim()
    }

    fn e_len(&self) -> usize {
        self.embed.spec().output_dim()
    }

    fn h_len(&self) -> usize {
        self.feature.spec().output_dim()
    }

    /// Rotate the joint state into network input rows. `rhos` must cover
    /// every pedestrian when the network takes the deviation feature; it is
    /// ignored otherwise.
    pub fn encode(
        &self,
        robot: &AgentFullState,
        peds: &[PedestrianObservable],
        rhos: &[f64],
        theta_mode: ThetaMode,
    ) -> CrowdState {
        if self.include_rho {
            assert_eq!(rhos.len(), peds.len(), "one deviation value per pedestrian");
        }
        let mut rows = Vec::with_capacity(peds.len() * self.row_len());
        let mut self_state = [0.0; SELF_LEN];
        if peds.is_empty() {
            // No rotation row exists to borrow the prefix from; compute one
            // against a placeholder pedestrian at the robot's own position.
            let dummy = PedestrianObservable {
                pos: robot.pos,
                vel: crate::vec2::Vec2::ZERO,
                radius: robot.radius,
            };
            self_state = rotate_observation(robot, &dummy, theta_mode).self_state();
        }
        for (i, ped) in peds.iter().enumerate() {
            let obs = rotate_observation(robot, ped, theta_mode);
            if i == 0 {
                self_state = obs.self_state();
            }
            rows.extend_from_slice(&obs.as_array());
            if self.include_rho {
                rows.push(rhos[i]);
            }
        }
        CrowdState {
            self_state,
            rows,
            n: peds.len(),
        }
    }

    /// Scalar value of one encoded state, via the same kernels as the batch
    /// path so the two agree bit for bit.
    pub fn value(&self, st: &CrowdState) -> f64 {
        self.values_batch(std::slice::from_ref(st))[0]
    }

    /// Values for a batch of encoded states. All pedestrian rows across the
    /// batch run through the sub-networks as one matrix; attention pooling
    /// is per state.
    pub fn values_batch(&self, sts: &[CrowdState]) -> Vec<f64> {
        let h_len = self.h_len();
        let seg = segments(sts);
        let total = seg[sts.len()];
        let head_w = SELF_LEN + h_len;

        let mut head_in = vec![0.0; sts.len() * head_w];
        for (b, st) in sts.iter().enumerate() {
            head_in[b * head_w..b * head_w + SELF_LEN].copy_from_slice(&st.self_state);
        }
        if total > 0 {
            let x = gather_rows(sts, self.row_len(), total);
            let e = self.embed.forward_batch(&x, total).expect("embed width");
            let h = self.feature.forward_batch(&e, total).expect("feature width");
            let a = attention_inputs(&e, &seg, self.e_len());
            let scores = self.score.forward_batch(&a, total).expect("score width");
            let mut weights = vec![0.0; total];
            for b in 0..sts.len() {
                softmax_into(&scores[seg[b]..seg[b + 1]], &mut weights[seg[b]..seg[b + 1]]);
                let row = &mut head_in[b * head_w + SELF_LEN..(b + 1) * head_w];
                pool_rows(&h, &weights, seg[b]..seg[b + 1], row);
            }
        }
        self.head
            .forward_batch(&head_in, sts.len())
            .expect("head width")
    }

    /// Forward pass that keeps every intermediate needed for backprop.
    pub fn values_batch_cached(&self, sts: &[CrowdState]) -> ValueBatchCache {
        let h_len = self.h_len();
        let seg = segments(sts);
        let total = seg[sts.len()];
        let head_w = SELF_LEN + h_len;

        let mut weights = vec![0.0; total];
        let mut h = Vec::new();
        let mut embed_cache = None;
        let mut feature_cache = None;
        let mut score_cache = None;
        let mut head_in = vec![0.0; sts.len() * head_w];
        for (b, st) in sts.iter().enumerate() {
            head_in[b * head_w..b * head_w + SELF_LEN].copy_from_slice(&st.self_state);
        }

        if total > 0 {
            let x = gather_rows(sts, self.row_len(), total);
            let ec = self
                .embed
                .forward_batch_cached(&x, total)
                .expect("embed width");
            let fc = self
                .feature
                .forward_batch_cached(ec.outputs(), total)
                .expect("feature width");
            h = fc.outputs().to_vec();
            let a = attention_inputs(ec.outputs(), &seg, self.e_len());
            let sc = self
                .score
                .forward_batch_cached(&a, total)
                .expect("score width");
            for b in 0..sts.len() {
                softmax_into(
                    &sc.outputs()[seg[b]..seg[b + 1]],
                    &mut weights[seg[b]..seg[b + 1]],
                );
                let row = &mut head_in[b * head_w + SELF_LEN..(b + 1) * head_w];
                pool_rows(&h, &weights, seg[b]..seg[b + 1], row);
            }
            embed_cache = Some(ec);
            feature_cache = Some(fc);
            score_cache = Some(sc);
        }

        let head_cache = self
            .head
            .forward_batch_cached(&head_in, sts.len())
            .expect("head width");
        let values = head_cache.outputs().to_vec();
        ValueBatchCache {
            seg,
            embed_cache,
            feature_cache,
            score_cache,
            weights,
            h,
            head_cache,
            values,
        }
    }

    /// Accumulate parameter gradients of `sum_b dvalues[b] * V_b` into
    /// `grads`.
    pub fn backward_batch(
        &self,
        cache: &ValueBatchCache,
        dvalues: &[f64],
        grads: &mut ValueGrads,
    ) -> Result<(), NetError> {
        let n_states = cache.seg.len() - 1;
        assert_eq!(dvalues.len(), n_states);
        let total = cache.seg[n_states];
        let (e_len, h_len) = (self.e_len(), self.h_len());
        let head_w = SELF_LEN + h_len;

        let dhead_in = self
            .head
            .backward_batch(&cache.head_cache, dvalues, &mut grads.head)?;
        if total == 0 {
            return Ok(());
        }
        let (ec, fc, sc) = (
            cache.embed_cache.as_ref().unwrap(),
            cache.feature_cache.as_ref().unwrap(),
            cache.score_cache.as_ref().unwrap(),
        );

        // Split the pooled-feature gradient into per-row feature gradients
        // and attention-logit gradients through the softmax.
        let mut dh = vec![0.0; total * h_len];
        let mut dscores = vec![0.0; total];
        for b in 0..n_states {
            let dc = &dhead_in[b * head_w + SELF_LEN..(b + 1) * head_w];
            let rows = cache.seg[b]..cache.seg[b + 1];
            if rows.is_empty() {
                continue;
            }
            let mut dw_dot_w = 0.0;
            let mut dws = Vec::with_capacity(rows.len());
            for i in rows.clone() {
                let w = cache.weights[i];
                let hrow = &cache.h[i * h_len..(i + 1) * h_len];
                let mut dw = 0.0;
                for k in 0..h_len {
                    dh[i * h_len + k] = w * dc[k];
                    dw += hrow[k] * dc[k];
                }
                dws.push(dw);
                dw_dot_w += w * dw;
            }
            for (off, i) in rows.enumerate() {
                dscores[i] = cache.weights[i] * (dws[off] - dw_dot_w);
            }
        }

        let da = self.score.backward_batch(sc, &dscores, &mut grads.score)?;
        let de_feature = self.feature.backward_batch(fc, &dh, &mut grads.feature)?;

        // Attention input rows are [e_i ; mean(e)]: fold both halves back
        // onto the embedding gradient.
        let mut de = de_feature;
        let mut dmean = vec![0.0; e_len];
        for b in 0..n_states {
            let rows = cache.seg[b]..cache.seg[b + 1];
            let n = rows.len();
            if n == 0 {
                continue;
            }
            dmean.iter_mut().for_each(|m| *m = 0.0);
            for i in rows.clone() {
                for k in 0..e_len {
                    de[i * e_len + k] += da[i * 2 * e_len + k];
                    dmean[k] += da[i * 2 * e_len + e_len + k];
                }
            }
            let inv = 1.0 / n as f64;
            for i in rows {
                for k in 0..e_len {
                    de[i * e_len + k] += dmean[k] * inv;
                }
            }
        }

        self.embed.backward_batch(ec, &de, &mut grads.embed)?;
        Ok(())
    }

    pub fn sgd_step(&mut self, grads: &ValueGrads, lr: f64, momentum: f64) -> Result<(), NetError> {
        self.embed.sgd_step(&grads.embed, lr, momentum)?;
        self.feature.sgd_step(&grads.feature, lr, momentum)?;
        self.score.sgd_step(&grads.score, lr, momentum)?;
        self.head.sgd_step(&grads.head, lr, momentum)?;
        Ok(())
    }
}

/// Write the four sub-networks plus `include_rho` into one checkpoint.
pub fn save_value_net(
    path: &std::path::Path,
    net: &ValueNetwork,
    extra_meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    let mut meta = extra_meta.clone();
    meta.insert("include_rho".into(), (net.include_rho as u8).to_string());
    save_checkpoint(
        path,
        &meta,
        &[
            ("embed", &net.embed),
            ("feature", &net.feature),
            ("score", &net.score),
            ("head", &net.head),
        ],
    )
}

pub fn load_value_net(
    path: &std::path::Path,
) -> Result<(ValueNetwork, CheckpointMeta), CheckpointError> {
    let (meta, mut nets) = load_checkpoint(path)?;
    let include_rho = match meta.get("include_rho").map(String::as_str) {
        Some("0") => false,
        Some("1") => true,
        other => {
            return Err(CheckpointError::Malformed(format!(
                "include_rho must be \"0\" or \"1\", found {other:?}"
            )))
        }
    };
    let specs = value_net_specs(include_rho);
    let names = ["embed", "feature", "score", "head"];
    let mut take = |name: &str, spec: &MlpSpec| -> Result<MlpParams, CheckpointError> {
        let at = nets
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| CheckpointError::MissingNet(name.to_string()))?;
        let (_, params) = nets.swap_remove(at);
        if params.spec() != spec {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: spec.widths.clone(),
                found: params.spec().widths.clone(),
            });
        }
        Ok(params)
    };
    let net = ValueNetwork {
        embed: take(names[0], &specs[0])?,
        feature: take(names[1], &specs[1])?,
        score: take(names[2], &specs[2])?,
        head: take(names[3], &specs[3])?,
        include_rho,
    };
    net.assert_coupled_widths();
    Ok((net, meta))
}

/// One encoded joint state: the robot prefix plus flattened pedestrian
/// rows.
#[derive(Clone, Debug)]
pub struct CrowdState {
    pub self_state: [f64; SELF_LEN],
    pub rows: Vec<f64>,
    pub n: usize,
}

pub struct ValueBatchCache {
    seg: Vec<usize>,
    embed_cache: Option<BatchCache>,
    feature_cache: Option<BatchCache>,
    score_cache: Option<BatchCache>,
    /// Attention weights per pedestrian row, normalized within each state.
    pub weights: Vec<f64>,
    h: Vec<f64>,
    head_cache: BatchCache,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ValueGrads {
    pub embed: MlpGrads,
    pub feature: MlpGrads,
    pub score: MlpGrads,
    pub head: MlpGrads,
}

impl ValueGrads {
    pub fn zeros_like(net: &ValueNetwork) -> ValueGrads {
        ValueGrads {
            embed: MlpGrads::zeros_like(&net.embed),
            feature: MlpGrads::zeros_like(&net.feature),
            score: MlpGrads::zeros_like(&net.score),
            head: MlpGrads::zeros_like(&net.head),
        }
    }

    pub fn zero(&mut self) {
        self.embed.zero();
        self.feature.zero();
        self.score.zero();
        self.head.zero();
    }

    pub fn scale(&mut self, by: f64) {
        self.embed.scale(by);
        self.feature.scale(by);
        self.score.scale(by);
        self.head.scale(by);
    }

    pub fn is_finite(&self) -> bool {
        self.embed.is_finite()
            && self.feature.is_finite()
            && self.score.is_finite()
            && self.head.is_finite()
    }
}

fn segments(sts: &[CrowdState]) -> Vec<usize> {
    let mut seg = Vec::with_capacity(sts.len() + 1);
    seg.push(0);
    for st in sts {
        seg.push(seg.last().unwrap() + st.n);
    }
    seg
}

fn gather_rows(sts: &[CrowdState], d: usize, total: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(total * d);
    for st in sts {
        debug_assert_eq!(st.rows.len(), st.n * d);
        x.extend_from_slice(&st.rows);
    }
    x
}

fn attention_inputs(e: &[f64], seg: &[usize], e_len: usize) -> Vec<f64> {
    let total = *seg.last().unwrap();
    let mut a = vec![0.0; total * 2 * e_len];
    let mut mean = vec![0.0; e_len];
    for b in 0..seg.len() - 1 {
        let rows = seg[b]..seg[b + 1];
        let n = rows.len();
        if n == 0 {
            continue;
        }
        mean.iter_mut().for_each(|m| *m = 0.0);
        for i in rows.clone() {
            for k in 0..e_len {
                mean[k] += e[i * e_len + k];
            }
        }
        let inv = 1.0 / n as f64;
        for m in &mut mean {
            *m *= inv;
        }
        for i in rows {
            let row = &mut a[i * 2 * e_len..(i + 1) * 2 * e_len];
            row[..e_len].copy_from_slice(&e[i * e_len..(i + 1) * e_len]);
            row[e_len..].copy_from_slice(&mean);
        }
    }
    a
}

fn pool_rows(h: &[f64], weights: &[f64], rows: std::ops::Range<usize>, out: &mut [f64]) {
    let h_len = out.len();
    for i in rows {
        let w = weights[i];
        let hrow = &h[i * h_len..(i + 1) * h_len];
        for k in 0..h_len {
            out[k] += w * hrow[k];
        }
    }
}

fn softmax_into(scores: &[f64], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &s in scores {
        if s > max {
            max = s;
        }
    }
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// How the one-step bootstrap discounts the successor value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscountMode {
    /// Plain gamma per step.
    #[default]
    Bare,
    /// gamma^(dt * v_pref), tying the effective horizon to travel scale.
    HorizonScaled,
}

pub fn discount_factor(mode: DiscountMode, gamma: f64, dt: f64, v_pref: f64) -> f64 {
    match mode {
        DiscountMode::Bare => gamma,
        DiscountMode::HorizonScaled => gamma.powf(dt * v_pref),
    }
}

/// Which discomfort band the lookahead reward applies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    #[default]
    FixedBand,
    DeviationBand,
}

#[derive(Clone, Copy, Debug)]
pub struct LookaheadConfig {
    pub gamma: f64,
    pub discount: DiscountMode,
    pub reward_kind: RewardKind,
    pub reward: RewardParams,
    pub theta_mode: ThetaMode,
}

impl Default for LookaheadConfig {
    fn default() -> LookaheadConfig {
        LookaheadConfig {
            gamma: 0.9,
            discount: DiscountMode::Bare,
            reward_kind: RewardKind::FixedBand,
            reward: RewardParams::default(),
            theta_mode: ThetaMode::Raw,
        }
    }
}

/// Reward of a predicted transition, evaluated on post-step distances.
pub fn lookahead_reward(
    robot: &AgentFullState,
    peds: &[PedestrianObservable],
    rhos: &[f64],
    cfg: &LookaheadConfig,
) -> f64 {
    let d_g = robot.goal_surface_distance();
    match cfg.reward_kind {
        RewardKind::FixedBand => {
            let dists: Vec<f64> = peds
                .iter()
                .map(|p| surface_distance(robot.pos, robot.radius, p.pos, p.radius))
                .collect();
            default_reward(d_g, &dists, &cfg.reward)
        }
        RewardKind::DeviationBand => {
            assert_eq!(rhos.len(), peds.len());
            let pairs: Vec<(f64, f64)> = peds
                .iter()
                .zip(rhos)
                .map(|(p, &rho)| {
                    (
                        surface_distance(robot.pos, robot.radius, p.pos, p.radius),
                        rho,
                    )
                })
                .collect();
            modified_reward(d_g, &pairs, &cfg.reward)
        }
    }
}

/// Index of the largest score, first on ties: the action order is the
/// tie-break rule.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Greedy one-step lookahead with an arbitrary successor-value oracle.
/// The network path below goes through the batched forward instead; both
/// share the reward, discount, and tie-break logic.
pub fn select_action_with<F>(
    mut value_of: F,
    robot: &AgentFullState,
    peds: &[PedestrianObservable],
    rhos: &[f64],
    dt: f64,
    cfg: &LookaheadConfig,
) -> DiscreteAction
where
    F: FnMut(&AgentFullState, &[PedestrianObservable]) -> f64,
{
    let actions = build_action_space(robot.v_pref);
    debug_assert_eq!(actions.len(), N_ACTIONS);
    let disc = discount_factor(cfg.discount, cfg.gamma, dt, robot.v_pref);
    let scores: Vec<f64> = actions
        .iter()
        .map(|a| {
            let (nr, np) = propagate_state(robot, peds, a, dt);
            lookahead_reward(&nr, &np, rhos, cfg) + disc * value_of(&nr, &np)
        })
        .collect();
    actions[argmax_first(&scores)]
}

/// Greedy one-step lookahead through the value network, all candidate
/// successor states evaluated as one batch.
pub fn select_action(
    net: &ValueNetwork,
    robot: &AgentFullState,
    peds: &[PedestrianObservable],
    rhos: &[f64],
    dt: f64,
    cfg: &LookaheadConfig,
) -> DiscreteAction {
    let actions = build_action_space(robot.v_pref);
    debug_assert_eq!(actions.len(), N_ACTIONS);
    let disc = discount_factor(cfg.discount, cfg.gamma, dt, robot.v_pref);
    let mut states = Vec::with_capacity(actions.len());
    let mut scores = Vec::with_capacity(actions.len());
    for a in &actions {
        let (nr, np) = propagate_state(robot, peds, a, dt);
        scores.push(lookahead_reward(&nr, &np, rhos, cfg));
        states.push(net.encode(&nr, &np, rhos, cfg.theta_mode));
    }
    let values = net.values_batch(&states);
    for (s, v) in scores.iter_mut().zip(&values) {
        *s += disc * v;
    }
    actions[argmax_first(&scores)]
}

/// With probability epsilon, replace the greedy action by a uniform draw
/// over the whole lattice, greedy action included.
pub fn epsilon_greedy(
    best: DiscreteAction,
    epsilon: f64,
    v_pref: f64,
    rng: &mut ChaCha8Rng,
) -> DiscreteAction {
    use rand::Rng;
    debug_assert!((0.0..=1.0).contains(&epsilon));
    if rng.gen_range(0.0..1.0f64) < epsilon {
        let actions = build_action_space(v_pref);
        actions[rng.gen_range(0..actions.len())]
    } else {
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::action::{heading_spoke, speed_rung};
    use crate::rng::substream;
    use crate::vec2::vec2;

    fn robot_state() -> AgentFullState {
        let mut r = AgentFullState::new(vec2(0.0, -4.0), vec2(0.0, 4.0), 0.3, 1.0);
        r.vel = vec2(0.1, 0.9);
        r.theta = 1.2;
        r
    }

    fn ped(px: f64, py: f64, vx: f64, vy: f64) -> PedestrianObservable {
        PedestrianObservable {
            pos: vec2(px, py),
            vel: vec2(vx, vy),
            radius: 0.3,
        }
    }

    fn random_net(include_rho: bool, seed: u64) -> ValueNetwork {
        let mut rng = substream(seed, &[0x70]);
        ValueNetwork::init(include_rho, &mut rng)
    }

    /// Same wiring as the production net at a fraction of the widths so a
    /// full finite-difference sweep stays cheap.
    fn tiny_net(seed: u64) -> ValueNetwork {
        let mut rng = substream(seed, &[0x71]);
        let net = ValueNetwork {
            embed: MlpParams::init(MlpSpec::new(&[14, 7, 6], true), &mut rng),
            feature: MlpParams::init(MlpSpec::new(&[6, 5, 4], false), &mut rng),
            score: MlpParams::init(MlpSpec::new(&[12, 5, 1], false), &mut rng),
            head: MlpParams::init(MlpSpec::new(&[10, 8, 1], false), &mut rng),
            include_rho: true,
        };
        net.assert_coupled_widths();
        net
    }

    #[test]
    fn widths_match_the_architecture() {
        let net = random_net(true, 1);
        assert_eq!(net.embed.spec().widths, vec![14, 150, 100]);
        assert!(net.embed.spec().output_relu);
        assert_eq!(net.feature.spec().widths, vec![100, 100, 50]);
        assert_eq!(net.score.spec().widths, vec![200, 100, 100, 1]);
        assert_eq!(net.head.spec().widths, vec![56, 150, 100, 100, 1]);
        let bare = random_net(false, 1);
        assert_eq!(bare.embed.spec().widths, vec![13, 150, 100]);
        assert_eq!(bare.row_len(), 13);
    }

    #[test]
    fn single_pedestrian_composes_the_subnets_directly() {
        // One pedestrian: the softmax weight is exactly 1, so the value is
        // head([self ; feature(embed(row))]) with no pooling arithmetic.
        let net = random_net(true, 2);
        let r = robot_state();
        let p = ped(1.0, 0.0, -0.5, 0.2);
        let st = net.encode(&r, &[p], &[0.3], ThetaMode::Raw);
        let got = net.value(&st);

        let e = net.embed.forward(&st.rows).unwrap();
        let h = net.feature.forward(&e).unwrap();
        let mut head_in = st.self_state.to_vec();
        head_in.extend_from_slice(&h);
        let want = net.head.forward(&head_in).unwrap()[0];
        assert_eq!(got, want);

        let cache = net.values_batch_cached(std::slice::from_ref(&st));
        assert_eq!(cache.weights, vec![1.0]);
    }

    #[test]
    fn identical_pedestrians_share_attention_equally() {
        let net = random_net(true, 3);
        let r = robot_state();
        let p = ped(1.5, 0.5, -0.3, 0.0);
        let st = net.encode(&r, &[p, p], &[0.2, 0.2], ThetaMode::Raw);
        let cache = net.values_batch_cached(std::slice::from_ref(&st));
        assert_eq!(cache.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn attention_weights_form_a_distribution() {
        let net = random_net(true, 4);
        let r = robot_state();
        let peds: Vec<_> = (0..7)
            .map(|i| ped(0.5 * i as f64 - 1.0, 0.3 * i as f64, 0.1, -0.2))
            .collect();
        let rhos = vec![0.1; 7];
        let st = net.encode(&r, &peds, &rhos, ThetaMode::Raw);
        let cache = net.values_batch_cached(std::slice::from_ref(&st));
        let sum: f64 = cache.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(cache.weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn permutation_invariance() {
        let net = random_net(true, 5);
        let r = robot_state();
        let peds: Vec<_> = (0..5)
            .map(|i| ped(1.0 + 0.4 * i as f64, -0.5 * i as f64, 0.2 * i as f64, 0.1))
            .collect();
        let rhos: Vec<f64> = (0..5).map(|i| 0.15 * i as f64).collect();
        let base = net.value(&net.encode(&r, &peds, &rhos, ThetaMode::Raw));
        let perms: [[usize; 5]; 3] = [[4, 3, 2, 1, 0], [2, 0, 4, 1, 3], [1, 4, 0, 3, 2]];
        for perm in perms {
            let p2: Vec<_> = perm.iter().map(|&i| peds[i]).collect();
            let r2: Vec<_> = perm.iter().map(|&i| rhos[i]).collect();
            let v = net.value(&net.encode(&r, &p2, &r2, ThetaMode::Raw));
            assert!((v - base).abs() <= 1e-9, "{v} vs {base}");
        }
    }

    #[test]
    fn empty_crowd_uses_zero_representation() {
        let net = random_net(false, 6);
        let r = robot_state();
        let st = net.encode(&r, &[], &[], ThetaMode::Raw);
        let got = net.value(&st);
        let mut head_in = st.self_state.to_vec();
        head_in.extend_from_slice(&[0.0; CROWD_LEN]);
        assert_eq!(got, net.head.forward(&head_in).unwrap()[0]);
    }

    #[test]
    fn batch_of_states_matches_one_by_one() {
        let net = random_net(true, 7);
        let r = robot_state();
        let states: Vec<CrowdState> = (0..4)
            .map(|k| {
                let peds: Vec<_> = (0..k)
                    .map(|i| ped(0.7 * i as f64 - 1.0, 0.5 * k as f64, -0.1, 0.3))
                    .collect();
                let rhos = vec![0.25; k];
                net.encode(&r, &peds, &rhos, ThetaMode::Raw)
            })
            .collect();
        let batched = net.values_batch(&states);
        for (st, &v) in states.iter().zip(&batched) {
            assert_eq!(net.value(st), v);
        }
        let cached = net.values_batch_cached(&states);
        assert_eq!(cached.values, batched);
    }

    fn tiny_states(net: &ValueNetwork) -> Vec<CrowdState> {
        let r = robot_state();
        let mut out = Vec::new();
        for (b, &n) in [2usize, 0, 3].iter().enumerate() {
            let peds: Vec<_> = (0..n)
                .map(|i| {
                    ped(
                        1.0 + 0.9 * i as f64 + 0.3 * b as f64,
                        -0.8 + 0.6 * i as f64,
                        0.2 - 0.15 * i as f64,
                        0.1 * b as f64,
                    )
                })
                .collect();
            let rhos: Vec<f64> = (0..n).map(|i| 0.1 + 0.2 * i as f64).collect();
            out.push(net.encode(&r, &peds, &rhos, ThetaMode::Raw));
        }
        out
    }

    fn flat_net_params(net: &ValueNetwork) -> Vec<f64> {
        let mut f = net.embed.flat_params();
        f.extend(net.feature.flat_params());
        f.extend(net.score.flat_params());
        f.extend(net.head.flat_params());
        f
    }

    fn set_flat_net_params(net: &mut ValueNetwork, flat: &[f64]) {
        let (ne, nf, ns) = (
            net.embed.n_params(),
            net.feature.n_params(),
            net.score.n_params(),
        );
        net.embed.set_flat_params(&flat[..ne]);
        net.feature.set_flat_params(&flat[ne..ne + nf]);
        net.score.set_flat_params(&flat[ne + nf..ne + nf + ns]);
        net.head.set_flat_params(&flat[ne + nf + ns..]);
    }

    #[test]
    fn gradients_match_central_differences_through_attention() {
        // Weighted-sum loss over a batch that mixes two, zero, and three
        // pedestrians, so the check covers pooling, the softmax, the mean
        // branch, and the empty-crowd path at once.
        let mut net = tiny_net(8);
        let states = tiny_states(&net);
        let coefs = [1.0, -0.7, 0.4];

        let cache = net.values_batch_cached(&states);
        let mut grads = ValueGrads::zeros_like(&net);
        net.backward_batch(&cache, &coefs, &mut grads).unwrap();
        let mut analytic = grads.embed.flat();
        analytic.extend(grads.feature.flat());
        analytic.extend(grads.score.flat());
        analytic.extend(grads.head.flat());

        let base = flat_net_params(&net);
        assert_eq!(analytic.len(), base.len());
        let eps = 1e-6;
        let mut worst = 0.0f64;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += eps;
            set_flat_net_params(&mut net, &plus);
            let lp: f64 = net
                .values_batch(&states)
                .iter()
                .zip(&coefs)
                .map(|(v, c)| v * c)
                .sum();
            let mut minus = base.clone();
            minus[i] -= eps;
            set_flat_net_params(&mut net, &minus);
            let lm: f64 = net
                .values_batch(&states)
                .iter()
                .zip(&coefs)
                .map(|(v, c)| v * c)
                .sum();
            let numeric = (lp - lm) / (2.0 * eps);
            let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst:e}");
    }

    #[test]
    fn empty_batch_backward_is_a_no_op_for_crowd_nets() {
        let net = tiny_net(9);
        let r = robot_state();
        let st = net.encode(&r, &[], &[], ThetaMode::Raw);
        let cache = net.values_batch_cached(std::slice::from_ref(&st));
        let mut grads = ValueGrads::zeros_like(&net);
        net.backward_batch(&cache, &[1.0], &mut grads).unwrap();
        assert!(grads.embed.flat().iter().all(|&g| g == 0.0));
        assert!(grads.score.flat().iter().all(|&g| g == 0.0));
        assert!(grads.head.flat().iter().any(|&g| g != 0.0));
    }

    #[test]
    fn discount_modes() {
        assert_eq!(discount_factor(DiscountMode::Bare, 0.9, 0.25, 1.0), 0.9);
        let d = discount_factor(DiscountMode::HorizonScaled, 0.9, 0.25, 1.2);
        assert!((d - 0.9f64.powf(0.3)).abs() < 1e-15);
    }

    #[test]
    fn oracle_lookahead_runs_at_the_goal_heading() {
        // Empty crowd and a value oracle of -goal_distance: the best score
        // is the fastest rung on the spoke closest to the goal bearing.
        let robot = AgentFullState::new(vec2(0.0, 0.0), vec2(3.0, 4.0), 0.3, 1.0);
        let cfg = LookaheadConfig::default();
        let a = select_action_with(
            |r: &AgentFullState, _: &[PedestrianObservable]| -r.goal_surface_distance(),
            &robot,
            &[],
            &[],
            0.25,
            &cfg,
        );
        match a {
            DiscreteAction::Move { speed, heading } => {
                assert_eq!(speed, speed_rung(5, 1.0));
                assert_eq!(heading, heading_spoke(2));
            }
            DiscreteAction::Stop => panic!("expected motion toward the goal"),
        }
    }

    #[test]
    fn oracle_lookahead_is_shift_invariant() {
        // Adding a constant to every successor value must not change the
        // chosen action.
        let robot = AgentFullState::new(vec2(0.2, -0.1), vec2(-2.0, 3.0), 0.3, 1.0);
        let peds = [ped(0.8, 0.5, -0.2, 0.0), ped(-1.0, 0.3, 0.1, -0.3)];
        let rhos = [0.2, 0.4];
        let cfg = LookaheadConfig::default();
        let base = select_action_with(
            |r: &AgentFullState, _: &[PedestrianObservable]| -r.goal_surface_distance(),
            &robot,
            &peds,
            &rhos,
            0.25,
            &cfg,
        );
        let shifted = select_action_with(
            |r: &AgentFullState, _: &[PedestrianObservable]| 17.5 - r.goal_surface_distance(),
            &robot,
            &peds,
            &rhos,
            0.25,
            &cfg,
        );
        assert_eq!(base, shifted);
    }

    #[test]
    fn zero_net_far_from_goal_stops() {
        // All values zero and no reward in reach: every score ties at zero
        // and the first lattice action wins.
        let mut net = random_net(false, 10);
        let zeros = vec![0.0; flat_net_params(&net).len()];
        set_flat_net_params(&mut net, &zeros);
        let robot = AgentFullState::new(vec2(0.0, -4.0), vec2(0.0, 4.0), 0.3, 1.0);
        let cfg = LookaheadConfig::default();
        let a = select_action(&net, &robot, &[], &[], 0.25, &cfg);
        assert_eq!(a, DiscreteAction::Stop);
    }

    #[test]
    fn zero_net_adjacent_to_goal_reaches_it() {
        // Within one step of the goal the success reward alone drives the
        // choice; the winner must actually arrive, and ties resolve to the
        // lowest lattice index among arriving actions.
        let mut net = random_net(false, 11);
        let zeros = vec![0.0; flat_net_params(&net).len()];
        set_flat_net_params(&mut net, &zeros);
        let robot = AgentFullState::new(vec2(0.0, 3.6), vec2(0.0, 4.0), 0.3, 1.0);
        let dt = 0.25;
        let cfg = LookaheadConfig::default();
        let chosen = select_action(&net, &robot, &[], &[], dt, &cfg);

        let arrives = |a: &DiscreteAction| {
            let (nr, _) = propagate_state(&robot, &[], a, dt);
            nr.goal_surface_distance() < 0.0
        };
        assert!(arrives(&chosen));
        let first = build_action_space(1.0)
            .into_iter()
            .find(|a| arrives(a))
            .unwrap();
        assert_eq!(chosen, first);
    }

    #[test]
    fn network_lookahead_matches_the_oracle_path() {
        let net = random_net(true, 12);
        let cfg = LookaheadConfig {
            reward_kind: RewardKind::DeviationBand,
            discount: DiscountMode::HorizonScaled,
            ..LookaheadConfig::default()
        };
        for k in 0..6 {
            let mut robot = robot_state();
            robot.pos = vec2(0.3 * k as f64 - 1.0, -3.0 + 0.5 * k as f64);
            let peds = [
                ped(0.5 + 0.2 * k as f64, -2.0, 0.1, 0.4),
                ped(-0.7, -2.5 + 0.3 * k as f64, 0.2, -0.1),
                ped(1.2, -1.0, -0.3, 0.2),
            ];
            let rhos = [0.1, 0.5, 0.9];
            let via_batch = select_action(&net, &robot, &peds, &rhos, 0.25, &cfg);
            let via_oracle = select_action_with(
                |r: &AgentFullState, p: &[PedestrianObservable]| {
                    net.value(&net.encode(r, p, &rhos, cfg.theta_mode))
                },
                &robot,
                &peds,
                &rhos,
                0.25,
                &cfg,
            );
            assert_eq!(via_batch, via_oracle, "case {k}");
        }
    }

    #[test]
    fn epsilon_zero_keeps_the_greedy_action() {
        let mut rng = substream(13, &[0x72]);
        let best = DiscreteAction::Move {
            speed: speed_rung(2, 1.0),
            heading: heading_spoke(7),
        };
        for _ in 0..100 {
            assert_eq!(epsilon_greedy(best, 0.0, 1.0, &mut rng), best);
        }
    }

    #[test]
    fn epsilon_one_is_uniform_over_the_lattice() {
        let mut rng = substream(14, &[0x73]);
        let actions = build_action_space(1.0);
        let mut counts = vec![0u32; actions.len()];
        let draws = 81 * 1000;
        for _ in 0..draws {
            let a = epsilon_greedy(DiscreteAction::Stop, 1.0, 1.0, &mut rng);
            let idx = actions.iter().position(|&b| b == a).unwrap();
            counts[idx] += 1;
        }
        let expected = draws as f64 / actions.len() as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 80 degrees of freedom; 130 is past the 99.9th percentile.
        assert!(chi2 < 130.0, "chi2 {chi2}");
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn epsilon_half_keeps_the_greedy_rate() {
        let mut rng = substream(15, &[0x74]);
        let best = DiscreteAction::Move {
            speed: speed_rung(5, 1.0),
            heading: heading_spoke(0),
        };
        let draws = 20_000;
        let mut hits = 0u32;
        for _ in 0..draws {
            if epsilon_greedy(best, 0.5, 1.0, &mut rng) == best {
                hits += 1;
            }
        }
        let p = 1.0 - 0.5 + 0.5 / 81.0;
        let f = hits as f64 / draws as f64;
        assert!((f - p).abs() < 0.02, "greedy rate {f}, expected {p}");
    }

    #[test]
    fn rho_input_changes_the_value() {
        let net = random_net(true, 16);
        let r = robot_state();
        let p = ped(1.0, -0.5, 0.2, 0.1);
        let lo = net.value(&net.encode(&r, &[p], &[0.0], ThetaMode::Raw));
        let hi = net.value(&net.encode(&r, &[p], &[1.0], ThetaMode::Raw));
        assert_ne!(lo, hi);
    }

    #[test]
    fn sgd_step_updates_all_four_nets() {
        let mut net = tiny_net(17);
        let states = tiny_states(&net);
        let cache = net.values_batch_cached(&states);
        let mut grads = ValueGrads::zeros_like(&net);
        net.backward_batch(&cache, &[1.0, 1.0, 1.0], &mut grads)
            .unwrap();
        let before = flat_net_params(&net);
        net.sgd_step(&grads, 0.01, 0.9).unwrap();
        let after = flat_net_params(&net);
        assert_ne!(before, after);
        let moved = before.iter().zip(&after).filter(|(a, b)| a != b).count();
        assert!(moved > before.len() / 2);
    }

    #[test]
    fn encode_requires_rho_per_pedestrian() {
        let net = random_net(true, 18);
        let r = robot_state();
        let p = ped(1.0, 0.0, 0.0, 0.0);
        let err = std::panic::catch_unwind(|| net.encode(&r, &[p], &[], ThetaMode::Raw));
        assert!(err.is_err());
    }

    #[test]
    fn greedy_action_is_deterministic_and_on_lattice() {
        let net = random_net(true, 19);
        let robot = robot_state();
        let peds = [ped(0.5, -2.0, 0.1, 0.4), ped(-0.7, -2.5, 0.2, -0.1)];
        let rhos = [0.3, 0.6];
        let cfg = LookaheadConfig::default();
        let a = select_action(&net, &robot, &peds, &rhos, 0.25, &cfg);
        let b = select_action(&net, &robot, &peds, &rhos, 0.25, &cfg);
        assert_eq!(a, b);
        assert!(build_action_space(1.0).contains(&a));
    }

    #[test]
    fn value_net_roundtrips_through_disk() {
        let net = random_net(true, 21);
        let dir = std::env::temp_dir().join("socnav_valueckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("net.ckpt");
        let mut meta = CheckpointMeta::new();
        meta.insert("note".into(), "roundtrip".into());
        save_value_net(&path, &net, &meta).unwrap();
        let (back, meta2) = load_value_net(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(meta2.get("note").map(String::as_str), Some("roundtrip"));
        assert_eq!(meta2.get("include_rho").map(String::as_str), Some("1"));

        let bare = random_net(false, 21);
        save_value_net(&path, &bare, &CheckpointMeta::new()).unwrap();
        let (back, _) = load_value_net(&path).unwrap();
        assert!(!back.include_rho);
        assert_eq!(back.row_len(), 13);
    }

    #[test]
    fn random_exploration_stays_on_the_lattice() {
        let mut rng = substream(20, &[0x75]);
        let actions = build_action_space(0.7);
        for _ in 0..500 {
            let a = epsilon_greedy(actions[3], 0.8, 0.7, &mut rng);
            assert!(actions.contains(&a));
        }
    }
}

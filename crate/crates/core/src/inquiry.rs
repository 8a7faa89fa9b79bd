//! Inquiry policy training.
//!
//! The policy and value networks both read `[e, onehot(state)]`. Each round
//! the policy picks a legal question, the environment answers, and the
//! reward
//!
//! ```text
//! R_t = -lambda + alpha (F1p + beta F1n) + F2p + beta F2n + sum_j |y_j(t-1) - y_j(t)|
//! ```
//!
//! combines finding counts with how much the frozen diagnosis model's output
//! moved. Training is PPO with GAE advantages.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::consult_env::{encode_state, observed_ternary, ConsultEnv, DisclosureProbs, StepFindings};
use crate::diagnosis::{meta_str, meta_usize, DiagnosisModel};
use crate::error::{Error, Result};
use crate::nncore::{self, AdamConfig, AdamState, DenseNet, NetCheckpoint, OutputHead};
use crate::ontology::HpiOntology;
use crate::patientgen::{encode_history, PatientDataset};
use crate::seed;

// ---------------------------------------------------------------------------
// Networks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct InquiryPolicy {
    net: DenseNet,
    e_width: usize,
    m: usize,
    ontology_digest: String,
}

impl InquiryPolicy {
    /// He-initialized hidden layers; the output layer is scaled down so the
    /// initial policy is close to uniform over legal questions.
    pub fn new(ontology: &HpiOntology, e_width: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut dims = vec![e_width + 3 * ontology.m()];
        dims.extend_from_slice(hidden);
        dims.push(ontology.k());
        let mut net = DenseNet::new(&dims, OutputHead::Logits, seed)?;
        net.scale_output_layer(0.01);
        Ok(InquiryPolicy {
            net,
            e_width,
            m: ontology.m(),
            ontology_digest: ontology.digest().to_string(),
        })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut DenseNet {
        &mut self.net
    }

    pub fn e_width(&self) -> usize {
        self.e_width
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.net.output_dim()
    }

    pub fn ontology_digest(&self) -> &str {
        &self.ontology_digest
    }

    pub fn input(&self, e: &[f64], state_encoding: &[f64]) -> Result<Vec<f64>> {
        crate::error::shape_check("history vector", self.e_width, e.len())?;
        crate::error::shape_check("state encoding", 3 * self.m, state_encoding.len())?;
        let mut x = e.to_vec();
        x.extend_from_slice(state_encoding);
        Ok(x)
    }

    /// Softmax over the legal questions; illegal entries are exactly 0.
    pub fn distribution(&self, e: &[f64], state_encoding: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
        let logits = self.net.forward(&self.input(e, state_encoding)?)?;
        nncore::masked_softmax(&logits, mask)
    }

    /// Highest-scoring legal question, lowest id on ties.
    pub fn greedy(&self, e: &[f64], state_encoding: &[f64], mask: &[bool]) -> Result<usize> {
        let logits = self.net.forward(&self.input(e, state_encoding)?)?;
        crate::error::shape_check("legal mask", logits.len(), mask.len())?;
        let mut best: Option<usize> = None;
        for (q, (&l, &legal)) in logits.iter().zip(mask).enumerate() {
            if legal && best.is_none_or(|b| l > logits[b]) {
                best = Some(q);
            }
        }
        best.ok_or(Error::NoLegalAction)
    }

    pub fn to_checkpoint(&self, seed: u64, reward: &RewardParams, disclosure: &DisclosureProbs) -> NetCheckpoint {
        let mut meta = net_meta(seed, self.e_width, self.m, &self.ontology_digest);
        meta.insert("K".into(), Value::from(self.k()));
        meta.insert("reward_params".into(), serde_json::to_value(reward).expect("serializes"));
        meta.insert("disclosure_probs".into(), serde_json::to_value(disclosure).expect("serializes"));
        self.net.to_checkpoint(meta)
    }

    pub fn from_checkpoint(ckpt: &NetCheckpoint) -> Result<Self> {
        let net = DenseNet::from_checkpoint(ckpt)?;
        let e_width = meta_usize(&ckpt.meta, "E")?;
        let m = meta_usize(&ckpt.meta, "M")?;
        let k = meta_usize(&ckpt.meta, "K")?;
        if net.input_dim() != e_width + 3 * m || net.output_dim() != k {
            return Err(Error::Shape("policy checkpoint dims disagree with its meta block".into()));
        }
        Ok(InquiryPolicy {
            net,
            e_width,
            m,
            ontology_digest: meta_str(&ckpt.meta, "ontology_digest")?,
        })
    }
}

fn net_meta(seed: u64, e_width: usize, m: usize, digest: &str) -> Map<String, Value> {
    let mut meta = Map::new();
    meta.insert("seed".into(), Value::from(seed));
    meta.insert("E".into(), Value::from(e_width));
    meta.insert("M".into(), Value::from(m));
    meta.insert("ontology_digest".into(), Value::from(digest));
    meta
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    net: DenseNet,
    e_width: usize,
    m: usize,
    ontology_digest: String,
}

impl ValueNet {
    pub fn new(ontology: &HpiOntology, e_width: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut dims = vec![e_width + 3 * ontology.m()];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(ValueNet {
            net: DenseNet::new(&dims, OutputHead::Scalar, seed)?,
            e_width,
            m: ontology.m(),
            ontology_digest: ontology.digest().to_string(),
        })
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    pub fn value(&self, input: &[f64]) -> Result<f64> {
        let v = self.net.forward(input)?[0];
        if !v.is_finite() {
            return Err(Error::NonFinite("value estimate".into()));
        }
        Ok(v)
    }

    pub fn to_checkpoint(&self, seed: u64) -> NetCheckpoint {
        self.net
            .to_checkpoint(net_meta(seed, self.e_width, self.m, &self.ontology_digest))
    }

    pub fn from_checkpoint(ckpt: &NetCheckpoint) -> Result<Self> {
        let net = DenseNet::from_checkpoint(ckpt)?;
        let e_width = meta_usize(&ckpt.meta, "E")?;
        let m = meta_usize(&ckpt.meta, "M")?;
        if net.input_dim() != e_width + 3 * m || net.head() != OutputHead::Scalar {
            return Err(Error::Shape("value checkpoint dims disagree with its meta block".into()));
        }
        Ok(ValueNet {
            net,
            e_width,
            m,
            ontology_digest: meta_str(&ckpt.meta, "ontology_digest")?,
        })
    }
}

// ---------------------------------------------------------------------------
// Reward
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardParams {
    /// Per-round time penalty.
    pub lambda: f64,
    /// Weight of first-level findings.
    pub alpha: f64,
    /// Discount on negative findings.
    pub beta: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            lambda: 0.5,
            alpha: 2.0,
            beta: 0.5,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if ![self.lambda, self.alpha, self.beta].iter().all(|x| x.is_finite()) || self.lambda < 0.0 {
            return Err(Error::Config(format!("invalid reward parameters {self:?}")));
        }
        Ok(())
    }
}

/// Total absolute change between two diagnosis distributions.
pub fn prediction_shift(prev: &[f64], new: &[f64]) -> Result<f64> {
    crate::error::shape_check("diagnosis distribution", prev.len(), new.len())?;
    Ok(prev.iter().zip(new).map(|(a, b)| (a - b).abs()).sum())
}

pub fn compute_reward(
    params: &RewardParams,
    findings: &StepFindings,
    prev_probs: &[f64],
    new_probs: &[f64],
) -> Result<f64> {
    let shift = prediction_shift(prev_probs, new_probs)?;
    let f = |n: usize| n as f64;
    Ok(-params.lambda
        + params.alpha * (f(findings.f1p) + params.beta * f(findings.f1n))
        + f(findings.f2p)
        + params.beta * f(findings.f2n)
        + shift)
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub episodes_per_iter: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.2,
            epochs: 4,
            minibatch_size: 256,
            gamma: 0.99,
            gae_lambda: 0.95,
            policy_lr: 3e-4,
            value_lr: 1e-3,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            episodes_per_iter: 1024,
            iterations: 150,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.clip_eps.is_nan() || self.clip_eps <= 0.0 {
            return bad("clip epsilon must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("GAE lambda must lie in [0, 1]");
        }
        if self.minibatch_size == 0 || self.episodes_per_iter == 0 {
            return bad("minibatch size and episodes per iteration must be positive");
        }
        if !(self.policy_lr >= 0.0 && self.value_lr >= 0.0 && self.max_grad_norm > 0.0) {
            return bad("learning rates must be non-negative and max_grad_norm positive");
        }
        Ok(())
    }
}

/// Flat transition storage; episodes are contiguous and each ends with
/// exactly one `done`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryBatch {
    /// Policy/value input `[e, onehot(state)]` per transition.
    pub inputs: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Steps per collected episode (zero for episodes with nothing to ask).
    pub episode_lengths: Vec<usize>,
    pub episode_returns: Vec<f64>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn mean_episode_reward(&self) -> f64 {
        mean(&self.episode_returns)
    }

    pub fn mean_episode_len(&self) -> f64 {
        let lens: Vec<f64> = self.episode_lengths.iter().map(|&l| l as f64).collect();
        mean(&lens)
    }

    fn append(&mut self, mut other: TrajectoryBatch) {
        self.inputs.append(&mut other.inputs);
        self.masks.append(&mut other.masks);
        self.actions.append(&mut other.actions);
        self.log_probs.append(&mut other.log_probs);
        self.rewards.append(&mut other.rewards);
        self.values.append(&mut other.values);
        self.dones.append(&mut other.dones);
        self.episode_lengths.append(&mut other.episode_lengths);
        self.episode_returns.append(&mut other.episode_returns);
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Inverse-CDF draw from `probs` with one uniform.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Everything a rollout needs besides the networks.
#[derive(Debug, Clone, Copy)]
pub struct RolloutContext<'a> {
    pub env: ConsultEnv<'a>,
    pub diag: &'a DiagnosisModel,
    pub dataset: &'a PatientDataset,
    pub reward: RewardParams,
}

impl RolloutContext<'_> {
    /// Cross-check digests and widths of every participant.
    pub fn check(&self, policy: &InquiryPolicy, value: &ValueNet) -> Result<()> {
        let digest = self.env.ontology().digest();
        for found in [
            self.diag.ontology_digest(),
            policy.ontology_digest(),
            value.ontology_digest.as_str(),
            self.dataset.ontology_digest.as_str(),
        ] {
            if found != digest {
                return Err(Error::digest(digest, found));
            }
        }
        self.diag.check_dataset(self.dataset)?;
        if policy.e_width != self.diag.history().width || value.e_width != policy.e_width {
            return Err(Error::Shape(
                "policy, value and diagnosis models disagree on history width".into(),
            ));
        }
        if policy.k() != self.env.ontology().k() {
            return Err(Error::Shape("policy output width differs from question count".into()));
        }
        if self.dataset.is_empty() {
            return Err(Error::EmptyDataset("no patients to roll out".into()));
        }
        self.reward.validate()
    }
}

fn run_episode(
    policy: &InquiryPolicy,
    value: &ValueNet,
    ctx: &RolloutContext<'_>,
    seed: u64,
    episode: usize,
) -> Result<TrajectoryBatch> {
    let mut rng = seed::stream(seed, episode as u64);
    let patient = &ctx.dataset.records[rng.random_range(0..ctx.dataset.len())];
    let e = encode_history(patient, ctx.diag.history())?;
    let mut state = ctx.env.reset(patient, &mut rng)?;
    let mut prev = ctx.diag.predict(&e, &observed_ternary(&state))?;

    let mut out = TrajectoryBatch::default();
    let mut total = 0.0;
    while !ctx.env.is_done(&state) {
        let mask = ctx.env.legal_actions(&state);
        let input = policy.input(&e, &encode_state(&state))?;
        let logits = policy.net.forward(&input)?;
        let probs = nncore::masked_softmax(&logits, &mask)?;
        let action = sample_index(&probs, &mut rng);
        let v = value.value(&input)?;

        let outcome = ctx.env.step(&mut state, action, patient, &mut rng)?;
        let next = ctx.diag.predict(&e, &observed_ternary(&state))?;
        let r = compute_reward(&ctx.reward, &outcome.findings, &prev, &next)?;
        prev = next;
        total += r;

        out.inputs.push(input);
        out.masks.push(mask);
        out.actions.push(action);
        out.log_probs.push(probs[action].ln());
        out.rewards.push(r);
        out.values.push(v);
        out.dones.push(false);
    }
    if let Some(last) = out.dones.last_mut() {
        *last = true;
    }
    out.episode_lengths.push(out.actions.len());
    out.episode_returns.push(total);
    Ok(out)
}

/// Collect `n_episodes` episodes. Episode `i` uses rng stream `i` of
/// `seed`, and episodes are concatenated in index order, so the batch does
/// not depend on how many threads ran it.
pub fn collect_rollouts(
    policy: &InquiryPolicy,
    value: &ValueNet,
    ctx: &RolloutContext<'_>,
    n_episodes: usize,
    seed: u64,
) -> Result<TrajectoryBatch> {
    ctx.check(policy, value)?;
    let episodes = (0..n_episodes)
        .into_par_iter()
        .map(|i| run_episode(policy, value, ctx, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let mut batch = TrajectoryBatch::default();
    for ep in episodes {
        batch.append(ep);
    }
    Ok(batch)
}

/// GAE advantages and returns:
/// `delta_t = r_t + gamma V(s_t+1)(1 - done_t) - V(s_t)`,
/// `A_t = delta_t + gamma lambda (1 - done_t) A_t+1`, `return_t = A_t + V(s_t)`.
pub fn gae_advantages(batch: &TrajectoryBatch, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = batch.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let not_done = if batch.dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { batch.values[t + 1] } else { 0.0 };
        let delta = batch.rewards[t] + gamma * next_value * not_done - batch.values[t];
        running = delta + gamma * lambda * not_done * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(&batch.values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shift to mean 0 and scale to std 1 (std floored at 1e-8).
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let mu = mean(adv);
    let var = adv.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / adv.len().max(1) as f64;
    let std = var.sqrt().max(1e-8);
    adv.iter().map(|a| (a - mu) / std).collect()
}

// ---------------------------------------------------------------------------
// PPO
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
    pub entropy: f64,
}

/// Optimizer state carried across PPO updates.
#[derive(Debug, Clone)]
pub struct PpoOptimizers {
    pub policy: AdamState,
    pub value: AdamState,
}

impl PpoOptimizers {
    pub fn new(policy: &InquiryPolicy, value: &ValueNet, cfg: &PpoConfig) -> Self {
        PpoOptimizers {
            policy: AdamState::new(
                &policy.net,
                AdamConfig {
                    lr: cfg.policy_lr,
                    ..AdamConfig::default()
                },
            ),
            value: AdamState::new(
                &value.net,
                AdamConfig {
                    lr: cfg.value_lr,
                    ..AdamConfig::default()
                },
            ),
        }
    }
}

fn gather_inputs(batch: &TrajectoryBatch, idx: &[usize]) -> Array2<f64> {
    let width = batch.inputs[idx[0]].len();
    let mut x = Array2::zeros((idx.len(), width));
    for (row, &i) in idx.iter().enumerate() {
        x.row_mut(row).assign(&ndarray::ArrayView1::from(&batch.inputs[i]));
    }
    x
}

/// Mean clipped surrogate `min(rho A, clip(rho, 1-eps, 1+eps) A)` and the
/// fraction of transitions whose ratio left the clip range, for the
/// transitions `idx` under the current policy.
pub fn clipped_objective(
    policy: &InquiryPolicy,
    batch: &TrajectoryBatch,
    advantages: &[f64],
    idx: &[usize],
    clip_eps: f64,
) -> Result<(f64, f64)> {
    let logits = policy.net.forward_batch(gather_inputs(batch, idx).view())?;
    let mut objective = 0.0;
    let mut clipped = 0usize;
    for (row, &i) in idx.iter().enumerate() {
        let probs = nncore::masked_softmax(logits.row(row).as_slice().expect("row"), &batch.masks[i])?;
        let ratio = (probs[batch.actions[i]].ln() - batch.log_probs[i]).exp();
        let a = advantages[i];
        objective += (ratio * a).min(ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a);
        if (ratio - 1.0).abs() > clip_eps {
            clipped += 1;
        }
    }
    Ok((objective / idx.len() as f64, clipped as f64 / idx.len() as f64))
}

/// PPO epochs over shuffled minibatches. `advantages` must already be
/// normalized. Masks recorded at collection time are reused.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    policy: &mut InquiryPolicy,
    value: &mut ValueNet,
    batch: &TrajectoryBatch,
    advantages: &[f64],
    returns: &[f64],
    cfg: &PpoConfig,
    opt: &mut PpoOptimizers,
    seed: u64,
) -> Result<UpdateStats> {
    cfg.validate()?;
    let n = batch.len();
    if advantages.len() != n || returns.len() != n {
        return Err(Error::Shape("advantages/returns do not match the batch".into()));
    }
    if n == 0 {
        return Ok(UpdateStats::default());
    }
    let mut rng = seed::stream(seed, 5);
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut n_mb = 0usize;
    let k = policy.k();

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.minibatch_size) {
            let b = idx.len() as f64;
            let x = gather_inputs(batch, idx);

            let (logits, cache) = policy.net.forward_train(x.clone())?;
            let mut grad = Array2::zeros((idx.len(), k));
            let (mut p_loss, mut ent_sum, mut clipped) = (0.0, 0.0, 0usize);
            for (row, &i) in idx.iter().enumerate() {
                let mask = &batch.masks[i];
                let probs = nncore::masked_softmax(logits.row(row).as_slice().expect("row"), mask)?;
                let a = batch.actions[i];
                let ratio = (probs[a].ln() - batch.log_probs[i]).exp();
                let adv = advantages[i];
                let clipped_ratio = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
                let surr = ratio * adv;
                let surr_clip = clipped_ratio * adv;
                p_loss -= surr.min(surr_clip);
                let outside = (ratio - 1.0).abs() > cfg.clip_eps;
                if outside {
                    clipped += 1;
                }
                // The min picks the unclipped branch, or both coincide: gradient flows via rho.
                let through_ratio = surr <= surr_clip || !outside;

                let entropy: f64 = -probs
                    .iter()
                    .filter(|&&p| p > 0.0)
                    .map(|p| p * p.ln())
                    .sum::<f64>();
                ent_sum += entropy;

                for j in 0..k {
                    if !mask[j] {
                        continue;
                    }
                    let pj = probs[j];
                    let onehot = if j == a { 1.0 } else { 0.0 };
                    let mut g = 0.0;
                    if through_ratio {
                        g -= adv * ratio * (onehot - pj);
                    }
                    if pj > 0.0 {
                        // d(-c H)/dz_j = c p_j (ln p_j + H)
                        g += cfg.entropy_coef * pj * (pj.ln() + entropy);
                    }
                    grad[(row, j)] = g / b;
                }
            }
            let mut grads = policy.net.backward(&cache, grad.view())?;
            grads.clip_norm(cfg.max_grad_norm);
            opt.policy.step(&mut policy.net, &grads)?;

            let (v_out, v_cache) = value.net.forward_train(x)?;
            let mut v_grad = Array2::zeros((idx.len(), 1));
            let mut v_loss = 0.0;
            for (row, &i) in idx.iter().enumerate() {
                let diff = v_out[(row, 0)] - returns[i];
                v_loss += 0.5 * diff * diff;
                v_grad[(row, 0)] = diff / b;
            }
            let mut v_grads = value.net.backward(&v_cache, v_grad.view())?;
            v_grads.clip_norm(cfg.max_grad_norm);
            opt.value.step(&mut value.net, &v_grads)?;

            stats.policy_loss += p_loss / b;
            stats.value_loss += v_loss / b;
            stats.entropy += ent_sum / b;
            stats.clip_frac += clipped as f64 / b;
            n_mb += 1;
        }
    }
    if n_mb > 0 {
        let d = n_mb as f64;
        stats.policy_loss /= d;
        stats.value_loss /= d;
        stats.entropy /= d;
        stats.clip_frac /= d;
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub mean_reward: f64,
    pub mean_len: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
    pub entropy: f64,
}

pub const ITERATION_LOG_HEADER: &str = "iter,mean_reward,mean_len,policy_loss,value_loss,clip_frac,entropy";

impl IterationLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter,
            self.mean_reward,
            self.mean_len,
            self.policy_loss,
            self.value_loss,
            self.clip_frac,
            self.entropy
        )
    }
}

pub fn write_iteration_log(logs: &[IterationLog], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(ITERATION_LOG_HEADER);
    text.push('\n');
    for log in logs {
        text.push_str(&log.csv_row());
        text.push('\n');
    }
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub struct InquiryTrainer {
    pub policy: InquiryPolicy,
    pub value: ValueNet,
    pub cfg: PpoConfig,
    opt: PpoOptimizers,
    iteration: usize,
}

impl InquiryTrainer {
    pub fn new(policy: InquiryPolicy, value: ValueNet, cfg: PpoConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = PpoOptimizers::new(&policy, &value, &cfg);
        Ok(InquiryTrainer {
            policy,
            value,
            cfg,
            opt,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Collect one batch with the current policy and run one PPO update.
    pub fn train_iteration(&mut self, ctx: &RolloutContext<'_>) -> Result<IterationLog> {
        let it = self.iteration as u64;
        let batch = collect_rollouts(
            &self.policy,
            &self.value,
            ctx,
            self.cfg.episodes_per_iter,
            seed::mix(self.cfg.seed, 2 * it),
        )?;
        let (adv, returns) = gae_advantages(&batch, self.cfg.gamma, self.cfg.gae_lambda);
        let adv = normalize_advantages(&adv);
        let stats = ppo_update(
            &mut self.policy,
            &mut self.value,
            &batch,
            &adv,
            &returns,
            &self.cfg,
            &mut self.opt,
            seed::mix(self.cfg.seed, 2 * it + 1),
        )?;
        self.iteration += 1;
        Ok(IterationLog {
            iter: self.iteration - 1,
            mean_reward: batch.mean_episode_reward(),
            mean_len: batch.mean_episode_len(),
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            clip_frac: stats.clip_frac,
            entropy: stats.entropy,
        })
    }

    pub fn train(&mut self, ctx: &RolloutContext<'_>) -> Result<Vec<IterationLog>> {
        (0..self.cfg.iterations)
            .map(|_| self.train_iteration(ctx))
            .collect()
    }
}

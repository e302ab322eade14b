//! Clipped-surrogate policy optimization over warehouse rollouts, with an
//! optional curriculum-weighted temporal auxiliary term.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::encoder::{task_features, EmaTarget, EncoderParams, EncoderVars, FROZEN_ENCODER_PARAMS};
use crate::env::{EnvConfig, Observation, WarehouseEnv};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::optim::Optimizer;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::ssl::{loss_cosine_gap, loss_nce_with_negatives, MemoryQueue, SslWeights};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Frozen,
    Finetune,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_ratio: f64,
    pub gamma_discount: f64,
    pub lambda_gae: f64,
    /// Optimization epochs per iteration.
    pub epochs: usize,
    /// Environment steps collected per iteration.
    pub steps_per_iteration: usize,
    pub minibatch_size: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub learning_rate: f64,
    /// Enable the bilinear task-bias scorer on candidate logits.
    pub bias_enabled: bool,
    /// Scale on the task-bias scores.
    pub bias_beta: f64,
    pub encoder_mode: EncoderMode,
    /// Rows per minibatch used for the auxiliary temporal term.
    pub aux_batch: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_ratio: 0.2,
            gamma_discount: 0.99,
            lambda_gae: 0.95,
            epochs: 6,
            steps_per_iteration: 16_384,
            minibatch_size: 1024,
            entropy_coef: 0.01,
            value_coef: 0.5,
            learning_rate: 3e-4,
            bias_enabled: true,
            bias_beta: 1.0,
            encoder_mode: EncoderMode::Finetune,
            aux_batch: 256,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clip_ratio <= 0.0 {
            return Err(Error::config("clip ratio must be positive"));
        }
        if !(0.0..1.0).contains(&self.gamma_discount) && self.gamma_discount != 1.0 {
            return Err(Error::config("discount must be in [0, 1]"));
        }
        if self.epochs == 0 || self.steps_per_iteration == 0 || self.minibatch_size < 2 {
            return Err(Error::config("epochs, steps and minibatch size must be positive"));
        }
        Ok(())
    }
}

/// One agent-step of an on-policy rollout.
#[derive(Clone, Debug)]
pub struct RolloutStep<S> {
    pub episode: u64,
    pub agent: usize,
    pub features: Vec<S>,
    pub mask: Vec<bool>,
    /// 0-indexed action (`k_candidates` = skip).
    pub action: usize,
    pub reward: S,
    pub done: bool,
    pub log_prob: S,
    pub value: S,
    pub unassigned: bool,
    pub delivered: bool,
}

/// Rollout data plus episode-level accounting. Steps are time-major: all
/// agents of step 0, then all agents of step 1, ...
#[derive(Clone, Debug)]
pub struct Rollout<S> {
    pub steps: Vec<RolloutStep<S>>,
    pub n_agents: usize,
    pub bootstrap_values: Vec<S>,
    pub env_steps: usize,
    /// (deliveries, summed reward) of episodes completed during collection.
    pub completed_episodes: Vec<(usize, f64)>,
    pub unassigned_steps: usize,
}

impl<S: Scalar> Rollout<S> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn features_matrix(&self, rows: &[usize]) -> Tensor<S> {
        let d = self.steps[0].features.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&self.steps[r].features);
        }
        Tensor::matrix(rows.len(), d, data).expect("uniform feature width")
    }

    /// Same-agent row `dt` environment steps later, if inside the rollout
    /// and the same episode.
    pub fn successor(&self, row: usize, dt: usize) -> Option<usize> {
        let target = row + dt * self.n_agents;
        if target >= self.steps.len() {
            return None;
        }
        (self.steps[target].episode == self.steps[row].episode).then_some(target)
    }

    pub fn mean_return(&self) -> f64 {
        if self.completed_episodes.is_empty() {
            return 0.0;
        }
        self.completed_episodes.iter().map(|(_, r)| r).sum::<f64>()
            / self.completed_episodes.len() as f64
    }

    pub fn deliveries_per_episode(&self) -> f64 {
        if self.completed_episodes.is_empty() {
            return 0.0;
        }
        self.completed_episodes.iter().map(|(d, _)| *d as f64).sum::<f64>()
            / self.completed_episodes.len() as f64
    }

    pub fn unassigned_pct(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        100.0 * self.unassigned_steps as f64 / self.steps.len() as f64
    }
}

/// Stateful on-policy collector. The environment persists across calls so
/// iterations truncate episodes rather than discarding them.
pub struct RolloutCollector<S: Scalar> {
    env_cfg: EnvConfig,
    env: WarehouseEnv<S>,
    obs: Vec<Observation<S>>,
    env_rng: SeededRng,
    action_rng: SeededRng,
    episode: u64,
    episode_deliveries: usize,
    episode_return: f64,
}

impl<S: Scalar> RolloutCollector<S> {
    pub fn new(env_cfg: &EnvConfig, env_rng: SeededRng, action_rng: SeededRng) -> Result<Self> {
        let mut env_rng = env_rng;
        let seed = env_rng_seed(&mut env_rng);
        let (env, obs) = WarehouseEnv::reset(seed, env_cfg)?;
        Ok(RolloutCollector {
            env_cfg: env_cfg.clone(),
            env,
            obs,
            env_rng,
            action_rng,
            episode: 0,
            episode_deliveries: 0,
            episode_return: 0.0,
        })
    }

    /// Sample `steps` environment transitions under the current policy.
    pub fn collect(
        &mut self,
        params: &EncoderParams<S>,
        cfg: &PpoConfig,
        steps: usize,
    ) -> Result<Rollout<S>> {
        let n = self.env_cfg.n_agents;
        let mut out = Vec::with_capacity(steps * n);
        let mut completed = Vec::new();
        let mut unassigned_steps = 0usize;

        for _ in 0..steps {
            let (log_probs, values) = policy_forward_plain(params, &self.obs, cfg)?;
            let mut actions_env = Vec::with_capacity(n);
            let mut chosen = Vec::with_capacity(n);
            for a in 0..n {
                let probs: Vec<S> =
                    (0..log_probs.cols()).map(|c| log_probs.get(a, c).exp()).collect();
                let idx = self.action_rng.categorical(&probs);
                chosen.push(idx);
                actions_env.push(idx + 1);
            }
            let result = self.env.step(&actions_env)?;
            for a in 0..n {
                if result.events[a].unassigned {
                    unassigned_steps += 1;
                }
                self.episode_deliveries += usize::from(result.events[a].delivered);
                self.episode_return += result.rewards[a].to_f64_lossy();
                out.push(RolloutStep {
                    episode: self.episode,
                    agent: a,
                    features: self.obs[a].features.clone(),
                    mask: self.obs[a].mask.clone(),
                    action: chosen[a],
                    reward: result.rewards[a],
                    done: result.done,
                    log_prob: log_probs.get(a, chosen[a]),
                    value: values[a],
                    unassigned: result.events[a].unassigned,
                    delivered: result.events[a].delivered,
                });
            }
            self.obs = result.observations;
            if result.done {
                completed.push((self.episode_deliveries, self.episode_return));
                self.episode += 1;
                self.episode_deliveries = 0;
                self.episode_return = 0.0;
                let seed = env_rng_seed(&mut self.env_rng);
                let (env, obs) = WarehouseEnv::reset(seed, &self.env_cfg)?;
                self.env = env;
                self.obs = obs;
            }
        }

        let (_, bootstrap) = policy_forward_plain(params, &self.obs, cfg)?;
        Ok(Rollout {
            steps: out,
            n_agents: n,
            bootstrap_values: bootstrap,
            env_steps: steps,
            completed_episodes: completed,
            unassigned_steps,
        })
    }
}

fn env_rng_seed(rng: &mut SeededRng) -> u64 {
    (rng.index(u32::MAX as usize) as u64) << 32 | rng.index(u32::MAX as usize) as u64
}

/// Gradient-free policy pass for a set of observations: masked action
/// log-probabilities and state values.
pub fn policy_forward_plain<S: Scalar>(
    params: &EncoderParams<S>,
    obs: &[Observation<S>],
    cfg: &PpoConfig,
) -> Result<(Tensor<S>, Vec<S>)> {
    let n = obs.len();
    let d = obs[0].features.len();
    let mut data = Vec::with_capacity(n * d);
    for o in obs {
        data.extend_from_slice(&o.features);
    }
    let features = Tensor::matrix(n, d, data)?;
    let masks: Vec<Vec<bool>> = obs.iter().map(|o| o.mask.clone()).collect();

    let tape = Tape::new();
    let vars = params.vars(&tape, |_| false);
    let o = tape.constant(features.clone());
    let (_, z) = vars.encode(&o)?;
    let tasks = tape.constant(task_features(&features, params.dims.k_candidates));
    let flat: Vec<bool> = masks.iter().flatten().copied().collect();
    let (_, context) = vars.attention(&z, &tasks, Rc::new(flat))?;
    let beta = cfg.bias_enabled.then_some(S::of(cfg.bias_beta));
    let (log_probs, value) = vars.policy(&z, &context, &tasks, &masks, beta)?;
    Ok((log_probs.value(), value.value().into_data()))
}

/// The auxiliary-term machinery carried through fine-tuning: EMA target,
/// memory queue and the SSL weights it reuses.
pub struct AuxMachinery<S> {
    pub ema: EmaTarget<S>,
    pub queue: MemoryQueue<S>,
    pub weights: SslWeights,
}

/// Per-update logged decomposition (for the exact total = ppo + lambda*aux
/// bookkeeping).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LoggedUpdate {
    pub ppo_loss: f64,
    pub aux_loss: f64,
    pub lambda: f64,
    pub total_loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
    pub logged: Vec<LoggedUpdate>,
}

/// Run the configured epochs of clipped-surrogate updates over a rollout.
///
/// `advantages` must already be normalized; `returns` are the value targets.
/// When `lambda_aux > 0` and `aux` is provided, the curriculum-weighted
/// temporal term (CPC against queue negatives plus temporal smoothness) is
/// added per minibatch.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<S: Scalar>(
    params: &mut EncoderParams<S>,
    rollout: &Rollout<S>,
    advantages: &[S],
    returns: &[S],
    cfg: &PpoConfig,
    lambda_aux: f64,
    aux: Option<&AuxMachinery<S>>,
    optimizer: &mut Optimizer<S>,
    shuffle_rng: &mut SeededRng,
) -> Result<UpdateStats> {
    cfg.validate()?;
    let m = rollout.len();
    if advantages.len() != m || returns.len() != m {
        return Err(Error::structure("advantage/return length mismatch with rollout"));
    }

    let frozen_latents = match cfg.encoder_mode {
        EncoderMode::Frozen => {
            let all: Vec<usize> = (0..m).collect();
            let obs = rollout.features_matrix(&all);
            Some(params.encode_plain(&obs).1)
        }
        EncoderMode::Finetune => None,
    };

    // Queue snapshot for CPC negatives, refreshed once per update call.
    let queue_latent: Option<Tensor<S>> = aux.and_then(|a| {
        (!a.queue.is_empty()).then(|| {
            a.queue.as_matrix().l2_normalized_rows(S::of(crate::graph::NORM_EPS)).0
        })
    });

    let mut stats = UpdateStats::default();
    let mut minibatches = 0usize;
    let mut clip_hits = 0usize;
    let mut clip_total = 0usize;

    for _epoch in 0..cfg.epochs {
        let mut perm: Vec<usize> = (0..m).collect();
        shuffle_rng.shuffle(&mut perm);
        for chunk in perm.chunks(cfg.minibatch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let step = build_update_step(
                params,
                rollout,
                advantages,
                returns,
                cfg,
                lambda_aux,
                aux,
                queue_latent.as_ref(),
                frozen_latents.as_ref(),
                chunk,
            )?;

            let grads = step.loss.backward()?;
            if !grads.all_finite() || !step.loss.scalar_value().is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite update: policy={} value={} entropy={} aux={}",
                    step.policy_loss, step.value_loss, step.entropy, step.aux_loss
                )));
            }
            let mut named: BTreeMap<String, Tensor<S>> = BTreeMap::new();
            let mut grads = grads;
            for (name, var) in step.vars.named() {
                if let Some(g) = grads.take(var) {
                    named.insert(name.to_string(), g);
                }
            }
            optimizer.step(
                params.named_mut().into_iter().map(|(n, t)| (n, t)),
                &named,
            )?;

            stats.policy_loss += step.policy_loss;
            stats.value_loss += step.value_loss;
            stats.entropy += step.entropy;
            stats.aux_loss += step.aux_loss;
            stats.total_loss += step.total_loss;
            clip_hits += step.clip_hits;
            clip_total += chunk.len();
            stats.logged.push(LoggedUpdate {
                ppo_loss: step.ppo_loss,
                aux_loss: step.aux_loss,
                lambda: lambda_aux,
                total_loss: step.total_loss,
            });
            minibatches += 1;
        }
    }

    if minibatches > 0 {
        let k = minibatches as f64;
        stats.policy_loss /= k;
        stats.value_loss /= k;
        stats.entropy /= k;
        stats.aux_loss /= k;
        stats.total_loss /= k;
    }
    stats.clip_fraction = if clip_total > 0 {
        clip_hits as f64 / clip_total as f64
    } else {
        0.0
    };
    Ok(stats)
}

struct UpdateStep<S: Scalar> {
    loss: Var<S>,
    vars: EncoderVars<S>,
    ppo_loss: f64,
    policy_loss: f64,
    value_loss: f64,
    entropy: f64,
    aux_loss: f64,
    total_loss: f64,
    clip_hits: usize,
}

#[allow(clippy::too_many_arguments)]
fn build_update_step<S: Scalar>(
    params: &EncoderParams<S>,
    rollout: &Rollout<S>,
    advantages: &[S],
    returns: &[S],
    cfg: &PpoConfig,
    lambda_aux: f64,
    aux: Option<&AuxMachinery<S>>,
    queue_latent: Option<&Tensor<S>>,
    frozen_latents: Option<&Tensor<S>>,
    chunk: &[usize],
) -> Result<UpdateStep<S>> {
    let tape = Tape::new();
    let trainable = |name: &str| match cfg.encoder_mode {
        EncoderMode::Finetune => true,
        EncoderMode::Frozen => !FROZEN_ENCODER_PARAMS.contains(&name),
    };
    let vars = params.vars(&tape, trainable);

    let obs = rollout.features_matrix(chunk);
    let masks: Vec<Vec<bool>> = chunk.iter().map(|&r| rollout.steps[r].mask.clone()).collect();
    let obs_const = tape.constant(obs.clone());
    let latent = match frozen_latents {
        Some(z_all) => tape.constant(z_all.select_rows(chunk)),
        None => vars.encode(&obs_const)?.1,
    };
    let tasks = tape.constant(task_features(&obs, params.dims.k_candidates));
    let flat_mask: Vec<bool> = masks.iter().flatten().copied().collect();
    let (_, context) = vars.attention(&latent, &tasks, Rc::new(flat_mask))?;
    let beta = cfg.bias_enabled.then_some(S::of(cfg.bias_beta));
    let (log_probs, value) = vars.policy(&latent, &context, &tasks, &masks, beta)?;

    let actions: Vec<usize> = chunk.iter().map(|&r| rollout.steps[r].action).collect();
    let logp = log_probs.gather_rows(Rc::new(actions))?;
    let old_logp = tape.constant(Tensor::vector(
        chunk.iter().map(|&r| rollout.steps[r].log_prob).collect(),
    ));
    let ratio = logp.sub(&old_logp)?.exp();

    let adv = tape.constant(Tensor::vector(chunk.iter().map(|&r| advantages[r]).collect()));
    let surr1 = ratio.mul(&adv)?;
    let clip = S::of(cfg.clip_ratio);
    let clipped = ratio.clamp(S::one() - clip, S::one() + clip);
    let surr2 = clipped.mul(&adv)?;
    let policy_loss = surr1.minimum(&surr2)?.mean().neg();

    let target = tape.constant(Tensor::vector(chunk.iter().map(|&r| returns[r]).collect()));
    let vdiff = value.sub(&target)?;
    let value_loss = vdiff.mul(&vdiff)?.mean();

    let probs = log_probs.exp();
    let entropy = probs.mul(&log_probs)?.sum_rows()?.mean().neg();

    let ppo_loss = policy_loss
        .add(&value_loss.scale(S::of(cfg.value_coef)))?
        .sub(&entropy.scale(S::of(cfg.entropy_coef)))?;

    let (loss, aux_value) = match (aux, lambda_aux > 0.0) {
        (Some(machinery), true) => {
            let aux_rows: Vec<usize> = chunk.iter().take(cfg.aux_batch).copied().collect();
            let aux_term = build_aux_term(
                &tape,
                &vars,
                &latent,
                rollout,
                chunk,
                &aux_rows,
                machinery,
                queue_latent,
            )?;
            match aux_term {
                Some(term) => {
                    let v = term.scalar_value().to_f64_lossy();
                    (ppo_loss.add(&term.scale(S::of(lambda_aux)))?, v)
                }
                None => (ppo_loss.clone(), 0.0),
            }
        }
        _ => (ppo_loss.clone(), 0.0),
    };

    let ratio_vals = ratio.value();
    let clip_hits = ratio_vals
        .data()
        .iter()
        .filter(|r| (r.to_f64_lossy() - 1.0).abs() > cfg.clip_ratio)
        .count();

    Ok(UpdateStep {
        ppo_loss: ppo_loss.scalar_value().to_f64_lossy(),
        policy_loss: policy_loss.scalar_value().to_f64_lossy(),
        value_loss: value_loss.scalar_value().to_f64_lossy(),
        entropy: entropy.scalar_value().to_f64_lossy(),
        aux_loss: aux_value,
        total_loss: loss.scalar_value().to_f64_lossy(),
        clip_hits,
        loss,
        vars,
    })
}

/// Temporal auxiliary term on a rollout minibatch: CPC toward the EMA
/// latents k steps ahead (queue negatives) plus temporal smoothness between
/// consecutive latents.
#[allow(clippy::too_many_arguments)]
fn build_aux_term<S: Scalar>(
    tape: &Tape<S>,
    vars: &EncoderVars<S>,
    latent: &Var<S>,
    rollout: &Rollout<S>,
    chunk: &[usize],
    aux_rows: &[usize],
    machinery: &AuxMachinery<S>,
    queue_latent: Option<&Tensor<S>>,
) -> Result<Option<Var<S>>> {
    let w = &machinery.weights;
    let tau = S::of(w.temperature);
    let horizon = w.cpc_horizon as usize;
    let mut terms: Vec<Var<S>> = Vec::new();

    // positions inside the minibatch for each aux row
    let pos_of = |row: usize| chunk.iter().position(|&r| r == row).expect("aux row in chunk");

    if let Some(queue) = queue_latent {
        let mut positions = Vec::new();
        let mut future_rows = Vec::new();
        for &row in aux_rows {
            if let Some(f) = rollout.successor(row, horizon) {
                positions.push(pos_of(row));
                future_rows.push(f);
            }
        }
        if !positions.is_empty() {
            let future_obs = rollout.features_matrix(&future_rows);
            let (_, future_z) = machinery.ema.params.encode_plain(&future_obs);
            let (future_unit, _) = future_z.l2_normalized_rows(S::of(crate::graph::NORM_EPS));
            let m_sub = vars.message(&latent.select_rows(Rc::new(positions))?)?;
            let pred = vars.predict(&m_sub)?.l2_normalize_rows_guarded();
            let cpc = loss_nce_with_negatives(&pred, &future_unit, queue, tau)?;
            terms.push(cpc.scale(S::of(w.gamma_cpc)));
        }
    }

    let mut positions = Vec::new();
    let mut neighbor_rows = Vec::new();
    for &row in aux_rows {
        if let Some(nb) = rollout.successor(row, 1) {
            positions.push(pos_of(row));
            neighbor_rows.push(nb);
        }
    }
    if !positions.is_empty() {
        let n_obs = tape.constant(rollout.features_matrix(&neighbor_rows));
        let (_, n_latent) = vars.encode(&n_obs)?;
        let anchor = latent.select_rows(Rc::new(positions))?;
        let ts = loss_cosine_gap(&anchor, &n_latent)?;
        terms.push(ts.scale(S::of(w.lambda_ts)));
    }

    match terms.len() {
        0 => Ok(None),
        1 => Ok(Some(terms.pop().unwrap())),
        _ => {
            let mut acc = terms[0].clone();
            for t in &terms[1..] {
                acc = acc.add(t)?;
            }
            Ok(Some(acc))
        }
    }
}

/// Refresh the auxiliary machinery after an iteration: move the EMA target
/// toward the online params and enqueue EMA latents of an evenly spaced
/// rollout subsample.
pub fn refresh_aux<S: Scalar>(
    aux: &mut AuxMachinery<S>,
    params: &EncoderParams<S>,
    rollout: &Rollout<S>,
    max_rows: usize,
) {
    aux.ema.update(params);
    if rollout.is_empty() || max_rows == 0 {
        return;
    }
    let stride = (rollout.len() / max_rows.min(rollout.len())).max(1);
    let rows: Vec<usize> = (0..rollout.len()).step_by(stride).take(max_rows).collect();
    let obs = rollout.features_matrix(&rows);
    let (_, z) = aux.ema.params.encode_plain(&obs);
    aux.queue.push(&z);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderDims;
    use crate::rng::{SeededRng, Stream};
    use crate::trainer::gae::{gae_advantages, normalize_advantages};

    fn tiny_env() -> EnvConfig {
        EnvConfig {
            width: 6,
            height: 6,
            n_agents: 2,
            k_candidates: 2,
            episode_len: 12,
            task_pool: 4,
            ..EnvConfig::default()
        }
    }

    fn tiny_cfg() -> PpoConfig {
        PpoConfig {
            epochs: 1,
            steps_per_iteration: 24,
            minibatch_size: 16,
            aux_batch: 8,
            ..PpoConfig::default()
        }
    }

    fn tiny_params(env: &EnvConfig, seed: u64) -> EncoderParams<f64> {
        let mut dims = EncoderDims::new(env.obs_dim(), env.k_candidates);
        dims.d_hidden = 16;
        dims.d_latent = 8;
        dims.d_message = 6;
        dims.d_attn = 4;
        let mut rng = SeededRng::stream(seed, Stream::ParamInit);
        EncoderParams::init(dims, &mut rng)
    }

    fn collect_rollout(
        seed: u64,
        env: &EnvConfig,
        params: &EncoderParams<f64>,
        cfg: &PpoConfig,
        steps: usize,
    ) -> Rollout<f64> {
        let mut collector = RolloutCollector::new(
            env,
            SeededRng::stream(seed, Stream::PpoEnv),
            SeededRng::stream(seed, Stream::PpoSample),
        )
        .unwrap();
        collector.collect(params, cfg, steps).unwrap()
    }

    fn advantages_for(rollout: &Rollout<f64>, cfg: &PpoConfig) -> (Vec<f64>, Vec<f64>) {
        let m = rollout.len();
        let n = rollout.n_agents;
        let mut adv = vec![0.0; m];
        let mut ret = vec![0.0; m];
        for a in 0..n {
            let rows: Vec<usize> = (a..m).step_by(n).collect();
            let rewards: Vec<f64> = rows.iter().map(|&r| rollout.steps[r].reward).collect();
            let values: Vec<f64> = rows.iter().map(|&r| rollout.steps[r].value).collect();
            let dones: Vec<bool> = rows.iter().map(|&r| rollout.steps[r].done).collect();
            let (a_vec, r_vec) = gae_advantages(
                &rewards,
                &values,
                &dones,
                rollout.bootstrap_values[a],
                cfg.gamma_discount,
                cfg.lambda_gae,
            )
            .unwrap();
            for (i, &row) in rows.iter().enumerate() {
                adv[row] = a_vec[i];
                ret[row] = r_vec[i];
            }
        }
        normalize_advantages(&mut adv);
        (adv, ret)
    }

    #[test]
    fn rollout_is_deterministic_and_time_major() {
        let env = tiny_env();
        let cfg = tiny_cfg();
        let params = tiny_params(&env, 3);
        let a = collect_rollout(5, &env, &params, &cfg, 30);
        let b = collect_rollout(5, &env, &params, &cfg, 30);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!(x.action, y.action);
            assert_eq!(x.reward.to_bits(), y.reward.to_bits());
        }
        for (i, s) in a.steps.iter().enumerate() {
            assert_eq!(s.agent, i % env.n_agents);
        }
    }

    #[test]
    fn masked_actions_never_sampled() {
        let env = tiny_env();
        let cfg = tiny_cfg();
        let params = tiny_params(&env, 7);
        let rollout = collect_rollout(9, &env, &params, &cfg, 60);
        for s in &rollout.steps {
            if s.action < env.k_candidates {
                assert!(s.mask[s.action], "sampled a masked candidate");
            }
        }
    }

    #[test]
    fn zero_advantages_leave_policy_gradient_to_value_entropy() {
        let env = tiny_env();
        let cfg = tiny_cfg();
        let mut params = tiny_params(&env, 11);
        let rollout = collect_rollout(13, &env, &params, &cfg, 24);
        let zeros = vec![0.0; rollout.len()];
        let (_, returns) = advantages_for(&rollout, &cfg);

        let before = params.clone();
        let mut opt = Optimizer::adam(1e-3);
        let stats = ppo_update(
            &mut params,
            &rollout,
            &zeros,
            &returns,
            &cfg,
            0.0,
            None,
            &mut opt,
            &mut SeededRng::stream(1, Stream::PpoShuffle),
        )
        .unwrap();
        // surrogate is exactly zero; params still move through value/entropy
        assert_eq!(stats.policy_loss, 0.0);
        assert!(params
            .named()
            .iter()
            .zip(before.named())
            .any(|((_, a), (_, b))| a.data() != b.data()));
    }

    #[test]
    fn clip_fraction_in_unit_range_and_decomposition_exact() {
        let env = tiny_env();
        let cfg = tiny_cfg();
        let mut params = tiny_params(&env, 17);
        let rollout = collect_rollout(19, &env, &params, &cfg, 32);
        let (adv, ret) = advantages_for(&rollout, &cfg);
        let mut opt = Optimizer::adam(3e-4);
        let stats = ppo_update(
            &mut params,
            &rollout,
            &adv,
            &ret,
            &cfg,
            0.0,
            None,
            &mut opt,
            &mut SeededRng::stream(2, Stream::PpoShuffle),
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&stats.clip_fraction));
        for log in &stats.logged {
            let expect = log.ppo_loss + log.lambda * log.aux_loss;
            assert_eq!(log.total_loss, expect, "total must decompose exactly");
        }
    }

    #[test]
    fn unclipped_single_epoch_matches_vanilla_policy_gradient() {
        // With an infinite clip range and ratio == 1 (first pass), the
        // surrogate gradient equals the vanilla policy gradient
        // -mean(A * d log pi).
        let env = tiny_env();
        let mut cfg = tiny_cfg();
        cfg.clip_ratio = f64::INFINITY;
        cfg.epochs = 1;
        cfg.minibatch_size = usize::MAX;
        cfg.entropy_coef = 0.0;
        cfg.value_coef = 0.0;
        cfg.encoder_mode = EncoderMode::Finetune;
        let params = tiny_params(&env, 23);
        let rollout = collect_rollout(29, &env, &params, &cfg, 16);
        let (adv, ret) = advantages_for(&rollout, &cfg);

        // gradient through the clipped path
        let chunk: Vec<usize> = (0..rollout.len()).collect();
        let step = build_update_step(
            &params, &rollout, &adv, &ret, &cfg, 0.0, None, None, None, &chunk,
        )
        .unwrap();
        let grads = step.loss.backward().unwrap();
        let clipped_grad = grads.get(&step.vars.w_pi).unwrap().clone();

        // oracle: -mean(adv * log pi) on a fresh tape (ratio identically 1
        // means d ratio = ratio * d log pi = d log pi)
        let tape = Tape::new();
        let vars = params.vars(&tape, |_| true);
        let obs = rollout.features_matrix(&chunk);
        let obs_c = tape.constant(obs.clone());
        let (_, z) = vars.encode(&obs_c).unwrap();
        let tasks = tape.constant(task_features(&obs, params.dims.k_candidates));
        let masks: Vec<Vec<bool>> =
            chunk.iter().map(|&r| rollout.steps[r].mask.clone()).collect();
        let flat: Vec<bool> = masks.iter().flatten().copied().collect();
        let (_, ctx) = vars.attention(&z, &tasks, Rc::new(flat)).unwrap();
        let beta = cfg.bias_enabled.then_some(cfg.bias_beta);
        let (lp, _) = vars.policy(&z, &ctx, &tasks, &masks, beta).unwrap();
        let actions: Vec<usize> = chunk.iter().map(|&r| rollout.steps[r].action).collect();
        let logp = lp.gather_rows(Rc::new(actions)).unwrap();
        let advv = tape.constant(Tensor::vector(adv.clone()));
        let pg_loss = logp.mul(&advv).unwrap().mean().neg();
        let pg_grads = pg_loss.backward().unwrap();
        let oracle_grad = pg_grads.get(&vars.w_pi).unwrap();

        for (a, b) in clipped_grad.data().iter().zip(oracle_grad.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn frozen_mode_keeps_encoder_bits() {
        let env = tiny_env();
        let mut cfg = tiny_cfg();
        cfg.encoder_mode = EncoderMode::Frozen;
        let mut params = tiny_params(&env, 31);
        let rollout = collect_rollout(37, &env, &params, &cfg, 24);
        let (adv, ret) = advantages_for(&rollout, &cfg);
        let w1_before = params.w1.clone();
        let wm_before = params.w_m.clone();
        let mut opt = Optimizer::adam(1e-2);
        ppo_update(
            &mut params,
            &rollout,
            &adv,
            &ret,
            &cfg,
            0.0,
            None,
            &mut opt,
            &mut SeededRng::stream(3, Stream::PpoShuffle),
        )
        .unwrap();
        assert_eq!(params.w1, w1_before);
        assert_eq!(params.w_m, wm_before);
        assert_ne!(
            params.w_pi.data(),
            tiny_params(&env, 31).w_pi.data(),
            "policy head must have moved"
        );
    }
}

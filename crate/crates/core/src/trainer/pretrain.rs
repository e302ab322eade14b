//! Phase I: self-supervised pretraining over a heuristic-policy replay
//! buffer. Per minibatch: encode online and EMA views, move the EMA target,
//! assemble the weighted objective, take an optimizer step, renormalize the
//! prototypes and enqueue the detached EMA embeddings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::buffer::TrajectoryBuffer;
use crate::encoder::{EmaTarget, EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::optim::Optimizer;
use crate::report::{SslEpochStats, SslReport, SslStepLoss};
use crate::rng::{SeededRng, Stream};
use crate::scalar::Scalar;
use crate::ssl::{
    augment, total_ssl_loss, AblationFlags, AugmentationConfig, LossBreakdown, MemoryQueue,
    PrototypeBank, SslBatchInputs, SslWeights,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub queue_capacity: usize,
    pub prototype_count: usize,
    pub ema_momentum: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-3,
            queue_capacity: 1024,
            prototype_count: 16,
            ema_momentum: 0.996,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if self.prototype_count < 2 {
            return Err(Error::config("need at least 2 prototypes"));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::config("EMA momentum must be in [0, 1)"));
        }
        if self.queue_capacity == 0 {
            return Err(Error::config("queue capacity must be positive"));
        }
        Ok(())
    }
}

/// Everything Phase I produces.
#[derive(Clone, Debug)]
pub struct PretrainOutput<S> {
    pub params: EncoderParams<S>,
    pub ema: EmaTarget<S>,
    pub queue: MemoryQueue<S>,
    pub bank: PrototypeBank<S>,
    pub report: SslReport,
}

/// Initialize parameters, target, queue and bank from the seed, then run
/// pretraining.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_ssl<S: Scalar>(
    buffer: &TrajectoryBuffer<S>,
    dims: EncoderDims,
    cfg: &PretrainConfig,
    weights: &SslWeights,
    augmentation: &AugmentationConfig,
    ablations: &AblationFlags,
    seed: u64,
) -> Result<PretrainOutput<S>> {
    cfg.validate()?;
    let mut init_rng = SeededRng::stream(seed, Stream::ParamInit);
    let params = EncoderParams::init(dims, &mut init_rng);
    let ema = EmaTarget::new(&params, cfg.ema_momentum)?;
    let bank = PrototypeBank::init(cfg.prototype_count, dims.d_message, &mut init_rng);
    let queue = MemoryQueue::new(cfg.queue_capacity, dims.d_latent);
    pretrain_ssl_from(buffer, params, ema, queue, bank, cfg, weights, augmentation, ablations, seed)
}

/// Run pretraining from pre-built state (the target must start as a copy of
/// the online parameters for a fresh run).
#[allow(clippy::too_many_arguments)]
pub fn pretrain_ssl_from<S: Scalar>(
    buffer: &TrajectoryBuffer<S>,
    mut params: EncoderParams<S>,
    mut ema: EmaTarget<S>,
    mut queue: MemoryQueue<S>,
    mut bank: PrototypeBank<S>,
    cfg: &PretrainConfig,
    weights: &SslWeights,
    augmentation: &AugmentationConfig,
    ablations: &AblationFlags,
    seed: u64,
) -> Result<PretrainOutput<S>> {
    cfg.validate()?;
    weights.validate()?;
    augmentation.validate()?;
    if buffer.is_empty() {
        return Err(Error::config("cannot pretrain on an empty buffer"));
    }

    let mut shuffle_rng = SeededRng::stream(seed, Stream::SslShuffle);
    let mut aug_rng = SeededRng::stream(seed, Stream::SslAugment);
    let mut optimizer = Optimizer::adam(S::of(cfg.learning_rate));
    let mut report = SslReport::default();
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..buffer.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_sum = LossBreakdown::default();
        let mut epoch_batches = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let inputs = build_ssl_batch(
                buffer,
                chunk,
                &ema.params,
                &bank,
                &queue,
                weights,
                augmentation,
                &mut aug_rng,
            )?;
            // EMA moves after the target encodings are taken.
            ema.update(&params);

            let tape = Tape::new();
            let vars = params.vars(&tape, |_| true);
            let protos = tape.param(bank.tensor().clone());
            let (total, breakdown, skips) =
                total_ssl_loss(&tape, &vars, &protos, &inputs, weights, ablations)?;

            let mut grads = total.backward()?;
            if !grads.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite SSL gradient at step {step}"
                )));
            }
            let mut named: BTreeMap<String, Tensor<S>> = BTreeMap::new();
            for (name, var) in vars.named() {
                if let Some(g) = grads.take(var) {
                    named.insert(name.to_string(), g);
                }
            }
            if let Some(g) = grads.take(&protos) {
                named.insert("prototypes".to_string(), g);
            }
            optimizer.step(
                params
                    .named_mut()
                    .into_iter()
                    .chain(std::iter::once(("prototypes", bank.tensor_mut()))),
                &named,
            )?;
            bank.renormalize();
            queue.push(&inputs.ema_latents);

            report.skips.empty_queue += skips.empty_queue;
            report.skips.missing_temporal_pairs += skips.missing_temporal_pairs;
            report.skips.missing_peers += skips.missing_peers;
            report.norm_warnings += tape.warning_count();
            report.steps.push(SslStepLoss { step, breakdown });
            accumulate(&mut epoch_sum, &breakdown);
            epoch_batches += 1;
            step += 1;
        }

        if epoch_batches > 0 {
            scale(&mut epoch_sum, 1.0 / epoch_batches as f64);
        }
        report.epochs.push(SslEpochStats { epoch: epoch + 1, mean: epoch_sum });
    }

    Ok(PretrainOutput { params, ema, queue, bank, report })
}

/// Assemble the detached data-side inputs for one SSL step from the buffer.
#[allow(clippy::too_many_arguments)]
pub fn build_ssl_batch<S: Scalar>(
    buffer: &TrajectoryBuffer<S>,
    rows: &[usize],
    target_params: &EncoderParams<S>,
    bank: &PrototypeBank<S>,
    queue: &MemoryQueue<S>,
    weights: &SslWeights,
    augmentation: &AugmentationConfig,
    aug_rng: &mut SeededRng,
) -> Result<SslBatchInputs<S>> {
    let k = buffer.k_candidates();
    let horizon = weights.cpc_horizon;
    let anchor_raw = buffer.features_matrix(rows);

    let peer_rows: Option<Vec<usize>> =
        rows.iter().map(|&r| buffer.peer(r)).collect::<Option<Vec<usize>>>();
    let peer_raw = peer_rows.map(|pr| buffer.features_matrix(&pr));

    let mut neighbor_rows = Vec::new();
    let mut neighbor_src = Vec::new();
    let mut future_rows = Vec::new();
    let mut future_src = Vec::new();
    for (pos, &r) in rows.iter().enumerate() {
        if let Some(nb) = buffer.successor(r, 1) {
            neighbor_rows.push(pos);
            neighbor_src.push(nb);
        }
        if let Some(fu) = buffer.successor(r, horizon) {
            future_rows.push(pos);
            future_src.push(fu);
        }
    }

    // Fixed augmentation draw order: anchors, peers, neighbors (online
    // branch), then anchors and futures (weaker target branch).
    let weaker = augmentation.weaker();
    let anchor_obs = augment(&anchor_raw, k, augmentation, aug_rng);
    let peer_obs = peer_raw.map(|p| augment(&p, k, augmentation, aug_rng));
    let neighbor_obs = (!neighbor_rows.is_empty()).then(|| {
        augment(&buffer.features_matrix(&neighbor_src), k, augmentation, aug_rng)
    });
    let anchor_target_view = augment(&anchor_raw, k, &weaker, aug_rng);
    let future_latents = (!future_rows.is_empty()).then(|| {
        let view = augment(&buffer.features_matrix(&future_src), k, &weaker, aug_rng);
        let (_, z) = target_params.encode_plain(&view);
        z.l2_normalized_rows(S::of(crate::graph::NORM_EPS)).0
    });

    let (_, ema_latents) = target_params.encode_plain(&anchor_target_view);
    let ema_messages = target_params.message_plain(&ema_latents);
    let knn_positives = target_params.compare_plain(&ema_latents);
    let target_codes = bank.assign(&ema_messages, S::of(weights.temperature))?;

    let (queue_msg, queue_latent) = if queue.is_empty() {
        (None, None)
    } else {
        let snapshot = queue.as_matrix();
        let msg = target_params.compare_plain(&snapshot);
        let (latent, _) = snapshot.l2_normalized_rows(S::of(crate::graph::NORM_EPS));
        (Some(msg), Some(latent))
    };

    Ok(SslBatchInputs {
        anchor_obs,
        peer_obs,
        neighbor_rows,
        neighbor_obs,
        future_rows,
        future_latents,
        ema_latents,
        knn_positives,
        target_codes,
        queue_msg,
        queue_latent,
    })
}

fn accumulate(sum: &mut LossBreakdown, b: &LossBreakdown) {
    sum.x_contrast += b.x_contrast;
    sum.knn += b.knn;
    sum.cpc += b.cpc;
    sum.proto += b.proto;
    sum.pred += b.pred;
    sum.ts += b.ts;
    sum.hz += b.hz;
    sum.cka += b.cka;
    sum.total += b.total;
}

fn scale(sum: &mut LossBreakdown, k: f64) {
    sum.x_contrast *= k;
    sum.knn *= k;
    sum.cpc *= k;
    sum.proto *= k;
    sum.pred *= k;
    sum.ts *= k;
    sum.hz *= k;
    sum.cka *= k;
    sum.total *= k;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{collect_heuristic_dataset, EnvConfig};

    fn tiny_setup() -> (TrajectoryBuffer<f64>, EncoderDims, PretrainConfig) {
        let env = EnvConfig {
            width: 6,
            height: 6,
            n_agents: 2,
            k_candidates: 2,
            episode_len: 10,
            task_pool: 4,
            ..EnvConfig::default()
        };
        let buffer = collect_heuristic_dataset::<f64>(&env, 2, 10, 77).unwrap();
        let mut dims = EncoderDims::new(env.obs_dim(), env.k_candidates);
        dims.d_hidden = 16;
        dims.d_latent = 8;
        dims.d_message = 6;
        dims.d_attn = 4;
        let cfg = PretrainConfig {
            epochs: 2,
            batch_size: 8,
            queue_capacity: 32,
            prototype_count: 4,
            ..PretrainConfig::default()
        };
        (buffer, dims, cfg)
    }

    #[test]
    fn zero_epochs_keep_initial_params() {
        let (buffer, dims, mut cfg) = tiny_setup();
        cfg.epochs = 0;
        let out = pretrain_ssl(
            &buffer,
            dims,
            &cfg,
            &SslWeights::default(),
            &AugmentationConfig::default(),
            &AblationFlags::default(),
            5,
        )
        .unwrap();
        let mut rng = SeededRng::stream(5, Stream::ParamInit);
        let fresh = EncoderParams::<f64>::init(dims, &mut rng);
        for ((_, a), (_, b)) in out.params.named().into_iter().zip(fresh.named()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn empty_buffer_is_config_error() {
        let (_, dims, cfg) = tiny_setup();
        let empty = TrajectoryBuffer::<f64>::new(13, 2);
        let err = pretrain_ssl(
            &empty,
            dims,
            &cfg,
            &SslWeights::default(),
            &AugmentationConfig::default(),
            &AblationFlags::default(),
            5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn same_seed_bit_identical_checkpoints() {
        let (buffer, dims, cfg) = tiny_setup();
        let run = || {
            pretrain_ssl(
                &buffer,
                dims,
                &cfg,
                &SslWeights::default(),
                &AugmentationConfig::default(),
                &AblationFlags::default(),
                42,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        for ((_, x), (_, y)) in a.params.named().into_iter().zip(b.params.named()) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        assert_eq!(a.report.steps.len(), b.report.steps.len());
        for (s, t) in a.report.steps.iter().zip(&b.report.steps) {
            assert_eq!(s.breakdown.total.to_bits(), t.breakdown.total.to_bits());
        }
    }

    #[test]
    fn ablation_zeroes_proto_column_and_keeps_others() {
        let (buffer, dims, cfg) = tiny_setup();
        let flags = AblationFlags { no_proto: true, ..AblationFlags::default() };
        let out = pretrain_ssl(
            &buffer,
            dims,
            &cfg,
            &SslWeights::default(),
            &AugmentationConfig::default(),
            &flags,
            8,
        )
        .unwrap();
        for s in &out.report.steps {
            assert_eq!(s.breakdown.proto, 0.0);
            assert!(s.breakdown.pred.abs() >= 0.0);
        }
    }

    #[test]
    fn queue_fills_and_losses_are_finite() {
        let (buffer, dims, cfg) = tiny_setup();
        let out = pretrain_ssl(
            &buffer,
            dims,
            &cfg,
            &SslWeights::default(),
            &AugmentationConfig::default(),
            &AblationFlags::default(),
            21,
        )
        .unwrap();
        assert!(out.queue.len() > 0);
        assert!(out.queue.len() <= out.queue.capacity());
        for s in &out.report.steps {
            assert!(s.breakdown.total.is_finite());
        }
        // the very first step has no queue yet
        assert!(out.report.skips.empty_queue >= 1);
        assert_eq!(out.report.steps[0].breakdown.knn, 0.0);
    }
}

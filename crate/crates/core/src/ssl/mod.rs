//! Self-supervised objectives and their stabilization machinery: the FIFO
//! memory queue of past target embeddings, the learnable prototype bank,
//! asymmetric observation augmentation, and the weighted combination of all
//! loss terms.

pub mod losses;

use std::collections::VecDeque;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderVars;
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use losses::{
    loss_cka_alignment, loss_cosine_gap, loss_nce_with_negatives, loss_pred_alignment,
    loss_proto, loss_x_contrast,
};

/// Bounded FIFO of detached target-encoder embeddings used as negatives.
#[derive(Clone, Debug)]
pub struct MemoryQueue<S> {
    capacity: usize,
    dim: usize,
    entries: VecDeque<Vec<S>>,
}

impl<S: Scalar> MemoryQueue<S> {
    pub fn new(capacity: usize, dim: usize) -> Self {
        MemoryQueue { capacity, dim, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append each row of `batch` in order, evicting the oldest entries once
    /// past capacity. The input is a plain tensor, so it cannot carry
    /// gradient by construction.
    pub fn push(&mut self, batch: &Tensor<S>) {
        debug_assert_eq!(batch.cols(), self.dim);
        for r in 0..batch.rows() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(batch.row(r).to_vec());
        }
    }

    /// Guarded push for graph values: refuses gradient-carrying nodes.
    pub fn push_from_var(&mut self, var: &crate::graph::Var<S>) -> Result<()> {
        if var.requires_grad() {
            return Err(Error::structure(
                "queue entries must be detached; got a gradient-carrying node",
            ));
        }
        let value = var.value();
        self.push(&value);
        Ok(())
    }

    /// Snapshot of the contents, oldest first.
    pub fn as_matrix(&self) -> Tensor<S> {
        let mut data = Vec::with_capacity(self.entries.len() * self.dim);
        for row in &self.entries {
            data.extend_from_slice(row);
        }
        Tensor::matrix(self.entries.len(), self.dim, data).expect("queue row width")
    }
}

/// Learnable unit-norm centroids defining the discrete token space.
#[derive(Clone, Debug)]
pub struct PrototypeBank<S> {
    prototypes: Tensor<S>,
}

impl<S: Scalar> PrototypeBank<S> {
    pub fn init(count: usize, dim: usize, rng: &mut SeededRng) -> Self {
        let mut t = Tensor::zeros(&[count, dim]);
        for v in t.data_mut() {
            *v = S::of(rng.normal(0.0, 1.0));
        }
        let (unit, _) = t.l2_normalized_rows(S::of(crate::graph::NORM_EPS));
        PrototypeBank { prototypes: unit }
    }

    pub fn from_tensor(prototypes: Tensor<S>) -> Self {
        PrototypeBank { prototypes }
    }

    pub fn count(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.prototypes
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<S> {
        &mut self.prototypes
    }

    /// Project every prototype back onto the unit sphere (run after each
    /// optimizer step).
    pub fn renormalize(&mut self) {
        let (unit, _) = self.prototypes.l2_normalized_rows(S::of(crate::graph::NORM_EPS));
        self.prototypes = unit;
    }

    /// Soft assignment of messages to prototypes: softmax over cosine
    /// similarities at the given temperature. Computed on plain tensors
    /// (the target-code path is gradient-free).
    pub fn assign(&self, messages: &Tensor<S>, temperature: S) -> Result<Tensor<S>> {
        if self.count() < 2 {
            return Err(Error::domain("prototype assignment needs at least 2 prototypes"));
        }
        let eps = S::of(crate::graph::NORM_EPS);
        let (m_unit, _) = messages.l2_normalized_rows(eps);
        let (p_unit, _) = self.prototypes.l2_normalized_rows(eps);
        let mut sims = m_unit.matmul(&p_unit.transpose())?;
        let cols = sims.cols();
        for r in 0..sims.rows() {
            crate::graph::softmax_slice(&mut sims.data_mut()[r * cols..(r + 1) * cols], temperature);
        }
        Ok(sims)
    }

    /// Hard assignment: index of the nearest prototype per message, ties to
    /// the lowest index.
    pub fn assign_hard(&self, messages: &Tensor<S>) -> Vec<usize> {
        let eps = S::of(crate::graph::NORM_EPS);
        let (m_unit, _) = messages.l2_normalized_rows(eps);
        let (p_unit, _) = self.prototypes.l2_normalized_rows(eps);
        let sims = m_unit.matmul(&p_unit.transpose()).expect("dims agree");
        (0..sims.rows())
            .map(|r| {
                let row = sims.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

/// Loss term weights and the shared contrastive temperature.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma_cpc: f64,
    pub delta: f64,
    pub eta: f64,
    pub lambda_pred: f64,
    pub lambda_ts: f64,
    pub lambda_hz: f64,
    pub lambda_cka: f64,
    pub temperature: f64,
    /// CPC prediction horizon in steps.
    pub cpc_horizon: u32,
}

impl Default for SslWeights {
    fn default() -> Self {
        SslWeights {
            alpha: 1.0,
            beta: 0.5,
            gamma_cpc: 0.8,
            delta: 0.3,
            eta: 0.2,
            lambda_pred: 1.0,
            lambda_ts: 0.5,
            lambda_hz: 0.5,
            lambda_cka: 0.25,
            temperature: 0.1,
            cpc_horizon: 3,
        }
    }
}

impl SslWeights {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.alpha, self.beta, self.gamma_cpc, self.delta, self.eta,
            self.lambda_pred, self.lambda_ts, self.lambda_hz, self.lambda_cka,
        ];
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if self.cpc_horizon == 0 {
            return Err(Error::config("CPC horizon must be positive"));
        }
        Ok(())
    }
}

/// Which objective components are disabled for an ablation run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub no_contrast: bool,
    pub no_proto: bool,
    pub no_curriculum: bool,
}

/// Observation augmentation strengths.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Probability of zeroing each candidate row.
    pub mask_prob: f64,
    /// Std of Gaussian noise added to unmasked candidate features.
    pub jitter_std: f64,
    /// Probability of zeroing each self feature.
    pub dropout: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig { mask_prob: 0.15, jitter_std: 0.02, dropout: 0.1 }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_prob) || !(0.0..=1.0).contains(&self.dropout) {
            return Err(Error::config("augmentation probabilities must be in [0, 1]"));
        }
        if self.jitter_std < 0.0 {
            return Err(Error::config("jitter std must be non-negative"));
        }
        Ok(())
    }

    /// The target-branch variant: half the masking, no dropout.
    pub fn weaker(&self) -> Self {
        AugmentationConfig {
            mask_prob: self.mask_prob / 2.0,
            jitter_std: self.jitter_std,
            dropout: 0.0,
        }
    }
}

/// Apply masking/jitter/dropout to an observation batch. Each row is
/// augmented independently; draws come from `rng` in a fixed order.
pub fn augment<S: Scalar>(
    obs: &Tensor<S>,
    k_candidates: usize,
    config: &AugmentationConfig,
    rng: &mut SeededRng,
) -> Tensor<S> {
    let mut out = obs.clone();
    let d_task = (obs.cols() - crate::env::SELF_FEATURES) / k_candidates;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        for f in row.iter_mut().take(crate::env::SELF_FEATURES) {
            if config.dropout > 0.0 && rng.chance(config.dropout) {
                *f = S::zero();
            }
        }
        for k in 0..k_candidates {
            let start = crate::env::SELF_FEATURES + k * d_task;
            if config.mask_prob > 0.0 && rng.chance(config.mask_prob) {
                for f in &mut row[start..start + d_task] {
                    *f = S::zero();
                }
            } else if config.jitter_std > 0.0 {
                for f in &mut row[start..start + d_task] {
                    *f = *f + S::of(rng.normal(0.0, config.jitter_std));
                }
            }
        }
    }
    out
}

/// Data-side inputs for one SSL step, fully prepared by the trainer: every
/// target quantity (EMA encodings, future latents, queue snapshots, target
/// codes) is a plain tensor and therefore detached.
#[derive(Clone, Debug)]
pub struct SslBatchInputs<S> {
    /// Online view of the anchor observations (augmented).
    pub anchor_obs: Tensor<S>,
    /// Online view of the co-observing peer observations, row-aligned with
    /// the anchors. Absent when the run has a single agent.
    pub peer_obs: Option<Tensor<S>>,
    /// Anchor rows that have a `t+1` successor, and the successor
    /// observations (online view).
    pub neighbor_rows: Vec<usize>,
    pub neighbor_obs: Option<Tensor<S>>,
    /// Anchor rows that have a `t+k` successor, and the unit-normalized EMA
    /// latents of those successors.
    pub future_rows: Vec<usize>,
    pub future_latents: Option<Tensor<S>>,
    /// EMA latents of the anchors (weaker augmented view).
    pub ema_latents: Tensor<S>,
    /// EMA latents of the anchors projected to message space and normalized
    /// (the neighbor-contrast positives), `[B, d_m]`.
    pub knn_positives: Tensor<S>,
    /// Prototype target codes of the EMA messages, `[B, P]`.
    pub target_codes: Tensor<S>,
    /// Queue snapshot projected to message space and normalized, `[Q, d_m]`.
    pub queue_msg: Option<Tensor<S>>,
    /// Queue snapshot normalized in latent space, `[Q, d_latent]`.
    pub queue_latent: Option<Tensor<S>>,
}

/// Raw per-term values (unweighted) and the weighted total for one step.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub x_contrast: f64,
    pub knn: f64,
    pub cpc: f64,
    pub proto: f64,
    pub pred: f64,
    pub ts: f64,
    pub hz: f64,
    pub cka: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Column header matching [`LossBreakdown::csv_row`].
    pub const CSV_HEADER: &'static str = "step,L_X,L_KNN,L_CPC,L_Proto,L_pred,L_ts,L_hz,L_CKA,total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{},{}",
            self.x_contrast, self.knn, self.cpc, self.proto,
            self.pred, self.ts, self.hz, self.cka, self.total
        )
    }
}

/// Counters for the legitimate skip cases in early training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounters {
    pub empty_queue: u64,
    pub missing_temporal_pairs: u64,
    pub missing_peers: u64,
}

/// Assemble the weighted self-supervised objective on `tape`.
///
/// Returns the scalar loss node, the per-term breakdown, and the skip
/// counters for this step. Ablation flags zero the corresponding weight;
/// terms whose inputs are absent (empty queue, no temporal pairs) contribute
/// zero and bump a counter.
#[allow(clippy::too_many_arguments)]
pub fn total_ssl_loss<S: Scalar>(
    tape: &Tape<S>,
    enc: &EncoderVars<S>,
    prototypes: &Var<S>,
    inputs: &SslBatchInputs<S>,
    weights: &SslWeights,
    ablations: &AblationFlags,
) -> Result<(Var<S>, LossBreakdown, SkipCounters)> {
    weights.validate()?;
    let tau = S::of(weights.temperature);
    let mut skips = SkipCounters::default();

    let obs = tape.constant(inputs.anchor_obs.clone());
    let (hidden, latent) = enc.encode(&obs)?;
    let messages = enc.message(&latent)?;

    let alpha = if ablations.no_contrast { 0.0 } else { weights.alpha };
    let delta = if ablations.no_proto { 0.0 } else { weights.delta };

    // Cross-agent contrast: anchors vs projected peer latents.
    let x_term = match (&inputs.peer_obs, alpha > 0.0) {
        (Some(peers), _) => {
            let p_obs = tape.constant(peers.clone());
            let (_, peer_latent) = enc.encode(&p_obs)?;
            let peer_proj = enc.compare_project(&peer_latent)?;
            Some(loss_x_contrast(&messages, &peer_proj, tau)?)
        }
        (None, true) => {
            skips.missing_peers += 1;
            None
        }
        (None, false) => None,
    };

    // Neighbor contrast against the queue: positive is the EMA view of the
    // same sample, projected into message space.
    let knn_term = match &inputs.queue_msg {
        Some(queue) if queue.rows() > 0 => {
            Some(loss_nce_with_negatives(&messages, &inputs.knn_positives, queue, tau)?)
        }
        _ => {
            skips.empty_queue += 1;
            None
        }
    };

    // Temporal CPC: predictor output vs future EMA latents, queue negatives
    // in latent space.
    let cpc_term = match (&inputs.future_latents, &inputs.queue_latent) {
        (Some(futures), Some(queue)) if !inputs.future_rows.is_empty() && queue.rows() > 0 => {
            let rows = Rc::new(inputs.future_rows.clone());
            let m_sub = messages.select_rows(rows)?;
            let pred = enc.predict(&m_sub)?.l2_normalize_rows_guarded();
            Some(loss_nce_with_negatives(&pred, futures, queue, tau)?)
        }
        (Some(_), Some(queue)) if queue.rows() == 0 => {
            skips.empty_queue += 1;
            None
        }
        _ => {
            skips.missing_temporal_pairs += 1;
            None
        }
    };

    let proto_term = loss_proto(&messages, prototypes, &inputs.target_codes, tau)?;

    // Invariance sub-terms.
    let pred_term = loss_pred_alignment(&latent, &inputs.ema_latents)?;
    let ts_term = match &inputs.neighbor_obs {
        Some(neighbors) if !inputs.neighbor_rows.is_empty() => {
            let n_obs = tape.constant(neighbors.clone());
            let (_, neighbor_latent) = enc.encode(&n_obs)?;
            let rows = Rc::new(inputs.neighbor_rows.clone());
            let anchor_sub = latent.select_rows(rows)?;
            Some(loss_cosine_gap(&anchor_sub, &neighbor_latent)?)
        }
        _ => {
            skips.missing_temporal_pairs += 1;
            None
        }
    };
    let hz_term = loss_cosine_gap(&enc.project_hidden(&hidden)?, &latent)?;
    let cka_term = loss_cka_alignment(&latent, &inputs.ema_latents)?;

    let mut breakdown = LossBreakdown {
        x_contrast: x_term.as_ref().map_or(0.0, |v| v.scalar_value().to_f64_lossy()),
        knn: knn_term.as_ref().map_or(0.0, |v| v.scalar_value().to_f64_lossy()),
        cpc: cpc_term.as_ref().map_or(0.0, |v| v.scalar_value().to_f64_lossy()),
        proto: proto_term.scalar_value().to_f64_lossy(),
        pred: pred_term.scalar_value().to_f64_lossy(),
        ts: ts_term.as_ref().map_or(0.0, |v| v.scalar_value().to_f64_lossy()),
        hz: hz_term.scalar_value().to_f64_lossy(),
        cka: cka_term.scalar_value().to_f64_lossy(),
        ..LossBreakdown::default()
    };

    let mut total = tape.scalar_const(S::zero());
    let mut add_weighted = |acc: &Var<S>, term: Option<&Var<S>>, w: f64| -> Result<Var<S>> {
        match term {
            Some(t) if w > 0.0 => acc.add(&t.scale(S::of(w))),
            _ => Ok(acc.clone()),
        }
    };
    total = add_weighted(&total, x_term.as_ref(), alpha)?;
    total = add_weighted(&total, knn_term.as_ref(), weights.beta)?;
    total = add_weighted(&total, cpc_term.as_ref(), weights.gamma_cpc)?;
    total = add_weighted(&total, Some(&proto_term), delta)?;

    let eta = weights.eta;
    total = add_weighted(&total, Some(&pred_term), eta * weights.lambda_pred)?;
    total = add_weighted(&total, ts_term.as_ref(), eta * weights.lambda_ts)?;
    total = add_weighted(&total, Some(&hz_term), eta * weights.lambda_hz)?;
    total = add_weighted(&total, Some(&cka_term), eta * weights.lambda_cka)?;

    breakdown.total = total.scalar_value().to_f64_lossy();
    if ablations.no_contrast {
        breakdown.x_contrast = 0.0;
    }
    if ablations.no_proto {
        breakdown.proto = 0.0;
    }
    Ok((total, breakdown, skips))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queue_fifo_semantics() {
        let mut q = MemoryQueue::<f64>::new(3, 2);
        let batch =
            Tensor::matrix(4, 2, vec![1., 1., 2., 2., 3., 3., 4., 4.]).unwrap();
        q.push(&batch);
        assert_eq!(q.len(), 3);
        let m = q.as_matrix();
        assert_eq!(m.row(0), &[2., 2.]);
        assert_eq!(m.row(2), &[4., 4.]);
    }

    #[test]
    fn queue_push_into_empty_and_order() {
        let mut q = MemoryQueue::<f64>::new(10, 1);
        q.push(&Tensor::matrix(2, 1, vec![1., 2.]).unwrap());
        assert_eq!(q.len(), 2);
        q.push(&Tensor::matrix(2, 1, vec![3., 4.]).unwrap());
        q.push(&Tensor::matrix(1, 1, vec![5.]).unwrap());
        let m = q.as_matrix();
        assert_eq!(m.data(), &[1., 2., 3., 4., 5.]);
    }

    #[test]
    fn queue_rejects_gradient_carrying_vars() {
        let tape = crate::graph::Tape::<f64>::new();
        let mut q = MemoryQueue::<f64>::new(4, 2);
        let trainable = tape.param(Tensor::matrix(1, 2, vec![1., 2.]).unwrap());
        assert!(q.push_from_var(&trainable).is_err());
        let constant = tape.constant(Tensor::matrix(1, 2, vec![1., 2.]).unwrap());
        assert!(q.push_from_var(&constant).is_ok());
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn prototype_norms_and_renormalize() {
        let mut rng = SeededRng::new(3);
        let mut bank = PrototypeBank::<f64>::init(8, 4, &mut rng);
        for r in 0..8 {
            let n: f64 = bank.tensor().row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        for v in bank.tensor_mut().data_mut() {
            *v *= 3.0;
        }
        bank.renormalize();
        for r in 0..8 {
            let n: f64 = bank.tensor().row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn proto_assign_examples() {
        // message equals prototype 0, others orthogonal -> near one-hot
        let protos = Tensor::<f64>::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let bank = PrototypeBank::from_tensor(protos);
        let m = Tensor::matrix(1, 3, vec![1., 0., 0.]).unwrap();
        let q = bank.assign(&m, 0.01).unwrap();
        assert!((q.get(0, 0) - 1.0).abs() < 1e-8);

        // identical prototypes -> uniform assignment
        let same = Tensor::<f64>::matrix(4, 2, vec![1., 0., 1., 0., 1., 0., 1., 0.]).unwrap();
        let bank2 = PrototypeBank::from_tensor(same);
        let m2 = Tensor::matrix(1, 2, vec![0.3, 0.7]).unwrap();
        let q2 = bank2.assign(&m2, 0.1).unwrap();
        for p in 0..4 {
            assert!((q2.get(0, p) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn augment_identity_and_extremes() {
        let mut rng = SeededRng::new(5);
        let obs = Tensor::matrix(2, 13, (0..26).map(|i| 0.1 + i as f64 * 0.01).collect()).unwrap();
        let id_cfg = AugmentationConfig { mask_prob: 0.0, jitter_std: 0.0, dropout: 0.0 };
        let same = augment(&obs, 2, &id_cfg, &mut rng);
        assert_eq!(same.data(), obs.data());

        let all_mask = AugmentationConfig { mask_prob: 1.0, jitter_std: 0.5, dropout: 0.0 };
        let masked = augment(&obs, 2, &all_mask, &mut rng);
        for r in 0..2 {
            assert!(masked.row(r)[3..].iter().all(|v| *v == 0.0));
            assert_eq!(&masked.row(r)[..3], &obs.row(r)[..3]);
        }
    }

    #[test]
    fn augment_seeded_reproducibility() {
        let obs = Tensor::matrix(3, 13, (0..39).map(|i| (i as f64).sin()).collect()).unwrap();
        let cfg = AugmentationConfig::default();
        let a = augment(&obs, 2, &cfg, &mut SeededRng::new(11));
        let b = augment(&obs, 2, &cfg, &mut SeededRng::new(11));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn weaker_branch_halves_masking_and_drops_dropout() {
        let cfg = AugmentationConfig { mask_prob: 0.4, jitter_std: 0.03, dropout: 0.2 };
        let weak = cfg.weaker();
        assert_eq!(weak.mask_prob, 0.2);
        assert_eq!(weak.jitter_std, 0.03);
        assert_eq!(weak.dropout, 0.0);
    }

    #[test]
    fn default_weights_match_contract() {
        let w = SslWeights::default();
        assert_eq!(
            (w.alpha, w.beta, w.gamma_cpc, w.delta, w.eta),
            (1.0, 0.5, 0.8, 0.3, 0.2)
        );
    }
}

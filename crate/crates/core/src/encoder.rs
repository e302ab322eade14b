//! Representation stack: shared observation encoder, message head,
//! comparison projection, query-conditioned task attention, policy/value
//! heads, the CPC predictor and the momentum (EMA) target copy.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture sizes. Only `d_obs` and `k_candidates` depend on the
/// environment config; the rest are the representation hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderDims {
    pub d_obs: usize,
    pub d_hidden: usize,
    pub d_latent: usize,
    pub d_message: usize,
    pub d_attn: usize,
    pub d_task: usize,
    pub k_candidates: usize,
}

impl EncoderDims {
    pub fn new(d_obs: usize, k_candidates: usize) -> Self {
        EncoderDims {
            d_obs,
            d_hidden: 256,
            d_latent: 192,
            d_message: 64,
            d_attn: 32,
            d_task: 5,
            k_candidates,
        }
    }

    /// Policy input width: latent and attention context concatenated.
    pub fn d_policy(&self) -> usize {
        2 * self.d_latent
    }

    pub fn n_actions(&self) -> usize {
        self.k_candidates + 1
    }
}

/// All trainable tensors. Weights are stored `[in, out]` so forward passes
/// are plain `x · W` products.
#[derive(Clone, Debug)]
pub struct EncoderParams<S> {
    pub dims: EncoderDims,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    /// Message projection (latent -> message space).
    pub w_m: Tensor<S>,
    /// Comparison projection (latent -> message space) shared by the
    /// message-vs-latent similarities.
    pub w_c: Tensor<S>,
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    /// Bilinear task-bias scorer.
    pub w_b: Tensor<S>,
    /// CPC predictor (message -> latent space).
    pub w_g: Tensor<S>,
    pub b_g: Tensor<S>,
    /// Hidden-to-latent projection for the hidden/latent consistency term.
    pub w_hz: Tensor<S>,
    pub w_pi: Tensor<S>,
    pub b_pi: Tensor<S>,
    pub w_val: Tensor<S>,
    pub b_val: Tensor<S>,
}

/// Parameter names of the observation encoder and message projection; these
/// stay fixed in frozen-encoder fine-tuning.
pub const FROZEN_ENCODER_PARAMS: [&str; 5] = ["w1", "b1", "w2", "b2", "w_m"];

impl<S: Scalar> EncoderParams<S> {
    /// Fan-in scaled uniform init for weights, zeros for biases.
    pub fn init(dims: EncoderDims, rng: &mut SeededRng) -> Self {
        let mut weight = |rows: usize, cols: usize, fan_in: usize| {
            let mut t = Tensor::zeros(&[rows, cols]);
            rng.fill_fan_in(t.data_mut(), fan_in);
            t
        };
        EncoderParams {
            dims,
            w1: weight(dims.d_obs, dims.d_hidden, dims.d_obs),
            b1: Tensor::zeros(&[dims.d_hidden]),
            w2: weight(dims.d_hidden, dims.d_latent, dims.d_hidden),
            b2: Tensor::zeros(&[dims.d_latent]),
            w_m: weight(dims.d_latent, dims.d_message, dims.d_latent),
            w_c: weight(dims.d_latent, dims.d_message, dims.d_latent),
            w_q: weight(dims.d_latent, dims.d_attn, dims.d_latent),
            w_k: weight(dims.d_task, dims.d_attn, dims.d_task),
            w_v: weight(dims.d_task, dims.d_latent, dims.d_task),
            w_b: weight(dims.d_latent, dims.d_task, dims.d_latent),
            w_g: weight(dims.d_message, dims.d_latent, dims.d_message),
            b_g: Tensor::zeros(&[dims.d_latent]),
            w_hz: weight(dims.d_hidden, dims.d_latent, dims.d_hidden),
            w_pi: weight(2 * dims.d_latent, dims.n_actions(), 2 * dims.d_latent),
            b_pi: Tensor::zeros(&[dims.n_actions()]),
            w_val: weight(2 * dims.d_latent, 1, 2 * dims.d_latent),
            b_val: Tensor::zeros(&[1]),
        }
    }

    /// Named views over every tensor, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor<S>)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w_m", &self.w_m),
            ("w_c", &self.w_c),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_b", &self.w_b),
            ("w_g", &self.w_g),
            ("b_g", &self.b_g),
            ("w_hz", &self.w_hz),
            ("w_pi", &self.w_pi),
            ("b_pi", &self.b_pi),
            ("w_val", &self.w_val),
            ("b_val", &self.b_val),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor<S>)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("w_m", &mut self.w_m),
            ("w_c", &mut self.w_c),
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_b", &mut self.w_b),
            ("w_g", &mut self.w_g),
            ("b_g", &mut self.b_g),
            ("w_hz", &mut self.w_hz),
            ("w_pi", &mut self.w_pi),
            ("b_pi", &mut self.b_pi),
            ("w_val", &mut self.w_val),
            ("b_val", &mut self.b_val),
        ]
    }

    /// Record the parameters on a tape. `trainable` decides per name whether
    /// gradients flow; constants are structurally detached.
    pub fn vars(&self, tape: &Tape<S>, trainable: impl Fn(&str) -> bool) -> EncoderVars<S> {
        let mut make = |name: &'static str, t: &Tensor<S>| {
            if trainable(name) {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        EncoderVars {
            dims: self.dims,
            w1: make("w1", &self.w1),
            b1: make("b1", &self.b1),
            w2: make("w2", &self.w2),
            b2: make("b2", &self.b2),
            w_m: make("w_m", &self.w_m),
            w_c: make("w_c", &self.w_c),
            w_q: make("w_q", &self.w_q),
            w_k: make("w_k", &self.w_k),
            w_v: make("w_v", &self.w_v),
            w_b: make("w_b", &self.w_b),
            w_g: make("w_g", &self.w_g),
            b_g: make("b_g", &self.b_g),
            w_hz: make("w_hz", &self.w_hz),
            w_pi: make("w_pi", &self.w_pi),
            b_pi: make("b_pi", &self.b_pi),
            w_val: make("w_val", &self.w_val),
            b_val: make("b_val", &self.b_val),
        }
    }

    /// Plain (gradient-free) encoder pass: hidden activations and latents.
    pub fn encode_plain(&self, obs: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
        let tape = Tape::new();
        let vars = self.vars(&tape, |_| false);
        let o = tape.constant(obs.clone());
        let (h, z) = vars.encode(&o).expect("encoder shapes are fixed at init");
        (h.value(), z.value())
    }

    /// Plain unit-norm messages for a latent batch.
    pub fn message_plain(&self, latents: &Tensor<S>) -> Tensor<S> {
        let tape = Tape::new();
        let vars = self.vars(&tape, |_| false);
        let z = tape.constant(latents.clone());
        vars.message(&z).expect("message shapes are fixed at init").value()
    }

    /// Plain comparison-space projection of latents (unit rows).
    pub fn compare_plain(&self, latents: &Tensor<S>) -> Tensor<S> {
        let tape = Tape::new();
        let vars = self.vars(&tape, |_| false);
        let z = tape.constant(latents.clone());
        vars.compare_project(&z).expect("comparator shapes are fixed at init").value()
    }

    /// Plain CPC predictor output for a message batch.
    pub fn predict_plain(&self, messages: &Tensor<S>) -> Tensor<S> {
        let tape = Tape::new();
        let vars = self.vars(&tape, |_| false);
        let m = tape.constant(messages.clone());
        vars.predict(&m).expect("predictor shapes are fixed at init").value()
    }
}

/// Tape-resident view of the parameters plus the forward-pass builders.
pub struct EncoderVars<S: Scalar> {
    pub dims: EncoderDims,
    pub w1: Var<S>,
    pub b1: Var<S>,
    pub w2: Var<S>,
    pub b2: Var<S>,
    pub w_m: Var<S>,
    pub w_c: Var<S>,
    pub w_q: Var<S>,
    pub w_k: Var<S>,
    pub w_v: Var<S>,
    pub w_b: Var<S>,
    pub w_g: Var<S>,
    pub b_g: Var<S>,
    pub w_hz: Var<S>,
    pub w_pi: Var<S>,
    pub b_pi: Var<S>,
    pub w_val: Var<S>,
    pub b_val: Var<S>,
}

impl<S: Scalar> EncoderVars<S> {
    pub fn named(&self) -> Vec<(&'static str, &Var<S>)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w_m", &self.w_m),
            ("w_c", &self.w_c),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_b", &self.w_b),
            ("w_g", &self.w_g),
            ("b_g", &self.b_g),
            ("w_hz", &self.w_hz),
            ("w_pi", &self.w_pi),
            ("b_pi", &self.b_pi),
            ("w_val", &self.w_val),
            ("b_val", &self.b_val),
        ]
    }

    /// Two-layer encoder: rectifier hidden layer, linear latent layer.
    pub fn encode(&self, obs: &Var<S>) -> Result<(Var<S>, Var<S>)> {
        let hidden = obs.matmul(&self.w1)?.add_bias(&self.b1)?.relu();
        let latent = hidden.matmul(&self.w2)?.add_bias(&self.b2)?;
        Ok((hidden, latent))
    }

    /// Unit-norm message batch (guarded normalization: training path).
    pub fn message(&self, latent: &Var<S>) -> Result<Var<S>> {
        Ok(latent.matmul(&self.w_m)?.l2_normalize_rows_guarded())
    }

    /// Unit-norm message batch, erroring on a zero projection.
    pub fn message_strict(&self, latent: &Var<S>) -> Result<Var<S>> {
        latent.matmul(&self.w_m)?.l2_normalize_rows()
    }

    /// Project latents into the message space and normalize (for
    /// message-vs-latent similarities).
    pub fn compare_project(&self, latent: &Var<S>) -> Result<Var<S>> {
        Ok(latent.matmul(&self.w_c)?.l2_normalize_rows_guarded())
    }

    /// CPC predictor: message space -> latent space.
    pub fn predict(&self, message: &Var<S>) -> Result<Var<S>> {
        message.matmul(&self.w_g)?.add_bias(&self.b_g)
    }

    /// Hidden activations projected into latent space.
    pub fn project_hidden(&self, hidden: &Var<S>) -> Result<Var<S>> {
        hidden.matmul(&self.w_hz)
    }

    /// Query-conditioned attention over each sample's K candidate rows.
    /// `tasks` is the flattened `[B*K, d_task]` candidate block and `mask`
    /// the row-major `[B*K]` validity flags. Returns the attention weights
    /// `[B, K]` (zero on masked slots) and the context batch `[B, d_latent]`.
    pub fn attention(
        &self,
        latent: &Var<S>,
        tasks: &Var<S>,
        mask: Rc<Vec<bool>>,
    ) -> Result<(Var<S>, Var<S>)> {
        let k = self.dims.k_candidates;
        let query = latent.matmul(&self.w_q)?;
        let keys = tasks.matmul(&self.w_k)?;
        let scores = query.row_block_dot(&keys, k)?;
        let weights = scores
            .masked_log_softmax_rows(mask)
            .map_err(|e| match e {
                Error::Domain(msg) => {
                    Error::Domain(format!("attention needs an unmasked candidate: {msg}"))
                }
                other => other,
            })?
            .exp();
        let values = tasks.matmul(&self.w_v)?;
        let context = weights.row_block_mix(&values, k)?;
        Ok((weights, context))
    }

    /// Additive per-task logit bias from the bilinear scorer, scaled by
    /// `beta`; shape `[B, K]` (the skip action gets no bias).
    pub fn task_bias(&self, latent: &Var<S>, tasks: &Var<S>, beta: S) -> Result<Var<S>> {
        let proj = latent.matmul(&self.w_b)?;
        Ok(proj.row_block_dot(tasks, self.dims.k_candidates)?.scale(beta))
    }

    /// Policy head over `h = [z ; c]`: masked log-probabilities for the K+1
    /// actions and the state value.
    pub fn policy(
        &self,
        latent: &Var<S>,
        context: &Var<S>,
        tasks: &Var<S>,
        mask: &[Vec<bool>],
        bias_beta: Option<S>,
    ) -> Result<(Var<S>, Var<S>)> {
        let h = latent.concat_cols(context)?;
        let mut logits = h.matmul(&self.w_pi)?.add_bias(&self.b_pi)?;
        if let Some(beta) = bias_beta {
            let bias = self.task_bias(latent, tasks, beta)?;
            let rows = bias.shape()[0];
            let zero_col = logits.tape().constant(Tensor::zeros(&[rows, 1]));
            let padded = bias.concat_cols(&zero_col)?;
            logits = logits.add(&padded)?;
        }
        let action_mask = policy_mask(mask);
        let log_probs = logits.masked_log_softmax_rows(action_mask)?;
        let value = h.matmul(&self.w_val)?.add_bias(&self.b_val)?;
        let value = value.reshape(vec![value.shape()[0]])?;
        Ok((log_probs, value))
    }
}

/// Candidate mask extended with the always-valid skip slot, flattened
/// row-major to `[B * (K+1)]`.
pub fn policy_mask(mask: &[Vec<bool>]) -> Rc<Vec<bool>> {
    let mut out = Vec::new();
    for row in mask {
        out.extend_from_slice(row);
        out.push(true);
    }
    Rc::new(out)
}

/// Extract the flattened `[B*K, d_task]` candidate feature block from an
/// observation batch.
pub fn task_features<S: Scalar>(obs: &Tensor<S>, k: usize) -> Tensor<S> {
    let rows = obs.rows();
    let d_task = (obs.cols() - crate::env::SELF_FEATURES) / k;
    let mut data = Vec::with_capacity(rows * k * d_task);
    for r in 0..rows {
        let row = obs.row(r);
        data.extend_from_slice(&row[crate::env::SELF_FEATURES..]);
    }
    Tensor::matrix(rows * k, d_task, data).expect("candidate block shape")
}

/// Momentum copy of the encoder parameters.
#[derive(Clone, Debug)]
pub struct EmaTarget<S> {
    pub params: EncoderParams<S>,
    pub momentum: f64,
}

impl<S: Scalar> EmaTarget<S> {
    /// Exact copy of the online parameters at creation.
    pub fn new(online: &EncoderParams<S>, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config("EMA momentum must be in [0, 1)"));
        }
        Ok(EmaTarget { params: online.clone(), momentum })
    }

    /// Convex update: every weight becomes `mu * target + (1 - mu) * online`.
    pub fn update(&mut self, online: &EncoderParams<S>) {
        let mu = S::of(self.momentum);
        let one_minus = S::one() - mu;
        for ((_, shadow), (_, live)) in
            self.params.named_mut().into_iter().zip(online.named())
        {
            for (s, &o) in shadow.data_mut().iter_mut().zip(live.data()) {
                *s = mu * *s + one_minus * o;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeededRng, Stream};

    fn dims() -> EncoderDims {
        EncoderDims {
            d_obs: 13,
            d_hidden: 16,
            d_latent: 8,
            d_message: 6,
            d_attn: 4,
            d_task: 5,
            k_candidates: 2,
        }
    }

    fn randn(rng: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.normal(0.0, 1.0);
        }
        t
    }

    #[test]
    fn zero_params_encode_to_zero() {
        let mut rng = SeededRng::new(1);
        let mut params = EncoderParams::<f64>::init(dims(), &mut rng);
        for (_, t) in params.named_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let obs = randn(&mut rng, &[3, 13]);
        let (_, z) = params.encode_plain(&obs);
        assert!(z.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encode_matches_straight_line_oracle() {
        let mut rng = SeededRng::stream(42, Stream::ParamInit);
        let params = EncoderParams::<f64>::init(dims(), &mut rng);
        let obs = randn(&mut rng, &[4, 13]);
        let (_, z) = params.encode_plain(&obs);

        // independent forward pass: explicit loops
        for r in 0..4 {
            let mut hidden = vec![0.0; 16];
            for j in 0..16 {
                let mut acc = params.b1.data()[j];
                for i in 0..13 {
                    acc += obs.get(r, i) * params.w1.get(i, j);
                }
                hidden[j] = acc.max(0.0);
            }
            for j in 0..8 {
                let mut acc = params.b2.data()[j];
                for (i, h) in hidden.iter().enumerate() {
                    acc += h * params.w2.get(i, j);
                }
                assert!((z.get(r, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_observations_identical_latents() {
        let mut rng = SeededRng::new(5);
        let params = EncoderParams::<f64>::init(dims(), &mut rng);
        let row = randn(&mut rng, &[1, 13]);
        let mut two = Tensor::zeros(&[2, 13]);
        two.row_mut(0).copy_from_slice(row.row(0));
        two.row_mut(1).copy_from_slice(row.row(0));
        let (_, z) = params.encode_plain(&two);
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn message_norms_are_unit() {
        let mut rng = SeededRng::new(6);
        let params = EncoderParams::<f64>::init(dims(), &mut rng);
        let z = randn(&mut rng, &[1000, 8]);
        let m = params.message_plain(&z);
        for r in 0..m.rows() {
            let norm: f64 = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9, "row {r} norm {norm}");
        }
    }

    #[test]
    fn message_example_three_four() {
        // W_m z = [3,4] must normalize to [0.6, 0.8]
        let mut rng = SeededRng::new(7);
        let mut params = EncoderParams::<f64>::init(dims(), &mut rng);
        params.w_m = Tensor::zeros(&[8, 6]);
        params.w_m.set(0, 0, 3.0);
        params.w_m.set(0, 1, 4.0);
        let mut z = Tensor::zeros(&[1, 8]);
        z.set(0, 0, 1.0);
        let m = params.message_plain(&z);
        assert!((m.get(0, 0) - 0.6).abs() < 1e-12);
        assert!((m.get(0, 1) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_explicit_oracle() {
        let mut rng = SeededRng::new(8);
        let params = EncoderParams::<f64>::init(dims(), &mut rng);
        let z = randn(&mut rng, &[3, 8]);
        let tasks = randn(&mut rng, &[6, 5]);
        let mask = vec![vec![true, true], vec![true, false], vec![true, true]];

        let tape = Tape::new();
        let vars = params.vars(&tape, |_| false);
        let zv = tape.constant(z.clone());
        let tv = tape.constant(tasks.clone());
        let flat: Vec<bool> = mask.iter().flatten().copied().collect();
        let (alpha, ctx) = vars.attention(&zv, &tv, Rc::new(flat)).unwrap();
        let alpha = alpha.value();
        let ctx = ctx.value();

        for b in 0..3 {
            // oracle: scores, masked softmax, weighted value sum
            let mut q = vec![0.0; 4];
            for j in 0..4 {
                for i in 0..8 {
                    q[j] += z.get(b, i) * params.w_q.get(i, j);
                }
            }
            let mut scores = vec![f64::NEG_INFINITY; 2];
            for k in 0..2 {
                if !mask[b][k] {
                    continue;
                }
                let mut key = vec![0.0; 4];
                for j in 0..4 {
                    for i in 0..5 {
                        key[j] += tasks.get(b * 2 + k, i) * params.w_k.get(i, j);
                    }
                }
                scores[k] = q.iter().zip(&key).map(|(a, b)| a * b).sum();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores
                .iter()
                .map(|s| if s.is_finite() { (s - max).exp() } else { 0.0 })
                .collect();
            let total: f64 = exps.iter().sum();
            let mut expect_ctx = vec![0.0; 8];
            for k in 0..2 {
                let w = exps[k] / total;
                assert!((alpha.get(b, k) - w).abs() < 1e-12);
                if w > 0.0 {
                    for j in 0..8 {
                        let mut val = 0.0;
                        for i in 0..5 {
                            val += tasks.get(b * 2 + k, i) * params.w_v.get(i, j);
                        }
                        expect_ctx[j] += w * val;
                    }
                }
            }
            for j in 0..8 {
                assert!((ctx.get(b, j) - expect_ctx[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_uniform_for_identical_rows() {
        let mut rng = SeededRng::new(9);
        let params = EncoderParams::<f64>::init(dims(), &mut rng);
        let z = randn(&mut rng, &[1, 8]);
        let row = randn(&mut rng, &[1, 5]);
        let mut tasks = Tensor::zeros(&[2, 5]);
        tasks.row_mut(0).copy_from_slice(row.row(0));
        tasks.row_mut(1).copy_from_slice(row.row(0));

        let tape = Tape::new();
        let vars = params.vars(&tape, |_| false);
        let (alpha, _) = vars
            .attention(
                &tape.constant(z),
                &tape.constant(tasks),
                Rc::new(vec![true, true]),
            )
            .unwrap();
        let a = alpha.value();
        assert!((a.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((a.get(0, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn all_masked_attention_is_domain_error() {
        let mut rng = SeededRng::new(10);
        let params = EncoderParams::<f64>::init(dims(), &mut rng);
        let tape = Tape::new();
        let vars = params.vars(&tape, |_| false);
        let z = tape.constant(Tensor::zeros(&[1, 8]));
        let tasks = tape.constant(Tensor::zeros(&[2, 5]));
        let out = vars.attention(&z, &tasks, Rc::new(vec![false, false]));
        assert!(matches!(out, Err(Error::Domain(_))));
    }

    #[test]
    fn ema_examples_and_geometric_decay() {
        let mut rng = SeededRng::new(11);
        let online = EncoderParams::<f64>::init(dims(), &mut rng);

        // mu = 0: target snaps to online after one update.
        let other = EncoderParams::<f64>::init(dims(), &mut rng);
        let mut snap = EmaTarget { params: other, momentum: 0.0 };
        snap.update(&online);
        for ((_, a), (_, b)) in snap.params.named().into_iter().zip(online.named()) {
            assert_eq!(a.data(), b.data());
        }

        // scalar case mu=0.9, theta_ema=1, theta=0 -> 0.9
        let mut x: f64 = 1.0;
        x = 0.9 * x + 0.1 * 0.0;
        assert!((x - 0.9).abs() < 1e-15);

        // repeated updates with frozen online shrink the gap by mu each step
        let mut rng2 = SeededRng::new(12);
        let target_init = EncoderParams::<f64>::init(dims(), &mut rng2);
        let mut ema = EmaTarget { params: target_init, momentum: 0.996 };
        let gap = |ema: &EmaTarget<f64>| -> f64 {
            ema.params
                .named()
                .iter()
                .zip(online.named())
                .map(|((_, a), (_, b))| {
                    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
                })
                .sum::<f64>()
                .sqrt()
        };
        let mut prev = gap(&ema);
        for _ in 0..5 {
            ema.update(&online);
            let next = gap(&ema);
            assert!((next / prev - 0.996).abs() < 1e-9);
            prev = next;
        }

        // updating with theta == theta_ema is a fixed point
        let mut fixed = EmaTarget { params: online.clone(), momentum: 0.5 };
        fixed.update(&online);
        for ((_, a), (_, b)) in fixed.params.named().into_iter().zip(online.named()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn policy_uniform_under_zero_params_and_mask_never_sampled() {
        let mut rng = SeededRng::new(13);
        let mut params = EncoderParams::<f64>::init(dims(), &mut rng);
        for (_, t) in params.named_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let obs = randn(&mut rng, &[1, 13]);
        let tape = Tape::new();
        let vars = params.vars(&tape, |_| false);
        let o = tape.constant(obs.clone());
        let (_, z) = vars.encode(&o).unwrap();
        let tasks = tape.constant(task_features(&obs, 2));
        let mask = vec![vec![true, false]];
        let flat: Vec<bool> = mask.iter().flatten().copied().collect();
        let (_, ctx) = vars.attention(&z, &tape.constant(task_features(&obs, 2)), Rc::new(flat)).unwrap();
        let (log_probs, value) = vars.policy(&z, &ctx, &tasks, &mask, None).unwrap();
        let lp = log_probs.value();
        // two valid actions (candidate 1 and skip) -> probability 1/2 each
        assert!((lp.get(0, 0).exp() - 0.5).abs() < 1e-12);
        assert!((lp.get(0, 2).exp() - 0.5).abs() < 1e-12);
        // masked slot has exactly zero probability
        assert_eq!(lp.get(0, 1).exp(), 0.0);
        assert_eq!(value.value().data()[0], 0.0);

        let mut draws = SeededRng::new(14);
        for _ in 0..10_000 {
            let probs: Vec<f64> = (0..3).map(|a| lp.get(0, a).exp()).collect();
            assert_ne!(draws.categorical(&probs), 1);
        }
    }

    #[test]
    fn task_bias_shifts_argmax_consistently() {
        let mut rng = SeededRng::new(15);
        let params = EncoderParams::<f64>::init(dims(), &mut rng);
        let obs = randn(&mut rng, &[2, 13]);
        let tape = Tape::new();
        let vars = params.vars(&tape, |_| false);
        let o = tape.constant(obs.clone());
        let (_, z) = vars.encode(&o).unwrap();
        let tasks = tape.constant(task_features(&obs, 2));

        // beta = 0 leaves the bias at zero
        let zero_bias = vars.task_bias(&z, &tasks, 0.0).unwrap().value();
        assert!(zero_bias.data().iter().all(|v| *v == 0.0));

        // zero scorer weights leave the bias at zero for any beta
        let mut zeroed = params.clone();
        zeroed.w_b = Tensor::zeros(&[8, 5]);
        let tape2 = Tape::new();
        let vars2 = zeroed.vars(&tape2, |_| false);
        let o2 = tape2.constant(obs.clone());
        let (_, z2) = vars2.encode(&o2).unwrap();
        let t2 = tape2.constant(task_features(&obs, 2));
        let b2 = vars2.task_bias(&z2, &t2, 7.0).unwrap().value();
        assert!(b2.data().iter().all(|v| *v == 0.0));

        // large beta makes the argmax over candidates follow the raw scores
        let beta = 1e6;
        let bias = vars.task_bias(&z, &tasks, beta).unwrap().value();
        let mask = vec![vec![true, true], vec![true, true]];
        let (lp, _) = vars.policy(&z, &{
            let flat: Vec<bool> = mask.iter().flatten().copied().collect();
            vars.attention(&z, &tasks, Rc::new(flat)).unwrap().1
        }, &tasks, &mask, Some(beta)).unwrap();
        let lp = lp.value();
        for b in 0..2 {
            let best_bias = if bias.get(b, 0) >= bias.get(b, 1) { 0 } else { 1 };
            let best_lp = if lp.get(b, 0) >= lp.get(b, 1) { 0 } else { 1 };
            assert_eq!(best_bias, best_lp);
        }
    }

    #[test]
    fn frozen_filter_detaches_encoder() {
        let mut rng = SeededRng::new(16);
        let params = EncoderParams::<f64>::init(dims(), &mut rng);
        let tape = Tape::new();
        let vars = params.vars(&tape, |name| !FROZEN_ENCODER_PARAMS.contains(&name));
        assert!(!vars.w1.requires_grad());
        assert!(!vars.w_m.requires_grad());
        assert!(vars.w_pi.requires_grad());
    }
}

//! Generalized advantage estimation over one agent's reward stream.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Standard GAE recursion. `dones` marks terminal steps; a truncated
/// (non-terminal) tail bootstraps from `bootstrap_value`. Returns the raw
/// advantages and the value targets `A + V`.
pub fn gae_advantages<S: Scalar>(
    rewards: &[S],
    values: &[S],
    dones: &[bool],
    bootstrap_value: S,
    gamma_discount: f64,
    lambda_gae: f64,
) -> Result<(Vec<S>, Vec<S>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::structure(format!(
            "gae length mismatch: {n} rewards, {} values, {} dones",
            values.len(),
            dones.len()
        )));
    }
    let gamma = S::of(gamma_discount);
    let lambda = S::of(lambda_gae);
    let mut advantages = vec![S::zero(); n];
    let mut next_adv = S::zero();
    let mut next_value = bootstrap_value;
    for t in (0..n).rev() {
        let cont = if dones[t] { S::zero() } else { S::one() };
        let delta = rewards[t] + gamma * next_value * cont - values[t];
        next_adv = delta + gamma * lambda * cont * next_adv;
        advantages[t] = next_adv;
        next_value = values[t];
    }
    let returns = advantages.iter().zip(values).map(|(&a, &v)| a + v).collect();
    Ok((advantages, returns))
}

/// Shift/scale to zero mean and unit standard deviation (population std,
/// floored to avoid dividing a constant batch by zero).
pub fn normalize_advantages<S: Scalar>(advantages: &mut [S]) {
    if advantages.is_empty() {
        return;
    }
    let n = S::of(advantages.len() as f64);
    let mean = advantages.iter().copied().sum::<S>() / n;
    let var = advantages.iter().map(|&a| (a - mean) * (a - mean)).sum::<S>() / n;
    let std = var.sqrt() + S::of(1e-8);
    for a in advantages {
        *a = (*a - mean) / std;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_terminal_step() {
        let (adv, ret) =
            gae_advantages(&[1.0], &[0.0], &[true], 0.0, 1.0, 1.0).unwrap();
        assert_eq!(adv, vec![1.0]);
        assert_eq!(ret, vec![1.0]);
    }

    #[test]
    fn zero_rewards_zero_values_zero_advantages() {
        let (adv, _) =
            gae_advantages(&[0.0; 6], &[0.0; 6], &[false; 6], 0.0, 0.99, 0.95).unwrap();
        assert!(adv.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn five_step_hand_unrolled() {
        let rewards = [1.0, 0.0, -0.5, 2.0, 0.25];
        let values = [0.3, 0.1, 0.2, -0.1, 0.5];
        let dones = [false, false, false, false, true];
        let (gamma, lambda) = (0.9f64, 0.8f64);
        let (adv, ret) =
            gae_advantages(&rewards, &values, &dones, 0.0, gamma, lambda).unwrap();

        // manual backward recursion
        let mut expect = [0.0f64; 5];
        let mut next_adv = 0.0;
        for t in (0..5).rev() {
            let next_value = if t == 4 { 0.0 } else { values[t + 1] };
            let cont = if dones[t] { 0.0 } else { 1.0 };
            let delta = rewards[t] + gamma * next_value * cont - values[t];
            next_adv = delta + gamma * lambda * cont * next_adv;
            expect[t] = next_adv;
        }
        for t in 0..5 {
            assert!((adv[t] - expect[t]).abs() < 1e-12, "t={t}");
            assert!((ret[t] - (expect[t] + values[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn truncation_bootstraps_value() {
        // non-terminal tail: delta_1 = r + gamma * bootstrap - v
        let (adv, _) =
            gae_advantages(&[0.0], &[0.0], &[false], 2.0, 0.5, 0.9).unwrap();
        assert!((adv[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_structural() {
        let err = gae_advantages(&[1.0, 2.0], &[0.0], &[false], 0.0, 0.9, 0.9).unwrap_err();
        assert!(matches!(err, Error::Structure(_)));
    }

    #[test]
    fn normalization_moments() {
        let mut advs = vec![1.0, 2.0, 3.0, 4.0];
        normalize_advantages(&mut advs);
        let mean: f64 = advs.iter().sum::<f64>() / 4.0;
        let var: f64 = advs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }
}

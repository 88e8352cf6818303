//! Central finite-difference check of [`toy_policy_grad`].
//!
//! The numeric side only ever evaluates the loss, so it stays independent of
//! the analytic derivation it checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{group_weights, toy_policy_grad, GspoError, ToyGroup, ToyPolicy};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Gradient of the toy loss by central differences with step `h`.
pub fn finite_difference(policy: &ToyPolicy<f64>, group: &ToyGroup<f64>, h: f64) -> Result<Vec<f64>, GspoError> {
    let mut probe = policy.clone();
    let mut grad = Vec::with_capacity(policy.logits().len());
    for k in 0..policy.logits().len() {
        let base = policy.logits()[k];
        probe.logits_mut()[k] = base + h;
        let up = group.loss(&probe)?;
        probe.logits_mut()[k] = base - h;
        let down = group.loss(&probe)?;
        probe.logits_mut()[k] = base;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `max_k |a_k - b_k| / max(max_k |a_k|, max_k |b_k|)`, with an absolute
/// fallback when both gradients are numerically zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// A seeded random toy instance: 1-4 states, 2-5 actions, 2-6 rollouts of
/// 1-5 steps, random reference policy, state distribution and coefficients.
pub fn random_instance(seed: u64) -> (ToyPolicy<f64>, ToyGroup<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_states = rng.random_range(1..=4);
    let n_actions = rng.random_range(2..=5);
    let table = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n_states * n_actions).map(|_| rng.random_range(-2.0..2.0)).collect()
    };
    let policy = ToyPolicy::new(n_states, n_actions, table(&mut rng)).expect("valid shape");
    let reference = ToyPolicy::new(n_states, n_actions, table(&mut rng)).expect("valid shape");
    let j = rng.random_range(2..=6);
    let rollouts = (0..j)
        .map(|_| {
            let len = rng.random_range(1..=5);
            (0..len)
                .map(|_| (rng.random_range(0..n_states), rng.random_range(0..n_actions)))
                .collect()
        })
        .collect();
    let rewards = (0..j).map(|_| rng.random_range(-1.0..2.0)).collect();
    let raw: Vec<f64> = (0..n_states).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let group = ToyGroup {
        rollouts,
        rewards,
        reference,
        state_dist: raw.into_iter().map(|d| d / total).collect(),
        lambda: rng.random_range(0.1..3.0),
        alpha_kl: rng.random_range(0.01..1.0),
    };
    (policy, group)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub index: usize,
    pub seed: u64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub instances: Vec<InstanceResult>,
    pub max_relative_error: f64,
    pub worst_instance: usize,
    pub tolerance: f64,
    pub step: f64,
    /// Largest deviation from 1/J of the weights of equal-reward groups.
    pub equal_reward_uniformity: f64,
    /// Largest deviation from 1/J of the weights at lambda = 0.
    pub zero_lambda_uniformity: f64,
    /// Largest weight change after shifting every reward by a constant.
    pub shift_invariance: f64,
    pub passed: bool,
}

/// Runs the finite-difference suite plus weight-property checks.
pub fn run_suite(seed: u64, instances: usize, h: f64, tolerance: f64) -> Result<GradCheckReport, GspoError> {
    let mut results = Vec::with_capacity(instances);
    let mut equal_dev: f64 = 0.0;
    let mut lambda_dev: f64 = 0.0;
    let mut shift_dev: f64 = 0.0;
    for index in 0..instances {
        let instance_seed = seed.wrapping_add(index as u64);
        let (policy, group) = random_instance(instance_seed);
        let analytic = toy_policy_grad(&policy, &group)?;
        let numeric = finite_difference(&policy, &group, h)?;
        results.push(InstanceResult {
            index,
            seed: instance_seed,
            relative_error: relative_error(&analytic, &numeric),
        });

        let j = group.rewards.len();
        let uniform = 1.0 / j as f64;
        let flat = vec![group.rewards[0]; j];
        for w in group_weights(&flat, group.lambda)? {
            equal_dev = equal_dev.max((w - uniform).abs());
        }
        for w in group_weights(&group.rewards, 0.0)? {
            lambda_dev = lambda_dev.max((w - uniform).abs());
        }
        let base = group_weights(&group.rewards, group.lambda)?;
        let shifted_rewards: Vec<f64> = group.rewards.iter().map(|r| r + 3.75).collect();
        let shifted = group_weights(&shifted_rewards, group.lambda)?;
        for (a, b) in base.iter().zip(&shifted) {
            shift_dev = shift_dev.max((a - b).abs());
        }
    }
    let (worst_instance, max_relative_error) = results
        .iter()
        .map(|r| (r.index, r.relative_error))
        .fold((0, 0.0), |best, cur| if cur.1 > best.1 { cur } else { best });
    let passed = max_relative_error <= tolerance
        && equal_dev <= 1e-12
        && lambda_dev <= 1e-12
        && shift_dev <= 1e-12;
    Ok(GradCheckReport {
        instances: results,
        max_relative_error,
        worst_instance,
        tolerance,
        step: h,
        equal_reward_uniformity: equal_dev,
        zero_lambda_uniformity: lambda_dev,
        shift_invariance: shift_dev,
        passed,
    })
}

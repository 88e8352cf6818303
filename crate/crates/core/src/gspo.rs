//! Group sequence policy optimization math.
//!
//! Rollout rewards inside a group become softmax weights; the loss is the
//! weighted negative log-likelihood of the rollouts plus a KL penalty toward
//! the reference policy. Weights are constants with respect to the policy
//! parameters: no gradient flows through them.
//!
//! A tabular [`ToyPolicy`] makes the loss exactly differentiable so the
//! analytic gradient can be checked against finite differences
//! ([`gradcheck`]). Logged rollouts from real models are handled in
//! [`logged`] with a sampled KL estimate.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

pub mod gradcheck;
pub mod logged;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GspoError {
    #[error("group has no rollouts")]
    EmptyGroup,
    #[error("reward at index {0} is not finite")]
    NonFiniteReward(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("policy support mismatch: {0}")]
    SupportMismatch(String),
    #[error("both candidate pools are empty")]
    EmptyPools,
}

/// Softmax of `lambda * rewards`, computed with max subtraction.
pub fn group_weights<T: Real>(rewards: &[T], lambda: T) -> Result<Vec<T>, GspoError> {
    if rewards.is_empty() {
        return Err(GspoError::EmptyGroup);
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(GspoError::NonFiniteReward(i));
    }
    if !lambda.is_finite() {
        return Err(GspoError::ShapeMismatch("lambda must be finite".into()));
    }
    let scaled: Vec<T> = rewards.iter().map(|&r| lambda * r).collect();
    let max = scaled.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// KL contribution of a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlTerm<T> {
    /// Exact divergence, available for tabular policies.
    Exact(T),
    /// One sampled estimate per rollout; the group term is their mean.
    PerRollout(Vec<T>),
}

/// One group of J rollouts for a fixed prompt and candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRollouts<T> {
    pub rewards: Vec<T>,
    /// Sequence log-probability of each rollout under the current policy.
    pub logprobs_theta: Vec<T>,
    pub kl_terms: KlTerm<T>,
    pub lambda: T,
    pub alpha_kl: T,
}

/// Loss value with its parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub weights: Vec<T>,
    pub nll: T,
    pub kl: T,
    pub loss: T,
}

impl<T: Real> GroupRollouts<T> {
    fn kl_value(&self) -> Result<T, GspoError> {
        match &self.kl_terms {
            KlTerm::Exact(v) => Ok(*v),
            KlTerm::PerRollout(v) => {
                if v.len() != self.rewards.len() {
                    return Err(GspoError::ShapeMismatch(format!(
                        "{} kl terms for {} rollouts",
                        v.len(),
                        self.rewards.len()
                    )));
                }
                let sum = v.iter().copied().fold(T::zero(), |a, b| a + b);
                Ok(sum / T::from_count(v.len()))
            }
        }
    }

    pub fn loss_parts(&self) -> Result<LossParts<T>, GspoError> {
        if self.rewards.len() != self.logprobs_theta.len() {
            return Err(GspoError::ShapeMismatch(format!(
                "{} rewards but {} log-probs",
                self.rewards.len(),
                self.logprobs_theta.len()
            )));
        }
        let weights = group_weights(&self.rewards, self.lambda)?;
        let nll = -weights
            .iter()
            .zip(&self.logprobs_theta)
            .fold(T::zero(), |acc, (&w, &lp)| acc + w * lp);
        let kl = self.kl_value()?;
        Ok(LossParts {
            loss: nll + self.alpha_kl * kl,
            weights,
            nll,
            kl,
        })
    }
}

/// `-sum_j w_j log pi(rollout_j) + alpha_kl * KL`.
pub fn gspo_loss<T: Real>(group: &GroupRollouts<T>) -> Result<T, GspoError> {
    group.loss_parts().map(|p| p.loss)
}

/// Tabular categorical policy: `pi(a|s) = softmax(logits[s])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy<T> {
    n_states: usize,
    n_actions: usize,
    logits: Vec<T>,
}

impl<T: Real> ToyPolicy<T> {
    pub fn new(n_states: usize, n_actions: usize, logits: Vec<T>) -> Result<Self, GspoError> {
        if n_states == 0 || n_actions == 0 || logits.len() != n_states * n_actions {
            return Err(GspoError::ShapeMismatch(format!(
                "{} logits for {n_states} states x {n_actions} actions",
                logits.len()
            )));
        }
        Ok(Self {
            n_states,
            n_actions,
            logits,
        })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self::new(n_states, n_actions, vec![T::zero(); n_states * n_actions]).expect("non-empty shape")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn logits(&self) -> &[T] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [T] {
        &mut self.logits
    }

    fn row(&self, s: usize) -> &[T] {
        &self.logits[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn log_probs(&self, s: usize) -> Vec<T> {
        let row = self.row(s);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().fold(T::zero(), |acc, &z| acc + (z - max).exp()).ln();
        row.iter().map(|&z| z - lse).collect()
    }

    pub fn probs(&self, s: usize) -> Vec<T> {
        self.log_probs(s).into_iter().map(T::exp).collect()
    }

    pub fn log_prob(&self, s: usize, a: usize) -> T {
        self.log_probs(s)[a]
    }

    /// Log-probability of a whole action sequence.
    pub fn sequence_log_prob(&self, steps: &[(usize, usize)]) -> T {
        steps
            .iter()
            .fold(T::zero(), |acc, &(s, a)| acc + self.log_prob(s, a))
    }
}

/// `sum_s d(s) KL(theta(.|s) || reference(.|s))`.
pub fn kl_tabular<T: Real>(
    theta: &ToyPolicy<T>,
    reference: &ToyPolicy<T>,
    state_dist: &[T],
) -> Result<T, GspoError> {
    if theta.n_states != reference.n_states || theta.n_actions != reference.n_actions {
        return Err(GspoError::SupportMismatch(format!(
            "{}x{} vs {}x{}",
            theta.n_states, theta.n_actions, reference.n_states, reference.n_actions
        )));
    }
    if state_dist.len() != theta.n_states {
        return Err(GspoError::SupportMismatch(format!(
            "state distribution has {} entries for {} states",
            state_dist.len(),
            theta.n_states
        )));
    }
    let mut total = T::zero();
    for (s, &d) in state_dist.iter().enumerate() {
        if d == T::zero() {
            continue;
        }
        let lp = theta.log_probs(s);
        let lq = reference.log_probs(s);
        if lq.iter().any(|v| !v.is_finite()) {
            return Err(GspoError::SupportMismatch(format!(
                "reference has zero probability in state {s}"
            )));
        }
        let kl_s = lp
            .iter()
            .zip(&lq)
            .fold(T::zero(), |acc, (&p, &q)| acc + p.exp() * (p - q));
        total = total + d * kl_s;
    }
    Ok(total)
}

/// A GSPO group over a toy policy: action sequences, their rewards, and the
/// fixed reference policy and state distribution for the KL term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGroup<T> {
    pub rollouts: Vec<Vec<(usize, usize)>>,
    pub rewards: Vec<T>,
    pub reference: ToyPolicy<T>,
    pub state_dist: Vec<T>,
    pub lambda: T,
    pub alpha_kl: T,
}

impl<T: Real> ToyGroup<T> {
    pub fn validate(&self, policy: &ToyPolicy<T>) -> Result<(), GspoError> {
        if self.rollouts.len() != self.rewards.len() {
            return Err(GspoError::ShapeMismatch(format!(
                "{} rollouts but {} rewards",
                self.rollouts.len(),
                self.rewards.len()
            )));
        }
        let out_of_range = self
            .rollouts
            .iter()
            .flatten()
            .any(|&(s, a)| s >= policy.n_states || a >= policy.n_actions);
        if out_of_range {
            return Err(GspoError::ShapeMismatch("rollout step outside the policy table".into()));
        }
        Ok(())
    }

    /// Materializes the group under `policy` with the exact tabular KL.
    pub fn rollouts_under(&self, policy: &ToyPolicy<T>) -> Result<GroupRollouts<T>, GspoError> {
        self.validate(policy)?;
        Ok(GroupRollouts {
            rewards: self.rewards.clone(),
            logprobs_theta: self.rollouts.iter().map(|r| policy.sequence_log_prob(r)).collect(),
            kl_terms: KlTerm::Exact(kl_tabular(policy, &self.reference, &self.state_dist)?),
            lambda: self.lambda,
            alpha_kl: self.alpha_kl,
        })
    }

    pub fn loss(&self, policy: &ToyPolicy<T>) -> Result<T, GspoError> {
        gspo_loss(&self.rollouts_under(policy)?)
    }
}

/// Analytic gradient of the toy GSPO loss with respect to the policy logits,
/// laid out like [`ToyPolicy::logits`].
pub fn toy_policy_grad<T: Real>(policy: &ToyPolicy<T>, group: &ToyGroup<T>) -> Result<Vec<T>, GspoError> {
    group.validate(policy)?;
    let n_actions = policy.n_actions;
    let weights = group_weights(&group.rewards, group.lambda)?;
    let probs: Vec<Vec<T>> = (0..policy.n_states).map(|s| policy.probs(s)).collect();
    let mut grad = vec![T::zero(); policy.logits.len()];

    // d/dz[s,b] log pi(a|s) = 1[a = b] - pi(b|s)
    for (steps, &w) in group.rollouts.iter().zip(&weights) {
        for &(s, a) in steps {
            for b in 0..n_actions {
                let indicator = if a == b { T::one() } else { T::zero() };
                let g = &mut grad[s * n_actions + b];
                *g = *g - w * (indicator - probs[s][b]);
            }
        }
    }

    // d/dz[s,b] KL_s = p_b (log p_b - log q_b - KL_s)
    if group.alpha_kl != T::zero() {
        if group.state_dist.len() != policy.n_states {
            return Err(GspoError::SupportMismatch("state distribution length".into()));
        }
        for (s, &d) in group.state_dist.iter().enumerate() {
            let lp = policy.log_probs(s);
            let lq = group.reference.log_probs(s);
            let kl_s = lp
                .iter()
                .zip(&lq)
                .fold(T::zero(), |acc, (&p, &q)| acc + p.exp() * (p - q));
            for b in 0..n_actions {
                let g = &mut grad[s * n_actions + b];
                *g = *g + group.alpha_kl * d * probs[s][b] * (lp[b] - lq[b] - kl_s);
            }
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurriculumStage {
    Early,
    Middle,
    Late,
}

/// Teacher versus on-policy counts for one curriculum stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixStage {
    pub stage: CurriculumStage,
    pub teacher_count: usize,
    pub onpolicy_count: usize,
}

impl MixStage {
    /// Early, middle and late stages use on-policy shares of 1/4, 1/2 and
    /// 3/4 of the pool size `m` (rounded), i.e. 3:1, 2:2, 1:3 for `m = 4`.
    pub fn for_stage(stage: CurriculumStage, m: usize) -> Self {
        let quarters = match stage {
            CurriculumStage::Early => 1,
            CurriculumStage::Middle => 2,
            CurriculumStage::Late => 3,
        };
        let onpolicy_count = (m * quarters + 2) / 4;
        Self {
            stage,
            teacher_count: m - onpolicy_count,
            onpolicy_count,
        }
    }

    pub fn m(&self) -> usize {
        self.teacher_count + self.onpolicy_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    Teacher,
    OnPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedCandidate<C> {
    pub source: CandidateSource,
    pub candidate: C,
}

/// Draws the stage's teacher and on-policy counts without replacement and
/// shuffles them together. A short pool contributes what it has.
pub fn curriculum_sample<C: Clone, R: Rng + ?Sized>(
    stage: &MixStage,
    teacher_pool: &[C],
    onpolicy_pool: &[C],
    rng: &mut R,
) -> Result<Vec<MixedCandidate<C>>, GspoError> {
    if teacher_pool.is_empty() && onpolicy_pool.is_empty() {
        return Err(GspoError::EmptyPools);
    }
    let mut draw = |pool: &[C], want: usize, source: CandidateSource| {
        if pool.len() < want {
            tracing::warn!(?source, want, have = pool.len(), "candidate pool short; shrinking draw");
        }
        rand::seq::index::sample(rng, pool.len(), want.min(pool.len()))
            .into_iter()
            .map(|i| MixedCandidate {
                source,
                candidate: pool[i].clone(),
            })
            .collect::<Vec<_>>()
    };
    let mut out = draw(teacher_pool, stage.teacher_count, CandidateSource::Teacher);
    out.extend(draw(onpolicy_pool, stage.onpolicy_count, CandidateSource::OnPolicy));
    out.shuffle(rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weights_examples() {
        let w = group_weights(&[0.3f64, 0.3, 0.3, 0.3], 1.0).unwrap();
        assert!(w.iter().all(|&x| (x - 0.25).abs() <= 1e-12));

        let w = group_weights(&[5.0f64, -2.0, 0.1], 0.0).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() <= 1e-12));

        let w = group_weights(&[1.0f64, 0.0], 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((w[0] - 0.7310585786300049).abs() < 1e-15);
        assert!((w[1] - 0.2689414213699951).abs() < 1e-15);
    }

    #[test]
    fn weights_overflow_safe_and_errors() {
        let w = group_weights(&[1000.0f64, 999.0], 1.0).unwrap();
        assert!((w[0] - 0.7310585786300049).abs() < 1e-12);
        assert_eq!(group_weights(&[1.0f64, f64::NAN], 1.0), Err(GspoError::NonFiniteReward(1)));
        assert_eq!(group_weights::<f64>(&[], 1.0), Err(GspoError::EmptyGroup));
    }

    #[test]
    fn sharp_lambda_splits_ties() {
        let w = group_weights(&[1.0f64, 2.0, 2.0, 0.5], 1e4).unwrap();
        assert!((w[1] - 0.5).abs() < 1e-12 && (w[2] - 0.5).abs() < 1e-12);
        assert!(w[0] < 1e-12 && w[3] < 1e-12);
    }

    #[test]
    fn loss_examples() {
        let g = GroupRollouts {
            rewards: vec![0.0f64; 4],
            logprobs_theta: vec![-1.0; 4],
            kl_terms: KlTerm::Exact(3.0),
            lambda: 1.0,
            alpha_kl: 0.0,
        };
        assert!((gspo_loss(&g).unwrap() - 1.0).abs() < 1e-15);

        let peaked = GroupRollouts {
            rewards: vec![100.0f64, 0.0, 0.0],
            logprobs_theta: vec![-2.5, -0.1, -0.2],
            kl_terms: KlTerm::PerRollout(vec![0.1, 0.2, 0.3]),
            lambda: 1.0,
            alpha_kl: 0.02,
        };
        let parts = peaked.loss_parts().unwrap();
        assert!((parts.nll - 2.5).abs() < 1e-12);
        assert!((parts.kl - 0.2).abs() < 1e-15);
        assert!((parts.loss - (2.5 + 0.02 * 0.2)).abs() < 1e-12);

        let bad = GroupRollouts { logprobs_theta: vec![-1.0], ..g };
        assert!(matches!(gspo_loss(&bad), Err(GspoError::ShapeMismatch(_))));
    }

    #[test]
    fn loss_drops_when_best_rollout_gains_probability() {
        let mut g = GroupRollouts {
            rewards: vec![1.0f64, 0.2, -0.5],
            logprobs_theta: vec![-3.0, -2.0, -1.0],
            kl_terms: KlTerm::Exact(0.0),
            lambda: 1.0,
            alpha_kl: 0.02,
        };
        let before = gspo_loss(&g).unwrap();
        g.logprobs_theta[0] += 0.5;
        assert!(gspo_loss(&g).unwrap() < before);
    }

    #[test]
    fn kl_examples() {
        let p = ToyPolicy::new(1, 2, vec![0.8f64.ln(), 0.2f64.ln()]).unwrap();
        let q = ToyPolicy::<f64>::uniform(1, 2);
        let kl = kl_tabular(&p, &q, &[1.0]).unwrap();
        let expected = 0.8 * 1.6f64.ln() + 0.2 * 0.4f64.ln();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.19274).abs() < 1e-5);
        assert_eq!(kl_tabular(&p, &p, &[1.0]).unwrap(), 0.0);
        assert!(matches!(
            kl_tabular(&p, &ToyPolicy::uniform(1, 3), &[1.0]),
            Err(GspoError::SupportMismatch(_))
        ));
        assert!(matches!(kl_tabular(&p, &q, &[0.5, 0.5]), Err(GspoError::SupportMismatch(_))));
    }

    #[test]
    fn kl_gradient_vanishes_at_reference() {
        let policy = ToyPolicy::<f64>::uniform(2, 3);
        let with_kl = ToyGroup {
            rollouts: vec![vec![(0, 1)], vec![(1, 2), (0, 0)]],
            rewards: vec![0.4, 0.4],
            reference: policy.clone(),
            state_dist: vec![0.5, 0.5],
            lambda: 1.0,
            alpha_kl: 0.02,
        };
        let without_kl = ToyGroup { alpha_kl: 0.0, ..with_kl.clone() };
        let a = toy_policy_grad(&policy, &with_kl).unwrap();
        let b = toy_policy_grad(&policy, &without_kl).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| x == y));
    }

    #[test]
    fn single_action_state_has_zero_gradient() {
        let policy = ToyPolicy::new(2, 1, vec![0.3f64, -1.2]).unwrap();
        let group = ToyGroup {
            rollouts: vec![vec![(0, 0), (1, 0)], vec![(1, 0)]],
            rewards: vec![1.0, 0.0],
            reference: ToyPolicy::new(2, 1, vec![2.0, 0.0]).unwrap(),
            state_dist: vec![0.3, 0.7],
            lambda: 1.0,
            alpha_kl: 0.5,
        };
        let g = toy_policy_grad(&policy, &group).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-15), "{g:?}");
    }

    #[test]
    fn stage_counts() {
        let counts: Vec<(usize, usize)> = [CurriculumStage::Early, CurriculumStage::Middle, CurriculumStage::Late]
            .into_iter()
            .map(|s| {
                let m = MixStage::for_stage(s, 4);
                (m.teacher_count, m.onpolicy_count)
            })
            .collect();
        assert_eq!(counts, vec![(3, 1), (2, 2), (1, 3)]);
        for m in 1..12 {
            assert_eq!(MixStage::for_stage(CurriculumStage::Middle, m).m(), m);
        }
    }

    #[test]
    fn curriculum_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let teacher: Vec<u32> = (0..10).collect();
        let onpolicy: Vec<u32> = (100..110).collect();
        let stage = MixStage::for_stage(CurriculumStage::Early, 4);
        let s = curriculum_sample(&stage, &teacher, &onpolicy, &mut rng).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.iter().filter(|c| c.source == CandidateSource::Teacher).count(), 3);
        let mut ids: Vec<u32> = s.iter().map(|c| c.candidate).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 4);

        let short = curriculum_sample(&stage, &teacher[..1], &onpolicy, &mut rng).unwrap();
        assert_eq!(short.len(), 2);
        assert_eq!(
            curriculum_sample::<u32, _>(&stage, &[], &[], &mut rng),
            Err(GspoError::EmptyPools)
        );
    }
}

//! GSPO losses over logged rollouts from a real model.
//!
//! Each JSONL line carries `prompt_id`, `rollout_id`, `reward_breakdown`
//! (with at least `total`), and per-token `logprob_theta` / `logprob_ref`
//! arrays. The KL term uses the sampled estimator: the mean token log-ratio
//! per rollout, averaged over the group.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroupRollouts, GspoError, KlTerm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedReward {
    pub total: f64,
    #[serde(flatten)]
    pub rest: serde_json::Map<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedRollout {
    pub prompt_id: String,
    pub rollout_id: String,
    pub reward_breakdown: LoggedReward,
    pub logprob_theta: Vec<f64>,
    pub logprob_ref: Vec<f64>,
}

impl LoggedRollout {
    pub fn sequence_logprob(&self) -> f64 {
        self.logprob_theta.iter().sum()
    }

    /// Mean of `log pi_theta - log pi_ref` over sampled tokens.
    pub fn kl_estimate(&self) -> Result<f64, GspoError> {
        if self.logprob_theta.len() != self.logprob_ref.len() {
            return Err(GspoError::ShapeMismatch(format!(
                "rollout {}: {} theta tokens vs {} reference tokens",
                self.rollout_id,
                self.logprob_theta.len(),
                self.logprob_ref.len()
            )));
        }
        if self.logprob_theta.is_empty() {
            return Ok(0.0);
        }
        let sum: f64 = self
            .logprob_theta
            .iter()
            .zip(&self.logprob_ref)
            .map(|(t, r)| t - r)
            .sum();
        Ok(sum / self.logprob_theta.len() as f64)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Schema { line: usize, detail: String },
    #[error(transparent)]
    Gspo(#[from] GspoError),
}

pub fn read_rollouts(path: impl AsRef<Path>) -> Result<Vec<LoggedRollout>, LogError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rollout = serde_json::from_str(&line).map_err(|e| LogError::Schema {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(rollout);
    }
    Ok(out)
}

/// Groups rollouts by prompt in first-seen order.
pub fn group_by_prompt(rollouts: &[LoggedRollout]) -> Vec<(String, Vec<&LoggedRollout>)> {
    let mut groups: Vec<(String, Vec<&LoggedRollout>)> = Vec::new();
    for r in rollouts {
        match groups.iter_mut().find(|(id, _)| *id == r.prompt_id) {
            Some((_, members)) => members.push(r),
            None => groups.push((r.prompt_id.clone(), vec![r])),
        }
    }
    groups
}

pub fn to_group(members: &[&LoggedRollout], lambda: f64, alpha_kl: f64) -> Result<GroupRollouts<f64>, GspoError> {
    Ok(GroupRollouts {
        rewards: members.iter().map(|r| r.reward_breakdown.total).collect(),
        logprobs_theta: members.iter().map(|r| r.sequence_logprob()).collect(),
        kl_terms: KlTerm::PerRollout(members.iter().map(|r| r.kl_estimate()).collect::<Result<_, _>>()?),
        lambda,
        alpha_kl,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLossReport {
    pub prompt_id: String,
    pub rollout_ids: Vec<String>,
    pub rewards: Vec<f64>,
    pub weights: Vec<f64>,
    pub nll: f64,
    pub kl: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub groups: Vec<GroupLossReport>,
    pub mean_loss: f64,
    pub lambda: f64,
    pub alpha_kl: f64,
}

pub fn loss_report(rollouts: &[LoggedRollout], lambda: f64, alpha_kl: f64) -> Result<LossReport, GspoError> {
    let mut groups = Vec::new();
    for (prompt_id, members) in group_by_prompt(rollouts) {
        let group = to_group(&members, lambda, alpha_kl)?;
        let parts = group.loss_parts()?;
        groups.push(GroupLossReport {
            prompt_id,
            rollout_ids: members.iter().map(|r| r.rollout_id.clone()).collect(),
            rewards: group.rewards,
            weights: parts.weights,
            nll: parts.nll,
            kl: parts.kl,
            loss: parts.loss,
        });
    }
    let mean_loss = if groups.is_empty() {
        0.0
    } else {
        groups.iter().map(|g| g.loss).sum::<f64>() / groups.len() as f64
    };
    Ok(LossReport {
        groups,
        mean_loss,
        lambda,
        alpha_kl,
    })
}

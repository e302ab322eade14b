//! Run reports: per-step SSL loss breakdowns, per-iteration PPO statistics,
//! and their CSV/JSON serializations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ssl::{LossBreakdown, SkipCounters};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SslStepLoss {
    pub step: u64,
    #[serde(flatten)]
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SslEpochStats {
    pub epoch: usize,
    pub mean: LossBreakdown,
}

/// Record of one pretraining run.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SslReport {
    pub epochs: Vec<SslEpochStats>,
    pub steps: Vec<SslStepLoss>,
    pub skips: SkipCounters,
    /// Normalization floor hits observed on training tapes.
    pub norm_warnings: u64,
}

impl SslReport {
    /// Mean total loss of the given epoch (1-based position in the run).
    pub fn epoch_mean_total(&self, epoch: usize) -> Option<f64> {
        self.epochs.iter().find(|e| e.epoch == epoch).map(|e| e.mean.total)
    }

    pub fn write_losses_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(LossBreakdown::CSV_HEADER);
        out.push('\n');
        for row in &self.steps {
            out.push_str(&row.breakdown.csv_row(row.step));
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// One PPO iteration's statistics.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    /// Environment steps collected up to and including this iteration.
    pub env_steps: u64,
    /// Mean summed reward of episodes completed this iteration.
    pub mean_return: f64,
    pub deliveries_per_episode: f64,
    pub unassigned_pct: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
    pub policy_loss: f64,
    pub entropy: f64,
    /// Curriculum weight used this iteration.
    pub lambda: f64,
    pub aux_loss: f64,
    pub total_loss: f64,
}

pub const ITERATIONS_CSV_HEADER: &str = "iteration,env_steps,mean_return,deliveries_per_ep,unassigned_pct,clip_fraction,value_loss,policy_loss,entropy,lambda,aux_loss,total_loss";

impl IterationStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.env_steps,
            self.mean_return,
            self.deliveries_per_episode,
            self.unassigned_pct,
            self.clip_fraction,
            self.value_loss,
            self.policy_loss,
            self.entropy,
            self.lambda,
            self.aux_loss,
            self.total_loss
        )
    }
}

/// Full training record: optional pretraining phase plus fine-tuning
/// iterations.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub ssl: Option<SslReport>,
    pub iterations: Vec<IterationStats>,
}

impl TrainReport {
    pub fn write_iterations_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from(ITERATIONS_CSV_HEADER);
        out.push('\n');
        for row in &self.iterations {
            out.push_str(&row.csv_row());
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }
}

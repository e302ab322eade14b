//! Episode-indexed trajectory storage shared by data collection,
//! self-supervised pretraining and evaluation.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One agent-step. `unassigned`/`delivered` carry the KPI bookkeeping that
/// the exported record schema does not include.
#[derive(Clone, Debug)]
pub struct StepRecord<S> {
    pub episode: u32,
    pub t: u32,
    pub agent: u32,
    pub features: Vec<S>,
    pub mask: Vec<bool>,
    /// Raw environment action in 1..=K+1.
    pub action: usize,
    pub reward: S,
    pub done: bool,
    pub label: u8,
    pub unassigned: bool,
    pub delivered: bool,
}

/// Insertion-ordered store of step records with an (episode, agent, t)
/// index for temporal and peer lookups.
#[derive(Clone, Debug)]
pub struct TrajectoryBuffer<S> {
    obs_dim: usize,
    k_candidates: usize,
    records: Vec<StepRecord<S>>,
    index: HashMap<(u32, u32, u32), usize>,
    agents_per_step: u32,
}

impl<S: Scalar> TrajectoryBuffer<S> {
    pub fn new(obs_dim: usize, k_candidates: usize) -> Self {
        TrajectoryBuffer {
            obs_dim,
            k_candidates,
            records: Vec::new(),
            index: HashMap::new(),
            agents_per_step: 0,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn k_candidates(&self) -> usize {
        self.k_candidates
    }

    /// Number of distinct agent ids seen.
    pub fn n_agents(&self) -> usize {
        self.agents_per_step as usize
    }

    pub fn push(&mut self, record: StepRecord<S>) {
        debug_assert_eq!(record.features.len(), self.obs_dim);
        self.agents_per_step = self.agents_per_step.max(record.agent + 1);
        self.index.insert((record.episode, record.agent, record.t), self.records.len());
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[StepRecord<S>] {
        &self.records
    }

    pub fn record(&self, row: usize) -> &StepRecord<S> {
        &self.records[row]
    }

    /// Row of the same agent's record `dt` steps later in the same episode.
    pub fn successor(&self, row: usize, dt: u32) -> Option<usize> {
        let r = &self.records[row];
        self.index.get(&(r.episode, r.agent, r.t + dt)).copied()
    }

    /// Row of a co-observing peer at the same (episode, t): the next agent
    /// id cyclically, so the pairing is deterministic.
    pub fn peer(&self, row: usize) -> Option<usize> {
        if self.agents_per_step < 2 {
            return None;
        }
        let r = &self.records[row];
        let peer_agent = (r.agent + 1) % self.agents_per_step;
        self.index.get(&(r.episode, peer_agent, r.t)).copied()
    }

    /// Stack the feature vectors of the given rows into a matrix.
    pub fn features_matrix(&self, rows: &[usize]) -> Tensor<S> {
        let mut data = Vec::with_capacity(rows.len() * self.obs_dim);
        for &r in rows {
            data.extend_from_slice(&self.records[r].features);
        }
        Tensor::matrix(rows.len(), self.obs_dim, data).expect("row width invariant")
    }

    pub fn labels(&self, rows: &[usize]) -> Vec<u8> {
        rows.iter().map(|&r| self.records[r].label).collect()
    }

    /// Export as newline-delimited JSON records
    /// `{episode, t, agent, obs, action, reward, label}`.
    pub fn export_ndjson(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        for r in &self.records {
            let obs: Vec<f64> = r.features.iter().map(|v| v.to_f64_lossy()).collect();
            let line = serde_json::json!({
                "episode": r.episode,
                "t": r.t,
                "agent": r.agent,
                "obs": obs,
                "action": r.action,
                "reward": r.reward.to_f64_lossy(),
                "label": r.label,
            });
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read a buffer back from its exported form. Candidate masks are
    /// reconstructed from the zero-padding (a real candidate row always has
    /// a positive travel estimate); KPI flags are not representable in the
    /// record schema and come back unset.
    pub fn import_ndjson(path: &Path, obs_dim: usize, k_candidates: usize) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| {
            Error::MissingArtifact(format!("{}: {e}", path.display()))
        })?;
        let reader = std::io::BufReader::new(file);
        let mut buffer = TrajectoryBuffer::new(obs_dim, k_candidates);
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| {
                Error::IncompatibleArtifact(format!("line {}: {e}", lineno + 1))
            })?;
            let obs = v["obs"]
                .as_array()
                .ok_or_else(|| Error::IncompatibleArtifact("missing obs array".into()))?;
            if obs.len() != obs_dim {
                return Err(Error::IncompatibleArtifact(format!(
                    "line {}: obs dim {} != expected {obs_dim}",
                    lineno + 1,
                    obs.len()
                )));
            }
            let features: Vec<S> =
                obs.iter().map(|x| S::of(x.as_f64().unwrap_or(f64::NAN))).collect();
            let per_task = (obs_dim - 3) / k_candidates;
            let mask: Vec<bool> = (0..k_candidates)
                .map(|k| {
                    let row = &features[3 + k * per_task..3 + (k + 1) * per_task];
                    row.iter().any(|v| *v != S::zero())
                })
                .collect();
            buffer.push(StepRecord {
                episode: v["episode"].as_u64().unwrap_or(0) as u32,
                t: v["t"].as_u64().unwrap_or(0) as u32,
                agent: v["agent"].as_u64().unwrap_or(0) as u32,
                features,
                mask,
                action: v["action"].as_u64().unwrap_or(0) as usize,
                reward: S::of(v["reward"].as_f64().unwrap_or(0.0)),
                done: false,
                label: v["label"].as_u64().unwrap_or(u8::MAX as u64) as u8,
                unassigned: false,
                delivered: false,
            });
        }
        if buffer.is_empty() {
            return Err(Error::IncompatibleArtifact("empty trajectory file".into()));
        }
        Ok(buffer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(ep: u32, t: u32, agent: u32) -> StepRecord<f64> {
        StepRecord {
            episode: ep,
            t,
            agent,
            features: vec![0.5, 0.25, 0.0, 1.0, 0.125, 0.75, 0.5, 0.3],
            mask: vec![true],
            action: 1,
            reward: 0.1,
            done: false,
            label: 2,
            unassigned: false,
            delivered: false,
        }
    }

    #[test]
    fn successor_and_peer_lookups() {
        let mut b = TrajectoryBuffer::new(8, 1);
        for t in 0..3 {
            for agent in 0..2 {
                b.push(record(0, t, agent));
            }
        }
        assert_eq!(b.successor(0, 1), Some(2));
        assert_eq!(b.successor(4, 1), None);
        assert_eq!(b.peer(0), Some(1));
        assert_eq!(b.peer(1), Some(0));
    }

    #[test]
    fn ndjson_round_trip_preserves_pinned_fields() {
        let mut b = TrajectoryBuffer::new(8, 1);
        for t in 0..4 {
            b.push(record(1, t, 0));
        }
        let dir = std::env::temp_dir().join("latcomm_buffer_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("buf.ndjson");
        b.export_ndjson(&path).unwrap();
        let back = TrajectoryBuffer::<f64>::import_ndjson(&path, 8, 1).unwrap();
        assert_eq!(back.len(), b.len());
        for (x, y) in b.records().iter().zip(back.records()) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.action, y.action);
            assert_eq!(x.label, y.label);
            assert_eq!(x.mask, y.mask);
        }
        std::fs::remove_file(path).ok();
    }
}

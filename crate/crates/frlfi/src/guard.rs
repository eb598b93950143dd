//! Both mitigation schemes: training-time reward-drop detection with server
//! checkpointing and rollback, and inference-time range-based anomaly
//! detection with operation skipping.

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fxp::CodeTensor;
use crate::policy::{decode_checkpoint, encode_checkpoint, PolicyError};
use crate::{Policy, Scalar};

#[derive(Debug, Error)]
pub enum GuardError {
    #[error("detector config invalid: {0}")]
    BadConfig(&'static str),
    #[error("checkpoint io failed at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Reward-drop detector parameters. `p` is the percent drop threshold, `k`
/// the consecutive-episode count, `w` the trailing baseline window, and
/// `checkpoint_every` the checkpoint period in aggregation rounds.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DetectorConfig {
    pub p: f64,
    pub k: usize,
    pub w: usize,
    pub checkpoint_every: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self { p: 25.0, k: 50, w: 100, checkpoint_every: 5 }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<(), GuardError> {
        if self.p <= 0.0 {
            return Err(GuardError::BadConfig("p must be > 0"));
        }
        if self.k == 0 {
            return Err(GuardError::BadConfig("k must be >= 1"));
        }
        if self.w < self.k {
            return Err(GuardError::BadConfig("w must be >= k"));
        }
        if self.checkpoint_every == 0 {
            return Err(GuardError::BadConfig("checkpoint_every must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    NoFault,
    AgentFault(usize),
    ServerFault,
}

/// Per-agent reward-drop tracking. An agent is "dropped" when its episode
/// return stays more than p% below its trailing baseline for k consecutive
/// episodes; the baseline freezes while a suspicion streak is alive so the
/// fault cannot poison its own reference level. The detector arms only once
/// an agent's baseline is positive (early training rewards are too noisy to
/// define a meaningful drop).
#[derive(Debug, Clone)]
pub struct RewardDropDetector {
    cfg: DetectorConfig,
    history: Vec<VecDeque<f64>>,
    frozen_baseline: Vec<Option<f64>>,
    streak: Vec<usize>,
    episodes_seen: usize,
}

impl RewardDropDetector {
    pub fn new(cfg: DetectorConfig, n_agents: usize) -> Self {
        Self {
            cfg,
            history: vec![VecDeque::with_capacity(cfg.w); n_agents],
            frozen_baseline: vec![None; n_agents],
            streak: vec![0; n_agents],
            episodes_seen: 0,
        }
    }

    pub fn n_agents(&self) -> usize {
        self.history.len()
    }

    /// True while any agent has an open suspicion streak.
    pub fn suspicion_active(&self) -> bool {
        self.streak.iter().any(|&s| s > 0)
    }

    pub fn reset_agent(&mut self, agent: usize) {
        self.history[agent].clear();
        self.frozen_baseline[agent] = None;
        self.streak[agent] = 0;
    }

    pub fn reset_all(&mut self) {
        let n = self.n_agents();
        for a in 0..n {
            self.reset_agent(a);
        }
        self.episodes_seen = 0;
    }

    /// Feed one episode's per-agent returns. Returns the verdicts raised this
    /// episode: empty means no fault. One dropped agent yields a single
    /// `AgentFault`; more than n/2 dropped yields `ServerFault`; anything in
    /// between yields one `AgentFault` per dropped agent.
    pub fn update(&mut self, returns: &[f64]) -> Vec<Verdict> {
        assert_eq!(returns.len(), self.n_agents());
        self.episodes_seen += 1;
        let mut newly_dropped = Vec::new();
        for (agent, &ret) in returns.iter().enumerate() {
            let warm = self.history[agent].len() >= self.cfg.w;
            let baseline = self.frozen_baseline[agent].or_else(|| {
                if warm {
                    Some(self.history[agent].iter().sum::<f64>() / self.history[agent].len() as f64)
                } else {
                    None
                }
            });
            let dropped = match baseline {
                Some(b) if b > 0.0 => ret < (1.0 - self.cfg.p / 100.0) * b,
                _ => false,
            };
            if dropped {
                if self.streak[agent] == 0 {
                    self.frozen_baseline[agent] = baseline;
                }
                self.streak[agent] += 1;
                if self.streak[agent] == self.cfg.k {
                    newly_dropped.push(agent);
                }
            } else {
                self.streak[agent] = 0;
                self.frozen_baseline[agent] = None;
                if self.history[agent].len() == self.cfg.w {
                    self.history[agent].pop_front();
                }
                self.history[agent].push_back(ret);
            }
        }
        // include agents whose streak is still past k (recovery deferred)
        let mut flagged: Vec<usize> = (0..self.n_agents())
            .filter(|&a| self.streak[a] >= self.cfg.k)
            .collect();
        if flagged.is_empty() {
            return Vec::new();
        }
        if newly_dropped.is_empty() {
            // nothing crossed the threshold this episode; avoid re-raising
            // verdicts every episode while recovery is deferred
            flagged.clear();
        }
        if flagged.len() * 2 > self.n_agents() {
            vec![Verdict::ServerFault]
        } else {
            flagged.into_iter().map(Verdict::AgentFault).collect()
        }
    }
}

/// A server parameter snapshot with a digest-checked file form.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: CodeTensor,
    pub dims: Vec<usize>,
    pub round: u64,
}

impl Checkpoint {
    /// Atomic write: temp file in the same directory, then rename.
    pub fn write_atomic(&self, path: &Path) -> Result<(), GuardError> {
        let bytes = encode_checkpoint(&self.params, &self.dims, self.round);
        let tmp = path.with_extension("tmp");
        let io = |source| GuardError::Io { path: path.to_path_buf(), source };
        // No fsync: rename keeps readers from ever seeing a partial file, and
        // a checkpoint lost to a crash is replaced five rounds later. Syncing
        // every write costs more than the entire training loop.
        let mut f = std::fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(io)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, GuardError> {
        let bytes = std::fs::read(path)
            .map_err(|source| GuardError::Io { path: path.to_path_buf(), source })?;
        let (params, dims, round) = decode_checkpoint(&bytes)?;
        Ok(Self { params, dims, round })
    }
}

/// One guard decision, for the event log.
#[derive(Debug, Clone)]
pub struct GuardEvent {
    pub episode: usize,
    pub verdict: String,
    pub agent: Option<usize>,
    pub action_taken: String,
    pub recovered_within_k: Option<bool>,
}

/// Pending transient-or-not classification after a recovery.
#[derive(Debug, Clone)]
struct PendingClassification {
    agents: Vec<usize>,
    baseline: f64,
    deadline: usize,
    returns: Vec<f64>,
    event_index: usize,
}

/// Training-time mitigation state machine: reward-drop detection, periodic
/// server checkpointing, and rollback on a verdict.
#[derive(Clone)]
pub struct TrainingGuard {
    cfg: DetectorConfig,
    detector: RewardDropDetector,
    checkpoint: Option<Checkpoint>,
    checkpoint_path: Option<PathBuf>,
    events: Vec<GuardEvent>,
    pending: Vec<PendingClassification>,
}

impl TrainingGuard {
    pub fn new(cfg: DetectorConfig, n_agents: usize, checkpoint_path: Option<PathBuf>) -> Result<Self, GuardError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            detector: RewardDropDetector::new(cfg, n_agents),
            checkpoint: None,
            checkpoint_path,
            events: Vec::new(),
            pending: Vec::new(),
        })
    }

    pub fn events(&self) -> &[GuardEvent] {
        &self.events
    }

    pub fn detections(&self) -> usize {
        self.events.iter().filter(|e| e.verdict != "no_fault").count()
    }

    pub fn checkpoint(&self) -> Option<&Checkpoint> {
        self.checkpoint.as_ref()
    }

    pub fn detector(&self) -> &RewardDropDetector {
        &self.detector
    }

    /// Snapshot server parameters every `checkpoint_every` rounds. Skipped
    /// while a suspicion streak is open, so a fault cannot seep into the
    /// checkpoint before it is detected. Storage failures are logged and the
    /// previous checkpoint stays live.
    /// True when a checkpoint is due this round, letting callers skip the
    /// cost of assembling the server parameter tensor on off rounds.
    pub fn wants_checkpoint(&self, round: u64) -> bool {
        round != 0
            && round % self.cfg.checkpoint_every as u64 == 0
            && !self.detector.suspicion_active()
    }

    pub fn maybe_checkpoint(&mut self, round: u64, server_params: &CodeTensor, dims: &[usize], episode: usize) {
        if !self.wants_checkpoint(round) {
            return;
        }
        let ckpt = Checkpoint { params: server_params.clone(), dims: dims.to_vec(), round };
        if let Some(path) = &self.checkpoint_path {
            if let Err(e) = ckpt.write_atomic(path) {
                self.events.push(GuardEvent {
                    episode,
                    verdict: "no_fault".into(),
                    agent: None,
                    action_taken: format!("checkpoint write failed: {e}"),
                    recovered_within_k: None,
                });
                return;
            }
        }
        self.checkpoint = Some(ckpt);
    }

    /// Feed per-agent returns for one episode, recover on any verdict, and
    /// settle pending transient classifications.
    pub fn observe_episode(
        &mut self,
        episode: usize,
        returns: &[f64],
        agents: &mut [Policy],
    ) -> Result<(), GuardError> {
        // settle pending classifications first
        let mut settled = Vec::new();
        for (idx, p) in self.pending.iter_mut().enumerate() {
            let mean: f64 = p
                .agents
                .iter()
                .map(|&a| returns[a])
                .sum::<f64>()
                / p.agents.len() as f64;
            p.returns.push(mean);
            if episode >= p.deadline {
                let recent = p.returns.iter().sum::<f64>() / p.returns.len() as f64;
                let ok = recent >= (1.0 - self.cfg.p / 100.0) * p.baseline;
                self.events[p.event_index].recovered_within_k = Some(ok);
                settled.push(idx);
            }
        }
        for idx in settled.into_iter().rev() {
            self.pending.remove(idx);
        }

        let verdicts = self.detector.update(returns);
        for v in verdicts {
            self.recover(v, episode, agents)?;
        }
        Ok(())
    }

    fn recover(&mut self, verdict: Verdict, episode: usize, agents: &mut [Policy]) -> Result<(), GuardError> {
        let Some(ckpt) = self.checkpoint.clone() else {
            self.events.push(GuardEvent {
                episode,
                verdict: verdict_name(verdict),
                agent: verdict_agent(verdict),
                action_taken: "recovery deferred: no checkpoint yet".into(),
                recovered_within_k: None,
            });
            return Ok(());
        };
        let (targets, action) = match verdict {
            Verdict::NoFault => return Ok(()),
            Verdict::AgentFault(i) => (vec![i], format!("copied checkpoint (round {}) to agent {i}", ckpt.round)),
            Verdict::ServerFault => (
                (0..agents.len()).collect(),
                format!("reverted server to checkpoint (round {}) and rebroadcast", ckpt.round),
            ),
        };
        let baseline = match verdict {
            Verdict::AgentFault(i) => self.detector.frozen_baseline[i].unwrap_or(0.0),
            _ => {
                let bs: Vec<f64> = self.detector.frozen_baseline.iter().flatten().copied().collect();
                if bs.is_empty() { 0.0 } else { bs.iter().sum::<f64>() / bs.len() as f64 }
            }
        };
        for &t in &targets {
            agents[t].load_params(&ckpt.params)?;
            self.detector.reset_agent(t);
        }
        self.events.push(GuardEvent {
            episode,
            verdict: verdict_name(verdict),
            agent: verdict_agent(verdict),
            action_taken: action,
            recovered_within_k: None,
        });
        self.pending.push(PendingClassification {
            agents: targets,
            baseline,
            deadline: episode + self.cfg.k,
            returns: Vec::new(),
            event_index: self.events.len() - 1,
        });
        Ok(())
    }
}

fn verdict_name(v: Verdict) -> String {
    match v {
        Verdict::NoFault => "no_fault".into(),
        Verdict::AgentFault(_) => "agent_fault".into(),
        Verdict::ServerFault => "server_fault".into(),
    }
}

fn verdict_agent(v: Verdict) -> Option<usize> {
    match v {
        Verdict::AgentFault(i) => Some(i),
        _ => None,
    }
}

// --- range-based anomaly detection -------------------------------------------

/// Per-layer weight envelopes derived from a clean policy, with a 10% margin
/// applied away from the interval so the clean weights themselves never flag.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeDetector {
    bounds: Vec<(Scalar, Scalar)>,
}

impl RangeDetector {
    pub fn bounds(&self) -> &[(Scalar, Scalar)] {
        &self.bounds
    }
}

/// Tally each layer's dequantized weights into (1.1·w_min, 1.1·w_max)
/// envelopes (margin directed outward from the interval).
pub fn build_range_detector(policy: &Policy) -> RangeDetector {
    let bounds = (0..policy.n_layers())
        .map(|l| {
            let ws = policy.dequantized(l);
            let min = ws.iter().cloned().fold(Scalar::INFINITY, Scalar::min);
            let max = ws.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max);
            (min - 0.1 * min.abs(), max + 0.1 * max.abs())
        })
        .collect();
    RangeDetector { bounds }
}

/// Flag mask over each layer's parameters: true where a weight lies strictly
/// outside its layer envelope.
pub fn screen(policy: &Policy, detector: &RangeDetector) -> Vec<Vec<bool>> {
    (0..policy.n_layers())
        .map(|l| {
            let (lo, hi) = detector.bounds[l];
            policy.dequantized(l).iter().map(|&w| w < lo || w > hi).collect()
        })
        .collect()
}

/// Forward pass in which every flagged weight contributes zero; unflagged
/// computation is identical to a plain forward.
pub fn guarded_forward(
    policy: &Policy,
    obs: &crate::gridworld::Observation,
    detector: &RangeDetector,
) -> Result<Vec<Scalar>, PolicyError> {
    let mask = screen(policy, detector);
    let input: Vec<Scalar> = obs.0.iter().map(|&v| v as Scalar).collect();
    policy.forward_hooked(&input, Some(&mask), None)
}

//! Campaign runner: episode x BER sweeps over fault locations and modes,
//! inference fault studies, convergence-recovery studies, mitigation
//! evaluation, and deterministic parallel execution.

pub mod report;
pub mod stats;

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::faultinj::{
    inject, splitmix, FaultLocation, FaultMode, FaultPlan, FaultSpec, FaultTiming, Persistence,
};
use crate::fedtrain::{train_federated, TrainConfig, TrainError, Trainer};
use crate::gridworld::{GridError, GridMap, Outcome};
use crate::guard::{build_range_detector, guarded_forward, DetectorConfig, GuardEvent, RangeDetector};
use crate::policy::{select_action, ActionMode, PolicyError};
use crate::{Policy, Scalar};
use stats::{summarize, Summary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("experiment spec invalid: {0}")]
    BadSpec(String),
    #[error("policy bundle not converged: greedy SR {sr:.3} < 0.96")]
    Unconverged { sr: f64 },
    #[error("io failure at {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Worker-thread count: `FRLFI_THREADS` if set and positive, otherwise the
/// rayon default. All per-repetition RNG streams derive from (seed base,
/// cell id, repetition id), so results are identical at any thread count.
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var("FRLFI_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    Inference,
}

/// Fault location without an agent index; agent-scoped kinds target agent 0
/// at run time (which agent is hit is immaterial to aggregate statistics,
/// and a fixed choice keeps cells comparable across repetitions).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocationKind {
    AgentWeights,
    AgentUpload,
    ActivationRead,
    ServerState,
    ServerBroadcast,
}

impl LocationKind {
    pub fn to_location(self) -> FaultLocation {
        match self {
            LocationKind::AgentWeights => FaultLocation::AgentWeights(0),
            LocationKind::AgentUpload => FaultLocation::AgentUpload(0),
            LocationKind::ActivationRead => FaultLocation::ActivationRead(0),
            LocationKind::ServerState => FaultLocation::ServerState,
            LocationKind::ServerBroadcast => FaultLocation::ServerBroadcast,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LocationKind::AgentWeights => "agent_weights",
            LocationKind::AgentUpload => "agent_upload",
            LocationKind::ActivationRead => "activation_read",
            LocationKind::ServerState => "server_state",
            LocationKind::ServerBroadcast => "server_broadcast",
        }
    }
}

pub fn mode_name(m: FaultMode) -> &'static str {
    match m {
        FaultMode::Both => "both",
        FaultMode::ZeroToOne => "zero_to_one",
        FaultMode::OneToZero => "one_to_zero",
    }
}

pub fn persistence_name(p: Persistence) -> &'static str {
    match p {
        Persistence::TransientRead => "transient_read",
        Persistence::PersistentMemory => "persistent_memory",
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub train: TrainConfig,
    pub phase: Phase,
    /// Training-phase axis: episodes at which a fault fires.
    pub fault_episodes: Vec<usize>,
    pub bers: Vec<f64>,
    pub locations: Vec<LocationKind>,
    pub modes: Vec<FaultMode>,
    /// Inference-phase axis.
    pub persistences: Vec<Persistence>,
    /// Inference-phase axis: run with and/or without the range guard.
    pub guard_axis: Vec<bool>,
    pub repetitions: usize,
    pub seed_base: u64,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            phase: Phase::Training,
            fault_episodes: vec![100, 300, 500, 700, 900],
            bers: vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1],
            locations: vec![LocationKind::AgentWeights, LocationKind::ServerState],
            modes: vec![FaultMode::Both],
            persistences: vec![Persistence::PersistentMemory],
            guard_axis: vec![false],
            repetitions: 100,
            seed_base: 0,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.train.validate()?;
        let bad = |m: String| Err(HarnessError::BadSpec(m));
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        if self.bers.is_empty() {
            return bad("bers axis is empty".into());
        }
        for &b in &self.bers {
            if !(0.0..=1.0).contains(&b) {
                return bad(format!("ber {b} outside [0, 1]"));
            }
        }
        match self.phase {
            Phase::Training => {
                if self.fault_episodes.is_empty() {
                    return bad("fault_episodes axis is empty".into());
                }
                for &e in &self.fault_episodes {
                    if e >= self.train.episodes {
                        return bad(format!("fault episode {e} beyond training horizon"));
                    }
                }
                if self.locations.is_empty() {
                    return bad("locations axis is empty".into());
                }
                if self.modes.is_empty() {
                    return bad("modes axis is empty".into());
                }
            }
            Phase::Inference => {
                if self.persistences.is_empty() {
                    return bad("persistences axis is empty".into());
                }
                if self.modes.is_empty() {
                    return bad("modes axis is empty".into());
                }
                if self.guard_axis.is_empty() {
                    return bad("guard_axis is empty".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    /// Fault episode for training sweeps; 0 for inference.
    pub episode: usize,
    pub ber: f64,
    pub location: String,
    pub mode: String,
    pub persistence: String,
    pub guard: bool,
    pub mean_sr: f64,
    pub sr_std: f64,
    pub ci_half: f64,
    pub mean_flips: f64,
    /// Wall-clock spent on the cell; in-memory only, never serialized.
    pub runtime_s: f64,
}

fn row(
    episode: usize,
    ber: f64,
    location: &str,
    mode: &str,
    persistence: &str,
    guard: bool,
    srs: &[f64],
    flips: &[f64],
    runtime_s: f64,
) -> ResultRow {
    let Summary { mean, std, ci_half } = summarize(srs);
    ResultRow {
        episode,
        ber,
        location: location.to_string(),
        mode: mode.to_string(),
        persistence: persistence.to_string(),
        guard,
        mean_sr: mean,
        sr_std: std,
        ci_half,
        mean_flips: flips.iter().sum::<f64>() / flips.len() as f64,
        runtime_s,
    }
}

/// One deterministic greedy rollout per agent on its own map; SR is the
/// fraction of agents that reach the goal.
pub fn eval_greedy_sr(policies: &[Policy], maps: &[GridMap], max_steps: usize) -> Result<f64, HarnessError> {
    let mut ok = 0usize;
    for (p, m) in policies.iter().zip(maps) {
        if rollout(p, m, max_steps, None, None)? == Outcome::ReachedGoal {
            ok += 1;
        }
    }
    Ok(ok as f64 / policies.len() as f64)
}

/// One greedy episode, optionally with per-read transient weight corruption
/// (a fresh flip pattern on every forward pass) and/or the range guard.
pub fn rollout(
    policy: &Policy,
    map: &GridMap,
    max_steps: usize,
    mut transient: Option<(f64, FaultMode, &mut ChaCha12Rng)>,
    guard: Option<&RangeDetector>,
) -> Result<Outcome, HarnessError> {
    let mut pos = map.source();
    let mut tie_rng = ChaCha12Rng::seed_from_u64(0); // greedy: rng is never consulted
    let mut scratch;
    // A transient read corruption strikes exactly one action step. The step is
    // drawn uniformly over the episode window; if the episode terminates
    // earlier, the event lands after completion and has no effect.
    let fault_step = transient
        .as_mut()
        .map(|(_, _, rng)| rng.gen_range(0..max_steps));
    for step_idx in 0..max_steps {
        let obs = map.observe(pos)?;
        let read: &Policy = match transient.as_mut() {
            Some((ber, mode, rng)) if fault_step == Some(step_idx) => {
                let mut flat = policy.flatten_params();
                inject(&mut flat, *ber, *mode, rng).map_err(TrainError::from)?;
                scratch = policy.clone();
                scratch.load_params(&flat).map_err(TrainError::from)?;
                &scratch
            }
            _ => policy,
        };
        let values: Vec<Scalar> = match guard {
            Some(det) => guarded_forward(read, &obs, det)?,
            None => read.forward(&obs)?,
        };
        let action =
            crate::gridworld::ACTIONS[select_action(&values, ActionMode::Greedy, &mut tie_rng)?];
        let step = map.step(pos, action)?;
        if step.terminal {
            return Ok(step.outcome);
        }
        pos = step.next_pos;
    }
    Ok(Outcome::Timeout)
}

fn cell_rng(seed_base: u64, cell: u64, rep: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(splitmix(splitmix(seed_base, 0xCE11 + cell), rep))
}

fn cell_fault_seed(seed_base: u64, cell: u64, rep: u64) -> u64 {
    splitmix(splitmix(seed_base, 0xFA_017 + cell), rep)
}

/// Training-phase sweep. For each repetition a fault-free prefix is trained
/// once and forked at every fault episode into one continuation per
/// (BER, location, mode) cell; each continuation trains to the horizon and is
/// evaluated greedily. Cells at BER 0 reproduce the fault-free baseline.
pub fn run_training_sweep(spec: &ExperimentSpec, maps: &[GridMap]) -> Result<Vec<ResultRow>, HarnessError> {
    spec.validate()?;
    if spec.phase != Phase::Training {
        return Err(HarnessError::BadSpec("run_training_sweep needs phase = training".into()));
    }
    let mut episodes = spec.fault_episodes.clone();
    episodes.sort_unstable();
    episodes.dedup();

    // cell order: episode-major, then ber, location, mode
    let mut cells = Vec::new();
    for &e in &episodes {
        for &ber in &spec.bers {
            for &loc in &spec.locations {
                for &mode in &spec.modes {
                    cells.push((e, ber, loc, mode));
                }
            }
        }
    }

    let t0 = std::time::Instant::now();
    let per_rep: Vec<Vec<(f64, f64)>> = thread_pool().install(|| {
        (0..spec.repetitions)
            .into_par_iter()
            .map(|rep| -> Result<Vec<(f64, f64)>, HarnessError> {
                let cfg = TrainConfig {
                    seed: spec.seed_base + rep as u64,
                    ..spec.train.clone()
                };
                let mut base = Trainer::new(&cfg, maps, FaultPlan::default(), None)?;
                let mut out = vec![(0.0, 0.0); cells.len()];
                for &e in &episodes {
                    base.run_to(e)?;
                    for (ci, &(ce, ber, loc, mode)) in cells.iter().enumerate() {
                        if ce != e {
                            continue;
                        }
                        let mut fork = base.clone();
                        let plan = FaultPlan::new(vec![FaultSpec {
                            location: loc.to_location(),
                            ber,
                            mode,
                            timing: FaultTiming::Episode(e),
                            persistence: match loc {
                                LocationKind::ActivationRead => Persistence::TransientRead,
                                _ => Persistence::PersistentMemory,
                            },
                            seed: cell_fault_seed(spec.seed_base, ci as u64, rep as u64),
                        }]);
                        fork.set_plan(plan, cfg.episodes)?;
                        fork.run_to(cfg.episodes)?;
                        let done = fork.finish();
                        let sr = eval_greedy_sr(&done.policies, maps, cfg.max_steps)?;
                        out[ci] = (sr, done.injections.len() as f64);
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let elapsed = t0.elapsed().as_secs_f64() / cells.len() as f64;

    Ok(cells
        .iter()
        .enumerate()
        .map(|(ci, &(e, ber, loc, mode))| {
            let srs: Vec<f64> = per_rep.iter().map(|r| r[ci].0).collect();
            let flips: Vec<f64> = per_rep.iter().map(|r| r[ci].1).collect();
            let persistence = match loc {
                LocationKind::ActivationRead => Persistence::TransientRead,
                _ => Persistence::PersistentMemory,
            };
            row(
                e,
                ber,
                loc.name(),
                mode_name(mode),
                persistence_name(persistence),
                false,
                &srs,
                &flips,
                elapsed,
            )
        })
        .collect())
}

/// A converged policy bundle for inference studies.
pub struct Bundle {
    pub policies: Vec<Policy>,
    pub maps: Vec<GridMap>,
}

/// Train a fault-free bundle and refuse it if the greedy SR is below the
/// convergence bar.
pub fn train_bundle(cfg: &TrainConfig, maps: &[GridMap]) -> Result<Bundle, HarnessError> {
    let out = train_federated(cfg, maps, FaultPlan::default(), None)?;
    let sr = eval_greedy_sr(&out.policies, maps, cfg.max_steps)?;
    if sr < 0.96 {
        return Err(HarnessError::Unconverged { sr });
    }
    Ok(Bundle { policies: out.policies, maps: maps.to_vec() })
}

/// Inference-phase sweep over (BER, mode, persistence, guard) cells on a
/// converged bundle. PersistentMemory corrupts each agent's stored weights
/// once per repetition; TransientRead corrupts every weight read
/// independently. The guard screens weights against the clean bundle's
/// per-layer envelopes.
pub fn run_inference_sweep(spec: &ExperimentSpec, bundle: &Bundle) -> Result<Vec<ResultRow>, HarnessError> {
    spec.validate()?;
    if spec.phase != Phase::Inference {
        return Err(HarnessError::BadSpec("run_inference_sweep needs phase = inference".into()));
    }
    let sr = eval_greedy_sr(&bundle.policies, &bundle.maps, spec.train.max_steps)?;
    if sr < 0.96 {
        return Err(HarnessError::Unconverged { sr });
    }
    let detectors: Vec<RangeDetector> =
        bundle.policies.iter().map(build_range_detector).collect();

    let mut cells = Vec::new();
    for &ber in &spec.bers {
        for &mode in &spec.modes {
            for &pers in &spec.persistences {
                for &g in &spec.guard_axis {
                    cells.push((ber, mode, pers, g));
                }
            }
        }
    }

    let t0 = std::time::Instant::now();
    let max_steps = spec.train.max_steps;
    let per_cell: Vec<(Vec<f64>, Vec<f64>)> = thread_pool().install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(ci, &(ber, mode, pers, guard))| -> Result<(Vec<f64>, Vec<f64>), HarnessError> {
                let mut srs = Vec::with_capacity(spec.repetitions);
                let mut flips = Vec::with_capacity(spec.repetitions);
                for rep in 0..spec.repetitions {
                    let mut rng = cell_rng(spec.seed_base, ci as u64, rep as u64);
                    let mut ok = 0usize;
                    let mut nflips = 0usize;
                    for (a, p) in bundle.policies.iter().enumerate() {
                        let det = guard.then_some(&detectors[a]);
                        let outcome = match pers {
                            Persistence::PersistentMemory => {
                                let mut flat = p.flatten_params();
                                nflips +=
                                    inject(&mut flat, ber, mode, &mut rng).map_err(TrainError::from)?.len();
                                let mut corrupted = p.clone();
                                corrupted.load_params(&flat).map_err(TrainError::from)?;
                                rollout(&corrupted, &bundle.maps[a], max_steps, None, det)?
                            }
                            Persistence::TransientRead => rollout(
                                p,
                                &bundle.maps[a],
                                max_steps,
                                Some((ber, mode, &mut rng)),
                                det,
                            )?,
                        };
                        ok += (outcome == Outcome::ReachedGoal) as usize;
                    }
                    srs.push(ok as f64 / bundle.policies.len() as f64);
                    flips.push(nflips as f64);
                }
                Ok((srs, flips))
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let elapsed = t0.elapsed().as_secs_f64() / cells.len() as f64;

    Ok(cells
        .iter()
        .zip(&per_cell)
        .map(|(&(ber, mode, pers, guard), (srs, flips))| {
            row(
                0,
                ber,
                "agent_weights",
                mode_name(mode),
                persistence_name(pers),
                guard,
                srs,
                flips,
                elapsed,
            )
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub ber: f64,
    pub seed: u64,
    /// Episodes past the fault until the trailing window SR is back at 0.96;
    /// `None` when the extended budget ran out (censored, not an error).
    pub episodes_to_recover: Option<usize>,
}

/// Recovery-time study: a ServerState fault at the last configured fault
/// episode, then continued training on a doubled remaining budget. Each
/// repetition index is a fresh training seed.
pub fn run_convergence_study(spec: &ExperimentSpec, maps: &[GridMap]) -> Result<Vec<ConvergenceRow>, HarnessError> {
    spec.validate()?;
    let fault_ep = *spec
        .fault_episodes
        .iter()
        .max()
        .ok_or_else(|| HarnessError::BadSpec("fault_episodes axis is empty".into()))?;
    // Recovery from a heavy fault can take several times the remaining
    // pre-fault budget; give six of them before declaring a run censored.
    let horizon = spec.train.episodes + 6 * (spec.train.episodes - fault_ep);

    let jobs: Vec<(u64, f64)> = (0..spec.repetitions as u64)
        .flat_map(|s| spec.bers.iter().map(move |&b| (s, b)))
        .collect();
    let results: Vec<ConvergenceRow> = thread_pool().install(|| {
        (0..spec.repetitions as u64)
            .into_par_iter()
            .map(|seed_off| -> Result<Vec<ConvergenceRow>, HarnessError> {
                let cfg = TrainConfig { seed: spec.seed_base + seed_off, ..spec.train.clone() };
                let mut base = Trainer::new(&cfg, maps, FaultPlan::default(), None)?;
                base.run_to(fault_ep)?;
                let mut rows = Vec::new();
                for (ci, &ber) in spec.bers.iter().enumerate() {
                    let mut fork = base.clone();
                    let plan = FaultPlan::new(vec![FaultSpec {
                        location: FaultLocation::ServerState,
                        ber,
                        mode: FaultMode::Both,
                        timing: FaultTiming::Episode(fault_ep),
                        persistence: Persistence::PersistentMemory,
                        seed: cell_fault_seed(spec.seed_base, ci as u64, seed_off),
                    }]);
                    fork.set_plan(plan, horizon)?;
                    fork.run_to(horizon)?;
                    // Recovery is judged on post-fault episodes only: the first
                    // episode whose trailing window (up to 100 episodes, at
                    // least 20) of post-fault success fractions averages >= 0.96.
                    let n_agents = cfg.n_agents as f64;
                    let mut per_ep = vec![0.0f64; horizon - fault_ep];
                    for log in fork.logs() {
                        if log.episode > fault_ep && log.outcome == Outcome::ReachedGoal {
                            per_ep[log.episode - fault_ep - 1] += 1.0 / n_agents;
                        }
                    }
                    let mut recovered = None;
                    for end in 20..=per_ep.len() {
                        let start = end.saturating_sub(100);
                        let window = &per_ep[start..end];
                        if window.iter().sum::<f64>() / window.len() as f64 >= 0.96 {
                            recovered = Some(end);
                            break;
                        }
                    }
                    rows.push(ConvergenceRow {
                        ber,
                        seed: cfg.seed,
                        episodes_to_recover: recovered,
                    });
                }
                Ok(rows)
            })
            .collect::<Result<Vec<_>, _>>()
            .map(|v| v.into_iter().flatten().collect())
    })?;
    debug_assert_eq!(results.len(), jobs.len());
    Ok(results)
}

#[derive(Debug)]
pub struct MitigationReport {
    /// Greedy SR after the mitigated faulted run.
    pub final_sr: f64,
    pub detections: usize,
    pub guard_events: Vec<GuardEvent>,
    /// Detector verdicts raised across the clean control runs.
    pub clean_false_positives: usize,
}

/// Training-time mitigation evaluation: one guarded run with a ServerState
/// fault, plus `clean_runs` guarded fault-free runs counting spurious
/// verdicts.
pub fn run_mitigation_eval(
    cfg: &TrainConfig,
    maps: &[GridMap],
    detector: DetectorConfig,
    fault_episode: usize,
    ber: f64,
    clean_runs: usize,
) -> Result<MitigationReport, HarnessError> {
    let plan = FaultPlan::new(vec![FaultSpec {
        location: FaultLocation::ServerState,
        ber,
        mode: FaultMode::Both,
        timing: FaultTiming::Episode(fault_episode),
        persistence: Persistence::PersistentMemory,
        seed: splitmix(cfg.seed, 0x717),
    }]);
    let out = train_federated(cfg, maps, plan, Some((detector, None)))?;
    let final_sr = eval_greedy_sr(&out.policies, maps, cfg.max_steps)?;
    let detections =
        out.guard_events.iter().filter(|e| e.verdict != "no_fault").count();

    let false_positives: usize = thread_pool().install(|| {
        (0..clean_runs as u64)
            .into_par_iter()
            .map(|i| -> Result<usize, HarnessError> {
                let clean_cfg = TrainConfig { seed: splitmix(cfg.seed, 0xC1EA + i), ..cfg.clone() };
                let clean =
                    train_federated(&clean_cfg, maps, FaultPlan::default(), Some((detector, None)))?;
                Ok(clean.guard_events.iter().filter(|e| e.verdict != "no_fault").count())
            })
            .try_reduce(|| 0, |a, b| Ok(a + b))
    })?;

    Ok(MitigationReport {
        final_sr,
        detections,
        guard_events: out.guard_events,
        clean_false_positives: false_positives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> ExperimentSpec {
        ExperimentSpec {
            train: TrainConfig { n_agents: 2, episodes: 30, ..Default::default() },
            fault_episodes: vec![10],
            bers: vec![0.0, 1e-2],
            locations: vec![LocationKind::AgentWeights],
            modes: vec![FaultMode::Both],
            repetitions: 3,
            ..Default::default()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(small_spec().validate().is_ok());
        assert!(ExperimentSpec { repetitions: 0, ..small_spec() }.validate().is_err());
        assert!(ExperimentSpec { bers: vec![], ..small_spec() }.validate().is_err());
        assert!(ExperimentSpec { bers: vec![2.0], ..small_spec() }.validate().is_err());
        assert!(ExperimentSpec { fault_episodes: vec![99], ..small_spec() }.validate().is_err());
        let inf = ExperimentSpec { phase: Phase::Inference, persistences: vec![], ..small_spec() };
        assert!(inf.validate().is_err());
    }

    #[test]
    fn spec_toml_round_trip() {
        let spec = small_spec();
        let text = toml::to_string(&spec).unwrap();
        let back: ExperimentSpec = toml::from_str(&text).unwrap();
        assert_eq!(back.bers, spec.bers);
        assert_eq!(back.repetitions, spec.repetitions);
        assert_eq!(back.train.episodes, spec.train.episodes);
        // a minimal file relies on defaults
        let minimal: ExperimentSpec = toml::from_str("repetitions = 7").unwrap();
        assert_eq!(minimal.repetitions, 7);
        assert_eq!(minimal.bers.len(), 5);
    }

    #[test]
    fn training_sweep_is_deterministic_across_thread_counts() {
        let spec = small_spec();
        let maps: Vec<GridMap> = crate::gridworld::default_maps().into_iter().take(2).collect();
        std::env::set_var("FRLFI_THREADS", "1");
        let serial = run_training_sweep(&spec, &maps).unwrap();
        std::env::set_var("FRLFI_THREADS", "4");
        let parallel = run_training_sweep(&spec, &maps).unwrap();
        std::env::remove_var("FRLFI_THREADS");
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.mean_sr, b.mean_sr);
            assert_eq!(a.mean_flips, b.mean_flips);
        }
    }

    #[test]
    fn unconverged_bundle_is_refused() {
        let cfg = TrainConfig { n_agents: 2, episodes: 5, ..Default::default() };
        let maps: Vec<GridMap> = crate::gridworld::default_maps().into_iter().take(2).collect();
        match train_bundle(&cfg, &maps) {
            Err(HarnessError::Unconverged { .. }) => {}
            other => panic!("expected Unconverged, got {:?}", other.map(|_| "bundle")),
        }
    }

    #[test]
    fn heatmap_cell_count() {
        let episodes = vec![100, 900];
        let bers = vec![1e-3, 1e-2, 1e-1];
        let rows = vec![ResultRow {
            episode: 100,
            ber: 1e-3,
            location: "server_state".into(),
            mode: "both".into(),
            persistence: "persistent_memory".into(),
            guard: false,
            mean_sr: 0.5,
            sr_std: 0.0,
            ci_half: 0.0,
            mean_flips: 1.0,
            runtime_s: 0.0,
        }];
        let (svg, cells) = report::heatmap_svg(&rows, &episodes, &bers);
        assert_eq!(cells, 6);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn result_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.csv");
        let rows = vec![
            ResultRow {
                episode: 900,
                ber: 0.01,
                location: "server_state".into(),
                mode: "both".into(),
                persistence: "persistent_memory".into(),
                guard: false,
                mean_sr: 0.8125,
                sr_std: 0.25,
                ci_half: 0.07653,
                mean_flips: 46.2,
                runtime_s: 1.5,
            },
            ResultRow {
                episode: 100,
                ber: 1e-5,
                location: "agent_weights".into(),
                mode: "zero_to_one".into(),
                persistence: "transient_read".into(),
                guard: true,
                mean_sr: 1.0,
                sr_std: 0.0,
                ci_half: 0.0,
                mean_flips: 0.0,
                runtime_s: 0.0,
            },
        ];
        report::write_rows_csv(&path, &rows).unwrap();
        let back = report::read_rows_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.episode, b.episode);
            assert_eq!(a.ber, b.ber);
            assert_eq!(a.location, b.location);
            assert_eq!(a.mode, b.mode);
            assert_eq!(a.guard, b.guard);
            assert_eq!(a.mean_sr, b.mean_sr);
            assert_eq!(a.sr_std, b.sr_std);
            assert_eq!(a.ci_half, b.ci_half);
            assert_eq!(a.mean_flips, b.mean_flips);
        }
    }
}

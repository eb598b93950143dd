//! Federated Q-learning: per-agent TD(0) episodes, smoothing-average
//! aggregation with a decaying mixing coefficient, and the fault / guard
//! hooks threaded through the training loop.

use std::collections::VecDeque;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::faultinj::{
    inject, inject_with_draws, splitmix, FaultError, FaultLocation, FaultMode, FaultPlan,
    FaultPlanRun, FaultTiming, FlipRecord, InjectionLog, Persistence,
};
use crate::fxp::{get_bit, CodeTensor, QFormat};
use crate::gridworld::{GridError, GridMap, Observation, Outcome};
use crate::guard::{DetectorConfig, GuardError, GuardEvent, TrainingGuard};
use crate::policy::{select_action, ActionMode, PolicyError};
use crate::{Policy, Scalar};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config invalid: {0}")]
    BadConfig(String),
    #[error("aggregation input invalid: {0}")]
    BadAggregation(String),
    #[error("need one map per agent: {agents} agents, {maps} maps")]
    MapCount { agents: usize, maps: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Fxp(#[from] crate::fxp::FxpError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error(transparent)]
    Guard(#[from] GuardError),
}

/// A scheduled change of the communication interval: from `episode` onward
/// the interval becomes `base * multiplier`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CommChange {
    pub episode: usize,
    pub multiplier: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub n_agents: usize,
    pub episodes: usize,
    /// Aggregate after every `comm_interval` episodes.
    pub comm_interval: usize,
    pub comm_changes: Vec<CommChange>,
    pub gamma: f64,
    pub lr: f64,
    pub eps0: f64,
    pub eps_min: f64,
    pub eps_decay: f64,
    /// Initial self-weight of the smoothing average.
    pub alpha0: f64,
    /// Decay constant of the mixing schedule, in rounds.
    pub tau: f64,
    pub hidden: usize,
    pub fmt: QFormat,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_agents: 12,
            episodes: 1000,
            comm_interval: 1,
            comm_changes: Vec::new(),
            gamma: 0.9,
            // 0.05 keeps per-episode weight motion above the Q(1,2,5)
            // half-LSB so updates survive the requantization at each
            // aggregation barrier; 0.01 stalls below 70% success
            lr: 0.05,
            eps0: 1.0,
            eps_min: 0.01,
            eps_decay: 0.997,
            alpha0: 0.9,
            tau: 100.0,
            hidden: 64,
            fmt: QFormat::new(2, 5).unwrap(),
            max_steps: crate::gridworld::MAX_STEPS,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if self.n_agents == 0 {
            return bad("n_agents must be >= 1".into());
        }
        if self.episodes == 0 {
            return bad("episodes must be >= 1".into());
        }
        if self.comm_interval == 0 {
            return bad("comm_interval must be >= 1".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma {} outside (0, 1)", self.gamma));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive and finite", self.lr));
        }
        for (name, e) in [("eps0", self.eps0), ("eps_min", self.eps_min)] {
            if !(0.0..=1.0).contains(&e) {
                return bad(format!("{name} {e} outside [0, 1]"));
            }
        }
        if self.eps0 < self.eps_min {
            return bad("eps0 must be >= eps_min".into());
        }
        if !(self.eps_decay > 0.0 && self.eps_decay <= 1.0) {
            return bad(format!("eps_decay {} outside (0, 1]", self.eps_decay));
        }
        if self.n_agents >= 2 {
            let floor = 1.0 / self.n_agents as f64;
            if !(self.alpha0 >= floor && self.alpha0 <= 1.0) {
                return bad(format!("alpha0 {} outside [1/n, 1]", self.alpha0));
            }
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau {} must be positive", self.tau));
        }
        if self.hidden == 0 {
            return bad("hidden must be >= 1".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be >= 1".into());
        }
        for c in &self.comm_changes {
            if c.multiplier == 0 {
                return bad("comm change multiplier must be >= 1".into());
            }
            if c.episode >= self.episodes {
                return bad(format!("comm change at episode {} beyond run", c.episode));
            }
        }
        Ok(())
    }

    pub fn dims(&self) -> Vec<usize> {
        vec![4, self.hidden, 4]
    }

    /// Exploration rate at a training episode.
    pub fn epsilon_for(&self, episode: usize) -> f64 {
        (self.eps0 * self.eps_decay.powi(episode as i32)).max(self.eps_min)
    }

    /// Mixing coefficient at aggregation round `k` (0-based): starts at
    /// `alpha0` and decays exponentially toward the uniform weight `1/n`.
    pub fn alpha_for(&self, k: usize) -> f64 {
        let floor = 1.0 / self.n_agents as f64;
        floor + (self.alpha0 - floor) * (-(k as f64) / self.tau).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Observation,
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub transitions: Vec<Transition>,
    /// Discounted return from the start state.
    pub ret: f64,
    pub outcome: Outcome,
}

/// One activation-read fault armed for the current episode.
pub struct ActiveActFault {
    pub spec_index: usize,
    pub location: FaultLocation,
    pub ber: f64,
    pub mode: FaultMode,
    pub rng: ChaCha12Rng,
    pub flips: Vec<(usize, u32, bool)>, // offset, bit, new value
}

/// Roll one episode under the stored-code policy. Activation faults, if any,
/// corrupt every layer's quantized activations on each forward pass.
pub fn run_episode(
    policy: &Policy,
    map: &GridMap,
    mode: ActionMode,
    gamma: f64,
    max_steps: usize,
    rng: &mut ChaCha12Rng,
    act_faults: &mut [ActiveActFault],
) -> Result<EpisodeResult, TrainError> {
    let mut pos = map.source();
    let mut transitions = Vec::new();
    let mut ret = 0.0;
    let mut discount = 1.0;
    let mut outcome = Outcome::Timeout;
    for _ in 0..max_steps {
        let obs = map.observe(pos)?;
        let values = if act_faults.is_empty() {
            policy.forward(&obs)?
        } else {
            let input = obs.as_f64();
            let mut hook = |_layer: usize, acts: &mut CodeTensor| {
                for f in act_faults.iter_mut() {
                    let flips = inject(acts, f.ber, f.mode, &mut f.rng).expect("ber validated");
                    let fmt = acts.fmt();
                    f.flips.extend(
                        flips
                            .into_iter()
                            .map(|(o, b)| (o, b, get_bit(acts.codes()[o], b, fmt))),
                    );
                }
            };
            policy.forward_hooked(&input, None, Some(&mut hook))?
        };
        let action = crate::gridworld::ACTIONS[select_action(&values, mode, rng)?];
        let step = map.step(pos, action)?;
        let next_obs = map.observe(step.next_pos)?;
        transitions.push(Transition {
            obs,
            action: action as usize,
            reward: step.reward,
            next_obs,
            terminal: step.terminal,
        });
        ret += discount * step.reward;
        discount *= gamma;
        if step.terminal {
            outcome = step.outcome;
            break;
        }
        pos = step.next_pos;
    }
    Ok(EpisodeResult { transitions, ret, outcome })
}

/// Loss and per-layer parameter gradients of the one-step TD objective
/// `0.5 * (Q(s, a) - target)^2`, differentiated through the full-precision
/// master weights with the target held constant.
pub fn td_grads(
    policy: &Policy,
    input: &[Scalar],
    action: usize,
    target: Scalar,
) -> (Scalar, Vec<Vec<Scalar>>) {
    let dims = policy.dims();
    let last = dims.len() - 2;
    let mut xs: Vec<Vec<Scalar>> = vec![input.to_vec()];
    let mut zs: Vec<Vec<Scalar>> = Vec::new();
    for l in 0..=last {
        let (fi, fo) = (dims[l], dims[l + 1]);
        let m = policy.master(l);
        let mut z = vec![0.0; fo];
        for o in 0..fo {
            let mut acc = m[fi * fo + o];
            for (i, &xi) in xs[l].iter().enumerate() {
                acc += m[o * fi + i] * xi;
            }
            z[o] = acc;
        }
        let a: Vec<Scalar> = if l < last { z.iter().map(|&v| v.max(0.0)).collect() } else { z.clone() };
        zs.push(z);
        xs.push(a);
    }
    let q = xs[last + 1][action];
    let delta = q - target;
    let loss = 0.5 * delta * delta;

    let mut grads: Vec<Vec<Scalar>> =
        (0..=last).map(|l| vec![0.0; (dims[l] + 1) * dims[l + 1]]).collect();
    let mut dz = vec![0.0; dims[last + 1]];
    dz[action] = delta;
    for l in (0..=last).rev() {
        let (fi, fo) = (dims[l], dims[l + 1]);
        let m = policy.master(l);
        let mut dx = vec![0.0; fi];
        for o in 0..fo {
            let d = dz[o];
            if d == 0.0 {
                continue;
            }
            for i in 0..fi {
                grads[l][o * fi + i] = d * xs[l][i];
                dx[i] += m[o * fi + i] * d;
            }
            grads[l][fi * fo + o] = d;
        }
        if l > 0 {
            dz = dx
                .iter()
                .zip(&zs[l - 1])
                .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
                .collect();
        }
    }
    (loss, grads)
}

/// One-step Q-learning over an episode's transitions, applied in order. The
/// bootstrap target is computed from the master weights as they stand before
/// each individual update. Returns the summed TD loss. The caller re-quantizes
/// codes afterwards.
pub fn td_update(
    policy: &mut Policy,
    transitions: &[Transition],
    gamma: f64,
    lr: f64,
) -> Result<Scalar, TrainError> {
    let mut total_loss = 0.0;
    for t in transitions {
        let input = t.obs.as_f64();
        let target = if t.terminal {
            t.reward
        } else {
            let next = policy.forward_master(&t.next_obs.as_f64())?;
            t.reward + gamma * next.iter().cloned().fold(Scalar::NEG_INFINITY, Scalar::max)
        };
        let (loss, grads) = td_grads(policy, &input, t.action, target);
        total_loss += loss;
        // master weights model fixed-point storage: keep them on the
        // representable interval so corrupted inputs cannot blow the
        // real-valued forward pass up to infinity
        let fmt = policy.fmt();
        let lo: Scalar = crate::fxp::dequantize(fmt.min_code(), fmt).expect("format bound");
        let hi: Scalar = crate::fxp::dequantize(fmt.max_code(), fmt).expect("format bound");
        for (l, g) in grads.iter().enumerate() {
            for (w, &gi) in policy.master_mut(l).iter_mut().zip(g) {
                *w = (*w - lr * gi).clamp(lo, hi);
            }
        }
    }
    Ok(total_loss)
}

/// Smoothing average: each agent keeps weight `alpha` on itself and spreads
/// `1 - alpha` uniformly over the others. Computed on the dequantized values
/// in a fixed agent-ascending order, then re-quantized.
pub fn aggregate(params: &[CodeTensor], alpha: f64) -> Result<Vec<CodeTensor>, TrainError> {
    let n = params.len();
    if n < 2 {
        return Err(TrainError::BadAggregation(format!("need >= 2 agents, got {n}")));
    }
    let fmt = params[0].fmt();
    let len = params[0].len();
    for (i, p) in params.iter().enumerate() {
        if p.fmt() != fmt || p.len() != len {
            return Err(TrainError::BadAggregation(format!("tensor {i} shape or format differs")));
        }
    }
    let floor = 1.0 / n as f64;
    if !(alpha >= floor - 1e-12 && alpha <= 1.0 + 1e-12) {
        return Err(TrainError::BadAggregation(format!("alpha {alpha} outside [1/n, 1]")));
    }
    let beta = (1.0 - alpha) / (n - 1) as f64;

    let reals: Vec<Vec<Scalar>> = params.iter().map(|p| p.to_reals()).collect();
    let mut totals = vec![0.0; len];
    for r in &reals {
        for (t, &v) in totals.iter_mut().zip(r) {
            *t += v;
        }
    }
    let mut out = Vec::with_capacity(n);
    for r in &reals {
        let mixed: Vec<Scalar> = r
            .iter()
            .zip(&totals)
            .map(|(&own, &tot)| alpha * own + beta * (tot - own))
            .collect();
        out.push(CodeTensor::from_reals(&mixed, fmt, vec![len])?);
    }
    Ok(out)
}

/// Element-wise mean of a set of parameter tensors, re-quantized. Used as the
/// server-side snapshot for checkpointing.
pub fn mean_params(params: &[CodeTensor]) -> Result<CodeTensor, TrainError> {
    let n = params.len();
    if n == 0 {
        return Err(TrainError::BadAggregation("empty parameter set".into()));
    }
    let fmt = params[0].fmt();
    let len = params[0].len();
    let mut acc = vec![0.0f64; len];
    for p in params {
        for (a, v) in acc.iter_mut().zip(p.to_reals::<Scalar>()) {
            *a += v / n as f64;
        }
    }
    Ok(CodeTensor::from_reals(&acc, fmt, vec![len])?)
}

/// One row of the per-episode training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub agent: usize,
    pub ret: f64,
    pub outcome: Outcome,
    pub epsilon: f64,
    pub alpha: f64,
    pub flips_injected: usize,
    pub sr_window100: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub policies: Vec<Policy>,
    pub logs: Vec<EpisodeLog>,
    pub injections: InjectionLog,
    pub guard_events: Vec<GuardEvent>,
    pub rounds: u64,
}

fn stream(seed: u64, a: u64, b: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(splitmix(splitmix(seed, a), b))
}

/// Incremental federated training state. Cloneable, so a fault-free prefix
/// can be trained once and forked into many faulted continuations.
#[derive(Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    maps: Vec<GridMap>,
    policies: Vec<Policy>,
    plan_run: FaultPlanRun,
    guard: Option<TrainingGuard>,
    logs: Vec<EpisodeLog>,
    windows: Vec<VecDeque<bool>>,
    interval: usize,
    rounds: u64,
    next_episode: usize,
}

impl Trainer {
    pub fn new(
        cfg: &TrainConfig,
        maps: &[GridMap],
        plan: FaultPlan,
        guard_cfg: Option<(DetectorConfig, Option<PathBuf>)>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        plan.validate(cfg.n_agents, cfg.episodes)?;
        if maps.len() != cfg.n_agents {
            return Err(TrainError::MapCount { agents: cfg.n_agents, maps: maps.len() });
        }
        let dims = cfg.dims();
        let n = cfg.n_agents;
        let policies: Vec<Policy> = (0..n)
            .map(|a| Policy::new_random(&dims, cfg.fmt, &mut stream(cfg.seed, 1 + a as u64, 0)))
            .collect();
        let guard = match guard_cfg {
            Some((dcfg, path)) => Some(TrainingGuard::new(dcfg, n, path)?),
            None => None,
        };
        Ok(Self {
            cfg: cfg.clone(),
            maps: maps.to_vec(),
            policies,
            plan_run: FaultPlanRun::new(plan),
            guard,
            logs: Vec::new(),
            windows: vec![VecDeque::with_capacity(100); n],
            interval: cfg.comm_interval,
            rounds: 0,
            next_episode: 0,
        })
    }

    pub fn next_episode(&self) -> usize {
        self.next_episode
    }

    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    pub fn policies(&self) -> &[Policy] {
        &self.policies
    }

    pub fn maps(&self) -> &[GridMap] {
        &self.maps
    }

    pub fn logs(&self) -> &[EpisodeLog] {
        &self.logs
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Replace the fault plan (validated against remaining episodes) without
    /// touching learned state. Used when forking a clean prefix into several
    /// faulted continuations.
    pub fn set_plan(&mut self, plan: FaultPlan, horizon: usize) -> Result<(), TrainError> {
        plan.validate(self.cfg.n_agents, horizon)?;
        self.plan_run = FaultPlanRun::new(plan);
        Ok(())
    }

    /// Mean success rate over each agent's trailing 100 training episodes.
    pub fn window_sr(&self) -> f64 {
        let mut total = 0.0;
        for w in &self.windows {
            if w.is_empty() {
                return 0.0;
            }
            total += w.iter().filter(|&&s| s).count() as f64 / w.len() as f64;
        }
        total / self.windows.len() as f64
    }

    /// Run episodes until `episode` (exclusive).
    pub fn run_to(&mut self, episode: usize) -> Result<(), TrainError> {
        while self.next_episode < episode {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutput {
        let guard_events = self.guard.map(|g| g.events().to_vec()).unwrap_or_default();
        TrainOutput {
            policies: self.policies,
            logs: self.logs,
            injections: self.plan_run.into_log(),
            guard_events,
            rounds: self.rounds,
        }
    }

    /// One training episode for every agent, followed by the aggregation
    /// barrier if the communication interval elapses.
    pub fn step(&mut self) -> Result<(), TrainError> {
        let cfg = &self.cfg;
        let n = cfg.n_agents;
        let ep = self.next_episode;
        let plan_run = &mut self.plan_run;
        let policies = &mut self.policies;
        for c in &cfg.comm_changes {
            if c.episode == ep {
                self.interval = cfg.comm_interval * c.multiplier;
            }
        }
        let eps = cfg.epsilon_for(ep);
        let alpha_now = cfg.alpha_for(self.rounds as usize);
        let mut rows = Vec::with_capacity(n);
        let mut returns = Vec::with_capacity(n);

        for a in 0..n {
            let mut flips_this = 0usize;

            // persistent stored-weight corruption fires just before the episode
            let weight_faults = plan_run.pending(|s| {
                s.location == FaultLocation::AgentWeights(a) && s.timing == FaultTiming::Episode(ep)
            });
            let mut restore: Option<CodeTensor> = None;
            for (idx, spec) in weight_faults {
                let before = policies[a].flatten_params();
                if spec.persistence == Persistence::TransientRead && restore.is_none() {
                    restore = Some(before.clone());
                }
                let mut corrupted = before.clone();
                let flips = inject(&mut corrupted, spec.ber, spec.mode, &mut plan_run.rng_for(idx))?;
                flips_this += flips.len();
                plan_run.record(idx, &flips, ep, &before, &corrupted);
                policies[a].load_params(&corrupted)?;
            }

            // activation-read corruption armed for this episode
            let mut act_faults: Vec<ActiveActFault> = plan_run
                .pending(|s| {
                    s.location == FaultLocation::ActivationRead(a)
                        && s.timing == FaultTiming::Episode(ep)
                })
                .into_iter()
                .map(|(idx, s)| ActiveActFault {
                    spec_index: idx,
                    location: s.location,
                    ber: s.ber,
                    mode: s.mode,
                    rng: plan_run.rng_for(idx),
                    flips: Vec::new(),
                })
                .collect();

            let mut ep_rng = stream(cfg.seed, 1 + a as u64, 1 + ep as u64);
            let result = run_episode(
                &policies[a],
                &self.maps[a],
                ActionMode::EpsilonGreedy(eps),
                cfg.gamma,
                cfg.max_steps,
                &mut ep_rng,
                &mut act_faults,
            )?;
            for f in act_faults {
                flips_this += f.flips.len();
                let records = f
                    .flips
                    .into_iter()
                    .map(|(offset, bit, new_bit)| FlipRecord {
                        location: f.location,
                        offset,
                        bit,
                        old_bit: !new_bit,
                        new_bit,
                        time: ep,
                    })
                    .collect();
                plan_run.record_prepared(f.spec_index, records);
            }
            if let Some(clean) = restore {
                policies[a].load_params(&clean)?;
            }

            td_update(&mut policies[a], &result.transitions, cfg.gamma, cfg.lr)?;
            policies[a].sync_codes();

            let w = &mut self.windows[a];
            if w.len() == 100 {
                w.pop_front();
            }
            w.push_back(result.outcome == Outcome::ReachedGoal);
            let sr = w.iter().filter(|&&s| s).count() as f64 / w.len() as f64;

            returns.push(result.ret);
            rows.push(EpisodeLog {
                episode: ep,
                agent: a,
                ret: result.ret,
                outcome: result.outcome,
                epsilon: eps,
                alpha: alpha_now,
                flips_injected: flips_this,
                sr_window100: sr,
            });
        }

        if let Some(g) = self.guard.as_mut() {
            g.observe_episode(ep, &returns, policies)?;
        }

        if n >= 2 && (ep + 1) % self.interval == 0 {
            let alpha = cfg.alpha_for(self.rounds as usize);
            self.rounds += 1;

            // uploads, with any pending agent-to-server link corruption
            let mut uploads: Vec<CodeTensor> =
                policies.iter().map(|p| p.flatten_params()).collect();
            for a in 0..n {
                let pend = plan_run.pending(|s| {
                    matches!(s.location, FaultLocation::AgentUpload(ua) if ua == a)
                        && matches!(s.timing, FaultTiming::Episode(e) if e <= ep)
                });
                for (idx, spec) in pend {
                    let before = uploads[a].clone();
                    let flips =
                        inject(&mut uploads[a], spec.ber, spec.mode, &mut plan_run.rng_for(idx))?;
                    rows[a].flips_injected += flips.len();
                    plan_run.record(idx, &flips, ep, &before, &uploads[a]);
                }
            }

            let mut outputs = aggregate(&uploads, alpha)?;

            // checkpoint the clean aggregate before any server-side fault hits
            if let Some(g) = self.guard.as_mut() {
                if g.wants_checkpoint(self.rounds) {
                    let server = mean_params(&outputs)?;
                    g.maybe_checkpoint(self.rounds, &server, &cfg.dims(), ep);
                }
            }

            // server-memory corruption: one Bernoulli pattern, every copy
            let pend = plan_run.pending(|s| {
                s.location == FaultLocation::ServerState
                    && matches!(s.timing, FaultTiming::Episode(e) if e <= ep)
            });
            for (idx, spec) in pend {
                let mut rng = plan_run.rng_for(idx);
                let width = cfg.fmt.total_bits() as usize;
                let draws: Vec<f64> =
                    (0..outputs[0].len() * width).map(|_| rand::Rng::gen(&mut rng)).collect();
                let before = outputs[0].clone();
                let mut all_flips = Vec::new();
                for (a, out) in outputs.iter_mut().enumerate() {
                    let flips = inject_with_draws(out, &draws, spec.ber, spec.mode);
                    rows[a].flips_injected += flips.len();
                    if a == 0 {
                        all_flips = flips;
                    }
                }
                plan_run.record(idx, &all_flips, ep, &before, &outputs[0]);
            }

            // broadcast-link corruption: independent per agent
            let pend = plan_run.pending(|s| {
                s.location == FaultLocation::ServerBroadcast
                    && matches!(s.timing, FaultTiming::Episode(e) if e <= ep)
            });
            for (idx, spec) in pend {
                let mut rng = plan_run.rng_for(idx);
                let mut records = Vec::new();
                for (a, out) in outputs.iter_mut().enumerate() {
                    let flips = inject(out, spec.ber, spec.mode, &mut rng)?;
                    rows[a].flips_injected += flips.len();
                    let fmt = out.fmt();
                    records.extend(flips.into_iter().map(|(offset, bit)| FlipRecord {
                        location: spec.location,
                        offset,
                        bit,
                        new_bit: get_bit(out.codes()[offset], bit, fmt),
                        old_bit: !get_bit(out.codes()[offset], bit, fmt),
                        time: ep,
                    }));
                }
                plan_run.record_prepared(idx, records);
            }

            for (p, out) in policies.iter_mut().zip(&outputs) {
                p.load_params(out)?;
            }
        }

        self.logs.extend(rows);
        self.next_episode += 1;
        Ok(())
    }
}

/// Full federated training run. `maps[a]` is agent `a`'s environment. The
/// fault plan fires as episodes and aggregation barriers pass; the guard, if
/// configured, watches returns and rolls back from server checkpoints.
pub fn train_federated(
    cfg: &TrainConfig,
    maps: &[GridMap],
    plan: FaultPlan,
    guard_cfg: Option<(DetectorConfig, Option<PathBuf>)>,
) -> Result<TrainOutput, TrainError> {
    let mut t = Trainer::new(cfg, maps, plan, guard_cfg)?;
    t.run_to(cfg.episodes)?;
    Ok(t.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::MlpPolicy;
    use approx::assert_relative_eq;

    fn fmt() -> QFormat {
        QFormat::new(2, 5).unwrap()
    }

    fn small_policy(seed: u64) -> Policy {
        MlpPolicy::new_random(&[4, 8, 4], fmt(), &mut ChaCha12Rng::seed_from_u64(seed))
    }

    #[test]
    fn epsilon_schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.epsilon_for(0), 1.0);
        assert_relative_eq!(cfg.epsilon_for(1), 0.997);
        assert_relative_eq!(cfg.epsilon_for(100), 0.997f64.powi(100));
        // far past the crossover the floor holds
        assert_eq!(cfg.epsilon_for(5000), 0.01);
    }

    #[test]
    fn alpha_schedule_values() {
        let cfg = TrainConfig { n_agents: 12, alpha0: 0.9, tau: 100.0, ..Default::default() };
        let floor = 1.0 / 12.0;
        assert_relative_eq!(cfg.alpha_for(0), 0.9);
        assert_relative_eq!(cfg.alpha_for(100), floor + (0.9 - floor) * (-1.0f64).exp());
        assert!((cfg.alpha_for(5000) - floor).abs() < 1e-6);
        // monotone decreasing toward the floor
        for k in 0..50 {
            assert!(cfg.alpha_for(k + 1) < cfg.alpha_for(k));
            assert!(cfg.alpha_for(k) >= floor);
        }
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { gamma: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { eps0: 0.0, eps_min: 0.5, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { alpha0: 0.01, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { comm_interval: 0, ..ok.clone() }.validate().is_err());
        assert!(
            TrainConfig { comm_changes: vec![CommChange { episode: 5000, multiplier: 2 }], ..ok }
                .validate()
                .is_err()
        );
    }

    /// An all-zero policy always picks action 0 (Up). On a column map the
    /// discounted return of the straight path is checkable by hand.
    #[test]
    fn run_episode_straight_path_return() {
        let text = "\
G.........\n\
..........\n\
..........\n\
S.........\n\
..........\n\
..........\n\
..........\n\
..........\n\
..........\n\
..........";
        let map = GridMap::load(text, 0).unwrap();
        let mut p = small_policy(1);
        for l in 0..p.n_layers() {
            p.master_mut(l).iter_mut().for_each(|w| *w = 0.0);
        }
        p.sync_codes();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let r = run_episode(&p, &map, ActionMode::Greedy, 0.9, 200, &mut rng, &mut []).unwrap();
        assert_eq!(r.outcome, Outcome::ReachedGoal);
        assert_eq!(r.transitions.len(), 3);
        // two approach rewards of 0.1 then the goal reward of 1
        assert_relative_eq!(r.ret, 0.1 + 0.9 * 0.1 + 0.81 * 1.0);
        assert!(r.transitions[2].terminal);
        assert_eq!(r.transitions[0].reward, 0.1);
    }

    #[test]
    fn run_episode_gamma_zero_keeps_first_reward() {
        let text = "\
H.........\n\
S.........\n\
..........\n\
..........\n\
..........\n\
..........\n\
..........\n\
..........\n\
..........\n\
.........G";
        let map = GridMap::load(text, 0).unwrap();
        let mut p = small_policy(2);
        for l in 0..p.n_layers() {
            p.master_mut(l).iter_mut().for_each(|w| *w = 0.0);
        }
        p.sync_codes();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let r = run_episode(&p, &map, ActionMode::Greedy, 0.0, 200, &mut rng, &mut []).unwrap();
        assert_eq!(r.outcome, Outcome::HitHell);
        assert_eq!(r.ret, -1.0);
        assert_eq!(r.transitions.len(), 1);
    }

    #[test]
    fn td_update_zero_lr_is_noop() {
        let mut p = small_policy(3);
        let before: Vec<Vec<f64>> = (0..p.n_layers()).map(|l| p.master(l).to_vec()).collect();
        let t = Transition {
            obs: Observation([1, 0, -1, 0]),
            action: 2,
            reward: 1.0,
            next_obs: Observation([0, 0, 0, 0]),
            terminal: true,
        };
        // lr must be > 0 by config validation, but td_update itself accepts 0
        td_update(&mut p, &[t], 0.9, 0.0).unwrap();
        for l in 0..p.n_layers() {
            assert_eq!(p.master(l), &before[l][..]);
        }
    }

    #[test]
    fn td_update_moves_q_toward_target() {
        let mut p = small_policy(4);
        let obs = Observation([0, 1, 0, -1]);
        let t = Transition { obs, action: 1, reward: 1.0, next_obs: obs, terminal: true };
        let q0 = p.forward_master(&obs.as_f64()).unwrap()[1];
        for _ in 0..200 {
            td_update(&mut p, &[t], 0.9, 0.05).unwrap();
        }
        let q1 = p.forward_master(&obs.as_f64()).unwrap()[1];
        assert!((q1 - 1.0).abs() < (q0 - 1.0).abs());
        assert!((q1 - 1.0).abs() < 0.01, "q converged to {q1}");
    }

    /// Analytic TD gradients against central finite differences on the master
    /// weights, over several random networks and transitions.
    #[test]
    fn td_gradient_matches_finite_differences() {
        let h = 1e-6;
        for seed in 0..20u64 {
            let mut p = MlpPolicy::new_random(
                &[4, 8, 4],
                fmt(),
                &mut ChaCha12Rng::seed_from_u64(1000 + seed),
            );
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let input: Vec<f64> =
                (0..4).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
            let action = rand::Rng::gen_range(&mut rng, 0..4usize);
            let target: f64 = rand::Rng::gen_range(&mut rng, -1.0..1.0);
            let (_, grads) = td_grads(&p, &input, action, target);

            let loss = |p: &Policy| {
                let q = p.forward_master(&input).unwrap()[action];
                0.5 * (q - target) * (q - target)
            };
            for l in 0..p.n_layers() {
                for j in 0..grads[l].len() {
                    let orig = p.master(l)[j];
                    p.master_mut(l)[j] = orig + h;
                    let up = loss(&p);
                    p.master_mut(l)[j] = orig - h;
                    let down = loss(&p);
                    p.master_mut(l)[j] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let analytic = grads[l][j];
                    let denom = analytic.abs().max(numeric.abs());
                    if denom < 1e-7 {
                        continue;
                    }
                    assert!(
                        (analytic - numeric).abs() / denom < 1e-4,
                        "seed {seed} layer {l} param {j}: analytic {analytic} numeric {numeric}"
                    );
                }
            }
        }
    }

    fn tensor(vals: &[f64], f: QFormat) -> CodeTensor {
        CodeTensor::from_reals(vals, f, vec![vals.len()]).unwrap()
    }

    #[test]
    fn aggregate_identical_inputs_fixed_point() {
        let f = fmt();
        let t = tensor(&[0.5, -1.25, 3.0], f);
        for &alpha in &[1.0 / 3.0, 0.5, 0.9, 1.0] {
            let out = aggregate(&[t.clone(), t.clone(), t.clone()], alpha).unwrap();
            for o in out {
                assert_eq!(o.codes(), t.codes(), "alpha {alpha}");
            }
        }
    }

    #[test]
    fn aggregate_alpha_one_keeps_own_params() {
        let f = fmt();
        let a = tensor(&[1.0, -2.0], f);
        let b = tensor(&[0.25, 3.5], f);
        let out = aggregate(&[a.clone(), b.clone()], 1.0).unwrap();
        assert_eq!(out[0].codes(), a.codes());
        assert_eq!(out[1].codes(), b.codes());
    }

    /// At alpha = 1/n the smoothing average is the plain mean. Values are
    /// chosen exactly representable so the check is exact.
    #[test]
    fn aggregate_uniform_alpha_is_plain_mean() {
        let f = QFormat::new(4, 11).unwrap();
        let a = tensor(&[0.0, 1.5], f);
        let b = tensor(&[3.0, 0.0], f);
        let c = tensor(&[6.0, -1.5], f);
        let out = aggregate(&[a, b, c], 1.0 / 3.0).unwrap();
        let mean = tensor(&[3.0, 0.0], f);
        for o in &out {
            assert_eq!(o.codes(), mean.codes());
        }
    }

    /// Aggregation outputs stay inside the convex hull of the inputs, up to
    /// half an LSB of requantization.
    #[test]
    fn aggregate_outputs_stay_in_convex_hull() {
        let f = fmt();
        let half_lsb = f.lsb::<f64>() / 2.0;
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n = rand::Rng::gen_range(&mut rng, 2..6usize);
            let len = rand::Rng::gen_range(&mut rng, 1..20usize);
            let params: Vec<CodeTensor> = (0..n)
                .map(|_| {
                    let vals: Vec<f64> =
                        (0..len).map(|_| rand::Rng::gen_range(&mut rng, -3.9..3.9)).collect();
                    tensor(&vals, f)
                })
                .collect();
            let alpha = rand::Rng::gen_range(&mut rng, 1.0 / n as f64..1.0);
            let out = aggregate(&params, alpha).unwrap();
            for j in 0..len {
                let lo = params.iter().map(|p| p.to_reals()[j]).fold(f64::INFINITY, f64::min);
                let hi = params.iter().map(|p| p.to_reals()[j]).fold(f64::NEG_INFINITY, f64::max);
                for o in &out {
                    let v: f64 = o.to_reals()[j];
                    assert!(v >= lo - half_lsb && v <= hi + half_lsb, "{v} not in [{lo}, {hi}]");
                }
            }
        }
    }

    #[test]
    fn aggregate_is_permutation_equivariant() {
        let f = fmt();
        let a = tensor(&[1.0, 0.5], f);
        let b = tensor(&[-0.5, 2.0], f);
        let c = tensor(&[0.25, -1.0], f);
        let fwd = aggregate(&[a.clone(), b.clone(), c.clone()], 0.6).unwrap();
        let rev = aggregate(&[c, b, a], 0.6).unwrap();
        assert_eq!(fwd[0].codes(), rev[2].codes());
        assert_eq!(fwd[1].codes(), rev[1].codes());
        assert_eq!(fwd[2].codes(), rev[0].codes());
    }

    #[test]
    fn aggregate_rejects_bad_inputs() {
        let f = fmt();
        let a = tensor(&[1.0], f);
        assert!(aggregate(&[a.clone()], 1.0).is_err());
        assert!(aggregate(&[a.clone(), a.clone()], 0.1).is_err());
        assert!(aggregate(&[a.clone(), a], 1.5).is_err());
    }

    #[test]
    fn train_is_deterministic() {
        let cfg = TrainConfig {
            n_agents: 3,
            episodes: 25,
            comm_interval: 2,
            seed: 42,
            ..Default::default()
        };
        let maps: Vec<GridMap> = crate::gridworld::default_maps().into_iter().take(3).collect();
        let run = || train_federated(&cfg, &maps, FaultPlan::default(), None).unwrap();
        let (x, y) = (run(), run());
        assert_eq!(x.logs, y.logs);
        assert_eq!(x.rounds, y.rounds);
        for (p, q) in x.policies.iter().zip(&y.policies) {
            assert_eq!(p.flatten_params().codes(), q.flatten_params().codes());
        }
    }

    #[test]
    fn single_agent_never_aggregates() {
        let cfg = TrainConfig { n_agents: 1, episodes: 10, seed: 7, ..Default::default() };
        let maps: Vec<GridMap> = crate::gridworld::default_maps().into_iter().take(1).collect();
        let out = train_federated(&cfg, &maps, FaultPlan::default(), None).unwrap();
        assert_eq!(out.rounds, 0);
        assert_eq!(out.logs.len(), 10);
    }

    #[test]
    fn comm_interval_change_takes_effect() {
        let base = TrainConfig { n_agents: 2, episodes: 20, comm_interval: 1, seed: 3, ..Default::default() };
        let maps: Vec<GridMap> = crate::gridworld::default_maps().into_iter().take(2).collect();
        let plain = train_federated(&base, &maps, FaultPlan::default(), None).unwrap();
        assert_eq!(plain.rounds, 20);

        let changed = TrainConfig {
            comm_changes: vec![CommChange { episode: 10, multiplier: 2 }],
            ..base
        };
        let out = train_federated(&changed, &maps, FaultPlan::default(), None).unwrap();
        // 10 rounds in the first half, then every 2 episodes: 5 more
        assert_eq!(out.rounds, 15);
    }

    #[test]
    fn transient_weight_fault_leaves_stored_codes_clean() {
        use crate::faultinj::FaultSpec;
        let cfg = TrainConfig { n_agents: 1, episodes: 3, lr: 1e-12, eps0: 0.0, eps_min: 0.0, seed: 5, ..Default::default() };
        let maps: Vec<GridMap> = crate::gridworld::default_maps().into_iter().take(1).collect();
        let clean = train_federated(&cfg, &maps, FaultPlan::default(), None).unwrap();
        let plan = FaultPlan::new(vec![FaultSpec {
            location: FaultLocation::AgentWeights(0),
            ber: 0.05,
            mode: FaultMode::Both,
            timing: FaultTiming::Episode(1),
            persistence: Persistence::TransientRead,
            seed: 99,
        }]);
        let faulted = train_federated(&cfg, &maps, plan, None).unwrap();
        assert!(!faulted.injections.is_empty());
        // with a negligible learning rate the restored codes match the clean run
        assert_eq!(
            clean.policies[0].flatten_params().codes(),
            faulted.policies[0].flatten_params().codes()
        );
    }

    #[test]
    fn injection_log_records_upload_fault_once() {
        use crate::faultinj::FaultSpec;
        let cfg = TrainConfig { n_agents: 2, episodes: 6, comm_interval: 2, seed: 11, ..Default::default() };
        let maps: Vec<GridMap> = crate::gridworld::default_maps().into_iter().take(2).collect();
        let plan = FaultPlan::new(vec![FaultSpec {
            location: FaultLocation::AgentUpload(1),
            ber: 0.01,
            mode: FaultMode::ZeroToOne,
            timing: FaultTiming::Episode(2),
            persistence: Persistence::PersistentMemory,
            seed: 4,
        }]);
        let out = train_federated(&cfg, &maps, plan, None).unwrap();
        assert!(!out.injections.is_empty());
        // the fault fires at the first barrier at or after episode 2
        assert!(out.injections.iter().all(|r| r.time == 3));
        // zero-to-one flips only
        assert!(out.injections.iter().all(|r| !r.old_bit && r.new_bit));
    }
}

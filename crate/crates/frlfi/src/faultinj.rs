//! The fault model: Bernoulli-per-bit flips with direction constraints,
//! scheduled by location, timing, and persistence, with a full audit trail.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fxp::{flip_bit, get_bit, CodeTensor};

#[derive(Debug, Error, PartialEq)]
pub enum FaultError {
    #[error("bit error rate {0} outside [0, 1]")]
    BadBer(f64),
    #[error("fault spec {spec} references agent {agent}, but only {n_agents} agents exist")]
    BadAgent { spec: usize, agent: usize, n_agents: usize },
    #[error("fault spec {spec} scheduled at episode {episode}, beyond horizon {episodes}")]
    BadEpisode { spec: usize, episode: usize, episodes: usize },
    #[error("fault spec {spec}: transient reads are only valid for activation or weight reads")]
    BadPersistence { spec: usize },
}

/// Where in the system a fault lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "agent", rename_all = "snake_case")]
pub enum FaultLocation {
    /// Parameters an agent uploads to the server (agent-to-server link).
    AgentUpload(usize),
    /// The server's aggregated parameters; all agents receive the same
    /// corruption.
    ServerState,
    /// The server-to-agent link; drawn independently per agent.
    ServerBroadcast,
    /// An agent's stored weight codes.
    AgentWeights(usize),
    /// An agent's activations as they are read during a forward pass.
    ActivationRead(usize),
}

/// Coarse grouping of fault origins by which side of the federation they hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultClass {
    AgentFault,
    ServerFault,
}

/// Agent-origin corruption is an agent fault; server-origin corruption is a
/// server fault.
pub fn fault_class(location: FaultLocation) -> FaultClass {
    match location {
        FaultLocation::AgentUpload(_)
        | FaultLocation::AgentWeights(_)
        | FaultLocation::ActivationRead(_) => FaultClass::AgentFault,
        FaultLocation::ServerState | FaultLocation::ServerBroadcast => FaultClass::ServerFault,
    }
}

/// Which bit transitions an injection may perform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    Both,
    ZeroToOne,
    OneToZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Persistence {
    /// Corrupts a single read; stored codes are untouched afterwards.
    TransientRead,
    /// Mutates stored codes; persists until overwritten.
    PersistentMemory,
}

/// When a fault fires: a training episode index or an inference step index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTiming {
    Episode(usize),
    Step(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub location: FaultLocation,
    pub ber: f64,
    pub mode: FaultMode,
    pub timing: FaultTiming,
    pub persistence: Persistence,
    pub seed: u64,
}

/// One performed flip, for the audit trail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlipRecord {
    pub location: FaultLocation,
    pub offset: usize,
    pub bit: u32,
    pub old_bit: bool,
    pub new_bit: bool,
    /// Episode or step index at which the flip occurred.
    pub time: usize,
}

pub type InjectionLog = Vec<FlipRecord>;

/// Flip each bit of each code independently with probability `ber`, subject
/// to the direction constraint. Returns (offset, bit) of every flip performed.
pub fn inject(
    tensor: &mut CodeTensor,
    ber: f64,
    mode: FaultMode,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, u32)>, FaultError> {
    if !(0.0..=1.0).contains(&ber) {
        return Err(FaultError::BadBer(ber));
    }
    let width = tensor.fmt().total_bits();
    let draws: Vec<f64> = (0..tensor.len() * width as usize).map(|_| rng.gen()).collect();
    Ok(inject_with_draws(tensor, &draws, ber, mode))
}

/// Apply a pre-drawn Bernoulli pattern. Used for server-state faults, where
/// every agent's copy must see the same flip positions.
pub fn inject_with_draws(
    tensor: &mut CodeTensor,
    draws: &[f64],
    ber: f64,
    mode: FaultMode,
) -> Vec<(usize, u32)> {
    let fmt = tensor.fmt();
    let width = fmt.total_bits();
    let mut flips = Vec::new();
    let codes = tensor.codes_mut();
    for (offset, code) in codes.iter_mut().enumerate() {
        for bit in 0..width {
            if draws[offset * width as usize + bit as usize] >= ber {
                continue;
            }
            let current = get_bit(*code, bit, fmt);
            let allowed = match mode {
                FaultMode::Both => true,
                FaultMode::ZeroToOne => !current,
                FaultMode::OneToZero => current,
            };
            if allowed {
                *code = flip_bit(*code, bit, fmt).expect("stored code in range");
                flips.push((offset, bit));
            }
        }
    }
    flips
}

/// A validated list of fault specs plus fire-once bookkeeping for a run.
#[derive(Debug, Clone, Default)]
pub struct FaultPlan {
    specs: Vec<FaultSpec>,
}

impl FaultPlan {
    pub fn new(specs: Vec<FaultSpec>) -> Self {
        Self { specs }
    }

    pub fn specs(&self) -> &[FaultSpec] {
        &self.specs
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Validate every spec against the run configuration.
    pub fn validate(&self, n_agents: usize, episodes: usize) -> Result<(), FaultError> {
        for (i, spec) in self.specs.iter().enumerate() {
            if !(0.0..=1.0).contains(&spec.ber) {
                return Err(FaultError::BadBer(spec.ber));
            }
            let agent = match spec.location {
                FaultLocation::AgentUpload(a)
                | FaultLocation::AgentWeights(a)
                | FaultLocation::ActivationRead(a) => Some(a),
                _ => None,
            };
            if let Some(a) = agent {
                if a >= n_agents {
                    return Err(FaultError::BadAgent { spec: i, agent: a, n_agents });
                }
            }
            if let FaultTiming::Episode(e) = spec.timing {
                if e >= episodes {
                    return Err(FaultError::BadEpisode { spec: i, episode: e, episodes });
                }
            }
            if spec.persistence == Persistence::TransientRead
                && !matches!(
                    spec.location,
                    FaultLocation::ActivationRead(_) | FaultLocation::AgentWeights(_)
                )
            {
                return Err(FaultError::BadPersistence { spec: i });
            }
        }
        Ok(())
    }
}

/// Runtime state of a plan inside one training run: which specs have fired
/// and the accumulated audit log.
#[derive(Debug, Clone)]
pub struct FaultPlanRun {
    plan: FaultPlan,
    fired: Vec<bool>,
    log: InjectionLog,
}

impl FaultPlanRun {
    pub fn new(plan: FaultPlan) -> Self {
        let n = plan.specs.len();
        Self { plan, fired: vec![false; n], log: Vec::new() }
    }

    pub fn log(&self) -> &InjectionLog {
        &self.log
    }

    pub fn into_log(self) -> InjectionLog {
        self.log
    }

    /// Deterministic per-spec RNG stream.
    pub fn rng_for(&self, spec_index: usize) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(splitmix(self.plan.specs[spec_index].seed, spec_index as u64))
    }

    /// Unfired specs matching a predicate, with their indices. The caller
    /// marks them fired via [`Self::record`].
    pub fn pending(&self, pred: impl Fn(&FaultSpec) -> bool) -> Vec<(usize, FaultSpec)> {
        self.plan
            .specs
            .iter()
            .enumerate()
            .filter(|(i, s)| !self.fired[*i] && pred(s))
            .map(|(i, s)| (i, *s))
            .collect()
    }

    /// Mark a spec fired and append pre-built flip records. Used when one
    /// spec corrupts several tensors (per-agent broadcast copies, activation
    /// reads) and the caller assembles the records itself.
    pub fn record_prepared(&mut self, spec_index: usize, records: Vec<FlipRecord>) {
        self.fired[spec_index] = true;
        self.log.extend(records);
    }

    /// Mark a spec fired and append its flips to the audit log.
    pub fn record(&mut self, spec_index: usize, flips: &[(usize, u32)], time: usize, before: &CodeTensor, after: &CodeTensor) {
        self.fired[spec_index] = true;
        let fmt = after.fmt();
        for &(offset, bit) in flips {
            self.log.push(FlipRecord {
                location: self.plan.specs[spec_index].location,
                offset,
                bit,
                old_bit: get_bit(before.codes()[offset], bit, fmt),
                new_bit: get_bit(after.codes()[offset], bit, fmt),
                time,
            });
        }
    }
}

/// splitmix64-style mixing, used to derive independent RNG streams.
pub fn splitmix(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fxp::QFormat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn fmt() -> QFormat {
        QFormat::new(2, 5).unwrap()
    }

    fn tensor(codes: Vec<i64>) -> CodeTensor {
        let n = codes.len();
        CodeTensor::new(codes, fmt(), vec![n]).unwrap()
    }

    #[test]
    fn zero_ber_is_noop() {
        let mut t = tensor(vec![3, -7, 100, 0]);
        let before = t.clone();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let flips = inject(&mut t, 0.0, FaultMode::Both, &mut rng).unwrap();
        assert!(flips.is_empty());
        assert_eq!(t, before);
    }

    #[test]
    fn full_ber_complements_every_code() {
        let mut t = tensor(vec![0, -1, 42, -100]);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        inject(&mut t, 1.0, FaultMode::Both, &mut rng).unwrap();
        // flipping all 8 bits is bitwise complement: !c stays in range for 8-bit codes
        assert_eq!(t.codes(), &[-1, 0, -43, 99]);
    }

    #[test]
    fn direction_constraints_hold() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let mut up = tensor(vec![0, 5, -20, 127, -128]);
            inject(&mut up, 0.3, FaultMode::ZeroToOne, &mut rng).unwrap();
            // 0->1 never clears a bit: popcount can only grow
            for (&after, &before) in up.codes().iter().zip([0i64, 5, -20, 127, -128].iter()) {
                let b = (before as u8) as u64;
                let a = (after as u8) as u64;
                assert_eq!(a & b, b, "0->1 cleared a bit");
            }

            let mut down = tensor(vec![0, 5, -20, 127, -128]);
            inject(&mut down, 0.3, FaultMode::OneToZero, &mut rng).unwrap();
            for (&after, &before) in down.codes().iter().zip([0i64, 5, -20, 127, -128].iter()) {
                let b = (before as u8) as u64;
                let a = (after as u8) as u64;
                assert_eq!(a | b, b, "1->0 set a bit");
            }
        }
    }

    #[test]
    fn injection_is_reproducible() {
        let base = tensor((0..64).collect());
        let mut a = base.clone();
        let mut b = base.clone();
        let fa = inject(&mut a, 0.05, FaultMode::Both, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        let fb = inject(&mut b, 0.05, FaultMode::Both, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(fa, fb);
    }

    #[test]
    fn rejects_bad_ber() {
        let mut t = tensor(vec![0]);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        assert_eq!(inject(&mut t, 1.5, FaultMode::Both, &mut rng), Err(FaultError::BadBer(1.5)));
    }

    #[test]
    fn flip_count_mean_matches_binomial() {
        // 580 codes x 8 bits at ber 1e-2: Binomial(4640, 0.01), mean 46.4.
        // Empirical mean over 10^4 trials must land within 3 sigma of the mean.
        let n_bits = 580 * 8;
        let ber = 1e-2;
        let trials = 10_000;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let base = tensor(vec![0b0101_0101; 580]);
        let mut total = 0usize;
        for _ in 0..trials {
            let mut t = base.clone();
            total += inject(&mut t, ber, FaultMode::Both, &mut rng).unwrap().len();
        }
        let mean = total as f64 / trials as f64;
        let expected = n_bits as f64 * ber;
        let sigma = (n_bits as f64 * ber * (1.0 - ber)).sqrt() / (trials as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * sigma, "mean {mean} vs expected {expected}");
    }

    #[test]
    fn binomial_goodness_of_fit() {
        // chi-square GOF of flip counts against Binomial(n_bits, ber) over
        // 10^4 trials, at ber 1e-3 and 1e-2; requires p > 0.01.
        use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete};
        let n_codes = 580;
        let base = tensor(vec![0b0011_1100; n_codes]);
        let n_bits = (n_codes * 8) as u64;
        let trials = 10_000usize;
        for (seed, ber) in [(6u64, 1e-3), (8u64, 1e-2)] {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let mut counts = std::collections::HashMap::new();
            for _ in 0..trials {
                let mut t = base.clone();
                let k = inject(&mut t, ber, FaultMode::Both, &mut rng).unwrap().len();
                *counts.entry(k).or_insert(0usize) += 1;
            }
            let dist = Binomial::new(ber, n_bits).unwrap();
            // bin adjacent counts so every expected bin mass is >= 5
            let max_k = *counts.keys().max().unwrap();
            let mut bins: Vec<(f64, f64)> = Vec::new(); // (observed, expected)
            let mut obs_acc = 0.0;
            let mut exp_acc = 0.0;
            let mut covered = 0.0;
            for k in 0..=max_k {
                obs_acc += *counts.get(&k).unwrap_or(&0) as f64;
                exp_acc += dist.pmf(k as u64) * trials as f64;
                if exp_acc >= 5.0 {
                    covered += exp_acc;
                    bins.push((obs_acc, exp_acc));
                    obs_acc = 0.0;
                    exp_acc = 0.0;
                }
            }
            // the entire upper tail joins the last bin
            if let Some(last) = bins.last_mut() {
                last.0 += obs_acc;
                last.1 += trials as f64 - covered;
            }
            let chi2: f64 = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
            let dof = (bins.len() - 1).max(1) as f64;
            let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(chi2);
            assert!(p > 0.01, "ber {ber}: chi2 {chi2}, dof {dof}, p {p}");
        }
    }

    #[test]
    fn fault_class_mapping() {
        assert_eq!(fault_class(FaultLocation::AgentWeights(3)), FaultClass::AgentFault);
        assert_eq!(fault_class(FaultLocation::AgentUpload(0)), FaultClass::AgentFault);
        assert_eq!(fault_class(FaultLocation::ActivationRead(1)), FaultClass::AgentFault);
        assert_eq!(fault_class(FaultLocation::ServerState), FaultClass::ServerFault);
        assert_eq!(fault_class(FaultLocation::ServerBroadcast), FaultClass::ServerFault);
    }

    #[test]
    fn plan_validation() {
        let spec = FaultSpec {
            location: FaultLocation::AgentWeights(5),
            ber: 0.01,
            mode: FaultMode::Both,
            timing: FaultTiming::Episode(900),
            persistence: Persistence::PersistentMemory,
            seed: 1,
        };
        let plan = FaultPlan::new(vec![spec]);
        assert!(plan.validate(12, 1000).is_ok());
        assert!(matches!(plan.validate(4, 1000), Err(FaultError::BadAgent { agent: 5, .. })));
        assert!(matches!(plan.validate(12, 500), Err(FaultError::BadEpisode { .. })));

        let bad = FaultSpec {
            location: FaultLocation::ServerState,
            persistence: Persistence::TransientRead,
            ..spec
        };
        assert!(matches!(
            FaultPlan::new(vec![bad]).validate(12, 1000),
            Err(FaultError::BadPersistence { .. })
        ));
    }

    #[test]
    fn empty_plan_is_noop() {
        let run = FaultPlanRun::new(FaultPlan::default());
        assert!(run.pending(|_| true).is_empty());
        assert!(run.log().is_empty());
    }
}

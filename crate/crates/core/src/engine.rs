//! Random pairwise-interaction scheduler.
//!
//! A run repeatedly draws an ordered pair `(initiator, responder)` uniformly
//! from the `n(n-1)` ordered pairs of distinct agents and applies the
//! protocol's deterministic transition to the two states. Everything else in
//! the crate is built on [`Protocol`] and [`run_trial`].

use std::collections::{BTreeMap, HashSet};
use std::fmt::Debug;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index of an agent within a configuration, in `[0, n)`.
pub type AgentId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("population of {0} agents is too small, at least 2 are required")]
    InvalidPopulation(usize),

    #[error("interaction budget must be positive")]
    ZeroBudget,

    #[error(
        "agent {agent} left the declared state space of {budget} states \
         (state key {key}) at interaction {interaction}"
    )]
    StateBudgetViolation {
        agent: AgentId,
        key: u64,
        budget: u64,
        interaction: u64,
    },

    #[error("stability of protocol {protocol} cannot be decided for n = {n}")]
    UnsupportedMeasurement { protocol: String, n: usize },
}

/// A population protocol given as data.
///
/// `transition` must be a pure function of the two input states; the engine
/// relies on this for reproducibility and the reachability oracle relies on
/// it for quotienting configurations by agent identity.
pub trait Protocol: Send + Sync {
    type State: Copy + Eq + Hash + Debug + Send + Sync;
    /// Per-agent input (opinion, initial load, ...).
    type Input: Copy;
    type Output: Copy + Eq + Ord + Hash + Debug + Send + Sync;

    fn name(&self) -> String;

    fn init(&self, input: Self::Input) -> Self::State;

    /// `(initiator, responder) -> (initiator', responder')`.
    fn transition(&self, u: &Self::State, v: &Self::State) -> (Self::State, Self::State);

    fn output(&self, state: &Self::State) -> Self::Output;

    /// Canonical integer encoding; distinct states map to distinct keys.
    fn state_key(&self, state: &Self::State) -> u64;

    /// Declared size of the per-agent state space. Every reachable state must
    /// encode to a key below this value.
    fn state_budget(&self) -> u64;

    fn within_budget(&self, state: &Self::State) -> bool {
        self.state_key(state) < self.state_budget()
    }

    /// Sufficient stability test on a whole configuration. `None` means the
    /// protocol has no predicate.
    fn is_stable(&self, _states: &[Self::State]) -> Option<bool> {
        None
    }
}

/// The complete global state of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Configuration<S> {
    pub states: Vec<S>,
    pub interactions_elapsed: u64,
}

impl<S: Copy> Configuration<S> {
    pub fn new(states: Vec<S>) -> Self {
        Self {
            states,
            interactions_elapsed: 0,
        }
    }

    pub fn from_inputs<P>(protocol: &P, inputs: impl IntoIterator<Item = P::Input>) -> Self
    where
        P: Protocol<State = S>,
    {
        Self::new(inputs.into_iter().map(|i| protocol.init(i)).collect())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// SplitMix64 finalizer, used to derive independent per-trial seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `trial` in a batch with master seed `master`:
/// `splitmix64(master ^ splitmix64(trial))`.
pub fn trial_seed(master: u64, trial: u64) -> u64 {
    splitmix64(master ^ splitmix64(trial))
}

/// Seeded random stream. The generator is ChaCha8 (`rand_chacha`), whose
/// output for a given seed is fixed across platforms and crate versions.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub const GENERATOR: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn for_trial(master: u64, trial: u64) -> Self {
        Self::new(trial_seed(master, trial))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    #[inline]
    fn pair_unchecked(&mut self, n: usize) -> (AgentId, AgentId) {
        let u = self.rng.gen_range(0..n);
        let mut v = self.rng.gen_range(0..n - 1);
        if v >= u {
            v += 1;
        }
        (u, v)
    }
}

/// Draws an ordered pair of distinct agents uniformly at random.
pub fn pick_pair(rng: &mut RngStream, n: usize) -> Result<(AgentId, AgentId), EngineError> {
    if n < 2 {
        return Err(EngineError::InvalidPopulation(n));
    }
    Ok(rng.pair_unchecked(n))
}

/// Applies one interaction between initiator `u` and responder `v`.
pub fn apply_interaction<P: Protocol>(
    config: &mut Configuration<P::State>,
    protocol: &P,
    u: AgentId,
    v: AgentId,
) {
    debug_assert_ne!(u, v);
    let (a, b) = protocol.transition(&config.states[u], &config.states[v]);
    config.states[u] = a;
    config.states[v] = b;
    config.interactions_elapsed += 1;
}

/// Returned by observers to stop a run early.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Hooks into a running trial. All methods have no-op defaults.
pub trait Observer<S> {
    fn on_start(&mut self, _states: &[S]) {}

    /// Called after interaction number `t` (1-based) was applied.
    fn on_interaction(&mut self, _t: u64, _u: AgentId, _v: AgentId, _before: (&S, &S), _after: (&S, &S)) -> Flow {
        Flow::Continue
    }

    /// Called at every probe, after the probe record was taken.
    fn on_probe(&mut self, _t: u64, _states: &[S]) -> Flow {
        Flow::Continue
    }

    /// Whether `on_interaction` needs to be called at all.
    fn wants_interactions(&self) -> bool {
        false
    }
}

impl<S> Observer<S> for () {}

/// Output histogram of a configuration.
pub type OutputCounts<O> = BTreeMap<O, usize>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeRecord<O> {
    pub interaction: u64,
    pub outputs: OutputCounts<O>,
    /// Result of the protocol's stability predicate, if it has one.
    pub stable: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialOptions {
    pub budget: u64,
    /// Probe every `cadence` interactions; `0` selects the default of `n`.
    pub cadence: u64,
    /// Stop as soon as a probe finds the configuration stable.
    pub stop_when_stable: bool,
    /// Record per-agent distinct state keys at every probe.
    pub census: bool,
    /// Check every updated state against the declared state budget.
    pub check_budget: bool,
}

impl TrialOptions {
    pub fn with_budget(budget: u64) -> Self {
        Self {
            budget,
            cadence: 0,
            stop_when_stable: true,
            census: false,
            check_budget: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Stable,
    Budget,
    Observer,
}

/// Distinct encoded states, per agent and over the whole population.
#[derive(Debug, Clone, Default)]
pub struct Census {
    per_agent: Vec<HashSet<u64>>,
    global: HashSet<u64>,
}

impl Census {
    pub fn new(n: usize) -> Self {
        Self {
            per_agent: vec![HashSet::new(); n],
            global: HashSet::new(),
        }
    }

    pub fn record<P: Protocol>(&mut self, protocol: &P, states: &[P::State]) {
        for (set, s) in self.per_agent.iter_mut().zip(states) {
            let key = protocol.state_key(s);
            set.insert(key);
            self.global.insert(key);
        }
    }

    pub fn per_agent(&self) -> Vec<usize> {
        self.per_agent.iter().map(HashSet::len).collect()
    }

    pub fn max_per_agent(&self) -> usize {
        self.per_agent.iter().map(HashSet::len).max().unwrap_or(0)
    }

    pub fn global(&self) -> usize {
        self.global.len()
    }
}

/// Distinct states seen by each agent and globally, from a recorded census.
pub fn state_census(census: &Census) -> (Vec<usize>, usize) {
    (census.per_agent(), census.global())
}

pub struct TrialRun<P: Protocol> {
    pub seed: u64,
    pub config: Configuration<P::State>,
    pub probes: Vec<ProbeRecord<P::Output>>,
    /// First probe at which the stability predicate held.
    pub stabilized_at: Option<u64>,
    pub stop: StopReason,
    pub census: Option<Census>,
    pub cadence: u64,
}

impl<P: Protocol> Clone for TrialRun<P> {
    fn clone(&self) -> Self {
        Self {
            seed: self.seed,
            config: self.config.clone(),
            probes: self.probes.clone(),
            stabilized_at: self.stabilized_at,
            stop: self.stop,
            census: self.census.clone(),
            cadence: self.cadence,
        }
    }
}

impl<P: Protocol> std::fmt::Debug for TrialRun<P> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrialRun")
            .field("seed", &self.seed)
            .field("interactions", &self.config.interactions_elapsed)
            .field("probes", &self.probes.len())
            .field("stabilized_at", &self.stabilized_at)
            .field("stop", &self.stop)
            .finish()
    }
}

fn probe<P: Protocol>(protocol: &P, config: &Configuration<P::State>) -> ProbeRecord<P::Output> {
    let mut outputs = OutputCounts::new();
    for s in &config.states {
        *outputs.entry(protocol.output(s)).or_insert(0) += 1;
    }
    ProbeRecord {
        interaction: config.interactions_elapsed,
        outputs,
        stable: protocol.is_stable(&config.states),
    }
}

/// Simulates `protocol` from `init` until the budget is exhausted, the
/// stability predicate holds at a probe (if requested) or the observer stops.
///
/// A probe is taken at interaction 0, every `cadence` interactions, and at the
/// end of the run.
pub fn run_trial<P, O>(
    protocol: &P,
    init: Configuration<P::State>,
    options: &TrialOptions,
    mut rng: RngStream,
    observer: &mut O,
) -> Result<TrialRun<P>, EngineError>
where
    P: Protocol,
    O: Observer<P::State>,
{
    let n = init.len();
    if n < 2 {
        return Err(EngineError::InvalidPopulation(n));
    }
    if options.budget == 0 {
        return Err(EngineError::ZeroBudget);
    }
    let cadence = if options.cadence == 0 {
        n as u64
    } else {
        options.cadence
    };
    let mut config = init;
    if options.check_budget {
        for (agent, s) in config.states.iter().enumerate() {
            if !protocol.within_budget(s) {
                return Err(EngineError::StateBudgetViolation {
                    agent,
                    key: protocol.state_key(s),
                    budget: protocol.state_budget(),
                    interaction: config.interactions_elapsed,
                });
            }
        }
    }
    let mut census = options.census.then(|| Census::new(n));
    let wants_interactions = observer.wants_interactions();
    observer.on_start(&config.states);

    let mut probes = Vec::new();
    let mut stabilized_at = None;
    let mut stop = StopReason::Budget;

    let mut take_probe = |config: &Configuration<P::State>,
                          census: &mut Option<Census>,
                          observer: &mut O|
     -> (Option<bool>, Flow) {
        let record = probe(protocol, config);
        let stable = record.stable;
        probes.push(record);
        if let Some(c) = census.as_mut() {
            c.record(protocol, &config.states);
        }
        let flow = observer.on_probe(config.interactions_elapsed, &config.states);
        (stable, flow)
    };

    let (stable, flow) = take_probe(&config, &mut census, observer);
    let mut done = false;
    if stable == Some(true) {
        stabilized_at = Some(0);
        if options.stop_when_stable {
            stop = StopReason::Stable;
            done = true;
        }
    }
    if !done && flow == Flow::Stop {
        stop = StopReason::Observer;
        done = true;
    }

    let budget = options.budget;
    while !done && config.interactions_elapsed < budget {
        let steps = cadence.min(budget - config.interactions_elapsed);
        for _ in 0..steps {
            let (u, v) = rng.pair_unchecked(n);
            let su = config.states[u];
            let sv = config.states[v];
            let (a, b) = protocol.transition(&su, &sv);
            config.states[u] = a;
            config.states[v] = b;
            config.interactions_elapsed += 1;
            if options.check_budget {
                for (agent, s) in [(u, &a), (v, &b)] {
                    if !protocol.within_budget(s) {
                        return Err(EngineError::StateBudgetViolation {
                            agent,
                            key: protocol.state_key(s),
                            budget: protocol.state_budget(),
                            interaction: config.interactions_elapsed,
                        });
                    }
                }
            }
            if wants_interactions
                && observer.on_interaction(config.interactions_elapsed, u, v, (&su, &sv), (&a, &b)) == Flow::Stop
            {
                stop = StopReason::Observer;
                done = true;
                break;
            }
        }
        let (stable, flow) = take_probe(&config, &mut census, observer);
        if stable == Some(true) && stabilized_at.is_none() {
            stabilized_at = Some(config.interactions_elapsed);
            if options.stop_when_stable {
                stop = StopReason::Stable;
                done = true;
            }
        }
        if !done && flow == Flow::Stop {
            stop = StopReason::Observer;
            done = true;
        }
    }

    Ok(TrialRun {
        seed: rng.seed(),
        config,
        probes,
        stabilized_at,
        stop,
        census,
        cadence,
    })
}

/// An interaction count, or a marker that the event was not observed within
/// the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Censored {
    At(u64),
    Censored,
}

impl Censored {
    pub fn value(self) -> Option<u64> {
        match self {
            Censored::At(t) => Some(t),
            Censored::Censored => None,
        }
    }

    pub fn is_censored(self) -> bool {
        matches!(self, Censored::Censored)
    }
}

impl From<Option<u64>> for Censored {
    fn from(value: Option<u64>) -> Self {
        value.map_or(Censored::Censored, Censored::At)
    }
}

/// First probed interaction from which every later probe shows a correct
/// configuration. Censored if the final probe is not correct.
pub fn measure_convergence<O>(probes: &[ProbeRecord<O>], correct: impl Fn(&OutputCounts<O>) -> bool) -> Censored {
    let mut since = None;
    for p in probes {
        if correct(&p.outputs) {
            since.get_or_insert(p.interaction);
        } else {
            since = None;
        }
    }
    since.into()
}

/// Whether `states` is stable, per the protocol's predicate.
pub fn measure_stabilization<P: Protocol>(protocol: &P, states: &[P::State]) -> Result<bool, EngineError> {
    protocol
        .is_stable(states)
        .ok_or_else(|| EngineError::UnsupportedMeasurement {
            protocol: protocol.name(),
            n: states.len(),
        })
}

/// Target: every agent outputs `value`.
pub fn all_output<O: Ord + Copy>(value: O) -> impl Fn(&OutputCounts<O>) -> bool {
    move |counts| counts.len() == 1 && counts.contains_key(&value)
}

/// Per-trial measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub convergence_interactions: Censored,
    pub stabilization_interactions: Censored,
    pub final_output_correct: bool,
    pub distinct_states_seen: usize,
    pub extras: BTreeMap<String, serde_json::Value>,
}

impl TrialMetrics {
    pub fn from_run<P: Protocol>(run: &TrialRun<P>, correct: impl Fn(&OutputCounts<P::Output>) -> bool) -> Self {
        let final_output_correct = run.probes.last().is_some_and(|p| correct(&p.outputs));
        let convergence_interactions = measure_convergence(&run.probes, &correct);
        let stabilization_interactions = run.stabilized_at.into();
        let distinct_states_seen = run.census.as_ref().map_or(0, Census::max_per_agent);
        Self {
            convergence_interactions,
            stabilization_interactions,
            final_output_correct,
            distinct_states_seen,
            extras: BTreeMap::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Every transition returns its inputs.
    struct Identity;

    impl Protocol for Identity {
        type State = u8;
        type Input = u8;
        type Output = u8;

        fn name(&self) -> String {
            "identity".into()
        }
        fn init(&self, input: u8) -> u8 {
            input
        }
        fn transition(&self, u: &u8, v: &u8) -> (u8, u8) {
            (*u, *v)
        }
        fn output(&self, s: &u8) -> u8 {
            *s
        }
        fn state_key(&self, s: &u8) -> u64 {
            u64::from(*s)
        }
        fn state_budget(&self) -> u64 {
            256
        }
    }

    /// Responder takes initiator's value plus one; overflows the budget of 4.
    struct Counter;

    impl Protocol for Counter {
        type State = u8;
        type Input = u8;
        type Output = u8;

        fn name(&self) -> String {
            "counter".into()
        }
        fn init(&self, input: u8) -> u8 {
            input
        }
        fn transition(&self, u: &u8, v: &u8) -> (u8, u8) {
            (*u, (*u).max(*v) + 1)
        }
        fn output(&self, _: &u8) -> u8 {
            0
        }
        fn state_key(&self, s: &u8) -> u64 {
            u64::from(*s)
        }
        fn state_budget(&self) -> u64 {
            4
        }
    }

    #[test]
    fn pick_pair_rejects_tiny_populations() {
        let mut rng = RngStream::new(1);
        assert_eq!(pick_pair(&mut rng, 1), Err(EngineError::InvalidPopulation(1)));
        assert_eq!(pick_pair(&mut rng, 0), Err(EngineError::InvalidPopulation(0)));
    }

    #[test]
    fn pick_pair_n2_is_fair() {
        let mut rng = RngStream::new(9);
        let draws = 100_000;
        let mut forward = 0;
        for _ in 0..draws {
            let (u, v) = pick_pair(&mut rng, 2).unwrap();
            assert_ne!(u, v);
            if u == 0 {
                forward += 1;
            }
        }
        let frac = f64::from(forward) / f64::from(draws);
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn identity_only_advances_counter() {
        let p = Identity;
        let mut c = Configuration::from_inputs(&p, [1, 2, 3]);
        apply_interaction(&mut c, &p, 0, 2);
        assert_eq!(c.states, vec![1, 2, 3]);
        assert_eq!(c.interactions_elapsed, 1);
    }

    #[test]
    fn interaction_is_local() {
        let p = Counter;
        let mut c = Configuration::from_inputs(&p, [0, 0, 0, 0]);
        apply_interaction(&mut c, &p, 1, 3);
        assert_eq!(c.states, vec![0, 0, 0, 1]);
    }

    #[test]
    fn budget_violation_is_a_hard_error() {
        let p = Counter;
        let init = Configuration::from_inputs(&p, [0, 0, 0]);
        let err = run_trial(&p, init, &TrialOptions::with_budget(1000), RngStream::new(3), &mut ()).unwrap_err();
        assert!(matches!(err, EngineError::StateBudgetViolation { budget: 4, key: 4, .. }));
    }

    #[test]
    fn zero_budget_rejected() {
        let p = Identity;
        let init = Configuration::from_inputs(&p, [0, 0]);
        let err = run_trial(&p, init, &TrialOptions::with_budget(0), RngStream::new(3), &mut ()).unwrap_err();
        assert_eq!(err, EngineError::ZeroBudget);
    }

    #[test]
    fn identity_census_is_one_per_agent() {
        let p = Identity;
        let init = Configuration::from_inputs(&p, [0, 1, 2, 3, 4]);
        let mut opts = TrialOptions::with_budget(500);
        opts.census = true;
        let run = run_trial(&p, init, &opts, RngStream::new(5), &mut ()).unwrap();
        let (per_agent, global) = state_census(run.census.as_ref().unwrap());
        assert_eq!(per_agent, vec![1; 5]);
        assert_eq!(global, 5);
    }

    #[test]
    fn probes_cover_start_cadence_and_end() {
        let p = Identity;
        let init = Configuration::from_inputs(&p, [0; 4]);
        let mut opts = TrialOptions::with_budget(10);
        opts.cadence = 4;
        let run = run_trial(&p, init, &opts, RngStream::new(5), &mut ()).unwrap();
        let at: Vec<u64> = run.probes.iter().map(|p| p.interaction).collect();
        assert_eq!(at, vec![0, 4, 8, 10]);
        assert_eq!(run.stop, StopReason::Budget);
    }

    fn record(t: u64, ok: bool) -> ProbeRecord<i8> {
        let mut outputs = OutputCounts::new();
        outputs.insert(if ok { 1 } else { -1 }, 3);
        ProbeRecord {
            interaction: t,
            outputs,
            stable: None,
        }
    }

    #[test]
    fn convergence_from_first_probe() {
        let probes = vec![record(0, true), record(5, true), record(10, true)];
        assert_eq!(measure_convergence(&probes, all_output(1)), Censored::At(0));
    }

    #[test]
    fn convergence_resets_on_relapse() {
        let probes = vec![record(0, true), record(5, false), record(10, true), record(15, true)];
        assert_eq!(measure_convergence(&probes, all_output(1)), Censored::At(10));
    }

    #[test]
    fn convergence_censored_when_final_wrong() {
        let probes = vec![record(0, true), record(5, false)];
        assert_eq!(measure_convergence(&probes, all_output(1)), Censored::Censored);
    }

    #[test]
    fn stabilization_without_predicate_is_unsupported() {
        let err = measure_stabilization(&Identity, &[1, 2]).unwrap_err();
        assert!(matches!(err, EngineError::UnsupportedMeasurement { .. }));
    }

    #[test]
    fn trial_seeds_differ_and_repeat() {
        assert_eq!(trial_seed(7, 3), trial_seed(7, 3));
        assert_ne!(trial_seed(7, 3), trial_seed(7, 4));
        assert_ne!(trial_seed(7, 3), trial_seed(8, 3));
    }
}

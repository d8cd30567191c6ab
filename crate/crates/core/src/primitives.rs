//! One-way epidemics and integer load balancing.

use rayon::prelude::*;

use crate::engine::{
    run_trial, AgentId, Censored, Configuration, EngineError, Flow, Observer, Protocol, RngStream, TrialOptions,
};

/// `(x, y) -> (x, max(x, y))`: the responder adopts the larger value.
#[inline]
pub fn epidemic_transition(x: bool, y: bool) -> (bool, bool) {
    (x, x | y)
}

/// `(x, y) -> (ceil((x+y)/2), floor((x+y)/2))`.
#[inline]
pub fn lb_transition(x: i64, y: i64) -> (i64, i64) {
    let sum = x + y;
    let lo = sum.div_euclid(2);
    (sum - lo, lo)
}

/// Two-state one-way epidemic. `true` means infected.
#[derive(Debug, Clone, Copy, Default)]
pub struct Epidemic;

impl Protocol for Epidemic {
    type State = bool;
    type Input = bool;
    type Output = bool;

    fn name(&self) -> String {
        "epidemic".into()
    }

    fn init(&self, infected: bool) -> bool {
        infected
    }

    fn transition(&self, u: &bool, v: &bool) -> (bool, bool) {
        epidemic_transition(*u, *v)
    }

    fn output(&self, s: &bool) -> bool {
        *s
    }

    fn state_key(&self, s: &bool) -> u64 {
        u64::from(*s)
    }

    fn state_budget(&self) -> u64 {
        2
    }

    fn is_stable(&self, states: &[bool]) -> Option<bool> {
        let infected = states.iter().filter(|s| **s).count();
        Some(infected == 0 || infected == states.len())
    }
}

/// Load balancing on `{-cap, ..., cap}`.
#[derive(Debug, Clone, Copy)]
pub struct LoadBalancing {
    pub cap: i64,
}

impl Protocol for LoadBalancing {
    type State = i64;
    type Input = i64;
    /// Sign of the load.
    type Output = i8;

    fn name(&self) -> String {
        "load-balancing".into()
    }

    fn init(&self, load: i64) -> i64 {
        load
    }

    fn transition(&self, u: &i64, v: &i64) -> (i64, i64) {
        lb_transition(*u, *v)
    }

    fn output(&self, s: &i64) -> i8 {
        s.signum() as i8
    }

    fn state_key(&self, s: &i64) -> u64 {
        // Out-of-range loads map past the budget instead of wrapping.
        if s.abs() > self.cap {
            return u64::MAX;
        }
        (s + self.cap) as u64
    }

    fn state_budget(&self) -> u64 {
        2 * self.cap as u64 + 1
    }

    fn is_stable(&self, states: &[i64]) -> Option<bool> {
        let (lo, hi) = states
            .iter()
            .fold((i64::MAX, i64::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        Some(hi - lo <= 1)
    }
}

/// Budget used by the timing experiments: far above the expected hitting time.
fn experiment_budget(n: usize, factor: f64) -> u64 {
    let n = n as f64;
    (factor * n * n.ln().max(1.0)).ceil() as u64 + 1000
}

struct InfectionWatch {
    infected: usize,
    n: usize,
    done_at: Option<u64>,
}

impl Observer<bool> for InfectionWatch {
    fn on_start(&mut self, states: &[bool]) {
        self.infected = states.iter().filter(|s| **s).count();
        if self.infected == self.n {
            self.done_at = Some(0);
        }
    }

    fn on_interaction(&mut self, t: u64, _: AgentId, _: AgentId, before: (&bool, &bool), after: (&bool, &bool)) -> Flow {
        if !*before.1 && *after.1 {
            self.infected += 1;
            if self.infected == self.n {
                self.done_at = Some(t);
                return Flow::Stop;
            }
        }
        Flow::Continue
    }

    fn on_probe(&mut self, _: u64, _: &[bool]) -> Flow {
        if self.done_at.is_some() {
            Flow::Stop
        } else {
            Flow::Continue
        }
    }

    fn wants_interactions(&self) -> bool {
        true
    }
}

/// Interactions until every agent is infected, starting from agent 0 alone.
pub fn infection_trial(n: usize, budget: u64, rng: RngStream) -> Result<Censored, EngineError> {
    let init = Configuration::new((0..n).map(|i| i == 0).collect());
    let mut watch = InfectionWatch {
        infected: 0,
        n,
        done_at: None,
    };
    let opts = TrialOptions {
        budget,
        cadence: budget,
        stop_when_stable: false,
        census: false,
        check_budget: false,
    };
    run_trial(&Epidemic, init, &opts, rng, &mut watch)?;
    Ok(watch.done_at.into())
}

/// Default budget for [`infection_trial`]: `100 n ln n + 1000`.
pub fn infection_budget(n: usize) -> u64 {
    experiment_budget(n, 100.0)
}

/// Infection time from a single infected agent (agent 0), per trial.
pub fn infection_time_experiment(n: usize, trials: u64, seed: u64) -> Result<Vec<Censored>, EngineError> {
    if n < 2 {
        return Err(EngineError::InvalidPopulation(n));
    }
    let budget = infection_budget(n);
    (0..trials)
        .into_par_iter()
        .map(|trial| infection_trial(n, budget, RngStream::for_trial(seed, trial)))
        .collect()
}

/// Tracks `max - min` over all loads with a histogram; both extremes move
/// monotonically inwards under balancing.
struct DiscrepancyWatch {
    cap: i64,
    counts: Vec<u32>,
    lo: usize,
    hi: usize,
    target: i64,
    done_at: Option<u64>,
}

impl DiscrepancyWatch {
    fn new(cap: i64, target: i64) -> Self {
        Self {
            cap,
            counts: vec![0; 2 * cap as usize + 1],
            lo: 0,
            hi: 0,
            target,
            done_at: None,
        }
    }

    fn idx(&self, load: i64) -> usize {
        (load + self.cap) as usize
    }

    fn discrepancy(&self) -> i64 {
        self.hi as i64 - self.lo as i64
    }
}

impl Observer<i64> for DiscrepancyWatch {
    fn on_start(&mut self, states: &[i64]) {
        for &x in states {
            let i = self.idx(x);
            self.counts[i] += 1;
        }
        self.lo = self.counts.iter().position(|c| *c > 0).unwrap_or(0);
        self.hi = self.counts.iter().rposition(|c| *c > 0).unwrap_or(0);
        if self.discrepancy() <= self.target {
            self.done_at = Some(0);
        }
    }

    fn on_interaction(&mut self, t: u64, _: AgentId, _: AgentId, before: (&i64, &i64), after: (&i64, &i64)) -> Flow {
        for x in [*before.0, *before.1] {
            let i = self.idx(x);
            self.counts[i] -= 1;
        }
        for x in [*after.0, *after.1] {
            let i = self.idx(x);
            self.counts[i] += 1;
        }
        while self.counts[self.lo] == 0 {
            self.lo += 1;
        }
        while self.counts[self.hi] == 0 {
            self.hi -= 1;
        }
        if self.discrepancy() <= self.target {
            self.done_at = Some(t);
            return Flow::Stop;
        }
        Flow::Continue
    }

    fn on_probe(&mut self, _: u64, _: &[i64]) -> Flow {
        if self.done_at.is_some() {
            Flow::Stop
        } else {
            Flow::Continue
        }
    }

    fn wants_interactions(&self) -> bool {
        true
    }
}

/// Interactions until `max - min <= 2`, starting from `loads`.
pub fn balancing_time_from(loads: &[i64], cap: i64, budget: u64, rng: RngStream) -> Result<Censored, EngineError> {
    let protocol = LoadBalancing { cap };
    let init = Configuration::new(loads.to_vec());
    let mut watch = DiscrepancyWatch::new(cap, 2);
    let opts = TrialOptions {
        budget,
        cadence: budget,
        stop_when_stable: false,
        census: false,
        check_budget: true,
    };
    run_trial(&protocol, init, &opts, rng, &mut watch)?;
    Ok(watch.done_at.into())
}

/// Half the agents start at `+ceil(delta/2)`, the rest at `-floor(delta/2)`.
pub fn discrepancy_loads(n: usize, delta: i64) -> Vec<i64> {
    let hi = (delta + 1) / 2;
    let lo = -(delta / 2);
    (0..n).map(|i| if i < n / 2 { hi } else { lo }).collect()
}

/// Default budget for the balancing experiments: `100 n ln(n delta) + 1000`.
pub fn balancing_budget(n: usize, delta: i64) -> u64 {
    let nd = (n as f64) * (delta.max(2) as f64);
    (100.0 * n as f64 * nd.ln()).ceil() as u64 + 1000
}

/// Balancing time from an initial discrepancy of `delta`, per trial. Loads
/// live in `{-cap, ..., cap}` with `cap = max(n, delta)`.
pub fn balancing_time_experiment(n: usize, delta: i64, trials: u64, seed: u64) -> Result<Vec<Censored>, EngineError> {
    if n < 2 {
        return Err(EngineError::InvalidPopulation(n));
    }
    let cap = (n as i64).max(delta);
    let loads = discrepancy_loads(n, delta);
    let budget = balancing_budget(n, delta);
    (0..trials)
        .into_par_iter()
        .map(|trial| balancing_time_from(&loads, cap, budget, RngStream::for_trial(seed, trial)))
        .collect()
}

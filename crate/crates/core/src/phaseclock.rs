//! Junta-driven phase clock.
//!
//! Every agent holds a phase counter. An initiator adopts the larger of its
//! own phase and its responder's phase, plus one if it is marked. Rounds are
//! blocks of `m` consecutive phases. With `r` finite the counter lives on a
//! ring of `r * m` phases and "larger" is decided by the half-ring rule.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{run_trial, AgentId, Configuration, EngineError, Flow, Observer, Protocol, RngStream, TrialOptions};
use crate::junta::{form_junta_ext_pair, l_star, JuntaState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClockError {
    #[error("{query} needs at least {needed} rounds per ring, clock has {rounds:?}")]
    UnsupportedQuery {
        query: &'static str,
        needed: u32,
        rounds: Rounds,
    },

    #[error("no even m up to {max_m} gives round lengths of at least {d1} n ln n for n = {n}")]
    CalibrationFailure { n: usize, d1: f64, max_m: u32 },

    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounds {
    Finite(u32),
    /// Unbounded counter; never overflows.
    Unbounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClockParams {
    /// Phases per round.
    pub m: u32,
    pub rounds: Rounds,
}

impl ClockParams {
    pub fn new(m: u32, r: u32) -> Self {
        assert!(m >= 1 && r >= 1, "clock needs m >= 1 and r >= 1");
        Self {
            m,
            rounds: Rounds::Finite(r),
        }
    }

    pub fn unbounded(m: u32) -> Self {
        assert!(m >= 1, "clock needs m >= 1");
        Self {
            m,
            rounds: Rounds::Unbounded,
        }
    }

    /// Number of phases on the ring, `r * m`.
    pub fn ring(&self) -> Option<u32> {
        match self.rounds {
            Rounds::Finite(r) => Some(r * self.m),
            Rounds::Unbounded => None,
        }
    }

    fn require(&self, query: &'static str, needed: u32) -> Result<(), ClockError> {
        match self.rounds {
            Rounds::Finite(r) if r < needed => Err(ClockError::UnsupportedQuery {
                query,
                needed,
                rounds: self.rounds,
            }),
            _ => Ok(()),
        }
    }

    /// Distinct clock states, `r * m * 2 * 2 * 2`.
    pub fn state_count(&self) -> Option<u64> {
        self.ring().map(|ring| u64::from(ring) * 8)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PhaseClockState {
    pub p: u32,
    pub marked: bool,
    /// The last update crossed a round boundary.
    pub new_round: bool,
    /// The counter wrapped at least once.
    pub overflowed: bool,
}

impl PhaseClockState {
    pub fn new(marked: bool) -> Self {
        Self {
            marked,
            ..Self::default()
        }
    }

    pub fn round(&self, params: &ClockParams) -> u32 {
        self.p / params.m
    }

    /// Injective encoding below `params.state_count()`.
    pub fn key(&self) -> u64 {
        (u64::from(self.p) << 3) | (u64::from(self.marked) << 2) | (u64::from(self.new_round) << 1) | u64::from(self.overflowed)
    }

    /// Whether the counter ever moved.
    pub fn started(&self) -> bool {
        self.p > 0 || self.overflowed
    }
}

/// Updates the initiator's clock from its responder. Returns the new state
/// and the number of round boundaries crossed by this update.
pub fn pc_call(params: &ClockParams, u: &PhaseClockState, v: &PhaseClockState) -> (PhaseClockState, u32) {
    let inc = u32::from(u.marked);
    let mut out = *u;
    out.new_round = false;
    let (advance, old) = match params.ring() {
        Some(ring) => {
            let target = (v.p + inc) % ring;
            let d = (target + ring - u.p) % ring;
            if d == 0 || 2 * d >= ring {
                return (out, 0);
            }
            (d, u.p)
        }
        None => {
            let target = v.p + inc;
            if target <= u.p {
                return (out, 0);
            }
            (target - u.p, u.p)
        }
    };
    let abs = u64::from(old) + u64::from(advance);
    let crossed = (abs / u64::from(params.m) - u64::from(old / params.m)) as u32;
    match params.ring() {
        Some(ring) => {
            out.p = (abs % u64::from(ring)) as u32;
            if abs >= u64::from(ring) {
                out.overflowed = true;
            }
        }
        None => out.p = abs as u32,
    }
    out.new_round = crossed > 0;
    (out, crossed)
}

/// `(overflowed, new_round, marked)`.
pub fn pc_flags(u: &PhaseClockState) -> (bool, bool, bool) {
    (u.overflowed, u.new_round, u.marked)
}

pub fn pc_same_round(params: &ClockParams, u: &PhaseClockState, v: &PhaseClockState) -> Result<bool, ClockError> {
    params.require("same-round query", 2)?;
    Ok(u.round(params) == v.round(params))
}

pub fn pc_different_round(params: &ClockParams, u: &PhaseClockState, v: &PhaseClockState) -> Result<bool, ClockError> {
    pc_same_round(params, u, v).map(|same| !same)
}

/// Circular round order of `u` relative to `v`: `Less` if `u` is behind.
pub fn pc_round_order(params: &ClockParams, u: &PhaseClockState, v: &PhaseClockState) -> Result<Ordering, ClockError> {
    params.require("round-order query", 3)?;
    let (ru, rv) = (u.round(params), v.round(params));
    Ok(match params.rounds {
        Rounds::Unbounded => ru.cmp(&rv),
        Rounds::Finite(r) => {
            let ahead = (ru + r - rv) % r;
            if ahead == 0 {
                Ordering::Equal
            } else if 2 * ahead <= r {
                Ordering::Greater
            } else {
                Ordering::Less
            }
        }
    })
}

pub fn pc_smaller_round(params: &ClockParams, u: &PhaseClockState, v: &PhaseClockState) -> Result<bool, ClockError> {
    pc_round_order(params, u, v).map(|o| o == Ordering::Less)
}

pub fn pc_larger_round(params: &ClockParams, u: &PhaseClockState, v: &PhaseClockState) -> Result<bool, ClockError> {
    pc_round_order(params, u, v).map(|o| o == Ordering::Greater)
}

/// Phase clock whose junta comes from FormJuntaExt. Once an agent is marked
/// or its clock ticked for the first time, the level state is dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct JuntaClock {
    /// Meaningless (and zeroed) once `recycled`.
    pub junta: JuntaState,
    pub recycled: bool,
    pub clock: PhaseClockState,
}

impl JuntaClock {
    pub const FRESH: JuntaClock = JuntaClock {
        junta: JuntaState::FRESH,
        recycled: false,
        clock: PhaseClockState {
            p: 0,
            marked: false,
            new_round: false,
            overflowed: false,
        },
    };

    /// How the level race sees this agent.
    pub fn junta_view(&self, l_star: u8) -> JuntaState {
        if !self.recycled {
            return self.junta;
        }
        JuntaState {
            level: if self.clock.marked { l_star } else { 0 },
            interacted: true,
            marker: self.clock.marked,
            ..JuntaState::FRESH
        }
    }

    fn recycle(&mut self) {
        self.recycled = true;
        self.junta = JuntaState::FRESH;
    }

    /// Compact key of the level state, below `junta_key_count(l_star)`.
    fn junta_key(&self) -> u64 {
        let j = &self.junta;
        ((u64::from(j.level) * 2 + u64::from(j.active)) * 2 + u64::from(j.interacted)) * 3 + u64::from(j.marked_seen.min(2))
    }

    /// Injective encoding below [`JuntaClock::state_count`]. Agents still
    /// forming the junta have not crossed a round yet, so `p < m` for them.
    pub fn key(&self, params: &ClockParams, l_star: u8) -> u64 {
        let clock_states = params.state_count().unwrap_or(u64::MAX / 2);
        if self.recycled {
            return self.clock.key();
        }
        if self.clock.p >= params.m || self.clock.marked || self.clock.new_round || self.clock.overflowed || self.junta.level >= l_star || self.junta.marker {
            return u64::MAX;
        }
        clock_states + self.junta_key() * u64::from(params.m) + u64::from(self.clock.p)
    }

    pub fn state_count(params: &ClockParams, l_star: u8) -> u64 {
        let junta_keys = u64::from(l_star) * 12;
        params.state_count().unwrap_or(u64::MAX / 2) + junta_keys * u64::from(params.m)
    }
}

/// One step of the junta race for both agents.
pub fn junta_step(l_star: u8, u: &mut JuntaClock, v: &mut JuntaClock) {
    if u.recycled && v.recycled {
        return;
    }
    let (a, b) = form_junta_ext_pair(l_star, &u.junta_view(l_star), &v.junta_view(l_star));
    for (x, s) in [(u, a), (v, b)] {
        if x.recycled {
            continue;
        }
        x.junta = s;
        if s.marker {
            x.clock.marked = true;
            x.recycle();
        }
    }
}

/// `pc_call` on the initiator, dropping its level state on the first tick.
pub fn clock_step(params: &ClockParams, u: &mut JuntaClock, v: &JuntaClock) -> u32 {
    let (c, crossed) = pc_call(params, &u.clock, &v.clock);
    u.clock = c;
    if c.new_round && !u.recycled {
        u.recycle();
    }
    crossed
}

/// The bare clock: junta formation followed by `pc_call`. Output is the round.
#[derive(Debug, Clone, Copy)]
pub struct ClockProtocol {
    pub params: ClockParams,
    pub l_star: u8,
}

impl ClockProtocol {
    pub fn new(params: ClockParams, n: usize) -> Self {
        Self {
            params,
            l_star: l_star(n),
        }
    }
}

impl Protocol for ClockProtocol {
    type State = JuntaClock;
    type Input = ();
    type Output = u32;

    fn name(&self) -> String {
        "phase-clock".into()
    }

    fn init(&self, _: ()) -> JuntaClock {
        JuntaClock::FRESH
    }

    fn transition(&self, u: &JuntaClock, v: &JuntaClock) -> (JuntaClock, JuntaClock) {
        let (mut a, mut b) = (*u, *v);
        junta_step(self.l_star, &mut a, &mut b);
        clock_step(&self.params, &mut a, &b);
        (a, b)
    }

    fn output(&self, s: &JuntaClock) -> u32 {
        s.clock.round(&self.params)
    }

    fn state_key(&self, s: &JuntaClock) -> u64 {
        s.key(&self.params, self.l_star)
    }

    fn state_budget(&self) -> u64 {
        JuntaClock::state_count(&self.params, self.l_star)
    }
}

/// Round extent of the population at one probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundProbe {
    pub interaction: u64,
    pub min_round: u32,
    pub max_round: u32,
}

impl RoundProbe {
    pub fn spread(&self) -> u32 {
        self.max_round - self.min_round
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// `start[i]`: when the last agent reached round `i`.
    pub start: Vec<Option<u64>>,
    /// `end[i]`: when the first agent reached round `i + 1`.
    pub end: Vec<Option<u64>>,
    /// Largest `max - min` round difference seen.
    pub max_spread: u32,
}

impl RoundRecord {
    /// `end[i] - start[i]` for rounds where both are known.
    pub fn lengths(&self) -> Vec<(usize, i64)> {
        self.start
            .iter()
            .zip(&self.end)
            .enumerate()
            .filter_map(|(i, (s, e))| Some((i, (*e)? as i64 - (*s)? as i64)))
            .collect()
    }
}

/// Round start and end estimates from probes of an unbounded clock.
pub fn round_records(probes: &[RoundProbe]) -> RoundRecord {
    let top = probes.iter().map(|p| p.max_round).max().unwrap_or(0) as usize;
    let mut rec = RoundRecord {
        start: vec![None; top + 1],
        end: vec![None; top + 1],
        max_spread: 0,
    };
    for p in probes {
        rec.max_spread = rec.max_spread.max(p.spread());
        for i in 0..=p.min_round as usize {
            rec.start[i].get_or_insert(p.interaction);
        }
        for i in 0..p.max_round as usize {
            rec.end[i].get_or_insert(p.interaction);
        }
    }
    rec
}

/// Exact round boundaries, tracked on every interaction of an unbounded clock.
pub struct RoundWatch {
    m: u32,
    counts: Vec<u32>,
    min: usize,
    max: usize,
    /// Stop once the first agent reaches this round.
    stop_round: u32,
    /// Stop as soon as a round shorter than this ends.
    min_length: Option<u64>,
    pub start: Vec<u64>,
    pub end: Vec<u64>,
    pub probes: Vec<RoundProbe>,
    pub short_round: bool,
}

impl RoundWatch {
    pub fn new(m: u32, stop_round: u32, min_length: Option<u64>) -> Self {
        Self {
            m,
            counts: vec![0; stop_round as usize + 2],
            min: 0,
            max: 0,
            stop_round,
            min_length,
            start: vec![0],
            end: Vec::new(),
            probes: Vec::new(),
            short_round: false,
        }
    }

    fn round_of(&self, s: &JuntaClock) -> usize {
        ((s.clock.p / self.m) as usize).min(self.counts.len() - 1)
    }

    pub fn lengths(&self) -> Vec<i64> {
        self.end.iter().zip(&self.start).map(|(e, s)| *e as i64 - *s as i64).collect()
    }
}

impl Observer<JuntaClock> for RoundWatch {
    fn on_start(&mut self, states: &[JuntaClock]) {
        for s in states {
            let r = self.round_of(s);
            self.counts[r] += 1;
        }
    }

    fn on_interaction(&mut self, t: u64, _: AgentId, _: AgentId, before: (&JuntaClock, &JuntaClock), after: (&JuntaClock, &JuntaClock)) -> Flow {
        let (r0, r1) = (self.round_of(before.0), self.round_of(after.0));
        if r0 == r1 {
            return Flow::Continue;
        }
        self.counts[r0] -= 1;
        self.counts[r1] += 1;
        while r1 > self.max {
            self.max += 1;
            self.end.push(t);
            if let (Some(min_len), Some(&s)) = (self.min_length, self.start.get(self.max - 1)) {
                if t - s < min_len {
                    self.short_round = true;
                    return Flow::Stop;
                }
            }
            if self.max >= self.stop_round as usize {
                return Flow::Stop;
            }
        }
        while self.counts[self.min] == 0 {
            self.min += 1;
            self.start.push(t);
            // The first agent already left this round before the last one arrived.
            if self.min_length.is_some() && self.end.len() > self.min {
                self.short_round = true;
                return Flow::Stop;
            }
        }
        Flow::Continue
    }

    fn on_probe(&mut self, t: u64, _: &[JuntaClock]) -> Flow {
        self.probes.push(RoundProbe {
            interaction: t,
            min_round: self.min as u32,
            max_round: self.max as u32,
        });
        Flow::Continue
    }

    fn wants_interactions(&self) -> bool {
        true
    }
}

/// Runs an unbounded clock until the first agent reaches `rounds`, probing
/// every `cadence` interactions.
pub fn clock_trial(m: u32, n: usize, rounds: u32, cadence: u64, budget: u64, min_length: Option<u64>, rng: RngStream) -> Result<RoundWatch, EngineError> {
    let protocol = ClockProtocol::new(ClockParams::unbounded(m), n);
    let init = Configuration::from_inputs(&protocol, vec![(); n]);
    let mut watch = RoundWatch::new(m, rounds, min_length);
    let opts = TrialOptions {
        budget,
        cadence,
        stop_when_stable: false,
        census: false,
        check_budget: false,
    };
    run_trial(&protocol, init, &opts, rng, &mut watch)?;
    Ok(watch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub n: usize,
    pub d1: f64,
    pub m: u32,
    pub seed: u64,
    pub runs: u64,
    pub rounds: u32,
    /// Shortest round length over all runs, in units of `n ln n`.
    pub min_length_ratio: f64,
}

pub const CALIBRATION_RUNS: u64 = 20;
pub const CALIBRATION_ROUNDS: u32 = 50;
pub const CALIBRATION_MAX_M: u32 = 4096;

/// Whether every one of the first `CALIBRATION_ROUNDS` rounds lasts at least
/// `d1 n ln n` in all `CALIBRATION_RUNS` runs. Returns the shortest length
/// ratio seen, or `None` if a run failed the target.
pub fn check_round_lengths(m: u32, n: usize, d1: f64, seed: u64) -> Result<Option<f64>, EngineError> {
    let nlnn = n as f64 * (n as f64).ln();
    let target = (d1 * nlnn).ceil() as u64;
    // Generous: a round is far below 1000 n ln n for any m on the grid.
    let budget = (u64::from(CALIBRATION_ROUNDS) + 2) * (u64::from(m) + 8) * (200.0 * nlnn) as u64;
    let ratios: Vec<Option<f64>> = (0..CALIBRATION_RUNS)
        .into_par_iter()
        .map(|run| {
            let w = clock_trial(m, n, CALIBRATION_ROUNDS + 1, budget, budget, Some(target), RngStream::for_trial(seed, run))?;
            let lengths = w.lengths();
            if w.short_round || lengths.len() < CALIBRATION_ROUNDS as usize {
                return Ok(None);
            }
            let shortest = lengths.into_iter().take(CALIBRATION_ROUNDS as usize).min().unwrap_or(0);
            Ok((shortest >= target as i64).then_some(shortest as f64 / nlnn))
        })
        .collect::<Result<_, EngineError>>()?;
    Ok(ratios.into_iter().try_fold(f64::INFINITY, |acc, r| r.map(|x| acc.min(x))))
}

/// Smallest even `m` on the doubling grid `2, 4, ..., 4096` whose rounds all
/// last at least `d1 n ln n`.
pub fn calibrate_m(n: usize, d1: f64, seed: u64) -> Result<Calibration, ClockError> {
    let mut m = 2;
    while m <= CALIBRATION_MAX_M {
        if let Some(ratio) = check_round_lengths(m, n, d1, seed)? {
            return Ok(Calibration {
                n,
                d1,
                m,
                seed,
                runs: CALIBRATION_RUNS,
                rounds: CALIBRATION_ROUNDS,
                min_length_ratio: ratio,
            });
        }
        m *= 2;
    }
    Err(ClockError::CalibrationFailure {
        n,
        d1,
        max_m: CALIBRATION_MAX_M,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn at(p: u32, marked: bool) -> PhaseClockState {
        PhaseClockState {
            p,
            marked,
            ..Default::default()
        }
    }

    #[test]
    fn update_examples() {
        let k = ClockParams::new(24, 3);
        assert_eq!(pc_call(&k, &at(10, true), &at(12, false)).0.p, 13);
        assert_eq!(pc_call(&k, &at(10, false), &at(12, false)).0.p, 12);
        assert_eq!(pc_call(&k, &at(10, true), &at(3, false)).0.p, 10);
    }

    #[test]
    fn new_round_only_for_last_update() {
        let k = ClockParams::new(24, 3);
        let (u, crossed) = pc_call(&k, &at(23, false), &at(25, false));
        assert!(u.new_round);
        assert_eq!(crossed, 1);
        let (u, _) = pc_call(&k, &u, &at(25, false));
        assert!(!u.new_round);
    }

    #[test]
    fn wrap_sets_overflow_forever() {
        let k = ClockParams::new(24, 3);
        let (u, crossed) = pc_call(&k, &at(71, false), &at(1, false));
        assert_eq!((u.p, u.overflowed, u.new_round, crossed), (1, true, true, 1));
        let (u, _) = pc_call(&k, &u, &at(5, false));
        assert!(u.overflowed && u.p == 5);
        assert_eq!(pc_flags(&u), (true, false, false));
    }

    #[test]
    fn unbounded_never_overflows() {
        let k = ClockParams::unbounded(4);
        let (u, crossed) = pc_call(&k, &at(3, true), &at(1000, false));
        assert_eq!((u.p, u.overflowed, crossed), (1001, false, 250));
    }

    #[test]
    fn same_round_examples() {
        let k = ClockParams::new(24, 3);
        assert!(pc_same_round(&k, &at(5, false), &at(17, false)).unwrap());
        assert!(pc_different_round(&k, &at(25, false), &at(17, false)).unwrap());
        let k2 = ClockParams::new(24, 2);
        assert!(pc_different_round(&k2, &at(1, false), &at(47, false)).unwrap());
    }

    #[test]
    fn query_support_depends_on_r() {
        let k1 = ClockParams::new(24, 1);
        assert!(matches!(pc_same_round(&k1, &at(0, false), &at(0, false)), Err(ClockError::UnsupportedQuery { .. })));
        let k2 = ClockParams::new(24, 2);
        assert!(matches!(pc_smaller_round(&k2, &at(0, false), &at(0, false)), Err(ClockError::UnsupportedQuery { .. })));
    }

    #[test]
    fn order_examples() {
        let k = ClockParams::new(24, 3);
        assert!(pc_smaller_round(&k, &at(5, false), &at(30, false)).unwrap());
        assert!(pc_smaller_round(&k, &at(50, false), &at(3, false)).unwrap());
        assert!(pc_larger_round(&k, &at(3, false), &at(50, false)).unwrap());
        assert_eq!(pc_round_order(&k, &at(30, false), &at(40, false)).unwrap(), Ordering::Equal);
    }

    /// Checks the comparators against unwrapped phases for every pair at
    /// true round gap at most one.
    fn exhaustive(m: u32, r: u32) {
        let k = ClockParams::new(m, r);
        let ring = r * m;
        for a in 0..(2 * ring) {
            for b in a.saturating_sub(2 * m)..(a + 2 * m) {
                let (ra, rb) = (a / m, b / m);
                if ra.abs_diff(rb) > 1 {
                    continue;
                }
                let (u, v) = (at(a % ring, false), at(b % ring, false));
                assert_eq!(pc_same_round(&k, &u, &v).unwrap(), ra == rb, "m={m} r={r} a={a} b={b}");
                if r >= 3 {
                    assert_eq!(pc_round_order(&k, &u, &v).unwrap(), ra.cmp(&rb), "m={m} r={r} a={a} b={b}");
                }
            }
        }
    }

    #[test]
    fn comparators_exhaustive() {
        for (m, r) in [(24, 2), (24, 3), (4, 3), (6, 5), (2, 4)] {
            exhaustive(m, r);
        }
    }

    #[test]
    fn no_marked_agent_keeps_clock_at_zero() {
        let k = ClockParams::new(8, 3);
        let mut states = vec![at(0, false); 6];
        let mut rng = RngStream::new(4);
        for _ in 0..5000 {
            let (u, v) = crate::engine::pick_pair(&mut rng, 6).unwrap();
            states[u] = pc_call(&k, &states[u], &states[v]).0;
        }
        assert!(states.iter().all(|s| s.p == 0));
    }

    #[test]
    fn round_records_from_probes() {
        let probes = [
            RoundProbe { interaction: 0, min_round: 0, max_round: 0 },
            RoundProbe { interaction: 10, min_round: 0, max_round: 1 },
            RoundProbe { interaction: 20, min_round: 1, max_round: 1 },
            RoundProbe { interaction: 30, min_round: 1, max_round: 2 },
        ];
        let rec = round_records(&probes);
        assert_eq!(rec.start, vec![Some(0), Some(20), None]);
        assert_eq!(rec.end, vec![Some(10), Some(30), None]);
        assert_eq!(rec.lengths(), vec![(0, 10), (1, 10)]);
        assert_eq!(rec.max_spread, 1);
    }

    #[test]
    fn recycling_drops_level_on_first_tick() {
        let k = ClockParams::new(4, 3);
        let mut u = JuntaClock::FRESH;
        u.junta = JuntaState { interacted: true, ..JuntaState::FRESH };
        u.clock.p = 3;
        let mut v = JuntaClock::FRESH;
        v.clock.p = 5;
        v.recycled = true;
        clock_step(&k, &mut u, &v);
        assert!(u.recycled && u.clock.new_round && u.junta == JuntaState::FRESH);
    }

    #[test]
    fn m2_rounds_too_short() {
        let n = 256;
        assert_eq!(check_round_lengths(2, n, 1.0, 3).unwrap(), None);
    }

    proptest! {
        #[test]
        fn clock_never_regresses(p in 0u32..72, q in 0u32..72, marked in any::<bool>()) {
            let k = ClockParams::new(24, 3);
            let (u, _) = pc_call(&k, &at(p, marked), &at(q, false));
            let d = (u.p + 72 - p) % 72;
            prop_assert!(d < 36);
            prop_assert!(u.key() < k.state_count().unwrap());
        }

        #[test]
        fn bare_clock_stays_in_budget(n in 2usize..40, seed in any::<u64>()) {
            let p = ClockProtocol::new(ClockParams::new(4, 3), n);
            let init = Configuration::from_inputs(&p, vec![(); n]);
            let run = run_trial(&p, init, &TrialOptions::with_budget(20_000), RngStream::new(seed), &mut ());
            prop_assert!(run.is_ok());
        }

        #[test]
        fn recycled_clock_behaves_identically(p in 0u32..72, q in 0u32..72, marked in any::<bool>()) {
            // Overwriting the level state after the first tick must not change the clock.
            let k = ClockParams::new(24, 3);
            let mut a = JuntaClock { clock: at(p, marked), recycled: true, ..JuntaClock::FRESH };
            let mut b = a;
            b.junta = JuntaState { level: 0, interacted: true, marked_seen: 2, ..JuntaState::FRESH };
            let v = JuntaClock { clock: at(q, false), recycled: true, ..JuntaClock::FRESH };
            clock_step(&k, &mut a, &v);
            clock_step(&k, &mut b, &v);
            prop_assert_eq!(a.clock, b.clock);
        }
    }
}

//! Leader election over a junta-driven phase clock.
//!
//! Junta members are the contenders. From the second round on, every
//! contender samples a block of random bits per round from synthetic coins;
//! the largest block spreads by one-way epidemic and contenders holding a
//! smaller block drop out. A second, decelerated phase clock decides when the
//! race is over: contenders that see it tick enter the terminal leader state,
//! and everybody else follows. Until an agent is terminal it reports a
//! two-state backup election.

use serde::{Deserialize, Serialize};

use crate::engine::{AgentId, Flow, Observer, Protocol};
use crate::phaseclock::{clock_step, junta_step, pc_call, pc_same_round, ClockParams, JuntaClock, PhaseClockState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Leader,
    Follower,
}

/// Two-state backup: two leaders meet and the responder steps down.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Backup2 {
    #[default]
    L,
    F,
}

pub fn backup2_interact(u: Backup2, v: Backup2) -> (Backup2, Backup2) {
    match (u, v) {
        (Backup2::L, Backup2::L) => (Backup2::L, Backup2::F),
        other => other,
    }
}

impl Backup2 {
    pub fn role(self) -> Role {
        match self {
            Backup2::L => Role::Leader,
            Backup2::F => Role::Follower,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Backup2Protocol;

impl Protocol for Backup2Protocol {
    type State = Backup2;
    type Input = ();
    type Output = Role;

    fn name(&self) -> String {
        "backup2".into()
    }

    fn init(&self, _: ()) -> Backup2 {
        Backup2::L
    }

    fn transition(&self, u: &Backup2, v: &Backup2) -> (Backup2, Backup2) {
        backup2_interact(*u, *v)
    }

    fn output(&self, s: &Backup2) -> Role {
        s.role()
    }

    fn state_key(&self, s: &Backup2) -> u64 {
        u64::from(*s == Backup2::F)
    }

    fn state_budget(&self) -> u64 {
        2
    }

    fn is_stable(&self, states: &[Backup2]) -> Option<bool> {
        Some(states.iter().filter(|s| **s == Backup2::L).count() <= 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Terminal {
    #[default]
    None,
    /// `q_l`
    Leader,
    /// `q_f`
    Follower,
}

fn ceil_log2(x: f64) -> i64 {
    (x.log2() - 1e-9).ceil() as i64
}

/// `max(1, floor(log2 s) - ceil(log2 log2 s))`; `s <= 2` gives 1.
pub fn block_len(s: u32) -> u8 {
    let ls = f64::from(s).log2();
    let lls = if ls <= 1.0 { 0 } else { ceil_log2(ls) };
    (ls.floor() as i64 - lls).max(1) as u8
}

/// `max(1, ceil(log2 log2 n) - ceil(log2 log2 s))`.
pub fn marking_trials(n: usize, s: u32) -> u8 {
    let lln = ceil_log2((n.max(4) as f64).log2());
    let ls = f64::from(s).log2();
    let lls = if ls <= 1.0 { 0 } else { ceil_log2(ls) };
    (lln - lls).max(1) as u8
}

/// Initiated interactions before the marking trials start, `ceil(log2 log2 n)`.
pub fn coin_warmup(n: usize) -> u8 {
    ceil_log2((n.max(4) as f64).log2()).max(1) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeaderParams {
    pub s: u32,
    pub clock: ClockParams,
    pub l_star: u8,
    pub block: u8,
    pub warmup: u8,
    pub marking_trials: u8,
    /// Phases per round of the decelerated clock; it ticks once it crosses its first round.
    pub slow_m: u32,
}

impl LeaderParams {
    /// Slow rounds span this many fast rounds' worth of phases.
    pub const SLOW_FACTOR: u32 = 4;

    pub fn new(n: usize, s: u32, m: u32) -> Self {
        assert!(s >= 2, "s must be at least 2");
        Self {
            s,
            clock: ClockParams::new(m, 3),
            l_star: crate::junta::l_star(n),
            block: block_len(s),
            warmup: coin_warmup(n),
            marking_trials: marking_trials(n, s),
            slow_m: Self::SLOW_FACTOR * m,
        }
    }

    fn slow_params(&self) -> ClockParams {
        ClockParams::new(self.slow_m, 3)
    }

    fn marking_done(&self) -> u8 {
        self.warmup + self.marking_trials
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LeaderState {
    /// Synthetic coin; toggles in every interaction.
    pub flip: bool,
    /// Initiated interactions spent in the marking phase so far.
    pub marking_step: u8,
    /// Every marking trial read a 1 so far.
    pub marking_ok: bool,
    pub slow_marked: bool,
    pub jc: JuntaClock,
    /// Cleared when the agent leaves the junta race unmarked or loses a comparison.
    pub contender: bool,
    pub sample: u16,
    pub bits: u8,
    pub best: u16,
    /// Next initiated interaction updates the decelerated clock.
    pub pending: bool,
    pub slow: PhaseClockState,
    pub ticked: bool,
    pub terminal: Terminal,
    pub backup: Backup2,
}

impl LeaderState {
    pub const INIT: LeaderState = LeaderState {
        flip: false,
        marking_step: 0,
        marking_ok: true,
        slow_marked: false,
        jc: JuntaClock::FRESH,
        contender: true,
        sample: 0,
        bits: 0,
        best: 0,
        pending: false,
        slow: PhaseClockState {
            p: 0,
            marked: false,
            new_round: false,
            overflowed: false,
        },
        ticked: false,
        terminal: Terminal::None,
        backup: Backup2::L,
    };

    /// A contender that can still take part in the comparisons.
    pub fn racing(&self) -> bool {
        self.contender && self.terminal == Terminal::None
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Leader {
    pub params: LeaderParams,
}

impl Leader {
    pub fn new(params: LeaderParams) -> Self {
        Self { params }
    }

    /// Past the first round: the synthetic coins have had time to mix.
    fn sampling_round(&self, c: &PhaseClockState) -> bool {
        c.p >= self.params.clock.m || c.overflowed
    }

    fn marking_step(&self, u: &mut LeaderState, coin: bool) {
        let done = self.params.marking_done();
        if u.marking_step >= done {
            return;
        }
        if u.marking_step >= self.params.warmup {
            u.marking_ok &= coin;
        }
        u.marking_step += 1;
        if u.marking_step == done {
            u.slow_marked = u.marking_ok;
        }
    }

    /// Junta, fast clock, sampling, max broadcast and elimination.
    fn main_step(&self, u: &mut LeaderState, v: &mut LeaderState, coin: bool) {
        let k = &self.params.clock;
        let block = self.params.block;
        junta_step(self.params.l_star, &mut u.jc, &mut v.jc);
        for x in [&mut *u, &mut *v] {
            if x.jc.recycled && !x.jc.clock.marked {
                x.contender = false;
            }
        }
        if clock_step(k, &mut u.jc, &v.jc) > 0 {
            u.sample = 0;
            u.bits = 0;
            u.best = 0;
        }
        if u.racing() && u.jc.clock.marked && u.bits < block && self.sampling_round(&u.jc.clock) {
            u.sample = (u.sample << 1) | u16::from(coin);
            u.bits += 1;
            if u.bits == block {
                u.best = u.best.max(u.sample);
            }
        }
        if pc_same_round(k, &u.jc.clock, &v.jc.clock).unwrap_or(false) {
            v.best = v.best.max(u.best);
        }
        for x in [u, v] {
            if x.racing() && x.jc.clock.marked && self.sampling_round(&x.jc.clock) {
                // Compare the completed prefix only.
                if x.bits > 0 && x.sample < x.best >> (block - x.bits) {
                    x.contender = false;
                }
            }
        }
    }

    fn terminal_step(u: &mut LeaderState, v: &mut LeaderState) {
        use Terminal::*;
        match (u.terminal, v.terminal) {
            (Leader, Leader) => v.terminal = Follower,
            (None, Leader | Follower) if !u.contender => u.terminal = Follower,
            (Leader | Follower, None) if !v.contender => v.terminal = Follower,
            _ => {}
        }
    }

    fn is_stable_config(&self, states: &[LeaderState]) -> bool {
        if states.iter().all(|s| s.terminal != Terminal::None) {
            return states.iter().filter(|s| s.terminal == Terminal::Leader).count() == 1;
        }
        // Without slow-marked agents the decelerated clock never moves.
        let frozen = states.iter().all(|s| s.terminal == Terminal::None && s.marking_step >= self.params.marking_done() && !s.slow_marked && !s.pending);
        frozen && states.iter().filter(|s| s.backup == Backup2::L).count() == 1
    }

    fn block_radix(&self) -> u64 {
        1 << self.params.block
    }
}

impl Protocol for Leader {
    type State = LeaderState;
    type Input = ();
    type Output = Role;

    fn name(&self) -> String {
        "leader".into()
    }

    fn init(&self, _: ()) -> LeaderState {
        LeaderState::INIT
    }

    fn transition(&self, u: &LeaderState, v: &LeaderState) -> (LeaderState, LeaderState) {
        let (mut a, mut b) = (*u, *v);
        let coin = b.flip;
        a.flip = !a.flip;
        b.flip = !b.flip;
        (a.backup, b.backup) = backup2_interact(a.backup, b.backup);
        Self::terminal_step(&mut a, &mut b);
        self.marking_step(&mut a, coin);
        if a.pending {
            a.pending = false;
            a.slow.marked = a.jc.clock.marked;
            let (c, crossed) = pc_call(&self.params.slow_params(), &a.slow, &b.slow);
            a.slow = c;
            if crossed > 0 {
                a.ticked = true;
            }
        } else {
            if b.slow_marked {
                a.pending = true;
            }
            if a.terminal == Terminal::None || b.terminal == Terminal::None {
                self.main_step(&mut a, &mut b, coin);
            }
        }
        if a.ticked && a.racing() {
            a.terminal = Terminal::Leader;
        }
        (a, b)
    }

    fn output(&self, s: &LeaderState) -> Role {
        match s.terminal {
            Terminal::Leader => Role::Leader,
            Terminal::Follower => Role::Follower,
            Terminal::None => s.backup.role(),
        }
    }

    fn state_key(&self, s: &LeaderState) -> u64 {
        let p = &self.params;
        let block = self.block_radix();
        if u64::from(s.sample) >= block || u64::from(s.best) >= block || s.bits > p.block || s.marking_step > p.marking_done() {
            return u64::MAX;
        }
        let jc = s.jc.key(&p.clock, p.l_star);
        let slow = s.slow.key();
        let slow_count = p.slow_params().state_count().unwrap_or(0);
        if jc == u64::MAX || slow >= slow_count {
            return u64::MAX;
        }
        let terminal = match s.terminal {
            Terminal::None => 0,
            Terminal::Leader => 1,
            Terminal::Follower => 2,
        };
        let mut key = jc;
        key = key * slow_count + slow;
        key = key * block + u64::from(s.sample);
        key = key * block + u64::from(s.best);
        key = key * (u64::from(p.block) + 1) + u64::from(s.bits);
        key = key * (u64::from(p.marking_done()) + 1) + u64::from(s.marking_step);
        key = key * 3 + terminal;
        for bit in [s.flip, s.marking_ok, s.slow_marked, s.contender, s.pending, s.ticked, s.backup == Backup2::F] {
            key = key * 2 + u64::from(bit);
        }
        key
    }

    fn state_budget(&self) -> u64 {
        let p = &self.params;
        let block = self.block_radix();
        JuntaClock::state_count(&p.clock, p.l_star)
            * p.slow_params().state_count().unwrap_or(0)
            * block
            * block
            * (u64::from(p.block) + 1)
            * (u64::from(p.marking_done()) + 1)
            * 3
            * (1 << 7)
    }

    fn is_stable(&self, states: &[LeaderState]) -> Option<bool> {
        Some(self.is_stable_config(states))
    }
}

/// Leader-election bookkeeping for the extras column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LeaderWatch {
    /// Interaction at which the first agent entered `q_l`.
    pub first_tick: Option<u64>,
    /// Most fast-clock rounds completed by any agent.
    pub rounds: u64,
    /// Racing contenders when the population's leading agent entered each round.
    pub contenders_per_round: Vec<u64>,
    /// Contenders whose block was still incomplete when their round ended.
    pub incomplete_blocks: u64,
    #[serde(skip)]
    params: Option<LeaderParams>,
    #[serde(skip)]
    crossings: Vec<u64>,
    #[serde(skip)]
    racing: u64,
}

impl LeaderWatch {
    pub fn new(n: usize, params: LeaderParams) -> Self {
        Self {
            first_tick: None,
            rounds: 0,
            contenders_per_round: Vec::new(),
            incomplete_blocks: 0,
            params: Some(params),
            crossings: vec![0; n],
            racing: n as u64,
        }
    }
}

impl Observer<LeaderState> for LeaderWatch {
    fn on_start(&mut self, states: &[LeaderState]) {
        self.racing = states.iter().filter(|s| s.racing()).count() as u64;
    }

    fn on_interaction(&mut self, t: u64, u: AgentId, _: AgentId, before: (&LeaderState, &LeaderState), after: (&LeaderState, &LeaderState)) -> Flow {
        for (b, a) in [(before.0, after.0), (before.1, after.1)] {
            if b.racing() && !a.racing() {
                self.racing -= 1;
            }
            if a.terminal == Terminal::Leader && b.terminal != Terminal::Leader && self.first_tick.is_none() {
                self.first_tick = Some(t);
            }
        }
        let (b, a) = (before.0, after.0);
        let Some(p) = self.params else {
            return Flow::Continue;
        };
        if a.jc.clock.round(&p.clock) != b.jc.clock.round(&p.clock) {
            let sampling = b.jc.clock.p >= p.clock.m || b.jc.clock.overflowed;
            if b.racing() && b.jc.clock.marked && sampling && b.bits < p.block {
                self.incomplete_blocks += 1;
            }
            self.crossings[u] += 1;
            if self.crossings[u] > self.rounds {
                self.rounds = self.crossings[u];
                self.contenders_per_round.push(self.racing);
            }
        }
        Flow::Continue
    }

    fn wants_interactions(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{pick_pair, RngStream};
    use proptest::prelude::*;

    #[test]
    fn backup2_table() {
        assert_eq!(backup2_interact(Backup2::L, Backup2::L), (Backup2::L, Backup2::F));
        assert_eq!(backup2_interact(Backup2::L, Backup2::F), (Backup2::L, Backup2::F));
        assert_eq!(backup2_interact(Backup2::F, Backup2::F), (Backup2::F, Backup2::F));
    }

    #[test]
    fn block_and_trials() {
        assert_eq!(block_len(2), 1);
        assert_eq!(block_len(4), 1);
        assert_eq!(block_len(16), 2);
        assert_eq!(block_len(256), 5);
        assert_eq!(marking_trials(1 << 13, 2), 4);
        assert_eq!(marking_trials(1 << 13, 256), 1);
        assert_eq!(marking_trials(1 << 16, 2), 4);
        assert_eq!(marking_trials(16, 256), 1);
    }

    fn run_until(leader: &Leader, n: usize, seed: u64, mut done: impl FnMut(&[LeaderState]) -> bool, mut each: impl FnMut(&LeaderState, &LeaderState)) -> Vec<LeaderState> {
        let mut rng = RngStream::new(seed);
        let mut states = vec![LeaderState::INIT; n];
        for t in 0.. {
            if t % n == 0 && done(&states) {
                break;
            }
            let (i, j) = pick_pair(&mut rng, n).unwrap();
            each(&states[i], &states[j]);
            let (a, b) = leader.transition(&states[i], &states[j]);
            states[i] = a;
            states[j] = b;
        }
        states
    }

    #[test]
    fn synthetic_coin_is_fair() {
        let n = 1024;
        let leader = Leader::new(LeaderParams::new(n, 2, 32));
        let (mut heads, mut reads) = (0u64, 0u64);
        let (mut t, mut checks) = (0u64, 0);
        let warm = (n as f64 * (n as f64).ln()) as u64;
        run_until(
            &leader,
            n,
            11,
            |_| {
                checks += 1;
                checks > 40
            },
            |_, v| {
                t += 1;
                if t > warm {
                    reads += 1;
                    heads += u64::from(v.flip);
                }
            },
        );
        let frac = heads as f64 / reads as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn marking_fraction() {
        let n = 4096;
        let params = LeaderParams::new(n, 2, 32);
        let leader = Leader::new(params);
        let states = run_until(&leader, n, 5, |s| s.iter().all(|x| x.marking_step >= params.marking_done()), |_, _| {});
        let marked = states.iter().filter(|s| s.slow_marked).count() as f64;
        let expected = n as f64 / f64::from(1u32 << params.marking_trials);
        assert!(marked > 0.6 * expected && marked < 1.4 * expected, "{marked} vs {expected}");
    }

    proptest! {
        #[test]
        fn backup_leader_survives(pairs in proptest::collection::vec((0usize..6, 0usize..6), 1..400)) {
            let n = 6;
            let leader = Leader::new(LeaderParams::new(n, 2, 4));
            let mut states = vec![LeaderState::INIT; n];
            for (i, j) in pairs {
                if i == j {
                    continue;
                }
                let before = states.iter().filter(|s| s.terminal == Terminal::Leader).count();
                let (a, b) = leader.transition(&states[i], &states[j]);
                states[i] = a;
                states[j] = b;
                prop_assert!(states.iter().any(|s| s.backup == Backup2::L));
                prop_assert!(states.iter().all(|s| leader.state_key(s) < leader.state_budget()));
                let after = states.iter().filter(|s| s.terminal == Terminal::Leader).count();
                prop_assert!(after <= before + 1);
            }
        }
    }
}

//! Exact and approximate two-opinion majority driven by a phase clock.
//!
//! Every agent carries an integer load whose sign is its opinion. In each
//! round of the phase clock agents balance their loads and, at the start of
//! the next round, multiply them by `s`. Cancellation keeps the total bias
//! intact, so after `log_s(n / alpha)` rounds every load carries the majority
//! sign.
//!
//! Loads are multiplied lazily: an agent whose clock crossed a boundary
//! multiplies at the start of its next initiated interaction. Until then its
//! load still belongs to the previous round, which is what [`epoch`] reports.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::engine::Protocol;
use crate::junta::{form_junta_pair, l_star};
use crate::phaseclock::{clock_step, junta_step, pc_call, pc_same_round, ClockParams, JuntaClock, PhaseClockState, Rounds};

/// Four-state backup: strong `A`/`B`, weak `a`/`b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
pub enum Backup4 {
    #[default]
    A,
    B,
    /// Weak `a`.
    WeakA,
    /// Weak `b`.
    WeakB,
}

impl Backup4 {
    pub fn from_opinion(positive: bool) -> Self {
        if positive {
            Backup4::A
        } else {
            Backup4::B
        }
    }

    pub fn output(self) -> i8 {
        match self {
            Backup4::A | Backup4::WeakA => 1,
            Backup4::B | Backup4::WeakB => -1,
        }
    }

    pub fn is_strong(self) -> bool {
        matches!(self, Backup4::A | Backup4::B)
    }

    fn index(self) -> u64 {
        match self {
            Backup4::A => 0,
            Backup4::B => 1,
            Backup4::WeakA => 2,
            Backup4::WeakB => 3,
        }
    }
}

/// Strong opposites cancel to weak; a strong agent converts an opposite weak one.
pub fn backup4_interact(u: Backup4, v: Backup4) -> (Backup4, Backup4) {
    use Backup4::*;
    match (u, v) {
        (A, B) => (WeakA, WeakB),
        (B, A) => (WeakB, WeakA),
        (A, WeakB) => (A, WeakA),
        (WeakB, A) => (WeakA, A),
        (B, WeakA) => (B, WeakB),
        (WeakA, B) => (WeakB, B),
        other => other,
    }
}

/// Backup4 as a protocol on its own.
#[derive(Debug, Clone, Copy, Default)]
pub struct Backup4Protocol;

impl Protocol for Backup4Protocol {
    type State = Backup4;
    type Input = bool;
    type Output = i8;

    fn name(&self) -> String {
        "backup4".into()
    }

    fn init(&self, positive: bool) -> Backup4 {
        Backup4::from_opinion(positive)
    }

    fn transition(&self, u: &Backup4, v: &Backup4) -> (Backup4, Backup4) {
        backup4_interact(*u, *v)
    }

    fn output(&self, s: &Backup4) -> i8 {
        s.output()
    }

    fn state_key(&self, s: &Backup4) -> u64 {
        s.index()
    }

    fn state_budget(&self) -> u64 {
        4
    }

    fn is_stable(&self, states: &[Backup4]) -> Option<bool> {
        Some(backup_settled(states.iter().copied()).is_some())
    }
}

/// The common output if every agent's backup already agrees; such a
/// configuration never changes again.
pub fn backup_settled(states: impl IntoIterator<Item = Backup4>) -> Option<i8> {
    let mut out = None;
    for s in states {
        match out {
            None => out = Some(s.output()),
            Some(o) if o != s.output() => return None,
            _ => {}
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Plain clocked load balancing; correct whp but never stabilizes.
    Clocked,
    /// Finished/error bits over a bounded clock, with a four-state backup.
    Stable,
    /// Clocked majority over a three-round clock with a junta-size counter.
    Convergent,
    /// Stable variant over an unbounded clock and the non-recycling junta.
    Uniform,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Clocked => "clocked-majority",
            Variant::Stable => "stable-majority",
            Variant::Convergent => "convergent-majority",
            Variant::Uniform => "uniform-majority",
        }
    }
}

/// What happens when a multiplied load leaves `[-2s, 2s]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapMode {
    /// Keep the value; the engine's state-budget check rejects it.
    Assert,
    /// Saturate at the cap.
    Clamp,
}

/// When two finished agents count as being in different rounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundCheck {
    /// Clock rounds differ.
    Strict,
    /// Load epochs differ.
    Epoch,
    /// Load epochs are more than one round apart.
    Adjacent,
}

/// Which agents may balance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceRule {
    /// Same clock round.
    SameRound,
    /// Same load epoch.
    SameEpoch,
}

/// What a spoiled agent resets in the uniform variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpoilReset {
    /// Phase to 0 and load to the initial opinion.
    Literal,
    /// As `Literal`, but agents do not balance before their first multiply,
    /// and a reset after one sets the error bit.
    HoldFirstRound,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MajorityParams {
    pub variant: Variant,
    pub s: u32,
    pub clock: ClockParams,
    /// FormJuntaExt marking level (ignored by the uniform variant).
    pub l_star: u8,
    pub cap_mode: CapMode,
    /// Finishing needs `|load| >= finish_threshold` at a round boundary.
    pub finish_threshold: i32,
    /// Exit threshold of the convergent counter.
    pub counter_max: u16,
    pub round_check: RoundCheck,
    pub balance_rule: BalanceRule,
    pub spoil_reset: SpoilReset,
    /// Phase bound declared in the uniform variant's state budget.
    pub max_phase: u32,
}

/// Smallest `r` with `s^r >= 5n`.
pub fn stable_rounds(n: usize, s: u32) -> u32 {
    let target = 5 * n as u128;
    let mut r = 0;
    let mut pow = 1u128;
    while pow < target {
        pow *= u128::from(s);
        r += 1;
    }
    r.max(1)
}

impl MajorityParams {
    pub const DEFAULT_COUNTER_MAX: u16 = 600;
    pub const DEFAULT_FINISH_THRESHOLD: i32 = 3;

    fn base(variant: Variant, n: usize, s: u32, clock: ClockParams) -> Self {
        assert!(s >= 2, "s must be at least 2");
        Self {
            variant,
            s,
            clock,
            l_star: l_star(n),
            cap_mode: CapMode::Assert,
            finish_threshold: Self::DEFAULT_FINISH_THRESHOLD,
            counter_max: Self::DEFAULT_COUNTER_MAX,
            round_check: RoundCheck::Adjacent,
            balance_rule: BalanceRule::SameEpoch,
            spoil_reset: SpoilReset::Literal,
            max_phase: 0,
        }
    }

    pub fn clocked(n: usize, s: u32, r: u32, m: u32) -> Self {
        Self::base(Variant::Clocked, n, s, ClockParams::new(m, r))
    }

    /// Ring of `ceil(log_s(5n))` rounds.
    pub fn stable(n: usize, s: u32, m: u32) -> Self {
        Self::base(Variant::Stable, n, s, ClockParams::new(m, stable_rounds(n, s)))
    }

    /// Three-round ring; loads saturate at the cap once the run outlives the analysis.
    pub fn convergent(n: usize, s: u32, m: u32) -> Self {
        Self {
            cap_mode: CapMode::Clamp,
            ..Self::base(Variant::Convergent, n, s, ClockParams::new(m, 3))
        }
    }

    pub fn uniform(n: usize, s: u32, m: u32) -> Self {
        let rounds = 2 * stable_rounds(n, s) + 6;
        Self {
            max_phase: rounds * m,
            spoil_reset: SpoilReset::HoldFirstRound,
            ..Self::base(Variant::Uniform, n, s, ClockParams::unbounded(m))
        }
    }

    pub fn cap(&self) -> i32 {
        2 * self.s as i32
    }

    pub fn r(&self) -> Option<u32> {
        match self.clock.rounds {
            Rounds::Finite(r) => Some(r),
            Rounds::Unbounded => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MajorityState {
    pub load: i32,
    /// Sign of the last nonzero load; reported while the load is 0.
    pub positive: bool,
    pub jc: JuntaClock,
    pub finished: bool,
    pub error: bool,
    pub count: u16,
    pub backup: Backup4,
    /// Initial opinion.
    pub opinion: bool,
}

impl MajorityState {
    pub fn sign(&self) -> i8 {
        match self.load.cmp(&0) {
            Ordering::Greater => 1,
            Ordering::Less => -1,
            Ordering::Equal if self.positive => 1,
            Ordering::Equal => -1,
        }
    }

    fn set_load(&mut self, load: i32) {
        self.load = load;
        if load != 0 {
            self.positive = load > 0;
        }
    }
}

/// Round of the agent's load: its clock round, minus one while a multiply is pending.
pub fn epoch(params: &ClockParams, c: &PhaseClockState) -> u32 {
    let round = c.round(params);
    let pending = u32::from(c.new_round);
    match params.rounds {
        Rounds::Finite(r) => (round + r - pending) % r,
        Rounds::Unbounded => round.saturating_sub(pending),
    }
}

/// Round distance, circular on a finite ring.
fn epoch_distance(params: &ClockParams, a: u32, b: u32) -> u32 {
    match params.rounds {
        Rounds::Finite(r) => {
            let d = (a + r - b) % r;
            d.min(r - d)
        }
        Rounds::Unbounded => a.abs_diff(b),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Majority {
    pub params: MajorityParams,
}

impl Majority {
    pub fn new(params: MajorityParams) -> Self {
        Self { params }
    }

    fn multiply(&self, load: i32) -> i32 {
        let x = load.saturating_mul(self.params.s as i32);
        match self.params.cap_mode {
            CapMode::Assert => x,
            CapMode::Clamp => x.clamp(-self.params.cap(), self.params.cap()),
        }
    }

    /// Clocked step on the initiator `u` and responder `v`. Returns the number of
    /// round boundaries `u`'s clock crossed.
    fn clocked_m(&self, u: &mut MajorityState, v: &mut MajorityState) -> u32 {
        let k = &self.params.clock;
        let multiplied = u.jc.clock.new_round;
        if multiplied {
            let x = self.multiply(u.load);
            u.set_load(x);
        }
        let balance = match self.params.balance_rule {
            BalanceRule::SameRound => pc_same_round(k, &u.jc.clock, &v.jc.clock).unwrap_or(false),
            BalanceRule::SameEpoch => u.jc.clock.round(k) == epoch(k, &v.jc.clock),
        };
        let hold = self.params.variant == Variant::Uniform
            && self.params.spoil_reset == SpoilReset::HoldFirstRound
            && (u.jc.clock.round(k) == 0 || epoch(k, &v.jc.clock) == 0);
        if balance && !hold {
            let (a, b) = crate::primitives::lb_transition(i64::from(u.load), i64::from(v.load));
            u.set_load(a as i32);
            v.set_load(b as i32);
        }
        if self.params.variant == Variant::Uniform {
            // The level state must survive ticks here: FormJunta never recycles.
            let (c, crossed) = pc_call(k, &u.jc.clock, &v.jc.clock);
            u.jc.clock = c;
            return crossed;
        }
        clock_step(k, &mut u.jc, &v.jc)
    }

    fn rounds_disagree(&self, u: &MajorityState, v: &MajorityState) -> bool {
        let k = &self.params.clock;
        match self.params.round_check {
            RoundCheck::Strict => u.jc.clock.round(k) != v.jc.clock.round(k),
            RoundCheck::Epoch => epoch(k, &u.jc.clock) != epoch(k, &v.jc.clock),
            RoundCheck::Adjacent => epoch_distance(k, epoch(k, &u.jc.clock), epoch(k, &v.jc.clock)) > 1,
        }
    }

    /// Stable step, after the backup step.
    fn stable_step(&self, u: &mut MajorityState, v: &mut MajorityState) {
        let c = &u.jc.clock;
        if (c.new_round && u.load.abs() >= self.params.finish_threshold) || c.overflowed {
            u.finished = true;
        }
        // A wrapped responder is finished too: balancing with it could mix
        // loads that are a whole ring apart.
        if v.jc.clock.overflowed {
            v.finished = true;
        }
        if u.finished || v.finished {
            u.finished = true;
            v.finished = true;
            if self.rounds_disagree(u, v) || u.load.signum() != v.load.signum() || u.error || v.error {
                u.error = true;
                v.error = true;
            }
            return;
        }
        if self.clocked_m(u, v) > 1 {
            // Jumped a round without multiplying for it.
            u.error = true;
        }
    }

    /// Convergent step, after the backup step.
    fn convergent_step(&self, u: &mut MajorityState, v: &mut MajorityState) {
        let max = self.params.counter_max;
        if u.count >= max {
            return;
        }
        if v.jc.clock.marked || v.count >= max {
            u.count += 1;
        } else {
            u.count = 0;
        }
        self.clocked_m(u, v);
    }

    /// FormJunta for the uniform variant; a newly spoiled agent restarts.
    fn original_junta_step(&self, u: &mut MajorityState, v: &mut MajorityState) {
        let (ju, jv) = form_junta_pair(&u.jc.junta, &v.jc.junta);
        for (x, j) in [(u, ju), (v, jv)] {
            let spoiled_now = j.spoiled && !x.jc.junta.spoiled;
            x.jc.junta = j;
            x.jc.clock.marked = j.marker;
            if spoiled_now {
                let k = &self.params.clock;
                if self.params.spoil_reset == SpoilReset::HoldFirstRound && epoch(k, &x.jc.clock) > 0 {
                    x.error = true;
                }
                x.jc.clock.p = 0;
                x.jc.clock.new_round = false;
                x.set_load(if x.opinion { 1 } else { -1 });
            }
        }
    }

    pub fn started(&self, s: &MajorityState) -> bool {
        s.jc.clock.started()
    }

    /// Every configuration reachable from `states` has the same outputs.
    /// Sufficient, not necessary.
    fn stable_predicate(&self, states: &[MajorityState]) -> bool {
        let Some(first) = states.first() else {
            return true;
        };
        let sigma = first.load.signum();
        if sigma == 0 || states.iter().any(|s| s.load.signum() != sigma) {
            return false;
        }
        let backup_ok = || backup_settled(states.iter().map(|s| s.backup)) == Some(sigma as i8);
        match self.params.variant {
            Variant::Clocked => true,
            Variant::Convergent => backup_ok(),
            Variant::Stable | Variant::Uniform => {
                if states.iter().any(|s| !s.finished || s.error) {
                    return false;
                }
                let k = &self.params.clock;
                let mut epochs: Vec<u32> = states.iter().map(|s| epoch(k, &s.jc.clock)).collect();
                let mut rounds: Vec<u32> = states.iter().map(|s| s.jc.clock.round(k)).collect();
                epochs.sort_unstable();
                epochs.dedup();
                rounds.sort_unstable();
                rounds.dedup();
                let rounds_ok = match self.params.round_check {
                    RoundCheck::Strict => rounds.len() == 1,
                    RoundCheck::Epoch => epochs.len() == 1,
                    RoundCheck::Adjacent => epochs
                        .iter()
                        .all(|a| epochs.iter().all(|b| epoch_distance(k, *a, *b) <= 1)),
                };
                if !rounds_ok {
                    return false;
                }
                if states.iter().any(|s| !self.started(s)) && !backup_ok() {
                    return false;
                }
                if self.params.variant == Variant::Uniform {
                    // A later spoil would reset a finished agent.
                    let top = states.iter().map(|s| s.jc.junta.level).max().unwrap_or(0);
                    if states
                        .iter()
                        .any(|s| s.jc.junta.active || !s.jc.junta.interacted || (s.jc.junta.marker && s.jc.junta.level < top))
                    {
                        return false;
                    }
                }
                true
            }
        }
    }

    fn load_radix(&self) -> u64 {
        2 * self.params.cap() as u64 + 1
    }

    fn load_digit(&self, load: i32) -> Option<u64> {
        let cap = self.params.cap();
        (load.abs() <= cap).then(|| (load + cap) as u64)
    }

    /// Load, sign bit, clock and junta.
    fn core_key(&self, s: &MajorityState) -> Option<u64> {
        let k = &self.params.clock;
        let pos = u64::from(s.positive);
        if self.params.variant == Variant::Uniform {
            let c = &s.jc.clock;
            if c.p >= self.params.max_phase || c.overflowed || c.marked != s.jc.junta.marker {
                return None;
            }
            let junta = s.jc.junta.key();
            if junta >= (u64::from(crate::junta::JuntaProtocol::DEFAULT_MAX_LEVEL) + 1) << 6 {
                return None;
            }
            let clock = u64::from(c.p) * 2 + u64::from(c.new_round);
            let load = self.load_digit(s.load)?;
            return Some(((load * 2 + pos) * 4096 + junta) * (u64::from(self.params.max_phase) * 2) + clock);
        }
        let clock_states = k.state_count()?;
        if s.jc.recycled {
            let load = self.load_digit(s.load)?;
            return Some((load * 2 + pos) * clock_states + s.jc.clock.key());
        }
        // Still forming: round 0, never multiplied, so |load| <= 1.
        if s.load.abs() > 1 {
            return None;
        }
        let jc = s.jc.key(k, self.params.l_star);
        if jc == u64::MAX {
            return None;
        }
        let forming = jc - clock_states;
        let forming_count = JuntaClock::state_count(k, self.params.l_star) - clock_states;
        let base = self.load_radix() * 2 * clock_states;
        Some(base + ((s.load + 1) as u64 * 2 + pos) * forming_count + forming)
    }

    fn core_count(&self) -> u64 {
        let k = &self.params.clock;
        if self.params.variant == Variant::Uniform {
            return self.load_radix() * 2 * 4096 * u64::from(self.params.max_phase) * 2;
        }
        let clock_states = k.state_count().unwrap_or(0);
        let forming_count = JuntaClock::state_count(k, self.params.l_star) - clock_states;
        self.load_radix() * 2 * clock_states + 3 * 2 * forming_count
    }

    /// Radices of the per-variant flag fields, in key order.
    fn flag_radices(&self) -> (u64, u64, u64, u64) {
        let v = self.params.variant;
        let finished_error = if matches!(v, Variant::Stable | Variant::Uniform) { 4 } else { 1 };
        let count = if v == Variant::Convergent {
            u64::from(self.params.counter_max) + 1
        } else {
            1
        };
        let backup = if v == Variant::Clocked { 1 } else { 4 };
        let opinion = if v == Variant::Uniform { 2 } else { 1 };
        (finished_error, count, backup, opinion)
    }
}

impl Protocol for Majority {
    type State = MajorityState;
    /// `true` for opinion A (+1).
    type Input = bool;
    type Output = i8;

    fn name(&self) -> String {
        self.params.variant.name().into()
    }

    fn init(&self, positive: bool) -> MajorityState {
        MajorityState {
            load: if positive { 1 } else { -1 },
            positive,
            jc: JuntaClock::FRESH,
            finished: false,
            error: false,
            count: 0,
            backup: Backup4::from_opinion(positive),
            opinion: positive,
        }
    }

    fn transition(&self, u: &MajorityState, v: &MajorityState) -> (MajorityState, MajorityState) {
        let (mut a, mut b) = (*u, *v);
        match self.params.variant {
            Variant::Uniform => self.original_junta_step(&mut a, &mut b),
            _ => junta_step(self.params.l_star, &mut a.jc, &mut b.jc),
        }
        match self.params.variant {
            Variant::Clocked => {
                self.clocked_m(&mut a, &mut b);
            }
            Variant::Stable | Variant::Uniform => {
                (a.backup, b.backup) = backup4_interact(a.backup, b.backup);
                self.stable_step(&mut a, &mut b);
            }
            Variant::Convergent => {
                (a.backup, b.backup) = backup4_interact(a.backup, b.backup);
                self.convergent_step(&mut a, &mut b);
            }
        }
        (a, b)
    }

    fn output(&self, s: &MajorityState) -> i8 {
        match self.params.variant {
            Variant::Clocked => s.sign(),
            Variant::Stable | Variant::Uniform => {
                if !self.started(s) || s.error {
                    s.backup.output()
                } else {
                    s.sign()
                }
            }
            Variant::Convergent => {
                if !self.started(s) || s.count >= self.params.counter_max {
                    s.backup.output()
                } else {
                    s.sign()
                }
            }
        }
    }

    fn state_key(&self, s: &MajorityState) -> u64 {
        let Some(core) = self.core_key(s) else {
            return u64::MAX;
        };
        let (fe, count, backup, opinion) = self.flag_radices();
        if u64::from(s.count) >= count {
            return u64::MAX;
        }
        let mut key = core;
        if fe > 1 {
            key = key * 4 + u64::from(s.finished) * 2 + u64::from(s.error);
        }
        if count > 1 {
            key = key * count + u64::from(s.count);
        }
        if backup > 1 {
            key = key * 4 + s.backup.index();
        }
        if opinion > 1 {
            key = key * 2 + u64::from(s.opinion);
        }
        key
    }

    fn state_budget(&self) -> u64 {
        let (fe, count, backup, opinion) = self.flag_radices();
        self.core_count() * fe * count * backup * opinion
    }

    fn is_stable(&self, states: &[MajorityState]) -> Option<bool> {
        Some(self.stable_predicate(states))
    }
}

/// `(n + alpha) / 2` agents with opinion A followed by the rest with B.
pub fn majority_inputs(n: usize, alpha: usize) -> Option<Vec<bool>> {
    if alpha == 0 || alpha > n || (n - alpha) % 2 != 0 {
        return None;
    }
    let a = (n + alpha) / 2;
    Some((0..n).map(|i| i < a).collect())
}

/// `log2 log2 n`, at least 1.
pub fn log_log(n: usize) -> f64 {
    (n.max(4) as f64).log2().log2().max(1.0)
}

/// Asymptotic state count of each variant without its constant:
/// `s r + log log n`, `s log_s(5n)`, `s + log log n`, and the stable term
/// times `log log n` for the uniform variant.
pub fn nominal_state_bound(params: &MajorityParams, n: usize) -> f64 {
    let s = f64::from(params.s);
    match params.variant {
        Variant::Clocked => s * f64::from(params.r().unwrap_or(1)) + log_log(n),
        Variant::Stable => s * f64::from(stable_rounds(n, params.s)),
        Variant::Convergent => s + log_log(n),
        Variant::Uniform => s * f64::from(stable_rounds(n, params.s)) * log_log(n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{apply_interaction, pick_pair, Configuration, RngStream};
    use crate::junta::JuntaState;
    use proptest::prelude::*;

    fn recycled(p: u32, marked: bool, new_round: bool) -> JuntaClock {
        JuntaClock {
            recycled: true,
            clock: PhaseClockState {
                p,
                marked,
                new_round,
                overflowed: false,
            },
            ..JuntaClock::FRESH
        }
    }

    fn agent(m: &Majority, load: i32, jc: JuntaClock) -> MajorityState {
        let mut s = m.init(load >= 0);
        s.set_load(load);
        s.jc = jc;
        s
    }

    #[test]
    fn backup4_table() {
        use Backup4::*;
        assert_eq!(backup4_interact(A, B), (WeakA, WeakB));
        assert_eq!(backup4_interact(B, A), (WeakB, WeakA));
        assert_eq!(backup4_interact(A, WeakB), (A, WeakA));
        assert_eq!(backup4_interact(WeakB, A), (WeakA, A));
        assert_eq!(backup4_interact(WeakA, B), (WeakB, B));
        assert_eq!(backup4_interact(WeakA, WeakB), (WeakA, WeakB));
        assert_eq!(backup4_interact(A, A), (A, A));
    }

    #[test]
    fn stable_rounds_values() {
        assert_eq!(stable_rounds(1 << 12, 2), 15);
        assert_eq!(stable_rounds(1 << 12, 16), 4);
        assert_eq!(stable_rounds(4, 2), 5);
    }

    #[test]
    fn multiply_on_new_round() {
        let m = Majority::new(MajorityParams::clocked(1 << 10, 4, 3, 24));
        let mut u = agent(&m, 2, recycled(24, false, true));
        let mut v = agent(&m, 0, recycled(50, false, false));
        m.clocked_m(&mut u, &mut v);
        assert_eq!(u.load, 8);
        assert_eq!(v.load, 0);
    }

    #[test]
    fn balance_in_same_round() {
        let m = Majority::new(MajorityParams::clocked(1 << 10, 4, 3, 24));
        let mut u = agent(&m, 8, recycled(30, false, false));
        let mut v = agent(&m, -3, recycled(31, false, false));
        m.clocked_m(&mut u, &mut v);
        assert_eq!((u.load, v.load), (3, 2));
    }

    #[test]
    fn no_balance_across_rounds() {
        let m = Majority::new(MajorityParams::clocked(1 << 10, 4, 3, 24));
        let mut u = agent(&m, 8, recycled(30, false, false));
        let mut v = agent(&m, -3, recycled(50, false, false));
        m.clocked_m(&mut u, &mut v);
        assert_eq!((u.load, v.load), (8, -3));
        assert_eq!(u.jc.clock.p, 50);
    }

    #[test]
    fn pending_multiply_blocks_balance() {
        let m = Majority::new(MajorityParams::clocked(1 << 10, 4, 3, 24));
        let mut u = agent(&m, 8, recycled(30, false, false));
        // responder just crossed into round 1 and has not multiplied yet
        let mut v = agent(&m, -1, recycled(25, false, true));
        m.clocked_m(&mut u, &mut v);
        assert_eq!((u.load, v.load), (8, -1));
        let mut lit = MajorityParams::clocked(1 << 10, 4, 3, 24);
        lit.balance_rule = BalanceRule::SameRound;
        let lit = Majority::new(lit);
        lit.clocked_m(&mut u, &mut v);
        assert_eq!((u.load, v.load), (4, 3));
    }

    #[test]
    fn zero_load_reports_last_sign() {
        let m = Majority::new(MajorityParams::clocked(1 << 10, 2, 3, 8));
        let mut s = m.init(false);
        s.set_load(0);
        assert_eq!(m.output(&s), -1);
        s.set_load(5);
        assert_eq!(m.output(&s), 1);
        s.set_load(-5);
        assert_eq!(m.output(&s), -1);
        s.set_load(1);
        s.set_load(0);
        assert_eq!(m.output(&s), 1);
    }

    #[test]
    fn stable_finishes_on_big_load() {
        let m = Majority::new(MajorityParams::stable(1 << 10, 2, 8));
        let mut u = agent(&m, 4, recycled(8, false, true));
        let mut v = agent(&m, 1, recycled(7, false, false));
        m.stable_step(&mut u, &mut v);
        assert!(u.finished && v.finished && !u.error && !v.error);
        assert_eq!(u.load, 4);
    }

    #[test]
    fn finished_sign_mismatch_errors() {
        let m = Majority::new(MajorityParams::stable(1 << 10, 2, 8));
        let mut u = agent(&m, 4, recycled(8, false, false));
        let mut v = agent(&m, -2, recycled(9, false, false));
        u.finished = true;
        v.finished = true;
        m.stable_step(&mut u, &mut v);
        assert!(u.error && v.error);
    }

    #[test]
    fn finished_spreads_without_error() {
        let m = Majority::new(MajorityParams::stable(1 << 10, 2, 8));
        let mut u = agent(&m, 4, recycled(9, false, false));
        u.finished = true;
        let mut v = agent(&m, 1, recycled(10, false, false));
        let (a, b) = m.transition(&v, &u);
        assert!(a.finished && b.finished && !a.error);
        v = a;
        assert_eq!(v.load, 1);
    }

    #[test]
    fn strict_round_check_flags_straddlers() {
        let mut p = MajorityParams::stable(1 << 10, 2, 8);
        p.round_check = RoundCheck::Strict;
        let m = Majority::new(p);
        // u just crossed into round 1 and finished; v is still in round 0
        let mut u = agent(&m, 4, recycled(8, false, true));
        let mut v = agent(&m, 1, recycled(7, false, false));
        m.stable_step(&mut u, &mut v);
        assert!(u.error);
    }

    #[test]
    fn stable_output_rules() {
        let m = Majority::new(MajorityParams::stable(1 << 10, 2, 8));
        let mut s = m.init(true);
        s.backup = Backup4::WeakB;
        assert_eq!(m.output(&s), -1);
        s.jc.clock.p = 7;
        s.set_load(-2);
        s.backup = Backup4::A;
        assert_eq!(m.output(&s), -1);
        s.error = true;
        assert_eq!(m.output(&s), 1);
    }

    #[test]
    fn convergent_counter() {
        let m = Majority::new(MajorityParams::convergent(1 << 10, 2, 8));
        let mut u = agent(&m, 1, recycled(3, false, false));
        u.count = 5;
        let mut v = agent(&m, 1, recycled(3, true, false));
        m.convergent_step(&mut u, &mut v);
        assert_eq!(u.count, 6);
        let mut u2 = agent(&m, 1, recycled(3, false, false));
        u2.count = 599;
        let mut w = agent(&m, 1, recycled(3, false, false));
        m.convergent_step(&mut u2, &mut w);
        assert_eq!(u2.count, 0);
        let mut u3 = agent(&m, 1, recycled(3, false, false));
        u3.count = 600;
        let mut x = agent(&m, 1, recycled(10, true, false));
        m.convergent_step(&mut u3, &mut x);
        assert_eq!(u3.jc.clock.p, 3);
        assert_eq!(m.output(&u3), u3.backup.output());
    }

    #[test]
    fn uniform_spoil_resets() {
        let m = Majority::new(MajorityParams::uniform(1 << 10, 2, 8));
        let mut u = m.init(true);
        u.jc.junta = JuntaState {
            level: 2,
            interacted: true,
            marker: true,
            ..JuntaState::FRESH
        };
        u.jc.clock.marked = true;
        u.jc.clock.p = 5;
        u.set_load(-1);
        let mut v = m.init(false);
        v.jc.junta = JuntaState {
            level: 4,
            interacted: true,
            ..JuntaState::FRESH
        };
        m.original_junta_step(&mut u, &mut v);
        assert!(u.jc.junta.spoiled && !u.jc.clock.marked);
        assert_eq!((u.jc.clock.p, u.load), (0, 1));
        assert!(!u.jc.clock.overflowed);
    }

    #[test]
    fn inputs_split() {
        let v = majority_inputs(6, 2).unwrap();
        assert_eq!(v.iter().filter(|b| **b).count(), 4);
        assert!(majority_inputs(6, 1).is_none());
        assert!(majority_inputs(6, 0).is_none());
    }

    fn walk(m: &Majority, n: usize, alpha: usize, steps: usize, seed: u64) -> Vec<Vec<MajorityState>> {
        let mut c = Configuration::from_inputs(m, majority_inputs(n, alpha).unwrap());
        let mut rng = RngStream::new(seed);
        let mut trace = vec![c.states.clone()];
        for _ in 0..steps {
            let (u, v) = pick_pair(&mut rng, n).unwrap();
            apply_interaction(&mut c, m, u, v);
            trace.push(c.states.clone());
        }
        trace
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn flags_are_sticky_and_keys_in_budget(seed in any::<u64>(), s in 2u32..6, half in 2usize..12) {
            let n = 2 * half + 1;
            let m = Majority::new(MajorityParams::stable(n, s, 2));
            let trace = walk(&m, n, 1, 3000, seed);
            for w in trace.windows(2) {
                for (a, b) in w[0].iter().zip(&w[1]) {
                    prop_assert!(!a.finished || b.finished);
                    prop_assert!(!a.error || b.error);
                    prop_assert!(!a.jc.clock.overflowed || b.jc.clock.overflowed);
                    prop_assert!(m.state_key(b) < m.state_budget(), "{:?}", b);
                }
            }
        }

        #[test]
        fn weighted_load_is_conserved(seed in any::<u64>(), s in 2u32..5, half in 2usize..10) {
            // sum of load * s^-epoch over unfinished agents, before any error
            let n = 2 * half + 1;
            let mut p = MajorityParams::stable(n, s, 3);
            p.finish_threshold = i32::MAX;
            let m = Majority::new(p);
            let trace = walk(&m, n, 1, 3000, seed);
            let k = m.params.clock;
            let weight = |st: &[MajorityState]| -> Option<f64> {
                if st.iter().any(|x| x.error || x.finished) {
                    return None;
                }
                Some(st.iter().map(|x| f64::from(x.load) / f64::from(s).powi(epoch(&k, &x.jc.clock) as i32)).sum())
            };
            let w0 = weight(&trace[0]).unwrap();
            for st in &trace {
                match weight(st) {
                    Some(w) => prop_assert!((w - w0).abs() < 1e-9, "{} vs {}", w, w0),
                    None => break,
                }
            }
        }

        #[test]
        fn balancing_conserves_sum_within_round(seed in any::<u64>(), half in 2usize..10) {
            let n = 2 * half;
            let mut p = MajorityParams::clocked(n, 2, 3, 4);
            p.cap_mode = CapMode::Clamp;
            let m = Majority::new(p);
            let mut c = Configuration::from_inputs(&m, majority_inputs(n, 2).unwrap());
            let mut rng = RngStream::new(seed);
            for _ in 0..2000 {
                let (u, v) = pick_pair(&mut rng, n).unwrap();
                let before = (c.states[u], c.states[v]);
                apply_interaction(&mut c, &m, u, v);
                if !before.0.jc.clock.new_round {
                    prop_assert_eq!(before.0.load + before.1.load, c.states[u].load + c.states[v].load);
                }
            }
        }
    }
}

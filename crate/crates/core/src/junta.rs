//! Level process and junta extraction.
//!
//! Every agent runs a coin race: in its first interaction the initiator
//! becomes active at level 1 and the responder becomes inactive at level 0.
//! An active initiator climbs one level whenever its responder is at least as
//! high, and drops out otherwise. Few agents reach the top levels; those form
//! the junta that drives the phase clock.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{run_trial, AgentId, Censored, Configuration, EngineError, Flow, Observer, Protocol, RngStream, TrialOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct JuntaState {
    pub level: u8,
    pub active: bool,
    pub marker: bool,
    /// FormJunta only.
    pub spoiled: bool,
    pub interacted: bool,
    /// FormJuntaExt only: marked agents met while inactive, saturating at 2.
    pub marked_seen: u8,
}

impl JuntaState {
    pub const FRESH: JuntaState = JuntaState {
        level: 0,
        active: false,
        marker: false,
        spoiled: false,
        interacted: false,
        marked_seen: 0,
    };

    /// Still taking part in the level race (fresh agents count as active).
    pub fn racing(&self) -> bool {
        !self.interacted || self.active
    }

    /// Level seen by an active initiator. Spoiled agents read as level 0.
    pub fn read_level(&self) -> u8 {
        if self.spoiled {
            0
        } else {
            self.level
        }
    }

    /// Injective encoding: 6 flag bits below the level.
    pub fn key(&self) -> u64 {
        (u64::from(self.level) << 6)
            | u64::from(self.active)
            | (u64::from(self.marker) << 1)
            | (u64::from(self.spoiled) << 2)
            | (u64::from(self.interacted) << 3)
            | (u64::from(self.marked_seen.min(3)) << 4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Initiator,
    Responder,
}

pub fn junta_first_interaction(role: Role) -> JuntaState {
    let mut s = JuntaState {
        interacted: true,
        ..JuntaState::FRESH
    };
    if role == Role::Initiator {
        s.level = 1;
        s.active = true;
    }
    s
}

/// One step of the level race for an active initiator `u` that reads level
/// `seen` on its responder. Inactive initiators are returned unchanged.
pub fn junta_level_step(u: JuntaState, seen: u8) -> JuntaState {
    if !u.active {
        return u;
    }
    let mut u = u;
    if seen >= u.level {
        u.level = u.level.saturating_add(1);
    } else {
        u.active = false;
    }
    u
}

/// `max(1, ceil(log2 log2 n) - 4)`.
pub fn l_star(n: usize) -> u8 {
    let ll = (n.max(2) as f64).log2().log2();
    // Guard against ll landing a hair above an integer.
    let c = (ll - 1e-9).ceil() as i64;
    (c - 4).max(1) as u8
}

/// Plain level race, no marking.
pub fn level_pair(u: &JuntaState, v: &JuntaState) -> (JuntaState, JuntaState) {
    let u2 = if !u.interacted {
        junta_first_interaction(Role::Initiator)
    } else {
        junta_level_step(*u, v.read_level())
    };
    let v2 = if !v.interacted {
        junta_first_interaction(Role::Responder)
    } else {
        *v
    };
    (u2, v2)
}

/// FormJunta: agents that drop out at level >= 1 mark themselves; a marked
/// agent that meets a higher level becomes spoiled and then only tracks the
/// largest level it sees.
pub fn form_junta_pair(u: &JuntaState, v: &JuntaState) -> (JuntaState, JuntaState) {
    let u2 = if !u.interacted {
        junta_first_interaction(Role::Initiator)
    } else if u.active {
        let mut s = junta_level_step(*u, v.read_level());
        if !s.active && s.level >= 1 {
            s.marker = true;
        }
        s
    } else {
        spoil_or_adopt(*u, v.level)
    };
    let v2 = if !v.interacted {
        junta_first_interaction(Role::Responder)
    } else if v.active {
        *v
    } else {
        spoil_or_adopt(*v, u.level)
    };
    (u2, v2)
}

fn spoil_or_adopt(mut s: JuntaState, other: u8) -> JuntaState {
    if s.spoiled {
        s.level = s.level.max(other);
    } else if s.level >= 1 && other > s.level {
        s.spoiled = true;
        s.marker = false;
        s.level = other;
    }
    s
}

/// FormJuntaExt: agents mark themselves on reaching `l_star`; inactive agents
/// below `l_star` forget their level after meeting two marked agents.
pub fn form_junta_ext_pair(l_star: u8, u: &JuntaState, v: &JuntaState) -> (JuntaState, JuntaState) {
    let mut u2 = if !u.interacted {
        junta_first_interaction(Role::Initiator)
    } else if u.active {
        junta_level_step(*u, v.level)
    } else {
        count_marked(l_star, *u, v.marker)
    };
    if u2.level >= l_star {
        u2.marker = true;
    }
    let v2 = if !v.interacted {
        junta_first_interaction(Role::Responder)
    } else if v.active {
        *v
    } else {
        count_marked(l_star, *v, u.marker)
    };
    (u2, v2)
}

fn count_marked(l_star: u8, mut s: JuntaState, other_marked: bool) -> JuntaState {
    if other_marked && s.level < l_star && s.marked_seen < 2 {
        s.marked_seen += 1;
        if s.marked_seen == 2 {
            s.level = 0;
        }
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JuntaVariant {
    Level,
    FormJunta,
    FormJuntaExt,
}

#[derive(Debug, Clone, Copy)]
pub struct JuntaProtocol {
    pub variant: JuntaVariant,
    /// Marking level for FormJuntaExt.
    pub l_star: u8,
    /// Highest level covered by the declared state budget.
    pub max_level: u8,
}

impl JuntaProtocol {
    pub const DEFAULT_MAX_LEVEL: u8 = 63;

    pub fn level_process() -> Self {
        Self {
            variant: JuntaVariant::Level,
            l_star: 1,
            max_level: Self::DEFAULT_MAX_LEVEL,
        }
    }

    pub fn form_junta() -> Self {
        Self {
            variant: JuntaVariant::FormJunta,
            ..Self::level_process()
        }
    }

    pub fn form_junta_ext(n: usize) -> Self {
        Self {
            variant: JuntaVariant::FormJuntaExt,
            l_star: l_star(n),
            max_level: Self::DEFAULT_MAX_LEVEL,
        }
    }

    pub fn new(variant: JuntaVariant, n: usize) -> Self {
        match variant {
            JuntaVariant::Level => Self::level_process(),
            JuntaVariant::FormJunta => Self::form_junta(),
            JuntaVariant::FormJuntaExt => Self::form_junta_ext(n),
        }
    }
}

impl Protocol for JuntaProtocol {
    type State = JuntaState;
    type Input = ();
    /// Marker bit.
    type Output = bool;

    fn name(&self) -> String {
        match self.variant {
            JuntaVariant::Level => "level-process".into(),
            JuntaVariant::FormJunta => "form-junta".into(),
            JuntaVariant::FormJuntaExt => "form-junta-ext".into(),
        }
    }

    fn init(&self, _: ()) -> JuntaState {
        JuntaState::FRESH
    }

    fn transition(&self, u: &JuntaState, v: &JuntaState) -> (JuntaState, JuntaState) {
        match self.variant {
            JuntaVariant::Level => level_pair(u, v),
            JuntaVariant::FormJunta => form_junta_pair(u, v),
            JuntaVariant::FormJuntaExt => form_junta_ext_pair(self.l_star, u, v),
        }
    }

    fn output(&self, s: &JuntaState) -> bool {
        s.marker
    }

    fn state_key(&self, s: &JuntaState) -> u64 {
        s.key()
    }

    fn state_budget(&self) -> u64 {
        (u64::from(self.max_level) + 1) << 6
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JuntaStats {
    /// Maximum level reached by any agent.
    pub l_max: u8,
    /// `b[l]`: agents that reached level at least `l` in the race.
    pub b: Vec<u64>,
    /// Interaction at which the last agent left the race.
    pub inactivation_time: Censored,
    /// Marked agents at the end of the run.
    pub marked: u64,
    /// Agents whose level was forgotten (FormJuntaExt) or spoiled (FormJunta).
    pub recycled: u64,
}

impl JuntaStats {
    pub fn b_at(&self, level: u8) -> u64 {
        self.b.get(usize::from(level)).copied().unwrap_or(0)
    }
}

/// Records the highest level each agent reached while racing.
pub struct JuntaWatch {
    reached: Vec<u8>,
    racing: usize,
    done_at: Option<u64>,
}

impl JuntaWatch {
    pub fn new(n: usize) -> Self {
        Self {
            reached: vec![0; n],
            racing: n,
            done_at: None,
        }
    }

    fn track(&mut self, agent: AgentId, before: &JuntaState, after: &JuntaState) {
        if before.racing() && after.interacted {
            self.reached[agent] = self.reached[agent].max(after.level);
            if !after.active {
                self.racing -= 1;
            }
        }
    }

    pub fn stats(&self, states: &[JuntaState]) -> JuntaStats {
        let l_max = self.reached.iter().copied().max().unwrap_or(0);
        let mut b = vec![0u64; usize::from(l_max) + 1];
        for &r in &self.reached {
            for slot in b.iter_mut().take(usize::from(r) + 1) {
                *slot += 1;
            }
        }
        let marked = states.iter().filter(|s| s.marker).count() as u64;
        let recycled = states.iter().filter(|s| s.spoiled || s.marked_seen >= 2).count() as u64;
        JuntaStats {
            l_max,
            b,
            inactivation_time: self.done_at.into(),
            marked,
            recycled,
        }
    }
}

impl Observer<JuntaState> for JuntaWatch {
    fn on_start(&mut self, states: &[JuntaState]) {
        self.racing = states.iter().filter(|s| s.racing()).count();
        if self.racing == 0 {
            self.done_at = Some(0);
        }
    }

    fn on_interaction(
        &mut self,
        t: u64,
        u: AgentId,
        v: AgentId,
        before: (&JuntaState, &JuntaState),
        after: (&JuntaState, &JuntaState),
    ) -> Flow {
        self.track(u, before.0, after.0);
        self.track(v, before.1, after.1);
        if self.racing == 0 && self.done_at.is_none() {
            self.done_at = Some(t);
            return Flow::Stop;
        }
        Flow::Continue
    }

    fn on_probe(&mut self, _: u64, _: &[JuntaState]) -> Flow {
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

/// Runs one junta formation until every agent has left the race, then keeps
/// going for `tail` more interactions so marking and recycling can settle.
pub fn junta_trial(protocol: &JuntaProtocol, n: usize, budget: u64, tail: u64, rng: RngStream) -> Result<(JuntaStats, Vec<JuntaState>), EngineError> {
    let init = Configuration::from_inputs(protocol, vec![(); n]);
    let mut watch = JuntaWatch::new(n);
    let opts = TrialOptions {
        budget,
        cadence: budget,
        stop_when_stable: false,
        census: false,
        check_budget: true,
    };
    let run = run_trial(protocol, init, &opts, rng.clone(), &mut watch)?;
    let mut states = run.config.states;
    if tail > 0 {
        let opts = TrialOptions {
            budget: tail,
            cadence: tail,
            ..opts
        };
        let rest = RngStream::new(crate::engine::splitmix64(rng.seed()));
        let run = run_trial(protocol, Configuration::new(states), &opts, rest, &mut ())?;
        states = run.config.states;
    }
    Ok((watch.stats(&states), states))
}

/// Junta statistics over `trials` seeded runs with budget `budget_factor * n ln n`.
pub fn junta_experiment(variant: JuntaVariant, n: usize, trials: u64, seed: u64, budget_factor: f64) -> Result<Vec<JuntaStats>, EngineError> {
    let protocol = JuntaProtocol::new(variant, n);
    let budget = (budget_factor * n as f64 * (n as f64).ln()).ceil() as u64;
    (0..trials)
        .into_par_iter()
        .map(|trial| junta_trial(&protocol, n, budget, 0, RngStream::for_trial(seed, trial)).map(|(s, _)| s))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{apply_interaction, pick_pair};
    use proptest::prelude::*;

    fn st(level: u8, active: bool) -> JuntaState {
        JuntaState {
            level,
            active,
            interacted: true,
            ..JuntaState::FRESH
        }
    }

    #[test]
    fn first_interaction_roles() {
        assert_eq!(junta_first_interaction(Role::Initiator), st(1, true));
        assert_eq!(junta_first_interaction(Role::Responder), st(0, false));
        let (a, b) = level_pair(&JuntaState::FRESH, &JuntaState::FRESH);
        assert_eq!((a, b), (st(1, true), st(0, false)));
    }

    #[test]
    fn level_step_examples() {
        assert_eq!(junta_level_step(st(3, true), 3), st(4, true));
        assert_eq!(junta_level_step(st(3, true), 2), st(3, false));
        assert_eq!(junta_level_step(st(3, false), 9), st(3, false));
    }

    #[test]
    fn responder_is_untouched_by_level_race() {
        let (_, v) = level_pair(&st(2, true), &st(5, false));
        assert_eq!(v, st(5, false));
    }

    #[test]
    fn l_star_clamps() {
        assert_eq!(l_star(2), 1);
        assert_eq!(l_star(1 << 14), 1);
        assert_eq!(l_star(1 << 16), 1);
        // ceil(log2 log2 2^64) - 4 = 2
        assert_eq!(l_star(usize::MAX), 2);
    }

    #[test]
    fn n2_level_race() {
        let p = JuntaProtocol::level_process();
        let (stats, _) = junta_trial(&p, 2, 1000, 0, RngStream::new(5)).unwrap();
        assert_eq!(stats.l_max, 1);
        assert_eq!(stats.b, vec![2, 1]);
        assert!(!stats.inactivation_time.is_censored());
    }

    #[test]
    fn form_junta_marks_on_drop_out() {
        let (u, _) = form_junta_pair(&st(3, true), &st(1, false));
        assert!(u.marker && !u.active && u.level == 3);
        let (u, _) = form_junta_pair(&st(0, true), &st(0, false));
        assert!(u.active && !u.marker);
    }

    #[test]
    fn form_junta_spoils_on_higher_level() {
        let mut marked = st(3, false);
        marked.marker = true;
        let (u, _) = form_junta_pair(&marked, &st(5, false));
        assert!(u.spoiled && !u.marker);
        let (_, v) = form_junta_pair(&st(5, false), &marked);
        assert!(v.spoiled && !v.marker);
        // a spoiled responder reads as level 0 for the race
        let (u, _) = form_junta_pair(&st(2, true), &v);
        assert!(!u.active && u.level == 2);
    }

    #[test]
    fn spoiled_agent_adopts_max_level() {
        let mut s = st(5, false);
        s.spoiled = true;
        let (u, _) = form_junta_pair(&s, &st(7, false));
        assert_eq!(u.level, 7);
        let (_, v) = form_junta_pair(&st(2, false), &u);
        assert_eq!(v.level, 7);
    }

    #[test]
    fn ext_marks_at_l_star() {
        let (u, _) = form_junta_ext_pair(3, &st(2, true), &st(4, false));
        assert!(u.marker && u.level == 3);
        let (u, _) = form_junta_ext_pair(1, &JuntaState::FRESH, &JuntaState::FRESH);
        assert!(u.marker);
    }

    #[test]
    fn ext_forgets_after_two_marked() {
        let mut marked = st(4, false);
        marked.marker = true;
        let low = st(2, false);
        let (once, _) = form_junta_ext_pair(4, &low, &marked);
        assert_eq!((once.level, once.marked_seen), (2, 1));
        let (_, twice) = form_junta_ext_pair(4, &marked, &once);
        assert_eq!((twice.level, twice.active, twice.marker), (0, false, false));
        let (kept, _) = form_junta_ext_pair(4, &low, &st(1, false));
        assert_eq!(kept, low);
    }

    fn run_random(p: &JuntaProtocol, n: usize, steps: usize, seed: u64) -> Vec<Vec<JuntaState>> {
        let mut c = Configuration::from_inputs(p, vec![(); n]);
        let mut rng = RngStream::new(seed);
        let mut trace = vec![c.states.clone()];
        for _ in 0..steps {
            let (u, v) = pick_pair(&mut rng, n).unwrap();
            apply_interaction(&mut c, p, u, v);
            trace.push(c.states.clone());
        }
        trace
    }

    proptest! {
        #[test]
        fn inactive_never_climbs(n in 2usize..24, seed in any::<u64>()) {
            for p in [JuntaProtocol::level_process(), JuntaProtocol::form_junta_ext(n)] {
                let trace = run_random(&p, n, 400, seed);
                for w in trace.windows(2) {
                    for (a, b) in w[0].iter().zip(&w[1]) {
                        if a.interacted && !a.active {
                            prop_assert!(!b.active);
                            prop_assert!(b.level <= a.level);
                        }
                    }
                }
            }
        }

        #[test]
        fn form_junta_only_spoiled_climb_when_inactive(n in 2usize..24, seed in any::<u64>()) {
            let trace = run_random(&JuntaProtocol::form_junta(), n, 400, seed);
            for w in trace.windows(2) {
                for (a, b) in w[0].iter().zip(&w[1]) {
                    if a.interacted && !a.active && b.level > a.level {
                        prop_assert!(b.spoiled);
                    }
                    prop_assert!(!(a.spoiled && !b.spoiled));
                }
            }
        }

        #[test]
        fn b_table_monotone(n in 2usize..64, seed in any::<u64>()) {
            let p = JuntaProtocol::form_junta_ext(n);
            let (stats, states) = junta_trial(&p, n, 50_000, 5_000, RngStream::new(seed)).unwrap();
            prop_assert_eq!(stats.b[0], n as u64);
            prop_assert!(stats.b.windows(2).all(|w| w[1] <= w[0]));
            // unmarked agents are forgotten or still waiting for a second marked encounter
            for s in &states {
                if !s.marker && !s.active {
                    prop_assert!(s.level == 0 || s.marked_seen < 2);
                }
            }
        }
    }
}

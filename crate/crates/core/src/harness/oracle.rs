//! Exhaustive reachability over configurations taken as multisets of states.
//!
//! Transitions depend only on states, never on agent identities, so two
//! configurations with the same state counts have the same futures. The
//! oracle explores every configuration reachable from the initial one under
//! every ordered pair choice, then decides which configurations are stable
//! (no reachable configuration has a different output multiset) and whether a
//! correct stable configuration stays reachable from everywhere.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::hash::Hash;

use serde::Serialize;
use thiserror::Error;

use crate::engine::{OutputCounts, Protocol};

pub const DEFAULT_LIMIT: usize = 10_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("reachable configuration space exceeds {limit} configurations")]
    TooLarge { limit: usize },
    #[error("population of {0} agents is too small, at least 2 are required")]
    InvalidPopulation(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    ExactAndCorrect,
    /// A stable configuration with a wrong output is reachable.
    WrongStable,
    /// Some reachable configuration cannot reach a correct stable one.
    CannotStabilize,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub verdict: Verdict,
    pub configurations: usize,
    pub edges: usize,
    pub stable: usize,
    pub stable_correct: usize,
    pub distinct_states: usize,
    /// Output multisets of the stable configurations, debug-formatted.
    pub stable_outputs: Vec<String>,
}

/// State counts, sorted by interned state id.
type Multiset = Vec<(u32, u32)>;

/// Explores everything reachable from `init` and checks exactness with
/// respect to `correct`.
pub fn reachability_oracle<P>(protocol: &P, init: &[P::State], correct: impl Fn(&OutputCounts<P::Output>) -> bool, limit: usize) -> Result<OracleReport, OracleError>
where
    P: Protocol,
    P::State: Hash + Eq,
{
    if init.len() < 2 {
        return Err(OracleError::InvalidPopulation(init.len()));
    }
    let mut states: Vec<P::State> = Vec::new();
    let mut state_ids: HashMap<P::State, u32> = HashMap::new();
    let mut intern = |s: P::State, states: &mut Vec<P::State>| -> u32 {
        *state_ids.entry(s).or_insert_with(|| {
            states.push(s);
            (states.len() - 1) as u32
        })
    };

    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    for s in init {
        *counts.entry(intern(*s, &mut states)).or_insert(0) += 1;
    }
    let start: Multiset = counts.into_iter().collect();

    let mut ids: HashMap<Multiset, u32> = HashMap::new();
    let mut configs: Vec<Multiset> = Vec::new();
    let mut succ: Vec<Vec<u32>> = Vec::new();
    let mut delta: HashMap<(u32, u32), (u32, u32)> = HashMap::new();
    let mut queue = VecDeque::new();
    ids.insert(start.clone(), 0);
    configs.push(start);
    queue.push_back(0u32);

    while let Some(c) = queue.pop_front() {
        let config = configs[c as usize].clone();
        let mut next: Vec<u32> = Vec::new();
        for (i, &(a, ca)) in config.iter().enumerate() {
            for (j, &(b, _)) in config.iter().enumerate() {
                if i == j && ca < 2 {
                    continue;
                }
                let (a2, b2) = match delta.get(&(a, b)) {
                    Some(&r) => r,
                    None => {
                        let (x, y) = protocol.transition(&states[a as usize], &states[b as usize]);
                        let r = (intern(x, &mut states), intern(y, &mut states));
                        delta.insert((a, b), r);
                        r
                    }
                };
                if (a2, b2) == (a, b) {
                    continue;
                }
                let mut m: BTreeMap<u32, u32> = config.iter().copied().collect();
                for (k, d) in [(a, -1i64), (b, -1), (a2, 1), (b2, 1)] {
                    let e = m.entry(k).or_insert(0);
                    *e = (i64::from(*e) + d) as u32;
                }
                let key: Multiset = m.into_iter().filter(|(_, v)| *v > 0).collect();
                if key == config {
                    continue;
                }
                let id = match ids.get(&key) {
                    Some(&id) => id,
                    None => {
                        if configs.len() >= limit {
                            return Err(OracleError::TooLarge { limit });
                        }
                        let id = configs.len() as u32;
                        ids.insert(key.clone(), id);
                        configs.push(key);
                        queue.push_back(id);
                        id
                    }
                };
                next.push(id);
            }
        }
        next.sort_unstable();
        next.dedup();
        if succ.len() <= c as usize {
            succ.resize(c as usize + 1, Vec::new());
        }
        succ[c as usize] = next;
    }
    succ.resize(configs.len(), Vec::new());

    // Output multiset of every configuration, interned.
    let mut sig_ids: HashMap<OutputCounts<P::Output>, u32> = HashMap::new();
    let mut sig_correct: Vec<bool> = Vec::new();
    let mut sig_text: Vec<String> = Vec::new();
    let sig: Vec<u32> = configs
        .iter()
        .map(|c| {
            let mut out = OutputCounts::new();
            for &(s, k) in c {
                *out.entry(protocol.output(&states[s as usize])).or_insert(0) += k as usize;
            }
            let next = sig_ids.len() as u32;
            *sig_ids.entry(out.clone()).or_insert_with(|| {
                sig_correct.push(correct(&out));
                sig_text.push(format!("{out:?}"));
                next
            })
        })
        .collect();

    let mut pred: Vec<Vec<u32>> = vec![Vec::new(); configs.len()];
    let mut edges = 0;
    for (c, ns) in succ.iter().enumerate() {
        edges += ns.len();
        for &d in ns {
            pred[d as usize].push(c as u32);
        }
    }

    // Unstable: can reach a configuration with a different output multiset.
    let mut unstable = vec![false; configs.len()];
    let mut work = VecDeque::new();
    for (c, ns) in succ.iter().enumerate() {
        if ns.iter().any(|&d| sig[d as usize] != sig[c]) {
            unstable[c] = true;
            work.push_back(c as u32);
        }
    }
    while let Some(d) = work.pop_front() {
        for &c in &pred[d as usize] {
            if !unstable[c as usize] {
                unstable[c as usize] = true;
                work.push_back(c);
            }
        }
    }

    let mut good = vec![false; configs.len()];
    let mut stable = 0;
    let mut stable_correct = 0;
    let mut wrong = false;
    let mut stable_sigs = Vec::new();
    for c in 0..configs.len() {
        if unstable[c] {
            continue;
        }
        stable += 1;
        stable_sigs.push(sig[c]);
        if sig_correct[sig[c] as usize] {
            stable_correct += 1;
            good[c] = true;
            work.push_back(c as u32);
        } else {
            wrong = true;
        }
    }
    while let Some(d) = work.pop_front() {
        for &c in &pred[d as usize] {
            if !good[c as usize] {
                good[c as usize] = true;
                work.push_back(c);
            }
        }
    }

    let verdict = if wrong {
        Verdict::WrongStable
    } else if good.iter().all(|g| *g) {
        Verdict::ExactAndCorrect
    } else {
        Verdict::CannotStabilize
    };
    Ok(OracleReport {
        verdict,
        configurations: configs.len(),
        edges,
        stable,
        stable_correct,
        distinct_states: states.len(),
        stable_outputs: {
            stable_sigs.sort_unstable();
            stable_sigs.dedup();
            stable_sigs.into_iter().map(|i| sig_text[i as usize].clone()).collect()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leader::{Backup2, Backup2Protocol, Role};
    use crate::majority::{majority_inputs, Backup4, Backup4Protocol, Majority, MajorityParams, MajorityState};
    use crate::phaseclock::ClockParams;
    use crate::primitives::Epidemic;

    fn all(v: i8) -> impl Fn(&OutputCounts<i8>) -> bool {
        move |o| o.len() == 1 && o.contains_key(&v)
    }

    #[test]
    fn epidemic_self_check() {
        for n in 2..=6 {
            for infected in 1..=n {
                let init: Vec<bool> = (0..n).map(|i| i < infected).collect();
                let r = reachability_oracle(&Epidemic, &init, |o| o.len() == 1 && o.contains_key(&true), DEFAULT_LIMIT).unwrap();
                assert_eq!(r.verdict, Verdict::ExactAndCorrect);
                assert_eq!(r.stable, 1);
            }
        }
        // No infected agent: stable, and all-healthy is "wrong" for this predicate.
        let r = reachability_oracle(&Epidemic, &[false; 3], |o| o.contains_key(&true), DEFAULT_LIMIT).unwrap();
        assert_eq!(r.verdict, Verdict::WrongStable);
    }

    #[test]
    fn backup4_n3() {
        let init = [Backup4::A, Backup4::A, Backup4::B];
        let r = reachability_oracle(&Backup4Protocol, &init, all(1), DEFAULT_LIMIT).unwrap();
        assert_eq!(r.verdict, Verdict::ExactAndCorrect);
    }

    #[test]
    fn tie_is_not_exact() {
        let init = [Backup4::A, Backup4::B];
        let r = reachability_oracle(&Backup4Protocol, &init, all(1), DEFAULT_LIMIT).unwrap();
        assert_ne!(r.verdict, Verdict::ExactAndCorrect);
    }

    #[test]
    fn backup2_unique_leader() {
        let init = [Backup2::L; 5];
        let r = reachability_oracle(&Backup2Protocol, &init, |o| o.get(&Role::Leader) == Some(&1), DEFAULT_LIMIT).unwrap();
        assert_eq!(r.verdict, Verdict::ExactAndCorrect);
        assert_eq!(r.stable, 1);
    }

    #[test]
    fn size_guard() {
        let init = [Backup2::L; 5];
        assert_eq!(
            reachability_oracle(&Backup2Protocol, &init, |_| true, 2).unwrap_err(),
            OracleError::TooLarge { limit: 2 }
        );
    }

    fn majority_init(m: &Majority, n: usize, alpha: usize) -> Vec<MajorityState> {
        majority_inputs(n, alpha).unwrap().into_iter().map(|x| m.init(x)).collect()
    }

    #[test]
    fn stable_majority_small() {
        for (n, alpha, m, r) in [(3, 1, 1, 4)] {
            let p = MajorityParams {
                clock: ClockParams::new(m, r),
                ..MajorityParams::stable(n, 2, m)
            };
            let m = Majority::new(p);
            let r = reachability_oracle(&m, &majority_init(&m, n, alpha), all(1), DEFAULT_LIMIT).unwrap();
            assert_eq!(r.verdict, Verdict::ExactAndCorrect, "n={n}");
        }
    }

    #[test]
    fn convergent_majority_small() {
        for n in [2] {
            let alpha = if n % 2 == 0 { 2 } else { 1 };
            let m = Majority::new(MajorityParams {
                counter_max: 4,
                ..MajorityParams::convergent(n, 2, 2)
            });
            let r = reachability_oracle(&m, &majority_init(&m, n, alpha), all(1), DEFAULT_LIMIT).unwrap();
            assert_eq!(r.verdict, Verdict::ExactAndCorrect, "n={n}");
        }
    }
}

//! Experiment specs, batch execution and reporting.

pub mod calibration;
pub mod fit;
pub mod oracle;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::engine::{all_output, run_trial, AgentId, Censored, Configuration, EngineError, Flow, Observer, OutputCounts, Protocol, RngStream, TrialMetrics, TrialOptions, TrialRun};
use crate::junta::{junta_trial, JuntaProtocol, JuntaVariant};
use crate::leader::{Backup2Protocol, Leader, LeaderParams, LeaderWatch, Role, Terminal};
use crate::majority::{epoch, majority_inputs, Backup4Protocol, Majority, MajorityParams, MajorityState, Variant};
use crate::phaseclock::{clock_trial, ClockError, Rounds};
use crate::primitives::{balancing_budget, balancing_time_from, discrepancy_loads, infection_budget, infection_trial};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Clock(#[from] ClockError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProtocolKind {
    Epidemic,
    LoadBalancing,
    LevelProcess,
    FormJunta,
    FormJuntaExt,
    PhaseClock,
    Backup4,
    Backup2,
    ClockedMajority,
    StableMajority,
    ConvergentMajority,
    UniformMajority,
    Leader,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 13] = [
        ProtocolKind::Epidemic,
        ProtocolKind::LoadBalancing,
        ProtocolKind::LevelProcess,
        ProtocolKind::FormJunta,
        ProtocolKind::FormJuntaExt,
        ProtocolKind::PhaseClock,
        ProtocolKind::Backup4,
        ProtocolKind::Backup2,
        ProtocolKind::ClockedMajority,
        ProtocolKind::StableMajority,
        ProtocolKind::ConvergentMajority,
        ProtocolKind::UniformMajority,
        ProtocolKind::Leader,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Epidemic => "epidemic",
            ProtocolKind::LoadBalancing => "load-balancing",
            ProtocolKind::LevelProcess => "level-process",
            ProtocolKind::FormJunta => "form-junta",
            ProtocolKind::FormJuntaExt => "form-junta-ext",
            ProtocolKind::PhaseClock => "phase-clock",
            ProtocolKind::Backup4 => "backup4",
            ProtocolKind::Backup2 => "backup2",
            ProtocolKind::ClockedMajority => "clocked-majority",
            ProtocolKind::StableMajority => "stable-majority",
            ProtocolKind::ConvergentMajority => "convergent-majority",
            ProtocolKind::UniformMajority => "uniform-majority",
            ProtocolKind::Leader => "leader",
        }
    }

    /// Whether the protocol is clocked and needs `m`.
    pub fn needs_m(self) -> bool {
        matches!(
            self,
            ProtocolKind::PhaseClock
                | ProtocolKind::ClockedMajority
                | ProtocolKind::StableMajority
                | ProtocolKind::ConvergentMajority
                | ProtocolKind::UniformMajority
                | ProtocolKind::Leader
        )
    }

    fn is_majority(self) -> bool {
        matches!(
            self,
            ProtocolKind::Backup4
                | ProtocolKind::ClockedMajority
                | ProtocolKind::StableMajority
                | ProtocolKind::ConvergentMajority
                | ProtocolKind::UniformMajority
        )
    }
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProtocolKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProtocolKind::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown protocol `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Calibrate {
    Calibrate,
}

/// Phases per round: a number, or `"calibrate"` for the calibrated value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MSpec {
    Fixed(u32),
    Calibrated(Calibrate),
}

impl Default for MSpec {
    fn default() -> Self {
        MSpec::Calibrated(Calibrate::Calibrate)
    }
}

impl FromStr for MSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "calibrate" {
            return Ok(MSpec::default());
        }
        s.parse().map(MSpec::Fixed).map_err(|_| format!("m must be a positive integer or `calibrate`, got `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(format!("unknown format `{s}`")),
        }
    }
}

fn default_s() -> u32 {
    2
}

fn default_trials() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub protocol: ProtocolKind,
    pub n: usize,
    #[serde(default = "default_s")]
    pub s: u32,
    /// Ring rounds for the clocked majority, rounds to observe for the phase clock.
    #[serde(default)]
    pub r: Option<u32>,
    /// Majority bias; defaults to the smallest one with the parity of `n`.
    /// Initial discrepancy for load balancing (default `n`).
    #[serde(default)]
    pub alpha: Option<usize>,
    #[serde(default)]
    pub m: MSpec,
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub seed: u64,
    /// Interaction budget per trial; protocol default if absent.
    #[serde(default)]
    pub budget: Option<u64>,
    /// Probe cadence; 0 means every `n` interactions.
    #[serde(default)]
    pub cadence: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
}

impl ExperimentSpec {
    pub fn new(protocol: ProtocolKind, n: usize) -> Self {
        Self {
            protocol,
            n,
            s: 2,
            r: None,
            alpha: None,
            m: MSpec::default(),
            trials: 1,
            seed: 0,
            budget: None,
            cadence: 0,
            output: None,
            format: Format::Csv,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::InvalidSpec(msg));
        if self.n < 2 {
            return bad(format!("n must be at least 2, got {}", self.n));
        }
        if self.s < 2 {
            return bad(format!("s must be at least 2, got {}", self.s));
        }
        if self.budget == Some(0) {
            return bad("budget must be positive".into());
        }
        if let MSpec::Fixed(0) = self.m {
            return bad("m must be positive".into());
        }
        if self.r == Some(0) {
            return bad("r must be positive".into());
        }
        if self.protocol.is_majority() {
            let a = self.alpha();
            if a == 0 || a > self.n || (self.n - a) % 2 != 0 {
                return bad(format!("alpha must satisfy 1 <= alpha <= n and alpha = n (mod 2); got alpha = {a}, n = {}", self.n));
            }
        }
        if self.protocol == ProtocolKind::ClockedMajority && self.r.is_some_and(|r| r < 3) {
            return bad("the clocked majority needs r >= 3".into());
        }
        Ok(())
    }

    pub fn alpha(&self) -> usize {
        match self.protocol {
            ProtocolKind::LoadBalancing => self.alpha.unwrap_or(self.n),
            _ => self.alpha.unwrap_or(if self.n % 2 == 0 { 2 } else { 1 }),
        }
    }

    fn nlnn(&self) -> f64 {
        let n = self.n as f64;
        n * n.ln()
    }

    /// Ring size used by the stable, clocked and leader protocols.
    pub fn rounds(&self) -> Option<u32> {
        match self.protocol {
            ProtocolKind::StableMajority => Some(crate::majority::stable_rounds(self.n, self.s)),
            ProtocolKind::ClockedMajority => Some(self.r.unwrap_or_else(|| crate::majority::stable_rounds(self.n, self.s).max(3))),
            ProtocolKind::ConvergentMajority | ProtocolKind::Leader => Some(3),
            ProtocolKind::PhaseClock => Some(self.r.unwrap_or(50)),
            _ => None,
        }
    }

    pub fn default_budget(&self) -> u64 {
        let nlnn = self.nlnn();
        let log_rounds = f64::from(crate::majority::stable_rounds(self.n, self.s));
        let b = match self.protocol {
            ProtocolKind::Epidemic => return infection_budget(self.n),
            ProtocolKind::LoadBalancing => return balancing_budget(self.n, self.alpha() as i64),
            ProtocolKind::LevelProcess | ProtocolKind::FormJunta | ProtocolKind::FormJuntaExt => 20.0 * nlnn,
            ProtocolKind::PhaseClock => 1.0e12,
            ProtocolKind::Backup4 | ProtocolKind::Backup2 => 10.0 * self.n as f64 * nlnn,
            ProtocolKind::ClockedMajority | ProtocolKind::StableMajority | ProtocolKind::ConvergentMajority => 50.0 * nlnn * log_rounds,
            ProtocolKind::UniformMajority => 400.0 * nlnn * log_rounds,
            ProtocolKind::Leader => 3000.0 * nlnn,
        };
        b.ceil() as u64
    }

    pub fn budget(&self) -> u64 {
        self.budget.unwrap_or_else(|| self.default_budget())
    }

    pub fn resolve_m(&self) -> Result<Option<u32>, HarnessError> {
        if !self.protocol.needs_m() {
            return Ok(None);
        }
        match self.m {
            MSpec::Fixed(m) => Ok(Some(m)),
            MSpec::Calibrated(_) => Ok(Some(calibration::m_for(self.n, self.seed)?)),
        }
    }
}

/// One output row; the column order is part of the file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub trial_id: u64,
    pub protocol: String,
    pub n: usize,
    pub s: u32,
    pub r: Option<u32>,
    pub alpha: Option<usize>,
    pub m: Option<u32>,
    pub seed: u64,
    pub t_convergence: Option<u64>,
    pub t_stabilization: Option<u64>,
    /// The convergence time was not observed within the budget.
    pub censored: bool,
    pub correct: bool,
    pub distinct_states_max: usize,
    pub extras_json: String,
}

impl Row {
    pub fn extras(&self) -> BTreeMap<String, Value> {
        serde_json::from_str(&self.extras_json).unwrap_or_default()
    }

    /// The trial failed an assertion (state budget or protocol contract).
    pub fn failed(&self) -> bool {
        self.extras().contains_key("error")
    }
}

pub const CSV_HEADER: [&str; 14] = [
    "trial_id",
    "protocol",
    "n",
    "s",
    "r",
    "alpha",
    "m",
    "seed",
    "t_convergence",
    "t_stabilization",
    "censored",
    "correct",
    "distinct_states_max",
    "extras_json",
];

pub fn write_csv<W: Write>(rows: &[Row], out: W) -> Result<(), HarnessError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<Row>, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn write_json<W: Write>(rows: &[Row], mut out: W) -> Result<(), HarnessError> {
    serde_json::to_writer_pretty(&mut out, rows)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn write_rows<W: Write>(rows: &[Row], format: Format, out: W) -> Result<(), HarnessError> {
    match format {
        Format::Csv => write_csv(rows, out),
        Format::Json => write_json(rows, out),
    }
}

/// Shared per-trial context.
struct Ctx<'a> {
    spec: &'a ExperimentSpec,
    trial: u64,
    m: Option<u32>,
    rng: RngStream,
}

impl Ctx<'_> {
    fn row(&self, metrics: Option<TrialMetrics>, extras: BTreeMap<String, Value>) -> Row {
        let spec = self.spec;
        let mut extras = extras;
        let (tc, ts, correct, distinct) = match &metrics {
            Some(mt) => {
                extras.extend(mt.extras.clone());
                (mt.convergence_interactions, mt.stabilization_interactions, mt.final_output_correct, mt.distinct_states_seen)
            }
            None => (Censored::Censored, Censored::Censored, false, 0),
        };
        Row {
            trial_id: self.trial,
            protocol: spec.protocol.name().into(),
            n: spec.n,
            s: spec.s,
            r: spec.rounds(),
            alpha: (spec.protocol.is_majority() || spec.protocol == ProtocolKind::LoadBalancing).then(|| spec.alpha()),
            m: self.m,
            seed: self.rng.seed(),
            t_convergence: tc.value(),
            t_stabilization: ts.value(),
            censored: tc.is_censored(),
            correct,
            distinct_states_max: distinct,
            extras_json: serde_json::to_string(&extras).unwrap_or_else(|_| "{}".into()),
        }
    }

    fn failed(&self, err: &HarnessError) -> Row {
        let mut extras = BTreeMap::new();
        extras.insert("error".into(), json!(err.to_string()));
        self.row(None, extras)
    }

    fn options(&self) -> TrialOptions {
        TrialOptions {
            budget: self.spec.budget(),
            cadence: self.spec.cadence,
            stop_when_stable: true,
            census: true,
            check_budget: true,
        }
    }
}

fn metrics_of<P: Protocol>(protocol: &P, run: &TrialRun<P>, correct: impl Fn(&OutputCounts<P::Output>) -> bool) -> TrialMetrics {
    let mut mt = TrialMetrics::from_run(run, correct);
    mt.extras.insert("state_budget".into(), json!(protocol.state_budget()));
    mt.extras.insert("interactions".into(), json!(run.config.interactions_elapsed));
    mt
}

fn exactly_one_leader(counts: &OutputCounts<Role>) -> bool {
    counts.get(&Role::Leader) == Some(&1)
}

/// Interactions at which a tracked event happened replace the probe-resolution
/// convergence time.
fn with_event(mut mt: TrialMetrics, at: Censored) -> TrialMetrics {
    mt.convergence_interactions = at;
    mt.stabilization_interactions = at;
    mt.final_output_correct = !at.is_censored();
    mt
}

/// Round and load statistics of a majority run.
pub struct MajorityWatch {
    params: MajorityParams,
    crossings: Vec<u32>,
    pub rounds: u32,
    pub max_abs_load: i32,
    pub spoil_resets: u64,
    pub multi_round_jumps: u64,
}

impl MajorityWatch {
    pub fn new(n: usize, params: MajorityParams) -> Self {
        Self {
            params,
            crossings: vec![0; n],
            rounds: 0,
            max_abs_load: 1,
            spoil_resets: 0,
            multi_round_jumps: 0,
        }
    }

    fn crossed(&self, before: &MajorityState, after: &MajorityState) -> u32 {
        let k = &self.params.clock;
        let (a, b) = (before.jc.clock.round(k), after.jc.clock.round(k));
        match k.rounds {
            Rounds::Finite(r) => (b + r - a) % r,
            Rounds::Unbounded => b.saturating_sub(a),
        }
    }

    pub fn extras(&self, states: &[MajorityState]) -> BTreeMap<String, Value> {
        let k = &self.params.clock;
        let mut e = BTreeMap::new();
        e.insert("rounds_completed".into(), json!(self.rounds));
        e.insert("max_abs_load".into(), json!(self.max_abs_load));
        e.insert("error_agents".into(), json!(states.iter().filter(|s| s.error).count()));
        e.insert("finished_agents".into(), json!(states.iter().filter(|s| s.finished).count()));
        e.insert("multi_round_jumps".into(), json!(self.multi_round_jumps));
        let mut epochs: Vec<u32> = states.iter().map(|s| epoch(k, &s.jc.clock)).collect();
        epochs.sort_unstable();
        epochs.dedup();
        e.insert("final_epochs".into(), json!(epochs));
        if self.params.variant == Variant::Uniform {
            e.insert("spoil_resets".into(), json!(self.spoil_resets));
            e.insert("marked_agents".into(), json!(states.iter().filter(|s| s.jc.junta.marker).count()));
            e.insert("max_phase".into(), json!(states.iter().map(|s| s.jc.clock.p).max().unwrap_or(0)));
        }
        if self.params.variant == Variant::Convergent {
            let max = self.params.counter_max;
            e.insert("exited_agents".into(), json!(states.iter().filter(|s| s.count >= max).count()));
        }
        e
    }
}

impl Observer<MajorityState> for MajorityWatch {
    fn on_interaction(&mut self, _: u64, u: AgentId, v: AgentId, before: (&MajorityState, &MajorityState), after: (&MajorityState, &MajorityState)) -> Flow {
        for (id, b, a) in [(u, before.0, after.0), (v, before.1, after.1)] {
            self.max_abs_load = self.max_abs_load.max(a.load.abs());
            if a.jc.junta.spoiled && !b.jc.junta.spoiled {
                self.spoil_resets += 1;
            }
            if a.jc.clock.p != b.jc.clock.p {
                let c = self.crossed(b, a);
                if c > 1 {
                    self.multi_round_jumps += 1;
                }
                self.crossings[id] += c;
                self.rounds = self.rounds.max(self.crossings[id]);
            }
        }
        Flow::Continue
    }

    fn wants_interactions(&self) -> bool {
        true
    }
}

pub fn majority_params(spec: &ExperimentSpec, m: u32) -> MajorityParams {
    let (n, s) = (spec.n, spec.s);
    match spec.protocol {
        ProtocolKind::ClockedMajority => MajorityParams::clocked(n, s, spec.rounds().unwrap_or(3), m),
        ProtocolKind::StableMajority => MajorityParams::stable(n, s, m),
        ProtocolKind::ConvergentMajority => MajorityParams::convergent(n, s, m),
        _ => MajorityParams::uniform(n, s, m),
    }
}

fn run_majority(ctx: &Ctx, params: MajorityParams) -> Result<Row, HarnessError> {
    let spec = ctx.spec;
    let p = Majority::new(params);
    let inputs = majority_inputs(spec.n, spec.alpha()).ok_or_else(|| HarnessError::InvalidSpec("bad alpha".into()))?;
    let mut watch = MajorityWatch::new(spec.n, params);
    let run = run_trial(&p, Configuration::from_inputs(&p, inputs), &ctx.options(), ctx.rng.clone(), &mut watch)?;
    let mut mt = metrics_of(&p, &run, all_output(1i8));
    if params.variant == Variant::Uniform && run.config.states.iter().all(|s| !s.jc.junta.marker) {
        // FormJunta always leaves a marked agent.
        mt.extras.insert("error".into(), json!("no marked agent"));
    }
    Ok(ctx.row(Some(mt), watch.extras(&run.config.states)))
}

fn run_leader(ctx: &Ctx, m: u32) -> Result<Row, HarnessError> {
    let spec = ctx.spec;
    let params = LeaderParams::new(spec.n, spec.s, m);
    let p = Leader::new(params);
    let mut watch = LeaderWatch::new(spec.n, params);
    let run = run_trial(&p, Configuration::from_inputs(&p, vec![(); spec.n]), &ctx.options(), ctx.rng.clone(), &mut watch)?;
    let mt = metrics_of(&p, &run, exactly_one_leader);
    let st = &run.config.states;
    let mut e = BTreeMap::new();
    e.insert("rounds_used".into(), json!(watch.rounds));
    e.insert("contenders_per_round".into(), json!(watch.contenders_per_round));
    e.insert("slow_tick".into(), json!(watch.first_tick));
    e.insert("q_l".into(), json!(st.iter().filter(|s| s.terminal == Terminal::Leader).count()));
    e.insert("slow_marked".into(), json!(st.iter().filter(|s| s.slow_marked).count()));
    e.insert("incomplete_blocks".into(), json!(watch.incomplete_blocks));
    e.insert("block_len".into(), json!(params.block));
    e.insert("marking_trials".into(), json!(params.marking_trials));
    e.insert("slow_m".into(), json!(params.slow_m));
    Ok(ctx.row(Some(mt), e))
}

fn run_one(ctx: &Ctx) -> Result<Row, HarnessError> {
    let spec = ctx.spec;
    let n = spec.n;
    let budget = spec.budget();
    let nlnn = spec.nlnn();
    match spec.protocol {
        ProtocolKind::Epidemic => {
            let t = infection_trial(n, budget, ctx.rng.clone())?;
            let mt = TrialMetrics {
                convergence_interactions: t,
                stabilization_interactions: t,
                final_output_correct: !t.is_censored(),
                distinct_states_seen: 2,
                extras: BTreeMap::new(),
            };
            let mut e = BTreeMap::new();
            e.insert("normalized".into(), json!(t.value().map(|x| x as f64 / nlnn)));
            Ok(ctx.row(Some(mt), e))
        }
        ProtocolKind::LoadBalancing => {
            let delta = spec.alpha() as i64;
            let cap = (n as i64).max(delta);
            let t = balancing_time_from(&discrepancy_loads(n, delta), cap, budget, ctx.rng.clone())?;
            let mt = TrialMetrics {
                convergence_interactions: t,
                stabilization_interactions: Censored::Censored,
                final_output_correct: !t.is_censored(),
                distinct_states_seen: 0,
                extras: BTreeMap::new(),
            };
            let mut e = BTreeMap::new();
            e.insert("delta".into(), json!(delta));
            e.insert("normalized".into(), json!(t.value().map(|x| x as f64 / (n as f64 * (n as f64 * delta as f64).ln()))));
            Ok(ctx.row(Some(mt), e))
        }
        ProtocolKind::LevelProcess | ProtocolKind::FormJunta | ProtocolKind::FormJuntaExt => {
            let variant = match spec.protocol {
                ProtocolKind::LevelProcess => JuntaVariant::Level,
                ProtocolKind::FormJunta => JuntaVariant::FormJunta,
                _ => JuntaVariant::FormJuntaExt,
            };
            let p = JuntaProtocol::new(variant, n);
            let (stats, _) = junta_trial(&p, n, budget, 0, ctx.rng.clone())?;
            let mt = with_event(
                TrialMetrics {
                    convergence_interactions: Censored::Censored,
                    stabilization_interactions: Censored::Censored,
                    final_output_correct: false,
                    distinct_states_seen: 0,
                    extras: BTreeMap::new(),
                },
                stats.inactivation_time,
            );
            let mut e = BTreeMap::new();
            e.insert("l_max".into(), json!(stats.l_max));
            e.insert("b_l_max".into(), json!(stats.b_at(stats.l_max)));
            e.insert("l_star".into(), json!(p.l_star));
            e.insert("b_l_star".into(), json!(stats.b_at(p.l_star)));
            e.insert("marked".into(), json!(stats.marked));
            e.insert("b".into(), json!(stats.b));
            Ok(ctx.row(Some(mt), e))
        }
        ProtocolKind::PhaseClock => {
            let m = ctx.m.unwrap_or(1);
            let rounds = spec.rounds().unwrap_or(50);
            let cadence = if spec.cadence == 0 { n as u64 } else { spec.cadence };
            let w = clock_trial(m, n, rounds, cadence, budget, None, ctx.rng.clone())?;
            let lengths = w.lengths();
            let shortest = lengths.iter().copied().min();
            let wide = w.probes.iter().filter(|p| p.spread() > 1).count();
            let done = lengths.len() >= rounds as usize;
            let mt = TrialMetrics {
                convergence_interactions: (done).then(|| w.end.last().copied().unwrap_or(0)).into(),
                stabilization_interactions: Censored::Censored,
                final_output_correct: done && wide == 0,
                distinct_states_seen: 0,
                extras: BTreeMap::new(),
            };
            let mut e = BTreeMap::new();
            e.insert("rounds".into(), json!(lengths.len()));
            e.insert("min_round_length".into(), json!(shortest.map(|x| x as f64 / nlnn)));
            e.insert("round_lengths".into(), json!(lengths.iter().map(|x| *x as f64 / nlnn).collect::<Vec<_>>()));
            e.insert("probes".into(), json!(w.probes.len()));
            e.insert("wide_probes".into(), json!(wide));
            Ok(ctx.row(Some(mt), e))
        }
        ProtocolKind::Backup4 => {
            let p = Backup4Protocol;
            let inputs = majority_inputs(n, spec.alpha()).ok_or_else(|| HarnessError::InvalidSpec("bad alpha".into()))?;
            let run = run_trial(&p, Configuration::from_inputs(&p, inputs), &ctx.options(), ctx.rng.clone(), &mut ())?;
            Ok(ctx.row(Some(metrics_of(&p, &run, all_output(1i8))), BTreeMap::new()))
        }
        ProtocolKind::Backup2 => {
            let p = Backup2Protocol;
            let run = run_trial(&p, Configuration::from_inputs(&p, vec![(); n]), &ctx.options(), ctx.rng.clone(), &mut ())?;
            Ok(ctx.row(Some(metrics_of(&p, &run, exactly_one_leader)), BTreeMap::new()))
        }
        ProtocolKind::ClockedMajority | ProtocolKind::StableMajority | ProtocolKind::ConvergentMajority | ProtocolKind::UniformMajority => {
            run_majority(ctx, majority_params(spec, ctx.m.unwrap_or(1)))
        }
        ProtocolKind::Leader => run_leader(ctx, ctx.m.unwrap_or(1)),
    }
}

/// Runs every trial of `spec`, in parallel; rows come back in trial order.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<Row>, HarnessError> {
    spec.validate()?;
    let m = spec.resolve_m()?;
    let rows = (0..spec.trials)
        .into_par_iter()
        .map(|trial| {
            let ctx = Ctx {
                spec,
                trial,
                m,
                rng: RngStream::for_trial(spec.seed, trial),
            };
            run_one(&ctx).unwrap_or_else(|e| ctx.failed(&e))
        })
        .collect();
    Ok(rows)
}

/// Writes rows to `spec.output`, or to `dir/<protocol>-n<n>.<ext>` when only
/// an output directory is known.
pub fn output_path(spec: &ExperimentSpec, dir: Option<&std::path::Path>) -> Option<PathBuf> {
    spec.output.clone().or_else(|| {
        dir.map(|d| {
            let ext = match spec.format {
                Format::Csv => "csv",
                Format::Json => "json",
            };
            d.join(format!("{}-n{}-s{}.{ext}", spec.protocol.name(), spec.n, spec.s))
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_of(rows: &[Row]) -> String {
        let mut buf = Vec::new();
        write_csv(rows, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn epidemic_rows_are_deterministic() {
        let mut spec = ExperimentSpec::new(ProtocolKind::Epidemic, 1024);
        spec.trials = 10;
        spec.seed = 7;
        let a = csv_of(&run_experiment(&spec).unwrap());
        let b = csv_of(&run_experiment(&spec).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 11);
    }

    #[test]
    fn zero_trials_still_writes_header() {
        let mut spec = ExperimentSpec::new(ProtocolKind::Epidemic, 16);
        spec.trials = 0;
        let rows = run_experiment(&spec).unwrap();
        assert!(rows.is_empty());
        assert_eq!(csv_of(&rows).trim_end(), CSV_HEADER.join(","));
    }

    #[test]
    fn csv_round_trip() {
        let mut spec = ExperimentSpec::new(ProtocolKind::Backup4, 9);
        spec.trials = 3;
        spec.seed = 1;
        let rows = run_experiment(&spec).unwrap();
        let back = read_csv(csv_of(&rows).as_bytes()).unwrap();
        assert_eq!(rows, back);
        assert!(rows.iter().all(|r| r.correct));
    }

    #[test]
    fn spec_json_accepts_calibrate_keyword() {
        let spec: ExperimentSpec = serde_json::from_str(r#"{"protocol": "stable-majority", "n": 64, "m": "calibrate", "trials": 2}"#).unwrap();
        assert_eq!(spec.m, MSpec::default());
        let spec: ExperimentSpec = serde_json::from_str(r#"{"protocol": "stable-majority", "n": 64, "m": 12}"#).unwrap();
        assert_eq!(spec.m, MSpec::Fixed(12));
        assert!(serde_json::from_str::<ExperimentSpec>(r#"{"protocol": "nope", "n": 64}"#).is_err());
    }

    #[test]
    fn invalid_specs() {
        let mut spec = ExperimentSpec::new(ProtocolKind::StableMajority, 64);
        spec.alpha = Some(3);
        assert!(spec.validate().is_err());
        spec.alpha = Some(2);
        assert!(spec.validate().is_ok());
        spec.n = 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn errors_become_failed_rows() {
        let spec = ExperimentSpec::new(ProtocolKind::Backup4, 8);
        let ctx = Ctx {
            spec: &spec,
            trial: 3,
            m: None,
            rng: RngStream::for_trial(0, 3),
        };
        let err = HarnessError::Engine(EngineError::StateBudgetViolation {
            agent: 1,
            key: 99,
            budget: 4,
            interaction: 10,
        });
        let row = ctx.failed(&err);
        assert!(row.failed() && !row.correct && row.censored);
        assert_eq!(row.trial_id, 3);
    }

    #[test]
    fn stable_majority_row() {
        let mut spec = ExperimentSpec::new(ProtocolKind::StableMajority, 256);
        spec.m = MSpec::Fixed(32);
        spec.trials = 2;
        let rows = run_experiment(&spec).unwrap();
        for r in &rows {
            assert!(r.correct, "{r:?}");
            assert!(r.t_stabilization.is_some());
            assert!(r.extras().contains_key("rounds_completed"));
        }
    }

    #[test]
    fn protocol_names_round_trip() {
        for p in ProtocolKind::ALL {
            assert_eq!(p.name().parse::<ProtocolKind>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.name()));
        }
    }
}

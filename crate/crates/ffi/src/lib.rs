//! C ABI over the simulator.
//!
//! Simulations live behind the opaque `PpSimulation` handle; every call
//! returns a `PpStatus` and writes results through out-pointers. Panics never
//! cross the boundary: they surface as `PP_STATUS_PANIC`.

use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use popproto::engine::{pick_pair, Configuration, EngineError, Protocol, RngStream};
use popproto::harness::{run_experiment, write_csv, ExperimentSpec, HarnessError};
use popproto::leader::{Leader, LeaderParams, Role};
use popproto::majority::{majority_inputs, Majority, MajorityParams};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidPopulation = 3,
    /// An agent left the protocol's declared state space.
    StateBudget = 4,
    /// The experiment spec did not parse or validate.
    InvalidSpec = 5,
    Internal = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PpVariant {
    ClockedMajority = 0,
    StableMajority = 1,
    ConvergentMajority = 2,
    UniformMajority = 3,
}

trait Sim {
    fn step(&mut self, interactions: u64) -> Result<(), EngineError>;
    fn is_stable(&self) -> Option<bool>;
    fn count(&self, output: i32) -> u64;
    fn interactions(&self) -> u64;
    fn len(&self) -> usize;
}

struct Run<P: Protocol> {
    protocol: P,
    config: Configuration<P::State>,
    rng: RngStream,
    encode: fn(P::Output) -> i32,
}

impl<P: Protocol> Sim for Run<P> {
    fn step(&mut self, interactions: u64) -> Result<(), EngineError> {
        let n = self.config.len();
        for _ in 0..interactions {
            let (u, v) = pick_pair(&mut self.rng, n)?;
            let (a, b) = self.protocol.transition(&self.config.states[u], &self.config.states[v]);
            self.config.interactions_elapsed += 1;
            for (agent, s) in [(u, a), (v, b)] {
                if !self.protocol.within_budget(&s) {
                    return Err(EngineError::StateBudgetViolation {
                        agent,
                        key: self.protocol.state_key(&s),
                        budget: self.protocol.state_budget(),
                        interaction: self.config.interactions_elapsed,
                    });
                }
            }
            self.config.states[u] = a;
            self.config.states[v] = b;
        }
        Ok(())
    }

    fn is_stable(&self) -> Option<bool> {
        self.protocol.is_stable(&self.config.states)
    }

    fn count(&self, output: i32) -> u64 {
        self.config.states.iter().filter(|s| (self.encode)(self.protocol.output(s)) == output).count() as u64
    }

    fn interactions(&self) -> u64 {
        self.config.interactions_elapsed
    }

    fn len(&self) -> usize {
        self.config.len()
    }
}

/// Opaque simulation handle.
pub struct PpSimulation {
    sim: Box<dyn Sim>,
}

fn guard(f: impl FnOnce() -> PpStatus) -> PpStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or(PpStatus::Panic)
}

fn engine_status(e: &EngineError) -> PpStatus {
    match e {
        EngineError::InvalidPopulation(_) => PpStatus::InvalidPopulation,
        EngineError::StateBudgetViolation { .. } => PpStatus::StateBudget,
        EngineError::ZeroBudget | EngineError::UnsupportedMeasurement { .. } => PpStatus::InvalidArgument,
    }
}

unsafe fn publish(out: *mut *mut PpSimulation, sim: Box<dyn Sim>) -> PpStatus {
    *out = Box::into_raw(Box::new(PpSimulation { sim }));
    PpStatus::Ok
}

/// Creates a majority simulation with `(n + alpha) / 2` agents of opinion +1.
///
/// `m` is the number of phases per clock round. The handle must be released
/// with `pp_sim_free`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn pp_sim_new_majority(variant: PpVariant, n: usize, alpha: usize, s: u32, m: u32, seed: u64, out: *mut *mut PpSimulation) -> PpStatus {
    if out.is_null() {
        return PpStatus::NullPointer;
    }
    guard(|| {
        if n < 2 {
            return PpStatus::InvalidPopulation;
        }
        if s < 2 || m == 0 {
            return PpStatus::InvalidArgument;
        }
        let Some(inputs) = majority_inputs(n, alpha) else {
            return PpStatus::InvalidArgument;
        };
        let params = match variant {
            PpVariant::ClockedMajority => MajorityParams::clocked(n, s, popproto::majority::stable_rounds(n, s).max(3), m),
            PpVariant::StableMajority => MajorityParams::stable(n, s, m),
            PpVariant::ConvergentMajority => MajorityParams::convergent(n, s, m),
            PpVariant::UniformMajority => MajorityParams::uniform(n, s, m),
        };
        let protocol = Majority::new(params);
        let config = Configuration::from_inputs(&protocol, inputs);
        let run = Run {
            protocol,
            config,
            rng: RngStream::new(seed),
            encode: i32::from,
        };
        publish(out, Box::new(run))
    })
}

/// Creates a leader-election simulation. Outputs are 1 for leader, 0 for follower.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn pp_sim_new_leader(n: usize, s: u32, m: u32, seed: u64, out: *mut *mut PpSimulation) -> PpStatus {
    if out.is_null() {
        return PpStatus::NullPointer;
    }
    guard(|| {
        if n < 2 {
            return PpStatus::InvalidPopulation;
        }
        if s < 2 || m == 0 {
            return PpStatus::InvalidArgument;
        }
        let protocol = Leader::new(LeaderParams::new(n, s, m));
        let config = Configuration::from_inputs(&protocol, vec![(); n]);
        let run = Run {
            protocol,
            config,
            rng: RngStream::new(seed),
            encode: |r| i32::from(r == Role::Leader),
        };
        publish(out, Box::new(run))
    })
}

/// Runs `interactions` more interactions.
///
/// # Safety
/// `sim` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn pp_sim_step(sim: *mut PpSimulation, interactions: u64) -> PpStatus {
    let Some(sim) = sim.as_mut() else {
        return PpStatus::NullPointer;
    };
    guard(|| match sim.sim.step(interactions) {
        Ok(()) => PpStatus::Ok,
        Err(e) => engine_status(&e),
    })
}

/// Writes whether the current configuration satisfies the protocol's stability predicate.
///
/// # Safety
/// `sim` must be a live handle or null; `out` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn pp_sim_is_stable(sim: *const PpSimulation, out: *mut bool) -> PpStatus {
    let (Some(sim), false) = (sim.as_ref(), out.is_null()) else {
        return PpStatus::NullPointer;
    };
    guard(|| match sim.sim.is_stable() {
        Some(b) => {
            *out = b;
            PpStatus::Ok
        }
        None => PpStatus::Internal,
    })
}

/// Writes the number of agents whose output equals `output`.
///
/// # Safety
/// `sim` must be a live handle or null; `out` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn pp_sim_output_count(sim: *const PpSimulation, output: i32, out: *mut u64) -> PpStatus {
    let (Some(sim), false) = (sim.as_ref(), out.is_null()) else {
        return PpStatus::NullPointer;
    };
    guard(|| {
        *out = sim.sim.count(output);
        PpStatus::Ok
    })
}

/// # Safety
/// `sim` must be a live handle or null; `out` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn pp_sim_interactions(sim: *const PpSimulation, out: *mut u64) -> PpStatus {
    let (Some(sim), false) = (sim.as_ref(), out.is_null()) else {
        return PpStatus::NullPointer;
    };
    *out = sim.sim.interactions();
    PpStatus::Ok
}

/// # Safety
/// `sim` must be a live handle or null; `out` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn pp_sim_population(sim: *const PpSimulation, out: *mut usize) -> PpStatus {
    let (Some(sim), false) = (sim.as_ref(), out.is_null()) else {
        return PpStatus::NullPointer;
    };
    *out = sim.sim.len();
    PpStatus::Ok
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `sim` must come from a `pp_sim_new_*` call and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pp_sim_free(sim: *mut PpSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Runs the experiment described by the JSON spec and writes the rows as a
/// CSV string to `out_csv`, to be released with `pp_string_free`.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string; `out_csv` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pp_run_experiment_json(spec_json: *const c_char, out_csv: *mut *mut c_char) -> PpStatus {
    if spec_json.is_null() || out_csv.is_null() {
        return PpStatus::NullPointer;
    }
    guard(|| {
        let Ok(text) = CStr::from_ptr(spec_json).to_str() else {
            return PpStatus::InvalidSpec;
        };
        let Ok(spec) = serde_json::from_str::<ExperimentSpec>(text) else {
            return PpStatus::InvalidSpec;
        };
        let rows = match run_experiment(&spec) {
            Ok(rows) => rows,
            Err(HarnessError::InvalidSpec(_)) => return PpStatus::InvalidSpec,
            Err(HarnessError::Engine(e)) => return engine_status(&e),
            Err(_) => return PpStatus::Internal,
        };
        let mut buf = Vec::new();
        if write_csv(&rows, &mut buf).is_err() {
            return PpStatus::Internal;
        }
        match CString::new(buf) {
            Ok(s) => {
                *out_csv = s.into_raw();
                PpStatus::Ok
            }
            Err(_) => PpStatus::Internal,
        }
    })
}

/// # Safety
/// `s` must come from this library and not have been freed; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn pp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Static, NUL-terminated description of a status code.
#[no_mangle]
pub extern "C" fn pp_status_message(status: PpStatus) -> *const c_char {
    let s: &'static CStr = match status {
        PpStatus::Ok => c"ok",
        PpStatus::NullPointer => c"null pointer argument",
        PpStatus::InvalidArgument => c"invalid argument",
        PpStatus::InvalidPopulation => c"population must have at least 2 agents",
        PpStatus::StateBudget => c"agent left the declared state space",
        PpStatus::InvalidSpec => c"invalid experiment spec",
        PpStatus::Internal => c"internal error",
        PpStatus::Panic => c"panic inside the library",
    };
    s.as_ptr()
}

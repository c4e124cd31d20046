//! The instance registry held by the simulation manager.
//!
//! Registration stores an instance's network location and releases every
//! lookup blocked on that name. Lookups block until the name registers or
//! the run aborts. When every expected instance has deregistered the run
//! is complete.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

/// Lifecycle state of a registry entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryState {
    Registered,
    Deregistered,
}

/// One instance's registration: name, network location, lifecycle state.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub name: String,
    pub host: String,
    pub port: u16,
    pub state: EntryState,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RegistryError {
    #[error("unknown instance {0}: not declared in the topology")]
    UnknownInstance(String),
    #[error("duplicate registration of instance {0}")]
    DuplicateRegistration(String),
    #[error("instance {0} is not registered")]
    NotRegistered(String),
    #[error("aborted: {0}")]
    Aborted(String),
}

/// Outcome of a run as seen by the registry.
#[derive(Debug, Clone, PartialEq)]
pub enum RegistryOutcome {
    Complete,
    Aborted(String),
    TimedOut,
}

struct RegistryState {
    entries: BTreeMap<String, RegistryEntry>,
    aborted: Option<String>,
    deregistered: usize,
}

/// Central registry of instance locations; mutations are serialized and
/// blocked resolvers wait on the registry's condition variable.
pub struct Registry {
    expected: BTreeSet<String>,
    state: Mutex<RegistryState>,
    cond: Condvar,
}

impl Registry {
    pub fn new(expected: impl IntoIterator<Item = String>) -> Self {
        Registry {
            expected: expected.into_iter().collect(),
            state: Mutex::new(RegistryState {
                entries: BTreeMap::new(),
                aborted: None,
                deregistered: 0,
            }),
            cond: Condvar::new(),
        }
    }

    /// Stores an entry and releases all lookups blocked on this name.
    pub fn register(&self, name: &str, host: &str, port: u16) -> Result<(), RegistryError> {
        if !self.expected.contains(name) {
            return Err(RegistryError::UnknownInstance(name.to_string()));
        }
        let mut state = self.state.lock().unwrap();
        if let Some(reason) = &state.aborted {
            return Err(RegistryError::Aborted(reason.clone()));
        }
        if state.entries.contains_key(name) {
            return Err(RegistryError::DuplicateRegistration(name.to_string()));
        }
        state.entries.insert(
            name.to_string(),
            RegistryEntry {
                name: name.to_string(),
                host: host.to_string(),
                port,
                state: EntryState::Registered,
            },
        );
        drop(state);
        self.cond.notify_all();
        Ok(())
    }

    /// Blocks until `name` is registered, then returns its location.
    pub fn resolve(&self, name: &str) -> Result<(String, u16), RegistryError> {
        if !self.expected.contains(name) {
            return Err(RegistryError::UnknownInstance(name.to_string()));
        }
        let mut state = self.state.lock().unwrap();
        loop {
            if let Some(reason) = &state.aborted {
                return Err(RegistryError::Aborted(reason.clone()));
            }
            if let Some(entry) = state.entries.get(name) {
                return Ok((entry.host.clone(), entry.port));
            }
            state = self.cond.wait(state).unwrap();
        }
    }

    /// Marks an entry deregistered. Returns true when this call completed
    /// the run (every expected instance deregistered).
    pub fn deregister(&self, name: &str) -> Result<bool, RegistryError> {
        if !self.expected.contains(name) {
            return Err(RegistryError::UnknownInstance(name.to_string()));
        }
        let mut state = self.state.lock().unwrap();
        let entry = state
            .entries
            .get_mut(name)
            .filter(|e| e.state == EntryState::Registered)
            .ok_or_else(|| RegistryError::NotRegistered(name.to_string()))?;
        entry.state = EntryState::Deregistered;
        state.deregistered += 1;
        let complete = state.deregistered == self.expected.len();
        drop(state);
        if complete {
            self.cond.notify_all();
        }
        Ok(complete)
    }

    /// Aborts the run: every blocked resolve unblocks with `Aborted`.
    /// Idempotent; the first reason wins. An abort after the run has
    /// already completed is ignored (teardown noise, not a failure).
    pub fn abort(&self, reason: &str) {
        let mut state = self.state.lock().unwrap();
        if state.deregistered == self.expected.len() {
            return;
        }
        if state.aborted.is_none() {
            state.aborted = Some(reason.to_string());
            drop(state);
            self.cond.notify_all();
        }
    }

    pub fn is_aborted(&self) -> bool {
        self.state.lock().unwrap().aborted.is_some()
    }

    fn outcome_locked(&self, state: &RegistryState) -> Option<RegistryOutcome> {
        if state.deregistered == self.expected.len() {
            return Some(RegistryOutcome::Complete);
        }
        if let Some(reason) = &state.aborted {
            return Some(RegistryOutcome::Aborted(reason.clone()));
        }
        None
    }

    /// Current outcome, if the run has finished either way.
    pub fn outcome(&self) -> Option<RegistryOutcome> {
        let state = self.state.lock().unwrap();
        self.outcome_locked(&state)
    }

    /// Blocks until the run completes or aborts, up to `timeout`.
    pub fn wait_outcome(&self, timeout: Duration) -> RegistryOutcome {
        let deadline = Instant::now() + timeout;
        let mut state = self.state.lock().unwrap();
        loop {
            if let Some(outcome) = self.outcome_locked(&state) {
                return outcome;
            }
            let now = Instant::now();
            if now >= deadline {
                return RegistryOutcome::TimedOut;
            }
            let (next, _) = self.cond.wait_timeout(state, deadline - now).unwrap();
            state = next;
        }
    }

    /// Snapshot of all entries, for diagnostics.
    pub fn entries(&self) -> Vec<RegistryEntry> {
        self.state.lock().unwrap().entries.values().cloned().collect()
    }
}

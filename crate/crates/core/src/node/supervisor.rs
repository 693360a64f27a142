//! Process table with restart-on-failure and capped exponential backoff.
//!
//! A service is a step contract invoked once per tick while it runs. The
//! supervisor never gives up on a service that should be running.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::Tick;

pub const BACKOFF_CAP: Tick = 64;

/// Delay before the restart that follows `restart_count` earlier restarts.
pub fn backoff_delay(restart_count: u32) -> Tick {
    if restart_count >= 6 {
        BACKOFF_CAP
    } else {
        (1u64 << restart_count).min(BACKOFF_CAP)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServiceKind {
    Generic,
    GridServer { server_url: String },
    GridClient { server_url: String, account_key: String, platform: String, client_id: String },
}

/// What a recipe asks the supervisor to run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub service_id: String,
    pub partition: u32,
    pub kind: ServiceKind,
    pub binary: Option<String>,
    pub config: Option<String>,
    pub log: Option<String>,
    pub identity: String,
    pub subject: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Desired {
    Running,
    Stopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Actual {
    Running,
    Exited,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEntry {
    pub spec: ServiceSpec,
    pub desired: Desired,
    pub actual: Actual,
    pub restart_count: u32,
    pub backoff_until: Tick,
    /// Number of upcoming steps forced to fail.
    pub injected_failures: u32,
    pub last_failure: Option<Tick>,
}

impl ServiceEntry {
    pub fn needs_restart(&self) -> bool {
        self.desired == Desired::Running && self.actual != Actual::Running
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessTable {
    entries: BTreeMap<String, ServiceEntry>,
}

impl ProcessTable {
    pub fn new() -> Self {
        ProcessTable::default()
    }

    /// Adds a service, stopped. Registering an identical spec again changes
    /// nothing and returns false.
    pub fn register(&mut self, spec: ServiceSpec) -> bool {
        match self.entries.get_mut(&spec.service_id) {
            Some(entry) if entry.spec == spec => false,
            Some(entry) => {
                entry.spec = spec;
                true
            }
            None => {
                let id = spec.service_id.clone();
                self.entries.insert(
                    id,
                    ServiceEntry {
                        spec,
                        desired: Desired::Stopped,
                        actual: Actual::Exited,
                        restart_count: 0,
                        backoff_until: 0,
                        injected_failures: 0,
                        last_failure: None,
                    },
                );
                true
            }
        }
    }

    pub fn get(&self, id: &str) -> Option<&ServiceEntry> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ServiceEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn of_partition(&self, partition: u32) -> impl Iterator<Item = &ServiceEntry> {
        self.entries.values().filter(move |e| e.spec.partition == partition)
    }

    pub fn remove_partition(&mut self, partition: u32) {
        self.entries.retain(|_, e| e.spec.partition != partition);
    }

    pub fn set_desired(&mut self, id: &str, desired: Desired) {
        if let Some(e) = self.entries.get_mut(id) {
            e.desired = desired;
            if desired == Desired::Stopped {
                e.actual = Actual::Exited;
            }
        }
    }

    /// First start of a service, outside the restart path. `launched`
    /// tells whether the launch itself went through.
    pub fn start(&mut self, id: &str, launched: bool, now: Tick) {
        if let Some(e) = self.entries.get_mut(id) {
            e.desired = Desired::Running;
            if e.actual != Actual::Running {
                e.actual = if launched { Actual::Running } else { Actual::Failed };
                if !launched {
                    e.last_failure = Some(now);
                }
            }
        }
    }

    /// Simulates an external kill at `now`.
    pub fn kill(&mut self, id: &str, now: Tick) {
        if let Some(e) = self.entries.get_mut(id) {
            e.actual = Actual::Failed;
            e.last_failure = Some(now);
        }
    }

    pub fn inject_failures(&mut self, id: &str, count: u32) {
        if let Some(e) = self.entries.get_mut(id) {
            e.injected_failures += count;
        }
    }

    /// Restart phase: every service that should run but does not, and whose
    /// backoff has elapsed, is relaunched through `launch`. Returns the
    /// relaunched ids (successful or not).
    pub fn supervisor_tick(&mut self, now: Tick, mut launch: impl FnMut(&ServiceEntry) -> bool) -> Vec<String> {
        let mut restarted = Vec::new();
        for (id, e) in self.entries.iter_mut() {
            if !e.needs_restart() || now < e.backoff_until {
                continue;
            }
            let ok = launch(e);
            e.restart_count += 1;
            e.backoff_until = now + backoff_delay(e.restart_count);
            if ok {
                e.actual = Actual::Running;
            } else {
                e.last_failure = Some(now);
            }
            restarted.push(id.clone());
        }
        restarted
    }

    pub fn running(&self) -> Vec<String> {
        self.entries.iter().filter(|(_, e)| e.actual == Actual::Running).map(|(id, _)| id.clone()).collect()
    }

    /// Consumes one injected failure if any is pending.
    pub fn take_injected_failure(&mut self, id: &str) -> bool {
        match self.entries.get_mut(id) {
            Some(e) if e.injected_failures > 0 => {
                e.injected_failures -= 1;
                true
            }
            _ => false,
        }
    }

    pub fn record_outcome(&mut self, id: &str, outcome: Actual, now: Tick) {
        if let Some(e) = self.entries.get_mut(id) {
            e.actual = outcome;
            if outcome == Actual::Failed {
                e.last_failure = Some(now);
            }
        }
    }

    /// Step phase: runs every running service once. Injected failures win
    /// over the step contract.
    pub fn run_services(&mut self, now: Tick, mut step: impl FnMut(&ServiceEntry) -> Actual) {
        for id in self.running() {
            let outcome = if self.take_injected_failure(&id) { Actual::Failed } else { step(&self.entries[&id]) };
            self.record_outcome(&id, outcome, now);
        }
    }

    /// Restart phase then step phase.
    pub fn tick(
        &mut self,
        now: Tick,
        launch: impl FnMut(&ServiceEntry) -> bool,
        step: impl FnMut(&ServiceEntry) -> Actual,
    ) -> Vec<String> {
        let restarted = self.supervisor_tick(now, launch);
        self.run_services(now, step);
        restarted
    }
}

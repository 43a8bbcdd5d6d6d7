//! Rule evaluation: periodic timers and input-update rules.
//!
//! The engine is a plain state machine. Callers serialize access to it (the
//! service keeps it behind one mutex) and hand the returned dispatches to the
//! flow runner. Each flow has at most one active run plus one queued dispatch;
//! anything beyond that is coalesced into the queued one.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{AeroError, Result};
use crate::ids::{AssetId, FlowId};
use crate::model::{DispatchReason, FlowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerRule {
    Periodic { interval_secs: u64 },
    OnAnyInputUpdate,
    OnAllInputUpdates,
}

impl TriggerRule {
    /// Checks the rule against the number of monitored (latest-bound) inputs.
    pub fn validate(&self, monitored_inputs: usize) -> Result<()> {
        match self {
            TriggerRule::Periodic { interval_secs } if *interval_secs < 1 => Err(
                AeroError::InvalidFlow("periodic interval must be at least 1 second".into()),
            ),
            TriggerRule::Periodic { .. } => Ok(()),
            _ if monitored_inputs == 0 => Err(AeroError::InvalidFlow(
                "update rules need at least one input bound to the latest version".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn is_update_rule(&self) -> bool {
        !matches!(self, TriggerRule::Periodic { .. })
    }
}

/// Whether `pending` satisfies `rule`. Timers never satisfy here; they go through [`TriggerEngine::tick`].
pub fn rule_satisfied(
    rule: &TriggerRule,
    pending: &BTreeSet<String>,
    monitored: &BTreeSet<String>,
) -> bool {
    match rule {
        TriggerRule::Periodic { .. } => false,
        TriggerRule::OnAnyInputUpdate => !pending.is_empty(),
        TriggerRule::OnAllInputUpdates => !monitored.is_empty() && pending == monitored,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimerSchedule {
    pub flow_id: FlowId,
    pub interval_secs: u64,
    pub next_due: DateTime<Utc>,
    /// The due instant that most recently fired (always on the schedule's grid).
    pub last_fired: Option<DateTime<Utc>>,
}

impl TimerSchedule {
    /// Fires if due, advancing `next_due` to the first grid point strictly after `now`.
    fn fire_if_due(&mut self, now: DateTime<Utc>) -> bool {
        if self.next_due > now {
            return false;
        }
        let interval = Duration::seconds(self.interval_secs as i64);
        let behind = (now - self.next_due).num_milliseconds() / interval.num_milliseconds();
        let next = self.next_due + interval * (behind as i32 + 1);
        self.last_fired = Some(next - interval);
        self.next_due = next;
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowDispatch {
    pub flow_id: FlowId,
    pub reason: DispatchReason,
}

#[derive(Debug, Clone)]
struct Watch {
    rule: TriggerRule,
    monitored: BTreeMap<String, AssetId>,
}

#[derive(Debug, Clone, PartialEq)]
enum Activity {
    Running,
    RunningWithQueued(FlowDispatch),
}

#[derive(Debug, Default)]
pub struct TriggerEngine {
    watches: BTreeMap<FlowId, Watch>,
    schedules: BTreeMap<FlowId, TimerSchedule>,
    pending: BTreeMap<FlowId, BTreeSet<String>>,
    by_asset: BTreeMap<AssetId, BTreeSet<FlowId>>,
    activity: BTreeMap<FlowId, Activity>,
}

impl TriggerEngine {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts watching a flow. Periodic flows first fire at `first_due`.
    pub fn install(&mut self, flow: &FlowSpec, first_due: DateTime<Utc>) {
        self.remove(flow.flow_id);
        let monitored = flow.monitored_inputs();
        match flow.rule {
            TriggerRule::Periodic { interval_secs } => {
                self.schedules.insert(
                    flow.flow_id,
                    TimerSchedule {
                        flow_id: flow.flow_id,
                        interval_secs,
                        next_due: first_due,
                        last_fired: None,
                    },
                );
            }
            _ => {
                for asset in monitored.values() {
                    self.by_asset.entry(*asset).or_default().insert(flow.flow_id);
                }
                self.pending.insert(flow.flow_id, BTreeSet::new());
            }
        }
        self.watches.insert(
            flow.flow_id,
            Watch {
                rule: flow.rule,
                monitored,
            },
        );
    }

    pub fn remove(&mut self, flow_id: FlowId) {
        if let Some(w) = self.watches.remove(&flow_id) {
            for asset in w.monitored.values() {
                if let Some(set) = self.by_asset.get_mut(asset) {
                    set.remove(&flow_id);
                    if set.is_empty() {
                        self.by_asset.remove(asset);
                    }
                }
            }
        }
        self.schedules.remove(&flow_id);
        self.pending.remove(&flow_id);
    }

    /// Fires every schedule due at `now`, once each, however many intervals were missed.
    pub fn tick(&mut self, now: DateTime<Utc>) -> Vec<FlowDispatch> {
        let due: Vec<FlowId> = self
            .schedules
            .values_mut()
            .filter_map(|s| s.fire_if_due(now).then_some(s.flow_id))
            .collect();
        due.into_iter()
            .filter_map(|flow_id| {
                self.admit(FlowDispatch {
                    flow_id,
                    reason: DispatchReason::Timer,
                })
            })
            .collect()
    }

    /// Records a freshly committed version and returns the flows whose rules it satisfies.
    pub fn on_commit(&mut self, asset_id: AssetId, version: u64) -> Vec<FlowDispatch> {
        let Some(flows) = self.by_asset.get(&asset_id).cloned() else {
            return Vec::new();
        };
        let mut out = Vec::new();
        for flow_id in flows {
            let watch = &self.watches[&flow_id];
            let pending = self.pending.entry(flow_id).or_default();
            for (param, bound) in &watch.monitored {
                if *bound == asset_id {
                    pending.insert(param.clone());
                }
            }
            let monitored: BTreeSet<String> = watch.monitored.keys().cloned().collect();
            if rule_satisfied(&watch.rule, pending, &monitored) {
                pending.clear();
                let dispatch = FlowDispatch {
                    flow_id,
                    reason: DispatchReason::InputUpdate { asset_id, version },
                };
                out.extend(self.admit(dispatch));
            }
        }
        out
    }

    /// Requests an out-of-band dispatch (manual trigger). Subject to the one-active-run gate.
    pub fn request(&mut self, dispatch: FlowDispatch) -> Option<FlowDispatch> {
        self.admit(dispatch)
    }

    /// Marks the flow's active run as finished, releasing the queued dispatch if there is one.
    pub fn run_finished(&mut self, flow_id: FlowId) -> Option<FlowDispatch> {
        match self.activity.remove(&flow_id) {
            Some(Activity::RunningWithQueued(next)) => {
                self.activity.insert(flow_id, Activity::Running);
                Some(next)
            }
            _ => None,
        }
    }

    fn admit(&mut self, dispatch: FlowDispatch) -> Option<FlowDispatch> {
        match self.activity.get(&dispatch.flow_id) {
            None => {
                self.activity.insert(dispatch.flow_id, Activity::Running);
                Some(dispatch)
            }
            Some(Activity::Running) => {
                self.activity
                    .insert(dispatch.flow_id, Activity::RunningWithQueued(dispatch));
                None
            }
            Some(Activity::RunningWithQueued(_)) => None,
        }
    }

    pub fn is_active(&self, flow_id: FlowId) -> bool {
        self.activity.contains_key(&flow_id)
    }

    pub fn has_queued(&self, flow_id: FlowId) -> bool {
        matches!(
            self.activity.get(&flow_id),
            Some(Activity::RunningWithQueued(_))
        )
    }

    pub fn pending(&self, flow_id: FlowId) -> BTreeSet<String> {
        self.pending.get(&flow_id).cloned().unwrap_or_default()
    }

    /// Overwrites a flow's pending set (state recovery after restart).
    pub fn restore_pending(&mut self, flow_id: FlowId, params: BTreeSet<String>) {
        if let Some(w) = self.watches.get(&flow_id) {
            let params = params
                .into_iter()
                .filter(|p| w.monitored.contains_key(p))
                .collect();
            self.pending.insert(flow_id, params);
        }
    }

    pub fn schedule(&self, flow_id: FlowId) -> Option<&TimerSchedule> {
        self.schedules.get(&flow_id)
    }

    pub fn watched_flows(&self, asset_id: AssetId) -> BTreeSet<FlowId> {
        self.by_asset.get(&asset_id).cloned().unwrap_or_default()
    }
}

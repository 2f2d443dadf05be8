//! Run event log.
//!
//! Every mutation of a topology during a run is mirrored by an event, so the
//! topology at any offset can be rebuilt by folding the log (see [`fold`]).
//! Live observers receive the same records through an [`EventSink`].

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::topology::{InferenceTopology, ReferenceLink, State, StateId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RunStarted,
    Checklist,
    Retrieval,
    Thought,
    StateCreated,
    Reference,
    Optimal,
    Decision,
    Backtrack,
    Control,
    Prune,
    Warning,
    Finalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    pub run_id: String,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state_id: Option<StateId>,
    pub payload: Value,
    pub ts: u64,
}

/// Source of event timestamps. `Logical` stamps each event with its sequence
/// number so seeded runs produce byte-identical logs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Clock {
    #[default]
    Logical,
    Wall,
}

impl Clock {
    pub fn stamp(self, seq: u64) -> u64 {
        match self {
            Clock::Logical => seq,
            Clock::Wall => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
        }
    }
}

pub trait EventSink: Send {
    fn emit(&mut self, event: &EventRecord);
}

/// Discards everything.
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&mut self, _event: &EventRecord) {}
}

impl<F: FnMut(&EventRecord) + Send> EventSink for F {
    fn emit(&mut self, event: &EventRecord) {
        self(event)
    }
}

/// Bounded observer buffer. When full the oldest record is dropped and the
/// drop counter incremented; emitting never blocks.
#[derive(Clone)]
pub struct RingBuffer {
    inner: Arc<Mutex<RingInner>>,
}

struct RingInner {
    buf: VecDeque<EventRecord>,
    capacity: usize,
    dropped: u64,
}

impl RingBuffer {
    pub fn new(capacity: usize) -> Self {
        RingBuffer {
            inner: Arc::new(Mutex::new(RingInner {
                buf: VecDeque::with_capacity(capacity),
                capacity: capacity.max(1),
                dropped: 0,
            })),
        }
    }

    pub fn drain(&self) -> Vec<EventRecord> {
        let mut g = self.inner.lock().unwrap();
        g.buf.drain(..).collect()
    }

    pub fn dropped(&self) -> u64 {
        self.inner.lock().unwrap().dropped
    }
}

impl EventSink for RingBuffer {
    fn emit(&mut self, event: &EventRecord) {
        let mut g = self.inner.lock().unwrap();
        if g.buf.len() == g.capacity {
            g.buf.pop_front();
            g.dropped += 1;
        }
        g.buf.push_back(event.clone());
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct RunStartedPayload {
    pub config_digest: String,
    pub root: State,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct StateCreatedPayload {
    pub state: State,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct FinalizedPayload {
    pub termination: crate::scheduler::Termination,
    pub final_states: Vec<StateId>,
    pub fallback_used: bool,
}

#[derive(Debug, Error)]
pub enum FoldError {
    #[error("event log does not start with run_started")]
    MissingStart,
    #[error("event {seq}: {reason}")]
    Bad { seq: u64, reason: String },
}

/// Rebuilds a topology from an event log prefix.
pub fn fold(events: &[EventRecord]) -> Result<InferenceTopology, FoldError> {
    let first = events.first().ok_or(FoldError::MissingStart)?;
    if first.kind != EventKind::RunStarted {
        return Err(FoldError::MissingStart);
    }
    let bad = |seq: u64, reason: String| FoldError::Bad { seq, reason };
    let start: RunStartedPayload =
        serde_json::from_value(first.payload.clone()).map_err(|e| bad(first.seq, e.to_string()))?;
    let mut topo = InferenceTopology::from_parts(
        start.config_digest,
        start.root,
        Vec::new(),
        Vec::new(),
        Vec::new(),
        Vec::new(),
    );
    for e in events {
        match e.kind {
            EventKind::StateCreated => {
                let p: StateCreatedPayload = serde_json::from_value(e.payload.clone())
                    .map_err(|err| bad(e.seq, err.to_string()))?;
                let s = p.state;
                let parent = s
                    .parent_id
                    .ok_or_else(|| bad(e.seq, "state without parent".into()))?;
                let id = topo
                    .append_state(parent, s.thought.clone(), s.output.clone(), s.evaluation.clone(), usize::MAX)
                    .map_err(|err| bad(e.seq, err.to_string()))?;
                if id != s.state_id {
                    return Err(bad(e.seq, format!("expected state {id}, got {}", s.state_id)));
                }
            }
            EventKind::Reference => {
                let link: ReferenceLink = serde_json::from_value(e.payload.clone())
                    .map_err(|err| bad(e.seq, err.to_string()))?;
                topo.push_reference(link);
            }
            EventKind::Finalized => {
                let p: FinalizedPayload = serde_json::from_value(e.payload.clone())
                    .map_err(|err| bad(e.seq, err.to_string()))?;
                topo.mark_activated(&p.final_states);
            }
            _ => {}
        }
        topo.push_event(e.clone());
    }
    Ok(topo)
}

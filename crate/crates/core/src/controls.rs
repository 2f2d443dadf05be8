//! Operator controls applied between scheduler steps.

use std::collections::BTreeMap;
use std::sync::mpsc::{Receiver, TryRecvError};

use serde::{Deserialize, Serialize};

use crate::topology::StateId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Control {
    Pause,
    Resume,
    Prune { state_id: StateId },
    ForceBacktrack,
    Accept { state_id: StateId },
}

pub trait ControlSource: Send {
    /// Controls pending before the state with index `step + 1` is created.
    fn poll(&mut self, step: usize) -> Vec<Control>;

    /// Blocks for the next control while paused. `None` means no further
    /// controls can arrive and the run resumes.
    fn wait(&mut self) -> Option<Control>;
}

/// No controls ever.
pub struct NoControls;

impl ControlSource for NoControls {
    fn poll(&mut self, _step: usize) -> Vec<Control> {
        Vec::new()
    }

    fn wait(&mut self) -> Option<Control> {
        None
    }
}

/// Controls keyed by the step at which they are delivered; used for
/// deterministic replays.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ControlScript {
    pub steps: BTreeMap<usize, Vec<Control>>,
}

impl ControlScript {
    pub fn at(mut self, step: usize, control: Control) -> Self {
        self.steps.entry(step).or_default().push(control);
        self
    }
}

impl ControlSource for ControlScript {
    fn poll(&mut self, step: usize) -> Vec<Control> {
        self.steps.remove(&step).unwrap_or_default()
    }

    fn wait(&mut self) -> Option<Control> {
        None
    }
}

/// Live controls from another thread.
pub struct ChannelControls {
    rx: Receiver<Control>,
}

impl ChannelControls {
    pub fn new(rx: Receiver<Control>) -> Self {
        ChannelControls { rx }
    }
}

impl ControlSource for ChannelControls {
    fn poll(&mut self, _step: usize) -> Vec<Control> {
        let mut out = Vec::new();
        loop {
            match self.rx.try_recv() {
                Ok(c) => out.push(c),
                Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => return out,
            }
        }
    }

    fn wait(&mut self) -> Option<Control> {
        self.rx.recv().ok()
    }
}

//! The inference topology: an append-only tree of states with reference
//! links layered on top.
//!
//! State ids are dense creation-order integers with the root at 0, so a
//! prefix of the topology ("the first n steps") is just the states with
//! id <= n.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::Evaluation;
use crate::events::EventRecord;
use crate::image::ImageRef;

pub type StateId = u32;

pub const ROOT: StateId = 0;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("instruction must not be empty")]
    EmptyInstruction,
    #[error("unresolvable image: {0}")]
    UnresolvableImage(String),
    #[error("unknown parent state {0}")]
    UnknownParent(StateId),
    #[error("unknown state {0}")]
    UnknownState(StateId),
    #[error("state {parent} already has {limit} children")]
    CapacityExceeded { parent: StateId, limit: usize },
    #[error("prefix length {requested} exceeds topology size {size}")]
    OutOfRange { requested: usize, size: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StateStatus {
    Activated,
    #[default]
    Idle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub state_id: StateId,
    /// `None` only for the root.
    pub parent_id: Option<StateId>,
    pub depth: u32,
    pub input: ImageRef,
    pub output: ImageRef,
    /// The prompt handed to the actor (the original instruction for the root).
    pub thought: String,
    pub evaluation: Option<Evaluation>,
    pub status: StateStatus,
}

impl State {
    pub fn is_root(&self) -> bool {
        self.parent_id.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionLink {
    pub from: StateId,
    pub to: StateId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceLink {
    pub at: StateId,
    #[serde(rename = "ref")]
    pub reference: StateId,
    pub similarity: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceTopology {
    pub config_digest: String,
    pub root: State,
    /// Non-root states; `states[i].state_id == i + 1`.
    pub states: Vec<State>,
    pub transitions: Vec<TransitionLink>,
    pub references: Vec<ReferenceLink>,
    pub events: Vec<EventRecord>,
    children: Vec<Vec<StateId>>,
}

impl InferenceTopology {
    /// Creates a topology holding only the root state.
    pub fn create_root(image: ImageRef, instruction: &str) -> Result<Self, TopologyError> {
        if instruction.trim().is_empty() {
            return Err(TopologyError::EmptyInstruction);
        }
        let root = State {
            state_id: ROOT,
            parent_id: None,
            depth: 0,
            input: image.clone(),
            output: image,
            thought: instruction.to_string(),
            evaluation: None,
            status: StateStatus::Idle,
        };
        Ok(InferenceTopology {
            config_digest: String::new(),
            root,
            states: Vec::new(),
            transitions: Vec::new(),
            references: Vec::new(),
            events: Vec::new(),
            children: vec![Vec::new()],
        })
    }

    pub fn with_config_digest(mut self, digest: impl Into<String>) -> Self {
        self.config_digest = digest.into();
        self
    }

    /// Number of non-root states.
    pub fn size(&self) -> usize {
        self.states.len()
    }

    pub fn contains(&self, id: StateId) -> bool {
        (id as usize) <= self.states.len()
    }

    pub fn state(&self, id: StateId) -> Option<&State> {
        if id == ROOT {
            Some(&self.root)
        } else {
            self.states.get(id as usize - 1)
        }
    }

    pub(crate) fn state_mut(&mut self, id: StateId) -> Option<&mut State> {
        if id == ROOT {
            Some(&mut self.root)
        } else {
            self.states.get_mut(id as usize - 1)
        }
    }

    pub fn children(&self, id: StateId) -> &[StateId] {
        self.children.get(id as usize).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn fan_out(&self, id: StateId) -> usize {
        self.children(id).len()
    }

    /// All states including the root, in creation order.
    pub fn iter(&self) -> impl Iterator<Item = &State> {
        std::iter::once(&self.root).chain(self.states.iter())
    }

    /// Appends a child of `parent_id`. The new state's input is the parent's
    /// output and its depth is one more than the parent's.
    pub fn append_state(
        &mut self,
        parent_id: StateId,
        thought: impl Into<String>,
        output: ImageRef,
        evaluation: Option<Evaluation>,
        max_children: usize,
    ) -> Result<StateId, TopologyError> {
        let parent = self
            .state(parent_id)
            .ok_or(TopologyError::UnknownParent(parent_id))?;
        if self.fan_out(parent_id) >= max_children {
            return Err(TopologyError::CapacityExceeded {
                parent: parent_id,
                limit: max_children,
            });
        }
        let id = self.states.len() as StateId + 1;
        let state = State {
            state_id: id,
            parent_id: Some(parent_id),
            depth: parent.depth + 1,
            input: parent.output.clone(),
            output,
            thought: thought.into(),
            evaluation,
            status: StateStatus::Idle,
        };
        self.states.push(state);
        self.children[parent_id as usize].push(id);
        self.children.push(Vec::new());
        self.transitions.push(TransitionLink {
            from: parent_id,
            to: id,
        });
        Ok(id)
    }

    pub(crate) fn push_reference(&mut self, link: ReferenceLink) {
        self.references.push(link);
    }

    pub(crate) fn push_event(&mut self, event: EventRecord) {
        self.events.push(event);
    }

    /// Path from the root to `id`, inclusive on both ends.
    pub fn chain_of_states(&self, id: StateId) -> Result<Vec<StateId>, TopologyError> {
        let mut path = Vec::new();
        let mut cursor = Some(id);
        while let Some(cur) = cursor {
            let s = self.state(cur).ok_or(TopologyError::UnknownState(id))?;
            path.push(cur);
            cursor = s.parent_id;
        }
        path.reverse();
        Ok(path)
    }

    /// Strict ancestors of `id`, nearest first.
    pub fn ancestors(&self, id: StateId) -> Vec<StateId> {
        let mut out = Vec::new();
        let mut cursor = self.state(id).and_then(|s| s.parent_id);
        while let Some(cur) = cursor {
            out.push(cur);
            cursor = self.state(cur).and_then(|s| s.parent_id);
        }
        out
    }

    pub fn is_ancestor(&self, ancestor: StateId, of: StateId) -> bool {
        self.ancestors(of).contains(&ancestor)
    }

    /// Candidate reference states for a new state at depth `depth` whose
    /// parent is `parent_id`: every non-root state with depth in
    /// `[depth - range, depth + range - 1]`, minus the new state's ancestors.
    pub fn reference_window(&self, parent_id: StateId, depth: u32, range: u32) -> Vec<StateId> {
        if range == 0 {
            return Vec::new();
        }
        let lo = depth.saturating_sub(range);
        let hi = depth + range - 1;
        let mut excluded: BTreeSet<StateId> = self.ancestors(parent_id).into_iter().collect();
        excluded.insert(parent_id);
        self.states
            .iter()
            .filter(|s| s.depth >= lo && s.depth <= hi && !excluded.contains(&s.state_id))
            .map(|s| s.state_id)
            .collect()
    }

    /// Root plus the first `n` created states, with links and events cut to
    /// match. Events are kept up to (not including) the first one that
    /// mentions a state beyond the prefix.
    pub fn prefix(&self, n: usize) -> Result<InferenceTopology, TopologyError> {
        if n > self.size() {
            return Err(TopologyError::OutOfRange {
                requested: n,
                size: self.size(),
            });
        }
        if n == self.size() {
            return Ok(self.clone());
        }
        let limit = n as StateId;
        let states: Vec<State> = self.states[..n]
            .iter()
            .cloned()
            .map(|mut s| {
                s.status = StateStatus::Idle;
                s
            })
            .collect();
        let mut root = self.root.clone();
        root.status = StateStatus::Idle;
        let children = (0..=n)
            .map(|i| {
                self.children[i]
                    .iter()
                    .copied()
                    .filter(|&c| c <= limit)
                    .collect()
            })
            .collect();
        let events = self
            .events
            .iter()
            .take_while(|e| e.state_id.is_none_or(|id| id <= limit))
            .cloned()
            .collect();
        Ok(InferenceTopology {
            config_digest: self.config_digest.clone(),
            root,
            states,
            transitions: self
                .transitions
                .iter()
                .copied()
                .filter(|l| l.to <= limit)
                .collect(),
            references: self
                .references
                .iter()
                .copied()
                .filter(|l| l.at <= limit)
                .collect(),
            events,
            children,
        })
    }

    /// Marks every state on a root chain to one of `finals` as activated and
    /// everything else idle.
    pub fn mark_activated(&mut self, finals: &[StateId]) {
        let mut on_chain = BTreeSet::new();
        for &f in finals {
            if let Ok(path) = self.chain_of_states(f) {
                on_chain.extend(path);
            }
        }
        let ids: Vec<StateId> = self.iter().map(|s| s.state_id).collect();
        for id in ids {
            let status = if on_chain.contains(&id) {
                StateStatus::Activated
            } else {
                StateStatus::Idle
            };
            if let Some(s) = self.state_mut(id) {
                s.status = status;
            }
        }
    }

    /// Rebuilds the child index from the transition list; used after
    /// deserialization.
    pub(crate) fn from_parts(
        config_digest: String,
        root: State,
        states: Vec<State>,
        transitions: Vec<TransitionLink>,
        references: Vec<ReferenceLink>,
        events: Vec<EventRecord>,
    ) -> Self {
        let mut children = vec![Vec::new(); states.len() + 1];
        for l in &transitions {
            if let Some(c) = children.get_mut(l.from as usize) {
                c.push(l.to);
            }
        }
        InferenceTopology {
            config_digest,
            root,
            states,
            transitions,
            references,
            events,
            children,
        }
    }

    /// Checks the structural laws: dense ids, one parent per state, depth and
    /// input chaining, and that transitions form a tree rooted at the root.
    pub fn check_tree(&self) -> Result<(), String> {
        if !self.root.is_root() || self.root.depth != 0 || self.root.state_id != ROOT {
            return Err("malformed root".into());
        }
        if self.root.input != self.root.output {
            return Err("root input and output differ".into());
        }
        if self.root.evaluation.is_some() {
            return Err("root carries an evaluation".into());
        }
        if self.transitions.len() != self.states.len() {
            return Err(format!(
                "{} transitions for {} states",
                self.transitions.len(),
                self.states.len()
            ));
        }
        let mut uf = UnionFind::new(self.states.len() + 1);
        for (i, s) in self.states.iter().enumerate() {
            let expected = i as StateId + 1;
            if s.state_id != expected {
                return Err(format!("state at index {i} has id {}", s.state_id));
            }
            let parent_id = s
                .parent_id
                .ok_or_else(|| format!("state {} has no parent", s.state_id))?;
            if parent_id >= s.state_id {
                return Err(format!("state {} has later parent {parent_id}", s.state_id));
            }
            let parent = self.state(parent_id).expect("parent precedes child");
            if s.depth != parent.depth + 1 {
                return Err(format!("state {} depth {} under depth {}", s.state_id, s.depth, parent.depth));
            }
            if s.input != parent.output {
                return Err(format!("state {} input is not its parent's output", s.state_id));
            }
            if s.evaluation.is_none() {
                return Err(format!("state {} is unevaluated", s.state_id));
            }
            if !uf.union(parent_id as usize, s.state_id as usize) {
                return Err(format!("cycle through state {}", s.state_id));
            }
        }
        for l in &self.transitions {
            let to = self
                .state(l.to)
                .ok_or_else(|| format!("transition to unknown state {}", l.to))?;
            if to.parent_id != Some(l.from) {
                return Err(format!("transition {}->{} disagrees with parent", l.from, l.to));
            }
        }
        let root = uf.find(0);
        if (1..=self.states.len()).any(|i| uf.find(i) != root) {
            return Err("state unreachable from root".into());
        }
        Ok(())
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        self.parent[rb] = ra;
        true
    }
}

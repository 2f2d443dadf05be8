//! Versioned JSON document for a topology.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{fold, EventRecord};
use crate::topology::{InferenceTopology, ReferenceLink, State, TransitionLink};

pub const DOCUMENT_VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("unsupported document version {0:?}")]
    UnsupportedVersion(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Serialize)]
struct DocumentOut<'a> {
    version: &'static str,
    config_digest: &'a str,
    root: &'a State,
    states: &'a [State],
    transitions: &'a [TransitionLink],
    references: &'a [ReferenceLink],
    events: &'a [EventRecord],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DocumentIn {
    version: String,
    config_digest: String,
    root: State,
    states: Vec<State>,
    transitions: Vec<TransitionLink>,
    references: Vec<ReferenceLink>,
    #[serde(default)]
    events: Vec<EventRecord>,
}

/// Pretty-printed document bytes; deterministic for a given topology.
pub fn to_bytes(topology: &InferenceTopology) -> Vec<u8> {
    let doc = DocumentOut {
        version: DOCUMENT_VERSION,
        config_digest: &topology.config_digest,
        root: &topology.root,
        states: &topology.states,
        transitions: &topology.transitions,
        references: &topology.references,
        events: &topology.events,
    };
    let mut out = serde_json::to_vec_pretty(&doc).expect("document serializes");
    out.push(b'\n');
    out
}

pub fn to_string(topology: &InferenceTopology) -> String {
    String::from_utf8(to_bytes(topology)).expect("json is utf-8")
}

/// Parses and checks a document: structure, tree laws, reference links, and
/// agreement with the embedded event log when one is present.
pub fn from_slice(bytes: &[u8]) -> Result<InferenceTopology, DocumentError> {
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    let doc: DocumentIn = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        DocumentError::SchemaViolation {
            path,
            message: e.into_inner().to_string(),
        }
    })?;
    if doc.version != DOCUMENT_VERSION {
        return Err(DocumentError::UnsupportedVersion(doc.version));
    }
    let topology = InferenceTopology::from_parts(
        doc.config_digest,
        doc.root,
        doc.states,
        doc.transitions,
        doc.references,
        doc.events,
    );
    topology.check_tree().map_err(DocumentError::Invariant)?;
    for (i, r) in topology.references.iter().enumerate() {
        if !topology.contains(r.at) || !topology.contains(r.reference) || r.at == r.reference {
            return Err(DocumentError::Invariant(format!("references[{i}] links unknown states")));
        }
        if r.similarity > 100 {
            return Err(DocumentError::Invariant(format!("references[{i}].similarity above 100")));
        }
    }
    if !topology.events.is_empty() {
        let folded = fold(&topology.events).map_err(|e| DocumentError::Invariant(e.to_string()))?;
        if folded.states != topology.states
            || folded.root != topology.root
            || folded.references != topology.references
        {
            return Err(DocumentError::Invariant("event log disagrees with states".into()));
        }
    }
    Ok(topology)
}

pub fn from_str(text: &str) -> Result<InferenceTopology, DocumentError> {
    from_slice(text.as_bytes())
}

pub fn write(topology: &InferenceTopology, path: &std::path::Path) -> Result<(), DocumentError> {
    std::fs::write(path, to_bytes(topology))?;
    Ok(())
}

pub fn read(path: &std::path::Path) -> Result<InferenceTopology, DocumentError> {
    from_slice(&std::fs::read(path)?)
}

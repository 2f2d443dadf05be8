//! Structured search for multi-instruction image editing.
//!
//! An instructor (checklist evaluator plus thought generator) and an actor
//! (an image editor) interact round by round. Each round is a state in an
//! append-only tree; the scheduler expands it depth-first, backtracks when a
//! state fails its stay conditions, and returns the best states found.
//! Backends are ports, with HTTP implementations in [`gateway`] and a
//! deterministic simulation in [`sim`].

pub mod config;
pub mod controls;
pub mod document;
pub mod evaluator;
pub mod events;
pub mod gateway;
pub mod generator;
pub mod harness;
pub mod image;
pub mod perceptual;
pub mod ports;
pub mod retriever;
pub mod scheduler;
pub mod sim;
pub mod templates;
pub mod topology;

//! Runtime tool-call enforcement for LLM agents.
//!
//! Benign telemetry is compiled into a parameterized automaton whose edges
//! carry parameter guards. A gateway then checks every proposed tool call
//! against the automaton and blocks anything outside it.

pub mod embedding;
pub mod guards;
pub mod fastpath;
pub mod trace;
pub mod profiler;
pub mod store;
pub mod audit;
pub mod gateway;
pub mod updates;
pub mod harness;

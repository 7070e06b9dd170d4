//! Interpreters for a family of dynamic information-flow-control calculi
//! built around a floating current label: flow-insensitive and
//! flow-sensitive references, explicit and automatic label upgrades,
//! scoped stores, a deterministic concurrent runtime, a translation of
//! flow-sensitive programs into the flow-insensitive core, reference
//! monitors for the no-sensitive-upgrade and permissive-upgrade
//! disciplines, and a property-testing harness for non-interference.

pub mod concurrent;
pub mod embedding;
pub mod harness;
pub mod lattice;
pub mod machine;
pub mod parser;
pub mod policies;
pub mod pretty;
pub mod term;
pub mod types;

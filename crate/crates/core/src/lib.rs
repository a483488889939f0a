//! Plan-first orchestration engine.
//!
//! A conversation is condensed into a formal task, capabilities are
//! classified for relevance, a complete execution plan is generated and
//! validated before anything runs, and the plan is executed step by step
//! with durable checkpoints, typed error recovery and human approval gates.

pub mod approval;
pub mod artifacts;
pub mod canonical;
pub mod clock;
pub mod context;
pub mod corpus;
pub mod engine;
pub mod executor;
pub mod extraction;
pub mod gateway;
pub mod planner;
pub mod provider;
pub mod registry;
pub mod schema;
pub mod script;

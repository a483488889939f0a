//! HTTP service and command-line front end for the planfirst engine.

pub mod api;
pub mod app;
pub mod cli;

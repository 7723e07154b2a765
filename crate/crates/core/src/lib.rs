//! Declarative XML message processing.
pub mod clock;
pub mod config;
pub mod engine;
pub mod expr;
pub mod lang;
pub mod scheduler;
pub mod store;
pub mod sysprops;
pub mod system;
pub mod xml;

//! Core of the AERO data-flow service: registry, triggers, execution and storage.

pub mod auth;
pub mod checksum;
pub mod collection;
pub mod error;
pub mod executor;
pub mod fetch;
pub mod flow;
pub mod ids;
pub mod model;
pub mod notify;
pub mod registry;
pub mod search;
pub mod service;
pub mod trigger;

pub use error::{AeroError, ErrorClass, Result};
pub use service::{Aero, ServiceConfig};

//! Client library, bundled functions and benchmark harness behind the `aero` binary.

pub mod bench;
pub mod client;
pub mod copyfn;

pub use client::{ApiClient, ClientError};

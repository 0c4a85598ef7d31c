//! Files, batch runs, command line and live sessions on top of
//! [`diffgame_core`].
//!
//! - [`formats`]: history and frame CSV, probe-set and prediction JSON,
//!   selection traces.
//! - [`config`] and [`harness`]: one JSON file drives a simulate, predict,
//!   select and estimate sweep.
//! - [`service`] and [`http`]: sessions stepped by a client, served over HTTP
//!   with a server-sent event stream.

pub use diffgame_core as core;

pub mod config;
pub mod error;
pub mod formats;
pub mod harness;
pub mod http;
pub mod service;

pub use error::{Error, Result};

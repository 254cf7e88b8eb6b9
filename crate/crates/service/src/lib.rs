//! Session service and `/v1` HTTP API for personalized Parsons-puzzle practice.
//!
//! [`ScaffoldService`] owns the problem bank, the sessions and the event
//! log and is usable directly as a library (the simulator does this).
//! [`http::router`] exposes it over HTTP.

pub mod clock;
pub mod config;
pub mod http;
pub mod service;

pub use clock::{Clock, SystemClock, VirtualClock};
pub use config::{ConfigError, ProviderChoice, ServiceConfig};
pub use service::{
    HelpPayload, IngestReport, NewSession, ScaffoldService, ServiceError, ServiceParts, ServiceSettings,
    SessionSnapshot, SessionTicket, TokenMode,
};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/service.md")]
mod book_service {}

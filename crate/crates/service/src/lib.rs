//! HTTP review service: ingest query observations, serve ranked candidates and
//! record reviewer decisions that grow the gallery.

pub mod api;
pub mod error;
pub mod journal;
pub mod state;
pub mod thumbnail;

pub use api::{router, serve, AppState, ServiceConfig, SharedState};
pub use error::ServiceError;
pub use state::ServiceState;

//! Remote inference: a framed TCP protocol, a multi-session server with one
//! shared execution queue, a chunking client engine, and a server-side cache
//! of encoded representations.
//!
//! The server binds plain TCP. Reaching it across networks (SSH tunnels,
//! jump hosts) is left to external tooling.

pub mod frame;
mod remote;
pub mod repr_cache;
mod server;

pub use remote::{probe, RemoteConfig, RemoteEngine, RemoteError};
pub use repr_cache::{DualEncoder, DualEncoderBackend, HashEncoder, Modality, ReprCache};
pub use server::{serve, ServeError, ServerConfig, ServerHandle};

//! Per-client boot tracking.
//!
//! DHCP, TFTP and image events are correlated by MAC address into one
//! [`BootSession`] per boot attempt, which walks
//! Discovering → Offered → Requested → Acked → LoadingBootloader →
//! LoadingKernel → LoadingInitrd → FetchingImage → Booted, or drops to
//! Failed on an out-of-order event. Booted is recorded when the image
//! transfer completes, the last step the server can observe.

mod funnel;
mod session;
mod tracker;

pub use funnel::{read_event_log, spawn_tracker, TrackerHandle};
pub use session::{BootEvent, BootOutcome, BootSession, BootState, EventKind, FailureReason, Transition};
pub use tracker::{BootReport, BootTracker, SessionRow};

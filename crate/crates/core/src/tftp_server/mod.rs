//! Read-only TFTP server with blksize/tsize/timeout negotiation.
//!
//! Each accepted RRQ is served from its own ephemeral port and reads from
//! the snapshot its client was pinned to at DHCP time.

pub mod service;
mod session;

pub use service::{TftpStats, TransferOutcome};
pub use session::{
    resolve, AckError, AckOutcome, AssetSession, BlockSource, RrqError, TftpPolicy, TimeoutAction,
    TransferSession,
};

pub const SERVER_PORT: u16 = 69;

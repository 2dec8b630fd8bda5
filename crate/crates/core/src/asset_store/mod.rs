//! Versioned, content-addressed store of boot assets.

use std::path::PathBuf;

mod manifest;
mod remote;
mod store;
mod sync;

pub use manifest::{
    normalize_virtual_path, AssetEntry, AssetManifest, AssetRole, Digest, DigestWriter,
};
pub use remote::{
    open_remote, publish_directory, ByteStream, DirRemote, HttpRemote, PublishedAsset,
    RemoteError, RemoteSource,
};
pub use store::{
    verify, AssetCheck, AssetReader, AssetStatus, AssetStore, GcReport, Snapshot, StoreLock,
    VerificationReport,
};
pub use sync::{missing_digests, sync_once, SyncError, SyncReport};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed manifest: {0}")]
    ManifestMalformed(String),
    #[error("invalid digest field {0:?}")]
    DigestFieldInvalid(String),
    #[error("no asset store at {}", .0.display())]
    NotInitialized(PathBuf),
    #[error("store has no active version")]
    NoActiveVersion,
    #[error("no manifest for version {0}")]
    UnknownVersion(u64),
    #[error("no asset {0:?} in this version")]
    UnknownPath(String),
    #[error("read of {len} bytes at {offset} is outside {path:?} ({size} bytes)")]
    OutOfBounds { path: String, offset: u64, len: u64, size: u64 },
    #[error("another writer holds {}", .0.display())]
    SyncInProgress(PathBuf),
    #[error("version {candidate} does not follow active version {active}")]
    VersionNotIncreasing { active: u64, candidate: u64 },
}

use std::collections::HashSet;

use futures::StreamExt;
use serde::Serialize;
use tracing::{debug, info, warn};

use super::manifest::{AssetManifest, Digest};
use super::remote::{RemoteError, RemoteSource};
use super::store::{verify, AssetStore};
use super::StoreError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SyncReport {
    pub remote_version: u64,
    /// Blobs downloaded (distinct digests).
    pub fetched: usize,
    pub bytes: u64,
    /// Set when this sync activated a new version.
    pub new_version: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum SyncError {
    #[error(transparent)]
    RemoteUnreachable(RemoteError),
    #[error("remote manifest rejected: {0}")]
    RemoteManifest(StoreError),
    #[error("verification failed for {path}: {reason}; active version unchanged")]
    VerificationFailed { path: String, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Mirrors the remote's manifest into `store` once.
///
/// Only blobs whose digest is absent locally are downloaded. Every blob is
/// hashed while it streams in and the complete version is re-verified
/// before `ACTIVE` moves; any failure leaves the previous version live.
pub async fn sync_once(remote: &dyn RemoteSource, store: &AssetStore) -> Result<SyncReport, SyncError> {
    let raw = remote.fetch_manifest().await.map_err(SyncError::RemoteUnreachable)?;
    let manifest = AssetManifest::from_json(&raw).map_err(SyncError::RemoteManifest)?;

    let lock = store.lock()?;
    let active = store.active_version()?;
    let mut report = SyncReport {
        remote_version: manifest.version,
        fetched: 0,
        bytes: 0,
        new_version: None,
    };
    if active.is_some_and(|a| manifest.version <= a) {
        debug!(remote = manifest.version, ?active, "store up to date");
        return Ok(report);
    }

    let mut seen = HashSet::new();
    for entry in &manifest.assets {
        if !seen.insert(entry.digest) || store.has_object(&entry.digest) {
            continue;
        }
        let mut staged = store.stage(&lock)?;
        let mut stream = match remote.fetch_object(&entry.digest).await {
            Ok(s) => s,
            Err(RemoteError::MissingObject(d)) => {
                return Err(SyncError::VerificationFailed {
                    path: entry.path.clone(),
                    reason: format!("remote is missing object {d}"),
                })
            }
            Err(e) => return Err(SyncError::RemoteUnreachable(e)),
        };
        while let Some(chunk) = stream.next().await {
            let chunk = chunk.map_err(SyncError::RemoteUnreachable)?;
            store.write_staged(&mut staged, &chunk)?;
            if staged.digest_so_far().1 > entry.size {
                return Err(SyncError::VerificationFailed {
                    path: entry.path.clone(),
                    reason: format!("more than the declared {} bytes", entry.size),
                });
            }
        }
        let (digest, len) = staged.digest_so_far();
        if len != entry.size {
            return Err(SyncError::VerificationFailed {
                path: entry.path.clone(),
                reason: format!("received {len} bytes, manifest declares {}", entry.size),
            });
        }
        if digest != entry.digest {
            return Err(SyncError::VerificationFailed {
                path: entry.path.clone(),
                reason: format!("digest {} does not match manifest", digest.to_hex()),
            });
        }
        store.commit_staged(staged, &digest)?;
        report.fetched += 1;
        report.bytes += len;
    }

    let objects = store.root().join("objects");
    let check = manifest.clone();
    let verification = tokio::task::spawn_blocking(move || verify(&check, &objects))
        .await
        .expect("verification task panicked");
    if let Some(bad) = verification.failures().next() {
        warn!(path = %bad.path, "local blob failed verification; not activating");
        return Err(SyncError::VerificationFailed {
            path: bad.path.clone(),
            reason: format!("{:?}", bad.status),
        });
    }

    store.write_manifest(&lock, &manifest)?;
    store.activate(&lock, manifest.version)?;
    info!(version = manifest.version, fetched = report.fetched, bytes = report.bytes, "activated");
    report.new_version = Some(manifest.version);
    Ok(report)
}

/// Digests referenced by `manifest` that `store` does not hold yet.
pub fn missing_digests(manifest: &AssetManifest, store: &AssetStore) -> Vec<Digest> {
    let mut seen = HashSet::new();
    manifest
        .assets
        .iter()
        .filter(|e| seen.insert(e.digest) && !store.has_object(&e.digest))
        .map(|e| e.digest)
        .collect()
}

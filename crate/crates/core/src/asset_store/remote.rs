//! Remote sources a store can mirror.
//!
//! Both backends expose the same layout: a `manifest.json` at the top and
//! blobs under `objects/<sha256-hex>`. A directory tree is used for tests
//! and air-gapped setups; the HTTP backend reads the same tree from any
//! static file server.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use async_trait::async_trait;
use bytes::Bytes;
use chrono::{DateTime, Utc};
use futures::stream::{BoxStream, StreamExt, TryStreamExt};
use tokio_util::io::ReaderStream;

use super::manifest::{AssetEntry, AssetManifest, AssetRole, Digest};
use super::store::io_err;
use super::StoreError;

pub type ByteStream = BoxStream<'static, Result<Bytes, RemoteError>>;

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    #[error("remote unreachable: {0}")]
    Unreachable(String),
    #[error("remote has no object {0}")]
    MissingObject(String),
    #[error("transfer interrupted: {0}")]
    Interrupted(String),
}

#[async_trait]
pub trait RemoteSource: Send + Sync {
    fn describe(&self) -> String;

    async fn fetch_manifest(&self) -> Result<Vec<u8>, RemoteError>;

    async fn fetch_object(&self, digest: &Digest) -> Result<ByteStream, RemoteError>;
}

/// Picks a backend from a location string: `http://` and `https://` URLs
/// use HTTP, anything else (optionally `file://`) is a directory.
pub fn open_remote(location: &str) -> Box<dyn RemoteSource> {
    if location.starts_with("http://") || location.starts_with("https://") {
        Box::new(HttpRemote::new(location))
    } else {
        let path = location.strip_prefix("file://").unwrap_or(location);
        Box::new(DirRemote::new(path))
    }
}

#[derive(Debug, Clone)]
pub struct DirRemote {
    root: PathBuf,
}

impl DirRemote {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirRemote { root: root.into() }
    }
}

#[async_trait]
impl RemoteSource for DirRemote {
    fn describe(&self) -> String {
        self.root.display().to_string()
    }

    async fn fetch_manifest(&self) -> Result<Vec<u8>, RemoteError> {
        let path = self.root.join("manifest.json");
        tokio::fs::read(&path)
            .await
            .map_err(|e| RemoteError::Unreachable(format!("{}: {e}", path.display())))
    }

    async fn fetch_object(&self, digest: &Digest) -> Result<ByteStream, RemoteError> {
        let path = self.root.join("objects").join(digest.to_hex());
        let file = tokio::fs::File::open(&path)
            .await
            .map_err(|_| RemoteError::MissingObject(digest.to_hex()))?;
        Ok(ReaderStream::with_capacity(file, 64 * 1024)
            .map_err(|e| RemoteError::Interrupted(e.to_string()))
            .boxed())
    }
}

#[derive(Debug, Clone)]
pub struct HttpRemote {
    base: String,
    client: reqwest::Client,
}

impl HttpRemote {
    pub fn new(base: &str) -> Self {
        HttpRemote { base: base.trim_end_matches('/').to_string(), client: reqwest::Client::new() }
    }
}

#[async_trait]
impl RemoteSource for HttpRemote {
    fn describe(&self) -> String {
        self.base.clone()
    }

    async fn fetch_manifest(&self) -> Result<Vec<u8>, RemoteError> {
        let url = format!("{}/manifest.json", self.base);
        let resp = self
            .client
            .get(&url)
            .send()
            .await
            .and_then(|r| r.error_for_status())
            .map_err(|e| RemoteError::Unreachable(format!("{url}: {e}")))?;
        let body = resp.bytes().await.map_err(|e| RemoteError::Unreachable(format!("{url}: {e}")))?;
        Ok(body.to_vec())
    }

    async fn fetch_object(&self, digest: &Digest) -> Result<ByteStream, RemoteError> {
        let url = format!("{}/objects/{}", self.base, digest.to_hex());
        let resp = self
            .client
            .get(&url)
            .send()
            .await
            .map_err(|e| RemoteError::Unreachable(format!("{url}: {e}")))?;
        if resp.status() == reqwest::StatusCode::NOT_FOUND {
            return Err(RemoteError::MissingObject(digest.to_hex()));
        }
        let resp = resp
            .error_for_status()
            .map_err(|e| RemoteError::Unreachable(format!("{url}: {e}")))?;
        Ok(resp
            .bytes_stream()
            .map_err(|e| RemoteError::Interrupted(e.to_string()))
            .boxed())
    }
}

/// One file to publish into a remote tree.
#[derive(Debug, Clone)]
pub struct PublishedAsset {
    pub path: String,
    pub role: AssetRole,
    pub bytes: Bytes,
}

/// Writes a remote tree for `assets` at `version` under `dir`, replacing
/// `manifest.json` last so a concurrent reader sees a complete version.
pub fn publish_directory(
    dir: &Path,
    version: u64,
    created_at: DateTime<Utc>,
    assets: &[PublishedAsset],
) -> Result<AssetManifest, StoreError> {
    let objects = dir.join("objects");
    fs::create_dir_all(&objects).map_err(io_err(&objects))?;
    let mut entries = Vec::with_capacity(assets.len());
    for asset in assets {
        let digest = Digest::of(&asset.bytes);
        let blob = objects.join(digest.to_hex());
        if !blob.exists() {
            fs::write(&blob, &asset.bytes).map_err(io_err(&blob))?;
        }
        entries.push(AssetEntry {
            path: asset.path.clone(),
            size: asset.bytes.len() as u64,
            digest,
            role: asset.role,
        });
    }
    let manifest = AssetManifest::new(version, created_at, entries)?;
    let tmp = dir.join("manifest.json.tmp");
    let dest = dir.join("manifest.json");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(&manifest.to_json()).map_err(io_err(&tmp))?;
    drop(f);
    fs::rename(&tmp, &dest).map_err(io_err(&dest))?;
    Ok(manifest)
}

use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use thiserror::Error;

use super::{synthetic_assets, AssetSizes, Endpoints, IMAGE_PATH};
use crate::asset_store::{publish_directory, sync_once, AssetManifest, AssetStore, DirRemote, StoreError, SyncError};
use crate::boot_session::BootReport;
use crate::clock::MonotonicClock;
use crate::config::{ConfigError, ServerConfig};
use crate::server::{self, Listeners, RunningServer, ServeError};

#[derive(Debug, Error)]
pub enum LabError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Sync(#[from] SyncError),
}

#[derive(Debug, Clone)]
pub struct LabOptions {
    pub sizes: AssetSizes,
    pub asset_seed: u64,
    pub pool_size: u32,
    pub tftp_timeout: Duration,
    pub tftp_retries: u32,
    pub event_log: bool,
}

impl Default for LabOptions {
    fn default() -> Self {
        LabOptions {
            sizes: AssetSizes::default(),
            asset_seed: 1,
            pool_size: 64,
            tftp_timeout: Duration::from_secs(1),
            tftp_retries: 5,
            event_log: false,
        }
    }
}

/// A complete server on loopback ephemeral ports, fed with synthetic
/// assets from a directory remote.
pub struct Lab {
    pub endpoints: Endpoints,
    pub server: RunningServer,
    pub store: Arc<AssetStore>,
    pub config: ServerConfig,
    pub remote: PathBuf,
    pub image_url: String,
    pub options: LabOptions,
}

const POOL_START: Ipv4Addr = Ipv4Addr::new(10, 77, 0, 10);

impl Lab {
    /// Builds everything under `root`, publishes version 1 and starts
    /// the services.
    pub async fn start(root: &Path, options: LabOptions) -> Result<Lab, LabError> {
        let pool_end = Ipv4Addr::from(u32::from(POOL_START) + options.pool_size.max(1) - 1);
        let text = format!(
            r#"
bind_address = "127.0.0.1"
dhcp_bind_address = "127.0.0.1"
dhcp_port = 0
tftp_port = 0
image_port = 0
pool_start = "{POOL_START}"
pool_end = "{pool_end}"
subnet_mask = "255.255.0.0"
bootfile_bios = "{}"
bootfile_uefi = "{}"
tftp_timeout_ms = {}
tftp_retries = {}
store_root = "store"
{}
"#,
            super::BIOS_BOOTFILE,
            super::UEFI_BOOTFILE,
            options.tftp_timeout.as_millis().max(1),
            options.tftp_retries,
            if options.event_log { "event_log = \"events.jsonl\"" } else { "" },
        );
        let config = ServerConfig::from_parts(&text, std::iter::empty(), root)?;
        let store = Arc::new(AssetStore::init(&config.store_root)?);
        let listeners = Listeners::bind(&config).await?;
        let addrs = listeners.addrs().map_err(|source| ServeError::Bind { addr: (config.dhcp_bind_address, 0).into(), source })?;
        let image_url = config.image_url(addrs.http.port()).replace("{path}", IMAGE_PATH);

        let remote = root.join("remote");
        publish_version(&remote, &store, 1, options.sizes, options.asset_seed, &image_url).await?;
        let server = server::start(&config, listeners, store.clone(), MonotonicClock::shared())?;
        Ok(Lab {
            endpoints: Endpoints { dhcp: addrs.dhcp, tftp_port: addrs.tftp.port() },
            server,
            store,
            config,
            remote,
            image_url,
            options,
        })
    }

    /// Publishes and activates a new version generated from `seed`.
    pub async fn publish(&self, version: u64, seed: u64) -> Result<AssetManifest, LabError> {
        publish_version(&self.remote, &self.store, version, self.options.sizes, seed, &self.image_url).await
    }

    pub async fn shutdown(self) -> BootReport {
        self.server.shutdown().await
    }
}

async fn publish_version(
    remote: &Path,
    store: &AssetStore,
    version: u64,
    sizes: AssetSizes,
    seed: u64,
    image_url: &str,
) -> Result<AssetManifest, LabError> {
    let (dir, url) = (remote.to_path_buf(), image_url.to_string());
    let manifest = tokio::task::spawn_blocking(move || {
        let assets = synthetic_assets(sizes, seed, &url);
        publish_directory(&dir, version, Utc::now(), &assets)
    })
    .await
    .map_err(|e| StoreError::Io { path: remote.to_path_buf(), source: std::io::Error::other(e) })??;
    sync_once(&DirRemote::new(remote), store).await?;
    Ok(manifest)
}

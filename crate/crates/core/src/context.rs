use std::sync::Arc;

use tracing::warn;

use crate::asset_store::{AssetStore, Snapshot};
use crate::boot_session::TrackerHandle;
use crate::pins::ClientRegistry;

/// State shared by the DHCP, TFTP and HTTP services.
#[derive(Debug, Clone)]
pub struct ServiceContext {
    pub store: Arc<AssetStore>,
    pub registry: Arc<ClientRegistry>,
    pub tracker: TrackerHandle,
}

impl ServiceContext {
    pub fn new(store: Arc<AssetStore>, tracker: TrackerHandle) -> Self {
        ServiceContext { store, registry: Arc::new(ClientRegistry::new()), tracker }
    }

    /// Snapshot of the active version, or None if nothing is active yet.
    pub fn active_snapshot(&self) -> Option<Snapshot> {
        match self.store.open_snapshot() {
            Ok(s) => Some(s),
            Err(e) => {
                warn!(error = %e, "no active asset version");
                None
            }
        }
    }
}

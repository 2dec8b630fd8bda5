//! Which manifest version each booting client is pinned to.
//!
//! A client is pinned when its DHCP ACK goes out and stays pinned until it
//! starts a new boot with a fresh DISCOVER. TFTP and HTTP requests carry no
//! MAC, so the registry also indexes clients by the addresses they use: the
//! leased IP and, when it differs, the source address their DHCP traffic
//! arrived from.

use std::collections::HashMap;
use std::net::{IpAddr, Ipv4Addr};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use tokio::sync::Notify;
use tokio::time::{timeout_at, Instant};

use crate::asset_store::Snapshot;
use crate::netproto::MacAddr;

#[derive(Debug)]
pub struct ClientBinding {
    pub mac: MacAddr,
    pub leased_ip: Option<Ipv4Addr>,
    pub snapshot: Snapshot,
    image_bytes: AtomicU64,
    image_started: AtomicBool,
    image_completed: AtomicBool,
    transfers: AtomicU32,
    transfer_done: Notify,
}

impl ClientBinding {
    fn new(mac: MacAddr, leased_ip: Option<Ipv4Addr>, snapshot: Snapshot) -> Self {
        ClientBinding {
            mac,
            leased_ip,
            snapshot,
            image_bytes: AtomicU64::new(0),
            image_started: AtomicBool::new(false),
            image_completed: AtomicBool::new(false),
            transfers: AtomicU32::new(0),
            transfer_done: Notify::new(),
        }
    }

    /// True the first time it is called for this binding.
    pub fn mark_image_started(&self) -> bool {
        !self.image_started.swap(true, Ordering::SeqCst)
    }

    /// Adds streamed image bytes, returning the new total.
    pub fn add_image_bytes(&self, n: u64) -> u64 {
        self.image_bytes.fetch_add(n, Ordering::SeqCst) + n
    }

    /// True the first time it is called for this binding.
    pub fn mark_image_completed(&self) -> bool {
        !self.image_completed.swap(true, Ordering::SeqCst)
    }

    pub fn transfer_started(&self) {
        self.transfers.fetch_add(1, Ordering::SeqCst);
    }

    pub fn transfer_finished(&self) {
        self.transfers.fetch_sub(1, Ordering::SeqCst);
        self.transfer_done.notify_waiters();
    }

    /// Waits, at most `limit`, until none of this client's transfers are
    /// running. A client's final ACK and its next request can reach the
    /// server in either order; waiting here keeps its events in protocol
    /// order. Returns false on timeout.
    pub async fn wait_transfers_idle(&self, limit: Duration) -> bool {
        let deadline = Instant::now() + limit;
        loop {
            let notified = self.transfer_done.notified();
            if self.transfers.load(Ordering::SeqCst) == 0 {
                return true;
            }
            if timeout_at(deadline, notified).await.is_err() {
                return false;
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct ClientRegistry {
    inner: Mutex<Inner>,
}

#[derive(Debug, Default)]
struct Inner {
    by_mac: HashMap<MacAddr, Arc<ClientBinding>>,
    by_addr: HashMap<IpAddr, MacAddr>,
}

impl Inner {
    fn remove(&mut self, mac: &MacAddr) {
        if self.by_mac.remove(mac).is_some() {
            self.by_addr.retain(|_, m| m != mac);
        }
    }
}

impl ClientRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Forgets a client's pin; its next ACK pins it afresh.
    pub fn release(&self, mac: &MacAddr) {
        self.inner.lock().unwrap().remove(mac);
    }

    /// Pins `mac` to `snapshot` unless it is already pinned for the same
    /// lease, in which case the existing binding is kept.
    pub fn bind(
        &self,
        mac: MacAddr,
        leased_ip: Ipv4Addr,
        observed: Option<IpAddr>,
        snapshot: impl FnOnce() -> Option<Snapshot>,
    ) -> Option<Arc<ClientBinding>> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(existing) = inner.by_mac.get(&mac) {
            if existing.leased_ip == Some(leased_ip) {
                let existing = existing.clone();
                if let Some(addr) = observed {
                    inner.by_addr.insert(addr, mac);
                }
                return Some(existing);
            }
        }
        let snapshot = snapshot()?;
        inner.remove(&mac);
        let binding = Arc::new(ClientBinding::new(mac, Some(leased_ip), snapshot));
        inner.by_mac.insert(mac, binding.clone());
        inner.by_addr.insert(IpAddr::V4(leased_ip), mac);
        if let Some(addr) = observed {
            inner.by_addr.insert(addr, mac);
        }
        Some(binding)
    }

    /// The binding for `mac`, creating an address-less one from `snapshot`
    /// if there is none.
    pub fn get_or_pin(
        &self,
        mac: MacAddr,
        snapshot: impl FnOnce() -> Option<Snapshot>,
    ) -> Option<Arc<ClientBinding>> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(existing) = inner.by_mac.get(&mac) {
            return Some(existing.clone());
        }
        let binding = Arc::new(ClientBinding::new(mac, None, snapshot()?));
        inner.by_mac.insert(mac, binding.clone());
        Some(binding)
    }

    pub fn by_mac(&self, mac: &MacAddr) -> Option<Arc<ClientBinding>> {
        self.inner.lock().unwrap().by_mac.get(mac).cloned()
    }

    pub fn by_addr(&self, addr: IpAddr) -> Option<Arc<ClientBinding>> {
        let inner = self.inner.lock().unwrap();
        let mac = inner.by_addr.get(&addr)?;
        inner.by_mac.get(mac).cloned()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().by_mac.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

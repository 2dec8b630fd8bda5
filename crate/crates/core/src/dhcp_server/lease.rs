use std::collections::{BTreeMap, HashMap};
use std::net::Ipv4Addr;
use std::time::Duration;

use serde::Serialize;

use crate::netproto::MacAddr;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Lease {
    pub mac: MacAddr,
    pub ip: Ipv4Addr,
    pub subnet_mask: Ipv4Addr,
    pub router: Ipv4Addr,
    pub dns: Vec<Ipv4Addr>,
    #[serde(skip)]
    pub issued: Duration,
    #[serde(skip)]
    pub expiry: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum BindingState {
    /// Reserved for the client until `until`, awaiting its REQUEST.
    Offered { until: Duration },
    Active(Lease),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Binding {
    pub mac: MacAddr,
    pub ip: Ipv4Addr,
    /// Chosen at OFFER time and reused verbatim in the ACK.
    pub bootfile: String,
    pub state: BindingState,
}

/// Inclusive IPv4 address range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ipv4Range {
    pub start: Ipv4Addr,
    pub end: Ipv4Addr,
}

impl Ipv4Range {
    pub fn new(start: Ipv4Addr, end: Ipv4Addr) -> Option<Self> {
        (u32::from(start) <= u32::from(end)).then_some(Ipv4Range { start, end })
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        (u32::from(self.start)..=u32::from(self.end)).contains(&u32::from(ip))
    }

    pub fn len(&self) -> u64 {
        u64::from(u32::from(self.end) - u32::from(self.start)) + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn iter(&self) -> impl Iterator<Item = Ipv4Addr> {
        (u32::from(self.start)..=u32::from(self.end)).map(Ipv4Addr::from)
    }
}

/// Address bindings for one pool. Every ip maps to at most one MAC and
/// every MAC to at most one ip.
#[derive(Debug, Clone)]
pub struct LeaseTable {
    pool: Ipv4Range,
    by_ip: BTreeMap<Ipv4Addr, Binding>,
    by_mac: HashMap<MacAddr, Ipv4Addr>,
}

impl LeaseTable {
    pub fn new(pool: Ipv4Range) -> Self {
        LeaseTable { pool, by_ip: BTreeMap::new(), by_mac: HashMap::new() }
    }

    pub fn pool(&self) -> Ipv4Range {
        self.pool
    }

    pub fn free_count(&self) -> u64 {
        self.pool.len() - self.by_ip.len() as u64
    }

    pub fn active_leases(&self) -> impl Iterator<Item = &Lease> {
        self.by_ip.values().filter_map(|b| match &b.state {
            BindingState::Active(l) => Some(l),
            BindingState::Offered { .. } => None,
        })
    }

    pub fn lease_for(&self, mac: &MacAddr) -> Option<&Lease> {
        let ip = self.by_mac.get(mac)?;
        match &self.by_ip.get(ip)?.state {
            BindingState::Active(l) => Some(l),
            BindingState::Offered { .. } => None,
        }
    }

    pub(crate) fn binding(&self, mac: &MacAddr) -> Option<&Binding> {
        self.by_ip.get(self.by_mac.get(mac)?)
    }

    pub(crate) fn holder(&self, ip: Ipv4Addr) -> Option<MacAddr> {
        self.by_ip.get(&ip).map(|b| b.mac)
    }

    /// Picks an address for `mac`: its existing binding, else the requested
    /// address if free, else the lowest free address.
    pub(crate) fn choose(&self, mac: &MacAddr, requested: Option<Ipv4Addr>) -> Option<Ipv4Addr> {
        if let Some(ip) = self.by_mac.get(mac) {
            return Some(*ip);
        }
        if let Some(ip) = requested.filter(|ip| self.pool.contains(*ip) && !self.by_ip.contains_key(ip)) {
            return Some(ip);
        }
        self.pool.iter().find(|ip| !self.by_ip.contains_key(ip))
    }

    /// Reserves `ip` for `mac` until `until`, unless the MAC already holds an
    /// active lease on it.
    pub(crate) fn reserve(&mut self, mac: MacAddr, ip: Ipv4Addr, bootfile: String, until: Duration) {
        if let Some(existing) = self.by_ip.get_mut(&ip) {
            debug_assert_eq!(existing.mac, mac);
            existing.bootfile = bootfile;
            if let BindingState::Offered { until: u } = &mut existing.state {
                *u = until;
            }
            return;
        }
        self.remove_mac(&mac);
        self.by_ip.insert(ip, Binding { mac, ip, bootfile, state: BindingState::Offered { until } });
        self.by_mac.insert(mac, ip);
    }

    pub(crate) fn activate(&mut self, lease: Lease, bootfile: String) {
        let (mac, ip) = (lease.mac, lease.ip);
        if self.by_mac.get(&mac) != Some(&ip) {
            self.remove_mac(&mac);
        }
        self.by_ip.insert(ip, Binding { mac, ip, bootfile, state: BindingState::Active(lease) });
        self.by_mac.insert(mac, ip);
    }

    fn remove_mac(&mut self, mac: &MacAddr) -> Option<Binding> {
        let ip = self.by_mac.remove(mac)?;
        self.by_ip.remove(&ip)
    }

    /// Drops whatever `mac` holds. Returns true if it held anything.
    pub fn release(&mut self, mac: &MacAddr) -> bool {
        self.remove_mac(mac).is_some()
    }

    /// Reclaims every lease whose expiry is strictly before `now` and every
    /// offer whose hold has lapsed. Returns the number of leases reclaimed;
    /// lapsed offers are not counted.
    pub fn expire_leases(&mut self, now: Duration) -> usize {
        let mut reclaimed = 0;
        let by_mac = &mut self.by_mac;
        self.by_ip.retain(|_, b| {
            let keep = match &b.state {
                BindingState::Active(l) => {
                    let keep = l.expiry >= now;
                    if !keep {
                        reclaimed += 1;
                    }
                    keep
                }
                BindingState::Offered { until } => *until >= now,
            };
            if !keep {
                by_mac.remove(&b.mac);
            }
            keep
        });
        reclaimed
    }
}

//! PXE-aware DHCP server.
//!
//! [`DhcpServer`] holds the lease table and answers one message at a time;
//! [`service`] wraps it in a UDP loop. Offers and ACKs carry the boot
//! server in `siaddr`/option 66 and the bootfile in `file`/option 67.

mod lease;
pub mod service;

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::time::Duration;

use thiserror::Error;

pub use lease::{Ipv4Range, Lease, LeaseTable};
use lease::BindingState;

use crate::netproto::{
    is_pxe_client, opt, ArchClass, BootOp, DhcpMessage, MacAddr, MessageType, PXE_CLIENT_PREFIX,
};

pub const SERVER_PORT: u16 = 67;
pub const CLIENT_PORT: u16 = 68;
pub const DEFAULT_LEASE: Duration = Duration::from_secs(3600);
pub const OFFER_HOLD: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootConfig {
    pub next_server: Ipv4Addr,
    pub bootfile_by_arch: BTreeMap<ArchClass, String>,
    /// Passed to the booted initrd so it can find the OS image.
    pub image_url_template: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BootConfigError {
    #[error("no bootfile configured for {0:?}")]
    MissingBootfile(ArchClass),
}

impl BootConfig {
    pub fn new(
        next_server: Ipv4Addr,
        bootfile_by_arch: BTreeMap<ArchClass, String>,
        image_url_template: String,
    ) -> Result<Self, BootConfigError> {
        for class in [ArchClass::LegacyBios, ArchClass::UefiX64] {
            if bootfile_by_arch.get(&class).is_none_or(|f| f.is_empty()) {
                return Err(BootConfigError::MissingBootfile(class));
            }
        }
        Ok(BootConfig { next_server, bootfile_by_arch, image_url_template })
    }

    /// Bootfile for `class`; unmapped classes get the legacy BIOS one.
    pub fn bootfile_for(&self, class: ArchClass) -> &str {
        self.bootfile_by_arch
            .get(&class)
            .or_else(|| self.bootfile_by_arch.get(&ArchClass::LegacyBios))
            .map(String::as_str)
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DhcpSettings {
    /// Our address, sent as the server identifier.
    pub server_id: Ipv4Addr,
    pub pool: Ipv4Range,
    pub subnet_mask: Ipv4Addr,
    pub router: Ipv4Addr,
    pub dns: Vec<Ipv4Addr>,
    pub lease_time: Duration,
    pub offer_hold: Duration,
    /// Ignore clients that do not identify as PXEClient.
    pub pxe_only: bool,
    pub boot: BootConfig,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DhcpError {
    #[error("address pool exhausted")]
    PoolExhausted,
    #[error("client {0} is not a PXE client")]
    NotPxe(MacAddr),
    #[error("expected {expected:?}, got {got:?}")]
    WrongMessageType { expected: MessageType, got: Option<MessageType> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NakReason {
    /// The client asked for an address other than the one we hold for it.
    AddressMismatch,
    /// No offer and the requested address is not ours to give.
    UnknownClient,
    /// The requested address belongs to another client.
    AddressInUse,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestOutcome {
    Ack(DhcpMessage),
    Nak(DhcpMessage, NakReason),
    /// Addressed to another server; the client has moved on.
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Reply {
    Offer(DhcpMessage),
    Request(RequestOutcome),
    Released,
    None,
}

#[derive(Debug, Clone)]
pub struct DhcpServer {
    settings: DhcpSettings,
    table: LeaseTable,
}

impl DhcpServer {
    pub fn new(settings: DhcpSettings) -> Self {
        let table = LeaseTable::new(settings.pool);
        DhcpServer { settings, table }
    }

    pub fn settings(&self) -> &DhcpSettings {
        &self.settings
    }

    pub fn leases(&self) -> &LeaseTable {
        &self.table
    }

    fn check_pxe(&self, msg: &DhcpMessage) -> Result<(), DhcpError> {
        if self.settings.pxe_only && !is_pxe_client(msg) {
            return Err(DhcpError::NotPxe(msg.client_mac()));
        }
        Ok(())
    }

    fn expect(msg: &DhcpMessage, expected: MessageType) -> Result<(), DhcpError> {
        match msg.msg_type() {
            Some(t) if t == expected => Ok(()),
            got => Err(DhcpError::WrongMessageType { expected, got }),
        }
    }

    pub fn handle_discover(&mut self, msg: &DhcpMessage, now: Duration) -> Result<DhcpMessage, DhcpError> {
        Self::expect(msg, MessageType::Discover)?;
        self.check_pxe(msg)?;
        let mac = msg.client_mac();
        let ip = self
            .table
            .choose(&mac, msg.option_ipv4(opt::REQUESTED_IP))
            .ok_or(DhcpError::PoolExhausted)?;
        let class = msg.client_arch().map_or(ArchClass::LegacyBios, |a| a.class());
        let bootfile = self.settings.boot.bootfile_for(class).to_owned();
        self.table.reserve(mac, ip, bootfile.clone(), now + self.settings.offer_hold);
        Ok(self.reply(msg, MessageType::Offer, ip, &bootfile))
    }

    pub fn handle_request(&mut self, msg: &DhcpMessage, now: Duration) -> Result<RequestOutcome, DhcpError> {
        Self::expect(msg, MessageType::Request)?;
        self.check_pxe(msg)?;
        let mac = msg.client_mac();
        let server_id = msg.option_ipv4(opt::SERVER_ID);
        if server_id.is_some_and(|id| id != self.settings.server_id) {
            // Selected another server's offer; drop ours.
            if matches!(self.table.binding(&mac), Some(b) if matches!(b.state, BindingState::Offered { .. })) {
                self.table.release(&mac);
            }
            return Ok(RequestOutcome::Ignored);
        }
        let requested = msg
            .option_ipv4(opt::REQUESTED_IP)
            .or_else(|| (!msg.ciaddr.is_unspecified()).then_some(msg.ciaddr));

        let (ip, bootfile) = match (self.table.binding(&mac), requested) {
            (Some(b), Some(req)) if b.ip == req => (b.ip, b.bootfile.clone()),
            (Some(b), None) => (b.ip, b.bootfile.clone()),
            (Some(_), Some(_)) => return Ok(self.nak(msg, NakReason::AddressMismatch)),
            (None, Some(req)) if self.settings.pool.contains(req) => {
                if self.table.holder(req).is_some() {
                    return Ok(self.nak(msg, NakReason::AddressInUse));
                }
                // A client rebooting with an address it remembers.
                let class = msg.client_arch().map_or(ArchClass::LegacyBios, |a| a.class());
                (req, self.settings.boot.bootfile_for(class).to_owned())
            }
            (None, _) => return Ok(self.nak(msg, NakReason::UnknownClient)),
        };

        let s = &self.settings;
        let lease = Lease {
            mac,
            ip,
            subnet_mask: s.subnet_mask,
            router: s.router,
            dns: s.dns.clone(),
            issued: now,
            expiry: now + s.lease_time,
        };
        self.table.activate(lease, bootfile.clone());
        Ok(RequestOutcome::Ack(self.reply(msg, MessageType::Ack, ip, &bootfile)))
    }

    /// RELEASE frees the client's address immediately.
    pub fn handle_release(&mut self, msg: &DhcpMessage) -> bool {
        if msg.option_ipv4(opt::SERVER_ID).is_some_and(|id| id != self.settings.server_id) {
            return false;
        }
        self.table.release(&msg.client_mac())
    }

    pub fn expire_leases(&mut self, now: Duration) -> usize {
        self.table.expire_leases(now)
    }

    /// Dispatches on message type. Client-to-server types we do not serve
    /// yield [`Reply::None`].
    pub fn handle(&mut self, msg: &DhcpMessage, now: Duration) -> Result<Reply, DhcpError> {
        if msg.op != BootOp::Request {
            return Ok(Reply::None);
        }
        match msg.msg_type() {
            Some(MessageType::Discover) => self.handle_discover(msg, now).map(Reply::Offer),
            Some(MessageType::Request) => self.handle_request(msg, now).map(Reply::Request),
            Some(MessageType::Release) => {
                self.handle_release(msg);
                Ok(Reply::Released)
            }
            _ => Ok(Reply::None),
        }
    }

    fn base_reply(&self, req: &DhcpMessage, ty: MessageType) -> DhcpMessage {
        let mut m = DhcpMessage::new(BootOp::Reply, req.xid, req.client_mac());
        m.htype = req.htype;
        m.hlen = req.hlen;
        m.chaddr = req.chaddr;
        m.flags = req.flags;
        m.giaddr = req.giaddr;
        m.set_option(opt::MESSAGE_TYPE, [ty as u8]);
        m.set_option(opt::SERVER_ID, self.settings.server_id.octets());
        m
    }

    fn reply(&self, req: &DhcpMessage, ty: MessageType, yiaddr: Ipv4Addr, bootfile: &str) -> DhcpMessage {
        let s = &self.settings;
        let mut m = self.base_reply(req, ty);
        m.ciaddr = req.ciaddr;
        m.yiaddr = yiaddr;
        m.siaddr = s.boot.next_server;
        m.set_file_name(bootfile);
        m.set_option(opt::LEASE_TIME, (s.lease_time.as_secs().min(u32::MAX as u64) as u32).to_be_bytes());
        m.set_option(opt::SUBNET_MASK, s.subnet_mask.octets());
        m.set_option(opt::ROUTER, s.router.octets());
        if !s.dns.is_empty() {
            m.set_option(opt::DNS, s.dns.iter().flat_map(|ip| ip.octets()).collect::<Vec<u8>>());
        }
        m.set_option(opt::TFTP_SERVER_NAME, s.boot.next_server.to_string().into_bytes());
        m.set_option(opt::BOOTFILE_NAME, bootfile.as_bytes().to_vec());
        if is_pxe_client(req) {
            m.set_option(opt::VENDOR_CLASS, PXE_CLIENT_PREFIX.to_vec());
            if let Some(uuid) = req.option(opt::CLIENT_UUID) {
                m.set_option(opt::CLIENT_UUID, uuid.to_vec());
            }
        }
        m
    }

    fn nak(&self, req: &DhcpMessage, reason: NakReason) -> RequestOutcome {
        RequestOutcome::Nak(self.base_reply(req, MessageType::Nak), reason)
    }

    /// True if `mac` holds an active lease on `ip`.
    pub fn has_lease(&self, mac: &MacAddr, ip: Ipv4Addr) -> bool {
        self.table.lease_for(mac).is_some_and(|l| l.ip == ip)
    }
}

/// Where a reply to `req`, received from `src`, should be sent.
///
/// Relayed requests go back to the relay. A client that already has an
/// address (ciaddr) gets a unicast to it. Otherwise the reply goes back to
/// the datagram's source when that is a real address, and is broadcast
/// when the client had no address at all.
pub fn reply_destination(req: &DhcpMessage, reply: &DhcpMessage, src: SocketAddr) -> SocketAddr {
    if !req.giaddr.is_unspecified() {
        return SocketAddr::V4(SocketAddrV4::new(req.giaddr, SERVER_PORT));
    }
    let is_nak = reply.msg_type() == Some(MessageType::Nak);
    if !is_nak && !req.ciaddr.is_unspecified() {
        return SocketAddr::V4(SocketAddrV4::new(req.ciaddr, CLIENT_PORT));
    }
    match src {
        SocketAddr::V4(v4) if !v4.ip().is_unspecified() && !v4.ip().is_broadcast() => src,
        _ => SocketAddr::V4(SocketAddrV4::new(Ipv4Addr::BROADCAST, CLIENT_PORT)),
    }
}

//! A software PXE client that boots against the real services over
//! loopback, digest-checking everything it receives.
//!
//! The client speaks only DHCP, TFTP and HTTP. Loss is injected by a
//! datagram shim on the client side; the servers are untouched.

mod assets;
mod impair;
mod lab;

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::sync::Arc;
use std::time::Duration;

use futures::future::BoxFuture;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;
use tokio::net::UdpSocket;
use tokio::time::{timeout_at, Instant};
use tracing::debug;

pub use assets::{
    boot_config_text, parse_boot_config, synthetic_assets, synthetic_bytes, AssetSizes, BootEntry, BIOS_BOOTFILE,
    CONFIG_PATH, IMAGE_PATH, INITRD_PATH, KERNEL_PATH, UEFI_BOOTFILE,
};
pub use impair::{Direction, Impairment, ShimCounters, TraceEntry};
pub use lab::{Lab, LabError, LabOptions};

use crate::asset_store::{AssetRole, DigestWriter};
use crate::image_service::{ASSET_DIGEST, MANIFEST_VERSION, SESSION_HINT};
use crate::netproto::{
    opt, BootOp, ClientArch, DhcpMessage, MacAddr, MessageType, TftpErrorCode, TftpOption, TftpPacket, TftpRequest,
    DEFAULT_BLKSIZE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BootPhase {
    Discovering,
    Requesting,
    Bootloader,
    Config,
    Kernel,
    Initrd,
    Image,
}

impl fmt::Display for BootPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            BootPhase::Discovering => "discovering",
            BootPhase::Requesting => "requesting",
            BootPhase::Bootloader => "bootloader",
            BootPhase::Config => "config",
            BootPhase::Kernel => "kernel",
            BootPhase::Initrd => "initrd",
            BootPhase::Image => "image",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("timed out in phase {0}")]
    PhaseTimeout(BootPhase),
    #[error("{0} digest does not match the advertised manifest")]
    DigestMismatch(AssetRole),
    #[error("offer carried no bootfile")]
    OfferMissingBootfile,
    #[error("server refused the lease: {0}")]
    DhcpNak(String),
    #[error("TFTP error {code} fetching {file}: {message}")]
    Tftp { file: String, code: u16, message: String },
    #[error("{file}: received {got} bytes, expected {expected}")]
    Truncated { file: String, expected: u64, got: u64 },
    #[error("bootloader config is missing KERNEL, initrd= or colaboot.image=")]
    BadBootConfig,
    #[error("asset version changed mid-boot ({expected} -> {got})")]
    VersionChanged { expected: u64, got: u64 },
    #[error("HTTP: {0}")]
    Http(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<reqwest::Error> for SimError {
    fn from(e: reqwest::Error) -> Self {
        SimError::Http(e.to_string())
    }
}

/// Called after each phase finishes. Tests use it to act mid-boot.
pub type PhaseHook = Arc<dyn Fn(BootPhase) -> BoxFuture<'static, ()> + Send + Sync>;

#[derive(Debug, Clone, Copy)]
pub struct SimTiming {
    /// DISCOVER/REQUEST retransmit interval.
    pub dhcp_retry: Duration,
    /// Limit for each DHCP phase.
    pub dhcp_timeout: Duration,
    /// RRQ retransmit interval while no reply has arrived.
    pub rrq_retry: Duration,
    /// Limit for each TFTP or HTTP phase.
    pub phase_timeout: Duration,
    /// How long to stay around after the final ACK to re-ACK a
    /// retransmitted last block.
    pub final_ack_dally: Duration,
}

impl Default for SimTiming {
    fn default() -> Self {
        SimTiming {
            dhcp_retry: Duration::from_millis(500),
            dhcp_timeout: Duration::from_secs(10),
            rrq_retry: Duration::from_secs(2),
            phase_timeout: Duration::from_secs(120),
            final_ack_dally: Duration::ZERO,
        }
    }
}

impl SimTiming {
    /// Timing suited to a lossy run against a server retransmitting every
    /// `server_timeout`.
    pub fn lossy(server_timeout: Duration) -> Self {
        SimTiming {
            dhcp_retry: server_timeout * 5,
            rrq_retry: server_timeout * 10,
            final_ack_dally: server_timeout * 20,
            ..SimTiming::default()
        }
    }
}

#[derive(Clone)]
pub struct SimClientConfig {
    pub mac: MacAddr,
    pub arch: ClientArch,
    /// Probability of dropping each datagram in either direction, in [0, 1).
    pub loss_rate: f64,
    pub blksize_request: Option<u16>,
    pub seed: u64,
    /// Source address; derived from the MAC when None.
    pub local_ip: Option<Ipv4Addr>,
    pub timing: SimTiming,
    /// Size of each HTTP range request for the image.
    pub http_range: u64,
    pub keep_trace: bool,
    pub on_phase: Option<PhaseHook>,
}

impl fmt::Debug for SimClientConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SimClientConfig")
            .field("mac", &self.mac)
            .field("arch", &self.arch)
            .field("loss_rate", &self.loss_rate)
            .field("blksize_request", &self.blksize_request)
            .field("seed", &self.seed)
            .field("local_ip", &self.local_ip)
            .finish_non_exhaustive()
    }
}

impl Default for SimClientConfig {
    fn default() -> Self {
        SimClientConfig {
            mac: MacAddr::new([0x02, 0xc0, 0x1a, 0x10, 0x00, 0x01]),
            arch: ClientArch::LEGACY_BIOS,
            loss_rate: 0.0,
            blksize_request: Some(1428),
            seed: 0,
            local_ip: None,
            timing: SimTiming::default(),
            http_range: 8 * 1024 * 1024,
            keep_trace: false,
            on_phase: None,
        }
    }
}

impl SimClientConfig {
    /// 127.x.y.z from the last three MAC bytes, so each simulated client
    /// has its own loopback source address.
    pub fn source_ip(&self) -> Ipv4Addr {
        self.local_ip.unwrap_or_else(|| {
            let b = self.mac.0;
            Ipv4Addr::new(127, b[3], b[4], b[5])
        })
    }
}

/// Where the services listen. The TFTP host comes from the DHCP reply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Endpoints {
    pub dhcp: SocketAddr,
    pub tftp_port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FetchedAsset {
    pub path: String,
    pub bytes: u64,
    pub digest: String,
    /// Digest the image service advertised for this path.
    pub expected: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootResult {
    pub mac: MacAddr,
    pub arch: u16,
    pub lease: Ipv4Addr,
    pub next_server: Ipv4Addr,
    pub bootfile: String,
    pub manifest_version: u64,
    pub fetched: BTreeMap<AssetRole, FetchedAsset>,
    /// Seconds per phase.
    pub durations: BTreeMap<BootPhase, f64>,
    pub total_s: f64,
    pub ok: bool,
    pub shim: ShimCounters,
    pub trace_digest: String,
    #[serde(skip)]
    pub trace: Vec<TraceEntry>,
}

impl BootResult {
    /// Bytes received over TFTP.
    pub fn tftp_bytes(&self) -> u64 {
        self.fetched.iter().filter(|(r, _)| **r != AssetRole::Image).map(|(_, a)| a.bytes).sum()
    }
}

/// The MAC of fleet member `i`: `base` plus `i` in the low 24 bits.
pub fn fleet_mac(base: MacAddr, i: u32) -> MacAddr {
    let b = base.0;
    let low = (u32::from_be_bytes([0, b[3], b[4], b[5]]).wrapping_add(i)) & 0x00ff_ffff;
    let l = low.to_be_bytes();
    MacAddr::new([b[0], b[1], b[2], l[1], l[2], l[3]])
}

/// Boots `n` clients concurrently, each with its own MAC and seed.
pub async fn run_fleet(n: u32, template: &SimClientConfig, endpoints: Endpoints) -> Vec<Result<BootResult, SimError>> {
    let mut tasks = Vec::with_capacity(n as usize);
    for i in 0..n {
        let mut cfg = template.clone();
        cfg.mac = fleet_mac(template.mac, i);
        cfg.seed = template.seed.wrapping_add(u64::from(i));
        cfg.local_ip = None;
        tasks.push(tokio::spawn(async move { run_boot(&cfg, endpoints).await }));
    }
    let mut out = Vec::with_capacity(tasks.len());
    for t in tasks {
        out.push(t.await.unwrap_or_else(|e| Err(SimError::Io(io::Error::other(e)))));
    }
    out
}

/// Runs one full boot.
pub async fn run_boot(cfg: &SimClientConfig, endpoints: Endpoints) -> Result<BootResult, SimError> {
    let mut client = Client {
        cfg,
        ip: cfg.source_ip(),
        shim: Impairment::new(cfg.seed, cfg.loss_rate, cfg.keep_trace),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        durations: BTreeMap::new(),
    };
    client.boot(endpoints).await
}

struct Lease {
    ip: Ipv4Addr,
    next_server: Ipv4Addr,
    bootfile: String,
}

struct Client<'a> {
    cfg: &'a SimClientConfig,
    ip: Ipv4Addr,
    shim: Impairment,
    rng: ChaCha8Rng,
    durations: BTreeMap<BootPhase, f64>,
}

impl Client<'_> {
    async fn finish_phase(&mut self, phase: BootPhase, started: Instant) {
        self.durations.insert(phase, started.elapsed().as_secs_f64());
        if let Some(hook) = &self.cfg.on_phase {
            hook(phase).await;
        }
    }

    async fn boot(&mut self, ep: Endpoints) -> Result<BootResult, SimError> {
        let t0 = Instant::now();
        let lease = self.dhcp(ep.dhcp).await?;
        let tftp = SocketAddr::new(IpAddr::V4(lease.next_server), ep.tftp_port);

        let mut fetched: Vec<(AssetRole, String, Vec<u8>)> = Vec::new();
        let t = Instant::now();
        let loader = self.tftp_fetch(tftp, &lease.bootfile, BootPhase::Bootloader).await?;
        fetched.push((AssetRole::Bootloader, lease.bootfile.clone(), loader));
        self.finish_phase(BootPhase::Bootloader, t).await;

        let t = Instant::now();
        let config = self.tftp_fetch(tftp, CONFIG_PATH, BootPhase::Config).await?;
        let entry = parse_boot_config(&String::from_utf8_lossy(&config)).ok_or(SimError::BadBootConfig)?;
        fetched.push((AssetRole::Config, CONFIG_PATH.into(), config));
        self.finish_phase(BootPhase::Config, t).await;

        for (role, phase, path) in [
            (AssetRole::Kernel, BootPhase::Kernel, &entry.kernel),
            (AssetRole::Initrd, BootPhase::Initrd, &entry.initrd),
        ] {
            let t = Instant::now();
            let bytes = self.tftp_fetch(tftp, path, phase).await?;
            fetched.push((role, path.clone(), bytes));
            self.finish_phase(phase, t).await;
        }

        let http = reqwest::Client::builder()
            .no_proxy()
            .local_address(IpAddr::V4(self.ip))
            .build()?;
        let t = Instant::now();
        let deadline = t + self.cfg.timing.phase_timeout;
        let image = tokio::time::timeout_at(deadline, self.http_fetch(&http, &entry.image_url))
            .await
            .map_err(|_| SimError::PhaseTimeout(BootPhase::Image))??;
        self.finish_phase(BootPhase::Image, t).await;

        // Check every TFTP asset against what the image service advertises
        // for this client's pinned version.
        let base = entry
            .image_url
            .rfind("/assets/")
            .map(|i| &entry.image_url[..i + "/assets/".len()])
            .ok_or(SimError::BadBootConfig)?;
        let mut out = BTreeMap::new();
        for (role, path, bytes) in fetched {
            let (size, expected, version) = self.head(&http, &format!("{base}{path}")).await?;
            if version != image.version {
                return Err(SimError::VersionChanged { expected: image.version, got: version });
            }
            if size != bytes.len() as u64 {
                return Err(SimError::Truncated { file: path, expected: size, got: bytes.len() as u64 });
            }
            let digest = crate::asset_store::Digest::of(&bytes).to_hex();
            if digest != expected {
                return Err(SimError::DigestMismatch(role));
            }
            out.insert(role, FetchedAsset { path, bytes: bytes.len() as u64, digest, expected });
        }
        if image.digest != image.expected {
            return Err(SimError::DigestMismatch(AssetRole::Image));
        }
        let image_path = entry.image_url[base.len()..].to_string();
        out.insert(
            AssetRole::Image,
            FetchedAsset { path: image_path, bytes: image.bytes, digest: image.digest, expected: image.expected },
        );

        Ok(BootResult {
            mac: self.cfg.mac,
            arch: self.cfg.arch.code,
            lease: lease.ip,
            next_server: lease.next_server,
            bootfile: lease.bootfile,
            manifest_version: image.version,
            fetched: out,
            durations: std::mem::take(&mut self.durations),
            total_s: t0.elapsed().as_secs_f64(),
            ok: true,
            shim: self.shim.counters(),
            trace_digest: self.shim.trace_digest(),
            trace: self.shim.take_trace(),
        })
    }

    // ---- DHCP ----

    fn dhcp_base(&self, xid: u32, kind: MessageType) -> DhcpMessage {
        let mut m = DhcpMessage::new(BootOp::Request, xid, self.cfg.mac);
        m.set_option(opt::MESSAGE_TYPE, [kind as u8]);
        m.set_option(opt::PARAMETER_LIST, [opt::SUBNET_MASK, opt::ROUTER, opt::DNS, opt::TFTP_SERVER_NAME, opt::BOOTFILE_NAME]);
        m.set_option(opt::MAX_MESSAGE_SIZE, 1500u16.to_be_bytes());
        let vendor = format!("PXEClient:Arch:{:05}:UNDI:002001", self.cfg.arch.code);
        m.set_option(opt::VENDOR_CLASS, vendor.into_bytes());
        m.set_option(opt::CLIENT_ARCH, self.cfg.arch.to_option());
        m.set_option(opt::CLIENT_NDI, [1, 2, 1]);
        let mut uuid = vec![0u8; 17];
        uuid[11..].copy_from_slice(&self.cfg.mac.0);
        m.set_option(opt::CLIENT_UUID, uuid);
        m
    }

    async fn dhcp(&mut self, server: SocketAddr) -> Result<Lease, SimError> {
        let sock = UdpSocket::bind(SocketAddr::new(IpAddr::V4(self.ip), 0)).await?;
        let xid: u32 = self.rng.random();

        let t = Instant::now();
        let discover = self.dhcp_base(xid, MessageType::Discover);
        let offer = self
            .dhcp_exchange(&sock, server, &discover, BootPhase::Discovering, |m| m == MessageType::Offer)
            .await?;
        if offer.file_name().is_empty() {
            return Err(SimError::OfferMissingBootfile);
        }
        let server_id = offer.option_ipv4(opt::SERVER_ID).unwrap_or(offer.siaddr);
        self.finish_phase(BootPhase::Discovering, t).await;

        let t = Instant::now();
        let mut request = self.dhcp_base(xid, MessageType::Request);
        request.set_option(opt::REQUESTED_IP, offer.yiaddr.octets());
        request.set_option(opt::SERVER_ID, server_id.octets());
        let reply = self
            .dhcp_exchange(&sock, server, &request, BootPhase::Requesting, |m| {
                matches!(m, MessageType::Ack | MessageType::Nak)
            })
            .await?;
        if reply.msg_type() == Some(MessageType::Nak) {
            return Err(SimError::DhcpNak(format!("REQUEST for {} refused", offer.yiaddr)));
        }
        let bootfile = reply.file_name();
        if bootfile.is_empty() {
            return Err(SimError::OfferMissingBootfile);
        }
        let next_server = if reply.siaddr.is_unspecified() { server_id } else { reply.siaddr };
        self.finish_phase(BootPhase::Requesting, t).await;
        debug!(mac = %self.cfg.mac, lease = %reply.yiaddr, %bootfile, "leased");
        Ok(Lease { ip: reply.yiaddr, next_server, bootfile })
    }

    /// Sends `msg` until a reply of an accepted type with our xid arrives.
    async fn dhcp_exchange(
        &mut self,
        sock: &UdpSocket,
        server: SocketAddr,
        msg: &DhcpMessage,
        phase: BootPhase,
        accept: impl Fn(MessageType) -> bool,
    ) -> Result<DhcpMessage, SimError> {
        let timing = self.cfg.timing;
        let deadline = Instant::now() + timing.dhcp_timeout;
        let wire = msg.encode().map_err(|e| io::Error::other(e.to_string()))?;
        let label = format!("DHCP {:?}", msg.msg_type());
        let mut buf = vec![0u8; 1500];
        loop {
            if Instant::now() >= deadline {
                return Err(SimError::PhaseTimeout(phase));
            }
            if self.shim.pass(Direction::Outbound, &label) {
                // An unreachable port reports ECONNREFUSED on the next
                // receive; treat it like silence.
                let _ = sock.send_to(&wire, server).await;
            }
            let retry = (Instant::now() + timing.dhcp_retry).min(deadline);
            loop {
                let (n, _) = match timeout_at(retry, sock.recv_from(&mut buf)).await {
                    Err(_) => break,
                    Ok(Err(_)) => continue,
                    Ok(Ok(v)) => v,
                };
                let Ok(reply) = DhcpMessage::decode(&buf[..n]) else { continue };
                let Some(kind) = reply.msg_type() else { continue };
                if !self.shim.pass(Direction::Inbound, &format!("DHCP {kind:?}")) {
                    continue;
                }
                if reply.op == BootOp::Reply && reply.xid == msg.xid && reply.client_mac() == self.cfg.mac && accept(kind) {
                    return Ok(reply);
                }
            }
        }
    }

    // ---- TFTP ----

    async fn send_tftp(&mut self, sock: &UdpSocket, pkt: &TftpPacket, to: SocketAddr, label: &str) {
        if !self.shim.pass(Direction::Outbound, label) {
            return;
        }
        if let Ok(bytes) = pkt.encode() {
            let _ = sock.send_to(&bytes, to).await;
        }
    }

    async fn tftp_fetch(&mut self, server: SocketAddr, file: &str, phase: BootPhase) -> Result<Vec<u8>, SimError> {
        let timing = self.cfg.timing;
        let sock = UdpSocket::bind(SocketAddr::new(IpAddr::V4(self.ip), 0)).await?;
        let mut options = Vec::new();
        if let Some(b) = self.cfg.blksize_request {
            options.push(TftpOption::new("blksize", b));
        }
        options.push(TftpOption::new("tsize", 0));
        let rrq = TftpPacket::Rrq(TftpRequest { filename: file.into(), mode: "octet".into(), options });
        let rrq_label = format!("{file} RRQ");
        self.send_tftp(&sock, &rrq, server, &rrq_label).await;

        let phase_deadline = Instant::now() + timing.phase_timeout;
        let mut rrq_deadline = Instant::now() + timing.rrq_retry;
        let mut tid: Option<SocketAddr> = None;
        let mut blksize = usize::from(DEFAULT_BLKSIZE);
        let mut tsize: Option<u64> = None;
        let mut expected: u16 = 1;
        let mut data = Vec::new();
        let mut buf = vec![0u8; 65_536];

        loop {
            let wait = if tid.is_none() { rrq_deadline.min(phase_deadline) } else { phase_deadline };
            let (n, from) = match timeout_at(wait, sock.recv_from(&mut buf)).await {
                Err(_) if Instant::now() >= phase_deadline => return Err(SimError::PhaseTimeout(phase)),
                Err(_) => {
                    self.send_tftp(&sock, &rrq, server, &rrq_label).await;
                    rrq_deadline = Instant::now() + timing.rrq_retry;
                    continue;
                }
                Ok(Err(_)) => continue,
                Ok(Ok(v)) => v,
            };
            if from.ip() != server.ip() {
                continue;
            }
            let Ok(pkt) = TftpPacket::decode(&buf[..n]) else { continue };
            let label = match &pkt {
                TftpPacket::Data { block, payload } => format!("{file} DATA {block} {}", payload.len()),
                TftpPacket::Oack { .. } => format!("{file} OACK"),
                TftpPacket::Error { code, .. } => format!("{file} ERROR {}", *code as u16),
                other => format!("{file} {:?}", other.opcode()),
            };
            if !self.shim.pass(Direction::Inbound, &label) {
                continue;
            }
            if let Some(t) = tid {
                if from != t {
                    let err = TftpPacket::error(TftpErrorCode::UnknownTid, "unknown transfer ID");
                    self.send_tftp(&sock, &err, from, &format!("{file} ERROR 5")).await;
                    continue;
                }
            }
            match pkt {
                TftpPacket::Oack { options } if expected == 1 && data.is_empty() => {
                    tid = Some(from);
                    for o in &options {
                        match o.name.to_ascii_lowercase().as_str() {
                            "blksize" => blksize = o.value.parse().unwrap_or(blksize),
                            "tsize" => tsize = o.value.parse().ok(),
                            _ => {}
                        }
                    }
                    self.send_tftp(&sock, &TftpPacket::Ack { block: 0 }, from, &format!("{file} ACK 0")).await;
                }
                TftpPacket::Data { block, payload } => {
                    if tid.is_none() {
                        // No OACK: the server declined every option.
                        tid = Some(from);
                    }
                    if block == expected {
                        data.extend_from_slice(&payload);
                        expected = expected.wrapping_add(1);
                        self.send_tftp(&sock, &TftpPacket::Ack { block }, from, &format!("{file} ACK {block}")).await;
                        if payload.len() < blksize {
                            self.dally(&sock, from, file, block).await;
                            break;
                        }
                    } else if block == expected.wrapping_sub(1) {
                        self.send_tftp(&sock, &TftpPacket::Ack { block }, from, &format!("{file} ACK {block}")).await;
                    }
                }
                TftpPacket::Error { code, message } => {
                    return Err(SimError::Tftp { file: file.into(), code: code as u16, message });
                }
                _ => {}
            }
        }
        if let Some(size) = tsize {
            if size != data.len() as u64 {
                return Err(SimError::Truncated { file: file.into(), expected: size, got: data.len() as u64 });
            }
        }
        Ok(data)
    }

    /// Re-ACKs the last block if the server repeats it, until quiet.
    async fn dally(&mut self, sock: &UdpSocket, tid: SocketAddr, file: &str, last: u16) {
        let mut buf = vec![0u8; 65_536];
        let mut until = Instant::now() + self.cfg.timing.final_ack_dally;
        while let Ok(r) = timeout_at(until, sock.recv_from(&mut buf)).await {
            let Ok((n, from)) = r else { continue };
            if from != tid {
                continue;
            }
            if let Ok(TftpPacket::Data { block, payload }) = TftpPacket::decode(&buf[..n]) {
                if !self.shim.pass(Direction::Inbound, &format!("{file} DATA {block} {}", payload.len())) {
                    continue;
                }
                if block == last {
                    self.send_tftp(sock, &TftpPacket::Ack { block }, tid, &format!("{file} ACK {block}")).await;
                    until = Instant::now() + self.cfg.timing.final_ack_dally;
                }
            }
        }
    }

    // ---- HTTP ----

    async fn head(&self, http: &reqwest::Client, url: &str) -> Result<(u64, String, u64), SimError> {
        let resp = http.head(url).header(SESSION_HINT, self.cfg.mac.to_string()).send().await?;
        if !resp.status().is_success() {
            return Err(SimError::Http(format!("HEAD {url}: {}", resp.status())));
        }
        let h = resp.headers();
        let get = |name: &str| h.get(name).and_then(|v| v.to_str().ok()).map(str::to_string);
        let size = get("content-length").and_then(|v| v.parse().ok()).ok_or_else(|| SimError::Http(format!("HEAD {url}: no length")))?;
        let digest = get(ASSET_DIGEST).ok_or_else(|| SimError::Http(format!("HEAD {url}: no digest")))?;
        let version = get(MANIFEST_VERSION)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| SimError::Http(format!("HEAD {url}: no version")))?;
        Ok((size, digest, version))
    }

    async fn http_fetch(&self, http: &reqwest::Client, url: &str) -> Result<ImageFetch, SimError> {
        let (size, expected, version) = self.head(http, url).await?;
        let mut hasher = DigestWriter::new();
        let step = self.cfg.http_range.max(1);
        let mut offset = 0u64;
        while offset < size {
            let last = (offset + step).min(size) - 1;
            let mut resp = http
                .get(url)
                .header(SESSION_HINT, self.cfg.mac.to_string())
                .header("range", format!("bytes={offset}-{last}"))
                .send()
                .await?;
            if resp.status() != reqwest::StatusCode::PARTIAL_CONTENT {
                return Err(SimError::Http(format!("GET {url} bytes={offset}-{last}: {}", resp.status())));
            }
            let got: Option<u64> = resp.headers().get(MANIFEST_VERSION).and_then(|v| v.to_str().ok()?.parse().ok());
            if got != Some(version) {
                return Err(SimError::VersionChanged { expected: version, got: got.unwrap_or(0) });
            }
            let before = hasher.len();
            while let Some(chunk) = resp.chunk().await? {
                hasher.update(&chunk);
            }
            if hasher.len() - before != last - offset + 1 {
                return Err(SimError::Truncated { file: url.into(), expected: size, got: hasher.len() });
            }
            offset = last + 1;
        }
        let (digest, bytes) = hasher.finish();
        Ok(ImageFetch { bytes, digest: digest.to_hex(), expected, version })
    }
}

struct ImageFetch {
    bytes: u64,
    digest: String,
    expected: String,
    version: u64,
}

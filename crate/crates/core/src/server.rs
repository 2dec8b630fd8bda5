//! Runs every service against one store and one tracker.

use std::io;
use std::net::{IpAddr, SocketAddr};
use std::sync::Arc;

use thiserror::Error;
use tokio::net::{TcpListener, UdpSocket};
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;
use tracing::{info, warn};

use crate::asset_store::{open_remote, sync_once, AssetStore, StoreError};
use crate::boot_session::{spawn_tracker, BootReport, BootTracker};
use crate::clock::SharedClock;
use crate::config::ServerConfig;
use crate::context::ServiceContext;
use crate::dhcp_server::{self, DhcpServer};
use crate::image_service;
use crate::tftp_server::{self, TftpStats};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("port {0} is already in use")]
    PortInUse(u16),
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: io::Error },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot open event log: {0}")]
    EventLog(io::Error),
}

/// The three sockets, bound together or not at all.
#[derive(Debug)]
pub struct Listeners {
    pub dhcp: UdpSocket,
    pub tftp: UdpSocket,
    pub http: TcpListener,
}

fn bind_err(addr: SocketAddr) -> impl FnOnce(io::Error) -> ServeError {
    move |source| match source.kind() {
        io::ErrorKind::AddrInUse => ServeError::PortInUse(addr.port()),
        _ => ServeError::Bind { addr, source },
    }
}

impl Listeners {
    /// Binds DHCP, TFTP and HTTP. If any bind fails, the sockets already
    /// bound are closed before the error is returned.
    pub async fn bind(cfg: &ServerConfig) -> Result<Self, ServeError> {
        let dhcp_addr = SocketAddr::new(IpAddr::V4(cfg.dhcp_bind_address), cfg.dhcp_port);
        let tftp_addr = SocketAddr::new(cfg.bind_ip(), cfg.tftp_port);
        let http_addr = SocketAddr::new(cfg.bind_ip(), cfg.image_port);
        let dhcp = UdpSocket::bind(dhcp_addr).await.map_err(bind_err(dhcp_addr))?;
        let tftp = UdpSocket::bind(tftp_addr).await.map_err(bind_err(tftp_addr))?;
        let http = TcpListener::bind(http_addr).await.map_err(bind_err(http_addr))?;
        Ok(Listeners { dhcp, tftp, http })
    }

    pub fn addrs(&self) -> io::Result<ListenAddrs> {
        Ok(ListenAddrs {
            dhcp: self.dhcp.local_addr()?,
            tftp: self.tftp.local_addr()?,
            http: self.http.local_addr()?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ListenAddrs {
    pub dhcp: SocketAddr,
    pub tftp: SocketAddr,
    pub http: SocketAddr,
}

pub struct RunningServer {
    pub addrs: ListenAddrs,
    pub ctx: ServiceContext,
    pub tftp_stats: Arc<TftpStats>,
    cancel: CancellationToken,
    dhcp: JoinHandle<DhcpServer>,
    tftp: JoinHandle<()>,
    http: JoinHandle<()>,
    sync: Option<JoinHandle<()>>,
    tracker: JoinHandle<BootTracker>,
}

/// Starts every service on already-bound listeners.
pub fn start(cfg: &ServerConfig, listeners: Listeners, store: Arc<AssetStore>, clock: SharedClock) -> Result<RunningServer, ServeError> {
    let addrs = listeners.addrs().map_err(|source| ServeError::Bind { addr: SocketAddr::from(([0, 0, 0, 0], 0)), source })?;
    let (tracker, tracker_task) = spawn_tracker(clock, cfg.event_log.as_deref()).map_err(ServeError::EventLog)?;
    let ctx = ServiceContext::new(store.clone(), tracker);
    let cancel = CancellationToken::new();

    let dhcp = dhcp_server::service::spawn(listeners.dhcp, DhcpServer::new(cfg.dhcp.clone()), ctx.clone(), cancel.clone());
    let tftp_stats: Arc<TftpStats> = Arc::default();
    let tftp = tftp_server::service::spawn(listeners.tftp, cfg.tftp, ctx.clone(), tftp_stats.clone(), cancel.clone());

    let app = image_service::router(ctx.clone()).into_make_service_with_connect_info::<SocketAddr>();
    let http_cancel = cancel.clone();
    let http_listener = listeners.http;
    let http = tokio::spawn(async move {
        let serve = axum::serve(http_listener, app).with_graceful_shutdown(async move { http_cancel.cancelled().await });
        if let Err(e) = serve.await {
            warn!(error = %e, "image service stopped");
        }
    });

    let sync = cfg.sync_source.clone().map(|source| {
        let (store, cancel, every) = (store, cancel.clone(), cfg.sync_interval);
        tokio::spawn(async move {
            let remote = open_remote(&source);
            let mut tick = tokio::time::interval(every);
            loop {
                tokio::select! {
                    _ = cancel.cancelled() => break,
                    _ = tick.tick() => match sync_once(remote.as_ref(), &store).await {
                        Ok(r) if r.new_version.is_some() => info!(version = ?r.new_version, fetched = r.fetched, bytes = r.bytes, "activated new asset version"),
                        Ok(_) => {}
                        Err(e) => warn!(error = %e, "periodic sync failed"),
                    },
                }
            }
        })
    });

    info!(dhcp = %addrs.dhcp, tftp = %addrs.tftp, http = %addrs.http, "services listening");
    Ok(RunningServer { addrs, ctx, tftp_stats, cancel, dhcp, tftp, http, sync, tracker: tracker_task })
}

impl RunningServer {
    pub fn cancel_token(&self) -> CancellationToken {
        self.cancel.clone()
    }

    pub async fn report(&self) -> BootReport {
        self.ctx.tracker.report().await.unwrap_or_else(|| BootTracker::new().report())
    }

    /// Stops every service, waits for in-flight transfers to be told, and
    /// flushes the event log. Returns the final report.
    pub async fn shutdown(self) -> BootReport {
        self.cancel.cancel();
        let _ = self.dhcp.await;
        let _ = self.tftp.await;
        let _ = self.http.await;
        if let Some(s) = self.sync {
            let _ = s.await;
        }
        self.ctx.tracker.flush().await;
        let report = self.ctx.tracker.report().await;
        drop(self.ctx);
        let tracker = self.tracker.await.ok();
        report.or_else(|| tracker.map(|t| t.report())).unwrap_or_else(|| BootTracker::new().report())
    }
}

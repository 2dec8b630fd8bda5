use std::net::{IpAddr, SocketAddr};
use std::time::Duration;

use tokio::net::UdpSocket;
use tokio::task::JoinHandle;
use tokio_util::sync::CancellationToken;
use tracing::{debug, info, warn};

use super::{reply_destination, DhcpError, DhcpServer, Reply, RequestOutcome};
use crate::boot_session::{BootEvent, EventKind};
use crate::context::ServiceContext;
use crate::netproto::{DhcpMessage, MessageType};

const EXPIRY_SWEEP: Duration = Duration::from_secs(1);

/// Runs `server` on `socket` until `cancel` fires, then hands the server
/// (and its lease table) back.
pub fn spawn(
    socket: UdpSocket,
    mut server: DhcpServer,
    ctx: ServiceContext,
    cancel: CancellationToken,
) -> JoinHandle<DhcpServer> {
    if let Err(e) = socket.set_broadcast(true) {
        warn!(error = %e, "cannot enable broadcast on DHCP socket");
    }
    tokio::spawn(async move {
        let mut buf = vec![0u8; 1500];
        let mut sweep = tokio::time::interval(EXPIRY_SWEEP);
        loop {
            tokio::select! {
                _ = cancel.cancelled() => break,
                _ = sweep.tick() => {
                    let n = server.expire_leases(ctx.tracker.clock().now());
                    if n > 0 {
                        info!(reclaimed = n, "expired DHCP leases");
                    }
                }
                recv = socket.recv_from(&mut buf) => match recv {
                    Ok((len, src)) => handle_datagram(&socket, &mut server, &ctx, &buf[..len], src).await,
                    Err(e) => warn!(error = %e, "DHCP receive failed"),
                },
            }
        }
        server
    })
}

async fn handle_datagram(
    socket: &UdpSocket,
    server: &mut DhcpServer,
    ctx: &ServiceContext,
    raw: &[u8],
    src: SocketAddr,
) {
    let msg = match DhcpMessage::decode(raw) {
        Ok(m) => m,
        Err(e) => {
            debug!(%src, error = %e, "dropping malformed DHCP datagram");
            return;
        }
    };
    let mac = msg.client_mac();
    let tracker = &ctx.tracker;
    let pxe_ok = !server.settings().pxe_only || crate::netproto::is_pxe_client(&msg);
    match msg.msg_type() {
        Some(MessageType::Discover) if pxe_ok => {
            ctx.registry.release(&mac);
            tracker.record(mac, EventKind::DhcpDiscover);
        }
        Some(MessageType::Request) if pxe_ok => {
            tracker.record(mac, EventKind::DhcpRequest);
        }
        _ => {}
    }

    let reply = match server.handle(&msg, tracker.clock().now()) {
        Ok(r) => r,
        Err(DhcpError::NotPxe(mac)) => {
            debug!(%mac, "ignoring non-PXE client");
            return;
        }
        Err(e) => {
            warn!(%mac, error = %e, "DHCP request not served");
            return;
        }
    };
    let out = match reply {
        Reply::Offer(offer) => {
            tracker.record(mac, EventKind::DhcpOffer);
            offer
        }
        Reply::Request(RequestOutcome::Ack(ack)) => {
            let observed = match src.ip() {
                IpAddr::V4(v4) if v4.is_unspecified() => None,
                ip => Some(ip),
            };
            let binding = ctx.registry.bind(mac, ack.yiaddr, observed, || ctx.active_snapshot());
            let mut event = BootEvent::new(mac, EventKind::DhcpAck, tracker.clock().now());
            if let Some(b) = &binding {
                event = event.with_version(b.snapshot.version());
            }
            tracker.submit(event);
            ack
        }
        Reply::Request(RequestOutcome::Nak(nak, reason)) => {
            info!(%mac, ?reason, "DHCP NAK");
            nak
        }
        Reply::Request(RequestOutcome::Ignored) | Reply::Released | Reply::None => return,
    };
    let dest = reply_destination(&msg, &out, src);
    match out.encode() {
        Ok(bytes) => {
            if let Err(e) = socket.send_to(&bytes, dest).await {
                warn!(%dest, error = %e, "DHCP send failed");
            }
        }
        Err(e) => warn!(error = %e, "cannot encode DHCP reply"),
    }
}

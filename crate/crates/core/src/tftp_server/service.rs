use std::collections::HashSet;
use std::net::{IpAddr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use tokio::net::UdpSocket;
use tokio::task::JoinHandle;
use tokio::time::{timeout_at, Instant};
use tokio_util::sync::CancellationToken;
use tokio_util::task::TaskTracker;
use tracing::{debug, info, warn};

use super::session::{resolve, AckError, AckOutcome, AssetSession, TftpPolicy, TimeoutAction};
use crate::boot_session::{BootEvent, EventKind};
use crate::context::ServiceContext;
use crate::pins::ClientBinding;
use crate::netproto::{MacAddr, TftpErrorCode, TftpPacket, TftpRequest};

/// Counters for finished transfers.
#[derive(Debug, Default)]
pub struct TftpStats {
    pub completed: AtomicU64,
    pub aborted: AtomicU64,
    pub rejected: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferOutcome {
    Completed { bytes: u64 },
    /// Retries exhausted.
    TimedOut,
    /// The client sent an ERROR or an illegal packet.
    ClientAborted,
    Cancelled,
}

/// Serves RRQs arriving on `socket` until `cancel` fires. In-flight
/// transfers are told the server is going away and awaited before the
/// returned task finishes.
pub fn spawn(
    socket: UdpSocket,
    policy: TftpPolicy,
    ctx: ServiceContext,
    stats: Arc<TftpStats>,
    cancel: CancellationToken,
) -> JoinHandle<()> {
    tokio::spawn(async move {
        let local_ip = socket.local_addr().map(|a| a.ip()).ok();
        let in_flight: Arc<Mutex<HashSet<SocketAddr>>> = Arc::default();
        let transfers = TaskTracker::new();
        let mut buf = vec![0u8; 1500];
        loop {
            let (len, src) = tokio::select! {
                _ = cancel.cancelled() => break,
                r = socket.recv_from(&mut buf) => match r {
                    Ok(v) => v,
                    Err(e) => {
                        warn!(error = %e, "TFTP receive failed");
                        continue;
                    }
                },
            };
            let req = match TftpPacket::decode(&buf[..len]) {
                Ok(TftpPacket::Rrq(req)) => req,
                Ok(TftpPacket::Wrq(req)) => {
                    debug!(%src, file = %req.filename, "refusing write request");
                    let err = TftpPacket::error(TftpErrorCode::AccessViolation, "server is read-only");
                    send(&socket, &err, src).await;
                    stats.rejected.fetch_add(1, Ordering::Relaxed);
                    continue;
                }
                Ok(other) => {
                    debug!(%src, opcode = ?other.opcode(), "ignoring non-request on listener port");
                    continue;
                }
                Err(e) => {
                    debug!(%src, error = %e, "dropping malformed TFTP datagram");
                    continue;
                }
            };
            // A retransmitted RRQ while its transfer is running is a duplicate;
            // the transfer's own retransmissions cover the lost reply.
            if !in_flight.lock().unwrap().insert(src) {
                continue;
            }
            let bind_ip = local_ip.unwrap_or(IpAddr::from([0, 0, 0, 0]));
            let (ctx, stats, cancel, in_flight) = (ctx.clone(), stats.clone(), cancel.clone(), in_flight.clone());
            transfers.spawn(async move {
                let outcome = run_transfer(bind_ip, src, req, policy, &ctx, &stats, &cancel).await;
                in_flight.lock().unwrap().remove(&src);
                outcome
            });
        }
        transfers.close();
        transfers.wait().await;
    })
}

async fn send(socket: &UdpSocket, pkt: &TftpPacket, dest: SocketAddr) {
    match pkt.encode() {
        Ok(bytes) => {
            if let Err(e) = socket.send_to(&bytes, dest).await {
                debug!(%dest, error = %e, "TFTP send failed");
            }
        }
        Err(e) => warn!(error = %e, "cannot encode TFTP packet"),
    }
}

/// Marks the client's transfer finished when dropped, after any
/// completion event has been submitted.
struct TransferGate(Arc<ClientBinding>);

impl Drop for TransferGate {
    fn drop(&mut self) {
        self.0.transfer_finished();
    }
}

async fn run_transfer(
    bind_ip: IpAddr,
    client: SocketAddr,
    req: TftpRequest,
    policy: TftpPolicy,
    ctx: &ServiceContext,
    stats: &TftpStats,
    cancel: &CancellationToken,
) -> Option<TransferOutcome> {
    let socket = match UdpSocket::bind(SocketAddr::new(bind_ip, 0)).await {
        Ok(s) => s,
        Err(e) => {
            warn!(error = %e, "cannot open transfer socket");
            return None;
        }
    };
    let binding = ctx.registry.by_addr(client.ip());
    let snapshot = match binding.as_ref().map(|b| b.snapshot.clone()).or_else(|| ctx.active_snapshot()) {
        Some(s) => s,
        None => {
            let err = TftpPacket::error(TftpErrorCode::FileNotFound, "no assets available");
            send(&socket, &err, client).await;
            stats.rejected.fetch_add(1, Ordering::Relaxed);
            return None;
        }
    };
    let started = resolve(&snapshot, &req.filename)
        .and_then(|reader| AssetSession::handle_rrq(&req, reader, &policy));
    let (mut session, first) = match started {
        Ok(v) => v,
        Err(e) => {
            info!(%client, file = %req.filename, error = %e, "RRQ refused");
            send(&socket, &e.to_packet(), client).await;
            stats.rejected.fetch_add(1, Ordering::Relaxed);
            return None;
        }
    };
    let mac: Option<MacAddr> = binding.as_ref().map(|b| b.mac);
    let role = session.entry().role;
    let version = session.version();
    let _gate = match &binding {
        Some(b) => {
            if !b.wait_transfers_idle(policy.max_timeout).await {
                debug!(%client, "earlier transfer still open");
            }
            b.transfer_started();
            let e = BootEvent::new(b.mac, EventKind::TftpRrq { role }, ctx.tracker.clock().now()).with_version(version);
            ctx.tracker.submit(e);
            Some(TransferGate(b.clone()))
        }
        None => None,
    };
    debug!(%client, file = %req.filename, blksize = session.blksize(), version, "transfer started");

    send(&socket, &first, client).await;
    let mut deadline = Instant::now() + session.current_timeout();
    let mut buf = vec![0u8; 1500];
    let outcome = loop {
        let recv = tokio::select! {
            _ = cancel.cancelled() => {
                send(&socket, &TftpPacket::error(TftpErrorCode::NotDefined, "server shutting down"), client).await;
                break TransferOutcome::Cancelled;
            }
            r = timeout_at(deadline, socket.recv_from(&mut buf)) => r,
        };
        let (len, from) = match recv {
            Err(_elapsed) => match session.on_timeout() {
                TimeoutAction::Retransmit(pkt) => {
                    send(&socket, &pkt, client).await;
                    deadline = Instant::now() + session.current_timeout();
                    continue;
                }
                TimeoutAction::Abort => {
                    let err = TftpPacket::error(TftpErrorCode::NotDefined, "retries exhausted");
                    send(&socket, &err, client).await;
                    break TransferOutcome::TimedOut;
                }
                TimeoutAction::Idle => break TransferOutcome::Completed { bytes: session.size() },
            },
            Ok(Err(e)) => {
                debug!(error = %e, "transfer receive failed");
                continue;
            }
            Ok(Ok(v)) => v,
        };
        if from != client {
            send(&socket, &TftpPacket::error(TftpErrorCode::UnknownTid, "unknown transfer ID"), from).await;
            continue;
        }
        match TftpPacket::decode(&buf[..len]) {
            Ok(TftpPacket::Ack { block }) => match session.next_data(block) {
                Ok(AckOutcome::Data(pkt)) => {
                    send(&socket, &pkt, client).await;
                    deadline = Instant::now() + session.current_timeout();
                }
                Ok(AckOutcome::Complete) => break TransferOutcome::Completed { bytes: session.size() },
                Err(AckError::StaleAck { .. }) => {}
                Err(AckError::Finished) => break TransferOutcome::Completed { bytes: session.size() },
                Err(AckError::Read(e)) => {
                    warn!(error = %e, "asset read failed mid-transfer");
                    send(&socket, &TftpPacket::error(TftpErrorCode::NotDefined, "internal error"), client).await;
                    break TransferOutcome::ClientAborted;
                }
            },
            Ok(TftpPacket::Error { code, message }) => {
                debug!(%client, ?code, %message, "client aborted transfer");
                session.abort();
                break TransferOutcome::ClientAborted;
            }
            Ok(_) | Err(_) => {
                send(&socket, &TftpPacket::error(TftpErrorCode::IllegalOperation, "illegal TFTP operation"), client).await;
                session.abort();
                break TransferOutcome::ClientAborted;
            }
        }
    };

    match outcome {
        TransferOutcome::Completed { bytes } => {
            stats.completed.fetch_add(1, Ordering::Relaxed);
            if let Some(mac) = mac {
                let e = BootEvent::new(mac, EventKind::TftpComplete { role }, ctx.tracker.clock().now())
                    .with_size(bytes)
                    .with_version(version);
                ctx.tracker.submit(e);
            }
            debug!(%client, file = %req.filename, bytes, "transfer complete");
        }
        other => {
            stats.aborted.fetch_add(1, Ordering::Relaxed);
            info!(%client, file = %req.filename, outcome = ?other, "transfer ended early");
        }
    }
    Some(outcome)
}

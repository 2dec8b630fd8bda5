//! HTTP/1.1 streaming of store assets with single-range support.
//!
//! `GET|HEAD /assets/<path>` serves one asset of the caller's pinned
//! version. Every response carries `X-Asset-Digest` and
//! `X-Manifest-Version`. The caller is identified by the `X-Session-Hint`
//! header (its MAC) or, failing that, by its address.

mod range;

use std::io::SeekFrom;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{ConnectInfo, Path, State};
use axum::http::{header, HeaderMap, HeaderValue, Method, Response, StatusCode};
use axum::routing::get;
use axum::Router;
use bytes::BytesMut;
use futures::stream;
use tokio::io::{AsyncReadExt, AsyncSeekExt};
use tracing::{debug, warn};

pub use range::{parse_range_header, resolve_range, ByteRange, RangeError};

use crate::asset_store::{normalize_virtual_path, AssetRole, Snapshot};
use crate::boot_session::{BootEvent, EventKind};
use crate::context::ServiceContext;
use crate::netproto::MacAddr;
use crate::pins::ClientBinding;

pub const DEFAULT_PORT: u16 = 8080;
pub const CHUNK_SIZE: usize = 64 * 1024;
const IDLE_WAIT: std::time::Duration = std::time::Duration::from_secs(8);
pub const SESSION_HINT: &str = "x-session-hint";
pub const ASSET_DIGEST: &str = "x-asset-digest";
pub const MANIFEST_VERSION: &str = "x-manifest-version";

/// Request routes. Serve with `into_make_service_with_connect_info::<SocketAddr>()`.
pub fn router(ctx: ServiceContext) -> Router {
    Router::new().route("/assets/{*path}", get(serve_asset)).with_state(ctx)
}

fn status(code: StatusCode, msg: &'static str) -> Response<Body> {
    let mut r = Response::new(Body::from(msg));
    *r.status_mut() = code;
    r
}

/// Snapshot for this request, plus the client binding when we know who is
/// asking.
fn pick_snapshot(ctx: &ServiceContext, headers: &HeaderMap, peer: SocketAddr) -> Option<(Snapshot, Option<Arc<ClientBinding>>)> {
    let hint = headers
        .get(SESSION_HINT)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<MacAddr>().ok());
    let binding = match hint {
        Some(mac) => ctx.registry.get_or_pin(mac, || ctx.active_snapshot()),
        None => ctx.registry.by_addr(peer.ip()),
    };
    match binding {
        Some(b) => Some((b.snapshot.clone(), Some(b))),
        None => ctx.active_snapshot().map(|s| (s, None)),
    }
}

async fn serve_asset(
    State(ctx): State<ServiceContext>,
    ConnectInfo(peer): ConnectInfo<SocketAddr>,
    method: Method,
    Path(path): Path<String>,
    headers: HeaderMap,
) -> Response<Body> {
    let Some(path) = normalize_virtual_path(&path) else {
        return status(StatusCode::NOT_FOUND, "not found\n");
    };
    let Some((snapshot, binding)) = pick_snapshot(&ctx, &headers, peer) else {
        return status(StatusCode::SERVICE_UNAVAILABLE, "no active asset version\n");
    };
    let Some(entry) = snapshot.entry(&path).cloned() else {
        return status(StatusCode::NOT_FOUND, "not found\n");
    };
    let size = entry.size;

    let range = match headers.get(header::RANGE).and_then(|v| v.to_str().ok()).map(parse_range_header) {
        None | Some(Ok(None)) => None,
        Some(Ok(Some(r))) => Some(r),
        Some(Err(_)) => return unsatisfiable(size, &snapshot, &entry.digest.to_hex()),
    };
    let (offset, len) = match range.map(|r| resolve_range(r, size)) {
        None => (0, size),
        Some(Ok(v)) => v,
        Some(Err(_)) => return unsatisfiable(size, &snapshot, &entry.digest.to_hex()),
    };

    let mut builder = Response::builder()
        .header(header::CONTENT_TYPE, "application/octet-stream")
        .header(header::ACCEPT_RANGES, "bytes")
        .header(header::CONTENT_LENGTH, len)
        .header(header::ETAG, format!("\"{}\"", entry.digest.to_hex()))
        .header(ASSET_DIGEST, entry.digest.to_hex())
        .header(MANIFEST_VERSION, snapshot.version());
    builder = if range.is_some() {
        builder
            .status(StatusCode::PARTIAL_CONTENT)
            .header(header::CONTENT_RANGE, format!("bytes {}-{}/{}", offset, offset + len - 1, size))
    } else {
        builder.status(StatusCode::OK)
    };

    if method == Method::HEAD || len == 0 {
        return builder.body(Body::empty()).unwrap_or_else(|_| status(StatusCode::INTERNAL_SERVER_ERROR, ""));
    }

    let reader = match snapshot.open(&path) {
        Ok(r) => r,
        Err(e) => {
            warn!(%path, error = %e, "cannot open asset");
            return status(StatusCode::INTERNAL_SERVER_ERROR, "asset unavailable\n");
        }
    };
    let mut file = tokio::fs::File::from_std(reader.into_file());
    if let Err(e) = file.seek(SeekFrom::Start(offset)).await {
        warn!(%path, error = %e, "seek failed");
        return status(StatusCode::INTERNAL_SERVER_ERROR, "asset unavailable\n");
    }

    let tracked = binding.filter(|_| entry.role == AssetRole::Image);
    if let Some(b) = &tracked {
        if b.mark_image_started() {
            // Let a just-finished TFTP transfer record its completion first.
            b.wait_transfers_idle(IDLE_WAIT).await;
            let e = BootEvent::new(b.mac, EventKind::ImageFirstByte, ctx.tracker.clock().now())
                .with_version(snapshot.version());
            ctx.tracker.submit(e);
        }
    }
    let reaches_end = offset + len == size;
    let version = snapshot.version();
    let body = stream::unfold(
        (file, len, tracked, ctx),
        move |(mut file, remaining, tracked, ctx)| async move {
            if remaining == 0 {
                return None;
            }
            let want = remaining.min(CHUNK_SIZE as u64) as usize;
            let mut buf = BytesMut::zeroed(want);
            if let Err(e) = file.read_exact(&mut buf).await {
                debug!(error = %e, "asset read failed mid-response");
                return Some((Err(e), (file, 0, None, ctx)));
            }
            let remaining = remaining - want as u64;
            if let Some(b) = &tracked {
                let total = b.add_image_bytes(want as u64);
                // The server may stop polling once Content-Length bytes are
                // out, so completion is noted with the last chunk.
                if remaining == 0 && reaches_end && b.mark_image_completed() {
                    let e = BootEvent::new(b.mac, EventKind::ImageComplete, ctx.tracker.clock().now())
                        .with_size(total)
                        .with_version(version);
                    ctx.tracker.submit(e);
                }
            }
            Some((Ok::<_, std::io::Error>(buf.freeze()), (file, remaining, tracked, ctx)))
        },
    );
    builder.body(Body::from_stream(body)).unwrap_or_else(|_| status(StatusCode::INTERNAL_SERVER_ERROR, ""))
}

fn unsatisfiable(size: u64, snapshot: &Snapshot, digest: &str) -> Response<Body> {
    let mut r = status(StatusCode::RANGE_NOT_SATISFIABLE, "range not satisfiable\n");
    let h = r.headers_mut();
    if let Ok(v) = HeaderValue::from_str(&format!("bytes */{size}")) {
        h.insert(header::CONTENT_RANGE, v);
    }
    if let Ok(v) = HeaderValue::from_str(digest) {
        h.insert(ASSET_DIGEST, v);
    }
    h.insert(MANIFEST_VERSION, HeaderValue::from(snapshot.version()));
    r
}

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Duration;

use serde::Serialize;

use super::session::{BootEvent, BootOutcome, BootSession, BootState, EventKind, FailureReason};
use crate::netproto::MacAddr;

/// Owns every boot session. Not thread-safe by design: the funnel in
/// [`super::funnel`] gives it a single consumer.
#[derive(Debug, Default)]
pub struct BootTracker {
    sessions: Vec<BootSession>,
    live: HashMap<MacAddr, usize>,
}

impl BootTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn replay<'a>(events: impl IntoIterator<Item = &'a BootEvent>) -> Self {
        let mut tracker = Self::new();
        for e in events {
            tracker.record_event(e);
        }
        tracker
    }

    pub fn record_event(&mut self, event: &BootEvent) -> &BootSession {
        let mac = event.client_id;
        let idx = match (self.live.get(&mac).copied(), event.kind) {
            (Some(idx), EventKind::DhcpDiscover) => {
                let session = &mut self.sessions[idx];
                match session.state {
                    BootState::Discovering | BootState::Offered => {
                        session.apply(event);
                        idx
                    }
                    _ => {
                        if !session.is_terminal() {
                            session.fail(FailureReason::Restarted, event.timestamp);
                        }
                        self.push(BootSession::start(mac, event.timestamp))
                    }
                }
            }
            (Some(idx), _) => {
                self.sessions[idx].apply(event);
                idx
            }
            (None, EventKind::DhcpDiscover) => self.push(BootSession::start(mac, event.timestamp)),
            (None, _) => self.push(BootSession::inferred(event)),
        };
        &self.sessions[idx]
    }

    fn push(&mut self, session: BootSession) -> usize {
        let mac = session.client_id;
        self.sessions.push(session);
        let idx = self.sessions.len() - 1;
        self.live.insert(mac, idx);
        idx
    }

    /// All sessions in creation order, including finished ones.
    pub fn sessions(&self) -> &[BootSession] {
        &self.sessions
    }

    pub fn current(&self, mac: &MacAddr) -> Option<&BootSession> {
        self.live.get(mac).map(|&i| &self.sessions[i])
    }

    /// Drops finished sessions; in-progress ones are kept.
    pub fn clear_finished(&mut self) {
        let kept: Vec<BootSession> = self.sessions.drain(..).filter(|s| !s.is_terminal()).collect();
        self.live = kept.iter().enumerate().map(|(i, s)| (s.client_id, i)).collect();
        self.sessions = kept;
    }

    pub fn report(&self) -> BootReport {
        BootReport::from_sessions(&self.sessions)
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SessionRow {
    pub client_id: MacAddr,
    pub state: BootState,
    pub result: String,
    pub manifest_version: Option<u64>,
    pub duration_s: Option<f64>,
    pub bytes_tftp: u64,
    pub bytes_image: u64,
    pub inferred: bool,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct BootReport {
    pub sessions: usize,
    pub booted: usize,
    pub failed: usize,
    pub in_progress: usize,
    pub p50_boot_s: Option<f64>,
    pub p95_boot_s: Option<f64>,
    pub total_bytes: u64,
    /// Bytes delivered to booted clients divided by their summed boot time.
    pub throughput_bytes_per_s: Option<f64>,
    pub rows: Vec<SessionRow>,
}

impl BootReport {
    pub fn from_sessions(sessions: &[BootSession]) -> Self {
        let mut durations: Vec<Duration> = sessions.iter().filter_map(|s| s.boot_duration()).collect();
        durations.sort();
        let booted_bytes: u64 = sessions
            .iter()
            .filter(|s| s.boot_duration().is_some())
            .map(|s| s.bytes_tftp + s.bytes_image)
            .sum();
        let booted_time: f64 = durations.iter().map(Duration::as_secs_f64).sum();
        let rows = sessions
            .iter()
            .map(|s| SessionRow {
                client_id: s.client_id,
                state: s.state,
                result: match &s.result {
                    BootOutcome::InProgress => "in_progress".into(),
                    BootOutcome::Booted => "booted".into(),
                    BootOutcome::Failed(reason) => format!("failed({reason})"),
                },
                manifest_version: s.manifest_version,
                duration_s: s.boot_duration().map(|d| d.as_secs_f64()),
                bytes_tftp: s.bytes_tftp,
                bytes_image: s.bytes_image,
                inferred: s.inferred,
            })
            .collect();
        BootReport {
            sessions: sessions.len(),
            booted: sessions.iter().filter(|s| s.state == BootState::Booted).count(),
            failed: sessions.iter().filter(|s| s.state == BootState::Failed).count(),
            in_progress: sessions.iter().filter(|s| !s.is_terminal()).count(),
            p50_boot_s: nearest_rank(&durations, 50.0).map(|d| d.as_secs_f64()),
            p95_boot_s: nearest_rank(&durations, 95.0).map(|d| d.as_secs_f64()),
            total_bytes: sessions.iter().map(|s| s.bytes_tftp + s.bytes_image).sum(),
            throughput_bytes_per_s: (booted_time > 0.0).then(|| booted_bytes as f64 / booted_time),
            rows,
        }
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<17}  {:<18}  {:>7}  {:>10}  {:>12}  {:>12}  result",
            "client", "state", "version", "boot_s", "tftp_bytes", "image_bytes"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<17}  {:<18}  {:>7}  {:>10}  {:>12}  {:>12}  {}{}",
                r.client_id.to_string(),
                format!("{:?}", r.state),
                r.manifest_version.map_or("-".into(), |v| v.to_string()),
                r.duration_s.map_or("-".into(), |d| format!("{d:.3}")),
                r.bytes_tftp,
                r.bytes_image,
                r.result,
                if r.inferred { " (inferred)" } else { "" },
            );
        }
        let pct = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.3}s"));
        let _ = writeln!(
            out,
            "sessions={} booted={} failed={} in_progress={} p50={} p95={} bytes={} throughput={}",
            self.sessions,
            self.booted,
            self.failed,
            self.in_progress,
            pct(self.p50_boot_s),
            pct(self.p95_boot_s),
            self.total_bytes,
            self.throughput_bytes_per_s
                .map_or("-".into(), |t| format!("{:.1} MB/s", t / 1e6)),
        );
        out
    }
}

/// Nearest-rank percentile of an ascending slice.
pub(crate) fn nearest_rank(sorted: &[Duration], pct: f64) -> Option<Duration> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

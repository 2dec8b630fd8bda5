use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tracing::warn;

use super::session::{BootEvent, BootSession, EventKind};
use super::tracker::{BootReport, BootTracker};
use crate::clock::SharedClock;
use crate::netproto::MacAddr;

enum Command {
    Event(BootEvent),
    Report(oneshot::Sender<BootReport>),
    Sessions(oneshot::Sender<Vec<BootSession>>),
    Flush(oneshot::Sender<()>),
}

/// Submission side of the tracker. Cheap to clone; sends never block.
#[derive(Clone, Debug)]
pub struct TrackerHandle {
    tx: mpsc::UnboundedSender<Command>,
    clock: SharedClock,
}

impl TrackerHandle {
    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    /// Stamps an event with the tracker's clock and queues it.
    pub fn record(&self, client: MacAddr, kind: EventKind) -> BootEvent {
        let event = BootEvent::new(client, kind, self.clock.now());
        self.submit(event.clone());
        event
    }

    pub fn submit(&self, event: BootEvent) {
        if self.tx.send(Command::Event(event)).is_err() {
            warn!("boot tracker stopped; dropping event");
        }
    }

    pub async fn report(&self) -> Option<BootReport> {
        let (tx, rx) = oneshot::channel();
        self.tx.send(Command::Report(tx)).ok()?;
        rx.await.ok()
    }

    pub async fn sessions(&self) -> Vec<BootSession> {
        let (tx, rx) = oneshot::channel();
        if self.tx.send(Command::Sessions(tx)).is_err() {
            return Vec::new();
        }
        rx.await.unwrap_or_default()
    }

    /// Resolves once every event submitted before the call is applied and
    /// written to the event log.
    pub async fn flush(&self) {
        let (tx, rx) = oneshot::channel();
        if self.tx.send(Command::Flush(tx)).is_ok() {
            let _ = rx.await;
        }
    }
}

/// Starts the single consumer that owns the session table. The task ends,
/// returning the tracker, once every handle is dropped.
pub fn spawn_tracker(
    clock: SharedClock,
    event_log: Option<&Path>,
) -> io::Result<(TrackerHandle, JoinHandle<BootTracker>)> {
    let mut log = match event_log {
        Some(path) => Some(BufWriter::new(
            OpenOptions::new().create(true).append(true).open(path)?,
        )),
        None => None,
    };
    let (tx, mut rx) = mpsc::unbounded_channel();
    let task = tokio::spawn(async move {
        let mut tracker = BootTracker::new();
        while let Some(cmd) = rx.recv().await {
            match cmd {
                Command::Event(event) => {
                    tracker.record_event(&event);
                    if let Some(w) = log.as_mut() {
                        append(w, &event);
                        // Keep the file current for readers such as `status`
                        // without a write per event under load.
                        if rx.is_empty() {
                            let _ = w.flush();
                        }
                    }
                }
                Command::Report(reply) => {
                    let _ = reply.send(tracker.report());
                }
                Command::Sessions(reply) => {
                    let _ = reply.send(tracker.sessions().to_vec());
                }
                Command::Flush(reply) => {
                    if let Some(w) = log.as_mut() {
                        let _ = w.flush();
                    }
                    let _ = reply.send(());
                }
            }
        }
        if let Some(mut w) = log {
            let _ = w.flush();
        }
        tracker
    });
    Ok((TrackerHandle { tx, clock }, task))
}

fn append(w: &mut BufWriter<File>, event: &BootEvent) {
    let line = serde_json::to_string(event).expect("event serializes");
    if let Err(e) = writeln!(w, "{line}") {
        warn!("event log write failed: {e}");
    }
}

/// Reads a line-delimited JSON event log. Blank lines are skipped.
pub fn read_event_log(path: &Path) -> io::Result<Vec<BootEvent>> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("{}:{}: {e}", path.display(), n + 1))
        })?;
        events.push(event);
    }
    Ok(events)
}

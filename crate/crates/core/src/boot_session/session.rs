use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::asset_store::AssetRole;
use crate::netproto::MacAddr;

/// Protocol milestones observed by the services.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    DhcpDiscover,
    DhcpOffer,
    DhcpRequest,
    DhcpAck,
    TftpRrq { role: AssetRole },
    TftpComplete { role: AssetRole },
    ImageFirstByte,
    ImageComplete,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EventKind::DhcpDiscover => f.write_str("dhcp_discover"),
            EventKind::DhcpOffer => f.write_str("dhcp_offer"),
            EventKind::DhcpRequest => f.write_str("dhcp_request"),
            EventKind::DhcpAck => f.write_str("dhcp_ack"),
            EventKind::TftpRrq { role } => write!(f, "tftp_rrq({role})"),
            EventKind::TftpComplete { role } => write!(f, "tftp_complete({role})"),
            EventKind::ImageFirstByte => f.write_str("image_first_byte"),
            EventKind::ImageComplete => f.write_str("image_complete"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootEvent {
    pub client_id: MacAddr,
    #[serde(flatten)]
    pub kind: EventKind,
    /// Bytes delivered, on completion events.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<u64>,
    /// Manifest version the client is pinned to, when the emitter knows it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<u64>,
    #[serde(rename = "t_us", with = "micros")]
    pub timestamp: Duration,
}

impl BootEvent {
    pub fn new(client_id: MacAddr, kind: EventKind, timestamp: Duration) -> Self {
        BootEvent { client_id, kind, size: None, version: None, timestamp }
    }

    pub fn with_size(mut self, size: u64) -> Self {
        self.size = Some(size);
        self
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = Some(version);
        self
    }
}

mod micros {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_micros() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_micros(u64::deserialize(d)?))
    }
}

/// Where a client is in the boot sequence. Variants are declared in the
/// only order they may be entered; `Failed` is reachable from anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootState {
    Discovering,
    Offered,
    Requested,
    Acked,
    LoadingBootloader,
    LoadingKernel,
    LoadingInitrd,
    FetchingImage,
    Booted,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", content = "reason", rename_all = "snake_case")]
pub enum BootOutcome {
    InProgress,
    Booted,
    Failed(FailureReason),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    /// An event arrived that the current state does not allow.
    ProtocolViolation { event: String, state: BootState },
    /// The client started over with a fresh DISCOVER before finishing.
    Restarted,
}

impl fmt::Display for FailureReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureReason::ProtocolViolation { event, state } => {
                write!(f, "protocol_violation: {event} in {state:?}")
            }
            FailureReason::Restarted => f.write_str("restarted"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Transition {
    pub state: BootState,
    #[serde(rename = "t_us", serialize_with = "micros::serialize")]
    pub at: Duration,
}

#[derive(Debug, Clone, Serialize)]
pub struct BootSession {
    pub client_id: MacAddr,
    pub state: BootState,
    pub transitions: Vec<Transition>,
    pub bytes_tftp: u64,
    pub bytes_image: u64,
    pub manifest_version: Option<u64>,
    pub result: BootOutcome,
    /// Created from a mid-sequence event for a client we never saw start.
    pub inferred: bool,
    completed: Vec<AssetRole>,
}

/// What an event does to a session.
enum Step {
    Enter(BootState),
    /// Retransmit or repeat of a milestone already reached.
    Stay,
    Violation,
}

impl BootSession {
    pub(crate) fn start(client_id: MacAddr, at: Duration) -> Self {
        BootSession {
            client_id,
            state: BootState::Discovering,
            transitions: vec![Transition { state: BootState::Discovering, at }],
            bytes_tftp: 0,
            bytes_image: 0,
            manifest_version: None,
            result: BootOutcome::InProgress,
            inferred: false,
            completed: Vec::new(),
        }
    }

    /// A session for a client first seen mid-boot, placed directly in the
    /// state its first event implies.
    pub(crate) fn inferred(event: &BootEvent) -> Self {
        let state = match event.kind {
            EventKind::DhcpDiscover => BootState::Discovering,
            EventKind::DhcpOffer => BootState::Offered,
            EventKind::DhcpRequest => BootState::Requested,
            EventKind::DhcpAck => BootState::Acked,
            EventKind::TftpRrq { role: AssetRole::Kernel } => BootState::LoadingKernel,
            EventKind::TftpRrq { role: AssetRole::Initrd } => BootState::LoadingInitrd,
            EventKind::TftpRrq { .. } | EventKind::TftpComplete { .. } => BootState::LoadingBootloader,
            EventKind::ImageFirstByte | EventKind::ImageComplete => BootState::FetchingImage,
        };
        let mut session = BootSession::start(event.client_id, event.timestamp);
        session.inferred = true;
        session.state = state;
        session.transitions[0].state = state;
        session.apply(event);
        session
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.state, BootState::Booted | BootState::Failed)
    }

    pub fn started_at(&self) -> Duration {
        self.transitions[0].at
    }

    /// Discovering→Booted time. Absent for unfinished sessions and for
    /// inferred ones, whose start was never observed.
    pub fn boot_duration(&self) -> Option<Duration> {
        if self.state != BootState::Booted || self.inferred {
            return None;
        }
        let end = self.transitions.last()?.at;
        Some(end.saturating_sub(self.started_at()))
    }

    fn has_completed(&self, role: AssetRole) -> bool {
        self.completed.contains(&role)
    }

    fn step(&self, kind: EventKind) -> Step {
        use BootState::*;
        match (self.state, kind) {
            (Discovering | Offered, EventKind::DhcpDiscover) => Step::Stay,
            (Discovering, EventKind::DhcpOffer) => Step::Enter(Offered),
            (Offered, EventKind::DhcpOffer) => Step::Stay,
            (Offered, EventKind::DhcpRequest) => Step::Enter(Requested),
            (Requested | Acked, EventKind::DhcpRequest) => Step::Stay,
            (Requested, EventKind::DhcpAck) => Step::Enter(Acked),
            (Acked, EventKind::DhcpAck) => Step::Stay,

            (Acked, EventKind::TftpRrq { role: AssetRole::Bootloader }) => Step::Enter(LoadingBootloader),
            (LoadingBootloader, EventKind::TftpRrq { role: AssetRole::Bootloader }) => Step::Stay,
            (LoadingBootloader, EventKind::TftpRrq { role: AssetRole::Config })
                if self.has_completed(AssetRole::Bootloader) =>
            {
                Step::Stay
            }
            (LoadingBootloader, EventKind::TftpComplete { role: AssetRole::Bootloader | AssetRole::Config }) => {
                Step::Stay
            }
            (LoadingBootloader, EventKind::TftpRrq { role: AssetRole::Kernel })
                if self.has_completed(AssetRole::Bootloader) =>
            {
                Step::Enter(LoadingKernel)
            }
            (LoadingKernel, EventKind::TftpRrq { role: AssetRole::Kernel }) => Step::Stay,
            (LoadingKernel, EventKind::TftpComplete { role: AssetRole::Kernel }) => Step::Stay,
            (LoadingKernel, EventKind::TftpRrq { role: AssetRole::Initrd })
                if self.has_completed(AssetRole::Kernel) =>
            {
                Step::Enter(LoadingInitrd)
            }
            (LoadingInitrd, EventKind::TftpRrq { role: AssetRole::Initrd }) => Step::Stay,
            (LoadingInitrd, EventKind::TftpComplete { role: AssetRole::Initrd }) => Step::Stay,
            (LoadingInitrd, EventKind::ImageFirstByte) if self.has_completed(AssetRole::Initrd) => {
                Step::Enter(FetchingImage)
            }
            (FetchingImage, EventKind::ImageFirstByte) => Step::Stay,
            (FetchingImage, EventKind::ImageComplete) => Step::Enter(Booted),
            _ => Step::Violation,
        }
    }

    /// Applies one event. Returns true if the state changed.
    pub(crate) fn apply(&mut self, event: &BootEvent) -> bool {
        if self.is_terminal() {
            return false;
        }
        let at = event.timestamp.max(self.transitions.last().map_or(Duration::ZERO, |t| t.at));
        match self.step(event.kind) {
            Step::Violation => {
                self.fail(
                    FailureReason::ProtocolViolation { event: event.kind.to_string(), state: self.state },
                    at,
                );
                true
            }
            step => {
                self.account(event);
                match step {
                    Step::Enter(state) => {
                        self.state = state;
                        self.transitions.push(Transition { state, at });
                        if state == BootState::Booted {
                            self.result = BootOutcome::Booted;
                        }
                        true
                    }
                    _ => false,
                }
            }
        }
    }

    fn account(&mut self, event: &BootEvent) {
        if self.manifest_version.is_none() {
            self.manifest_version = event.version;
        }
        match event.kind {
            EventKind::TftpComplete { role } => {
                if !self.has_completed(role) {
                    self.completed.push(role);
                    self.bytes_tftp += event.size.unwrap_or(0);
                }
            }
            EventKind::ImageComplete => self.bytes_image += event.size.unwrap_or(0),
            _ => {}
        }
    }

    pub(crate) fn fail(&mut self, reason: FailureReason, at: Duration) {
        let at = at.max(self.transitions.last().map_or(Duration::ZERO, |t| t.at));
        self.state = BootState::Failed;
        self.transitions.push(Transition { state: BootState::Failed, at });
        self.result = BootOutcome::Failed(reason);
    }
}

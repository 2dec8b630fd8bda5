use std::io;
use std::time::Duration;

use thiserror::Error;

use crate::asset_store::{normalize_virtual_path, AssetEntry, AssetReader, Snapshot, StoreError};
use crate::netproto::{TftpErrorCode, TftpOption, TftpPacket, TftpRequest, BLKSIZE_MIN, DEFAULT_BLKSIZE};

/// Server-side transfer limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TftpPolicy {
    pub blksize_max: u16,
    /// Initial retransmission timeout, used unless the client negotiates one.
    pub timeout: Duration,
    /// Ceiling for the doubling backoff.
    pub max_timeout: Duration,
    pub retries: u32,
}

impl Default for TftpPolicy {
    fn default() -> Self {
        TftpPolicy {
            blksize_max: 1428,
            timeout: Duration::from_secs(1),
            max_timeout: Duration::from_secs(8),
            retries: 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum RrqError {
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("access violation: {0}")]
    AccessViolation(String),
    #[error("unsupported transfer mode {0:?}")]
    ModeUnsupported(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("reading asset: {0}")]
    Read(#[from] io::Error),
}

impl RrqError {
    /// The ERROR packet that tells the client why.
    pub fn to_packet(&self) -> TftpPacket {
        let code = match self {
            RrqError::FileNotFound(_) => TftpErrorCode::FileNotFound,
            RrqError::AccessViolation(_) => TftpErrorCode::AccessViolation,
            RrqError::ModeUnsupported(_) | RrqError::Store(_) | RrqError::Read(_) => TftpErrorCode::NotDefined,
        };
        let message = match self {
            RrqError::ModeUnsupported(_) => "only octet mode is supported".to_string(),
            RrqError::Store(_) | RrqError::Read(_) => "internal error".to_string(),
            other => other.to_string(),
        };
        TftpPacket::error(code, message)
    }
}

/// Random-access bytes a transfer is served from.
pub trait BlockSource: Send {
    fn size(&self) -> u64;
    /// Fills `buf` from `offset`, short only at end of data.
    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> io::Result<usize>;
}

impl BlockSource for AssetReader {
    fn size(&self) -> u64 {
        AssetReader::size(self)
    }

    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> io::Result<usize> {
        AssetReader::read_at(self, offset, buf).map_err(io::Error::other)
    }
}

impl BlockSource for Vec<u8> {
    fn size(&self) -> u64 {
        self.len() as u64
    }

    fn read_at(&mut self, offset: u64, buf: &mut [u8]) -> io::Result<usize> {
        let start = (offset as usize).min(self.len());
        let n = buf.len().min(self.len() - start);
        buf[..n].copy_from_slice(&self[start..start + n]);
        Ok(n)
    }
}

/// Resolves an RRQ filename against a snapshot.
pub fn resolve(snapshot: &Snapshot, filename: &str) -> Result<AssetReader, RrqError> {
    let path = normalize_virtual_path(filename).ok_or_else(|| RrqError::AccessViolation(filename.to_string()))?;
    if snapshot.entry(&path).is_none() {
        return Err(RrqError::FileNotFound(path));
    }
    Ok(snapshot.open(&path)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AckOutcome {
    Data(TftpPacket),
    /// The client acknowledged the final block.
    Complete,
}

#[derive(Debug, Error)]
pub enum AckError {
    /// Duplicate or out-of-order ACK; ignored without resending.
    #[error("stale ACK {got}, expecting {expected}")]
    StaleAck { got: u16, expected: u16 },
    #[error("transfer already finished")]
    Finished,
    #[error("reading asset: {0}")]
    Read(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimeoutAction {
    Retransmit(TftpPacket),
    Abort,
    /// Nothing outstanding.
    Idle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// OACK sent, waiting for ACK 0.
    Negotiating,
    Sending,
    Complete,
    Aborted,
}

/// One read transfer, from RRQ to the final ACK. Pure state machine: the
/// caller owns the socket and the clock.
pub struct TransferSession<S> {
    source: S,
    blksize: u16,
    tsize: Option<u64>,
    /// Absolute number of the last DATA block sent (0 before the first).
    sent: u64,
    last_payload_len: usize,
    last_packet: TftpPacket,
    phase: Phase,
    retries: u32,
    retries_left: u32,
    base_timeout: Duration,
    timeout: Duration,
    max_timeout: Duration,
}

impl<S: BlockSource> TransferSession<S> {
    /// Starts a transfer and returns the first packet to send: an OACK if
    /// any requested option was accepted, DATA block 1 otherwise.
    pub fn handle_rrq(req: &TftpRequest, source: S, policy: &TftpPolicy) -> Result<(Self, TftpPacket), RrqError> {
        if !req.mode.eq_ignore_ascii_case("octet") {
            return Err(RrqError::ModeUnsupported(req.mode.clone()));
        }
        let mut accepted = Vec::new();
        let mut blksize = DEFAULT_BLKSIZE;
        let mut tsize = None;
        let mut timeout = policy.timeout;
        for o in &req.options {
            let name = o.name.to_ascii_lowercase();
            match name.as_str() {
                "blksize" => {
                    if let Ok(v) = o.value.parse::<u64>() {
                        if v >= u64::from(BLKSIZE_MIN) {
                            blksize = v.min(u64::from(policy.blksize_max)) as u16;
                            accepted.push(TftpOption::new(name, blksize));
                        }
                    }
                }
                "tsize" => {
                    if o.value.parse::<u64>().is_ok() {
                        tsize = Some(source.size());
                        accepted.push(TftpOption::new(name, source.size()));
                    }
                }
                "timeout" => {
                    if let Ok(v @ 1..=255) = o.value.parse::<u64>() {
                        timeout = Duration::from_secs(v);
                        accepted.push(TftpOption::new(name, v));
                    }
                }
                _ => {}
            }
        }
        let mut session = TransferSession {
            source,
            blksize,
            tsize,
            sent: 0,
            last_payload_len: 0,
            last_packet: TftpPacket::Ack { block: 0 },
            phase: Phase::Negotiating,
            retries: policy.retries,
            retries_left: policy.retries,
            base_timeout: timeout,
            timeout,
            max_timeout: policy.max_timeout.max(timeout),
        };
        let first = if accepted.is_empty() {
            session.phase = Phase::Sending;
            session.send_next()?
        } else {
            TftpPacket::Oack { options: accepted }
        };
        session.last_packet = first.clone();
        Ok((session, first))
    }

    pub fn blksize(&self) -> u16 {
        self.blksize
    }

    pub fn tsize(&self) -> Option<u64> {
        self.tsize
    }

    pub fn size(&self) -> u64 {
        self.source.size()
    }

    pub fn is_complete(&self) -> bool {
        self.phase == Phase::Complete
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.phase, Phase::Complete | Phase::Aborted)
    }

    /// Absolute number of DATA blocks sent so far.
    pub fn blocks_sent(&self) -> u64 {
        self.sent
    }

    /// 16-bit block number the next ACK must carry.
    pub fn expected_ack(&self) -> u16 {
        self.sent as u16
    }

    pub fn current_timeout(&self) -> Duration {
        self.timeout
    }

    pub fn last_packet(&self) -> &TftpPacket {
        &self.last_packet
    }

    fn send_next(&mut self) -> io::Result<TftpPacket> {
        let offset = self.sent * u64::from(self.blksize);
        let mut payload = vec![0u8; self.blksize as usize];
        let n = self.source.read_at(offset, &mut payload)?;
        payload.truncate(n);
        self.sent += 1;
        self.last_payload_len = n;
        Ok(TftpPacket::Data { block: self.sent as u16, payload })
    }

    /// Advances on the client's ACK.
    pub fn next_data(&mut self, block: u16) -> Result<AckOutcome, AckError> {
        if self.is_finished() {
            return Err(AckError::Finished);
        }
        let expected = self.expected_ack();
        if block != expected {
            return Err(AckError::StaleAck { got: block, expected });
        }
        self.retries_left = self.retries;
        self.timeout = self.base_timeout;
        if self.phase == Phase::Sending && self.last_payload_len < self.blksize as usize {
            self.phase = Phase::Complete;
            return Ok(AckOutcome::Complete);
        }
        self.phase = Phase::Sending;
        let p = self.send_next()?;
        self.last_packet = p.clone();
        Ok(AckOutcome::Data(p))
    }

    /// The retransmission timer fired without the expected ACK.
    pub fn on_timeout(&mut self) -> TimeoutAction {
        if self.is_finished() {
            return TimeoutAction::Idle;
        }
        if self.retries_left == 0 {
            self.phase = Phase::Aborted;
            return TimeoutAction::Abort;
        }
        self.retries_left -= 1;
        self.timeout = (self.timeout * 2).min(self.max_timeout);
        TimeoutAction::Retransmit(self.last_packet.clone())
    }

    /// Marks the transfer abandoned, e.g. on an ERROR from the client.
    pub fn abort(&mut self) {
        if !self.is_complete() {
            self.phase = Phase::Aborted;
        }
    }
}

/// Transfer session over a store asset.
pub type AssetSession = TransferSession<AssetReader>;

impl AssetSession {
    pub fn entry(&self) -> &AssetEntry {
        self.source.entry()
    }

    pub fn version(&self) -> u64 {
        self.source.version()
    }
}

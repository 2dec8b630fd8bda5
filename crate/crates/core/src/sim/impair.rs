use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest as _, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Inbound,
    Outbound,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub dir: Direction,
    pub packet: String,
    pub dropped: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ShimCounters {
    pub passed_in: u64,
    pub passed_out: u64,
    pub dropped_in: u64,
    pub dropped_out: u64,
}

/// Drops datagrams with probability `loss`.
///
/// A decision is a function of the seed, the direction, the packet's
/// label and how many times that label was seen before, so a packet
/// retransmitted by the peer a different number of times does not shift
/// the fate of every later packet.
pub struct Impairment {
    seed: u64,
    loss: f64,
    seen: HashMap<(Direction, String), u32>,
    hasher: Sha256,
    counters: ShimCounters,
    trace: Option<Vec<TraceEntry>>,
}

impl Impairment {
    pub fn new(seed: u64, loss: f64, keep_trace: bool) -> Self {
        Impairment {
            seed,
            loss,
            seen: HashMap::new(),
            hasher: Sha256::new(),
            counters: ShimCounters::default(),
            trace: keep_trace.then(Vec::new),
        }
    }

    /// True if the datagram survives.
    pub fn pass(&mut self, dir: Direction, label: &str) -> bool {
        let dropped = self.loss > 0.0 && {
            let n = self.seen.entry((dir, label.to_string())).or_insert(0);
            *n += 1;
            let mut key = Sha256::new();
            key.update(self.seed.to_le_bytes());
            key.update([dir as u8]);
            key.update(n.to_le_bytes());
            key.update(label.as_bytes());
            let seed: [u8; 32] = key.finalize().into();
            ChaCha8Rng::from_seed(seed).random::<f64>() < self.loss
        };
        self.hasher.update([dir as u8, dropped as u8]);
        self.hasher.update(label.as_bytes());
        self.hasher.update([0]);
        let c = &mut self.counters;
        match (dir, dropped) {
            (Direction::Inbound, false) => c.passed_in += 1,
            (Direction::Inbound, true) => c.dropped_in += 1,
            (Direction::Outbound, false) => c.passed_out += 1,
            (Direction::Outbound, true) => c.dropped_out += 1,
        }
        if let Some(t) = &mut self.trace {
            t.push(TraceEntry { dir, packet: label.to_string(), dropped });
        }
        !dropped
    }

    pub fn counters(&self) -> ShimCounters {
        self.counters
    }

    /// Hex digest over every decision so far, in order.
    pub fn trace_digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    pub fn take_trace(&mut self) -> Vec<TraceEntry> {
        self.trace.take().unwrap_or_default()
    }
}

//! Pluggable message transports behind one interface.
//!
//! Three kinds share the exchange wire format:
//! - [`sim`]: a deterministic discrete-event switch-contention simulator for
//!   workload experiments (plus an instant-delivery recording mode used when
//!   queries run under the `sim` transport);
//! - [`inprocess`]: crossbeam channels, one directed channel per node pair;
//! - [`socket`]: loopback TCP streams with length-prefixed frames.
//!
//! Wire message: `[operator_id: u32 LE][flags: u8][bytes_used: u32 LE]`
//! followed by `bytes_used` payload bytes. The socket transport additionally
//! prefixes each frame with its total length as u32 LE.

pub mod inprocess;
pub mod sim;
pub mod socket;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exchange::SendState;

pub type NodeId = usize;

/// Wire header size: operator id + flags + bytes_used.
pub const WIRE_HEADER_BYTES: usize = 4 + 1 + 4;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("unknown target node {0}")]
    UnknownTarget(NodeId),
    #[error("send queue to node {0} is full")]
    WouldBlock(NodeId),
    #[error("peer {peer} disconnected: {reason}")]
    PeerDisconnected { peer: NodeId, reason: String },
    #[error("transport startup failed: {0}")]
    Startup(String),
    #[error("malformed frame from node {0}")]
    MalformedFrame(NodeId),
    #[error("io error talking to node {peer}: {source}")]
    Io {
        peer: NodeId,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    Simulated,
    InProcess,
    Socket,
}

impl std::str::FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sim" | "simulated" => Ok(TransportKind::Simulated),
            "inprocess" | "in-process" => Ok(TransportKind::InProcess),
            "socket" => Ok(TransportKind::Socket),
            other => Err(format!("unknown transport {other:?} (sim|inprocess|socket)")),
        }
    }
}

/// How send completions are surfaced to the multiplexer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventMode {
    /// Deliver each completion as soon as it exists.
    #[default]
    Event,
    /// Buffer completions and deliver them in batches.
    Poll,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportConfig {
    pub kind: TransportKind,
    /// Link bandwidth in bytes/second (simulated kind).
    pub link_bandwidth: f64,
    /// Propagation latency added to deliveries (simulated kind).
    pub base_latency: Duration,
    /// Outstanding message credits a receiver grants per sender (simulated).
    pub receiver_credit_limit: u32,
    pub event_mode: EventMode,
    /// Batch size for poll-mode completion delivery.
    pub completion_batch: u32,
    /// Bounded per-target send queue length (in-process kind).
    pub send_queue_len: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            kind: TransportKind::InProcess,
            link_bandwidth: 4e9,
            base_latency: Duration::ZERO,
            receiver_credit_limit: 4,
            event_mode: EventMode::Event,
            completion_batch: 16,
            send_queue_len: 4096,
        }
    }
}

impl TransportConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.kind == TransportKind::Simulated {
            if self.link_bandwidth <= 0.0 {
                return Err("simulated transport needs positive bandwidth".into());
            }
            if self.receiver_credit_limit == 0 {
                return Err("receiver_credit_limit must be >= 1".into());
            }
        }
        Ok(())
    }
}

/// Token correlating a `post_send` with its completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SendToken(pub u64);

/// A frame handed to the transport for sending. Data frames reference the
/// pooled buffer without copying; control frames own their bytes.
pub enum OutboundFrame {
    Data(Arc<SendState>),
    Control { operator_id: u32, flags: u8, payload: Vec<u8> },
}

impl OutboundFrame {
    pub fn wire_bytes(&self) -> Vec<u8> {
        match self {
            OutboundFrame::Data(state) => state.with_wire(|op, flags, payload| {
                encode_frame(op, flags, payload)
            }),
            OutboundFrame::Control { operator_id, flags, payload } => {
                encode_frame(*operator_id, *flags, payload)
            }
        }
    }

    pub fn payload_len(&self) -> usize {
        match self {
            OutboundFrame::Data(state) => state.bytes_used(),
            OutboundFrame::Control { payload, .. } => payload.len(),
        }
    }
}

/// A frame received from a peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InboundFrame {
    pub from: NodeId,
    pub operator_id: u32,
    pub flags: u8,
    pub payload: Vec<u8>,
}

#[derive(Debug)]
pub enum TransportEvent {
    Inbound(InboundFrame),
    SendComplete(SendToken),
}

pub fn encode_frame(operator_id: u32, flags: u8, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(WIRE_HEADER_BYTES + payload.len());
    out.extend_from_slice(&operator_id.to_le_bytes());
    out.push(flags);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

pub fn decode_frame(from: NodeId, bytes: &[u8]) -> Result<InboundFrame, TransportError> {
    if bytes.len() < WIRE_HEADER_BYTES {
        return Err(TransportError::MalformedFrame(from));
    }
    let operator_id = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let flags = bytes[4];
    let bytes_used = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() != WIRE_HEADER_BYTES + bytes_used {
        return Err(TransportError::MalformedFrame(from));
    }
    Ok(InboundFrame { from, operator_id, flags, payload: bytes[WIRE_HEADER_BYTES..].to_vec() })
}

/// One node's endpoint of a connected mesh. Driven by the node's multiplexer
/// thread only; all methods take `&mut self`.
pub trait Transport: Send {
    fn node(&self) -> NodeId;

    fn node_count(&self) -> usize;

    /// Queue a frame for `target`. A completion event for the returned token
    /// is delivered exactly once, after the transport is done with the
    /// buffer; the buffer must stay immutable until then.
    fn post_send(&mut self, target: NodeId, frame: OutboundFrame)
        -> Result<SendToken, TransportError>;

    /// Collect pending events, waiting at most `wait` for the first one.
    fn poll(&mut self, wait: Duration) -> Result<Vec<TransportEvent>, TransportError>;

    /// Deliver any completions still buffered (poll mode batches).
    fn drain_completions(&mut self) -> Vec<TransportEvent>;

    /// Directed connections this endpoint owns (n − 1 in a full mesh).
    fn connection_count(&self) -> usize;
}

/// A fully connected transport group, one endpoint per node.
pub struct Mesh {
    pub endpoints: Vec<Box<dyn Transport>>,
    /// Present on recording meshes (queries under the simulated transport).
    pub recorder: Option<Arc<sim::ShuffleRecorder>>,
}

impl Mesh {
    /// Total directed connections in the group.
    pub fn directed_connections(&self) -> usize {
        self.endpoints.iter().map(|e| e.connection_count()).sum()
    }
}

/// Open a connected transport group of `n` nodes.
pub fn open_mesh(n: usize, config: &TransportConfig) -> Result<Mesh, TransportError> {
    config.validate().map_err(TransportError::Startup)?;
    match config.kind {
        TransportKind::InProcess => Ok(inprocess::open(n, config)),
        TransportKind::Socket => socket::open(n, config),
        // Queries over the "simulated" transport run on the instant-delivery
        // recording mesh; contention timing comes from replaying the recorded
        // workload through the event simulator afterwards.
        TransportKind::Simulated => Ok(sim::open_recording(n, config)),
    }
}

//! Decoupled exchange operators and the message/pool lifecycle.
//!
//! An exchange operator never talks to peer operators; it serializes tuples
//! into pooled messages and hands full messages to its node's multiplexer.
//! Each worker keeps its own set of open messages (one per target node), so
//! the hot path takes no locks. Broadcast messages are serialized once and
//! queued to every remote node under a retain counter; the buffer returns to
//! its origin pool when the counter reaches zero.

use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::codec::{self, CodecError, TupleBatch, WireLayout};
use crate::hash::{crc32_hash, key_bytes, partition_for};

/// Reserved operator id carried by sync frames.
pub const SYNC_OPERATOR_ID: u32 = 0xFFFF_FFFF;
/// Reserved operator id for the implicit result gather to node 0.
pub const GATHER_OPERATOR_ID: u32 = 0xFFFF_FFFE;

/// Wire header flag bits.
pub const FLAG_LAST: u8 = 0b0000_0001;
pub const FLAG_SYNC: u8 = 0b0000_0010;
/// Termination marker: the sender has drained every send queue and will
/// transmit nothing further (scheduled mode teardown).
pub const FLAG_DONE: u8 = 0b0000_0100;

#[derive(Debug, Error)]
pub enum ExchangeError {
    #[error("message pool exhausted (region {region}): no buffer within {waited_ms} ms")]
    ShuffleStall { region: usize, waited_ms: u64 },
    #[error("tuple of {tuple_bytes} bytes exceeds message capacity {capacity}")]
    OversizeTuple { tuple_bytes: usize, capacity: usize },
    #[error("exchange operator {operator_id} finished twice")]
    DoubleFinish { operator_id: u32 },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// A pooled, fixed-capacity message buffer.
///
/// The local header (pool region, capacity, generation) never leaves the
/// node; only the wire header (operator id, flags, payload length) and the
/// payload are transmitted.
#[derive(Debug)]
pub struct MessageBuf {
    region: usize,
    capacity: usize,
    operator_id: u32,
    last: bool,
    payload: Vec<u8>,
    /// Bumped on every mutation; lets the send path assert the buffer was
    /// not touched between post and completion.
    generation: u64,
}

impl MessageBuf {
    fn new(region: usize, capacity: usize) -> Self {
        MessageBuf {
            region,
            capacity,
            operator_id: 0,
            last: false,
            payload: Vec::with_capacity(capacity),
            generation: 0,
        }
    }

    pub fn region(&self) -> usize {
        self.region
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn operator_id(&self) -> u32 {
        self.operator_id
    }

    pub fn is_last(&self) -> bool {
        self.last
    }

    pub fn bytes_used(&self) -> usize {
        self.payload.len()
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn set_operator(&mut self, operator_id: u32) {
        self.operator_id = operator_id;
        self.generation += 1;
    }

    pub fn set_last(&mut self, last: bool) {
        self.last = last;
        self.generation += 1;
    }

    pub fn flags(&self) -> u8 {
        if self.last {
            FLAG_LAST
        } else {
            0
        }
    }

    /// Payload buffer for in-place serialization. Callers must keep the
    /// payload within `capacity`; the writer enforces this.
    pub(crate) fn payload_mut(&mut self) -> &mut Vec<u8> {
        self.generation += 1;
        &mut self.payload
    }

    /// Replace the payload with a copy of `bytes` (receive path).
    pub fn payload_from(&mut self, bytes: &[u8]) {
        self.payload.clear();
        self.payload.extend_from_slice(bytes);
        self.generation += 1;
    }

    fn reset(&mut self) {
        self.payload.clear();
        self.operator_id = 0;
        self.last = false;
        self.generation += 1;
    }
}

#[derive(Debug, Default)]
struct PoolState {
    free: Vec<MessageBuf>,
    allocated: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolStats {
    pub allocated: usize,
    pub free: usize,
}

/// Free list of message buffers for one NUMA region of one node.
///
/// Buffers are allocated lazily up to `max_messages`; `acquire` blocks up to
/// the configured timeout when the pool is exhausted (shuffle backpressure).
#[derive(Debug)]
pub struct MessagePool {
    region: usize,
    message_capacity: usize,
    max_messages: usize,
    acquire_timeout: Duration,
    state: Mutex<PoolState>,
    available: Condvar,
}

impl MessagePool {
    pub fn new(
        region: usize,
        message_capacity: usize,
        max_messages: usize,
        acquire_timeout: Duration,
    ) -> Arc<Self> {
        Arc::new(MessagePool {
            region,
            message_capacity,
            max_messages,
            acquire_timeout,
            state: Mutex::new(PoolState::default()),
            available: Condvar::new(),
        })
    }

    pub fn region(&self) -> usize {
        self.region
    }

    pub fn message_capacity(&self) -> usize {
        self.message_capacity
    }

    pub fn acquire(&self) -> Result<MessageBuf, ExchangeError> {
        let mut state = self.state.lock().unwrap();
        loop {
            if let Some(buf) = state.free.pop() {
                return Ok(buf);
            }
            if state.allocated < self.max_messages {
                state.allocated += 1;
                return Ok(MessageBuf::new(self.region, self.message_capacity));
            }
            let (next, timeout) = self
                .available
                .wait_timeout(state, self.acquire_timeout)
                .unwrap();
            state = next;
            if timeout.timed_out() && state.free.is_empty() {
                return Err(ExchangeError::ShuffleStall {
                    region: self.region,
                    waited_ms: self.acquire_timeout.as_millis() as u64,
                });
            }
        }
    }

    /// Non-blocking acquire; the multiplexer uses this so it can keep
    /// processing completions (which return buffers) while a pool is empty.
    pub fn try_acquire(&self) -> Option<MessageBuf> {
        let mut state = self.state.lock().unwrap();
        if let Some(buf) = state.free.pop() {
            return Some(buf);
        }
        if state.allocated < self.max_messages {
            state.allocated += 1;
            return Some(MessageBuf::new(self.region, self.message_capacity));
        }
        None
    }

    pub fn acquire_timeout(&self) -> Duration {
        self.acquire_timeout
    }

    pub fn release(&self, mut buf: MessageBuf) {
        debug_assert_eq!(buf.region, self.region, "buffer returned to foreign pool");
        buf.reset();
        let mut state = self.state.lock().unwrap();
        state.free.push(buf);
        drop(state);
        self.available.notify_one();
    }

    pub fn stats(&self) -> PoolStats {
        let state = self.state.lock().unwrap();
        PoolStats { allocated: state.allocated, free: state.free.len() }
    }
}

/// A message queued for sending, shared between the queue entries of a
/// broadcast. The retain counter counts pending transport sends; when it
/// drops to zero the buffer goes back to its origin pool.
#[derive(Debug)]
pub struct SendState {
    buf: Mutex<Option<MessageBuf>>,
    retain: AtomicU32,
    generation_at_enqueue: AtomicU64,
    pool: Arc<MessagePool>,
}

impl SendState {
    pub fn new(buf: MessageBuf, retain: u32, pool: Arc<MessagePool>) -> Arc<Self> {
        let generation = buf.generation();
        Arc::new(SendState {
            buf: Mutex::new(Some(buf)),
            retain: AtomicU32::new(retain),
            generation_at_enqueue: AtomicU64::new(generation),
            pool,
        })
    }

    pub fn retain_count(&self) -> u32 {
        self.retain.load(Ordering::Acquire)
    }

    /// Run `f` over the wire view (operator id, flags, payload) of the
    /// buffer. Panics if the buffer already returned to its pool.
    pub fn with_wire<R>(&self, f: impl FnOnce(u32, u8, &[u8]) -> R) -> R {
        let guard = self.buf.lock().unwrap();
        let buf = guard.as_ref().expect("message already released");
        f(buf.operator_id(), buf.flags(), buf.payload())
    }

    pub fn bytes_used(&self) -> usize {
        self.with_wire(|_, _, payload| payload.len())
    }

    /// Take the buffer out for local loopback delivery (no transport send).
    /// Only valid while this is the sole reference.
    pub fn take_for_local(&self) -> MessageBuf {
        let prev = self.retain.swap(0, Ordering::AcqRel);
        assert_eq!(prev, 1, "local take requires exactly one pending reference");
        self.buf.lock().unwrap().take().expect("message already released")
    }

    /// Drop one send reference; at zero, assert the buffer was untouched in
    /// flight and return it to its origin pool.
    pub fn complete_one(&self) {
        let prev = self.retain.fetch_sub(1, Ordering::AcqRel);
        assert!(prev > 0, "completion without matching retain");
        if prev == 1 {
            let mut guard = self.buf.lock().unwrap();
            let buf = guard.take().expect("message released twice");
            assert_eq!(
                buf.generation(),
                self.generation_at_enqueue.load(Ordering::Acquire),
                "message buffer mutated while queued for send"
            );
            assert_eq!(self.retain.load(Ordering::Acquire), 0);
            self.pool.release(buf);
        }
    }
}

/// How an exchange routes tuples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExchangeKind {
    /// CRC32-partition rows by the given key column indices.
    HashPartition { key_columns: Vec<usize> },
    /// Serialize once, send to every remote node.
    Broadcast,
    /// Send everything to one node (the implicit result gather).
    Gather { target: usize },
}

/// Where a full message goes: enqueued to the multiplexer.
pub enum Outbound {
    /// One message for one target node (may be the local node).
    Unicast { target: usize, message: Arc<SendState> },
    /// One shared message for every remote node, plus a local copy delivered
    /// through the receive path. Carries retain = max(n−1, 1): one reference
    /// per remote send; in a single-node cluster (no remote sends) the
    /// multiplexer drops the single reference itself after the local copy.
    Broadcast { message: Arc<SendState> },
}

/// Sink the exchange writer pushes completed messages into. Implemented by
/// the multiplexer; tests use a plain queue.
pub trait OutboundSink {
    fn enqueue(&self, outbound: Outbound);
}

/// Shared per-node state of one logical exchange operator: guards the
/// one-shot finish protocol.
#[derive(Debug)]
pub struct LogicalExchange {
    operator_id: u32,
    finished: std::sync::atomic::AtomicBool,
    /// Tuples consumed by all local writers, for metrics.
    tuples_in: AtomicUsize,
}

impl LogicalExchange {
    pub fn new(operator_id: u32) -> Arc<Self> {
        Arc::new(LogicalExchange {
            operator_id,
            finished: std::sync::atomic::AtomicBool::new(false),
            tuples_in: AtomicUsize::new(0),
        })
    }

    pub fn operator_id(&self) -> u32 {
        self.operator_id
    }

    pub fn tuples_in(&self) -> usize {
        self.tuples_in.load(Ordering::Relaxed)
    }

    /// Mark the operator finished; the node-level leader calls this exactly
    /// once after the local pipeline barrier.
    pub fn mark_finished(&self) -> Result<(), ExchangeError> {
        if self.finished.swap(true, Ordering::AcqRel) {
            return Err(ExchangeError::DoubleFinish { operator_id: self.operator_id });
        }
        Ok(())
    }
}

/// Worker-private writer for one exchange operator.
///
/// Holds at most `n` open messages: one per remote node plus one local
/// (hash partitioning), or a single shared one (broadcast/gather).
pub struct ExchangeWriter<'a, S: OutboundSink> {
    op: Arc<LogicalExchange>,
    kind: ExchangeKind,
    layout: WireLayout,
    nodes: usize,
    pool: Arc<MessagePool>,
    sink: &'a S,
    open: Vec<Option<MessageBuf>>,
    key_buf: Vec<u8>,
}

impl<'a, S: OutboundSink> ExchangeWriter<'a, S> {
    pub fn new(
        op: Arc<LogicalExchange>,
        kind: ExchangeKind,
        layout: WireLayout,
        nodes: usize,
        pool: Arc<MessagePool>,
        sink: &'a S,
    ) -> Self {
        let slots = match kind {
            ExchangeKind::HashPartition { .. } => nodes,
            ExchangeKind::Broadcast | ExchangeKind::Gather { .. } => 1,
        };
        ExchangeWriter {
            op,
            kind,
            layout,
            nodes,
            pool,
            sink,
            open: (0..slots).map(|_| None).collect(),
            key_buf: Vec::new(),
        }
    }

    /// Structural bound check: number of open-message slots this writer has.
    pub fn open_slots(&self) -> usize {
        self.open.len()
    }

    /// Serialize and route every row of `batch`.
    pub fn consume(&mut self, batch: &TupleBatch) -> Result<(), ExchangeError> {
        self.op.tuples_in.fetch_add(batch.row_count, Ordering::Relaxed);
        match self.kind.clone() {
            ExchangeKind::HashPartition { key_columns } => {
                let mut row_buf = Vec::with_capacity(batch.schema.len());
                for row in 0..batch.row_count {
                    row_buf.clear();
                    row_buf.extend(batch.columns.iter().map(|c| c[row].clone()));
                    key_bytes(&row_buf, &key_columns, &mut self.key_buf);
                    let target = partition_for(crc32_hash(&self.key_buf), self.nodes);
                    self.append_row(batch, row, target)?;
                }
            }
            ExchangeKind::Broadcast | ExchangeKind::Gather { .. } => {
                for row in 0..batch.row_count {
                    self.append_row(batch, row, 0)?;
                }
            }
        }
        Ok(())
    }

    fn append_row(&mut self, batch: &TupleBatch, row: usize, slot: usize) -> Result<(), ExchangeError> {
        let size = codec::serialized_size(batch, row, &self.layout);
        let capacity = self.pool.message_capacity();
        if size > capacity {
            return Err(ExchangeError::OversizeTuple { tuple_bytes: size, capacity });
        }
        if let Some(buf) = &self.open[slot] {
            if buf.bytes_used() + size > capacity {
                let full = self.open[slot].take().unwrap();
                self.ship_slot(full, slot);
            }
        }
        let buf = match &mut self.open[slot] {
            Some(buf) => buf,
            none => {
                let mut fresh = self.pool.acquire()?;
                fresh.set_operator(self.op.operator_id());
                *none = Some(fresh);
                none.as_mut().unwrap()
            }
        };
        codec::serialize_tuple(batch, row, &self.layout, buf.payload_mut())?;
        Ok(())
    }

    /// Route a completed message for `slot`. For hash partitioning the slot
    /// index is the target node.
    fn ship_slot(&self, buf: MessageBuf, slot: usize) {
        match &self.kind {
            ExchangeKind::HashPartition { .. } => {
                let message = SendState::new(buf, 1, self.pool.clone());
                self.sink.enqueue(Outbound::Unicast { target: slot, message });
            }
            ExchangeKind::Broadcast => {
                let remote = (self.nodes - 1) as u32;
                let message = SendState::new(buf, remote.max(1), self.pool.clone());
                self.sink.enqueue(Outbound::Broadcast { message });
            }
            ExchangeKind::Gather { target } => {
                let message = SendState::new(buf, 1, self.pool.clone());
                self.sink.enqueue(Outbound::Unicast { target: *target, message });
            }
        }
    }

    /// Flush this worker's partially-filled messages. Called by every worker
    /// before the pipeline barrier; only used bytes are shipped.
    pub fn flush(&mut self) -> Result<(), ExchangeError> {
        for slot in 0..self.open.len() {
            if let Some(buf) = self.open[slot].take() {
                if buf.bytes_used() == 0 {
                    self.pool.release(buf);
                    continue;
                }
                self.ship_slot(buf, slot);
            }
        }
        Ok(())
    }
}

/// Send the end-of-stream markers for one logical exchange operator: exactly
/// one last-flag message per destination node. Called once per node, by the
/// barrier leader, after every local worker has flushed.
pub fn finish_exchange<S: OutboundSink>(
    op: &Arc<LogicalExchange>,
    kind: &ExchangeKind,
    node: usize,
    nodes: usize,
    pool: &Arc<MessagePool>,
    sink: &S,
) -> Result<(), ExchangeError> {
    op.mark_finished()?;
    let targets: Vec<usize> = match kind {
        ExchangeKind::HashPartition { .. } | ExchangeKind::Broadcast => {
            (0..nodes).filter(|&t| t != node).collect()
        }
        ExchangeKind::Gather { target } => {
            if *target == node {
                Vec::new()
            } else {
                vec![*target]
            }
        }
    };
    for target in targets {
        let mut buf = pool.acquire()?;
        buf.set_operator(op.operator_id());
        buf.set_last(true);
        let message = SendState::new(buf, 1, pool.clone());
        sink.enqueue(Outbound::Unicast { target, message });
    }
    Ok(())
}

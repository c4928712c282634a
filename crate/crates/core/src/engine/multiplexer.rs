//! The per-node communication multiplexer and the NUMA-aware receive path.
//!
//! One multiplexer thread per node owns the node's transport endpoint.
//! Workers never touch the network: they enqueue outbound messages over a
//! command channel and take inbound messages from per-region receive queues.
//! Incoming payloads are copied into pool buffers region by region in turn,
//! so a message's queue placement equals its buffer's pool region. With
//! scheduling enabled the send side follows the round-robin phase runner,
//! emitting inline sync frames between steps.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, TryRecvError};

use crate::exchange::{
    ExchangeError, MessageBuf, MessagePool, Outbound, OutboundSink, SendState, FLAG_DONE,
    FLAG_LAST, FLAG_SYNC, SYNC_OPERATOR_ID,
};
use crate::schedule::{PhaseRunner, StepState};
use crate::transport::{
    InboundFrame, OutboundFrame, SendToken, Transport, TransportError, TransportEvent,
};

use super::EngineError;

/// How long the runner may wait at one barrier before naming silent peers.
const SYNC_TIMEOUT: Duration = Duration::from_secs(10);
/// Transport poll granularity when otherwise idle.
const IDLE_POLL: Duration = Duration::from_micros(200);

/// A received message parked in an inbox queue.
#[derive(Debug)]
pub struct RecvMessage {
    pub from: usize,
    pub buf: MessageBuf,
}

#[derive(Debug)]
struct InboxQueues {
    queues: Vec<VecDeque<RecvMessage>>,
    lasts_received: usize,
    local_done: bool,
    delivered: u64,
}

/// Receive state of one logical exchange input on one node.
///
/// Completion requires the last flag from every remote node plus the local
/// producer's completion, observed through the multiplexer's command order.
#[derive(Debug)]
pub struct ExchangeInbox {
    operator_id: u32,
    expected_lasts: usize,
    state: Mutex<InboxQueues>,
    ready: Condvar,
}

pub enum PopOutcome {
    /// A message, and whether it came from a foreign region queue.
    Msg { msg: RecvMessage, stolen: bool },
    /// No message right now; input not finished yet.
    Pending,
    /// Input complete and fully drained.
    Complete,
}

impl ExchangeInbox {
    pub fn new(operator_id: u32, regions: usize, expected_lasts: usize) -> Arc<Self> {
        Arc::new(ExchangeInbox {
            operator_id,
            expected_lasts,
            state: Mutex::new(InboxQueues {
                queues: (0..regions).map(|_| VecDeque::new()).collect(),
                lasts_received: 0,
                local_done: false,
                delivered: 0,
            }),
            ready: Condvar::new(),
        })
    }

    pub fn operator_id(&self) -> u32 {
        self.operator_id
    }

    fn push(&self, region: usize, msg: RecvMessage) {
        let mut state = self.state.lock().unwrap();
        state.queues[region].push_back(msg);
        state.delivered += 1;
        drop(state);
        self.ready.notify_all();
    }

    fn note_last(&self) {
        let mut state = self.state.lock().unwrap();
        state.lasts_received += 1;
        assert!(
            state.lasts_received <= self.expected_lasts,
            "operator {}: more last flags than remote nodes",
            self.operator_id
        );
        drop(state);
        self.ready.notify_all();
    }

    fn note_local_done(&self) {
        let mut state = self.state.lock().unwrap();
        state.local_done = true;
        drop(state);
        self.ready.notify_all();
    }

    /// Take a message, preferring the worker's own region and stealing from
    /// the other regions in region-id order otherwise.
    pub fn pop(&self, own_region: usize) -> PopOutcome {
        let mut state = self.state.lock().unwrap();
        let regions = state.queues.len();
        for step in 0..regions {
            let region = (own_region + step) % regions;
            if let Some(msg) = state.queues[region].pop_front() {
                return PopOutcome::Msg { msg, stolen: step != 0 };
            }
        }
        if state.lasts_received == self.expected_lasts && state.local_done {
            PopOutcome::Complete
        } else {
            PopOutcome::Pending
        }
    }

    /// Brief blocking wait for new input or completion.
    pub fn wait_briefly(&self) {
        let state = self.state.lock().unwrap();
        let _ = self.ready.wait_timeout(state, IDLE_POLL).unwrap();
    }

    pub fn delivered(&self) -> u64 {
        self.state.lock().unwrap().delivered
    }

    pub fn remote_complete(&self) -> bool {
        self.state.lock().unwrap().lasts_received == self.expected_lasts
    }
}

/// All exchange inputs of one node.
#[derive(Debug)]
pub struct InboxSet {
    inboxes: HashMap<u32, Arc<ExchangeInbox>>,
}

impl InboxSet {
    pub fn new(inboxes: HashMap<u32, Arc<ExchangeInbox>>) -> Arc<Self> {
        Arc::new(InboxSet { inboxes })
    }

    pub fn get(&self, operator_id: u32) -> &Arc<ExchangeInbox> {
        self.inboxes
            .get(&operator_id)
            .unwrap_or_else(|| panic!("no inbox for operator {operator_id}"))
    }

    pub fn all_remote_complete(&self) -> bool {
        self.inboxes.values().all(|i| i.remote_complete())
    }

    pub fn total_delivered(&self) -> u64 {
        self.inboxes.values().map(|i| i.delivered()).sum()
    }
}

/// Per-node counters shared by workers, the multiplexer, and the driver.
#[derive(Debug, Default)]
pub struct NodeStats {
    pub bytes_shuffled: AtomicU64,
    pub messages_sent: AtomicU64,
    pub sync_messages_sent: AtomicU64,
    pub bytes_delivered: AtomicU64,
    pub messages_delivered: AtomicU64,
    pub messages_processed: AtomicU64,
    pub steal_count: AtomicU64,
    pub tuples_scanned: AtomicU64,
    /// Tuples deserialized from received messages, per worker.
    pub tuples_received_per_worker: Vec<AtomicU64>,
    /// Wall nanoseconds per pipeline, recorded by the barrier leader.
    pub pipeline_wall_ns: Vec<AtomicU64>,
}

impl NodeStats {
    pub fn new(workers: usize, pipelines: usize) -> Arc<Self> {
        Arc::new(NodeStats {
            tuples_received_per_worker: (0..workers).map(|_| AtomicU64::new(0)).collect(),
            pipeline_wall_ns: (0..pipelines).map(|_| AtomicU64::new(0)).collect(),
            ..NodeStats::default()
        })
    }
}

/// Commands workers send to their multiplexer.
pub enum MuxCommand {
    Send(Outbound),
    /// The local producer pipeline of this exchange input has finished;
    /// ordered after all of its Send commands.
    LocalDone { operator_id: u32 },
    /// No further Send commands will ever arrive.
    NoMoreSends,
    Shutdown,
}

/// Cloneable handle workers use as their outbound sink.
#[derive(Clone)]
pub struct MuxHandle {
    tx: crossbeam_channel::Sender<MuxCommand>,
}

impl MuxHandle {
    pub fn new(tx: crossbeam_channel::Sender<MuxCommand>) -> Self {
        MuxHandle { tx }
    }

    pub fn send(&self, cmd: MuxCommand) {
        self.tx.send(cmd).expect("multiplexer alive");
    }
}

impl OutboundSink for MuxHandle {
    fn enqueue(&self, outbound: Outbound) {
        self.send(MuxCommand::Send(outbound));
    }
}

pub struct Multiplexer {
    node: usize,
    n: usize,
    regions: usize,
    transport: Box<dyn Transport>,
    commands: Receiver<MuxCommand>,
    inboxes: Arc<InboxSet>,
    pools: Arc<Vec<Arc<MessagePool>>>,
    stats: Arc<NodeStats>,
    runner: Option<PhaseRunner>,
    send_queues: Vec<VecDeque<Arc<SendState>>>,
    in_flight: HashMap<SendToken, Arc<SendState>>,
    next_recv_region: usize,
    rr_target: usize,
    no_more_sends: bool,
    done_sent: bool,
    peers_done: Vec<bool>,
    shutdown: bool,
    waiting_since: Option<Instant>,
}

impl Multiplexer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        node: usize,
        n: usize,
        regions: usize,
        transport: Box<dyn Transport>,
        commands: Receiver<MuxCommand>,
        inboxes: Arc<InboxSet>,
        pools: Arc<Vec<Arc<MessagePool>>>,
        stats: Arc<NodeStats>,
        runner: Option<PhaseRunner>,
    ) -> Self {
        let mut peers_done = vec![false; n];
        peers_done[node] = true;
        Multiplexer {
            node,
            n,
            regions,
            transport,
            commands,
            inboxes,
            pools,
            stats,
            runner,
            send_queues: (0..n).map(|_| VecDeque::new()).collect(),
            in_flight: HashMap::new(),
            next_recv_region: 0,
            rr_target: 0,
            no_more_sends: false,
            done_sent: false,
            peers_done,
            shutdown: false,
            waiting_since: None,
        }
    }

    /// Drive the node's network side until shutdown.
    pub fn run(mut self) -> Result<(), EngineError> {
        loop {
            self.drain_commands()?;
            self.pump_sends()?;
            self.maybe_broadcast_done();
            let wait = if self.work_pending() { Duration::ZERO } else { IDLE_POLL };
            let events = self
                .transport
                .poll(wait)
                .map_err(|e| EngineError::Transport(e.to_string()))?;
            for event in events {
                self.handle_event(event)?;
            }
            if self.shutdown {
                for event in self.transport.drain_completions() {
                    self.handle_event(event)?;
                }
                if self.ready_to_exit() {
                    return Ok(());
                }
            }
            self.check_sync_timeout()?;
        }
    }

    fn work_pending(&self) -> bool {
        self.send_queues.iter().any(|q| !q.is_empty()) || !self.in_flight.is_empty()
    }

    fn ready_to_exit(&self) -> bool {
        let drained = self.send_queues.iter().all(VecDeque::is_empty) && self.in_flight.is_empty();
        let schedule_done = match &self.runner {
            None => true,
            Some(_) => self.done_sent && self.peers_done.iter().all(|&d| d),
        };
        self.no_more_sends && drained && schedule_done
    }

    fn drain_commands(&mut self) -> Result<(), EngineError> {
        loop {
            match self.commands.try_recv() {
                Ok(MuxCommand::Send(outbound)) => self.route_outbound(outbound)?,
                Ok(MuxCommand::LocalDone { operator_id }) => {
                    self.inboxes.get(operator_id).note_local_done();
                }
                Ok(MuxCommand::NoMoreSends) => self.no_more_sends = true,
                Ok(MuxCommand::Shutdown) => self.shutdown = true,
                Err(TryRecvError::Empty) => return Ok(()),
                Err(TryRecvError::Disconnected) => {
                    self.shutdown = true;
                    self.no_more_sends = true;
                    return Ok(());
                }
            }
        }
    }

    fn route_outbound(&mut self, outbound: Outbound) -> Result<(), EngineError> {
        match outbound {
            Outbound::Unicast { target, message } => {
                if target == self.node {
                    // local loopback: hand the pooled buffer straight to the
                    // inbox of its own region, no copy, no transport
                    let buf = message.take_for_local();
                    let inbox = self.inboxes.get(buf.operator_id());
                    debug_assert!(!buf.is_last(), "local last flags travel via LocalDone");
                    let region = buf.region();
                    inbox.push(region, RecvMessage { from: self.node, buf });
                } else {
                    self.send_queues[target].push_back(message);
                }
            }
            Outbound::Broadcast { message } => {
                // local copy through the receive path (the wire would have
                // carried it to everyone else)
                let (operator_id, payload) =
                    message.with_wire(|op, _, payload| (op, payload.to_vec()));
                self.deliver_local_copy(operator_id, self.node, &payload)?;
                if self.n == 1 {
                    // no remote sends hold the dummy reference
                    message.complete_one();
                } else {
                    for target in 0..self.n {
                        if target != self.node {
                            self.send_queues[target].push_back(message.clone());
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn deliver_local_copy(
        &mut self,
        operator_id: u32,
        from: usize,
        payload: &[u8],
    ) -> Result<(), EngineError> {
        let region = self.next_recv_region;
        self.next_recv_region = (self.next_recv_region + 1) % self.regions;
        // Never block on the pool here: completions processed below return
        // buffers, and blocking would wedge that very path. Spin between
        // completion drains until the stall timeout.
        let deadline = Instant::now() + self.pools[region].acquire_timeout();
        let mut buf = loop {
            if let Some(buf) = self.pools[region].try_acquire() {
                break buf;
            }
            let events = self.transport.drain_completions();
            for event in events {
                self.handle_event(event)?;
            }
            if Instant::now() >= deadline {
                return Err(EngineError::ShuffleStall(format!(
                    "receive pool exhausted in region {region}"
                )));
            }
            std::thread::sleep(Duration::from_micros(50));
        };
        buf.set_operator(operator_id);
        buf.payload_from(payload);
        self.inboxes.get(operator_id).push(region, RecvMessage { from, buf });
        Ok(())
    }

    fn pump_sends(&mut self) -> Result<(), EngineError> {
        match &mut self.runner {
            None => {
                // unscheduled: drain every target round-robin
                for step in 0..self.n {
                    let target = (self.rr_target + step) % self.n;
                    while let Some(message) = self.send_queues[target].front() {
                        match self.post_data(target, message.clone()) {
                            Ok(()) => {
                                self.send_queues[target].pop_front();
                            }
                            Err(TransportError::WouldBlock(_)) => break,
                            Err(e) => return Err(EngineError::Transport(e.to_string())),
                        }
                    }
                }
                self.rr_target = (self.rr_target + 1) % self.n;
                Ok(())
            }
            Some(_) => self.pump_scheduled(),
        }
    }

    fn pump_scheduled(&mut self) -> Result<(), EngineError> {
        loop {
            let runner = self.runner.as_mut().expect("scheduled mode");
            let target = runner.current_target();
            let queue_empty = self.send_queues[target].is_empty();
            match runner.state(queue_empty) {
                StepState::Sending { target } => {
                    let message = self.send_queues[target]
                        .front()
                        .expect("sending state implies queue entry")
                        .clone();
                    match self.post_data(target, message) {
                        Ok(()) => {
                            self.send_queues[target].pop_front();
                            self.runner.as_mut().unwrap().note_sent();
                        }
                        Err(TransportError::WouldBlock(_)) => return Ok(()),
                        Err(e) => return Err(EngineError::Transport(e.to_string())),
                    }
                }
                StepState::NeedSync { counter } => {
                    // a fully finished node stops driving barriers; peers are
                    // released by its DONE marker instead
                    if self.done_sent {
                        return Ok(());
                    }
                    self.broadcast_control(FLAG_SYNC, &counter.to_le_bytes());
                    self.stats.sync_messages_sent.fetch_add(
                        (self.n - 1) as u64,
                        Ordering::Relaxed,
                    );
                    let runner = self.runner.as_mut().unwrap();
                    runner.note_sync_issued();
                    if !runner.poll_advance() {
                        self.waiting_since = Some(Instant::now());
                        return Ok(());
                    }
                    self.waiting_since = None;
                }
                StepState::Waiting => return Ok(()),
            }
        }
    }

    fn post_data(
        &mut self,
        target: usize,
        message: Arc<SendState>,
    ) -> Result<(), TransportError> {
        let token = self.transport.post_send(target, OutboundFrame::Data(message.clone()))?;
        self.in_flight.insert(token, message);
        Ok(())
    }

    /// Sync and done frames are best-effort liveness signals; a peer that
    /// already tore down its endpoint cannot need them anymore.
    fn broadcast_control(&mut self, flags: u8, payload: &[u8]) {
        for target in 0..self.n {
            if target != self.node {
                let frame = OutboundFrame::Control {
                    operator_id: SYNC_OPERATOR_ID,
                    flags,
                    payload: payload.to_vec(),
                };
                let _ = self.transport.post_send(target, frame);
            }
        }
    }

    fn maybe_broadcast_done(&mut self) {
        if self.runner.is_none() || self.done_sent || !self.no_more_sends {
            return;
        }
        let drained = self.send_queues.iter().all(VecDeque::is_empty) && self.in_flight.is_empty();
        if drained {
            self.broadcast_control(FLAG_DONE, &[]);
            self.done_sent = true;
        }
    }

    fn handle_event(&mut self, event: TransportEvent) -> Result<(), EngineError> {
        match event {
            TransportEvent::SendComplete(token) => {
                if let Some(message) = self.in_flight.remove(&token) {
                    let bytes = message.bytes_used() as u64;
                    self.stats.bytes_shuffled.fetch_add(bytes, Ordering::Relaxed);
                    self.stats.messages_sent.fetch_add(1, Ordering::Relaxed);
                    message.complete_one();
                }
                Ok(())
            }
            TransportEvent::Inbound(frame) => self.handle_inbound(frame),
        }
    }

    fn handle_inbound(&mut self, frame: InboundFrame) -> Result<(), EngineError> {
        if frame.flags & FLAG_SYNC != 0 {
            if frame.operator_id == SYNC_OPERATOR_ID && frame.payload.len() == 4 {
                let counter = u32::from_le_bytes(frame.payload[..4].try_into().unwrap());
                if let Some(runner) = &mut self.runner {
                    if runner.note_sync_received(frame.from, counter) {
                        self.waiting_since = None;
                    }
                }
            }
            return Ok(());
        }
        if frame.flags & FLAG_DONE != 0 {
            self.peers_done[frame.from] = true;
            if let Some(runner) = &mut self.runner {
                if runner.note_sync_received(frame.from, u32::MAX) {
                    self.waiting_since = None;
                }
            }
            return Ok(());
        }
        self.stats
            .bytes_delivered
            .fetch_add(frame.payload.len() as u64, Ordering::Relaxed);
        self.stats.messages_delivered.fetch_add(1, Ordering::Relaxed);
        if !frame.payload.is_empty() {
            self.deliver_local_copy(frame.operator_id, frame.from, &frame.payload)?;
        }
        if frame.flags & FLAG_LAST != 0 {
            self.inboxes.get(frame.operator_id).note_last();
        }
        Ok(())
    }

    fn check_sync_timeout(&mut self) -> Result<(), EngineError> {
        if let (Some(runner), Some(since)) = (&self.runner, self.waiting_since) {
            if since.elapsed() > SYNC_TIMEOUT {
                let missing = runner.missing_peers();
                return Err(EngineError::Transport(format!(
                    "sync timeout in phase step {}: no sync from nodes {missing:?}",
                    runner.step_counter()
                )));
            }
        }
        Ok(())
    }
}

impl From<ExchangeError> for EngineError {
    fn from(e: ExchangeError) -> Self {
        match e {
            ExchangeError::ShuffleStall { .. } => EngineError::ShuffleStall(e.to_string()),
            other => EngineError::Exchange(other.to_string()),
        }
    }
}

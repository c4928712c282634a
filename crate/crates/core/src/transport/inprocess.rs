//! In-process transport: one bounded crossbeam channel per directed node
//! pair. The "wire" is a copy of the payload bytes into the receiver's frame,
//! so sender buffers complete as soon as the copy is queued.

use std::collections::VecDeque;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender, TryRecvError};

use super::{
    EventMode, InboundFrame, Mesh, NodeId, OutboundFrame, SendToken, Transport, TransportConfig,
    TransportError, TransportEvent,
};

struct Wire {
    operator_id: u32,
    flags: u8,
    payload: Vec<u8>,
}

pub struct InProcessEndpoint {
    node: NodeId,
    n: usize,
    /// senders[j] transmits to node j (None for self).
    senders: Vec<Option<Sender<Wire>>>,
    /// receivers[j] yields frames sent by node j.
    receivers: Vec<Option<Receiver<Wire>>>,
    event_mode: EventMode,
    completion_batch: usize,
    next_token: u64,
    pending_completions: VecDeque<SendToken>,
    rr_cursor: usize,
}

impl InProcessEndpoint {
    fn pop_completions(&mut self, out: &mut Vec<TransportEvent>, force: bool) {
        match self.event_mode {
            EventMode::Event => {
                while let Some(tok) = self.pending_completions.pop_front() {
                    out.push(TransportEvent::SendComplete(tok));
                }
            }
            EventMode::Poll => {
                while self.pending_completions.len() >= self.completion_batch
                    || (force && !self.pending_completions.is_empty())
                {
                    for _ in 0..self.completion_batch.min(self.pending_completions.len()) {
                        let tok = self.pending_completions.pop_front().unwrap();
                        out.push(TransportEvent::SendComplete(tok));
                    }
                }
            }
        }
    }
}

impl Transport for InProcessEndpoint {
    fn node(&self) -> NodeId {
        self.node
    }

    fn node_count(&self) -> usize {
        self.n
    }

    fn post_send(
        &mut self,
        target: NodeId,
        frame: OutboundFrame,
    ) -> Result<SendToken, TransportError> {
        let sender = self
            .senders
            .get(target)
            .and_then(|s| s.as_ref())
            .ok_or(TransportError::UnknownTarget(target))?;
        let wire = match &frame {
            OutboundFrame::Data(state) => state.with_wire(|op, flags, payload| Wire {
                operator_id: op,
                flags,
                payload: payload.to_vec(),
            }),
            OutboundFrame::Control { operator_id, flags, payload } => Wire {
                operator_id: *operator_id,
                flags: *flags,
                payload: payload.clone(),
            },
        };
        sender
            .send(wire)
            .map_err(|_| TransportError::PeerDisconnected {
                peer: target,
                reason: "receiver dropped".into(),
            })?;
        let token = SendToken(self.next_token);
        self.next_token += 1;
        // the payload copy above IS the transfer; the buffer is free now
        self.pending_completions.push_back(token);
        Ok(token)
    }

    fn poll(&mut self, wait: Duration) -> Result<Vec<TransportEvent>, TransportError> {
        let mut events = Vec::new();
        self.pop_completions(&mut events, false);
        // Round-robin over peers, preserving per-pair FIFO order.
        let deadline = std::time::Instant::now() + wait;
        loop {
            let mut got = false;
            for step in 0..self.n {
                let peer = (self.rr_cursor + step) % self.n;
                if let Some(rx) = &self.receivers[peer] {
                    match rx.try_recv() {
                        Ok(wire) => {
                            got = true;
                            events.push(TransportEvent::Inbound(InboundFrame {
                                from: peer,
                                operator_id: wire.operator_id,
                                flags: wire.flags,
                                payload: wire.payload,
                            }));
                        }
                        Err(TryRecvError::Empty) | Err(TryRecvError::Disconnected) => {}
                    }
                }
            }
            self.rr_cursor = (self.rr_cursor + 1) % self.n.max(1);
            if got || !events.is_empty() {
                break;
            }
            if std::time::Instant::now() >= deadline {
                break;
            }
            std::thread::yield_now();
        }
        Ok(events)
    }

    fn drain_completions(&mut self) -> Vec<TransportEvent> {
        let mut events = Vec::new();
        self.pop_completions(&mut events, true);
        events
    }

    fn connection_count(&self) -> usize {
        self.senders.iter().flatten().count()
    }
}

/// Build the n-node in-process mesh: n·(n−1) directed channels.
pub fn open(n: usize, config: &TransportConfig) -> Mesh {
    let mut senders: Vec<Vec<Option<Sender<Wire>>>> = (0..n)
        .map(|_| (0..n).map(|_| None).collect())
        .collect();
    let mut receivers: Vec<Vec<Option<Receiver<Wire>>>> = (0..n)
        .map(|_| (0..n).map(|_| None).collect())
        .collect();
    for from in 0..n {
        for to in 0..n {
            if from == to {
                continue;
            }
            let (tx, rx) = bounded(config.send_queue_len);
            senders[from][to] = Some(tx);
            receivers[to][from] = Some(rx);
        }
    }
    let endpoints = senders
        .into_iter()
        .zip(receivers)
        .enumerate()
        .map(|(node, (senders, receivers))| {
            Box::new(InProcessEndpoint {
                node,
                n,
                senders,
                receivers,
                event_mode: config.event_mode,
                completion_batch: config.completion_batch.max(1) as usize,
                next_token: 0,
                pending_completions: VecDeque::new(),
                rr_cursor: 0,
            }) as Box<dyn Transport>
        })
        .collect();
    Mesh { endpoints, recorder: None }
}

//! Loopback TCP transport. One duplex stream per node pair; every node's
//! multiplexer thread owns its streams and drives them non-blocking in both
//! directions, so two nodes flooding each other cannot deadlock on full
//! kernel buffers. Frames are length-prefixed with their total size (u32 LE).

use std::collections::VecDeque;
use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use super::{
    decode_frame, EventMode, Mesh, NodeId, OutboundFrame, SendToken, Transport, TransportConfig,
    TransportError, TransportEvent,
};

const LENGTH_PREFIX_BYTES: usize = 4;

/// Kernel send/receive buffer size requested per stream.
const SOCKET_BUFFER_BYTES: usize = 4 * 1024 * 1024;

#[cfg(unix)]
fn set_buffer_sizes(stream: &TcpStream, bytes: usize) -> Result<(), TransportError> {
    use std::os::unix::io::AsRawFd;
    let fd = stream.as_raw_fd();
    let value = bytes as libc::c_int;
    for opt in [libc::SO_RCVBUF, libc::SO_SNDBUF] {
        let rc = unsafe {
            libc::setsockopt(
                fd,
                libc::SOL_SOCKET,
                opt,
                &value as *const _ as *const libc::c_void,
                std::mem::size_of::<libc::c_int>() as libc::socklen_t,
            )
        };
        if rc != 0 {
            return Err(TransportError::Startup(format!(
                "setsockopt failed: {}",
                std::io::Error::last_os_error()
            )));
        }
    }
    Ok(())
}

#[cfg(not(unix))]
fn set_buffer_sizes(_stream: &TcpStream, _bytes: usize) -> Result<(), TransportError> {
    Ok(())
}

struct Peer {
    stream: TcpStream,
    /// Bytes accumulated from the stream, parsed into frames as they complete.
    inbox: Vec<u8>,
    /// Outbound byte queues: (remaining bytes of one frame, completion token).
    outbox: VecDeque<(Vec<u8>, usize, SendToken)>,
}

impl Peer {
    fn pump_writes(
        &mut self,
        peer_id: NodeId,
        completions: &mut VecDeque<SendToken>,
    ) -> Result<(), TransportError> {
        while let Some((bytes, offset, token)) = self.outbox.front_mut() {
            match self.stream.write(&bytes[*offset..]) {
                Ok(0) => {
                    return Err(TransportError::PeerDisconnected {
                        peer: peer_id,
                        reason: "write returned 0".into(),
                    })
                }
                Ok(n) => {
                    *offset += n;
                    if *offset == bytes.len() {
                        completions.push_back(*token);
                        self.outbox.pop_front();
                    }
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(TransportError::Io { peer: peer_id, source: e }),
            }
        }
        Ok(())
    }

    fn pump_reads(&mut self, peer_id: NodeId) -> Result<Vec<Vec<u8>>, TransportError> {
        let mut chunk = [0u8; 64 * 1024];
        loop {
            match self.stream.read(&mut chunk) {
                Ok(0) => break, // peer closed; drained frames still parse below
                Ok(n) => self.inbox.extend_from_slice(&chunk[..n]),
                Err(e) if e.kind() == ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(TransportError::Io { peer: peer_id, source: e }),
            }
        }
        let mut frames = Vec::new();
        let mut pos = 0;
        while self.inbox.len() - pos >= LENGTH_PREFIX_BYTES {
            let total =
                u32::from_le_bytes(self.inbox[pos..pos + 4].try_into().unwrap()) as usize;
            if self.inbox.len() - pos - LENGTH_PREFIX_BYTES < total {
                break;
            }
            let start = pos + LENGTH_PREFIX_BYTES;
            frames.push(self.inbox[start..start + total].to_vec());
            pos = start + total;
        }
        if pos > 0 {
            self.inbox.drain(..pos);
        }
        Ok(frames)
    }
}

pub struct SocketEndpoint {
    node: NodeId,
    n: usize,
    peers: Vec<Option<Peer>>,
    event_mode: EventMode,
    completion_batch: usize,
    next_token: u64,
    ready_completions: VecDeque<SendToken>,
}

impl SocketEndpoint {
    fn pop_completions(&mut self, out: &mut Vec<TransportEvent>, force: bool) {
        let release = match self.event_mode {
            EventMode::Event => self.ready_completions.len(),
            EventMode::Poll => {
                if force {
                    self.ready_completions.len()
                } else {
                    (self.ready_completions.len() / self.completion_batch) * self.completion_batch
                }
            }
        };
        for _ in 0..release {
            out.push(TransportEvent::SendComplete(self.ready_completions.pop_front().unwrap()));
        }
    }
}

impl Transport for SocketEndpoint {
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
        let token = SendToken(self.next_token);
        self.next_token += 1;
        let wire = frame.wire_bytes();
        let mut framed = Vec::with_capacity(LENGTH_PREFIX_BYTES + wire.len());
        framed.extend_from_slice(&(wire.len() as u32).to_le_bytes());
        framed.extend_from_slice(&wire);
        let peer = self
            .peers
            .get_mut(target)
            .and_then(|p| p.as_mut())
            .ok_or(TransportError::UnknownTarget(target))?;
        peer.outbox.push_back((framed, 0, token));
        peer.pump_writes(target, &mut self.ready_completions)?;
        Ok(token)
    }

    fn poll(&mut self, wait: Duration) -> Result<Vec<TransportEvent>, TransportError> {
        let mut events = Vec::new();
        let deadline = std::time::Instant::now() + wait;
        loop {
            for peer_id in 0..self.n {
                if let Some(peer) = self.peers[peer_id].as_mut() {
                    peer.pump_writes(peer_id, &mut self.ready_completions)?;
                    for raw in peer.pump_reads(peer_id)? {
                        events.push(TransportEvent::Inbound(decode_frame(peer_id, &raw)?));
                    }
                }
            }
            self.pop_completions(&mut events, false);
            if !events.is_empty() || std::time::Instant::now() >= deadline {
                break;
            }
            std::thread::sleep(Duration::from_micros(50));
        }
        Ok(events)
    }

    fn drain_completions(&mut self) -> Vec<TransportEvent> {
        let mut events = Vec::new();
        // flush whatever is still queued so the tokens can complete
        for peer_id in 0..self.n {
            if let Some(peer) = self.peers[peer_id].as_mut() {
                let _ = peer.pump_writes(peer_id, &mut self.ready_completions);
            }
        }
        self.pop_completions(&mut events, true);
        events
    }

    fn connection_count(&self) -> usize {
        self.peers.iter().flatten().count()
    }
}

/// Open a loopback TCP mesh: n·(n−1)/2 duplex streams, each endpoint seeing
/// n−1 directed connections.
pub fn open(n: usize, config: &TransportConfig) -> Result<Mesh, TransportError> {
    let listeners: Vec<TcpListener> = (0..n)
        .map(|_| TcpListener::bind("127.0.0.1:0"))
        .collect::<std::io::Result<_>>()
        .map_err(|e| TransportError::Startup(e.to_string()))?;
    let addrs: Vec<_> = listeners
        .iter()
        .map(|l| l.local_addr().expect("bound listener"))
        .collect();

    let mut peers: Vec<Vec<Option<Peer>>> =
        (0..n).map(|_| (0..n).map(|_| None).collect()).collect();

    // For every pair (lo, hi), hi dials lo's listener and announces itself.
    for lo in 0..n {
        for hi in (lo + 1)..n {
            let mut dialing = TcpStream::connect(addrs[lo])
                .map_err(|e| TransportError::Startup(format!("connect to {lo}: {e}")))?;
            dialing
                .write_all(&(hi as u32).to_le_bytes())
                .map_err(|e| TransportError::Startup(e.to_string()))?;
            let (mut accepted, _) = listeners[lo]
                .accept()
                .map_err(|e| TransportError::Startup(e.to_string()))?;
            let mut hello = [0u8; 4];
            accepted
                .read_exact(&mut hello)
                .map_err(|e| TransportError::Startup(e.to_string()))?;
            let announced = u32::from_le_bytes(hello) as usize;
            if announced != hi {
                return Err(TransportError::Startup(format!(
                    "handshake mismatch: expected {hi}, got {announced}"
                )));
            }
            for stream in [&dialing, &accepted] {
                stream
                    .set_nodelay(true)
                    .map_err(|e| TransportError::Startup(e.to_string()))?;
                stream
                    .set_nonblocking(true)
                    .map_err(|e| TransportError::Startup(e.to_string()))?;
                // Large kernel buffers keep message-sized bursts inside the
                // TCP window; otherwise a briefly idle reader drops the
                // window to zero and recovery crawls on persist-timer probes.
                set_buffer_sizes(stream, SOCKET_BUFFER_BYTES)?;
            }
            peers[hi][lo] = Some(Peer { stream: dialing, inbox: Vec::new(), outbox: VecDeque::new() });
            peers[lo][hi] = Some(Peer { stream: accepted, inbox: Vec::new(), outbox: VecDeque::new() });
        }
    }

    let endpoints = peers
        .into_iter()
        .enumerate()
        .map(|(node, peers)| {
            Box::new(SocketEndpoint {
                node,
                n,
                peers,
                event_mode: config.event_mode,
                completion_batch: config.completion_batch.max(1) as usize,
                next_token: 0,
                ready_completions: VecDeque::new(),
            }) as Box<dyn Transport>
        })
        .collect();
    Ok(Mesh { endpoints, recorder: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::TransportKind;

    fn config() -> TransportConfig {
        TransportConfig { kind: TransportKind::Socket, ..TransportConfig::default() }
    }

    fn control(tag: u32, body: &[u8]) -> OutboundFrame {
        OutboundFrame::Control { operator_id: tag, flags: 0, payload: body.to_vec() }
    }

    #[test]
    fn three_node_loopback_framing_and_isolation() {
        let mesh = open(3, &config()).unwrap();
        assert_eq!(mesh.directed_connections(), 6);
        let mut eps: Vec<_> = mesh.endpoints.into_iter().collect();
        // 0 -> 1 gets a large frame (bigger than one read chunk) and a small one
        let big = vec![0xAB; 200_000];
        eps[0].post_send(1, control(1, &big)).unwrap();
        eps[0].post_send(1, control(2, b"tail")).unwrap();
        eps[2].post_send(1, control(3, b"from-2")).unwrap();

        let mut got = Vec::new();
        let deadline = std::time::Instant::now() + Duration::from_secs(5);
        while got.len() < 3 {
            assert!(std::time::Instant::now() < deadline, "timed out: {got:?}");
            // sender must keep pumping its outbox
            eps[0].poll(Duration::from_millis(1)).unwrap();
            eps[2].poll(Duration::from_millis(1)).unwrap();
            for ev in eps[1].poll(Duration::from_millis(5)).unwrap() {
                if let TransportEvent::Inbound(frame) = ev {
                    got.push((frame.from, frame.operator_id, frame.payload.len()));
                }
            }
        }
        got.sort_unstable();
        assert_eq!(got, vec![(0, 1, 200_000), (0, 2, 4), (2, 3, 6)]);
        // bystander node 0 received nothing
        assert!(eps[0]
            .poll(Duration::from_millis(5))
            .unwrap()
            .iter()
            .all(|e| !matches!(e, TransportEvent::Inbound(_))));
    }

    #[test]
    fn completions_cover_every_send() {
        let mesh = open(2, &config()).unwrap();
        let mut eps: Vec<_> = mesh.endpoints.into_iter().collect();
        let mut tokens = std::collections::HashSet::new();
        for i in 0..1000u32 {
            tokens.insert(eps[0].post_send(1, control(i, &[0u8; 512])).unwrap());
        }
        let mut completed = std::collections::HashSet::new();
        let mut received = 0;
        let deadline = std::time::Instant::now() + Duration::from_secs(5);
        while completed.len() < 1000 || received < 1000 {
            assert!(std::time::Instant::now() < deadline, "timed out");
            for ev in eps[0].poll(Duration::from_millis(2)).unwrap() {
                if let TransportEvent::SendComplete(t) = ev {
                    completed.insert(t);
                }
            }
            for ev in eps[1].poll(Duration::from_millis(2)).unwrap() {
                if let TransportEvent::Inbound(f) = ev {
                    assert_eq!(f.operator_id, received);
                    received += 1;
                }
            }
        }
        assert_eq!(completed, tokens);
    }
}

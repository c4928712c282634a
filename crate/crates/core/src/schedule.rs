//! Conflict-free round-robin communication phases and the step/sync policy
//! the multiplexer follows.
//!
//! For `n` nodes the schedule has `n − 1` phases; in phase `k` node `i` sends
//! to `(i + k) mod n` and receives from `(i − k) mod n`, so no receiver is
//! ever shared and every ordered pair occurs exactly once over all phases.

use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("a schedule needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
}

/// One phase: `targets[i]` is the node that node `i` sends to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phase {
    targets: Vec<usize>,
}

impl Phase {
    pub fn target_of(&self, sender: usize) -> usize {
        self.targets[sender]
    }

    pub fn source_of(&self, receiver: usize) -> usize {
        self.targets
            .iter()
            .position(|&t| t == receiver)
            .expect("every node receives in every phase")
    }

    pub fn assignments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.targets.iter().copied().enumerate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseSchedule {
    n: usize,
    phases: Vec<Phase>,
}

impl PhaseSchedule {
    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn phases(&self) -> &[Phase] {
        &self.phases
    }

    pub fn phase(&self, idx: usize) -> &Phase {
        &self.phases[idx]
    }

    pub fn phase_count(&self) -> usize {
        self.phases.len()
    }

    /// Check the schedule invariants by enumeration: each phase is a
    /// self-target-free permutation and all ordered pairs are covered once.
    pub fn validate(&self) -> Result<(), String> {
        if self.phases.len() != self.n - 1 {
            return Err(format!(
                "expected {} phases for {} nodes, found {}",
                self.n - 1,
                self.n,
                self.phases.len()
            ));
        }
        let mut pair_seen = vec![false; self.n * self.n];
        for (k, phase) in self.phases.iter().enumerate() {
            if phase.targets.len() != self.n {
                return Err(format!("phase {k} has {} senders", phase.targets.len()));
            }
            let mut receives = vec![0usize; self.n];
            for (sender, target) in phase.assignments() {
                if sender == target {
                    return Err(format!("phase {k}: node {sender} targets itself"));
                }
                receives[target] += 1;
                let pair = sender * self.n + target;
                if pair_seen[pair] {
                    return Err(format!("pair {sender}->{target} scheduled twice"));
                }
                pair_seen[pair] = true;
            }
            if receives.iter().any(|&r| r != 1) {
                return Err(format!("phase {k}: some node is not a unique receiver"));
            }
        }
        for sender in 0..self.n {
            for target in 0..self.n {
                if sender != target && !pair_seen[sender * self.n + target] {
                    return Err(format!("pair {sender}->{target} never scheduled"));
                }
            }
        }
        Ok(())
    }
}

/// Build the round-robin schedule for `n` nodes.
pub fn round_robin_schedule(n: usize) -> Result<PhaseSchedule, ScheduleError> {
    if n < 2 {
        return Err(ScheduleError::TooFewNodes(n));
    }
    let phases = (1..n)
        .map(|k| Phase { targets: (0..n).map(|i| (i + k) % n).collect() })
        .collect();
    Ok(PhaseSchedule { n, phases })
}

/// Step size and synchronization parameters for scheduled communication.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncPolicy {
    /// Messages sent to the current target before synchronizing.
    pub messages_per_step: u32,
    /// Cost of one barrier synchronization (simulator parameter).
    pub sync_latency: Duration,
    /// Process completions in batches of this size in poll mode.
    pub completion_batch: u32,
}

impl Default for SyncPolicy {
    fn default() -> Self {
        SyncPolicy {
            messages_per_step: 8,
            sync_latency: Duration::from_micros(1),
            completion_batch: 16,
        }
    }
}

impl SyncPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if self.messages_per_step == 0 {
            return Err("messages_per_step must be >= 1".into());
        }
        if self.completion_batch == 0 {
            return Err("completion_batch must be >= 1".into());
        }
        Ok(())
    }
}

/// Predicted throughput when `step` messages of `message_size` bytes are sent
/// between synchronizations costing `sync_latency`:
/// `step·size / (step·size/bandwidth + sync_latency)`.
pub fn amortization_curve(
    message_size: u64,
    sync_latency: Duration,
    bandwidth: f64,
    step: u32,
) -> f64 {
    let bytes = step as f64 * message_size as f64;
    bytes / (bytes / bandwidth + sync_latency.as_secs_f64())
}

/// Phase progression for one node. The multiplexer owns this; it reports
/// sends and observed sync messages, and asks which target to serve.
///
/// A peer may run one barrier round ahead (it can only have advanced after
/// seeing our sync), so per-peer we track the latest round counter observed;
/// transports preserve per-pair ordering, which makes the counter monotone.
#[derive(Debug)]
pub struct PhaseRunner {
    schedule: PhaseSchedule,
    node: usize,
    policy: SyncPolicy,
    phase_idx: usize,
    sent_in_step: u32,
    /// Barrier round counter carried in sync messages.
    step_counter: u32,
    /// Latest sync round counter seen from each peer.
    peer_round: Vec<Option<u32>>,
    /// Set once this node has issued its own sync for the round.
    sync_sent: bool,
}

#[derive(Debug, PartialEq, Eq)]
pub enum StepState {
    /// Keep sending to the current target.
    Sending { target: usize },
    /// Step quota reached (or queue empty): broadcast a sync message carrying
    /// this round counter, then wait.
    NeedSync { counter: u32 },
    /// Waiting for the remaining peers' sync messages.
    Waiting,
}

impl PhaseRunner {
    pub fn new(schedule: PhaseSchedule, node: usize, policy: SyncPolicy) -> Self {
        let n = schedule.node_count();
        PhaseRunner {
            schedule,
            node,
            policy,
            phase_idx: 0,
            sent_in_step: 0,
            step_counter: 0,
            peer_round: vec![None; n],
            sync_sent: false,
        }
    }

    pub fn current_target(&self) -> usize {
        self.schedule.phase(self.phase_idx).target_of(self.node)
    }

    pub fn step_counter(&self) -> u32 {
        self.step_counter
    }

    /// State machine: what should the node do next, given whether it still
    /// has queued messages for the current target?
    pub fn state(&self, queue_empty: bool) -> StepState {
        if !self.sync_sent && !queue_empty && self.sent_in_step < self.policy.messages_per_step {
            StepState::Sending { target: self.current_target() }
        } else if !self.sync_sent {
            StepState::NeedSync { counter: self.step_counter }
        } else {
            StepState::Waiting
        }
    }

    pub fn note_sent(&mut self) {
        self.sent_in_step += 1;
    }

    pub fn note_sync_issued(&mut self) {
        self.sync_sent = true;
        self.peer_round[self.node] = Some(self.step_counter);
    }

    /// Record a peer's sync message. Returns true if the barrier is now
    /// complete and the runner advanced to the next phase.
    pub fn note_sync_received(&mut self, from: usize, counter: u32) -> bool {
        let entry = &mut self.peer_round[from];
        if entry.map_or(true, |prev| counter > prev) {
            *entry = Some(counter);
        }
        self.try_advance()
    }

    /// Re-check the barrier; needed right after issuing a sync, since peer
    /// counters may already satisfy the current round.
    pub fn poll_advance(&mut self) -> bool {
        self.try_advance()
    }

    /// Peers whose sync for the current round has not arrived.
    pub fn missing_peers(&self) -> Vec<usize> {
        let round = self.step_counter;
        self.peer_round
            .iter()
            .enumerate()
            .filter(|(p, r)| *p != self.node && !r.is_some_and(|c| c >= round))
            .map(|(p, _)| p)
            .collect()
    }

    fn try_advance(&mut self) -> bool {
        let round = self.step_counter;
        if self.sync_sent && self.peer_round.iter().all(|r| r.is_some_and(|c| c >= round)) {
            self.phase_idx = (self.phase_idx + 1) % self.schedule.phase_count();
            self.sent_in_step = 0;
            self.step_counter += 1;
            self.sync_sent = false;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn four_nodes_three_phases() {
        let s = round_robin_schedule(4).unwrap();
        assert_eq!(s.phase_count(), 3);
        let p1: Vec<(usize, usize)> = s.phase(0).assignments().collect();
        assert_eq!(p1, vec![(0, 1), (1, 2), (2, 3), (3, 0)]);
    }

    #[test]
    fn two_nodes_single_phase() {
        let s = round_robin_schedule(2).unwrap();
        assert_eq!(s.phase_count(), 1);
        assert_eq!(s.phase(0).target_of(0), 1);
        assert_eq!(s.phase(0).target_of(1), 0);
    }

    #[test]
    fn rejects_fewer_than_two_nodes() {
        assert!(round_robin_schedule(0).is_err());
        assert!(round_robin_schedule(1).is_err());
    }

    #[test]
    fn exhaustive_validity_up_to_64() {
        for n in 2..=64 {
            let s = round_robin_schedule(n).unwrap();
            s.validate().unwrap_or_else(|e| panic!("n={n}: {e}"));
        }
    }

    #[test]
    fn eight_nodes_all_pairs_once() {
        let s = round_robin_schedule(8).unwrap();
        s.validate().unwrap();
        let pairs: usize = s.phases().iter().map(|p| p.assignments().count()).sum();
        assert_eq!(pairs, 56);
    }

    #[test]
    fn amortization_approaches_bandwidth() {
        let bw = 4e9;
        let lat = Duration::from_micros(1);
        let big = amortization_curve(1 << 30, lat, bw, 8);
        assert!(big / bw > 0.9999);
        let at_512k = amortization_curve(512 * 1024, lat, bw, 8);
        assert!(at_512k / bw >= 0.999, "512 KiB should hide sync: {}", at_512k / bw);
        let small = amortization_curve(1024, lat, bw, 8);
        assert!(small / bw < 0.70, "1 KiB should be sync-dominated: {}", small / bw);
    }

    #[test]
    fn amortization_monotone_in_size() {
        let bw = 4e9;
        let lat = Duration::from_micros(1);
        let mut prev = 0.0;
        let mut size = 1024u64;
        while size <= 64 * 1024 * 1024 {
            let t = amortization_curve(size, lat, bw, 8);
            assert!(t >= prev);
            prev = t;
            size *= 2;
        }
    }

    #[test]
    fn runner_barrier_roundtrip() {
        let s = round_robin_schedule(2).unwrap();
        let mut a = PhaseRunner::new(s.clone(), 0, SyncPolicy::default());
        assert_eq!(a.state(false), StepState::Sending { target: 1 });
        for _ in 0..8 {
            a.note_sent();
        }
        assert_eq!(a.state(false), StepState::NeedSync { counter: 0 });
        a.note_sync_issued();
        assert_eq!(a.state(false), StepState::Waiting);
        assert!(a.note_sync_received(1, 0));
        assert_eq!(a.step_counter(), 1);
        assert_eq!(a.state(false), StepState::Sending { target: 1 });
    }

    #[test]
    fn empty_queue_still_participates() {
        let s = round_robin_schedule(3).unwrap();
        let mut r = PhaseRunner::new(s, 1, SyncPolicy::default());
        assert_eq!(r.state(true), StepState::NeedSync { counter: 0 });
        r.note_sync_issued();
        assert!(!r.note_sync_received(0, 0));
        assert!(r.note_sync_received(2, 0));
    }

    #[test]
    fn missing_peers_names_the_silent_nodes() {
        let s = round_robin_schedule(4).unwrap();
        let mut r = PhaseRunner::new(s, 1, SyncPolicy::default());
        r.note_sync_issued();
        r.note_sync_received(0, 0);
        assert_eq!(r.missing_peers(), vec![2, 3]);
        r.note_sync_received(3, 0);
        assert_eq!(r.missing_peers(), vec![2]);
    }

    #[test]
    fn peer_one_round_ahead_still_passes_barrier() {
        // Peer 1 already advanced to round 1 (it had our round-0 sync); its
        // round-1 sync must satisfy our round-0 barrier too.
        let s = round_robin_schedule(2).unwrap();
        let mut r = PhaseRunner::new(s, 0, SyncPolicy::default());
        r.note_sync_issued();
        assert!(r.note_sync_received(1, 1));
        assert_eq!(r.step_counter(), 1);
        // and the buffered counter immediately satisfies round 1 as well
        r.note_sync_issued();
        assert!(r.poll_advance());
        assert_eq!(r.step_counter(), 2);
    }
}

//! Cycle-based event core: simulated clock, priority-ordered event queue and
//! labelled random streams.
//!
//! Events at the same cycle fire by [`Priority`] class first and insertion
//! order second, so a run is a pure function of its configuration and seed.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Simulated time in whole cycles.
pub type Cycle = u64;

/// Intra-cycle ordering class. Lower variants fire first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Priority {
    Churn = 0,
    Lifecycle = 1,
    Maintenance = 2,
    Requests = 3,
    Metrics = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimClock {
    current_cycle: Cycle,
    horizon: Cycle,
}

impl SimClock {
    pub fn new(horizon: Cycle) -> Self {
        Self { current_cycle: 0, horizon }
    }

    pub fn now(&self) -> Cycle {
        self.current_cycle
    }

    pub fn horizon(&self) -> Cycle {
        self.horizon
    }

    fn advance_to(&mut self, cycle: Cycle) {
        assert!(cycle >= self.current_cycle, "clock moved backwards: {} -> {cycle}", self.current_cycle);
        self.current_cycle = cycle;
    }
}

/// Identifies one scheduled event; sequence numbers are unique per scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle {
    pub at: Cycle,
    pub priority: Priority,
    pub seq: u64,
}

#[derive(Debug)]
struct Entry<E> {
    handle: EventHandle,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.handle == other.handle
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.handle.cmp(&other.handle)
    }
}

/// Min-queue of events keyed by `(cycle, priority, insertion order)`.
#[derive(Debug)]
pub struct Scheduler<E> {
    clock: SimClock,
    queue: BinaryHeap<Reverse<Entry<E>>>,
    next_seq: u64,
    executed: u64,
}

impl<E> Scheduler<E> {
    pub fn new(horizon: Cycle) -> Self {
        Self { clock: SimClock::new(horizon), queue: BinaryHeap::new(), next_seq: 0, executed: 0 }
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    pub fn now(&self) -> Cycle {
        self.clock.now()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn executed(&self) -> u64 {
        self.executed
    }

    /// Queues `event` to fire during cycle `at`.
    ///
    /// Panics when `at` lies in the past: that is a contract violation and
    /// aborts the run.
    pub fn schedule(&mut self, event: E, at: Cycle, priority: Priority) -> EventHandle {
        assert!(at >= self.clock.now(), "event scheduled in the past (at {at}, now {})", self.clock.now());
        let handle = EventHandle { at, priority, seq: self.next_seq };
        self.next_seq += 1;
        self.queue.push(Reverse(Entry { handle, event }));
        handle
    }

    /// Pops the next event strictly before `limit`, advancing the clock to
    /// its cycle.
    pub fn next_before(&mut self, limit: Cycle) -> Option<(EventHandle, E)> {
        let due = matches!(self.queue.peek(), Some(Reverse(e)) if e.handle.at < limit);
        if !due {
            return None;
        }
        let Reverse(entry) = self.queue.pop()?;
        self.clock.advance_to(entry.handle.at);
        self.executed += 1;
        Some((entry.handle, entry.event))
    }

    /// Moves the clock forward without executing anything.
    pub fn advance_to(&mut self, cycle: Cycle) {
        self.clock.advance_to(cycle);
    }

    /// Executes every event with timestamp below `horizon` and leaves the
    /// clock at `horizon`. Handlers may schedule further events.
    pub fn run_until<F>(&mut self, horizon: Cycle, mut handler: F) -> Cycle
    where
        F: FnMut(&mut Self, EventHandle, E),
    {
        while let Some((handle, event)) = self.next_before(horizon) {
            handler(self, handle, event);
        }
        if horizon > self.clock.now() {
            self.clock.advance_to(horizon);
        }
        horizon
    }
}

/// Purpose tag of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamLabel {
    Topology,
    Churn,
    Lifecycle,
    Workload,
    Overlay,
}

impl StreamLabel {
    fn stream_id(self) -> u64 {
        match self {
            StreamLabel::Topology => 1,
            StreamLabel::Churn => 2,
            StreamLabel::Lifecycle => 3,
            StreamLabel::Workload => 4,
            StreamLabel::Overlay => 5,
        }
    }
}

/// Seeded generator for one purpose. Streams with different labels use
/// distinct ChaCha stream ids under the same key, so they never share state.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    label: StreamLabel,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: StreamLabel) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(label.stream_id());
        Self { seed, label, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> StreamLabel {
        self.label
    }
}

impl rand::RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// SplitMix64 finaliser; used wherever a stable, platform-independent hash of
/// small integers is needed.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

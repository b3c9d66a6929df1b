//! Deterministic discrete-event engine.
//!
//! Time is an integer millisecond count from simulation start. Events are
//! ordered by `(fire_at, insertion sequence)`, so events scheduled for the
//! same instant fire in the order they were inserted.
//!
//! Randomness comes from [`RandomStream`], a counter-based ChaCha stream
//! keyed by `(seed, stream_id)`. Every entity owns its own stream, so adding
//! an entity never perturbs the draws of another one.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Milliseconds since simulation start.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1000)
    }

    pub const fn as_millis(self) -> u64 {
        self.0
    }

    pub fn plus(self, ms: u64) -> Self {
        SimTime(self.0 + ms)
    }

    /// Milliseconds elapsed since `earlier`, saturating at zero.
    pub fn since(self, earlier: SimTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}

/// Identifies the entity an event is delivered to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EntityId(pub u32);

#[derive(Debug, Clone, PartialEq)]
pub struct Event<K> {
    pub fire_at: SimTime,
    pub target: EntityId,
    pub kind: K,
    pub payload: Vec<u8>,
}

impl<K> Event<K> {
    pub fn new(fire_at: SimTime, target: EntityId, kind: K) -> Self {
        Event {
            fire_at,
            target,
            kind,
            payload: Vec::new(),
        }
    }

    pub fn with_payload(mut self, payload: Vec<u8>) -> Self {
        self.payload = payload;
        self
    }
}

/// Returned by [`Scheduler::schedule`]; used to cancel a pending event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("event at {at} is in the past (clock is {now})")]
    InPast { at: SimTime, now: SimTime },
}

struct Queued<K> {
    key: Reverse<(SimTime, u64)>,
    event: Event<K>,
}

impl<K> PartialEq for Queued<K> {
    fn eq(&self, other: &Self) -> bool {
        self.key == other.key
    }
}

impl<K> Eq for Queued<K> {}

impl<K> PartialOrd for Queued<K> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<K> Ord for Queued<K> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key.cmp(&other.key)
    }
}

/// Event counters used to check the conservation property
/// `scheduled = fired + cancelled + pending`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SchedulerStats {
    pub scheduled: u64,
    pub fired: u64,
    pub cancelled: u64,
}

pub struct Scheduler<K> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Queued<K>>,
    cancelled: HashSet<u64>,
    stats: SchedulerStats,
}

impl<K> Default for Scheduler<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K> Scheduler<K> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            cancelled: HashSet::new(),
            stats: SchedulerStats::default(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn stats(&self) -> SchedulerStats {
        self.stats
    }

    /// Events still queued and not cancelled.
    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn schedule(&mut self, event: Event<K>) -> Result<EventHandle, ScheduleError> {
        if event.fire_at < self.now {
            return Err(ScheduleError::InPast {
                at: event.fire_at,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.stats.scheduled += 1;
        self.queue.push(Queued {
            key: Reverse((event.fire_at, seq)),
            event,
        });
        Ok(EventHandle(seq))
    }

    /// Cancels a pending event. Returns `false` if it already fired or was
    /// cancelled before.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        let pending = self.queue.iter().any(|q| q.key.0 .1 == handle.0);
        if pending && self.cancelled.insert(handle.0) {
            self.stats.cancelled += 1;
            true
        } else {
            false
        }
    }

    fn pop_due(&mut self, due: impl Fn(SimTime) -> bool) -> Option<Event<K>> {
        loop {
            let head = self.queue.peek()?;
            if !due(head.key.0 .0) {
                return None;
            }
            let q = self.queue.pop().expect("peeked");
            if self.cancelled.remove(&q.key.0 .1) {
                continue;
            }
            return Some(q.event);
        }
    }

    fn drive<F>(&mut self, end: SimTime, inclusive: bool, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, Event<K>),
    {
        let mut steps = 0;
        while let Some(ev) = self.pop_due(|t| if inclusive { t <= end } else { t < end }) {
            debug_assert!(ev.fire_at >= self.now);
            self.now = ev.fire_at;
            self.stats.fired += 1;
            steps += 1;
            handler(self, ev);
        }
        if end > self.now {
            self.now = end;
        }
        steps
    }

    /// Executes every event with `fire_at <= end` in order and leaves the
    /// clock at `end`. Returns the number of events executed.
    pub fn run_until<F>(&mut self, end: SimTime, handler: F) -> u64
    where
        F: FnMut(&mut Self, Event<K>),
    {
        self.drive(end, true, handler)
    }

    /// Like [`run_until`](Self::run_until) but over the half-open window:
    /// events at exactly `end` stay queued.
    pub fn run_before<F>(&mut self, end: SimTime, handler: F) -> u64
    where
        F: FnMut(&mut Self, Event<K>),
    {
        self.drive(end, false, handler)
    }
}

/// Counter-based pseudorandom stream keyed by `(seed, stream_id)`.
///
/// Draw `n` of a stream depends only on the seed, the stream id and `n`.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
    draws: u64,
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RandomStream {
            seed,
            stream_id,
            rng,
            draws: 0,
        }
    }

    /// Stream keyed by a stable label such as `"link:rooftop:karakoram"`.
    pub fn labelled(seed: u64, label: &str) -> Self {
        Self::new(seed, stream_id_for(label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.rng.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.draws += 1;
        self.rng.random::<f64>()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn range_inclusive(&mut self, lo: i64, hi: i64) -> i64 {
        self.draws += 1;
        self.rng.random_range(lo..=hi)
    }

    pub fn gaussian(&mut self, mean: f64, sd: f64) -> f64 {
        if sd <= 0.0 {
            return mean;
        }
        self.draws += 1;
        Normal::new(mean, sd)
            .expect("finite positive sd")
            .sample(&mut self.rng)
    }
}

/// Stable 64-bit stream id derived from a label.
pub fn stream_id_for(label: &str) -> u64 {
    let digest = Sha256::digest(label.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(t: u64, tag: u32) -> Event<u32> {
        Event::new(SimTime(t), EntityId(0), tag)
    }

    #[test]
    fn schedule_at_current_clock_is_accepted_and_fires_first() {
        let mut s = Scheduler::new();
        s.schedule(ev(5, 2)).unwrap();
        s.schedule(ev(0, 1)).unwrap();
        let mut seen = vec![];
        s.run_until(SimTime(10), |_, e| seen.push(e.kind));
        assert_eq!(seen, vec![1, 2]);
    }

    #[test]
    fn equal_times_fire_in_insertion_order() {
        let mut s = Scheduler::new();
        s.schedule(ev(1000, 'A' as u32)).unwrap();
        s.schedule(ev(1000, 'B' as u32)).unwrap();
        let mut seen = vec![];
        s.run_until(SimTime(1000), |_, e| {
            seen.push(char::from_u32(e.kind).unwrap())
        });
        assert_eq!(seen, vec!['A', 'B']);
    }

    #[test]
    fn past_events_are_rejected() {
        let mut s: Scheduler<u32> = Scheduler::new();
        s.run_until(SimTime(10), |_, _| {});
        assert_eq!(
            s.schedule(ev(5, 0)),
            Err(ScheduleError::InPast {
                at: SimTime(5),
                now: SimTime(10)
            })
        );
    }

    #[test]
    fn empty_queue_advances_clock() {
        let mut s: Scheduler<u32> = Scheduler::new();
        assert_eq!(s.run_until(SimTime(1000), |_, _| {}), 0);
        assert_eq!(s.now(), SimTime(1000));
    }

    #[test]
    fn run_until_excludes_later_events() {
        let mut s = Scheduler::new();
        for t in [10, 20, 30] {
            s.schedule(ev(t, 0)).unwrap();
        }
        assert_eq!(s.run_until(SimTime(25), |_, _| {}), 2);
        assert_eq!(s.now(), SimTime(25));
        assert_eq!(s.pending(), 1);
    }

    #[test]
    fn periodic_event_over_fifteen_days() {
        const PERIOD: u64 = 900_000;
        let mut s = Scheduler::new();
        s.schedule(ev(PERIOD, 0)).unwrap();
        let mut firings = 0u64;
        let end = SimTime(15 * 24 * 3600 * 1000);
        s.run_until(end, |sched, e| {
            firings += 1;
            sched.schedule(ev(e.fire_at.0 + PERIOD, 0)).unwrap();
        });
        // 15 d x 24 h x 4 per hour
        assert_eq!(firings, 15 * 24 * 4);
    }

    #[test]
    fn run_before_leaves_boundary_event_queued() {
        let mut s = Scheduler::new();
        s.schedule(ev(0, 0)).unwrap();
        s.schedule(ev(100, 1)).unwrap();
        assert_eq!(s.run_before(SimTime(100), |_, _| {}), 1);
        assert_eq!(s.now(), SimTime(100));
        assert_eq!(s.pending(), 1);
    }

    #[test]
    fn cancelled_events_never_fire_and_are_counted() {
        let mut s = Scheduler::new();
        let a = s.schedule(ev(10, 1)).unwrap();
        s.schedule(ev(20, 2)).unwrap();
        assert!(s.cancel(a));
        assert!(!s.cancel(a));
        let mut seen = vec![];
        s.run_until(SimTime(100), |_, e| seen.push(e.kind));
        assert_eq!(seen, vec![2]);
        let st = s.stats();
        assert_eq!(st.scheduled, st.fired + st.cancelled);
    }

    #[test]
    fn random_streams_are_reproducible_and_independent() {
        let mut a = RandomStream::new(7, 1);
        let mut b = RandomStream::new(7, 1);
        let mut c = RandomStream::new(7, 2);
        let xa: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..8).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        assert_eq!(a.draws(), 8);
    }
}

//! Deterministic discrete-event engine: virtual clock, ordered event queue,
//! named random streams, and run-wide traffic counters.
//!
//! Events are dispatched in nondecreasing time order; events scheduled for
//! the same instant dispatch in insertion order. Together with the seeded
//! per-stream RNGs this makes a whole run a pure function of (config, seed).

use std::cmp::Ordering;
use std::collections::{BinaryHeap, BTreeMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Virtual time in seconds.
pub type Seconds = f64;

/// Identifier of a registered random stream.
///
/// Streams keep independent state so that, e.g., mobility draws never shift
/// when protocol-side randomness is added or removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StreamId {
    Mobility,
    Protocol,
}

/// Seeded collection of independent random streams.
pub struct RngStreams {
    streams: BTreeMap<StreamId, ChaCha8Rng>,
}

impl RngStreams {
    /// Registers `streams` derived from the master `seed`. Each stream gets
    /// its own generator so sequences stay independent.
    pub fn new(seed: u64, streams: &[StreamId]) -> Self {
        let mut map = BTreeMap::new();
        for (idx, id) in streams.iter().enumerate() {
            let stream_seed = seed ^ (idx as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
            map.insert(*id, ChaCha8Rng::seed_from_u64(stream_seed));
        }
        Self { streams: map }
    }

    /// Next value in `[0, 1)` from the given stream.
    ///
    /// Panics if the stream was not registered; that is a configuration
    /// error, not a runtime condition.
    pub fn next_f64(&mut self, stream: StreamId) -> f64 {
        self.streams
            .get_mut(&stream)
            .unwrap_or_else(|| panic!("random stream {stream:?} was not registered"))
            .gen::<f64>()
    }
}

/// One recorded aggregation error: |protocol mean - ground-truth mean|.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateError {
    pub cycle: u32,
    pub segment: u32,
    pub direction: i8,
    pub abs_error: f64,
}

/// Run-wide counters. All counters are monotone nondecreasing during a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Metrics {
    /// Messages sent to the base station over the operator uplink.
    pub v2i_messages: u64,
    /// Messages sent over the free ad-hoc medium (one per transmission,
    /// regardless of receiver count).
    pub v2v_messages: u64,
    /// Per-message-kind transmission counts.
    pub per_kind: BTreeMap<String, u64>,
    /// Aggregate records received by the base station.
    pub delivered_aggregates: u64,
    /// Node-cycles in which a node heard no head announcement and stayed silent.
    pub unclustered_node_cycles: u64,
    /// Clusters whose elected head had left by the freeze instant.
    pub head_fallbacks: u64,
    /// Members excluded from a gathering tree because no in-range path to
    /// the head existed.
    pub unreachable_members: u64,
    /// Messages discarded by the timestamp/area/direction filter.
    pub filter_drops: u64,
    /// Transmissions whose receiver was out of range at send time.
    pub link_drops: u64,
    /// Tree messages that arrived after the head had closed the cycle.
    pub late_drops: u64,
    /// Tree deliveries that landed outside the gathering window.
    pub phase_overruns: u64,
    /// Per-record aggregation error against the ground-truth oracle.
    pub aggregate_errors: Vec<AggregateError>,
}

impl Metrics {
    pub fn count_v2v(&mut self, kind: &str) {
        self.v2v_messages += 1;
        *self.per_kind.entry(kind.to_string()).or_insert(0) += 1;
    }

    pub fn count_v2i(&mut self, kind: &str) {
        self.v2i_messages += 1;
        *self.per_kind.entry(kind.to_string()).or_insert(0) += 1;
    }

    /// Total events that can make an aggregate diverge from ground truth.
    pub fn drop_events(&self) -> u64 {
        self.unclustered_node_cycles
            + self.unreachable_members
            + self.filter_drops
            + self.link_drops
            + self.late_drops
    }

    pub fn max_abs_error(&self) -> f64 {
        self.aggregate_errors
            .iter()
            .map(|e| e.abs_error)
            .fold(0.0, f64::max)
    }
}

/// Virtual clock bounded by the run horizon.
#[derive(Clone, Copy, Debug)]
pub struct SimClock {
    now: Seconds,
    horizon: Seconds,
}

impl SimClock {
    pub fn new(horizon: Seconds) -> Self {
        assert!(horizon > 0.0, "horizon must be positive");
        Self { now: 0.0, horizon }
    }

    pub fn now(&self) -> Seconds {
        self.now
    }

    pub fn horizon(&self) -> Seconds {
        self.horizon
    }

    fn advance_to(&mut self, t: Seconds) {
        assert!(t >= self.now, "clock may not move backwards");
        assert!(t <= self.horizon, "clock may not pass the horizon");
        self.now = t;
    }
}

struct QueueEntry<P> {
    time: Seconds,
    seq: u64,
    payload: P,
}

impl<P> PartialEq for QueueEntry<P> {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}

impl<P> Eq for QueueEntry<P> {}

impl<P> Ord for QueueEntry<P> {
    // Reversed so the BinaryHeap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl<P> PartialOrd for QueueEntry<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// The event engine. `P` is the scenario-defined event payload.
pub struct Engine<P> {
    clock: SimClock,
    queue: BinaryHeap<QueueEntry<P>>,
    next_seq: u64,
    metrics: Metrics,
    rng: RngStreams,
}

impl<P> Engine<P> {
    pub fn new(horizon: Seconds, seed: u64, streams: &[StreamId]) -> Self {
        Self {
            clock: SimClock::new(horizon),
            queue: BinaryHeap::new(),
            next_seq: 0,
            metrics: Metrics::default(),
            rng: RngStreams::new(seed, streams),
        }
    }

    pub fn now(&self) -> Seconds {
        self.clock.now()
    }

    pub fn horizon(&self) -> Seconds {
        self.clock.horizon()
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn metrics_mut(&mut self) -> &mut Metrics {
        &mut self.metrics
    }

    pub fn rng_mut(&mut self) -> &mut RngStreams {
        &mut self.rng
    }

    /// Deterministic `[0, 1)` draw from a registered stream.
    pub fn next_random(&mut self, stream: StreamId) -> f64 {
        self.rng.next_f64(stream)
    }

    /// Number of events still enqueued (including ones past the horizon).
    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// Enqueues `payload` for dispatch at `time`.
    ///
    /// Panics if `time` is not finite or lies in the past; scheduling into
    /// the past is a programming error and must not be clamped silently.
    pub fn schedule(&mut self, time: Seconds, payload: P) {
        assert!(time.is_finite(), "event time must be finite");
        assert!(
            time >= self.clock.now(),
            "cannot schedule into the past: t={} < now={}",
            time,
            self.clock.now()
        );
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(QueueEntry { time, seq, payload });
    }

    /// Dispatches every event with `time <= min(until, horizon)` in
    /// (time, seq) order, invoking `handler` for each. Returns a snapshot of
    /// the final metrics. An empty queue terminates the loop early.
    pub fn run_until<F>(&mut self, until: Seconds, mut handler: F) -> Metrics
    where
        F: FnMut(&mut Self, P),
    {
        let bound = until.min(self.clock.horizon());
        loop {
            let ready = matches!(self.queue.peek(), Some(head) if head.time <= bound);
            if !ready {
                break;
            }
            let entry = self.queue.pop().expect("peeked entry present");
            self.clock.advance_to(entry.time);
            handler(self, entry.payload);
        }
        if bound > self.clock.now() {
            self.clock.advance_to(bound);
        }
        self.metrics.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispatches_in_time_order() {
        let mut engine: Engine<u32> = Engine::new(600.0, 0, &[]);
        engine.schedule(3.0, 3);
        engine.schedule(1.0, 1);
        engine.schedule(2.0, 2);
        let mut log = Vec::new();
        engine.run_until(600.0, |eng, p| log.push((eng.now(), p)));
        assert_eq!(log, vec![(1.0, 1), (2.0, 2), (3.0, 3)]);
    }

    #[test]
    fn equal_times_dispatch_in_insertion_order() {
        let mut engine: Engine<&str> = Engine::new(10.0, 0, &[]);
        engine.schedule(1.0, "a");
        engine.schedule(1.0, "b");
        let mut log = Vec::new();
        engine.run_until(10.0, |_, p| log.push(p));
        assert_eq!(log, vec!["a", "b"]);
    }

    #[test]
    fn dispatch_at_time_zero() {
        let mut engine: Engine<&str> = Engine::new(600.0, 0, &[]);
        engine.schedule(0.0, "cycle-start");
        let mut log = Vec::new();
        engine.run_until(600.0, |eng, p| log.push((eng.now(), p)));
        assert_eq!(log, vec![(0.0, "cycle-start")]);
    }

    #[test]
    fn events_past_horizon_never_dispatch() {
        let mut engine: Engine<&str> = Engine::new(600.0, 0, &[]);
        engine.schedule(601.0, "late");
        let mut log = Vec::new();
        engine.run_until(600.0, |_, p| log.push(p));
        assert!(log.is_empty());
        assert_eq!(engine.pending(), 1);
        assert_eq!(engine.now(), 600.0);
    }

    #[test]
    fn empty_queue_run_returns_zeroed_metrics() {
        let mut engine: Engine<u8> = Engine::new(600.0, 0, &[]);
        let metrics = engine.run_until(600.0, |_, _| {});
        assert_eq!(metrics, Metrics::default());
    }

    #[test]
    #[should_panic(expected = "cannot schedule into the past")]
    fn scheduling_in_the_past_panics() {
        let mut engine: Engine<u8> = Engine::new(10.0, 0, &[]);
        engine.schedule(2.0, 0);
        engine.run_until(10.0, |eng, _| eng.schedule(1.0, 1));
    }

    #[test]
    fn handler_may_schedule_followups() {
        let mut engine: Engine<u32> = Engine::new(10.0, 0, &[]);
        engine.schedule(1.0, 0);
        let mut log = Vec::new();
        engine.run_until(10.0, |eng, p| {
            log.push(p);
            if p < 3 {
                eng.schedule(eng.now() + 1.0, p + 1);
            }
        });
        assert_eq!(log, vec![0, 1, 2, 3]);
    }

    #[test]
    fn same_seed_same_stream_reproduces_draws() {
        let mut a = RngStreams::new(42, &[StreamId::Mobility]);
        let mut b = RngStreams::new(42, &[StreamId::Mobility]);
        for _ in 0..1000 {
            assert_eq!(a.next_f64(StreamId::Mobility), b.next_f64(StreamId::Mobility));
        }
    }

    #[test]
    fn draws_stay_in_unit_interval() {
        let mut rng = RngStreams::new(7, &[StreamId::Mobility]);
        for _ in 0..1_000_000 {
            let v = rng.next_f64(StreamId::Mobility);
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn distinct_streams_produce_distinct_sequences() {
        let mut rng = RngStreams::new(42, &[StreamId::Mobility, StreamId::Protocol]);
        let a: Vec<f64> = (0..100).map(|_| rng.next_f64(StreamId::Mobility)).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.next_f64(StreamId::Protocol)).collect();
        assert_ne!(a, b);
    }

    #[test]
    #[should_panic(expected = "was not registered")]
    fn unregistered_stream_panics() {
        let mut rng = RngStreams::new(42, &[StreamId::Mobility]);
        rng.next_f64(StreamId::Protocol);
    }

    #[test]
    fn metrics_counting_is_per_medium() {
        let mut m = Metrics::default();
        m.count_v2v("hello");
        m.count_v2v("hello");
        m.count_v2i("node_report");
        assert_eq!(m.v2v_messages, 2);
        assert_eq!(m.v2i_messages, 1);
        assert_eq!(m.per_kind["hello"], 2);
        assert_eq!(m.per_kind["node_report"], 1);
    }
}

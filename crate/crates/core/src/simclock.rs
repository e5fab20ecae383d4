//! Deterministic discrete-event engine.
//!
//! Events are totally ordered by `(time, seq)`, where `seq` is the insertion
//! counter, so same-time events run in the order they were scheduled and two
//! runs of the same program produce identical traces.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::types::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    RequestArrival,
    ScheduleTick,
    EndForward,
    WatchdogExpiry,
    TopologyChange,
    DecodeStep,
    /// Dispatched tokens reach the device after the network latency.
    Delivery,
    /// Periodic metrics sample.
    Sample,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventKind::RequestArrival => "RequestArrival",
            EventKind::ScheduleTick => "ScheduleTick",
            EventKind::EndForward => "EndForward",
            EventKind::WatchdogExpiry => "WatchdogExpiry",
            EventKind::TopologyChange => "TopologyChange",
            EventKind::DecodeStep => "DecodeStep",
            EventKind::Delivery => "Delivery",
            EventKind::Sample => "Sample",
        };
        f.write_str(s)
    }
}

/// Payloads that can describe themselves in a trace line.
pub trait Traced {
    fn kind(&self) -> EventKind;
    fn summary(&self) -> String;
}

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub time: SimTime,
    pub seq: u64,
    pub payload: P,
}

impl<P> PartialEq for Event<P> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}

impl<P> Eq for Event<P> {}

impl<P> PartialOrd for Event<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Event<P> {
    // Reversed so the max-heap pops the earliest (time, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("event scheduled at {at} but the clock is already at {now}")]
pub struct PastEventError {
    pub at: SimTime,
    pub now: SimTime,
}

pub struct EventQueue<P> {
    heap: BinaryHeap<Event<P>>,
    now: SimTime,
    next_seq: u64,
    processed: u64,
    trace: Option<String>,
}

impl<P> Default for EventQueue<P> {
    fn default() -> Self {
        Self::new()
    }
}

impl<P> EventQueue<P> {
    pub fn new() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            now: SimTime::ZERO,
            next_seq: 0,
            processed: 0,
            trace: None,
        }
    }

    /// Starts recording one tab-separated line per processed event.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(String::new);
    }

    pub fn take_trace(&mut self) -> Option<String> {
        self.trace.take()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.heap.peek().map(|e| e.time)
    }

    /// Enqueues `payload` at `time` and returns its sequence number.
    pub fn schedule(&mut self, time: SimTime, payload: P) -> Result<u64, PastEventError> {
        if time < self.now {
            return Err(PastEventError {
                at: time,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { time, seq, payload });
        Ok(seq)
    }

    /// Schedules `delay_ns` after the current clock.
    pub fn schedule_in(&mut self, delay_ns: u64, payload: P) -> u64 {
        let at = self.now + delay_ns;
        self.schedule(at, payload).expect("future event")
    }
}

impl<P: Traced> EventQueue<P> {
    /// Pops the next event if it is due at or before `t_end`, advancing the clock.
    pub fn pop_until(&mut self, t_end: SimTime) -> Option<Event<P>> {
        if self.heap.peek()?.time > t_end {
            return None;
        }
        let ev = self.heap.pop()?;
        debug_assert!(ev.time >= self.now);
        self.now = ev.time;
        self.processed += 1;
        if let Some(trace) = self.trace.as_mut() {
            let _ = writeln!(
                trace,
                "{}\t{}\t{}\t{}",
                ev.time.as_nanos(),
                ev.seq,
                ev.payload.kind(),
                ev.payload.summary()
            );
        }
        Some(ev)
    }

    /// Processes every event with `time <= t_end` in order, then sets the
    /// clock to `t_end`. Returns the number of events processed.
    pub fn run_until<F>(&mut self, t_end: SimTime, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, Event<P>),
    {
        assert!(t_end >= self.now, "run_until into the past");
        let mut count = 0;
        while let Some(ev) = self.pop_until(t_end) {
            handler(self, ev);
            count += 1;
        }
        self.now = t_end;
        count
    }
}

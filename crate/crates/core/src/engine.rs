//! Discrete-event core: a time-ordered queue with cancellable handles and a
//! tab-separated trace sink.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt::Write as _;

use thiserror::Error;

use crate::model::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventHandle(u64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("cannot schedule at {at} (clock is already at {now})")]
    InThePast { at: SimTime, now: SimTime },
}

struct Queued<E> {
    fire_at: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Queued<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.fire_at, self.seq) == (other.fire_at, other.seq)
    }
}

impl<E> Eq for Queued<E> {}

impl<E> PartialOrd for Queued<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Queued<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.fire_at, self.seq).cmp(&(other.fire_at, other.seq))
    }
}

/// Events fire in `(fire_at, seq)` order where `seq` is assigned at
/// scheduling time, so equal-time events keep their scheduling order.
pub struct Engine<E> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Queued<E>>>,
    cancelled: BTreeSet<u64>,
    fired: u64,
}

impl<E> Default for Engine<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Engine<E> {
    pub fn new() -> Self {
        Engine {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            cancelled: BTreeSet::new(),
            fired: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn fired(&self) -> u64 {
        self.fired
    }

    pub fn pending(&self) -> usize {
        self.queue.len() - self.cancelled.len()
    }

    pub fn schedule(&mut self, fire_at: SimTime, event: E) -> Result<EventHandle, EngineError> {
        if fire_at < self.now {
            return Err(EngineError::InThePast { at: fire_at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued { fire_at, seq, event }));
        Ok(EventHandle(seq))
    }

    /// Schedules `delay` after the current clock; never fails.
    pub fn schedule_in(&mut self, delay: SimTime, event: E) -> EventHandle {
        self.schedule(self.now + delay, event)
            .expect("relative schedule cannot be in the past")
    }

    /// Returns false if the event already fired or was cancelled before.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if self.queue.iter().any(|Reverse(q)| q.seq == handle.0) {
            self.cancelled.insert(handle.0)
        } else {
            false
        }
    }

    /// Pops the next live event with `fire_at <= deadline`, advancing the clock.
    pub fn next_event(&mut self, deadline: SimTime) -> Option<(SimTime, E)> {
        loop {
            let head = self.queue.peek()?;
            if head.0.fire_at > deadline {
                return None;
            }
            let Reverse(q) = self.queue.pop().expect("peeked");
            if self.cancelled.remove(&q.seq) {
                continue;
            }
            self.now = q.fire_at;
            self.fired += 1;
            return Some((q.fire_at, q.event));
        }
    }

    /// Processes every event due by `deadline`, then parks the clock at
    /// `deadline` and returns it.
    pub fn run_until<F>(&mut self, deadline: SimTime, mut handler: F) -> SimTime
    where
        F: FnMut(&mut Self, SimTime, E),
    {
        while let Some((at, ev)) = self.next_event(deadline) {
            handler(self, at, ev);
        }
        if deadline > self.now {
            self.now = deadline;
        }
        self.now
    }
}

/// Event trace, one line per record: `time_us<TAB>kind<TAB>device<TAB>detail`.
#[derive(Debug, Default, Clone)]
pub struct Trace {
    enabled: bool,
    text: String,
    lines: usize,
}

impl Trace {
    pub fn new(enabled: bool) -> Self {
        Trace { enabled, ..Default::default() }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    /// `detail` is only evaluated when tracing is on.
    pub fn record<D, F>(&mut self, at: SimTime, kind: &str, device: D, detail: F)
    where
        D: std::fmt::Display,
        F: FnOnce() -> String,
    {
        if !self.enabled {
            return;
        }
        let _ = writeln!(self.text, "{}\t{}\t{}\t{}", at.as_micros(), kind, device, detail());
        self.lines += 1;
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

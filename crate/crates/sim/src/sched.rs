use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;

use creditnet_core::Tick;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EventKind {
    Broadcast,
    Deliver,
    Respond,
    Accept,
    Multisig,
    Settle,
    Stabilize,
    BailoutStep,
    ReEmbed,
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            EventKind::Broadcast => "broadcast",
            EventKind::Deliver => "deliver",
            EventKind::Respond => "respond",
            EventKind::Accept => "accept",
            EventKind::Multisig => "multisig",
            EventKind::Settle => "settle",
            EventKind::Stabilize => "stabilize",
            EventKind::BailoutStep => "bailout-step",
            EventKind::ReEmbed => "re-embed",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event<P> {
    pub at: Tick,
    pub seq: u64,
    pub kind: EventKind,
    pub payload: P,
}

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        (self.0.at, self.0.seq) == (other.0.at, other.0.seq)
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.0.at, self.0.seq).cmp(&(other.0.at, other.0.seq))
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("event at tick {at} is not after current tick {now}")]
    NotInFuture { at: Tick, now: Tick },
}

/// Single-threaded event queue. Events run in `(at, insertion order)`;
/// once running, new events must land strictly after the current tick.
pub struct Scheduler<P> {
    queue: BinaryHeap<Reverse<Queued<P>>>,
    now: Tick,
    next_seq: u64,
    started: bool,
    trace: Vec<String>,
}

impl<P> Default for Scheduler<P> {
    fn default() -> Self {
        Self {
            queue: BinaryHeap::new(),
            now: 0,
            next_seq: 0,
            started: false,
            trace: Vec::new(),
        }
    }
}

impl<P: fmt::Debug> Scheduler<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    /// One line per processed event.
    pub fn trace(&self) -> &[String] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<String> {
        self.trace
    }

    pub fn schedule(
        &mut self,
        at: Tick,
        kind: EventKind,
        payload: P,
    ) -> Result<u64, ScheduleError> {
        if at < self.now || (self.started && at == self.now) {
            return Err(ScheduleError::NotInFuture { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued(Event {
            at,
            seq,
            kind,
            payload,
        })));
        Ok(seq)
    }

    pub fn pop(&mut self) -> Option<Event<P>> {
        let Reverse(Queued(ev)) = self.queue.pop()?;
        self.started = true;
        self.now = ev.at;
        self.trace
            .push(format!("{} {} {} {:?}", ev.at, ev.seq, ev.kind, ev.payload));
        Some(ev)
    }

    /// Drains the queue through `handler`. Stops at the first error.
    pub fn run<S, E, F>(&mut self, state: &mut S, mut handler: F) -> Result<usize, E>
    where
        F: FnMut(&mut Self, &mut S, Event<P>) -> Result<(), E>,
    {
        let mut n = 0;
        while let Some(ev) = self.pop() {
            handler(self, state, ev)?;
            n += 1;
        }
        Ok(n)
    }
}

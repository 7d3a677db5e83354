//! Discrete-event timeline.
//!
//! Events are ordered by `(fire_time, sequence)`, where the sequence number is
//! handed out at scheduling time. Two events that fire at the same microsecond
//! are therefore dispatched in the order they were scheduled.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Microseconds since the start of a simulation.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * 1000)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    /// Microseconds elapsed since `earlier`, saturating at zero.
    pub fn since(self, earlier: SimTime) -> u64 {
        self.0.saturating_sub(earlier.0)
    }
}

impl Add<u64> for SimTime {
    type Output = SimTime;

    fn add(self, us: u64) -> SimTime {
        SimTime(self.0 + us)
    }
}

impl Sub<SimTime> for SimTime {
    type Output = u64;

    fn sub(self, rhs: SimTime) -> u64 {
        self.0 - rhs.0
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Identifies a scheduled event so it can be cancelled later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EventHandle(u64);

impl EventHandle {
    pub fn sequence(self) -> u64 {
        self.0
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("event scheduled at {at} but the timeline is already at {now}")]
    ScheduledInPast { at: SimTime, now: SimTime },
}

/// Whether the run drained its queue or stopped at the limit with events left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Quiescent,
    Timeout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimulationReport {
    pub status: RunStatus,
    pub final_time: SimTime,
    pub dispatched: u64,
}

/// Default quiescence limit: 30 s of simulated time.
pub const DEFAULT_LIMIT: SimTime = SimTime::from_millis(30_000);

/// Priority queue of pending events with cancellation support.
#[derive(Debug)]
pub struct Scheduler<E> {
    now: SimTime,
    next_seq: u64,
    heap: BinaryHeap<Reverse<(SimTime, u64)>>,
    pending: HashMap<u64, E>,
    dispatched: u64,
    cancelled: u64,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_seq: 0,
            heap: BinaryHeap::new(),
            pending: HashMap::new(),
            dispatched: 0,
            cancelled: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn cancelled(&self) -> u64 {
        self.cancelled
    }

    pub fn schedule(&mut self, fire_time: SimTime, payload: E) -> Result<EventHandle, SimError> {
        if fire_time < self.now {
            return Err(SimError::ScheduledInPast {
                at: fire_time,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((fire_time, seq)));
        self.pending.insert(seq, payload);
        Ok(EventHandle(seq))
    }

    /// Returns `true` if the event was still pending.
    pub fn cancel(&mut self, handle: EventHandle) -> bool {
        if self.pending.remove(&handle.0).is_some() {
            self.cancelled += 1;
            true
        } else {
            false
        }
    }

    pub fn is_pending(&self, handle: EventHandle) -> bool {
        self.pending.contains_key(&handle.0)
    }

    fn peek_time(&mut self) -> Option<SimTime> {
        while let Some(Reverse((time, seq))) = self.heap.peek().copied() {
            if self.pending.contains_key(&seq) {
                return Some(time);
            }
            self.heap.pop();
        }
        None
    }

    /// Removes the next live event and advances the clock to its fire time.
    pub fn pop(&mut self) -> Option<(SimTime, EventHandle, E)> {
        while let Some(Reverse((time, seq))) = self.heap.pop() {
            if let Some(payload) = self.pending.remove(&seq) {
                debug_assert!(time >= self.now);
                self.now = time;
                self.dispatched += 1;
                return Some((time, EventHandle(seq), payload));
            }
        }
        None
    }

    /// Dispatches events in order until the queue drains or the next event
    /// lies beyond `limit`. The handler may schedule further events.
    pub fn run_until_quiescent<F, Err>(
        &mut self,
        limit: SimTime,
        mut handler: F,
    ) -> Result<SimulationReport, Err>
    where
        F: FnMut(&mut Self, SimTime, E) -> Result<(), Err>,
    {
        let start = self.dispatched;
        loop {
            match self.peek_time() {
                None => {
                    return Ok(SimulationReport {
                        status: RunStatus::Quiescent,
                        final_time: self.now,
                        dispatched: self.dispatched - start,
                    })
                }
                Some(t) if t > limit => {
                    self.now = limit;
                    return Ok(SimulationReport {
                        status: RunStatus::Timeout,
                        final_time: limit,
                        dispatched: self.dispatched - start,
                    });
                }
                Some(_) => {
                    let (time, _, payload) = self.pop().expect("peeked event exists");
                    handler(self, time, payload)?;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn drain(s: &mut Scheduler<&'static str>, limit: SimTime) -> (SimulationReport, Vec<(u64, &'static str)>) {
        let mut seen = Vec::new();
        let report = s
            .run_until_quiescent(limit, |_, t, e| {
                seen.push((t.0, e));
                Ok::<_, Infallible>(())
            })
            .unwrap();
        (report, seen)
    }

    #[test]
    fn fires_at_scheduled_time() {
        let mut s = Scheduler::new();
        s.schedule(SimTime(4500), "delivery").unwrap();
        let (report, seen) = drain(&mut s, DEFAULT_LIMIT);
        assert_eq!(seen, vec![(4500, "delivery")]);
        assert_eq!(report.final_time, SimTime(4500));
        assert_eq!(report.status, RunStatus::Quiescent);
    }

    #[test]
    fn equal_times_dispatch_in_scheduling_order() {
        let mut s = Scheduler::new();
        s.schedule(SimTime(10), "b").unwrap();
        s.schedule(SimTime(5), "a").unwrap();
        s.schedule(SimTime(10), "c").unwrap();
        let (_, seen) = drain(&mut s, DEFAULT_LIMIT);
        assert_eq!(seen, vec![(5, "a"), (10, "b"), (10, "c")]);
    }

    #[test]
    fn scheduling_in_the_past_is_fatal() {
        let mut s = Scheduler::new();
        s.schedule(SimTime(100), "x").unwrap();
        s.pop();
        assert_eq!(
            s.schedule(SimTime(99), "late"),
            Err(SimError::ScheduledInPast {
                at: SimTime(99),
                now: SimTime(100)
            })
        );
    }

    #[test]
    fn cancel_semantics() {
        let mut s = Scheduler::new();
        let pto = s.schedule(SimTime(36_000), "pto").unwrap();
        let other = s.schedule(SimTime(1), "other").unwrap();
        assert!(s.cancel(pto));
        assert!(!s.cancel(pto));
        let (_, seen) = drain(&mut s, DEFAULT_LIMIT);
        assert_eq!(seen, vec![(1, "other")]);
        assert!(!s.cancel(other));
        assert_eq!(s.cancelled(), 1);
        assert_eq!(s.dispatched(), 1);
    }

    #[test]
    fn empty_queue_reports_zero() {
        let mut s: Scheduler<&'static str> = Scheduler::new();
        let (report, _) = drain(&mut s, DEFAULT_LIMIT);
        assert_eq!(report.final_time, SimTime::ZERO);
        assert_eq!(report.dispatched, 0);
        assert_eq!(report.status, RunStatus::Quiescent);
    }

    #[test]
    fn limit_yields_timeout() {
        let mut s = Scheduler::new();
        s.schedule(SimTime(9000), "early").unwrap();
        s.schedule(SimTime(20_000_000), "late").unwrap();
        let (report, seen) = drain(&mut s, SimTime(10_000_000));
        assert_eq!(seen.len(), 1);
        assert_eq!(report.status, RunStatus::Timeout);
        assert_eq!(report.final_time, SimTime(10_000_000));
    }

    #[test]
    fn handler_can_schedule_follow_ups() {
        let mut s = Scheduler::new();
        s.schedule(SimTime(0), 3u32).unwrap();
        let mut count = 0;
        s.run_until_quiescent(DEFAULT_LIMIT, |s, t, n| {
            count += 1;
            if n > 0 {
                s.schedule(t + 10, n - 1)?;
            }
            Ok::<_, SimError>(())
        })
        .unwrap();
        assert_eq!(count, 4);
        assert_eq!(s.now(), SimTime(30));
    }
}

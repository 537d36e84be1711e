use std::cmp::Reverse;
use std::collections::BinaryHeap;

use thiserror::Error;

/// Simulated time in integer nanoseconds.
pub type Nanos = u64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("event at {at} ns scheduled in the past (now = {now} ns)")]
    InPast { at: Nanos, now: Nanos },
}

struct Slot<E> {
    at: Nanos,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Slot<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Slot<E> {}

impl<E> PartialOrd for Slot<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Slot<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Stable priority queue of timed events.
///
/// Events pop in `(at, insertion order)` order, so same-timestamp events
/// fire in the order they were scheduled.
pub struct Scheduler<E> {
    heap: BinaryHeap<Reverse<Slot<E>>>,
    now: Nanos,
    seq: u64,
}

impl<E> Default for Scheduler<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Scheduler<E> {
    pub fn new() -> Self {
        Self { heap: BinaryHeap::new(), now: 0, seq: 0 }
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, at: Nanos, event: E) -> Result<(), ScheduleError> {
        if at < self.now {
            return Err(ScheduleError::InPast { at, now: self.now });
        }
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse(Slot { at, seq, event }));
        Ok(())
    }

    pub fn peek_time(&self) -> Option<Nanos> {
        self.heap.peek().map(|Reverse(s)| s.at)
    }

    /// Pops the next event if it is due at or before `t_end`, advancing
    /// the clock to its timestamp.
    pub fn pop_until(&mut self, t_end: Nanos) -> Option<(Nanos, E)> {
        match self.heap.peek() {
            Some(Reverse(s)) if s.at <= t_end => {}
            _ => return None,
        }
        let Reverse(slot) = self.heap.pop()?;
        self.now = slot.at;
        Some((slot.at, slot.event))
    }

    /// Moves the clock to `t` for an event delivered from outside the
    /// queue.
    pub fn advance_to(&mut self, t: Nanos) {
        self.now = self.now.max(t);
    }

    pub fn pop(&mut self) -> Option<(Nanos, E)> {
        self.pop_until(Nanos::MAX)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_timestamp_fires_in_insertion_order() {
        let mut s = Scheduler::new();
        s.schedule(10, "a").unwrap();
        s.schedule(10, "b").unwrap();
        s.schedule(10, "c").unwrap();
        s.schedule(5, "first").unwrap();
        let order: Vec<_> = std::iter::from_fn(|| s.pop()).map(|(_, e)| e).collect();
        assert_eq!(order, ["first", "a", "b", "c"]);
    }

    #[test]
    fn rejects_past() {
        let mut s = Scheduler::new();
        s.schedule(100, ()).unwrap();
        s.pop();
        assert_eq!(s.schedule(99, ()), Err(ScheduleError::InPast { at: 99, now: 100 }));
        assert!(s.schedule(100, ()).is_ok());
    }

    #[test]
    fn empty_queue_yields_nothing() {
        let mut s: Scheduler<()> = Scheduler::new();
        assert!(s.pop().is_none());
        assert_eq!(s.now(), 0);
    }

    #[test]
    fn pop_until_respects_horizon() {
        let mut s = Scheduler::new();
        s.schedule(50, 1).unwrap();
        s.schedule(150, 2).unwrap();
        assert_eq!(s.pop_until(100), Some((50, 1)));
        assert_eq!(s.pop_until(100), None);
        assert_eq!(s.now(), 50);
        assert_eq!(s.len(), 1);
    }
}

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use crate::error::Error;

/// One sample tagged with its source index and arrival time.
pub(crate) struct Stamped {
    pub index: usize,
    pub values: Vec<f32>,
    pub at: Instant,
}

struct State {
    buf: VecDeque<Stamped>,
    closed: bool,
    abandoned: bool,
    dropped: usize,
    error: Option<Error>,
}

/// Bounded single-producer single-consumer queue. The producer either drops
/// the oldest entry when full (clocked sources) or waits for room
/// (lossless replay).
pub(crate) struct SampleQueue {
    capacity: usize,
    state: Mutex<State>,
    changed: Condvar,
}

impl SampleQueue {
    pub fn new(capacity: usize) -> Self {
        SampleQueue {
            capacity: capacity.max(1),
            state: Mutex::new(State {
                buf: VecDeque::new(),
                closed: false,
                abandoned: false,
                dropped: 0,
                error: None,
            }),
            changed: Condvar::new(),
        }
    }

    /// Never waits; evicts the oldest queued sample when full. Returns false
    /// once the consumer has gone away.
    pub fn push_drop_oldest(&self, item: Stamped) -> bool {
        let mut s = self.state.lock().expect("queue lock");
        if s.abandoned {
            return false;
        }
        if s.buf.len() >= self.capacity {
            s.buf.pop_front();
            s.dropped += 1;
        }
        s.buf.push_back(item);
        self.changed.notify_all();
        true
    }

    pub fn push_blocking(&self, item: Stamped) -> bool {
        let mut s = self.state.lock().expect("queue lock");
        while s.buf.len() >= self.capacity && !s.abandoned {
            s = self.changed.wait(s).expect("queue lock");
        }
        if s.abandoned {
            return false;
        }
        s.buf.push_back(item);
        self.changed.notify_all();
        true
    }

    /// Consumer-side shutdown: wakes and stops the producer.
    pub fn abandon(&self) {
        let mut s = self.state.lock().expect("queue lock");
        s.abandoned = true;
        s.buf.clear();
        self.changed.notify_all();
    }

    pub fn close(&self, error: Option<Error>) {
        let mut s = self.state.lock().expect("queue lock");
        s.closed = true;
        if s.error.is_none() {
            s.error = error;
        }
        self.changed.notify_all();
    }

    /// Waits for at least one sample and takes everything queued. Returns an
    /// empty batch once the producer has closed and the queue is drained.
    pub fn pop_all(&self, out: &mut Vec<Stamped>) -> usize {
        let mut s = self.state.lock().expect("queue lock");
        while s.buf.is_empty() && !s.closed {
            s = self.changed.wait(s).expect("queue lock");
        }
        let depth = s.buf.len();
        out.extend(s.buf.drain(..));
        self.changed.notify_all();
        depth
    }

    pub fn finish(&self) -> (usize, Option<Error>) {
        let mut s = self.state.lock().expect("queue lock");
        (s.dropped, s.error.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(i: usize) -> Stamped {
        Stamped {
            index: i,
            values: vec![i as f32],
            at: Instant::now(),
        }
    }

    #[test]
    fn drop_oldest_keeps_newest() {
        let q = SampleQueue::new(2);
        for i in 0..5 {
            q.push_drop_oldest(item(i));
        }
        q.close(None);
        let mut out = Vec::new();
        q.pop_all(&mut out);
        assert_eq!(out.iter().map(|s| s.index).collect::<Vec<_>>(), vec![3, 4]);
        assert_eq!(q.finish().0, 3);
    }

    #[test]
    fn blocking_push_waits_for_consumer() {
        let q = SampleQueue::new(1);
        std::thread::scope(|s| {
            s.spawn(|| {
                for i in 0..100 {
                    q.push_blocking(item(i));
                }
                q.close(None);
            });
            let mut seen = Vec::new();
            let mut batch = Vec::new();
            loop {
                batch.clear();
                q.pop_all(&mut batch);
                if batch.is_empty() {
                    break;
                }
                seen.extend(batch.iter().map(|s| s.index));
            }
            assert_eq!(seen, (0..100).collect::<Vec<_>>());
        });
        assert_eq!(q.finish().0, 0);
    }
}

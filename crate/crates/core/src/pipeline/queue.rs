//! Bounded producer/consumer queue.
//!
//! `workers` threads produce items `0..count`, the calling thread consumes
//! them. At most `capacity` items are produced ahead of the consumer, so
//! memory stays bounded. In ordered mode items are consumed in index order
//! whatever the scheduling; otherwise they are consumed as they complete.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};

struct State<T> {
    next_claim: usize,
    consumed: usize,
    ready: BTreeMap<usize, T>,
    stop: bool,
}

/// Statistics of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct QueueStats {
    pub produced: usize,
    /// Most items that were ever buffered at once.
    pub peak_buffered: usize,
}

/// Run `produce(i)` for every `i < count` on `workers` threads and hand
/// each result to `consume(i, item)` on the calling thread. When `consume`
/// returns `false`, production stops and `run` returns early.
pub fn run<T, P, C>(count: usize, workers: usize, capacity: usize, ordered: bool, produce: P, mut consume: C) -> QueueStats
where
    T: Send,
    P: Fn(usize) -> T + Sync,
    C: FnMut(usize, T) -> bool,
{
    let capacity = capacity.max(1);
    let workers = workers.clamp(1, count.max(1));
    let state = Mutex::new(State {
        next_claim: 0,
        consumed: 0,
        ready: BTreeMap::new(),
        stop: false,
    });
    let changed = Condvar::new();
    let mut stats = QueueStats::default();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = {
                    let mut s = state.lock().expect("queue lock");
                    loop {
                        if s.stop || s.next_claim >= count {
                            return;
                        }
                        if s.next_claim < s.consumed + capacity {
                            break;
                        }
                        s = changed.wait(s).expect("queue lock");
                    }
                    s.next_claim += 1;
                    s.next_claim - 1
                };
                let item = produce(index);
                let mut s = state.lock().expect("queue lock");
                s.ready.insert(index, item);
                changed.notify_all();
            });
        }

        for _ in 0..count {
            let (index, item) = {
                let mut s = state.lock().expect("queue lock");
                loop {
                    let key = if ordered {
                        let want = s.consumed;
                        s.ready.contains_key(&want).then_some(want)
                    } else {
                        s.ready.keys().next().copied()
                    };
                    if let Some(k) = key {
                        stats.peak_buffered = stats.peak_buffered.max(s.ready.len());
                        let item = s.ready.remove(&k).expect("present");
                        s.consumed += 1;
                        changed.notify_all();
                        break (k, item);
                    }
                    s = changed.wait(s).expect("queue lock");
                }
            };
            stats.produced += 1;
            if !consume(index, item) {
                let mut s = state.lock().expect("queue lock");
                s.stop = true;
                changed.notify_all();
                break;
            }
        }
    });
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn ordered_delivery_and_bound() {
        for workers in [1, 3] {
            let mut seen = Vec::new();
            let stats = run(50, workers, 4, true, |i| i * i, |i, v| {
                assert_eq!(v, i * i);
                seen.push(i);
                true
            });
            assert_eq!(seen, (0..50).collect::<Vec<_>>());
            assert!(stats.peak_buffered <= 4);
        }
    }

    #[test]
    fn producers_never_run_ahead_of_capacity() {
        let consumed = AtomicUsize::new(0);
        run(
            40,
            4,
            2,
            true,
            // the item currently inside `consume` is not yet counted
            |i| assert!(i < consumed.load(Ordering::SeqCst) + 2 + 1),
            |_, _| {
                consumed.fetch_add(1, Ordering::SeqCst);
                true
            },
        );
    }

    #[test]
    fn unordered_delivers_everything_once() {
        let mut seen = Vec::new();
        run(30, 3, 3, false, |i| i, |i, _| {
            seen.push(i);
            true
        });
        seen.sort();
        assert_eq!(seen, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn early_stop() {
        let mut n = 0;
        let stats = run(100, 2, 2, true, |i| i, |_, _| {
            n += 1;
            n < 5
        });
        assert_eq!(stats.produced, 5);
    }
}

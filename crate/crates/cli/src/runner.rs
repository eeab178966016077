//! Work queue over manifest entries with a single result consumer.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

/// Runs `work` over `items` on up to `workers` threads and hands every result
/// to `sink` on the calling thread, in completion order.
///
/// With `fail_fast`, no new item is started once `sink` has seen an error.
/// Returns the number of failed items.
pub fn run_queue<I, T, E, W, S>(items: &[I], workers: usize, fail_fast: bool, work: W, mut sink: S) -> usize
where
    I: Sync,
    T: Send,
    E: Send,
    W: Fn(&I) -> Result<T, E> + Sync,
    S: FnMut(usize, Result<T, E>) -> Result<(), E>,
{
    let failures = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let mut record = |index: usize, result: Result<T, E>| {
        if sink(index, result).is_err() {
            failures.fetch_add(1, Ordering::Relaxed);
            if fail_fast {
                stop.store(true, Ordering::Relaxed);
            }
        }
    };

    if workers <= 1 || items.len() <= 1 {
        for (i, item) in items.iter().enumerate() {
            if stop.load(Ordering::Relaxed) {
                break;
            }
            record(i, work(item));
        }
        return failures.into_inner();
    }

    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    thread::scope(|scope| {
        for _ in 0..workers.min(items.len()) {
            let tx = tx.clone();
            let (next, stop, work) = (&next, &stop, &work);
            scope.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                if tx.send((i, work(item))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for (i, result) in rx {
            record(i, result);
        }
    });
    failures.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_serial_see_the_same_results() {
        let items: Vec<u32> = (0..50).collect();
        for workers in [1, 4] {
            let mut seen = vec![None; items.len()];
            let failures = run_queue(
                &items,
                workers,
                false,
                |x| if x % 7 == 3 { Err(*x) } else { Ok(x * 2) },
                |i, r| {
                    seen[i] = Some(r);
                    match seen[i] {
                        Some(Err(e)) => Err(e),
                        _ => Ok(()),
                    }
                },
            );
            assert_eq!(failures, 7);
            for (i, s) in seen.iter().enumerate() {
                let expected = if i % 7 == 3 { Err(i as u32) } else { Ok(2 * i as u32) };
                assert_eq!(s.as_ref().unwrap(), &expected);
            }
        }
    }

    #[test]
    fn fail_fast_stops_serial_queue() {
        let items = [1, 2, 3, 4];
        let mut count = 0;
        let failures = run_queue(&items, 1, true, |x| if *x == 2 { Err(()) } else { Ok(()) }, |_, r| {
            count += 1;
            r
        });
        assert_eq!((failures, count), (1, 2));
    }
}

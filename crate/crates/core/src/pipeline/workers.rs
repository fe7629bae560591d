use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

/// Runs `work` over `items` on up to `parallelism` scoped threads. Results
/// reach `on_result` on the calling thread, which is the single writer. An
/// error from `on_result` stops further items from starting. At most one
/// item per worker is in flight; those results are discarded on error.
pub fn run_items<I, T, E>(
    items: &[I],
    parallelism: usize,
    work: impl Fn(&I) -> T + Sync,
    mut on_result: impl FnMut(usize, T) -> Result<(), E>,
) -> Result<(), E>
where
    I: Sync,
    T: Send,
{
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let workers = parallelism.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel(0);
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, work) = (&next, &stop, &work);
            scope.spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    if tx.send((i, work(&items[i]))).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        for (i, result) in rx {
            if let Err(e) = on_result(i, result) {
                stop.store(true, Ordering::SeqCst);
                return Err(e);
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicUsize;

    #[test]
    fn every_item_once() {
        let items: Vec<u32> = (0..100).collect();
        let mut seen = vec![0u32; 100];
        run_items(
            &items,
            8,
            |x| x * 2,
            |i, r| {
                seen[i] += 1;
                assert_eq!(r, items[i] * 2);
                Ok::<_, ()>(())
            },
        )
        .unwrap();
        assert!(seen.iter().all(|&n| n == 1));
    }

    #[test]
    fn error_stops_new_work() {
        let items: Vec<u32> = (0..1000).collect();
        let started = AtomicUsize::new(0);
        let mut handled = 0;
        let r = run_items(
            &items,
            4,
            |_| {
                started.fetch_add(1, Ordering::SeqCst);
            },
            |_, _| {
                handled += 1;
                if handled == 5 {
                    Err("stop")
                } else {
                    Ok(())
                }
            },
        );
        assert_eq!(r, Err("stop"));
        assert!(started.load(Ordering::SeqCst) < 1000);
    }
}

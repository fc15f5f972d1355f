//! Small shared utilities: the thread cap and an order-stable parallel map.

/// Thread cap for internal fan-out. `MVBEV_THREADS` overrides the machine
/// default; values below 1 fall back to 1.
pub fn max_threads() -> usize {
    match std::env::var("MVBEV_THREADS") {
        Ok(v) => v.trim().parse().ok().filter(|&n| n >= 1).unwrap_or(1),
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}

/// `out[k] = f(k)` computed on up to `threads` scoped threads. Output order
/// is by index, so results are independent of scheduling.
pub fn parallel_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    if n == 0 {
        return Vec::new();
    }
    let threads = threads.max(1).min(n);
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let chunk = n.div_ceil(threads);
    std::thread::scope(|scope| {
        let f = &f;
        let mut rest: &mut [Option<T>] = &mut out;
        let mut base = 0usize;
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            scope.spawn(move || {
                for (off, slot) in head.iter_mut().enumerate() {
                    *slot = Some(f(base + off));
                }
            });
            base += take;
            rest = tail;
        }
    });
    out.into_iter().map(|x| x.expect("slot filled")).collect()
}

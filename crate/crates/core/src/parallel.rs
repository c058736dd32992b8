use std::ops::Range;

use crate::error::Result;

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Splits `0..n` into at most `threads` contiguous shards, runs `f` on each
/// (concurrently when more than one) and returns the results in shard order.
pub(crate) fn map_shards<R: Send>(
    n: usize,
    threads: usize,
    f: impl Fn(Range<usize>) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let threads = threads.clamp(1, n.max(1));
    let per = n.div_ceil(threads);
    let ranges: Vec<Range<usize>> = (0..threads).map(|t| (t * per).min(n)..((t + 1) * per).min(n)).collect();
    if threads == 1 {
        return ranges.into_iter().map(&f).collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = ranges.into_iter().map(|r| s.spawn(|| f(r))).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shards_cover_range_in_order() {
        for threads in 1..6 {
            let parts = map_shards(10, threads, |r| Ok(r.collect::<Vec<_>>())).unwrap();
            assert_eq!(parts.concat(), (0..10).collect::<Vec<_>>());
        }
        assert_eq!(map_shards(0, 4, |r| Ok(r.len())).unwrap(), vec![0]);
    }
}

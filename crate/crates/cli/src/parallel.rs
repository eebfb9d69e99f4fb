//! Deterministic fork-join over records: the input order fixes the output
//! order regardless of thread scheduling, so multi-threaded runs stay
//! byte-identical with single-threaded ones.

/// Maps `f` over `items`, splitting them across up to `threads` workers.
/// Results come back in input order.
pub fn par_map<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let mut out: Vec<Option<R>> = Vec::with_capacity(items.len());
    out.resize_with(items.len(), || None);
    let slots: Vec<(usize, &mut [Option<R>])> = {
        let mut rest: &mut [Option<R>] = &mut out;
        let mut slots = Vec::new();
        let mut start = 0;
        while !rest.is_empty() {
            let take = chunk.min(rest.len());
            let (head, tail) = rest.split_at_mut(take);
            slots.push((start, head));
            start += take;
            rest = tail;
        }
        slots
    };
    std::thread::scope(|scope| {
        for (start, slot) in slots {
            let f = &f;
            scope.spawn(move || {
                for (i, cell) in slot.iter_mut().enumerate() {
                    *cell = Some(f(&items[start + i]));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("worker filled every slot")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preserves_order_across_thread_counts() {
        let items: Vec<usize> = (0..103).collect();
        let single = par_map(&items, 1, |&x| x * 2);
        for threads in [2, 3, 8, 64] {
            let multi = par_map(&items, threads, |&x| x * 2);
            assert_eq!(single, multi);
        }
    }

    #[test]
    fn handles_empty_and_tiny_inputs() {
        let empty: Vec<u32> = vec![];
        assert!(par_map(&empty, 4, |&x| x).is_empty());
        assert_eq!(par_map(&[7], 4, |&x| x + 1), vec![8]);
    }
}

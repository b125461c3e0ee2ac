//! Process-wide execution knobs.

use std::sync::OnceLock;

/// Number of worker threads data-parallel kernels may use.
///
/// Resolution order: an explicit [`set_threads`] call, then the
/// `IPSEG_THREADS` environment variable, then the machine's available
/// parallelism. A value of 0 means "auto". Kernels that parallelise do so
/// over disjoint output regions with a fixed per-element reduction order,
/// so results are bit-identical at any thread count.
pub fn threads() -> usize {
    let configured = *CONFIGURED.get_or_init(|| {
        std::env::var("IPSEG_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0)
    });
    resolve(configured)
}

/// Overrides the thread cap for this process. Returns the previous request
/// if one was already fixed (first caller wins, matching `OnceLock`).
pub fn set_threads(n: usize) -> Option<usize> {
    CONFIGURED.set(n).err()
}

fn resolve(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    }
}

static CONFIGURED: OnceLock<usize> = OnceLock::new();

/// Splits `total` items into at most `threads()` contiguous ranges.
pub fn chunk_ranges(total: usize) -> Vec<std::ops::Range<usize>> {
    let workers = threads().max(1).min(total.max(1));
    let base = total / workers;
    let extra = total % workers;
    let mut ranges = Vec::with_capacity(workers);
    let mut start = 0;
    for w in 0..workers {
        let len = base + usize::from(w < extra);
        if len == 0 {
            break;
        }
        ranges.push(start..start + len);
        start += len;
    }
    ranges
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range_exactly() {
        for total in [0, 1, 7, 64, 1000] {
            let ranges = chunk_ranges(total);
            let mut covered = 0;
            for r in &ranges {
                assert_eq!(r.start, covered);
                covered = r.end;
            }
            assert_eq!(covered, total);
        }
    }
}

//! Process-wide monotonic nanosecond clock.

use std::sync::OnceLock;
use std::time::Instant;

static ANCHOR: OnceLock<Instant> = OnceLock::new();

/// Nanoseconds elapsed since the first call in this process.
pub fn monotonic_ns() -> u64 {
    let anchor = *ANCHOR.get_or_init(Instant::now);
    anchor.elapsed().as_nanos() as u64
}

#[cfg(test)]
mod tests {
    #[test]
    fn never_goes_backwards() {
        let mut last = super::monotonic_ns();
        for _ in 0..1000 {
            let now = super::monotonic_ns();
            assert!(now >= last);
            last = now;
        }
    }
}

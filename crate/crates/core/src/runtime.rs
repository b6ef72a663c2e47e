//! Worker-pool sizing from `SPIKEATTN_THREADS`.

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "SPIKEATTN_THREADS";

/// Worker count for a raw env value: unset means rayon's default (`None`),
/// `0` and `1` both mean one worker.
pub fn parse_threads(raw: Option<&str>) -> Result<Option<usize>> {
    match raw.map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => s
            .parse::<usize>()
            .map(|n| Some(n.max(1)))
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={s} is not a worker count"))),
    }
}

/// Installs the global pool once. Later calls are no-ops.
pub fn init_threads() -> Result<()> {
    let raw = std::env::var(THREADS_ENV).ok();
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = parse_threads(raw.as_deref())? {
        b = b.num_threads(n);
    }
    // a pool already installed by an earlier call (or by a test harness) is fine
    let _ = b.build_global();
    Ok(())
}

/// Runs `f` on a dedicated single-worker pool.
pub fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-worker pool")
        .install(f)
}

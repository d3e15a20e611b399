//! Thread pool honouring `HOWLKIT_THREADS`.

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "HOWLKIT_THREADS";

/// Thread cap from the environment; `None` leaves the choice to rayon.
pub fn thread_limit() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) => Ok(None),
            Ok(n) => Ok(Some(n)),
            Err(_) => Err(Error::config(format!("{THREADS_ENV} must be a non-negative integer, got {v:?}"))),
        },
    }
}

/// A pool sized by [`thread_limit`].
pub fn pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_limit()? {
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::config(format!("thread pool: {e}")))
}

/// Runs `f` inside a fresh [`pool`].
pub fn install<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    Ok(pool()?.install(f))
}

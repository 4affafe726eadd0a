//! Kernel-level parallelism switch.
//!
//! Kernels split work by output channel, so each output element is reduced
//! in the same order whatever the thread count. Serial mode exists for
//! callers that want to rule the thread pool out entirely.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

pub const THREADS_ENV: &str = "NOFONET_THREADS";

static SERIAL: AtomicBool = AtomicBool::new(false);

pub fn set_deterministic(serial: bool) {
    SERIAL.store(serial, Ordering::SeqCst);
}

pub fn is_deterministic() -> bool {
    SERIAL.load(Ordering::SeqCst)
}

/// Sizes the global pool from `NOFONET_THREADS`. Only the first call can
/// take effect; later calls are ignored.
pub fn init_threads_from_env() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

pub(crate) fn for_each_chunk<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if is_deterministic() || rayon::current_num_threads() == 1 {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

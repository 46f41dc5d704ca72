//! Thin wrapper over the data-parallel backend.
//!
//! With the default `parallel` feature the maps below fan out over rayon;
//! without it they degrade to plain sequential iteration. Both paths return
//! results in input order and every caller reduces in that order, so output
//! is bit-identical across modes and thread counts.

use std::sync::OnceLock;

/// Reads `GRAMTOPO_THREADS` and caps the global rayon pool accordingly.
/// Called once from every entry point that fans out; later calls are no-ops.
pub fn init_thread_cap() {
    static INIT: OnceLock<()> = OnceLock::new();
    INIT.get_or_init(|| {
        #[cfg(feature = "parallel")]
        if let Ok(v) = std::env::var("GRAMTOPO_THREADS") {
            if let Ok(n) = v.trim().parse::<usize>() {
                if n >= 1 {
                    // Ignore the error: a pool may already exist (e.g. in tests).
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}

#[cfg(feature = "parallel")]
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    init_thread_cap();
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    init_thread_cap();
    items.iter().map(f).collect()
}

/// Indexed variant: `f` receives `(index, item)`.
#[cfg(feature = "parallel")]
pub fn par_map_indexed<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(usize, &T) -> R + Sync + Send,
) -> Vec<R> {
    use rayon::prelude::*;
    init_thread_cap();
    items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_indexed<T, R>(items: &[T], f: impl Fn(usize, &T) -> R) -> Vec<R> {
    init_thread_cap();
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

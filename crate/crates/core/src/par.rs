//! Execution strategy for the data-parallel loops: benchmark trials, the
//! 81-way action lookahead, batch gradients, and per-horizon model training.
//! Both modes produce bit-identical results; reductions happen in fixed
//! index order regardless of how the map work is scheduled.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ExecMode {
    Sequential,
    /// Rayon worker pool. Without the `parallel` feature this degrades to the
    /// sequential path, keeping the API and the results unchanged.
    Parallel,
}

impl ExecMode {
    pub fn from_jobs(jobs: usize) -> ExecMode {
        if jobs == 1 {
            ExecMode::Sequential
        } else {
            ExecMode::Parallel
        }
    }
}

/// Sizes the global worker pool; `0` means one worker per hardware thread.
/// Safe to call once before any parallel work. Without the `parallel`
/// feature this is a no-op.
pub fn configure_threads(jobs: usize) {
    #[cfg(feature = "parallel")]
    {
        if jobs != 0 {
            // An Err means the pool already exists; fine for tests.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = jobs;
}

/// `(0..n).map(f)` collected in index order.
pub fn map_indexed<U, F>(mode: ExecMode, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    match mode {
        ExecMode::Sequential => (0..n).map(f).collect(),
        ExecMode::Parallel => {
            #[cfg(feature = "parallel")]
            {
                (0..n).into_par_iter().map(f).collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                (0..n).map(f).collect()
            }
        }
    }
}

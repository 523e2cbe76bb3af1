//! Bounded data-parallel execution.
//!
//! With the `parallel` feature (default) an [`Executor`] owns a rayon pool of
//! `limit` threads, so no more than `limit` jobs run at once even when
//! batches nest (sample → candidate → vote). Nested `map` calls issued from
//! inside the pool reuse the same threads. Without the feature, or with a
//! limit of 1, every `map` runs in order on the calling thread.

#[cfg(feature = "parallel")]
use std::sync::Arc;

#[derive(Clone)]
pub struct Executor {
    limit: usize,
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("limit", &self.limit)
            .field("parallel", &self.is_parallel())
            .finish()
    }
}

impl Executor {
    pub fn new(limit: usize) -> Self {
        let limit = limit.max(1);
        #[cfg(feature = "parallel")]
        {
            let pool = (limit > 1).then(|| {
                Arc::new(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(limit)
                        .thread_name(|i| format!("simrec-worker-{i}"))
                        .build()
                        .expect("failed to build worker pool"),
                )
            });
            Self { limit, pool }
        }
        #[cfg(not(feature = "parallel"))]
        {
            Self { limit }
        }
    }

    pub fn sequential() -> Self {
        Self::new(1)
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn is_parallel(&self) -> bool {
        #[cfg(feature = "parallel")]
        {
            self.pool.is_some()
        }
        #[cfg(not(feature = "parallel"))]
        {
            false
        }
    }

    /// Applies `f` to every item; the output is aligned with the input.
    pub fn map<T, R, F>(&self, items: Vec<T>, f: F) -> Vec<R>
    where
        T: Send,
        R: Send,
        F: Fn(T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            if items.len() > 1 {
                return pool.install(|| items.into_par_iter().map(f).collect());
            }
        }
        items.into_iter().map(f).collect()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}

//! Running independent units of work (chains, grid points) on a worker pool.
//!
//! Results always come back in input order, so any reduction over them is
//! independent of the worker count. Without the `parallel` feature every
//! execution mode runs on the calling thread.

use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Every available core.
    #[default]
    Parallel,
    Workers(usize),
}

impl Execution {
    pub fn from_workers(workers: Option<usize>) -> Self {
        match workers {
            Some(0 | 1) => Execution::Sequential,
            Some(n) => Execution::Workers(n),
            None => Execution::Parallel,
        }
    }
}

/// `items.map(f)` in input order under the chosen execution mode.
pub fn map<T, R, F>(exec: Execution, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    match exec {
        Execution::Sequential => items.into_iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            items.into_par_iter().map(f).collect()
        }
        #[cfg(feature = "parallel")]
        Execution::Workers(n) => {
            use rayon::prelude::*;
            match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                Ok(pool) => pool.install(|| items.into_par_iter().map(f).collect()),
                Err(_) => items.into_iter().map(f).collect(),
            }
        }
        #[cfg(not(feature = "parallel"))]
        Execution::Parallel | Execution::Workers(_) => items.into_iter().map(f).collect(),
    }
}

/// Fallible [`map`]; the first error in input order wins.
pub fn try_map<T, R, F>(exec: Execution, items: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync + Send,
{
    map(exec, items, f).into_iter().collect()
}

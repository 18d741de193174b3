//! Column sharding for the factorizers.
//!
//! Columns are cut into a fixed number of logical blocks that depends only on
//! the column count. Workers own contiguous runs of blocks. With deterministic
//! reduction every block produces its own partial and partials are summed in
//! block order, so results are bit-identical for any worker count. Otherwise
//! each worker folds its blocks into one partial (cheaper, but the rounding
//! then depends on the worker count).

use std::ops::Range;
use std::thread;

/// Upper bound on logical blocks; also the maximum useful worker count.
pub const LOGICAL_BLOCKS: usize = 16;

#[derive(Debug, Clone)]
pub struct ShardPlan {
    blocks: Vec<Range<usize>>,
    workers: Vec<Range<usize>>,
    deterministic: bool,
}

fn split(len: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    (0..parts)
        .map(|p| (p * len / parts)..((p + 1) * len / parts))
        .collect()
}

impl ShardPlan {
    pub fn new(columns: usize, workers: usize, deterministic: bool) -> Self {
        let num_blocks = columns.clamp(1, LOGICAL_BLOCKS);
        let blocks = split(columns, num_blocks);
        let workers = split(blocks.len(), workers.clamp(1, blocks.len()));
        Self {
            blocks,
            workers,
            deterministic,
        }
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn num_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    /// Run `job` once per worker over its block indices, collecting results
    /// in worker order.
    fn per_worker<T, F>(&self, job: F) -> Vec<T>
    where
        T: Send,
        F: Fn(Range<usize>) -> T + Sync,
    {
        if self.workers.len() == 1 {
            return vec![job(self.workers[0].clone())];
        }
        thread::scope(|s| {
            let handles: Vec<_> = self
                .workers
                .iter()
                .cloned()
                .map(|blocks| {
                    let job = &job;
                    s.spawn(move || job(blocks))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("shard worker panicked"))
                .collect()
        })
    }

    /// Evaluate `f` on every block, returning the results in block order.
    pub fn map_blocks<T, F>(&self, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize, Range<usize>) -> T + Sync,
    {
        self.per_worker(|blocks| {
            blocks
                .map(|b| f(b, self.blocks[b].clone()))
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect()
    }

    /// Sum per-column contributions into one accumulator.
    ///
    /// `accumulate(acc, block, columns)` adds the contribution of one block.
    /// `combine(into, from)` adds one partial into another.
    pub fn reduce<T, I, A, C>(&self, init: I, accumulate: A, combine: C) -> T
    where
        T: Send,
        I: Fn() -> T + Sync,
        A: Fn(&mut T, usize, Range<usize>) + Sync,
        C: Fn(&mut T, &T),
    {
        let partials: Vec<T> = if self.deterministic {
            self.map_blocks(|b, cols| {
                let mut acc = init();
                accumulate(&mut acc, b, cols);
                acc
            })
        } else {
            self.per_worker(|blocks| {
                let mut acc = init();
                for b in blocks {
                    accumulate(&mut acc, b, self.blocks[b].clone());
                }
                acc
            })
        };
        let mut iter = partials.into_iter();
        let mut total = iter.next().unwrap_or_else(init);
        for p in iter {
            combine(&mut total, &p);
        }
        total
    }
}

//! Simulated block/thread execution grid.
//!
//! A format's work is laid out as `blocks × threads_per_block` independent
//! work items (one output element per thread, one output row per block).
//! [`dispatch`] runs the items on a pool of `workers` OS threads; results are
//! assembled by `(block, thread)` index, so they never depend on the worker
//! count or on scheduling order.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};
use serde::{Deserialize, Serialize};

use crate::metrics::{OpCount, ELEMENT_BYTES};
use crate::pecr::pecr_tiling;
use crate::tensor::{ConvGeometry, ConvPoolGeometry};
use crate::{Error, Result};

/// 48 KiB, the usual per-block shared memory of current GPUs.
pub const DEFAULT_SHARED_MEMORY_BUDGET: u64 = 49_152;

/// Environment variable consulted for the default worker count.
pub const WORKERS_ENV: &str = "SPARSECONV_WORKERS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutFormat {
    Ecr,
    Pecr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub blocks: usize,
    pub threads_per_block: usize,
    pub shared_bytes_per_block: u64,
}

impl Grid {
    pub fn work_items(&self) -> usize {
        self.blocks * self.threads_per_block
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecConfig {
    workers: usize,
    pub shared_memory_budget: u64,
}

impl ExecConfig {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(Self {
            workers,
            shared_memory_budget: DEFAULT_SHARED_MEMORY_BUDGET,
        })
    }

    pub fn with_budget(mut self, bytes: u64) -> Self {
        self.shared_memory_budget = bytes;
        self
    }

    /// Worker count from [`WORKERS_ENV`], falling back to 1.
    pub fn from_env() -> Result<Self> {
        match std::env::var(WORKERS_ENV) {
            Ok(v) => {
                let n = v.trim().parse().map_err(|_| {
                    Error::Config(format!("{WORKERS_ENV}={v:?} is not a worker count"))
                })?;
                Self::new(n)
            }
            Err(_) => Ok(Self::default()),
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }
}

impl Default for ExecConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            shared_memory_budget: DEFAULT_SHARED_MEMORY_BUDGET,
        }
    }
}

/// Grid for one ECR convolution: a block per output row, a thread per output column.
///
/// Shared memory per block holds each thread's `F_data` and `K_data` slot
/// (`channels*k_w*k_h` floats each) plus one `Ptr` integer.
pub fn plan_ecr(g: &ConvGeometry) -> Result<Grid> {
    g.validate()?;
    let (o_w, o_h) = g.out_dims();
    let slot = g.window_len() as u64;
    let per_thread = slot * 2 * ELEMENT_BYTES + ELEMENT_BYTES;
    Ok(Grid {
        blocks: o_h,
        threads_per_block: o_w,
        shared_bytes_per_block: o_w as u64 * per_thread,
    })
}

/// Grid for one fused PECR conv+pool: a block per pooling-pack row, a thread per pack.
///
/// Shared memory per block holds, per thread, worst-case `Data` and `Index`
/// for all `p_w*p_h` windows plus their `Count` entries.
pub fn plan_pecr(g: &ConvPoolGeometry) -> Result<Grid> {
    let tiling = pecr_tiling(g)?;
    let windows = g.pool.window_len() as u64;
    let slot = g.conv.window_len() as u64;
    let per_thread = windows * slot * 2 * ELEMENT_BYTES + windows * ELEMENT_BYTES;
    Ok(Grid {
        blocks: tiling.packs_h,
        threads_per_block: tiling.packs_w,
        shared_bytes_per_block: tiling.packs_w as u64 * per_thread,
    })
}

pub fn plan(g: &ConvPoolGeometry, format: LayoutFormat) -> Result<Grid> {
    match format {
        LayoutFormat::Ecr => plan_ecr(&g.conv),
        LayoutFormat::Pecr => plan_pecr(g),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkItem {
    pub block: usize,
    pub thread: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityWarning {
    pub required_bytes: u64,
    pub budget_bytes: u64,
}

impl std::fmt::Display for CapacityWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "block needs {} bytes of shared memory, budget is {}",
            self.required_bytes, self.budget_bytes
        )
    }
}

/// Outputs in block-major order plus the merged counters.
#[derive(Debug, Clone)]
pub struct Dispatch<R> {
    pub outputs: Vec<R>,
    pub ops: OpCount,
    pub warning: Option<CapacityWarning>,
}

fn shared_pool(workers: usize) -> Result<Arc<ThreadPool>> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
    let mut pools = POOLS
        .get_or_init(Default::default)
        .lock()
        .unwrap_or_else(|e| e.into_inner());
    if let Some(p) = pools.get(&workers) {
        return Ok(p.clone());
    }
    let pool = ThreadPoolBuilder::new()
        .num_threads(workers)
        .thread_name(|i| format!("sparseconv-worker-{i}"))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    let pool = Arc::new(pool);
    pools.insert(workers, pool.clone());
    Ok(pool)
}

/// Runs `work` once per `(block, thread)` of `grid`.
///
/// Each block tallies into its own counter; block counters are summed at the
/// end. The first failing item in block-major order aborts the dispatch.
pub fn dispatch<R, F>(grid: &Grid, cfg: &ExecConfig, work: F) -> Result<Dispatch<R>>
where
    R: Send,
    F: Fn(WorkItem, &mut OpCount) -> Result<R> + Sync,
{
    let warning = (grid.shared_bytes_per_block > cfg.shared_memory_budget).then(|| {
        let w = CapacityWarning {
            required_bytes: grid.shared_bytes_per_block,
            budget_bytes: cfg.shared_memory_budget,
        };
        log::warn!("{w}");
        w
    });

    let run_block = |block: usize| -> Result<(Vec<R>, OpCount)> {
        let mut ops = OpCount::ZERO;
        let mut out = Vec::with_capacity(grid.threads_per_block);
        for thread in 0..grid.threads_per_block {
            let r = work(WorkItem { block, thread }, &mut ops).map_err(|e| Error::WorkItem {
                block,
                thread,
                source: Box::new(e),
            })?;
            out.push(r);
        }
        Ok((out, ops))
    };

    let per_block: Vec<(Vec<R>, OpCount)> = if cfg.workers <= 1 || grid.blocks <= 1 {
        (0..grid.blocks).map(run_block).collect::<Result<_>>()?
    } else {
        let pool = shared_pool(cfg.workers)?;
        let results: Vec<Result<(Vec<R>, OpCount)>> =
            pool.install(|| (0..grid.blocks).into_par_iter().map(run_block).collect());
        results.into_iter().collect::<Result<_>>()?
    };

    let mut outputs = Vec::with_capacity(grid.work_items());
    let mut ops = OpCount::ZERO;
    for (block_out, block_ops) in per_block {
        outputs.extend(block_out);
        ops += block_ops;
    }
    Ok(Dispatch {
        outputs,
        ops,
        warning,
    })
}

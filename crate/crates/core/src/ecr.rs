//! ECR (Extended and Compressed Row) format.
//!
//! The map is cut into convolution block rows, one per output row. Within a
//! block row every thread owns one convolution window and a fixed slot of
//! `channels*k_w*k_h` entries in `f_data` / `k_data`: the window's nonzeros in
//! scan order (channel, then window row, then column) and the kernel weight
//! each one meets. `ptr[t]` is the nonzero count, or `-1` for an empty window.
//! Convolution is then a ragged sparse matrix-vector product over the slots.

use crate::execmodel::{dispatch, plan_ecr, ExecConfig, WorkItem};
use crate::metrics::OpCount;
use crate::tensor::{ConvConfig, ConvGeometry, FeatureMap, Filter};
use crate::{Error, Result, Scalar};

/// `ptr` value marking a window without nonzeros.
pub const EMPTY_WINDOW: i32 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct EcrBlockRow<T> {
    pub f_data: Vec<T>,
    pub k_data: Vec<T>,
    pub ptr: Vec<i32>,
    /// Window-relative offset (`c*k_h*k_w + i*k_w + j`) of every filled entry,
    /// laid out like `f_data`. Only used to decompress; SpMV never reads it.
    pub window_offsets: Vec<u32>,
}

impl<T: Scalar> EcrBlockRow<T> {
    pub fn threads(&self) -> usize {
        self.ptr.len()
    }

    /// Nonzero count of thread `t`'s window (0 for the sentinel).
    pub fn nnz(&self, t: usize) -> usize {
        usize::try_from(self.ptr[t]).unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcrMap<T> {
    pub block_rows: Vec<EcrBlockRow<T>>,
    pub geometry: ConvGeometry,
}

/// `(blocks, threads_per_block)` for an ECR convolution.
pub fn ecr_grid_shape(g: &ConvGeometry) -> Result<(usize, usize)> {
    g.validate()?;
    let (o_w, o_h) = g.out_dims();
    Ok((o_h, o_w))
}

struct ThreadSlot<T> {
    f_data: Vec<T>,
    k_data: Vec<T>,
    offsets: Vec<u32>,
}

fn convert_thread<T: Scalar>(
    map: &FeatureMap<T>,
    filter: &Filter<T>,
    g: &ConvGeometry,
    w: WorkItem,
) -> ThreadSlot<T> {
    let slot = g.window_len();
    let plane = g.in_h * g.in_w;
    let kk = g.k_h * g.k_w;
    let input = map.values();
    let kernel = filter.weights();
    let mut f_data = Vec::with_capacity(slot);
    let mut k_data = Vec::with_capacity(slot);
    let mut offsets = Vec::with_capacity(slot);
    // channels are compressed one after another into the same slot
    for c in 0..g.channels {
        let base = c * plane + w.block * g.in_w * g.stride + w.thread * g.stride;
        for i in 0..g.k_h {
            for j in 0..g.k_w {
                let v = input[base + i * g.in_w + j];
                if !v.is_exact_zero() {
                    let rel = c * kk + i * g.k_w + j;
                    f_data.push(v);
                    k_data.push(kernel[rel]);
                    offsets.push(rel as u32);
                }
            }
        }
    }
    ThreadSlot {
        f_data,
        k_data,
        offsets,
    }
}

/// Converts a dense map and one filter into ECR.
pub fn ecr_convert<T: Scalar>(
    map: &FeatureMap<T>,
    filter: &Filter<T>,
    cfg: ConvConfig,
) -> Result<EcrMap<T>> {
    ecr_convert_with(map, filter, cfg, &ExecConfig::default())
}

pub fn ecr_convert_with<T: Scalar>(
    map: &FeatureMap<T>,
    filter: &Filter<T>,
    cfg: ConvConfig,
    exec: &ExecConfig,
) -> Result<EcrMap<T>> {
    let g = ConvGeometry::of(map, filter, cfg)?;
    let grid = plan_ecr(&g)?;
    let slot = g.window_len();
    let done = dispatch(&grid, exec, |w, _| Ok(convert_thread(map, filter, &g, w)))?;

    let mut slots = done.outputs.into_iter();
    let mut block_rows = Vec::with_capacity(grid.blocks);
    for _ in 0..grid.blocks {
        let threads = grid.threads_per_block;
        let mut row = EcrBlockRow {
            f_data: vec![T::zero(); threads * slot],
            k_data: vec![T::zero(); threads * slot],
            ptr: vec![EMPTY_WINDOW; threads],
            window_offsets: vec![0; threads * slot],
        };
        for t in 0..threads {
            let s = slots
                .next()
                .expect("dispatch yields one slot per work item");
            let n = s.f_data.len();
            let at = t * slot;
            row.f_data[at..at + n].copy_from_slice(&s.f_data);
            row.k_data[at..at + n].copy_from_slice(&s.k_data);
            row.window_offsets[at..at + n].copy_from_slice(&s.offsets);
            if n > 0 {
                row.ptr[t] = n as i32;
            }
        }
        block_rows.push(row);
    }
    Ok(EcrMap {
        block_rows,
        geometry: g,
    })
}

impl<T: Scalar> EcrMap<T> {
    pub fn slot_len(&self) -> usize {
        self.geometry.window_len()
    }

    /// Validated nonzero count of window `(block, thread)`.
    fn checked_nnz(&self, block: usize, thread: usize) -> Result<usize> {
        let slot = self.slot_len();
        let p = self.block_rows[block].ptr[thread];
        if p == EMPTY_WINDOW {
            return Ok(0);
        }
        if p < 1 || p as usize > slot {
            return Err(Error::Format(format!(
                "ptr[{thread}] of block row {block} is {p}, expected -1 or 1..={slot}"
            )));
        }
        Ok(p as usize)
    }

    /// Checks every structural invariant of the block rows.
    pub fn validate(&self) -> Result<()> {
        let (o_w, o_h) = self.geometry.out_dims();
        if self.block_rows.len() != o_h {
            return Err(Error::Format(format!(
                "{} block rows, expected {o_h}",
                self.block_rows.len()
            )));
        }
        let slot = self.slot_len();
        for (b, row) in self.block_rows.iter().enumerate() {
            if row.ptr.len() != o_w
                || row.f_data.len() != o_w * slot
                || row.k_data.len() != o_w * slot
                || row.window_offsets.len() != o_w * slot
            {
                return Err(Error::Format(format!(
                    "block row {b} has inconsistent lengths"
                )));
            }
            for t in 0..o_w {
                let n = self.checked_nnz(b, t)?;
                let offs = &row.window_offsets[t * slot..t * slot + n];
                if offs.windows(2).any(|p| p[0] >= p[1]) || offs.iter().any(|&o| o as usize >= slot)
                {
                    return Err(Error::Format(format!(
                        "block row {b} thread {t}: bad window offsets"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Dense reconstruction of window `(block, thread)`, `channels*k_h*k_w` long.
    pub fn window(&self, block: usize, thread: usize) -> Result<Vec<T>> {
        let slot = self.slot_len();
        let n = self.checked_nnz(block, thread)?;
        let row = &self.block_rows[block];
        let mut dense = vec![T::zero(); slot];
        let at = thread * slot;
        for p in at..at + n {
            dense[row.window_offsets[p] as usize] = row.f_data[p];
        }
        Ok(dense)
    }

    /// Total stored nonzeros.
    pub fn nnz(&self) -> usize {
        self.block_rows
            .iter()
            .map(|r| (0..r.threads()).map(|t| r.nnz(t)).sum::<usize>())
            .sum()
    }
}

/// SpMV convolution over an ECR map; one output per `(block, thread)`.
pub fn ecr_spmv_conv<T: Scalar>(
    ecr: &EcrMap<T>,
    counters: Option<&mut OpCount>,
) -> Result<FeatureMap<T>> {
    ecr_spmv_conv_with(ecr, counters, &ExecConfig::default())
}

pub fn ecr_spmv_conv_with<T: Scalar>(
    ecr: &EcrMap<T>,
    counters: Option<&mut OpCount>,
    exec: &ExecConfig,
) -> Result<FeatureMap<T>> {
    let g = ecr.geometry;
    let grid = plan_ecr(&g)?;
    if ecr.block_rows.len() != grid.blocks
        || ecr
            .block_rows
            .iter()
            .any(|r| r.ptr.len() != grid.threads_per_block)
    {
        return Err(Error::Format(
            "block row layout does not match the geometry".into(),
        ));
    }
    let slot = ecr.slot_len();
    let done = dispatch(&grid, exec, |w, ops| {
        let n = ecr.checked_nnz(w.block, w.thread)?;
        if n == 0 {
            return Ok(T::zero());
        }
        let row = &ecr.block_rows[w.block];
        let at = w.thread * slot;
        let (f, k) = (&row.f_data[at..at + n], &row.k_data[at..at + n]);
        let mut acc = f[0] * k[0];
        for p in 1..n {
            acc += f[p] * k[p];
        }
        *ops += OpCount::reduction(n);
        Ok(acc)
    })?;
    if let Some(c) = counters {
        *c += done.ops;
    }
    let (o_w, o_h) = g.out_dims();
    FeatureMap::new(1, o_h, o_w, done.outputs)
}

/// Convert-then-SpMV in one call.
pub fn ecr_conv<T: Scalar>(
    map: &FeatureMap<T>,
    filter: &Filter<T>,
    cfg: ConvConfig,
    counters: Option<&mut OpCount>,
    exec: &ExecConfig,
) -> Result<FeatureMap<T>> {
    let ecr = ecr_convert_with(map, filter, cfg, exec)?;
    ecr_spmv_conv_with(&ecr, counters, exec)
}

//! PECR (Pooling-pack Extended and Compressed Row) format and the fused
//! convolution + ReLU + pooling kernel that consumes it.
//!
//! One thread owns one pooling output. It reads a `T_h × T_w` input tile that
//! covers the `p_w*p_h` convolution windows of its pooling window, and stores
//! their nonzeros back to back (`data`), the kernel offset each one meets
//! (`index`) and per-window nonzero counts (`count`). Threads are grouped by
//! pooling-pack row, one row per block.

use serde::{Deserialize, Serialize};

use crate::execmodel::{dispatch, plan_pecr, ExecConfig, WorkItem};
use crate::metrics::OpCount;
use crate::tensor::{
    relu_scalar, ConvConfig, ConvGeometry, ConvPoolGeometry, FeatureMap, Filter, PoolConfig,
    PoolMode,
};
use crate::{Error, Result, Scalar};

/// Pooling outputs along one axis of a fused conv+pool.
///
/// `n_o = (i_w - k_w + c_s - c_s*p_w + p_s*c_s) / (p_s*c_s)`, which must be
/// a positive integer; anything else would make the tiling read past the map.
pub fn pecr_n_o(i_w: usize, k_w: usize, c_s: usize, p_w: usize, p_s: usize) -> Result<usize> {
    if [i_w, k_w, c_s, p_w, p_s].contains(&0) {
        return Err(Error::Config(
            "pooling-pack parameters must be positive".into(),
        ));
    }
    let numerator = (i_w + c_s + p_s * c_s) as i64 - (k_w + c_s * p_w) as i64;
    let denominator = (p_s * c_s) as i64;
    if numerator <= 0 {
        return Err(Error::Config(format!(
            "no complete pooling window: i={i_w}, k={k_w}, c_s={c_s}, p={p_w}, p_s={p_s}"
        )));
    }
    if numerator % denominator != 0 {
        return Err(Error::Config(format!(
            "pooling tiling is not integral: ({numerator})/({denominator}) for i={i_w}, k={k_w}, c_s={c_s}, p={p_w}, p_s={p_s}"
        )));
    }
    Ok((numerator / denominator) as usize)
}

/// Pack counts and per-thread input tile size for one conv+pool geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PecrTiling {
    pub packs_w: usize,
    pub packs_h: usize,
    pub tile_w: usize,
    pub tile_h: usize,
}

pub fn pecr_tiling(g: &ConvPoolGeometry) -> Result<PecrTiling> {
    g.conv.validate()?;
    let c = &g.conv;
    let p = &g.pool;
    let axis = |name: &str, r: Result<usize>| {
        r.map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{name}: {msg}")),
            other => other,
        })
    };
    let packs_w = axis(
        "width",
        pecr_n_o(c.in_w, c.k_w, c.stride, p.width, p.stride),
    )?;
    let packs_h = axis(
        "height",
        pecr_n_o(c.in_h, c.k_h, c.stride, p.height, p.stride),
    )?;
    Ok(PecrTiling {
        packs_w,
        packs_h,
        tile_w: c.k_w + c.stride * (p.width - 1),
        tile_h: c.k_h + c.stride * (p.height - 1),
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PecrPoolPack<T> {
    pub data: Vec<T>,
    /// Kernel offset `c*k_h*k_w + i*k_w + j` of each `data` entry.
    pub index: Vec<u32>,
    /// Nonzeros per convolution window, `p_w*p_h` entries.
    pub count: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PecrMap<T> {
    /// `packs_h` rows of `packs_w` packs.
    pub pool_rows: Vec<Vec<PecrPoolPack<T>>>,
    pub geometry: ConvPoolGeometry,
    pub tiling: PecrTiling,
    /// Flattened filter weights addressed by `index`.
    pub kernel: Vec<T>,
}

fn convert_pack<T: Scalar>(
    map: &FeatureMap<T>,
    g: &ConvPoolGeometry,
    w: WorkItem,
) -> PecrPoolPack<T> {
    let c = &g.conv;
    let p = &g.pool;
    let plane = c.in_h * c.in_w;
    let kk = c.k_h * c.k_w;
    let step = c.stride * p.stride;
    let start = w.thread * step + c.in_w * (w.block * step);
    let windows = p.window_len();
    let input = map.values();

    let mut pack = PecrPoolPack {
        data: Vec::with_capacity(windows * c.window_len()),
        index: Vec::with_capacity(windows * c.window_len()),
        count: Vec::with_capacity(windows),
    };
    for n in 0..windows {
        let n_start = (n / p.width) * c.stride * c.in_w + (n % p.width) * c.stride;
        let mut num = 0u32;
        for ch in 0..c.channels {
            let base = ch * plane + start + n_start;
            for i in 0..c.k_h {
                for j in 0..c.k_w {
                    let v = input[base + i * c.in_w + j];
                    if !v.is_exact_zero() {
                        pack.data.push(v);
                        pack.index.push((ch * kk + i * c.k_w + j) as u32);
                        num += 1;
                    }
                }
            }
        }
        pack.count.push(num);
    }
    pack
}

pub fn pecr_convert<T: Scalar>(
    map: &FeatureMap<T>,
    filter: &Filter<T>,
    conv: ConvConfig,
    pool: PoolConfig,
) -> Result<PecrMap<T>> {
    pecr_convert_with(map, filter, conv, pool, &ExecConfig::default())
}

pub fn pecr_convert_with<T: Scalar>(
    map: &FeatureMap<T>,
    filter: &Filter<T>,
    conv: ConvConfig,
    pool: PoolConfig,
    exec: &ExecConfig,
) -> Result<PecrMap<T>> {
    let geometry = ConvPoolGeometry {
        conv: ConvGeometry::of(map, filter, conv)?,
        pool,
    };
    let tiling = pecr_tiling(&geometry)?;
    let grid = plan_pecr(&geometry)?;
    let done = dispatch(&grid, exec, |w, _| Ok(convert_pack(map, &geometry, w)))?;
    let mut packs = done.outputs.into_iter();
    let pool_rows = (0..tiling.packs_h)
        .map(|_| packs.by_ref().take(tiling.packs_w).collect())
        .collect();
    Ok(PecrMap {
        pool_rows,
        geometry,
        tiling,
        kernel: filter.weights().to_vec(),
    })
}

impl<T: Scalar> PecrMap<T> {
    pub fn pack(&self, block: usize, thread: usize) -> &PecrPoolPack<T> {
        &self.pool_rows[block][thread]
    }

    fn check_pack(&self, block: usize, thread: usize) -> Result<&PecrPoolPack<T>> {
        let pack = self
            .pool_rows
            .get(block)
            .and_then(|r| r.get(thread))
            .ok_or_else(|| Error::Format(format!("missing pack ({block}, {thread})")))?;
        let slot = self.geometry.conv.window_len();
        let windows = self.geometry.pool.window_len();
        if pack.count.len() != windows {
            return Err(Error::Format(format!(
                "pack has {} counts, expected {windows}",
                pack.count.len()
            )));
        }
        let total: usize = pack.count.iter().map(|&c| c as usize).sum();
        if pack.data.len() != total || pack.index.len() != total {
            return Err(Error::Format(format!(
                "data/index lengths {}/{} do not match count total {total}",
                pack.data.len(),
                pack.index.len()
            )));
        }
        if pack.count.iter().any(|&c| c as usize > slot)
            || pack.index.iter().any(|&i| i as usize >= slot)
        {
            return Err(Error::Format(format!(
                "count or index exceeds window size {slot}"
            )));
        }
        Ok(pack)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_rows.len() != self.tiling.packs_h
            || self
                .pool_rows
                .iter()
                .any(|r| r.len() != self.tiling.packs_w)
        {
            return Err(Error::Format(
                "pack layout does not match the tiling".into(),
            ));
        }
        if self.kernel.len() != self.geometry.conv.window_len() {
            return Err(Error::Format(
                "kernel length does not match the window size".into(),
            ));
        }
        for b in 0..self.tiling.packs_h {
            for t in 0..self.tiling.packs_w {
                self.check_pack(b, t)?;
            }
        }
        Ok(())
    }

    /// Dense reconstruction of convolution window `n` of pack `(block, thread)`.
    pub fn window(&self, block: usize, thread: usize, n: usize) -> Result<Vec<T>> {
        let pack = self.check_pack(block, thread)?;
        if n >= pack.count.len() {
            return Err(Error::Format(format!("window {n} out of range")));
        }
        let from: usize = pack.count[..n].iter().map(|&c| c as usize).sum();
        let to = from + pack.count[n] as usize;
        let mut dense = vec![T::zero(); self.geometry.conv.window_len()];
        for p in from..to {
            dense[pack.index[p] as usize] = pack.data[p];
        }
        Ok(dense)
    }

    /// Total stored entries, counting windows shared by neighbouring packs once per pack.
    pub fn nnz(&self) -> usize {
        self.pool_rows.iter().flatten().map(|p| p.data.len()).sum()
    }
}

/// Fused convolution, ReLU and pooling (mode taken from the map's geometry).
pub fn pecr_conv_pool<T: Scalar>(
    pecr: &PecrMap<T>,
    counters: Option<&mut OpCount>,
) -> Result<FeatureMap<T>> {
    pecr_conv_pool_with(pecr, true, counters, &ExecConfig::default())
}

/// Fused convolution and pooling, optionally with ReLU.
///
/// Max mode with ReLU starts the running maximum at zero, which is ReLU
/// folded into the pooling. Mean mode applies ReLU to each convolution result
/// before averaging. Counters tally the convolution products and sums only.
pub fn pecr_conv_pool_with<T: Scalar>(
    pecr: &PecrMap<T>,
    relu: bool,
    counters: Option<&mut OpCount>,
    exec: &ExecConfig,
) -> Result<FeatureMap<T>> {
    let grid = plan_pecr(&pecr.geometry)?;
    if pecr.kernel.len() != pecr.geometry.conv.window_len() {
        return Err(Error::Format(
            "kernel length does not match the window size".into(),
        ));
    }
    let mode = pecr.geometry.pool.mode;
    let windows = T::from_usize(pecr.geometry.pool.window_len()).unwrap_or_else(T::nan);
    let kernel = &pecr.kernel;

    let done = dispatch(&grid, exec, |w, ops| {
        let pack = pecr.check_pack(w.block, w.thread)?;
        let mut best = if relu { T::zero() } else { T::neg_infinity() };
        let mut sum = T::zero();
        let mut temp = 0usize;
        for &count in &pack.count {
            let count = count as usize;
            let mut acc = T::zero();
            for n in temp..temp + count {
                let prod = pack.data[n] * kernel[pack.index[n] as usize];
                if n == temp {
                    acc = prod;
                } else {
                    acc += prod;
                }
            }
            *ops += OpCount::reduction(count);
            match mode {
                PoolMode::Max => {
                    if best < acc {
                        best = acc;
                    }
                }
                PoolMode::Mean => sum += if relu { relu_scalar(acc) } else { acc },
            }
            temp += count;
        }
        Ok(match mode {
            PoolMode::Max => best,
            PoolMode::Mean => sum / windows,
        })
    })?;
    if let Some(c) = counters {
        *c += done.ops;
    }
    FeatureMap::new(1, pecr.tiling.packs_h, pecr.tiling.packs_w, done.outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{fixture_f5, fixture_k3, generate, oracle_window_nnz};
    use crate::tensor::{dense_conv, pool, relu};
    use proptest::prelude::*;

    fn reference(
        m: &FeatureMap<f32>,
        k: &Filter<f32>,
        c: ConvConfig,
        p: PoolConfig,
    ) -> FeatureMap<f32> {
        pool(&relu(&dense_conv(m, k, c, None).unwrap()), p).unwrap()
    }

    #[test]
    fn n_o_values() {
        assert_eq!(pecr_n_o(5, 3, 1, 2, 1).unwrap(), 2);
        assert_eq!(pecr_n_o(3, 3, 1, 1, 1).unwrap(), 1);
        assert_eq!(pecr_n_o(12, 3, 1, 2, 2).unwrap(), 5);
        assert!(matches!(pecr_n_o(5, 3, 1, 2, 2), Err(Error::Config(_))));
        assert!(matches!(pecr_n_o(3, 3, 1, 2, 1), Err(Error::Config(_))));
        assert!(pecr_n_o(5, 3, 0, 2, 1).is_err());
    }

    #[test]
    fn tile_size() {
        let g = ConvPoolGeometry {
            conv: ConvGeometry {
                channels: 1,
                in_h: 11,
                in_w: 9,
                k_h: 3,
                k_w: 3,
                stride: 2,
            },
            pool: PoolConfig::max(2, 3, 1).unwrap(),
        };
        let t = pecr_tiling(&g).unwrap();
        assert_eq!((t.tile_w, t.tile_h), (5, 7));
        assert_eq!((t.packs_w, t.packs_h), (3, 3));
    }

    #[test]
    fn names_the_offending_axis() {
        let g = ConvPoolGeometry {
            conv: ConvGeometry {
                channels: 1,
                in_h: 6,
                in_w: 5,
                k_h: 3,
                k_w: 3,
                stride: 1,
            },
            pool: PoolConfig::max(2, 2, 2).unwrap(),
        };
        let msg = pecr_tiling(&g).unwrap_err().to_string();
        assert!(msg.contains("width"), "{msg}");
    }

    #[test]
    fn all_zero_map() {
        let z = FeatureMap::<f32>::zeros(1, 5, 5).unwrap();
        let p = pecr_convert(
            &z,
            &fixture_k3(),
            ConvConfig::default(),
            PoolConfig::max(2, 2, 1).unwrap(),
        )
        .unwrap();
        assert_eq!(p.pool_rows.iter().flatten().count(), 4);
        for pack in p.pool_rows.iter().flatten() {
            assert_eq!(pack.count, vec![0; 4]);
            assert!(pack.data.is_empty());
        }
        let mut ops = OpCount::ZERO;
        let out = pecr_conv_pool(&p, Some(&mut ops)).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
        assert_eq!(ops, OpCount::ZERO);
    }

    #[test]
    fn all_ones_map() {
        let m = FeatureMap::filled(1, 5, 5, 1.0f32).unwrap();
        let k = Filter::new(1, 3, 3, vec![1.0f32; 9]).unwrap();
        let p = pecr_convert(
            &m,
            &k,
            ConvConfig::default(),
            PoolConfig::max(2, 2, 1).unwrap(),
        )
        .unwrap();
        let idx: Vec<u32> = (0..4).flat_map(|_| 0..9).collect();
        for pack in p.pool_rows.iter().flatten() {
            assert_eq!(pack.count, vec![9; 4]);
            assert!(pack.data.iter().all(|&v| v == 1.0));
            assert_eq!(pack.index, idx);
        }
        let out = pecr_conv_pool(&p, None).unwrap();
        assert_eq!((out.height(), out.width()), (2, 2));
        assert!(out.values().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn fixture_pack_and_output() {
        let (m, k) = (fixture_f5::<f32>(), fixture_k3::<f32>());
        let cfg = PoolConfig::max(2, 2, 1).unwrap();
        let p = pecr_convert(&m, &k, ConvConfig::default(), cfg).unwrap();
        let counts = oracle_window_nnz(&m, 3, 3, 1).unwrap();
        let expected: Vec<u32> = [0, 1, 3, 4].iter().map(|&w| counts[w] as u32).collect();
        assert_eq!(p.pack(0, 0).count, expected);
        assert_eq!(p.pack(0, 0).count, vec![3, 3, 3, 3]);

        let out = pecr_conv_pool(&p, None).unwrap();
        assert_eq!(out.values(), &[83.0, 75.0, 106.0, 106.0]);
        assert!(out.bitwise_eq(&reference(&m, &k, ConvConfig::default(), cfg)));
    }

    #[test]
    fn relu_folds_into_max() {
        let m = FeatureMap::filled(1, 5, 5, 1.0f32).unwrap();
        let k = Filter::new(1, 3, 3, vec![-1.0f32; 9]).unwrap();
        let p = pecr_convert(
            &m,
            &k,
            ConvConfig::default(),
            PoolConfig::max(2, 2, 1).unwrap(),
        )
        .unwrap();
        assert!(pecr_conv_pool(&p, None)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        let raw = pecr_conv_pool_with(&p, false, None, &ExecConfig::default()).unwrap();
        assert!(raw.values().iter().all(|&v| v == -9.0));
    }

    #[test]
    fn mean_mode_extension() {
        let m = generate(12, 12, 2, 0.5, 77).unwrap();
        let k = Filter::from_fn(2, 3, 3, |c, i, j| {
            (c as f32 - 0.5) * (i as f32 + 1.0) - j as f32 * 0.25
        })
        .unwrap();
        let cfg = PoolConfig::mean(2, 2, 2).unwrap();
        let p = pecr_convert(&m, &k, ConvConfig::default(), cfg).unwrap();
        let out = pecr_conv_pool(&p, None).unwrap();
        assert!(
            out.max_abs_diff(&reference(&m, &k, ConvConfig::default(), cfg))
                .unwrap()
                <= 1e-5
        );
    }

    #[test]
    fn corrupt_pack_is_format_error() {
        let mut p = pecr_convert(
            &fixture_f5::<f32>(),
            &fixture_k3(),
            ConvConfig::default(),
            PoolConfig::max(2, 2, 1).unwrap(),
        )
        .unwrap();
        p.pool_rows[1][0].count[2] += 1;
        let err = pecr_conv_pool(&p, None).unwrap_err();
        assert!(
            matches!(&err, Error::WorkItem { block: 1, thread: 0, source } if matches!(**source, Error::Format(_)))
        );
        assert!(p.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fused_matches_composed_oracle(
            n_o in 1usize..8, k in prop::sample::select(vec![3usize, 5]), stride in 1usize..4,
            p_s in 1usize..3, channels in 1usize..3,
            s in prop::sample::select(vec![0.0, 0.5, 0.7, 0.9, 1.0]), seed in any::<u64>(),
        ) {
            // size chosen so the tiling is integral: conv output = (n_o-1)*p_s + 2
            let conv_out = (n_o - 1) * p_s + 2;
            let size = (conv_out - 1) * stride + k;
            let cfg = PoolConfig::max(2, 2, p_s).unwrap();
            let conv = ConvConfig::new(stride).unwrap();
            let m = generate(size, size, channels, s, seed).unwrap().map(|v| if v > 0.6 { -v } else { v });
            let f = Filter::from_fn(channels, k, k, |c, i, j| ((c + i * 5 + j * 3) % 7) as f32 * 0.3 - 0.9).unwrap();
            let p = pecr_convert(&m, &f, conv, cfg).unwrap();
            p.validate().unwrap();
            prop_assert_eq!(p.tiling.packs_w, n_o);
            prop_assert_eq!(p.tiling.tile_w, k + stride);

            let counts = oracle_window_nnz(&m, k, k, stride).unwrap();
            for b in 0..n_o {
                for t in 0..n_o {
                    for n in 0..4 {
                        let (wy, wx) = (b * p_s + n / 2, t * p_s + n % 2);
                        prop_assert_eq!(p.pack(b, t).count[n] as usize, counts[wy * conv_out + wx]);
                        let window = p.window(b, t, n).unwrap();
                        let mut idx = 0;
                        for c in 0..channels { for i in 0..k { for j in 0..k {
                            prop_assert_eq!(window[idx], m.get(c, wy * stride + i, wx * stride + j));
                            idx += 1;
                        }}}
                    }
                }
            }

            let out = pecr_conv_pool(&p, None).unwrap();
            prop_assert!(out.max_abs_diff(&reference(&m, &f, conv, cfg)).unwrap() <= 1e-5);
        }
    }
}

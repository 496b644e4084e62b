//! Operation counters, closed-form op counts, the Θ figure of merit and the
//! host/device traffic model.
//!
//! Traffic is counted in bytes of 4-byte elements, never in seconds.

use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::tensor::{conv_output_dims, ConvGeometry, ConvPoolGeometry};
use crate::{Error, Result};

/// Bytes per stored element (32-bit floats and 32-bit indices).
pub const ELEMENT_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpCount {
    pub multiplications: u64,
    pub additions: u64,
}

impl OpCount {
    pub const ZERO: OpCount = OpCount {
        multiplications: 0,
        additions: 0,
    };

    pub fn new(multiplications: u64, additions: u64) -> Self {
        Self {
            multiplications,
            additions,
        }
    }

    /// Componentwise sum.
    pub fn merge(self, other: OpCount) -> OpCount {
        self + other
    }

    /// Tally for one reduction of `terms` products into a single accumulator.
    #[inline]
    pub fn reduction(terms: usize) -> OpCount {
        OpCount {
            multiplications: terms as u64,
            additions: terms.saturating_sub(1) as u64,
        }
    }
}

impl Add for OpCount {
    type Output = OpCount;

    fn add(self, rhs: OpCount) -> OpCount {
        OpCount {
            multiplications: self.multiplications + rhs.multiplications,
            additions: self.additions + rhs.additions,
        }
    }
}

impl AddAssign for OpCount {
    fn add_assign(&mut self, rhs: OpCount) {
        *self = *self + rhs;
    }
}

impl Sum for OpCount {
    fn sum<I: Iterator<Item = OpCount>>(iter: I) -> OpCount {
        iter.fold(OpCount::ZERO, Add::add)
    }
}

/// Dense multiplication count for one single-channel convolution.
pub fn eq1_muls(i_w: usize, i_h: usize, k_w: usize, k_h: usize, c_s: usize) -> Result<u64> {
    let (o_w, o_h) = conv_output_dims(i_w, i_h, k_w, k_h, c_s)?;
    Ok((o_w * o_h * k_w * k_h) as u64)
}

/// Dense addition count for one single-channel convolution.
pub fn eq2_adds(i_w: usize, i_h: usize, k_w: usize, k_h: usize, c_s: usize) -> Result<u64> {
    let (o_w, o_h) = conv_output_dims(i_w, i_h, k_w, k_h, c_s)?;
    Ok((o_w * o_h * (k_w * k_h - 1)) as u64)
}

/// Dense op count for a multi-channel convolution with one filter.
///
/// Each output reduces `channels*k_w*k_h` products into one accumulator, so
/// additions are `o_w*o_h*(channels*k_w*k_h - 1)`. With one channel this is
/// exactly [`eq1_muls`] / [`eq2_adds`].
pub fn dense_op_count(g: &ConvGeometry) -> Result<OpCount> {
    g.validate()?;
    let (o_w, o_h) = g.out_dims();
    let outputs = (o_w * o_h) as u64;
    let terms = g.window_len() as u64;
    Ok(OpCount {
        multiplications: outputs * terms,
        additions: outputs * (terms - 1),
    })
}

/// Θ = (100 · sparsity) / width.
pub fn theta(sparsity: f64, width: usize) -> Result<f64> {
    if width == 0 {
        return Err(Error::Config("theta needs a positive width".into()));
    }
    Ok(sparsity * 100.0 / width as f64)
}

/// Modeled data movement, in bytes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub host_to_device_bytes: u64,
    pub device_to_host_bytes: u64,
    pub global_loads_bytes: u64,
    pub global_stores_bytes: u64,
}

impl TrafficReport {
    /// Host↔device transfer bytes in both directions.
    pub fn transfer_bytes(&self) -> u64 {
        self.host_to_device_bytes + self.device_to_host_bytes
    }

    pub fn transfer_floats(&self) -> u64 {
        self.transfer_bytes() / ELEMENT_BYTES
    }

    /// Transfers plus device global-memory traffic.
    pub fn total_bytes(&self) -> u64 {
        self.transfer_bytes() + self.global_loads_bytes + self.global_stores_bytes
    }
}

impl Add for TrafficReport {
    type Output = TrafficReport;

    fn add(self, rhs: TrafficReport) -> TrafficReport {
        TrafficReport {
            host_to_device_bytes: self.host_to_device_bytes + rhs.host_to_device_bytes,
            device_to_host_bytes: self.device_to_host_bytes + rhs.device_to_host_bytes,
            global_loads_bytes: self.global_loads_bytes + rhs.global_loads_bytes,
            global_stores_bytes: self.global_stores_bytes + rhs.global_stores_bytes,
        }
    }
}

impl AddAssign for TrafficReport {
    fn add_assign(&mut self, rhs: TrafficReport) {
        *self = *self + rhs;
    }
}

/// Element counts of the tensors touched by one conv+pool layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerVolumes {
    pub input: u64,
    pub filters: u64,
    pub conv_output: u64,
    pub pool_output: u64,
}

impl LayerVolumes {
    pub fn of(g: &ConvPoolGeometry, filters: usize) -> Result<Self> {
        g.validate()?;
        let (o_w, o_h) = g.conv.out_dims();
        let (p_w, p_h) = g.pool_out_dims()?;
        let f = filters as u64;
        Ok(Self {
            input: g.conv.input_len() as u64,
            filters: f * g.conv.window_len() as u64,
            conv_output: f * (o_w * o_h) as u64,
            pool_output: f * (p_w * p_h) as u64,
        })
    }
}

/// Convolution and pooling as separate device passes with the convolution
/// result bounced through the host in between.
pub fn traffic_separate(g: &ConvPoolGeometry) -> Result<TrafficReport> {
    let v = LayerVolumes::of(g, 1)?;
    Ok(separate_from_volumes(&v))
}

/// Fused conv+pool: inputs go up once, only pooled results come back.
pub fn traffic_fused(g: &ConvPoolGeometry) -> Result<TrafficReport> {
    let v = LayerVolumes::of(g, 1)?;
    Ok(fused_from_volumes(&v))
}

pub(crate) fn separate_from_volumes(v: &LayerVolumes) -> TrafficReport {
    TrafficReport {
        host_to_device_bytes: (v.input + v.filters + v.conv_output) * ELEMENT_BYTES,
        device_to_host_bytes: (v.conv_output + v.pool_output) * ELEMENT_BYTES,
        global_loads_bytes: (v.input + v.filters + v.conv_output) * ELEMENT_BYTES,
        global_stores_bytes: (v.conv_output + v.pool_output) * ELEMENT_BYTES,
    }
}

pub(crate) fn fused_from_volumes(v: &LayerVolumes) -> TrafficReport {
    TrafficReport {
        host_to_device_bytes: (v.input + v.filters) * ELEMENT_BYTES,
        device_to_host_bytes: v.pool_output * ELEMENT_BYTES,
        global_loads_bytes: (v.input + v.filters) * ELEMENT_BYTES,
        global_stores_bytes: v.pool_output * ELEMENT_BYTES,
    }
}

/// Percentage reduction of sparse over dense work, per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub multiplications_pct: f64,
    pub additions_pct: f64,
}

pub fn reduction_report(dense: OpCount, sparse: OpCount) -> Result<Reduction> {
    if dense.multiplications == 0 || dense.additions == 0 {
        return Err(Error::Config("dense op count must be nonzero".into()));
    }
    let pct = |s: u64, d: u64| (1.0 - s as f64 / d as f64) * 100.0;
    Ok(Reduction {
        multiplications_pct: pct(sparse.multiplications, dense.multiplications),
        additions_pct: pct(sparse.additions, dense.additions),
    })
}

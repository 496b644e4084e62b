use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type of feature maps and filters.
///
/// Implemented for every IEEE float type `num-traits` knows about; in
/// practice `f32` (the storage type of every file format) and `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Exact zero test. Both `+0.0` and `-0.0` count as zero.
    #[inline]
    fn is_exact_zero(self) -> bool {
        self == Self::zero()
    }

    /// Lossy conversion used by the file formats, which store `f32`.
    #[inline]
    fn to_f32_lossy(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }

    #[inline]
    fn from_f32_lossy(v: f32) -> Self {
        Self::from_f32(v).unwrap_or_else(Self::nan)
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + Sum
        + Default
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}

use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a model. Training runs in `f32`; `f64`
/// exists so gradient checks can run in double precision.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Raw IEEE bits widened to 64 bits, used for checksums.
    fn bits(self) -> u64;

    fn from_f32_exact(v: f32) -> Self;

    fn from_usize_lossy(v: usize) -> Self;

    fn to_f32_lossy(self) -> f32;

    fn to_f64_lossy(self) -> f64;

    /// `exp` from the `libm` crate, identical whether or not std is linked.
    fn exp_portable(self) -> Self;

    /// Natural log from the `libm` crate.
    fn ln_portable(self) -> Self;
}

impl Real for f32 {
    fn bits(self) -> u64 {
        u64::from(self.to_bits())
    }
    fn from_f32_exact(v: f32) -> Self {
        v
    }
    fn from_usize_lossy(v: usize) -> Self {
        v as f32
    }
    fn to_f32_lossy(self) -> f32 {
        self
    }
    fn to_f64_lossy(self) -> f64 {
        f64::from(self)
    }
    fn exp_portable(self) -> Self {
        libm::expf(self)
    }
    fn ln_portable(self) -> Self {
        libm::logf(self)
    }
}

impl Real for f64 {
    fn bits(self) -> u64 {
        self.to_bits()
    }
    fn from_f32_exact(v: f32) -> Self {
        f64::from(v)
    }
    fn from_usize_lossy(v: usize) -> Self {
        v as f64
    }
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn exp_portable(self) -> Self {
        libm::exp(self)
    }
    fn ln_portable(self) -> Self {
        libm::log(self)
    }
}

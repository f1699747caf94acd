//! Element type abstraction so the whole stack can run in either f32 or f64.
//!
//! Tests and gradient checks always instantiate f64; f32 is there for faster
//! training runs and is selected through the run configuration.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element of every tensor in the crate.
pub trait Scalar:
    Float + AddAssign + SubAssign + MulAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Width of the little-endian encoding in bytes (4 or 8).
    const WIDTH: usize;
    /// Name used in config files and checkpoint headers.
    const NAME: &'static str;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const WIDTH: usize = 4;
    const NAME: &'static str = "single";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const WIDTH: usize = 8;
    const NAME: &'static str = "double";

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// Convert an f64 literal into the working precision.
#[inline]
pub fn lit<F: Scalar>(x: f64) -> F {
    F::from(x).expect("literal not representable")
}

/// Widen a scalar back to f64 (for logging and metrics).
#[inline]
pub fn wide<F: Scalar>(x: F) -> f64 {
    x.to_f64().expect("scalar not representable as f64")
}

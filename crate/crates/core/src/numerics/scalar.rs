//! Floating-point scalar abstraction.
//!
//! Model storage is `f32`; the finite-difference oracles run the same code
//! at `f64`. Reductions always accumulate in `f64` regardless of `S`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign};
use serde::{de::DeserializeOwned, Serialize};

pub trait Scalar:
    Float
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Tag used in file manifests.
    const DTYPE: &'static str;

    /// Rounds an `f64` to this precision.
    fn cast(x: f64) -> Self;

    /// Widens to `f64` (exact for `f32` and `f64`).
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline(always)]
    fn cast(x: f64) -> Self {
        x as f32
    }

    #[inline(always)]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    #[inline(always)]
    fn cast(x: f64) -> Self {
        x
    }

    #[inline(always)]
    fn f64(self) -> f64 {
        self
    }
}

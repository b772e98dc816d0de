//! Differentiable computation and equivariant network layers.

pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod pointnet;
pub mod rep;
pub mod tape;
pub mod unet;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub use layers::{EqConv3d, EqLinear};
pub use params::{AdamW, ParamStore};
pub use rep::{Block, Rep};
pub use tape::{NodeId, Padding, Tape};

/// Scalar type a tape can run in (`f32` or `f64`).
pub trait Real:
    num_traits::Float + AddAssign + SubAssign + MulAssign + Sum + Debug + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

pub fn cast<T: Real>(x: &[f64]) -> Vec<T> {
    x.iter().map(|v| T::from(*v).unwrap()).collect()
}

pub fn uncast<T: Real>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.to_f64().unwrap()).collect()
}

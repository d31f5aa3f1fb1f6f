use std::fmt::{Debug, Display};

/// Floating-point scalar the numeric core is generic over.
///
/// Parameters and activations are stored as `S`, but every reduction
/// (convolution dot products, batch statistics, loss means, pooling)
/// accumulates in `f64` regardless of `S`; `from_f64`/`to_f64` are the
/// bridge and are exact for both supported types in the widening direction.
pub trait Scalar:
    num_traits::Float + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> f64 {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

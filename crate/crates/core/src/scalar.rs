//! Floating-point scalar abstraction shared by every numerical routine.
//!
//! Stored matrices are always binary32; the math runs in whatever precision
//! the caller picks (`f32` for inference, `f64` for training and gradient
//! checks).

use std::fmt::{Debug, Display};

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub trait Scalar:
    Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable in every scalar type")
    }

    fn from_f32_exact(x: f32) -> Self {
        Self::from_f32(x).expect("f32 is representable in every scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn to_f32_lossy(self) -> f32 {
        self.to_f32().expect("scalar converts to f32")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Widen (or copy) a stored binary32 matrix into the working precision.
pub fn cast_matrix<T: Scalar>(m: &Array2<f32>) -> Array2<T> {
    m.mapv(T::from_f32_exact)
}

/// Round a working-precision matrix back to binary32 for storage.
pub fn to_storage<T: Scalar>(m: &Array2<T>) -> Array2<f32> {
    m.mapv(|x| x.to_f32_lossy())
}

/// Index of the first maximum; `None` for an empty slice.
pub fn argmax<T: Scalar>(row: impl IntoIterator<Item = T>) -> Option<(usize, T)> {
    let mut best: Option<(usize, T)> = None;
    for (i, x) in row.into_iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(argmax([0.5f64, 0.5]), Some((0, 0.5)));
        assert_eq!(argmax([0.1f32, 0.7, 0.7]), Some((1, 0.7)));
        assert_eq!(argmax(Vec::<f64>::new()), None);
    }

    #[test]
    fn widening_is_exact() {
        let m = ndarray::array![[0.1f32, -3.5e-7]];
        let wide: Array2<f64> = cast_matrix(&m);
        assert_eq!(to_storage(&wide), m);
    }
}

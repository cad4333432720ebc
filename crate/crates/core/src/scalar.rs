//! Floating-point scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real number type used for embeddings, similarity scores and metrics.
///
/// Implemented for `f32` and `f64`. The pipeline itself runs on `f64`
/// (see the aliases at the crate root); the generic form exists so the
/// scoring math can be checked at both precisions.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + AddAssign + Debug + Display + Default + Send + Sync + 'static
{
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).unwrap_or_else(Self::max_value)
    }

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Arithmetic mean, `None` for an empty slice.
pub fn mean<F: Scalar>(values: &[F]) -> Option<F> {
    if values.is_empty() {
        return None;
    }
    let mut acc = F::zero();
    for v in values {
        acc += *v;
    }
    Some(acc / F::from_usize_lossy(values.len()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_of_empty_is_none() {
        assert_eq!(mean::<f64>(&[]), None);
        assert_eq!(mean(&[1.0f32, 2.0, 3.0]), Some(2.0));
    }
}

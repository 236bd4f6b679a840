use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

/// Floating point scalar the set algebra is written against: `f32` or `f64`.
pub trait Real: Float + FromPrimitive + Debug + Send + Sync + 'static {
    /// Converts an `f64` literal. Panics only for values the type cannot
    /// represent at all, which never happens for `f32`/`f64`.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }

    /// Pivot tolerance for the small dense solvers in this crate.
    fn pivot_eps() -> Self {
        Self::epsilon().sqrt() * Self::lit(1e-2)
    }
}

impl<T: Float + FromPrimitive + Debug + Send + Sync + 'static> Real for T {}

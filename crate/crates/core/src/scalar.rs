//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All math is written against [`Scalar`] so the same code runs in `f32`
//! and `f64`. The crate root exports `f64` aliases for the common types;
//! every verification path uses those, since the identity checks demand
//! double precision.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable throughout the laboratory.
///
/// The supertraits pull in everything the numeric kernels need: IEEE-754
/// semantics (`Float`), literal conversion (`FromPrimitive`/`ToPrimitive`),
/// compound assignment, and thread-safety bounds so datasets and models can
/// cross rayon worker boundaries.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    ///
    /// Used for constants baked into algorithms (step fractions, tolerance
    /// floors). Conversion from `f64` is exact for `f64` and rounds once for
    /// `f32`, which is the behaviour callers expect from a literal.
    fn from_f64_lit(value: f64) -> Self {
        Self::from_f64(value).expect("finite f64 literal converts to every scalar type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Sums a slice by pairwise (cascade) reduction.
///
/// Pairwise summation keeps rounding error at `O(log n)` ulps instead of the
/// `O(n)` of a left fold, and — just as important here — the result depends
/// only on the slice contents, never on thread count or chunking decisions
/// made elsewhere. Every mean and inner product in the crate funnels through
/// this so the whole pipeline stays bit-reproducible.
pub fn pairwise_sum<S: Scalar>(values: &[S]) -> S {
    // Below this length a straight fold is both fast and already exact
    // enough; the recursion overhead would dominate.
    const LEAF: usize = 32;
    if values.len() <= LEAF {
        let mut acc = S::zero();
        for &v in values {
            acc += v;
        }
        return acc;
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Arithmetic mean via [`pairwise_sum`]; zero for an empty slice.
pub fn pairwise_mean<S: Scalar>(values: &[S]) -> S {
    if values.is_empty() {
        return S::zero();
    }
    pairwise_sum(values) / S::from_f64_lit(values.len() as f64)
}

/// Dot product with pairwise reduction over the elementwise products.
///
/// Panics if the slices differ in length; callers validate shapes before
/// reaching numeric kernels.
pub fn pairwise_dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len(), "dot product requires equal lengths");
    let products: Vec<S> = a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    pairwise_sum(&products)
}

/// Euclidean norm of a slice.
pub fn l2_norm<S: Scalar>(values: &[S]) -> S {
    pairwise_dot(values, values).sqrt()
}

/// Largest absolute entry of a slice; zero for an empty slice.
pub fn linf_norm<S: Scalar>(values: &[S]) -> S {
    values.iter().fold(
        S::zero(),
        |acc, &v| if v.abs() > acc { v.abs() } else { acc },
    )
}

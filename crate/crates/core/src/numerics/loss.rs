//! Reduction losses on plain slices. The graph primitives in
//! [`Graph`](super::Graph) delegate here so the values agree exactly.

use super::Scalar;

pub const PROB_CLAMP: f64 = 1e-7;

fn clamp<T: Scalar>(p: T) -> T {
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    if p.is_nan() {
        return p;
    }
    p.max(lo).min(hi)
}

/// Mean of `-(beta * y * ln p + (1 - y) * ln(1 - p))`.
///
/// `beta` weights only the positive-class term.
pub fn weighted_bce<T: Scalar>(p: &[T], y: &[T], beta: T) -> T {
    assert_eq!(p.len(), y.len());
    let n = T::from_usize(p.len().max(1)).unwrap();
    let total: T = p
        .iter()
        .zip(y)
        .map(|(&p, &y)| {
            let pc = clamp(p);
            -(beta * y * pc.ln() + (T::one() - y) * (T::one() - pc).ln())
        })
        .sum();
    total / n
}

/// Plain averaged binary cross-entropy.
pub fn bce<T: Scalar>(p: &[T], y: &[T]) -> T {
    weighted_bce(p, y, T::one())
}

pub(crate) fn weighted_bce_grad<T: Scalar>(p: &[T], y: &[T], beta: T) -> Vec<T> {
    let n = T::from_usize(p.len().max(1)).unwrap();
    let lo = T::lit(PROB_CLAMP);
    let hi = T::one() - lo;
    p.iter()
        .zip(y)
        .map(|(&p, &y)| {
            if p < lo || p > hi {
                return T::zero();
            }
            (-beta * y / p + (T::one() - y) / (T::one() - p)) / n
        })
        .collect()
}

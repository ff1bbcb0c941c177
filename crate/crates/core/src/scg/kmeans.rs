use crate::attention::ConceptMask;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_ITERATIONS: usize = 100;

/// Two-cluster Lloyd iteration on scalars.
///
/// Centroids start at the minimum and maximum; a value equidistant from both
/// joins the low cluster. Returns high-cluster membership and the final
/// `(low, high)` centroids.
pub fn kmeans_1d(values: &[f64]) -> Result<(Vec<bool>, (f64, f64))> {
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail too
    if values.is_empty() || !(hi > lo) {
        return Err(Error::Degenerate("constant map has no two clusters".into()));
    }
    let mut high: Vec<bool> = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let next: Vec<bool> = values.iter().map(|&v| (v - hi).abs() < (v - lo).abs()).collect();
        if next == high {
            break;
        }
        high = next;
        let (mut s0, mut n0, mut s1, mut n1) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &h) in values.iter().zip(&high) {
            if h {
                s1 += v;
                n1 += 1;
            } else {
                s0 += v;
                n0 += 1;
            }
        }
        // Extremal starts keep both clusters populated: the minimum is never
        // closer to the upper centroid, nor the maximum to the lower one.
        lo = s0 / n0 as f64;
        hi = s1 / n1 as f64;
    }
    Ok((high, (lo, hi)))
}

/// Mask of the positions in the higher-valued of two k-means clusters over an
/// `(h, w)` attention map.
pub fn kmeans_mask<T: Scalar>(avg_map: &Tensor<T>, concept_token: usize, source_step: usize) -> Result<ConceptMask> {
    let (h, w) = grid_dims(avg_map)?;
    let values: Vec<f64> = avg_map.data().iter().map(|v| v.widen()).collect();
    let (high, _) = kmeans_1d(&values)?;
    ConceptMask::new(concept_token, source_step, h, w, high)
}

pub(crate) fn grid_dims<T: Scalar>(map: &Tensor<T>) -> Result<(usize, usize)> {
    match *map.shape() {
        [h, w] if h * w > 0 => Ok((h, w)),
        _ => Err(Error::shape(
            "averaged map must be a non-empty (h, w) grid",
            map.shape(),
            &[],
        )),
    }
}

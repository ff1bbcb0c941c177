use crate::attention::{AttentionTensor, ConceptMask};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Multiplies by `c` every entry whose token is a bound token `r` and whose
/// position lies inside the mask paired with it. All other entries are
/// copied unchanged.
///
/// With `renormalize`, each position's token vector is then rescaled to sum
/// to one. Two pairs amplifying the same token over overlapping masks would
/// scale an entry twice, which is rejected.
pub fn scg_apply<T: Scalar>(
    map: &AttentionTensor<T>,
    pairs: &[(ConceptMask, usize)],
    c: T,
    renormalize: bool,
) -> Result<AttentionTensor<T>> {
    let [h, w, l] = map.dims();
    if !(c.is_finite() && c > T::zero()) {
        return Err(Error::Invalid(format!(
            "amplification factor {c} must be positive and finite"
        )));
    }
    for (i, (mask, r)) in pairs.iter().enumerate() {
        if (mask.height(), mask.width()) != (h, w) {
            return Err(Error::shape(
                "mask vs attention grid",
                &[mask.height(), mask.width()],
                &[h, w],
            ));
        }
        if *r >= l {
            return Err(Error::Invalid(format!("bound token {r} outside {l} tokens")));
        }
        for (j, (other, r2)) in pairs[..i].iter().enumerate() {
            if r2 == r && other.overlaps(mask) {
                return Err(Error::Ambiguous {
                    token: *r,
                    first: j,
                    second: i,
                });
            }
        }
    }
    let mut rows = map.rows().to_vec();
    for (mask, r) in pairs {
        for p in (0..h * w).filter(|&p| mask.contains(p)) {
            rows[p * l + r] *= c;
        }
    }
    if renormalize {
        for row in rows.chunks_mut(l) {
            let sum: f64 = row.iter().map(|v| v.widen()).sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|v| *v = T::narrow(v.widen() / sum));
            }
        }
    }
    AttentionTensor::new(map.step, map.layer, Tensor::new([h, w, l], rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_2x2x3() -> AttentionTensor<f32> {
        let rows = vec![0.5, 0.4, 0.1, 0.2, 0.2, 0.6, 0.3, 0.3, 0.4, 0.1, 0.1, 0.8];
        AttentionTensor::from_rows(0, 0, 2, 2, 3, rows).unwrap()
    }

    #[test]
    fn single_entry_example() {
        let map = map_2x2x3();
        let mask = ConceptMask::new(1, 1, 2, 2, vec![true, false, false, false]).unwrap();
        let out = scg_apply(&map, &[(mask, 2)], 4.0, false).unwrap();
        assert_eq!(out.at(0, 2), 0.4);
        let changed = (0..12)
            .filter(|&i| out.rows()[i].to_bits() != map.rows()[i].to_bits())
            .count();
        assert_eq!(changed, 1);
    }

    #[test]
    fn identity_cases() {
        let map = map_2x2x3();
        let mask = ConceptMask::new(1, 1, 2, 2, vec![true, true, false, true]).unwrap();
        assert_eq!(scg_apply(&map, &[(mask, 0)], 1.0, false).unwrap(), map);
        let empty = ConceptMask::empty(1, 2, 2);
        assert_eq!(scg_apply(&map, &[(empty, 0)], 4.0, false).unwrap(), map);
    }

    #[test]
    fn overlapping_masks_on_one_token_are_ambiguous() {
        let map = map_2x2x3();
        let a = ConceptMask::new(0, 1, 2, 2, vec![true, true, false, false]).unwrap();
        let b = ConceptMask::new(1, 1, 2, 2, vec![false, true, true, false]).unwrap();
        assert!(matches!(
            scg_apply(&map, &[(a.clone(), 2), (b.clone(), 2)], 4.0, false),
            Err(Error::Ambiguous { token: 2, .. })
        ));
        assert!(scg_apply(&map, &[(a, 2), (b, 1)], 4.0, false).is_ok());
    }

    #[test]
    fn renormalized_rows_sum_to_one() {
        let map = map_2x2x3();
        let mask = ConceptMask::new(1, 1, 2, 2, vec![true, false, true, false]).unwrap();
        let out = scg_apply(&map, &[(mask, 1)], 4.0, true).unwrap();
        assert!(out.max_row_sum_error() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let map = map_2x2x3();
        let mask = ConceptMask::new(1, 1, 2, 2, vec![true, false, false, false]).unwrap();
        assert!(scg_apply(&map, &[(mask.clone(), 3)], 4.0, false).is_err());
        let wide = ConceptMask::new(1, 1, 1, 4, vec![true, false, false, false]).unwrap();
        assert!(scg_apply(&map, &[(wide, 0)], 4.0, false).is_err());
        assert!(scg_apply(&map, &[(mask, 0)], f32::NAN, false).is_err());
    }
}

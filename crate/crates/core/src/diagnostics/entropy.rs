use serde::{Deserialize, Serialize};

use crate::attention::AttentionTensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Shannon entropy, in nats, of a token's attention spread over positions.
///
/// The token's `(h, w)` slice is normalized to sum to one first; `0·ln 0`
/// counts as zero.
pub fn attention_entropy<T: Scalar>(map: &AttentionTensor<T>, token: usize) -> Result<f64> {
    let l = map.tokens();
    if token >= l {
        return Err(Error::Invalid(format!("token {token} outside {l} tokens")));
    }
    let slice: Vec<f64> = map.rows().chunks(l).map(|row| row[token].widen()).collect();
    let total: f64 = slice.iter().sum();
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail too
    if !(total > 0.0) {
        return Err(Error::Degenerate(format!(
            "token {token} has no attention mass at step {}, layer {}",
            map.step, map.layer
        )));
    }
    let sum: f64 = slice
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / total;
            p * p.ln()
        })
        .sum();
    // `0.0 - x` rather than `-x` so a one-hot slice reports +0, not -0.
    Ok((0.0 - sum).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub step: usize,
    pub layer: usize,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyProfile {
    pub token: usize,
    /// Sorted by step descending, then layer ascending: generation order.
    pub rows: Vec<EntropyRow>,
}

impl EntropyProfile {
    /// `step,layer,token,entropy_nats`, one line per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,layer,token,entropy_nats\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.layer, self.token, r.entropy));
        }
        out
    }

    /// Mean entropy per layer over all steps, indexed by layer.
    pub fn layer_means(&self) -> Vec<f64> {
        let layers = self.rows.iter().map(|r| r.layer + 1).max().unwrap_or(0);
        let mut sums = vec![(0.0, 0usize); layers];
        for r in &self.rows {
            sums[r.layer].0 += r.entropy;
            sums[r.layer].1 += 1;
        }
        sums.into_iter()
            .map(|(s, n)| if n == 0 { f64::NAN } else { s / n as f64 })
            .collect()
    }
}

/// Entropy of `token` in every map. Each step present must carry the same
/// contiguous set of layers `0..N`; a hole is reported as a missing map.
pub fn profile_run<T: Scalar>(maps: &[AttentionTensor<T>], token: usize) -> Result<EntropyProfile> {
    if maps.is_empty() {
        return Err(Error::Empty("attention maps"));
    }
    let mut keyed: Vec<(usize, usize, &AttentionTensor<T>)> = maps.iter().map(|m| (m.step, m.layer, m)).collect();
    keyed.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let layers = keyed.iter().map(|k| k.1).max().expect("non-empty") + 1;
    let mut steps: Vec<usize> = keyed.iter().map(|k| k.0).collect();
    steps.dedup();
    let mut rows = Vec::with_capacity(keyed.len());
    let mut it = keyed.iter().peekable();
    for &step in &steps {
        for layer in 0..layers {
            match it.peek() {
                Some(&&(s, l, map)) if s == step && l == layer => {
                    rows.push(EntropyRow {
                        step,
                        layer,
                        entropy: attention_entropy(map, token)?,
                    });
                    it.next();
                }
                Some(&&(s, l, _)) if s == step && l < layer => {
                    return Err(Error::Invalid(format!("duplicate map for step {step}, layer {l}")));
                }
                _ => return Err(Error::MissingMap { step, layer }),
            }
        }
    }
    Ok(EntropyProfile { token, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map_with_slice(step: usize, layer: usize, slice: &[f64]) -> AttentionTensor<f64> {
        // Two tokens; token 0 carries the slice, token 1 the remainder of each row.
        let rows: Vec<f64> = slice.iter().flat_map(|&v| [v, 1.0 - v]).collect();
        AttentionTensor::from_rows(step, layer, 1, slice.len(), 2, rows).unwrap()
    }

    #[test]
    fn unit_values() {
        let uniform = map_with_slice(0, 0, &[0.25; 16]);
        assert!((attention_entropy(&uniform, 0).unwrap() - 16f64.ln()).abs() < 1e-9);
        let mut one_hot = vec![0.0; 16];
        one_hot[5] = 1.0;
        assert_eq!(attention_entropy(&map_with_slice(0, 0, &one_hot), 0).unwrap(), 0.0);
        let two = map_with_slice(0, 0, &[0.5, 0.5, 0.0, 0.0]);
        assert!((attention_entropy(&two, 0).unwrap() - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn zero_slice_is_an_error() {
        let m = map_with_slice(0, 0, &[0.0; 4]);
        assert!(matches!(attention_entropy(&m, 0), Err(Error::Degenerate(_))));
        assert!(attention_entropy(&m, 2).is_err());
    }

    #[test]
    fn rows_follow_generation_order() {
        let maps: Vec<_> = [(3, 1), (5, 0), (3, 0), (5, 1)]
            .iter()
            .map(|&(s, l)| map_with_slice(s, l, &[0.1, 0.2, 0.3]))
            .collect();
        let p = profile_run(&maps, 0).unwrap();
        let order: Vec<(usize, usize)> = p.rows.iter().map(|r| (r.step, r.layer)).collect();
        assert_eq!(order, [(5, 0), (5, 1), (3, 0), (3, 1)]);
        assert!(p.to_csv().starts_with("step,layer,token,entropy_nats\n5,0,0,"));
    }

    #[test]
    fn gaps_are_named() {
        let maps = vec![
            map_with_slice(5, 0, &[0.1, 0.2]),
            map_with_slice(5, 1, &[0.1, 0.2]),
            map_with_slice(4, 1, &[0.1, 0.2]),
        ];
        assert!(matches!(
            profile_run(&maps, 0),
            Err(Error::MissingMap { step: 4, layer: 0 })
        ));
    }
}

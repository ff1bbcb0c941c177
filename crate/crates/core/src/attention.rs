//! Cross-attention maps and binary concept masks.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{dot, softmax_in_place, Tensor};

/// One block's cross-attention at one denoising step, laid out `(h, w, L)`.
///
/// Entry `[y, x, q]` is how much spatial position `(y, x)` attends to text
/// token `q`. Freshly computed maps are row-stochastic over `q`; guided maps
/// may not be.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor<T = f32> {
    pub step: usize,
    pub layer: usize,
    values: Tensor<T>,
}

impl<T: Scalar> AttentionTensor<T> {
    pub fn new(step: usize, layer: usize, values: Tensor<T>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape(
                "attention map must be (h, w, L)",
                values.shape(),
                &[0, 0, 0],
            ));
        }
        values.ensure_finite()?;
        Ok(Self { step, layer, values })
    }

    /// Builds a map from a flat `(h·w, L)` row-major buffer.
    pub fn from_rows(
        step: usize,
        layer: usize,
        height: usize,
        width: usize,
        tokens: usize,
        rows: Vec<T>,
    ) -> Result<Self> {
        Self::new(step, layer, Tensor::new([height, width, tokens], rows)?)
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn positions(&self) -> usize {
        self.height() * self.width()
    }

    /// `(h, w, L)`
    pub fn dims(&self) -> [usize; 3] {
        [self.height(), self.width(), self.tokens()]
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    /// Flat `(h·w) × L` row-major data.
    pub fn rows(&self) -> &[T] {
        self.values.data()
    }

    pub fn at(&self, position: usize, token: usize) -> T {
        self.values.data()[position * self.tokens() + token]
    }

    /// The `(h, w)` slice for one token.
    pub fn token_slice(&self, token: usize) -> Result<Tensor<T>> {
        let l = self.tokens();
        if token >= l {
            return Err(Error::Invalid(format!("token {token} out of range for L = {l}")));
        }
        let data = self.rows().iter().skip(token).step_by(l).copied().collect();
        Tensor::new([self.height(), self.width()], data)
    }

    /// Largest deviation of any position's token sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        self.rows()
            .chunks(self.tokens().max(1))
            .map(|row| (row.iter().map(|v| v.widen()).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn cast<U: Scalar>(&self) -> AttentionTensor<U> {
        AttentionTensor {
            step: self.step,
            layer: self.layer,
            values: self.values.cast(),
        }
    }
}

/// Binary `(h, w)` grid marking where a concept token lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptMask {
    pub concept_token: usize,
    pub source_step: usize,
    height: usize,
    width: usize,
    grid: Vec<bool>,
}

impl ConceptMask {
    /// Rejects grids of the wrong size and masks with no selected cell.
    pub fn new(concept_token: usize, source_step: usize, height: usize, width: usize, grid: Vec<bool>) -> Result<Self> {
        if grid.len() != height * width {
            return Err(Error::shape("mask grid", &[height, width], &[grid.len()]));
        }
        if !grid.iter().any(|&b| b) {
            return Err(Error::Degenerate("extracted concept mask is empty".into()));
        }
        Ok(Self {
            concept_token,
            source_step,
            height,
            width,
            grid,
        })
    }

    /// A mask with no cells set. Only used to exercise the no-op path of
    /// guidance; extraction never produces one.
    pub fn empty(concept_token: usize, height: usize, width: usize) -> Self {
        Self {
            concept_token,
            source_step: 0,
            height,
            width,
            grid: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &[bool] {
        &self.grid
    }

    pub fn contains(&self, position: usize) -> bool {
        self.grid[position]
    }

    pub fn count(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn overlaps(&self, other: &ConceptMask) -> bool {
        self.grid.iter().zip(&other.grid).any(|(&a, &b)| a && b)
    }
}

/// Single-head cross-attention: `softmax(q·kᵀ/√d)·v` over an `h × w` query grid.
///
/// `q` is `(h·w, d)`, `k` and `v` are `(L, d)`.
pub fn cross_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    height: usize,
    width: usize,
) -> Result<(Tensor<T>, AttentionTensor<T>)> {
    if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
        return Err(Error::shape(
            "cross_attention operands must be matrices",
            q.shape(),
            k.shape(),
        ));
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let l = k.shape()[0];
    if d == 0 {
        return Err(Error::Invalid("attention dimension must be >= 1".into()));
    }
    if k.shape()[1] != d {
        return Err(Error::shape("query/key inner dimension", q.shape(), k.shape()));
    }
    if v.shape()[0] != l {
        return Err(Error::shape("key/value token count", k.shape(), v.shape()));
    }
    if n != height * width {
        return Err(Error::shape("query rows vs grid", q.shape(), &[height, width]));
    }
    q.ensure_finite()?;
    k.ensure_finite()?;
    v.ensure_finite()?;
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = vec![T::zero(); n * l];
    for (i, row) in probs.chunks_mut(l).enumerate() {
        let qi = &q.data()[i * d..(i + 1) * d];
        for (j, p) in row.iter_mut().enumerate() {
            *p = T::narrow(dot(qi, &k.data()[j * d..(j + 1) * d]) * scale);
        }
        softmax_in_place(row);
    }
    let dv = v.shape()[1];
    let mut out = vec![T::zero(); n * dv];
    crate::tensor::matmul_into(&probs, v.data(), &mut out, n, l, dv);
    let map = AttentionTensor::from_rows(0, 0, height, width, l, probs)?;
    Ok((Tensor::new([n, dv], out)?, map))
}

/// Mean over layers of one token's `(h, w)` slice.
pub fn average_attention_maps<T: Scalar>(maps: &[AttentionTensor<T>], token: usize) -> Result<Tensor<T>> {
    let first = maps
        .first()
        .ok_or(Error::Empty("average_attention_maps needs at least one map"))?;
    for m in maps {
        if m.dims() != first.dims() {
            return Err(Error::shape(
                "averaged maps must share (h, w, L)",
                &m.dims(),
                &first.dims(),
            ));
        }
        if m.step != first.step {
            return Err(Error::Invalid(format!(
                "averaged maps must share a step ({} vs {})",
                m.step, first.step
            )));
        }
    }
    let l = first.tokens();
    if token >= l {
        return Err(Error::Invalid(format!("token {token} out of range for L = {l}")));
    }
    let n = first.positions();
    let mut acc = vec![0.0f64; n];
    for m in maps {
        for (p, a) in acc.iter_mut().enumerate() {
            *a += m.at(p, token).widen();
        }
    }
    let count = maps.len() as f64;
    Tensor::new(
        [first.height(), first.width()],
        acc.into_iter().map(|a| T::narrow(a / count)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn single_token_map_is_all_ones() {
        let q = Tensor::new([4, 1], vec![1.0f32, -2.0, 0.5, 3.0]).unwrap();
        let k = Tensor::new([1, 1], vec![1.0f32]).unwrap();
        let v = Tensor::new([1, 1], vec![7.0f32]).unwrap();
        let (out, map) = cross_attention(&q, &k, &v, 2, 2).unwrap();
        assert!(map.rows().iter().all(|&p| p == 1.0));
        assert!(out.data().iter().all(|&o| o == 7.0));
    }

    #[test]
    fn two_by_two_hand_case() {
        // d = 2, scale 1/√2. Row 0 scores: [1·1+0·0, 1·0+0·1]/√2 = [1/√2, 0].
        let q = Tensor::new([2, 2], vec![1.0f64, 0.0, 0.0, 2.0]).unwrap();
        let k = Tensor::new([2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let v = Tensor::new([2, 2], vec![1.0f64, 0.0, 0.0, 1.0]).unwrap();
        let (out, map) = cross_attention(&q, &k, &v, 1, 2).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let p00 = s.exp() / (s.exp() + 1.0);
        let p11 = (2.0 * s).exp() / ((2.0 * s).exp() + 1.0);
        let expected = [p00, 1.0 - p00, 1.0 - p11, p11];
        for (a, b) in map.rows().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        // v is the identity so the output rows equal the probabilities.
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let q = Tensor::<f32>::zeros([4, 3]);
        let k = Tensor::<f32>::zeros([5, 2]);
        let v = Tensor::<f32>::zeros([5, 2]);
        let err = cross_attention(&q, &k, &v, 2, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[4, 3]") && msg.contains("[5, 2]"), "{msg}");
    }

    #[test]
    fn random_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random(&[12, 4], &mut rng).cast::<f32>();
        let k = random(&[5, 4], &mut rng).cast::<f32>();
        let v = random(&[5, 4], &mut rng).cast::<f32>();
        let (_, map) = cross_attention(&q, &k, &v, 3, 4).unwrap();
        assert!(map.max_row_sum_error() < 1e-6);
    }

    #[test]
    fn averaging_one_map_returns_its_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = AttentionTensor::new(3, 0, random(&[2, 3, 4], &mut rng)).unwrap();
        let avg = average_attention_maps(std::slice::from_ref(&map), 2).unwrap();
        assert_eq!(avg, map.token_slice(2).unwrap());
    }

    #[test]
    fn averaging_x_and_3x_gives_2x() {
        let x = Tensor::from_fn([2, 2, 2], |i| i as f64 * 0.125);
        let a = AttentionTensor::new(0, 0, x.clone()).unwrap();
        let b = AttentionTensor::new(0, 1, x.scale(3.0)).unwrap();
        let avg = average_attention_maps(&[a.clone(), b], 1).unwrap();
        assert_eq!(avg, a.token_slice(1).unwrap().scale(2.0));
    }

    #[test]
    fn averaging_identical_maps_is_idempotent() {
        let x = Tensor::from_fn([3, 2, 2], |i| (i as f32 + 1.0) / 13.0);
        let maps: Vec<_> = (0..5).map(|l| AttentionTensor::new(7, l, x.clone()).unwrap()).collect();
        let avg = average_attention_maps(&maps, 0).unwrap();
        assert!(avg.max_abs_diff(&maps[0].token_slice(0).unwrap()).unwrap() < 1e-7);
    }

    #[test]
    fn averaging_rejects_bad_input() {
        assert!(average_attention_maps::<f32>(&[], 0).is_err());
        let a = AttentionTensor::new(0, 0, Tensor::<f32>::zeros([2, 2, 3])).unwrap();
        let b = AttentionTensor::new(0, 1, Tensor::<f32>::zeros([2, 3, 3])).unwrap();
        assert!(average_attention_maps(&[a.clone(), b], 0).is_err());
        assert!(average_attention_maps(&[a], 3).is_err());
    }

    #[test]
    fn empty_mask_is_rejected() {
        assert!(ConceptMask::new(0, 0, 2, 2, vec![false; 4]).is_err());
        assert!(ConceptMask::new(0, 0, 2, 2, vec![false, true, false]).is_err());
        assert_eq!(
            ConceptMask::new(0, 0, 2, 2, vec![false, true, true, false])
                .unwrap()
                .count(),
            2
        );
    }

    proptest! {
        #[test]
        fn cross_attention_rows_are_stochastic(seed in 0u64..1000, l in 1usize..7, d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random(&[6, d], &mut rng).scale(3.0).cast::<f32>();
            let k = random(&[l, d], &mut rng).scale(3.0).cast::<f32>();
            let v = random(&[l, d], &mut rng).cast::<f32>();
            let (_, map) = cross_attention(&q, &k, &v, 2, 3).unwrap();
            prop_assert!(map.max_row_sum_error() < 1e-5);
            prop_assert!(map.rows().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn averaging_commutes_with_scaling(seed in 0u64..1000, k in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let maps: Vec<_> = (0..3)
                .map(|l| AttentionTensor::new(0, l, random(&[2, 2, 3], &mut rng)).unwrap())
                .collect();
            let scaled: Vec<_> = maps
                .iter()
                .map(|m| AttentionTensor::new(0, m.layer, m.values().scale(k)).unwrap())
                .collect();
            let lhs = average_attention_maps(&scaled, 1).unwrap();
            let rhs = average_attention_maps(&maps, 1).unwrap().scale(k);
            prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-9);
        }
    }
}

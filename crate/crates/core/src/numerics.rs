//! Dense-vector arithmetic and chunk partitioning.
//!
//! [`DenseVector`] is the universal numeric carrier: model, gradients,
//! momentum, variance and compression residuals are all role-tagged instances
//! of it. Everything is 64-bit floats; the invariant checks downstream need
//! the headroom.
//!
//! All operations are pure functions over immutable inputs and verify that
//! their result is finite. Inputs that would produce NaN or Inf surface as
//! [`Error::Domain`](crate::Error) rather than poisoning later steps.

use crate::error::{Error, Result};

/// Flat buffer of finite 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    data: Vec<f64>,
}

fn first_non_finite(data: &[f64]) -> Option<usize> {
    data.iter().position(|v| !v.is_finite())
}

impl DenseVector {
    /// All-zero vector of the given length.
    pub fn zeros(len: usize) -> Self {
        DenseVector { data: vec![0.0; len] }
    }

    /// Build from raw data, rejecting NaN / Inf elements.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if let Some(i) = first_non_finite(&data) {
            return Err(Error::domain(format!(
                "non-finite element {} at index {i}",
                data[i]
            )));
        }
        Ok(DenseVector { data })
    }

    /// Build from data already known to be finite (internal hot paths).
    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        debug_assert!(first_non_finite(&data).is_none());
        DenseVector { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    fn check_same_len(&self, other: &Self, op: &str) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::dim(format!(
                "{op}: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }

    fn checked(data: Vec<f64>, op: &str) -> Result<Self> {
        if let Some(i) = first_non_finite(&data) {
            return Err(Error::domain(format!(
                "{op} produced non-finite element at index {i}"
            )));
        }
        Ok(DenseVector { data })
    }

    /// `self + other`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_len(other, "add")?;
        let data = self
            .iter()
            .zip(other.iter())
            .map(|(a, b)| a + b)
            .collect();
        Self::checked(data, "add")
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_len(other, "sub")?;
        let data = self
            .iter()
            .zip(other.iter())
            .map(|(a, b)| a - b)
            .collect();
        Self::checked(data, "sub")
    }

    /// `c * self`.
    pub fn scale(&self, c: f64) -> Result<Self> {
        if !c.is_finite() {
            return Err(Error::domain(format!("scale by non-finite {c}")));
        }
        Self::checked(self.iter().map(|a| c * a).collect(), "scale")
    }

    /// `a * x + b * y`, the workhorse of the momentum recursions.
    pub fn lin_comb(a: f64, x: &Self, b: f64, y: &Self) -> Result<Self> {
        x.check_same_len(y, "lin_comb")?;
        if !a.is_finite() || !b.is_finite() {
            return Err(Error::domain("lin_comb with non-finite coefficient"));
        }
        let data = x
            .iter()
            .zip(y.iter())
            .map(|(xi, yi)| a * xi + b * yi)
            .collect();
        Self::checked(data, "lin_comb")
    }

    /// Element-wise product (the Hadamard product).
    pub fn elementwise_multiply(&self, other: &Self) -> Result<Self> {
        self.check_same_len(other, "elementwise_multiply")?;
        let data = self
            .iter()
            .zip(other.iter())
            .map(|(a, b)| a * b)
            .collect();
        Self::checked(data, "elementwise_multiply")
    }

    /// Element-wise division with a floored denominator:
    /// `result[i] = self[i] / max(other[i], floor)`.
    ///
    /// The floor guards coordinates whose denominator is zero (e.g. variance
    /// entries of parameters never touched by a gradient).
    pub fn elementwise_divide(&self, other: &Self, floor: f64) -> Result<Self> {
        self.check_same_len(other, "elementwise_divide")?;
        if !(floor > 0.0) || !floor.is_finite() {
            return Err(Error::config(format!(
                "division floor must be a positive finite number, got {floor}"
            )));
        }
        let data = self
            .iter()
            .zip(other.iter())
            .map(|(a, b)| a / b.max(floor))
            .collect();
        Self::checked(data, "elementwise_divide")
    }

    /// Element-wise square root. Errors on negative elements.
    pub fn elementwise_sqrt(&self) -> Result<Self> {
        if let Some(i) = self.iter().position(|v| *v < 0.0) {
            return Err(Error::domain(format!(
                "sqrt of negative element {} at index {i}",
                self.data[i]
            )));
        }
        Ok(Self::from_vec_unchecked(
            self.iter().map(|a| a.sqrt()).collect(),
        ))
    }

    /// Add a scalar to every element.
    pub fn add_scalar(&self, c: f64) -> Result<Self> {
        if !c.is_finite() {
            return Err(Error::domain(format!("add_scalar with non-finite {c}")));
        }
        Self::checked(self.iter().map(|a| a + c).collect(), "add_scalar")
    }

    /// Euclidean norm; 0 for the empty vector.
    pub fn l2_norm(&self) -> f64 {
        self.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// Arithmetic mean of same-length vectors, summed in index order.
    pub fn mean(vectors: &[Self]) -> Result<Self> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::config("mean of zero vectors"))?;
        let mut acc = vec![0.0; first.len()];
        for v in vectors {
            first.check_same_len(v, "mean")?;
            for (a, b) in acc.iter_mut().zip(v.iter()) {
                *a += b;
            }
        }
        let inv = 1.0 / vectors.len() as f64;
        Self::checked(acc.into_iter().map(|a| a * inv).collect(), "mean")
    }

    /// Largest absolute element; 0 for the empty vector.
    pub fn max_abs(&self) -> f64 {
        self.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl std::ops::Index<usize> for DenseVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// Contiguous, non-overlapping partition of `total_len` elements into
/// `n_chunks` chunks whose lengths differ by at most one.
///
/// The remainder `total_len mod n_chunks` goes one extra element to the
/// lowest-index chunks, so the layout is fully determined by its arguments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkLayout {
    total_len: usize,
    offsets: Vec<(usize, usize)>, // (start, len) per chunk
}

/// Build the remainder-first chunk layout. `n_chunks` must be at least 1.
pub fn make_chunk_layout(total_len: usize, n_chunks: usize) -> Result<ChunkLayout> {
    if n_chunks == 0 {
        return Err(Error::config("n_chunks must be >= 1"));
    }
    let base = total_len / n_chunks;
    let remainder = total_len % n_chunks;
    let mut offsets = Vec::with_capacity(n_chunks);
    let mut start = 0;
    for k in 0..n_chunks {
        let len = base + usize::from(k < remainder);
        offsets.push((start, len));
        start += len;
    }
    debug_assert_eq!(start, total_len);
    Ok(ChunkLayout { total_len, offsets })
}

impl ChunkLayout {
    pub fn new(total_len: usize, n_chunks: usize) -> Result<Self> {
        make_chunk_layout(total_len, n_chunks)
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn n_chunks(&self) -> usize {
        self.offsets.len()
    }

    /// `(start, len)` of chunk `k`.
    pub fn chunk(&self, k: usize) -> (usize, usize) {
        self.offsets[k]
    }

    pub fn chunk_len(&self, k: usize) -> usize {
        self.offsets[k].1
    }

    /// Borrow chunk `k` of a full-length vector.
    pub fn slice_of<'a>(&self, v: &'a DenseVector, k: usize) -> Result<&'a [f64]> {
        if v.len() != self.total_len {
            return Err(Error::dim(format!(
                "slice_of: vector len {} vs layout len {}",
                v.len(),
                self.total_len
            )));
        }
        let (start, len) = self.offsets[k];
        Ok(&v.as_slice()[start..start + len])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn divide_exact() {
        let a = DenseVector::from_vec(vec![2.0, 4.0]).unwrap();
        let b = DenseVector::from_vec(vec![1.0, 2.0]).unwrap();
        let r = a.elementwise_divide(&b, 1e-12).unwrap();
        assert_eq!(r.as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn divide_floor_engages_at_zero_denominator() {
        let a = DenseVector::from_vec(vec![1.0]).unwrap();
        let b = DenseVector::from_vec(vec![0.0]).unwrap();
        let r = a.elementwise_divide(&b, 1e-8).unwrap();
        assert_eq!(r.as_slice(), &[1e8]);
    }

    #[test]
    fn divide_after_sqrt_matches_hand_computation() {
        // 0.3 / sqrt(0.09) = 1.0, -0.6 / sqrt(0.36) = -1.0
        let a = DenseVector::from_vec(vec![0.3, -0.6]).unwrap();
        let b = DenseVector::from_vec(vec![0.09, 0.36])
            .unwrap()
            .elementwise_sqrt()
            .unwrap();
        let r = a.elementwise_divide(&b, 1e-12).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-15);
        assert!((r[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn divide_rejects_length_mismatch() {
        let a = DenseVector::zeros(2);
        let b = DenseVector::zeros(3);
        assert!(matches!(
            a.elementwise_divide(&b, 1e-8),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn sqrt_basics() {
        let a = DenseVector::from_vec(vec![0.0, 1.0, 4.0]).unwrap();
        assert_eq!(a.elementwise_sqrt().unwrap().as_slice(), &[0.0, 1.0, 2.0]);
        let b = DenseVector::from_vec(vec![1e-6]).unwrap();
        assert_eq!(b.elementwise_sqrt().unwrap()[0], 1e-3);
        // calculator oracle: sqrt(0.001) = 0.03162277660168379...
        let c = DenseVector::from_vec(vec![0.001]).unwrap();
        assert!((c.elementwise_sqrt().unwrap()[0] - 0.031_622_776_601_683_79).abs() < 1e-15);
    }

    #[test]
    fn sqrt_rejects_negative() {
        let a = DenseVector::from_vec(vec![-1.0]).unwrap();
        assert!(matches!(a.elementwise_sqrt(), Err(Error::Domain(_))));
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(DenseVector::from_vec(vec![1.0, f64::NAN]).is_err());
        assert!(DenseVector::from_vec(vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn layout_examples() {
        let lens = |l: &ChunkLayout| -> Vec<usize> {
            (0..l.n_chunks()).map(|k| l.chunk_len(k)).collect()
        };
        assert_eq!(lens(&make_chunk_layout(10, 4).unwrap()), vec![3, 3, 2, 2]);
        assert_eq!(lens(&make_chunk_layout(8, 8).unwrap()), vec![1; 8]);
        assert_eq!(
            lens(&make_chunk_layout(5, 8).unwrap()),
            vec![1, 1, 1, 1, 1, 0, 0, 0]
        );
        assert!(matches!(
            make_chunk_layout(10, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn l2_norm_examples() {
        assert_eq!(
            DenseVector::from_vec(vec![3.0, 4.0]).unwrap().l2_norm(),
            5.0
        );
        assert_eq!(DenseVector::zeros(0).l2_norm(), 0.0);
        // calculator oracle: sqrt(21) = 4.58257569495584
        let v = DenseVector::from_vec(vec![2.0, -4.0, 1.0]).unwrap();
        assert!((v.l2_norm() - 4.582_575_694_955_84).abs() < 1e-12);
    }

    fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1e6_f64..1e6_f64, len)
    }

    proptest! {
        // divide(a ⊙ b, b, f) == a wherever b[i] >= f, to 1 ulp per element.
        #[test]
        fn divide_inverts_multiply(
            (a, b) in (1usize..64).prop_flat_map(|n| (finite_vec(n), finite_vec(n)))
        ) {
            let floor = 1e-3;
            let av = DenseVector::from_vec(a.clone()).unwrap();
            let bv = DenseVector::from_vec(b.clone()).unwrap();
            let prod = av.elementwise_multiply(&bv).unwrap();
            let back = prod.elementwise_divide(&bv, floor).unwrap();
            for i in 0..a.len() {
                if b[i] >= floor {
                    let expect = a[i];
                    let got = back[i];
                    let ulp = (expect.abs().max(f64::MIN_POSITIVE)) * f64::EPSILON;
                    prop_assert!((got - expect).abs() <= ulp,
                        "i={i} got={got} expect={expect}");
                }
            }
        }

        // Concatenating chunk slices reconstructs the vector bitwise.
        #[test]
        fn layout_is_a_partition(
            data in proptest::collection::vec(-1e9_f64..1e9_f64, 0..200),
            n_chunks in 1usize..16
        ) {
            let v = DenseVector::from_vec(data.clone()).unwrap();
            let layout = make_chunk_layout(v.len(), n_chunks).unwrap();
            let mut rebuilt: Vec<f64> = Vec::with_capacity(v.len());
            for k in 0..layout.n_chunks() {
                rebuilt.extend_from_slice(layout.slice_of(&v, k).unwrap());
            }
            let same_bits = rebuilt.len() == data.len()
                && rebuilt.iter().zip(&data).all(|(x, y)| x.to_bits() == y.to_bits());
            prop_assert!(same_bits);
        }

        // Triangle inequality and absolute homogeneity (1e-12 relative).
        #[test]
        fn l2_norm_is_a_norm(
            (a, b) in (1usize..64).prop_flat_map(|n| (finite_vec(n), finite_vec(n))),
            c in -100.0_f64..100.0
        ) {
            let av = DenseVector::from_vec(a).unwrap();
            let bv = DenseVector::from_vec(b).unwrap();
            let sum = av.add(&bv).unwrap();
            let lhs = sum.l2_norm();
            let rhs = av.l2_norm() + bv.l2_norm();
            prop_assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-300);
            let scaled = av.scale(c).unwrap();
            let expect = c.abs() * av.l2_norm();
            prop_assert!((scaled.l2_norm() - expect).abs() <= expect.abs() * 1e-12 + 1e-300);
        }
    }
}

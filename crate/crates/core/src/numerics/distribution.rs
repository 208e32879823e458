use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Categorical distributions along the trailing axis of `probs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution<S> {
    probs: Tensor<S>,
}

impl<S: Scalar> Distribution<S> {
    /// Wraps probabilities after checking that every trailing slice is a
    /// distribution (nonnegative, sums to one within `1e-9`).
    pub fn new(probs: Tensor<S>) -> Result<Self> {
        if probs.rank() == 0 || probs.shape().last() == Some(&0) {
            return Err(Error::InvalidInput("distribution needs a nonempty support".into()));
        }
        let d = Self { probs };
        for r in 0..d.num_rows() {
            let row = d.row(r);
            if row.iter().any(|&p| p < S::zero() || !p.is_finite()) {
                return Err(Error::InvalidInput(format!("row {r} has negative or non-finite mass")));
            }
            let total: S = row.iter().copied().sum();
            if (total - S::one()).abs() > S::lit(1e-9) {
                return Err(Error::InvalidInput(format!("row {r} sums to {total}")));
            }
        }
        Ok(d)
    }

    pub(crate) fn new_unchecked(probs: Tensor<S>) -> Self {
        Self { probs }
    }

    pub fn uniform(rows: usize, support: usize) -> Self {
        let v = S::one() / S::from_usize(support).unwrap();
        Self {
            probs: Tensor::full(&[rows, support], v),
        }
    }

    pub fn probs(&self) -> &Tensor<S> {
        &self.probs
    }

    pub fn into_probs(self) -> Tensor<S> {
        self.probs
    }

    pub fn support_size(&self) -> usize {
        *self.probs.shape().last().unwrap()
    }

    pub fn num_rows(&self) -> usize {
        self.probs.numel() / self.support_size()
    }

    pub fn row(&self, r: usize) -> &[S] {
        let v = self.support_size();
        &self.probs.data()[r * v..(r + 1) * v]
    }

    /// Keeps only the listed rows, as a `rows x support` distribution.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let v = self.support_size();
        let flat = self.probs.clone().reshape(vec![self.num_rows(), v])?;
        Ok(Self {
            probs: flat.select_rows(rows)?,
        })
    }

    /// Shannon entropy of each row in nats.
    pub fn entropy(&self) -> Vec<S> {
        let floor = S::lit(PROB_FLOOR);
        (0..self.num_rows())
            .map(|r| {
                -self
                    .row(r)
                    .iter()
                    .map(|&p| if p > S::zero() { p * p.max(floor).ln() } else { S::zero() })
                    .sum::<S>()
            })
            .collect()
    }

    /// Index of the most probable entry per row; ties resolve to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.num_rows()).map(|r| argmax(self.row(r))).collect()
    }
}

pub fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<S: Scalar>(logits: &Tensor<S>, axis: usize) -> Result<Distribution<S>> {
    let rank = logits.rank();
    if axis >= rank {
        return Err(Error::InvalidAxis { axis, rank });
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let shape = logits.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = logits.data();
    let mut out = vec![S::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let mut max = S::neg_infinity();
            for j in 0..len {
                max = max.max(src[idx(j)]);
            }
            let mut total = S::zero();
            for j in 0..len {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    let probs = Tensor::new(shape.to_vec(), out)?;
    if axis + 1 == rank {
        Ok(Distribution::new_unchecked(probs))
    } else {
        // Move the normalized axis last so rows are contiguous.
        let mut perm_shape: Vec<usize> = shape.to_vec();
        perm_shape.remove(axis);
        perm_shape.push(len);
        let mut moved = vec![S::zero(); probs.numel()];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    moved[(o * inner + i) * len + j] = probs.data()[(o * len + j) * inner + i];
                }
            }
        }
        Ok(Distribution::new_unchecked(Tensor::new(perm_shape, moved)?))
    }
}

/// Forward KL(q || p) summed over the support and averaged over rows.
pub fn kl_divergence<S: Scalar>(q: &Distribution<S>, p: &Distribution<S>) -> Result<S> {
    if q.support_size() != p.support_size() {
        return Err(Error::SupportMismatch {
            left: q.support_size(),
            right: p.support_size(),
        });
    }
    if q.num_rows() != p.num_rows() {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            left: q.probs().shape().to_vec(),
            right: p.probs().shape().to_vec(),
        });
    }
    let floor = S::lit(PROB_FLOOR);
    let rows = q.num_rows();
    let mut total = S::zero();
    for r in 0..rows {
        for (&qi, &pi) in q.row(r).iter().zip(p.row(r)) {
            if qi > S::zero() {
                total += qi * (qi.max(floor).ln() - pi.max(floor).ln());
            }
        }
    }
    Ok(total / S::from_usize(rows).unwrap())
}

/// Mean negative log-probability of `targets` over rows where `mask` is set
/// (all rows when `mask` is `None`).
pub fn cross_entropy<S: Scalar>(
    p: &Distribution<S>,
    targets: &[usize],
    mask: Option<&[bool]>,
) -> Result<S> {
    let rows = p.num_rows();
    if targets.len() != rows {
        return Err(Error::LengthMismatch {
            left: targets.len(),
            right: rows,
        });
    }
    let v = p.support_size();
    let floor = S::lit(PROB_FLOOR);
    let mut total = S::zero();
    let mut count = 0usize;
    for (r, &t) in targets.iter().enumerate() {
        if mask.is_some_and(|m| !m[r]) {
            continue;
        }
        if t >= v {
            return Err(Error::IndexOutOfRange { index: t, size: v });
        }
        total -= p.row(r)[t].max(floor).ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidInput("cross entropy over an empty mask".into()));
    }
    Ok(total / S::from_usize(count).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(rows: &[&[f64]]) -> Distribution<f64> {
        Distribution::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let d = softmax(&Tensor::<f64>::zeros(&[3]), 0).unwrap();
        for &p in d.probs().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let logits = Tensor::<f64>::from_f64(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let d = softmax(&logits, 0).unwrap();
        for (p, want) in d.probs().data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((p - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_non_finite_and_bad_axis() {
        let t = Tensor::<f64>::from_f64(&[2], &[0.0, f64::NAN]).unwrap();
        assert!(matches!(softmax(&t, 0), Err(Error::NonFinite { .. })));
        assert!(matches!(softmax(&t, 1), Err(Error::InvalidAxis { .. })));
    }

    #[test]
    fn softmax_inner_axis_moves_axis_last() {
        let t = Tensor::<f64>::from_rows(&[&[0.0, 1.0], &[0.0, 1.0]]).unwrap();
        let d = softmax(&t, 0).unwrap();
        // Normalizing down columns of identical rows gives 1/2 everywhere.
        assert_eq!(d.support_size(), 2);
        assert!(d.probs().data().iter().all(|&p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn kl_examples() {
        let p = dist(&[&[0.4, 0.3, 0.2, 0.1]]);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let kl = kl_divergence(&dist(&[&[1.0, 0.0]]), &dist(&[&[0.5, 0.5]])).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-15);

        // Brute-force scalar sum: sum_i 0.25 * (ln 0.25 - ln p_i).
        let mut want = 0.0;
        for pi in [0.4f64, 0.3, 0.2, 0.1] {
            want += 0.25 * (0.25f64.ln() - pi.ln());
        }
        let kl = kl_divergence(&Distribution::uniform(1, 4), &p).unwrap();
        assert!((kl - want).abs() < 1e-15);
        assert!((want - 0.121_777_274_287_168_6).abs() < 1e-12);
    }

    #[test]
    fn kl_support_mismatch() {
        let err = kl_divergence(&Distribution::<f64>::uniform(1, 3), &Distribution::uniform(1, 4));
        assert!(matches!(err, Err(Error::SupportMismatch { left: 3, right: 4 })));
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&dist(&[&[0.0, 1.0, 0.0]]), &[1], None).unwrap(), 0.0);
        let ce = cross_entropy(&Distribution::<f64>::uniform(1, 7), &[3], None).unwrap();
        assert!((ce - 7f64.ln()).abs() < 1e-15);
        let ce = cross_entropy(&dist(&[&[0.7, 0.2, 0.1]]), &[1], None).unwrap();
        assert!((ce + 0.2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            cross_entropy(&dist(&[&[0.7, 0.2, 0.1]]), &[3], None),
            Err(Error::IndexOutOfRange { index: 3, size: 3 })
        ));
    }

    #[test]
    fn cross_entropy_skips_masked_rows() {
        let p = dist(&[&[0.5, 0.5], &[1.0, 0.0]]);
        let ce = cross_entropy(&p, &[0, 1], Some(&[true, false])).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            logits in prop::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let n = logits.len();
            let t = Tensor::<f64>::from_f64(&[1, n], &logits).unwrap();
            let d = softmax(&t, 1).unwrap();
            let total: f64 = d.probs().data().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            let shifted = t.map(|v| v + shift);
            let ds = softmax(&shifted, 1).unwrap();
            prop_assert!(d.probs().max_abs_diff(ds.probs()) < 1e-13);
        }

        #[test]
        fn kl_is_nonnegative(
            a in prop::collection::vec(-5.0f64..5.0, 2..8),
            seed in prop::collection::vec(-5.0f64..5.0, 8),
        ) {
            let n = a.len();
            let q = softmax(&Tensor::<f64>::from_f64(&[n], &a).unwrap(), 0).unwrap();
            let p = softmax(&Tensor::<f64>::from_f64(&[n], &seed[..n]).unwrap(), 0).unwrap();
            let kl = kl_divergence(&q, &p).unwrap();
            prop_assert!(kl >= -1e-15);
            if a == seed[..n].to_vec() {
                prop_assert!(kl.abs() < 1e-15);
            }
        }
    }
}

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Matrix, NumericsError, Scalar};

/// Numerically stable softmax of one row.
pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let s = softmax(m.row(r));
        out.row_mut(r).copy_from_slice(&s);
    }
    out
}

/// `log(sum(exp(z)))` with max subtraction.
pub fn log_sum_exp<T: Scalar>(z: &[T]) -> T {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln()
}

/// Threshold `tau` and support size of the simplex projection of `z`.
///
/// Sort-based: with `z` sorted descending, the support size is the largest
/// `k` with `1 + k * z_(k) > sum_{j <= k} z_(j)`, and
/// `tau = (sum_{j <= k} z_(j) - 1) / k`.
pub fn sparsemax_threshold<T: Scalar>(z: &[T]) -> Result<(T, usize), NumericsError> {
    if z.is_empty() {
        return Err(NumericsError::EmptyInput("sparsemax"));
    }
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let mut cumsum = T::zero();
    let mut support = 0usize;
    let mut support_sum = T::zero();
    for (i, &v) in sorted.iter().enumerate() {
        cumsum = cumsum + v;
        let k = T::lit((i + 1) as f64);
        if T::one() + k * v > cumsum {
            support = i + 1;
            support_sum = cumsum;
        }
    }
    let tau = (support_sum - T::one()) / T::lit(support as f64);
    Ok((tau, support))
}

/// Euclidean projection of `z` onto the probability simplex.
pub fn sparsemax<T: Scalar>(z: &[T]) -> Result<Vec<T>, NumericsError> {
    let (tau, _) = sparsemax_threshold(z)?;
    Ok(z.iter().map(|&v| (v - tau).max(T::zero())).collect())
}

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    x.max(T::zero())
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(sigmoid(x))` without underflow for large negative `x`.
#[inline]
pub fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Matrix<T> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must lie in [0, 1)");
    let keep = T::lit(1.0 / (1.0 - rate));
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = if rate > 0.0 && rng.gen::<f64>() < rate { T::zero() } else { keep };
    }
    m
}

/// Applies inverted dropout when `train` is set; identity otherwise.
pub fn dropout<T: Scalar>(x: &Matrix<T>, rate: f64, seed: u64, train: bool) -> Matrix<T> {
    if !train || rate == 0.0 {
        return x.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: Matrix<T> = dropout_mask(x.rows(), x.cols(), rate, &mut rng);
    x.zip_map(&mask, "dropout", |a, b| a * b).expect("mask has input shape")
}

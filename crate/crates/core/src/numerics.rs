//! Minimal dense linear algebra and probability kernels.
//!
//! Everything here is plain row-major `f64`; model dims stay small enough
//! that dense loops beat any clever storage.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Epsilon inside the layer-norm variance denominator.
pub const LN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Vector helpers
// ---------------------------------------------------------------------------

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += scale * x`, in place.
pub fn axpy(y: &mut [f64], scale: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += scale * xi;
    }
}

/// True when every entry is finite.
pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

/// Index of the maximum entry, ties broken by lower index.
pub fn argmax(a: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in a.iter().enumerate().skip(1) {
        if v > a[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Mat
// ---------------------------------------------------------------------------

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a function of (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Wrap an existing row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CoreError::DimensionMismatch {
                context: "Mat::from_vec",
                expected: rows * cols,
                got: data.len(),
            });
        }
        if !all_finite(&data) {
            return Err(CoreError::NonFinite {
                context: "Mat::from_vec",
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Borrow row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy column `c` out as a vector.
    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Raw row-major data.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            out[r] = dot(self.row(r), x);
        }
        out
    }

    /// `self^T * x` for a column vector `x` of length `rows`.
    pub fn matvec_transposed(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xr = x[r];
            if xr != 0.0 {
                for (o, v) in out.iter_mut().zip(self.row(r)) {
                    *o += xr * v;
                }
            }
        }
        out
    }

    /// Rank-one accumulate: `self += scale * a * b^T`.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for r in 0..self.rows {
            let s = scale * a[r];
            if s != 0.0 {
                for (dst, bv) in self.row_mut(r).iter_mut().zip(b) {
                    *dst += s * bv;
                }
            }
        }
    }

    /// Frobenius inner product `Tr(self^T other)`.
    pub fn frob_dot(&self, other: &Mat) -> f64 {
        dot(&self.data, &other.data)
    }
}

// ---------------------------------------------------------------------------
// ProbDist
// ---------------------------------------------------------------------------

/// A probability distribution over the vocabulary.
///
/// Entries are in `[0, 1]` and sum to 1 within `1e-6`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    /// Validate and wrap a probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if !all_finite(&probs) {
            return Err(CoreError::InvalidDistribution {
                reason: "non-finite entry".into(),
            });
        }
        if probs.iter().any(|&p| !(0.0..=1.0 + 1e-9).contains(&p)) {
            return Err(CoreError::InvalidDistribution {
                reason: "entry outside [0, 1]".into(),
            });
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(CoreError::InvalidDistribution {
                reason: format!("sum {sum} deviates from 1 by more than 1e-6"),
            });
        }
        Ok(Self(probs))
    }

    /// Normalize arbitrary non-negative weights into a distribution.
    pub fn normalize(mut weights: Vec<f64>) -> Result<Self> {
        if !all_finite(&weights) {
            return Err(CoreError::InvalidDistribution {
                reason: "non-finite weight".into(),
            });
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(CoreError::InvalidDistribution {
                reason: "negative weight".into(),
            });
        }
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(CoreError::InvalidDistribution {
                reason: "weights sum to zero".into(),
            });
        }
        for w in &mut weights {
            *w /= sum;
        }
        Ok(Self(weights))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    /// Index of the most probable token, ties to the lower id.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// Solve `A x = b` for symmetric positive-definite `A` via Cholesky.
pub fn cholesky_solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    if a.cols() != n || b.len() != n {
        return Err(CoreError::DimensionMismatch {
            context: "cholesky_solve",
            expected: n,
            got: a.cols().min(b.len()),
        });
    }
    // Lower-triangular factor, row-major.
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(CoreError::SingularMatrix {
                        context: "cholesky_solve",
                    });
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    // Forward then backward substitution.
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    Ok(x)
}

/// Leading singular value by power iteration, plus the Frobenius norm of
/// the deflated remainder (an upper bound on every further singular value).
pub fn top_singular_value_and_residual(m: &Mat) -> (f64, f64) {
    let (rows, cols) = (m.rows(), m.cols());
    let frob = norm(m.data());
    if frob == 0.0 {
        return (0.0, 0.0);
    }
    // Deterministic start vector.
    let mut v: Vec<f64> = (0..cols)
        .map(|i| 1.0 + (i as f64 * 0.37).sin())
        .collect();
    let vn = norm(&v);
    for x in &mut v {
        *x /= vn;
    }
    let mut sigma = 0.0;
    for _ in 0..200 {
        let u = m.matvec(&v);
        let mut w = m.matvec_transposed(&u);
        let wn = norm(&w);
        if wn == 0.0 {
            break;
        }
        for x in &mut w {
            *x /= wn;
        }
        let new_sigma = norm(&m.matvec(&w));
        v = w;
        if (new_sigma - sigma).abs() <= 1e-13 * new_sigma.max(1.0) {
            sigma = new_sigma;
            break;
        }
        sigma = new_sigma;
    }
    if sigma == 0.0 {
        return (0.0, frob);
    }
    let mut u = m.matvec(&v);
    for x in &mut u {
        *x /= sigma;
    }
    let mut deflated = Mat::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            deflated.set(r, c, m.get(r, c) - sigma * u[r] * v[c]);
        }
    }
    (sigma, norm(deflated.data()))
}

/// Numerically stable softmax: `exp(z_i - max z) / sum_j exp(z_j - max z)`.
pub fn softmax(z: &[f64]) -> Result<ProbDist> {
    if z.is_empty() {
        return Err(CoreError::InvalidArgument {
            reason: "softmax of empty vector".into(),
        });
    }
    if !all_finite(z) {
        return Err(CoreError::NonFinite { context: "softmax" });
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for e in &mut exps {
        *e /= sum;
    }
    ProbDist::new(exps)
}

/// Log-probabilities under the stable softmax: `z_i - max - ln(sum exp(z - max))`.
pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if !all_finite(z) {
        return Err(CoreError::NonFinite {
            context: "log_softmax",
        });
    }
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|&v| v - max - log_sum).collect())
}

/// Layer normalization: zero-mean, unit-variance, then elementwise gain and bias.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    let d = x.len();
    if d < 2 {
        return Err(CoreError::InvalidArgument {
            reason: format!("layer_norm needs d >= 2, got {d}"),
        });
    }
    if gain.len() != d || bias.len() != d {
        return Err(CoreError::DimensionMismatch {
            context: "layer_norm gain/bias",
            expected: d,
            got: gain.len().min(bias.len()),
        });
    }
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) * inv_std * g + b)
        .collect())
}

/// 1-based rank of `token` under logits `z`.
///
/// Rank is 1 plus the number of strictly greater logits; among equal logits
/// the lower token id ranks better, so rank is deterministic.
pub fn rank_of(token: usize, z: &[f64]) -> Result<usize> {
    if token >= z.len() {
        return Err(CoreError::TokenOutOfRange {
            token,
            vocab: z.len(),
        });
    }
    let zt = z[token];
    let mut rank = 1;
    for (i, &v) in z.iter().enumerate() {
        if v > zt || (v == zt && i < token) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Jensen-Shannon divergence with natural logarithm; symmetric, in `[0, ln 2]`.
pub fn jensen_shannon(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    if p.len() != q.len() {
        return Err(CoreError::DimensionMismatch {
            context: "jensen_shannon",
            expected: p.len(),
            got: q.len(),
        });
    }
    let kl_to_mid = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&ai, &bi)| {
                if ai > 0.0 {
                    let m = 0.5 * (ai + bi);
                    ai * (ai / m).ln()
                } else {
                    0.0
                }
            })
            .sum()
    };
    let jsd = 0.5 * kl_to_mid(p.probs(), q.probs()) + 0.5 * kl_to_mid(q.probs(), p.probs());
    // Clamp tiny negative rounding away; the analytic value is non-negative.
    Ok(jsd.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_symmetric_pair() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert!((p.get(0) - 0.5).abs() < 1e-15);
        assert!((p.get(1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_analytic_quarters() {
        let p = softmax(&[0.0_f64, 3.0_f64.ln()]).unwrap();
        assert!((p.get(0) - 0.25).abs() < 1e-12);
        assert!((p.get(1) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_large_logits_stable() {
        // Independent route: p_i = 1 / sum_j exp(z_j - z_i), no explicit
        // global shift.
        let z = [1000.0, 1000.0, 999.0];
        let p = softmax(&z).unwrap();
        assert!(all_finite(p.probs()));
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..3 {
            let denom: f64 = z.iter().map(|&zj| (zj - z[i]).exp()).sum();
            assert!((p.get(i) - 1.0 / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let out = layer_norm(&[1.0; 4], &[1.0; 4], &[0.0; 4]).unwrap();
        for v in out {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let out = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2]).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-4);
        assert!((out[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_rejects_short_input() {
        assert!(layer_norm(&[1.0], &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn layer_norm_output_statistics() {
        let mut rng = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            rng ^= rng << 13;
            rng ^= rng >> 7;
            rng ^= rng << 17;
            (rng as f64 / u64::MAX as f64) * 4.0 - 2.0
        };
        let x: Vec<f64> = (0..64).map(|_| next()).collect();
        let out = layer_norm(&x, &[1.0; 64], &[0.0; 64]).unwrap();
        let mean = out.iter().sum::<f64>() / 64.0;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-3);
    }

    #[test]
    fn rank_of_examples() {
        assert_eq!(rank_of(2, &[5.0, 1.0, 9.0]).unwrap(), 1);
        // Tie between ids 0 and 1 at logit 5: the lower id wins.
        assert_eq!(rank_of(1, &[5.0, 5.0, 1.0]).unwrap(), 2);
        assert!(rank_of(3, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn jsd_examples() {
        let p = ProbDist::new(vec![1.0, 0.0]).unwrap();
        let q = ProbDist::new(vec![0.0, 1.0]).unwrap();
        assert!((jensen_shannon(&p, &q).unwrap() - 2.0_f64.ln()).abs() < 1e-12);
        assert_eq!(jensen_shannon(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn jsd_matches_direct_kl() {
        let p = ProbDist::new(vec![0.7, 0.2, 0.1]).unwrap();
        let q = ProbDist::new(vec![0.1, 0.3, 0.6]).unwrap();
        let m: Vec<f64> = p
            .probs()
            .iter()
            .zip(q.probs())
            .map(|(&a, &b)| 0.5 * (a + b))
            .collect();
        let kl = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .filter(|(&ai, _)| ai > 0.0)
                .map(|(&ai, &bi)| ai * (ai / bi).ln())
                .sum()
        };
        let expected = 0.5 * kl(p.probs(), &m) + 0.5 * kl(q.probs(), &m);
        assert!((jensen_shannon(&p, &q).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn cholesky_solves_spd_system() {
        // A = B B^T + I is SPD.
        let b = Mat::from_vec(3, 3, vec![1.0, 2.0, 0.0, -1.0, 1.0, 3.0, 0.5, 0.0, 1.0]).unwrap();
        let mut a = Mat::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                a.set(i, j, dot(b.row(i), b.row(j)) + if i == j { 1.0 } else { 0.0 });
            }
        }
        let rhs = vec![1.0, -2.0, 0.5];
        let x = cholesky_solve(&a, &rhs).unwrap();
        let back = a.matvec(&x);
        for i in 0..3 {
            assert!((back[i] - rhs[i]).abs() < 1e-10);
        }
        // Singular input is rejected.
        let zeros = Mat::zeros(2, 2);
        assert!(cholesky_solve(&zeros, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn singular_value_of_rank_one_matrix() {
        let a = vec![1.0, -2.0, 0.5];
        let b = vec![3.0, 1.0];
        let mut m = Mat::zeros(3, 2);
        m.add_outer(1.0, &a, &b);
        let (s1, resid) = top_singular_value_and_residual(&m);
        let expected = norm(&a) * norm(&b);
        assert!((s1 - expected).abs() < 1e-9);
        assert!(resid < 1e-10 * s1);
    }

    #[test]
    fn matvec_and_transpose_agree_with_manual() {
        let m = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_transposed(&[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
        assert_eq!(m.col(1), vec![2.0, 5.0]);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(z in proptest::collection::vec(-1e4..1e4f64, 1..64)) {
            let p = softmax(&z).unwrap();
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn rank_of_argmax_is_one(z in proptest::collection::vec(-100.0..100.0f64, 1..64)) {
            let best = argmax(&z);
            // Skip degenerate exact ties for the top logit.
            let ties = z.iter().filter(|&&v| v == z[best]).count();
            if ties == 1 {
                prop_assert_eq!(rank_of(best, &z).unwrap(), 1);
            }
        }

        #[test]
        fn rank_of_matches_sort_oracle(
            z in proptest::collection::vec(-50.0..50.0f64, 2..40),
            idx in 0usize..40,
        ) {
            let token = idx % z.len();
            // Oracle: sort (logit desc, id asc) and find the token's position.
            let mut order: Vec<usize> = (0..z.len()).collect();
            order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap().then(a.cmp(&b)));
            let oracle = order.iter().position(|&i| i == token).unwrap() + 1;
            prop_assert_eq!(rank_of(token, &z).unwrap(), oracle);
        }

        #[test]
        fn jsd_symmetric_and_bounded(
            a in proptest::collection::vec(1e-6..1.0f64, 8),
            b in proptest::collection::vec(1e-6..1.0f64, 8),
        ) {
            let p = ProbDist::normalize(a).unwrap();
            let q = ProbDist::normalize(b).unwrap();
            let pq = jensen_shannon(&p, &q).unwrap();
            let qp = jensen_shannon(&q, &p).unwrap();
            prop_assert!((pq - qp).abs() < 1e-12);
            prop_assert!(pq >= 0.0);
            prop_assert!(pq <= 2.0_f64.ln() + 1e-12);
        }
    }
}

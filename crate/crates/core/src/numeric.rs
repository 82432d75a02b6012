//! Dense vector and matrix kernels plus the finite-difference gradient check.
//!
//! Vectors are plain `[f64]` slices. Matrices are row-major [`Mat`]s.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::DimensionMismatch {
                context: "Mat::from_vec",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                context: "Mat::vstack",
                expected: self.cols,
                actual: other.cols,
            });
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Mat {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                context: "Mat::matvec",
                expected: self.cols,
                actual: x.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::DimensionMismatch {
                context: "Mat::matvec_t",
                expected: self.rows,
                actual: y.len(),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            axpy(yr, self.row(r), &mut out);
        }
        Ok(out)
    }

    /// Column-wise mean of the rows.
    pub fn mean_rows(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            axpy(1.0, self.row(r), &mut out);
        }
        let n = self.rows as f64;
        out.iter_mut().for_each(|x| *x /= n);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(v: &[f64], alpha: f64) -> Vec<f64> {
    v.iter().map(|x| x * alpha).collect()
}

/// Returns `v/‖v‖` and `false`, or the zero vector and `true` when
/// `‖v‖ ≤ 1e-12`. The degenerate case is also logged as a warning.
pub fn l2_normalize(v: &[f64]) -> (Vec<f64>, bool) {
    let n = norm(v);
    if n <= NORM_EPS {
        log::warn!("l2_normalize: degenerate input with norm {n:e}");
        (vec![0.0; v.len()], true)
    } else {
        (v.iter().map(|x| x / n).collect(), false)
    }
}

/// Like [`l2_normalize`] but degenerate input is an error.
pub fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= NORM_EPS {
        return Err(Error::DegenerateVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity clamped to `[-1, 1]`.
///
/// Computed as `a·b / sqrt(‖a‖²‖b‖²)`, which makes `cosine_sim(a, a)`
/// exactly 1 in binary64.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            context: "cosine_sim",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let aa = dot(a, a);
    let bb = dot(b, b);
    let (na, nb) = (aa.sqrt(), bb.sqrt());
    if na <= NORM_EPS || nb <= NORM_EPS {
        return Err(Error::DegenerateVector { norm: na.min(nb) });
    }
    Ok((dot(a, b) / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// Cosine similarity with its gradients with respect to both arguments.
///
/// `∂cos/∂a = b/(‖a‖‖b‖) − cos·a/‖a‖²`, symmetrically for `b`. The clamp
/// in [`cosine_sim`] is ignored for the derivative.
pub fn cosine_with_grads(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let c = cosine_sim(a, b)?;
    let aa = dot(a, a);
    let bb = dot(b, b);
    let inv = 1.0 / (aa * bb).sqrt();
    let ga = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| bi * inv - c * ai / aa)
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&ai, &bi)| ai * inv - c * bi / bb)
        .collect();
    Ok((c, ga, gb))
}

/// Backpropagates through `y = x/‖x‖`: given `∂L/∂y`, returns `∂L/∂x`.
pub fn normalize_backward(y: &[f64], x_norm: f64, grad_y: &[f64]) -> Vec<f64> {
    let radial = dot(y, grad_y);
    y.iter()
        .zip(grad_y)
        .map(|(&yi, &gi)| (gi - yi * radial) / x_norm)
        .collect()
}

/// Gradient with the shape of a context bank: `prompts × context_len × dim`,
/// flattened in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct Grad {
    pub prompts: usize,
    pub context_len: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Grad {
    pub fn zeros(prompts: usize, context_len: usize, dim: usize) -> Self {
        Self {
            prompts,
            context_len,
            dim,
            data: vec![0.0; prompts * context_len * dim],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Adds `g` to every row of prompt `n`.
    pub fn add_to_rows(&mut self, n: usize, g: &[f64]) {
        let block = self.context_len * self.dim;
        for row in self.data[n * block..(n + 1) * block].chunks_mut(self.dim) {
            axpy(1.0, g, row);
        }
    }
}

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `max_i |analytic_i − fd_i| / max(1, |fd_i|)`.
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_coordinate: usize,
    pub coordinates: usize,
}

/// Compares an analytic gradient against central differences with step `h`.
///
/// `f` is evaluated at `x ± h·eᵢ` for every coordinate. A non-finite
/// evaluation aborts with an error naming the coordinate.
pub fn grad_check<F>(mut f: F, x: &[f64], analytic: &[f64], h: f64) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if analytic.len() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "grad_check",
            expected: x.len(),
            actual: analytic.len(),
        });
    }
    let mut probe = x.to_vec();
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        coordinates: x.len(),
    };
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        for (side, value) in [("+h", plus), ("-h", minus)] {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("grad_check coordinate {i} at {side}"),
                    value,
                });
            }
        }
        let fd = (plus - minus) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        if rel > worst.max_rel_error || i == 0 {
            worst.max_rel_error = rel;
            worst.worst_coordinate = i;
        }
    }
    Ok(worst)
}

/// Whether every entry is finite.
pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]), (vec![0.6, 0.8], false));
        assert_eq!(l2_normalize(&[0.0, 0.0]), (vec![0.0, 0.0], true));
        assert_eq!(
            l2_normalize(&[1.0, 1.0, 1.0, 1.0]),
            (vec![0.5, 0.5, 0.5, 0.5], false)
        );
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[2.0, 0.0], &[5.0, 0.0]).unwrap(), 1.0);
        let c = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.7071067811865475).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_degenerate_and_mismatched() {
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateVector { .. })
        ));
        assert!(matches!(
            cosine_sim(&[1.0], &[1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn self_cosine_is_exactly_one() {
        let v = [0.3, -1.7, 2.9, 1e-3];
        assert_eq!(cosine_sim(&v, &v).unwrap(), 1.0);
    }

    #[test]
    fn grad_check_on_square() {
        let r = grad_check(|x| Ok(x[0] * x[0]), &[3.0], &[6.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn grad_check_flags_non_finite() {
        let err = grad_check(
            |x| Ok(if x[1] > 1.0 { f64::NAN } else { x[1] }),
            &[0.0, 1.0],
            &[0.0, 1.0],
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("coordinate 1"), "{err}");
    }

    #[test]
    fn cosine_gradients_match_central_differences() {
        let a = [0.4, -1.2, 0.7];
        let b = [1.1, 0.3, -0.5];
        let (_, ga, gb) = cosine_with_grads(&a, &b).unwrap();
        let r = grad_check(|x| cosine_sim(x, &b), &a, &ga, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-8);
        let r = grad_check(|x| cosine_sim(&a, x), &b, &gb, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn normalize_backward_matches_central_differences() {
        let x = [0.5, -2.0, 1.5];
        let w = [0.3, 0.1, -0.7];
        let n = norm(&x);
        let y = unit(&x).unwrap();
        let g = normalize_backward(&y, n, &w);
        let r = grad_check(|p| Ok(dot(&unit(p).unwrap(), &w)), &x, &g, 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn matvec_transpose_agree() {
        let m = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]).unwrap(), vec![-2.0, -2.0]);
        assert_eq!(m.matvec_t(&[1.0, 1.0]).unwrap(), vec![5.0, 7.0, 9.0]);
        assert!(Mat::from_vec(2, 2, vec![1.0]).is_err());
    }

    fn nonzero_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..8).prop_flat_map(|n| {
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
            )
        })
        .prop_filter("nonzero", |(a, b)| norm(a) > 1e-3 && norm(b) > 1e-3)
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric((a, b) in nonzero_pair()) {
            prop_assert_eq!(cosine_sim(&a, &b).unwrap(), cosine_sim(&b, &a).unwrap());
        }

        #[test]
        fn cosine_is_scale_invariant((a, b) in nonzero_pair(), s in 0.01f64..100.0, t in 0.01f64..100.0) {
            let c0 = cosine_sim(&a, &b).unwrap();
            let c1 = cosine_sim(&scale(&a, s), &scale(&b, t)).unwrap();
            prop_assert!((c0 - c1).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&c0));
        }

        #[test]
        fn normalize_is_idempotent(v in prop::collection::vec(-10.0f64..10.0, 1..16)) {
            prop_assume!(norm(&v) > 1e-6);
            let (once, _) = l2_normalize(&v);
            let (twice, _) = l2_normalize(&once);
            for (x, y) in once.iter().zip(&twice) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

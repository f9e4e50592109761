//! Stateless numeric kernels shared by the attention, classification and
//! training code. Everything here works in `f64`.

use std::fmt;

use crate::error::{Error, Result};

/// Tolerance on the total mass of a probability vector.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Threshold below which an attention map is considered all-zero.
pub const L1_EPS: f64 = 1e-12;

/// A probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates entries and total mass.
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::InvalidInput("probability outside [0, 1]".into()));
        }
        let total = sorted_sum(&p);
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {total}, not 1"
            )));
        }
        Ok(ProbVector(p))
    }

    #[cfg(test)]
    pub(crate) fn from_raw(p: Vec<f64>) -> Self {
        ProbVector(p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Sum in ascending order of value. The result does not depend on the order
/// of the input, which keeps per-location attention bit-identical under a
/// permutation of the prior classes.
fn sorted_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}

/// Softmax of `u / temp`, shifted by the maximum for stability.
pub fn softmax_temp(u: &[f64], temp: f64) -> Result<ProbVector> {
    if !(temp > 0.0) || !temp.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {temp}"
        )));
    }
    if u.is_empty() {
        return Err(Error::InvalidInput("softmax of an empty vector".into()));
    }
    let max = u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::InvalidInput("non-finite logits".into()));
    }
    let exps: Vec<f64> = u.iter().map(|&x| ((x - max) / temp).exp()).collect();
    let total = sorted_sum(&exps);
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(p: &ProbVector) -> Result<f64> {
    let total = sorted_sum(&p.0);
    if (total - 1.0).abs() > PROB_SUM_TOL || p.0.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidInput(format!(
            "entropy of a non-normalized vector (sum {total})"
        )));
    }
    let terms: Vec<f64> = p
        .0
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .collect();
    Ok(sorted_sum(&terms).max(0.0))
}

/// Cosine similarity under the Frobenius inner product. Inputs are flat
/// buffers, so an `r x d` matrix and its row-major flattening agree.
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateInput("cosine with a zero-norm input".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Divides by the l1 norm; an (effectively) all-zero input yields the
/// uniform vector so weighted pooling falls back to plain averaging.
pub fn l1_normalize(w: &[f64]) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::InvalidInput("l1 normalization of an empty vector".into()));
    }
    if w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::InvalidInput(
            "l1 normalization requires finite non-negative weights".into(),
        ));
    }
    let total: f64 = w.iter().sum();
    if total <= L1_EPS {
        let u = 1.0 / w.len() as f64;
        return Ok(vec![u; w.len()]);
    }
    Ok(w.iter().map(|&x| x / total).collect())
}

/// Mean with a normal-approximation 95% confidence half-width.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub halfwidth: f64,
}

impl fmt::Display for MeanCi {
    /// Renders as `38.80 ± 0.24`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.halfwidth)
    }
}

pub const Z_95: f64 = 1.96;

pub fn mean_ci95(values: &[f64]) -> Result<MeanCi> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InvalidInput(format!(
            "confidence interval needs at least 2 values, got {n}"
        )));
    }
    // Shifting by the first value makes constant inputs exact.
    let shift = values[0];
    let mean = shift + values.iter().map(|v| v - shift).sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(MeanCi {
        mean,
        halfwidth: Z_95 * var.sqrt() / (n as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temp(&[0.0, 0.0, 0.0], 1.0).unwrap();
        for &x in p.as_slice() {
            assert!(close(x, 1.0 / 3.0, 1e-15));
        }
        let p = softmax_temp(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!(close(p[0], 2.0 / 3.0, 1e-15));
        assert!(close(p[1], 1.0 / 3.0, 1e-15));

        let a = softmax_temp(&[0.0, 1.7], 2.6).unwrap();
        let b = softmax_temp(&[123.0, 124.7], 2.6).unwrap();
        assert!(close(a[0], b[0], 1e-12));
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(
            softmax_temp(&[1.0], 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            softmax_temp(&[1.0], -2.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(softmax_temp(&[], 1.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn softmax_is_stable_for_huge_logits() {
        let p = softmax_temp(&[1e300, 0.0], 1.0).unwrap();
        assert_eq!(p.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn entropy_examples() {
        let uni = ProbVector::new(vec![0.2; 5]).unwrap();
        assert!(close(entropy(&uni).unwrap(), 5f64.ln(), 1e-12));
        let onehot = ProbVector::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(entropy(&onehot).unwrap(), 0.0);
        let p = ProbVector::new(vec![0.9, 0.1]).unwrap();
        assert!(close(entropy(&p).unwrap(), 0.32508, 1e-5));
    }

    #[test]
    fn entropy_rejects_unnormalized() {
        let p = ProbVector::from_raw(vec![0.5, 0.6]);
        assert!(matches!(entropy(&p), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn cosine_examples() {
        assert!(close(cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0, 1e-15));
        assert!(close(cosine_sim(&[1.0, 2.0], &[-1.0, -2.0]).unwrap(), -1.0, 1e-15));
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(cosine_sim(&[1.0], &[1.0, 0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_normalize(&[2.0, 2.0, 0.0, 0.0]).unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
        assert_eq!(l1_normalize(&[0.0; 3]).unwrap(), vec![1.0 / 3.0; 3]);
        assert_eq!(l1_normalize(&[1.0]).unwrap(), vec![1.0]);
        assert!(matches!(l1_normalize(&[1.0, -0.1]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn ci_examples() {
        let ci = mean_ci95(&[0.7; 10]).unwrap();
        assert_eq!(ci.mean, 0.7);
        assert!(close(ci.halfwidth, 0.0, 1e-15));

        let ci = mean_ci95(&[0.0, 1.0]).unwrap();
        assert!(close(ci.mean, 0.5, 1e-15));
        assert!(close(ci.halfwidth, 0.98, 1e-12));

        assert!(mean_ci95(&[1.0]).is_err());
    }

    #[test]
    fn report_format() {
        let ci = MeanCi {
            mean: 38.8,
            halfwidth: 0.2449,
        };
        assert_eq!(ci.to_string(), "38.80 ± 0.24");
    }
}

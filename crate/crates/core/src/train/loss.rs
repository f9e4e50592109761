use rayon::prelude::*;

use super::Adapter;
use crate::attention::{gwap, AttentionMap, FeatureTensor};
use crate::classify::{cosine_classify, CosineHead, Prototypes};
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, softmax_temp, ProbVector};

/// `-log p_y`. Returns `+inf` when `p_y == 0`; the training loops treat any
/// non-finite loss as divergence.
pub fn cross_entropy(p: &ProbVector, y: usize) -> Result<f64> {
    if y >= p.len() {
        return Err(Error::InvalidInput(format!(
            "label {y} out of range for {} classes",
            p.len()
        )));
    }
    let py = p[y];
    if py <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-py.ln())
}

/// Gradients of the dense cost with respect to every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    /// Same layout as [`CosineHead::weights`].
    pub weights: Vec<f64>,
    pub tau: f64,
    /// Same layout as [`Adapter::matrix`].
    pub adapter: Vec<f64>,
}

impl DenseGrads {
    fn zeros(d: usize, c: usize) -> Self {
        DenseGrads {
            weights: vec![0.0; c * d],
            tau: 0.0,
            adapter: vec![0.0; d * d],
        }
    }

    fn add(&mut self, other: &DenseGrads) {
        self.tau += other.tau;
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.adapter.iter_mut().zip(&other.adapter) {
            *a += b;
        }
    }

    pub fn norm(&self) -> f64 {
        (self.tau * self.tau + dot(&self.weights, &self.weights) + dot(&self.adapter, &self.adapter))
            .sqrt()
    }
}

fn check_batch(batch: &[(FeatureTensor, usize)], adapter: &Adapter, head: &CosineHead) -> Result<()> {
    let d = adapter.channels();
    if head.channels() != d {
        return Err(Error::Shape(format!(
            "adapter is {d}x{d} but head expects {} channels",
            head.channels()
        )));
    }
    for (f, y) in batch {
        if f.channels() != d {
            return Err(Error::Shape(format!(
                "example with {} channels, adapter expects {d}",
                f.channels()
            )));
        }
        if *y >= head.classes() {
            return Err(Error::InvalidInput(format!(
                "label {y} out of range for {} classes",
                head.classes()
            )));
        }
    }
    Ok(())
}

/// Sum over examples and locations of the per-location cross-entropy of the
/// dense cosine classifier on adapted features.
pub fn dense_cost(batch: &[(FeatureTensor, usize)], adapter: &Adapter, head: &CosineHead) -> Result<f64> {
    check_batch(batch, adapter, head)?;
    let per_example = batch
        .par_iter()
        .map(|(f, y)| {
            f.iter_locations()
                .map(|x| cross_entropy(&cosine_classify(&adapter.apply(x), head)?, *y))
                .sum::<Result<f64>>()
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_example.iter().sum())
}

/// Back-propagates one cosine-softmax-cross-entropy term.
///
/// Given embedding `e` and class vectors, accumulates `dL/de` into `de` and
/// (optionally) `dL/dw_j` into `dw` and returns `(loss, dL/dtau)`.
fn cosine_ce_backward(
    e: &[f64],
    class_vectors: &[f64],
    tau: f64,
    y: usize,
    de: &mut [f64],
    mut dw: Option<&mut [f64]>,
) -> Result<(f64, f64)> {
    let d = e.len();
    if e.iter().chain(class_vectors).any(|v| !v.is_finite()) || !tau.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            reason: "non-finite embedding or class vector".into(),
        });
    }
    let ne = norm(e);
    if ne == 0.0 {
        return Err(Error::DegenerateInput("zero-norm embedding".into()));
    }
    let mut sims = Vec::with_capacity(class_vectors.len() / d);
    let mut norms = Vec::with_capacity(class_vectors.len() / d);
    for wj in class_vectors.chunks_exact(d) {
        let nw = norm(wj);
        if nw == 0.0 {
            return Err(Error::DegenerateInput("zero-norm class vector".into()));
        }
        sims.push(dot(e, wj) / (ne * nw));
        norms.push(nw);
    }
    let logits: Vec<f64> = sims.iter().map(|s| tau * s).collect();
    if !ne.is_finite() || logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Divergence {
            step: 0,
            reason: "non-finite logits".into(),
        });
    }
    let p = softmax_temp(&logits, 1.0)?;
    let loss = -p[y].ln();

    let mut dtau = 0.0;
    for (j, wj) in class_vectors.chunks_exact(d).enumerate() {
        let dz = p[j] - if j == y { 1.0 } else { 0.0 };
        dtau += dz * sims[j];
        let ds = tau * dz;
        let (s, nw) = (sims[j], norms[j]);
        for i in 0..d {
            de[i] += ds * (wj[i] / (ne * nw) - s * e[i] / (ne * ne));
        }
        if let Some(dw) = dw.as_deref_mut() {
            for i in 0..d {
                dw[j * d + i] += ds * (e[i] / (ne * nw) - s * wj[i] / (nw * nw));
            }
        }
    }
    Ok((loss, dtau))
}

/// Analytic gradient of [`dense_cost`], returned with the cost itself.
pub fn grad_dense_cost(
    batch: &[(FeatureTensor, usize)],
    adapter: &Adapter,
    head: &CosineHead,
) -> Result<(f64, DenseGrads)> {
    check_batch(batch, adapter, head)?;
    let d = adapter.channels();
    let c = head.classes();
    let parts = batch
        .par_iter()
        .map(|(f, y)| {
            let mut g = DenseGrads::zeros(d, c);
            let mut loss = 0.0;
            let mut de = vec![0.0; d];
            for x in f.iter_locations() {
                let e = adapter.apply(x);
                de.iter_mut().for_each(|v| *v = 0.0);
                let (l, dtau) = cosine_ce_backward(
                    &e,
                    head.weights(),
                    head.tau(),
                    *y,
                    &mut de,
                    Some(&mut g.weights),
                )?;
                loss += l;
                g.tau += dtau;
                for (i, dei) in de.iter().enumerate() {
                    for (k, xk) in x.iter().enumerate() {
                        g.adapter[i * d + k] += dei * xk;
                    }
                }
            }
            Ok((loss, g))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = DenseGrads::zeros(d, c);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add(g);
    }
    if !loss.is_finite() || !total.norm().is_finite() {
        return Err(Error::Divergence {
            step: 0,
            reason: "non-finite dense cost or gradient".into(),
        });
    }
    Ok((loss, total))
}

/// One support example of a novel task, with its precomputed attention map.
#[derive(Debug, Clone, Copy)]
pub struct SupportExample<'a> {
    pub features: &'a FeatureTensor,
    pub label: usize,
    pub map: &'a AttentionMap,
}

fn pooled_embeddings(support: &[SupportExample<'_>], adapter: &Adapter) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    support
        .iter()
        .map(|s| {
            let pooled = gwap(s.features, s.map)?;
            if pooled.len() != adapter.channels() {
                return Err(Error::Shape(format!(
                    "support example with {} channels, adapter expects {}",
                    pooled.len(),
                    adapter.channels()
                )));
            }
            // Pooling is linear, so adapting after pooling equals pooling the
            // adapted tensor.
            let e = adapter.apply(&pooled);
            Ok((pooled, e))
        })
        .collect()
}

/// Cross-entropy of the prototype cosine classifier over the support set.
pub fn proto_cost(
    support: &[SupportExample<'_>],
    adapter: &Adapter,
    protos: &Prototypes,
    tau: f64,
) -> Result<f64> {
    let head = protos.to_head(tau)?;
    pooled_embeddings(support, adapter)?
        .iter()
        .zip(support)
        .map(|((_, e), s)| cross_entropy(&cosine_classify(e, &head)?, s.label))
        .sum()
}

/// Gradient of [`proto_cost`] with respect to the adapter, holding the
/// prototypes, attention maps and scale fixed.
pub fn grad_proto_cost(
    support: &[SupportExample<'_>],
    adapter: &Adapter,
    protos: &Prototypes,
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    let d = adapter.channels();
    if protos.channels() != d {
        return Err(Error::Shape("prototype and adapter dimensions differ".into()));
    }
    let mut grad = vec![0.0; d * d];
    let mut loss = 0.0;
    let mut de = vec![0.0; d];
    for ((pooled, e), s) in pooled_embeddings(support, adapter)?.iter().zip(support) {
        if s.label >= protos.classes() {
            return Err(Error::InvalidInput(format!("label {} out of range", s.label)));
        }
        de.iter_mut().for_each(|v| *v = 0.0);
        let (l, _) = cosine_ce_backward(e, protos.vectors(), tau, s.label, &mut de, None)?;
        loss += l;
        for (i, dei) in de.iter().enumerate() {
            for (k, gk) in pooled.iter().enumerate() {
                grad[i * d + k] += dei * gk;
            }
        }
    }
    Ok((loss, grad))
}

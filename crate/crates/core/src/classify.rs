//! Cosine, dense and prototype classifiers.

use serde::{Deserialize, Serialize};

use crate::attention::{gwap, AttentionMap, FeatureTensor};
use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, norm, softmax_temp, ProbVector};

/// Initial value of the cosine scale before base training.
pub const TAU_INIT: f64 = 10.0;

/// Minimum column norm accepted in a cosine head.
pub const MIN_COLUMN_NORM: f64 = 1e-12;

/// Cosine classifier: `c` class vectors of length `d` and a positive scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineHead {
    d: usize,
    weights: Vec<f64>,
    tau: f64,
}

impl CosineHead {
    /// `weights` holds the class vectors consecutively (`weights[j * d + i]`).
    pub fn new(d: usize, weights: Vec<f64>, tau: f64) -> Result<Self> {
        let head = CosineHead { d, weights, tau };
        head.validate()?;
        Ok(head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.weights.is_empty() || !self.weights.len().is_multiple_of(self.d) {
            return Err(Error::Shape(format!(
                "{} cosine weights for d = {}",
                self.weights.len(),
                self.d
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "cosine scale must be positive, got {}",
                self.tau
            )));
        }
        if self.weights.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite cosine weight".into()));
        }
        for j in 0..self.classes() {
            if norm(self.class_weights(j)) <= MIN_COLUMN_NORM {
                return Err(Error::DegenerateInput(format!("class vector {j} has zero norm")));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn classes(&self) -> usize {
        self.weights.len() / self.d
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn class_weights(&self, j: usize) -> &[f64] {
        &self.weights[j * self.d..(j + 1) * self.d]
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Vec<f64> {
        &mut self.weights
    }

    pub(crate) fn set_tau(&mut self, tau: f64) {
        self.tau = tau;
    }

    /// Scaled cosine logits `tau * s(e, w_j)`.
    pub fn logits(&self, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.d {
            return Err(Error::Shape(format!(
                "embedding of length {}, head expects {}",
                e.len(),
                self.d
            )));
        }
        (0..self.classes())
            .map(|j| Ok(self.tau * cosine_sim(e, self.class_weights(j))?))
            .collect()
    }
}

/// Class prototypes: per-class mean embeddings with their support counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    d: usize,
    vectors: Vec<f64>,
    counts: Vec<usize>,
}

impl Prototypes {
    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        &self.vectors[j * self.d..(j + 1) * self.d]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    /// Cosine head whose class vectors are the prototypes.
    pub fn to_head(&self, tau: f64) -> Result<CosineHead> {
        CosineHead::new(self.d, self.vectors.clone(), tau)
    }
}

/// Index of the largest probability, lowest index on ties.
pub fn predict(p: &ProbVector) -> usize {
    argmax(p.as_slice())
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = j;
        }
    }
    best
}

pub fn cosine_classify(e: &[f64], head: &CosineHead) -> Result<ProbVector> {
    softmax_temp(&head.logits(e)?, 1.0)
}

/// The cosine classifier applied independently at every location.
pub fn dense_classify(features: &FeatureTensor, head: &CosineHead) -> Result<Vec<ProbVector>> {
    if features.channels() != head.channels() {
        return Err(Error::Shape(format!(
            "features have {} channels, head expects {}",
            features.channels(),
            head.channels()
        )));
    }
    features
        .iter_locations()
        .map(|x| cosine_classify(x, head))
        .collect()
}

/// Averages labelled embeddings per class. Labels are `0..classes`.
pub fn build_prototypes(embeddings: &[(Vec<f64>, usize)], classes: usize) -> Result<Prototypes> {
    let d = embeddings
        .first()
        .map(|(e, _)| e.len())
        .ok_or(Error::MissingClass(0))?;
    let mut vectors = vec![0.0; classes * d];
    let mut counts = vec![0usize; classes];
    for (e, label) in embeddings {
        if *label >= classes {
            return Err(Error::InvalidInput(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        if e.len() != d {
            return Err(Error::Shape("embeddings of differing length".into()));
        }
        counts[*label] += 1;
        for (acc, v) in vectors[label * d..(label + 1) * d].iter_mut().zip(e) {
            *acc += v;
        }
    }
    for (j, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::MissingClass(j));
        }
        vectors[j * d..(j + 1) * d]
            .iter_mut()
            .for_each(|v| *v /= n as f64);
    }
    Ok(Prototypes { d, vectors, counts })
}

/// Pools the query with its attention map and classifies it against the
/// prototypes with scale `tau`.
pub fn prototype_classify(
    query: &FeatureTensor,
    protos: &Prototypes,
    map: &AttentionMap,
    tau: f64,
) -> Result<ProbVector> {
    let e = gwap(query, map)?;
    cosine_classify(&e, &protos.to_head(tau)?)
}

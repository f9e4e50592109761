//! Certainty-based spatial attention from a frozen prior classifier.
//!
//! The prior head is applied at every location of a feature tensor, the
//! entropy of each per-location prediction is mapped to a weight in `[0, 1]`
//! (1 = fully certain, 0 = uniform), and the l1-normalized weights drive a
//! weighted average pooling that replaces plain global average pooling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{entropy, l1_normalize, softmax_temp, ProbVector};

/// Temperature presets for the dense prior classifier.
pub const TEMP_CUB: f64 = 100.0;
pub const TEMP_MINI_MODIFIED: f64 = 2.6;
pub const TEMP_MINI_ORIGINAL: f64 = 2.4;

/// One example's backbone activations: `r = w * h` locations of `d` channels,
/// stored location-major (`data[q * d + i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    w: usize,
    h: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(w: usize, h: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if w == 0 || h == 0 || d == 0 {
            return Err(Error::Shape(format!("empty feature tensor {w}x{h}x{d}")));
        }
        if data.len() != w * h * d {
            return Err(Error::Shape(format!(
                "feature tensor {w}x{h}x{d} needs {} values, got {}",
                w * h * d,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(FeatureTensor { w, h, d, data })
    }

    /// Builds a tensor from `r` location vectors laid out as a `r x 1` grid.
    pub fn from_locations(locations: &[Vec<f64>]) -> Result<Self> {
        let d = locations.first().map_or(0, Vec::len);
        if locations.iter().any(|l| l.len() != d) {
            return Err(Error::Shape("ragged location vectors".into()));
        }
        let data = locations.iter().flatten().copied().collect();
        FeatureTensor::new(locations.len(), 1, d, data)
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn locations(&self) -> usize {
        self.w * self.h
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn location(&self, q: usize) -> &[f64] {
        &self.data[q * self.d..(q + 1) * self.d]
    }

    pub fn iter_locations(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    /// Applies `f` to every location vector.
    pub fn map_locations(&self, f: impl FnMut(&[f64]) -> Vec<f64>) -> Self {
        let data = self.iter_locations().flat_map(f).collect();
        FeatureTensor {
            data,
            ..self.clone()
        }
    }
}

/// Frozen prior classifier: `c''` weight vectors of length `d` plus biases.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorHead {
    d: usize,
    weights: Vec<f64>,
    biases: Vec<f64>,
    class_names: Vec<String>,
}

impl PriorHead {
    /// `weights` holds the class vectors consecutively (`weights[j * d + i]`).
    pub fn new(
        d: usize,
        weights: Vec<f64>,
        biases: Vec<f64>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let c = biases.len();
        if c < 2 {
            return Err(Error::InvalidParameter(format!(
                "prior head needs at least 2 classes, got {c}"
            )));
        }
        if d == 0 || weights.len() != c * d {
            return Err(Error::Shape(format!(
                "prior head with {c} classes and d = {d} needs {} weights, got {}",
                c * d,
                weights.len()
            )));
        }
        if class_names.len() != c {
            return Err(Error::Shape(format!(
                "{} class names for {c} classes",
                class_names.len()
            )));
        }
        if weights.iter().chain(&biases).any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("non-finite prior head parameter".into()));
        }
        Ok(PriorHead {
            d,
            weights,
            biases,
            class_names,
        })
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn classes(&self) -> usize {
        self.biases.len()
    }

    pub fn class_weights(&self, j: usize) -> &[f64] {
        &self.weights[j * self.d..(j + 1) * self.d]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Raw logits `W''^T x + b''` for one location.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.d)
            .zip(&self.biases)
            .map(|(wj, bj)| wj.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bj)
            .collect()
    }
}

/// Spatial attention over a `w x h` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    w: usize,
    h: usize,
    raw: Vec<f64>,
    normalized: Vec<f64>,
}

impl AttentionMap {
    /// Wraps raw certainty weights. The normalized weights stay empty until
    /// [`normalize_map`] is applied.
    pub fn from_raw(w: usize, h: usize, raw: Vec<f64>) -> Result<Self> {
        if raw.len() != w * h || raw.is_empty() {
            return Err(Error::Shape(format!(
                "attention map {w}x{h} with {} weights",
                raw.len()
            )));
        }
        if raw.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidInput("raw attention outside [0, 1]".into()));
        }
        Ok(AttentionMap {
            w,
            h,
            raw,
            normalized: Vec::new(),
        })
    }

    /// All-ones raw weights, normalized to `1 / r` everywhere.
    pub fn uniform(w: usize, h: usize) -> Result<Self> {
        normalize_map(AttentionMap::from_raw(w, h, vec![1.0; w * h])?)
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized.len() == self.raw.len()
    }
}

/// Softmax of the prior head's logits at every location, at temperature `temp`.
pub fn dense_prior_probs(
    features: &FeatureTensor,
    head: &PriorHead,
    temp: f64,
) -> Result<Vec<ProbVector>> {
    if features.channels() != head.channels() {
        return Err(Error::Shape(format!(
            "features have {} channels, prior head expects {}",
            features.channels(),
            head.channels()
        )));
    }
    features
        .iter_locations()
        .map(|x| softmax_temp(&head.logits(x), temp))
        .collect()
}

/// Certainty weight `1 - H(p) / log c''` per location, clamped to `[0, 1]`.
pub fn attention_weights(probs: &[ProbVector], w: usize, h: usize) -> Result<AttentionMap> {
    let c = probs.first().map_or(0, ProbVector::len);
    if c < 2 {
        return Err(Error::InvalidParameter(format!(
            "certainty weights need at least 2 prior classes, got {c}"
        )));
    }
    if probs.iter().any(|p| p.len() != c) {
        return Err(Error::Shape("prior probabilities of differing length".into()));
    }
    let log_c = (c as f64).ln();
    let raw = probs
        .iter()
        .map(|p| Ok((1.0 - entropy(p)? / log_c).clamp(0.0, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    AttentionMap::from_raw(w, h, raw)
}

pub fn normalize_map(mut map: AttentionMap) -> Result<AttentionMap> {
    map.normalized = l1_normalize(&map.raw)?;
    Ok(map)
}

/// Full attention pipeline for one example: dense prior, certainty, l1.
pub fn compute_map(features: &FeatureTensor, head: &PriorHead, temp: f64) -> Result<AttentionMap> {
    let probs = dense_prior_probs(features, head, temp)?;
    normalize_map(attention_weights(
        &probs,
        features.width(),
        features.height(),
    )?)
}

/// Global weighted average pooling with the normalized map.
pub fn gwap(features: &FeatureTensor, map: &AttentionMap) -> Result<Vec<f64>> {
    if map.normalized.len() != features.locations() {
        return Err(Error::Shape(format!(
            "attention map has {} normalized weights, tensor has {} locations",
            map.normalized.len(),
            features.locations()
        )));
    }
    let mut out = vec![0.0; features.channels()];
    for (x, &wq) in features.iter_locations().zip(&map.normalized) {
        for (o, v) in out.iter_mut().zip(x) {
            *o += wq * v;
        }
    }
    Ok(out)
}

/// Global average pooling.
pub fn gap(features: &FeatureTensor) -> Vec<f64> {
    let mut out = vec![0.0; features.channels()];
    for x in features.iter_locations() {
        for (o, v) in out.iter_mut().zip(x) {
            *o += v;
        }
    }
    let r = features.locations() as f64;
    out.iter_mut().for_each(|o| *o /= r);
    out
}

/// Grayscale pixels `round(255 * raw[q])`, row-major.
pub fn heatmap_pixels(map: &AttentionMap) -> Vec<u8> {
    map.raw
        .iter()
        .map(|&x| (255.0 * x).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Writes the raw map as a binary portable graymap (`P5`, maxval 255).
pub fn heatmap_export(map: &AttentionMap, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{} {}\n255\n", map.w, map.h)
        .and_then(|_| out.write_all(&heatmap_pixels(map)))
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(path, e))
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64, c: usize, d: usize, r: usize, scale: f64) -> (PriorHead, FeatureTensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..c * d).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let biases = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let names = (0..c).map(|j| format!("k{j}")).collect();
        let data = (0..r * d).map(|_| rng.random_range(-3.0..3.0)).collect();
        (
            PriorHead::new(d, weights, biases, names).unwrap(),
            FeatureTensor::new(r, 1, d, data).unwrap(),
        )
    }

    proptest! {
        #[test]
        fn raw_weights_lie_in_unit_interval(
            seed in any::<u64>(), c in 2usize..80, d in 1usize..12, r in 1usize..20,
            scale in 0.0f64..20.0, temp in 0.05f64..150.0,
        ) {
            let (head, t) = setup(seed, c, d, r, scale);
            let map = compute_map(&t, &head, temp).unwrap();
            prop_assert!(map.raw().iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((map.normalized().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn prior_class_order_is_irrelevant(
            seed in any::<u64>(), c in 2usize..40, d in 1usize..10, r in 1usize..12, temp in 0.5f64..100.0,
        ) {
            let (head, t) = setup(seed, c, d, r, 2.0);
            let mut order: Vec<usize> = (0..c).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x55));
            let weights = order.iter().flat_map(|&j| head.class_weights(j).to_vec()).collect();
            let biases = order.iter().map(|&j| head.biases()[j]).collect();
            let names = order.iter().map(|&j| head.class_names()[j].clone()).collect();
            let permuted = PriorHead::new(d, weights, biases, names).unwrap();
            let a = compute_map(&t, &head, temp).unwrap();
            let b = compute_map(&t, &permuted, temp).unwrap();
            let bits = |m: &AttentionMap| m.raw().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(&a), bits(&b));
        }

        #[test]
        fn gwap_is_linear(
            seed in any::<u64>(), d in 1usize..16, r in 1usize..30,
            a in -5.0f64..5.0, b in -5.0f64..5.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tensor = || {
                let data = (0..r * d).map(|_| rng.random_range(-3.0..3.0)).collect();
                FeatureTensor::new(r, 1, d, data).unwrap()
            };
            let (f1, f2) = (tensor(), tensor());
            let raw = (0..r).map(|_| rng.random_range(0.0..1.0)).collect();
            let map = normalize_map(AttentionMap::from_raw(r, 1, raw).unwrap()).unwrap();
            let mix = FeatureTensor::new(
                r, 1, d,
                f1.data().iter().zip(f2.data()).map(|(x, y)| a * x + b * y).collect(),
            ).unwrap();
            let lhs = gwap(&mix, &map).unwrap();
            let (g1, g2) = (gwap(&f1, &map).unwrap(), gwap(&f2, &map).unwrap());
            for i in 0..d {
                prop_assert!((lhs[i] - (a * g1[i] + b * g2[i])).abs() < 1e-9);
            }
        }
    }
}

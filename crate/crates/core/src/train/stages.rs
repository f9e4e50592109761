use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::loss::{grad_dense_cost, grad_proto_cost, SupportExample};
use super::optim::Optimizer;
use super::{Adapter, TrainConfig};
use crate::attention::{gwap, FeatureTensor};
use crate::classify::{build_prototypes, CosineHead, Prototypes, TAU_INIT};
use crate::error::{Error, Result};

/// Upper bound on novel-class adaptation iterations.
pub const MAX_ADAPT_STEPS: usize = 60;

/// Lower bound the cosine scale is clamped to after each base-training step.
const TAU_FLOOR: f64 = 1e-3;

/// Gaussian-initialized cosine head with the default scale.
pub fn init_head(d: usize, classes: usize, seed: u64) -> Result<CosineHead> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..d * classes)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    CosineHead::new(d, weights, TAU_INIT)
}

#[derive(Debug, Clone)]
pub struct BaseOutcome {
    pub adapter: Adapter,
    pub head: CosineHead,
    /// Mean per-location loss of each mini-batch, before its step.
    pub losses: Vec<f64>,
}

/// Fine-tunes the adapter and learns the dense cosine head on the base set
/// with mini-batch gradient steps. The step direction is the gradient of the
/// dense cost averaged over the batch's locations.
pub fn base_train(
    dataset: &[(FeatureTensor, usize)],
    adapter: Adapter,
    head: CosineHead,
    config: &TrainConfig,
) -> Result<BaseOutcome> {
    config.validate()?;
    let mut outcome = BaseOutcome {
        adapter,
        head,
        losses: Vec::new(),
    };
    if dataset.is_empty() || config.max_steps == 0 {
        return Ok(outcome);
    }
    let d = outcome.adapter.channels();
    let n_adapter = d * d;
    let n_weights = outcome.head.weights().len();
    let mut params: Vec<f64> = outcome
        .adapter
        .matrix()
        .iter()
        .chain(outcome.head.weights())
        .copied()
        .chain(std::iter::once(outcome.head.tau()))
        .collect();
    let mut opt = Optimizer::new(config, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut batch = Vec::with_capacity(config.batch_size.min(dataset.len()));

    for step in 0..config.max_steps {
        batch.clear();
        while batch.len() < config.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        let locations: usize = batch.iter().map(|(f, _)| f.locations()).sum();
        let (loss, grads) = grad_dense_cost(&batch, &outcome.adapter, &outcome.head)
            .map_err(|e| with_step(e, step))?;
        let scale = 1.0 / locations as f64;
        outcome.losses.push(loss * scale);

        let flat: Vec<f64> = grads
            .adapter
            .iter()
            .chain(&grads.weights)
            .chain(std::iter::once(&grads.tau))
            .map(|g| g * scale)
            .collect();
        opt.step(&mut params, &flat, config);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                step,
                reason: "non-finite parameter after update".into(),
            });
        }
        let tau = &mut params[n_adapter + n_weights];
        *tau = tau.max(TAU_FLOOR);

        outcome
            .adapter
            .matrix_mut()
            .copy_from_slice(&params[..n_adapter]);
        outcome
            .head
            .weights_mut()
            .copy_from_slice(&params[n_adapter..n_adapter + n_weights]);
        outcome.head.set_tau(params[n_adapter + n_weights]);
        outcome.head.validate().map_err(|e| Error::Divergence {
            step,
            reason: e.to_string(),
        })?;
    }
    Ok(outcome)
}

fn with_step(err: Error, step: usize) -> Error {
    match err {
        Error::Divergence { reason, .. } => Error::Divergence { step, reason },
        Error::DegenerateInput(reason) => Error::Divergence { step, reason },
        other => other,
    }
}

/// Prototypes of the adapted, attention-pooled support embeddings.
pub fn support_prototypes(support: &[SupportExample<'_>], adapter: &Adapter) -> Result<Prototypes> {
    let classes = support.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let embeddings = support
        .iter()
        .map(|s| Ok((adapter.apply(&gwap(s.features, s.map)?), s.label)))
        .collect::<Result<Vec<_>>>()?;
    build_prototypes(&embeddings, classes)
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub adapter: Adapter,
    pub prototypes: Prototypes,
    /// Support loss against freshly recomputed prototypes, before each step
    /// and once more after the last one (`max_steps + 1` entries).
    pub losses: Vec<f64>,
}

/// Novel-class adaptation: alternately recompute the prototypes from the
/// current adapter and take one step on the support loss with the prototypes
/// held fixed. The scale `tau` is not trained here.
pub fn adapt_novel(
    support: &[SupportExample<'_>],
    adapter: Adapter,
    tau: f64,
    config: &TrainConfig,
) -> Result<AdaptOutcome> {
    config.validate()?;
    if config.max_steps > MAX_ADAPT_STEPS {
        return Err(Error::InvalidParameter(format!(
            "adaptation is capped at {MAX_ADAPT_STEPS} iterations, got {}",
            config.max_steps
        )));
    }
    let mut adapter = adapter;
    let mut opt = Optimizer::new(config, adapter.matrix().len());
    let mut losses = Vec::with_capacity(config.max_steps + 1);
    let mut params = adapter.matrix().to_vec();
    for step in 0..=config.max_steps {
        let protos = support_prototypes(support, &adapter).map_err(|e| with_step(e, step))?;
        let (loss, grad) =
            grad_proto_cost(support, &adapter, &protos, tau).map_err(|e| with_step(e, step))?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: "non-finite support loss".into(),
            });
        }
        losses.push(loss);
        if step == config.max_steps {
            return Ok(AdaptOutcome {
                adapter,
                prototypes: protos,
                losses,
            });
        }
        opt.step(&mut params, &grad, config);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                step,
                reason: "non-finite adapter after update".into(),
            });
        }
        adapter.matrix_mut().copy_from_slice(&params);
    }
    unreachable!("loop returns on its last iteration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{gap, AttentionMap};
    use crate::classify::{cosine_classify, predict};
    use crate::train::{dense_cost, OptimizerKind};
    use rand::Rng;

    fn separable_base(seed: u64, classes: usize, per_class: usize, d: usize) -> Vec<(FeatureTensor, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..classes)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        (0..classes * per_class)
            .map(|i| {
                let y = i % classes;
                let data = (0..4 * d)
                    .map(|k| centers[y][k % d] + 0.3 * rng.random_range(-1.0..1.0))
                    .collect();
                (FeatureTensor::new(2, 2, d, data).unwrap(), y)
            })
            .collect()
    }

    #[test]
    fn empty_base_set_is_identity() {
        let head = init_head(4, 3, 0).unwrap();
        let out = base_train(&[], Adapter::identity(4), head.clone(), &TrainConfig::base()).unwrap();
        assert_eq!(out.adapter, Adapter::identity(4));
        assert_eq!(out.head, head);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn zero_steps_is_identity() {
        let data = separable_base(1, 3, 4, 6);
        let head = init_head(6, 3, 0).unwrap();
        let config = TrainConfig { max_steps: 0, ..TrainConfig::base() };
        let out = base_train(&data, Adapter::identity(6), head.clone(), &config).unwrap();
        assert_eq!(out.adapter, Adapter::identity(6));
        assert_eq!(out.head, head);
    }

    #[test]
    fn base_training_reduces_dense_cost() {
        let data = separable_base(2, 4, 10, 8);
        let head = init_head(8, 4, 5).unwrap();
        let before = dense_cost(&data, &Adapter::identity(8), &head).unwrap();
        let config = TrainConfig {
            learning_rate: 0.05,
            max_steps: 50,
            batch_size: 16,
            ..TrainConfig::base()
        };
        let out = base_train(&data, Adapter::identity(8), head, &config).unwrap();
        let after = dense_cost(&data, &out.adapter, &out.head).unwrap();
        assert!(after < before, "{after} !< {before}");
        assert_eq!(out.losses.len(), 50);
    }

    #[test]
    fn base_training_is_deterministic() {
        let data = separable_base(3, 3, 6, 5);
        let config = TrainConfig {
            learning_rate: 0.05,
            max_steps: 10,
            batch_size: 7,
            seed: 42,
            ..TrainConfig::base()
        };
        let run = || base_train(&data, Adapter::identity(5), init_head(5, 3, 1).unwrap(), &config).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.adapter, b.adapter);
        assert_eq!(a.head, b.head);
    }

    #[test]
    fn base_training_reports_divergence() {
        let data = separable_base(4, 3, 6, 5);
        let config = TrainConfig {
            learning_rate: 1e300,
            max_steps: 5,
            batch_size: 6,
            ..TrainConfig::base()
        };
        let err = base_train(&data, Adapter::identity(5), init_head(5, 3, 1).unwrap(), &config).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }

    fn episode(seed: u64, ways: usize, shots: usize, d: usize) -> (Vec<FeatureTensor>, Vec<usize>, AttentionMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f64>> = (0..ways)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut tensors = Vec::new();
        let mut labels = Vec::new();
        for y in 0..ways {
            for _ in 0..shots {
                let data = (0..3 * d)
                    .map(|k| centers[y][k % d] + 0.8 * rng.random_range(-1.0..1.0))
                    .collect();
                tensors.push(FeatureTensor::new(3, 1, d, data).unwrap());
                labels.push(y);
            }
        }
        (tensors, labels, AttentionMap::uniform(3, 1).unwrap())
    }

    fn support<'a>(t: &'a [FeatureTensor], l: &[usize], m: &'a AttentionMap) -> Vec<SupportExample<'a>> {
        t.iter()
            .zip(l)
            .map(|(features, &label)| SupportExample { features, label, map: m })
            .collect()
    }

    #[test]
    fn zero_adaptation_steps_gives_plain_prototypes() {
        let (t, l, m) = episode(5, 5, 2, 6);
        let s = support(&t, &l, &m);
        let config = TrainConfig { max_steps: 0, ..TrainConfig::novel() };
        let out = adapt_novel(&s, Adapter::identity(6), 10.0, &config).unwrap();
        assert_eq!(out.adapter, Adapter::identity(6));
        assert_eq!(out.losses.len(), 1);
        for y in 0..5 {
            let mean: Vec<f64> = (0..6)
                .map(|i| (gap(&t[2 * y])[i] + gap(&t[2 * y + 1])[i]) / 2.0)
                .collect();
            for (a, b) in out.prototypes.vector(y).iter().zip(&mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_maps_adapt_like_gap_features() {
        let (t, l, m) = episode(5, 5, 2, 6);
        let s = support(&t, &l, &m);
        let pooled: Vec<FeatureTensor> = t
            .iter()
            .map(|x| FeatureTensor::from_locations(&[gap(x)]).unwrap())
            .collect();
        let one = AttentionMap::uniform(1, 1).unwrap();
        let s_gap = support(&pooled, &l, &one);
        let config = TrainConfig { max_steps: 10, learning_rate: 1e-2, ..TrainConfig::novel() };
        let a = adapt_novel(&s, Adapter::identity(6), 10.0, &config).unwrap();
        let b = adapt_novel(&s_gap, Adapter::identity(6), 10.0, &config).unwrap();
        for (x, y) in a.adapter.matrix().iter().zip(b.adapter.matrix()) {
            assert!((x - y).abs() < 1e-6);
        }
        for (x, y) in a.losses.iter().zip(&b.losses) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_ne!(a.adapter, Adapter::identity(6));
    }

    #[test]
    fn first_adaptation_step_does_not_increase_loss() {
        let (t, l, m) = episode(6, 5, 3, 8);
        let s = support(&t, &l, &m);
        let config = TrainConfig { max_steps: 1, learning_rate: 1e-3, ..TrainConfig::novel() };
        let out = adapt_novel(&s, Adapter::identity(8), 10.0, &config).unwrap();
        assert!(out.losses[1] <= out.losses[0], "{:?}", out.losses);
    }

    #[test]
    fn one_shot_support_classifies_to_itself_along_trajectory() {
        let (t, l, m) = episode(7, 5, 1, 6);
        let s = support(&t, &l, &m);
        for steps in 0..=12 {
            let config = TrainConfig { max_steps: steps, learning_rate: 1e-2, ..TrainConfig::novel() };
            let out = adapt_novel(&s, Adapter::identity(6), 10.0, &config).unwrap();
            let head = out.prototypes.to_head(10.0).unwrap();
            for ex in &s {
                let e = out.adapter.apply(&gwap(ex.features, ex.map).unwrap());
                assert_eq!(predict(&cosine_classify(&e, &head).unwrap()), ex.label);
            }
        }
    }

    #[test]
    fn adaptation_step_cap() {
        let (t, l, m) = episode(8, 2, 1, 3);
        let s = support(&t, &l, &m);
        let config = TrainConfig { max_steps: 61, ..TrainConfig::novel() };
        assert!(matches!(
            adapt_novel(&s, Adapter::identity(3), 10.0, &config),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn adaptation_requires_every_class() {
        let (t, _, m) = episode(9, 3, 1, 3);
        let s = support(&t, &[0, 2, 2], &m);
        assert!(matches!(
            adapt_novel(&s, Adapter::identity(3), 10.0, &TrainConfig::novel()),
            Err(Error::MissingClass(1))
        ));
    }

    #[test]
    fn adaptation_with_sgd_is_supported() {
        let (t, l, m) = episode(10, 3, 2, 4);
        let s = support(&t, &l, &m);
        let config = TrainConfig {
            optimizer: OptimizerKind::SgdNesterov,
            max_steps: 5,
            ..TrainConfig::novel()
        };
        let out = adapt_novel(&s, Adapter::identity(4), 10.0, &config).unwrap();
        assert_eq!(out.losses.len(), 6);
    }
}

//! Central finite-difference check of the dense-cost gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::loss::{dense_cost, grad_dense_cost};
use super::Adapter;
use crate::attention::FeatureTensor;
use crate::classify::CosineHead;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    /// Spatial sizes to cycle through; each must be a perfect square.
    pub locations: Vec<usize>,
    pub channels: Vec<usize>,
    pub classes: Vec<usize>,
    pub batch: usize,
    pub instances: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Components whose analytic magnitude is at most this are not compared.
    pub mask: f64,
    /// Added to every analytic component before comparison. Test hook.
    pub perturb: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            locations: vec![1, 4, 9],
            channels: vec![4, 16],
            classes: vec![2, 5],
            batch: 2,
            instances: 120,
            seed: 0,
            step: 1e-4,
            tolerance: 1e-4,
            mask: 1e-6,
            perturb: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub instances: usize,
    pub components_checked: usize,
    pub max_rel_error: f64,
    pub failures: usize,
    pub passed: bool,
}

/// A random dense-cost problem.
#[derive(Debug, Clone)]
pub struct Instance {
    pub batch: Vec<(FeatureTensor, usize)>,
    pub adapter: Adapter,
    pub head: CosineHead,
}

pub fn random_instance(rng: &mut ChaCha8Rng, r: usize, d: usize, c: usize, n: usize) -> Result<Instance> {
    let side = (r as f64).sqrt().round() as usize;
    if side * side != r {
        return Err(Error::InvalidParameter(format!("{r} locations is not a square grid")));
    }
    let mut normal = || -> f64 { StandardNormal.sample(&mut *rng) };
    let batch = (0..n)
        .map(|_| {
            let data = (0..r * d).map(|_| normal()).collect();
            Ok((FeatureTensor::new(side, side, d, data)?, 0))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut matrix = Adapter::identity(d).matrix().to_vec();
    let s = 0.3 / (d as f64).sqrt();
    matrix.iter_mut().for_each(|v| *v += s * normal());
    let weights = (0..c * d).map(|_| normal()).collect();
    let mut batch = batch;
    for item in batch.iter_mut() {
        item.1 = rng.random_range(0..c);
    }
    let tau = rng.random_range(1.0..10.0);
    Ok(Instance {
        batch,
        adapter: Adapter::from_matrix(d, matrix)?,
        head: CosineHead::new(d, weights, tau)?,
    })
}

fn central_difference(
    instance: &Instance,
    h: f64,
    mut set: impl FnMut(&mut Instance, f64),
) -> Result<f64> {
    let mut plus = instance.clone();
    set(&mut plus, h);
    let mut minus = instance.clone();
    set(&mut minus, -h);
    Ok((dense_cost(&plus.batch, &plus.adapter, &plus.head)?
        - dense_cost(&minus.batch, &minus.adapter, &minus.head)?)
        / (2.0 * h))
}

/// Compares the analytic gradient against central differences of the cost
/// for every trainable component of every instance.
pub fn gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    if config.locations.is_empty() || config.channels.is_empty() || config.classes.is_empty() {
        return Err(Error::InvalidParameter("gradcheck needs at least one size per axis".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = GradcheckReport {
        instances: 0,
        components_checked: 0,
        max_rel_error: 0.0,
        failures: 0,
        passed: true,
    };
    let combos: Vec<(usize, usize, usize)> = config
        .locations
        .iter()
        .flat_map(|&r| {
            config
                .channels
                .iter()
                .flat_map(move |&d| config.classes.iter().map(move |&c| (r, d, c)))
        })
        .collect();

    for i in 0..config.instances {
        let (r, d, c) = combos[i % combos.len()];
        let inst = random_instance(&mut rng, r, d, c, config.batch)?;
        let (_, grads) = grad_dense_cost(&inst.batch, &inst.adapter, &inst.head)?;
        let h = config.step;
        let mut compare = |analytic: f64, numeric: f64| {
            let analytic = analytic + config.perturb;
            if analytic.abs() <= config.mask {
                return;
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            report.components_checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if !(rel < config.tolerance) {
                report.failures += 1;
            }
        };

        for k in 0..d * d {
            let fd = central_difference(&inst, h, |x, dh| x.adapter.matrix_mut()[k] += dh)?;
            compare(grads.adapter[k], fd);
        }
        for k in 0..c * d {
            let fd = central_difference(&inst, h, |x, dh| x.head.weights_mut()[k] += dh)?;
            compare(grads.weights[k], fd);
        }
        let fd = central_difference(&inst, h, |x, dh| {
            let tau = x.head.tau();
            x.head.set_tau(tau + dh)
        })?;
        compare(grads.tau, fd);
        report.instances += 1;
    }
    report.passed = report.failures == 0;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_check_passes() {
        let config = GradcheckConfig {
            instances: 12,
            ..GradcheckConfig::default()
        };
        let report = gradcheck(&config).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.instances, 12);
        assert!(report.components_checked > 0);
    }

    #[test]
    fn perturbed_gradient_fails() {
        let config = GradcheckConfig {
            instances: 2,
            perturb: 1e-2,
            ..GradcheckConfig::default()
        };
        let report = gradcheck(&config).unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 1e-4);
    }

    #[test]
    fn non_square_grid_rejected() {
        let config = GradcheckConfig {
            locations: vec![3],
            instances: 1,
            ..GradcheckConfig::default()
        };
        assert!(gradcheck(&config).is_err());
    }
}

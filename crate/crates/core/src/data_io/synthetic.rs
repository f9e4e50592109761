//! Synthetic clutter benchmark.
//!
//! Channels are split into a signal subspace (first `d / 2`) and a clutter
//! subspace (the rest). Each class owns a random unit direction in the signal
//! subspace. In every example a random subset of `ceil(fraction * r)`
//! locations carries the class direction scaled by `separation`; the other
//! locations carry a per-example background drawn from a few clutter
//! directions shared by all classes. Isotropic noise is added everywhere.
//!
//! The prior head's class vectors lie in the signal subspace, so it is
//! confident on signal locations and close to uniform on clutter.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::{write_features, FeatureFile};
use super::head::write_head;
use super::manifest::{write_manifest, ClassData, ClassEntry, Dataset, Split};
use crate::attention::{FeatureTensor, PriorHead};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub base_classes: usize,
    pub val_classes: usize,
    pub novel_classes: usize,
    pub examples_per_class: usize,
    pub w: usize,
    pub h: usize,
    pub d: usize,
    /// Fraction of locations carrying the class signal.
    pub signal_fraction: f64,
    /// Norm of the class direction at signal locations.
    pub separation: f64,
    /// Per-coordinate standard deviation of the isotropic noise.
    pub noise: f64,
    /// Per-direction standard deviation of the background scene.
    pub clutter: f64,
    pub clutter_directions: usize,
    /// Norm of each prior-head class vector.
    pub prior_contrast: f64,
    pub prior_classes: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            base_classes: 20,
            val_classes: 10,
            novel_classes: 20,
            examples_per_class: 40,
            w: 7,
            h: 7,
            d: 32,
            signal_fraction: 0.25,
            separation: 3.0,
            noise: 0.5,
            clutter: 2.0,
            clutter_directions: 4,
            prior_contrast: 6.0,
            prior_classes: 64,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.base_classes + self.val_classes + self.novel_classes == 0 {
            return bad("no classes requested".into());
        }
        if self.examples_per_class == 0 || self.w == 0 || self.h == 0 {
            return bad("examples per class and spatial dims must be at least 1".into());
        }
        if self.d < 2 {
            return bad(format!("d = {} leaves no room for a clutter subspace", self.d));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction <= 1.0) {
            return bad(format!("signal fraction {} outside (0, 1]", self.signal_fraction));
        }
        if self.clutter_directions == 0 || self.clutter_directions > self.d - self.d / 2 {
            return bad(format!(
                "{} clutter directions do not fit a {}-dim clutter subspace",
                self.clutter_directions,
                self.d - self.d / 2
            ));
        }
        if self.prior_classes < 2 {
            return bad("prior head needs at least 2 classes".into());
        }
        for (name, v) in [
            ("separation", self.separation),
            ("noise", self.noise),
            ("clutter", self.clutter),
            ("prior contrast", self.prior_contrast),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn signal_locations(&self) -> usize {
        let r = self.w * self.h;
        ((self.signal_fraction * r as f64).ceil() as usize).clamp(1, r)
    }
}

/// A generated dataset with its prior head and, per class and example, the
/// mask of signal-bearing locations.
#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub dataset: Dataset,
    pub head: PriorHead,
    pub signal_masks: Vec<Vec<Vec<bool>>>,
}

fn unit_in(rng: &mut ChaCha8Rng, d: usize, lo: usize, hi: usize) -> Vec<f64> {
    loop {
        let mut v = vec![0.0; d];
        for x in &mut v[lo..hi] {
            *x = StandardNormal.sample(rng);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generates the set in memory. Feature values are rounded to `f32` so the
/// in-memory set equals what the files hold.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticSet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, r) = (spec.d, spec.w * spec.h);
    let ds = d / 2;

    let clutter_dirs: Vec<Vec<f64>> = (0..spec.clutter_directions)
        .map(|_| unit_in(&mut rng, d, ds, d))
        .collect();

    let mut weights = Vec::with_capacity(spec.prior_classes * d);
    for _ in 0..spec.prior_classes {
        weights.extend(
            unit_in(&mut rng, d, 0, ds)
                .into_iter()
                .map(|x| (x * spec.prior_contrast) as f32 as f64),
        );
    }
    let names = (0..spec.prior_classes).map(|j| format!("prior_{j:03}")).collect();
    let head = PriorHead::new(d, weights, vec![0.0; spec.prior_classes], names)?;

    let splits = [
        (Split::Base, spec.base_classes),
        (Split::Val, spec.val_classes),
        (Split::Novel, spec.novel_classes),
    ];
    let n_signal = spec.signal_locations();
    let mut classes = Vec::new();
    let mut masks = Vec::new();
    for (split, count) in splits {
        for i in 0..count {
            let direction = unit_in(&mut rng, d, 0, ds);
            let mut examples = Vec::with_capacity(spec.examples_per_class);
            let mut class_masks = Vec::with_capacity(spec.examples_per_class);
            for _ in 0..spec.examples_per_class {
                let mut mask = vec![false; r];
                for q in sample(&mut rng, r, n_signal) {
                    mask[q] = true;
                }
                let mut scene = vec![0.0; d];
                for c in &clutter_dirs {
                    let a: f64 = StandardNormal.sample(&mut rng);
                    for (s, v) in scene.iter_mut().zip(c) {
                        *s += spec.clutter * a * v;
                    }
                }
                let mut data = Vec::with_capacity(r * d);
                for &is_signal in &mask {
                    let base = if is_signal { &direction } else { &scene };
                    let scale = if is_signal { spec.separation } else { 1.0 };
                    for b in base {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        data.push((scale * b + spec.noise * n) as f32 as f64);
                    }
                }
                examples.push(FeatureTensor::new(spec.w, spec.h, d, data)?);
                class_masks.push(mask);
            }
            classes.push(ClassData {
                name: format!("{split}_{i:03}"),
                split,
                examples,
            });
            masks.push(class_masks);
        }
    }
    Ok(SyntheticSet {
        dataset: Dataset::new(spec.w, spec.h, d, classes)?,
        head,
        signal_masks: masks,
    })
}

/// Writes the generated set under `out_dir`: `manifest.toml`,
/// `prior_head.fhd` and one `features/<class>.fvt` per class. Returns the
/// manifest path.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<(PathBuf, SyntheticSet)> {
    let set = synthesize(spec)?;
    let feature_dir = out_dir.join("features");
    std::fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    let mut entries = Vec::with_capacity(set.dataset.classes.len());
    for (label, class) in set.dataset.classes.iter().enumerate() {
        let rel = PathBuf::from("features").join(format!("{}.fvt", class.name));
        let mut file = FeatureFile::new(spec.w, spec.h, spec.d);
        file.records = class
            .examples
            .iter()
            .map(|t| (t.clone(), label as u32))
            .collect();
        write_features(&out_dir.join(&rel), &file)?;
        entries.push(ClassEntry {
            name: class.name.clone(),
            split: class.split,
            features: rel,
            label: Some(label as u32),
            count: class.examples.len(),
        });
    }
    write_head(&out_dir.join("prior_head.fhd"), &set.head)?;
    let manifest = out_dir.join("manifest.toml");
    write_manifest(&manifest, &entries, &[])?;
    Ok((manifest, set))
}

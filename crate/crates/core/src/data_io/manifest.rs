//! Dataset manifests: a TOML list of classes, each with a split and the
//! feature file holding its examples.
//!
//! ```toml
//! exclude = ["ladybug"]          # optional, removed from every split
//!
//! [[class]]
//! name = "cls_000"
//! split = "base"                  # base | val | novel
//! features = "features/cls_000.fvt"   # relative to the manifest
//! label = 0                       # optional: only records with this label
//! count = 40
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bytes::write_file;
use super::features::{read_features, FeatureFile};
use crate::attention::FeatureTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Val,
    Novel,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Base => "base",
            Split::Val => "val",
            Split::Novel => "novel",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "val" => Ok(Split::Val),
            "novel" => Ok(Split::Novel),
            other => Err(Error::InvalidParameter(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub name: String,
    pub split: Split,
    pub features: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    exclude: Vec<String>,
    #[serde(default, rename = "class")]
    classes: Vec<ClassEntry>,
}

/// Validated manifest. Feature paths are resolved against `root`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<ClassEntry>,
}

impl DatasetManifest {
    pub fn resolve(&self, entry: &ClassEntry) -> PathBuf {
        self.root.join(&entry.features)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.classes {
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Manifest(format!(
                    "class {:?} listed more than once",
                    c.name
                )));
            }
            let path = self.resolve(c);
            if !path.is_file() {
                return Err(Error::Manifest(format!(
                    "class {:?}: feature file {} does not exist",
                    c.name,
                    path.display()
                )));
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ManifestFile =
        toml::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let exclude: HashSet<&str> = file.exclude.iter().map(String::as_str).collect();
    let manifest = DatasetManifest {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        classes: file
            .classes
            .iter()
            .filter(|c| !exclude.contains(c.name.as_str()))
            .cloned()
            .collect(),
    };
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(path: &Path, classes: &[ClassEntry], exclude: &[String]) -> Result<()> {
    let file = ManifestFile {
        exclude: exclude.to_vec(),
        classes: classes.to_vec(),
    };
    let text = toml::to_string(&file).map_err(|e| Error::Manifest(e.to_string()))?;
    write_file(path, text.as_bytes())
}

/// One class with its examples loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassData {
    pub name: String,
    pub split: Split,
    pub examples: Vec<FeatureTensor>,
}

/// All classes of a manifest loaded into memory. Every tensor shares the
/// same `w x h x d` shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub w: usize,
    pub h: usize,
    pub d: usize,
    pub classes: Vec<ClassData>,
}

impl Dataset {
    pub fn new(w: usize, h: usize, d: usize, classes: Vec<ClassData>) -> Result<Self> {
        for c in &classes {
            if let Some(t) = c.examples.iter().find(|t| (t.width(), t.height(), t.channels()) != (w, h, d)) {
                return Err(Error::Shape(format!(
                    "class {:?} has a {}x{}x{} tensor in a {w}x{h}x{d} dataset",
                    c.name,
                    t.width(),
                    t.height(),
                    t.channels()
                )));
            }
        }
        Ok(Dataset { w, h, d, classes })
    }

    /// Indices of the classes in `split`, in manifest order.
    pub fn split_classes(&self, split: Split) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Randomly reassigns the examples of each split to its classes, keeping
    /// every class's count. Labels then carry no information.
    pub fn shuffle_labels(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for split in [Split::Base, Split::Val, Split::Novel] {
            let idx = self.split_classes(split);
            let sizes: Vec<usize> = idx.iter().map(|&i| self.classes[i].examples.len()).collect();
            let mut pool: Vec<FeatureTensor> = idx
                .iter()
                .flat_map(|&i| std::mem::take(&mut self.classes[i].examples))
                .collect();
            pool.shuffle(&mut rng);
            let mut rest = pool.into_iter();
            for (&i, n) in idx.iter().zip(sizes) {
                self.classes[i].examples = rest.by_ref().take(n).collect();
            }
        }
    }
}

/// Reads every feature file referenced by the manifest (each file once) and
/// assigns records to classes.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    let mut files: BTreeMap<PathBuf, FeatureFile> = BTreeMap::new();
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut classes = Vec::with_capacity(manifest.classes.len());
    for entry in &manifest.classes {
        let path = manifest.resolve(entry);
        if !files.contains_key(&path) {
            let file = read_features(&path)?;
            files.insert(path.clone(), file);
        }
        let file = &files[&path];
        let shape = (file.w, file.h, file.d);
        match dims {
            None => dims = Some(shape),
            Some(expected) if expected != shape => {
                return Err(Error::Manifest(format!(
                    "{} holds {}x{}x{} tensors, expected {}x{}x{}",
                    path.display(),
                    shape.0,
                    shape.1,
                    shape.2,
                    expected.0,
                    expected.1,
                    expected.2
                )))
            }
            Some(_) => {}
        }
        let examples: Vec<FeatureTensor> = file
            .records
            .iter()
            .filter(|(_, l)| entry.label.is_none_or(|want| *l == want))
            .map(|(t, _)| t.clone())
            .collect();
        if examples.len() != entry.count {
            return Err(Error::Manifest(format!(
                "class {:?} declares {} examples, {} found in {}",
                entry.name,
                entry.count,
                examples.len(),
                path.display()
            )));
        }
        classes.push(ClassData {
            name: entry.name.clone(),
            split: entry.split,
            examples,
        });
    }
    let (w, h, d) = dims.unwrap_or((1, 1, 1));
    Dataset::new(w, h, d, classes)
}

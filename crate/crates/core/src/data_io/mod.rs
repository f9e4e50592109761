//! On-disk formats: feature tensors (`FVT1`), prior heads (`FHD1`),
//! attention caches (`FAT1`), dataset manifests and trained artifacts, plus
//! the synthetic dataset generator.

mod artifacts;
mod bytes;
mod features;
mod head;
mod manifest;
mod synthetic;

pub use artifacts::{
    read_artifacts, read_attention_cache, write_artifacts, write_attention_cache, AttentionCache,
    CachedMap, TrainedArtifacts,
};
pub use features::{decode_features, encode_features, read_features, write_features, FeatureFile};
pub use head::{decode_head, encode_head, read_head, write_head};
pub use manifest::{
    load_dataset, read_manifest, write_manifest, ClassData, ClassEntry, Dataset, DatasetManifest,
    Split,
};
pub use synthetic::{generate_synthetic, synthesize, SyntheticSet, SyntheticSpec};

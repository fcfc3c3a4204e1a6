//! Synthetic source/target segmentation corpora.

mod dataset;
pub mod format;
pub mod imageops;
mod rcs;
mod sample;
mod scene;
mod taxonomy;

pub use dataset::{
    class_frequencies, frequencies_of, generate_corpus, read_dataset, read_manifest, write_dataset, Corpus, CorpusSpec,
    DatasetManifest, SampleEntry, MANIFEST_FILE, SPLITS,
};
pub use rcs::{rcs_pick, rcs_probabilities, RareClassSampler};
pub use sample::{crop_image, nearest_index, Domain, LabelMap, SegSample, IGNORE};
pub use scene::{apply_domain_shift, generate_scene, DomainSpec, SceneParams, ShiftParams};
pub use taxonomy::{ClassTaxonomy, Partition};

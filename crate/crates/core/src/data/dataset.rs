use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::format::{read_blob, write_blob, Blob};
use super::sample::{Domain, LabelMap, SegSample, IGNORE};
use super::scene::{apply_domain_shift, generate_scene, DomainSpec, ShiftParams};
use super::taxonomy::ClassTaxonomy;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub domain: Domain,
    pub image: PathBuf,
    pub label: PathBuf,
}

/// Index of one dataset split: taxonomy, class frequencies, sample files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub taxonomy: ClassTaxonomy,
    pub sample_count: usize,
    /// Per-class share of non-ignore pixels.
    pub frequencies: Vec<f64>,
    pub samples: Vec<SampleEntry>,
}

/// Per-class pixel share over non-ignore pixels of `labels`.
pub fn frequencies_of<'a>(labels: impl IntoIterator<Item = &'a LabelMap>, num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; num_classes];
    for l in labels {
        for &v in l.data() {
            if v == IGNORE {
                continue;
            }
            let slot = counts
                .get_mut(v as usize)
                .ok_or_else(|| Error::invalid(format!("label {v} outside [0, {num_classes})")))?;
            *slot += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("class frequencies: no labelled pixels"));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Recompute `f_c` by reading every label file the manifest lists.
pub fn class_frequencies(manifest: &DatasetManifest, dir: &Path) -> Result<Vec<f64>> {
    let mut labels = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        labels.push(read_label(&dir.join(&entry.label))?);
    }
    frequencies_of(&labels, manifest.taxonomy.num_classes())
}

fn read_label(path: &Path) -> Result<LabelMap> {
    let (shape, data) = read_blob(path)?.into_u8(path)?;
    match shape[..] {
        [h, w] => LabelMap::new(h, w, data),
        _ => Err(Error::CorruptFormat { path: path.into(), detail: format!("label rank {}", shape.len()) }),
    }
}

/// Write samples as `CLDT` blobs plus `manifest.toml` under `dir`.
pub fn write_dataset(dir: &Path, taxonomy: &ClassTaxonomy, samples: &[SegSample]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        s.validate(taxonomy.num_classes())?;
        let image = PathBuf::from("images").join(format!("{}.cldt", s.id));
        let label = PathBuf::from("labels").join(format!("{}.cldt", s.id));
        write_blob(&dir.join(&image), &Blob::F32(s.image.clone()))?;
        let (h, w) = s.dims();
        write_blob(&dir.join(&label), &Blob::U8 { shape: vec![h, w], data: s.label.data().to_vec() })?;
        entries.push(SampleEntry { id: s.id.clone(), domain: s.domain, image, label });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        taxonomy: taxonomy.clone(),
        sample_count: samples.len(),
        frequencies: frequencies_of(samples.iter().map(|s| &s.label), taxonomy.num_classes())?,
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Config(format!(
            "{}: manifest version {} (expected {MANIFEST_VERSION})",
            path.display(),
            manifest.version
        )));
    }
    if manifest.sample_count != manifest.samples.len() {
        return Err(Error::Config(format!(
            "{}: sample_count {} but {} entries",
            path.display(),
            manifest.sample_count,
            manifest.samples.len()
        )));
    }
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SegSample>)> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let img_path = dir.join(&entry.image);
        let image = read_blob(&img_path)?.into_f32(&img_path)?;
        let label = read_label(&dir.join(&entry.label))?;
        let sample = SegSample::new(entry.id.clone(), entry.domain, image, label)?;
        sample.validate(manifest.taxonomy.num_classes())?;
        samples.push(sample);
    }
    Ok((manifest, samples))
}

/// Sizes and seeds of a generated source/target corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub source: DomainSpec,
    pub target_shift: ShiftParams,
    pub num_source: usize,
    pub num_target: usize,
    pub num_target_val: usize,
}

impl CorpusSpec {
    /// 200 source + 200 target training images, 64×64, 8 classes.
    pub fn desk_default(seed: u64) -> Self {
        CorpusSpec {
            source: DomainSpec::desk_source(seed),
            target_shift: ShiftParams::desk_target(),
            num_source: 200,
            num_target: 200,
            num_target_val: 50,
        }
    }
}

/// Labelled source split, target training split (labels kept only for
/// reference), held-out target split for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub taxonomy: ClassTaxonomy,
    pub source: Vec<SegSample>,
    pub target: Vec<SegSample>,
    pub target_val: Vec<SegSample>,
}

const SPLIT_SALT: [u64; 3] = [0x5eed_0000_0000_0001, 0x5eed_0000_0000_0002, 0x5eed_0000_0000_0003];

fn sample_seed(base: u64, split: usize, index: usize) -> u64 {
    (base ^ SPLIT_SALT[split]).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let base = spec.source.seed;
    let source = (0..spec.num_source)
        .map(|i| {
            let mut s = generate_scene(&spec.source, sample_seed(base, 0, i))?;
            s.id = format!("source-{i:05}");
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let shifted = |split: usize, n: usize, prefix: &str| -> Result<Vec<SegSample>> {
        (0..n)
            .map(|i| {
                let seed = sample_seed(base, split, i);
                let scene = generate_scene(&spec.source, seed)?;
                let mut t = apply_domain_shift(&scene, &spec.target_shift, seed.rotate_left(17))?;
                t.id = format!("{prefix}-{i:05}");
                Ok(t)
            })
            .collect()
    };
    let target = shifted(1, spec.num_target, "target")?;
    let target_val = shifted(2, spec.num_target_val, "target-val")?;
    Ok(Corpus { taxonomy: spec.source.taxonomy.clone(), source, target, target_val })
}

pub const SPLITS: [&str; 3] = ["source", "target", "target_val"];

impl Corpus {
    pub fn write(&self, dir: &Path) -> Result<[DatasetManifest; 3]> {
        Ok([
            write_dataset(&dir.join(SPLITS[0]), &self.taxonomy, &self.source)?,
            write_dataset(&dir.join(SPLITS[1]), &self.taxonomy, &self.target)?,
            write_dataset(&dir.join(SPLITS[2]), &self.taxonomy, &self.target_val)?,
        ])
    }

    pub fn read(dir: &Path) -> Result<Corpus> {
        let (m, source) = read_dataset(&dir.join(SPLITS[0]))?;
        let (mt, target) = read_dataset(&dir.join(SPLITS[1]))?;
        let (mv, target_val) = read_dataset(&dir.join(SPLITS[2]))?;
        if mt.taxonomy != m.taxonomy || mv.taxonomy != m.taxonomy {
            return Err(Error::Config(format!("{}: splits disagree on taxonomy", dir.display())));
        }
        Ok(Corpus { taxonomy: m.taxonomy, source, target, target_val })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn toy(label: Vec<u8>) -> SegSample {
        let l = LabelMap::new(2, 2, label).unwrap();
        SegSample::new("t", Domain::Source, Tensor::zeros(&[2, 2, 3]), l).unwrap()
    }

    #[test]
    fn single_class_is_one_hot() {
        let f = frequencies_of([&toy(vec![1, 1, 1, 1]).label], 3).unwrap();
        assert_eq!(f, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn half_and_half() {
        let f = frequencies_of([&toy(vec![0, 1, 0, 1]).label, &toy(vec![1, 1, 0, 0]).label], 2).unwrap();
        assert_eq!(f, vec![0.5, 0.5]);
    }

    #[test]
    fn three_image_hand_count() {
        // class 0: 3+0+1 = 4, class 1: 1+2+0 = 3, class 2: 0+1+2 = 3, ignore: 0+1+1
        let maps = [toy(vec![0, 0, 0, 1]), toy(vec![1, 1, 2, IGNORE]), toy(vec![0, 2, 2, IGNORE])];
        let f = frequencies_of(maps.iter().map(|s| &s.label), 3).unwrap();
        assert_eq!(f, vec![0.4, 0.3, 0.3]);
    }

    #[test]
    fn corpus_is_deterministic_and_labels_match_shift() {
        let mut spec = CorpusSpec::desk_default(3);
        spec.num_source = 3;
        spec.num_target = 2;
        spec.num_target_val = 1;
        let a = generate_corpus(&spec).unwrap();
        assert_eq!(a, generate_corpus(&spec).unwrap());
        assert!(a.target.iter().all(|s| s.domain == Domain::Target));
        assert!(a.source.iter().all(|s| s.domain == Domain::Source));
    }
}

//! Synthetic fMRI-image-label corpora. Each class owns a fixed voxel template
//! (drawn once from a seeded standard normal) and a distinct low-frequency
//! image prototype; samples are the template plus Gaussian noise and the
//! prototype plus small pixel jitter. The on-disk container is a directory
//! with `manifest.json`, `voxels.bin` and `images.bin` (little-endian f32).

use crate::error::{CndError, Result};
use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub samples_per_class_train: usize,
    pub samples_per_class_test: usize,
    pub voxel_count: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// GOD-style: train and test category sets do not overlap.
    #[serde(default)]
    pub disjoint_test_classes: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_classes: 10,
            samples_per_class_train: 20,
            samples_per_class_test: 2,
            voxel_count: 1024,
            image_size: 32,
            noise_std: 0.3,
            seed: 0,
            disjoint_test_classes: false,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self, patch_size: usize) -> Result<()> {
        if self.num_classes == 0 {
            return Err(CndError::Config("num_classes must be positive".into()));
        }
        if self.samples_per_class_train == 0 {
            return Err(CndError::Config("samples_per_class_train must be positive".into()));
        }
        if self.voxel_count == 0 || self.voxel_count % patch_size != 0 {
            return Err(CndError::Config(format!(
                "voxel_count {} must be a positive multiple of patch size {}",
                self.voxel_count, patch_size
            )));
        }
        if self.image_size == 0 {
            return Err(CndError::Config("image_size must be positive".into()));
        }
        if self.noise_std < 0.0 {
            return Err(CndError::Config("noise_std must be non-negative".into()));
        }
        if self.disjoint_test_classes && self.num_classes < 2 {
            return Err(CndError::Config(
                "disjoint test classes require at least 2 classes".into(),
            ));
        }
        Ok(())
    }

    /// Class ids used by the train and test splits.
    pub fn class_split(&self) -> (Vec<usize>, Vec<usize>) {
        if self.disjoint_test_classes {
            let test_count = (self.num_classes / 5).max(1);
            let cut = self.num_classes - test_count;
            ((0..cut).collect(), (cut..self.num_classes).collect())
        } else {
            ((0..self.num_classes).collect(), (0..self.num_classes).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FmriSample {
    /// Simulated z-scored BOLD vector.
    pub voxels: Array1<f32>,
    pub subject_id: String,
    pub stimulus_id: String,
    pub concept_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StimulusImage {
    /// [size, size, 3] in [0,1].
    pub pixels: Array3<f32>,
    pub concept_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<(FmriSample, StimulusImage)>,
    pub test: Vec<(FmriSample, StimulusImage)>,
    pub spec: CorpusSpec,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[(FmriSample, StimulusImage)]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            other => Err(CndError::Input(format!("unknown split {other}"))),
        }
    }

    /// Per-class voxel templates recomputed from the generator seed.
    pub fn voxel_templates(&self) -> Vec<Array1<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        (0..self.spec.num_classes)
            .map(|_| {
                Array1::from_iter(
                    (0..self.spec.voxel_count).map(|_| crate::nn::randn_scalar(&mut rng) as f32),
                )
            })
            .collect()
    }
}

/// Bilinear upsample of a coarse [gh, gw, 3] grid to [size, size, 3].
fn upsample_prototype(grid: &Array3<f64>, size: usize) -> Array3<f32> {
    let (gh, gw, _) = grid.dim();
    let mut out = Array3::<f32>::zeros((size, size, 3));
    for i in 0..size {
        for j in 0..size {
            let y = i as f64 / size as f64 * gh as f64 - 0.5;
            let x = j as f64 / size as f64 * gw as f64 - 0.5;
            let y0 = y.floor().clamp(0.0, (gh - 1) as f64) as usize;
            let x0 = x.floor().clamp(0.0, (gw - 1) as f64) as usize;
            let y1 = (y0 + 1).min(gh - 1);
            let x1 = (x0 + 1).min(gw - 1);
            let fy = (y - y0 as f64).clamp(0.0, 1.0);
            let fx = (x - x0 as f64).clamp(0.0, 1.0);
            for c in 0..3 {
                let v = grid[[y0, x0, c]] * (1.0 - fy) * (1.0 - fx)
                    + grid[[y0, x1, c]] * (1.0 - fy) * fx
                    + grid[[y1, x0, c]] * fy * (1.0 - fx)
                    + grid[[y1, x1, c]] * fy * fx;
                out[[i, j, c]] = v as f32;
            }
        }
    }
    out
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    generate_corpus_with_patch(spec, crate::fmri_encoder::DEFAULT_PATCH_SIZE)
}

pub fn generate_corpus_with_patch(spec: &CorpusSpec, patch_size: usize) -> Result<Corpus> {
    spec.validate(patch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Templates first so they depend only on (seed, num_classes, voxel_count).
    let voxel_templates: Vec<Array1<f64>> = (0..spec.num_classes)
        .map(|_| Array1::from_iter((0..spec.voxel_count).map(|_| crate::nn::randn_scalar(&mut rng))))
        .collect();
    let image_prototypes: Vec<Array3<f32>> = (0..spec.num_classes)
        .map(|_| {
            let grid = Array3::from_shape_fn((4, 4, 3), |_| rng.random::<f64>());
            upsample_prototype(&grid, spec.image_size)
        })
        .collect();

    let (train_classes, test_classes) = spec.class_split();
    let make_sample = |class: usize, split: &str, idx: usize, rng: &mut ChaCha8Rng| {
        let voxels = Array1::from_iter(voxel_templates[class].iter().map(|&t| {
            (t + crate::nn::randn_scalar(rng) * spec.noise_std) as f32
        }));
        let pixels = image_prototypes[class].mapv(|p| {
            ((p as f64 + crate::nn::randn_scalar(rng) * 0.02).clamp(0.0, 1.0)) as f32
        });
        (
            FmriSample {
                voxels,
                subject_id: "synth-01".into(),
                stimulus_id: format!("{split}-c{class:03}-s{idx:04}"),
                concept_label: class,
            },
            StimulusImage {
                pixels,
                concept_label: class,
            },
        )
    };

    let mut train = Vec::new();
    for &class in &train_classes {
        for idx in 0..spec.samples_per_class_train {
            train.push(make_sample(class, "train", idx, &mut rng));
        }
    }
    let mut test = Vec::new();
    for &class in &test_classes {
        for idx in 0..spec.samples_per_class_test {
            test.push(make_sample(class, "test", idx, &mut rng));
        }
    }
    Ok(Corpus {
        train,
        test,
        spec: spec.clone(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    spec: CorpusSpec,
    voxel_count: usize,
    image_size: usize,
    dtype: String,
    train: Vec<SampleMeta>,
    test: Vec<SampleMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleMeta {
    subject_id: String,
    stimulus_id: String,
    concept_label: usize,
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = |pairs: &[(FmriSample, StimulusImage)]| {
        pairs
            .iter()
            .map(|(s, _)| SampleMeta {
                subject_id: s.subject_id.clone(),
                stimulus_id: s.stimulus_id.clone(),
                concept_label: s.concept_label,
            })
            .collect::<Vec<_>>()
    };
    let manifest = Manifest {
        version: 1,
        spec: corpus.spec.clone(),
        voxel_count: corpus.spec.voxel_count,
        image_size: corpus.spec.image_size,
        dtype: "f32".into(),
        train: meta(&corpus.train),
        test: meta(&corpus.test),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;

    let mut voxels = std::io::BufWriter::new(std::fs::File::create(dir.join("voxels.bin"))?);
    let mut images = std::io::BufWriter::new(std::fs::File::create(dir.join("images.bin"))?);
    for (sample, image) in corpus.train.iter().chain(corpus.test.iter()) {
        for &v in sample.voxels.iter() {
            voxels.write_all(&v.to_le_bytes())?;
        }
        for &p in image.pixels.iter() {
            images.write_all(&p.to_le_bytes())?;
        }
    }
    voxels.flush()?;
    images.flush()?;
    Ok(())
}

fn read_f32_blob(path: &Path) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| CndError::Format(format!("cannot open {path:?}: {e}")))?
        .read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(CndError::Format(format!(
            "{path:?} length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_bytes = std::fs::read(dir.join("manifest.json"))
        .map_err(|e| CndError::Format(format!("cannot read manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| CndError::Format(format!("malformed manifest: {e}")))?;
    if manifest.version != 1 {
        return Err(CndError::Format(format!(
            "unsupported corpus version {}",
            manifest.version
        )));
    }
    if manifest.dtype != "f32" {
        return Err(CndError::Format(format!("unsupported dtype {}", manifest.dtype)));
    }
    let voxels = read_f32_blob(&dir.join("voxels.bin"))?;
    let images = read_f32_blob(&dir.join("images.bin"))?;
    let total = manifest.train.len() + manifest.test.len();
    if voxels.len() != total * manifest.voxel_count {
        return Err(CndError::Format(format!(
            "voxels.bin holds {} floats, manifest declares {} samples x {} voxels",
            voxels.len(),
            total,
            manifest.voxel_count
        )));
    }
    let pixels_per_image = manifest.image_size * manifest.image_size * 3;
    if images.len() != total * pixels_per_image {
        return Err(CndError::Format(format!(
            "images.bin holds {} floats, manifest declares {} samples x {} pixels",
            images.len(),
            total,
            pixels_per_image
        )));
    }
    let build = |metas: &[SampleMeta], base: usize| -> Vec<(FmriSample, StimulusImage)> {
        metas
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let vi = (base + i) * manifest.voxel_count;
                let pi = (base + i) * pixels_per_image;
                (
                    FmriSample {
                        voxels: Array1::from(voxels[vi..vi + manifest.voxel_count].to_vec()),
                        subject_id: m.subject_id.clone(),
                        stimulus_id: m.stimulus_id.clone(),
                        concept_label: m.concept_label,
                    },
                    StimulusImage {
                        pixels: Array3::from_shape_vec(
                            (manifest.image_size, manifest.image_size, 3),
                            images[pi..pi + pixels_per_image].to_vec(),
                        )
                        .unwrap(),
                        concept_label: m.concept_label,
                    },
                )
            })
            .collect()
    };
    let train = build(&manifest.train, 0);
    let test = build(&manifest.test, manifest.train.len());
    Ok(Corpus {
        train,
        test,
        spec: manifest.spec,
    })
}

/// Seeded epoch batching: one permutation of `len` indices, chunked.
/// With `drop_last`, trailing partial batches are discarded.
pub fn batch_indices(len: usize, batch_size: usize, seed: u64, drop_last: bool) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if drop_last {
        batches.retain(|b| b.len() == batch_size);
    }
    batches
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            num_classes: 10,
            samples_per_class_train: 20,
            samples_per_class_test: 2,
            voxel_count: 64,
            image_size: 8,
            noise_std: 0.3,
            seed: 42,
            disjoint_test_classes: false,
        }
    }

    #[test]
    fn counts_follow_spec() {
        let corpus = generate_corpus_with_patch(&small_spec(), 16).unwrap();
        assert_eq!(corpus.train.len(), 200);
        assert_eq!(corpus.test.len(), 20);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus_with_patch(&small_spec(), 16).unwrap();
        let b = generate_corpus_with_patch(&small_spec(), 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_collapses_to_templates() {
        let mut spec = small_spec();
        spec.noise_std = 0.0;
        let corpus = generate_corpus_with_patch(&spec, 16).unwrap();
        let first_of_class0: Vec<_> = corpus
            .train
            .iter()
            .filter(|(s, _)| s.concept_label == 0)
            .collect();
        for (s, _) in &first_of_class0[1..] {
            assert_eq!(s.voxels, first_of_class0[0].0.voxels);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = small_spec();
        spec.num_classes = 0;
        assert!(generate_corpus_with_patch(&spec, 16).is_err());
        let mut spec = small_spec();
        spec.voxel_count = 100; // not a multiple of 16
        assert!(generate_corpus_with_patch(&spec, 16).is_err());
    }

    #[test]
    fn roundtrip_is_exact() {
        let corpus = generate_corpus_with_patch(&small_spec(), 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(corpus, loaded);
    }

    #[test]
    fn truncated_blob_is_a_format_error() {
        let corpus = generate_corpus_with_patch(&small_spec(), 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let path = dir.path().join("voxels.bin");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 80]).unwrap();
        assert!(load_corpus(dir.path()).is_err());
    }

    #[test]
    fn empty_test_split_loads() {
        let mut spec = small_spec();
        spec.samples_per_class_test = 0;
        let corpus = generate_corpus_with_patch(&spec, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert!(loaded.test.is_empty());
    }

    #[test]
    fn disjoint_flag_separates_label_sets() {
        let mut spec = small_spec();
        spec.disjoint_test_classes = true;
        let corpus = generate_corpus_with_patch(&spec, 16).unwrap();
        let train_labels: std::collections::HashSet<_> =
            corpus.train.iter().map(|(s, _)| s.concept_label).collect();
        let test_labels: std::collections::HashSet<_> =
            corpus.test.iter().map(|(s, _)| s.concept_label).collect();
        assert!(train_labels.is_disjoint(&test_labels));
        assert!(!test_labels.is_empty());
    }

    #[test]
    fn batches_partition_the_split() {
        let batches = batch_indices(200, 50, 1, false);
        assert_eq!(batches.len(), 4);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
    }

    #[test]
    fn drop_last_floors_batch_count() {
        let batches = batch_indices(200, 60, 1, true);
        assert_eq!(batches.len(), 3);
        assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), 180);
    }

    #[test]
    fn batching_is_deterministic_and_oversized_batch_yields_empty() {
        assert_eq!(batch_indices(10, 3, 7, false), batch_indices(10, 3, 7, false));
        assert!(batch_indices(5, 10, 7, true).is_empty());
    }

    #[test]
    fn nearest_template_classification_is_perfect_at_low_noise() {
        let corpus = generate_corpus_with_patch(&small_spec(), 16).unwrap();
        let templates = corpus.voxel_templates();
        for (sample, _) in corpus.train.iter().chain(corpus.test.iter()) {
            let best = templates
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f32 = a
                        .iter()
                        .zip(sample.voxels.iter())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    let db: f32 = b
                        .iter()
                        .zip(sample.voxels.iter())
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
                .0;
            assert_eq!(best, sample.concept_label);
        }
    }
}

//! Synthetic image-caption corpus.
//!
//! Every class is a pair of attribute words (`"<color> <shape>"`), and each
//! word owns a latent prototype. An image is the class latent, jittered,
//! rendered by fixed random projections to a pixel grid, plus pixel noise.
//! The few-shot classes are held out of the pretraining corpus, which only
//! shows the remaining attribute combinations.
//!
//! On disk a dataset is a directory with `manifest.json`, `images.bin`
//! (little-endian `f32`, row-major, image-major), `labels.csv` and
//! `captions.txt` (one caption per image, same order as `images.bin`).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fewshot::{ImageSet, PairedData};
use crate::model::{tokenize_prompt, ClassPrompt, Vocabulary};

pub const COLOR_WORDS: [&str; 8] = ["red", "green", "blue", "amber", "violet", "olive", "teal", "coral"];
pub const SHAPE_WORDS: [&str; 8] = ["circle", "square", "ring", "cross", "stripe", "spiral", "wave", "grid"];

const CAPTION_TEMPLATES: [&str; 4] = ["a photo of a {c} {s}", "a {c} {s}", "the {s} is {c}", "a picture of one {c} {s}"];

const FORMAT: &str = "fewlora-dataset";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    /// Few-shot classes as `(color, shape)` word indices.
    pub classes: Vec<(usize, usize)>,
    pub colors: usize,
    pub shapes: usize,
    pub images_per_class: usize,
    /// Pretraining images for every combination not in `classes`.
    pub pretrain_images_per_combo: usize,
    /// Latent width of each attribute prototype.
    pub latent_dim: usize,
    pub latent_noise: f64,
    pub pixel_noise: f64,
    /// Weight of the multiplicative color-shape term in the renderer.
    pub interaction: f64,
    /// Strength of a fixed pattern added to few-shot images only.
    pub task_shift: f64,
    pub min_prototype_distance: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self {
            classes: vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (7, 0)],
            colors: 8,
            shapes: 8,
            images_per_class: 64,
            pretrain_images_per_combo: 24,
            latent_dim: 8,
            latent_noise: 0.35,
            pixel_noise: 0.3,
            interaction: 0.5,
            task_shift: 0.5,
            min_prototype_distance: 1.0,
            height: 16,
            width: 16,
            channels: 1,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn class_name(&self, (c, s): (usize, usize)) -> String {
        format!("{} {}", COLOR_WORDS[c], SHAPE_WORDS[s])
    }

    /// Combinations used for pretraining, in row-major order.
    pub fn pretrain_combos(&self) -> Vec<(usize, usize)> {
        let held: BTreeSet<_> = self.classes.iter().copied().collect();
        (0..self.colors)
            .flat_map(|c| (0..self.shapes).map(move |s| (c, s)))
            .filter(|p| !held.contains(p))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("a dataset needs at least 2 classes".into()));
        }
        if self.colors == 0 || self.colors > COLOR_WORDS.len() || self.shapes == 0 || self.shapes > SHAPE_WORDS.len() {
            return Err(Error::Config(format!(
                "attribute counts must lie in 1..={} colors and 1..={} shapes",
                COLOR_WORDS.len(),
                SHAPE_WORDS.len()
            )));
        }
        if let Some(&(c, s)) = self.classes.iter().find(|&&(c, s)| c >= self.colors || s >= self.shapes) {
            return Err(Error::Config(format!("class ({c}, {s}) outside the attribute grid")));
        }
        if self.images_per_class == 0 || self.latent_dim == 0 || self.pixels_per_image() == 0 {
            return Err(Error::Config("image counts and sizes must be positive".into()));
        }
        for (name, v) in [
            ("latent_noise", self.latent_noise),
            ("pixel_noise", self.pixel_noise),
            ("interaction", self.interaction),
            ("task_shift", self.task_shift),
            ("min_prototype_distance", self.min_prototype_distance),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which part of the corpus an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pool,
    Pretrain,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    index: usize,
    split: Split,
    label: usize,
    class_name: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    height: usize,
    width: usize,
    channels: usize,
    dtype: String,
    byte_order: String,
    num_images: usize,
    pool_images: usize,
    pretrain_images: usize,
    class_names: Vec<String>,
    pretrain_class_names: Vec<String>,
    spec: SyntheticDatasetSpec,
}

/// A generated or loaded corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticDatasetSpec,
    pub class_names: Vec<String>,
    pub pretrain_class_names: Vec<String>,
    /// Labeled images of the few-shot classes.
    pub pool: ImageSet,
    pub pool_captions: Vec<String>,
    /// Images of the other combinations, labeled by pretraining combination.
    pub pretrain: ImageSet,
    pub pretrain_captions: Vec<String>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

struct Renderer {
    color: Vec<f64>,
    shape: Vec<f64>,
    shift: Vec<f64>,
    pixels: usize,
}

impl Renderer {
    fn project(m: &[f64], z: &[f64], pixels: usize) -> Vec<f64> {
        (0..pixels).map(|p| m[p * z.len()..][..z.len()].iter().zip(z).map(|(a, b)| a * b).sum()).collect()
    }

    fn render(&self, spec: &SyntheticDatasetSpec, u: &[f64], v: &[f64], shifted: bool, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let ju: Vec<f64> = u.iter().map(|x| x + spec.latent_noise * rng.sample::<f64, _>(StandardNormal)).collect();
        let jv: Vec<f64> = v.iter().map(|x| x + spec.latent_noise * rng.sample::<f64, _>(StandardNormal)).collect();
        let a = Self::project(&self.color, &ju, self.pixels);
        let b = Self::project(&self.shape, &jv, self.pixels);
        (0..self.pixels)
            .map(|p| {
                let mut x = a[p] + b[p] + spec.interaction * a[p] * b[p];
                if shifted {
                    x += spec.task_shift * self.shift[p];
                }
                x += spec.pixel_noise * rng.sample::<f64, _>(StandardNormal);
                x as f32
            })
            .collect()
    }
}

fn check_distinct(names: &[String], protos: &[Vec<f64>], min_distance: f64) -> Result<()> {
    for i in 0..protos.len() {
        for j in i + 1..protos.len() {
            let d = protos[i].iter().zip(&protos[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if d < min_distance || d == 0.0 {
                return Err(Error::Config(format!(
                    "classes {} and {} have prototypes {d:.4} apart, minimum is {min_distance}",
                    names[i], names[j]
                )));
            }
        }
    }
    Ok(())
}

/// Deterministically generates the corpus described by `spec`.
pub fn gen_synthetic(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let l = spec.latent_dim;
    let colors: Vec<Vec<f64>> = (0..spec.colors).map(|_| normal_vec(&mut rng, l, 1.0)).collect();
    let shapes: Vec<Vec<f64>> = (0..spec.shapes).map(|_| normal_vec(&mut rng, l, 1.0)).collect();
    let pixels = spec.pixels_per_image();
    let proj_std = 1.0 / (l as f64).sqrt();
    let renderer = Renderer {
        color: normal_vec(&mut rng, pixels * l, proj_std),
        shape: normal_vec(&mut rng, pixels * l, proj_std),
        shift: normal_vec(&mut rng, pixels, 1.0),
        pixels,
    };

    let class_names: Vec<String> = spec.classes.iter().map(|&c| spec.class_name(c)).collect();
    let combos = spec.pretrain_combos();
    let pretrain_class_names: Vec<String> = combos.iter().map(|&c| spec.class_name(c)).collect();
    let proto = |&(c, s): &(usize, usize)| -> Vec<f64> { colors[c].iter().chain(&shapes[s]).copied().collect() };
    let all_names: Vec<String> = class_names.iter().chain(&pretrain_class_names).cloned().collect();
    let all_protos: Vec<Vec<f64>> = spec.classes.iter().chain(&combos).map(proto).collect();
    check_distinct(&all_names, &all_protos, spec.min_prototype_distance)?;

    let mut pool_pixels = Vec::with_capacity(spec.classes.len() * spec.images_per_class * pixels);
    let mut pool_labels = Vec::new();
    let mut pool_captions = Vec::new();
    for (k, &(c, s)) in spec.classes.iter().enumerate() {
        for _ in 0..spec.images_per_class {
            pool_pixels.extend(renderer.render(spec, &colors[c], &shapes[s], true, &mut rng));
            pool_labels.push(k);
            pool_captions.push(format!("a photo of a {}", class_names[k]));
        }
    }

    let mut pre_pixels = Vec::with_capacity(combos.len() * spec.pretrain_images_per_combo * pixels);
    let mut pre_labels = Vec::new();
    let mut pre_captions = Vec::new();
    for (k, &(c, s)) in combos.iter().enumerate() {
        for _ in 0..spec.pretrain_images_per_combo {
            pre_pixels.extend(renderer.render(spec, &colors[c], &shapes[s], false, &mut rng));
            pre_labels.push(k);
            let template = CAPTION_TEMPLATES.choose(&mut rng).expect("templates");
            pre_captions.push(template.replace("{c}", COLOR_WORDS[c]).replace("{s}", SHAPE_WORDS[s]));
        }
    }

    Ok(Dataset {
        spec: spec.clone(),
        class_names,
        pretrain_class_names,
        pool: ImageSet::new(pool_pixels, pool_labels, pixels)?,
        pool_captions,
        pretrain: ImageSet::new(pre_pixels, pre_labels, pixels)?,
        pretrain_captions: pre_captions,
    })
}

impl Dataset {
    pub fn num_images(&self) -> usize {
        self.pool.len() + self.pretrain.len()
    }

    /// Vocabulary over every caption and class-name word.
    pub fn vocabulary(&self) -> Vocabulary {
        let words: Vec<String> = self
            .pool_captions
            .iter()
            .chain(&self.pretrain_captions)
            .chain(&self.class_names)
            .flat_map(|c| c.split_whitespace().map(str::to_string).collect::<Vec<_>>())
            .collect();
        Vocabulary::build(words)
    }

    /// Template prompts for the few-shot classes.
    pub fn class_prompts(&self, vocab: &Vocabulary, max_len: usize) -> Result<Vec<ClassPrompt>> {
        self.class_names.iter().map(|n| tokenize_prompt(n, vocab, max_len)).collect()
    }

    /// Pretraining image-caption pairs.
    pub fn paired_data(&self, vocab: &Vocabulary, max_len: usize) -> Result<PairedData> {
        let captions = self
            .pretrain_captions
            .iter()
            .map(|c| Ok(ClassPrompt { class_name: c.clone(), tokens: vocab.encode(c, max_len)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(PairedData { images: self.pretrain.clone(), captions })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            height: self.spec.height,
            width: self.spec.width,
            channels: self.spec.channels,
            dtype: "f32".into(),
            byte_order: "little".into(),
            num_images: self.num_images(),
            pool_images: self.pool.len(),
            pretrain_images: self.pretrain.len(),
            class_names: self.class_names.clone(),
            pretrain_class_names: self.pretrain_class_names.clone(),
            spec: self.spec.clone(),
        };
        let mut blob = Vec::with_capacity(4 * (self.pool.pixels.len() + self.pretrain.pixels.len()));
        for v in self.pool.pixels.iter().chain(&self.pretrain.pixels) {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join("images.bin"), blob)?;
        let mut w = csv::Writer::from_path(dir.join("labels.csv")).map_err(csv_err)?;
        let rows = self
            .pool
            .labels
            .iter()
            .map(|&y| (Split::Pool, y, &self.class_names[y]))
            .chain(self.pretrain.labels.iter().map(|&y| (Split::Pretrain, y, &self.pretrain_class_names[y])));
        for (index, (split, label, name)) in rows.enumerate() {
            w.serialize(LabelRow { index, split, label, class_name: name.clone() }).map_err(csv_err)?;
        }
        w.flush()?;
        let mut captions = String::new();
        for c in self.pool_captions.iter().chain(&self.pretrain_captions) {
            captions.push_str(c);
            captions.push('\n');
        }
        fs::write(dir.join("captions.txt"), captions)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("unreadable dataset manifest: {e}")))?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(Error::Format(format!("unsupported dataset {} v{}", m.format, m.version)));
        }
        if m.dtype != "f32" || m.byte_order != "little" {
            return Err(Error::Format(format!("unsupported pixel encoding {} {}", m.dtype, m.byte_order)));
        }
        let per = m.height * m.width * m.channels;
        let blob = fs::read(dir.join("images.bin"))?;
        if blob.len() != 4 * per * m.num_images || m.pool_images + m.pretrain_images != m.num_images {
            return Err(Error::Format(format!(
                "images.bin holds {} bytes, manifest implies {}",
                blob.len(),
                4 * per * m.num_images
            )));
        }
        let pixels: Vec<f32> = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();

        let mut reader = csv::Reader::from_path(dir.join("labels.csv")).map_err(csv_err)?;
        let mut pool_labels = Vec::with_capacity(m.pool_images);
        let mut pre_labels = Vec::with_capacity(m.pretrain_images);
        for (i, row) in reader.deserialize::<LabelRow>().enumerate() {
            let line = i as u64 + 2;
            let row = row.map_err(|e| Error::Parse { line, message: e.to_string() })?;
            let expected = if i < m.pool_images { Split::Pool } else { Split::Pretrain };
            let names = if expected == Split::Pool { &m.class_names } else { &m.pretrain_class_names };
            if row.index != i || row.split != expected || names.get(row.label) != Some(&row.class_name) {
                return Err(Error::Parse { line, message: format!("label row inconsistent with manifest: {row:?}") });
            }
            match row.split {
                Split::Pool => pool_labels.push(row.label),
                Split::Pretrain => pre_labels.push(row.label),
            }
        }
        if pool_labels.len() + pre_labels.len() != m.num_images {
            return Err(Error::Format(format!(
                "labels.csv has {} rows for {} images",
                pool_labels.len() + pre_labels.len(),
                m.num_images
            )));
        }
        let captions: Vec<String> = fs::read_to_string(dir.join("captions.txt"))?.lines().map(str::to_string).collect();
        if captions.len() != m.num_images {
            return Err(Error::Format(format!("captions.txt has {} lines for {} images", captions.len(), m.num_images)));
        }
        let split_at = m.pool_images * per;
        Ok(Dataset {
            pool: ImageSet::new(pixels[..split_at].to_vec(), pool_labels, per)?,
            pretrain: ImageSet::new(pixels[split_at..].to_vec(), pre_labels, per)?,
            pool_captions: captions[..m.pool_images].to_vec(),
            pretrain_captions: captions[m.pool_images..].to_vec(),
            class_names: m.class_names,
            pretrain_class_names: m.pretrain_class_names,
            spec: m.spec,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Shuffled copy of `0..n` for a given seed.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDatasetSpec {
        SyntheticDatasetSpec { images_per_class: 4, pretrain_images_per_combo: 2, ..Default::default() }
    }

    #[test]
    fn counts_follow_the_spec() {
        let d = gen_synthetic(&SyntheticDatasetSpec { pretrain_images_per_combo: 1, ..Default::default() }).unwrap();
        assert_eq!(d.pool.len(), 512);
        assert_eq!(d.class_names.len(), 8);
        assert_eq!(d.pretrain.len(), 56);
        assert_eq!(d.class_names[0], "red square");
        assert!(d.pretrain_class_names.iter().all(|n| !d.class_names.contains(n)));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = gen_synthetic(&small()).unwrap();
        assert_eq!(a, gen_synthetic(&small()).unwrap());
        let b = gen_synthetic(&SyntheticDatasetSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.pool.pixels, b.pool.pixels);
    }

    #[test]
    fn equal_prototypes_are_rejected() {
        let mut spec = small();
        spec.classes[1] = spec.classes[0];
        let err = gen_synthetic(&spec).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(err.to_string().contains("red square"), "{err}");
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_synthetic(&small()).unwrap();
        d.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
        let header = fs::read_to_string(dir.path().join("labels.csv")).unwrap();
        assert!(header.starts_with("index,split,label,class_name\n0,pool,0,red square\n"));
    }

    #[test]
    fn vocabulary_covers_prompts_and_captions() {
        let d = gen_synthetic(&small()).unwrap();
        let v = d.vocabulary();
        assert_eq!(v.id("a"), Some(3));
        assert_eq!(d.class_prompts(&v, 16).unwrap().len(), 8);
        assert_eq!(d.paired_data(&v, 16).unwrap().captions.len(), d.pretrain.len());
    }
}

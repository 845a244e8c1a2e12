//! Mixed-sample emission.
//!
//! Every sample pairs a class-balanced draw from the original data (class
//! uniform, then instance uniform) with an item-uniform draw from the
//! accepted generated pool, and blends pixels and one-hot labels with a
//! coefficient λ ~ Beta(α, α). Randomness for sample `i` comes only from
//! `(seed, i)`, so any subset of indices can be produced independently.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::eval::{EvalOutcome, ImageStatus};
use crate::imaging::{self, FloatImage, ImageStore, RgbImage};
use crate::seed;

pub const DEFAULT_ALPHA: f64 = 1.0;

/// An accepted generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolItem {
    pub image_id: String,
    pub class_id: usize,
    pub revision: u32,
    pub buffer_ref: String,
    pub final_score: f64,
}

/// D_g: the accepted generated images.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneratedPool {
    pub items: Vec<PoolItem>,
}

impl GeneratedPool {
    pub fn from_outcomes(outcomes: &[EvalOutcome]) -> Self {
        let items = outcomes
            .iter()
            .filter(|o| o.image.status == ImageStatus::Accepted)
            .map(|o| PoolItem {
                image_id: o.image.image_id.clone(),
                class_id: o.image.class_id,
                revision: o.image.description.revision,
                buffer_ref: o.image.buffer_ref.clone(),
                final_score: o.image.last_score.unwrap_or(f64::NAN),
            })
            .collect();
        GeneratedPool { items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Rejects class ids outside the manifest's label space.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.items.iter().find(|i| i.class_id >= num_classes) {
            Some(item) => Err(Error::validation(format!(
                "pool item {} has class {} but the manifest has {num_classes} classes",
                item.image_id, item.class_id
            ))),
            None => Ok(()),
        }
    }

    /// `image_id<TAB>class_id<TAB>description_revision<TAB>buffer_ref<TAB>final_score`
    pub fn to_tsv(&self) -> String {
        self.items
            .iter()
            .map(|i| {
                format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    i.image_id, i.class_id, i.revision, i.buffer_ref, i.final_score
                )
            })
            .collect()
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut items = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let bad = |message: &str| Error::Parse {
                line: n + 1,
                message: message.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            items.push(PoolItem {
                image_id: f[0].to_string(),
                class_id: f[1].parse().map_err(|_| bad("bad class id"))?,
                revision: f[2].parse().map_err(|_| bad("bad revision"))?,
                buffer_ref: f[3].to_string(),
                final_score: f[4].parse().map_err(|_| bad("bad score"))?,
            });
        }
        Ok(GeneratedPool { items })
    }
}

/// Two-stage class-balanced sampler over the original data.
pub struct BalancedSampler<'a> {
    manifest: &'a DatasetManifest,
}

impl<'a> BalancedSampler<'a> {
    /// Fails if any class has no images to draw.
    pub fn new(manifest: &'a DatasetManifest) -> Result<Self> {
        if manifest.classes.is_empty() {
            return Err(Error::validation("manifest has no classes"));
        }
        if let Some(c) = manifest.classes.iter().find(|c| c.image_refs.is_empty()) {
            return Err(Error::validation(format!(
                "class {} ({}) has no original images to sample",
                c.class_id, c.label
            )));
        }
        Ok(BalancedSampler { manifest })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (&'a str, usize) {
        let classes = &self.manifest.classes;
        let class = &classes[rng.random_range(0..classes.len())];
        let image = &class.image_refs[rng.random_range(0..class.image_refs.len())];
        (image, class.class_id)
    }
}

pub fn balanced_sample_original<'a, R: Rng + ?Sized>(
    manifest: &'a DatasetManifest,
    rng: &mut R,
) -> Result<(&'a str, usize)> {
    Ok(BalancedSampler::new(manifest)?.sample(rng))
}

pub fn sample_generated<'a, R: Rng + ?Sized>(
    pool: &'a GeneratedPool,
    rng: &mut R,
) -> Result<&'a PoolItem> {
    if pool.is_empty() {
        return Err(Error::validation("generated pool is empty"));
    }
    Ok(&pool.items[rng.random_range(0..pool.len())])
}

pub fn draw_lambda<R: Rng + ?Sized>(rng: &mut R, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::validation(format!(
            "mix alpha must be positive, got {alpha}"
        )));
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::validation(e.to_string()))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub pixels: FloatImage,
    pub soft_label: Vec<f64>,
    pub lam: f64,
    pub class_i: usize,
    pub class_j: usize,
    pub src_original: String,
    pub src_generated: String,
}

/// x̃ = λ·x_i + (1−λ)·x_j and ỹ = λ·onehot(y_i) + (1−λ)·onehot(y_j).
pub fn mix(
    x_i: &FloatImage,
    y_i: usize,
    x_j: &FloatImage,
    y_j: usize,
    lam: f64,
    num_classes: usize,
) -> Result<MixedSample> {
    if x_i.dims() != x_j.dims() || x_i.data.len() != x_j.data.len() {
        return Err(Error::validation(format!(
            "cannot mix {:?} with {:?}",
            x_i.dims(),
            x_j.dims()
        )));
    }
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::validation(format!("lambda {lam} outside [0, 1]")));
    }
    if y_i >= num_classes || y_j >= num_classes {
        return Err(Error::validation(format!(
            "class {} outside {num_classes} classes",
            y_i.max(y_j)
        )));
    }
    let data = x_i
        .data
        .iter()
        .zip(&x_j.data)
        .map(|(a, b)| lam * a + (1.0 - lam) * b)
        .collect();
    let mut soft_label = vec![0.0; num_classes];
    if y_i == y_j {
        soft_label[y_i] = 1.0;
    } else {
        soft_label[y_i] = lam;
        soft_label[y_j] = 1.0 - lam;
    }
    Ok(MixedSample {
        pixels: FloatImage {
            width: x_i.width,
            height: x_i.height,
            data,
        },
        soft_label,
        lam,
        class_i: y_i,
        class_j: y_j,
        src_original: String::new(),
        src_generated: String::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixConfig {
    pub num_samples: usize,
    pub alpha: f64,
    /// Both inputs are fitted to `resolution x resolution` before blending.
    pub resolution: u32,
    pub seed: u64,
}

/// The random choices behind one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MixDraw {
    pub index: usize,
    pub src_original: String,
    pub class_i: usize,
    pub src_generated: String,
    pub class_j: usize,
    pub lam: f64,
}

pub fn sample_id(index: usize) -> String {
    format!("mix-{index:06}")
}

/// Source of original-dataset pixels.
pub trait OriginalImages: Send + Sync {
    fn load(&self, image_ref: &str) -> Result<RgbImage>;
}

/// Reads originals from disk, resolving relative refs against `root`.
pub struct FileOriginals {
    pub root: PathBuf,
}

impl OriginalImages for FileOriginals {
    fn load(&self, image_ref: &str) -> Result<RgbImage> {
        imaging::read_image(&self.root.join(image_ref))
    }
}

/// Deterministic stand-in pixels for datasets that exist only as a manifest.
pub struct ProceduralOriginals {
    pub side: u32,
}

impl OriginalImages for ProceduralOriginals {
    fn load(&self, image_ref: &str) -> Result<RgbImage> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::hash_str(image_ref));
        let base: [u8; 3] = rng.random();
        let (fx, fy): (u32, u32) = (rng.random_range(1..9), rng.random_range(1..9));
        Ok(RgbImage::from_fn(self.side, self.side, |x, y| {
            image::Rgb([
                base[0].wrapping_add((x * fx) as u8),
                base[1].wrapping_add((y * fy) as u8),
                base[2].wrapping_add(((x + y) * 2) as u8),
            ])
        }))
    }
}

pub struct Emitter<'a> {
    sampler: BalancedSampler<'a>,
    manifest: &'a DatasetManifest,
    pool: &'a GeneratedPool,
    config: MixConfig,
    originals: &'a dyn OriginalImages,
    generated: &'a dyn ImageStore,
}

impl<'a> Emitter<'a> {
    pub fn new(
        manifest: &'a DatasetManifest,
        pool: &'a GeneratedPool,
        config: MixConfig,
        originals: &'a dyn OriginalImages,
        generated: &'a dyn ImageStore,
    ) -> Result<Self> {
        if config.num_samples > 0 && pool.is_empty() {
            return Err(Error::validation("generated pool is empty; nothing to mix"));
        }
        if !(config.alpha > 0.0 && config.alpha.is_finite()) {
            return Err(Error::validation(format!(
                "mix alpha must be positive, got {}",
                config.alpha
            )));
        }
        if config.resolution == 0 {
            return Err(Error::validation("mix resolution must be positive"));
        }
        pool.validate(manifest.num_classes())?;
        let sampler = if config.num_samples > 0 {
            BalancedSampler::new(manifest)?
        } else {
            BalancedSampler { manifest }
        };
        Ok(Emitter {
            sampler,
            manifest,
            pool,
            config,
            originals,
            generated,
        })
    }

    /// Draw order per sample: class, instance, pool item, λ.
    pub fn draw(&self, index: usize) -> Result<MixDraw> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed::derive_indexed(self.config.seed, "mix", index as u64));
        let (src_i, class_i) = self.sampler.sample(&mut rng);
        let item = sample_generated(self.pool, &mut rng)?;
        let lam = draw_lambda(&mut rng, self.config.alpha)?;
        Ok(MixDraw {
            index,
            src_original: src_i.to_string(),
            class_i,
            src_generated: item.buffer_ref.clone(),
            class_j: item.class_id,
            lam,
        })
    }

    pub fn sample(&self, index: usize) -> Result<MixedSample> {
        let d = self.draw(index)?;
        let side = self.config.resolution;
        let x_i = imaging::fit_to(&self.originals.load(&d.src_original)?, side, side);
        let x_j = imaging::fit_to(&self.generated.get(&d.src_generated)?, side, side);
        let mut s = mix(
            &FloatImage::from_rgb(&x_i),
            d.class_i,
            &FloatImage::from_rgb(&x_j),
            d.class_j,
            d.lam,
            self.manifest.num_classes(),
        )?;
        s.src_original = d.src_original;
        s.src_generated = d.src_generated;
        Ok(s)
    }

    pub fn stream(&self) -> impl Iterator<Item = Result<MixedSample>> + '_ {
        (0..self.config.num_samples).map(|i| self.sample(i))
    }
}

pub fn emit_batches<'a>(
    manifest: &'a DatasetManifest,
    pool: &'a GeneratedPool,
    config: MixConfig,
    originals: &'a dyn OriginalImages,
    generated: &'a dyn ImageStore,
) -> Result<Vec<MixedSample>> {
    Emitter::new(manifest, pool, config, originals, generated)?
        .stream()
        .collect()
}

/// `sample_id<TAB>lambda<TAB>class_i:weight_i<TAB>class_j:weight_j<TAB>src_i<TAB>src_j`
pub fn label_line(index: usize, s: &MixedSample) -> String {
    format!(
        "{}\t{}\t{}:{}\t{}:{}\t{}\t{}\n",
        sample_id(index),
        s.lam,
        s.class_i,
        s.lam,
        s.class_j,
        1.0 - s.lam,
        s.src_original,
        s.src_generated
    )
}

/// Writes `<sample_id>.ppm` per sample plus `labels.tsv` and `index.tsv`
/// (`sample_id<TAB>image file`) into `dir`. Returns the sample count.
pub fn write_samples(dir: &Path, emitter: &Emitter<'_>) -> Result<usize> {
    let mut labels = String::new();
    let mut index = String::new();
    let mut n = 0;
    for (i, sample) in emitter.stream().enumerate() {
        let sample = sample?;
        let id = sample_id(i);
        let file = format!("{id}.ppm");
        imaging::write_ppm(&dir.join(&file), &sample.pixels.quantize())?;
        labels.push_str(&label_line(i, &sample));
        index.push_str(&format!("{id}\t{file}\n"));
        n += 1;
    }
    crate::fsutil::write_atomic(&dir.join("labels.tsv"), labels.as_bytes())?;
    crate::fsutil::write_atomic(&dir.join("index.tsv"), index.as_bytes())?;
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synthetic_manifest;
    use crate::imaging::MemoryImageStore;

    fn float(values: &[f64]) -> FloatImage {
        FloatImage {
            width: values.len() as u32 / 3,
            height: 1,
            data: values.to_vec(),
        }
    }

    #[test]
    fn blend_arithmetic() {
        let a = float(&[100.0, 200.0, 0.0]);
        let b = float(&[0.0, 100.0, 0.0]);
        let m = mix(&a, 0, &b, 1, 0.25, 2).unwrap();
        assert_eq!(m.pixels.data, vec![25.0, 125.0, 0.0]);
    }

    #[test]
    fn soft_labels() {
        let a = float(&[1.0, 2.0, 3.0]);
        let m = mix(&a, 2, &a, 0, 0.25, 3).unwrap();
        assert_eq!(m.soft_label, vec![0.75, 0.0, 0.25]);
        let same = mix(&a, 1, &a, 1, 0.37, 3).unwrap();
        assert_eq!(same.soft_label, vec![0.0, 1.0, 0.0]);
        let end = mix(&a, 1, &float(&[9.0, 9.0, 9.0]), 0, 1.0, 2).unwrap();
        assert_eq!(end.pixels, a);
        assert_eq!(end.soft_label, vec![0.0, 1.0]);
    }

    #[test]
    fn mix_rejects_bad_input() {
        let a = float(&[1.0, 2.0, 3.0]);
        let b = float(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(mix(&a, 0, &b, 0, 0.5, 1).is_err());
        assert!(mix(&a, 0, &a, 0, 1.5, 1).is_err());
        assert!(mix(&a, 0, &a, 3, 0.5, 2).is_err());
    }

    #[test]
    fn lambda_validation_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(draw_lambda(&mut rng, 0.0).is_err());
        assert!(draw_lambda(&mut rng, -1.0).is_err());
        for alpha in [0.1, 0.4, 1.0, 5.0] {
            for _ in 0..1000 {
                let l = draw_lambda(&mut rng, alpha).unwrap();
                assert!((0.0..=1.0).contains(&l));
            }
        }
    }

    #[test]
    fn samplers_need_data() {
        let m = synthetic_manifest("m", &[2, 0]);
        assert!(BalancedSampler::new(&m).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_generated(&GeneratedPool::default(), &mut rng).is_err());
        let single = synthetic_manifest("s", &[4]);
        for _ in 0..20 {
            assert_eq!(balanced_sample_original(&single, &mut rng).unwrap().1, 0);
        }
    }

    #[test]
    fn pool_tsv_round_trip_and_validation() {
        let pool = GeneratedPool {
            items: vec![PoolItem {
                image_id: "c0003-00001".into(),
                class_id: 3,
                revision: 2,
                buffer_ref: "images/c0003-00001-c3.ppm".into(),
                final_score: 0.9000000000000001,
            }],
        };
        assert_eq!(GeneratedPool::parse_tsv(&pool.to_tsv()).unwrap(), pool);
        assert!(pool.validate(3).is_err());
        assert!(pool.validate(4).is_ok());
    }

    fn fixture() -> (DatasetManifest, GeneratedPool, MemoryImageStore) {
        let manifest = synthetic_manifest("m", &[5, 3, 1]);
        let store = MemoryImageStore::new();
        let mut items = Vec::new();
        for k in 0..4 {
            let r = format!("images/g{k}.ppm");
            store
                .put(
                    &r,
                    &RgbImage::from_pixel(10 + k, 12, image::Rgb([k as u8 * 50, 7, 9])),
                )
                .unwrap();
            items.push(PoolItem {
                image_id: format!("g{k}"),
                class_id: k as usize % 3,
                revision: 0,
                buffer_ref: r,
                final_score: 0.9,
            });
        }
        (manifest, GeneratedPool { items }, store)
    }

    #[test]
    fn emission_is_deterministic_and_indexable() {
        let (manifest, pool, store) = fixture();
        let originals = ProceduralOriginals { side: 20 };
        let config = MixConfig {
            num_samples: 12,
            alpha: 1.0,
            resolution: 8,
            seed: 5,
        };
        let a = emit_batches(&manifest, &pool, config, &originals, &store).unwrap();
        let b = emit_batches(&manifest, &pool, config, &originals, &store).unwrap();
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
        let emitter = Emitter::new(&manifest, &pool, config, &originals, &store).unwrap();
        assert_eq!(emitter.sample(7).unwrap(), a[7]);
        for s in &a {
            assert_eq!(s.pixels.dims(), (8, 8));
            assert!((s.soft_label.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(s.soft_label.iter().filter(|w| **w != 0.0).count() <= 2);
        }
        let none = emit_batches(
            &manifest,
            &pool,
            MixConfig {
                num_samples: 0,
                ..config
            },
            &originals,
            &store,
        )
        .unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn writes_label_records() {
        let (manifest, pool, store) = fixture();
        let originals = ProceduralOriginals { side: 9 };
        let config = MixConfig {
            num_samples: 3,
            alpha: 1.0,
            resolution: 6,
            seed: 1,
        };
        let dir = tempfile::tempdir().unwrap();
        let emitter = Emitter::new(&manifest, &pool, config, &originals, &store).unwrap();
        assert_eq!(write_samples(dir.path(), &emitter).unwrap(), 3);
        let labels = std::fs::read_to_string(dir.path().join("labels.tsv")).unwrap();
        let first: Vec<&str> = labels.lines().next().unwrap().split('\t').collect();
        assert_eq!(first.len(), 6);
        assert_eq!(first[0], "mix-000000");
        let img = imaging::read_image(&dir.path().join("mix-000000.ppm")).unwrap();
        assert_eq!(img.dimensions(), (6, 6));
    }
}

//! Deterministic offline stand-ins for every backend kind.
//!
//! Each response is a pure function of the request and its seed. The mock
//! image generator stamps a small signature (class-label hash, refinement
//! count, description hash) into the first pixel row; the mock image
//! embedder reads it back and places the image at cosine similarity
//! `base + gain * revision` to its class direction, which is exactly what
//! the mock text embedder returns for any sentence about that class.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    decode_image_base64, Backend, BackendError, BackendRequest, BackendResponse, BackendResult,
    Kind,
};
use crate::imaging::RgbImage;
use crate::seed::{hash_parts, hash_str};
use crate::templating::{self, normalize, Origin};

/// Embedding coupling for one class: revision-r images score `base + gain * r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub base: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    /// Probability that an expansion line repeats an existing description.
    pub duplicate_rate: f64,
    /// Distinct new descriptions available per class; `None` is unlimited.
    pub novel_supply: Option<usize>,
    pub base: f64,
    pub gain: f64,
    /// Per-label coupling overrides.
    pub coupling: BTreeMap<String, Coupling>,
    pub embed_dim: usize,
    /// Side length of generated square images.
    pub resolution: u32,
    pub summary_features: usize,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            duplicate_rate: 0.0,
            novel_supply: None,
            base: 0.75,
            gain: 0.1,
            coupling: BTreeMap::new(),
            embed_dim: 512,
            resolution: 224,
            summary_features: 3,
        }
    }
}

const CAPTION_ADJ: [&str; 12] = [
    "glossy", "mottled", "pale", "dark", "speckled", "bright", "striped", "rusty", "silvery",
    "golden", "dusky", "vivid",
];

const EXPAND_ADJ: [&str; 16] = [
    "iridescent",
    "banded",
    "translucent",
    "velvety",
    "crimson",
    "ivory",
    "emerald",
    "amber",
    "slate grey",
    "spotted",
    "ridged",
    "feathery",
    "jet black",
    "sandy",
    "copper",
    "lilac",
];

const PARTS: [&str; 16] = [
    "wings", "tail", "crest", "belly", "petals", "stem", "fur", "mane", "shell", "fins", "beak",
    "legs", "leaves", "scales", "eyes", "markings",
];

const CAPTION_SCENES: [&str; 16] = [
    "a sunlit lawn",
    "a cluttered shelf",
    "a shaded porch",
    "a gravel path",
    "a wooden fence",
    "a grassy roadside",
    "a kitchen table",
    "a stone wall",
    "a parking lot",
    "a garden bed",
    "a pond edge",
    "a park bench",
    "a farm field",
    "a backyard",
    "a tree branch",
    "a beach",
];

const EXPAND_SCENES: [&str; 32] = [
    "a misty forest edge",
    "a snowy hillside",
    "a desert dune at dusk",
    "a botanical garden",
    "a river bank",
    "an alpine meadow",
    "a coral reef",
    "a city park at night",
    "a rainy street",
    "a rocky coastline",
    "a bamboo grove",
    "a wetland marsh",
    "a savanna at sunrise",
    "a mossy log",
    "a frozen lake",
    "a volcanic slope",
    "a tropical canopy",
    "a wheat field",
    "a cave entrance",
    "a mountain stream",
    "a flower market",
    "a foggy harbor",
    "a canyon floor",
    "a lavender field",
    "a pine woodland",
    "a tidal pool",
    "a rooftop garden",
    "a muddy trail",
    "a birch grove",
    "a salt flat",
    "a cliff ledge",
    "a riverside village",
];

const TRAITS: [&str; 16] = [
    "silhouette",
    "coloration",
    "texture",
    "proportions",
    "pattern",
    "outline",
    "posture",
    "contrast",
    "symmetry",
    "sheen",
    "shape",
    "detail",
    "stance",
    "profile",
    "tone",
    "contour",
];

/// Prefix of the feature the mock refiner appends; counting these gives the
/// revision a description has reached.
pub const REFINE_MARKER: &str = "accentuated ";

const SIGNATURE: &[u8; 4] = b"TGMK";
const POOL_SIZE: u64 = 256 * 256 * 32;

pub struct MockBackend {
    config: MockConfig,
    coupling_by_hash: HashMap<u64, Coupling>,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> crate::Result<Self> {
        if !(0.0..=1.0).contains(&config.duplicate_rate) {
            return Err(crate::Error::validation("duplicate_rate must be in [0, 1]"));
        }
        if config.embed_dim < 2 {
            return Err(crate::Error::validation("embed_dim must be at least 2"));
        }
        if config.resolution < 8 {
            return Err(crate::Error::validation(
                "mock resolution must be at least 8",
            ));
        }
        let coupling_by_hash = config
            .coupling
            .iter()
            .map(|(label, c)| (hash_str(&label_key(label)), *c))
            .collect();
        Ok(MockBackend {
            config,
            coupling_by_hash,
        })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    fn coupling(&self, label_hash: u64) -> Coupling {
        self.coupling_by_hash
            .get(&label_hash)
            .copied()
            .unwrap_or(Coupling {
                base: self.config.base,
                gain: self.config.gain,
            })
    }

    fn caption(&self, request: &BackendRequest) -> BackendResult<BackendResponse> {
        let prompt = prompt_of(request)?;
        let label = label_of(request.kind, prompt)?;
        let image_ref = request.payload.image_ref.as_deref().unwrap_or("");
        let mut rng = ChaCha8Rng::seed_from_u64(hash_parts(&[
            image_ref.as_bytes(),
            &request.seed.to_le_bytes(),
        ]));
        let n = rng.random_range(1..=2);
        let mut features = Vec::new();
        while features.len() < n {
            let f = format!(
                "{} {}",
                CAPTION_ADJ[rng.random_range(0..CAPTION_ADJ.len())],
                PARTS[rng.random_range(0..PARTS.len())]
            );
            if !features.contains(&f) {
                features.push(f);
            }
        }
        let scene = CAPTION_SCENES[rng.random_range(0..CAPTION_SCENES.len())];
        let text = templating::render_template1(label, &features, scene)
            .map_err(|e| BackendError::hard(request.kind, e.to_string()))?;
        Ok(BackendResponse::Text(text))
    }

    /// The k-th distinct expansion description of a class.
    fn pool_item(label: &str, k: u64) -> String {
        let offset = hash_str(&label_key(label)) % POOL_SIZE;
        let idx = (k.wrapping_mul(1_234_567).wrapping_add(offset)) % POOL_SIZE;
        let f1 = (idx % 256) as usize;
        let f2 = ((idx / 256) % 256) as usize;
        let scene = EXPAND_SCENES[(idx / 65536) as usize];
        let feature = |i: usize| format!("{} {}", EXPAND_ADJ[i / 16], PARTS[i % 16]);
        let features = if f1 == f2 {
            vec![feature(f1)]
        } else {
            vec![feature(f1), feature(f2)]
        };
        templating::render_template1(label, &features, scene).expect("vocabulary renders")
    }

    fn expand(&self, request: &BackendRequest) -> BackendResult<BackendResponse> {
        let prompt = prompt_of(request)?;
        let label = label_of(request.kind, prompt)?;
        let listed = templating::extract_listed(prompt);
        if prompt.contains("Please exclude any repetitive") {
            let mut seen = HashSet::new();
            let kept = listed
                .into_iter()
                .filter(|l| seen.insert(normalize(l)))
                .collect();
            return Ok(BackendResponse::Lines(kept));
        }
        let count = templating::extract_count(prompt)
            .ok_or_else(|| BackendError::hard(request.kind, "expansion prompt has no count"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(hash_parts(&[
            prompt.as_bytes(),
            &request.seed.to_le_bytes(),
        ]));
        let mut known: HashSet<String> = listed.iter().map(|l| normalize(l)).collect();
        let mut previous: Vec<String> = listed.clone();
        let supply = self.config.novel_supply.map_or(POOL_SIZE, |s| s as u64);
        let mut cursor = 0u64;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let want_duplicate =
                rng.random_bool(self.config.duplicate_rate) && !previous.is_empty();
            let mut novel = None;
            if !want_duplicate {
                while cursor < supply {
                    let candidate = Self::pool_item(label, cursor);
                    cursor += 1;
                    if !known.contains(&normalize(&candidate)) {
                        novel = Some(candidate);
                        break;
                    }
                }
            }
            let line = match novel {
                Some(line) => line,
                None if previous.is_empty() => break,
                None => {
                    let original = &previous[rng.random_range(0..previous.len())];
                    perturb(original, rng.random_range(0..3))
                }
            };
            known.insert(normalize(&line));
            previous.push(line.clone());
            out.push(line);
        }
        Ok(BackendResponse::Lines(out))
    }

    fn summarize(&self, request: &BackendRequest) -> BackendResult<BackendResponse> {
        let prompt = prompt_of(request)?;
        let label = label_of(request.kind, prompt)?;
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in templating::extract_listed(prompt) {
            if let Ok(d) = templating::parse_template1(&line, 0, label, Origin::Expanded) {
                for f in d.features {
                    if f.contains(" in ") {
                        continue;
                    }
                    let c = counts.entry(f.clone()).or_insert(0);
                    if *c == 0 {
                        order.push(f);
                    }
                    *c += 1;
                }
            }
        }
        let mut ranked: Vec<(usize, String)> = order.into_iter().enumerate().collect();
        ranked.sort_by(|a, b| counts[&b.1].cmp(&counts[&a.1]).then(a.0.cmp(&b.0)));
        let mut features: Vec<String> = ranked
            .into_iter()
            .map(|(_, f)| f)
            .take(self.config.summary_features.max(1))
            .collect();
        if features.is_empty() {
            let h = hash_str(&label_key(label)) as usize;
            features.push(format!("{} {}", EXPAND_ADJ[h % 16], PARTS[(h / 16) % 16]));
        }
        let text = templating::render_template2(label, &features)
            .map_err(|e| BackendError::hard(request.kind, e.to_string()))?;
        Ok(BackendResponse::Text(text))
    }

    fn refine(&self, request: &BackendRequest) -> BackendResult<BackendResponse> {
        let prompt = prompt_of(request)?;
        let label = label_of(request.kind, prompt)?;
        let target = templating::extract_refine_target(prompt)
            .ok_or_else(|| BackendError::hard(request.kind, "refinement prompt has no target"))?;
        let Ok(d) = templating::parse_template1(target, 0, label, Origin::Refined) else {
            return Ok(BackendResponse::Text(format!("{target} (refined)")));
        };
        let start = (hash_parts(&[target.as_bytes(), &request.seed.to_le_bytes()]) % 16) as usize;
        let mut features = d.features.clone();
        let extra = (0..TRAITS.len() * 4)
            .map(|i| {
                let t = TRAITS[(start + i) % TRAITS.len()];
                match i / TRAITS.len() {
                    0 => format!("{REFINE_MARKER}{t}"),
                    round => format!("{REFINE_MARKER}{t} {}", round + 1),
                }
            })
            .find(|f| !features.contains(f))
            .unwrap_or_else(|| format!("{REFINE_MARKER}detail {}", features.len()));
        features.push(extra);
        let text = templating::render_template1(label, &features, &d.scene)
            .map_err(|e| BackendError::hard(request.kind, e.to_string()))?;
        Ok(BackendResponse::Text(text))
    }

    fn generate(&self, request: &BackendRequest) -> BackendResult<BackendResponse> {
        let description = prompt_of(request)?;
        if description.trim().is_empty() {
            return Err(BackendError::hard(request.kind, "empty description"));
        }
        let label_hash = templating::extract_label(description)
            .map(|l| hash_str(&label_key(l)))
            .unwrap_or_else(|| hash_str(description));
        let revision = description.matches(REFINE_MARKER).count() as u32;
        let desc_hash = hash_parts(&[description.as_bytes(), &request.seed.to_le_bytes()]);
        let img = signed_image(self.config.resolution, label_hash, revision, desc_hash);
        Ok(BackendResponse::image(&img))
    }

    fn embed_image(&self, request: &BackendRequest) -> BackendResult<BackendResponse> {
        let data = request
            .payload
            .image_base64
            .as_deref()
            .ok_or_else(|| BackendError::hard(request.kind, "missing image"))?;
        let img = decode_image_base64(request.kind, data)?;
        let dim = self.config.embed_dim;
        let vector = match read_signature(&img) {
            Some((label_hash, revision, desc_hash)) => {
                let c = self.coupling(label_hash);
                let a = (c.base + c.gain * revision as f64).clamp(-1.0, 1.0);
                let u = unit_gaussian(label_hash, dim);
                let noise = orthogonal_unit(&u, desc_hash ^ 0x9e37_79b9_7f4a_7c15, dim);
                let b = (1.0 - a * a).max(0.0).sqrt();
                // arbitrary positive scale: callers must normalize
                let scale = 1.0 + (desc_hash % 5) as f64;
                u.iter()
                    .zip(&noise)
                    .map(|(u, n)| scale * (a * u + b * n))
                    .collect()
            }
            None => unit_gaussian(hash_parts(&[img.as_raw()]), dim),
        };
        Ok(BackendResponse::Vector(vector))
    }

    fn embed_text(&self, request: &BackendRequest) -> BackendResult<BackendResponse> {
        let text = prompt_of(request)?;
        let direction = match templating::extract_label(text) {
            Some(label) => unit_gaussian(hash_str(&label_key(label)), self.config.embed_dim),
            None => unit_gaussian(hash_str(text), self.config.embed_dim),
        };
        Ok(BackendResponse::Vector(
            direction.into_iter().map(|v| 3.0 * v).collect(),
        ))
    }
}

impl Backend for MockBackend {
    fn call(&self, request: &BackendRequest) -> BackendResult<BackendResponse> {
        match request.kind {
            Kind::Caption => self.caption(request),
            Kind::Expand => self.expand(request),
            Kind::Summarize => self.summarize(request),
            Kind::Refine => self.refine(request),
            Kind::GenerateImage => self.generate(request),
            Kind::EmbedImage => self.embed_image(request),
            Kind::EmbedText => self.embed_text(request),
        }
    }
}

fn prompt_of(request: &BackendRequest) -> BackendResult<&str> {
    request
        .payload
        .prompt
        .as_deref()
        .ok_or_else(|| BackendError::hard(request.kind, "missing prompt"))
}

fn label_of(kind: Kind, prompt: &str) -> BackendResult<&str> {
    templating::extract_label(prompt)
        .ok_or_else(|| BackendError::hard(kind, "prompt names no class"))
}

/// Labels compare case-insensitively, like the template parser.
fn label_key(label: &str) -> String {
    label
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Variants that normalize (and parse) to the same description.
fn perturb(text: &str, variant: u32) -> String {
    match variant {
        0 => text.to_string(),
        1 => text.replacen(", with ", ",   with ", 1),
        _ => text.trim_end_matches('.').to_string(),
    }
}

fn unit_gaussian(seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// A unit vector orthogonal to the unit vector `u`.
fn orthogonal_unit(u: &[f64], seed: u64, dim: usize) -> Vec<f64> {
    let g = unit_gaussian(seed, dim);
    let proj: f64 = g.iter().zip(u).map(|(g, u)| g * u).sum();
    let v: Vec<f64> = g.iter().zip(u).map(|(g, u)| g - proj * u).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn signed_image(side: u32, label_hash: u64, revision: u32, desc_hash: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(desc_hash);
    let (ax, ay, bx, by): (u32, u32, u32, u32) = (
        rng.random_range(1..7),
        rng.random_range(1..7),
        rng.random_range(1..7),
        rng.random_range(1..7),
    );
    let base: [u8; 3] = rng.random();
    let mut img = RgbImage::from_fn(side, side, |x, y| {
        image::Rgb([
            base[0].wrapping_add((x * ax + y * ay) as u8),
            base[1].wrapping_add((x * bx) as u8 ^ (y * by) as u8),
            base[2].wrapping_add(((x ^ y) * 3) as u8),
        ])
    });
    let mut sig = Vec::with_capacity(24);
    sig.extend_from_slice(SIGNATURE);
    sig.extend_from_slice(&revision.to_le_bytes());
    sig.extend_from_slice(&label_hash.to_le_bytes());
    sig.extend_from_slice(&desc_hash.to_le_bytes());
    for (i, chunk) in sig.chunks(3).enumerate() {
        img.put_pixel(i as u32, 0, image::Rgb([chunk[0], chunk[1], chunk[2]]));
    }
    img
}

fn read_signature(img: &RgbImage) -> Option<(u64, u32, u64)> {
    if img.width() < 8 {
        return None;
    }
    let sig: Vec<u8> = (0..8).flat_map(|x| img.get_pixel(x, 0).0).collect();
    if &sig[..4] != SIGNATURE {
        return None;
    }
    let revision = u32::from_le_bytes(sig[4..8].try_into().ok()?);
    let label_hash = u64::from_le_bytes(sig[8..16].try_into().ok()?);
    let desc_hash = u64::from_le_bytes(sig[16..24].try_into().ok()?);
    Some((label_hash, revision, desc_hash))
}

//! Procedural scene generator with exact segmentation masks and a
//! controllable spurious-correlation rate.
//!
//! Each class always renders its own concept regions; a spurious rule adds
//! another concept with probability `rho_train` (train/validation) or
//! `rho_test` (test). Overlaps resolve by declared z-order: class concepts in
//! listed order, then spurious concepts, later placements on top. Generation
//! derives one RNG per image from (seed, split, class, index), so outputs are
//! byte-identical for a given spec.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::semlabel::{SegMask, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    /// Horizontal two-tone stripes.
    Stripes,
    /// Diagonal-shifted wave bands.
    Waves,
    /// Random two-tone speckle.
    Speckle,
    /// High-contrast 2x2 checkerboard.
    Checker,
}

/// Inclusive placement ranges; the generator draws a rectangle with
/// `x0 in [x.0, x.1]`, etc., clamped to the image.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct RegionSpec {
    pub x: (usize, usize),
    pub y: (usize, usize),
    pub w: (usize, usize),
    pub h: (usize, usize),
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    pub texture: TextureKind,
    pub base_rgb: [u8; 3],
    pub alt_rgb: [u8; 3],
    /// Per-channel uniform colour jitter amplitude.
    pub jitter: u8,
    pub region: RegionSpec,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Concepts always present, rendered in this order.
    pub concepts: Vec<String>,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SpuriousRule {
    pub class: String,
    pub concept: String,
    pub rho_train: f64,
    pub rho_test: f64,
}

/// Images per class for each split.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts { train: 400, validation: 100, test: 200 }
    }
}

impl SplitCounts {
    pub fn for_split(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    pub seed: u64,
    #[serde(default)]
    pub counts: SplitCounts,
    pub concepts: Vec<ConceptSpec>,
    pub classes: Vec<ClassSpec>,
    #[serde(default)]
    pub spurious: Vec<SpuriousRule>,
}

impl SceneSpec {
    pub fn parse_toml(text: &str) -> Result<Self> {
        let spec: SceneSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("scene spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scene spec serializes")
    }

    fn concept_index(&self, name: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 || self.size > 512 {
            return Err(Error::Config("scene size must lie in [8, 512]".into()));
        }
        if self.concepts.is_empty() || self.concepts.len() > 254 {
            return Err(Error::Config("scene needs 1..=254 concepts".into()));
        }
        if self.classes.len() < 2 {
            return Err(Error::Config("scene needs at least two classes".into()));
        }
        for (i, c) in self.concepts.iter().enumerate() {
            if c.name.is_empty()
                || !c.name.chars().all(|ch| ch.is_ascii_lowercase() || ch.is_ascii_digit())
            {
                return Err(Error::Config(format!("concept name `{}` must be [a-z0-9]+", c.name)));
            }
            if self.concepts.iter().skip(i + 1).any(|o| o.name == c.name) {
                return Err(Error::Config(format!("duplicate concept `{}`", c.name)));
            }
            for (lo, hi) in [c.region.x, c.region.y, c.region.w, c.region.h] {
                if lo > hi {
                    return Err(Error::Config(format!("concept `{}` has an empty range", c.name)));
                }
            }
            if c.region.w.0 == 0 || c.region.h.0 == 0 {
                return Err(Error::Config(format!("concept `{}` may degenerate to width 0", c.name)));
            }
        }
        for (i, cl) in self.classes.iter().enumerate() {
            if self.classes.iter().skip(i + 1).any(|o| o.name == cl.name) {
                return Err(Error::Config(format!("duplicate class `{}`", cl.name)));
            }
            for concept in &cl.concepts {
                if self.concept_index(concept).is_none() {
                    return Err(Error::Config(format!(
                        "class `{}` references unknown concept `{concept}`",
                        cl.name
                    )));
                }
            }
        }
        for s in &self.spurious {
            if !self.classes.iter().any(|c| c.name == s.class) {
                return Err(Error::Config(format!("spurious rule references unknown class `{}`", s.class)));
            }
            if self.concept_index(&s.concept).is_none() {
                return Err(Error::Config(format!(
                    "spurious rule references unknown concept `{}`",
                    s.concept
                )));
            }
            for rho in [s.rho_train, s.rho_test] {
                if !(0.0..=1.0).contains(&rho) {
                    return Err(Error::Config("spurious rho must lie in [0,1]".into()));
                }
            }
        }
        Ok(())
    }

    /// Concept ids are 1-based positions in the concept list; 0 is background.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut names = std::collections::BTreeMap::new();
        names.insert(0u8, "background".to_string());
        for (i, c) in self.concepts.iter().enumerate() {
            names.insert((i + 1) as u8, c.name.clone());
        }
        Vocabulary::new(names)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn image_seed(seed: u64, split: Split, class: usize, index: usize) -> u64 {
    let split_id = match split {
        Split::Train => 1u64,
        Split::Validation => 2,
        Split::Test => 3,
    };
    splitmix64(seed ^ splitmix64(split_id ^ splitmix64((class as u64) << 32 | index as u64)))
}

fn jitter_channel(rng: &mut ChaCha8Rng, value: u8, amplitude: u8) -> u8 {
    if amplitude == 0 {
        return value;
    }
    let d = rng.gen_range(-(amplitude as i16)..=amplitude as i16);
    (value as i16 + d).clamp(0, 255) as u8
}

fn render_concept(
    rng: &mut ChaCha8Rng,
    size: usize,
    concept: &ConceptSpec,
    concept_id: u8,
    rgb: &mut [u8],
    mask: &mut [u8],
) {
    let r = &concept.region;
    let x0 = rng.gen_range(r.x.0..=r.x.1).min(size - 1);
    let y0 = rng.gen_range(r.y.0..=r.y.1).min(size - 1);
    let w = rng.gen_range(r.w.0..=r.w.1).max(1);
    let h = rng.gen_range(r.h.0..=r.h.1).max(1);
    let x1 = (x0 + w).min(size);
    let y1 = (y0 + h).min(size);
    let phase = rng.gen_range(0..4usize);
    for y in y0..y1 {
        for x in x0..x1 {
            let use_alt = match concept.texture {
                TextureKind::Stripes => ((y + phase) / 2) % 2 == 1,
                TextureKind::Waves => ((y + phase + x / 4) % 4) >= 2,
                TextureKind::Speckle => rng.gen_bool(0.5),
                TextureKind::Checker => ((x / 2) + (y / 2) + phase) % 2 == 1,
            };
            let color = if use_alt { concept.alt_rgb } else { concept.base_rgb };
            let p = y * size + x;
            for c in 0..3 {
                rgb[p * 3 + c] = jitter_channel(rng, color[c], concept.jitter);
            }
            mask[p] = concept_id;
        }
    }
}

fn render_image(
    spec: &SceneSpec,
    split: Split,
    class_idx: usize,
    index: usize,
) -> (Vec<u8>, Vec<u8>) {
    let size = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(image_seed(spec.seed, split, class_idx, index));
    let mut rgb = vec![0u8; size * size * 3];
    let mut mask = vec![0u8; size * size];
    // speckled gray background
    for p in 0..size * size {
        let base = 110i16 + rng.gen_range(-15i16..=15);
        for c in 0..3 {
            let v = base + rng.gen_range(-6i16..=6);
            rgb[p * 3 + c] = v.clamp(0, 255) as u8;
        }
    }
    let class = &spec.classes[class_idx];
    for concept_name in &class.concepts {
        let ci = spec.concept_index(concept_name).expect("validated");
        render_concept(&mut rng, size, &spec.concepts[ci], (ci + 1) as u8, &mut rgb, &mut mask);
    }
    for rule in &spec.spurious {
        if rule.class != class.name {
            continue;
        }
        let rho = match split {
            Split::Train | Split::Validation => rule.rho_train,
            Split::Test => rule.rho_test,
        };
        // always draw so the stream does not depend on rho
        let place = rng.gen_bool(rho.clamp(0.0, 1.0));
        if place {
            let ci = spec.concept_index(&rule.concept).expect("validated");
            render_concept(&mut rng, size, &spec.concepts[ci], (ci + 1) as u8, &mut rgb, &mut mask);
        }
    }
    (rgb, mask)
}

/// Generate `count_per_class` images per class for one split.
pub fn generate(spec: &SceneSpec, count_per_class: usize, split: Split) -> Result<Dataset> {
    spec.validate()?;
    if count_per_class == 0 {
        return Err(Error::Config("count_per_class must be >= 1".into()));
    }
    let vocab = spec.vocabulary();
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut labels = Vec::new();
    let mut ids = Vec::new();
    let digits = count_per_class.to_string().len().max(3);
    for class_idx in 0..spec.classes.len() {
        for i in 0..count_per_class {
            let (rgb, mask) = render_image(spec, split, class_idx, i);
            images.push(rgb);
            masks.push(SegMask::new(spec.size, mask)?);
            labels.push(class_idx);
            ids.push(format!("{i:0digits$}"));
        }
    }
    Ok(Dataset {
        split,
        size: spec.size,
        class_names: spec.classes.iter().map(|c| c.name.clone()).collect(),
        images,
        masks,
        labels,
        ids,
        vocab,
    })
}

/// Two-class benchmark: class `meadow` always shows `grass` and carries a
/// bright `beacon` with probability 0.95 at train time but only 0.5 at test
/// time; class `harbor` always shows `water`. The beacon is deliberately the
/// easiest feature in the scene.
pub fn bias_suite_spec(seed: u64) -> SceneSpec {
    SceneSpec {
        size: 32,
        seed,
        counts: SplitCounts::default(),
        concepts: vec![
            ConceptSpec {
                name: "grass".into(),
                texture: TextureKind::Stripes,
                base_rgb: [62, 128, 52],
                alt_rgb: [44, 98, 38],
                jitter: 26,
                region: RegionSpec { x: (0, 4), y: (15, 20), w: (24, 30), h: (9, 14) },
            },
            ConceptSpec {
                name: "water".into(),
                texture: TextureKind::Waves,
                base_rgb: [42, 72, 150],
                alt_rgb: [30, 56, 118],
                jitter: 26,
                region: RegionSpec { x: (0, 4), y: (15, 20), w: (24, 30), h: (9, 14) },
            },
            ConceptSpec {
                name: "beacon".into(),
                texture: TextureKind::Checker,
                base_rgb: [235, 45, 225],
                alt_rgb: [250, 220, 40],
                jitter: 4,
                region: RegionSpec { x: (22, 24), y: (3, 5), w: (7, 7), h: (7, 7) },
            },
        ],
        classes: vec![
            ClassSpec { name: "meadow".into(), concepts: vec!["grass".into()] },
            ClassSpec { name: "harbor".into(), concepts: vec!["water".into()] },
        ],
        spurious: vec![SpuriousRule {
            class: "meadow".into(),
            concept: "beacon".into(),
            rho_train: 0.95,
            rho_test: 0.5,
        }],
    }
}

/// All three splits at the spec's per-class counts.
pub fn generate_all(spec: &SceneSpec) -> Result<(Dataset, Dataset, Dataset)> {
    Ok((
        generate(spec, spec.counts.train, Split::Train)?,
        generate(spec, spec.counts.validation, Split::Validation)?,
        generate(spec, spec.counts.test, Split::Test)?,
    ))
}

/// The benchmark's three splits: 400 train / 100 validation / 200 test per
/// class at 32x32.
pub fn benchmark_bias_suite(seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    generate_all(&bias_suite_spec(seed))
}

/// How many images of `class` contain at least one pixel of `concept_id`.
pub fn count_with_concept(ds: &Dataset, class: usize, concept_id: u8) -> usize {
    ds.masks
        .iter()
        .zip(ds.labels.iter())
        .filter(|(m, &l)| l == class && m.ids.contains(&concept_id))
        .count()
}

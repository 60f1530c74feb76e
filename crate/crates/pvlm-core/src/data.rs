//! Dataset manifests, tokenizer, and the synthetic compositional corpus.
//!
//! Scenes are small sets of attributed objects (class, color, size, texture,
//! region) derived deterministically from a seed. The image "pixels" are a
//! per-object-slot one-hot feature vector; captions are generated from a
//! fixed template grammar so that every attribute a caption names is true of
//! its scene. Short captions name a handful of attributes of one object;
//! long captions enumerate everything plus relational clauses.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoders::TokenSequence;

#[derive(Error, Debug)]
pub enum DataError {
    #[error("io error for {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty manifest")]
    EmptyManifest,
    #[error("long_fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("invalid image ref {0:?} (expected syn:<seed>)")]
    BadImageRef(String),
    #[error("corpus size must be >= 1")]
    EmptyCorpus,
}

// ---------------------------------------------------------------------------
// Attribute inventories
// ---------------------------------------------------------------------------

pub const CLASSES: [&str; 12] = [
    "cube", "sphere", "pyramid", "cylinder", "cone", "torus", "disk", "prism", "wedge", "arch",
    "ring", "slab",
];
pub const COLORS: [&str; 8] = [
    "red", "blue", "green", "yellow", "purple", "orange", "black", "white",
];
pub const SIZES: [&str; 3] = ["small", "medium", "large"];
pub const TEXTURES: [&str; 4] = ["matte", "glossy", "striped", "dotted"];
pub const REGIONS: [&str; 9] = [
    "northwest",
    "north",
    "northeast",
    "west",
    "center",
    "east",
    "southwest",
    "south",
    "southeast",
];

const FILLER: [&str; 75] = [
    "a",
    "photo",
    "of",
    "in",
    "the",
    "this",
    "image",
    "shows",
    "carefully",
    "arranged",
    "scene",
    "containing",
    "one",
    "two",
    "three",
    "distinct",
    "object",
    "objects",
    "placed",
    "across",
    "view",
    "is",
    "rendered",
    "tone",
    "with",
    "surface",
    "finish",
    "and",
    "it",
    "located",
    "area",
    "frame",
    "where",
    "appears",
    "clearly",
    "visible",
    "against",
    "plain",
    "background",
    "its",
    "texture",
    "catches",
    "light",
    "subtle",
    "way",
    "while",
    "coloring",
    "shape",
    "stands",
    "out",
    "within",
    "portion",
    "first",
    "second",
    "third",
    "sits",
    "apart",
    "from",
    "composition",
    "overall",
    "combines",
    "every",
    "single",
    "element",
    "into",
    "balanced",
    "quiet",
    "arrangement",
    "that",
    "rewards",
    "patient",
    "attentive",
    "viewer",
    "an",
    "there",
];

const ORDINALS: [&str; 3] = ["first", "second", "third"];
const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];

/// Attribute one-hot width per object slot.
const SLOT_DIM: usize =
    CLASSES.len() + COLORS.len() + SIZES.len() + TEXTURES.len() + REGIONS.len();
pub const MAX_OBJECTS: usize = 3;
/// Length of the synthetic image feature vector.
pub const IMAGE_FEATURE_DIM: usize = SLOT_DIM * MAX_OBJECTS;

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectAttrs {
    pub class: usize,
    pub color: usize,
    pub size: usize,
    pub texture: usize,
    pub region: usize,
}

/// A deterministic synthetic scene: same seed, same attributes, same
/// feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub objects: Vec<ObjectAttrs>,
    pub features: Vec<f64>,
}

impl SyntheticScene {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(1..=MAX_OBJECTS);
        let mut regions: Vec<usize> = (0..REGIONS.len()).collect();
        regions.shuffle(&mut rng);
        let mut objects: Vec<ObjectAttrs> = (0..n)
            .map(|i| ObjectAttrs {
                class: rng.gen_range(0..CLASSES.len()),
                color: rng.gen_range(0..COLORS.len()),
                size: rng.gen_range(0..SIZES.len()),
                texture: rng.gen_range(0..TEXTURES.len()),
                region: regions[i],
            })
            .collect();
        // canonical slot order so the feature layout is a pure function of
        // the attribute set
        objects.sort_by_key(|o| (o.region, o.class, o.color, o.size, o.texture));
        let features = features_of(&objects);
        SyntheticScene {
            seed,
            objects,
            features,
        }
    }

    /// All attribute words true of this scene.
    pub fn attribute_words(&self) -> Vec<&'static str> {
        let mut words = Vec::new();
        for o in &self.objects {
            words.push(CLASSES[o.class]);
            words.push(COLORS[o.color]);
            words.push(SIZES[o.size]);
            words.push(TEXTURES[o.texture]);
            words.push(REGIONS[o.region]);
        }
        words.sort_unstable();
        words.dedup();
        words
    }
}

fn features_of(objects: &[ObjectAttrs]) -> Vec<f64> {
    let mut f = vec![0.0; IMAGE_FEATURE_DIM];
    for (slot, o) in objects.iter().enumerate() {
        let base = slot * SLOT_DIM;
        let mut off = 0;
        f[base + off + o.class] = 1.0;
        off += CLASSES.len();
        f[base + off + o.color] = 1.0;
        off += COLORS.len();
        f[base + off + o.size] = 1.0;
        off += SIZES.len();
        f[base + off + o.texture] = 1.0;
        off += TEXTURES.len();
        f[base + off + o.region] = 1.0;
    }
    f
}

// ---------------------------------------------------------------------------
// Captions
// ---------------------------------------------------------------------------

fn short_caption(scene: &SyntheticScene, rng: &mut ChaCha8Rng) -> String {
    let o = &scene.objects[rng.gen_range(0..scene.objects.len())];
    let mut s = String::new();
    if rng.gen_bool(0.5) {
        s.push_str("a photo of ");
    }
    s.push_str("a ");
    // class is always named; 0-3 extra attributes widen the specificity range
    if rng.gen_bool(0.5) {
        let _ = write!(s, "{} ", SIZES[o.size]);
    }
    if rng.gen_bool(0.35) {
        let _ = write!(s, "{} ", TEXTURES[o.texture]);
    }
    if rng.gen_bool(0.6) {
        let _ = write!(s, "{} ", COLORS[o.color]);
    }
    s.push_str(CLASSES[o.class]);
    if rng.gen_bool(0.35) {
        let _ = write!(s, " in the {}", REGIONS[o.region]);
    }
    s
}

fn long_caption(scene: &SyntheticScene) -> String {
    let n = scene.objects.len();
    let mut s = format!(
        "this image shows a carefully arranged scene containing {} distinct {} placed across the view",
        COUNT_WORDS[n - 1],
        if n == 1 { "object" } else { "objects" }
    );
    for (i, o) in scene.objects.iter().enumerate() {
        let _ = write!(
            s,
            " the {} object is a {} {} rendered in a {} tone with a {} surface finish and it is \
             located in the {} area of the frame where it appears clearly visible against the \
             plain background",
            ORDINALS[i],
            SIZES[o.size],
            CLASSES[o.class],
            COLORS[o.color],
            TEXTURES[o.texture],
            REGIONS[o.region]
        );
        if n <= 2 {
            let _ = write!(
                s,
                " its {} texture catches the light in a subtle way while the {} coloring of the \
                 {} shape stands out within the {} portion of the scene",
                TEXTURES[o.texture],
                COLORS[o.color],
                SIZES[o.size],
                REGIONS[o.region]
            );
        }
    }
    for w in scene.objects.windows(2) {
        let _ = write!(
            s,
            " the {} in the {} sits apart from the {} in the {} across the composition",
            CLASSES[w[0].class],
            REGIONS[w[0].region],
            CLASSES[w[1].class],
            REGIONS[w[1].region]
        );
    }
    s.push_str(
        " overall the composition combines every single element into a carefully balanced and \
         quiet arrangement that rewards a patient and attentive viewer",
    );
    s
}

/// Number of distinct attribute words a caption names.
pub fn specificity(caption: &str) -> usize {
    let attrs: std::collections::HashSet<&str> = CLASSES
        .iter()
        .chain(COLORS.iter())
        .chain(SIZES.iter())
        .chain(TEXTURES.iter())
        .chain(REGIONS.iter())
        .copied()
        .collect();
    let mut seen = std::collections::HashSet::new();
    for w in split_words(caption) {
        if let Some(&a) = attrs.get(w.as_str()) {
            seen.insert(a);
        }
    }
    seen.len()
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const UNC_ID: usize = 3;
pub const RESERVED_IDS: usize = 4;

/// Lowercasing whitespace/punctuation tokenizer over the fixed synthetic
/// vocabulary. Reserved ids (padding, unknown, [CLS], [UNC]) are disjoint
/// from word ids.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

fn split_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

impl Tokenizer {
    /// The fixed vocabulary covering the synthetic grammar.
    pub fn synthetic() -> Self {
        let mut words: Vec<String> = CLASSES
            .iter()
            .chain(COLORS.iter())
            .chain(SIZES.iter())
            .chain(TEXTURES.iter())
            .chain(REGIONS.iter())
            .chain(FILLER.iter())
            .map(|s| s.to_string())
            .collect();
        words.sort_unstable();
        words.dedup();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), RESERVED_IDS + i))
            .collect();
        Tokenizer { words, index }
    }

    /// Total id space: reserved ids plus vocabulary words.
    pub fn vocab_size(&self) -> usize {
        RESERVED_IDS + self.words.len()
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    /// Lowercase, split on non-alphanumeric, truncate to ctx_len, pad to
    /// ctx_len, then append [CLS] and [UNC]. The mask covers real tokens
    /// plus the two specials.
    pub fn encode(&self, text: &str, ctx_len: usize) -> TokenSequence {
        assert!(ctx_len >= 1, "ctx_len must be >= 1");
        let words = split_words(text);
        let n = words.len().min(ctx_len);
        let mut ids = Vec::with_capacity(ctx_len + 2);
        let mut mask = Vec::with_capacity(ctx_len + 2);
        for w in &words[..n] {
            ids.push(self.id_of(w));
            mask.push(true);
        }
        while ids.len() < ctx_len {
            ids.push(PAD_ID);
            mask.push(false);
        }
        ids.push(CLS_ID);
        ids.push(UNC_ID);
        mask.push(true);
        mask.push(true);
        TokenSequence { ids, mask }
    }

    /// Inverse of `encode` for in-vocabulary text (padding and specials are
    /// dropped, unknown ids render as "<unk>").
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id != PAD_ID && id != CLS_ID && id != UNC_ID)
            .map(|&id| {
                if id >= RESERVED_IDS && id - RESERVED_IDS < self.words.len() {
                    self.words[id - RESERVED_IDS].as_str()
                } else {
                    "<unk>"
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRecord {
    pub image_ref: String,
    pub source: String,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct PairManifest {
    pub records: Vec<PairRecord>,
}

impl PairManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records filtered by source tag.
    pub fn by_source(&self, tag: &str) -> Vec<&PairRecord> {
        self.records.iter().filter(|r| r.source == tag).collect()
    }

    pub fn source_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self.records.iter().map(|r| r.source.clone()).collect();
        tags.sort_unstable();
        tags.dedup();
        tags
    }
}

/// Parses a "syn:<seed>" image ref into its scene feature vector.
pub fn resolve_features(image_ref: &str) -> Result<Vec<f64>, DataError> {
    let seed = image_ref
        .strip_prefix("syn:")
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(|| DataError::BadImageRef(image_ref.to_string()))?;
    Ok(SyntheticScene::from_seed(seed).features)
}

/// Deterministic synthetic corpus of (image, caption) pairs. A fraction of
/// records get long enumerating captions (source tag "long"); the rest get
/// short captions (source tag "short").
pub fn generate_corpus(n: usize, seed: u64, long_fraction: f64) -> Result<PairManifest, DataError> {
    if n < 1 {
        return Err(DataError::EmptyCorpus);
    }
    if !(0.0..=1.0).contains(&long_fraction) || !long_fraction.is_finite() {
        return Err(DataError::InvalidFraction(long_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_long = (long_fraction * n as f64).round() as usize;
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let scene_seed: u64 = rng.gen();
        let scene = SyntheticScene::from_seed(scene_seed);
        let long = i < n_long;
        let caption = if long {
            long_caption(&scene)
        } else {
            short_caption(&scene, &mut rng)
        };
        records.push(PairRecord {
            image_ref: format!("syn:{scene_seed}"),
            source: if long { "long" } else { "short" }.to_string(),
            caption,
        });
    }
    Ok(PairManifest { records })
}

/// Deterministic labeled single-object scenes for zero-shot classification;
/// the source tag carries the class name and the caption a class prompt.
pub fn generate_class_eval(n: usize, seed: u64) -> Result<PairManifest, DataError> {
    if n < 1 {
        return Err(DataError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n);
    while records.len() < n {
        let scene_seed: u64 = rng.gen();
        let scene = SyntheticScene::from_seed(scene_seed);
        if scene.objects.len() != 1 {
            continue;
        }
        let class = CLASSES[scene.objects[0].class];
        records.push(PairRecord {
            image_ref: format!("syn:{scene_seed}"),
            source: class.to_string(),
            caption: format!("a photo of a {class}"),
        });
    }
    Ok(PairManifest { records })
}

/// One prompt per object class, for zero-shot classification.
pub fn class_prompts() -> Vec<(String, String)> {
    CLASSES
        .iter()
        .map(|c| (c.to_string(), format!("a photo of a {c}")))
        .collect()
}

/// Manifest file format: UTF-8, one record per line, three tab-separated
/// fields: image_ref, source tag, caption. Caption comes last so embedded
/// tabs can never ambiguate; literal tabs in captions become spaces on save.
pub fn save_manifest(manifest: &PairManifest, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for r in &manifest.records {
        let caption = r.caption.replace('\t', " ").replace('\n', " ");
        let _ = writeln!(out, "{}\t{}\t{}", r.image_ref, r.source, caption);
    }
    std::fs::write(path, out).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_manifest(path: &Path) -> Result<PairManifest, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let image_ref = parts.next().unwrap_or_default();
        let source = parts.next().ok_or(DataError::Parse {
            line: i + 1,
            msg: "missing source field".into(),
        })?;
        let caption = parts.next().ok_or(DataError::Parse {
            line: i + 1,
            msg: "missing caption field".into(),
        })?;
        if image_ref.is_empty() || caption.is_empty() {
            return Err(DataError::Parse {
                line: i + 1,
                msg: "empty image_ref or caption".into(),
            });
        }
        records.push(PairRecord {
            image_ref: image_ref.to_string(),
            source: source.to_string(),
            caption: caption.to_string(),
        });
    }
    if records.is_empty() {
        return Err(DataError::EmptyManifest);
    }
    Ok(PairManifest { records })
}

//! Procedural world of (emotion, content, caption, image) quadruplets.
//!
//! Each emotion owns a color signature: a hue band, a brightness level, and
//! a noise amplitude. Images are a background in the signature hue plus one
//! content shape drawn in the complementary hue at the same luminance, so
//! the shape never disturbs the image-level emotion statistics: mean
//! luminance stays at the signature brightness and the chroma-weighted mean
//! hue stays on the signature hue. Captions come from a small fixed grammar
//! whose affective adjectives are drawn from a per-emotion lexicon.
//!
//! Everything is derived from a root seed through named substreams, one per
//! sample, so regeneration is bit-identical and independent of batching.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayView3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::rng::substream;

pub const IMAGE_SIZE: usize = 32;
pub const EMOTION_COUNT: usize = 8;
pub const CONCEPT_COUNT: usize = 8;
/// Words per emotion in the affective lexicon.
pub const LEXICON_PER_EMOTION: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("metadata error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionCategory {
    Amusement,
    Awe,
    Contentment,
    Excitement,
    Anger,
    Disgust,
    Fear,
    Sadness,
}

impl EmotionCategory {
    pub const ALL: [EmotionCategory; EMOTION_COUNT] = [
        EmotionCategory::Amusement,
        EmotionCategory::Awe,
        EmotionCategory::Contentment,
        EmotionCategory::Excitement,
        EmotionCategory::Anger,
        EmotionCategory::Disgust,
        EmotionCategory::Fear,
        EmotionCategory::Sadness,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&e| e == self).unwrap()
    }

    pub fn from_index(i: usize) -> EmotionCategory {
        Self::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionCategory::Amusement => "amusement",
            EmotionCategory::Awe => "awe",
            EmotionCategory::Contentment => "contentment",
            EmotionCategory::Excitement => "excitement",
            EmotionCategory::Anger => "anger",
            EmotionCategory::Disgust => "disgust",
            EmotionCategory::Fear => "fear",
            EmotionCategory::Sadness => "sadness",
        }
    }

    pub fn from_name(name: &str) -> Option<EmotionCategory> {
        Self::ALL.iter().copied().find(|e| e.name() == name)
    }
}

impl fmt::Display for EmotionCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContentConcept {
    Circle,
    Square,
    Triangle,
    Star,
    Cross,
    Ring,
    Stripes,
    Dots,
}

impl ContentConcept {
    pub const ALL: [ContentConcept; CONCEPT_COUNT] = [
        ContentConcept::Circle,
        ContentConcept::Square,
        ContentConcept::Triangle,
        ContentConcept::Star,
        ContentConcept::Cross,
        ContentConcept::Ring,
        ContentConcept::Stripes,
        ContentConcept::Dots,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }

    pub fn from_index(i: usize) -> ContentConcept {
        Self::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            ContentConcept::Circle => "circle",
            ContentConcept::Square => "square",
            ContentConcept::Triangle => "triangle",
            ContentConcept::Star => "star",
            ContentConcept::Cross => "cross",
            ContentConcept::Ring => "ring",
            ContentConcept::Stripes => "stripes",
            ContentConcept::Dots => "dots",
        }
    }

    pub fn from_name(name: &str) -> Option<ContentConcept> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }
}

impl fmt::Display for ContentConcept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Color signature that realizes an emotion in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmotionSignature {
    /// Background hue in degrees.
    pub hue_deg: f64,
    /// Target mean luminance in `[0, 1]`.
    pub brightness: f64,
    /// Half-width of the uniform per-channel pixel noise.
    pub noise_amp: f64,
}

/// Hues are spaced so every pair is at least 30 degrees apart on the
/// circle, and brightness roughly tracks valence (positive emotions
/// brighter than negative ones).
pub fn signature(e: EmotionCategory) -> EmotionSignature {
    let (hue_deg, brightness, noise_amp) = match e {
        EmotionCategory::Amusement => (50.0, 0.80, 0.02),
        EmotionCategory::Awe => (280.0, 0.65, 0.03),
        EmotionCategory::Contentment => (120.0, 0.70, 0.02),
        EmotionCategory::Excitement => (20.0, 0.75, 0.05),
        EmotionCategory::Anger => (345.0, 0.45, 0.06),
        EmotionCategory::Disgust => (90.0, 0.35, 0.05),
        EmotionCategory::Fear => (250.0, 0.20, 0.06),
        EmotionCategory::Sadness => (210.0, 0.30, 0.03),
    };
    EmotionSignature { hue_deg, brightness, noise_amp }
}

/// Affective adjectives, four per emotion, disjoint across emotions.
pub fn lexicon(e: EmotionCategory) -> [&'static str; LEXICON_PER_EMOTION] {
    match e {
        EmotionCategory::Amusement => ["playful", "funny", "giggly", "breezy"],
        EmotionCategory::Awe => ["vast", "grand", "towering", "majestic"],
        EmotionCategory::Contentment => ["calm", "cozy", "mellow", "serene"],
        EmotionCategory::Excitement => ["vivid", "electric", "blazing", "rushing"],
        EmotionCategory::Anger => ["burning", "harsh", "fierce", "seething"],
        EmotionCategory::Disgust => ["murky", "slimy", "rancid", "foul"],
        EmotionCategory::Fear => ["dark", "shadowy", "eerie", "dreadful"],
        EmotionCategory::Sadness => ["gray", "fading", "lonely", "mourning"],
    }
}

pub fn all_lexicon_words() -> Vec<&'static str> {
    EmotionCategory::ALL.iter().flat_map(|&e| lexicon(e)).collect()
}

/// Non-content, non-affective words the caption grammar uses.
pub const GLUE_WORDS: [&str; 8] = ["a", "the", "in", "scene", "looks", "very", "this", "has"];

// Caption grammar. Template 1 is the longest emotional form; sequence
// length bounds elsewhere assume nothing longer is ever produced.
const TEMPLATE_COUNT: usize = 4;

fn fill_template(idx: usize, concept: &str, adj: &str, adj2: &str) -> String {
    match idx {
        0 => format!("a {adj} {concept}"),
        1 => format!("a {adj} {concept} in a {adj2} scene"),
        2 => format!("the {concept} looks {adj}"),
        3 => format!("a very {adj} {concept}"),
        _ => unreachable!("template index out of range"),
    }
}

/// Longest caption the grammar can produce, in words.
pub const MAX_CAPTION_WORDS: usize = 8;

/// Caption with affective adjectives drawn from the emotion's lexicon.
pub fn emotional_caption(e: EmotionCategory, c: ContentConcept, rng: &mut ChaCha12Rng) -> String {
    let words = lexicon(e);
    let t = rng.random_range(0..TEMPLATE_COUNT);
    let adj = words[rng.random_range(0..words.len())];
    let adj2 = words[rng.random_range(0..words.len())];
    fill_template(t, c.name(), adj, adj2)
}

/// Emotion-free caption used as the unconditioned prompt.
pub fn neutral_caption(c: ContentConcept) -> String {
    format!("a {} in the scene", c.name())
}

/// Caption for base language-model pretraining: the same grammar, but
/// adjectives drawn uniformly from the full lexicon (plus the neutral
/// form), so the base model knows every word while associating none of
/// them with an emotion.
pub fn pretrain_caption(c: ContentConcept, rng: &mut ChaCha12Rng) -> String {
    let t = rng.random_range(0..TEMPLATE_COUNT + 1);
    if t == TEMPLATE_COUNT {
        return neutral_caption(c);
    }
    let words = all_lexicon_words();
    let adj = words[rng.random_range(0..words.len())];
    let adj2 = words[rng.random_range(0..words.len())];
    fill_template(t, c.name(), adj, adj2)
}

/// One labeled sample. The image is `[h, w, 3]` with 8-bit channels; the
/// stored bytes are the canonical form, so everything downstream of disk
/// and in memory sees identical pixels.
#[derive(Debug, Clone)]
pub struct Quadruplet {
    pub emotion: EmotionCategory,
    pub concept: ContentConcept,
    pub caption: String,
    pub image: Array3<u8>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Quadruplet>,
    pub test: Vec<Quadruplet>,
    pub seed: u64,
}

// Color machinery. Luminance is the Rec. 709 luma of linear-ish sRGB
// values in [0, 1]; close enough for a fully synthetic world.

pub fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = (h_deg.rem_euclid(360.0)) / 60.0;
    let i = h.floor() as i64 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

pub fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.2126 * r + 0.7152 * g + 0.0722 * b
}

fn unit_luma(h_deg: f64) -> f64 {
    let (r, g, b) = hsv_to_rgb(h_deg, 1.0, 1.0);
    luma(r, g, b)
}

/// Saturation and value that hit luminance `target` exactly at hue `h`.
/// Luma is linear in saturation at fixed value, so saturation is capped by
/// how dark the pure hue is and value follows in closed form.
fn solve_color(h_deg: f64, target_luma: f64) -> (f64, f64) {
    let kappa = 1.0 - unit_luma(h_deg);
    let s = if kappa > 1e-9 {
        (0.9 * (1.0 - target_luma) / kappa).min(0.55)
    } else {
        0.55
    };
    let v = target_luma / (1.0 - kappa * s);
    debug_assert!(v <= 1.0 + 1e-9);
    (s, v.min(1.0))
}

fn point_in_triangle(px: f64, py: f64, v: [(f64, f64); 3]) -> bool {
    let sign = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
        (a.0 - c.0) * (b.1 - c.1) - (b.0 - c.0) * (a.1 - c.1)
    };
    let d1 = sign((px, py), v[0], v[1]);
    let d2 = sign((px, py), v[1], v[2]);
    let d3 = sign((px, py), v[2], v[0]);
    let has_neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let has_pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(has_neg && has_pos)
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = poly.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Is the pixel at offset `(dx, dy)` from the shape center inside a shape
/// of half-extent `h`?
fn shape_covers(c: ContentConcept, dx: f64, dy: f64, h: f64) -> bool {
    match c {
        ContentConcept::Circle => dx * dx + dy * dy <= h * h,
        ContentConcept::Square => dx.abs() <= 0.85 * h && dy.abs() <= 0.85 * h,
        ContentConcept::Triangle => {
            point_in_triangle(dx, dy, [(0.0, -h), (-h, 0.8 * h), (h, 0.8 * h)])
        }
        ContentConcept::Star => {
            let mut poly = Vec::with_capacity(10);
            for k in 0..10 {
                let r = if k % 2 == 0 { h } else { 0.42 * h };
                let ang = std::f64::consts::PI * (k as f64 / 5.0) - std::f64::consts::FRAC_PI_2;
                poly.push((r * ang.cos(), r * ang.sin()));
            }
            point_in_polygon(dx, dy, &poly)
        }
        ContentConcept::Cross => {
            (dx.abs() <= 0.32 * h && dy.abs() <= h) || (dy.abs() <= 0.32 * h && dx.abs() <= h)
        }
        ContentConcept::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= h * h && d2 >= (0.55 * h) * (0.55 * h)
        }
        ContentConcept::Stripes => {
            if dx.abs() > h || dy.abs() > h {
                return false;
            }
            let band = ((dx + h) / (2.0 * h / 5.0)).floor() as i64;
            band % 2 == 0
        }
        ContentConcept::Dots => {
            for &ox in &[-0.55 * h, 0.55 * h] {
                for &oy in &[-0.55 * h, 0.55 * h] {
                    let (rx, ry) = (dx - ox, dy - oy);
                    if rx * rx + ry * ry <= (0.34 * h) * (0.34 * h) {
                        return true;
                    }
                }
            }
            false
        }
    }
}

/// Render one image. The shape's position and size jitter comes from
/// `rng`, as does the pixel noise.
pub fn render_image(e: EmotionCategory, c: ContentConcept, rng: &mut ChaCha12Rng) -> Array3<u8> {
    let sig = signature(e);
    let (bg_s, bg_v) = solve_color(sig.hue_deg, sig.brightness);
    let shape_hue = (sig.hue_deg + 180.0).rem_euclid(360.0);
    let (sh_s, sh_v) = solve_color(shape_hue, sig.brightness);
    let bg = hsv_to_rgb(sig.hue_deg, bg_s, bg_v);
    let sh = hsv_to_rgb(shape_hue, sh_s, sh_v);

    let n = IMAGE_SIZE as f64;
    let cx = n / 2.0 + rng.random_range(-2.0..2.0);
    let cy = n / 2.0 + rng.random_range(-2.0..2.0);
    let half = rng.random_range(7.0..10.0);

    let mut img = Array3::<u8>::zeros((IMAGE_SIZE, IMAGE_SIZE, 3));
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let base = if shape_covers(c, dx, dy, half) { sh } else { bg };
            for (ch, &v) in [base.0, base.1, base.2].iter().enumerate() {
                let noisy = v + rng.random_range(-sig.noise_amp..sig.noise_amp);
                img[[y, x, ch]] = (noisy.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    img
}

/// Mean Rec. 709 luminance over all pixels, in `[0, 1]`.
pub fn mean_luminance(img: &Array3<u8>) -> f64 {
    let (h, w, _) = img.dim();
    let mut acc = 0.0;
    for y in 0..h {
        for x in 0..w {
            acc += luma(
                img[[y, x, 0]] as f64 / 255.0,
                img[[y, x, 1]] as f64 / 255.0,
                img[[y, x, 2]] as f64 / 255.0,
            );
        }
    }
    acc / (h * w) as f64
}

/// Chroma-weighted circular mean hue in degrees, `None` for images with no
/// chroma anywhere (pure grayscale).
pub fn mean_hue_deg(img: &Array3<u8>) -> Option<f64> {
    let (h, w, _) = img.dim();
    let (mut sx, mut sy, mut wsum) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let r = img[[y, x, 0]] as f64 / 255.0;
            let g = img[[y, x, 1]] as f64 / 255.0;
            let b = img[[y, x, 2]] as f64 / 255.0;
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            let chroma = max - min;
            if chroma < 1e-9 {
                continue;
            }
            let hue = if max == r {
                60.0 * (((g - b) / chroma).rem_euclid(6.0))
            } else if max == g {
                60.0 * ((b - r) / chroma + 2.0)
            } else {
                60.0 * ((r - g) / chroma + 4.0)
            };
            let rad = hue.to_radians();
            sx += chroma * rad.cos();
            sy += chroma * rad.sin();
            wsum += chroma;
        }
    }
    if wsum < 1e-9 {
        None
    } else {
        Some(sy.atan2(sx).to_degrees().rem_euclid(360.0))
    }
}

/// Shortest angular distance between two hues, in `[0, 180]`.
pub fn circular_distance_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Generate a balanced dataset: sample `i` gets the `(i mod 64)`-th
/// (emotion, concept) cell, and all of its randomness comes from its own
/// substream, so any prefix of the dataset is stable under resizing.
pub fn generate_dataset(n_train: usize, n_test: usize, root_seed: u64) -> Dataset {
    let make = |split: &str, n: usize| -> Vec<Quadruplet> {
        (0..n)
            .map(|i| {
                let cell = i % (EMOTION_COUNT * CONCEPT_COUNT);
                let emotion = EmotionCategory::from_index(cell / CONCEPT_COUNT);
                let concept = ContentConcept::from_index(cell % CONCEPT_COUNT);
                let mut rng = substream(root_seed, &format!("synthworld/{split}"), i as u64);
                let caption = emotional_caption(emotion, concept, &mut rng);
                let image = render_image(emotion, concept, &mut rng);
                Quadruplet { emotion, concept, caption, image }
            })
            .collect()
    };
    Dataset {
        train: make("train", n_train),
        test: make("test", n_test),
        seed: root_seed,
    }
}

// On-disk layout: `meta.json`, `data.jsonl` (one record per sample, in
// order), and one PNG per image under `images/`.

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    n_train: usize,
    n_test: usize,
    image_size: usize,
    seed: u64,
    emotions: Vec<String>,
    concepts: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    split: String,
    index: usize,
    emotion: String,
    concept: String,
    caption: String,
    image: String,
}

fn image_rel_path(split: &str, index: usize) -> String {
    format!("images/{split}_{index:05}.png")
}

fn save_png(path: &Path, img: &Array3<u8>) -> Result<(), DataError> {
    let (h, w, _) = img.dim();
    let flat: Vec<u8> = img.iter().copied().collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, flat)
        .expect("image buffer size mismatch");
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn load_png(path: &Path) -> Result<Array3<u8>, DataError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let arr = Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
        .expect("decoded image size mismatch");
    Ok(arr)
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir.join("images"))?;
    let meta = DatasetMeta {
        n_train: ds.train.len(),
        n_test: ds.test.len(),
        image_size: IMAGE_SIZE,
        seed: ds.seed,
        emotions: EmotionCategory::ALL.iter().map(|e| e.name().to_string()).collect(),
        concepts: ContentConcept::ALL.iter().map(|c| c.name().to_string()).collect(),
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;

    let mut jsonl = std::io::BufWriter::new(std::fs::File::create(dir.join("data.jsonl"))?);
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        for (i, q) in samples.iter().enumerate() {
            let rel = image_rel_path(split, i);
            save_png(&dir.join(&rel), &q.image)?;
            let rec = Record {
                split: split.to_string(),
                index: i,
                emotion: q.emotion.name().to_string(),
                concept: q.concept.name().to_string(),
                caption: q.caption.clone(),
                image: rel,
            };
            serde_json::to_writer(&mut jsonl, &rec)?;
            jsonl.write_all(b"\n")?;
        }
    }
    jsonl.flush()?;
    Ok(())
}

/// Load and validate a dataset directory. This is also the entry point for
/// externally produced data that follows the same schema.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta: DatasetMeta = serde_json::from_slice(&std::fs::read(dir.join("meta.json"))?)?;
    if meta.image_size != IMAGE_SIZE {
        return Err(DataError::Invalid(format!(
            "image_size {} unsupported, expected {IMAGE_SIZE}",
            meta.image_size
        )));
    }
    let mut train: Vec<Quadruplet> = Vec::with_capacity(meta.n_train);
    let mut test: Vec<Quadruplet> = Vec::with_capacity(meta.n_test);
    let file = std::fs::File::open(dir.join("data.jsonl"))?;
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)?;
        let emotion = EmotionCategory::from_name(&rec.emotion)
            .ok_or_else(|| DataError::Invalid(format!("unknown emotion {:?}", rec.emotion)))?;
        let concept = ContentConcept::from_name(&rec.concept)
            .ok_or_else(|| DataError::Invalid(format!("unknown concept {:?}", rec.concept)))?;
        if rec.caption.trim().is_empty() {
            return Err(DataError::Invalid(format!(
                "empty caption for {} sample {}",
                rec.split, rec.index
            )));
        }
        let image = load_png(&dir.join(&rec.image))?;
        if image.dim() != (IMAGE_SIZE, IMAGE_SIZE, 3) {
            return Err(DataError::Invalid(format!(
                "image {} has shape {:?}, expected {}x{}",
                rec.image,
                image.dim(),
                IMAGE_SIZE,
                IMAGE_SIZE
            )));
        }
        let q = Quadruplet { emotion, concept, caption: rec.caption, image };
        let bucket = match rec.split.as_str() {
            "train" => &mut train,
            "test" => &mut test,
            other => return Err(DataError::Invalid(format!("unknown split {other:?}"))),
        };
        if rec.index != bucket.len() {
            return Err(DataError::Invalid(format!(
                "{} records out of order at index {}",
                rec.split, rec.index
            )));
        }
        bucket.push(q);
    }
    if train.len() != meta.n_train || test.len() != meta.n_test {
        return Err(DataError::Invalid(format!(
            "record counts {}/{} do not match meta {}/{}",
            train.len(),
            test.len(),
            meta.n_train,
            meta.n_test
        )));
    }
    Ok(Dataset { train, test, seed: meta.seed })
}

/// Alias for [`load_dataset`] emphasizing the import use case.
pub fn import_quadruplets(dir: &Path) -> Result<Dataset, DataError> {
    load_dataset(dir)
}

/// Path of the image file for a given sample, for callers that address
/// images directly.
pub fn image_path(dir: &Path, split: &str, index: usize) -> PathBuf {
    dir.join(image_rel_path(split, index))
}

/// `[h, w, 3]` bytes to `[3, h, w]` floats in `[-1, 1]`.
pub fn to_model_input(img: &Array3<u8>) -> Array3<f32> {
    let (h, w, _) = img.dim();
    let mut out = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[[c, y, x]] = img[[y, x, c]] as f32 / 255.0 * 2.0 - 1.0;
            }
        }
    }
    out
}

/// `[3, h, w]` floats in `[-1, 1]` back to `[h, w, 3]` bytes, clamping.
pub fn from_model_output(x: &ArrayView3<f32>) -> Array3<u8> {
    let (_, h, w) = x.dim();
    let mut out = Array3::<u8>::zeros((h, w, 3));
    for y in 0..h {
        for x2 in 0..w {
            for c in 0..3 {
                let v = (x[[c, y, x2]].clamp(-1.0, 1.0) + 1.0) / 2.0;
                out[[y, x2, c]] = (v * 255.0).round() as u8;
            }
        }
    }
    out
}

/// Save a `[h, w, 3]` byte image as PNG.
pub fn save_image_png(path: &Path, img: &Array3<u8>) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    save_png(path, img)
}

pub fn load_image_png(path: &Path) -> Result<Array3<u8>, DataError> {
    load_png(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hues_are_well_separated() {
        for (i, &a) in EmotionCategory::ALL.iter().enumerate() {
            for &b in &EmotionCategory::ALL[i + 1..] {
                let d = circular_distance_deg(signature(a).hue_deg, signature(b).hue_deg);
                assert!(d >= 30.0, "{a} and {b} hues only {d:.0} degrees apart");
            }
        }
    }

    #[test]
    fn lexicons_are_disjoint_and_exclude_other_word_classes() {
        let mut seen = std::collections::HashSet::new();
        for &e in &EmotionCategory::ALL {
            for w in lexicon(e) {
                assert!(seen.insert(w), "{w:?} appears in two lexicons");
                assert!(!GLUE_WORDS.contains(&w));
                assert!(ContentConcept::from_name(w).is_none());
            }
        }
        assert_eq!(seen.len(), EMOTION_COUNT * LEXICON_PER_EMOTION);
    }

    #[test]
    fn rendered_images_match_signature_statistics() {
        for &e in &EmotionCategory::ALL {
            let sig = signature(e);
            for &c in &ContentConcept::ALL {
                let mut rng = substream(11, "synthworld-test/stats", (e.index() * 8 + c.index()) as u64);
                let img = render_image(e, c, &mut rng);
                let lum = mean_luminance(&img);
                assert!(
                    (lum - sig.brightness).abs() < 0.04,
                    "{e}/{c}: luminance {lum:.3} vs target {:.3}",
                    sig.brightness
                );
                let hue = mean_hue_deg(&img).expect("image has chroma");
                let d = circular_distance_deg(hue, sig.hue_deg);
                assert!(d < 10.0, "{e}/{c}: hue {hue:.1} vs target {:.1}", sig.hue_deg);
            }
        }
    }

    #[test]
    fn shapes_cover_a_reasonable_fraction() {
        // Every concept must be visible but background-dominant, otherwise
        // the complementary hue would flip the mean hue.
        for &c in &ContentConcept::ALL {
            let mut covered = 0usize;
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let (dx, dy) = (x as f64 + 0.5 - 16.0, y as f64 + 0.5 - 16.0);
                    if shape_covers(c, dx, dy, 8.5) {
                        covered += 1;
                    }
                }
            }
            let frac = covered as f64 / (IMAGE_SIZE * IMAGE_SIZE) as f64;
            assert!(frac > 0.02 && frac < 0.35, "{c}: coverage {frac:.3}");
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let a = generate_dataset(64, 16, 42);
        let b = generate_dataset(64, 16, 42);
        for (qa, qb) in a.train.iter().zip(b.train.iter()) {
            assert_eq!(qa.caption, qb.caption);
            assert_eq!(qa.image, qb.image);
        }
        let c = generate_dataset(64, 16, 43);
        assert!(
            a.train.iter().zip(c.train.iter()).any(|(x, y)| x.image != y.image),
            "different seeds should differ"
        );

        let mut counts = [[0usize; CONCEPT_COUNT]; EMOTION_COUNT];
        for q in &a.train {
            counts[q.emotion.index()][q.concept.index()] += 1;
        }
        for row in &counts {
            for &n in row {
                assert_eq!(n, 1, "64 samples should fill each cell exactly once");
            }
        }
    }

    #[test]
    fn prefix_stability_under_resizing() {
        let small = generate_dataset(10, 4, 7);
        let large = generate_dataset(30, 8, 7);
        for i in 0..10 {
            assert_eq!(small.train[i].caption, large.train[i].caption);
            assert_eq!(small.train[i].image, large.train[i].image);
        }
    }

    #[test]
    fn captions_use_known_words_and_right_lexicon() {
        let vocab_words: std::collections::HashSet<&str> = GLUE_WORDS
            .iter()
            .copied()
            .chain(ContentConcept::ALL.iter().map(|c| c.name()))
            .chain(all_lexicon_words())
            .collect();
        let ds = generate_dataset(128, 0, 5);
        for q in &ds.train {
            let words: Vec<&str> = q.caption.split(' ').collect();
            assert!(words.len() <= MAX_CAPTION_WORDS);
            for w in &words {
                assert!(vocab_words.contains(w), "unknown word {w:?} in {:?}", q.caption);
            }
            assert!(words.contains(&q.concept.name()), "caption misses concept: {:?}", q.caption);
            let own = lexicon(q.emotion);
            assert!(
                words.iter().any(|w| own.contains(w)),
                "caption misses lexicon: {:?}",
                q.caption
            );
            for &other in &EmotionCategory::ALL {
                if other == q.emotion {
                    continue;
                }
                let foreign = lexicon(other);
                assert!(
                    !words.iter().any(|w| foreign.contains(w)),
                    "caption {:?} leaks {other} words",
                    q.caption
                );
            }
        }
    }

    #[test]
    fn neutral_captions_carry_no_lexicon_words() {
        let lex = all_lexicon_words();
        for &c in &ContentConcept::ALL {
            let cap = neutral_caption(c);
            for w in cap.split(' ') {
                assert!(!lex.contains(&w));
            }
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let ds = generate_dataset(8, 4, 99);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.seed, 99);
        assert_eq!(back.train.len(), 8);
        assert_eq!(back.test.len(), 4);
        for (a, b) in ds.train.iter().zip(back.train.iter()) {
            assert_eq!(a.emotion, b.emotion);
            assert_eq!(a.concept, b.concept);
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.image, b.image);
        }
    }

    #[test]
    fn loader_rejects_unknown_labels() {
        let ds = generate_dataset(2, 0, 1);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let jsonl = std::fs::read_to_string(dir.path().join("data.jsonl")).unwrap();
        std::fs::write(
            dir.path().join("data.jsonl"),
            jsonl.replace("\"amusement\"", "\"boredom\""),
        )
        .unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::Invalid(_))));
    }

    #[test]
    fn model_input_round_trip_is_lossless() {
        let mut rng = substream(3, "synthworld-test/roundtrip", 0);
        let img = render_image(EmotionCategory::Fear, ContentConcept::Ring, &mut rng);
        let x = to_model_input(&img);
        assert!(x.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        let back = from_model_output(&x.view());
        assert_eq!(img, back);
    }
}

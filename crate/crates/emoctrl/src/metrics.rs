//! Probe-based evaluation of generated images.
//!
//! Two small convolutional classifiers (an emotion probe and a content
//! probe) are trained on labeled synthetic renders and then frozen; every
//! reported number derives from them. Emotion accuracy and content
//! accuracy check the generator against its conditioning, their joint
//! accuracy checks both at once, perceptual diversity is the mean pairwise
//! cosine distance between probe features, and semantic clarity is the
//! probe's mean confidence. Probes must clear a 98% held-out accuracy gate
//! before any metric run; a probe that cannot classify clean renders would
//! make every downstream number meaningless.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView2, Axis, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::nn::{randn_fan_in, zeros, Adam, Tape, TensorId};
use crate::rng::{subseed, substream};
use crate::synthworld::{to_model_input, ContentConcept, Dataset, EmotionCategory, IMAGE_SIZE};

/// Minimum held-out accuracy both probes must reach before they are
/// trusted to score anything.
pub const PROBE_GATE: f64 = 0.98;

/// Images scored per forward pass; bounds peak memory, never the result.
const PROBE_CHUNK: usize = 128;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{probe} probe reached {accuracy:.4} held-out accuracy, below the {floor:.2} gate")]
    GateFailed { probe: &'static str, accuracy: f64, floor: f64 },
    #[error("metric over an empty batch")]
    EmptyBatch,
    #[error("diversity needs at least 2 images, got {0}")]
    NotEnoughImages(usize),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub classes: usize,
    /// Channels after each of the three stride-2 convolutions.
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    /// Width of the penultimate feature layer.
    pub feat_dim: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { classes: 8, c1: 16, c2: 32, c3: 48, feat_dim: 96 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig { steps: 600, batch_size: 64, lr: 3e-3 }
    }
}

/// Three stride-2 convolutions, then two linear layers. The post-ReLU
/// output of the first linear layer doubles as the feature embedding for
/// the diversity metric. Probes run in `f32` only; their gradient path
/// reuses ops that are finite-difference checked elsewhere.
#[derive(Debug)]
pub struct ProbeClassifier {
    pub cfg: ProbeConfig,
    conv1_w: ArrayD<f32>,
    conv1_b: ArrayD<f32>,
    conv2_w: ArrayD<f32>,
    conv2_b: ArrayD<f32>,
    conv3_w: ArrayD<f32>,
    conv3_b: ArrayD<f32>,
    fc1_w: ArrayD<f32>,
    fc1_b: ArrayD<f32>,
    fc2_w: ArrayD<f32>,
    fc2_b: ArrayD<f32>,
}

struct StagedProbe {
    ids: Vec<TensorId>,
}

impl ProbeClassifier {
    const NAMES: [&'static str; 10] = [
        "conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b", "fc1_w", "fc1_b",
        "fc2_w", "fc2_b",
    ];

    pub fn new(cfg: ProbeConfig, seed: u64) -> Self {
        assert!(IMAGE_SIZE % 8 == 0, "three stride-2 convs need a multiple of 8");
        let mut rng = substream(seed, "metrics/probe-init", 0);
        let flat = cfg.c3 * (IMAGE_SIZE / 8) * (IMAGE_SIZE / 8);
        ProbeClassifier {
            conv1_w: randn_fan_in(&[cfg.c1, 3, 3, 3], 3 * 9, &mut rng),
            conv1_b: zeros(&[cfg.c1]),
            conv2_w: randn_fan_in(&[cfg.c2, cfg.c1, 3, 3], cfg.c1 * 9, &mut rng),
            conv2_b: zeros(&[cfg.c2]),
            conv3_w: randn_fan_in(&[cfg.c3, cfg.c2, 3, 3], cfg.c2 * 9, &mut rng),
            conv3_b: zeros(&[cfg.c3]),
            fc1_w: randn_fan_in(&[flat, cfg.feat_dim], flat, &mut rng),
            fc1_b: zeros(&[cfg.feat_dim]),
            fc2_w: randn_fan_in(&[cfg.feat_dim, cfg.classes], cfg.feat_dim, &mut rng),
            fc2_b: zeros(&[cfg.classes]),
            cfg,
        }
    }

    fn flat_dim(&self) -> usize {
        self.cfg.c3 * (IMAGE_SIZE / 8) * (IMAGE_SIZE / 8)
    }

    fn fields(&self) -> Vec<&ArrayD<f32>> {
        vec![
            &self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b, &self.conv3_w,
            &self.conv3_b, &self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b,
        ]
    }

    fn fields_mut(&mut self) -> Vec<&mut ArrayD<f32>> {
        vec![
            &mut self.conv1_w, &mut self.conv1_b, &mut self.conv2_w, &mut self.conv2_b,
            &mut self.conv3_w, &mut self.conv3_b, &mut self.fc1_w, &mut self.fc1_b,
            &mut self.fc2_w, &mut self.fc2_b,
        ]
    }

    fn stage(&self, tape: &mut Tape<f32>, trainable: bool) -> StagedProbe {
        let ids = self
            .fields()
            .into_iter()
            .map(|w| {
                if trainable {
                    tape.param(w.clone())
                } else {
                    tape.constant(w.clone())
                }
            })
            .collect();
        StagedProbe { ids }
    }

    /// Returns (features, logits) for a staged `[b, 3, h, w]` batch.
    fn forward_on(&self, tape: &mut Tape<f32>, sp: &StagedProbe, x: TensorId) -> (TensorId, TensorId) {
        let b = tape.value(x).shape()[0];
        let h = tape.conv2d(x, sp.ids[0], 2, 1);
        let h = tape.add_bias4(h, sp.ids[1]);
        let h = tape.relu(h);
        let h = tape.conv2d(h, sp.ids[2], 2, 1);
        let h = tape.add_bias4(h, sp.ids[3]);
        let h = tape.relu(h);
        let h = tape.conv2d(h, sp.ids[4], 2, 1);
        let h = tape.add_bias4(h, sp.ids[5]);
        let h = tape.relu(h);
        let flat = tape.reshape(h, &[b, self.flat_dim()]);
        let h = tape.matmul(flat, sp.ids[6]);
        let h = tape.add_row(h, sp.ids[7]);
        let feats = tape.relu(h);
        let logits = tape.matmul(feats, sp.ids[8]);
        let logits = tape.add_row(logits, sp.ids[9]);
        (feats, logits)
    }

    /// One inference pass over every image: `(features, logits)` rows in
    /// input order, chunked so batch size never affects memory or output.
    fn run(&self, images: &[Array3<u8>]) -> Result<(Array2<f64>, Array2<f64>), MetricError> {
        if images.is_empty() {
            return Err(MetricError::EmptyBatch);
        }
        let n = images.len();
        let mut feats = Array2::<f64>::zeros((n, self.cfg.feat_dim));
        let mut logits = Array2::<f64>::zeros((n, self.cfg.classes));
        for (ci, chunk) in images.chunks(PROBE_CHUNK).enumerate() {
            let x = batch_input(chunk);
            let mut tape = Tape::new_inference();
            let sp = self.stage(&mut tape, false);
            let xid = tape.constant(x.into_dyn());
            let (fid, lid) = self.forward_on(&mut tape, &sp, xid);
            let fv = tape.value(fid).view().into_dimensionality::<Ix2>().unwrap().to_owned();
            let lv = tape.value(lid).view().into_dimensionality::<Ix2>().unwrap().to_owned();
            for (bi, (frow, lrow)) in fv.outer_iter().zip(lv.outer_iter()).enumerate() {
                let row = ci * PROBE_CHUNK + bi;
                for (j, &v) in frow.iter().enumerate() {
                    feats[[row, j]] = v as f64;
                }
                for (j, &v) in lrow.iter().enumerate() {
                    logits[[row, j]] = v as f64;
                }
            }
        }
        Ok((feats, logits))
    }

    /// Raw class scores, one row per image.
    pub fn logits(&self, images: &[Array3<u8>]) -> Result<Array2<f64>, MetricError> {
        Ok(self.run(images)?.1)
    }

    /// Penultimate-layer embeddings, one row per image.
    pub fn features(&self, images: &[Array3<u8>]) -> Result<Array2<f64>, MetricError> {
        Ok(self.run(images)?.0)
    }

    /// Predicted class per image; score ties resolve to the lowest id.
    pub fn predict(&self, images: &[Array3<u8>]) -> Result<Vec<usize>, MetricError> {
        let logits = self.logits(images)?;
        Ok(logits
            .outer_iter()
            .map(|row| argmax_first(row.as_slice().unwrap()).unwrap())
            .collect())
    }

    /// Fraction of images whose predicted class equals its label.
    pub fn accuracy(&self, images: &[Array3<u8>], labels: &[usize]) -> Result<f64, MetricError> {
        if images.len() != labels.len() {
            return Err(MetricError::Invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let pred = self.predict(images)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// `[h, w, 3]` byte images stacked into one `[b, 3, h, w]` model batch.
fn batch_input(images: &[Array3<u8>]) -> Array4<f32> {
    let (h, w, _) = images[0].dim();
    let mut out = Array4::<f32>::zeros((images.len(), 3, h, w));
    for (bi, img) in images.iter().enumerate() {
        assert_eq!(img.dim(), (h, w, 3), "mixed image sizes in one batch");
        out.index_axis_mut(Axis(0), bi).assign(&to_model_input(img));
    }
    out
}

fn train_probe(
    inputs: &[Array3<u8>],
    labels: &[usize],
    pcfg: &ProbeConfig,
    tcfg: &ProbeTrainConfig,
    seed: u64,
    stream: &str,
) -> ProbeClassifier {
    let n = inputs.len();
    let mut probe = ProbeClassifier::new(pcfg.clone(), subseed(seed, stream, 0));
    let mut opt = Adam::new(tcfg.lr);
    let bs = tcfg.batch_size.min(n);
    for step in 0..tcfg.steps {
        // Cosine decay to a tenth of the base rate; the tail settles the
        // probe into a sharper optimum than a flat rate reaches.
        let frac = step as f64 / tcfg.steps.max(1) as f64;
        opt.set_lr(tcfg.lr * (0.55 + 0.45 * (std::f64::consts::PI * frac).cos()));
        let mut rng = substream(seed, stream, 1 + step as u64);
        let mut batch = Vec::with_capacity(bs);
        let mut targets = Vec::with_capacity(bs);
        for _ in 0..bs {
            let i = rng.random_range(0..n);
            // Mirror augmentation; every concept is left-right symmetric
            // (triangles and stars point up, so only this axis is safe).
            let img = if rng.random::<bool>() {
                inputs[i].slice(ndarray::s![.., ..;-1, ..]).to_owned()
            } else {
                inputs[i].clone()
            };
            batch.push(img);
            targets.push(labels[i]);
        }
        let x = batch_input(&batch);
        let mut tape = Tape::new();
        let sp = probe.stage(&mut tape, true);
        let xid = tape.constant(x.into_dyn());
        let (_, logits) = probe.forward_on(&mut tape, &sp, xid);
        let loss = tape.cross_entropy_mean(logits, &targets);
        tape.backward(loss);
        let grads: Vec<ArrayD<f32>> = sp.ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();
        opt.step(&mut probe.fields_mut(), &grads);
    }
    probe
}

/// Trains the emotion and content probes on the train split and gates both
/// on the test split. A probe below [`PROBE_GATE`] aborts the run with its
/// measured accuracy; nothing downstream may score images with it.
pub fn train_probes(
    dataset: &Dataset,
    pcfg: &ProbeConfig,
    tcfg: &ProbeTrainConfig,
    seed: u64,
) -> Result<(ProbeClassifier, ProbeClassifier), MetricError> {
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(MetricError::Invalid("probe training needs both dataset splits".into()));
    }
    let train_images: Vec<Array3<u8>> = dataset.train.iter().map(|q| q.image.clone()).collect();
    let emo_labels: Vec<usize> = dataset.train.iter().map(|q| q.emotion.index()).collect();
    let con_labels: Vec<usize> = dataset.train.iter().map(|q| q.concept.index()).collect();
    let test_images: Vec<Array3<u8>> = dataset.test.iter().map(|q| q.image.clone()).collect();
    let emo_test: Vec<usize> = dataset.test.iter().map(|q| q.emotion.index()).collect();
    let con_test: Vec<usize> = dataset.test.iter().map(|q| q.concept.index()).collect();

    let emotion = train_probe(&train_images, &emo_labels, pcfg, tcfg, seed, "metrics/emotion-probe");
    let content = train_probe(&train_images, &con_labels, pcfg, tcfg, seed, "metrics/content-probe");

    let emo_acc = emotion.accuracy(&test_images, &emo_test)?;
    if emo_acc < PROBE_GATE {
        return Err(MetricError::GateFailed { probe: "emotion", accuracy: emo_acc, floor: PROBE_GATE });
    }
    let con_acc = content.accuracy(&test_images, &con_test)?;
    if con_acc < PROBE_GATE {
        return Err(MetricError::GateFailed { probe: "content", accuracy: con_acc, floor: PROBE_GATE });
    }
    Ok((emotion, content))
}

/// Fraction of images the emotion probe assigns to their target emotion.
pub fn emo_accuracy(
    probe: &ProbeClassifier,
    images: &[Array3<u8>],
    targets: &[EmotionCategory],
) -> Result<f64, MetricError> {
    let labels: Vec<usize> = targets.iter().map(|e| e.index()).collect();
    probe.accuracy(images, &labels)
}

/// Fraction of images the content probe assigns to their target concept.
pub fn clip_accuracy(
    probe: &ProbeClassifier,
    images: &[Array3<u8>],
    targets: &[ContentConcept],
) -> Result<f64, MetricError> {
    let labels: Vec<usize> = targets.iter().map(|c| c.index()).collect();
    probe.accuracy(images, &labels)
}

/// Fraction of images where both probes are simultaneously right. Never
/// exceeds either single accuracy on the same batch.
pub fn joint_accuracy(
    emotion_probe: &ProbeClassifier,
    content_probe: &ProbeClassifier,
    images: &[Array3<u8>],
    targets: &[(EmotionCategory, ContentConcept)],
) -> Result<f64, MetricError> {
    if images.len() != targets.len() {
        return Err(MetricError::Invalid(format!(
            "{} images but {} targets",
            images.len(),
            targets.len()
        )));
    }
    if images.is_empty() {
        return Err(MetricError::EmptyBatch);
    }
    let pe = emotion_probe.predict(images)?;
    let pc = content_probe.predict(images)?;
    let hits = targets
        .iter()
        .zip(pe.iter().zip(&pc))
        .filter(|((e, c), (pe, pc))| e.index() == **pe && c.index() == **pc)
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Mean cosine distance between unit-normalized feature rows over all
/// unordered pairs. Identical rows contribute exactly zero; a zero-norm
/// row is treated as orthogonal to everything else.
pub fn mean_pairwise_cosine_distance(feats: ArrayView2<f64>) -> Result<f64, MetricError> {
    let n = feats.nrows();
    if n < 2 {
        return Err(MetricError::NotEnoughImages(n));
    }
    let mut unit = feats.to_owned();
    for mut row in unit.outer_iter_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 0.0 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = if feats.row(i) == feats.row(j) {
                0.0
            } else {
                (1.0 - unit.row(i).dot(&unit.row(j))).clamp(0.0, 2.0)
            };
            total += d;
        }
    }
    Ok(total / (n * (n - 1) / 2) as f64)
}

/// Diversity of a batch: mean pairwise cosine distance between emotion
/// probe features. In `[0, 2]`; zero when every image embeds identically.
pub fn perceptual_diversity(
    probe: &ProbeClassifier,
    images: &[Array3<u8>],
) -> Result<f64, MetricError> {
    if images.len() < 2 {
        return Err(MetricError::NotEnoughImages(images.len()));
    }
    let feats = probe.features(images)?;
    mean_pairwise_cosine_distance(feats.view())
}

/// Mean over images of the content probe's top softmax probability. In
/// `[1/classes, 1]`; higher means the probe is more certain what it sees.
pub fn semantic_clarity(
    probe: &ProbeClassifier,
    images: &[Array3<u8>],
) -> Result<f64, MetricError> {
    let logits = probe.logits(images)?;
    let mut total = 0.0;
    for row in logits.outer_iter() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row.iter() {
            z += (v - m).exp();
        }
        total += 1.0 / z;
    }
    Ok(total / logits.nrows() as f64)
}

/// One evaluated configuration. Construction checks every range and the
/// joint-accuracy bound, so a report in hand is always internally
/// consistent.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub config_label: String,
    pub n: usize,
    pub emo_a: f64,
    pub clip_a: f64,
    pub ec_a: f64,
    pub diversity: f64,
    pub sem_c: f64,
}

impl MetricReport {
    pub fn new(
        config_label: impl Into<String>,
        n: usize,
        emo_a: f64,
        clip_a: f64,
        ec_a: f64,
        diversity: f64,
        sem_c: f64,
    ) -> Result<Self, MetricError> {
        for (name, v) in [("emo_a", emo_a), ("clip_a", clip_a), ("ec_a", ec_a), ("sem_c", sem_c)] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(MetricError::Invalid(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(0.0..=2.0).contains(&diversity) || !diversity.is_finite() {
            return Err(MetricError::Invalid(format!("diversity = {diversity} outside [0, 2]")));
        }
        if ec_a > emo_a.min(clip_a) {
            return Err(MetricError::Invalid(format!(
                "joint accuracy {ec_a} exceeds min({emo_a}, {clip_a})"
            )));
        }
        if n == 0 {
            return Err(MetricError::Invalid("report over zero samples".into()));
        }
        Ok(MetricReport { config_label: config_label.into(), n, emo_a, clip_a, ec_a, diversity, sem_c })
    }
}

/// Scores one batch with both probes and packs the result.
pub fn evaluate(
    emotion_probe: &ProbeClassifier,
    content_probe: &ProbeClassifier,
    images: &[Array3<u8>],
    targets: &[(EmotionCategory, ContentConcept)],
    config_label: &str,
) -> Result<MetricReport, MetricError> {
    let emotions: Vec<EmotionCategory> = targets.iter().map(|t| t.0).collect();
    let concepts: Vec<ContentConcept> = targets.iter().map(|t| t.1).collect();
    let emo_a = emo_accuracy(emotion_probe, images, &emotions)?;
    let clip_a = clip_accuracy(content_probe, images, &concepts)?;
    let ec_a = joint_accuracy(emotion_probe, content_probe, images, targets)?;
    let diversity = perceptual_diversity(emotion_probe, images)?;
    let sem_c = semantic_clarity(content_probe, images)?;
    MetricReport::new(config_label, images.len(), emo_a, clip_a, ec_a, diversity, sem_c)
}

pub const CSV_HEADER: &str = "config_label,n,emo_a,clip_a,ec_a,diversity,sem_c,seed";

/// Appends one report row to a CSV file, writing the header first when the
/// file does not exist yet. Labels must be plain (no comma, quote, or
/// newline) so the format stays trivially parseable.
pub fn append_csv(path: &Path, report: &MetricReport, seed: u64) -> Result<(), MetricError> {
    if report.config_label.contains([',', '"', '\n']) {
        return Err(MetricError::Invalid(format!(
            "label {:?} cannot appear in a CSV cell",
            report.config_label
        )));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{CSV_HEADER}")?;
    }
    writeln!(
        f,
        "{},{},{},{},{},{},{},{}",
        report.config_label,
        report.n,
        report.emo_a,
        report.clip_a,
        report.ec_a,
        report.diversity,
        report.sem_c,
        seed
    )?;
    Ok(())
}

/// Saves both probes into one checkpoint file.
pub fn save_probes(
    path: &Path,
    emotion: &ProbeClassifier,
    content: &ProbeClassifier,
) -> Result<(), MetricError> {
    let meta = serde_json::json!({"emotion": emotion.cfg, "content": content.cfg});
    let mut entries: Vec<(String, &ArrayD<f32>)> = Vec::new();
    for (prefix, probe) in [("emotion", emotion), ("content", content)] {
        for (name, t) in ProbeClassifier::NAMES.iter().zip(probe.fields()) {
            entries.push((format!("{prefix}/{name}"), t));
        }
    }
    let refs: Vec<(&str, &ArrayD<f32>)> = entries.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    checkpoint::save(path, "probes", &meta, &refs)?;
    Ok(())
}

pub fn load_probes(path: &Path) -> Result<(ProbeClassifier, ProbeClassifier), MetricError> {
    let ck = checkpoint::load(path)?;
    if ck.kind != "probes" {
        return Err(MetricError::Invalid(format!("checkpoint kind {:?}", ck.kind)));
    }
    let mut out = Vec::with_capacity(2);
    for prefix in ["emotion", "content"] {
        let cfg: ProbeConfig = serde_json::from_value(ck.meta[prefix].clone())
            .map_err(|e| MetricError::Invalid(format!("{prefix} probe config: {e}")))?;
        let mut probe = ProbeClassifier::new(cfg, 0);
        for (name, field) in ProbeClassifier::NAMES.iter().zip(probe.fields_mut()) {
            let t = ck.tensor(&format!("{prefix}/{name}"))?;
            if t.shape() != field.shape() {
                return Err(MetricError::Invalid(format!(
                    "tensor {prefix}/{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    field.shape()
                )));
            }
            *field = t.clone();
        }
        out.push(probe);
    }
    let content = out.pop().unwrap();
    let emotion = out.pop().unwrap();
    Ok((emotion, content))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_dataset, render_image};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// A probe whose every weight is zero except the final bias, so every
    /// image maps to the same known logits.
    fn rigged_probe(bias: [f64; 8]) -> ProbeClassifier {
        let mut p = ProbeClassifier::new(ProbeConfig::default(), 0);
        for f in p.fields_mut() {
            f.fill(0.0);
        }
        for (slot, &b) in p.fc2_b.iter_mut().zip(bias.iter()) {
            *slot = b as f32;
        }
        p
    }

    fn renders(pairs: &[(usize, usize)], seed: u64) -> Vec<Array3<u8>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        pairs
            .iter()
            .map(|&(e, c)| {
                render_image(EmotionCategory::from_index(e), ContentConcept::from_index(c), &mut rng)
            })
            .collect()
    }

    #[test]
    fn argmax_prefers_the_lowest_index_on_ties() {
        assert_eq!(argmax_first(&[1.0, 3.0, 3.0]), Some(1));
        assert_eq!(argmax_first(&[2.0, 2.0]), Some(0));
        assert_eq!(argmax_first(&[-1.0]), Some(0));
        assert_eq!(argmax_first(&[]), None);
    }

    #[test]
    fn constant_probe_scores_match_hand_counts() {
        let mut bias = [0.0; 8];
        bias[2] = 5.0;
        let emo_probe = rigged_probe(bias);
        let mut bias = [0.0; 8];
        bias[5] = 5.0;
        let con_probe = rigged_probe(bias);

        let imgs = renders(&[(0, 0), (1, 1), (2, 2)], 9);
        let two = EmotionCategory::from_index(2);
        let five = ContentConcept::from_index(5);

        assert_eq!(emo_accuracy(&emo_probe, &imgs, &[two; 3]).unwrap(), 1.0);
        assert_eq!(emo_accuracy(&emo_probe, &imgs[..1], &[two]).unwrap(), 1.0);
        let off = EmotionCategory::from_index(3);
        assert_eq!(emo_accuracy(&emo_probe, &imgs, &[off; 3]).unwrap(), 0.0);
        assert_eq!(clip_accuracy(&con_probe, &imgs, &[five; 3]).unwrap(), 1.0);

        // Emotion always right, content always wrong: the joint score is 0.
        let wrong = ContentConcept::from_index(4);
        assert_eq!(joint_accuracy(&emo_probe, &con_probe, &imgs, &[(two, wrong); 3]).unwrap(), 0.0);
        assert_eq!(joint_accuracy(&emo_probe, &con_probe, &imgs, &[(two, five); 3]).unwrap(), 1.0);

        // All-equal logits resolve to class 0 on every image.
        let flat = rigged_probe([0.0; 8]);
        assert_eq!(flat.predict(&imgs).unwrap(), vec![0, 0, 0]);
        // Uniform logits give exactly 1/8 clarity; a saturated bias gives 1.
        assert!((semantic_clarity(&flat, &imgs).unwrap() - 0.125).abs() < 1e-12);
        let hot = rigged_probe([50.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let c = semantic_clarity(&hot, &imgs).unwrap();
        assert!(c > 0.999_999 && c <= 1.0);
    }

    #[test]
    fn empty_and_mismatched_batches_are_rejected() {
        let p = rigged_probe([0.0; 8]);
        let img = renders(&[(0, 0)], 1);
        assert!(matches!(emo_accuracy(&p, &[], &[]), Err(MetricError::EmptyBatch)));
        assert!(matches!(semantic_clarity(&p, &[]), Err(MetricError::EmptyBatch)));
        assert!(matches!(joint_accuracy(&p, &p, &[], &[]), Err(MetricError::EmptyBatch)));
        assert!(matches!(
            perceptual_diversity(&p, &img),
            Err(MetricError::NotEnoughImages(1))
        ));
        assert!(matches!(
            p.accuracy(&img, &[0, 1]),
            Err(MetricError::Invalid(_))
        ));
    }

    #[test]
    fn diversity_matches_a_brute_force_pair_loop() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut feats = Array2::<f64>::zeros((10, 6));
        for v in feats.iter_mut() {
            *v = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let got = mean_pairwise_cosine_distance(feats.view()).unwrap();

        // Independent recomputation: normalize per pair, straight loop.
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..10 {
            for j in i + 1..10 {
                let u = feats.row(i);
                let v = feats.row(j);
                let nu = u.dot(&u).sqrt();
                let nv = v.dot(&v).sqrt();
                total += 1.0 - u.dot(&v) / (nu * nv);
                pairs += 1;
            }
        }
        let want = total / pairs as f64;
        assert!((got - want).abs() < 1e-9, "got {got}, brute force {want}");
        assert!((0.0..=2.0).contains(&got));

        // Row order never matters: the pair set is unordered.
        let mut shuffled = feats.clone();
        for i in 0..5 {
            let a = shuffled.row(i).to_owned();
            let b = shuffled.row(9 - i).to_owned();
            shuffled.row_mut(i).assign(&b);
            shuffled.row_mut(9 - i).assign(&a);
        }
        let re = mean_pairwise_cosine_distance(shuffled.view()).unwrap();
        assert!((got - re).abs() < 1e-12);
    }

    #[test]
    fn diversity_hits_its_bounds() {
        let same =
            Array2::<f64>::from_shape_vec((3, 2), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(mean_pairwise_cosine_distance(same.view()).unwrap(), 0.0);
        let opposed = Array2::<f64>::from_shape_vec((2, 2), vec![1.0, 2.0, -1.0, -2.0]).unwrap();
        let d = mean_pairwise_cosine_distance(opposed.view()).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        let one = Array2::<f64>::zeros((1, 4));
        assert!(matches!(
            mean_pairwise_cosine_distance(one.view()),
            Err(MetricError::NotEnoughImages(1))
        ));
    }

    #[test]
    fn identical_images_have_zero_diversity() {
        let probe = ProbeClassifier::new(ProbeConfig::default(), 7);
        let img = renders(&[(3, 4)], 11).pop().unwrap();
        let copies = vec![img.clone(), img.clone(), img];
        assert_eq!(perceptual_diversity(&probe, &copies).unwrap(), 0.0);

        let distinct = renders(&[(0, 0), (6, 3)], 12);
        let d = perceptual_diversity(&probe, &distinct).unwrap();
        assert!(d > 0.0 && d <= 2.0, "distinct renders should spread, got {d}");
    }

    #[test]
    fn semantic_clarity_is_the_mean_of_row_maxima() {
        let probe = ProbeClassifier::new(ProbeConfig::default(), 21);
        let imgs = renders(&[(0, 1), (4, 2), (7, 7), (2, 5)], 13);
        let got = semantic_clarity(&probe, &imgs).unwrap();
        let logits = probe.logits(&imgs).unwrap();
        let mut want = 0.0;
        for row in logits.outer_iter() {
            let exps: Vec<f64> = row.iter().map(|&v| v.exp()).collect();
            let z: f64 = exps.iter().sum();
            want += exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / z;
        }
        want /= logits.nrows() as f64;
        assert!((got - want).abs() < 1e-12, "got {got}, recomputed {want}");
        assert!((0.125..=1.0).contains(&got));
    }

    #[test]
    fn accuracies_ignore_batch_order() {
        let probe = ProbeClassifier::new(ProbeConfig::default(), 5);
        let pairs: Vec<(usize, usize)> = (0..8).map(|i| (i, (i + 3) % 8)).collect();
        let imgs = renders(&pairs, 17);
        let emos: Vec<EmotionCategory> =
            pairs.iter().map(|&(e, _)| EmotionCategory::from_index(e)).collect();
        let fwd = emo_accuracy(&probe, &imgs, &emos).unwrap();
        let mut r_imgs = imgs.clone();
        let mut r_emos = emos.clone();
        r_imgs.reverse();
        r_emos.reverse();
        assert_eq!(fwd, emo_accuracy(&probe, &r_imgs, &r_emos).unwrap());
    }

    #[test]
    fn report_construction_enforces_bounds() {
        let ok = MetricReport::new("both", 96, 0.9, 0.8, 0.75, 0.4, 0.6).unwrap();
        assert_eq!(ok.config_label, "both");
        let json = serde_json::to_string(&ok).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(ok, back);

        assert!(MetricReport::new("x", 10, 0.5, 0.8, 0.6, 0.1, 0.5).is_err());
        assert!(MetricReport::new("x", 10, 1.2, 0.8, 0.6, 0.1, 0.5).is_err());
        assert!(MetricReport::new("x", 10, 0.9, 0.8, 0.6, 2.5, 0.5).is_err());
        assert!(MetricReport::new("x", 0, 0.9, 0.8, 0.6, 0.1, 0.5).is_err());
    }

    #[test]
    fn joint_score_never_beats_either_single_score() {
        let emo_probe = ProbeClassifier::new(ProbeConfig::default(), 31);
        let con_probe = ProbeClassifier::new(ProbeConfig::default(), 32);
        let mut rng = ChaCha12Rng::seed_from_u64(40);
        let pairs: Vec<(usize, usize)> =
            (0..100).map(|_| (rng.random_range(0..8), rng.random_range(0..8))).collect();
        let imgs = renders(&pairs, 41);
        let targets: Vec<(EmotionCategory, ContentConcept)> = pairs
            .iter()
            .map(|&(e, c)| (EmotionCategory::from_index(e), ContentConcept::from_index(c)))
            .collect();
        let report = evaluate(&emo_probe, &con_probe, &imgs, &targets, "untrained").unwrap();
        assert!(report.ec_a <= report.emo_a.min(report.clip_a));
        assert_eq!(report.n, 100);
    }

    #[test]
    fn csv_rows_accumulate_under_a_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("reports/metrics.csv");
        let a = MetricReport::new("none", 96, 0.25, 0.5, 0.125, 0.3, 0.4).unwrap();
        let b = MetricReport::new("both", 96, 0.875, 0.75, 0.75, 0.5, 0.6).unwrap();
        append_csv(&path, &a, 7).unwrap();
        append_csv(&path, &b, 7).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "none,96,0.25,0.5,0.125,0.3,0.4,7");
        assert_eq!(lines[2], "both,96,0.875,0.75,0.75,0.5,0.6,7");

        let bad = MetricReport::new("a,b", 1, 0.5, 0.5, 0.5, 0.1, 0.5).unwrap();
        assert!(matches!(append_csv(&path, &bad, 7), Err(MetricError::Invalid(_))));
    }

    #[test]
    fn probe_training_is_deterministic() {
        let ds = generate_dataset(96, 32, 51);
        let imgs: Vec<Array3<u8>> = ds.train.iter().map(|q| q.image.clone()).collect();
        let labels: Vec<usize> = ds.train.iter().map(|q| q.emotion.index()).collect();
        let cfg = ProbeConfig { classes: 8, c1: 6, c2: 8, c3: 8, feat_dim: 16 };
        let tcfg = ProbeTrainConfig { steps: 20, batch_size: 32, lr: 3e-3 };
        let a = train_probe(&imgs, &labels, &cfg, &tcfg, 5, "metrics/emotion-probe");
        let b = train_probe(&imgs, &labels, &cfg, &tcfg, 5, "metrics/emotion-probe");
        let test_imgs: Vec<Array3<u8>> = ds.test.iter().map(|q| q.image.clone()).collect();
        assert_eq!(a.predict(&test_imgs).unwrap(), b.predict(&test_imgs).unwrap());
        for (x, y) in a.fields().iter().zip(b.fields()) {
            assert_eq!(x, &y);
        }
    }

    #[test]
    fn mislabeled_training_data_fails_the_gate() {
        let mut ds = generate_dataset(96, 32, 52);
        // Cyclic relabeling: the probe learns a shifted class map that the
        // clean test split then contradicts on every image.
        for q in &mut ds.train {
            q.emotion = EmotionCategory::from_index((q.emotion.index() + 1) % 8);
        }
        let cfg = ProbeConfig { classes: 8, c1: 6, c2: 8, c3: 8, feat_dim: 16 };
        let tcfg = ProbeTrainConfig { steps: 40, batch_size: 32, lr: 3e-3 };
        match train_probes(&ds, &cfg, &tcfg, 5) {
            Err(MetricError::GateFailed { probe: "emotion", accuracy, floor }) => {
                assert!(accuracy < floor);
            }
            other => panic!("expected an emotion gate failure, got {other:?}"),
        }
    }

    #[test]
    fn probes_clear_the_gate_on_clean_renders() {
        let ds = generate_dataset(800, 256, 60);
        let (emotion, content) =
            train_probes(&ds, &ProbeConfig::default(), &ProbeTrainConfig::default(), 9).unwrap();

        let test_imgs: Vec<Array3<u8>> = ds.test.iter().map(|q| q.image.clone()).collect();
        let emo_test: Vec<usize> = ds.test.iter().map(|q| q.emotion.index()).collect();
        let test_acc = emotion.accuracy(&test_imgs, &emo_test).unwrap();
        assert!(test_acc >= PROBE_GATE);

        let train_imgs: Vec<Array3<u8>> = ds.train.iter().map(|q| q.image.clone()).collect();
        let emo_train: Vec<usize> = ds.train.iter().map(|q| q.emotion.index()).collect();
        let train_acc = emotion.accuracy(&train_imgs, &emo_train).unwrap();
        assert!(train_acc >= test_acc - 1e-12, "fit split under held-out: {train_acc} < {test_acc}");

        let con_test: Vec<usize> = ds.test.iter().map(|q| q.concept.index()).collect();
        assert!(content.accuracy(&test_imgs, &con_test).unwrap() >= PROBE_GATE);
    }

    #[test]
    fn probe_checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probes.ckpt");
        let emotion = ProbeClassifier::new(ProbeConfig::default(), 71);
        let content =
            ProbeClassifier::new(ProbeConfig { feat_dim: 32, ..ProbeConfig::default() }, 72);
        save_probes(&path, &emotion, &content).unwrap();
        let (e2, c2) = load_probes(&path).unwrap();
        assert_eq!(e2.cfg, emotion.cfg);
        assert_eq!(c2.cfg, content.cfg);
        let imgs = renders(&[(1, 1), (5, 6)], 73);
        assert_eq!(emotion.logits(&imgs).unwrap(), e2.logits(&imgs).unwrap());
        assert_eq!(content.features(&imgs).unwrap(), c2.features(&imgs).unwrap());
    }
}

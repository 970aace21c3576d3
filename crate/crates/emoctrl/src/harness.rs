//! Config-driven orchestration of the whole pipeline: dataset, both
//! training stages, generation, probes, metrics, and the ablation,
//! token-visualization, and emotion-mixing protocols.
//!
//! Stage products are files under one output directory. A stage whose
//! product already exists is reused wholesale, so deleting any suffix of
//! the layout reruns exactly that suffix (delete `samples/` to regenerate
//! images from the saved checkpoints, delete everything to start over).
//! Every random choice flows from the config seed through a named
//! substream keyed by stage and item index, never from execution order,
//! so a resumed run, a fresh run, and a chunked run all produce identical
//! bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{
    sample_batch, train_diffusion, DenoiserConfig, DiffusionExample, DiffusionSchedule,
    DiffusionTrainConfig, EmotionDiffusion,
};
use crate::emofusion::{EmotionSelection, FusionConfig, PromptMask};
use crate::metrics::{
    append_csv, argmax_first, evaluate, load_probes, save_probes, train_probes, MetricReport,
    ProbeClassifier, ProbeConfig, ProbeTrainConfig,
};
use crate::rng::{subseed, substream};
use crate::synthworld::{
    generate_dataset, load_dataset, load_image_png, neutral_caption, save_dataset, save_image_png,
    ContentConcept, Dataset, EmotionCategory, IMAGE_SIZE,
};
use crate::textmodel::{TextModel, TextModelConfig, Vocabulary};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("stage {stage}: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn stage<E: std::fmt::Display>(name: &'static str) -> impl FnOnce(E) -> HarnessError {
    move |e| HarnessError::Stage { stage: name, message: e.to_string() }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig { seed: 11, n_train: 800, n_test: 256 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TextStageConfig {
    pub model: TextModelConfig,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for TextStageConfig {
    fn default() -> Self {
        TextStageConfig {
            model: TextModelConfig::default(),
            pretrain_steps: 1500,
            pretrain_batch: 32,
            pretrain_lr: 1e-3,
            steps: 1000,
            batch: 32,
            lr: 3e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 200, beta_start: 1e-4, beta_end: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Caption images with the trained affective captioner instead of the
    /// neutral template.
    pub use_vt: bool,
    /// Inject the visual emotion token; false forces alpha to zero.
    pub use_vv: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags { use_vt: true, use_vv: true }
    }
}

/// Row label under which a flag combination reports.
pub fn ablation_label(flags: AblationFlags) -> &'static str {
    match (flags.use_vt, flags.use_vv) {
        (false, false) => "none",
        (true, false) => "vt",
        (false, true) => "vv",
        (true, true) => "both",
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// Denoising steps at generation time; at most the schedule length.
    pub sample_steps: usize,
    pub caption_temperature: f64,
    /// Concepts that additionally appear as multi-word caption-style
    /// contents ("the {concept} looks ...").
    pub hinted_concepts: Vec<String>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            sample_steps: 40,
            caption_temperature: 0.8,
            hinted_concepts: vec!["circle".into(), "star".into(), "ring".into(), "cross".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Injection strength at generation time (training strength lives in
    /// `diffusion_train`).
    pub alpha: f64,
    pub world: WorldConfig,
    pub text: TextStageConfig,
    pub fusion: FusionConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub diffusion_train: DiffusionTrainConfig,
    pub probe: ProbeConfig,
    pub probe_train: ProbeTrainConfig,
    pub ablation: AblationFlags,
    pub inference: InferenceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            out_dir: PathBuf::from("runs/default"),
            alpha: 1.0,
            world: WorldConfig::default(),
            text: TextStageConfig::default(),
            fusion: FusionConfig::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            diffusion_train: DiffusionTrainConfig::default(),
            probe: ProbeConfig::default(),
            probe_train: ProbeTrainConfig::default(),
            ablation: AblationFlags::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.world.n_train == 0 || self.world.n_test == 0 {
            return bad("both dataset splits must be nonempty".into());
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad(format!("alpha = {} must be finite and nonnegative", self.alpha));
        }
        if self.schedule.steps < 2 {
            return bad("schedule needs at least 2 steps".into());
        }
        if !(0.0 < self.schedule.beta_start && self.schedule.beta_start < self.schedule.beta_end && self.schedule.beta_end < 1.0)
        {
            return bad(format!(
                "betas ({}, {}) must satisfy 0 < start < end < 1",
                self.schedule.beta_start, self.schedule.beta_end
            ));
        }
        if self.inference.sample_steps == 0 || self.inference.sample_steps > self.schedule.steps {
            return bad(format!(
                "sample_steps = {} outside 1..={}",
                self.inference.sample_steps, self.schedule.steps
            ));
        }
        if !(self.inference.caption_temperature > 0.0) {
            return bad("caption_temperature must be positive".into());
        }
        if self.denoiser.d2 != self.fusion.d2 || self.denoiser.n_max != self.fusion.n_max {
            return bad(format!(
                "denoiser conditioning geometry ({}, {}) disagrees with fusion ({}, {})",
                self.denoiser.d2, self.denoiser.n_max, self.fusion.d2, self.fusion.n_max
            ));
        }
        for name in &self.inference.hinted_concepts {
            if ContentConcept::from_name(name).is_none() {
                return bad(format!("unknown hinted concept {name:?}"));
            }
        }
        for (label, steps, batch, lr) in [
            ("text pretrain", self.text.pretrain_steps, self.text.pretrain_batch, self.text.pretrain_lr),
            ("text", self.text.steps, self.text.batch, self.text.lr),
            ("diffusion", self.diffusion_train.steps, self.diffusion_train.batch_size, self.diffusion_train.lr),
            ("probe", self.probe_train.steps, self.probe_train.batch_size, self.probe_train.lr),
        ] {
            if steps == 0 || batch == 0 || !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{label} training needs steps > 0, batch > 0, finite lr > 0"));
            }
        }
        Ok(())
    }

    fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }
    fn checkpoint(&self, name: &str) -> PathBuf {
        self.out_dir.join("checkpoints").join(name)
    }
    fn samples_dir(&self, label: &str) -> PathBuf {
        self.out_dir.join("samples").join(label)
    }
    fn reports_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.reports_dir().join("metrics.csv")
    }
}

/// One generation request: a content condition and a target emotion. The
/// concept stays pinned even for multi-word hints so content accuracy is
/// always well defined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferencePair {
    pub emotion: EmotionCategory,
    pub concept: ContentConcept,
    pub hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferenceSet {
    pub pairs: Vec<InferencePair>,
}

impl InferenceSet {
    /// Every concept plus every hinted content, crossed with all eight
    /// emotions; the default config yields (8 + 4) x 8 = 96 pairs.
    pub fn from_config(icfg: &InferenceConfig) -> Result<Self, HarnessError> {
        let mut hinted = Vec::with_capacity(icfg.hinted_concepts.len());
        for name in &icfg.hinted_concepts {
            let c = ContentConcept::from_name(name)
                .ok_or_else(|| HarnessError::Config(format!("unknown hinted concept {name:?}")))?;
            hinted.push(c);
        }
        let mut pairs = Vec::new();
        for &emotion in &EmotionCategory::ALL {
            for &concept in &ContentConcept::ALL {
                pairs.push(InferencePair { emotion, concept, hint: None });
            }
            for &concept in &hinted {
                pairs.push(InferencePair {
                    emotion,
                    concept,
                    hint: Some(format!("the {} looks", concept.name())),
                });
            }
        }
        if pairs.is_empty() {
            return Err(HarnessError::Config("empty inference set".into()));
        }
        Ok(InferenceSet { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Sidecar record written next to every emitted sample; together with the
/// checkpoints it pins the image down to the byte.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    pub emotion: String,
    pub concept: String,
    pub hint: Option<String>,
    pub caption: String,
    pub alpha: f64,
    pub seed: u64,
    pub sample_steps: usize,
    pub image: String,
}

pub struct SampleBatch {
    pub records: Vec<SampleRecord>,
    pub images: Vec<Array3<u8>>,
}

/// `[3, h, w]` samples in `[0, 1]` to `[h, w, 3]` bytes, matching the
/// rounding of the dataset's own byte conversion.
pub fn unit_to_image(x: &Array3<f32>) -> Array3<u8> {
    let (_, h, w) = x.dim();
    let mut out = Array3::<u8>::zeros((h, w, 3));
    for y in 0..h {
        for xx in 0..w {
            for c in 0..3 {
                out[[y, xx, c]] = (x[[c, y, xx]].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}

/// Largest two entries; ties resolve to lower indices, mirroring the
/// probes' argmax rule.
pub fn top2(values: &[f64]) -> (usize, usize) {
    assert!(values.len() >= 2, "top2 needs at least two entries");
    let first = argmax_first(values).unwrap();
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if i == first {
            continue;
        }
        match best {
            Some((_, bv)) if v <= bv => {}
            _ => best = Some((i, v)),
        }
    }
    (first, best.unwrap().0)
}

pub fn ensure_dataset(cfg: &RunConfig) -> Result<Dataset, HarnessError> {
    let dir = cfg.data_dir();
    if dir.join("meta.json").exists() {
        let ds = load_dataset(&dir).map_err(stage("data"))?;
        println!("[data] reusing {} train / {} test from {}", ds.train.len(), ds.test.len(), dir.display());
        return Ok(ds);
    }
    let ds = generate_dataset(cfg.world.n_train, cfg.world.n_test, cfg.world.seed);
    save_dataset(&ds, &dir).map_err(stage("data"))?;
    println!("[data] generated {} train / {} test (world seed {})", ds.train.len(), ds.test.len(), cfg.world.seed);
    Ok(ds)
}

pub fn ensure_text_model(cfg: &RunConfig, ds: &Dataset) -> Result<TextModel<f32>, HarnessError> {
    let path = cfg.checkpoint("textmodel.ckpt");
    if path.exists() {
        let m = TextModel::load(&path).map_err(stage("text"))?;
        println!("[text] reusing {}", path.display());
        return Ok(m);
    }
    let mut m = TextModel::new(
        cfg.text.model.clone(),
        Vocabulary::core(),
        subseed(cfg.seed, "harness/text-init", 0),
    );
    m.pretrain_base(
        cfg.text.pretrain_steps,
        cfg.text.pretrain_batch,
        cfg.text.pretrain_lr,
        subseed(cfg.seed, "harness/text-pretrain", 0),
    )
    .map_err(stage("text"))?;
    let curve = m
        .train_emotion(
            &ds.train,
            cfg.text.steps,
            cfg.text.batch,
            cfg.text.lr,
            subseed(cfg.seed, "harness/text-train", 0),
        )
        .map_err(stage("text"))?;
    m.save(&path).map_err(stage("text"))?;
    println!(
        "[text] trained {} + {} steps, final loss {:.3}",
        cfg.text.pretrain_steps,
        cfg.text.steps,
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(m)
}

fn diffusion_examples(ds: &Dataset) -> Vec<DiffusionExample<f32>> {
    ds.train
        .iter()
        .map(|q| DiffusionExample {
            image: crate::synthworld::to_model_input(&q.image),
            caption: q.caption.clone(),
            emotion: q.emotion,
            concept: q.concept,
        })
        .collect()
}

pub fn ensure_diffusion(cfg: &RunConfig, ds: &Dataset) -> Result<EmotionDiffusion<f32>, HarnessError> {
    let path = cfg.checkpoint("diffusion.ckpt");
    if path.exists() {
        let m = EmotionDiffusion::load(&path).map_err(stage("diffusion"))?;
        println!("[diffusion] reusing {}", path.display());
        return Ok(m);
    }
    let schedule =
        DiffusionSchedule::linear(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)
            .map_err(stage("diffusion"))?;
    let mut m = EmotionDiffusion::with_schedule(
        cfg.denoiser.clone(),
        cfg.fusion.clone(),
        schedule,
        Vocabulary::core(),
        subseed(cfg.seed, "harness/diffusion-init", 0),
    )
    .map_err(stage("diffusion"))?;
    let log = train_diffusion(
        &mut m,
        &diffusion_examples(ds),
        &cfg.diffusion_train,
        subseed(cfg.seed, "harness/diffusion-train", 0),
    )
    .map_err(stage("diffusion"))?;
    m.save(&path).map_err(stage("diffusion"))?;
    let summary = serde_json::json!({
        "steps": cfg.diffusion_train.steps,
        "first_window_avg": log.first_window_avg,
        "last_window_avg": log.last_window_avg,
    });
    std::fs::create_dir_all(cfg.reports_dir())?;
    std::fs::write(
        cfg.reports_dir().join("diffusion_train.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    println!(
        "[diffusion] trained {} steps, loss {:.3} -> {:.3}",
        cfg.diffusion_train.steps, log.first_window_avg, log.last_window_avg
    );
    Ok(m)
}

pub fn ensure_probes(
    cfg: &RunConfig,
    ds: &Dataset,
) -> Result<(ProbeClassifier, ProbeClassifier), HarnessError> {
    let path = cfg.checkpoint("probes.ckpt");
    if path.exists() {
        let pair = load_probes(&path).map_err(stage("probes"))?;
        println!("[probes] reusing {}", path.display());
        return Ok(pair);
    }
    let (emotion, content) =
        train_probes(ds, &cfg.probe, &cfg.probe_train, subseed(cfg.seed, "harness/probes", 0))
            .map_err(stage("probes"))?;
    save_probes(&path, &emotion, &content).map_err(stage("probes"))?;
    println!("[probes] trained and gated");
    Ok((emotion, content))
}

fn caption_for_pair(
    text: &TextModel<f32>,
    pair: &InferencePair,
    use_vt: bool,
    temperature: f64,
    seed: u64,
    index: u64,
) -> Result<String, HarnessError> {
    if !use_vt {
        return Ok(neutral_caption(pair.concept));
    }
    let mut rng = substream(seed, "harness/caption", index);
    match &pair.hint {
        Some(h) => text
            .sample_caption_hinted(pair.emotion, h, temperature, Some(&mut rng))
            .map_err(stage("samples")),
        None => Ok(text.sample_caption(pair.emotion, pair.concept, temperature, &mut rng)),
    }
}

/// Generates (or reloads) the inference set under one flag combination.
/// The per-pair caption stream and sampling seed depend only on the
/// config seed and the pair index, so every flag combination sees the
/// same noise and the same affective captions.
pub fn ensure_samples(
    cfg: &RunConfig,
    text: &TextModel<f32>,
    model: &EmotionDiffusion<f32>,
    flags: AblationFlags,
) -> Result<SampleBatch, HarnessError> {
    let label = ablation_label(flags);
    let dir = cfg.samples_dir(label);
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let records: Vec<SampleRecord> =
            serde_json::from_slice(&std::fs::read(&manifest_path)?)
                .map_err(stage("samples"))?;
        let mut images = Vec::with_capacity(records.len());
        for r in &records {
            images.push(load_image_png(&dir.join(&r.image)).map_err(stage("samples"))?);
        }
        println!("[samples:{label}] reusing {} images", records.len());
        return Ok(SampleBatch { records, images });
    }

    let set = InferenceSet::from_config(&cfg.inference)?;
    let alpha = if flags.use_vv { cfg.alpha } else { 0.0 };
    let mut conds: Vec<(ndarray::Array2<f32>, PromptMask)> = Vec::with_capacity(set.len());
    let mut records = Vec::with_capacity(set.len());
    let mut seeds = Vec::with_capacity(set.len());
    for (i, pair) in set.pairs.iter().enumerate() {
        let caption = caption_for_pair(
            text,
            pair,
            flags.use_vt,
            cfg.inference.caption_temperature,
            cfg.seed,
            i as u64,
        )?;
        let cond = model
            .fusion
            .condition(&EmotionSelection::Single(pair.emotion), &caption, alpha)
            .map_err(stage("samples"))?;
        let seed = subseed(cfg.seed, "harness/sample", i as u64);
        records.push(SampleRecord {
            index: i,
            emotion: pair.emotion.name().to_string(),
            concept: pair.concept.name().to_string(),
            hint: pair.hint.clone(),
            caption,
            alpha,
            seed,
            sample_steps: cfg.inference.sample_steps,
            image: format!("{i:03}_{}_{}.png", pair.emotion.name(), pair.concept.name()),
        });
        conds.push(cond);
        seeds.push(seed);
    }

    let raw = sample_batch(&model, &conds, &seeds, (IMAGE_SIZE, IMAGE_SIZE), cfg.inference.sample_steps)
        .map_err(stage("samples"))?;
    let images: Vec<Array3<u8>> = raw.iter().map(unit_to_image).collect();
    for (r, img) in records.iter().zip(&images) {
        save_image_png(&dir.join(&r.image), img).map_err(stage("samples"))?;
        let sidecar = dir.join(&r.image).with_extension("json");
        std::fs::write(sidecar, serde_json::to_string_pretty(r).expect("record serializes"))?;
    }
    // The manifest lands last: an interrupted stage stays incomplete and
    // is regenerated whole on the next run.
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&records).expect("records serialize"),
    )?;
    println!("[samples:{label}] generated {} images (alpha {alpha})", records.len());
    Ok(SampleBatch { records, images })
}

fn csv_has_label(path: &Path, label: &str) -> bool {
    match std::fs::read_to_string(path) {
        Ok(text) => text.lines().any(|l| l.starts_with(&format!("{label},"))),
        Err(_) => false,
    }
}

/// Scores one labeled sample batch and appends the CSV row once.
pub fn evaluate_samples(
    cfg: &RunConfig,
    probes: &(ProbeClassifier, ProbeClassifier),
    batch: &SampleBatch,
    label: &str,
) -> Result<MetricReport, HarnessError> {
    let mut targets = Vec::with_capacity(batch.records.len());
    for r in &batch.records {
        let e = EmotionCategory::from_name(&r.emotion)
            .ok_or_else(|| HarnessError::Stage { stage: "evaluate", message: format!("unknown emotion {:?}", r.emotion) })?;
        let c = ContentConcept::from_name(&r.concept)
            .ok_or_else(|| HarnessError::Stage { stage: "evaluate", message: format!("unknown concept {:?}", r.concept) })?;
        targets.push((e, c));
    }
    let report =
        evaluate(&probes.0, &probes.1, &batch.images, &targets, label).map_err(stage("evaluate"))?;
    std::fs::create_dir_all(cfg.reports_dir())?;
    std::fs::write(
        cfg.reports_dir().join(format!("{label}.json")),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let csv = cfg.metrics_csv();
    if !csv_has_label(&csv, label) {
        append_csv(&csv, &report, cfg.seed).map_err(stage("evaluate"))?;
    }
    println!(
        "[evaluate:{label}] emo {:.3}  content {:.3}  joint {:.3}  div {:.3}  clarity {:.3}",
        report.emo_a, report.clip_a, report.ec_a, report.diversity, report.sem_c
    );
    Ok(report)
}

/// Runs every stage in order under the config's own ablation flags and
/// returns the output directory.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PathBuf, HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let cfg_snapshot = cfg.out_dir.join("config.toml");
    if !cfg_snapshot.exists() {
        std::fs::write(&cfg_snapshot, toml::to_string_pretty(cfg).map_err(|e| HarnessError::Config(e.to_string()))?)?;
    }
    let ds = ensure_dataset(cfg)?;
    let text = ensure_text_model(cfg, &ds)?;
    let model = ensure_diffusion(cfg, &ds)?;
    let batch = ensure_samples(cfg, &text, &model, cfg.ablation)?;
    let probes = ensure_probes(cfg, &ds)?;
    evaluate_samples(cfg, &probes, &batch, ablation_label(cfg.ablation))?;
    Ok(cfg.out_dir.clone())
}

/// The four-way token ablation: one shared training run, four flag
/// combinations at inference, four CSV rows (none, vt, vv, both), one
/// comparison table.
pub fn run_ablation(cfg: &RunConfig) -> Result<Vec<MetricReport>, HarnessError> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let ds = ensure_dataset(cfg)?;
    let text = ensure_text_model(cfg, &ds)?;
    let model = ensure_diffusion(cfg, &ds)?;
    let probes = ensure_probes(cfg, &ds)?;

    let modes = [
        AblationFlags { use_vt: false, use_vv: false },
        AblationFlags { use_vt: true, use_vv: false },
        AblationFlags { use_vt: false, use_vv: true },
        AblationFlags { use_vt: true, use_vv: true },
    ];
    let mut reports = Vec::with_capacity(modes.len());
    for flags in modes {
        let batch = ensure_samples(cfg, &text, &model, flags)?;
        reports.push(evaluate_samples(cfg, &probes, &batch, ablation_label(flags))?);
    }

    let mut table = String::from(
        "| config | n | emo_a | clip_a | ec_a | diversity | sem_c |\n|---|---|---|---|---|---|---|\n",
    );
    for r in &reports {
        writeln!(
            table,
            "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} |",
            r.config_label, r.n, r.emo_a, r.clip_a, r.ec_a, r.diversity, r.sem_c
        )
        .expect("string write");
    }
    std::fs::write(cfg.reports_dir().join("ablation.md"), &table)?;
    println!("{table}");
    Ok(reports)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VisualizationRow {
    pub emotion: String,
    /// Emotion-probe majority vote over the row's images.
    pub majority: String,
    pub matches: bool,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VisualizationOutcome {
    pub grid: PathBuf,
    pub rows: Vec<VisualizationRow>,
}

fn assemble_grid(tiles: &[Array3<u8>], rows: usize, cols: usize, pad: usize) -> Array3<u8> {
    assert_eq!(tiles.len(), rows * cols);
    let (th, tw, _) = tiles[0].dim();
    let h = rows * th + (rows + 1) * pad;
    let w = cols * tw + (cols + 1) * pad;
    let mut out = Array3::<u8>::from_elem((h, w, 3), 255);
    for (i, tile) in tiles.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let y0 = pad + r * (th + pad);
        let x0 = pad + c * (tw + pad);
        for y in 0..th {
            for x in 0..tw {
                for ch in 0..3 {
                    out[[y0 + y, x0 + x, ch]] = tile[[y, x, ch]];
                }
            }
        }
    }
    out
}

/// Token-only generation grid: the captioner invents a caption from the
/// emotion token alone (no content words), the diffusion model renders
/// it, rows are emotions and columns are seeds. The emotion probe then
/// votes per row.
pub fn run_visualization(cfg: &RunConfig, grid_seeds: usize) -> Result<VisualizationOutcome, HarnessError> {
    cfg.validate()?;
    if grid_seeds == 0 {
        return Err(HarnessError::Config("grid needs at least one seed column".into()));
    }
    let ds = ensure_dataset(cfg)?;
    let text = ensure_text_model(cfg, &ds)?;
    let model = ensure_diffusion(cfg, &ds)?;
    let probes = ensure_probes(cfg, &ds)?;

    let mut conds = Vec::with_capacity(8 * grid_seeds);
    let mut seeds = Vec::with_capacity(8 * grid_seeds);
    let mut captions = Vec::with_capacity(8 * grid_seeds);
    for (ei, &emotion) in EmotionCategory::ALL.iter().enumerate() {
        for j in 0..grid_seeds {
            let idx = (ei * grid_seeds + j) as u64;
            let mut rng = substream(cfg.seed, "harness/vis-caption", idx);
            let caption =
                text.sample_caption_free(emotion, cfg.inference.caption_temperature, Some(&mut rng));
            let cond = model
                .fusion
                .condition(&EmotionSelection::Single(emotion), &caption, cfg.alpha)
                .map_err(stage("visualize"))?;
            conds.push(cond);
            seeds.push(subseed(cfg.seed, "harness/vis-sample", idx));
            captions.push(caption);
        }
    }
    let raw = sample_batch(&model, &conds, &seeds, (IMAGE_SIZE, IMAGE_SIZE), cfg.inference.sample_steps)
        .map_err(stage("visualize"))?;
    let tiles: Vec<Array3<u8>> = raw.iter().map(unit_to_image).collect();

    let mut rows = Vec::with_capacity(8);
    for (ei, &emotion) in EmotionCategory::ALL.iter().enumerate() {
        let row_imgs = &tiles[ei * grid_seeds..(ei + 1) * grid_seeds];
        let preds = probes.0.predict(row_imgs).map_err(stage("visualize"))?;
        let mut counts = [0.0f64; 8];
        for &p in &preds {
            counts[p] += 1.0;
        }
        let majority = argmax_first(&counts).unwrap();
        rows.push(VisualizationRow {
            emotion: emotion.name().to_string(),
            majority: EmotionCategory::from_index(majority).name().to_string(),
            matches: majority == ei,
            captions: captions[ei * grid_seeds..(ei + 1) * grid_seeds].to_vec(),
        });
    }

    let grid = assemble_grid(&tiles, 8, grid_seeds, 2);
    std::fs::create_dir_all(cfg.reports_dir())?;
    let grid_path = cfg.reports_dir().join("visualization.png");
    save_image_png(&grid_path, &grid).map_err(stage("visualize"))?;
    let outcome = VisualizationOutcome { grid: grid_path, rows };
    std::fs::write(
        cfg.reports_dir().join("visualization.json"),
        serde_json::to_string_pretty(&outcome).expect("outcome serializes"),
    )?;
    let hits = outcome.rows.iter().filter(|r| r.matches).count();
    println!("[visualize] {}x{grid_seeds} grid, probe majority matches {hits}/8 rows", 8);
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MixSample {
    pub concept: String,
    pub caption: String,
    pub seed: u64,
    /// Emotion-probe top-2 class names, strongest first.
    pub top2: [String; 2],
    pub image: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MixSet {
    pub weights: Vec<f64>,
    pub samples: Vec<MixSample>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MixOutcome {
    pub sets: Vec<MixSet>,
}

/// Mixed-emotion generation: each weight set blends the textual tokens in
/// embedding space and the visual tokens through the attention keys and
/// values. Exact one-hot weights collapse to the single-emotion path and
/// reproduce its bytes.
pub fn run_multi_emotion(
    cfg: &RunConfig,
    weight_sets: &[[f64; 8]],
    samples_per_set: usize,
) -> Result<MixOutcome, HarnessError> {
    cfg.validate()?;
    if weight_sets.is_empty() || samples_per_set == 0 {
        return Err(HarnessError::Config("need at least one weight set and one sample".into()));
    }
    for w in weight_sets {
        EmotionSelection::Mixed(*w)
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
    }
    let ds = ensure_dataset(cfg)?;
    let text = ensure_text_model(cfg, &ds)?;
    let model = ensure_diffusion(cfg, &ds)?;
    let probes = ensure_probes(cfg, &ds)?;

    let mut conds = Vec::new();
    let mut seeds = Vec::new();
    let mut meta = Vec::new();
    for (si, w) in weight_sets.iter().enumerate() {
        let selection = EmotionSelection::Mixed(*w).canonical();
        for j in 0..samples_per_set {
            let idx = (si * samples_per_set + j) as u64;
            let concept = ContentConcept::from_index(j % ContentConcept::ALL.len());
            let row: Array1<f32> = text.mixed_emotion_row(w);
            let mut rng = substream(cfg.seed, "harness/mix-caption", idx);
            let caption = text.sample_caption_with_row(
                row,
                concept,
                cfg.inference.caption_temperature,
                Some(&mut rng),
            );
            let cond = model
                .fusion
                .condition(&selection, &caption, cfg.alpha)
                .map_err(stage("mix"))?;
            conds.push(cond);
            seeds.push(subseed(cfg.seed, "harness/mix-sample", idx));
            meta.push((si, concept, caption));
        }
    }
    let raw = sample_batch(&model, &conds, &seeds, (IMAGE_SIZE, IMAGE_SIZE), cfg.inference.sample_steps)
        .map_err(stage("mix"))?;
    let images: Vec<Array3<u8>> = raw.iter().map(unit_to_image).collect();
    let logits = probes.0.logits(&images).map_err(stage("mix"))?;

    let mix_dir = cfg.out_dir.join("mix");
    let mut sets: Vec<MixSet> =
        weight_sets.iter().map(|w| MixSet { weights: w.to_vec(), samples: Vec::new() }).collect();
    for (k, ((si, concept, caption), img)) in meta.into_iter().zip(&images).enumerate() {
        let (a, b) = top2(logits.row(k).as_slice().unwrap());
        let name = format!("set{si}_{:02}_{}.png", k % samples_per_set, concept.name());
        save_image_png(&mix_dir.join(&name), img).map_err(stage("mix"))?;
        let sample = MixSample {
            concept: concept.name().to_string(),
            caption,
            seed: seeds[k],
            top2: [
                EmotionCategory::from_index(a).name().to_string(),
                EmotionCategory::from_index(b).name().to_string(),
            ],
            image: name.clone(),
        };
        std::fs::write(
            mix_dir.join(&name).with_extension("json"),
            serde_json::to_string_pretty(&sample).expect("sample serializes"),
        )?;
        sets[si].samples.push(sample);
    }
    let outcome = MixOutcome { sets };
    std::fs::create_dir_all(cfg.reports_dir())?;
    std::fs::write(
        cfg.reports_dir().join("mix.json"),
        serde_json::to_string_pretty(&outcome).expect("outcome serializes"),
    )?;
    Ok(outcome)
}

/// Renders `metrics.csv` as a markdown table, optionally with a grouped
/// accuracy bar chart, and returns the table text.
pub fn render_report(cfg: &RunConfig, charts: bool) -> Result<String, HarnessError> {
    let csv = cfg.metrics_csv();
    let text = std::fs::read_to_string(&csv)
        .map_err(|e| HarnessError::Stage { stage: "report", message: format!("{}: {e}", csv.display()) })?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let rows: Vec<Vec<String>> = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();

    let mut md = String::new();
    writeln!(md, "| {} |", header.join(" | ")).expect("string write");
    writeln!(md, "|{}|", vec!["---"; header.len()].join("|")).expect("string write");
    for row in &rows {
        writeln!(md, "| {} |", row.join(" | ")).expect("string write");
    }
    std::fs::create_dir_all(cfg.reports_dir())?;
    std::fs::write(cfg.reports_dir().join("metrics.md"), &md)?;

    if charts {
        let labels: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
        let series: Vec<(&str, Vec<f64>)> = [(2, "emo_a"), (3, "clip_a"), (4, "ec_a")]
            .iter()
            .map(|&(col, name)| {
                (name, rows.iter().map(|r| r[col].parse::<f64>().unwrap_or(0.0)).collect())
            })
            .collect();
        let chart = bar_chart(&labels, &series);
        save_image_png(&cfg.reports_dir().join("metrics.png"), &chart).map_err(stage("report"))?;
    }
    Ok(md)
}

/// 3x5 bitmap glyphs for chart labels; rows are 3-bit masks, MSB left.
fn glyph(c: char) -> [u8; 5] {
    match c {
        'a' => [0b010, 0b101, 0b111, 0b101, 0b101],
        'b' => [0b110, 0b101, 0b110, 0b101, 0b110],
        'c' => [0b011, 0b100, 0b100, 0b100, 0b011],
        'd' => [0b110, 0b101, 0b101, 0b101, 0b110],
        'e' => [0b111, 0b100, 0b110, 0b100, 0b111],
        'f' => [0b111, 0b100, 0b110, 0b100, 0b100],
        'g' => [0b011, 0b100, 0b101, 0b101, 0b011],
        'h' => [0b101, 0b101, 0b111, 0b101, 0b101],
        'i' => [0b111, 0b010, 0b010, 0b010, 0b111],
        'j' => [0b001, 0b001, 0b001, 0b101, 0b010],
        'k' => [0b101, 0b110, 0b100, 0b110, 0b101],
        'l' => [0b100, 0b100, 0b100, 0b100, 0b111],
        'm' => [0b101, 0b111, 0b111, 0b101, 0b101],
        'n' => [0b101, 0b111, 0b111, 0b111, 0b101],
        'o' => [0b010, 0b101, 0b101, 0b101, 0b010],
        'p' => [0b110, 0b101, 0b110, 0b100, 0b100],
        'q' => [0b010, 0b101, 0b101, 0b011, 0b001],
        'r' => [0b110, 0b101, 0b110, 0b110, 0b101],
        's' => [0b011, 0b100, 0b010, 0b001, 0b110],
        't' => [0b111, 0b010, 0b010, 0b010, 0b010],
        'u' => [0b101, 0b101, 0b101, 0b101, 0b111],
        'v' => [0b101, 0b101, 0b101, 0b101, 0b010],
        'w' => [0b101, 0b101, 0b111, 0b111, 0b101],
        'x' => [0b101, 0b101, 0b010, 0b101, 0b101],
        'y' => [0b101, 0b101, 0b010, 0b010, 0b010],
        'z' => [0b111, 0b001, 0b010, 0b100, 0b111],
        '0' => [0b010, 0b101, 0b101, 0b101, 0b010],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b110, 0b001, 0b010, 0b100, 0b111],
        '3' => [0b110, 0b001, 0b010, 0b001, 0b110],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b110, 0b001, 0b110],
        '6' => [0b011, 0b100, 0b110, 0b101, 0b010],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b010, 0b101, 0b010, 0b101, 0b010],
        '9' => [0b010, 0b101, 0b011, 0b001, 0b110],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '_' => [0b000, 0b000, 0b000, 0b000, 0b111],
        _ => [0b000; 5],
    }
}

fn draw_text(img: &mut Array3<u8>, text: &str, y0: usize, x0: usize, color: [u8; 3]) {
    let (h, w, _) = img.dim();
    for (ci, c) in text.chars().enumerate() {
        let rows = glyph(c.to_ascii_lowercase());
        for (ry, bits) in rows.iter().enumerate() {
            for rx in 0..3 {
                if bits & (1 << (2 - rx)) != 0 {
                    let (y, x) = (y0 + ry, x0 + ci * 4 + rx);
                    if y < h && x < w {
                        for ch in 0..3 {
                            img[[y, x, ch]] = color[ch];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped bar chart over `[0, 1]` accuracies: one group per CSV row, one
/// bar per series.
fn bar_chart(labels: &[&str], series: &[(&str, Vec<f64>)]) -> Array3<u8> {
    const PLOT_H: usize = 100;
    const BAR_W: usize = 12;
    const GAP: usize = 16;
    const TOP: usize = 14;
    const BOTTOM: usize = 10;
    const LEFT: usize = 18;
    let colors: [[u8; 3]; 3] = [[200, 60, 60], [60, 120, 200], [60, 160, 90]];
    let group_w = series.len() * (BAR_W + 2) + GAP;
    let w = LEFT + labels.len() * group_w + GAP;
    let h = TOP + PLOT_H + BOTTOM + 8;
    let mut img = Array3::<u8>::from_elem((h, w, 3), 255);

    for (gy, frac) in [(0usize, 1.0f64), (PLOT_H / 2, 0.5), (PLOT_H, 0.0)] {
        let y = TOP + gy;
        for x in LEFT..w - 2 {
            img[[y, x, 0]] = 225;
            img[[y, x, 1]] = 225;
            img[[y, x, 2]] = 225;
        }
        draw_text(&mut img, &format!("{frac:.1}"), y.saturating_sub(2), 2, [90, 90, 90]);
    }
    for (gi, label) in labels.iter().enumerate() {
        let gx = LEFT + gi * group_w + GAP / 2;
        for (si, (_, values)) in series.iter().enumerate() {
            let v = values.get(gi).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            let bh = (v * PLOT_H as f64).round() as usize;
            let x0 = gx + si * (BAR_W + 2);
            for y in 0..bh {
                for x in 0..BAR_W {
                    for ch in 0..3 {
                        img[[TOP + PLOT_H - 1 - y, x0 + x, ch]] = colors[si % colors.len()][ch];
                    }
                }
            }
        }
        draw_text(&mut img, label, TOP + PLOT_H + 3, gx, [0, 0, 0]);
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let x0 = LEFT + si * 40;
        for y in 0..5 {
            for x in 0..5 {
                for ch in 0..3 {
                    img[[3 + y, x0 + x, ch]] = colors[si % colors.len()][ch];
                }
            }
        }
        draw_text(&mut img, name, 3, x0 + 7, [0, 0, 0]);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::from_model_output;

    fn micro_config(dir: &Path) -> RunConfig {
        RunConfig {
            seed: 5,
            out_dir: dir.to_path_buf(),
            alpha: 1.0,
            world: WorldConfig { seed: 11, n_train: 800, n_test: 192 },
            text: TextStageConfig {
                model: TextModelConfig {
                    d_model: 32,
                    n_layers: 1,
                    n_heads: 2,
                    d_ff: 64,
                    max_seq: 24,
                    lora_rank: 2,
                    lora_scale: 1.0,
                },
                pretrain_steps: 30,
                pretrain_batch: 8,
                pretrain_lr: 1e-2,
                steps: 30,
                batch: 8,
                lr: 1e-2,
            },
            fusion: FusionConfig { d2: 16, n_max: 16, n_heads: 2, d_ff: 32 },
            denoiser: DenoiserConfig {
                c0: 8,
                c1: 16,
                t_in: 8,
                t_dim: 16,
                groups: 2,
                d2: 16,
                n_max: 16,
            },
            schedule: ScheduleConfig { steps: 50, beta_start: 1e-4, beta_end: 0.02 },
            diffusion_train: DiffusionTrainConfig {
                steps: 30,
                batch_size: 8,
                ..DiffusionTrainConfig::default()
            },
            probe: ProbeConfig::default(),
            probe_train: ProbeTrainConfig::default(),
            ablation: AblationFlags::default(),
            inference: InferenceConfig {
                sample_steps: 8,
                caption_temperature: 0.8,
                hinted_concepts: vec!["ring".into()],
            },
        }
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);

        assert!(toml::from_str::<RunConfig>("unknown_key = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[world]\nbogus = 2").is_err());
        // Partial files fall back to defaults for everything unstated.
        let partial: RunConfig = toml::from_str("seed = 9").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.world, WorldConfig::default());
    }

    #[test]
    fn validation_rejects_out_of_range_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_config(dir.path());
        cfg.alpha = -0.5;
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));

        let mut cfg = micro_config(dir.path());
        cfg.inference.sample_steps = cfg.schedule.steps + 1;
        assert!(cfg.validate().is_err());

        let mut cfg = micro_config(dir.path());
        cfg.denoiser.d2 = cfg.fusion.d2 + 8;
        assert!(cfg.validate().is_err());

        let mut cfg = micro_config(dir.path());
        cfg.inference.hinted_concepts = vec!["pentagon".into()];
        assert!(cfg.validate().is_err());

        let mut cfg = micro_config(dir.path());
        cfg.schedule.beta_start = 0.5;
        cfg.schedule.beta_end = 0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn default_inference_set_has_96_pairs() {
        let set = InferenceSet::from_config(&InferenceConfig::default()).unwrap();
        assert_eq!(set.len(), 96);
        // Eight plain pairs then the hinted ones, per emotion.
        assert_eq!(set.pairs[0].hint, None);
        let hinted = set.pairs.iter().filter(|p| p.hint.is_some()).count();
        assert_eq!(hinted, 32);
        assert_eq!(set.pairs[8].hint.as_deref(), Some("the circle looks"));

        let bad = InferenceConfig { hinted_concepts: vec!["blob".into()], ..Default::default() };
        assert!(InferenceSet::from_config(&bad).is_err());
    }

    #[test]
    fn ablation_labels_cover_the_four_flag_states() {
        assert_eq!(ablation_label(AblationFlags { use_vt: false, use_vv: false }), "none");
        assert_eq!(ablation_label(AblationFlags { use_vt: true, use_vv: false }), "vt");
        assert_eq!(ablation_label(AblationFlags { use_vt: false, use_vv: true }), "vv");
        assert_eq!(ablation_label(AblationFlags { use_vt: true, use_vv: true }), "both");
    }

    #[test]
    fn unit_images_convert_like_the_dataset_path() {
        let mut x = Array3::<f32>::zeros((3, 2, 2));
        x[[0, 0, 0]] = 0.0;
        x[[1, 0, 0]] = 1.0;
        x[[2, 0, 0]] = 0.5;
        x[[0, 1, 1]] = 1.4;
        x[[1, 1, 1]] = -0.2;
        let got = unit_to_image(&x);
        // The dataset converter expects [-1, 1]; rescaling first must give
        // the same bytes.
        let rescaled = x.mapv(|v| v.clamp(0.0, 1.0) * 2.0 - 1.0);
        let want = from_model_output(&rescaled.view());
        assert_eq!(got, want);
        assert_eq!(got[[0, 0, 0]], 0);
        assert_eq!(got[[0, 0, 1]], 255);
        assert_eq!(got[[1, 1, 0]], 255);
        assert_eq!(got[[1, 1, 1]], 0);
    }

    #[test]
    fn top2_orders_by_value_then_index() {
        assert_eq!(top2(&[0.1, 0.9, 0.5]), (1, 2));
        assert_eq!(top2(&[0.5, 0.5, 0.1]), (0, 1));
        assert_eq!(top2(&[0.2, 0.2, 0.2]), (0, 1));
    }

    #[test]
    fn pipeline_lays_out_reruns_and_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(&dir.path().join("run"));
        let out = run_pipeline(&cfg).unwrap();
        for sub in ["data", "checkpoints", "samples", "reports"] {
            assert!(out.join(sub).is_dir(), "missing {sub}/");
        }
        let csv = std::fs::read_to_string(cfg.metrics_csv()).unwrap();
        assert_eq!(csv.lines().count(), 2, "header plus one row:\n{csv}");
        assert!(csv.lines().nth(1).unwrap().starts_with("both,72,"));

        // Sidecars parse and carry the regeneration fields.
        let sdir = out.join("samples/both");
        let rec: SampleRecord = serde_json::from_slice(
            &std::fs::read(sdir.join("000_amusement_circle.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(rec.index, 0);
        assert_eq!(rec.alpha, 1.0);
        assert!(sdir.join(&rec.image).exists());

        // Rerun in place: every stage is reused, the CSV keeps one row.
        let ckpt_bytes = std::fs::read(out.join("checkpoints/diffusion.ckpt")).unwrap();
        run_pipeline(&cfg).unwrap();
        assert_eq!(std::fs::read_to_string(cfg.metrics_csv()).unwrap(), csv);
        assert_eq!(std::fs::read(out.join("checkpoints/diffusion.ckpt")).unwrap(), ckpt_bytes);

        // Deleting samples/ regenerates identical images without touching
        // the checkpoints.
        let img_path = sdir.join(&rec.image);
        let img_bytes = std::fs::read(&img_path).unwrap();
        std::fs::remove_dir_all(out.join("samples")).unwrap();
        run_pipeline(&cfg).unwrap();
        assert_eq!(std::fs::read(&img_path).unwrap(), img_bytes);
        assert_eq!(std::fs::read(out.join("checkpoints/diffusion.ckpt")).unwrap(), ckpt_bytes);

        // A fresh directory with the same config reproduces the CSV.
        let cfg2 = RunConfig { out_dir: dir.path().join("run2"), ..cfg.clone() };
        run_pipeline(&cfg2).unwrap();
        assert_eq!(std::fs::read_to_string(cfg2.metrics_csv()).unwrap(), csv);
    }

    #[test]
    fn ablation_emits_four_labeled_rows() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(&dir.path().join("run"));
        let reports = run_ablation(&cfg).unwrap();
        let labels: Vec<&str> = reports.iter().map(|r| r.config_label.as_str()).collect();
        assert_eq!(labels, ["none", "vt", "vv", "both"]);

        let csv = std::fs::read_to_string(cfg.metrics_csv()).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 4);
        for (row, label) in rows.iter().zip(["none", "vt", "vv", "both"]) {
            assert!(row.starts_with(&format!("{label},")), "{row}");
        }
        assert!(cfg.reports_dir().join("ablation.md").exists());

        // The neutral-caption modes never consult the captioner: their
        // sidecars carry the fixed template.
        let rec: SampleRecord = serde_json::from_slice(
            &std::fs::read(cfg.samples_dir("none").join("000_amusement_circle.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(rec.caption, "a circle in the scene");
        assert_eq!(rec.alpha, 0.0);
    }

    #[test]
    fn visualization_grid_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(&dir.path().join("run"));
        let out = run_visualization(&cfg, 2).unwrap();
        assert_eq!(out.rows.len(), 8);
        assert!(out.grid.exists());
        let first = std::fs::read(&out.grid).unwrap();
        let again = run_visualization(&cfg, 2).unwrap();
        assert_eq!(std::fs::read(&again.grid).unwrap(), first);
        // 8 rows x 2 cols of 32px tiles with 2px padding.
        let img = load_image_png(&out.grid).unwrap();
        assert_eq!(img.dim(), (8 * 34 + 2, 2 * 34 + 2, 3));
    }

    #[test]
    fn one_hot_mix_reproduces_the_single_emotion_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(&dir.path().join("run"));
        let mut w = [0.0; 8];
        w[3] = 1.0;
        let out = run_multi_emotion(&cfg, &[w], 2).unwrap();
        assert_eq!(out.sets.len(), 1);
        assert_eq!(out.sets[0].samples.len(), 2);

        // Replay the mix path by hand with a Single selection and the
        // same streams; bytes must agree.
        let ds = ensure_dataset(&cfg).unwrap();
        let text = ensure_text_model(&cfg, &ds).unwrap();
        let model = ensure_diffusion(&cfg, &ds).unwrap();
        let emotion = EmotionCategory::from_index(3);
        for j in 0..2usize {
            let concept = ContentConcept::from_index(j % 8);
            let mut rng = substream(cfg.seed, "harness/mix-caption", j as u64);
            let caption = text.sample_caption(
                emotion,
                concept,
                cfg.inference.caption_temperature,
                &mut rng,
            );
            assert_eq!(caption, out.sets[0].samples[j].caption);
            let cond = model
                .fusion
                .condition(&EmotionSelection::Single(emotion), &caption, cfg.alpha)
                .unwrap();
            let raw = sample_batch(
                &model,
                &[cond],
                &[subseed(cfg.seed, "harness/mix-sample", j as u64)],
                (IMAGE_SIZE, IMAGE_SIZE),
                cfg.inference.sample_steps,
            )
            .unwrap();
            let img = unit_to_image(&raw[0]);
            let stored =
                load_image_png(&cfg.out_dir.join("mix").join(&out.sets[0].samples[j].image))
                    .unwrap();
            assert_eq!(img, stored);
        }

        let bad = [[0.5, 0.4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]];
        assert!(matches!(run_multi_emotion(&cfg, &bad, 1), Err(HarnessError::Config(_))));
    }

    #[test]
    fn report_renders_markdown_and_chart() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(&dir.path().join("run"));
        std::fs::create_dir_all(cfg.reports_dir()).unwrap();
        std::fs::write(
            cfg.metrics_csv(),
            "config_label,n,emo_a,clip_a,ec_a,diversity,sem_c,seed\nnone,96,0.2,0.5,0.1,0.3,0.4,5\nboth,96,0.8,0.7,0.6,0.5,0.6,5\n",
        )
        .unwrap();
        let md = render_report(&cfg, true).unwrap();
        assert!(md.contains("| none | 96 | 0.2 |"));
        assert!(cfg.reports_dir().join("metrics.md").exists());
        let chart = load_image_png(&cfg.reports_dir().join("metrics.png")).unwrap();
        assert!(chart.dim().0 > 50 && chart.dim().1 > 50);
    }
}

//! Word-level decoder language model with pluggable affect.
//!
//! The base model is a small causal transformer trained on emotion-free
//! captions. Affect enters through two add-ons that leave the base weights
//! untouched: a learnable token row per emotion that is prepended to the
//! content prompt, and rank-`r` adapters on the query and value projections
//! of every attention block. The training loss is the mean per-token
//! cross-entropy of the caption under teacher forcing; prompt rows are
//! excluded from the loss.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array3, ArrayD, Ix2, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, CheckpointError};
use crate::nn::{randn, randn_fan_in, zeros, Adam, Scalar, Tape, TensorId};
use crate::rng::substream;
use crate::synthworld::{
    all_lexicon_words, ContentConcept, EmotionCategory, Quadruplet, EMOTION_COUNT, GLUE_WORDS,
    MAX_CAPTION_WORDS,
};

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;

/// Hard cap on prompt rows fed to any conditioned model.
pub const MAX_PROMPT_ROWS: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid model state: {0}")]
    Invalid(String),
}

/// Closed vocabulary: specials, glue words, content nouns, affective
/// lexicon, in that fixed order.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn core() -> Vocabulary {
        let mut words: Vec<String> = vec!["<pad>".into(), "<bos>".into(), "<eos>".into()];
        words.extend(GLUE_WORDS.iter().map(|w| w.to_string()));
        words.extend(ContentConcept::ALL.iter().map(|c| c.name().to_string()));
        words.extend(all_lexicon_words().iter().map(|w| w.to_string()));
        Vocabulary::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Vocabulary {
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            let prev = index.insert(w.clone(), i);
            assert!(prev.is_none(), "duplicate vocabulary word {w:?}");
        }
        Vocabulary { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Whitespace-split encoding; no EOS or BOS is appended.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>, TextError> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| TextError::UnknownWord(w.to_string())))
            .collect()
    }

    /// Inverse of `encode`, dropping special tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id <= EOS_ID {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.word(id));
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TextModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Positional table size; prompt plus caption must fit.
    pub max_seq: usize,
    pub lora_rank: usize,
    pub lora_scale: f64,
}

impl Default for TextModelConfig {
    fn default() -> Self {
        TextModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 128,
            max_seq: 24,
            lora_rank: 4,
            lora_scale: 1.0,
        }
    }
}

struct Block<T: Scalar> {
    ln1_g: ArrayD<T>,
    ln1_b: ArrayD<T>,
    wq: ArrayD<T>,
    bq: ArrayD<T>,
    wk: ArrayD<T>,
    bk: ArrayD<T>,
    wv: ArrayD<T>,
    bv: ArrayD<T>,
    wo: ArrayD<T>,
    bo: ArrayD<T>,
    ln2_g: ArrayD<T>,
    ln2_b: ArrayD<T>,
    w1: ArrayD<T>,
    b1: ArrayD<T>,
    w2: ArrayD<T>,
    b2: ArrayD<T>,
}

/// Low-rank update `x -> scale * (x A) B` added to a frozen projection.
/// `b` starts at zero so a fresh adapter is an exact no-op.
struct BlockAdapters<T: Scalar> {
    qa: ArrayD<T>,
    qb: ArrayD<T>,
    va: ArrayD<T>,
    vb: ArrayD<T>,
}

pub struct TextModel<T: Scalar> {
    pub cfg: TextModelConfig,
    pub vocab: Vocabulary,
    tok_emb: ArrayD<T>,
    pos_emb: ArrayD<T>,
    blocks: Vec<Block<T>>,
    lnf_g: ArrayD<T>,
    lnf_b: ArrayD<T>,
    w_out: ArrayD<T>,
    b_out: ArrayD<T>,
    /// One learnable row per emotion, `[8, d_model]`.
    emo_tokens: ArrayD<T>,
    adapters: Vec<BlockAdapters<T>>,
}

/// Which parameter group a training phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainSet {
    /// Everything except emotion tokens and adapters.
    Base,
    /// Only emotion tokens and adapters.
    Emotion,
}

/// Tape ids for one staged copy of the model.
struct StagedText {
    tok_emb: TensorId,
    pos_emb: TensorId,
    blocks: Vec<[TensorId; 16]>,
    lnf_g: TensorId,
    lnf_b: TensorId,
    w_out: TensorId,
    b_out: TensorId,
    emo_tokens: TensorId,
    adapters: Vec<[TensorId; 4]>,
    /// Ids of the trainable tensors, in `params_mut` order.
    trainable: Vec<TensorId>,
    with_adapters: bool,
}

/// One teacher-forcing example: an optional emotion row index, the content
/// concept, and the caption to reproduce.
#[derive(Debug, Clone)]
pub struct TextExample {
    pub emotion: Option<EmotionCategory>,
    pub concept: ContentConcept,
    pub caption: String,
}

impl<T: Scalar> TextModel<T> {
    pub fn new(cfg: TextModelConfig, vocab: Vocabulary, seed: u64) -> Self {
        assert!(cfg.d_model % cfg.n_heads == 0, "heads must divide model width");
        let d = cfg.d_model;
        let v = vocab.len();
        let mut rng = substream(seed, "textmodel/init", 0);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        let mut adapters = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(Block {
                ln1_g: ArrayD::ones(IxDyn(&[d])),
                ln1_b: zeros(&[d]),
                wq: randn_fan_in(&[d, d], d, &mut rng),
                bq: zeros(&[d]),
                wk: randn_fan_in(&[d, d], d, &mut rng),
                bk: zeros(&[d]),
                wv: randn_fan_in(&[d, d], d, &mut rng),
                bv: zeros(&[d]),
                wo: randn_fan_in(&[d, d], d, &mut rng),
                bo: zeros(&[d]),
                ln2_g: ArrayD::ones(IxDyn(&[d])),
                ln2_b: zeros(&[d]),
                w1: randn_fan_in(&[d, cfg.d_ff], d, &mut rng),
                b1: zeros(&[cfg.d_ff]),
                w2: randn_fan_in(&[cfg.d_ff, d], cfg.d_ff, &mut rng),
                b2: zeros(&[d]),
            });
            adapters.push(BlockAdapters {
                qa: randn(&[d, cfg.lora_rank], 0.02, &mut rng),
                qb: zeros(&[cfg.lora_rank, d]),
                va: randn(&[d, cfg.lora_rank], 0.02, &mut rng),
                vb: zeros(&[cfg.lora_rank, d]),
            });
        }
        TextModel {
            tok_emb: randn(&[v, d], 0.02, &mut rng),
            pos_emb: randn(&[cfg.max_seq, d], 0.01, &mut rng),
            blocks,
            lnf_g: ArrayD::ones(IxDyn(&[d])),
            lnf_b: zeros(&[d]),
            w_out: randn_fan_in(&[d, v], d, &mut rng),
            b_out: zeros(&[v]),
            emo_tokens: randn(&[EMOTION_COUNT, d], 0.02, &mut rng),
            adapters,
            cfg,
            vocab,
        }
    }

    /// Mutable references to one parameter group, in a fixed order that
    /// `stage` mirrors.
    fn params_mut(&mut self, set: TrainSet) -> Vec<&mut ArrayD<T>> {
        match set {
            TrainSet::Base => {
                let mut ps: Vec<&mut ArrayD<T>> = vec![&mut self.tok_emb, &mut self.pos_emb];
                for b in &mut self.blocks {
                    ps.extend([
                        &mut b.ln1_g, &mut b.ln1_b, &mut b.wq, &mut b.bq, &mut b.wk, &mut b.bk,
                        &mut b.wv, &mut b.bv, &mut b.wo, &mut b.bo, &mut b.ln2_g, &mut b.ln2_b,
                        &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2,
                    ]);
                }
                ps.extend([&mut self.lnf_g, &mut self.lnf_b, &mut self.w_out, &mut self.b_out]);
                ps
            }
            TrainSet::Emotion => {
                let mut ps: Vec<&mut ArrayD<T>> = vec![&mut self.emo_tokens];
                for a in &mut self.adapters {
                    ps.extend([&mut a.qa, &mut a.qb, &mut a.va, &mut a.vb]);
                }
                ps
            }
        }
    }

    /// Copy every weight onto the tape; tensors in `train` become
    /// parameters, the rest constants.
    fn stage(&self, tape: &mut Tape<T>, train: Option<TrainSet>, with_adapters: bool) -> StagedText {
        let mut trainable = Vec::new();
        let put = |tape: &mut Tape<T>, w: &ArrayD<T>, is_train: bool, sink: &mut Vec<TensorId>| {
            if is_train {
                let id = tape.param(w.clone());
                sink.push(id);
                id
            } else {
                tape.constant(w.clone())
            }
        };
        let base = train == Some(TrainSet::Base);
        let emo = train == Some(TrainSet::Emotion);

        // Emotion group first when it is the trainable set, so trainable id
        // order always matches `params_mut`.
        let mut staged = StagedText {
            tok_emb: TensorId(0),
            pos_emb: TensorId(0),
            blocks: Vec::new(),
            lnf_g: TensorId(0),
            lnf_b: TensorId(0),
            w_out: TensorId(0),
            b_out: TensorId(0),
            emo_tokens: TensorId(0),
            adapters: Vec::new(),
            trainable: Vec::new(),
            with_adapters,
        };
        if emo {
            staged.emo_tokens = put(tape, &self.emo_tokens, true, &mut trainable);
            for a in &self.adapters {
                staged.adapters.push([
                    put(tape, &a.qa, true, &mut trainable),
                    put(tape, &a.qb, true, &mut trainable),
                    put(tape, &a.va, true, &mut trainable),
                    put(tape, &a.vb, true, &mut trainable),
                ]);
            }
        }
        staged.tok_emb = put(tape, &self.tok_emb, base, &mut trainable);
        staged.pos_emb = put(tape, &self.pos_emb, base, &mut trainable);
        for b in &self.blocks {
            staged.blocks.push([
                put(tape, &b.ln1_g, base, &mut trainable),
                put(tape, &b.ln1_b, base, &mut trainable),
                put(tape, &b.wq, base, &mut trainable),
                put(tape, &b.bq, base, &mut trainable),
                put(tape, &b.wk, base, &mut trainable),
                put(tape, &b.bk, base, &mut trainable),
                put(tape, &b.wv, base, &mut trainable),
                put(tape, &b.bv, base, &mut trainable),
                put(tape, &b.wo, base, &mut trainable),
                put(tape, &b.bo, base, &mut trainable),
                put(tape, &b.ln2_g, base, &mut trainable),
                put(tape, &b.ln2_b, base, &mut trainable),
                put(tape, &b.w1, base, &mut trainable),
                put(tape, &b.b1, base, &mut trainable),
                put(tape, &b.w2, base, &mut trainable),
                put(tape, &b.b2, base, &mut trainable),
            ]);
        }
        staged.lnf_g = put(tape, &self.lnf_g, base, &mut trainable);
        staged.lnf_b = put(tape, &self.lnf_b, base, &mut trainable);
        staged.w_out = put(tape, &self.w_out, base, &mut trainable);
        staged.b_out = put(tape, &self.b_out, base, &mut trainable);
        if !emo {
            staged.emo_tokens = put(tape, &self.emo_tokens, false, &mut trainable);
            for a in &self.adapters {
                staged.adapters.push([
                    put(tape, &a.qa, false, &mut trainable),
                    put(tape, &a.qb, false, &mut trainable),
                    put(tape, &a.va, false, &mut trainable),
                    put(tape, &a.vb, false, &mut trainable),
                ]);
            }
        }
        staged.trainable = trainable;
        staged
    }

    /// Token ids of the content prompt, `"a {concept}"`.
    pub fn content_tokens(&self, concept: ContentConcept) -> Vec<usize> {
        self.vocab
            .encode(&format!("a {}", concept.name()))
            .expect("content prompt words must be in the vocabulary")
    }

    /// Prompt rows on the tape: `[emotion row; embedded content tokens]`.
    /// Either part may be absent, but not both.
    fn prompt_rows_on(
        &self,
        tape: &mut Tape<T>,
        staged: &StagedText,
        emotion_row: Option<TensorId>,
        content: &[usize],
    ) -> TensorId {
        let rows = match (emotion_row, content.is_empty()) {
            (Some(r), true) => r,
            (Some(r), false) => {
                let content_rows = tape.gather_rows(staged.tok_emb, content);
                tape.concat(0, &[r, content_rows])
            }
            (None, false) => tape.gather_rows(staged.tok_emb, content),
            (None, true) => panic!("prompt needs an emotion row or content tokens"),
        };
        assert!(
            tape.value(rows).shape()[0] <= MAX_PROMPT_ROWS,
            "prompt exceeds {MAX_PROMPT_ROWS} rows"
        );
        rows
    }

    fn emotion_row_on(
        &self,
        tape: &mut Tape<T>,
        staged: &StagedText,
        emotion: EmotionCategory,
    ) -> TensorId {
        tape.gather_rows(staged.emo_tokens, &[emotion.index()])
    }

    /// Causal transformer over `rows [s, d]`, returning pre-head features.
    fn decode_rows(&self, tape: &mut Tape<T>, staged: &StagedText, rows: TensorId) -> TensorId {
        let s = tape.value(rows).shape()[0];
        let d = self.cfg.d_model;
        let h = self.cfg.n_heads;
        let dh = d / h;
        assert!(s <= self.cfg.max_seq, "sequence of {s} exceeds positional table");

        let positions: Vec<usize> = (0..s).collect();
        let pos = tape.gather_rows(staged.pos_emb, &positions);
        let mut x = tape.add(rows, pos);

        let mut mask = Array3::<T>::zeros((h, s, s));
        let ninf = T::from_f64(-1e9);
        for hi in 0..h {
            for i in 0..s {
                for j in (i + 1)..s {
                    mask[[hi, i, j]] = ninf;
                }
            }
        }
        let mask = tape.constant(mask.into_dyn());

        for (bi, ids) in staged.blocks.iter().enumerate() {
            let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] = *ids;
            let a_in = tape.layer_norm(x, ln1_g, ln1_b, 1e-5);

            let mut q = tape.matmul(a_in, wq);
            q = tape.add_row(q, bq);
            let mut v = tape.matmul(a_in, wv);
            v = tape.add_row(v, bv);
            if staged.with_adapters {
                let [qa, qb, va, vb] = staged.adapters[bi];
                let qlow = tape.matmul(a_in, qa);
                let qup = tape.matmul(qlow, qb);
                let qup = tape.scale(qup, self.cfg.lora_scale);
                q = tape.add(q, qup);
                let vlow = tape.matmul(a_in, va);
                let vup = tape.matmul(vlow, vb);
                let vup = tape.scale(vup, self.cfg.lora_scale);
                v = tape.add(v, vup);
            }
            let mut k = tape.matmul(a_in, wk);
            k = tape.add_row(k, bk);

            let qh = tape.reshape(q, &[s, h, dh]);
            let qh = tape.transpose(qh, &[1, 0, 2]);
            let kh = tape.reshape(k, &[s, h, dh]);
            let kh = tape.transpose(kh, &[1, 0, 2]);
            let vh = tape.reshape(v, &[s, h, dh]);
            let vh = tape.transpose(vh, &[1, 0, 2]);

            let kt = tape.transpose(kh, &[0, 2, 1]);
            let att = tape.batch_matmul(qh, kt);
            let att = tape.scale(att, 1.0 / (dh as f64).sqrt());
            let att = tape.add(att, mask);
            let att = tape.softmax_last(att);
            let oh = tape.batch_matmul(att, vh);
            let o = tape.transpose(oh, &[1, 0, 2]);
            let o = tape.reshape(o, &[s, d]);
            let o = tape.matmul(o, wo);
            let o = tape.add_row(o, bo);
            x = tape.add(x, o);

            let f_in = tape.layer_norm(x, ln2_g, ln2_b, 1e-5);
            let f = tape.matmul(f_in, w1);
            let f = tape.add_row(f, b1);
            let f = tape.silu(f);
            let f = tape.matmul(f, w2);
            let f = tape.add_row(f, b2);
            x = tape.add(x, f);
        }
        tape.layer_norm(x, staged.lnf_g, staged.lnf_b, 1e-5)
    }

    fn logits_on(&self, tape: &mut Tape<T>, staged: &StagedText, feats: TensorId) -> TensorId {
        let l = tape.matmul(feats, staged.w_out);
        tape.add_row(l, staged.b_out)
    }

    /// Mean per-token cross-entropy of one example under teacher forcing.
    /// Prompt rows contribute context only, never loss.
    fn example_loss_on(
        &self,
        tape: &mut Tape<T>,
        staged: &StagedText,
        ex: &TextExample,
    ) -> Result<TensorId, TextError> {
        let caption: Vec<usize> = self.vocab.encode(&ex.caption)?;
        let emotion_row = match ex.emotion {
            Some(e) => Some(self.emotion_row_on(tape, staged, e)),
            None => None,
        };
        let prompt = self.prompt_rows_on(tape, staged, emotion_row, &self.content_tokens(ex.concept));
        let l = tape.value(prompt).shape()[0];

        let rows = if caption.is_empty() {
            prompt
        } else {
            let cap_rows = tape.gather_rows(staged.tok_emb, &caption);
            tape.concat(0, &[prompt, cap_rows])
        };
        let feats = self.decode_rows(tape, staged, rows);
        let logits = self.logits_on(tape, staged, feats);

        let s = l + caption.len();
        let predict_pos: Vec<usize> = (l - 1..s).collect();
        let mut targets = caption.clone();
        targets.push(EOS_ID);
        let picked = tape.gather_rows(logits, &predict_pos);
        Ok(tape.cross_entropy_mean(picked, &targets))
    }

    /// Batch loss: mean over examples of per-example mean-CE. Returns the
    /// loss root and the staged trainable ids.
    fn batch_loss_graph(
        &self,
        tape: &mut Tape<T>,
        batch: &[TextExample],
        train: Option<TrainSet>,
        with_adapters: bool,
    ) -> Result<(TensorId, Vec<TensorId>), TextError> {
        assert!(!batch.is_empty(), "empty batch");
        let staged = self.stage(tape, train, with_adapters);
        let mut parts = Vec::with_capacity(batch.len());
        for ex in batch {
            let loss = self.example_loss_on(tape, &staged, ex)?;
            parts.push(tape.reshape(loss, &[1]));
        }
        let stacked = tape.concat(0, &parts);
        Ok((tape.mean_all(stacked), staged.trainable))
    }

    /// Loss of a single example with current weights, no gradients.
    pub fn example_loss(&self, ex: &TextExample) -> Result<f64, TextError> {
        let mut tape = Tape::new();
        let (root, _) = self.batch_loss_graph(&mut tape, std::slice::from_ref(ex), None, true)?;
        Ok(tape.scalar(root).to_f64())
    }

    fn sgd_phase(
        &mut self,
        set: TrainSet,
        mut next_batch: impl FnMut(usize) -> Vec<TextExample>,
        steps: usize,
        lr: f64,
        with_adapters: bool,
    ) -> Result<Vec<f64>, TextError> {
        let mut opt = Adam::new(lr).with_clip_norm(1.0);
        let mut curve = Vec::with_capacity(steps);
        for step in 0..steps {
            let batch = next_batch(step);
            let mut tape = Tape::new();
            let (root, trainable) = self.batch_loss_graph(&mut tape, &batch, Some(set), with_adapters)?;
            tape.backward(root);
            curve.push(tape.scalar(root).to_f64());
            let grads: Vec<ArrayD<T>> = trainable.iter().map(|&id| tape.grad_or_zeros(id)).collect();
            let mut params = self.params_mut(set);
            opt.step(&mut params, &grads);
        }
        Ok(curve)
    }

    /// Pretrain the base model on emotion-free captions. Adapters and
    /// emotion tokens stay exactly as initialized.
    pub fn pretrain_base(
        &mut self,
        steps: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>, TextError> {
        self.sgd_phase(
            TrainSet::Base,
            |step| {
                let mut rng = substream(seed, "textmodel/pretrain-batch", step as u64);
                (0..batch_size)
                    .map(|_| {
                        let concept = ContentConcept::from_index(rng.random_range(0..ContentConcept::ALL.len()));
                        let caption = crate::synthworld::pretrain_caption(concept, &mut rng);
                        TextExample { emotion: None, concept, caption }
                    })
                    .collect()
            },
            steps,
            lr,
            false,
        )
    }

    /// Train emotion tokens and adapters on labeled captions; the base
    /// model is staged as constants and cannot move.
    pub fn train_emotion(
        &mut self,
        data: &[Quadruplet],
        steps: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> Result<Vec<f64>, TextError> {
        assert!(!data.is_empty(), "no training data");
        self.sgd_phase(
            TrainSet::Emotion,
            |step| {
                let mut rng = substream(seed, "textmodel/emotion-batch", step as u64);
                (0..batch_size)
                    .map(|_| {
                        let q = &data[rng.random_range(0..data.len())];
                        TextExample {
                            emotion: Some(q.emotion),
                            concept: q.concept,
                            caption: q.caption.clone(),
                        }
                    })
                    .collect()
            },
            steps,
            lr,
            true,
        )
    }

    /// Next-token logits given explicit prompt rows and generated tokens.
    fn step_logits(
        &self,
        emotion_row: Option<Array1<T>>,
        content: &[usize],
        generated: &[usize],
    ) -> Vec<T> {
        let mut tape = Tape::new_inference();
        let staged = self.stage(&mut tape, None, true);
        let emotion_row = emotion_row.map(|r| {
            let d = r.len();
            tape.constant(r.into_dyn().into_shape_with_order(IxDyn(&[1, d])).unwrap())
        });
        let prompt = self.prompt_rows_on(&mut tape, &staged, emotion_row, content);
        let rows = if generated.is_empty() {
            prompt
        } else {
            let gen_rows = tape.gather_rows(staged.tok_emb, generated);
            tape.concat(0, &[prompt, gen_rows])
        };
        let feats = self.decode_rows(&mut tape, &staged, rows);
        let logits = self.logits_on(&mut tape, &staged, feats);
        let lv = tape.value(logits);
        let s = lv.shape()[0];
        lv.view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .row(s - 1)
            .to_vec()
    }

    fn finish_sampling(
        &self,
        emotion_row: Option<Array1<T>>,
        content: &[usize],
        temperature: f64,
        rng: Option<&mut ChaCha12Rng>,
    ) -> String {
        let mut generated: Vec<usize> = Vec::new();
        let mut rng = rng;
        for _ in 0..MAX_CAPTION_WORDS + 1 {
            let mut logits = self.step_logits(emotion_row.clone(), content, &generated);
            logits[PAD_ID] = T::from_f64(-1e30);
            logits[BOS_ID] = T::from_f64(-1e30);
            let next = match rng.as_deref_mut() {
                None => argmax_lowest(&logits),
                Some(r) => sample_categorical(&logits, temperature, r),
            };
            if next == EOS_ID {
                break;
            }
            generated.push(next);
        }
        self.vocab.decode(&generated)
    }

    /// Greedy decode with the trained token of `emotion` prepended.
    /// Ties break toward the lowest token id.
    pub fn sample_caption_greedy(&self, emotion: EmotionCategory, concept: ContentConcept) -> String {
        let row = self.emotion_token_row(emotion);
        self.finish_sampling(Some(row), &self.content_tokens(concept), 1.0, None)
    }

    /// Temperature sampling from the same conditioned distribution.
    pub fn sample_caption(
        &self,
        emotion: EmotionCategory,
        concept: ContentConcept,
        temperature: f64,
        rng: &mut ChaCha12Rng,
    ) -> String {
        let row = self.emotion_token_row(emotion);
        self.finish_sampling(Some(row), &self.content_tokens(concept), temperature, Some(rng))
    }

    /// Sampling with an arbitrary mixed emotion row.
    pub fn sample_caption_with_row(
        &self,
        row: Array1<T>,
        concept: ContentConcept,
        temperature: f64,
        rng: Option<&mut ChaCha12Rng>,
    ) -> String {
        self.finish_sampling(Some(row), &self.content_tokens(concept), temperature, rng)
    }

    /// Unconditioned greedy decode from the base model alone.
    pub fn sample_caption_neutral(&self, concept: ContentConcept) -> String {
        self.finish_sampling(None, &self.content_tokens(concept), 1.0, None)
    }

    /// Decode with no content hint at all: the emotion token is the whole
    /// prompt and the model picks its own subject.
    pub fn sample_caption_free(
        &self,
        emotion: EmotionCategory,
        temperature: f64,
        rng: Option<&mut ChaCha12Rng>,
    ) -> String {
        let row = self.emotion_token_row(emotion);
        self.finish_sampling(Some(row), &[], temperature, rng)
    }

    /// Decode with a free-text content hint in place of `"a {concept}"`.
    pub fn sample_caption_hinted(
        &self,
        emotion: EmotionCategory,
        hint: &str,
        temperature: f64,
        rng: Option<&mut ChaCha12Rng>,
    ) -> Result<String, TextError> {
        let content = self.vocab.encode(hint)?;
        let row = self.emotion_token_row(emotion);
        Ok(self.finish_sampling(Some(row), &content, temperature, rng))
    }

    /// Weighted blend of the emotion token rows, in token space.
    pub fn mixed_emotion_row(&self, weights: &[f64]) -> Array1<T> {
        mix_token_rows(&self.emo_tokens, weights)
    }

    pub fn emotion_token_row(&self, emotion: EmotionCategory) -> Array1<T> {
        self.emo_tokens
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .row(emotion.index())
            .to_owned()
    }

    pub fn emotion_tokens(&self) -> &ArrayD<T> {
        &self.emo_tokens
    }

    /// Snapshot of the base weights, for freeze verification.
    pub fn base_fingerprint(&mut self) -> Vec<ArrayD<T>> {
        self.params_mut(TrainSet::Base).iter().map(|p| (**p).clone()).collect()
    }
}

/// Weighted mix of per-emotion token rows. Zero-weight terms are skipped
/// entirely, so a one-hot weighting reproduces the single-emotion row
/// bit for bit.
pub fn mix_token_rows<T: Scalar>(tokens: &ArrayD<T>, weights: &[f64]) -> Array1<T> {
    let t2 = tokens.view().into_dimensionality::<Ix2>().expect("token table not 2-d");
    assert_eq!(t2.nrows(), weights.len(), "one weight per emotion row");
    let mut out = Array1::<T>::zeros(t2.ncols());
    let mut first = true;
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let row = t2.row(i);
        if first && w == 1.0 {
            out.assign(&row);
            first = false;
            continue;
        }
        first = false;
        let wt = T::from_f64(w);
        for (o, &r) in out.iter_mut().zip(row.iter()) {
            *o = *o + wt * r;
        }
    }
    out
}

fn argmax_lowest<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical<T: Scalar>(logits: &[T], temperature: f64, rng: &mut ChaCha12Rng) -> usize {
    assert!(temperature > 0.0, "temperature must be positive");
    let inv = 1.0 / temperature;
    let scaled: Vec<f64> = logits.iter().map(|&v| v.to_f64() * inv).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut u = rng.random_range(0.0..1.0) * total;
    for (i, &e) in exps.iter().enumerate() {
        u -= e;
        if u <= 0.0 {
            return i;
        }
    }
    exps.len() - 1
}

// Persistence; models train in f32, so only f32 models hit disk.

impl TextModel<f32> {
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let meta = serde_json::json!({
            "config": self.cfg,
            "vocab": self.vocab.words(),
        });
        let mut tensors: Vec<(String, &ArrayD<f32>)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("lnf_g".into(), &self.lnf_g),
            ("lnf_b".into(), &self.lnf_b),
            ("w_out".into(), &self.w_out),
            ("b_out".into(), &self.b_out),
            ("emo_tokens".into(), &self.emo_tokens),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in [
                ("ln1_g", &b.ln1_g), ("ln1_b", &b.ln1_b), ("wq", &b.wq), ("bq", &b.bq),
                ("wk", &b.wk), ("bk", &b.bk), ("wv", &b.wv), ("bv", &b.bv),
                ("wo", &b.wo), ("bo", &b.bo), ("ln2_g", &b.ln2_g), ("ln2_b", &b.ln2_b),
                ("w1", &b.w1), ("b1", &b.b1), ("w2", &b.w2), ("b2", &b.b2),
            ] {
                tensors.push((format!("block{i}/{name}"), t));
            }
        }
        for (i, a) in self.adapters.iter().enumerate() {
            for (name, t) in [("qa", &a.qa), ("qb", &a.qb), ("va", &a.va), ("vb", &a.vb)] {
                tensors.push((format!("adapter{i}/{name}"), t));
            }
        }
        let refs: Vec<(&str, &ArrayD<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        checkpoint::save(path, "text_model", &meta, &refs)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<TextModel<f32>, TextError> {
        let ck = checkpoint::load(path)?;
        if ck.kind != "text_model" {
            return Err(TextError::Invalid(format!("checkpoint kind {:?}", ck.kind)));
        }
        let cfg: TextModelConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| TextError::Invalid(format!("bad config in checkpoint: {e}")))?;
        let words: Vec<String> = serde_json::from_value(ck.meta["vocab"].clone())
            .map_err(|e| TextError::Invalid(format!("bad vocab in checkpoint: {e}")))?;
        let mut model = TextModel::<f32>::new(cfg, Vocabulary::from_words(words), 0);
        let take = |name: &str| -> Result<ArrayD<f32>, TextError> { Ok(ck.tensor(name)?.clone()) };
        model.tok_emb = take("tok_emb")?;
        model.pos_emb = take("pos_emb")?;
        model.lnf_g = take("lnf_g")?;
        model.lnf_b = take("lnf_b")?;
        model.w_out = take("w_out")?;
        model.b_out = take("b_out")?;
        model.emo_tokens = take("emo_tokens")?;
        for (i, b) in model.blocks.iter_mut().enumerate() {
            b.ln1_g = take(&format!("block{i}/ln1_g"))?;
            b.ln1_b = take(&format!("block{i}/ln1_b"))?;
            b.wq = take(&format!("block{i}/wq"))?;
            b.bq = take(&format!("block{i}/bq"))?;
            b.wk = take(&format!("block{i}/wk"))?;
            b.bk = take(&format!("block{i}/bk"))?;
            b.wv = take(&format!("block{i}/wv"))?;
            b.bv = take(&format!("block{i}/bv"))?;
            b.wo = take(&format!("block{i}/wo"))?;
            b.bo = take(&format!("block{i}/bo"))?;
            b.ln2_g = take(&format!("block{i}/ln2_g"))?;
            b.ln2_b = take(&format!("block{i}/ln2_b"))?;
            b.w1 = take(&format!("block{i}/w1"))?;
            b.b1 = take(&format!("block{i}/b1"))?;
            b.w2 = take(&format!("block{i}/w2"))?;
            b.b2 = take(&format!("block{i}/b2"))?;
        }
        for (i, a) in model.adapters.iter_mut().enumerate() {
            a.qa = take(&format!("adapter{i}/qa"))?;
            a.qb = take(&format!("adapter{i}/qb"))?;
            a.va = take(&format!("adapter{i}/va"))?;
            a.vb = take(&format!("adapter{i}/vb"))?;
        }
        Ok(model)
    }
}

fn selfcheck_cfg() -> TextModelConfig {
    TextModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq: 24,
        lora_rank: 2,
        lora_scale: 1.0,
    }
}

/// Worst relative disagreement between analytic and central-difference
/// gradients of the emotion-phase caption loss (emotion token plus
/// adapters) on a small `f64` model. A correct build stays under 1e-4.
pub fn caption_gradient_error() -> f64 {
    use crate::nn::gradcheck::{fd_grad, max_rel_err};
    let cfg = selfcheck_cfg();
    let mut m = TextModel::<f64>::new(cfg.clone(), Vocabulary::core(), 3);
    // Break the zero-init adapter symmetry so every gradient is generic.
    let mut rng = substream(3, "textmodel/selfcheck-warm", 0);
    for p in m.params_mut(TrainSet::Emotion) {
        for v in p.iter_mut() {
            *v += 0.05 * f64::sample_standard_normal(&mut rng);
        }
    }
    let ex = TextExample {
        emotion: Some(EmotionCategory::Fear),
        concept: ContentConcept::Ring,
        caption: "a dark ring in a eerie scene".into(),
    };

    let mut tape = Tape::new();
    let (root, trainable) = m
        .batch_loss_graph(&mut tape, std::slice::from_ref(&ex), Some(TrainSet::Emotion), true)
        .expect("loss graph");
    tape.backward(root);
    let analytic: Vec<ArrayD<f64>> = trainable.iter().map(|&id| tape.grad_or_zeros(id)).collect();

    let base: Vec<ArrayD<f64>> =
        m.params_mut(TrainSet::Emotion).iter().map(|p| (**p).clone()).collect();
    let numeric = fd_grad(
        |ps: &[ArrayD<f64>]| {
            // Same config and seed reproduce the base weights exactly;
            // only the probed trainables are overwritten.
            let mut probe = TextModel::<f64>::new(cfg.clone(), Vocabulary::core(), 3);
            for (dst, src) in probe.params_mut(TrainSet::Emotion).into_iter().zip(ps.iter()) {
                *dst = src.clone();
            }
            probe.example_loss(&ex).expect("probe loss")
        },
        &base,
        1e-5,
    );
    max_rel_err(&analytic, &numeric)
}

/// Worst absolute loss difference between decoding with freshly
/// initialized (all-zero) adapters and with the adapter path disabled,
/// over a handful of labeled captions. Exactly zero when low-rank updates
/// truly start as the identity.
pub fn zero_adapter_identity_error() -> f64 {
    let m = TextModel::<f64>::new(selfcheck_cfg(), Vocabulary::core(), 2);
    let data = crate::synthworld::generate_dataset(6, 0, 9);
    let mut worst = 0.0f64;
    for q in &data.train {
        let ex = TextExample {
            emotion: Some(q.emotion),
            concept: q.concept,
            caption: q.caption.clone(),
        };
        let mut t1 = Tape::new();
        let (r1, _) = m
            .batch_loss_graph(&mut t1, std::slice::from_ref(&ex), None, true)
            .expect("adapter loss");
        let mut t2 = Tape::new();
        let (r2, _) = m
            .batch_loss_graph(&mut t2, std::slice::from_ref(&ex), None, false)
            .expect("base loss");
        worst = worst.max((t1.scalar(r1) - t2.scalar(r2)).abs());
    }
    worst
}

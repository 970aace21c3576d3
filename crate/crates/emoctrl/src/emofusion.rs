//! Visual emotion conditioning: prompt encoding, token cross-attention,
//! residual injection.
//!
//! A caption is encoded by a small bidirectional text encoder into a fixed
//! `n_max x d2` feature block `f_v` (unused rows are zero and flagged as
//! padding). Eight learnable visual emotion tokens provide keys and values
//! for a single-head cross-attention in which `f_v` queries the selected
//! token(s); the result `f_e` is folded back as `c_v = f_v + alpha * f_e`.
//! `c_v` is the only conditioning signal the diffusion model ever sees.
//!
//! Everything here trains jointly with the denoiser, so all forwards are
//! expressed as tape graphs.

use ndarray::{Array2, Array3, ArrayD, Ix2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::nn::{randn, randn_fan_in, zeros, Scalar, Tape, TensorId};
use crate::rng::substream;
use crate::synthworld::{EmotionCategory, EMOTION_COUNT};
use crate::textmodel::{TextError, Vocabulary};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Width of prompt features and visual tokens.
    pub d2: usize,
    /// Fixed row count of every conditioning block.
    pub n_max: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { d2: 64, n_max: 16, n_heads: 2, d_ff: 128 }
    }
}

/// Which emotion token(s) provide keys and values.
#[derive(Debug, Clone, PartialEq)]
pub enum EmotionSelection {
    Single(EmotionCategory),
    /// Simplex weights over the eight emotions. A one-hot weighting is
    /// canonicalized to `Single`, so both spellings take the same code
    /// path and produce identical bits.
    Mixed([f64; EMOTION_COUNT]),
}

impl EmotionSelection {
    pub fn validate(&self) -> Result<(), TextError> {
        if let EmotionSelection::Mixed(w) = self {
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(TextError::Invalid("mix weights must be finite and nonnegative".into()));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(TextError::Invalid(format!("mix weights sum to {sum}, expected 1")));
            }
        }
        Ok(())
    }

    /// Collapse an exact one-hot mix to its `Single` form so both paths
    /// share one code path and produce identical bytes.
    pub fn canonical(&self) -> EmotionSelection {
        if let EmotionSelection::Mixed(w) = self {
            let ones = w.iter().filter(|&&v| v == 1.0).count();
            let zeros = w.iter().filter(|&&v| v == 0.0).count();
            if ones == 1 && ones + zeros == w.len() {
                let k = w.iter().position(|&v| v == 1.0).unwrap();
                return EmotionSelection::Single(EmotionCategory::from_index(k));
            }
        }
        self.clone()
    }
}

/// Which rows of an encoded prompt are real tokens, plus whether the
/// caption had to be cut to fit.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptMask {
    pub real: Vec<bool>,
    pub truncated: bool,
}

impl PromptMask {
    pub fn real_count(&self) -> usize {
        self.real.iter().filter(|&&r| r).count()
    }
}

pub struct EmoFusion<T: Scalar> {
    pub cfg: FusionConfig,
    pub vocab: Vocabulary,
    emb: ArrayD<T>,
    pos: ArrayD<T>,
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
    lnf_g: ArrayD<T>,
    lnf_b: ArrayD<T>,
    /// Fusion projections, stored so that `Q = f_v W_Q` etc.
    fus_wq: ArrayD<T>,
    fus_wk: ArrayD<T>,
    fus_wv: ArrayD<T>,
    /// One learnable row per emotion, `[8, d2]`.
    vis_tokens: ArrayD<T>,
}

pub(crate) struct StagedFusion {
    emb: TensorId,
    pos: TensorId,
    ln1_g: TensorId,
    ln1_b: TensorId,
    wq: TensorId,
    bq: TensorId,
    wk: TensorId,
    bk: TensorId,
    wv: TensorId,
    bv: TensorId,
    wo: TensorId,
    bo: TensorId,
    ln2_g: TensorId,
    ln2_b: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
    lnf_g: TensorId,
    lnf_b: TensorId,
    fus_wq: TensorId,
    fus_wk: TensorId,
    fus_wv: TensorId,
    vis_tokens: TensorId,
    pub trainable: Vec<TensorId>,
}

impl<T: Scalar> EmoFusion<T> {
    pub fn new(cfg: FusionConfig, vocab: Vocabulary, seed: u64) -> Self {
        assert!(cfg.d2 % cfg.n_heads == 0, "heads must divide feature width");
        let d = cfg.d2;
        let v = vocab.len();
        let mut rng = substream(seed, "emofusion/init", 0);
        EmoFusion {
            emb: randn(&[v, d], 0.02, &mut rng),
            pos: randn(&[cfg.n_max, d], 0.01, &mut rng),
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
            lnf_g: ArrayD::ones(IxDyn(&[d])),
            lnf_b: zeros(&[d]),
            fus_wq: randn_fan_in(&[d, d], d, &mut rng),
            fus_wk: randn_fan_in(&[d, d], d, &mut rng),
            fus_wv: randn_fan_in(&[d, d], d, &mut rng),
            vis_tokens: randn(&[EMOTION_COUNT, d], 0.02, &mut rng),
            cfg,
            vocab,
        }
    }

    /// Mutable parameter list in the fixed order `stage` mirrors.
    pub fn params_mut(&mut self) -> Vec<&mut ArrayD<T>> {
        vec![
            &mut self.emb, &mut self.pos, &mut self.ln1_g, &mut self.ln1_b, &mut self.wq,
            &mut self.bq, &mut self.wk, &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo,
            &mut self.bo, &mut self.ln2_g, &mut self.ln2_b, &mut self.w1, &mut self.b1,
            &mut self.w2, &mut self.b2, &mut self.lnf_g, &mut self.lnf_b, &mut self.fus_wq,
            &mut self.fus_wk, &mut self.fus_wv, &mut self.vis_tokens,
        ]
    }

    fn param_list(&self) -> Vec<&ArrayD<T>> {
        vec![
            &self.emb, &self.pos, &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk,
            &self.bk, &self.wv, &self.bv, &self.wo, &self.bo, &self.ln2_g, &self.ln2_b,
            &self.w1, &self.b1, &self.w2, &self.b2, &self.lnf_g, &self.lnf_b, &self.fus_wq,
            &self.fus_wk, &self.fus_wv, &self.vis_tokens,
        ]
    }

    pub(crate) fn stage(&self, tape: &mut Tape<T>, trainable: bool) -> StagedFusion {
        let mut ids = Vec::with_capacity(24);
        let mut train_ids = Vec::new();
        for w in self.param_list() {
            if trainable {
                let id = tape.param(w.clone());
                train_ids.push(id);
                ids.push(id);
            } else {
                ids.push(tape.constant(w.clone()));
            }
        }
        StagedFusion {
            emb: ids[0],
            pos: ids[1],
            ln1_g: ids[2],
            ln1_b: ids[3],
            wq: ids[4],
            bq: ids[5],
            wk: ids[6],
            bk: ids[7],
            wv: ids[8],
            bv: ids[9],
            wo: ids[10],
            bo: ids[11],
            ln2_g: ids[12],
            ln2_b: ids[13],
            w1: ids[14],
            b1: ids[15],
            w2: ids[16],
            b2: ids[17],
            lnf_g: ids[18],
            lnf_b: ids[19],
            fus_wq: ids[20],
            fus_wk: ids[21],
            fus_wv: ids[22],
            vis_tokens: ids[23],
            trainable: train_ids,
        }
    }

    /// Tokenize a caption, truncating to `n_max` rows.
    pub fn caption_tokens(&self, caption: &str) -> Result<(Vec<usize>, bool), TextError> {
        let mut ids = self.vocab.encode(caption)?;
        let truncated = ids.len() > self.cfg.n_max;
        ids.truncate(self.cfg.n_max);
        Ok((ids, truncated))
    }

    /// Bidirectional encoding of caption tokens into a fixed-size block.
    /// Rows past the caption are zero and reported as padding; an empty
    /// caption is all padding.
    pub(crate) fn encode_prompt_on(
        &self,
        tape: &mut Tape<T>,
        staged: &StagedFusion,
        tokens: &[usize],
        truncated: bool,
    ) -> (TensorId, PromptMask) {
        let n_max = self.cfg.n_max;
        assert!(tokens.len() <= n_max, "caption tokens must be pre-truncated");
        let l = tokens.len();
        let mut real = vec![false; n_max];
        for r in real.iter_mut().take(l) {
            *r = true;
        }
        let mask = PromptMask { real, truncated };

        if l == 0 {
            let z = tape.constant(ArrayD::zeros(IxDyn(&[n_max, self.cfg.d2])));
            return (z, mask);
        }

        let d = self.cfg.d2;
        let h = self.cfg.n_heads;
        let dh = d / h;
        let tok_rows = tape.gather_rows(staged.emb, tokens);
        let positions: Vec<usize> = (0..l).collect();
        let pos_rows = tape.gather_rows(staged.pos, &positions);
        let mut x = tape.add(tok_rows, pos_rows);

        let a_in = tape.layer_norm(x, staged.ln1_g, staged.ln1_b, 1e-5);
        let q = tape.matmul(a_in, staged.wq);
        let q = tape.add_row(q, staged.bq);
        let k = tape.matmul(a_in, staged.wk);
        let k = tape.add_row(k, staged.bk);
        let v = tape.matmul(a_in, staged.wv);
        let v = tape.add_row(v, staged.bv);
        let qh = tape.reshape(q, &[l, h, dh]);
        let qh = tape.transpose(qh, &[1, 0, 2]);
        let kh = tape.reshape(k, &[l, h, dh]);
        let kh = tape.transpose(kh, &[1, 0, 2]);
        let vh = tape.reshape(v, &[l, h, dh]);
        let vh = tape.transpose(vh, &[1, 0, 2]);
        let kt = tape.transpose(kh, &[0, 2, 1]);
        let att = tape.batch_matmul(qh, kt);
        let att = tape.scale(att, 1.0 / (dh as f64).sqrt());
        let att = tape.softmax_last(att);
        let oh = tape.batch_matmul(att, vh);
        let o = tape.transpose(oh, &[1, 0, 2]);
        let o = tape.reshape(o, &[l, d]);
        let o = tape.matmul(o, staged.wo);
        let o = tape.add_row(o, staged.bo);
        x = tape.add(x, o);

        let f_in = tape.layer_norm(x, staged.ln2_g, staged.ln2_b, 1e-5);
        let f = tape.matmul(f_in, staged.w1);
        let f = tape.add_row(f, staged.b1);
        let f = tape.silu(f);
        let f = tape.matmul(f, staged.w2);
        let f = tape.add_row(f, staged.b2);
        x = tape.add(x, f);
        let x = tape.layer_norm(x, staged.lnf_g, staged.lnf_b, 1e-5);

        let out = if l == n_max {
            x
        } else {
            let pad = tape.constant(ArrayD::zeros(IxDyn(&[n_max - l, d])));
            tape.concat(0, &[x, pad])
        };
        (out, mask)
    }

    /// Key/value rows for the selected emotion(s): the single token row,
    /// or the weight-scaled rows of every emotion with nonzero weight.
    pub(crate) fn kv_rows_on(
        &self,
        tape: &mut Tape<T>,
        staged: &StagedFusion,
        selection: &EmotionSelection,
    ) -> TensorId {
        match selection.canonical() {
            EmotionSelection::Single(e) => tape.gather_rows(staged.vis_tokens, &[e.index()]),
            EmotionSelection::Mixed(w) => {
                let mut parts = Vec::new();
                for (k, &wk) in w.iter().enumerate() {
                    if wk == 0.0 {
                        continue;
                    }
                    let row = tape.gather_rows(staged.vis_tokens, &[k]);
                    parts.push(tape.scale(row, wk));
                }
                assert!(!parts.is_empty(), "mix weights select no emotion");
                tape.concat(0, &parts)
            }
        }
    }

    /// Single-head cross-attention of prompt rows onto emotion tokens:
    /// `f_e = softmax(Q K^T / sqrt(d2)) V` with `Q = f_v W_Q`,
    /// `K = kv W_K`, `V = kv W_V`. Padding rows of the output are zeroed.
    pub(crate) fn cross_attend_on(
        &self,
        tape: &mut Tape<T>,
        staged: &StagedFusion,
        f_v: TensorId,
        kv: TensorId,
        mask: &PromptMask,
    ) -> TensorId {
        let d = self.cfg.d2;
        assert_eq!(tape.value(f_v).shape(), [self.cfg.n_max, d], "prompt feature shape");
        assert_eq!(tape.value(kv).shape()[1], d, "token width");
        let q = tape.matmul(f_v, staged.fus_wq);
        let k = tape.matmul(kv, staged.fus_wk);
        let v = tape.matmul(kv, staged.fus_wv);
        let kt = tape.transpose(k, &[1, 0]);
        let att = tape.matmul(q, kt);
        let att = tape.scale(att, 1.0 / (d as f64).sqrt());
        let att = tape.softmax_last(att);
        let f_e = tape.matmul(att, v);

        let mut keep = Array2::<T>::zeros((self.cfg.n_max, d));
        for (i, &r) in mask.real.iter().enumerate() {
            if r {
                keep.row_mut(i).fill(T::one());
            }
        }
        let keep = tape.constant(keep.into_dyn());
        tape.mul(f_e, keep)
    }

    /// Residual injection `c_v = f_v + alpha * f_e`. A zero alpha returns
    /// `f_v` itself: no arithmetic touches it.
    pub(crate) fn inject_on(
        &self,
        tape: &mut Tape<T>,
        f_v: TensorId,
        f_e: TensorId,
        alpha: f64,
    ) -> TensorId {
        assert!(alpha.is_finite(), "alpha must be finite");
        if alpha == 0.0 {
            return f_v;
        }
        let scaled = tape.scale(f_e, alpha);
        tape.add(f_v, scaled)
    }

    /// Full conditioning path: encode, cross-attend, inject. With
    /// `alpha = 0` the emotion tokens are never consulted, so the result
    /// is the emotion-free encoding for any selection.
    pub(crate) fn condition_on(
        &self,
        tape: &mut Tape<T>,
        staged: &StagedFusion,
        selection: &EmotionSelection,
        tokens: &[usize],
        truncated: bool,
        alpha: f64,
    ) -> (TensorId, PromptMask) {
        let (f_v, mask) = self.encode_prompt_on(tape, staged, tokens, truncated);
        if alpha == 0.0 {
            return (f_v, mask);
        }
        let kv = self.kv_rows_on(tape, staged, selection);
        let f_e = self.cross_attend_on(tape, staged, f_v, kv, &mask);
        let c_v = self.inject_on(tape, f_v, f_e, alpha);
        (c_v, mask)
    }

    /// Conditioning as plain arrays, for inference-time callers.
    pub fn condition(
        &self,
        selection: &EmotionSelection,
        caption: &str,
        alpha: f64,
    ) -> Result<(Array2<T>, PromptMask), TextError> {
        selection.validate()?;
        let (tokens, truncated) = self.caption_tokens(caption)?;
        let mut tape = Tape::new_inference();
        let staged = self.stage(&mut tape, false);
        let (c_v, mask) = self.condition_on(&mut tape, &staged, selection, &tokens, truncated, alpha);
        let arr = tape.value(c_v).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        Ok((arr, mask))
    }

    pub fn visual_tokens(&self) -> &ArrayD<T> {
        &self.vis_tokens
    }

    fn named_fields(&mut self) -> Vec<(&'static str, &mut ArrayD<T>)> {
        vec![
            ("prompt_encoder/emb", &mut self.emb),
            ("prompt_encoder/pos", &mut self.pos),
            ("prompt_encoder/ln1_g", &mut self.ln1_g),
            ("prompt_encoder/ln1_b", &mut self.ln1_b),
            ("prompt_encoder/wq", &mut self.wq),
            ("prompt_encoder/bq", &mut self.bq),
            ("prompt_encoder/wk", &mut self.wk),
            ("prompt_encoder/bk", &mut self.bk),
            ("prompt_encoder/wv", &mut self.wv),
            ("prompt_encoder/bv", &mut self.bv),
            ("prompt_encoder/wo", &mut self.wo),
            ("prompt_encoder/bo", &mut self.bo),
            ("prompt_encoder/ln2_g", &mut self.ln2_g),
            ("prompt_encoder/ln2_b", &mut self.ln2_b),
            ("prompt_encoder/w1", &mut self.w1),
            ("prompt_encoder/b1", &mut self.b1),
            ("prompt_encoder/w2", &mut self.w2),
            ("prompt_encoder/b2", &mut self.b2),
            ("prompt_encoder/lnf_g", &mut self.lnf_g),
            ("prompt_encoder/lnf_b", &mut self.lnf_b),
            ("fusion/wq", &mut self.fus_wq),
            ("fusion/wk", &mut self.fus_wk),
            ("fusion/wv", &mut self.fus_wv),
            ("visual_tokens", &mut self.vis_tokens),
        ]
    }
}

impl EmoFusion<f32> {
    /// Named tensors for embedding into a larger checkpoint.
    pub fn tensor_entries(&mut self) -> Vec<(String, ArrayD<f32>)> {
        self.named_fields()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    pub fn load_from(&mut self, ck: &Checkpoint) -> Result<(), TextError> {
        for (name, field) in self.named_fields() {
            let t = ck.tensor(name)?;
            if t.shape() != field.shape() {
                return Err(TextError::Invalid(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    field.shape()
                )));
            }
            *field = t.clone();
        }
        Ok(())
    }
}

/// Attention weights of the fusion block for inspection, `[n_max, m]`.
/// Rows sum to one by construction.
pub fn attention_rows<T: Scalar>(
    fusion: &EmoFusion<T>,
    selection: &EmotionSelection,
    caption: &str,
) -> Result<Array2<T>, TextError> {
    let (tokens, truncated) = fusion.caption_tokens(caption)?;
    let mut tape = Tape::new_inference();
    let staged = fusion.stage(&mut tape, false);
    let (f_v, _) = fusion.encode_prompt_on(&mut tape, &staged, &tokens, truncated);
    let kv = fusion.kv_rows_on(&mut tape, &staged, selection);
    let d = fusion.cfg.d2;
    let q = tape.matmul(f_v, staged.fus_wq);
    let k = tape.matmul(kv, staged.fus_wk);
    let kt = tape.transpose(k, &[1, 0]);
    let att = tape.matmul(q, kt);
    let att = tape.scale(att, 1.0 / (d as f64).sqrt());
    let att = tape.softmax_last(att);
    Ok(tape.value(att).view().into_dimensionality::<Ix2>().unwrap().to_owned())
}

/// Stack per-sample conditioning blocks and additive attention masks for
/// batched image cross-attention: `[b, n_max, d2]` plus `[b, hw, n_max]`
/// where masked key columns hold a large negative value.
pub fn batch_condition_mask<T: Scalar>(masks: &[PromptMask], n_max: usize, hw: usize) -> Array3<T> {
    let ninf = T::from_f64(-1e9);
    let mut out = Array3::<T>::zeros((masks.len(), hw, n_max));
    for (bi, m) in masks.iter().enumerate() {
        assert_eq!(m.real.len(), n_max, "mask length mismatch");
        for (j, &r) in m.real.iter().enumerate() {
            if !r {
                for i in 0..hw {
                    out[[bi, i, j]] = ninf;
                }
            }
        }
    }
    out
}

/// With exactly one visual token, attention over the key axis is a
/// softmax over a single element and every attended row must equal the
/// token's value projection, with padding rows exactly zero. Returns the
/// worst deviation on a small `f64` model; exact arithmetic gives zero.
pub fn singleton_collapse_error() -> f64 {
    use ndarray::Ix2;
    let f = EmoFusion::<f64>::new(
        FusionConfig { d2: 8, n_max: 8, n_heads: 2, d_ff: 16 },
        Vocabulary::core(),
        11,
    );
    let mut tape = Tape::new();
    let staged = f.stage(&mut tape, false);
    let (tokens, trunc) = f.caption_tokens("a dark ring in a eerie scene").expect("caption");
    let (f_v, mask) = f.encode_prompt_on(&mut tape, &staged, &tokens, trunc);
    let kv = f.kv_rows_on(&mut tape, &staged, &EmotionSelection::Single(EmotionCategory::Anger));
    let f_e = f.cross_attend_on(&mut tape, &staged, f_v, kv, &mask);

    let wv = f.fus_wv.view().into_dimensionality::<Ix2>().unwrap();
    let tok = f
        .vis_tokens
        .view()
        .into_dimensionality::<Ix2>()
        .unwrap()
        .row(EmotionCategory::Anger.index())
        .to_owned();
    let expect = tok.dot(&wv);
    let got = tape.value(f_e).view().into_dimensionality::<Ix2>().unwrap().to_owned();
    let mut worst = 0.0f64;
    for (i, &real) in mask.real.iter().enumerate() {
        for (j, &g) in got.row(i).iter().enumerate() {
            let want = if real { expect[j] } else { 0.0 };
            worst = worst.max((g - want).abs());
        }
    }
    worst
}

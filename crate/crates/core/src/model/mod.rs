//! The fusion transformer with one shared masked-language-modeling head.
//!
//! Video patches are projected straight to the fusion width and concatenated
//! with text embeddings (`[video | text]`); a pre-norm transformer stack fuses
//! both. The [`mlm_head`](Session::mlm_logits) maps hidden rows to vocabulary
//! logits and is the only output head of the unified model. The optional
//! baseline heads exist only for the task-specific comparison model.

mod attention;
mod checkpoint;
mod params;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use attention::{build_attention_matrix, AttentionMode};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{BaselineKind, Binder, Param, ParamGrads, ParamGroup, ParamId, ParamStore};

use crate::tensor::{Tape, Tensor, TensorError, Var};
use crate::text::TokenId;
use crate::vision::{embed_patches, PatchEmbedVars, PatchGrid, VisionError};

/// Smallest vocabulary the reserved id layout fits into.
pub const MIN_VOCAB: usize = 17;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input does not fit the model: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vision(#[from] VisionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Output sizes of the task-specific baseline heads.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineHeads {
    pub mc_choices: usize,
    pub oe_answers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Fusion width `d`.
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    /// Frames sampled per clip.
    pub frames: usize,
    /// Rows of the temporal position table; bounds `frames`.
    pub max_frames: usize,
    pub frame_height: usize,
    pub frame_width: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    /// Width of the per-patch visual feature fed to the projection's output
    /// side. Patches are projected directly, so this equals `width`.
    pub vision_feature_dim: usize,
    pub max_text_len: usize,
    /// Reuse the token embedding table as the MLM output matrix.
    pub tie_embeddings: bool,
    pub layer_norm_eps: f64,
    /// Standard deviation of embedding initialisation.
    pub init_std: f64,
    pub dropout: f64,
    pub baseline_heads: Option<BaselineHeads>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            layers: 2,
            heads: 4,
            ffn_mult: 4,
            vocab_size: 64,
            frames: 4,
            max_frames: 8,
            frame_height: 32,
            frame_width: 32,
            patch_height: 8,
            patch_width: 8,
            vision_feature_dim: 32,
            max_text_len: 40,
            tie_embeddings: false,
            layer_norm_eps: 1e-5,
            init_std: 0.02,
            dropout: 0.0,
            baseline_heads: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.vocab_size < MIN_VOCAB {
            return fail(format!("vocab_size {} below reserved {MIN_VOCAB}", self.vocab_size));
        }
        if self.vision_feature_dim != self.width {
            return fail("vision_feature_dim must equal width".into());
        }
        if self.frames == 0 || self.frames > self.max_frames {
            return fail(format!("frames {} outside 1..={}", self.frames, self.max_frames));
        }
        if self.patch_height == 0
            || self.patch_width == 0
            || self.frame_height % self.patch_height != 0
            || self.frame_width % self.patch_width != 0
        {
            return fail("frame size not divisible by patch size".into());
        }
        if self.max_text_len < 2 || self.ffn_mult == 0 {
            return fail("max_text_len must be >= 2 and ffn_mult >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let Some(b) = &self.baseline_heads {
            if b.mc_choices == 0 || b.oe_answers == 0 {
                return fail("baseline head sizes must be positive".into());
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn grid_cells(&self) -> usize {
        (self.frame_height / self.patch_height) * (self.frame_width / self.patch_width)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_height * self.patch_width * 3
    }

    /// Video positions fed to the fusion encoder for `frames` sampled frames.
    pub fn video_len(&self, frames: usize) -> usize {
        frames * self.grid_cells()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct MlpIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct HeadIds {
    dense_w: ParamId,
    dense_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    out_w: Option<ParamId>,
    out_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Ids {
    tok_emb: ParamId,
    text_pos: ParamId,
    patch_w: ParamId,
    patch_b: ParamId,
    spatial: ParamId,
    temporal: ParamId,
    text_ln: (ParamId, ParamId),
    video_ln: (ParamId, ParamId),
    layers: Vec<LayerIds>,
    head: HeadIds,
    baseline: Option<[MlpIds; 3]>,
}

/// Parameter counts split by role.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCounts {
    /// Embeddings and fusion stack.
    pub backbone: usize,
    /// The shared MLM head.
    pub mlm_head: usize,
    /// Each baseline head, in [`BaselineKind::ALL`] order.
    pub baseline: Vec<(BaselineKind, usize)>,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.backbone + self.mlm_head + self.baseline.iter().map(|(_, n)| n).sum::<usize>()
    }

    /// Number of separately parameterised output heads.
    pub fn head_count(&self) -> usize {
        1 + self.baseline.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: Option<ChaCha8Rng>,
    embed_std: f64,
}

impl Init<'_> {
    fn weight(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize) -> ParamId {
        let std = 1.0 / (rows as f64).sqrt();
        let t = match &mut self.rng {
            Some(r) => Tensor::randn(&[rows, cols], std, r),
            None => Tensor::zeros(&[rows, cols]),
        };
        self.store.add(name, group, true, t)
    }

    /// Output projection: small enough that initial logits are near zero.
    fn output(&mut self, name: &str, group: ParamGroup, rows: usize, cols: usize) -> ParamId {
        let std = self.embed_std;
        let t = match &mut self.rng {
            Some(r) => Tensor::randn(&[rows, cols], std, r),
            None => Tensor::zeros(&[rows, cols]),
        };
        self.store.add(name, group, true, t)
    }

    /// Video position tables start at the scale of the normalized patch
    /// features so frame order is visible from the first step.
    fn position(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let t = match &mut self.rng {
            Some(r) => Tensor::randn(&[rows, cols], 1.0, r),
            None => Tensor::zeros(&[rows, cols]),
        };
        self.store.add(name, ParamGroup::Backbone, true, t)
    }

    fn embedding(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let std = self.embed_std;
        let t = match &mut self.rng {
            Some(r) => Tensor::randn(&[rows, cols], std, r),
            None => Tensor::zeros(&[rows, cols]),
        };
        self.store.add(name, ParamGroup::Backbone, true, t)
    }

    fn bias(&mut self, name: &str, group: ParamGroup, n: usize) -> ParamId {
        self.store.add(name, group, false, Tensor::zeros(&[n]))
    }

    fn gain(&mut self, name: &str, group: ParamGroup, n: usize) -> ParamId {
        self.store.add(name, group, false, Tensor::ones(&[n]))
    }

    fn mlp(&mut self, prefix: &str, group: ParamGroup, d: usize, out: usize) -> MlpIds {
        MlpIds {
            w1: self.weight(&format!("{prefix}.w1"), group, d, d),
            b1: self.bias(&format!("{prefix}.b1"), group, d),
            w2: self.output(&format!("{prefix}.w2"), group, d, out),
            b2: self.bias(&format!("{prefix}.b2"), group, out),
        }
    }
}

impl Model {
    /// Randomly initialised model; the stream of draws depends only on `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, Some(ChaCha8Rng::seed_from_u64(seed)))
    }

    /// All weights, embeddings and biases zero; layer-norm gains one.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        Self::build(config, None)
    }

    fn build(config: ModelConfig, rng: Option<ChaCha8Rng>) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            rng,
            embed_std: config.init_std,
        };
        let d = config.width;
        let bb = ParamGroup::Backbone;
        let tok_emb = init.embedding("embed.tokens", config.vocab_size, d);
        let text_pos = init.embedding("embed.text_pos", config.max_text_len, d);
        let patch_w = init.weight("vision.proj.w", bb, config.patch_len(), d);
        let patch_b = init.bias("vision.proj.b", bb, d);
        let spatial = init.position("vision.spatial_pos", config.grid_cells(), d);
        let temporal = init.position("vision.temporal_pos", config.max_frames, d);
        let text_ln = (init.gain("embed.ln.g", bb, d), init.bias("embed.ln.b", bb, d));
        let video_ln = (init.gain("vision.ln.g", bb, d), init.bias("vision.ln.b", bb, d));
        let ff = d * config.ffn_mult;
        let layers = (0..config.layers)
            .map(|l| {
                let p = |s: &str| format!("layers.{l}.{s}");
                LayerIds {
                    ln1_g: init.gain(&p("ln1.g"), bb, d),
                    ln1_b: init.bias(&p("ln1.b"), bb, d),
                    qkv_w: init.weight(&p("attn.qkv.w"), bb, d, 3 * d),
                    qkv_b: init.bias(&p("attn.qkv.b"), bb, 3 * d),
                    out_w: init.weight(&p("attn.out.w"), bb, d, d),
                    out_b: init.bias(&p("attn.out.b"), bb, d),
                    ln2_g: init.gain(&p("ln2.g"), bb, d),
                    ln2_b: init.bias(&p("ln2.b"), bb, d),
                    ff1_w: init.weight(&p("ffn.w1"), bb, d, ff),
                    ff1_b: init.bias(&p("ffn.b1"), bb, ff),
                    ff2_w: init.weight(&p("ffn.w2"), bb, ff, d),
                    ff2_b: init.bias(&p("ffn.b2"), bb, d),
                }
            })
            .collect();
        let hg = ParamGroup::MlmHead;
        let head = HeadIds {
            dense_w: init.weight("mlm_head.dense.w", hg, d, d),
            dense_b: init.bias("mlm_head.dense.b", hg, d),
            ln_g: init.gain("mlm_head.ln.g", hg, d),
            ln_b: init.bias("mlm_head.ln.b", hg, d),
            out_w: (!config.tie_embeddings)
                .then(|| init.output("mlm_head.out.w", hg, d, config.vocab_size)),
            out_b: init.bias("mlm_head.out.b", hg, config.vocab_size),
        };
        let baseline = config.baseline_heads.as_ref().map(|b| {
            BaselineKind::ALL.map(|kind| {
                let out = match kind {
                    BaselineKind::VtmBinary => 1,
                    BaselineKind::McClassifier => b.mc_choices,
                    BaselineKind::OeClassifier => b.oe_answers,
                };
                init.mlp(
                    &format!("baseline.{}", kind.name()),
                    ParamGroup::Baseline(kind),
                    d,
                    out,
                )
            })
        });
        let ids = Ids {
            tok_emb,
            text_pos,
            patch_w,
            patch_b,
            spatial,
            temporal,
            text_ln,
            video_ln,
            layers,
            head,
            baseline,
        };
        Ok(Self {
            config,
            params: store,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn has_baseline_heads(&self) -> bool {
        self.ids.baseline.is_some()
    }

    /// Identity of the shared head's parameters: the ids of every tensor in
    /// the MLM head. There is exactly one such set per model.
    pub fn mlm_head_params(&self) -> Vec<ParamId> {
        let h = &self.ids.head;
        let mut v = vec![h.dense_w, h.dense_b, h.ln_g, h.ln_b];
        v.extend(h.out_w);
        v.push(h.out_b);
        v
    }

    pub fn param_count(&self) -> ParamCounts {
        let mut counts = ParamCounts {
            backbone: 0,
            mlm_head: 0,
            baseline: Vec::new(),
        };
        for (_, p) in self.params.iter() {
            let n = p.value.len();
            match p.group {
                ParamGroup::Backbone => counts.backbone += n,
                ParamGroup::MlmHead => counts.mlm_head += n,
                ParamGroup::Baseline(kind) => match counts.baseline.iter_mut().find(|(k, _)| *k == kind) {
                    Some(e) => e.1 += n,
                    None => counts.baseline.push((kind, n)),
                },
            }
        }
        counts
    }

    /// A forward pass recorder bound to this model.
    pub fn session(&self) -> Session<'_> {
        Session {
            model: self,
            tape: Tape::new(),
            binder: Binder::new(&self.params),
            dropout_rng: None,
        }
    }

    /// Same as [`Model::session`] with dropout active (if configured).
    pub fn training_session(&self, seed: u64) -> Session<'_> {
        let mut s = self.session();
        if self.config.dropout > 0.0 {
            s.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
        }
        s
    }

    /// Replaces the baseline heads (used when the answer vocabulary of a new
    /// dataset is only known at finetuning time). Other parameters are kept.
    pub fn with_baseline_heads(&self, heads: BaselineHeads, seed: u64) -> Result<Self> {
        let mut config = self.config.clone();
        config.baseline_heads = Some(heads);
        let mut fresh = Self::new(config, seed)?;
        for (_, p) in self.params.iter() {
            if matches!(p.group, ParamGroup::Baseline(_)) {
                continue;
            }
            let target = fresh
                .params
                .by_name(&p.name)
                .expect("backbone layout is independent of baseline heads");
            fresh.params.get_mut(target).value = p.value.clone();
        }
        Ok(fresh)
    }
}

/// One forward (and optionally backward) pass on a fresh tape.
pub struct Session<'m> {
    model: &'m Model,
    pub tape: Tape,
    binder: Binder,
    dropout_rng: Option<ChaCha8Rng>,
}

/// Hidden states of one encoded example.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[(video_len + text_len) × d]`
    pub hidden: Var,
    pub video_len: usize,
    pub text_len: usize,
}

impl Encoded {
    /// Row index of text position `i`.
    pub fn text_row(&self, i: usize) -> usize {
        self.video_len + i
    }
}

impl<'m> Session<'m> {
    pub fn model(&self) -> &'m Model {
        self.model
    }

    fn p(&mut self, id: ParamId) -> Var {
        self.binder.bind(&mut self.tape, &self.model.params, id)
    }

    fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let (w, b) = (self.p(w), self.p(b));
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add(y, b)?)
    }

    fn dropout(&mut self, x: Var) -> Var {
        match &mut self.dropout_rng {
            Some(rng) => self.tape.dropout(x, self.model.config.dropout, rng),
            None => x,
        }
    }

    /// Patch features `[T·cells × d]` of a grid.
    pub fn video_features(&mut self, video: &PatchGrid) -> Result<Var> {
        let cfg = &self.model.config;
        if video.patch_size() != (cfg.patch_height, cfg.patch_width) {
            return Err(ModelError::Input(format!(
                "patch size {:?} but model expects {}×{}",
                video.patch_size(),
                cfg.patch_height,
                cfg.patch_width
            )));
        }
        let ids = &self.model.ids;
        let vars = PatchEmbedVars {
            proj_w: self.p(ids.patch_w),
            proj_b: self.p(ids.patch_b),
            norm: Some((self.p(ids.video_ln.0), self.p(ids.video_ln.1), cfg.layer_norm_eps)),
            spatial: self.p(ids.spatial),
            temporal: self.p(ids.temporal),
        };
        Ok(embed_patches(&mut self.tape, video, vars)?)
    }

    /// Layer-normed token plus position embeddings `[N × d]`.
    pub fn text_embeddings(&mut self, ids: &[TokenId]) -> Result<Var> {
        let cfg = &self.model.config;
        if ids.is_empty() || ids.len() > cfg.max_text_len {
            return Err(ModelError::Input(format!(
                "text length {} outside 1..={}",
                ids.len(),
                cfg.max_text_len
            )));
        }
        if let Some(bad) = ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::Input(format!("token id {bad} outside vocabulary")));
        }
        let rows: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..ids.len()).collect();
        let (tok, pos) = (self.p(self.model.ids.tok_emb), self.p(self.model.ids.text_pos));
        let t = self.tape.gather_rows(tok, &rows)?;
        let p = self.tape.gather_rows(pos, &positions)?;
        let e = self.tape.add(t, p)?;
        let (g, b) = (self.p(self.model.ids.text_ln.0), self.p(self.model.ids.text_ln.1));
        Ok(self.tape.layer_norm(e, g, b, cfg.layer_norm_eps)?)
    }

    /// Runs the fusion stack over `[video | text]`. Text positions at or after
    /// `text_real_len` are padding.
    pub fn encode(
        &mut self,
        video: &PatchGrid,
        text: &[TokenId],
        text_real_len: usize,
        mode: AttentionMode,
    ) -> Result<Encoded> {
        let v = self.video_features(video)?;
        self.encode_features(v, text, text_real_len, mode)
    }

    /// [`Session::encode`] starting from precomputed video features.
    pub fn encode_features(
        &mut self,
        video_features: Var,
        text: &[TokenId],
        text_real_len: usize,
        mode: AttentionMode,
    ) -> Result<Encoded> {
        let cfg = self.model.config.clone();
        let vshape = self.tape.value(video_features).shape().to_vec();
        if vshape.len() != 2 || vshape[1] != cfg.width {
            return Err(ModelError::Input(format!(
                "video features {vshape:?} do not have width {}",
                cfg.width
            )));
        }
        if text_real_len == 0 || text_real_len > text.len() {
            return Err(ModelError::Input(format!(
                "real length {text_real_len} for {} text tokens",
                text.len()
            )));
        }
        let video_len = vshape[0];
        let t = self.text_embeddings(text)?;
        let mut x = self.tape.concat_rows(&[video_features, t])?;
        let pad: Vec<bool> = (0..text.len()).map(|i| i >= text_real_len).collect();
        let allow = Arc::new(build_attention_matrix(video_len, text.len(), &pad, mode));
        let ids = self.model.ids.clone();
        for layer in &ids.layers {
            x = self.block(x, layer, &allow, &cfg)?;
        }
        Ok(Encoded {
            hidden: x,
            video_len,
            text_len: text.len(),
        })
    }

    fn block(&mut self, x: Var, l: &LayerIds, allow: &Arc<Vec<bool>>, cfg: &ModelConfig) -> Result<Var> {
        let d = cfg.width;
        let dh = cfg.head_dim();
        let eps = cfg.layer_norm_eps;
        let (g1, b1) = (self.p(l.ln1_g), self.p(l.ln1_b));
        let h = self.tape.layer_norm(x, g1, b1, eps)?;
        let qkv = self.linear(h, l.qkv_w, l.qkv_b)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let q = self.tape.slice_cols(qkv, hd * dh, dh)?;
            let k = self.tape.slice_cols(qkv, d + hd * dh, dh)?;
            let v = self.tape.slice_cols(qkv, 2 * d + hd * dh, dh)?;
            let scores = self.tape.matmul_nt(q, k)?;
            let scores = self.tape.scale(scores, scale);
            let probs = self.tape.masked_softmax(scores, allow)?;
            let probs = self.dropout(probs);
            heads.push(self.tape.matmul(probs, v)?);
        }
        let attn = if heads.len() == 1 {
            heads[0]
        } else {
            self.tape.concat_cols(&heads)?
        };
        let attn = self.linear(attn, l.out_w, l.out_b)?;
        let attn = self.dropout(attn);
        let x = self.tape.add(x, attn)?;

        let (g2, b2) = (self.p(l.ln2_g), self.p(l.ln2_b));
        let h = self.tape.layer_norm(x, g2, b2, eps)?;
        let h = self.linear(h, l.ff1_w, l.ff1_b)?;
        let h = self.tape.gelu(h);
        let h = self.linear(h, l.ff2_w, l.ff2_b)?;
        let h = self.dropout(h);
        Ok(self.tape.add(x, h)?)
    }

    /// Gathers hidden rows (e.g. the masked positions).
    pub fn rows(&mut self, hidden: Var, rows: &[usize]) -> Result<Var> {
        Ok(self.tape.gather_rows(hidden, rows)?)
    }

    /// The shared head: dense → gelu → layer norm → vocabulary projection.
    pub fn mlm_logits(&mut self, hidden_rows: Var) -> Result<Var> {
        let width = self.tape.value(hidden_rows).cols();
        if width != self.model.config.width {
            return Err(ModelError::Input(format!(
                "hidden width {width}, head expects {}",
                self.model.config.width
            )));
        }
        let h = self.model.ids.head.clone();
        let x = self.linear(hidden_rows, h.dense_w, h.dense_b)?;
        let x = self.tape.gelu(x);
        let (g, b) = (self.p(h.ln_g), self.p(h.ln_b));
        let x = self.tape.layer_norm(x, g, b, self.model.config.layer_norm_eps)?;
        let y = match h.out_w {
            Some(w) => {
                let w = self.p(w);
                self.tape.matmul(x, w)?
            }
            None => {
                let emb = self.p(self.model.ids.tok_emb);
                self.tape.matmul_nt(x, emb)?
            }
        };
        let ob = self.p(h.out_b);
        Ok(self.tape.add(y, ob)?)
    }

    /// Task-specific head of the baseline on the given rows (normally `[CLS]`).
    pub fn baseline_logits(&mut self, hidden_rows: Var, kind: BaselineKind) -> Result<Var> {
        let Some(heads) = self.model.ids.baseline.clone() else {
            return Err(ModelError::Config("baseline heads are disabled".into()));
        };
        let m = &heads[kind as usize];
        let x = self.linear(hidden_rows, m.w1, m.b1)?;
        let x = self.tape.gelu(x);
        self.linear(x, m.w2, m.b2)
    }

    /// Reverse sweep; gradients for every parameter touched by this session.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let grads = self.tape.backward(loss)?;
        Ok(self.binder.collect(&self.model.params, &grads))
    }

    /// The tape variable a parameter was bound to, if it was used.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.binder.var(id)
    }
}

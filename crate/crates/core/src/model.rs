//! Full question-answering models: a question encoder and an image encoder
//! feeding attention units, with either a single visual attention path
//! (Simple Net) or dual visual and textual paths whose read-outs are fused
//! before classification. The six variants differ only in which attention
//! unit kind each path uses and are parameter-matched across kinds.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    match_parameter_counts, AttentionMap, AttentionUnit, ConvAttnParams, RauConfig, RauParams,
};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionConfig, SketchParams};
use crate::layers::{Conv1x1, Embedding, Lstm, Mode, PreluSlope};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Graph, Var};

/// Token id reserved for padding; questions shorter than the configured
/// length are padded with it and those positions are masked out.
pub const PAD_TOKEN: usize = 0;

/// Pre-softmax answer scores, 1-d with one entry per answer.
pub type Logits = Var;

// ── Variants ────────────────────────────────────────────────────────────────

/// The architecture grid: two single-attention models and four
/// dual-attention models covering every combination of unit kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Single visual attention, convolutional unit.
    SimpleConv,
    /// Single visual attention, recurrent unit.
    SimpleRvau,
    /// Dual attention, both convolutional.
    Dca,
    /// Dual attention, recurrent visual unit.
    DcaRvau,
    /// Dual attention, recurrent textual unit.
    DcaRtau,
    /// Dual attention, both recurrent.
    Drau,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::SimpleConv,
        Variant::SimpleRvau,
        Variant::Dca,
        Variant::DcaRvau,
        Variant::DcaRtau,
        Variant::Drau,
    ];

    /// The four dual-attention variants, in ablation order.
    pub const DUAL: [Variant; 4] = [
        Variant::Dca,
        Variant::DcaRvau,
        Variant::DcaRtau,
        Variant::Drau,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::SimpleConv => "simple-conv",
            Variant::SimpleRvau => "simple-rvau",
            Variant::Dca => "dca",
            Variant::DcaRvau => "dca-rvau",
            Variant::DcaRtau => "dca-rtau",
            Variant::Drau => "drau",
        }
    }

    pub fn has_textual(&self) -> bool {
        !matches!(self, Variant::SimpleConv | Variant::SimpleRvau)
    }

    pub fn visual_recurrent(&self) -> bool {
        matches!(self, Variant::SimpleRvau | Variant::DcaRvau | Variant::Drau)
    }

    pub fn textual_recurrent(&self) -> bool {
        matches!(self, Variant::DcaRtau | Variant::Drau)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown variant '{s}'; expected one of {}",
                    Variant::ALL.map(|v| v.name()).join(", ")
                ))
            })
    }
}

// ── Configuration ───────────────────────────────────────────────────────────

/// Which fusion operator joins the two attention read-outs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionSpec {
    /// Compact bilinear pooling with the given sketch width (rounded up to
    /// a power of two), signed sqrt and l2 posts on.
    Mcb { d: usize },
    Hadamard,
    Concat,
}

/// All model dimensions. `desk` is the default working scale; `toy` keeps
/// every width small enough for finite-difference checking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Attended image regions per scene.
    pub regions: usize,
    /// Raw feature width of one region.
    pub region_feat: usize,
    /// Projected image width; also the width of each tiled summary.
    pub joint: usize,
    /// Question token vocabulary size (including pad and unknown).
    pub token_vocab: usize,
    pub learned_embed: usize,
    pub frozen_embed: usize,
    pub q_hidden: usize,
    pub q_layers: usize,
    /// Fixed padded question length.
    pub q_len: usize,
    pub glimpses: usize,
    /// Channel width after the recurrent unit's entry map.
    pub attn_scaled: usize,
    /// Hidden width of the recurrent unit's scan.
    pub attn_hidden: usize,
    /// Per-glimpse read-out width.
    pub attn_output: usize,
    pub answers: usize,
    pub dropout: f64,
    pub fusion: FusionSpec,
}

impl ModelConfig {
    pub fn desk(variant: Variant) -> Self {
        ModelConfig {
            variant,
            regions: 16,
            region_feat: 20,
            joint: 64,
            token_vocab: 64,
            learned_embed: 32,
            frozen_embed: 32,
            q_hidden: 64,
            q_layers: 2,
            q_len: 12,
            glimpses: 2,
            attn_scaled: 64,
            attn_hidden: 64,
            attn_output: 64,
            answers: 36,
            dropout: 0.3,
            fusion: FusionSpec::Mcb { d: 1024 },
        }
    }

    pub fn toy(variant: Variant) -> Self {
        ModelConfig {
            variant,
            regions: 4,
            region_feat: 7,
            joint: 8,
            token_vocab: 12,
            learned_embed: 3,
            frozen_embed: 3,
            q_hidden: 8,
            q_layers: 2,
            q_len: 3,
            glimpses: 2,
            attn_scaled: 8,
            attn_hidden: 8,
            attn_output: 4,
            answers: 6,
            dropout: 0.0,
            fusion: FusionSpec::Mcb { d: 16 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.regions,
            self.region_feat,
            self.joint,
            self.token_vocab,
            self.learned_embed,
            self.frozen_embed,
            self.q_hidden,
            self.q_layers,
            self.q_len,
            self.glimpses,
            self.attn_scaled,
            self.attn_hidden,
            self.attn_output,
            self.answers,
        ];
        if dims.iter().any(|&v| v == 0) {
            return Err(Error::config(format!(
                "model dims must all be positive: {self:?}"
            )));
        }
        if self.token_vocab <= PAD_TOKEN {
            return Err(Error::config(
                "token vocabulary must include the pad id".to_string(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if let FusionSpec::Mcb { d } = self.fusion {
            if d == 0 {
                return Err(Error::config("sketch width must be positive".to_string()));
            }
        }
        Ok(())
    }

    /// Width of the per-word question encoding (all layers concatenated).
    pub fn q_width(&self) -> usize {
        self.q_layers * self.q_hidden
    }

    /// Width of one attention read-out vector.
    pub fn read_width(&self) -> usize {
        self.glimpses * self.attn_output
    }

    fn visual_attn_config(&self) -> RauConfig {
        let channels = 2 * self.joint;
        RauConfig {
            positions: self.regions,
            channels,
            scaled: self.attn_scaled,
            hidden: self.attn_hidden,
            glimpses: self.glimpses,
            feat_width: channels,
            output: self.attn_output,
        }
    }

    fn textual_attn_config(&self) -> RauConfig {
        let channels = self.q_width() + self.joint;
        RauConfig {
            positions: self.q_len,
            channels,
            scaled: self.attn_scaled,
            hidden: self.attn_hidden,
            glimpses: self.glimpses,
            feat_width: channels,
            output: self.attn_output,
        }
    }
}

// ── Model ───────────────────────────────────────────────────────────────────

/// A built model: layer handles resolving into a `ParamStore` by name.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    embed: Embedding,
    q_lstm: Lstm,
    img_proj: Conv1x1,
    img_slope: PreluSlope,
    qproj: Conv1x1,
    qproj_slope: PreluSlope,
    vproj: Option<(Conv1x1, PreluSlope)>,
    visual: AttentionUnit,
    textual: Option<AttentionUnit>,
    fusion: Option<FusionConfig>,
    cls: Conv1x1,
}

/// Everything one forward pass produces.
pub struct ModelOutput {
    pub logits: Logits,
    pub visual: AttentionMap,
    pub textual: Option<AttentionMap>,
}

fn register_unit(
    store: &mut ParamStore,
    prefix: &str,
    cfg: RauConfig,
    recurrent: bool,
) -> Result<AttentionUnit> {
    if recurrent {
        Ok(AttentionUnit::Recurrent(RauParams::register(
            store, prefix, cfg,
        )?))
    } else {
        let sizing = match_parameter_counts(&cfg)?;
        Ok(AttentionUnit::Conv(ConvAttnParams::register(
            store,
            prefix,
            cfg.positions,
            cfg.channels,
            sizing.conv_hidden,
            cfg.glimpses,
            cfg.feat_width,
            cfg.output,
        )?))
    }
}

impl Model {
    /// Register every parameter of the configured variant into `store` and
    /// return the wired model. Parameter values depend only on the store
    /// seed and the parameter names, so shared stages are identical across
    /// variants built from equal seeds.
    pub fn build(store: &mut ParamStore, cfg: ModelConfig) -> Result<Model> {
        cfg.validate()?;
        let embed = Embedding::register(
            store,
            "q.embed",
            cfg.token_vocab,
            cfg.learned_embed,
            cfg.frozen_embed,
        )?;
        let q_lstm = Lstm::register(store, "q.lstm", embed.width(), cfg.q_hidden, cfg.q_layers)?;
        let img_proj = Conv1x1::register(store, "img.proj", cfg.region_feat, cfg.joint)?;
        let img_slope = PreluSlope::register(store, "img.proj", cfg.joint)?;
        let qproj = Conv1x1::register(store, "joint.qproj", cfg.q_width(), cfg.joint)?;
        let qproj_slope = PreluSlope::register(store, "joint.qproj", cfg.joint)?;
        let vproj = if cfg.variant.has_textual() {
            let p = Conv1x1::register(store, "joint.vproj", cfg.joint, cfg.joint)?;
            let s = PreluSlope::register(store, "joint.vproj", cfg.joint)?;
            Some((p, s))
        } else {
            None
        };
        let visual = register_unit(
            store,
            "attn.vis",
            cfg.visual_attn_config(),
            cfg.variant.visual_recurrent(),
        )?;
        let (textual, fusion) = if cfg.variant.has_textual() {
            let unit = register_unit(
                store,
                "attn.txt",
                cfg.textual_attn_config(),
                cfg.variant.textual_recurrent(),
            )?;
            let w = cfg.read_width();
            let fusion = match cfg.fusion {
                FusionSpec::Mcb { d } => {
                    FusionConfig::mcb(SketchParams::new(w, w, d, store.seed())?)
                }
                FusionSpec::Hadamard => FusionConfig::Hadamard,
                FusionSpec::Concat => FusionConfig::Concat,
            };
            (Some(unit), Some(fusion))
        } else {
            (None, None)
        };
        let w = cfg.read_width();
        let cls_in = match &fusion {
            Some(f) => f.out_width(w, w)?,
            None => w,
        };
        let cls = Conv1x1::register(store, "cls", cls_in, cfg.answers)?;
        Ok(Model {
            cfg,
            embed,
            q_lstm,
            img_proj,
            img_slope,
            qproj,
            qproj_slope,
            vproj,
            visual,
            textual,
            fusion,
            cls,
        })
    }

    /// Pad or reject a raw token list: trailing pad tokens are stripped to
    /// find the real length, then the list is padded back to the fixed
    /// question length. Returns (padded tokens, real length, pad mask).
    fn prepare_tokens(&self, tokens: &[usize]) -> Result<(Vec<usize>, usize, Vec<bool>)> {
        let real = tokens
            .iter()
            .rposition(|&t| t != PAD_TOKEN)
            .map(|p| p + 1)
            .ok_or_else(|| Error::degenerate("encode_question", "question has no words"))?;
        if real > self.cfg.q_len {
            return Err(Error::dim(
                "encode_question",
                format!("question of {real} words exceeds limit {}", self.cfg.q_len),
            ));
        }
        let mut padded = tokens[..real].to_vec();
        padded.resize(self.cfg.q_len, PAD_TOKEN);
        let mask: Vec<bool> = (0..self.cfg.q_len).map(|i| i >= real).collect();
        Ok((padded, real, mask))
    }

    /// Embed and scan the question. Returns the per-word encoding
    /// [q_len x q_width], the final real word's encoding [1 x q_width],
    /// and the pad mask.
    pub fn encode_question(
        &self,
        g: &mut Graph,
        b: &Bound,
        tokens: &[usize],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var, Vec<bool>)> {
        let (padded, real, mask) = self.prepare_tokens(tokens)?;
        let embedded = self.embed.forward(g, b, &padded)?;
        let seq = self
            .q_lstm
            .sequence_dropout(g, b, embedded, self.cfg.dropout, mode, rng)?;
        let last = g.slice_rows(seq, real - 1, 1)?;
        Ok((seq, last, mask))
    }

    /// Normalize region rows and project them to the joint width.
    pub fn encode_image(&self, g: &mut Graph, b: &Bound, regions: Var) -> Result<Var> {
        let shape = g.shape(regions).to_vec();
        if shape != [self.cfg.regions, self.cfg.region_feat] {
            return Err(Error::dim(
                "encode_image",
                format!(
                    "regions shape {:?} vs configured {}x{}",
                    shape, self.cfg.regions, self.cfg.region_feat
                ),
            ));
        }
        let normed = g.l2_normalize_rows(regions)?;
        let projected = self.img_proj.forward(g, b, normed)?;
        self.img_slope.forward(g, b, projected)
    }

    /// Per-region joint input: each projected region row joined with a
    /// tiled projection of the final question encoding.
    pub fn joint_visual(&self, g: &mut Graph, b: &Bound, v: Var, q_last: Var) -> Result<Var> {
        let proj = self.qproj.forward(g, b, q_last)?;
        let summary = self.qproj_slope.forward(g, b, proj)?;
        let tiled = g.tile_rows(summary, self.cfg.regions)?;
        g.concat(&[v, tiled], 1)
    }

    /// Per-word joint input: each word encoding joined with a tiled
    /// projection of the mean region row.
    pub fn joint_textual(&self, g: &mut Graph, b: &Bound, q_seq: Var, v: Var) -> Result<Var> {
        let (proj, slope) = self.vproj.as_ref().ok_or_else(|| {
            Error::config(format!(
                "variant {} has no textual path",
                self.cfg.variant
            ))
        })?;
        let mean = g.mean_rows(v)?;
        let projected = proj.forward(g, b, mean)?;
        let summary = slope.forward(g, b, projected)?;
        let tiled = g.tile_rows(summary, self.cfg.q_len)?;
        g.concat(&[q_seq, tiled], 1)
    }

    /// Run the configured architecture over one sample.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        tokens: &[usize],
        regions: Var,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<ModelOutput> {
        let (q_seq, q_last, mask) = self.encode_question(g, b, tokens, mode, rng)?;
        let v = self.encode_image(g, b, regions)?;
        let x_vis = self.joint_visual(g, b, v, q_last)?;
        let (vis_read, vis_map) = self.visual.forward(g, b, x_vis, x_vis, None)?;
        let (fused, txt_map) = match (&self.textual, &self.fusion) {
            (Some(txt), Some(fusion)) => {
                let x_txt = self.joint_textual(g, b, q_seq, v)?;
                let (txt_read, txt_map) = txt.forward(g, b, x_txt, x_txt, Some(&mask))?;
                (fuse(g, txt_read, vis_read, fusion)?, Some(txt_map))
            }
            _ => (vis_read, None),
        };
        let row = g.reshape(fused, &[1, self.cls.in_ch])?;
        let scores = self.cls.forward(g, b, row)?;
        let logits = g.reshape(scores, &[self.cfg.answers])?;
        Ok(ModelOutput {
            logits,
            visual: vis_map,
            textual: txt_map,
        })
    }

    /// Cross-entropy of the answer scores against the target id.
    pub fn loss(&self, g: &mut Graph, logits: Logits, target: usize) -> Result<Var> {
        g.cross_entropy(logits, target)
    }
}

/// Highest-scoring answer id; ties break to the lowest index.
pub fn predict_answer(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::contract("predict_answer", "empty score vector"));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

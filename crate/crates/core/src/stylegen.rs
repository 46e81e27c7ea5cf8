//! Reference-conditioned generator: a style encoder that pools per-frame
//! features of a reference utterance into a style vector, an emotion
//! embedding table with a separate null row, and a per-token generator that
//! produces the diffusion prior mean `mu`.
//!
//! There is no speaker-id input anywhere; unseen speakers are handled purely
//! through their reference frames.

use serde::{Deserialize, Serialize};

use crate::autodiff::{
    index_tensor, inputs, Activation, FrameMatrix, Graph, Mlp, NodeId, ParamStore, Tensor,
};
use crate::error::{invalid, Error, Result};

/// Widths of the learned components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub style_dim: usize,
    pub emotion_dim: usize,
    pub token_dim: usize,
    pub hidden: usize,
    /// Number of hidden layers in every MLP.
    pub layers: usize,
    /// Typical spread of clean frames around the prior mean, used to scale
    /// score-network inputs and outputs; `0` feeds the raw frames instead.
    pub score_data_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            style_dim: 16,
            emotion_dim: 8,
            token_dim: 8,
            hidden: 64,
            layers: 2,
            score_data_scale: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if [
            self.style_dim,
            self.emotion_dim,
            self.token_dim,
            self.hidden,
        ]
        .contains(&0)
        {
            return invalid("model widths must be positive");
        }
        if !(self.score_data_scale >= 0.0 && self.score_data_scale.is_finite()) {
            return invalid(format!(
                "score_data_scale must be >= 0, got {}",
                self.score_data_scale
            ));
        }
        Ok(())
    }

    pub(crate) fn widths(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(self.hidden, self.layers));
        dims.push(output);
        dims
    }
}

/// An emotion id or the null embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EmotionLabel {
    Emotion(usize),
    Null,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector {
    pub values: Vec<f64>,
}

impl StyleVector {
    pub fn as_row(&self) -> Tensor {
        Tensor::matrix(1, self.values.len(), self.values.clone()).expect("sized")
    }
}

/// Per-frame MLP with a bounded (tanh) output, followed by mean pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleEncoder {
    pub mlp: Mlp,
}

impl StyleEncoder {
    pub fn new(frame_dim: usize, cfg: &ModelConfig) -> Self {
        Self {
            mlp: Mlp::new(
                "style",
                &cfg.widths(frame_dim, cfg.style_dim),
                Activation::Tanh,
            ),
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        self.mlp.init(store);
    }

    pub fn style_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// Per-frame features before pooling.
    pub fn build_frames(&self, g: &mut Graph, frames: NodeId) -> NodeId {
        let h = self.mlp.build(g, frames);
        g.tanh(h)
    }

    /// `frames: N x D`, `segments: N` utterance ids; returns one style row per utterance.
    pub fn build(&self, g: &mut Graph, frames: NodeId, segments: NodeId) -> NodeId {
        let h = self.build_frames(g, frames);
        let s = g.segment_mean(h, segments);
        g.label(s, "style")
    }

    pub fn encode_style(
        &self,
        store: &ParamStore,
        ref_frames: &FrameMatrix,
    ) -> Result<StyleVector> {
        if ref_frames.shape().len() != 2 || ref_frames.nrows() == 0 {
            return invalid("reference frames are empty");
        }
        let mut g = Graph::new();
        let x = g.input_rows("frames", self.mlp.input_dim());
        let seg = g.index_input("segments");
        let s = self.build(&mut g, x, seg);
        g.set_output("s", s);
        let out = g.evaluate(
            store,
            &inputs([
                ("frames", ref_frames.clone()),
                ("segments", index_tensor(&vec![0; ref_frames.nrows()])),
            ]),
        )?;
        Ok(StyleVector {
            values: out["s"].data().to_vec(),
        })
    }
}

/// `K` emotion rows plus a distinct trainable null row, stored as separate
/// parameters so the null row can never alias an emotion.
#[derive(Clone, Debug, PartialEq)]
pub struct EmotionTable {
    pub emotions: usize,
    pub dim: usize,
}

pub const EMOTION_TABLE: &str = "emotion.table";
pub const EMOTION_NULL: &str = "emotion.null";

impl EmotionTable {
    pub fn new(emotions: usize, cfg: &ModelConfig) -> Self {
        Self {
            emotions,
            dim: cfg.emotion_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.init_glorot(EMOTION_TABLE, &[self.emotions, self.dim], 1, self.dim);
        store.init_glorot(EMOTION_NULL, &[1, self.dim], 1, self.dim);
    }

    /// Row index in the table built by [`EmotionTable::build`]; the null row is last.
    pub fn index(&self, label: EmotionLabel) -> Result<usize> {
        match label {
            EmotionLabel::Emotion(e) if e < self.emotions => Ok(e),
            EmotionLabel::Emotion(e) => {
                invalid(format!("emotion {e} out of range 0..{}", self.emotions))
            }
            EmotionLabel::Null => Ok(self.emotions),
        }
    }

    /// The full `(K + 1) x d_e` table as a graph node.
    pub fn build(&self, g: &mut Graph) -> NodeId {
        let t = g.param(EMOTION_TABLE);
        let n = g.param(EMOTION_NULL);
        g.concat_rows(&[t, n])
    }

    pub fn emotion_embed(&self, store: &ParamStore, label: EmotionLabel) -> Result<Vec<f64>> {
        let i = self.index(label)?;
        Ok(match label {
            EmotionLabel::Null => store.get(EMOTION_NULL)?.data().to_vec(),
            EmotionLabel::Emotion(_) => store.get(EMOTION_TABLE)?.row(i).to_vec(),
        })
    }

    /// True when the null row still holds its initial value, i.e. no
    /// null-embedding dropout ever reached it.
    pub fn null_row_untrained(&self, store: &ParamStore) -> bool {
        let mut fresh = ParamStore::new(store.seed());
        fresh.init_glorot(EMOTION_NULL, &[1, self.dim], 1, self.dim);
        store.get(EMOTION_NULL).ok() == fresh.get(EMOTION_NULL).ok()
    }
}

/// Per-token MLP over `concat(token_embedding, s, e)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub vocab: usize,
    pub token_dim: usize,
    pub mlp: Mlp,
}

pub const TOKEN_TABLE: &str = "gen.tokens";

impl Generator {
    pub fn new(vocab: usize, frame_dim: usize, cfg: &ModelConfig) -> Self {
        let input = cfg.token_dim + cfg.style_dim + cfg.emotion_dim;
        Self {
            vocab,
            token_dim: cfg.token_dim,
            mlp: Mlp::new("gen", &cfg.widths(input, frame_dim), Activation::Tanh),
        }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.init_glorot(
            TOKEN_TABLE,
            &[self.vocab, self.token_dim],
            1,
            self.token_dim,
        );
        self.mlp.init(store);
    }

    pub fn frame_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    /// `tokens: N` ids, `s_rows: N x d_s`, `e_rows: N x d_e` -> `mu: N x D`.
    pub fn build(&self, g: &mut Graph, tokens: NodeId, s_rows: NodeId, e_rows: NodeId) -> NodeId {
        let table = g.param(TOKEN_TABLE);
        let x = g.gather(table, tokens);
        let h = g.concat(&[x, s_rows, e_rows]);
        let mu = self.mlp.build(g, h);
        g.label(mu, "mu")
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return invalid("token sequence is empty");
        }
        if let Some(t) = tokens.iter().find(|&&t| t >= self.vocab) {
            return invalid(format!("token {t} out of vocabulary 0..{}", self.vocab));
        }
        Ok(())
    }

    pub fn generate_mu(
        &self,
        store: &ParamStore,
        tokens: &[usize],
        style: &StyleVector,
        emotion_emb: &[f64],
    ) -> Result<FrameMatrix> {
        let mut out = self.generate_mu_batch(
            store,
            &[tokens],
            std::slice::from_ref(style),
            &[emotion_emb.to_vec()],
        )?;
        Ok(out.pop().expect("one utterance"))
    }

    /// Prior means for several utterances in one pass. Rows are computed
    /// independently, so the result for an utterance does not depend on the
    /// rest of the batch.
    pub fn generate_mu_batch(
        &self,
        store: &ParamStore,
        tokens: &[&[usize]],
        styles: &[StyleVector],
        emotion_embs: &[Vec<f64>],
    ) -> Result<Vec<FrameMatrix>> {
        if tokens.is_empty() || tokens.len() != styles.len() || tokens.len() != emotion_embs.len() {
            return invalid(
                "generator batch needs matching nonempty token, style and emotion lists",
            );
        }
        for t in tokens {
            self.check_tokens(t)?;
        }
        let lengths: Vec<usize> = tokens.iter().map(|t| t.len()).collect();
        let flat: Vec<usize> = tokens.iter().flat_map(|t| t.iter().copied()).collect();
        let s = Tensor::from_rows(&styles.iter().map(|s| s.values.clone()).collect::<Vec<_>>())?;
        let e = Tensor::from_rows(emotion_embs)?;
        let mut g = Graph::new();
        let tok = g.index_input("tokens");
        let s_in = g.input_rows("s", s.ncols());
        let e_in = g.input_rows("e", e.ncols());
        let rows = g.index_input("rows");
        let s_rows = g.gather(s_in, rows);
        let e_rows = g.gather(e_in, rows);
        let mu = self.build(&mut g, tok, s_rows, e_rows);
        g.set_output("mu", mu);
        let out = g
            .evaluate(
                store,
                &inputs([
                    ("tokens", index_tensor(&flat)),
                    ("s", s),
                    ("e", e),
                    ("rows", index_tensor(&row_segments(&lengths))),
                ]),
            )
            .map_err(|e| match e {
                Error::Shape { node, detail } => Error::Shape {
                    node: format!("generator {node}"),
                    detail,
                },
                other => other,
            })?;
        split_rows(&out["mu"], &lengths)
    }
}

/// Splits stacked rows back into per-utterance matrices.
pub fn split_rows(stacked: &Tensor, lengths: &[usize]) -> Result<Vec<FrameMatrix>> {
    if lengths.iter().sum::<usize>() != stacked.nrows() {
        return invalid(format!(
            "{} rows cannot be split into lengths {lengths:?}",
            stacked.nrows()
        ));
    }
    let c = stacked.ncols();
    let mut start = 0;
    lengths
        .iter()
        .map(|&n| {
            let m = Tensor::matrix(n, c, stacked.data()[start * c..(start + n) * c].to_vec());
            start += n;
            m
        })
        .collect()
}

/// Row-to-utterance ids for stacked utterances of the given lengths.
pub fn row_segments(lengths: &[usize]) -> Vec<usize> {
    lengths
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| std::iter::repeat_n(i, n))
        .collect()
}

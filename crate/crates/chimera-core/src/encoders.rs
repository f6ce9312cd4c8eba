//! Visual encoders and projectors.
//!
//! The general encoder is an embedding-plus-position token map whose CLS
//! feature is the mean over tokens, so domain identity stays linearly
//! recoverable. Expert encoders add one learned token-mixing layer and a
//! pointwise nonlinear map; they are pre-trained on value reconstruction
//! during a short warm phase (see the model module) and frozen for the
//! entire run. Projectors are single affine maps into the language-model
//! embedding space.

use crate::datagen::{DomainLabel, ExpertGrid, GeneralGrid};
use crate::error::{ChimeraError, Result};
use crate::fusion::SpanLabel;
use crate::tensor::Tensor;

/// General-encoder output: `N_v` feature tokens and a pooled CLS vector.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub tokens: Tensor,
    pub cls: Tensor,
}

/// One registered expert: its domain/class, output budget, and input
/// geometry. Parameters live in the model's parameter table under
/// `enc_e.<name>.*` / `proj_e.<name>.*`; encoder parameters stay frozen
/// after the warm phase.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBundle {
    pub label: DomainLabel,
    pub token_count: usize,
    pub feature_dim: usize,
    pub max_input_len: usize,
}

impl ExpertBundle {
    pub fn enc_prefix(&self) -> String {
        format!("enc_e.{}.", self.label.kind.name())
    }
    pub fn proj_prefix(&self) -> String {
        format!("proj_e.{}.", self.label.kind.name())
    }
}

/// A span of LM-dimension embeddings with a uniform label.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSequence {
    pub vectors: Tensor,
    pub span_label: SpanLabel,
}

/// Encoder parameter views; plain tensors so the same functions serve the
/// frozen forward path and shape tests.
pub struct GeneralEncoderParams<'a> {
    /// [pixel vocab, d_g]
    pub emb: &'a Tensor,
    /// [N_v, d_g]
    pub pos: &'a Tensor,
}

pub struct ExpertEncoderParams<'a> {
    /// [pixel vocab, d_i]
    pub emb: &'a Tensor,
    /// [max_input_len, d_i]
    pub pos: &'a Tensor,
    /// pointwise affine [d_i, d_i] and [1, d_i]
    pub w1: &'a Tensor,
    pub b1: &'a Tensor,
}

pub struct ProjectorParams<'a> {
    pub w: &'a Tensor,
    pub b: &'a Tensor,
}

fn gelu_inplace(t: &mut Tensor) {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    for v in t.data.iter_mut() {
        let x = *v;
        *v = 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh());
    }
}

/// Embeds the redacted general view: token i = emb[pixel_i] + pos_i, CLS =
/// mean over tokens.
pub fn encode_general(view: &GeneralGrid, params: &GeneralEncoderParams) -> Result<VisualFeatures> {
    let n = view.pixels.len();
    if params.pos.rows != n {
        return Err(ChimeraError::config(format!(
            "general encoder configured for {} tokens, view has {n}",
            params.pos.rows
        )));
    }
    let d = params.emb.cols;
    if params.pos.cols != d {
        return Err(ChimeraError::config("general encoder dim mismatch"));
    }
    let mut tokens = Tensor::zeros(n, d);
    for (i, &p) in view.pixels.iter().enumerate() {
        let p = p as usize;
        if p >= params.emb.rows {
            return Err(ChimeraError::config(format!("pixel id {p} outside embedding table")));
        }
        let row = tokens.row_mut(i);
        for ((o, e), q) in row.iter_mut().zip(params.emb.row(p)).zip(params.pos.row(i)) {
            *o = e + q;
        }
    }
    let cls = tokens.mean_rows();
    Ok(VisualFeatures { tokens, cls })
}

/// Runs a frozen expert encoder over its full-fidelity view. Token j is a
/// pointwise nonlinear map of position j's embedding plus the mean-pooled
/// context, so each feature token is dominated by its own cell while the
/// pooled term mixes in global structure:
///
///   h_i = emb[pixel_i] + pos_i,  g = mean_i h_i
///   token_j = gelu((h_j + g) W1 + b1)        for j < input length
///   token_j = gelu(g W1 + b1)                 for the remaining budget
pub fn encode_expert(
    domain: DomainLabel,
    view: &ExpertGrid,
    bundle: &ExpertBundle,
    params: &ExpertEncoderParams,
) -> Result<Tensor> {
    if domain.kind != bundle.label.kind {
        return Err(ChimeraError::Routing(format!(
            "bundle for {:?} invoked as {:?}",
            bundle.label.kind, domain.kind
        )));
    }
    let d = bundle.feature_dim;
    let l = bundle.max_input_len;
    // embed with padding to the fixed input length; a mis-routed view may
    // be longer and is truncated (the wrong expert still encodes something)
    let mut h = Tensor::zeros(l, d);
    for i in 0..l {
        let p = view.pixels.get(i).copied().unwrap_or(crate::datagen::pix::PAD) as usize;
        let row = h.row_mut(i);
        for ((o, e), q) in row.iter_mut().zip(params.emb.row(p)).zip(params.pos.row(i)) {
            *o = e + q;
        }
    }
    let pooled = h.mean_rows();
    let mut base = Tensor::zeros(bundle.token_count, d);
    for j in 0..bundle.token_count {
        let row = base.row_mut(j);
        if j < l {
            for ((o, &hv), &g) in row.iter_mut().zip(h.row(j)).zip(&pooled.data) {
                *o = hv + g;
            }
        } else {
            row.copy_from_slice(&pooled.data);
        }
    }
    let mut out = base.matmul(params.w1).add_row(params.b1);
    gelu_inplace(&mut out);
    debug_assert_eq!(out.shape(), (bundle.token_count, d));
    Ok(out)
}

/// Projects general visual features into the LM embedding space.
pub fn project_general(features: &VisualFeatures, params: &ProjectorParams) -> Result<EmbeddingSequence> {
    if features.tokens.cols != params.w.rows {
        return Err(ChimeraError::config(format!(
            "general projector expects dim {}, features have {}",
            params.w.rows,
            features.tokens.cols
        )));
    }
    Ok(EmbeddingSequence {
        vectors: features.tokens.matmul(params.w).add_row(params.b),
        span_label: SpanLabel::GeneralVisual,
    })
}

/// Projects expert features into the LM embedding space.
pub fn project_expert(
    bundle: &ExpertBundle,
    features: &Tensor,
    params: &ProjectorParams,
) -> Result<EmbeddingSequence> {
    if features.cols != bundle.feature_dim || features.cols != params.w.rows {
        return Err(ChimeraError::config("expert projector dim mismatch"));
    }
    Ok(EmbeddingSequence {
        vectors: features.matmul(params.w).add_row(params.b),
        span_label: SpanLabel::ExpertVisual,
    })
}

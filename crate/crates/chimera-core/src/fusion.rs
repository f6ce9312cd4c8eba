//! Input-sequence assembly: the expert-routed mode and the two baseline
//! modes, with span bookkeeping for loss masking and attention analysis.

use serde::{Deserialize, Serialize};

use crate::encoders::EmbeddingSequence;
use crate::error::{ChimeraError, Result};
use crate::gscm::MaskedSequence;
use crate::tensor::Tensor;

/// How the language-model input is assembled during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyMode {
    /// general (mask-attenuated) : expert : text
    Chimera,
    /// general : text — no expert features at all
    NaiveFinetune,
    /// general : expert : text with no masking
    NaiveConcat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanLabel {
    GeneralVisual,
    ExpertVisual,
    Text,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub label: SpanLabel,
    pub start: usize,
    pub len: usize,
}

/// Embedded text span; `answer_start` marks where the answer tokens begin
/// within it (equal to the length when there is no answer, e.g. at
/// generation time).
#[derive(Clone, Debug)]
pub struct TextEmbedding {
    pub vectors: Tensor,
    pub token_ids: Vec<u32>,
    pub answer_start: usize,
}

/// The language-model input: span-ordered embeddings, per-position
/// attention bits (False only inside the general-visual span), and the
/// answer location.
#[derive(Clone, Debug)]
pub struct AssembledSequence {
    pub vectors: Tensor,
    pub attention_bits: Vec<bool>,
    pub spans: Vec<Span>,
    /// (start, len) of the answer tokens; len 0 when generating.
    pub answer_span: (usize, usize),
}

impl AssembledSequence {
    pub fn len(&self) -> usize {
        self.vectors.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn span(&self, label: SpanLabel) -> Option<Span> {
        self.spans.iter().copied().find(|s| s.label == label)
    }
}

fn check_dim(d: usize, seq: &Tensor, what: &str) -> Result<()> {
    if seq.cols != d {
        return Err(ChimeraError::contract(format!(
            "{what} has embedding dim {} but expected {d}",
            seq.cols
        )));
    }
    Ok(())
}

fn build(
    general: &EmbeddingSequence,
    general_bits: &[bool],
    expert: Option<&EmbeddingSequence>,
    text: &TextEmbedding,
) -> Result<AssembledSequence> {
    let d = general.vectors.cols;
    if general.span_label != SpanLabel::GeneralVisual {
        return Err(ChimeraError::contract("first span must be general-visual"));
    }
    if general_bits.len() != general.vectors.rows {
        return Err(ChimeraError::contract("attention bits length mismatch"));
    }
    check_dim(d, &text.vectors, "text span")?;
    let mut parts: Vec<&Tensor> = vec![&general.vectors];
    let mut spans = vec![Span { label: SpanLabel::GeneralVisual, start: 0, len: general.vectors.rows }];
    let mut cursor = general.vectors.rows;
    if let Some(e) = expert {
        if e.span_label != SpanLabel::ExpertVisual {
            return Err(ChimeraError::contract("expert span mislabeled"));
        }
        check_dim(d, &e.vectors, "expert span")?;
        parts.push(&e.vectors);
        spans.push(Span { label: SpanLabel::ExpertVisual, start: cursor, len: e.vectors.rows });
        cursor += e.vectors.rows;
    }
    parts.push(&text.vectors);
    spans.push(Span { label: SpanLabel::Text, start: cursor, len: text.vectors.rows });
    let total = cursor + text.vectors.rows;

    let mut bits = Vec::with_capacity(total);
    bits.extend_from_slice(general_bits);
    bits.resize(total, true);

    if text.answer_start > text.vectors.rows {
        return Err(ChimeraError::contract("answer_start past the text span"));
    }
    let answer_span = (cursor + text.answer_start, text.vectors.rows - text.answer_start);

    Ok(AssembledSequence {
        vectors: Tensor::concat_rows(&parts),
        attention_bits: bits,
        spans,
        answer_span,
    })
}

/// Expert-routed assembly: masked general tokens, then the expert span
/// (absent when the router chose class 0), then text.
pub fn assemble_chimera(
    masked_general: &MaskedSequence,
    expert: Option<&EmbeddingSequence>,
    text: &TextEmbedding,
) -> Result<AssembledSequence> {
    build(&masked_general.sequence, &masked_general.bits, expert, text)
}

/// Baseline assemblies: no masking ever, and no expert span in the
/// finetune-only mode.
pub fn assemble_baseline(
    mode: AssemblyMode,
    general: &EmbeddingSequence,
    expert: Option<&EmbeddingSequence>,
    text: &TextEmbedding,
) -> Result<AssembledSequence> {
    let all_true = vec![true; general.vectors.rows];
    match mode {
        AssemblyMode::NaiveFinetune => build(general, &all_true, None, text),
        AssemblyMode::NaiveConcat => build(general, &all_true, expert, text),
        AssemblyMode::Chimera => {
            Err(ChimeraError::config("chimera is not a baseline mode"))
        }
    }
}

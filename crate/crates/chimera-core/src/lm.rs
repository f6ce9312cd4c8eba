//! A tiny causal transformer over assembled embedding sequences.
//!
//! Pre-norm blocks, learned absolute positions, GELU feed-forward. The
//! attention mask composes causality with the per-key visibility bits
//! produced by collaboration masking: key j is visible to query i iff
//! j <= i and bits[j]. Forward passes can record the attention rows that
//! predict answer tokens for the attention-mass analysis.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::config::{LMConfig, LossReduction};
use crate::error::{ChimeraError, Result};
use crate::fusion::AssembledSequence;
use crate::model::Params;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Attention probabilities restricted to the query rows that predict
/// answer tokens; `weights[layer][head]` has one row per traced query.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub rows: Vec<usize>,
    pub weights: Vec<Vec<Tensor>>,
}

fn var(vars: &BTreeMap<String, Var>, name: &str) -> Var {
    *vars.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))
}

/// Additive attention mask: 0 where key j is visible to query i
/// (j <= i and bits[j]), -inf elsewhere.
pub fn additive_mask(bits: &[bool]) -> Tensor {
    let len = bits.len();
    let mut m = Tensor::zeros(len, len);
    for i in 0..len {
        for j in 0..len {
            m.data[i * len + j] =
                if j <= i && bits[j] { 0.0 } else { f64::NEG_INFINITY };
        }
    }
    m
}

/// The transformer forward pass on an existing tape. `input` holds the
/// assembled embeddings (positions not yet added).
pub fn forward_on_tape(
    tape: &Tape,
    input: Var,
    bits: &[bool],
    cfg: &LMConfig,
    vars: &BTreeMap<String, Var>,
    trace_rows: Option<&[usize]>,
) -> Result<(Var, Option<AttentionTrace>)> {
    forward_at_offset(tape, input, 0, bits, cfg, vars, trace_rows)
}

/// Forward pass with the sequence placed at a position offset; text-only
/// pretraining uses this to exercise every position embedding without
/// paying for long sequences.
#[allow(clippy::too_many_arguments)]
pub fn forward_at_offset(
    tape: &Tape,
    input: Var,
    pos_offset: usize,
    bits: &[bool],
    cfg: &LMConfig,
    vars: &BTreeMap<String, Var>,
    trace_rows: Option<&[usize]>,
) -> Result<(Var, Option<AttentionTrace>)> {
    let len = tape.value(input).rows;
    if pos_offset + len > cfg.max_len {
        return Err(ChimeraError::contract(format!(
            "sequence length {len} at offset {pos_offset} exceeds max_len {}",
            cfg.max_len
        )));
    }
    if bits.len() != len {
        return Err(ChimeraError::contract("attention bits length mismatch"));
    }
    let mask = Rc::new(additive_mask(bits));
    let pos = tape.slice_rows(var(vars, "lm.pos_emb"), pos_offset, len);
    let mut x = tape.add(input, pos);
    let mut trace_weights: Vec<Vec<Tensor>> = Vec::new();
    for l in 0..cfg.layers {
        let p = |suffix: &str| var(vars, &format!("lm.l{l}.{suffix}"));
        let h = tape.layer_norm(x, p("ln1.g"), p("ln1.b"), 1e-5);
        let q = tape.linear(h, p("attn.wq"), p("attn.bq"));
        let k = tape.linear(h, p("attn.wk"), p("attn.bk"));
        let v = tape.linear(h, p("attn.wv"), p("attn.bv"));
        let a = match trace_rows {
            Some(rows) => {
                let mut per_head = Vec::new();
                let a = tape.attention(q, k, v, cfg.heads, &mask, Some((&mut per_head, rows)));
                trace_weights.push(per_head);
                a
            }
            None => tape.attention(q, k, v, cfg.heads, &mask, None),
        };
        let o = tape.linear(a, p("attn.wo"), p("attn.bo"));
        x = tape.add(x, o);
        let h2 = tape.layer_norm(x, p("ln2.g"), p("ln2.b"), 1e-5);
        let m1 = tape.linear(h2, p("mlp.w1"), p("mlp.b1"));
        let g = tape.gelu(m1);
        let m2 = tape.linear(g, p("mlp.w2"), p("mlp.b2"));
        x = tape.add(x, m2);
    }
    let xf = tape.layer_norm(x, var(vars, "lm.lnf.g"), var(vars, "lm.lnf.b"), 1e-5);
    let logits = if cfg.tie_embeddings {
        let scores = tape.matmul_nt(xf, var(vars, "lm.tok_emb"));
        tape.add_bias(scores, var(vars, "lm.head.b"))
    } else {
        tape.linear(xf, var(vars, "lm.head.w"), var(vars, "lm.head.b"))
    };
    let trace = trace_rows.map(|rows| AttentionTrace {
        rows: rows.to_vec(),
        weights: trace_weights,
    });
    Ok((logits, trace))
}

/// Stand-alone forward pass over plain tensors (no gradients): binds the
/// parameters on an inference tape and runs [`forward_on_tape`].
pub fn lm_forward(
    seq: &AssembledSequence,
    cfg: &LMConfig,
    params: &Params,
    trace: bool,
) -> Result<(Tensor, Option<AttentionTrace>)> {
    let tape = Tape::inference();
    let vars = params.bind(&tape);
    let input = tape.leaf(seq.vectors.clone());
    let rows = trace.then(|| prediction_rows(seq.answer_span));
    let (logits, trace) = forward_on_tape(
        &tape,
        input,
        &seq.attention_bits,
        cfg,
        &vars,
        rows.as_deref(),
    )?;
    Ok((tape.value(logits).as_ref().clone(), trace))
}

/// Query rows whose logits predict the answer tokens: position p predicts
/// the token at p + 1, so the answer at positions [start, start+len) is
/// predicted from rows [start-1, start+len-1).
pub fn prediction_rows(answer_span: (usize, usize)) -> Vec<usize> {
    let (start, len) = answer_span;
    (start - 1..start + len - 1).collect()
}

/// (rows, targets) pairs for the answer cross-entropy.
pub fn answer_rows_targets(
    answer_tokens: &[u32],
    answer_span: (usize, usize),
) -> Result<(Vec<usize>, Vec<usize>)> {
    let (start, len) = answer_span;
    if len == 0 || answer_tokens.is_empty() {
        return Err(ChimeraError::data("empty answer span"));
    }
    if answer_tokens.len() != len {
        return Err(ChimeraError::contract("answer span length mismatch"));
    }
    if start == 0 {
        return Err(ChimeraError::contract("answer cannot start the sequence"));
    }
    Ok((
        prediction_rows(answer_span),
        answer_tokens.iter().map(|&t| t as usize).collect(),
    ))
}

/// Autoregressive answer loss over the answer span only: prompt and
/// visual positions carry no loss.
pub fn lm_loss(
    logits: &Tensor,
    answer_tokens: &[u32],
    answer_span: (usize, usize),
    reduction: LossReduction,
) -> Result<f64> {
    let (rows, targets) = answer_rows_targets(answer_tokens, answer_span)?;
    if *rows.last().unwrap() >= logits.rows {
        return Err(ChimeraError::contract("answer span outside the sequence"));
    }
    let mut total = 0.0;
    for (&r, &t) in rows.iter().zip(&targets) {
        if t >= logits.cols {
            return Err(ChimeraError::data(format!("answer token {t} outside vocab")));
        }
        let row = logits.row(r);
        let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = maxv + row.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok(match reduction {
        LossReduction::Mean => total / rows.len() as f64,
        LossReduction::Sum => total,
    })
}

/// Deterministic argmax decoding: extends the prefix one token at a time
/// until the end token or `max_new`. Collaboration masking is off at
/// inference, so the prefix must carry all-true bits.
pub fn greedy_generate(
    prefix: &AssembledSequence,
    max_new: usize,
    cfg: &LMConfig,
    params: &Params,
) -> Result<Vec<u32>> {
    let mut vectors = prefix.vectors.clone();
    let mut bits = prefix.attention_bits.clone();
    let tok_emb = params.get("lm.tok_emb")?.clone();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let tape = Tape::inference();
        let vars = params.bind(&tape);
        let input = tape.leaf(vectors.clone());
        let (logits, _) = forward_on_tape(&tape, input, &bits, cfg, &vars, None)?;
        let logits = tape.value(logits);
        let next = logits.argmax_row(logits.rows - 1) as u32;
        out.push(next);
        if next == crate::datagen::vocab::EOS {
            break;
        }
        let emb_row = Tensor::from_vec(1, tok_emb.cols, tok_emb.row(next as usize).to_vec());
        vectors = Tensor::concat_rows(&[&vectors, &emb_row]);
        bits.push(true);
    }
    Ok(out)
}

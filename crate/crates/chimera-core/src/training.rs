//! Two-stage training: knowledge alignment (projectors + router over a
//! frozen LM), then instruction tuning with collaboration masking (LM
//! unfrozen), both minimizing the combined objective
//! `L = lambda * L_c + L_m`. Also: the AdamW optimizer, the
//! warmup-cosine schedule, a naive preference-optimization stage, and the
//! finite-difference gradient-check harness.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DpoConfig, StageConfig, StageKind, Warmup};
use crate::datagen::{Sample, StageTag};
use crate::error::{ChimeraError, Result};
use crate::fusion::AssemblyMode;
use crate::lm;
use crate::model::{ForwardOptions, ModelState, ParamGroup, Params};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Combined objective. Non-finite inputs abort with diagnostics instead of
/// propagating NaN into the optimizer.
pub fn total_loss(router_loss: f64, lm_loss: f64, lambda_c: f64) -> Result<f64> {
    if !router_loss.is_finite() || !lm_loss.is_finite() {
        return Err(ChimeraError::Numeric {
            step: 0,
            msg: format!("non-finite loss: L_c={router_loss}, L_m={lm_loss}"),
        });
    }
    if !(lambda_c > 0.0) {
        return Err(ChimeraError::config("lambda_c must be positive"));
    }
    Ok(lambda_c * router_loss + lm_loss)
}

/// Which parameter groups each stage trains. Encoders are frozen in every
/// stage; the preference stage touches only the language model.
pub fn freeze_schedule(stage: StageKind) -> Vec<ParamGroup> {
    match stage {
        StageKind::One => vec![
            ParamGroup::Router,
            ParamGroup::GeneralProjector,
            ParamGroup::ExpertProjectors,
        ],
        StageKind::Two => vec![
            ParamGroup::Router,
            ParamGroup::GeneralProjector,
            ParamGroup::ExpertProjectors,
            ParamGroup::LanguageModel,
        ],
        StageKind::Dpo => vec![ParamGroup::LanguageModel],
    }
}

/// Linear warmup from zero to `cfg.lr`, then cosine decay to zero at
/// `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &StageConfig) -> f64 {
    let warmup = match cfg.warmup {
        Warmup::Steps(s) => s,
        Warmup::Ratio(r) => (r * total_steps as f64).round() as usize,
    };
    if step >= total_steps {
        return 0.0;
    }
    if warmup > 0 && step < warmup {
        return cfg.lr * step as f64 / warmup as f64;
    }
    let span = total_steps.saturating_sub(warmup);
    if span == 0 {
        return cfg.lr;
    }
    let progress = (step - warmup) as f64 / span as f64;
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// AdamW with decoupled weight decay. Per-parameter first/second moments
/// and step counts live here and are checkpointed for exact resume.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub weight_decay: f64,
    pub default_lr: f64,
    state: BTreeMap<String, AdamSlot>,
}

#[derive(Clone, Debug)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    pub fn new(default_lr: f64, weight_decay: f64) -> Self {
        AdamW { weight_decay, default_lr, state: BTreeMap::new() }
    }

    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) {
        assert_eq!(param.shape(), grad.shape(), "grad shape mismatch for {name}");
        let slot = self.state.entry(name.to_string()).or_insert_with(|| AdamSlot {
            m: Tensor::zeros(param.rows, param.cols),
            v: Tensor::zeros(param.rows, param.cols),
            t: 0,
        });
        slot.t += 1;
        let bc1 = 1.0 - BETA1.powi(slot.t as i32);
        let bc2 = 1.0 - BETA2.powi(slot.t as i32);
        for i in 0..param.data.len() {
            let g = grad.data[i];
            slot.m.data[i] = BETA1 * slot.m.data[i] + (1.0 - BETA1) * g;
            slot.v.data[i] = BETA2 * slot.v.data[i] + (1.0 - BETA2) * g * g;
            let mhat = slot.m.data[i] / bc1;
            let vhat = slot.v.data[i] / bc2;
            param.data[i] -=
                lr * (mhat / (vhat.sqrt() + ADAM_EPS) + self.weight_decay * param.data[i]);
        }
    }

    pub fn slots(&self) -> impl Iterator<Item = (&String, &AdamSlot)> {
        self.state.iter()
    }

    pub fn restore_slot(&mut self, name: String, slot: AdamSlot) {
        self.state.insert(name, slot);
    }
}

/// One optimizer step's log record; serialized as JSONL.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: StageKind,
    pub step: usize,
    pub epoch: usize,
    pub l_c: f64,
    pub l_m: f64,
    pub l_total: f64,
    pub lr: f64,
}

/// Position inside a staged run, checkpointed for exact resume. All RNG is
/// stream-keyed by (seed, purpose, index), so counters are the entire
/// random state.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub epoch: usize,
    pub batch_in_epoch: usize,
    pub global_step: usize,
    pub samples_seen: u64,
}

pub struct StageReport {
    pub records: Vec<StepRecord>,
    pub final_loss: f64,
    pub steps_run: usize,
}

/// Owns the model and optimizer for one staged run.
pub struct Trainer {
    pub state: ModelState,
    pub optimizer: AdamW,
    pub progress: TrainProgress,
    /// Directory for periodic checkpoints, when enabled.
    pub checkpoint_dir: Option<std::path::PathBuf>,
}

impl Trainer {
    pub fn new(state: ModelState) -> Self {
        Trainer {
            state,
            optimizer: AdamW::new(0.0, 0.0),
            progress: TrainProgress::default(),
            checkpoint_dir: None,
        }
    }

    fn train_split<'a>(corpus: &'a [Sample], stage: StageKind) -> Result<Vec<&'a Sample>> {
        let want = match stage {
            StageKind::One => StageTag::Alignment,
            StageKind::Two | StageKind::Dpo => StageTag::Instruction,
        };
        let picked: Vec<&Sample> = corpus
            .iter()
            .filter(|s| s.stage_tag == want && s.split == crate::datagen::Split::Train)
            .collect();
        if picked.is_empty() {
            return Err(ChimeraError::config(format!(
                "corpus has no {want:?} training samples for stage {stage:?}"
            )));
        }
        Ok(picked)
    }

    /// Runs stage 1 or stage 2 over the corpus. Deterministic given the
    /// config seed; resuming from checkpointed progress reproduces the
    /// uninterrupted run exactly.
    pub fn run_stage(
        &mut self,
        stage: StageKind,
        cfg: &StageConfig,
        corpus: &[Sample],
    ) -> Result<StageReport> {
        cfg.validate()?;
        if stage == StageKind::Dpo {
            return Err(ChimeraError::config("use run_dpo for the preference stage"));
        }
        if stage == StageKind::One && cfg.gscm_ratio.is_some() {
            return Err(ChimeraError::config("collaboration masking is a stage-2 mechanism"));
        }
        let seed = self.state.experiment.seed;
        let samples = Self::train_split(corpus, stage)?;
        let vocab = self.state.lm_config().vocab as u32;
        if let Some(t) = samples
            .iter()
            .flat_map(|s| s.instruction.iter().chain(&s.answer))
            .find(|&&t| t >= vocab)
        {
            return Err(ChimeraError::config(format!(
                "corpus token {t} does not fit lm vocab {vocab}"
            )));
        }
        let n = samples.len();
        let batches_per_epoch = n.div_ceil(cfg.batch_size);
        let total_steps = cfg.epochs * batches_per_epoch;
        let trainable_groups = freeze_schedule(stage);
        let trainable: Vec<String> = trainable_groups
            .iter()
            .flat_map(|g| self.state.params.names_in_group(*g))
            .collect();
        self.optimizer.weight_decay = cfg.weight_decay;
        self.optimizer.default_lr = cfg.lr;

        let stage_label = match stage {
            StageKind::One => "stage1",
            StageKind::Two => "stage2",
            StageKind::Dpo => unreachable!(),
        };
        let mut records = Vec::new();
        let mut final_loss = f64::NAN;
        for epoch in self.progress.epoch..cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut order_rng =
                crate::rng::stream(seed, &format!("order.{stage_label}"), epoch as u64);
            rand::seq::SliceRandom::shuffle(&mut order[..], &mut order_rng);
            let start_batch =
                if epoch == self.progress.epoch { self.progress.batch_in_epoch } else { 0 };
            for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
                if batch_idx < start_batch {
                    continue;
                }
                let mut grad_acc: BTreeMap<String, Tensor> = BTreeMap::new();
                let mut lc_sum = 0.0;
                let mut lm_sum = 0.0;
                for (k, &si) in chunk.iter().enumerate() {
                    let sample = samples[si];
                    // the mask stream is keyed by sample position, never by
                    // data order or ratio, so ratio ablations share data order
                    let sample_counter =
                        (epoch * n + batch_idx * cfg.batch_size + k) as u64;
                    let mask = match (stage, cfg.mode, cfg.gscm_ratio) {
                        (StageKind::Two, AssemblyMode::Chimera, Some(r)) => Some(
                            crate::gscm::sample_mask(
                                self.state.experiment.corpus.general_tokens,
                                r,
                                &mut crate::rng::stream(seed, "gscm", sample_counter),
                            )?,
                        ),
                        _ => None,
                    };
                    let fwd = self
                        .state
                        .forward_sample(sample, &ForwardOptions::training(cfg.mode, mask))?;
                    let (rows, targets) =
                        lm::answer_rows_targets(&sample.answer, fwd.assembled.answer_span)?;
                    let mean = cfg.loss_reduction == crate::config::LossReduction::Mean;
                    let lc_var = fwd.tape.cross_entropy(
                        fwd.router_logits,
                        &[0],
                        &[fwd.label_class],
                        true,
                    );
                    let lm_var = fwd.tape.cross_entropy(fwd.lm_logits, &rows, &targets, mean);
                    let scaled = fwd.tape.scale(lc_var, cfg.lambda_c);
                    let total_var = fwd.tape.add(scaled, lm_var);
                    lc_sum += fwd.tape.value(lc_var).item();
                    lm_sum += fwd.tape.value(lm_var).item();
                    let mut grads = fwd.tape.backward(total_var);
                    for name in &trainable {
                        if let Some(g) = grads.take(fwd.vars[name]) {
                            grad_acc
                                .entry(name.clone())
                                .and_modify(|acc| acc.add_assign(&g))
                                .or_insert(g);
                        }
                    }
                    self.progress.samples_seen += 1;
                }
                let bsz = chunk.len() as f64;
                let l_c = lc_sum / bsz;
                let l_m = lm_sum / bsz;
                let l_tot = total_loss(l_c, l_m, cfg.lambda_c).map_err(|e| match e {
                    ChimeraError::Numeric { msg, .. } => {
                        ChimeraError::Numeric { step: self.progress.global_step, msg }
                    }
                    other => other,
                })?;
                let lr = lr_at(self.progress.global_step, total_steps, cfg);
                let inv = 1.0 / bsz;
                for name in &trainable {
                    if let Some(g) = grad_acc.get(name) {
                        let p = self.state.params.get_mut(name)?;
                        self.optimizer.update(name, p, &g.scale(inv), lr);
                    }
                }
                self.progress.global_step += 1;
                self.progress.batch_in_epoch = batch_idx + 1;
                let record = StepRecord {
                    stage,
                    step: self.progress.global_step,
                    epoch,
                    l_c,
                    l_m,
                    l_total: l_tot,
                    lr,
                };
                final_loss = l_tot;
                records.push(record);
                if let (Some(every), Some(dir)) = (cfg.checkpoint_every, &self.checkpoint_dir)
                {
                    if self.progress.global_step % every == 0 {
                        crate::checkpoint::save(
                            &dir.clone(),
                            &self.state,
                            Some(&self.optimizer),
                            self.progress,
                            Some(stage),
                            serde_json::json!({ "l_total": final_loss }),
                        )?;
                    }
                }
            }
            self.progress.epoch = epoch + 1;
            self.progress.batch_in_epoch = 0;
        }
        Ok(StageReport { steps_run: records.len(), final_loss, records })
    }
}

pub fn write_metrics_jsonl(path: &Path, records: &[StepRecord]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

// ---- preference optimization ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Sample,
    pub chosen: Vec<u32>,
    pub rejected: Vec<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DpoRecord {
    pub step: usize,
    pub loss: f64,
    /// Mean over the batch of log pi(chosen) - log pi(rejected) under the
    /// policy.
    pub margin: f64,
}

pub struct DpoReport {
    pub records: Vec<DpoRecord>,
    pub pairs_used: usize,
}

/// Temperature sampling of a completion, mirroring greedy generation.
fn sample_completion(
    state: &ModelState,
    sample: &Sample,
    max_new: usize,
    temperature: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<u32>> {
    let opts = ForwardOptions {
        include_answer: false,
        ..ForwardOptions::inference(AssemblyMode::Chimera)
    };
    let fwd = state.forward_sample(sample, &opts)?;
    let mut vectors = fwd.assembled.vectors.clone();
    let mut bits = fwd.assembled.attention_bits.clone();
    let tok_emb = state.params.get("lm.tok_emb")?.clone();
    let cfg = state.lm_config();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let tape = Tape::inference();
        let vars = state.params.bind(&tape);
        let input = tape.leaf(vectors.clone());
        let (logits, _) = lm::forward_on_tape(&tape, input, &bits, cfg, &vars, None)?;
        let logits = tape.value(logits);
        let row = logits.row(logits.rows - 1);
        let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = row.iter().map(|v| ((v - maxv) / temperature).exp()).collect();
        let z: f64 = weights.iter().sum();
        let mut draw = rng.random::<f64>() * z;
        let mut next = 0usize;
        for (i, w) in weights.iter().enumerate() {
            draw -= w;
            if draw <= 0.0 {
                next = i;
                break;
            }
        }
        let next = next as u32;
        out.push(next);
        if next == crate::datagen::vocab::EOS {
            break;
        }
        let emb = Tensor::from_vec(1, tok_emb.cols, tok_emb.row(next as usize).to_vec());
        vectors = Tensor::concat_rows(&[&vectors, &emb]);
        bits.push(true);
    }
    Ok(out)
}

/// Builds preference pairs by sampling rollouts on instruction data and
/// labeling them by exact match against the corpus ground truth. A pair
/// needs one correct and one incorrect rollout for the same prompt.
pub fn build_preference_pairs(
    state: &ModelState,
    corpus: &[Sample],
    cfg: &DpoConfig,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    cfg.validate()?;
    let mut pairs = Vec::new();
    let prompts: Vec<&Sample> = corpus
        .iter()
        .filter(|s| s.stage_tag == StageTag::Instruction && s.split == crate::datagen::Split::Train)
        .collect();
    'outer: for (pi, prompt) in prompts.iter().enumerate() {
        let max_new = prompt.answer.len() + 2;
        let mut correct: Option<Vec<u32>> = None;
        let mut incorrect: Option<Vec<u32>> = None;
        for k in 0..cfg.rollouts_per_prompt {
            let mut rng = crate::rng::stream(
                seed,
                "rollout",
                (pi * cfg.rollouts_per_prompt + k) as u64,
            );
            let completion =
                sample_completion(state, prompt, max_new, cfg.temperature, &mut rng)?;
            if completion == prompt.answer {
                correct.get_or_insert(completion);
            } else if !completion.is_empty() {
                incorrect.get_or_insert(completion);
            }
            if correct.is_some() && incorrect.is_some() {
                break;
            }
        }
        if let (Some(chosen), Some(rejected)) = (correct, incorrect) {
            pairs.push(PreferencePair { prompt: (*prompt).clone(), chosen, rejected });
            if pairs.len() >= cfg.max_pairs {
                break 'outer;
            }
        }
    }
    Ok(pairs)
}

/// Sequence log-likelihood of an answer under given parameters.
fn answer_logprob(
    state: &ModelState,
    params: &Params,
    prompt: &Sample,
    answer: &[u32],
) -> Result<f64> {
    let mut s = prompt.clone();
    s.answer = answer.to_vec();
    let st = ModelState { experiment: state.experiment.clone(), params: params.clone() };
    let fwd = st.forward_sample(&s, &ForwardOptions::inference(AssemblyMode::Chimera))?;
    let (rows, targets) = lm::answer_rows_targets(&s.answer, fwd.assembled.answer_span)?;
    let lp = fwd.tape.logprob_sum(fwd.lm_logits, &rows, &targets);
    Ok(fwd.tape.value(lp).item())
}

/// Direct preference optimization against a frozen reference policy:
/// minimizes -log sigmoid(beta * ((lp_w - lp_ref_w) - (lp_l - lp_ref_l))),
/// training the language-model group only.
pub fn run_dpo(
    trainer: &mut Trainer,
    reference: &Params,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<DpoReport> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(ChimeraError::config("no preference pairs"));
    }
    let trainable: Vec<String> =
        trainer.state.params.names_in_group(ParamGroup::LanguageModel);
    trainer.optimizer.weight_decay = cfg.weight_decay;
    // reference log-probs are fixed; compute once per pair
    let mut ref_margins = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let rw = answer_logprob(&trainer.state, reference, &pair.prompt, &pair.chosen)?;
        let rl = answer_logprob(&trainer.state, reference, &pair.prompt, &pair.rejected)?;
        ref_margins.push(rw - rl);
    }
    let mut records = Vec::new();
    for step in 0..cfg.steps {
        let mut grad_acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut margin_sum = 0.0;
        let mut order_rng = crate::rng::stream(trainer.state.experiment.seed, "dpo.order", step as u64);
        let batch: Vec<usize> =
            (0..cfg.batch_size).map(|_| order_rng.random_range(0..pairs.len())).collect();
        for &pi in &batch {
            let pair = &pairs[pi];
            // chosen and rejected forwards share one tape
            let mut chosen_sample = pair.prompt.clone();
            chosen_sample.answer = pair.chosen.clone();
            let fwd_w = trainer.state.forward_sample(
                &chosen_sample,
                &ForwardOptions {
                    selection: crate::model::ExpertSelection::Router,
                    ..ForwardOptions::training(AssemblyMode::Chimera, None)
                },
            )?;
            let (rows_w, tgts_w) =
                lm::answer_rows_targets(&chosen_sample.answer, fwd_w.assembled.answer_span)?;
            let lp_w = fwd_w.tape.logprob_sum(fwd_w.lm_logits, &rows_w, &tgts_w);

            let mut rej_sample = pair.prompt.clone();
            rej_sample.answer = pair.rejected.clone();
            let fwd_l = trainer.state.forward_sample(
                &rej_sample,
                &ForwardOptions {
                    selection: crate::model::ExpertSelection::Router,
                    ..ForwardOptions::training(AssemblyMode::Chimera, None)
                },
            )?;
            let (rows_l, tgts_l) =
                lm::answer_rows_targets(&rej_sample.answer, fwd_l.assembled.answer_span)?;
            let lp_l = fwd_l.tape.logprob_sum(fwd_l.lm_logits, &rows_l, &tgts_l);

            // z = beta * ((lp_w - lp_l) - ref_margin); loss = softplus(-z)
            // the two tapes are separate: combine gradients by seeding each
            // with d(loss)/d(lp)
            let lw = fwd_w.tape.value(lp_w).item();
            let ll = fwd_l.tape.value(lp_l).item();
            let z = cfg.beta * ((lw - ll) - ref_margins[pi]);
            let sig = 1.0 / (1.0 + z.exp()); // sigmoid(-z)
            let loss = softplus(-z);
            loss_sum += loss;
            margin_sum += lw - ll;
            // d loss / d lp_w = -beta * sigmoid(-z); d loss / d lp_l = +beta * sigmoid(-z)
            let dw = -cfg.beta * sig;
            let dl = cfg.beta * sig;
            let scaled_w = fwd_w.tape.scale(lp_w, dw);
            let mut gw = fwd_w.tape.backward(scaled_w);
            for name in &trainable {
                if let Some(g) = gw.take(fwd_w.vars[name]) {
                    grad_acc
                        .entry(name.clone())
                        .and_modify(|acc| acc.add_assign(&g))
                        .or_insert(g);
                }
            }
            let scaled_l = fwd_l.tape.scale(lp_l, dl);
            let mut gl = fwd_l.tape.backward(scaled_l);
            for name in &trainable {
                if let Some(g) = gl.take(fwd_l.vars[name]) {
                    grad_acc
                        .entry(name.clone())
                        .and_modify(|acc| acc.add_assign(&g))
                        .or_insert(g);
                }
            }
        }
        let bsz = batch.len() as f64;
        let loss = loss_sum / bsz;
        if !loss.is_finite() {
            return Err(ChimeraError::Numeric { step, msg: "non-finite preference loss".into() });
        }
        let inv = 1.0 / bsz;
        for name in &trainable {
            if let Some(g) = grad_acc.get(name) {
                let p = trainer.state.params.get_mut(name)?;
                trainer.optimizer.update(name, p, &g.scale(inv), cfg.lr);
            }
        }
        records.push(DpoRecord { step: step + 1, loss, margin: margin_sum / bsz });
    }
    Ok(DpoReport { pairs_used: pairs.len(), records })
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-pair preference loss at given policy parameters; ln 2 when the
/// policy equals the reference.
pub fn dpo_pair_loss(
    state: &ModelState,
    policy: &Params,
    reference: &Params,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(ChimeraError::config("beta must be positive"));
    }
    let pw = answer_logprob(state, policy, &pair.prompt, &pair.chosen)?;
    let pl = answer_logprob(state, policy, &pair.prompt, &pair.rejected)?;
    let rw = answer_logprob(state, reference, &pair.prompt, &pair.chosen)?;
    let rl = answer_logprob(state, reference, &pair.prompt, &pair.rejected)?;
    Ok(softplus(-beta * ((pw - rw) - (pl - rl))))
}

/// Mean policy margin log pi(chosen) - log pi(rejected) over pairs.
pub fn mean_margin(state: &ModelState, params: &Params, pairs: &[PreferencePair]) -> Result<f64> {
    let mut total = 0.0;
    for pair in pairs {
        let w = answer_logprob(state, params, &pair.prompt, &pair.chosen)?;
        let l = answer_logprob(state, params, &pair.prompt, &pair.rejected)?;
        total += w - l;
    }
    Ok(total / pairs.len() as f64)
}

// ---- finite-difference verification harness ----

/// Central-difference gradient of `loss` w.r.t. every scalar in the named
/// parameters, compared against the supplied analytic gradients. Returns
/// the maximum relative error.
pub fn finite_diff_gradcheck(
    loss: &mut dyn FnMut(&Params) -> Result<f64>,
    params: &Params,
    analytic: &BTreeMap<String, Tensor>,
    names: &[String],
    epsilon: f64,
) -> Result<f64> {
    assert!((1e-6..=1e-3).contains(&epsilon), "epsilon outside sane range");
    let mut max_err = 0.0f64;
    for name in names {
        let base = params.get(name)?.clone();
        let an = analytic
            .get(name)
            .ok_or_else(|| ChimeraError::contract(format!("no analytic grad for {name}")))?;
        for i in 0..base.data.len() {
            let mut p_plus = params.clone();
            p_plus.get_mut(name)?.data[i] += epsilon;
            let mut p_minus = params.clone();
            p_minus.get_mut(name)?.data[i] -= epsilon;
            let fd = (loss(&p_plus)? - loss(&p_minus)?) / (2.0 * epsilon);
            let a = an.data[i];
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

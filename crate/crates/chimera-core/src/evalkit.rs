//! Evaluation and analysis: router confusion, attention-mass
//! distribution over spans, exact-match answer accuracy, the mask-ratio
//! ablation, and the sequence/tree similarity metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use crate::metrics::{edit_distance, normalized_edit_distance};
pub use crate::teds::{parse_table_markup, ted, teds, Tree};

use crate::config::ExperimentConfig;
use crate::datagen::{DomainKind, Sample, Split, StageTag};
use crate::error::{ChimeraError, Result};
use crate::fusion::{AssemblyMode, SpanLabel};
use crate::model::{ForwardOptions, ModelState};
use crate::config::StageKind;
use crate::training::Trainer;

/// Rows are ground-truth classes, columns are predictions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub total: usize,
}

impl ConfusionMatrix {
    pub fn row_sum(&self, class: usize) -> usize {
        self.counts[class].iter().sum()
    }
}

/// Routes every sample and tallies predictions against labels.
pub fn router_confusion(state: &ModelState, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let classes = state.corpus_spec().num_experts() + 1;
    let mut counts = vec![vec![0usize; classes]; classes];
    let mut correct = 0usize;
    let w = state.params.get("router.w")?;
    let b = state.params.get("router.b")?;
    for s in samples {
        let truth = state
            .corpus_spec()
            .class_of(s.image.domain)
            .ok_or_else(|| ChimeraError::data("unregistered domain"))?;
        let feats = state.encode_general(&s.image)?;
        let decision = crate::router::route(&feats.cls, w, b)?;
        counts[truth][decision.choice] += 1;
        if decision.choice == truth {
            correct += 1;
        }
    }
    Ok(ConfusionMatrix {
        counts,
        accuracy: correct as f64 / samples.len().max(1) as f64,
        total: samples.len(),
    })
}

/// Attention mass over the three span kinds, aggregated uniformly over
/// layers, heads, and answer-predicting query rows. The masses sum to 1.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct AttentionMasses {
    pub general: f64,
    pub expert: f64,
    pub text: f64,
}

/// Measures where answer predictions attend at inference (masking off,
/// router-chosen experts). Samples the router sends to no expert get
/// expert mass 0 by definition.
pub fn attention_distribution(state: &ModelState, sample: &Sample) -> Result<AttentionMasses> {
    let opts = ForwardOptions {
        trace: true,
        ..ForwardOptions::inference(AssemblyMode::Chimera)
    };
    let fwd = state.forward_sample(sample, &opts)?;
    let trace = fwd.trace.as_ref().expect("trace requested");
    let spans = &fwd.assembled.spans;
    let span_of = |j: usize| -> SpanLabel {
        spans
            .iter()
            .find(|s| j >= s.start && j < s.start + s.len)
            .map(|s| s.label)
            .expect("position inside a span")
    };
    let mut acc = AttentionMasses::default();
    let mut weight_count = 0usize;
    for per_layer in &trace.weights {
        for head in per_layer {
            for r in 0..head.rows {
                let row = head.row(r);
                let mut m = AttentionMasses::default();
                for (j, &p) in row.iter().enumerate() {
                    match span_of(j) {
                        SpanLabel::GeneralVisual => m.general += p,
                        SpanLabel::ExpertVisual => m.expert += p,
                        SpanLabel::Text => m.text += p,
                    }
                }
                acc.general += m.general;
                acc.expert += m.expert;
                acc.text += m.text;
                weight_count += 1;
            }
        }
    }
    let n = weight_count.max(1) as f64;
    Ok(AttentionMasses {
        general: acc.general / n,
        expert: acc.expert / n,
        text: acc.text / n,
    })
}

/// Mean expert attention mass over samples the router sends to an expert.
pub fn mean_expert_attention(
    state: &ModelState,
    samples: &[Sample],
) -> Result<(AttentionMasses, usize)> {
    let mut acc = AttentionMasses::default();
    let mut n = 0usize;
    for s in samples {
        let feats = state.encode_general(&s.image)?;
        let decision = crate::router::route(
            &feats.cls,
            state.params.get("router.w")?,
            state.params.get("router.b")?,
        )?;
        if !decision.invokes_expert() {
            continue;
        }
        let m = attention_distribution(state, s)?;
        acc.general += m.general;
        acc.expert += m.expert;
        acc.text += m.text;
        n += 1;
    }
    if n > 0 {
        acc.general /= n as f64;
        acc.expert /= n as f64;
        acc.text /= n as f64;
    }
    Ok((acc, n))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: f64,
    pub per_domain: BTreeMap<String, f64>,
    /// Accuracy restricted to expert-domain value queries.
    pub value_query: f64,
    pub n: usize,
    pub n_value_query: usize,
}

/// Exact-match accuracy of greedy generation against the ground-truth
/// answer tokens (end token included).
pub fn answer_accuracy(
    state: &ModelState,
    samples: &[Sample],
    mode: AssemblyMode,
) -> Result<AccuracyReport> {
    let mut per_domain: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut correct = 0usize;
    let mut vq_correct = 0usize;
    let mut vq_total = 0usize;
    for s in samples {
        let generated = state.generate_with_mode(s, mode, s.answer.len() + 2)?;
        let ok = generated == s.answer;
        let entry = per_domain.entry(s.image.domain.name().to_string()).or_insert((0, 0));
        entry.1 += 1;
        if ok {
            entry.0 += 1;
            correct += 1;
        }
        if s.stage_tag == StageTag::Instruction && s.image.domain != DomainKind::General {
            vq_total += 1;
            if ok {
                vq_correct += 1;
            }
        }
    }
    Ok(AccuracyReport {
        overall: correct as f64 / samples.len().max(1) as f64,
        per_domain: per_domain
            .into_iter()
            .map(|(k, (c, t))| (k, c as f64 / t.max(1) as f64))
            .collect(),
        value_query: vq_correct as f64 / vq_total.max(1) as f64,
        n: samples.len(),
        n_value_query: vq_total,
    })
}

/// Normalized-edit-distance and tree-similarity summary of generated
/// answers. Tables are scored with the tree metric via their markup
/// rendering; everything else contributes edit distance only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub mean_normalized_edit_distance: f64,
    pub mean_teds: Option<f64>,
    pub n: usize,
    pub n_tables: usize,
}

/// Renders a table-domain alignment answer (digit rows separated by row
/// markers) as table markup for the tree metric.
pub fn table_answer_to_markup(tokens: &[u32]) -> Option<String> {
    use crate::datagen::vocab;
    let mut rows: Vec<Vec<u8>> = vec![Vec::new()];
    for &t in tokens {
        if t == vocab::EOS {
            break;
        } else if t == vocab::ROW_SEP {
            rows.push(Vec::new());
        } else if (vocab::DIGIT_BASE..vocab::DIGIT_BASE + 10).contains(&t) {
            rows.last_mut().unwrap().push((t - vocab::DIGIT_BASE) as u8);
        } else {
            return None;
        }
    }
    rows.retain(|r| !r.is_empty());
    if rows.is_empty() {
        return None;
    }
    let mut out = String::from("<table>");
    for r in rows {
        out.push_str("<tr>");
        for d in r {
            out.push_str(&format!("<td>{d}</td>"));
        }
        out.push_str("</tr>");
    }
    out.push_str("</table>");
    Some(out)
}

pub fn similarity_metrics(
    state: &ModelState,
    samples: &[Sample],
    mode: AssemblyMode,
) -> Result<SimilarityReport> {
    let mut ned_sum = 0.0;
    let mut teds_sum = 0.0;
    let mut n_tables = 0usize;
    for s in samples {
        let generated = state.generate_with_mode(s, mode, s.answer.len() + 4)?;
        ned_sum += normalized_edit_distance(&generated, &s.answer);
        if s.image.domain == DomainKind::Table && s.stage_tag == StageTag::Alignment {
            if let (Some(gm), Some(tm)) = (
                table_answer_to_markup(&generated),
                table_answer_to_markup(&s.answer),
            ) {
                if let (Ok(gt), Ok(tt)) = (parse_table_markup(&gm), parse_table_markup(&tm)) {
                    teds_sum += teds(&gt, &tt);
                    n_tables += 1;
                }
            } else {
                n_tables += 1; // unparseable generation scores zero
            }
        }
    }
    Ok(SimilarityReport {
        mean_normalized_edit_distance: ned_sum / samples.len().max(1) as f64,
        mean_teds: (n_tables > 0).then(|| teds_sum / n_tables as f64),
        n: samples.len(),
        n_tables,
    })
}

// ---- mask-ratio ablation ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub ratio: f64,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub n_seeds: usize,
}

pub struct AblationRun {
    pub ratio: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub state: ModelState,
}

pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<AblationRun>,
}

/// Full stage-2 run per (ratio, seed) on top of a shared per-seed stage-1
/// checkpoint. The data order stream ignores the ratio and the mask
/// stream is keyed per sample, so all ratios see identical batches.
pub fn ablate_mask_ratio(
    base: &ExperimentConfig,
    corpus: &[Sample],
    ratios: &[f64],
    seeds: &[u64],
) -> Result<AblationOutcome> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(ChimeraError::config("ablation ratios must lie in [0, 1]"));
    }
    if seeds.is_empty() {
        return Err(ChimeraError::config("ablation needs at least one seed"));
    }
    let eval_split: Vec<Sample> = corpus
        .iter()
        .filter(|s| s.stage_tag == StageTag::Instruction && s.split == Split::Test)
        .cloned()
        .collect();
    if eval_split.is_empty() {
        return Err(ChimeraError::config("no held-out instruction samples to score"));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let state = ModelState::init(&cfg)?;
        let mut stage1 = Trainer::new(state);
        stage1.run_stage(StageKind::One, &cfg.stage1, corpus)?;
        let aligned = stage1.state;
        for &ratio in ratios {
            let mut stage2_cfg = cfg.stage2.clone();
            stage2_cfg.gscm_ratio = Some(ratio);
            let mut trainer = Trainer::new(aligned.clone());
            trainer.run_stage(StageKind::Two, &stage2_cfg, corpus)?;
            let report = answer_accuracy(&trainer.state, &eval_split, AssemblyMode::Chimera)?;
            runs.push(AblationRun { ratio, seed, accuracy: report.overall, state: trainer.state });
        }
    }
    let rows = ratios
        .iter()
        .map(|&ratio| {
            let accs: Vec<f64> = runs
                .iter()
                .filter(|r| r.ratio == ratio)
                .map(|r| r.accuracy)
                .collect();
            let (mean, std) = crate::stats::mean_std(&accs);
            AblationRow { ratio, mean_accuracy: mean, std_accuracy: std, n_seeds: accs.len() }
        })
        .collect();
    Ok(AblationOutcome { rows, runs })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("ratio,mean,std,n\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{}\n",
            r.ratio, r.mean_accuracy, r.std_accuracy, r.n_seeds
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::generate_corpus;
    use crate::model::tests::tiny_experiment;

    #[test]
    fn confusion_rows_sum_to_class_counts() {
        let cfg = tiny_experiment(41);
        let state = ModelState::init(&cfg).unwrap();
        let (_, samples) = generate_corpus(&cfg.corpus, cfg.seed).unwrap();
        let m = router_confusion(&state, &samples).unwrap();
        let mut per_class = vec![0usize; 4];
        for s in &samples {
            per_class[cfg.corpus.class_of(s.image.domain).unwrap()] += 1;
        }
        for c in 0..4 {
            assert_eq!(m.row_sum(c), per_class[c]);
        }
        assert_eq!(m.total, samples.len());
    }

    #[test]
    fn perfect_router_is_diagonal() {
        // an untrained model is not accurate, so check on a constructed
        // matrix instead: diagonal counts imply accuracy 1
        let m = ConfusionMatrix {
            counts: vec![vec![5, 0], vec![0, 7]],
            accuracy: 1.0,
            total: 12,
        };
        assert_eq!(m.row_sum(0), 5);
        assert_eq!(m.row_sum(1), 7);
    }

    #[test]
    fn attention_masses_sum_to_one() {
        let cfg = tiny_experiment(42);
        let state = ModelState::init(&cfg).unwrap();
        let (_, samples) = generate_corpus(&cfg.corpus, cfg.seed).unwrap();
        for s in samples.iter().take(10) {
            let m = attention_distribution(&state, s).unwrap();
            assert!((m.general + m.expert + m.text - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn no_expert_sample_has_zero_expert_mass() {
        let cfg = tiny_experiment(43);
        let state = ModelState::init(&cfg).unwrap();
        let (_, samples) = generate_corpus(&cfg.corpus, cfg.seed).unwrap();
        // zero-initialized router always picks class 0
        let s = samples.iter().find(|s| s.image.domain == DomainKind::Table).unwrap();
        let m = attention_distribution(&state, s).unwrap();
        assert_eq!(m.expert, 0.0);
    }

    #[test]
    fn untrained_accuracy_is_near_chance() {
        let mut cfg = tiny_experiment(44);
        cfg.corpus.instruction.test = 64;
        let state = ModelState::init(&cfg).unwrap();
        let (_, samples) = generate_corpus(&cfg.corpus, cfg.seed).unwrap();
        let test: Vec<Sample> = samples
            .into_iter()
            .filter(|s| s.split == Split::Test && s.stage_tag == StageTag::Instruction)
            .collect();
        let r = answer_accuracy(&state, &test, AssemblyMode::Chimera).unwrap();
        // random model almost never emits token-exact answers
        assert!(r.overall < 0.2, "untrained accuracy {}", r.overall);
        assert_eq!(r.n, test.len());
    }

    #[test]
    fn table_markup_rendering() {
        use crate::datagen::vocab;
        let tokens = vec![
            vocab::digit(3),
            vocab::digit(7),
            vocab::ROW_SEP,
            vocab::digit(1),
            vocab::digit(4),
            vocab::ROW_SEP,
            vocab::EOS,
        ];
        let markup = table_answer_to_markup(&tokens).unwrap();
        assert_eq!(markup, "<table><tr><td>3</td><td>7</td></tr><tr><td>1</td><td>4</td></tr></table>");
        let tree = parse_table_markup(&markup).unwrap();
        assert_eq!(tree.len(), 7);
        assert!(table_answer_to_markup(&[vocab::Q_TABLE]).is_none());
    }

    #[test]
    fn ablation_produces_one_row_per_ratio() {
        let mut cfg = tiny_experiment(45);
        cfg.corpus.alignment.train = 8;
        cfg.corpus.instruction.train = 8;
        cfg.corpus.instruction.test = 8;
        cfg.stage1.batch_size = 8;
        cfg.stage2.batch_size = 8;
        let (_, samples) = generate_corpus(&cfg.corpus, cfg.seed).unwrap();
        let out = ablate_mask_ratio(&cfg, &samples, &[0.0, 0.3], &[1, 2]).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.runs.len(), 4);
        for row in &out.rows {
            assert_eq!(row.n_seeds, 2);
            assert!(row.mean_accuracy >= 0.0 && row.mean_accuracy <= 1.0);
        }
        let csv = ablation_csv(&out.rows);
        assert!(csv.starts_with("ratio,mean,std,n\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}

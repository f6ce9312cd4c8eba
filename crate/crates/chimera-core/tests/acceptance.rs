//! Acceptance suite: one test per criterion, each printing a PASS line
//! with its measured numbers when it succeeds. Run with
//! `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::BTreeMap;
use std::time::Instant;

use chimera_core::config::{
    ExpertDims, ExperimentConfig, LMConfig, LmWarmConfig, StageConfig, StageKind, StageCounts,
    WarmConfig, Warmup,
};
use chimera_core::datagen::{self, DomainKind, Sample, Split, StageTag};
use chimera_core::fusion::AssemblyMode;
use chimera_core::gscm;
use chimera_core::model::{ForwardOptions, ModelState, ParamGroup};
use chimera_core::stats;
use chimera_core::tensor::Tensor;
use chimera_core::training::{self, Trainer};

mod support;

// ---------------------------------------------------------------------
// Criterion 1: full combined-loss gradients on the micro configuration
// match central finite differences within 1e-4 relative error for every
// trainable parameter group, and frozen groups receive no gradient.
// ---------------------------------------------------------------------

fn micro_experiment(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::with_seed(seed);
    cfg.corpus.expert_domains = vec![DomainKind::Table];
    cfg.corpus.table_rows = 2;
    cfg.corpus.table_cols = 2;
    cfg.corpus.general_side = 2;
    cfg.corpus.general_tokens = 8;
    cfg.corpus.alignment = StageCounts { train: 1, val: 0, test: 0 };
    cfg.corpus.instruction = StageCounts { train: 1, val: 0, test: 0 };
    cfg.model.general_tokens = 8;
    cfg.model.d_g = 6;
    cfg.model.experts =
        vec![ExpertDims { domain: DomainKind::Table, token_count: 16, feature_dim: 6 }];
    cfg.model.lm =
        LMConfig { d_lm: 8, layers: 1, heads: 2, vocab: 8, max_len: 40, tie_embeddings: true };
    cfg.model.warm = WarmConfig { steps: 4, batch_size: 2, lr: 1e-2 };
    cfg.model.lm_warm = LmWarmConfig { steps: 0, batch_size: 1, lr: 1e-3 };
    cfg
}

/// A handcrafted micro sample whose token ids fit the 8-token vocabulary.
fn micro_sample() -> Sample {
    let image = datagen::PseudoImage::new(DomainKind::Table, 2, 2, vec![3, 7, 1, 4]);
    Sample {
        id: 0,
        image,
        instruction: vec![2, 3],
        answer: vec![4, 5, 1],
        stage_tag: StageTag::Instruction,
        split: Split::Train,
    }
}

fn combined_loss(state: &ModelState, sample: &Sample, mask: &gscm::MaskSpec) -> f64 {
    let opts = ForwardOptions::training(AssemblyMode::Chimera, Some(mask.clone()));
    let fwd = state.forward_sample(sample, &opts).unwrap();
    let (rows, targets) =
        chimera_core::lm::answer_rows_targets(&sample.answer, fwd.assembled.answer_span).unwrap();
    let lc = fwd.tape.cross_entropy(fwd.router_logits, &[0], &[fwd.label_class], true);
    let lm = fwd.tape.cross_entropy(fwd.lm_logits, &rows, &targets, true);
    fwd.tape.value(lc).item() + fwd.tape.value(lm).item()
}

#[test]
fn criterion_1_gradient_correctness() {
    let t0 = Instant::now();
    let cfg = micro_experiment(101);
    let state = ModelState::init(&cfg).unwrap();
    let sample = micro_sample();
    let mask = gscm::MaskSpec::from_positions(8, [1usize, 3, 6]);

    // analytic gradients of L = L_c + L_m through the full pipeline
    let opts = ForwardOptions::training(AssemblyMode::Chimera, Some(mask.clone()));
    let fwd = state.forward_sample(&sample, &opts).unwrap();
    let (rows, targets) =
        chimera_core::lm::answer_rows_targets(&sample.answer, fwd.assembled.answer_span).unwrap();
    let lc = fwd.tape.cross_entropy(fwd.router_logits, &[0], &[fwd.label_class], true);
    let lm = fwd.tape.cross_entropy(fwd.lm_logits, &rows, &targets, true);
    let scaled = fwd.tape.scale(lc, 1.0);
    let total = fwd.tape.add(scaled, lm);
    let mut grads = fwd.tape.backward(total);

    let trainable_groups = [
        ParamGroup::Router,
        ParamGroup::GeneralProjector,
        ParamGroup::ExpertProjectors,
        ParamGroup::LanguageModel,
    ];
    let mut analytic: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut names: Vec<String> = Vec::new();
    for g in trainable_groups {
        for name in state.params.names_in_group(g) {
            let grad = grads
                .take(fwd.vars[&name])
                .unwrap_or_else(|| {
                    let t = state.params.get(&name).unwrap();
                    Tensor::zeros(t.rows, t.cols)
                });
            analytic.insert(name.clone(), grad);
            names.push(name);
        }
    }
    // frozen groups must receive no gradient at all
    for g in [ParamGroup::GeneralEncoder, ParamGroup::ExpertEncoders] {
        for name in state.params.names_in_group(g) {
            assert!(
                grads.take(fwd.vars[&name]).is_none(),
                "frozen parameter {name} received gradient"
            );
        }
    }

    let mut loss = |p: &chimera_core::model::Params| -> chimera_core::Result<f64> {
        let st = ModelState { experiment: state.experiment.clone(), params: p.clone() };
        Ok(combined_loss(&st, &sample, &mask))
    };
    let max_err = training::finite_diff_gradcheck(
        &mut loss,
        &state.params,
        &analytic,
        &names,
        1e-4,
    )
    .unwrap();
    let elapsed = t0.elapsed();
    assert!(
        max_err < 1e-4,
        "criterion 1 FAIL: max relative gradient error {max_err:.3e}"
    );
    assert!(elapsed.as_secs() < 60, "criterion 1 FAIL: took {elapsed:?}");
    println!(
        "criterion 1 PASS: gradient correctness, max rel err {max_err:.3e} over {} scalars in {:.1?}",
        names.iter().map(|n| state.params.get(n).unwrap().data.len()).sum::<usize>(),
        elapsed
    );
}

// ---------------------------------------------------------------------
// Criterion 3: collaboration-mask statistics. Exactly floor(ratio*n)
// positions per draw, chi-square uniformity p > 0.01 over 10k draws, and
// the ratio-1.0 rule masks everything in 80% +- 2% of draws.
// ---------------------------------------------------------------------

#[test]
fn criterion_3_gscm_statistics() {
    let n = 32usize;
    let ratio = 0.25;
    let draws = 10_000u64;
    let mut counts = vec![0u64; n];
    for i in 0..draws {
        let mut rng = chimera_core::rng::stream(303, "gscm", i);
        let m = gscm::sample_mask(n, ratio, &mut rng).unwrap();
        assert_eq!(
            m.masked_positions.len(),
            8,
            "criterion 3 FAIL: draw {i} masked {} positions",
            m.masked_positions.len()
        );
        for &p in &m.masked_positions {
            counts[p] += 1;
        }
    }
    let (stat, p) = stats::chi_square_uniform(&counts);
    assert!(p > 0.01, "criterion 3 FAIL: uniformity p={p} (chi2={stat})");

    let mut all = 0u64;
    for i in 0..draws {
        let mut rng = chimera_core::rng::stream(304, "gscm", i);
        let m = gscm::sample_mask(n, 1.0, &mut rng).unwrap();
        match m.masked_positions.len() {
            32 => all += 1,
            0 => {}
            k => panic!("criterion 3 FAIL: partial mask of {k} under ratio 1.0"),
        }
    }
    let frac = all as f64 / draws as f64;
    assert!(
        (frac - 0.8).abs() <= 0.02,
        "criterion 3 FAIL: mask-all fraction {frac}"
    );
    println!(
        "criterion 3 PASS: gscm statistics, count exact, uniformity p={p:.4}, mask-all fraction {frac:.4}"
    );
}

// ---------------------------------------------------------------------
// Criterion 8: metric oracles. The edit-distance DP equals the
// exponential recursive oracle on every string pair up to length 6 over a
// 3-symbol alphabet; the tree similarity equals a brute-force forest
// edit-distance oracle on every ordered labeled tree pair up to 6 nodes
// with 2 labels.
// ---------------------------------------------------------------------

#[test]
fn criterion_8_edit_distance_oracle() {
    let t0 = Instant::now();
    // all strings over {a,b,c} with length <= 6: sum 3^l = 1093
    let mut strings: Vec<Vec<u8>> = Vec::new();
    for len in 0..=6usize {
        for mut k in 0..3usize.pow(len as u32) {
            let mut s = Vec::with_capacity(len);
            for _ in 0..len {
                s.push(b'a' + (k % 3) as u8);
                k /= 3;
            }
            strings.push(s);
        }
    }
    assert_eq!(strings.len(), 1093);
    let mut checked = 0u64;
    for i in 0..strings.len() {
        for j in i..strings.len() {
            let (a, b) = (&strings[i], &strings[j]);
            let oracle = support::edit_distance_recursive(a, b);
            let dp_ab = chimera_core::metrics::edit_distance(a, b);
            let dp_ba = chimera_core::metrics::edit_distance(b, a);
            assert_eq!(dp_ab, oracle, "DP({a:?},{b:?}) != oracle");
            assert_eq!(dp_ba, oracle, "DP is asymmetric on ({a:?},{b:?})");
            checked += 1;
        }
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 120, "criterion 8 FAIL: edit-distance sweep took {elapsed:?}");
    println!(
        "criterion 8 PASS (edit distance): {checked} unordered pairs vs recursive oracle in {elapsed:.1?}"
    );
}

#[test]
fn criterion_8_teds_oracle() {
    let t0 = Instant::now();
    let trees = support::all_trees_up_to(6, 2);
    assert_eq!(trees.len(), 3238); // sum over n of catalan(n-1) * 2^n
    let mut checked = 0u64;
    for (i, a) in trees.iter().enumerate() {
        for b in trees.iter().skip(i) {
            let oracle = support::ted_bruteforce(a, b);
            let zs = chimera_core::teds::ted(a, b);
            let zs_rev = chimera_core::teds::ted(b, a);
            assert_eq!(zs, oracle, "ZS != oracle on pair {i}");
            assert_eq!(zs_rev, oracle, "ZS asymmetric on pair {i}");
            let sim = chimera_core::teds::teds(a, b);
            let want = (1.0 - oracle as f64 / a.len().max(b.len()) as f64).max(0.0);
            assert!((sim - want).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&sim));
            if a == b {
                assert_eq!(sim, 1.0);
            } else {
                assert!(sim < 1.0, "distinct trees scored 1.0 at pair {i}");
            }
            checked += 1;
        }
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 120, "criterion 8 FAIL: tree sweep took {elapsed:?}");
    println!(
        "criterion 8 PASS (tree similarity): {checked} unordered tree pairs vs brute-force oracle in {elapsed:.1?}"
    );
}

// ---------------------------------------------------------------------
// Criterion 2: loss decomposition and the stage-1 freeze contract on a
// 400-sample corpus.
// ---------------------------------------------------------------------

#[test]
fn criterion_2_loss_decomposition_and_freeze() {
    let t0 = Instant::now();
    let mut cfg = ExperimentConfig::with_seed(202);
    cfg.corpus.alignment = StageCounts { train: 100, val: 0, test: 0 }; // x4 domains = 400
    cfg.corpus.instruction = StageCounts { train: 0, val: 0, test: 0 };
    cfg.model.warm = WarmConfig { steps: 30, batch_size: 8, lr: 1e-2 };
    cfg.stage1 = StageConfig {
        epochs: 1,
        batch_size: 32,
        lr: 1e-3,
        warmup: Warmup::Ratio(0.1),
        ..StageConfig::default()
    };
    let (manifest, samples) = datagen::generate_corpus(&cfg.corpus, cfg.seed).unwrap();
    assert_eq!(manifest.total(), 400);
    let state = ModelState::init(&cfg).unwrap();
    let frozen = [
        ParamGroup::GeneralEncoder,
        ParamGroup::ExpertEncoders,
        ParamGroup::LanguageModel,
    ];
    let frozen_before = state.params.digest(&frozen);
    let router_before = state.params.digest(&[ParamGroup::Router]);
    let proj_before =
        state.params.digest(&[ParamGroup::GeneralProjector, ParamGroup::ExpertProjectors]);
    let mut trainer = Trainer::new(state);
    let report = trainer.run_stage(StageKind::One, &cfg.stage1, &samples).unwrap();
    let mut max_gap = 0.0f64;
    for r in &report.records {
        let gap = (r.l_total - (cfg.stage1.lambda_c * r.l_c + r.l_m)).abs();
        max_gap = max_gap.max(gap);
    }
    assert!(max_gap <= 1e-9, "criterion 2 FAIL: decomposition gap {max_gap:.3e}");
    assert_eq!(
        trainer.state.params.digest(&frozen),
        frozen_before,
        "criterion 2 FAIL: frozen parameters changed in stage 1"
    );
    assert_ne!(
        trainer.state.params.digest(&[ParamGroup::Router]),
        router_before,
        "criterion 2 FAIL: router did not train"
    );
    assert_ne!(
        trainer
            .state
            .params
            .digest(&[ParamGroup::GeneralProjector, ParamGroup::ExpertProjectors]),
        proj_before,
        "criterion 2 FAIL: projectors did not train"
    );
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 300, "criterion 2 FAIL: took {elapsed:?}");
    println!(
        "criterion 2 PASS: decomposition gap {max_gap:.2e} over {} steps, freeze contract bitwise, {elapsed:.1?}",
        report.steps_run
    );
}

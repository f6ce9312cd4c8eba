// scratch diagnostic: does the pretrained LM solve its own text tasks?
use chimera_core::config::ExperimentConfig;
use chimera_core::datagen::vocab::{digit, EOS, OP_PLUS, ROW_SEP};
use chimera_core::fusion::{AssembledSequence, Span, SpanLabel};
use chimera_core::model::{ModelState, Params};
use chimera_core::tensor::Tensor;
use rand::Rng;

fn embed(params: &Params, ids: &[u32]) -> Tensor {
    let emb = params.get("lm.tok_emb").unwrap();
    let mut out = Tensor::zeros(ids.len(), emb.cols);
    for (i, &t) in ids.iter().enumerate() {
        out.row_mut(i).copy_from_slice(emb.row(t as usize));
    }
    out
}

fn gen(state: &ModelState, prefix_ids: &[u32], max_new: usize) -> Vec<u32> {
    let vectors = embed(&state.params, prefix_ids);
    let len = prefix_ids.len();
    let seq = AssembledSequence {
        vectors,
        attention_bits: vec![true; len],
        spans: vec![Span { label: SpanLabel::Text, start: 0, len }],
        answer_span: (len, 0),
    };
    chimera_core::lm::greedy_generate(&seq, max_new, state.lm_config(), &state.params).unwrap()
}

#[test]
#[ignore]
fn lm_warm_task_accuracy() {
    let cfg = ExperimentConfig::with_seed(11);
    let state = ModelState::init(&cfg).unwrap();
    let mut rng = chimera_core::rng::stream(5, "diag", 0);
    let mut ok_recall = 0;
    let mut ok_copy = 0;
    let mut ok_sum = 0;
    let mut ok_argmax = 0;
    let n = 100;
    for _ in 0..n {
        // keyed recall
        let m = 4;
        let mut keys: Vec<(u8, u8, u8)> = Vec::new();
        let mut ids = Vec::new();
        for _ in 0..m {
            let (a, b) = loop {
                let a = rng.random_range(0..10u8);
                let b = rng.random_range(0..10u8);
                if !keys.iter().any(|&(ka, kb, _)| ka == a && kb == b) { break (a, b); }
            };
            let v = rng.random_range(0..10u8);
            keys.push((a, b, v));
            ids.extend([digit(a), digit(b), digit(v)]);
        }
        let &(qa, qb, qv) = &keys[rng.random_range(0..keys.len())];
        ids.push(ROW_SEP);
        ids.extend([digit(qa), digit(qb)]);
        if gen(&state, &ids, 2) == vec![digit(qv), EOS] { ok_recall += 1; }
        // copy
        let k = 5;
        let xs: Vec<u32> = (0..k).map(|_| digit(rng.random_range(0..10u8))).collect();
        let mut ids = xs.clone();
        ids.push(ROW_SEP);
        let mut want = xs.clone();
        want.push(EOS);
        if gen(&state, &ids, k + 1) == want { ok_copy += 1; }
        // sum
        let a = rng.random_range(0..10u8);
        let b = rng.random_range(0..10u8);
        let ids = vec![digit(a), OP_PLUS, digit(b), ROW_SEP];
        if gen(&state, &ids, 2) == vec![digit((a + b) % 10), EOS] { ok_sum += 1; }
        // argmax
        let l = 6;
        let ds: Vec<u8> = loop {
            let ds: Vec<u8> = (0..l).map(|_| rng.random_range(0..10u8)).collect();
            let mx = *ds.iter().max().unwrap();
            if ds.iter().filter(|&&v| v == mx).count() == 1 { break ds; }
        };
        let pos = chimera_core::datagen::argmax_position(&ds) as u8 + 1;
        let mut ids: Vec<u32> = ds.iter().map(|&v| digit(v)).collect();
        ids.push(ROW_SEP);
        if gen(&state, &ids, 2) == vec![digit(pos), EOS] { ok_argmax += 1; }
    }
    println!("recall {ok_recall}/{n} copy {ok_copy}/{n} sum {ok_sum}/{n} argmax {ok_argmax}/{n}");
}

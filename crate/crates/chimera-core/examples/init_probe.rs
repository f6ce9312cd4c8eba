// Measures text-twin task accuracy of the freshly initialized model.
use chimera_core::config::ExperimentConfig;
use chimera_core::datagen::{self, vocab};
use chimera_core::fusion::{AssembledSequence, Span, SpanLabel};
use chimera_core::model::ModelState;
use chimera_core::tensor::Tensor;
use rand::Rng;

fn main() {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let mut cfg = ExperimentConfig::with_seed(11);
    cfg.model.lm_warm.steps = steps;
    let t = std::time::Instant::now();
    let state = ModelState::init(&cfg).unwrap();
    eprintln!("init {:?}", t.elapsed());
    let tok = state.params.get("lm.tok_emb").unwrap().clone();
    let g_len = cfg.corpus.general_tokens;
    let d = cfg.model.lm.d_lm;
    let mut rng = chimera_core::rng::stream(123, "initprobe", 0);
    let mut gauss = |rng: &mut rand_chacha::ChaCha8Rng, sigma: f64| -> f64 {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    };
    let emb_rms = (tok.data.iter().map(|v| v * v).sum::<f64>() / tok.data.len() as f64).sqrt();
    let budget_table = cfg.model.experts.iter().find(|e| e.domain == datagen::DomainKind::Table).unwrap().token_count;
    let mut ok = 0;
    let n = 100;
    for _ in 0..n {
        // text twin of a table value query, exactly like pretraining
        let (rows_n, cols_n) = (cfg.corpus.table_rows, cfg.corpus.table_cols);
        let grid: Vec<u8> = (0..rows_n * cols_n).map(|_| rng.random_range(0..10u8)).collect();
        let mut vecs = Tensor::zeros(0, d);
        let mut push_noise = |vecs: &mut Tensor, rng: &mut rand_chacha::ChaCha8Rng, sigma: f64| {
            let mut row = vec![0.0; d];
            for v in row.iter_mut() { *v = gauss(rng, sigma); }
            *vecs = Tensor::concat_rows(&[vecs, &Tensor::from_vec(1, d, row)]);
        };
        let mut push_tok = |vecs: &mut Tensor, t: u32| {
            *vecs = Tensor::concat_rows(&[vecs, &Tensor::from_vec(1, d, tok.row(t as usize).to_vec())]);
        };
        for _ in 0..g_len { push_noise(&mut vecs, &mut rng, emb_rms); }
        let mut count = 0;
        for r in 0..rows_n {
            for c in 0..cols_n {
                push_tok(&mut vecs, vocab::digit(r as u8 + 1));
                push_tok(&mut vecs, vocab::digit(c as u8 + 1));
                push_tok(&mut vecs, vocab::digit(grid[r * cols_n + c]));
                count += 3;
            }
            push_tok(&mut vecs, vocab::ROW_SEP);
            count += 1;
        }
        for _ in count..budget_table { push_tok(&mut vecs, vocab::digit(rng.random_range(0..10u8))); }
        // instruction: junk slot + (r, c)
        let qr = rng.random_range(0..rows_n);
        let qc = rng.random_range(0..cols_n);
        push_tok(&mut vecs, vocab::digit(rng.random_range(0..10u8)));
        push_tok(&mut vecs, vocab::digit(qr as u8 + 1));
        push_tok(&mut vecs, vocab::digit(qc as u8 + 1));
        let len = vecs.rows;
        let seq = AssembledSequence {
            vectors: vecs,
            attention_bits: vec![true; len],
            spans: vec![Span { label: SpanLabel::Text, start: 0, len }],
            answer_span: (len, 0),
        };
        let gen = chimera_core::lm::greedy_generate(&seq, 3, state.lm_config(), &state.params).unwrap();
        if gen == vec![vocab::digit(grid[qr * cols_n + qc]), vocab::EOS] {
            ok += 1;
        }
    }
    println!("init table-twin recall accuracy: {ok}/{n}");
}

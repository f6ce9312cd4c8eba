// Single-task probe: keyed recall at deployment geometry.
use chimera_core::config::LMConfig;
use chimera_core::model::Params;
use chimera_core::tape::Tape;
use chimera_core::tensor::Tensor;
use chimera_core::training::AdamW;
use chimera_core::datagen::vocab;
use rand::Rng;
use std::collections::BTreeMap;

fn main() {
    let lr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let layers: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let heads: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(4);
    let cfg = LMConfig { d_lm: 48, layers, heads, vocab: 24, max_len: 160, tie_embeddings: true };
    let mut params = Params::init_lm_only(&cfg, 7);
    let names: Vec<String> = params.names().cloned().collect();
    let mut opt = AdamW::new(lr, 0.0);
    let mut rng = chimera_core::rng::stream(1, "recall", 0);
    let bsz = 8;
    let (rows_n, cols_n) = (3usize, 4usize);
    let g_len = 16usize;
    let budget = 64usize;
    let emb_scale = 0.058;
    for step in 0..=steps {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut acc = 0.0;
        for _ in 0..bsz {
            let grid: Vec<u8> = (0..rows_n * cols_n).map(|_| rng.random_range(0..10u8)).collect();
            let mut ids: Vec<usize> = Vec::new();
            for r in 0..rows_n {
                for c in 0..cols_n {
                    ids.push(vocab::digit(r as u8 + 1) as usize);
                    ids.push(vocab::digit(c as u8 + 1) as usize);
                    ids.push(vocab::digit(grid[r * cols_n + c]) as usize);
                }
                ids.push(vocab::ROW_SEP as usize);
            }
            while ids.len() < budget {
                ids.push(vocab::digit(rng.random_range(0..10u8)) as usize);
            }
            let qr = rng.random_range(0..rows_n);
            let qc = rng.random_range(0..cols_n);
            ids.push(vocab::digit(rng.random_range(0..10u8)) as usize); // slot
            ids.push(vocab::digit(qr as u8 + 1) as usize);
            ids.push(vocab::digit(qc as u8 + 1) as usize);
            let ans = vocab::digit(grid[qr * cols_n + qc]) as usize;
            ids.push(ans);
            ids.push(vocab::EOS as usize);
            let text_len = ids.len();
            let tape = Tape::new();
            let vars = params.bind(&tape);
            // general region: fresh noise
            let mut noise = Tensor::zeros(g_len, cfg.d_lm);
            for v in noise.data.iter_mut() {
                let u1: f64 = rng.random::<f64>().max(1e-12);
                let u2: f64 = rng.random::<f64>();
                *v = emb_scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            }
            let gn = tape.leaf(noise);
            let te = tape.embedding(vars["lm.tok_emb"], &ids);
            let tnoise_sigma: f64 = std::env::var("TWIN_NOISE")
                .ok()
                .and_then(|s| s.parse().ok())
                .unwrap_or(0.0);
            let input = if tnoise_sigma > 0.0 {
                let mut tn = Tensor::zeros(ids.len(), cfg.d_lm);
                for v in tn.data.iter_mut() {
                    let u1: f64 = rng.random::<f64>().max(1e-12);
                    let u2: f64 = rng.random::<f64>();
                    *v = tnoise_sigma * emb_scale
                        * (-2.0 * u1.ln()).sqrt()
                        * (2.0 * std::f64::consts::PI * u2).cos();
                }
                let tnl = tape.leaf(tn);
                let te2 = tape.add(te, tnl);
                tape.concat_rows(&[gn, te2])
            } else {
                tape.concat_rows(&[gn, te])
            };
            let total = g_len + text_len;
            let bits = vec![true; total];
            let (logits, _) =
                chimera_core::lm::forward_on_tape(&tape, input, &bits, &cfg, &vars, None).unwrap();
            let rows = vec![total - 3, total - 2];
            let targets = vec![ids[text_len - 2], ids[text_len - 1]];
            let loss = tape.cross_entropy(logits, &rows, &targets, true);
            loss_sum += tape.value(loss).item();
            let lv = tape.value(logits);
            if lv.argmax_row(total - 3) == ans {
                acc += 1.0;
            }
            let mut g = tape.backward(loss);
            for n in &names {
                if let Some(t) = g.take(vars[n]) {
                    grads.entry(n.clone()).and_modify(|a| a.add_assign(&t)).or_insert(t);
                }
            }
        }
        for (n, g) in grads {
            let p = params.get_mut(&n).unwrap();
            opt.update(&n, p, &g.scale(1.0 / bsz as f64), lr);
        }
        if step % 250 == 0 {
            println!("step {step} loss {:.4} acc {:.2}", loss_sum / bsz as f64, acc / bsz as f64);
        }
    }
}

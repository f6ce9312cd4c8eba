// Minimal probe: can the transformer learn fixed-length delayed copy?
use chimera_core::config::LMConfig;
use chimera_core::model::Params;
use chimera_core::tape::Tape;
use chimera_core::tensor::Tensor;
use chimera_core::training::AdamW;
use rand::Rng;
use std::collections::BTreeMap;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(800);
    let layers: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);
    let tie = args.get(4).map(|s| s == "tie").unwrap_or(true);
    let var_k = std::env::var("VARK").is_ok();
    let filler_on = std::env::var("FILLER").is_ok();
    let offset_on = std::env::var("OFFSET").is_ok();
    let max_len = 120;
    let cfg = LMConfig { d_lm: 48, layers, heads: 4, vocab: 24, max_len, tie_embeddings: tie };
    let mut params = Params::init_lm_only(&cfg, 7);
    let names: Vec<String> = params.names().cloned().collect();
    let mut opt = AdamW::new(lr, 0.0);
    let k = 5usize;
    let mut rng = chimera_core::rng::stream(1, "copyprobe", 0);
    let bsz = 8;
    for step in 0..steps {
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_sum = 0.0;
        for _ in 0..bsz {
            let kk = if var_k { 2 + rng.random_range(0..7usize) } else { k };
            let xs: Vec<usize> = (0..kk).map(|_| 2 + rng.random_range(0..10usize)).collect();
            let mut ids = xs.clone();
            ids.push(17); // separator
            ids.extend_from_slice(&xs);
            ids.push(1); // end token
            let mut first = kk;
            if filler_on {
                let f = rng.random_range(0..=32usize);
                let mut pre: Vec<usize> =
                    (0..f).map(|_| 2 + rng.random_range(0..10usize)).collect();
                pre.extend_from_slice(&ids);
                ids = pre;
                first += f;
            }
            let offset = if offset_on { rng.random_range(0..=max_len - ids.len()) } else { 0 };
            let tape = Tape::new();
            let vars = params.bind(&tape);
            let input = tape.embedding(vars["lm.tok_emb"], &ids);
            let bits = vec![true; ids.len()];
            let (logits, _) = chimera_core::lm::forward_at_offset(
                &tape, input, offset, &bits, &cfg, &vars, None,
            )
            .unwrap();
            let rows: Vec<usize> = (first..ids.len() - 1).collect();
            let targets: Vec<usize> = ids[first + 1..].to_vec();
            let loss = tape.cross_entropy(logits, &rows, &targets, true);
            loss_sum += tape.value(loss).item();
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
        if step % 100 == 0 || step == steps - 1 {
            println!("step {step} loss {:.4}", loss_sum / bsz as f64);
        }
    }
}

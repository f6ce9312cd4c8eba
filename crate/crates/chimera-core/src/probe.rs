//! Linear probes: softmax regression fit by full-batch gradient descent.
//! Used to verify the corpus separability and expert-informativeness
//! guarantees (domain from CLS, withheld values from expert features).

use crate::tensor::Tensor;

pub struct LinearProbe {
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearProbe {
    pub fn predict(&self, x: &[f64]) -> usize {
        let xs = Tensor::row_vec(x.to_vec());
        let logits = xs.matmul(&self.w).add_row(&self.b);
        logits.argmax_row(0)
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> f64 {
        let correct = xs
            .iter()
            .zip(ys)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        correct as f64 / xs.len() as f64
    }
}

/// Full-batch softmax regression; deterministic (zero init, fixed step).
pub fn fit_probe(
    xs: &[Vec<f64>],
    ys: &[usize],
    classes: usize,
    epochs: usize,
    lr: f64,
) -> LinearProbe {
    assert!(!xs.is_empty() && xs.len() == ys.len());
    let dim = xs[0].len();
    let n = xs.len() as f64;
    let mut w = Tensor::zeros(dim, classes);
    let mut b = Tensor::zeros(1, classes);
    for _ in 0..epochs {
        let mut gw = Tensor::zeros(dim, classes);
        let mut gb = Tensor::zeros(1, classes);
        for (x, &y) in xs.iter().zip(ys) {
            let xt = Tensor::row_vec(x.clone());
            let logits = xt.matmul(&w).add_row(&b);
            let row = logits.row(0);
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - maxv).exp()).sum();
            for c in 0..classes {
                let p = (row[c] - maxv).exp() / z;
                let d = p - if c == y { 1.0 } else { 0.0 };
                for (k, &xv) in x.iter().enumerate() {
                    gw.data[k * classes + c] += d * xv;
                }
                gb.data[c] += d;
            }
        }
        for (wv, g) in w.data.iter_mut().zip(&gw.data) {
            *wv -= lr * g / n;
        }
        for (bv, g) in b.data.iter_mut().zip(&gb.data) {
            *bv -= lr * g / n;
        }
    }
    LinearProbe { w, b }
}

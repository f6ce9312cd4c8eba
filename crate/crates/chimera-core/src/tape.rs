//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records operations in topological order; [`Tape::backward`]
//! walks them in reverse, accumulating gradients. Nodes hold their forward
//! value behind an `Rc` so backward closures can capture what they need
//! without copying.
//!
//! The tape can also run with recording disabled ([`Tape::inference`]):
//! forward values are computed identically (bitwise), but no backward
//! closures are stored. Evaluation and greedy decoding use that mode.
//!
//! Every op's backward is exercised by finite-difference checks in the
//! tests at the bottom of this file; the full-model check lives in the
//! training module.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Accumulates gradient contributions by node id.
pub struct GradSink {
    grads: Vec<Option<Tensor>>,
}

impl GradSink {
    pub fn add(&mut self, id: usize, g: Tensor) {
        match &mut self.grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

type BackFn = Box<dyn Fn(&Tensor, &mut GradSink)>;

struct Node {
    value: Rc<Tensor>,
    back: Option<BackFn>,
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: bool,
}

/// Gradients keyed by the `Var` they belong to.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), recording: true }
    }

    /// A tape that computes forward values only. Same arithmetic, no
    /// backward closures, no gradient bookkeeping.
    pub fn inference() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), recording: false }
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    fn push(&self, value: Tensor, back: Option<BackFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            back: if self.recording { back } else { None },
        });
        Var(id)
    }

    pub fn leaf(&self, value: Tensor) -> Var {
        self.push(value, None)
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients.
    pub fn backward(&self, loss: Var) -> Grads {
        let nodes = self.nodes.borrow();
        assert!(self.recording, "backward on an inference tape");
        assert_eq!(nodes[loss.0].value.shape(), (1, 1), "loss must be scalar");
        let mut sink = GradSink { grads: vec![None; nodes.len()] };
        sink.grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let g = match sink.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = &nodes[id].back {
                back(&g, &mut sink);
            }
            sink.grads[id] = Some(g);
        }
        Grads { grads: sink.grads }
    }

    // ---- ops ----

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.matmul(&bv);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a.0, g.matmul_nt(&bv));
                sink.add(b.0, av.matmul_tn(g));
            })),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.add(&bv);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a.0, g.clone());
                sink.add(b.0, g.clone());
            })),
        )
    }

    /// a [m,n] + broadcast bias [1,n].
    pub fn add_bias(&self, a: Var, bias: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(bias);
        let out = av.add_row(&bv);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a.0, g.clone());
                sink.add(bias.0, g.sum_rows());
            })),
        )
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let out = av.scale(s);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a.0, g.scale(s));
            })),
        )
    }

    /// x·W + b in one node.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    /// a [m,k] · bᵀ where b is [n,k] -> [m,n]; used for tied-embedding
    /// output heads.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let out = av.matmul_nt(&bv);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink.add(a.0, g.matmul(&bv));
                sink.add(b.0, g.matmul_tn(&av));
            })),
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| self.value(*p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_rows(&refs);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let lens: Vec<usize> = values.iter().map(|v| v.rows).collect();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut start = 0;
                for (id, len) in ids.iter().zip(&lens) {
                    sink.add(*id, g.slice_rows(start, *len));
                    start += len;
                }
            })),
        )
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let out = av.slice_rows(start, len);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut full = Tensor::zeros(rows, cols);
                full.data[start * cols..(start + len) * cols].copy_from_slice(&g.data);
                sink.add(a.0, full);
            })),
        )
    }

    /// Gather rows of an embedding table.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let (vocab, dim) = tv.shape();
        let mut out = Tensor::zeros(ids.len(), dim);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < vocab, "token id {id} out of vocab {vocab}");
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        let ids = ids.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dt = Tensor::zeros(vocab, dim);
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, gv) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *acc += gv;
                    }
                }
                sink.add(table.0, dt);
            })),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let av = self.value(a);
        let mut out = av.as_ref().clone();
        for v in out.data.iter_mut() {
            let x = *v;
            *v = 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh());
        }
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut da = g.clone();
                for (dv, &x) in da.data.iter_mut().zip(&av.data) {
                    let u = C * (x + A * x * x * x);
                    let t = u.tanh();
                    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
                    *dv *= d;
                }
                sink.add(a.0, da);
            })),
        )
    }

    /// Row-wise layer norm with learned gain and bias.
    pub fn layer_norm(&self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let av = self.value(a);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let (rows, cols) = av.shape();
        assert_eq!(gv.shape(), (1, cols));
        assert_eq!(bv.shape(), (1, cols));
        let mut out = Tensor::zeros(rows, cols);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let x = av.row(r);
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for c in 0..cols {
                let xh = (x[c] - mean) * istd;
                xhat.data[r * cols + c] = xh;
                out.data[r * cols + c] = xh * gv.data[c] + bv.data[c];
            }
        }
        let xhat = Rc::new(xhat);
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut da = Tensor::zeros(rows, cols);
                let mut dgamma = Tensor::zeros(1, cols);
                let mut dbeta = Tensor::zeros(1, cols);
                for r in 0..rows {
                    let grow = g.row(r);
                    let xh = xhat.row(r);
                    let mut sum_gy = 0.0;
                    let mut sum_gy_xh = 0.0;
                    for c in 0..cols {
                        let gy = grow[c] * gv.data[c];
                        sum_gy += gy;
                        sum_gy_xh += gy * xh[c];
                        dgamma.data[c] += grow[c] * xh[c];
                        dbeta.data[c] += grow[c];
                    }
                    let nf = cols as f64;
                    for c in 0..cols {
                        let gy = grow[c] * gv.data[c];
                        da.data[r * cols + c] =
                            inv_std[r] * (gy - sum_gy / nf - xh[c] * sum_gy_xh / nf);
                    }
                }
                sink.add(a.0, da);
                sink.add(gamma.0, dgamma);
                sink.add(beta.0, dbeta);
            })),
        )
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `add_mask` is an L×L additive mask (0 or -inf) combining causality
    /// with per-key visibility bits. Rows whose keys are all masked produce
    /// a zero output row (their positions are never read downstream).
    ///
    /// When `trace` is given, each head's probability rows listed in
    /// `trace.1` are copied into it (layer-major push order).
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        add_mask: &Rc<Tensor>,
        trace: Option<(&mut Vec<Tensor>, &[usize])>,
    ) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let (len, dim) = qv.shape();
        assert_eq!(kv.shape(), (len, dim));
        assert_eq!(vv.shape(), (len, dim));
        assert_eq!(add_mask.shape(), (len, len));
        assert_eq!(dim % heads, 0, "dim must divide heads");
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut out = Tensor::zeros(len, dim);
        let mut probs_all: Vec<Rc<Tensor>> = Vec::with_capacity(heads);
        let mut trace = trace;
        for h in 0..heads {
            let off = h * dh;
            // scores[i][j] = q_i · k_j * scale + mask[i][j]
            let mut probs = Tensor::zeros(len, len);
            for i in 0..len {
                let qrow = &qv.row(i)[off..off + dh];
                let prow = probs.row_mut(i);
                let mrow = add_mask.row(i);
                let mut maxv = f64::NEG_INFINITY;
                for j in 0..len {
                    let m = mrow[j];
                    let s = if m == f64::NEG_INFINITY {
                        f64::NEG_INFINITY
                    } else {
                        let krow = &kv.row(j)[off..off + dh];
                        let mut dot = 0.0;
                        for (a, b) in qrow.iter().zip(krow) {
                            dot += a * b;
                        }
                        dot * scale + m
                    };
                    prow[j] = s;
                    if s > maxv {
                        maxv = s;
                    }
                }
                if maxv == f64::NEG_INFINITY {
                    // fully masked row: zero probabilities by convention
                    prow.iter_mut().for_each(|p| *p = 0.0);
                    continue;
                }
                let mut z = 0.0;
                for p in prow.iter_mut() {
                    *p = if *p == f64::NEG_INFINITY { 0.0 } else { (*p - maxv).exp() };
                    z += *p;
                }
                for p in prow.iter_mut() {
                    *p /= z;
                }
            }
            // out_h = probs · v_h
            for i in 0..len {
                let prow = probs.row(i);
                let orow = &mut out.row_mut(i)[off..off + dh];
                for (j, &p) in prow.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vrow = &vv.row(j)[off..off + dh];
                    for (o, &vj) in orow.iter_mut().zip(vrow) {
                        *o += p * vj;
                    }
                }
            }
            if let Some((sink_rows, rows)) = trace.as_mut() {
                let mut t = Tensor::zeros(rows.len(), len);
                for (r, &qi) in rows.iter().enumerate() {
                    t.row_mut(r).copy_from_slice(probs.row(qi));
                }
                sink_rows.push(t);
            }
            probs_all.push(Rc::new(probs));
        }

        self.push(
            out,
            Some(Box::new(move |g, sink| {
                let mut dq = Tensor::zeros(len, dim);
                let mut dk = Tensor::zeros(len, dim);
                let mut dv = Tensor::zeros(len, dim);
                for h in 0..heads {
                    let off = h * dh;
                    let probs = &probs_all[h];
                    // dV_h += probsᵀ · dOut_h ; dProbs = dOut_h · V_hᵀ
                    for i in 0..len {
                        let grow = &g.row(i)[off..off + dh];
                        let prow = probs.row(i);
                        // dProbs row i
                        let mut dprob = vec![0.0; len];
                        for j in 0..len {
                            if prow[j] == 0.0 {
                                continue;
                            }
                            let vrow = &vv.row(j)[off..off + dh];
                            let mut dot = 0.0;
                            for (a, b) in grow.iter().zip(vrow) {
                                dot += a * b;
                            }
                            dprob[j] = dot;
                            // dV
                            let dvrow = &mut dv.row_mut(j)[off..off + dh];
                            for (o, &gv) in dvrow.iter_mut().zip(grow) {
                                *o += prow[j] * gv;
                            }
                        }
                        // softmax backward: ds = p ⊙ (dp - Σ p·dp)
                        let dot: f64 = prow.iter().zip(&dprob).map(|(p, d)| p * d).sum();
                        // dQ_i += Σ_j ds_ij * k_j * scale ; dK_j += ds_ij * q_i * scale
                        let qrow = &qv.row(i)[off..off + dh];
                        let dqrow_acc: &mut [f64] = &mut dq.row_mut(i)[off..off + dh];
                        for j in 0..len {
                            if prow[j] == 0.0 {
                                continue;
                            }
                            let ds = prow[j] * (dprob[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &kv.row(j)[off..off + dh];
                            for (o, &kj) in dqrow_acc.iter_mut().zip(krow) {
                                *o += ds * kj;
                            }
                            let dkrow = &mut dk.row_mut(j)[off..off + dh];
                            for (o, &qi) in dkrow.iter_mut().zip(qrow) {
                                *o += ds * qi;
                            }
                        }
                    }
                }
                sink.add(q.0, dq);
                sink.add(k.0, dk);
                sink.add(v.0, dv);
            })),
        )
    }

    /// Mean cross-entropy over the selected logit rows:
    ///   (1/n) Σ -log softmax(logits[row])[target]
    /// With `mean = false`, the plain sum.
    pub fn cross_entropy(&self, logits: Var, rows: &[usize], targets: &[usize], mean: bool) -> Var {
        assert_eq!(rows.len(), targets.len());
        assert!(!rows.is_empty(), "cross_entropy needs at least one target");
        let lv = self.value(logits);
        let (nrows, vocab) = lv.shape();
        let mut total = 0.0;
        for (&r, &t) in rows.iter().zip(targets) {
            assert!(r < nrows && t < vocab);
            let row = lv.row(r);
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = maxv + row.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let denom = if mean { rows.len() as f64 } else { 1.0 };
        let rows = rows.to_vec();
        let targets = targets.to_vec();
        self.push(
            Tensor::scalar(total / denom),
            Some(Box::new(move |g, sink| {
                let gs = g.item() / denom;
                let mut dl = Tensor::zeros(nrows, vocab);
                for (&r, &t) in rows.iter().zip(&targets) {
                    let row = lv.row(r);
                    let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|v| (v - maxv).exp()).sum();
                    let drow = dl.row_mut(r);
                    for c in 0..vocab {
                        drow[c] += gs * ((row[c] - maxv).exp() / z - if c == t { 1.0 } else { 0.0 });
                    }
                }
                sink.add(logits.0, dl);
            })),
        )
    }

    /// Sum of log-probabilities of the targets at the selected rows
    /// (the sequence log-likelihood used by preference optimization).
    pub fn logprob_sum(&self, logits: Var, rows: &[usize], targets: &[usize]) -> Var {
        let ce = self.cross_entropy(logits, rows, targets, false);
        self.scale(ce, -1.0)
    }

    /// Numerically stable softplus ln(1 + e^x) on a scalar.
    pub fn softplus(&self, a: Var) -> Var {
        let av = self.value(a);
        let x = av.item();
        let y = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
        self.push(
            Tensor::scalar(y),
            Some(Box::new(move |g, sink| {
                let sig = 1.0 / (1.0 + (-x).exp());
                sink.add(a.0, Tensor::scalar(g.item() * sig));
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    /// Central finite differences of `f` w.r.t. `x`, step `eps`.
    fn fd_grad(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Tensor {
        let mut g = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            g.data[i] = (f(&xp) - f(&xm)) / (2.0 * eps);
        }
        g
    }

    fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    /// Weights sensitive to every output entry: u_i = i+0.5, v_j = j+0.5.
    fn scalarize(t: &Tape, out: Var) -> Var {
        let (m, n) = t.value(out).shape();
        let u = t.leaf(Tensor::row_vec((0..m).map(|i| i as f64 + 0.5).collect()));
        let v = t.leaf(Tensor::from_vec(n, 1, (0..n).map(|j| j as f64 + 0.5).collect()));
        let uo = t.matmul(u, out);
        t.matmul(uo, v)
    }

    /// Checks the tape gradient of scalarize(build(inputs)) against central
    /// finite differences, per input.
    fn check_op<F>(build: F, inputs: &[Tensor], tol: f64)
    where
        F: Fn(&Tape, &[Var]) -> Var,
    {
        let probe = |xs: &[Tensor]| -> f64 {
            let t = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            let loss = scalarize(&t, build(&t, &vars));
            t.value(loss).item()
        };
        let t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
        let loss = scalarize(&t, build(&t, &vars));
        let mut grads = t.backward(loss);
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.take(vars[k]).expect("missing grad");
            let f = |xp: &Tensor| {
                let mut xs: Vec<Tensor> = inputs.to_vec();
                xs[k] = xp.clone();
                probe(&xs)
            };
            let fd = fd_grad(&f, x, 1e-5);
            let err = max_rel_err(&analytic, &fd);
            assert!(err < tol, "input {k}: max rel err {err}");
        }
    }

    #[test]
    fn grad_matmul_add_bias() {
        let mut r = stream(3, "fd", 0);
        let a = Tensor::uniform(3, 4, 1.0, &mut r);
        let w = Tensor::uniform(4, 5, 1.0, &mut r);
        let b = Tensor::uniform(1, 5, 1.0, &mut r);
        check_op(|t, v| t.linear(v[0], v[1], v[2]), &[a, w, b], 1e-6);
    }

    #[test]
    fn grad_gelu() {
        let mut r = stream(4, "fd", 0);
        let a = Tensor::uniform(3, 4, 2.0, &mut r);
        check_op(|t, v| t.gelu(v[0]), &[a], 1e-6);
    }

    #[test]
    fn grad_layer_norm() {
        let mut r = stream(5, "fd", 0);
        let a = Tensor::uniform(3, 6, 1.5, &mut r);
        let g = Tensor::uniform(1, 6, 1.0, &mut r);
        let b = Tensor::uniform(1, 6, 1.0, &mut r);
        check_op(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), &[a, g, b], 1e-5);
    }

    #[test]
    fn grad_attention_causal_with_bits() {
        let mut r = stream(6, "fd", 0);
        let len = 5;
        let dim = 6;
        let q = Tensor::uniform(len, dim, 1.0, &mut r);
        let k = Tensor::uniform(len, dim, 1.0, &mut r);
        let v = Tensor::uniform(len, dim, 1.0, &mut r);
        // causal mask with key 2 globally hidden; row 0 stays visible to itself
        let bits = [true, true, false, true, true];
        let mut m = Tensor::zeros(len, len);
        for i in 0..len {
            for j in 0..len {
                m.data[i * len + j] =
                    if j <= i && bits[j] { 0.0 } else { f64::NEG_INFINITY };
            }
        }
        let m = Rc::new(m);
        check_op(
            move |t, vars| t.attention(vars[0], vars[1], vars[2], 2, &m, None),
            &[q, k, v],
            1e-5,
        );
    }

    #[test]
    fn grad_attention_fully_masked_row() {
        let mut r = stream(7, "fd", 0);
        let len = 4;
        let dim = 4;
        let q = Tensor::uniform(len, dim, 1.0, &mut r);
        let k = Tensor::uniform(len, dim, 1.0, &mut r);
        let v = Tensor::uniform(len, dim, 1.0, &mut r);
        // position 0 masked: row 0 sees nothing
        let bits = [false, true, true, true];
        let mut m = Tensor::zeros(len, len);
        for i in 0..len {
            for j in 0..len {
                m.data[i * len + j] =
                    if j <= i && bits[j] { 0.0 } else { f64::NEG_INFINITY };
            }
        }
        let mref = Rc::new(m.clone());
        // forward: row 0 of output must be exactly zero
        let t = Tape::new();
        let qv = t.leaf(q.clone());
        let kv = t.leaf(k.clone());
        let vv = t.leaf(v.clone());
        let out = t.attention(qv, kv, vv, 2, &mref, None);
        assert!(t.value(out).row(0).iter().all(|&x| x == 0.0));
        let m2 = Rc::new(m);
        check_op(
            move |t, vars| t.attention(vars[0], vars[1], vars[2], 2, &m2, None),
            &[q, k, v],
            1e-5,
        );
    }

    #[test]
    fn grad_cross_entropy() {
        let mut r = stream(8, "fd", 0);
        let logits = Tensor::uniform(4, 5, 2.0, &mut r);
        check_op(
            |t, v| t.cross_entropy(v[0], &[1, 3], &[2, 0], true),
            &[logits],
            1e-6,
        );
    }

    #[test]
    fn grad_matmul_nt() {
        let mut r = stream(11, "fd", 0);
        let a = Tensor::uniform(3, 4, 1.0, &mut r);
        let b = Tensor::uniform(5, 4, 1.0, &mut r);
        check_op(|t, v| t.matmul_nt(v[0], v[1]), &[a, b], 1e-6);
    }

    #[test]
    fn grad_embedding_concat_slice() {
        let mut r = stream(9, "fd", 0);
        let table = Tensor::uniform(6, 4, 1.0, &mut r);
        let other = Tensor::uniform(2, 4, 1.0, &mut r);
        check_op(
            |t, v| {
                let e = t.embedding(v[0], &[1, 4, 1]);
                let c = t.concat_rows(&[e, v[1]]);
                t.slice_rows(c, 1, 3)
            },
            &[table, other],
            1e-6,
        );
    }

    #[test]
    fn grad_softplus_scalar_chain() {
        let a = Tensor::scalar(0.37);
        let b = Tensor::scalar(-1.2);
        check_op(
            |t, v| {
                let d = t.sub(v[0], v[1]);
                let s = t.scale(d, 1.7);
                t.softplus(s)
            },
            &[a, b],
            1e-7,
        );
    }

    #[test]
    fn inference_tape_matches_recording_tape() {
        let mut r = stream(10, "fd", 0);
        let x = Tensor::uniform(3, 4, 1.0, &mut r);
        let w = Tensor::uniform(4, 4, 1.0, &mut r);
        let b = Tensor::uniform(1, 4, 1.0, &mut r);
        let run = |tape: Tape| -> Tensor {
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            let h = tape.linear(xv, wv, bv);
            let g = tape.gelu(h);
            tape.value(g).as_ref().clone()
        };
        assert_eq!(run(Tape::new()), run(Tape::inference()));
    }
}

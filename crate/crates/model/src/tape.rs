//! Reverse-mode differentiation over row-major 2-D tensors.
//!
//! A [`Tape`] records one forward pass. Parameters are borrowed, never
//! copied; [`Tape::backward`] returns gradients aligned with them. Counted
//! matrix products and attention score/value products add to a
//! multiply-add counter so forward cost can be audited against the ledger.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Axis};

pub type Mat = Array2<f64>;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which keys each query may attend to.
#[derive(Debug, Clone, PartialEq)]
pub enum Mask {
    All,
    /// Keys flagged `false` are hidden from every query.
    Keys(Vec<bool>),
    /// Query `i` sees key `j` iff `key_time[j] <= query_time[i]`.
    Causal {
        query_time: Vec<u32>,
        key_time: Vec<u32>,
    },
}

impl Mask {
    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        match self {
            Mask::All => true,
            Mask::Keys(v) => v[k],
            Mask::Causal {
                query_time,
                key_time,
            } => key_time[k] <= query_time[q],
        }
    }
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Concat(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Mat,
        rows: Vec<f64>,
    },
}

struct Node {
    /// `None` for parameters, which live in the borrowed store.
    value: Option<Mat>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p [Mat],
    nodes: Vec<Node>,
    macs: u64,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Mat]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Multiply-adds performed by counted operations so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Mat {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Option<Mat>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> Var {
        self.push(None, Op::Param(index))
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Some(value), Op::Leaf)
    }

    /// Matrix product charged to the multiply-add counter.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.value(a).dim();
        let m = self.value(b).ncols();
        self.macs += (n * k * m) as u64;
        self.matmul_uncounted(a, b)
    }

    /// Matrix product outside the audited einsums (embeddings, output head).
    pub fn matmul_uncounted(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(Some(out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(Some(out), Op::Add(a, b))
    }

    /// Adds a `[1, n]` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let out = self.value(x) + self.value(row);
        self.push(Some(out), Op::AddRow(x, row))
    }

    /// Rows of `table` selected by index (repeats allowed).
    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Var {
        let out = self.value(table).select(Axis(0), &rows);
        self.push(Some(out), Op::Gather { table, rows })
    }

    /// Row-wise concatenation.
    pub fn concat(&mut self, parts: Vec<Var>) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column mismatch in concat");
        self.push(Some(out), Op::Concat(parts))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (xhat, inv_std) = normalize(self.value(x));
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            Some(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        self.push(Some(out), Op::Gelu(x))
    }

    /// Multi-head softmax attention of `q` over `k`/`v`, heads split
    /// along columns. Charges `2 * nq * nk * d` multiply-adds whatever the
    /// mask hides.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &Arc<Mask>) -> Var {
        let (nq, d) = self.value(q).dim();
        let nk = self.value(k).nrows();
        let (out, probs) = attention_forward(
            self.value(q).view(),
            self.value(k).view(),
            self.value(v).view(),
            heads,
            mask,
        );
        self.macs += (2 * nq * nk * d) as u64;
        self.push(
            Some(out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Mean cross-entropy of `logits` rows against `targets`, as a `[1, 1]`
    /// value. Per-row losses are kept for [`Tape::row_losses`].
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), targets.len(), "one target per logit row");
        let mut probs = z.clone();
        let mut rows = Vec::with_capacity(targets.len());
        for (mut row, &t) in probs.rows_mut().into_iter().zip(&targets) {
            let lse = log_sum_exp(row.as_slice().unwrap());
            rows.push(lse - row[t]);
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let mean = rows.iter().sum::<f64>() / rows.len() as f64;
        self.push(
            Some(Array2::from_elem((1, 1), mean)),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                rows,
            },
        )
    }

    pub fn row_losses(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].op {
            Op::CrossEntropy { rows, .. } => rows,
            _ => panic!("not a cross-entropy node"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Gradients of the `[1, 1]` node `loss` with respect to every
    /// parameter.
    pub fn backward(&self, loss: Var) -> Vec<Mat> {
        self.backward_scaled(loss, 1.0)
    }

    /// As [`Tape::backward`] with the seed gradient set to `scale`.
    pub fn backward_scaled(&self, loss: Var, scale: f64) -> Vec<Mat> {
        let mut grads: Vec<Option<Mat>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem(self.value(loss).dim(), scale));
        let mut out: Vec<Mat> = self.params.iter().map(|p| Array2::zeros(p.dim())).collect();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param(p) => out[*p] += &g,
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&self.value(*b).t()));
                    accumulate(&mut grads, *b, self.value(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddRow(x, row) => {
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *x, g);
                }
                Op::Gather { table, rows } => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = gt.row_mut(r);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        accumulate(
                            &mut grads,
                            p,
                            g.slice(ndarray::s![at..at + n, ..]).to_owned(),
                        );
                        at += n;
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain);
                    accumulate(
                        &mut grads,
                        *gain,
                        (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                    );
                    accumulate(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let d = g.ncols() as f64;
                    let mut gx = &g * gv;
                    for ((mut row, xh), &inv) in
                        gx.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std)
                    {
                        let s1 = row.sum();
                        let s2 = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>();
                        for (r, &h) in row.iter_mut().zip(xh) {
                            *r = inv / d * (d * *r - s1 - h * s2);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let gx = ndarray::Zip::from(&g)
                        .and(self.value(*x))
                        .map_collect(|&gi, &xi| gi * gelu_grad(xi));
                    accumulate(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (gq, gk, gv) = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        *heads,
                        probs,
                        &g,
                    );
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gv);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    ..
                } => {
                    let s = g[[0, 0]] / targets.len() as f64;
                    let mut gz = probs * s;
                    for (i, &t) in targets.iter().enumerate() {
                        gz[[i, t]] -= s;
                    }
                    accumulate(&mut grads, *logits, gz);
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Zero-mean, unit-variance rows and their inverse standard deviations.
pub(crate) fn normalize(x: &Mat) -> (Mat, Vec<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.rows_mut() {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns the attention output and the `[heads, nq, nk]` probabilities
/// (zero where masked). A query with no visible key outputs zeros.
pub(crate) fn attention_forward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    heads: usize,
    mask: &Mask,
) -> (Mat, Vec<f64>) {
    let (nq, d) = q.dim();
    let nk = k.nrows();
    assert!(
        heads > 0 && d % heads == 0,
        "width must split evenly into heads"
    );
    assert_eq!(k.ncols(), d);
    assert_eq!(v.dim(), (nk, d));
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (q, k, v) = (
        q.as_standard_layout(),
        k.as_standard_layout(),
        v.as_standard_layout(),
    );
    let (qs, ks, vs) = (
        q.as_slice().unwrap(),
        k.as_slice().unwrap(),
        v.as_slice().unwrap(),
    );
    let mut out = vec![0.0; nq * d];
    let mut probs = vec![0.0; heads * nq * nk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let p = &mut probs[(h * nq + i) * nk..][..nk];
            let qi = &qs[i * d + off..][..dh];
            let mut max = f64::NEG_INFINITY;
            for (j, pj) in p.iter_mut().enumerate() {
                if mask.allows(i, j) {
                    *pj = dot(qi, &ks[j * d + off..][..dh]) * scale;
                    max = max.max(*pj);
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for (j, pj) in p.iter_mut().enumerate() {
                if mask.allows(i, j) {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
            }
            let oi = &mut out[i * d + off..][..dh];
            for (j, pj) in p.iter_mut().enumerate() {
                *pj /= z;
                if *pj != 0.0 {
                    for (o, x) in oi.iter_mut().zip(&vs[j * d + off..][..dh]) {
                        *o += *pj * x;
                    }
                }
            }
        }
    }
    (Array2::from_shape_vec((nq, d), out).unwrap(), probs)
}

fn attention_backward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    heads: usize,
    probs: &[f64],
    g: &Mat,
) -> (Mat, Mat, Mat) {
    let (nq, d) = q.dim();
    let nk = k.nrows();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (q, k, v, g) = (
        q.as_standard_layout(),
        k.as_standard_layout(),
        v.as_standard_layout(),
        g.as_standard_layout(),
    );
    let (qs, ks, vs, gs) = (
        q.as_slice().unwrap(),
        k.as_slice().unwrap(),
        v.as_slice().unwrap(),
        g.as_slice().unwrap(),
    );
    let mut gq = vec![0.0; nq * d];
    let mut gk = vec![0.0; nk * d];
    let mut gv = vec![0.0; nk * d];
    let mut dp = vec![0.0; nk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let p = &probs[(h * nq + i) * nk..][..nk];
            let gi = &gs[i * d + off..][..dh];
            let qi = &qs[i * d + off..][..dh];
            let mut weighted = 0.0;
            for j in 0..nk {
                if p[j] != 0.0 {
                    dp[j] = dot(gi, &vs[j * d + off..][..dh]);
                    weighted += p[j] * dp[j];
                    for (a, x) in gv[j * d + off..][..dh].iter_mut().zip(gi) {
                        *a += p[j] * x;
                    }
                }
            }
            for j in 0..nk {
                if p[j] == 0.0 {
                    continue;
                }
                let ds = p[j] * (dp[j] - weighted) * scale;
                let kj = &ks[j * d + off..][..dh];
                for (a, x) in gq[i * d + off..][..dh].iter_mut().zip(kj) {
                    *a += ds * x;
                }
                for (a, x) in gk[j * d + off..][..dh].iter_mut().zip(qi) {
                    *a += ds * x;
                }
            }
        }
    }
    (
        Array2::from_shape_vec((nq, d), gq).unwrap(),
        Array2::from_shape_vec((nk, d), gk).unwrap(),
        Array2::from_shape_vec((nk, d), gv).unwrap(),
    )
}

//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to the tape. [`Graph::backward`] walks the
//! tape in reverse and returns one gradient per parameter of the borrowed
//! [`ParamStore`]. Shape errors inside operations are programming errors and
//! panic; data-dependent failures (fully masked attention rows, non-scalar or
//! non-finite losses) are reported as [`NeuralError`].

use rand::Rng;

use super::attention::{self, BoolMatrix};
use super::gemm::{gemm, View};
use super::params::{Gradients, ParamId, ParamStore};
use super::relpos;
use super::{NeuralError, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Input,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        bias: Option<NodeId>,
        heads: usize,
        probs: Vec<f64>,
    },
    RelBias {
        table: NodeId,
        idx: Vec<usize>,
    },
    SelectRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    Sum(NodeId),
    SumSquares(NodeId),
    BceWithLogits {
        logit: NodeId,
        label: f64,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
}

/// The recording tape. Borrows the parameters it reads from.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            (None, _) => unreachable!("only parameter nodes are stored by reference"),
        }
    }

    /// Node reading a parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    /// `(m x k) @ (k x n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(bv.rows(), k, "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            View::rm(av.data(), 0, k),
            View::rm(bv.data(), 0, n),
            0.0,
            &mut out,
            0,
            n,
            1,
        );
        let t = Tensor::new(vec![m, n], out).expect("matmul shape");
        self.push(t, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes differ");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("add shape");
        self.push(t, Op::Add(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        let n = av.cols();
        assert_eq!(rv.numel(), n, "row broadcast width differs");
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(rv.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data).expect("add_row shape");
        self.push(t, Op::AddRow(a, row))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes differ");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("mul shape");
        self.push(t, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("scale shape");
        self.push(t, Op::Scale(a, factor))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("gelu shape");
        self.push(t, Op::Gelu(a))
    }

    /// Inverted dropout. Identity when `p == 0`.
    pub fn dropout<R: Rng>(&mut self, a: NodeId, p: f64, rng: &mut R) -> NodeId {
        if p <= 0.0 {
            return a;
        }
        let shape = self.value(a).shape().to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let m = self.input(Tensor::new(shape, mask).expect("dropout shape"));
        self.mul(a, m)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let (rows, n) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(gv.len(), n);
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv[c] + bv[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out).expect("layer norm shape");
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Gathers rows of a `vocab x dim` table.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = self.value(table);
        let dim = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            assert!(i < tv.rows(), "embedding id {i} out of range");
            data.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(vec![ids.len(), dim], data).expect("embedding shape");
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Multi-head attention; `q` is `lq x hidden`, `k`/`v` are `lk x hidden`,
    /// `bias` is `heads x (lq * lk)`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        mask: &BoolMatrix,
        bias: Option<NodeId>,
        heads: usize,
    ) -> Result<NodeId, NeuralError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, hidden, lk) = (qv.rows(), qv.cols(), kv.rows());
        assert_eq!(hidden % heads, 0, "hidden not divisible by heads");
        let res = attention::forward(
            qv.data(),
            kv.data(),
            vv.data(),
            lq,
            lk,
            hidden,
            heads,
            mask,
            bias.map(|b| self.value(b).data()),
        )?;
        let t = Tensor::new(vec![lq, hidden], res.out).expect("attention shape");
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                bias,
                heads,
                probs: res.probs,
            },
        ))
    }

    /// Relative-position bias `heads x (lq * lk)` from a `buckets x heads`
    /// table.
    pub fn relative_bias(&mut self, table: NodeId, lq: usize, lk: usize) -> NodeId {
        let tv = self.value(table);
        let (buckets, heads) = (tv.rows(), tv.cols());
        let idx = relpos::bucket_matrix(lq, lk, buckets);
        let t = relpos::gather_bias(tv.data(), &idx, buckets, heads, lq * lk);
        self.push(t, Op::RelBias { table, idx })
    }

    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> NodeId {
        let xv = self.value(x);
        let n = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(xv.row(r));
        }
        let t = Tensor::new(vec![rows.len(), n], data).expect("select shape");
        self.push(
            t,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(a))
    }

    /// Binary cross-entropy `-[y log s(z) + (1 - y) log(1 - s(z))]` on a
    /// single logit.
    pub fn bce_with_logits(&mut self, logit: NodeId, label: f64) -> NodeId {
        let z = self.value(logit).item();
        let loss = z.max(0.0) - label * z + (-z.abs()).exp().ln_1p();
        self.push(Tensor::scalar(loss), Op::BceWithLogits { logit, label })
    }

    /// Mean softmax cross-entropy over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> NodeId {
        let lv = self.value(logits);
        let (rows, v) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), rows, "one target slot per row");
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        let mut count = 0;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            for c in 0..v {
                probs[r * v + c] = (row[c] - lse).exp();
            }
            total += lse - row[t];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        )
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NeuralError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NeuralError::NonScalarLoss {
                shape: lv.shape().to_vec(),
            });
        }
        if !lv.is_finite() {
            return Err(NeuralError::NonFinite("loss"));
        }
        let mut out = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(p) => out.get_mut(*p).add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        View::rm(g.data(), 0, n),
                        View::tr(bv.data(), 0, n),
                        0.0,
                        &mut da,
                        0,
                        k,
                        1,
                    );
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        View::tr(av.data(), 0, k),
                        View::rm(g.data(), 0, n),
                        0.0,
                        &mut db,
                        0,
                        n,
                        1,
                    );
                    accumulate(&mut grads, *a, av.shape(), da);
                    accumulate(&mut grads, *b, bv.shape(), db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.shape(), g.data().to_vec());
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *b, &shape, g.into_data());
                }
                Op::AddRow(a, row) => {
                    let rshape = self.value(*row).shape().to_vec();
                    let n = g.cols();
                    let mut dr = vec![0.0; n];
                    for chunk in g.data().chunks(n) {
                        for (d, x) in dr.iter_mut().zip(chunk) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *row, &rshape, dr);
                    let shape = g.shape().to_vec();
                    accumulate(&mut grads, *a, &shape, g.into_data());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    let db = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    accumulate(&mut grads, *a, g.shape(), da);
                    accumulate(&mut grads, *b, g.shape(), db);
                }
                Op::Scale(a, f) => {
                    let da = g.data().iter().map(|x| x * f).collect();
                    accumulate(&mut grads, *a, g.shape(), da);
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let da = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .map(|(gy, &x)| {
                            let u = GELU_C * (x + GELU_A * x * x * x);
                            let t = u.tanh();
                            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    accumulate(&mut grads, *a, g.shape(), da);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gamma).data();
                    let n = gv.len();
                    let rows = rstd.len();
                    let mut dx = vec![0.0; rows * n];
                    let mut dgamma = vec![0.0; n];
                    let mut dbeta = vec![0.0; n];
                    let gd = g.data();
                    for r in 0..rows {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..n {
                            let dy = gd[r * n + c];
                            let h = xhat[r * n + c];
                            dgamma[c] += dy * h;
                            dbeta[c] += dy;
                            let dh = dy * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * h;
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for c in 0..n {
                            let dh = gd[r * n + c] * gv[c];
                            let h = xhat[r * n + c];
                            dx[r * n + c] = rstd[r] * (dh - mean_dh - h * mean_dh_h);
                        }
                    }
                    let gshape = self.value(*gamma).shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    accumulate(&mut grads, *gamma, &gshape, dgamma);
                    accumulate(&mut grads, *beta, &bshape, dbeta);
                    accumulate(&mut grads, *x, g.shape(), dx);
                }
                Op::Embedding { table, ids } => {
                    let tv = self.value(*table);
                    let dim = tv.cols();
                    let mut dt = vec![0.0; tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g.data()[r * dim..(r + 1) * dim];
                        for (d, s) in dt[id * dim..(id + 1) * dim].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    let shape = tv.shape().to_vec();
                    accumulate(&mut grads, *table, &shape, dt);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    bias,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (lq, hidden, lk) = (qv.rows(), qv.cols(), kv.rows());
                    let ag = attention::backward(
                        qv.data(),
                        kv.data(),
                        vv.data(),
                        probs,
                        g.data(),
                        lq,
                        lk,
                        hidden,
                        *heads,
                    );
                    let (qs, ks, vs) = (
                        qv.shape().to_vec(),
                        kv.shape().to_vec(),
                        vv.shape().to_vec(),
                    );
                    if let Some(b) = bias {
                        let bs = self.value(*b).shape().to_vec();
                        accumulate(&mut grads, *b, &bs, ag.dbias);
                    }
                    accumulate(&mut grads, *q, &qs, ag.dq);
                    accumulate(&mut grads, *k, &ks, ag.dk);
                    accumulate(&mut grads, *v, &vs, ag.dv);
                }
                Op::RelBias { table, idx } => {
                    let tv = self.value(*table);
                    let heads = tv.cols();
                    let cells = idx.len();
                    let mut dt = vec![0.0; tv.numel()];
                    for h in 0..heads {
                        for (c, &b) in idx.iter().enumerate() {
                            dt[b * heads + h] += g.data()[h * cells + c];
                        }
                    }
                    let shape = tv.shape().to_vec();
                    accumulate(&mut grads, *table, &shape, dt);
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value(*x);
                    let n = xv.cols();
                    let mut dx = vec![0.0; xv.numel()];
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..n {
                            dx[r * n + c] += g.data()[i * n + c];
                        }
                    }
                    let shape = xv.shape().to_vec();
                    accumulate(&mut grads, *x, &shape, dx);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let gs = g.item();
                    accumulate(&mut grads, *a, av.shape(), vec![gs; av.numel()]);
                }
                Op::SumSquares(a) => {
                    let av = self.value(*a);
                    let gs = g.item();
                    let da = av.data().iter().map(|x| 2.0 * x * gs).collect();
                    accumulate(&mut grads, *a, av.shape(), da);
                }
                Op::BceWithLogits { logit, label } => {
                    let lv = self.value(*logit);
                    let z = lv.item();
                    let s = 1.0 / (1.0 + (-z).exp());
                    accumulate(&mut grads, *logit, lv.shape(), vec![(s - label) * g.item()]);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let lv = self.value(*logits);
                    let v = lv.cols();
                    let mut dl = vec![0.0; lv.numel()];
                    if *count > 0 {
                        let w = g.item() / *count as f64;
                        for (r, target) in targets.iter().enumerate() {
                            let Some(t) = *target else { continue };
                            for c in 0..v {
                                dl[r * v + c] = probs[r * v + c] * w;
                            }
                            dl[r * v + t] -= w;
                        }
                    }
                    accumulate(&mut grads, *logits, lv.shape(), dl);
                }
            }
        }
        if !out.is_finite() {
            return Err(NeuralError::NonFinite("gradient"));
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], data: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sum_of_squares_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new(&store);
        let xn = g.param(x);
        let loss = g.sum_squares(xn);
        assert_eq!(g.value(loss).item(), 5.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut g = Graph::new(&store);
        let c = g.input(Tensor::new(vec![2], vec![4.0, 1.0]).unwrap());
        let loss = g.sum(c);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let mut g = Graph::new(&store);
        let xn = g.param(x);
        let err = g.backward(xn).unwrap_err();
        assert!(matches!(err, NeuralError::NonScalarLoss { .. }));
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut store = ParamStore::new();
        let gamma = store.add_filled("g", &[5], 1.0);
        let beta = store.add_zeros("b", &[5]);
        let mut g = Graph::new(&store);
        let x = g.input(
            Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0, 10.0], vec![-3.0, 0.5, 0.5, 2.0, 7.0]])
                .unwrap(),
        );
        let (gn, bn) = (g.param(gamma), g.param(beta));
        let y = g.layer_norm(x, gn, bn, 1e-12);
        for r in 0..2 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 5.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-5);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn bce_matches_closed_form() {
        let mut store = ParamStore::new();
        let z = store.add("z", Tensor::scalar(0.7));
        let mut g = Graph::new(&store);
        let zn = g.param(z);
        let loss = g.bce_with_logits(zn, 1.0);
        let s = 1.0 / (1.0 + (-0.7f64).exp());
        assert_abs_diff_eq!(g.value(loss).item(), -s.ln(), epsilon = 1e-12);
        let grads = g.backward(loss).unwrap();
        assert_abs_diff_eq!(grads.get(z).item(), s - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_vocab_cross_entropy() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let logits = g.input(Tensor::zeros(&[3, 7]));
        let loss = g.cross_entropy(logits, &[Some(1), None, Some(6)]);
        assert_abs_diff_eq!(g.value(loss).item(), 7f64.ln(), epsilon = 1e-12);
    }
}

//! Dense tensors with reverse-mode gradient accumulation.
//!
//! The graph is an eager tape: each op computes its value immediately and
//! records enough to replay adjoints in reverse order. Accumulation order is
//! fixed (row-major) everywhere so results are bit-reproducible and oracle
//! tests can demand exact equality.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SbcError};

/// Dense N-dimensional array of 64-bit floats, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(SbcError::Shape(format!(
                "shape {:?} expects {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Sigmoid(NodeId),
    Erf(NodeId),
    Softplus(NodeId),
    Digamma(NodeId),
    Relu(NodeId),
    Matmul(NodeId, NodeId),
    /// out[.., c] = a[.., c] * v[c], v broadcast over leading dims
    MulBcastLast(NodeId, NodeId),
    AddBcastLast(NodeId, NodeId),
    /// out[n, c, ..] = a[n, c, ..] * v[c] for 4-d activations
    MulBcastChan(NodeId, NodeId),
    AddBcastChan(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
    },
    MaxPool2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    SumAll(NodeId),
    SumGroups {
        x: NodeId,
        groups: Vec<usize>,
    },
    /// inverse of SumGroups: out[i] = x[groups[i]]
    ExpandGroups {
        x: NodeId,
        groups: Vec<usize>,
    },
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// elementwise a / s, s a scalar node
    DivByScalar(NodeId, NodeId),
    /// repeat a scalar node n times
    BroadcastScalar(NodeId),
    /// per-range sum of squares over a flat vector (ranges may overlap)
    BlockSumSq {
        x: NodeId,
        blocks: Vec<(usize, usize)>,
    },
    /// extract element i of a flat vector as a scalar node
    Index(NodeId, usize),
    /// -sum(x ln x) with 0 ln 0 = 0
    NegSumXLnX(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Vec<f64>,
}

/// Recorded computation tape. Create leaves with [`Graph::leaf`], build the
/// objective with op methods, then call [`Graph::backward`] once.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let n = value.numel();
        self.nodes.push(Node {
            op,
            value,
            grad: vec![0.0; n],
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<Vec<usize>> {
        let sa = &self.nodes[a.0].value.shape;
        let sb = &self.nodes[b.0].value.shape;
        if sa != sb {
            return Err(SbcError::Shape(format!(
                "elementwise op on {:?} vs {:?}",
                sa, sb
            )));
        }
        Ok(sa.clone())
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let shape = self.same_shape(a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(op(a, b), Tensor { shape, data }))
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: impl Fn(NodeId) -> Op) -> NodeId {
        let shape = self.nodes[a.0].value.shape.clone();
        let data: Vec<f64> = self.nodes[a.0].value.data.iter().map(|&x| f(x)).collect();
        self.push(op(a), Tensor { shape, data })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| -x, Op::Neg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| c * x, |n| Op::Scale(n, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |x| x + c, Op::AddScalar)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::ln, Op::Ln)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn erf(&mut self, a: NodeId) -> NodeId {
        self.unary(a, statrs::function::erf::erf, Op::Erf)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, softplus, Op::Softplus)
    }

    pub fn digamma(&mut self, a: NodeId) -> NodeId {
        self.unary(a, statrs::function::gamma::digamma, Op::Digamma)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].value.shape;
        let sb = &self.nodes[b.0].value.shape;
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(SbcError::Shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_nn(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, m, k, n);
        Ok(self.push(
            Op::Matmul(a, b),
            Tensor {
                shape: vec![m, n],
                data,
            },
        ))
    }

    /// Multiply each position along the last axis by `v` (shape `[last]`).
    pub fn mul_bcast_last(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (shape, c) = self.check_bcast_last(a, v)?;
        let vd = &self.nodes[v.0].value.data;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vd[i % c])
            .collect();
        Ok(self.push(Op::MulBcastLast(a, v), Tensor { shape, data }))
    }

    pub fn add_bcast_last(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (shape, c) = self.check_bcast_last(a, v)?;
        let vd = &self.nodes[v.0].value.data;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vd[i % c])
            .collect();
        Ok(self.push(Op::AddBcastLast(a, v), Tensor { shape, data }))
    }

    fn check_bcast_last(&self, a: NodeId, v: NodeId) -> Result<(Vec<usize>, usize)> {
        let sa = self.nodes[a.0].value.shape.clone();
        let sv = &self.nodes[v.0].value.shape;
        let c = *sa.last().ok_or_else(|| SbcError::Shape("0-d tensor".into()))?;
        if sv.len() != 1 || sv[0] != c {
            return Err(SbcError::Shape(format!(
                "broadcast over last axis: {:?} vs {:?}",
                sa, sv
            )));
        }
        Ok((sa, c))
    }

    /// Multiply channel `c` of a `[n, c, h, w]` activation by `v[c]`.
    pub fn mul_bcast_chan(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (shape, c, inner) = self.check_bcast_chan(a, v)?;
        let vd = &self.nodes[v.0].value.data;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vd[(i / inner) % c])
            .collect();
        Ok(self.push(Op::MulBcastChan(a, v), Tensor { shape, data }))
    }

    pub fn add_bcast_chan(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (shape, c, inner) = self.check_bcast_chan(a, v)?;
        let vd = &self.nodes[v.0].value.data;
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vd[(i / inner) % c])
            .collect();
        Ok(self.push(Op::AddBcastChan(a, v), Tensor { shape, data }))
    }

    fn check_bcast_chan(&self, a: NodeId, v: NodeId) -> Result<(Vec<usize>, usize, usize)> {
        let sa = self.nodes[a.0].value.shape.clone();
        let sv = &self.nodes[v.0].value.shape;
        if sa.len() != 4 {
            return Err(SbcError::Shape(format!(
                "channel broadcast expects 4-d activation, got {:?}",
                sa
            )));
        }
        let c = sa[1];
        if sv.len() != 1 || sv[0] != c {
            return Err(SbcError::Shape(format!(
                "channel broadcast: {:?} vs {:?}",
                sa, sv
            )));
        }
        Ok((sa.clone(), c, sa[2] * sa[3]))
    }

    /// Valid-padding cross-correlation, `x: [n, c_in, h, w]`, `k: [c_out, c_in, kh, kw]`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize) -> Result<NodeId> {
        let sx = &self.nodes[x.0].value.shape;
        let sk = &self.nodes[k.0].value.shape;
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(SbcError::Shape(format!("conv2d {:?} * {:?}", sx, sk)));
        }
        if stride == 0 {
            return Err(SbcError::Domain("conv2d stride must be >= 1".into()));
        }
        let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h || kw > w {
            return Err(SbcError::Shape(format!(
                "kernel {}x{} larger than input {}x{}",
                kh, kw, h, w
            )));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let xd = &self.nodes[x.0].value.data;
        let kd = &self.nodes[k.0].value.data;
        let mut out = vec![0.0; n * cout * oh * ow];
        out.par_chunks_mut(oh * ow)
            .enumerate()
            .for_each(|(img_co, plane)| {
                let (img, co) = (img_co / cout, img_co % cout);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let xi = ((img * cin + ci) * h + oy * stride + ky) * w
                                        + ox * stride
                                        + kx;
                                    let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                    acc += xd[xi] * kd[ki];
                                }
                            }
                        }
                        plane[oy * ow + ox] = acc;
                    }
                }
            });
        Ok(self.push(
            Op::Conv2d { x, k, stride },
            Tensor {
                shape: vec![n, cout, oh, ow],
                data: out,
            },
        ))
    }

    /// Non-overlapping 2x2 max pooling over `[n, c, h, w]`, h and w even.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let sx = &self.nodes[x.0].value.shape;
        if sx.len() != 4 {
            return Err(SbcError::Shape(format!("max_pool2 expects 4-d, got {:?}", sx)));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(SbcError::Shape(format!(
                "max_pool2 needs even spatial dims, got {}x{}",
                h, w
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for img in 0..n {
            for ch in 0..c {
                let base = (img * c + ch) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = base + (oy * 2 + dy) * w + ox * 2 + dx;
                                if xd[i] > best {
                                    best = xd[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = ((img * c + ch) * oh + oy) * ow + ox;
                        out[o] = best;
                        argmax[o] = best_i;
                    }
                }
            }
        }
        Ok(self.push(
            Op::MaxPool2 { x, argmax },
            Tensor {
                shape: vec![n, c, oh, ow],
                data: out,
            },
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.numel() {
            return Err(SbcError::Shape(format!(
                "reshape {:?} -> {:?}",
                self.nodes[a.0].value.shape, shape
            )));
        }
        let data = self.nodes[a.0].value.data.clone();
        Ok(self.push(Op::Reshape(a), Tensor { shape, data }))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a.0].value.numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum elements into groups: `groups[i]` is the destination bucket of
    /// flattened element `i`. Output shape `[n_groups]`.
    pub fn sum_groups(&mut self, x: NodeId, groups: &[usize], n_groups: usize) -> Result<NodeId> {
        let xd = &self.nodes[x.0].value.data;
        if groups.len() != xd.len() {
            return Err(SbcError::Shape(format!(
                "sum_groups map length {} vs {} elements",
                groups.len(),
                xd.len()
            )));
        }
        let mut out = vec![0.0; n_groups];
        for (i, &g) in groups.iter().enumerate() {
            if g >= n_groups {
                return Err(SbcError::Index(format!("group {} >= {}", g, n_groups)));
            }
            out[g] += xd[i];
        }
        Ok(self.push(
            Op::SumGroups {
                x,
                groups: groups.to_vec(),
            },
            Tensor {
                shape: vec![n_groups],
                data: out,
            },
        ))
    }

    /// Spread per-group values back to elements: `out[i] = x[groups[i]]`.
    pub fn expand_groups(&mut self, x: NodeId, groups: &[usize]) -> Result<NodeId> {
        let xd = &self.nodes[x.0].value.data;
        let mut out = Vec::with_capacity(groups.len());
        for &grp in groups {
            if grp >= xd.len() {
                return Err(SbcError::Index(format!("group {} >= {}", grp, xd.len())));
            }
            out.push(xd[grp]);
        }
        Ok(self.push(
            Op::ExpandGroups {
                x,
                groups: groups.to_vec(),
            },
            Tensor {
                shape: vec![groups.len()],
                data: out,
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under softmax of `logits [b, k]`.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let sl = &self.nodes[logits.0].value.shape;
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(SbcError::Shape(format!(
                "softmax_xent logits {:?} vs {} labels",
                sl,
                labels.len()
            )));
        }
        let (b, k) = (sl[0], sl[1]);
        for &l in labels {
            if l >= k {
                return Err(SbcError::Index(format!("label {} >= {} classes", l, k)));
            }
        }
        let ld = &self.nodes[logits.0].value.data;
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &ld[i * k..(i + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                probs[i * k + j] /= z;
            }
            loss -= (row[labels[i]] - mx) - z.ln();
        }
        loss /= b as f64;
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Elementwise `a / s` where `s` is a scalar node.
    pub fn div_by_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(SbcError::Shape("div_by_scalar divisor must be scalar".into()));
        }
        let sv = self.nodes[s.0].value.item();
        let shape = self.nodes[a.0].value.shape.clone();
        let data: Vec<f64> = self.nodes[a.0].value.data.iter().map(|&x| x / sv).collect();
        Ok(self.push(Op::DivByScalar(a, s), Tensor { shape, data }))
    }

    /// Sum of squares over each index range `[start, end)` of a flat vector.
    /// Ranges may overlap; the adjoint accumulates every covering range.
    pub fn block_sumsq(&mut self, x: NodeId, blocks: &[(usize, usize)]) -> Result<NodeId> {
        let xd = &self.nodes[x.0].value.data;
        let mut out = Vec::with_capacity(blocks.len());
        for &(s, e) in blocks {
            if s > e || e > xd.len() {
                return Err(SbcError::Index(format!(
                    "block [{}, {}) out of range for {} elements",
                    s,
                    e,
                    xd.len()
                )));
            }
            out.push(xd[s..e].iter().map(|&v| v * v).sum());
        }
        Ok(self.push(
            Op::BlockSumSq {
                x,
                blocks: blocks.to_vec(),
            },
            Tensor {
                shape: vec![blocks.len()],
                data: out,
            },
        ))
    }

    /// Repeat a scalar node into a `[n]` vector; adjoint sums back.
    pub fn broadcast_scalar(&mut self, s: NodeId, n: usize) -> Result<NodeId> {
        if self.nodes[s.0].value.numel() != 1 {
            return Err(SbcError::Shape("broadcast_scalar expects a scalar".into()));
        }
        let v = self.nodes[s.0].value.item();
        Ok(self.push(
            Op::BroadcastScalar(s),
            Tensor {
                shape: vec![n],
                data: vec![v; n],
            },
        ))
    }

    /// Extract flat element `i` as a scalar node.
    pub fn index(&mut self, a: NodeId, i: usize) -> Result<NodeId> {
        let d = &self.nodes[a.0].value.data;
        if i >= d.len() {
            return Err(SbcError::Index(format!("index {} of {} elements", i, d.len())));
        }
        let v = d[i];
        Ok(self.push(Op::Index(a, i), Tensor::scalar(v)))
    }

    /// `-sum(x ln x)` with the `0 ln 0 = 0` convention; entropy when x is a
    /// probability vector.
    pub fn neg_sum_xlnx(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0]
            .value
            .data
            .iter()
            .map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 })
            .sum();
        self.push(Op::NegSumXLnX(a), Tensor::scalar(s))
    }

    /// Reverse sweep from a scalar loss. Fills every node's grad buffer.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(SbcError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            // take grad out to appease the borrow checker; ops never read their
            // own grad during accumulation
            let g = std::mem::take(&mut self.nodes[idx].grad);
            self.accumulate(idx, &g);
            self.nodes[idx].grad = g;
        }
        Ok(())
    }

    fn accumulate(&mut self, idx: usize, g: &[f64]) {
        // split_at_mut so we can read node idx while writing parents (< idx)
        let (parents, rest) = self.nodes.split_at_mut(idx);
        let node = &rest[0];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (i, &gi) in g.iter().enumerate() {
                    parents[a.0].grad[i] += gi;
                }
                for (i, &gi) in g.iter().enumerate() {
                    parents[b.0].grad[i] += gi;
                }
            }
            Op::Sub(a, b) => {
                for (i, &gi) in g.iter().enumerate() {
                    parents[a.0].grad[i] += gi;
                }
                for (i, &gi) in g.iter().enumerate() {
                    parents[b.0].grad[i] -= gi;
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (a.0, b.0);
                for i in 0..g.len() {
                    let av = parents[a].value.data[i];
                    let bv = parents[b].value.data[i];
                    parents[a].grad[i] += g[i] * bv;
                    parents[b].grad[i] += g[i] * av;
                }
            }
            Op::Div(a, b) => {
                let (a, b) = (a.0, b.0);
                for i in 0..g.len() {
                    let av = parents[a].value.data[i];
                    let bv = parents[b].value.data[i];
                    parents[a].grad[i] += g[i] / bv;
                    parents[b].grad[i] -= g[i] * av / (bv * bv);
                }
            }
            Op::Neg(a) => {
                for (i, &gi) in g.iter().enumerate() {
                    parents[a.0].grad[i] -= gi;
                }
            }
            Op::Scale(a, c) => {
                for (i, &gi) in g.iter().enumerate() {
                    parents[a.0].grad[i] += c * gi;
                }
            }
            Op::AddScalar(a) => {
                for (i, &gi) in g.iter().enumerate() {
                    parents[a.0].grad[i] += gi;
                }
            }
            Op::Exp(a) => {
                for i in 0..g.len() {
                    parents[a.0].grad[i] += g[i] * node.value.data[i];
                }
            }
            Op::Ln(a) => {
                for i in 0..g.len() {
                    parents[a.0].grad[i] += g[i] / parents[a.0].value.data[i];
                }
            }
            Op::Sqrt(a) => {
                for i in 0..g.len() {
                    let y = node.value.data[i];
                    if y > 0.0 {
                        parents[a.0].grad[i] += g[i] / (2.0 * y);
                    }
                    // subgradient 0 at x = 0
                }
            }
            Op::Square(a) => {
                for i in 0..g.len() {
                    parents[a.0].grad[i] += g[i] * 2.0 * parents[a.0].value.data[i];
                }
            }
            Op::Sigmoid(a) => {
                for i in 0..g.len() {
                    let y = node.value.data[i];
                    parents[a.0].grad[i] += g[i] * y * (1.0 - y);
                }
            }
            Op::Erf(a) => {
                const TWO_OVER_SQRT_PI: f64 = 1.1283791670955126;
                for i in 0..g.len() {
                    let x = parents[a.0].value.data[i];
                    parents[a.0].grad[i] += g[i] * TWO_OVER_SQRT_PI * (-x * x).exp();
                }
            }
            Op::Softplus(a) => {
                for i in 0..g.len() {
                    parents[a.0].grad[i] += g[i] * sigmoid(parents[a.0].value.data[i]);
                }
            }
            Op::Digamma(a) => {
                for i in 0..g.len() {
                    parents[a.0].grad[i] += g[i] * trigamma(parents[a.0].value.data[i]);
                }
            }
            Op::Relu(a) => {
                for i in 0..g.len() {
                    if parents[a.0].value.data[i] > 0.0 {
                        parents[a.0].grad[i] += g[i];
                    }
                }
            }
            Op::Matmul(a, b) => {
                let sa = &parents[a.0].value.shape;
                let (m, k) = (sa[0], sa[1]);
                let n = parents[b.0].value.shape[1];
                let ga = matmul_nt(g, &parents[b.0].value.data, m, n, k);
                let gb = matmul_tn(&parents[a.0].value.data, g, m, k, n);
                for (dst, &src) in parents[a.0].grad.iter_mut().zip(&ga) {
                    *dst += src;
                }
                for (dst, &src) in parents[b.0].grad.iter_mut().zip(&gb) {
                    *dst += src;
                }
            }
            Op::MulBcastLast(a, v) => {
                let c = parents[v.0].value.numel();
                let (a, v) = (a.0, v.0);
                for i in 0..g.len() {
                    let av = parents[a].value.data[i];
                    let vv = parents[v].value.data[i % c];
                    parents[a].grad[i] += g[i] * vv;
                    parents[v].grad[i % c] += g[i] * av;
                }
            }
            Op::AddBcastLast(a, v) => {
                let c = parents[v.0].value.numel();
                for i in 0..g.len() {
                    parents[a.0].grad[i] += g[i];
                }
                for i in 0..g.len() {
                    parents[v.0].grad[i % c] += g[i];
                }
            }
            Op::MulBcastChan(a, v) => {
                let sa = &parents[a.0].value.shape;
                let (c, inner) = (sa[1], sa[2] * sa[3]);
                let (a, v) = (a.0, v.0);
                for i in 0..g.len() {
                    let ch = (i / inner) % c;
                    let av = parents[a].value.data[i];
                    let vv = parents[v].value.data[ch];
                    parents[a].grad[i] += g[i] * vv;
                    parents[v].grad[ch] += g[i] * av;
                }
            }
            Op::AddBcastChan(a, v) => {
                let sa = &parents[a.0].value.shape;
                let (c, inner) = (sa[1], sa[2] * sa[3]);
                for i in 0..g.len() {
                    parents[a.0].grad[i] += g[i];
                }
                for i in 0..g.len() {
                    parents[v.0].grad[(i / inner) % c] += g[i];
                }
            }
            Op::Conv2d { x, k, stride } => {
                let s = *stride;
                let sx = parents[x.0].value.shape.clone();
                let sk = parents[k.0].value.shape.clone();
                let (n, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
                let (oh, ow) = ((h - kh) / s + 1, (w - kw) / s + 1);
                let xd = &parents[x.0].value.data;
                let kd = &parents[k.0].value.data;
                // kernel gradient, parallel over output channels
                let mut gk = vec![0.0; kd.len()];
                gk.par_chunks_mut(cin * kh * kw).enumerate().for_each(|(co, chunk)| {
                    for img in 0..n {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[((img * cout + co) * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let xi = ((img * cin + ci) * h + oy * s + ky) * w
                                                + ox * s
                                                + kx;
                                            chunk[(ci * kh + ky) * kw + kx] += gv * xd[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                // input gradient, parallel over images
                let mut gx = vec![0.0; xd.len()];
                gx.par_chunks_mut(cin * h * w).enumerate().for_each(|(img, chunk)| {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[((img * cout + co) * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        for kx in 0..kw {
                                            let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                            chunk[(ci * h + oy * s + ky) * w + ox * s + kx] +=
                                                gv * kd[ki];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                for (dst, &src) in parents[x.0].grad.iter_mut().zip(&gx) {
                    *dst += src;
                }
                for (dst, &src) in parents[k.0].grad.iter_mut().zip(&gk) {
                    *dst += src;
                }
            }
            Op::MaxPool2 { x, argmax } => {
                for (o, &src) in argmax.iter().enumerate() {
                    parents[x.0].grad[src] += g[o];
                }
            }
            Op::Reshape(a) => {
                for (i, &gi) in g.iter().enumerate() {
                    parents[a.0].grad[i] += gi;
                }
            }
            Op::SumAll(a) => {
                let gv = g[0];
                for d in parents[a.0].grad.iter_mut() {
                    *d += gv;
                }
            }
            Op::SumGroups { x, groups } => {
                for (i, &grp) in groups.iter().enumerate() {
                    parents[x.0].grad[i] += g[grp];
                }
            }
            Op::ExpandGroups { x, groups } => {
                for (i, &grp) in groups.iter().enumerate() {
                    parents[x.0].grad[grp] += g[i];
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let b = labels.len();
                let k = probs.len() / b;
                let gv = g[0] / b as f64;
                for i in 0..b {
                    for j in 0..k {
                        let ind = if j == labels[i] { 1.0 } else { 0.0 };
                        parents[logits.0].grad[i * k + j] += gv * (probs[i * k + j] - ind);
                    }
                }
            }
            Op::DivByScalar(a, sn) => {
                let sv = parents[sn.0].value.item();
                let mut gs = 0.0;
                for i in 0..g.len() {
                    let av = parents[a.0].value.data[i];
                    parents[a.0].grad[i] += g[i] / sv;
                    gs -= g[i] * av / (sv * sv);
                }
                parents[sn.0].grad[0] += gs;
            }
            Op::BroadcastScalar(s) => {
                parents[s.0].grad[0] += g.iter().sum::<f64>();
            }
            Op::BlockSumSq { x, blocks } => {
                for (b, &(s, e)) in blocks.iter().enumerate() {
                    let gv = g[b];
                    if gv == 0.0 {
                        continue;
                    }
                    for i in s..e {
                        parents[x.0].grad[i] += gv * 2.0 * parents[x.0].value.data[i];
                    }
                }
            }
            Op::Index(a, i) => {
                parents[a.0].grad[*i] += g[0];
            }
            Op::NegSumXLnX(a) => {
                let gv = g[0];
                for i in 0..parents[a.0].value.data.len() {
                    let x = parents[a.0].value.data[i];
                    if x > 0.0 {
                        parents[a.0].grad[i] -= gv * (x.ln() + 1.0);
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Trigamma via recurrence to x >= 6 then the asymptotic series.
pub fn trigamma(x: f64) -> f64 {
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // 1/x + 1/2x^2 + B2/x^3 - B4/x^5 + B6/x^7 - B8/x^9
    acc + inv
        + 0.5 * inv2
        + inv * inv2 * (1.0 / 6.0 + inv2 * (-1.0 / 30.0 + inv2 * (1.0 / 42.0 - inv2 / 30.0)))
}

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (r, &bv) in row.iter_mut().zip(brow) {
                *r += av * bv;
            }
        }
    });
    out
}

/// a [m x n] times b^T where b is [k x n]; result [m x k].
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    out.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, r) in row.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            *r = acc;
        }
    });
    out
}

/// a^T times b where a is [m x k], b is [m x n]; result [k x n].
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    out.par_chunks_mut(n).enumerate().for_each(|(p, row)| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            for (r, &bv) in row.iter_mut().zip(brow) {
                *r += av * bv;
            }
        }
    });
    out
}

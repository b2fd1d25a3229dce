//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! returns gradients for every node that transitively depends on a leaf
//! created with [`Tape::leaf`]. Constants never receive gradients and the
//! backward pass skips work that only feeds constants.

use std::cell::{Ref, RefCell};

use crate::scalar::Scalar;
use crate::tensor::{gemm, MatMut, MatRef, Tensor};

/// Query/key extents of one independent attention problem inside a packed
/// batch: rows `q_start..q_start + q_len` of the queries attend to rows
/// `k_start..k_start + k_len` of keys and values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// Geometry of a channels-last 2-D convolution over a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { a: usize, bias: usize },
    Scale { a: usize, s: T },
    Relu(usize),
    Gelu { a: usize, slope: Vec<T> },
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNorm { a: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T> },
    L2NormRows { a: usize, norms: Vec<T> },
    Conv2d { x: usize, w: usize, b: usize, geom: ConvGeom, cols: Vec<T> },
    Attention { q: usize, k: usize, v: usize, heads: usize, segs: Vec<AttnSegment>, probs: Vec<T> },
    SegmentMean { a: usize, segs: Vec<(usize, usize)> },
    Gather { table: usize, idx: Vec<usize> },
    Tile { a: usize, times: usize },
    SliceRows { a: usize, start: usize },
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    WeightedPick { a: usize, picks: Vec<(usize, T)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros shaped like it when nothing flowed there.
    pub fn get_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    pub fn take(&mut self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn req(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Head-major attention probabilities recorded by an attention node:
    /// for every segment, `heads` row-stochastic `q_len x k_len` blocks.
    pub fn attention_probs(&self, var: Var<'_, T>) -> Option<(Vec<AttnSegment>, usize, Vec<T>)> {
        let nodes = self.nodes.borrow();
        match &nodes[var.id].op {
            Op::Attention {
                heads, segs, probs, ..
            } => Some((segs.clone(), *heads, probs.clone())),
            _ => None,
        }
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(nodes[output.id].value.shape(), T::one()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, id, &g, &mut grads);
        }
        Gradients { grads }
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], id: usize, g: Tensor<T>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x = *x * inv;
    }
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    // tanh through exp is markedly cheaper than the libm tanh; the clamp
    // keeps exp finite where tanh has long saturated
    let e = (T::lit(2.0) * u.min(T::lit(20.0)).max(T::lit(-20.0))).exp();
    let t = (e - T::one()) / (e + T::one());
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x);
    (y, dy)
}

fn im2col<T: Scalar>(x: &[T], geom: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let patch = geom.patch_len();
    let mut cols = vec![T::zero(); geom.batch * ho * wo * patch];
    let cin = geom.in_channels;
    for b in 0..geom.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * patch;
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= geom.height as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= geom.width as isize {
                            continue;
                        }
                        let src = ((b * geom.height + iy as usize) * geom.width + ix as usize) * cin;
                        let dst = row + (ky * geom.kernel + kx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(dcols: &[T], geom: &ConvGeom) -> Vec<T> {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let patch = geom.patch_len();
    let cin = geom.in_channels;
    let mut dx = vec![T::zero(); geom.batch * geom.height * geom.width * cin];
    for b in 0..geom.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * patch;
                for ky in 0..geom.kernel {
                    let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                    if iy < 0 || iy >= geom.height as isize {
                        continue;
                    }
                    for kx in 0..geom.kernel {
                        let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                        if ix < 0 || ix >= geom.width as isize {
                            continue;
                        }
                        let dst = ((b * geom.height + iy as usize) * geom.width + ix as usize) * cin;
                        let src = row + (ky * geom.kernel + kx) * cin;
                        for c in 0..cin {
                            dx[dst + c] = dx[dst + c] + dcols[src + c];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn head_view<T: Scalar>(data: &[T], start: usize, len: usize, head: usize, dh: usize, d: usize) -> MatRef<'_, T> {
    MatRef::strided(&data[start * d + head * dh..], len, dh, d, 1)
}

fn head_view_mut<T: Scalar>(
    data: &mut [T],
    start: usize,
    len: usize,
    head: usize,
    dh: usize,
    d: usize,
) -> MatMut<'_, T> {
    MatMut::strided(&mut data[start * d + head * dh..], len, dh, d, 1)
}

fn backprop<T: Scalar>(nodes: &[Node<T>], id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    let req = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(*a), val(*b));
            if req(*a) {
                let mut da = Tensor::zeros(av.shape());
                let bt = if *tb { bv.view() } else { bv.view().t() };
                if *ta {
                    let bp = if *tb { bv.view().t() } else { bv.view() };
                    gemm(T::one(), bp, g.view().t(), T::zero(), da.view_mut());
                } else {
                    gemm(T::one(), g.view(), bt, T::zero(), da.view_mut());
                }
                accumulate(nodes, grads, *a, da);
            }
            if req(*b) {
                let mut db = Tensor::zeros(bv.shape());
                if *tb {
                    let ap = if *ta { av.view().t() } else { av.view() };
                    gemm(T::one(), g.view().t(), ap, T::zero(), db.view_mut());
                } else {
                    let at = if *ta { av.view() } else { av.view().t() };
                    gemm(T::one(), at, g.view(), T::zero(), db.view_mut());
                }
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone().reshape(val(*a).shape()).unwrap());
            accumulate(nodes, grads, *b, g.clone().reshape(val(*b).shape()).unwrap());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone().reshape(val(*a).shape()).unwrap());
            let neg = g.map(|x| -x).reshape(val(*b).shape()).unwrap();
            accumulate(nodes, grads, *b, neg);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if req(*a) {
                let data = g.data().iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
                accumulate(nodes, grads, *a, Tensor::from_vec(av.shape(), data).unwrap());
            }
            if req(*b) {
                let data = g.data().iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
                accumulate(nodes, grads, *b, Tensor::from_vec(bv.shape(), data).unwrap());
            }
        }
        Op::AddRow { a, bias } => {
            if req(*bias) {
                let c = g.cols();
                let mut db = vec![T::zero(); c];
                for r in 0..g.rows() {
                    for (acc, &x) in db.iter_mut().zip(g.row(r)) {
                        *acc = *acc + x;
                    }
                }
                accumulate(nodes, grads, *bias, Tensor::from_vec(val(*bias).shape(), db).unwrap());
            }
            accumulate(nodes, grads, *a, g.clone());
        }
        Op::Scale { a, s } => {
            let s = *s;
            accumulate(nodes, grads, *a, g.map(|x| x * s));
        }
        Op::Relu(a) => {
            let x = val(*a);
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect();
            accumulate(nodes, grads, *a, Tensor::from_vec(x.shape(), data).unwrap());
        }
        Op::Gelu { a, slope } => {
            let data = g.data().iter().zip(slope).map(|(&g, &s)| g * s).collect();
            accumulate(nodes, grads, *a, Tensor::from_vec(g.shape(), data).unwrap());
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let mut dx = Tensor::zeros(y.shape());
            for r in 0..y.rows() {
                let (yr, gr) = (y.row(r), g.row(r));
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for ((d, &y), &g) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                    *d = y * (g - dot);
                }
            }
            accumulate(nodes, grads, *a, dx);
        }
        Op::LogSoftmaxRows(a) => {
            let y = &node.value;
            let mut dx = Tensor::zeros(y.shape());
            for r in 0..y.rows() {
                let (yr, gr) = (y.row(r), g.row(r));
                let total: T = gr.iter().copied().sum();
                for ((d, &y), &g) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                    *d = g - y.exp() * total;
                }
            }
            accumulate(nodes, grads, *a, dx);
        }
        Op::LayerNorm {
            a,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gv = val(*gamma).data();
            let c = gv.len();
            let rows = g.rows();
            if req(*gamma) || req(*beta) {
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        let gr = g.data()[r * c + j];
                        dg[j] = dg[j] + gr * xhat[r * c + j];
                        db[j] = db[j] + gr;
                    }
                }
                accumulate(nodes, grads, *gamma, Tensor::from_vec(&[c], dg).unwrap());
                accumulate(nodes, grads, *beta, Tensor::from_vec(&[c], db).unwrap());
            }
            if req(*a) {
                let n = T::lit(c as f64);
                let mut dx = Tensor::zeros(val(*a).shape());
                for r in 0..rows {
                    let xh = &xhat[r * c..(r + 1) * c];
                    let gr = g.row(r);
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        sum_d = sum_d + d;
                        sum_dx = sum_dx + d * xh[j];
                    }
                    let scale = inv_std[r] / n;
                    for (j, out) in dx.row_mut(r).iter_mut().enumerate() {
                        let d = gr[j] * gv[j];
                        *out = scale * (n * d - sum_d - xh[j] * sum_dx);
                    }
                }
                accumulate(nodes, grads, *a, dx);
            }
        }
        Op::L2NormRows { a, norms } => {
            let y = &node.value;
            let mut dx = Tensor::zeros(y.shape());
            for r in 0..y.rows() {
                let (yr, gr) = (y.row(r), g.row(r));
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                let inv = T::one() / norms[r];
                for ((d, &y), &g) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                    *d = (g - y * dot) * inv;
                }
            }
            accumulate(nodes, grads, *a, dx);
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols,
        } => {
            let rows = g.rows();
            let patch = geom.patch_len();
            let colv = MatRef::new(cols, rows, patch);
            if req(*w) {
                let mut dw = Tensor::zeros(val(*w).shape());
                gemm(T::one(), g.view().t(), colv, T::zero(), dw.view_mut());
                accumulate(nodes, grads, *w, dw);
            }
            if req(*b) {
                let mut db = vec![T::zero(); geom.out_channels];
                for r in 0..rows {
                    for (acc, &x) in db.iter_mut().zip(g.row(r)) {
                        *acc = *acc + x;
                    }
                }
                accumulate(nodes, grads, *b, Tensor::from_vec(&[geom.out_channels], db).unwrap());
            }
            if req(*x) {
                let mut dcols = vec![T::zero(); rows * patch];
                gemm(
                    T::one(),
                    g.view(),
                    val(*w).view(),
                    T::zero(),
                    MatMut::new(&mut dcols, rows, patch),
                );
                let dx = col2im(&dcols, geom);
                accumulate(nodes, grads, *x, Tensor::from_vec(val(*x).shape(), dx).unwrap());
            }
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            segs,
            probs,
        } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let d = qv.cols();
            let dh = d / heads;
            let scale = T::one() / T::lit(dh as f64).sqrt();
            let mut dq = Tensor::zeros(qv.shape());
            let mut dk = Tensor::zeros(kv.shape());
            let mut dv = Tensor::zeros(vv.shape());
            let mut offset = 0;
            let mut dp = Vec::new();
            for seg in segs {
                let block = seg.q_len * seg.k_len;
                for h in 0..*heads {
                    let p = &probs[offset..offset + block];
                    offset += block;
                    let pv = MatRef::new(p, seg.q_len, seg.k_len);
                    let gh = head_view(g.data(), seg.q_start, seg.q_len, h, dh, d);
                    gemm(
                        T::one(),
                        pv.t(),
                        gh,
                        T::one(),
                        head_view_mut(dv.data_mut(), seg.k_start, seg.k_len, h, dh, d),
                    );
                    dp.clear();
                    dp.resize(block, T::zero());
                    gemm(
                        T::one(),
                        gh,
                        head_view(vv.data(), seg.k_start, seg.k_len, h, dh, d).t(),
                        T::zero(),
                        MatMut::new(&mut dp, seg.q_len, seg.k_len),
                    );
                    for r in 0..seg.q_len {
                        let pr = &p[r * seg.k_len..(r + 1) * seg.k_len];
                        let dr = &mut dp[r * seg.k_len..(r + 1) * seg.k_len];
                        let dot: T = pr.iter().zip(dr.iter()).map(|(&p, &d)| p * d).sum();
                        for (d, &p) in dr.iter_mut().zip(pr) {
                            *d = p * (*d - dot);
                        }
                    }
                    let ds = MatRef::new(&dp, seg.q_len, seg.k_len);
                    gemm(
                        scale,
                        ds,
                        head_view(kv.data(), seg.k_start, seg.k_len, h, dh, d),
                        T::one(),
                        head_view_mut(dq.data_mut(), seg.q_start, seg.q_len, h, dh, d),
                    );
                    gemm(
                        scale,
                        ds.t(),
                        head_view(qv.data(), seg.q_start, seg.q_len, h, dh, d),
                        T::one(),
                        head_view_mut(dk.data_mut(), seg.k_start, seg.k_len, h, dh, d),
                    );
                }
            }
            accumulate(nodes, grads, *q, dq);
            accumulate(nodes, grads, *k, dk);
            accumulate(nodes, grads, *v, dv);
        }
        Op::SegmentMean { a, segs } => {
            let av = val(*a);
            let mut dx = Tensor::zeros(av.shape());
            for (s, &(start, len)) in segs.iter().enumerate() {
                let inv = T::one() / T::lit(len as f64);
                let gr: Vec<T> = g.row(s).iter().map(|&x| x * inv).collect();
                for r in start..start + len {
                    dx.row_mut(r).copy_from_slice(&gr);
                }
            }
            accumulate(nodes, grads, *a, dx);
        }
        Op::Gather { table, idx } => {
            let mut dt = Tensor::zeros(val(*table).shape());
            for (r, &i) in idx.iter().enumerate() {
                for (acc, &x) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                    *acc = *acc + x;
                }
            }
            accumulate(nodes, grads, *table, dt);
        }
        Op::Tile { a, times } => {
            let av = val(*a);
            let n = av.len();
            let mut da = vec![T::zero(); n];
            for t in 0..*times {
                for (acc, &x) in da.iter_mut().zip(&g.data()[t * n..(t + 1) * n]) {
                    *acc = *acc + x;
                }
            }
            accumulate(nodes, grads, *a, Tensor::from_vec(av.shape(), da).unwrap());
        }
        Op::SliceRows { a, start } => {
            let av = val(*a);
            let c = av.cols();
            let mut da = Tensor::zeros(av.shape());
            da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            accumulate(nodes, grads, *a, da);
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()),
        Op::Reshape(a) => {
            accumulate(nodes, grads, *a, g.clone().reshape(val(*a).shape()).unwrap());
        }
        Op::Sum(a) => {
            accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), g.item()));
        }
        Op::Mean(a) => {
            let av = val(*a);
            let s = g.item() / T::lit(av.len() as f64);
            accumulate(nodes, grads, *a, Tensor::full(av.shape(), s));
        }
        Op::WeightedPick { a, picks } => {
            let mut da = Tensor::zeros(val(*a).shape());
            let gs = g.item();
            for &(i, w) in picks {
                da.data_mut()[i] = da.data_mut()[i] + gs * w;
            }
            accumulate(nodes, grads, *a, da);
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    fn unary(self, value: Tensor<T>, op: Op<T>) -> Self {
        let rg = self.tape.req(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn nary(self, parents: &[usize], value: Tensor<T>, op: Op<T>) -> Self {
        let rg = self.tape.req(parents);
        self.tape.push(value, op, rg)
    }

    /// `self · other`.
    pub fn matmul(self, other: Var<'t, T>) -> Self {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` where `op` optionally transposes.
    pub fn matmul_t(self, other: Var<'t, T>, ta: bool, tb: bool) -> Self {
        let out = {
            let (a, b) = (self.value(), other.value());
            let av = if ta { a.view().t() } else { a.view() };
            let bv = if tb { b.view().t() } else { b.view() };
            assert_eq!(
                av.cols(),
                bv.rows(),
                "matmul {:?}{} x {:?}{}",
                a.shape(),
                if ta { "^T" } else { "" },
                b.shape(),
                if tb { "^T" } else { "" }
            );
            let mut out = Tensor::zeros(&[av.rows(), bv.cols()]);
            gemm(T::one(), av, bv, T::zero(), out.view_mut());
            out
        };
        self.nary(
            &[self.id, other.id],
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
            },
        )
    }

    fn zip_with(self, other: Var<'t, T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.len(), b.len(), "elementwise {:?} vs {:?}", a.shape(), b.shape());
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(a.shape(), data).unwrap()
    }

    pub fn add(self, other: Var<'t, T>) -> Self {
        let out = self.zip_with(other, |x, y| x + y);
        self.nary(&[self.id, other.id], out, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Self {
        let out = self.zip_with(other, |x, y| x - y);
        self.nary(&[self.id, other.id], out, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Self {
        let out = self.zip_with(other, |x, y| x * y);
        self.nary(&[self.id, other.id], out, Op::Mul(self.id, other.id))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(self, bias: Var<'t, T>) -> Self {
        let out = {
            let (a, b) = (self.value(), bias.value());
            assert_eq!(a.cols(), b.len(), "bias width");
            let mut out = a.clone();
            for r in 0..out.rows() {
                for (x, &y) in out.row_mut(r).iter_mut().zip(b.data()) {
                    *x = *x + y;
                }
            }
            out
        };
        self.nary(
            &[self.id, bias.id],
            out,
            Op::AddRow {
                a: self.id,
                bias: bias.id,
            },
        )
    }

    pub fn scale(self, s: T) -> Self {
        let out = self.value().map(|x| x * s);
        self.unary(out, Op::Scale { a: self.id, s })
    }

    pub fn relu(self) -> Self {
        let out = self.value().map(|x| x.max(T::zero()));
        self.unary(out, Op::Relu(self.id))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Self {
        let (out, slope) = {
            let x = self.value();
            let mut out = Tensor::zeros(x.shape());
            let mut slope = Vec::with_capacity(x.len());
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                let (y, dy) = gelu(v);
                *o = y;
                slope.push(dy);
            }
            (out, slope)
        };
        self.unary(out, Op::Gelu { a: self.id, slope })
    }

    pub fn softmax_rows(self) -> Self {
        let mut out = self.to_tensor();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.unary(out, Op::SoftmaxRows(self.id))
    }

    pub fn log_softmax_rows(self) -> Self {
        let mut out = self.to_tensor();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        self.unary(out, Op::LogSoftmaxRows(self.id))
    }

    /// Row-wise layer normalization with affine parameters.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Self {
        let (out, xhat, inv_std) = {
            let (x, gv, bv) = (self.value(), gamma.value(), beta.value());
            let c = x.cols();
            assert_eq!(gv.len(), c, "layer norm width");
            let n = T::lit(c as f64);
            let mut out = Tensor::zeros(x.shape());
            let mut xhat = vec![T::zero(); x.len()];
            let mut inv_std = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let row = x.row(r);
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let is = T::one() / (var + eps).sqrt();
                inv_std.push(is);
                for j in 0..c {
                    let h = (row[j] - mean) * is;
                    xhat[r * c + j] = h;
                    out.data_mut()[r * c + j] = h * gv.data()[j] + bv.data()[j];
                }
            }
            (out, xhat, inv_std)
        };
        self.nary(
            &[self.id, gamma.id, beta.id],
            out,
            Op::LayerNorm {
                a: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        )
    }

    /// Divides every row by its Euclidean norm. Rows must be nonzero.
    pub fn l2_normalize_rows(self) -> Self {
        let mut out = self.to_tensor();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
            norms.push(norm);
            for x in row.iter_mut() {
                *x = *x / norm;
            }
        }
        self.unary(out, Op::L2NormRows { a: self.id, norms })
    }

    /// Channels-last convolution: `self` is `[batch*height*width, in]`,
    /// `weight` is `[out, kernel*kernel*in]` (patch order `ky, kx, c`),
    /// `bias` is `[out]`. Output is `[batch*out_h*out_w, out]`.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Var<'t, T>, geom: ConvGeom) -> Self {
        let (out, cols) = {
            let (x, w, b) = (self.value(), weight.value(), bias.value());
            assert_eq!(
                x.len(),
                geom.batch * geom.height * geom.width * geom.in_channels,
                "conv input size"
            );
            assert_eq!(w.shape(), &[geom.out_channels, geom.patch_len()], "conv weight");
            assert_eq!(b.len(), geom.out_channels, "conv bias");
            let cols = im2col(x.data(), &geom);
            let rows = geom.batch * geom.out_height() * geom.out_width();
            let mut out = Tensor::zeros(&[rows, geom.out_channels]);
            gemm(
                T::one(),
                MatRef::new(&cols, rows, geom.patch_len()),
                w.view().t(),
                T::zero(),
                out.view_mut(),
            );
            for r in 0..rows {
                for (o, &bb) in out.row_mut(r).iter_mut().zip(b.data()) {
                    *o = *o + bb;
                }
            }
            (out, cols)
        };
        self.nary(
            &[self.id, weight.id, bias.id],
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
                cols,
            },
        )
    }

    /// Multi-head scaled dot-product attention core on packed segments.
    /// `self` holds projected queries; `keys` and `values` share rows.
    pub fn attention(self, keys: Var<'t, T>, values: Var<'t, T>, heads: usize, segs: &[AttnSegment]) -> Self {
        let (out, probs) = {
            let (q, k, v) = (self.value(), keys.value(), values.value());
            let d = q.cols();
            assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
            assert_eq!(k.cols(), d, "key width");
            assert_eq!(v.cols(), d, "value width");
            let dh = d / heads;
            let scale = T::one() / T::lit(dh as f64).sqrt();
            let total: usize = segs.iter().map(|s| s.q_len * s.k_len * heads).sum();
            let mut probs = vec![T::zero(); total];
            let mut out = Tensor::zeros(q.shape());
            let mut offset = 0;
            for seg in segs {
                assert!(seg.q_start + seg.q_len <= q.rows() && seg.k_start + seg.k_len <= k.rows());
                let block = seg.q_len * seg.k_len;
                for h in 0..heads {
                    let p = &mut probs[offset..offset + block];
                    offset += block;
                    gemm(
                        scale,
                        head_view(q.data(), seg.q_start, seg.q_len, h, dh, d),
                        head_view(k.data(), seg.k_start, seg.k_len, h, dh, d).t(),
                        T::zero(),
                        MatMut::new(p, seg.q_len, seg.k_len),
                    );
                    for row in p.chunks_mut(seg.k_len) {
                        softmax_in_place(row);
                    }
                    gemm(
                        T::one(),
                        MatRef::new(p, seg.q_len, seg.k_len),
                        head_view(v.data(), seg.k_start, seg.k_len, h, dh, d),
                        T::zero(),
                        head_view_mut(out.data_mut(), seg.q_start, seg.q_len, h, dh, d),
                    );
                }
            }
            (out, probs)
        };
        self.nary(
            &[self.id, keys.id, values.id],
            out,
            Op::Attention {
                q: self.id,
                k: keys.id,
                v: values.id,
                heads,
                segs: segs.to_vec(),
                probs,
            },
        )
    }

    /// Mean of each `(start, len)` row range; output has one row per range.
    pub fn segment_mean(self, segs: &[(usize, usize)]) -> Self {
        let out = {
            let a = self.value();
            let c = a.cols();
            let mut out = Tensor::zeros(&[segs.len(), c]);
            for (s, &(start, len)) in segs.iter().enumerate() {
                assert!(len > 0, "empty segment");
                let inv = T::one() / T::lit(len as f64);
                let row = out.row_mut(s);
                for r in start..start + len {
                    for (o, &x) in row.iter_mut().zip(a.row(r)) {
                        *o = *o + x;
                    }
                }
                for o in row.iter_mut() {
                    *o = *o * inv;
                }
            }
            out
        };
        self.unary(
            out,
            Op::SegmentMean {
                a: self.id,
                segs: segs.to_vec(),
            },
        )
    }

    /// Row lookup: output row `i` is `self[idx[i]]`.
    pub fn gather_rows(self, idx: &[usize]) -> Self {
        let out = {
            let t = self.value();
            let c = t.cols();
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx {
                data.extend_from_slice(t.row(i));
            }
            Tensor::from_vec(&[idx.len(), c], data).unwrap()
        };
        self.unary(
            out,
            Op::Gather {
                table: self.id,
                idx: idx.to_vec(),
            },
        )
    }

    /// Stacks `times` copies of `self` along rows.
    pub fn tile_rows(self, times: usize) -> Self {
        let out = {
            let a = self.value();
            let mut data = Vec::with_capacity(a.len() * times);
            for _ in 0..times {
                data.extend_from_slice(a.data());
            }
            Tensor::from_vec(&[a.rows() * times, a.cols()], data).unwrap()
        };
        self.unary(out, Op::Tile { a: self.id, times })
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Self {
        let out = {
            let a = self.value();
            let c = a.cols();
            assert!(start + len <= a.rows(), "row slice out of range");
            Tensor::from_vec(&[len, c], a.data()[start * c..(start + len) * c].to_vec()).unwrap()
        };
        self.unary(out, Op::SliceRows { a: self.id, start })
    }

    pub fn transpose(self) -> Self {
        let out = self.value().transpose();
        self.unary(out, Op::Transpose(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let out = self.to_tensor().reshape(shape).expect("reshape size");
        self.unary(out, Op::Reshape(self.id))
    }

    pub fn sum(self) -> Self {
        let out = Tensor::scalar(self.value().data().iter().copied().sum());
        self.unary(out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Self {
        let out = {
            let a = self.value();
            Tensor::scalar(a.data().iter().copied().sum::<T>() / T::lit(a.len() as f64))
        };
        self.unary(out, Op::Mean(self.id))
    }

    /// `sum_j w_j * self.data[i_j]` over flat indices.
    pub fn weighted_pick(self, picks: Vec<(usize, T)>) -> Self {
        let out = {
            let a = self.value();
            Tensor::scalar(picks.iter().map(|&(i, w)| w * a.data()[i]).sum())
        };
        self.unary(out, Op::WeightedPick { a: self.id, picks })
    }
}

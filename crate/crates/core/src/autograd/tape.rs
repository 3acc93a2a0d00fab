use super::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

enum Op<T> {
    Leaf { param: Option<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddConst(Var),
    Scale(Var, T),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    Transpose(Var),
    Gather { x: Var, idx: Vec<usize> },
    Concat(Var, Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T>, norm: T },
    L1 { pred: Var, target: Vec<T>, norm: T },
    Giou { pred: Var, target: Vec<T>, norm: T },
    WeightedSum(Vec<(Var, T)>),
    DotConst(Var, Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode autodiff tape over 2-D tensors.
///
/// Operations are appended in evaluation order, so a reverse sweep over the
/// node list is a valid topological order for backpropagation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "not a scalar");
        t.data[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// A trainable leaf tied to parameter slot `id`.
    pub fn param(&mut self, id: usize, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: Some(id) }, true)
    }

    /// `x * w + b`, with `x: [n, i]`, `w: [i, o]`, `b: [1, o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.cols, wv.rows, "linear: inner dimension mismatch");
        let (n, i, o) = (xv.rows, xv.cols, wv.cols);
        let mut out = Tensor::zeros(n, o);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.shape(), (1, o), "linear: bias shape");
            for r in 0..n {
                out.row_mut(r).copy_from_slice(&bv.data);
            }
        }
        T::gemm(
            n,
            i,
            o,
            T::one(),
            &xv.data,
            i as isize,
            1,
            &wv.data,
            o as isize,
            1,
            T::one(),
            &mut out.data,
            o as isize,
            1,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Linear { x, w, b }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), needs)
    }

    /// `a + c` for a constant `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape(), "add_const: shape mismatch");
        let data = av.data.iter().zip(&c.data).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(av.rows, av.cols, data);
        let needs = self.needs(a);
        self.push(out, Op::AddConst(a), needs)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let av = self.value(a);
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|&x| x * s).collect());
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, s), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::from_vec(av.rows, av.cols, av.data.iter().map(|&x| x.max(T::zero())).collect());
        let needs = self.needs(a);
        self.push(out, Op::Relu(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::from_vec(
            av.rows,
            av.cols,
            av.data.iter().map(|&x| T::one() / (T::one() + (-x).exp())).collect(),
        );
        let needs = self.needs(a);
        self.push(out, Op::Sigmoid(a), needs)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of shape `[1, d]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.shape(), (1, d), "layer_norm: gamma shape");
        assert_eq!(b.shape(), (1, d), "layer_norm: beta shape");
        let mut out = Tensor::zeros(n, d);
        let mut xhat = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let inv_d = T::of(1.0 / d as f64);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out.data[r * d + c] = h * g.data[c] + b.data[c];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs)
    }

    /// Multi-head scaled dot-product attention on pre-projected inputs.
    ///
    /// `q: [lq, d]`, `k, v: [lk, d]`. `mask`, when given, is `lq x lk` with
    /// `true` marking blocked pairs. A fully blocked row yields zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&[bool]>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = qv.shape();
        let lk = kv.rows;
        assert_eq!(kv.cols, d, "attention: key width");
        assert_eq!(vv.shape(), (lk, d), "attention: value shape");
        assert!(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
        if let Some(m) = mask {
            assert_eq!(m.len(), lq * lk, "attention: mask shape");
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); heads * lq * lk];
        let mut out = Tensor::zeros(lq, d);
        for h in 0..heads {
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            T::gemm(
                lq,
                dh,
                lk,
                scale,
                &qv.data[h * dh..],
                d as isize,
                1,
                &kv.data[h * dh..],
                1,
                d as isize,
                T::zero(),
                p,
                lk as isize,
                1,
            );
            for i in 0..lq {
                let row = &mut p[i * lk..(i + 1) * lk];
                softmax_row(row, mask.map(|m| &m[i * lk..(i + 1) * lk]));
            }
            T::gemm(
                lq,
                lk,
                dh,
                T::one(),
                p,
                lk as isize,
                1,
                &vv.data[h * dh..],
                d as isize,
                1,
                T::zero(),
                &mut out.data[h * dh..],
                d as isize,
                1,
            );
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(out, Op::Attention { q, k, v, heads, probs }, needs)
    }

    /// 2-D convolution. `x: [in_c, in_h * in_w]`, `w: [out_c, in_c * k * k]`,
    /// `b: [out_c, 1]`; output `[out_c, out_h * out_w]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.shape(), (geom.in_channels, geom.in_h * geom.in_w), "conv2d: input shape");
        assert_eq!(wv.shape(), (geom.out_channels, geom.patch_len()), "conv2d: weight shape");
        assert_eq!(bv.shape(), (geom.out_channels, 1), "conv2d: bias shape");
        let cols = im2col(&xv.data, &geom);
        let p = geom.out_h() * geom.out_w();
        let r = geom.patch_len();
        let mut out = Tensor::zeros(geom.out_channels, p);
        for oc in 0..geom.out_channels {
            out.row_mut(oc).fill(bv.data[oc]);
        }
        T::gemm(
            geom.out_channels,
            r,
            p,
            T::one(),
            &wv.data,
            r as isize,
            1,
            &cols,
            p as isize,
            1,
            T::one(),
            &mut out.data,
            p as isize,
            1,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out, Op::Conv { x, w, b, geom, cols }, needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let needs = self.needs(a);
        self.push(out, Op::Transpose(a), needs)
    }

    /// Selects rows `idx` of `x` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(idx.len(), xv.cols);
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < xv.rows, "gather_rows: index {i} out of range");
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        let needs = self.needs(x);
        self.push(out, Op::Gather { x, idx: idx.to_vec() }, needs)
    }

    /// Stacks `a` on top of `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "concat_rows: width mismatch");
        let mut data = av.data.clone();
        data.extend_from_slice(&bv.data);
        let out = Tensor::from_vec(av.rows + bv.rows, av.cols, data);
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Concat(a, b), needs)
    }

    /// `sum_i weights[i] * -log softmax(logits[i])[targets[i]] / norm`.
    /// A zero `norm` gives a zero loss.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T], norm: T) -> Var {
        let lv = self.value(logits);
        let (n, c) = lv.shape();
        assert_eq!(targets.len(), n, "cross_entropy: target count");
        assert_eq!(weights.len(), n, "cross_entropy: weight count");
        let mut probs = lv.data.clone();
        let mut total = T::zero();
        for r in 0..n {
            let row = &mut probs[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            total += weights[r] * (lse - row[targets[r]]);
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        let loss = if norm > T::zero() { total / norm } else { T::zero() };
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                norm,
            },
            needs,
        )
    }

    /// `sum |pred - target| / norm` over `[n, 4]` box rows.
    pub fn l1_loss(&mut self, pred: Var, target: &[[f64; 4]], norm: T) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), (target.len(), 4), "l1_loss: shape");
        let target: Vec<T> = target.iter().flatten().map(|&v| T::of(v)).collect();
        let total = pv.data.iter().zip(&target).map(|(&p, &t)| (p - t).abs()).sum::<T>();
        let loss = if norm > T::zero() { total / norm } else { T::zero() };
        let needs = self.needs(pred);
        self.push(Tensor::scalar(loss), Op::L1 { pred, target, norm }, needs)
    }

    /// `sum (1 - giou(pred, target)) / norm` over `[n, 4]` center-format rows.
    pub fn giou_loss(&mut self, pred: Var, target: &[[f64; 4]], norm: T) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), (target.len(), 4), "giou_loss: shape");
        let target: Vec<T> = target.iter().flatten().map(|&v| T::of(v)).collect();
        let mut total = T::zero();
        for r in 0..target.len() / 4 {
            let (g, _) = giou_and_grad(&pv.data[r * 4..r * 4 + 4], &target[r * 4..r * 4 + 4]);
            total += T::one() - g;
        }
        let loss = if norm > T::zero() { total / norm } else { T::zero() };
        let needs = self.needs(pred);
        self.push(Tensor::scalar(loss), Op::Giou { pred, target, norm }, needs)
    }

    /// `sum_i c_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut total = T::zero();
        for &(v, c) in terms {
            total += c * self.scalar(v);
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), needs)
    }

    /// `sum(a * c)` for a constant `c` of the same shape.
    pub fn dot_const(&mut self, a: Var, c: &Tensor<T>) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), c.shape(), "dot_const: shape mismatch");
        let total = av.data.iter().zip(&c.data).map(|(&x, &y)| x * y).sum::<T>();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::DotConst(a, c.data.clone()), needs)
    }

    /// Backpropagates from scalar `loss` and adds each parameter leaf's
    /// gradient into `param_grads[id]`.
    pub fn backward(&self, loss: Var, param_grads: &mut [Tensor<T>]) {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward: loss must be a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, param_grads);
        }
    }

    fn backward_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        param_grads: &mut [Tensor<T>],
    ) {
        match &node.op {
            Op::Leaf { param } => {
                if let Some(id) = param {
                    param_grads[*id].add_assign(g);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i, o) = (xv.rows, xv.cols, wv.cols);
                if self.needs(*x) {
                    let dx = slot(grads, *x, n, i);
                    T::gemm(n, o, i, T::one(), &g.data, o as isize, 1, &wv.data, 1, o as isize, T::one(), &mut dx.data, i as isize, 1);
                }
                if self.needs(*w) {
                    let dw = slot(grads, *w, i, o);
                    T::gemm(i, n, o, T::one(), &xv.data, 1, i as isize, &g.data, o as isize, 1, T::one(), &mut dw.data, o as isize, 1);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let db = slot(grads, *b, 1, o);
                        for r in 0..n {
                            for (acc, &v) in db.data.iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        slot(grads, v, g.rows, g.cols).add_assign(g);
                    }
                }
            }
            Op::AddConst(a) => {
                if self.needs(*a) {
                    slot(grads, *a, g.rows, g.cols).add_assign(g);
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    let da = slot(grads, *a, g.rows, g.cols);
                    for (acc, &v) in da.data.iter_mut().zip(&g.data) {
                        *acc += v * *s;
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let av = &self.nodes[a.0].value;
                    let da = slot(grads, *a, g.rows, g.cols);
                    for ((acc, &v), &x) in da.data.iter_mut().zip(&g.data).zip(&av.data) {
                        if x > T::zero() {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let y = &node.value;
                    let da = slot(grads, *a, g.rows, g.cols);
                    for ((acc, &v), &s) in da.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *acc += v * s * (T::one() - s);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (n, d) = g.shape();
                if self.needs(*gamma) {
                    let dg = slot(grads, *gamma, 1, d);
                    for r in 0..n {
                        for c in 0..d {
                            dg.data[c] += g.data[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if self.needs(*beta) {
                    let db = slot(grads, *beta, 1, d);
                    for r in 0..n {
                        for c in 0..d {
                            db.data[c] += g.data[r * d + c];
                        }
                    }
                }
                if self.needs(*x) {
                    let gam = self.value(*gamma).data.clone();
                    let dx = slot(grads, *x, n, d);
                    let inv_d = T::of(1.0 / d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..n {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..d {
                            dxhat[c] = g.data[r * d + c] * gam[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[r * d + c];
                        }
                        mean_d *= inv_d;
                        mean_dx *= inv_d;
                        for c in 0..d {
                            dx.data[r * d + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(*q, *k, *v, *heads, probs, g, grads);
            }
            Op::Conv { x, w, b, geom, cols } => {
                let p = geom.out_h() * geom.out_w();
                let r = geom.patch_len();
                let oc = geom.out_channels;
                if self.needs(*b) {
                    let db = slot(grads, *b, oc, 1);
                    for c in 0..oc {
                        db.data[c] += g.row(c).iter().copied().sum::<T>();
                    }
                }
                if self.needs(*w) {
                    let dw = slot(grads, *w, oc, r);
                    T::gemm(oc, p, r, T::one(), &g.data, p as isize, 1, cols, 1, p as isize, T::one(), &mut dw.data, r as isize, 1);
                }
                if self.needs(*x) {
                    let wv = self.value(*w);
                    let mut dcols = vec![T::zero(); r * p];
                    T::gemm(r, oc, p, T::one(), &wv.data, 1, r as isize, &g.data, p as isize, 1, T::zero(), &mut dcols, p as isize, 1);
                    let dx = slot(grads, *x, geom.in_channels, geom.in_h * geom.in_w);
                    col2im_add(&dcols, geom, &mut dx.data);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    let gt = g.transpose();
                    slot(grads, *a, gt.rows, gt.cols).add_assign(&gt);
                }
            }
            Op::Gather { x, idx } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let dx = slot(grads, *x, xv.rows, xv.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for (acc, &v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let ra = self.value(*a).rows;
                let cols = g.cols;
                if self.needs(*a) {
                    let da = slot(grads, *a, ra, cols);
                    for (acc, &v) in da.data.iter_mut().zip(&g.data[..ra * cols]) {
                        *acc += v;
                    }
                }
                if self.needs(*b) {
                    let rb = self.value(*b).rows;
                    let db = slot(grads, *b, rb, cols);
                    for (acc, &v) in db.data.iter_mut().zip(&g.data[ra * cols..]) {
                        *acc += v;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs, norm } => {
                if self.needs(*logits) && *norm > T::zero() {
                    let (n, c) = self.value(*logits).shape();
                    let scale = g.data[0] / *norm;
                    let dl = slot(grads, *logits, n, c);
                    for r in 0..n {
                        let wr = weights[r] * scale;
                        for j in 0..c {
                            let onehot = if j == targets[r] { T::one() } else { T::zero() };
                            dl.data[r * c + j] += wr * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::L1 { pred, target, norm } => {
                if self.needs(*pred) && *norm > T::zero() {
                    let pv = self.value(*pred);
                    let scale = g.data[0] / *norm;
                    let dp = slot(grads, *pred, pv.rows, 4);
                    for ((acc, &p), &t) in dp.data.iter_mut().zip(&pv.data).zip(target) {
                        let s = if p > t {
                            T::one()
                        } else if p < t {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *acc += scale * s;
                    }
                }
            }
            Op::Giou { pred, target, norm } => {
                if self.needs(*pred) && *norm > T::zero() {
                    let pv = self.value(*pred);
                    let scale = g.data[0] / *norm;
                    let n = pv.rows;
                    let pdata = pv.data.clone();
                    let dp = slot(grads, *pred, n, 4);
                    for r in 0..n {
                        let (_, dg) = giou_and_grad(&pdata[r * 4..r * 4 + 4], &target[r * 4..r * 4 + 4]);
                        for j in 0..4 {
                            dp.data[r * 4 + j] -= scale * dg[j];
                        }
                    }
                }
            }
            Op::DotConst(a, c) => {
                if self.needs(*a) {
                    let (r, cc) = self.value(*a).shape();
                    let da = slot(grads, *a, r, cc);
                    for (acc, &w) in da.data.iter_mut().zip(c) {
                        *acc += g.data[0] * w;
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if self.needs(v) {
                        slot(grads, v, 1, 1).data[0] += g.data[0] * c;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = qv.shape();
        let lk = kv.rows;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut dq = Tensor::zeros(lq, d);
        let mut dk = Tensor::zeros(lk, d);
        let mut dv = Tensor::zeros(lk, d);
        let mut ds = vec![T::zero(); lq * lk];
        for h in 0..heads {
            let p = &probs[h * lq * lk..(h + 1) * lq * lk];
            // dP = dO_h * V_h^T
            T::gemm(lq, dh, lk, T::one(), &g.data[h * dh..], d as isize, 1, &vv.data[h * dh..], 1, d as isize, T::zero(), &mut ds, lk as isize, 1);
            // dV_h += P^T * dO_h
            T::gemm(lk, lq, dh, T::one(), p, 1, lk as isize, &g.data[h * dh..], d as isize, 1, T::one(), &mut dv.data[h * dh..], d as isize, 1);
            for i in 0..lq {
                let prow = &p[i * lk..(i + 1) * lk];
                let drow = &mut ds[i * lk..(i + 1) * lk];
                let dot = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (dsv, &pv) in drow.iter_mut().zip(prow) {
                    *dsv = pv * (*dsv - dot);
                }
            }
            T::gemm(lq, lk, dh, scale, &ds, lk as isize, 1, &kv.data[h * dh..], d as isize, 1, T::one(), &mut dq.data[h * dh..], d as isize, 1);
            T::gemm(lk, lq, dh, scale, &ds, 1, lk as isize, &qv.data[h * dh..], d as isize, 1, T::one(), &mut dk.data[h * dh..], d as isize, 1);
        }
        for (var, gt) in [(q, dq), (k, dk), (v, dv)] {
            if self.needs(var) {
                slot(grads, var, gt.rows, gt.cols).add_assign(&gt);
            }
        }
    }
}

fn slot<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, rows: usize, cols: usize) -> &mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn softmax_row<T: Real>(row: &mut [T], mask: Option<&[bool]>) {
    if let Some(m) = mask {
        for (z, &blocked) in row.iter_mut().zip(m) {
            if blocked {
                *z = T::neg_infinity();
            }
        }
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.fill(T::zero());
        return;
    }
    let mut sum = T::zero();
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    let inv = T::one() / sum;
    for z in row.iter_mut() {
        *z *= inv;
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut cols = vec![T::zero(); g.patch_len() * p];
    for c in 0..g.in_channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let r = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let r = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[r * p..(r + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let row = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            row[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// GIoU of a center-format predicted box against a fixed target, plus its
/// gradient with respect to `(cx, cy, w, h)` of the prediction. Corners are
/// not clipped so the measure stays differentiable everywhere.
pub(crate) fn giou_and_grad<T: Real>(p: &[T], t: &[T]) -> (T, [T; 4]) {
    let half = T::of(0.5);
    let (x1, y1, x2, y2) = (p[0] - half * p[2], p[1] - half * p[3], p[0] + half * p[2], p[1] + half * p[3]);
    let (tx1, ty1, tx2, ty2) = (t[0] - half * t[2], t[1] - half * t[3], t[0] + half * t[2], t[1] + half * t[3]);
    let zero = T::zero();
    let one = T::one();

    let iw_raw = x2.min(tx2) - x1.max(tx1);
    let ih_raw = y2.min(ty2) - y1.max(ty1);
    let (iw, ih) = (iw_raw.max(zero), ih_raw.max(zero));
    let inter = iw * ih;
    let (pw, ph) = (x2 - x1, y2 - y1);
    let area_p = pw * ph;
    let area_t = (tx2 - tx1) * (ty2 - ty1);
    let union = area_p + area_t - inter;
    let ew = x2.max(tx2) - x1.min(tx1);
    let eh = y2.max(ty2) - y1.min(ty1);
    let encl = ew * eh;
    if union <= zero || encl <= zero {
        return (zero, [zero; 4]);
    }
    let giou = inter / union - (encl - union) / encl;

    // giou = I/U + U/E - 1 with U = A_p + A_t - I.
    let d_inter = (union + inter) / (union * union) - one / encl;
    let d_area = -inter / (union * union) + one / encl;
    let d_encl = -union / (encl * encl);

    let ind = |c: bool| if c { one } else { zero };
    let iw_pos = iw_raw > zero && ih_raw > zero;
    // Intersection side derivatives.
    let (dix1, dix2, diy1, diy2) = if iw_pos {
        (-ind(x1 > tx1) * ih, ind(x2 < tx2) * ih, -ind(y1 > ty1) * iw, ind(y2 < ty2) * iw)
    } else {
        (zero, zero, zero, zero)
    };
    // Enclosure side derivatives.
    let (dex1, dex2, dey1, dey2) = (-ind(x1 < tx1) * eh, ind(x2 > tx2) * eh, -ind(y1 < ty1) * ew, ind(y2 > ty2) * ew);

    let gx1 = d_inter * dix1 + d_area * (-ph) + d_encl * dex1;
    let gx2 = d_inter * dix2 + d_area * ph + d_encl * dex2;
    let gy1 = d_inter * diy1 + d_area * (-pw) + d_encl * dey1;
    let gy2 = d_inter * diy2 + d_area * pw + d_encl * dey2;

    (giou, [gx1 + gx2, gy1 + gy2, half * (gx2 - gx1), half * (gy2 - gy1)])
}

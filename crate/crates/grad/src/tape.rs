use crate::float::gemm;
use crate::{Float, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    AddChannel {
        x: Var,
        v: Var,
    },
    Silu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ToTokens(Var),
    FromTokens(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        lens: Vec<usize>,
        probs: Vec<T>,
        scale: T,
    },
    Upsample2x(Var),
    AvgPool(Var),
    Reshape(Var),
    Scale(Var, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a forward computation so gradients can be pulled back through it.
///
/// Shape misuse is a programming error and panics; callers validate user-facing
/// shapes before building a tape.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of the seeded output with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// 2-D convolution, `x: (B, C, H, W)`, `w: (O, C, kh, kw)`, `b: (O)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be rank 4");
        assert_eq!(ws.len(), 4, "conv2d kernel must be rank 4");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            ho: (xs[2] + 2 * pad - ws[2]) / stride + 1,
            wo: (xs[3] + 2 * pad - ws[3]) / stride + 1,
            stride,
            pad,
        };
        let (k, p) = (geom.k(), geom.p());
        let mut cols = vec![T::zero(); geom.batch * k * p];
        let mut out = vec![T::zero(); geom.batch * geom.cout * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let in_len = geom.cin * geom.h * geom.w;
            for bi in 0..geom.batch {
                let col = &mut cols[bi * k * p..(bi + 1) * k * p];
                im2col(&xv[bi * in_len..(bi + 1) * in_len], &geom, col);
                let o = &mut out[bi * geom.cout * p..(bi + 1) * geom.cout * p];
                gemm(geom.cout, k, p, wv, false, col, false, o, T::zero());
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                assert_eq!(bv.len(), geom.cout, "conv2d bias length");
                for bi in 0..geom.batch {
                    for (o, &bias) in bv.iter().enumerate() {
                        let base = (bi * geom.cout + o) * p;
                        for v in &mut out[base..base + p] {
                            *v += bias;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        let value = Tensor::new(vec![geom.batch, geom.cout, geom.ho, geom.wo], out);
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        )
    }

    /// Affine map over the last axis: `y = x · wᵀ + b`, `w: (out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 2, "linear weight must be rank 2");
        let din = *xs.last().expect("linear input rank 0");
        assert_eq!(din, ws[1], "linear input width mismatch");
        let dout = ws[0];
        let m = self.value(x).len() / din;
        let mut out = vec![T::zero(); m * dout];
        gemm(
            m,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            T::zero(),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), dout, "linear bias length");
            for row in out.chunks_mut(dout) {
                for (o, &bias) in row.iter_mut().zip(bv) {
                    *o += bias;
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let rg = self.rg(x) || self.rg(w) || b.map_or(false, |b| self.rg(b));
        self.push(Tensor::new(shape, out), Op::Linear { x, w, b }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Broadcast-add `v: (B, C)` over the spatial axes of `x: (B, C, H, W)`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "add_channel input must be rank 4");
        assert_eq!(
            self.value(v).shape(),
            &xs[..2],
            "add_channel shape mismatch"
        );
        let p = xs[2] * xs[3];
        let mut out = self.value(x).clone();
        {
            let vv = self.value(v).data();
            for (i, chunk) in out.data_mut().chunks_mut(p).enumerate() {
                let add = vv[i];
                for o in chunk {
                    *o += add;
                }
            }
        }
        let rg = self.rg(x) || self.rg(v);
        self.push(out, Op::AddChannel { x, v }, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).scale(c);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Group normalization over `(C/groups, H, W)` blocks with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "group_norm input must be rank 4");
        let (b, c, p) = (xs[0], xs[1], xs[2] * xs[3]);
        assert!(
            groups > 0 && c % groups == 0,
            "channels not divisible by groups"
        );
        let cg = c / groups;
        let n = cg * p;
        let eps = T::lit(eps);
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); b * groups];
        let mut out = vec![T::zero(); xv.len()];
        let nf = T::lit(n as f64);
        for bi in 0..b {
            for g in 0..groups {
                let start = (bi * c + g * cg) * p;
                let block = &xv[start..start + n];
                let mean = block.iter().copied().sum::<T>() / nf;
                let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
                let r = T::one() / (var + eps).sqrt();
                rstd[bi * groups + g] = r;
                for (j, &v) in block.iter().enumerate() {
                    let ch = g * cg + j / p;
                    let xh = (v - mean) * r;
                    xhat[start + j] = xh;
                    out[start + j] = xh * gv[ch] + bv[ch];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(xs, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// `(B, C, H, W) -> (B, H·W, C)`.
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "to_tokens input must be rank 4");
        let (b, c, p) = (xs[0], xs[1], xs[2] * xs[3]);
        let out = transpose_last2(self.value(x).data(), b, c, p);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![b, p, c], out), Op::ToTokens(x), rg)
    }

    /// `(B, H·W, C) -> (B, C, H, W)`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "from_tokens input must be rank 3");
        assert_eq!(xs[1], h * w, "from_tokens spatial mismatch");
        let (b, p, c) = (xs[0], xs[1], xs[2]);
        let out = transpose_last2(self.value(x).data(), b, p, c);
        let rg = self.rg(x);
        self.push(Tensor::new(vec![b, c, h, w], out), Op::FromTokens(x), rg)
    }

    /// Single-head scaled dot-product attention with per-item key lengths.
    ///
    /// `q: (B, N, D)`, `k: (B, L, D)`, `v: (B, L, Dv)`; item `b` attends over its first
    /// `lens[b]` keys only.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, lens: &[usize]) -> Var {
        let qs = self.value(q).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        let vs = self.value(v).shape().to_vec();
        assert!(
            qs.len() == 3 && ks.len() == 3 && vs.len() == 3,
            "attention inputs must be rank 3"
        );
        let (b, n, d) = (qs[0], qs[1], qs[2]);
        let (lmax, dv) = (ks[1], vs[2]);
        assert_eq!(ks[0], b);
        assert_eq!(vs[0], b);
        assert_eq!(ks[2], d);
        assert_eq!(vs[1], lmax);
        assert_eq!(lens.len(), b, "one key length per batch item");
        let scale = T::lit(1.0 / (d as f64).sqrt());
        let mut probs = vec![T::zero(); b * n * lmax];
        let mut out = vec![T::zero(); b * n * dv];
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut s = vec![T::zero(); n * lmax];
        for bi in 0..b {
            let len = lens[bi];
            assert!(len >= 1 && len <= lmax, "attention key length out of range");
            let qb = &qv[bi * n * d..(bi + 1) * n * d];
            let kb = &kv[bi * lmax * d..(bi * lmax + len) * d];
            let vb = &vv[bi * lmax * dv..(bi * lmax + len) * dv];
            let sb = &mut s[..n * len];
            gemm(n, d, len, qb, false, kb, true, sb, T::zero());
            let pb = &mut probs[bi * n * lmax..(bi + 1) * n * lmax];
            for i in 0..n {
                let row = &sb[i * len..(i + 1) * len];
                let mx = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x * scale));
                let mut z = T::zero();
                for j in 0..len {
                    let e = (row[j] * scale - mx).exp();
                    pb[i * lmax + j] = e;
                    z += e;
                }
                for j in 0..len {
                    pb[i * lmax + j] /= z;
                }
            }
            // Compact the probability rows to len columns for the product.
            let mut pc = vec![T::zero(); n * len];
            for i in 0..n {
                pc[i * len..(i + 1) * len].copy_from_slice(&pb[i * lmax..i * lmax + len]);
            }
            gemm(
                n,
                len,
                dv,
                &pc,
                false,
                vb,
                false,
                &mut out[bi * n * dv..(bi + 1) * n * dv],
                T::zero(),
            );
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            Tensor::new(vec![b, n, dv], out),
            Op::Attention {
                q,
                k,
                v,
                lens: lens.to_vec(),
                probs,
                scale,
            },
            rg,
        )
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "upsample input must be rank 4");
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); bc * 4 * h * w];
        for i in 0..bc {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(i * 2 * h + y) * 2 * w + xx] = xv[(i * h + y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![xs[0], xs[1], 2 * h, 2 * w], out),
            Op::Upsample2x(x),
            rg,
        )
    }

    /// Global average pool `(B, C, H, W) -> (B, C)`.
    pub fn avg_pool(&mut self, x: Var) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4, "avg_pool input must be rank 4");
        let p = xs[2] * xs[3];
        let inv = T::lit(1.0 / p as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(p)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![xs[0], xs[1]], out), Op::AvgPool(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Reverse-mode sweep from `out`, seeded with `d(loss)/d(out) = seed`.
    pub fn backward(&self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(
            seed.shape(),
            self.value(out).shape(),
            "backward seed shape mismatch"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[out.0].requires_grad {
            return Gradients { grads };
        }
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, g, &mut grads);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (k, p) = (geom.k(), geom.p());
                let gv = g.data();
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); geom.cout];
                        for bi in 0..geom.batch {
                            for (o, acc) in db.iter_mut().enumerate() {
                                let base = (bi * geom.cout + o) * p;
                                *acc += gv[base..base + p].iter().copied().sum::<T>();
                            }
                        }
                        self.accum(grads, *b, Tensor::new(vec![geom.cout], db));
                    }
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); geom.cout * k];
                    for bi in 0..geom.batch {
                        gemm(
                            geom.cout,
                            p,
                            k,
                            &gv[bi * geom.cout * p..(bi + 1) * geom.cout * p],
                            false,
                            &cols[bi * k * p..(bi + 1) * k * p],
                            true,
                            &mut dw,
                            T::one(),
                        );
                    }
                    let shape = self.value(*w).shape().to_vec();
                    self.accum(grads, *w, Tensor::new(shape, dw));
                }
                if self.rg(*x) {
                    let wv = self.value(*w).data();
                    let in_len = geom.cin * geom.h * geom.w;
                    let mut dx = vec![T::zero(); geom.batch * in_len];
                    let mut dcol = vec![T::zero(); k * p];
                    for bi in 0..geom.batch {
                        gemm(
                            k,
                            geom.cout,
                            p,
                            wv,
                            true,
                            &gv[bi * geom.cout * p..(bi + 1) * geom.cout * p],
                            false,
                            &mut dcol,
                            T::zero(),
                        );
                        col2im(&dcol, geom, &mut dx[bi * in_len..(bi + 1) * in_len]);
                    }
                    let shape = self.value(*x).shape().to_vec();
                    self.accum(grads, *x, Tensor::new(shape, dx));
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.value(*w).shape();
                let (dout, din) = (ws[0], ws[1]);
                let m = g.len() / dout;
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); dout];
                        for row in g.data().chunks(dout) {
                            for (a, &v) in db.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        self.accum(grads, *b, Tensor::new(vec![dout], db));
                    }
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    gemm(
                        dout,
                        m,
                        din,
                        g.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        &mut dw,
                        T::zero(),
                    );
                    self.accum(grads, *w, Tensor::new(vec![dout, din], dw));
                }
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); m * din];
                    gemm(
                        m,
                        dout,
                        din,
                        g.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        &mut dx,
                        T::zero(),
                    );
                    let shape = self.value(*x).shape().to_vec();
                    self.accum(grads, *x, Tensor::new(shape, dx));
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) && self.rg(*b) {
                    self.accum(grads, *a, g.clone());
                    self.accum(grads, *b, g);
                } else if self.rg(*a) {
                    self.accum(grads, *a, g);
                } else {
                    self.accum(grads, *b, g);
                }
            }
            Op::AddChannel { x, v } => {
                if self.rg(*v) {
                    let xs = self.value(*x).shape();
                    let p = xs[2] * xs[3];
                    let dv: Vec<T> = g
                        .data()
                        .chunks(p)
                        .map(|c| c.iter().copied().sum())
                        .collect();
                    self.accum(grads, *v, Tensor::new(vec![xs[0], xs[1]], dv));
                }
                self.accum(grads, *x, g);
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let mut d = g;
                for (gi, &xi) in d.data_mut().iter_mut().zip(xv) {
                    let s = sigmoid(xi);
                    *gi *= s * (T::one() + xi * (T::one() - s));
                }
                self.accum(grads, *x, d);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accum(grads, *x, g.scale(c));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let xs = self.value(*x).shape().to_vec();
                let (b, c, p) = (xs[0], xs[1], xs[2] * xs[3]);
                let cg = c / groups;
                let n = cg * p;
                let gv = g.data();
                let gamma_v = self.value(*gamma).data();
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * p;
                            for j in base..base + p {
                                dgamma[ch] += gv[j] * xhat[j];
                                dbeta[ch] += gv[j];
                            }
                        }
                    }
                    self.accum(grads, *gamma, Tensor::new(vec![c], dgamma));
                    self.accum(grads, *beta, Tensor::new(vec![c], dbeta));
                }
                if self.rg(*x) {
                    let nf = T::lit(n as f64);
                    let mut dx = vec![T::zero(); gv.len()];
                    let mut dxh = vec![T::zero(); n];
                    for bi in 0..b {
                        for gi in 0..*groups {
                            let start = (bi * c + gi * cg) * p;
                            let mut m1 = T::zero();
                            let mut m2 = T::zero();
                            for j in 0..n {
                                let ch = gi * cg + j / p;
                                let d = gv[start + j] * gamma_v[ch];
                                dxh[j] = d;
                                m1 += d;
                                m2 += d * xhat[start + j];
                            }
                            m1 /= nf;
                            m2 /= nf;
                            let r = rstd[bi * groups + gi];
                            for j in 0..n {
                                dx[start + j] = r * (dxh[j] - m1 - xhat[start + j] * m2);
                            }
                        }
                    }
                    self.accum(grads, *x, Tensor::new(xs, dx));
                }
            }
            Op::ToTokens(x) => {
                let xs = self.value(*x).shape().to_vec();
                let (b, c, p) = (xs[0], xs[1], xs[2] * xs[3]);
                let dx = transpose_last2(g.data(), b, p, c);
                self.accum(grads, *x, Tensor::new(xs, dx));
            }
            Op::FromTokens(x) => {
                let xs = self.value(*x).shape().to_vec();
                let (b, p, c) = (xs[0], xs[1], xs[2]);
                let dx = transpose_last2(g.data(), b, c, p);
                self.accum(grads, *x, Tensor::new(xs, dx));
            }
            Op::Attention {
                q,
                k,
                v,
                lens,
                probs,
                scale,
            } => {
                let qs = self.value(*q).shape().to_vec();
                let ks = self.value(*k).shape().to_vec();
                let vs = self.value(*v).shape().to_vec();
                let (b, n, d) = (qs[0], qs[1], qs[2]);
                let (lmax, dv) = (ks[1], vs[2]);
                let (qv, kv, vv) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let gv = g.data();
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dvv = vec![T::zero(); vv.len()];
                for bi in 0..b {
                    let len = lens[bi];
                    let gb = &gv[bi * n * dv..(bi + 1) * n * dv];
                    let vb = &vv[bi * lmax * dv..(bi * lmax + len) * dv];
                    let kb = &kv[bi * lmax * d..(bi * lmax + len) * d];
                    let qb = &qv[bi * n * d..(bi + 1) * n * d];
                    let mut pc = vec![T::zero(); n * len];
                    for i in 0..n {
                        let src = (bi * n + i) * lmax;
                        pc[i * len..(i + 1) * len].copy_from_slice(&probs[src..src + len]);
                    }
                    // dV = Pᵀ dO
                    gemm(
                        len,
                        n,
                        dv,
                        &pc,
                        true,
                        gb,
                        false,
                        &mut dvv[bi * lmax * dv..(bi * lmax + len) * dv],
                        T::zero(),
                    );
                    // dP = dO Vᵀ, then softmax pullback
                    let mut ds = vec![T::zero(); n * len];
                    gemm(n, dv, len, gb, false, vb, true, &mut ds, T::zero());
                    for i in 0..n {
                        let row_p = &pc[i * len..(i + 1) * len];
                        let row_d = &mut ds[i * len..(i + 1) * len];
                        let dot: T = row_p.iter().zip(row_d.iter()).map(|(&a, &b)| a * b).sum();
                        for (dd, &pp) in row_d.iter_mut().zip(row_p) {
                            *dd = pp * (*dd - dot) * *scale;
                        }
                    }
                    gemm(
                        n,
                        len,
                        d,
                        &ds,
                        false,
                        kb,
                        false,
                        &mut dq[bi * n * d..(bi + 1) * n * d],
                        T::zero(),
                    );
                    gemm(
                        len,
                        n,
                        d,
                        &ds,
                        true,
                        qb,
                        false,
                        &mut dk[bi * lmax * d..(bi * lmax + len) * d],
                        T::zero(),
                    );
                }
                self.accum(grads, *q, Tensor::new(qs, dq));
                self.accum(grads, *k, Tensor::new(ks, dk));
                self.accum(grads, *v, Tensor::new(vs, dvv));
            }
            Op::Upsample2x(x) => {
                let xs = self.value(*x).shape().to_vec();
                let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                let gv = g.data();
                let mut dx = vec![T::zero(); bc * h * w];
                for i in 0..bc {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(i * h + y / 2) * w + xx / 2] += gv[(i * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(xs, dx));
            }
            Op::AvgPool(x) => {
                let xs = self.value(*x).shape().to_vec();
                let p = xs[2] * xs[3];
                let inv = T::lit(1.0 / p as f64);
                let mut dx = Vec::with_capacity(xs.iter().product());
                for &gi in g.data() {
                    dx.extend(std::iter::repeat(gi * inv).take(p));
                }
                self.accum(grads, *x, Tensor::new(xs, dx));
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accum(grads, *x, g.reshape(&shape));
            }
        }
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// `(B, R, C) -> (B, C, R)`.
fn transpose_last2<T: Float>(x: &[T], b: usize, r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        let src = &x[bi * r * c..(bi + 1) * r * c];
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        for v in &mut dst[oy * g.wo..(oy + 1) * g.wo] {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row =
                        &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

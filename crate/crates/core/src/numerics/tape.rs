//! Reverse-mode differentiation over the handful of ops the denoiser uses.
//!
//! A [`Tape`] is built fresh for every forward pass and owned by that call.
//! Nodes record their value and the op that produced them; `backward` walks
//! the nodes in reverse and accumulates vector-Jacobian products only into
//! nodes that transitively depend on a leaf marked as needing a gradient.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::conv::{conv_backward_input, conv_backward_weights, conv_forward, ConvGeom};
use super::softmax::softmax_in_place;
use super::tensor::gemm;
use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MulConst(Var, Tensor<F>),
    /// `[N, C, H, W] * mask[H, W]`
    MaskSpatial(Var, Vec<F>),
    /// `a + mask[H, W] * b` over `[N, C, H, W]`
    FuseMasked(Var, Var, Vec<bool>),
    Silu(Var),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    /// `[N, C, H, W] + v[N, C]`
    AddChannel(Var, Var),
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Var, Var),
    /// `x[.., K] * w[K, P]`
    Linear(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    ToTokens(Var),
    FromTokens(Var),
    MaskedSoftmax {
        x: Var,
        valid: Vec<usize>,
    },
    Mse {
        x: Var,
        target: Tensor<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Gradients indexed by tape variable.
pub struct Grads<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Elementwise `a + mask * b`; see [`Tape::fuse_masked`].
pub fn fuse_values<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, mask: &[bool]) -> Tensor<F> {
    let mut out = a.clone();
    let hw = mask.len();
    for (i, (o, &bv)) in out.data_mut().iter_mut().zip(b.data()).enumerate() {
        if mask[i % hw] && bv != F::zero() {
            *o += bv;
        }
    }
    out
}

fn dims4(t: &Tensor<impl Scalar>) -> (usize, usize, usize, usize) {
    match t.shape()[..] {
        [n, c, h, w] => (n, c, h, w),
        ref s => panic!("expected rank-4 tensor, got {s:?}"),
    }
}

fn dims3(t: &Tensor<impl Scalar>) -> (usize, usize, usize) {
    match t.shape()[..] {
        [n, m, k] => (n, m, k),
        ref s => panic!("expected rank-3 tensor, got {s:?}"),
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, deps: &[Var]) -> Var {
        let needs_grad = deps.iter().any(|d| self.nodes[d.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.value(a).ensure_same_shape(self.value(b), what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    /// Elementwise product with a constant tensor (no gradient flows into the constant).
    pub fn mul_const(&mut self, a: Var, c: Tensor<F>) -> Result<Var> {
        let v = self.value(a).mul(&c)?;
        Ok(self.push(v, Op::MulConst(a, c), &[a]))
    }

    /// Multiplies every channel of a `[N, C, H, W]` tensor by the same `H x W` mask.
    pub fn mask_spatial(&mut self, a: Var, mask: &[F]) -> Result<Var> {
        let (_, _, h, w) = dims4(self.value(a));
        if mask.len() != h * w {
            return Err(Error::shape(format!(
                "mask of {} cells for {h}x{w} features",
                mask.len()
            )));
        }
        let mut v = self.value(a).clone();
        for plane in v.data_mut().chunks_mut(h * w) {
            for (x, &m) in plane.iter_mut().zip(mask) {
                *x *= m;
            }
        }
        Ok(self.push(v, Op::MaskSpatial(a, mask.to_vec()), &[a]))
    }

    /// `a + mask * b` with a binary spatial mask. Where the mask is off or
    /// `b` is zero the output is `a` itself, so a disabled branch leaves `a`
    /// bit-for-bit unchanged (no `-0.0 + 0.0` sign flips).
    pub fn fuse_masked(&mut self, a: Var, b: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape(a, b, "masked fusion")?;
        let (_, _, h, w) = dims4(self.value(a));
        if mask.len() != h * w {
            return Err(Error::shape(format!(
                "mask of {} cells for {h}x{w} features",
                mask.len()
            )));
        }
        let v = fuse_values(self.value(a), self.value(b), mask);
        Ok(self.push(v, Op::FuseMasked(a, b, mask.to_vec()), &[a, b]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x / (F::one() + (-x).exp()));
        self.push(v, Op::Silu(a), &[a])
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c_in, h, wd) = dims4(self.value(x));
        let (c_out, wc, k, k2) = dims4(self.value(w));
        if wc != c_in || k != k2 {
            return Err(Error::shape(format!(
                "conv weight {:?} for input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape("conv bias length"));
            }
        }
        let g = ConvGeom {
            c_in,
            c_out,
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![F::zero(); n * c_out * oh * ow];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            out.par_chunks_mut(c_out * oh * ow)
                .enumerate()
                .for_each(|(i, o)| {
                    conv_forward(
                        &g,
                        &xv[i * c_in * h * wd..(i + 1) * c_in * h * wd],
                        wv,
                        bv,
                        o,
                    );
                });
        }
        let value = Tensor::from_parts(vec![n, c_out, oh, ow], out);
        let mut deps = vec![x, w];
        deps.extend(b);
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
            &deps,
        ))
    }

    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.value(x));
        if self.value(v).shape() != [n, c] {
            return Err(Error::shape(format!(
                "channel offset {:?} for {:?}",
                self.value(v).shape(),
                self.value(x).shape()
            )));
        }
        let mut out = self.value(x).clone();
        let off = self.value(v).data();
        for (plane, &o) in out.data_mut().chunks_mut(h * w).zip(off) {
            for e in plane {
                *e += o;
            }
        }
        Ok(self.push(out, Op::AddChannel(x, v), &[x, v]))
    }

    /// Selects rows of a `[R, C]` table.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(table).dims2()?;
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::shape(format!("row {i} of table with {r} rows")));
            }
            out.extend_from_slice(&self.value(table).data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::from_parts(vec![rows.len(), c], out);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    pub fn reshape(&mut self, v: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(v).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(v), &[v]))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let src = self.value(x).data();
        let mut out = vec![F::zero(); n * c * 4 * h * w];
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = src[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, 2 * h, 2 * w], out);
        self.push(value, Op::Upsample2(x), &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = dims4(self.value(a));
        let (nb, cb, hb, wb) = dims4(self.value(b));
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat spatial/batch mismatch"));
        }
        let mut out = Vec::with_capacity(n * (ca + cb) * h * w);
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * ca * h * w..(i + 1) * ca * h * w]);
            out.extend_from_slice(&self.value(b).data()[i * cb * h * w..(i + 1) * cb * h * w]);
        }
        let value = Tensor::from_parts(vec![n, ca + cb, h, w], out);
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    /// Right-multiplies the last axis by a `[K, P]` matrix.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let (k, p) = self.value(w).dims2()?;
        if xs.last() != Some(&k) {
            return Err(Error::shape(format!("linear {:?} x [{k}, {p}]", xs)));
        }
        let rows = self.value(x).len() / k;
        let mut out = vec![F::zero(); rows * p];
        gemm(
            false,
            false,
            rows,
            p,
            k,
            F::one(),
            self.value(x).data(),
            self.value(w).data(),
            F::zero(),
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = p;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::Linear(x, w), &[x, w]))
    }

    /// Batched product `a[N, M, K] * b[N, K, P]`, or `a * b^T` for `b[N, P, K]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (n, m, k) = dims3(self.value(a));
        let (nb, b1, b2) = dims3(self.value(b));
        let (bk, p) = if trans_b { (b2, b1) } else { (b1, b2) };
        if n != nb || k != bk {
            return Err(Error::shape(format!(
                "bmm {:?} x {:?} (trans_b={trans_b})",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![F::zero(); n * m * p];
        for i in 0..n {
            gemm(
                false,
                trans_b,
                m,
                p,
                k,
                F::one(),
                &self.value(a).data()[i * m * k..(i + 1) * m * k],
                &self.value(b).data()[i * k * p..(i + 1) * k * p],
                F::zero(),
                &mut out[i * m * p..(i + 1) * m * p],
            );
        }
        let value = Tensor::from_parts(vec![n, m, p], out);
        Ok(self.push(value, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    /// `[N, C, H, W] -> [N, H*W, C]`
    pub fn to_tokens(&mut self, x: Var) -> Var {
        let (n, c, h, w) = dims4(self.value(x));
        let src = self.value(x).data();
        let hw = h * w;
        let mut out = vec![F::zero(); n * hw * c];
        for i in 0..n {
            for ch in 0..c {
                for s in 0..hw {
                    out[(i * hw + s) * c + ch] = src[(i * c + ch) * hw + s];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, hw, c], out);
        self.push(value, Op::ToTokens(x), &[x])
    }

    /// `[N, H*W, C] -> [N, C, H, W]`
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (n, hw, c) = dims3(self.value(x));
        if hw != h * w {
            return Err(Error::shape("token count does not match spatial grid"));
        }
        let src = self.value(x).data();
        let mut out = vec![F::zero(); n * hw * c];
        for i in 0..n {
            for s in 0..hw {
                for ch in 0..c {
                    out[(i * c + ch) * hw + s] = src[(i * hw + s) * c + ch];
                }
            }
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        Ok(self.push(value, Op::FromTokens(x), &[x]))
    }

    /// Softmax along the last axis of `[N, M, L]`, restricted to the first
    /// `valid[n]` columns of sample `n`; remaining columns are exactly zero.
    pub fn masked_softmax(&mut self, x: Var, valid: &[usize]) -> Result<Var> {
        let (n, m, l) = dims3(self.value(x));
        if valid.len() != n || valid.iter().any(|&v| v == 0 || v > l) {
            return Err(Error::shape("softmax valid lengths"));
        }
        let mut out = self.value(x).clone();
        for (i, block) in out.data_mut().chunks_mut(m * l).enumerate() {
            for row in block.chunks_mut(l) {
                softmax_in_place(&mut row[..valid[i]]);
                row[valid[i]..].fill(F::zero());
            }
        }
        Ok(self.push(
            out,
            Op::MaskedSoftmax {
                x,
                valid: valid.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean squared error against a constant target; returns a `[1]` node.
    pub fn mse(&mut self, x: Var, target: Tensor<F>) -> Result<Var> {
        self.value(x).ensure_same_shape(&target, "mse")?;
        let n = F::from_usize(target.len()).unwrap();
        let total: F = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(Tensor::scalar(total / n), Op::Mse { x, target }, &[x]))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        self.backward_with_seed(loss, Tensor::ones(self.value(loss).shape().to_vec()))
    }

    /// Backpropagates a given cotangent `seed` placed on node `from`.
    pub fn backward_with_seed(&self, from: Var, seed: Tensor<F>) -> Result<Grads<F>> {
        self.value(from).ensure_same_shape(&seed, "backward seed")?;
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[from.0] = Some(seed);
        for idx in (0..=from.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op<F>,
        out: &Tensor<F>,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        match op {
            Op::Leaf => {}
            Op::Reshape(a) => {
                let d = g.clone().reshape(self.value(*a).shape().to_vec()).unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.needs_grad(*a) {
                    self.accumulate(grads, *a, g.mul(self.value(*b)).unwrap());
                }
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, g.mul(self.value(*a)).unwrap());
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g.scale(*k)),
            Op::MulConst(a, c) => self.accumulate(grads, *a, g.mul(c).unwrap()),
            Op::MaskSpatial(a, mask) => {
                let mut d = g.clone();
                for plane in d.data_mut().chunks_mut(mask.len()) {
                    for (x, &m) in plane.iter_mut().zip(mask) {
                        *x *= m;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::FuseMasked(a, b, mask) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs_grad(*b) {
                    let mut d = g.clone();
                    for plane in d.data_mut().chunks_mut(mask.len()) {
                        for (x, &m) in plane.iter_mut().zip(mask) {
                            if !m {
                                *x = F::zero();
                            }
                        }
                    }
                    self.accumulate(grads, *b, d);
                }
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let d = x
                    .zip_map(g, |x, gy| {
                        let s = F::one() / (F::one() + (-x).exp());
                        gy * s * (F::one() + x * (F::one() - s))
                    })
                    .unwrap();
                self.accumulate(grads, *a, d);
            }
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv_backward(*x, *w, *b, *stride, *pad, g, grads),
            Op::AddChannel(x, v) => {
                if self.needs_grad(*v) {
                    let (n, c, h, w) = dims4(g);
                    let sums: Vec<F> = g
                        .data()
                        .chunks(h * w)
                        .map(|p| p.iter().copied().sum())
                        .collect();
                    self.accumulate(grads, *v, Tensor::from_parts(vec![n, c], sums));
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Gather { table, rows } => {
                let (r, c) = self.value(*table).dims2().unwrap();
                let mut d = vec![F::zero(); r * c];
                for (i, &row) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[row * c + j] += g.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(vec![r, c], d));
            }
            Op::Upsample2(x) => {
                let (n, c, h, w) = dims4(self.value(*x));
                let mut d = vec![F::zero(); n * c * h * w];
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(p * h + y / 2) * w + xx / 2] +=
                                g.data()[(p * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![n, c, h, w], d));
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = dims4(self.value(*a));
                let cb = self.value(*b).shape()[1];
                let (mut da, mut db) = (
                    Vec::with_capacity(n * ca * h * w),
                    Vec::with_capacity(n * cb * h * w),
                );
                for blk in g.data().chunks((ca + cb) * h * w) {
                    da.extend_from_slice(&blk[..ca * h * w]);
                    db.extend_from_slice(&blk[ca * h * w..]);
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![n, ca, h, w], da));
                self.accumulate(grads, *b, Tensor::from_parts(vec![n, cb, h, w], db));
            }
            Op::Linear(x, w) => {
                let (k, p) = self.value(*w).dims2().unwrap();
                let rows = self.value(*x).len() / k;
                if self.needs_grad(*x) {
                    let mut d = vec![F::zero(); rows * k];
                    gemm(
                        false,
                        true,
                        rows,
                        k,
                        p,
                        F::one(),
                        g.data(),
                        self.value(*w).data(),
                        F::zero(),
                        &mut d,
                    );
                    self.accumulate(
                        grads,
                        *x,
                        Tensor::from_parts(self.value(*x).shape().to_vec(), d),
                    );
                }
                if self.needs_grad(*w) {
                    let mut d = vec![F::zero(); k * p];
                    gemm(
                        true,
                        false,
                        k,
                        p,
                        rows,
                        F::one(),
                        self.value(*x).data(),
                        g.data(),
                        F::zero(),
                        &mut d,
                    );
                    self.accumulate(grads, *w, Tensor::from_parts(vec![k, p], d));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (n, m, k) = dims3(self.value(*a));
                let p = g.shape()[2];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.needs_grad(*a) {
                    let mut d = vec![F::zero(); n * m * k];
                    for i in 0..n {
                        // dA = dC * B^T (or dC * B when B is stored transposed)
                        gemm(
                            false,
                            !*trans_b,
                            m,
                            k,
                            p,
                            F::one(),
                            &g.data()[i * m * p..(i + 1) * m * p],
                            &bv[i * k * p..(i + 1) * k * p],
                            F::zero(),
                            &mut d[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(vec![n, m, k], d));
                }
                if self.needs_grad(*b) {
                    let mut d = vec![F::zero(); n * k * p];
                    for i in 0..n {
                        let gi = &g.data()[i * m * p..(i + 1) * m * p];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let di = &mut d[i * k * p..(i + 1) * k * p];
                        if *trans_b {
                            // B is [P, K]: dB = dC^T * A
                            gemm(true, false, p, k, m, F::one(), gi, ai, F::zero(), di);
                        } else {
                            gemm(true, false, k, p, m, F::one(), ai, gi, F::zero(), di);
                        }
                    }
                    self.accumulate(
                        grads,
                        *b,
                        Tensor::from_parts(self.value(*b).shape().to_vec(), d),
                    );
                }
            }
            Op::ToTokens(x) => {
                let (n, c, h, w) = dims4(self.value(*x));
                let hw = h * w;
                let mut d = vec![F::zero(); n * c * hw];
                for i in 0..n {
                    for ch in 0..c {
                        for s in 0..hw {
                            d[(i * c + ch) * hw + s] = g.data()[(i * hw + s) * c + ch];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![n, c, h, w], d));
            }
            Op::FromTokens(x) => {
                let (n, hw, c) = dims3(self.value(*x));
                let mut d = vec![F::zero(); n * hw * c];
                for i in 0..n {
                    for s in 0..hw {
                        for ch in 0..c {
                            d[(i * hw + s) * c + ch] = g.data()[(i * c + ch) * hw + s];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(vec![n, hw, c], d));
            }
            Op::MaskedSoftmax { x, valid } => {
                let (_, m, l) = dims3(self.value(*x));
                let out = out.data();
                let mut d = vec![F::zero(); out.len()];
                for (i, ((dblk, yblk), gblk)) in d
                    .chunks_mut(m * l)
                    .zip(out.chunks(m * l))
                    .zip(g.data().chunks(m * l))
                    .enumerate()
                {
                    let v = valid[i];
                    for ((dr, yr), gr) in dblk.chunks_mut(l).zip(yblk.chunks(l)).zip(gblk.chunks(l))
                    {
                        let dot: F = (0..v).map(|j| yr[j] * gr[j]).sum();
                        for j in 0..v {
                            dr[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor::from_parts(self.value(*x).shape().to_vec(), d),
                );
            }
            Op::Mse { x, target } => {
                let n = F::from_usize(target.len()).unwrap();
                let k = g.data()[0] * F::lit(2.0) / n;
                let d = self.value(*x).zip_map(target, |a, b| (a - b) * k).unwrap();
                self.accumulate(grads, *x, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (n, c_in, h, wd) = dims4(self.value(x));
        let (c_out, _, k, _) = dims4(self.value(w));
        let geom = ConvGeom {
            c_in,
            c_out,
            h,
            w: wd,
            k,
            stride,
            pad,
        };
        let in_sz = c_in * h * wd;
        let out_sz = c_out * geom.out_h() * geom.out_w();
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let need_w = self.needs_grad(w);
        let need_b = b.is_some_and(|b| self.needs_grad(b));
        if need_w || need_b {
            let wlen = wv.len();
            let (dw, db) = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut dw = vec![F::zero(); wlen];
                    let mut db = vec![F::zero(); c_out];
                    conv_backward_weights(
                        &geom,
                        &xv[i * in_sz..(i + 1) * in_sz],
                        &g.data()[i * out_sz..(i + 1) * out_sz],
                        &mut dw,
                        Some(&mut db),
                    );
                    (dw, db)
                })
                .reduce(
                    || (vec![F::zero(); wlen], vec![F::zero(); c_out]),
                    |(mut aw, mut ab), (bw, bb)| {
                        aw.iter_mut().zip(&bw).for_each(|(a, b)| *a += *b);
                        ab.iter_mut().zip(&bb).for_each(|(a, b)| *a += *b);
                        (aw, ab)
                    },
                );
            if need_w {
                self.accumulate(
                    grads,
                    w,
                    Tensor::from_parts(self.value(w).shape().to_vec(), dw),
                );
            }
            if let (Some(b), true) = (b, need_b) {
                self.accumulate(grads, b, Tensor::from_parts(vec![c_out], db));
            }
        }
        if self.needs_grad(x) {
            let mut dx = vec![F::zero(); n * in_sz];
            dx.par_chunks_mut(in_sz).enumerate().for_each(|(i, d)| {
                conv_backward_input(&geom, wv, &g.data()[i * out_sz..(i + 1) * out_sz], d);
            });
            self.accumulate(grads, x, Tensor::from_parts(vec![n, c_in, h, wd], dx));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad::{central_difference, relative_error};

    fn det(shape: Vec<usize>, salt: u64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| {
            let h = (i as u64 + 1)
                .wrapping_mul(6364136223846793005)
                .wrapping_add(salt * 1442695040888963407);
            ((h >> 33) % 2001) as f64 / 1000.0 - 1.0
        })
    }

    fn params() -> Vec<Tensor<f64>> {
        vec![
            det(vec![4, 2, 3, 3], 1).scale(0.4),
            det(vec![4], 2),
            det(vec![3, 4, 3, 3], 3).scale(0.3),
            det(vec![2, 7, 1, 1], 4),
            det(vec![5, 3], 5),
            det(vec![6, 4], 6),
            det(vec![3, 4], 7),
            det(vec![4, 4], 8),
            det(vec![4, 3], 9),
        ]
    }

    /// Small network touching every op; returns the scalar loss and parameter leaves.
    fn network(tape: &mut Tape<f64>, z: Var, ps: &[Tensor<f64>], train: bool) -> (Var, Vec<Var>) {
        let p: Vec<Var> = ps.iter().map(|t| tape.leaf(t.clone(), train)).collect();
        let h = tape.conv2d(z, p[0], Some(p[1]), 1, 1).unwrap();
        let h = tape.silu(h);
        let d = tape.conv2d(h, p[2], None, 2, 1).unwrap(); // [2,3,2,2]
        let t = tape.gather(p[4], &[1, 4]).unwrap();
        let d = tape.add_channel(d, t).unwrap();
        let tok = tape.to_tokens(d); // [2,4,3]
        let q = tape.linear(tok, p[6]).unwrap(); // [2,4,4]
        let e = tape.gather(p[5], &[0, 2, 3, 5, 1, 0]).unwrap();
        let e = tape.reshape(e, vec![2, 3, 4]).unwrap();
        let k = tape.linear(e, p[7]).unwrap();
        let v = tape.linear(e, p[8]).unwrap(); // [2,3,3]
        let s = tape.bmm(q, k, true).unwrap();
        let s = tape.scale(s, 0.5);
        let a = tape.masked_softmax(s, &[3, 2]).unwrap();
        let c = Tensor::from_fn(vec![2, 4, 3], |i| if i % 4 == 0 { 0.3 } else { 1.0 });
        let a = tape.mul_const(a, c).unwrap();
        let o = tape.bmm(a, v, false).unwrap(); // [2,4,3]
        let o = tape.from_tokens(o, 2, 2).unwrap();
        let d = tape.add(d, o).unwrap();
        let u = tape.upsample2(d); // [2,3,4,4]
        let cat = tape.concat_channels(u, h).unwrap(); // [2,7,4,4]
        let out = tape.conv2d(cat, p[3], None, 1, 0).unwrap();
        let mask: Vec<f64> = (0..16)
            .map(|i| if i % 3 == 0 { 0.0 } else { 1.0 })
            .collect();
        let out = tape.mask_spatial(out, &mask).unwrap();
        let side = tape.silu(out);
        let keep: Vec<bool> = (0..16).map(|i| i % 5 != 1).collect();
        let out = tape.fuse_masked(out, side, &keep).unwrap();
        let sq = tape.mul(out, out).unwrap();
        let diff = tape.sub(sq, out).unwrap();
        (tape.mse(diff, det(vec![2, 2, 4, 4], 10)).unwrap(), p)
    }

    fn loss_at(z: &Tensor<f64>, ps: &[Tensor<f64>]) -> f64 {
        let mut t = Tape::new();
        let l = t.leaf(z.clone(), false);
        let (loss, _) = network(&mut t, l, ps, false);
        t.value(loss).data()[0]
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let z = det(vec![2, 2, 4, 4], 11);
        let ps = params();
        let mut tape = Tape::new();
        let leaf = tape.leaf(z.clone(), true);
        let (loss, _) = network(&mut tape, leaf, &ps, false);
        let g = tape.backward(loss).unwrap().take(leaf).unwrap();
        let fd = central_difference(&z, 1e-5, |p| Ok(loss_at(p, &ps))).unwrap();
        let err = relative_error(&g, &fd, 1e-8);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let z = det(vec![2, 2, 4, 4], 12);
        let ps = params();
        let mut tape = Tape::new();
        let leaf = tape.leaf(z.clone(), false);
        let (loss, vars) = network(&mut tape, leaf, &ps, true);
        let grads = tape.backward(loss).unwrap();
        for (i, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).expect("param grad");
            let fd = central_difference(&ps[i], 1e-5, |probe| {
                let mut swapped = ps.clone();
                swapped[i] = probe.clone();
                Ok(loss_at(&z, &swapped))
            })
            .unwrap();
            let err = relative_error(analytic, &fd, 1e-8);
            assert!(err < 1e-6, "param {i}: {err}");
        }
    }

    #[test]
    fn masked_softmax_zeroes_padding() {
        let mut tape = Tape::new();
        let x = tape.leaf(det(vec![1, 2, 4], 3), false);
        let y = tape.masked_softmax(x, &[2]).unwrap();
        for row in tape.value(y).data().chunks(4) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-15);
            assert_eq!((row[2], row[3]), (0.0, 0.0));
        }
    }

    #[test]
    fn untracked_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(det(vec![3], 1), false);
        let b = tape.leaf(det(vec![3], 2), true);
        let c = tape.mul(a, b).unwrap();
        let l = tape.mse(c, Tensor::zeros(vec![3])).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }
}

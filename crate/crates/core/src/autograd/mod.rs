//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation in insertion order; inputs of node `k`
//! always have ids `< k`, so the tape is acyclic by construction and
//! [`Graph::backward`] walks it once in reverse.

pub(crate) mod direct;
pub(crate) mod kernels;
pub mod gradcheck;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use kernels::{ConvGeom, Mat};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    /// Stride 1 with padding that preserves the spatial extent of a 3×3 kernel.
    pub fn same3(dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: dilation,
            dilation,
        }
    }

    pub fn pointwise() -> Self {
        ConvSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, spec: ConvSpec },
    TransposedConv2x2 { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Prelu { x: Var, a: Var },
    Sigmoid { x: Var },
    Upsample2 { x: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Bce { logits: Var, target: Tensor<T> },
    Sum { x: Var },
    WeightedSum { x: Var, weights: Tensor<T> },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`]; only leaves (inputs and params) keep theirs.
#[derive(Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

fn same_dims<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient is computed for it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn conv_geom(&self, x: Var, w: Var, spec: ConvSpec) -> Result<ConvGeom> {
        let [_, cin, h, wd] = self.value(x).dims();
        let [_, wcin, k, k2] = self.value(w).dims();
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if k != k2 || k == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {k}x{k2}")));
        }
        if spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::InvalidArgument(
                "conv2d: stride and dilation must be >= 1".into(),
            ));
        }
        let span = spec.dilation * (k - 1) + 1;
        let out_extent = |n: usize| {
            (n + 2 * spec.padding)
                .checked_sub(span)
                .map(|v| v / spec.stride + 1)
        };
        match (out_extent(h), out_extent(wd)) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok(ConvGeom {
                cin,
                h,
                w: wd,
                k,
                stride: spec.stride,
                padding: spec.padding,
                dilation: spec.dilation,
                oh,
                ow,
            }),
            _ => Err(Error::shape(
                "conv2d",
                format!("non-positive output extent for {h}x{wd} input, span {span}"),
            )),
        }
    }

    /// Cross-correlation of `x [N, Cin, H, W]` with `w [Cout, Cin, k, k]` plus bias `b [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let g = self.conv_geom(x, w, spec)?;
        let cout = self.value(w).dims()[0];
        if self.value(b).len() != cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries for {cout} output channels", self.value(b).len()),
            ));
        }
        let n = self.value(x).dims()[0];
        let mut out = Tensor::zeros_unchecked([n, cout, g.oh, g.ow]);
        {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
            let in_per = g.cin * g.h * g.w;
            let out_per = cout * g.cols();
            let mut ws = kernels::Workspace::new();
            for i in 0..n {
                kernels::conv_forward_image(
                    &g,
                    &xv.data()[i * in_per..(i + 1) * in_per],
                    wv.data(),
                    bv.data(),
                    &mut out.data_mut()[i * out_per..(i + 1) * out_per],
                    &mut ws,
                );
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, rg))
    }

    /// Learned ×2 upsampling: `x [N, Cin, H, W]`, `w [Cin, Cout, 2, 2]`, stride 2.
    pub fn transposed_conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims();
        let [wcin, cout, kh, kw] = self.value(w).dims();
        if wcin != cin || (kh, kw) != (2, 2) {
            return Err(Error::shape(
                "transposed_conv2d",
                format!("input has {cin} channels, weight is {:?}", self.value(w).dims()),
            ));
        }
        if self.value(b).len() != cout {
            return Err(Error::shape("transposed_conv2d", "bias length != Cout"));
        }
        let p = h * wd;
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = Tensor::zeros_unchecked([n, cout, oh, ow]);
        {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
            // rows (co, u, v), cols ci: a transposed view of w
            let w_t = Mat::cols(wv.data(), cout * 4);
            let mut y = vec![T::zero(); cout * 4 * p];
            for i in 0..n {
                y.iter_mut().for_each(|v| *v = T::zero());
                let xi = Mat::rows(&xv.data()[i * cin * p..(i + 1) * cin * p], p);
                kernels::gemm(cout * 4, cin, p, w_t, xi, &mut y, p);
                let o = &mut out.data_mut()[i * cout * oh * ow..(i + 1) * cout * oh * ow];
                for co in 0..cout {
                    for uv in 0..4 {
                        let (u, v) = (uv / 2, uv % 2);
                        let src = &y[(co * 4 + uv) * p..(co * 4 + uv + 1) * p];
                        for r in 0..h {
                            let dst = &mut o[co * oh * ow + (2 * r + u) * ow..][..ow];
                            for c in 0..wd {
                                dst[2 * c + v] = src[r * wd + c] + bv.data()[co];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::TransposedConv2x2 { x, w, b }, rg))
    }

    /// 2×2 max pooling with stride 2. Ties resolve to the first position in row-major order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2d", format!("odd extent {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros_unchecked([n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        let data = xv.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (du, dv) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + du) * w + 2 * j + dv;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    let o = plane * oh * ow + i * ow + j;
                    out.data_mut()[o] = data[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let rg = self.needs(x);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Parametric ReLU with one slope per channel.
    pub fn prelu(&mut self, x: Var, a: Var) -> Result<Var> {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims();
        let slopes = self.value(a).data();
        if slopes.len() != c {
            return Err(Error::shape(
                "prelu",
                format!("{} slopes for {c} channels", slopes.len()),
            ));
        }
        let hw = h * w;
        let mut out = xv.clone();
        for (plane, chunk) in out.data_mut().chunks_exact_mut(hw.max(1)).enumerate().take(n * c) {
            let s = slopes[plane % c];
            for v in chunk.iter_mut() {
                if *v < T::zero() {
                    *v *= s;
                }
            }
        }
        let rg = self.needs(x) || self.needs(a);
        Ok(self.push(out, Op::Prelu { x, a }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.needs(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// ×2 bilinear upsampling with half-pixel centers and edge clamping.
    pub fn bilinear_upsample2d(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.dims();
        let (oh, ow) = (2 * h, 2 * w);
        let rows = upsample_taps(h);
        let cols = upsample_taps(w);
        let mut out = Tensor::zeros_unchecked([n, c, oh, ow]);
        let src = xv.data();
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out.data_mut()[plane * oh * ow..(plane + 1) * oh * ow];
            for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
                for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                    let top = s[r0 * w + c0] * (T::one() - T::of(fc)) + s[r0 * w + c1] * T::of(fc);
                    let bot = s[r1 * w + c0] * (T::one() - T::of(fc)) + s[r1 * w + c1] * T::of(fc);
                    d[oi * ow + oj] = top * (T::one() - T::of(fr)) + bot * T::of(fr);
                }
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::Upsample2 { x }, rg)
    }

    /// Channel concatenation, `a`'s channels first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let [n, ca, h, w] = av.dims();
        let [nb, cb, hb, wb] = bv.dims();
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", av.dims(), bv.dims()),
            ));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            data.extend_from_slice(&av.data()[i * sa..(i + 1) * sa]);
            data.extend_from_slice(&bv.data()[i * sb..(i + 1) * sb]);
        }
        let out = Tensor::from_vec([n, ca + cb, h, w], data)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    pub fn residual_add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_dims("residual_add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against a {0, 1} target,
    /// evaluated as `max(z, 0) - z*y + ln(1 + e^-|z|)`.
    pub fn bce_loss(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        let z = self.value(logits);
        same_dims("bce_loss", z, target)?;
        if let Some(bad) = target
            .data()
            .iter()
            .find(|&&y| y != T::zero() && y != T::one())
        {
            return Err(Error::InvalidArgument(format!(
                "bce_loss: target must be binary, found {bad:?}"
            )));
        }
        let count = T::of(z.len().max(1) as f64);
        let total: T = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / count);
        let rg = self.needs(logits);
        Ok(self.push(
            out,
            Op::Bce {
                logits,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Sum of all elements, as a `[1, 1, 1, 1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        let rg = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum { x }, rg)
    }

    /// `Σ x_i · weights_i`, a fixed linear functional of `x`.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        same_dims("weighted_sum", self.value(x), &weights)?;
        let total: T = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.needs(x);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { x, weights }, rg))
    }

    /// Hash of every branch decision taken by the forward pass: the argmax of
    /// each pooling window and the sign of each PReLU input. Two evaluations
    /// with equal signatures ran through the same linear region.
    pub fn kink_signature(&self) -> u64 {
        let mut hasher = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut hasher),
                Op::Prelu { x, .. } => {
                    for v in self.value(*x).data() {
                        (*v < T::zero()).hash(&mut hasher);
                    }
                }
                _ => {}
            }
        }
        hasher.finish()
    }

    /// Reverse sweep from a scalar `loss`, summing gradients into every node
    /// that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).dims() != [1, 1, 1, 1] {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).dims()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            } else if self.nodes[id].requires_grad {
                self.backward_node(id, g, &mut grads);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn grad_slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> &'a mut Tensor<T> {
        grads[v.0].get_or_insert_with(|| Tensor::zeros_unchecked(self.value(v).dims()))
    }

    fn backward_node(&self, id: usize, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, spec } => {
                let geom = self
                    .conv_geom(*x, *w, *spec)
                    .expect("geometry validated in forward");
                let (xv, wv) = (self.value(*x), self.value(*w));
                let n = xv.dims()[0];
                let cout = wv.dims()[0];
                let in_per = geom.cin * geom.h * geom.w;
                let out_per = cout * geom.cols();
                let mut dx = self.needs(*x).then(|| Tensor::zeros_unchecked(xv.dims()));
                let mut dw = self.needs(*w).then(|| Tensor::zeros_unchecked(wv.dims()));
                let mut db = self.needs(*b).then(|| Tensor::zeros_unchecked(self.value(*b).dims()));
                let mut ws = kernels::Workspace::new();
                let flipped = if dx.is_some() {
                    kernels::flipped_conv(&geom, wv.data(), cout)
                } else {
                    None
                };
                for i in 0..n {
                    kernels::conv_backward_image(
                        &geom,
                        &xv.data()[i * in_per..(i + 1) * in_per],
                        wv.data(),
                        &g.data()[i * out_per..(i + 1) * out_per],
                        dx.as_mut().map(|t| &mut t.data_mut()[i * in_per..(i + 1) * in_per]),
                        dw.as_mut().map(|t| t.data_mut()),
                        db.as_mut().map(|t| t.data_mut()),
                        flipped.as_ref(),
                        &mut ws,
                    );
                }
                if let Some(t) = dx {
                    self.accumulate(grads, *x, t);
                }
                if let Some(t) = dw {
                    self.accumulate(grads, *w, t);
                }
                if let Some(t) = db {
                    self.accumulate(grads, *b, t);
                }
            }
            Op::TransposedConv2x2 { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let [n, cin, h, wd] = xv.dims();
                let cout = wv.dims()[1];
                let p = h * wd;
                let (oh, ow) = (2 * h, 2 * wd);
                let mut dx = self.needs(*x).then(|| Tensor::zeros_unchecked(xv.dims()));
                let mut dw = self.needs(*w).then(|| Tensor::zeros_unchecked(wv.dims()));
                let mut db = self.needs(*b).then(|| Tensor::zeros_unchecked(self.value(*b).dims()));
                let mut dy = vec![T::zero(); cout * 4 * p];
                for i in 0..n {
                    let go = &g.data()[i * cout * oh * ow..(i + 1) * cout * oh * ow];
                    for co in 0..cout {
                        for uv in 0..4 {
                            let (u, v) = (uv / 2, uv % 2);
                            let dst = &mut dy[(co * 4 + uv) * p..(co * 4 + uv + 1) * p];
                            for r in 0..h {
                                let src = &go[co * oh * ow + (2 * r + u) * ow..][..ow];
                                for c in 0..wd {
                                    dst[r * wd + c] = src[2 * c + v];
                                }
                            }
                        }
                        if let Some(db) = db.as_mut() {
                            db.data_mut()[co] += go[co * oh * ow..(co + 1) * oh * ow]
                                .iter()
                                .copied()
                                .sum::<T>();
                        }
                    }
                    let xi = &xv.data()[i * cin * p..(i + 1) * cin * p];
                    if let Some(dx) = dx.as_mut() {
                        kernels::gemm_nn(
                            cin,
                            cout * 4,
                            p,
                            wv.data(),
                            &dy,
                            &mut dx.data_mut()[i * cin * p..(i + 1) * cin * p],
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        kernels::gemm(
                            cin,
                            p,
                            cout * 4,
                            Mat::rows(xi, p),
                            Mat::cols(&dy, p),
                            dw.data_mut(),
                            cout * 4,
                        );
                    }
                }
                if let Some(t) = dx {
                    self.accumulate(grads, *x, t);
                }
                if let Some(t) = dw {
                    self.accumulate(grads, *w, t);
                }
                if let Some(t) = db {
                    self.accumulate(grads, *b, t);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.needs(*x) {
                    let dx = self.grad_slot(grads, *x);
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        dx.data_mut()[src as usize] += gv;
                    }
                }
            }
            Op::Prelu { x, a } => {
                let xv = self.value(*x);
                let [_, c, h, w] = xv.dims();
                let hw = (h * w).max(1);
                let slopes = self.value(*a).data();
                if self.needs(*a) {
                    let mut da = vec![T::zero(); c];
                    for (plane, (gs, xs)) in g
                        .data()
                        .chunks_exact(hw)
                        .zip(xv.data().chunks_exact(hw))
                        .enumerate()
                    {
                        let acc: T = gs
                            .iter()
                            .zip(xs)
                            .filter(|(_, &xvv)| xvv < T::zero())
                            .map(|(&gv, &xvv)| gv * xvv)
                            .sum();
                        da[plane % c] += acc;
                    }
                    let dims = self.value(*a).dims();
                    self.accumulate(grads, *a, Tensor::from_vec(dims, da).expect("slope dims"));
                }
                if self.needs(*x) {
                    let mut dx = g;
                    for (plane, (d, xs)) in dx
                        .data_mut()
                        .chunks_exact_mut(hw)
                        .zip(xv.data().chunks_exact(hw))
                        .enumerate()
                    {
                        let s = slopes[plane % c];
                        for (dv, &xvv) in d.iter_mut().zip(xs) {
                            if xvv < T::zero() {
                                *dv *= s;
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Sigmoid { x } => {
                let out = &self.nodes[id].value;
                let mut dx = g;
                for (d, &s) in dx.data_mut().iter_mut().zip(out.data()) {
                    *d *= s * (T::one() - s);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2 { x } => {
                let [n, c, h, w] = self.value(*x).dims();
                let (oh, ow) = (2 * h, 2 * w);
                let rows = upsample_taps(h);
                let cols = upsample_taps(w);
                let dx = self.grad_slot(grads, *x);
                for plane in 0..n * c {
                    let go = &g.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let d = &mut dx.data_mut()[plane * h * w..(plane + 1) * h * w];
                    for (oi, &(r0, r1, fr)) in rows.iter().enumerate() {
                        let (wr0, wr1) = (T::one() - T::of(fr), T::of(fr));
                        for (oj, &(c0, c1, fc)) in cols.iter().enumerate() {
                            let (wc0, wc1) = (T::one() - T::of(fc), T::of(fc));
                            let gv = go[oi * ow + oj];
                            d[r0 * w + c0] += gv * wr0 * wc0;
                            d[r0 * w + c1] += gv * wr0 * wc1;
                            d[r1 * w + c0] += gv * wr1 * wc0;
                            d[r1 * w + c1] += gv * wr1 * wc1;
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(*a).dims();
                let cb = self.value(*b).dims()[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                if self.needs(*a) {
                    let mut da = Vec::with_capacity(n * sa);
                    for i in 0..n {
                        da.extend_from_slice(&g.data()[i * (sa + sb)..i * (sa + sb) + sa]);
                    }
                    let t = Tensor::from_vec(self.value(*a).dims(), da).expect("concat split");
                    self.accumulate(grads, *a, t);
                }
                if self.needs(*b) {
                    let mut db = Vec::with_capacity(n * sb);
                    for i in 0..n {
                        db.extend_from_slice(&g.data()[i * (sa + sb) + sa..(i + 1) * (sa + sb)]);
                    }
                    let t = Tensor::from_vec(self.value(*b).dims(), db).expect("concat split");
                    self.accumulate(grads, *b, t);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*b) {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, g);
                } else {
                    self.accumulate(grads, *a, g);
                }
            }
            Op::Bce { logits, target } => {
                let z = self.value(*logits);
                let scale = g.data()[0] / T::of(z.len().max(1) as f64);
                let mut dz = z.clone();
                for (d, &y) in dz.data_mut().iter_mut().zip(target.data()) {
                    *d = (sigmoid(*d) - y) * scale;
                }
                self.accumulate(grads, *logits, dz);
            }
            Op::Sum { x } => {
                let gv = g.data()[0];
                let dims = self.value(*x).dims();
                self.accumulate(grads, *x, Tensor::filled(dims, gv).expect("finite grad"));
            }
            Op::WeightedSum { x, weights } => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, weights.map(|w| w * gv));
            }
        }
    }
}

#[inline]
fn sigmoid<T: Element>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Source taps for ×2 half-pixel bilinear resampling along one axis:
/// `(lower index, upper index, upper weight)` per output position.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n.saturating_sub(1));
            let i1 = (i0 + 1).min(n.saturating_sub(1));
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

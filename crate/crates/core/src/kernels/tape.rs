//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its forward value plus whatever it needs
//! for the backward sweep. Parameters are borrowed from a [`ParamStore`]
//! rather than copied, and their gradients land in a [`Gradients`] buffer
//! indexed by [`ParamId`].

use std::borrow::Cow;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::kernels::mask::AttentionMask;
use crate::kernels::params::{Gradients, ParamId, ParamStore};
use crate::kernels::tensor::{log_sum_exp, softmax_in_place, Scalar, Tensor};

pub const RMS_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, F),
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<F>,
    },
    SwiGlu {
        gate: Var,
        up: Var,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Var, Var),
    SegmentMean {
        x: Var,
        spans: Vec<Range<usize>>,
    },
    Rotary {
        x: Var,
        cos: Vec<F>,
        sin: Vec<F>,
        heads: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        ranges: Vec<Range<usize>>,
        offsets: Vec<usize>,
        probs: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    SumRows {
        x: Var,
        rows: Range<usize>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<F>,
    },
    AddScalars(Vec<Var>),
}

struct Node<'p, F: Scalar> {
    value: Cow<'p, Tensor<F>>,
    op: Op<F>,
    needs_grad: bool,
}

pub struct Tape<'p, F: Scalar> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<'p, F>>,
}

fn shape_err(msg: String) -> Error {
    Error::Shape(msg)
}

impl<'p, F: Scalar> Tape<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
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

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(self.params.get(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a · b` with `a: n×k`, `b: k×m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!(
                "add {:?} + {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let mut out = self.value(x).clone();
        out.scale(s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// Root-mean-square normalization of each row with a learned `1×d` scale.
    pub fn rms_norm(&mut self, x: Var, weight: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(weight));
        let d = vx.cols();
        if vw.shape() != [1, d] {
            return Err(shape_err(format!(
                "rms_norm weight {:?} for width {d}",
                vw.shape()
            )));
        }
        let eps = F::of(RMS_EPS);
        let mut out = Tensor::zeros(vx.rows(), d);
        let mut inv_rms = Vec::with_capacity(vx.rows());
        let w = vw.row(0);
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let ms = row.iter().map(|&v| v * v).sum::<F>() / F::of(d as f64);
            let inv = F::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &g) in out.row_mut(r).iter_mut().zip(row).zip(w) {
                *o = v * inv * g;
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, weight, inv_rms }, &[x, weight]))
    }

    /// `silu(gate) * up`, elementwise.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        let (vg, vu) = (self.value(gate), self.value(up));
        if vg.shape() != vu.shape() {
            return Err(shape_err(format!(
                "swiglu {:?} vs {:?}",
                vg.shape(),
                vu.shape()
            )));
        }
        let data = vg
            .data()
            .iter()
            .zip(vu.data())
            .map(|(&g, &u)| silu(g) * u)
            .collect();
        let out = Tensor::from_vec(vg.rows(), vg.cols(), data)?;
        Ok(self.push(out, Op::SwiGlu { gate, up }, &[gate, up]))
    }

    /// Rows of `x` picked by `index` (repeats allowed). Embedding lookup,
    /// slicing and the patch-to-token copy are all gathers.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        let mut out = Tensor::zeros(index.len(), cols);
        for (o, &i) in index.iter().enumerate() {
            if i >= vx.rows() {
                return Err(shape_err(format!("gather row {i} of {}", vx.rows())));
            }
            out.row_mut(o).copy_from_slice(vx.row(i));
        }
        Ok(self.push(out, Op::GatherRows { x, index }, &[x]))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(shape_err(format!(
                "concat {:?} with {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let out = Tensor::from_vec(va.rows() + vb.rows(), va.cols(), data)?;
        Ok(self.push(out, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Mean of the rows in each span; one output row per span.
    pub fn segment_mean(&mut self, x: Var, spans: Vec<Range<usize>>) -> Result<Var> {
        let vx = self.value(x);
        let cols = vx.cols();
        let mut out = Tensor::zeros(spans.len(), cols);
        for (m, span) in spans.iter().enumerate() {
            if span.is_empty() || span.end > vx.rows() {
                return Err(shape_err(format!("segment {span:?} of {} rows", vx.rows())));
            }
            let inv = F::one() / F::of(span.len() as f64);
            let dst = out.row_mut(m);
            for r in span.clone() {
                for (d, &v) in dst.iter_mut().zip(vx.row(r)) {
                    *d += v * inv;
                }
            }
        }
        Ok(self.push(out, Op::SegmentMean { x, spans }, &[x]))
    }

    /// Rotates consecutive component pairs of every head by per-row angles.
    /// `angles` holds `rows × head_dim/2` entries.
    pub fn rotary(&mut self, x: Var, angles: &[F], heads: usize) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        if heads == 0 || cols % heads != 0 || !(cols / heads).is_multiple_of(2) {
            return Err(shape_err(format!("rotary width {cols} over {heads} heads")));
        }
        let half = cols / heads / 2;
        if angles.len() != rows * half {
            return Err(shape_err(format!(
                "rotary table has {} angles, need {}",
                angles.len(),
                rows * half
            )));
        }
        let cos: Vec<F> = angles.iter().map(|a| a.cos()).collect();
        let sin: Vec<F> = angles.iter().map(|a| a.sin()).collect();
        let mut out = vx.clone();
        rotate_rows(out.data_mut(), cols, heads, &cos, &sin, false);
        Ok(self.push(out, Op::Rotary { x, cos, sin, heads }, &[x]))
    }

    /// Multi-head scaled dot-product attention under `mask`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let width = vq.cols();
        if heads == 0 || width % heads != 0 || vk.cols() != width || vv.cols() != width {
            return Err(shape_err(format!(
                "attention widths q {} k {} v {} over {heads} heads",
                vq.cols(),
                vk.cols(),
                vv.cols()
            )));
        }
        if vk.rows() != vv.rows() {
            return Err(shape_err("attention key/value lengths differ".into()));
        }
        if mask.queries() != vq.rows() || mask.keys() != vk.rows() {
            return Err(Error::Mask(format!(
                "mask is {}x{}, attention is {}x{}",
                mask.queries(),
                mask.keys(),
                vq.rows(),
                vk.rows()
            )));
        }
        let ranges = mask.ranges()?;
        let mut offsets = Vec::with_capacity(ranges.len() + 1);
        let mut total = 0;
        for r in &ranges {
            offsets.push(total);
            total += r.len();
        }
        offsets.push(total);

        let hd = width / heads;
        let scale = F::one() / F::of(hd as f64).sqrt();
        let mut probs = vec![F::zero(); total * heads];
        let mut out = Tensor::zeros(vq.rows(), width);
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let head_probs = &mut probs[h * total..(h + 1) * total];
            for (i, range) in ranges.iter().enumerate() {
                let qi = &vq.row(i)[cols.clone()];
                let p = &mut head_probs[offsets[i]..offsets[i + 1]];
                for (pj, j) in p.iter_mut().zip(range.clone()) {
                    *pj = dot(qi, &vk.row(j)[cols.clone()]) * scale;
                }
                softmax_in_place(p);
                let o = &mut out.row_mut(i)[cols.clone()];
                for (&pj, j) in p.iter().zip(range.clone()) {
                    axpy(pj, &vv.row(j)[cols.clone()], o);
                }
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                ranges,
                offsets,
                probs,
            },
            &[q, k, v],
        ))
    }

    /// Per-row softmax cross-entropy, `−log softmax(logits_r)[target_r]`, as an `n×1` column.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let vl = self.value(logits);
        if targets.len() != vl.rows() {
            return Err(shape_err(format!(
                "{} targets for {} logit rows",
                targets.len(),
                vl.rows()
            )));
        }
        let vocab = vl.cols();
        let mut probs = vl.data().to_vec();
        let mut losses = Tensor::zeros(vl.rows(), 1);
        for (r, &t) in targets.iter().enumerate() {
            if t >= vocab {
                return Err(Error::Data(format!(
                    "target {t} outside vocabulary {vocab}"
                )));
            }
            let row = vl.row(r);
            losses.data_mut()[r] = log_sum_exp(row) - row[t];
            softmax_in_place(&mut probs[r * vocab..(r + 1) * vocab]);
        }
        Ok(self.push(
            losses,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            &[logits],
        ))
    }

    /// Sum of every element in `rows`, as a `1×1` scalar.
    pub fn sum_rows(&mut self, x: Var, rows: Range<usize>) -> Result<Var> {
        let vx = self.value(x);
        if rows.end > vx.rows() || rows.start > rows.end {
            return Err(shape_err(format!("sum rows {rows:?} of {}", vx.rows())));
        }
        let cols = vx.cols();
        let s: F = vx.data()[rows.start * cols..rows.end * cols]
            .iter()
            .copied()
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::SumRows { x, rows }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let rows = self.value(x).rows();
        self.sum_rows(x, 0..rows).expect("full range")
    }

    /// `Σ x ⊙ w` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<F>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != weights.shape() {
            return Err(shape_err(format!(
                "weighted sum {:?} by {:?}",
                vx.shape(),
                weights.shape()
            )));
        }
        let s = dot(vx.data(), weights.data());
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            &[x],
        ))
    }

    pub fn add_scalars(&mut self, xs: Vec<Var>) -> Result<Var> {
        let mut s = F::zero();
        for &x in &xs {
            let v = self.value(x);
            if v.shape() != [1, 1] {
                return Err(shape_err(format!("add_scalars got {:?}", v.shape())));
            }
            s += v.item();
        }
        let inputs = xs.clone();
        Ok(self.push(Tensor::scalar(s), Op::AddScalars(xs), &inputs))
    }

    /// Back-propagates from a `1×1` output and returns parameter gradients.
    pub fn backward(&self, output: Var) -> Result<Gradients<F>> {
        let out = self.value(output);
        if out.shape() != [1, 1] {
            return Err(shape_err(format!(
                "backward from non-scalar {:?}",
                out.shape()
            )));
        }
        let mut params = Gradients::new(self.params.len());
        let mut grads: Vec<Option<Tensor<F>>> = (0..=output.0).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(F::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, g, &mut grads, &mut params);
        }
        Ok(params)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor<F>>], v: Var) -> &'g mut Tensor<F> {
        let [r, c] = self.value(v).shape();
        grads[v.0].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn backward_node(
        &self,
        node: &Node<'p, F>,
        g: Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
        params: &mut Gradients<F>,
    ) {
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => params.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                if self.wants(*a) {
                    // dA += dC · Bᵀ
                    let da = self.slot(grads, *a);
                    F::gemm(
                        n,
                        m,
                        k,
                        F::one(),
                        g.data(),
                        m as isize,
                        1,
                        vb.data(),
                        1,
                        m as isize,
                        F::one(),
                        da.data_mut(),
                        k as isize,
                        1,
                    );
                }
                if self.wants(*b) {
                    // dB += Aᵀ · dC
                    let db = self.slot(grads, *b);
                    F::gemm(
                        k,
                        n,
                        m,
                        F::one(),
                        va.data(),
                        1,
                        k as isize,
                        g.data(),
                        m as isize,
                        1,
                        F::one(),
                        db.data_mut(),
                        m as isize,
                        1,
                    );
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.slot(grads, *a).add_assign(&g);
                }
                if self.wants(*b) {
                    self.slot(grads, *b).add_assign(&g);
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    let dx = self.slot(grads, *x);
                    for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv * *s;
                    }
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let (vx, vw) = (self.value(*x), self.value(*weight));
                let d = vx.cols();
                let w = vw.row(0);
                if self.wants(*weight) {
                    let dw = self.slot(grads, *weight);
                    let dw = dw.row_mut(0);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for ((acc, &xv), &gv) in dw.iter_mut().zip(vx.row(r)).zip(g.row(r)) {
                            *acc += gv * xv * inv;
                        }
                    }
                }
                if self.wants(*x) {
                    let dx = self.slot(grads, *x);
                    let inv_d = F::one() / F::of(d as f64);
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = vx.row(r);
                        let gr = g.row(r);
                        // dot of (g ⊙ w) with x
                        let gwx: F = gr
                            .iter()
                            .zip(w)
                            .zip(xr)
                            .map(|((&gv, &wv), &xv)| gv * wv * xv)
                            .sum();
                        let coef = gwx * inv * inv * inv * inv_d;
                        for (((dv, &gv), &wv), &xv) in
                            dx.row_mut(r).iter_mut().zip(gr).zip(w).zip(xr)
                        {
                            *dv += gv * wv * inv - xv * coef;
                        }
                    }
                }
            }
            Op::SwiGlu { gate, up } => {
                let (vg, vu) = (self.value(*gate), self.value(*up));
                if self.wants(*gate) {
                    let dg = self.slot(grads, *gate);
                    for (((d, &gv), &a), &u) in dg
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(vg.data())
                        .zip(vu.data())
                    {
                        *d += gv * u * silu_grad(a);
                    }
                }
                if self.wants(*up) {
                    let du = self.slot(grads, *up);
                    for ((d, &gv), &a) in du.data_mut().iter_mut().zip(g.data()).zip(vg.data()) {
                        *d += gv * silu(a);
                    }
                }
            }
            Op::GatherRows { x, index } => {
                if let Op::Param(id) = self.nodes[x.0].op {
                    let [r, c] = self.value(*x).shape();
                    let dst = params.slot(id, r, c);
                    scatter_add(dst, &g, index);
                } else if self.wants(*x) {
                    let dst = self.slot(grads, *x);
                    scatter_add(dst, &g, index);
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                if self.wants(*a) {
                    for (d, &gv) in self
                        .slot(grads, *a)
                        .data_mut()
                        .iter_mut()
                        .zip(&g.data()[..split])
                    {
                        *d += gv;
                    }
                }
                if self.wants(*b) {
                    for (d, &gv) in self
                        .slot(grads, *b)
                        .data_mut()
                        .iter_mut()
                        .zip(&g.data()[split..])
                    {
                        *d += gv;
                    }
                }
            }
            Op::SegmentMean { x, spans } => {
                if self.wants(*x) {
                    let dx = self.slot(grads, *x);
                    for (m, span) in spans.iter().enumerate() {
                        let inv = F::one() / F::of(span.len() as f64);
                        for r in span.clone() {
                            axpy(inv, g.row(m), dx.row_mut(r));
                        }
                    }
                }
            }
            Op::Rotary { x, cos, sin, heads } => {
                if self.wants(*x) {
                    let mut back = g;
                    let cols = back.cols();
                    rotate_rows(back.data_mut(), cols, *heads, cos, sin, true);
                    self.slot(grads, *x).add_assign(&back);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                ranges,
                offsets,
                probs,
            } => self.attention_backward((*q, *k, *v), *heads, ranges, offsets, probs, &g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let dl = self.slot(grads, *logits);
                    let vocab = dl.cols();
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g.data()[r];
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        let row = dl.row_mut(r);
                        for (d, &pv) in row.iter_mut().zip(p) {
                            *d += gr * pv;
                        }
                        row[t] -= gr;
                    }
                }
            }
            Op::SumRows { x, rows } => {
                if self.wants(*x) {
                    let s = g.item();
                    let dx = self.slot(grads, *x);
                    let cols = dx.cols();
                    for d in &mut dx.data_mut()[rows.start * cols..rows.end * cols] {
                        *d += s;
                    }
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.wants(*x) {
                    let s = g.item();
                    axpy(s, weights, self.slot(grads, *x).data_mut());
                }
            }
            Op::AddScalars(xs) => {
                for &x in xs {
                    if self.wants(x) {
                        self.slot(grads, x).data_mut()[0] += g.item();
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        (q, k, v): (Var, Var, Var),
        heads: usize,
        ranges: &[Range<usize>],
        offsets: &[usize],
        probs: &[F],
        g: &Tensor<F>,
        grads: &mut [Option<Tensor<F>>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let width = vq.cols();
        let hd = width / heads;
        let scale = F::one() / F::of(hd as f64).sqrt();
        let total = *offsets.last().unwrap_or(&0);

        let mut dq = Tensor::zeros(vq.rows(), width);
        let mut dk = Tensor::zeros(vk.rows(), width);
        let mut dv = Tensor::zeros(vv.rows(), width);
        let mut ds = Vec::new();
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            let head_probs = &probs[h * total..(h + 1) * total];
            for (i, range) in ranges.iter().enumerate() {
                let p = &head_probs[offsets[i]..offsets[i + 1]];
                let go = &g.row(i)[cols.clone()];
                ds.clear();
                let mut weighted = F::zero();
                for (&pj, j) in p.iter().zip(range.clone()) {
                    let dp = dot(go, &vv.row(j)[cols.clone()]);
                    weighted += pj * dp;
                    ds.push(dp);
                    axpy(pj, go, &mut dv.row_mut(j)[cols.clone()]);
                }
                let qi = &vq.row(i)[cols.clone()];
                for ((dsj, &pj), j) in ds.iter_mut().zip(p).zip(range.clone()) {
                    *dsj = pj * (*dsj - weighted) * scale;
                    axpy(
                        *dsj,
                        &vk.row(j)[cols.clone()],
                        &mut dq.row_mut(i)[cols.clone()],
                    );
                    axpy(*dsj, qi, &mut dk.row_mut(j)[cols.clone()]);
                }
            }
        }
        if self.wants(q) {
            self.slot(grads, q).add_assign(&dq);
        }
        if self.wants(k) {
            self.slot(grads, k).add_assign(&dk);
        }
        if self.wants(v) {
            self.slot(grads, v).add_assign(&dv);
        }
    }
}

fn silu<F: Scalar>(x: F) -> F {
    x / (F::one() + (-x).exp())
}

fn silu_grad<F: Scalar>(x: F) -> F {
    let s = F::one() / (F::one() + (-x).exp());
    s * (F::one() + x * (F::one() - s))
}

pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

fn scatter_add<F: Scalar>(dst: &mut Tensor<F>, g: &Tensor<F>, index: &[usize]) {
    for (o, &i) in index.iter().enumerate() {
        axpy(F::one(), g.row(o), dst.row_mut(i));
    }
}

fn rotate_rows<F: Scalar>(
    data: &mut [F],
    cols: usize,
    heads: usize,
    cos: &[F],
    sin: &[F],
    inverse: bool,
) {
    let hd = cols / heads;
    let half = hd / 2;
    for (r, row) in data.chunks_exact_mut(cols).enumerate() {
        let (c_row, s_row) = (
            &cos[r * half..(r + 1) * half],
            &sin[r * half..(r + 1) * half],
        );
        for head in row.chunks_exact_mut(hd) {
            for (pair, (&c, &s)) in head.chunks_exact_mut(2).zip(c_row.iter().zip(s_row)) {
                let s = if inverse { -s } else { s };
                let (a, b) = (pair[0], pair[1]);
                pair[0] = c * a - s * b;
                pair[1] = s * a + c * b;
            }
        }
    }
}

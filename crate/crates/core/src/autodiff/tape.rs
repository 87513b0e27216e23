use std::collections::HashMap;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    ParamRow {
        param: ParamId,
        row: usize,
    },
    Affine {
        x: usize,
        w: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    SoftmaxXent {
        logits: usize,
        target: usize,
        probs: Vec<f64>,
    },
    BceLogits {
        x: usize,
        target: f64,
    },
    Conv {
        x: usize,
        filters: usize,
        pad: usize,
        window: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Concat(Vec<usize>),
    GradReverse(usize),
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    Dot(usize, usize),
    Scale(usize, f64),
    Sum(Vec<usize>),
}

/// One recorded forward computation.
///
/// Nodes are appended in evaluation order and may only reference earlier
/// nodes, so the record is acyclic and reverse insertion order is a valid
/// topological order for the backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Vec<f64>>,
    needs_grad: Vec<bool>,
    ops: Vec<Op>,
    param_vars: HashMap<ParamId, Var>,
    row_vars: HashMap<(ParamId, usize), Var>,
}

const NO_ARGMAX: usize = usize::MAX;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.grads[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0].item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let id = self.values.len();
        self.grads.push(vec![0.0; value.len()]);
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        self.ops.push(op);
        Var(id)
    }

    fn ng(&self, i: usize) -> bool {
        self.needs_grad[i]
    }

    /// Input that receives a gradient (useful for checking derivatives with
    /// respect to data).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Registers a parameter on the tape; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id), true);
        self.param_vars.insert(id, v);
        v
    }

    /// Reads a single row of a matrix parameter without copying the rest.
    pub fn param_row(&mut self, store: &ParamStore, id: ParamId, row: usize) -> Result<Var> {
        if let Some(&v) = self.row_vars.get(&(id, row)) {
            return Ok(v);
        }
        let p = store.get(id);
        let (rows, _) = p.value.rows_cols();
        if row >= rows {
            return Err(Error::Index {
                index: row,
                len: rows,
                context: "parameter row",
            });
        }
        let v = self.push(
            Tensor::vector(p.value.row(row).to_vec()),
            Op::ParamRow { param: id, row },
            true,
        );
        self.row_vars.insert((id, row), v);
        Ok(v)
    }

    /// `w · x` for `x` of length `n_in` and `w` of shape `[n_out, n_in]`.
    pub fn affine(&mut self, x: Var, w: Var) -> Result<Var> {
        let xv = &self.values[x.0];
        let wv = &self.values[w.0];
        let (n_out, n_in) = match wv.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(Error::Shape(format!(
                    "affine weight must be 2-D, got {s:?} (input {:?})",
                    xv.shape()
                )))
            }
        };
        if xv.len() != n_in {
            return Err(Error::Shape(format!(
                "affine input {:?} vs weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let xd = xv.data();
        let wd = wv.data();
        let out: Vec<f64> = (0..n_out)
            .map(|i| dot(&wd[i * n_in..(i + 1) * n_in], xd))
            .collect();
        let ng = self.ng(x.0) || self.ng(w.0);
        Ok(self.push(Tensor::vector(out), Op::Affine { x: x.0, w: w.0 }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x.0);
        self.push(t, Op::Relu(x.0), ng)
    }

    /// Elementwise logistic function.
    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let data = xv.data().iter().map(|&v| stable_sigmoid(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x.0);
        self.push(t, Op::Sigmoid(x.0), ng)
    }

    /// `-log softmax(logits)[target]`, a scalar.
    pub fn softmax_xent(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.values[logits.0].data();
        if target >= lv.len() {
            return Err(Error::Index {
                index: target,
                len: lv.len(),
                context: "softmax target",
            });
        }
        let probs = softmax(lv);
        let max = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv[target];
        let ng = self.ng(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits: logits.0,
                target,
                probs,
            },
            ng,
        ))
    }

    /// Binary cross-entropy of `sigmoid(x)` against `target` in `[0, 1]`,
    /// evaluated directly from the logit.
    pub fn bce_with_logits(&mut self, x: Var, target: f64) -> Result<Var> {
        let xv = &self.values[x.0];
        if xv.len() != 1 {
            return Err(Error::Shape(format!("bce expects a scalar logit, got {:?}", xv.shape())));
        }
        let z = xv.item();
        let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        let ng = self.ng(x.0);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { x: x.0, target }, ng))
    }

    /// Wide 1-D convolution with stride 1.
    ///
    /// `x` is `[n, d]`; `filters` is `[N, k*d]` (a bank of `N` filters) or a
    /// single filter of length `k*d`. The sequence is zero-padded with `pad`
    /// rows on each side, giving `n + 2*pad - k + 1` outputs per filter.
    /// Returns pre-activations of shape `[N, len]`, or `[len]` for a single
    /// filter.
    pub fn wide_conv1d(&mut self, x: Var, filters: Var, pad: usize) -> Result<Var> {
        let rows = match self.values[x.0].shape() {
            [n, _] => *n,
            [n] => *n,
            s => return Err(Error::Shape(format!("conv input must be [n, d], got {s:?}"))),
        };
        self.wide_conv1d_padded(x, filters, pad, rows)
    }

    /// Like [`Tape::wide_conv1d`], but treats `x` as if it had been extended
    /// with zero rows up to `seq_len` rows first.
    pub fn wide_conv1d_padded(
        &mut self,
        x: Var,
        filters: Var,
        pad: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let xv = &self.values[x.0];
        let fv = &self.values[filters.0];
        let (n, d) = match xv.shape() {
            [n, d] => (*n, *d),
            [n] => (*n, 1),
            s => return Err(Error::Shape(format!("conv input must be [n, d], got {s:?}"))),
        };
        let (n_filters, width, single) = match fv.shape() {
            [w] => (1, *w, true),
            [f, w] => (*f, *w, false),
            s => return Err(Error::Shape(format!("conv filters must be [N, k*d], got {s:?}"))),
        };
        if d == 0 || width % d != 0 || width == 0 {
            return Err(Error::Shape(format!(
                "filter width {width} is not a multiple of embedding dim {d} (input {:?}, filters {:?})",
                xv.shape(),
                fv.shape()
            )));
        }
        if seq_len < n {
            return Err(Error::Shape(format!("sequence length {seq_len} shorter than input rows {n}")));
        }
        let k = width / d;
        if seq_len + 2 * pad < k {
            return Err(Error::Shape(format!(
                "empty convolution output: n={seq_len}, pad={pad}, window={k}"
            )));
        }
        let out_len = seq_len + 2 * pad - k + 1;
        let xd = xv.data();
        let fd = fv.data();
        let mut out = vec![0.0; n_filters * out_len];
        for t in 0..out_len {
            for j in 0..k {
                let r = t + j;
                if r < pad || r - pad >= n {
                    continue;
                }
                let row = &xd[(r - pad) * d..(r - pad + 1) * d];
                for f in 0..n_filters {
                    let frow = &fd[f * width + j * d..f * width + (j + 1) * d];
                    out[f * out_len + t] += dot(frow, row);
                }
            }
        }
        let shape = if single { vec![out_len] } else { vec![n_filters, out_len] };
        let ng = self.ng(x.0) || self.ng(filters.0);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv {
                x: x.0,
                filters: filters.0,
                pad,
                window: k,
            },
            ng,
        ))
    }

    /// Max over every window of `window` consecutive features (stride 1),
    /// row by row for a 2-D input. Ties go to the lowest index.
    pub fn max_pool1d(&mut self, h: Var, window: usize) -> Result<Var> {
        let m = self.values[h.0].rows_cols().1;
        self.masked_max_pool1d(h, window, m)
    }

    /// Max pooling where positions `>= valid` in each row are treated as
    /// `-inf`. A window with no valid position outputs 0 and passes no
    /// gradient.
    pub fn masked_max_pool1d(&mut self, h: Var, window: usize, valid: usize) -> Result<Var> {
        let hv = &self.values[h.0];
        let (rows, m) = hv.rows_cols();
        if window == 0 || window > m {
            return Err(Error::Shape(format!(
                "pooling window {window} does not fit feature map of length {m}"
            )));
        }
        let out_len = m - window + 1;
        let hd = hv.data();
        let mut out = vec![0.0; rows * out_len];
        let mut argmax = vec![NO_ARGMAX; rows * out_len];
        for r in 0..rows {
            let row = &hd[r * m..(r + 1) * m];
            for t in 0..out_len {
                let mut best = NO_ARGMAX;
                let mut best_v = f64::NEG_INFINITY;
                for (s, &v) in row.iter().enumerate().skip(t).take(window) {
                    if s >= valid {
                        break;
                    }
                    if best == NO_ARGMAX || v > best_v {
                        best = s;
                        best_v = v;
                    }
                }
                if best != NO_ARGMAX {
                    out[r * out_len + t] = best_v;
                    argmax[r * out_len + t] = r * m + best;
                }
            }
        }
        let shape = if hv.shape().len() == 1 { vec![out_len] } else { vec![rows, out_len] };
        let ng = self.ng(h.0);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxPool { x: h.0, argmax }, ng))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        self.concat_all(&[a, b])
    }

    /// Flattens and concatenates all inputs into one vector.
    pub fn concat_all(&mut self, parts: &[Var]) -> Var {
        let total = parts.iter().map(|p| self.values[p.0].len()).sum();
        let mut out = Vec::with_capacity(total);
        for p in parts {
            out.extend_from_slice(self.values[p.0].data());
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(Tensor::vector(out), Op::Concat(parts.iter().map(|p| p.0).collect()), ng)
    }

    /// Identity forward, negated gradient backward.
    pub fn grad_reverse(&mut self, x: Var) -> Var {
        let t = self.values[x.0].clone();
        let ng = self.ng(x.0);
        self.push(t, Op::GradReverse(x.0), ng)
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let xv = &self.values[x.0];
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(x.0);
        Ok(self.push(t, Op::Dropout { x: x.0, mask }, ng))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        if av.len() != bv.len() {
            return Err(Error::Shape(format!("dot of {:?} and {:?}", av.shape(), bv.shape())));
        }
        let v = dot(av.data(), bv.data());
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(Tensor::scalar(v), Op::Dot(a.0, b.0), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = &self.values[x.0];
        let data = xv.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(x.0);
        self.push(t, Op::Scale(x.0, c), ng)
    }

    /// Elementwise sum of same-shaped values.
    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("sum of zero values".into()))?;
        let shape = self.values[first.0].shape().to_vec();
        let mut out = vec![0.0; self.values[first.0].len()];
        for p in parts {
            let pv = &self.values[p.0];
            if pv.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("sum of {:?} and {:?}", shape, pv.shape())));
            }
            for (o, v) in out.iter_mut().zip(pv.data()) {
                *o += v;
            }
        }
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(Tensor::new(shape, out)?, Op::Sum(parts.iter().map(|p| p.0).collect()), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.sum(&[a, b])
    }

    /// Arithmetic mean of same-shaped values.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let s = self.sum(parts)?;
        Ok(self.scale(s, 1.0 / parts.len() as f64))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every node's
    /// gradient buffer.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.grads[loss.0][0] += 1.0;
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            if g.iter().all(|&v| v == 0.0) {
                self.grads[i] = g;
                continue;
            }
            self.backward_node(i, &g);
            self.grads[i] = g;
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) {
        let Tape {
            values,
            grads,
            needs_grad,
            ops,
            ..
        } = self;
        match &ops[i] {
            Op::Leaf | Op::Param(_) | Op::ParamRow { .. } => {}
            Op::Affine { x, w } => {
                let (x, w) = (*x, *w);
                let xd = values[x].data();
                let wd = values[w].data();
                let n_in = xd.len();
                if needs_grad[w] {
                    let gw = &mut grads[w];
                    for (r, &gi) in g.iter().enumerate() {
                        if gi == 0.0 {
                            continue;
                        }
                        for (gwv, &xv) in gw[r * n_in..(r + 1) * n_in].iter_mut().zip(xd) {
                            *gwv += gi * xv;
                        }
                    }
                }
                if needs_grad[x] {
                    let gx = &mut grads[x];
                    for (r, &gi) in g.iter().enumerate() {
                        if gi == 0.0 {
                            continue;
                        }
                        for (gxv, &wv) in gx.iter_mut().zip(&wd[r * n_in..(r + 1) * n_in]) {
                            *gxv += gi * wv;
                        }
                    }
                }
            }
            Op::Relu(x) => {
                let x = *x;
                let xd = values[x].data();
                for ((gx, &xv), &gi) in grads[x].iter_mut().zip(xd).zip(g) {
                    if xv > 0.0 {
                        *gx += gi;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let yd = values[i].data();
                for ((gx, &y), &gi) in grads[x].iter_mut().zip(yd).zip(g) {
                    *gx += gi * y * (1.0 - y);
                }
            }
            Op::SoftmaxXent {
                logits,
                target,
                probs,
            } => {
                let gl = &mut grads[*logits];
                for (k, (gv, &p)) in gl.iter_mut().zip(probs).enumerate() {
                    let onehot = if k == *target { 1.0 } else { 0.0 };
                    *gv += g[0] * (p - onehot);
                }
            }
            Op::BceLogits { x, target } => {
                let z = values[*x].item();
                grads[*x][0] += g[0] * (stable_sigmoid(z) - target);
            }
            Op::Conv {
                x,
                filters,
                pad,
                window,
            } => {
                let (x, filters, pad, k) = (*x, *filters, *pad, *window);
                let (n, d) = match values[x].shape() {
                    [n, d] => (*n, *d),
                    [n] => (*n, 1),
                    _ => unreachable!(),
                };
                let width = k * d;
                let n_filters = values[filters].len() / width;
                let out_len = g.len() / n_filters;
                let xd = values[x].data();
                let fd = values[filters].data();
                if needs_grad[filters] {
                    let gf = &mut grads[filters];
                    for t in 0..out_len {
                        for j in 0..k {
                            let r = t + j;
                            if r < pad || r - pad >= n {
                                continue;
                            }
                            let row = &xd[(r - pad) * d..(r - pad + 1) * d];
                            for f in 0..n_filters {
                                let go = g[f * out_len + t];
                                if go == 0.0 {
                                    continue;
                                }
                                let base = f * width + j * d;
                                for (gv, &xv) in gf[base..base + d].iter_mut().zip(row) {
                                    *gv += go * xv;
                                }
                            }
                        }
                    }
                }
                if needs_grad[x] {
                    let gx = &mut grads[x];
                    for t in 0..out_len {
                        for j in 0..k {
                            let r = t + j;
                            if r < pad || r - pad >= n {
                                continue;
                            }
                            let gxrow = &mut gx[(r - pad) * d..(r - pad + 1) * d];
                            for f in 0..n_filters {
                                let go = g[f * out_len + t];
                                if go == 0.0 {
                                    continue;
                                }
                                let base = f * width + j * d;
                                for (gv, &fv) in gxrow.iter_mut().zip(&fd[base..base + d]) {
                                    *gv += go * fv;
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                let gx = &mut grads[*x];
                for (&a, &gi) in argmax.iter().zip(g) {
                    if a != NO_ARGMAX {
                        gx[a] += gi;
                    }
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = values[p].len();
                    if needs_grad[p] {
                        for (gv, &gi) in grads[p].iter_mut().zip(&g[offset..offset + len]) {
                            *gv += gi;
                        }
                    }
                    offset += len;
                }
            }
            Op::GradReverse(x) => {
                for (gv, &gi) in grads[*x].iter_mut().zip(g) {
                    *gv -= gi;
                }
            }
            Op::Dropout { x, mask } => {
                for ((gv, &gi), &m) in grads[*x].iter_mut().zip(g).zip(mask) {
                    *gv += gi * m;
                }
            }
            Op::Dot(a, b) => {
                let (a, b) = (*a, *b);
                if needs_grad[a] {
                    let bd = values[b].data();
                    for (gv, &bv) in grads[a].iter_mut().zip(bd) {
                        *gv += g[0] * bv;
                    }
                }
                if needs_grad[b] {
                    let ad = values[a].data();
                    for (gv, &av) in grads[b].iter_mut().zip(ad) {
                        *gv += g[0] * av;
                    }
                }
            }
            Op::Scale(x, c) => {
                for (gv, &gi) in grads[*x].iter_mut().zip(g) {
                    *gv += gi * c;
                }
            }
            Op::Sum(parts) => {
                for &p in parts {
                    if needs_grad[p] {
                        for (gv, &gi) in grads[p].iter_mut().zip(g) {
                            *gv += gi;
                        }
                    }
                }
            }
        }
    }

    /// Adds the gradients of every parameter node into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (i, op) in self.ops.iter().enumerate() {
            match op {
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    if p.sparse_rows {
                        let (rows, cols) = p.value.rows_cols();
                        for r in 0..rows {
                            let gsrc = &self.grads[i][r * cols..(r + 1) * cols];
                            if gsrc.iter().any(|&v| v != 0.0) {
                                p.mark_row(r);
                                for (d, s) in p.grad[r * cols..(r + 1) * cols].iter_mut().zip(gsrc) {
                                    *d += s;
                                }
                            }
                        }
                    } else {
                        for (d, s) in p.grad.iter_mut().zip(&self.grads[i]) {
                            *d += s;
                        }
                    }
                }
                Op::ParamRow { param, row } => {
                    let p = store.get_mut(*param);
                    let (_, cols) = p.value.rows_cols();
                    if p.sparse_rows {
                        p.mark_row(*row);
                    }
                    for (d, s) in p.grad[row * cols..(row + 1) * cols].iter_mut().zip(&self.grads[i]) {
                        *d += s;
                    }
                }
                _ => {}
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    /// Central finite differences of `f` around `x`.
    fn numeric_grad(x: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-3;
        let mut xp = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = xp[i];
                xp[i] = orig + h;
                let up = f(&xp);
                xp[i] = orig - h;
                let down = f(&xp);
                xp[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64]) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let err = if a.abs() < 1e-6 && n.abs() < 1e-6 {
                (a - n).abs()
            } else {
                (a - n).abs() / a.abs().max(n.abs())
            };
            assert!(err < 1e-4, "element {i}: analytic {a} vs numeric {n} (err {err})");
        }
    }

    fn random_vec(rng: &mut crate::rng::Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn affine_identity_and_weights() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let w = t.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = t.affine(x, w).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);

        let x = t.leaf(Tensor::vector(vec![1.0, 1.0]));
        let w = t.leaf(Tensor::matrix(1, 2, vec![2.0, 3.0]).unwrap());
        let y = t.affine(x, w).unwrap();
        assert_eq!(t.value(y).data(), &[5.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let w = t.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let msg = t.affine(x, w).unwrap_err().to_string();
        assert!(msg.contains("[3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut rng = SeedStreams::new(1).stream("test");
        let x0 = random_vec(&mut rng, 4);
        let w0 = random_vec(&mut rng, 12);
        let run = |x: &[f64], w: &[f64]| {
            let mut t = Tape::new();
            let xv = t.leaf(Tensor::vector(x.to_vec()));
            let wv = t.leaf(Tensor::matrix(3, 4, w.to_vec()).unwrap());
            let y = t.affine(xv, wv).unwrap();
            let ones = t.constant(Tensor::vector(vec![1.0; 3]));
            let s = t.dot(y, ones).unwrap();
            (t, xv, wv, s)
        };
        let (mut t, xv, wv, s) = run(&x0, &w0);
        t.backward(s).unwrap();
        let num_w = numeric_grad(&w0, &|w| {
            let (t, .., s) = run(&x0, w);
            t.scalar(s)
        });
        let num_x = numeric_grad(&x0, &|x| {
            let (t, .., s) = run(x, &w0);
            t.scalar(s)
        });
        assert_close(t.grad(wv), &num_w);
        assert_close(t.grad(xv), &num_x);
    }

    #[test]
    fn relu_forward_and_mask() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let y = t.relu(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 2.0]);
        let x2 = t.leaf(Tensor::vector(vec![-3.0, -0.5]));
        let y2 = t.relu(x2);
        assert_eq!(t.value(y2).data(), &[0.0, 0.0]);

        let w = t.constant(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let s = t.dot(y, w).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_gradient_matches_finite_differences_away_from_zero() {
        let mut rng = SeedStreams::new(2).stream("test");
        let x0: Vec<f64> = random_vec(&mut rng, 10)
            .into_iter()
            .map(|v| if v.abs() < 0.01 { 0.5 } else { v })
            .collect();
        let run = |x: &[f64]| {
            let mut t = Tape::new();
            let xv = t.leaf(Tensor::vector(x.to_vec()));
            let y = t.relu(xv);
            let c = t.constant(Tensor::vector((1..=10).map(f64::from).collect()));
            let s = t.dot(y, c).unwrap();
            (t, xv, s)
        };
        let (mut t, xv, s) = run(&x0);
        t.backward(s).unwrap();
        let num = numeric_grad(&x0, &|x| {
            let (t, _, s) = run(x);
            t.scalar(s)
        });
        assert_close(t.grad(xv), &num);
        for (g, x) in t.grad(xv).iter().zip(&x0) {
            assert_eq!(*g != 0.0, *x > 0.0);
        }
    }

    #[test]
    fn sigmoid_values_and_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(0.0));
        let y = t.sigmoid(x);
        assert_eq!(t.scalar(y), 0.5);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x)[0], 0.25);
        let num = numeric_grad(&[0.0], &|x| stable_sigmoid(x[0]));
        assert!((num[0] - 0.25).abs() < 1e-6);

        let big = t.leaf(Tensor::scalar(1000.0));
        let yb = t.sigmoid(big);
        let v = t.scalar(yb);
        assert!(v > 1.0 - 1e-12 && v <= 1.0);
        let small = t.leaf(Tensor::scalar(-1000.0));
        let ys = t.sigmoid(small);
        assert!(t.scalar(ys).is_finite() && t.scalar(ys) >= 0.0);
    }

    #[test]
    fn softmax_xent_values() {
        let mut t = Tape::new();
        let l = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let loss = t.softmax_xent(l, 0).unwrap();
        assert!((t.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);
        let l = t.leaf(Tensor::vector(vec![10.0, -10.0]));
        let loss = t.softmax_xent(l, 0).unwrap();
        assert!(t.scalar(loss) < 1e-8);
        assert!(matches!(t.softmax_xent(l, 2), Err(Error::Index { .. })));
    }

    #[test]
    fn softmax_xent_gradient_is_probs_minus_onehot() {
        let mut rng = SeedStreams::new(3).stream("test");
        let l0 = random_vec(&mut rng, 5);
        let run = |l: &[f64]| {
            let mut t = Tape::new();
            let lv = t.leaf(Tensor::vector(l.to_vec()));
            let loss = t.softmax_xent(lv, 3).unwrap();
            (t, lv, loss)
        };
        let (mut t, lv, loss) = run(&l0);
        t.backward(loss).unwrap();
        let num = numeric_grad(&l0, &|l| {
            let (t, _, loss) = run(l);
            t.scalar(loss)
        });
        assert_close(t.grad(lv), &num);
        let p = softmax(&l0);
        for (k, (g, pk)) in t.grad(lv).iter().zip(&p).enumerate() {
            let expected = pk - if k == 3 { 1.0 } else { 0.0 };
            assert!((g - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn bce_with_logits_matches_definition() {
        for &(z, target) in &[(0.3, 1.0), (-2.0, 0.0), (40.0, 1.0), (-40.0, 1.0), (0.0, 0.0)] {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::scalar(z));
            let l = t.bce_with_logits(x, target).unwrap();
            let s: f64 = stable_sigmoid(z);
            let expected = -(target * s.ln() + (1.0 - target) * (1.0 - s).ln());
            if expected.is_finite() && expected < 30.0 {
                assert!((t.scalar(l) - expected).abs() < 1e-9, "z={z}");
            }
            t.backward(l).unwrap();
            let num = numeric_grad(&[z], &|x| {
                let mut t = Tape::new();
                let v = t.leaf(Tensor::scalar(x[0]));
                let l = t.bce_with_logits(v, target).unwrap();
                t.scalar(l)
            });
            assert_close(t.grad(x), &num);
        }
    }

    #[test]
    fn wide_conv_hand_example() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let f = t.leaf(Tensor::vector(vec![1.0, 1.0]));
        let y = t.wide_conv1d(x, f, 1).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 3.0, 5.0, 3.0]);

        let z = t.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = t.wide_conv1d(x, z, 1).unwrap();
        assert_eq!(t.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn wide_conv_rejects_empty_output() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let f = t.leaf(Tensor::vector(vec![0.0; 6]));
        assert!(matches!(t.wide_conv1d(x, f, 0), Err(Error::Shape(_))));
        assert!(t.wide_conv1d(x, f, 1).is_ok());
    }

    #[test]
    fn wide_conv_gradients_match_finite_differences() {
        let mut rng = SeedStreams::new(4).stream("test");
        let (n, d, k, nf, pad) = (5, 3, 3, 2, 2);
        let x0 = random_vec(&mut rng, n * d);
        let f0 = random_vec(&mut rng, nf * k * d);
        let out_len = n + 2 * pad - k + 1;
        let c0 = random_vec(&mut rng, nf * out_len);
        let run = |x: &[f64], f: &[f64]| {
            let mut t = Tape::new();
            let xv = t.leaf(Tensor::matrix(n, d, x.to_vec()).unwrap());
            let fv = t.leaf(Tensor::matrix(nf, k * d, f.to_vec()).unwrap());
            let y = t.wide_conv1d(xv, fv, pad).unwrap();
            let c = t.constant(Tensor::vector(c0.clone()));
            let s = t.dot(y, c).unwrap();
            (t, xv, fv, s)
        };
        let (mut t, xv, fv, s) = run(&x0, &f0);
        t.backward(s).unwrap();
        let num_x = numeric_grad(&x0, &|x| {
            let (t, .., s) = run(x, &f0);
            t.scalar(s)
        });
        let num_f = numeric_grad(&f0, &|f| {
            let (t, .., s) = run(&x0, f);
            t.scalar(s)
        });
        assert_close(t.grad(xv), &num_x);
        assert_close(t.grad(fv), &num_f);
    }

    #[test]
    fn padded_conv_equals_conv_on_explicit_zero_rows() {
        let mut rng = SeedStreams::new(5).stream("test");
        let (n, d, k, seq) = (3, 2, 2, 6);
        let x0 = random_vec(&mut rng, n * d);
        let f0 = random_vec(&mut rng, 4 * k * d);
        let mut t = Tape::new();
        let xs = t.leaf(Tensor::matrix(n, d, x0.clone()).unwrap());
        let f = t.leaf(Tensor::matrix(4, k * d, f0).unwrap());
        let a = t.wide_conv1d_padded(xs, f, 1, seq).unwrap();
        let mut full = x0;
        full.resize(seq * d, 0.0);
        let xf = t.leaf(Tensor::matrix(seq, d, full).unwrap());
        let b = t.wide_conv1d(xf, f, 1).unwrap();
        assert_eq!(t.value(a), t.value(b));
    }

    #[test]
    fn max_pool_forward_and_routing() {
        let mut t = Tape::new();
        let h = t.leaf(Tensor::vector(vec![1.0, 3.0, 2.0]));
        let y = t.max_pool1d(h, 2).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 3.0]);
        let g = t.max_pool1d(h, 3).unwrap();
        assert_eq!(t.value(g).data(), &[3.0]);
        assert!(t.max_pool1d(h, 4).is_err());

        let ones = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let s = t.dot(y, ones).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(h), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn max_pool_ties_route_to_lowest_index() {
        let mut t = Tape::new();
        let h = t.leaf(Tensor::vector(vec![2.0, 2.0, 2.0]));
        let y = t.max_pool1d(h, 3).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(h), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn masked_pool_ignores_positions_past_valid_length() {
        let mut t = Tape::new();
        let h = t.leaf(Tensor::matrix(1, 5, vec![1.0, -2.0, 9.0, 7.0, 8.0]).unwrap());
        let y = t.masked_max_pool1d(h, 2, 2).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, -2.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_forward_and_split() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0]));
        let b = t.leaf(Tensor::vector(vec![2.0, 3.0]));
        let c = t.concat(a, b);
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0]);
        let e = t.leaf(Tensor::vector(vec![]));
        let c2 = t.concat(e, b);
        assert_eq!(t.value(c2).data(), &[2.0, 3.0]);

        let w = t.constant(Tensor::vector(vec![5.0, 6.0, 7.0]));
        let s = t.dot(c, w).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a), &[5.0]);
        assert_eq!(t.grad(b), &[6.0, 7.0]);
    }

    #[test]
    fn grad_reverse_negates() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let r = t.grad_reverse(x);
        assert_eq!(t.value(r).data(), &[1.0, 2.0]);
        let up = t.constant(Tensor::vector(vec![1.0, -2.0]));
        let s = t.dot(r, up).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), &[-1.0, 2.0]);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = SeedStreams::new(6).stream("dropout");
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0; 8]));
        assert_eq!(t.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(t.dropout(x, 0.5, &mut rng, false).unwrap(), x);
        assert!(matches!(t.dropout(x, 1.0, &mut rng, true), Err(Error::Config(_))));

        let n = 100_000;
        let big = t.leaf(Tensor::vector(vec![1.0; n]));
        let y = t.dropout(big, 0.02, &mut rng, true).unwrap();
        let zeros = t.value(y).data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / n as f64;
        assert!((frac - 0.02).abs() <= 0.005, "zero fraction {frac}");
        let kept = t.value(y).data().iter().find(|&&v| v != 0.0).unwrap();
        assert!((kept - 1.0 / 0.98).abs() < 1e-15);
    }

    #[test]
    fn param_rows_accumulate_sparsely() {
        let mut store = ParamStore::new();
        let id = store.add_row_sparse(
            "C",
            super::super::Group::Semisup,
            Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
        );
        let mut t = Tape::new();
        let r = t.param_row(&store, id, 1).unwrap();
        assert_eq!(t.value(r).data(), &[3.0, 4.0]);
        assert!(t.param_row(&store, id, 3).is_err());
        let w = t.constant(Tensor::vector(vec![1.0, -1.0]));
        let s = t.dot(r, w).unwrap();
        t.backward(s).unwrap();
        t.accumulate_param_grads(&mut store);
        assert_eq!(store.get(id).grad, vec![0.0, 0.0, 1.0, -1.0, 0.0, 0.0]);
        assert_eq!(store.get(id).touched, vec![1]);
    }
}

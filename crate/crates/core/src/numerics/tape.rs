//! Reverse-mode differentiation over a linear record of primitive calls.

use std::collections::BTreeMap;
use std::ops::Range;

use super::kernels::{self, record_macs};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Stability floor inside batch-norm and attentive-std square roots.
pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

enum Op {
    Input,
    Param { id: ParamId, ranges: Vec<Range<usize>> },
    Slice { x: Var, ranges: Vec<Range<usize>> },
    Concat { xs: Vec<Var>, axis: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Conv { x: Var, w: Var, b: Option<Var>, dilation: usize, groups: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Tensor, inv_std: Vec<f64>, train: bool },
    MeanTime(Var),
    ScaleChannels { x: Var, s: Var },
    TapMix { w: Var, m: Var },
    AttentiveStats { x: Var, logits: Var, weights: Tensor, mean: Vec<f64>, root: Vec<f64> },
    RowNormalize { x: Var, norms: Vec<f64> },
    AngularMargin { cos: Var, labels: Vec<usize>, margin: f64, scale: f64 },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradient of one stored array plus the elements a backward pass reached.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad {
    pub grad: Tensor,
    touched: Vec<bool>,
}

impl ParamGrad {
    fn new(shape: &[usize]) -> Self {
        let grad = Tensor::zeros(shape);
        let touched = vec![false; grad.len()];
        Self { grad, touched }
    }

    pub fn touched(&self) -> &[bool] {
        &self.touched
    }

    pub fn touched_count(&self) -> usize {
        self.touched.iter().filter(|t| **t).count()
    }

    fn add_region(&mut self, ranges: &[Range<usize>], g: &Tensor) -> Result<()> {
        self.grad.add_into_slice(ranges, g)?;
        let mut mask = Tensor::new(self.grad.shape().to_vec(), vec![0.0; self.grad.len()])?;
        mask.assign_slice(ranges, &Tensor::filled(g.shape(), 1.0))?;
        for (t, m) in self.touched.iter_mut().zip(mask.data()) {
            *t |= *m != 0.0;
        }
        Ok(())
    }

    fn merge(&mut self, other: &ParamGrad) {
        self.grad.add_assign(&other.grad);
        for (t, o) in self.touched.iter_mut().zip(&other.touched) {
            *t |= *o;
        }
    }
}

/// Per-array gradients keyed by parameter id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    entries: BTreeMap<ParamId, ParamGrad>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> Option<&ParamGrad> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamGrad)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sums another set of gradients into this one.
    pub fn merge(&mut self, other: &ParamGrads) {
        for (id, g) in &other.entries {
            match self.entries.get_mut(id) {
                Some(mine) => mine.merge(g),
                None => {
                    self.entries.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.entries.values_mut() {
            g.grad.data_mut().iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|g| g.grad.all_finite())
    }
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    pub params: ParamGrads,
}

impl Gradients {
    /// Gradient reaching `v`, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }
}

/// Records primitive applications reading parameters from a store.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Views a rank-2 or rank-3 array as `(batch, channels, frames)`.
fn bct(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [b, c] => Ok((*b, *c, 1)),
        [b, c, f] => Ok((*b, *c, *f)),
        s => Err(Error::shape(op, format!("expected rank 2 or 3, got {s:?}"))),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes agree")
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Input => false,
            Op::Param { .. } => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, &[])
    }

    /// Input whose gradient is recorded by [`Tape::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Input, &[]);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Whole stored array.
    pub fn param(&mut self, id: ParamId) -> Var {
        let ranges: Vec<_> = self.store.get(id).shape().iter().map(|n| 0..*n).collect();
        self.push(self.store.get(id).clone(), Op::Param { id, ranges }, &[])
    }

    /// Sub-block of a stored array; only the block receives gradient.
    pub fn param_slice(&mut self, id: ParamId, ranges: &[Range<usize>]) -> Result<Var> {
        let value = self.store.get(id).slice(ranges)?;
        Ok(self.push(value, Op::Param { id, ranges: ranges.to_vec() }, &[]))
    }

    pub fn slice(&mut self, x: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let value = self.value(x).slice(ranges)?;
        Ok(self.push(value, Op::Slice { x, ranges: ranges.to_vec() }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor> = xs.iter().map(|v| self.value(*v)).collect();
        let value = Tensor::concat(&parts, axis)?;
        Ok(self.push(value, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len().max(1) as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize, groups: usize) -> Result<Var> {
        let value = kernels::conv1d(self.value(x), self.value(w), b.map(|b| self.value(b)), dilation, groups)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv { x, w, b, dilation, groups }, &inputs))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let value = kernels::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    /// Per-channel normalization over batch and frames of a `[B,C]` or
    /// `[B,C,T]` input. Train mode uses (and returns) the batch statistics
    /// with biased variance; eval mode uses the supplied running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xt = self.value(x);
        let (b, c, t) = bct(xt, "batch_norm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("{c} channels vs affine {:?}/{:?}", self.value(gamma).shape(), self.value(beta).shape()),
            ));
        }
        let n = b * t;
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for (i, row) in xt.data().chunks(t).enumerate() {
                    mean[i % c] += row.iter().sum::<f64>();
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                for (i, row) in xt.data().chunks(t).enumerate() {
                    let m = mean[i % c];
                    var[i % c] += row.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: n,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval => {
                let (m, v) = running.ok_or_else(|| Error::InvalidArgument("eval batch norm needs running statistics".into()))?;
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm", format!("running stats of length {} for {c} channels", m.len())));
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xt.len()];
        let mut out = vec![0.0; xt.len()];
        for (i, (row, (hrow, orow))) in xt
            .data()
            .chunks(t)
            .zip(xhat.chunks_mut(t).zip(out.chunks_mut(t)))
            .enumerate()
        {
            let ch = i % c;
            for ((v, h), o) in row.iter().zip(hrow.iter_mut()).zip(orow.iter_mut()) {
                *h = (v - mean[ch]) * inv_std[ch];
                *o = g[ch] * *h + be[ch];
            }
        }
        let shape = xt.shape().to_vec();
        let xhat = Tensor::new(shape.clone(), xhat)?;
        let value = Tensor::new(shape, out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: mode == BnMode::Train,
        };
        Ok((self.push(value, op, &[x, gamma, beta]), stats))
    }

    /// `[B,C,T] -> [B,C]` average over frames.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let (b, c, t) = self.value(x).dims3()?;
        record_macs(b * c * t);
        let data = self.value(x).data().chunks(t).map(|r| r.iter().sum::<f64>() / t as f64).collect();
        let value = Tensor::new(vec![b, c], data)?;
        Ok(self.push(value, Op::MeanTime(x), &[x]))
    }

    /// Multiplies every frame of channel `c` in item `b` by `s[b,c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (b, c, t) = self.value(x).dims3()?;
        if self.value(s).shape() != [b, c] {
            return Err(Error::shape("scale_channels", format!("{:?} for input {:?}", self.value(s).shape(), [b, c, t])));
        }
        record_macs(b * c * t);
        let sd = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(t)
            .zip(sd)
            .flat_map(|(row, f)| row.iter().map(move |v| v * f))
            .collect();
        let value = Tensor::new(vec![b, c, t], data)?;
        Ok(self.push(value, Op::ScaleChannels { x, s }, &[x, s]))
    }

    /// Maps the tap vector of every channel pair through `m`:
    /// `out[o,i,:] = m · w[o,i,:]` for `w: [Co,Ci,k]`, `m: [k,k]`.
    pub fn tap_mix(&mut self, w: Var, m: Var) -> Result<Var> {
        let (_, _, k) = self.value(w).dims3()?;
        if self.value(m).shape() != [k, k] {
            return Err(Error::shape("tap_mix", format!("matrix {:?} for {k} taps", self.value(m).shape())));
        }
        let md = self.value(m).data();
        let mut out = vec![0.0; self.value(w).len()];
        for (src, dst) in self.value(w).data().chunks(k).zip(out.chunks_mut(k)) {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = (0..k).map(|l| md[j * k + l] * src[l]).sum();
            }
        }
        let value = Tensor::new(self.value(w).shape().to_vec(), out)?;
        Ok(self.push(value, Op::TapMix { w, m }, &[w, m]))
    }

    /// Softmax over frames of `logits`, then per-channel weighted mean and
    /// standard deviation of `x`; returns `[B, 2C]` as `(μ, σ)`.
    ///
    /// σ is `sqrt(var + ε) − sqrt(ε)`, which is exactly zero for a
    /// constant sequence and smooth everywhere.
    pub fn attentive_stats(&mut self, x: Var, logits: Var) -> Result<Var> {
        let (b, c, t) = self.value(x).dims3()?;
        same_shape("attentive_stats", self.value(x), self.value(logits))?;
        record_macs(2 * b * c * t);
        let mut weights = vec![0.0; b * c * t];
        let mut mean = vec![0.0; b * c];
        let mut root = vec![0.0; b * c];
        let mut out = vec![0.0; b * 2 * c];
        let xd = self.value(x).data();
        for (row, (lrow, wrow)) in self.value(logits).data().chunks(t).zip(weights.chunks_mut(t)).enumerate() {
            let peak = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (w, l) in wrow.iter_mut().zip(lrow) {
                *w = (l - peak).exp();
                z += *w;
            }
            wrow.iter_mut().for_each(|w| *w /= z);
            let xs = &xd[row * t..(row + 1) * t];
            let mu: f64 = wrow.iter().zip(xs).map(|(w, v)| w * v).sum();
            let var: f64 = wrow.iter().zip(xs).map(|(w, v)| w * (v - mu) * (v - mu)).sum();
            let r = (var + NORM_EPS).sqrt();
            mean[row] = mu;
            root[row] = r;
            let (bi, ci) = (row / c, row % c);
            out[bi * 2 * c + ci] = mu;
            out[bi * 2 * c + c + ci] = r - NORM_EPS.sqrt();
        }
        let weights = Tensor::new(vec![b, c, t], weights)?;
        let value = Tensor::new(vec![b, 2 * c], out)?;
        let op = Op::AttentiveStats { x, logits, weights, mean, root };
        Ok(self.push(value, op, &[x, logits]))
    }

    /// Scales each row of `[R,F]` to unit ℓ₂ norm.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (_, f) = self.value(x).dims2()?;
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(f) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::RowNormalize { x, norms }, &[x]))
    }

    /// Turns a cosine matrix `[R,N]` into additive-angular-margin logits:
    /// `s·cos(θ_y + m)` at each row's label and `s·cos θ_j` elsewhere.
    pub fn angular_margin(&mut self, cos: Var, labels: &[usize], margin: f64, scale: f64) -> Result<Var> {
        let (r, n) = self.value(cos).dims2()?;
        check_labels("angular_margin", labels, r, n)?;
        let mut out = self.value(cos).map(|c| scale * c);
        for (row, &y) in labels.iter().enumerate() {
            let c = self.value(cos).data()[row * n + y];
            out.data_mut()[row * n + y] = scale * (clamp_cos(c).acos() + margin).cos();
        }
        let op = Op::AngularMargin {
            cos,
            labels: labels.to_vec(),
            margin,
            scale,
        };
        Ok(self.push(out, op, &[cos]))
    }

    /// Mean softmax cross-entropy of `[R,N]` logits against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, n) = self.value(logits).dims2()?;
        check_labels("cross_entropy", labels, r, n)?;
        let mut probs = Vec::with_capacity(r * n);
        let mut loss = 0.0;
        for (row, &y) in self.value(logits).data().chunks(n).zip(labels) {
            let peak = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - peak).exp()).sum();
            loss += z.ln() + peak - row[y];
            probs.extend(row.iter().map(|v| (v - peak).exp() / z));
        }
        let probs = Tensor::new(vec![r, n], probs)?;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss / r as f64), op, &[logits]))
    }

    /// Reverse accumulation from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::shape("backward", format!("root must be scalar, got {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = ParamGrads::default();
        grads[root.0] = Some(Tensor::filled(rv.shape(), 1.0));
        let mut kept: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, &mut params)?;
            kept[i] = Some(g);
        }
        Ok(Gradients { nodes: kept, params })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], params: &mut ParamGrads) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Param { id, ranges } => {
                let shape = self.store.get(*id).shape();
                params
                    .entries
                    .entry(*id)
                    .or_insert_with(|| ParamGrad::new(shape))
                    .add_region(ranges, g)?;
            }
            Op::Slice { x, ranges } => {
                let mut full = Tensor::zeros(val(*x).shape());
                full.add_into_slice(ranges, g)?;
                acc(*x, full);
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for x in xs {
                    let shape = val(*x).shape();
                    let ranges: Vec<_> = g
                        .shape()
                        .iter()
                        .enumerate()
                        .map(|(d, n)| if d == *axis { start..start + shape[d] } else { 0..*n })
                        .collect();
                    start += shape[*axis];
                    acc(*x, g.slice(&ranges)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, zip_map(g, val(*b), |x, y| x * y));
                acc(*b, zip_map(g, val(*a), |x, y| x * y));
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * f)),
            Op::Relu(x) => acc(*x, zip_map(g, val(*x), |d, v| if v > 0.0 { d } else { 0.0 })),
            Op::Tanh(x) => acc(*x, zip_map(g, &node.value, |d, y| d * (1.0 - y * y))),
            Op::Sigmoid(x) => acc(*x, zip_map(g, &node.value, |d, y| d * y * (1.0 - y))),
            Op::Abs(x) => acc(*x, zip_map(g, val(*x), |d, v| d * v.signum() * (v != 0.0) as u8 as f64)),
            Op::Sum(x) => acc(*x, Tensor::filled(val(*x).shape(), g.item())),
            Op::Mean(x) => {
                let n = val(*x).len().max(1) as f64;
                acc(*x, Tensor::filled(val(*x).shape(), g.item() / n));
            }
            Op::Conv { x, w, b, dilation, groups } => {
                let (dx, dw, db) = kernels::conv1d_backward(val(*x), val(*w), g, *dilation, *groups)?;
                if wants(*x) {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = kernels::linear_backward(val(*x), val(*w), g)?;
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (_, c, t) = bct(g, "batch_norm")?;
                let gam = val(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (i, (grow, hrow)) in g.data().chunks(t).zip(xhat.data().chunks(t)).enumerate() {
                    dgamma[i % c] += grow.iter().zip(hrow).map(|(d, h)| d * h).sum::<f64>();
                    dbeta[i % c] += grow.iter().sum::<f64>();
                }
                if wants(*x) {
                    let n = (g.len() / c) as f64;
                    let mut dx = vec![0.0; g.len()];
                    for (i, ((grow, hrow), drow)) in g.data().chunks(t).zip(xhat.data().chunks(t)).zip(dx.chunks_mut(t)).enumerate() {
                        let ch = i % c;
                        let scale = gam[ch] * inv_std[ch];
                        for ((d, h), o) in grow.iter().zip(hrow).zip(drow.iter_mut()) {
                            *o = if *train {
                                scale * (d - dbeta[ch] / n - h * dgamma[ch] / n)
                            } else {
                                scale * d
                            };
                        }
                    }
                    acc(*x, Tensor::new(g.shape().to_vec(), dx)?);
                }
                acc(*gamma, Tensor::new(vec![c], dgamma)?);
                acc(*beta, Tensor::new(vec![c], dbeta)?);
            }
            Op::MeanTime(x) => {
                let (_, _, t) = val(*x).dims3()?;
                let data = g.data().iter().flat_map(|d| std::iter::repeat_n(d / t as f64, t)).collect();
                acc(*x, Tensor::new(val(*x).shape().to_vec(), data)?);
            }
            Op::ScaleChannels { x, s } => {
                let (_, _, t) = val(*x).dims3()?;
                let xs = val(*x).data();
                let sd = val(*s).data();
                let mut dx = vec![0.0; xs.len()];
                let mut ds = vec![0.0; sd.len()];
                for (row, (grow, drow)) in g.data().chunks(t).zip(dx.chunks_mut(t)).enumerate() {
                    let xr = &xs[row * t..(row + 1) * t];
                    for ((d, o), v) in grow.iter().zip(drow.iter_mut()).zip(xr) {
                        *o = d * sd[row];
                        ds[row] += d * v;
                    }
                }
                acc(*x, Tensor::new(val(*x).shape().to_vec(), dx)?);
                acc(*s, Tensor::new(val(*s).shape().to_vec(), ds)?);
            }
            Op::TapMix { w, m } => {
                let k = val(*m).shape()[0];
                let (wd, md) = (val(*w).data(), val(*m).data());
                let mut dw = vec![0.0; wd.len()];
                let mut dm = vec![0.0; k * k];
                for ((grow, wrow), drow) in g.data().chunks(k).zip(wd.chunks(k)).zip(dw.chunks_mut(k)) {
                    for j in 0..k {
                        for l in 0..k {
                            drow[l] += grow[j] * md[j * k + l];
                            dm[j * k + l] += grow[j] * wrow[l];
                        }
                    }
                }
                acc(*w, Tensor::new(val(*w).shape().to_vec(), dw)?);
                acc(*m, Tensor::new(vec![k, k], dm)?);
            }
            Op::AttentiveStats { x, logits, weights, mean, root } => {
                let (_, c, t) = val(*x).dims3()?;
                let xs = val(*x).data();
                let mut dx = vec![0.0; xs.len()];
                let mut dl = vec![0.0; xs.len()];
                for row in 0..mean.len() {
                    let (bi, ci) = (row / c, row % c);
                    let gmu = g.data()[bi * 2 * c + ci];
                    let gvar = g.data()[bi * 2 * c + c + ci] / (2.0 * root[row]);
                    let span = row * t..(row + 1) * t;
                    let (xr, wr) = (&xs[span.clone()], &weights.data()[span.clone()]);
                    let mu = mean[row];
                    let gw: Vec<f64> = xr.iter().map(|v| gmu * v + gvar * (v - mu) * (v - mu)).collect();
                    let dot: f64 = wr.iter().zip(&gw).map(|(w, d)| w * d).sum();
                    for (j, (v, w)) in xr.iter().zip(wr).enumerate() {
                        dx[row * t + j] = w * (gmu + 2.0 * gvar * (v - mu));
                        dl[row * t + j] = w * (gw[j] - dot);
                    }
                }
                acc(*x, Tensor::new(val(*x).shape().to_vec(), dx)?);
                acc(*logits, Tensor::new(val(*x).shape().to_vec(), dl)?);
            }
            Op::RowNormalize { x, norms } => {
                let f = node.value.shape()[1];
                let mut dx = Vec::with_capacity(g.len());
                for ((grow, yrow), n) in g.data().chunks(f).zip(node.value.data().chunks(f)).zip(norms) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(d, y)| (d - y * dot) / n));
                }
                acc(*x, Tensor::new(g.shape().to_vec(), dx)?);
            }
            Op::AngularMargin { cos, labels, margin, scale } => {
                let n = g.shape()[1];
                let mut dc = g.map(|d| d * scale);
                for (row, &y) in labels.iter().enumerate() {
                    let c = val(*cos).data()[row * n + y];
                    let slope = if clamp_cos(c) != c {
                        0.0
                    } else {
                        let theta = c.acos();
                        (theta + margin).sin() / theta.sin()
                    };
                    dc.data_mut()[row * n + y] = g.data()[row * n + y] * scale * slope;
                }
                acc(*cos, dc);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = probs.shape()[1];
                let r = labels.len() as f64;
                let mut dl = probs.map(|p| p * g.item() / r);
                for (row, &y) in labels.iter().enumerate() {
                    dl.data_mut()[row * n + y] -= g.item() / r;
                }
                acc(*logits, dl);
            }
        }
        Ok(())
    }
}

const COS_LIMIT: f64 = 1.0 - 1e-7;

fn clamp_cos(c: f64) -> f64 {
    c.clamp(-COS_LIMIT, COS_LIMIT)
}

fn check_labels(op: &'static str, labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::shape(op, format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|y| **y >= classes) {
        return Err(Error::InvalidArgument(format!("{op}: label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

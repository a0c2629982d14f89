use std::collections::BTreeMap;
use std::sync::Arc;

use crate::attention::{self, AttentionConfig, BiasKind, KernelKind, KeyMask};
use crate::blocks::conv;
use crate::error::{Error, Result};
use crate::posbias::RopeTable;
use crate::tensor::{gelu_grad, lit, numel, MatmulPlan, Scalar, Tensor, PAD_INDEX};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which attention kernel a taped attention node runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnKernel {
    Naive,
    Streaming { tile: usize },
}

impl AttnKernel {
    pub fn from_config(cfg: &AttentionConfig, tokens: usize) -> Self {
        match cfg.kernel {
            KernelKind::Naive => AttnKernel::Naive,
            KernelKind::Streaming => AttnKernel::Streaming {
                tile: cfg.effective_tile(tokens),
            },
        }
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
    Mse(Var, Var),
    Concat(Var, Var),
    Reshape(Var),
    Gather {
        src: Var,
        index: Arc<[usize]>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Tensor<T>,
        rstd: Vec<T>,
    },
    DwConv {
        x: Var,
        kernel: Var,
    },
    Rope {
        x: Var,
        table: Arc<RopeTable<T>>,
    },
    AttnNaive {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        p: Tensor<T>,
    },
    AttnStreaming {
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Arc<KeyMask>>,
        row_max: Tensor<T>,
        row_sum: Tensor<T>,
        tile: usize,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::L1(..) => "l1",
            Op::Mse(..) => "mse",
            Op::Concat(..) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Gather { .. } => "gather",
            Op::LayerNorm { .. } => "layer_norm",
            Op::DwConv { .. } => "dwconv3x3",
            Op::Rope { .. } => "rope",
            Op::AttnNaive { .. } => "attention_naive",
            Op::AttnStreaming { .. } => "attention_streaming",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Append-only record of a computation for reverse-mode differentiation.
///
/// Nodes are created in topological order; [`Tape::backward`] walks them in
/// reverse creation order exactly once and leaves the tape untouched, so it
/// can be called repeatedly.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: BTreeMap<String, Tensor<T>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Gradient with respect to any node, if the loss depends on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Registers a named leaf whose gradient [`Tape::backward`] reports.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        let v = self.push(Op::Leaf, value);
        self.params.push((name.into(), v));
        v
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.push(Op::Scale(a, c), v)
    }

    /// Adds a vector along the last dim.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = self.value(a).add_bias(self.value(bias))?;
        Ok(self.push(Op::AddBias(a, bias), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// `x @ w + b` over the last dim of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).relu();
        self.push(Op::Relu(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).sigmoid();
        self.push(Op::Sigmoid(a), v)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).gelu();
        self.push(Op::Gelu(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a), v)
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.value(pred).sub(self.value(target))?;
        let v = Tensor::scalar(d.map(|x| x.abs()).mean());
        Ok(self.push(Op::L1(pred, target), v))
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.value(pred).sub(self.value(target))?;
        let v = Tensor::scalar(d.map(|x| x * x).mean());
        Ok(self.push(Op::Mse(pred, target), v))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_last(self.value(b))?;
        Ok(self.push(Op::Concat(a, b), v))
    }

    pub fn reshape(&mut self, a: Var, dims: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).reshape(dims)?;
        Ok(self.push(Op::Reshape(a), v))
    }

    /// `out[i] = src[index[i]]` (zero at [`PAD_INDEX`]); backward scatters.
    pub fn gather(
        &mut self,
        src: Var,
        index: Arc<[usize]>,
        dims: impl Into<Vec<usize>>,
    ) -> Result<Var> {
        let v = self.value(src).gather(&index, dims)?;
        Ok(self.push(Op::Gather { src, index }, v))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let (dims, index) = crate::tensor::permute_index(self.dims(a), perm)?;
        self.gather(a, index.into(), dims)
    }

    /// Repeats `a` along a new leading dim of size `count`.
    pub fn broadcast_leading(&mut self, a: Var, count: usize) -> Result<Var> {
        let n = self.value(a).numel();
        let index: Arc<[usize]> = (0..count * n).map(|i| i % n).collect();
        let mut dims = vec![count];
        dims.extend_from_slice(self.dims(a));
        self.gather(a, index, dims)
    }

    /// LayerNorm over the last dim with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dims("layer_norm", xv.dims(), self.value(gamma).dims()));
        }
        let (g, b) = (self.value(gamma).as_slice(), self.value(beta).as_slice());
        let inv_c = lit::<T>(1.0 / c as f64);
        let mut normed = Vec::with_capacity(xv.numel());
        let mut out = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(xv.numel() / c);
        for row in xv.as_slice().chunks(c) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_c;
            let r = T::one() / (var + lit(eps)).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let nv = (v - mean) * r;
                normed.push(nv);
                out.push(nv * g[j] + b[j]);
            }
        }
        let dims = xv.dims().to_vec();
        let normed = Tensor::from_parts(dims.clone(), normed);
        let value = Tensor::from_parts(dims, out);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
            value,
        ))
    }

    /// Depthwise 3x3 convolution with zero padding; `x: [B,H,W,C]`,
    /// `kernel: [3,3,C]`.
    pub fn dwconv3x3(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let v = conv::depthwise3x3(self.value(x), self.value(kernel))?;
        Ok(self.push(Op::DwConv { x, kernel }, v))
    }

    /// Axial rotary embedding of `x: [.., N, D_head]`.
    pub fn rope(&mut self, x: Var, table: Arc<RopeTable<T>>) -> Result<Var> {
        let v = table.rotate(self.value(x))?;
        Ok(self.push(Op::Rope { x, table }, v))
    }

    /// Attention over the flattened leading dims of `q`.
    ///
    /// `bias` is only accepted by the naive kernel.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<Arc<KeyMask>>,
        bias: Option<Var>,
        kernel: AttnKernel,
    ) -> Result<Var> {
        match kernel {
            AttnKernel::Naive => {
                let out = attention::attend_naive(
                    self.value(q),
                    self.value(k),
                    self.value(v),
                    mask.as_deref(),
                    bias.map(|b| self.value(b)),
                )?;
                Ok(self.push(
                    Op::AttnNaive {
                        q,
                        k,
                        v,
                        bias,
                        p: out.p,
                    },
                    out.o,
                ))
            }
            AttnKernel::Streaming { tile } => {
                if bias.is_some() {
                    return Err(Error::Unsupported(
                        "the streaming kernel takes no additive bias".into(),
                    ));
                }
                let cfg = AttentionConfig::new(1, 1, 0, BiasKind::None, KernelKind::Streaming)
                    .with_tile(tile);
                let (o, stats) = attention::attend_streaming(
                    self.value(q),
                    self.value(k),
                    self.value(v),
                    mask.as_deref(),
                    &cfg,
                )?;
                Ok(self.push(
                    Op::AttnStreaming {
                        q,
                        k,
                        v,
                        mask,
                        row_max: stats.row_max,
                        row_sum: stats.row_sum,
                        tile,
                    },
                    o,
                ))
            }
        }
    }

    /// Reverse pass from a scalar `loss`. Every registered parameter gets a
    /// gradient; parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.dims(loss).to_vec(), T::one())?);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads)
                .map_err(|e| match e {
                    Error::Dimension { lhs, rhs, .. } => Error::Dimension {
                        op: self.nodes[idx].op.name(),
                        lhs,
                        rhs,
                    },
                    other => other,
                })?;
            grads[idx] = Some(g);
        }
        let mut params = BTreeMap::new();
        for (name, v) in &self.params {
            let g = match grads.get(v.0).and_then(|g| g.clone()) {
                Some(g) => g,
                None => Tensor::zeros(self.dims(*v).to_vec())?,
            };
            match params.get_mut(name) {
                Some(prev) => *prev = Tensor::add(prev, &g)?,
                None => {
                    params.insert(name.clone(), g);
                }
            }
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            params,
            nodes: grads,
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.mul(val(*b))?)?;
                accumulate(grads, *b, g.mul(val(*a))?)?;
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.scale(*c))?,
            Op::AddBias(a, b) => {
                accumulate(grads, *a, g.clone())?;
                let n = g.last_dim();
                let mut gb = vec![T::zero(); n];
                for row in g.as_slice().chunks(n) {
                    for (acc, &x) in gb.iter_mut().zip(row) {
                        *acc = *acc + x;
                    }
                }
                accumulate(grads, *b, Tensor::new(val(*b).dims().to_vec(), gb)?)?;
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(val(*a), val(*b), g)?;
                accumulate(grads, *a, ga)?;
                accumulate(grads, *b, gb)?;
            }
            Op::Relu(a) => {
                let x = val(*a);
                accumulate(
                    grads,
                    *a,
                    g.zip_map(x, "relu", |gi, xi| if xi > T::zero() { gi } else { T::zero() })?,
                )?;
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                accumulate(
                    grads,
                    *a,
                    g.zip_map(y, "sigmoid", |gi, yi| gi * yi * (T::one() - yi))?,
                )?;
            }
            Op::Gelu(a) => {
                let x = val(*a);
                accumulate(grads, *a, g.zip_map(x, "gelu", |gi, xi| gi * gelu_grad(xi))?)?;
            }
            Op::Sum(a) => {
                let s = g.item()?;
                accumulate(grads, *a, Tensor::full(val(*a).dims().to_vec(), s)?)?;
            }
            Op::Mean(a) => {
                let n = lit::<T>(val(*a).numel() as f64);
                let s = g.item()? / n;
                accumulate(grads, *a, Tensor::full(val(*a).dims().to_vec(), s)?)?;
            }
            Op::L1(p, t) => {
                let n = lit::<T>(val(*p).numel() as f64);
                let s = g.item()? / n;
                let d = val(*p).zip_map(val(*t), "l1", |a, b| {
                    let diff = a - b;
                    if diff > T::zero() {
                        s
                    } else if diff < T::zero() {
                        -s
                    } else {
                        T::zero()
                    }
                })?;
                accumulate(grads, *t, d.map(|x| -x))?;
                accumulate(grads, *p, d)?;
            }
            Op::Mse(p, t) => {
                let n = lit::<T>(val(*p).numel() as f64);
                let s = g.item()? * lit::<T>(2.0) / n;
                let d = val(*p).zip_map(val(*t), "mse", |a, b| (a - b) * s)?;
                accumulate(grads, *t, d.map(|x| -x))?;
                accumulate(grads, *p, d)?;
            }
            Op::Concat(a, b) => {
                let (na, nb) = (val(*a).last_dim(), val(*b).last_dim());
                let mut ga = Vec::with_capacity(val(*a).numel());
                let mut gb = Vec::with_capacity(val(*b).numel());
                for row in g.as_slice().chunks(na + nb) {
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                accumulate(grads, *a, Tensor::new(val(*a).dims().to_vec(), ga)?)?;
                accumulate(grads, *b, Tensor::new(val(*b).dims().to_vec(), gb)?)?;
            }
            Op::Reshape(a) => accumulate(grads, *a, g.reshape(val(*a).dims().to_vec())?)?,
            Op::Gather { src, index } => {
                let mut gs = vec![T::zero(); val(*src).numel()];
                for (&i, &x) in index.iter().zip(g.as_slice()) {
                    if i != PAD_INDEX {
                        gs[i] = gs[i] + x;
                    }
                }
                accumulate(grads, *src, Tensor::new(val(*src).dims().to_vec(), gs)?)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let c = normed.last_dim();
                let gam = val(*gamma).as_slice();
                let inv_c = lit::<T>(1.0 / c as f64);
                let mut gx = Vec::with_capacity(normed.numel());
                let mut gg = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                for ((grow, nrow), &r) in g
                    .as_slice()
                    .chunks(c)
                    .zip(normed.as_slice().chunks(c))
                    .zip(rstd)
                {
                    let mut mean_dy = T::zero();
                    let mut mean_dyx = T::zero();
                    for j in 0..c {
                        let dy = grow[j] * gam[j];
                        mean_dy = mean_dy + dy;
                        mean_dyx = mean_dyx + dy * nrow[j];
                        gg[j] = gg[j] + grow[j] * nrow[j];
                        gbeta[j] = gbeta[j] + grow[j];
                    }
                    mean_dy = mean_dy * inv_c;
                    mean_dyx = mean_dyx * inv_c;
                    for j in 0..c {
                        let dy = grow[j] * gam[j];
                        gx.push(r * (dy - mean_dy - nrow[j] * mean_dyx));
                    }
                }
                accumulate(grads, *x, Tensor::new(normed.dims().to_vec(), gx)?)?;
                accumulate(grads, *gamma, Tensor::new(val(*gamma).dims().to_vec(), gg)?)?;
                accumulate(grads, *beta, Tensor::new(val(*beta).dims().to_vec(), gbeta)?)?;
            }
            Op::DwConv { x, kernel } => {
                let (gx, gk) = conv::depthwise3x3_backward(val(*x), val(*kernel), g)?;
                accumulate(grads, *x, gx)?;
                accumulate(grads, *kernel, gk)?;
            }
            Op::Rope { x, table } => accumulate(grads, *x, table.rotate_transpose(g)?)?,
            Op::AttnNaive { q, k, v, bias, p } => {
                let ag = attention::naive_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    p,
                    g,
                    bias.map(|b| val(b).dims()),
                )?;
                accumulate(grads, *q, ag.dq)?;
                accumulate(grads, *k, ag.dk)?;
                accumulate(grads, *v, ag.dv)?;
                if let (Some(b), Some(db)) = (bias, ag.dbias) {
                    accumulate(grads, *b, db)?;
                }
            }
            Op::AttnStreaming {
                q,
                k,
                v,
                mask,
                row_max,
                row_sum,
                tile,
            } => {
                let ag = attention::streaming_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    &node.value,
                    g,
                    (row_max, row_sum),
                    mask.as_deref(),
                    *tile,
                )?;
                accumulate(grads, *q, ag.dq)?;
                accumulate(grads, *k, ag.dk)?;
                accumulate(grads, *v, ag.dv)?;
            }
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    let slot = &mut grads[v.0];
    *slot = Some(match slot.take() {
        Some(prev) => prev.add(&g)?,
        None => g,
    });
    Ok(())
}

/// Gradients of a batched matmul, summing over broadcast batches.
fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let plan = MatmulPlan::new(a.dims(), b.dims())?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    if g.numel() != plan.out_numel() {
        return Err(Error::dims("matmul backward", g.dims(), &plan.out_dims));
    }
    let (av, bv, gv) = (a.as_slice(), b.as_slice(), g.as_slice());
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    for (bi, &(oa, ob)) in plan.batches.iter().enumerate() {
        let gblk = &gv[bi * m * n..(bi + 1) * m * n];
        // dA[i,p] += sum_j g[i,j] b[p,j]
        for i in 0..m {
            let grow = &gblk[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &bv[ob + p * n..ob + (p + 1) * n];
                let s = grow.iter().zip(brow).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                ga[oa + i * k + p] = ga[oa + i * k + p] + s;
            }
        }
        // dB[p,j] += sum_i a[i,p] g[i,j]
        for i in 0..m {
            let grow = &gblk[i * n..(i + 1) * n];
            for p in 0..k {
                let aval = av[oa + i * k + p];
                let dst = &mut gb[ob + p * n..ob + (p + 1) * n];
                for (d, &x) in dst.iter_mut().zip(grow) {
                    *d = *d + aval * x;
                }
            }
        }
    }
    debug_assert_eq!(numel(a.dims()), ga.len());
    Ok((
        Tensor::new(a.dims().to_vec(), ga)?,
        Tensor::new(b.dims().to_vec(), gb)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, GradCheckConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", t(&[3], &[1., 2., 3.]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("x").unwrap().as_slice(), &[2., 4., 6.]);
    }

    #[test]
    fn unused_param_gets_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.param("x", t(&[2], &[1., 2.]));
        tape.param("p", t(&[2, 2], &[5., 6., 7., 8.]));
        let loss = tape.sum(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get("p").unwrap().as_slice(), &[0.; 4]);
    }

    #[test]
    fn non_scalar_loss_is_a_contract_error() {
        let mut tape = Tape::new();
        let x = tape.param("x", t(&[2], &[1., 2.]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_repeatable() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::<f32>::new();
        let a = tape.param("a", Tensor::randn([3, 4], &mut rng).unwrap());
        let b = tape.param("b", Tensor::randn([4, 2], &mut rng).unwrap());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sigmoid(c);
        let loss = tape.mean(s);
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        for (name, t1) in g1.params() {
            assert!(t1.bitwise_eq(g2.get(name).unwrap()));
        }
    }

    #[test]
    fn matmul_sum_gradient_pattern() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a0 = Tensor::<f64>::randn([3, 4], &mut rng).unwrap();
        let b0 = Tensor::<f64>::randn([4, 2], &mut rng).unwrap();
        let mut tape = Tape::new();
        let a = tape.param("a", a0);
        let b = tape.param("b", b0.clone());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        // dA = ones(3,2) @ B^T: each row equals the row sums of B
        let ones = Tensor::<f64>::ones([3, 2]).unwrap();
        let expect = ones.matmul(&b0.transpose_last2().unwrap()).unwrap();
        assert!(g.get("a").unwrap().max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn primitive_ops_pass_gradient_check() {
        struct Probe;
        impl crate::autodiff::Differentiable for Probe {
            fn eval<S: Scalar>(&self, tape: &mut Tape<S>, p: &[Var]) -> Result<Var> {
                let (x, w, b, gamma, beta, k) = (p[0], p[1], p[2], p[3], p[4], p[5]);
                let y = tape.linear(x, w, Some(b))?;
                let y = tape.layer_norm(y, gamma, beta, 1e-6)?;
                let y = tape.gelu(y);
                let y4 = tape.reshape(y, [1, 2, 3, 4])?;
                let y4 = tape.dwconv3x3(y4, k)?;
                let y = tape.reshape(y4, [6, 4])?;
                let t = tape.permute(y, &[1, 0])?;
                let s = tape.sigmoid(t);
                let c = tape.concat_last(s, t)?;
                let r = tape.relu(c);
                let m = tape.mul(r, c)?;
                let zero = tape.constant(Tensor::zeros([4, 12])?);
                tape.l1_loss(m, zero)
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params: Vec<Tensor<f64>> = vec![
            Tensor::randn([6, 5], &mut rng).unwrap(),
            Tensor::randn([5, 4], &mut rng).unwrap(),
            Tensor::randn([4], &mut rng).unwrap(),
            Tensor::randn([4], &mut rng).unwrap(),
            Tensor::randn([4], &mut rng).unwrap(),
            Tensor::randn([3, 3, 4], &mut rng).unwrap(),
        ];
        let report = grad_check(&Probe, &params, &GradCheckConfig::f64_default()).unwrap();
        assert!(report.passed, "{report:?}");
    }
}

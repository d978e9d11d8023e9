//! Reverse-mode tape. Nodes are appended in evaluation order, so walking the
//! tape backwards visits every node after all of its consumers.

use super::kernels::{conv2d_backward, conv2d_forward, conv_out_size, log1p_sum_exp, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Permutation-invariant reduction over set elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetPool {
    Mean,
    Sum,
}

/// Batch statistics recorded by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnStat<T> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batch_mean: Vec<T>,
    /// Unbiased batch variance.
    pub batch_var: Vec<T>,
}

pub enum BnMode<'a, T> {
    /// Normalise with batch statistics and record them for the running averages.
    Train { running: Option<(ParamId, ParamId)> },
    /// Normalise with fixed statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Concat(Var, Var),
    Add(Var, Var),
    SetPool {
        x: Var,
        group: usize,
        kind: SetPool,
    },
    SetPoolExcluding {
        x: Var,
        group: usize,
        kind: SetPool,
    },
    ChannelSoftmax(Var),
    GroupMul {
        mask: Var,
        x: Var,
        group: usize,
    },
    Select {
        x: Var,
        rows: Vec<usize>,
    },
    Tuplet {
        query: Var,
        support: Var,
        positives: Vec<usize>,
        /// Per episode, ∂L/∂z_j for each support slot (zero at the positive).
        weights: Vec<Vec<f64>>,
    },
    SumAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    bn_stats: Vec<BnStat<T>>,
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Parameter gradients, summed when a parameter was used more than once.
    pub fn params(&self) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = Vec::new();
        for (id, node) in &self.params {
            let Some(g) = self.grads[*node].as_ref() else { continue };
            match out.iter_mut().find(|(p, _)| p == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((*id, g.clone())),
            }
        }
        out
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), bn_stats: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let var = self.leaf(store.get(id).clone(), true);
        self.nodes[var.0].param = Some(id);
        var
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn take_bn_stats(&mut self) -> Vec<BnStat<T>> {
        std::mem::take(&mut self.bn_stats)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [n, c, h, wd] = self.value(x).dims4()?;
        let [out_c, in_c, kh, kw] = self.value(w).dims4()?;
        if in_c != c || kh != kw {
            return shape_err(format!(
                "conv kernel {:?} does not fit input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [out_c] {
                return shape_err(format!("conv bias {:?} for {out_c} channels", self.value(b).shape()));
            }
        }
        let (Some(oh), Some(ow)) = (conv_out_size(h, kh, stride, pad), conv_out_size(wd, kw, stride, pad)) else {
            return shape_err(format!("kernel {kh} larger than padded input {h}x{wd}"));
        };
        let geom = ConvGeom { c, h, w: wd, k: kh, stride, pad, oh, ow };
        let data = conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            out_c,
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![n, out_c, oh, ow], data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>, eps: f64) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return shape_err(format!("batch norm affine parameters for {c} channels"));
        }
        let plane = h * w;
        let count = n * plane;
        let xs = self.value(x).data();
        let (mean, var, batch_stats) = match &mode {
            BnMode::Train { .. } => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        s += xs[off..off + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0f64;
                    for b in 0..n {
                        let off = (b * c + ch) * plane;
                        ss += xs[off..off + plane].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
                    }
                    mean[ch] = T::lit(m);
                    var[ch] = T::lit(ss / count as f64);
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err(format!("running statistics for {c} channels"));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| (*v + T::lit(eps)).sqrt().recip()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + be[ch];
                }
            }
        }
        if let BnMode::Train { running: Some((running_mean, running_var)) } = mode {
            let unbias = if count > 1 { T::lit(count as f64 / (count - 1) as f64) } else { T::one() };
            self.bn_stats.push(BnStat {
                running_mean,
                running_var,
                batch_mean: mean,
                batch_var: var.iter().map(|v| *v * unbias).collect(),
            });
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|v| v.max(T::zero())).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return shape_err(format!("max pool {k} does not tile {h}x{w}"));
        }
        let (oh, ow) = (h / k, w / k);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut argmax = vec![0u32; out.len()];
        for nc in 0..n * c {
            let base = nc * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * k * w + j * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * k + di) * w + j * k + dj;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    let o = (nc * oh + i) * ow + j;
                    out[o] = xs[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, &[x]))
    }

    pub fn avg_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return shape_err(format!("average pool {k} does not tile {h}x{w}"));
        }
        if k == 1 {
            return Ok(x);
        }
        let (oh, ow) = (h / k, w / k);
        let scale = T::lit(1.0 / (k * k) as f64);
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = T::zero();
                    for di in 0..k {
                        let row = nc * h * w + (i * k + di) * w + j * k;
                        acc += xs[row..row + k].iter().copied().sum::<T>();
                    }
                    out[(nc * oh + i) * ow + j] = acc * scale;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool { x, k }, &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, c1, h, w] = self.value(a).dims4()?;
        let [n2, c2, h2, w2] = self.value(b).dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return shape_err(format!(
                "cannot concatenate {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let (la, lb) = (c1 * h * w, c2 * h * w);
        let mut out = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * la..(i + 1) * la]);
            out.extend_from_slice(&self.value(b).data()[i * lb..(i + 1) * lb]);
        }
        let value = Tensor::new(vec![n, c1 + c2, h, w], out)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "cannot add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    fn group_dims(&self, x: Var, group: usize) -> Result<(usize, usize)> {
        let t = self.value(x);
        if group == 0 || t.shape().is_empty() || t.rows() % group != 0 {
            return shape_err(format!("{} rows do not split into groups of {group}", t.rows()));
        }
        Ok((t.rows() / group, t.row_len()))
    }

    /// Reduces each consecutive group of `group` rows to one row.
    pub fn set_pool(&mut self, x: Var, group: usize, kind: SetPool) -> Result<Var> {
        let (sets, len) = self.group_dims(x, group)?;
        let scale = match kind {
            SetPool::Mean => T::lit(1.0 / group as f64),
            SetPool::Sum => T::one(),
        };
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); sets * len];
        for s in 0..sets {
            let dst = &mut out[s * len..(s + 1) * len];
            for i in 0..group {
                let row = &xs[(s * group + i) * len..(s * group + i + 1) * len];
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += *v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= scale);
        }
        let mut shape = self.value(x).shape().to_vec();
        shape[0] = sets;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::SetPool { x, group, kind }, &[x]))
    }

    /// For every row, reduces the other rows of its group (its neighbourhood).
    pub fn set_pool_excluding(&mut self, x: Var, group: usize, kind: SetPool) -> Result<Var> {
        let (sets, len) = self.group_dims(x, group)?;
        if group < 2 {
            return shape_err("a neighbourhood needs at least two set elements".into());
        }
        let scale = match kind {
            SetPool::Mean => T::lit(1.0 / (group - 1) as f64),
            SetPool::Sum => T::one(),
        };
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for s in 0..sets {
            for i in 0..group {
                let dst = &mut out[(s * group + i) * len..(s * group + i + 1) * len];
                for j in (0..group).filter(|&j| j != i) {
                    let row = &xs[(s * group + j) * len..(s * group + j + 1) * len];
                    for (d, v) in dst.iter_mut().zip(row) {
                        *d += *v;
                    }
                }
                dst.iter_mut().for_each(|d| *d *= scale);
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::SetPoolExcluding { x, group, kind }, &[x]))
    }

    /// Softmax over the channel axis at every spatial location.
    pub fn channel_softmax(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let plane = h * w;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); xs.len()];
        for b in 0..n {
            let base = b * c * plane;
            for p in 0..plane {
                let at = |ch: usize| base + ch * plane + p;
                let m = (0..c).map(|ch| xs[at(ch)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for ch in 0..c {
                    let e = (xs[at(ch)] - m).exp();
                    out[at(ch)] = e;
                    total += e;
                }
                for ch in 0..c {
                    out[at(ch)] = out[at(ch)] / total;
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(value, Op::ChannelSoftmax(x), &[x]))
    }

    /// Multiplies each row of `x` by the mask row of its group:
    /// `out[s·group + i] = mask[s] ⊙ x[s·group + i]`.
    pub fn group_mul(&mut self, mask: Var, x: Var, group: usize) -> Result<Var> {
        let (sets, len) = self.group_dims(x, group)?;
        let m = self.value(mask);
        if m.rows() != sets || m.row_len() != len {
            return shape_err(format!(
                "mask {:?} does not match {:?} in groups of {group}",
                m.shape(),
                self.value(x).shape()
            ));
        }
        let xs = self.value(x).data();
        let ms = m.data();
        let mut out = vec![T::zero(); xs.len()];
        for s in 0..sets {
            let mrow = &ms[s * len..(s + 1) * len];
            for i in 0..group {
                let r = (s * group + i) * len;
                for k in 0..len {
                    out[r + k] = mrow[k] * xs[r + k];
                }
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(value, Op::GroupMul { mask, x, group }, &[mask, x]))
    }

    /// Gathers rows (leading index) in the given order.
    pub fn select(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let len = t.row_len();
        if let Some(bad) = rows.iter().find(|r| **r >= t.rows()) {
            return shape_err(format!("row {bad} out of {} rows", t.rows()));
        }
        let mut out = Vec::with_capacity(rows.len() * len);
        for &r in rows {
            out.extend_from_slice(t.row(r));
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Select { x, rows: rows.to_vec() }, &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Mean tuplet loss over episodes. Row `b` of `query` is compared with rows
    /// `b·n .. b·n+n` of `support`, of which `positives[b]` is the match.
    pub fn tuplet_loss(&mut self, query: Var, support: Var, positives: &[usize]) -> Result<Var> {
        let q = self.value(query);
        let s = self.value(support);
        let episodes = q.rows();
        if positives.len() != episodes || episodes == 0 {
            return shape_err(format!("{} positives for {episodes} episodes", positives.len()));
        }
        if s.rows() % episodes != 0 || q.row_len() != s.row_len() {
            return shape_err(format!("query {:?} vs support {:?}", q.shape(), s.shape()));
        }
        let n = s.rows() / episodes;
        if n < 2 || positives.iter().any(|p| *p >= n) {
            return shape_err(format!("support of {n} with positives {positives:?}"));
        }
        let mut total = 0.0;
        let mut weights = Vec::with_capacity(episodes);
        for b in 0..episodes {
            let qr = q.row(b);
            let dist: Vec<f64> = (0..n).map(|j| squared_distance(qr, s.row(b * n + j))).collect();
            let pos = positives[b];
            let z: Vec<f64> = (0..n).filter(|&j| j != pos).map(|j| dist[pos] - dist[j]).collect();
            let loss = log1p_sum_exp(&z);
            total += loss;
            let mut w = vec![0.0; n];
            for (j, zj) in (0..n).filter(|&j| j != pos).zip(&z) {
                w[j] = (zj - loss).exp();
            }
            weights.push(w);
        }
        let value = Tensor::scalar(T::lit(total / episodes as f64));
        Ok(self.push(
            value,
            Op::Tuplet { query, support, positives: positives.to_vec(), weights },
            &[query, support],
        ))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!("backward needs a scalar, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.shape()[0];
                let out_c = wv.shape()[0];
                let mut gw = vec![T::zero(); wv.numel()];
                let mut gb = b.map(|_| vec![T::zero(); out_c]);
                let mut gx = self.wants(*x).then(|| vec![T::zero(); xv.numel()]);
                conv2d_backward(
                    xv.data(),
                    n,
                    geom,
                    wv.data(),
                    out_c,
                    gd,
                    &mut gw,
                    gb.as_deref_mut(),
                    gx.as_deref_mut(),
                );
                accumulate(grads, *w, wv.shape(), gw);
                if let (Some(b), Some(gb)) = (b, gb) {
                    accumulate(grads, *b, &[out_c], gb);
                }
                if let Some(gx) = gx {
                    accumulate(grads, *x, xv.shape(), gx);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let [n, c, h, w] = node.value.dims4().expect("4d");
                let plane = h * w;
                let count = (n * plane) as f64;
                let gamma_v = self.value(*gamma).data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            sum_g[ch] += gd[i].as_f64();
                            sum_gx[ch] += (gd[i] * xhat[i]).as_f64();
                        }
                    }
                }
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let k = gamma_v[ch] * inv_std[ch];
                            if *batch_stats {
                                let mg = T::lit(sum_g[ch] / count);
                                let mgx = T::lit(sum_gx[ch] / count);
                                for i in off..off + plane {
                                    gx[i] = k * (gd[i] - mg - xhat[i] * mgx);
                                }
                            } else {
                                for i in off..off + plane {
                                    gx[i] = k * gd[i];
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, node.value.shape(), gx);
                }
                accumulate(grads, *gamma, &[c], sum_gx.iter().map(|v| T::lit(*v)).collect());
                accumulate(grads, *beta, &[c], sum_g.iter().map(|v| T::lit(*v)).collect());
            }
            Op::Relu(x) => {
                let gx = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(y, g)| if *y > T::zero() { *g } else { T::zero() })
                    .collect();
                accumulate(grads, *x, node.value.shape(), gx);
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let mut gx = vec![T::zero(); xv.numel()];
                for (o, src) in argmax.iter().enumerate() {
                    gx[*src as usize] += gd[o];
                }
                accumulate(grads, *x, xv.shape(), gx);
            }
            Op::AvgPool { x, k } => {
                let xv = self.value(*x);
                let [n, c, h, w] = xv.dims4().expect("4d");
                let (oh, ow) = (h / k, w / k);
                let scale = T::lit(1.0 / (k * k) as f64);
                let mut gx = vec![T::zero(); xv.numel()];
                for nc in 0..n * c {
                    for i in 0..h {
                        for j in 0..w {
                            gx[(nc * h + i) * w + j] = gd[(nc * oh + i / k) * ow + j / k] * scale;
                        }
                    }
                }
                accumulate(grads, *x, xv.shape(), gx);
            }
            Op::Concat(a, b) => {
                let [n, c1, h, w] = self.value(*a).dims4().expect("4d");
                let c2 = self.value(*b).shape()[1];
                let (la, lb) = (c1 * h * w, c2 * h * w);
                let mut ga = Vec::with_capacity(n * la);
                let mut gb = Vec::with_capacity(n * lb);
                for i in 0..n {
                    let row = &gd[i * (la + lb)..(i + 1) * (la + lb)];
                    ga.extend_from_slice(&row[..la]);
                    gb.extend_from_slice(&row[la..]);
                }
                accumulate(grads, *a, self.value(*a).shape(), ga);
                accumulate(grads, *b, self.value(*b).shape(), gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.shape(), gd.to_vec());
                accumulate(grads, *b, g.shape(), gd.to_vec());
            }
            Op::SetPool { x, group, kind } => {
                let xv = self.value(*x);
                let len = xv.row_len();
                let scale = match kind {
                    SetPool::Mean => T::lit(1.0 / *group as f64),
                    SetPool::Sum => T::one(),
                };
                let mut gx = vec![T::zero(); xv.numel()];
                for (r, dst) in gx.chunks_mut(len).enumerate() {
                    let src = &gd[(r / group) * len..(r / group + 1) * len];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d = *s * scale;
                    }
                }
                accumulate(grads, *x, xv.shape(), gx);
            }
            Op::SetPoolExcluding { x, group, kind } => {
                let xv = self.value(*x);
                let len = xv.row_len();
                let scale = match kind {
                    SetPool::Mean => T::lit(1.0 / (*group - 1) as f64),
                    SetPool::Sum => T::one(),
                };
                // Row j receives the gradient of every other row in its group.
                let mut gx = vec![T::zero(); xv.numel()];
                for s in 0..xv.rows() / group {
                    let mut total = vec![T::zero(); len];
                    for i in 0..*group {
                        for (t, v) in total.iter_mut().zip(&gd[(s * group + i) * len..]) {
                            *t += *v;
                        }
                    }
                    for j in 0..*group {
                        let r = (s * group + j) * len;
                        for k in 0..len {
                            gx[r + k] = (total[k] - gd[r + k]) * scale;
                        }
                    }
                }
                accumulate(grads, *x, xv.shape(), gx);
            }
            Op::ChannelSoftmax(x) => {
                let [n, c, h, w] = node.value.dims4().expect("4d");
                let plane = h * w;
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for b in 0..n {
                    let base = b * c * plane;
                    for p in 0..plane {
                        let at = |ch: usize| base + ch * plane + p;
                        let dot = (0..c).map(|ch| y[at(ch)] * gd[at(ch)]).sum::<T>();
                        for ch in 0..c {
                            gx[at(ch)] = y[at(ch)] * (gd[at(ch)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, node.value.shape(), gx);
            }
            Op::GroupMul { mask, x, group } => {
                let mv = self.value(*mask);
                let xv = self.value(*x);
                let len = xv.row_len();
                let (ms, xs) = (mv.data(), xv.data());
                if self.wants(*x) {
                    let mut gx = vec![T::zero(); xs.len()];
                    for (r, dst) in gx.chunks_mut(len).enumerate() {
                        let mrow = &ms[(r / group) * len..(r / group + 1) * len];
                        for k in 0..len {
                            dst[k] = mrow[k] * gd[r * len + k];
                        }
                    }
                    accumulate(grads, *x, xv.shape(), gx);
                }
                if self.wants(*mask) {
                    let mut gm = vec![T::zero(); ms.len()];
                    for r in 0..xv.rows() {
                        let dst = &mut gm[(r / group) * len..(r / group + 1) * len];
                        for k in 0..len {
                            dst[k] += xs[r * len + k] * gd[r * len + k];
                        }
                    }
                    accumulate(grads, *mask, mv.shape(), gm);
                }
            }
            Op::Select { x, rows } => {
                let xv = self.value(*x);
                let len = xv.row_len();
                let mut gx = vec![T::zero(); xv.numel()];
                for (i, r) in rows.iter().enumerate() {
                    for k in 0..len {
                        gx[r * len + k] += gd[i * len + k];
                    }
                }
                accumulate(grads, *x, xv.shape(), gx);
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, xv.shape(), vec![gd[0]; xv.numel()]);
            }
            Op::Tuplet { query, support, positives, weights } => {
                let qv = self.value(*query);
                let sv = self.value(*support);
                let episodes = qv.rows();
                let n = sv.rows() / episodes;
                let len = qv.row_len();
                let scale = gd[0].as_f64() / episodes as f64;
                let mut gq = vec![T::zero(); qv.numel()];
                let mut gs = vec![T::zero(); sv.numel()];
                for b in 0..episodes {
                    let pos = positives[b];
                    let w = &weights[b];
                    let wsum: f64 = w.iter().sum();
                    let q = qv.row(b);
                    for j in 0..n {
                        // ∂L/∂‖q−s_j‖²: Σw for the positive, −w_j for negatives.
                        let coef = if j == pos { wsum } else { -w[j] } * scale;
                        if coef == 0.0 {
                            continue;
                        }
                        let sj = sv.row(b * n + j);
                        for k in 0..len {
                            let d = 2.0 * coef * (q[k] - sj[k]).as_f64();
                            gq[b * len + k] += T::lit(d);
                            gs[(b * n + j) * len + k] -= T::lit(d);
                        }
                    }
                }
                if self.wants(*query) {
                    accumulate(grads, *query, qv.shape(), gq);
                }
                if self.wants(*support) {
                    accumulate(grads, *support, sv.shape(), gs);
                }
            }
        }
    }
}

fn squared_distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum()
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    let t = Tensor::new(shape.to_vec(), data).expect("gradient shape");
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

use std::collections::BTreeMap;

use crate::conv::{conv_backward, conv_forward, ConvSpec};
use crate::error::{invalid, Result, TensorError};
use crate::float::{matmul, Float};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    MulConst(Var, Tensor<T>),
    ChannelShift {
        x: Var,
        shift: Var,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Silu(Var),
    Upsample {
        x: Var,
        factor: [usize; 3],
    },
    SliceChannels {
        x: Var,
        start: usize,
    },
    SumChannels(Var),
    SoftmaxChannels(Var),
    Mse {
        pred: Var,
        target: Tensor<T>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to the parameters it touched.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Sum of squared gradient entries.
    pub fn sq_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum()
    }

    /// Add `other` entrywise; parameters present in only one side are kept.
    pub fn accumulate(&mut self, other: Gradients<T>) -> Result<()> {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(acc) => acc.add_assign(&g)?,
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        let s = T::cast(s);
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
}

/// A forward tape over a borrowed parameter store.
pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("non-parameter nodes always store their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let out = conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &spec)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        Ok(self.push(out, Op::Conv { x, w, b, spec }, &ins))
    }

    /// `x [N, I] · wᵀ + b` with `w [O, I]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (n, i, o) = match (xs.as_slice(), ws.as_slice()) {
            (&[n, i], &[o, wi]) if wi == i => (n, i, o),
            _ => {
                return Err(TensorError::Shape {
                    op: "linear",
                    expected: vec![ws.first().copied().unwrap_or(0), xs.get(1).copied().unwrap_or(0)],
                    got: ws,
                })
            }
        };
        self.value(b).expect_shape("linear bias", &[o])?;
        let mut out = vec![T::zero(); n * o];
        matmul(n, i, o, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        let bias = self.value(b).data();
        for row in out.chunks_mut(o) {
            for (v, &bv) in row.iter_mut().zip(bias) {
                *v = *v + bv;
            }
        }
        let t = Tensor::from_vec(&[n, o], out)?;
        Ok(self.push(t, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let out = self.value(x).zip_map(c, |p, q| p + q)?;
        Ok(self.push(out, Op::AddConst(x), &[x]))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let out = self.value(x).zip_map(&c, |p, q| p * q)?;
        Ok(self.push(out, Op::MulConst(x, c), &[x]))
    }

    /// Adds `shift [N, C]` to every spatial position of `x [N, C, D, H, W]`.
    pub fn channel_shift(&mut self, x: Var, shift: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        self.value(shift).expect_shape("channel_shift", &[n, c])?;
        let s = d * h * w;
        let mut out = self.value(x).clone();
        let sh = self.value(shift).data().to_vec();
        for (k, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            let v = sh[k];
            chunk.iter_mut().for_each(|e| *e = *e + v);
        }
        Ok(self.push(out, Op::ChannelShift { x, shift }, &[x, shift]))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        if groups == 0 || c % groups != 0 {
            return Err(invalid("group_norm", format!("{groups} groups do not divide {c} channels")));
        }
        self.value(gamma).expect_shape("group_norm gamma", &[c])?;
        self.value(beta).expect_shape("group_norm beta", &[c])?;
        let s = d * h * w;
        let cpg = c / groups;
        let m = cpg * s;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut means = Vec::with_capacity(n * groups);
        let mut rstds = Vec::with_capacity(n * groups);
        let eps = T::cast(eps);
        let mf = T::cast(m as f64);
        for b in 0..n {
            for gi in 0..groups {
                let start = (b * c + gi * cpg) * s;
                let seg = &xv[start..start + m];
                let mean = seg.iter().copied().sum::<T>() / mf;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
                let rstd = T::one() / (var + eps).sqrt();
                for ci in 0..cpg {
                    let ch = gi * cpg + ci;
                    let o = start + ci * s;
                    for k in 0..s {
                        out[o + k] = (xv[o + k] - mean) * rstd * g[ch] + bt[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let t = Tensor::from_vec(&[n, c, d, h, w], out)?;
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.push(out, Op::Silu(x), &[x])
    }

    /// Nearest-neighbour upsampling by an integer factor per spatial axis.
    pub fn upsample_nearest(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let [fd, fh, fw] = factor;
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * od * oh * ow];
        for nc in 0..n * c {
            let src = &xv[nc * d * h * w..(nc + 1) * d * h * w];
            let dst = &mut out[nc * od * oh * ow..(nc + 1) * od * oh * ow];
            for z in 0..od {
                for y in 0..oh {
                    let srow = ((z / fd) * h + y / fh) * w;
                    let drow = (z * oh + y) * ow;
                    for xx in 0..ow {
                        dst[drow + xx] = src[srow + xx / fw];
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, od, oh, ow], out)?;
        Ok(self.push(t, Op::Upsample { x, factor }, &[x]))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        if start + len > c {
            return Err(invalid("slice_channels", format!("{start}+{len} exceeds {c} channels")));
        }
        let s = d * h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * s);
        for b in 0..n {
            out.extend_from_slice(&xv[(b * c + start) * s..(b * c + start + len) * s]);
        }
        let t = Tensor::from_vec(&[n, len, d, h, w], out)?;
        Ok(self.push(t, Op::SliceChannels { x, start }, &[x]))
    }

    pub fn sum_channels(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let s = d * h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * s];
        for b in 0..n {
            for ci in 0..c {
                let src = &xv[(b * c + ci) * s..(b * c + ci + 1) * s];
                for (o, &v) in out[b * s..(b + 1) * s].iter_mut().zip(src) {
                    *o = *o + v;
                }
            }
        }
        let t = Tensor::from_vec(&[n, 1, d, h, w], out)?;
        Ok(self.push(t, Op::SumChannels(x), &[x]))
    }

    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = self.value(x).dims5()?;
        let s = d * h * w;
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for k in 0..s {
                let at = |ci: usize| (b * c + ci) * s + k;
                let mx = (0..c).map(|ci| xv[at(ci)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for ci in 0..c {
                    let e = (xv[at(ci)] - mx).exp();
                    out[at(ci)] = e;
                    z = z + e;
                }
                for ci in 0..c {
                    out[at(ci)] = out[at(ci)] / z;
                }
            }
        }
        let t = Tensor::from_vec(&[n, c, d, h, w], out)?;
        Ok(self.push(t, Op::SoftmaxChannels(x), &[x]))
    }

    /// Mean squared error against a constant target; a `[1]` tensor.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        p.expect_shape("mse", target.shape())?;
        let n = T::cast(p.len() as f64);
        let loss = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, &[pred]))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(invalid("backward", "root must be a single element"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        let mut out = Gradients::default();

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            let send = |v: Var, g: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| -> Result<()> {
                if !self.nodes[v.0].needs_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => {
                        *slot = Some(g);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    out.grads.insert(*id, gy);
                }
                Op::Conv { x, w, b, spec } => {
                    let need_dx = self.nodes[x.0].needs_grad;
                    let g = conv_backward(self.value(*x), self.value(*w), &gy, spec, need_dx)?;
                    if let Some(dx) = g.dx {
                        send(*x, dx, &mut grads)?;
                    }
                    send(*w, g.dw, &mut grads)?;
                    if let Some(b) = b {
                        send(*b, g.db, &mut grads)?;
                    }
                }
                Op::Linear { x, w, b } => {
                    let xs = self.value(*x);
                    let wv = self.value(*w);
                    let (n, i) = (xs.shape()[0], xs.shape()[1]);
                    let o = wv.shape()[0];
                    let mut dw = vec![T::zero(); o * i];
                    matmul(o, n, i, gy.data(), true, xs.data(), false, &mut dw, false);
                    let mut db = vec![T::zero(); o];
                    for row in gy.data().chunks(o) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut dx = vec![T::zero(); n * i];
                        matmul(n, o, i, gy.data(), false, wv.data(), false, &mut dx, false);
                        send(*x, Tensor::from_vec(&[n, i], dx)?, &mut grads)?;
                    }
                    send(*w, Tensor::from_vec(&[o, i], dw)?, &mut grads)?;
                    send(*b, Tensor::from_vec(&[o], db)?, &mut grads)?;
                }
                Op::Add(a, b) => {
                    send(*a, gy.clone(), &mut grads)?;
                    send(*b, gy, &mut grads)?;
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    send(*x, gy.map(|v| v * s), &mut grads)?;
                }
                Op::AddConst(x) => send(*x, gy, &mut grads)?,
                Op::MulConst(x, c) => {
                    send(*x, gy.zip_map(c, |g, k| g * k)?, &mut grads)?;
                }
                Op::ChannelShift { x, shift } => {
                    let [n, c, d, h, w] = gy.dims5()?;
                    let s = d * h * w;
                    let ds: Vec<T> = gy.data().chunks(s).map(|r| r.iter().copied().sum()).collect();
                    send(*shift, Tensor::from_vec(&[n, c], ds)?, &mut grads)?;
                    send(*x, gy, &mut grads)?;
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    mean,
                    rstd,
                } => {
                    let [n, c, d, h, w] = gy.dims5()?;
                    let s = d * h * w;
                    let cpg = c / groups;
                    let m = T::cast((cpg * s) as f64);
                    let xv = self.value(*x).data();
                    let g = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); xv.len()];
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    let gyd = gy.data();
                    for b in 0..n {
                        for gi in 0..*groups {
                            let k = b * groups + gi;
                            let (mu, rs) = (mean[k], rstd[k]);
                            let start = (b * c + gi * cpg) * s;
                            let mut sum_dxh = T::zero();
                            let mut sum_dxh_xh = T::zero();
                            for ci in 0..cpg {
                                let ch = gi * cpg + ci;
                                let o = start + ci * s;
                                for e in 0..s {
                                    let xh = (xv[o + e] - mu) * rs;
                                    let dy = gyd[o + e];
                                    dgamma[ch] = dgamma[ch] + dy * xh;
                                    dbeta[ch] = dbeta[ch] + dy;
                                    let dxh = dy * g[ch];
                                    sum_dxh = sum_dxh + dxh;
                                    sum_dxh_xh = sum_dxh_xh + dxh * xh;
                                }
                            }
                            let a = sum_dxh / m;
                            let bcoef = sum_dxh_xh / m;
                            for ci in 0..cpg {
                                let ch = gi * cpg + ci;
                                let o = start + ci * s;
                                for e in 0..s {
                                    let xh = (xv[o + e] - mu) * rs;
                                    let dxh = gyd[o + e] * g[ch];
                                    dx[o + e] = rs * (dxh - a - xh * bcoef);
                                }
                            }
                        }
                    }
                    send(*x, Tensor::from_vec(gy.shape(), dx)?, &mut grads)?;
                    send(*gamma, Tensor::from_vec(&[c], dgamma)?, &mut grads)?;
                    send(*beta, Tensor::from_vec(&[c], dbeta)?, &mut grads)?;
                }
                Op::Silu(x) => {
                    let dx = self.value(*x).zip_map(&gy, |v, g| {
                        let sig = T::one() / (T::one() + (-v).exp());
                        g * sig * (T::one() + v * (T::one() - sig))
                    })?;
                    send(*x, dx, &mut grads)?;
                }
                Op::Upsample { x, factor } => {
                    let [n, c, d, h, w] = self.value(*x).dims5()?;
                    let [fd, fh, fw] = *factor;
                    let (od, oh, ow) = (d * fd, h * fh, w * fw);
                    let mut dx = vec![T::zero(); n * c * d * h * w];
                    let gyd = gy.data();
                    for nc in 0..n * c {
                        let src = &gyd[nc * od * oh * ow..(nc + 1) * od * oh * ow];
                        let dst = &mut dx[nc * d * h * w..(nc + 1) * d * h * w];
                        for z in 0..od {
                            for y in 0..oh {
                                let drow = ((z / fd) * h + y / fh) * w;
                                let srow = (z * oh + y) * ow;
                                for xx in 0..ow {
                                    dst[drow + xx / fw] = dst[drow + xx / fw] + src[srow + xx];
                                }
                            }
                        }
                    }
                    send(*x, Tensor::from_vec(&[n, c, d, h, w], dx)?, &mut grads)?;
                }
                Op::SliceChannels { x, start } => {
                    let [n, c, d, h, w] = self.value(*x).dims5()?;
                    let len = gy.shape()[1];
                    let s = d * h * w;
                    let mut dx = vec![T::zero(); n * c * s];
                    for b in 0..n {
                        dx[(b * c + start) * s..(b * c + start + len) * s]
                            .copy_from_slice(&gy.data()[b * len * s..(b + 1) * len * s]);
                    }
                    send(*x, Tensor::from_vec(&[n, c, d, h, w], dx)?, &mut grads)?;
                }
                Op::SumChannels(x) => {
                    let [n, c, d, h, w] = self.value(*x).dims5()?;
                    let s = d * h * w;
                    let mut dx = Vec::with_capacity(n * c * s);
                    for b in 0..n {
                        for _ in 0..c {
                            dx.extend_from_slice(&gy.data()[b * s..(b + 1) * s]);
                        }
                    }
                    send(*x, Tensor::from_vec(&[n, c, d, h, w], dx)?, &mut grads)?;
                }
                Op::SoftmaxChannels(x) => {
                    let p = node.value.as_ref().expect("softmax keeps its output");
                    let [n, c, d, h, w] = p.dims5()?;
                    let s = d * h * w;
                    let (pv, gv) = (p.data(), gy.data());
                    let mut dx = vec![T::zero(); pv.len()];
                    for b in 0..n {
                        for k in 0..s {
                            let at = |ci: usize| (b * c + ci) * s + k;
                            let dot = (0..c).map(|ci| pv[at(ci)] * gv[at(ci)]).sum::<T>();
                            for ci in 0..c {
                                dx[at(ci)] = pv[at(ci)] * (gv[at(ci)] - dot);
                            }
                        }
                    }
                    send(*x, Tensor::from_vec(&[n, c, d, h, w], dx)?, &mut grads)?;
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let k = gy.data()[0] * T::cast(2.0 / p.len() as f64);
                    send(*pred, p.zip_map(target, |a, b| (a - b) * k)?, &mut grads)?;
                }
            }
        }
        Ok(out)
    }
}

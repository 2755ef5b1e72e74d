use super::kernels::{self, ConvGeom};
use super::{check_shape, Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f32),
    Tanh,
    Sigmoid,
}

/// Per-channel running mean and (unbiased) variance for batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
}

impl RunningStats {
    pub fn new(channels: usize, momentum: f32) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
        }
    }
}

pub enum BatchNormMode<'a> {
    /// Normalize with batch statistics; fold them into `stats` when given.
    Train(Option<&'a mut RunningStats>),
    /// Normalize with stored running statistics.
    Eval(&'a RunningStats),
}

/// Lower clamp applied to predicted probabilities in [`Tape::bce_loss`].
pub const BCE_EPS: f32 = 1e-7;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    MatMul(Var, Var),
    BiasAdd(Var, Var),
    Reshape(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Act(Var, Activation),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Bce {
        pred: Var,
        target: Var,
    },
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Records executed operations in order; every record only refers to earlier
/// records, so reverse insertion order is a valid reverse topological order.
///
/// Values are stored as `T`; tensors enter and leave the tape as `f32`.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        msg: msg.into(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }
}

fn lift<T: Real>(data: &[f32]) -> Vec<T> {
    data.iter().map(|&v| T::from_f32(v)).collect()
}

impl<T: Real> Tape<T> {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Copies `t` onto the tape; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), lift(&t.data), t.requires_grad, Op::Leaf)
    }

    /// Records a non-differentiated input.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        check_shape("constant", shape, data.len())?;
        Ok(self.push(shape.to_vec(), lift(&data), false, Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Shapes of every recorded value, in execution order.
    pub fn shapes(&self) -> impl Iterator<Item = &[usize]> + '_ {
        self.nodes.iter().map(|n| n.shape.as_slice())
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.iter().map(|v| v.as_f32()).collect()).expect("tape nodes hold valid shapes")
    }

    /// Adds the gradient recorded for `v` into `t`'s gradient buffer.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(&g.iter().map(|v| v.as_f32()).collect::<Vec<_>>()),
            None => t.accumulate_grad(&vec![0.0; t.numel()]),
        }
    }

    /// For every non-smooth operation on the tape, which side of its kink the
    /// recorded inputs fell on. Two evaluations with equal signatures are on
    /// the same smooth piece.
    pub fn branch_signature(&self) -> Vec<bool> {
        let (lo, hi) = bce_bounds::<T>();
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Act(x, Activation::LeakyRelu(_)) => {
                    sig.extend(self.nodes[x.0].value.iter().map(|&v| v >= T::zero()));
                }
                Op::Bce { pred, .. } => {
                    sig.extend(
                        self.nodes[pred.0]
                            .value
                            .iter()
                            .flat_map(|&p| [p < lo, p > hi]),
                    );
                }
                _ => {}
            }
        }
        sig
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b)?;
        let value = self.zip(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), value, self.rg(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b)?;
        let value = self.zip(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), value, self.rg(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b)?;
        let value = self.zip(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), value, self.rg(&[a, b]), Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let st = T::from_f32(s);
        let value = self.value(a).iter().map(|&x| x * st).collect();
        self.push(self.shape(a).to_vec(), value, self.rg(&[a]), Op::Scale(a, s))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    /// `[m,k]·[k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, T::zero());
        Ok(self.push(vec![m, n], out, self.rg(&[a, b]), Op::MatMul(a, b)))
    }

    /// Adds a per-channel bias `b[C]` along axis 1 of `x`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b));
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(mismatch("bias_add", &sx, sb));
        }
        let inner: usize = sx[2..].iter().product();
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = bias[i % sx[1]];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(sx, out, self.rg(&[x, b]), Op::BiasAdd(x, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape("reshape", shape, self.value(x).len())?;
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, self.rg(&[x]), Op::Reshape(x)))
    }

    fn conv_bias(&self, name: &'static str, b: Option<Var>, cout: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(mismatch(name, &[cout], self.shape(b)));
            }
        }
        Ok(())
    }

    fn add_channel_bias(&self, out: &mut [T], b: Option<Var>, cout: usize, plane: usize) {
        if let Some(b) = b {
            let bias = self.value(b);
            for (i, chunk) in out.chunks_mut(plane).enumerate() {
                let bv = bias[i % cout];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    /// Zero-padded strided convolution; `x: [N,Cin,H,W]`, `w: [Cout,Cin,kh,kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let ho = kernels::conv_out_dim(sx[2], sw[2], stride, pad);
        let wo = kernels::conv_out_dim(sx[3], sw[3], stride, pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(invalid(
                "conv2d",
                format!("kernel {:?} does not fit padded input {:?} (pad {pad})", &sw[2..], &sx[2..]),
            ));
        };
        self.conv_bias("conv2d", b, sw[0])?;
        let g = ConvGeom {
            n: sx[0],
            c: sx[1],
            h: sx[2],
            w: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            ho,
            wo,
        };
        let cout = sw[0];
        let col = kernels::im2col(self.value(x), &g);
        let mut out_cm = vec![T::zero(); cout * g.col_cols()];
        kernels::gemm(
            cout,
            g.col_rows(),
            g.col_cols(),
            self.value(w),
            false,
            &col,
            false,
            &mut out_cm,
            T::zero(),
        );
        let mut out = kernels::cm_to_nchw(&out_cm, g.n, cout, ho * wo);
        self.add_channel_bias(&mut out, b, cout, ho * wo);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            vec![g.n, cout, ho, wo],
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// Transposed convolution; `x: [N,Cin,H,W]`, `w: [Cin,Cout,kh,kw]`.
    ///
    /// Equals the input-gradient of [`Tape::conv2d`] with the same kernel.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] {
            return Err(mismatch("conv_transpose2d", &sx, &sw));
        }
        let ho = kernels::conv_transpose_out_dim(sx[2], sw[2], stride, pad);
        let wo = kernels::conv_transpose_out_dim(sx[3], sw[3], stride, pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(invalid(
                "conv_transpose2d",
                format!("non-positive output size for input {:?}, kernel {:?}", &sx[2..], &sw[2..]),
            ));
        };
        let (cin, cout) = (sw[0], sw[1]);
        self.conv_bias("conv_transpose2d", b, cout)?;
        let g = self.convt_geom(&sx, &sw, stride, pad, ho, wo);
        let x_cm = kernels::nchw_to_cm(self.value(x), g.n, cin, sx[2] * sx[3]);
        let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
        kernels::gemm(
            g.col_rows(),
            cin,
            g.col_cols(),
            self.value(w),
            true,
            &x_cm,
            false,
            &mut col,
            T::zero(),
        );
        let mut out = vec![T::zero(); g.n * cout * ho * wo];
        kernels::col2im(&col, &g, &mut out);
        self.add_channel_bias(&mut out, b, cout, ho * wo);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(
            vec![g.n, cout, ho, wo],
            out,
            rg,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    // The conv whose data-gradient this transposed conv computes maps the
    // [N,Cout,ho,wo] output back to the [N,Cin,H,W] input.
    fn convt_geom(
        &self,
        sx: &[usize],
        sw: &[usize],
        stride: usize,
        pad: usize,
        ho: usize,
        wo: usize,
    ) -> ConvGeom {
        ConvGeom {
            n: sx[0],
            c: sw[1],
            h: ho,
            w: wo,
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            ho: sx[2],
            wo: sx[3],
        }
    }

    /// Per-channel batch normalization of `x: [N,C,H,W]`.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
        mode: BatchNormMode<'_>,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(invalid("batch_norm2d", format!("expected NCHW input, got {sx:?}")));
        }
        let (n, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("batch_norm2d", &[c], self.shape(gamma)));
        }
        let count = n * plane;
        let xv = self.value(x);
        let (mean, inv_std, train) = match mode {
            BatchNormMode::Train(stats) => {
                if count < 2 {
                    return Err(TensorError::DegenerateBatch(count));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![0.0f64; c];
                for ci in 0..c {
                    let mut s = 0.0f64;
                    for ni in 0..n {
                        s += xv[(ni * c + ci) * plane..][..plane]
                            .iter()
                            .map(|&v| v.as_f64())
                            .sum::<f64>();
                    }
                    let mu = s / count as f64;
                    let mut ss = 0.0f64;
                    for ni in 0..n {
                        ss += xv[(ni * c + ci) * plane..][..plane]
                            .iter()
                            .map(|&v| (v.as_f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ci] = T::from(mu).expect("finite mean");
                    var[ci] = ss / count as f64;
                }
                if let Some(stats) = stats {
                    let m = stats.momentum;
                    let unbias = count as f32 / (count - 1) as f32;
                    for ci in 0..c {
                        stats.mean[ci] = (1.0 - m) * stats.mean[ci] + m * mean[ci].as_f32();
                        stats.var[ci] = (1.0 - m) * stats.var[ci] + m * (var[ci] as f32) * unbias;
                    }
                }
                let eps = T::from_f32(eps);
                let inv_std: Vec<T> = var
                    .iter()
                    .map(|&v| T::one() / (T::from(v).expect("finite variance") + eps).sqrt())
                    .collect();
                (mean, inv_std, true)
            }
            BatchNormMode::Eval(stats) => {
                if stats.mean.len() != c || stats.var.len() != c {
                    return Err(mismatch("batch_norm2d", &[c], &[stats.mean.len()]));
                }
                let eps = T::from_f32(eps);
                let inv_std: Vec<T> = stats
                    .var
                    .iter()
                    .map(|&v| T::one() / (T::from_f32(v) + eps).sqrt())
                    .collect();
                (lift(&stats.mean), inv_std, false)
            }
        };
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * plane;
                let (mu, is, g, b) = (mean[ci], inv_std[ci], gv[ci], bv[ci]);
                for (o, &v) in out[off..off + plane].iter_mut().zip(&xv[off..off + plane]) {
                    *o = g * ((v - mu) * is) + b;
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            sx,
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            },
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let f: fn(T, T) -> T = match kind {
            Activation::LeakyRelu(_) => |v, s| if v >= T::zero() { v } else { s * v },
            Activation::Tanh => |v, _| v.tanh(),
            Activation::Sigmoid => |v, _| T::one() / (T::one() + (-v).exp()),
        };
        let slope = match kind {
            Activation::LeakyRelu(s) => T::from_f32(s),
            _ => T::zero(),
        };
        let value = self.value(x).iter().map(|&v| f(v, slope)).collect();
        self.push(self.shape(x).to_vec(), value, self.rg(&[x]), Op::Act(x, kind))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let chunk = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Mean binary cross-entropy with predictions clamped to `[ε, 1−ε]`.
    pub fn bce_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.binary("bce_loss", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        let (lo, hi) = bce_bounds::<T>();
        let sum: f64 = p
            .iter()
            .zip(t)
            .map(|(&p, &t)| {
                let p = clamp_prob(p, lo, hi).as_f64();
                let t = t.as_f64();
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let value = vec![T::from(sum / p.len() as f64).expect("finite loss")];
        let rg = self.rg(&[pred, target]);
        Ok(self.push(vec![1], value, rg, Op::Bce { pred, target }))
    }

    pub fn reduce_mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mean = v.iter().map(|&a| a.as_f64()).sum::<f64>() / v.len() as f64;
        let value = vec![T::from(mean).expect("finite mean")];
        self.push(vec![1], value, self.rg(&[x]), Op::Mean(x))
    }

    /// Reverse pass from a scalar loss. Leaves that require a gradient but
    /// are not reachable from `loss` receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_with(loss, vec![T::one()])
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `out`.
    pub fn backward_with(&mut self, out: Var, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.value(out).len() {
            return Err(mismatch("backward", self.shape(out), &[seed.len()]));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[out.0].grad = Some(seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contribs = self.vjp(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, cg) in contribs {
                let node = &mut self.nodes[v.0];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(cg),
                }
            }
        }
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![T::zero(); node.value.len()]);
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect()));
                }
                if self.needs(*b) {
                    out.push((*b, g.iter().zip(av).map(|(&g, &a)| g * a).collect()));
                }
            }
            Op::Scale(a, s) => {
                let s = T::from_f32(*s);
                out.push((*a, g.iter().map(|&v| v * s).collect()))
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, g, false, self.value(*b), true, &mut ga, T::zero());
                    out.push((*a, ga));
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, self.value(*a), true, g, false, &mut gb, T::zero());
                    out.push((*b, gb));
                }
            }
            Op::BiasAdd(x, b) => {
                out.push((*x, g.to_vec()));
                if self.needs(*b) {
                    let c = self.shape(*b)[0];
                    out.push((*b, channel_sums(g, c, node.shape[2..].iter().product())));
                }
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let geom = ConvGeom {
                    n: sx[0],
                    c: sx[1],
                    h: sx[2],
                    w: sx[3],
                    kh: sw[2],
                    kw: sw[3],
                    stride: *stride,
                    pad: *pad,
                    ho: node.shape[2],
                    wo: node.shape[3],
                };
                let cout = sw[0];
                let plane = geom.ho * geom.wo;
                let g_cm = kernels::nchw_to_cm(g, geom.n, cout, plane);
                if self.needs(*w) {
                    let col = kernels::im2col(self.value(*x), &geom);
                    let mut gw = vec![T::zero(); cout * geom.col_rows()];
                    kernels::gemm(
                        cout,
                        geom.col_cols(),
                        geom.col_rows(),
                        &g_cm,
                        false,
                        &col,
                        true,
                        &mut gw,
                        T::zero(),
                    );
                    out.push((*w, gw));
                }
                if self.needs(*x) {
                    let mut gcol = vec![T::zero(); geom.col_rows() * geom.col_cols()];
                    kernels::gemm(
                        geom.col_rows(),
                        cout,
                        geom.col_cols(),
                        self.value(*w),
                        true,
                        &g_cm,
                        false,
                        &mut gcol,
                        T::zero(),
                    );
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    kernels::col2im(&gcol, &geom, &mut gx);
                    out.push((*x, gx));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    out.push((b, channel_sums(g, cout, plane)));
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let geom = self.convt_geom(sx, sw, *stride, *pad, node.shape[2], node.shape[3]);
                let (cin, cout) = (sw[0], sw[1]);
                let gcol = kernels::im2col(g, &geom);
                if self.needs(*x) {
                    let mut gx_cm = vec![T::zero(); cin * geom.col_cols()];
                    kernels::gemm(
                        cin,
                        geom.col_rows(),
                        geom.col_cols(),
                        self.value(*w),
                        false,
                        &gcol,
                        false,
                        &mut gx_cm,
                        T::zero(),
                    );
                    out.push((*x, kernels::cm_to_nchw(&gx_cm, sx[0], cin, sx[2] * sx[3])));
                }
                if self.needs(*w) {
                    let x_cm = kernels::nchw_to_cm(self.value(*x), sx[0], cin, sx[2] * sx[3]);
                    let mut gw = vec![T::zero(); cin * geom.col_rows()];
                    kernels::gemm(
                        cin,
                        geom.col_cols(),
                        geom.col_rows(),
                        &x_cm,
                        false,
                        &gcol,
                        true,
                        &mut gw,
                        T::zero(),
                    );
                    out.push((*w, gw));
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    out.push((b, channel_sums(g, cout, node.shape[2] * node.shape[3])));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                train,
            } => {
                let sx = self.shape(*x);
                let (n, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
                let count = T::from(n * plane).expect("count fits");
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * plane;
                        let (mu, is) = (mean[ci], inv_std[ci]);
                        let (mut sg, mut sgx) = (T::zero(), T::zero());
                        for (&gi, &xi) in g[off..off + plane].iter().zip(&xv[off..off + plane]) {
                            sg += gi;
                            sgx += gi * (xi - mu) * is;
                        }
                        sum_g[ci] += sg;
                        sum_gx[ci] += sgx;
                    }
                }
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); xv.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * plane;
                            let (mu, is) = (mean[ci], inv_std[ci]);
                            let scale = gv[ci] * is;
                            let dst = &mut gx[off..off + plane];
                            let src = g[off..off + plane].iter().zip(&xv[off..off + plane]);
                            if *train {
                                let (mg, mgx) = (sum_g[ci] / count, sum_gx[ci] / count);
                                for (d, (&gi, &xi)) in dst.iter_mut().zip(src) {
                                    *d = scale * (gi - mg - (xi - mu) * is * mgx);
                                }
                            } else {
                                for (d, (&gi, _)) in dst.iter_mut().zip(src) {
                                    *d = scale * gi;
                                }
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                out.push((*gamma, sum_gx));
                out.push((*beta, sum_g));
            }
            Op::Act(x, kind) => {
                let grad = match kind {
                    Activation::LeakyRelu(s) => {
                        let s = T::from_f32(*s);
                        self.value(*x)
                            .iter()
                            .zip(g)
                            .map(|(&v, &g)| if v >= T::zero() { g } else { g * s })
                            .collect()
                    }
                    Activation::Tanh => node
                        .value
                        .iter()
                        .zip(g)
                        .map(|(&y, &g)| g * (T::one() - y * y))
                        .collect(),
                    Activation::Sigmoid => node
                        .value
                        .iter()
                        .zip(g)
                        .map(|(&y, &g)| g * y * (T::one() - y))
                        .collect(),
                };
                out.push((*x, grad));
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    if self.needs(*v) {
                        let mut gv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[o * total + offset..][..chunk]);
                        }
                        out.push((*v, gv));
                    }
                    offset += chunk;
                }
            }
            Op::Bce { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let scale = g[0] / T::from(p.len()).expect("length fits");
                let (lo, hi) = bce_bounds::<T>();
                let one = T::one();
                if self.needs(*pred) {
                    let gp = p
                        .iter()
                        .zip(t)
                        .map(|(&p, &t)| {
                            if p < lo || p > hi {
                                T::zero()
                            } else {
                                scale * (-t / p + (one - t) / (one - p))
                            }
                        })
                        .collect();
                    out.push((*pred, gp));
                }
                if self.needs(*target) {
                    let gt = p
                        .iter()
                        .map(|&p| {
                            let p = clamp_prob(p, lo, hi);
                            -scale * (p.ln() - (one - p).ln())
                        })
                        .collect();
                    out.push((*target, gt));
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                out.push((*x, vec![g[0] / T::from(n).expect("length fits"); n]));
            }
        }
        out
    }
}

fn channel_sums<T: Real>(g: &[T], c: usize, inner: usize) -> Vec<T> {
    let mut sums = vec![T::zero(); c];
    for (i, chunk) in g.chunks(inner).enumerate() {
        sums[i % c] += chunk.iter().copied().sum::<T>();
    }
    sums
}

/// Clamps into `[lo, hi]` but lets NaN through, so a diverged prediction
/// shows up as a NaN loss instead of a bounded one.
fn clamp_prob<T: Real>(p: T, lo: T, hi: T) -> T {
    if p.is_nan() {
        p
    } else {
        p.max(lo).min(hi)
    }
}

/// The BCE clamp interval `[ε, 1−ε]`, computed in `T`.
fn bce_bounds<T: Real>() -> (T, T) {
    let eps = T::from_f32(BCE_EPS);
    (eps, T::one() - eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_input, finite_diff_check, OpCase, OpProbe, TapeFn};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap()
    }

    fn probe_err(case: OpCase, inputs: &[Tensor], wrt: usize) -> f64 {
        let probe = OpProbe { case: &case, inputs, wrt };
        finite_diff_check(&probe, &inputs[wrt], 1e-3).unwrap()
    }

    fn close(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "[{i}] {x} vs {y}");
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let a = t.constant(&[2], vec![1.0, 2.0]).unwrap();
        let b = t.constant(&[2], vec![3.0, 4.0]).unwrap();
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s), &[4.0, 6.0]);
        let d = t.sub(a, b).unwrap();
        assert_eq!(t.value(d), &[-2.0, -2.0]);
        let m = t.mul(a, b).unwrap();
        assert_eq!(t.value(m), &[3.0, 8.0]);
        let c = t.constant(&[2], vec![1.0, -1.0]).unwrap();
        let z = t.scale(c, 0.0);
        assert_eq!(t.value(z), &[0.0, 0.0]);

        let bad = t.constant(&[3], vec![0.0; 3]).unwrap();
        let err = t.add(a, bad).unwrap_err();
        assert_eq!(err, TensorError::ShapeMismatch { op: "add", lhs: vec![2], rhs: vec![3] });
        assert!(err.to_string().contains("[2]") && err.to_string().contains("[3]"));
    }

    #[test]
    fn mul_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(&Tensor::new(&[1], vec![2.0]).unwrap().requiring_grad());
        let b = t.leaf(&Tensor::new(&[1], vec![3.0]).unwrap().requiring_grad());
        let m = t.mul(a, b).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[3.0]);
        assert_eq!(t.grad(b).unwrap(), &[2.0]);
        let inputs = [Tensor::new(&[1], vec![2.0]).unwrap(), Tensor::new(&[1], vec![3.0]).unwrap()];
        assert!(probe_err(OpCase::Mul, &inputs, 0) < 1e-3);
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = t.matmul(i, m).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let r = t.constant(&[1, 2], vec![1.0, 1.0]).unwrap();
        let c = t.constant(&[2, 1], vec![1.0, 1.0]).unwrap();
        let rc = t.matmul(r, c).unwrap();
        assert_eq!((t.shape(rc), t.value(rc)), (&[1usize, 1][..], &[2.0f32][..]));
        assert!(matches!(t.matmul(r, r), Err(TensorError::ShapeMismatch { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2])];
        for wrt in 0..2 {
            assert!(probe_err(OpCase::MatMul, &inputs, wrt) < 1e-3);
        }
    }

    /// Direct loop convolution: forward and the three gradients for upstream `g`.
    struct NaiveConv {
        out: Vec<f32>,
        dx: Vec<f32>,
        dw: Vec<f32>,
        db: Vec<f32>,
    }

    fn naive_conv(x: &Tensor, w: &Tensor, b: &[f32], stride: usize, pad: usize, g: &[f32]) -> NaiveConv {
        let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let xi = |a: usize, c: usize, y: usize, z: usize| ((a * ci + c) * h + y) * wd + z;
        let wi = |o: usize, c: usize, y: usize, z: usize| ((o * ci + c) * kh + y) * kw + z;
        let oi = |a: usize, o: usize, y: usize, z: usize| ((a * co + o) * oh + y) * ow + z;
        let mut r = NaiveConv {
            out: vec![0.0; n * co * oh * ow],
            dx: vec![0.0; x.numel()],
            dw: vec![0.0; w.numel()],
            db: vec![0.0; co],
        };
        for a in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for z in 0..ow {
                        let mut acc = b[o] as f64;
                        let go = g[oi(a, o, y, z)];
                        r.db[o] += go;
                        for c in 0..ci {
                            for p in 0..kh {
                                for q in 0..kw {
                                    let (iy, iz) = ((y * stride + p) as isize - pad as isize, (z * stride + q) as isize - pad as isize);
                                    if iy < 0 || iz < 0 || iy >= h as isize || iz >= wd as isize {
                                        continue;
                                    }
                                    let (iy, iz) = (iy as usize, iz as usize);
                                    acc += (x.data()[xi(a, c, iy, iz)] * w.data()[wi(o, c, p, q)]) as f64;
                                    r.dx[xi(a, c, iy, iz)] += go * w.data()[wi(o, c, p, q)];
                                    r.dw[wi(o, c, p, q)] += go * x.data()[xi(a, c, iy, iz)];
                                }
                            }
                        }
                        r.out[oi(a, o, y, z)] = acc as f32;
                    }
                }
            }
        }
        r
    }

    #[test]
    fn conv2d_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, pad, k) in &[(1, 0, 3), (2, 1, 4), (1, 1, 2), (2, 0, 3)] {
            let x = rand_tensor(&mut rng, &[1, 2, 5, 5]).requiring_grad();
            let w = rand_tensor(&mut rng, &[3, 2, k, k]).requiring_grad();
            let b = rand_tensor(&mut rng, &[3]).requiring_grad();
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.leaf(&x), t.leaf(&w), t.leaf(&b));
            let y = t.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
            let g: Vec<f32> = (0..t.value(y).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            t.backward_with(y, g.clone()).unwrap();
            let naive = naive_conv(&x, &w, b.data(), stride, pad, &g);
            close(t.value(y), &naive.out, 1e-5);
            close(t.grad(xv).unwrap(), &naive.dx, 1e-5);
            close(t.grad(wv).unwrap(), &naive.dw, 1e-5);
            close(t.grad(bv).unwrap(), &naive.db, 1e-5);
        }
    }

    #[test]
    fn conv2d_examples() {
        let mut t = Tape::new();
        let x = t.constant(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let w = t.constant(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = t.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!((t.shape(y), t.value(y)), (&[1usize, 1, 2, 2][..], &[4.0f32; 4][..]));

        let x = t.constant(&[64, 1, 32, 32], vec![0.5; 64 * 1024]).unwrap();
        let w = t.constant(&[64, 1, 4, 4], vec![0.1; 64 * 16]).unwrap();
        let y = t.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(t.shape(y), &[64, 64, 16, 16]);

        let small = t.constant(&[1, 1, 2, 2], vec![0.0; 4]).unwrap();
        let big = t.constant(&[1, 1, 5, 5], vec![0.0; 25]).unwrap();
        assert!(t.conv2d(small, big, None, 1, 1).is_err());
    }

    #[test]
    fn conv_transpose_shapes() {
        let mut t = Tape::new();
        let mut x = t.constant(&[2, 3, 4, 4], vec![0.1; 96]).unwrap();
        let mut sizes = vec![4];
        for _ in 0..3 {
            let c = t.shape(x)[1];
            let w = t.constant(&[c, 2, 4, 4], vec![0.05; c * 32]).unwrap();
            x = t.conv_transpose2d(x, w, None, 2, 1).unwrap();
            sizes.push(t.shape(x)[2]);
        }
        assert_eq!(sizes, vec![4, 8, 16, 32]);
        assert_eq!(t.shape(x), &[2, 2, 32, 32]);

        // (1 − 1)·1 − 2·2 + 2 < 1
        let x = t.constant(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let w = t.constant(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        assert!(t.conv_transpose2d(x, w, None, 1, 2).is_err());
    }

    fn dot(a: &[f32], b: &[f32]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn conv_transpose_is_the_adjoint(
            seed in 0u64..10_000, n in 1usize..3, ci in 1usize..4, co in 1usize..4,
            oh in 1usize..6, k in 1usize..5, stride in 1usize..3, pad in 0usize..2,
        ) {
            // input size whose conv output is `oh` and whose transpose maps back
            // to exactly the input size
            let h = (oh - 1) * stride + k;
            prop_assume!(h > 2 * pad);
            let h = h - 2 * pad;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = rand_tensor(&mut rng, &[n, ci, h, h]);
            let w = rand_tensor(&mut rng, &[co, ci, k, k]);
            let mut t = Tape::new();
            let (xv, wv) = (t.leaf(&x), t.leaf(&w));
            let cx = t.conv2d(xv, wv, None, stride, pad).unwrap();
            prop_assert_eq!(t.shape(cx), &[n, co, oh, oh]);
            let y = rand_tensor(&mut rng, t.shape(cx));
            let yv = t.leaf(&y);
            let ty = t.conv_transpose2d(yv, wv, None, stride, pad).unwrap();
            prop_assert_eq!(t.shape(ty), x.shape());
            let (lhs, rhs) = (dot(t.value(cx), y.data()), dot(x.data(), t.value(ty)));
            let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-6);
            prop_assert!(rel < 1e-4, "{} vs {}", lhs, rhs);
        }

        #[test]
        fn tensors_hold_product_of_shape(dims in prop::collection::vec(1usize..5, 1..5), extra in 1usize..3) {
            let n: usize = dims.iter().product();
            let t = Tensor::new(&dims, vec![0.0; n]).unwrap();
            prop_assert_eq!(t.numel(), n);
            prop_assert!(Tensor::new(&dims, vec![0.0; n + extra]).is_err());
        }
    }

    #[test]
    fn batch_norm_examples() {
        let mut t = Tape::new();
        let g = t.constant(&[2], vec![1.0; 2]).unwrap();
        let b = t.constant(&[2], vec![0.0; 2]).unwrap();
        let x = t.constant(&[2, 2, 2, 2], vec![3.5; 16]).unwrap();
        let y = t.batch_norm2d(x, g, b, 1e-5, BatchNormMode::Train(None)).unwrap();
        assert!(t.value(y).iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xr = rand_tensor(&mut rng, &[4, 2, 3, 3]);
        let x = t.leaf(&xr);
        let mut stats = RunningStats::new(2, 0.1);
        let y = t.batch_norm2d(x, g, b, 1e-5, BatchNormMode::Train(Some(&mut stats))).unwrap();
        let v = t.value(y);
        for c in 0..2 {
            let vals: Vec<f64> = (0..4).flat_map(|n| v[(n * 2 + c) * 9..][..9].iter().map(|&a| a as f64)).collect();
            let mean = vals.iter().sum::<f64>() / 36.0;
            let var = vals.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 36.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3, "{mean} {var}");
        }
        // running stats moved 10% of the way toward the batch statistics
        let ch0: Vec<f64> = (0..4).flat_map(|n| xr.data()[n * 18..][..9].iter().map(|&a| a as f64)).collect();
        let m0 = ch0.iter().sum::<f64>() / 36.0;
        let v0 = ch0.iter().map(|a| (a - m0).powi(2)).sum::<f64>() / 35.0;
        assert!((stats.mean[0] as f64 - 0.1 * m0).abs() < 1e-6);
        assert!((stats.var[0] as f64 - (0.9 + 0.1 * v0)).abs() < 1e-6);

        // eval mode applies the stored statistics
        let frozen = RunningStats { mean: vec![1.0, -1.0], var: vec![4.0, 0.25], momentum: 0.1 };
        let x = t.constant(&[1, 2, 1, 1], vec![3.0, 0.0]).unwrap();
        let y = t.batch_norm2d(x, g, b, 0.0, BatchNormMode::Eval(&frozen)).unwrap();
        close(t.value(y), &[1.0, 2.0], 1e-6);

        let one = t.constant(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        assert_eq!(
            t.batch_norm2d(one, g, b, 1e-5, BatchNormMode::Train(None)).unwrap_err(),
            TensorError::DegenerateBatch(1)
        );
    }

    #[test]
    fn batch_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inputs = [
            rand_tensor(&mut rng, &[2, 3, 4, 4]),
            Tensor::new(&[3], vec![0.8, 1.3, -0.6]).unwrap(),
            Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap(),
        ];
        for wrt in 0..3 {
            let err = probe_err(OpCase::BatchNorm { eps: 1e-5, stats: None }, &inputs, wrt);
            assert!(err < 1e-2, "input {wrt}: {err}");
        }
    }

    #[test]
    fn activation_examples() {
        let mut t = Tape::new();
        let x = t.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let l = t.activation(x, Activation::LeakyRelu(0.2));
        assert_eq!(t.value(l), &[-0.2, 0.0, 2.0]);
        let z = t.constant(&[1], vec![0.0]).unwrap();
        let th = t.activation(z, Activation::Tanh);
        let sg = t.activation(z, Activation::Sigmoid);
        assert_eq!((t.value(th)[0], t.value(sg)[0]), (0.0, 0.5));

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f32> = (0..20)
            .map(|_| {
                let m = rng.gen_range(0.05f32..2.0);
                if rng.gen_bool(0.5) { m } else { -m }
            })
            .collect();
        let x = [Tensor::new(&[20], x).unwrap()];
        for kind in [Activation::LeakyRelu(0.2), Activation::Tanh, Activation::Sigmoid] {
            assert!(probe_err(OpCase::Act(kind), &x, 0) < 1e-3, "{kind:?}");
        }
    }

    #[test]
    fn concat_examples() {
        let mut t = Tape::new();
        let z = t.constant(&[100], vec![0.5; 100]).unwrap();
        let y = t.constant(&[9], vec![1.0; 9]).unwrap();
        let zy = t.concat(&[z, y], 0).unwrap();
        assert_eq!(t.shape(zy), &[109]);
        let same = t.concat(&[z], 0).unwrap();
        assert_eq!(t.value(same), t.value(z));

        let a = t.leaf(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().requiring_grad());
        let b = t.leaf(&Tensor::new(&[2, 3], vec![5.0; 6]).unwrap().requiring_grad());
        let ab = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.value(ab), &[1.0, 2.0, 5.0, 5.0, 5.0, 3.0, 4.0, 5.0, 5.0, 5.0]);
        let g: Vec<f32> = (0..10).map(|i| i as f32).collect();
        t.backward_with(ab, g).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[0.0, 1.0, 5.0, 6.0]);
        assert_eq!(t.grad(b).unwrap(), &[2.0, 3.0, 4.0, 7.0, 8.0, 9.0]);

        let c = t.constant(&[3, 2], vec![0.0; 6]).unwrap();
        assert!(matches!(t.concat(&[a, c], 1), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn bce_examples() {
        let mut t = Tape::new();
        let p = t.constant(&[1], vec![0.5]).unwrap();
        let one = t.constant(&[1], vec![1.0]).unwrap();
        let l = t.bce_loss(p, one).unwrap();
        assert!((t.value(l)[0] - 0.693147).abs() < 1e-6);
        let p = t.constant(&[1], vec![1.0 - BCE_EPS]).unwrap();
        let l = t.bce_loss(p, one).unwrap();
        assert!(t.value(l)[0] < 1e-6);
        // clamping removes infinities
        let p = t.constant(&[2], vec![0.0, 1.0]).unwrap();
        let t10 = t.constant(&[2], vec![1.0, 0.0]).unwrap();
        let l = t.bce_loss(p, t10).unwrap();
        assert!(t.value(l)[0].is_finite());
        // but a NaN prediction is reported, not clamped away
        let p = t.constant(&[1], vec![f32::NAN]).unwrap();
        let l = t.bce_loss(p, one).unwrap();
        assert!(t.value(l)[0].is_nan());

        for target in [0.0, 1.0] {
            let inputs = [
                Tensor::new(&[2], vec![0.3, 0.7]).unwrap(),
                Tensor::new(&[2], vec![target; 2]).unwrap(),
            ];
            assert!(probe_err(OpCase::Bce, &inputs, 0) < 1e-3);
        }
    }

    #[test]
    fn mean_examples() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().requiring_grad());
        let m = t.reduce_mean(x);
        assert_eq!(t.value(m), &[2.0]);
        t.backward(m).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0 / 3.0; 3]);
        let c = t.constant(&[5], vec![-0.25; 5]).unwrap();
        let mc = t.reduce_mean(c);
        assert_eq!(t.value(mc), &[-0.25]);
    }

    #[test]
    fn backward_sums_paths_and_zeroes_unreachable() {
        let mut t = Tape::new();
        let w = t.leaf(&Tensor::new(&[2], vec![1.5, -2.0]).unwrap().requiring_grad());
        let x = t.constant(&[2], vec![3.0, 4.0]).unwrap();
        let stray = t.leaf(&Tensor::new(&[2], vec![1.0, 1.0]).unwrap().requiring_grad());
        let wx = t.mul(w, x).unwrap();
        let wxw = t.mul(wx, w).unwrap();
        let sum = t.add(wx, wxw).unwrap();
        let loss = t.reduce_mean(sum);
        t.backward(loss).unwrap();
        // d/dw mean(w·x + w²·x) = (x + 2w·x) / 2
        close(t.grad(w).unwrap(), &[(3.0 + 9.0) / 2.0, (4.0 - 16.0) / 2.0], 1e-6);
        assert_eq!(t.grad(stray).unwrap(), &[0.0, 0.0]);
        assert_eq!(t.backward(sum).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
    }

    struct Square;
    impl TapeFn for Square {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> super::Result<Var> {
            tape.mul(x, x)
        }
    }

    struct Leaky;
    impl TapeFn for Leaky {
        fn eval<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> super::Result<Var> {
            Ok(tape.activation(x, Activation::LeakyRelu(0.2)))
        }
    }

    #[test]
    fn finite_diff_examples() {
        let three = Tensor::new(&[1], vec![3.0]).unwrap();
        assert!(finite_diff_check(&Square, &three, 1e-3).unwrap() < 1e-4);
        let five = Tensor::new(&[1], vec![5.0]).unwrap();
        assert!(finite_diff_check(&Leaky, &five, 1e-3).unwrap() < 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = [
            rand_tensor(&mut rng, &[1, 1, 4, 4]),
            rand_tensor(&mut rng, &[2, 1, 3, 3]),
            rand_tensor(&mut rng, &[2]),
        ];
        for wrt in 0..3 {
            assert!(probe_err(OpCase::Conv2d { stride: 1, pad: 1 }, &inputs, wrt) < 1e-3);
        }
    }

    #[test]
    fn kinks_are_skipped_not_failed() {
        let at_kink = Tensor::new(&[3], vec![0.0, 1.0, -1.0]).unwrap();
        let r = check_input(&Leaky, &at_kink, 1e-3).unwrap();
        assert_eq!((r.checked, r.skipped), (2, 1));
        assert!(r.max_rel_err < 1e-6);
    }

    /// `sum(tanh(x·W + b))`
    fn mlp_grads(x: &Tensor, w: &Tensor, b: &Tensor) -> (Vec<f32>, Vec<f32>) {
        let mut t = Tape::new();
        let xv = t.leaf(x);
        let (wv, bv) = (t.leaf(w), t.leaf(b));
        let h = t.matmul(xv, wv).unwrap();
        let h = t.bias_add(h, bv).unwrap();
        let y = t.activation(h, Activation::Tanh);
        let n = t.value(y).len();
        t.backward_with(y, vec![1.0; n]).unwrap();
        (t.grad(wv).unwrap().to_vec(), t.grad(bv).unwrap().to_vec())
    }

    #[test]
    fn gradients_add_across_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[2, 3]);
        let w = rand_tensor(&mut rng, &[3, 4]).requiring_grad();
        let b = rand_tensor(&mut rng, &[4]).requiring_grad();
        let (gw, gb) = mlp_grads(&x, &w, &b);
        let rows = |i: usize| Tensor::new(&[1, 3], x.data()[i * 3..][..3].to_vec()).unwrap();
        let (gw0, gb0) = mlp_grads(&rows(0), &w, &b);
        let (gw1, gb1) = mlp_grads(&rows(1), &w, &b);
        let sum = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<_>>();
        close(&gw, &sum(&gw0, &gw1), 1e-5);
        close(&gb, &sum(&gb0, &gb1), 1e-5);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[2, 3, 6, 6]).requiring_grad();
        let w = rand_tensor(&mut rng, &[4, 3, 4, 4]).requiring_grad();
        let run = || {
            let mut t = Tape::new();
            let (xv, wv) = (t.leaf(&x), t.leaf(&w));
            let y = t.conv2d(xv, wv, None, 2, 1).unwrap();
            let a = t.activation(y, Activation::LeakyRelu(0.2));
            let m = t.reduce_mean(a);
            t.backward(m).unwrap();
            (t.value(a).to_vec(), t.grad(xv).unwrap().to_vec(), t.grad(wv).unwrap().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn op_suite_passes_for_one_seed() {
        let reports = crate::gradcheck::op_reports(3, 1e-3).unwrap();
        for r in &reports {
            assert!(r.passes(1e-2), "{r:?}");
        }
    }
}

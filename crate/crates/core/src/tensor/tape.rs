//! Wengert-list autograd. Each operation appends a node holding its output
//! value and the information its backward rule needs; `backward` walks the
//! list in reverse, which is a reverse topological order by construction.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU32, Ordering};

use super::kernels::{
    channel_sums, check_bias, conv3d_backward_input, conv3d_backward_weight, conv3d_forward,
    conv_transpose3d_backward, conv_transpose3d_forward, maxpool3d_forward, ConvTransposeGeometry,
    UpsamplePlan,
};
use super::{numel, Conv3dGeometry, PoolGeometry, Real, Result, Tensor, TensorError};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

enum Op<T> {
    Leaf,
    Reshape(Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv3dGeometry,
    },
    ConvTranspose3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvTransposeGeometry,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        plan: UpsamplePlan,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    BroadcastTo(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Sum(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Normalize {
        x: Var,
        total: T,
    },
    KlDiv {
        p: Var,
        q: Var,
        eps: T,
    },
    Bilinear {
        x1: Var,
        a: Var,
        x2: Var,
        b: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// ReLU masks and max-pool winners of one forward pass, in op order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Branches {
    relu: Vec<Vec<bool>>,
    pool: Vec<Vec<usize>>,
}

struct Replay {
    branches: Branches,
    relu_next: usize,
    pool_next: usize,
}

/// Records differentiable operations for one forward pass.
pub struct Tape<T: Real> {
    id: u32,
    nodes: Vec<Node<T>>,
    backward_done: bool,
    replay: Option<Replay>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
            replay: None,
        }
    }

    /// A forward-only tape whose ReLUs and max-pools follow `branches`
    /// instead of their inputs, making the recorded function smooth in a
    /// neighbourhood of the pass that produced them.
    pub fn replaying(branches: Branches) -> Self {
        let mut tape = Self::new();
        tape.replay = Some(Replay {
            branches,
            relu_next: 0,
            pool_next: 0,
        });
        tape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        if v.tape != self.id {
            return Err(TensorError::UnknownVar);
        }
        self.nodes.get(v.index as usize).ok_or(TensorError::UnknownVar)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).expect("var from another tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.value(v).grad()
    }

    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad();
        self.push_unchecked(tensor, Op::Leaf, needs)
    }

    /// Records a leaf that participates in differentiation.
    pub fn param(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(true);
        self.leaf(tensor)
    }

    /// Records a leaf treated as a constant.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn push(&mut self, name: &'static str, shape: &[usize], data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let value = Tensor::new(shape, data)?;
        let needs = inputs.iter().any(|&v| self.nodes[v.index as usize].needs_grad);
        Ok(self.push_unchecked(value, op, needs))
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        vars.iter().try_for_each(|&v| self.node(v).map(|_| ()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(&[x])?;
        let v = self.value(x);
        if numel(shape) != v.len() {
            return Err(TensorError::Reshape {
                from: v.shape().to_vec(),
                to: shape.to_vec(),
            });
        }
        let data = v.data().to_vec();
        self.push("reshape", shape, data, Op::Reshape(x), &[x])
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        self.check(&[x, w])?;
        let geom = Conv3dGeometry::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            self.check(&[b])?;
            check_bias(self.value(b), geom.out_channels, "conv3d")?;
        }
        let out = conv3d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("conv3d", &geom.output_shape(), out, Op::Conv3d { x, w, b, geom }, &inputs)
    }

    /// Spatial-then-temporal factorised convolution: a `[*, *, 1, kH, kW]`
    /// kernel followed by a `[*, *, kT, 1, 1]` kernel.
    #[allow(clippy::too_many_arguments)]
    pub fn sep_conv3d(
        &mut self,
        x: Var,
        spatial_w: Var,
        spatial_b: Option<Var>,
        temporal_w: Var,
        temporal_b: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let (sw, tw) = (self.shape(spatial_w).to_vec(), self.shape(temporal_w).to_vec());
        if sw.len() != 5 || sw[2] != 1 || tw.len() != 5 || tw[3] != 1 || tw[4] != 1 {
            return Err(TensorError::InvalidArgument {
                op: "sep_conv3d",
                detail: format!("expected spatial [*,*,1,kH,kW] and temporal [*,*,kT,1,1] kernels, got {sw:?} and {tw:?}"),
            });
        }
        let mid = self.conv3d(
            x,
            spatial_w,
            spatial_b,
            [1, stride[1], stride[2]],
            [0, padding[1], padding[2]],
        )?;
        self.conv3d(mid, temporal_w, temporal_b, [stride[0], 1, 1], [padding[0], 0, 0])
    }

    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3]) -> Result<Var> {
        self.check(&[x, w])?;
        let geom = ConvTransposeGeometry::new(self.shape(x), self.shape(w), stride)?;
        if let Some(b) = b {
            self.check(&[b])?;
            check_bias(self.value(b), geom.out_channels, "conv_transpose3d")?;
        }
        let out = conv_transpose3d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(
            "conv_transpose3d",
            &geom.output_shape(),
            out,
            Op::ConvTranspose3d { x, w, b, geom },
            &inputs,
        )
    }

    /// 1D convolution of `[C_in, L]` with `[C_out, C_in, k]`, routed through
    /// the 3D kernel on `[C, L, 1, 1]` views.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.check(&[x, w])?;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 3 {
            return Err(TensorError::Rank {
                op: "conv1d",
                expected: 2,
                shape: xs,
            });
        }
        let x3 = self.reshape(x, &[xs[0], xs[1], 1, 1])?;
        let w3 = self.reshape(w, &[ws[0], ws[1], ws[2], 1, 1])?;
        let y = self.conv3d(x3, w3, b, [stride, 1, 1], [padding, 0, 0])?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1]])
    }

    pub fn maxpool3d(&mut self, x: Var, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        self.check(&[x])?;
        let geom = PoolGeometry::new(self.shape(x), kernel, stride)?;
        let (out, argmax) = match self.replay.as_mut() {
            None => maxpool3d_forward(&geom, self.value(x).data()),
            Some(r) => {
                let argmax = r.branches.pool.get(r.pool_next).cloned().ok_or_else(|| replay_mismatch("maxpool3d"))?;
                r.pool_next += 1;
                let xs = self.value(x).data();
                if argmax.len() != numel(&geom.output_shape()) || argmax.iter().any(|&i| i >= xs.len()) {
                    return Err(replay_mismatch("maxpool3d"));
                }
                (argmax.iter().map(|&i| xs[i]).collect(), argmax)
            }
        };
        self.push("maxpool3d", &geom.output_shape(), out, Op::MaxPool3d { x, argmax }, &[x])
    }

    /// Max pooling over the last axis of a `[C, L]` tensor.
    pub fn maxpool1d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        self.check(&[x])?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(TensorError::Rank {
                op: "maxpool1d",
                expected: 2,
                shape: xs,
            });
        }
        let x3 = self.reshape(x, &[xs[0], xs[1], 1, 1])?;
        let y = self.maxpool3d(x3, [kernel, 1, 1], [stride, 1, 1])?;
        let ys = self.shape(y).to_vec();
        self.reshape(y, &[ys[0], ys[1]])
    }

    pub fn trilinear_upsample(&mut self, x: Var, out_size: [usize; 3]) -> Result<Var> {
        self.check(&[x])?;
        let plan = UpsamplePlan::new(self.shape(x), out_size)?;
        let out = plan.forward(self.value(x).data());
        let shape = plan.output_shape();
        self.push("trilinear_upsample", &shape, out, Op::Upsample { x, plan }, &[x])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check(&[x])?;
        let v = self.value(x);
        let shape = v.shape().to_vec();
        let out = v.data().iter().map(|&a| f(a)).collect();
        self.push(name, &shape, out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        if let Some(r) = self.replay.as_mut() {
            let mask = r.branches.relu.get(r.relu_next).cloned().ok_or_else(|| replay_mismatch("relu"))?;
            r.relu_next += 1;
            self.check(&[x])?;
            let v = self.value(x);
            if mask.len() != v.len() {
                return Err(replay_mismatch("relu"));
            }
            let shape = v.shape().to_vec();
            let out = v.data().iter().zip(&mask).map(|(&a, &m)| if m { a } else { T::zero() }).collect();
            return self.push("relu", &shape, out, Op::Relu(x), &[x]);
        }
        self.unary("relu", x, |a| if a > T::zero() { a } else { T::zero() }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, |a| T::one() / (T::one() + (-a).exp()), Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.unary("scale", x, |a| a * factor, Op::Scale(x, factor))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.check(&[a, b])?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::Incompatible {
                op: name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let shape = va.shape().to_vec();
        let out = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        self.push(name, &shape, out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Expands size-1 axes to `shape` (same rank required).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(&[x])?;
        let from = self.shape(x).to_vec();
        let ok = from.len() == shape.len() && from.iter().zip(shape).all(|(&f, &t)| f == t || f == 1);
        if !ok {
            return Err(TensorError::Incompatible {
                op: "broadcast_to",
                lhs: from,
                rhs: shape.to_vec(),
            });
        }
        let src = self.value(x).data();
        let n = numel(shape);
        let mut out = Vec::with_capacity(n);
        for flat in 0..n {
            out.push(src[broadcast_source(flat, shape, &from)]);
        }
        self.push("broadcast_to", shape, out, Op::BroadcastTo(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.check(inputs)?;
        let parts: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let joined = Tensor::concat(&parts, axis)?;
        let shape = joined.shape().to_vec();
        self.push(
            "concat",
            &shape,
            joined.into_data(),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(&[x])?;
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(TensorError::Axis { axis, rank: v.rank() });
        }
        let size = v.shape()[axis];
        if len == 0 || start + len > size {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                detail: format!("range {start}..{} outside axis of size {size}", start + len),
            });
        }
        let mut sizes = vec![];
        if start > 0 {
            sizes.push(start);
        }
        sizes.push(len);
        if start + len < size {
            sizes.push(size - start - len);
        }
        let piece = v.split(axis, &sizes)?.swap_remove(usize::from(start > 0));
        let shape = piece.shape().to_vec();
        self.push("narrow", &shape, piece.into_data(), Op::Narrow { x, axis, start }, &[x])
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Incompatible {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                for j in 0..n {
                    out[i * n + j] += av * db[p * n + j];
                }
            }
        }
        self.push("matmul", &[m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let s = self.value(x).sum();
        self.push("sum", &[1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::from_usize(self.value(x).len());
        let s = self.sum(x)?;
        self.scale(s, T::one() / n)
    }

    /// Mean over `axis`, which is kept with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(&[x])?;
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(TensorError::Axis { axis, rank: v.rank() });
        }
        let shape = v.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let inv = T::one() / T::from_usize(len);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += v.data()[(o * len + a) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut new_shape = shape;
        new_shape[axis] = 1;
        self.push("mean_axis", &new_shape, out, Op::MeanAxis { x, axis }, &[x])
    }

    /// Divides a non-negative tensor by its sum.
    pub fn normalize_to_distribution(&mut self, x: Var) -> Result<Var> {
        self.check(&[x])?;
        let v = self.value(x);
        // Accumulate in f64 so large f32 maps still sum to 1 within 1e-6.
        let total64: f64 = v.data().iter().map(|a| a.to_f64_lossy()).sum();
        if v.data().iter().any(|&a| a < T::zero()) || total64 <= 0.0 {
            return Err(TensorError::NotNormalizable {
                op: "normalize_to_distribution",
            });
        }
        let total = T::from_f64_lossy(total64);
        let shape = v.shape().to_vec();
        let out = v.data().iter().map(|&a| T::from_f64_lossy(a.to_f64_lossy() / total64)).collect();
        self.push("normalize", &shape, out, Op::Normalize { x, total }, &[x])
    }

    /// `sum_i q_i * ln(eps + q_i / (p_i + eps))` as a scalar.
    pub fn kldiv(&mut self, p: Var, q: Var, eps: T) -> Result<Var> {
        self.check(&[p, q])?;
        if eps <= T::zero() {
            return Err(TensorError::InvalidArgument {
                op: "kldiv",
                detail: "epsilon must be positive".into(),
            });
        }
        let (vp, vq) = (self.value(p), self.value(q));
        if vp.shape() != vq.shape() {
            return Err(TensorError::Incompatible {
                op: "kldiv",
                lhs: vp.shape().to_vec(),
                rhs: vq.shape().to_vec(),
            });
        }
        let total = vp
            .data()
            .iter()
            .zip(vq.data())
            .map(|(&pi, &qi)| qi * (eps + qi / (pi + eps)).ln())
            .sum();
        self.push("kldiv", &[1], vec![total], Op::KlDiv { p, q, eps }, &[p, q])
    }

    /// Channel-shared bilinear form: `y[c, k] = sum_ij x1[c, i] a[i, k, j] x2[c, j] + b[k]`
    /// with `x1: [C, X0]`, `a: [X0, X, Y0]`, `x2: [C, Y0]`, `b: [X]`.
    pub fn bilinear(&mut self, x1: Var, a: Var, x2: Var, b: Var) -> Result<Var> {
        self.check(&[x1, a, x2, b])?;
        let (s1, sa, s2, sb) = (
            self.shape(x1).to_vec(),
            self.shape(a).to_vec(),
            self.shape(x2).to_vec(),
            self.shape(b).to_vec(),
        );
        let ok = s1.len() == 2
            && s2.len() == 2
            && sa.len() == 3
            && s1[0] == s2[0]
            && sa[0] == s1[1]
            && sa[2] == s2[1]
            && sb == [sa[1]];
        if !ok {
            return Err(TensorError::InvalidArgument {
                op: "bilinear",
                detail: format!("x1 {s1:?}, A {sa:?}, x2 {s2:?}, b {sb:?} do not line up"),
            });
        }
        let (c, x0, xo, y0) = (s1[0], sa[0], sa[1], sa[2]);
        let (d1, da, d2, db) = (
            self.value(x1).data(),
            self.value(a).data(),
            self.value(x2).data(),
            self.value(b).data(),
        );
        let mut out = vec![T::zero(); c * xo];
        for ch in 0..c {
            let r1 = &d1[ch * x0..(ch + 1) * x0];
            let r2 = &d2[ch * y0..(ch + 1) * y0];
            for k in 0..xo {
                let mut acc = db[k];
                for i in 0..x0 {
                    let row = &da[(i * xo + k) * y0..(i * xo + k + 1) * y0];
                    let inner: T = row.iter().zip(r2).map(|(&av, &bv)| av * bv).sum();
                    acc += r1[i] * inner;
                }
                out[ch * xo + k] = acc;
            }
        }
        self.push("bilinear", &[c, xo], out, Op::Bilinear { x1, a, x2, b }, &[x1, a, x2, b])
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.set_grad(None);
        }
        self.backward_done = false;
    }

    /// Reverse-mode sweep from a scalar `loss`. Afterwards every leaf with
    /// `requires_grad` that the loss depends on holds its gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        self.check(&[loss])?;
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.replay.is_some() {
            return Err(TensorError::InvalidArgument {
                op: "backward",
                detail: "replaying tapes are forward-only".into(),
            });
        }
        let loss_shape = self.shape(loss).to_vec();
        if numel(&loss_shape) != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.index as usize] = Some(vec![T::one()]);
        for i in (0..=loss.index as usize).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if self.nodes[i].value.requires_grad() {
                grads[i] = Some(g);
            }
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad() {
                let len = node.value.len();
                node.value.set_grad(Some(g.unwrap_or_else(|| vec![T::zero(); len])));
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.index as usize].needs_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.index as usize].value.data();
        let mut acc = |v: Var, contrib: Vec<T>| accumulate(grads, v, contrib);
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) | Op::Scale(x, _) if !self.wants(*x) => {}
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Scale(x, f) => acc(*x, g.iter().map(|&v| v * *f).collect()),
            Op::Conv3d { x, w, b, geom } => {
                if self.wants(*x) {
                    acc(*x, conv3d_backward_input(geom, g, val(*w)));
                }
                if self.wants(*w) {
                    acc(*w, conv3d_backward_weight(geom, g, val(*x)));
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    acc(b, channel_sums(g, geom.out_channels));
                }
            }
            Op::ConvTranspose3d { x, w, b, geom } => {
                let (dx, dw) =
                    conv_transpose3d_backward(geom, g, val(*x), val(*w), self.wants(*x), self.wants(*w));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let Some(b) = b.filter(|&b| self.wants(b)) {
                    acc(b, channel_sums(g, geom.out_channels));
                }
            }
            Op::MaxPool3d { x, argmax } => {
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); val(*x).len()];
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                    acc(*x, dx);
                }
            }
            Op::Upsample { x, plan } => {
                if self.wants(*x) {
                    acc(*x, plan.backward(g, val(*x).len()));
                }
            }
            Op::Relu(x) => {
                if self.wants(*x) {
                    let dx = val(*x)
                        .iter()
                        .zip(g)
                        .map(|(&a, &gv)| if a > T::zero() { gv } else { T::zero() })
                        .collect();
                    acc(*x, dx);
                }
            }
            Op::Sigmoid(x) => {
                if self.wants(*x) {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&s, &gv)| gv * s * (T::one() - s))
                        .collect();
                    acc(*x, dx);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect());
                }
            }
            Op::BroadcastTo(x) => {
                if self.wants(*x) {
                    let from = self.nodes[x.index as usize].value.shape();
                    let to = node.value.shape();
                    let mut dx = vec![T::zero(); numel(from)];
                    for (flat, &gv) in g.iter().enumerate() {
                        dx[broadcast_source(flat, to, from)] += gv;
                    }
                    acc(*x, dx);
                }
            }
            Op::Concat { inputs, axis } => {
                let sizes: Vec<usize> = inputs
                    .iter()
                    .map(|v| self.nodes[v.index as usize].value.shape()[*axis])
                    .collect();
                let gt = Tensor::new(node.value.shape(), g.to_vec()).expect("grad shape");
                let parts = gt.split(*axis, &sizes).expect("concat sizes");
                for (v, part) in inputs.iter().zip(parts) {
                    if self.wants(*v) {
                        acc(*v, part.into_data());
                    }
                }
            }
            Op::Narrow { x, axis, start } => {
                if self.wants(*x) {
                    let full = self.nodes[x.index as usize].value.shape();
                    let outer: usize = full[..*axis].iter().product();
                    let inner: usize = full[axis + 1..].iter().product();
                    let len = node.value.shape()[*axis];
                    let mut dx = vec![T::zero(); numel(full)];
                    for o in 0..outer {
                        let dst = (o * full[*axis] + start) * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    acc(*x, dx);
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let bd = val(*b);
                    let mut da = vec![T::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            da[i * k + p] = (0..n).map(|j| g[i * n + j] * bd[p * n + j]).sum();
                        }
                    }
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let ad = val(*a);
                    let mut db = vec![T::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    acc(*x, vec![g[0]; val(*x).len()]);
                }
            }
            Op::MeanAxis { x, axis } => {
                if self.wants(*x) {
                    let full = self.nodes[x.index as usize].value.shape();
                    let outer: usize = full[..*axis].iter().product();
                    let inner: usize = full[axis + 1..].iter().product();
                    let len = full[*axis];
                    let inv = T::one() / T::from_usize(len);
                    let mut dx = vec![T::zero(); numel(full)];
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                dx[(o * len + a) * inner + i] = g[o * inner + i] * inv;
                            }
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Normalize { x, total } => {
                if self.wants(*x) {
                    // y = x / s  =>  dx_j = (g_j - sum_i g_i y_i) / s
                    let y = node.value.data();
                    let dot: T = g.iter().zip(y).map(|(&gv, &yv)| gv * yv).sum();
                    acc(*x, g.iter().map(|&gv| (gv - dot) / *total).collect());
                }
            }
            Op::KlDiv { p, q, eps } => {
                let (pd, qd, e, gs) = (val(*p), val(*q), *eps, g[0]);
                if self.wants(*p) {
                    // d/dp of q ln(e + q/(p+e)) = -q^2 / ((p+e)^2 (e + q/(p+e)))
                    let dp = pd
                        .iter()
                        .zip(qd)
                        .map(|(&pi, &qi)| {
                            let d = pi + e;
                            -gs * qi * qi / (d * d * (e + qi / d))
                        })
                        .collect();
                    acc(*p, dp);
                }
                if self.wants(*q) {
                    let dq = pd
                        .iter()
                        .zip(qd)
                        .map(|(&pi, &qi)| {
                            let d = pi + e;
                            let inner = e + qi / d;
                            gs * (inner.ln() + qi / (d * inner))
                        })
                        .collect();
                    acc(*q, dq);
                }
            }
            Op::Bilinear { x1, a, x2, b } => {
                let (s1, sa) = (self.nodes[x1.index as usize].value.shape(), self.nodes[a.index as usize].value.shape());
                let (c, x0, xo, y0) = (s1[0], sa[0], sa[1], sa[2]);
                let (d1, da, d2) = (val(*x1), val(*a), val(*x2));
                let (w1, wa, w2) = (self.wants(*x1), self.wants(*a), self.wants(*x2));
                let mut g1 = vec![T::zero(); if w1 { d1.len() } else { 0 }];
                let mut ga = vec![T::zero(); if wa { da.len() } else { 0 }];
                let mut g2 = vec![T::zero(); if w2 { d2.len() } else { 0 }];
                for ch in 0..c {
                    for k in 0..xo {
                        let gv = g[ch * xo + k];
                        for i in 0..x0 {
                            let v1 = d1[ch * x0 + i];
                            for j in 0..y0 {
                                let ai = (i * xo + k) * y0 + j;
                                let v2 = d2[ch * y0 + j];
                                if w1 {
                                    g1[ch * x0 + i] += gv * da[ai] * v2;
                                }
                                if wa {
                                    ga[ai] += gv * v1 * v2;
                                }
                                if w2 {
                                    g2[ch * y0 + j] += gv * v1 * da[ai];
                                }
                            }
                        }
                    }
                }
                if w1 {
                    acc(*x1, g1);
                }
                if wa {
                    acc(*a, ga);
                }
                if w2 {
                    acc(*x2, g2);
                }
                if self.wants(*b) {
                    let mut gb = vec![T::zero(); xo];
                    for ch in 0..c {
                        for k in 0..xo {
                            gb[k] += g[ch * xo + k];
                        }
                    }
                    acc(*b, gb);
                }
            }
        }
    }

    /// Hash of every data-dependent branch taken in the forward pass: ReLU
    /// activation masks and max-pool winners. Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn branches(&self) -> Branches {
        let mut b = Branches::default();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => b.relu.push(self.nodes[x.index as usize].value.data().iter().map(|&a| a > T::zero()).collect()),
                Op::MaxPool3d { argmax, .. } => b.pool.push(argmax.clone()),
                _ => {}
            }
        }
        b
    }

    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &a in self.nodes[x.index as usize].value.data() {
                        (a > T::zero()).hash(&mut h);
                    }
                }
                // A window whose max is exactly zero was zeroed by a ReLU;
                // which tied entry wins does not change the function.
                Op::MaxPool3d { argmax, .. } => {
                    for (&i, &v) in argmax.iter().zip(node.value.data()) {
                        (v != T::zero()).then_some(i).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }
}

fn replay_mismatch(op: &'static str) -> TensorError {
    TensorError::InvalidArgument {
        op,
        detail: "replayed branches do not match this graph".into(),
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.index as usize] {
        Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e += c),
        slot @ None => *slot = Some(contrib),
    }
}

/// Flat index in a tensor of shape `from` that feeds flat index `flat` of its
/// broadcast to `to`.
fn broadcast_source(flat: usize, to: &[usize], from: &[usize]) -> usize {
    let mut rem = flat;
    let mut src = 0;
    let mut stride = 1;
    for axis in (0..to.len()).rev() {
        let coord = rem % to[axis];
        rem /= to[axis];
        if from[axis] != 1 {
            src += coord * stride;
        }
        stride *= from[axis];
    }
    src
}

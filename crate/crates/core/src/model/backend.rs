//! The network is written once against [`Backend`]. [`TapeBackend`] runs it
//! for real; [`ShapeBackend`] only propagates shapes and records which
//! parameters the architecture asks for.

use std::collections::BTreeMap;

use crate::tensor::{
    numel, Conv3dGeometry, PoolGeometry, Real, Tape, Tensor, TensorError, Var,
};

use super::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Inputs feeding one output unit; sets the init scale for weights.
    pub fan_in: usize,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

pub trait Backend {
    type V: Copy;

    fn param(&mut self, name: &str, shape: &[usize], fan_in: usize, kind: ParamKind) -> Result<Self::V>;
    fn shape_of(&self, v: Self::V) -> Vec<usize>;
    fn conv3d(&mut self, x: Self::V, w: Self::V, b: Option<Self::V>, stride: [usize; 3], pad: [usize; 3]) -> Result<Self::V>;
    fn conv_transpose3d(&mut self, x: Self::V, w: Self::V, b: Option<Self::V>, stride: [usize; 3]) -> Result<Self::V>;
    fn maxpool3d(&mut self, x: Self::V, kernel: [usize; 3], stride: [usize; 3]) -> Result<Self::V>;
    fn upsample(&mut self, x: Self::V, out: [usize; 3]) -> Result<Self::V>;
    fn relu(&mut self, x: Self::V) -> Result<Self::V>;
    fn sigmoid(&mut self, x: Self::V) -> Result<Self::V>;
    fn concat(&mut self, xs: &[Self::V], axis: usize) -> Result<Self::V>;
    fn reshape(&mut self, x: Self::V, shape: &[usize]) -> Result<Self::V>;
    fn mean_axis(&mut self, x: Self::V, axis: usize) -> Result<Self::V>;
    fn broadcast_to(&mut self, x: Self::V, shape: &[usize]) -> Result<Self::V>;
    fn bilinear(&mut self, x1: Self::V, a: Self::V, x2: Self::V, b: Self::V) -> Result<Self::V>;

    /// Labels an intermediate for shape dumps. No-op by default.
    fn mark(&mut self, _label: &str, _v: Self::V) {}
}

/// Weight/bias pair for a convolution with `fan_in = C_in * kT * kH * kW`.
pub fn conv_params<B: Backend>(b: &mut B, name: &str, shape: [usize; 5], bias: bool) -> Result<(B::V, Option<B::V>)> {
    let fan_in = shape[1] * shape[2] * shape[3] * shape[4];
    let w = b.param(&format!("{name}.weight"), &shape, fan_in, ParamKind::Weight)?;
    let bias = if bias {
        Some(b.param(&format!("{name}.bias"), &[shape[0]], fan_in, ParamKind::Bias)?)
    } else {
        None
    };
    Ok((w, bias))
}

/// Propagates shapes without touching data.
#[derive(Default)]
pub struct ShapeBackend {
    shapes: Vec<Vec<usize>>,
    specs: Vec<ParamSpec>,
    marks: Vec<(String, Vec<usize>)>,
}

impl ShapeBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, shape: &[usize]) -> usize {
        self.shapes.push(shape.to_vec());
        self.shapes.len() - 1
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn into_specs(self) -> Vec<ParamSpec> {
        self.specs
    }

    pub fn marks(&self) -> &[(String, Vec<usize>)] {
        &self.marks
    }

    fn push(&mut self, shape: Vec<usize>) -> usize {
        self.shapes.push(shape);
        self.shapes.len() - 1
    }

    fn s(&self, v: usize) -> &[usize] {
        &self.shapes[v]
    }
}

impl Backend for ShapeBackend {
    type V = usize;

    fn param(&mut self, name: &str, shape: &[usize], fan_in: usize, kind: ParamKind) -> Result<usize> {
        if self.specs.iter().any(|s| s.name == name) {
            return Err(ModelError::Config(format!("parameter '{name}' declared twice")));
        }
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            fan_in,
            kind,
        });
        Ok(self.push(shape.to_vec()))
    }

    fn shape_of(&self, v: usize) -> Vec<usize> {
        self.shapes[v].clone()
    }

    fn conv3d(&mut self, x: usize, w: usize, b: Option<usize>, stride: [usize; 3], pad: [usize; 3]) -> Result<usize> {
        let g = Conv3dGeometry::new(self.s(x), self.s(w), stride, pad)?;
        if let Some(b) = b {
            if self.s(b) != [g.out_channels] {
                return Err(TensorError::Incompatible {
                    op: "conv3d bias",
                    lhs: self.s(b).to_vec(),
                    rhs: vec![g.out_channels],
                }
                .into());
            }
        }
        Ok(self.push(g.output_shape()))
    }

    fn conv_transpose3d(&mut self, x: usize, w: usize, _b: Option<usize>, stride: [usize; 3]) -> Result<usize> {
        let (xs, ws) = (self.s(x).to_vec(), self.s(w).to_vec());
        if xs.len() != 4 || ws.len() != 5 || xs[0] != ws[0] || stride.contains(&0) {
            return Err(TensorError::Incompatible {
                op: "conv_transpose3d",
                lhs: xs,
                rhs: ws,
            }
            .into());
        }
        let mut out = vec![ws[1]];
        out.extend((0..3).map(|a| (xs[a + 1] - 1) * stride[a] + ws[a + 2]));
        Ok(self.push(out))
    }

    fn maxpool3d(&mut self, x: usize, kernel: [usize; 3], stride: [usize; 3]) -> Result<usize> {
        let g = PoolGeometry::new(self.s(x), kernel, stride)?;
        Ok(self.push(g.output_shape()))
    }

    fn upsample(&mut self, x: usize, out: [usize; 3]) -> Result<usize> {
        let xs = self.s(x);
        if xs.len() != 4 || out.contains(&0) {
            return Err(TensorError::InvalidArgument {
                op: "trilinear_upsample",
                detail: format!("input {xs:?}, out {out:?}"),
            }
            .into());
        }
        let c = xs[0];
        Ok(self.push(vec![c, out[0], out[1], out[2]]))
    }

    fn relu(&mut self, x: usize) -> Result<usize> {
        Ok(self.push(self.s(x).to_vec()))
    }

    fn sigmoid(&mut self, x: usize) -> Result<usize> {
        Ok(self.push(self.s(x).to_vec()))
    }

    fn concat(&mut self, xs: &[usize], axis: usize) -> Result<usize> {
        let shape = crate::tensor::concat_shape(xs.iter().map(|&v| self.s(v)), axis)?;
        Ok(self.push(shape))
    }

    fn reshape(&mut self, x: usize, shape: &[usize]) -> Result<usize> {
        if numel(shape) != numel(self.s(x)) {
            return Err(TensorError::Reshape {
                from: self.s(x).to_vec(),
                to: shape.to_vec(),
            }
            .into());
        }
        Ok(self.push(shape.to_vec()))
    }

    fn mean_axis(&mut self, x: usize, axis: usize) -> Result<usize> {
        let mut s = self.s(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::Axis { axis, rank: s.len() }.into());
        }
        s[axis] = 1;
        Ok(self.push(s))
    }

    fn broadcast_to(&mut self, x: usize, shape: &[usize]) -> Result<usize> {
        let from = self.s(x);
        let ok = from.len() == shape.len() && from.iter().zip(shape).all(|(&f, &t)| f == t || f == 1);
        if !ok {
            return Err(TensorError::Incompatible {
                op: "broadcast_to",
                lhs: from.to_vec(),
                rhs: shape.to_vec(),
            }
            .into());
        }
        Ok(self.push(shape.to_vec()))
    }

    fn bilinear(&mut self, x1: usize, a: usize, x2: usize, b: usize) -> Result<usize> {
        let (s1, sa, s2, sb) = (self.s(x1), self.s(a), self.s(x2), self.s(b));
        let ok = s1.len() == 2 && s2.len() == 2 && sa.len() == 3 && s1[0] == s2[0] && sa[0] == s1[1] && sa[2] == s2[1] && sb == [sa[1]];
        if !ok {
            return Err(TensorError::InvalidArgument {
                op: "bilinear",
                detail: format!("x1 {s1:?}, A {sa:?}, x2 {s2:?}, b {sb:?} do not line up"),
            }
            .into());
        }
        let out = vec![s1[0], sa[1]];
        Ok(self.push(out))
    }

    fn mark(&mut self, label: &str, v: usize) {
        let s = self.shapes[v].clone();
        self.marks.push((label.to_string(), s));
    }
}

/// Parameters placed on a tape, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, var: Var) {
        self.vars.insert(name, var);
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

/// Runs the network on a [`Tape`] using parameters already bound to it.
pub struct TapeBackend<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    params: &'a Bound,
}

impl<'a, T: Real> TapeBackend<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a Bound) -> Self {
        Self { tape, params }
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }
}

impl<T: Real> Backend for TapeBackend<'_, T> {
    type V = Var;

    fn param(&mut self, name: &str, shape: &[usize], _fan_in: usize, _kind: ParamKind) -> Result<Var> {
        let v = self
            .params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
        let got = self.tape.shape(v);
        if got != shape {
            return Err(ModelError::ParamShape {
                name: name.to_string(),
                expected: shape.to_vec(),
                got: got.to_vec(),
            });
        }
        Ok(v)
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.tape.shape(v).to_vec()
    }

    fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3], pad: [usize; 3]) -> Result<Var> {
        Ok(self.tape.conv3d(x, w, b, stride, pad)?)
    }

    fn conv_transpose3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: [usize; 3]) -> Result<Var> {
        Ok(self.tape.conv_transpose3d(x, w, b, stride)?)
    }

    fn maxpool3d(&mut self, x: Var, kernel: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        Ok(self.tape.maxpool3d(x, kernel, stride)?)
    }

    fn upsample(&mut self, x: Var, out: [usize; 3]) -> Result<Var> {
        Ok(self.tape.trilinear_upsample(x, out)?)
    }

    fn relu(&mut self, x: Var) -> Result<Var> {
        Ok(self.tape.relu(x)?)
    }

    fn sigmoid(&mut self, x: Var) -> Result<Var> {
        Ok(self.tape.sigmoid(x)?)
    }

    fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        Ok(self.tape.concat(xs, axis)?)
    }

    fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        Ok(self.tape.reshape(x, shape)?)
    }

    fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        Ok(self.tape.mean_axis(x, axis)?)
    }

    fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        Ok(self.tape.broadcast_to(x, shape)?)
    }

    fn bilinear(&mut self, x1: Var, a: Var, x2: Var, b: Var) -> Result<Var> {
        Ok(self.tape.bilinear(x1, a, x2, b)?)
    }
}

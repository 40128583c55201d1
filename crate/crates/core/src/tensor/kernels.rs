//! Raw forward/backward kernels on flat buffers. The tape calls into these;
//! they are also usable directly on plain tensors.

use super::{Real, Result, Tensor, TensorError};

/// Shapes and hyper-parameters of one 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl Conv3dGeometry {
    pub fn new(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(TensorError::Rank {
                op: "conv3d",
                expected: 4,
                shape: input_shape.to_vec(),
            });
        }
        if weight_shape.len() != 5 {
            return Err(TensorError::Rank {
                op: "conv3d",
                expected: 5,
                shape: weight_shape.to_vec(),
            });
        }
        if weight_shape[1] != input_shape[0] {
            return Err(TensorError::Incompatible {
                op: "conv3d",
                lhs: input_shape.to_vec(),
                rhs: weight_shape.to_vec(),
            });
        }
        if stride.contains(&0) {
            return Err(TensorError::ZeroStride { op: "conv3d" });
        }
        let input = [input_shape[1], input_shape[2], input_shape[3]];
        let kernel = [weight_shape[2], weight_shape[3], weight_shape[4]];
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * padding[a];
            if kernel[a] > padded {
                return Err(TensorError::KernelTooLarge {
                    op: "conv3d",
                    kernel: kernel.to_vec(),
                    padded: input.iter().zip(&padding).map(|(i, p)| i + 2 * p).collect(),
                });
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            in_channels: input_shape[0],
            out_channels: weight_shape[0],
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.output[0], self.output[1], self.output[2]]
    }

    fn input_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn output_volume(&self) -> usize {
        self.output.iter().product()
    }

    /// Range of output indices along `axis` whose tap `k` lands inside the input.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        valid_range(
            k,
            self.padding[axis],
            self.stride[axis],
            self.input[axis],
            self.output[axis],
        )
    }
}

/// For tap offset `k`, the output indices `o` in `lo..hi` satisfy
/// `0 <= o*stride + k - pad < len`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub(crate) fn conv3d_forward<T: Real>(
    g: &Conv3dGeometry,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let [_, oh_n, ow_n] = g.output;
    let [_, ih_n, iw_n] = g.input;
    let [kt_n, kh_n, kw_n] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let out_vol = g.output_volume();
    let in_vol = g.input_volume();
    let mut out = vec![T::zero(); g.out_channels * out_vol];
    for co in 0..g.out_channels {
        let out_c = &mut out[co * out_vol..(co + 1) * out_vol];
        if let Some(b) = b {
            out_c.fill(b[co]);
        }
        for ci in 0..g.in_channels {
            let x_c = &x[ci * in_vol..(ci + 1) * in_vol];
            for kt in 0..kt_n {
                let (t_lo, t_hi) = g.valid(0, kt);
                for kh in 0..kh_n {
                    let (h_lo, h_hi) = g.valid(1, kh);
                    for kw in 0..kw_n {
                        let (w_lo, w_hi) = g.valid(2, kw);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let wv = w[(((co * g.in_channels + ci) * kt_n + kt) * kh_n + kh) * kw_n + kw];
                        for ot in t_lo..t_hi {
                            let it = ot * st + kt - pt;
                            for oh in h_lo..h_hi {
                                let ih = oh * sh + kh - ph;
                                let in_row = &x_c[(it * ih_n + ih) * iw_n..(it * ih_n + ih + 1) * iw_n];
                                let out_row = &mut out_c[(ot * oh_n + oh) * ow_n..(ot * oh_n + oh + 1) * ow_n];
                                if sw == 1 {
                                    let start = w_lo + kw - pw;
                                    let src = &in_row[start..start + (w_hi - w_lo)];
                                    for (o, &v) in out_row[w_lo..w_hi].iter_mut().zip(src) {
                                        *o += wv * v;
                                    }
                                } else {
                                    for ow in w_lo..w_hi {
                                        out_row[ow] += wv * in_row[ow * sw + kw - pw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv3d_backward_input<T: Real>(g: &Conv3dGeometry, dy: &[T], w: &[T]) -> Vec<T> {
    let [_, oh_n, ow_n] = g.output;
    let [_, ih_n, iw_n] = g.input;
    let [kt_n, kh_n, kw_n] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let out_vol = g.output_volume();
    let in_vol = g.input_volume();
    let mut dx = vec![T::zero(); g.in_channels * in_vol];
    for co in 0..g.out_channels {
        let dy_c = &dy[co * out_vol..(co + 1) * out_vol];
        for ci in 0..g.in_channels {
            let dx_c = &mut dx[ci * in_vol..(ci + 1) * in_vol];
            for kt in 0..kt_n {
                let (t_lo, t_hi) = g.valid(0, kt);
                for kh in 0..kh_n {
                    let (h_lo, h_hi) = g.valid(1, kh);
                    for kw in 0..kw_n {
                        let (w_lo, w_hi) = g.valid(2, kw);
                        if w_lo >= w_hi {
                            continue;
                        }
                        let wv = w[(((co * g.in_channels + ci) * kt_n + kt) * kh_n + kh) * kw_n + kw];
                        for ot in t_lo..t_hi {
                            let it = ot * st + kt - pt;
                            for oh in h_lo..h_hi {
                                let ih = oh * sh + kh - ph;
                                let dy_row = &dy_c[(ot * oh_n + oh) * ow_n..(ot * oh_n + oh + 1) * ow_n];
                                let dx_row = &mut dx_c[(it * ih_n + ih) * iw_n..(it * ih_n + ih + 1) * iw_n];
                                for ow in w_lo..w_hi {
                                    dx_row[ow * sw + kw - pw] += wv * dy_row[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn conv3d_backward_weight<T: Real>(g: &Conv3dGeometry, dy: &[T], x: &[T]) -> Vec<T> {
    let [_, oh_n, ow_n] = g.output;
    let [_, ih_n, iw_n] = g.input;
    let [kt_n, kh_n, kw_n] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let out_vol = g.output_volume();
    let in_vol = g.input_volume();
    let mut dw = vec![T::zero(); g.out_channels * g.in_channels * kt_n * kh_n * kw_n];
    for co in 0..g.out_channels {
        let dy_c = &dy[co * out_vol..(co + 1) * out_vol];
        for ci in 0..g.in_channels {
            let x_c = &x[ci * in_vol..(ci + 1) * in_vol];
            for kt in 0..kt_n {
                let (t_lo, t_hi) = g.valid(0, kt);
                for kh in 0..kh_n {
                    let (h_lo, h_hi) = g.valid(1, kh);
                    for kw in 0..kw_n {
                        let (w_lo, w_hi) = g.valid(2, kw);
                        let mut acc = T::zero();
                        for ot in t_lo..t_hi {
                            let it = ot * st + kt - pt;
                            for oh in h_lo..h_hi {
                                let ih = oh * sh + kh - ph;
                                let dy_row = &dy_c[(ot * oh_n + oh) * ow_n..(ot * oh_n + oh + 1) * ow_n];
                                let x_row = &x_c[(it * ih_n + ih) * iw_n..(it * ih_n + ih + 1) * iw_n];
                                for ow in w_lo..w_hi {
                                    acc += dy_row[ow] * x_row[ow * sw + kw - pw];
                                }
                            }
                        }
                        dw[(((co * g.in_channels + ci) * kt_n + kt) * kh_n + kh) * kw_n + kw] = acc;
                    }
                }
            }
        }
    }
    dw
}

pub(crate) fn channel_sums<T: Real>(dy: &[T], channels: usize) -> Vec<T> {
    let vol = dy.len() / channels;
    (0..channels)
        .map(|c| dy[c * vol..(c + 1) * vol].iter().copied().sum())
        .collect()
}

/// 3D convolution of a `[C_in, T, H, W]` input with a `[C_out, C_in, kT, kH, kW]` kernel.
pub fn conv3d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor<T>> {
    let g = Conv3dGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        check_bias(b, g.out_channels, "conv3d")?;
    }
    let out = conv3d_forward(&g, input.data(), weight.data(), bias.map(|b| b.data()));
    Tensor::new(&g.output_shape(), out)
}

pub(crate) fn check_bias<T: Real>(b: &Tensor<T>, channels: usize, op: &'static str) -> Result<()> {
    if b.len() != channels || b.rank() != 1 {
        return Err(TensorError::Incompatible {
            op,
            lhs: vec![channels],
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Transposed 3D convolution (no padding). Weight is `[C_in, C_out, kT, kH, kW]`;
/// each output axis has length `(in - 1) * stride + kernel`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
}

impl ConvTransposeGeometry {
    pub fn new(input_shape: &[usize], weight_shape: &[usize], stride: [usize; 3]) -> Result<Self> {
        if input_shape.len() != 4 || weight_shape.len() != 5 {
            return Err(TensorError::Rank {
                op: "conv_transpose3d",
                expected: 4,
                shape: input_shape.to_vec(),
            });
        }
        if weight_shape[0] != input_shape[0] {
            return Err(TensorError::Incompatible {
                op: "conv_transpose3d",
                lhs: input_shape.to_vec(),
                rhs: weight_shape.to_vec(),
            });
        }
        if stride.contains(&0) {
            return Err(TensorError::ZeroStride {
                op: "conv_transpose3d",
            });
        }
        let input = [input_shape[1], input_shape[2], input_shape[3]];
        let kernel = [weight_shape[2], weight_shape[3], weight_shape[4]];
        let output = [0, 1, 2].map(|a| (input[a] - 1) * stride[a] + kernel[a]);
        Ok(Self {
            in_channels: input_shape[0],
            out_channels: weight_shape[1],
            input,
            kernel,
            stride,
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.output[0], self.output[1], self.output[2]]
    }

    /// Visits every (input flat index, weight flat index, output flat index) triple.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [it_n, ih_n, iw_n] = self.input;
        let [kt_n, kh_n, kw_n] = self.kernel;
        let [ot_n, oh_n, ow_n] = self.output;
        let [st, sh, sw] = self.stride;
        for ci in 0..self.in_channels {
            for co in 0..self.out_channels {
                for kt in 0..kt_n {
                    for kh in 0..kh_n {
                        for kw in 0..kw_n {
                            let wi = (((ci * self.out_channels + co) * kt_n + kt) * kh_n + kh) * kw_n + kw;
                            for t in 0..it_n {
                                for h in 0..ih_n {
                                    for w in 0..iw_n {
                                        let xi = ((ci * it_n + t) * ih_n + h) * iw_n + w;
                                        let oi = ((co * ot_n + t * st + kt) * oh_n + h * sh + kh) * ow_n
                                            + w * sw
                                            + kw;
                                        f(xi, wi, oi);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_transpose3d_forward<T: Real>(
    g: &ConvTransposeGeometry,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let vol: usize = g.output.iter().product();
    let mut out = vec![T::zero(); g.out_channels * vol];
    if let Some(b) = b {
        for (co, chunk) in out.chunks_mut(vol).enumerate() {
            chunk.fill(b[co]);
        }
    }
    g.for_each(|xi, wi, oi| out[oi] += x[xi] * w[wi]);
    out
}

pub fn conv_transpose3d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: [usize; 3],
) -> Result<Tensor<T>> {
    let g = ConvTransposeGeometry::new(input.shape(), weight.shape(), stride)?;
    if let Some(b) = bias {
        check_bias(b, g.out_channels, "conv_transpose3d")?;
    }
    let out = conv_transpose3d_forward(&g, input.data(), weight.data(), bias.map(|b| b.data()));
    Tensor::new(&g.output_shape(), out)
}

pub(crate) fn conv_transpose3d_backward<T: Real>(
    g: &ConvTransposeGeometry,
    dy: &[T],
    x: &[T],
    w: &[T],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = want_w.then(|| vec![T::zero(); w.len()]);
    g.for_each(|xi, wi, oi| {
        if let Some(dx) = dx.as_mut() {
            dx[xi] += dy[oi] * w[wi];
        }
        if let Some(dw) = dw.as_mut() {
            dw[wi] += dy[oi] * x[xi];
        }
    });
    (dx, dw)
}

/// Max pooling geometry (no padding, floor mode).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub output: [usize; 3],
}

impl PoolGeometry {
    pub fn new(input_shape: &[usize], kernel: [usize; 3], stride: [usize; 3]) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(TensorError::Rank {
                op: "maxpool3d",
                expected: 4,
                shape: input_shape.to_vec(),
            });
        }
        if stride.contains(&0) || kernel.contains(&0) {
            return Err(TensorError::ZeroStride { op: "maxpool3d" });
        }
        let input = [input_shape[1], input_shape[2], input_shape[3]];
        let mut output = [0; 3];
        for a in 0..3 {
            if kernel[a] > input[a] {
                return Err(TensorError::KernelTooLarge {
                    op: "maxpool3d",
                    kernel: kernel.to_vec(),
                    padded: input.to_vec(),
                });
            }
            output[a] = (input[a] - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            channels: input_shape[0],
            input,
            kernel,
            stride,
            output,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.channels, self.output[0], self.output[1], self.output[2]]
    }
}

/// Returns pooled values and, per output cell, the flat input index of the
/// maximum. Ties go to the lowest flat index.
pub(crate) fn maxpool3d_forward<T: Real>(g: &PoolGeometry, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let [it_n, ih_n, iw_n] = g.input;
    let [ot_n, oh_n, ow_n] = g.output;
    let n = g.channels * ot_n * oh_n * ow_n;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for c in 0..g.channels {
        for ot in 0..ot_n {
            for oh in 0..oh_n {
                for ow in 0..ow_n {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for kt in 0..g.kernel[0] {
                        let t = ot * g.stride[0] + kt;
                        for kh in 0..g.kernel[1] {
                            let h = oh * g.stride[1] + kh;
                            let row = ((c * it_n + t) * ih_n + h) * iw_n;
                            for kw in 0..g.kernel[2] {
                                let idx = row + ow * g.stride[2] + kw;
                                let v = x[idx];
                                // window is scanned in ascending flat order, so strict
                                // comparison keeps the lowest index on ties
                                if best == usize::MAX || v > best_v || (v == best_v && idx < best) {
                                    best = idx;
                                    best_v = v;
                                }
                            }
                        }
                    }
                    out.push(best_v);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool3d<T: Real>(
    input: &Tensor<T>,
    kernel: [usize; 3],
    stride: [usize; 3],
) -> Result<Tensor<T>> {
    let g = PoolGeometry::new(input.shape(), kernel, stride)?;
    let (out, _) = maxpool3d_forward(&g, input.data());
    Tensor::new(&g.output_shape(), out)
}

/// One output coordinate of a linear resampling along a single axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AxisSample {
    pub lo: usize,
    pub hi: usize,
    /// Weight on `hi`; `lo` receives `1 - frac`.
    pub frac: f64,
}

/// Half-pixel-center sampling positions: `s = (d + 0.5) * in / out - 0.5`,
/// clamped to `[0, in - 1]`.
pub fn trilinear_sample_axis(in_len: usize, out_len: usize) -> Vec<AxisSample> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            AxisSample {
                lo,
                hi,
                frac: s - lo as f64,
            }
        })
        .collect()
}

pub(crate) struct UpsamplePlan {
    pub channels: usize,
    pub input: [usize; 3],
    pub axes: [Vec<AxisSample>; 3],
}

impl UpsamplePlan {
    pub fn new(input_shape: &[usize], out_size: [usize; 3]) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(TensorError::Rank {
                op: "trilinear_upsample",
                expected: 4,
                shape: input_shape.to_vec(),
            });
        }
        if out_size.contains(&0) {
            return Err(TensorError::InvalidArgument {
                op: "trilinear_upsample",
                detail: format!("output size {out_size:?} must be positive"),
            });
        }
        let input = [input_shape[1], input_shape[2], input_shape[3]];
        Ok(Self {
            channels: input_shape[0],
            input,
            axes: [0, 1, 2].map(|a| trilinear_sample_axis(input[a], out_size[a])),
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.channels,
            self.axes[0].len(),
            self.axes[1].len(),
            self.axes[2].len(),
        ]
    }

    /// Calls `f(out_index, in_index, weight)` for each of the 8 taps of every output cell.
    fn for_each<T: Real>(&self, mut f: impl FnMut(usize, usize, T)) {
        let [it_n, ih_n, iw_n] = self.input;
        let tw = |s: &AxisSample| {
            [
                (s.lo, T::from_f64_lossy(1.0 - s.frac)),
                (s.hi, T::from_f64_lossy(s.frac)),
            ]
        };
        let w_taps: Vec<_> = self.axes[2].iter().map(tw).collect();
        let mut o = 0;
        for c in 0..self.channels {
            for st in &self.axes[0] {
                let t_taps = tw(st);
                for sh in &self.axes[1] {
                    let h_taps = tw(sh);
                    for wt_pair in &w_taps {
                        for &(t, a) in &t_taps {
                            for &(h, b) in &h_taps {
                                let base = ((c * it_n + t) * ih_n + h) * iw_n;
                                for &(w, cw) in wt_pair {
                                    f(o, base + w, a * b * cw);
                                }
                            }
                        }
                        o += 1;
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, x: &[T]) -> Vec<T> {
        let n = self.channels * self.axes.iter().map(Vec::len).product::<usize>();
        let mut out = vec![T::zero(); n];
        self.for_each(|o, i, w: T| out[o] += w * x[i]);
        out
    }

    pub fn backward<T: Real>(&self, dy: &[T], in_len: usize) -> Vec<T> {
        let mut dx = vec![T::zero(); in_len];
        self.for_each(|o, i, w: T| dx[i] += w * dy[o]);
        dx
    }
}

/// Trilinear resampling of a `[C, T, H, W]` volume with half-pixel centers and
/// edge clamping.
///
/// Upsampling by an exact factor of two followed by averaging each 2×2×2
/// output block back down keeps the global mean:
///
/// ```
/// use vinet_core::tensor::{trilinear_upsample, Tensor};
/// let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| ((i * 37) % 11) as f64).collect();
/// let x = Tensor::<f64>::new(&[2, 3, 4, 5], data).unwrap();
/// let up = trilinear_upsample(&x, [6, 8, 10]).unwrap();
/// let mean = |t: &Tensor<f64>| t.sum() / t.len() as f64;
/// assert!((mean(&up) - mean(&x)).abs() < 1e-5);
/// ```
pub fn trilinear_upsample<T: Real>(input: &Tensor<T>, out_size: [usize; 3]) -> Result<Tensor<T>> {
    let plan = UpsamplePlan::new(input.shape(), out_size)?;
    Tensor::new(&plan.output_shape(), plan.forward(input.data()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_bruteforce() {
        for k in 0..4 {
            for pad in 0..3 {
                for stride in 1..4 {
                    for len in 1..7 {
                        if k > len + 2 * pad - 1 {
                            continue;
                        }
                        let out = (len + 2 * pad - k.max(1)) / stride + 1;
                        let (lo, hi) = valid_range(k, pad, stride, len, out);
                        for o in 0..out {
                            let pos = (o * stride + k) as isize - pad as isize;
                            let inside = pos >= 0 && (pos as usize) < len;
                            assert_eq!(inside, o >= lo && o < hi, "k{k} p{pad} s{stride} l{len} o{o}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn same_padding_keeps_shape() {
        let x = Tensor::<f64>::full(&[1, 4, 4, 4], 1.0).unwrap();
        let w = Tensor::<f64>::full(&[1, 1, 3, 3, 3], 1.0).unwrap();
        let y = conv3d(&x, &w, None, [1; 3], [1; 3]).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn all_ones_kernel_sums_27() {
        let x = Tensor::<f32>::full(&[1, 3, 3, 3], 1.0).unwrap();
        let w = Tensor::<f32>::full(&[1, 1, 3, 3, 3], 1.0).unwrap();
        let y = conv3d(&x, &w, None, [1; 3], [0; 3]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[27.0]);
    }

    #[test]
    fn conv3d_errors() {
        let x = Tensor::<f32>::full(&[2, 3, 3, 3], 1.0).unwrap();
        let w = Tensor::<f32>::full(&[1, 1, 3, 3, 3], 1.0).unwrap();
        assert!(matches!(
            conv3d(&x, &w, None, [1; 3], [0; 3]),
            Err(TensorError::Incompatible { .. })
        ));
        let x = Tensor::<f32>::full(&[1, 2, 3, 3], 1.0).unwrap();
        assert!(matches!(
            conv3d(&x, &w, None, [1; 3], [0; 3]),
            Err(TensorError::KernelTooLarge { .. })
        ));
        assert!(matches!(
            conv3d(&x, &w, None, [0, 1, 1], [1; 3]),
            Err(TensorError::ZeroStride { .. })
        ));
    }

    #[test]
    fn identity_kernel_is_identity() {
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|i| i as f64 * 0.25 - 3.0).collect();
        let x = Tensor::new(&[2, 3, 4, 5], data).unwrap();
        let w = Tensor::from_f64(&[2, 2, 1, 1, 1], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv3d(&x, &w, None, [1; 3], [0; 3]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn maxpool_max_of_all() {
        let x = Tensor::<f32>::from_f64(&[1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let y = maxpool3d(&x, [2; 3], [2; 3]).unwrap();
        assert_eq!(y.data(), &[8.0]);
    }

    #[test]
    fn maxpool_ties_pick_lowest_index() {
        let g = PoolGeometry::new(&[1, 1, 2, 2], [1, 2, 2], [1, 2, 2]).unwrap();
        let (_, arg) = maxpool3d_forward(&g, &[5.0f64, 5.0, 1.0, 5.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn upsample_identity_and_constant() {
        let data: Vec<f32> = (0..24).map(|i| i as f32).collect();
        let x = Tensor::new(&[1, 2, 3, 4], data).unwrap();
        assert_eq!(trilinear_upsample(&x, [2, 3, 4]).unwrap(), x);
        let c = Tensor::<f32>::full(&[2, 2, 3, 3], 0.7).unwrap();
        let up = trilinear_upsample(&c, [3, 5, 7]).unwrap();
        assert_eq!(up.shape(), &[2, 3, 5, 7]);
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn conv_transpose_doubles_resolution() {
        let x = Tensor::<f64>::full(&[2, 1, 3, 3], 1.0).unwrap();
        let w = Tensor::<f64>::full(&[2, 4, 1, 2, 2], 0.5).unwrap();
        let y = conv_transpose3d(&x, &w, None, [1, 2, 2]).unwrap();
        assert_eq!(y.shape(), &[4, 1, 6, 6]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }
}

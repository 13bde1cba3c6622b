//! Dense rank-4 tensors and the primitive numeric operations the rest of the
//! crate is built from: 2-D convolution (forward and the handwritten backward
//! kernels), shifting, padding, pooling and elementwise activations.
//!
//! Layout is `(batch, channel, row, col)` with contiguous per-channel planes.
//! All operations are pure functions over immutable inputs; a single
//! operation is internally single-threaded. Convolution accumulates in a
//! fixed order (kernel row, kernel col, input channel) so that results are
//! bit-reproducible and stride-1 circular convolution commutes *exactly*
//! with circular shifts.

use crate::error::{Error, Result};

/// Scalar type used throughout. `f64` by default; the `f32` feature switches
/// the whole stack to single precision.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Dense rank-4 array of shape `(batch, channels, rows, cols)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<Real>,
}

impl Tensor4 {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        assert!(b >= 1 && c >= 1 && h >= 1 && w >= 1, "dimensions must be >= 1");
        Tensor4 { b, c, h, w, data: vec![0.0; b * c * h * w] }
    }

    pub fn filled(b: usize, c: usize, h: usize, w: usize, v: Real) -> Self {
        let mut t = Self::zeros(b, c, h, w);
        t.data.fill(v);
        t
    }

    /// Builds a tensor from a flat row-major vector (batch outermost).
    pub fn from_vec(b: usize, c: usize, h: usize, w: usize, data: Vec<Real>) -> Result<Self> {
        if data.len() != b * c * h * w {
            return Err(Error::Shape(format!(
                "data length {} does not match shape ({b},{c},{h},{w})",
                data.len()
            )));
        }
        if b == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape("all dimensions must be >= 1".into()));
        }
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor value");
        Ok(Tensor4 { b, c, h, w, data })
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.b, self.c, self.h, self.w)
    }

    pub fn batch(&self) -> usize {
        self.b
    }
    pub fn channels(&self) -> usize {
        self.c
    }
    pub fn rows(&self) -> usize {
        self.h
    }
    pub fn cols(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, x: usize, y: usize) -> Real {
        self.data[((b * self.c + c) * self.h + x) * self.w + y]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, c: usize, x: usize, y: usize) -> &mut Real {
        &mut self.data[((b * self.c + c) * self.h + x) * self.w + y]
    }

    /// Contiguous `(h*w)` plane for one `(batch, channel)` pair.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[Real] {
        let start = (b * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [Real] {
        let start = (b * self.c + c) * self.h * self.w;
        let len = self.h * self.w;
        &mut self.data[start..start + len]
    }

    /// Extracts one batch element as a `(1, c, h, w)` tensor.
    pub fn batch_slice(&self, b: usize) -> Tensor4 {
        let len = self.c * self.h * self.w;
        let start = b * len;
        Tensor4 { b: 1, c: self.c, h: self.h, w: self.w, data: self.data[start..start + len].to_vec() }
    }

    /// Stacks `(1, c, h, w)` tensors along the batch dimension.
    pub fn stack_batch(items: &[Tensor4]) -> Result<Tensor4> {
        let first = items.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (_, c, h, w) = first.shape();
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.shape() != (1, c, h, w) {
                return Err(Error::Shape("stack_batch: mismatched shapes".into()));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor4::from_vec(items.len(), c, h, w, data)
    }

    /// Concatenates along the channel dimension.
    pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
        if a.b != b.b || a.h != b.h || a.w != b.w {
            return Err(Error::Shape("concat_channels: mismatched shapes".into()));
        }
        let mut out = Tensor4::zeros(a.b, a.c + b.c, a.h, a.w);
        for bi in 0..a.b {
            for c in 0..a.c {
                out.plane_mut(bi, c).copy_from_slice(a.plane(bi, c));
            }
            for c in 0..b.c {
                out.plane_mut(bi, a.c + c).copy_from_slice(b.plane(bi, c));
            }
        }
        Ok(out)
    }

    /// Splits off the leading `c0` channels, returning `(front, back)`.
    pub fn split_channels(&self, c0: usize) -> Result<(Tensor4, Tensor4)> {
        if c0 == 0 || c0 >= self.c {
            return Err(Error::Shape(format!("split_channels: bad split {c0} of {}", self.c)));
        }
        let mut front = Tensor4::zeros(self.b, c0, self.h, self.w);
        let mut back = Tensor4::zeros(self.b, self.c - c0, self.h, self.w);
        for bi in 0..self.b {
            for c in 0..c0 {
                front.plane_mut(bi, c).copy_from_slice(self.plane(bi, c));
            }
            for c in c0..self.c {
                back.plane_mut(bi, c - c0).copy_from_slice(self.plane(bi, c));
            }
        }
        Ok((front, back))
    }

    pub fn scale(&mut self, s: Real) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn add_assign(&mut self, other: &Tensor4) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor4) -> Real {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }
}

/// Padding behaviour at tensor borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Indices wrap modulo the spatial extent.
    Circular,
    /// Out-of-range reads are zero.
    Zero,
}

/// A convolution: kernel of shape `(out_c, in_c, kh, kw)`, per-output-channel
/// bias, stride and padding mode. Output positions are anchored at the kernel
/// centre, so stride 1 preserves the spatial size.
#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub kernel: Tensor4,
    pub bias: Vec<Real>,
    pub stride: usize,
    pub pad_mode: PadMode,
}

impl ConvSpec {
    pub fn new(kernel: Tensor4, bias: Vec<Real>, stride: usize, pad_mode: PadMode) -> Result<Self> {
        let (out_c, _, kh, kw) = kernel.shape();
        if bias.len() != out_c {
            return Err(Error::Shape(format!("bias length {} != out channels {out_c}", bias.len())));
        }
        if stride < 1 || kh < 1 || kw < 1 {
            return Err(Error::InvalidArgument("stride and kernel dims must be >= 1".into()));
        }
        Ok(ConvSpec { kernel, bias, stride, pad_mode })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().0
    }
    pub fn in_channels(&self) -> usize {
        self.kernel.shape().1
    }
}

#[inline]
fn wrap(i: isize, n: usize) -> usize {
    i.rem_euclid(n as isize) as usize
}

/// 2-D convolution (cross-correlation, as in CNN practice).
///
/// Output shape is `(b, out_c, ceil(h/stride), ceil(w/stride))`; stride 1
/// preserves the spatial size. In `Zero` mode the stride must divide both
/// spatial dims evenly.
pub fn conv2d(input: &Tensor4, spec: &ConvSpec) -> Result<Tensor4> {
    let (b, c, h, w) = input.shape();
    let (out_c, in_c, kh, kw) = spec.kernel.shape();
    if c != in_c {
        return Err(Error::Shape(format!("conv2d: input has {c} channels, kernel expects {in_c}")));
    }
    if spec.pad_mode == PadMode::Circular && (kh > h + kh - 1 || kw > w + kw - 1) {
        return Err(Error::Shape("conv2d: kernel larger than padded input".into()));
    }
    if spec.pad_mode == PadMode::Zero && (h % spec.stride != 0 || w % spec.stride != 0) {
        return Err(Error::Shape(format!(
            "conv2d: stride {} does not divide {h}x{w} evenly in zero-pad mode",
            spec.stride
        )));
    }
    let oh = h.div_ceil(spec.stride);
    let ow = w.div_ceil(spec.stride);

    if spec.stride == 1 && spec.pad_mode == PadMode::Circular {
        return Ok(conv2d_circular_s1(input, spec));
    }

    // General path: any stride, either padding mode.
    let p = (kh - 1) / 2;
    let q = (kw - 1) / 2;
    let mut out = Tensor4::zeros(b, out_c, oh, ow);
    for bi in 0..b {
        for oc in 0..out_c {
            for x in 0..oh {
                for y in 0..ow {
                    let mut acc = spec.bias[oc];
                    for ki in 0..kh {
                        for kj in 0..kw {
                            for ic in 0..in_c {
                                let sx = (spec.stride * x + ki) as isize - p as isize;
                                let sy = (spec.stride * y + kj) as isize - q as isize;
                                let v = match spec.pad_mode {
                                    PadMode::Circular => input.at(bi, ic, wrap(sx, h), wrap(sy, w)),
                                    PadMode::Zero => {
                                        if sx < 0 || sy < 0 || sx >= h as isize || sy >= w as isize {
                                            0.0
                                        } else {
                                            input.at(bi, ic, sx as usize, sy as usize)
                                        }
                                    }
                                };
                                acc += spec.kernel.at(oc, ic, ki, kj) * v;
                            }
                        }
                    }
                    *out.at_mut(bi, oc, x, y) = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Stride-1 circular fast path. The accumulation order per output element is
/// identical to the general path: (kernel row, kernel col, input channel).
fn conv2d_circular_s1(input: &Tensor4, spec: &ConvSpec) -> Tensor4 {
    let (b, in_c, h, w) = input.shape();
    let (out_c, _, kh, kw) = spec.kernel.shape();
    let p = (kh - 1) / 2;
    let q = (kw - 1) / 2;
    let mut out = Tensor4::zeros(b, out_c, h, w);
    for bi in 0..b {
        for oc in 0..out_c {
            out.plane_mut(bi, oc).fill(spec.bias[oc]);
            for ki in 0..kh {
                for kj in 0..kw {
                    let dy = kj as isize - q as isize;
                    for ic in 0..in_c {
                        let wgt = spec.kernel.at(oc, ic, ki, kj);
                        if wgt == 0.0 {
                            continue;
                        }
                        let src_plane = input.plane(bi, ic);
                        let dst_plane_start = ((bi * out_c + oc) * h) * w;
                        for x in 0..h {
                            let sx = wrap(x as isize + ki as isize - p as isize, h);
                            let src = &src_plane[sx * w..sx * w + w];
                            let dst =
                                &mut out.data[dst_plane_start + x * w..dst_plane_start + x * w + w];
                            accumulate_row(dst, src, wgt, dy, w);
                        }
                    }
                }
            }
        }
    }
    out
}

/// `dst[y] += wgt * src[(y + dy) mod w]`, with the interior (no wrap) span
/// done as a straight vectorisable loop.
#[inline]
pub(crate) fn accumulate_row(dst: &mut [Real], src: &[Real], wgt: Real, dy: isize, w: usize) {
    let lo = (-dy).max(0) as usize;
    let hi = (w as isize - dy).clamp(0, w as isize) as usize;
    for y in 0..lo {
        dst[y] += wgt * src[wrap(y as isize + dy, w)];
    }
    if hi > lo {
        let (d, s) = (&mut dst[lo..hi], &src[(lo as isize + dy) as usize..(hi as isize + dy) as usize]);
        for (dv, sv) in d.iter_mut().zip(s) {
            *dv += wgt * sv;
        }
    }
    for y in hi..w {
        dst[y] += wgt * src[wrap(y as isize + dy, w)];
    }
}

/// Gradient of [`conv2d`] with respect to its input (stride 1, circular).
pub fn conv2d_grad_input(grad_out: &Tensor4, spec: &ConvSpec, input_shape: (usize, usize, usize, usize)) -> Tensor4 {
    assert_eq!(spec.stride, 1, "backward kernels support stride 1 only");
    assert_eq!(spec.pad_mode, PadMode::Circular, "backward kernels support circular padding only");
    let (b, in_c, h, w) = input_shape;
    let (out_c, _, kh, kw) = spec.kernel.shape();
    let p = (kh - 1) / 2;
    let q = (kw - 1) / 2;
    let mut grad_in = Tensor4::zeros(b, in_c, h, w);
    for bi in 0..b {
        for ic in 0..in_c {
            let dst_start = ((bi * in_c + ic) * h) * w;
            for ki in 0..kh {
                for kj in 0..kw {
                    // input position u feeds output position u - (ki - p)
                    let dy = q as isize - kj as isize;
                    for oc in 0..out_c {
                        let wgt = spec.kernel.at(oc, ic, ki, kj);
                        if wgt == 0.0 {
                            continue;
                        }
                        let src_plane = grad_out.plane(bi, oc);
                        for u in 0..h {
                            let sx = wrap(u as isize + p as isize - ki as isize, h);
                            let src = &src_plane[sx * w..sx * w + w];
                            let dst = &mut grad_in.data[dst_start + u * w..dst_start + u * w + w];
                            accumulate_row(dst, src, wgt, dy, w);
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradients of [`conv2d`] with respect to the kernel and bias (stride 1,
/// circular). Returns `(grad_kernel, grad_bias)`.
pub fn conv2d_grad_params(grad_out: &Tensor4, input: &Tensor4, spec: &ConvSpec) -> (Tensor4, Vec<Real>) {
    assert_eq!(spec.stride, 1, "backward kernels support stride 1 only");
    assert_eq!(spec.pad_mode, PadMode::Circular, "backward kernels support circular padding only");
    let (b, in_c, h, w) = input.shape();
    let (out_c, _, kh, kw) = spec.kernel.shape();
    let p = (kh - 1) / 2;
    let q = (kw - 1) / 2;
    let mut grad_k = Tensor4::zeros(out_c, in_c, kh, kw);
    let mut grad_b = vec![0.0; out_c];
    for bi in 0..b {
        for oc in 0..out_c {
            let go_plane = grad_out.plane(bi, oc);
            grad_b[oc] += go_plane.iter().sum::<Real>();
            for ic in 0..in_c {
                let in_plane = input.plane(bi, ic);
                for ki in 0..kh {
                    for kj in 0..kw {
                        let dy = kj as isize - q as isize;
                        let mut acc = 0.0;
                        for x in 0..h {
                            let sx = wrap(x as isize + ki as isize - p as isize, h);
                            let go_row = &go_plane[x * w..x * w + w];
                            let in_row = &in_plane[sx * w..sx * w + w];
                            acc += dot_shifted(go_row, in_row, dy, w);
                        }
                        *grad_k.at_mut(oc, ic, ki, kj) += acc;
                    }
                }
            }
        }
    }
    (grad_k, grad_b)
}

/// `sum_y a[y] * b[(y + dy) mod w]` with a vectorisable interior span.
#[inline]
fn dot_shifted(a: &[Real], b: &[Real], dy: isize, w: usize) -> Real {
    let lo = (-dy).max(0) as usize;
    let hi = (w as isize - dy).clamp(0, w as isize) as usize;
    let mut acc = 0.0;
    for y in 0..lo {
        acc += a[y] * b[wrap(y as isize + dy, w)];
    }
    if hi > lo {
        let (av, bv) = (&a[lo..hi], &b[(lo as isize + dy) as usize..(hi as isize + dy) as usize]);
        acc += av.iter().zip(bv).map(|(x, y)| x * y).sum::<Real>();
    }
    for y in hi..w {
        acc += a[y] * b[wrap(y as isize + dy, w)];
    }
    acc
}

/// Mean of every `(h, w)` plane; result is indexed `[batch][channel]`.
pub fn global_avg_pool(input: &Tensor4) -> Vec<Vec<Real>> {
    let (b, c, h, w) = input.shape();
    let n = (h * w) as Real;
    (0..b)
        .map(|bi| (0..c).map(|ci| input.plane(bi, ci).iter().sum::<Real>() / n).collect())
        .collect()
}

/// Shift behaviour at borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftMode {
    /// Content wraps around the opposite border.
    Circular,
    /// Vacated cells take a fill value; shifted-out content is discarded.
    Common,
}

/// A spatial translation by `(sx, sy)` pixels (rows, cols).
#[derive(Debug, Clone, Copy)]
pub struct ShiftSpec {
    pub sx: isize,
    pub sy: isize,
    pub mode: ShiftMode,
}

impl ShiftSpec {
    pub fn circular(sx: isize, sy: isize) -> Self {
        ShiftSpec { sx, sy, mode: ShiftMode::Circular }
    }
    pub fn common(sx: isize, sy: isize) -> Self {
        ShiftSpec { sx, sy, mode: ShiftMode::Common }
    }
}

/// Translates every plane by `(sx, sy)`: `out[x][y] = in[x - sx][y - sy]`,
/// wrapping in circular mode and filling vacated cells in common mode.
pub fn shift2d(input: &Tensor4, shift: ShiftSpec, fill: Real) -> Result<Tensor4> {
    let (b, c, h, w) = input.shape();
    if shift.mode == ShiftMode::Common
        && (shift.sx.unsigned_abs() >= h || shift.sy.unsigned_abs() >= w)
    {
        return Err(Error::InvalidArgument(format!(
            "common shift ({}, {}) out of range for {h}x{w}",
            shift.sx, shift.sy
        )));
    }
    let mut out = Tensor4::zeros(b, c, h, w);
    for bi in 0..b {
        for ci in 0..c {
            let src = input.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for x in 0..h {
                for y in 0..w {
                    let sx = x as isize - shift.sx;
                    let sy = y as isize - shift.sy;
                    dst[x * w + y] = match shift.mode {
                        ShiftMode::Circular => src[wrap(sx, h) * w + wrap(sy, w)],
                        ShiftMode::Common => {
                            if sx < 0 || sy < 0 || sx >= h as isize || sy >= w as isize {
                                fill
                            } else {
                                src[sx as usize * w + sy as usize]
                            }
                        }
                    };
                }
            }
        }
    }
    Ok(out)
}

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn sigmoid(x: Real) -> Real {
    1.0 / (1.0 + (-x).exp())
}

pub fn activation(input: &Tensor4, kind: Activation) -> Tensor4 {
    let mut out = input.clone();
    match kind {
        Activation::Relu => {
            for v in out.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Sigmoid => {
            for v in out.data_mut() {
                *v = sigmoid(*v);
            }
        }
    }
    out
}

/// Pad amounts per border, rows first: `(top, bottom, left, right)`.
pub type PadAmounts = (usize, usize, usize, usize);

/// Enlarges every plane by the given amounts; circular mode replicates
/// wrapped content, zero mode fills with zeros.
pub fn pad(input: &Tensor4, amounts: PadAmounts, mode: PadMode) -> Result<Tensor4> {
    let (b, c, h, w) = input.shape();
    let (top, bottom, left, right) = amounts;
    if mode == PadMode::Circular && (top > h || bottom > h || left > w || right > w) {
        return Err(Error::InvalidArgument(format!(
            "circular pad ({top},{bottom},{left},{right}) exceeds dimensions {h}x{w}"
        )));
    }
    let mut out = Tensor4::zeros(b, c, h + top + bottom, w + left + right);
    let ow = w + left + right;
    for bi in 0..b {
        for ci in 0..c {
            let src = input.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for x in 0..h + top + bottom {
                for y in 0..ow {
                    let sx = x as isize - top as isize;
                    let sy = y as isize - left as isize;
                    dst[x * ow + y] = match mode {
                        PadMode::Circular => src[wrap(sx, h) * w + wrap(sy, w)],
                        PadMode::Zero => {
                            if sx < 0 || sy < 0 || sx >= h as isize || sy >= w as isize {
                                0.0
                            } else {
                                src[sx as usize * w + sy as usize]
                            }
                        }
                    };
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        let data = (0..b * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor4::from_vec(b, c, h, w, data).unwrap()
    }

    /// Direct convolution oracle: independent loop structure, absolute input
    /// coordinates, explicit index wrapping.
    fn conv_oracle(input: &Tensor4, spec: &ConvSpec) -> Tensor4 {
        let (b, in_c, h, w) = input.shape();
        let (out_c, _, kh, kw) = spec.kernel.shape();
        let p = (kh as isize - 1) / 2;
        let q = (kw as isize - 1) / 2;
        let mut out = Tensor4::zeros(b, out_c, h, w);
        for bi in 0..b {
            for oc in 0..out_c {
                for x in 0..h as isize {
                    for y in 0..w as isize {
                        let mut acc = spec.bias[oc];
                        for ic in 0..in_c {
                            for ki in 0..kh as isize {
                                for kj in 0..kw as isize {
                                    let sx = (x + ki - p).rem_euclid(h as isize) as usize;
                                    let sy = (y + kj - q).rem_euclid(w as isize) as usize;
                                    acc += spec.kernel.at(oc, ic, ki as usize, kj as usize)
                                        * input.at(bi, ic, sx, sy);
                                }
                            }
                        }
                        *out.at_mut(bi, oc, x as usize, y as usize) = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_1x1_scaling_identity() {
        let input = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let kernel = Tensor4::from_vec(1, 1, 1, 1, vec![2.0]).unwrap();
        let spec = ConvSpec::new(kernel, vec![0.0], 1, PadMode::Circular).unwrap();
        let out = conv2d(&input, &spec).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_circular_constant_field() {
        let input = Tensor4::filled(1, 1, 3, 3, 1.0);
        let kernel = Tensor4::filled(1, 1, 3, 3, 1.0);
        let spec = ConvSpec::new(kernel, vec![0.0], 1, PadMode::Circular).unwrap();
        let out = conv2d(&input, &spec).unwrap();
        for &v in out.data() {
            assert!((v - 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_tensor(&mut rng, 1, 2, 5, 5);
        let kernel = random_tensor(&mut rng, 3, 2, 3, 3);
        let bias: Vec<Real> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let spec = ConvSpec::new(kernel, bias, 1, PadMode::Circular).unwrap();
        let got = conv2d(&input, &spec).unwrap();
        let want = conv_oracle(&input, &spec);
        assert!(got.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let input = Tensor4::zeros(1, 2, 4, 4);
        let kernel = Tensor4::zeros(1, 3, 3, 3);
        let spec = ConvSpec::new(kernel, vec![0.0], 1, PadMode::Circular).unwrap();
        assert!(matches!(conv2d(&input, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_zero_mode_stride_must_divide() {
        let input = Tensor4::zeros(1, 1, 5, 4);
        let kernel = Tensor4::zeros(1, 1, 3, 3);
        let spec = ConvSpec::new(kernel, vec![0.0], 2, PadMode::Zero).unwrap();
        assert!(matches!(conv2d(&input, &spec), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_strided_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let input = random_tensor(&mut rng, 1, 1, 6, 6);
        let kernel = random_tensor(&mut rng, 2, 1, 3, 3);
        let spec = ConvSpec::new(kernel, vec![0.0, 0.0], 2, PadMode::Circular).unwrap();
        let out = conv2d(&input, &spec).unwrap();
        assert_eq!(out.shape(), (1, 2, 3, 3));
    }

    #[test]
    fn conv_commutes_with_circular_shift_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let input = random_tensor(&mut rng, 2, 3, 8, 8);
            let kernel = random_tensor(&mut rng, 2, 3, 3, 3);
            let bias: Vec<Real> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let spec = ConvSpec::new(kernel, bias, 1, PadMode::Circular).unwrap();
            let sx = rng.gen_range(-7..8);
            let sy = rng.gen_range(-7..8);
            let shift = ShiftSpec::circular(sx, sy);
            let a = conv2d(&shift2d(&input, shift, 0.0).unwrap(), &spec).unwrap();
            let b = shift2d(&conv2d(&input, &spec).unwrap(), shift, 0.0).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-12, "shift ({sx},{sy})");
        }
    }

    #[test]
    fn gap_constant_and_mean() {
        let t = Tensor4::filled(2, 3, 4, 4, 2.5);
        for row in global_avg_pool(&t) {
            for v in row {
                assert!((v - 2.5).abs() < 1e-15);
            }
        }
        let t = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((global_avg_pool(&t)[0][0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn gap_matches_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(&mut rng, 2, 3, 4, 4);
        let got = global_avg_pool(&t);
        for bi in 0..2 {
            for ci in 0..3 {
                let mut s = 0.0;
                for x in 0..4 {
                    for y in 0..4 {
                        s += t.at(bi, ci, x, y);
                    }
                }
                assert!((got[bi][ci] - s / 16.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shift_circular_rotation() {
        let t = Tensor4::from_vec(1, 1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = shift2d(&t, ShiftSpec::circular(0, 1), 0.0).unwrap();
        assert_eq!(out.data(), &[4.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn shift_common_fill() {
        let t = Tensor4::from_vec(1, 1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = shift2d(&t, ShiftSpec::common(0, 1), 0.0).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn shift_full_period_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_tensor(&mut rng, 1, 2, 3, 5);
        let out = shift2d(&t, ShiftSpec::circular(3, 5), 0.0).unwrap();
        assert_eq!(out.data(), t.data());
    }

    #[test]
    fn shift_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = random_tensor(&mut rng, 1, 1, 6, 7);
        for (sx, sy) in [(1, 2), (-3, 4), (5, -6)] {
            let there = shift2d(&t, ShiftSpec::circular(sx, sy), 0.0).unwrap();
            let back = shift2d(&there, ShiftSpec::circular(-sx, -sy), 0.0).unwrap();
            assert_eq!(back.data(), t.data());
        }
    }

    #[test]
    fn shift_common_out_of_range_rejected() {
        let t = Tensor4::zeros(1, 1, 4, 4);
        assert!(shift2d(&t, ShiftSpec::common(4, 0), 0.0).is_err());
        assert!(shift2d(&t, ShiftSpec::common(0, -4), 0.0).is_err());
    }

    #[test]
    fn activation_examples() {
        let t = Tensor4::from_vec(1, 1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(activation(&t, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        let z = Tensor4::from_vec(1, 1, 1, 1, vec![0.0]).unwrap();
        assert!((activation(&z, Activation::Sigmoid).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_symmetry_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x: Real = rng.gen_range(-10.0..10.0);
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pad_zero_center() {
        let t = Tensor4::from_vec(1, 1, 1, 1, vec![5.0]).unwrap();
        let out = pad(&t, (1, 1, 1, 1), PadMode::Zero).unwrap();
        assert_eq!(out.shape(), (1, 1, 3, 3));
        for x in 0..3 {
            for y in 0..3 {
                let want = if x == 1 && y == 1 { 5.0 } else { 0.0 };
                assert_eq!(out.at(0, 0, x, y), want);
            }
        }
    }

    #[test]
    fn pad_circular_corners() {
        let t = Tensor4::from_vec(1, 1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = pad(&t, (1, 1, 1, 1), PadMode::Circular).unwrap();
        assert_eq!(out.shape(), (1, 1, 4, 4));
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 0, 3), 3.0);
        assert_eq!(out.at(0, 0, 3, 0), 2.0);
        assert_eq!(out.at(0, 0, 3, 3), 1.0);
        // index-wrap oracle over the full padded grid
        for x in 0..4isize {
            for y in 0..4isize {
                let want = t.at(0, 0, (x - 1).rem_euclid(2) as usize, (y - 1).rem_euclid(2) as usize);
                assert_eq!(out.at(0, 0, x as usize, y as usize), want);
            }
        }
    }

    #[test]
    fn pad_by_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = random_tensor(&mut rng, 1, 2, 3, 3);
        let out = pad(&t, (0, 0, 0, 0), PadMode::Circular).unwrap();
        assert_eq!(out.data(), t.data());
    }

    #[test]
    fn pad_oversized_circular_rejected() {
        let t = Tensor4::zeros(1, 1, 2, 2);
        assert!(pad(&t, (3, 0, 0, 0), PadMode::Circular).is_err());
    }

    #[test]
    fn grad_input_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let input = random_tensor(&mut rng, 1, 2, 5, 5);
        let kernel = random_tensor(&mut rng, 3, 2, 3, 3);
        let bias: Vec<Real> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let spec = ConvSpec::new(kernel, bias, 1, PadMode::Circular).unwrap();
        let upstream = random_tensor(&mut rng, 1, 3, 5, 5);
        // loss = <upstream, conv(input)>
        let grad = conv2d_grad_input(&upstream, &spec, input.shape());
        let loss = |t: &Tensor4| -> Real {
            conv2d(t, &spec).unwrap().data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for idx in [0usize, 7, 24, 49] {
            let mut plus = input.clone();
            plus.data_mut()[idx] += eps;
            let mut minus = input.clone();
            minus.data_mut()[idx] -= eps;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * eps);
            assert!((grad.data()[idx] - numeric).abs() < 1e-7, "idx {idx}");
        }
    }

    #[test]
    fn grad_params_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let input = random_tensor(&mut rng, 2, 2, 4, 4);
        let kernel = random_tensor(&mut rng, 2, 2, 3, 3);
        let bias: Vec<Real> = (0..2).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let spec = ConvSpec::new(kernel.clone(), bias.clone(), 1, PadMode::Circular).unwrap();
        let upstream = random_tensor(&mut rng, 2, 2, 4, 4);
        let (gk, gb) = conv2d_grad_params(&upstream, &input, &spec);
        let loss = |k: &Tensor4, b: &[Real]| -> Real {
            let s = ConvSpec::new(k.clone(), b.to_vec(), 1, PadMode::Circular).unwrap();
            conv2d(&input, &s).unwrap().data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for idx in [0usize, 5, 17, 35] {
            let mut kp = kernel.clone();
            kp.data_mut()[idx] += eps;
            let mut km = kernel.clone();
            km.data_mut()[idx] -= eps;
            let numeric = (loss(&kp, &bias) - loss(&km, &bias)) / (2.0 * eps);
            assert!((gk.data()[idx] - numeric).abs() < 1e-6, "kernel idx {idx}");
        }
        let mut bp = bias.clone();
        bp[1] += eps;
        let mut bm = bias.clone();
        bm[1] -= eps;
        let numeric = (loss(&kernel, &bp) - loss(&kernel, &bm)) / (2.0 * eps);
        assert!((gb[1] - numeric).abs() < 1e-6);
    }
}

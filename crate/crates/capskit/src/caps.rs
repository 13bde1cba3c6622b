//! The CAPD/CAPU sampler pair and the baseline samplers it is compared with.
//!
//! CAPD (component attention polyphase downsampling) splits a feature map
//! into its four polyphase components, scores each with a small shared
//! feature extractor followed by windowed pooling and cross-component
//! attention, sharpens the scores with a temperature softmax, and fuses the
//! components with the resulting weights. The index of the dominant component
//! is recorded so that CAPU (the matching upsampler) can restore values to
//! their original spatial phase, zero-filling everything else.
//!
//! Baselines: plain 2x2 max pooling, blur pooling (dense max, low-pass
//! filter, subsample) and max-norm polyphase selection.

use crate::error::{Error, Result};
use crate::tensor::{self, activation, conv2d, sigmoid, Activation, ConvSpec, PadMode, Real, Tensor4};
use rand::Rng;

/// Flattened component order: `(0,0), (0,1), (1,0), (1,1)`. The flat index
/// equals the binary encoding `2*i + j`, so a recorded index and its
/// row/col bit pair agree by construction.
pub const COMPONENT_ORDER: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// The four polyphase components of a feature map, each `(b, c, h/2, w/2)`.
#[derive(Debug, Clone)]
pub struct PolyComponents {
    pub comps: [Tensor4; 4],
}

/// Splits `f[2x+i][2y+j]` into components indexed by `(i, j)`.
/// Spatial dims must be even; odd sizes are rejected rather than padded so
/// the index arithmetic stays exact.
pub fn polyphase_split(f: &Tensor4) -> Result<PolyComponents> {
    let (b, c, h, w) = f.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("polyphase_split: odd spatial dims {h}x{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut comps: [Tensor4; 4] = std::array::from_fn(|_| Tensor4::zeros(b, c, h2, w2));
    for (idx, &(i, j)) in COMPONENT_ORDER.iter().enumerate() {
        for bi in 0..b {
            for ci in 0..c {
                let src = f.plane(bi, ci);
                let dst = comps[idx].plane_mut(bi, ci);
                for x in 0..h2 {
                    let row = &src[(2 * x + i) * w..(2 * x + i + 1) * w];
                    for y in 0..w2 {
                        dst[x * w2 + y] = row[2 * y + j];
                    }
                }
            }
        }
    }
    Ok(PolyComponents { comps })
}

/// Inverse of [`polyphase_split`]: interleaves the four components back into
/// a full-resolution tensor, exactly.
pub fn reassemble(comps: &PolyComponents) -> Tensor4 {
    let (b, c, h2, w2) = comps.comps[0].shape();
    let mut out = Tensor4::zeros(b, c, 2 * h2, 2 * w2);
    let w = 2 * w2;
    for (idx, &(i, j)) in COMPONENT_ORDER.iter().enumerate() {
        for bi in 0..b {
            for ci in 0..c {
                let src = comps.comps[idx].plane(bi, ci);
                let dst = out.plane_mut(bi, ci);
                for x in 0..h2 {
                    for y in 0..w2 {
                        dst[(2 * x + i) * w + 2 * y + j] = src[x * w2 + y];
                    }
                }
            }
        }
    }
    out
}

/// Fusion behaviour of CAPD.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    /// Weighted sum of all four components (differentiable).
    Soft,
    /// Bit-exact copy of the argmax component (inference only).
    Hard,
}

/// Hyperparameters of the CAPD/CAPU pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapsConfig {
    /// Proportion of component-feature boundary cropped by the adaptive
    /// window before pooling. Must satisfy `0 <= beta < 0.5`.
    pub beta: Real,
    /// Temperature of the weight softmax; small values approach argmax
    /// selection.
    pub temperature: Real,
    /// Attention kernel size (over the length-4 component sequence).
    pub k: usize,
    pub use_aw: bool,
    pub use_ca: bool,
    pub use_lpf: bool,
    pub select_mode: SelectMode,
}

impl Default for CapsConfig {
    fn default() -> Self {
        CapsConfig {
            beta: 0.25,
            temperature: 1e-3,
            k: 2,
            use_aw: true,
            use_ca: true,
            use_lpf: true,
            select_mode: SelectMode::Soft,
        }
    }
}

impl CapsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.beta) {
            return Err(Error::Config(format!("beta must be in [0, 0.5), got {}", self.beta)));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if self.k == 0 || self.k > 4 {
            return Err(Error::Config(format!("attention kernel size must be in 1..=4, got {}", self.k)));
        }
        Ok(())
    }

    /// The configuration under which the down/up round trip is exactly
    /// equivariant to circular shifts: no boundary crop, hard selection and
    /// no cross-component attention.
    ///
    /// Attention mixes the four pooled values with a circular convolution
    /// over the flat component order. Even shifts and odd row shifts permute
    /// the components cyclically, which that convolution commutes with; an
    /// odd column shift swaps components pairwise, which it does not. The
    /// exactness suites therefore score components by their pooled means
    /// alone.
    pub fn equivalence_regime() -> Self {
        CapsConfig { beta: 0.0, use_ca: false, select_mode: SelectMode::Hard, ..Default::default() }
    }
}

/// Learnable parameters of one CAPD layer: the shared three-conv feature
/// extractor and the attention kernel.
#[derive(Debug, Clone)]
pub struct CapdParams {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    pub conv3: ConvSpec,
    pub attn: Vec<Real>,
}

/// Extractor widths used at full scale: 3x3/128 then 3x3/64 then 1x1/1.
pub const EXTRACTOR_WIDTHS_FULL: (usize, usize) = (128, 64);

impl CapdParams {
    /// He-uniform initialisation of an extractor with the given hidden
    /// widths `(c1, c2)` over `in_c`-channel components.
    pub fn init<R: Rng>(in_c: usize, widths: (usize, usize), k: usize, rng: &mut R) -> Self {
        let (c1, c2) = widths;
        let conv1 = init_conv(rng, c1, in_c, 3, 3);
        let conv2 = init_conv(rng, c2, c1, 3, 3);
        let conv3 = init_conv(rng, 1, c2, 1, 1);
        let bound = (6.0 / k as Real).sqrt();
        let attn = (0..k).map(|_| rng.gen_range(-bound..bound)).collect();
        CapdParams { conv1, conv2, conv3, attn }
    }
}

pub(crate) fn he_uniform<R: Rng>(rng: &mut R, out_c: usize, in_c: usize, kh: usize, kw: usize) -> Tensor4 {
    let fan_in = (in_c * kh * kw) as Real;
    let bound = (6.0 / fan_in).sqrt();
    let data = (0..out_c * in_c * kh * kw).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor4::from_vec(out_c, in_c, kh, kw, data).unwrap()
}

/// He-uniform kernel plus `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` bias, stride
/// 1, circular padding. Nonzero biases keep ReLU pre-activations off the
/// exact kink in regions where every input tap is zero.
pub(crate) fn init_conv<R: Rng>(rng: &mut R, out_c: usize, in_c: usize, kh: usize, kw: usize) -> ConvSpec {
    let kernel = he_uniform(rng, out_c, in_c, kh, kw);
    let bound = 1.0 / ((in_c * kh * kw) as Real).sqrt();
    let bias = (0..out_c).map(|_| rng.gen_range(-bound..bound)).collect();
    ConvSpec::new(kernel, bias, 1, PadMode::Circular).unwrap()
}

/// Index of the dominant component, one entry per batch element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleIndex {
    pub gamma: Vec<u8>,
}

/// Outcome of one CAPD application.
#[derive(Debug, Clone)]
pub struct DownResult {
    pub d: Tensor4,
    pub gamma: SampleIndex,
    /// Fusion weights per batch element, in component order; each row sums
    /// to one. Exactly one-hot in hard mode.
    pub weights: Vec<[Real; 4]>,
    /// Temperature-softmax scores before hard selection (equal to `weights`
    /// in soft mode). Their top-two gap tells how decisive the selection
    /// was, which exact-equivalence checks depend on.
    pub scores: Vec<[Real; 4]>,
}

/// Activations cached by [`capd_forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct CapdCache {
    pub comps: PolyComponents,
    pub a1: [Tensor4; 4],
    pub a2: [Tensor4; 4],
    pub p: [Tensor4; 4],
    pub z: Vec<[Real; 4]>,
    pub rho: Vec<[Real; 4]>,
    pub weights: Vec<[Real; 4]>,
    pub gamma: SampleIndex,
    pub input_shape: (usize, usize, usize, usize),
}

/// Gradients for one CAPD layer, mirroring [`CapdParams`].
#[derive(Debug, Clone)]
pub struct CapdGrads {
    pub conv1_k: Tensor4,
    pub conv1_b: Vec<Real>,
    pub conv2_k: Tensor4,
    pub conv2_b: Vec<Real>,
    pub conv3_k: Tensor4,
    pub conv3_b: Vec<Real>,
    pub attn: Vec<Real>,
}

impl CapdGrads {
    pub fn zeros_like(p: &CapdParams) -> Self {
        let (o1, i1, k1h, k1w) = p.conv1.kernel.shape();
        let (o2, i2, k2h, k2w) = p.conv2.kernel.shape();
        let (o3, i3, k3h, k3w) = p.conv3.kernel.shape();
        CapdGrads {
            conv1_k: Tensor4::zeros(o1, i1, k1h, k1w),
            conv1_b: vec![0.0; o1],
            conv2_k: Tensor4::zeros(o2, i2, k2h, k2w),
            conv2_b: vec![0.0; o2],
            conv3_k: Tensor4::zeros(o3, i3, k3h, k3w),
            conv3_b: vec![0.0; o3],
            attn: vec![0.0; p.attn.len()],
        }
    }
}

/// Shared-weight feature extraction: `conv3x3 -> relu -> conv3x3 -> relu ->
/// conv1x1`, applied identically to each component.
pub fn extract_features(comps: &PolyComponents, params: &CapdParams) -> Result<[Tensor4; 4]> {
    let mut out: Vec<Tensor4> = Vec::with_capacity(4);
    for comp in &comps.comps {
        let a1 = activation(&conv2d(comp, &params.conv1)?, Activation::Relu);
        let a2 = activation(&conv2d(&a1, &params.conv2)?, Activation::Relu);
        out.push(conv2d(&a2, &params.conv3)?);
    }
    Ok(out.try_into().expect("four components"))
}

/// Crop sizes for the adaptive window: a `beta` proportion of each border,
/// split evenly between the two sides and floored.
pub fn window_margins(h2: usize, w2: usize, beta: Real) -> (usize, usize) {
    let hs = (h2 as Real * beta * 0.5).floor() as usize;
    let ws = (w2 as Real * beta * 0.5).floor() as usize;
    (hs, ws)
}

/// Mean of each component feature over the boundary-cropped window,
/// per batch element. `beta = 0` degenerates to plain global average
/// pooling.
pub fn adaptive_window(p: &[Tensor4; 4], beta: Real) -> Result<Vec<[Real; 4]>> {
    let (b, _, h2, w2) = p[0].shape();
    let (hs, ws) = window_margins(h2, w2, beta);
    if 2 * hs >= h2 || 2 * ws >= w2 {
        return Err(Error::InvalidArgument(format!(
            "adaptive window empty: margins ({hs},{ws}) on {h2}x{w2}"
        )));
    }
    let count = ((h2 - 2 * hs) * (w2 - 2 * ws)) as Real;
    let mut z = vec![[0.0; 4]; b];
    for (idx, pi) in p.iter().enumerate() {
        for (bi, zb) in z.iter_mut().enumerate() {
            let plane = pi.plane(bi, 0);
            let mut acc = 0.0;
            for x in hs..h2 - hs {
                acc += plane[x * w2 + ws..x * w2 + w2 - ws].iter().sum::<Real>();
            }
            zb[idx] = acc / count;
        }
    }
    Ok(z)
}

/// Cross-component attention: circular 1-D convolution of the length-4
/// pooled sequence with the size-`k` kernel, then a sigmoid.
/// `u[i] = sum_t h[t] * z[(i+t) mod 4]`.
pub fn component_attention(z: &[Real; 4], h_kernel: &[Real]) -> [Real; 4] {
    let mut rho = [0.0; 4];
    for i in 0..4 {
        let mut u = 0.0;
        for (t, &ht) in h_kernel.iter().enumerate() {
            u += ht * z[(i + t) % 4];
        }
        rho[i] = sigmoid(u);
    }
    rho
}

/// Temperature softmax with max-subtraction; order-preserving for any
/// `temperature > 0` and safe at very small temperatures.
pub fn t_softmax(rho: &[Real; 4], temperature: Real) -> [Real; 4] {
    let m = rho.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    let mut w = [0.0; 4];
    let mut sum = 0.0;
    for i in 0..4 {
        w[i] = ((rho[i] - m) / temperature).exp();
        sum += w[i];
    }
    for wi in &mut w {
        *wi /= sum;
    }
    w
}

/// Lowest index attaining the maximum.
pub fn argmax4(vals: &[Real; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if vals[i] > vals[best] {
            best = i;
        }
    }
    best
}

/// Maps a component index to its `(row, col)` phase bits:
/// `0 -> (0,0), 1 -> (0,1), 2 -> (1,0), 3 -> (1,1)`.
pub fn phi_encode(gamma: usize) -> Result<(usize, usize)> {
    if gamma > 3 {
        return Err(Error::InvalidArgument(format!("component index {gamma} out of range 0..=3")));
    }
    Ok((gamma >> 1, gamma & 1))
}

fn capd_pipeline(
    f: &Tensor4,
    params: &CapdParams,
    cfg: &CapsConfig,
) -> Result<(DownResult, CapdCache)> {
    cfg.validate()?;
    let f0 = if cfg.use_lpf { lpf_apply(f) } else { f.clone() };
    let comps = polyphase_split(&f0)?;
    let (b, c, h2, w2) = comps.comps[0].shape();

    let mut a1: Vec<Tensor4> = Vec::with_capacity(4);
    let mut a2: Vec<Tensor4> = Vec::with_capacity(4);
    let mut p: Vec<Tensor4> = Vec::with_capacity(4);
    for comp in &comps.comps {
        let x1 = activation(&conv2d(comp, &params.conv1)?, Activation::Relu);
        let x2 = activation(&conv2d(&x1, &params.conv2)?, Activation::Relu);
        p.push(conv2d(&x2, &params.conv3)?);
        a1.push(x1);
        a2.push(x2);
    }
    let a1: [Tensor4; 4] = a1.try_into().expect("four");
    let a2: [Tensor4; 4] = a2.try_into().expect("four");
    let p: [Tensor4; 4] = p.try_into().expect("four");

    let beta = if cfg.use_aw { cfg.beta } else { 0.0 };
    let z = adaptive_window(&p, beta)?;

    let mut rho = Vec::with_capacity(b);
    let mut weights = Vec::with_capacity(b);
    let mut gamma = Vec::with_capacity(b);
    for zb in &z {
        let r = if cfg.use_ca { component_attention(zb, &params.attn) } else { *zb };
        let w = t_softmax(&r, cfg.temperature);
        gamma.push(argmax4(&w) as u8);
        rho.push(r);
        weights.push(w);
    }

    let scores = weights.clone();
    let mut d = Tensor4::zeros(b, c, h2, w2);
    match cfg.select_mode {
        SelectMode::Hard => {
            for bi in 0..b {
                let sel = gamma[bi] as usize;
                for ci in 0..c {
                    d.plane_mut(bi, ci).copy_from_slice(comps.comps[sel].plane(bi, ci));
                }
                let mut one_hot = [0.0; 4];
                one_hot[sel] = 1.0;
                weights[bi] = one_hot;
            }
        }
        SelectMode::Soft => {
            for bi in 0..b {
                for (idx, comp) in comps.comps.iter().enumerate() {
                    let wi = weights[bi][idx];
                    for ci in 0..c {
                        let src = comp.plane(bi, ci);
                        let dst = d.plane_mut(bi, ci);
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv += wi * sv;
                        }
                    }
                }
            }
        }
    }

    let gamma = SampleIndex { gamma };
    let cache = CapdCache {
        comps,
        a1,
        a2,
        p,
        z,
        rho,
        weights: weights.clone(),
        gamma: gamma.clone(),
        input_shape: f.shape(),
    };
    Ok((DownResult { d, gamma, weights, scores }, cache))
}

/// One CAPD application: optional low-pass filter, polyphase split, shared
/// feature extraction, windowed pooling, attention, temperature softmax and
/// component fusion. Records the argmax component index for the upsampler.
pub fn capd_forward(f: &Tensor4, params: &CapdParams, cfg: &CapsConfig) -> Result<DownResult> {
    capd_pipeline(f, params, cfg).map(|(r, _)| r)
}

/// As [`capd_forward`] but also returns the cached activations needed by
/// [`capd_backward`].
pub fn capd_forward_cached(
    f: &Tensor4,
    params: &CapdParams,
    cfg: &CapsConfig,
) -> Result<(DownResult, CapdCache)> {
    capd_pipeline(f, params, cfg)
}

/// Reverse-mode gradients through a soft-mode CAPD application. Returns the
/// gradient with respect to the layer input together with the parameter
/// gradients. Hard mode has no defined gradient.
pub fn capd_backward(
    d_grad: &Tensor4,
    cache: &CapdCache,
    params: &CapdParams,
    cfg: &CapsConfig,
) -> Result<(Tensor4, CapdGrads)> {
    if cfg.select_mode != SelectMode::Soft {
        return Err(Error::Usage("capd_backward requires soft select mode".into()));
    }
    let (b, c, h2, w2) = cache.comps.comps[0].shape();
    let mut grads = CapdGrads::zeros_like(params);

    // Fusion: d = sum_i w_i * F_i.
    let mut d_comps: [Tensor4; 4] = std::array::from_fn(|_| Tensor4::zeros(b, c, h2, w2));
    let mut d_weights = vec![[0.0; 4]; b];
    for bi in 0..b {
        for idx in 0..4 {
            let mut acc = 0.0;
            let wi = cache.weights[bi][idx];
            for ci in 0..c {
                let g = d_grad.plane(bi, ci);
                let comp = cache.comps.comps[idx].plane(bi, ci);
                let dst = d_comps[idx].plane_mut(bi, ci);
                for ((dv, gv), cv) in dst.iter_mut().zip(g).zip(comp) {
                    *dv += wi * gv;
                    acc += gv * cv;
                }
            }
            d_weights[bi][idx] = acc;
        }
    }

    // Temperature softmax, attention and pooling, per batch element.
    let beta = if cfg.use_aw { cfg.beta } else { 0.0 };
    let (hs, ws) = window_margins(h2, w2, beta);
    let count = ((h2 - 2 * hs) * (w2 - 2 * ws)) as Real;
    let mut d_p: [Tensor4; 4] = std::array::from_fn(|_| Tensor4::zeros(b, 1, h2, w2));
    for bi in 0..b {
        let w = &cache.weights[bi];
        let dw = &d_weights[bi];
        let dot: Real = (0..4).map(|j| dw[j] * w[j]).sum();
        let mut d_rho = [0.0; 4];
        for i in 0..4 {
            d_rho[i] = w[i] * (dw[i] - dot) / cfg.temperature;
        }
        let mut d_z = [0.0; 4];
        if cfg.use_ca {
            for i in 0..4 {
                let r = cache.rho[bi][i];
                let du = d_rho[i] * r * (1.0 - r);
                for (t, &ht) in params.attn.iter().enumerate() {
                    d_z[(i + t) % 4] += du * ht;
                    grads.attn[t] += du * cache.z[bi][(i + t) % 4];
                }
            }
        } else {
            d_z = d_rho;
        }
        for idx in 0..4 {
            let g = d_z[idx] / count;
            let plane = d_p[idx].plane_mut(bi, 0);
            for x in hs..h2 - hs {
                for v in &mut plane[x * w2 + ws..x * w2 + w2 - ws] {
                    *v += g;
                }
            }
        }
    }

    // Shared extractor, accumulating parameter gradients over components.
    for idx in 0..4 {
        let d_a2_pre = tensor::conv2d_grad_input(&d_p[idx], &params.conv3, cache.a2[idx].shape());
        let (gk3, gb3) = tensor::conv2d_grad_params(&d_p[idx], &cache.a2[idx], &params.conv3);
        grads.conv3_k.add_assign(&gk3);
        add_vec(&mut grads.conv3_b, &gb3);

        let d_a2 = relu_backward(&d_a2_pre, &cache.a2[idx]);
        let d_a1_pre = tensor::conv2d_grad_input(&d_a2, &params.conv2, cache.a1[idx].shape());
        let (gk2, gb2) = tensor::conv2d_grad_params(&d_a2, &cache.a1[idx], &params.conv2);
        grads.conv2_k.add_assign(&gk2);
        add_vec(&mut grads.conv2_b, &gb2);

        let d_a1 = relu_backward(&d_a1_pre, &cache.a1[idx]);
        let d_comp = tensor::conv2d_grad_input(&d_a1, &params.conv1, cache.comps.comps[idx].shape());
        let (gk1, gb1) = tensor::conv2d_grad_params(&d_a1, &cache.comps.comps[idx], &params.conv1);
        grads.conv1_k.add_assign(&gk1);
        add_vec(&mut grads.conv1_b, &gb1);

        d_comps[idx].add_assign(&d_comp);
    }

    // Scatter component gradients back to full resolution, then through the
    // optional low-pass filter (self-adjoint: symmetric kernel, circular).
    let mut d_f = reassemble(&PolyComponents { comps: d_comps });
    if cfg.use_lpf {
        d_f = lpf_apply(&d_f);
    }
    debug_assert_eq!(d_f.shape(), cache.input_shape);
    Ok((d_f, grads))
}

pub(crate) fn relu_backward(grad: &Tensor4, output: &Tensor4) -> Tensor4 {
    let mut out = grad.clone();
    for (g, &o) in out.data_mut().iter_mut().zip(output.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
    out
}

pub(crate) fn add_vec(acc: &mut [Real], inc: &[Real]) {
    for (a, b) in acc.iter_mut().zip(inc) {
        *a += *b;
    }
}

/// Zero-fill upsampling at a recorded phase: `out[2x+m][2y+n] = d[x][y]`
/// per batch element, zeros elsewhere.
pub fn zero_fill_upsample(d: &Tensor4, gamma: &SampleIndex) -> Result<Tensor4> {
    let (b, c, h2, w2) = d.shape();
    if gamma.gamma.len() != b {
        return Err(Error::Shape(format!(
            "sample index has {} entries for batch {b}",
            gamma.gamma.len()
        )));
    }
    let mut out = Tensor4::zeros(b, c, 2 * h2, 2 * w2);
    let w = 2 * w2;
    for bi in 0..b {
        let (m, n) = phi_encode(gamma.gamma[bi] as usize)?;
        for ci in 0..c {
            let src = d.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for x in 0..h2 {
                for y in 0..w2 {
                    dst[(2 * x + m) * w + 2 * y + n] = src[x * w2 + y];
                }
            }
        }
    }
    Ok(out)
}

/// CAPU: restores the downsampled map to the spatial phase recorded by CAPD,
/// zero-filling the remaining positions, with an optional low-pass filter
/// afterwards.
pub fn capu_forward(d: &Tensor4, gamma: &SampleIndex, cfg: &CapsConfig) -> Result<Tensor4> {
    let up = zero_fill_upsample(d, gamma)?;
    Ok(if cfg.use_lpf { lpf_apply(&up) } else { up })
}

/// Gradient through [`capu_forward`]: the adjoint of the optional filter
/// followed by gathering the placed positions.
pub fn capu_backward(u_grad: &Tensor4, gamma: &SampleIndex, cfg: &CapsConfig) -> Result<Tensor4> {
    let g = if cfg.use_lpf { lpf_apply(u_grad) } else { u_grad.clone() };
    let (b, c, h, w) = g.shape();
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Tensor4::zeros(b, c, h2, w2);
    for bi in 0..b {
        let (m, n) = phi_encode(gamma.gamma[bi] as usize)?;
        for ci in 0..c {
            let src = g.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for x in 0..h2 {
                for y in 0..w2 {
                    dst[x * w2 + y] = src[(2 * x + m) * w + 2 * y + n];
                }
            }
        }
    }
    Ok(out)
}

/// 2x2 max pooling with stride 2.
pub fn maxpool_down(f: &Tensor4) -> Result<Tensor4> {
    maxpool_down_cached(f).map(|(d, _)| d)
}

/// As [`maxpool_down`], also returning the chosen in-window offset
/// (`2*dx + dy`) per output cell for the backward pass. Ties go to the first
/// maximal element in scan order.
pub fn maxpool_down_cached(f: &Tensor4) -> Result<(Tensor4, Vec<u8>)> {
    let (b, c, h, w) = f.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool_down: odd spatial dims {h}x{w}")));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Tensor4::zeros(b, c, h2, w2);
    let mut arg = vec![0u8; b * c * h2 * w2];
    let mut k = 0;
    for bi in 0..b {
        for ci in 0..c {
            let src = f.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for x in 0..h2 {
                for y in 0..w2 {
                    let mut best = src[2 * x * w + 2 * y];
                    let mut off = 0u8;
                    for (o, &(dx, dy)) in COMPONENT_ORDER.iter().enumerate().skip(1) {
                        let v = src[(2 * x + dx) * w + 2 * y + dy];
                        if v > best {
                            best = v;
                            off = o as u8;
                        }
                    }
                    dst[x * w2 + y] = best;
                    arg[k] = off;
                    k += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

/// Dense 2x2 max with stride 1 and circular wrap (same-size output), used by
/// the blur-pool baseline. Also returns argmax offsets for the backward pass.
pub fn dense_maxpool_cached(f: &Tensor4) -> (Tensor4, Vec<u8>) {
    let (b, c, h, w) = f.shape();
    let mut out = Tensor4::zeros(b, c, h, w);
    let mut arg = vec![0u8; b * c * h * w];
    let mut k = 0;
    for bi in 0..b {
        for ci in 0..c {
            let src = f.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for x in 0..h {
                for y in 0..w {
                    let mut best = src[x * w + y];
                    let mut off = 0u8;
                    for (o, &(dx, dy)) in COMPONENT_ORDER.iter().enumerate().skip(1) {
                        let v = src[((x + dx) % h) * w + (y + dy) % w];
                        if v > best {
                            best = v;
                            off = o as u8;
                        }
                    }
                    dst[x * w + y] = best;
                    arg[k] = off;
                    k += 1;
                }
            }
        }
    }
    (out, arg)
}

/// Normalised 3x3 binomial kernel `[1,2,1] (outer) [1,2,1] / 16`.
pub const LPF_KERNEL: [[Real; 3]; 3] = [
    [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
    [2.0 / 16.0, 4.0 / 16.0, 2.0 / 16.0],
    [1.0 / 16.0, 2.0 / 16.0, 1.0 / 16.0],
];

/// Depthwise low-pass filter: binomial 3x3, circular padding, stride 1.
/// Unit DC gain, so constant fields pass through unchanged.
pub fn lpf_apply(f: &Tensor4) -> Tensor4 {
    let (b, c, h, w) = f.shape();
    let mut out = Tensor4::zeros(b, c, h, w);
    for bi in 0..b {
        for ci in 0..c {
            let src = f.plane(bi, ci);
            for x in 0..h {
                let dst_start = ((bi * c + ci) * h + x) * w;
                for (ki, row) in LPF_KERNEL.iter().enumerate() {
                    let sx = (x + ki + h - 1) % h;
                    let src_row = &src[sx * w..sx * w + w];
                    for (kj, &wgt) in row.iter().enumerate() {
                        let dy = kj as isize - 1;
                        let dst = &mut out.data_mut()[dst_start..dst_start + w];
                        tensor::accumulate_row(dst, src_row, wgt, dy, w);
                    }
                }
            }
        }
    }
    out
}

/// Max-norm polyphase selection: returns the component with the largest L2
/// norm per batch element, plus its index. Ties pick the lowest index.
pub fn aps_down(f: &Tensor4) -> Result<(Tensor4, SampleIndex)> {
    let comps = polyphase_split(f)?;
    let (b, c, h2, w2) = comps.comps[0].shape();
    let mut d = Tensor4::zeros(b, c, h2, w2);
    let mut gamma = Vec::with_capacity(b);
    for bi in 0..b {
        let mut norms = [0.0; 4];
        for (idx, comp) in comps.comps.iter().enumerate() {
            for ci in 0..c {
                norms[idx] += comp.plane(bi, ci).iter().map(|v| v * v).sum::<Real>();
            }
        }
        let sel = argmax4(&norms);
        gamma.push(sel as u8);
        for ci in 0..c {
            d.plane_mut(bi, ci).copy_from_slice(comps.comps[sel].plane(bi, ci));
        }
    }
    Ok((d, SampleIndex { gamma }))
}

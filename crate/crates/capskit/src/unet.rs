//! A small U-Net with pluggable down/upsampling pairs.
//!
//! The encoder/decoder topology is the standard one: per stage, two 3x3
//! convolutions with ReLU, a downsampler, and on the way back up an
//! upsampler whose output is concatenated with the stage's skip tensor.
//! Every convolution uses circular padding at stride 1, so spatial sizes are
//! preserved within a stage and the skip-connection crop is the identity.
//! Downsampling positions recorded by phase-aware samplers are pushed on a
//! stack during encoding and consumed last-in-first-out by the matching
//! decoder stage.

use crate::caps::{
    self, aps_down, capd_backward, capd_forward, capd_forward_cached, capu_backward, capu_forward,
    dense_maxpool_cached, lpf_apply, maxpool_down_cached, zero_fill_upsample, CapdCache,
    CapdGrads, CapdParams, CapsConfig, SampleIndex,
};
use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::tensor::{
    activation, conv2d, conv2d_grad_input, conv2d_grad_params, Activation, ConvSpec, PadMode,
    Real, Tensor4,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

/// Which down/up pair the network uses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplerKind {
    Caps(CapsConfig),
    MaxPool,
    BlurPool,
    Aps,
}

impl SamplerKind {
    pub fn name(&self) -> &'static str {
        match self {
            SamplerKind::Caps(_) => "caps",
            SamplerKind::MaxPool => "maxpool",
            SamplerKind::BlurPool => "blurpool",
            SamplerKind::Aps => "aps",
        }
    }
}

/// Network hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct NetConfig {
    /// Number of down/up stages.
    pub depth: usize,
    /// Channels of the outermost stage; deeper stages double.
    pub base_channels: usize,
    pub in_channels: usize,
    /// Output classes; fixed at 2 (background, defect).
    pub classes: usize,
    pub sampler: SamplerKind,
    /// Hidden widths of the CAPD feature extractor. `(128, 64)` at full
    /// scale; the desk-scale default keeps CPU training affordable.
    pub extractor_widths: (usize, usize),
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            depth: 2,
            base_channels: 8,
            in_channels: 1,
            classes: 2,
            sampler: SamplerKind::Caps(CapsConfig::default()),
            extractor_widths: (16, 8),
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.base_channels < 1 || self.in_channels < 1 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.classes != 2 {
            return Err(Error::Config("the segmentation head is two-class".into()));
        }
        if self.extractor_widths.0 < 1 || self.extractor_widths.1 < 1 {
            return Err(Error::Config("extractor widths must be >= 1".into()));
        }
        if let SamplerKind::Caps(cfg) = &self.sampler {
            cfg.validate()?;
        }
        Ok(())
    }

    fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }
}

/// Two 3x3 convolutions, each followed by ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
}

impl ConvBlock {
    fn init(in_c: usize, out_c: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = caps::init_conv(rng, out_c, in_c, 3, 3);
        let conv2 = caps::init_conv(rng, out_c, out_c, 3, 3);
        ConvBlock { conv1, conv2 }
    }

    fn forward(&self, x: &Tensor4) -> Result<(Tensor4, Tensor4)> {
        let a1 = activation(&conv2d(x, &self.conv1)?, Activation::Relu);
        let a2 = activation(&conv2d(&a1, &self.conv2)?, Activation::Relu);
        Ok((a1, a2))
    }

    fn backward(&self, d_out: &Tensor4, cache: &BlockCache) -> (Tensor4, BlockGrads) {
        let d_a2 = caps::relu_backward(d_out, &cache.a2);
        let (k2, b2) = conv2d_grad_params(&d_a2, &cache.a1, &self.conv2);
        let d_a1_pre = conv2d_grad_input(&d_a2, &self.conv2, cache.a1.shape());
        let d_a1 = caps::relu_backward(&d_a1_pre, &cache.a1);
        let (k1, b1) = conv2d_grad_params(&d_a1, &cache.x_in, &self.conv1);
        let d_in = conv2d_grad_input(&d_a1, &self.conv1, cache.x_in.shape());
        (d_in, BlockGrads { k1, b1, k2, b2 })
    }
}

/// Gradients for one [`ConvBlock`].
#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub k1: Tensor4,
    pub b1: Vec<Real>,
    pub k2: Tensor4,
    pub b2: Vec<Real>,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    pub x_in: Tensor4,
    pub a1: Tensor4,
    pub a2: Tensor4,
}

#[derive(Debug, Clone)]
enum DownLayer {
    Caps(CapdParams),
    MaxPool,
    BlurPool,
    Aps,
}

#[derive(Debug, Clone)]
enum DownCache {
    Caps(Box<CapdCache>),
    MaxPool { arg: Vec<u8>, in_shape: (usize, usize, usize, usize) },
    BlurPool { arg: Vec<u8>, in_shape: (usize, usize, usize, usize) },
    Aps { gamma: SampleIndex },
}

/// The network: parameters plus wiring. Immutable during inference;
/// training updates parameters through [`Network::load_params`].
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetConfig,
    enc: Vec<ConvBlock>,
    down: Vec<DownLayer>,
    bottleneck: ConvBlock,
    dec: Vec<ConvBlock>,
    head: ConvSpec,
}

/// Result of one forward pass: per-pixel class logits and the component
/// indices recorded by each downsampling stage (outermost stage first, one
/// entry per batch element). Score-based stages also report their selection
/// scores so callers can check how decisive each selection was.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor4,
    pub gammas: Vec<SampleIndex>,
    pub stage_scores: Vec<Option<Vec<[Real; 4]>>>,
}

impl ForwardOutput {
    /// Smallest gap between the best and second-best selection score across
    /// all score-based stages and batch elements. Exact circular-shift
    /// equivalence only holds when every selection is decisive, so tests use
    /// this to reject degenerate (tied) configurations.
    pub fn min_selection_margin(&self) -> Real {
        let mut margin = Real::INFINITY;
        for stage in self.stage_scores.iter().flatten() {
            for w in stage {
                let mut sorted = *w;
                sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                margin = margin.min(sorted[0] - sorted[1]);
            }
        }
        margin
    }
}

/// Activations cached by [`Network::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    enc: Vec<BlockCache>,
    down: Vec<DownCache>,
    skip_channels: Vec<usize>,
    bottleneck: BlockCache,
    dec: Vec<BlockCache>,
    head_in: Tensor4,
    logits: Tensor4,
    gammas: Vec<SampleIndex>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor4 {
        &self.logits
    }
    pub fn gammas(&self) -> &[SampleIndex] {
        &self.gammas
    }
    #[cfg(test)]
    pub(crate) fn bottleneck_out(&self) -> &Tensor4 {
        &self.bottleneck.a2
    }
}

/// All parameter gradients, mirroring the network structure.
#[derive(Debug, Clone)]
pub struct GradSet {
    pub enc: Vec<BlockGrads>,
    pub down: Vec<Option<CapdGrads>>,
    pub bottleneck: BlockGrads,
    pub dec: Vec<BlockGrads>,
    pub head_k: Tensor4,
    pub head_b: Vec<Real>,
}

/// Builds a network with deterministic He-uniform initialisation: identical
/// seeds give bitwise-identical parameters.
pub fn build_network(cfg: &NetConfig, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = Vec::with_capacity(cfg.depth);
    let mut down = Vec::with_capacity(cfg.depth);
    for stage in 0..cfg.depth {
        let in_c = if stage == 0 { cfg.in_channels } else { cfg.stage_channels(stage - 1) };
        let out_c = cfg.stage_channels(stage);
        enc.push(ConvBlock::init(in_c, out_c, &mut rng));
        down.push(match &cfg.sampler {
            SamplerKind::Caps(caps_cfg) => {
                DownLayer::Caps(CapdParams::init(out_c, cfg.extractor_widths, caps_cfg.k, &mut rng))
            }
            SamplerKind::MaxPool => DownLayer::MaxPool,
            SamplerKind::BlurPool => DownLayer::BlurPool,
            SamplerKind::Aps => DownLayer::Aps,
        });
    }
    let bott_in = cfg.stage_channels(cfg.depth - 1);
    let bottleneck = ConvBlock::init(bott_in, cfg.stage_channels(cfg.depth), &mut rng);
    let mut dec = Vec::with_capacity(cfg.depth);
    for stage in 0..cfg.depth {
        let below_c = cfg.stage_channels(stage + 1);
        let in_c = cfg.stage_channels(stage) + below_c;
        dec.push(ConvBlock::init(in_c, cfg.stage_channels(stage), &mut rng));
    }
    let head = caps::init_conv(&mut rng, cfg.classes, cfg.base_channels, 1, 1);
    Ok(Network { cfg: *cfg, enc, down, bottleneck, dec, head })
}

/// The skip-connection crop stage. Circular same-padding preserves spatial
/// sizes, so this only checks that the tensors already align.
fn crop_to_match(skip: &Tensor4, target: &Tensor4) -> Result<Tensor4> {
    let (_, _, sh, sw) = skip.shape();
    let (_, _, th, tw) = target.shape();
    if (sh, sw) != (th, tw) {
        return Err(Error::Shape(format!("skip {sh}x{sw} does not match decoder {th}x{tw}")));
    }
    Ok(skip.clone())
}

fn component00(f: &Tensor4) -> Tensor4 {
    let (b, c, h, w) = f.shape();
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Tensor4::zeros(b, c, h2, w2);
    for bi in 0..b {
        for ci in 0..c {
            let src = f.plane(bi, ci);
            let dst = out.plane_mut(bi, ci);
            for x in 0..h2 {
                for y in 0..w2 {
                    dst[x * w2 + y] = src[2 * x * w + 2 * y];
                }
            }
        }
    }
    out
}

fn zero_gamma(batch: usize) -> SampleIndex {
    SampleIndex { gamma: vec![0; batch] }
}

/// The adjoint of [`zero_fill_upsample`]: gathers the values placed at the
/// recorded phase.
fn gather_phase(u: &Tensor4, gamma: &SampleIndex) -> Result<Tensor4> {
    let (b, c, h, w) = u.shape();
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Tensor4::zeros(b, c, h2, w2);
    for bi in 0..b {
        let (m, n) = caps::phi_encode(gamma.gamma[bi] as usize)?;
        for ci in 0..c {
            let src = u.plane(bi, ci);
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

impl Network {
    fn check_input(&self, x: &Tensor4) -> Result<()> {
        let (_, c, h, w) = x.shape();
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, network expects {}",
                self.cfg.in_channels
            )));
        }
        let factor = 1usize << self.cfg.depth;
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::Shape(format!("input {h}x{w} not divisible by 2^depth = {factor}")));
        }
        Ok(())
    }

    fn sampler_caps_cfg(&self) -> &CapsConfig {
        match &self.cfg.sampler {
            SamplerKind::Caps(c) => c,
            _ => unreachable!("caps config requested for a non-caps sampler"),
        }
    }

    fn down_forward(
        &self,
        stage: usize,
        x: &Tensor4,
    ) -> Result<(Tensor4, SampleIndex, Option<Vec<[Real; 4]>>)> {
        let b = x.batch();
        match &self.down[stage] {
            DownLayer::Caps(params) => {
                let out = capd_forward(x, params, self.sampler_caps_cfg())?;
                Ok((out.d, out.gamma, Some(out.scores)))
            }
            DownLayer::MaxPool => Ok((caps::maxpool_down(x)?, zero_gamma(b), None)),
            DownLayer::BlurPool => {
                let (dense, _) = dense_maxpool_cached(x);
                Ok((component00(&lpf_apply(&dense)), zero_gamma(b), None))
            }
            DownLayer::Aps => {
                let (d, gamma) = aps_down(x)?;
                Ok((d, gamma, None))
            }
        }
    }

    fn down_forward_cached(
        &self,
        stage: usize,
        x: &Tensor4,
    ) -> Result<(Tensor4, SampleIndex, DownCache)> {
        let b = x.batch();
        match &self.down[stage] {
            DownLayer::Caps(params) => {
                let (out, cache) = capd_forward_cached(x, params, self.sampler_caps_cfg())?;
                Ok((out.d, out.gamma, DownCache::Caps(Box::new(cache))))
            }
            DownLayer::MaxPool => {
                let (d, arg) = maxpool_down_cached(x)?;
                Ok((d, zero_gamma(b), DownCache::MaxPool { arg, in_shape: x.shape() }))
            }
            DownLayer::BlurPool => {
                let (dense, arg) = dense_maxpool_cached(x);
                let d = component00(&lpf_apply(&dense));
                Ok((d, zero_gamma(b), DownCache::BlurPool { arg, in_shape: x.shape() }))
            }
            DownLayer::Aps => {
                let (d, gamma) = aps_down(x)?;
                Ok((d, gamma.clone(), DownCache::Aps { gamma }))
            }
        }
    }

    fn up_forward(&self, d: &Tensor4, gamma: &SampleIndex) -> Result<Tensor4> {
        match &self.cfg.sampler {
            SamplerKind::Caps(cfg) => capu_forward(d, gamma, cfg),
            SamplerKind::MaxPool => zero_fill_upsample(d, &zero_gamma(d.batch())),
            SamplerKind::BlurPool => Ok(lpf_apply(&zero_fill_upsample(d, &zero_gamma(d.batch()))?)),
            SamplerKind::Aps => zero_fill_upsample(d, gamma),
        }
    }

    fn up_backward(&self, d_up: &Tensor4, gamma: &SampleIndex) -> Result<Tensor4> {
        match &self.cfg.sampler {
            SamplerKind::Caps(cfg) => capu_backward(d_up, gamma, cfg),
            SamplerKind::MaxPool => gather_phase(d_up, &zero_gamma(d_up.batch())),
            SamplerKind::BlurPool => gather_phase(&lpf_apply(d_up), &zero_gamma(d_up.batch())),
            SamplerKind::Aps => gather_phase(d_up, gamma),
        }
    }

    fn down_backward(
        &self,
        stage: usize,
        d_out: &Tensor4,
        cache: &DownCache,
    ) -> Result<(Tensor4, Option<CapdGrads>)> {
        match (&self.down[stage], cache) {
            (DownLayer::Caps(params), DownCache::Caps(c)) => {
                let (d_in, grads) = capd_backward(d_out, c, params, self.sampler_caps_cfg())?;
                Ok((d_in, Some(grads)))
            }
            (DownLayer::MaxPool, DownCache::MaxPool { arg, in_shape }) => {
                let (b, c, h, _) = *in_shape;
                let (_, _, h2, w2) = d_out.shape();
                let _ = h;
                let mut d_in = Tensor4::zeros(b, c, in_shape.2, in_shape.3);
                let mut k = 0;
                for bi in 0..b {
                    for ci in 0..c {
                        for x in 0..h2 {
                            for y in 0..w2 {
                                let (dx, dy) = caps::COMPONENT_ORDER[arg[k] as usize];
                                *d_in.at_mut(bi, ci, 2 * x + dx, 2 * y + dy) +=
                                    d_out.at(bi, ci, x, y);
                                k += 1;
                            }
                        }
                    }
                }
                Ok((d_in, None))
            }
            (DownLayer::BlurPool, DownCache::BlurPool { arg, in_shape }) => {
                let (b, c, h, w) = *in_shape;
                let d_blur = zero_fill_upsample(d_out, &zero_gamma(b))?;
                let d_dense = lpf_apply(&d_blur);
                let mut d_in = Tensor4::zeros(b, c, h, w);
                let mut k = 0;
                for bi in 0..b {
                    for ci in 0..c {
                        for x in 0..h {
                            for y in 0..w {
                                let (dx, dy) = caps::COMPONENT_ORDER[arg[k] as usize];
                                *d_in.at_mut(bi, ci, (x + dx) % h, (y + dy) % w) +=
                                    d_dense.at(bi, ci, x, y);
                                k += 1;
                            }
                        }
                    }
                }
                Ok((d_in, None))
            }
            (DownLayer::Aps, DownCache::Aps { gamma }) => {
                // Selecting component gamma is a gather; its adjoint scatters
                // the gradient back to those positions.
                Ok((zero_fill_upsample(d_out, gamma)?, None))
            }
            _ => Err(Error::Usage("down cache does not match sampler".into())),
        }
    }

    /// Inference forward: logits plus the recorded component indices.
    pub fn forward(&self, x: &Tensor4) -> Result<ForwardOutput> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut gamma_stack = Vec::with_capacity(self.cfg.depth);
        let mut stage_scores = Vec::with_capacity(self.cfg.depth);
        for stage in 0..self.cfg.depth {
            let (_, a2) = self.enc[stage].forward(&cur)?;
            let (d, gamma, weights) = self.down_forward(stage, &a2)?;
            skips.push(a2);
            gamma_stack.push(gamma);
            stage_scores.push(weights);
            cur = d;
        }
        let (_, bott) = self.bottleneck.forward(&cur)?;
        cur = bott;
        let gammas = gamma_stack.clone();
        for stage in (0..self.cfg.depth).rev() {
            let gamma = gamma_stack.pop().expect("balanced gamma stack");
            let up = self.up_forward(&cur, &gamma)?;
            let skip = crop_to_match(&skips[stage], &up)?;
            let cat = Tensor4::concat_channels(&skip, &up)?;
            let (_, a2) = self.dec[stage].forward(&cat)?;
            cur = a2;
        }
        debug_assert!(gamma_stack.is_empty(), "gamma pushes and pops must balance");
        let logits = conv2d(&cur, &self.head)?;
        Ok(ForwardOutput { logits, gammas, stage_scores })
    }

    /// Training forward: caches every intermediate [`Network::backward`] needs.
    pub fn forward_cached(&self, x: &Tensor4) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut enc_caches = Vec::with_capacity(self.cfg.depth);
        let mut down_caches = Vec::with_capacity(self.cfg.depth);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        let mut skip_channels = Vec::with_capacity(self.cfg.depth);
        let mut gamma_stack = Vec::with_capacity(self.cfg.depth);
        for stage in 0..self.cfg.depth {
            let (a1, a2) = self.enc[stage].forward(&cur)?;
            enc_caches.push(BlockCache { x_in: cur, a1, a2: a2.clone() });
            let (d, gamma, cache) = self.down_forward_cached(stage, &a2)?;
            down_caches.push(cache);
            skip_channels.push(a2.channels());
            skips.push(a2);
            gamma_stack.push(gamma);
            cur = d;
        }
        let (a1, a2) = self.bottleneck.forward(&cur)?;
        let bott_cache = BlockCache { x_in: cur, a1, a2: a2.clone() };
        cur = a2;
        let gammas = gamma_stack.clone();
        let mut dec_caches: Vec<Option<BlockCache>> = (0..self.cfg.depth).map(|_| None).collect();
        for stage in (0..self.cfg.depth).rev() {
            let gamma = gamma_stack.pop().expect("balanced gamma stack");
            let up = self.up_forward(&cur, &gamma)?;
            let skip = crop_to_match(&skips[stage], &up)?;
            let cat = Tensor4::concat_channels(&skip, &up)?;
            let (a1, a2) = self.dec[stage].forward(&cat)?;
            dec_caches[stage] = Some(BlockCache { x_in: cat, a1, a2: a2.clone() });
            cur = a2;
        }
        let logits = conv2d(&cur, &self.head)?;
        Ok(ForwardCache {
            enc: enc_caches,
            down: down_caches,
            skip_channels,
            bottleneck: bott_cache,
            dec: dec_caches.into_iter().map(|c| c.expect("decoder cache")).collect(),
            head_in: cur,
            logits,
            gammas,
        })
    }

    /// Handwritten reverse pass from a logit gradient to all parameter
    /// gradients. Requires a cache produced by [`Network::forward_cached`]
    /// on the same input.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Tensor4) -> Result<GradSet> {
        let (head_k, head_b) = conv2d_grad_params(d_logits, &cache.head_in, &self.head);
        let mut d_cur = conv2d_grad_input(d_logits, &self.head, cache.head_in.shape());

        // Decoder stages in reverse execution order (outermost first).
        let mut dec_grads: Vec<Option<BlockGrads>> = (0..self.cfg.depth).map(|_| None).collect();
        let mut skip_grads: Vec<Option<Tensor4>> = (0..self.cfg.depth).map(|_| None).collect();
        for stage in 0..self.cfg.depth {
            let (d_cat, grads) = self.dec[stage].backward(&d_cur, &cache.dec[stage]);
            dec_grads[stage] = Some(grads);
            let (d_skip, d_up) = d_cat.split_channels(cache.skip_channels[stage])?;
            skip_grads[stage] = Some(d_skip);
            d_cur = self.up_backward(&d_up, &cache.gammas[stage])?;
        }

        let (mut d_cur, bott_grads) = self.bottleneck.backward(&d_cur, &cache.bottleneck);

        let mut enc_grads: Vec<Option<BlockGrads>> = (0..self.cfg.depth).map(|_| None).collect();
        let mut down_grads: Vec<Option<CapdGrads>> = (0..self.cfg.depth).map(|_| None).collect();
        for stage in (0..self.cfg.depth).rev() {
            let (mut d_enc_out, dg) = self.down_backward(stage, &d_cur, &cache.down[stage])?;
            down_grads[stage] = dg;
            d_enc_out.add_assign(skip_grads[stage].as_ref().expect("skip grad"));
            let (d_in, grads) = self.enc[stage].backward(&d_enc_out, &cache.enc[stage]);
            enc_grads[stage] = Some(grads);
            d_cur = d_in;
        }

        Ok(GradSet {
            enc: enc_grads.into_iter().map(|g| g.expect("enc grads")).collect(),
            down: down_grads,
            bottleneck: bott_grads,
            dec: dec_grads.into_iter().map(|g| g.expect("dec grads")).collect(),
            head_k,
            head_b,
        })
    }

    /// Copy of the network with a different CAPS configuration, keeping the
    /// trained parameters. Used for inference-time sweeps of the crop
    /// proportion and temperature. The attention kernel size is baked into
    /// the parameters and must match.
    pub fn with_caps_config(&self, new_cfg: CapsConfig) -> Result<Network> {
        match &self.cfg.sampler {
            SamplerKind::Caps(old) => {
                if old.k != new_cfg.k {
                    return Err(Error::Usage(format!(
                        "attention kernel size {} cannot change to {} at inference",
                        old.k, new_cfg.k
                    )));
                }
                new_cfg.validate()?;
                let mut net = self.clone();
                net.cfg.sampler = SamplerKind::Caps(new_cfg);
                Ok(net)
            }
            _ => Err(Error::Usage("not a caps-sampler network".into())),
        }
    }

    /// Scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// All parameters flattened in build order.
    pub fn flatten_params(&self) -> Vec<Real> {
        let mut out = Vec::with_capacity(self.param_count());
        for s in self.param_slices() {
            out.extend_from_slice(s);
        }
        out
    }

    /// Loads a flat parameter vector produced by [`Network::flatten_params`].
    pub fn load_params(&mut self, flat: &[Real]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "parameter vector has {} scalars, network needs {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&flat[offset..offset + s.len()]);
            offset += s.len();
        }
        Ok(())
    }

    /// Parameter tensors in build order: encoder blocks, downsamplers,
    /// bottleneck, decoder blocks, head. The checkpoint format serialises
    /// exactly this order.
    fn param_slices(&self) -> Vec<&[Real]> {
        let mut out: Vec<&[Real]> = Vec::new();
        for b in &self.enc {
            out.push(b.conv1.kernel.data());
            out.push(&b.conv1.bias);
            out.push(b.conv2.kernel.data());
            out.push(&b.conv2.bias);
        }
        for d in &self.down {
            if let DownLayer::Caps(p) = d {
                out.push(p.conv1.kernel.data());
                out.push(&p.conv1.bias);
                out.push(p.conv2.kernel.data());
                out.push(&p.conv2.bias);
                out.push(p.conv3.kernel.data());
                out.push(&p.conv3.bias);
                out.push(&p.attn);
            }
        }
        out.push(self.bottleneck.conv1.kernel.data());
        out.push(&self.bottleneck.conv1.bias);
        out.push(self.bottleneck.conv2.kernel.data());
        out.push(&self.bottleneck.conv2.bias);
        for b in &self.dec {
            out.push(b.conv1.kernel.data());
            out.push(&b.conv1.bias);
            out.push(b.conv2.kernel.data());
            out.push(&b.conv2.bias);
        }
        out.push(self.head.kernel.data());
        out.push(&self.head.bias);
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [Real]> {
        let mut out: Vec<&mut [Real]> = Vec::new();
        for b in &mut self.enc {
            out.push(b.conv1.kernel.data_mut());
            out.push(&mut b.conv1.bias);
            out.push(b.conv2.kernel.data_mut());
            out.push(&mut b.conv2.bias);
        }
        for d in &mut self.down {
            if let DownLayer::Caps(p) = d {
                out.push(p.conv1.kernel.data_mut());
                out.push(&mut p.conv1.bias);
                out.push(p.conv2.kernel.data_mut());
                out.push(&mut p.conv2.bias);
                out.push(p.conv3.kernel.data_mut());
                out.push(&mut p.conv3.bias);
                out.push(&mut p.attn);
            }
        }
        out.push(self.bottleneck.conv1.kernel.data_mut());
        out.push(&mut self.bottleneck.conv1.bias);
        out.push(self.bottleneck.conv2.kernel.data_mut());
        out.push(&mut self.bottleneck.conv2.bias);
        for b in &mut self.dec {
            out.push(b.conv1.kernel.data_mut());
            out.push(&mut b.conv1.bias);
            out.push(b.conv2.kernel.data_mut());
            out.push(&mut b.conv2.bias);
        }
        out.push(self.head.kernel.data_mut());
        out.push(&mut self.head.bias);
        out
    }
}

impl GradSet {
    /// Gradients flattened in the same order as [`Network::flatten_params`].
    pub fn flatten(&self, net: &Network) -> Vec<Real> {
        let mut out = Vec::with_capacity(net.param_count());
        let push_block = |g: &BlockGrads, out: &mut Vec<Real>| {
            out.extend_from_slice(g.k1.data());
            out.extend_from_slice(&g.b1);
            out.extend_from_slice(g.k2.data());
            out.extend_from_slice(&g.b2);
        };
        for g in &self.enc {
            push_block(g, &mut out);
        }
        for (d, layer) in self.down.iter().zip(&net.down) {
            match (d, layer) {
                (Some(g), DownLayer::Caps(_)) => {
                    out.extend_from_slice(g.conv1_k.data());
                    out.extend_from_slice(&g.conv1_b);
                    out.extend_from_slice(g.conv2_k.data());
                    out.extend_from_slice(&g.conv2_b);
                    out.extend_from_slice(g.conv3_k.data());
                    out.extend_from_slice(&g.conv3_b);
                    out.extend_from_slice(&g.attn);
                }
                (None, DownLayer::Caps(p)) => {
                    let n = p.conv1.kernel.len()
                        + p.conv1.bias.len()
                        + p.conv2.kernel.len()
                        + p.conv2.bias.len()
                        + p.conv3.kernel.len()
                        + p.conv3.bias.len()
                        + p.attn.len();
                    out.extend(std::iter::repeat(0.0).take(n));
                }
                _ => {}
            }
        }
        push_block(&self.bottleneck, &mut out);
        for g in &self.dec {
            push_block(g, &mut out);
        }
        out.extend_from_slice(self.head_k.data());
        out.extend_from_slice(&self.head_b);
        out
    }

    /// Elementwise accumulation; structures must match.
    pub fn add_assign(&mut self, other: &GradSet) {
        let add_block = |a: &mut BlockGrads, b: &BlockGrads| {
            a.k1.add_assign(&b.k1);
            caps::add_vec(&mut a.b1, &b.b1);
            a.k2.add_assign(&b.k2);
            caps::add_vec(&mut a.b2, &b.b2);
        };
        for (a, b) in self.enc.iter_mut().zip(&other.enc) {
            add_block(a, b);
        }
        for (a, b) in self.down.iter_mut().zip(&other.down) {
            match (a, b) {
                (Some(ga), Some(gb)) => {
                    ga.conv1_k.add_assign(&gb.conv1_k);
                    caps::add_vec(&mut ga.conv1_b, &gb.conv1_b);
                    ga.conv2_k.add_assign(&gb.conv2_k);
                    caps::add_vec(&mut ga.conv2_b, &gb.conv2_b);
                    ga.conv3_k.add_assign(&gb.conv3_k);
                    caps::add_vec(&mut ga.conv3_b, &gb.conv3_b);
                    caps::add_vec(&mut ga.attn, &gb.attn);
                }
                (a @ None, Some(gb)) => *a = Some(gb.clone()),
                _ => {}
            }
        }
        add_block(&mut self.bottleneck, &other.bottleneck);
        for (a, b) in self.dec.iter_mut().zip(&other.dec) {
            add_block(a, b);
        }
        self.head_k.add_assign(&other.head_k);
        caps::add_vec(&mut self.head_b, &other.head_b);
    }
}

/// Per-pixel argmax over the two logit channels; a tie predicts background.
pub fn predict_mask(logits: &Tensor4) -> Result<Vec<Mask>> {
    let (b, c, h, w) = logits.shape();
    if c != 2 {
        return Err(Error::Shape(format!("predict_mask expects 2 channels, got {c}")));
    }
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let bg = logits.plane(bi, 0);
        let fg = logits.plane(bi, 1);
        let bits = fg.iter().zip(bg).map(|(f, g)| f > g).collect();
        out.push(Mask::from_bits(h, w, bits)?);
    }
    Ok(out)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"CAPSKIT\x01";
const CHECKPOINT_VERSION: u32 = 1;

fn sampler_tag(kind: &SamplerKind) -> u8 {
    match kind {
        SamplerKind::Caps(_) => 0,
        SamplerKind::MaxPool => 1,
        SamplerKind::BlurPool => 2,
        SamplerKind::Aps => 3,
    }
}

/// Writes a parameter checkpoint: magic, version, config echo, then every
/// parameter tensor as a little-endian scalar array in build order. The
/// exact byte layout is documented in the repository README.
pub fn save_checkpoint<P: AsRef<Path>>(net: &Network, path: P) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let cfg = &net.cfg;
    f.write_all(&(cfg.depth as u32).to_le_bytes())?;
    f.write_all(&(cfg.base_channels as u32).to_le_bytes())?;
    f.write_all(&(cfg.in_channels as u32).to_le_bytes())?;
    f.write_all(&(cfg.classes as u32).to_le_bytes())?;
    f.write_all(&(cfg.extractor_widths.0 as u32).to_le_bytes())?;
    f.write_all(&(cfg.extractor_widths.1 as u32).to_le_bytes())?;
    f.write_all(&[sampler_tag(&cfg.sampler)])?;
    if let SamplerKind::Caps(c) = &cfg.sampler {
        f.write_all(&(c.beta as f64).to_le_bytes())?;
        f.write_all(&(c.temperature as f64).to_le_bytes())?;
        f.write_all(&(c.k as u32).to_le_bytes())?;
        f.write_all(&[
            c.use_aw as u8,
            c.use_ca as u8,
            c.use_lpf as u8,
            matches!(c.select_mode, caps::SelectMode::Hard) as u8,
        ])?;
    }
    f.write_all(&[std::mem::size_of::<Real>() as u8])?;
    let flat = net.flatten_params();
    f.write_all(&(flat.len() as u64).to_le_bytes())?;
    for v in flat {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`], rebuilding the network
/// from the config echo and loading the stored parameters.
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Network> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not a capskit checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut f)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let depth = read_u32(&mut f)? as usize;
    let base_channels = read_u32(&mut f)? as usize;
    let in_channels = read_u32(&mut f)? as usize;
    let classes = read_u32(&mut f)? as usize;
    let w0 = read_u32(&mut f)? as usize;
    let w1 = read_u32(&mut f)? as usize;
    let mut tag = [0u8; 1];
    f.read_exact(&mut tag)?;
    let sampler = match tag[0] {
        0 => {
            let beta = read_f64(&mut f)? as Real;
            let temperature = read_f64(&mut f)? as Real;
            let k = read_u32(&mut f)? as usize;
            let mut flags = [0u8; 4];
            f.read_exact(&mut flags)?;
            SamplerKind::Caps(CapsConfig {
                beta,
                temperature,
                k,
                use_aw: flags[0] != 0,
                use_ca: flags[1] != 0,
                use_lpf: flags[2] != 0,
                select_mode: if flags[3] != 0 {
                    caps::SelectMode::Hard
                } else {
                    caps::SelectMode::Soft
                },
            })
        }
        1 => SamplerKind::MaxPool,
        2 => SamplerKind::BlurPool,
        3 => SamplerKind::Aps,
        t => return Err(Error::Parse(format!("unknown sampler tag {t}"))),
    };
    let mut scalar = [0u8; 1];
    f.read_exact(&mut scalar)?;
    if scalar[0] as usize != std::mem::size_of::<Real>() {
        return Err(Error::Parse(format!(
            "checkpoint scalar width {} does not match this build ({})",
            scalar[0],
            std::mem::size_of::<Real>()
        )));
    }
    let mut n = [0u8; 8];
    f.read_exact(&mut n)?;
    let n = u64::from_le_bytes(n) as usize;

    let cfg =
        NetConfig { depth, base_channels, in_channels, classes, sampler, extractor_widths: (w0, w1) };
    let mut net = build_network(&cfg, 0)?;
    if net.param_count() != n {
        return Err(Error::Parse(format!(
            "checkpoint has {n} scalars, architecture needs {}",
            net.param_count()
        )));
    }
    let mut flat = vec![0.0 as Real; n];
    let mut buf = [0u8; std::mem::size_of::<Real>()];
    for v in flat.iter_mut() {
        f.read_exact(&mut buf)?;
        *v = Real::from_le_bytes(buf);
    }
    net.load_params(&flat)?;
    Ok(net)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::caps::SelectMode;
    use crate::tensor::{shift2d, ShiftSpec};
    use rand::{Rng, SeedableRng};

    fn random_input(seed: u64, b: usize, h: usize, w: usize) -> Tensor4 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..b * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor4::from_vec(b, 1, h, w, data).unwrap()
    }

    fn small_cfg(sampler: SamplerKind) -> NetConfig {
        NetConfig { base_channels: 4, extractor_widths: (6, 4), sampler, ..Default::default() }
    }

    #[test]
    fn same_seed_identical_parameters() {
        let cfg = small_cfg(SamplerKind::Caps(CapsConfig::default()));
        let a = build_network(&cfg, 42).unwrap();
        let b = build_network(&cfg, 42).unwrap();
        assert_eq!(a.flatten_params(), b.flatten_params());
        let c = build_network(&cfg, 43).unwrap();
        assert_ne!(a.flatten_params(), c.flatten_params());
    }

    #[test]
    fn bottleneck_spatial_size() {
        let cfg = small_cfg(SamplerKind::MaxPool);
        let net = build_network(&cfg, 1).unwrap();
        let x = random_input(2, 1, 64, 64);
        let cache = net.forward_cached(&x).unwrap();
        let (_, _, h, w) = cache.bottleneck_out().shape();
        assert_eq!((h, w), (16, 16));
    }

    #[test]
    fn param_count_closed_form() {
        // depth 2, base 8, input 1, extractor (16, 8), caps sampler
        let cfg = NetConfig {
            base_channels: 8,
            extractor_widths: (16, 8),
            sampler: SamplerKind::Caps(CapsConfig::default()),
            ..Default::default()
        };
        let net = build_network(&cfg, 0).unwrap();
        let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
        let enc0 = conv(8, 1, 3) + conv(8, 8, 3);
        let enc1 = conv(16, 8, 3) + conv(16, 16, 3);
        let capd0 = conv(16, 8, 3) + conv(8, 16, 3) + conv(1, 8, 1) + 2;
        let capd1 = conv(16, 16, 3) + conv(8, 16, 3) + conv(1, 8, 1) + 2;
        let bott = conv(32, 16, 3) + conv(32, 32, 3);
        let dec1 = conv(16, 48, 3) + conv(16, 16, 3);
        let dec0 = conv(8, 24, 3) + conv(8, 8, 3);
        let head = conv(2, 8, 1);
        assert_eq!(net.param_count(), enc0 + enc1 + capd0 + capd1 + bott + dec1 + dec0 + head);
    }

    #[test]
    fn forward_shapes_and_gamma_stack() {
        for sampler in [
            SamplerKind::Caps(CapsConfig::default()),
            SamplerKind::MaxPool,
            SamplerKind::BlurPool,
            SamplerKind::Aps,
        ] {
            let net = build_network(&small_cfg(sampler), 3).unwrap();
            let x = random_input(4, 2, 16, 16);
            let out = net.forward(&x).unwrap();
            assert_eq!(out.logits.shape(), (2, 2, 16, 16));
            assert_eq!(out.gammas.len(), 2, "one recorded index per stage");
            for g in &out.gammas {
                assert_eq!(g.gamma.len(), 2, "one entry per batch element");
            }
            assert!(out.logits.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn input_not_divisible_rejected() {
        let net = build_network(&small_cfg(SamplerKind::MaxPool), 3).unwrap();
        let x = random_input(4, 1, 10, 10);
        assert!(net.forward(&x).is_err());
    }

    #[test]
    fn batch_elements_independent() {
        let net = build_network(&small_cfg(SamplerKind::Caps(CapsConfig::default())), 5).unwrap();
        let single = random_input(6, 1, 16, 16);
        let pair = Tensor4::stack_batch(&[single.clone(), single.clone()]).unwrap();
        let out = net.forward(&pair).unwrap();
        assert_eq!(out.logits.plane(0, 0), out.logits.plane(1, 0));
        assert_eq!(out.logits.plane(0, 1), out.logits.plane(1, 1));
        assert_eq!(out.gammas[0].gamma[0], out.gammas[0].gamma[1]);
    }

    #[test]
    fn zero_head_predicts_background() {
        let mut net = build_network(&small_cfg(SamplerKind::MaxPool), 7).unwrap();
        let mut flat = net.flatten_params();
        let head_len = net.head.kernel.len() + net.head.bias.len();
        let n = flat.len();
        for v in &mut flat[n - head_len..] {
            *v = 0.0;
        }
        net.load_params(&flat).unwrap();
        let x = random_input(8, 1, 16, 16);
        let out = net.forward(&x).unwrap();
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        for m in predict_mask(&out.logits).unwrap() {
            assert!(m.is_all_false());
        }
    }

    #[test]
    fn predict_mask_rules() {
        let logits =
            Tensor4::from_vec(1, 2, 1, 3, vec![0.2, 0.5, 0.5, /* ch1 */ 0.3, 0.1, 0.5]).unwrap();
        let m = &predict_mask(&logits).unwrap()[0];
        assert!(m.at(0, 0)); // 0.3 > 0.2
        assert!(!m.at(0, 1)); // 0.1 < 0.5
        assert!(!m.at(0, 2)); // tie goes to background
        assert!(predict_mask(&Tensor4::zeros(1, 3, 2, 2)).is_err());
    }

    /// Equivalence regime: the full network commutes with circular shifts,
    /// with the low-pass filter both off and on. Inputs are chosen so every
    /// stage's selection is decisive (exactness only holds for a unique
    /// argmax).
    #[test]
    fn circular_shift_equivalence_caps_hard() {
        for use_lpf in [false, true] {
            let caps_cfg = CapsConfig { use_lpf, ..CapsConfig::equivalence_regime() };
            let net = build_network(&small_cfg(SamplerKind::Caps(caps_cfg)), 11).unwrap();
            let (x, base) = (0..50)
                .find_map(|attempt| {
                    let x = random_input(12 + attempt, 1, 16, 16);
                    let base = net.forward(&x).unwrap();
                    (base.min_selection_margin() > 1e-6).then_some((x, base))
                })
                .expect("an input with decisive selection");
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            for _ in 0..8 {
                let sx = rng.gen_range(-8..8);
                let sy = rng.gen_range(-8..8);
                let shift = ShiftSpec::circular(sx, sy);
                let shifted = net.forward(&shift2d(&x, shift, 0.0).unwrap()).unwrap();
                let want = shift2d(&base.logits, shift, 0.0).unwrap();
                assert!(
                    shifted.logits.max_abs_diff(&want) <= 1e-9,
                    "lpf={use_lpf} shift ({sx},{sy})"
                );
            }
        }
    }

    /// A plain max-pool network is not shift-equivariant: some circular
    /// shift must change the logits.
    #[test]
    fn maxpool_breaks_equivalence_somewhere() {
        let net = build_network(&small_cfg(SamplerKind::MaxPool), 17).unwrap();
        let x = random_input(18, 1, 16, 16);
        let base = net.forward(&x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut broken = false;
        for _ in 0..20 {
            let sx = rng.gen_range(-8..8);
            let sy = rng.gen_range(-8..8);
            let shift = ShiftSpec::circular(sx, sy);
            let shifted = net.forward(&shift2d(&x, shift, 0.0).unwrap()).unwrap();
            let want = shift2d(&base.logits, shift, 0.0).unwrap();
            if shifted.logits.max_abs_diff(&want) > 1e-6 {
                broken = true;
                break;
            }
        }
        assert!(broken, "expected at least one shift to break max-pool equivalence");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        for sampler in [
            SamplerKind::Caps(CapsConfig {
                select_mode: SelectMode::Hard,
                beta: 0.125,
                ..Default::default()
            }),
            SamplerKind::BlurPool,
        ] {
            let net = build_network(&small_cfg(sampler), 23).unwrap();
            save_checkpoint(&net, &path).unwrap();
            let loaded = load_checkpoint(&path).unwrap();
            assert_eq!(loaded.flatten_params(), net.flatten_params());
            assert_eq!(loaded.cfg.sampler.name(), net.cfg.sampler.name());
            let x = random_input(24, 1, 16, 16);
            assert_eq!(
                loaded.forward(&x).unwrap().logits.data(),
                net.forward(&x).unwrap().logits.data()
            );
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}

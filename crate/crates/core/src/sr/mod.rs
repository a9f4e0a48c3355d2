//! Hybrid-attention super-resolution generator and the spectrally normalized
//! U-Net discriminator.
//!
//! Features travel between blocks as a token matrix `[h·w, c]` in raster
//! order and are reshaped to `[c, h, w]` maps only around convolutions.

mod spectral;
mod window;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::bail_arg;
use crate::nn::layers::{from_tokens, to_tokens};
use crate::nn::{
    attention, grid_to_tensor, tensor_to_grid, Checkpoint, Conv, Gradients, Graph, LayerNorm, Linear,
    ParamStore, Tensor, Var,
};
use crate::rng::rng_from_seed;
use crate::{Error, ImageGrid, Result, Scalar};

pub use spectral::{spectral_normalize, SpectralState};
pub use window::{
    merge_heads_index, pixel_shuffle_index, pixel_shuffle_upsample, pixel_unshuffle_index, split_heads_index,
    window_merge, window_partition, WindowLayout,
};

pub const GENERATOR_KIND: &str = "sr-generator";
pub const DISCRIMINATOR_KIND: &str = "sr-discriminator";

/// Keys/values for overlapping cross-attention extend this many pixels past
/// each side of the query window.
pub fn overlap_pad(window: usize, overlap_ratio: f64) -> usize {
    (overlap_ratio * window as f64).round() as usize
}

/// Multi-head attention inside windows of a `[h·w, c]` token matrix. Queries
/// come from plain windows; keys and values from the same windows grown by
/// `pad` pixels per side (edge-clamped). Returns tokens in raster order.
#[allow(clippy::too_many_arguments)]
pub fn windowed_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    h: usize,
    w: usize,
    window: usize,
    pad: usize,
    heads: usize,
) -> Result<Var> {
    let c = g.shape(q)[1];
    if heads == 0 || !c.is_multiple_of(heads) {
        bail_arg!("{c} channels not divisible by {heads} heads");
    }
    let layout = WindowLayout::new(h, w, window)?;
    let n = layout.count();
    let (lq, lk) = (window * window, (window + 2 * pad) * (window + 2 * pad));
    let src = |y: usize, x: usize, ch: usize| (y * w + x) * c + ch;
    let q_idx: Arc<[usize]> = layout.partition_index(c, 0, src).into();
    let kv_idx: Arc<[usize]> = layout.partition_index(c, pad, src).into();
    let qw = g.gather(q, q_idx, vec![n, lq, c])?;
    let kw = g.gather(k, kv_idx.clone(), vec![n, lk, c])?;
    let vw = g.gather(v, kv_idx, vec![n, lk, c])?;
    let d = c / heads;
    let qh = g.gather(qw, split_heads_index(n, lq, c, heads).into(), vec![n * heads, lq, d])?;
    let kh = g.gather(kw, split_heads_index(n, lk, c, heads).into(), vec![n * heads, lk, d])?;
    let vh = g.gather(vw, split_heads_index(n, lk, c, heads).into(), vec![n * heads, lk, d])?;
    let att = attention(g, qh, kh, vh)?;
    let merged = g.gather(att, merge_heads_index(n, lq, c, heads).into(), vec![n, lq, c])?;
    let mut back = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                back.push(layout.token_of(y, x, ch, c));
            }
        }
    }
    g.gather(merged, back.into(), vec![h * w, c])
}

/// Self-attention within non-overlapping windows, windows given as
/// `[windows, window², c]` for queries, keys and values alike.
pub fn window_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let (n, l, c) = match g.shape(q) {
        [n, l, c] => (*n, *l, *c),
        s => bail_arg!("expected [windows, tokens, c], got {s:?}"),
    };
    if heads == 0 || c % heads != 0 {
        bail_arg!("{c} channels not divisible by {heads} heads");
    }
    let d = c / heads;
    let split = |g: &mut Graph<T>, x: Var| g.gather(x, split_heads_index(n, l, c, heads).into(), vec![n * heads, l, d]);
    let (qh, kh, vh) = (split(g, q)?, split(g, k)?, split(g, v)?);
    let att = attention(g, qh, kh, vh)?;
    g.gather(att, merge_heads_index(n, l, c, heads).into(), vec![n, l, c])
}

/// Cross-attention of plain windows onto enlarged windows of the same
/// `[h·w, c]` tokens (no projections).
pub fn overlapping_cross_attention<T: Scalar>(
    g: &mut Graph<T>,
    tokens: Var,
    h: usize,
    w: usize,
    window: usize,
    overlap_ratio: f64,
    heads: usize,
) -> Result<Var> {
    if !(0.0..1.0).contains(&overlap_ratio) {
        bail_arg!("overlap ratio must lie in [0, 1), got {overlap_ratio}");
    }
    windowed_attention(g, tokens, tokens, tokens, h, w, window, overlap_pad(window, overlap_ratio), heads)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrGeneratorConfig {
    pub image_channels: usize,
    pub embed_dim: usize,
    pub window: usize,
    pub overlap_ratio: f64,
    pub n_groups: usize,
    pub blocks_per_group: usize,
    pub heads: usize,
    pub scale: usize,
    pub mlp_ratio: usize,
    /// Channels entering the pixel shuffle, per output channel group.
    pub upsample_features: usize,
    /// Weight of the channel-gating branch inside hybrid blocks.
    pub cab_weight: f64,
    pub use_ocab: bool,
    pub group_residual: bool,
    /// Largest accepted output, in pixels.
    pub max_output_pixels: usize,
}

impl Default for SrGeneratorConfig {
    fn default() -> Self {
        Self {
            image_channels: 1,
            embed_dim: 32,
            window: 4,
            overlap_ratio: 0.5,
            n_groups: 2,
            blocks_per_group: 2,
            heads: 2,
            scale: 4,
            mlp_ratio: 2,
            upsample_features: 16,
            cab_weight: 0.01,
            use_ocab: true,
            group_residual: true,
            max_output_pixels: 1024 * 512,
        }
    }
}

impl SrGeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            bail_arg!("embed_dim {} not divisible by {} heads", self.embed_dim, self.heads);
        }
        if !(2..=4).contains(&self.scale) {
            bail_arg!("scale must be 2, 3 or 4, got {}", self.scale);
        }
        if self.window == 0 || !(0.0..1.0).contains(&self.overlap_ratio) {
            bail_arg!("window must be positive and overlap in [0, 1)");
        }
        if self.image_channels != 1 && self.image_channels != 3 {
            bail_arg!("image channels must be 1 or 3");
        }
        if self.n_groups == 0 || self.mlp_ratio == 0 || self.upsample_features == 0 {
            bail_arg!("n_groups, mlp_ratio and upsample_features must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Attn {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
}

impl Attn {
    fn new<T: Scalar, R: Rng + ?Sized>(s: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(s, &format!("{name}.norm"), c),
            q: Linear::new(s, &format!("{name}.q"), c, c, rng),
            k: Linear::new(s, &format!("{name}.k"), c, c, rng),
            v: Linear::new(s, &format!("{name}.v"), c, c, rng),
            proj: Linear::new(s, &format!("{name}.proj"), c, c, rng),
        }
    }

    /// Normalized input and the projected attention output.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, geo: Geo, pad: usize) -> Result<(Var, Var)> {
        let n = self.norm.forward(g, s, x)?;
        let q = self.q.forward(g, s, n)?;
        let k = self.k.forward(g, s, n)?;
        let v = self.v.forward(g, s, n)?;
        let a = windowed_attention(g, q, k, v, geo.h, geo.w, geo.window, pad, geo.heads)?;
        Ok((n, self.proj.forward(g, s, a)?))
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    fn new<T: Scalar, R: Rng + ?Sized>(s: &mut ParamStore<T>, name: &str, c: usize, ratio: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(s, &format!("{name}.norm"), c),
            fc1: Linear::new(s, &format!("{name}.fc1"), c, c * ratio, rng),
            fc2: Linear::new(s, &format!("{name}.fc2"), c * ratio, c, rng),
        }
    }

    /// `x + fc2(silu(fc1(norm(x))))`.
    fn residual<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var) -> Result<Var> {
        let n = self.norm.forward(g, s, x)?;
        let h = self.fc1.forward(g, s, n)?;
        let h = g.silu(h);
        let h = self.fc2.forward(g, s, h)?;
        g.add(x, h)
    }
}

/// Convolutional branch with squeeze-and-excite channel gating.
#[derive(Debug, Clone)]
struct ChannelGate {
    conv1: Conv,
    conv2: Conv,
    squeeze: Linear,
    excite: Linear,
}

impl ChannelGate {
    fn new<T: Scalar, R: Rng + ?Sized>(s: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Self {
        let mid = (c / 2).max(1);
        let sq = (c / 4).max(1);
        Self {
            conv1: Conv::new(s, &format!("{name}.conv1"), c, mid, 3, rng),
            conv2: Conv::new(s, &format!("{name}.conv2"), mid, c, 3, rng),
            squeeze: Linear::new(s, &format!("{name}.squeeze"), c, sq, rng),
            excite: Linear::new(s, &format!("{name}.excite"), sq, c, rng),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, tokens: Var, geo: Geo) -> Result<Var> {
        let m = from_tokens(g, tokens, geo.h, geo.w)?;
        let h = self.conv1.forward(g, s, m)?;
        let h = g.silu(h);
        let h = self.conv2.forward(g, s, h)?;
        let c = g.shape(h)[0];
        let pooled = g.channel_mean(h);
        let pooled = g.reshape(pooled, vec![1, c])?;
        let z = self.squeeze.forward(g, s, pooled)?;
        let z = g.silu(z);
        let z = self.excite.forward(g, s, z)?;
        let z = g.sigmoid(z);
        let z = g.reshape(z, vec![c])?;
        let gated = g.mul_channel(h, z)?;
        to_tokens(g, gated)
    }
}

#[derive(Debug, Clone, Copy)]
struct Geo {
    h: usize,
    w: usize,
    window: usize,
    heads: usize,
}

#[derive(Debug, Clone)]
struct HybridBlock {
    attn: Attn,
    gate: ChannelGate,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct Ocab {
    attn: Attn,
    mlp: Mlp,
}

#[derive(Debug, Clone)]
struct Group {
    blocks: Vec<HybridBlock>,
    ocab: Option<Ocab>,
    conv: Conv,
}

#[derive(Debug, Clone)]
struct GenArch {
    conv_first: Conv,
    groups: Vec<Group>,
    norm: LayerNorm,
    conv_after_body: Conv,
    conv_before_up: Conv,
    conv_up: Conv,
    conv_last: Conv,
}

#[derive(Debug, Clone)]
pub struct SrGenerator<T> {
    config: SrGeneratorConfig,
    arch: GenArch,
    pub params: ParamStore<T>,
}

impl<T: Scalar> SrGenerator<T> {
    pub fn new<R: Rng + ?Sized>(config: SrGeneratorConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let (c, e) = (config.image_channels, config.embed_dim);
        let conv_first = Conv::new(&mut s, "conv_first", c, e, 3, rng);
        let mut groups = Vec::new();
        for gi in 0..config.n_groups {
            let blocks = (0..config.blocks_per_group)
                .map(|bi| {
                    let name = format!("group{gi}.block{bi}");
                    HybridBlock {
                        attn: Attn::new(&mut s, &format!("{name}.attn"), e, rng),
                        gate: ChannelGate::new(&mut s, &format!("{name}.gate"), e, rng),
                        mlp: Mlp::new(&mut s, &format!("{name}.mlp"), e, config.mlp_ratio, rng),
                    }
                })
                .collect();
            let ocab = config.use_ocab.then(|| Ocab {
                attn: Attn::new(&mut s, &format!("group{gi}.ocab.attn"), e, rng),
                mlp: Mlp::new(&mut s, &format!("group{gi}.ocab.mlp"), e, config.mlp_ratio, rng),
            });
            let conv = Conv::new(&mut s, &format!("group{gi}.conv"), e, e, 3, rng);
            groups.push(Group { blocks, ocab, conv });
        }
        let f = config.upsample_features;
        let sc = config.scale;
        let arch = GenArch {
            conv_first,
            groups,
            norm: LayerNorm::new(&mut s, "norm", e),
            conv_after_body: Conv::new(&mut s, "conv_after_body", e, e, 3, rng),
            conv_before_up: Conv::new(&mut s, "conv_before_up", e, f, 3, rng),
            conv_up: Conv::new(&mut s, "conv_up", f, f * sc * sc, 3, rng),
            conv_last: Conv::new(&mut s, "conv_last", f, c, 3, rng),
        };
        Ok(Self { config, arch, params: s })
    }

    pub fn config(&self) -> &SrGeneratorConfig {
        &self.config
    }

    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        if !params.same_layout(&self.params) {
            bail_arg!("parameter layout does not match the generator architecture");
        }
        Ok(Self { config: self.config.clone(), arch: self.arch.clone(), params })
    }

    fn geo(&self, h: usize, w: usize) -> Geo {
        Geo { h, w, window: self.config.window, heads: self.config.heads }
    }

    fn hybrid<G: Scalar>(&self, g: &mut Graph<G>, s: &ParamStore<G>, b: &HybridBlock, x: Var, geo: Geo) -> Result<Var> {
        let (n, wa) = b.attn.forward(g, s, x, geo, 0)?;
        let gate = b.gate.forward(g, s, n, geo)?;
        let gate = g.scale(gate, G::lit(self.config.cab_weight));
        let x = g.add(x, wa)?;
        let x = g.add(x, gate)?;
        b.mlp.residual(g, s, x)
    }

    /// One residual hybrid attention group on `[h·w, c]` tokens.
    fn group(&self, g: &mut Graph<T>, s: &ParamStore<T>, grp: &Group, x: Var, geo: Geo) -> Result<Var> {
        let mut h = x;
        for b in &grp.blocks {
            h = self.hybrid(g, s, b, h, geo)?;
        }
        if let Some(o) = &grp.ocab {
            let pad = overlap_pad(self.config.window, self.config.overlap_ratio);
            let (_, a) = o.attn.forward(g, s, h, geo, pad)?;
            h = g.add(h, a)?;
            h = o.mlp.residual(g, s, h)?;
        }
        let m = from_tokens(g, h, geo.h, geo.w)?;
        let m = grp.conv.forward(g, s, m)?;
        let h = to_tokens(g, m)?;
        if self.config.group_residual {
            g.add(x, h)
        } else {
            Ok(h)
        }
    }

    fn check_input(&self, lr: &ImageGrid<T>) -> Result<()> {
        let out = lr.height() * lr.width() * self.config.scale * self.config.scale;
        if out > self.config.max_output_pixels {
            bail_arg!("output of {out} pixels exceeds the limit {}", self.config.max_output_pixels);
        }
        if lr.channels() != self.config.image_channels {
            bail_arg!("expected {} channels, got {}", self.config.image_channels, lr.channels());
        }
        Ok(())
    }

    /// Records the unclamped forward pass; returns `[c, s·h, s·w]`.
    pub fn build(&self, g: &mut Graph<T>, s: &ParamStore<T>, lr: &ImageGrid<T>) -> Result<Var> {
        self.check_input(lr)?;
        let a = &self.arch;
        let (h, w) = (lr.height(), lr.width());
        let geo = self.geo(h, w);
        let x = g.input(grid_to_tensor(lr));
        let f0 = a.conv_first.forward(g, s, x)?;
        let mut t = to_tokens(g, f0)?;
        for grp in &a.groups {
            t = self.group(g, s, grp, t, geo)?;
        }
        let t = a.norm.forward(g, s, t)?;
        let m = from_tokens(g, t, h, w)?;
        let m = a.conv_after_body.forward(g, s, m)?;
        let m = g.add(m, f0)?;
        let m = a.conv_before_up.forward(g, s, m)?;
        let m = g.silu(m);
        let m = a.conv_up.forward(g, s, m)?;
        let m = pixel_shuffle_upsample(g, m, self.config.scale)?;
        a.conv_last.forward(g, s, m)
    }

    /// Upscaled image clamped to `[0, 1]`.
    pub fn forward(&self, lr: &ImageGrid<T>) -> Result<ImageGrid<T>> {
        let mut g = Graph::new();
        let out = self.build(&mut g, &self.params, lr)?;
        Ok(tensor_to_grid(g.value(out))?.clamp_unit())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            kind: GENERATOR_KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            live: self.params.clone(),
            ema: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        ck.expect_kind(GENERATOR_KIND)?;
        let config: SrGeneratorConfig =
            serde_json::from_value(ck.config.clone()).map_err(|e| Error::Format(format!("generator config: {e}")))?;
        Self::new(config, &mut rng_from_seed(0))?.with_params(ck.live.clone())
    }
}

/// `sr_forward(gen, lr)`: the clamped upscaled image.
pub fn sr_forward<T: Scalar>(gen: &SrGenerator<T>, lr: &ImageGrid<T>) -> Result<ImageGrid<T>> {
    gen.forward(lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub sn_power_iters: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { image_channels: 1, base_channels: 16, depth: 3, sn_power_iters: 1 }
    }
}

#[derive(Debug, Clone)]
struct DiscArch {
    conv_in: Conv,
    down: Vec<Conv>,
    up: Vec<Conv>,
    conv_out: Conv,
}

/// U-Net producing a per-pixel realness logit map; every convolution weight
/// is spectrally normalized before use.
#[derive(Debug, Clone)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    arch: DiscArch,
    pub params: ParamStore<T>,
    /// Power-iteration state per convolution, in `convs()` order.
    pub spectral: Vec<SpectralState<T>>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(config: DiscriminatorConfig, rng: &mut R) -> Result<Self> {
        if config.depth < 2 || config.sn_power_iters == 0 || config.base_channels == 0 {
            bail_arg!("discriminator needs depth >= 2, power iterations >= 1 and channels > 0");
        }
        let mut s = ParamStore::new();
        let b = config.base_channels;
        let conv_in = Conv::new(&mut s, "conv_in", config.image_channels, b, 3, rng);
        let down = (0..config.depth)
            .map(|l| Conv::new(&mut s, &format!("down{l}"), b << l, b << (l + 1), 3, rng))
            .collect();
        let up = (0..config.depth)
            .rev()
            .map(|l| Conv::new(&mut s, &format!("up{l}"), b << (l + 1), b << l, 3, rng))
            .collect();
        let conv_out = Conv::new(&mut s, "conv_out", b, 1, 3, rng);
        let arch = DiscArch { conv_in, down, up, conv_out };
        let mut d = Self { config, arch, params: s, spectral: Vec::new() };
        d.spectral = d.convs().iter().map(|c| SpectralState::for_weight(d.params.tensor(c.w).shape(), rng)).collect();
        d.refresh_spectral();
        Ok(d)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    fn convs(&self) -> Vec<Conv> {
        let a = &self.arch;
        std::iter::once(a.conv_in)
            .chain(a.down.iter().copied())
            .chain(a.up.iter().copied())
            .chain(std::iter::once(a.conv_out))
            .collect()
    }

    /// Runs the configured power iterations on every weight (training mode).
    pub fn refresh_spectral(&mut self) {
        let iters = self.config.sn_power_iters;
        for (conv, st) in self.convs().iter().zip(self.spectral.iter_mut()) {
            st.power_iterate(self.params.tensor(conv.w).data(), iters);
        }
    }

    fn sn_conv(&self, g: &mut Graph<T>, s: &ParamStore<T>, i: usize, conv: Conv, x: Var, frozen: bool) -> Result<Var> {
        let (w, b) = if frozen {
            (g.input(s.tensor(conv.w).clone()), g.input(s.tensor(conv.b).clone()))
        } else {
            (g.param(s, conv.w), g.param(s, conv.b))
        };
        let st = &self.spectral[i];
        let wn = g.spectral_normalized(w, st.u_arc(), st.v_arc())?;
        g.conv2d(x, wn, Some(b))
    }

    /// Records the forward pass with the current singular-vector estimates.
    pub fn build(&self, g: &mut Graph<T>, s: &ParamStore<T>, image: Var) -> Result<Var> {
        self.build_with(g, s, image, false)
    }

    /// Like [`Discriminator::build`] but with the weights as constants, so
    /// gradients reach only the input (used for the generator update).
    pub fn build_frozen(&self, g: &mut Graph<T>, image: Var) -> Result<Var> {
        self.build_with(g, &self.params, image, true)
    }

    fn build_with(&self, g: &mut Graph<T>, s: &ParamStore<T>, image: Var, frozen: bool) -> Result<Var> {
        let (h, w) = match g.shape(image) {
            [_, h, w] => (*h, *w),
            sh => bail_arg!("expected [c, h, w] image, got {sh:?}"),
        };
        let m = 1 << self.config.depth;
        if h % m != 0 || w % m != 0 {
            bail_arg!("{w}x{h} not divisible by {m}");
        }
        let convs = self.convs();
        let mut i = 0;
        let mut next = |g: &mut Graph<T>, x: Var| -> Result<Var> {
            let y = self.sn_conv(g, s, i, convs[i], x, frozen);
            i += 1;
            y
        };
        let x = next(g, image)?;
        let mut h = g.silu(x);
        let mut skips = Vec::new();
        for _ in 0..self.config.depth {
            skips.push(h);
            let y = next(g, h)?;
            let y = g.silu(y);
            h = g.avg_pool2(y)?;
        }
        for _ in 0..self.config.depth {
            let u = g.upsample2(h)?;
            let y = next(g, u)?;
            let y = g.silu(y);
            h = g.add(y, skips.pop().expect("one skip per level"))?;
        }
        next(g, h)
    }

    /// Realness logits `[1, h, w]` for an image.
    pub fn forward(&self, image: &ImageGrid<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(grid_to_tensor(image));
        let out = self.build(&mut g, &self.params, x)?;
        Ok(g.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            kind: DISCRIMINATOR_KIND.into(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            live: self.params.clone(),
            ema: None,
        }
    }
}

/// `discriminator_forward(disc, image)`: per-pixel realness logits.
pub fn discriminator_forward<T: Scalar>(disc: &Discriminator<T>, image: &ImageGrid<T>) -> Result<Tensor<T>> {
    disc.forward(image)
}

/// Loss closure helper: mean of `out ⊙ probe` plus its gradients.
pub fn probe_loss<T: Scalar>(g: &mut Graph<T>, out: Var, probe: &[T]) -> Result<(T, Gradients<T>)> {
    let p = g.input(Tensor::new(g.shape(out).to_vec(), probe.to_vec())?);
    let prod = g.mul(out, p)?;
    let loss = g.mean(prod);
    Ok((g.value(loss).data()[0], g.backward(loss)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check_gradients;
    use crate::rng::normal_vec;

    fn tiny() -> SrGeneratorConfig {
        SrGeneratorConfig {
            embed_dim: 8,
            n_groups: 1,
            blocks_per_group: 1,
            upsample_features: 4,
            scale: 2,
            ..SrGeneratorConfig::default()
        }
    }

    fn image(seed: u64, h: usize, w: usize) -> ImageGrid<f64> {
        let mut rng = rng_from_seed(seed);
        ImageGrid::from_fn(h, w, |_, _| rng.random_range(0.0..1.0))
    }

    fn tokens(g: &mut Graph<f64>, h: usize, w: usize, c: usize, seed: u64) -> Var {
        let mut rng = rng_from_seed(seed);
        g.input(Tensor::new(vec![h * w, c], normal_vec(&mut rng, h * w * c)).unwrap())
    }

    #[test]
    fn single_position_attention_is_identity_on_values() {
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::new(vec![3, 1, 4], normal_vec(&mut rng_from_seed(1), 12)).unwrap());
        let v = g.input(Tensor::new(vec![3, 1, 4], normal_vec(&mut rng_from_seed(2), 12)).unwrap());
        let out = window_attention(&mut g, q, q, v, 2).unwrap();
        assert_eq!(g.value(out), g.value(v));
        assert!(window_attention(&mut g, q, q, v, 3).is_err());
    }

    #[test]
    fn uniform_keys_give_mean_of_values() {
        let mut g = Graph::new();
        let q = g.input(Tensor::zeros(vec![2, 4, 2]));
        let v = g.input(Tensor::new(vec![2, 4, 2], (0..16).map(f64::from).collect()).unwrap());
        let out = window_attention(&mut g, q, q, v, 1).unwrap();
        let o = g.value(out).data();
        assert!((o[0] - 3.0).abs() < 1e-12 && (o[1] - 4.0).abs() < 1e-12);
        assert!((o[8] - 11.0).abs() < 1e-12);
    }

    #[test]
    fn zero_overlap_is_plain_window_attention() {
        let mut g = Graph::new();
        let (h, w, c) = (8, 12, 4);
        let t = tokens(&mut g, h, w, c, 3);
        let ocab = overlapping_cross_attention(&mut g, t, h, w, 4, 0.0, 2).unwrap();
        let (win, layout) = window_partition(
            &Tensor::new(vec![c, h, w], {
                let d = g.value(t).data();
                (0..c * h * w).map(|i| d[(i % (h * w)) * c + i / (h * w)]).collect()
            })
            .unwrap(),
            4,
        )
        .unwrap();
        let wv = g.input(win);
        let plain = window_attention(&mut g, wv, wv, wv, 2).unwrap();
        let merged = window_merge(g.value(plain), &layout).unwrap();
        let o = g.value(ocab).data();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let a = o[(y * w + x) * c + ch];
                    let b = merged.data()[(ch * h + y) * w + x];
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn enlarged_window_receptive_field() {
        // window 4 with overlap 0.5 reaches 2 pixels past each side
        assert_eq!(overlap_pad(4, 0.5), 2);
        let (h, w, c) = (12, 12, 2);
        let run = |delta: Option<(usize, usize)>| {
            let mut g = Graph::<f64>::new();
            let mut data = vec![0.1; h * w * c];
            if let Some((y, x)) = delta {
                data[(y * w + x) * c] = 5.0;
            }
            let t = g.input(Tensor::new(vec![h * w, c], data).unwrap());
            let out = overlapping_cross_attention(&mut g, t, h, w, 4, 0.5, 1).unwrap();
            g.value(out).data()[(5 * w + 5) * c]
        };
        let base = run(None);
        // pixel (5,5) sits in the window spanning rows/cols 4..8
        assert!((run(Some((2, 5))) - base).abs() > 1e-6, "inside enlarged window");
        assert!((run(Some((9, 9))) - base).abs() > 1e-6, "inside enlarged window");
        assert_eq!(run(Some((1, 5))), base, "outside enlarged window");
        assert_eq!(run(Some((10, 5))), base, "outside enlarged window");
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3, 5, 4], normal_vec(&mut rng_from_seed(7), 60)).unwrap());
        let s = g.matmul(x, x, true).unwrap();
        let p = g.softmax(s);
        for row in g.value(p).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn output_shapes() {
        let gen = SrGenerator::<f64>::new(tiny(), &mut rng_from_seed(1)).unwrap();
        let out = gen.forward(&image(2, 32, 64)).unwrap();
        assert_eq!((out.width(), out.height()), (128, 64));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let odd = gen.forward(&image(2, 10, 6)).unwrap();
        assert_eq!((odd.width(), odd.height()), (12, 20));

        let four = SrGenerator::<f64>::new(SrGeneratorConfig { scale: 4, ..tiny() }, &mut rng_from_seed(1)).unwrap();
        let big = four.forward(&image(3, 128, 256)).unwrap();
        assert_eq!((big.width(), big.height()), (1024, 512));
        assert!(four.forward(&image(3, 130, 256)).is_err());

        let three = SrGenerator::<f64>::new(SrGeneratorConfig { scale: 3, ..tiny() }, &mut rng_from_seed(1)).unwrap();
        assert_eq!(three.forward(&image(4, 8, 8)).unwrap().width(), 24);
    }

    fn group_io(cfg: SrGeneratorConfig, zero: bool) -> (Tensor<f64>, Tensor<f64>) {
        let mut gen = SrGenerator::<f64>::new(cfg, &mut rng_from_seed(5)).unwrap();
        if zero {
            gen.params.zero_all();
        }
        let mut g = Graph::new();
        let x = tokens(&mut g, 16, 32, 8, 6);
        let geo = gen.geo(16, 32);
        let out = gen.group(&mut g, &gen.params, &gen.arch.groups[0], x, geo).unwrap();
        (g.value(x).clone(), g.value(out).clone())
    }

    #[test]
    fn zeroed_group_is_pure_residual() {
        let (x, y) = group_io(tiny(), true);
        assert_eq!(x, y);
    }

    #[test]
    fn ablations_change_group_output() {
        let (_, full) = group_io(tiny(), false);
        let (_, no_res) = group_io(SrGeneratorConfig { group_residual: false, ..tiny() }, false);
        assert_ne!(full, no_res);
        let a = SrGenerator::<f64>::new(tiny(), &mut rng_from_seed(9)).unwrap();
        let b = SrGenerator::<f64>::new(SrGeneratorConfig { use_ocab: false, ..tiny() }, &mut rng_from_seed(9)).unwrap();
        assert_ne!(a.forward(&image(1, 8, 8)).unwrap(), b.forward(&image(1, 8, 8)).unwrap());
    }

    #[test]
    fn generator_gradients() {
        let gen = SrGenerator::<f64>::new(SrGeneratorConfig { window: 2, ..tiny() }, &mut rng_from_seed(11)).unwrap();
        let lr = image(12, 4, 6);
        let probe = normal_vec(&mut rng_from_seed(13), 8 * 12);
        let mut store = gen.params.clone();
        let rep = check_gradients(
            &mut store,
            |s| {
                let mut g = Graph::new();
                let out = gen.build(&mut g, s, &lr)?;
                probe_loss(&mut g, out, &probe)
            },
            1e-5,
            3,
            &mut rng_from_seed(14),
        )
        .unwrap();
        assert!(rep.weights_checked >= 100);
        assert!(rep.max_rel_error < 1e-3, "{:?}", rep.worst());
    }

    fn tiny_disc() -> DiscriminatorConfig {
        DiscriminatorConfig { base_channels: 4, depth: 2, ..DiscriminatorConfig::default() }
    }

    #[test]
    fn discriminator_shapes_and_zero_weights() {
        let mut d = Discriminator::<f64>::new(tiny_disc(), &mut rng_from_seed(1)).unwrap();
        let out = d.forward(&image(2, 8, 12)).unwrap();
        assert_eq!(out.shape(), &[1, 8, 12]);
        assert!(d.forward(&image(2, 6, 12)).is_err());
        d.params.zero_all();
        let z = d.forward(&image(3, 8, 12)).unwrap();
        assert!(z.data().iter().all(|&v| v == z.data()[0]));
        assert!(Discriminator::<f64>::new(DiscriminatorConfig { depth: 1, ..tiny_disc() }, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn discriminator_gradients() {
        let d = Discriminator::<f64>::new(tiny_disc(), &mut rng_from_seed(21)).unwrap();
        let img = grid_to_tensor(&image(22, 8, 8));
        let probe = normal_vec(&mut rng_from_seed(23), 64);
        let mut store = d.params.clone();
        let rep = check_gradients(
            &mut store,
            |s| {
                let mut g = Graph::new();
                let x = g.input(img.clone());
                let out = d.build(&mut g, s, x)?;
                probe_loss(&mut g, out, &probe)
            },
            1e-5,
            12,
            &mut rng_from_seed(24),
        )
        .unwrap();
        assert!(rep.weights_checked >= 100);
        assert!(rep.max_rel_error < 1e-3, "{:?}", rep.worst());
    }

    #[test]
    fn discriminator_is_lipschitz_bounded() {
        let mut d = Discriminator::<f64>::new(tiny_disc(), &mut rng_from_seed(31)).unwrap();
        for _ in 0..50 {
            d.refresh_spectral();
        }
        let x = image(32, 16, 16);
        let mut rng = rng_from_seed(33);
        // 3×3 conv operator norm is at most 3·σ(W); SiLU slope is below 1.1
        let convs = d.convs().len() as i32;
        let bound = (3.0f64 * 1.1).powi(convs);
        for _ in 0..10 {
            let dx: Vec<f64> = normal_vec(&mut rng, x.len()).into_iter().map(|v: f64| v * 1e-3).collect();
            let y = x.with_data(x.data().iter().zip(&dx).map(|(a, b)| a + b).collect());
            let (a, b) = (d.forward(&x).unwrap(), d.forward(&y).unwrap());
            let num = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let den = dx.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ratio = num / den;
            assert!(ratio.is_finite() && ratio < bound, "{ratio} vs {bound}");
        }
    }

    #[test]
    fn generator_checkpoint_round_trip() {
        let gen = SrGenerator::<f64>::new(tiny(), &mut rng_from_seed(41)).unwrap();
        let text = gen.to_checkpoint().to_text();
        let back = SrGenerator::from_checkpoint(&Checkpoint::from_text(&text).unwrap()).unwrap();
        let lr = image(42, 8, 8);
        assert_eq!(back.forward(&lr).unwrap(), gen.forward(&lr).unwrap());
    }
}

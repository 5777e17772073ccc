//! Forward kernels of the stereo branch: correlation volumes, the
//! multi-scale fusion (MSF) block and the two upsampling decoders.
//!
//! All grids are dense `h x w x c` in row-major HWC order. Every output
//! element is reduced in a fixed order, so results are bit-identical no
//! matter how rows are spread over threads.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Channel count of the fused depth feature.
pub const DEPTH_FEATURE_CHANNELS: usize = 512;
/// Output channels of the object depth-map head.
pub const DEPTH_HEAD_CHANNELS: usize = 80;
/// Output channels of the disparity head.
pub const DISPARITY_HEAD_CHANNELS: usize = 96;
/// Backbone channel widths at strides 4, 8 and 16.
pub const BACKBONE_CHANNELS: [usize; 3] = [64, 128, 256];

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Shape(format!("empty map {h}x{w}x{c}")));
        }
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "{h}x{w}x{c} map needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self { h, w, c, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.data[(y * self.w + x) * self.c + ch]
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.w + x) * self.c;
        &self.data[start..start + self.c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks channels of maps with equal spatial size.
    pub fn concat_channels(parts: &[&FeatureMap]) -> Result<FeatureMap> {
        let first = parts.first().ok_or_else(|| Error::Shape("nothing to concatenate".into()))?;
        let (h, w) = (first.h, first.w);
        if let Some(bad) = parts.iter().find(|p| (p.h, p.w) != (h, w)) {
            return Err(Error::Shape(format!(
                "cannot concatenate {}x{} with {}x{}",
                h, w, bad.h, bad.w
            )));
        }
        let c: usize = parts.iter().map(|p| p.c).sum();
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                for p in parts {
                    data.extend_from_slice(p.pixel(y, x));
                }
            }
        }
        Ok(FeatureMap { h, w, c, data })
    }

    /// Nearest-neighbor upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> FeatureMap {
        let (h, w) = (self.h * factor, self.w * factor);
        let mut data = Vec::with_capacity(h * w * self.c);
        for y in 0..h {
            for x in 0..w {
                data.extend_from_slice(self.pixel(y / factor, x / factor));
            }
        }
        FeatureMap { h, w, c: self.c, data }
    }

    /// Order-sensitive checksum of the raw bits, for determinism checks.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the f64 bit patterns.
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0100_0000_01b3);
            }
        }
        hash
    }
}

/// Per-pixel, per-disparity correlation of left and right features.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationVolume(pub FeatureMap);

impl CorrelationVolume {
    pub fn d_max(&self) -> usize {
        self.0.c
    }

    pub fn map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn get(&self, y: usize, x: usize, d: usize) -> f64 {
        self.0.get(y, x, d)
    }
}

/// `cv(y, x, d) = mean_c left(y, x, c) * right(y, x - d, c)`, zero where
/// `x - d` falls off the image.
pub fn correlation_volume(left: &FeatureMap, right: &FeatureMap, d_max: usize) -> Result<CorrelationVolume> {
    if left.shape() != right.shape() {
        return Err(Error::Shape(format!(
            "left {:?} and right {:?} feature maps differ",
            left.shape(),
            right.shape()
        )));
    }
    if d_max == 0 {
        return Err(Error::Domain("d_max must be at least 1".into()));
    }
    let (h, w, c) = left.shape();
    let inv_c = 1.0 / c as f64;
    let mut data = vec![0.0; h * w * d_max];
    data.par_chunks_mut(w * d_max).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let l = left.pixel(y, x);
            for d in 0..d_max.min(x + 1) {
                let r = right.pixel(y, x - d);
                let dot: f64 = l.iter().zip(r).map(|(a, b)| a * b).sum();
                row[x * d_max + d] = dot * inv_c;
            }
        }
    });
    Ok(CorrelationVolume(FeatureMap { h, w, c: d_max, data }))
}

/// Disparity channel counts at strides 4, 8 and 16 for a full-resolution
/// disparity range.
pub fn disparity_channels(max_disparity: usize) -> [usize; 3] {
    [max_disparity / 4, max_disparity / 8, max_disparity / 16]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    Relu6,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::None => v,
            Activation::Relu => v.max(0.0),
            Activation::Relu6 => v.clamp(0.0, 6.0),
        }
    }
}

/// Architecture of one convolution; the weights live in [`ConvParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub activation: Activation,
}

impl ConvSpec {
    /// `k x k` convolution with "same" padding.
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, activation: Activation) -> Self {
        Self {
            in_c,
            out_c,
            k,
            stride,
            padding: k / 2,
            groups: 1,
            activation,
        }
    }

    pub fn depthwise(channels: usize, k: usize, stride: usize, activation: Activation) -> Self {
        Self {
            groups: channels,
            ..Self::new(channels, channels, k, stride, activation)
        }
    }

    pub fn kernel_len(&self) -> usize {
        self.out_c * (self.in_c / self.groups) * self.k * self.k
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let span = |n: usize| {
            let padded = n + 2 * self.padding;
            (padded >= self.k).then(|| (padded - self.k) / self.stride + 1)
        };
        Some((span(h)?, span(w)?))
    }

    fn validate(&self) -> Result<()> {
        if self.k % 2 == 0 {
            return Err(Error::Shape(format!("kernel size {} must be odd", self.k)));
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::Shape(format!("stride {} must be 1 or 2", self.stride)));
        }
        if self.groups == 0 || self.in_c % self.groups != 0 || self.out_c % self.groups != 0 {
            return Err(Error::Shape(format!(
                "groups {} must divide in {} and out {} channels",
                self.groups, self.in_c, self.out_c
            )));
        }
        Ok(())
    }
}

/// Convolution weights with a frozen per-channel affine (inference-mode
/// normalization) applied before the activation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub spec: ConvSpec,
    /// `out_c x (in_c / groups) x k x k`.
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
    pub affine_scale: Vec<f64>,
    pub affine_shift: Vec<f64>,
}

impl ConvParams {
    pub fn new(
        spec: ConvSpec,
        kernels: Vec<f64>,
        bias: Vec<f64>,
        affine_scale: Vec<f64>,
        affine_shift: Vec<f64>,
    ) -> Result<Self> {
        spec.validate()?;
        if kernels.len() != spec.kernel_len() {
            return Err(Error::Shape(format!(
                "kernel needs {} values, got {}",
                spec.kernel_len(),
                kernels.len()
            )));
        }
        for (name, v) in [("bias", &bias), ("affine_scale", &affine_scale), ("affine_shift", &affine_shift)] {
            if v.len() != spec.out_c {
                return Err(Error::Shape(format!("{name} needs {} values, got {}", spec.out_c, v.len())));
            }
        }
        Ok(Self {
            spec,
            kernels,
            bias,
            affine_scale,
            affine_shift,
        })
    }

    /// Zero kernels and bias, identity affine.
    pub fn zeros(spec: ConvSpec) -> Result<Self> {
        Self::new(
            spec,
            vec![0.0; spec.kernel_len()],
            vec![0.0; spec.out_c],
            vec![1.0; spec.out_c],
            vec![0.0; spec.out_c],
        )
    }

    /// Fills every parameter from `sample` (expected roughly in `[-1, 1]`).
    /// Kernels are scaled by `1 / sqrt(fan_in)` and the affine scale is kept
    /// near one so deep stacks stay in a sane range.
    pub fn init_with(spec: ConvSpec, sample: &mut impl FnMut() -> f64) -> Result<Self> {
        let fan_in = (spec.in_c / spec.groups * spec.k * spec.k) as f64;
        let gain = 1.0 / fan_in.sqrt();
        let kernels = (0..spec.kernel_len()).map(|_| sample() * gain).collect();
        let bias = (0..spec.out_c).map(|_| 0.1 * sample()).collect();
        let scale = (0..spec.out_c).map(|_| 1.0 + 0.1 * sample()).collect();
        let shift = (0..spec.out_c).map(|_| 0.1 * sample()).collect();
        Self::new(spec, kernels, bias, scale, shift)
    }

    #[inline]
    pub fn kernel(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        let k = self.spec.k;
        let ipg = self.spec.in_c / self.spec.groups;
        self.kernels[((oc * ipg + ic) * k + ky) * k + kx]
    }
}

/// Cross-correlation + bias, then `scale * v + shift`, then the activation.
pub fn conv_affine_forward(x: &FeatureMap, p: &ConvParams) -> Result<FeatureMap> {
    let spec = p.spec;
    if x.c != spec.in_c {
        return Err(Error::Shape(format!(
            "convolution expects {} input channels, got {}",
            spec.in_c, x.c
        )));
    }
    let (oh, ow) = spec
        .output_dims(x.h, x.w)
        .ok_or_else(|| Error::Shape(format!("{}x{} input too small for kernel {}", x.h, x.w, spec.k)))?;
    let (k, out_c, groups) = (spec.k, spec.out_c, spec.groups);
    let ipg = spec.in_c / groups;
    let opg = out_c / groups;

    // [ky][kx][ic_in_group][oc] so the innermost loop runs over contiguous outputs.
    let mut taps = vec![0.0; k * k * ipg * out_c];
    for oc in 0..out_c {
        for ic in 0..ipg {
            for ky in 0..k {
                for kx in 0..k {
                    taps[((ky * k + kx) * ipg + ic) * out_c + oc] = p.kernel(oc, ic, ky, kx);
                }
            }
        }
    }

    let mut data = vec![0.0; oh * ow * out_c];
    data.par_chunks_mut(ow * out_c).enumerate().for_each(|(oy, row)| {
        for ox in 0..ow {
            let acc = &mut row[ox * out_c..(ox + 1) * out_c];
            for ky in 0..k {
                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                if iy < 0 || iy >= x.h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                    if ix < 0 || ix >= x.w as isize {
                        continue;
                    }
                    let px = x.pixel(iy as usize, ix as usize);
                    let tap = &taps[(ky * k + kx) * ipg * out_c..(ky * k + kx + 1) * ipg * out_c];
                    for g in 0..groups {
                        let outs = g * opg..(g + 1) * opg;
                        for ic in 0..ipg {
                            let v = px[g * ipg + ic];
                            let wrow = &tap[ic * out_c + outs.start..ic * out_c + outs.end];
                            for (a, wv) in acc[outs.clone()].iter_mut().zip(wrow) {
                                *a += v * wv;
                            }
                        }
                    }
                }
            }
            for oc in 0..out_c {
                let v = (acc[oc] + p.bias[oc]) * p.affine_scale[oc] + p.affine_shift[oc];
                acc[oc] = spec.activation.apply(v);
            }
        }
    });
    Ok(FeatureMap {
        h: oh,
        w: ow,
        c: out_c,
        data,
    })
}

/// MobileNetV2-style block: 1x1 expand, 3x3 depthwise, 1x1 linear projection,
/// with a residual connection when input and output shapes agree.
#[derive(Debug, Clone, PartialEq)]
pub struct InvertedResidual {
    pub expand: ConvParams,
    pub depthwise: ConvParams,
    pub project: ConvParams,
}

impl InvertedResidual {
    pub fn specs(in_c: usize, out_c: usize, stride: usize, expand_ratio: usize) -> [ConvSpec; 3] {
        let hidden = in_c * expand_ratio;
        [
            ConvSpec::new(in_c, hidden, 1, 1, Activation::Relu6),
            ConvSpec::depthwise(hidden, 3, stride, Activation::Relu6),
            ConvSpec::new(hidden, out_c, 1, 1, Activation::None),
        ]
    }

    pub fn init_with(
        in_c: usize,
        out_c: usize,
        stride: usize,
        expand_ratio: usize,
        sample: &mut impl FnMut() -> f64,
    ) -> Result<Self> {
        let [e, d, p] = Self::specs(in_c, out_c, stride, expand_ratio);
        Ok(Self {
            expand: ConvParams::init_with(e, sample)?,
            depthwise: ConvParams::init_with(d, sample)?,
            project: ConvParams::init_with(p, sample)?,
        })
    }

    pub fn has_skip(&self) -> bool {
        self.depthwise.spec.stride == 1 && self.expand.spec.in_c == self.project.spec.out_c
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let hidden = conv_affine_forward(x, &self.expand)?;
        let hidden = conv_affine_forward(&hidden, &self.depthwise)?;
        let mut out = conv_affine_forward(&hidden, &self.project)?;
        if self.has_skip() && out.shape() == x.shape() {
            out.data.iter_mut().zip(&x.data).for_each(|(o, i)| *o += i);
        }
        Ok(out)
    }

    fn convs(&self) -> [(&'static str, &ConvParams); 3] {
        [("expand", &self.expand), ("depthwise", &self.depthwise), ("project", &self.project)]
    }
}

/// Channel widths of the multi-scale fusion block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MsfConfig {
    /// Disparity channels of the stride 4, 8 and 16 volumes.
    pub disparities: [usize; 3],
    /// Output width of the block that takes the 1/4 volume to 1/8.
    pub down4_out: usize,
    /// Output width of the block that takes the fused 1/8 level to 1/16.
    pub down8_out: usize,
    pub expand_ratio: usize,
}

impl Default for MsfConfig {
    fn default() -> Self {
        Self {
            disparities: disparity_channels(192),
            down4_out: 32,
            down8_out: 64,
            expand_ratio: 4,
        }
    }
}

/// Weights of the fusion graph:
///
/// ```text
/// cv4 --down4(s2)--> concat(cv8) --down8(s2)--> concat(cv16) --fuse--> 512 ch
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct MsfWeights {
    pub config: MsfConfig,
    pub down4: InvertedResidual,
    pub down8: InvertedResidual,
    pub fuse: InvertedResidual,
}

impl MsfWeights {
    /// `(in, out, stride)` of the three blocks.
    pub fn block_shapes(config: &MsfConfig) -> [(usize, usize, usize); 3] {
        let [d1, d2, d3] = config.disparities;
        [
            (d1, config.down4_out, 2),
            (config.down4_out + d2, config.down8_out, 2),
            (config.down8_out + d3, DEPTH_FEATURE_CHANNELS, 1),
        ]
    }

    pub fn init_with(config: MsfConfig, sample: &mut impl FnMut() -> f64) -> Result<Self> {
        let shapes = Self::block_shapes(&config);
        let mut block = |i: usize| {
            let (i_c, o_c, s) = shapes[i];
            InvertedResidual::init_with(i_c, o_c, s, config.expand_ratio, &mut *sample)
        };
        Ok(Self {
            config,
            down4: block(0)?,
            down8: block(1)?,
            fuse: block(2)?,
        })
    }

    fn blocks(&self) -> [(&'static str, &InvertedResidual); 3] {
        [("down4", &self.down4), ("down8", &self.down8), ("fuse", &self.fuse)]
    }

    pub fn to_store(&self, store: &mut WeightStore, prefix: &str) {
        for (name, block) in self.blocks() {
            for (conv_name, conv) in block.convs() {
                store.insert_conv(&format!("{prefix}.{name}.{conv_name}"), conv);
            }
        }
    }

    pub fn from_store(store: &WeightStore, prefix: &str, config: MsfConfig) -> Result<Self> {
        let shapes = Self::block_shapes(&config);
        let load = |i: usize, name: &str| -> Result<InvertedResidual> {
            let (i_c, o_c, s) = shapes[i];
            let [e, d, p] = InvertedResidual::specs(i_c, o_c, s, config.expand_ratio);
            Ok(InvertedResidual {
                expand: store.conv(&format!("{prefix}.{name}.expand"), e)?,
                depthwise: store.conv(&format!("{prefix}.{name}.depthwise"), d)?,
                project: store.conv(&format!("{prefix}.{name}.project"), p)?,
            })
        };
        Ok(Self {
            config,
            down4: load(0, "down4")?,
            down8: load(1, "down8")?,
            fuse: load(2, "fuse")?,
        })
    }
}

/// Fused stride-16 depth feature with exactly 512 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFeature(FeatureMap);

impl DepthFeature {
    pub fn new(map: FeatureMap) -> Result<Self> {
        if map.c != DEPTH_FEATURE_CHANNELS {
            return Err(Error::Shape(format!(
                "depth feature needs {DEPTH_FEATURE_CHANNELS} channels, got {}",
                map.c
            )));
        }
        Ok(Self(map))
    }

    pub fn map(&self) -> &FeatureMap {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.shape()
    }
}

fn check_half(fine: &FeatureMap, coarse: &FeatureMap, what: &str) -> Result<()> {
    if fine.h.div_ceil(2) != coarse.h || fine.w.div_ceil(2) != coarse.w {
        return Err(Error::Shape(format!(
            "{what}: {}x{} is not half of {}x{}",
            coarse.h, coarse.w, fine.h, fine.w
        )));
    }
    Ok(())
}

pub fn msf_forward(
    cv4: &CorrelationVolume,
    cv8: &CorrelationVolume,
    cv16: &CorrelationVolume,
    weights: &MsfWeights,
) -> Result<DepthFeature> {
    let [d1, d2, d3] = weights.config.disparities;
    if [cv4.d_max(), cv8.d_max(), cv16.d_max()] != [d1, d2, d3] {
        return Err(Error::Shape(format!(
            "volumes carry {:?} disparities, weights expect {:?}",
            [cv4.d_max(), cv8.d_max(), cv16.d_max()],
            [d1, d2, d3]
        )));
    }
    check_half(cv4.map(), cv8.map(), "1/8 volume")?;
    check_half(cv8.map(), cv16.map(), "1/16 volume")?;

    let level8 = weights.down4.forward(cv4.map())?;
    let level8 = FeatureMap::concat_channels(&[&level8, cv8.map()])?;
    let level16 = weights.down8.forward(&level8)?;
    let level16 = FeatureMap::concat_channels(&[&level16, cv16.map()])?;
    DepthFeature::new(weights.fuse.forward(&level16)?)
}

/// Widths of an upsampling decoder head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stage1_kernel: usize,
    pub stage2_kernel: usize,
}

impl DecoderConfig {
    pub fn with_outputs(out_channels: usize) -> Self {
        Self {
            mid_channels: 32,
            out_channels,
            stage1_kernel: 1,
            stage2_kernel: 3,
        }
    }

    pub fn depth_head() -> Self {
        Self::with_outputs(DEPTH_HEAD_CHANNELS)
    }

    pub fn disparity_head() -> Self {
        Self::with_outputs(DISPARITY_HEAD_CHANNELS)
    }

    pub fn specs(&self) -> [ConvSpec; 2] {
        [
            ConvSpec::new(DEPTH_FEATURE_CHANNELS, self.mid_channels, self.stage1_kernel, 1, Activation::Relu),
            ConvSpec::new(self.mid_channels, self.out_channels, self.stage2_kernel, 1, Activation::None),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub stage1: ConvParams,
    pub stage2: ConvParams,
}

impl DecoderWeights {
    pub fn init_with(config: DecoderConfig, sample: &mut impl FnMut() -> f64) -> Result<Self> {
        let [s1, s2] = config.specs();
        Ok(Self {
            stage1: ConvParams::init_with(s1, sample)?,
            stage2: ConvParams::init_with(s2, sample)?,
        })
    }

    pub fn to_store(&self, store: &mut WeightStore, prefix: &str) {
        store.insert_conv(&format!("{prefix}.stage1"), &self.stage1);
        store.insert_conv(&format!("{prefix}.stage2"), &self.stage2);
    }

    pub fn from_store(store: &WeightStore, prefix: &str, config: DecoderConfig) -> Result<Self> {
        let [s1, s2] = config.specs();
        Ok(Self {
            stage1: store.conv(&format!("{prefix}.stage1"), s1)?,
            stage2: store.conv(&format!("{prefix}.stage2"), s2)?,
        })
    }
}

/// Two rounds of (nearest x2 upsample, convolution): stride 16 in, stride 4 out.
pub fn decoder_forward(f: &DepthFeature, weights: &DecoderWeights, out_channels: usize) -> Result<FeatureMap> {
    if weights.stage1.spec.in_c != DEPTH_FEATURE_CHANNELS
        || weights.stage2.spec.in_c != weights.stage1.spec.out_c
        || weights.stage2.spec.out_c != out_channels
    {
        return Err(Error::Shape(format!(
            "decoder weights {}->{}->{}->{} do not produce {out_channels} channels from {DEPTH_FEATURE_CHANNELS}",
            weights.stage1.spec.in_c,
            weights.stage1.spec.out_c,
            weights.stage2.spec.in_c,
            weights.stage2.spec.out_c
        )));
    }
    if weights.stage1.spec.stride != 1 || weights.stage2.spec.stride != 1 {
        return Err(Error::Shape("decoder convolutions must have stride 1".into()));
    }
    let x = conv_affine_forward(&f.map().upsample_nearest(2), &weights.stage1)?;
    conv_affine_forward(&x.upsample_nearest(2), &weights.stage2)
}

/// Named little-endian f32 tensors.
///
/// On disk: `u64` LE manifest length, the JSON manifest (an object mapping
/// each name to its shape, keys sorted), then the raw f32 data of every
/// tensor in manifest order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Weights(format!(
                "{name}: shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        self.tensors.insert(name.to_string(), (shape, data));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.tensors
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::Weights(format!("missing tensor {name}")))
    }

    fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let (s, d) = self.get(name)?;
        if s != shape {
            return Err(Error::Weights(format!("{name}: expected shape {shape:?}, found {s:?}")));
        }
        Ok(d.iter().map(|&v| v as f64).collect())
    }

    pub fn insert_conv(&mut self, prefix: &str, conv: &ConvParams) {
        let s = conv.spec;
        let to32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
        let kshape = vec![s.out_c, s.in_c / s.groups, s.k, s.k];
        // shapes are consistent by construction of ConvParams
        self.insert(&format!("{prefix}.weight"), kshape, to32(&conv.kernels)).unwrap();
        self.insert(&format!("{prefix}.bias"), vec![s.out_c], to32(&conv.bias)).unwrap();
        self.insert(&format!("{prefix}.scale"), vec![s.out_c], to32(&conv.affine_scale)).unwrap();
        self.insert(&format!("{prefix}.shift"), vec![s.out_c], to32(&conv.affine_shift)).unwrap();
    }

    pub fn conv(&self, prefix: &str, spec: ConvSpec) -> Result<ConvParams> {
        let oc = spec.out_c;
        ConvParams::new(
            spec,
            self.get_shaped(&format!("{prefix}.weight"), &[oc, spec.in_c / spec.groups, spec.k, spec.k])?,
            self.get_shaped(&format!("{prefix}.bias"), &[oc])?,
            self.get_shaped(&format!("{prefix}.scale"), &[oc])?,
            self.get_shaped(&format!("{prefix}.shift"), &[oc])?,
        )
    }

    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        let manifest: BTreeMap<&str, &Vec<usize>> = self.tensors.iter().map(|(k, (s, _))| (k.as_str(), s)).collect();
        let json = serde_json::to_vec(&manifest).map_err(std::io::Error::other)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        for (_, data) in self.tensors.values() {
            for v in data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let bad = |msg: String| Error::Weights(msg);
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(|e| bad(format!("header: {e}")))?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        input.read_exact(&mut json).map_err(|e| bad(format!("manifest: {e}")))?;
        let manifest: BTreeMap<String, Vec<usize>> = serde_json::from_slice(&json)?;
        let mut store = WeightStore::new();
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            input
                .read_exact(&mut raw)
                .map_err(|e| bad(format!("{name}: truncated data ({e})")))?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            store.insert(&name, shape, data)?;
        }
        let mut rest = [0u8; 1];
        if input.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
            return Err(bad("trailing bytes after the last tensor".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

//! Five-tap convolutional feature extractors.
//!
//! Every family exposes one tap per block, taken after the block's last ReLU
//! and before its pooling. Parameters are named `block{i}.conv{j}.weight` /
//! `.bias` (1-based); residual shortcuts are `block{i}.proj.weight` / `.bias`.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ptw::{read_ptw, PtwFile};
use crate::error::{Error, Result};
use crate::tensor::kernels::conv_out_extent;
use crate::tensor::{Graph, Tensor, Var};

pub const NUM_TAPS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    TinyVgg,
    TinyResnet,
    Vgg16Import,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Self::TinyVgg => "tiny-vgg",
            Self::TinyResnet => "tiny-resnet",
            Self::Vgg16Import => "vgg16-import",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    /// `p = 1` for 3×3 convolutions.
    Zero,
    None,
}

impl PaddingMode {
    fn amount(self) -> usize {
        match self {
            Self::Zero => 1,
            Self::None => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub family: Family,
    /// Output channels of each of the five blocks.
    pub channels: [usize; NUM_TAPS],
    /// Convolutions per block for tiny-vgg; vgg16-import is fixed at 2,2,3,3,3.
    pub convs_per_block: usize,
    pub padding: PaddingMode,
    pub input_side: usize,
    /// Multiplier on the Xavier bound of fresh convolution weights.
    pub init_gain: f32,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self::tiny_vgg()
    }
}

impl EncoderSpec {
    pub fn tiny_vgg() -> Self {
        Self {
            family: Family::TinyVgg,
            channels: [16, 32, 64, 128, 128],
            convs_per_block: 2,
            padding: PaddingMode::Zero,
            input_side: 64,
            init_gain: 1.0,
        }
    }

    pub fn tiny_resnet() -> Self {
        Self {
            family: Family::TinyResnet,
            ..Self::tiny_vgg()
        }
    }

    pub fn vgg16() -> Self {
        Self {
            family: Family::Vgg16Import,
            channels: [64, 128, 256, 512, 512],
            convs_per_block: 0,
            padding: PaddingMode::Zero,
            input_side: 224,
            init_gain: 1.0,
        }
    }

    fn block_convs(&self) -> [usize; NUM_TAPS] {
        match self.family {
            Family::TinyVgg => [self.convs_per_block; NUM_TAPS],
            Family::Vgg16Import => [2, 2, 3, 3, 3],
            Family::TinyResnet => [1, 2, 2, 2, 2],
        }
    }

    /// Convolution layout in parameter order.
    fn layout(&self) -> Vec<ConvDecl> {
        let p = self.padding.amount();
        let mut out = Vec::new();
        let mut in_c = 3;
        for (i, (&c, &n)) in self.channels.iter().zip(&self.block_convs()).enumerate() {
            let block = i + 1;
            let residual = self.family == Family::TinyResnet && block > 1;
            for j in 1..=n {
                let stride = if residual && j == 1 { 2 } else { 1 };
                out.push(ConvDecl::new(format!("block{block}.conv{j}"), in_c, c, 3, stride, p));
                in_c = c;
            }
            if residual {
                let prev = if i == 0 { 3 } else { self.channels[i - 1] };
                out.push(ConvDecl::new(format!("block{block}.proj"), prev, c, 1, 2, 0));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.family == Family::TinyResnet && self.padding == PaddingMode::None {
            return Err(Error::Unsupported(
                "tiny-resnet without zero padding: skip connections would not match in size".into(),
            ));
        }
        if self.family == Family::TinyVgg && self.convs_per_block == 0 {
            return Err(Error::Config("convs_per_block must be ≥ 1".into()));
        }
        if !(self.init_gain > 0.0 && self.init_gain.is_finite()) {
            return Err(Error::Config(format!(
                "init_gain must be positive, got {}",
                self.init_gain
            )));
        }
        if let Some(i) = self.channels.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("block {} has zero channels", i + 1)));
        }
        self.tap_shapes().map(|_| ())
    }

    /// `[channels, side]` of each tap for a square input of `input_side`.
    pub fn tap_shapes(&self) -> Result<[[usize; 2]; NUM_TAPS]> {
        let p = self.padding.amount();
        let collapse = |block: usize, what: &str, side: usize| {
            Error::Config(format!(
                "{} input {}: block {block} {what} collapses at side {side}",
                self.family, self.input_side
            ))
        };
        let mut side = self.input_side;
        let mut out = [[0; 2]; NUM_TAPS];
        for (i, &n) in self.block_convs().iter().enumerate() {
            let block = i + 1;
            let residual = self.family == Family::TinyResnet && block > 1;
            if i > 0 && !residual {
                if side < 2 {
                    return Err(collapse(block, "pool", side));
                }
                side /= 2;
            }
            for j in 0..n {
                let stride = if residual && j == 0 { 2 } else { 1 };
                side = conv_out_extent(side, 3, stride, p).ok_or_else(|| collapse(block, "conv", side))?;
            }
            out[i] = [self.channels[i], side];
        }
        Ok(out)
    }

    pub fn tap_channels(&self) -> usize {
        self.channels.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvDecl {
    name: String,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    padding: usize,
}

impl ConvDecl {
    fn new(name: String, in_c: usize, out_c: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            name,
            in_c,
            out_c,
            k,
            stride,
            padding,
        }
    }
}

/// Uniform Xavier tensor with bound `√(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(dims: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    xavier_uniform_gain(dims, fan_in, fan_out, 1.0, rng)
}

/// Uniform Xavier with the bound scaled by `gain`.
pub fn xavier_uniform_gain(dims: &[usize], fan_in: usize, fan_out: usize, gain: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::from_fn(dims, |_| rng.gen_range(-bound..=bound))
}

/// Per-channel input normalization applied before the first convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// Hex SHA-256 over `name, dims, f32 LE bytes` of each tensor in name order.
pub fn fingerprint<'a>(params: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> String {
    let mut sorted: Vec<_> = params.into_iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(b.0));
    let mut h = Sha256::new();
    for (name, t) in sorted {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.dims().len() as u64).to_le_bytes());
        for &d in t.dims() {
            h.update((d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    layout: Vec<ConvDecl>,
    params: Vec<(String, Tensor)>,
    frozen: bool,
    normalization: Option<Normalization>,
}

/// Graph handles produced by [`Encoder::forward_graph`].
pub struct EncoderVars {
    pub taps: Vec<Var>,
    /// One per parameter, in [`Encoder::params`] order.
    pub params: Vec<Var>,
}

impl Encoder {
    /// Fresh encoder: Xavier-uniform weights, zero biases. Unfrozen.
    pub fn build(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let layout = spec.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layout.len() * 2);
        for d in &layout {
            let (fan_in, fan_out) = (d.in_c * d.k * d.k, d.out_c * d.k * d.k);
            let w = xavier_uniform_gain(&[d.out_c, d.in_c, d.k, d.k], fan_in, fan_out, spec.init_gain, &mut rng);
            params.push((format!("{}.weight", d.name), w));
            params.push((format!("{}.bias", d.name), Tensor::zeros(&[d.out_c])));
        }
        Ok(Self {
            spec,
            layout,
            params,
            frozen: false,
            normalization: None,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn normalization(&self) -> Option<Normalization> {
        self.normalization
    }

    pub fn set_normalization(&mut self, n: Option<Normalization>) {
        self.normalization = n;
    }

    pub fn weight_fingerprint(&self) -> String {
        fingerprint(self.params.iter().map(|(n, t)| (n.as_str(), t)))
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        let [_, c, h, w] = match *dims {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::dim("encoder", "input rank", 4, dims.len())),
        };
        if c != 3 {
            return Err(Error::dim("encoder", "channel", 3, c));
        }
        let s = self.spec.input_side;
        if (h, w) != (s, s) {
            return Err(Error::dim(
                "encoder",
                "input size",
                format!("{s}×{s}"),
                format!("{h}×{w}"),
            ));
        }
        Ok(())
    }

    fn normalized(&self, image: &Tensor) -> Tensor {
        let Some(norm) = self.normalization else {
            return image.clone();
        };
        let [_, _, h, w] = image.nchw().expect("checked");
        let plane = h * w;
        let mut out = image.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = (i / plane) % 3;
            *v = (*v - norm.mean[c]) / norm.std[c];
        }
        out
    }

    /// Records the forward pass on `g`. Parameters get gradients only when
    /// `trainable` is set.
    pub fn forward_graph(&self, g: &mut Graph, image: &Tensor, trainable: bool) -> Result<EncoderVars> {
        self.check_input(image.dims())?;
        let x = g.input(self.normalized(image));
        let params: Vec<Var> = self.params.iter().map(|(_, t)| g.param(t.clone(), trainable)).collect();
        let conv = |g: &mut Graph, idx: usize, x: Var| {
            let d = &self.layout[idx];
            g.conv2d(x, params[2 * idx], params[2 * idx + 1], d.stride, d.padding)
        };
        let mut taps = Vec::with_capacity(NUM_TAPS);
        let mut h = x;
        let mut idx = 0;
        for (i, &n) in self.spec.block_convs().iter().enumerate() {
            let residual = self.spec.family == Family::TinyResnet && i > 0;
            if residual {
                let skip_in = h;
                let mut r = conv(g, idx, h)?;
                r = g.relu(r);
                r = conv(g, idx + 1, r)?;
                let skip = conv(g, idx + 2, skip_in)?;
                let sum = g.add(r, skip)?;
                h = g.relu(sum);
                idx += 3;
            } else {
                if i > 0 {
                    h = g.maxpool2(h)?;
                }
                for _ in 0..n {
                    let c = conv(g, idx, h)?;
                    h = g.relu(c);
                    idx += 1;
                }
            }
            taps.push(h);
        }
        Ok(EncoderVars { taps, params })
    }

    /// The five taps for a `N×3×S×S` image, without gradients.
    pub fn forward_taps(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let vars = self.forward_graph(&mut g, image, false)?;
        Ok(vars.taps.iter().map(|&v| g.value(v).clone()).collect())
    }

    /// Weights (and normalization, if any) as a PTW file.
    pub fn to_ptw(&self) -> Result<PtwFile> {
        let mut f = PtwFile::new();
        for (name, t) in &self.params {
            f.push_tensor(name.clone(), t)?;
        }
        f.set_meta("family", self.spec.family.name());
        if let Some(n) = self.normalization {
            f.set_meta("norm.mean", join(&n.mean));
            f.set_meta("norm.std", join(&n.std));
        }
        Ok(f)
    }

    /// Replaces every parameter from `file` and freezes the encoder. Extra
    /// tensors (such as reference activations) are ignored.
    pub fn load_weights(mut self, file: &PtwFile) -> Result<Self> {
        for (name, t) in &mut self.params {
            let src = file.tensor(name).ok_or_else(|| Error::Load {
                tensor: name.clone(),
                reason: "missing from file".into(),
            })?;
            if src.dims != t.dims() {
                return Err(Error::Load {
                    tensor: name.clone(),
                    reason: format!("dims {:?} in file, expected {:?}", src.dims, t.dims()),
                });
            }
            *t = src.to_tensor()?;
        }
        self.normalization = match (file.meta("norm.mean"), file.meta("norm.std")) {
            (Some(m), Some(s)) => Some(Normalization {
                mean: parse3("norm.mean", m)?,
                std: parse3("norm.std", s)?,
            }),
            (None, None) => None,
            _ => {
                return Err(Error::Load {
                    tensor: "norm.mean/norm.std".into(),
                    reason: "only one of the pair is present".into(),
                })
            }
        };
        if let Some(n) = self.normalization {
            if n.std.iter().any(|&s| s <= 0.0) {
                return Err(Error::Load {
                    tensor: "norm.std".into(),
                    reason: "non-positive standard deviation".into(),
                });
            }
        }
        self.frozen = true;
        Ok(self)
    }

    /// Builds `spec` and loads its weights from a PTW file on disk.
    pub fn from_ptw_path(spec: EncoderSpec, path: impl AsRef<Path>) -> Result<Self> {
        let file = read_ptw(path)?;
        Self::build(spec, 0)?.load_weights(&file)
    }

    /// Recomputes the taps for the file's `ref.input` and returns the max-abs
    /// difference against each stored `ref.tap{i}`.
    pub fn verify_reference_taps(&self, file: &PtwFile) -> Result<[f32; NUM_TAPS]> {
        let input = file.tensor("ref.input").ok_or_else(|| Error::Load {
            tensor: "ref.input".into(),
            reason: "missing from file".into(),
        })?;
        let taps = self.forward_taps(&input.to_tensor()?)?;
        let mut out = [0.0; NUM_TAPS];
        for (i, tap) in taps.iter().enumerate() {
            let name = format!("ref.tap{}", i + 1);
            let stored = file.tensor(&name).ok_or_else(|| Error::Load {
                tensor: name.clone(),
                reason: "missing from file".into(),
            })?;
            if stored.dims != tap.dims() {
                return Err(Error::Load {
                    tensor: name,
                    reason: format!("dims {:?} in file, recomputed {:?}", stored.dims, tap.dims()),
                });
            }
            out[i] = tap.max_abs_diff(&stored.to_tensor()?);
        }
        Ok(out)
    }
}

fn join(v: &[f32; 3]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse3(key: &str, s: &str) -> Result<[f32; 3]> {
    let bad = || Error::Load {
        tensor: key.into(),
        reason: format!("expected three comma-separated numbers, got `{s}`"),
    };
    let v: Vec<f32> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    v.try_into().map_err(|_| bad())
}

/// Global average pool over the last tap followed by an affine layer.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ClassifierHead {
    pub fn new(encoder: &Encoder, num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!(
                "classifier needs ≥ 2 classes, got {num_classes}"
            )));
        }
        let f = encoder.spec().channels[NUM_TAPS - 1];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            weight: xavier_uniform(&[num_classes, f], f, num_classes, &mut rng),
            bias: Tensor::zeros(&[num_classes]),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    /// Records `logits = affine(gap(tap5))`; returns `(logits, weight, bias)`.
    /// Head parameters are always trainable.
    pub fn logits(&self, g: &mut Graph, tap5: Var) -> Result<(Var, Var, Var)> {
        let pooled = g.global_avg_pool(tap5)?;
        let w = g.param(self.weight.clone(), true);
        let b = g.param(self.bias.clone(), true);
        Ok((g.affine(pooled, w, b)?, w, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_vgg_taps() {
        let e = Encoder::build(EncoderSpec::tiny_vgg(), 0).unwrap();
        let taps = e.forward_taps(&Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        let shapes: Vec<_> = taps.iter().map(|t| t.dims().to_vec()).collect();
        let expect: Vec<Vec<usize>> = [(16, 64), (32, 32), (64, 16), (128, 8), (128, 4)]
            .iter()
            .map(|&(c, s)| vec![1, c, s, s])
            .collect();
        assert_eq!(shapes, expect);
        assert!(taps.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn tiny_resnet_taps() {
        let spec = EncoderSpec::tiny_resnet();
        let sides: Vec<_> = spec.tap_shapes().unwrap().iter().map(|s| s[1]).collect();
        assert_eq!(sides, [64, 32, 16, 8, 4]);
        let e = Encoder::build(spec, 0).unwrap();
        let taps = e.forward_taps(&Tensor::full(&[1, 3, 64, 64], 0.5)).unwrap();
        assert_eq!(taps[4].dims(), &[1, 128, 4, 4]);
    }

    #[test]
    fn resnet_without_padding_rejected() {
        let spec = EncoderSpec {
            padding: PaddingMode::None,
            ..EncoderSpec::tiny_resnet()
        };
        assert!(matches!(Encoder::build(spec, 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn unpadded_collapse_rejected() {
        let spec = EncoderSpec {
            padding: PaddingMode::None,
            ..EncoderSpec::tiny_vgg()
        };
        let err = Encoder::build(spec, 0).unwrap_err().to_string();
        assert!(err.contains("block 4"), "{err}");
    }

    #[test]
    fn unpadded_single_conv_shapes() {
        let spec = EncoderSpec {
            padding: PaddingMode::None,
            convs_per_block: 1,
            input_side: 80,
            ..EncoderSpec::tiny_vgg()
        };
        let sides: Vec<_> = spec.tap_shapes().unwrap().iter().map(|s| s[1]).collect();
        assert_eq!(sides, [78, 37, 16, 6, 1]);
    }

    #[test]
    fn vgg16_shapes() {
        let spec = EncoderSpec::vgg16();
        assert_eq!(
            spec.tap_shapes().unwrap(),
            [[64, 224], [128, 112], [256, 56], [512, 28], [512, 14]]
        );
        assert_eq!(spec.layout().len(), 13);
    }

    #[test]
    fn seeded_build_is_deterministic() {
        let a = Encoder::build(EncoderSpec::tiny_vgg(), 5).unwrap();
        let b = Encoder::build(EncoderSpec::tiny_vgg(), 5).unwrap();
        let c = Encoder::build(EncoderSpec::tiny_vgg(), 6).unwrap();
        assert_eq!(a.weight_fingerprint(), b.weight_fingerprint());
        assert_ne!(a.weight_fingerprint(), c.weight_fingerprint());
    }

    #[test]
    fn xavier_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = xavier_uniform(&[16, 3, 3, 3], 27, 144, &mut rng);
        let bound = (6.0f32 / 171.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
        assert!(t.data().iter().any(|v| v.abs() > 0.9 * bound));
    }

    #[test]
    fn wrong_input_size() {
        let e = Encoder::build(EncoderSpec::tiny_vgg(), 0).unwrap();
        assert!(e.forward_taps(&Tensor::zeros(&[1, 3, 32, 32])).is_err());
    }

    #[test]
    fn head_of_constant_features() {
        let e = Encoder::build(EncoderSpec::tiny_vgg(), 0).unwrap();
        let mut head = ClassifierHead::new(&e, 4, 0).unwrap();
        head.weight = Tensor::from_fn(&[4, 128], |i| (i % 128 == 0) as u8 as f32);
        let mut g = Graph::new();
        let tap = g.input(Tensor::from_fn(&[1, 128, 4, 4], |i| (i / 16) as f32));
        let (logits, _, _) = head.logits(&mut g, tap).unwrap();
        // row k of the weight selects pooled channel 0, which is 0
        assert_eq!(g.value(logits).data(), &[0.0; 4]);
        assert!(ClassifierHead::new(&e, 1, 0).is_err());
    }
}

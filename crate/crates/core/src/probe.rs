//! The position readout: align the taps, concatenate, a short conv stack,
//! then upsample to the target size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ptw::PtwFile;
use crate::encoders::{xavier_uniform, EncoderSpec, NUM_TAPS};
use crate::error::{Error, Result};
use crate::patterns::PositionMap;
use crate::tensor::graph::resize;
use crate::tensor::kernels::{self, conv_out_extent};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSpec {
    /// Kernel size, one of 1, 3, 5, 7.
    pub kernel: usize,
    /// Number of stacked convolutions, 1 to 3.
    pub layers: usize,
    /// Zero padding of every probe convolution, 0 to 2.
    pub padding: usize,
    /// Side all inputs are resized to; `None` means input side / 8.
    pub align_side: Option<usize>,
    /// Width of intermediate layers when `layers > 1`.
    pub mid_channels: usize,
    /// Read the raw image instead of encoder taps.
    pub standalone: bool,
    /// 1-based subset of taps to read; `None` reads all five.
    pub taps: Option<Vec<usize>>,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            kernel: 3,
            layers: 1,
            padding: 0,
            align_side: None,
            mid_channels: 32,
            standalone: false,
            taps: None,
        }
    }
}

impl ProbeSpec {
    pub fn align_for(&self, input_side: usize) -> usize {
        self.align_side.unwrap_or((input_side / 8).max(1))
    }

    /// 0-based tap indices read by the probe.
    pub fn tap_indices(&self) -> Vec<usize> {
        match &self.taps {
            Some(t) => t.iter().map(|i| i - 1).collect(),
            None => (0..NUM_TAPS).collect(),
        }
    }

    /// Input channels when reading from an encoder of `enc`.
    pub fn in_channels(&self, enc: &EncoderSpec) -> usize {
        if self.standalone {
            3
        } else {
            self.tap_indices().iter().map(|&i| enc.channels[i]).sum()
        }
    }

    pub fn validate(&self, align: usize) -> Result<()> {
        if ![1, 3, 5, 7].contains(&self.kernel) {
            return Err(Error::Config(format!(
                "probe kernel must be 1, 3, 5 or 7, got {}",
                self.kernel
            )));
        }
        if !(1..=3).contains(&self.layers) {
            return Err(Error::Config(format!(
                "probe layers must be 1 to 3, got {}",
                self.layers
            )));
        }
        if self.padding > 2 {
            return Err(Error::Config(format!(
                "probe padding must be 0 to 2, got {}",
                self.padding
            )));
        }
        if self.layers > 1 && self.mid_channels == 0 {
            return Err(Error::Config("probe mid_channels must be ≥ 1".into()));
        }
        if let Some(t) = &self.taps {
            if t.is_empty() || t.iter().any(|&i| !(1..=NUM_TAPS).contains(&i)) {
                return Err(Error::Config(format!(
                    "probe taps must be a non-empty subset of 1..=5, got {t:?}"
                )));
            }
        }
        if align == 0 {
            return Err(Error::Config("probe align_side must be ≥ 1".into()));
        }
        self.output_side(align).map(|_| ())
    }

    /// Side of the map before the final upsampling.
    pub fn output_side(&self, align: usize) -> Result<usize> {
        let mut side = align;
        for l in 0..self.layers {
            side = conv_out_extent(side, self.kernel, 1, self.padding).ok_or_else(|| {
                Error::Config(format!(
                    "probe layer {} (k={}, p={}) does not fit an aligned side of {side}",
                    l + 1,
                    self.kernel,
                    self.padding
                ))
            })?;
        }
        Ok(side)
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    spec: ProbeSpec,
    align: usize,
    in_channels: usize,
    params: Vec<(String, Tensor)>,
    /// Constant per-channel input scale, fitted on training features.
    input_scale: Vec<f32>,
}

impl Probe {
    /// Xavier-uniform weights, zero biases.
    pub fn build(spec: ProbeSpec, in_channels: usize, align: usize, seed: u64) -> Result<Self> {
        spec.validate(align)?;
        if in_channels == 0 {
            return Err(Error::Config("probe needs at least one input channel".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = spec.kernel;
        let mut params = Vec::with_capacity(2 * spec.layers);
        let mut c_in = in_channels;
        for l in 1..=spec.layers {
            let c_out = if l == spec.layers { 1 } else { spec.mid_channels };
            let w = xavier_uniform(&[c_out, c_in, k, k], c_in * k * k, c_out * k * k, &mut rng);
            params.push((format!("probe.conv{l}.weight"), w));
            params.push((format!("probe.conv{l}.bias"), Tensor::zeros(&[c_out])));
            c_in = c_out;
        }
        Ok(Self {
            spec,
            align,
            in_channels,
            params,
            input_scale: vec![1.0; in_channels],
        })
    }

    /// A probe sized for `encoder` (or for raw images when standalone).
    pub fn for_encoder(spec: ProbeSpec, encoder: &EncoderSpec, seed: u64) -> Result<Self> {
        let align = spec.align_for(encoder.input_side);
        spec.validate(align)?;
        let c = spec.in_channels(encoder);
        Self::build(spec, c, align, seed)
    }

    pub fn spec(&self) -> &ProbeSpec {
        &self.spec
    }

    pub fn align_side(&self) -> usize {
        self.align
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn input_scale(&self) -> &[f32] {
        &self.input_scale
    }

    /// Fits the input scale so every channel of `features` has RMS `1/√(C·k²)`,
    /// giving each first-layer input window a unit mean-square norm. Channels
    /// that are identically zero keep scale 1. A per-channel scale is
    /// absorbable into the first conv, so this only conditions the
    /// optimization; it does not change what the probe can express.
    pub fn fit_input_scale(&mut self, features: &[Tensor]) -> Result<()> {
        let c = self.in_channels;
        let mut sum_sq = vec![0.0f64; c];
        let mut count = 0usize;
        for f in features {
            let dims = f.nchw()?;
            if dims[1] != c {
                return Err(Error::dim("probe", "channel", c, dims[1]));
            }
            let plane = dims[2] * dims[3];
            for (i, chunk) in f.data().chunks_exact(plane).enumerate() {
                sum_sq[i % c] += chunk.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            }
            count += dims[0] * plane;
        }
        if count == 0 {
            return Err(Error::Config("cannot fit the input scale on no features".into()));
        }
        let root_window = ((c * self.spec.kernel * self.spec.kernel) as f64).sqrt();
        self.input_scale = sum_sq
            .iter()
            .map(|&s| {
                let rms = (s / count as f64).sqrt();
                if rms > 1e-12 {
                    (1.0 / (rms * root_window)) as f32
                } else {
                    1.0
                }
            })
            .collect();
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Selects the probe's inputs from five taps (or takes the raw image),
    /// resizes each to the alignment side and concatenates along channels.
    pub fn align(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let selected: Vec<&Tensor> = if self.spec.standalone {
            if inputs.len() != 1 {
                return Err(Error::dim("probe", "raw image count", 1, inputs.len()));
            }
            vec![&inputs[0]]
        } else {
            if inputs.len() != NUM_TAPS {
                return Err(Error::dim("probe", "tap count", NUM_TAPS, inputs.len()));
            }
            self.spec.tap_indices().iter().map(|&i| &inputs[i]).collect()
        };
        let resized: Vec<Tensor> = selected
            .iter()
            .map(|t| resize(t, self.align, self.align))
            .collect::<Result<_>>()?;
        let parts: Vec<(&[usize], &[f32])> = resized.iter().map(|t| (t.dims(), t.data())).collect();
        let (dims, data) = kernels::concat_channels(&parts)?;
        if dims[1] != self.in_channels {
            return Err(Error::dim("probe", "channel", self.in_channels, dims[1]));
        }
        Tensor::new(&dims, data)
    }

    /// Records the conv stack and upsampling on already aligned features.
    /// Returns the `N×1×H×W` output and one var per parameter.
    pub fn forward_aligned(
        &self,
        g: &mut Graph,
        aligned: Var,
        target_h: usize,
        target_w: usize,
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let params: Vec<Var> = self.params.iter().map(|(_, t)| g.param(t.clone(), trainable)).collect();
        let mut h = g.scale_channels(aligned, &self.input_scale)?;
        for l in 0..self.spec.layers {
            if l > 0 {
                h = g.relu(h);
            }
            h = g.conv2d(h, params[2 * l], params[2 * l + 1], 1, self.spec.padding)?;
        }
        let out = g.bilinear_resize(h, target_h, target_w)?;
        Ok((out, params))
    }

    /// Predictions for aligned features, one map per batch item.
    pub fn predict_aligned(&self, aligned: &Tensor, target_h: usize, target_w: usize) -> Result<Vec<PositionMap>> {
        let mut g = Graph::new();
        let x = g.input(aligned.clone());
        let (out, _) = self.forward_aligned(&mut g, x, target_h, target_w, false)?;
        let out = g.value(out);
        let n = out.dims()[0];
        (0..n).map(|i| PositionMap::from_tensor(&out.batch_item(i)?)).collect()
    }

    /// Full readout from five taps (or the raw image when standalone).
    pub fn probe_forward(&self, inputs: &[Tensor], target_h: usize, target_w: usize) -> Result<Vec<PositionMap>> {
        self.predict_aligned(&self.align(inputs)?, target_h, target_w)
    }

    pub fn to_ptw(&self) -> Result<PtwFile> {
        let mut f = PtwFile::new();
        for (name, t) in &self.params {
            f.push_tensor(name.clone(), t)?;
        }
        f.push_tensor(
            "probe.input_scale",
            &Tensor::new(&[self.in_channels], self.input_scale.clone())?,
        )?;
        f.set_meta("probe.spec", serde_json::to_string(&self.spec)?);
        f.set_meta("probe.align", self.align.to_string());
        Ok(f)
    }

    /// Replaces the parameters from `file`, checking names and dims.
    pub fn load_ptw(&mut self, file: &PtwFile) -> Result<()> {
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
        let scale = file.tensor("probe.input_scale").ok_or_else(|| Error::Load {
            tensor: "probe.input_scale".into(),
            reason: "missing from file".into(),
        })?;
        if scale.dims != [self.in_channels] {
            return Err(Error::Load {
                tensor: "probe.input_scale".into(),
                reason: format!("dims {:?} in file, expected [{}]", scale.dims, self.in_channels),
            });
        }
        self.input_scale = scale.to_tensor()?.into_data();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn taps(fill: f32) -> Vec<Tensor> {
        [(16, 64), (32, 32), (64, 16), (128, 8), (128, 4)]
            .iter()
            .map(|&(c, s)| Tensor::full(&[1, c, s, s], fill))
            .collect()
    }

    #[test]
    fn output_sides() {
        let spec = ProbeSpec::default();
        assert_eq!(spec.output_side(8).unwrap(), 6);
        let padded = ProbeSpec {
            padding: 1,
            ..spec.clone()
        };
        assert_eq!(padded.output_side(8).unwrap(), 8);
        let big = ProbeSpec {
            kernel: 7,
            layers: 2,
            ..spec
        };
        assert!(big.output_side(8).is_err());
    }

    #[test]
    fn zero_taps_give_zero_map() {
        let p = Probe::for_encoder(ProbeSpec::default(), &EncoderSpec::tiny_vgg(), 0).unwrap();
        let maps = p.probe_forward(&taps(0.0), 64, 64).unwrap();
        assert_eq!((maps[0].height(), maps[0].width()), (64, 64));
        assert!(maps[0].values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tap_count_checked() {
        let p = Probe::for_encoder(ProbeSpec::default(), &EncoderSpec::tiny_vgg(), 0).unwrap();
        assert!(p.probe_forward(&taps(0.0)[..4], 64, 64).is_err());
    }

    #[test]
    fn counts() {
        let enc = EncoderSpec::tiny_vgg();
        let k1 = ProbeSpec {
            kernel: 1,
            ..Default::default()
        };
        assert_eq!(Probe::for_encoder(k1, &enc, 0).unwrap().param_count(), 369);
        let l2 = ProbeSpec {
            layers: 2,
            padding: 1,
            ..Default::default()
        };
        assert_eq!(
            Probe::for_encoder(l2, &enc, 0).unwrap().param_count(),
            9 * 368 * 32 + 32 + 9 * 32 + 1
        );
    }

    #[test]
    fn tap_subset() {
        let spec = ProbeSpec {
            taps: Some(vec![5]),
            ..Default::default()
        };
        let p = Probe::for_encoder(spec, &EncoderSpec::tiny_vgg(), 0).unwrap();
        assert_eq!(p.in_channels(), 128);
        assert_eq!(p.align(&taps(1.0)).unwrap().dims(), &[1, 128, 8, 8]);
        let bad = ProbeSpec {
            taps: Some(vec![6]),
            ..Default::default()
        };
        assert!(Probe::for_encoder(bad, &EncoderSpec::tiny_vgg(), 0).is_err());
    }

    #[test]
    fn standalone_constant_image_is_constant() {
        let spec = ProbeSpec {
            standalone: true,
            ..Default::default()
        };
        let p = Probe::for_encoder(spec, &EncoderSpec::tiny_vgg(), 3).unwrap();
        let maps = p.probe_forward(&[Tensor::full(&[1, 3, 64, 64], 0.7)], 64, 64).unwrap();
        let first = maps[0].values()[0];
        assert!(maps[0].values().iter().all(|&v| v == first));
    }

    #[test]
    fn input_scale_normalizes_windows() {
        let spec = ProbeSpec {
            standalone: true,
            ..Default::default()
        };
        let mut p = Probe::for_encoder(spec, &EncoderSpec::tiny_vgg(), 0).unwrap();
        let mut x = Tensor::zeros(&[2, 3, 4, 4]);
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            // channel 0 holds ±2, channel 1 holds ±0.5, channel 2 stays zero
            let c = (i / 16) % 3;
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            *v = sign * [2.0, 0.5, 0.0][c];
        }
        p.fit_input_scale(&[x]).unwrap();
        let root = (3.0f32 * 9.0).sqrt();
        let s = p.input_scale();
        assert!((s[0] - 1.0 / (2.0 * root)).abs() < 1e-6);
        assert!((s[1] - 1.0 / (0.5 * root)).abs() < 1e-6);
        assert_eq!(s[2], 1.0);
        assert!(p.fit_input_scale(&[]).is_err());
        assert!(p.fit_input_scale(&[Tensor::zeros(&[1, 4, 2, 2])]).is_err());
    }

    #[test]
    fn ptw_round_trip() {
        let p = Probe::for_encoder(ProbeSpec::default(), &EncoderSpec::tiny_vgg(), 1).unwrap();
        let mut q = Probe::for_encoder(ProbeSpec::default(), &EncoderSpec::tiny_vgg(), 2).unwrap();
        q.load_ptw(&p.to_ptw().unwrap()).unwrap();
        assert_eq!(p.params(), q.params());
    }
}

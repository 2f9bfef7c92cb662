use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ImageSource;
use crate::encoders::{EncoderSpec, Family, PaddingMode, NUM_TAPS};
use crate::error::{Error, Result};
use crate::patterns::PatternKind;
use crate::probe::ProbeSpec;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Existence,
    Layers,
    Kernels,
    PerLayer,
    Padding,
    Heatmap,
    Pretrain,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        Self::Existence,
        Self::Layers,
        Self::Kernels,
        Self::PerLayer,
        Self::Padding,
        Self::Heatmap,
        Self::Pretrain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Existence => "existence",
            Self::Layers => "layers",
            Self::Kernels => "kernels",
            Self::PerLayer => "per-layer",
            Self::Padding => "padding",
            Self::Heatmap => "heatmap",
            Self::Pretrain => "pretrain",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown experiment kind `{s}`")))
    }
}

/// One encoder: a family preset with optional overrides, and optionally a
/// PTW file to load instead of pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Row label in reports; defaults to the family name.
    pub name: Option<String>,
    pub family: Family,
    pub channels: Option<[usize; NUM_TAPS]>,
    pub convs_per_block: Option<usize>,
    pub padding: PaddingMode,
    /// Defaults to the experiment's image side.
    pub input_side: Option<usize>,
    /// Defaults to √2 for the tiny families.
    pub init_gain: Option<f32>,
    pub weights: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::preset(Family::TinyVgg)
    }
}

impl EncoderConfig {
    pub fn preset(family: Family) -> Self {
        Self {
            name: None,
            family,
            channels: None,
            convs_per_block: None,
            padding: PaddingMode::Zero,
            input_side: None,
            init_gain: None,
            weights: None,
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.family.name().to_string())
    }

    pub fn spec(&self, default_side: usize) -> EncoderSpec {
        let mut spec = match self.family {
            Family::TinyVgg => EncoderSpec::tiny_vgg(),
            Family::TinyResnet => EncoderSpec::tiny_resnet(),
            Family::Vgg16Import => EncoderSpec::vgg16(),
        };
        if let Some(c) = self.channels {
            spec.channels = c;
        }
        if let Some(n) = self.convs_per_block {
            spec.convs_per_block = n;
        }
        spec.padding = self.padding;
        spec.input_side = self.input_side.unwrap_or(default_side);
        spec.init_gain = match (self.init_gain, self.family) {
            (Some(g), _) => g,
            (None, Family::Vgg16Import) => 1.0,
            (None, _) => std::f32::consts::SQRT_2,
        };
        spec
    }
}

/// Labelled shapes for classifier pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainData {
    pub count: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for PretrainData {
    fn default() -> Self {
        Self {
            count: 512,
            classes: 4,
            seed: 1,
        }
    }
}

/// Images standing in for natural photographs: a folder of PNG/PPM files, or
/// synthetic cluttered scenes when no folder is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NaturalData {
    pub folder: Option<PathBuf>,
    pub count: usize,
    pub seed: u64,
}

impl Default for NaturalData {
    fn default() -> Self {
        Self {
            folder: None,
            count: 400,
            seed: 99,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Checked against the kind requested on the command line when present.
    pub kind: Option<ExperimentKind>,
    /// Every model, probe and shuffle seed is derived from this one.
    pub seed: u64,
    /// Side of the images fed to the standalone probe and, by default, to encoders.
    pub side: usize,
    /// Encoders compared in `existence` and `heatmap`; the first one is used
    /// by `layers`, `kernels` and `per-layer`.
    pub encoders: Vec<EncoderConfig>,
    /// Base probe; variants override single fields.
    pub probe: ProbeSpec,
    pub pretrain: TrainConfig,
    pub probe_train: TrainConfig,
    pub pretrain_data: PretrainData,
    pub natural: NaturalData,
    pub patterns: Vec<PatternKind>,
    pub sources: Vec<ImageSource>,
    /// Noise images per evaluation; black and white are a single image each.
    pub noise_count: usize,
    pub layers: Vec<usize>,
    pub kernels: Vec<usize>,
    /// Alignment side for the `layers` and `kernels` sweeps; `None` means a
    /// quarter of the first encoder's input side. Each unpadded conv trims
    /// k−1 cells, so at the default side/8 the largest variants would be left
    /// with a 2×2 map whose upsampled form cannot rank pixels finely.
    pub capacity_align_side: Option<usize>,
    /// Standalone-probe paddings compared by `padding`.
    pub probe_paddings: Vec<usize>,
    /// Encoders compared with and without zero padding by `padding`.
    pub padding_encoders: Vec<EncoderConfig>,
    /// Predicted maps written per (model, variant, pattern, source).
    pub maps_per_source: usize,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: None,
            seed: 0,
            side: 64,
            encoders: vec![
                EncoderConfig::preset(Family::TinyVgg),
                EncoderConfig::preset(Family::TinyResnet),
            ],
            probe: ProbeSpec::default(),
            pretrain: TrainConfig::default(),
            probe_train: TrainConfig {
                lr: 0.1,
                ..TrainConfig::default()
            },
            pretrain_data: PretrainData::default(),
            natural: NaturalData::default(),
            patterns: PatternKind::ALL.to_vec(),
            sources: ImageSource::ALL.to_vec(),
            noise_count: 4,
            layers: vec![1, 2, 3],
            kernels: vec![1, 3, 7],
            capacity_align_side: None,
            probe_paddings: vec![0, 1, 2],
            padding_encoders: vec![EncoderConfig {
                name: Some("tiny-vgg-c1".into()),
                convs_per_block: Some(1),
                input_side: Some(80),
                ..EncoderConfig::preset(Family::TinyVgg)
            }],
            maps_per_source: 2,
            out: None,
        }
    }
}

impl ExperimentConfig {
    /// Alignment side used by the `layers` and `kernels` sweeps.
    pub fn capacity_align(&self) -> usize {
        self.capacity_align_side.unwrap_or_else(|| {
            let side = self
                .encoders
                .first()
                .map_or(self.side, |e| e.spec(self.side).input_side);
            (side / 4).max(1)
        })
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// Checks everything that can be checked without running anything.
    pub fn validate(&self) -> Result<()> {
        if self.side < 8 {
            return Err(Error::Config(format!("image side must be ≥ 8, got {}", self.side)));
        }
        if self.patterns.is_empty() {
            return Err(Error::Config("no patterns selected".into()));
        }
        if self.sources.is_empty() {
            return Err(Error::Config("no image sources selected".into()));
        }
        if self.sources.contains(&ImageSource::Noise) && self.noise_count == 0 {
            return Err(Error::Config("noise source selected with noise_count 0".into()));
        }
        self.pretrain.validate()?;
        self.probe_train.validate()?;
        self.probe.validate(self.probe.align_for(self.side))?;
        if let Some(dir) = &self.natural.folder {
            if !dir.is_dir() {
                return Err(Error::Config(format!(
                    "natural image folder {} does not exist",
                    dir.display()
                )));
            }
        } else if self.natural.count < 2 {
            return Err(Error::Config("need at least two natural images".into()));
        }
        let align = self.capacity_align();
        for &layers in &self.layers {
            ProbeSpec {
                layers,
                ..self.probe.clone()
            }
            .validate(align)?;
        }
        for &kernel in &self.kernels {
            ProbeSpec {
                kernel,
                layers: 1,
                ..self.probe.clone()
            }
            .validate(align)?;
        }
        let align = self.probe.align_for(self.side);
        for &padding in &self.probe_paddings {
            ProbeSpec {
                padding,
                ..self.probe.clone()
            }
            .validate(align)?;
        }
        let mut labels = vec!["standalone".to_string()];
        for ec in self.encoders.iter().chain(&self.padding_encoders) {
            if let Some(w) = &ec.weights {
                if !w.is_file() {
                    return Err(Error::Config(format!(
                        "weights {} for encoder `{}` do not exist",
                        w.display(),
                        ec.label()
                    )));
                }
            }
            if ec.family == Family::Vgg16Import && ec.weights.is_none() {
                return Err(Error::Config(format!(
                    "encoder `{}` is an import and needs weights",
                    ec.label()
                )));
            }
        }
        for ec in &self.encoders {
            let label = ec.label();
            if labels.contains(&label) {
                return Err(Error::Config(format!("duplicate encoder name `{label}`")));
            }
            labels.push(label);
            ec.spec(self.side).validate()?;
        }
        for ec in &self.padding_encoders {
            ec.spec(self.side).validate()?;
        }
        Ok(())
    }
}

/// A seed for the component named `tag`, derived from the experiment seed.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_parse() {
        for k in ExperimentKind::ALL {
            assert_eq!(k.name().parse::<ExperimentKind>().unwrap(), k);
        }
        assert!("tables".parse::<ExperimentKind>().is_err());
    }

    #[test]
    fn json_defaults_and_overrides() {
        let cfg =
            ExperimentConfig::from_json_str(r#"{"seed": 5, "patterns": ["H", "VS"], "kind": "per-layer"}"#).unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.patterns, vec![PatternKind::H, PatternKind::VS]);
        assert_eq!(cfg.kind, Some(ExperimentKind::PerLayer));
        assert_eq!(cfg.probe_train.lr, 0.1);
        assert_eq!(cfg.pretrain.lr, 0.01);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(ExperimentConfig::from_json_str(r#"{"sed": 5}"#).is_err());
    }

    #[test]
    fn missing_paths_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.natural.folder = Some("/nonexistent/images".into());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.encoders.push(EncoderConfig::preset(Family::Vgg16Import));
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn encoder_overrides() {
        let ec = EncoderConfig {
            convs_per_block: Some(1),
            input_side: Some(80),
            padding: PaddingMode::None,
            ..EncoderConfig::default()
        };
        let spec = ec.spec(64);
        assert_eq!((spec.convs_per_block, spec.input_side), (1, 80));
        assert_eq!(spec.padding, PaddingMode::None);
        assert_eq!(spec.init_gain, std::f32::consts::SQRT_2);
        assert_eq!(EncoderConfig::default().spec(32).input_side, 32);
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_eq!(derive_seed(3, "a"), derive_seed(3, "a"));
        assert_ne!(derive_seed(3, "a"), derive_seed(3, "b"));
        assert_ne!(derive_seed(3, "a"), derive_seed(4, "a"));
    }
}

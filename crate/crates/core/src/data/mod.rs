//! Image ingestion, synthetic images and on-disk formats.

mod image;
pub mod pgm;
pub mod ptw;
mod synth;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use self::image::{is_train_split, load_folder, load_image};
pub use pgm::{read_pgm, write_pgm};
pub use ptw::{read_ptw, write_ptw, PtwError, PtwFile, PtwTensor};
pub use synth::{synth_image, synth_scenes, synth_shapes, ShapeClass, SynthKind};

/// Where an evaluation image comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageSource {
    Natural,
    Black,
    White,
    Noise,
}

impl ImageSource {
    pub const ALL: [ImageSource; 4] = [Self::Natural, Self::Black, Self::White, Self::Noise];

    pub fn name(self) -> &'static str {
        match self {
            Self::Natural => "natural",
            Self::Black => "black",
            Self::White => "white",
            Self::Noise => "noise",
        }
    }
}

impl fmt::Display for ImageSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ImageSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown image source `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Origin {
    File(PathBuf),
    Synthetic {
        kind: SynthKind,
        seed: u64,
    },
    Scene {
        index: usize,
        seed: u64,
    },
    /// One rendered shape; centre and radius in pixels.
    Shape {
        index: usize,
        class: ShapeClass,
        center: (f32, f32),
        radius: f32,
    },
}

/// A decoded `1×3×H×W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub origin: Origin,
    pub image: Tensor,
    pub label: Option<usize>,
}

impl ImageRecord {
    /// File name for files, a stable descriptor otherwise.
    pub fn name(&self) -> String {
        match &self.origin {
            Origin::File(p) => p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            Origin::Synthetic { kind, seed } => format!("{}-{seed}", kind.name()),
            Origin::Scene { index, seed } => format!("scene-{seed}-{index:05}"),
            Origin::Shape { index, .. } => format!("shape-{index:05}"),
        }
    }
}

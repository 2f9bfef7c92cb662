//! Gradient-like ground-truth position maps.
//!
//! `H` and `HS` depend on the column only, `V` and `VS` on the row only, `G`
//! is a centred Gaussian blob. Stripes are sawtooth ramps: period width
//! `⌈w / P⌉`, each period climbing from 0 to 1, the last period truncated.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PatternKind {
    H,
    V,
    G,
    HS,
    VS,
}

impl PatternKind {
    pub const ALL: [PatternKind; 5] = [Self::H, Self::V, Self::G, Self::HS, Self::VS];

    pub fn name(self) -> &'static str {
        match self {
            Self::H => "H",
            Self::V => "V",
            Self::G => "G",
            Self::HS => "HS",
            Self::VS => "VS",
        }
    }
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PatternKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown pattern `{s}` (expected H, V, G, HS or VS)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternParams {
    /// Gaussian σ as a fraction of `min(h, w)`.
    pub sigma_frac: f64,
    /// Number of stripe periods.
    pub periods: usize,
}

impl Default for PatternParams {
    fn default() -> Self {
        Self {
            sigma_frac: 0.25,
            periods: 4,
        }
    }
}

/// An `h×w` map. Ground truth lies in `[0, 1]`; predictions are stored raw.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionMap {
    h: usize,
    w: usize,
    values: Vec<f32>,
}

impl PositionMap {
    pub fn new(h: usize, w: usize, values: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::dim("position map", "size", "≥ 1", format!("{h}×{w}")));
        }
        if values.len() != h * w {
            return Err(Error::dim("position map", "values", h * w, values.len()));
        }
        Ok(Self { h, w, values })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let values = (0..h * w).map(|i| f(i / w, i % w)).collect();
        Self { h, w, values }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.w + c]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64
    }

    /// As a `1×1×h×w` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.h, self.w], self.values.clone()).expect("valid dims")
    }

    /// From any tensor whose dims are `[.., h, w]` with a single plane.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let d = t.dims();
        if d.len() < 2 || d[..d.len() - 2].iter().any(|&x| x != 1) {
            return Err(Error::dim("position map", "plane count", 1, format!("{d:?}")));
        }
        Self::new(d[d.len() - 2], d[d.len() - 1], t.data().to_vec())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.w, self.h, |r, c| self.get(c, r))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.h, self.w, |r, c| self.get(r, self.w - 1 - c))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.h, self.w, |r, c| self.get(self.h - 1 - r, c))
    }

    /// Min-max rescaled copy for display; constant maps become zero.
    pub fn normalized_for_display(&self) -> Self {
        let lo = self.values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        let values = if span > 0.0 {
            self.values.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        Self { values, ..*self }
    }
}

fn ramp(i: usize, n: usize) -> f32 {
    if n <= 1 {
        0.0
    } else {
        (i as f64 / (n - 1) as f64) as f32
    }
}

fn sawtooth(i: usize, n: usize, periods: usize) -> f32 {
    let width = n.div_ceil(periods.max(1));
    ramp(i % width, width)
}

/// Generates `kind` at `h×w` with default parameters.
pub fn generate(kind: PatternKind, h: usize, w: usize) -> PositionMap {
    generate_with(kind, h, w, PatternParams::default())
}

pub fn generate_with(kind: PatternKind, h: usize, w: usize, params: PatternParams) -> PositionMap {
    assert!(h > 0 && w > 0, "pattern size must be positive");
    match kind {
        PatternKind::H => PositionMap::from_fn(h, w, |_, c| ramp(c, w)),
        PatternKind::V => PositionMap::from_fn(h, w, |r, _| ramp(r, h)),
        PatternKind::HS => PositionMap::from_fn(h, w, |_, c| sawtooth(c, w, params.periods)),
        PatternKind::VS => PositionMap::from_fn(h, w, |r, _| sawtooth(r, h, params.periods)),
        PatternKind::G => gaussian(h, w, params.sigma_frac),
    }
}

fn gaussian(h: usize, w: usize, sigma_frac: f64) -> PositionMap {
    let sigma = sigma_frac * h.min(w) as f64;
    let (mr, mc) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let raw: Vec<f64> = (0..h * w)
        .map(|i| {
            let (dr, dc) = ((i / w) as f64 - mr, (i % w) as f64 - mc);
            (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let values = raw
        .iter()
        .map(|&v| if hi > lo { ((v - lo) / (hi - lo)) as f32 } else { 0.0 })
        .collect();
    PositionMap { h, w, values }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ImageRecord, Origin};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Black,
    White,
    /// Gaussian(0.5, 0.25) per element, clamped to `[0, 1]`.
    Noise,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Black => "black",
            Self::White => "white",
            Self::Noise => "noise",
        }
    }
}

pub fn synth_image(kind: SynthKind, side: usize, seed: u64) -> ImageRecord {
    let dims = [1, 3, side, side];
    let image = match kind {
        SynthKind::Black => Tensor::zeros(&dims),
        SynthKind::White => Tensor::full(&dims, 1.0),
        SynthKind::Noise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let normal = Normal::new(0.5f32, 0.25).expect("valid sd");
            Tensor::from_fn(&dims, |_| normal.sample(&mut rng).clamp(0.0, 1.0))
        }
    };
    ImageRecord {
        origin: Origin::Synthetic { kind, seed },
        image,
        label: None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 6] = [
        Self::Circle,
        Self::Square,
        Self::Triangle,
        Self::Cross,
        Self::Ring,
        Self::Bar,
    ];

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of radius `r`.
    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        let d2 = dx * dx + dy * dy;
        match self {
            Self::Circle => d2 <= r * r,
            Self::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            // apex up, base at dy = r
            Self::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            Self::Cross => {
                let arm = r / 3.0;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            Self::Ring => d2 <= r * r && d2 >= 0.3 * r * r,
            Self::Bar => dx.abs() <= r && dy.abs() <= r / 4.0,
        }
    }
}

/// `count` images of one bright shape each on a dark flat background. Class
/// `i % num_classes` for image `i`; centre, radius and colours are drawn
/// uniformly, with the centre range symmetric about the image centre so labels
/// carry no position.
pub fn synth_shapes(count: usize, side: usize, num_classes: usize, seed: u64) -> Result<Vec<ImageRecord>> {
    if !(2..=ShapeClass::ALL.len()).contains(&num_classes) {
        return Err(Error::Config(format!(
            "shape classes must be in 2..=6, got {num_classes}"
        )));
    }
    if side < 4 {
        return Err(Error::Config(format!("shape images need side ≥ 4, got {side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as f32;
    let plane = side * side;
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let label = index % num_classes;
        let class = ShapeClass::ALL[label];
        let r = rng.gen_range(0.15..0.3) * s;
        let cx = rng.gen_range(r..s - r);
        let cy = rng.gen_range(r..s - r);
        let bg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..0.4));
        let fg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.6..1.0));
        let mut data = vec![0.0f32; 3 * plane];
        for y in 0..side {
            for x in 0..side {
                let inside = class.contains(x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r);
                let col = if inside { &fg } else { &bg };
                for c in 0..3 {
                    data[c * plane + y * side + x] = col[c];
                }
            }
        }
        out.push(ImageRecord {
            origin: Origin::Shape {
                index,
                class,
                center: (cx, cy),
                radius: r,
            },
            image: Tensor::new(&[1, 3, side, side], data)?,
            label: Some(label),
        });
    }
    Ok(out)
}

/// Cluttered stand-ins for natural photographs: a random background with
/// three to six shapes of random class, size and colour. Shapes may overlap
/// and leave the frame, and fore/background contrast has random sign, so no
/// local appearance cue correlates with absolute position.
pub fn synth_scenes(count: usize, side: usize, seed: u64) -> Result<Vec<ImageRecord>> {
    if side < 4 {
        return Err(Error::Config(format!("scene images need side ≥ 4, got {side}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as f32;
    let plane = side * side;
    let mut out = Vec::with_capacity(count);
    for index in 0..count {
        let bg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let mut data = vec![0.0f32; 3 * plane];
        for (c, chunk) in data.chunks_exact_mut(plane).enumerate() {
            chunk.fill(bg[c]);
        }
        for _ in 0..rng.gen_range(3..=6) {
            let class = ShapeClass::ALL[rng.gen_range(0..ShapeClass::ALL.len())];
            let r = rng.gen_range(0.08..0.25) * s;
            let (cx, cy) = (rng.gen_range(0.0..s), rng.gen_range(0.0..s));
            let fg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
            for y in 0..side {
                for x in 0..side {
                    if class.contains(x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r) {
                        for c in 0..3 {
                            data[c * plane + y * side + x] = fg[c];
                        }
                    }
                }
            }
        }
        out.push(ImageRecord {
            origin: Origin::Scene { index, seed },
            image: Tensor::new(&[1, 3, side, side], data)?,
            label: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_images() {
        assert!(synth_image(SynthKind::Black, 4, 0)
            .image
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let white = synth_image(SynthKind::White, 4, 0);
        assert_eq!(white.image.len(), 48);
        assert!(white.image.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn noise_is_seeded() {
        let a = synth_image(SynthKind::Noise, 32, 3);
        assert_eq!(a, synth_image(SynthKind::Noise, 32, 3));
        assert_ne!(a.image, synth_image(SynthKind::Noise, 32, 4).image);
        let m = a.image.data().iter().sum::<f32>() / a.image.len() as f32;
        assert!((0.4..=0.6).contains(&m), "{m}");
    }

    #[test]
    fn shape_labels() {
        let recs = synth_shapes(8, 16, 4, 1).unwrap();
        assert_eq!(recs.len(), 8);
        assert!(recs.iter().all(|r| r.label.unwrap() < 4));
        assert_eq!(recs, synth_shapes(8, 16, 4, 1).unwrap());
        assert!(synth_shapes(8, 16, 7, 1).is_err());
        assert!(synth_shapes(8, 16, 1, 1).is_err());
    }

    #[test]
    fn scenes_are_seeded() {
        let a = synth_scenes(4, 16, 9).unwrap();
        assert_eq!(a, synth_scenes(4, 16, 9).unwrap());
        assert!(a.iter().all(|r| r.label.is_none() && r.image.dims() == [1, 3, 16, 16]));
        assert_ne!(a[0].name(), a[1].name());
    }

    #[test]
    fn shapes_differ_from_background() {
        for rec in synth_shapes(6, 32, 6, 2).unwrap() {
            let px = &rec.image.data()[..32 * 32];
            let first = px[0];
            assert!(px.iter().any(|&v| v != first), "{:?}", rec.origin);
        }
    }
}

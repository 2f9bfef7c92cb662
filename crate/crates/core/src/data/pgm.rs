//! 8-bit binary PGM dumps of position maps.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::patterns::PositionMap;

/// `round(255 · clamp(v, 0, 1))`.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_pgm(map: &PositionMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raster: Vec<u8> = map.values().iter().map(|&v| quantize(v)).collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&raster, map.width() as u32, map.height() as u32, ExtendedColorType::L8)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Decode {
                path: path.into(),
                reason: other.to_string(),
            },
        })
}

/// Reads an 8-bit grayscale image back as `value / 255`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<PositionMap> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Decode {
            path: path.into(),
            reason: e.to_string(),
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    let values = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
    PositionMap::new(h as usize, w as usize, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patterns::{generate, PatternKind};

    #[test]
    fn ramp_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.pgm");
        write_pgm(&generate(PatternKind::H, 1, 3), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5"));
        assert_eq!(&bytes[bytes.len() - 3..], &[0, 128, 255]);
    }

    #[test]
    fn round_trip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.pgm");
        let m = generate(PatternKind::G, 7, 9);
        write_pgm(&m, &p).unwrap();
        let back = read_pgm(&p).unwrap();
        for (a, b) in m.values().iter().zip(back.values()) {
            assert_eq!(quantize(*a), (b * 255.0).round() as u8);
        }
        assert_eq!((back.height(), back.width()), (7, 9));
    }
}

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{ImageRecord, Origin};
use crate::error::{Error, Result};
use crate::tensor::{graph::resize, Tensor};

/// Decodes a PNG or binary PPM, scales to `[0, 1]` and resizes to
/// `side×side` with the same bilinear kernel the networks use.
pub fn load_image(path: impl AsRef<Path>, side: usize) -> Result<ImageRecord> {
    let path = path.as_ref();
    let decoded = image::open(path).map_err(|e| Error::Decode {
        path: path.into(),
        reason: e.to_string(),
    })?;
    let rgb = decoded.into_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.into_raw();
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    let t = Tensor::new(&[1, 3, h, w], data)?;
    let image = if (h, w) == (side, side) {
        t
    } else {
        resize(&t, side, side)?
    };
    Ok(ImageRecord {
        origin: Origin::File(path.to_path_buf()),
        image,
        label: None,
    })
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref(),
        Some("png" | "ppm")
    )
}

/// Loads every PNG/PPM in `dir` (sorted by name). Labels come from an optional
/// `labels.csv` with rows `filename,label`.
pub fn load_folder(dir: impl AsRef<Path>, side: usize) -> Result<Vec<ImageRecord>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no PNG/PPM images in {}", dir.display())));
    }
    let labels = read_labels(&dir.join("labels.csv"))?;
    paths
        .iter()
        .map(|p| {
            let mut rec = load_image(p, side)?;
            let name = p.file_name().unwrap_or_default().to_string_lossy();
            rec.label = labels.get(name.as_ref()).copied();
            Ok(rec)
        })
        .collect()
}

fn read_labels(path: &Path) -> Result<HashMap<String, usize>> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let (Some(name), Some(label)) = (rec.get(0), rec.get(1)) else {
            return Err(Error::Config(format!(
                "{}: row {} needs filename,label",
                path.display(),
                i + 1
            )));
        };
        match label.trim().parse() {
            Ok(l) => {
                out.insert(name.trim().to_string(), l);
            }
            Err(_) if i == 0 => {} // header
            Err(_) => return Err(Error::Config(format!("{}: bad label `{label}`", path.display()))),
        }
    }
    Ok(out)
}

/// Deterministic 80/20 split keyed on the file name.
pub fn is_train_split(name: &str) -> bool {
    let digest = Sha256::digest(name.as_bytes());
    let head = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    head % 100 < 80
}

//! Scoring predicted position maps: Spearman correlation, MAE and the
//! content-loss map.

use std::path::Path;

use serde::Serialize;

use crate::data::ImageSource;
use crate::error::{Error, Result};
use crate::patterns::{PatternKind, PositionMap};

fn same_dims(op: &'static str, a: &PositionMap, b: &PositionMap) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::dim(
            op,
            "map size",
            format!("{}×{}", a.height(), a.width()),
            format!("{}×{}", b.height(), b.width()),
        ));
    }
    Ok(())
}

/// 1-based ranks, ties receiving the mean of the positions they span.
pub fn average_ranks(values: &[f32]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Spearman rank correlation over the flattened maps. A constant map has no
/// rank variance and scores 0.
pub fn spc(a: &PositionMap, b: &PositionMap) -> Result<f64> {
    same_dims("spc", a, b)?;
    if a.values().len() < 2 {
        return Err(Error::dim("spc", "cell count", "≥ 2", a.values().len()));
    }
    Ok(pearson(&average_ranks(a.values()), &average_ranks(b.values())))
}

/// Mean absolute difference with the prediction clamped to `[0, 1]`.
pub fn mae(pred: &PositionMap, truth: &PositionMap) -> Result<f64> {
    same_dims("mae", pred, truth)?;
    Ok(mean_abs(
        pred.values().iter().map(|p| p.clamp(0.0, 1.0)),
        truth.values(),
    ))
}

/// Mean absolute difference of the raw values.
pub fn mae_unclamped(pred: &PositionMap, truth: &PositionMap) -> Result<f64> {
    same_dims("mae", pred, truth)?;
    Ok(mean_abs(pred.values().iter().copied(), truth.values()))
}

fn mean_abs(pred: impl Iterator<Item = f32>, truth: &[f32]) -> f64 {
    let sum: f64 = pred.zip(truth).map(|(p, t)| (p as f64 - *t as f64).abs()).sum();
    sum / truth.len() as f64
}

/// Per-pixel mean of the H, V and G absolute errors. Values are `≥ 0` and
/// not bounded by 1.
pub fn content_loss_map(preds: [&PositionMap; 3], truths: [&PositionMap; 3]) -> Result<PositionMap> {
    for m in preds.iter().chain(&truths[1..]) {
        same_dims("content_loss_map", truths[0], m)?;
    }
    let (h, w) = (truths[0].height(), truths[0].width());
    let values = (0..h * w)
        .map(|i| {
            let sum: f64 = (0..3)
                .map(|k| (preds[k].values()[i] as f64 - truths[k].values()[i] as f64).abs())
                .sum();
            (sum / 3.0) as f32
        })
        .collect();
    PositionMap::new(h, w, values)
}

/// Per-image scores for one (pattern, source) cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricEntry {
    pub pattern: PatternKind,
    pub source: ImageSource,
    pub spc: Vec<f64>,
    pub mae: Vec<f64>,
}

impl MetricEntry {
    pub fn spc_mean(&self) -> f64 {
        mean(&self.spc)
    }

    pub fn mae_mean(&self) -> f64 {
        mean(&self.mae)
    }

    pub fn n_images(&self) -> usize {
        self.spc.len()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores keyed by (pattern, source), kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
}

#[derive(Serialize)]
struct CsvRow<'a> {
    pattern: &'a str,
    source: &'a str,
    spc_mean: f64,
    mae_mean: f64,
    n_images: usize,
}

impl MetricReport {
    pub fn record(&mut self, pattern: PatternKind, source: ImageSource, spc: f64, mae: f64) {
        let idx = match self
            .entries
            .iter()
            .position(|e| e.pattern == pattern && e.source == source)
        {
            Some(i) => i,
            None => {
                self.entries.push(MetricEntry {
                    pattern,
                    source,
                    spc: Vec::new(),
                    mae: Vec::new(),
                });
                self.entries.len() - 1
            }
        };
        self.entries[idx].spc.push(spc);
        self.entries[idx].mae.push(mae);
    }

    pub fn get(&self, pattern: PatternKind, source: ImageSource) -> Option<&MetricEntry> {
        self.entries.iter().find(|e| e.pattern == pattern && e.source == source)
    }

    pub fn merge(&mut self, other: MetricReport) {
        for e in other.entries {
            for (s, m) in e.spc.iter().zip(&e.mae) {
                self.record(e.pattern, e.source, *s, *m);
            }
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Config(format!("{other:?}")),
        })?;
        for e in &self.entries {
            w.serialize(CsvRow {
                pattern: e.pattern.name(),
                source: e.source.name(),
                spc_mean: e.spc_mean(),
                mae_mean: e.mae_mean(),
                n_images: e.n_images(),
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(v: &[f32]) -> PositionMap {
        PositionMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spc_identity_reversal_monotone() {
        let x = map(&[0.1, 0.4, 0.2, 0.9, 0.5]);
        assert!((spc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let inc = map(&[0.0, 0.25, 0.5, 1.0]);
        let rev = map(&[1.0, 0.75, 0.5, 0.0]);
        assert!((spc(&inc, &rev).unwrap() + 1.0).abs() < 1e-12);
        let cube = map(&x.values().iter().map(|v| v * v * v).collect::<Vec<_>>());
        assert!((spc(&x, &cube).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_map_scores_zero() {
        assert_eq!(spc(&map(&[0.3; 4]), &map(&[0.0, 1.0, 2.0, 3.0])).unwrap(), 0.0);
    }

    #[test]
    fn mae_bounds_and_clamp() {
        assert_eq!(mae(&map(&[0.0; 3]), &map(&[1.0; 3])).unwrap(), 1.0);
        assert_eq!(mae(&map(&[2.0, -1.0]), &map(&[1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(mae_unclamped(&map(&[2.0, -1.0]), &map(&[1.0, 0.0])).unwrap(), 1.0);
    }

    #[test]
    fn content_loss_offset() {
        let gt = map(&[0.0, 0.5, 1.0]);
        let off = map(&[0.3, 0.8, 1.3]);
        let l = content_loss_map([&off, &gt, &gt], [&gt, &gt, &gt]).unwrap();
        for v in l.values() {
            assert!((v - 0.1).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_dims() {
        assert!(spc(&map(&[0.0, 1.0]), &map(&[0.0, 1.0, 2.0])).is_err());
    }

    #[test]
    fn report_means() {
        let mut r = MetricReport::default();
        r.record(PatternKind::H, ImageSource::Black, 0.5, 0.1);
        r.record(PatternKind::H, ImageSource::Black, 1.0, 0.3);
        let e = r.get(PatternKind::H, ImageSource::Black).unwrap();
        assert_eq!((e.spc_mean(), e.n_images()), (0.75, 2));
        assert!((e.mae_mean() - 0.2).abs() < 1e-15);
    }
}

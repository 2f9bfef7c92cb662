use std::path::Path;

use serde::Serialize;

use crate::data::ImageSource;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::patterns::PatternKind;

use super::{ExperimentConfig, ExperimentKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RowStatus {
    Ok,
    Skipped,
}

/// One line of `report.csv`: a probe's mean scores on one image source.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub model: String,
    pub variant: String,
    pub pattern: PatternKind,
    pub source: ImageSource,
    pub spc_mean: Option<f64>,
    pub mae_mean: Option<f64>,
    pub n_images: usize,
    pub param_count: usize,
    pub status: RowStatus,
    pub reason: String,
}

impl ReportRow {
    pub(super) fn from_report(model: &str, variant: &str, param_count: usize, report: &MetricReport) -> Vec<Self> {
        report
            .entries
            .iter()
            .map(|e| Self {
                model: model.to_string(),
                variant: variant.to_string(),
                pattern: e.pattern,
                source: e.source,
                spc_mean: Some(e.spc_mean()),
                mae_mean: Some(e.mae_mean()),
                n_images: e.n_images(),
                param_count,
                status: RowStatus::Ok,
                reason: String::new(),
            })
            .collect()
    }

    pub(super) fn skipped(model: &str, variant: &str, pattern: PatternKind, source: ImageSource, reason: &str) -> Self {
        Self {
            model: model.to_string(),
            variant: variant.to_string(),
            pattern,
            source,
            spc_mean: None,
            mae_mean: None,
            n_images: 0,
            param_count: 0,
            status: RowStatus::Skipped,
            reason: reason.to_string(),
        }
    }
}

/// One line of `history.csv`: an epoch of pretraining or probe training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub stage: &'static str,
    pub model: String,
    pub variant: String,
    pub pattern: Option<PatternKind>,
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// One line of the pretraining report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainRow {
    pub model: String,
    pub family: String,
    pub param_count: usize,
    pub origin: &'static str,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub train_accuracy: Option<f64>,
    pub fingerprint: String,
}

/// One line of `content_loss.csv`: the content-loss map of one image.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRow {
    pub model: String,
    pub image: String,
    pub mean_loss: f64,
    /// Mean over the four corner squares, together 10% of the pixels.
    pub corner_loss: f64,
    /// Mean over the central square holding 10% of the pixels.
    pub center_loss: f64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    kind: &'a str,
    version: &'static str,
    config: &'a ExperimentConfig,
}

pub(super) fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(super) fn write_manifest(path: &Path, kind: &str, config: &ExperimentConfig) -> Result<()> {
    let text = serde_json::to_string_pretty(&Manifest {
        kind,
        version: env!("CARGO_PKG_VERSION"),
        config,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// File-name-safe form of a label.
pub(super) fn slug(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// Everything a run produced, as also written under its output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub kind: String,
    pub rows: Vec<ReportRow>,
    pub history: Vec<HistoryRow>,
    pub pretrain: Vec<PretrainRow>,
    pub losses: Vec<LossRow>,
}

impl RunSummary {
    pub(super) fn new(kind: &str) -> Self {
        Self {
            kind: kind.to_string(),
            rows: Vec::new(),
            history: Vec::new(),
            pretrain: Vec::new(),
            losses: Vec::new(),
        }
    }

    pub fn row(&self, model: &str, variant: &str, pattern: PatternKind, source: ImageSource) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.variant == variant && r.pattern == pattern && r.source == source)
    }

    /// Mean SPC of a row that ran.
    pub fn spc(&self, model: &str, variant: &str, pattern: PatternKind, source: ImageSource) -> Option<f64> {
        self.row(model, variant, pattern, source).and_then(|r| r.spc_mean)
    }

    pub fn kind(&self) -> Option<ExperimentKind> {
        self.kind.parse().ok()
    }
}

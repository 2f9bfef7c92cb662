//! Desk-scale experiment suites. Each run trains one probe per (model,
//! variant, pattern), scores it on every configured image source and writes
//! `report.csv`, `history.csv`, `run.json` and PGM maps under the output
//! directory. Everything is derived from the config and its seed.

mod config;
mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;

use crate::data::{
    is_train_split, load_folder, synth_image, synth_scenes, synth_shapes, write_pgm, write_ptw, ImageRecord,
    ImageSource, SynthKind,
};
use crate::encoders::{ClassifierHead, Encoder, PaddingMode};
use crate::error::{Error, Result};
use crate::metrics::{content_loss_map, mae, spc, MetricReport};
use crate::patterns::{generate, PatternKind, PositionMap};
use crate::probe::{Probe, ProbeSpec};
use crate::tensor::Tensor;
use crate::training::{
    aligned_features, classifier_accuracy, predict_features, pretrain_classifier, train_probe_on_features,
};

pub use config::{derive_seed, EncoderConfig, ExperimentConfig, ExperimentKind, NaturalData, PretrainData};
pub use output::{HistoryRow, LossRow, PretrainRow, ReportRow, RowStatus, RunSummary};

use output::{slug, write_csv, write_manifest};

const STANDALONE: &str = "standalone";

struct Prepared {
    key: String,
    label: String,
    encoder: Encoder,
    origin: &'static str,
    pretrain: Vec<HistoryRow>,
    train_accuracy: Option<f64>,
}

/// A probe after training, with its predictions on the natural eval split.
pub struct TrainedProbe {
    pub model: String,
    pub variant: String,
    pub pattern: PatternKind,
    pub probe: Probe,
    pub natural_names: Vec<String>,
    pub natural_predictions: Vec<PositionMap>,
}

/// Holds a validated config plus the encoders and datasets built for it, so
/// several runs can share one pretraining.
pub struct Lab {
    config: ExperimentConfig,
    prepared: Vec<Prepared>,
    natural: BTreeMap<usize, Vec<ImageRecord>>,
}

/// Which model a probe reads from.
#[derive(Clone, Copy)]
enum Model {
    Standalone,
    Encoder(usize),
}

impl Lab {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            prepared: Vec::new(),
            natural: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    /// Replaces the patterns later runs probe for; prepared encoders are kept.
    pub fn set_patterns(&mut self, patterns: &[PatternKind]) -> Result<()> {
        if patterns.is_empty() {
            return Err(Error::Config("at least one pattern is required".into()));
        }
        self.config.patterns = patterns.to_vec();
        Ok(())
    }

    /// The frozen encoder prepared under `label`, if any run built it.
    pub fn encoder(&self, label: &str) -> Option<&Encoder> {
        self.prepared.iter().find(|p| p.label == label).map(|p| &p.encoder)
    }

    /// Runs `kind` and writes its outputs under `out`.
    pub fn run(&mut self, kind: ExperimentKind, out: &Path) -> Result<RunSummary> {
        if let Some(k) = self.config.kind {
            if k != kind {
                return Err(Error::Config(format!("config is for `{k}` but `{kind}` was requested")));
            }
        }
        create_dir(out)?;
        create_dir(&out.join("maps"))?;
        let mut run = RunSummary::new(kind.name());
        let mut used = Vec::new();
        match kind {
            ExperimentKind::Existence => self.run_existence(&mut run, &mut used, out)?,
            ExperimentKind::Layers => {
                let align = self.config.capacity_align();
                let variants = self.config.layers.iter().map(|&l| {
                    (
                        format!("L={l}"),
                        self.probe_with(|s| {
                            s.layers = l;
                            s.align_side = Some(align);
                        }),
                    )
                });
                let variants: Vec<_> = variants.collect();
                self.run_variants(&mut run, &mut used, out, variants)?
            }
            ExperimentKind::Kernels => {
                let align = self.config.capacity_align();
                let variants = self.config.kernels.iter().map(|&k| {
                    (
                        format!("k={k}"),
                        self.probe_with(|s| {
                            s.kernel = k;
                            s.layers = 1;
                            s.align_side = Some(align);
                        }),
                    )
                });
                let variants: Vec<_> = variants.collect();
                self.run_variants(&mut run, &mut used, out, variants)?
            }
            ExperimentKind::PerLayer => {
                let mut variants: Vec<_> = (1..=5)
                    .map(|t| (format!("f{t}"), self.probe_with(|s| s.taps = Some(vec![t]))))
                    .collect();
                variants.push(("all".to_string(), self.probe_with(|s| s.taps = None)));
                self.run_variants(&mut run, &mut used, out, variants)?
            }
            ExperimentKind::Padding => self.run_padding(&mut run, &mut used, out)?,
            ExperimentKind::Heatmap => self.run_heatmap(&mut run, &mut used, out)?,
            ExperimentKind::Pretrain => self.run_pretrain(&mut used)?,
        }
        self.finish(kind.name(), run, &used, out)
    }

    /// Trains one probe per pattern on the first encoder (or on raw images
    /// when the configured probe is standalone) and saves every probe as PTW
    /// under `out/probes`.
    pub fn run_probe(&mut self, out: &Path) -> Result<(RunSummary, Vec<TrainedProbe>)> {
        create_dir(out)?;
        create_dir(&out.join("maps"))?;
        create_dir(&out.join("probes"))?;
        let mut run = RunSummary::new("probe");
        let mut used = Vec::new();
        let spec = self.config.probe.clone();
        let model = if spec.standalone || self.config.encoders.is_empty() {
            Model::Standalone
        } else {
            let ec = self.config.encoders[0].clone();
            Model::Encoder(self.prepare(&ec, &mut used)?)
        };
        let spec = ProbeSpec {
            standalone: matches!(model, Model::Standalone),
            ..spec
        };
        let patterns = self.config.patterns.clone();
        let trained = self.probe_model(&mut run, out, model, &spec, "default", &patterns)?;
        for t in &trained {
            let path = out
                .join("probes")
                .join(format!("{}__{}.ptw", slug(&t.model), t.pattern.name()));
            write_ptw(&t.probe.to_ptw()?, &path)?;
        }
        let summary = self.finish("probe", run, &used, out)?;
        Ok((summary, trained))
    }

    fn probe_with(&self, f: impl FnOnce(&mut ProbeSpec)) -> ProbeSpec {
        let mut s = ProbeSpec {
            standalone: false,
            ..self.config.probe.clone()
        };
        f(&mut s);
        s
    }

    fn run_existence(&mut self, run: &mut RunSummary, used: &mut Vec<usize>, out: &Path) -> Result<()> {
        let patterns = self.config.patterns.clone();
        let standalone = ProbeSpec {
            standalone: true,
            ..self.config.probe.clone()
        };
        self.probe_model(run, out, Model::Standalone, &standalone, "default", &patterns)?;
        let spec = self.probe_with(|_| {});
        for ec in self.config.encoders.clone() {
            let idx = self.prepare(&ec, used)?;
            self.probe_model(run, out, Model::Encoder(idx), &spec, "default", &patterns)?;
        }
        Ok(())
    }

    /// Probe variants on the first configured encoder.
    fn run_variants(
        &mut self,
        run: &mut RunSummary,
        used: &mut Vec<usize>,
        out: &Path,
        variants: Vec<(String, ProbeSpec)>,
    ) -> Result<()> {
        let ec = self
            .config
            .encoders
            .first()
            .cloned()
            .ok_or_else(|| Error::Config("this experiment needs at least one encoder".into()))?;
        let idx = self.prepare(&ec, used)?;
        let patterns = self.config.patterns.clone();
        for (name, spec) in variants {
            self.probe_model(run, out, Model::Encoder(idx), &spec, &name, &patterns)?;
        }
        Ok(())
    }

    fn run_padding(&mut self, run: &mut RunSummary, used: &mut Vec<usize>, out: &Path) -> Result<()> {
        let patterns = self.config.patterns.clone();
        for p in self.config.probe_paddings.clone() {
            let spec = ProbeSpec {
                standalone: true,
                padding: p,
                ..self.config.probe.clone()
            };
            self.probe_model(run, out, Model::Standalone, &spec, &format!("p={p}"), &patterns)?;
        }
        let spec = self.probe_with(|_| {});
        for base in self.config.padding_encoders.clone() {
            for (variant, padding) in [("zero-padding", PaddingMode::Zero), ("no-padding", PaddingMode::None)] {
                let ec = EncoderConfig {
                    padding,
                    ..base.clone()
                };
                match ec.spec(self.config.side).validate() {
                    Err(Error::Unsupported(reason)) => {
                        info!("padding: skipping {} {variant}: {reason}", base.label());
                        for &pattern in &patterns {
                            for &source in &self.config.sources {
                                run.rows
                                    .push(ReportRow::skipped(&base.label(), variant, pattern, source, &reason));
                            }
                        }
                        continue;
                    }
                    other => other?,
                }
                let idx = self.prepare_as(&ec, &format!("{}-{variant}", base.label()), used)?;
                self.probe_model_as(run, out, Model::Encoder(idx), &base.label(), &spec, variant, &patterns)?;
            }
        }
        Ok(())
    }

    fn run_heatmap(&mut self, run: &mut RunSummary, used: &mut Vec<usize>, out: &Path) -> Result<()> {
        let hvg = [PatternKind::H, PatternKind::V, PatternKind::G];
        if !self.config.sources.contains(&ImageSource::Natural) {
            return Err(Error::Config("heatmap needs the natural image source".into()));
        }
        let mut models = vec![(
            Model::Standalone,
            ProbeSpec {
                standalone: true,
                ..self.config.probe.clone()
            },
        )];
        for ec in self.config.encoders.clone() {
            let idx = self.prepare(&ec, used)?;
            models.push((Model::Encoder(idx), self.probe_with(|_| {})));
        }
        for (model, spec) in models {
            let trained = self.probe_model(run, out, model, &spec, "default", &hvg)?;
            let label = trained[0].model.clone();
            let side = self.side_of(model);
            let gts: Vec<PositionMap> = hvg.iter().map(|&k| generate(k, side, side)).collect();
            for (i, name) in trained[0].natural_names.iter().enumerate() {
                let preds = [0, 1, 2].map(|j| &trained[j].natural_predictions[i]);
                let map = content_loss_map(preds, [&gts[0], &gts[1], &gts[2]])?;
                let (corner, center) = corner_center_means(&map);
                run.losses.push(LossRow {
                    model: label.clone(),
                    image: name.clone(),
                    mean_loss: map.mean(),
                    corner_loss: corner,
                    center_loss: center,
                });
                let path = out
                    .join("maps")
                    .join(format!("loss__{}__{}.pgm", slug(&label), slug(name)));
                write_pgm(&map.normalized_for_display(), &path)?;
            }
        }
        write_csv(&out.join("content_loss.csv"), &run.losses)
    }

    fn run_pretrain(&mut self, used: &mut Vec<usize>) -> Result<()> {
        for ec in self.config.encoders.clone() {
            self.prepare(&ec, used)?;
        }
        Ok(())
    }

    /// Writes the shared outputs and returns the summary.
    fn finish(&self, kind: &str, mut run: RunSummary, used: &[usize], out: &Path) -> Result<RunSummary> {
        let mut history = Vec::new();
        for &i in used {
            let p = &self.prepared[i];
            history.extend(p.pretrain.iter().cloned());
            let (epochs, final_loss) = (p.pretrain.len(), p.pretrain.last().map(|h| h.loss));
            run.pretrain.push(PretrainRow {
                model: p.label.clone(),
                family: p.encoder.spec().family.name().to_string(),
                param_count: p.encoder.param_count(),
                origin: p.origin,
                epochs,
                final_loss,
                train_accuracy: p.train_accuracy,
                fingerprint: p.encoder.weight_fingerprint(),
            });
            if p.origin == "pretrained" {
                create_dir(&out.join("weights"))?;
                write_ptw(
                    &p.encoder.to_ptw()?,
                    out.join("weights").join(format!("{}.ptw", slug(&p.label))),
                )?;
            }
        }
        history.append(&mut run.history);
        run.history = history;
        if kind == ExperimentKind::Pretrain.name() {
            write_csv(&out.join("report.csv"), &run.pretrain)?;
        } else {
            write_csv(&out.join("report.csv"), &run.rows)?;
        }
        write_csv(&out.join("history.csv"), &run.history)?;
        write_manifest(&out.join("run.json"), kind, &self.config)?;
        Ok(run)
    }

    fn prepare(&mut self, ec: &EncoderConfig, used: &mut Vec<usize>) -> Result<usize> {
        self.prepare_as(ec, &ec.label(), used)
    }

    /// Loads or pretrains the encoder for `ec` once per lab; returns its index.
    fn prepare_as(&mut self, ec: &EncoderConfig, label: &str, used: &mut Vec<usize>) -> Result<usize> {
        let spec = ec.spec(self.config.side);
        let key = format!("{label}|{}|{:?}", serde_json::to_string(&spec)?, ec.weights);
        if let Some(i) = self.prepared.iter().position(|p| p.key == key) {
            if !used.contains(&i) {
                used.push(i);
            }
            return Ok(i);
        }
        let seed = self.config.seed;
        let prepared = match &ec.weights {
            Some(path) => {
                info!("loading encoder {label} from {}", path.display());
                let encoder = Encoder::from_ptw_path(spec, path)?;
                Prepared {
                    key,
                    label: label.to_string(),
                    encoder,
                    origin: "loaded",
                    pretrain: Vec::new(),
                    train_accuracy: None,
                }
            }
            None => {
                let data = &self.config.pretrain_data;
                let shapes = synth_shapes(data.count, spec.input_side, data.classes, data.seed)?;
                let mut encoder = Encoder::build(spec, derive_seed(seed, &format!("encoder/{label}")))?;
                let mut head =
                    ClassifierHead::new(&encoder, data.classes, derive_seed(seed, &format!("head/{label}")))?;
                let cfg = crate::training::TrainConfig {
                    seed: derive_seed(seed, &format!("pretrain/{label}")),
                    ..self.config.pretrain
                };
                info!("pretraining {label} on {} shapes", shapes.len());
                let hist = pretrain_classifier(&mut encoder, &mut head, &shapes, &cfg)?;
                let acc = classifier_accuracy(&encoder, &head, &shapes)?;
                info!("pretrained {label}: train accuracy {acc:.3}");
                encoder.freeze();
                let pretrain = hist
                    .epoch_loss
                    .iter()
                    .zip(&hist.epoch_accuracy)
                    .enumerate()
                    .map(|(e, (&loss, &accuracy))| HistoryRow {
                        stage: "pretrain",
                        model: label.to_string(),
                        variant: String::new(),
                        pattern: None,
                        epoch: e + 1,
                        loss,
                        accuracy: Some(accuracy),
                    })
                    .collect();
                Prepared {
                    key,
                    label: label.to_string(),
                    encoder,
                    origin: "pretrained",
                    pretrain,
                    train_accuracy: Some(acc),
                }
            }
        };
        self.prepared.push(prepared);
        let i = self.prepared.len() - 1;
        used.push(i);
        Ok(i)
    }

    fn side_of(&self, model: Model) -> usize {
        match model {
            Model::Standalone => self.config.side,
            Model::Encoder(i) => self.prepared[i].encoder.spec().input_side,
        }
    }

    fn load_natural(&mut self, side: usize) -> Result<()> {
        if self.natural.contains_key(&side) {
            return Ok(());
        }
        let n = &self.config.natural;
        let records = match &n.folder {
            Some(dir) => load_folder(dir, side)?,
            None => synth_scenes(n.count, side, n.seed)?,
        };
        self.natural.insert(side, records);
        Ok(())
    }

    fn probe_model(
        &mut self,
        run: &mut RunSummary,
        out: &Path,
        model: Model,
        spec: &ProbeSpec,
        variant: &str,
        patterns: &[PatternKind],
    ) -> Result<Vec<TrainedProbe>> {
        let label = match model {
            Model::Standalone => STANDALONE.to_string(),
            Model::Encoder(i) => self.prepared[i].label.clone(),
        };
        self.probe_model_as(run, out, model, &label, spec, variant, patterns)
    }

    /// Trains one probe per pattern for `model`, evaluates it on every source
    /// and records rows, history and maps under `label`.
    #[allow(clippy::too_many_arguments)]
    fn probe_model_as(
        &mut self,
        run: &mut RunSummary,
        out: &Path,
        model: Model,
        label: &str,
        spec: &ProbeSpec,
        variant: &str,
        patterns: &[PatternKind],
    ) -> Result<Vec<TrainedProbe>> {
        let side = self.side_of(model);
        self.load_natural(side)?;
        let seed = self.config.seed;
        let natural = &self.natural[&side];
        let (train, eval): (Vec<&ImageRecord>, Vec<&ImageRecord>) =
            natural.iter().partition(|r| is_train_split(&r.name()));
        if train.is_empty() || eval.is_empty() {
            return Err(Error::Config(format!(
                "natural split is degenerate: {} train, {} eval images",
                train.len(),
                eval.len()
            )));
        }
        let train: Vec<ImageRecord> = train.into_iter().cloned().collect();
        let eval: Vec<ImageRecord> = eval.into_iter().cloned().collect();
        let encoder = match model {
            Model::Standalone => None,
            Model::Encoder(i) => Some(&self.prepared[i].encoder),
        };
        if let Some(enc) = encoder {
            if !enc.is_frozen() {
                return Err(Error::Contract(format!("encoder {label} must be frozen for probing")));
            }
        }
        let build = |s: u64| -> Result<Probe> {
            match encoder {
                Some(enc) => Probe::for_encoder(spec.clone(), enc.spec(), s),
                None => {
                    let align = spec.align_for(side);
                    Probe::build(spec.clone(), 3, align, s)
                }
            }
        };
        let template = build(0)?;
        let train_features = aligned_features(encoder, &template, &train)?;

        let mut eval_sets: Vec<(ImageSource, Vec<String>, Vec<Tensor>)> = Vec::new();
        for &source in &self.config.sources {
            let records = match source {
                ImageSource::Natural => eval.clone(),
                ImageSource::Black => vec![synth_image(SynthKind::Black, side, 0)],
                ImageSource::White => vec![synth_image(SynthKind::White, side, 0)],
                ImageSource::Noise => (0..self.config.noise_count)
                    .map(|i| synth_image(SynthKind::Noise, side, derive_seed(seed, &format!("noise/{i}"))))
                    .collect(),
            };
            let names = records.iter().map(|r| r.name()).collect();
            eval_sets.push((source, names, aligned_features(encoder, &template, &records)?));
        }

        let mut trained = Vec::with_capacity(patterns.len());
        for &pattern in patterns {
            let tag = format!("{label}/{variant}/{pattern}");
            let mut probe = build(derive_seed(seed, &format!("probe/{tag}")))?;
            let cfg = crate::training::TrainConfig {
                seed: derive_seed(seed, &format!("shuffle/{tag}")),
                ..self.config.probe_train
            };
            let mut hist = train_probe_on_features(&mut probe, &train_features, side, pattern, &cfg)?;
            let gt = generate(pattern, side, side);
            let mut report = MetricReport::default();
            let mut natural_predictions = Vec::new();
            let mut natural_names = Vec::new();
            for (source, names, features) in &eval_sets {
                let preds = predict_features(&probe, features, side)?;
                for (i, (p, name)) in preds.iter().zip(names).enumerate() {
                    report.record(pattern, *source, spc(p, &gt)?, mae(p, &gt)?);
                    if i < self.config.maps_per_source {
                        let file = format!(
                            "{}__{}__{}__{}__{}.pgm",
                            slug(label),
                            slug(variant),
                            pattern.name(),
                            source.name(),
                            slug(name)
                        );
                        write_pgm(p, out.join("maps").join(file))?;
                    }
                }
                if *source == ImageSource::Natural {
                    natural_predictions = preds;
                    natural_names = names.clone();
                }
            }
            if let Some(e) = report.get(pattern, ImageSource::Natural) {
                info!("{tag}: natural SPC {:.3} MAE {:.3}", e.spc_mean(), e.mae_mean());
            }
            run.rows
                .extend(ReportRow::from_report(label, variant, probe.param_count(), &report));
            for (e, &loss) in hist.epoch_loss.iter().enumerate() {
                run.history.push(HistoryRow {
                    stage: "probe",
                    model: label.to_string(),
                    variant: variant.to_string(),
                    pattern: Some(pattern),
                    epoch: e + 1,
                    loss,
                    accuracy: None,
                });
            }
            hist.report = report;
            trained.push(TrainedProbe {
                model: label.to_string(),
                variant: variant.to_string(),
                pattern,
                probe,
                natural_names,
                natural_predictions,
            });
        }
        Ok(trained)
    }
}

/// Runs `kind` with a fresh lab.
pub fn run_experiment(config: ExperimentConfig, kind: ExperimentKind, out: &Path) -> Result<RunSummary> {
    Lab::new(config)?.run(kind, out)
}

/// Writes every ground-truth pattern at `side` as `{pattern}.pgm` under `out`.
pub fn write_patterns(patterns: &[PatternKind], side: usize, out: &Path) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    patterns
        .iter()
        .map(|&k| {
            let path = out.join(format!("{}.pgm", k.name()));
            write_pgm(&generate(k, side, side), &path)?;
            Ok(path)
        })
        .collect()
}

/// Mean of `map` over its four corner squares (together 10% of the pixels)
/// and over the central square holding 10% of the pixels.
pub fn corner_center_means(map: &PositionMap) -> (f64, f64) {
    let (h, w) = (map.height(), map.width());
    let side = |n: usize, frac: f64| ((n as f64 * frac.sqrt()).round() as usize).clamp(1, n);
    let (ch, cw) = (side(h, 0.025), side(w, 0.025));
    let (mh, mw) = (side(h, 0.1), side(w, 0.1));
    let (r0, c0) = ((h - mh) / 2, (w - mw) / 2);
    let (mut corner, mut nc, mut center, mut nm) = (0.0f64, 0usize, 0.0f64, 0usize);
    for r in 0..h {
        for c in 0..w {
            let v = map.get(r, c) as f64;
            if (r < ch || r >= h - ch) && (c < cw || c >= w - cw) {
                corner += v;
                nc += 1;
            }
            if (r0..r0 + mh).contains(&r) && (c0..c0 + mw).contains(&c) {
                center += v;
                nm += 1;
            }
        }
    }
    (corner / nc as f64, center / nm as f64)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

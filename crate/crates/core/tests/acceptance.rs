//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! fails. Runs the desk-scale experiments with the default configuration, so
//! expect roughly ten minutes on one core.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use padprobe::data::ptw::{PtwError, PtwFile};
use padprobe::data::ImageSource;
use padprobe::encoders::{Encoder, EncoderSpec};
use padprobe::experiments::{ExperimentConfig, ExperimentKind, Lab, RunSummary};
use padprobe::metrics::{content_loss_map, mae, spc};
use padprobe::patterns::{generate, generate_with, PatternKind, PatternParams, PositionMap};
use padprobe::tensor::gradcheck::{grad_check, GradCheckOp};

type Outcome = Result<String, String>;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, outcome: Outcome) {
        match outcome {
            Ok(detail) => println!("PASS [{id:>2}] {name}: {detail}"),
            Err(detail) => {
                self.failures += 1;
                println!("FAIL [{id:>2}] {name}: {detail}");
            }
        }
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let mut report = Report { failures: 0 };
    report.line(1, "gradient correctness", gradients());
    report.line(2, "metric oracles", metric_oracles());
    report.line(3, "pattern invariants", pattern_invariants());
    report.line(6, "PTW round trip", ptw_round_trip());
    report.line(5, "determinism", determinism());

    let dir = tempfile::tempdir().expect("temp dir");
    let runs = Runs::execute(dir.path());
    report.line(4, "freeze contract", runs.freeze());
    report.line(7, "existence", runs.existence());
    report.line(8, "padding", runs.padding());
    report.line(9, "depth", runs.depth());
    report.line(10, "capacity", runs.capacity());
    report.line(11, "difficulty", runs.difficulty());

    println!("acceptance: {} of 11 criteria failed", report.failures);
    if report.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn gradients() -> Outcome {
    let cases: &[(GradCheckOp, &[usize])] = &[
        (
            GradCheckOp::Conv2d {
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            &[1, 2, 5, 5],
        ),
        (
            GradCheckOp::Conv2d {
                out_channels: 2,
                kernel: 3,
                stride: 2,
                padding: 0,
            },
            &[2, 2, 6, 6],
        ),
        (
            GradCheckOp::Conv2d {
                out_channels: 2,
                kernel: 1,
                stride: 1,
                padding: 2,
            },
            &[1, 3, 3, 4],
        ),
        (GradCheckOp::Relu, &[1, 2, 3, 3]),
        (GradCheckOp::MaxPool2, &[1, 2, 4, 6]),
        (GradCheckOp::BilinearResize { out_h: 5, out_w: 7 }, &[1, 2, 3, 4]),
        (GradCheckOp::BilinearResize { out_h: 2, out_w: 3 }, &[1, 2, 5, 6]),
        (GradCheckOp::ConcatChannels { other_channels: 2 }, &[1, 3, 3, 3]),
        (GradCheckOp::Affine { out_features: 3 }, &[2, 5]),
        (GradCheckOp::SoftmaxXent, &[3, 4]),
        (GradCheckOp::MseHalf, &[2, 3]),
        (GradCheckOp::Add, &[1, 2, 3, 3]),
        (GradCheckOp::GlobalAvgPool, &[2, 3, 3, 3]),
        (GradCheckOp::ScaleChannels, &[2, 3, 2, 2]),
    ];
    let start = Instant::now();
    let mut worst = (0.0f64, String::new());
    for (op, dims) in cases {
        for seed in 0..5 {
            let err = grad_check(*op, dims, 1e-3, seed).map_err(|e| format!("{op:?}: {e}"))?;
            if err > worst.0 {
                worst = (err, format!("{op:?}"));
            }
        }
    }
    let took = start.elapsed();
    check(
        worst.0 < 1e-3 && took < Duration::from_secs(60),
        format!(
            "{} cases x 5 seeds, worst relative error {:.2e} ({}), {:.1}s",
            cases.len(),
            worst.0,
            worst.1,
            took.as_secs_f64()
        ),
    )
}

/// Ranks by counting: smaller values plus half of the ties, 1-based.
fn oracle_ranks(v: &[f32]) -> Vec<f64> {
    v.iter()
        .map(|&x| {
            let less = v.iter().filter(|&&y| y < x).count() as f64;
            let equal = v.iter().filter(|&&y| y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn oracle_spc(a: &[f32], b: &[f32]) -> f64 {
    let (ra, rb) = (oracle_ranks(a), oracle_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

fn random_map(h: usize, w: usize, levels: Option<u32>, rng: &mut ChaCha8Rng) -> PositionMap {
    PositionMap::from_fn(h, w, |_, _| match levels {
        Some(l) => rng.gen_range(0..l) as f32 / l as f32,
        None => rng.gen_range(-0.5..1.5),
    })
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut spc_err, mut mae_err, mut loss_err) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..100 {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(2..12));
        // a third continuous, the rest with heavy ties, a few constant
        let levels = match i % 3 {
            0 => None,
            _ => Some(rng.gen_range(1..6)),
        };
        let a = random_map(h, w, levels, &mut rng);
        let b = random_map(h, w, levels, &mut rng);
        let got = spc(&a, &b).map_err(|e| e.to_string())?;
        spc_err = spc_err.max((got - oracle_spc(a.values(), b.values())).abs());

        let mut sum = 0.0f64;
        for (p, t) in a.values().iter().zip(b.values()) {
            let p = p.clamp(0.0, 1.0);
            sum += (p as f64 - *t as f64).abs();
        }
        let got = mae(&a, &b).map_err(|e| e.to_string())?;
        mae_err = mae_err.max((got - sum / a.values().len() as f64).abs());

        let preds = [0, 1, 2].map(|_| random_map(h, w, None, &mut rng));
        let truths = [PatternKind::H, PatternKind::V, PatternKind::G].map(|k| generate(k, h, w));
        let map = content_loss_map([&preds[0], &preds[1], &preds[2]], [&truths[0], &truths[1], &truths[2]])
            .map_err(|e| e.to_string())?;
        for r in 0..h {
            for c in 0..w {
                let mut total = 0.0f64;
                for k in 0..3 {
                    total += (preds[k].get(r, c) as f64 - truths[k].get(r, c) as f64).abs();
                }
                loss_err = loss_err.max((map.get(r, c) as f64 - total / 3.0).abs());
            }
        }
    }
    check(
        spc_err <= 1e-6 && mae_err <= 1e-6 && loss_err <= 1e-6,
        format!("100 random pairs, max deviation spc {spc_err:.1e}, mae {mae_err:.1e}, content loss {loss_err:.1e}"),
    )
}

fn bounds_attained(m: &PositionMap) -> bool {
    let lo = m.values().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = m.values().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    lo == 0.0 && hi == 1.0
}

fn pattern_invariants() -> Outcome {
    let mut checked = 0usize;
    for h in 1..=20 {
        for w in 1..=20 {
            for periods in 1..=5 {
                let p = PatternParams {
                    periods,
                    ..Default::default()
                };
                let maps: Vec<PositionMap> = PatternKind::ALL.iter().map(|&k| generate_with(k, h, w, p)).collect();
                let [mh, mv, mg, mhs, mvs] = [0, 1, 2, 3, 4].map(|i| &maps[i]);
                let at = |kind, hh, ww| generate_with(kind, hh, ww, p);
                if mh.transpose() != at(PatternKind::V, w, h) || mhs.transpose() != at(PatternKind::VS, w, h) {
                    return Err(format!("H/V transpose mismatch at {h}x{w}, {periods} periods"));
                }
                if mg.flip_horizontal() != *mg || mg.flip_vertical() != *mg {
                    return Err(format!("Gaussian not flip symmetric at {h}x{w}"));
                }
                if maps.iter().flat_map(|m| m.values()).any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(format!("value outside [0, 1] at {h}x{w}"));
                }
                let width = w.div_ceil(periods);
                for r in 0..h {
                    for c in 0..w.saturating_sub(width) {
                        if mhs.get(r, c) != mhs.get(r, c + width) {
                            return Err(format!("HS not periodic at {h}x{w}, {periods} periods"));
                        }
                    }
                }
                let row_width = h.div_ceil(periods);
                for r in 0..h.saturating_sub(row_width) {
                    if mvs.get(r, 0) != mvs.get(r + row_width, 0) {
                        return Err(format!("VS not periodic at {h}x{w}, {periods} periods"));
                    }
                }
                let attained = [
                    (w >= 2, mh),
                    (h >= 2, mv),
                    (h.max(w) >= 3, mg),
                    (width >= 2, mhs),
                    (row_width >= 2, mvs),
                ];
                if attained.iter().any(|(due, m)| *due && !bounds_attained(m)) {
                    return Err(format!("bounds not attained at {h}x{w}, {periods} periods"));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} size/period combinations, all exact"))
}

fn ptw_round_trip() -> Outcome {
    let err = |e: padprobe::Error| e.to_string();
    let mut spec = EncoderSpec::tiny_vgg();
    spec.input_side = 32;
    let encoder = Encoder::build(spec, 5).map_err(err)?;
    let bytes = encoder.to_ptw().map_err(err)?.to_bytes().map_err(|e| e.to_string())?;
    let back = PtwFile::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let again = back.to_bytes().map_err(|e| e.to_string())?;
    if again != bytes {
        return Err("second write differs from the first".into());
    }
    // flip one bit in every payload byte of the first tensor, then anywhere
    let name_len = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let ndim = bytes[12 + name_len + 1] as usize;
    let payload = 12 + name_len + 2 + 4 * ndim;
    let mut crc_errors = 0;
    for pos in payload..payload + 64 {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x10;
        match PtwFile::from_bytes(&bad) {
            Err(PtwError::ChecksumMismatch { .. }) => crc_errors += 1,
            other => return Err(format!("flip at byte {pos} gave {other:?}")),
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..200 {
        let mut bad = bytes.clone();
        let pos = rng.gen_range(0..bad.len());
        bad[pos] ^= 1 << rng.gen_range(0..8);
        if PtwFile::from_bytes(&bad).is_ok() {
            return Err(format!("flip at byte {pos} was accepted"));
        }
    }
    Ok(format!(
        "{} bytes rewritten identically; {crc_errors} payload flips gave CRC errors; 200 random flips rejected",
        bytes.len()
    ))
}

/// Existence at reduced data size, run twice from scratch into two folders.
fn determinism() -> Outcome {
    let mut config = ExperimentConfig::default();
    config.pretrain_data.count = 48;
    config.pretrain.epochs = 2;
    config.probe_train.epochs = 3;
    config.natural.count = 60;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        Lab::new(config.clone())
            .and_then(|mut lab| lab.run(ExperimentKind::Existence, d.path()))
            .map_err(|e| e.to_string())?;
    }
    let files = list_files(dirs[0].path());
    if files.is_empty() || files != list_files(dirs[1].path()) {
        return Err("the two runs wrote different file sets".into());
    }
    for rel in &files {
        let a = fs::read(dirs[0].path().join(rel)).unwrap();
        let b = fs::read(dirs[1].path().join(rel)).unwrap();
        if a != b {
            return Err(format!("{rel} differs between runs"));
        }
    }
    let maps = files.iter().filter(|f| f.starts_with("maps/")).count();
    check(
        maps > 0,
        format!("report.csv, history.csv, weights and {maps} maps byte-identical"),
    )
}

fn list_files(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    out.sort();
    out
}

/// The default-config runs shared by the experiment criteria.
struct Runs {
    vgg: String,
    resnet: String,
    padded: String,
    fingerprints_before: Vec<(String, String)>,
    fingerprints_after: Vec<(String, String)>,
    existence_time: Duration,
    existence: Result<RunSummary, String>,
    padding: Result<RunSummary, String>,
    per_layer: Result<RunSummary, String>,
    layers: Result<RunSummary, String>,
    kernels: Result<RunSummary, String>,
}

impl Runs {
    fn execute(root: &Path) -> Self {
        let config = ExperimentConfig::default();
        let vgg = config.encoders[0].label();
        let resnet = config.encoders[1].label();
        let padded = config.padding_encoders[0].label();
        let mut lab = Lab::new(config).expect("default config is valid");
        let fingerprints = |lab: &Lab| -> Vec<(String, String)> {
            [&vgg, &resnet]
                .iter()
                .filter_map(|l| lab.encoder(l).map(|e| (l.to_string(), e.weight_fingerprint())))
                .collect()
        };
        let run = |lab: &mut Lab, kind: ExperimentKind, patterns: &[PatternKind]| {
            lab.set_patterns(patterns).map_err(|e| e.to_string())?;
            lab.run(kind, &root.join(kind.name())).map_err(|e| e.to_string())
        };

        let start = Instant::now();
        let pretrain = run(&mut lab, ExperimentKind::Pretrain, &[PatternKind::H]);
        let fingerprints_before = fingerprints(&lab);
        let hv = [PatternKind::H, PatternKind::V, PatternKind::HS, PatternKind::VS];
        let existence = pretrain.and_then(|_| run(&mut lab, ExperimentKind::Existence, &hv));
        let existence_time = start.elapsed();
        let h = [PatternKind::H];
        let padding = run(&mut lab, ExperimentKind::Padding, &h);
        let per_layer = run(&mut lab, ExperimentKind::PerLayer, &h);
        let layers = run(&mut lab, ExperimentKind::Layers, &h);
        let kernels = run(&mut lab, ExperimentKind::Kernels, &h);
        let fingerprints_after = fingerprints(&lab);
        Self {
            vgg,
            resnet,
            padded,
            fingerprints_before,
            fingerprints_after,
            existence_time,
            existence,
            padding,
            per_layer,
            layers,
            kernels,
        }
    }

    fn freeze(&self) -> Outcome {
        check(
            self.fingerprints_before.len() == 2 && self.fingerprints_before == self.fingerprints_after,
            format!(
                "fingerprints after every probe run: {}",
                self.fingerprints_after
                    .iter()
                    .map(|(l, f)| format!("{l} {}", &f[..12.min(f.len())]))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
        )
    }

    fn existence(&self) -> Outcome {
        let run = self.existence.as_ref()?;
        let (sa, vgg, res) = (
            nat(run, "standalone", "default", PatternKind::H)?,
            nat(run, &self.vgg, "default", PatternKind::H)?,
            nat(run, &self.resnet, "default", PatternKind::H)?,
        );
        let secs = self.existence_time.as_secs_f64();
        check(
            sa <= 0.2 && vgg >= 0.6 && res >= vgg - 0.1 && secs <= 900.0,
            format!(
                "SPC(H) standalone {sa:.3}, {} {vgg:.3}, {} {res:.3}; {secs:.0}s with pretraining",
                self.vgg, self.resnet
            ),
        )
    }

    fn padding(&self) -> Outcome {
        let run = self.padding.as_ref()?;
        let p = [0, 1, 2].map(|p| nat(run, "standalone", &format!("p={p}"), PatternKind::H));
        let [p0, p1, p2] = [p[0].clone()?, p[1].clone()?, p[2].clone()?];
        let zero = nat(run, &self.padded, "zero-padding", PatternKind::H)?;
        let none = nat(run, &self.padded, "no-padding", PatternKind::H)?;
        check(
            p1 - p0 >= 0.05 && p2 - p1 >= 0.05 && zero - none >= 0.2,
            format!(
                "standalone p=0/1/2 {p0:.3}/{p1:.3}/{p2:.3}; {} padded {zero:.3} vs unpadded {none:.3}",
                self.padded
            ),
        )
    }

    fn depth(&self) -> Outcome {
        let run = self.per_layer.as_ref()?;
        let f1 = nat(run, &self.vgg, "f1", PatternKind::H)?;
        let f5 = nat(run, &self.vgg, "f5", PatternKind::H)?;
        check(f5 > f1, format!("SPC(H) from tap 1 {f1:.3}, tap 5 {f5:.3}"))
    }

    fn capacity(&self) -> Outcome {
        let (kr, lr) = (self.kernels.as_ref()?, self.layers.as_ref()?);
        let k1 = nat(kr, &self.vgg, "k=1", PatternKind::H)?;
        let k7 = nat(kr, &self.vgg, "k=7", PatternKind::H)?;
        let l1 = nat(lr, &self.vgg, "L=1", PatternKind::H)?;
        let l3 = nat(lr, &self.vgg, "L=3", PatternKind::H)?;
        check(
            k7 >= k1 && l3 >= l1 - 0.05,
            format!("SPC(H) k=1 {k1:.3}, k=7 {k7:.3}; L=1 {l1:.3}, L=3 {l3:.3}"),
        )
    }

    fn difficulty(&self) -> Outcome {
        let run = self.existence.as_ref()?;
        let [h, v, hs, vs] = [PatternKind::H, PatternKind::V, PatternKind::HS, PatternKind::VS]
            .map(|k| nat(run, &self.vgg, "default", k));
        let [h, v, hs, vs] = [h?, v?, hs?, vs?];
        check(
            hs < h && vs < v,
            format!("{} SPC H {h:.3} vs HS {hs:.3}; V {v:.3} vs VS {vs:.3}", self.vgg),
        )
    }
}

/// Mean SPC on the natural eval split.
fn nat(run: &RunSummary, model: &str, variant: &str, pattern: PatternKind) -> Result<f64, String> {
    run.spc(model, variant, pattern, ImageSource::Natural)
        .ok_or_else(|| format!("no natural {pattern} row for {model} {variant}"))
}

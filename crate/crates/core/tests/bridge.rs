//! Loading weights written by an outside exporter. The exporter is played by
//! a naive f64 reference network that fills in `ref.input` and `ref.tap*`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use padprobe::data::ptw::{read_ptw, write_ptw, PtwFile};
use padprobe::encoders::{Encoder, EncoderSpec};
use padprobe::{Error, Tensor};

const SIDE: usize = 32;
const CHANNELS: [usize; 5] = [4, 6, 8, 8, 8];
const CONVS: [usize; 5] = [2, 2, 3, 3, 3];
const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// `[c][h][w]` activations of one image.
type Act = Vec<Vec<Vec<f64>>>;

#[allow(clippy::needless_range_loop)]
fn conv3_relu(x: &Act, w: &[f64], b: &[f64], out_c: usize) -> Act {
    let (in_c, h, wd) = (x.len(), x[0].len(), x[0][0].len());
    let mut y = vec![vec![vec![0.0; wd]; h]; out_c];
    for o in 0..out_c {
        for r in 0..h {
            for c in 0..wd {
                let mut acc = b[o];
                for i in 0..in_c {
                    for kr in 0..3 {
                        for kc in 0..3 {
                            let (rr, cc) = (r as isize + kr as isize - 1, c as isize + kc as isize - 1);
                            if rr < 0 || cc < 0 || rr >= h as isize || cc >= wd as isize {
                                continue;
                            }
                            acc += w[((o * in_c + i) * 3 + kr) * 3 + kc] * x[i][rr as usize][cc as usize];
                        }
                    }
                }
                y[o][r][c] = acc.max(0.0);
            }
        }
    }
    y
}

fn pool2(x: &Act) -> Act {
    x.iter()
        .map(|plane| {
            (0..plane.len() / 2)
                .map(|r| {
                    (0..plane[0].len() / 2)
                        .map(|c| {
                            let v = [
                                plane[2 * r][2 * c],
                                plane[2 * r][2 * c + 1],
                                plane[2 * r + 1][2 * c],
                                plane[2 * r + 1][2 * c + 1],
                            ];
                            v.into_iter().fold(f64::NEG_INFINITY, f64::max)
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn to_tensor(x: &Act) -> Tensor {
    let (c, h, w) = (x.len(), x[0].len(), x[0][0].len());
    Tensor::from_fn(&[1, c, h, w], |i| {
        let (ci, r, cc) = (i / (h * w), (i / w) % h, i % w);
        x[ci][r][cc] as f32
    })
}

/// A PTW file as an exporter would write it, with reference taps.
fn exported(seed: u64) -> PtwFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut file = PtwFile::new();
    let image: Vec<f32> = (0..3 * SIDE * SIDE).map(|_| rng.gen_range(0.0..1.0)).collect();
    file.push_tensor("ref.input", &Tensor::new(&[1, 3, SIDE, SIDE], image.clone()).unwrap())
        .unwrap();

    let plane = SIDE * SIDE;
    let mut x: Act = (0..3)
        .map(|c| {
            (0..SIDE)
                .map(|r| {
                    (0..SIDE)
                        .map(|col| (image[c * plane + r * SIDE + col] as f64 - MEAN[c]) / STD[c])
                        .collect()
                })
                .collect()
        })
        .collect();
    let mut in_c = 3;
    for (b, (&out_c, &n)) in CHANNELS.iter().zip(&CONVS).enumerate() {
        if b > 0 {
            x = pool2(&x);
        }
        for j in 1..=n {
            let bound = (6.0 / (9.0 * (in_c + out_c) as f64)).sqrt();
            // values are rounded to f32 first so both sides use identical weights
            let w: Vec<f32> = (0..out_c * in_c * 9)
                .map(|_| rng.gen_range(-bound..bound) as f32)
                .collect();
            let bias: Vec<f32> = (0..out_c).map(|_| rng.gen_range(-0.05..0.05) as f32).collect();
            let name = format!("block{}.conv{j}", b + 1);
            file.push_tensor(
                format!("{name}.weight"),
                &Tensor::new(&[out_c, in_c, 3, 3], w.clone()).unwrap(),
            )
            .unwrap();
            file.push_tensor(format!("{name}.bias"), &Tensor::new(&[out_c], bias.clone()).unwrap())
                .unwrap();
            let w: Vec<f64> = w.iter().map(|&v| v as f64).collect();
            let bias: Vec<f64> = bias.iter().map(|&v| v as f64).collect();
            x = conv3_relu(&x, &w, &bias, out_c);
            in_c = out_c;
        }
        file.push_tensor(format!("ref.tap{}", b + 1), &to_tensor(&x)).unwrap();
    }
    file.set_meta("norm.mean", "0.485,0.456,0.406");
    file.set_meta("norm.std", "0.229,0.224,0.225");
    file.set_meta("family", "vgg16-import");
    file
}

fn spec() -> EncoderSpec {
    EncoderSpec {
        channels: CHANNELS,
        input_side: SIDE,
        ..EncoderSpec::vgg16()
    }
}

#[test]
fn imported_weights_reproduce_reference_taps() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vgg16.ptw");
    write_ptw(&exported(3), &path).unwrap();
    let file = read_ptw(&path).unwrap();
    let encoder = Encoder::from_ptw_path(spec(), &path).unwrap();
    assert!(encoder.is_frozen());
    let norm = encoder.normalization().unwrap();
    assert_eq!(norm.mean, [0.485, 0.456, 0.406]);
    let diffs = encoder.verify_reference_taps(&file).unwrap();
    for (i, d) in diffs.iter().enumerate() {
        assert!(*d < 1e-4, "tap {} deviates by {d}", i + 1);
    }
}

#[test]
fn tampered_reference_is_detected() {
    let mut file = exported(4);
    let encoder = Encoder::build(spec(), 0).unwrap().load_weights(&file).unwrap();
    let mut tap = file.tensor("ref.tap3").unwrap().to_tensor().unwrap();
    tap.data_mut()[5] += 0.5;
    let mut tampered = PtwFile::new();
    for t in ["ref.input", "ref.tap1", "ref.tap2", "ref.tap4", "ref.tap5"] {
        tampered
            .push_tensor(t, &file.tensor(t).unwrap().to_tensor().unwrap())
            .unwrap();
    }
    tampered.push_tensor("ref.tap3", &tap).unwrap();
    let diffs = encoder.verify_reference_taps(&tampered).unwrap();
    assert!(diffs[2] > 0.4 && diffs[0] < 1e-4);

    file.set_meta("norm.std", "0.229,0.224");
    assert!(matches!(
        Encoder::build(spec(), 0).unwrap().load_weights(&file),
        Err(Error::Load { .. })
    ));
}

#[test]
fn layout_mismatches_name_the_tensor() {
    let file = exported(5);
    let wider = EncoderSpec {
        channels: [4, 6, 8, 8, 16],
        ..spec()
    };
    match Encoder::build(wider, 0).unwrap().load_weights(&file) {
        Err(Error::Load { tensor, reason }) => {
            assert_eq!(tensor, "block5.conv1.weight");
            assert!(reason.contains("dims"), "{reason}");
        }
        other => panic!("expected a load error, got {:?}", other.map(|_| ())),
    }

    let mut partial = PtwFile::new();
    partial
        .push_tensor(
            "block1.conv1.weight",
            &file.tensor("block1.conv1.weight").unwrap().to_tensor().unwrap(),
        )
        .unwrap();
    match Encoder::build(spec(), 0).unwrap().load_weights(&partial) {
        Err(Error::Load { tensor, .. }) => assert_eq!(tensor, "block1.conv1.bias"),
        other => panic!("expected a load error, got {:?}", other.map(|_| ())),
    }
    let encoder = Encoder::build(spec(), 0).unwrap();
    assert!(matches!(
        encoder.verify_reference_taps(&partial),
        Err(Error::Load { .. })
    ));
}

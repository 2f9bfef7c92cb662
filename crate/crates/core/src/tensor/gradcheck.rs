//! Central-difference gradient checking.
//!
//! The analytic gradient comes from the `f32` tape. The numerical side perturbs
//! each input element by ±ε and re-evaluates the same forward kernels in `f64`,
//! so `f32` rounding in the loss does not swamp the difference quotient.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::Graph;
use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Operator under test together with its non-input hyperparameters.
///
/// Every op except `SoftmaxXent` and `MseHalf` is scalarized with
/// `mse_half(op(..), target)` against a random target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradCheckOp {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Inputs are drawn with `|x| > 0.1` to stay away from the kink.
    Relu,
    /// Inputs are well-separated so ε cannot flip a window's maximum.
    MaxPool2,
    BilinearResize {
        out_h: usize,
        out_w: usize,
    },
    /// Concatenates the input with a second tensor of `other_channels` channels.
    ConcatChannels {
        other_channels: usize,
    },
    /// Input dims `[n, f]`.
    Affine {
        out_features: usize,
    },
    /// Input dims `[n, classes]`.
    SoftmaxXent,
    MseHalf,
    Add,
    GlobalAvgPool,
    /// Channel `c` scaled by the constant `0.5 + 0.75·c`.
    ScaleChannels,
}

fn channel_scale(channels: usize) -> Vec<f32> {
    (0..channels).map(|c| 0.5 + 0.75 * c as f32).collect()
}

struct Case {
    op: GradCheckOp,
    tensors: Vec<Tensor>,
    target: Option<Tensor>,
    labels: Vec<usize>,
}

fn uniform(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))
}

impl Case {
    fn build(op: GradCheckOp, dims: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let nchw = || -> Result<[usize; 4]> {
            match *dims {
                [n, c, h, w] => Ok([n, c, h, w]),
                _ => Err(Error::dim("grad_check", "input rank", 4, dims.len())),
            }
        };
        let mut labels = Vec::new();
        let tensors = match op {
            GradCheckOp::Conv2d {
                out_channels, kernel, ..
            } => {
                let [_, c, _, _] = nchw()?;
                vec![
                    uniform(dims, rng),
                    uniform(&[out_channels, c, kernel, kernel], rng),
                    uniform(&[out_channels], rng),
                ]
            }
            GradCheckOp::Relu => vec![Tensor::from_fn(dims, |_| {
                let mag = rng.gen_range(0.1..1.0f32);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })],
            GradCheckOp::MaxPool2 => {
                nchw()?;
                let len: usize = dims.iter().product();
                let mut vals: Vec<f32> = (0..len).map(|i| -1.0 + 2.0 * i as f32 / len as f32).collect();
                vals.shuffle(rng);
                vec![Tensor::new(dims, vals)?]
            }
            GradCheckOp::BilinearResize { .. } | GradCheckOp::GlobalAvgPool | GradCheckOp::ScaleChannels => {
                nchw()?;
                vec![uniform(dims, rng)]
            }
            GradCheckOp::ConcatChannels { other_channels } => {
                let [n, _, h, w] = nchw()?;
                vec![uniform(dims, rng), uniform(&[n, other_channels, h, w], rng)]
            }
            GradCheckOp::Affine { out_features } => {
                let f = *dims.last().unwrap_or(&0);
                vec![
                    uniform(dims, rng),
                    uniform(&[out_features, f], rng),
                    uniform(&[out_features], rng),
                ]
            }
            GradCheckOp::SoftmaxXent => {
                let (n, c) = match *dims {
                    [n, c] if c >= 2 => (n, c),
                    _ => return Err(Error::dim("grad_check", "logits", "[n, c≥2]", format!("{dims:?}"))),
                };
                labels = (0..n).map(|_| rng.gen_range(0..c)).collect();
                vec![uniform(dims, rng)]
            }
            GradCheckOp::MseHalf | GradCheckOp::Add => vec![uniform(dims, rng), uniform(dims, rng)],
        };
        let mut case = Case {
            op,
            tensors,
            target: None,
            labels,
        };
        if !matches!(op, GradCheckOp::SoftmaxXent | GradCheckOp::MseHalf) {
            let out_dims = case.analytic_graph()?.1;
            case.target = Some(uniform(&out_dims, rng));
        }
        Ok(case)
    }

    /// Builds the f32 graph; returns it with the op output dims (before the
    /// scalarizing head when no target exists yet).
    fn analytic_graph(&self) -> Result<(Graph, Vec<usize>, Vec<super::Var>, super::Var)> {
        let mut g = Graph::new();
        let vars: Vec<_> = self.tensors.iter().map(|t| g.param(t.clone(), true)).collect();
        let out = match self.op {
            GradCheckOp::Conv2d { stride, padding, .. } => g.conv2d(vars[0], vars[1], vars[2], stride, padding)?,
            GradCheckOp::Relu => g.relu(vars[0]),
            GradCheckOp::MaxPool2 => g.maxpool2(vars[0])?,
            GradCheckOp::BilinearResize { out_h, out_w } => g.bilinear_resize(vars[0], out_h, out_w)?,
            GradCheckOp::ConcatChannels { .. } => g.concat_channels(&vars)?,
            GradCheckOp::Affine { .. } => g.affine(vars[0], vars[1], vars[2])?,
            GradCheckOp::SoftmaxXent => g.softmax_xent(vars[0], &self.labels)?,
            GradCheckOp::MseHalf => g.mse_half(vars[0], vars[1])?,
            GradCheckOp::Add => g.add(vars[0], vars[1])?,
            GradCheckOp::GlobalAvgPool => g.global_avg_pool(vars[0])?,
            GradCheckOp::ScaleChannels => g.scale_channels(vars[0], &channel_scale(self.tensors[0].dims()[1]))?,
        };
        let out_dims = g.value(out).dims().to_vec();
        let loss = match &self.target {
            Some(t) => {
                let t = g.input(t.clone());
                g.mse_half(out, t)?
            }
            None => out,
        };
        Ok((g, out_dims, vars, loss))
    }

    /// Loss evaluated with the generic kernels at precision `T`.
    fn loss_at<T: Real>(&self, inputs: &[Vec<T>]) -> Result<T> {
        let dims = |i: usize| self.tensors[i].dims();
        let as_nchw = |d: &[usize]| [d[0], d[1], d[2], d[3]];
        let out: Vec<T> = match self.op {
            GradCheckOp::Conv2d { stride, padding, .. } => {
                let geom = ConvGeom::new(dims(0), dims(1), dims(2), stride, padding)?;
                kernels::conv2d_forward(&geom, &inputs[0], &inputs[1], &inputs[2])
            }
            GradCheckOp::Relu => kernels::relu_forward(&inputs[0]),
            GradCheckOp::MaxPool2 => kernels::maxpool2_forward(as_nchw(dims(0)), &inputs[0]).0,
            GradCheckOp::BilinearResize { out_h, out_w } => {
                kernels::bilinear_forward(as_nchw(dims(0)), &inputs[0], out_h, out_w)
            }
            GradCheckOp::ConcatChannels { .. } => {
                kernels::concat_channels(&[(dims(0), &inputs[0][..]), (dims(1), &inputs[1][..])])?.1
            }
            GradCheckOp::Affine { out_features } => {
                let d = dims(0);
                kernels::affine_forward(d[0], d[1], out_features, &inputs[0], &inputs[1], &inputs[2])
            }
            GradCheckOp::SoftmaxXent => {
                let d = dims(0);
                return Ok(kernels::softmax_xent_forward(d[0], d[1], &inputs[0], &self.labels));
            }
            GradCheckOp::MseHalf => return Ok(kernels::mse_half_forward(&inputs[0], &inputs[1])),
            GradCheckOp::Add => kernels::add_forward(&inputs[0], &inputs[1]),
            GradCheckOp::GlobalAvgPool => kernels::global_avg_pool_forward(as_nchw(dims(0)), &inputs[0]),
            GradCheckOp::ScaleChannels => {
                kernels::scale_channels(as_nchw(dims(0)), &inputs[0], &channel_scale(dims(0)[1]))
            }
        };
        let target: Vec<T> = self
            .target
            .as_ref()
            .expect("scalarized ops carry a target")
            .data()
            .iter()
            .map(|&v| T::from_f64(v as f64))
            .collect();
        Ok(kernels::mse_half_forward(&out, &target))
    }
}

/// Relative error `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Maximum elementwise relative error between the tape gradient and the
/// central difference, over every input of `op` (parameters included).
pub fn grad_check(op: GradCheckOp, input_dims: &[usize], eps: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let case = Case::build(op, input_dims, &mut rng)?;

    let (mut g, _, vars, loss) = case.analytic_graph()?;
    g.backward(loss)?;

    let mut inputs: Vec<Vec<f64>> = case
        .tensors
        .iter()
        .map(|t| t.data().iter().map(|&v| v as f64).collect())
        .collect();

    let mut worst = 0.0f64;
    for (ti, var) in vars.iter().enumerate() {
        let analytic = g.grad_or_zeros(*var);
        for i in 0..inputs[ti].len() {
            let orig = inputs[ti][i];
            inputs[ti][i] = orig + eps;
            let plus = case.loss_at(&inputs)?;
            inputs[ti][i] = orig - eps;
            let minus = case.loss_at(&inputs)?;
            inputs[ti][i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[i] as f64, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
        assert_eq!(relative_error(1e-9, 0.0), 1e-9 / 1e-6);
    }

    #[test]
    fn conv_small() {
        let op = GradCheckOp::Conv2d {
            out_channels: 2,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        assert!(grad_check(op, &[1, 2, 5, 5], 1e-3, 0).unwrap() < 1e-3);
    }

    #[test]
    fn relu_away_from_kink() {
        assert!(grad_check(GradCheckOp::Relu, &[1, 2, 3, 3], 1e-3, 0).unwrap() < 1e-4);
    }

    #[test]
    fn scale_channels() {
        assert!(grad_check(GradCheckOp::ScaleChannels, &[2, 3, 2, 2], 1e-3, 0).unwrap() < 1e-4);
    }

    #[test]
    fn bad_rank_is_reported() {
        assert!(grad_check(GradCheckOp::MaxPool2, &[4, 4], 1e-3, 0).is_err());
    }
}

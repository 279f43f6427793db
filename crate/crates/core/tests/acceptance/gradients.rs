//! Central differences (64-bit) against backprop at 64 and 32 bits, for
//! every differentiable op and for whole U-Nets with the Dice loss.
//!
//! Relative error of a set of gradient entries is
//! `max|analytic - fd| / max|fd|`.

use std::time::{Duration, Instant};

use airway_unet::tensor::{Graph, Padding, Scalar, Tensor, Var};
use airway_unet::training::soft_dice_loss;
use airway_unet::unet::{compute_output_shape, init_weights, UNetConfig, UNetModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::common::Outcome;

const TOL_F64: f64 = 1e-6;
const TOL_F32: f64 = 1e-3;
const OP_STEP: f64 = 1e-6;
const NET_STEP: f64 = 1e-6;
const NET_SAMPLES: usize = 20;
const TIME_LIMIT: Duration = Duration::from_secs(120);

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so a small step never crosses the ReLU kink.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn binary(shape: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_bool(p) as u8 as f64).collect()).unwrap()
}

enum Op {
    ConvValid,
    ConvSame,
    Conv1,
    MaxPool,
    Upsample,
    Relu,
    Sigmoid,
    ConcatCrop,
    Mul,
    Scale,
    Sum,
    Dice,
}

const OPS: [(&str, Op); 12] = [
    ("conv3d valid", Op::ConvValid),
    ("conv3d same", Op::ConvSame),
    ("conv3d 1x1x1", Op::Conv1),
    ("maxpool3d", Op::MaxPool),
    ("upsample3d", Op::Upsample),
    ("relu", Op::Relu),
    ("sigmoid", Op::Sigmoid),
    ("concat_crop", Op::ConcatCrop),
    ("mul", Op::Mul),
    ("scale", Op::Scale),
    ("sum", Op::Sum),
    ("dice loss", Op::Dice),
];

/// Differentiable leaves and fixed operands for one op case.
struct Case {
    leaves: Vec<Tensor<f64>>,
    fixed: Vec<Tensor<f64>>,
}

impl Op {
    fn case(&self, rng: &mut ChaCha8Rng) -> Case {
        let r = |s: &[usize], rng: &mut ChaCha8Rng| random(s, -1.0, 1.0, rng);
        match self {
            Op::ConvValid => Case {
                leaves: vec![r(&[2, 5, 5, 5], rng), r(&[3, 2, 3, 3, 3], rng), r(&[3], rng)],
                fixed: vec![r(&[3, 3, 3, 3], rng)],
            },
            Op::ConvSame => Case {
                leaves: vec![r(&[2, 4, 5, 3], rng), r(&[2, 2, 3, 3, 3], rng), r(&[2], rng)],
                fixed: vec![r(&[2, 4, 5, 3], rng)],
            },
            Op::Conv1 => Case {
                leaves: vec![r(&[3, 3, 3, 3], rng), r(&[1, 3, 1, 1, 1], rng), r(&[1], rng)],
                fixed: vec![r(&[1, 3, 3, 3], rng)],
            },
            Op::MaxPool => Case {
                leaves: vec![r(&[2, 4, 4, 4], rng)],
                fixed: vec![r(&[2, 2, 2, 2], rng)],
            },
            Op::Upsample => Case {
                leaves: vec![r(&[2, 3, 3, 3], rng)],
                fixed: vec![r(&[2, 6, 6, 6], rng)],
            },
            Op::Relu => Case {
                leaves: vec![away_from_zero(&[2, 3, 3, 3], rng)],
                fixed: vec![r(&[2, 3, 3, 3], rng)],
            },
            Op::Sigmoid => Case {
                leaves: vec![random(&[2, 3, 3, 3], -4.0, 4.0, rng)],
                fixed: vec![r(&[2, 3, 3, 3], rng)],
            },
            Op::ConcatCrop => Case {
                leaves: vec![r(&[2, 6, 6, 6], rng), r(&[3, 4, 4, 4], rng)],
                fixed: vec![r(&[5, 4, 4, 4], rng)],
            },
            Op::Mul => Case {
                leaves: vec![r(&[2, 3, 3, 3], rng), r(&[2, 3, 3, 3], rng)],
                fixed: vec![],
            },
            Op::Scale => Case {
                leaves: vec![r(&[2, 3, 3, 3], rng)],
                fixed: vec![r(&[2, 3, 3, 3], rng)],
            },
            Op::Sum => Case {
                leaves: vec![r(&[2, 3, 3, 3], rng)],
                fixed: vec![],
            },
            Op::Dice => Case {
                leaves: vec![random(&[1, 4, 4, 4], 0.05, 0.95, rng)],
                fixed: vec![binary(&[1, 4, 4, 4], 0.4, rng), binary(&[1, 4, 4, 4], 0.7, rng)],
            },
        }
    }

    /// Records the op and reduces it to a scalar (projection onto a fixed
    /// random tensor where the op itself is not scalar).
    fn record<T: Scalar>(&self, g: &mut Graph<T>, l: &[Var], fixed: &[Tensor<f64>]) -> Var {
        let f = |i: usize| fixed[i].cast::<T>();
        let project = |g: &mut Graph<T>, y: Var, r: Tensor<T>| {
            let rv = g.input(r);
            let p = g.mul(y, rv).unwrap();
            g.sum(p)
        };
        match self {
            Op::ConvValid | Op::Conv1 => {
                let y = g.conv3d(l[0], l[1], l[2], Padding::Valid).unwrap();
                project(g, y, f(0))
            }
            Op::ConvSame => {
                let y = g.conv3d(l[0], l[1], l[2], Padding::Same).unwrap();
                project(g, y, f(0))
            }
            Op::MaxPool => {
                let y = g.maxpool3d(l[0]).unwrap();
                project(g, y, f(0))
            }
            Op::Upsample => {
                let y = g.upsample3d(l[0]).unwrap();
                project(g, y, f(0))
            }
            Op::Relu => {
                let y = g.relu(l[0]);
                project(g, y, f(0))
            }
            Op::Sigmoid => {
                let y = g.sigmoid(l[0]);
                project(g, y, f(0))
            }
            Op::ConcatCrop => {
                let y = g.concat_crop(l[0], l[1]).unwrap();
                project(g, y, f(0))
            }
            Op::Mul => {
                let y = g.mul(l[0], l[1]).unwrap();
                g.sum(y)
            }
            Op::Scale => {
                let y = g.scale(l[0], T::from_f64(-1.75));
                project(g, y, f(0))
            }
            Op::Sum => {
                let y = g.sum(l[0]);
                g.scale(y, T::from_f64(0.5))
            }
            Op::Dice => soft_dice_loss(g, l[0], &f(0), &f(1)).unwrap(),
        }
    }
}

/// Loss value and gradients of every leaf at precision `T`.
fn op_eval<T: Scalar>(op: &Op, leaves: &[Tensor<f64>], fixed: &[Tensor<f64>]) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::<T>::new();
    let vars: Vec<Var> = leaves.iter().map(|t| g.param(t.cast::<T>())).collect();
    let out = op.record(&mut g, &vars, fixed);
    let value = g.value(out).data()[0].as_f64();
    let grads = g.backward(out).unwrap();
    let gs = vars
        .iter()
        .map(|v| grads.get(*v).unwrap().data().iter().map(|x| x.as_f64()).collect())
        .collect();
    (value, gs)
}

fn rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().map(|v| v.abs()).fold(1e-300, f64::max);
    analytic.iter().zip(fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale
}

/// Worst 64-bit and 32-bit relative errors over all leaves of an op.
fn check_op(op: &Op, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let Case { leaves, fixed } = op.case(rng);
    let (_, a64) = op_eval::<f64>(op, &leaves, &fixed);
    let (_, a32) = op_eval::<f32>(op, &leaves, &fixed);
    let (mut e64, mut e32) = (0.0f64, 0.0f64);
    for li in 0..leaves.len() {
        let mut fd = vec![0.0; leaves[li].len()];
        let mut work = leaves.clone();
        for (i, slot) in fd.iter_mut().enumerate() {
            let x = leaves[li].data()[i];
            work[li].data_mut()[i] = x + OP_STEP;
            let up = op_eval::<f64>(op, &work, &fixed).0;
            work[li].data_mut()[i] = x - OP_STEP;
            let down = op_eval::<f64>(op, &work, &fixed).0;
            work[li].data_mut()[i] = x;
            *slot = (up - down) / (2.0 * OP_STEP);
        }
        e64 = e64.max(rel_err(&a64[li], &fd));
        e32 = e32.max(rel_err(&a32[li], &fd));
    }
    (e64, e32)
}

struct NetProblem {
    model: UNetModel<f64>,
    x: Tensor<f64>,
    gt: Tensor<f64>,
    roi: Tensor<f64>,
}

impl NetProblem {
    /// Smallest input the architecture accepts, random image in [0, 1],
    /// random ground truth and ROI on the output footprint.
    fn new(mut config: UNetConfig, seed: u64) -> NetProblem {
        let size = (8..200)
            .find(|s| compute_output_shape([*s; 3], &config).is_ok())
            .expect("some input size is valid");
        config.input_shape = [size; 3];
        let (out, _) = compute_output_shape([size; 3], &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = [1, out[2], out[1], out[0]];
        NetProblem {
            model: init_weights::<f64>(&config, seed).unwrap(),
            x: random(&[1, size, size, size], 0.0, 1.0, &mut rng),
            gt: binary(&o, 0.3, &mut rng),
            roi: binary(&o, 0.8, &mut rng),
        }
    }

    fn eval<T: Scalar>(&self, model: &UNetModel<T>, grads: bool) -> (f64, Vec<Tensor<T>>) {
        let mut g = Graph::<T>::new();
        let x = g.input(self.x.cast::<T>());
        let rec = model.record(&mut g, x, grads).unwrap();
        let loss = soft_dice_loss(&mut g, rec.output, &self.gt.cast::<T>(), &self.roi.cast::<T>()).unwrap();
        let value = g.value(loss).data()[0].as_f64();
        if !grads {
            return (value, Vec::new());
        }
        let mut gr = g.backward(loss).unwrap();
        (value, rec.gradients(&mut gr).unwrap())
    }

    /// Worst relative errors (64-bit, 32-bit) on `NET_SAMPLES` random
    /// parameter entries.
    fn check(&self, seed: u64) -> (f64, f64, usize) {
        let (_, g64) = self.eval(&self.model, true);
        let m32: UNetModel<f32> = self.model.cast();
        let (_, g32) = self.eval(&m32, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total: usize = self.model.parameters().iter().map(|p| p.len()).sum();
        let (mut a64, mut a32, mut fd) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..NET_SAMPLES {
            let mut k = rng.gen_range(0..total);
            let mut t = 0;
            while k >= self.model.parameters()[t].len() {
                k -= self.model.parameters()[t].len();
                t += 1;
            }
            let mut m = self.model.clone();
            let w = self.model.parameters()[t].data()[k];
            m.parameters_mut()[t].data_mut()[k] = w + NET_STEP;
            let up = self.eval(&m, false).0;
            m.parameters_mut()[t].data_mut()[k] = w - NET_STEP;
            let down = self.eval(&m, false).0;
            fd.push((up - down) / (2.0 * NET_STEP));
            a64.push(g64[t].data()[k]);
            a32.push(g32[t].data()[k] as f64);
        }
        (rel_err(&a64, &fd), rel_err(&a32, &fd), total)
    }
}

pub fn run() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut parts = Vec::new();
    let (mut w64, mut w32) = (0.0f64, 0.0f64);
    let mut bad = Vec::new();
    for (name, op) in &OPS {
        let (e64, e32) = check_op(op, &mut rng);
        if e64 >= TOL_F64 || e32 >= TOL_F32 {
            bad.push(format!("{name} ({e64:.1e}/{e32:.1e})"));
        }
        w64 = w64.max(e64);
        w32 = w32.max(e32);
    }
    parts.push(Outcome::new(
        bad.is_empty(),
        format!("{} ops worst rel err {w64:.1e} (f64) {w32:.1e} (f32){}", OPS.len(), if bad.is_empty() { String::new() } else { format!(" bad: {}", bad.join(", ")) }),
    ));

    let toy = UNetConfig {
        levels: 4,
        base_channels: 2,
        valid_levels: 3,
        ..UNetConfig::full()
    };
    for (label, config, seed) in [("desk U-Net", UNetConfig::desk(), 11), ("4-level toy U-Net", toy, 12)] {
        let p = NetProblem::new(config, seed);
        let (e64, e32, total) = p.check(seed + 100);
        parts.push(Outcome::new(
            e64 < TOL_F64 && e32 < TOL_F32,
            format!(
                "{label} + dice at {}^3 ({total} params, {NET_SAMPLES} sampled) rel err {e64:.1e} (f64) {e32:.1e} (f32)",
                p.x.shape()[1]
            ),
        ));
    }
    let elapsed = start.elapsed();
    parts.push(Outcome::new(elapsed < TIME_LIMIT, format!("runtime {elapsed:.1?} < {TIME_LIMIT:?}")));
    Outcome::all(parts)
}

//! Finite-difference gradient checks for the tape.
//!
//! Each case builds a function of its leaves on a tape of either precision.
//! Analytic gradients from the `f32` and `f64` tapes are compared against
//! central differences of the `f64` forward pass.

use msyolo::geometry::BBox;
use msyolo::loss::{ciou_loss_sum, detection_loss, AssignedTarget, BoxVars, LossConfig, SlideState};
use msyolo::model::HEAD_STRIDES;
use msyolo::tensor::{ConvGeometry, Real, Tape, Tensor, Var};
use msyolo::Result;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Tolerance for `f32` analytic gradients.
pub const TOL_F32: f64 = 1e-4;
/// Tolerance for `f64` analytic gradients.
pub const TOL_F64: f64 = 1e-6;
pub const TRIALS: u64 = 20;

const STEP: f64 = 1e-5;

pub trait Build {
    fn build<T: Real>(&self, tape: &mut Tape<T>, v: &[Var]) -> Result<Var>;
}

/// Worst relative errors over one trial.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrialError {
    pub f32: f64,
    pub f64: f64,
}

impl TrialError {
    pub fn max(self, other: TrialError) -> TrialError {
        TrialError {
            f32: self.f32.max(other.f32),
            f64: self.f64.max(other.f64),
        }
    }

    pub fn passes(&self) -> bool {
        self.f32 < TOL_F32 && self.f64 < TOL_F64
    }
}

fn projection(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ n as u64);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn forward<T: Real, B: Build>(b: &B, inputs: &[Tensor<f64>]) -> Result<(Tape<T>, Var, Vec<Var>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.cast::<T>(), true)).collect();
    let y = b.build(&mut tape, &vars)?;
    let shape = tape.value(y).shape().to_vec();
    let loss = if tape.value(y).len() == 1 {
        y
    } else {
        let r = tape.constant(Tensor::from_f64(&shape, &projection(tape.value(y).len()))?);
        let p = tape.mul(y, r)?;
        tape.sum(p)
    };
    Ok((tape, loss, vars))
}

fn analytic<T: Real, B: Build>(b: &B, inputs: &[Tensor<f64>]) -> Result<Vec<f64>> {
    let (tape, loss, vars) = forward::<T, B>(b, inputs)?;
    let g = tape.backward(loss)?;
    Ok(vars
        .iter()
        .flat_map(|&v| g.get(v).expect("leaf gradient").to_f64_vec())
        .collect())
}

fn value<B: Build>(b: &B, inputs: &[Tensor<f64>]) -> Result<f64> {
    let (tape, loss, _) = forward::<f64, B>(b, inputs)?;
    Ok(tape.value(loss).data()[0])
}

fn numeric<B: Build>(b: &B, inputs: &[Tensor<f64>]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        for e in 0..inputs[k].len() {
            let x = inputs[k].data()[e];
            work[k].data_mut()[e] = x + STEP;
            let up = value(b, &work)?;
            work[k].data_mut()[e] = x - STEP;
            let down = value(b, &work)?;
            work[k].data_mut()[e] = x;
            out.push((up - down) / (2.0 * STEP));
        }
    }
    Ok(out)
}

/// `||a - n|| / max(||n||, 1e-8)`.
pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = n.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-8)
}

pub fn check<B: Build>(b: &B, inputs: &[Tensor<f64>]) -> Result<TrialError> {
    let n = numeric(b, inputs)?;
    Ok(TrialError {
        f32: relative_error(&analytic::<f32, B>(b, inputs)?, &n),
        f64: relative_error(&analytic::<f64, B>(b, inputs)?, &n),
    })
}

macro_rules! op {
    (|$t:ident, $v:ident| $body:expr) => {{
        struct B;
        impl Build for B {
            fn build<T: Real>(&self, $t: &mut Tape<T>, $v: &[Var]) -> Result<Var> {
                $body
            }
        }
        B
    }};
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Uniform values at least `margin` away from every point in `kinks`.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, kinks: &[f64], margin: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| loop {
            let x = rng.gen_range(lo..hi);
            if kinks.iter().all(|k| (x - k).abs() > margin) {
                break x;
            }
        })
        .collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// Distinct values spaced at least 0.1 apart, in random order.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    data.shuffle(rng);
    Tensor::from_f64(shape, &data).unwrap()
}

fn nchw(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(2..=5)]
}

fn flat(rng: &mut ChaCha8Rng) -> Vec<usize> {
    vec![rng.gen_range(1..=12)]
}

struct ConvCase {
    geom: ConvGeometry,
    bias: bool,
}

impl Build for ConvCase {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        t.conv2d(v[0], v[1], self.bias.then(|| v[2]), self.geom)
    }
}

fn conv_trial(rng: &mut ChaCha8Rng, depthwise: bool) -> Result<TrialError> {
    let (groups, cin_g, cout) = if depthwise {
        let c = rng.gen_range(1..=4);
        (c, 1, c)
    } else {
        let g = rng.gen_range(1..=2);
        (g, rng.gen_range(1..=2), g * rng.gen_range(1..=2))
    };
    let k = *[1, 3, 5].choose(rng).unwrap();
    let stride = rng.gen_range(1..=2);
    let padding = rng.gen_range(0..=k / 2);
    let size = rng.gen_range(k.max(3)..=k.max(3) + 3);
    let bias = rng.gen_bool(0.5);
    let mut inputs = vec![
        {
            let n = rng.gen_range(1..=2);
            uniform(rng, &[n, groups * cin_g, size, size], -1.0, 1.0)
        },
        uniform(rng, &[cout, cin_g, k, k], -1.0, 1.0),
    ];
    if bias {
        inputs.push(uniform(rng, &[cout], -1.0, 1.0));
    }
    check(
        &ConvCase {
            geom: ConvGeometry::new(stride, padding, groups),
            bias,
        },
        &inputs,
    )
}

fn bn_inputs(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let mut shape = nchw(rng);
    // At least two values per channel keep the batch variance positive.
    shape[0] = 2;
    let c = shape[1];
    vec![
        uniform(rng, &shape, -2.0, 2.0),
        uniform(rng, &[c], 0.5, 1.5),
        uniform(rng, &[c], -0.5, 0.5),
    ]
}

struct BnEval {
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl Build for BnEval {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let mean: Vec<T> = self.mean.iter().map(|&x| T::of(x)).collect();
        let var: Vec<T> = self.var.iter().map(|&x| T::of(x)).collect();
        t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-3)
    }
}

struct Scalars(f64, f64);

impl Build for Scalars {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let y = t.add_scalar(v[0], T::of(self.0));
        Ok(t.mul_scalar(y, T::of(self.1)))
    }
}

struct Slice(usize, usize);

impl Build for Slice {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        t.slice_channels(v[0], self.0, self.1)
    }
}

struct Pool(usize, usize, usize);

impl Build for Pool {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        t.max_pool2d(v[0], self.0, self.1, self.2)
    }
}

struct Gather(Vec<usize>);

impl Build for Gather {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        t.gather(v[0], &self.0)
    }
}

struct Bce {
    targets: Vec<f64>,
    weights: Vec<f64>,
}

impl Build for Bce {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let tg = self.targets.iter().map(|&x| T::of(x)).collect();
        let wt = self.weights.iter().map(|&x| T::of(x)).collect();
        t.bce_with_logits_sum(v[0], tg, wt)
    }
}

struct Ciou(Vec<[f64; 4]>);

impl Build for Ciou {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let pred = BoxVars {
            x1: v[0],
            y1: v[1],
            x2: v[2],
            y2: v[3],
        };
        ciou_loss_sum(t, &pred, &self.0)
    }
}

/// A random valid box with coordinates well separated from `avoid`.
fn random_box(rng: &mut ChaCha8Rng, lo: f64, hi: f64, avoid: &[f64]) -> [f64; 4] {
    loop {
        let x1 = rng.gen_range(lo..hi);
        let y1 = rng.gen_range(lo..hi);
        let b = [x1, y1, x1 + rng.gen_range(0.5..3.0), y1 + rng.gen_range(0.5..3.0)];
        if b.iter().all(|c| avoid.iter().all(|a| (c - a).abs() > 0.05)) {
            return b;
        }
    }
}

fn ciou_trial(rng: &mut ChaCha8Rng) -> Result<TrialError> {
    let n = rng.gen_range(1..=4);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for _ in 0..n {
        let g = random_box(rng, 0.0, 3.0, &[]);
        preds.push(random_box(rng, 0.0, 3.0, &g));
        gts.push(g);
    }
    let col = |k: usize| Tensor::from_f64(&[n], &preds.iter().map(|p| p[k]).collect::<Vec<_>>()).unwrap();
    check(&Ciou(gts), &[col(0), col(1), col(2), col(3)])
}

struct Detection {
    assignments: Vec<AssignedTarget>,
    state: SlideState,
    cfg: LossConfig,
}

impl Build for Detection {
    fn build<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> Result<Var> {
        let maps = [v[0], v[1], v[2]];
        Ok(detection_loss(t, &maps, &self.assignments, &self.state, &self.cfg)?.0)
    }
}

fn detection_trial(rng: &mut ChaCha8Rng) -> Result<TrialError> {
    let size = 64;
    let n = rng.gen_range(1..=2);
    let m = rng.gen_range(1..=3);
    let maps: Vec<Tensor<f64>> = HEAD_STRIDES
        .iter()
        .map(|&s| uniform(rng, &[n, 4 + m, size / s, size / s], -1.5, 1.5))
        .collect();
    let mut assignments = Vec::new();
    let mut used = Vec::new();
    for _ in 0..rng.gen_range(0..=4) {
        let image = rng.gen_range(0..n);
        let scale_index = rng.gen_range(0..3);
        let hw = size / HEAD_STRIDES[scale_index];
        let (i, j) = (rng.gen_range(0..hw), rng.gen_range(0..hw));
        if used.contains(&(image, scale_index, i, j)) {
            continue;
        }
        used.push((image, scale_index, i, j));
        let s = HEAD_STRIDES[scale_index] as f64;
        // Ground truth around the cell centre, in pixels. Predicted box
        // coordinates sit at centre -/+ softplus(raw) in [0.2, 1.7] strides,
        // so keep the gt edges clear of the ranges where they could tie.
        let (cx, cy) = (j as f64 + 0.5, i as f64 + 0.5);
        let half = |rng: &mut ChaCha8Rng| -> f64 {
            if rng.gen_bool(0.5) {
                rng.gen_range(0.05..0.15)
            } else {
                rng.gen_range(1.9..2.5)
            }
        };
        let (l, tp, r, b) = (half(rng), half(rng), half(rng), half(rng));
        assignments.push(AssignedTarget {
            image,
            scale_index,
            i,
            j,
            gt_box: BBox::new(
                ((cx - l) * s) as f32,
                ((cy - tp) * s) as f32,
                ((cx + r) * s) as f32,
                ((cy + b) * s) as f32,
            ),
            gt_class: rng.gen_range(0..m),
            pair_iou: rng.gen_range(0.0..1.0),
        });
    }
    let b = Detection {
        assignments,
        state: SlideState::new(rng.gen_range(0.2..0.9), 0.05),
        cfg: LossConfig {
            use_slide: rng.gen_bool(0.5),
            ..LossConfig::default()
        },
    };
    check(&b, &maps)
}

pub type Trial = fn(&mut ChaCha8Rng) -> Result<TrialError>;

/// Every differentiable primitive plus the composite detection loss.
pub fn suite() -> Vec<(&'static str, Trial)> {
    vec![
        ("conv2d", |r| conv_trial(r, false)),
        ("conv2d_depthwise", |r| conv_trial(r, true)),
        ("batch_norm_train", |r| {
            check(
                &op!(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-3)?.0)),
                &bn_inputs(r),
            )
        }),
        ("batch_norm_eval", |r| {
            let inputs = bn_inputs(r);
            let c = inputs[1].len();
            let b = BnEval {
                mean: (0..c).map(|_| r.gen_range(-0.5..0.5)).collect(),
                var: (0..c).map(|_| r.gen_range(0.5..2.0)).collect(),
            };
            check(&b, &inputs)
        }),
        ("relu", |r| {
            let s = nchw(r);
            check(&op!(|t, v| Ok(t.relu(v[0]))), &[away_from(r, &s, -2.0, 2.0, &[0.0], 0.05)])
        }),
        ("relu6", |r| {
            let s = nchw(r);
            check(
                &op!(|t, v| Ok(t.relu6(v[0]))),
                &[away_from(r, &s, -2.0, 8.0, &[0.0, 6.0], 0.05)],
            )
        }),
        ("sigmoid", |r| {
            let s = flat(r);
            check(&op!(|t, v| Ok(t.sigmoid(v[0]))), &[uniform(r, &s, -4.0, 4.0)])
        }),
        ("softplus", |r| {
            let s = flat(r);
            check(&op!(|t, v| Ok(t.softplus(v[0]))), &[uniform(r, &s, -4.0, 4.0)])
        }),
        ("exp", |r| {
            let s = flat(r);
            check(&op!(|t, v| Ok(t.exp(v[0]))), &[uniform(r, &s, -2.0, 2.0)])
        }),
        ("ln", |r| {
            let s = flat(r);
            check(&op!(|t, v| Ok(t.ln(v[0]))), &[uniform(r, &s, 0.3, 3.0)])
        }),
        ("sqrt", |r| {
            let s = flat(r);
            check(&op!(|t, v| Ok(t.sqrt(v[0]))), &[uniform(r, &s, 0.3, 3.0)])
        }),
        ("atan", |r| {
            let s = flat(r);
            check(&op!(|t, v| Ok(t.atan(v[0]))), &[uniform(r, &s, -3.0, 3.0)])
        }),
        ("square", |r| {
            let s = flat(r);
            check(&op!(|t, v| Ok(t.square(v[0]))), &[uniform(r, &s, -2.0, 2.0)])
        }),
        ("neg", |r| {
            let s = flat(r);
            check(&op!(|t, v| Ok(t.neg(v[0]))), &[uniform(r, &s, -2.0, 2.0)])
        }),
        ("add", |r| {
            let s = nchw(r);
            check(&op!(|t, v| t.add(v[0], v[1])), &[uniform(r, &s, -2.0, 2.0), uniform(r, &s, -2.0, 2.0)])
        }),
        ("sub", |r| {
            let s = nchw(r);
            check(&op!(|t, v| t.sub(v[0], v[1])), &[uniform(r, &s, -2.0, 2.0), uniform(r, &s, -2.0, 2.0)])
        }),
        ("mul", |r| {
            let s = nchw(r);
            check(&op!(|t, v| t.mul(v[0], v[1])), &[uniform(r, &s, -2.0, 2.0), uniform(r, &s, -2.0, 2.0)])
        }),
        ("div", |r| {
            let s = flat(r);
            check(
                &op!(|t, v| t.div(v[0], v[1])),
                &[uniform(r, &s, -2.0, 2.0), away_from(r, &s, -2.0, 2.0, &[0.0], 0.4)],
            )
        }),
        ("maximum", |r| {
            let s = flat(r);
            let a = uniform(r, &s, -2.0, 2.0);
            let gap = uniform(r, &s, -1.0, 1.0);
            let b = Tensor::new(
                s.clone(),
                a.data().iter().zip(gap.data()).map(|(x, g)| x + 0.3 * g.signum()).collect(),
            )?;
            check(&op!(|t, v| t.maximum(v[0], v[1])), &[a, b])
        }),
        ("minimum", |r| {
            let s = flat(r);
            let a = uniform(r, &s, -2.0, 2.0);
            let gap = uniform(r, &s, -1.0, 1.0);
            let b = Tensor::new(
                s.clone(),
                a.data().iter().zip(gap.data()).map(|(x, g)| x + 0.3 * g.signum()).collect(),
            )?;
            check(&op!(|t, v| t.minimum(v[0], v[1])), &[a, b])
        }),
        ("add_mul_scalar", |r| {
            let s = flat(r);
            let b = Scalars(r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
            check(&b, &[uniform(r, &s, -2.0, 2.0)])
        }),
        ("sum", |r| {
            let s = nchw(r);
            check(&op!(|t, v| Ok(t.sum(v[0]))), &[uniform(r, &s, -2.0, 2.0)])
        }),
        ("concat_channels", |r| {
            let s = nchw(r);
            let mut s2 = s.clone();
            s2[1] = r.gen_range(1..=3);
            check(
                &op!(|t, v| t.concat_channels(v[0], v[1])),
                &[uniform(r, &s, -2.0, 2.0), uniform(r, &s2, -2.0, 2.0)],
            )
        }),
        ("slice_channels", |r| {
            let mut s = nchw(r);
            s[1] = r.gen_range(2..=5);
            let start = r.gen_range(0..s[1]);
            let len = r.gen_range(1..=s[1] - start);
            check(&Slice(start, len), &[uniform(r, &s, -2.0, 2.0)])
        }),
        ("upsample_nearest_2x", |r| {
            let s = nchw(r);
            check(&op!(|t, v| t.upsample_nearest_2x(v[0])), &[uniform(r, &s, -2.0, 2.0)])
        }),
        ("max_pool2d", |r| {
            let (k, stride, pad) = *[(2, 2, 0), (3, 1, 1), (5, 1, 2), (3, 2, 1)].choose(r).unwrap();
            let mut s = nchw(r);
            s[2] += 2;
            s[3] += 2;
            check(&Pool(k, stride, pad), &[distinct(r, &s)])
        }),
        ("gather", |r| {
            let s = nchw(r);
            let n: usize = s.iter().product();
            // Repeated indices exercise gradient accumulation.
            let idx = (0..r.gen_range(1..=2 * n)).map(|_| r.gen_range(0..n)).collect();
            check(&Gather(idx), &[uniform(r, &s, -2.0, 2.0)])
        }),
        ("bce_with_logits_sum", |r| {
            let s = flat(r);
            let n = s[0];
            let b = Bce {
                targets: (0..n).map(|_| r.gen_range(0.0..1.0)).collect(),
                weights: (0..n).map(|_| r.gen_range(0.2..3.0)).collect(),
            };
            check(&b, &[uniform(r, &s, -6.0, 6.0)])
        }),
        ("ciou_loss_sum", ciou_trial),
        ("detection_loss", detection_trial),
    ]
}

/// Worst error of `trial` over [`TRIALS`] seeded trials.
pub fn run_trials(name: &str, trial: Trial) -> Result<TrialError> {
    let mut worst = TrialError::default();
    for k in 0..TRIALS {
        let seed = k ^ name.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        worst = worst.max(trial(&mut rng)?);
    }
    Ok(worst)
}

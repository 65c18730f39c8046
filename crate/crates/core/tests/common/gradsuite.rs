//! Central finite-difference checks of every tape primitive, loss and
//! ROI Align, shared by the gradient tests and the acceptance run.

use focaldet::encode::{encode_targets, TargetMaps};
use focaldet::loss::{bce_loss, center_loss, fdn_loss, offset_loss, scale_loss, FdnPrediction, FocalParams, LossWeights};
use focaldet::nn::gradcheck::{max_relative_error, numeric_gradient, STEP};
use focaldet::nn::model::{build_fdn, init_params, FdnOutput};
use focaldet::nn::{Tape, Tensor, Var};
use focaldet::suppress::{roi_align, roi_align_backward, RoiAlignConfig, RoiSampler};
use focaldet::{Annotation, BBox, GridShape, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative tolerance of every finite-difference check.
pub const TOL: f64 = 1e-4;
/// Tolerance of the end-to-end model check.
pub const MODEL_TOL: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(lo..hi)).collect()).unwrap()
}

fn random_tensor(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    uniform(r, shape, -1.0, 1.0)
}

/// Values bounded away from zero so relu kinks stay out of reach.
fn off_kink(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = r.gen_range(0.01..1.0);
            if r.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Checks every input of a tape op against central differences of
/// `sum(weights * op(inputs))`.
fn check_op(inputs: &[Tensor], build: &Build, r: &mut ChaCha8Rng) -> f64 {
    let eval = |vals: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars).unwrap();
        (tape, vars, out)
    };
    let (tape, vars, out) = eval(inputs);
    let weights: Vec<f64> = (0..tape.value(out).len()).map(|_| r.gen_range(-1.0..1.0)).collect();
    let grads = tape.backward(&[(out, &weights)]).unwrap();
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        let indices: Vec<usize> = (0..input.len()).collect();
        let numeric = numeric_gradient(
            |x| {
                let mut vals = inputs.to_vec();
                vals[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
                let (t, _, o) = eval(&vals);
                t.value(o).data().iter().zip(&weights).map(|(a, b)| a * b).sum()
            },
            input.data(),
            &indices,
            STEP,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

fn run_op(instances: u64, seed: u64, mut make: impl FnMut(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>)) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (inputs, build) = make(&mut r);
        worst = worst.max(check_op(&inputs, build.as_ref(), &mut r));
    }
    worst
}

pub fn conv2d(instances: u64) -> f64 {
    run_op(instances, 1, |r| {
        let k = if r.gen_bool(0.5) { 3 } else { 1 };
        let stride = r.gen_range(1..=2);
        let (n, cin, cout) = (r.gen_range(1..=2), r.gen_range(1..=3), r.gen_range(1..=3));
        let (h, w) = (r.gen_range(2..=6), r.gen_range(2..=6));
        let inputs = vec![
            random_tensor(r, vec![n, cin, h, w]),
            random_tensor(r, vec![cout, cin, k, k]),
            random_tensor(r, vec![cout]),
        ];
        (inputs, Box::new(move |t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], v[2], stride)))
    })
}

pub fn relu(instances: u64) -> f64 {
    run_op(instances, 2, |r| {
        let inputs = vec![off_kink(r, vec![2, 3, 4])];
        (inputs, Box::new(|t: &mut Tape, v: &[Var]| Ok(t.relu(v[0]))))
    })
}

pub fn sigmoid(instances: u64) -> f64 {
    run_op(instances, 3, |r| {
        let inputs = vec![uniform(r, vec![3, 5], -4.0, 4.0)];
        (inputs, Box::new(|t: &mut Tape, v: &[Var]| Ok(t.sigmoid(v[0]))))
    })
}

pub fn upsample(instances: u64) -> f64 {
    run_op(instances, 4, |r| {
        let shape = vec![r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=4), r.gen_range(1..=4)];
        (vec![random_tensor(r, shape)], Box::new(|t: &mut Tape, v: &[Var]| t.upsample2x(v[0])))
    })
}

pub fn add(instances: u64) -> f64 {
    run_op(instances, 5, |r| {
        let shape = vec![2, r.gen_range(1..=4), 3];
        let inputs = vec![random_tensor(r, shape.clone()), random_tensor(r, shape)];
        (inputs, Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1])))
    })
}

pub fn linear(instances: u64) -> f64 {
    run_op(instances, 6, |r| {
        let (n, i, o) = (r.gen_range(1..=4), r.gen_range(1..=6), r.gen_range(1..=4));
        let inputs = vec![
            random_tensor(r, vec![n, i]),
            random_tensor(r, vec![o, i]),
            random_tensor(r, vec![o]),
        ];
        (inputs, Box::new(|t: &mut Tape, v: &[Var]| t.linear(v[0], v[1], v[2])))
    })
}

pub fn reshape(instances: u64) -> f64 {
    run_op(instances, 7, |r| {
        let (a, b) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let inputs = vec![random_tensor(r, vec![a, b, 2])];
        (
            inputs,
            Box::new(move |t: &mut Tape, v: &[Var]| {
                let s = t.sigmoid(v[0]);
                t.reshape(s, vec![a * 2, b])
            }),
        )
    })
}

pub fn crop(instances: u64) -> f64 {
    run_op(instances, 8, |r| {
        let (h, w) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let (ch, cw) = (r.gen_range(1..=h), r.gen_range(1..=w));
        let inputs = vec![random_tensor(r, vec![1, 2, h, w])];
        (inputs, Box::new(move |t: &mut Tape, v: &[Var]| t.crop(v[0], ch, cw)))
    })
}

fn random_box(r: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = r.gen_range(-4.0..extent);
    let y1 = r.gen_range(-4.0..extent);
    BBox::new(x1, y1, x1 + r.gen_range(1.0..extent), y1 + r.gen_range(1.0..extent)).unwrap()
}

fn roi_cfg(r: &mut ChaCha8Rng) -> RoiAlignConfig {
    RoiAlignConfig {
        output_size: (r.gen_range(1..=4), r.gen_range(1..=4)),
        sampling_ratio: r.gen_range(1..=2),
        feature_stride: 4,
    }
}

pub fn roi_align_tape(instances: u64) -> f64 {
    run_op(instances, 9, |r| {
        let (c, h, w) = (r.gen_range(1..=2), r.gen_range(2..=6), r.gen_range(2..=6));
        let cfg = roi_cfg(r);
        let samplers: Vec<RoiSampler> = (0..r.gen_range(1..=3))
            .map(|_| RoiSampler::new(&random_box(r, 4.0 * w as f64), h, w, &cfg).unwrap())
            .collect();
        let inputs = vec![random_tensor(r, vec![c, h, w])];
        (inputs, Box::new(move |t: &mut Tape, v: &[Var]| t.roi_align(v[0], samplers.clone())))
    })
}

pub fn roi_align_function(instances: u64) -> f64 {
    let mut r = rng(10);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (c, h, w) = (r.gen_range(1..=3), r.gen_range(2..=8), r.gen_range(2..=8));
        let cfg = roi_cfg(&mut r);
        let bbox = random_box(&mut r, 4.0 * h as f64);
        let feats = random_tensor(&mut r, vec![c, h, w]);
        let (ph, pw) = cfg.output_size;
        let weights = random_tensor(&mut r, vec![c, ph, pw]);
        let analytic = roi_align_backward(&[c, h, w], &bbox, &cfg, &weights).unwrap();
        let indices: Vec<usize> = (0..feats.len()).collect();
        let numeric = numeric_gradient(
            |x| {
                let f = Tensor::new(vec![c, h, w], x.to_vec()).unwrap();
                let out = roi_align(&f, &bbox, &cfg).unwrap();
                out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
            },
            feats.data(),
            &indices,
            STEP,
        );
        worst = worst.max(max_relative_error(analytic.data(), &numeric));
    }
    worst
}

/// Random 4x4 target maps with hand-placed positives and penalties.
fn random_targets(r: &mut ChaCha8Rng) -> TargetMaps {
    let shape = GridShape::new(16, 16, 4).unwrap();
    let mut t = TargetMaps::empty(shape);
    let n = shape.map_len();
    for i in 0..n {
        if r.gen_bool(0.2) {
            t.pos_mask[i] = true;
            t.center.data_mut()[i] = 1.0;
            t.penalty.data_mut()[i] = 1.0;
            t.log_height.data_mut()[i] = r.gen_range(2.0..5.0);
            t.offset.data_mut()[i] = r.gen_range(0.0..1.0);
            t.offset.data_mut()[n + i] = r.gen_range(0.0..1.0);
        } else if r.gen_bool(0.7) {
            t.penalty.data_mut()[i] = r.gen_range(0.0..0.99);
        }
    }
    t
}

fn probabilities(r: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    uniform(r, shape, 0.01, 0.99)
}

/// Log-height predictions at least 1e-3 away from the L1 kink.
fn log_heights(r: &mut ChaCha8Rng, t: &TargetMaps) -> Tensor {
    let data = t
        .log_height
        .data()
        .iter()
        .map(|&y| {
            let d = r.gen_range(1e-3..1.0);
            if r.gen_bool(0.5) {
                y + d
            } else {
                y - d
            }
        })
        .collect();
    Tensor::new(t.log_height.shape().to_vec(), data).unwrap()
}

fn check_map_loss(
    instances: u64,
    seed: u64,
    make: impl Fn(&mut ChaCha8Rng, &TargetMaps) -> Tensor,
    loss: impl Fn(&Tensor, &TargetMaps) -> (f64, Tensor),
) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let t = random_targets(&mut r);
        let p = make(&mut r, &t);
        let (_, analytic) = loss(&p, &t);
        let indices: Vec<usize> = (0..p.len()).collect();
        let numeric = numeric_gradient(
            |x| loss(&Tensor::new(p.shape().to_vec(), x.to_vec()).unwrap(), &t).0,
            p.data(),
            &indices,
            STEP,
        );
        worst = worst.max(max_relative_error(analytic.data(), &numeric));
    }
    worst
}

pub fn center(instances: u64) -> f64 {
    let fp = FocalParams::default();
    check_map_loss(
        instances,
        11,
        |r, t| probabilities(r, t.center.shape().to_vec()),
        |p, t| center_loss(p, t, &fp).unwrap(),
    )
}

pub fn scale(instances: u64) -> f64 {
    check_map_loss(instances, 12, log_heights, |p, t| scale_loss(p, t).unwrap())
}

pub fn offset(instances: u64) -> f64 {
    check_map_loss(
        instances,
        13,
        |r, t| uniform(r, t.offset.shape().to_vec(), -2.0, 3.0),
        |p, t| offset_loss(p, t).unwrap(),
    )
}

pub fn composite(instances: u64) -> f64 {
    let mut r = rng(14);
    let fp = FocalParams::default();
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let t = random_targets(&mut r);
        let w = LossWeights {
            lambda_r: r.gen_range(0.01..1.0),
            lambda_c: r.gen_range(0.01..1.0),
            lambda_o: r.gen_range(0.01..1.0),
        };
        let pred = FdnPrediction {
            center: probabilities(&mut r, t.center.shape().to_vec()),
            log_height: log_heights(&mut r, &t),
            offset: probabilities(&mut r, t.offset.shape().to_vec()),
        };
        let (_, g) = fdn_loss(&pred, &t, &w, &fp).unwrap();
        let total = |p: &FdnPrediction| fdn_loss(p, &t, &w, &fp).unwrap().0.total;
        let fields: [(&Tensor, &Tensor, usize); 3] = [
            (&pred.center, &g.center, 0),
            (&pred.log_height, &g.log_height, 1),
            (&pred.offset, &g.offset, 2),
        ];
        for (value, grad, which) in fields {
            let indices: Vec<usize> = (0..value.len()).collect();
            let numeric = numeric_gradient(
                |x| {
                    let mut p = pred.clone();
                    let v = Tensor::new(value.shape().to_vec(), x.to_vec()).unwrap();
                    match which {
                        0 => p.center = v,
                        1 => p.log_height = v,
                        _ => p.offset = v,
                    }
                    total(&p)
                },
                value.data(),
                &indices,
                STEP,
            );
            worst = worst.max(max_relative_error(grad.data(), &numeric));
        }
    }
    worst
}

pub fn bce(instances: u64) -> f64 {
    let mut r = rng(15);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = r.gen_range(1..=12);
        let p: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let (_, analytic) = bce_loss(&p, &y).unwrap();
        let indices: Vec<usize> = (0..n).collect();
        let numeric = numeric_gradient(|x| bce_loss(x, &y).unwrap().0, &p, &indices, STEP);
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

fn scene_targets() -> (Tensor, TargetMaps) {
    let img: Vec<f64> = (0..32 * 32)
        .map(|i| {
            let (y, x) = (i / 32, i % 32);
            if (8..28).contains(&y) && (10..18).contains(&x) {
                0.9
            } else {
                0.1 + 0.05 * ((x * 7 + y * 3) % 5) as f64
            }
        })
        .collect();
    let ann = Annotation::visible("s", BBox::new(10.0, 8.0, 18.2, 28.0).unwrap());
    let t = encode_targets(&[ann], GridShape::new(32, 32, 4).unwrap()).unwrap();
    (Tensor::new(vec![1, 1, 32, 32], img).unwrap(), t)
}

fn model_loss(params: &focaldet::nn::params::ParamSet, images: &Tensor, t: &TargetMaps) -> f64 {
    let out = focaldet::nn::model::forward_fdn(params, images).unwrap();
    let pred = out.prediction(0).unwrap();
    fdn_loss(&pred, t, &LossWeights::default(), &FocalParams::default()).unwrap().0.total
}

/// Worst error over `count` random detector parameters of one scene.
pub fn end_to_end(count: usize) -> f64 {
    let (images, targets) = scene_targets();
    let mut params = init_params(5);
    let mut tape = Tape::new();
    let g = build_fdn(&mut tape, &params, &images, true).unwrap();
    let out = FdnOutput::from_graph(&tape, &g);
    let (_, lg) = fdn_loss(&out.prediction(0).unwrap(), &targets, &LossWeights::default(), &FocalParams::default()).unwrap();
    let grads = tape
        .backward(&[
            (g.center, lg.center.data()),
            (g.log_height, lg.log_height.data()),
            (g.offset, lg.offset.data()),
        ])
        .unwrap();

    let mut r = rng(16);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let (name, var) = &g.params[r.gen_range(0..g.params.len())];
        let len = params.require(name).unwrap().len();
        let idx = r.gen_range(0..len);
        let analytic = grads.get(*var).map_or(0.0, |d| d[idx]);
        let orig = params.require(name).unwrap().data()[idx];
        params.require_mut(name).unwrap().data_mut()[idx] = orig + STEP;
        let up = model_loss(&params, &images, &targets);
        params.require_mut(name).unwrap().data_mut()[idx] = orig - STEP;
        let down = model_loss(&params, &images, &targets);
        params.require_mut(name).unwrap().data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(max_relative_error(&[analytic], &[numeric]));
    }
    worst
}

/// Every primitive, loss and ROI Align check with `instances` random cases each.
#[allow(dead_code)]
pub fn all(instances: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("conv2d", conv2d(instances)),
        ("relu", relu(instances)),
        ("sigmoid", sigmoid(instances)),
        ("upsample2x", upsample(instances)),
        ("add", add(instances)),
        ("linear", linear(instances)),
        ("reshape", reshape(instances)),
        ("crop", crop(instances)),
        ("roi_align (tape)", roi_align_tape(instances)),
        ("roi_align", roi_align_function(instances)),
        ("center loss", center(instances)),
        ("scale loss", scale(instances)),
        ("offset loss", offset(instances)),
        ("composite loss", composite(instances)),
        ("bce", bce(instances)),
    ]
}

//! Toy stride-4 detector: a strided conv backbone, a top-down neck that
//! merges levels by bilinear upsampling and addition, and 1x1 heads for
//! center, log-height and offset.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::loss::FdnPrediction;
use crate::suppress::{head_shapes, RoiAlignConfig};

/// Channels of the fused stride-4 feature map fed to every head.
pub const FEATURE_CHANNELS: usize = 16;
pub const OUTPUT_STRIDE: usize = 4;
/// Initial log-height bias, the log of a mid-range pedestrian height.
pub const LOG_HEIGHT_PRIOR: f64 = 4.1588830833596715; // ln 64
pub const CENTER_PRIOR: f64 = 0.01;

struct ConvSpec {
    name: &'static str,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
}

const fn conv(name: &'static str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvSpec {
    ConvSpec {
        name,
        cin,
        cout,
        k,
        stride,
    }
}

const F: usize = FEATURE_CHANNELS;

const LAYERS: [ConvSpec; 14] = [
    conv("backbone.stem", 1, 8, 3, 2),
    conv("backbone.s4", 8, 16, 3, 2),
    conv("backbone.s8", 16, 24, 3, 2),
    conv("backbone.s16", 24, 32, 3, 2),
    conv("backbone.s32", 32, 32, 3, 2),
    conv("backbone.s32b", 32, 32, 3, 1),
    conv("neck.l32", 32, F, 1, 1),
    conv("neck.l16", 32, F, 1, 1),
    conv("neck.l8", 24, F, 1, 1),
    conv("neck.l4", 16, F, 1, 1),
    conv("neck.fuse", F, F, 3, 1),
    conv("fdn.center", F, 1, 1, 1),
    conv("fdn.log_h", F, 1, 1, 1),
    conv("fdn.offset", F, 2, 1, 1),
];

fn weight_name(layer: &str) -> String {
    format!("{layer}.w")
}

fn bias_name(layer: &str) -> String {
    format!("{layer}.b")
}

/// Kaiming-uniform weights, zero biases, and priors on the center and
/// log-height head biases. Includes the suppression head.
pub fn init_params(seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let kaiming = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("consistent shape")
    };
    for l in &LAYERS {
        params.insert(weight_name(l.name), kaiming(vec![l.cout, l.cin, l.k, l.k], &mut rng));
        let bias = match l.name {
            "fdn.center" => (CENTER_PRIOR / (1.0 - CENTER_PRIOR)).ln(),
            "fdn.log_h" => LOG_HEIGHT_PRIOR,
            _ => 0.0,
        };
        params.insert(bias_name(l.name), Tensor::full(vec![l.cout], bias));
    }
    for (name, shape) in head_shapes(F, &RoiAlignConfig::default()) {
        let t = if shape.len() > 1 {
            kaiming(shape, &mut rng)
        } else {
            Tensor::zeros(shape)
        };
        params.insert(name, t);
    }
    params
}

/// Parameters trained by the detection loss (everything but `sup.*`).
pub fn fdn_param_names(params: &ParamSet) -> Vec<String> {
    params.names().into_iter().filter(|n| !n.starts_with("sup.")).collect()
}

/// Tape handles of one detection-network forward pass.
#[derive(Debug)]
pub struct FdnGraph {
    /// `[N, 1, h, w]`, sigmoid.
    pub center: Var,
    /// `[N, 1, h, w]`, linear.
    pub log_height: Var,
    /// `[N, 2, h, w]`, sigmoid.
    pub offset: Var,
    /// `[N, F, h, w]` fused stride-4 features.
    pub features: Var,
    pub params: Vec<(String, Var)>,
}

fn check_images(images: &Tensor) -> Result<(usize, usize, usize)> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::InvalidArgument(format!("images must be [N, 1, H, W], got {s:?}")));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    if n == 0 || h == 0 || w == 0 || h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
        return Err(Error::InvalidArgument(format!(
            "image size {h}x{w} must be non-empty and divisible by {OUTPUT_STRIDE}"
        )));
    }
    Ok((n, h, w))
}

/// Records the detection network on `tape`. Pixel values are shifted by
/// -0.5 before the first convolution.
pub fn build_fdn(tape: &mut Tape, params: &ParamSet, images: &Tensor, trainable: bool) -> Result<FdnGraph> {
    check_images(images)?;
    let mut vars = Vec::with_capacity(2 * LAYERS.len());
    let mut layer = std::collections::HashMap::new();
    for l in &LAYERS {
        let (wn, bn) = (weight_name(l.name), bias_name(l.name));
        let w = params.require(&wn)?;
        w.check_shape(&[l.cout, l.cin, l.k, l.k])?;
        let b = params.require(&bn)?;
        b.check_shape(&[l.cout])?;
        let wv = tape.leaf(w.clone(), trainable);
        let bv = tape.leaf(b.clone(), trainable);
        vars.push((wn, wv));
        vars.push((bn, bv));
        layer.insert(l.name, (wv, bv, l.stride));
    }
    let apply = |tape: &mut Tape, name: &str, x: Var, relu: bool| -> Result<Var> {
        let (w, b, s) = layer[name];
        let y = tape.conv2d(x, w, b, s)?;
        Ok(if relu { tape.relu(y) } else { y })
    };
    let shifted: Vec<f64> = images.data().iter().map(|v| v - 0.5).collect();
    let x = tape.leaf(Tensor::new(images.shape().to_vec(), shifted)?, false);

    let s2 = apply(tape, "backbone.stem", x, true)?;
    let s4 = apply(tape, "backbone.s4", s2, true)?;
    let s8 = apply(tape, "backbone.s8", s4, true)?;
    let s16 = apply(tape, "backbone.s16", s8, true)?;
    let s32 = apply(tape, "backbone.s32", s16, true)?;
    let s32 = apply(tape, "backbone.s32b", s32, true)?;

    let mut top = apply(tape, "neck.l32", s32, false)?;
    for (name, lateral) in [("neck.l16", s16), ("neck.l8", s8), ("neck.l4", s4)] {
        let lat = apply(tape, name, lateral, false)?;
        let up = tape.upsample2x(top)?;
        let ls = tape.value(lat).shape().to_vec();
        let up = tape.crop(up, ls[2], ls[3])?;
        top = tape.add(lat, up)?;
    }
    let features = apply(tape, "neck.fuse", top, true)?;

    let c = apply(tape, "fdn.center", features, false)?;
    let center = tape.sigmoid(c);
    let log_height = apply(tape, "fdn.log_h", features, false)?;
    let o = apply(tape, "fdn.offset", features, false)?;
    let offset = tape.sigmoid(o);
    Ok(FdnGraph {
        center,
        log_height,
        offset,
        features,
        params: vars,
    })
}

/// Forward values of a batch, without gradients.
#[derive(Debug, Clone)]
pub struct FdnOutput {
    pub center: Tensor,
    pub log_height: Tensor,
    pub offset: Tensor,
    pub features: Tensor,
}

impl FdnOutput {
    pub fn from_graph(tape: &Tape, g: &FdnGraph) -> Self {
        FdnOutput {
            center: tape.value(g.center).clone(),
            log_height: tape.value(g.log_height).clone(),
            offset: tape.value(g.offset).clone(),
            features: tape.value(g.features).clone(),
        }
    }

    pub fn batch_len(&self) -> usize {
        self.center.shape()[0]
    }

    /// Prediction maps of batch item `i` as `[h, w]`, `[h, w]`, `[2, h, w]`.
    pub fn prediction(&self, i: usize) -> Result<FdnPrediction> {
        let s = self.center.shape();
        let (h, w) = (s[2], s[3]);
        Ok(FdnPrediction {
            center: Tensor::new(vec![h, w], item(&self.center, i).to_vec())?,
            log_height: Tensor::new(vec![h, w], item(&self.log_height, i).to_vec())?,
            offset: Tensor::new(vec![2, h, w], item(&self.offset, i).to_vec())?,
        })
    }

    /// Features of batch item `i` as `[F, h, w]`.
    pub fn features(&self, i: usize) -> Result<Tensor> {
        let s = self.features.shape();
        Tensor::new(s[1..].to_vec(), item(&self.features, i).to_vec())
    }
}

pub(crate) fn item(t: &Tensor, i: usize) -> &[f64] {
    let per: usize = t.shape()[1..].iter().product();
    &t.data()[i * per..(i + 1) * per]
}

pub fn forward_fdn(params: &ParamSet, images: &Tensor) -> Result<FdnOutput> {
    let mut tape = Tape::new();
    let g = build_fdn(&mut tape, params, images, false)?;
    Ok(FdnOutput::from_graph(&tape, &g))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> Tensor {
        let data = (0..h * w).map(|i| ((i * 7919) % 101) as f64 / 100.0).collect();
        Tensor::new(vec![1, 1, h, w], data).unwrap()
    }

    #[test]
    fn maps_are_quarter_size() {
        let p = init_params(0);
        let out = forward_fdn(&p, &image(64, 64)).unwrap();
        assert_eq!(out.center.shape(), &[1, 1, 16, 16]);
        assert_eq!(out.offset.shape(), &[1, 2, 16, 16]);
        assert_eq!(out.features.shape(), &[1, F, 16, 16]);
        let out = forward_fdn(&p, &image(36, 20)).unwrap();
        assert_eq!(out.center.shape(), &[1, 1, 9, 5]);
    }

    #[test]
    fn output_ranges_and_determinism() {
        let p = init_params(1);
        let a = forward_fdn(&p, &image(64, 64)).unwrap();
        let b = forward_fdn(&p, &image(64, 64)).unwrap();
        assert_eq!(a.center.data(), b.center.data());
        assert!(a.center.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(a.offset.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_bad_dims() {
        let p = init_params(0);
        assert!(forward_fdn(&p, &image(62, 64)).is_err());
        assert!(forward_fdn(&p, &Tensor::zeros(vec![1, 2, 8, 8])).is_err());
    }

    #[test]
    fn init_is_seeded_and_sized() {
        let a = init_params(3);
        assert!(a.same_layout(&init_params(4)));
        assert_eq!(
            a.require("backbone.stem.w").unwrap().data(),
            init_params(3).require("backbone.stem.w").unwrap().data()
        );
        let fdn: usize = fdn_param_names(&a).iter().map(|n| a.require(n).unwrap().len()).sum();
        assert!((20_000..80_000).contains(&fdn), "{fdn}");
        assert!((a.require("fdn.center.b").unwrap().data()[0] - (0.01f64 / 0.99).ln()).abs() < 1e-12);
    }
}

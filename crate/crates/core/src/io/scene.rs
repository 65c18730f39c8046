//! Deterministic synthetic street scenes.
//!
//! Pedestrians are vertically shaded rectangles of aspect 0.41 over a
//! textured background. Flat occluders cover a pedestrian from the bottom,
//! left or right; wide shaded distractors act as hard negatives. Layers are
//! painted far to near (by bottom edge), and each annotation's visible box is
//! the largest rectangle of its box not covered by a nearer layer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{Annotation, BBox};
use crate::nn::tensor::Tensor;

/// Visibility below this marks an annotation as ignored.
pub const IGNORE_VISIBILITY: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_pedestrians: usize,
    pub max_pedestrians: usize,
    pub min_height: f64,
    pub max_height: f64,
    pub aspect_ratio: f64,
    /// Chance that a pedestrian gets its own occluder.
    pub occlusion: f64,
    pub max_distractors: usize,
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 256,
            height: 256,
            min_pedestrians: 1,
            max_pedestrians: 6,
            min_height: 24.0,
            max_height: 120.0,
            aspect_ratio: 0.41,
            occlusion: 0.3,
            max_distractors: 2,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.width > 0
            && self.height > 0
            && self.min_pedestrians <= self.max_pedestrians
            && self.min_height > 0.0
            && self.min_height <= self.max_height
            && self.max_height <= self.height as f64
            && self.aspect_ratio > 0.0
            && self.aspect_ratio * self.max_height <= self.width as f64
            && (0.0..=1.0).contains(&self.occlusion)
            && self.noise >= 0.0
            && self.noise.is_finite();
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid scene config {self:?}")));
        }
        Ok(())
    }
}

pub fn scene_id(index: u64) -> String {
    format!("scene_{index:05}")
}

#[derive(Debug, Clone, Copy)]
enum Paint {
    /// Linear vertical ramp from `top` to `bottom`.
    Shaded { top: f64, bottom: f64 },
    Flat(f64),
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    rect: BBox,
    paint: Paint,
    depth: f64,
    pedestrian: bool,
}

/// One scene as a `[height, width]` image in `[0, 1]` plus its annotations.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> Result<(Tensor, Vec<Annotation>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let (w, h) = (cfg.width as f64, cfg.height as f64);

    let mut layers = Vec::new();
    let count = rng.gen_range(cfg.min_pedestrians..=cfg.max_pedestrians);
    for _ in 0..count {
        let ph = rng.gen_range(cfg.min_height..=cfg.max_height);
        let pw = cfg.aspect_ratio * ph;
        let x1 = rng.gen_range(0.0..=w - pw);
        let y1 = rng.gen_range(0.0..=h - ph);
        let rect = BBox::new(x1, y1, x1 + pw, y1 + ph)?;
        let top = rng.gen_range(0.6..0.95);
        let bottom = top - rng.gen_range(0.15..0.4);
        layers.push(Layer {
            rect,
            paint: Paint::Shaded { top, bottom },
            depth: rect.y2(),
            pedestrian: true,
        });
        if rng.gen_bool(cfg.occlusion) {
            if let Some(occ) = occluder(&mut rng, &rect, w, h) {
                layers.push(Layer {
                    rect: occ,
                    paint: Paint::Flat(rng.gen_range(0.05..0.35)),
                    depth: rect.y2() + 0.5,
                    pedestrian: false,
                });
            }
        }
    }
    for _ in 0..rng.gen_range(0..=cfg.max_distractors) {
        let dh = rng.gen_range(12.0..=(cfg.max_height / 2.0).max(13.0));
        let dw = (dh * rng.gen_range(1.5..3.0)).min(w);
        let x1 = rng.gen_range(0.0..=w - dw);
        let y1 = rng.gen_range(0.0..=(h - dh).max(0.0));
        let rect = BBox::new(x1, y1, x1 + dw, (y1 + dh).min(h))?;
        let top = rng.gen_range(0.55..0.95);
        let bottom = top - rng.gen_range(0.1..0.4);
        layers.push(Layer {
            rect,
            paint: Paint::Shaded { top, bottom },
            depth: rect.y2(),
            pedestrian: false,
        });
    }
    // Stable sort keeps generation order on equal depth.
    layers.sort_by(|a, b| a.depth.total_cmp(&b.depth));

    let mut image = background(&mut rng, cfg.width, cfg.height);
    for l in &layers {
        paint(&mut image, cfg.width, cfg.height, l);
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in image.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }

    let id = scene_id(index);
    let mut annotations = Vec::new();
    for (i, l) in layers.iter().enumerate() {
        if !l.pedestrian {
            continue;
        }
        let covers: Vec<BBox> = layers[i + 1..].iter().filter_map(|o| o.rect.intersection(&l.rect)).collect();
        let Some(vis) = largest_uncovered(&l.rect, &covers) else {
            continue;
        };
        let mut ann = Annotation::new(id.clone(), l.rect, vis, false)?;
        ann.ignore = ann.visibility_ratio() < IGNORE_VISIBILITY;
        annotations.push(ann);
    }
    Ok((Tensor::new(vec![cfg.height, cfg.width], image)?, annotations))
}

fn occluder(rng: &mut ChaCha8Rng, p: &BBox, w: f64, h: f64) -> Option<BBox> {
    let frac = rng.gen_range(0.2..0.85);
    let mx = rng.gen_range(0.0..0.3) * p.width();
    let my = rng.gen_range(0.0..0.2) * p.height();
    let (x1, y1, x2, y2) = match rng.gen_range(0..3) {
        0 => (p.x1() - mx, p.y2() - frac * p.height(), p.x2() + mx, p.y2() + my),
        1 => (p.x1() - mx, p.y1() - my, p.x1() + frac * p.width(), p.y2() + my),
        _ => (p.x2() - frac * p.width(), p.y1() - my, p.x2() + mx, p.y2() + my),
    };
    BBox::new(x1.max(0.0), y1.max(0.0), x2.min(w), y2.min(h)).ok()
}

fn background(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Vec<f64> {
    let base = rng.gen_range(0.2..0.5);
    let amp = rng.gen_range(0.02..0.1);
    let fx = rng.gen_range(0.02..0.15);
    let fy = rng.gen_range(0.02..0.15);
    let (px, py) = (rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3));
    let mut out = Vec::with_capacity(width * height);
    for r in 0..height {
        for c in 0..width {
            out.push(base + amp * (fx * c as f64 + px).sin() * (fy * r as f64 + py).sin());
        }
    }
    out
}

/// Colors every pixel whose center lies inside the layer.
fn paint(image: &mut [f64], width: usize, height: usize, l: &Layer) {
    let r = &l.rect;
    let c0 = (r.x1() - 0.5).ceil().max(0.0) as usize;
    let r0 = (r.y1() - 0.5).ceil().max(0.0) as usize;
    for row in r0..height {
        let cy = row as f64 + 0.5;
        if cy >= r.y2() {
            break;
        }
        if cy < r.y1() {
            continue;
        }
        let v = match l.paint {
            Paint::Flat(v) => v,
            Paint::Shaded { top, bottom } => top + (bottom - top) * (cy - r.y1()) / r.height(),
        };
        for col in c0..width {
            let cx = col as f64 + 0.5;
            if cx >= r.x2() {
                break;
            }
            if cx >= r.x1() {
                image[row * width + col] = v;
            }
        }
    }
}

/// Largest-area axis-aligned sub-rectangle of `outer` that overlaps none of
/// `covers` (all given already clipped to `outer`). `None` if fully covered.
pub fn largest_uncovered(outer: &BBox, covers: &[BBox]) -> Option<BBox> {
    let mut xs = vec![outer.x1(), outer.x2()];
    let mut ys = vec![outer.y1(), outer.y2()];
    for c in covers {
        xs.extend([c.x1(), c.x2()]);
        ys.extend([c.y1(), c.y2()]);
    }
    for v in [&mut xs, &mut ys] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let (nx, ny) = (xs.len() - 1, ys.len() - 1);
    // blocked[j][i] for compressed cell (row j, col i); prefix sums over it.
    let mut pre = vec![0u32; (nx + 1) * (ny + 1)];
    for j in 0..ny {
        for i in 0..nx {
            let cx = 0.5 * (xs[i] + xs[i + 1]);
            let cy = 0.5 * (ys[j] + ys[j + 1]);
            let blocked = covers
                .iter()
                .any(|c| cx > c.x1() && cx < c.x2() && cy > c.y1() && cy < c.y2());
            pre[(j + 1) * (nx + 1) + i + 1] =
                u32::from(blocked) + pre[j * (nx + 1) + i + 1] + pre[(j + 1) * (nx + 1) + i] - pre[j * (nx + 1) + i];
        }
    }
    let sum = |i0: usize, j0: usize, i1: usize, j1: usize| {
        pre[j1 * (nx + 1) + i1] + pre[j0 * (nx + 1) + i0] - pre[j0 * (nx + 1) + i1] - pre[j1 * (nx + 1) + i0]
    };
    let mut best: Option<(f64, [usize; 4])> = None;
    for i0 in 0..nx {
        for i1 in i0 + 1..=nx {
            for j0 in 0..ny {
                for j1 in j0 + 1..=ny {
                    if sum(i0, j0, i1, j1) != 0 {
                        break;
                    }
                    let area = (xs[i1] - xs[i0]) * (ys[j1] - ys[j0]);
                    if best.is_none_or(|(a, _)| area > a) {
                        best = Some((area, [i0, j0, i1, j1]));
                    }
                }
            }
        }
    }
    best.and_then(|(_, [i0, j0, i1, j1])| BBox::new(xs[i0], ys[j0], xs[i1], ys[j1]).ok())
}

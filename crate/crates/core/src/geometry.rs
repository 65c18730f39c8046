//! Boxes, annotations, detections and the stride grid they are encoded on.

use crate::error::{Error, Result};

/// Axis-aligned box in continuous image-pixel coordinates, corner form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if !finite || x2 <= x1 || y2 <= y1 {
            return Err(Error::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Box of the given height centered at `(cx, cy)`.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self> {
        Self::new(
            cx - width / 2.0,
            cy - height / 2.0,
            cx + width / 2.0,
            cy + height / 2.0,
        )
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.y1 >= self.y1 && other.x2 <= self.x2 && other.y2 <= self.y2
    }

    /// Area of the overlap with `other`, zero when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection with `other`, `None` when the overlap has no area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        BBox::new(
            self.x1.max(other.x1),
            self.y1.max(other.y1),
            self.x2.min(other.x2),
            self.y2.min(other.y2),
        )
        .ok()
    }

    /// Clip to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Result<BBox> {
        BBox::new(
            self.x1.max(0.0),
            self.y1.max(0.0),
            self.x2.min(width),
            self.y2.min(height),
        )
    }
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection over the area of `a`.
pub fn ioa(a: &BBox, b: &BBox) -> f64 {
    (a.intersection_area(b) / a.area()).clamp(0.0, 1.0)
}

/// Ground-truth pedestrian.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image_id: String,
    pub bbox: BBox,
    pub visible_box: BBox,
    pub ignore: bool,
}

impl Annotation {
    pub fn new(image_id: impl Into<String>, bbox: BBox, visible_box: BBox, ignore: bool) -> Result<Self> {
        if !bbox.contains(&visible_box) {
            return Err(Error::InvalidAnnotation(format!(
                "visible box {:?} is not inside box {:?}",
                visible_box.to_array(),
                bbox.to_array()
            )));
        }
        Ok(Annotation {
            image_id: image_id.into(),
            bbox,
            visible_box,
            ignore,
        })
    }

    /// Fully visible annotation.
    pub fn visible(image_id: impl Into<String>, bbox: BBox) -> Self {
        Annotation {
            image_id: image_id.into(),
            bbox,
            visible_box: bbox,
            ignore: false,
        }
    }

    pub fn visibility_ratio(&self) -> f64 {
        self.visible_box.area() / self.bbox.area()
    }

    pub fn height(&self) -> f64 {
        self.bbox.height()
    }
}

/// Decoded box with its detection probability and, after the second stage,
/// its suppression probability. `score` is always derived from the two.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    image_id: String,
    bbox: BBox,
    p_detect: f64,
    p_suppress: Option<f64>,
    score: f64,
}

fn check_probability(what: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidDetection(format!("{what} = {p} is not in [0, 1]")));
    }
    Ok(())
}

impl Detection {
    pub fn new(image_id: impl Into<String>, bbox: BBox, p_detect: f64) -> Result<Self> {
        check_probability("p_detect", p_detect)?;
        Ok(Detection {
            image_id: image_id.into(),
            bbox,
            p_detect,
            p_suppress: None,
            score: p_detect,
        })
    }

    /// Attach a suppression probability; the score becomes
    /// `p_detect * (1 - p_suppress)`.
    pub fn with_suppression(mut self, p_suppress: f64) -> Result<Self> {
        check_probability("p_suppress", p_suppress)?;
        self.p_suppress = Some(p_suppress);
        self.score = self.p_detect * (1.0 - p_suppress);
        Ok(self)
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }
    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }
    pub fn p_detect(&self) -> f64 {
        self.p_detect
    }
    pub fn p_suppress(&self) -> Option<f64> {
        self.p_suppress
    }
    pub fn score(&self) -> f64 {
        self.score
    }
}

/// Image size and the downsampling factor of the prediction maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridShape {
    pub height_px: usize,
    pub width_px: usize,
    pub stride: usize,
}

impl GridShape {
    pub const DEFAULT_STRIDE: usize = 4;

    pub fn new(height_px: usize, width_px: usize, stride: usize) -> Result<Self> {
        if height_px == 0 || width_px == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid shape {height_px}x{width_px} stride {stride} must be positive"
            )));
        }
        Ok(GridShape {
            height_px,
            width_px,
            stride,
        })
    }

    pub fn map_height(&self) -> usize {
        self.height_px.div_ceil(self.stride)
    }

    pub fn map_width(&self) -> usize {
        self.width_px.div_ceil(self.stride)
    }

    pub fn map_len(&self) -> usize {
        self.map_height() * self.map_width()
    }
}

//! Log-average miss rate (MR-2) benchmark protocol.
//!
//! Annotations are split per evaluation setting into an evaluated set and an
//! ignored set. Detections are greedily matched per image in score order;
//! the resulting outcomes are swept over all score thresholds to trace the
//! miss-rate vs. false-positives-per-image curve, which is sampled at nine
//! log-spaced FPPI values in `[1e-2, 1]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::decode::score_order;
use crate::error::{Error, Result};
use crate::geometry::{ioa, iou, Annotation, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SettingName {
    Reasonable,
    Small,
    HeavyOcclusion,
    All,
}

impl SettingName {
    pub const ALL: [SettingName; 4] = [
        SettingName::Reasonable,
        SettingName::Small,
        SettingName::HeavyOcclusion,
        SettingName::All,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SettingName::Reasonable => "reasonable",
            SettingName::Small => "small",
            SettingName::HeavyOcclusion => "heavy",
            SettingName::All => "all",
        }
    }
}

impl fmt::Display for SettingName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SettingName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "reasonable" => Ok(SettingName::Reasonable),
            "small" => Ok(SettingName::Small),
            "heavy" | "heavyocclusion" => Ok(SettingName::HeavyOcclusion),
            "all" => Ok(SettingName::All),
            _ => Err(Error::InvalidArgument(format!(
                "unknown setting `{s}`; valid settings: reasonable, small, heavy, all"
            ))),
        }
    }
}

/// Which dataset family's ranges to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Convention {
    /// City Persons and Caltech.
    CityPersons,
    /// Euro City Persons.
    EuroCityPersons,
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cp" | "caltech" | "citypersons" => Ok(Convention::CityPersons),
            "ecp" | "eurocitypersons" => Ok(Convention::EuroCityPersons),
            _ => Err(Error::InvalidArgument(format!(
                "unknown convention `{s}`; valid conventions: cp, ecp"
            ))),
        }
    }
}

/// Closed visibility and height intervals; `f64::INFINITY` for open ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSetting {
    pub name: SettingName,
    pub convention: Convention,
    pub visibility_range: (f64, f64),
    pub height_range: (f64, f64),
}

impl EvalSetting {
    pub fn new(name: SettingName, convention: Convention) -> Self {
        const INF: f64 = f64::INFINITY;
        let (visibility_range, height_range) = match (convention, name) {
            (Convention::CityPersons, SettingName::Reasonable) => ((0.65, INF), (50.0, INF)),
            (Convention::CityPersons, SettingName::Small) => ((0.65, INF), (50.0, 75.0)),
            (Convention::CityPersons, SettingName::HeavyOcclusion) => ((0.2, 0.65), (50.0, INF)),
            (Convention::CityPersons, SettingName::All) => ((0.2, INF), (20.0, INF)),
            (Convention::EuroCityPersons, SettingName::Reasonable) => ((0.6, INF), (40.0, INF)),
            (Convention::EuroCityPersons, SettingName::Small) => ((0.6, INF), (30.0, 60.0)),
            (Convention::EuroCityPersons, SettingName::HeavyOcclusion) => ((0.2, 0.6), (40.0, INF)),
            (Convention::EuroCityPersons, SettingName::All) => ((0.2, INF), (20.0, INF)),
        };
        EvalSetting {
            name,
            convention,
            visibility_range,
            height_range,
        }
    }

    pub fn admits(&self, ann: &Annotation) -> bool {
        let v = ann.visibility_ratio();
        let h = ann.height();
        !ann.ignore
            && v >= self.visibility_range.0
            && v <= self.visibility_range.1
            && h >= self.height_range.0
            && h <= self.height_range.1
    }
}

/// Splits annotations into (evaluated, ignored) for `setting`.
pub fn filter_setting(annotations: &[Annotation], setting: &EvalSetting) -> (Vec<Annotation>, Vec<Annotation>) {
    annotations.iter().cloned().partition(|a| setting.admits(a))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectionOutcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

/// Matching result of one image; `detections` is aligned with the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    pub detections: Vec<(f64, DetectionOutcome)>,
    /// Per evaluated annotation: was it matched.
    pub matched: Vec<bool>,
}

impl ImageMatch {
    pub fn num_gt(&self) -> usize {
        self.matched.len()
    }
}

/// Greedy matching in descending score order: each detection takes the
/// highest-IoU unmatched evaluated annotation with IoU >= `iou_threshold`;
/// otherwise it is ignored if it covers an ignored annotation at ioa >=
/// `iou_threshold`, else it is a false positive.
pub fn match_image(
    detections: &[Detection],
    evaluated: &[Annotation],
    ignored: &[Annotation],
    iou_threshold: f64,
) -> ImageMatch {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| score_order(&detections[a], &detections[b]).then(a.cmp(&b)));
    let mut matched = vec![false; evaluated.len()];
    let mut outcomes = vec![DetectionOutcome::FalsePositive; detections.len()];
    for di in order {
        let d = detections[di].bbox();
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in evaluated.iter().enumerate() {
            if matched[gi] {
                continue;
            }
            let o = iou(d, &g.bbox);
            if o >= iou_threshold && best.is_none_or(|(_, b)| o > b) {
                best = Some((gi, o));
            }
        }
        outcomes[di] = if let Some((gi, _)) = best {
            matched[gi] = true;
            DetectionOutcome::TruePositive
        } else if ignored.iter().any(|g| ioa(d, &g.bbox) >= iou_threshold) {
            DetectionOutcome::Ignored
        } else {
            DetectionOutcome::FalsePositive
        };
    }
    ImageMatch {
        detections: detections.iter().map(|d| d.score()).zip(outcomes).collect(),
        matched,
    }
}

/// Reference FPPI values `10^-2, 10^-1.75, ..., 10^0`.
pub fn reference_fppi() -> [f64; 9] {
    let mut out = [0.0; 9];
    for (i, r) in out.iter_mut().enumerate() {
        *r = match i {
            0 => 0.01,
            4 => 0.1,
            8 => 1.0,
            _ => 10f64.powf(-2.0 + 0.25 * i as f64),
        };
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    pub fppi: f64,
    pub miss_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalCounts {
    pub images: usize,
    pub ground_truth: usize,
    pub matched: usize,
    pub missed: usize,
    pub false_positives: usize,
    pub ignored_detections: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mr2: f64,
    /// Operating points in descending threshold order.
    pub curve: Vec<CurvePoint>,
    /// Miss rates sampled at [`reference_fppi`].
    pub sampled_miss_rates: [f64; 9],
    pub counts: EvalCounts,
}

/// Geometric mean with an exact zero whenever a factor is zero.
pub fn log_average(values: &[f64]) -> f64 {
    if values.iter().any(|&v| v <= 0.0) {
        return 0.0;
    }
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

/// Sweeps all score thresholds over the per-image outcomes.
pub fn mr2(images: &[ImageMatch], n_images: usize) -> Result<EvalResult> {
    if n_images == 0 {
        return Err(Error::Empty("MR-2 over zero images"));
    }
    let n_gt: usize = images.iter().map(ImageMatch::num_gt).sum();
    if n_gt == 0 {
        return Err(Error::Empty("no annotations in the evaluated setting"));
    }
    let mut scored: Vec<(f64, bool)> = Vec::new();
    let mut ignored_detections = 0;
    for im in images {
        for &(s, o) in &im.detections {
            match o {
                DetectionOutcome::TruePositive => scored.push((s, true)),
                DetectionOutcome::FalsePositive => scored.push((s, false)),
                DetectionOutcome::Ignored => ignored_detections += 1,
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut curve = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < scored.len() {
        let thr = scored[i].0;
        while i < scored.len() && scored[i].0 == thr {
            if scored[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        curve.push(CurvePoint {
            threshold: thr,
            fppi: fp as f64 / n_images as f64,
            miss_rate: 1.0 - tp as f64 / n_gt as f64,
        });
    }

    let mut sampled = [1.0; 9];
    for (slot, r) in sampled.iter_mut().zip(reference_fppi()) {
        if let Some(p) = curve.iter().rev().find(|p| p.fppi <= r) {
            *slot = p.miss_rate;
        }
    }
    Ok(EvalResult {
        mr2: log_average(&sampled),
        curve,
        sampled_miss_rates: sampled,
        counts: EvalCounts {
            images: n_images,
            ground_truth: n_gt,
            matched: tp,
            missed: n_gt - tp,
            false_positives: fp,
            ignored_detections,
        },
    })
}

/// Full protocol over a dataset: filter, match per image, sweep.
///
/// Images are the union of `image_ids`, annotation ids and detection ids.
pub fn evaluate(
    detections: &[Detection],
    annotations: &[Annotation],
    image_ids: &[String],
    setting: &EvalSetting,
    iou_threshold: f64,
) -> Result<EvalResult> {
    let mut ids: BTreeSet<&str> = image_ids.iter().map(String::as_str).collect();
    ids.extend(annotations.iter().map(|a| a.image_id.as_str()));
    ids.extend(detections.iter().map(|d| d.image_id()));
    let mut annos: BTreeMap<&str, Vec<Annotation>> = BTreeMap::new();
    for a in annotations {
        annos.entry(a.image_id.as_str()).or_default().push(a.clone());
    }
    let mut dets: BTreeMap<&str, Vec<Detection>> = BTreeMap::new();
    for d in detections {
        dets.entry(d.image_id()).or_default().push(d.clone());
    }
    let matches: Vec<ImageMatch> = ids
        .iter()
        .map(|id| {
            let a = annos.get(id).map(Vec::as_slice).unwrap_or(&[]);
            let (ev, ig) = filter_setting(a, setting);
            let d = dets.get(id).map(Vec::as_slice).unwrap_or(&[]);
            match_image(d, &ev, &ig, iou_threshold)
        })
        .collect();
    mr2(&matches, ids.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;

    fn ann(h: f64, vis: f64) -> Annotation {
        let full = BBox::new(0.0, 0.0, 0.41 * h, h).unwrap();
        let visible = BBox::new(0.0, 0.0, 0.41 * h, h * vis).unwrap();
        Annotation::new("i", full, visible, false).unwrap()
    }

    #[test]
    fn settings_table() {
        use Convention::*;
        use SettingName::*;
        let inf = f64::INFINITY;
        let rows = [
            (CityPersons, Reasonable, (0.65, inf), (50.0, inf)),
            (CityPersons, Small, (0.65, inf), (50.0, 75.0)),
            (CityPersons, HeavyOcclusion, (0.2, 0.65), (50.0, inf)),
            (CityPersons, All, (0.2, inf), (20.0, inf)),
            (EuroCityPersons, Reasonable, (0.6, inf), (40.0, inf)),
            (EuroCityPersons, Small, (0.6, inf), (30.0, 60.0)),
            (EuroCityPersons, HeavyOcclusion, (0.2, 0.6), (40.0, inf)),
            (EuroCityPersons, All, (0.2, inf), (20.0, inf)),
        ];
        for (c, n, v, h) in rows {
            let s = EvalSetting::new(n, c);
            assert_eq!(s.visibility_range, v);
            assert_eq!(s.height_range, h);
        }
    }

    #[test]
    fn filter_examples() {
        let cp = |n| EvalSetting::new(n, Convention::CityPersons);
        let ecp = |n| EvalSetting::new(n, Convention::EuroCityPersons);
        assert!(cp(SettingName::Reasonable).admits(&ann(60.0, 0.7)));
        assert!(cp(SettingName::HeavyOcclusion).admits(&ann(60.0, 0.3)));
        assert!(!cp(SettingName::Reasonable).admits(&ann(60.0, 0.3)));
        assert!(ecp(SettingName::Small).admits(&ann(35.0, 0.9)));
        assert!(!ecp(SettingName::Reasonable).admits(&ann(35.0, 0.9)));
        let mut ignored = ann(60.0, 0.7);
        ignored.ignore = true;
        let (ev, ig) = filter_setting(&[ignored], &cp(SettingName::Reasonable));
        assert!(ev.is_empty());
        assert_eq!(ig.len(), 1);
    }

    #[test]
    fn setting_names_parse() {
        assert_eq!("Heavy-Occlusion".parse::<SettingName>().unwrap(), SettingName::HeavyOcclusion);
        let err = "tiny".parse::<SettingName>().unwrap_err().to_string();
        assert!(err.contains("reasonable"));
    }

    fn gt(x: f64) -> Annotation {
        Annotation::visible("i", BBox::new(x, 0.0, x + 41.0, 100.0).unwrap())
    }

    fn det(x: f64, s: f64) -> Detection {
        Detection::new("i", BBox::new(x, 0.0, x + 41.0, 100.0).unwrap(), s).unwrap()
    }

    #[test]
    fn duplicate_detection_is_one_tp_one_fp() {
        let m = match_image(&[det(0.0, 0.9), det(1.0, 0.8)], &[gt(0.0)], &[], 0.5);
        assert_eq!(m.detections[0].1, DetectionOutcome::TruePositive);
        assert_eq!(m.detections[1].1, DetectionOutcome::FalsePositive);
        assert_eq!(m.matched, vec![true]);
    }

    #[test]
    fn detections_on_ignored_regions_are_ignored() {
        let m = match_image(&[det(0.0, 0.9)], &[], &[gt(0.0)], 0.5);
        assert_eq!(m.detections[0].1, DetectionOutcome::Ignored);
    }

    #[test]
    fn perfect_and_empty_detectors() {
        let gts = [gt(0.0), gt(100.0)];
        let perfect = match_image(&[det(0.0, 0.9), det(100.0, 0.8)], &gts, &[], 0.5);
        assert_eq!(mr2(&[perfect], 1).unwrap().mr2, 0.0);
        let empty = match_image(&[], &gts, &[], 0.5);
        let r = mr2(&[empty], 1).unwrap();
        assert_eq!(r.mr2, 1.0);
        assert_eq!(r.counts.missed, 2);
    }

    #[test]
    fn errors_without_images_or_ground_truth() {
        assert!(mr2(&[], 0).is_err());
        let m = match_image(&[det(0.0, 0.9)], &[], &[], 0.5);
        assert!(mr2(&[m], 1).is_err());
    }

    #[test]
    fn log_average_zero_convention() {
        assert_eq!(log_average(&[0.5, 0.0, 1.0]), 0.0);
        assert!((log_average(&[0.25, 1.0]) - 0.5).abs() < 1e-15);
    }
}

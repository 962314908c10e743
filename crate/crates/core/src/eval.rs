//! Average precision for BEV detection with KITTI difficulty levels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::bev::GridSpec;
use crate::class::{ObjectClass, NUM_CLASSES};
use crate::erpn::Detection3d;
use crate::geometry::{rotated_iou, OrientedBox};
use crate::kitti::{self, Calibration, ImageSize, KittiError, KittiLabel};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("frames without detections: {}", .0.join(", "))]
    MissingDetections(Vec<String>),
    #[error("detections for unknown frames: {}", .0.join(", "))]
    UnknownFrames(Vec<String>),
    #[error("frame {id}: {source}")]
    Frame {
        id: String,
        #[source]
        source: KittiError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyThresholds {
    pub min_height: f64,
    pub max_occlusion: i32,
    pub max_truncation: f64,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "Easy",
            Difficulty::Moderate => "Moderate",
            Difficulty::Hard => "Hard",
        }
    }

    pub fn thresholds(self) -> DifficultyThresholds {
        let t = |min_height, max_occlusion, max_truncation| DifficultyThresholds {
            min_height,
            max_occlusion,
            max_truncation,
        };
        match self {
            Difficulty::Easy => t(40.0, 0, 0.15),
            Difficulty::Moderate => t(25.0, 1, 0.30),
            Difficulty::Hard => t(25.0, 2, 0.50),
        }
    }

    pub fn admits(self, label: &KittiLabel) -> bool {
        let t = self.thresholds();
        label.bbox_height() >= t.min_height
            && (0..=t.max_occlusion).contains(&label.occlusion)
            && (0.0..=t.max_truncation).contains(&label.truncation)
    }
}

/// Levels the label counts toward.
pub fn difficulty_of(label: &KittiLabel) -> BTreeSet<Difficulty> {
    Difficulty::ALL.into_iter().filter(|d| d.admits(label)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalGt {
    pub bbox: OrientedBox,
    pub class: ObjectClass,
    /// Outside the evaluated population: matching it neither helps nor hurts.
    pub ignored: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalDet {
    pub bbox: OrientedBox,
    pub class: ObjectClass,
    pub score: f64,
    /// Image-plane box, for the DontCare test.
    pub bbox_2d: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMatch {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(detection, ground truth)` index pairs counted as true positives.
    pub pairs: Vec<(usize, usize)>,
    /// `(score, is_true_positive)` for every counted detection.
    pub scored: Vec<(f64, bool)>,
    /// Ground truths that are not ignored.
    pub n_gt: usize,
}

pub fn iou_2d(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Greedy matching in descending score order. Each detection takes the
/// unmatched same-class ground truth it overlaps most, provided the overlap
/// reaches `iou_threshold`. Detections matched to ignored ground truths, and
/// unmatched detections covering a DontCare region with 2D IoU >= 0.5, are
/// not counted.
pub fn match_frame(dets: &[EvalDet], gts: &[EvalGt], dont_care: &[[f64; 4]], iou_threshold: f64) -> FrameMatch {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].score.total_cmp(&dets[i].score));
    let mut taken = vec![false; gts.len()];
    let mut out = FrameMatch {
        n_gt: gts.iter().filter(|g| !g.ignored).count(),
        ..FrameMatch::default()
    };
    for &d in &order {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class != det.class {
                continue;
            }
            let iou = rotated_iou(&det.bbox, &gt.bbox);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                taken[g] = true;
                if !gts[g].ignored {
                    out.tp += 1;
                    out.pairs.push((d, g));
                    out.scored.push((det.score, true));
                }
            }
            None => {
                let in_dont_care = det
                    .bbox_2d
                    .is_some_and(|b| dont_care.iter().any(|dc| iou_2d(&b, dc) >= 0.5));
                if !in_dont_care {
                    out.fp += 1;
                    out.scored.push((det.score, false));
                }
            }
        }
    }
    out.fn_ = out.n_gt - out.tp;
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    ElevenPoint,
    FortyPoint,
}

impl Interpolation {
    fn recall_levels(self) -> Vec<f64> {
        match self {
            Interpolation::ElevenPoint => (0..=10).map(|i| i as f64 / 10.0).collect(),
            Interpolation::FortyPoint => (1..=40).map(|i| i as f64 / 40.0).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` after each ranked detection.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
    pub n_gt: usize,
}

/// Interpolated AP of a ranked list of `(score, is_true_positive)` against
/// `n_gt` ground truths. Ties in score rank true positives first.
pub fn average_precision_scored(scored: &[(f64, bool)], n_gt: usize, interp: Interpolation) -> PrCurve {
    let mut ranked = scored.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    let mut points = Vec::with_capacity(ranked.len());
    let mut tp = 0usize;
    for (i, (_, is_tp)) in ranked.iter().enumerate() {
        tp += usize::from(*is_tp);
        let recall = if n_gt > 0 { tp as f64 / n_gt as f64 } else { 0.0 };
        points.push((recall, tp as f64 / (i + 1) as f64));
    }
    let ap = if n_gt == 0 {
        0.0
    } else {
        let levels = interp.recall_levels();
        let sum: f64 = levels
            .iter()
            .map(|&r| {
                points
                    .iter()
                    .filter(|(rec, _)| *rec >= r)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max)
            })
            .sum();
        sum / levels.len() as f64
    };
    PrCurve { points, ap, n_gt }
}

/// AP over the pooled detections of several frames.
pub fn average_precision(frames: &[FrameMatch], interp: Interpolation) -> PrCurve {
    let scored: Vec<(f64, bool)> = frames.iter().flat_map(|f| f.scored.iter().copied()).collect();
    let n_gt = frames.iter().map(|f| f.n_gt).sum();
    average_precision_scored(&scored, n_gt, interp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub roi: GridSpec,
    pub image: ImageSize,
    pub interpolation: Interpolation,
    /// BEV IoU threshold per class, indexed by [`ObjectClass::index`].
    pub iou_thresholds: [f64; NUM_CLASSES],
}

impl Default for EvalConfig {
    fn default() -> Self {
        let mut iou_thresholds = [0.5; NUM_CLASSES];
        iou_thresholds[ObjectClass::Car.index()] = 0.7;
        Self {
            roi: GridSpec::default(),
            image: ImageSize::default(),
            interpolation: Interpolation::default(),
            iou_thresholds,
        }
    }
}

/// Ground truth and calibration of one frame.
#[derive(Debug, Clone)]
pub struct FrameData {
    pub id: String,
    pub labels: Vec<KittiLabel>,
    pub calib: Calibration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApTable {
    pub classes: Vec<ObjectClass>,
    pub difficulties: Vec<Difficulty>,
    /// `curves[class][difficulty]`.
    pub curves: Vec<Vec<PrCurve>>,
}

impl ApTable {
    /// AP, or `None` when no ground truth was evaluated in that cell.
    pub fn ap(&self, class: ObjectClass, difficulty: Difficulty) -> Option<f64> {
        let c = self.classes.iter().position(|&k| k == class)?;
        let d = self.difficulties.iter().position(|&k| k == difficulty)?;
        let curve = &self.curves[c][d];
        (curve.n_gt > 0).then_some(curve.ap)
    }

    fn cell(&self, c: usize, d: usize) -> Option<f64> {
        let curve = &self.curves[c][d];
        (curve.n_gt > 0).then_some(curve.ap * 100.0)
    }

    /// Aligned text, one row per class, AP in percent.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<16}", "Class");
        for d in &self.difficulties {
            write!(s, "{:>10}", d.name()).unwrap();
        }
        s.push('\n');
        for (c, class) in self.classes.iter().enumerate() {
            write!(s, "{:<16}", class.name()).unwrap();
            for d in 0..self.difficulties.len() {
                match self.cell(c, d) {
                    Some(v) => write!(s, "{v:>10.2}").unwrap(),
                    None => write!(s, "{:>10}", "-").unwrap(),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("class");
        for d in &self.difficulties {
            write!(s, ",{}", d.name().to_lowercase()).unwrap();
        }
        s.push('\n');
        for (c, class) in self.classes.iter().enumerate() {
            s.push_str(class.name());
            for d in 0..self.difficulties.len() {
                match self.cell(c, d) {
                    Some(v) => write!(s, ",{v:.4}").unwrap(),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Per (class, difficulty) AP. Ground truths outside the ROI, outside the
/// image or outside the difficulty level are ignored; detections outside the
/// ROI or the image are dropped.
pub fn evaluate(
    frames: &[FrameData],
    dets: &BTreeMap<String, Vec<Detection3d>>,
    classes: &[ObjectClass],
    difficulties: &[Difficulty],
    cfg: &EvalConfig,
) -> Result<ApTable, EvalError> {
    let missing: Vec<String> = frames
        .iter()
        .filter(|f| !dets.contains_key(&f.id))
        .map(|f| f.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingDetections(missing));
    }
    let known: BTreeSet<&str> = frames.iter().map(|f| f.id.as_str()).collect();
    let unknown: Vec<String> = dets.keys().filter(|k| !known.contains(k.as_str())).cloned().collect();
    if !unknown.is_empty() {
        return Err(EvalError::UnknownFrames(unknown));
    }

    let visible = |b: &kitti::Box3d, calib: &Calibration| {
        cfg.roi.contains_xy(b.bev.bbox.cx, b.bev.bbox.cy) && kitti::in_image_plane(b, calib, cfg.image)
    };

    let mut matches = vec![vec![Vec::with_capacity(frames.len()); difficulties.len()]; classes.len()];
    for frame in frames {
        let frame_err = |source| EvalError::Frame {
            id: frame.id.clone(),
            source,
        };
        let mut gt_boxes = Vec::new();
        let mut dont_care = Vec::new();
        for label in &frame.labels {
            if label.is_dont_care() {
                dont_care.push(label.bbox);
            } else {
                let b = kitti::label_to_velo(label, &frame.calib).map_err(frame_err)?;
                gt_boxes.push((label, b, visible(&b, &frame.calib)));
            }
        }
        let mut frame_dets = Vec::new();
        for d in &dets[&frame.id] {
            let b = kitti::detection_to_box(d);
            if !visible(&b, &frame.calib) {
                continue;
            }
            let label = kitti::box_to_label(&b, &frame.calib, None, cfg.image).map_err(frame_err)?;
            frame_dets.push(EvalDet {
                bbox: d.det.bbox,
                class: d.det.class,
                score: d.det.score,
                bbox_2d: Some(label.bbox),
            });
        }
        for (ci, &class) in classes.iter().enumerate() {
            let class_dets: Vec<EvalDet> = frame_dets.iter().filter(|d| d.class == class).cloned().collect();
            for (di, &diff) in difficulties.iter().enumerate() {
                let gts: Vec<EvalGt> = gt_boxes
                    .iter()
                    .filter(|(_, b, _)| b.bev.class == class)
                    .map(|(label, b, vis)| EvalGt {
                        bbox: b.bev.bbox,
                        class,
                        ignored: !(*vis && diff.admits(label)),
                    })
                    .collect();
                matches[ci][di].push(match_frame(
                    &class_dets,
                    &gts,
                    &dont_care,
                    cfg.iou_thresholds[class.index()],
                ));
            }
        }
    }

    let curves = matches
        .iter()
        .map(|per_diff| {
            per_diff
                .iter()
                .map(|m| average_precision(m, cfg.interpolation))
                .collect()
        })
        .collect();
    Ok(ApTable {
        classes: classes.to_vec(),
        difficulties: difficulties.to_vec(),
        curves,
    })
}

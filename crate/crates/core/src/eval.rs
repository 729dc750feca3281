//! Rotated-rectangle IoU and interpolated average precision.

use serde::{Deserialize, Serialize};

use crate::decoder::Detection;
use crate::error::{ensure, Result};
use crate::par;
use crate::targets::Box3D;

const DEDUP_EPS: f64 = 1e-9;

/// Signed shoelace area; positive for counter-clockwise vertices.
pub fn signed_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum::<f64>()
        / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn dedup(poly: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = Vec::with_capacity(poly.len());
    for p in poly {
        if out.last().is_none_or(|q| (p[0] - q[0]).abs() > DEDUP_EPS || (p[1] - q[1]).abs() > DEDUP_EPS) {
            out.push(p);
        }
    }
    while out.len() > 1 {
        let (f, l) = (out[0], out[out.len() - 1]);
        if (f[0] - l[0]).abs() <= DEDUP_EPS && (f[1] - l[1]).abs() <= DEDUP_EPS {
            out.pop();
        } else {
            break;
        }
    }
    out
}

/// Intersection of two counter-clockwise convex polygons by clipping
/// `subject` against each edge of `clip` in turn.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (dp, dq) = (cross(a, b, p), cross(a, b, q));
            if dp >= 0.0 {
                out.push(p);
            }
            if (dp >= 0.0) != (dq >= 0.0) {
                let t = dp / (dp - dq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
        out = dedup(out);
    }
    if out.len() < 3 {
        Vec::new()
    } else {
        out
    }
}

fn footprint_checked(b: &Box3D) -> Result<[[f64; 2]; 4]> {
    ensure!(
        b.dims.iter().all(|&d| d > 0.0),
        Contract,
        "box with non-positive dimensions {:?}",
        b.dims
    );
    Ok(b.footprint())
}

/// Area of the ground-plane footprint intersection.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> Result<f64> {
    let (pa, pb) = (footprint_checked(a)?, footprint_checked(b)?);
    Ok(signed_area(&clip_convex(&pa, &pb)).max(0.0))
}

/// Birds-eye-view IoU of the two yaw-rotated footprints.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> Result<f64> {
    let inter = bev_intersection(a, b)?;
    let union = a.width() * a.length() + b.width() * b.length() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Volumetric IoU; vertical extents are `center.y +- h/2`.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> Result<f64> {
    let inter_area = bev_intersection(a, b)?;
    let lo = (a.center[1] - a.height() / 2.0).max(b.center[1] - b.height() / 2.0);
    let hi = (a.center[1] + a.height() / 2.0).min(b.center[1] + b.height() / 2.0);
    let inter = inter_area * (hi - lo).max(0.0);
    let vol = |x: &Box3D| x.dims.iter().product::<f64>();
    let union = vol(a) + vol(b) - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Which overlap measure decides a match.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bev,
    ThreeD,
}

/// KITTI difficulty tiers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    /// Minimum 2D box height (px), maximum occlusion level and maximum truncation.
    pub fn limits(self) -> (f64, i32, f64) {
        match self {
            Difficulty::Easy => (40.0, 0, 0.15),
            Difficulty::Moderate => (25.0, 1, 0.30),
            Difficulty::Hard => (25.0, 2, 0.50),
        }
    }

    pub fn admits(self, bbox_height: f64, occluded: i32, truncated: f64) -> bool {
        let (h, o, t) = self.limits();
        bbox_height >= h && occluded <= o && truncated <= t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Evaluated class; `None` pools every class.
    pub class_id: Option<usize>,
    pub points: usize,
    pub metric: Metric,
    pub difficulty: Option<Difficulty>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            class_id: Some(0),
            points: 11,
            metric: Metric::Bev,
            difficulty: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.iou_threshold > 0.0 && self.iou_threshold <= 1.0,
            Config,
            "iou threshold must be in (0, 1], got {}",
            self.iou_threshold
        );
        ensure!(self.points >= 2, Config, "interpolation needs at least 2 points");
        Ok(())
    }
}

/// A ground-truth box; ignored boxes neither count as misses nor make
/// their matches false positives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: Box3D,
    pub ignore: bool,
}

impl From<Box3D> for GroundTruth {
    fn from(bbox: Box3D) -> Self {
        Self { bbox, ignore: false }
    }
}

/// Predictions and ground truth of one frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Frame {
    pub predictions: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    pub gt_count: usize,
    /// `(score, recall, precision)` after each counted prediction, by descending score.
    pub curve: Vec<(f64, f64, f64)>,
    /// `(recall, interpolated precision)` at the sampling points.
    pub interpolated: Vec<(f64, f64)>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Outcome {
    TruePositive,
    FalsePositive,
    Ignored,
}

fn match_frame(frame: &Frame, cfg: &EvalConfig) -> Result<(Vec<(f64, Outcome)>, usize)> {
    let keep = |c: usize| cfg.class_id.is_none_or(|k| k == c);
    let gts: Vec<&GroundTruth> = frame.ground_truth.iter().filter(|g| keep(g.bbox.class_id)).collect();
    let mut preds: Vec<&Detection> = frame.predictions.iter().filter(|d| keep(d.bbox.class_id)).collect();
    preds.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used = vec![false; gts.len()];
    let mut out = Vec::with_capacity(preds.len());
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if used[j] {
                continue;
            }
            let iou = match cfg.metric {
                Metric::Bev => bev_iou(&p.bbox, &g.bbox)?,
                Metric::ThreeD => iou_3d(&p.bbox, &g.bbox)?,
            };
            if iou >= cfg.iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        let outcome = match best {
            Some((j, _)) => {
                used[j] = true;
                if gts[j].ignore {
                    Outcome::Ignored
                } else {
                    Outcome::TruePositive
                }
            }
            None => Outcome::FalsePositive,
        };
        out.push((p.score, outcome));
    }
    Ok((out, gts.iter().filter(|g| !g.ignore).count()))
}

/// Greedy per-frame matching followed by `cfg.points`-point interpolated AP.
pub fn average_precision(frames: &[Frame], cfg: &EvalConfig) -> Result<ApResult> {
    cfg.validate()?;
    let per_frame = par::map_range(frames.len(), |i| match_frame(&frames[i], cfg));
    let mut scored = Vec::new();
    let mut gt_count = 0;
    for r in per_frame {
        let (s, n) = r?;
        scored.extend(s.into_iter().filter(|(_, o)| *o != Outcome::Ignored));
        gt_count += n;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let curve: Vec<(f64, f64, f64)> = scored
        .iter()
        .map(|&(score, o)| {
            if o == Outcome::TruePositive {
                tp += 1;
            } else {
                fp += 1;
            }
            let recall = if gt_count == 0 { 0.0 } else { tp as f64 / gt_count as f64 };
            (score, recall, tp as f64 / (tp + fp) as f64)
        })
        .collect();
    let interpolated: Vec<(f64, f64)> = (0..cfg.points)
        .map(|i| {
            let r = i as f64 / (cfg.points - 1) as f64;
            let p = curve
                .iter()
                .filter(|c| c.1 >= r - 1e-12)
                .map(|c| c.2)
                .fold(0.0f64, f64::max);
            (r, p)
        })
        .collect();
    let ap = if gt_count == 0 {
        0.0
    } else {
        interpolated.iter().map(|x| x.1).sum::<f64>() / cfg.points as f64
    };
    Ok(ApResult {
        ap,
        gt_count,
        curve,
        interpolated,
    })
}

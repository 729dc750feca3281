//! KITTI label and calibration text formats.
//!
//! Label lines hold 15 whitespace-separated fields (16 with a trailing
//! detection score):
//!
//! ```text
//! type truncated occluded alpha  x1 y1 x2 y2  h w l  x y z  rotation_y [score]
//! Car  0.00      0        -1.58  587.01 173.33 614.12 200.12  1.65 1.67 3.64  -0.65 1.67 46.70  -1.59
//! ```
//!
//! `(x, y, z)` is the bottom-face centre in camera coordinates; [`Box3D`]
//! uses the geometric centre, so conversion shifts `y` by half the height.
//!
//! Calibration files are `KEY: v0 v1 ...` lines; `P2` is the 3x4 projection
//! matrix of the left colour camera.

use std::fmt::Write as _;

use crate::decoder::Detection;
use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::targets::{normalize_angle, Box3D, ClassStats};

/// One label line.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelRecord {
    pub kind: String,
    pub truncated: f64,
    pub occluded: i32,
    pub alpha: f64,
    pub bbox: [f64; 4],
    /// `(h, w, l)` in file order.
    pub dims_hwl: [f64; 3],
    /// Bottom-face centre.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl LabelRecord {
    pub fn is_dont_care(&self) -> bool {
        self.kind == "DontCare"
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }

    /// Box view with a geometric centre and `(w, h, l)` dimensions; `None`
    /// for classes absent from `stats`.
    pub fn to_box(&self, stats: &ClassStats) -> Option<Box3D> {
        let class_id = stats.class_id(&self.kind)?;
        let [h, w, l] = self.dims_hwl;
        Some(Box3D {
            center: [self.location[0], self.location[1] - h / 2.0, self.location[2]],
            dims: [w, h, l],
            yaw: self.rotation_y,
            class_id,
        })
    }

    /// Label line for a ground-truth box.
    pub fn from_box(b: &Box3D, stats: &ClassStats, intr: Option<&CameraIntrinsics>) -> Self {
        let [w, h, l] = b.dims;
        let location = [b.center[0], b.center[1] + h / 2.0, b.center[2]];
        Self {
            kind: stats.names.get(b.class_id).cloned().unwrap_or_else(|| format!("class{}", b.class_id)),
            truncated: 0.0,
            occluded: 0,
            alpha: normalize_angle(b.yaw - location[0].atan2(location[2])),
            bbox: intr.and_then(|k| image_box(b, k)).unwrap_or([-1.0; 4]),
            dims_hwl: [h, w, l],
            location,
            rotation_y: normalize_angle(b.yaw),
            score: None,
        }
    }

    /// Submission line for a detection: truncation and occlusion are `-1`.
    pub fn from_detection(d: &Detection, stats: &ClassStats, intr: Option<&CameraIntrinsics>) -> Self {
        Self {
            truncated: -1.0,
            occluded: -1,
            score: Some(d.score),
            ..Self::from_box(&d.bbox, stats, intr)
        }
    }
}

/// Image rectangle spanned by the projected corners, clipped to the image.
pub fn image_box(b: &Box3D, intr: &CameraIntrinsics) -> Option<[f64; 4]> {
    let mut r = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for c in b.corners() {
        let [u, v] = intr.project(c)?;
        r = [r[0].min(u), r[1].min(v), r[2].max(u), r[3].max(v)];
    }
    let (w, h) = (intr.width as f64 - 1.0, intr.height as f64 - 1.0);
    Some([r[0].clamp(0.0, w), r[1].clamp(0.0, h), r[2].clamp(0.0, w), r[3].clamp(0.0, h)])
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse {what} from {tok:?}"),
    })
}

/// Parses a label file; blank lines are skipped and line numbers are 1-based.
pub fn parse_labels(text: &str) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 15 && toks.len() != 16 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 15 or 16 fields, found {}", toks.len()),
            });
        }
        let f = |k: usize, what: &str| parse_num::<f64>(toks[k], line, what);
        out.push(LabelRecord {
            kind: toks[0].to_string(),
            truncated: f(1, "truncated")?,
            occluded: parse_num::<f64>(toks[2], line, "occluded")? as i32,
            alpha: f(3, "alpha")?,
            bbox: [f(4, "bbox")?, f(5, "bbox")?, f(6, "bbox")?, f(7, "bbox")?],
            dims_hwl: [f(8, "height")?, f(9, "width")?, f(10, "length")?],
            location: [f(11, "x")?, f(12, "y")?, f(13, "z")?],
            rotation_y: f(14, "rotation_y")?,
            score: if toks.len() == 16 { Some(f(15, "score")?) } else { None },
        });
    }
    Ok(out)
}

/// Writes records with six decimals per real field, one line each.
pub fn write_labels(records: &[LabelRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = write!(s, "{} {:.6} {} {:.6}", r.kind, r.truncated, r.occluded, r.alpha);
        for v in r.bbox.iter().chain(&r.dims_hwl).chain(&r.location) {
            let _ = write!(s, " {v:.6}");
        }
        let _ = write!(s, " {:.6}", r.rotation_y);
        if let Some(score) = r.score {
            let _ = write!(s, " {score:.6}");
        }
        s.push('\n');
    }
    s
}

/// Detections as 16-field label text.
pub fn write_detections(dets: &[Detection], stats: &ClassStats, intr: Option<&CameraIntrinsics>) -> String {
    let recs: Vec<LabelRecord> = dets.iter().map(|d| LabelRecord::from_detection(d, stats, intr)).collect();
    write_labels(&recs)
}

/// Parses 16-field label text back into detections of known classes.
pub fn parse_detections(text: &str, stats: &ClassStats) -> Result<Vec<Detection>> {
    Ok(parse_labels(text)?
        .iter()
        .filter_map(|r| {
            r.to_box(stats).map(|bbox| Detection {
                bbox,
                score: r.score.unwrap_or(1.0),
            })
        })
        .collect())
}

/// Calibration file contents in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CalibFile {
    pub entries: Vec<(String, Vec<f64>)>,
}

/// Formats like C's `%.12e`.
fn c_exp(v: f64) -> String {
    let s = format!("{v:.12e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent marker");
    let e: i32 = exp.parse().expect("integer exponent");
    format!("{mantissa}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs())
}

impl CalibFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            let (key, rest) = trimmed.split_once(':').ok_or_else(|| Error::Parse {
                line,
                msg: "expected `KEY: values`".into(),
            })?;
            let values = rest
                .split_whitespace()
                .map(|t| parse_num::<f64>(t, line, key))
                .collect::<Result<Vec<_>>>()?;
            entries.push((key.trim().to_string(), values));
        }
        Ok(Self { entries })
    }

    pub fn get(&self, key: &str) -> Option<&[f64]> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_slice())
    }

    pub fn write(&self) -> String {
        let mut s = String::new();
        for (k, vals) in &self.entries {
            s.push_str(k);
            s.push(':');
            for v in vals {
                s.push(' ');
                s.push_str(&c_exp(*v));
            }
            s.push('\n');
        }
        s
    }

    /// Intrinsics from `P2`; the image size is not part of the file.
    pub fn intrinsics(&self, width: usize, height: usize) -> Result<CameraIntrinsics> {
        let p = self.get("P2").ok_or_else(|| Error::MissingKey("P2".into()))?;
        if p.len() != 12 {
            return Err(Error::Parse {
                line: self.entries.iter().position(|(k, _)| k == "P2").map_or(0, |i| i + 1),
                msg: format!("P2 needs 12 values, found {}", p.len()),
            });
        }
        let (fx, fy) = (p[0], p[5]);
        if (fx - fy).abs() > 0.01 * fx.abs() {
            log::warn!("non-square pixels in P2 (fx={fx}, fy={fy}); using fx");
        }
        CameraIntrinsics::new(fx, p[2], p[6], width, height)
    }

    /// A KITTI-shaped file whose cameras all share `intr`.
    pub fn from_intrinsics(intr: &CameraIntrinsics) -> Self {
        let p = vec![intr.focal, 0.0, intr.cu, 0.0, 0.0, intr.focal, intr.cv, 0.0, 0.0, 0.0, 1.0, 0.0];
        let identity = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let rigid = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        let mut entries: Vec<(String, Vec<f64>)> = (0..4).map(|i| (format!("P{i}"), p.clone())).collect();
        entries.push(("R0_rect".into(), identity));
        entries.push(("Tr_velo_to_cam".into(), rigid.clone()));
        entries.push(("Tr_imu_to_velo".into(), rigid));
        Self { entries }
    }
}

/// Intrinsics from calibration text and the image size.
pub fn parse_calib(text: &str, width: usize, height: usize) -> Result<CameraIntrinsics> {
    CalibFile::parse(text)?.intrinsics(width, height)
}

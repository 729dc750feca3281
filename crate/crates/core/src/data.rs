//! On-disk datasets in the KITTI directory layout.
//!
//! ```text
//! root/image_2/000000.ppm   binary PPM or PGM
//! root/label_2/000000.txt   label lines
//! root/calib/000000.txt     calibration with a P2 entry
//! ```

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{Difficulty, GroundTruth};
use crate::geometry::CameraIntrinsics;
use crate::image::{load_pnm, save_pnm, Image};
use crate::kitti::{parse_calib, parse_labels, write_labels, CalibFile, LabelRecord};
use crate::targets::{Box3D, ClassStats};

/// One frame: image, camera and ground-truth boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub intrinsics: CameraIntrinsics,
    pub objects: Vec<Box3D>,
}

pub fn image_path(root: &Path, id: &str) -> Option<PathBuf> {
    ["ppm", "pgm"]
        .iter()
        .map(|ext| root.join("image_2").join(format!("{id}.{ext}")))
        .find(|p| p.exists())
}

pub fn label_path(root: &Path, id: &str) -> PathBuf {
    root.join("label_2").join(format!("{id}.txt"))
}

pub fn calib_path(root: &Path, id: &str) -> PathBuf {
    root.join("calib").join(format!("{id}.txt"))
}

/// Sorted frame ids found under `root/image_2`.
pub fn list_frames(root: &Path) -> Result<Vec<String>> {
    let dir = root.join("image_2");
    let mut ids: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", dir.display()))))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| matches!(p.extension().and_then(|x| x.to_str()), Some("ppm" | "pgm")))
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
        .collect();
    ids.sort();
    ids.dedup();
    Ok(ids)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Label records of a frame; a missing label file means no objects.
pub fn load_labels(root: &Path, id: &str) -> Result<Vec<LabelRecord>> {
    let p = label_path(root, id);
    if !p.exists() {
        return Ok(Vec::new());
    }
    parse_labels(&read_text(&p)?)
}

pub fn load_frame(root: &Path, id: &str, stats: &ClassStats) -> Result<Sample> {
    let ip = image_path(root, id).ok_or_else(|| Error::MissingKey(format!("image for frame {id}")))?;
    let image = load_pnm(&ip)?;
    let intrinsics = parse_calib(&read_text(&calib_path(root, id))?, image.width, image.height)?;
    let objects = load_labels(root, id)?.iter().filter_map(|r| r.to_box(stats)).collect();
    Ok(Sample {
        id: id.to_string(),
        image,
        intrinsics,
        objects,
    })
}

pub fn load_dataset(root: &Path, stats: &ClassStats) -> Result<Vec<Sample>> {
    list_frames(root)?.iter().map(|id| load_frame(root, id, stats)).collect()
}

/// Writes image, labels and calibration of `sample` under `root`.
pub fn save_frame(root: &Path, sample: &Sample, stats: &ClassStats) -> Result<()> {
    for d in ["image_2", "label_2", "calib"] {
        std::fs::create_dir_all(root.join(d))?;
    }
    let ext = if sample.image.channels == 1 { "pgm" } else { "ppm" };
    save_pnm(&root.join("image_2").join(format!("{}.{ext}", sample.id)), &sample.image)?;
    let recs: Vec<LabelRecord> = sample
        .objects
        .iter()
        .map(|b| LabelRecord::from_box(b, stats, Some(&sample.intrinsics)))
        .collect();
    std::fs::write(label_path(root, &sample.id), write_labels(&recs))?;
    std::fs::write(calib_path(root, &sample.id), CalibFile::from_intrinsics(&sample.intrinsics).write())?;
    Ok(())
}

/// Evaluation ground truth: unknown classes and `DontCare` are dropped,
/// boxes outside `difficulty` are kept but ignored.
pub fn ground_truth(records: &[LabelRecord], stats: &ClassStats, difficulty: Option<Difficulty>) -> Vec<GroundTruth> {
    records
        .iter()
        .filter(|r| !r.is_dont_care())
        .filter_map(|r| {
            let bbox = r.to_box(stats)?;
            let ignore = difficulty.is_some_and(|d| !d.admits(r.bbox_height(), r.occluded, r.truncated));
            Some(GroundTruth { bbox, ignore })
        })
        .collect()
}

//! Random crop, scale and horizontal flip with consistent camera and box updates.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{ensure, Result};
use crate::geometry::{adjust_intrinsics, CropRect};
use crate::targets::{normalize_angle, Box3D};

/// Sampling ranges.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Largest fraction of the width (height) removed from each side.
    pub max_crop_fraction: f64,
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            scale_min: 0.8,
            scale_max: 1.2,
            max_crop_fraction: 0.1,
            flip_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.scale_min > 0.0 && self.scale_min <= self.scale_max,
            Config,
            "scale range [{}, {}] is invalid",
            self.scale_min,
            self.scale_max
        );
        ensure!(
            (0.0..0.5).contains(&self.max_crop_fraction),
            Config,
            "crop fraction must be in [0, 0.5), got {}",
            self.max_crop_fraction
        );
        ensure!(
            (0.0..=1.0).contains(&self.flip_probability),
            Config,
            "flip probability must be in [0, 1], got {}",
            self.flip_probability
        );
        Ok(())
    }
}

/// One concrete transformation: crop, then scale, then optional mirror.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub crop: CropRect,
    pub scale: f64,
    pub flip: bool,
}

impl Augmentation {
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            crop: CropRect::full(width, height),
            scale: 1.0,
            flip: false,
        }
    }

    pub fn sample<R: Rng>(cfg: &AugmentConfig, width: usize, height: usize, rng: &mut R) -> Self {
        let mut side = |n: usize| (rng.gen::<f64>() * cfg.max_crop_fraction * n as f64).floor() as usize;
        let (left, right, top, bottom) = (side(width), side(width), side(height), side(height));
        let crop = CropRect {
            u0: left,
            v0: top,
            width: (width - left - right).max(1),
            height: (height - top - bottom).max(1),
        };
        let scale = if cfg.scale_max > cfg.scale_min {
            rng.gen_range(cfg.scale_min..=cfg.scale_max)
        } else {
            cfg.scale_min
        };
        let flip = rng.gen::<f64>() < cfg.flip_probability;
        Self { crop, scale, flip }
    }
}

/// Mirrors a box across the camera's vertical plane.
pub fn flip_box(b: &Box3D) -> Box3D {
    Box3D {
        center: [-b.center[0], b.center[1], b.center[2]],
        yaw: normalize_angle(PI - b.yaw),
        ..*b
    }
}

/// Applies `aug`, then trims the right and bottom edges so both extents are
/// multiples of `multiple`. Objects whose centre no longer projects inside
/// the image are dropped.
pub fn augment(sample: &Sample, aug: &Augmentation, multiple: usize) -> Result<Sample> {
    ensure!(multiple > 0, Contract, "extent multiple must be positive");
    let c = aug.crop;
    let cropped = sample.image.crop(c.u0, c.v0, c.width, c.height)?;
    let scaled_intr = adjust_intrinsics(&sample.intrinsics, &c, aug.scale, false)?;
    let mut image = cropped.resize(scaled_intr.width, scaled_intr.height)?;
    let (w, h) = (image.width / multiple * multiple, image.height / multiple * multiple);
    ensure!(w > 0 && h > 0, Contract, "augmented image {}x{} is smaller than {multiple}", image.width, image.height);
    let trim = CropRect::full(w, h);
    image = image.crop(0, 0, w, h)?;
    let mut intrinsics = adjust_intrinsics(&scaled_intr, &trim, 1.0, aug.flip)?;
    let mut objects: Vec<Box3D> = sample.objects.clone();
    if aug.flip {
        image = image.flip_horizontal();
        objects = objects.iter().map(flip_box).collect();
    }
    objects.retain(|o| {
        intrinsics
            .project(o.center)
            .is_some_and(|[u, v]| u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64)
    });
    intrinsics.width = w;
    intrinsics.height = h;
    Ok(Sample {
        id: sample.id.clone(),
        image,
        intrinsics,
        objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::image::Image;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> Sample {
        let mut image = Image::new(64, 32, 3);
        image.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 13) % 256) as f32 / 255.0);
        Sample {
            id: "x".into(),
            image,
            intrinsics: CameraIntrinsics::new(40.0, 31.5, 12.0, 64, 32).unwrap(),
            objects: vec![
                Box3D { center: [1.0, 0.8, 10.0], dims: [1.6, 1.5, 3.9], yaw: 0.3, class_id: 0 },
                Box3D { center: [-2.0, 1.0, 14.0], dims: [1.6, 1.5, 3.9], yaw: -2.0, class_id: 0 },
            ],
        }
    }

    #[test]
    fn identity_is_unchanged() {
        let s = sample();
        assert_eq!(augment(&s, &Augmentation::identity(64, 32), 1).unwrap(), s);
    }

    #[test]
    fn flip_twice_restores() {
        let s = sample();
        let f = Augmentation { flip: true, ..Augmentation::identity(64, 32) };
        let back = augment(&augment(&s, &f, 1).unwrap(), &f, 1).unwrap();
        assert_eq!(back.image, s.image);
        assert_eq!(back.intrinsics, s.intrinsics);
        for (a, b) in back.objects.iter().zip(&s.objects) {
            assert_eq!(a.center, b.center);
            assert!(normalize_angle(a.yaw - b.yaw).abs() < 1e-12);
        }
    }

    #[test]
    fn flipped_corners_mirror_original_projections() {
        let s = sample();
        let f = Augmentation { flip: true, ..Augmentation::identity(64, 32) };
        let t = augment(&s, &f, 1).unwrap();
        for (o, m) in s.objects.iter().zip(&t.objects) {
            let mut orig: Vec<[f64; 2]> = o
                .corners()
                .iter()
                .map(|&c| {
                    let [u, v] = s.intrinsics.project(c).unwrap();
                    [63.0 - u, v]
                })
                .collect();
            let mut flipped: Vec<[f64; 2]> = m.corners().iter().map(|&c| t.intrinsics.project(c).unwrap()).collect();
            let key = |p: &[f64; 2]| ((p[0] * 1e6).round() as i64, (p[1] * 1e6).round() as i64);
            orig.sort_by_key(key);
            flipped.sort_by_key(key);
            for (a, b) in orig.iter().zip(&flipped) {
                assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projections_commute_with_augmentation() {
        let s = sample();
        let cfg = AugmentConfig { enabled: true, ..AugmentConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let aug = Augmentation::sample(&cfg, 64, 32, &mut rng);
            let t = augment(&s, &aug, 4).unwrap();
            assert_eq!(t.image.width % 4, 0);
            for o in &s.objects {
                let [u, v] = s.intrinsics.project(o.center).unwrap();
                let mut expected = [(u - aug.crop.u0 as f64) * aug.scale, (v - aug.crop.v0 as f64) * aug.scale];
                if aug.flip {
                    expected[0] = (t.image.width - 1) as f64 - expected[0];
                }
                let moved = if aug.flip { flip_box(o) } else { *o };
                let got = t.intrinsics.project(moved.center).unwrap();
                assert!((got[0] - expected[0]).abs() < 0.5 && (got[1] - expected[1]).abs() < 0.5);
                let inside = got[0] >= 0.0 && got[1] >= 0.0 && got[0] <= (t.image.width - 1) as f64 && got[1] <= (t.image.height - 1) as f64;
                assert_eq!(inside, t.objects.iter().any(|m| m.center == moved.center));
            }
        }
    }

    #[test]
    fn degenerate_crop_is_rejected() {
        let s = sample();
        let aug = Augmentation { crop: CropRect { u0: 0, v0: 0, width: 0, height: 4 }, scale: 1.0, flip: false };
        assert!(augment(&s, &aug, 1).is_err());
    }
}

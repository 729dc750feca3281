//! Seeded synthetic scenes: flat-shaded cuboids on a ground plane.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{save_frame, Sample};
use crate::error::{ensure, Error, Result};
use crate::geometry::{CameraIntrinsics, VoxelGrid};
use crate::image::Image;
use crate::targets::{convex_overlap, Box3D, ClassStats};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub cu: f64,
    pub cv: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Relative uniform jitter applied to each class-mean dimension.
    pub dim_jitter: f64,
    pub yaw_min: f64,
    pub yaw_max: f64,
    /// Ground-plane rectangle that must contain every footprint.
    pub x_min: f64,
    pub x_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Camera height above the ground.
    pub ground_y: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 384,
            height: 128,
            focal: 200.0,
            cu: 191.5,
            cv: 48.0,
            min_objects: 1,
            max_objects: 4,
            dim_jitter: 0.1,
            yaw_min: -std::f64::consts::PI,
            yaw_max: std::f64::consts::PI,
            x_min: -6.0,
            x_max: 6.0,
            z_min: 5.0,
            z_max: 16.0,
            ground_y: 1.65,
            seed: 0,
        }
    }
}

const MAX_ATTEMPTS: usize = 1000;

impl SceneConfig {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.focal, self.cu, self.cv, self.width, self.height)
    }

    pub fn validate(&self, grid: Option<&VoxelGrid>) -> Result<()> {
        self.intrinsics()?;
        ensure!(self.min_objects <= self.max_objects, Config, "object count range {}..={} is empty", self.min_objects, self.max_objects);
        ensure!((0.0..1.0).contains(&self.dim_jitter), Config, "dim jitter must be in [0, 1), got {}", self.dim_jitter);
        ensure!(self.yaw_min <= self.yaw_max, Config, "yaw range is empty");
        ensure!(self.x_min < self.x_max && self.z_min < self.z_max, Config, "placement region is empty");
        ensure!(self.z_min > 0.0, Config, "placement region must lie in front of the camera");
        if let Some(g) = grid {
            let (gx0, gx1) = (-g.extent_x / 2.0, g.extent_x / 2.0);
            let (gz0, gz1) = (g.z_min, g.z_min + g.extent_z);
            ensure!(
                self.x_min >= gx0 && self.x_max <= gx1 && self.z_min >= gz0 && self.z_max <= gz1,
                Config,
                "placement region x [{}, {}] z [{}, {}] leaves the grid x [{gx0}, {gx1}] z [{gz0}, {gz1}]",
                self.x_min,
                self.x_max,
                self.z_min,
                self.z_max
            );
        }
        Ok(())
    }
}

fn footprint_inside(b: &Box3D, cfg: &SceneConfig) -> bool {
    b.footprint()
        .iter()
        .all(|p| p[0] >= cfg.x_min && p[0] <= cfg.x_max && p[1] >= cfg.z_min && p[1] <= cfg.z_max)
}

fn sample_boxes(cfg: &SceneConfig, stats: &ClassStats, intr: &CameraIntrinsics, rng: &mut ChaCha8Rng) -> Result<Vec<Box3D>> {
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(Error::Generation(format!(
                "placed {} of {count} objects after {MAX_ATTEMPTS} attempts; region too dense",
                boxes.len()
            )));
        }
        let class_id = rng.gen_range(0..stats.class_count());
        let mean = stats.mean(class_id);
        let mut jitter = |m: f64| m * (1.0 + cfg.dim_jitter * rng.gen_range(-1.0..=1.0));
        let dims = [jitter(mean[0]), jitter(mean[1]), jitter(mean[2])];
        let yaw = if cfg.yaw_max > cfg.yaw_min { rng.gen_range(cfg.yaw_min..cfg.yaw_max) } else { cfg.yaw_min };
        let x = rng.gen_range(cfg.x_min..cfg.x_max);
        let z = rng.gen_range(cfg.z_min..cfg.z_max);
        let b = Box3D {
            center: [x, cfg.ground_y - dims[1] / 2.0, z],
            dims,
            yaw,
            class_id,
        };
        let visible = intr
            .project(b.center)
            .is_some_and(|[u, v]| u >= 0.0 && v >= 0.0 && u <= (cfg.width - 1) as f64 && v <= (cfg.height - 1) as f64);
        let in_front = b.corners().iter().all(|c| c[2] > 0.0);
        let free = boxes.iter().all(|o| !convex_overlap(&o.footprint(), &b.footprint()));
        if visible && in_front && footprint_inside(&b, cfg) && free {
            boxes.push(b);
        }
    }
    Ok(boxes)
}

fn background(cfg: &SceneConfig) -> Image {
    let mut img = Image::new(cfg.width, cfg.height, 3);
    for v in 0..cfg.height {
        let rgb = if (v as f64) < cfg.cv {
            let t = (v as f64 / cfg.cv.max(1.0)) as f32;
            [0.45 + 0.35 * t, 0.6 + 0.3 * t, 0.9]
        } else {
            let t = (((v as f64) - cfg.cv) / (cfg.height as f64 - cfg.cv).max(1.0)) as f32;
            [0.3 + 0.25 * t, 0.32 + 0.25 * t, 0.3 + 0.2 * t]
        };
        for u in 0..cfg.width {
            img.pixel_mut(u, v).copy_from_slice(&rgb);
        }
    }
    img
}

fn fill_convex(img: &mut Image, poly: &[[f64; 2]], rgb: [f32; 3]) {
    let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in poly {
        u0 = u0.min(p[0]);
        v0 = v0.min(p[1]);
        u1 = u1.max(p[0]);
        v1 = v1.max(p[1]);
    }
    let clamp_lo = |x: f64, n: usize| x.ceil().clamp(0.0, n as f64) as usize;
    let clamp_hi = |x: f64, n: usize| (x.floor() + 1.0).clamp(0.0, n as f64) as usize;
    let n = poly.len();
    let orientation: f64 = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    if orientation.abs() < 1e-12 {
        return;
    }
    for v in clamp_lo(v0, img.height)..clamp_hi(v1, img.height) {
        for u in clamp_lo(u0, img.width)..clamp_hi(u1, img.width) {
            let (x, y) = (u as f64, v as f64);
            let inside = (0..n).all(|i| {
                let (p, q) = (poly[i], poly[(i + 1) % n]);
                let c = (q[0] - p[0]) * (y - p[1]) - (q[1] - p[1]) * (x - p[0]);
                c * orientation >= 0.0
            });
            if inside {
                img.pixel_mut(u, v).copy_from_slice(&rgb);
            }
        }
    }
}

/// Face corner indices into [`Box3D::corners`] with outward normals.
fn faces(b: &Box3D) -> [([usize; 4], [f64; 3], Face); 6] {
    let (s, c) = b.yaw.sin_cos();
    let along = [c, 0.0, -s];
    let across = [s, 0.0, c];
    let neg = |v: [f64; 3]| [-v[0], -v[1], -v[2]];
    [
        ([0, 1, 2, 3], [0.0, -1.0, 0.0], Face::Top),
        ([4, 5, 6, 7], [0.0, 1.0, 0.0], Face::Side),
        ([0, 3, 7, 4], along, Face::Front),
        ([1, 2, 6, 5], neg(along), Face::Back),
        ([0, 1, 5, 4], across, Face::Side),
        ([3, 2, 6, 7], neg(across), Face::Side),
    ]
}

#[derive(Clone, Copy, PartialEq)]
enum Face {
    Top,
    Front,
    Back,
    Side,
}

fn render_box(img: &mut Image, b: &Box3D, intr: &CameraIntrinsics, body: [f32; 3]) {
    let corners = b.corners();
    let light = [0.4f64, -0.8, -0.45];
    for (idx, normal, kind) in faces(b) {
        let centre = idx.iter().fold([0.0; 3], |acc, &i| {
            [acc[0] + corners[i][0] / 4.0, acc[1] + corners[i][1] / 4.0, acc[2] + corners[i][2] / 4.0]
        });
        let facing = -(centre[0] * normal[0] + centre[1] * normal[1] + centre[2] * normal[2]);
        if facing <= 0.0 {
            continue;
        }
        let Some(poly) = idx.iter().map(|&i| intr.project(corners[i])).collect::<Option<Vec<_>>>() else {
            continue;
        };
        let lambert = (normal[0] * light[0] + normal[1] * light[1] + normal[2] * light[2]).abs() as f32;
        let shade = 0.45 + 0.55 * lambert;
        let rgb = match kind {
            Face::Front => [0.95, 0.9, 0.25],
            Face::Back => [0.6, 0.08, 0.08],
            Face::Top => [body[0] * 0.6 + 0.35, body[1] * 0.6 + 0.35, body[2] * 0.6 + 0.35],
            Face::Side => [body[0] * shade, body[1] * shade, body[2] * shade],
        };
        fill_convex(img, &poly, rgb);
    }
}

/// Renders `boxes` far-to-near over the sky/ground background.
pub fn render(cfg: &SceneConfig, intr: &CameraIntrinsics, boxes: &[Box3D], colours: &[[f32; 3]]) -> Image {
    let mut img = background(cfg);
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    let dist = |b: &Box3D| b.center.iter().map(|v| v * v).sum::<f64>();
    order.sort_by(|&a, &b| dist(&boxes[b]).total_cmp(&dist(&boxes[a])));
    for i in order {
        render_box(&mut img, &boxes[i], intr, colours[i]);
    }
    img
}

/// One scene, fully determined by `cfg` and `seed`.
pub fn generate_scene(cfg: &SceneConfig, stats: &ClassStats, seed: u64) -> Result<Sample> {
    cfg.validate(None)?;
    let intr = cfg.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let boxes = sample_boxes(cfg, stats, &intr, &mut rng)?;
    let colours: Vec<[f32; 3]> = boxes
        .iter()
        .map(|_| [rng.gen_range(0.15..0.9), rng.gen_range(0.1..0.6), rng.gen_range(0.2..0.9)])
        .collect();
    Ok(Sample {
        id: format!("{seed:06}"),
        image: render(cfg, &intr, &boxes, &colours),
        intrinsics: intr,
        objects: boxes,
    })
}

/// `count` scenes seeded `cfg.seed + i`, numbered from zero.
pub fn generate_scenes(cfg: &SceneConfig, stats: &ClassStats, count: usize) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let mut s = generate_scene(cfg, stats, cfg.seed + i as u64)?;
            s.id = format!("{i:06}");
            Ok(s)
        })
        .collect()
}

/// Writes a corpus in the KITTI directory layout.
pub fn generate_corpus(cfg: &SceneConfig, stats: &ClassStats, count: usize, root: &Path) -> Result<Vec<Sample>> {
    let scenes = generate_scenes(cfg, stats, count)?;
    for s in &scenes {
        save_frame(root, s, stats)?;
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::bev_iou;
    use crate::geometry::{project_voxel, VoxelGrid};

    #[test]
    fn deterministic_under_seed() {
        let cfg = SceneConfig::default();
        let stats = ClassStats::default();
        let a = generate_scene(&cfg, &stats, 42).unwrap();
        let b = generate_scene(&cfg, &stats, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.objects, generate_scene(&cfg, &stats, 43).unwrap().objects);
    }

    #[test]
    fn empty_scene_is_background() {
        let cfg = SceneConfig { min_objects: 0, max_objects: 0, ..SceneConfig::default() };
        let s = generate_scene(&cfg, &ClassStats::default(), 1).unwrap();
        assert!(s.objects.is_empty());
        assert_eq!(s.image, background(&cfg));
    }

    #[test]
    fn boxes_are_disjoint_and_inside_region() {
        let cfg = SceneConfig::default();
        let stats = ClassStats::default();
        for seed in 0..40 {
            let s = generate_scene(&cfg, &stats, seed).unwrap();
            for (i, a) in s.objects.iter().enumerate() {
                assert!(footprint_inside(a, &cfg));
                assert!(a.corners().iter().all(|c| c[2] > 0.0));
                for b in &s.objects[i + 1..] {
                    assert_eq!(bev_iou(a, b).unwrap(), 0.0);
                }
            }
        }
    }

    #[test]
    fn overcrowded_region_fails() {
        let cfg = SceneConfig {
            min_objects: 30,
            max_objects: 30,
            x_min: -3.0,
            x_max: 3.0,
            z_min: 8.0,
            z_max: 12.0,
            ..SceneConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, &ClassStats::default(), 0), Err(Error::Generation(_))));
    }

    #[test]
    fn rendered_object_covers_its_centre_voxel() {
        let cfg = SceneConfig { min_objects: 1, max_objects: 1, ..SceneConfig::default() };
        let grid = VoxelGrid::toy();
        let bg = background(&cfg);
        for seed in 0..10 {
            let s = generate_scene(&cfg, &ClassStats::default(), seed).unwrap();
            let o = s.objects[0];
            let (ix, iz) = grid.cell_of(o.center[0], o.center[2]).unwrap();
            let iy = ((o.center[1] - (grid.y0 - grid.extent_y)) / grid.resolution).floor() as usize;
            let pb = project_voxel(&s.intrinsics, [grid.x_center(ix), grid.y_center(iy), grid.z_center(iz)], grid.resolution).unwrap();
            let mut hit = false;
            for v in pb.v1.ceil() as usize..=(pb.v2.floor() as usize).min(cfg.height - 1) {
                for u in pb.u1.ceil().max(0.0) as usize..=(pb.u2.floor() as usize).min(cfg.width - 1) {
                    hit |= s.image.pixel(u, v) != bg.pixel(u, v);
                }
            }
            assert!(hit, "seed {seed}");
        }
    }

    #[test]
    fn region_must_fit_grid() {
        let cfg = SceneConfig { x_max: 9.0, ..SceneConfig::default() };
        assert!(cfg.validate(Some(&VoxelGrid::toy())).is_err());
        assert!(SceneConfig::default().validate(Some(&VoxelGrid::toy())).is_ok());
    }
}

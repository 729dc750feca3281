//! Pinhole camera, ground-plane voxel lattice, and voxel-to-image projection.
//!
//! Camera frame: x right, y down, z forward. The lattice hangs from the
//! ground plane, which lies `y0` metres below the camera.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Rectified pinhole intrinsics (square pixels).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    /// Focal length in pixels.
    pub focal: f64,
    pub cu: f64,
    pub cv: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(focal: f64, cu: f64, cv: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            focal,
            cu,
            cv,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.focal > 0.0 && self.focal.is_finite(), Contract, "focal length must be positive, got {}", self.focal);
        ensure!(self.width > 0 && self.height > 0, Contract, "image extents must be positive");
        Ok(())
    }

    /// Projects a camera-frame point; `None` when it is not in front of the camera.
    pub fn project(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        (p[2] > 0.0).then(|| [self.focal * p[0] / p[2] + self.cu, self.focal * p[1] / p[2] + self.cv])
    }
}

/// Ground-plane-aligned voxel lattice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VoxelGrid {
    /// Lateral extent W (metres), centred on the optical axis.
    pub extent_x: f64,
    /// Vertical extent H (metres), measured up from the ground plane.
    pub extent_y: f64,
    /// Depth extent D (metres), starting at `z_min`.
    pub extent_z: f64,
    /// Voxel side r (metres).
    pub resolution: f64,
    /// Ground plane distance below the camera (metres).
    pub y0: f64,
    /// Near edge of the lattice (metres in front of the camera).
    pub z_min: f64,
}

impl Default for VoxelGrid {
    fn default() -> Self {
        Self::toy()
    }
}

impl VoxelGrid {
    /// 80m x 4m x 80m at 0.5 m.
    pub fn full_scale() -> Self {
        Self {
            extent_x: 80.0,
            extent_y: 4.0,
            extent_z: 80.0,
            resolution: 0.5,
            y0: 1.65,
            z_min: 0.5,
        }
    }

    /// 16m x 2m x 16m at 0.5 m.
    pub fn toy() -> Self {
        Self {
            extent_x: 16.0,
            extent_y: 2.0,
            extent_z: 16.0,
            resolution: 0.5,
            y0: 1.65,
            z_min: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        ensure!(r > 0.0 && r.is_finite(), Contract, "voxel size must be positive, got {r}");
        for (name, e) in [("W", self.extent_x), ("H", self.extent_y), ("D", self.extent_z)] {
            let cells = e / r;
            ensure!(
                e > 0.0 && (cells - cells.round()).abs() < 1e-9 * cells.max(1.0),
                Contract,
                "extent {name}={e} is not a positive multiple of r={r}"
            );
        }
        if self.z_min <= 0.0 {
            return Err(Error::Geometry(format!(
                "grid near edge z_min={} puts voxels on or behind the camera plane",
                self.z_min
            )));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        (self.extent_x / self.resolution).round() as usize
    }

    pub fn ny(&self) -> usize {
        (self.extent_y / self.resolution).round() as usize
    }

    pub fn nz(&self) -> usize {
        (self.extent_z / self.resolution).round() as usize
    }

    pub fn voxel_count(&self) -> usize {
        self.nx() * self.ny() * self.nz()
    }

    pub fn x_center(&self, ix: usize) -> f64 {
        -self.extent_x / 2.0 + self.resolution * (ix as f64 + 0.5)
    }

    /// Height of level `iy`; level 0 is the top of the lattice.
    pub fn y_center(&self, iy: usize) -> f64 {
        self.y0 - self.extent_y + self.resolution * (iy as f64 + 0.5)
    }

    pub fn z_center(&self, iz: usize) -> f64 {
        self.z_min + self.resolution * (iz as f64 + 0.5)
    }

    /// Ground-plane cell whose r x r square contains `(x, z)`.
    pub fn cell_of(&self, x: f64, z: f64) -> Option<(usize, usize)> {
        let fx = (x + self.extent_x / 2.0) / self.resolution;
        let fz = (z - self.z_min) / self.resolution;
        if fx < 0.0 || fz < 0.0 {
            return None;
        }
        let (ix, iz) = (fx.floor() as usize, fz.floor() as usize);
        (ix < self.nx() && iz < self.nz()).then_some((ix, iz))
    }

    /// Voxel centres, z-major then x then y.
    pub fn lattice(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.voxel_count());
        for iz in 0..self.nz() {
            for ix in 0..self.nx() {
                for iy in 0..self.ny() {
                    out.push([self.x_center(ix), self.y_center(iy), self.z_center(iz)]);
                }
            }
        }
        out
    }
}

/// Axis-aligned image rectangle in continuous pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelBox {
    pub u1: f64,
    pub v1: f64,
    pub u2: f64,
    pub v2: f64,
}

impl PixelBox {
    fn normalized(self) -> Self {
        Self {
            u1: self.u1.min(self.u2),
            u2: self.u1.max(self.u2),
            v1: self.v1.min(self.v2),
            v2: self.v1.max(self.v2),
        }
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u1 && u <= self.u2 && v >= self.v1 && v <= self.v2
    }
}

/// Half-open integer box `[u1, u2) x [v1, v2)` on a feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureBox {
    pub u1: usize,
    pub v1: usize,
    pub u2: usize,
    pub v2: usize,
}

impl FeatureBox {
    pub fn area(&self) -> usize {
        (self.u2 - self.u1) * (self.v2 - self.v1)
    }
}

/// `x / |x|`, with `sign(0) = +1`.
fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Image-plane bounding rectangle of the voxel of side `r` centred at `center`.
pub fn project_voxel(intr: &CameraIntrinsics, center: [f64; 3], r: f64) -> Result<PixelBox> {
    let [x, y, z] = center;
    if z - 0.5 * r <= 0.0 {
        return Err(Error::Geometry(format!(
            "voxel at z={z} with size {r} touches or crosses the camera plane"
        )));
    }
    let f = intr.focal;
    let (sx, sy) = (sign(x), sign(y));
    Ok(PixelBox {
        u1: f * (x - 0.5 * r) / (z + 0.5 * sx * r) + intr.cu,
        u2: f * (x + 0.5 * r) / (z - 0.5 * sx * r) + intr.cu,
        v1: f * (y - 0.5 * r) / (z + 0.5 * sy * r) + intr.cv,
        v2: f * (y + 0.5 * r) / (z - 0.5 * sy * r) + intr.cv,
    }
    .normalized())
}

/// Scales a pixel box onto a `map_w x map_h` feature map, rounding outward
/// and clamping. `None` when nothing of the box remains.
pub fn to_feature_box(b: &PixelBox, scale: f64, map_w: usize, map_h: usize) -> Option<FeatureBox> {
    let clamp = |v: f64, hi: usize| -> usize {
        if v.is_nan() || v <= 0.0 {
            0
        } else if v >= hi as f64 {
            hi
        } else {
            v as usize
        }
    };
    let u1 = clamp((b.u1 * scale).floor(), map_w);
    let u2 = clamp((b.u2 * scale).ceil(), map_w);
    let v1 = clamp((b.v1 * scale).floor(), map_h);
    let v2 = clamp((b.v2 * scale).ceil(), map_h);
    (u2 > u1 && v2 > v1).then_some(FeatureBox { u1, v1, u2, v2 })
}

/// Pixel rectangle `[u0, u0+width) x [v0, v0+height)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub u0: usize,
    pub v0: usize,
    pub width: usize,
    pub height: usize,
}

impl CropRect {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            u0: 0,
            v0: 0,
            width,
            height,
        }
    }
}

/// Intrinsics after cropping, then scaling, then (optionally) mirroring
/// the image horizontally.
pub fn adjust_intrinsics(intr: &CameraIntrinsics, crop: &CropRect, scale: f64, flip: bool) -> Result<CameraIntrinsics> {
    ensure!(crop.width > 0 && crop.height > 0, Contract, "empty crop {crop:?}");
    ensure!(
        crop.u0 + crop.width <= intr.width && crop.v0 + crop.height <= intr.height,
        Contract,
        "crop {crop:?} exceeds {}x{} image",
        intr.width,
        intr.height
    );
    ensure!(scale > 0.0 && scale.is_finite(), Contract, "scale must be positive, got {scale}");
    let width = ((crop.width as f64 * scale).round() as usize).max(1);
    let height = ((crop.height as f64 * scale).round() as usize).max(1);
    let mut out = CameraIntrinsics {
        focal: intr.focal * scale,
        cu: (intr.cu - crop.u0 as f64) * scale,
        cv: (intr.cv - crop.v0 as f64) * scale,
        width,
        height,
    };
    if flip {
        out.cu = (width as f64 - 1.0) - out.cu;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_camera() -> CameraIntrinsics {
        CameraIntrinsics::new(1.0, 0.0, 0.0, 100, 100).unwrap()
    }

    #[test]
    fn projection_examples() {
        let b = project_voxel(&unit_camera(), [1.0, 0.0, 10.0], 2.0).unwrap();
        assert!(b.u1.abs() < 1e-12);
        assert!((b.u2 - 2.0 / 9.0).abs() < 1e-12);

        let k = CameraIntrinsics::new(500.0, 320.0, 120.0, 640, 240).unwrap();
        let b = project_voxel(&k, [2.0, 0.0, 10.0], 0.5).unwrap();
        assert!((b.u1 - 405.365_853_658_536_6).abs() < 1e-9);
        assert!((b.u2 - 435.384_615_384_615_4).abs() < 1e-9);

        let b = project_voxel(&unit_camera(), [0.0, 0.0, 10.0], 2.0).unwrap();
        assert!((b.u1 + 1.0 / 11.0).abs() < 1e-12);
        assert!((b.u2 - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn voxel_at_camera_plane_is_rejected() {
        let r = project_voxel(&unit_camera(), [0.0, 0.0, 0.25], 0.5);
        assert!(matches!(r, Err(Error::Geometry(_))));
    }

    #[test]
    fn feature_box_examples() {
        let pb = |u1, v1, u2, v2| PixelBox { u1, v1, u2, v2 };
        assert_eq!(
            to_feature_box(&pb(0.0, 0.0, 16.0, 16.0), 0.125, 100, 100),
            Some(FeatureBox { u1: 0, v1: 0, u2: 2, v2: 2 })
        );
        assert_eq!(to_feature_box(&pb(-30.0, 0.0, -10.0, 8.0), 0.125, 100, 100), None);
        assert_eq!(
            to_feature_box(&pb(-8.0, 0.0, 8.0, 8.0), 0.125, 100, 100),
            Some(FeatureBox { u1: 0, v1: 0, u2: 1, v2: 1 })
        );
        assert_eq!(to_feature_box(&pb(900.0, 0.0, 950.0, 8.0), 0.125, 100, 100), None);
    }

    #[test]
    fn lattice_counts_and_symmetry() {
        let g = VoxelGrid::full_scale();
        g.validate().unwrap();
        assert_eq!(g.lattice().len(), 204_800);
        let one = VoxelGrid {
            extent_x: 1.0,
            extent_y: 1.0,
            extent_z: 1.0,
            resolution: 1.0,
            y0: 1.0,
            z_min: 0.5,
        };
        assert_eq!(one.lattice(), vec![[0.0, 0.5, 1.0]]);
        let two = VoxelGrid { extent_x: 2.0, ..one };
        let xs: Vec<f64> = two.lattice().iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![-0.5, 0.5]);
    }

    #[test]
    fn lattice_order_is_z_then_x_then_y() {
        let g = VoxelGrid {
            extent_x: 2.0,
            extent_y: 2.0,
            extent_z: 2.0,
            resolution: 1.0,
            y0: 1.0,
            z_min: 1.0,
        };
        let l = g.lattice();
        assert_eq!(l[0], [-0.5, -0.5, 1.5]);
        assert_eq!(l[1], [-0.5, 0.5, 1.5]);
        assert_eq!(l[2], [0.5, -0.5, 1.5]);
        assert_eq!(l[4], [-0.5, -0.5, 2.5]);
    }

    #[test]
    fn grid_validation() {
        let mut g = VoxelGrid::toy();
        g.extent_x = 16.2;
        assert!(matches!(g.validate(), Err(Error::Contract(_))));
        let g = VoxelGrid { z_min: 0.0, ..VoxelGrid::toy() };
        assert!(matches!(g.validate(), Err(Error::Geometry(_))));
    }

    #[test]
    fn cell_lookup() {
        let g = VoxelGrid::toy();
        assert_eq!(g.cell_of(-8.0, 0.5), Some((0, 0)));
        assert_eq!(g.cell_of(0.1, 1.2), Some((16, 1)));
        assert_eq!(g.cell_of(8.0, 3.0), None);
        assert_eq!(g.cell_of(0.0, 0.4), None);
    }

    #[test]
    fn intrinsics_adjustments() {
        let k = CameraIntrinsics::new(500.0, 320.0, 120.0, 640, 240).unwrap();
        assert_eq!(adjust_intrinsics(&k, &CropRect::full(640, 240), 1.0, false).unwrap(), k);
        let s = adjust_intrinsics(&k, &CropRect::full(640, 240), 2.0, false).unwrap();
        assert_eq!(s.focal, 1000.0);
        assert_eq!((s.width, s.height), (1280, 480));
        let f = adjust_intrinsics(&k, &CropRect::full(640, 240), 1.0, true).unwrap();
        assert_eq!(f.cu, 319.0);
        let empty = CropRect { u0: 0, v0: 0, width: 0, height: 10 };
        assert!(adjust_intrinsics(&k, &empty, 1.0, false).is_err());
    }

    proptest! {
        #[test]
        fn crop_scale_is_invertible(u0 in 0usize..100, v0 in 0usize..50, w in 1usize..500, h in 1usize..150, s in 0.5f64..2.0) {
            let k = CameraIntrinsics::new(721.5, 609.6, 172.9, 1242, 375).unwrap();
            let crop = CropRect { u0, v0, width: w.min(1242 - u0), height: h.min(375 - v0) };
            let a = adjust_intrinsics(&k, &crop, s, false).unwrap();
            prop_assert!((a.focal / s - k.focal).abs() < 1e-9);
            prop_assert!((a.cu / s + u0 as f64 - k.cu).abs() < 1e-9);
            prop_assert!((a.cv / s + v0 as f64 - k.cv).abs() < 1e-9);
        }

        #[test]
        fn tiny_voxels_collapse_to_point_projection(tx in -1.0f64..1.0, y in -2.0f64..3.0, z in 2.0f64..60.0) {
            // keep the point inside the horizontal field of view
            let x = tx * z;
            let k = CameraIntrinsics::new(721.5, 609.6, 172.9, 1242, 375).unwrap();
            let b = project_voxel(&k, [x, y, z], 1e-6).unwrap();
            let p = k.project([x, y, z]).unwrap();
            for v in [b.u1, b.u2] { prop_assert!((v - p[0]).abs() < 1e-3); }
            for v in [b.v1, b.v2] { prop_assert!((v - p[1]).abs() < 1e-3); }
        }
    }
}

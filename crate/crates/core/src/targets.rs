//! Ground-truth encoding on the ground-plane grid and the detection loss.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::geometry::VoxelGrid;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Oriented 3D box in the camera frame.
///
/// `center` is the geometric centre of the box, `dims` are `(w, h, l)` and
/// `yaw` rotates about the camera y axis: at yaw 0 the length runs along +x,
/// and the heading in the ground plane is `(cos yaw, -sin yaw)` in `(x, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub class_id: usize,
}

impl Box3D {
    pub fn width(&self) -> f64 {
        self.dims[0]
    }

    pub fn height(&self) -> f64 {
        self.dims[1]
    }

    pub fn length(&self) -> f64 {
        self.dims[2]
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.dims.iter().all(|&d| d > 0.0 && d.is_finite()),
            Contract,
            "box dimensions must be positive, got {:?}",
            self.dims
        );
        Ok(())
    }

    /// Ground-plane footprint as `(x, z)` corners, counter-clockwise in `(x, z)`.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let along = [c, -s];
        let across = [s, c];
        let (hl, hw) = (self.length() / 2.0, self.width() / 2.0);
        let [x, _, z] = self.center;
        let corner = |a: f64, b: f64| [x + a * along[0] + b * across[0], z + a * along[1] + b * across[1]];
        [corner(hl, hw), corner(-hl, hw), corner(-hl, -hw), corner(hl, -hw)]
    }

    /// The eight corners; first four at the top (smaller y), then the bottom.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let fp = self.footprint();
        let (top, bottom) = (self.center[1] - self.height() / 2.0, self.center[1] + self.height() / 2.0);
        let mut out = [[0.0; 3]; 8];
        for (i, p) in fp.iter().enumerate() {
            out[i] = [p[0], top, p[1]];
            out[i + 4] = [p[0], bottom, p[1]];
        }
        out
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Mean `(w, h, l)` per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassStats {
    pub names: Vec<String>,
    pub mean_dims: Vec<[f64; 3]>,
}

impl Default for ClassStats {
    fn default() -> Self {
        Self {
            names: vec!["Car".into()],
            mean_dims: vec![[1.6, 1.5, 3.9]],
        }
    }
}

impl ClassStats {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.names.is_empty(), Config, "at least one class is required");
        ensure!(
            self.names.len() == self.mean_dims.len(),
            Config,
            "{} class names but {} mean dimension entries",
            self.names.len(),
            self.mean_dims.len()
        );
        for (n, d) in self.names.iter().zip(&self.mean_dims) {
            ensure!(d.iter().all(|&v| v > 0.0), Config, "class {n} has non-positive mean dims {d:?}");
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.names.len()
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn mean(&self, class_id: usize) -> [f64; 3] {
        self.mean_dims[class_id]
    }
}

/// Per-class confidence map plus the three regression maps.
///
/// Shapes: confidence `[K, nz, nx]`, position and dimension `[K, 3, nz, nx]`,
/// angle `[K, 2, nz, nx]` holding `(sin, cos)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionMaps<T> {
    pub confidence: Tensor<T>,
    pub position: Tensor<T>,
    pub dimension: Tensor<T>,
    pub angle: Tensor<T>,
}

impl<T: Real> DetectionMaps<T> {
    pub fn zeros(classes: usize, nz: usize, nx: usize) -> Self {
        Self {
            confidence: Tensor::zeros(&[classes, nz, nx]),
            position: Tensor::zeros(&[classes, 3, nz, nx]),
            dimension: Tensor::zeros(&[classes, 3, nz, nx]),
            angle: Tensor::zeros(&[classes, 2, nz, nx]),
        }
    }

    /// `(classes, nz, nx)`, after checking the four maps agree.
    pub fn dims(&self) -> Result<(usize, usize, usize)> {
        ensure!(self.confidence.rank() == 3, Dimension, "confidence map must be [K,nz,nx]");
        let (k, nz, nx) = (
            self.confidence.shape()[0],
            self.confidence.shape()[1],
            self.confidence.shape()[2],
        );
        self.position.expect_shape(&[k, 3, nz, nx], "position map")?;
        self.dimension.expect_shape(&[k, 3, nz, nx], "dimension map")?;
        self.angle.expect_shape(&[k, 2, nz, nx], "angle map")?;
        Ok((k, nz, nx))
    }

    /// Reads component `comp` of `map` (shape `[K, C, nz, nx]`) at a cell.
    pub fn component(map: &Tensor<T>, class: usize, comp: usize, iz: usize, ix: usize) -> f64 {
        let s = map.shape();
        map.data()[((class * s[1] + comp) * s[2] + iz) * s[3] + ix].to_f64()
    }
}

/// Which object (if any) each ground-plane cell regresses, per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    classes: usize,
    nz: usize,
    nx: usize,
    cells: Vec<Option<usize>>,
}

impl Assignment {
    pub fn get(&self, class: usize, iz: usize, ix: usize) -> Option<usize> {
        self.cells[(class * self.nz + iz) * self.nx + ix]
    }

    pub fn assigned_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// 0/1 mask broadcast over `components`, shaped `[K, components, nz, nx]`.
    pub fn mask<T: Real>(&self, components: usize) -> Tensor<T> {
        let plane = self.nz * self.nx;
        Tensor::from_fn(&[self.classes, components, self.nz, self.nx], |i| {
            let class = i / (components * plane);
            let cell = i % plane;
            if self.cells[class * plane + cell].is_some() {
                T::ONE
            } else {
                T::ZERO
            }
        })
    }
}

/// Per-class Gaussian confidence: the max over that class's objects of
/// `exp(-d^2 / (2 sigma^2))`, with `d` the ground-plane distance to the cell centre.
pub fn encode_confidence<T: Real>(objects: &[Box3D], grid: &VoxelGrid, sigma: f64, classes: usize) -> Result<Tensor<T>> {
    ensure!(sigma > 0.0, Contract, "sigma must be positive, got {sigma}");
    check_classes(objects, classes)?;
    let (nz, nx) = (grid.nz(), grid.nx());
    let denom = 2.0 * sigma * sigma;
    Ok(Tensor::from_fn(&[classes, nz, nx], |i| {
        let (class, iz, ix) = (i / (nz * nx), (i / nx) % nz, i % nx);
        let (x, z) = (grid.x_center(ix), grid.z_center(iz));
        let best = objects
            .iter()
            .filter(|o| o.class_id == class)
            .map(|o| (-((o.center[0] - x).powi(2) + (o.center[2] - z).powi(2)) / denom).exp())
            .fold(0.0f64, f64::max);
        T::from_f64(best)
    }))
}

fn check_classes(objects: &[Box3D], classes: usize) -> Result<()> {
    if let Some(o) = objects.iter().find(|o| o.class_id >= classes) {
        return Err(Error::Contract(format!(
            "object class {} outside the {classes} configured classes",
            o.class_id
        )));
    }
    Ok(())
}

/// Strict overlap of two convex polygons by separating axes: touching
/// edges or corners do not count.
pub fn convex_overlap(a: &[[f64; 2]], b: &[[f64; 2]]) -> bool {
    const EPS: f64 = 1e-9;
    for poly in [a, b] {
        for i in 0..poly.len() {
            let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
            let axis = [q[1] - p[1], p[0] - q[0]];
            let project = |pts: &[[f64; 2]]| {
                pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                    let d = v[0] * axis[0] + v[1] * axis[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let (a_lo, a_hi) = project(a);
            let (b_lo, b_hi) = project(b);
            let scale = (axis[0].abs() + axis[1].abs()).max(1.0);
            if a_hi <= b_lo + EPS * scale || b_hi <= a_lo + EPS * scale {
                return false;
            }
        }
    }
    true
}

/// The `r x r` square of cell `(ix, iz)` as `(x, z)` corners.
pub fn cell_square(grid: &VoxelGrid, ix: usize, iz: usize) -> [[f64; 2]; 4] {
    let h = grid.resolution / 2.0;
    let (x, z) = (grid.x_center(ix), grid.z_center(iz));
    [[x - h, z - h], [x + h, z - h], [x + h, z + h], [x - h, z + h]]
}

/// Assigns each cell to the overlapping object of its class whose centre is
/// nearest the cell centre (lower object index on exact ties).
pub fn assign_cells(objects: &[Box3D], grid: &VoxelGrid, classes: usize) -> Result<Assignment> {
    check_classes(objects, classes)?;
    let (nz, nx) = (grid.nz(), grid.nx());
    let mut cells: Vec<Option<usize>> = vec![None; classes * nz * nx];
    let r = grid.resolution;
    for (i, obj) in objects.iter().enumerate() {
        let fp = obj.footprint();
        let (mut x_lo, mut x_hi, mut z_lo, mut z_hi) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &fp {
            x_lo = x_lo.min(p[0]);
            x_hi = x_hi.max(p[0]);
            z_lo = z_lo.min(p[1]);
            z_hi = z_hi.max(p[1]);
        }
        let to_ix = |x: f64| ((x + grid.extent_x / 2.0) / r).floor();
        let to_iz = |z: f64| ((z - grid.z_min) / r).floor();
        let ix0 = to_ix(x_lo).max(0.0) as usize;
        let iz0 = to_iz(z_lo).max(0.0) as usize;
        let ix1 = to_ix(x_hi).min(nx as f64 - 1.0);
        let iz1 = to_iz(z_hi).min(nz as f64 - 1.0);
        if ix1 < 0.0 || iz1 < 0.0 {
            continue;
        }
        for iz in iz0..=iz1 as usize {
            for ix in ix0..=ix1 as usize {
                if !convex_overlap(&fp, &cell_square(grid, ix, iz)) {
                    continue;
                }
                let (cx, cz) = (grid.x_center(ix), grid.z_center(iz));
                let dist = |o: &Box3D| (o.center[0] - cx).powi(2) + (o.center[2] - cz).powi(2);
                let slot = &mut cells[(obj.class_id * nz + iz) * nx + ix];
                match slot {
                    Some(j) if dist(&objects[*j]) <= dist(obj) => {}
                    _ => *slot = Some(i),
                }
            }
        }
    }
    Ok(Assignment { classes, nz, nx, cells })
}

/// Position, log-dimension and angle targets at every assigned cell.
pub fn encode_offsets<T: Real>(
    assignment: &Assignment,
    objects: &[Box3D],
    grid: &VoxelGrid,
    sigma: f64,
    stats: &ClassStats,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    ensure!(sigma > 0.0, Contract, "sigma must be positive, got {sigma}");
    for o in objects {
        o.validate()?;
    }
    let (k, nz, nx) = (assignment.classes, assignment.nz, assignment.nx);
    let mut pos = Tensor::zeros(&[k, 3, nz, nx]);
    let mut dim = Tensor::zeros(&[k, 3, nz, nx]);
    let mut ang = Tensor::zeros(&[k, 2, nz, nx]);
    for class in 0..k {
        let mean = stats.mean(class);
        for iz in 0..nz {
            for ix in 0..nx {
                let Some(i) = assignment.get(class, iz, ix) else { continue };
                let o = &objects[i];
                let p = [
                    (o.center[0] - grid.x_center(ix)) / sigma,
                    (o.center[1] - grid.y0) / sigma,
                    (o.center[2] - grid.z_center(iz)) / sigma,
                ];
                for c in 0..3 {
                    pos.set(&[class, c, iz, ix], T::from_f64(p[c]));
                    dim.set(&[class, c, iz, ix], T::from_f64((o.dims[c] / mean[c]).ln()));
                }
                ang.set(&[class, 0, iz, ix], T::from_f64(o.yaw.sin()));
                ang.set(&[class, 1, iz, ix], T::from_f64(o.yaw.cos()));
            }
        }
    }
    Ok((pos, dim, ang))
}

/// Training targets for one scene.
#[derive(Clone, Debug)]
pub struct TargetMaps<T> {
    pub maps: DetectionMaps<T>,
    pub assignment: Assignment,
    pub sigma: f64,
}

pub fn encode_targets<T: Real>(objects: &[Box3D], grid: &VoxelGrid, sigma: f64, stats: &ClassStats) -> Result<TargetMaps<T>> {
    let classes = stats.class_count();
    let confidence = encode_confidence(objects, grid, sigma, classes)?;
    let assignment = assign_cells(objects, grid, classes)?;
    let (position, dimension, angle) = encode_offsets(&assignment, objects, grid, sigma, stats)?;
    Ok(TargetMaps {
        maps: DetectionMaps {
            confidence,
            position,
            dimension,
            angle,
        },
        assignment,
        sigma,
    })
}

/// Confidence-loss rescaling of negative cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Cells whose target confidence is below this count as negatives.
    pub negative_threshold: f64,
    /// Loss factor applied to negative cells.
    pub negative_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            negative_threshold: 0.05,
            negative_weight: 1e-2,
        }
    }
}

/// Per-head losses; the total is their unweighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub confidence: f64,
    pub position: f64,
    pub dimension: f64,
    pub angle: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.confidence + self.position + self.dimension + self.angle
    }

    pub fn add(&mut self, other: &LossComponents) {
        self.confidence += other.confidence;
        self.position += other.position;
        self.dimension += other.dimension;
        self.angle += other.angle;
    }
}

/// Per-element weights of the four L1 terms, in head order.
fn loss_weights<T: Real>(gt: &TargetMaps<T>, cfg: &LossConfig) -> [Tensor<T>; 4] {
    let thr = T::from_f64(cfg.negative_threshold);
    let neg = T::from_f64(cfg.negative_weight);
    let conf = gt.maps.confidence.map(|s| if s < thr { neg } else { T::ONE });
    [conf, gt.assignment.mask(3), gt.assignment.mask(3), gt.assignment.mask(2)]
}

/// Summed L1 losses of `pred` against `gt`.
pub fn detection_loss<T: Real>(pred: &DetectionMaps<T>, gt: &TargetMaps<T>, cfg: &LossConfig) -> Result<LossComponents> {
    let dims = pred.dims()?;
    ensure!(dims == gt.maps.dims()?, Dimension, "prediction maps {:?} vs targets {:?}", dims, gt.maps.dims()?);
    let [wc, wp, wd, wa] = loss_weights(gt, cfg);
    use crate::tensor::ops::l1_loss;
    Ok(LossComponents {
        confidence: l1_loss(&pred.confidence, &gt.maps.confidence, &wc)?.to_f64(),
        position: l1_loss(&pred.position, &gt.maps.position, &wp)?.to_f64(),
        dimension: l1_loss(&pred.dimension, &gt.maps.dimension, &wd)?.to_f64(),
        angle: l1_loss(&pred.angle, &gt.maps.angle, &wa)?.to_f64(),
    })
}

/// Recorded prediction maps, in the same layout as [`DetectionMaps`] but
/// possibly with class and component axes merged.
#[derive(Clone, Copy, Debug)]
pub struct DetectionVars {
    pub confidence: Var,
    pub position: Var,
    pub dimension: Var,
    pub angle: Var,
}

impl DetectionVars {
    pub fn values<T: Real>(&self, g: &Graph<T>) -> Result<DetectionMaps<T>> {
        let c = g.value(self.confidence);
        let (k, nz, nx) = (c.shape()[0], c.shape()[1], c.shape()[2]);
        Ok(DetectionMaps {
            confidence: c.clone(),
            position: g.value(self.position).clone().reshape(&[k, 3, nz, nx])?,
            dimension: g.value(self.dimension).clone().reshape(&[k, 3, nz, nx])?,
            angle: g.value(self.angle).clone().reshape(&[k, 2, nz, nx])?,
        })
    }
}

/// Records the detection loss; returns the total and the four head losses.
pub fn record_detection_loss<T: Real>(
    g: &mut Graph<T>,
    pred: &DetectionVars,
    gt: &TargetMaps<T>,
    cfg: &LossConfig,
) -> Result<(Var, [Var; 4])> {
    let weights = loss_weights(gt, cfg);
    let targets = [
        &gt.maps.confidence,
        &gt.maps.position,
        &gt.maps.dimension,
        &gt.maps.angle,
    ];
    let preds = [pred.confidence, pred.position, pred.dimension, pred.angle];
    let mut parts = [preds[0]; 4];
    for (i, (w, t)) in weights.into_iter().zip(targets).enumerate() {
        let shape = g.value(preds[i]).shape().to_vec();
        let t = t.clone().reshape(&shape)?;
        let w = w.reshape(&shape)?;
        parts[i] = g.l1_loss(preds[i], t, w)?;
    }
    let total = g.add_all(&parts)?;
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn car(x: f64, z: f64, yaw: f64) -> Box3D {
        Box3D {
            center: [x, 0.9, z],
            dims: [1.6, 1.5, 3.9],
            yaw,
            class_id: 0,
        }
    }

    #[test]
    fn confidence_peak_and_falloff() {
        let g = VoxelGrid::toy();
        let (x, z) = (g.x_center(10), g.z_center(12));
        let s: Tensor<f64> = encode_confidence(&[car(x, z, 0.0)], &g, 1.0, 1).unwrap();
        assert_eq!(s.at(&[0, 12, 10]), 1.0);
        // one metre away in x is two cells at r = 0.5
        assert!((s.at(&[0, 12, 12]) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((s.at(&[0, 12, 12]) - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn confidence_takes_per_cell_max() {
        let g = VoxelGrid::toy();
        let a = car(-2.1, 6.3, 0.0);
        let b = car(1.7, 8.2, 0.5);
        let both: Tensor<f64> = encode_confidence(&[a, b], &g, 1.0, 1).unwrap();
        let sa: Tensor<f64> = encode_confidence(&[a], &g, 1.0, 1).unwrap();
        let sb: Tensor<f64> = encode_confidence(&[b], &g, 1.0, 1).unwrap();
        for i in 0..both.numel() {
            assert_eq!(both.data()[i], sa.data()[i].max(sb.data()[i]));
        }
        let empty: Tensor<f64> = encode_confidence(&[a], &g, 1.0, 2).unwrap();
        assert!(empty.data()[g.nz() * g.nx()..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_object_claims_one_cell() {
        let g = VoxelGrid::toy();
        let tiny = Box3D {
            center: [g.x_center(3), 1.0, g.z_center(7)],
            dims: [0.2, 0.3, 0.3],
            yaw: 0.4,
            class_id: 0,
        };
        let a = assign_cells(&[tiny], &g, 1).unwrap();
        assert_eq!(a.assigned_count(), 1);
        assert_eq!(a.get(0, 7, 3), Some(0));
    }

    #[test]
    fn axis_aligned_block() {
        let g = VoxelGrid::toy();
        // 4 m along x, 2 m along z, edges on cell boundaries.
        let b = Box3D {
            center: [0.0, 1.0, 8.5],
            dims: [2.0, 1.5, 4.0],
            yaw: 0.0,
            class_id: 0,
        };
        let a = assign_cells(&[b], &g, 1).unwrap();
        assert_eq!(a.assigned_count(), 8 * 4);
    }

    #[test]
    fn nearest_centre_wins_conflicts() {
        let g = VoxelGrid::toy();
        let a = car(0.0, 8.0, 0.0);
        let b = car(0.0, 9.2, 0.0);
        let asg = assign_cells(&[a, b], &g, 1).unwrap();
        let (ix, iz) = g.cell_of(0.1, 8.4).unwrap();
        assert_eq!(asg.get(0, iz, ix), Some(0));
        let (ix, iz) = g.cell_of(0.1, 8.8).unwrap();
        assert_eq!(asg.get(0, iz, ix), Some(1));
    }

    #[test]
    fn offset_identity_and_examples() {
        let g = VoxelGrid::toy();
        let stats = ClassStats::default();
        let (ix, iz) = (9, 14);
        let mut o = Box3D {
            center: [g.x_center(ix), g.y0, g.z_center(iz)],
            dims: stats.mean(0),
            yaw: 0.0,
            class_id: 0,
        };
        let asg = assign_cells(&[o], &g, 1).unwrap();
        let (p, d, a): (Tensor<f64>, Tensor<f64>, Tensor<f64>) = encode_offsets(&asg, &[o], &g, 1.0, &stats).unwrap();
        for c in 0..3 {
            assert_eq!(p.at(&[0, c, iz, ix]), 0.0);
            assert_eq!(d.at(&[0, c, iz, ix]), 0.0);
        }
        assert_eq!((a.at(&[0, 0, iz, ix]), a.at(&[0, 1, iz, ix])), (0.0, 1.0));

        o.dims[0] *= 2.0;
        o.yaw = FRAC_PI_2;
        let asg = assign_cells(&[o], &g, 1).unwrap();
        let (_, d, a): (Tensor<f64>, Tensor<f64>, Tensor<f64>) = encode_offsets(&asg, &[o], &g, 1.0, &stats).unwrap();
        assert!((d.at(&[0, 0, iz, ix]) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((a.at(&[0, 0, iz, ix]) - 1.0).abs() < 1e-15);
        assert!(a.at(&[0, 1, iz, ix]).abs() < 1e-15);

        let bad = Box3D { dims: [0.0, 1.0, 1.0], ..o };
        assert!(encode_offsets::<f64>(&asg, &[bad], &g, 1.0, &stats).is_err());
    }

    #[test]
    fn loss_examples() {
        let g = VoxelGrid::toy();
        let stats = ClassStats::default();
        let cfg = LossConfig::default();
        let gt: TargetMaps<f64> = encode_targets(&[car(0.3, 9.0, 0.2)], &g, 1.0, &stats).unwrap();
        let perfect = gt.maps.clone();
        assert_eq!(detection_loss(&perfect, &gt, &cfg).unwrap().total(), 0.0);

        let empty: TargetMaps<f64> = encode_targets(&[], &g, 1.0, &stats).unwrap();
        let mut pred = empty.maps.clone();
        pred.confidence = pred.confidence.map(|v| v + 0.3);
        let n = (g.nz() * g.nx()) as f64;
        let l = detection_loss(&pred, &empty, &cfg).unwrap();
        assert!((l.confidence - 1e-2 * n * 0.3).abs() < 1e-9);

        // error at an unassigned cell is ignored by the regression heads
        let mut pred = gt.maps.clone();
        let (ix, iz) = (0, 0);
        assert!(gt.assignment.get(0, iz, ix).is_none());
        pred.position.set(&[0, 1, iz, ix], 5.0);
        let l = detection_loss(&pred, &gt, &cfg).unwrap();
        assert_eq!(l.position, 0.0);
    }

    #[test]
    fn normalize_angle_range() {
        assert!((normalize_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(-PI) - PI).abs() < 1e-12);
        assert!((normalize_angle(0.25)).eq(&0.25));
        assert!((normalize_angle(-3.0 * FRAC_PI_2) - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn footprint_is_ccw_and_sized() {
        let b = car(1.0, 10.0, 0.7);
        let fp = b.footprint();
        let mut area2 = 0.0;
        for i in 0..4 {
            let (p, q) = (fp[i], fp[(i + 1) % 4]);
            area2 += p[0] * q[1] - q[0] * p[1];
        }
        assert!((area2 / 2.0 - 1.6 * 3.9).abs() < 1e-9);
    }
}

//! Orthographic feature transform.
//!
//! Image features are average-pooled over each voxel's projected box to give
//! voxel features `g[n, z, y, x]`, which a learned per-level linear map
//! collapses onto the ground plane as `h[n, z, x] = sum_y W(y) g(., z, y, x)`.

use std::sync::Arc;

use crate::error::{ensure, Result};
use crate::geometry::{project_voxel, to_feature_box, CameraIntrinsics, FeatureBox, VoxelGrid};
use crate::integral::{scatter_box_gradients, IntegralMap};
use crate::par;
use crate::tensor::{gemm, Backward, Graph, MatView, Real, Tensor, Var};

/// Feature-map boxes of every voxel for one (grid, camera, scale), stored in
/// voxel-feature order `(z, y, x)`. `None` marks voxels that see nothing.
#[derive(Clone, Debug)]
pub struct PoolPlan {
    nz: usize,
    ny: usize,
    nx: usize,
    map_h: usize,
    map_w: usize,
    boxes: Vec<Option<FeatureBox>>,
}

impl PoolPlan {
    /// `scale` maps image pixels to feature-map pixels (e.g. 1/8).
    pub fn new(grid: &VoxelGrid, intr: &CameraIntrinsics, scale: f64, map_w: usize, map_h: usize) -> Result<Self> {
        grid.validate()?;
        let (nz, ny, nx) = (grid.nz(), grid.ny(), grid.nx());
        let r = grid.resolution;
        let slabs = par::map_range(nz, |iz| -> Result<Vec<Option<FeatureBox>>> {
            let z = grid.z_center(iz);
            let mut slab = Vec::with_capacity(ny * nx);
            for iy in 0..ny {
                let y = grid.y_center(iy);
                for ix in 0..nx {
                    let pb = project_voxel(intr, [grid.x_center(ix), y, z], r)?;
                    slab.push(to_feature_box(&pb, scale, map_w, map_h));
                }
            }
            Ok(slab)
        });
        let mut boxes = Vec::with_capacity(nz * ny * nx);
        for s in slabs {
            boxes.extend(s?);
        }
        Ok(Self {
            nz,
            ny,
            nx,
            map_h,
            map_w,
            boxes,
        })
    }

    pub fn voxel_shape(&self) -> [usize; 3] {
        [self.nz, self.ny, self.nx]
    }

    pub fn map_shape(&self) -> [usize; 2] {
        [self.map_h, self.map_w]
    }

    pub fn voxel_count(&self) -> usize {
        self.boxes.len()
    }

    /// Box of voxel `(iz, iy, ix)`.
    pub fn feature_box(&self, iz: usize, iy: usize, ix: usize) -> Option<FeatureBox> {
        self.boxes[(iz * self.ny + iy) * self.nx + ix]
    }

    pub fn visible_count(&self) -> usize {
        self.boxes.iter().filter(|b| b.is_some()).count()
    }

    fn check_map(&self, f: &IntegralMap) -> Result<()> {
        ensure!(
            f.height() == self.map_h && f.width() == self.map_w,
            Dimension,
            "pool plan built for {}x{} map, got {}x{}",
            self.map_h,
            self.map_w,
            f.height(),
            f.width()
        );
        Ok(())
    }

    /// Pools one z-slab into `slab` laid out `[y][x][C]`, adding to its contents.
    fn pool_slab<T: Real>(&self, f: &IntegralMap, iz: usize, slab: &mut [T]) {
        let c = f.channels();
        let base = iz * self.ny * self.nx;
        for (j, b) in self.boxes[base..base + self.ny * self.nx].iter().enumerate() {
            if let Some(b) = b {
                f.add_box_mean_unchecked(b, &mut slab[j * c..(j + 1) * c]);
            }
        }
    }
}

/// Voxel features `[C, nz, ny, nx]` pooled from an integral map.
pub fn pool_voxels<T: Real>(f: &IntegralMap, plan: &PoolPlan) -> Result<Tensor<T>> {
    plan.check_map(f)?;
    let c = f.channels();
    let (nz, ny, nx) = (plan.nz, plan.ny, plan.nx);
    let per_slab = ny * nx;
    let mut out = vec![T::ZERO; c * nz * per_slab];
    // Slabs are pooled channel-last and transposed in z-blocks to bound the
    // scratch memory on large grids.
    let block = 4 * par::current_threads();
    for z0 in (0..nz).step_by(block) {
        let z1 = (z0 + block).min(nz);
        let slabs = par::map_range(z1 - z0, |k| {
            let mut slab = vec![T::ZERO; per_slab * c];
            plan.pool_slab(f, z0 + k, &mut slab);
            slab
        });
        for (k, slab) in slabs.iter().enumerate() {
            let iz = z0 + k;
            for ch in 0..c {
                let dst = &mut out[(ch * nz + iz) * per_slab..][..per_slab];
                for (j, d) in dst.iter_mut().enumerate() {
                    *d = slab[j * c + ch];
                }
            }
        }
    }
    Tensor::new(&[c, nz, ny, nx], out)?.check_finite("voxel_features")
}

/// Voxel features for `grid` seen through `intr`, pooled at `scale`.
pub fn voxel_features<T: Real>(f: &IntegralMap, grid: &VoxelGrid, intr: &CameraIntrinsics, scale: f64) -> Result<Tensor<T>> {
    let plan = PoolPlan::new(grid, intr, scale, f.width(), f.height())?;
    pool_voxels(f, &plan)
}

/// Gradient of the pooled voxel features with respect to the image features.
pub fn pool_voxels_backward<T: Real>(grad: &Tensor<T>, plan: &PoolPlan, channels: usize) -> Result<Tensor<T>> {
    let v = plan.voxel_count();
    grad.expect_shape(&[channels, plan.nz, plan.ny, plan.nx], "voxel feature gradient")?;
    let g = grad.data();
    Ok(scatter_box_gradients(
        [channels, plan.map_h, plan.map_w],
        v,
        |i| plan.boxes[i],
        |i, ch| g[ch * v + i].to_f64(),
    ))
}

fn collapse_dims<T: Real>(g: &Tensor<T>, weights: &Tensor<T>) -> Result<[usize; 4]> {
    ensure!(g.rank() == 4, Dimension, "voxel features must be [n,z,y,x], got {:?}", g.shape());
    let (n, nz, ny, nx) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    weights.expect_shape(&[ny, n, n], "collapse weights")?;
    Ok([n, nz, ny, nx])
}

/// `h[:, z, x] = sum_y W[y] g[:, z, y, x]`, giving `[n, nz, nx]`.
pub fn collapse<T: Real>(g: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, nz, ny, nx] = collapse_dims(g, weights)?;
    let rows = par::map_range(nz, |iz| {
        let mut h = vec![T::ZERO; n * nx];
        for iy in 0..ny {
            let gv = MatView {
                data: &g.data()[(iz * ny + iy) * nx..],
                rows: n,
                cols: nx,
                row_stride: nz * ny * nx,
                col_stride: 1,
            };
            let w = MatView::row_major(&weights.data()[iy * n * n..(iy + 1) * n * n], n, n);
            gemm(w, gv, T::ONE, &mut h, nx);
        }
        h
    });
    let mut out = vec![T::ZERO; n * nz * nx];
    for (iz, h) in rows.iter().enumerate() {
        for ch in 0..n {
            out[(ch * nz + iz) * nx..][..nx].copy_from_slice(&h[ch * nx..(ch + 1) * nx]);
        }
    }
    Tensor::new(&[n, nz, nx], out)?.check_finite("collapse")
}

/// Gradients of [`collapse`] as `(d_g, d_weights)`.
pub fn collapse_backward<T: Real>(g: &Tensor<T>, weights: &Tensor<T>, grad: &Tensor<T>, want_g: bool) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let [n, nz, ny, nx] = collapse_dims(g, weights)?;
    grad.expect_shape(&[n, nz, nx], "collapse output gradient")?;
    let dh = grad.data();

    let mut dw = vec![T::ZERO; ny * n * n];
    par::for_each_chunk_mut(&mut dw, n * n, |iy, dst| {
        for iz in 0..nz {
            let dhz = MatView {
                data: &dh[iz * nx..],
                rows: n,
                cols: nx,
                row_stride: nz * nx,
                col_stride: 1,
            };
            let gz = MatView {
                data: &g.data()[(iz * ny + iy) * nx..],
                rows: n,
                cols: nx,
                row_stride: nz * ny * nx,
                col_stride: 1,
            };
            gemm(dhz, gz.t(), T::ONE, dst, n);
        }
    });

    let dg = if want_g {
        let slabs = par::map_range(nz, |iz| {
            let dhz = MatView {
                data: &dh[iz * nx..],
                rows: n,
                cols: nx,
                row_stride: nz * nx,
                col_stride: 1,
            };
            let mut slab = vec![T::ZERO; ny * n * nx];
            for iy in 0..ny {
                let wt = MatView::row_major(&weights.data()[iy * n * n..(iy + 1) * n * n], n, n).t();
                gemm(wt, dhz, T::ZERO, &mut slab[iy * n * nx..(iy + 1) * n * nx], nx);
            }
            slab
        });
        let mut out = vec![T::ZERO; g.numel()];
        for (iz, slab) in slabs.iter().enumerate() {
            for iy in 0..ny {
                for ch in 0..n {
                    out[((ch * nz + iz) * ny + iy) * nx..][..nx].copy_from_slice(&slab[(iy * n + ch) * nx..][..nx]);
                }
            }
        }
        Some(Tensor::new(g.shape(), out)?)
    } else {
        None
    };
    Ok((dg, Tensor::new(weights.shape(), dw)?))
}

/// Elementwise sum of per-scale orthographic maps.
pub fn fuse_scales<T: Real>(maps: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (first, rest) = maps
        .split_first()
        .ok_or_else(|| crate::Error::Contract("fuse_scales needs at least one map".into()))?;
    let mut out = first.clone();
    for m in rest {
        ensure!(
            m.same_shape(&out),
            Dimension,
            "cannot fuse {:?} with {:?}",
            m.shape(),
            out.shape()
        );
        out.add_assign(m)?;
    }
    Ok(out)
}

/// Inference path: pooled features of every scale, summed, then collapsed,
/// one z-slab at a time. Because the collapse is linear and its weights
/// are shared across scales this equals fusing per-scale collapses, without
/// materialising the voxel tensor.
pub fn orthographic_features<T: Real>(maps: &[IntegralMap], plans: &[PoolPlan], weights: &Tensor<T>) -> Result<Tensor<T>> {
    ensure!(
        !maps.is_empty() && maps.len() == plans.len(),
        Contract,
        "{} feature maps for {} pool plans",
        maps.len(),
        plans.len()
    );
    let n = maps[0].channels();
    let [nz, ny, nx] = plans[0].voxel_shape();
    for (m, p) in maps.iter().zip(plans) {
        p.check_map(m)?;
        ensure!(m.channels() == n, Dimension, "scales disagree on channel count");
        ensure!(p.voxel_shape() == [nz, ny, nx], Dimension, "scales disagree on the grid");
    }
    weights.expect_shape(&[ny, n, n], "collapse weights")?;
    let rows = par::map_range(nz, |iz| {
        let mut slab = vec![T::ZERO; ny * nx * n];
        for (m, p) in maps.iter().zip(plans) {
            p.pool_slab(m, iz, &mut slab);
        }
        let mut h = vec![T::ZERO; n * nx];
        for iy in 0..ny {
            // slab[y] is [x][C]; view it as C x nx with column stride C.
            let gv = MatView {
                data: &slab[iy * nx * n..(iy + 1) * nx * n],
                rows: n,
                cols: nx,
                row_stride: 1,
                col_stride: n,
            };
            let w = MatView::row_major(&weights.data()[iy * n * n..(iy + 1) * n * n], n, n);
            gemm(w, gv, T::ONE, &mut h, nx);
        }
        h
    });
    let mut out = vec![T::ZERO; n * nz * nx];
    for (iz, h) in rows.iter().enumerate() {
        for ch in 0..n {
            out[(ch * nz + iz) * nx..][..nx].copy_from_slice(&h[ch * nx..(ch + 1) * nx]);
        }
    }
    Tensor::new(&[n, nz, nx], out)?.check_finite("orthographic_features")
}

struct PoolOp {
    plan: Arc<PoolPlan>,
}

impl<T: Real> Backward<T> for PoolOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(pool_voxels_backward(grad, &self.plan, inputs[0].shape()[0])?)])
    }

    fn name(&self) -> &'static str {
        "voxel_pool"
    }
}

struct CollapseOp;

impl<T: Real> Backward<T> for CollapseOp {
    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, wanted: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
        let (dg, dw) = collapse_backward(inputs[0], inputs[1], grad, wanted[0])?;
        Ok(vec![dg, Some(dw)])
    }

    fn name(&self) -> &'static str {
        "collapse"
    }
}

impl<T: Real> Graph<T> {
    /// Records voxel pooling of image features `[C,H,W]`.
    pub fn voxel_pool(&mut self, features: Var, plan: Arc<PoolPlan>) -> Result<Var> {
        let integral = IntegralMap::new(self.value(features))?;
        let out = pool_voxels(&integral, &plan)?;
        Ok(self.record(out, &[features], PoolOp { plan }))
    }

    pub fn collapse(&mut self, voxels: Var, weights: Var) -> Result<Var> {
        let out = collapse(self.value(voxels), self.value(weights))?;
        Ok(self.record(out, &[voxels, weights], CollapseOp))
    }
}

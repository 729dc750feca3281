//! Peak finding on confidence maps and inversion of the offset encodings.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::geometry::VoxelGrid;
use crate::targets::{normalize_angle, Box3D, ClassStats, DetectionMaps};
use crate::tensor::{Real, Tensor};

/// A decoded, scored box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

/// A local maximum of a confidence map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Peak {
    pub class: usize,
    pub ix: usize,
    pub iz: usize,
    pub score: f64,
}

/// Decoding parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    /// Minimum confidence of an emitted peak.
    pub threshold: f64,
    /// Gaussian smoothing width in metres; `None` uses the grid resolution.
    pub sigma_nms: Option<f64>,
    /// Apply the threshold to the smoothed map instead of the raw one.
    pub threshold_smoothed: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            threshold: 0.6,
            sigma_nms: None,
            threshold_smoothed: false,
        }
    }
}

impl DecodeConfig {
    pub fn sigma_nms_for(&self, grid: &VoxelGrid) -> f64 {
        self.sigma_nms.unwrap_or(grid.resolution)
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalized 1D Gaussian taps for width `sigma` on cells of size `r`.
pub fn gaussian_kernel(sigma: f64, r: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma / r).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| {
            let d = i as f64 * r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / total).collect()
}

/// Separable Gaussian blur of each `[nz, nx]` plane of `s` (shape `[K, nz, nx]`)
/// with symmetric reflection at the borders.
pub fn smooth_confidence<T: Real>(s: &Tensor<T>, sigma_nms: f64, r: f64) -> Result<Tensor<T>> {
    ensure!(s.rank() == 3, Dimension, "confidence map must be [K,nz,nx], got {:?}", s.shape());
    ensure!(sigma_nms >= 0.0, Contract, "sigma_nms must be non-negative, got {sigma_nms}");
    if sigma_nms == 0.0 {
        return Ok(s.clone());
    }
    let kernel = gaussian_kernel(sigma_nms, r);
    let radius = (kernel.len() / 2) as isize;
    let (k, nz, nx) = (s.shape()[0], s.shape()[1], s.shape()[2]);
    let mut out = vec![T::ZERO; s.numel()];
    let mut rows = vec![0.0f64; nz * nx];
    for c in 0..k {
        let plane = &s.data()[c * nz * nx..(c + 1) * nz * nx];
        for iz in 0..nz {
            for ix in 0..nx {
                rows[iz * nx + ix] = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * plane[iz * nx + reflect(ix as isize + t as isize - radius, nx)].to_f64())
                    .sum();
            }
        }
        for iz in 0..nz {
            for ix in 0..nx {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * rows[reflect(iz as isize + t as isize - radius, nz) * nx + ix])
                    .sum();
                out[c * nz * nx + iz * nx + ix] = T::from_f64(v);
            }
        }
    }
    Tensor::new(s.shape(), out)
}

/// Cells of `smoothed` that are `>=` all of their existing 8 neighbours and
/// whose threshold map value is at least `t`. Connected runs of equal-valued
/// peaks keep only their first cell in row-major `(iz, ix)` order. The score
/// of each peak is taken from `raw`.
pub fn find_peaks<T: Real>(smoothed: &Tensor<T>, raw: &Tensor<T>, t: f64, threshold_smoothed: bool) -> Result<Vec<Peak>> {
    ensure!(smoothed.rank() == 3, Dimension, "confidence map must be [K,nz,nx], got {:?}", smoothed.shape());
    ensure!(smoothed.same_shape(raw), Dimension, "smoothed {:?} vs raw {:?}", smoothed.shape(), raw.shape());
    let (k, nz, nx) = (smoothed.shape()[0], smoothed.shape()[1], smoothed.shape()[2]);
    let neighbours = |iz: usize, ix: usize| {
        let mut v = Vec::with_capacity(8);
        for dz in -1isize..=1 {
            for dx in -1isize..=1 {
                let (z, x) = (iz as isize + dz, ix as isize + dx);
                if (dz, dx) != (0, 0) && z >= 0 && x >= 0 && (z as usize) < nz && (x as usize) < nx {
                    v.push((z as usize, x as usize));
                }
            }
        }
        v
    };
    let mut peaks = Vec::new();
    for c in 0..k {
        let base = c * nz * nx;
        let sm = &smoothed.data()[base..base + nz * nx];
        let rw = &raw.data()[base..base + nz * nx];
        let gate = if threshold_smoothed { sm } else { rw };
        let candidate: Vec<bool> = (0..nz * nx)
            .map(|i| {
                let (iz, ix) = (i / nx, i % nx);
                gate[i].to_f64() >= t && neighbours(iz, ix).into_iter().all(|(z, x)| sm[i] >= sm[z * nx + x])
            })
            .collect();
        let mut seen = vec![false; nz * nx];
        for i in 0..nz * nx {
            if !candidate[i] || seen[i] {
                continue;
            }
            // row-major scan reaches the smallest index of each plateau first
            seen[i] = true;
            let mut queue = VecDeque::from([i]);
            while let Some(j) = queue.pop_front() {
                for (z, x) in neighbours(j / nx, j % nx) {
                    let n = z * nx + x;
                    if candidate[n] && !seen[n] && sm[n] == sm[j] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
            peaks.push(Peak {
                class: c,
                ix: i % nx,
                iz: i / nx,
                score: rw[i].to_f64(),
            });
        }
    }
    Ok(peaks)
}

/// Inverts the position, dimension and angle encodings at each peak.
pub fn decode_detections<T: Real>(
    peaks: &[Peak],
    maps: &DetectionMaps<T>,
    grid: &VoxelGrid,
    sigma: f64,
    stats: &ClassStats,
) -> Result<Vec<Detection>> {
    let (k, nz, nx) = maps.dims()?;
    ensure!(stats.class_count() >= k, Contract, "{} class statistics for {k} map classes", stats.class_count());
    let comp = DetectionMaps::<T>::component;
    peaks
        .iter()
        .map(|p| {
            ensure!(p.class < k && p.iz < nz && p.ix < nx, Contract, "peak {p:?} outside the maps");
            let pos = |c| comp(&maps.position, p.class, c, p.iz, p.ix);
            let dim = |c| comp(&maps.dimension, p.class, c, p.iz, p.ix);
            let (s, co) = (comp(&maps.angle, p.class, 0, p.iz, p.ix), comp(&maps.angle, p.class, 1, p.iz, p.ix));
            let mean = stats.mean(p.class);
            let yaw = if s == 0.0 && co == 0.0 { 0.0 } else { normalize_angle(s.atan2(co)) };
            Ok(Detection {
                bbox: Box3D {
                    center: [
                        grid.x_center(p.ix) + sigma * pos(0),
                        grid.y0 + sigma * pos(1),
                        grid.z_center(p.iz) + sigma * pos(2),
                    ],
                    dims: [mean[0] * dim(0).exp(), mean[1] * dim(1).exp(), mean[2] * dim(2).exp()],
                    yaw,
                    class_id: p.class,
                },
                score: p.score,
            })
        })
        .collect()
}

/// Smoothing, peak finding and decoding in one call.
pub fn detect<T: Real>(
    maps: &DetectionMaps<T>,
    grid: &VoxelGrid,
    sigma: f64,
    stats: &ClassStats,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    let smoothed = smooth_confidence(&maps.confidence, cfg.sigma_nms_for(grid), grid.resolution)?;
    let peaks = find_peaks(&smoothed, &maps.confidence, cfg.threshold, cfg.threshold_smoothed)?;
    decode_detections(&peaks, maps, grid, sigma, stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::encode_targets;
    use proptest::prelude::*;

    fn plane(nz: usize, nx: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn(&[1, nz, nx], |i| f(i / nx, i % nx))
    }

    #[test]
    fn smoothing_identity_and_constant() {
        let s = plane(5, 7, |z, x| (z * 7 + x) as f64 / 35.0);
        assert_eq!(smooth_confidence(&s, 0.0, 0.5).unwrap(), s);
        let c = plane(6, 6, |_, _| 0.7);
        let sm = smooth_confidence(&c, 0.5, 0.5).unwrap();
        assert!(sm.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn impulse_gives_center_weight() {
        let s = plane(15, 15, |z, x| if (z, x) == (7, 7) { 1.0 } else { 0.0 });
        let sm = smooth_confidence(&s, 0.5, 0.5).unwrap();
        // direct 2D kernel evaluation: radius 3, weights exp(-(i^2 + j^2)/2)
        let norm: f64 = (-3..=3i32)
            .flat_map(|i| (-3..=3i32).map(move |j| (-((i * i + j * j) as f64) / 2.0).exp()))
            .sum();
        assert!((sm.at(&[0, 7, 7]) - 1.0 / norm).abs() < 1e-12);
        let total: f64 = sm.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_bump_single_peak() {
        let s = plane(12, 12, |z, x| (-(((z as f64 - 4.0).powi(2) + (x as f64 - 6.0).powi(2)) / 4.0)).exp());
        let p = find_peaks(&s, &s, 0.6, false).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].iz, p[0].ix), (4, 6));
    }

    #[test]
    fn uniform_plateau() {
        let s = plane(4, 5, |_, _| 0.8);
        let p = find_peaks(&s, &s, 0.6, false).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].iz, p[0].ix), (0, 0));
        assert!(find_peaks(&s, &s, 0.9, false).unwrap().is_empty());
    }

    #[test]
    fn weak_bump_below_threshold_is_dropped() {
        let bump = |z: usize, x: usize, cz: f64, cx: f64, a: f64| a * (-((z as f64 - cz).powi(2) + (x as f64 - cx).powi(2))).exp();
        let s = plane(10, 12, |z, x| bump(z, x, 3.0, 2.0, 0.9).max(bump(z, x, 6.0, 9.0, 0.4)));
        let p = find_peaks(&s, &s, 0.6, false).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!((p[0].iz, p[0].ix), (3, 2));
        assert!((p[0].score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn decode_identity_and_angles() {
        let g = VoxelGrid::toy();
        let stats = ClassStats::default();
        let mut maps = DetectionMaps::<f64>::zeros(1, g.nz(), g.nx());
        maps.angle.set(&[0, 1, 3, 4], 1.0);
        let peak = Peak { class: 0, ix: 4, iz: 3, score: 0.9 };
        let d = decode_detections(&[peak], &maps, &g, 1.0, &stats).unwrap();
        assert_eq!(d[0].bbox.center, [g.x_center(4), g.y0, g.z_center(3)]);
        assert_eq!(d[0].bbox.dims, stats.mean(0));
        assert_eq!(d[0].bbox.yaw, 0.0);

        maps.angle.set(&[0, 0, 3, 4], 0.6);
        maps.angle.set(&[0, 1, 3, 4], 0.8);
        let d = decode_detections(&[peak], &maps, &g, 1.0, &stats).unwrap();
        assert!((d[0].bbox.yaw - 0.6435).abs() < 1e-4);

        maps.angle.set(&[0, 0, 3, 4], 6.0);
        maps.angle.set(&[0, 1, 3, 4], 8.0);
        let scaled = decode_detections(&[peak], &maps, &g, 1.0, &stats).unwrap();
        assert_eq!(scaled[0].bbox.yaw, d[0].bbox.yaw);

        maps.angle.set(&[0, 0, 3, 4], 0.0);
        maps.angle.set(&[0, 1, 3, 4], 0.0);
        let d = decode_detections(&[peak], &maps, &g, 1.0, &stats).unwrap();
        assert_eq!(d[0].bbox.yaw, 0.0);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(x in -6.0f64..6.0, z in 3.0f64..14.0, y in 0.5f64..1.5,
                                    w in 1.2f64..2.0, h in 1.2f64..1.8, l in 3.0f64..4.5,
                                    yaw in -(std::f64::consts::PI - 1e-5)..(std::f64::consts::PI - 1e-5)) {
            let g = VoxelGrid::toy();
            let stats = ClassStats::default();
            let obj = Box3D { center: [x, y, z], dims: [w, h, l], yaw, class_id: 0 };
            let gt = encode_targets::<f64>(&[obj], &g, 1.0, &stats).unwrap();
            let (ix, iz) = g.cell_of(x, z).unwrap();
            let peak = Peak { class: 0, ix, iz, score: 1.0 };
            let d = decode_detections(&[peak], &gt.maps, &g, 1.0, &stats).unwrap()[0].bbox;
            for c in 0..3 {
                prop_assert!((d.center[c] - obj.center[c]).abs() < 1e-9);
                prop_assert!((d.dims[c] - obj.dims[c]).abs() < 1e-9);
            }
            prop_assert!(normalize_angle(d.yaw - obj.yaw).abs() < 1e-9);
        }

        #[test]
        fn peaks_respect_threshold(vals in proptest::collection::vec(0.0f64..1.0, 48), t in 0.0f64..1.0) {
            let s: Tensor<f64> = Tensor::from_f64_slice(&[1, 6, 8], &vals).unwrap();
            let p = find_peaks(&s, &s, t, false).unwrap();
            prop_assert!(p.len() <= 48);
            prop_assert!(p.iter().all(|p| p.score >= t));
        }
    }
}

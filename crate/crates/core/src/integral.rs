//! Integral feature maps: constant-time box means and their adjoint.

use crate::error::{ensure, Error, Result};
use crate::geometry::FeatureBox;
use crate::par;
use crate::tensor::{Real, Tensor};

/// Exclusive 2D prefix sums of a `[C,H,W]` map, with a zero first row and
/// column, so `F(v, u) = sum of f over [0, v) x [0, u)`.
///
/// Sums are held in `f64` regardless of the feature type; far-corner
/// differences on large maps lose too much in single precision. Storage is
/// channel-last so each corner lookup reads one contiguous run of `C`.
#[derive(Clone, Debug)]
pub struct IntegralMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// One corner read performed by a box query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lookup {
    pub channel: usize,
    pub v: usize,
    pub u: usize,
}

impl IntegralMap {
    pub fn new<T: Real>(f: &Tensor<T>) -> Result<Self> {
        ensure!(f.rank() == 3, Dimension, "integral map needs [C,H,W], got {:?}", f.shape());
        let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let stride = (w + 1) * c;
        let mut data = vec![0.0f64; (h + 1) * stride];
        let src = f.data();
        let mut row = vec![0.0f64; c];
        for v in 0..h {
            row.iter_mut().for_each(|s| *s = 0.0);
            let (above, here) = data.split_at_mut((v + 1) * stride);
            let above = &above[v * stride..];
            for u in 0..w {
                let o = (u + 1) * c;
                for ch in 0..c {
                    row[ch] += src[(ch * h + v) * w + u].to_f64();
                    here[o + ch] = above[o + ch] + row[ch];
                }
            }
        }
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `F(c, v, u)` for `v <= H`, `u <= W`.
    pub fn at(&self, channel: usize, v: usize, u: usize) -> f64 {
        self.data[self.corner(v, u) + channel]
    }

    /// The sums as a `[C, H+1, W+1]` tensor.
    pub fn to_tensor(&self) -> Tensor<f64> {
        let (c, h, w) = (self.channels, self.height, self.width);
        Tensor::from_fn(&[c, h + 1, w + 1], |i| {
            let ch = i / ((h + 1) * (w + 1));
            let rem = i % ((h + 1) * (w + 1));
            self.at(ch, rem / (w + 1), rem % (w + 1))
        })
    }

    #[inline]
    fn corner(&self, v: usize, u: usize) -> usize {
        (v * (self.width + 1) + u) * self.channels
    }

    fn check_box(&self, b: &FeatureBox) -> Result<()> {
        if b.u1 >= b.u2 || b.v1 >= b.v2 {
            return Err(Error::Contract(format!("zero-area box {b:?}")));
        }
        ensure!(
            b.u2 <= self.width && b.v2 <= self.height,
            Contract,
            "box {b:?} exceeds {}x{} map",
            self.width,
            self.height
        );
        Ok(())
    }

    /// Mean of `f` over the half-open box, per channel.
    pub fn box_mean<T: Real>(&self, b: &FeatureBox) -> Result<Vec<T>> {
        let mut out = vec![T::ZERO; self.channels];
        self.box_mean_into(b, &mut out)?;
        Ok(out)
    }

    pub fn box_mean_into<T: Real>(&self, b: &FeatureBox, out: &mut [T]) -> Result<()> {
        self.box_mean_traced(b, out, &mut |_| {})
    }

    /// [`Self::box_mean_into`], reporting every corner read to `trace`.
    pub fn box_mean_traced<T: Real>(&self, b: &FeatureBox, out: &mut [T], trace: &mut dyn FnMut(Lookup)) -> Result<()> {
        self.check_box(b)?;
        ensure!(out.len() == self.channels, Dimension, "output holds {} channels, map has {}", out.len(), self.channels);
        let inv_area = 1.0 / b.area() as f64;
        let (a, d) = (self.corner(b.v1, b.u1), self.corner(b.v2, b.u2));
        let (bl, tr) = (self.corner(b.v2, b.u1), self.corner(b.v1, b.u2));
        for (ch, o) in out.iter_mut().enumerate() {
            for (v, u) in [(b.v1, b.u1), (b.v2, b.u2), (b.v2, b.u1), (b.v1, b.u2)] {
                trace(Lookup { channel: ch, v, u });
            }
            let s = self.data[a + ch] + self.data[d + ch] - self.data[bl + ch] - self.data[tr + ch];
            *o = T::from_f64(s * inv_area);
        }
        Ok(())
    }

    /// Fast path for callers that validated `b` already.
    #[inline]
    pub(crate) fn add_box_mean_unchecked<T: Real>(&self, b: &FeatureBox, out: &mut [T]) {
        let inv_area = 1.0 / b.area() as f64;
        let c = self.channels;
        let a = &self.data[self.corner(b.v1, b.u1)..][..c];
        let d = &self.data[self.corner(b.v2, b.u2)..][..c];
        let bl = &self.data[self.corner(b.v2, b.u1)..][..c];
        let tr = &self.data[self.corner(b.v1, b.u2)..][..c];
        for ch in 0..c {
            out[ch] += T::from_f64((a[ch] + d[ch] - bl[ch] - tr[ch]) * inv_area);
        }
    }
}

/// Adjoint of [`IntegralMap::box_mean`] over many boxes: every box spreads
/// its upstream gradient divided by its area over the pixels it covers,
/// overlapping boxes adding up. `grad_out` is `[N, C]`.
pub fn box_mean_backward<T: Real>(grad_out: &Tensor<T>, boxes: &[FeatureBox], shape: [usize; 3]) -> Result<Tensor<T>> {
    let [c, h, w] = shape;
    grad_out.expect_shape(&[boxes.len(), c], "box_mean upstream gradient")?;
    for b in boxes {
        ensure!(b.u1 < b.u2 && b.v1 < b.v2, Contract, "zero-area box {b:?}");
        ensure!(b.u2 <= w && b.v2 <= h, Contract, "box {b:?} exceeds {w}x{h} map");
    }
    let g = grad_out.data();
    Ok(scatter_box_gradients(
        shape,
        boxes.len(),
        |i| Some(boxes[i]),
        |i, ch| g[i * c + ch].to_f64(),
    ))
}

/// Shared scatter kernel: box `i` (if any) carries gradient `grad(i, ch)`.
///
/// Each box adds `+a, -a, -a, +a` at its four corners of a difference
/// array; an inclusive prefix sum then yields the per-pixel totals, so the
/// cost is O(1) per box plus one pass over the map. Boxes are split into a
/// fixed number of ranges whose partial arrays are merged in order.
pub(crate) fn scatter_box_gradients<T, B, G>(shape: [usize; 3], n: usize, box_at: B, grad: G) -> Tensor<T>
where
    T: Real,
    B: Fn(usize) -> Option<FeatureBox> + Sync + Send,
    G: Fn(usize, usize) -> f64 + Sync + Send,
{
    let [c, h, w] = shape;
    let stride = (w + 1) * c;
    let ranges = par::split_ranges(n, par::REDUCTION_PARTS);
    let partials: Vec<Vec<f64>> = par::map_range(ranges.len(), |p| {
        let mut diff = vec![0.0f64; (h + 1) * stride];
        for i in ranges[p].clone() {
            let Some(b) = box_at(i) else { continue };
            let inv_area = 1.0 / b.area() as f64;
            let corners = [
                ((b.v1 * (w + 1) + b.u1) * c, 1.0),
                ((b.v1 * (w + 1) + b.u2) * c, -1.0),
                ((b.v2 * (w + 1) + b.u1) * c, -1.0),
                ((b.v2 * (w + 1) + b.u2) * c, 1.0),
            ];
            for ch in 0..c {
                let a = grad(i, ch) * inv_area;
                for &(o, s) in &corners {
                    diff[o + ch] += s * a;
                }
            }
        }
        diff
    });
    let mut diff = vec![0.0f64; (h + 1) * stride];
    for part in &partials {
        for (d, p) in diff.iter_mut().zip(part) {
            *d += p;
        }
    }
    // Inclusive prefix sums over the H x W region give the pixel gradients.
    let mut out = vec![T::ZERO; c * h * w];
    let mut col = vec![0.0f64; w * c];
    for v in 0..h {
        let mut run = vec![0.0f64; c];
        for u in 0..w {
            for ch in 0..c {
                run[ch] += diff[v * stride + u * c + ch];
                col[u * c + ch] += run[ch];
                out[(ch * h + v) * w + u] = T::from_f64(col[u * c + ch]);
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("shape matches buffer")
}

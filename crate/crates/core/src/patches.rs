//! Dense multi-scale patches and spatial pyramid (grid) max pooling.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Axis-aligned rectangle, top-left inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Rect { x0, y0, w, h }
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.w >= 1 && self.h >= 1 && self.x0 + self.w <= width && self.y0 + self.h <= height
    }
}

fn offsets(extent: usize, size: usize, step: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..=extent - size).step_by(step).collect();
    let last = *out.last().expect("size <= extent");
    if last + size < extent {
        out.push(extent - size);
    }
    out
}

/// All `s×s` squares on a regular `step` grid for every scale `s` that fits.
///
/// Each axis gets one extra end-aligned position when the stepped grid stops
/// short of the border. Scales larger than the image are skipped; if none
/// fits at all, a single centered square of side `min(w, h)` is returned.
/// Rects are ordered by scale (as given), then row, then column.
pub fn dense_patches(
    img_w: usize,
    img_h: usize,
    scales: &[usize],
    step: usize,
) -> Result<Vec<Rect>> {
    if step == 0 {
        return Err(Error::InvalidArgument("patch step must be >= 1".into()));
    }
    if scales.is_empty() || scales.contains(&0) {
        return Err(Error::InvalidArgument("patch scales must be non-empty and positive".into()));
    }
    if img_w == 0 || img_h == 0 {
        return Err(Error::NoPatches);
    }
    let side = img_w.min(img_h);
    let mut rects = Vec::new();
    for &s in scales.iter().filter(|&&s| s <= side) {
        let xs = offsets(img_w, s, step);
        for y in offsets(img_h, s, step) {
            rects.extend(xs.iter().map(|&x| Rect::new(x, y, s, s)));
        }
    }
    if rects.is_empty() {
        rects.push(Rect::new((img_w - side) / 2, (img_h - side) / 2, side, side));
    }
    Ok(rects)
}

/// Maps an image-space rect onto a feature map with the given cumulative
/// stride: start is floored, end is ceiled, both clamped to the map, and the
/// result spans at least one cell per axis.
pub fn project_rect(r: Rect, total_stride: usize, fm_w: usize, fm_h: usize) -> Rect {
    let stride = total_stride.max(1);
    let axis = |start: usize, extent: usize, limit: usize| -> (usize, usize) {
        let limit = limit.max(1);
        let s = (start / stride).min(limit - 1);
        let e = (start + extent).div_ceil(stride).min(limit).max(s + 1);
        (s, e - s)
    };
    let (x0, w) = axis(r.x0, r.w, fm_w);
    let (y0, h) = axis(r.y0, r.h, fm_h);
    Rect { x0, y0, w, h }
}

/// Half-open bounds of sub-window `a` of `n` along an extent of `len` cells.
#[inline]
pub fn sub_window(a: usize, n: usize, len: usize) -> (usize, usize) {
    let start = a * len / n;
    let end = ((a + 1) * len).div_ceil(n);
    (start, end)
}

/// Argmax routing of one pooled patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SppCache {
    /// Flat C×H×W index of the maximum for every output cell (C×gh×gw order).
    argmax: Vec<usize>,
    input_shape: [usize; 3],
    grid: (usize, usize),
}

impl SppCache {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }
}

/// Max-pools the region `r` of a C×H×W map into a C×gh×gw grid.
///
/// Ties resolve to the lowest flat index.
pub fn spp_forward<T: Scalar>(
    featmap: &Tensor<T>,
    r: Rect,
    grid: (usize, usize),
) -> Result<(Tensor<T>, SppCache)> {
    let (c, h, w) = featmap.dims3()?;
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 {
        return Err(Error::InvalidArgument("SPP grid must be at least 1×1".into()));
    }
    if r.w == 0 || r.h == 0 {
        return Err(Error::InvalidArgument("empty pooling rect".into()));
    }
    if !r.fits_in(w, h) {
        return Err(shape_err(format!("rect {r:?} outside {h}×{w} feature map")));
    }
    let data = featmap.data();
    let mut out = Vec::with_capacity(c * gh * gw);
    let mut argmax = Vec::with_capacity(c * gh * gw);
    for ch in 0..c {
        let plane = ch * h * w;
        for a in 0..gh {
            let (ys, ye) = sub_window(a, gh, r.h);
            for b in 0..gw {
                let (xs, xe) = sub_window(b, gw, r.w);
                let mut best = plane + (r.y0 + ys) * w + r.x0 + xs;
                for y in (r.y0 + ys)..(r.y0 + ye) {
                    let row = plane + y * w;
                    for idx in (row + r.x0 + xs)..(row + r.x0 + xe) {
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_vec(&[c, gh, gw], out)?,
        SppCache {
            argmax,
            input_shape: [c, h, w],
            grid,
        },
    ))
}

/// Routes each upstream value onto its cached argmax location, adding into `grad`.
pub fn spp_backward_into<T: Scalar>(
    cache: &SppCache,
    d_out: &Tensor<T>,
    grad: &mut Tensor<T>,
) -> Result<()> {
    let [c, h, w] = cache.input_shape;
    if d_out.shape() != [c, cache.grid.0, cache.grid.1] {
        return Err(shape_err(format!(
            "SPP upstream gradient {:?}, expected [{c}, {}, {}]",
            d_out.shape(),
            cache.grid.0,
            cache.grid.1
        )));
    }
    if grad.shape() != [c, h, w] {
        return Err(shape_err(format!(
            "gradient map {:?}, expected [{c}, {h}, {w}]",
            grad.shape()
        )));
    }
    let g = grad.data_mut();
    for (&idx, &v) in cache.argmax.iter().zip(d_out.data()) {
        g[idx] += v;
    }
    Ok(())
}

/// Gradient of [`spp_forward`] with respect to the feature map.
pub fn spp_backward<T: Scalar>(
    cache: &SppCache,
    d_out: &Tensor<T>,
    featmap_shape: &[usize],
) -> Result<Tensor<T>> {
    if featmap_shape != cache.input_shape {
        return Err(shape_err(format!(
            "feature map shape {featmap_shape:?} does not match cache {:?}",
            cache.input_shape
        )));
    }
    let mut grad = Tensor::zeros(featmap_shape);
    spp_backward_into(cache, d_out, &mut grad)?;
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_patch_counts() {
        assert_eq!(dense_patches(256, 256, &[64], 32).unwrap().len(), 49);
        assert_eq!(dense_patches(64, 64, &[64], 32).unwrap(), vec![Rect::new(0, 0, 64, 64)]);
        // 100 wide, 40 step: offsets 0, 40 and the end-aligned 50
        let r = dense_patches(100, 50, &[50], 40).unwrap();
        assert_eq!(r.iter().map(|r| r.x0).collect::<Vec<_>>(), vec![0, 40, 50]);
    }

    #[test]
    fn seven_scale_grid_on_typical_photos() {
        let scales: Vec<usize> = (2..=8).map(|s| 32 * s).collect();
        for (w, h) in [(500, 375), (375, 500), (500, 333)] {
            let n = dense_patches(w, h, &scales, 32).unwrap().len();
            assert!((300..=800).contains(&n), "{w}x{h}: {n}");
        }
        // A 512×512 input produces more than that.
        assert_eq!(dense_patches(512, 512, &scales, 32).unwrap().len(), 1036);
    }

    #[test]
    fn dense_patches_skip_oversized_scales() {
        let r = dense_patches(40, 40, &[32, 64], 8).unwrap();
        assert!(r.iter().all(|r| r.w == 32));
        let r = dense_patches(40, 30, &[64], 8).unwrap();
        assert_eq!(r, vec![Rect::new(5, 0, 30, 30)]);
    }

    #[test]
    fn dense_patches_errors() {
        assert!(dense_patches(10, 10, &[], 4).is_err());
        assert!(dense_patches(10, 10, &[4], 0).is_err());
        assert!(matches!(dense_patches(0, 10, &[4], 1), Err(Error::NoPatches)));
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project_rect(Rect::new(0, 0, 32, 32), 8, 100, 100), Rect::new(0, 0, 4, 4));
        assert_eq!(project_rect(Rect::new(3, 3, 10, 10), 8, 100, 100), Rect::new(0, 0, 2, 2));
        assert_eq!(project_rect(Rect::new(17, 9, 2, 3), 8, 100, 100), Rect::new(2, 1, 1, 1));
        // clamped at the map border
        assert_eq!(project_rect(Rect::new(60, 0, 8, 8), 8, 8, 8), Rect::new(7, 0, 1, 1));
    }

    #[test]
    fn spp_quadrant_maxima() {
        let fm = Tensor::from_vec(&[1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let (out, cache) = spp_forward(&fm, Rect::new(0, 0, 4, 4), (2, 2)).unwrap();
        assert_eq!(out.data(), &[5.0, 7.0, 13.0, 15.0]);
        assert_eq!(cache.argmax(), &[5, 7, 13, 15]);
    }

    #[test]
    fn spp_single_cell_rect_replicates() {
        let fm = Tensor::from_vec(&[2, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        let (out, _) = spp_forward(&fm, Rect::new(1, 2, 1, 1), (3, 2)).unwrap();
        assert_eq!(out.data(), &[7.0; 6].iter().chain(&[16.0; 6]).copied().collect::<Vec<_>>()[..]);
    }

    #[test]
    fn spp_ties_pick_lowest_index() {
        let fm = Tensor::<f64>::filled(&[1, 3, 3], 2.0);
        let (_, cache) = spp_forward(&fm, Rect::new(1, 1, 2, 2), (1, 1)).unwrap();
        assert_eq!(cache.argmax(), &[4]);
    }

    #[test]
    fn spp_errors() {
        let fm = Tensor::<f64>::zeros(&[1, 3, 3]);
        assert!(spp_forward(&fm, Rect::new(0, 0, 0, 1), (1, 1)).is_err());
        assert!(spp_forward(&fm, Rect::new(2, 2, 2, 2), (1, 1)).is_err());
        assert!(spp_forward(&fm, Rect::new(0, 0, 1, 1), (0, 1)).is_err());
    }

    #[test]
    fn spp_backward_routes_to_global_max() {
        let fm = Tensor::from_vec(&[1, 2, 3], vec![1.0, 9.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (_, cache) = spp_forward(&fm, Rect::new(0, 0, 3, 2), (1, 1)).unwrap();
        let g = spp_backward(&cache, &Tensor::filled(&[1, 1, 1], 2.5), &[1, 2, 3]).unwrap();
        assert_eq!(g.data(), &[0.0, 2.5, 0.0, 0.0, 0.0, 0.0]);
        let z = spp_backward(&cache, &Tensor::<f64>::zeros(&[1, 1, 1]), &[1, 2, 3]).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(spp_backward(&cache, &Tensor::<f64>::zeros(&[1, 2, 1]), &[1, 2, 3]).is_err());
    }
}

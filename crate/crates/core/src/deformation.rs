//! Spatially varying depth-scale field: a bilinear spline over a regular grid
//! of positive scale handles, plus the coarse-to-fine grid schedule.
//!
//! Handles sit on cell corners spanning the full raster: handle `(c, r)` is at
//! raster position `(c (W-1)/(cols-1), r (H-1)/(rows-1))`. An axis with a
//! single handle is constant along that axis, so a 1x1 grid is one scalar.

use crate::error::{Error, Result};
use crate::geometry::{DepthMap, PixelCoord};

/// Default long-side handle counts of the coarse-to-fine schedule.
pub const DEFAULT_LONG_SIDES: [usize; 5] = [1, 3, 5, 9, 17];

/// The (at most four) handles influencing a pixel and their bilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Basis {
    idx: [usize; 4],
    weight: [f64; 4],
    len: usize,
}

impl Basis {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(move |k| (self.idx[k], self.weight[k]))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Per-frame grid of positive scale handles evaluated bilinearly.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationGrid {
    pub cols: usize,
    pub rows: usize,
    pub width: usize,
    pub height: usize,
    /// Row-major handle values.
    pub handles: Vec<f64>,
}

fn axis_coord(v: f64, extent: usize, count: usize) -> (usize, f64) {
    if count == 1 || extent <= 1 {
        return (0, 0.0);
    }
    let g = v.clamp(0.0, (extent - 1) as f64) * (count - 1) as f64 / (extent - 1) as f64;
    let i0 = (g.floor() as usize).min(count - 2);
    (i0, g - i0 as f64)
}

impl DeformationGrid {
    pub fn new(cols: usize, rows: usize, width: usize, height: usize, handles: Vec<f64>) -> Result<Self> {
        if cols == 0 || rows == 0 {
            return Err(Error::InvalidArgument(format!(
                "grid must have at least one handle, got {cols}x{rows}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("grid spans an empty image".into()));
        }
        if handles.len() != cols * rows {
            return Err(Error::InvalidArgument(format!(
                "grid {cols}x{rows} needs {} handles, got {}",
                cols * rows,
                handles.len()
            )));
        }
        if let Some(v) = handles.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!("handle values must be positive, got {v}")));
        }
        Ok(Self {
            cols,
            rows,
            width,
            height,
            handles,
        })
    }

    pub fn constant(cols: usize, rows: usize, width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(cols, rows, width, height, vec![value; cols * rows])
    }

    pub fn len(&self) -> usize {
        self.handles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.handles.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.cols, self.rows)
    }

    /// Raster position of handle `(col, row)`.
    pub fn handle_position(&self, col: usize, row: usize) -> PixelCoord {
        let pos = |i: usize, count: usize, extent: usize| {
            if count == 1 {
                (extent as f64 - 1.0) * 0.5
            } else {
                i as f64 * (extent as f64 - 1.0) / (count - 1) as f64
            }
        };
        PixelCoord::new(pos(col, self.cols, self.width), pos(row, self.rows, self.height))
    }

    /// Bilinear coefficients `b_k(p)`; locations outside the image are clamped
    /// to the border cell.
    pub fn basis(&self, p: PixelCoord) -> Basis {
        let (c0, fx) = axis_coord(p.x, self.width, self.cols);
        let (r0, fy) = axis_coord(p.y, self.height, self.rows);
        let mut b = Basis {
            idx: [0; 4],
            weight: [0.0; 4],
            len: 0,
        };
        let xs: &[(usize, f64)] = if self.cols == 1 {
            &[(0, 1.0)]
        } else {
            &[(c0, 1.0 - fx), (c0 + 1, fx)]
        };
        let ys: &[(usize, f64)] = if self.rows == 1 {
            &[(0, 1.0)]
        } else {
            &[(r0, 1.0 - fy), (r0 + 1, fy)]
        };
        for &(r, wy) in ys {
            for &(c, wx) in xs {
                b.idx[b.len] = r * self.cols + c;
                b.weight[b.len] = wx * wy;
                b.len += 1;
            }
        }
        b
    }

    /// `phi(p) = sum_k b_k(p) s^k`.
    pub fn eval(&self, p: PixelCoord) -> f64 {
        self.basis(p).iter().map(|(k, w)| w * self.handles[k]).sum()
    }

    /// Refines to a finer resolution by evaluating the current field at the
    /// new handle positions. The field is reproduced exactly when every old
    /// handle line is also a new handle line (e.g. 9 -> 17 handles).
    pub fn subdivide(&self, cols: usize, rows: usize) -> Result<Self> {
        if cols < self.cols || rows < self.rows || cols == 0 || rows == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot subdivide a {}x{} grid into {}x{}",
                self.cols, self.rows, cols, rows
            )));
        }
        let mut out = Self {
            cols,
            rows,
            width: self.width,
            height: self.height,
            handles: vec![0.0; cols * rows],
        };
        for r in 0..rows {
            for c in 0..cols {
                let pos = out.handle_position(c, r);
                out.handles[r * cols + c] = self.eval(pos);
            }
        }
        Ok(out)
    }

    /// Horizontally and vertically adjacent handle pairs, each listed once.
    pub fn neighbor_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                let k = r * self.cols + c;
                if c + 1 < self.cols {
                    pairs.push((k, k + 1));
                }
                if r + 1 < self.rows {
                    pairs.push((k, k + self.cols));
                }
            }
        }
        pairs
    }

    /// Index of the handle closest to the image center.
    pub fn center_handle(&self) -> usize {
        (self.rows / 2) * self.cols + self.cols / 2
    }

    pub fn min_handle(&self) -> f64 {
        self.handles.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_handle(&self) -> f64 {
        self.handles.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Ordered grid resolutions from coarse to fine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSchedule {
    pub levels: Vec<(usize, usize)>,
}

impl GridSchedule {
    /// Schedule with the default long-side counts `1, 3, 5, 9, 17`.
    pub fn for_image(width: usize, height: usize) -> Self {
        Self::with_long_sides(width, height, &DEFAULT_LONG_SIDES)
    }

    /// Schedule with explicit long-side handle counts. The short side follows
    /// the aspect ratio, `round(1 + (n-1) short/long)`, and is at least 2 once
    /// the long side has more than one handle.
    pub fn with_long_sides(width: usize, height: usize, long_sides: &[usize]) -> Self {
        let long = width.max(height).max(1) as f64;
        let short = width.min(height).max(1) as f64;
        let levels = long_sides
            .iter()
            .map(|&n| {
                let n = n.max(1);
                let s = if n == 1 {
                    1
                } else {
                    ((1.0 + (n - 1) as f64 * short / long).round() as usize).max(2)
                };
                if width >= height {
                    (n, s)
                } else {
                    (s, n)
                }
            })
            .collect();
        Self { levels }
    }

    pub fn finest(&self) -> (usize, usize) {
        *self.levels.last().unwrap_or(&(1, 1))
    }
}

/// `grid_schedule(width, height)` with the default schedule.
pub fn grid_schedule(width: usize, height: usize) -> GridSchedule {
    GridSchedule::for_image(width, height)
}

/// Materializes `phi(p) d(p)`.
pub fn apply_deformation(depth: &DepthMap, grid: &DeformationGrid) -> Result<DepthMap> {
    if depth.width != grid.width || depth.height != grid.height {
        return Err(Error::DimensionMismatch {
            expected: (grid.width, grid.height),
            got: (depth.width, depth.height),
        });
    }
    let w = depth.width;
    let values = depth
        .values
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let p = PixelCoord::new((i % w) as f64, (i / w) as f64);
            grid.eval(p) * d
        })
        .collect();
    DepthMap::new(depth.width, depth.height, depth.frame, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_grid(cols: usize, rows: usize, w: usize, h: usize, seed: u64) -> DeformationGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let handles = (0..cols * rows).map(|_| rng.gen_range(0.2..3.0)).collect();
        DeformationGrid::new(cols, rows, w, h, handles).unwrap()
    }

    /// Independent evaluation: explicit tent-function sum over every handle.
    fn tent_eval(g: &DeformationGrid, p: PixelCoord) -> f64 {
        let tent = |v: f64, i: usize, count: usize, extent: usize| {
            if count == 1 {
                return 1.0;
            }
            let spacing = (extent - 1) as f64 / (count - 1) as f64;
            let v = v.clamp(0.0, (extent - 1) as f64);
            (1.0 - ((v - i as f64 * spacing) / spacing).abs()).max(0.0)
        };
        let mut sum = 0.0;
        for r in 0..g.rows {
            for c in 0..g.cols {
                sum += tent(p.x, c, g.cols, g.width) * tent(p.y, r, g.rows, g.height) * g.handles[r * g.cols + c];
            }
        }
        sum
    }

    #[test]
    fn eval_examples() {
        let g = DeformationGrid::constant(5, 3, 40, 20, 1.0).unwrap();
        assert!((g.eval(PixelCoord::new(13.7, 4.2)) - 1.0).abs() < 1e-15);

        let g = random_grid(5, 3, 41, 21, 3);
        let pos = g.handle_position(2, 1);
        assert!((g.eval(pos) - g.handles[7]).abs() < 1e-15);

        let g = DeformationGrid::new(2, 1, 11, 5, vec![1.0, 3.0]).unwrap();
        assert!((g.eval(PixelCoord::new(5.0, 2.0)) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn eval_matches_tent_oracle() {
        let g = random_grid(6, 4, 37, 23, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let p = PixelCoord::new(rng.gen_range(-0.5..36.5), rng.gen_range(-0.5..22.5));
            assert!((g.eval(p) - tent_eval(&g, p)).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_is_clamped() {
        let g = DeformationGrid::new(2, 1, 11, 5, vec![1.0, 3.0]).unwrap();
        assert_eq!(g.eval(PixelCoord::new(-10.0, 2.0)), 1.0);
        assert_eq!(g.eval(PixelCoord::new(50.0, 2.0)), 3.0);
    }

    #[test]
    fn subdivide_constant_and_ramp() {
        let g = DeformationGrid::constant(1, 1, 64, 36, 2.0).unwrap();
        let f = g.subdivide(3, 2).unwrap();
        assert!(f.handles.iter().all(|&v| v == 2.0));

        // Bilinear ramp a + bx + cy + dxy stored exactly on a 3x2 grid.
        let (w, h) = (64usize, 36usize);
        let ramp = |p: PixelCoord| 1.0 + 0.02 * p.x + 0.03 * p.y + 0.0005 * p.x * p.y;
        let mut coarse = DeformationGrid::constant(3, 2, w, h, 1.0).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                coarse.handles[r * 3 + c] = ramp(coarse.handle_position(c, r));
            }
        }
        let fine = coarse.subdivide(7, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let p = PixelCoord::new(rng.gen_range(0.0..63.0), rng.gen_range(0.0..35.0));
            assert!((fine.eval(p) - ramp(p)).abs() < 1e-12);
        }
    }

    #[test]
    fn subdivide_nested_is_exact_over_raster() {
        // Long side 9 -> 17 and short side 5 -> 9 are nested refinements.
        let (w, h) = (97usize, 49usize);
        let coarse = random_grid(9, 5, w, h, 42);
        let fine = coarse.subdivide(17, 9).unwrap();
        let mut max_err: f64 = 0.0;
        for y in 0..h {
            for x in 0..w {
                let p = PixelCoord::new(x as f64, y as f64);
                max_err = max_err.max((fine.eval(p) - coarse.eval(p)).abs());
            }
        }
        assert!(max_err < 1e-12, "{max_err}");
    }

    #[test]
    fn subdivide_rejects_coarser() {
        let g = DeformationGrid::constant(5, 3, 64, 36, 1.0).unwrap();
        assert!(g.subdivide(3, 3).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(grid_schedule(1920, 1080).finest(), (17, 10));
        assert_eq!(grid_schedule(512, 512).finest(), (17, 17));
        assert_eq!(grid_schedule(640, 1).finest(), (17, 2));
        let s = grid_schedule(1920, 1080);
        assert_eq!(s.levels.len(), 5);
        assert_eq!(s.levels[0], (1, 1));
        assert_eq!(s.levels[4], (17, 10));
        // Portrait frames put the long count on the rows.
        assert_eq!(grid_schedule(1080, 1920).finest(), (10, 17));
    }

    #[test]
    fn apply_deformation_examples() {
        let d = DepthMap::new(3, 2, 0, vec![1.0, 2.5, 3.25, 0.75, 9.0, 0.125]).unwrap();
        let unit = DeformationGrid::constant(3, 2, 3, 2, 1.0).unwrap();
        assert_eq!(apply_deformation(&d, &unit).unwrap().values, d.values);

        let d = DepthMap::constant(5, 4, 0, 3.0).unwrap();
        let g = DeformationGrid::constant(1, 1, 5, 4, 2.0).unwrap();
        assert!(apply_deformation(&d, &g).unwrap().values.iter().all(|&v| (v - 6.0).abs() < 1e-15));

        let bad = DeformationGrid::constant(1, 1, 6, 4, 2.0).unwrap();
        assert!(apply_deformation(&d, &bad).is_err());
    }

    #[test]
    fn apply_deformation_matches_per_pixel_oracle() {
        let (w, h) = (29usize, 17usize);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = DepthMap::new(w, h, 0, (0..w * h).map(|_| rng.gen_range(0.5..20.0)).collect()).unwrap();
        let g = random_grid(4, 3, w, h, 10);
        let out = apply_deformation(&d, &g).unwrap();
        for y in 0..h {
            for x in 0..w {
                let p = PixelCoord::new(x as f64, y as f64);
                let expected = tent_eval(&g, p) * d.get(x, y);
                assert!((out.get(x, y) - expected).abs() < 1e-12 * expected);
            }
        }
    }

    #[test]
    fn one_by_one_grid_is_a_scalar() {
        let g = DeformationGrid::constant(1, 1, 40, 30, 0.37).unwrap();
        for (x, y) in [(0.0, 0.0), (39.0, 29.0), (12.3, 7.7)] {
            assert_eq!(g.eval(PixelCoord::new(x, y)), 0.37);
        }
    }

    proptest! {
        #[test]
        fn partition_of_unity_and_bounds(seed in 0u64..1000, cols in 1usize..8, rows in 1usize..6,
                                         x in -0.5f64..63.5, y in -0.5f64..40.5) {
            let g = random_grid(cols, rows, 64, 41, seed);
            let p = PixelCoord::new(x, y);
            let b = g.basis(p);
            let sum: f64 = b.iter().map(|(_, w)| w).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(b.iter().all(|(_, w)| w >= 0.0));
            let v = g.eval(p);
            prop_assert!(v >= g.min_handle() - 1e-12 && v <= g.max_handle() + 1e-12);
        }
    }
}

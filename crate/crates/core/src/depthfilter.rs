//! Spatio-temporal depth filter that blends reprojected depths from nearby
//! frames along chained flow trajectories, with edge-preserving weights.

use crate::correspondence::{chain_flow, FlowBank};
use crate::error::{Error, Result};
use crate::geometry::{reproject, CameraPoint, DepthMap, ImagePlane, Intrinsics, PixelCoord};
use crate::losses::{camera_point, loss_ratio};
use crate::par::{fill_rows, Exec};
use crate::solver::CameraParamBlock;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    /// Temporal radius in frames.
    pub tau: usize,
    /// Spatial window half-size; 1 gives a 3x3 window.
    pub half_size: usize,
    pub lambda_f: f64,
    /// Divide by the sum of valid weights. Turning this off evaluates the
    /// raw weighted sum, which does not preserve constant inputs.
    pub normalize: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            tau: 4,
            half_size: 1,
            lambda_f: 3.0,
            normalize: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_f >= 0.0 && self.lambda_f.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda_f must be non-negative, got {}",
                self.lambda_f
            )));
        }
        Ok(())
    }
}

/// `exp(-lambda_f * loss_ratio(c_p, c_q))`, or 0 when either point is behind
/// the camera.
pub fn filter_weight(c_p: &CameraPoint, c_q: &CameraPoint, lambda_f: f64) -> f64 {
    match loss_ratio(c_p, c_q) {
        Ok(l) => (-lambda_f * l).exp(),
        Err(_) => 0.0,
    }
}

/// Read-only inputs of the filter.
#[derive(Debug, Clone, Copy)]
pub struct FilterInputs<'a> {
    /// Deformation-applied depths, one per frame.
    pub depths: &'a [DepthMap],
    pub params: &'a CameraParamBlock,
    /// Consecutive flows in both directions, with optional consistency masks.
    pub flows: &'a FlowBank,
}

impl FilterInputs<'_> {
    fn check(&self) -> Result<()> {
        let n = self.depths.len();
        if n == 0 {
            return Err(Error::InvalidInput("no depth maps to filter".into()));
        }
        if self.params.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} depth maps but {} parameter frames",
                n,
                self.params.len()
            )));
        }
        let (w, h) = (self.depths[0].width, self.depths[0].height);
        for d in self.depths {
            if (d.width, d.height) != (w, h) {
                return Err(Error::DimensionMismatch {
                    expected: (w, h),
                    got: (d.width, d.height),
                });
            }
        }
        Ok(())
    }
}

/// Depths of frames `j` reprojected into frame `i`, indexed by the pixel `q`
/// of frame `i` they were reached from.
#[derive(Debug, Clone)]
pub struct FrameSamples {
    pub frame: usize,
    pub width: usize,
    pub height: usize,
    /// One raster per contributing frame; `None` marks an excluded sample.
    pub layers: Vec<(usize, Vec<Option<f64>>)>,
}

impl FrameSamples {
    pub fn new(inputs: &FilterInputs, i: usize, tau: usize, exec: Exec) -> Result<Self> {
        inputs.check()?;
        let n = inputs.depths.len();
        if i >= n {
            return Err(Error::InvalidArgument(format!("frame {i} out of range for {n} frames")));
        }
        let own = &inputs.depths[i];
        let (w, h) = (own.width, own.height);
        let plane = own.plane();
        let lo = i.saturating_sub(tau);
        let hi = (i + tau).min(n - 1);
        let mut layers = Vec::with_capacity(hi - lo + 1);
        for j in lo..=hi {
            if j == i {
                layers.push((j, own.values.iter().map(|&d| Some(d)).collect()));
                continue;
            }
            let (flow, valid) = chain_flow(inputs.flows, i, j, w, h)?;
            let pose_i = &inputs.params.frames[i].pose;
            let pose_j = &inputs.params.frames[j].pose;
            let k_i = Intrinsics::new(inputs.params.frames[i].focal)?;
            let k_j = Intrinsics::new(inputs.params.frames[j].focal)?;
            let depth_j = &inputs.depths[j];
            let mut layer = vec![None; w * h];
            fill_rows(exec, &mut layer, w, |y, row| {
                for (x, out) in row.iter_mut().enumerate() {
                    let k = y * w + x;
                    if !valid.values[k] {
                        continue;
                    }
                    let f = flow.values[k];
                    let r = PixelCoord::new(x as f64 + f.x, y as f64 + f.y);
                    let Some(z) = depth_j.sample(r) else { continue };
                    let c_j = camera_point(&plane, r, z);
                    if let Ok(c) = reproject(&c_j, pose_j, pose_i, &k_j, &k_i) {
                        *out = Some(c.z);
                    }
                }
            });
            layers.push((j, layer));
        }
        Ok(Self {
            frame: i,
            width: w,
            height: h,
            layers,
        })
    }

    /// Valid `(depth, raw weight)` samples for pixel `(x, y)` whose own
    /// depth is `d_p`.
    pub fn samples(&self, x: usize, y: usize, d_p: f64, cfg: &FilterConfig) -> Vec<(f64, f64)> {
        let plane = ImagePlane::new(self.width, self.height);
        let p = PixelCoord::new(x as f64, y as f64);
        let c_p = camera_point(&plane, p, d_p);
        let r = cfg.half_size;
        let (x0, x1) = (x.saturating_sub(r), (x + r).min(self.width - 1));
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(self.height - 1));
        let mut out = Vec::with_capacity((x1 - x0 + 1) * (y1 - y0 + 1) * self.layers.len());
        for qy in y0..=y1 {
            for qx in x0..=x1 {
                for (_, layer) in &self.layers {
                    let Some(z) = layer[qy * self.width + qx] else { continue };
                    let c_q = camera_point(&plane, PixelCoord::new(qx as f64, qy as f64), z);
                    let wgt = filter_weight(&c_p, &c_q, cfg.lambda_f);
                    if wgt > 0.0 {
                        out.push((z, wgt));
                    }
                }
            }
        }
        out
    }
}

/// Filtered depth of one frame and the number of pixels that had no valid
/// sample and kept their input depth.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredFrame {
    pub depth: DepthMap,
    pub fallback_pixels: usize,
}

fn combine(samples: &[(f64, f64)], normalize: bool) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let num: f64 = samples.iter().map(|(z, w)| z * w).sum();
    if !normalize {
        return Some(num);
    }
    let den: f64 = samples.iter().map(|(_, w)| w).sum();
    Some(num / den)
}

pub fn filter_depth(i: usize, inputs: &FilterInputs, cfg: &FilterConfig, exec: Exec) -> Result<FilteredFrame> {
    cfg.validate()?;
    let samples = FrameSamples::new(inputs, i, cfg.tau, exec)?;
    let own = &inputs.depths[i];
    let w = own.width;
    let mut out = vec![(0.0, false); own.values.len()];
    fill_rows(exec, &mut out, w, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            let d_p = own.values[y * w + x];
            *o = match combine(&samples.samples(x, y, d_p, cfg), cfg.normalize) {
                Some(v) if v > 0.0 && v.is_finite() => (v, false),
                _ => (d_p, true),
            };
        }
    });
    let fallback_pixels = out.iter().filter(|o| o.1).count();
    let depth = DepthMap::new(w, own.height, own.frame, out.into_iter().map(|o| o.0).collect())?;
    Ok(FilteredFrame { depth, fallback_pixels })
}

/// Filters every frame in order.
pub fn filter_video(inputs: &FilterInputs, cfg: &FilterConfig, exec: Exec) -> Result<Vec<FilteredFrame>> {
    (0..inputs.depths.len()).map(|i| filter_depth(i, inputs, cfg, exec)).collect()
}

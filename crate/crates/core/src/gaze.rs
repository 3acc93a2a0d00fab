//! Gaze traces to "gaze only" boxes: rasterize fixations into a heatmap,
//! threshold relative to its peak, drop small regions, box each remaining
//! region and discard boxes that overlap an annotated candida.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BoundingBox};
use crate::labels::LabeledBox;

pub const CSV_HEADER: [&str; 4] = ["t_ms", "x_px", "y_px", "dur_ms"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GazePoint {
    pub t_ms: f64,
    pub x_px: f64,
    pub y_px: f64,
    pub dur_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazeParams {
    pub sigma_px: f64,
    pub tau_rel: f64,
    pub min_area_px: usize,
    pub overlap_tau: f64,
}

impl Default for GazeParams {
    fn default() -> Self {
        Self {
            sigma_px: 12.0,
            tau_rel: 0.3,
            min_area_px: 64,
            overlap_tau: 0.2,
        }
    }
}

impl GazeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_px > 0.0 && self.sigma_px.is_finite()) {
            return Err(Error::config("sigma_px must be positive"));
        }
        if !(self.tau_rel > 0.0 && self.tau_rel < 1.0) {
            return Err(Error::config("tau_rel must lie in (0, 1)"));
        }
        if self.min_area_px == 0 {
            return Err(Error::config("min_area_px must be positive"));
        }
        if !(self.overlap_tau > 0.0 && self.overlap_tau < 1.0) {
            return Err(Error::config("overlap_tau must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GazeHeatmap {
    width: usize,
    height: usize,
    sigma_px: f64,
    values: Vec<f64>,
}

impl GazeHeatmap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn sigma_px(&self) -> f64 {
        self.sigma_px
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..width * height).map(|i| f(i % width, i / width)).collect();
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn component_count(&self) -> usize {
        components(self).len()
    }
}

/// Pixel lists of the 4-connected components, ordered by first pixel in
/// row-major order.
fn components(mask: &Mask) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(i) = queue.pop_front() {
            pixels.push(i);
            let (x, y) = (i % w, i / w);
            let mut visit = |j: usize| {
                if mask.bits[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        out.push(pixels);
    }
    out
}

/// Sum of duration-weighted isotropic Gaussians, one per fixation, evaluated
/// at integer pixel coordinates.
pub fn rasterize_gaze(trace: &[GazePoint], height: usize, width: usize, sigma_px: f64) -> Result<GazeHeatmap> {
    if !(sigma_px > 0.0 && sigma_px.is_finite()) {
        return Err(Error::input("sigma_px must be positive"));
    }
    for (i, p) in trace.iter().enumerate() {
        check_point(p, i, width, height)?;
    }
    let mut values = vec![0.0; width * height];
    let inv = 1.0 / (2.0 * sigma_px * sigma_px);
    let mut gx = vec![0.0; width];
    let mut gy = vec![0.0; height];
    for p in trace {
        for (x, g) in gx.iter_mut().enumerate() {
            *g = (-(x as f64 - p.x_px).powi(2) * inv).exp();
        }
        for (y, g) in gy.iter_mut().enumerate() {
            *g = p.dur_ms * (-(y as f64 - p.y_px).powi(2) * inv).exp();
        }
        for (y, &wy) in gy.iter().enumerate() {
            if wy == 0.0 {
                continue;
            }
            for (v, &wx) in values[y * width..(y + 1) * width].iter_mut().zip(&gx) {
                *v += wy * wx;
            }
        }
    }
    Ok(GazeHeatmap {
        width,
        height,
        sigma_px,
        values,
    })
}

fn check_point(p: &GazePoint, i: usize, width: usize, height: usize) -> Result<()> {
    let ok = p.x_px >= 0.0
        && p.x_px < width as f64
        && p.y_px >= 0.0
        && p.y_px < height as f64
        && p.dur_ms >= 0.0
        && p.dur_ms.is_finite()
        && p.t_ms.is_finite();
    if ok {
        Ok(())
    } else {
        Err(Error::input(format!(
            "gaze point {i} at ({}, {}) with duration {} is outside the {width}x{height} image or malformed",
            p.x_px, p.y_px, p.dur_ms
        )))
    }
}

/// Pixels at or above `tau_rel` times the peak, minus 4-connected components
/// smaller than `min_area_px`.
pub fn threshold_and_clean(h: &GazeHeatmap, tau_rel: f64, min_area_px: usize) -> Mask {
    let max = h.max();
    if max <= 0.0 {
        return Mask::from_fn(h.width, h.height, |_, _| false);
    }
    let cut = tau_rel * max;
    let mut mask = Mask {
        width: h.width,
        height: h.height,
        bits: h.values.iter().map(|&v| v >= cut).collect(),
    };
    for comp in components(&mask) {
        if comp.len() < min_area_px {
            for i in comp {
                mask.bits[i] = false;
            }
        }
    }
    mask
}

/// Tight box around each 4-connected component, half-open pixel convention.
pub fn extract_boxes(mask: &Mask) -> Vec<BoundingBox> {
    components(mask)
        .into_iter()
        .map(|pixels| {
            let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
            for i in pixels {
                let (x, y) = (i % mask.width, i / mask.width);
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
            BoundingBox::from_pixel_corners(
                x0 as f64,
                y0 as f64,
                (x1 + 1) as f64,
                (y1 + 1) as f64,
                mask.width,
                mask.height,
            )
            .expect("a nonempty component spans at least one pixel")
        })
        .collect()
}

/// Keeps the boxes whose IoU with every candida box is below `overlap_tau`.
pub fn filter_gaze_only(gaze_boxes: &[BoundingBox], candida: &[BoundingBox], overlap_tau: f64) -> Vec<LabeledBox> {
    gaze_boxes
        .iter()
        .filter(|g| candida.iter().all(|c| iou(g, c) < overlap_tau))
        .map(|&g| LabeledBox::gaze_only(g))
        .collect()
}

pub fn process_gaze(
    trace: &[GazePoint],
    candida: &[BoundingBox],
    params: &GazeParams,
    height: usize,
    width: usize,
) -> Result<Vec<LabeledBox>> {
    params.validate()?;
    let heat = rasterize_gaze(trace, height, width, params.sigma_px)?;
    let mask = threshold_and_clean(&heat, params.tau_rel, params.min_area_px);
    let out = filter_gaze_only(&extract_boxes(&mask), candida, params.overlap_tau);
    assert!(
        out.iter().all(|g| candida.iter().all(|c| iou(&g.bbox, c) < params.overlap_tau)),
        "gaze-only box overlaps a candida annotation"
    );
    Ok(out)
}

/// Checks bounds and timestamp order of a whole trace.
pub fn validate_trace(trace: &[GazePoint], width: usize, height: usize) -> Result<()> {
    for (i, p) in trace.iter().enumerate() {
        check_point(p, i, width, height)?;
    }
    if let Some(i) = trace.windows(2).position(|w| w[1].t_ms < w[0].t_ms) {
        return Err(Error::input(format!("gaze timestamps decrease at point {}", i + 1)));
    }
    Ok(())
}

pub fn write_trace_csv(path: &Path, trace: &[GazePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    w.write_record(CSV_HEADER).map_err(|e| Error::file(path, e))?;
    for p in trace {
        w.write_record([p.t_ms, p.x_px, p.y_px, p.dur_ms].map(|v| v.to_string()))
            .map_err(|e| Error::file(path, e))?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<GazePoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::file(path, e))?;
    let header = r.headers().map_err(|e| Error::file(path, e))?;
    if header.iter().ne(CSV_HEADER) {
        return Err(Error::file(
            path,
            format!("expected header {}, found {}", CSV_HEADER.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    r.deserialize()
        .map(|rec| rec.map_err(|e| Error::file(path, e)))
        .collect()
}

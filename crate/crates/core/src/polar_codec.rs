//! Conversions between binary masks, polar shapes, polygons and rasterized masks.
//!
//! Geometry convention: pixel `(row i, col j)` has its center at
//! `(j + 0.5, i + 0.5)` with x to the right and y down, and covers the unit
//! square `[j, j+1) x [i, i+1)`. Ray `k` (1-based) of an `n`-ray shape has
//! angle `k * 2pi / n` and displaces x by `r sin(theta)` and y by `r cos(theta)`.

use std::f64::consts::TAU;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, GrayImage};

pub const DEFAULT_RAYS: usize = 36;

/// Radius assigned to rays that never touch the mask.
pub const DEGENERATE_RADIUS: f64 = 0.01;

/// Pixel-corner clips shorter than the step can be skipped, so the step is
/// kept at 0.1 px.
const MARCH_STEP: f64 = 0.1;
const BISECTION_ITERS: usize = 24;

/// Binary `height x width` grid with a cached foreground count.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    count: usize,
}

impl BitMask {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::DimensionMismatch(format!("mask must be at least 1x1, got {height}x{width}")));
        }
        Ok(Self {
            height,
            width,
            bits: vec![false; height * width],
            count: 0,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Result<Self> {
        let mut m = Self::new(height, width)?;
        for i in 0..height {
            for j in 0..width {
                if f(i, j) {
                    m.bits[i * width + j] = true;
                    m.count += 1;
                }
            }
        }
        Ok(m)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    /// Out-of-range coordinates read as background.
    pub fn get_signed(&self, row: isize, col: isize) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.height && (col as usize) < self.width && self.get(row as usize, col as usize)
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        let b = &mut self.bits[row * self.width + col];
        if *b != value {
            if value {
                self.count += 1;
            } else {
                self.count -= 1;
            }
            *b = value;
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Foreground pixel coordinates as `(row, col)` in raster order.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            pixels: self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        }
    }

    /// Nonzero pixels are foreground.
    pub fn from_image(img: &GrayImage) -> Result<Self> {
        Self::from_fn(img.height, img.width, |i, j| img.pixels[i * img.width + j] != 0)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        io::write_pgm(path, &self.to_image())
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        Self::from_image(&io::read_pgm(path)?)
    }

    /// Same mask moved by whole pixels; pixels pushed off the grid are dropped.
    pub fn translated(&self, d_row: isize, d_col: isize) -> Self {
        let mut out = Self::new(self.height, self.width).expect("non-empty dims");
        for (i, j) in self.foreground() {
            let (r, c) = (i as isize + d_row, j as isize + d_col);
            if r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width {
                out.set(r as usize, c as usize, true);
            }
        }
        out
    }
}

/// Instance as a pole plus `n` positive radii on the fixed angular grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolarShapeRecord", into = "PolarShapeRecord")]
pub struct PolarShape {
    center: (f64, f64),
    radii: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolarShapeRecord {
    cx: f64,
    cy: f64,
    radii: Vec<f64>,
}

impl TryFrom<PolarShapeRecord> for PolarShape {
    type Error = Error;
    fn try_from(r: PolarShapeRecord) -> Result<Self> {
        PolarShape::new((r.cx, r.cy), r.radii)
    }
}

impl From<PolarShape> for PolarShapeRecord {
    fn from(s: PolarShape) -> Self {
        Self {
            cx: s.center.0,
            cy: s.center.1,
            radii: s.radii,
        }
    }
}

impl PolarShape {
    pub fn new(center: (f64, f64), radii: Vec<f64>) -> Result<Self> {
        if radii.len() < 3 {
            return Err(Error::InvalidShape(format!("need at least 3 rays, got {}", radii.len())));
        }
        if let Some(&r) = radii.iter().find(|r| !(**r > 0.0) || !r.is_finite()) {
            return Err(Error::NonPositiveRadius(r));
        }
        if !center.0.is_finite() || !center.1.is_finite() {
            return Err(Error::InvalidShape("center must be finite".into()));
        }
        Ok(Self { center, radii })
    }

    pub fn center(&self) -> (f64, f64) {
        self.center
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn num_rays(&self) -> usize {
        self.radii.len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("finite values serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::format("polar shape json", e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    vertices: Vec<(f64, f64)>,
}

impl Polygon {
    pub fn new(vertices: Vec<(f64, f64)>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidShape(format!("polygon needs 3 vertices, got {}", vertices.len())));
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }
}

/// Angles `theta_k = k * 2pi / n` for `k = 1..=n`.
pub fn ray_angles(n: usize) -> impl Iterator<Item = f64> + Clone {
    (1..=n).map(move |k| k as f64 * TAU / n as f64)
}

/// Mean of foreground pixel centers as `(x, y)`.
pub fn mass_center(mask: &BitMask) -> Result<(f64, f64)> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for (i, j) in mask.foreground() {
        sx += j as f64 + 0.5;
        sy += i as f64 + 0.5;
    }
    let n = mask.count() as f64;
    Ok((sx / n, sy / n))
}

pub fn encode(mask: &BitMask, n: usize) -> Result<PolarShape> {
    let center = mass_center(mask)?;
    PolarShape::new(center, encode_with_pole(mask, center, n)?)
}

/// Radii of `mask` seen from an arbitrary pole. Each ray keeps its farthest
/// inside-to-outside crossing; rays that never touch the mask get
/// [`DEGENERATE_RADIUS`].
pub fn encode_with_pole(mask: &BitMask, pole: (f64, f64), n: usize) -> Result<Vec<f64>> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if n < 3 {
        return Err(Error::InvalidShape(format!("need at least 3 rays, got {n}")));
    }
    let inside = |x: f64, y: f64| mask.get_signed(y.floor() as isize, x.floor() as isize);
    let (w, h) = (mask.width() as f64, mask.height() as f64);
    let reach = [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
        .iter()
        .map(|&(cx, cy)| (cx - pole.0).hypot(cy - pole.1))
        .fold(0.0, f64::max)
        + 1.0;
    let steps = (reach / MARCH_STEP).ceil() as usize;
    Ok(ray_angles(n)
        .map(|theta| {
            let (dx, dy) = (theta.sin(), theta.cos());
            let at = |t: f64| inside(pole.0 + t * dx, pole.1 + t * dy);
            let mut last_exit = None;
            let mut prev = at(0.0);
            for i in 1..=steps {
                let cur = at(i as f64 * MARCH_STEP);
                if prev && !cur {
                    last_exit = Some(i);
                }
                prev = cur;
            }
            let Some(i) = last_exit else {
                return DEGENERATE_RADIUS;
            };
            let (mut lo, mut hi) = ((i - 1) as f64 * MARCH_STEP, i as f64 * MARCH_STEP);
            for _ in 0..BISECTION_ITERS {
                let mid = 0.5 * (lo + hi);
                if at(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            (0.5 * (lo + hi)).max(DEGENERATE_RADIUS)
        })
        .collect())
}

pub fn decode(shape: &PolarShape) -> Polygon {
    let (xc, yc) = shape.center;
    let vertices = ray_angles(shape.num_rays())
        .zip(&shape.radii)
        .map(|(t, r)| (xc + r * t.sin(), yc + r * t.cos()))
        .collect();
    Polygon { vertices }
}

/// Even-odd scanline fill: a pixel is set iff its center is inside.
pub fn rasterize(polygon: &Polygon, height: usize, width: usize) -> Result<BitMask> {
    let mut mask = BitMask::new(height, width)?;
    let v = &polygon.vertices;
    let mut xs = Vec::new();
    for i in 0..height {
        let y = i as f64 + 0.5;
        xs.clear();
        for k in 0..v.len() {
            let (p, q) = (v[k], v[(k + 1) % v.len()]);
            if (p.1 > y) != (q.1 > y) {
                xs.push(p.0 + (y - p.1) * (q.0 - p.0) / (q.1 - p.1));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // centers j + 0.5 in [pair[0], pair[1])
            let start = (pair[0] - 0.5).ceil().max(0.0);
            let end = (pair[1] - 0.5).ceil().min(width as f64);
            let mut j = start;
            while j < end {
                mask.set(i, j as usize, true);
                j += 1.0;
            }
        }
    }
    Ok(mask)
}

/// Intersection over union; two empty masks count as full agreement.
pub fn mask_iou(a: &BitMask, b: &BitMask) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let inter = a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count();
    let union = a.count + b.count - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Rasterized polar shape.
pub fn shape_to_mask(shape: &PolarShape, height: usize, width: usize) -> Result<BitMask> {
    rasterize(&decode(shape), height, width)
}

//! Instance-agnostic boundary targets.
//!
//! Outer borders are traced with Suzuki–Abe border following (8-connectivity)
//! and drawn, after flooring by the level stride, onto a single mask. The
//! virtual frame around the image is background, so instances touching the
//! image edge get closed contours.

use crate::error::{Error, Result};
use crate::polar_codec::BitMask;

/// Pixel coordinate `(row, col)`.
pub type Pixel = (usize, usize);

/// One closed 8-connected traversal; consecutive points (and last/first) are 8-adjacent.
pub type Contour = Vec<Pixel>;

/// Traced outer borders, one entry per instance. An instance split into several
/// components contributes one contour per component.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BoundaryPointSet {
    pub instances: Vec<Vec<Contour>>,
}

impl BoundaryPointSet {
    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    /// All points of instance `i` in traversal order.
    pub fn instance_points(&self, i: usize) -> impl Iterator<Item = Pixel> + '_ {
        self.instances[i].iter().flatten().copied()
    }

    pub fn all_points(&self) -> impl Iterator<Item = Pixel> + '_ {
        self.instances.iter().flatten().flatten().copied()
    }
}

// Clockwise on screen (y down), starting east.
const DIRS: [(isize, isize); 8] = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];

fn dir_index(from: (isize, isize), to: (isize, isize)) -> usize {
    let d = (to.0 - from.0, to.1 - from.1);
    DIRS.iter().position(|&x| x == d).expect("neighbour pixel")
}

/// Outer borders of every 8-connected component of `mask`, holes ignored.
pub fn trace_outer_borders(mask: &BitMask) -> Vec<Contour> {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let pw = w + 2;
    let mut f = vec![0i32; ((h + 2) * pw) as usize];
    for (i, j) in mask.foreground() {
        f[(i as isize + 1) as usize * pw as usize + j + 1] = 1;
    }
    let at = |f: &[i32], p: (isize, isize)| f[(p.0 * pw + p.1) as usize];
    let mut contours = Vec::new();
    let mut nbd = 1;
    for i in 1..=h {
        for j in 1..=w {
            let cur = at(&f, (i, j));
            if cur == 0 {
                continue;
            }
            let (start_from, outer) = if cur == 1 && at(&f, (i, j - 1)) == 0 {
                ((i, j - 1), true)
            } else if cur >= 1 && at(&f, (i, j + 1)) == 0 {
                ((i, j + 1), false)
            } else {
                continue;
            };
            nbd += 1;
            let mut pts = Vec::new();
            let origin = (i, j);
            // 3.1: clockwise from the start neighbour for any nonzero pixel
            let d0 = dir_index(origin, start_from);
            let first = (0..8)
                .map(|k| DIRS[(d0 + k) % 8])
                .map(|d| (i + d.0, j + d.1))
                .find(|&p| at(&f, p) != 0);
            match first {
                None => {
                    f[(i * pw + j) as usize] = -nbd;
                    pts.push(origin);
                }
                Some(p1) => {
                    let mut p2 = p1;
                    let mut p3 = origin;
                    loop {
                        // 3.3: counterclockwise from the neighbour after p2
                        let d2 = dir_index(p3, p2);
                        let mut east_zero = false;
                        let mut p4 = p3;
                        for k in 1..=8 {
                            let d = DIRS[(d2 + 8 - k) % 8];
                            let q = (p3.0 + d.0, p3.1 + d.1);
                            if at(&f, q) != 0 {
                                p4 = q;
                                break;
                            }
                            if d == (0, 1) {
                                east_zero = true;
                            }
                        }
                        // 3.4
                        let idx = (p3.0 * pw + p3.1) as usize;
                        if east_zero {
                            f[idx] = -nbd;
                        } else if f[idx] == 1 {
                            f[idx] = nbd;
                        }
                        pts.push(p3);
                        // 3.5
                        if p4 == origin && p3 == p1 {
                            break;
                        }
                        p2 = p3;
                        p3 = p4;
                    }
                }
            }
            if outer {
                contours.push(pts.into_iter().map(|(r, c)| ((r - 1) as usize, (c - 1) as usize)).collect());
            }
        }
    }
    contours
}

pub fn extract_boundaries(masks: &[BitMask]) -> Result<BoundaryPointSet> {
    if let Some(first) = masks.first() {
        if masks.iter().any(|m| m.height() != first.height() || m.width() != first.width()) {
            return Err(Error::DimensionMismatch("instance masks differ in size".into()));
        }
    }
    let instances = masks
        .iter()
        .map(|m| {
            if m.is_empty() {
                Err(Error::EmptyMask)
            } else {
                Ok(trace_outer_borders(m))
            }
        })
        .collect::<Result<_>>()?;
    Ok(BoundaryPointSet { instances })
}

/// Size of a stride-`s` map over an `h x w` image.
pub fn downsampled_size(height: usize, width: usize, stride: usize) -> (usize, usize) {
    (height.div_ceil(stride), width.div_ceil(stride))
}

/// Draws every boundary point `v` at cell `floor(v / stride)` of a
/// `ceil(H/s) x ceil(W/s)` mask.
pub fn build_boundary_mask(points: &BoundaryPointSet, stride: usize, height: usize, width: usize) -> Result<BitMask> {
    if stride < 1 {
        return Err(Error::StrideInvalid(stride));
    }
    let (oh, ow) = downsampled_size(height, width, stride);
    let mut out = BitMask::new(oh, ow)?;
    for (r, c) in points.all_points() {
        if r >= height || c >= width {
            return Err(Error::DimensionMismatch(format!("boundary point ({r}, {c}) outside {height}x{width}")));
        }
        out.set(r / stride, c / stride, true);
    }
    Ok(out)
}

/// Boundary target for a whole scene; all-zero when there are no instances.
pub fn boundary_target(masks: &[BitMask], stride: usize, height: usize, width: usize) -> Result<BitMask> {
    build_boundary_mask(&extract_boundaries(masks)?, stride, height, width)
}

//! Diameter-stroke end-points: simulated from a ground-truth mask, or taken
//! from a user and validated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::PointPair;
use crate::volgrid::{BinaryMask, VolumeGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Simulated,
    User,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionSource {
    pub tag: SourceTag,
    pub pair: PointPair,
}

/// Foreground pixels of axial slice `z` with a 4-neighbour in the slice that
/// is background or off the grid, in `(y, x)` order.
pub fn slice_boundary(mask: &BinaryMask, z: usize) -> Vec<[usize; 2]> {
    let [_, ny, nx] = mask.dims();
    let fg = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < ny && (x as usize) < nx && mask.get(z, y as usize, x as usize) != 0
    };
    let mut out = Vec::new();
    for y in 0..ny as isize {
        for x in 0..nx as isize {
            if fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1)) {
                out.push([y as usize, x as usize]);
            }
        }
    }
    out
}

/// The two most distant boundary pixels of the axial slice through the
/// mask centroid. Ties keep the lexicographically first `(y, x)` pair.
pub fn simulate_endpoints(mask: &BinaryMask) -> Result<PointPair> {
    let centroid = mask.centroid().ok_or(Error::EmptyMask)?;
    let z = ((centroid[0] + 0.5).floor() as usize).min(mask.dims()[0] - 1);
    let boundary = slice_boundary(mask, z);
    if boundary.len() < 2 {
        return Err(Error::DegenerateStroke(format!(
            "slice {z} has {} boundary pixels",
            boundary.len()
        )));
    }
    let [_, sy, sx] = mask.geometry.spacing_mm;
    let d2 = |a: [usize; 2], b: [usize; 2]| {
        let dy = (a[0] as f64 - b[0] as f64) * sy;
        let dx = (a[1] as f64 - b[1] as f64) * sx;
        dy * dy + dx * dx
    };
    let mut best = (0usize, 1usize, d2(boundary[0], boundary[1]));
    for i in 0..boundary.len() {
        for j in i + 1..boundary.len() {
            let d = d2(boundary[i], boundary[j]);
            if d > best.2 {
                best = (i, j, d);
            }
        }
    }
    let to3 = |p: [usize; 2]| [z as f64, p[0] as f64, p[1] as f64];
    Ok(PointPair {
        p0: to3(boundary[best.0]),
        p1: to3(boundary[best.1]),
    })
}

/// Clamp both points into `[0, dim - 1]` and reject coincident or
/// non-finite input.
pub fn validate_user_points(p0: [f64; 3], p1: [f64; 3], geometry: &VolumeGeometry) -> Result<PointPair> {
    if !p0.iter().chain(&p1).all(|c| c.is_finite()) {
        return Err(Error::NonFinite);
    }
    let clamp = |p: [f64; 3]| -> [f64; 3] {
        std::array::from_fn(|a| p[a].clamp(0.0, (geometry.dims[a] - 1) as f64))
    };
    let (p0, p1) = (clamp(p0), clamp(p1));
    if p0 == p1 {
        return Err(Error::CoincidentPoints);
    }
    Ok(PointPair { p0, p1 })
}

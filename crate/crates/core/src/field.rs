//! Two-point attraction weight map.
//!
//! Each interaction point anchors a radial unit field whose magnitude decays
//! as `1 / distance^p`. The first point's field points away from it, the
//! second point's field is negated, and the weight map is the voxelwise norm
//! of their sum rescaled to a maximum of 1. The map is large along the
//! segment joining the points, where both fields align, and fades elsewhere.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{Grid, SoftMask, VolumeGeometry};

/// One 3-vector per voxel, `(z, y, x)` components.
pub type VectorField = Vec<[f64; 3]>;

/// The two end-points of a diameter stroke, continuous voxel coordinates
/// `(z, y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointPair {
    pub p0: [f64; 3],
    pub p1: [f64; 3],
}

impl PointPair {
    /// Validates finiteness, bounds `[0, dim - 1]` and distinctness.
    pub fn new(p0: [f64; 3], p1: [f64; 3], dims: [usize; 3]) -> Result<Self> {
        for p in [p0, p1] {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::NonFinite);
            }
            for a in 0..3 {
                if p[a] < 0.0 || p[a] > (dims[a] - 1) as f64 {
                    return Err(Error::InvalidArgument(format!(
                        "point {p:?} outside dims {dims:?}"
                    )));
                }
            }
        }
        if p0 == p1 {
            return Err(Error::CoincidentPoints);
        }
        Ok(Self { p0, p1 })
    }

    pub fn swapped(&self) -> Self {
        Self {
            p0: self.p1,
            p1: self.p0,
        }
    }

    pub fn distance(&self) -> f64 {
        dist(self.p0, self.p1)
    }

    pub fn midpoint(&self) -> [f64; 3] {
        std::array::from_fn(|a| 0.5 * (self.p0[a] + self.p1[a]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    /// Decay exponent of the per-point magnitude.
    pub decay_p: f64,
    /// Distance floor guarding the singularity at the point itself.
    pub epsilon: f64,
}

impl FieldParams {
    pub fn new(decay_p: f64) -> Self {
        Self {
            decay_p,
            ..Self::default()
        }
    }
}

impl Default for FieldParams {
    fn default() -> Self {
        Self {
            decay_p: 0.44,
            epsilon: 1e-3,
        }
    }
}

/// Per-voxel attraction magnitude in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub geometry: VolumeGeometry,
    pub values: Vec<f32>,
    pub decay_p: f64,
}

impl WeightMap {
    pub fn zeros(geometry: VolumeGeometry, decay_p: f64) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            values: vec![0.0; n],
            decay_p,
        }
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn to_soft(&self) -> SoftMask {
        Grid {
            geometry: self.geometry.clone(),
            values: self.values.clone(),
        }
    }
}

#[inline]
fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn voxel_positions(geometry: &VolumeGeometry) -> impl Iterator<Item = [f64; 3]> + '_ {
    (0..geometry.len()).map(|i| geometry.coords(i).map(|c| c as f64))
}

/// Normalized gradient of the squared distance to `center`: the outward unit
/// vector at every voxel, zero at the center itself.
pub fn unit_gradient(center: [f64; 3], geometry: &VolumeGeometry) -> VectorField {
    voxel_positions(geometry)
        .map(|v| {
            let d = dist(v, center);
            if d == 0.0 {
                [0.0; 3]
            } else {
                std::array::from_fn(|a| (v[a] - center[a]) / d)
            }
        })
        .collect()
}

/// `(-1)^sign_a * u(v) / max(d(v), eps)^p` with `u` from [`unit_gradient`].
pub fn point_field(
    center: [f64; 3],
    sign_a: u8,
    params: &FieldParams,
    geometry: &VolumeGeometry,
) -> VectorField {
    let sign = if sign_a % 2 == 0 { 1.0 } else { -1.0 };
    voxel_positions(geometry)
        .map(|v| {
            let d = dist(v, center);
            if d == 0.0 {
                return [0.0; 3];
            }
            let scale = sign / d.max(params.epsilon).powf(params.decay_p);
            std::array::from_fn(|a| (v[a] - center[a]) / d * scale)
        })
        .collect()
}

/// Un-normalized `|Q_0 + Q_1|` per voxel.
pub fn field_magnitude(pair: &PointPair, params: &FieldParams, geometry: &VolumeGeometry) -> Vec<f64> {
    let q0 = point_field(pair.p0, 0, params, geometry);
    let q1 = point_field(pair.p1, 1, params, geometry);
    q0.iter()
        .zip(&q1)
        .map(|(a, b)| {
            let w = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
            (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt()
        })
        .collect()
}

/// The weight map for an optional point pair. No points gives all zeros;
/// otherwise the magnitude is divided by its grid maximum.
pub fn attraction_map(
    pair: Option<&PointPair>,
    params: &FieldParams,
    geometry: &VolumeGeometry,
) -> Result<WeightMap> {
    let Some(pair) = pair else {
        return Ok(WeightMap::zeros(geometry.clone(), params.decay_p));
    };
    if pair.p0.map(f64::round) == pair.p1.map(f64::round) {
        return Err(Error::CoincidentPoints);
    }
    let mag = field_magnitude(pair, params, geometry);
    let max = mag.iter().copied().fold(0.0f64, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        return Err(Error::InvalidArgument(format!("field maximum {max}")));
    }
    Ok(WeightMap {
        geometry: geometry.clone(),
        values: mag.iter().map(|&m| (m / max) as f32).collect(),
        decay_p: params.decay_p,
    })
}

/// Distance from `v` to the segment `[a, b]`.
pub fn segment_distance(v: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab: [f64; 3] = std::array::from_fn(|i| b[i] - a[i]);
    let av: [f64; 3] = std::array::from_fn(|i| v[i] - a[i]);
    let len2: f64 = ab.iter().map(|c| c * c).sum();
    let t = if len2 == 0.0 {
        0.0
    } else {
        (av.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / len2).clamp(0.0, 1.0)
    };
    dist(v, std::array::from_fn(|i| a[i] + t * ab[i]))
}

/// Mean map value over voxels farther than `margin` voxels from the segment
/// joining the two points.
pub fn off_segment_mean(map: &WeightMap, pair: &PointPair, margin: f64) -> f64 {
    let (sum, n) = voxel_positions(&map.geometry)
        .zip(&map.values)
        .filter(|(v, _)| segment_distance(*v, pair.p0, pair.p1) > margin)
        .fold((0.0, 0usize), |(s, n), (_, &m)| (s + m as f64, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean map value outside balls of `radius` around both points.
pub fn off_point_mean(map: &WeightMap, pair: &PointPair, radius: f64) -> f64 {
    let (sum, n) = voxel_positions(&map.geometry)
        .zip(&map.values)
        .filter(|(v, _)| dist(*v, pair.p0) > radius && dist(*v, pair.p1) > radius)
        .fold((0.0, 0usize), |(s, n), (_, &m)| (s + m as f64, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

//! Voxel grids with physical geometry, intensity windowing, cube extraction
//! and resampling.
//!
//! All grids are stored flat, z-outermost row-major: the voxel `(z, y, x)`
//! lives at `(z * ny + y) * nx + x`, and its value is the sample at the voxel
//! center `origin + index * spacing`.

mod io;

pub use io::{
    decode_iwv1, decode_payload, encode_iwv1, load_volume, save_volume, stem_paths, Dtype, Iwv1Header, Volume,
    VolumeKind, FORMAT_TAG,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower edge of the intensity window, in Hounsfield units.
pub const HU_MIN: f32 = -1000.0;
/// Upper edge of the intensity window, in Hounsfield units.
pub const HU_MAX: f32 = 400.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeGeometry {
    /// `(nz, ny, nx)`
    pub dims: [usize; 3],
    /// `(sz, sy, sx)` in millimetres.
    pub spacing_mm: [f64; 3],
    /// World position of voxel `(0, 0, 0)`'s center.
    pub origin_mm: [f64; 3],
}

impl VolumeGeometry {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], origin_mm: [f64; 3]) -> Result<Self> {
        let g = Self {
            dims,
            spacing_mm,
            origin_mm,
        };
        g.validate()?;
        Ok(g)
    }

    /// Cube of `side` voxels with isotropic spacing and the origin at zero.
    pub fn cube(side: usize, spacing_mm: f64) -> Self {
        Self {
            dims: [side; 3],
            spacing_mm: [spacing_mm; 3],
            origin_mm: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Geometry(format!(
                "dims must be positive, got {:?}",
                self.dims
            )));
        }
        if self
            .dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .is_none()
        {
            return Err(Error::Geometry("voxel count overflows".into()));
        }
        if !self.spacing_mm.iter().all(|&s| s.is_finite() && s > 0.0) {
            return Err(Error::Geometry(format!(
                "spacing must be positive and finite, got {:?}",
                self.spacing_mm
            )));
        }
        if !self.origin_mm.iter().all(|o| o.is_finite()) {
            return Err(Error::Geometry("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.dims[2];
        let r = i / self.dims[2];
        [r / self.dims[1], r % self.dims[1], x]
    }

    /// World position (mm) of a continuous voxel index.
    pub fn world(&self, index: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin_mm[a] + index[a] * self.spacing_mm[a])
    }

    /// Continuous voxel index of a world position (mm).
    pub fn to_index(&self, world: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (world[a] - self.origin_mm[a]) / self.spacing_mm[a])
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().product()
    }

    /// Physical extent `dims * spacing` per axis.
    pub fn extent_mm(&self) -> [f64; 3] {
        std::array::from_fn(|a| self.dims[a] as f64 * self.spacing_mm[a])
    }

    pub fn same_grid(&self, other: &Self) -> bool {
        self.dims == other.dims
    }
}

/// A flat voxel array paired with its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub geometry: VolumeGeometry,
    pub values: Vec<T>,
}

/// Image intensities: raw HU before windowing, `[0, 1]` after.
pub type ScalarVolume = Grid<f32>;
/// Soft prediction in `[0, 1]`.
pub type SoftMask = Grid<f32>;
/// Strictly binary mask, values in `{0, 1}`.
pub type BinaryMask = Grid<u8>;

impl<T: Copy> Grid<T> {
    pub fn new(geometry: VolumeGeometry, values: Vec<T>) -> Result<Self> {
        geometry.validate()?;
        if values.len() != geometry.len() {
            return Err(Error::Shape(format!(
                "{} values for dims {:?}",
                values.len(),
                geometry.dims
            )));
        }
        Ok(Self { geometry, values })
    }

    pub fn filled(geometry: VolumeGeometry, value: T) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            values: vec![value; n],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> T {
        self.values[self.geometry.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.geometry.index(z, y, x);
        self.values[i] = v;
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            geometry: self.geometry.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_blank(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    /// Centroid in continuous voxel coordinates, `None` for an empty mask.
    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for (i, &v) in self.values.iter().enumerate() {
            if v != 0 {
                let c = self.geometry.coords(i);
                for a in 0..3 {
                    acc[a] += c[a] as f64;
                }
                n += 1;
            }
        }
        (n > 0).then(|| acc.map(|s| s / n as f64))
    }

    pub fn to_soft(&self) -> SoftMask {
        self.map(|v| v as f32)
    }
}

pub fn hu_window_value(hu: f32) -> f32 {
    ((hu - HU_MIN) / (HU_MAX - HU_MIN)).clamp(0.0, 1.0)
}

/// Inverse of the affine part of [`hu_window_value`].
pub fn hu_unwindow_value(v: f32) -> f32 {
    v * (HU_MAX - HU_MIN) + HU_MIN
}

/// Map `[-1000, 400]` HU linearly onto `[0, 1]`, clamping outside.
pub fn hu_window(volume: &ScalarVolume) -> ScalarVolume {
    volume.map(hu_window_value)
}

#[inline]
fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// Source voxel read for every cube voxel, `None` where the cube overhangs
/// the scan. Split out of [`extract_cube`] so the read pattern can be
/// checked on its own.
pub(crate) fn cube_source_indices(
    scan: &VolumeGeometry,
    center_mm: [f64; 3],
    side_mm: f64,
) -> Result<(VolumeGeometry, Vec<Option<[usize; 3]>>)> {
    if !(side_mm.is_finite() && side_mm > 0.0) || !center_mm.iter().all(|c| c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "cube side {side_mm} / center {center_mm:?}"
        )));
    }
    let dims: [usize; 3] =
        std::array::from_fn(|a| (round_half_up(side_mm / scan.spacing_mm[a]) as usize).max(1));
    let origin: [f64; 3] = std::array::from_fn(|a| {
        center_mm[a] - (dims[a] as f64 - 1.0) / 2.0 * scan.spacing_mm[a]
    });
    let geometry = VolumeGeometry::new(dims, scan.spacing_mm, origin)?;

    // Per-axis source index lookup; the cube shares the scan spacing so the
    // mapping is separable.
    let axis_map: Vec<Vec<Option<usize>>> = (0..3)
        .map(|a| {
            (0..dims[a])
                .map(|k| {
                    let world = origin[a] + k as f64 * scan.spacing_mm[a];
                    let idx = round_half_up((world - scan.origin_mm[a]) / scan.spacing_mm[a]);
                    (idx >= 0.0 && idx <= (scan.dims[a] - 1) as f64).then_some(idx as usize)
                })
                .collect()
        })
        .collect();
    if axis_map.iter().any(|m| m.iter().all(Option::is_none)) {
        return Err(Error::CubeOutside);
    }

    let mut out = Vec::with_capacity(geometry.len());
    for z in &axis_map[0] {
        for y in &axis_map[1] {
            for x in &axis_map[2] {
                out.push(match (z, y, x) {
                    (Some(z), Some(y), Some(x)) => Some([*z, *y, *x]),
                    _ => None,
                });
            }
        }
    }
    Ok((geometry, out))
}

/// Cut a cube of `side_mm` centered at `center_mm` (world coordinates) out of
/// `scan`, keeping the scan spacing. Voxels past the scan border read 0.
pub fn extract_cube(scan: &ScalarVolume, center_mm: [f64; 3], side_mm: f64) -> Result<ScalarVolume> {
    let (geometry, sources) = cube_source_indices(&scan.geometry, center_mm, side_mm)?;
    let values = sources
        .iter()
        .map(|s| s.map_or(0.0, |[z, y, x]| scan.get(z, y, x)))
        .collect();
    Ok(Grid { geometry, values })
}

/// Per-axis interpolation table: for each output index, the two source
/// indices and the weight of the upper one.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let s = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, s - lo as f64)
        })
        .collect()
}

/// Geometry of `geometry` resampled onto `target` voxels over the same
/// physical extent.
pub fn resampled_geometry(geometry: &VolumeGeometry, target: [usize; 3]) -> Result<VolumeGeometry> {
    if target.iter().any(|&t| t < 1) {
        return Err(Error::InvalidArgument(format!("target dims {target:?}")));
    }
    let spacing: [f64; 3] = std::array::from_fn(|a| geometry.extent_mm()[a] / target[a] as f64);
    let origin: [f64; 3] = std::array::from_fn(|a| {
        geometry.origin_mm[a] - geometry.spacing_mm[a] / 2.0 + spacing[a] / 2.0
    });
    VolumeGeometry::new(target, spacing, origin)
}

/// Trilinear resampling onto `target` voxels spanning the same physical
/// extent. Voxel centers are aligned, so sample `i` of the output reads
/// source position `(i + 0.5) * n_in / n_out - 0.5`, clamped to the grid.
pub fn resample_iso(volume: &ScalarVolume, target: [usize; 3]) -> Result<ScalarVolume> {
    let geometry = resampled_geometry(&volume.geometry, target)?;
    if volume.dims().iter().any(|&d| d < 2) {
        return Err(Error::Geometry(format!(
            "resampling needs at least 2 voxels per axis, got {:?}",
            volume.dims()
        )));
    }
    let [nz, ny, nx] = volume.dims();
    let wz = axis_weights(nz, target[0]);
    let wy = axis_weights(ny, target[1]);
    let wx = axis_weights(nx, target[2]);
    let src = &volume.values;
    let at = |z: usize, y: usize, x: usize| src[(z * ny + y) * nx + x] as f64;

    let mut values = Vec::with_capacity(geometry.len());
    for &(z0, z1, fz) in &wz {
        for &(y0, y1, fy) in &wy {
            for &(x0, x1, fx) in &wx {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                let v = lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz);
                values.push(v as f32);
            }
        }
    }
    Ok(Grid { geometry, values })
}

/// Resample a binary mask: trilinear on `{0, 1}` followed by `>= 0.5`.
pub fn resample_mask(mask: &BinaryMask, target: [usize; 3]) -> Result<BinaryMask> {
    Ok(threshold(&resample_iso(&mask.to_soft(), target)?, 0.5))
}

/// Like [`resample_mask`], but a mask that vanishes under resampling keeps
/// the single voxel with the highest interpolated occupancy.
pub fn resample_mask_nonempty(mask: &BinaryMask, target: [usize; 3]) -> Result<BinaryMask> {
    let soft = resample_iso(&mask.to_soft(), target)?;
    let mut out = threshold(&soft, 0.5);
    if out.is_blank() && !mask.is_blank() {
        let best = soft
            .values
            .iter()
            .enumerate()
            .fold((0, f32::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        out.values[best.0] = 1;
    }
    Ok(out)
}

/// `1` where `soft >= t`, else `0`.
pub fn threshold(mask: &SoftMask, t: f32) -> BinaryMask {
    mask.map(|v| u8::from(v >= t))
}

/// Map a continuous voxel coordinate of a grid with `from` dims onto the
/// center-aligned grid with `to` dims over the same extent.
pub fn rescale_index(p: [f64; 3], from: [usize; 3], to: [usize; 3]) -> [f64; 3] {
    std::array::from_fn(|a| (p[a] + 0.5) * to[a] as f64 / from[a] as f64 - 0.5)
}

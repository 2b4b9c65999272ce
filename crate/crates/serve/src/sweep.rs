//! Attraction maps over a range of decay exponents on a fixed fixture.

use serde::Serialize;

use iwnet_core::field::{attraction_map, off_segment_mean, FieldParams, PointPair};
use iwnet_core::volgrid::{Grid, SoftMask, VolumeGeometry};
use iwnet_core::Result;

pub const SWEEP_SIDE: usize = 16;
pub const SWEEP_POINTS: [[f64; 3]; 2] = [[8.0, 8.0, 4.0], [8.0, 8.0, 12.0]];
/// Voxels within this distance of the segment do not count as off-segment.
pub const SWEEP_MARGIN: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepEntry {
    pub p: f64,
    pub off_segment_mean: f64,
    pub max: f32,
    pub swap_symmetric: bool,
    /// The axial slice through both points, as a `1 x side x side` grid.
    #[serde(skip)]
    pub slice: SoftMask,
}

pub fn fieldsweep(ps: &[f64]) -> Result<Vec<SweepEntry>> {
    let g = VolumeGeometry::cube(SWEEP_SIDE, 1.0);
    let pair = PointPair::new(SWEEP_POINTS[0], SWEEP_POINTS[1], g.dims)?;
    let z = SWEEP_POINTS[0][0] as usize;
    ps.iter()
        .map(|&p| {
            let params = FieldParams::new(p);
            let map = attraction_map(Some(&pair), &params, &g)?;
            let swapped = attraction_map(Some(&pair.swapped()), &params, &g)?;
            let plane = SWEEP_SIDE * SWEEP_SIDE;
            let slice = Grid::new(
                VolumeGeometry::new([1, SWEEP_SIDE, SWEEP_SIDE], [1.0; 3], [z as f64, 0.0, 0.0])?,
                map.values[z * plane..(z + 1) * plane].to_vec(),
            )?;
            Ok(SweepEntry {
                p,
                off_segment_mean: off_segment_mean(&map, &pair, SWEEP_MARGIN),
                max: map.max(),
                swap_symmetric: map.values == swapped.values,
                slice,
            })
        })
        .collect()
}

/// True when the off-segment mean strictly decreases along `entries`.
pub fn strictly_decaying(entries: &[SweepEntry]) -> bool {
    entries.windows(2).all(|w| w[1].off_segment_mean < w[0].off_segment_mean)
}

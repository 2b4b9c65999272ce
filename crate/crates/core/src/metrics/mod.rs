//! Overlap and surface-distance metrics, multi-annotator averaging and the
//! keep-or-replace evaluation of corrected segmentations.

mod edt;
mod report;

pub use report::{summarize, write_csv, EvalRecord, EvalSummary, GroupStats, CSV_HEADER};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    Solid,
    SubSolid,
    NonSolid,
}

impl Texture {
    /// Class from the annotators' averaged texture score on the 1..=5 scale.
    pub fn from_score(avg: f64) -> Self {
        if avg <= 2.0 {
            Texture::NonSolid
        } else if avg == 5.0 {
            Texture::Solid
        } else {
            Texture::SubSolid
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::SubSolid => "sub-solid",
            Texture::NonSolid => "non-solid",
        }
    }

    pub const ALL: [Texture; 3] = [Texture::Solid, Texture::SubSolid, Texture::NonSolid];
}

/// One mask per annotator on a shared grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    masks: Vec<BinaryMask>,
}

impl AnnotationSet {
    pub fn new(masks: Vec<BinaryMask>) -> Result<Self> {
        let Some(first) = masks.first() else {
            return Err(Error::InvalidArgument("annotation set is empty".into()));
        };
        if masks.iter().any(|m| m.geometry.dims != first.geometry.dims) {
            return Err(Error::Shape("annotations on different grids".into()));
        }
        Ok(Self { masks })
    }

    pub fn masks(&self) -> &[BinaryMask] {
        &self.masks
    }

    /// Number of annotators.
    pub fn agreement_level(&self) -> usize {
        self.masks.len()
    }
}

fn same_grid(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.geometry.dims != b.geometry.dims {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            a.geometry.dims, b.geometry.dims
        )));
    }
    Ok(())
}

/// `|a & b| / |a | b|`.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    same_grid(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        return Err(Error::EmptyUnion);
    }
    Ok(inter as f64 / union as f64)
}

/// Foreground voxels with at least one 6-neighbour that is background or
/// outside the grid.
pub fn surface_voxels(mask: &BinaryMask) -> Result<Vec<[usize; 3]>> {
    let [nz, ny, nx] = mask.dims();
    let fg = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < nz
            && (y as usize) < ny
            && (x as usize) < nx
            && mask.get(z as usize, y as usize, x as usize) != 0
    };
    let mut out = Vec::new();
    let mut any = false;
    for (i, &v) in mask.values.iter().enumerate() {
        if v == 0 {
            continue;
        }
        any = true;
        let [z, y, x] = mask.geometry.coords(i).map(|c| c as isize);
        let interior = fg(z - 1, y, x)
            && fg(z + 1, y, x)
            && fg(z, y - 1, x)
            && fg(z, y + 1, x)
            && fg(z, y, x - 1)
            && fg(z, y, x + 1);
        if !interior {
            out.push([z as usize, y as usize, x as usize]);
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    Ok(out)
}

/// Mean over `from` of the distance (mm) to the nearest voxel of `to_edt`.
fn mean_nearest(from: &[[usize; 3]], to_edt: &[f64], mask: &BinaryMask) -> f64 {
    let sum: f64 = from
        .iter()
        .map(|&[z, y, x]| to_edt[mask.geometry.index(z, y, x)].sqrt())
        .sum();
    sum / from.len() as f64
}

/// Symmetric average surface distance in mm, measured between voxel centers.
pub fn asd(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    same_grid(a, b)?;
    let sa = surface_voxels(a)?;
    let sb = surface_voxels(b)?;
    let spacing = a.geometry.spacing_mm;
    let dt_a = edt::squared_distance_to_sites(a.dims(), spacing, &sa);
    let dt_b = edt::squared_distance_to_sites(a.dims(), spacing, &sb);
    Ok(0.5 * (mean_nearest(&sa, &dt_b, a) + mean_nearest(&sb, &dt_a, a)))
}

/// Mean IoU over every ordered (truth, prediction) pair of distinct
/// annotators.
pub fn interobserver_iou(ann: &AnnotationSet) -> Result<f64> {
    let m = ann.masks();
    if m.len() < 2 {
        return Err(Error::InvalidArgument(
            "inter-observer agreement needs at least two annotators".into(),
        ));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, truth) in m.iter().enumerate() {
        for (j, pred) in m.iter().enumerate() {
            if i != j {
                sum += iou(truth, pred)?;
                n += 1;
            }
        }
    }
    Ok(sum / n as f64)
}

/// `(1/N) * sum_n IoU(S_n, pred)`.
pub fn mean_iou_vs_annotators(pred: &BinaryMask, ann: &AnnotationSet) -> Result<f64> {
    let ious = ann
        .masks()
        .iter()
        .map(|s| iou(s, pred))
        .collect::<Result<Vec<_>>>()?;
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Per-annotator keep-or-replace outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct BestOfTwo {
    /// `(1/N) * sum_n max(IoU(S_n, Cr_n), IoU(S_n, initial))`
    pub mean_iou: f64,
    /// IoU of the initial segmentation against each annotator.
    pub initial: Vec<f64>,
    /// IoU of each annotator's correction against that annotator.
    pub corrected: Vec<f64>,
    /// Whether the correction was kept; ties keep the initial mask.
    pub keep_corrected: Vec<bool>,
}

pub fn best_of_two(
    ann: &AnnotationSet,
    initial: &BinaryMask,
    corrected: &[BinaryMask],
) -> Result<BestOfTwo> {
    if corrected.len() != ann.agreement_level() {
        return Err(Error::Shape(format!(
            "{} corrections for {} annotators",
            corrected.len(),
            ann.agreement_level()
        )));
    }
    let mut out = BestOfTwo {
        mean_iou: 0.0,
        initial: Vec::new(),
        corrected: Vec::new(),
        keep_corrected: Vec::new(),
    };
    for (s, cr) in ann.masks().iter().zip(corrected) {
        let a = iou(s, initial)?;
        let c = iou(s, cr)?;
        out.initial.push(a);
        out.corrected.push(c);
        out.keep_corrected.push(c > a);
        out.mean_iou += a.max(c);
    }
    out.mean_iou /= corrected.len() as f64;
    Ok(out)
}

pub fn corrected_best_iou(
    ann: &AnnotationSet,
    initial: &BinaryMask,
    corrected: &[BinaryMask],
) -> Result<f64> {
    Ok(best_of_two(ann, initial, corrected)?.mean_iou)
}

/// Radius of the sphere with the mask's physical volume.
pub fn sphere_radius(mask: &BinaryMask) -> Result<f64> {
    let n = mask.count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let v = n as f64 * mask.geometry.voxel_volume_mm3();
    Ok((3.0 * v / (4.0 * std::f64::consts::PI)).cbrt())
}

/// Mean equivalent spherical radius (mm) over annotators.
pub fn equivalent_radius(ann: &AnnotationSet) -> Result<f64> {
    let radii = ann
        .masks()
        .iter()
        .map(sphere_radius)
        .collect::<Result<Vec<_>>>()?;
    Ok(radii.iter().sum::<f64>() / radii.len() as f64)
}

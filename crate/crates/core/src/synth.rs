//! Synthetic nodule scenes: a textured ellipsoid in noisy parenchyma, an
//! optional vessel or wall attachment, and 2-4 simulated annotators.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{iou, sphere_radius, AnnotationSet, Texture};
use crate::volgrid::{load_volume, save_volume, BinaryMask, Grid, ScalarVolume, Volume, VolumeGeometry};

/// Native grid: 48 voxels of 0.6 mm (28.8 mm field of view).
pub const NATIVE_SIDE: usize = 48;
pub const NATIVE_SPACING_MM: f64 = 0.6;
pub const PARENCHYMA: f32 = 0.15;
pub const SOLID_CORE: f32 = 0.85;
pub const SUBSOLID_CORE: f32 = 0.6;
pub const NONSOLID_CORE: f32 = 0.45;
/// Largest relative radial perturbation of an annotator mask.
pub const MAX_PERTURBATION: f64 = 0.15;
pub const MIN_SEMI_AXIS: f64 = 1.5;
const ANNOTATOR_REDRAWS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attachment {
    None,
    Vessel,
    Wall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoduleSpec {
    pub grid_side: usize,
    pub spacing_mm: f64,
    /// Voxel coordinates `(z, y, x)`.
    pub center: [f64; 3],
    /// Voxels, before rotation.
    pub semi_axes: [f64; 3],
    /// Euler angles (rad) about z, y, x.
    pub rotation: [f64; 3],
    pub texture: Texture,
    pub core_intensity: f32,
    /// Width (voxels) of the logistic edge.
    pub boundary_softness: f64,
    pub attachment: Attachment,
    /// Unit direction from the center towards the attachment.
    pub attachment_dir: [f64; 3],
    pub noise_sigma: f32,
    pub n_annotators: usize,
    pub seed: u64,
}

impl NoduleSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.grid_side < 4 || !(self.spacing_mm > 0.0) {
            return bad(format!("grid {} x {} mm", self.grid_side, self.spacing_mm));
        }
        if self.semi_axes.iter().any(|&a| !(a >= MIN_SEMI_AXIS) || !a.is_finite()) {
            return bad(format!("semi-axes {:?} below {MIN_SEMI_AXIS}", self.semi_axes));
        }
        if !(0.0..=1.0).contains(&self.core_intensity) || !(0.0..=1.0).contains(&self.noise_sigma) {
            return bad("intensities must lie in [0, 1]".into());
        }
        if !(self.boundary_softness > 0.0) {
            return bad(format!("boundary softness {}", self.boundary_softness));
        }
        if !(2..=4).contains(&self.n_annotators) {
            return bad(format!("{} annotators", self.n_annotators));
        }
        let n: f64 = self.attachment_dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if self.attachment != Attachment::None && (n - 1.0).abs() > 1e-6 {
            return bad("attachment direction must be a unit vector".into());
        }
        // the perturbed outline must fit as well
        let reach = self.semi_axes.iter().copied().fold(0.0, f64::max) * (1.0 + MAX_PERTURBATION) + 0.5;
        let hi = (self.grid_side - 1) as f64;
        if self.center.iter().any(|&c| c - reach < 0.0 || c + reach > hi) {
            return Err(Error::NoduleOutside);
        }
        Ok(())
    }

    pub fn geometry(&self) -> VolumeGeometry {
        VolumeGeometry::cube(self.grid_side, self.spacing_mm)
    }

    /// World-to-body rotation matrix (rows are the body axes).
    fn body_axes(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.rotation;
        let rz = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
        let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
        let rx = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
        matmul(&matmul(&rz, &ry), &rx)
    }

    /// Normalized ellipsoid radius `rho` (1 on the surface) and the body-frame
    /// offset of voxel `p`.
    fn rho(&self, axes: &[[f64; 3]; 3], p: [f64; 3]) -> (f64, [f64; 3]) {
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let q: [f64; 3] = std::array::from_fn(|i| dot(axes[i], d));
        let r = (0..3).map(|i| (q[i] / self.semi_axes[i]).powi(2)).sum::<f64>().sqrt();
        (r, q)
    }

    /// Distance from the center to the tangent plane with normal `n`.
    fn support(&self, axes: &[[f64; 3]; 3], n: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| (self.semi_axes[i] * dot(axes[i], n)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Approximate signed distance (voxels) to the ellipsoid surface along the
/// ray through the center.
fn radial_distance(rho: f64, q: [f64; 3], min_axis: f64) -> f64 {
    let len = dot(q, q).sqrt();
    if rho <= 1e-12 {
        -min_axis
    } else {
        len * (1.0 - 1.0 / rho)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCase {
    pub id: String,
    pub volume: ScalarVolume,
    pub annotations: AnnotationSet,
    pub spec: NoduleSpec,
}

impl SynthCase {
    pub fn texture(&self) -> Texture {
        self.spec.texture
    }
}

/// Rasterized ellipsoid `rho <= 1`.
pub fn truth_mask(spec: &NoduleSpec) -> BinaryMask {
    perturbed_mask(spec, &RadialField::zero())
}

/// Smooth relative change of the radius as a function of direction:
/// a constant, a dipole and a quadrupole term.
#[derive(Clone, Debug, PartialEq)]
struct RadialField {
    c0: f64,
    c1: f64,
    v1: [f64; 3],
    c2: f64,
    v2: [f64; 3],
}

impl RadialField {
    fn zero() -> Self {
        Self { c0: 0.0, c1: 0.0, v1: [1.0, 0.0, 0.0], c2: 0.0, v2: [1.0, 0.0, 0.0] }
    }

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        Self {
            c0: rng.random_range(-0.07..=0.07),
            c1: rng.random_range(-0.04..=0.04),
            v1: unit_vector(rng),
            c2: rng.random_range(-0.04..=0.04),
            v2: unit_vector(rng),
        }
    }

    /// `|delta| <= 0.07 + 0.04 + 0.04 = 0.15`.
    fn delta(&self, u: [f64; 3]) -> f64 {
        let quad = 1.5 * (dot(u, self.v2).powi(2) - 1.0 / 3.0);
        self.c0 + self.c1 * dot(u, self.v1) + self.c2 * quad
    }
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v = [n.sample(rng), n.sample(rng), n.sample(rng)];
        let len = dot(v, v).sqrt();
        if len > 1e-6 {
            return v.map(|c| c / len);
        }
    }
}

fn perturbed_mask(spec: &NoduleSpec, field: &RadialField) -> BinaryMask {
    let geom = spec.geometry();
    let axes = spec.body_axes();
    let values = (0..geom.len())
        .map(|i| {
            let p = geom.coords(i).map(|c| c as f64);
            let (rho, q) = spec.rho(&axes, p);
            let len = dot(q, q).sqrt();
            let u = if len > 0.0 { q.map(|c| c / len) } else { [1.0, 0.0, 0.0] };
            u8::from(rho <= 1.0 + field.delta(u))
        })
        .collect();
    Grid { geometry: geom, values }
}

/// Number of 6-connected foreground components.
pub fn component_count(mask: &BinaryMask) -> usize {
    let [nz, ny, nx] = mask.dims();
    let mut seen = vec![false; mask.values.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..mask.values.len() {
        if mask.values[start] == 0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let [z, y, x] = mask.geometry.coords(i);
            let mut visit = |zz: usize, yy: usize, xx: usize| {
                let j = (zz * ny + yy) * nx + xx;
                if mask.values[j] != 0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if z > 0 { visit(z - 1, y, x) }
            if z + 1 < nz { visit(z + 1, y, x) }
            if y > 0 { visit(z, y - 1, x) }
            if y + 1 < ny { visit(z, y + 1, x) }
            if x > 0 { visit(z, y, x - 1) }
            if x + 1 < nx { visit(z, y, x + 1) }
        }
    }
    count
}

/// Limits every annotator mask must respect.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorRules {
    pub min_iou_truth: f64,
    pub min_iou_pairwise: f64,
    pub radius_range_mm: (f64, f64),
}

impl Default for AnnotatorRules {
    fn default() -> Self {
        Self {
            min_iou_truth: 0.5,
            min_iou_pairwise: 0.4,
            radius_range_mm: (0.0, f64::INFINITY),
        }
    }
}

fn acceptable(mask: &BinaryMask, truth: &BinaryMask, others: &[BinaryMask], rules: &AnnotatorRules) -> bool {
    if mask.is_blank() || component_count(mask) != 1 {
        return false;
    }
    let r = sphere_radius(mask).unwrap_or(0.0);
    if r < rules.radius_range_mm.0 || r > rules.radius_range_mm.1 {
        return false;
    }
    iou(mask, truth).is_ok_and(|v| v >= rules.min_iou_truth)
        && others.iter().all(|o| iou(mask, o).is_ok_and(|v| v >= rules.min_iou_pairwise))
}

fn render(spec: &NoduleSpec, rng: &mut ChaCha8Rng) -> ScalarVolume {
    let geom = spec.geometry();
    let axes = spec.body_axes();
    let min_axis = spec.semi_axes.iter().copied().fold(f64::INFINITY, f64::min);
    let soft = spec.boundary_softness;
    let core = spec.core_intensity as f64;
    let bg = PARENCHYMA as f64;
    let n = spec.attachment_dir;
    let h = spec.support(&axes, n);
    // vessel axis: tangent to the nodule, perpendicular to `n`
    let vessel_r = (0.35 * min_axis).clamp(1.0, 2.0);
    let t = {
        let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let c = [
            n[1] * helper[2] - n[2] * helper[1],
            n[2] * helper[0] - n[0] * helper[2],
            n[0] * helper[1] - n[1] * helper[0],
        ];
        let l = dot(c, c).sqrt();
        c.map(|v| v / l)
    };
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0) as f64).expect("finite sigma");
    let mut values = Vec::with_capacity(geom.len());
    for i in 0..geom.len() {
        let p = geom.coords(i).map(|c| c as f64);
        let (rho, q) = spec.rho(&axes, p);
        let d = radial_distance(rho, q, min_axis);
        let body = logistic(-d / soft);
        let mut v = bg + (core - bg) * body;
        if spec.texture == Texture::SubSolid {
            // denser core within half the radius
            let inner = logistic(-(rho - 0.5) * min_axis / soft);
            v += (SOLID_CORE as f64 - core) * inner * body;
        }
        let rel = [p[0] - spec.center[0], p[1] - spec.center[1], p[2] - spec.center[2]];
        let attach = match spec.attachment {
            Attachment::None => 0.0,
            Attachment::Wall => logistic((dot(rel, n) - h) / soft),
            Attachment::Vessel => {
                let off = dot(rel, n) - (h + vessel_r);
                let along = dot(rel, t);
                let radial = (off * off + (dot(rel, rel) - dot(rel, n).powi(2) - along * along).max(0.0)).sqrt();
                logistic((vessel_r - radial) / soft)
            }
        };
        v = v.max(bg + (core - bg) * attach);
        if spec.noise_sigma > 0.0 {
            v += noise.sample(rng);
        }
        values.push(v.clamp(0.0, 1.0) as f32);
    }
    Grid { geometry: geom, values }
}

/// Render the scene and draw the annotators. Each annotator is redrawn until
/// it satisfies `rules`; after the redraw budget the truth mask is used.
pub fn generate_case_with(spec: &NoduleSpec, rules: &AnnotatorRules) -> Result<SynthCase> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let volume = render(spec, &mut rng);
    let truth = truth_mask(spec);
    let mut masks: Vec<BinaryMask> = Vec::with_capacity(spec.n_annotators);
    for _ in 0..spec.n_annotators {
        let mut chosen = None;
        for _ in 0..ANNOTATOR_REDRAWS {
            let m = perturbed_mask(spec, &RadialField::draw(&mut rng));
            if acceptable(&m, &truth, &masks, rules) {
                chosen = Some(m);
                break;
            }
        }
        masks.push(chosen.unwrap_or_else(|| truth.clone()));
    }
    Ok(SynthCase {
        id: String::new(),
        volume,
        annotations: AnnotationSet::new(masks)?,
        spec: spec.clone(),
    })
}

pub fn generate_case(spec: &NoduleSpec) -> Result<SynthCase> {
    generate_case_with(spec, &AnnotatorRules::default())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_cases: usize,
    /// Equivalent spherical radius range of the annotations.
    pub radius_range_mm: (f64, f64),
    /// Shares of non-solid, sub-solid and solid nodules.
    pub texture_mix: [f64; 3],
    pub seed: u64,
    pub grid_side: usize,
    pub spacing_mm: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_cases: 200,
            radius_range_mm: (1.0, 8.0),
            texture_mix: [0.06, 0.14, 0.80],
            seed: 2019,
            grid_side: NATIVE_SIDE,
            spacing_mm: NATIVE_SPACING_MM,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_cases == 0 {
            return bad("n_cases must be at least 1".into());
        }
        let (lo, hi) = self.radius_range_mm;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("radius range {lo}..{hi}"));
        }
        let min_mm = MIN_SEMI_AXIS * self.spacing_mm;
        if lo < min_mm {
            return bad(format!("radius {lo} mm is below {MIN_SEMI_AXIS} voxels of {} mm", self.spacing_mm));
        }
        let reach = hi / self.spacing_mm * 1.35 * (1.0 + MAX_PERTURBATION) + 2.0;
        if 2.0 * reach > (self.grid_side - 1) as f64 {
            return bad(format!("radius {hi} mm does not fit a {}-voxel grid", self.grid_side));
        }
        let s: f64 = self.texture_mix.iter().sum();
        if self.texture_mix.iter().any(|&r| !(r >= 0.0)) || !(s > 0.0) {
            return bad(format!("texture mix {:?}", self.texture_mix));
        }
        Ok(())
    }
}

/// splitmix64 of `master + (i + 1) * golden`: the seed of case `i`.
pub fn case_seed(master: u64, i: u64) -> u64 {
    let mut z = master.wrapping_add((i + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Largest-remainder apportionment of `n` items to `shares`.
pub fn stratified_counts(n: usize, shares: &[f64]) -> Vec<usize> {
    let total: f64 = shares.iter().sum();
    let exact: Vec<f64> = shares.iter().map(|s| n as f64 * s / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let rest = n - counts.iter().sum::<usize>();
    for &k in order.iter().take(rest) {
        counts[k] += 1;
    }
    counts
}

const TEXTURES: [Texture; 3] = [Texture::NonSolid, Texture::SubSolid, Texture::Solid];

/// Draw the spec of one case with a target equivalent radius.
pub fn draw_spec(config: &DatasetConfig, texture: Texture, seed: u64) -> NoduleSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = config.radius_range_mm;
    let radius_vox = rng.random_range(lo..=hi) / config.spacing_mm;
    // axis ratios with unit geometric mean, keeping every axis >= MIN_SEMI_AXIS
    let mut ratios: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.8f64..1.25).ln());
    let mean = ratios.iter().sum::<f64>() / 3.0;
    ratios.iter_mut().for_each(|r| *r = (*r - mean).exp());
    let semi_axes = ratios.map(|r| (r * radius_vox).max(MIN_SEMI_AXIS));
    let mid = (config.grid_side - 1) as f64 / 2.0;
    let center = std::array::from_fn(|_| mid + rng.random_range(-1.5..=1.5));
    let rotation = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::PI));
    let (core, softness) = match texture {
        Texture::Solid => (SOLID_CORE, 0.5),
        Texture::SubSolid => (SUBSOLID_CORE, 0.8),
        Texture::NonSolid => (NONSOLID_CORE, 1.2),
    };
    let attachment = match rng.random_range(0..20) {
        0..=11 => Attachment::None,
        12..=16 => Attachment::Vessel,
        _ => Attachment::Wall,
    };
    // attachments sit in the axial plane
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    NoduleSpec {
        grid_side: config.grid_side,
        spacing_mm: config.spacing_mm,
        center,
        semi_axes,
        rotation,
        texture,
        core_intensity: core,
        boundary_softness: softness,
        attachment,
        attachment_dir: [0.0, angle.sin(), angle.cos()],
        noise_sigma: rng.random_range(0.02..=0.05),
        n_annotators: rng.random_range(2..=4),
        seed: rng.random(),
    }
}

/// Deterministic dataset: textures by stratified assignment, per-case seeds
/// by [`case_seed`]. A case whose truth falls outside the radius range is
/// redrawn from the next seed of its stream.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Vec<SynthCase>> {
    config.validate()?;
    let counts = stratified_counts(config.n_cases, &config.texture_mix);
    let mut textures: Vec<Texture> = TEXTURES
        .iter()
        .zip(&counts)
        .flat_map(|(&t, &c)| std::iter::repeat_n(t, c))
        .collect();
    textures.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let rules = AnnotatorRules {
        radius_range_mm: config.radius_range_mm,
        ..AnnotatorRules::default()
    };
    let (lo, hi) = config.radius_range_mm;
    textures
        .iter()
        .enumerate()
        .map(|(i, &texture)| {
            let mut seed = case_seed(config.seed, i as u64);
            let mut attempt = 0;
            loop {
                let spec = draw_spec(config, texture, seed);
                let r = sphere_radius(&truth_mask(&spec)).unwrap_or(0.0);
                if (lo..=hi).contains(&r) || attempt == 32 {
                    let mut case = generate_case_with(&spec, &rules)?;
                    case.id = format!("{i:04}");
                    return Ok(case);
                }
                attempt += 1;
                seed = case_seed(seed, attempt);
            }
        })
        .collect()
}

pub fn write_dataset(dir: &Path, cases: &[SynthCase]) -> Result<()> {
    for case in cases {
        let d = dir.join(format!("case_{}", case.id));
        std::fs::create_dir_all(&d)?;
        save_volume(&d.join("volume"), &Volume::Scalar(case.volume.clone()))?;
        for (k, m) in case.annotations.masks().iter().enumerate() {
            save_volume(&d.join(format!("ann_{k}")), &Volume::Mask(m.clone()))?;
        }
        std::fs::write(d.join("spec.json"), serde_json::to_string_pretty(&case.spec)?)?;
    }
    Ok(())
}

/// Cases in id order.
pub fn read_dataset(dir: &Path) -> Result<Vec<SynthCase>> {
    let mut dirs: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("case_").map(|id| (id.to_string(), e.path()))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dirs.into_iter()
        .map(|(id, d)| {
            let volume = load_volume(&d.join("volume"))?.into_scalar()?;
            let mut masks = Vec::new();
            for k in 0.. {
                if !d.join(format!("ann_{k}.json")).exists() {
                    break;
                }
                masks.push(load_volume(&d.join(format!("ann_{k}")))?.into_mask()?);
            }
            let spec: NoduleSpec = serde_json::from_str(&std::fs::read_to_string(d.join("spec.json"))?)?;
            Ok(SynthCase {
                id,
                volume,
                annotations: AnnotationSet::new(masks)?,
                spec,
            })
        })
        .collect()
}

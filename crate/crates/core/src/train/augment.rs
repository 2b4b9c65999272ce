use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::field::PointPair;
use crate::volgrid::{BinaryMask, Grid, ScalarVolume};

/// Training sample: one volume, one annotator's mask and the stroke
/// simulated from that mask (absent when the mask is too small for one).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub volume: ScalarVolume,
    pub target: BinaryMask,
    pub pair: Option<PointPair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub flips: bool,
    pub translate: bool,
    pub rotate: bool,
    pub zoom: bool,
    pub max_shift: i32,
    pub max_angle_deg: f64,
    pub zoom_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flips: true,
            translate: true,
            rotate: true,
            zoom: true,
            max_shift: 4,
            max_angle_deg: 10.0,
            zoom_range: (0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flips: false,
            translate: false,
            rotate: false,
            zoom: false,
            ..Self::default()
        }
    }
}

/// Rigid-plus-zoom map about the grid center:
/// `q = c + shift + zoom * R_z(theta) * F * (p - c)`, with `F` the axis flips
/// and `theta = 90 * quarter_turns + angle_deg` degrees in the axial plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub flip: [bool; 3],
    pub shift: [i32; 3],
    pub quarter_turns: u8,
    pub angle_deg: f64,
    pub zoom: f64,
}

pub const MAX_RETRIES: usize = 5;

impl Transform {
    pub fn identity() -> Self {
        Self {
            flip: [false; 3],
            shift: [0; 3],
            quarter_turns: 0,
            angle_deg: 0.0,
            zoom: 1.0,
        }
    }

    pub fn draw(cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        // every draw happens regardless of toggles, so the stream layout is fixed
        let flip = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        let shift = [0; 3].map(|_: i32| rng.random_range(-cfg.max_shift..=cfg.max_shift));
        let quarter_turns = rng.random_range(0..4u8);
        let angle_deg = rng.random_range(-cfg.max_angle_deg..=cfg.max_angle_deg);
        let zoom = rng.random_range(cfg.zoom_range.0..=cfg.zoom_range.1);
        Self {
            flip: if cfg.flips { flip } else { [false; 3] },
            shift: if cfg.translate { shift } else { [0; 3] },
            quarter_turns: if cfg.rotate { quarter_turns } else { 0 },
            angle_deg: if cfg.rotate { angle_deg } else { 0.0 },
            zoom: if cfg.zoom { zoom } else { 1.0 },
        }
    }

    /// `(cos, sin)` of the axial rotation, exact for pure quarter turns.
    fn cos_sin(&self) -> (f64, f64) {
        let (c0, s0) = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][(self.quarter_turns % 4) as usize];
        if self.angle_deg == 0.0 {
            return (c0, s0);
        }
        let (s1, c1) = self.angle_deg.to_radians().sin_cos();
        (c0 * c1 - s0 * s1, s0 * c1 + c0 * s1)
    }

    fn is_integral(&self) -> bool {
        self.angle_deg == 0.0 && self.zoom == 1.0
    }

    pub fn apply_point(&self, p: [f64; 3], dims: [usize; 3]) -> [f64; 3] {
        let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
        let mut d: [f64; 3] = std::array::from_fn(|a| p[a] - c[a]);
        for a in 0..3 {
            if self.flip[a] {
                d[a] = -d[a];
            }
        }
        let (co, si) = self.cos_sin();
        let (y, x) = (d[1], d[2]);
        d[1] = co * y - si * x;
        d[2] = si * y + co * x;
        std::array::from_fn(|a| c[a] + self.shift[a] as f64 + self.zoom * d[a])
    }

    /// Source position of output voxel `q`.
    fn inverse(&self, q: [f64; 3], c: [f64; 3], cs: (f64, f64)) -> [f64; 3] {
        let mut d: [f64; 3] = std::array::from_fn(|a| (q[a] - c[a] - self.shift[a] as f64) / self.zoom);
        let (co, si) = cs;
        let (y, x) = (d[1], d[2]);
        d[1] = co * y + si * x;
        d[2] = -si * y + co * x;
        for a in 0..3 {
            if self.flip[a] {
                d[a] = -d[a];
            }
        }
        std::array::from_fn(|a| c[a] + d[a])
    }

    fn sources(&self, dims: [usize; 3]) -> Vec<[f64; 3]> {
        let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
        let cs = self.cos_sin();
        let n = dims[0] * dims[1] * dims[2];
        (0..n)
            .map(|i| {
                let q = [(i / (dims[1] * dims[2])) as f64, (i / dims[2] % dims[1]) as f64, (i % dims[2]) as f64];
                let s = self.inverse(q, c, cs);
                if self.is_integral() {
                    s.map(f64::round)
                } else {
                    s
                }
            })
            .collect()
    }

    /// Trilinear resampling; positions off the grid read the nearest edge.
    pub fn apply_volume(&self, v: &ScalarVolume) -> ScalarVolume {
        let dims = v.dims();
        let [_, ny, nx] = dims;
        let at = |z: usize, y: usize, x: usize| v.values[(z * ny + y) * nx + x] as f64;
        let values = self
            .sources(dims)
            .into_iter()
            .map(|s| {
                let mut lo = [0usize; 3];
                let mut hi = [0usize; 3];
                let mut f = [0f64; 3];
                for a in 0..3 {
                    let p = s[a].clamp(0.0, (dims[a] - 1) as f64);
                    lo[a] = p.floor() as usize;
                    hi[a] = (lo[a] + 1).min(dims[a] - 1);
                    f[a] = p - lo[a] as f64;
                }
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(lo[0], lo[1], lo[2]), at(lo[0], lo[1], hi[2]), f[2]);
                let c01 = lerp(at(lo[0], hi[1], lo[2]), at(lo[0], hi[1], hi[2]), f[2]);
                let c10 = lerp(at(hi[0], lo[1], lo[2]), at(hi[0], lo[1], hi[2]), f[2]);
                let c11 = lerp(at(hi[0], hi[1], lo[2]), at(hi[0], hi[1], hi[2]), f[2]);
                lerp(lerp(c00, c01, f[1]), lerp(c10, c11, f[1]), f[0]) as f32
            })
            .collect();
        Grid {
            geometry: v.geometry.clone(),
            values,
        }
    }

    /// Nearest-neighbour resampling; positions off the grid are background.
    pub fn apply_mask(&self, m: &BinaryMask) -> BinaryMask {
        let dims = m.dims();
        let values = self
            .sources(dims)
            .into_iter()
            .map(|s| {
                let r = s.map(|c| (c + 0.5).floor());
                if (0..3).all(|a| r[a] >= 0.0 && r[a] <= (dims[a] - 1) as f64) {
                    m.get(r[0] as usize, r[1] as usize, r[2] as usize)
                } else {
                    0
                }
            })
            .collect();
        Grid {
            geometry: m.geometry.clone(),
            values,
        }
    }

    pub fn apply(&self, s: &TrainSample) -> TrainSample {
        let dims = s.volume.dims();
        let clamp = |p: [f64; 3]| -> [f64; 3] { std::array::from_fn(|a| p[a].clamp(0.0, (dims[a] - 1) as f64)) };
        TrainSample {
            volume: self.apply_volume(&s.volume),
            target: self.apply_mask(&s.target),
            pair: s.pair.map(|p| PointPair {
                p0: clamp(self.apply_point(p.p0, dims)),
                p1: clamp(self.apply_point(p.p1, dims)),
            }),
        }
    }
}

/// Draw and apply a random transform. A draw that clips the target (fewer
/// than 80% of the voxels the zoom alone would give) is redrawn, up to
/// [`MAX_RETRIES`] times, then the sample is returned unchanged.
pub fn augment(sample: &TrainSample, cfg: &AugmentConfig, rng: &mut impl Rng) -> TrainSample {
    let before = sample.target.count() as f64;
    for _ in 0..MAX_RETRIES {
        let t = Transform::draw(cfg, rng);
        let out = t.apply(sample);
        if !out.target.is_blank() && out.target.count() as f64 >= 0.8 * before * t.zoom.powi(3) {
            return out;
        }
    }
    sample.clone()
}

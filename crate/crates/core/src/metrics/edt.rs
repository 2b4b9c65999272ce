//! Exact squared Euclidean distance transform (lower envelope of parabolas,
//! one separable pass per axis) on an anisotropic grid.

/// Squared distance in mm² from every voxel center to the nearest site.
pub(crate) fn squared_distance_to_sites(
    dims: [usize; 3],
    spacing: [f64; 3],
    sites: &[[usize; 3]],
) -> Vec<f64> {
    let [nz, ny, nx] = dims;
    let mut f = vec![f64::INFINITY; nz * ny * nx];
    for &[z, y, x] in sites {
        f[(z * ny + y) * nx + x] = 0.0;
    }
    let n_max = nz.max(ny).max(nx);
    let mut line = vec![0.0; n_max];
    let mut out = vec![0.0; n_max];
    let mut scratch = Envelope::new(n_max);

    // x
    for zy in 0..nz * ny {
        let row = &mut f[zy * nx..(zy + 1) * nx];
        line[..nx].copy_from_slice(row);
        scratch.transform(&line[..nx], spacing[2], &mut out[..nx]);
        row.copy_from_slice(&out[..nx]);
    }
    // y
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                line[y] = f[(z * ny + y) * nx + x];
            }
            scratch.transform(&line[..ny], spacing[1], &mut out[..ny]);
            for y in 0..ny {
                f[(z * ny + y) * nx + x] = out[y];
            }
        }
    }
    // z
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                line[z] = f[(z * ny + y) * nx + x];
            }
            scratch.transform(&line[..nz], spacing[0], &mut out[..nz]);
            for z in 0..nz {
                f[(z * ny + y) * nx + x] = out[z];
            }
        }
    }
    f
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn new(n: usize) -> Self {
        Self {
            v: vec![0; n],
            z: vec![0.0; n + 1],
        }
    }

    /// `out[q] = min_p (q*s - p*s)^2 + f[p]`
    fn transform(&mut self, f: &[f64], s: f64, out: &mut [f64]) {
        let n = f.len();
        let mut finite = (0..n).filter(|&q| f[q].is_finite());
        let Some(first) = finite.next() else {
            out.fill(f64::INFINITY);
            return;
        };
        let (v, z) = (&mut self.v, &mut self.z);
        let mut k = 0usize;
        v[0] = first;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in finite {
            let xq = q as f64 * s;
            loop {
                let p = v[k];
                let xp = p as f64 * s;
                let cross = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
                if cross <= z[k] {
                    k -= 1;
                } else {
                    k += 1;
                    v[k] = q;
                    z[k] = cross;
                    z[k + 1] = f64::INFINITY;
                    break;
                }
            }
        }
        let mut k = 0usize;
        for (q, o) in out.iter_mut().enumerate() {
            let x = q as f64 * s;
            while z[k + 1] < x {
                k += 1;
            }
            let d = x - v[k] as f64 * s;
            *o = d * d + f[v[k]];
        }
    }
}

//! Binary dilation and erosion by discrete balls.
//!
//! Both operations go through an exact squared Euclidean distance transform
//! (Felzenszwalb–Huttenlocher lower envelope, one pass per axis), so the cost
//! is linear in the number of voxels regardless of the radius. A ball of
//! radius `r` holds every integer offset with `dx²+dy²+dz² <= r²`; squared
//! distances between voxels are integers, which makes `dist² <= r²` an exact
//! membership test.
//!
//! Voxels outside the grid count as background: dilation ignores them and
//! erosion treats them as unset, which keeps `erode(m) == !dilate(!m)` exact.

use crate::volume::{Geometry, Mask};

/// Offsets of a discrete ball. Radius is in voxels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BallElement {
    radius: usize,
    offsets: Vec<[i64; 3]>,
}

impl BallElement {
    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn offsets(&self) -> &[[i64; 3]] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

pub fn ball(radius_vox: usize) -> BallElement {
    let r = radius_vox as i64;
    let mut offsets = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r * r {
                    offsets.push([dx, dy, dz]);
                }
            }
        }
    }
    BallElement {
        radius: radius_vox,
        offsets,
    }
}

pub fn dilate(m: &Mask, e: &BallElement) -> Mask {
    if e.radius == 0 {
        return m.clone();
    }
    let d2 = squared_distance_to(m.geometry(), |i| m.data()[i] != 0, false);
    let r2 = (e.radius * e.radius) as i64;
    Mask::from_bools(*m.geometry(), d2.iter().map(|&d| d <= r2))
}

pub fn erode(m: &Mask, e: &BallElement) -> Mask {
    if e.radius == 0 {
        return m.clone();
    }
    let d2 = squared_distance_to(m.geometry(), |i| m.data()[i] == 0, true);
    let r2 = (e.radius * e.radius) as i64;
    Mask::from_bools(*m.geometry(), d2.iter().map(|&d| d > r2))
}

const FAR: i64 = i64::MAX / 4;

/// Squared voxel distance from every voxel to the nearest site. With
/// `exterior_sites`, every position outside the grid is a site as well.
fn squared_distance_to(
    g: &Geometry,
    is_site: impl Fn(usize) -> bool,
    exterior_sites: bool,
) -> Vec<i64> {
    let [nx, ny, nz] = g.dims;
    let mut dist: Vec<i64> = (0..g.len())
        .map(|i| if is_site(i) { 0 } else { FAR })
        .collect();

    let longest = nx.max(ny).max(nz);
    let mut env = Envelope::with_capacity(longest + 2);
    let mut line = vec![0i64; longest];
    let mut out = vec![0i64; longest];

    for row in dist.chunks_exact_mut(nx) {
        line[..nx].copy_from_slice(row);
        env.transform(&line[..nx], &mut out[..nx], exterior_sites);
        row.copy_from_slice(&out[..nx]);
    }
    for z in 0..nz {
        for x in 0..nx {
            let base = x + nx * ny * z;
            for y in 0..ny {
                line[y] = dist[base + nx * y];
            }
            env.transform(&line[..ny], &mut out[..ny], exterior_sites);
            for y in 0..ny {
                dist[base + nx * y] = out[y];
            }
        }
    }
    let plane = nx * ny;
    for base in 0..plane {
        for z in 0..nz {
            line[z] = dist[base + plane * z];
        }
        env.transform(&line[..nz], &mut out[..nz], exterior_sites);
        for z in 0..nz {
            dist[base + plane * z] = out[z];
        }
    }
    dist
}

/// Scratch space for the 1D lower envelope of parabolas.
struct Envelope {
    sites: Vec<(i64, i64)>,
    hull: Vec<(i64, i64)>,
    bounds: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Envelope {
            sites: Vec::with_capacity(n),
            hull: Vec::with_capacity(n),
            bounds: Vec::with_capacity(n + 1),
        }
    }

    /// `out[p] = min_q (p - q)² + f[q]`, optionally with zero-valued sites at
    /// `q = -1` and `q = n`.
    fn transform(&mut self, f: &[i64], out: &mut [i64], border: bool) {
        let n = f.len() as i64;
        self.sites.clear();
        if border {
            self.sites.push((-1, 0));
        }
        self.sites.extend(
            f.iter()
                .enumerate()
                .filter(|(_, &v)| v < FAR)
                .map(|(q, &v)| (q as i64, v)),
        );
        if border {
            self.sites.push((n, 0));
        }
        if self.sites.is_empty() {
            out.fill(FAR);
            return;
        }

        // bounds[k] is the left edge of the interval where hull[k] is lowest.
        self.hull.clear();
        self.bounds.clear();
        for &(q, fq) in &self.sites {
            let mut left = f64::NEG_INFINITY;
            while let Some(&(v, fv)) = self.hull.last() {
                let s = ((fq + q * q) - (fv + v * v)) as f64 / (2 * (q - v)) as f64;
                if self.hull.len() > 1 && s <= *self.bounds.last().unwrap() {
                    self.hull.pop();
                    self.bounds.pop();
                } else {
                    left = s;
                    break;
                }
            }
            self.hull.push((q, fq));
            self.bounds.push(left);
        }

        let mut k = 0;
        for (p, slot) in out.iter_mut().enumerate() {
            let p = p as i64;
            while k + 1 < self.hull.len() && self.bounds[k + 1] < p as f64 {
                k += 1;
            }
            let (v, fv) = self.hull[k];
            *slot = (p - v) * (p - v) + fv;
        }
    }
}

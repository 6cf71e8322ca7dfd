//! Gradient-magnitude cost field, Dijkstra paths between paired extreme
//! points, and assembly of the foreground/background seed map.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{ball, dilate};
use crate::points::ExtremePointSet;
use crate::volume::{Geometry, Mask, Volume, Voxel};

/// Added to every step so paths prefer fewer hops on flat cost.
pub const STEP_EPSILON: f64 = 1e-3;

/// Neighbor order used for relaxation and tie-breaking: +x, -x, +y, -y, +z, -z.
pub(crate) const NEIGHBORS: [(usize, bool); 6] = [
    (0, true),
    (0, false),
    (1, true),
    (1, false),
    (2, true),
    (2, false),
];

#[inline]
pub(crate) fn step(dims: [usize; 3], p: Voxel, (axis, up): (usize, bool)) -> Option<Voxel> {
    let mut q = p;
    if up {
        if p[axis] + 1 >= dims[axis] {
            return None;
        }
        q[axis] += 1;
    } else {
        if p[axis] == 0 {
            return None;
        }
        q[axis] -= 1;
    }
    Some(q)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum SeedLabel {
    Unlabeled = 0,
    Foreground = 1,
    Background = 2,
}

/// Per-voxel random-walker boundary condition.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedMap {
    geometry: Geometry,
    labels: Vec<SeedLabel>,
}

impl SeedMap {
    pub fn new(geometry: Geometry, labels: Vec<SeedLabel>) -> Result<Self> {
        if labels.len() != geometry.len() {
            return Err(Error::SizeMismatch {
                expected: geometry.len(),
                found: labels.len(),
            });
        }
        Ok(SeedMap { geometry, labels })
    }

    /// Foreground wins where the two masks overlap.
    pub fn from_masks(foreground: &Mask, background: &Mask) -> Result<Self> {
        foreground.geometry().check_same_dims(background.geometry())?;
        let labels = foreground
            .data()
            .iter()
            .zip(background.data())
            .map(|(&f, &b)| match (f, b) {
                (1, _) => SeedLabel::Foreground,
                (_, 1) => SeedLabel::Background,
                _ => SeedLabel::Unlabeled,
            })
            .collect();
        Ok(SeedMap {
            geometry: *foreground.geometry(),
            labels,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn labels(&self) -> &[SeedLabel] {
        &self.labels
    }

    pub fn get(&self, p: Voxel) -> SeedLabel {
        self.labels[self.geometry.index(p)]
    }

    pub fn count(&self, label: SeedLabel) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    pub fn mask_of(&self, label: SeedLabel) -> Mask {
        Mask::from_bools(self.geometry, self.labels.iter().map(|&l| l == label))
    }

    /// `u8` codes for debug dumps: 0 unlabeled, 1 foreground, 2 background.
    pub fn to_codes(&self) -> Vec<u8> {
        self.labels.iter().map(|&l| l as u8).collect()
    }
}

/// Ordered 6-connected voxel chain from source to target.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelPath {
    pub voxels: Vec<Voxel>,
    /// Sum of `cost + STEP_EPSILON` over every voxel after the source.
    pub cost: f64,
}

impl VoxelPath {
    pub fn source(&self) -> Voxel {
        self.voxels[0]
    }

    pub fn target(&self) -> Voxel {
        *self.voxels.last().unwrap()
    }
}

/// `|∇f|` by central differences in physical units, one-sided at the borders.
pub fn gradient_magnitude(v: &Volume) -> Volume {
    let g = *v.geometry();
    let f = v.data();
    let [nx, ny, nz] = g.dims;
    let strides = [1, nx, nx * ny];
    let mut out = vec![0.0f32; g.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x, y, z];
                let i = g.index(p);
                let mut sum = 0.0f64;
                for a in 0..3 {
                    let n = g.dims[a];
                    if n < 2 {
                        continue;
                    }
                    let s = strides[a];
                    let h = g.spacing[a];
                    let d = if p[a] == 0 {
                        (f[i + s] as f64 - f[i] as f64) / h
                    } else if p[a] == n - 1 {
                        (f[i] as f64 - f[i - s] as f64) / h
                    } else {
                        (f[i + s] as f64 - f[i - s] as f64) / (2.0 * h)
                    };
                    sum += d * d;
                }
                out[i] = sum.sqrt() as f32;
            }
        }
    }
    Volume::new(g, out).expect("finite gradient of finite data")
}

#[derive(Clone, Copy, PartialEq)]
struct Queued {
    dist: f64,
    index: usize,
}

impl Eq for Queued {}

impl Ord for Queued {
    // Reversed for a min-heap; equal distances pop the lower index first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra on the 6-connected grid where entering voxel `q` costs
/// `cost[q] + STEP_EPSILON`.
pub fn shortest_path(cost: &Volume, src: Voxel, dst: Voxel) -> Result<VoxelPath> {
    let g = *cost.geometry();
    for p in [src, dst] {
        if !g.contains(p) {
            return Err(Error::InvalidArgument(format!(
                "path endpoint {p:?} outside dims {:?}",
                g.dims
            )));
        }
    }
    if let Some(i) = cost.data().iter().position(|&c| c < 0.0) {
        return Err(Error::InvalidArgument(format!("negative cost at voxel {i}")));
    }
    let w = cost.data();
    let src_i = g.index(src);
    let dst_i = g.index(dst);

    let mut dist = vec![f64::INFINITY; g.len()];
    let mut prev = vec![usize::MAX; g.len()];
    let mut done = vec![false; g.len()];
    let mut heap = BinaryHeap::new();
    dist[src_i] = 0.0;
    heap.push(Queued {
        dist: 0.0,
        index: src_i,
    });
    while let Some(Queued { dist: d, index }) = heap.pop() {
        if done[index] {
            continue;
        }
        done[index] = true;
        if index == dst_i {
            break;
        }
        let p = g.voxel(index);
        for nb in NEIGHBORS {
            let Some(q) = step(g.dims, p, nb) else {
                continue;
            };
            let j = g.index(q);
            if done[j] {
                continue;
            }
            let nd = d + (w[j] as f64 + STEP_EPSILON);
            if nd < dist[j] {
                dist[j] = nd;
                prev[j] = index;
                heap.push(Queued { dist: nd, index: j });
            }
        }
    }

    let mut voxels = vec![dst];
    let mut at = dst_i;
    while at != src_i {
        at = prev[at];
        voxels.push(g.voxel(at));
    }
    voxels.reverse();
    Ok(VoxelPath {
        voxels,
        cost: dist[dst_i],
    })
}

/// Radii (voxels) for thickening scribbles into seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedConfig {
    pub r_fg: usize,
    pub r_bg: usize,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig { r_fg: 2, r_bg: 30 }
    }
}

/// Union of the three min/max paths, traced over the gradient magnitude of the
/// `[0, 1]`-normalized volume.
pub fn scribbles(v: &Volume, pts: &ExtremePointSet) -> Result<Mask> {
    pts.validate(v.dims())?;
    let cost = gradient_magnitude(&v.normalized());
    let paths: Vec<Result<VoxelPath>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..3)
            .map(|axis| {
                let (a, b) = pts.pair(axis);
                let cost = &cost;
                s.spawn(move || shortest_path(cost, a, b))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("path worker")).collect()
    });
    let mut mask = Mask::empty(*v.geometry());
    for path in paths {
        for p in path?.voxels {
            mask.set(p, true);
        }
    }
    Ok(mask)
}

/// Foreground = scribbles dilated by `r_fg`; background = complement of the
/// scribbles dilated by `r_bg`.
pub fn build_seed_map(v: &Volume, pts: &ExtremePointSet, cfg: &SeedConfig) -> Result<SeedMap> {
    let lines = scribbles(v, pts)?;
    let fg = dilate(&lines, &ball(cfg.r_fg));
    let bg = dilate(&lines, &ball(cfg.r_bg)).complement();
    if bg.is_empty() {
        return Err(Error::EmptyBackground);
    }
    SeedMap::from_masks(&fg, &bg)
}

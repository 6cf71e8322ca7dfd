//! Extreme-point clicks: validation, the padded bounding box they imply, the
//! Gaussian click channel fed to the learner, and simulated clicks for
//! experiments with known ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BoundingBox, Geometry, Mask, Volume, Voxel};

/// Six clicked voxels: the minimum and maximum extent of the object along each axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtremePointSet {
    pub x_min: Voxel,
    pub x_max: Voxel,
    pub y_min: Voxel,
    pub y_max: Voxel,
    pub z_min: Voxel,
    pub z_max: Voxel,
}

/// On-disk form: `{"points": {"x_min": [x,y,z], ...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointsFile {
    pub points: ExtremePointSet,
}

impl ExtremePointSet {
    /// All six points equal to `p`.
    pub fn single(p: Voxel) -> Self {
        ExtremePointSet {
            x_min: p,
            x_max: p,
            y_min: p,
            y_max: p,
            z_min: p,
            z_max: p,
        }
    }

    pub fn as_array(&self) -> [Voxel; 6] {
        [
            self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max,
        ]
    }

    /// `(min, max)` point pair for `axis`.
    pub fn pair(&self, axis: usize) -> (Voxel, Voxel) {
        match axis {
            0 => (self.x_min, self.x_max),
            1 => (self.y_min, self.y_max),
            2 => (self.z_min, self.z_max),
            _ => panic!("axis {axis} out of range"),
        }
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        const NAMES: [&str; 6] = ["x_min", "x_max", "y_min", "y_max", "z_min", "z_max"];
        for (name, p) in NAMES.iter().zip(self.as_array()) {
            if (0..3).any(|a| p[a] >= dims[a]) {
                return Err(Error::InvalidPoints(format!(
                    "{name} {p:?} lies outside dims {dims:?}"
                )));
            }
        }
        for (axis, label) in ["x", "y", "z"].iter().enumerate() {
            let (lo, hi) = self.pair(axis);
            if lo[axis] > hi[axis] {
                return Err(Error::InvalidPoints(format!(
                    "{label}_min.{label} = {} exceeds {label}_max.{label} = {}",
                    lo[axis], hi[axis]
                )));
            }
        }
        Ok(())
    }

    /// Points relative to a crop origin. Every point must lie at or above `origin`.
    pub fn relative_to(&self, origin: Voxel) -> ExtremePointSet {
        let shift = |p: Voxel| [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]];
        ExtremePointSet {
            x_min: shift(self.x_min),
            x_max: shift(self.x_max),
            y_min: shift(self.y_min),
            y_max: shift(self.y_max),
            z_min: shift(self.z_min),
            z_max: shift(self.z_max),
        }
    }
}

/// Gaussian click channel settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointChannelParams {
    pub sigma_mm: f64,
}

impl Default for PointChannelParams {
    fn default() -> Self {
        PointChannelParams { sigma_mm: 3.0 }
    }
}

/// Box spanning the six points, grown by `padding_mm` converted to voxels per
/// axis and clamped to the volume.
pub fn bounding_box(pts: &ExtremePointSet, geometry: &Geometry, padding_mm: f64) -> Result<BoundingBox> {
    if !(padding_mm >= 0.0 && padding_mm.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "padding must be non-negative, got {padding_mm}"
        )));
    }
    pts.validate(geometry.dims)?;
    let all = pts.as_array();
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for a in 0..3 {
        let pad = (padding_mm / geometry.spacing[a]).round() as usize;
        let min = all.iter().map(|p| p[a]).min().unwrap();
        let max = all.iter().map(|p| p[a]).max().unwrap();
        lo[a] = min.saturating_sub(pad);
        hi[a] = (max + pad).min(geometry.dims[a] - 1);
    }
    BoundingBox::new(lo, hi)
}

/// Per voxel, the maximum over the six clicks of `exp(-d² / 2σ²)` with `d` in millimeters.
pub fn point_channel(
    geometry: &Geometry,
    pts: &ExtremePointSet,
    params: &PointChannelParams,
) -> Result<Volume> {
    if !(params.sigma_mm > 0.0 && params.sigma_mm.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {}",
            params.sigma_mm
        )));
    }
    pts.validate(geometry.dims)?;
    let mut centers: Vec<Voxel> = pts.as_array().to_vec();
    centers.sort_unstable();
    centers.dedup();

    let inv = 1.0 / (2.0 * params.sigma_mm * params.sigma_mm);
    let s = geometry.spacing;
    Volume::from_fn(*geometry, |p| {
        let mut best = 0.0f64;
        for c in &centers {
            let d2: f64 = (0..3)
                .map(|a| {
                    let d = (p[a] as f64 - c[a] as f64) * s[a];
                    d * d
                })
                .sum();
            best = best.max((-d2 * inv).exp());
        }
        best as f32
    })
}

/// Machine-generated clicks from a ground-truth mask.
///
/// Each extreme is the mask voxel with the smallest (largest) coordinate on its
/// axis, ties going to the lowest linear index. With `jitter_mm > 0` each click
/// moves to a seeded random surface voxel of the mask within `jitter_mm` of the
/// exact extreme; a pair that would violate the min/max ordering falls back to
/// the exact extremes.
pub fn simulate_extreme_points(gt: &Mask, jitter_mm: f64, rng_seed: u64) -> Result<ExtremePointSet> {
    if !(jitter_mm >= 0.0 && jitter_mm.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "jitter must be non-negative, got {jitter_mm}"
        )));
    }
    let g = *gt.geometry();
    let mut mins: [Option<Voxel>; 3] = [None; 3];
    let mut maxs: [Option<Voxel>; 3] = [None; 3];
    // Linear scan order is increasing index, so strict comparisons keep the
    // lowest-index voxel on ties.
    for (i, &v) in gt.data().iter().enumerate() {
        if v == 0 {
            continue;
        }
        let p = g.voxel(i);
        for a in 0..3 {
            if mins[a].is_none_or(|m| p[a] < m[a]) {
                mins[a] = Some(p);
            }
            if maxs[a].is_none_or(|m| p[a] > m[a]) {
                maxs[a] = Some(p);
            }
        }
    }
    let exact = match (mins, maxs) {
        ([Some(x0), Some(y0), Some(z0)], [Some(x1), Some(y1), Some(z1)]) => ExtremePointSet {
            x_min: x0,
            x_max: x1,
            y_min: y0,
            y_max: y1,
            z_min: z0,
            z_max: z1,
        },
        _ => return Err(Error::EmptyMask),
    };
    if jitter_mm == 0.0 {
        return Ok(exact);
    }

    let surface: Vec<Voxel> = (0..g.len())
        .filter(|&i| gt.data()[i] != 0)
        .map(|i| g.voxel(i))
        .filter(|&p| is_surface(gt, p))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut jitter = |center: Voxel| -> Voxel {
        let near: Vec<Voxel> = surface
            .iter()
            .copied()
            .filter(|&q| physical_dist2(&g, center, q) <= jitter_mm * jitter_mm)
            .collect();
        if near.is_empty() {
            center
        } else {
            near[rng.random_range(0..near.len())]
        }
    };
    let mut out = exact;
    for axis in 0..3 {
        let (lo, hi) = exact.pair(axis);
        let (jlo, jhi) = (jitter(lo), jitter(hi));
        let (jlo, jhi) = if jlo[axis] <= jhi[axis] { (jlo, jhi) } else { (lo, hi) };
        match axis {
            0 => (out.x_min, out.x_max) = (jlo, jhi),
            1 => (out.y_min, out.y_max) = (jlo, jhi),
            _ => (out.z_min, out.z_max) = (jlo, jhi),
        }
    }
    Ok(out)
}

fn physical_dist2(g: &Geometry, p: Voxel, q: Voxel) -> f64 {
    (0..3)
        .map(|a| {
            let d = (p[a] as f64 - q[a] as f64) * g.spacing[a];
            d * d
        })
        .sum()
}

/// Set voxel with at least one 6-neighbor unset or outside the grid.
fn is_surface(m: &Mask, p: Voxel) -> bool {
    let dims = m.dims();
    for a in 0..3 {
        if p[a] == 0 || p[a] + 1 == dims[a] {
            return true;
        }
        let mut q = p;
        q[a] -= 1;
        if !m.get(q) {
            return true;
        }
        q[a] += 2;
        if !m.get(q) {
            return true;
        }
    }
    false
}

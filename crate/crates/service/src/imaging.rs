//! Slice extraction and the run-length overlay format.
//!
//! A slice through axis `a` is laid out row-major with the lower remaining
//! axis fastest: `z` slices are `nx` wide and `ny` tall, `y` slices are `nx`
//! wide and `nz` tall, `x` slices are `ny` wide and `nz` tall. Pixel `(u, v)`
//! sits at byte `u + width * v`.

use serde::{Deserialize, Serialize};

use extremeseg::volume::{Mask, Volume, Voxel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    /// The two in-plane axes, `(u, v)`.
    pub fn plane(self) -> (usize, usize) {
        match self {
            Axis::X => (1, 2),
            Axis::Y => (0, 2),
            Axis::Z => (0, 1),
        }
    }
}

pub fn slice_shape(dims: [usize; 3], axis: Axis) -> (usize, usize) {
    let (u, v) = axis.plane();
    (dims[u], dims[v])
}

/// Voxel shown at pixel `(u, v)` of slice `index`.
pub fn pixel_to_voxel(axis: Axis, index: usize, u: usize, v: usize) -> Voxel {
    let (ua, va) = axis.plane();
    let mut p = [0; 3];
    p[axis.index()] = index;
    p[ua] = u;
    p[va] = v;
    p
}

/// Window bounds applied to every slice of `v`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Window {
    pub min: f32,
    pub max: f32,
}

impl Window {
    pub fn of(v: &Volume) -> Self {
        let (min, max) = v.min_max();
        Window { min, max }
    }

    /// Linear map of `[min, max]` onto `[0, 255]`; a flat window maps to 0.
    pub fn apply(&self, x: f32) -> u8 {
        if self.max <= self.min {
            return 0;
        }
        let t = ((x - self.min) / (self.max - self.min)).clamp(0.0, 1.0);
        (t * 255.0).round() as u8
    }
}

/// 8-bit slice bytes; `None` when `index` is out of range.
pub fn slice_bytes(v: &Volume, axis: Axis, index: usize, window: &Window) -> Option<Vec<u8>> {
    let dims = v.dims();
    if index >= dims[axis.index()] {
        return None;
    }
    let (w, h) = slice_shape(dims, axis);
    let mut out = Vec::with_capacity(w * h);
    for vv in 0..h {
        for u in 0..w {
            out.push(window.apply(v.get(pixel_to_voxel(axis, index, u, vv))));
        }
    }
    Some(out)
}

/// Foreground runs of one `z` slice as `[start, length]` pairs over the
/// in-slice index `x + nx * y`.
pub type Runs = Vec<[usize; 2]>;

pub fn encode_runs(m: &Mask) -> Vec<Runs> {
    let [nx, ny, nz] = m.dims();
    let plane = nx * ny;
    (0..nz)
        .map(|z| {
            let bits = &m.data()[z * plane..(z + 1) * plane];
            let mut runs = Vec::new();
            let mut i = 0;
            while i < plane {
                if bits[i] != 0 {
                    let start = i;
                    while i < plane && bits[i] != 0 {
                        i += 1;
                    }
                    runs.push([start, i - start]);
                } else {
                    i += 1;
                }
            }
            runs
        })
        .collect()
}

/// Inverse of [`encode_runs`] for a grid of `dims`.
pub fn decode_runs(dims: [usize; 3], slices: &[Runs]) -> Option<Vec<u8>> {
    let plane = dims[0] * dims[1];
    if slices.len() != dims[2] {
        return None;
    }
    let mut out = vec![0u8; plane * dims[2]];
    for (z, runs) in slices.iter().enumerate() {
        for &[start, len] in runs {
            if start + len > plane {
                return None;
            }
            out[z * plane + start..z * plane + start + len].fill(1);
        }
    }
    Some(out)
}

//! Synthetic ellipsoid phantoms with known ground truth.
//!
//! Each case is an axis-aligned ellipsoid of intensity `foreground` on a
//! `background` field with additive Gaussian noise, centred in a grid that
//! leaves `margin` voxels on every side of the ellipsoid's extent.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{save_mask, save_volume, Geometry, Mask, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    /// Base radius range in voxels.
    pub radius: (f64, f64),
    /// Per-axis multiplier applied to the base radius.
    pub axis_ratio: (f64, f64),
    pub noise_sigma: f64,
    pub foreground: f32,
    pub background: f32,
    pub margin: usize,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            radius: (12.0, 24.0),
            axis_ratio: (0.7, 1.3),
            noise_sigma: 0.05,
            foreground: 1.0,
            background: 0.0,
            margin: 24,
        }
    }
}

impl PhantomParams {
    fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi.is_finite();
        if !range_ok(self.radius) || !range_ok(self.axis_ratio) {
            return Err(Error::InvalidArgument(format!(
                "phantom ranges must be positive and ordered: radius {:?}, axis_ratio {:?}",
                self.radius, self.axis_ratio
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Volume,
    pub gt: Mask,
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Ellipsoid with the given semi-axes, centred at `center`, on a grid of `dims`.
pub fn ellipsoid(
    dims: [usize; 3],
    center: [f64; 3],
    semi_axes: [f64; 3],
    params: &PhantomParams,
    seed: u64,
) -> Result<Phantom> {
    params.validate()?;
    if semi_axes.iter().any(|&a| !(a > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "semi-axes must be positive, got {semi_axes:?}"
        )));
    }
    let g = Geometry::new(dims, [1.0; 3])?;
    let gt = Mask::from_fn(g, |p| {
        (0..3)
            .map(|a| ((p[a] as f64 - center[a]) / semi_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, params.noise_sigma)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut i = 0;
    let volume = Volume::from_fn(g, |_| {
        let base = if gt.data()[i] != 0 {
            params.foreground
        } else {
            params.background
        };
        i += 1;
        base + noise.sample(&mut rng) as f32
    })?;
    Ok(Phantom {
        volume,
        gt,
        center,
        semi_axes,
    })
}

/// Sphere of `radius` in the middle of a cube of side `dims`.
pub fn sphere(dims: [usize; 3], radius: f64, params: &PhantomParams, seed: u64) -> Result<Phantom> {
    let center = dims.map(|d| (d as f64 - 1.0) / 2.0);
    ellipsoid(dims, center, [radius; 3], params, seed)
}

/// Case `index` of the dataset drawn with `seed`.
pub fn random_case(params: &PhantomParams, seed: u64, index: u64) -> Result<Phantom> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let r = draw(&mut rng, params.radius);
    let semi_axes = [0; 3].map(|_| r * draw(&mut rng, params.axis_ratio));
    let mut dims = [0usize; 3];
    let mut center = [0.0f64; 3];
    for a in 0..3 {
        let half = semi_axes[a].ceil() as usize + params.margin;
        dims[a] = 2 * half + 1;
        center[a] = half as f64 + rng.random_range(-0.5..0.5);
    }
    let noise_seed = rng.random::<u64>();
    ellipsoid(dims, center, semi_axes, params, noise_seed)
}

pub fn dataset(n: usize, seed: u64, params: &PhantomParams) -> Result<Vec<Phantom>> {
    (0..n as u64).map(|i| random_case(params, seed, i)).collect()
}

pub fn case_name(index: usize) -> String {
    format!("case_{index:03}")
}

/// Writes `case_NNN` (f32 volume) and `case_NNN_gt` (u8 mask) sidecar pairs
/// into `dir`, returning the volume paths.
pub fn write_dataset(dir: &Path, phantoms: &[Phantom]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(phantoms.len());
    for (i, p) in phantoms.iter().enumerate() {
        let name = case_name(i);
        let path = dir.join(&name);
        save_volume(&p.volume, &path)?;
        save_mask(&p.gt, &dir.join(format!("{name}_gt")))?;
        written.push(path);
    }
    Ok(written)
}

//! Seeded two-label random walker on the 6-connected voxel graph.
//!
//! Edge weights are `exp(-beta * (z_i - z_j)^2) + weight_epsilon` on intensities
//! rescaled to `[0, 1]`. The foreground probability of the unseeded voxels
//! solves `L_U x_U = -B^T m`, where `L_U` is the unseeded block of the graph
//! Laplacian, `B` couples unseeded to seeded voxels and `m` is the seed
//! indicator (1 foreground, 0 background). `L_U` is symmetric positive definite
//! whenever at least one seed exists and the graph is connected, which the
//! weight floor guarantees, so Jacobi-preconditioned conjugate gradient applies.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesic::{step, SeedLabel, SeedMap, NEIGHBORS};
use crate::volume::{Mask, ProbabilityMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RwConfig {
    pub beta: f64,
    /// Relative residual `|r| / |b|` at which CG stops.
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub weight_epsilon: f64,
}

impl Default for RwConfig {
    fn default() -> Self {
        RwConfig {
            beta: 130.0,
            cg_tol: 1e-6,
            cg_max_iter: 2000,
            weight_epsilon: 1e-6,
        }
    }
}

impl RwConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.cg_tol > 0.0) {
            return Err(Error::InvalidArgument(format!("cg_tol must be > 0, got {}", self.cg_tol)));
        }
        if !(self.weight_epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight_epsilon must be > 0, got {}",
                self.weight_epsilon
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn edge_weight(zi: f64, zj: f64, beta: f64, weight_epsilon: f64) -> f64 {
    let d = zj - zi;
    (-beta * d * d).exp() + weight_epsilon
}

/// Sparse graph Laplacian in CSR form. Off-diagonal entries hold `-w_ij`;
/// the diagonal is stored separately.
#[derive(Clone, Debug)]
pub struct GraphLaplacian {
    pub diag: Vec<f64>,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl GraphLaplacian {
    pub fn n(&self) -> usize {
        self.diag.len()
    }

    /// Off-diagonal entries of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    /// Off-diagonal sum in storage order, then the diagonal.
    pub fn row_sum(&self, i: usize) -> f64 {
        let off: f64 = self.row(i).map(|(_, v)| v).sum();
        off + self.diag[i]
    }

    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut()
            .with_min_len(4096)
            .enumerate()
            .for_each(|(i, yi)| {
                let mut acc = self.diag[i] * x[i];
                for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc += self.vals[k] * x[self.cols[k]];
                }
                *yi = acc;
            });
    }
}

/// Full-grid Laplacian of the weighted 6-connected graph over `v` (normalized internally).
pub fn laplacian(v: &Volume, cfg: &RwConfig) -> GraphLaplacian {
    let z: Vec<f64> = v.normalized().data().iter().map(|&x| x as f64).collect();
    let g = *v.geometry();
    let mut lap = GraphLaplacian {
        diag: Vec::with_capacity(g.len()),
        row_ptr: vec![0],
        cols: Vec::new(),
        vals: Vec::new(),
    };
    for i in 0..g.len() {
        let p = g.voxel(i);
        let mut off = 0.0;
        for nb in NEIGHBORS {
            if let Some(q) = step(g.dims, p, nb) {
                let j = g.index(q);
                let w = edge_weight(z[i], z[j], cfg.beta, cfg.weight_epsilon);
                lap.cols.push(j);
                lap.vals.push(-w);
                off += -w;
            }
        }
        lap.diag.push(-off);
        lap.row_ptr.push(lap.cols.len());
    }
    lap
}

/// Foreground probabilities in `f64` plus solver diagnostics.
#[derive(Clone, Debug)]
pub struct RwSolution {
    pub probabilities: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

pub fn solve(v: &Volume, seeds: &SeedMap, cfg: &RwConfig) -> Result<ProbabilityMap> {
    solve_with_guess(v, seeds, cfg, None)
}

/// As [`solve`], starting CG from `guess` at the unseeded voxels.
pub fn solve_with_guess(
    v: &Volume,
    seeds: &SeedMap,
    cfg: &RwConfig,
    guess: Option<&ProbabilityMap>,
) -> Result<ProbabilityMap> {
    let sol = solve_raw(v, seeds, cfg, guess)?;
    Ok(ProbabilityMap::from_clamped(*v.geometry(), sol.probabilities))
}

pub fn solve_raw(
    v: &Volume,
    seeds: &SeedMap,
    cfg: &RwConfig,
    guess: Option<&ProbabilityMap>,
) -> Result<RwSolution> {
    cfg.validate()?;
    let g = *v.geometry();
    g.check_same_dims(seeds.geometry())?;
    if let Some(p) = guess {
        g.check_same_dims(p.geometry())?;
    }
    let labels = seeds.labels();
    if !labels.contains(&SeedLabel::Foreground) {
        return Err(Error::NoForegroundSeeds);
    }
    if !labels.contains(&SeedLabel::Background) {
        return Err(Error::NoBackgroundSeeds);
    }

    let mut probabilities: Vec<f64> = labels
        .iter()
        .map(|&l| if l == SeedLabel::Foreground { 1.0 } else { 0.0 })
        .collect();
    let unseeded: Vec<usize> = (0..g.len()).filter(|&i| labels[i] == SeedLabel::Unlabeled).collect();
    if unseeded.is_empty() {
        return Ok(RwSolution {
            probabilities,
            iterations: 0,
            residual: 0.0,
        });
    }

    let z: Vec<f64> = v.normalized().data().iter().map(|&x| x as f64).collect();
    let mut local = vec![usize::MAX; g.len()];
    for (k, &i) in unseeded.iter().enumerate() {
        local[i] = k;
    }

    // Assemble L_U and the right-hand side -B^T m.
    let n = unseeded.len();
    let mut system = GraphLaplacian {
        diag: Vec::with_capacity(n),
        row_ptr: Vec::with_capacity(n + 1),
        cols: Vec::with_capacity(6 * n),
        vals: Vec::with_capacity(6 * n),
    };
    system.row_ptr.push(0);
    let mut rhs = vec![0.0; n];
    for (k, &i) in unseeded.iter().enumerate() {
        let p = g.voxel(i);
        let mut degree = 0.0;
        for nb in NEIGHBORS {
            let Some(q) = step(g.dims, p, nb) else {
                continue;
            };
            let j = g.index(q);
            let w = edge_weight(z[i], z[j], cfg.beta, cfg.weight_epsilon);
            degree += w;
            match labels[j] {
                SeedLabel::Unlabeled => {
                    system.cols.push(local[j]);
                    system.vals.push(-w);
                }
                SeedLabel::Foreground => rhs[k] += w,
                SeedLabel::Background => {}
            }
        }
        system.diag.push(degree);
        system.row_ptr.push(system.cols.len());
    }

    let mut x: Vec<f64> = match guess {
        Some(p) => unseeded.iter().map(|&i| p.data()[i] as f64).collect(),
        None => vec![0.0; n],
    };
    let (iterations, residual) = conjugate_gradient(&system, &rhs, &mut x, cfg.cg_tol, cfg.cg_max_iter)?;
    for (k, &i) in unseeded.iter().enumerate() {
        probabilities[i] = x[k].clamp(0.0, 1.0);
    }
    Ok(RwSolution {
        probabilities,
        iterations,
        residual,
    })
}

/// Jacobi-preconditioned CG; returns `(iterations, relative residual)`.
fn conjugate_gradient(
    a: &GraphLaplacian,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<(usize, f64)> {
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        x.fill(0.0);
        return Ok((0, 0.0));
    }
    let inv_diag: Vec<f64> = a.diag.iter().map(|d| 1.0 / d).collect();

    let mut r = vec![0.0; n];
    a.matvec(x, &mut r);
    r.par_iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(ri, di)| ri * di).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rel = dot(&r, &r).sqrt() / b_norm;

    for it in 0..max_iter {
        if rel <= tol {
            return Ok((it, rel));
        }
        a.matvec(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        x.par_iter_mut()
            .zip(r.par_iter_mut())
            .zip(p.par_iter().zip(ap.par_iter()))
            .with_min_len(4096)
            .for_each(|((xi, ri), (pi, api))| {
                *xi += alpha * pi;
                *ri -= alpha * api;
            });
        z.par_iter_mut()
            .zip(r.par_iter().zip(inv_diag.par_iter()))
            .with_min_len(4096)
            .for_each(|(zi, (ri, di))| *zi = ri * di);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        p.par_iter_mut()
            .zip(z.par_iter())
            .with_min_len(4096)
            .for_each(|(pi, zi)| *pi = zi + beta * *pi);
        rel = dot(&r, &r).sqrt() / b_norm;
    }
    if rel <= tol {
        return Ok((max_iter, rel));
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: rel,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Fixed chunking keeps the reduction order independent of thread count.
    a.par_chunks(8192)
        .zip(b.par_chunks(8192))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>())
        .collect::<Vec<_>>()
        .into_iter()
        .sum()
}

/// Voxel is set iff `p >= t`.
pub fn threshold(p: &ProbabilityMap, t: f32) -> Result<Mask> {
    p.threshold(t)
}

//! Voxel grids, bounding boxes, resampling, the Dice metric and the raw+JSON
//! sidecar file format.
//!
//! All grids use an x-fastest linear layout: `index = x + nx * (y + ny * z)`.
//! A file on disk is a pair `<name>.json` (header) + `<name>.raw` (payload):
//!
//! ```json
//! {"dims":[nx,ny,nz],"spacing_mm":[sx,sy,sz],"dtype":"f32","order":"x-fastest","byte_order":"little"}
//! ```
//!
//! The payload holds exactly `nx*ny*nz` little-endian elements of `dtype`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel index triple `(x, y, z)`.
pub type Voxel = [usize; 3];

/// Grid shape and physical voxel size shared by every voxel container.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Geometry { dims, spacing })
    }

    /// Unit spacing, for tests and synthetic data.
    pub fn isotropic(dims: [usize; 3]) -> Self {
        Geometry {
            dims,
            spacing: [1.0; 3],
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, [x, y, z]: Voxel) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn voxel(&self, index: usize) -> Voxel {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    pub fn contains(&self, p: Voxel) -> bool {
        p[0] < self.dims[0] && p[1] < self.dims[1] && p[2] < self.dims[2]
    }

    /// Same geometry with different dims.
    pub fn with_dims(&self, dims: [usize; 3]) -> Self {
        Geometry {
            dims,
            spacing: self.spacing,
        }
    }

    pub fn check_same_dims(&self, other: &Geometry) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch {
                left: self.dims,
                right: other.dims,
            });
        }
        Ok(())
    }
}

/// Scalar intensity volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        check_len(&geometry, data.len())?;
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Volume { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Self {
        assert!(value.is_finite());
        Volume {
            data: vec![value; geometry.len()],
            geometry,
        }
    }

    /// Builds a volume by evaluating `f` at every voxel.
    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(Voxel) -> f32) -> Result<Self> {
        let data = (0..geometry.len()).map(|i| f(geometry.voxel(i))).collect();
        Volume::new(geometry, data)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, p: Voxel) -> f32 {
        self.data[self.geometry.index(p)]
    }

    /// `(min, max)` over all voxels.
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Linear rescale to `[0, 1]`; a constant volume maps to all zeros.
    pub fn normalized(&self) -> Volume {
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume {
            geometry: self.geometry,
            data,
        }
    }

    pub fn crop(&self, b: &BoundingBox) -> Result<Volume> {
        b.check_inside(&self.geometry)?;
        Ok(Volume {
            geometry: self.geometry.with_dims(b.dims()),
            data: crop_slice(&self.data, &self.geometry, b),
        })
    }
}

/// Binary mask with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    geometry: Geometry,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(geometry: Geometry, data: Vec<u8>) -> Result<Self> {
        check_len(&geometry, data.len())?;
        if let Some(index) = data.iter().position(|&v| v > 1) {
            return Err(Error::NotBinary {
                index,
                value: data[index],
            });
        }
        Ok(Mask { geometry, data })
    }

    pub fn empty(geometry: Geometry) -> Self {
        Mask {
            data: vec![0; geometry.len()],
            geometry,
        }
    }

    pub fn full(geometry: Geometry) -> Self {
        Mask {
            data: vec![1; geometry.len()],
            geometry,
        }
    }

    pub fn from_fn(geometry: Geometry, mut f: impl FnMut(Voxel) -> bool) -> Self {
        let data = (0..geometry.len())
            .map(|i| f(geometry.voxel(i)) as u8)
            .collect();
        Mask { geometry, data }
    }

    pub(crate) fn from_bools(geometry: Geometry, bits: impl IntoIterator<Item = bool>) -> Self {
        let data: Vec<u8> = bits.into_iter().map(u8::from).collect();
        debug_assert_eq!(data.len(), geometry.len());
        Mask { geometry, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, p: Voxel) -> bool {
        self.data[self.geometry.index(p)] != 0
    }

    pub fn set(&mut self, p: Voxel, value: bool) {
        let i = self.geometry.index(p);
        self.data[i] = value as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn complement(&self) -> Mask {
        Mask {
            geometry: self.geometry,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.geometry.check_same_dims(&other.geometry)?;
        Ok(Mask {
            geometry: self.geometry,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a | b).collect(),
        })
    }

    /// True when every voxel set here is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a <= b)
    }

    pub fn crop(&self, b: &BoundingBox) -> Result<Mask> {
        b.check_inside(&self.geometry)?;
        Ok(Mask {
            geometry: self.geometry.with_dims(b.dims()),
            data: crop_slice(&self.data, &self.geometry, b),
        })
    }

    /// Writes `src` into a copy of `self` with its origin at `lo`.
    pub fn paste(&self, src: &Mask, lo: Voxel) -> Result<Mask> {
        let mut data = self.data.clone();
        paste_slice(&mut data, &self.geometry, &src.data, &src.geometry, lo)?;
        Ok(Mask {
            geometry: self.geometry,
            data,
        })
    }

    /// Places this (cropped) mask into an empty grid of shape `full` at `lo`.
    pub fn uncrop(&self, full: Geometry, lo: Voxel) -> Result<Mask> {
        Mask::empty(full).paste(self, lo)
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            geometry: self.geometry,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Per-voxel probability in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    geometry: Geometry,
    data: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        check_len(&geometry, data.len())?;
        if let Some(index) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "probability {} at voxel {index} outside [0, 1]",
                data[index]
            )));
        }
        Ok(ProbabilityMap { geometry, data })
    }

    pub fn filled(geometry: Geometry, value: f32) -> Self {
        assert!((0.0..=1.0).contains(&value));
        ProbabilityMap {
            data: vec![value; geometry.len()],
            geometry,
        }
    }

    /// Values are clamped into `[0, 1]`; NaN becomes 0.
    pub fn from_clamped(geometry: Geometry, values: impl IntoIterator<Item = f64>) -> Self {
        let data: Vec<f32> = values
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) as f32 })
            .collect();
        assert_eq!(data.len(), geometry.len());
        ProbabilityMap { geometry, data }
    }

    pub fn from_mask(mask: &Mask) -> Self {
        ProbabilityMap {
            geometry: mask.geometry,
            data: mask.data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, p: Voxel) -> f32 {
        self.data[self.geometry.index(p)]
    }

    /// Voxel is set iff its probability is `>= t`.
    pub fn threshold(&self, t: f32) -> Result<Mask> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!(
                "threshold {t} outside [0, 1]"
            )));
        }
        Ok(Mask::from_bools(
            self.geometry,
            self.data.iter().map(|&p| p >= t),
        ))
    }

    pub fn crop(&self, b: &BoundingBox) -> Result<ProbabilityMap> {
        b.check_inside(&self.geometry)?;
        Ok(ProbabilityMap {
            geometry: self.geometry.with_dims(b.dims()),
            data: crop_slice(&self.data, &self.geometry, b),
        })
    }

    /// Places this (cropped) map into a zero-filled grid of shape `full` at `lo`.
    pub fn uncrop(&self, full: Geometry, lo: Voxel) -> Result<ProbabilityMap> {
        let mut data = vec![0.0; full.len()];
        paste_slice(&mut data, &full, &self.data, &self.geometry, lo)?;
        Ok(ProbabilityMap {
            geometry: full,
            data,
        })
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            geometry: self.geometry,
            data: self.data.clone(),
        }
    }
}

/// Axis-aligned box with inclusive corners.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: Voxel,
    pub hi: Voxel,
}

impl BoundingBox {
    pub fn new(lo: Voxel, hi: Voxel) -> Result<Self> {
        if (0..3).any(|a| lo[a] > hi[a]) {
            return Err(Error::InvalidArgument(format!(
                "bounding box lo {lo:?} exceeds hi {hi:?}"
            )));
        }
        Ok(BoundingBox { lo, hi })
    }

    pub fn full(dims: [usize; 3]) -> Self {
        BoundingBox {
            lo: [0; 3],
            hi: [dims[0] - 1, dims[1] - 1, dims[2] - 1],
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0] + 1,
            self.hi[1] - self.lo[1] + 1,
            self.hi[2] - self.lo[2] + 1,
        ]
    }

    pub fn contains(&self, p: Voxel) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    fn check_inside(&self, g: &Geometry) -> Result<()> {
        if (0..3).any(|a| self.lo[a] > self.hi[a] || self.hi[a] >= g.dims[a]) {
            return Err(Error::InvalidArgument(format!(
                "bounding box {:?}..={:?} outside dims {:?}",
                self.lo, self.hi, g.dims
            )));
        }
        Ok(())
    }
}

fn check_len(g: &Geometry, found: usize) -> Result<()> {
    if g.dims.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "dims must be positive, got {:?}",
            g.dims
        )));
    }
    if found != g.len() {
        return Err(Error::SizeMismatch {
            expected: g.len(),
            found,
        });
    }
    Ok(())
}

fn crop_slice<T: Copy>(src: &[T], g: &Geometry, b: &BoundingBox) -> Vec<T> {
    let [cx, cy, cz] = b.dims();
    let mut out = Vec::with_capacity(cx * cy * cz);
    for z in b.lo[2]..=b.hi[2] {
        for y in b.lo[1]..=b.hi[1] {
            let start = g.index([b.lo[0], y, z]);
            out.extend_from_slice(&src[start..start + cx]);
        }
    }
    out
}

fn paste_slice<T: Copy>(
    dst: &mut [T],
    dst_geom: &Geometry,
    src: &[T],
    src_geom: &Geometry,
    lo: Voxel,
) -> Result<()> {
    let [sx, sy, sz] = src_geom.dims;
    if (0..3).any(|a| lo[a] + src_geom.dims[a] > dst_geom.dims[a]) {
        return Err(Error::InvalidArgument(format!(
            "paste of {:?} at {lo:?} overflows {:?}",
            src_geom.dims, dst_geom.dims
        )));
    }
    for z in 0..sz {
        for y in 0..sy {
            let d = dst_geom.index([lo[0], lo[1] + y, lo[2] + z]);
            let s = src_geom.index([0, y, z]);
            dst[d..d + sx].copy_from_slice(&src[s..s + sx]);
        }
    }
    Ok(())
}

/// Free-function form of [`Volume::crop`].
pub fn crop(v: &Volume, b: &BoundingBox) -> Result<Volume> {
    v.crop(b)
}

/// `2|a ∩ b| / (|a| + |b|)`, with two empty masks scoring 1.
pub fn dice_score(a: &Mask, b: &Mask) -> Result<f64> {
    a.geometry.check_same_dims(&b.geometry)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += (x & y) as usize;
        total += x as usize + y as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Trilinear resampling onto an isotropic grid of `target_mm`.
///
/// Output voxel `i` along an axis samples input coordinate `i * target / spacing`
/// (voxel centers of index 0 coincide); coordinates past the last input voxel
/// clamp to it.
pub fn resample_isotropic(v: &Volume, target_mm: f64) -> Result<Volume> {
    if !(target_mm.is_finite() && target_mm > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "resampling target must be positive, got {target_mm}"
        )));
    }
    let g = v.geometry;
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        out_dims[a] = ((g.dims[a] as f64 * g.spacing[a] / target_mm).round() as usize).max(1);
    }
    let out_geom = Geometry::new(out_dims, [target_mm; 3])?;

    // Per-axis lower index and fractional weight.
    let axis_samples = |a: usize| -> Vec<(usize, usize, f64)> {
        let n = g.dims[a];
        (0..out_dims[a])
            .map(|i| {
                let pos = (i as f64 * target_mm / g.spacing[a]).clamp(0.0, (n - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let xs = axis_samples(0);
    let ys = axis_samples(1);
    let zs = axis_samples(2);

    let src = &v.data;
    let mut data = Vec::with_capacity(out_geom.len());
    for &(z0, z1, tz) in &zs {
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let at = |x, y, z| src[g.index([x, y, z])] as f64;
                let c00 = at(x0, y0, z0) * (1.0 - tx) + at(x1, y0, z0) * tx;
                let c10 = at(x0, y1, z0) * (1.0 - tx) + at(x1, y1, z0) * tx;
                let c01 = at(x0, y0, z1) * (1.0 - tx) + at(x1, y0, z1) * tx;
                let c11 = at(x0, y1, z1) * (1.0 - tx) + at(x1, y1, z1) * tx;
                let c0 = c00 * (1.0 - ty) + c10 * ty;
                let c1 = c01 * (1.0 - ty) + c11 * ty;
                data.push((c0 * (1.0 - tz) + c1 * tz) as f32);
            }
        }
    }
    Volume::new(out_geom, data)
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

/// Contents of a `.json` sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub dtype: Dtype,
    pub order: String,
    pub byte_order: String,
}

impl Header {
    fn new(g: &Geometry, dtype: Dtype) -> Self {
        Header {
            dims: g.dims,
            spacing_mm: g.spacing,
            dtype,
            order: "x-fastest".into(),
            byte_order: "little".into(),
        }
    }

    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing_mm)
    }
}

/// `(header, payload)` paths for a sidecar pair. Accepts `name`, `name.json` or `name.raw`.
pub fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut raw = base.into_os_string();
    raw.push(".raw");
    (json.into(), raw.into())
}

pub fn read_header(path: &Path) -> Result<Header> {
    let (json_path, _) = sidecar_paths(path);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: json_path.clone(),
        message: e.to_string(),
    })?;
    if header.order != "x-fastest" || header.byte_order != "little" {
        return Err(Error::Header {
            path: json_path,
            message: format!(
                "unsupported layout order={} byte_order={}",
                header.order, header.byte_order
            ),
        });
    }
    header.geometry().map_err(|e| Error::Header {
        path: json_path,
        message: e.to_string(),
    })?;
    Ok(header)
}

fn read_payload(path: &Path) -> Result<(Header, Vec<u8>)> {
    let header = read_header(path)?;
    let (_, raw_path) = sidecar_paths(path);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n = header.dims.iter().product::<usize>();
    let size = header.dtype.size();
    if bytes.len() != n * size {
        return Err(Error::SizeMismatch {
            expected: n,
            found: bytes.len() / size,
        });
    }
    Ok((header, bytes))
}

fn write_pair(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let (json_path, raw_path) = sidecar_paths(path);
    let text = serde_json::to_string(header).expect("header serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&raw_path, payload).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Loads an intensity volume; `u8` payloads are widened to `f32`.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let (header, bytes) = read_payload(path)?;
    let data = match header.dtype {
        Dtype::F32 => decode_f32(&bytes),
        Dtype::U8 => bytes.iter().map(|&b| b as f32).collect(),
    };
    Volume::new(header.geometry()?, data)
}

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    write_pair(path, &Header::new(&v.geometry, Dtype::F32), &encode_f32(&v.data))
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let (header, bytes) = read_payload(path)?;
    if header.dtype != Dtype::U8 {
        return Err(Error::Header {
            path: sidecar_paths(path).0,
            message: "masks must use dtype u8".into(),
        });
    }
    Mask::new(header.geometry()?, bytes)
}

pub fn save_mask(m: &Mask, path: &Path) -> Result<()> {
    write_pair(path, &Header::new(&m.geometry, Dtype::U8), &m.data)
}

pub fn load_probability(path: &Path) -> Result<ProbabilityMap> {
    let v = load_volume(path)?;
    ProbabilityMap::new(v.geometry, v.data)
}

pub fn save_probability(p: &ProbabilityMap, path: &Path) -> Result<()> {
    write_pair(path, &Header::new(&p.geometry, Dtype::F32), &encode_f32(&p.data))
}

/// Writes a `u8` label volume (any values), e.g. seed-map debug dumps.
pub fn save_labels(geometry: &Geometry, labels: &[u8], path: &Path) -> Result<()> {
    check_len(geometry, labels.len())?;
    write_pair(path, &Header::new(geometry, Dtype::U8), labels)
}

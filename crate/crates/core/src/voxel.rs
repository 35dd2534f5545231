//! The dense voxel feature field and its samplers: trilinear interpolation
//! with hand-derived gradients, lift-splat encoding of camera features, and
//! extraction of the target voxels traversed by a ray batch.
//!
//! Features live in a C × Z × H × W array over a metric box; W counts x
//! voxels, H counts y, Z counts z. The interpolation lattice sits at voxel
//! centers and clamps in the outer half-voxel shell, so sampling is defined
//! and continuous on the whole box.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::io::parse_error;
use crate::rays::AnchorSet;

/// Metric bounds and voxel counts of the feature field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
    /// Voxel counts along (x, y, z) = (W, H, Z).
    pub counts: [usize; 3],
}

impl Default for GridGeometry {
    /// Street-scale box: x, y ∈ [−40, 40] m, z ∈ [−1, 5.4] m at 0.4 m
    /// voxels, i.e. W = H = 200, Z = 16.
    fn default() -> Self {
        Self {
            min: Vector3::new(-40.0, -40.0, -1.0),
            max: Vector3::new(40.0, 40.0, 5.4),
            counts: [200, 200, 16],
        }
    }
}

impl GridGeometry {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>, counts: [usize; 3]) -> Result<Self> {
        let g = Self { min, max, counts };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            if !(self.min[axis] < self.max[axis]) {
                return Err(Error::Config(format!(
                    "grid bounds must satisfy min < max on axis {axis}: {} vs {}",
                    self.min[axis], self.max[axis]
                )));
            }
            if self.counts[axis] == 0 {
                return Err(Error::Config(format!("zero voxel count on axis {axis}")));
            }
        }
        Ok(())
    }

    pub fn voxel_size(&self) -> Vector3<f64> {
        Vector3::new(
            (self.max.x - self.min.x) / self.counts[0] as f64,
            (self.max.y - self.min.y) / self.counts[1] as f64,
            (self.max.z - self.min.z) / self.counts[2] as f64,
        )
    }

    pub fn voxel_count(&self) -> usize {
        self.counts[0] * self.counts[1] * self.counts[2]
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        (0..3).all(|a| x[a] >= self.min[a] && x[a] < self.max[a])
    }

    /// Voxel holding `x` under half-open intervals
    /// [min + i·vs, min + (i+1)·vs); points on a shared face belong to the
    /// higher-index voxel.
    pub fn voxel_of(&self, x: &Vector3<f64>) -> Option<[usize; 3]> {
        let vs = self.voxel_size();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let u = ((x[a] - self.min[a]) / vs[a]).floor();
            if u < 0.0 || u >= self.counts[a] as f64 {
                return None;
            }
            idx[a] = u as usize;
        }
        Some(idx)
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Vector3<f64> {
        let vs = self.voxel_size();
        Vector3::new(
            self.min.x + (idx[0] as f64 + 0.5) * vs.x,
            self.min.y + (idx[1] as f64 + 0.5) * vs.y,
            self.min.z + (idx[2] as f64 + 0.5) * vs.z,
        )
    }

    /// Flat spatial index (z-major, then y, then x).
    #[inline]
    pub fn spatial_index(&self, idx: [usize; 3]) -> usize {
        (idx[2] * self.counts[1] + idx[1]) * self.counts[0] + idx[0]
    }
}

/// Dense C-major feature field over a [`GridGeometry`].
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub geometry: GridGeometry,
    pub channels: usize,
    /// Index ((c·Z + iz)·H + iy)·W + ix.
    pub features: Vec<f64>,
}

impl VoxelGrid {
    pub fn zeros(geometry: GridGeometry, channels: usize) -> Self {
        let len = channels * geometry.voxel_count();
        Self {
            geometry,
            channels,
            features: vec![0.0; len],
        }
    }

    #[inline]
    pub fn feature_index(&self, c: usize, idx: [usize; 3]) -> usize {
        c * self.geometry.voxel_count() + self.geometry.spatial_index(idx)
    }

    #[inline]
    pub fn feature_at(&self, c: usize, idx: [usize; 3]) -> f64 {
        self.features[self.feature_index(c, idx)]
    }

    /// Quantize every feature to its nearest f32, in place. Keeps the
    /// in-memory state identical to what the f32 disk segment round-trips.
    pub fn snap_to_f32(&mut self) {
        for v in &mut self.features {
            *v = *v as f32 as f64;
        }
    }
}

/// Interpolation cell for a point: base/next lattice indices, fractional
/// position, and the derivative scale per axis (0 where clamped or where
/// the axis has a single voxel plane).
struct Cell {
    i0: [usize; 3],
    i1: [usize; 3],
    t: [f64; 3],
    dt_dx: [f64; 3],
}

fn locate(geometry: &GridGeometry, x: &Vector3<f64>) -> Option<Cell> {
    if !geometry.contains(x) {
        return None;
    }
    let vs = geometry.voxel_size();
    let mut cell = Cell {
        i0: [0; 3],
        i1: [0; 3],
        t: [0.0; 3],
        dt_dx: [0.0; 3],
    };
    for a in 0..3 {
        let n = geometry.counts[a];
        // Lattice coordinate: u = i at the center of voxel i.
        let u = (x[a] - geometry.min[a]) / vs[a] - 0.5;
        let clamped = u.clamp(0.0, (n - 1) as f64);
        if n == 1 {
            continue;
        }
        let i0 = (clamped.floor() as usize).min(n - 2);
        cell.i0[a] = i0;
        cell.i1[a] = i0 + 1;
        cell.t[a] = clamped - i0 as f64;
        cell.dt_dx[a] = if clamped == u { 1.0 / vs[a] } else { 0.0 };
    }
    Some(cell)
}

impl Cell {
    /// Corner lattice index and weight for corner id 0..8 (bit a set →
    /// upper index along axis a).
    fn corner(&self, id: usize) -> ([usize; 3], f64) {
        let mut idx = [0usize; 3];
        let mut w = 1.0;
        for a in 0..3 {
            if id >> a & 1 == 1 {
                idx[a] = self.i1[a];
                w *= self.t[a];
            } else {
                idx[a] = self.i0[a];
                w *= 1.0 - self.t[a];
            }
        }
        (idx, w)
    }
}

/// Result of sampling the grid at a point.
#[derive(Debug, Clone)]
pub struct TrilinearSample {
    /// Interpolated feature, `channels` long; zeros when out of bounds.
    pub features: Vec<f64>,
    pub in_bounds: bool,
    /// The 8 (lattice index, weight) pairs; empty when out of bounds.
    pub corners: Vec<([usize; 3], f64)>,
}

/// Trilinear interpolation over voxel centers; out-of-bounds points yield
/// a zero feature and contribute nothing.
pub fn trilinear_sample(grid: &VoxelGrid, x: &Vector3<f64>) -> TrilinearSample {
    let Some(cell) = locate(&grid.geometry, x) else {
        return TrilinearSample {
            features: vec![0.0; grid.channels],
            in_bounds: false,
            corners: Vec::new(),
        };
    };
    let mut features = vec![0.0; grid.channels];
    let mut corners = Vec::with_capacity(8);
    for id in 0..8 {
        let (idx, w) = cell.corner(id);
        corners.push((idx, w));
        if w != 0.0 {
            for (c, f) in features.iter_mut().enumerate() {
                *f += w * grid.feature_at(c, idx);
            }
        }
    }
    TrilinearSample {
        features,
        in_bounds: true,
        corners,
    }
}

/// Backward of [`trilinear_sample`]: scatters `upstream` into the corner
/// features of `grad_features` (same layout as `grid.features`) and returns
/// the gradient with respect to the point.
pub fn trilinear_backward(
    grid: &VoxelGrid,
    x: &Vector3<f64>,
    upstream: &[f64],
    grad_features: &mut [f64],
) -> Vector3<f64> {
    debug_assert_eq!(upstream.len(), grid.channels);
    debug_assert_eq!(grad_features.len(), grid.features.len());
    let Some(cell) = locate(&grid.geometry, x) else {
        return Vector3::zeros();
    };
    let mut grad_x = Vector3::zeros();
    for id in 0..8 {
        let (idx, w) = cell.corner(id);
        // dot(feature at this corner, upstream)
        let mut fdot = 0.0;
        for (c, u) in upstream.iter().enumerate() {
            grad_features[grid.feature_index(c, idx)] += w * u;
            fdot += grid.feature_at(c, idx) * u;
        }
        for a in 0..3 {
            if cell.dt_dx[a] == 0.0 {
                continue;
            }
            // dW/dt_a: drop axis a from the weight product, signed by the bit.
            let mut partial = 1.0;
            for b in 0..3 {
                if b == a {
                    continue;
                }
                partial *= if id >> b & 1 == 1 {
                    cell.t[b]
                } else {
                    1.0 - cell.t[b]
                };
            }
            let sign = if id >> a & 1 == 1 { 1.0 } else { -1.0 };
            grad_x[a] += sign * partial * cell.dt_dx[a] * fdot;
        }
    }
    grad_x
}

/// Channel-major feature image: index (c·H + y)·W + x.
#[derive(Debug, Clone)]
pub struct FeatureImage {
    pub width: u32,
    pub height: u32,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureImage {
    pub fn zeros(width: u32, height: u32, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; channels * (width * height) as usize],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, x: u32, y: u32) -> usize {
        (c * self.height as usize + y as usize) * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, c: usize, x: u32, y: u32) -> f64 {
        self.data[self.index(c, x, y)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: u32, y: u32, v: f64) {
        let i = self.index(c, x, y);
        self.data[i] = v;
    }
}

/// Per-pixel categorical distribution over metric depth bins, bin-major:
/// index (b·H + y)·W + x.
#[derive(Debug, Clone)]
pub struct DepthDistribution {
    pub width: u32,
    pub height: u32,
    /// Metric depth of each bin.
    pub bin_depths: Vec<f64>,
    pub data: Vec<f64>,
}

impl DepthDistribution {
    pub fn uniform(width: u32, height: u32, bin_depths: Vec<f64>) -> Self {
        let bins = bin_depths.len();
        let p = 1.0 / bins as f64;
        Self {
            width,
            height,
            bin_depths,
            data: vec![p; bins * (width * height) as usize],
        }
    }

    #[inline]
    pub fn index(&self, b: usize, x: u32, y: u32) -> usize {
        (b * self.height as usize + y as usize) * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, b: usize, x: u32, y: u32) -> f64 {
        self.data[self.index(b, x, y)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, x: u32, y: u32, v: f64) {
        let i = self.index(b, x, y);
        self.data[i] = v;
    }

    pub fn validate(&self) -> Result<()> {
        let bins = self.bin_depths.len();
        if self.data.len() != bins * (self.width * self.height) as usize {
            return Err(Error::Config("depth distribution shape mismatch".into()));
        }
        for y in 0..self.height {
            for x in 0..self.width {
                let mut sum = 0.0;
                for b in 0..bins {
                    let p = self.get(b, x, y);
                    if p < 0.0 {
                        return Err(Error::Config(format!(
                            "negative depth probability at pixel ({x}, {y}) bin {b}"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Config(format!(
                        "depth probabilities at pixel ({x}, {y}) sum to {sum}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Lift-splat encoding: every (pixel, bin) scatters feature × probability
/// into the voxel holding its frustum point; voxel sums are normalized by
/// their contribution count. Contributions iterate (camera, row-major
/// pixel, bin ascending), so accumulation order is deterministic.
pub fn lift_splat_encode(
    images: &[FeatureImage],
    depths: &[DepthDistribution],
    cameras: &[Camera],
    geometry: &GridGeometry,
) -> Result<VoxelGrid> {
    geometry.validate()?;
    if images.len() != cameras.len() || depths.len() != cameras.len() {
        return Err(Error::Config(format!(
            "camera/image/depth count mismatch: {} cameras, {} images, {} depth maps",
            cameras.len(),
            images.len(),
            depths.len()
        )));
    }
    let channels = images.first().map_or(0, |im| im.channels);
    let mut grid = VoxelGrid::zeros(geometry.clone(), channels);
    let mut counts = vec![0u64; geometry.voxel_count()];
    for ((image, dist), camera) in images.iter().zip(depths).zip(cameras) {
        if image.channels != channels {
            return Err(Error::Config("inconsistent feature channel counts".into()));
        }
        if image.width != camera.width
            || image.height != camera.height
            || dist.width != camera.width
            || dist.height != camera.height
        {
            return Err(Error::Config(format!(
                "feature/depth image size must match camera {}x{}",
                camera.width, camera.height
            )));
        }
        dist.validate()?;
        for y in 0..image.height {
            for x in 0..image.width {
                let pixel = nalgebra::Vector2::new(x as f64, y as f64);
                for (b, &depth) in dist.bin_depths.iter().enumerate() {
                    let Ok(point) = camera.unproject_pixel(&pixel, depth) else {
                        continue;
                    };
                    let Some(idx) = geometry.voxel_of(&point) else {
                        continue;
                    };
                    let p = dist.get(b, x, y);
                    for c in 0..channels {
                        let fi = grid.feature_index(c, idx);
                        grid.features[fi] += image.get(c, x, y) * p;
                    }
                    counts[geometry.spatial_index(idx)] += 1;
                }
            }
        }
    }
    for c in 0..channels {
        let base = c * geometry.voxel_count();
        for (s, &n) in counts.iter().enumerate() {
            if n > 0 {
                grid.features[base + s] /= n as f64;
            }
        }
    }
    Ok(grid)
}

/// The voxels containing at least one anchor, with their member anchors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetVoxels {
    /// Ascending spatial order.
    pub voxels: Vec<[usize; 3]>,
    /// Flat anchor indices per voxel, ascending, non-empty.
    pub members: Vec<Vec<usize>>,
}

impl TargetVoxels {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

/// Assign each in-bounds anchor to its (half-open) voxel and list the
/// voxels that received at least one.
pub fn extract_target_voxels(anchors: &AnchorSet, geometry: &GridGeometry) -> TargetVoxels {
    let mut map: BTreeMap<[usize; 3], Vec<usize>> = BTreeMap::new();
    for (i, pos) in anchors.positions.iter().enumerate() {
        if let Some(idx) = geometry.voxel_of(pos) {
            map.entry(idx).or_default().push(i);
        }
    }
    let mut voxels = Vec::with_capacity(map.len());
    let mut members = Vec::with_capacity(map.len());
    for (idx, list) in map {
        voxels.push(idx);
        members.push(list);
    }
    TargetVoxels { voxels, members }
}

pub const GRID_SEGMENT_VERSION: u32 = 1;

/// Serialize as the little-endian grid segment: magic "GPVX", version,
/// C Z H W, bounds, then C·Z·H·W f32 features in C-major order.
pub fn encode_grid_segment(grid: &VoxelGrid) -> Vec<u8> {
    let g = &grid.geometry;
    let mut out = Vec::with_capacity(72 + grid.features.len() * 4);
    out.extend_from_slice(b"GPVX");
    out.extend_from_slice(&GRID_SEGMENT_VERSION.to_le_bytes());
    for dim in [grid.channels, g.counts[2], g.counts[1], g.counts[0]] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in [g.min.x, g.min.y, g.min.z, g.max.x, g.max.y, g.max.z] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for f in &grid.features {
        out.extend_from_slice(&(*f as f32).to_le_bytes());
    }
    out
}

/// Inverse of [`encode_grid_segment`]; returns the grid and the number of
/// bytes consumed so the segment can be embedded in a larger file.
pub fn decode_grid_segment(bytes: &[u8]) -> Result<(VoxelGrid, usize)> {
    let need = |n: usize| {
        if bytes.len() < n {
            Err(parse_error(
                "gpvx",
                format!("segment truncated: {} bytes, need {n}", bytes.len()),
            ))
        } else {
            Ok(())
        }
    };
    need(72)?;
    if &bytes[..4] != b"GPVX" {
        return Err(parse_error("gpvx", "bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != GRID_SEGMENT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: GRID_SEGMENT_VERSION,
        });
    }
    let c = u32_at(8) as usize;
    let z = u32_at(12) as usize;
    let h = u32_at(16) as usize;
    let w = u32_at(20) as usize;
    let min = Vector3::new(f64_at(24), f64_at(32), f64_at(40));
    let max = Vector3::new(f64_at(48), f64_at(56), f64_at(64));
    let geometry = GridGeometry::new(min, max, [w, h, z])
        .map_err(|e| parse_error("gpvx", format!("bad geometry: {e}")))?;
    let count = c * z * h * w;
    let total = 72 + count * 4;
    need(total)?;
    let features = bytes[72..total]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    Ok((
        VoxelGrid {
            geometry,
            channels: c,
            features,
        },
        total,
    ))
}

//! MAE-style random patch masks validated against projected LiDAR depth.
//!
//! A patch survives validation only if enough LiDAR points project into its
//! pixel rectangle with depth inside the configured range; everything
//! downstream (rays, anchors, supervision) runs on the surviving patches.

use std::collections::HashMap;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::io::ImageRgb;

/// Patch masking hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Square patch edge, pixels.
    pub patch_size: u32,
    /// Fraction of whole patches to mask, in (0, 1).
    pub mask_ratio: f64,
    /// Closed depth interval [a, b] in meters a supporting point must hit.
    pub depth_range: [f64; 2],
    /// Minimum number of in-range supporting points per valid patch.
    pub min_support: usize,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            mask_ratio: 0.3,
            depth_range: [0.0, 50.0],
            min_support: 1,
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("patch_size must be >= 1".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio must lie in (0, 1), got {}",
                self.mask_ratio
            )));
        }
        let [a, b] = self.depth_range;
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::Config(format!(
                "depth_range must satisfy a < b, got [{a}, {b}]"
            )));
        }
        if self.min_support == 0 {
            return Err(Error::Config("min_support must be >= 1".into()));
        }
        Ok(())
    }
}

/// Random patch mask for one camera image. Patches are (row, col) cells of
/// the whole-patch grid; partial edge patches never enter the candidate set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchMask {
    pub camera_index: usize,
    pub patch_size: u32,
    /// Masked cells, sorted by (row, col), unique.
    pub patches: Vec<(u32, u32)>,
}

/// A LiDAR point projected into an image: continuous pixel plus view depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub pixel: Vector2<f64>,
    pub depth: f64,
}

/// Masked patch that passed depth validation, with its supporting points.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidPatch {
    pub row: u32,
    pub col: u32,
    /// In-range supporting projections, in input order.
    pub support: Vec<ProjectedPoint>,
}

/// The validated subset of a [`PatchMask`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidMask {
    pub camera_index: usize,
    pub patch_size: u32,
    pub patches: Vec<ValidPatch>,
}

impl ValidMask {
    /// Top-left pixel of a patch cell.
    pub fn patch_origin(&self, patch: &ValidPatch) -> (u32, u32) {
        (patch.col * self.patch_size, patch.row * self.patch_size)
    }
}

/// LiDAR returns in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LidarCloud {
    pub points: Vec<Vector3<f64>>,
}

impl LidarCloud {
    pub fn new(points: Vec<Vector3<f64>>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
                return Err(Error::Config(format!("non-finite LiDAR point at index {i}")));
            }
        }
        Ok(Self { points })
    }

    pub fn read_ply(path: &std::path::Path) -> Result<Self> {
        Self::new(crate::io::read_ply(path)?)
    }

    pub fn write_ply(&self, path: &std::path::Path, format: crate::io::PlyFormat) -> Result<()> {
        crate::io::write_ply(path, &self.points, format)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Count of whole patches along (rows, cols) for an image size.
pub fn patch_grid(width: u32, height: u32, patch_size: u32) -> (u32, u32) {
    (height / patch_size, width / patch_size)
}

/// Draw `round(mask_ratio * total)` distinct patches uniformly at random.
pub fn generate_patch_mask(
    camera_index: usize,
    width: u32,
    height: u32,
    cfg: &MaskConfig,
) -> Result<PatchMask> {
    cfg.validate()?;
    let (rows, cols) = patch_grid(width, height, cfg.patch_size);
    if rows == 0 || cols == 0 {
        return Err(Error::ImageTooSmall {
            width,
            height,
            patch_size: cfg.patch_size,
        });
    }
    let total = (rows * cols) as usize;
    let target = (cfg.mask_ratio * total as f64).round() as usize;
    // Partial Fisher-Yates: the first `target` slots end up a uniform
    // draw without replacement.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut indices: Vec<u32> = (0..total as u32).collect();
    for i in 0..target {
        let j = rng.gen_range(i..total);
        indices.swap(i, j);
    }
    let mut patches: Vec<(u32, u32)> = indices[..target]
        .iter()
        .map(|&i| (i / cols, i % cols))
        .collect();
    patches.sort_unstable();
    Ok(PatchMask {
        camera_index,
        patch_size: cfg.patch_size,
        patches,
    })
}

/// Project a cloud into a camera, keeping points in front of it that land
/// inside the image. Output order follows input order.
pub fn project_lidar(cloud: &LidarCloud, camera: &Camera) -> Vec<ProjectedPoint> {
    let mut out = Vec::new();
    for p in &cloud.points {
        if let Ok((pixel, depth)) = camera.project_point(p) {
            if camera.contains_pixel(&pixel) {
                out.push(ProjectedPoint { pixel, depth });
            }
        }
    }
    out
}

/// Patch cell containing a continuous pixel position, or None if the
/// position precedes pixel (0, 0). Pixel x covers [x - 0.5, x + 0.5).
fn patch_cell(pixel: &Vector2<f64>, patch_size: u32) -> Option<(u32, u32)> {
    let p = patch_size as f64;
    let col = ((pixel.x + 0.5) / p).floor();
    let row = ((pixel.y + 0.5) / p).floor();
    if col < 0.0 || row < 0.0 {
        return None;
    }
    Some((row as u32, col as u32))
}

/// Keep the patches supported by at least `min_support` projections with
/// depth in the closed interval [a, b].
pub fn validate_mask(
    mask: &PatchMask,
    projections: &[ProjectedPoint],
    cfg: &MaskConfig,
) -> ValidMask {
    let [a, b] = cfg.depth_range;
    let mut support: HashMap<(u32, u32), Vec<ProjectedPoint>> =
        mask.patches.iter().map(|&cell| (cell, Vec::new())).collect();
    for proj in projections {
        if proj.depth < a || proj.depth > b {
            continue;
        }
        if let Some(cell) = patch_cell(&proj.pixel, mask.patch_size) {
            if let Some(list) = support.get_mut(&cell) {
                list.push(*proj);
            }
        }
    }
    let patches = mask
        .patches
        .iter()
        .filter_map(|&(row, col)| {
            let list = support.remove(&(row, col)).unwrap_or_default();
            (list.len() >= cfg.min_support).then(|| ValidPatch {
                row,
                col,
                support: list,
            })
        })
        .collect();
    ValidMask {
        camera_index: mask.camera_index,
        patch_size: mask.patch_size,
        patches,
    }
}

/// Debug view of the masking stage: every masked patch is blacked out, and
/// patches that passed validation get a green one-pixel outline. Pixels
/// outside masked patches are copied bit-identically.
pub fn mask_visualization(image: &ImageRgb, mask: &PatchMask, valid: &ValidMask) -> ImageRgb {
    const OUTLINE: [f64; 3] = [0.0, 1.0, 0.0];
    let mut out = image.clone();
    let p = mask.patch_size;
    for &(row, col) in &mask.patches {
        for y in row * p..(row + 1) * p {
            for x in col * p..(col + 1) * p {
                if x < out.width && y < out.height {
                    out.set(x, y, [0.0; 3]);
                }
            }
        }
    }
    for patch in &valid.patches {
        let (x0, y0) = (patch.col * p, patch.row * p);
        for y in y0..y0 + p {
            for x in x0..x0 + p {
                let edge = x == x0 || y == y0 || x == x0 + p - 1 || y == y0 + p - 1;
                if edge && x < out.width && y < out.height {
                    out.set(x, y, OUTLINE);
                }
            }
        }
    }
    out
}

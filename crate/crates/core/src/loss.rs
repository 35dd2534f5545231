//! Masked reconstruction loss: per-ray RGB and depth L1 plus per-voxel
//! occupancy L1, each count-normalized and weighted, with the L1
//! subgradient as the backward pass.

use std::io::Write;

use crate::error::{Error, Result};
use crate::io::ImageRgb;
use crate::rays::RayBatch;
use crate::render::RenderUpstream;
use crate::voxel::TargetVoxels;

/// Term weights (λ_RGB, λ_Depth, λ_Occ).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub occupancy: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 10.0,
            depth: 1.0,
            occupancy: 10.0,
        }
    }
}

/// Ground truth the reconstruction is scored against.
#[derive(Debug, Clone)]
pub struct ReconTargets {
    /// Per-ray source-image color.
    pub colors: Vec<[f64; 3]>,
    /// Per-ray LiDAR depth; `None` where the ray is depth-unsupported.
    pub depths: Vec<Option<f64>>,
    /// Per-target-voxel occupancy in [0, 1].
    pub occupancy: Vec<f64>,
}

/// Look up per-ray colors and depths and per-voxel occupancy for a batch.
///
/// `occupancy_of` maps a voxel coordinate (x, y, z) to its ground-truth
/// occupancy.
pub fn build_targets(
    batch: &RayBatch,
    images: &[ImageRgb],
    target_voxels: &TargetVoxels,
    occupancy_of: impl Fn([usize; 3]) -> f64,
) -> Result<ReconTargets> {
    let mut colors = Vec::with_capacity(batch.len());
    let mut depths = Vec::with_capacity(batch.len());
    for ray in &batch.rays {
        let image = images.get(ray.camera_index).ok_or_else(|| {
            Error::Config(format!("ray references missing camera {}", ray.camera_index))
        })?;
        if ray.pixel.0 >= image.width || ray.pixel.1 >= image.height {
            return Err(Error::Config(format!(
                "ray pixel {:?} outside {}x{} image",
                ray.pixel, image.width, image.height
            )));
        }
        colors.push(image.get(ray.pixel.0, ray.pixel.1));
        depths.push(ray.lidar_depth);
    }
    let occupancy = target_voxels.voxels.iter().map(|&v| occupancy_of(v)).collect();
    Ok(ReconTargets {
        colors,
        depths,
        occupancy,
    })
}

/// Weighted loss terms; each already carries its λ/count factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub rgb: f64,
    pub depth: f64,
    pub occupancy: f64,
    /// Rays scored by the RGB term.
    pub rgb_count: usize,
    /// Depth-supported rays scored by the depth term.
    pub depth_count: usize,
    /// Target voxels scored by the occupancy term.
    pub occupancy_count: usize,
}

fn finite(value: f64, term: &'static str, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss { term, step })
    }
}

/// L = λ_RGB/N Σ‖C−Ĉ‖₁ + λ_Depth/N′ Σ|D−D̂| + λ_Occ/N_v Σ|O−Ô|, with the
/// RGB residual a channel mean and each sum taken in ascending ray or
/// voxel order. A term with zero count contributes exactly 0. `step` only
/// labels non-finite errors.
pub fn total_loss(
    colors: &[[f64; 3]],
    depths: &[f64],
    occupancy: &[f64],
    targets: &ReconTargets,
    weights: &LossWeights,
    step: u64,
) -> Result<LossBreakdown> {
    if colors.len() != targets.colors.len()
        || depths.len() != targets.depths.len()
        || occupancy.len() != targets.occupancy.len()
    {
        return Err(Error::Config("loss input/target shape mismatch".into()));
    }
    let rgb_count = colors.len();
    let mut rgb_sum = 0.0;
    for (got, want) in colors.iter().zip(&targets.colors) {
        let mut residual = 0.0;
        for k in 0..3 {
            residual += (want[k] - got[k]).abs();
        }
        rgb_sum += residual / 3.0;
    }
    let rgb = if rgb_count > 0 {
        weights.rgb * rgb_sum / rgb_count as f64
    } else {
        0.0
    };

    let mut depth_count = 0usize;
    let mut depth_sum = 0.0;
    for (got, want) in depths.iter().zip(&targets.depths) {
        if let Some(want) = want {
            depth_count += 1;
            depth_sum += (want - got).abs();
        }
    }
    let depth = if depth_count > 0 {
        weights.depth * depth_sum / depth_count as f64
    } else {
        0.0
    };

    let occupancy_count = occupancy.len();
    let mut occ_sum = 0.0;
    for (got, want) in occupancy.iter().zip(&targets.occupancy) {
        occ_sum += (want - got).abs();
    }
    let occupancy_term = if occupancy_count > 0 {
        weights.occupancy * occ_sum / occupancy_count as f64
    } else {
        0.0
    };

    let rgb = finite(rgb, "rgb", step)?;
    let depth = finite(depth, "depth", step)?;
    let occupancy_term = finite(occupancy_term, "occupancy", step)?;
    let total = finite(rgb + depth + occupancy_term, "total", step)?;
    Ok(LossBreakdown {
        total,
        rgb,
        depth,
        occupancy: occupancy_term,
        rgb_count,
        depth_count,
        occupancy_count,
    })
}

/// L1 subgradient of `total_loss` with respect to the reconstruction:
/// sign of the residual scaled by the term's λ/count (RGB also by 1/3 for
/// the channel mean), and exactly 0 at ties.
pub fn loss_backward(
    colors: &[[f64; 3]],
    depths: &[f64],
    occupancy: &[f64],
    targets: &ReconTargets,
    weights: &LossWeights,
) -> Result<RenderUpstream> {
    if colors.len() != targets.colors.len()
        || depths.len() != targets.depths.len()
        || occupancy.len() != targets.occupancy.len()
    {
        return Err(Error::Config("loss input/target shape mismatch".into()));
    }
    let mut upstream = RenderUpstream::zeros(colors.len(), occupancy.len());
    let sign = |residual: f64| {
        if residual > 0.0 {
            1.0
        } else if residual < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    if !colors.is_empty() && weights.rgb != 0.0 {
        let coeff = weights.rgb / (3.0 * colors.len() as f64);
        for (i, (got, want)) in colors.iter().zip(&targets.colors).enumerate() {
            for k in 0..3 {
                upstream.colors[i][k] = coeff * sign(got[k] - want[k]);
            }
        }
    }
    let depth_count = targets.depths.iter().flatten().count();
    if depth_count > 0 && weights.depth != 0.0 {
        let coeff = weights.depth / depth_count as f64;
        for (i, (got, want)) in depths.iter().zip(&targets.depths).enumerate() {
            if let Some(want) = want {
                upstream.depths[i] = coeff * sign(got - want);
            }
        }
    }
    if !occupancy.is_empty() && weights.occupancy != 0.0 {
        let coeff = weights.occupancy / occupancy.len() as f64;
        for (v, (got, want)) in occupancy.iter().zip(&targets.occupancy).enumerate() {
            upstream.occupancy[v] = coeff * sign(got - want);
        }
    }
    Ok(upstream)
}

/// One training-step metrics record, serialized as a JSON line.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    #[serde(rename = "L")]
    pub total: f64,
    #[serde(rename = "L_rgb")]
    pub rgb: f64,
    #[serde(rename = "L_depth")]
    pub depth: f64,
    #[serde(rename = "L_occ")]
    pub occupancy: f64,
}

impl MetricsRecord {
    pub fn from_breakdown(step: u64, b: &LossBreakdown) -> Self {
        Self {
            step,
            total: b.total,
            rgb: b.rgb,
            depth: b.depth,
            occupancy: b.occupancy,
        }
    }
}

/// Append one metrics record as a JSON line.
pub fn write_metrics_line(out: &mut impl Write, record: &MetricsRecord) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n")?;
    Ok(())
}

//! Rays through valid masked patches and ordered anchor positions along
//! each ray.
//!
//! Selection prefers pixels with LiDAR support (those carry depth targets),
//! fills any remaining budget from unsupported masked pixels, and emits rays
//! in canonical (camera, row, column) order so downstream passes are
//! deterministic.

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Ray};
use crate::masking::ValidMask;

/// One supervised ray: a masked pixel, its camera, and the nearest
/// supporting LiDAR depth when one exists.
#[derive(Debug, Clone)]
pub struct TargetRay {
    pub camera_index: usize,
    /// Integer pixel (x, y); the ray aims at its center.
    pub pixel: (u32, u32),
    pub ray: Ray,
    /// View depth of the nearest in-range LiDAR projection on this pixel.
    pub lidar_depth: Option<f64>,
}

/// The rays supervised in one training step.
#[derive(Debug, Clone, Default)]
pub struct RayBatch {
    pub rays: Vec<TargetRay>,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Anchor positions for every ray of a batch, flattened ray-major:
/// anchor `j` of ray `i` lives at `i * anchors_per_ray + j`.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub anchors_per_ray: usize,
    pub positions: Vec<Vector3<f64>>,
    /// View depths, strictly increasing within each ray.
    pub depths: Vec<f64>,
}

impl AnchorSet {
    #[inline]
    pub fn index(&self, ray: usize, j: usize) -> usize {
        ray * self.anchors_per_ray + j
    }

    pub fn ray_count(&self) -> usize {
        if self.anchors_per_ray == 0 {
            0
        } else {
            self.positions.len() / self.anchors_per_ray
        }
    }
}

/// Masked pixel candidate, keyed for canonical ordering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Candidate {
    camera_index: usize,
    y: u32,
    x: u32,
}

/// Nearest supporting depth per pixel of one valid mask, in canonical order.
fn mask_pixels(mask: &ValidMask) -> Vec<(Candidate, Option<f64>)> {
    let p = mask.patch_size;
    let mut out = Vec::new();
    for patch in &mask.patches {
        let (x0, y0) = mask.patch_origin(patch);
        let mut depth_of = std::collections::HashMap::new();
        for pt in &patch.support {
            let ix = (pt.pixel.x + 0.5).floor() as i64;
            let iy = (pt.pixel.y + 0.5).floor() as i64;
            if ix < 0 || iy < 0 {
                continue;
            }
            let key = (ix as u32, iy as u32);
            let entry = depth_of.entry(key).or_insert(pt.depth);
            if pt.depth < *entry {
                *entry = pt.depth;
            }
        }
        for y in y0..y0 + p {
            for x in x0..x0 + p {
                out.push((
                    Candidate {
                        camera_index: mask.camera_index,
                        y,
                        x,
                    },
                    depth_of.get(&(x, y)).copied(),
                ));
            }
        }
    }
    out
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Draw up to `budget` rays from the pixels of the valid masks,
/// LiDAR-supported pixels first.
pub fn select_rays(
    valid_masks: &[ValidMask],
    cameras: &[Camera],
    budget: usize,
    seed: u64,
) -> Result<RayBatch> {
    let mut supported = Vec::new();
    let mut unsupported = Vec::new();
    for mask in valid_masks {
        if mask.camera_index >= cameras.len() {
            return Err(Error::Config(format!(
                "mask references camera {} but only {} cameras exist",
                mask.camera_index,
                cameras.len()
            )));
        }
        for (cand, depth) in mask_pixels(mask) {
            match depth {
                Some(d) => supported.push((cand, d)),
                None => unsupported.push(cand),
            }
        }
    }
    if supported.is_empty() && unsupported.is_empty() {
        return Err(Error::EmptyBatch);
    }
    supported.sort_unstable_by_key(|(c, _)| *c);
    unsupported.sort_unstable();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle(&mut supported, &mut rng);
    let mut picked: Vec<(Candidate, Option<f64>)> = supported
        .into_iter()
        .take(budget)
        .map(|(c, d)| (c, Some(d)))
        .collect();
    if picked.len() < budget {
        shuffle(&mut unsupported, &mut rng);
        picked.extend(
            unsupported
                .into_iter()
                .take(budget - picked.len())
                .map(|c| (c, None)),
        );
    }
    picked.sort_unstable_by_key(|(c, _)| *c);

    let rays = picked
        .into_iter()
        .map(|(c, depth)| {
            let camera = &cameras[c.camera_index];
            TargetRay {
                camera_index: c.camera_index,
                pixel: (c.x, c.y),
                ray: camera.pixel_ray(Vector2::new(c.x as f64, c.y as f64)),
                lidar_depth: depth,
            }
        })
        .collect();
    Ok(RayBatch { rays })
}

/// Mid-bin anchor depths over [a, b]: d_j = a + (j - 0.5)(b - a)/D.
pub fn anchor_depths(d: usize, depth_range: [f64; 2]) -> Vec<f64> {
    let [a, b] = depth_range;
    let step = (b - a) / d as f64;
    (1..=d).map(|j| a + (j as f64 - 0.5) * step).collect()
}

/// Place `d` anchors per ray at mid-bin view depths; with `jitter_seed` the
/// depths instead draw uniformly inside each bin (still strictly ordered).
pub fn sample_anchors(
    batch: &RayBatch,
    cameras: &[Camera],
    d: usize,
    depth_range: [f64; 2],
    jitter_seed: Option<u64>,
) -> Result<AnchorSet> {
    let [a, b] = depth_range;
    if d == 0 {
        return Err(Error::Config("anchors per ray must be >= 1".into()));
    }
    if !(a < b) {
        return Err(Error::Config(format!(
            "anchor depth range must satisfy a < b, got [{a}, {b}]"
        )));
    }
    let step = (b - a) / d as f64;
    let midpoints = anchor_depths(d, depth_range);
    let mut rng = jitter_seed.map(ChaCha8Rng::seed_from_u64);
    let mut positions = Vec::with_capacity(batch.len() * d);
    let mut depths = Vec::with_capacity(batch.len() * d);
    for target in &batch.rays {
        let camera = &cameras[target.camera_index];
        let pixel = Vector2::new(target.pixel.0 as f64, target.pixel.1 as f64);
        let offset = camera.pixel_offset(&pixel);
        let origin = camera.center();
        for j in 0..d {
            let depth = match rng.as_mut() {
                None => midpoints[j],
                Some(r) => a + (j as f64 + r.gen_range(0.0..1.0)) * step,
            };
            positions.push(origin + depth * offset);
            depths.push(depth);
        }
    }
    Ok(AnchorSet {
        anchors_per_ray: d,
        positions,
        depths,
    })
}

//! Differentiable reconstruction of RGB, depth, and occupancy from decoded
//! anchors, with analytic backward passes.
//!
//! Two compositing modes exist. RAY mode treats each anchor's decoded
//! opacity as its alpha directly: anchors sit on the pixel's own ray, so
//! the splat footprint at the pixel center is exactly one. SPLAT mode
//! composites, for every masked pixel, all anchors of its patch with
//! footprint-modulated alphas sorted by view depth; only this mode gives
//! rotation and scale a path into the loss.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::decoder::{GaussianParams, ParamGrads};
use crate::error::{Error, Result};
use crate::geometry::{
    build_covariance, project_covariance, rotation_quaternion_jacobian, Camera, Quaternion,
    MIN_VIEW_DEPTH,
};
use crate::rays::{AnchorSet, RayBatch};
use crate::voxel::TargetVoxels;

/// Regularizer added to the projected 2D covariance, square pixels.
pub const SPLAT_COV_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    #[default]
    Ray,
    Splat,
}

impl std::str::FromStr for RenderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ray" => Ok(RenderMode::Ray),
            "splat" => Ok(RenderMode::Splat),
            other => Err(Error::Config(format!(
                "unknown render mode {other:?} (expected \"ray\" or \"splat\")"
            ))),
        }
    }
}

/// Depth-ordered contributions compositing into one ray's pixel.
#[derive(Debug, Clone, Default)]
pub struct RayContribs {
    /// Flat anchor indices, front to back.
    pub anchors: Vec<usize>,
    /// Effective alphas aligned with `anchors`.
    pub alphas: Vec<f64>,
    /// View depths aligned with `anchors`, non-decreasing.
    pub depths: Vec<f64>,
}

/// Reconstruction of a ray batch plus target-voxel occupancy.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// Per-ray reconstructed color.
    pub colors: Vec<[f64; 3]>,
    /// Per-ray reconstructed depth, meters.
    pub depths: Vec<f64>,
    /// Per-ray accumulated opacity Σ αᵢτᵢ ∈ [0, 1]; near-zero marks an
    /// effectively empty ray.
    pub accumulated: Vec<f64>,
    /// Per-target-voxel occupancy (max member opacity).
    pub occupancy: Vec<f64>,
    /// Flat anchor index whose opacity won each voxel's max.
    pub occupancy_argmax: Vec<usize>,
    /// The contributions used, retained for the backward pass.
    pub contribs: Vec<RayContribs>,
}

/// Upstream gradients on the reconstruction.
#[derive(Debug, Clone)]
pub struct RenderUpstream {
    pub colors: Vec<[f64; 3]>,
    pub depths: Vec<f64>,
    pub occupancy: Vec<f64>,
}

impl RenderUpstream {
    pub fn zeros(rays: usize, voxels: usize) -> Self {
        Self {
            colors: vec![[0.0; 3]; rays],
            depths: vec![0.0; rays],
            occupancy: vec![0.0; voxels],
        }
    }
}

/// τ₁ = 1, τ_{i+1} = τ_i (1 − α_i).
pub fn transmittance(alphas: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(alphas.len());
    let mut t = 1.0;
    for &a in alphas {
        out.push(t);
        t *= 1.0 - a;
    }
    out
}

/// Ĉ = Σ c_i α_i τ_i over depth-ordered contributions.
pub fn composite_rgb(colors: &[[f64; 3]], alphas: &[f64]) -> [f64; 3] {
    let mut out = [0.0; 3];
    let mut t = 1.0;
    for (c, &a) in colors.iter().zip(alphas) {
        let w = a * t;
        for k in 0..3 {
            out[k] += c[k] * w;
        }
        t *= 1.0 - a;
    }
    out
}

/// D̂ = Σ d_i α_i ∏_{j<i}(1 − α_j).
pub fn composite_depth(depths: &[f64], alphas: &[f64]) -> f64 {
    let mut out = 0.0;
    let mut t = 1.0;
    for (&d, &a) in depths.iter().zip(alphas) {
        out += d * a * t;
        t *= 1.0 - a;
    }
    out
}

/// Per-voxel max of member opacities, with the argmax anchor (lowest index
/// wins ties so the subgradient is deterministic).
pub fn reconstruct_occupancy(
    params: &GaussianParams,
    targets: &TargetVoxels,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut occupancy = Vec::with_capacity(targets.len());
    let mut argmax = Vec::with_capacity(targets.len());
    for members in &targets.members {
        let mut best: Option<(f64, usize)> = None;
        for &a in members {
            let o = params.opacities[a];
            if best.map_or(true, |(bo, _)| o > bo) {
                best = Some((o, a));
            }
        }
        let (o, a) = best.ok_or_else(|| {
            Error::Numeric("target voxel with empty anchor membership".into())
        })?;
        occupancy.push(o);
        argmax.push(a);
    }
    Ok((occupancy, argmax))
}

/// Geometry pieces of one splat footprint evaluation, kept for the chain
/// rule. `a_delta` is (Σ′ + εI)⁻¹ Δ.
struct SplatPieces {
    view_depth: f64,
    footprint: f64,
    a_delta: Vector2<f64>,
    jacobian: nalgebra::Matrix2x3<f64>,
    rotation: Matrix3<f64>,
}

fn splat_pieces(
    opacity_index: usize,
    params: &GaussianParams,
    position: &Vector3<f64>,
    camera: &Camera,
    pixel: &Vector2<f64>,
) -> Result<Option<SplatPieces>> {
    let v = camera.view_point(position);
    if v.z <= MIN_VIEW_DEPTH {
        return Ok(None);
    }
    let (center, _) = camera.project_point(position)?;
    let sigma = build_covariance(&params.rotations[opacity_index], &params.scales[opacity_index])?;
    let mut sigma2 = project_covariance(&sigma, camera, position)?;
    sigma2[(0, 0)] += SPLAT_COV_EPS;
    sigma2[(1, 1)] += SPLAT_COV_EPS;
    let det = sigma2[(0, 0)] * sigma2[(1, 1)] - sigma2[(0, 1)] * sigma2[(1, 0)];
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::Numeric(format!(
            "projected covariance is not invertible (det = {det})"
        )));
    }
    let inv = Matrix2::new(sigma2[(1, 1)], -sigma2[(0, 1)], -sigma2[(1, 0)], sigma2[(0, 0)]) / det;
    let delta = pixel - center;
    let a_delta = inv * delta;
    let q = delta.dot(&a_delta);
    Ok(Some(SplatPieces {
        view_depth: v.z,
        footprint: (-0.5 * q).exp(),
        a_delta,
        jacobian: camera.projection_jacobian(position)?,
        rotation: params.rotations[opacity_index].to_rotation()?,
    }))
}

/// Footprint-modulated alpha of one anchor at one pixel:
/// opacity · exp(−½ Δᵀ (Σ′ + εI)⁻¹ Δ).
pub fn splat_effective_alpha(
    opacity: f64,
    rotation: &Quaternion,
    scale: &Vector3<f64>,
    position: &Vector3<f64>,
    camera: &Camera,
    pixel: &Vector2<f64>,
) -> Result<f64> {
    let params = GaussianParams {
        colors: vec![[0.0; 3]],
        opacities: vec![opacity],
        rotations: vec![*rotation],
        scales: vec![*scale],
    };
    match splat_pieces(0, &params, position, camera, pixel)? {
        Some(p) => Ok(opacity * p.footprint),
        None => Err(Error::BehindCamera {
            z: camera.view_point(position).z,
        }),
    }
}

/// Ray indices grouped by (camera, patch cell), in canonical order.
fn patch_groups(batch: &RayBatch, patch_size: u32) -> Vec<Vec<usize>> {
    let mut map: std::collections::BTreeMap<(usize, u32, u32), Vec<usize>> = Default::default();
    for (i, ray) in batch.rays.iter().enumerate() {
        let cell = (
            ray.camera_index,
            ray.pixel.1 / patch_size,
            ray.pixel.0 / patch_size,
        );
        map.entry(cell).or_default().push(i);
    }
    map.into_values().collect()
}

fn build_contribs(
    mode: RenderMode,
    batch: &RayBatch,
    anchors: &AnchorSet,
    params: &GaussianParams,
    cameras: &[Camera],
    patch_size: u32,
) -> Result<Vec<RayContribs>> {
    let d = anchors.anchors_per_ray;
    let mut contribs = vec![RayContribs::default(); batch.len()];
    match mode {
        RenderMode::Ray => {
            for (i, c) in contribs.iter_mut().enumerate() {
                c.anchors = (i * d..(i + 1) * d).collect();
                c.alphas = c.anchors.iter().map(|&a| params.opacities[a]).collect();
                c.depths = c.anchors.iter().map(|&a| anchors.depths[a]).collect();
            }
        }
        RenderMode::Splat => {
            if patch_size == 0 {
                return Err(Error::Config("splat mode needs a nonzero patch size".into()));
            }
            for group in patch_groups(batch, patch_size) {
                // Every anchor of every ray in the patch, once.
                let members: Vec<usize> = group
                    .iter()
                    .flat_map(|&r| r * d..(r + 1) * d)
                    .collect();
                for &r in &group {
                    let ray = &batch.rays[r];
                    let camera = &cameras[ray.camera_index];
                    let pixel = Vector2::new(ray.pixel.0 as f64, ray.pixel.1 as f64);
                    let mut entries: Vec<(f64, usize, f64)> = Vec::with_capacity(members.len());
                    for &a in &members {
                        let Some(p) =
                            splat_pieces(a, params, &anchors.positions[a], camera, &pixel)?
                        else {
                            continue;
                        };
                        entries.push((p.view_depth, a, params.opacities[a] * p.footprint));
                    }
                    entries.sort_by(|x, y| {
                        x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1))
                    });
                    let c = &mut contribs[r];
                    for (depth, a, alpha) in entries {
                        c.depths.push(depth);
                        c.anchors.push(a);
                        c.alphas.push(alpha);
                    }
                }
            }
        }
    }
    Ok(contribs)
}

/// Full reconstruction forward pass.
pub fn render_forward(
    mode: RenderMode,
    batch: &RayBatch,
    anchors: &AnchorSet,
    params: &GaussianParams,
    targets: &TargetVoxels,
    cameras: &[Camera],
    patch_size: u32,
) -> Result<RenderOutput> {
    if params.len() != anchors.positions.len() {
        return Err(Error::Config(format!(
            "{} decoded parameter sets for {} anchors",
            params.len(),
            anchors.positions.len()
        )));
    }
    let contribs = build_contribs(mode, batch, anchors, params, cameras, patch_size)?;
    let mut colors = Vec::with_capacity(batch.len());
    let mut depths = Vec::with_capacity(batch.len());
    let mut accumulated = Vec::with_capacity(batch.len());
    for c in &contribs {
        let ray_colors: Vec<[f64; 3]> = c.anchors.iter().map(|&a| params.colors[a]).collect();
        colors.push(composite_rgb(&ray_colors, &c.alphas));
        depths.push(composite_depth(&c.depths, &c.alphas));
        let tau = transmittance(&c.alphas);
        accumulated.push(c.alphas.iter().zip(&tau).map(|(a, t)| a * t).sum());
    }
    let (occupancy, occupancy_argmax) = reconstruct_occupancy(params, targets)?;
    Ok(RenderOutput {
        colors,
        depths,
        accumulated,
        occupancy,
        occupancy_argmax,
        contribs,
    })
}

/// Pull gradients on (Ĉ, D̂, Ô) back to the decoded parameters.
///
/// RAY mode routes alpha gradients straight to opacities. SPLAT mode
/// additionally chains through the footprint to rotation and scale (the
/// gradient on the unit quaternion is reported in ambient coordinates; the
/// decoder projects it). Anchor positions are fixed ray geometry, so no
/// position gradient is produced here.
pub fn render_backward(
    mode: RenderMode,
    batch: &RayBatch,
    anchors: &AnchorSet,
    params: &GaussianParams,
    targets: &TargetVoxels,
    cameras: &[Camera],
    output: &RenderOutput,
    upstream: &RenderUpstream,
) -> Result<ParamGrads> {
    let n = params.len();
    if upstream.colors.len() != batch.len()
        || upstream.depths.len() != batch.len()
        || upstream.occupancy.len() != targets.len()
    {
        return Err(Error::Config("upstream gradient shape mismatch".into()));
    }
    let mut grads = ParamGrads::zeros(n);
    for (r, c) in output.contribs.iter().enumerate() {
        let up_c = upstream.colors[r];
        let up_d = upstream.depths[r];
        if up_c == [0.0; 3] && up_d == 0.0 {
            continue;
        }
        let tau = transmittance(&c.alphas);
        // Color gradients and per-contribution alpha gradients. Walking
        // back to front keeps the suffix sum S_i = Σ_{k>i} ρ_k α_k τ_k
        // incremental, where ρ_k is the upstream-weighted value density.
        let mut suffix = 0.0;
        let mut alpha_grads = vec![0.0; c.alphas.len()];
        for i in (0..c.alphas.len()).rev() {
            let a = c.anchors[i];
            let w = c.alphas[i] * tau[i];
            let mut rho = up_d * c.depths[i];
            for k in 0..3 {
                grads.colors[a][k] += up_c[k] * w;
                rho += up_c[k] * params.colors[a][k];
            }
            alpha_grads[i] = rho * tau[i] - suffix / (1.0 - c.alphas[i]);
            suffix += rho * c.alphas[i] * tau[i];
        }
        match mode {
            RenderMode::Ray => {
                for (i, &a) in c.anchors.iter().enumerate() {
                    grads.opacities[a] += alpha_grads[i];
                }
            }
            RenderMode::Splat => {
                let ray = &batch.rays[r];
                let camera = &cameras[ray.camera_index];
                let pixel = Vector2::new(ray.pixel.0 as f64, ray.pixel.1 as f64);
                for (i, &a) in c.anchors.iter().enumerate() {
                    let dl_da = alpha_grads[i];
                    if dl_da == 0.0 {
                        continue;
                    }
                    let p = splat_pieces(a, params, &anchors.positions[a], camera, &pixel)?
                        .expect("contribution implies anchor in front of camera");
                    grads.opacities[a] += dl_da * p.footprint;
                    // g = exp(−q/2), q = Δᵀ A Δ with A = (Σ′ + εI)⁻¹:
                    // dL/dΣ′ = (g/2 · dL/dg) (AΔ)(AΔ)ᵀ.
                    let dl_dg = dl_da * params.opacities[a];
                    let coeff = 0.5 * p.footprint * dl_dg;
                    let dl_dsigma2 = coeff * p.a_delta * p.a_delta.transpose();
                    // Σ′ = M Σ Mᵀ with M = J W.
                    let dl_dsigma = p.jacobian.transpose() * dl_dsigma2 * p.jacobian;
                    // Σ = N Nᵀ, N = R diag(s).
                    let s = params.scales[a];
                    let n_mat = p.rotation * Matrix3::from_diagonal(&s);
                    let dl_dn = 2.0 * dl_dsigma * n_mat;
                    for k in 0..3 {
                        let mut ds = 0.0;
                        for row in 0..3 {
                            ds += dl_dn[(row, k)] * p.rotation[(row, k)];
                        }
                        grads.scales[a][k] += ds;
                    }
                    let dl_dr = dl_dn * Matrix3::from_diagonal(&s);
                    let jac = rotation_quaternion_jacobian(&params.rotations[a]);
                    for m in 0..4 {
                        let mut dq = 0.0;
                        for row in 0..3 {
                            for col in 0..3 {
                                dq += dl_dr[(row, col)] * jac[m][(row, col)];
                            }
                        }
                        grads.rotations[a][m] += dq;
                    }
                }
            }
        }
    }
    // Occupancy: the subgradient flows only to each voxel's argmax member.
    for (v, &a) in output.occupancy_argmax.iter().enumerate() {
        grads.opacities[a] += upstream.occupancy[v];
    }
    Ok(grads)
}

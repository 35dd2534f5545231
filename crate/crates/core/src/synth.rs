//! Procedural ground-truth scenes: axis-aligned colored boxes over a
//! ground plane, a surround camera rig with a ring/azimuth LiDAR table,
//! exact reference renderers, and LiDAR-cloud voxelization.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Ray};
use crate::io::{ImageDepth, ImageRgb};
use crate::masking::LidarCloud;
use crate::rng::{rng_for, Stream};
use crate::voxel::GridGeometry;

/// Minimum positive hit distance; keeps rays from re-hitting their origin
/// surface.
const HIT_EPS: f64 = 1e-9;

/// Axis-aligned world-space box, meters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Box {
        center: [f64; 3],
        /// Full edge lengths.
        size: [f64; 3],
        albedo: [f64; 3],
    },
    /// Horizontal plane z = height spanning the scene.
    Ground { height: f64, albedo: [f64; 3] },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|k| self.min[k] <= p[k] && p[k] <= self.max[k])
    }
}

/// Surround sensor rig: co-planar yaw-distributed cameras with shared
/// intrinsics plus one spinning LiDAR described by a ring/azimuth table.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SensorRig {
    pub cameras: Vec<Camera>,
    pub lidar_origin: [f64; 3],
    /// Elevation ring count.
    pub rings: u32,
    /// Azimuth steps per ring.
    pub azimuth_steps: u32,
    /// Elevation interval, radians (low, high).
    pub elevation_range: [f64; 2],
    /// Maximum return distance, meters.
    pub max_range: f64,
}

impl SensorRig {
    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Config("rig has no cameras".into()));
        }
        for (i, cam) in self.cameras.iter().enumerate() {
            Camera::new(cam.intrinsics, cam.rotation, cam.translation, cam.width, cam.height)
                .map_err(|e| Error::Config(format!("camera {i}: {e}")))?;
        }
        if self.rings == 0 || self.azimuth_steps == 0 {
            return Err(Error::Config("LiDAR table must have rings and azimuth steps".into()));
        }
        if !(self.max_range > 0.0) || self.elevation_range[0] > self.elevation_range[1] {
            return Err(Error::Config("bad LiDAR range or elevation interval".into()));
        }
        Ok(())
    }

    /// The full ray table, ring-major then azimuth, unit directions.
    pub fn lidar_rays(&self) -> Vec<Ray> {
        let origin = Vector3::from(self.lidar_origin);
        let mut rays = Vec::with_capacity((self.rings * self.azimuth_steps) as usize);
        for ring in 0..self.rings {
            let f = if self.rings == 1 {
                0.5
            } else {
                ring as f64 / (self.rings - 1) as f64
            };
            let elevation =
                self.elevation_range[0] + f * (self.elevation_range[1] - self.elevation_range[0]);
            for step in 0..self.azimuth_steps {
                let azimuth = step as f64 / self.azimuth_steps as f64 * TAU;
                let direction = Vector3::new(
                    elevation.cos() * azimuth.cos(),
                    elevation.cos() * azimuth.sin(),
                    elevation.sin(),
                );
                rays.push(Ray {
                    origin,
                    direction,
                    source_pixel: Vector2::new(step as f64, ring as f64),
                });
            }
        }
        rays
    }
}

/// Complete synthetic world: geometry plus the rig observing it.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Scene {
    pub seed: u64,
    pub bounds: Bounds,
    pub primitives: Vec<Primitive>,
    pub background: [f64; 3],
    pub rig: SensorRig,
}

impl Scene {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.primitives.iter().enumerate() {
            let albedo = match p {
                Primitive::Box { center, size, albedo } => {
                    for k in 0..3 {
                        if size[k] <= 0.0 {
                            return Err(Error::Config(format!("primitive {i}: size must be positive")));
                        }
                        let (lo, hi) = (center[k] - size[k] / 2.0, center[k] + size[k] / 2.0);
                        if lo < self.bounds.min[k] || hi > self.bounds.max[k] {
                            return Err(Error::Config(format!("primitive {i} outside scene bounds")));
                        }
                    }
                    albedo
                }
                Primitive::Ground { height, albedo } => {
                    if *height < self.bounds.min[2] || *height > self.bounds.max[2] {
                        return Err(Error::Config(format!("ground plane {i} outside scene bounds")));
                    }
                    albedo
                }
            };
            if albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::Config(format!("primitive {i}: albedo outside [0,1]")));
            }
        }
        self.rig.validate()
    }
}

/// Nearest surface a ray meets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    /// Distance along the (unit) ray direction, meters.
    pub t: f64,
    pub albedo: [f64; 3],
    pub primitive: usize,
}

/// Slab-method intersection with one axis-aligned box. Returns the
/// smallest distance > HIT_EPS; a ray starting inside reports the exit
/// face.
fn intersect_box(
    origin: &Vector3<f64>,
    direction: &Vector3<f64>,
    center: &[f64; 3],
    size: &[f64; 3],
) -> Option<f64> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for k in 0..3 {
        let lo = center[k] - size[k] / 2.0;
        let hi = center[k] + size[k] / 2.0;
        let d = direction[k];
        let o = origin[k];
        if d.abs() < 1e-300 {
            if o < lo || o > hi {
                return None;
            }
        } else {
            let (a, b) = ((lo - o) / d, (hi - o) / d);
            t_enter = t_enter.max(a.min(b));
            t_exit = t_exit.min(a.max(b));
        }
    }
    if t_exit < t_enter || t_exit <= HIT_EPS {
        return None;
    }
    Some(if t_enter > HIT_EPS { t_enter } else { t_exit })
}

/// Nearest hit among all primitives, or `None` for a miss. Ties keep the
/// lowest primitive index, so results are deterministic.
pub fn raycast_scene(scene: &Scene, origin: &Vector3<f64>, direction: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in scene.primitives.iter().enumerate() {
        let candidate = match p {
            Primitive::Box { center, size, albedo } => {
                intersect_box(origin, direction, center, size).map(|t| Hit {
                    t,
                    albedo: *albedo,
                    primitive: i,
                })
            }
            Primitive::Ground { height, albedo } => {
                if direction.z.abs() < 1e-300 {
                    None
                } else {
                    let t = (height - origin.z) / direction.z;
                    (t > HIT_EPS).then_some(Hit {
                        t,
                        albedo: *albedo,
                        primitive: i,
                    })
                }
            }
        };
        if let Some(c) = candidate {
            if best.map_or(true, |b| c.t < b.t) {
                best = Some(c);
            }
        }
    }
    best
}

/// Ground-truth RGB and view-depth maps for one camera. Misses show the
/// background color and a +inf depth sentinel.
pub fn render_reference(scene: &Scene, camera: &Camera) -> (ImageRgb, ImageDepth) {
    let mut rgb = ImageRgb::filled(camera.width, camera.height, scene.background);
    let mut depth = ImageDepth::new_miss(camera.width, camera.height);
    for y in 0..camera.height {
        for x in 0..camera.width {
            let ray = camera.pixel_ray(Vector2::new(x as f64, y as f64));
            if let Some(hit) = raycast_scene(scene, &ray.origin, &ray.direction) {
                let point = ray.origin + hit.t * ray.direction;
                rgb.set(x, y, hit.albedo);
                depth.set(x, y, camera.view_point(&point).z);
            }
        }
    }
    (rgb, depth)
}

/// One return per table ray that hits within range, in world coordinates.
pub fn simulate_lidar(scene: &Scene) -> Result<LidarCloud> {
    let mut points = Vec::new();
    for ray in scene.rig.lidar_rays() {
        if let Some(hit) = raycast_scene(scene, &ray.origin, &ray.direction) {
            if hit.t <= scene.rig.max_range {
                points.push(ray.origin + hit.t * ray.direction);
            }
        }
    }
    LidarCloud::new(points)
}

/// Binary occupancy over the grid: 1.0 where at least one point falls in
/// the voxel (half-open intervals), keyed by spatial index.
pub fn voxelize_occupancy(cloud: &LidarCloud, geometry: &GridGeometry) -> Vec<f64> {
    let mut grid = vec![0.0; geometry.voxel_count()];
    for p in &cloud.points {
        if let Some(v) = geometry.voxel_of(p) {
            grid[geometry.spatial_index(v)] = 1.0;
        }
    }
    grid
}

/// Generation knobs for a random scene.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub bounds: Bounds,
    /// Number of boxes resting on the ground plane.
    pub boxes: u32,
    /// Box edge-length interval, meters.
    pub box_size: [f64; 2],
    /// Box placement radius interval from the rig, meters.
    pub placement_radius: [f64; 2],
    pub ground_albedo: [f64; 3],
    pub background: [f64; 3],
    pub camera_count: u32,
    pub image_width: u32,
    pub image_height: u32,
    /// Shared focal length, pixels.
    pub focal: f64,
    /// Rig position; cameras sit on a small ring around it.
    pub rig_center: [f64; 3],
    pub lidar_rings: u32,
    pub lidar_azimuth_steps: u32,
    pub lidar_elevation_range: [f64; 2],
    pub lidar_max_range: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            bounds: Bounds {
                min: [-6.4, -6.4, -0.4],
                max: [6.4, 6.4, 2.8],
            },
            boxes: 6,
            box_size: [0.7, 1.9],
            placement_radius: [2.0, 4.8],
            ground_albedo: [0.35, 0.33, 0.3],
            background: [0.2, 0.35, 0.55],
            camera_count: 6,
            image_width: 64,
            image_height: 64,
            focal: 50.0,
            rig_center: [0.0, 0.0, 1.0],
            lidar_rings: 32,
            lidar_azimuth_steps: 360,
            lidar_elevation_range: [-0.45, 0.12],
            lidar_max_range: 70.0,
        }
    }
}

/// Camera at `center` yawed by `theta` about +z, optical axis horizontal
/// (world z is up; camera y points down).
fn yawed_camera(
    focal: f64,
    width: u32,
    height: u32,
    center: Vector3<f64>,
    theta: f64,
) -> Result<Camera> {
    let forward = Vector3::new(theta.cos(), theta.sin(), 0.0);
    let right = Vector3::new(theta.sin(), -theta.cos(), 0.0);
    let down = Vector3::new(0.0, 0.0, -1.0);
    let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
    let translation = -rotation * center;
    Camera::pinhole(
        focal,
        (width as f64 - 1.0) / 2.0,
        (height as f64 - 1.0) / 2.0,
        rotation,
        translation,
        width,
        height,
    )
}

/// Deterministic scene from a seed: ground plane, randomly placed and
/// colored boxes around the rig, and the surround sensor rig itself.
pub fn generate_scene(config: &SceneConfig) -> Result<Scene> {
    let mut rng = rng_for(config.seed, Stream::Scene);
    let ground = config.bounds.min[2].max(0.0).min(config.bounds.max[2]);
    let mut primitives = vec![Primitive::Ground {
        height: ground,
        albedo: config.ground_albedo,
    }];
    for _ in 0..config.boxes {
        let size = [
            rng.gen_range(config.box_size[0]..=config.box_size[1]),
            rng.gen_range(config.box_size[0]..=config.box_size[1]),
            rng.gen_range(config.box_size[0]..=config.box_size[1]),
        ];
        let radius = rng.gen_range(config.placement_radius[0]..=config.placement_radius[1]);
        let angle = rng.gen_range(0.0..TAU);
        let center = [
            config.rig_center[0] + radius * angle.cos(),
            config.rig_center[1] + radius * angle.sin(),
            ground + size[2] / 2.0,
        ];
        let albedo = [
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
            rng.gen_range(0.05..0.95),
        ];
        primitives.push(Primitive::Box {
            center,
            size,
            albedo,
        });
    }
    let rig_center = Vector3::from(config.rig_center);
    let mut cameras = Vec::with_capacity(config.camera_count as usize);
    for k in 0..config.camera_count {
        let theta = k as f64 / config.camera_count as f64 * TAU;
        let center = rig_center + 0.2 * Vector3::new(theta.cos(), theta.sin(), 0.0);
        cameras.push(yawed_camera(
            config.focal,
            config.image_width,
            config.image_height,
            center,
            theta,
        )?);
    }
    let scene = Scene {
        seed: config.seed,
        bounds: config.bounds,
        primitives,
        background: config.background,
        rig: SensorRig {
            cameras,
            lidar_origin: [config.rig_center[0], config.rig_center[1], config.rig_center[2] + 0.2],
            rings: config.lidar_rings,
            azimuth_steps: config.lidar_azimuth_steps,
            elevation_range: config.lidar_elevation_range,
            max_range: config.lidar_max_range,
        },
    };
    scene.validate()?;
    Ok(scene)
}

/// Serialize a scene as pretty JSON (byte-stable for a given scene).
pub fn scene_to_json(scene: &Scene) -> Result<String> {
    let mut s = serde_json::to_string_pretty(scene)?;
    s.push('\n');
    Ok(s)
}

pub fn write_scene(path: &Path, scene: &Scene) -> Result<()> {
    std::fs::write(path, scene_to_json(scene)?)?;
    Ok(())
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    let scene: Scene = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    scene.validate()?;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn boxes_only(boxes: Vec<([f64; 3], [f64; 3], [f64; 3])>) -> Scene {
        let config = SceneConfig {
            bounds: Bounds {
                min: [-100.0; 3],
                max: [100.0; 3],
            },
            lidar_rings: 4,
            lidar_azimuth_steps: 12,
            ..SceneConfig::default()
        };
        let mut scene = generate_scene(&config).unwrap();
        scene.primitives = boxes
            .into_iter()
            .map(|(center, size, albedo)| Primitive::Box {
                center,
                size,
                albedo,
            })
            .collect();
        scene
    }

    #[test]
    fn slab_hand_cases() {
        let scene = boxes_only(vec![([0.0, 0.0, 5.0], [1.0; 3], [1.0, 0.0, 0.0])]);
        let hit = raycast_scene(
            &scene,
            &Vector3::zeros(),
            &Vector3::new(0.0, 0.0, 1.0),
        )
        .unwrap();
        assert_eq!(hit.t, 4.5);
        assert_eq!(hit.albedo, [1.0, 0.0, 0.0]);
        // Pointing away: miss.
        assert!(raycast_scene(&scene, &Vector3::zeros(), &Vector3::new(0.0, 0.0, -1.0)).is_none());
        // Origin inside: exit face distance.
        let scene = boxes_only(vec![([0.0; 3], [2.0; 3], [0.5; 3])]);
        let hit = raycast_scene(
            &scene,
            &Vector3::new(0.3, 0.0, 0.0),
            &Vector3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        assert_eq!(hit.t, 0.7);
    }

    #[test]
    fn nearest_hit_wins_and_ties_take_lowest_index() {
        let scene = boxes_only(vec![
            ([0.0, 0.0, 8.0], [1.0; 3], [0.1; 3]),
            ([0.0, 0.0, 4.0], [1.0; 3], [0.9; 3]),
        ]);
        let hit = raycast_scene(&scene, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((hit.primitive, hit.t), (1, 3.5));
        // Two coincident boxes: index 0 kept.
        let scene = boxes_only(vec![
            ([0.0, 0.0, 4.0], [1.0; 3], [0.1; 3]),
            ([0.0, 0.0, 4.0], [1.0; 3], [0.9; 3]),
        ]);
        let hit = raycast_scene(&scene, &Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(hit.primitive, 0);
    }

    #[test]
    fn ground_plane_hits() {
        let config = SceneConfig::default();
        let scene = generate_scene(&config).unwrap();
        let origin = Vector3::new(0.0, 0.0, 1.0);
        let direction = Vector3::new(1.0, 0.0, -1.0).normalize();
        let hit = raycast_scene(&scene, &origin, &direction).unwrap();
        let point = origin + hit.t * direction;
        assert_relative_eq!(point.z, 0.0, epsilon = 1e-12);
        // Horizontal rays never meet the plane.
        let miss = raycast_scene(
            &Scene {
                primitives: vec![scene.primitives[0].clone()],
                ..scene.clone()
            },
            &origin,
            &Vector3::new(1.0, 0.0, 0.0),
        );
        assert!(miss.is_none());
    }

    /// Independent interval-arithmetic slab check used as the oracle for
    /// the per-pixel renderer test.
    fn oracle_raycast(scene: &Scene, origin: &Vector3<f64>, direction: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in scene.primitives.iter().enumerate() {
            let t = match p {
                Primitive::Box { center, size, .. } => {
                    let mut lo = 0.0f64;
                    let mut hi = f64::INFINITY;
                    let mut inside_all = true;
                    let mut ok = true;
                    for k in 0..3 {
                        let a = center[k] - size[k] / 2.0;
                        let b = center[k] + size[k] / 2.0;
                        inside_all &= a <= origin[k] && origin[k] <= b;
                        if direction[k] == 0.0 {
                            ok &= a <= origin[k] && origin[k] <= b;
                        } else {
                            let (t0, t1) = (
                                ((a - origin[k]) / direction[k]).min((b - origin[k]) / direction[k]),
                                ((a - origin[k]) / direction[k]).max((b - origin[k]) / direction[k]),
                            );
                            lo = lo.max(t0);
                            hi = hi.min(t1);
                        }
                    }
                    if !ok || hi < lo {
                        None
                    } else if inside_all {
                        Some(hi)
                    } else {
                        (lo > 1e-9).then_some(lo).or((hi > 1e-9).then_some(hi))
                    }
                }
                Primitive::Ground { height, .. } => {
                    if direction.z == 0.0 {
                        None
                    } else {
                        let t = (height - origin.z) / direction.z;
                        (t > 1e-9).then_some(t)
                    }
                }
            };
            if let Some(t) = t {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
        }
        best
    }

    #[test]
    fn reference_render_matches_independent_oracle_per_pixel() {
        let config = SceneConfig {
            seed: 3,
            image_width: 24,
            image_height: 24,
            lidar_rings: 2,
            lidar_azimuth_steps: 8,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&config).unwrap();
        for cam in &scene.rig.cameras {
            let (rgb, depth) = render_reference(&scene, cam);
            for y in 0..cam.height {
                for x in 0..cam.width {
                    let ray = cam.pixel_ray(Vector2::new(x as f64, y as f64));
                    match oracle_raycast(&scene, &ray.origin, &ray.direction) {
                        Some((t, i)) => {
                            let point = ray.origin + t * ray.direction;
                            let want = cam.view_point(&point).z;
                            assert_relative_eq!(depth.get(x, y), want, max_relative = 1e-12);
                            let albedo = match &scene.primitives[i] {
                                Primitive::Box { albedo, .. } | Primitive::Ground { albedo, .. } => *albedo,
                            };
                            assert_eq!(rgb.get(x, y), albedo);
                        }
                        None => {
                            assert_eq!(rgb.get(x, y), scene.background);
                            assert!(depth.get(x, y).is_infinite());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn empty_scene_renders_uniform_background() {
        let mut scene = generate_scene(&SceneConfig {
            lidar_rings: 2,
            lidar_azimuth_steps: 8,
            ..SceneConfig::default()
        })
        .unwrap();
        scene.primitives.clear();
        let cam = scene.rig.cameras[0].clone();
        let (rgb, depth) = render_reference(&scene, &cam);
        assert!(rgb.data.iter().all(|p| *p == scene.background));
        assert!(depth.data.iter().all(|d| d.is_infinite()));
        assert!(simulate_lidar(&scene).unwrap().is_empty());
    }

    #[test]
    fn lidar_returns_lie_on_surfaces() {
        let config = SceneConfig {
            seed: 5,
            lidar_rings: 8,
            lidar_azimuth_steps: 36,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&config).unwrap();
        let cloud = simulate_lidar(&scene).unwrap();
        assert!(!cloud.is_empty());
        for p in &cloud.points {
            // Distance to the nearest primitive surface.
            let mut d = f64::INFINITY;
            for prim in &scene.primitives {
                let s = match prim {
                    Primitive::Box { center, size, .. } => {
                        // Signed box distance: max over per-axis distances
                        // outside, negative inside.
                        let q: Vec<f64> = (0..3)
                            .map(|k| (p[k] - center[k]).abs() - size[k] / 2.0)
                            .collect();
                        let outside: f64 = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                        let inside = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max).min(0.0);
                        (outside + inside).abs()
                    }
                    Primitive::Ground { height, .. } => (p.z - height).abs(),
                };
                d = d.min(s);
            }
            assert!(d < 1e-9, "return {p:?} is {d} m off-surface");
        }
    }

    #[test]
    fn enclosing_box_returns_one_point_per_ray() {
        let mut scene = generate_scene(&SceneConfig {
            lidar_rings: 4,
            lidar_azimuth_steps: 16,
            ..SceneConfig::default()
        })
        .unwrap();
        scene.bounds = Bounds {
            min: [-50.0; 3],
            max: [50.0; 3],
        };
        scene.primitives = vec![Primitive::Box {
            center: [0.0; 3],
            size: [40.0; 3],
            albedo: [0.5; 3],
        }];
        let cloud = simulate_lidar(&scene).unwrap();
        assert_eq!(cloud.len(), 4 * 16);
    }

    #[test]
    fn lidar_range_limit_drops_far_returns() {
        let mut scene = generate_scene(&SceneConfig {
            lidar_rings: 1,
            lidar_azimuth_steps: 4,
            lidar_elevation_range: [0.0, 0.0],
            ..SceneConfig::default()
        })
        .unwrap();
        scene.bounds = Bounds {
            min: [-100.0; 3],
            max: [100.0; 3],
        };
        scene.rig.max_range = 10.0;
        scene.primitives = vec![Primitive::Box {
            center: [30.0, 0.0, 1.2],
            size: [2.0; 3],
            albedo: [0.5; 3],
        }];
        assert!(simulate_lidar(&scene).unwrap().is_empty());
        scene.rig.max_range = 70.0;
        assert_eq!(simulate_lidar(&scene).unwrap().len(), 1);
    }

    #[test]
    fn camera_depth_agrees_with_lidar_at_projected_pixels() {
        let config = SceneConfig {
            seed: 11,
            lidar_rings: 8,
            lidar_azimuth_steps: 60,
            ..SceneConfig::default()
        };
        let scene = generate_scene(&config).unwrap();
        let cloud = simulate_lidar(&scene).unwrap();
        let mut matched = 0usize;
        for cam in &scene.rig.cameras {
            for p in &cloud.points {
                let Ok((pixel, view_depth)) = cam.project_point(p) else {
                    continue;
                };
                if !cam.contains_pixel(&pixel) {
                    continue;
                }
                let ray = cam.pixel_ray(pixel);
                let hit = raycast_scene(&scene, &ray.origin, &ray.direction)
                    .expect("camera ray toward a LiDAR return cannot miss");
                let surface = ray.origin + hit.t * ray.direction;
                let cam_depth = cam.view_point(&surface).z;
                // The camera sees the same surface point or something nearer.
                assert!(cam_depth <= view_depth + 1e-6);
                if (surface - p).norm() < 1e-6 {
                    assert!((cam_depth - view_depth).abs() < 1e-6);
                    matched += 1;
                }
            }
        }
        assert!(matched > 200, "only {matched} visible returns");
    }

    #[test]
    fn occupancy_voxelization_matches_scan_oracle() {
        let geometry = GridGeometry::new(
            Vector3::new(-2.0, -2.0, 0.0),
            Vector3::new(2.0, 2.0, 2.0),
            [8, 8, 4],
        )
        .unwrap();
        // Empty cloud: all zeros.
        let empty = LidarCloud::new(vec![]).unwrap();
        assert!(voxelize_occupancy(&empty, &geometry).iter().all(|v| *v == 0.0));
        // Single point: exactly one voxel.
        let one = LidarCloud::new(vec![Vector3::new(0.1, 0.1, 0.1)]).unwrap();
        let grid = voxelize_occupancy(&one, &geometry);
        assert_eq!(grid.iter().filter(|v| **v == 1.0).count(), 1);
        assert_eq!(grid[geometry.spatial_index(geometry.voxel_of(&Vector3::new(0.1, 0.1, 0.1)).unwrap())], 1.0);
        // Random clouds vs per-voxel scan.
        let mut r = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let points: Vec<Vector3<f64>> = (0..300)
                .map(|_| {
                    Vector3::new(
                        r.gen_range(-2.5..2.5),
                        r.gen_range(-2.5..2.5),
                        r.gen_range(-0.5..2.5),
                    )
                })
                .collect();
            let cloud = LidarCloud::new(points.clone()).unwrap();
            let got = voxelize_occupancy(&cloud, &geometry);
            let vs = geometry.voxel_size();
            for ix in 0..8 {
                for iy in 0..8 {
                    for iz in 0..4 {
                        let lo = [
                            -2.0 + ix as f64 * vs.x,
                            -2.0 + iy as f64 * vs.y,
                            iz as f64 * vs.z,
                        ];
                        let occupied = points.iter().any(|p| {
                            (0..3).all(|k| lo[k] <= p[k] && p[k] < lo[k] + [vs.x, vs.y, vs.z][k])
                        });
                        let idx = geometry.spatial_index([ix, iy, iz]);
                        assert_eq!(got[idx] == 1.0, occupied, "voxel ({ix},{iy},{iz})");
                    }
                }
            }
        }
    }

    #[test]
    fn rig_geometry_is_yaw_distributed_and_valid() {
        let scene = generate_scene(&SceneConfig::default()).unwrap();
        assert_eq!(scene.rig.cameras.len(), 6);
        for (k, cam) in scene.rig.cameras.iter().enumerate() {
            let theta = k as f64 / 6.0 * TAU;
            // Optical axis (third rotation row, transposed to world).
            let forward = cam.rotation.transpose() * Vector3::new(0.0, 0.0, 1.0);
            assert_relative_eq!(forward.x, theta.cos(), epsilon = 1e-12);
            assert_relative_eq!(forward.y, theta.sin(), epsilon = 1e-12);
            assert_relative_eq!(forward.z, 0.0, epsilon = 1e-12);
            // Shared intrinsics.
            assert_eq!(cam.intrinsics, scene.rig.cameras[0].intrinsics);
        }
        let rays = scene.rig.lidar_rays();
        assert_eq!(rays.len(), 32 * 360);
        for ray in rays.iter().step_by(97) {
            assert_relative_eq!(ray.direction.norm(), 1.0, epsilon = 1e-12);
        }
        let elevations: Vec<f64> = rays.iter().map(|r| r.direction.z.asin()).collect();
        assert_relative_eq!(elevations[0], -0.45, epsilon = 1e-12);
        assert_relative_eq!(*elevations.last().unwrap(), 0.12, epsilon = 1e-12);
    }

    #[test]
    fn generation_is_seed_deterministic_and_in_bounds() {
        let config = SceneConfig {
            seed: 9,
            ..SceneConfig::default()
        };
        let a = generate_scene(&config).unwrap();
        let b = generate_scene(&config).unwrap();
        assert_eq!(scene_to_json(&a).unwrap(), scene_to_json(&b).unwrap());
        let c = generate_scene(&SceneConfig {
            seed: 10,
            ..config
        })
        .unwrap();
        assert_ne!(scene_to_json(&a).unwrap(), scene_to_json(&c).unwrap());
        a.validate().unwrap();
        for p in &a.primitives {
            if let Primitive::Box { center, size, .. } = p {
                for k in 0..3 {
                    assert!(center[k] - size[k] / 2.0 >= a.bounds.min[k]);
                    assert!(center[k] + size[k] / 2.0 <= a.bounds.max[k]);
                }
            }
        }
    }

    #[test]
    fn scene_json_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        let scene = generate_scene(&SceneConfig {
            seed: 14,
            lidar_rings: 4,
            lidar_azimuth_steps: 12,
            ..SceneConfig::default()
        })
        .unwrap();
        write_scene(&path, &scene).unwrap();
        let back = read_scene(&path).unwrap();
        assert_eq!(scene_to_json(&scene).unwrap(), scene_to_json(&back).unwrap());
        // A corrupted primitive fails validation on read.
        let mut bad = scene.clone();
        bad.primitives.push(Primitive::Box {
            center: [1000.0, 0.0, 0.0],
            size: [1.0; 3],
            albedo: [0.5; 3],
        });
        write_scene(&path, &bad).unwrap();
        assert!(read_scene(&path).is_err());
    }
}

//! Cameras, quaternions and covariance projection.
//!
//! All geometry runs in double precision. Pixel centers sit at integer
//! coordinates with (0,0) the top-left pixel; view space is the usual
//! computer-vision frame (x right, y down, z forward), so view-space z is
//! the depth used everywhere else.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix3x4, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer than this to the image plane count as behind the camera.
pub const MIN_VIEW_DEPTH: f64 = 1e-6;

/// Pinhole camera: intrinsics plus a world-to-camera rigid transform.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Matrix3<f64>,
    /// World-to-camera rotation (orthonormal).
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation, meters.
    pub translation: Vector3<f64>,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        if intrinsics[(0, 0)] <= 0.0 || intrinsics[(1, 1)] <= 0.0 {
            return Err(Error::Config(format!(
                "focal lengths must be positive, got fx={} fy={}",
                intrinsics[(0, 0)],
                intrinsics[(1, 1)]
            )));
        }
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho_err > 1e-9 {
            return Err(Error::Config(format!(
                "rotation is not orthonormal (max |R'R - I| = {ortho_err:.3e})"
            )));
        }
        Ok(Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Simple constructor with focal length `f` and principal point `(cx, cy)`.
    pub fn pinhole(
        f: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
        Self::new(k, rotation, translation, width, height)
    }

    /// The 3x4 projection matrix K [R | t].
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        rt.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        self.intrinsics * rt
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    /// World point into view space.
    pub fn view_point(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Project a world point to (pixel, view depth).
    pub fn project_point(&self, x: &Vector3<f64>) -> Result<(Vector2<f64>, f64)> {
        let v = self.view_point(x);
        if v.z <= MIN_VIEW_DEPTH {
            return Err(Error::BehindCamera { z: v.z });
        }
        let fx = self.intrinsics[(0, 0)];
        let fy = self.intrinsics[(1, 1)];
        let cx = self.intrinsics[(0, 2)];
        let cy = self.intrinsics[(1, 2)];
        let pixel = Vector2::new(fx * v.x / v.z + cx, fy * v.y / v.z + cy);
        Ok((pixel, v.z))
    }

    /// Inverse of [`project_point`](Self::project_point) at a given view depth.
    pub fn unproject_pixel(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if depth <= 0.0 {
            return Err(Error::InvalidDepth(depth));
        }
        Ok(self.center() + depth * self.pixel_offset(pixel))
    }

    /// World-space displacement per unit view depth along the ray through `pixel`.
    pub fn pixel_offset(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        let fx = self.intrinsics[(0, 0)];
        let fy = self.intrinsics[(1, 1)];
        let cx = self.intrinsics[(0, 2)];
        let cy = self.intrinsics[(1, 2)];
        let dir_view = Vector3::new((pixel.x - cx) / fx, (pixel.y - cy) / fy, 1.0);
        self.rotation.transpose() * dir_view
    }

    /// Ray from the camera center through the center of `pixel`.
    pub fn pixel_ray(&self, pixel: Vector2<f64>) -> Ray {
        let offset = self.pixel_offset(&pixel);
        Ray {
            origin: self.center(),
            direction: offset.normalize(),
            source_pixel: pixel,
        }
    }

    /// Whether a continuous pixel position rounds to a pixel inside the image.
    pub fn contains_pixel(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= -0.5
            && pixel.y >= -0.5
            && pixel.x < self.width as f64 - 0.5
            && pixel.y < self.height as f64 - 0.5
    }

    /// Jacobian of `project_point` with respect to the world point, 2x3.
    pub fn projection_jacobian(&self, mu: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
        let v = self.view_point(mu);
        if v.z <= MIN_VIEW_DEPTH {
            return Err(Error::BehindCamera { z: v.z });
        }
        let fx = self.intrinsics[(0, 0)];
        let fy = self.intrinsics[(1, 1)];
        let inv_z = 1.0 / v.z;
        let j_view = Matrix2x3::new(
            fx * inv_z,
            0.0,
            -fx * v.x * inv_z * inv_z,
            0.0,
            fy * inv_z,
            -fy * v.y * inv_z * inv_z,
        );
        Ok(j_view * self.rotation)
    }
}

/// Unit quaternion in (w, x, y, z) storage order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n <= 1e-12 {
            return Err(Error::DegenerateRotation(n));
        }
        Ok(Self {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        })
    }

    /// Rotation matrix of the normalized quaternion.
    pub fn to_rotation(&self) -> Result<Matrix3<f64>> {
        let q = self.normalized()?;
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        Ok(Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ))
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }
}

/// Derivatives of the (unit-input) rotation formula with respect to each
/// quaternion component, in (w, x, y, z) order. Does not include the
/// normalization projection; compose with [`normalize_backward`].
pub fn rotation_quaternion_jacobian(q: &Quaternion) -> [Matrix3<f64>; 4] {
    let (w, x, y, z) = (q.w, q.x, q.y, q.z);
    [
        Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0,
        Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0,
        Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0,
        Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0,
    ]
}

/// Backward of q_hat = q / |q|: maps a gradient on the unit quaternion to a
/// gradient on the raw one.
pub fn normalize_backward(raw: &[f64; 4], grad_unit: &[f64; 4]) -> [f64; 4] {
    let n2: f64 = raw.iter().map(|v| v * v).sum();
    let n = n2.sqrt();
    let dot: f64 = raw
        .iter()
        .zip(grad_unit.iter())
        .map(|(r, g)| r * g)
        .sum::<f64>()
        / n2;
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (grad_unit[i] - raw[i] * dot) / n;
    }
    out
}

/// Symmetric positive semi-definite 3x3 covariance, meters squared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3(pub Matrix3<f64>);

impl Covariance3 {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

/// Covariance from a rotation quaternion and per-axis scales:
/// R diag(s)^2 R'.
pub fn build_covariance(r: &Quaternion, s: &Vector3<f64>) -> Result<Covariance3> {
    if s.x <= 0.0 || s.y <= 0.0 || s.z <= 0.0 {
        return Err(Error::InvalidScale(s.x, s.y, s.z));
    }
    let rot = r.to_rotation()?;
    let sigma = rot * Matrix3::from_diagonal(&s.map(|v| v * v)) * rot.transpose();
    // Symmetrize away the last few ulps of the triple product.
    Ok(Covariance3((sigma + sigma.transpose()) * 0.5))
}

/// 2D image-plane covariance J W Sigma W' J' with W the world-to-camera
/// rotation and J the projection Jacobian at `mu`.
pub fn project_covariance(
    sigma: &Covariance3,
    camera: &Camera,
    mu: &Vector3<f64>,
) -> Result<Matrix2<f64>> {
    let j = camera.projection_jacobian(mu)?;
    let projected = j * sigma.0 * j.transpose();
    Ok((projected + projected.transpose()) * 0.5)
}

/// Ray from a camera center through a source pixel.
#[derive(Debug, Clone)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit direction.
    pub direction: Vector3<f64>,
    pub source_pixel: Vector2<f64>,
}

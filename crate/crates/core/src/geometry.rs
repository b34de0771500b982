//! Pinhole camera, SE(3) poses, and the inverse-warp field that maps every
//! target pixel into a source view, with Jacobians with respect to the
//! pixel's log-depth and a left-multiplied twist increment of the pose.

use nalgebra::{Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::{Error, Result};

/// Points closer than this (in scene units) do not project.
pub const DEFAULT_Z_MIN: f64 = 1e-3;

/// Twist layout: `[wx, wy, wz, vx, vy, vz]` (rotation first).
pub type Twist = [f64; 6];

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite())
            || !(self.cx.is_finite() && self.cy.is_finite())
        {
            return Err(Error::Config(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Unit-depth ray through pixel `(row, col)`.
    #[inline]
    pub fn ray(&self, row: f64, col: f64) -> Vector3<f64> {
        Vector3::new((col - self.cx) / self.fx, (row - self.cy) / self.fy, 1.0)
    }
}

pub fn backproject(k: &Intrinsics, row: f64, col: f64, depth: f64) -> Vector3<f64> {
    k.ray(row, col) * depth
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub valid: bool,
}

/// Projects `p`; `valid` is false (and `u`, `v` are 0) when `p.z < z_min`.
pub fn project(k: &Intrinsics, p: &Vector3<f64>, z_min: f64) -> Projection {
    if !(p.z >= z_min) {
        return Projection { u: 0.0, v: 0.0, valid: false };
    }
    Projection {
        u: k.fx * p.x / p.z + k.cx,
        v: k.fy * p.y / p.z + k.cy,
        valid: true,
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for CameraPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_twist(twist: &Twist) -> Self {
        se3_exp(twist)
    }

    pub fn twist(&self) -> Result<Twist> {
        se3_log(self)
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self * other`: apply `other` first.
    pub fn compose(&self, other: &CameraPose) -> CameraPose {
        CameraPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> CameraPose {
        let rt = self.rotation.transpose();
        CameraPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `exp(delta) * self`, the update used by the optimizer.
    pub fn left_update(&self, delta: &Twist) -> CameraPose {
        se3_exp(delta).compose(self)
    }
}

pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

fn split(twist: &Twist) -> (Vector3<f64>, Vector3<f64>) {
    (
        Vector3::new(twist[0], twist[1], twist[2]),
        Vector3::new(twist[3], twist[4], twist[5]),
    )
}

/// `sin t / t`, `(1 - cos t) / t^2`, `(t - sin t) / t^3`.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-4 {
        (
            1.0 - t2 / 6.0 + t2 * t2 / 120.0,
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta))
    }
}

pub fn se3_exp(twist: &Twist) -> CameraPose {
    let (w, v) = split(twist);
    let theta = w.norm();
    let (a, b, c) = rodrigues_coeffs(theta);
    let wx = hat(&w);
    let wx2 = wx * wx;
    let rotation = Matrix3::identity() + wx * a + wx2 * b;
    let left_jacobian = Matrix3::identity() + wx * b + wx2 * c;
    CameraPose {
        rotation,
        translation: left_jacobian * v,
    }
}

/// Inverse of [`se3_exp`]. Rotation angles within 1e-6 of pi are rejected
/// because the axis is ill-determined there.
pub fn se3_log(pose: &CameraPose) -> Result<Twist> {
    let r = &pose.rotation;
    let skew = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let cos_t = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin_t = 0.5 * skew.norm();
    let theta = sin_t.atan2(cos_t);
    if theta > std::f64::consts::PI - 1e-6 {
        return Err(Error::IllConditioned(format!(
            "rotation angle {theta} is too close to pi for a stable logarithm"
        )));
    }
    let factor = if theta < 1e-4 {
        0.5 * (1.0 + theta * theta / 6.0)
    } else {
        theta / (2.0 * sin_t)
    };
    let w = skew * factor;
    let wx = hat(&w);
    let d = if theta < 1e-4 {
        let t2 = theta * theta;
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let (a, b, _) = rodrigues_coeffs(theta);
        (1.0 - a / (2.0 * b)) / (theta * theta)
    };
    let v_inv = Matrix3::identity() - wx * 0.5 + wx * wx * d;
    let v = v_inv * pose.translation;
    Ok([w.x, w.y, w.z, v.x, v.y, v.z])
}

/// Per-pixel log-depth; depth is `exp(log_depth)` and therefore positive.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthField {
    width: usize,
    height: usize,
    log_depth: Vec<f64>,
}

impl DepthField {
    pub fn from_log_depth(width: usize, height: usize, log_depth: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || log_depth.len() != width * height {
            return Err(Error::Config(format!(
                "depth field of {} values cannot be {width}x{height}",
                log_depth.len()
            )));
        }
        if log_depth.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("log-depth must be finite".into()));
        }
        Ok(Self {
            width,
            height,
            log_depth,
        })
    }

    pub fn from_depth(width: usize, height: usize, depth: &[f64]) -> Result<Self> {
        if let Some(d) = depth.iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
            return Err(Error::Config(format!("depth must be positive and finite, got {d}")));
        }
        Self::from_log_depth(width, height, depth.iter().map(|d| d.ln()).collect())
    }

    pub fn constant(width: usize, height: usize, depth: f64) -> Result<Self> {
        Self::from_depth(width, height, &vec![depth; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn log_depth(&self) -> &[f64] {
        &self.log_depth
    }

    pub fn log_depth_mut(&mut self) -> &mut [f64] {
        &mut self.log_depth
    }

    #[inline]
    pub fn depth_at(&self, index: usize) -> f64 {
        self.log_depth[index].exp()
    }

    pub fn depths(&self) -> Vec<f64> {
        self.log_depth.iter().map(|l| l.exp()).collect()
    }
}

/// Coordinates, validity, depth and twist Jacobians of one pixel.
type PixelWarp = ([f64; 2], bool, [f64; 2], [[f64; 6]; 2]);

/// Where each target pixel lands in a source view.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    pub width: usize,
    pub height: usize,
    /// `(u*, v*)` per target pixel.
    pub coords: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
    /// `d(u*, v*) / d log_depth`.
    pub j_depth: Vec<[f64; 2]>,
    /// `d(u*, v*) / d twist` for a left increment; rows are u and v.
    pub j_twist: Vec<[[f64; 6]; 2]>,
}

impl WarpField {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Inverse warp for a source image of size `source_dims = (width, height)`.
pub fn compute_warp(
    depth: &DepthField,
    k: &Intrinsics,
    pose: &CameraPose,
    source_dims: (usize, usize),
    z_min: f64,
) -> WarpField {
    let (w, h) = (depth.width, depth.height);
    let (sw, sh) = (source_dims.0 as f64, source_dims.1 as f64);
    let per_pixel: Vec<PixelWarp> = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let (row, col) = ((idx / w) as f64, (idx % w) as f64);
            let d = depth.depth_at(idx);
            let ray = k.ray(row, col);
            // scale-free form: xs = d * q with q = R ray + t / d. Writing the
            // projection as an offset from (col, row) keeps the identity
            // warp exact.
            let q = pose.rotation * ray + pose.translation / d;
            let xs = q * d;
            if !(xs.z >= z_min) {
                return ([0.0, 0.0], false, [0.0; 2], [[0.0; 6]; 2]);
            }
            let u = col + k.fx * (q.x / q.z - ray.x);
            let v = row + k.fy * (q.y / q.z - ray.y);
            let inside = u >= 0.0 && u <= sw - 1.0 && v >= 0.0 && v <= sh - 1.0;
            if !inside {
                return ([u, v], false, [0.0; 2], [[0.0; 6]; 2]);
            }
            let iz = 1.0 / xs.z;
            let d_proj = Matrix2x3::new(
                k.fx * iz,
                0.0,
                -k.fx * xs.x * iz * iz,
                0.0,
                k.fy * iz,
                -k.fy * xs.y * iz * iz,
            );
            // d xs / d log_depth = R X = xs - t, and the projection Jacobian
            // annihilates xs itself
            let jd = -(d_proj * pose.translation);
            let jr = d_proj * (-hat(&xs));
            let mut jt = [[0.0; 6]; 2];
            for r in 0..2 {
                for c in 0..3 {
                    jt[r][c] = jr[(r, c)];
                    jt[r][c + 3] = d_proj[(r, c)];
                }
            }
            ([u, v], true, [jd.x, jd.y], jt)
        })
        .collect();

    let mut field = WarpField {
        width: w,
        height: h,
        coords: Vec::with_capacity(w * h),
        valid: Vec::with_capacity(w * h),
        j_depth: Vec::with_capacity(w * h),
        j_twist: Vec::with_capacity(w * h),
    };
    for (c, v, jd, jt) in per_pixel {
        field.coords.push(c);
        field.valid.push(v);
        field.j_depth.push(jd);
        field.j_twist.push(jt);
    }
    field
}

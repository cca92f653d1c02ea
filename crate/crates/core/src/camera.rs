//! Pinhole cameras and rigid poses.
//!
//! Pixel centers sit at integer coordinates: pixel `(i, j)` is the point
//! `(i, j)` in image space, and a camera-space direction is
//! `((u - cx) / fx, (v - cy) / fy, 1)`. Camera space looks down `+z` with
//! `+y` pointing down the image. Poses map camera to world.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Centered principal point and a square-pixel focal length derived
    /// from the horizontal field of view (radians).
    pub fn from_fov(width: usize, height: usize, fov_x: f64) -> Self {
        let f = (width as f64 / 2.0) / (fov_x / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_focal = self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite();
        if !ok_focal {
            return Err(Error::Schema(format!(
                "intrinsics: focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Schema(
                "intrinsics: width and height must be positive".into(),
            ));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::Schema(format!(
                "intrinsics: principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Same camera at a different resolution (principal point and focal
    /// lengths scale with the image).
    pub fn scaled_to(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }
}

/// Camera-to-world rigid transform, row-major 4x4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Pose(pub [f64; 16]);

impl Pose {
    pub const IDENTITY: Pose = Pose([
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    ]);

    pub fn from_rotation_translation(r: [[f64; 3]; 3], t: Vec3) -> Self {
        Pose([
            r[0][0], r[0][1], r[0][2], t[0], //
            r[1][0], r[1][1], r[1][2], t[1], //
            r[2][0], r[2][1], r[2][2], t[2], //
            0.0, 0.0, 0.0, 1.0,
        ])
    }

    /// Camera at `eye` looking at `target`; `up` is the world direction
    /// that should appear upward in the image.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = normalize(sub(target, eye));
        let right = normalize(cross(forward, up));
        let down = cross(forward, right);
        // columns are the camera axes in world space
        let r = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        Self::from_rotation_translation(r, eye)
    }

    #[inline]
    pub fn rotation(&self, row: usize, col: usize) -> f64 {
        self.0[row * 4 + col]
    }

    #[inline]
    pub fn translation(&self) -> Vec3 {
        [self.0[3], self.0[7], self.0[11]]
    }

    /// Rotates a camera-space direction into world space.
    #[inline]
    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[4] * v[0] + m[5] * v[1] + m[6] * v[2],
            m[8] * v[0] + m[9] * v[1] + m[10] * v[2],
        ]
    }

    /// Maps a world point into camera space.
    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        let d = sub(p, self.translation());
        let m = &self.0;
        // transpose of the rotation block
        [
            m[0] * d[0] + m[4] * d[1] + m[8] * d[2],
            m[1] * d[0] + m[5] * d[1] + m[9] * d[2],
            m[2] * d[0] + m[6] * d[1] + m[10] * d[2],
        ]
    }

    /// Checks orthonormality of the rotation block (tolerance `tol`),
    /// determinant +1, and a `[0, 0, 0, 1]` bottom row.
    pub fn check_rigid(&self, tol: f64) -> std::result::Result<(), String> {
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err("pose has non-finite entries".into());
        }
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3)
                    .map(|k| self.rotation(k, i) * self.rotation(k, j))
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (d - expect).abs() > tol {
                    return Err(format!(
                        "pose rotation not orthonormal (R^T R [{i}][{j}] = {d})"
                    ));
                }
            }
        }
        let c0 = [
            self.rotation(0, 0),
            self.rotation(1, 0),
            self.rotation(2, 0),
        ];
        let c1 = [
            self.rotation(0, 1),
            self.rotation(1, 1),
            self.rotation(2, 1),
        ];
        let c2 = [
            self.rotation(0, 2),
            self.rotation(1, 2),
            self.rotation(2, 2),
        ];
        let det = dot(cross(c0, c1), c2);
        if (det - 1.0).abs() > tol {
            return Err(format!("pose rotation has determinant {det}, expected +1"));
        }
        if self.0[12..] != [0.0, 0.0, 0.0, 1.0] {
            return Err("pose bottom row must be [0, 0, 0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
}

impl Ray {
    #[inline]
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.dir, t))
    }

    /// Entry/exit distances through the box `[lo, hi]^3`, if the ray hits it
    /// in front of the origin.
    pub fn intersect_cube(&self, lo: f64, hi: f64) -> Option<(f64, f64)> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let inv = 1.0 / self.dir[a];
            let mut ta = (lo - self.origin[a]) * inv;
            let mut tb = (hi - self.origin[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            // NaN from 0 * inf means the ray runs inside a slab face; keep bounds
            if !ta.is_nan() {
                t0 = t0.max(ta);
            }
            if !tb.is_nan() {
                t1 = t1.min(tb);
            }
        }
        (t1 > t0).then_some((t0, t1))
    }
}

/// Ray from the camera center through the pixel at image coordinates `(u, v)`.
pub fn pixel_ray(k: &Intrinsics, pose: &Pose, u: f64, v: f64) -> Ray {
    let d_cam = [(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0];
    Ray {
        origin: pose.translation(),
        dir: normalize(pose.rotate(d_cam)),
    }
}

/// Projects a world point; `None` when it lies behind the camera.
pub fn project(k: &Intrinsics, pose: &Pose, p: Vec3) -> Option<[f64; 2]> {
    let c = pose.world_to_camera(p);
    (c[2] > 1e-9).then(|| [k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy])
}

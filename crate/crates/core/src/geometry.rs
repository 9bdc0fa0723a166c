//! Pinhole camera model and LiDAR-to-image projection.
//!
//! Conventions: 3D points live in the LiDAR frame (meters). The camera
//! extrinsics map them into the camera frame (`x` right, `y` down, `z`
//! forward). Image coordinates have their origin at the top-left corner,
//! `u` runs along the width and `v` along the height, and pixel centers sit
//! at integer coordinates. No lens distortion is modelled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points closer to the image plane than this are rejected by [`project`].
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ZERO: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Point3 { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }

    pub fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }

    pub fn scale(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Point3) -> f64 {
        self.sub(o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub u: f64,
    pub v: f64,
}

impl Point2 {
    pub const fn new(u: f64, v: f64) -> Self {
        Point2 { u, v }
    }

    pub fn distance_sq(self, o: Point2) -> f64 {
        let du = self.u - o.u;
        let dv = self.v - o.v;
        du * du + dv * dv
    }

    pub fn distance(self, o: Point2) -> f64 {
        self.distance_sq(o).sqrt()
    }
}

/// A projected point: pixel coordinates plus camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Point2,
    pub depth: f64,
}

/// Row-major 3x3 matrix.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_vec(m: &Mat3, p: Point3) -> Point3 {
    Point3::new(
        m[0][0] * p.x + m[0][1] * p.y + m[0][2] * p.z,
        m[1][0] * p.x + m[1][1] * p.y + m[1][2] * p.z,
        m[2][0] * p.x + m[2][1] * p.y + m[2][2] * p.z,
    )
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn determinant(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Rotation about the LiDAR `z` axis (a rotation in the X-Y plane).
pub fn rotation_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation matrix for a unit axis and angle (Rodrigues).
pub fn rotation_axis_angle(axis: Point3, angle: f64) -> Mat3 {
    let a = axis.scale(1.0 / axis.norm());
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [
            t * a.x * a.x + c,
            t * a.x * a.y - s * a.z,
            t * a.x * a.z + s * a.y,
        ],
        [
            t * a.x * a.y + s * a.z,
            t * a.y * a.y + c,
            t * a.y * a.z - s * a.x,
        ],
        [
            t * a.x * a.z - s * a.y,
            t * a.y * a.z + s * a.x,
            t * a.z * a.z + c,
        ],
    ]
}

/// Extrinsic rotation for a camera looking down the LiDAR `+x` axis with
/// LiDAR `z` up: camera `x` = -LiDAR `y`, camera `y` = -LiDAR `z`.
pub const LIDAR_TO_FORWARD_CAMERA: Mat3 = [[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]];

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraRecord", into = "CameraRecord")]
pub struct CameraModel {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: Mat3,
    translation: Point3,
    width: u32,
    height: u32,
}

impl CameraModel {
    /// Builds a camera, checking focal lengths, image size and that the
    /// rotation is a proper orthonormal matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Point3,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::config(format!(
                "focal lengths must be positive, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite() && translation.is_finite()) {
            return Err(Error::config(
                "principal point and translation must be finite",
            ));
        }
        if width == 0 || height == 0 {
            return Err(Error::config("image dimensions must be positive"));
        }
        let rtr = mat_mul(&transpose(&rotation), &rotation);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rtr[i][j] - expect).abs() > ORTHONORMAL_TOL {
                    return Err(Error::config("rotation is not orthonormal"));
                }
            }
        }
        if (determinant(&rotation) - 1.0).abs() > ORTHONORMAL_TOL {
            return Err(Error::config("rotation must have determinant +1"));
        }
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Identity extrinsics: the LiDAR frame already is the camera frame.
    pub fn with_identity_extrinsics(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        Self::new(fx, fy, cx, cy, IDENTITY, Point3::ZERO, width, height)
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }
    pub fn fy(&self) -> f64 {
        self.fy
    }
    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }
    pub fn translation(&self) -> Point3 {
        self.translation
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }

    /// LiDAR frame -> camera frame.
    pub fn to_camera_frame(&self, p: Point3) -> Point3 {
        mat_vec(&self.rotation, p).add(self.translation)
    }

    /// Camera frame -> LiDAR frame.
    pub fn to_lidar_frame(&self, p: Point3) -> Point3 {
        mat_vec(&transpose(&self.rotation), p.sub(self.translation))
    }

    /// Camera center expressed in the LiDAR frame.
    pub fn center(&self) -> Point3 {
        self.to_lidar_frame(Point3::ZERO)
    }

    /// Closed-form inverse of [`project`]: the LiDAR-frame point at camera
    /// depth `depth` that lands on `pixel`.
    pub fn back_project(&self, pixel: Point2, depth: f64) -> Point3 {
        let xc = (pixel.u - self.cx) / self.fx * depth;
        let yc = (pixel.v - self.cy) / self.fy * depth;
        self.to_lidar_frame(Point3::new(xc, yc, depth))
    }

    pub fn in_image(&self, pixel: Point2) -> bool {
        pixel.u >= 0.0
            && pixel.v >= 0.0
            && pixel.u < f64::from(self.width)
            && pixel.v < f64::from(self.height)
    }
}

#[derive(Serialize, Deserialize)]
struct CameraRecord {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
    width: u32,
    height: u32,
}

impl TryFrom<CameraRecord> for CameraModel {
    type Error = Error;
    fn try_from(r: CameraRecord) -> Result<Self> {
        let m = r.rotation;
        CameraModel::new(
            r.fx,
            r.fy,
            r.cx,
            r.cy,
            [[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]],
            Point3::from_array(r.translation),
            r.width,
            r.height,
        )
    }
}

impl From<CameraModel> for CameraRecord {
    fn from(c: CameraModel) -> Self {
        let r = c.rotation;
        CameraRecord {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            rotation: [
                r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
            ],
            translation: c.translation.to_array(),
            width: c.width,
            height: c.height,
        }
    }
}

/// Projects a LiDAR-frame point to pixel coordinates and camera depth.
pub fn project(cam: &CameraModel, p: Point3) -> Result<Projection> {
    project_indexed(cam, p, 0)
}

fn project_indexed(cam: &CameraModel, p: Point3, index: usize) -> Result<Projection> {
    let c = cam.to_camera_frame(p);
    if !(c.z > MIN_DEPTH) {
        return Err(Error::NonPositiveDepth { index, depth: c.z });
    }
    let pixel = Point2::new(cam.fx * (c.x / c.z) + cam.cx, cam.fy * (c.y / c.z) + cam.cy);
    Ok(Projection { pixel, depth: c.z })
}

/// Projects every point; the error carries the index of the first failure.
pub fn project_cloud(cam: &CameraModel, points: &[Point3]) -> Result<Vec<Projection>> {
    points
        .iter()
        .enumerate()
        .map(|(i, &p)| project_indexed(cam, p, i))
        .collect()
}

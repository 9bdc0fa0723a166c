//! One pedestrian sample: a projected point cloud plus keypoint labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_cloud, CameraModel, Point2, Point3};
use crate::keypoints::{Visibility, NUM_KEYPOINTS};

/// A LiDAR point with its cached image projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenePoint {
    pub position: Point3,
    pub pixel: Point2,
    pub depth: f64,
}

/// A 2D keypoint annotation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Keypoint2d {
    pub pixel: Point2,
    pub visible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SceneRecord", into = "SceneRecord")]
pub struct Scene {
    pub scene_id: String,
    pub camera: CameraModel,
    pub points: Vec<ScenePoint>,
    pub keypoints_2d: [Keypoint2d; NUM_KEYPOINTS],
    pub keypoints_3d_gt: Option<[Point3; NUM_KEYPOINTS]>,
}

/// Tolerance when checking cached projections against recomputed ones.
const PROJECTION_TOL: f64 = 1e-9;

impl Scene {
    /// Builds a scene from LiDAR-frame points, projecting them through `camera`.
    pub fn new(
        scene_id: impl Into<String>,
        camera: CameraModel,
        positions: &[Point3],
        keypoints_2d: [Keypoint2d; NUM_KEYPOINTS],
        keypoints_3d_gt: Option<[Point3; NUM_KEYPOINTS]>,
    ) -> Result<Self> {
        let proj = project_cloud(&camera, positions)?;
        let points = positions
            .iter()
            .zip(proj)
            .map(|(&position, p)| ScenePoint {
                position,
                pixel: p.pixel,
                depth: p.depth,
            })
            .collect();
        Ok(Scene {
            scene_id: scene_id.into(),
            camera,
            points,
            keypoints_2d,
            keypoints_3d_gt,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> impl ExactSizeIterator<Item = Point3> + '_ {
        self.points.iter().map(|p| p.position)
    }

    pub fn pixels(&self) -> impl ExactSizeIterator<Item = Point2> + '_ {
        self.points.iter().map(|p| p.pixel)
    }

    pub fn visibility(&self) -> Visibility {
        let mut v = [false; NUM_KEYPOINTS];
        for (dst, kp) in v.iter_mut().zip(&self.keypoints_2d) {
            *dst = kp.visible;
        }
        v
    }

    /// A scene restricted to the given point indices (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Scene {
        Scene {
            scene_id: self.scene_id.clone(),
            camera: self.camera.clone(),
            points: indices.iter().map(|&i| self.points[i]).collect(),
            keypoints_2d: self.keypoints_2d,
            keypoints_3d_gt: self.keypoints_3d_gt,
        }
    }

    /// Checks that every cached projection matches a fresh projection.
    pub fn verify_projections(&self) -> Result<()> {
        let positions: Vec<Point3> = self.positions().collect();
        let fresh = project_cloud(&self.camera, &positions)?;
        for (i, (cached, p)) in self.points.iter().zip(&fresh).enumerate() {
            let tol = PROJECTION_TOL * (1.0 + cached.pixel.u.abs().max(cached.pixel.v.abs()));
            if (cached.pixel.u - p.pixel.u).abs() > tol
                || (cached.pixel.v - p.pixel.v).abs() > tol
                || (cached.depth - p.depth).abs() > PROJECTION_TOL * (1.0 + p.depth)
            {
                return Err(Error::Format(format!(
                    "cached projection of point {i} is stale"
                )));
            }
        }
        Ok(())
    }

    pub fn centroid(&self) -> Option<Point3> {
        centroid(self.positions())
    }
}

pub fn centroid(points: impl ExactSizeIterator<Item = Point3>) -> Option<Point3> {
    let n = points.len();
    if n == 0 {
        return None;
    }
    let sum = points.fold(Point3::ZERO, Point3::add);
    Some(sum.scale(1.0 / n as f64))
}

/// On-disk layout: `points` rows are `[x, y, z, u, v, depth]`,
/// `keypoints_2d` rows are `[u, v, visibility]`.
#[derive(Serialize, Deserialize)]
struct SceneRecord {
    scene_id: String,
    camera: CameraModel,
    points: Vec<[f64; 6]>,
    keypoints_2d: Vec<[f64; 3]>,
    keypoints_3d_gt: Option<Vec<[f64; 3]>>,
}

impl From<Scene> for SceneRecord {
    fn from(s: Scene) -> Self {
        SceneRecord {
            scene_id: s.scene_id,
            camera: s.camera,
            points: s
                .points
                .iter()
                .map(|p| {
                    [
                        p.position.x,
                        p.position.y,
                        p.position.z,
                        p.pixel.u,
                        p.pixel.v,
                        p.depth,
                    ]
                })
                .collect(),
            keypoints_2d: s
                .keypoints_2d
                .iter()
                .map(|k| [k.pixel.u, k.pixel.v, if k.visible { 1.0 } else { 0.0 }])
                .collect(),
            keypoints_3d_gt: s
                .keypoints_3d_gt
                .map(|g| g.iter().map(|p| p.to_array()).collect()),
        }
    }
}

impl TryFrom<SceneRecord> for Scene {
    type Error = Error;

    fn try_from(r: SceneRecord) -> Result<Self> {
        if r.keypoints_2d.len() != NUM_KEYPOINTS {
            return Err(Error::Format(format!(
                "expected {NUM_KEYPOINTS} 2D keypoints, found {}",
                r.keypoints_2d.len()
            )));
        }
        let mut keypoints_2d = [Keypoint2d::default(); NUM_KEYPOINTS];
        for (dst, row) in keypoints_2d.iter_mut().zip(&r.keypoints_2d) {
            let visible = match row[2] {
                v if v == 0.0 => false,
                v if v == 1.0 => true,
                v => {
                    return Err(Error::Format(format!(
                        "visibility must be 0 or 1, found {v}"
                    )))
                }
            };
            *dst = Keypoint2d {
                pixel: Point2::new(row[0], row[1]),
                visible,
            };
        }
        let keypoints_3d_gt = match r.keypoints_3d_gt {
            None => None,
            Some(rows) => {
                if rows.len() != NUM_KEYPOINTS {
                    return Err(Error::Format(format!(
                        "expected {NUM_KEYPOINTS} 3D keypoints, found {}",
                        rows.len()
                    )));
                }
                let mut gt = [Point3::ZERO; NUM_KEYPOINTS];
                for (dst, row) in gt.iter_mut().zip(rows) {
                    *dst = Point3::from_array(row);
                }
                Some(gt)
            }
        };
        let points = r
            .points
            .into_iter()
            .map(|row| ScenePoint {
                position: Point3::new(row[0], row[1], row[2]),
                pixel: Point2::new(row[3], row[4]),
                depth: row[5],
            })
            .collect();
        let scene = Scene {
            scene_id: r.scene_id,
            camera: r.camera,
            points,
            keypoints_2d,
            keypoints_3d_gt,
        };
        scene.verify_projections()?;
        Ok(scene)
    }
}

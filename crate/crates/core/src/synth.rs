//! Procedural pedestrian scenes.
//!
//! A scene is built in four steps: an articulated 13-joint skeleton is posed
//! by forward kinematics, its surface is sampled as cylinders around the
//! bones plus a sphere at the head, a LiDAR model keeps only the nearest
//! return per angular bucket and drops points shadowed by an optional box
//! occluder, and finally the surviving points and joints are projected into a
//! camera aimed at the person. Ground-truth joints travel with the scene so
//! label quality can be measured.
//!
//! LiDAR frame: `x` forward, `y` left, `z` up, sensor at the origin.

use std::collections::HashMap;
use std::f64::consts::{PI, TAU};
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project, CameraModel, Mat3, Point2, Point3};
use crate::keypoints::{Keypoint, Visibility, NUM_KEYPOINTS};
use crate::par::*;
use crate::rng::{self, Rng};
use crate::scene::{Keypoint2d, Scene};

/// Scenes with fewer surviving points than this are rejected.
pub const MIN_SCENE_POINTS: usize = 8;

/// Ground plane height in the LiDAR frame.
const GROUND_Z: f64 = -1.6;

/// Camera center in the LiDAR frame; the sensors are not co-located.
const CAMERA_OFFSET: Point3 = Point3::new(0.05, 0.0, -0.15);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseFamily {
    Standing,
    Walking,
    Cycling,
    RandomArticulation,
}

impl PoseFamily {
    pub const ALL: [PoseFamily; 4] = [
        PoseFamily::Standing,
        PoseFamily::Walking,
        PoseFamily::Cycling,
        PoseFamily::RandomArticulation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoseFamily::Standing => "standing",
            PoseFamily::Walking => "walking",
            PoseFamily::Cycling => "cycling",
            PoseFamily::RandomArticulation => "random_articulation",
        }
    }
}

impl FromStr for PoseFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standing" => Ok(PoseFamily::Standing),
            "walking" => Ok(PoseFamily::Walking),
            "cycling" => Ok(PoseFamily::Cycling),
            "random" | "random_articulation" => Ok(PoseFamily::RandomArticulation),
            other => Err(Error::config(format!("unknown pose family '{other}'"))),
        }
    }
}

/// Axis-aligned box in the LiDAR frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(min: Point3, max: Point3) -> Result<Self> {
        if !(min.x <= max.x && min.y <= max.y && min.z <= max.z)
            || !min.is_finite()
            || !max.is_finite()
        {
            return Err(Error::config("occluder box min must not exceed max"));
        }
        Ok(Aabb { min, max })
    }

    pub fn contains(&self, p: Point3) -> bool {
        (self.min.x..=self.max.x).contains(&p.x)
            && (self.min.y..=self.max.y).contains(&p.y)
            && (self.min.z..=self.max.z).contains(&p.z)
    }

    /// Whether the segment `origin -> target` enters the box before it
    /// reaches `target` (slab test). A target inside the box counts as hit.
    pub fn blocks(&self, origin: Point3, target: Point3) -> bool {
        let o = origin.to_array();
        let d = target.sub(origin).to_array();
        let lo = self.min.to_array();
        let hi = self.max.to_array();
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for axis in 0..3 {
            if d[axis].abs() < 1e-15 {
                if o[axis] < lo[axis] || o[axis] > hi[axis] {
                    return false;
                }
            } else {
                let ta = (lo[axis] - o[axis]) / d[axis];
                let tb = (hi[axis] - o[axis]) / d[axis];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
                if t0 > t1 {
                    return false;
                }
            }
        }
        t0 <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub rng_seed: u64,
    /// Surface samples before LiDAR culling.
    pub n_surface_points: usize,
    pub limb_radius: f64,
    pub occluder_spec: Option<Aabb>,
    /// LiDAR ray spacing, radians.
    pub angular_resolution: f64,
    /// Isotropic Gaussian jitter, meters.
    pub noise_sigma: f64,
    pub image_width: u32,
    pub image_height: u32,
    /// Fraction of the half-image the outermost joint may reach.
    pub person_fill: f64,
    /// Range of the person from the sensor, meters.
    pub range_min: f64,
    pub range_max: f64,
    /// Body heading in the LiDAR x-y plane, radians; drawn uniformly when
    /// unset. `π` faces the sensor.
    pub heading: Option<f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            rng_seed: 0,
            n_surface_points: 2048,
            limb_radius: 0.07,
            occluder_spec: None,
            angular_resolution: DEFAULT_ANGULAR_RESOLUTION,
            noise_sigma: 0.005,
            image_width: 256,
            image_height: 256,
            person_fill: 0.8,
            range_min: 8.0,
            range_max: 12.0,
            heading: None,
        }
    }
}

/// Default LiDAR ray spacing (radians); leaves a few hundred returns on a
/// pedestrian at 10 m.
pub const DEFAULT_ANGULAR_RESOLUTION: f64 = 0.0035;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_surface_points < 1 {
            return Err(Error::config("n_surface_points must be at least 1"));
        }
        if !(self.limb_radius > 0.0 && self.limb_radius <= 0.3) {
            return Err(Error::config("limb_radius must lie in (0, 0.3]"));
        }
        if !(self.angular_resolution > 0.0 && self.angular_resolution.is_finite()) {
            return Err(Error::config("angular_resolution must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma must be non-negative"));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(Error::config("image dimensions must be positive"));
        }
        if !(self.person_fill > 0.0 && self.person_fill <= 1.0) {
            return Err(Error::config("person_fill must lie in (0, 1]"));
        }
        if !(self.range_min > 1.0 && self.range_min <= self.range_max) {
            return Err(Error::config(
                "range must satisfy 1 < range_min <= range_max",
            ));
        }
        Ok(())
    }
}

/// A posed skeleton in the LiDAR frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonPose {
    pub joints: [Point3; NUM_KEYPOINTS],
    pub visibility: Visibility,
    /// Center of the head sphere; the nose sits slightly in front of it.
    pub head_center: Point3,
}

/// Bones carrying a surface cylinder, as keypoint pairs.
pub const BONES: [(Keypoint, Keypoint); 12] = [
    (Keypoint::LeftShoulder, Keypoint::RightShoulder),
    (Keypoint::LeftHip, Keypoint::RightHip),
    (Keypoint::LeftShoulder, Keypoint::LeftHip),
    (Keypoint::RightShoulder, Keypoint::RightHip),
    (Keypoint::LeftShoulder, Keypoint::LeftElbow),
    (Keypoint::LeftElbow, Keypoint::LeftWrist),
    (Keypoint::RightShoulder, Keypoint::RightElbow),
    (Keypoint::RightElbow, Keypoint::RightWrist),
    (Keypoint::LeftHip, Keypoint::LeftKnee),
    (Keypoint::LeftKnee, Keypoint::LeftAnkle),
    (Keypoint::RightHip, Keypoint::RightKnee),
    (Keypoint::RightKnee, Keypoint::RightAnkle),
];

/// Bone length bounds (meters) for limb segments and body widths.
pub const LIMB_LENGTH_RANGE: (f64, f64) = (0.15, 0.60);
pub const BODY_WIDTH_RANGE: (f64, f64) = (0.20, 0.55);

impl SkeletonPose {
    pub fn joint(&self, k: Keypoint) -> Point3 {
        self.joints[k.index()]
    }

    pub fn shoulder_center(&self) -> Point3 {
        self.joint(Keypoint::LeftShoulder)
            .add(self.joint(Keypoint::RightShoulder))
            .scale(0.5)
    }

    /// Every surface-carrying segment, including the neck.
    pub fn segments(&self) -> Vec<(Point3, Point3)> {
        let mut segs: Vec<_> = BONES
            .iter()
            .map(|&(a, b)| (self.joint(a), self.joint(b)))
            .collect();
        segs.push((self.shoulder_center(), self.head_center));
        segs
    }

    /// Limb segment lengths (upper arms, forearms, thighs, shins).
    pub fn limb_lengths(&self) -> [f64; 8] {
        use Keypoint::*;
        let d = |a: Keypoint, b: Keypoint| self.joint(a).distance(self.joint(b));
        [
            d(LeftShoulder, LeftElbow),
            d(RightShoulder, RightElbow),
            d(LeftElbow, LeftWrist),
            d(RightElbow, RightWrist),
            d(LeftHip, LeftKnee),
            d(RightHip, RightKnee),
            d(LeftKnee, LeftAnkle),
            d(RightKnee, RightAnkle),
        ]
    }

    pub fn body_widths(&self) -> [f64; 2] {
        use Keypoint::*;
        [
            self.joint(LeftShoulder).distance(self.joint(RightShoulder)),
            self.joint(LeftHip).distance(self.joint(RightHip)),
        ]
    }

    pub fn check_anthropometry(&self) -> Result<()> {
        let (lo, hi) = LIMB_LENGTH_RANGE;
        if let Some(l) = self.limb_lengths().iter().find(|l| !(lo..=hi).contains(*l)) {
            return Err(Error::config(format!(
                "limb length {l} outside [{lo}, {hi}]"
            )));
        }
        let (lo, hi) = BODY_WIDTH_RANGE;
        if let Some(w) = self.body_widths().iter().find(|w| !(lo..=hi).contains(*w)) {
            return Err(Error::config(format!(
                "body width {w} outside [{lo}, {hi}]"
            )));
        }
        if !self.joints.iter().all(|j| j.is_finite()) {
            return Err(Error::config("non-finite joint"));
        }
        Ok(())
    }
}

fn deg(d: f64) -> f64 {
    d.to_radians()
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Orthonormal body frame: forward, left, up.
struct BodyFrame {
    f: Point3,
    l: Point3,
    u: Point3,
}

impl BodyFrame {
    /// Direction hanging straight down, swung forward by `flex` in the
    /// sagittal plane and then outward by `abduct` (side = +1 left, -1 right).
    fn limb_dir(&self, flex: f64, abduct: f64, side: f64) -> Point3 {
        let sag = self.u.scale(-flex.cos()).add(self.f.scale(flex.sin()));
        sag.scale(abduct.cos())
            .add(self.l.scale(side * abduct.sin()))
    }
}

/// Joint angles for one side of the body (radians).
#[derive(Clone, Copy)]
struct LimbAngles {
    hip_flex: f64,
    knee_flex: f64,
    hip_abduct: f64,
    shoulder_flex: f64,
    shoulder_abduct: f64,
    elbow_flex: f64,
}

fn sample_angles(rng: &mut Rng, family: PoseFamily) -> (f64, [LimbAngles; 2]) {
    match family {
        PoseFamily::Standing => {
            let lean = deg(uniform(rng, -3.0, 5.0));
            let mut side = || LimbAngles {
                hip_flex: deg(uniform(rng, -5.0, 8.0)),
                knee_flex: deg(uniform(rng, 0.0, 10.0)),
                hip_abduct: deg(uniform(rng, 0.0, 6.0)),
                shoulder_flex: deg(uniform(rng, -10.0, 15.0)),
                shoulder_abduct: deg(uniform(rng, 5.0, 20.0)),
                elbow_flex: deg(uniform(rng, 0.0, 25.0)),
            };
            (lean, [side(), side()])
        }
        PoseFamily::Walking => {
            let lean = deg(uniform(rng, 0.0, 8.0));
            let phase = uniform(rng, 0.0, TAU);
            let amp = deg(uniform(rng, 15.0, 30.0));
            let mut side = |sign: f64| {
                let swing = sign * amp * phase.sin();
                LimbAngles {
                    hip_flex: swing,
                    knee_flex: deg(5.0) + deg(45.0) * (0.5 + 0.5 * (phase + sign * PI / 2.0).sin()),
                    hip_abduct: deg(uniform(rng, 0.0, 5.0)),
                    shoulder_flex: -0.8 * swing,
                    shoulder_abduct: deg(uniform(rng, 5.0, 12.0)),
                    elbow_flex: deg(uniform(rng, 10.0, 40.0)),
                }
            };
            (lean, [side(1.0), side(-1.0)])
        }
        PoseFamily::Cycling => {
            let lean = deg(uniform(rng, 15.0, 35.0));
            let phase = uniform(rng, 0.0, TAU);
            let mut side = |sign: f64| {
                let ph = phase + if sign > 0.0 { 0.0 } else { PI };
                LimbAngles {
                    hip_flex: deg(60.0) + deg(25.0) * ph.sin(),
                    knee_flex: deg(70.0) + deg(30.0) * ph.cos(),
                    hip_abduct: deg(uniform(rng, 2.0, 10.0)),
                    shoulder_flex: deg(uniform(rng, 45.0, 75.0)),
                    shoulder_abduct: deg(uniform(rng, 5.0, 15.0)),
                    elbow_flex: deg(uniform(rng, 10.0, 35.0)),
                }
            };
            (lean, [side(1.0), side(-1.0)])
        }
        PoseFamily::RandomArticulation => {
            let lean = deg(uniform(rng, -10.0, 30.0));
            let mut side = || LimbAngles {
                hip_flex: deg(uniform(rng, -30.0, 100.0)),
                knee_flex: deg(uniform(rng, 0.0, 120.0)),
                hip_abduct: deg(uniform(rng, 0.0, 30.0)),
                shoulder_flex: deg(uniform(rng, -40.0, 170.0)),
                shoulder_abduct: deg(uniform(rng, 0.0, 90.0)),
                elbow_flex: deg(uniform(rng, 0.0, 140.0)),
            };
            (lean, [side(), side()])
        }
    }
}

/// Poses a skeleton by forward kinematics. Deterministic in
/// `(config.rng_seed, family)`.
pub fn generate_skeleton(config: &SynthConfig, family: PoseFamily) -> SkeletonPose {
    let mut rng = rng::stream(config.rng_seed, "skeleton", 0);
    let scale = uniform(&mut rng, 0.9, 1.1);
    let thigh = uniform(&mut rng, 0.40, 0.48) * scale;
    let shin = uniform(&mut rng, 0.38, 0.46) * scale;
    let upper_arm = uniform(&mut rng, 0.27, 0.33) * scale;
    let forearm = uniform(&mut rng, 0.24, 0.29) * scale;
    let hip_width = uniform(&mut rng, 0.24, 0.32) * scale;
    let shoulder_width = uniform(&mut rng, 0.34, 0.42) * scale;
    let torso = uniform(&mut rng, 0.48, 0.56) * scale;
    let neck = uniform(&mut rng, 0.18, 0.22) * scale;

    let drawn = uniform(&mut rng, 0.0, TAU);
    let heading = config.heading.unwrap_or(drawn);
    let range = uniform(&mut rng, config.range_min, config.range_max);
    let bearing = uniform(&mut rng, -0.15, 0.15);
    let (lean, sides) = sample_angles(&mut rng, family);

    let (sh, ch) = heading.sin_cos();
    let body = BodyFrame {
        f: Point3::new(ch, sh, 0.0),
        l: Point3::new(-sh, ch, 0.0),
        u: Point3::new(0.0, 0.0, 1.0),
    };
    // Torso leans forward about the left axis.
    let torso_up = body.u.scale(lean.cos()).add(body.f.scale(lean.sin()));
    let torso_fwd = body.f.scale(lean.cos()).sub(body.u.scale(lean.sin()));

    let hip_center = Point3::ZERO;
    let shoulder_center = hip_center.add(torso_up.scale(torso));
    let mut j = [Point3::ZERO; NUM_KEYPOINTS];
    use Keypoint::*;
    for (side_idx, &sign) in [1.0f64, -1.0].iter().enumerate() {
        let a = sides[side_idx];
        let (hip, knee, ankle, shoulder, elbow, wrist) = if sign > 0.0 {
            (
                LeftHip,
                LeftKnee,
                LeftAnkle,
                LeftShoulder,
                LeftElbow,
                LeftWrist,
            )
        } else {
            (
                RightHip,
                RightKnee,
                RightAnkle,
                RightShoulder,
                RightElbow,
                RightWrist,
            )
        };
        j[hip.index()] = hip_center.add(body.l.scale(sign * hip_width / 2.0));
        j[knee.index()] =
            j[hip.index()].add(body.limb_dir(a.hip_flex, a.hip_abduct, sign).scale(thigh));
        j[ankle.index()] = j[knee.index()].add(
            body.limb_dir(a.hip_flex - a.knee_flex, a.hip_abduct, sign)
                .scale(shin),
        );
        j[shoulder.index()] = shoulder_center.add(body.l.scale(sign * shoulder_width / 2.0));
        j[elbow.index()] = j[shoulder.index()].add(
            body.limb_dir(a.shoulder_flex, a.shoulder_abduct, sign)
                .scale(upper_arm),
        );
        j[wrist.index()] = j[elbow.index()].add(
            body.limb_dir(a.shoulder_flex + a.elbow_flex, a.shoulder_abduct, sign)
                .scale(forearm),
        );
    }
    let head_center = shoulder_center.add(torso_up.scale(neck));
    j[Nose.index()] = head_center.add(torso_fwd.scale(0.6 * config.limb_radius));

    // Stand the lowest joint just above the ground, at the sampled range.
    let lowest = j.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
    let offset = Point3::new(
        range * bearing.cos(),
        range * bearing.sin(),
        GROUND_Z + 0.08 - lowest,
    );
    for p in j.iter_mut() {
        *p = p.add(offset);
    }
    SkeletonPose {
        joints: j,
        visibility: [true; NUM_KEYPOINTS],
        head_center: head_center.add(offset),
    }
}

/// Rotation whose rows are the camera axes (right, down, forward) expressed
/// in the LiDAR frame, looking from `eye` toward `target` with LiDAR `z` up.
pub fn look_at(eye: Point3, target: Point3) -> Mat3 {
    let fwd = target.sub(eye);
    let fwd = fwd.scale(1.0 / fwd.norm());
    let up = Point3::new(0.0, 0.0, 1.0);
    let right = fwd.cross(up);
    let right = right.scale(1.0 / right.norm());
    let down = fwd.cross(right);
    [right.to_array(), down.to_array(), fwd.to_array()]
}

/// A camera aimed at the skeleton's bounding-box center, with focal length
/// chosen so the outermost joint reaches `person_fill` of the half image.
pub fn camera_for(skeleton: &SkeletonPose, config: &SynthConfig) -> Result<CameraModel> {
    let (mut lo, mut hi) = (skeleton.joints[0], skeleton.joints[0]);
    for p in &skeleton.joints {
        lo = Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    let target = lo.add(hi).scale(0.5);
    let rotation = look_at(CAMERA_OFFSET, target);
    let translation = crate::geometry::mat_vec(&rotation, CAMERA_OFFSET).scale(-1.0);
    let probe = CameraModel::new(1.0, 1.0, 0.0, 0.0, rotation, translation, 1, 1)?;
    let mut half_extent: f64 = 0.0;
    for &p in skeleton
        .joints
        .iter()
        .chain(std::iter::once(&skeleton.head_center))
    {
        let c = probe.to_camera_frame(p);
        let pad = config.limb_radius / c.z;
        half_extent = half_extent
            .max((c.x / c.z).abs() + pad)
            .max((c.y / c.z).abs() + pad);
    }
    let half_w = f64::from(config.image_width) / 2.0;
    let half_h = f64::from(config.image_height) / 2.0;
    let focal = config.person_fill * half_w.min(half_h) / half_extent;
    CameraModel::new(
        focal,
        focal,
        half_w,
        half_h,
        rotation,
        translation,
        config.image_width,
        config.image_height,
    )
}

fn orthonormal_basis(axis: Point3) -> (Point3, Point3) {
    let helper = if axis.x.abs() < 0.9 {
        Point3::new(1.0, 0.0, 0.0)
    } else {
        Point3::new(0.0, 1.0, 0.0)
    };
    let e1 = axis.cross(helper);
    let e1 = e1.scale(1.0 / e1.norm());
    let e2 = axis.cross(e1);
    (e1, e2.scale(1.0 / e2.norm()))
}

/// Limb extremities that carry a hemispherical cap (hands and feet).
pub const END_CAPS: [(Keypoint, Keypoint); 4] = [
    (Keypoint::LeftElbow, Keypoint::LeftWrist),
    (Keypoint::RightElbow, Keypoint::RightWrist),
    (Keypoint::LeftKnee, Keypoint::LeftAnkle),
    (Keypoint::RightKnee, Keypoint::RightAnkle),
];

/// Samples `n_surface_points` uniformly (by area) over the bone cylinders,
/// the head sphere and outward hemispheres capping the hands and feet, then
/// applies Gaussian jitter. Every noiseless sample lies exactly
/// `limb_radius` from some bone segment.
pub fn sample_surface(skeleton: &SkeletonPose, config: &SynthConfig) -> Vec<Point3> {
    let mut rng = rng::stream(config.rng_seed, "surface", 0);
    let r = config.limb_radius;
    let segments = skeleton.segments();
    let mut areas: Vec<f64> = segments
        .iter()
        .map(|(a, b)| a.distance(*b) * TAU * r)
        .collect();
    areas.push(4.0 * PI * r * r);
    areas.extend(END_CAPS.iter().map(|_| TAU * r * r));
    let pick = WeightedIndex::new(&areas).expect("surface areas are positive");
    let jitter = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let unit = Normal::new(0.0, 1.0).expect("valid sigma");
    let direction = |rng: &mut Rng| loop {
        let d = Point3::new(unit.sample(rng), unit.sample(rng), unit.sample(rng));
        let n = d.norm();
        if n > 1e-12 {
            break d.scale(1.0 / n);
        }
    };

    let mut out = Vec::with_capacity(config.n_surface_points);
    for _ in 0..config.n_surface_points {
        let choice = pick.sample(&mut rng);
        let mut p = if choice < segments.len() {
            let (a, b) = segments[choice];
            let axis = b.sub(a);
            let (e1, e2) = orthonormal_basis(axis.scale(1.0 / axis.norm()));
            let t: f64 = rng.random();
            let theta = uniform(&mut rng, 0.0, TAU);
            a.add(axis.scale(t))
                .add(e1.scale(r * theta.cos()))
                .add(e2.scale(r * theta.sin()))
        } else if choice == segments.len() {
            skeleton.head_center.add(direction(&mut rng).scale(r))
        } else {
            let (parent, end) = END_CAPS[choice - segments.len() - 1];
            let tip = skeleton.joint(end);
            let out_dir = tip.sub(skeleton.joint(parent));
            let out_dir = out_dir.scale(1.0 / out_dir.norm());
            let d = direction(&mut rng);
            let along = d.dot(out_dir);
            // Reflect into the outward hemisphere.
            let d = if along < 0.0 {
                d.sub(out_dir.scale(2.0 * along))
            } else {
                d
            };
            tip.add(d.scale(r))
        };
        if config.noise_sigma > 0.0 {
            p = p.add(Point3::new(
                jitter.sample(&mut rng),
                jitter.sample(&mut rng),
                jitter.sample(&mut rng),
            ));
        }
        out.push(p);
    }
    out
}

/// Angular bucket of a camera-frame point.
fn bucket(c: Point3, resolution: f64) -> (i64, i64) {
    let az = c.x.atan2(c.z);
    let el = c.y.atan2(c.z);
    (
        (az / resolution).floor() as i64,
        (el / resolution).floor() as i64,
    )
}

/// Indices (ascending) of the points a LiDAR would return: the nearest point
/// per angular bucket, minus anything in the occluder's shadow.
pub fn lidar_returns(
    points: &[Point3],
    camera: &CameraModel,
    config: &SynthConfig,
) -> Result<Vec<usize>> {
    let mut nearest: HashMap<(i64, i64), (usize, f64)> = HashMap::new();
    for (i, &p) in points.iter().enumerate() {
        let c = camera.to_camera_frame(p);
        if !(c.z > crate::geometry::MIN_DEPTH) {
            return Err(Error::NonPositiveDepth {
                index: i,
                depth: c.z,
            });
        }
        let key = bucket(c, config.angular_resolution);
        match nearest.get_mut(&key) {
            Some(slot) if c.z < slot.1 => *slot = (i, c.z),
            Some(_) => {}
            None => {
                nearest.insert(key, (i, c.z));
            }
        }
    }
    let origin = camera.center();
    let mut kept: Vec<usize> = nearest
        .into_values()
        .map(|(i, _)| i)
        .filter(|&i| {
            config
                .occluder_spec
                .is_none_or(|b| !b.blocks(origin, points[i]))
        })
        .collect();
    kept.sort_unstable();
    Ok(kept)
}

/// Closest distance between segments `[p0, p1]` and `[q0, q1]`.
pub fn segment_distance(p0: Point3, p1: Point3, q0: Point3, q1: Point3) -> f64 {
    let d1 = p1.sub(p0);
    let d2 = q1.sub(q0);
    let r = p0.sub(q0);
    let a = d1.dot(d1);
    let e = d2.dot(d2);
    let f = d2.dot(r);
    let (s, t) = if a <= 1e-18 && e <= 1e-18 {
        (0.0, 0.0)
    } else if a <= 1e-18 {
        (0.0, (f / e).clamp(0.0, 1.0))
    } else {
        let c = d1.dot(r);
        if e <= 1e-18 {
            ((-c / a).clamp(0.0, 1.0), 0.0)
        } else {
            let b = d1.dot(d2);
            let denom = a * e - b * b;
            let mut s = if denom > 1e-18 {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t = (b * s + f) / e;
            if t < 0.0 {
                t = 0.0;
                s = (-c / a).clamp(0.0, 1.0);
            } else if t > 1.0 {
                t = 1.0;
                s = ((b - c) / a).clamp(0.0, 1.0);
            }
            (s, t)
        }
    };
    p0.add(d1.scale(s)).distance(q0.add(d2.scale(t)))
}

/// Fraction of the limb radius used as the opaque core when shadowing.
/// Surface samples sit at the full radius, so jitter well below the
/// remaining margin never culls a front-facing sample.
pub const SHADOW_CORE: f64 = 0.75;

/// Indices of points whose camera ray passes through the body: the bone
/// capsules and the head sphere, each with radius `SHADOW_CORE * limb_radius`.
/// Without this, a bucket whose limb happened to receive no surface sample
/// would return a point from behind the limb.
pub fn self_shadowed(
    points: &[Point3],
    origin: Point3,
    skeleton: &SkeletonPose,
    config: &SynthConfig,
) -> Vec<bool> {
    let core = SHADOW_CORE * config.limb_radius;
    let segments = skeleton.segments();
    let head = skeleton.head_center;
    points
        .iter()
        .map(|&p| {
            segments
                .iter()
                .any(|&(a, b)| segment_distance(origin, p, a, b) < core)
                || segment_distance(origin, p, head, head) < core
        })
        .collect()
}

/// Whether the camera ray to joint `k` passes through the core of a body
/// part not attached to that joint.
pub fn joint_self_occluded(
    origin: Point3,
    skeleton: &SkeletonPose,
    k: Keypoint,
    config: &SynthConfig,
) -> bool {
    let core = SHADOW_CORE * config.limb_radius;
    let target = skeleton.joint(k);
    let bones = BONES
        .iter()
        .filter(|&&(a, b)| a != k && b != k)
        .map(|&(a, b)| (skeleton.joint(a), skeleton.joint(b)));
    let hits = |(a, b): (Point3, Point3)| segment_distance(origin, target, a, b) < core;
    if k == Keypoint::Nose {
        return bones.into_iter().any(hits);
    }
    let head = (skeleton.shoulder_center(), skeleton.head_center);
    let skull = (skeleton.head_center, skeleton.head_center);
    bones.chain([head, skull]).any(hits)
}

/// The subsequence of `points` that survives z-buffering and occlusion.
pub fn apply_lidar_model(
    points: &[Point3],
    camera: &CameraModel,
    config: &SynthConfig,
) -> Result<Vec<Point3>> {
    Ok(lidar_returns(points, camera, config)?
        .into_iter()
        .map(|i| points[i])
        .collect())
}

/// Upper bound on [`visibility_radius_px`], so every visible joint has a
/// return within this many pixels of its label.
pub const MAX_VISIBILITY_RADIUS_PX: f64 = 5.0;

/// Pixel radius within which a surviving return must exist for a joint to be
/// labelled visible: two angular buckets, capped at
/// [`MAX_VISIBILITY_RADIUS_PX`].
pub fn visibility_radius_px(camera: &CameraModel, config: &SynthConfig) -> f64 {
    (2.0 * config.angular_resolution * 0.5 * (camera.fx() + camera.fy()))
        .min(MAX_VISIBILITY_RADIUS_PX)
}

/// A joint is hidden by another body part when the nearest surviving return
/// around it is this many limb radii in front of it.
pub const SELF_OCCLUSION_RADII: f64 = 2.5;

pub fn make_scene(config: &SynthConfig, family: PoseFamily) -> Result<Scene> {
    config.validate()?;
    let skeleton = generate_skeleton(config, family);
    build_scene(
        format!("seed_{}_{}", config.rng_seed, family.name()),
        config,
        skeleton,
    )
}

/// Samples, culls and projects a posed skeleton into a labelled scene.
pub fn build_scene(
    scene_id: String,
    config: &SynthConfig,
    mut skeleton: SkeletonPose,
) -> Result<Scene> {
    let camera = camera_for(&skeleton, config)?;
    let mut surface = sample_surface(&skeleton, config);
    let shadowed = self_shadowed(&surface, camera.center(), &skeleton, config);
    let mut flags = shadowed.into_iter();
    surface.retain(|_| !flags.next().unwrap_or(false));
    let kept = apply_lidar_model(&surface, &camera, config)?;
    if kept.len() < MIN_SCENE_POINTS {
        return Err(Error::DegenerateScene {
            surviving: kept.len(),
            required: MIN_SCENE_POINTS,
        });
    }
    let mut scene = Scene::new(scene_id, camera, &kept, Default::default(), None)?;

    let radius = visibility_radius_px(&scene.camera, config);
    let margin = SELF_OCCLUSION_RADII * config.limb_radius;
    let mut keypoints_2d = [Keypoint2d::default(); NUM_KEYPOINTS];
    for (k, joint) in skeleton.joints.iter().enumerate() {
        let proj = project(&scene.camera, *joint)?;
        let nearest_depth = scene
            .points
            .iter()
            .filter(|p| p.pixel.distance(proj.pixel) <= radius)
            .map(|p| p.depth)
            .fold(f64::INFINITY, f64::min);
        let visible = scene.camera.in_image(proj.pixel)
            && nearest_depth.is_finite()
            && nearest_depth >= proj.depth - margin
            && !joint_self_occluded(scene.camera.center(), &skeleton, Keypoint::ALL[k], config);
        keypoints_2d[k] = Keypoint2d {
            pixel: proj.pixel,
            visible,
        };
        skeleton.visibility[k] = visible;
    }
    scene.keypoints_2d = keypoints_2d;
    scene.keypoints_3d_gt = Some(skeleton.joints);
    Ok(scene)
}

/// Which occluder a dataset scene receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OccluderKind {
    /// A low wall hiding the legs up to somewhere between knees and hips.
    Legs,
    /// A tall panel hiding one side of the body.
    Side,
}

fn lerp(a: Point3, b: Point3, t: f64) -> Point3 {
    a.add(b.sub(a).scale(t))
}

/// Places a box occluder between the camera and the person.
pub fn occluder_for(skeleton: &SkeletonPose, kind: OccluderKind, rng: &mut Rng) -> Aabb {
    use Keypoint::*;
    let eye = CAMERA_OFFSET;
    let hips = skeleton
        .joint(LeftHip)
        .add(skeleton.joint(RightHip))
        .scale(0.5);
    let dist = hips.sub(eye).norm();
    // Fraction of the way from the camera to the person where the box stands.
    let t = 1.0 - uniform(rng, 1.2, 2.5) / dist;
    let depth = 0.2;
    match kind {
        OccluderKind::Legs => {
            let knee_z = skeleton.joint(LeftKnee).z.max(skeleton.joint(RightKnee).z);
            let hip_z = skeleton.joint(LeftHip).z.min(skeleton.joint(RightHip).z);
            let shoulder_z = skeleton.shoulder_center().z;
            let lo = knee_z + 0.08;
            let hi = (hip_z - 0.05).max(lo).min(shoulder_z - 0.15);
            let cut = uniform(rng, lo.min(hi), hi.max(lo));
            let top = lerp(eye, Point3::new(hips.x, hips.y, cut), t);
            Aabb {
                min: Point3::new(top.x - depth / 2.0, top.y - 2.0, GROUND_Z - 0.5),
                max: Point3::new(top.x + depth / 2.0, top.y + 2.0, top.z),
            }
        }
        OccluderKind::Side => {
            let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let lateral = uniform(rng, 0.05, 0.2) * side;
            let edge = lerp(eye, Point3::new(hips.x, hips.y + lateral, hips.z), t);
            let (y0, y1) = if side > 0.0 {
                (edge.y, edge.y + 3.0)
            } else {
                (edge.y - 3.0, edge.y)
            };
            Aabb {
                min: Point3::new(edge.x - depth / 2.0, y0, GROUND_Z - 0.5),
                max: Point3::new(edge.x + depth / 2.0, y1, 3.0),
            }
        }
    }
}

/// Dataset-level synthesis options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub base: SynthConfig,
    pub n_scenes: usize,
    /// `None` mixes all pose families.
    pub family: Option<PoseFamily>,
    pub occlusion_rate: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            base: SynthConfig::default(),
            n_scenes: 100,
            family: None,
            occlusion_rate: 0.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            return Err(Error::config("occlusion_rate must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:06}")
}

/// Generates one dataset scene. Everything is derived from
/// `(spec.seed, index)`, so scenes can be produced in any order.
pub fn dataset_scene(spec: &DatasetSpec, index: usize) -> Result<Scene> {
    let mut rng = rng::stream(spec.seed, "dataset", index as u64);
    let mut config = spec.base.clone();
    config.rng_seed = rng::derive_seed(spec.seed, "scene", index as u64);
    let family = spec
        .family
        .unwrap_or_else(|| PoseFamily::ALL[rng.random_range(0..PoseFamily::ALL.len())]);
    let skeleton = generate_skeleton(&config, family);
    if rng.random::<f64>() < spec.occlusion_rate {
        let kind = if rng.random::<f64>() < 0.6 {
            OccluderKind::Legs
        } else {
            OccluderKind::Side
        };
        config.occluder_spec = Some(occluder_for(&skeleton, kind, &mut rng));
    }
    build_scene(scene_name(index), &config, skeleton)
}

/// Generates scenes `0..n_scenes` in parallel; results keep index order.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<Result<Scene>>> {
    spec.validate()?;
    Ok((0..spec.n_scenes)
        .into_par_iter()
        .map(|i| dataset_scene(spec, i))
        .collect())
}

/// Pixel position of every joint, for diagnostics.
pub fn project_joints(
    camera: &CameraModel,
    joints: &[Point3; NUM_KEYPOINTS],
) -> Result<[Point2; NUM_KEYPOINTS]> {
    let mut out = [Point2::default(); NUM_KEYPOINTS];
    for (k, j) in joints.iter().enumerate() {
        out[k] = project(camera, *j)
            .map_err(|_| Error::NonPositiveDepth {
                index: k,
                depth: 0.0,
            })?
            .pixel;
    }
    Ok(out)
}

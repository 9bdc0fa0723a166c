use serde::{Deserialize, Serialize};

/// Number of keypoint types.
pub const NUM_KEYPOINTS: usize = 13;

/// The 13 body keypoint types, in channel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Keypoint {
    Nose,
    LeftShoulder,
    RightShoulder,
    LeftElbow,
    RightElbow,
    LeftWrist,
    RightWrist,
    LeftHip,
    RightHip,
    LeftKnee,
    RightKnee,
    LeftAnkle,
    RightAnkle,
}

impl Keypoint {
    pub const ALL: [Keypoint; NUM_KEYPOINTS] = [
        Keypoint::Nose,
        Keypoint::LeftShoulder,
        Keypoint::RightShoulder,
        Keypoint::LeftElbow,
        Keypoint::RightElbow,
        Keypoint::LeftWrist,
        Keypoint::RightWrist,
        Keypoint::LeftHip,
        Keypoint::RightHip,
        Keypoint::LeftKnee,
        Keypoint::RightKnee,
        Keypoint::LeftAnkle,
        Keypoint::RightAnkle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Keypoint::Nose => "nose",
            Keypoint::LeftShoulder => "left_shoulder",
            Keypoint::RightShoulder => "right_shoulder",
            Keypoint::LeftElbow => "left_elbow",
            Keypoint::RightElbow => "right_elbow",
            Keypoint::LeftWrist => "left_wrist",
            Keypoint::RightWrist => "right_wrist",
            Keypoint::LeftHip => "left_hip",
            Keypoint::RightHip => "right_hip",
            Keypoint::LeftKnee => "left_knee",
            Keypoint::RightKnee => "right_knee",
            Keypoint::LeftAnkle => "left_ankle",
            Keypoint::RightAnkle => "right_ankle",
        }
    }

    /// COCO per-keypoint sigma for this type.
    pub fn coco_sigma(self) -> f64 {
        match self {
            Keypoint::Nose => 0.026,
            Keypoint::LeftShoulder | Keypoint::RightShoulder => 0.079,
            Keypoint::LeftElbow | Keypoint::RightElbow => 0.072,
            Keypoint::LeftWrist | Keypoint::RightWrist => 0.062,
            Keypoint::LeftHip | Keypoint::RightHip => 0.107,
            Keypoint::LeftKnee | Keypoint::RightKnee => 0.087,
            Keypoint::LeftAnkle | Keypoint::RightAnkle => 0.089,
        }
    }
}

/// Per-keypoint visibility flags (`true` = v_k = 1).
pub type Visibility = [bool; NUM_KEYPOINTS];

pub fn visible_count(vis: &Visibility) -> usize {
    vis.iter().filter(|&&v| v).count()
}

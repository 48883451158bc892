//! Pose records, JSONL datasets, pinhole projection and a synthetic pose
//! generator built on forward kinematics over the 17-joint tree.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::skeleton::{Skeleton, H36M_EDGES};

/// Coordinate frame of a sample's arrays.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Frame {
    /// 2D in pixels, 3D in camera space (mm).
    Camera,
    /// 2D in `[-1, 1]`, 3D root-relative (mm).
    #[default]
    Normalized,
}

/// One training record. Serialized as a JSONL line
/// `{"j2d": [[u,v],...], "j3d": [[x,y,z],...], "subject": s, "action": a}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseSample {
    #[serde(rename = "j2d")]
    pub joints_2d: Vec<[f64; 2]>,
    #[serde(rename = "j3d")]
    pub joints_3d: Vec<[f64; 3]>,
    pub subject: String,
    pub action: String,
    #[serde(skip)]
    pub frame: Frame,
}

impl PoseSample {
    pub fn num_joints(&self) -> usize {
        self.joints_3d.len()
    }
}

/// Reads a JSONL dataset, checking every record has `num_joints` joints.
pub fn load_dataset(path: &Path, num_joints: usize) -> Result<Vec<PoseSample>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: PoseSample = serde_json::from_str(&line).map_err(|e| Error::SchemaViolation {
            line: i + 1,
            msg: e.to_string(),
        })?;
        for found in [sample.joints_2d.len(), sample.joints_3d.len()] {
            if found != num_joints {
                return Err(Error::JointCountMismatch {
                    expected: num_joints,
                    found,
                });
            }
        }
        if !sample
            .joints_2d
            .iter()
            .flatten()
            .chain(sample.joints_3d.iter().flatten())
            .all(|v| v.is_finite())
        {
            return Err(Error::SchemaViolation {
                line: i + 1,
                msg: "non-finite coordinate".into(),
            });
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn save_dataset(path: &Path, samples: &[PoseSample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Pinhole camera. `translation` places the pose root in camera space (mm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub translation: [f64; 3],
}

impl Default for CameraModel {
    fn default() -> Self {
        Self {
            fx: 1145.0,
            fy: 1145.0,
            cx: 500.0,
            cy: 500.0,
            translation: [0.0, 0.0, 5000.0],
        }
    }
}

/// `u = fx·x/z + cx`, `v = fy·y/z + cy`.
pub fn project(points: &[[f64; 3]], cam: &CameraModel) -> Result<Vec<[f64; 2]>> {
    points
        .iter()
        .map(|&[x, y, z]| {
            if z <= 0.0 {
                return Err(Error::NonPositiveDepth(z));
            }
            Ok([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        })
        .collect()
}

/// Maps pixels to `[-1, 1]` per axis and re-centers 3D on the root joint.
/// Samples already in [`Frame::Normalized`] are returned unchanged.
pub fn normalize(sample: &PoseSample, image_size: [f64; 2], root: usize) -> PoseSample {
    if sample.frame == Frame::Normalized {
        return sample.clone();
    }
    let [w, h] = image_size;
    let r = sample.joints_3d[root];
    PoseSample {
        joints_2d: sample
            .joints_2d
            .iter()
            .map(|&[u, v]| [2.0 * u / w - 1.0, 2.0 * v / h - 1.0])
            .collect(),
        joints_3d: sample
            .joints_3d
            .iter()
            .map(|p| [p[0] - r[0], p[1] - r[1], p[2] - r[2]])
            .collect(),
        subject: sample.subject.clone(),
        action: sample.action.clone(),
        frame: Frame::Normalized,
    }
}

/// Rest direction of each canonical bone (camera convention: +y is down,
/// body facing the camera).
const REST_DIRECTIONS: [[f64; 3]; 16] = [
    [-1.0, 0.0, 0.0], // pelvis -> r_hip
    [0.0, 1.0, 0.0],  // r_hip -> r_knee
    [0.0, 1.0, 0.0],  // r_knee -> r_ankle
    [1.0, 0.0, 0.0],  // pelvis -> l_hip
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0], // pelvis -> spine
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0], // neck -> head
    [1.0, 0.0, 0.0],  // thorax -> l_shoulder
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [-1.0, 0.0, 0.0], // thorax -> r_shoulder
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
];

/// Generator settings. Angle ranges keep limbs unfolded and, with the default
/// depth range, every joint well in front of the camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub test_count: usize,
    pub seed: u64,
    /// Bone lengths in mm, in canonical edge order.
    pub bone_lengths: Vec<f64>,
    /// Per bone, the maximum |pitch| and |roll| of its local rotation (degrees).
    pub angle_ranges_deg: Vec<[f64; 2]>,
    /// Whole-body rotation about the vertical axis (degrees).
    pub yaw_range_deg: [f64; 2],
    /// Root depth range in mm.
    pub depth_range_mm: [f64; 2],
    /// Lateral root offset range in mm, applied to x and y.
    pub lateral_range_mm: f64,
    /// Gaussian 2D detector noise, pixels.
    pub noise_std_px: f64,
    /// Per-joint multiplier on `noise_std_px`; empty means all ones.
    pub joint_noise_scale: Vec<f64>,
    pub camera: CameraModel,
    pub image_size: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 1024,
            test_count: 256,
            seed: 0,
            bone_lengths: vec![
                132.0, 442.0, 454.0, 132.0, 442.0, 454.0, 233.0, 257.0, 121.0, 115.0, 151.0, 278.0, 251.0, 151.0,
                278.0, 251.0,
            ],
            angle_ranges_deg: vec![
                [5.0, 5.0],   // hip
                [50.0, 20.0], // thigh
                [45.0, 5.0],  // shin
                [5.0, 5.0],
                [50.0, 20.0],
                [45.0, 5.0],
                [20.0, 15.0], // spine
                [15.0, 10.0],
                [20.0, 15.0],
                [25.0, 20.0], // head
                [10.0, 10.0], // shoulder
                [80.0, 60.0], // upper arm
                [70.0, 30.0], // forearm
                [10.0, 10.0],
                [80.0, 60.0],
                [70.0, 30.0],
            ],
            yaw_range_deg: [-60.0, 60.0],
            depth_range_mm: [4000.0, 6000.0],
            lateral_range_mm: 300.0,
            noise_std_px: 0.0,
            joint_noise_scale: Vec::new(),
            camera: CameraModel::default(),
            image_size: [1000.0, 1000.0],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.bone_lengths.len() != H36M_EDGES.len() {
            return bad(format!("need {} bone lengths", H36M_EDGES.len()));
        }
        if let Some(l) = self.bone_lengths.iter().find(|&&l| l.is_nan() || l <= 0.0) {
            return bad(format!("bone length {l} must be positive"));
        }
        if self.angle_ranges_deg.len() != H36M_EDGES.len() {
            return bad(format!("need {} angle ranges", H36M_EDGES.len()));
        }
        if !(self.depth_range_mm[0] > 0.0 && self.depth_range_mm[1] >= self.depth_range_mm[0]) {
            return bad("depth range must be positive and ordered".into());
        }
        if self.camera.fx <= 0.0 || self.camera.fy <= 0.0 {
            return bad("focal lengths must be positive".into());
        }
        if self.noise_std_px.is_nan() || self.noise_std_px < 0.0 {
            return bad("noise std must be non-negative".into());
        }
        if !self.joint_noise_scale.is_empty() && self.joint_noise_scale.len() != 17 {
            return bad("joint_noise_scale needs one entry per joint".into());
        }
        if self.image_size.iter().any(|&s| s.is_nan() || s <= 0.0) {
            return bad("image size must be positive".into());
        }
        Ok(())
    }
}

/// A generated pose before normalization.
#[derive(Clone, Debug)]
pub struct RawPose {
    /// Camera-space joints, mm.
    pub camera_3d: Vec<[f64; 3]>,
    /// Exact projection of `camera_3d`, pixels.
    pub clean_2d: Vec<[f64; 2]>,
    /// `clean_2d` plus detector noise.
    pub noisy_2d: Vec<[f64; 2]>,
}

fn local_rotation(rng: &mut Rng, range: [f64; 2]) -> Rotation3<f64> {
    let pitch = rng.uniform_range(-range[0], range[0]).to_radians();
    let roll = rng.uniform_range(-range[1], range[1]).to_radians();
    Rotation3::from_axis_angle(&Vector3::x_axis(), pitch) * Rotation3::from_axis_angle(&Vector3::z_axis(), roll)
}

/// Forward kinematics for one pose, drawing everything from `rng`.
pub fn synth_pose(cfg: &SynthConfig, rng: &mut Rng) -> Result<RawPose> {
    let skeleton = Skeleton::h36m();
    let n = skeleton.num_joints();
    let yaw = rng
        .uniform_range(cfg.yaw_range_deg[0], cfg.yaw_range_deg[1])
        .to_radians();
    let mut rot = vec![Rotation3::identity(); n];
    rot[skeleton.root()] = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
    let mut pos = vec![Vector3::zeros(); n];
    // Edges are listed parent-first, so each parent is placed before its children.
    for (b, &(parent, child)) in H36M_EDGES.iter().enumerate() {
        rot[child] = rot[parent] * local_rotation(rng, cfg.angle_ranges_deg[b]);
        let dir = Vector3::from(REST_DIRECTIONS[b]);
        pos[child] = pos[parent] + rot[child] * (dir * cfg.bone_lengths[b]);
    }
    let t = &cfg.camera.translation;
    let offset = Vector3::new(
        t[0] + rng.uniform_range(-cfg.lateral_range_mm, cfg.lateral_range_mm),
        t[1] + rng.uniform_range(-cfg.lateral_range_mm, cfg.lateral_range_mm),
        rng.uniform_range(cfg.depth_range_mm[0], cfg.depth_range_mm[1]),
    );
    let camera_3d: Vec<[f64; 3]> = pos.iter().map(|p| (p + offset).into()).collect();
    let clean_2d = project(&camera_3d, &cfg.camera)?;
    let noisy_2d = clean_2d
        .iter()
        .enumerate()
        .map(|(j, &[u, v])| {
            let s = cfg.noise_std_px * cfg.joint_noise_scale.get(j).copied().unwrap_or(1.0);
            [u + s * rng.normal(), v + s * rng.normal()]
        })
        .collect();
    Ok(RawPose {
        camera_3d,
        clean_2d,
        noisy_2d,
    })
}

const TEST_STREAM: u64 = 1 << 40;

/// Sample `index` of a split; each sample has its own stream, so generation
/// order does not matter.
pub fn synth_raw(cfg: &SynthConfig, index: usize, test: bool) -> Result<RawPose> {
    let stream = index as u64 + if test { TEST_STREAM } else { 0 };
    synth_pose(cfg, &mut Rng::new(cfg.seed).split(stream))
}

fn to_sample(cfg: &SynthConfig, raw: RawPose, index: usize, test: bool) -> PoseSample {
    let camera = PoseSample {
        joints_2d: raw.noisy_2d,
        joints_3d: raw.camera_3d,
        subject: if test { "synth-test" } else { "synth-train" }.to_string(),
        action: format!("pose-{index}"),
        frame: Frame::Camera,
    };
    normalize(&camera, cfg.image_size, 0)
}

/// Normalized train and test splits.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Vec<PoseSample>, Vec<PoseSample>)> {
    cfg.validate()?;
    let split = |count: usize, test: bool| -> Result<Vec<PoseSample>> {
        (0..count)
            .map(|i| Ok(to_sample(cfg, synth_raw(cfg, i, test)?, i, test)))
            .collect()
    };
    Ok((split(cfg.count, false)?, split(cfg.test_count, true)?))
}

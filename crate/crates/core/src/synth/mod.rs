//! Synthetic motion-capture pipeline: kinematic-tree motion generation,
//! pinhole projection to normalized 2D, Gaussian noise injection, windowing
//! into training samples, and horizontal flip augmentation.

pub mod dataset;

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::grid::ValueGrid;
use crate::rng::RngStream;

/// Kinematic tree: parent per joint (root = joint 0 pointing at itself),
/// bone length to the parent in millimeters, rest-pose bone direction, and
/// the left/right pairing used by horizontal flips.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSpec {
    pub parents: Vec<usize>,
    pub bone_lengths_mm: Vec<f64>,
    pub rest_directions: Vec<[f64; 3]>,
    pub left_right_pairs: Vec<(usize, usize)>,
}

impl SkeletonSpec {
    pub fn joints(&self) -> usize {
        self.parents.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.joints();
        if j == 0 {
            return Err(Error::config("skeleton needs at least one joint"));
        }
        if self.bone_lengths_mm.len() != j || self.rest_directions.len() != j {
            return Err(Error::config("skeleton field lengths disagree"));
        }
        if self.parents[0] != 0 {
            return Err(Error::config("joint 0 must be the root (its own parent)"));
        }
        // parents must precede children: guarantees a tree rooted at 0
        for (joint, &parent) in self.parents.iter().enumerate().skip(1) {
            if parent >= joint {
                return Err(Error::config(format!(
                    "joint {joint} has parent {parent}; parents must precede children"
                )));
            }
        }
        let mut seen = vec![0usize; j];
        for &(l, r) in &self.left_right_pairs {
            if l >= j || r >= j || l == r {
                return Err(Error::config("invalid left/right pair"));
            }
            seen[l] += 1;
            seen[r] += 1;
        }
        if seen.iter().any(|&n| n > 1) {
            return Err(Error::config("a joint appears in more than one left/right pair"));
        }
        Ok(())
    }

    /// 17-joint skeleton mirroring the usual mocap topology
    /// (pelvis, legs, spine/head chain, arms). Versioned constant: v1.
    pub fn default_17() -> Self {
        let parents = vec![0, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15];
        let bone_lengths_mm = vec![
            0.0,   // 0 pelvis (root)
            132.0, // 1 right hip
            442.0, // 2 right knee
            454.0, // 3 right ankle
            132.0, // 4 left hip
            442.0, // 5 left knee
            454.0, // 6 left ankle
            233.0, // 7 spine
            257.0, // 8 thorax
            121.0, // 9 neck
            115.0, // 10 head
            180.0, // 11 left shoulder
            279.0, // 12 left elbow
            252.0, // 13 left wrist
            180.0, // 14 right shoulder
            279.0, // 15 right elbow
            252.0, // 16 right wrist
        ];
        let rest_directions = vec![
            [0.0, 0.0, 0.0],  // root
            [-1.0, 0.0, 0.0], // right hip
            [0.0, -1.0, 0.0], // right knee
            [0.0, -1.0, 0.0], // right ankle
            [1.0, 0.0, 0.0],  // left hip
            [0.0, -1.0, 0.0], // left knee
            [0.0, -1.0, 0.0], // left ankle
            [0.0, 1.0, 0.0],  // spine
            [0.0, 1.0, 0.0],  // thorax
            [0.0, 1.0, 0.0],  // neck
            [0.0, 1.0, 0.0],  // head
            [1.0, 0.0, 0.0],  // left shoulder
            [1.0, 0.0, 0.0],  // left elbow
            [1.0, 0.0, 0.0],  // left wrist
            [-1.0, 0.0, 0.0], // right shoulder
            [-1.0, 0.0, 0.0], // right elbow
            [-1.0, 0.0, 0.0], // right wrist
        ];
        let left_right_pairs = vec![(4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)];
        SkeletonSpec { parents, bone_lengths_mm, rest_directions, left_right_pairs }
    }

    /// 7-joint stick figure for desk-scale experiments. Its 21 output
    /// coordinates stay below small model widths, so narrow configurations
    /// can fit it exactly (the 17-joint skeleton needs d_model >= 51).
    pub fn toy_7() -> Self {
        SkeletonSpec {
            parents: vec![0, 0, 1, 1, 1, 0, 0],
            bone_lengths_mm: vec![0.0, 450.0, 250.0, 350.0, 350.0, 500.0, 500.0],
            rest_directions: vec![
                [0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],   // spine
                [0.0, 1.0, 0.0],   // head
                [1.0, 0.0, 0.0],   // left arm
                [-1.0, 0.0, 0.0],  // right arm
                [0.6, -0.8, 0.0],  // left leg
                [-0.6, -0.8, 0.0], // right leg
            ],
            left_right_pairs: vec![(3, 4), (5, 6)],
        }
    }
}

/// Pinhole camera with a rigid camera-from-world transform
/// (x_cam = R x_world + t) and pixel intrinsics.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSpec {
    pub focal_px: f64,
    pub principal_px: (f64, f64),
    pub image_size_px: (f64, f64),
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraSpec {
    /// Camera 4 m from the subject, level with the pelvis, image-centered
    /// principal point. World is y-up; the camera looks along -z_world.
    pub fn default_front() -> Self {
        CameraSpec {
            focal_px: 1145.0,
            principal_px: (500.0, 500.0),
            image_size_px: (1000.0, 1000.0),
            rotation: Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0),
            translation: Vector3::new(0.0, 1000.0, 4000.0),
        }
    }

    /// Normalized-unit sigma equivalent to a pixel-space sigma.
    pub fn sigma_px_to_normalized(&self, sigma_px: f64) -> f64 {
        sigma_px * 2.0 / self.image_size_px.0
    }
}

/// Band-limited random joint-angle motion.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionParams {
    pub hz: f64,
    /// Sinusoids per joint axis (at most this many).
    pub harmonics: usize,
    /// Maximum sinusoid frequency in Hz.
    pub max_freq_hz: f64,
    /// Total angular amplitude budget per joint axis, radians.
    pub angle_amplitude: f64,
    /// Root drift amplitude, millimeters.
    pub root_travel_mm: f64,
}

impl Default for MotionParams {
    fn default() -> Self {
        MotionParams {
            hz: 50.0,
            harmonics: 5,
            max_freq_hz: 2.0,
            angle_amplitude: 0.05,
            root_travel_mm: 250.0,
        }
    }
}

struct Oscillator {
    amps: Vec<f64>,
    freqs: Vec<f64>,
    phases: Vec<f64>,
}

impl Oscillator {
    fn draw(rng: &mut RngStream, params: &MotionParams, budget: f64) -> Self {
        let n = params.harmonics.max(1);
        let mut weights: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let total: f64 = weights.iter().sum::<f64>().max(1e-9);
        for w in weights.iter_mut() {
            *w = *w / total * budget;
        }
        Oscillator {
            amps: weights,
            freqs: (0..n).map(|_| rng.uniform_in(0.05, params.max_freq_hz)).collect(),
            phases: (0..n).map(|_| rng.uniform_in(0.0, std::f64::consts::TAU)).collect(),
        }
    }

    fn at(&self, seconds: f64) -> f64 {
        self.amps
            .iter()
            .zip(&self.freqs)
            .zip(&self.phases)
            .map(|((a, f), p)| a * (std::f64::consts::TAU * f * seconds + p).sin())
            .sum()
    }
}

/// Generate a world-space 3D joint sequence [frames, J, 3] in millimeters.
///
/// Joint angles follow sums of at most `harmonics` sinusoids below
/// `max_freq_hz`, pushed through forward kinematics, so bone lengths are
/// conserved exactly and motion stays temporally smooth.
pub fn generate_motion(
    skel: &SkeletonSpec,
    params: &MotionParams,
    seed: u64,
    frames: usize,
) -> Result<ValueGrid> {
    skel.validate()?;
    if frames == 0 {
        return Err(Error::config("frames must be >= 1"));
    }
    let joints = skel.joints();
    let root = RngStream::new(seed);
    // three angle tracks per joint, plus root drift and slow yaw
    let mut oscillators = Vec::with_capacity(joints * 3);
    for joint in 0..joints {
        for axis in 0..3 {
            let mut rng = root.derive((joint * 3 + axis) as u64);
            oscillators.push(Oscillator::draw(&mut rng, params, params.angle_amplitude));
        }
    }
    let mut drift_rng = root.derive(0xD81F7);
    let slow = MotionParams { max_freq_hz: 0.2, ..params.clone() };
    let drift_x = Oscillator::draw(&mut drift_rng, &slow, params.root_travel_mm);
    let drift_z = Oscillator::draw(&mut drift_rng, &slow, params.root_travel_mm);
    let yaw = Oscillator::draw(&mut drift_rng, &slow, 12.0 * params.angle_amplitude);

    let mut out = ValueGrid::zeros(&[frames, joints, 3]);
    let mut global_rot = vec![Rotation3::identity(); joints];
    let mut positions = vec![Vector3::zeros(); joints];
    for f in 0..frames {
        let t = f as f64 / params.hz;
        positions[0] = Vector3::new(drift_x.at(t), 1000.0, drift_z.at(t));
        global_rot[0] = Rotation3::from_euler_angles(0.0, yaw.at(t), 0.0);
        for j in 1..joints {
            let parent = skel.parents[j];
            let base = j * 3;
            let local = Rotation3::from_euler_angles(
                oscillators[base].at(t),
                oscillators[base + 1].at(t),
                oscillators[base + 2].at(t),
            );
            global_rot[j] = global_rot[parent] * local;
            let rest = Vector3::new(
                skel.rest_directions[j][0],
                skel.rest_directions[j][1],
                skel.rest_directions[j][2],
            ) * skel.bone_lengths_mm[j];
            positions[j] = positions[parent] + global_rot[j] * rest;
        }
        for j in 0..joints {
            let o = (f * joints + j) * 3;
            out.data_mut()[o] = positions[j][0];
            out.data_mut()[o + 1] = positions[j][1];
            out.data_mut()[o + 2] = positions[j][2];
        }
    }
    Ok(out)
}

/// Subtract the root joint from every frame: [F, J, 3] -> root-relative mm.
pub fn root_relative(seq: &ValueGrid) -> Result<ValueGrid> {
    let (frames, joints) = match seq.shape() {
        [f, j, 3] => (*f, *j),
        other => return Err(Error::dimension(format!("expected [F,J,3], got {other:?}"))),
    };
    let mut out = seq.clone();
    for f in 0..frames {
        let root = [
            seq.data()[(f * joints) * 3],
            seq.data()[(f * joints) * 3 + 1],
            seq.data()[(f * joints) * 3 + 2],
        ];
        for j in 0..joints {
            let o = (f * joints + j) * 3;
            out.data_mut()[o] -= root[0];
            out.data_mut()[o + 1] -= root[1];
            out.data_mut()[o + 2] -= root[2];
        }
    }
    Ok(out)
}

/// Pinhole projection of world-space points to 2D normalized to [-1, 1] by
/// image size. Points must have positive depth in the camera frame.
pub fn project(points: &ValueGrid, camera: &CameraSpec) -> Result<ValueGrid> {
    let outer = match points.shape() {
        [n, 3] => *n,
        [f, j, 3] => f * j,
        other => return Err(Error::dimension(format!("expected [...,3] points, got {other:?}"))),
    };
    let mut shape = points.shape().to_vec();
    *shape.last_mut().unwrap() = 2;
    let mut out = ValueGrid::zeros(&shape);
    let (w, h) = camera.image_size_px;
    for i in 0..outer {
        let p = Vector3::new(
            points.data()[i * 3],
            points.data()[i * 3 + 1],
            points.data()[i * 3 + 2],
        );
        let cam = camera.rotation * p + camera.translation;
        if cam[2] <= 0.0 {
            return Err(Error::numeric("project", format!("non-positive depth {}", cam[2])));
        }
        let u = camera.focal_px * cam[0] / cam[2] + camera.principal_px.0;
        let v = camera.focal_px * cam[1] / cam[2] + camera.principal_px.1;
        out.data_mut()[i * 2] = (u - w / 2.0) / (w / 2.0);
        out.data_mut()[i * 2 + 1] = (v - h / 2.0) / (h / 2.0);
    }
    Ok(out)
}

/// Add i.i.d. zero-mean Gaussian noise (std `sigma`, in the coordinates'
/// own units) to every entry; deterministic per seed.
pub fn add_noise(input2d: &ValueGrid, sigma: f64, seed: u64) -> Result<ValueGrid> {
    if sigma < 0.0 {
        return Err(Error::config("sigma must be >= 0"));
    }
    if sigma == 0.0 {
        return Ok(input2d.clone());
    }
    let mut rng = RngStream::new(seed);
    let mut out = input2d.clone();
    for v in out.data_mut() {
        *v += rng.normal_scaled(0.0, sigma);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleMeta {
    pub sequence_id: u32,
    pub frame_index: u32,
    pub action: String,
}

/// One training window: a T-frame 2D input, the matching root-relative 3D
/// sequence, and the center-frame target.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequenceSample {
    pub input2d: ValueGrid,
    pub target_seq: ValueGrid,
    pub target_center: ValueGrid,
    pub meta: SampleMeta,
}

impl PoseSequenceSample {
    pub fn frames(&self) -> usize {
        self.input2d.shape()[0]
    }

    pub fn joints(&self) -> usize {
        self.input2d.shape()[1]
    }
}

/// Cut one window per frame, replicating edge frames so every window is full
/// length and its center target is the source frame.
pub fn window(
    input2d: &ValueGrid,
    target3d: &ValueGrid,
    window_len: usize,
    sequence_id: u32,
    action: &str,
) -> Result<Vec<PoseSequenceSample>> {
    let (frames, joints) = match (input2d.shape(), target3d.shape()) {
        ([f, j, 2], [f2, j2, 3]) if f == f2 && j == j2 => (*f, *j),
        _ => {
            return Err(Error::dimension(format!(
                "window: input {:?} and target {:?} must be [F,J,2]/[F,J,3]",
                input2d.shape(),
                target3d.shape()
            )))
        }
    };
    if window_len % 2 == 0 {
        return Err(Error::config("window length must be odd"));
    }
    let half = window_len / 2;
    let mut samples = Vec::with_capacity(frames);
    for center in 0..frames {
        let mut in_data = Vec::with_capacity(window_len * joints * 2);
        let mut tgt_data = Vec::with_capacity(window_len * joints * 3);
        for offset in 0..window_len {
            let src = (center + offset).saturating_sub(half).min(frames - 1);
            in_data.extend_from_slice(
                &input2d.data()[src * joints * 2..(src + 1) * joints * 2],
            );
            tgt_data.extend_from_slice(
                &target3d.data()[src * joints * 3..(src + 1) * joints * 3],
            );
        }
        let target_center = ValueGrid::new(
            vec![joints, 3],
            target3d.data()[center * joints * 3..(center + 1) * joints * 3].to_vec(),
        )?;
        samples.push(PoseSequenceSample {
            input2d: ValueGrid::new(vec![window_len, joints, 2], in_data)?,
            target_seq: ValueGrid::new(vec![window_len, joints, 3], tgt_data)?,
            target_center,
            meta: SampleMeta { sequence_id, frame_index: center as u32, action: action.into() },
        });
    }
    Ok(samples)
}

/// Mirror a pose grid: negate x and swap left/right joint rows.
/// Accepts [J, C] or [F, J, C] with C = 2 or 3.
pub fn flip_pose(grid: &ValueGrid, skel: &SkeletonSpec) -> Result<ValueGrid> {
    let (frames, joints, coords) = match grid.shape() {
        [j, c] if *c == 2 || *c == 3 => (1, *j, *c),
        [f, j, c] if *c == 2 || *c == 3 => (*f, *j, *c),
        other => return Err(Error::dimension(format!("flip: bad pose shape {other:?}"))),
    };
    if joints != skel.joints() {
        return Err(Error::dimension(format!(
            "flip: pose has {joints} joints, skeleton {}",
            skel.joints()
        )));
    }
    let mut out = grid.clone();
    for f in 0..frames {
        let base = f * joints * coords;
        for &(l, r) in &skel.left_right_pairs {
            for c in 0..coords {
                out.data_mut().swap(base + l * coords + c, base + r * coords + c);
            }
        }
        for j in 0..joints {
            out.data_mut()[base + j * coords] *= -1.0;
        }
    }
    Ok(out)
}

/// Horizontal flip augmentation of a full sample.
pub fn horizontal_flip(
    sample: &PoseSequenceSample,
    skel: &SkeletonSpec,
) -> Result<PoseSequenceSample> {
    Ok(PoseSequenceSample {
        input2d: flip_pose(&sample.input2d, skel)?,
        target_seq: flip_pose(&sample.target_seq, skel)?,
        target_center: flip_pose(&sample.target_center, skel)?,
        meta: sample.meta.clone(),
    })
}

/// Dataset generation settings for the synthetic pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub window: usize,
    /// 2D noise standard deviation in pixels (converted per camera).
    pub sigma_px: f64,
    pub hz: f64,
    /// Multiplier on every action profile's angular amplitude.
    pub amplitude_scale: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            sequences: 4,
            frames_per_sequence: 200,
            window: 27,
            sigma_px: 0.0,
            hz: 50.0,
            amplitude_scale: 1.0,
        }
    }
}

const ACTION_TAGS: [(&str, f64); 5] =
    [("calm", 0.5), ("steady", 0.75), ("brisk", 1.0), ("sway", 1.25), ("reach", 1.5)];

/// Produce windowed samples for `sequences` independent motions. Output
/// values are quantized through f32 so the in-memory dataset equals its
/// serialized form exactly.
pub fn generate_dataset(
    skel: &SkeletonSpec,
    camera: &CameraSpec,
    gen: &GenConfig,
) -> Result<Vec<PoseSequenceSample>> {
    let root = RngStream::new(gen.seed);
    let mut all = Vec::new();
    for s in 0..gen.sequences {
        let (action, amp_scale) = ACTION_TAGS[s % ACTION_TAGS.len()];
        let params = MotionParams {
            hz: gen.hz,
            angle_amplitude: MotionParams::default().angle_amplitude
                * amp_scale
                * gen.amplitude_scale,
            root_travel_mm: MotionParams::default().root_travel_mm * gen.amplitude_scale,
            ..MotionParams::default()
        };
        let motion_seed = root.derive(s as u64).next_raw_seed();
        let motion = generate_motion(skel, &params, motion_seed, gen.frames_per_sequence)?;
        let mut input2d = project(&motion, camera)?;
        if gen.sigma_px > 0.0 {
            let sigma = camera.sigma_px_to_normalized(gen.sigma_px);
            let noise_seed = root.derive(0xA0_0000 + s as u64).next_raw_seed();
            input2d = add_noise(&input2d, sigma, noise_seed)?;
        }
        let target = root_relative(&motion)?;
        let mut samples = window(&input2d, &target, gen.window, s as u32, action)?;
        for sample in &mut samples {
            quantize_f32(&mut sample.input2d);
            quantize_f32(&mut sample.target_seq);
            quantize_f32(&mut sample.target_center);
        }
        all.extend(samples);
    }
    Ok(all)
}

fn quantize_f32(grid: &mut ValueGrid) {
    for v in grid.data_mut() {
        *v = *v as f32 as f64;
    }
}

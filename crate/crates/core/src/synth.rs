//! Synthetic multimodal reaching-motion generator.
//!
//! Each recording simulates a seated subject reaching from a wrist rest to
//! one of nine shelf regions laid out in a 3x3 grid, seen by a fixed camera:
//! face landmarks and depth images at 15 FPS, a wrist IMU at 100 FPS. The
//! kinematics are analytic, so every sensor channel has closed-form ground
//! truth that tests can integrate or project against:
//!
//! - the wrist follows a minimum-jerk path from the rest point to the
//!   region's shelf target, with duration drawn from that region's reach-time
//!   distribution (truncated at its observed minimum);
//! - the IMU reports specific force (wrist acceleration plus gravity, kept
//!   world-aligned so trapezoid integration recovers the velocity profile),
//!   forearm angular velocity, a magnetometer rotated with the forearm to
//!   carry orientation, and barometric pressure tracking wrist altitude;
//! - face landmarks are a rigid 468-point head template whose yaw/pitch ramp
//!   toward the target ahead of the hand, projected to image-relative
//!   coordinates;
//! - depth frames render the forearm as a capsule sweeping over a static
//!   head/torso/background scene, orthographically.
//!
//! Class signal is therefore structural: each region pulls the arm sweep,
//! the gaze angles, and the IMU profile in a distinct direction. Two seeded
//! streams drive randomness, one for kinematics and one for sensor noise, so
//! the zero-noise twin of a recording shares its exact trajectory.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{
    Dataset, DatasetWriter, DepthFrame, FaceFrame, MotionFrame, MotionRecording, FACE_LANDMARKS,
};
use crate::error::Result;
use crate::reference::REGION_DURATIONS;
use crate::region::{Region, REGIONS};

/// Gravitational acceleration folded into the accelerometer channels, m/s^2.
pub const GRAVITY_MPS2: f64 = 9.81;

/// XOR salt separating the noise RNG stream from the kinematics stream.
const NOISE_STREAM_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

// ── Parameters ──────────────────────────────────────────────────────────────

/// Reach-time distribution for one region: a normal clipped from below.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationParams {
    pub mean: f64,
    pub sd: f64,
    pub min: f64,
}

/// Additive Gaussian noise SDs, one per sensor family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Accelerometer, m/s^2.
    pub imu_acc: f64,
    /// Gyroscope, rad/s.
    pub imu_gyro: f64,
    /// Magnetometer, gauss.
    pub imu_mag: f64,
    /// Barometer, hPa.
    pub pressure: f64,
    /// Landmark coordinates, image-relative units.
    pub landmark: f64,
    /// Depth pixels, meters.
    pub depth: f64,
}

impl Default for NoiseParams {
    fn default() -> NoiseParams {
        NoiseParams {
            imu_acc: 0.08,
            imu_gyro: 0.03,
            imu_mag: 0.01,
            pressure: 0.02,
            landmark: 0.0025,
            depth: 0.012,
        }
    }
}

impl NoiseParams {
    /// All noise off; recordings become pure functions of (params, region,
    /// seed) kinematics.
    pub fn silent() -> NoiseParams {
        NoiseParams { imu_acc: 0.0, imu_gyro: 0.0, imu_mag: 0.0, pressure: 0.0, landmark: 0.0, depth: 0.0 }
    }
}

/// Full generator configuration. Serialized into the dataset manifest so a
/// container records exactly how it was made.
///
/// Geometry lives in the camera frame: origin at the camera, x right, y up,
/// z away from the camera, meters. The subject sits around z = 1.1-1.2 and
/// reaches toward shelf targets at z = 0.25.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub seed: u64,
    pub depth_h: usize,
    pub depth_w: usize,
    pub camera_fps: f64,
    pub imu_fps: f64,
    /// Reach-time distributions indexed by `Region::index`.
    pub durations: [DurationParams; 9],
    /// Shelf target points indexed by `Region::index`.
    pub targets: [[f64; 3]; 9],
    pub wrist_rest: [f64; 3],
    pub shoulder: [f64; 3],
    pub head_center: [f64; 3],
    /// Head ellipsoid half-extents (x, y, z).
    pub head_radii: [f64; 3],
    /// Fraction of the full head-to-target bearing the head actually turns.
    pub gaze_gain: f64,
    /// Head turn completes this factor faster than the reach itself, so the
    /// face carries early class signal.
    pub gaze_lead: f64,
    /// Forearm capsule radius for the depth render, meters.
    pub arm_radius: f64,
    pub torso_center: [f64; 3],
    /// Torso ellipse half-extents in the image plane (x, y).
    pub torso_radii: [f64; 2],
    /// How far the torso bulges toward the camera at its center, meters.
    pub torso_bulge: f64,
    pub background_depth: f64,
    /// Physical extent of the depth image, meters (height, width).
    pub image_extent: [f64; 2],
    /// Idle seconds before motion onset, sampled uniformly.
    pub idle_range: [f64; 2],
    /// Seconds of data kept after the motion-end annotation.
    pub tail: f64,
    /// Uniform jitter half-range applied to each target coordinate, meters.
    pub target_jitter: f64,
    /// Probability that a face frame is a tracker miss (`present == false`).
    pub face_dropout: f64,
    pub noise: NoiseParams,
    /// Ambient magnetic field in the camera frame, gauss.
    pub mag_field: [f64; 3],
    /// Barometer reading at y = 0, hPa.
    pub pressure_base: f64,
    /// Barometric lapse, hPa per meter of altitude.
    pub pressure_per_meter: f64,
}

impl GeneratorParams {
    /// Desk-scale defaults: 64x47 depth images, reach-time distributions from
    /// the published per-region statistics.
    pub fn new(seed: u64) -> GeneratorParams {
        let durations = REGION_DURATIONS
            .map(|r| DurationParams { mean: r.mean, sd: r.sd, min: r.min });
        let mut targets = [[0.0; 3]; 9];
        for region in REGIONS {
            let x = [-0.28, 0.0, 0.28][region.index() % 3];
            let y = [0.38, 0.03, -0.32][region.row()];
            targets[region.index()] = [x, y, 0.25];
        }
        GeneratorParams {
            seed,
            depth_h: 64,
            depth_w: 47,
            camera_fps: 15.0,
            imu_fps: 100.0,
            durations,
            targets,
            wrist_rest: [0.12, -0.52, 1.05],
            shoulder: [0.10, -0.38, 1.15],
            head_center: [0.0, 0.18, 1.18],
            head_radii: [0.09, 0.12, 0.10],
            gaze_gain: 0.8,
            gaze_lead: 1.4,
            arm_radius: 0.06,
            torso_center: [0.0, -0.25, 1.20],
            torso_radii: [0.22, 0.35],
            torso_bulge: 0.08,
            background_depth: 2.0,
            image_extent: [1.10, 0.80],
            idle_range: [0.35, 0.55],
            tail: 0.25,
            target_jitter: 0.03,
            face_dropout: 0.0,
            noise: NoiseParams::default(),
            mag_field: [0.22, -0.41, 0.30],
            pressure_base: 1013.25,
            pressure_per_meter: 0.12,
        }
    }

    /// Full-size variant: 256x188 depth images, same scene.
    pub fn full_size(seed: u64) -> GeneratorParams {
        GeneratorParams { depth_h: 256, depth_w: 188, ..GeneratorParams::new(seed) }
    }
}

// ── Vector helpers ──────────────────────────────────────────────────────────

type V3 = [f64; 3];

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(a: V3) -> V3 {
    scale(a, 1.0 / norm(a))
}

/// Rotate `v` around unit `axis` by `angle` (Rodrigues).
fn rotate_axis_angle(v: V3, axis: V3, angle: f64) -> V3 {
    let (s, c) = angle.sin_cos();
    add(
        add(scale(v, c), scale(cross(axis, v), s)),
        scale(axis, dot(axis, v) * (1.0 - c)),
    )
}

fn rot_x(p: V3, a: f64) -> V3 {
    let (s, c) = a.sin_cos();
    [p[0], p[1] * c - p[2] * s, p[1] * s + p[2] * c]
}

fn rot_y(p: V3, a: f64) -> V3 {
    let (s, c) = a.sin_cos();
    [p[0] * c + p[2] * s, p[1], -p[0] * s + p[2] * c]
}

// ── Reach kinematics ────────────────────────────────────────────────────────

/// Minimum-jerk position profile s(tau) on [0, 1]: s(0)=0, s(1)=1, with zero
/// velocity and acceleration at both ends.
pub fn min_jerk_pos(tau: f64) -> f64 {
    let t2 = tau * tau;
    t2 * tau * (10.0 - 15.0 * tau + 6.0 * t2)
}

/// d s / d tau = 30 tau^2 (1 - tau)^2.
pub fn min_jerk_vel(tau: f64) -> f64 {
    let r = tau * (1.0 - tau);
    30.0 * r * r
}

/// d^2 s / d tau^2 = 60 tau (1 - tau) (1 - 2 tau).
pub fn min_jerk_acc(tau: f64) -> f64 {
    60.0 * tau * (1.0 - tau) * (1.0 - 2.0 * tau)
}

/// One straight-line minimum-jerk reach; all quantities are closed-form in
/// time, which is what makes the generated IMU channels testable.
#[derive(Debug, Clone, Copy)]
pub struct ReachKinematics {
    pub rest: V3,
    pub target: V3,
    pub shoulder: V3,
    /// Motion onset, seconds on the recording clock.
    pub start: f64,
    pub duration: f64,
}

impl ReachKinematics {
    fn tau(&self, t: f64) -> f64 {
        ((t - self.start) / self.duration).clamp(0.0, 1.0)
    }

    pub fn wrist(&self, t: f64) -> V3 {
        add(self.rest, scale(sub(self.target, self.rest), min_jerk_pos(self.tau(t))))
    }

    /// Zero outside the motion interval; minimum jerk is C^2 at both ends.
    pub fn wrist_velocity(&self, t: f64) -> V3 {
        scale(sub(self.target, self.rest), min_jerk_vel(self.tau(t)) / self.duration)
    }

    pub fn wrist_acceleration(&self, t: f64) -> V3 {
        scale(
            sub(self.target, self.rest),
            min_jerk_acc(self.tau(t)) / (self.duration * self.duration),
        )
    }

    /// Unit vector along the forearm, shoulder to wrist.
    pub fn forearm_dir(&self, t: f64) -> V3 {
        normalize(sub(self.wrist(t), self.shoulder))
    }

    /// Angular velocity of the forearm direction: omega = u x du/dt.
    pub fn angular_velocity(&self, t: f64) -> V3 {
        let r = sub(self.wrist(t), self.shoulder);
        let len = norm(r);
        let u = scale(r, 1.0 / len);
        let v = self.wrist_velocity(t);
        // du/dt: the component of dr/dt orthogonal to u, divided by |r|.
        let du = scale(sub(v, scale(u, dot(u, v))), 1.0 / len);
        cross(u, du)
    }
}

/// Reading of the world vector `field` in the sensor frame, where the sensor
/// is rigidly attached to the forearm and the forearm rotated from direction
/// `u0` to `u`.
fn world_to_sensor(u0: V3, u: V3, field: V3) -> V3 {
    let axis = cross(u0, u);
    let s = norm(axis);
    if s < 1e-12 {
        return field;
    }
    let angle = s.atan2(dot(u0, u));
    rotate_axis_angle(field, scale(axis, 1.0 / s), -angle)
}

// ── Head model ──────────────────────────────────────────────────────────────

/// Rigid 468-point head template: a golden-spiral point cloud on an ellipsoid
/// centered at the origin. Index of the forward-most point ("nose", smallest
/// z) is stable for a given radii setting.
fn head_template(radii: V3) -> Vec<V3> {
    // Golden angle, pi * (3 - sqrt 5).
    const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;
    (0..FACE_LANDMARKS)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / FACE_LANDMARKS as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = GOLDEN_ANGLE * i as f64;
            [radii[0] * r * phi.cos(), radii[1] * y, radii[2] * r * phi.sin()]
        })
        .collect()
}

/// Yaw/pitch that would point the face (which looks along -z) at the target.
fn gaze_angles(head_center: V3, target: V3) -> (f64, f64) {
    let d = sub(target, head_center);
    let yaw = (-d[0]).atan2(-d[2]);
    let pitch = d[1].atan2((d[0] * d[0] + d[2] * d[2]).sqrt());
    (yaw, pitch)
}

// ── Depth render ────────────────────────────────────────────────────────────

/// Center of pixel (i, j) in the image plane, meters. Row 0 is the top of
/// the image (largest y), column 0 the left (smallest x).
fn pixel_center(params: &GeneratorParams, i: usize, j: usize) -> (f64, f64) {
    let (hm, wm) = (params.image_extent[0], params.image_extent[1]);
    let x = (j as f64 + 0.5) / params.depth_w as f64 * wm - wm / 2.0;
    let y = hm / 2.0 - (i as f64 + 0.5) / params.depth_h as f64 * hm;
    (x, y)
}

/// Squared image-plane distance from (x, y) to the segment a->b, plus the z
/// of the closest segment point.
fn segment_closest(a: V3, b: V3, x: f64, y: f64) -> (f64, f64) {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let cx = a[0] + t * dx;
    let cy = a[1] + t * dy;
    let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
    (d2, a[2] + t * (b[2] - a[2]))
}

/// Orthographic depth render of the scene with the wrist at `wrist`:
/// closest of forearm capsule, head ellipsoid, torso ellipse, background.
fn render_depth(params: &GeneratorParams, wrist: V3) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.depth_h * params.depth_w);
    let hc = params.head_center;
    let hr = params.head_radii;
    let tc = params.torso_center;
    let tr = params.torso_radii;
    let r2 = params.arm_radius * params.arm_radius;
    for i in 0..params.depth_h {
        for j in 0..params.depth_w {
            let (x, y) = pixel_center(params, i, j);
            let mut z = params.background_depth;
            let tq = ((x - tc[0]) / tr[0]).powi(2) + ((y - tc[1]) / tr[1]).powi(2);
            if tq < 1.0 {
                z = z.min(tc[2] - params.torso_bulge * (1.0 - tq).sqrt());
            }
            let hq = ((x - hc[0]) / hr[0]).powi(2) + ((y - hc[1]) / hr[1]).powi(2);
            if hq < 1.0 {
                z = z.min(hc[2] - hr[2] * (1.0 - hq).sqrt());
            }
            let (d2, seg_z) = segment_closest(params.shoulder, wrist, x, y);
            if d2 < r2 {
                z = z.min(seg_z - (r2 - d2).sqrt());
            }
            out.push(z);
        }
    }
    out
}

/// Pixels the forearm passes over during a nominal (unjittered) reach to
/// `region`, with margin; used to compare motion energy over the arm sweep
/// against the static background.
pub fn arm_sweep_mask(params: &GeneratorParams, region: Region) -> Vec<bool> {
    let kin = ReachKinematics {
        rest: params.wrist_rest,
        target: params.targets[region.index()],
        shoulder: params.shoulder,
        start: 0.0,
        duration: 1.0,
    };
    const STEPS: usize = 128;
    let wrists: Vec<V3> = (0..=STEPS).map(|k| kin.wrist(k as f64 / STEPS as f64)).collect();
    let limit = (params.arm_radius * 1.5) * (params.arm_radius * 1.5);
    let mut mask = Vec::with_capacity(params.depth_h * params.depth_w);
    for i in 0..params.depth_h {
        for j in 0..params.depth_w {
            let (x, y) = pixel_center(params, i, j);
            let hit = wrists
                .iter()
                .any(|&w| segment_closest(params.shoulder, w, x, y).0 <= limit);
            mask.push(hit);
        }
    }
    mask
}

// ── Recording generation ────────────────────────────────────────────────────

fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    let z: f64 = rng.sample(StandardNormal);
    sd * z
}

/// Generate one recording. Pure in (params, region, seed): the kinematics
/// and the noise come from two independent seeded streams, so the same seed
/// with noise silenced yields the same trajectory without the noise.
pub fn generate_recording(params: &GeneratorParams, region: Region, seed: u64) -> MotionRecording {
    let mut kin_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_STREAM_SALT);

    // Structural draws, in fixed order so frame counts cannot disturb them.
    let d = params.durations[region.index()];
    let z: f64 = kin_rng.sample(StandardNormal);
    let duration = (d.mean + d.sd * z).max(d.min);
    let start = kin_rng.gen_range(params.idle_range[0]..=params.idle_range[1]);
    let mut target = params.targets[region.index()];
    for c in &mut target {
        *c += kin_rng.gen_range(-params.target_jitter..=params.target_jitter);
    }
    let end = start + duration;
    let total = end + params.tail;

    let kin = ReachKinematics {
        rest: params.wrist_rest,
        target,
        shoulder: params.shoulder,
        start,
        duration,
    };
    let n = params.noise;

    // IMU stream.
    let n_imu = (total * params.imu_fps).floor() as usize + 1;
    let u0 = kin.forearm_dir(0.0);
    let mut motion = Vec::with_capacity(n_imu);
    for i in 0..n_imu {
        let t = i as f64 / params.imu_fps;
        let mag = world_to_sensor(u0, kin.forearm_dir(t), params.mag_field);
        let gyro = kin.angular_velocity(t);
        let acc = add(kin.wrist_acceleration(t), [0.0, GRAVITY_MPS2, 0.0]);
        let pressure =
            params.pressure_base - params.pressure_per_meter * kin.wrist(t)[1];
        let channels = [
            (mag[0] + gauss(&mut noise_rng, n.imu_mag)) as f32,
            (mag[1] + gauss(&mut noise_rng, n.imu_mag)) as f32,
            (mag[2] + gauss(&mut noise_rng, n.imu_mag)) as f32,
            (gyro[0] + gauss(&mut noise_rng, n.imu_gyro)) as f32,
            (gyro[1] + gauss(&mut noise_rng, n.imu_gyro)) as f32,
            (gyro[2] + gauss(&mut noise_rng, n.imu_gyro)) as f32,
            (acc[0] + gauss(&mut noise_rng, n.imu_acc)) as f32,
            (acc[1] + gauss(&mut noise_rng, n.imu_acc)) as f32,
            (acc[2] + gauss(&mut noise_rng, n.imu_acc)) as f32,
            (pressure + gauss(&mut noise_rng, n.pressure)) as f32,
        ];
        motion.push(MotionFrame {
            timestamp: t as f32,
            channels,
            elapsed: (t - start) as f32,
        });
    }

    // Camera streams (face + depth share timestamps).
    let n_cam = (total * params.camera_fps).floor() as usize + 1;
    let template = head_template(params.head_radii);
    let (yaw_full, pitch_full) = gaze_angles(params.head_center, target);
    let (hm, wm) = (params.image_extent[0], params.image_extent[1]);
    let mut face = Vec::with_capacity(n_cam);
    let mut depth = Vec::with_capacity(n_cam);
    for i in 0..n_cam {
        let t = i as f64 / params.camera_fps;
        let present = kin_rng.gen::<f64>() >= params.face_dropout;
        let ramp =
            min_jerk_pos(((t - start) / duration * params.gaze_lead).clamp(0.0, 1.0));
        let yaw = yaw_full * params.gaze_gain * ramp;
        let pitch = pitch_full * params.gaze_gain * ramp;
        let landmarks = if present {
            let mut lm = Vec::with_capacity(3 * FACE_LANDMARKS);
            for p in &template {
                let world = add(params.head_center, rot_y(rot_x(*p, pitch), yaw));
                lm.push(
                    ((world[0] + wm / 2.0) / wm + gauss(&mut noise_rng, n.landmark)) as f32,
                );
                lm.push(
                    ((hm / 2.0 - world[1]) / hm + gauss(&mut noise_rng, n.landmark)) as f32,
                );
                lm.push(
                    ((world[2] - params.head_center[2]) / wm
                        + gauss(&mut noise_rng, n.landmark)) as f32,
                );
            }
            lm
        } else {
            vec![0.0; 3 * FACE_LANDMARKS]
        };
        face.push(FaceFrame {
            timestamp: t as f32,
            landmarks,
            elapsed: (t - start) as f32,
            present,
        });

        let mut pixels = render_depth(params, kin.wrist(t));
        for p in &mut pixels {
            *p = (*p + gauss(&mut noise_rng, n.depth)).max(0.05);
        }
        depth.push(DepthFrame {
            timestamp: t as f32,
            pixels: pixels.iter().map(|&p| p as f32).collect(),
            elapsed: (t - start) as f32,
        });
    }

    MotionRecording {
        id: format!("synth-{}-{seed:016x}", region.label().to_lowercase()),
        participant: 0,
        label: region,
        start,
        end,
        face,
        depth,
        motion,
    }
}

// ── Dataset generation ──────────────────────────────────────────────────────

/// Shuffled (region, seed, participant) plan for a dataset: one entry per
/// recording, seeds drawn from the master stream, participants assigned
/// round-robin before the shuffle.
fn plan(params: &GeneratorParams, counts: &[usize; 9]) -> Vec<(Region, u64, u32)> {
    let mut master = ChaCha8Rng::seed_from_u64(params.seed);
    let mut items = Vec::new();
    for (region, &count) in REGIONS.iter().zip(counts) {
        for _ in 0..count {
            let seed: u64 = master.gen();
            let participant = (items.len() % 8) as u32;
            items.push((*region, seed, participant));
        }
    }
    items.shuffle(&mut master);
    items
}

fn planned_recording(params: &GeneratorParams, entry: (Region, u64, u32), idx: usize) -> MotionRecording {
    let (region, seed, participant) = entry;
    let mut rec = generate_recording(params, region, seed);
    rec.id = format!("rec-{idx:05}");
    rec.participant = participant;
    rec
}

/// Balanced dataset, `per_region` recordings per class, shuffled order.
/// Ids are positional (`rec-00000`…) so containers stay tidy.
pub fn generate_dataset(params: &GeneratorParams, per_region: usize) -> Vec<MotionRecording> {
    plan(params, &[per_region; 9])
        .into_iter()
        .enumerate()
        .map(|(idx, entry)| planned_recording(params, entry, idx))
        .collect()
}

/// Stream a dataset straight into a container directory, one recording in
/// memory at a time; the generator parameters are stored in the manifest.
pub fn generate_to_dir(
    params: &GeneratorParams,
    counts: &[usize; 9],
    dir: &Path,
) -> Result<Dataset> {
    let mut writer = DatasetWriter::create(dir, params.depth_h, params.depth_w)?;
    for (idx, entry) in plan(params, counts).into_iter().enumerate() {
        writer.add(&planned_recording(params, entry, idx))?;
    }
    writer.finish(Some(serde_json::to_value(params)?))
}

/// Split `total` recordings over the nine regions in proportion to the
/// published per-region sample counts, by largest remainder.
pub fn apportion(total: usize) -> [usize; 9] {
    let ns: Vec<f64> = REGION_DURATIONS.iter().map(|r| r.n as f64).collect();
    let pool: f64 = ns.iter().sum();
    let mut out = [0usize; 9];
    let mut fracs: Vec<(f64, usize)> = Vec::with_capacity(9);
    let mut assigned = 0usize;
    for (i, n) in ns.iter().enumerate() {
        let quota = total as f64 * n / pool;
        out[i] = quota.floor() as usize;
        assigned += out[i];
        fracs.push((quota - quota.floor(), i));
    }
    // Largest fractional parts win the leftovers; ties break toward the
    // earlier region for determinism.
    fracs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in fracs.iter().take(total - assigned) {
        out[i] += 1;
    }
    out
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{extract_window, WindowShape};

    /// Cheap settings for tests that do not care about image detail.
    fn tiny(seed: u64) -> GeneratorParams {
        GeneratorParams { depth_h: 8, depth_w: 6, ..GeneratorParams::new(seed) }
    }

    #[test]
    fn same_seed_reproduces_the_recording_bit_for_bit() {
        let mut params = tiny(1);
        params.face_dropout = 0.3;
        let a = generate_recording(&params, Region::Center, 42);
        let b = generate_recording(&params, Region::Center, 42);
        assert_eq!(a, b);

        params.noise = NoiseParams::silent();
        let c = generate_recording(&params, Region::Center, 42);
        let d = generate_recording(&params, Region::Center, 42);
        assert_eq!(c, d);

        // The silent twin shares kinematics with the noisy recording: same
        // annotations, same timestamps, same dropout pattern.
        assert_eq!(a.start, c.start);
        assert_eq!(a.end, c.end);
        assert_eq!(a.motion.len(), c.motion.len());
        let presence: Vec<bool> = a.face.iter().map(|f| f.present).collect();
        let presence_c: Vec<bool> = c.face.iter().map(|f| f.present).collect();
        assert_eq!(presence, presence_c);
        assert!(presence.iter().any(|p| !p), "dropout 0.3 should drop some frames");
        assert!(a.motion[5].channels != c.motion[5].channels, "noise should differ");
    }

    #[test]
    fn dropped_face_frames_are_marked_absent_and_zeroed() {
        let mut params = tiny(3);
        params.face_dropout = 1.0;
        let rec = generate_recording(&params, Region::TopLeft, 7);
        assert!(rec.face.iter().all(|f| !f.present));
        assert!(rec.face.iter().all(|f| f.landmarks.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn sampled_durations_match_the_reference_table() {
        // Same seed list for every region, so the standard-normal draws are
        // shared and a single sample-mean check covers them all.
        let mut params = tiny(0);
        params.camera_fps = 5.0; // duration draws do not depend on frame counts
        params.imu_fps = 20.0;
        let n = 200;
        for (region, reference) in REGIONS.iter().zip(REGION_DURATIONS.iter()) {
            let mean: f64 = (0..n)
                .map(|s| generate_recording(&params, *region, s as u64).duration())
                .sum::<f64>()
                / n as f64;
            let two_se = 2.0 * reference.sd / (n as f64).sqrt();
            assert!(
                (mean - reference.mean).abs() <= two_se,
                "{region}: sample mean {mean:.4} vs reference {:.4} (2 SE = {two_se:.4})",
                reference.mean,
            );
            if *region == Region::BottomCenter {
                assert!((mean - 1.33).abs() <= 0.05, "BC mean {mean:.4} not within 1.33±0.05");
            }
        }
    }

    #[test]
    fn accelerometer_integrates_back_to_the_wrist_velocity() {
        let mut params = tiny(0);
        params.noise = NoiseParams::silent();
        params.target_jitter = 0.0;
        params.idle_range = [0.4, 0.4];
        let region = Region::TopRight;
        let mut d = params.durations[region.index()];
        d.sd = 0.0;
        params.durations[region.index()] = d;
        let rec = generate_recording(&params, region, 11);
        assert_eq!(rec.start, 0.4);
        assert!((rec.duration() - d.mean).abs() < 1e-12);

        let kin = ReachKinematics {
            rest: params.wrist_rest,
            target: params.targets[region.index()],
            shoulder: params.shoulder,
            start: rec.start,
            duration: rec.duration(),
        };
        let h = 1.0 / params.imu_fps;
        let mut vel = [0.0f64; 3];
        let mut prev = [0.0f64; 3];
        let mut sq_err = 0.0;
        let mut count = 0usize;
        for (i, frame) in rec.motion.iter().enumerate() {
            let t = i as f64 * h;
            let acc = [
                frame.channels[6] as f64,
                frame.channels[7] as f64 - GRAVITY_MPS2,
                frame.channels[8] as f64,
            ];
            if i > 0 {
                for c in 0..3 {
                    vel[c] += 0.5 * h * (prev[c] + acc[c]);
                }
            }
            prev = acc;
            let truth = kin.wrist_velocity(t);
            for c in 0..3 {
                sq_err += (vel[c] - truth[c]).powi(2);
            }
            count += 3;
        }
        let rms = (sq_err / count as f64).sqrt();
        let peak = 1.875 * norm(sub(kin.target, kin.rest)) / kin.duration;
        assert!(
            rms <= 0.02 * peak,
            "velocity RMS error {rms:.5} exceeds 2% of peak speed {peak:.3}"
        );
    }

    #[test]
    fn gyro_matches_finite_difference_of_forearm_direction() {
        let kin = ReachKinematics {
            rest: [0.12, -0.52, 1.05],
            target: [-0.28, 0.38, 0.25],
            shoulder: [0.10, -0.38, 1.15],
            start: 0.0,
            duration: 1.5,
        };
        let eps = 1e-6;
        for k in 1..10 {
            let t = 0.15 * k as f64;
            let u0 = kin.forearm_dir(t - eps);
            let u1 = kin.forearm_dir(t + eps);
            let du = scale(sub(u1, u0), 1.0 / (2.0 * eps));
            let w = kin.angular_velocity(t);
            // omega x u should equal du/dt for a unit direction vector.
            let predicted = cross(w, kin.forearm_dir(t));
            for c in 0..3 {
                assert!(
                    (predicted[c] - du[c]).abs() < 1e-5,
                    "t={t}: omega x u {predicted:?} vs du/dt {du:?}"
                );
            }
        }
    }

    #[test]
    fn head_turns_toward_the_target_side() {
        let mut params = tiny(0);
        params.noise = NoiseParams::silent();
        params.target_jitter = 0.0;
        let template = head_template(params.head_radii);
        let nose = template
            .iter()
            .enumerate()
            .min_by(|a, b| a.1[2].partial_cmp(&b.1[2]).unwrap())
            .unwrap()
            .0;

        let shift = |region: Region| {
            let rec = generate_recording(&params, region, 5);
            let first = &rec.face.first().unwrap().landmarks;
            let last = &rec.face.last().unwrap().landmarks;
            (last[3 * nose] - first[3 * nose]) as f64
        };
        let left = shift(Region::TopLeft);
        let right = shift(Region::TopRight);
        assert!(left < -1e-3, "nose should shift toward -x for a left target, got {left}");
        assert!(right > 1e-3, "nose should shift toward +x for a right target, got {right}");

        // Pitch: top vs bottom rows move the nose vertically in opposite
        // directions (image y grows downward).
        let vshift = |region: Region| {
            let rec = generate_recording(&params, region, 5);
            let first = &rec.face.first().unwrap().landmarks;
            let last = &rec.face.last().unwrap().landmarks;
            (last[3 * nose + 1] - first[3 * nose + 1]) as f64
        };
        assert!(vshift(Region::TopCenter) < -1e-3);
        assert!(vshift(Region::BottomCenter) > 1e-3);
    }

    #[test]
    fn arm_sweep_carries_all_motion_energy_at_zero_noise() {
        let mut params = GeneratorParams { depth_h: 32, depth_w: 24, ..GeneratorParams::new(0) };
        params.noise = NoiseParams::silent();
        params.target_jitter = 0.0;
        let region = Region::BottomRight;
        let rec = generate_recording(&params, region, 9);
        let mask = arm_sweep_mask(&params, region);
        let px = params.depth_h * params.depth_w;
        let mut inside = 0.0f64;
        let mut outside = 0.0f64;
        for pair in rec.depth.windows(2) {
            for p in 0..px {
                let diff = (pair[1].pixels[p] - pair[0].pixels[p]).abs() as f64;
                if mask[p] {
                    inside += diff;
                } else {
                    outside += diff;
                }
            }
        }
        assert!(inside > 1.0, "arm sweep should move depth pixels, got {inside}");
        assert_eq!(outside, 0.0, "static scene outside the sweep must not move");
    }

    #[test]
    fn depth_stream_separates_regions_without_a_model() {
        // Nearest-centroid on per-pixel motion energy must beat 3x chance,
        // otherwise the classification task is not learnable from depth.
        let params = GeneratorParams { depth_h: 24, depth_w: 18, ..GeneratorParams::new(17) };
        let per_region = 6;
        let recs = generate_dataset(&params, per_region);
        let px = params.depth_h * params.depth_w;
        let energy = |rec: &MotionRecording| {
            let mut img = vec![0.0f64; px];
            for pair in rec.depth.windows(2) {
                for p in 0..px {
                    img[p] += (pair[1].pixels[p] - pair[0].pixels[p]).abs() as f64;
                }
            }
            img
        };

        let mut centroids = vec![vec![0.0f64; px]; 9];
        let mut train_counts = [0usize; 9];
        let mut test = Vec::new();
        for rec in &recs {
            let class = rec.label.index();
            if train_counts[class] < per_region / 2 {
                train_counts[class] += 1;
                let img = energy(rec);
                for p in 0..px {
                    centroids[class][p] += img[p];
                }
            } else {
                test.push(rec);
            }
        }
        for (c, count) in centroids.iter_mut().zip(train_counts) {
            for v in c.iter_mut() {
                *v /= count as f64;
            }
        }

        let mut hits = 0usize;
        for rec in &test {
            let img = energy(rec);
            let best = (0..9)
                .min_by(|&a, &b| {
                    let da: f64 = (0..px).map(|p| (img[p] - centroids[a][p]).powi(2)).sum();
                    let db: f64 = (0..px).map(|p| (img[p] - centroids[b][p]).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == rec.label.index() {
                hits += 1;
            }
        }
        let accuracy = hits as f64 / test.len() as f64;
        assert!(
            accuracy > 1.0 / 3.0,
            "nearest-centroid accuracy {accuracy:.3} must exceed 3x chance (0.333)"
        );
    }

    #[test]
    fn generated_recordings_window_cleanly() {
        let params = tiny(2);
        for region in REGIONS {
            let rec = generate_recording(&params, region, 100 + region.index() as u64);
            rec.validate(params.depth_h * params.depth_w).unwrap();
            let shape = WindowShape::standard(params.depth_h, params.depth_w);
            let win = extract_window(&rec, &shape, &crate::data::Normalization::identity())
                .unwrap_or_else(|e| panic!("{region}: {e}"));
            assert_eq!(win.face.shape, vec![7, 1405]);
            assert_eq!(win.motion.shape, vec![50, 11]);
        }
    }

    #[test]
    fn datasets_are_balanced_shuffled_and_apportioned() {
        let params = tiny(5);
        let recs = generate_dataset(&params, 2);
        assert_eq!(recs.len(), 18);
        let mut hist = [0usize; 9];
        for rec in &recs {
            hist[rec.label.index()] += 1;
        }
        assert_eq!(hist, [2; 9]);
        // Shuffled: the 18 labels should not come out region-major.
        let labels: Vec<usize> = recs.iter().map(|r| r.label.index()).collect();
        let region_major: Vec<usize> = (0..9).flat_map(|i| [i, i]).collect();
        assert_ne!(labels, region_major);

        assert_eq!(apportion(1538), [172, 169, 171, 173, 172, 170, 171, 170, 170]);
        assert_eq!(apportion(1538).iter().sum::<usize>(), 1538);
        assert_eq!(apportion(9), [1; 9]);
    }

    #[test]
    fn streamed_container_matches_in_memory_generation() {
        let dir = tempfile::tempdir().unwrap();
        let params = tiny(8);
        let ds = generate_to_dir(&params, &[2; 9], dir.path()).unwrap();
        assert_eq!(ds.len(), 18);

        let in_memory = generate_dataset(&params, 2);
        let from_disk = ds.load_index(0).unwrap();
        assert_eq!(from_disk, in_memory[0]);

        let stored: GeneratorParams =
            serde_json::from_value(ds.manifest.generator.clone().unwrap()).unwrap();
        assert_eq!(stored, params);
        assert!(ds.manifest.normalization.motion_sd.iter().all(|&sd| sd > 1e-6));
    }
}

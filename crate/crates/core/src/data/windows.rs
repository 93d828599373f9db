//! Window extraction: the fixed-length model input cut from a recording.
//!
//! Selection is ordinal: the first N frames of each stream whose timestamp
//! is at or after the start annotation, no interpolation or resampling.
//! Elapsed times are recomputed from the start annotation here, so stored
//! per-frame elapsed values never leak into model inputs. The row builders
//! are shared with the replay assembler, which guarantees batch extraction
//! and streaming assembly produce bit-identical tensors.

use serde::{Deserialize, Serialize};

use crate::data::{
    DepthFrame, FaceFrame, MotionFrame, MotionRecording, Normalization, FACE_LANDMARKS,
    MOTION_CHANNELS,
};
use crate::error::{Error, Result};
use crate::region::Region;
use crate::tensor::Tensor;

/// Face row: 468 landmark triples plus elapsed.
pub const FACE_ROW_DIM: usize = 3 * FACE_LANDMARKS + 1;
/// Motion row: ten standardized channels plus elapsed.
pub const MOTION_ROW_DIM: usize = MOTION_CHANNELS + 1;

/// Depth pixels are clamped to this range (meters) then scaled to [0, 1].
pub const DEPTH_CLAMP_METERS: f32 = 4.0;

/// Frame counts and depth geometry of one model input window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowShape {
    pub face_frames: usize,
    pub depth_frames: usize,
    pub motion_frames: usize,
    pub depth_h: usize,
    pub depth_w: usize,
}

impl WindowShape {
    /// The 0.5 s observation window: 7 face and depth frames at 15 FPS,
    /// 50 motion frames at 100 FPS.
    pub fn standard(depth_h: usize, depth_w: usize) -> WindowShape {
        WindowShape { face_frames: 7, depth_frames: 7, motion_frames: 50, depth_h, depth_w }
    }

    pub fn depth_row_dim(&self) -> usize {
        self.depth_h * self.depth_w + 1
    }
}

/// One model input: three time-ordered row matrices plus the window's
/// elapsed-time scalar and its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    /// `[face_frames, 1405]`
    pub face: Tensor,
    /// `[depth_frames, depth_h * depth_w + 1]`
    pub depth: Tensor,
    /// `[motion_frames, 11]`
    pub motion: Tensor,
    /// Largest per-stream elapsed time of the window's final frames.
    pub elapsed: f32,
    pub label: Region,
}

/// Vectorize one face frame. Absent frames contribute zeros everywhere
/// except the trailing elapsed slot.
pub fn face_row(frame: &FaceFrame, elapsed: f32) -> Vec<f32> {
    let mut row = vec![0.0f32; FACE_ROW_DIM];
    if frame.present {
        row[..3 * FACE_LANDMARKS].copy_from_slice(&frame.landmarks);
    }
    row[FACE_ROW_DIM - 1] = elapsed;
    row
}

/// Vectorize one motion frame with per-dataset standardization.
pub fn motion_row(frame: &MotionFrame, elapsed: f32, norm: &Normalization) -> Vec<f32> {
    let mut row = Vec::with_capacity(MOTION_ROW_DIM);
    for (c, &v) in frame.channels.iter().enumerate() {
        row.push((v - norm.motion_mean[c]) / norm.motion_sd[c]);
    }
    row.push(elapsed);
    row
}

/// Vectorize one depth frame: clamp to [0, 4] m, scale to [0, 1], append
/// elapsed.
pub fn depth_row(frame: &DepthFrame, elapsed: f32) -> Vec<f32> {
    let mut row = Vec::with_capacity(frame.pixels.len() + 1);
    row.extend(
        frame.pixels.iter().map(|&v| v.clamp(0.0, DEPTH_CLAMP_METERS) / DEPTH_CLAMP_METERS),
    );
    row.push(elapsed);
    row
}

fn first_at_or_after(timestamps: impl Iterator<Item = f32>, start: f64) -> usize {
    let mut idx = 0;
    for t in timestamps {
        if t as f64 >= start {
            return idx;
        }
        idx += 1;
    }
    idx
}

/// Cut the model window from a recording: the first `shape` frames at or
/// after the start annotation, vectorized. Pure; identical inputs give
/// bit-identical outputs.
pub fn extract_window(
    rec: &MotionRecording,
    shape: &WindowShape,
    norm: &Normalization,
) -> Result<SampleWindow> {
    let f0 = first_at_or_after(rec.face.iter().map(|f| f.timestamp), rec.start);
    let d0 = first_at_or_after(rec.depth.iter().map(|f| f.timestamp), rec.start);
    let m0 = first_at_or_after(rec.motion.iter().map(|f| f.timestamp), rec.start);

    let face_have = rec.face.len() - f0;
    let depth_have = rec.depth.len() - d0;
    let motion_have = rec.motion.len() - m0;
    if face_have < shape.face_frames
        || depth_have < shape.depth_frames
        || motion_have < shape.motion_frames
    {
        return Err(Error::TruncatedWindow {
            id: rec.id.clone(),
            face_have,
            face_need: shape.face_frames,
            depth_have,
            depth_need: shape.depth_frames,
            motion_have,
            motion_need: shape.motion_frames,
        });
    }

    let elapsed_of = |t: f32| (t as f64 - rec.start) as f32;

    let mut face_data = Vec::with_capacity(shape.face_frames * FACE_ROW_DIM);
    let mut last_face = 0.0f32;
    for frame in &rec.face[f0..f0 + shape.face_frames] {
        last_face = elapsed_of(frame.timestamp);
        face_data.extend(face_row(frame, last_face));
    }

    let depth_dim = shape.depth_row_dim();
    let mut depth_data = Vec::with_capacity(shape.depth_frames * depth_dim);
    let mut last_depth = 0.0f32;
    for frame in &rec.depth[d0..d0 + shape.depth_frames] {
        if frame.pixels.len() + 1 != depth_dim {
            return Err(Error::dim(
                "extract_window",
                format!(
                    "recording {}: depth frame has {} pixels, window shape wants {}",
                    rec.id,
                    frame.pixels.len(),
                    depth_dim - 1
                ),
            ));
        }
        last_depth = elapsed_of(frame.timestamp);
        depth_data.extend(depth_row(frame, last_depth));
    }

    let mut motion_data = Vec::with_capacity(shape.motion_frames * MOTION_ROW_DIM);
    let mut last_motion = 0.0f32;
    for frame in &rec.motion[m0..m0 + shape.motion_frames] {
        last_motion = elapsed_of(frame.timestamp);
        motion_data.extend(motion_row(frame, last_motion, norm));
    }

    Ok(SampleWindow {
        face: Tensor::new(vec![shape.face_frames, FACE_ROW_DIM], face_data)?,
        depth: Tensor::new(vec![shape.depth_frames, depth_dim], depth_data)?,
        motion: Tensor::new(vec![shape.motion_frames, MOTION_ROW_DIM], motion_data)?,
        elapsed: last_face.max(last_depth).max(last_motion),
        label: rec.label,
    })
}

//! Recording data model, dataset container, windowing, and splits.
//!
//! A recording holds three timestamped streams (face landmarks at 15 FPS,
//! depth images at 15 FPS, IMU motion at 100 FPS) plus manually annotated
//! motion start/end times. Model samples are fixed-length windows cut from
//! the first frames at or after the start annotation.

mod container;
mod splits;
mod windows;

pub use container::{
    read_dataset, read_recording, write_dataset, write_recording, Dataset, DatasetWriter,
    Manifest, RecordingEntry, RECORDING_MAGIC, RECORDING_VERSION,
};
pub use splits::{kfold, split_dataset, FoldSpec, SplitSpec, REFERENCE_TRAIN_FRACTION};
pub use windows::{
    depth_row, extract_window, face_row, motion_row, SampleWindow, WindowShape, FACE_ROW_DIM,
    MOTION_ROW_DIM,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::Region;

/// Landmark count per face frame; each landmark is an (x, y, z) triple.
pub const FACE_LANDMARKS: usize = 468;
/// IMU channels per motion frame: magnetometer, angular velocity, and
/// acceleration triples plus barometric pressure.
pub const MOTION_CHANNELS: usize = 10;

/// One face-tracking frame. `present == false` means the tracker lost the
/// face; landmark values are then meaningless and vectorize to zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceFrame {
    pub timestamp: f32,
    /// 468 landmarks, image-relative (x, y, z), flattened.
    pub landmarks: Vec<f32>,
    pub elapsed: f32,
    pub present: bool,
}

/// One IMU frame: ten channels plus timing.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFrame {
    pub timestamp: f32,
    pub channels: [f32; MOTION_CHANNELS],
    pub elapsed: f32,
}

/// One depth frame, row-major meters; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthFrame {
    pub timestamp: f32,
    pub pixels: Vec<f32>,
    pub elapsed: f32,
}

/// A full annotated reaching-motion recording.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionRecording {
    pub id: String,
    pub participant: u32,
    pub label: Region,
    /// Manually annotated motion start/end, seconds on the recording clock.
    pub start: f64,
    pub end: f64,
    pub face: Vec<FaceFrame>,
    pub depth: Vec<DepthFrame>,
    pub motion: Vec<MotionFrame>,
}

impl MotionRecording {
    /// Stream ordering, annotation sanity, and uniform frame widths.
    pub fn validate(&self, depth_px: usize) -> Result<()> {
        if self.start >= self.end {
            return Err(Error::validation(format!(
                "recording {}: start {} is not before end {}",
                self.id, self.start, self.end
            )));
        }
        fn sorted<T>(items: &[T], t: impl Fn(&T) -> f32) -> bool {
            items.windows(2).all(|w| t(&w[0]) <= t(&w[1]))
        }
        if !sorted(&self.face, |f| f.timestamp)
            || !sorted(&self.depth, |f| f.timestamp)
            || !sorted(&self.motion, |f| f.timestamp)
        {
            return Err(Error::validation(format!(
                "recording {}: stream timestamps not sorted",
                self.id
            )));
        }
        if let Some(f) = self.face.iter().find(|f| f.landmarks.len() != 3 * FACE_LANDMARKS) {
            return Err(Error::validation(format!(
                "recording {}: face frame with {} landmark floats, expected {}",
                self.id,
                f.landmarks.len(),
                3 * FACE_LANDMARKS
            )));
        }
        if let Some(f) = self.depth.iter().find(|f| f.pixels.len() != depth_px) {
            return Err(Error::validation(format!(
                "recording {}: depth frame with {} pixels, expected {}",
                self.id,
                f.pixels.len(),
                depth_px
            )));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Per-dataset input normalization, stored in the manifest so training and
/// replay share identical preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub motion_mean: Vec<f32>,
    pub motion_sd: Vec<f32>,
}

impl Normalization {
    pub fn identity() -> Normalization {
        Normalization {
            motion_mean: vec![0.0; MOTION_CHANNELS],
            motion_sd: vec![1.0; MOTION_CHANNELS],
        }
    }

    /// Per-channel mean and SD over every motion frame of every recording.
    pub fn from_recordings(recs: &[MotionRecording]) -> Normalization {
        let mut acc = NormAccumulator::new();
        for rec in recs {
            acc.add(rec);
        }
        acc.finish()
    }
}

/// Streaming builder for [`Normalization`], so large datasets never need to
/// sit in memory whole.
#[derive(Debug, Clone)]
pub struct NormAccumulator {
    sum: [f64; MOTION_CHANNELS],
    sumsq: [f64; MOTION_CHANNELS],
    n: u64,
}

impl NormAccumulator {
    pub fn new() -> NormAccumulator {
        NormAccumulator { sum: [0.0; MOTION_CHANNELS], sumsq: [0.0; MOTION_CHANNELS], n: 0 }
    }

    pub fn add(&mut self, rec: &MotionRecording) {
        for frame in &rec.motion {
            for (c, &v) in frame.channels.iter().enumerate() {
                self.sum[c] += v as f64;
                self.sumsq[c] += v as f64 * v as f64;
            }
            self.n += 1;
        }
    }

    /// SDs floor at 1e-6 so standardization never divides by zero; with no
    /// frames seen this is the identity.
    pub fn finish(self) -> Normalization {
        if self.n == 0 {
            return Normalization::identity();
        }
        let n = self.n as f64;
        let mean: Vec<f32> = self.sum.iter().map(|&s| (s / n) as f32).collect();
        let sd: Vec<f32> = (0..MOTION_CHANNELS)
            .map(|c| {
                let m = self.sum[c] / n;
                ((self.sumsq[c] / n - m * m).max(0.0).sqrt() as f32).max(1e-6)
            })
            .collect();
        Normalization { motion_mean: mean, motion_sd: sd }
    }
}

impl Default for NormAccumulator {
    fn default() -> NormAccumulator {
        NormAccumulator::new()
    }
}


/// Write one recording's frames as three CSV files (`face.csv`,
/// `motion.csv`, `depth.csv`) under `dir`, for eyeballing exports.
pub fn export_csv(rec: &MotionRecording, dir: &std::path::Path) -> Result<()> {
    use std::io::Write as _;
    std::fs::create_dir_all(dir)?;

    let mut face = std::io::BufWriter::new(std::fs::File::create(dir.join("face.csv"))?);
    write!(face, "timestamp,elapsed,present")?;
    for i in 0..FACE_LANDMARKS {
        write!(face, ",x{i},y{i},z{i}")?;
    }
    writeln!(face)?;
    for f in &rec.face {
        write!(face, "{},{},{}", f.timestamp, f.elapsed, u8::from(f.present))?;
        for v in &f.landmarks {
            write!(face, ",{v}")?;
        }
        writeln!(face)?;
    }

    let mut motion = std::io::BufWriter::new(std::fs::File::create(dir.join("motion.csv"))?);
    writeln!(
        motion,
        "timestamp,elapsed,mag_x,mag_y,mag_z,gyro_x,gyro_y,gyro_z,acc_x,acc_y,acc_z,pressure"
    )?;
    for f in &rec.motion {
        write!(motion, "{},{}", f.timestamp, f.elapsed)?;
        for v in &f.channels {
            write!(motion, ",{v}")?;
        }
        writeln!(motion)?;
    }

    let mut depth = std::io::BufWriter::new(std::fs::File::create(dir.join("depth.csv"))?);
    writeln!(depth, "timestamp,elapsed,pixels...")?;
    for f in &rec.depth {
        write!(depth, "{},{}", f.timestamp, f.elapsed)?;
        for v in &f.pixels {
            write!(depth, ",{v}")?;
        }
        writeln!(depth)?;
    }
    Ok(())
}

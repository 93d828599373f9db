//! Timestamp-faithful replay of recordings into the inference path, plus
//! end-to-end prediction latency measurement.
//!
//! Replay walks the three sensor streams in global timestamp order with
//! per-stream order preserved. The real clock sleeps out recorded
//! inter-arrival gaps; the virtual clock delivers instantly with logical
//! times equal to the recorded ones, so virtual runs are deterministic and
//! independent of host load. The latency timer covers exactly window
//! assembly (row conversion and trimming) plus the forward pass: frames are
//! already in memory and delivery is simulated, so file I/O and sensor
//! transmission stay outside the measured span. All timing uses the
//! monotonic clock.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    depth_row, face_row, motion_row, DepthFrame, FaceFrame, MotionFrame, MotionRecording,
    Normalization, SampleWindow, WindowShape, FACE_ROW_DIM, MOTION_ROW_DIM,
};
use crate::error::{Error, Result};
use crate::model::FusionModel;
use crate::reference;
use crate::tensor::{GradMode, Tape, Tensor};

// ── Replay ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Clock {
    /// Sleep out the recorded inter-arrival gaps.
    Real,
    /// Deliver instantly; logical time is the recorded timestamp.
    Virtual,
}

/// One delivered frame, borrowed from the recording.
#[derive(Debug, Clone, Copy)]
pub enum FrameEvent<'a> {
    Face(&'a FaceFrame),
    Depth(&'a DepthFrame),
    Motion(&'a MotionFrame),
}

impl FrameEvent<'_> {
    /// The recorded timestamp, which is also the logical delivery time.
    pub fn timestamp(&self) -> f32 {
        match self {
            FrameEvent::Face(f) => f.timestamp,
            FrameEvent::Depth(f) => f.timestamp,
            FrameEvent::Motion(f) => f.timestamp,
        }
    }
}

fn check_sorted(stream: &'static str, timestamps: impl Iterator<Item = f32>) -> Result<()> {
    let mut prev = f32::NEG_INFINITY;
    for (i, t) in timestamps.enumerate() {
        if t < prev {
            return Err(Error::validation(format!(
                "{stream} stream timestamps are unsorted at frame {i} ({t} after {prev})"
            )));
        }
        prev = t;
    }
    Ok(())
}

/// Deliver every frame of the recording to `sink` in global timestamp order
/// (ties resolve face, then depth, then motion), preserving per-stream
/// order. The sink returns `true` to keep receiving; returning `false`
/// stops the stream early, the way a consumer detaches once its window is
/// full. Unsorted streams are rejected before anything is delivered.
pub fn replay<'a, F>(rec: &'a MotionRecording, clock: Clock, mut sink: F) -> Result<()>
where
    F: FnMut(FrameEvent<'a>) -> bool,
{
    check_sorted("face", rec.face.iter().map(|f| f.timestamp))?;
    check_sorted("depth", rec.depth.iter().map(|f| f.timestamp))?;
    check_sorted("motion", rec.motion.iter().map(|f| f.timestamp))?;

    let (mut fi, mut di, mut mi) = (0, 0, 0);
    let mut prev_t: Option<f32> = None;
    loop {
        let ft = rec.face.get(fi).map(|f| f.timestamp);
        let dt = rec.depth.get(di).map(|f| f.timestamp);
        let mt = rec.motion.get(mi).map(|f| f.timestamp);
        // Earliest head wins; on equal timestamps face precedes depth
        // precedes motion (<= keeps the comparison stable).
        let event = match (ft, dt, mt) {
            (None, None, None) => break,
            (Some(f), d, m)
                if d.map_or(true, |d| f <= d) && m.map_or(true, |m| f <= m) =>
            {
                fi += 1;
                FrameEvent::Face(&rec.face[fi - 1])
            }
            (_, Some(d), m) if m.map_or(true, |m| d <= m) => {
                di += 1;
                FrameEvent::Depth(&rec.depth[di - 1])
            }
            _ => {
                mi += 1;
                FrameEvent::Motion(&rec.motion[mi - 1])
            }
        };
        if clock == Clock::Real {
            if let Some(prev) = prev_t {
                let gap = (event.timestamp() - prev).max(0.0);
                if gap > 0.0 {
                    std::thread::sleep(Duration::from_secs_f32(gap));
                }
            }
        }
        prev_t = Some(event.timestamp());
        if !sink(event) {
            break;
        }
    }
    Ok(())
}

// ── Window assembly ─────────────────────────────────────────────────────────

/// Streaming counterpart of batch window extraction: buffers the first
/// `shape` frames of each stream at or after the start annotation, then
/// vectorizes them with the shared row builders, so the assembled window is
/// bit-identical to the batch-extracted one.
pub struct WindowAssembler<'a> {
    shape: WindowShape,
    start: f64,
    face: Vec<&'a FaceFrame>,
    depth: Vec<&'a DepthFrame>,
    motion: Vec<&'a MotionFrame>,
}

impl<'a> WindowAssembler<'a> {
    pub fn new(shape: WindowShape, start: f64) -> WindowAssembler<'a> {
        WindowAssembler {
            shape,
            start,
            face: Vec::with_capacity(shape.face_frames),
            depth: Vec::with_capacity(shape.depth_frames),
            motion: Vec::with_capacity(shape.motion_frames),
        }
    }

    /// Buffer one frame. Frames before the start annotation and frames past
    /// a filled quota are ignored. Returns `true` exactly when this frame
    /// completed the window.
    pub fn offer(&mut self, event: FrameEvent<'a>) -> bool {
        if (event.timestamp() as f64) < self.start || self.complete() {
            return false;
        }
        match event {
            FrameEvent::Face(f) if self.face.len() < self.shape.face_frames => {
                self.face.push(f);
            }
            FrameEvent::Depth(f) if self.depth.len() < self.shape.depth_frames => {
                self.depth.push(f);
            }
            FrameEvent::Motion(f) if self.motion.len() < self.shape.motion_frames => {
                self.motion.push(f);
            }
            _ => return false,
        }
        self.complete()
    }

    pub fn complete(&self) -> bool {
        self.face.len() == self.shape.face_frames
            && self.depth.len() == self.shape.depth_frames
            && self.motion.len() == self.shape.motion_frames
    }

    /// The truncated-window error a batch extraction of the same recording
    /// would report, carrying have/need counts for every stream.
    pub fn missing(&self, id: &str) -> Error {
        Error::TruncatedWindow {
            id: id.to_string(),
            face_have: self.face.len(),
            face_need: self.shape.face_frames,
            depth_have: self.depth.len(),
            depth_need: self.shape.depth_frames,
            motion_have: self.motion.len(),
            motion_need: self.shape.motion_frames,
        }
    }

    /// Vectorize the buffered frames into a model window (the timed
    /// "conversion and trimming" step).
    pub fn assemble(
        &self,
        label: crate::region::Region,
        norm: &Normalization,
    ) -> Result<SampleWindow> {
        if !self.complete() {
            return Err(self.missing("streamed"));
        }
        let elapsed_of = |t: f32| (t as f64 - self.start) as f32;

        let mut face_data = Vec::with_capacity(self.shape.face_frames * FACE_ROW_DIM);
        let mut last_face = 0.0f32;
        for frame in &self.face {
            last_face = elapsed_of(frame.timestamp);
            face_data.extend(face_row(frame, last_face));
        }

        let depth_dim = self.shape.depth_row_dim();
        let mut depth_data = Vec::with_capacity(self.shape.depth_frames * depth_dim);
        let mut last_depth = 0.0f32;
        for frame in &self.depth {
            if frame.pixels.len() + 1 != depth_dim {
                return Err(Error::dim(
                    "window assembly",
                    format!(
                        "depth frame has {} pixels, window shape wants {}",
                        frame.pixels.len(),
                        depth_dim - 1
                    ),
                ));
            }
            last_depth = elapsed_of(frame.timestamp);
            depth_data.extend(depth_row(frame, last_depth));
        }

        let mut motion_data = Vec::with_capacity(self.shape.motion_frames * MOTION_ROW_DIM);
        let mut last_motion = 0.0f32;
        for frame in &self.motion {
            last_motion = elapsed_of(frame.timestamp);
            motion_data.extend(motion_row(frame, last_motion, norm));
        }

        Ok(SampleWindow {
            face: Tensor::new(vec![self.shape.face_frames, FACE_ROW_DIM], face_data)?,
            depth: Tensor::new(vec![self.shape.depth_frames, depth_dim], depth_data)?,
            motion: Tensor::new(vec![self.shape.motion_frames, MOTION_ROW_DIM], motion_data)?,
            elapsed: last_face.max(last_depth).max(last_motion),
            label,
        })
    }
}

// ── Grace time ──────────────────────────────────────────────────────────────

/// Seconds left for a downstream system to act after prediction, plus a
/// flag marking an exhausted budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraceTime {
    pub seconds: f64,
    pub exceeded: bool,
}

/// Mean motion duration minus observation window minus inference time. A
/// result of zero or below comes back as-is with the exceeded flag set.
pub fn grace_time(mean_motion: f64, window: f64, inference: f64) -> Result<GraceTime> {
    for (name, v) in [("mean_motion", mean_motion), ("window", window), ("inference", inference)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::validation(format!(
                "grace time input {name} must be finite and non-negative, got {v}"
            )));
        }
    }
    let seconds = mean_motion - window - inference;
    Ok(GraceTime { seconds, exceeded: seconds <= 0.0 })
}

// ── Latency measurement ─────────────────────────────────────────────────────

/// End-to-end prediction latency over n replayed recordings. All times in
/// seconds; `mean == mean_assembly + mean_inference` by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub max: f64,
    pub mean_assembly: f64,
    pub mean_inference: f64,
    pub grace: GraceTime,
}

impl LatencyReport {
    pub fn csv(&self) -> String {
        format!(
            "n,mean_s,sd_s,max_s,mean_assembly_s,mean_inference_s,grace_s,budget_exceeded\n\
             {},{},{},{},{},{},{},{}\n",
            self.n,
            self.mean,
            self.sd,
            self.max,
            self.mean_assembly,
            self.mean_inference,
            self.grace.seconds,
            self.grace.exceeded
        )
    }

    /// Human-readable report with the published full-size measurements as a
    /// labeled reference column.
    pub fn text(&self) -> String {
        format!(
            "prediction latency over {} runs (this machine, this scale)\n\
             \x20 mean      {:>9.4} s   (reference full-size: {:.4} s)\n\
             \x20 sd        {:>9.4} s   (reference full-size: {:.4} s)\n\
             \x20 max       {:>9.4} s   (reference full-size: {:.4} s)\n\
             \x20 assembly  {:>9.4} s mean\n\
             \x20 inference {:>9.4} s mean\n\
             grace time: {:.4} s{}  (reference: {:.2} s)\n",
            self.n,
            self.mean,
            reference::LATENCY_MEAN_SECONDS,
            self.sd,
            reference::LATENCY_SD_SECONDS,
            self.max,
            reference::LATENCY_MAX_SECONDS,
            self.mean_assembly,
            self.mean_inference,
            self.grace.seconds,
            if self.grace.exceeded { "  BUDGET EXCEEDED" } else { "" },
            reference::GRACE_SECONDS,
        )
    }
}

/// Replay the first `n` recordings through the model and time each
/// prediction. Per run the timer starts the instant the last window frame
/// is buffered and stops when logits are produced; repeated runs reuse the
/// in-memory recording, so disk I/O never lands in the measurement. The
/// grace budget is computed from the measured mean against the reference
/// mean motion duration and observation window.
pub fn measure_latency(
    model: &FusionModel,
    recordings: &[MotionRecording],
    norm: &Normalization,
    n: usize,
    clock: Clock,
) -> Result<LatencyReport> {
    if n == 0 {
        return Err(Error::validation("latency measurement needs n >= 1"));
    }
    if recordings.len() < n {
        return Err(Error::validation(format!(
            "latency measurement wants {n} recordings, only {} available",
            recordings.len()
        )));
    }
    let cfg = &model.config;
    if cfg.face_in != FACE_ROW_DIM || cfg.motion_in != MOTION_ROW_DIM {
        return Err(Error::validation(format!(
            "model wants {}/{} face/motion features, sensor rows carry {}/{}",
            cfg.face_in, cfg.motion_in, FACE_ROW_DIM, MOTION_ROW_DIM
        )));
    }
    let shape = WindowShape {
        face_frames: cfg.face_frames,
        depth_frames: cfg.depth_frames,
        motion_frames: cfg.motion_frames,
        depth_h: cfg.depth_h,
        depth_w: cfg.depth_w,
    };
    let depth_px = cfg.depth_h * cfg.depth_w;

    let mut latencies = Vec::with_capacity(n);
    let mut assembly = Vec::with_capacity(n);
    let mut inference = Vec::with_capacity(n);
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    for rec in &recordings[..n] {
        if let Some(frame) = rec.depth.first() {
            if frame.pixels.len() != depth_px {
                return Err(Error::validation(format!(
                    "model wants {}x{} depth images, recording {} has {} pixels per frame",
                    cfg.depth_h,
                    cfg.depth_w,
                    rec.id,
                    frame.pixels.len()
                )));
            }
        }
        let mut assembler = WindowAssembler::new(shape, rec.start);
        let mut filled_at: Option<Instant> = None;
        replay(rec, clock, |event| {
            if assembler.offer(event) {
                filled_at = Some(Instant::now());
                return false;
            }
            true
        })?;
        let t0 = filled_at.ok_or_else(|| assembler.missing(&rec.id))?;

        let window = assembler.assemble(rec.label, norm)?;
        let t1 = Instant::now();

        let mut tape = Tape::new(GradMode::NoGrad);
        let binds = model.store.bind(&mut tape);
        model.forward(&mut tape, &binds, &window, false, &mut rng)?;
        let t2 = Instant::now();

        assembly.push((t1 - t0).as_secs_f64());
        inference.push((t2 - t1).as_secs_f64());
        latencies.push((t2 - t0).as_secs_f64());
    }

    let mean = latencies.iter().sum::<f64>() / n as f64;
    let sd = if n < 2 {
        0.0
    } else {
        let ss: f64 = latencies.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n as f64 - 1.0)).sqrt()
    };
    let max = latencies.iter().cloned().fold(0.0, f64::max);
    Ok(LatencyReport {
        n,
        mean,
        sd,
        max,
        mean_assembly: assembly.iter().sum::<f64>() / n as f64,
        mean_inference: inference.iter().sum::<f64>() / n as f64,
        grace: grace_time(reference::MEAN_MOTION_SECONDS, reference::WINDOW_SECONDS, mean)?,
    })
}

// ── Tests ───────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::timed_recording;
    use crate::data::extract_window;
    use crate::layers::PoolMode;
    use crate::model::{FusionModel, ModelConfig, ModelKind};

    fn event_log(rec: &MotionRecording) -> Vec<(u8, f32)> {
        let mut log = Vec::new();
        replay(rec, Clock::Virtual, |ev| {
            let kind = match ev {
                FrameEvent::Face(_) => 0u8,
                FrameEvent::Depth(_) => 1,
                FrameEvent::Motion(_) => 2,
            };
            log.push((kind, ev.timestamp()));
            true
        })
        .unwrap();
        log
    }

    #[test]
    fn virtual_replay_delivers_everything_in_timestamp_order() {
        let rec = timed_recording(0.3, 1.05);
        let log = event_log(&rec);
        assert_eq!(log.len(), rec.face.len() + rec.depth.len() + rec.motion.len());
        for pair in log.windows(2) {
            assert!(pair[0].1 <= pair[1].1, "global order broken: {pair:?}");
        }
        // Per-stream order: the subsequence of each kind equals the stream.
        let times = |k: u8| log.iter().filter(move |(kind, _)| *kind == k).map(|&(_, t)| t);
        assert!(times(0).eq(rec.face.iter().map(|f| f.timestamp)));
        assert!(times(1).eq(rec.depth.iter().map(|f| f.timestamp)));
        assert!(times(2).eq(rec.motion.iter().map(|f| f.timestamp)));
        // Deterministic: a second replay produces the identical log.
        assert_eq!(log, event_log(&rec));
    }

    #[test]
    fn real_clock_paces_out_the_recording_span() {
        let rec = timed_recording(0.0, 0.5); // frames span exactly 0.5 s
        let t0 = Instant::now();
        let mut count = 0;
        replay(&rec, Clock::Real, |_| {
            count += 1;
            true
        })
        .unwrap();
        let wall = t0.elapsed().as_secs_f64();
        assert!(count > 50);
        assert!((0.45..0.60).contains(&wall), "wall time {wall} not near 0.5 s");
    }

    #[test]
    fn unsorted_streams_are_rejected() {
        let mut rec = timed_recording(0.3, 1.05);
        rec.motion.swap(5, 6);
        let err = replay(&rec, Clock::Virtual, |_| true).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "got {err:?}");
        assert!(err.to_string().contains("motion"));
    }

    #[test]
    fn sink_can_stop_the_stream_early() {
        let rec = timed_recording(0.3, 1.05);
        let mut seen = 0;
        replay(&rec, Clock::Virtual, |_| {
            seen += 1;
            seen < 10
        })
        .unwrap();
        assert_eq!(seen, 10);
    }

    #[test]
    fn streamed_window_is_bit_identical_to_batch_extraction() {
        let rec = timed_recording(0.3, 1.05);
        let shape = WindowShape::standard(2, 3);
        let mut norm = Normalization::identity();
        norm.motion_mean[0] = 0.1;
        norm.motion_sd[3] = 2.0;

        let mut asm = WindowAssembler::new(shape, rec.start);
        replay(&rec, Clock::Virtual, |ev| !asm.offer(ev)).unwrap();
        assert!(asm.complete());
        let streamed = asm.assemble(rec.label, &norm).unwrap();
        let batch = extract_window(&rec, &shape, &norm).unwrap();

        let bits = |t: &Tensor| t.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&streamed.face), bits(&batch.face));
        assert_eq!(bits(&streamed.depth), bits(&batch.depth));
        assert_eq!(bits(&streamed.motion), bits(&batch.motion));
        assert_eq!(streamed.elapsed.to_bits(), batch.elapsed.to_bits());
        assert_eq!(streamed.label, batch.label);
    }

    #[test]
    fn incomplete_window_reports_all_have_need_counts() {
        let rec = timed_recording(0.3, 0.5); // ~0.2 s past the annotation
        let shape = WindowShape::standard(2, 3);
        let mut asm = WindowAssembler::new(shape, rec.start);
        replay(&rec, Clock::Virtual, |ev| !asm.offer(ev)).unwrap();
        assert!(!asm.complete());
        match asm.missing(&rec.id) {
            Error::TruncatedWindow { id, face_have, face_need, motion_have, motion_need, .. } => {
                assert_eq!(id, rec.id);
                assert!(face_have < face_need);
                assert!(motion_have < motion_need);
            }
            other => panic!("want truncated-window error, got {other:?}"),
        }
    }

    #[test]
    fn grace_time_matches_the_reference_arithmetic() {
        let g = grace_time(1.47, 0.5, 0.0086).unwrap();
        assert!((g.seconds - 0.9614).abs() < 1e-12);
        assert!(!g.exceeded);
        assert!((g.seconds - reference::GRACE_SECONDS).abs() < 0.005);

        let zero = grace_time(1.0, 1.0, 0.0).unwrap();
        assert_eq!(zero.seconds, 0.0);
        assert!(zero.exceeded);

        let worst = grace_time(1.33, 0.5, 0.022).unwrap();
        assert!((worst.seconds - 0.808).abs() < 1e-12);

        assert!(grace_time(-0.1, 0.5, 0.0).is_err());
        assert!(grace_time(1.0, f64::NAN, 0.0).is_err());
    }

    fn streaming_model() -> FusionModel {
        let cfg = ModelConfig {
            face_in: FACE_ROW_DIM,
            face_out: 8,
            motion_in: MOTION_ROW_DIM,
            motion_out: 8,
            depth_h: 2,
            depth_w: 3,
            conv1_kernel: (2, 2),
            conv1_filters: 2,
            pool1: (1, 1),
            conv2_kernel: (1, 2),
            conv2_filters: 3,
            pool2: (1, 1),
            conv_stride: 1,
            cnn_dropout: 0.0,
            depth_cnn_latent: 6,
            depth_lstm_out: 4,
            fused_dim: 8 + 8 + 4 + 1,
            face_frames: 7,
            depth_frames: 7,
            motion_frames: 50,
            classifier_hidden: vec![8],
            classifier_dropout: vec![0.0],
            num_classes: 9,
            pool_mode: PoolMode::FinalQuery,
            scale_divisor: 1,
        };
        FusionModel::new(cfg, ModelKind::Fusion, 5).unwrap()
    }

    #[test]
    fn latency_report_statistics_are_consistent() {
        let model = streaming_model();
        let recs: Vec<MotionRecording> = (0..5).map(|_| timed_recording(0.3, 1.05)).collect();
        let norm = Normalization::identity();
        let report = measure_latency(&model, &recs, &norm, 5, Clock::Virtual).unwrap();
        assert_eq!(report.n, 5);
        assert!(report.max >= report.mean && report.mean > 0.0);
        assert!(report.sd >= 0.0);
        assert!((report.mean - (report.mean_assembly + report.mean_inference)).abs() < 1e-12);
        let expect =
            reference::MEAN_MOTION_SECONDS - reference::WINDOW_SECONDS - report.mean;
        assert!((report.grace.seconds - expect).abs() < 1e-12);
        assert!(report.csv().starts_with("n,mean_s"));
        assert!(report.text().contains("grace time"));

        assert!(measure_latency(&model, &recs, &norm, 6, Clock::Virtual).is_err());
        assert!(measure_latency(&model, &recs, &norm, 0, Clock::Virtual).is_err());
    }

    #[test]
    fn depth_geometry_mismatch_is_a_validation_error() {
        let model = streaming_model(); // wants 2x3 depth
        let mut rec = timed_recording(0.3, 1.05);
        for f in &mut rec.depth {
            f.pixels = vec![1.0; 8]; // 2x4
        }
        let err = measure_latency(&model, &[rec], &Normalization::identity(), 1, Clock::Virtual)
            .unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "got {err:?}");
    }
}

//! Dataset container: a directory holding `manifest.json` plus one binary
//! blob per recording.
//!
//! Blob layout, all little-endian:
//! `"MRPDREC"` magic, `u16` version, `u8` region label, `f64` start, `f64`
//! end, then three `u32`-count-prefixed f32 frame arrays in order face,
//! motion, depth. Frame float layouts: face `[t, 1404 landmarks, elapsed,
//! present]`, motion `[t, 10 channels, elapsed]`, depth `[t, pixels…,
//! elapsed]`. The depth stride comes from the manifest, so blobs are read
//! through their dataset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    splits::{FoldSpec, SplitSpec},
    DepthFrame, FaceFrame, MotionFrame, MotionRecording, NormAccumulator, Normalization,
    FACE_LANDMARKS, MOTION_CHANNELS,
};
use crate::error::{Error, Result};
use crate::region::Region;

pub const RECORDING_MAGIC: &[u8; 7] = b"MRPDREC";
pub const RECORDING_VERSION: u16 = 1;
pub const MANIFEST_VERSION: u32 = 1;

const FACE_STRIDE: usize = 3 * FACE_LANDMARKS + 3; // t, landmarks, elapsed, present
const MOTION_STRIDE: usize = MOTION_CHANNELS + 2; // t, channels, elapsed

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub id: String,
    pub file: String,
    pub label: String,
    pub participant: u32,
    pub start: f64,
    pub end: f64,
    pub face_frames: usize,
    pub depth_frames: usize,
    pub motion_frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub depth_h: usize,
    pub depth_w: usize,
    pub normalization: Normalization,
    pub recordings: Vec<RecordingEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folds: Option<FoldSpec>,
    /// Opaque provenance blob (generator parameters, seeds).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

/// A dataset on disk: parsed manifest plus the directory the blobs live in.
/// Recordings load on demand (a full dataset rarely fits comfortably in
/// memory at full depth resolution).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.recordings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.recordings.is_empty()
    }

    pub fn depth_px(&self) -> usize {
        self.manifest.depth_h * self.manifest.depth_w
    }

    pub fn entry(&self, id: &str) -> Result<&RecordingEntry> {
        self.manifest
            .recordings
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::validation(format!("no recording {id} in manifest")))
    }

    pub fn load_index(&self, index: usize) -> Result<MotionRecording> {
        let entry = self.manifest.recordings.get(index).ok_or_else(|| {
            Error::validation(format!(
                "recording index {index} out of range ({} recordings)",
                self.len()
            ))
        })?;
        self.load_entry(entry)
    }

    pub fn load(&self, id: &str) -> Result<MotionRecording> {
        self.load_entry(self.entry(id)?)
    }

    fn load_entry(&self, entry: &RecordingEntry) -> Result<MotionRecording> {
        let path = self.dir.join(&entry.file);
        let mut rec =
            read_recording(&path, self.depth_px()).map_err(|e| match e {
                Error::Format { offset, detail } => Error::Format {
                    offset,
                    detail: format!("recording {}: {detail}", entry.id),
                },
                other => other,
            })?;
        rec.id = entry.id.clone();
        rec.participant = entry.participant;
        if rec.label.label() != entry.label {
            return Err(Error::validation(format!(
                "recording {}: blob label {} disagrees with manifest label {}",
                entry.id,
                rec.label.label(),
                entry.label
            )));
        }
        Ok(rec)
    }

    pub fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

/// Incremental dataset writer: recordings stream to disk one at a time while
/// normalization sums accumulate, so a large dataset never has to fit in
/// memory whole.
pub struct DatasetWriter {
    dir: PathBuf,
    depth_h: usize,
    depth_w: usize,
    entries: Vec<RecordingEntry>,
    norm: NormAccumulator,
}

impl DatasetWriter {
    pub fn create(dir: &Path, depth_h: usize, depth_w: usize) -> Result<DatasetWriter> {
        std::fs::create_dir_all(dir)?;
        Ok(DatasetWriter {
            dir: dir.to_path_buf(),
            depth_h,
            depth_w,
            entries: Vec::new(),
            norm: NormAccumulator::new(),
        })
    }

    /// Validate, write `{id}.rec`, and fold the recording into the running
    /// normalization sums.
    pub fn add(&mut self, rec: &MotionRecording) -> Result<()> {
        rec.validate(self.depth_h * self.depth_w)?;
        let file = format!("{}.rec", rec.id);
        write_recording(&self.dir.join(&file), rec)?;
        self.norm.add(rec);
        self.entries.push(RecordingEntry {
            id: rec.id.clone(),
            file,
            label: rec.label.label().to_string(),
            participant: rec.participant,
            start: rec.start,
            end: rec.end,
            face_frames: rec.face.len(),
            depth_frames: rec.depth.len(),
            motion_frames: rec.motion.len(),
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Write the manifest and hand back the finished dataset.
    pub fn finish(self, generator: Option<serde_json::Value>) -> Result<Dataset> {
        if self.entries.is_empty() {
            return Err(Error::validation("refusing to write an empty dataset"));
        }
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            depth_h: self.depth_h,
            depth_w: self.depth_w,
            normalization: self.norm.finish(),
            recordings: self.entries,
            split: None,
            folds: None,
            generator,
        };
        let ds = Dataset { dir: self.dir, manifest };
        ds.save_manifest()?;
        Ok(ds)
    }
}

/// Write a dataset directory from whole recordings. Normalization constants
/// are computed over every motion frame and stored in the manifest.
pub fn write_dataset(
    dir: &Path,
    recs: &[MotionRecording],
    depth_h: usize,
    depth_w: usize,
    generator: Option<serde_json::Value>,
) -> Result<Dataset> {
    if recs.is_empty() {
        return Err(Error::validation("refusing to write an empty dataset"));
    }
    let mut writer = DatasetWriter::create(dir, depth_h, depth_w)?;
    for rec in recs {
        writer.add(rec)?;
    }
    writer.finish(generator)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::validation(format!(
            "manifest version {} unsupported (want {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    Ok(Dataset { dir: dir.to_path_buf(), manifest })
}

// ── Blob codec ────────────────────────────────────────────────────────────

fn put_f32(buf: &mut Vec<u8>, v: f32) {
    buf.extend_from_slice(&v.to_bits().to_le_bytes());
}

pub fn write_recording(path: &Path, rec: &MotionRecording) -> Result<()> {
    let mut buf = Vec::with_capacity(
        64 + rec.face.len() * FACE_STRIDE * 4
            + rec.motion.len() * MOTION_STRIDE * 4
            + rec.depth.iter().map(|d| (d.pixels.len() + 2) * 4).sum::<usize>(),
    );
    buf.extend_from_slice(RECORDING_MAGIC);
    buf.extend_from_slice(&RECORDING_VERSION.to_le_bytes());
    buf.push(rec.label.index() as u8);
    buf.extend_from_slice(&rec.start.to_le_bytes());
    buf.extend_from_slice(&rec.end.to_le_bytes());

    buf.extend_from_slice(&(rec.face.len() as u32).to_le_bytes());
    for f in &rec.face {
        put_f32(&mut buf, f.timestamp);
        for &v in &f.landmarks {
            put_f32(&mut buf, v);
        }
        put_f32(&mut buf, f.elapsed);
        put_f32(&mut buf, if f.present { 1.0 } else { 0.0 });
    }

    buf.extend_from_slice(&(rec.motion.len() as u32).to_le_bytes());
    for f in &rec.motion {
        put_f32(&mut buf, f.timestamp);
        for &v in &f.channels {
            put_f32(&mut buf, v);
        }
        put_f32(&mut buf, f.elapsed);
    }

    buf.extend_from_slice(&(rec.depth.len() as u32).to_le_bytes());
    for f in &rec.depth {
        put_f32(&mut buf, f.timestamp);
        for &v in &f.pixels {
            put_f32(&mut buf, v);
        }
        put_f32(&mut buf, f.elapsed);
    }

    std::fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}: need {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
            .collect())
    }
}

/// Read one recording blob. `id` and `participant` come from the manifest,
/// so they are left defaulted here.
pub fn read_recording(path: &Path, depth_px: usize) -> Result<MotionRecording> {
    let bytes = std::fs::read(path)?;
    let mut c = Cursor { buf: &bytes, pos: 0 };

    let magic = c.take(RECORDING_MAGIC.len(), "magic")?;
    if magic != RECORDING_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:02x?}")));
    }
    let version_at = c.pos as u64;
    let version = c.u16("version")?;
    if version != RECORDING_VERSION {
        return Err(Error::format(
            version_at,
            format!("unsupported recording version {version} (want {RECORDING_VERSION})"),
        ));
    }
    let label_at = c.pos as u64;
    let label_idx = c.take(1, "label")?[0] as usize;
    let label = Region::from_index(label_idx)
        .map_err(|_| Error::format(label_at, format!("region label {label_idx} out of range")))?;
    let start = c.f64("start")?;
    let end = c.f64("end")?;

    let n_face = c.u32("face frame count")? as usize;
    let mut face = Vec::with_capacity(n_face);
    for i in 0..n_face {
        let row = c.f32s(FACE_STRIDE, &format!("face frame {i}"))?;
        face.push(FaceFrame {
            timestamp: row[0],
            landmarks: row[1..1 + 3 * FACE_LANDMARKS].to_vec(),
            elapsed: row[FACE_STRIDE - 2],
            present: row[FACE_STRIDE - 1] != 0.0,
        });
    }

    let n_motion = c.u32("motion frame count")? as usize;
    let mut motion = Vec::with_capacity(n_motion);
    for i in 0..n_motion {
        let row = c.f32s(MOTION_STRIDE, &format!("motion frame {i}"))?;
        let mut channels = [0.0f32; MOTION_CHANNELS];
        channels.copy_from_slice(&row[1..1 + MOTION_CHANNELS]);
        motion.push(MotionFrame { timestamp: row[0], channels, elapsed: row[MOTION_STRIDE - 1] });
    }

    let n_depth = c.u32("depth frame count")? as usize;
    let mut depth = Vec::with_capacity(n_depth);
    for i in 0..n_depth {
        let row = c.f32s(depth_px + 2, &format!("depth frame {i}"))?;
        depth.push(DepthFrame {
            timestamp: row[0],
            pixels: row[1..1 + depth_px].to_vec(),
            elapsed: row[depth_px + 1],
        });
    }

    if c.pos != bytes.len() {
        return Err(Error::format(
            c.pos as u64,
            format!("{} trailing bytes after the depth stream", bytes.len() - c.pos),
        ));
    }

    Ok(MotionRecording {
        id: String::new(),
        participant: 0,
        label,
        start,
        end,
        face,
        depth,
        motion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::tiny_recording;

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![tiny_recording("a", Region::TopLeft), tiny_recording("b", Region::Center)];
        let ds = write_dataset(dir.path(), &recs, 2, 3, None).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        for (i, want) in recs.iter().enumerate() {
            let got = back.load_index(i).unwrap();
            assert_eq!(&got, want);
            // float equality above is not vacuous: spot-check raw bits too
            assert_eq!(
                got.depth[0].pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                want.depth[0].pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            );
        }
        // rewriting the same data produces identical blob bytes
        let blob1 = std::fs::read(dir.path().join("a.rec")).unwrap();
        write_recording(&dir.path().join("a2.rec"), &recs[0]).unwrap();
        let blob2 = std::fs::read(dir.path().join("a2.rec")).unwrap();
        assert_eq!(blob1, blob2);
        drop(ds);
    }

    #[test]
    fn corrupted_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let rec = tiny_recording("a", Region::TopLeft);
        let ds = write_dataset(dir.path(), &[rec], 2, 3, None).unwrap();
        let path = dir.path().join("a.rec");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match ds.load("a") {
            Err(Error::Format { offset: 0, detail }) => {
                assert!(detail.contains("recording a"), "{detail}");
            }
            other => panic!("want format error at 0, got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_names_the_recording() {
        let dir = tempfile::tempdir().unwrap();
        let rec = tiny_recording("trunc", Region::BottomRight);
        let ds = write_dataset(dir.path(), &[rec], 2, 3, None).unwrap();
        let path = dir.path().join("trunc.rec");
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match ds.load("trunc") {
            Err(Error::Format { offset, detail }) => {
                assert!(offset > 0);
                assert!(detail.contains("recording trunc"), "{detail}");
                assert!(detail.contains("truncated"), "{detail}");
            }
            other => panic!("want format error, got {other:?}"),
        }
    }

    #[test]
    fn version_and_label_faults_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rec = tiny_recording("v", Region::TopLeft);
        let ds = write_dataset(dir.path(), &[rec], 2, 3, None).unwrap();
        let path = dir.path().join("v.rec");

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[7] = 0xff; // version word
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(ds.load("v"), Err(Error::Format { offset: 7, .. })));

        let mut bytes2 = std::fs::read(&path).unwrap();
        bytes2[7] = RECORDING_VERSION as u8;
        bytes2[9] = 200; // label byte out of range
        std::fs::write(&path, &bytes2).unwrap();
        assert!(matches!(ds.load("v"), Err(Error::Format { offset: 9, .. })));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rec = tiny_recording("t", Region::TopLeft);
        write_dataset(dir.path(), &[rec], 2, 3, None).unwrap();
        let path = dir.path().join("t.rec");
        let mut bytes = std::fs::read(&path).unwrap();
        let clean_len = bytes.len() as u64;
        bytes.extend_from_slice(&[0, 1, 2]);
        std::fs::write(&path, &bytes).unwrap();
        match read_recording(&path, 6) {
            Err(Error::Format { offset, detail }) => {
                assert_eq!(offset, clean_len);
                assert!(detail.contains("trailing"));
            }
            other => panic!("want trailing-bytes error, got {other:?}"),
        }
    }
}

//! The late-fusion network: BiLSTM+attention branches for face and motion
//! rows, a per-frame CNN feeding an LSTM for depth, pooled branch vectors
//! concatenated with the window's elapsed time and classified into the nine
//! shelf regions. Unimodal variants keep one branch plus its own classifier.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SampleWindow, WindowShape};
use crate::error::{Error, Result};
use crate::layers::{
    BiLstm, Conv2d, Dropout, Linear, LstmCell, MaxPool2d, PoolMode, SelfAttention,
};
use crate::tensor::{
    check_gradients, choose_coords, read_checkpoint, write_checkpoint, Bindings, GradCheckReport,
    GradMode, ParamStore, Tape, Tensor, TensorId,
};

// ── Configuration ─────────────────────────────────────────────────────────

/// Every width, kernel, frame count and dropout rate of the network. The
/// defaults in [`full_size`] are the reference architecture; [`scaled`]
/// shrinks it while keeping the topology.
///
/// [`full_size`]: ModelConfig::full_size
/// [`scaled`]: ModelConfig::scaled
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub face_in: usize,
    pub face_out: usize,
    pub motion_in: usize,
    pub motion_out: usize,
    pub depth_h: usize,
    pub depth_w: usize,
    pub conv1_filters: usize,
    pub conv1_kernel: (usize, usize),
    pub pool1: (usize, usize),
    pub conv2_filters: usize,
    pub conv2_kernel: (usize, usize),
    pub pool2: (usize, usize),
    pub conv_stride: usize,
    pub cnn_dropout: f32,
    pub depth_cnn_latent: usize,
    pub depth_lstm_out: usize,
    /// Width of the concatenated branch vectors plus the elapsed-time slot;
    /// must equal `face_out + motion_out + depth_lstm_out + 1`.
    pub fused_dim: usize,
    pub face_frames: usize,
    pub depth_frames: usize,
    pub motion_frames: usize,
    pub classifier_hidden: Vec<usize>,
    /// One rate per hidden stage, or one extra for a standalone dropout
    /// between the last hidden stage and the output layer.
    pub classifier_dropout: Vec<f32>,
    pub num_classes: usize,
    pub pool_mode: PoolMode,
    pub scale_divisor: usize,
}

/// Spatial sizes along the depth CNN, conv1 through the flattened features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepthChain {
    pub conv1_out: (usize, usize),
    pub pool1_out: (usize, usize),
    pub conv2_out: (usize, usize),
    pub pool2_out: (usize, usize),
    pub flat: usize,
}

impl ModelConfig {
    /// Reference-width architecture on 256x188 depth images.
    pub fn full_size() -> ModelConfig {
        ModelConfig {
            face_in: 1405,
            face_out: 2048,
            motion_in: 11,
            motion_out: 512,
            depth_h: 256,
            depth_w: 188,
            conv1_filters: 8,
            conv1_kernel: (16, 16),
            pool1: (2, 3),
            conv2_filters: 16,
            conv2_kernel: (8, 8),
            pool2: (8, 8),
            conv_stride: 1,
            cnn_dropout: 0.2,
            depth_cnn_latent: 2047,
            depth_lstm_out: 1536,
            fused_dim: 4097,
            face_frames: 7,
            depth_frames: 7,
            motion_frames: 50,
            classifier_hidden: vec![1024, 256],
            classifier_dropout: vec![0.6, 0.4, 0.2],
            num_classes: 9,
            pool_mode: PoolMode::FinalQuery,
            scale_divisor: 1,
        }
    }

    /// Width-reduced variant with identical topology. Widths shrink by
    /// `divisor`; spatial quantities (image, conv kernels, second pool) by
    /// sqrt(divisor), so the convolution chain stays viable. The first pool
    /// is already near-minimal and is kept as-is, which lands the final
    /// feature map on the same spatial size as the full-scale chain.
    ///
    /// `divisor` must be a perfect square that keeps every width even and
    /// positive; 1, 4, 16 and 64 all work at the default widths.
    pub fn scaled(divisor: usize) -> Result<ModelConfig> {
        let mut c = ModelConfig::full_size();
        if divisor == 1 {
            return Ok(c);
        }
        let side = (divisor as f64).sqrt().round() as usize;
        if side * side != divisor {
            return Err(Error::validation(format!(
                "scale divisor {divisor} is not a perfect square"
            )));
        }
        c.scale_divisor = divisor;
        c.face_out /= divisor;
        c.motion_out /= divisor;
        c.depth_cnn_latent /= divisor;
        c.depth_lstm_out /= divisor;
        for h in &mut c.classifier_hidden {
            *h /= divisor;
        }
        c.depth_h /= side;
        c.depth_w /= side;
        c.conv1_kernel = (c.conv1_kernel.0 / side, c.conv1_kernel.1 / side);
        c.conv2_kernel = (c.conv2_kernel.0 / side, c.conv2_kernel.1 / side);
        c.pool2 = ((c.pool2.0 / side).max(1), (c.pool2.1 / side).max(1));
        c.fused_dim = c.face_out + c.motion_out + c.depth_lstm_out + 1;
        c.validate()?;
        Ok(c)
    }

    /// The CI-sized default: widths / 16, depth images 64x47.
    pub fn desk_scale() -> ModelConfig {
        ModelConfig::scaled(16).expect("divisor 16 divides the default widths")
    }

    /// Spatial sizes along the depth CNN; errors if any stage collapses.
    pub fn depth_chain(&self) -> Result<DepthChain> {
        let conv_out = |(h, w): (usize, usize), k: (usize, usize), which: &'static str| {
            if k.0 == 0 || k.1 == 0 || self.conv_stride == 0 {
                return Err(Error::validation(format!("{which}: zero kernel or stride")));
            }
            if k.0 > h || k.1 > w {
                return Err(Error::dim(
                    which,
                    format!("kernel {}x{} larger than input {h}x{w}", k.0, k.1),
                ));
            }
            Ok(((h - k.0) / self.conv_stride + 1, (w - k.1) / self.conv_stride + 1))
        };
        let pool_out = |(h, w): (usize, usize), p: (usize, usize), which: &'static str| {
            if p.0 == 0 || p.1 == 0 {
                return Err(Error::validation(format!("{which}: zero pool size")));
            }
            let out = (h / p.0, w / p.1);
            if out.0 == 0 || out.1 == 0 {
                return Err(Error::dim(
                    which,
                    format!("pool {}x{} collapses input {h}x{w}", p.0, p.1),
                ));
            }
            Ok(out)
        };
        let conv1_out = conv_out((self.depth_h, self.depth_w), self.conv1_kernel, "depth conv1")?;
        let pool1_out = pool_out(conv1_out, self.pool1, "depth pool1")?;
        let conv2_out = conv_out(pool1_out, self.conv2_kernel, "depth conv2")?;
        let pool2_out = pool_out(conv2_out, self.pool2, "depth pool2")?;
        let flat = self.conv2_filters * pool2_out.0 * pool2_out.1;
        Ok(DepthChain { conv1_out, pool1_out, conv2_out, pool2_out, flat })
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 10] = [
            ("face_in", self.face_in),
            ("motion_in", self.motion_in),
            ("depth_cnn_latent", self.depth_cnn_latent),
            ("depth_lstm_out", self.depth_lstm_out),
            ("face_frames", self.face_frames),
            ("depth_frames", self.depth_frames),
            ("motion_frames", self.motion_frames),
            ("conv1_filters", self.conv1_filters),
            ("conv2_filters", self.conv2_filters),
            ("scale_divisor", self.scale_divisor),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("face_out", self.face_out), ("motion_out", self.motion_out)] {
            if v == 0 || v % 2 != 0 {
                return Err(Error::validation(format!(
                    "{name} = {v} must be positive and even for a bidirectional LSTM"
                )));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::validation("need at least two classes"));
        }
        let want = self.face_out + self.motion_out + self.depth_lstm_out + 1;
        if self.fused_dim != want {
            return Err(Error::validation(format!(
                "fused_dim {} != face_out + motion_out + depth_lstm_out + 1 = {want}",
                self.fused_dim
            )));
        }
        let (nh, nd) = (self.classifier_hidden.len(), self.classifier_dropout.len());
        if nd != nh && nd != nh + 1 {
            return Err(Error::validation(format!(
                "{nd} classifier dropout rates for {nh} hidden stages (want {nh} or {})",
                nh + 1
            )));
        }
        for &r in self.classifier_dropout.iter().chain(std::iter::once(&self.cnn_dropout)) {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::validation(format!("dropout rate {r} outside [0, 1)")));
            }
        }
        if self.classifier_hidden.iter().any(|&h| h == 0) {
            return Err(Error::validation("classifier hidden width must be positive"));
        }
        self.depth_chain()?;
        Ok(())
    }

    /// Frame counts and depth geometry the data side must deliver.
    pub fn window_shape(&self) -> WindowShape {
        WindowShape {
            face_frames: self.face_frames,
            depth_frames: self.depth_frames,
            motion_frames: self.motion_frames,
            depth_h: self.depth_h,
            depth_w: self.depth_w,
        }
    }
}

// ── Model kind ────────────────────────────────────────────────────────────

/// Which branches a model carries: the full fusion network or one branch
/// with its own classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Fusion,
    Face,
    Motion,
    Depth,
}

pub const MODEL_KINDS: [ModelKind; 4] =
    [ModelKind::Fusion, ModelKind::Face, ModelKind::Motion, ModelKind::Depth];

impl ModelKind {
    pub fn from_tag(tag: &str) -> Result<ModelKind> {
        match tag {
            "fusion" => Ok(ModelKind::Fusion),
            "face" => Ok(ModelKind::Face),
            "motion" => Ok(ModelKind::Motion),
            "depth" => Ok(ModelKind::Depth),
            other => Err(Error::validation(format!(
                "unknown model kind {other:?} (want fusion, face, motion or depth)"
            ))),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::Fusion => "fusion",
            ModelKind::Face => "face",
            ModelKind::Motion => "motion",
            ModelKind::Depth => "depth",
        }
    }

    fn has_face(self) -> bool {
        matches!(self, ModelKind::Fusion | ModelKind::Face)
    }

    fn has_motion(self) -> bool {
        matches!(self, ModelKind::Fusion | ModelKind::Motion)
    }

    fn has_depth(self) -> bool {
        matches!(self, ModelKind::Fusion | ModelKind::Depth)
    }

    /// Classifier input width: all carried branch outputs plus the
    /// elapsed-time slot.
    fn classifier_in(self, cfg: &ModelConfig) -> usize {
        match self {
            ModelKind::Fusion => cfg.fused_dim,
            ModelKind::Face => cfg.face_out + 1,
            ModelKind::Motion => cfg.motion_out + 1,
            ModelKind::Depth => cfg.depth_lstm_out + 1,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

// ── Branches ──────────────────────────────────────────────────────────────

struct SeqBranch {
    lstm: BiLstm,
    att: SelfAttention,
}

impl SeqBranch {
    fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<SeqBranch> {
        let lstm = BiLstm::new(store, &format!("{prefix}.lstm"), in_dim, out_dim, rng)?;
        let att = SelfAttention::new(store, &format!("{prefix}.att"), out_dim, rng)?;
        Ok(SeqBranch { lstm, att })
    }

    fn forward(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        rows: &Tensor,
        mode: PoolMode,
    ) -> Result<TensorId> {
        let x = tape.leaf(rows.clone());
        let h = self.lstm.forward(tape, binds, x)?;
        self.att.pool(tape, binds, h, mode)
    }
}

struct DepthBranch {
    conv1: Conv2d,
    pool1: MaxPool2d,
    conv2: Conv2d,
    pool2: MaxPool2d,
    drop: Dropout,
    fc: Linear,
    lstm: LstmCell,
    h: usize,
    w: usize,
    flat: usize,
}

impl DepthBranch {
    fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<DepthBranch> {
        let chain = cfg.depth_chain()?;
        let conv1 = Conv2d::new(
            store,
            "depth.conv1",
            1,
            cfg.conv1_filters,
            cfg.conv1_kernel,
            cfg.conv_stride,
            rng,
        )?;
        let conv2 = Conv2d::new(
            store,
            "depth.conv2",
            cfg.conv1_filters,
            cfg.conv2_filters,
            cfg.conv2_kernel,
            cfg.conv_stride,
            rng,
        )?;
        let fc = Linear::new(store, "depth.fc", chain.flat, cfg.depth_cnn_latent, rng)?;
        let lstm =
            LstmCell::new(store, "depth.lstm", cfg.depth_cnn_latent + 1, cfg.depth_lstm_out, rng)?;
        Ok(DepthBranch {
            conv1,
            pool1: MaxPool2d::new(cfg.pool1),
            conv2,
            pool2: MaxPool2d::new(cfg.pool2),
            drop: Dropout::new(cfg.cnn_dropout),
            fc,
            lstm,
            h: cfg.depth_h,
            w: cfg.depth_w,
            flat: chain.flat,
        })
    }

    /// Per-frame CNN to a latent vector, elapsed time appended, the frame
    /// sequence run through the LSTM; the final hidden state is the branch
    /// output.
    fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        rows: &Tensor,
        training: bool,
        rng: &mut R,
    ) -> Result<TensorId> {
        let frames = rows.shape[0];
        let px = self.h * self.w;
        let all = tape.leaf(rows.clone());
        let mut steps = Vec::with_capacity(frames);
        for f in 0..frames {
            let row = tape.row(all, f)?;
            let img_flat = tape.slice_flat(row, 0, px)?;
            let img = tape.reshape(img_flat, vec![1, self.h, self.w])?;
            let c1 = self.conv1.forward(tape, binds, img)?;
            let a1 = tape.relu(c1);
            let p1 = self.pool1.forward(tape, a1)?;
            let d1 = self.drop.forward(tape, p1, training, rng)?;
            let c2 = self.conv2.forward(tape, binds, d1)?;
            let a2 = tape.relu(c2);
            let p2 = self.pool2.forward(tape, a2)?;
            let d2 = self.drop.forward(tape, p2, training, rng)?;
            let flat = tape.reshape(d2, vec![self.flat])?;
            let latent = self.fc.forward(tape, binds, flat)?;
            let latent = tape.relu(latent);
            let elapsed = tape.slice_flat(row, px, 1)?;
            steps.push(tape.concat_flat(&[latent, elapsed])?);
        }
        let seq = tape.stack_rows(&steps)?;
        let hs = self.lstm.forward_seq(tape, binds, seq)?;
        tape.row(hs, frames - 1)
    }
}

struct Classifier {
    stages: Vec<(Linear, Dropout)>,
    pre_out: Option<Dropout>,
    out: Linear,
    in_dim: usize,
}

impl Classifier {
    fn new<R: Rng>(
        store: &mut ParamStore,
        in_dim: usize,
        hidden: &[usize],
        dropout: &[f32],
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Classifier> {
        let mut stages = Vec::with_capacity(hidden.len());
        let mut d = in_dim;
        for (i, &width) in hidden.iter().enumerate() {
            let lin = Linear::new(store, &format!("classifier.fc{i}"), d, width, rng)?;
            stages.push((lin, Dropout::new(dropout[i])));
            d = width;
        }
        let pre_out = dropout.get(hidden.len()).map(|&r| Dropout::new(r));
        let out = Linear::new(store, "classifier.out", d, num_classes, rng)?;
        Ok(Classifier { stages, pre_out, out, in_dim })
    }

    fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        fused: TensorId,
        training: bool,
        rng: &mut R,
    ) -> Result<TensorId> {
        if tape.shape(fused) != [self.in_dim] {
            return Err(Error::dim(
                "classifier",
                format!("fused vector is {:?}, classifier wants [{}]", tape.shape(fused), self.in_dim),
            ));
        }
        let mut x = fused;
        for (lin, drop) in &self.stages {
            x = lin.forward(tape, binds, x)?;
            x = tape.relu(x);
            x = drop.forward(tape, x, training, rng)?;
        }
        if let Some(drop) = &self.pre_out {
            x = drop.forward(tape, x, training, rng)?;
        }
        self.out.forward(tape, binds, x)
    }
}

// ── The model ─────────────────────────────────────────────────────────────

/// Parameter totals by branch, from registered tensor shapes, next to the
/// closed-form arithmetic total for the same configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub face: u64,
    pub motion: u64,
    pub depth: u64,
    pub classifier: u64,
    pub total: u64,
    pub analytic_total: u64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    kind: ModelKind,
    seed: u64,
    config: ModelConfig,
}

pub struct FusionModel {
    pub config: ModelConfig,
    pub kind: ModelKind,
    pub seed: u64,
    pub store: ParamStore,
    face: Option<SeqBranch>,
    motion: Option<SeqBranch>,
    depth: Option<DepthBranch>,
    classifier: Classifier,
}

impl FusionModel {
    /// Build and initialize. Construction order is fixed (face, motion,
    /// depth, classifier), so a given (config, kind, seed) always produces
    /// the same parameter names, shapes and initial values.
    pub fn new(config: ModelConfig, kind: ModelKind, seed: u64) -> Result<FusionModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let face = kind
            .has_face()
            .then(|| SeqBranch::new(&mut store, "face", config.face_in, config.face_out, &mut rng))
            .transpose()?;
        let motion = kind
            .has_motion()
            .then(|| {
                SeqBranch::new(&mut store, "motion", config.motion_in, config.motion_out, &mut rng)
            })
            .transpose()?;
        let depth =
            kind.has_depth().then(|| DepthBranch::new(&mut store, &config, &mut rng)).transpose()?;
        let classifier = Classifier::new(
            &mut store,
            kind.classifier_in(&config),
            &config.classifier_hidden,
            &config.classifier_dropout,
            config.num_classes,
            &mut rng,
        )?;
        Ok(FusionModel { config, kind, seed, store, face, motion, depth, classifier })
    }

    /// Pooled branch vectors concatenated with the window's elapsed time.
    pub fn fused_vector<R: Rng>(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        window: &SampleWindow,
        training: bool,
        rng: &mut R,
    ) -> Result<TensorId> {
        let cfg = &self.config;
        let mut parts = Vec::with_capacity(4);
        if let Some(branch) = &self.face {
            check_rows("face branch", &window.face, cfg.face_frames, cfg.face_in)?;
            parts.push(branch.forward(tape, binds, &window.face, cfg.pool_mode)?);
        }
        if let Some(branch) = &self.motion {
            check_rows("motion branch", &window.motion, cfg.motion_frames, cfg.motion_in)?;
            parts.push(branch.forward(tape, binds, &window.motion, cfg.pool_mode)?);
        }
        if let Some(branch) = &self.depth {
            check_rows(
                "depth branch",
                &window.depth,
                cfg.depth_frames,
                cfg.depth_h * cfg.depth_w + 1,
            )?;
            parts.push(branch.forward(tape, binds, &window.depth, training, rng)?);
        }
        parts.push(tape.leaf(Tensor::from_vec(vec![window.elapsed])));
        tape.concat_flat(&parts)
    }

    /// Classifier head over an already-fused vector.
    pub fn classify<R: Rng>(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        fused: TensorId,
        training: bool,
        rng: &mut R,
    ) -> Result<TensorId> {
        self.classifier.forward(tape, binds, fused, training, rng)
    }

    /// Window in, logits out: `[num_classes]`.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        window: &SampleWindow,
        training: bool,
        rng: &mut R,
    ) -> Result<TensorId> {
        let fused = self.fused_vector(tape, binds, window, training, rng)?;
        self.classify(tape, binds, fused, training, rng)
    }

    /// Counts from the registered tensors, plus the closed-form arithmetic
    /// total they must equal.
    pub fn count_parameters(&self) -> ParamCounts {
        let by_prefix = |p: &str| -> u64 {
            self.store
                .entries()
                .filter(|e| e.name.starts_with(p))
                .map(|e| e.value.numel() as u64)
                .sum()
        };
        ParamCounts {
            face: by_prefix("face."),
            motion: by_prefix("motion."),
            depth: by_prefix("depth."),
            classifier: by_prefix("classifier."),
            total: self.store.total_params(),
            analytic_total: analytic_param_count(&self.config, self.kind)
                .expect("config validated at construction"),
        }
    }

    /// Write the weights as a checkpoint at `path` and the (kind, seed,
    /// config) sidecar as JSON at `path + ".json"`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(&str, &Tensor)> =
            self.store.entries().map(|e| (e.name.as_str(), &e.value)).collect();
        write_checkpoint(path, entries.into_iter())?;
        let sidecar = Sidecar { kind: self.kind, seed: self.seed, config: self.config.clone() };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)?)?;
        Ok(())
    }

    /// Rebuild from [`save`] output: construct from the sidecar, then
    /// overwrite every tensor from the checkpoint.
    ///
    /// [`save`]: FusionModel::save
    pub fn load(path: &Path) -> Result<FusionModel> {
        let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
        let mut model = FusionModel::new(sidecar.config, sidecar.kind, sidecar.seed)?;
        let tensors = read_checkpoint(path)?;
        if tensors.len() != model.store.len() {
            return Err(Error::validation(format!(
                "checkpoint has {} tensors, model wants {}",
                tensors.len(),
                model.store.len()
            )));
        }
        for (name, value) in tensors {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::validation(format!("checkpoint tensor {name:?} not in model")))?;
            let slot = model.store.value_mut(id);
            if slot.shape != value.shape {
                return Err(Error::validation(format!(
                    "checkpoint tensor {name:?} has shape {:?}, model wants {:?}",
                    value.shape, slot.shape
                )));
            }
            *slot = value;
        }
        Ok(model)
    }
}

fn check_rows(branch: &'static str, t: &Tensor, frames: usize, dim: usize) -> Result<()> {
    if t.shape != [frames, dim] {
        return Err(Error::dim(
            branch,
            format!("window tensor is {:?}, model wants [{frames}, {dim}]", t.shape),
        ));
    }
    Ok(())
}

/// Finite-difference verification of the whole network's gradients at
/// `samples` randomly chosen weight coordinates, using the cross-entropy
/// loss on one window. Dropout is off, so the loss is a pure function of
/// the weights. The model's weights are untouched on return.
pub fn gradient_report(
    model: &mut FusionModel,
    window: &SampleWindow,
    samples: usize,
    seed: u64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    // Lift the store out so the model can be captured immutably; forward
    // passes read weights only through the tape bindings.
    let mut store = std::mem::take(&mut model.store);
    let label = window.label.index();
    let shared: &FusionModel = model;
    let forward = |s: &ParamStore, tape: &mut Tape| -> Result<(Bindings, TensorId)> {
        let binds = s.bind(tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = shared.forward(tape, &binds, window, false, &mut rng)?;
        let loss = tape.softmax_cross_entropy(logits, &[label])?;
        Ok((binds, loss))
    };
    let coords = choose_coords(&store, samples, &mut ChaCha8Rng::seed_from_u64(seed));
    let report = check_gradients(
        &mut store,
        &mut |s| {
            let mut tape = Tape::new(GradMode::Record);
            let (binds, loss) = forward(s, &mut tape)?;
            tape.backward(loss)?;
            Ok(binds.grads(&tape))
        },
        &mut |s| {
            let mut tape = Tape::new(GradMode::NoGrad);
            let (_, loss) = forward(s, &mut tape)?;
            Ok(tape.data(loss)[0] as f64)
        },
        &coords,
        tolerance,
    );
    model.store = store;
    report
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

/// Closed-form per-branch parameter counts from the configuration numbers
/// alone, independent of any constructed tensors. `total` and
/// `analytic_total` coincide here by definition.
pub fn analytic_branch_counts(cfg: &ModelConfig, kind: ModelKind) -> Result<ParamCounts> {
    let lstm = |i: u64, h: u64| 4 * h * (i + h) + 4 * h;
    let bilstm = |i: u64, out: u64| 2 * lstm(i, out / 2);
    let attention = |d: u64| 3 * (d * d + d);
    let linear = |i: u64, o: u64| o * i + o;

    let face = if kind.has_face() {
        bilstm(cfg.face_in as u64, cfg.face_out as u64) + attention(cfg.face_out as u64)
    } else {
        0
    };
    let motion = if kind.has_motion() {
        bilstm(cfg.motion_in as u64, cfg.motion_out as u64) + attention(cfg.motion_out as u64)
    } else {
        0
    };
    let depth = if kind.has_depth() {
        let chain = cfg.depth_chain()?;
        let (k1h, k1w) = cfg.conv1_kernel;
        let (k2h, k2w) = cfg.conv2_kernel;
        cfg.conv1_filters as u64 * (k1h * k1w) as u64
            + cfg.conv1_filters as u64
            + cfg.conv2_filters as u64 * (cfg.conv1_filters * k2h * k2w) as u64
            + cfg.conv2_filters as u64
            + linear(chain.flat as u64, cfg.depth_cnn_latent as u64)
            + lstm(cfg.depth_cnn_latent as u64 + 1, cfg.depth_lstm_out as u64)
    } else {
        0
    };
    let mut classifier = 0u64;
    let mut d = kind.classifier_in(cfg) as u64;
    for &h in &cfg.classifier_hidden {
        classifier += linear(d, h as u64);
        d = h as u64;
    }
    classifier += linear(d, cfg.num_classes as u64);
    let total = face + motion + depth + classifier;
    Ok(ParamCounts { face, motion, depth, classifier, total, analytic_total: total })
}

/// Closed-form total parameter count; see [`analytic_branch_counts`].
pub fn analytic_param_count(cfg: &ModelConfig, kind: ModelKind) -> Result<u64> {
    Ok(analytic_branch_counts(cfg, kind)?.total)
}

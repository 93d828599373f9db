use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Record operations for a later `backward`.
    Record,
    /// Forward only; nothing requires a gradient and no ops are kept.
    NoGrad,
}

/// One recorded operation. Each variant knows how to push gradient from its
/// output to its inputs.
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f32 },
    Relu { a: TensorId },
    Tanh { a: TensorId },
    Sigmoid { a: TensorId },
    AddBias { a: TensorId, bias: TensorId },
    ConcatFlat { parts: Vec<TensorId> },
    SliceFlat { a: TensorId, offset: usize },
    Row { a: TensorId, row: usize },
    StackRows { rows: Vec<TensorId> },
    ReverseRows { a: TensorId },
    ConcatCols { a: TensorId, b: TensorId },
    Transpose { a: TensorId },
    SoftmaxFlat { a: TensorId },
    SoftmaxRows { a: TensorId },
    MeanRows { a: TensorId },
    Sum { a: TensorId },
    Mean { a: TensorId },
    CrossEntropy { logits: TensorId, labels: Vec<usize> },
    Conv2d { img: TensorId, w: TensorId, b: TensorId, stride: usize },
    MaxPool2d { a: TensorId, argmax: Vec<u32> },
    Dropout { a: TensorId, keep: Vec<f32> },
    Reshape { a: TensorId },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Wengert list: appended-to during the forward pass, replayed once in
/// reverse by `backward`. Append order is a topological order by
/// construction, so the reverse walk visits every op after all its users.
pub struct Tape {
    nodes: Vec<Node>,
    order: Vec<usize>,
    grads: Vec<Option<Vec<f32>>>,
    mode: GradMode,
    consumed: bool,
}

impl Tape {
    pub fn new(mode: GradMode) -> Tape {
        Tape { nodes: Vec::new(), order: Vec::new(), grads: Vec::new(), mode, consumed: false }
    }

    pub fn recording(&self) -> bool {
        matches!(self.mode, GradMode::Record)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn ops_recorded(&self) -> usize {
        self.order.len()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].value.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last `backward` loss w.r.t. this node, if any reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Constant input: never receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, false, Op::Leaf)
    }

    /// Trainable input. Requires gradients only while recording.
    pub fn param_leaf(&mut self, value: Tensor) -> TensorId {
        let rg = self.recording();
        self.push(value, rg, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> TensorId {
        let id = self.nodes.len();
        let keep_op = requires_grad && self.recording();
        self.nodes.push(Node { value, requires_grad, op: if keep_op { op } else { Op::Leaf } });
        if keep_op {
            self.order.push(id);
        }
        TensorId(id)
    }

    fn any_requires(&self, ids: &[TensorId]) -> bool {
        self.recording() && ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    // ── Arithmetic ───────────────────────────────────────────────────────

    /// `a[m,k] · b[k,n] -> [m,n]`, or `a[m,k] · b[k] -> [m]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = match (va.shape.as_slice(), vb.shape.as_slice()) {
            (&[m, k], &[k2, n]) => {
                if k != k2 {
                    return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
                }
                let mut c = Tensor::zeros(vec![m, n]);
                kernels::matmul_acc(&va.data, &vb.data, &mut c.data, m, k, n);
                c
            }
            (&[m, k], &[k2]) => {
                if k != k2 {
                    return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}]")));
                }
                let mut c = Tensor::zeros(vec![m]);
                kernels::matvec_acc(&va.data, &vb.data, &mut c.data, m, k);
                c
            }
            (sa, sb) => return Err(Error::dim("matmul", format!("unsupported ranks {sa:?} x {sb:?}"))),
        };
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_elementwise(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(Error::dim(name, format!("{:?} vs {:?}", va.shape, vb.shape)));
        }
        let data: Vec<f32> = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor { shape: va.shape.clone(), data };
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, op))
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> TensorId {
        let va = self.value(a);
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|&x| x * c).collect() };
        let rg = self.any_requires(&[a]);
        self.push(out, rg, Op::Scale { a, c })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.map_unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.map_unary(a, f32::tanh, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.map_unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a })
    }

    fn map_unary(&mut self, a: TensorId, f: impl Fn(f32) -> f32, op: Op) -> TensorId {
        let va = self.value(a);
        let out = Tensor { shape: va.shape.clone(), data: va.data.iter().map(|&x| f(x)).collect() };
        let rg = self.any_requires(&[a]);
        self.push(out, rg, op)
    }

    /// Add a `[d]` bias to every row of `[t,d]`.
    pub fn add_bias(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(bias));
        let (t, d) = va.dims2().map_err(|_| Error::dim("add_bias", format!("matrix rank {:?}", va.shape)))?;
        if vb.shape != [d] {
            return Err(Error::dim("add_bias", format!("[{t}x{d}] + {:?}", vb.shape)));
        }
        let mut out = Tensor::zeros(vec![t, d]);
        for r in 0..t {
            for c in 0..d {
                out.data[r * d + c] = va.data[r * d + c] + vb.data[c];
            }
        }
        let rg = self.any_requires(&[a, bias]);
        Ok(self.push(out, rg, Op::AddBias { a, bias }))
    }

    // ── Shaping ──────────────────────────────────────────────────────────

    pub fn concat_flat(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::validation("concat_flat: no inputs"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() > 1 {
                return Err(Error::dim("concat_flat", format!("rank {} input, want 0 or 1", v.rank())));
            }
            data.extend_from_slice(&v.data);
        }
        let out = Tensor::from_vec(data);
        let rg = self.any_requires(parts);
        Ok(self.push(out, rg, Op::ConcatFlat { parts: parts.to_vec() }))
    }

    pub fn slice_flat(&mut self, a: TensorId, offset: usize, len: usize) -> Result<TensorId> {
        let va = self.value(a);
        if va.rank() != 1 {
            return Err(Error::dim("slice_flat", format!("rank {} input, want 1", va.rank())));
        }
        if offset + len > va.data.len() || len == 0 {
            return Err(Error::dim(
                "slice_flat",
                format!("range {offset}..{} of [{}]", offset + len, va.data.len()),
            ));
        }
        let out = Tensor::from_vec(va.data[offset..offset + len].to_vec());
        let rg = self.any_requires(&[a]);
        Ok(self.push(out, rg, Op::SliceFlat { a, offset }))
    }

    /// Row `r` of a `[t,d]` matrix as a `[d]` vector.
    pub fn row(&mut self, a: TensorId, r: usize) -> Result<TensorId> {
        let va = self.value(a);
        let (t, d) = va.dims2()?;
        if r >= t {
            return Err(Error::dim("row", format!("row {r} of [{t}x{d}]")));
        }
        let out = Tensor::from_vec(va.data[r * d..(r + 1) * d].to_vec());
        let rg = self.any_requires(&[a]);
        Ok(self.push(out, rg, Op::Row { a, row: r }))
    }

    /// Stack `t` equal-length `[d]` vectors into `[t,d]`.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        if rows.is_empty() {
            return Err(Error::validation("stack_rows: no inputs"));
        }
        let d = self.value(rows[0]).data.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            let v = self.value(r);
            if v.rank() != 1 || v.data.len() != d {
                return Err(Error::dim("stack_rows", format!("{:?}, want [{d}]", v.shape)));
            }
            data.extend_from_slice(&v.data);
        }
        let out = Tensor { shape: vec![rows.len(), d], data };
        let rg = self.any_requires(rows);
        Ok(self.push(out, rg, Op::StackRows { rows: rows.to_vec() }))
    }

    pub fn reverse_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        let (t, d) = va.dims2()?;
        let mut data = Vec::with_capacity(t * d);
        for r in (0..t).rev() {
            data.extend_from_slice(&va.data[r * d..(r + 1) * d]);
        }
        let out = Tensor { shape: vec![t, d], data };
        let rg = self.any_requires(&[a]);
        Ok(self.push(out, rg, Op::ReverseRows { a }))
    }

    /// `[t,da] ++ [t,db] -> [t,da+db]` along columns.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ta, da) = va.dims2()?;
        let (tb, db) = vb.dims2()?;
        if ta != tb {
            return Err(Error::dim("concat_cols", format!("[{ta}x{da}] vs [{tb}x{db}]")));
        }
        let mut data = Vec::with_capacity(ta * (da + db));
        for r in 0..ta {
            data.extend_from_slice(&va.data[r * da..(r + 1) * da]);
            data.extend_from_slice(&vb.data[r * db..(r + 1) * db]);
        }
        let out = Tensor { shape: vec![ta, da + db], data };
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(out, rg, Op::ConcatCols { a, b }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        let (m, n) = va.dims2()?;
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = va.data[i * n + j];
            }
        }
        let out = Tensor { shape: vec![n, m], data };
        let rg = self.any_requires(&[a]);
        Ok(self.push(out, rg, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let va = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != va.numel() {
            return Err(Error::dim("reshape", format!("{:?} -> {:?}", va.shape, shape)));
        }
        let out = Tensor { shape, data: va.data.clone() };
        let rg = self.any_requires(&[a]);
        Ok(self.push(out, rg, Op::Reshape { a }))
    }

    // ── Reductions and normalizers ───────────────────────────────────────

    pub fn softmax_flat(&mut self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        if va.rank() != 1 {
            return Err(Error::dim("softmax_flat", format!("rank {} input, want 1", va.rank())));
        }
        let mut out = Tensor::zeros(va.shape.clone());
        kernels::softmax_row(&va.data, &mut out.data);
        let rg = self.any_requires(&[a]);
        Ok(self.push(out, rg, Op::SoftmaxFlat { a }))
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        let (t, d) = va.dims2()?;
        let mut out = Tensor::zeros(vec![t, d]);
        for r in 0..t {
            kernels::softmax_row(&va.data[r * d..(r + 1) * d], &mut out.data[r * d..(r + 1) * d]);
        }
        let rg = self.any_requires(&[a]);
        Ok(self.push(out, rg, Op::SoftmaxRows { a }))
    }

    /// Column means of `[t,d] -> [d]`.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let va = self.value(a);
        let (t, d) = va.dims2()?;
        let mut acc = vec![0.0f64; d];
        for r in 0..t {
            for c in 0..d {
                acc[c] += va.data[r * d + c] as f64;
            }
        }
        let out = Tensor::from_vec(acc.iter().map(|&s| (s / t as f64) as f32).collect());
        let rg = self.any_requires(&[a]);
        Ok(self.push(out, rg, Op::MeanRows { a }))
    }

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s = kernels::sum64(self.data(a)) as f32;
        let rg = self.any_requires(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).numel();
        let s = (kernels::sum64(self.data(a)) / n as f64) as f32;
        let rg = self.any_requires(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Mean { a })
    }

    /// Mean softmax cross-entropy of `[b,c]` logits (or a single `[c]` row)
    /// against class indices. Stabilized by per-row max subtraction; the
    /// log-sum-exp and the batch mean accumulate in f64.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let v = self.value(logits);
        let (b, c) = match v.shape.as_slice() {
            &[b, c] => (b, c),
            &[c] => (1, c),
            other => return Err(Error::dim("softmax_cross_entropy", format!("logits rank {other:?}"))),
        };
        if labels.len() != b {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for batch {b}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::validation(format!("label {bad} out of range for {c} classes")));
        }
        let mut total = 0.0f64;
        for (i, &y) in labels.iter().enumerate() {
            let row = &v.data[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for &x in row {
                denom += ((x - max) as f64).exp();
            }
            total += denom.ln() - (row[y] - max) as f64;
        }
        let loss = Tensor::scalar((total / b as f64) as f32);
        let rg = self.any_requires(&[logits]);
        Ok(self.push(loss, rg, Op::CrossEntropy { logits, labels: labels.to_vec() }))
    }

    // ── Structured ops ───────────────────────────────────────────────────

    /// Valid-padding cross-correlation: `img[c,h,w] * w[f,c,kh,kw] + b[f]`.
    /// Output spatial size is `(in - kernel)/stride + 1` per axis.
    pub fn conv2d(&mut self, img: TensorId, w: TensorId, b: TensorId, stride: usize) -> Result<TensorId> {
        let (vi, vw, vb) = (self.value(img), self.value(w), self.value(b));
        let (c, h, wid) = match vi.shape.as_slice() {
            &[c, h, w] => (c, h, w),
            other => return Err(Error::dim("conv2d", format!("image shape {other:?}, want [c,h,w]"))),
        };
        let (f, wc, kh, kw) = match vw.shape.as_slice() {
            &[f, wc, kh, kw] => (f, wc, kh, kw),
            other => return Err(Error::dim("conv2d", format!("weight shape {other:?}, want [f,c,kh,kw]"))),
        };
        if wc != c || vb.shape != [f] {
            return Err(Error::dim(
                "conv2d",
                format!("image [{c}x{h}x{wid}] vs weight [{f}x{wc}x{kh}x{kw}] bias {:?}", vb.shape),
            ));
        }
        if stride == 0 {
            return Err(Error::validation("conv2d: stride must be positive"));
        }
        if kh > h || kw > wid {
            return Err(Error::dim("conv2d", format!("kernel {kh}x{kw} exceeds image {h}x{wid}")));
        }
        let oh = (h - kh) / stride + 1;
        let ow = (wid - kw) / stride + 1;
        let mut out = Tensor::zeros(vec![f, oh, ow]);
        for fi in 0..f {
            let out_plane = &mut out.data[fi * oh * ow..(fi + 1) * oh * ow];
            out_plane.fill(vb.data[fi]);
            for ci in 0..c {
                let img_plane = &vi.data[ci * h * wid..(ci + 1) * h * wid];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = vw.data[((fi * c + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy * stride + ky;
                            let img_row = &img_plane[iy * wid + kx..];
                            let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                kernels::axpy(wv, &img_row[..ow], out_row);
                            } else {
                                for ox in 0..ow {
                                    out_row[ox] += wv * img_row[ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.any_requires(&[img, w, b]);
        Ok(self.push(out, rg, Op::Conv2d { img, w, b, stride }))
    }

    /// Non-overlapping max pooling with floor truncation; trailing rows and
    /// columns that do not fill a window are dropped. Ties route the
    /// gradient to the first maximum in row-major window order.
    pub fn maxpool2d(&mut self, a: TensorId, ph: usize, pw: usize) -> Result<TensorId> {
        let va = self.value(a);
        let (c, h, w) = match va.shape.as_slice() {
            &[c, h, w] => (c, h, w),
            other => return Err(Error::dim("maxpool2d", format!("shape {other:?}, want [c,h,w]"))),
        };
        if ph == 0 || pw == 0 {
            return Err(Error::validation("maxpool2d: window must be positive"));
        }
        let oh = h / ph;
        let ow = w / pw;
        if oh == 0 || ow == 0 {
            return Err(Error::dim("maxpool2d", format!("window {ph}x{pw} exceeds image {h}x{w}")));
        }
        let mut out = Tensor::zeros(vec![c, oh, ow]);
        let mut argmax = vec![0u32; c * oh * ow];
        for ci in 0..c {
            let plane = &va.data[ci * h * w..(ci + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for dy in 0..ph {
                        let iy = oy * ph + dy;
                        for dx in 0..pw {
                            let ix = ox * pw + dx;
                            let v = plane[iy * w + ix];
                            if v > best {
                                best = v;
                                best_idx = iy * w + ix;
                            }
                        }
                    }
                    out.data[(ci * oh + oy) * ow + ox] = best;
                    argmax[(ci * oh + oy) * ow + ox] = best_idx as u32;
                }
            }
        }
        let rg = self.any_requires(&[a]);
        Ok(self.push(out, rg, Op::MaxPool2d { a, argmax }))
    }

    /// Inverted dropout: keeps each element with probability `1 - rate` and
    /// scales survivors by `1/(1 - rate)`, so the expected value is the
    /// input. Identity when not training.
    pub fn dropout<R: Rng>(
        &mut self,
        a: TensorId,
        rate: f32,
        training: bool,
        rng: &mut R,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::validation(format!("dropout rate {rate} outside [0,1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let va = self.value(a);
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f32> =
            (0..va.numel()).map(|_| if rng.gen::<f32>() < rate { 0.0 } else { scale }).collect();
        let data: Vec<f32> = va.data.iter().zip(&keep).map(|(&x, &k)| x * k).collect();
        let out = Tensor { shape: va.shape.clone(), data };
        let rg = self.any_requires(&[a]);
        Ok(self.push(out, rg, Op::Dropout { a, keep }))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Populates gradients for every node
    /// that requires them, then clears the recorded operation list; a second
    /// call is a contract error. Gradients stay readable via [`Tape::grad`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if !self.recording() {
            return Err(Error::contract("backward on a no-grad tape"));
        }
        if self.consumed {
            return Err(Error::contract("backward on a consumed tape"));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::contract(format!("backward from non-scalar shape {:?}", lv.shape)));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::contract("backward from a node with no gradient path"));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        let order = std::mem::take(&mut self.order);
        for &nid in order.iter().rev() {
            let gout = match self.grads[nid].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(nid, &gout);
            self.grads[nid] = Some(gout);
        }
        self.consumed = true;
        Ok(())
    }

    fn grad_buf(&mut self, id: TensorId) -> &mut Vec<f32> {
        // Sized from the shape, not the data: propagate rules may hold this
        // node's data buffer (mem::take) while allocating its gradient.
        let numel = self.nodes[id.0].value.shape.iter().product();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; numel])
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&mut self, nid: usize, gout: &[f32]) {
        // Ops only reference earlier nodes, so the borrows below are disjoint
        // from grads[nid], which the caller holds.
        let op = std::mem::replace(&mut self.nodes[nid].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let va_shape = self.nodes[a.0].value.shape.clone();
                let vb_rank = self.nodes[b.0].value.rank();
                let (m, k) = (va_shape[0], va_shape[1]);
                if vb_rank == 2 {
                    let n = self.nodes[b.0].value.shape[1];
                    if self.wants(a) {
                        let bdat = std::mem::take(&mut self.nodes[b.0].value.data);
                        let ga = self.grad_buf(a);
                        for i in 0..m {
                            let gr = &gout[i * n..(i + 1) * n];
                            let ga_row = &mut ga[i * k..(i + 1) * k];
                            for p in 0..k {
                                ga_row[p] += kernels::dot(gr, &bdat[p * n..(p + 1) * n]);
                            }
                        }
                        self.nodes[b.0].value.data = bdat;
                    }
                    if self.wants(b) {
                        let adat = std::mem::take(&mut self.nodes[a.0].value.data);
                        let gb = self.grad_buf(b);
                        for i in 0..m {
                            let gr = &gout[i * n..(i + 1) * n];
                            let a_row = &adat[i * k..(i + 1) * k];
                            for (p, &aip) in a_row.iter().enumerate() {
                                kernels::axpy(aip, gr, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                        self.nodes[a.0].value.data = adat;
                    }
                } else {
                    // w[m,k] · x[k] -> [m]
                    if self.wants(a) {
                        let xdat = std::mem::take(&mut self.nodes[b.0].value.data);
                        let ga = self.grad_buf(a);
                        for i in 0..m {
                            kernels::axpy(gout[i], &xdat, &mut ga[i * k..(i + 1) * k]);
                        }
                        self.nodes[b.0].value.data = xdat;
                    }
                    if self.wants(b) {
                        let wdat = std::mem::take(&mut self.nodes[a.0].value.data);
                        let gb = self.grad_buf(b);
                        for i in 0..m {
                            kernels::axpy(gout[i], &wdat[i * k..(i + 1) * k], gb);
                        }
                        self.nodes[a.0].value.data = wdat;
                    }
                }
            }
            Op::Add { a, b } => {
                for &t in &[*a, *b] {
                    if self.wants(t) {
                        kernels::axpy(1.0, gout, self.grad_buf(t));
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.wants(*a) {
                    kernels::axpy(1.0, gout, self.grad_buf(*a));
                }
                if self.wants(*b) {
                    kernels::axpy(-1.0, gout, self.grad_buf(*b));
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let bdat = std::mem::take(&mut self.nodes[b.0].value.data);
                    let ga = self.grad_buf(a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * bdat[i];
                    }
                    self.nodes[b.0].value.data = bdat;
                }
                if self.wants(b) {
                    let adat = std::mem::take(&mut self.nodes[a.0].value.data);
                    let gb = self.grad_buf(b);
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * adat[i];
                    }
                    self.nodes[a.0].value.data = adat;
                }
            }
            Op::Scale { a, c } => {
                if self.wants(*a) {
                    kernels::axpy(*c, gout, self.grad_buf(*a));
                }
            }
            Op::Relu { a } => {
                if self.wants(*a) {
                    let xdat = std::mem::take(&mut self.nodes[a.0].value.data);
                    let ga = self.grad_buf(*a);
                    for i in 0..gout.len() {
                        if xdat[i] > 0.0 {
                            ga[i] += gout[i];
                        }
                    }
                    self.nodes[a.0].value.data = xdat;
                }
            }
            Op::Tanh { a } => {
                if self.wants(*a) {
                    let ydat = std::mem::take(&mut self.nodes[nid].value.data);
                    let ga = self.grad_buf(*a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * (1.0 - ydat[i] * ydat[i]);
                    }
                    self.nodes[nid].value.data = ydat;
                }
            }
            Op::Sigmoid { a } => {
                if self.wants(*a) {
                    let ydat = std::mem::take(&mut self.nodes[nid].value.data);
                    let ga = self.grad_buf(*a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * ydat[i] * (1.0 - ydat[i]);
                    }
                    self.nodes[nid].value.data = ydat;
                }
            }
            Op::AddBias { a, bias } => {
                let d = self.nodes[bias.0].value.numel();
                if self.wants(*a) {
                    kernels::axpy(1.0, gout, self.grad_buf(*a));
                }
                if self.wants(*bias) {
                    let gb = self.grad_buf(*bias);
                    for (i, &g) in gout.iter().enumerate() {
                        gb[i % d] += g;
                    }
                }
            }
            Op::ConcatFlat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.numel();
                    if self.wants(p) {
                        kernels::axpy(1.0, &gout[off..off + len], self.grad_buf(p));
                    }
                    off += len;
                }
            }
            Op::SliceFlat { a, offset } => {
                if self.wants(*a) {
                    let off = *offset;
                    let ga = self.grad_buf(*a);
                    kernels::axpy(1.0, gout, &mut ga[off..off + gout.len()]);
                }
            }
            Op::Row { a, row } => {
                if self.wants(*a) {
                    let d = gout.len();
                    let r = *row;
                    let ga = self.grad_buf(*a);
                    kernels::axpy(1.0, gout, &mut ga[r * d..(r + 1) * d]);
                }
            }
            Op::StackRows { rows } => {
                let d = self.nodes[rows[0].0].value.numel();
                for (r, &part) in rows.iter().enumerate() {
                    if self.wants(part) {
                        kernels::axpy(1.0, &gout[r * d..(r + 1) * d], self.grad_buf(part));
                    }
                }
            }
            Op::ReverseRows { a } => {
                if self.wants(*a) {
                    let shape = self.nodes[nid].value.shape.clone();
                    let (t, d) = (shape[0], shape[1]);
                    let ga = self.grad_buf(*a);
                    for r in 0..t {
                        kernels::axpy(1.0, &gout[r * d..(r + 1) * d], &mut ga[(t - 1 - r) * d..(t - r) * d]);
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (a, b) = (*a, *b);
                let da = self.nodes[a.0].value.shape[1];
                let db = self.nodes[b.0].value.shape[1];
                let t = self.nodes[a.0].value.shape[0];
                if self.wants(a) {
                    let ga = self.grad_buf(a);
                    for r in 0..t {
                        kernels::axpy(1.0, &gout[r * (da + db)..r * (da + db) + da], &mut ga[r * da..(r + 1) * da]);
                    }
                }
                if self.wants(b) {
                    let gb = self.grad_buf(b);
                    for r in 0..t {
                        kernels::axpy(
                            1.0,
                            &gout[r * (da + db) + da..(r + 1) * (da + db)],
                            &mut gb[r * db..(r + 1) * db],
                        );
                    }
                }
            }
            Op::Transpose { a } => {
                if self.wants(*a) {
                    let shape = self.nodes[nid].value.shape.clone();
                    let (n, m) = (shape[0], shape[1]);
                    let ga = self.grad_buf(*a);
                    for j in 0..n {
                        for i in 0..m {
                            ga[i * n + j] += gout[j * m + i];
                        }
                    }
                }
            }
            Op::SoftmaxFlat { a } => {
                if self.wants(*a) {
                    let ydat = std::mem::take(&mut self.nodes[nid].value.data);
                    let dot_gy: f64 =
                        gout.iter().zip(&ydat).map(|(&g, &y)| g as f64 * y as f64).sum();
                    let ga = self.grad_buf(*a);
                    for i in 0..gout.len() {
                        ga[i] += ydat[i] * (gout[i] - dot_gy as f32);
                    }
                    self.nodes[nid].value.data = ydat;
                }
            }
            Op::SoftmaxRows { a } => {
                if self.wants(*a) {
                    let ydat = std::mem::take(&mut self.nodes[nid].value.data);
                    let shape = self.nodes[nid].value.shape.clone();
                    let (t, d) = (shape[0], shape[1]);
                    let ga = self.grad_buf(*a);
                    for r in 0..t {
                        let y = &ydat[r * d..(r + 1) * d];
                        let g = &gout[r * d..(r + 1) * d];
                        let dot_gy: f64 = g.iter().zip(y).map(|(&g, &y)| g as f64 * y as f64).sum();
                        for c in 0..d {
                            ga[r * d + c] += y[c] * (g[c] - dot_gy as f32);
                        }
                    }
                    self.nodes[nid].value.data = ydat;
                }
            }
            Op::MeanRows { a } => {
                if self.wants(*a) {
                    let shape = self.nodes[a.0].value.shape.clone();
                    let (t, d) = (shape[0], shape[1]);
                    let inv = 1.0 / t as f32;
                    let ga = self.grad_buf(*a);
                    for r in 0..t {
                        kernels::axpy(inv, gout, &mut ga[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Sum { a } => {
                if self.wants(*a) {
                    let g = gout[0];
                    for v in self.grad_buf(*a).iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::Mean { a } => {
                if self.wants(*a) {
                    let n = self.nodes[a.0].value.numel();
                    let g = gout[0] / n as f32;
                    for v in self.grad_buf(*a).iter_mut() {
                        *v += g;
                    }
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.wants(*logits) {
                    let v = std::mem::take(&mut self.nodes[logits.0].value.data);
                    let b = labels.len();
                    let c = v.len() / b;
                    let g = gout[0] / b as f32;
                    let mut p = vec![0.0f32; c];
                    let gl = self.grad_buf(*logits);
                    for (i, &y) in labels.iter().enumerate() {
                        kernels::softmax_row(&v[i * c..(i + 1) * c], &mut p);
                        for j in 0..c {
                            let indicator = if j == y { 1.0 } else { 0.0 };
                            gl[i * c + j] += g * (p[j] - indicator);
                        }
                    }
                    self.nodes[logits.0].value.data = v;
                }
            }
            Op::Conv2d { img, w, b, stride } => {
                let (img, w, b, stride) = (*img, *w, *b, *stride);
                let ishape = self.nodes[img.0].value.shape.clone();
                let wshape = self.nodes[w.0].value.shape.clone();
                let oshape = self.nodes[nid].value.shape.clone();
                let (c, h, wid) = (ishape[0], ishape[1], ishape[2]);
                let (f, kh, kw) = (wshape[0], wshape[2], wshape[3]);
                let (oh, ow) = (oshape[1], oshape[2]);
                if self.wants(img) {
                    let wdat = std::mem::take(&mut self.nodes[w.0].value.data);
                    let gi = self.grad_buf(img);
                    for fi in 0..f {
                        let gplane = &gout[fi * oh * ow..(fi + 1) * oh * ow];
                        for ci in 0..c {
                            let gi_plane = &mut gi[ci * h * wid..(ci + 1) * h * wid];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let wv = wdat[((fi * c + ci) * kh + ky) * kw + kx];
                                    if wv == 0.0 {
                                        continue;
                                    }
                                    for oy in 0..oh {
                                        let iy = oy * stride + ky;
                                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                                        if stride == 1 {
                                            kernels::axpy(wv, grow, &mut gi_plane[iy * wid + kx..iy * wid + kx + ow]);
                                        } else {
                                            for ox in 0..ow {
                                                gi_plane[iy * wid + kx + ox * stride] += wv * grow[ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.nodes[w.0].value.data = wdat;
                }
                if self.wants(w) {
                    let idat = std::mem::take(&mut self.nodes[img.0].value.data);
                    let gw = self.grad_buf(w);
                    for fi in 0..f {
                        let gplane = &gout[fi * oh * ow..(fi + 1) * oh * ow];
                        for ci in 0..c {
                            let img_plane = &idat[ci * h * wid..(ci + 1) * h * wid];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let mut acc = 0.0f32;
                                    for oy in 0..oh {
                                        let iy = oy * stride + ky;
                                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                                        if stride == 1 {
                                            acc += kernels::dot(grow, &img_plane[iy * wid + kx..iy * wid + kx + ow]);
                                        } else {
                                            for ox in 0..ow {
                                                acc += grow[ox] * img_plane[iy * wid + kx + ox * stride];
                                            }
                                        }
                                    }
                                    gw[((fi * c + ci) * kh + ky) * kw + kx] += acc;
                                }
                            }
                        }
                    }
                    self.nodes[img.0].value.data = idat;
                }
                if self.wants(b) {
                    let gb = self.grad_buf(b);
                    for fi in 0..f {
                        gb[fi] += kernels::sum64(&gout[fi * oh * ow..(fi + 1) * oh * ow]) as f32;
                    }
                }
            }
            Op::MaxPool2d { a, argmax } => {
                if self.wants(*a) {
                    let ashape = self.nodes[a.0].value.shape.clone();
                    let oshape = self.nodes[nid].value.shape.clone();
                    let plane_in = ashape[1] * ashape[2];
                    let plane_out = oshape[1] * oshape[2];
                    let ga = self.grad_buf(*a);
                    for (o, &src) in argmax.iter().enumerate() {
                        let ci = o / plane_out;
                        ga[ci * plane_in + src as usize] += gout[o];
                    }
                }
            }
            Op::Dropout { a, keep } => {
                if self.wants(*a) {
                    let ga = self.grad_buf(*a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * keep[i];
                    }
                }
            }
            Op::Reshape { a } => {
                if self.wants(*a) {
                    kernels::axpy(1.0, gout, self.grad_buf(*a));
                }
            }
        }
        // Drop op auxiliaries (masks, argmax, label vectors) with `op`.
    }

    /// True when every populated gradient is finite.
    pub fn all_grads_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

//! Network layers built on the tape. Each layer registers its parameters in
//! a [`ParamStore`] under a dotted name prefix and runs forward against the
//! per-pass [`Bindings`], so layer structs stay plain-old-data and one store
//! serves any number of forward passes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{xavier_uniform, Bindings, ParamId, ParamStore, Tape, Tensor, TensorId};

// ── Linear ────────────────────────────────────────────────────────────────

/// Affine map `y = W x + b`, weight stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Linear> {
        let w = store.register(
            format!("{prefix}.w"),
            xavier_uniform(rng, in_dim, out_dim, vec![out_dim, in_dim]),
        )?;
        let b = store.register(format!("{prefix}.b"), Tensor::zeros(vec![out_dim]))?;
        Ok(Linear { w, b, in_dim, out_dim })
    }

    /// `[in] -> [out]`, or row-wise `[t, in] -> [t, out]`.
    pub fn forward(&self, tape: &mut Tape, binds: &Bindings, x: TensorId) -> Result<TensorId> {
        match tape.shape(x).len() {
            1 => {
                let wx = tape.matmul(binds[self.w], x)?;
                tape.add(wx, binds[self.b])
            }
            2 => {
                let wt = tape.transpose(binds[self.w])?;
                let xw = tape.matmul(x, wt)?;
                tape.add_bias(xw, binds[self.b])
            }
            r => Err(Error::dim("Linear", format!("rank {r} input"))),
        }
    }

    pub fn param_count(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

// ── LSTM ──────────────────────────────────────────────────────────────────

/// Single-direction LSTM. One fused weight `[4h, in+h]` and bias `[4h]` hold
/// the input, forget, cell, and output gates in that order; the forget-gate
/// bias starts at 1.0 so early training does not wipe the cell state.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<LstmCell> {
        let w = store.register(
            format!("{prefix}.w"),
            xavier_uniform(rng, in_dim + hidden, hidden, vec![4 * hidden, in_dim + hidden]),
        )?;
        let mut bias = Tensor::zeros(vec![4 * hidden]);
        for v in &mut bias.data[hidden..2 * hidden] {
            *v = 1.0;
        }
        let b = store.register(format!("{prefix}.b"), bias)?;
        Ok(LstmCell { w, b, in_dim, hidden })
    }

    /// Full sequence `[t, in] -> [t, hidden]`, zero initial state.
    pub fn forward_seq(&self, tape: &mut Tape, binds: &Bindings, x: TensorId) -> Result<TensorId> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::dim(
                "LstmCell",
                format!("expected [t, {}], got {:?}", self.in_dim, shape),
            ));
        }
        let steps = shape[0];
        if steps == 0 {
            return Err(Error::validation("LSTM over an empty sequence"));
        }
        let h = self.hidden;
        let mut hs = Vec::with_capacity(steps);
        let mut h_prev = tape.leaf(Tensor::zeros(vec![h]));
        let mut c_prev = tape.leaf(Tensor::zeros(vec![h]));
        for t in 0..steps {
            let xt = tape.row(x, t)?;
            let cat = tape.concat_flat(&[xt, h_prev])?;
            let zw = tape.matmul(binds[self.w], cat)?;
            let z = tape.add(zw, binds[self.b])?;
            let gi = tape.slice_flat(z, 0, h)?;
            let gf = tape.slice_flat(z, h, h)?;
            let gg = tape.slice_flat(z, 2 * h, h)?;
            let go = tape.slice_flat(z, 3 * h, h)?;
            let i = tape.sigmoid(gi);
            let f = tape.sigmoid(gf);
            let g = tape.tanh(gg);
            let o = tape.sigmoid(go);
            let fc = tape.mul(f, c_prev)?;
            let ig = tape.mul(i, g)?;
            c_prev = tape.add(fc, ig)?;
            let ct = tape.tanh(c_prev);
            h_prev = tape.mul(o, ct)?;
            hs.push(h_prev);
        }
        tape.stack_rows(&hs)
    }

    pub fn param_count(&self) -> usize {
        4 * self.hidden * (self.in_dim + self.hidden) + 4 * self.hidden
    }
}

/// Bidirectional LSTM: forward and reversed passes concatenated per step,
/// `[t, in] -> [t, out_dim]` with `out_dim = 2 * hidden`.
#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
    pub out_dim: usize,
}

impl BiLstm {
    /// `out_dim` must be even; each direction gets `out_dim / 2` units.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<BiLstm> {
        if out_dim % 2 != 0 {
            return Err(Error::validation(format!(
                "bidirectional output dim {out_dim} must be even"
            )));
        }
        let h = out_dim / 2;
        let fwd = LstmCell::new(store, &format!("{prefix}.fwd"), in_dim, h, rng)?;
        let bwd = LstmCell::new(store, &format!("{prefix}.bwd"), in_dim, h, rng)?;
        Ok(BiLstm { fwd, bwd, out_dim })
    }

    pub fn forward(&self, tape: &mut Tape, binds: &Bindings, x: TensorId) -> Result<TensorId> {
        let hf = self.fwd.forward_seq(tape, binds, x)?;
        let xr = tape.reverse_rows(x)?;
        let hb_rev = self.bwd.forward_seq(tape, binds, xr)?;
        let hb = tape.reverse_rows(hb_rev)?;
        tape.concat_cols(hf, hb)
    }

    pub fn param_count(&self) -> usize {
        self.fwd.param_count() + self.bwd.param_count()
    }
}

// ── Attention pooling ─────────────────────────────────────────────────────

/// How a `[t, d]` sequence collapses to a single `[d]` vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PoolMode {
    /// Scaled dot-product attention with the final timestep as query.
    FinalQuery,
    /// Plain average over timesteps; attention projections sit unused.
    Mean,
}

/// Single-head scaled dot-product self-attention used as sequence pooling:
/// the query is the projected final timestep, keys and values are projections
/// of every timestep, and the output is the weight-averaged value vector.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        rng: &mut R,
    ) -> Result<SelfAttention> {
        let q = Linear::new(store, &format!("{prefix}.q"), dim, dim, rng)?;
        let k = Linear::new(store, &format!("{prefix}.k"), dim, dim, rng)?;
        let v = Linear::new(store, &format!("{prefix}.v"), dim, dim, rng)?;
        Ok(SelfAttention { q, k, v, dim })
    }

    fn check_input(&self, tape: &Tape, h: TensorId) -> Result<(usize, usize)> {
        match *tape.shape(h) {
            [t, d] if d == self.dim => Ok((t, d)),
            ref other => Err(Error::dim(
                "SelfAttention",
                format!("expected [t, {}], got {:?}", self.dim, other),
            )),
        }
    }

    /// Softmax weights over timesteps, `[t, d] -> [t]`.
    pub fn weights(&self, tape: &mut Tape, binds: &Bindings, h: TensorId) -> Result<TensorId> {
        let (t, d) = self.check_input(tape, h)?;
        let last = tape.row(h, t - 1)?;
        let q = self.q.forward(tape, binds, last)?;
        let k = self.k.forward(tape, binds, h)?;
        let scores = tape.matmul(k, q)?;
        let scaled = tape.scale(scores, 1.0 / (d as f32).sqrt());
        tape.softmax_flat(scaled)
    }

    /// Collapse `[t, d] -> [d]` under the given mode.
    pub fn pool(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        h: TensorId,
        mode: PoolMode,
    ) -> Result<TensorId> {
        match mode {
            PoolMode::Mean => {
                self.check_input(tape, h)?;
                tape.mean_rows(h)
            }
            PoolMode::FinalQuery => {
                let weights = self.weights(tape, binds, h)?;
                let values = self.v.forward(tape, binds, h)?;
                let vt = tape.transpose(values)?;
                tape.matmul(vt, weights)
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.q.param_count() + self.k.param_count() + self.v.param_count()
    }
}

// ── Convolution stack ─────────────────────────────────────────────────────

/// 2-D convolution over `[c, h, w]` images, valid padding.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        filters: usize,
        kernel: (usize, usize),
        stride: usize,
        rng: &mut R,
    ) -> Result<Conv2d> {
        let (kh, kw) = kernel;
        let fan_in = in_ch * kh * kw;
        let fan_out = filters * kh * kw;
        let w = store.register(
            format!("{prefix}.w"),
            xavier_uniform(rng, fan_in, fan_out, vec![filters, in_ch, kh, kw]),
        )?;
        let b = store.register(format!("{prefix}.b"), Tensor::zeros(vec![filters]))?;
        Ok(Conv2d { w, b, in_ch, filters, kernel, stride })
    }

    pub fn forward(&self, tape: &mut Tape, binds: &Bindings, x: TensorId) -> Result<TensorId> {
        tape.conv2d(x, binds[self.w], binds[self.b], self.stride)
    }

    /// Output spatial size for a given input, mirroring the tape kernel.
    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if kh > h || kw > w {
            return Err(Error::dim(
                "Conv2d",
                format!("kernel {}x{} larger than input {}x{}", kh, kw, h, w),
            ));
        }
        Ok(((h - kh) / self.stride + 1, (w - kw) / self.stride + 1))
    }

    pub fn param_count(&self) -> usize {
        self.filters * self.in_ch * self.kernel.0 * self.kernel.1 + self.filters
    }
}

/// Non-overlapping max pooling; partial windows at the edges are dropped.
#[derive(Debug, Clone, Copy)]
pub struct MaxPool2d {
    pub pool: (usize, usize),
}

impl MaxPool2d {
    pub fn new(pool: (usize, usize)) -> MaxPool2d {
        MaxPool2d { pool }
    }

    pub fn forward(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        tape.maxpool2d(x, self.pool.0, self.pool.1)
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.pool.0, w / self.pool.1)
    }
}

/// Inverted dropout; identity in eval mode.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f32,
}

impl Dropout {
    pub fn new(rate: f32) -> Dropout {
        Dropout { rate }
    }

    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        x: TensorId,
        training: bool,
        rng: &mut R,
    ) -> Result<TensorId> {
        tape.dropout(x, self.rate, training, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{check_gradients, choose_coords, GradMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel = shape.iter().product();
        Tensor { shape, data: (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect() }
    }

    #[test]
    fn linear_matches_hand_computation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(&mut store, "l", 2, 2, &mut rng).unwrap();
        store.value_mut(lin.w).data.copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        store.value_mut(lin.b).data.copy_from_slice(&[0.5, -0.5]);

        let mut tape = Tape::new(GradMode::NoGrad);
        let binds = store.bind(&mut tape);
        let x = tape.leaf(Tensor::from_vec(vec![1.0, 1.0]));
        let y = lin.forward(&mut tape, &binds, x).unwrap();
        assert_eq!(tape.data(y), &[3.5, 6.5]);

        // row-wise path agrees with the vector path
        let xm = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 1.0, 2.0, 0.0]).unwrap());
        let ym = lin.forward(&mut tape, &binds, xm).unwrap();
        assert_eq!(tape.shape(ym), &[2, 2]);
        assert_eq!(&tape.data(ym)[0..2], &[3.5, 6.5]);
        assert_eq!(&tape.data(ym)[2..4], &[2.5, 5.5]);
    }

    #[test]
    fn lstm_forward_state_ignores_future_inputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = LstmCell::new(&mut store, "c", 3, 4, &mut rng).unwrap();

        let base = randn(vec![5, 3], 2);
        let mut altered = base.clone();
        for v in &mut altered.data[12..15] {
            *v += 1.0; // change only the final timestep
        }

        let run = |x: &Tensor| -> Vec<f32> {
            let mut tape = Tape::new(GradMode::NoGrad);
            let binds = store.bind(&mut tape);
            let xid = tape.leaf(x.clone());
            let h = cell.forward_seq(&mut tape, &binds, xid).unwrap();
            tape.data(h).to_vec()
        };
        let ha = run(&base);
        let hb = run(&altered);
        assert_eq!(&ha[0..16], &hb[0..16], "steps before the change must match bit-for-bit");
        assert_ne!(&ha[16..20], &hb[16..20], "final step must see the change");
    }

    #[test]
    fn bilstm_on_palindrome_mirrors_directions() {
        // For input rows satisfying x[t] == x[T-1-t], the reversed sequence
        // equals the original, so the backward half at t must equal the
        // forward half at T-1-t.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bi = BiLstm::new(&mut store, "b", 2, 6, &mut rng).unwrap();
        // identical forward/backward cells make the symmetry exact
        let (wf, bf) = (bi.fwd.w, bi.fwd.b);
        let (wb, bb) = (bi.bwd.w, bi.bwd.b);
        let wv = store.value(wf).clone();
        let bv = store.value(bf).clone();
        *store.value_mut(wb) = wv;
        *store.value_mut(bb) = bv;

        let rows = [[0.3f32, -0.2], [1.0, 0.5], [0.3, -0.2]];
        let x = Tensor::new(vec![3, 2], rows.concat()).unwrap();
        let mut tape = Tape::new(GradMode::NoGrad);
        let binds = store.bind(&mut tape);
        let xid = tape.leaf(x);
        let out = tape_data(&mut tape, &binds, &bi, xid);
        let d = 3;
        for t in 0..3 {
            for k in 0..d {
                let fwd_at_mirror = out[(2 - t) * 6 + k];
                let bwd_at_t = out[t * 6 + d + k];
                assert!((fwd_at_mirror - bwd_at_t).abs() < 1e-6);
            }
        }
    }

    fn tape_data(tape: &mut Tape, binds: &Bindings, bi: &BiLstm, x: TensorId) -> Vec<f32> {
        let out = bi.forward(tape, binds, x).unwrap();
        tape.data(out).to_vec()
    }

    #[test]
    fn bilstm_param_count_formula() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bi = BiLstm::new(&mut store, "face", 1405, 2048, &mut rng).unwrap();
        assert_eq!(bi.param_count(), 19_906_560);
        assert_eq!(store.total_params(), bi.param_count() as u64);
        assert!(BiLstm::new(&mut store, "odd", 4, 5, &mut rng).is_err());
    }

    #[test]
    fn forget_gate_bias_starts_open() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cell = LstmCell::new(&mut store, "c", 2, 3, &mut rng).unwrap();
        let b = store.value(cell.b);
        assert!(b.data[0..3].iter().all(|&v| v == 0.0));
        assert!(b.data[3..6].iter().all(|&v| v == 1.0));
        assert!(b.data[6..12].iter().all(|&v| v == 0.0));
    }

    /// Attention layer with identity Q/K/V and zero biases, so pooled values
    /// can be predicted by hand.
    fn identity_attention(store: &mut ParamStore, dim: usize) -> SelfAttention {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let attn = SelfAttention::new(store, "a", dim, &mut rng).unwrap();
        for lin in [&attn.q, &attn.k, &attn.v] {
            let w = store.value_mut(lin.w);
            w.data.fill(0.0);
            for i in 0..dim {
                w.data[i * dim + i] = 1.0;
            }
            store.value_mut(lin.b).data.fill(0.0);
        }
        attn
    }

    #[test]
    fn attention_weights_sum_to_one_and_follow_similarity() {
        let mut store = ParamStore::new();
        let attn = identity_attention(&mut store, 2);
        let mut tape = Tape::new(GradMode::NoGrad);
        let binds = store.bind(&mut tape);
        // row 1 aligned with the final row, row 0 orthogonal
        let h = tape.leaf(Tensor::new(vec![3, 2], vec![0.0, 4.0, 4.0, 0.0, 4.0, 0.0]).unwrap());
        let w = attn.weights(&mut tape, &binds, h).unwrap();
        let wv = tape.data(w);
        let sum: f32 = wv.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(wv[1] > wv[0] && wv[2] > wv[0]);

        let pooled = attn.pool(&mut tape, &binds, h, PoolMode::FinalQuery).unwrap();
        assert_eq!(tape.shape(pooled), &[2]);

        // mean mode is the plain row average
        let m = attn.pool(&mut tape, &binds, h, PoolMode::Mean).unwrap();
        let mv = tape.data(m);
        assert!((mv[0] - 8.0 / 3.0).abs() < 1e-6 && (mv[1] - 4.0 / 3.0).abs() < 1e-6);

        // 2 -> 3 (w+b per projection), doubled for a param-count spot check
        assert_eq!(attn.param_count(), 3 * (4 + 2));
    }

    #[test]
    fn attention_single_timestep_is_the_value_projection() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let attn = SelfAttention::new(&mut store, "a", 3, &mut rng).unwrap();
        let row = randn(vec![1, 3], 12);

        let mut tape = Tape::new(GradMode::NoGrad);
        let binds = store.bind(&mut tape);
        let h = tape.leaf(row.clone());
        let pooled = attn.pool(&mut tape, &binds, h, PoolMode::FinalQuery).unwrap();

        let flat = tape.leaf(Tensor::from_vec(row.data.clone()));
        let vproj = attn.v.forward(&mut tape, &binds, flat).unwrap();
        for (p, v) in tape.data(pooled).iter().zip(tape.data(vproj)) {
            assert!((p - v).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_identical_timesteps_return_that_value_projection() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let attn = SelfAttention::new(&mut store, "a", 3, &mut rng).unwrap();
        let mut tape = Tape::new(GradMode::NoGrad);
        let binds = store.bind(&mut tape);
        let h = tape.leaf(Tensor::new(vec![4, 3], vec![0.4, -0.2, 0.9].repeat(4)).unwrap());
        let pooled = attn.pool(&mut tape, &binds, h, PoolMode::FinalQuery).unwrap();
        let one = tape.leaf(Tensor::from_vec(vec![0.4, -0.2, 0.9]));
        let vproj = attn.v.forward(&mut tape, &binds, one).unwrap();
        for (p, v) in tape.data(pooled).iter().zip(tape.data(vproj)) {
            assert!((p - v).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_matches_direct_formula_oracle() {
        let (t, d) = (4usize, 4usize);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let attn = SelfAttention::new(&mut store, "a", d, &mut rng).unwrap();
        let h = randn(vec![t, d], 18);

        let mut tape = Tape::new(GradMode::NoGrad);
        let binds = store.bind(&mut tape);
        let hid = tape.leaf(h.clone());
        let pooled = attn.pool(&mut tape, &binds, hid, PoolMode::FinalQuery).unwrap();

        // direct formula in f64 from the raw parameter values
        let proj = |lin: &Linear, x: &[f32]| -> Vec<f64> {
            let w = &store.value(lin.w).data;
            let b = &store.value(lin.b).data;
            (0..d)
                .map(|o| {
                    b[o] as f64
                        + (0..d).map(|i| w[o * d + i] as f64 * x[i] as f64).sum::<f64>()
                })
                .collect()
        };
        let q = proj(&attn.q, &h.data[(t - 1) * d..]);
        let keys: Vec<Vec<f64>> = (0..t).map(|r| proj(&attn.k, &h.data[r * d..(r + 1) * d])).collect();
        let vals: Vec<Vec<f64>> = (0..t).map(|r| proj(&attn.v, &h.data[r * d..(r + 1) * d])).collect();
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| k.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut want = vec![0.0f64; d];
        for (r, e) in exps.iter().enumerate() {
            for c in 0..d {
                want[c] += e / z * vals[r][c];
            }
        }
        for (got, w) in tape.data(pooled).iter().zip(want) {
            assert!((*got as f64 - w).abs() < 1e-6, "{got} vs {w}");
        }
    }

    #[test]
    fn lstm_single_step_matches_hand_recurrence() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let cell = LstmCell::new(&mut store, "c", 1, 1, &mut rng).unwrap();
        // rows of w: [input, forget, cell, output] gates over (x, h_prev)
        store.value_mut(cell.w).data.copy_from_slice(&[
            0.5, 0.1, // input gate
            -0.3, 0.2, // forget gate
            0.8, -0.1, // cell candidate
            0.4, 0.6, // output gate
        ]);
        store.value_mut(cell.b).data.copy_from_slice(&[0.1, 1.0, -0.2, 0.3]);
        let x = 0.7f64;

        let mut tape = Tape::new(GradMode::NoGrad);
        let binds = store.bind(&mut tape);
        let xid = tape.leaf(Tensor::new(vec![1, 1], vec![x as f32]).unwrap());
        let h = cell.forward_seq(&mut tape, &binds, xid).unwrap();

        let sg = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = sg(0.5 * x + 0.1);
        let g = (0.8 * x - 0.2).tanh();
        let o = sg(0.4 * x + 0.3);
        let want = o * (i * g).tanh(); // c0 = 0, so the forget path drops out
        assert!((tape.data(h)[0] as f64 - want).abs() < 1e-6);
    }

    #[test]
    fn lstm_zero_weights_give_zero_outputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let cell = LstmCell::new(&mut store, "c", 2, 3, &mut rng).unwrap();
        store.value_mut(cell.w).data.fill(0.0);
        store.value_mut(cell.b).data.fill(0.0);
        let mut tape = Tape::new(GradMode::NoGrad);
        let binds = store.bind(&mut tape);
        let x = tape.leaf(randn(vec![4, 2], 21));
        let h = cell.forward_seq(&mut tape, &binds, x).unwrap();
        assert!(tape.data(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_rejects_empty_sequences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let cell = LstmCell::new(&mut store, "c", 2, 3, &mut rng).unwrap();
        let mut tape = Tape::new(GradMode::NoGrad);
        let binds = store.bind(&mut tape);
        let empty = tape.leaf(Tensor { shape: vec![0, 2], data: vec![] });
        assert!(matches!(
            cell.forward_seq(&mut tape, &binds, empty),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn conv_one_by_one_identity_kernel() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let conv = Conv2d::new(&mut store, "c", 1, 1, (1, 1), 1, &mut rng).unwrap();
        store.value_mut(conv.w).data.copy_from_slice(&[1.0]);
        let img = randn(vec![1, 5, 4], 24);
        let mut tape = Tape::new(GradMode::NoGrad);
        let binds = store.bind(&mut tape);
        let x = tape.leaf(img.clone());
        let y = conv.forward(&mut tape, &binds, x).unwrap();
        assert_eq!(tape.data(y), &img.data[..]);
    }

    #[test]
    fn conv_matches_quadruple_loop_oracle() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let conv = Conv2d::new(&mut store, "c", 2, 3, (3, 3), 1, &mut rng).unwrap();
        let img = randn(vec![2, 5, 5], 26);

        let mut tape = Tape::new(GradMode::NoGrad);
        let binds = store.bind(&mut tape);
        let x = tape.leaf(img.clone());
        let y = conv.forward(&mut tape, &binds, x).unwrap();
        assert_eq!(tape.shape(y), &[3, 3, 3]);

        let w = &store.value(conv.w).data;
        let b = &store.value(conv.b).data;
        for f in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b[f] as f64;
                    for c in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iv = img.data[c * 25 + (oy + ky) * 5 + (ox + kx)] as f64;
                                let wv = w[((f * 2 + c) * 3 + ky) * 3 + kx] as f64;
                                acc += iv * wv;
                            }
                        }
                    }
                    let got = tape.data(y)[(f * 3 + oy) * 3 + ox] as f64;
                    assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn maxpool_two_by_two() {
        let mut tape = Tape::new(GradMode::NoGrad);
        let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let p = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.data(p), &[4.0]);
    }

    #[test]
    fn conv_out_size_matches_tape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let conv = Conv2d::new(&mut store, "c", 1, 8, (16, 16), 1, &mut rng).unwrap();
        assert_eq!(conv.out_size(256, 188).unwrap(), (241, 173));
        assert!(conv.out_size(10, 10).is_err());
        assert_eq!(MaxPool2d::new((2, 3)).out_size(241, 173), (120, 57));
    }

    #[test]
    fn lstm_attention_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cell = LstmCell::new(&mut store, "c", 3, 4, &mut rng).unwrap();
        let attn = SelfAttention::new(&mut store, "a", 4, &mut rng).unwrap();
        let x = randn(vec![4, 3], 8);

        let build = |s: &ParamStore, tape: &mut Tape| -> Result<(Bindings, TensorId)> {
            let binds = s.bind(tape);
            let xid = tape.leaf(x.clone());
            let h = cell.forward_seq(tape, &binds, xid)?;
            let pooled = attn.pool(tape, &binds, h, PoolMode::FinalQuery)?;
            let loss = tape.sum(pooled);
            Ok((binds, loss))
        };

        let coords = choose_coords(&store, 40, &mut ChaCha8Rng::seed_from_u64(9));
        let report = check_gradients(
            &mut store,
            &mut |s| {
                let mut tape = Tape::new(GradMode::Record);
                let (binds, loss) = build(s, &mut tape)?;
                tape.backward(loss)?;
                Ok(binds.grads(&tape))
            },
            &mut |s| {
                let mut tape = Tape::new(GradMode::NoGrad);
                let (_, loss) = build(s, &mut tape)?;
                Ok(tape.data(loss)[0] as f64)
            },
            &coords,
            1e-2,
        )
        .unwrap();
        assert!(report.passed(), "worst {:?}", report.worst);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn attention_weights_always_a_distribution(
            t in 1usize..6,
            d in 1usize..6,
            seed in proptest::prelude::any::<u64>(),
            scale in 0.1f32..8.0,
        ) {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let attn = SelfAttention::new(&mut store, "a", d, &mut rng).unwrap();
            let mut h = randn(vec![t, d], seed ^ 0xabcd);
            for v in &mut h.data {
                *v *= scale;
            }
            let mut tape = Tape::new(GradMode::NoGrad);
            let binds = store.bind(&mut tape);
            let hid = tape.leaf(h);
            let w = attn.weights(&mut tape, &binds, hid).unwrap();
            let wv = tape.data(w);
            proptest::prop_assert!(wv.iter().all(|&x| (0.0..=1.0).contains(&x)));
            let sum: f64 = wv.iter().map(|&x| x as f64).sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-6, "sum {}", sum);
        }
    }
}

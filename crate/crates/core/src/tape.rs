//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Tensors live in an arena owned by the [`Tape`]; ops reference them by
//! [`TensorId`]. The forward methods validate shapes, compute the result
//! eagerly, and record a backward rule whenever the output needs a gradient.
//! [`Tape::backward`] replays the recorded ops in reverse, accumulating
//! gradients into each tensor's `grad` buffer.
//!
//! A tape and its tensors form a single-threaded unit of work; independent
//! tapes may run concurrently. No operation ever mutates an input buffer.

use crate::error::{Error, Result};
use crate::kernels as k;

/// Index of a tensor in its tape's arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// A dense f32 tensor, row-major.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

#[derive(Debug, Clone)]
enum Op {
    Add { a: TensorId, b: TensorId, out: TensorId },
    Sub { a: TensorId, b: TensorId, out: TensorId },
    Mul { a: TensorId, b: TensorId, out: TensorId },
    Scale { x: TensorId, c: f32, out: TensorId },
    Shift { x: TensorId, out: TensorId },
    MatMul { a: TensorId, b: TensorId, out: TensorId, m: usize, k: usize, n: usize },
    AddRowBias { x: TensorId, b: TensorId, out: TensorId, rows: usize, cols: usize },
    Relu { x: TensorId, out: TensorId },
    Sigmoid { x: TensorId, out: TensorId },
    HardSwish { x: TensorId, out: TensorId },
    LogGuarded { x: TensorId, out: TensorId },
    SoftmaxT { x: TensorId, out: TensorId, rows: usize, cols: usize, tau: f32 },
    Sum { x: TensorId, out: TensorId },
    SmoothL1Sum { x: TensorId, out: TensorId },
    Conv2d {
        x: TensorId, w: TensorId, bias: Option<TensorId>, out: TensorId,
        n: usize, ci: usize, h: usize, wd: usize, co: usize, kh: usize, kw: usize, stride: usize,
    },
    DwConv2d {
        x: TensorId, w: TensorId, out: TensorId,
        n: usize, ch: usize, h: usize, wd: usize, kh: usize, kw: usize, stride: usize,
    },
    BnTrain {
        x: TensorId, gamma: TensorId, beta: TensorId, out: TensorId,
        n: usize, c: usize, hw: usize, mean: Vec<f32>, var: Vec<f32>, eps: f32,
    },
    BnEval {
        x: TensorId, gamma: TensorId, beta: TensorId, out: TensorId,
        n: usize, c: usize, hw: usize, rmean: Vec<f32>, rvar: Vec<f32>, eps: f32,
    },
    GlobalAvgPool { x: TensorId, out: TensorId, n: usize, c: usize, hw: usize },
    GlobalMaxPool { x: TensorId, out: TensorId, n: usize, c: usize, hw: usize, argmax: Vec<u32> },
    ChannelMean { x: TensorId, out: TensorId, n: usize, c: usize, hw: usize },
    ChannelMax { x: TensorId, out: TensorId, n: usize, c: usize, hw: usize, argmax: Vec<u32> },
    MaxPool2x { x: TensorId, out: TensorId, argmax: Vec<u32> },
    UpsampleNearest { x: TensorId, out: TensorId, n: usize, c: usize, h: usize, wd: usize, ho: usize, wo: usize },
    Concat { xs: Vec<TensorId>, out: TensorId, axis: usize },
    Permute { x: TensorId, out: TensorId, perm: Vec<usize> },
    Reshape { x: TensorId, out: TensorId },
    SelectRows { x: TensorId, out: TensorId, indices: Vec<usize>, cols: usize },
    MulChannel { x: TensorId, s: TensorId, out: TensorId, n: usize, c: usize, hw: usize },
    MulSpatial { x: TensorId, s: TensorId, out: TensorId, n: usize, c: usize, hw: usize },
    MulScalarT { x: TensorId, s: TensorId, out: TensorId },
    DivScalarT { x: TensorId, s: TensorId, out: TensorId },
    DecodeBoxes { t: TensorId, out: TensorId, anchors: Vec<f32>, bounds: [f32; 4] },
}

/// Wengert tape plus tensor arena.
pub struct Tape {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
    recording: bool,
    strict: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { tensors: Vec::new(), ops: Vec::new(), recording: true, strict: false }
    }

    /// A tape that records nothing: pure forward evaluation (inference).
    pub fn inference() -> Self {
        Tape { tensors: Vec::new(), ops: Vec::new(), recording: false, strict: false }
    }

    /// Validate input finiteness on every op (slow; used by tests and gradcheck).
    pub fn strict(mut self) -> Self {
        self.strict = true;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    // ── tensor management ───────────────────────────────────────────

    fn push_tensor(&mut self, data: Vec<f32>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        debug_assert_eq!(numel_of(&shape), data.len());
        let id = TensorId(self.tensors.len());
        self.tensors.push(Tensor { shape, data, requires_grad, grad: None });
        id
    }

    /// A constant leaf (no gradient).
    pub fn leaf(&mut self, data: Vec<f32>, shape: Vec<usize>) -> Result<TensorId> {
        if numel_of(&shape) != data.len() {
            return Err(Error::invalid("leaf", format!("shape {:?} does not match {} elements", shape, data.len())));
        }
        if !k::all_finite(&data) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push_tensor(data, shape, false))
    }

    /// A parameter leaf (gradient tracked).
    pub fn param(&mut self, data: Vec<f32>, shape: Vec<usize>) -> Result<TensorId> {
        if numel_of(&shape) != data.len() {
            return Err(Error::invalid("param", format!("shape {:?} does not match {} elements", shape, data.len())));
        }
        if !k::all_finite(&data) {
            return Err(Error::NonFinite { op: "param" });
        }
        Ok(self.push_tensor(data, shape, self.recording))
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        let n = numel_of(&shape);
        self.push_tensor(vec![0.0; n], shape, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.tensors[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.tensors[id.0].numel()
    }

    fn check_inputs(&self, op: &'static str, ids: &[TensorId]) -> Result<()> {
        if self.strict {
            for id in ids {
                if !k::all_finite(&self.tensors[id.0].data) {
                    return Err(Error::NonFinite { op });
                }
            }
        }
        Ok(())
    }

    fn out_of(&mut self, data: Vec<f32>, shape: Vec<usize>, inputs: &[TensorId], op: impl FnOnce(TensorId) -> Op) -> TensorId {
        let rg = self.recording && inputs.iter().any(|i| self.tensors[i.0].requires_grad);
        let out = self.push_tensor(data, shape, rg);
        if rg {
            let o = op(out);
            self.ops.push(o);
        }
        out
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.tensors[a.0].shape != self.tensors[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.tensors[a.0].shape.clone(),
                rhs: self.tensors[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    // ── elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        self.check_inputs("add", &[a, b])?;
        let data: Vec<f32> = self.tensors[a.0].data.iter().zip(&self.tensors[b.0].data).map(|(x, y)| x + y).collect();
        let shape = self.tensors[a.0].shape.clone();
        Ok(self.out_of(data, shape, &[a, b], |out| Op::Add { a, b, out }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        self.check_inputs("sub", &[a, b])?;
        let data: Vec<f32> = self.tensors[a.0].data.iter().zip(&self.tensors[b.0].data).map(|(x, y)| x - y).collect();
        let shape = self.tensors[a.0].shape.clone();
        Ok(self.out_of(data, shape, &[a, b], |out| Op::Sub { a, b, out }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        self.check_inputs("mul", &[a, b])?;
        let data: Vec<f32> = self.tensors[a.0].data.iter().zip(&self.tensors[b.0].data).map(|(x, y)| x * y).collect();
        let shape = self.tensors[a.0].shape.clone();
        Ok(self.out_of(data, shape, &[a, b], |out| Op::Mul { a, b, out }))
    }

    /// y = c * x for a compile-time constant c.
    pub fn scale(&mut self, x: TensorId, c: f32) -> Result<TensorId> {
        self.check_inputs("scale", &[x])?;
        let data: Vec<f32> = self.tensors[x.0].data.iter().map(|v| c * v).collect();
        let shape = self.tensors[x.0].shape.clone();
        Ok(self.out_of(data, shape, &[x], |out| Op::Scale { x, c, out }))
    }

    /// y = x + c for a constant c.
    pub fn shift(&mut self, x: TensorId, c: f32) -> Result<TensorId> {
        self.check_inputs("shift", &[x])?;
        let data: Vec<f32> = self.tensors[x.0].data.iter().map(|v| v + c).collect();
        let shape = self.tensors[x.0].shape.clone();
        Ok(self.out_of(data, shape, &[x], |out| Op::Shift { x, out }))
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_inputs("relu", &[x])?;
        let data: Vec<f32> = self.tensors[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.tensors[x.0].shape.clone();
        Ok(self.out_of(data, shape, &[x], |out| Op::Relu { x, out }))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_inputs("sigmoid", &[x])?;
        let data: Vec<f32> = self.tensors[x.0].data.iter().map(|&v| k::sigmoid(v)).collect();
        let shape = self.tensors[x.0].shape.clone();
        Ok(self.out_of(data, shape, &[x], |out| Op::Sigmoid { x, out }))
    }

    pub fn hard_swish(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_inputs("hard_swish", &[x])?;
        let data: Vec<f32> = self.tensors[x.0].data.iter().map(|&v| k::hard_swish(v)).collect();
        let shape = self.tensors[x.0].shape.clone();
        Ok(self.out_of(data, shape, &[x], |out| Op::HardSwish { x, out }))
    }

    /// y = ln(x + 1e-12); the guard keeps softmax outputs in-domain.
    pub fn log_guarded(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_inputs("log", &[x])?;
        let data: Vec<f32> = self.tensors[x.0].data.iter().map(|&v| k::log_guarded(v)).collect();
        let shape = self.tensors[x.0].shape.clone();
        Ok(self.out_of(data, shape, &[x], |out| Op::LogGuarded { x, out }))
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.tensors[a.0].shape, &self.tensors[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() });
        }
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        self.check_inputs("matmul", &[a, b])?;
        let data = k::matmul(&self.tensors[a.0].data, &self.tensors[b.0].data, m, kk, n);
        Ok(self.out_of(data, vec![m, n], &[a, b], |out| Op::MatMul { a, b, out, m, k: kk, n }))
    }

    /// y[r, c] = x[r, c] + bias[c] for 2-D x.
    pub fn add_row_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sx, sb) = (&self.tensors[x.0].shape, &self.tensors[bias.0].shape);
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::ShapeMismatch { op: "add_row_bias", lhs: sx.clone(), rhs: sb.clone() });
        }
        let (rows, cols) = (sx[0], sx[1]);
        self.check_inputs("add_row_bias", &[x, bias])?;
        let bd = self.tensors[bias.0].data.clone();
        let data: Vec<f32> = self.tensors[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % cols])
            .collect();
        Ok(self.out_of(data, vec![rows, cols], &[x, bias], |out| Op::AddRowBias { x, b: bias, out, rows, cols }))
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Full reduction to a scalar (shape [1]).
    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_inputs("sum", &[x])?;
        let s = k::sum(&self.tensors[x.0].data);
        Ok(self.out_of(vec![s], vec![1], &[x], |out| Op::Sum { x, out }))
    }

    /// Mean over all elements.
    pub fn mean(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.tensors[x.0].numel() as f32;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum of elementwise smooth-L1.
    pub fn smooth_l1_sum(&mut self, x: TensorId) -> Result<TensorId> {
        self.check_inputs("smooth_l1_sum", &[x])?;
        let mut s = 0.0f32;
        for &v in &self.tensors[x.0].data {
            s += k::smooth_l1(v);
        }
        Ok(self.out_of(vec![s], vec![1], &[x], |out| Op::SmoothL1Sum { x, out }))
    }

    /// Row-wise softmax(x / tau) for 2-D x.
    pub fn softmax_t(&mut self, x: TensorId, tau: f32) -> Result<TensorId> {
        if tau <= 0.0 {
            return Err(Error::invalid("softmax_t", format!("temperature must be positive, got {tau}")));
        }
        let sx = &self.tensors[x.0].shape;
        if sx.len() != 2 {
            return Err(Error::invalid("softmax_t", format!("expected 2-D logits, got {sx:?}")));
        }
        let (rows, cols) = (sx[0], sx[1]);
        self.check_inputs("softmax_t", &[x])?;
        let data = k::softmax_rows(&self.tensors[x.0].data, rows, cols, tau);
        Ok(self.out_of(data, vec![rows, cols], &[x], |out| Op::SoftmaxT { x, out, rows, cols, tau }))
    }

    // ── convolutions & norm ─────────────────────────────────────────

    /// 2-D convolution, 'same' padding. x: [n, ci, h, w]; w: [co, ci, kh, kw].
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, bias: Option<TensorId>, stride: usize) -> Result<TensorId> {
        let (sx, sw) = (self.tensors[x.0].shape.clone(), self.tensors[w.0].shape.clone());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::ShapeMismatch { op: "conv2d", lhs: sx, rhs: sw });
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel sizes must be odd for same padding, got {:?}", &sw[2..])));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid("conv2d", format!("stride must be 1 or 2, got {stride}")));
        }
        let (n, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        if let Some(b) = bias {
            let sb = &self.tensors[b.0].shape;
            if sb.as_slice() != [co] {
                return Err(Error::ShapeMismatch { op: "conv2d bias", lhs: sb.clone(), rhs: vec![co] });
            }
        }
        let mut ids = vec![x, w];
        if let Some(b) = bias {
            ids.push(b);
        }
        self.check_inputs("conv2d", &ids)?;
        let data = k::conv2d_forward(
            &self.tensors[x.0].data,
            &self.tensors[w.0].data,
            bias.map(|b| self.tensors[b.0].data.as_slice()),
            n, ci, h, wd, co, kh, kw, stride,
        );
        let (ho, wo) = (k::conv_out_size(h, stride), k::conv_out_size(wd, stride));
        Ok(self.out_of(data, vec![n, co, ho, wo], &ids, |out| Op::Conv2d {
            x, w, bias, out, n, ci, h, wd, co, kh, kw, stride,
        }))
    }

    /// Depthwise convolution, 'same' padding. x: [n, c, h, w]; w: [c, kh, kw].
    pub fn dwconv2d(&mut self, x: TensorId, w: TensorId, stride: usize) -> Result<TensorId> {
        let (sx, sw) = (self.tensors[x.0].shape.clone(), self.tensors[w.0].shape.clone());
        if sx.len() != 4 || sw.len() != 3 || sx[1] != sw[0] {
            return Err(Error::ShapeMismatch { op: "dwconv2d", lhs: sx, rhs: sw });
        }
        if stride != 1 && stride != 2 {
            return Err(Error::invalid("dwconv2d", format!("stride must be 1 or 2, got {stride}")));
        }
        let (n, ch, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (kh, kw) = (sw[1], sw[2]);
        self.check_inputs("dwconv2d", &[x, w])?;
        let data = k::dwconv2d_forward(&self.tensors[x.0].data, &self.tensors[w.0].data, n, ch, h, wd, kh, kw, stride);
        let (ho, wo) = (k::conv_out_size(h, stride), k::conv_out_size(wd, stride));
        Ok(self.out_of(data, vec![n, ch, ho, wo], &[x, w], |out| Op::DwConv2d {
            x, w, out, n, ch, h, wd, kh, kw, stride,
        }))
    }

    /// Batch norm over (n, h, w) per channel using batch statistics.
    /// Returns the output plus the batch mean/var so the caller can update
    /// running averages.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f32,
    ) -> Result<(TensorId, Vec<f32>, Vec<f32>)> {
        let sx = self.tensors[x.0].shape.clone();
        if sx.len() != 4 {
            return Err(Error::invalid("batch_norm", format!("expected 4-D input, got {sx:?}")));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        self.bn_param_check(c, gamma, beta)?;
        self.check_inputs("batch_norm_train", &[x, gamma, beta])?;
        let xd = &self.tensors[x.0].data;
        let m = (n * hw) as f32;
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                mean[ci] += k::sum(&xd[base..base + hw]);
            }
        }
        for v in mean.iter_mut() {
            *v /= m;
        }
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let mu = mean[ci];
                for &v in &xd[base..base + hw] {
                    let d = v - mu;
                    var[ci] += d * d;
                }
            }
        }
        for v in var.iter_mut() {
            *v /= m;
        }
        let g = &self.tensors[gamma.0].data;
        let b = &self.tensors[beta.0].data;
        let mut data = vec![0.0f32; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let (gc, bc, mu) = (g[ci], b[ci], mean[ci]);
                for i in 0..hw {
                    data[base + i] = gc * (xd[base + i] - mu) * inv + bc;
                }
            }
        }
        let (mean_c, var_c) = (mean.clone(), var.clone());
        let out = self.out_of(data, sx, &[x, gamma, beta], |out| Op::BnTrain {
            x, gamma, beta, out, n, c, hw, mean, var, eps,
        });
        Ok((out, mean_c, var_c))
    }

    /// Batch norm using fixed running statistics (eval mode).
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        rmean: &[f32],
        rvar: &[f32],
        eps: f32,
    ) -> Result<TensorId> {
        let sx = self.tensors[x.0].shape.clone();
        if sx.len() != 4 {
            return Err(Error::invalid("batch_norm", format!("expected 4-D input, got {sx:?}")));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        self.bn_param_check(c, gamma, beta)?;
        if rmean.len() != c || rvar.len() != c {
            return Err(Error::invalid("batch_norm_eval", format!("running stats length {} != channels {c}", rmean.len())));
        }
        self.check_inputs("batch_norm_eval", &[x, gamma, beta])?;
        let xd = &self.tensors[x.0].data;
        let g = &self.tensors[gamma.0].data;
        let b = &self.tensors[beta.0].data;
        let mut data = vec![0.0f32; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let inv = 1.0 / (rvar[ci] + eps).sqrt();
                let (gc, bc, mu) = (g[ci], b[ci], rmean[ci]);
                for i in 0..hw {
                    data[base + i] = gc * (xd[base + i] - mu) * inv + bc;
                }
            }
        }
        let (rm, rv) = (rmean.to_vec(), rvar.to_vec());
        Ok(self.out_of(data, sx, &[x, gamma, beta], |out| Op::BnEval {
            x, gamma, beta, out, n, c, hw, rmean: rm, rvar: rv, eps,
        }))
    }

    fn bn_param_check(&self, c: usize, gamma: TensorId, beta: TensorId) -> Result<()> {
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = &self.tensors[id.0].shape;
            if s.as_slice() != [c] {
                return Err(Error::invalid("batch_norm", format!("{name} shape {s:?} does not match {c} channels")));
            }
        }
        Ok(())
    }

    // ── pooling / resampling ────────────────────────────────────────

    /// [n, c, h, w] -> [n, c] spatial mean.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.tensors[x.0].shape.clone();
        if sx.len() != 4 {
            return Err(Error::invalid("global_avg_pool", format!("expected 4-D input, got {sx:?}")));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        self.check_inputs("global_avg_pool", &[x])?;
        let xd = &self.tensors[x.0].data;
        let mut data = vec![0.0f32; n * c];
        for (i, o) in data.iter_mut().enumerate() {
            *o = k::sum(&xd[i * hw..(i + 1) * hw]) / hw as f32;
        }
        Ok(self.out_of(data, vec![n, c], &[x], |out| Op::GlobalAvgPool { x, out, n, c, hw }))
    }

    /// [n, c, h, w] -> [n, c] spatial max (first index wins ties).
    pub fn global_max_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.tensors[x.0].shape.clone();
        if sx.len() != 4 {
            return Err(Error::invalid("global_max_pool", format!("expected 4-D input, got {sx:?}")));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        self.check_inputs("global_max_pool", &[x])?;
        let xd = &self.tensors[x.0].data;
        let mut data = vec![0.0f32; n * c];
        let mut argmax = vec![0u32; n * c];
        for i in 0..n * c {
            let slice = &xd[i * hw..(i + 1) * hw];
            let (mut bi, mut bv) = (0usize, slice[0]);
            for (j, &v) in slice.iter().enumerate().skip(1) {
                if v > bv {
                    bv = v;
                    bi = j;
                }
            }
            data[i] = bv;
            argmax[i] = bi as u32;
        }
        Ok(self.out_of(data, vec![n, c], &[x], |out| Op::GlobalMaxPool { x, out, n, c, hw, argmax }))
    }

    /// [n, c, h, w] -> [n, 1, h, w] mean over channels.
    pub fn channel_mean(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.tensors[x.0].shape.clone();
        if sx.len() != 4 {
            return Err(Error::invalid("channel_mean", format!("expected 4-D input, got {sx:?}")));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        self.check_inputs("channel_mean", &[x])?;
        let xd = &self.tensors[x.0].data;
        let mut data = vec![0.0f32; n * hw];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    data[ni * hw + i] += xd[base + i];
                }
            }
        }
        for v in data.iter_mut() {
            *v /= c as f32;
        }
        Ok(self.out_of(data, vec![n, 1, sx[2], sx[3]], &[x], |out| Op::ChannelMean { x, out, n, c, hw }))
    }

    /// [n, c, h, w] -> [n, 1, h, w] max over channels (lowest channel wins ties).
    pub fn channel_max(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.tensors[x.0].shape.clone();
        if sx.len() != 4 {
            return Err(Error::invalid("channel_max", format!("expected 4-D input, got {sx:?}")));
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        self.check_inputs("channel_max", &[x])?;
        let xd = &self.tensors[x.0].data;
        let mut data = vec![f32::NEG_INFINITY; n * hw];
        let mut argmax = vec![0u32; n * hw];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    let v = xd[base + i];
                    if v > data[ni * hw + i] {
                        data[ni * hw + i] = v;
                        argmax[ni * hw + i] = ci as u32;
                    }
                }
            }
        }
        Ok(self.out_of(data, vec![n, 1, sx[2], sx[3]], &[x], |out| Op::ChannelMax { x, out, n, c, hw, argmax }))
    }

    /// 2x2 max pool with stride 2; odd edges use the clipped window.
    pub fn max_pool_2x(&mut self, x: TensorId) -> Result<TensorId> {
        let sx = self.tensors[x.0].shape.clone();
        if sx.len() != 4 {
            return Err(Error::invalid("max_pool_2x", format!("expected 4-D input, got {sx:?}")));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (ho, wo) = (h.div_ceil(2), wd.div_ceil(2));
        self.check_inputs("max_pool_2x", &[x])?;
        let xd = &self.tensors[x.0].data;
        let mut data = vec![0.0f32; n * c * ho * wo];
        let mut argmax = vec![0u32; n * c * ho * wo];
        for p in 0..n * c {
            let xbase = p * h * wd;
            let obase = p * ho * wo;
            for oh in 0..ho {
                for ow in 0..wo {
                    let (mut bv, mut bi) = (f32::NEG_INFINITY, 0usize);
                    for dh in 0..2usize.min(h - oh * 2) {
                        for dw in 0..2usize.min(wd - ow * 2) {
                            let idx = (oh * 2 + dh) * wd + (ow * 2 + dw);
                            if xd[xbase + idx] > bv {
                                bv = xd[xbase + idx];
                                bi = idx;
                            }
                        }
                    }
                    data[obase + oh * wo + ow] = bv;
                    argmax[obase + oh * wo + ow] = bi as u32;
                }
            }
        }
        Ok(self.out_of(data, vec![n, c, ho, wo], &[x], |out| Op::MaxPool2x { x, out, argmax }))
    }

    /// Nearest-neighbour upsample to an explicit (ho, wo), ho <= 2h, wo <= 2w.
    pub fn upsample_nearest(&mut self, x: TensorId, ho: usize, wo: usize) -> Result<TensorId> {
        let sx = self.tensors[x.0].shape.clone();
        if sx.len() != 4 {
            return Err(Error::invalid("upsample_nearest", format!("expected 4-D input, got {sx:?}")));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        if ho > 2 * h || wo > 2 * wd || ho < h || wo < wd {
            return Err(Error::invalid("upsample_nearest", format!("target {ho}x{wo} not reachable from {h}x{wd} by 2x nearest")));
        }
        self.check_inputs("upsample_nearest", &[x])?;
        let xd = &self.tensors[x.0].data;
        let mut data = vec![0.0f32; n * c * ho * wo];
        for p in 0..n * c {
            let xbase = p * h * wd;
            let obase = p * ho * wo;
            for oh in 0..ho {
                let ih = (oh / 2).min(h - 1);
                for ow in 0..wo {
                    let iw = (ow / 2).min(wd - 1);
                    data[obase + oh * wo + ow] = xd[xbase + ih * wd + iw];
                }
            }
        }
        Ok(self.out_of(data, vec![n, c, ho, wo], &[x], |out| Op::UpsampleNearest { x, out, n, c, h, wd, ho, wo }))
    }

    // ── data movement ───────────────────────────────────────────────

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.tensors[xs[0].0].shape.clone();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut cat_dim = 0usize;
        for id in xs {
            let s = &self.tensors[id.0].shape;
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::ShapeMismatch { op: "concat", lhs: first.clone(), rhs: s.clone() });
            }
            cat_dim += s[axis];
        }
        self.check_inputs("concat", xs)?;
        let mut out_shape = first.clone();
        out_shape[axis] = cat_dim;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0f32; numel_of(&out_shape)];
        let row = cat_dim * inner;
        let mut off = 0usize;
        for id in xs {
            let s_ax = self.tensors[id.0].shape[axis];
            let chunk = s_ax * inner;
            let xd = &self.tensors[id.0].data;
            for o in 0..outer {
                data[o * row + off..o * row + off + chunk].copy_from_slice(&xd[o * chunk..(o + 1) * chunk]);
            }
            off += chunk;
        }
        let xs_v = xs.to_vec();
        Ok(self.out_of(data, out_shape, xs, |out| Op::Concat { xs: xs_v, out, axis }))
    }

    /// Permute dimensions; `perm[i]` gives the source axis of output axis i.
    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let sx = self.tensors[x.0].shape.clone();
        if perm.len() != sx.len() || {
            let mut p = perm.to_vec();
            p.sort_unstable();
            p.iter().enumerate().any(|(i, &v)| i != v)
        } {
            return Err(Error::invalid("permute", format!("invalid permutation {perm:?} for shape {sx:?}")));
        }
        self.check_inputs("permute", &[x])?;
        let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let data = permute_data(&self.tensors[x.0].data, &sx, perm);
        let perm_v = perm.to_vec();
        Ok(self.out_of(data, out_shape, &[x], |out| Op::Permute { x, out, perm: perm_v }))
    }

    /// Reinterpret the shape; element count must match.
    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel_of(&shape) != self.tensors[x.0].numel() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: self.tensors[x.0].shape.clone(), rhs: shape });
        }
        let data = self.tensors[x.0].data.clone();
        Ok(self.out_of(data, shape, &[x], |out| Op::Reshape { x, out }))
    }

    /// Gather rows of a 2-D tensor.
    pub fn select_rows(&mut self, x: TensorId, indices: &[usize]) -> Result<TensorId> {
        let sx = self.tensors[x.0].shape.clone();
        if sx.len() != 2 {
            return Err(Error::invalid("select_rows", format!("expected 2-D input, got {sx:?}")));
        }
        let cols = sx[1];
        if let Some(&bad) = indices.iter().find(|&&i| i >= sx[0]) {
            return Err(Error::invalid("select_rows", format!("row index {bad} out of range {}", sx[0])));
        }
        self.check_inputs("select_rows", &[x])?;
        let xd = &self.tensors[x.0].data;
        let mut data = vec![0.0f32; indices.len() * cols];
        for (r, &i) in indices.iter().enumerate() {
            data[r * cols..(r + 1) * cols].copy_from_slice(&xd[i * cols..(i + 1) * cols]);
        }
        let idx = indices.to_vec();
        Ok(self.out_of(data, vec![indices.len(), cols], &[x], |out| Op::SelectRows { x, out, indices: idx, cols }))
    }

    // ── broadcast products ──────────────────────────────────────────

    /// x: [n, c, h, w] scaled per (n, c) by s: [n, c].
    pub fn mul_channel(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let sx = self.tensors[x.0].shape.clone();
        let ss = self.tensors[s.0].shape.clone();
        if sx.len() != 4 || ss.as_slice() != [sx[0], sx[1]] {
            return Err(Error::ShapeMismatch { op: "mul_channel", lhs: sx, rhs: ss });
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        self.check_inputs("mul_channel", &[x, s])?;
        let xd = &self.tensors[x.0].data;
        let sd = &self.tensors[s.0].data;
        let mut data = vec![0.0f32; xd.len()];
        for p in 0..n * c {
            let g = sd[p];
            for i in 0..hw {
                data[p * hw + i] = xd[p * hw + i] * g;
            }
        }
        Ok(self.out_of(data, sx, &[x, s], |out| Op::MulChannel { x, s, out, n, c, hw }))
    }

    /// x: [n, c, h, w] scaled per (n, h, w) by s: [n, 1, h, w].
    pub fn mul_spatial(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let sx = self.tensors[x.0].shape.clone();
        let ss = self.tensors[s.0].shape.clone();
        if sx.len() != 4 || ss.as_slice() != [sx[0], 1, sx[2], sx[3]] {
            return Err(Error::ShapeMismatch { op: "mul_spatial", lhs: sx, rhs: ss });
        }
        let (n, c, hw) = (sx[0], sx[1], sx[2] * sx[3]);
        self.check_inputs("mul_spatial", &[x, s])?;
        let xd = &self.tensors[x.0].data;
        let sd = &self.tensors[s.0].data;
        let mut data = vec![0.0f32; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for i in 0..hw {
                    data[base + i] = xd[base + i] * sd[ni * hw + i];
                }
            }
        }
        Ok(self.out_of(data, sx, &[x, s], |out| Op::MulSpatial { x, s, out, n, c, hw }))
    }

    /// Multiply every element by a shape-[1] tensor.
    pub fn mul_scalar_t(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.tensors[s.0].numel() != 1 {
            return Err(Error::invalid("mul_scalar_t", format!("scalar operand has shape {:?}", self.tensors[s.0].shape)));
        }
        self.check_inputs("mul_scalar_t", &[x, s])?;
        let sv = self.tensors[s.0].data[0];
        let data: Vec<f32> = self.tensors[x.0].data.iter().map(|v| v * sv).collect();
        let shape = self.tensors[x.0].shape.clone();
        Ok(self.out_of(data, shape, &[x, s], |out| Op::MulScalarT { x, s, out }))
    }

    /// Divide every element by a shape-[1] tensor.
    pub fn div_scalar_t(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        if self.tensors[s.0].numel() != 1 {
            return Err(Error::invalid("div_scalar_t", format!("scalar operand has shape {:?}", self.tensors[s.0].shape)));
        }
        self.check_inputs("div_scalar_t", &[x, s])?;
        let sv = self.tensors[s.0].data[0];
        if sv == 0.0 {
            return Err(Error::invalid("div_scalar_t", "division by zero"));
        }
        let data: Vec<f32> = self.tensors[x.0].data.iter().map(|v| v / sv).collect();
        let shape = self.tensors[x.0].shape.clone();
        Ok(self.out_of(data, shape, &[x, s], |out| Op::DivScalarT { x, s, out }))
    }

    /// Anchor-relative box decode with exp clamping and bound clipping.
    ///
    /// t: [k, 4] offsets, anchors: [k, 4] as (x, y, w, h) top-left form.
    /// out = (xa + tx*wa, ya + ty*ha, wa*exp(tw), ha*exp(th)), tw/th clamped
    /// to [-4, 4], the result clipped to [0,W]x[0,H]x[0,Wmax]x[0,Hmax].
    pub fn decode_boxes(&mut self, t: TensorId, anchors: &[f32], bounds: [f32; 4]) -> Result<TensorId> {
        let st = self.tensors[t.0].shape.clone();
        if st.len() != 2 || st[1] != 4 {
            return Err(Error::invalid("decode_boxes", format!("expected [k,4] offsets, got {st:?}")));
        }
        if anchors.len() != st[0] * 4 {
            return Err(Error::ShapeMismatch { op: "decode_boxes", lhs: st, rhs: vec![anchors.len() / 4, 4] });
        }
        self.check_inputs("decode_boxes", &[t])?;
        let td = &self.tensors[t.0].data;
        let data = decode_boxes_raw(td, anchors, bounds);
        let anchors_v = anchors.to_vec();
        Ok(self.out_of(data, st, &[t], |out| Op::DecodeBoxes { t, out, anchors: anchors_v, bounds }))
    }

    // ── backward ────────────────────────────────────────────────────

    fn accum(&mut self, id: TensorId, grad: &[f32]) {
        if !self.tensors[id.0].requires_grad {
            return;
        }
        let t = &mut self.tensors[id.0];
        match &mut t.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => t.grad = Some(grad.to_vec()),
        }
    }

    /// Move an op output's gradient out of the arena. Each op output is
    /// produced exactly once and consumed exactly once (by its producer's
    /// backward), so no clone is needed.
    fn take_out_grad(&mut self, id: TensorId) -> Option<Vec<f32>> {
        self.tensors[id.0].grad.take()
    }

    /// Run the backward pass from a scalar loss. Every recorded op is visited
    /// exactly once, in reverse order.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensors[loss.0].numel() != 1 {
            return Err(Error::invalid("backward", format!("loss must be scalar, got shape {:?}", self.tensors[loss.0].shape)));
        }
        if !self.tensors[loss.0].data[0].is_finite() {
            return Err(Error::NonFinite { op: "backward(loss)" });
        }
        self.tensors[loss.0].grad = Some(vec![1.0]);
        let ops = std::mem::take(&mut self.ops);
        for op in ops.iter().rev() {
            self.backward_op(op);
        }
        self.ops = ops;
        // d(loss)/d(loss) stays visible after its producing op consumed it
        self.tensors[loss.0].grad = Some(vec![1.0]);
        Ok(())
    }

    fn backward_op(&mut self, op: &Op) {
        match op {
            Op::Add { a, b, out } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    self.accum(*a, &dy);
                    self.accum(*b, &dy);
                }
            }
            Op::Sub { a, b, out } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    self.accum(*a, &dy);
                    let neg: Vec<f32> = dy.iter().map(|v| -v).collect();
                    self.accum(*b, &neg);
                }
            }
            Op::Mul { a, b, out } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let da: Vec<f32> = dy.iter().zip(&self.tensors[b.0].data).map(|(g, v)| g * v).collect();
                    let db: Vec<f32> = dy.iter().zip(&self.tensors[a.0].data).map(|(g, v)| g * v).collect();
                    self.accum(*a, &da);
                    self.accum(*b, &db);
                }
            }
            Op::Scale { x, c, out } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let dx: Vec<f32> = dy.iter().map(|v| c * v).collect();
                    self.accum(*x, &dx);
                }
            }
            Op::Shift { x, out } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    self.accum(*x, &dy);
                }
            }
            Op::MatMul { a, b, out, m, k: kk, n } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let bt = k::transpose(&self.tensors[b.0].data, *kk, *n);
                    let da = k::matmul(&dy, &bt, *m, *n, *kk);
                    self.accum(*a, &da);
                    let at = k::transpose(&self.tensors[a.0].data, *m, *kk);
                    let db = k::matmul(&at, &dy, *kk, *m, *n);
                    self.accum(*b, &db);
                }
            }
            Op::AddRowBias { x, b, out, rows, cols } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    self.accum(*x, &dy);
                    let mut db = vec![0.0f32; *cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            db[c] += dy[r * cols + c];
                        }
                    }
                    self.accum(*b, &db);
                }
            }
            Op::Relu { x, out } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let dx: Vec<f32> = dy.iter().zip(&self.tensors[x.0].data).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                    self.accum(*x, &dx);
                }
            }
            Op::Sigmoid { x, out } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let dx: Vec<f32> = dy.iter().zip(&self.tensors[out.0].data).map(|(g, &y)| g * y * (1.0 - y)).collect();
                    self.accum(*x, &dx);
                }
            }
            Op::HardSwish { x, out } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let dx: Vec<f32> = dy.iter().zip(&self.tensors[x.0].data).map(|(g, &v)| g * k::hard_swish_grad(v)).collect();
                    self.accum(*x, &dx);
                }
            }
            Op::LogGuarded { x, out } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let dx: Vec<f32> = dy.iter().zip(&self.tensors[x.0].data).map(|(g, &v)| g / (v + 1e-12)).collect();
                    self.accum(*x, &dx);
                }
            }
            Op::SoftmaxT { x, out, rows, cols, tau } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let p = &self.tensors[out.0].data;
                    let mut dx = vec![0.0f32; rows * cols];
                    for r in 0..*rows {
                        let pr = &p[r * cols..(r + 1) * cols];
                        let dr = &dy[r * cols..(r + 1) * cols];
                        let dot: f32 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for c in 0..*cols {
                            dx[r * cols + c] = pr[c] * (dr[c] - dot) / tau;
                        }
                    }
                    self.accum(*x, &dx);
                }
            }
            Op::Sum { x, out } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let dx = vec![dy[0]; self.tensors[x.0].numel()];
                    self.accum(*x, &dx);
                }
            }
            Op::SmoothL1Sum { x, out } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let dx: Vec<f32> = self.tensors[x.0].data.iter().map(|&v| dy[0] * k::smooth_l1_grad(v)).collect();
                    self.accum(*x, &dx);
                }
            }
            Op::Conv2d { x, w, bias, out, n, ci, h, wd, co, kh, kw, stride } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    if self.tensors[x.0].requires_grad {
                        let dx = k::conv2d_backward_x(&dy, &self.tensors[w.0].data, *n, *ci, *h, *wd, *co, *kh, *kw, *stride);
                        self.accum(*x, &dx);
                    }
                    if self.tensors[w.0].requires_grad {
                        let dw = k::conv2d_backward_w(&self.tensors[x.0].data, &dy, *n, *ci, *h, *wd, *co, *kh, *kw, *stride);
                        self.accum(*w, &dw);
                    }
                    if let Some(b) = bias {
                        if self.tensors[b.0].requires_grad {
                            let howo = k::conv_out_size(*h, *stride) * k::conv_out_size(*wd, *stride);
                            let db = k::conv2d_backward_b(&dy, *n, *co, howo);
                            self.accum(*b, &db);
                        }
                    }
                }
            }
            Op::DwConv2d { x, w, out, n, ch, h, wd, kh, kw, stride } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    if self.tensors[x.0].requires_grad {
                        let dx = k::dwconv2d_backward_x(&dy, &self.tensors[w.0].data, *n, *ch, *h, *wd, *kh, *kw, *stride);
                        self.accum(*x, &dx);
                    }
                    if self.tensors[w.0].requires_grad {
                        let dw = k::dwconv2d_backward_w(&self.tensors[x.0].data, &dy, *n, *ch, *h, *wd, *kh, *kw, *stride);
                        self.accum(*w, &dw);
                    }
                }
            }
            Op::BnTrain { x, gamma, beta, out, n, c, hw, mean, var, eps } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let xd = &self.tensors[x.0].data;
                    let g = &self.tensors[gamma.0].data;
                    let m = (*n * *hw) as f32;
                    let mut dgamma = vec![0.0f32; *c];
                    let mut dbeta = vec![0.0f32; *c];
                    let mut sum_dy = vec![0.0f32; *c];
                    let mut sum_dy_xhat = vec![0.0f32; *c];
                    for ni in 0..*n {
                        for ci in 0..*c {
                            let base = (ni * c + ci) * hw;
                            let inv = 1.0 / (var[ci] + eps).sqrt();
                            for i in 0..*hw {
                                let xhat = (xd[base + i] - mean[ci]) * inv;
                                let d = dy[base + i];
                                dgamma[ci] += d * xhat;
                                dbeta[ci] += d;
                                sum_dy[ci] += d;
                                sum_dy_xhat[ci] += d * xhat;
                            }
                        }
                    }
                    if self.tensors[x.0].requires_grad {
                        let mut dx = vec![0.0f32; xd.len()];
                        for ni in 0..*n {
                            for ci in 0..*c {
                                let base = (ni * c + ci) * hw;
                                let inv = 1.0 / (var[ci] + eps).sqrt();
                                let a = g[ci] * inv;
                                for i in 0..*hw {
                                    let xhat = (xd[base + i] - mean[ci]) * inv;
                                    dx[base + i] = a * (dy[base + i] - sum_dy[ci] / m - xhat * sum_dy_xhat[ci] / m);
                                }
                            }
                        }
                        self.accum(*x, &dx);
                    }
                    self.accum(*gamma, &dgamma);
                    self.accum(*beta, &dbeta);
                }
            }
            Op::BnEval { x, gamma, beta, out, n, c, hw, rmean, rvar, eps } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let xd = &self.tensors[x.0].data;
                    let g = &self.tensors[gamma.0].data;
                    let mut dgamma = vec![0.0f32; *c];
                    let mut dbeta = vec![0.0f32; *c];
                    let mut dx = vec![0.0f32; xd.len()];
                    for ni in 0..*n {
                        for ci in 0..*c {
                            let base = (ni * c + ci) * hw;
                            let inv = 1.0 / (rvar[ci] + eps).sqrt();
                            for i in 0..*hw {
                                let xhat = (xd[base + i] - rmean[ci]) * inv;
                                let d = dy[base + i];
                                dgamma[ci] += d * xhat;
                                dbeta[ci] += d;
                                dx[base + i] = d * g[ci] * inv;
                            }
                        }
                    }
                    self.accum(*x, &dx);
                    self.accum(*gamma, &dgamma);
                    self.accum(*beta, &dbeta);
                }
            }
            Op::GlobalAvgPool { x, out, n, c, hw } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let mut dx = vec![0.0f32; n * c * hw];
                    for p in 0..n * c {
                        let g = dy[p] / *hw as f32;
                        for i in 0..*hw {
                            dx[p * hw + i] = g;
                        }
                    }
                    self.accum(*x, &dx);
                }
            }
            Op::GlobalMaxPool { x, out, n, c, hw, argmax } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let mut dx = vec![0.0f32; n * c * hw];
                    for p in 0..n * c {
                        dx[p * hw + argmax[p] as usize] = dy[p];
                    }
                    self.accum(*x, &dx);
                }
            }
            Op::ChannelMean { x, out, n, c, hw } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let mut dx = vec![0.0f32; n * c * hw];
                    for ni in 0..*n {
                        for ci in 0..*c {
                            let base = (ni * c + ci) * hw;
                            for i in 0..*hw {
                                dx[base + i] = dy[ni * hw + i] / *c as f32;
                            }
                        }
                    }
                    self.accum(*x, &dx);
                }
            }
            Op::ChannelMax { x, out, n, c, hw, argmax } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let mut dx = vec![0.0f32; n * c * hw];
                    for ni in 0..*n {
                        for i in 0..*hw {
                            let ci = argmax[ni * hw + i] as usize;
                            dx[(ni * c + ci) * hw + i] = dy[ni * hw + i];
                        }
                    }
                    self.accum(*x, &dx);
                }
            }
            Op::MaxPool2x { x, out, argmax } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let xs = &self.tensors[x.0].shape;
                    let (h, wd) = (xs[2], xs[3]);
                    let planes = xs[0] * xs[1];
                    let howo = dy.len() / planes;
                    let mut dx = vec![0.0f32; self.tensors[x.0].numel()];
                    for p in 0..planes {
                        for o in 0..howo {
                            dx[p * h * wd + argmax[p * howo + o] as usize] += dy[p * howo + o];
                        }
                    }
                    self.accum(*x, &dx);
                }
            }
            Op::UpsampleNearest { x, out, n, c, h, wd, ho, wo } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let mut dx = vec![0.0f32; n * c * h * wd];
                    for p in 0..n * c {
                        let obase = p * ho * wo;
                        let xbase = p * h * wd;
                        for oh in 0..*ho {
                            let ih = (oh / 2).min(h - 1);
                            for ow in 0..*wo {
                                let iw = (ow / 2).min(wd - 1);
                                dx[xbase + ih * wd + iw] += dy[obase + oh * wo + ow];
                            }
                        }
                    }
                    self.accum(*x, &dx);
                }
            }
            Op::Concat { xs, out, axis } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let out_shape = self.tensors[out.0].shape.clone();
                    let outer: usize = out_shape[..*axis].iter().product();
                    let inner: usize = out_shape[*axis + 1..].iter().product();
                    let row = out_shape[*axis] * inner;
                    let mut off = 0usize;
                    for id in xs {
                        let s_ax = self.tensors[id.0].shape[*axis];
                        let chunk = s_ax * inner;
                        if self.tensors[id.0].requires_grad {
                            let mut dxi = vec![0.0f32; self.tensors[id.0].numel()];
                            for o in 0..outer {
                                dxi[o * chunk..(o + 1) * chunk].copy_from_slice(&dy[o * row + off..o * row + off + chunk]);
                            }
                            self.accum(*id, &dxi);
                        }
                        off += chunk;
                    }
                }
            }
            Op::Permute { x, out, perm } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let out_shape = self.tensors[out.0].shape.clone();
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let dx = permute_data(&dy, &out_shape, &inv);
                    self.accum(*x, &dx);
                }
            }
            Op::Reshape { x, out } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    self.accum(*x, &dy);
                }
            }
            Op::SelectRows { x, out, indices, cols } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let mut dx = vec![0.0f32; self.tensors[x.0].numel()];
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..*cols {
                            dx[i * cols + c] += dy[r * cols + c];
                        }
                    }
                    self.accum(*x, &dx);
                }
            }
            Op::MulChannel { x, s, out, n, c, hw } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let (dx, ds) = {
                        let xd = &self.tensors[x.0].data;
                        let sd = &self.tensors[s.0].data;
                        let mut dx = vec![0.0f32; xd.len()];
                        let mut ds = vec![0.0f32; n * c];
                        for p in 0..n * c {
                            let mut acc = 0.0f32;
                            for i in 0..*hw {
                                dx[p * hw + i] = dy[p * hw + i] * sd[p];
                                acc += dy[p * hw + i] * xd[p * hw + i];
                            }
                            ds[p] = acc;
                        }
                        (dx, ds)
                    };
                    self.accum(*x, &dx);
                    self.accum(*s, &ds);
                }
            }
            Op::MulSpatial { x, s, out, n, c, hw } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let (dx, ds) = {
                        let xd = &self.tensors[x.0].data;
                        let sd = &self.tensors[s.0].data;
                        let mut dx = vec![0.0f32; xd.len()];
                        let mut ds = vec![0.0f32; n * hw];
                        for ni in 0..*n {
                            for ci in 0..*c {
                                let base = (ni * c + ci) * hw;
                                for i in 0..*hw {
                                    dx[base + i] = dy[base + i] * sd[ni * hw + i];
                                    ds[ni * hw + i] += dy[base + i] * xd[base + i];
                                }
                            }
                        }
                        (dx, ds)
                    };
                    self.accum(*x, &dx);
                    self.accum(*s, &ds);
                }
            }
            Op::MulScalarT { x, s, out } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let sv = self.tensors[s.0].data[0];
                    if self.tensors[x.0].requires_grad {
                        let dx: Vec<f32> = dy.iter().map(|g| g * sv).collect();
                        self.accum(*x, &dx);
                    }
                    if self.tensors[s.0].requires_grad {
                        let ds: f32 = dy.iter().zip(&self.tensors[x.0].data).map(|(g, v)| g * v).sum();
                        self.accum(*s, &[ds]);
                    }
                }
            }
            Op::DivScalarT { x, s, out } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let sv = self.tensors[s.0].data[0];
                    if self.tensors[x.0].requires_grad {
                        let dx: Vec<f32> = dy.iter().map(|g| g / sv).collect();
                        self.accum(*x, &dx);
                    }
                    if self.tensors[s.0].requires_grad {
                        let num: f32 = dy.iter().zip(&self.tensors[x.0].data).map(|(g, v)| g * v).sum();
                        self.accum(*s, &[-num / (sv * sv)]);
                    }
                }
            }
            Op::DecodeBoxes { t, out, anchors, bounds } => {
                if let Some(dy) = self.take_out_grad(*out) {
                    let td = &self.tensors[t.0].data;
                    let rows = td.len() / 4;
                    let [bw, bh, bwmax, bhmax] = *bounds;
                    let mut dt = vec![0.0f32; td.len()];
                    for i in 0..rows {
                        let (xa, ya, wa, ha) = (anchors[i * 4], anchors[i * 4 + 1], anchors[i * 4 + 2], anchors[i * 4 + 3]);
                        let (tx, ty, tw, th) = (td[i * 4], td[i * 4 + 1], td[i * 4 + 2], td[i * 4 + 3]);
                        let px = xa + tx * wa;
                        if (0.0..=bw).contains(&px) {
                            dt[i * 4] = dy[i * 4] * wa;
                        }
                        let py = ya + ty * ha;
                        if (0.0..=bh).contains(&py) {
                            dt[i * 4 + 1] = dy[i * 4 + 1] * ha;
                        }
                        let twc = tw.clamp(-4.0, 4.0);
                        let pw = wa * twc.exp();
                        if tw.abs() < 4.0 && pw <= bwmax {
                            dt[i * 4 + 2] = dy[i * 4 + 2] * pw;
                        }
                        let thc = th.clamp(-4.0, 4.0);
                        let ph = ha * thc.exp();
                        if th.abs() < 4.0 && ph <= bhmax {
                            dt[i * 4 + 3] = dy[i * 4 + 3] * ph;
                        }
                    }
                    self.accum(*t, &dt);
                }
            }
        }
    }
}

/// Raw box decode shared by the tape op and the inference path.
pub fn decode_boxes_raw(t: &[f32], anchors: &[f32], bounds: [f32; 4]) -> Vec<f32> {
    let rows = t.len() / 4;
    let [bw, bh, bwmax, bhmax] = bounds;
    let mut out = vec![0.0f32; t.len()];
    for i in 0..rows {
        let (xa, ya, wa, ha) = (anchors[i * 4], anchors[i * 4 + 1], anchors[i * 4 + 2], anchors[i * 4 + 3]);
        let (tx, ty, tw, th) = (t[i * 4], t[i * 4 + 1], t[i * 4 + 2], t[i * 4 + 3]);
        out[i * 4] = (xa + tx * wa).clamp(0.0, bw);
        out[i * 4 + 1] = (ya + ty * ha).clamp(0.0, bh);
        out[i * 4 + 2] = (wa * tw.clamp(-4.0, 4.0).exp()).clamp(0.0, bwmax);
        out[i * 4 + 3] = (ha * th.clamp(-4.0, 4.0).exp()).clamp(0.0, bhmax);
    }
    out
}

fn permute_data(data: &[f32], shape: &[usize], perm: &[usize]) -> Vec<f32> {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out = vec![0.0f32; data.len()];
    let mut idx = vec![0usize; nd];
    for o in out.iter_mut() {
        let mut src = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            src += i * in_strides[perm[d]];
        }
        *o = data[src];
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value and enough saved state
//! for its backward rule. Nodes are created in topological order by
//! construction, so `backward` is a single reverse sweep.

use crate::error::{shape_err, Error, Result};
use crate::linalg::{cholesky_logdet, ridge_inverse, Matrix, SymMatrix};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Batch-norm mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics from a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance, the value folded into running statistics.
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    Pad2d {
        input: Var,
        pad: usize,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    AvgPool {
        input: Var,
        k: usize,
    },
    SpatialMean {
        input: Var,
    },
    BoxMean {
        input: Var,
        kh: usize,
        kw: usize,
    },
    ConcatChannels {
        inputs: Vec<Var>,
    },
    AssembleGrid {
        inputs: Vec<Var>,
        cols: usize,
    },
    ToRows {
        input: Var,
    },
    SliceBatch {
        input: Var,
        start: usize,
    },
    ConcatRows {
        inputs: Vec<Var>,
    },
    WeightedOuter {
        a: Var,
        b: Var,
        weights: Vec<f64>,
    },
    WeightedMean {
        a: Var,
        weights: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Sum {
        a: Var,
    },
    FrobDot {
        a: Var,
        c: Vec<f64>,
    },
    Transpose {
        a: Var,
    },
    Block2 {
        parts: [Var; 4],
    },
    LogDet {
        a: Var,
        inv: Matrix,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recorded computation. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major `c (m×n) += a (m×k) · b (k×n)` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // Bounds: every index touched lies inside the slices by construction of
    // the callers; assert the extreme offsets to keep the unsafe call honest.
    let max_a = (m as isize - 1) * rsa + (k as isize - 1) * csa;
    let max_b = (k as isize - 1) * rsb + (n as isize - 1) * csb;
    assert!(max_a >= 0 && (max_a as usize) < a.len());
    assert!(max_b >= 0 && (max_b as usize) < b.len());
    assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, cols: &mut [f64]) {
    let ho = h - kh + 1;
    let wo = w - kw + 1;
    for ch in 0..c {
        for a in 0..kh {
            for b in 0..kw {
                let row = (ch * kh + a) * kw + b;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for i in 0..ho {
                    let src = &x[ch * h * w + (i + a) * w + b..][..wo];
                    dst[i * wo..(i + 1) * wo].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize, x: &mut [f64]) {
    let ho = h - kh + 1;
    let wo = w - kw + 1;
    for ch in 0..c {
        for a in 0..kh {
            for b in 0..kw {
                let row = (ch * kh + a) * kw + b;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for i in 0..ho {
                    let dst = &mut x[ch * h * w + (i + a) * w + b..][..wo];
                    for (d, s) in dst.iter_mut().zip(&src[i * wo..(i + 1) * wo]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(&g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        check_finite(&value, name)?;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true, "param")
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false, "constant")
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ---- convolution family -------------------------------------------------

    /// Valid (unpadded) stride-1 convolution. `kernel` is O×I×Kh×Kw.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (o, ci, kh, kw) = self.value(kernel).dims4()?;
        if ci != c {
            return Err(shape_err!("conv2d: input has {} channels, kernel expects {}", c, ci));
        }
        if kh > h || kw > w || kh == 0 || kw == 0 {
            return Err(shape_err!(
                "conv2d: kernel {}x{} does not fit input {}x{}",
                kh,
                kw,
                h,
                w
            ));
        }
        if let Some(b) = bias {
            if self.value(b).len() != o {
                return Err(shape_err!("conv2d: bias length must be {}", o));
            }
        }
        let ho = h - kh + 1;
        let wo = w - kw + 1;
        let ckk = c * kh * kw;
        let x = self.value(input).data();
        let wdata = self.value(kernel).data();
        let mut out = vec![0.0; n * o * ho * wo];
        let mut cols = vec![0.0; ckk * ho * wo];
        let direct = kh == 1 && kw == 1;
        for s in 0..n {
            let xs = &x[s * c * h * w..(s + 1) * c * h * w];
            let src: &[f64] = if direct {
                xs
            } else {
                im2col(xs, c, h, w, kh, kw, &mut cols);
                &cols
            };
            let dst = &mut out[s * o * ho * wo..(s + 1) * o * ho * wo];
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (oc, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                    chunk.fill(bv[oc]);
                }
            }
            gemm(
                o,
                ckk,
                ho * wo,
                wdata,
                ckk as isize,
                1,
                src,
                (ho * wo) as isize,
                1,
                dst,
            );
        }
        let rg = self.rg(input) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        self.push(value, Op::Conv2d { input, kernel, bias }, rg, "conv2d")
    }

    /// Zero padding on both spatial borders.
    pub fn pad2d(&mut self, input: Var, pad: usize) -> Result<Var> {
        if pad == 0 {
            return Ok(input);
        }
        let (n, c, h, w) = self.value(input).dims4()?;
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let x = self.value(input).data();
        let mut out = vec![0.0; n * c * hp * wp];
        for nc in 0..n * c {
            for i in 0..h {
                let src = &x[nc * h * w + i * w..][..w];
                out[nc * hp * wp + (i + pad) * wp + pad..][..w].copy_from_slice(src);
            }
        }
        let rg = self.rg(input);
        let value = Tensor::new(vec![n, c, hp, wp], out)?;
        self.push(value, Op::Pad2d { input, pad }, rg, "pad2d")
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let x = self.value(input);
        let data = match kind {
            Activation::Relu => x.data().iter().map(|&v| v.max(0.0)).collect(),
            Activation::Sigmoid => x.data().iter().map(|&v| sigmoid(v)).collect(),
        };
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(input);
        self.push(value, Op::Act { input, kind }, rg, "activation")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Sigmoid)
    }

    /// Per-channel batch normalization with learnable `scale`/`shift`.
    ///
    /// Train mode normalizes with the batch statistics over (N, H, W) and
    /// returns them for the caller's running averages. Eval mode uses the
    /// supplied running mean/variance.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        mode: Mode,
        running: (&[f64], &[f64]),
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if self.value(scale).len() != c || self.value(shift).len() != c {
            return Err(shape_err!("batchnorm2d: affine parameters must have {} entries", c));
        }
        let m = n * h * w;
        let hw = h * w;
        let x = self.value(input).data();
        let (mean, var, stats) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(Error::InvalidArgument(
                        "batchnorm2d in train mode needs a batch of at least 2".into(),
                    ));
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for s_idx in 0..n {
                        s += x[(s_idx * c + ch) * hw..][..hw].iter().sum::<f64>();
                    }
                    let mu = s / m as f64;
                    let mut v = 0.0;
                    for s_idx in 0..n {
                        v += x[(s_idx * c + ch) * hw..][..hw]
                            .iter()
                            .map(|&t| (t - mu) * (t - mu))
                            .sum::<f64>();
                    }
                    mean[ch] = mu;
                    var[ch] = v / m as f64;
                }
                let unbiased = var
                    .iter()
                    .map(|&v| v * m as f64 / (m as f64 - 1.0).max(1.0))
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => {
                let (rm, rv) = running;
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err!("batchnorm2d: running stats must have {} entries", c));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(scale).data();
        let b = self.value(shift).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for s_idx in 0..n {
            for ch in 0..c {
                let base = (s_idx * c + ch) * hw;
                for p in 0..hw {
                    let xh = (x[base + p] - mean[ch]) * inv_std[ch];
                    xhat[base + p] = xh;
                    out[base + p] = g[ch] * xh + b[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(scale) || self.rg(shift);
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            rg,
            "batchnorm2d",
        )?;
        Ok((v, stats))
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avgpool2d(&mut self, input: Var, k: usize) -> Result<Var> {
        if k == 1 {
            return Ok(input);
        }
        let (n, c, h, w) = self.value(input).dims4()?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err!("avgpool2d: {}x{} not divisible by {}", h, w, k));
        }
        let (ho, wo) = (h / k, w / k);
        let x = self.value(input).data();
        let norm = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for a in 0..k {
                        for b in 0..k {
                            s += x[nc * h * w + (i * k + a) * w + j * k + b];
                        }
                    }
                    out[nc * ho * wo + i * wo + j] = s * norm;
                }
            }
        }
        let rg = self.rg(input);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(value, Op::AvgPool { input, k }, rg, "avgpool2d")
    }

    /// Mean over all spatial positions: N×C×H×W → N×C×1×1.
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let x = self.value(input).data();
        let hw = h * w;
        let out: Vec<f64> = (0..n * c)
            .map(|nc| x[nc * hw..(nc + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(input);
        let value = Tensor::new(vec![n, c, 1, 1], out)?;
        self.push(value, Op::SpatialMean { input }, rg, "spatial_mean")
    }

    /// Stride-1 sliding-window mean over `kh×kw` windows (valid positions).
    pub fn box_mean(&mut self, input: Var, kh: usize, kw: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        if kh == 0 || kw == 0 || kh > h || kw > w {
            return Err(shape_err!("box_mean: window {}x{} vs input {}x{}", kh, kw, h, w));
        }
        let (ho, wo) = (h - kh + 1, w - kw + 1);
        let x = self.value(input).data();
        let norm = 1.0 / (kh * kw) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        for nc in 0..n * c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = 0.0;
                    for a in 0..kh {
                        for b in 0..kw {
                            s += x[nc * h * w + (i + a) * w + j + b];
                        }
                    }
                    out[nc * ho * wo + i * wo + j] = s * norm;
                }
            }
        }
        let rg = self.rg(input);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(value, Op::BoxMean { input, kh, kw }, rg, "box_mean")
    }

    /// Concatenates NCHW tensors along the channel axis, in argument order.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| shape_err!("concat_channels: no inputs"))?;
        if inputs.len() == 1 {
            return Ok(first);
        }
        let (n, _, h, w) = self.value(first).dims4()?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (n2, c2, h2, w2) = self.value(v).dims4()?;
            if (n2, h2, w2) != (n, h, w) {
                return Err(shape_err!(
                    "concat_channels: {:?} incompatible with {:?}",
                    self.value(v).shape(),
                    self.value(first).shape()
                ));
            }
            channels.push(c2);
        }
        let ctot: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for s in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(vec![n, ctot, h, w], out)?;
        self.push(
            value,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            rg,
            "concat_channels",
        )
    }

    /// Appends `n_noise` channels of uniform [0, 1) noise; the noise is a
    /// constant input and receives no gradient.
    pub fn append_noise<R: rand::Rng>(
        &mut self,
        input: Var,
        n_noise: usize,
        rng: &mut R,
    ) -> Result<Var> {
        if n_noise == 0 {
            return Ok(input);
        }
        let (n, _, h, w) = self.value(input).dims4()?;
        let noise: Vec<f64> = (0..n * n_noise * h * w)
            .map(|_| rng.random::<f64>())
            .collect();
        let nv = self.constant(Tensor::new(vec![n, n_noise, h, w], noise)?)?;
        self.concat_channels(&[input, nv])
    }

    /// Places L tensors of shape N×C×1×1 on a `rows×cols` spatial grid,
    /// view `l` at `(l / cols, l % cols)`.
    pub fn assemble_grid(&mut self, inputs: &[Var], rows: usize, cols: usize) -> Result<Var> {
        if inputs.len() != rows * cols || inputs.is_empty() {
            return Err(shape_err!(
                "assemble_grid: {} inputs for a {}x{} grid",
                inputs.len(),
                rows,
                cols
            ));
        }
        let (n, c, h, w) = self.value(inputs[0]).dims4()?;
        if h != 1 || w != 1 {
            return Err(shape_err!("assemble_grid: inputs must be 1x1 spatially"));
        }
        let mut out = vec![0.0; n * c * rows * cols];
        for (l, &v) in inputs.iter().enumerate() {
            let t = self.value(v);
            if t.shape() != [n, c, 1, 1] {
                return Err(shape_err!("assemble_grid: mismatched input {:?}", t.shape()));
            }
            let d = t.data();
            for s in 0..n {
                for ch in 0..c {
                    out[(s * c + ch) * rows * cols + l] = d[s * c + ch];
                }
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(vec![n, c, rows, cols], out)?;
        self.push(
            value,
            Op::AssembleGrid {
                inputs: inputs.to_vec(),
                cols,
            },
            rg,
            "assemble_grid",
        )
    }

    // ---- matrix family -------------------------------------------------------

    /// N×C×H×W → (N·H·W)×C, rows ordered batch-major then row-major.
    pub fn to_rows(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = vec![0.0; n * hw * c];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(s * hw + p) * c + ch] = x[(s * c + ch) * hw + p];
                }
            }
        }
        let rg = self.rg(input);
        let value = Tensor::new(vec![n * hw, c], out)?;
        self.push(value, Op::ToRows { input }, rg, "to_rows")
    }

    /// Samples `start..start + len` along the leading axis.
    pub fn slice_batch(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(input);
        let n = *t.shape().first().ok_or_else(|| shape_err!("slice_batch: scalar input"))?;
        if start + len > n || len == 0 {
            return Err(shape_err!("slice_batch: {}..{} outside batch of {}", start, start + len, n));
        }
        if start == 0 && len == n {
            return Ok(input);
        }
        let per = t.len() / n;
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(shape, t.data()[start * per..(start + len) * per].to_vec())?;
        let rg = self.rg(input);
        self.push(value, Op::SliceBatch { input, start }, rg, "slice_batch")
    }

    /// Vertical concatenation of matrices with equal column counts.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| shape_err!("concat_rows: no inputs"))?;
        if inputs.len() == 1 {
            return Ok(first);
        }
        let (_, c) = self.value(first).dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in inputs {
            let (r, c2) = self.value(v).dims2()?;
            if c2 != c {
                return Err(shape_err!("concat_rows: column mismatch {} vs {}", c2, c));
            }
            rows += r;
            out.extend_from_slice(self.value(v).data());
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let value = Tensor::new(vec![rows, c], out)?;
        self.push(
            value,
            Op::ConcatRows {
                inputs: inputs.to_vec(),
            },
            rg,
            "concat_rows",
        )
    }

    /// `Σ_p w_p · a_p b_pᵀ` over matrix rows, accumulated in row order.
    pub fn weighted_outer(&mut self, a: Var, b: Var, weights: &[f64]) -> Result<Var> {
        let (pa, ka) = self.value(a).dims2()?;
        let (pb, kb) = self.value(b).dims2()?;
        if pa != pb || pa != weights.len() {
            return Err(shape_err!(
                "weighted_outer: {} and {} rows with {} weights",
                pa,
                pb,
                weights.len()
            ));
        }
        if pa == 0 {
            return Err(Error::InvalidArgument("weighted_outer: empty position set".into()));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![0.0; ka * kb];
        for p in 0..pa {
            let wp = weights[p];
            let ar = &ad[p * ka..(p + 1) * ka];
            let br = &bd[p * kb..(p + 1) * kb];
            for i in 0..ka {
                let s = wp * ar[i];
                let dst = &mut out[i * kb..(i + 1) * kb];
                for (d, &bj) in dst.iter_mut().zip(br) {
                    *d += s * bj;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(vec![ka, kb], out)?;
        self.push(
            value,
            Op::WeightedOuter {
                a,
                b,
                weights: weights.to_vec(),
            },
            rg,
            "weighted_outer",
        )
    }

    /// Mean of `a_p bᵀ_p` over rows: `(1/P) Σ_p a_p b_pᵀ`.
    pub fn outer_stats(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, _) = self.value(a).dims2()?;
        if p == 0 {
            return Err(Error::InvalidArgument("outer_stats: empty position set".into()));
        }
        let w = vec![1.0 / p as f64; p];
        self.weighted_outer(a, b, &w)
    }

    /// `Σ_p w_p a_p` as a 1×K row.
    pub fn weighted_mean(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let (p, k) = self.value(a).dims2()?;
        if p != weights.len() {
            return Err(shape_err!("weighted_mean: {} rows, {} weights", p, weights.len()));
        }
        let ad = self.value(a).data();
        let mut out = vec![0.0; k];
        for (r, &wp) in weights.iter().enumerate() {
            for (o, &x) in out.iter_mut().zip(&ad[r * k..(r + 1) * k]) {
                *o += wp * x;
            }
        }
        let rg = self.rg(a);
        let value = Tensor::new(vec![1, k], out)?;
        self.push(
            value,
            Op::WeightedMean {
                a,
                weights: weights.to_vec(),
            },
            rg,
            "weighted_mean",
        )
    }

    fn binary(&mut self, a: Var, b: Var, name: &str) -> Result<(Vec<usize>, &[f64], &[f64])> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("{}: {:?} vs {:?}", name, ta.shape(), tb.shape()));
        }
        Ok((ta.shape().to_vec(), ta.data(), tb.data()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, x, y) = self.binary(a, b, "add")?;
        let data = x.iter().zip(y).map(|(p, q)| p + q).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data)?, Op::Add { a, b }, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, x, y) = self.binary(a, b, "sub")?;
        let data = x.iter().zip(y).map(|(p, q)| p - q).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data)?, Op::Sub { a, b }, rg, "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, x, y) = self.binary(a, b, "mul")?;
        let data = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data)?, Op::Mul { a, b }, rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * c).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, c }, rg, "scale")
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Frobenius product with a constant matrix: `Σ a_ij c_ij`.
    pub fn frob_dot(&mut self, a: Var, c: &Matrix) -> Result<Var> {
        let t = self.value(a);
        let (r, k) = t.dims2()?;
        if (r, k) != (c.rows(), c.cols()) {
            return Err(shape_err!(
                "frob_dot: {}x{} vs {}x{}",
                r,
                k,
                c.rows(),
                c.cols()
            ));
        }
        let s = t.data().iter().zip(c.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(a);
        self.push(
            Tensor::scalar(s),
            Op::FrobDot {
                a,
                c: c.data().to_vec(),
            },
            rg,
            "frob_dot",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let d = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { a }, rg, "transpose")
    }

    /// `[[a, b], [c, d]]`.
    pub fn block2(&mut self, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let (ar, ac) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        let (cr, cc) = self.value(c).dims2()?;
        let (dr, dc) = self.value(d).dims2()?;
        if ar != br || cr != dr || ac != cc || bc != dc {
            return Err(shape_err!("block2: incompatible blocks"));
        }
        let to_m = |t: &Tensor, r, c| Matrix::from_vec(r, c, t.data().to_vec());
        let m = Matrix::block2(
            &to_m(self.value(a), ar, ac)?,
            &to_m(self.value(b), br, bc)?,
            &to_m(self.value(c), cr, cc)?,
            &to_m(self.value(d), dr, dc)?,
        );
        let rg = [a, b, c, d].iter().any(|&v| self.rg(v));
        let value = Tensor::new(vec![m.rows(), m.cols()], m.into_data())?;
        self.push(value, Op::Block2 { parts: [a, b, c, d] }, rg, "block2")
    }

    /// `log det(sym(a) + ridge·I)`; the gradient is the ridge inverse.
    pub fn logdet(&mut self, a: Var, ridge: f64) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if r != c {
            return Err(shape_err!("logdet: matrix must be square"));
        }
        let m = SymMatrix::new(Matrix::from_vec(r, c, self.value(a).data().to_vec())?)?;
        let ld = cholesky_logdet(&m, ridge)?;
        let inv = ridge_inverse(&m, ridge)?.into_matrix();
        let rg = self.rg(a);
        self.push(Tensor::scalar(ld), Op::LogDet { a, inv }, rg, "logdet")
    }

    /// Reads a rank-2 node as a [`Matrix`].
    pub fn matrix(&self, v: Var) -> Result<Matrix> {
        let (r, c) = self.value(v).dims2()?;
        Ok(Matrix::from_vec(r, c, self.value(v).data().to_vec())?)
    }

    // ---- backward --------------------------------------------------------------

    /// Propagates d(loss)/d(node) to every leaf that requires a gradient.
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(existing) => {
                        for (e, x) in existing.iter_mut().zip(&g) {
                            *e += x;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let (o, _, kh, kw) = self.value(*kernel).dims4()?;
                let (ho, wo) = (out_shape[2], out_shape[3]);
                let ckk = c * kh * kw;
                let x = self.value(*input).data();
                let wdata = self.value(*kernel).data();
                let direct = kh == 1 && kw == 1;
                if let Some(b) = bias {
                    if self.rg(*b) {
                        let mut gb = vec![0.0; o];
                        for s in 0..n {
                            for (oc, gbv) in gb.iter_mut().enumerate() {
                                *gbv += g[(s * o + oc) * ho * wo..][..ho * wo].iter().sum::<f64>();
                            }
                        }
                        acc(grads, *b, gb);
                    }
                }
                if self.rg(*kernel) {
                    let mut gw = vec![0.0; o * ckk];
                    let mut cols = vec![0.0; ckk * ho * wo];
                    for s in 0..n {
                        let xs = &x[s * c * h * w..(s + 1) * c * h * w];
                        let src: &[f64] = if direct {
                            xs
                        } else {
                            im2col(xs, c, h, w, kh, kw, &mut cols);
                            &cols
                        };
                        let gs = &g[s * o * ho * wo..(s + 1) * o * ho * wo];
                        // gw (o×ckk) += gs (o×P) · srcᵀ (P×ckk)
                        gemm(
                            o,
                            ho * wo,
                            ckk,
                            gs,
                            (ho * wo) as isize,
                            1,
                            src,
                            1,
                            (ho * wo) as isize,
                            &mut gw,
                        );
                    }
                    acc(grads, *kernel, gw);
                }
                if self.rg(*input) {
                    let mut gx = vec![0.0; n * c * h * w];
                    let mut gcols = vec![0.0; ckk * ho * wo];
                    for s in 0..n {
                        let gs = &g[s * o * ho * wo..(s + 1) * o * ho * wo];
                        let gxs = &mut gx[s * c * h * w..(s + 1) * c * h * w];
                        // gcols (ckk×P) = wᵀ (ckk×o) · gs (o×P)
                        if direct {
                            gemm(c, o, h * w, wdata, 1, ckk as isize, gs, (h * w) as isize, 1, gxs);
                        } else {
                            gcols.fill(0.0);
                            gemm(
                                ckk,
                                o,
                                ho * wo,
                                wdata,
                                1,
                                ckk as isize,
                                gs,
                                (ho * wo) as isize,
                                1,
                                &mut gcols,
                            );
                            col2im_add(&gcols, c, h, w, kh, kw, gxs);
                        }
                    }
                    acc(grads, *input, gx);
                }
            }
            Op::Pad2d { input, pad } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                let mut gx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for r in 0..h {
                        gx[nc * h * w + r * w..][..w]
                            .copy_from_slice(&g[nc * hp * wp + (r + pad) * wp + pad..][..w]);
                    }
                }
                acc(grads, *input, gx);
            }
            Op::Act { input, kind } => {
                let gx = match kind {
                    Activation::Relu => self
                        .value(*input)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&y, &gv)| gv * y * (1.0 - y))
                        .collect(),
                };
                acc(grads, *input, gx);
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let hw = h * w;
                let m = (n * hw) as f64;
                let gamma = self.value(*scale).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for p in 0..hw {
                            sum_g[ch] += g[base + p];
                            sum_gx[ch] += g[base + p] * xhat[base + p];
                        }
                    }
                }
                if self.rg(*scale) {
                    acc(grads, *scale, sum_gx.clone());
                }
                if self.rg(*shift) {
                    acc(grads, *shift, sum_g.clone());
                }
                if self.rg(*input) {
                    let mut gx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let k = gamma[ch] * inv_std[ch];
                            for p in 0..hw {
                                gx[base + p] = if *train {
                                    k / m * (m * g[base + p] - sum_g[ch] - xhat[base + p] * sum_gx[ch])
                                } else {
                                    k * g[base + p]
                                };
                            }
                        }
                    }
                    acc(grads, *input, gx);
                }
            }
            Op::AvgPool { input, k } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let (ho, wo) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let mut gx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for r in 0..h {
                        for col in 0..w {
                            gx[nc * h * w + r * w + col] =
                                g[nc * ho * wo + (r / k) * wo + col / k] * norm;
                        }
                    }
                }
                acc(grads, *input, gx);
            }
            Op::SpatialMean { input } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let hw = h * w;
                let mut gx = vec![0.0; n * c * hw];
                for nc in 0..n * c {
                    gx[nc * hw..(nc + 1) * hw].fill(g[nc] / hw as f64);
                }
                acc(grads, *input, gx);
            }
            Op::BoxMean { input, kh, kw } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let (ho, wo) = (h - kh + 1, w - kw + 1);
                let norm = 1.0 / (kh * kw) as f64;
                let mut gx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for i2 in 0..ho {
                        for j2 in 0..wo {
                            let gv = g[nc * ho * wo + i2 * wo + j2] * norm;
                            for a in 0..*kh {
                                for b in 0..*kw {
                                    gx[nc * h * w + (i2 + a) * w + j2 + b] += gv;
                                }
                            }
                        }
                    }
                }
                acc(grads, *input, gx);
            }
            Op::ConcatChannels { inputs } => {
                let (n, ctot, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
                let hw = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.value(v).shape()[1];
                    if self.rg(v) {
                        let mut gx = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            gx.extend_from_slice(&g[(s * ctot + offset) * hw..][..c * hw]);
                        }
                        acc(grads, v, gx);
                    }
                    offset += c;
                }
            }
            Op::AssembleGrid { inputs, cols } => {
                let (n, c, rows) = (out_shape[0], out_shape[1], out_shape[2]);
                let cells = rows * cols;
                for (l, &v) in inputs.iter().enumerate() {
                    if !self.rg(v) {
                        continue;
                    }
                    let mut gx = vec![0.0; n * c];
                    for s in 0..n {
                        for ch in 0..c {
                            gx[s * c + ch] = g[(s * c + ch) * cells + l];
                        }
                    }
                    acc(grads, v, gx);
                }
            }
            Op::ToRows { input } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let hw = h * w;
                let mut gx = vec![0.0; n * c * hw];
                for s in 0..n {
                    for ch in 0..c {
                        for p in 0..hw {
                            gx[(s * c + ch) * hw + p] = g[(s * hw + p) * c + ch];
                        }
                    }
                }
                acc(grads, *input, gx);
            }
            Op::SliceBatch { input, start } => {
                let n = self.value(*input).shape()[0];
                let per = self.value(*input).len() / n;
                let mut gx = vec![0.0; n * per];
                gx[start * per..start * per + g.len()].copy_from_slice(g);
                acc(grads, *input, gx);
            }
            Op::ConcatRows { inputs } => {
                let mut offset = 0;
                for &v in inputs {
                    let len = self.value(v).len();
                    if self.rg(v) {
                        acc(grads, v, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::WeightedOuter { a, b, weights } => {
                let (p, ka) = self.value(*a).dims2()?;
                let (_, kb) = self.value(*b).dims2()?;
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.rg(*a) {
                    // ga_p = w_p · G b_p
                    let mut ga = vec![0.0; p * ka];
                    for r in 0..p {
                        let br = &bd[r * kb..(r + 1) * kb];
                        for i in 0..ka {
                            let gi = &g[i * kb..(i + 1) * kb];
                            ga[r * ka + i] =
                                weights[r] * gi.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                    acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    // gb_p = w_p · Gᵀ a_p
                    let mut gb = vec![0.0; p * kb];
                    for r in 0..p {
                        let ar = &ad[r * ka..(r + 1) * ka];
                        let dst = &mut gb[r * kb..(r + 1) * kb];
                        for i in 0..ka {
                            let s = weights[r] * ar[i];
                            for (d, &gij) in dst.iter_mut().zip(&g[i * kb..(i + 1) * kb]) {
                                *d += s * gij;
                            }
                        }
                    }
                    acc(grads, *b, gb);
                }
            }
            Op::WeightedMean { a, weights } => {
                let (p, k) = self.value(*a).dims2()?;
                let mut ga = vec![0.0; p * k];
                for r in 0..p {
                    for j in 0..k {
                        ga[r * k + j] = weights[r] * g[j];
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.rg(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                if self.rg(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.rg(*b) {
                    acc(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.rg(*a) {
                    acc(grads, *a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                }
                if self.rg(*b) {
                    acc(grads, *b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale { a, c } => {
                acc(grads, *a, g.iter().map(|v| v * c).collect());
            }
            Op::Sum { a } => {
                acc(grads, *a, vec![g[0]; self.value(*a).len()]);
            }
            Op::FrobDot { a, c } => {
                acc(grads, *a, c.iter().map(|v| v * g[0]).collect());
            }
            Op::Transpose { a } => {
                let (r, c) = self.value(*a).dims2()?;
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                acc(grads, *a, ga);
            }
            Op::Block2 { parts } => {
                let cols = out_shape[1];
                let (ar, ac) = self.value(parts[0]).dims2()?;
                let offsets = [(0, 0), (0, ac), (ar, 0), (ar, ac)];
                for (&v, &(r0, c0)) in parts.iter().zip(&offsets) {
                    if !self.rg(v) {
                        continue;
                    }
                    let (r, c) = self.value(v).dims2()?;
                    let mut gv = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gv[i * c + j] = g[(r0 + i) * cols + c0 + j];
                        }
                    }
                    acc(grads, v, gv);
                }
            }
            Op::LogDet { a, inv } => {
                acc(grads, *a, inv.data().iter().map(|v| v * g[0]).collect());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0])).unwrap();
        let y = tape.conv2d(x, k, None).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
        let k3 = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = tape.conv2d(x, k3, None).unwrap();
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3])).unwrap();
        let k = tape.constant(Tensor::zeros(&[1, 3, 1, 1])).unwrap();
        assert!(matches!(tape.conv2d(x, k, None), Err(Error::Shape(_))));
        let k = tape.constant(Tensor::zeros(&[1, 2, 4, 4])).unwrap();
        assert!(matches!(tape.conv2d(x, k, None), Err(Error::Shape(_))));
    }

    #[test]
    fn pad_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[5.0])).unwrap();
        assert_eq!(tape.pad2d(x, 0).unwrap(), x);
        let y = tape.pad2d(x, 1).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.param(t(&[1], &[0.0])).unwrap();
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(z).unwrap(), &[0.25]);
    }

    #[test]
    fn batchnorm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 2, 2], 3.0)).unwrap();
        let g = tape.constant(t(&[1], &[1.0])).unwrap();
        let b = tape.constant(t(&[1], &[0.0])).unwrap();
        let (y, stats) = tape.batchnorm2d(x, g, b, Mode::Train, (&[], &[])).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.unwrap().mean, vec![3.0]);

        let data = [-1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0];
        let x = tape.constant(t(&[2, 1, 2, 2], &data)).unwrap();
        let (y, _) = tape.batchnorm2d(x, g, b, Mode::Train, (&[], &[])).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(x)) < 1e-4);

        let one = tape.constant(Tensor::zeros(&[1, 1, 2, 2])).unwrap();
        assert!(tape.batchnorm2d(one, g, b, Mode::Train, (&[], &[])).is_err());
        let (y, _) = tape
            .batchnorm2d(one, g, b, Mode::Eval, (&[1.0], &[4.0]))
            .unwrap();
        assert!((tape.value(y).data()[0] + 1.0 / (4.0f64 + BN_EPS).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pool_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0])).unwrap();
        assert_eq!(tape.avgpool2d(x, 1).unwrap(), x);
        let y = tape.avgpool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 3])).unwrap();
        assert!(tape.avgpool2d(odd, 2).is_err());
    }

    #[test]
    fn concat_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2, 1, 1], &[1.0, 2.0])).unwrap();
        let b = tape.constant(t(&[1, 2, 1, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(tape.concat_channels(&[a]).unwrap(), a);
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 4, 1, 1]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let bad = tape.constant(Tensor::zeros(&[1, 2, 2, 1])).unwrap();
        assert!(tape.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn noise_examples() {
        use rand::SeedableRng;
        let run = |seed| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::zeros(&[1, 64, 8, 8])).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(tape.append_noise(x, 0, &mut rng).unwrap(), x);
            let y = tape.append_noise(x, 20, &mut rng).unwrap();
            tape.value(y).clone()
        };
        let a = run(3);
        assert_eq!(a.shape(), &[1, 84, 8, 8]);
        assert_eq!(a, run(3));
        assert!(a.data()[64 * 64..].iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn outer_stats_examples() {
        let mut tape = Tape::new();
        let a = tape
            .constant(t(&[3, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]))
            .unwrap();
        let s = tape.outer_stats(a, a).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 2.0, 2.0, 4.0]);
        // columns orthonormal under the empirical average
        let r2 = 2f64.sqrt();
        let b = tape.constant(t(&[2, 2], &[r2, 0.0, 0.0, r2])).unwrap();
        let s = tape.outer_stats(b, b).unwrap();
        assert!(tape.value(s).max_abs_diff(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])) < 1e-15);
        let empty = tape.constant(Tensor::zeros(&[0, 2])).unwrap();
        assert!(tape.outer_stats(empty, empty).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5])).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
        // accumulation
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 4]);
        tape.zero_grad();

        let a = tape.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let b = tape.param(t(&[3], &[4.0, 5.0, 6.0])).unwrap();
        let p = tape.mul(a, b).unwrap();
        let d = tape.sum(p).unwrap();
        tape.backward(d).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[4.0, 5.0, 6.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 2.0, 3.0]);
        assert!(matches!(tape.backward(p), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1], &[f64::MAX])).unwrap();
        assert!(matches!(tape.scale(x, 10.0), Err(Error::NonFinite(_))));
        assert!(tape.constant(t(&[1], &[f64::NAN])).is_err());
    }

    #[test]
    fn assemble_grid_layout() {
        let mut tape = Tape::new();
        let views: Vec<Var> = (0..9)
            .map(|l| {
                tape.constant(Tensor::full(&[2, 8, 1, 1], l as f64)).unwrap()
            })
            .collect();
        let g = tape.assemble_grid(&views, 3, 3).unwrap();
        assert_eq!(tape.value(g).shape(), &[2, 8, 3, 3]);
        assert_eq!(&tape.value(g).data()[..9], &[0., 1., 2., 3., 4., 5., 6., 7., 8.]);
    }
}

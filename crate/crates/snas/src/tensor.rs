//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] is a define-by-run arena: every primitive appends a node holding
//! the forward value and enough saved state to replay its local gradient in
//! reverse. Tensors are plain indices ([`TensorId`]) into the tape, so a fresh
//! tape is built per training step and dropped afterwards.

use crate::error::TensorError;

type Result<T> = std::result::Result<T, TensorError>;

/// Element type of a tape: f32 for training, f64 for verification.
pub trait Element:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// Handle to a tensor on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

/// Convolution hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            pad: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

/// Output spatial dim for a conv/pool window.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let eff = dilation * (kernel - 1) + 1;
    if input + 2 * pad < eff {
        return None;
    }
    Some((input + 2 * pad - eff) / stride + 1)
}

/// Recorded primitive; parents are tape indices, saved buffers are whatever
/// the backward pass needs without recomputation.
#[derive(Debug, Clone)]
pub(crate) enum Record<E> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddRow(TensorId, TensorId),
    ScalarMul(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    Relu(TensorId),
    Log(TensorId),
    Exp(TensorId),
    Softmax1d(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    Index(TensorId, usize),
    Conv2d {
        input: TensorId,
        weight: TensorId,
        spec: ConvSpec,
    },
    BatchNorm2d {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Vec<E>,
        inv_std: Vec<E>,
    },
    AvgPool2d {
        input: TensorId,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        input: TensorId,
        argmax: Vec<usize>,
    },
    ConcatChannels(Vec<TensorId>),
    GlobalAvgPool(TensorId),
    CrossEntropyLogits {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<E>,
    },
}

#[derive(Debug)]
pub(crate) struct Node<E> {
    pub shape: Vec<usize>,
    pub data: Vec<E>,
    pub requires_grad: bool,
    pub op: Record<E>,
}

/// Reverse-mode tape.
#[derive(Debug)]
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
    backward_runs: usize,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_runs: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// How many times `backward` ran on this tape.
    pub fn backward_runs(&self) -> usize {
        self.backward_runs
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.nodes[id.0].data
    }

    pub(crate) fn record(&self, id: TensorId) -> &Record<E> {
        &self.nodes[id.0].op
    }

    /// Direct inputs of a recorded primitive.
    pub(crate) fn parents(&self, id: TensorId) -> Vec<TensorId> {
        match &self.nodes[id.0].op {
            Record::Leaf => vec![],
            Record::Add(a, b)
            | Record::Sub(a, b)
            | Record::Mul(a, b)
            | Record::AddRow(a, b)
            | Record::ScalarMul(a, b)
            | Record::Matmul(a, b) => vec![*a, *b],
            Record::Scale(a, _)
            | Record::Relu(a)
            | Record::Log(a)
            | Record::Exp(a)
            | Record::Softmax1d(a)
            | Record::Sum(a)
            | Record::Mean(a)
            | Record::Index(a, _)
            | Record::GlobalAvgPool(a) => vec![*a],
            Record::Conv2d { input, weight, .. } => vec![*input, *weight],
            Record::BatchNorm2d { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Record::AvgPool2d { input, .. } | Record::MaxPool2d { input, .. } => vec![*input],
            Record::ConcatChannels(parts) => parts.clone(),
            Record::CrossEntropyLogits { logits, .. } => vec![*logits],
        }
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient buffer populated by `backward`, if any reached this tensor.
    pub fn grad(&self, id: TensorId) -> Option<&[E]> {
        self.grads[id.0].as_deref()
    }

    pub fn scalar_value(&self, id: TensorId) -> E {
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Record<E>) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, shape: &[usize], data: Vec<E>, requires_grad: bool) -> Result<TensorId> {
        if numel(shape) != data.len() {
            return Err(TensorError::shape(
                "leaf",
                format!("shape {:?} does not match data length {}", shape, data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::shape("leaf", format!("zero dim in shape {shape:?}")));
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Record::Leaf))
    }

    pub fn leaf_f64(&mut self, shape: &[usize], data: &[f64], requires_grad: bool) -> Result<TensorId> {
        let cast: Vec<E> = data.iter().map(|&x| E::from_f64(x)).collect();
        self.leaf(shape, cast, requires_grad)
    }

    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.push(vec![1], vec![E::from_f64(value)], false, Record::Leaf)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorId {
        self.push(shape.to_vec(), vec![E::zero(); numel(shape)], false, Record::Leaf)
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<E> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Record::Add(a, b)))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<E> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Record::Sub(a, b)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<E> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Record::Mul(a, b)))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let k = E::from_f64(c);
        let data: Vec<E> = self.data(a).iter().map(|&x| x * k).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Record::Scale(a, c)))
    }

    /// (n, m) + (m,) row-broadcast, e.g. a classifier bias.
    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ashape, bshape) = (self.shape(a), self.shape(b));
        if ashape.len() != 2 || bshape.len() != 1 || ashape[1] != bshape[0] {
            return Err(TensorError::shape(
                "add_row",
                format!("{ashape:?} + {bshape:?}"),
            ));
        }
        let m = ashape[1];
        let bd = self.data(b);
        let data: Vec<E> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % m])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Record::AddRow(a, b)))
    }

    /// Scalar tensor times arbitrary tensor (the mask-weighting primitive).
    pub fn scalar_mul(&mut self, s: TensorId, a: TensorId) -> Result<TensorId> {
        if numel(self.shape(s)) != 1 {
            return Err(TensorError::shape(
                "scalar_mul",
                format!("weight must be scalar, got {:?}", self.shape(s)),
            ));
        }
        let k = self.data(s)[0];
        let data: Vec<E> = self.data(a).iter().map(|&x| x * k).collect();
        let rg = self.rg(s) || self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Record::ScalarMul(s, a)))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ashape, bshape) = (self.shape(a), self.shape(b));
        if ashape.len() != 2 || bshape.len() != 2 || ashape[1] != bshape[0] {
            return Err(TensorError::shape(
                "matmul",
                format!("{ashape:?} x {bshape:?}"),
            ));
        }
        let (n, k, m) = (ashape[0], ashape[1], bshape[1]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut data = vec![E::zero(); n * m];
        for i in 0..n {
            for l in 0..k {
                let av = ad[i * k + l];
                for j in 0..m {
                    data[i * m + j] = data[i * m + j] + av * bd[l * m + j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![n, m], data, rg, Record::Matmul(a, b)))
    }

    // ── Nonlinearities ──────────────────────────────────────────────────

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<E> = self
            .data(a)
            .iter()
            .map(|&x| if x > E::zero() { x } else { E::zero() })
            .collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Record::Relu(a)))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<E> = self.data(a).iter().map(|&x| x.ln()).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Record::Log(a)))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        let data: Vec<E> = self.data(a).iter().map(|&x| x.exp()).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Record::Exp(a)))
    }

    /// Softmax of a 1-D vector, computed with max subtraction.
    pub fn softmax1d(&mut self, a: TensorId) -> Result<TensorId> {
        if self.shape(a).len() != 1 {
            return Err(TensorError::shape(
                "softmax1d",
                format!("expected rank 1, got {:?}", self.shape(a)),
            ));
        }
        let ad = self.data(a);
        let max = ad.iter().cloned().fold(E::neg_infinity(), E::max);
        let exps: Vec<E> = ad.iter().map(|&x| (x - max).exp()).collect();
        let sum = exps.iter().fold(E::zero(), |acc, &x| acc + x);
        let data: Vec<E> = exps.into_iter().map(|x| x / sum).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shape(a).to_vec(), data, rg, Record::Softmax1d(a)))
    }

    // ── Reductions and indexing ─────────────────────────────────────────

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s = self.data(a).iter().fold(E::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        Ok(self.push(vec![1], vec![s], rg, Record::Sum(a)))
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.data(a).len();
        let s = self.data(a).iter().fold(E::zero(), |acc, &x| acc + x);
        let m = s / E::from_f64(n as f64);
        let rg = self.rg(a);
        Ok(self.push(vec![1], vec![m], rg, Record::Mean(a)))
    }

    /// Single-element gather from a vector; the backward is a scatter.
    pub fn index(&mut self, a: TensorId, i: usize) -> Result<TensorId> {
        let len = self.data(a).len();
        if i >= len {
            return Err(TensorError::IndexOutOfRange {
                op: "index",
                index: i,
                len,
            });
        }
        let v = self.data(a)[i];
        let rg = self.rg(a);
        Ok(self.push(vec![1], vec![v], rg, Record::Index(a, i)))
    }

    // ── Convolution and friends ─────────────────────────────────────────

    pub fn conv2d(&mut self, input: TensorId, weight: TensorId, spec: ConvSpec) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        if ishape.len() != 4 || wshape.len() != 4 {
            return Err(TensorError::shape(
                "conv2d",
                format!("input {ishape:?}, weight {wshape:?}"),
            ));
        }
        let (n, ci, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (co, cig, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        let g = spec.groups;
        if g == 0 || ci % g != 0 || co % g != 0 || cig != ci / g {
            return Err(TensorError::shape(
                "conv2d",
                format!("channels {ci}->{co} incompatible with groups {g}, weight {wshape:?}"),
            ));
        }
        let oh = conv_out_dim(h, kh, spec.stride, spec.pad, spec.dilation).ok_or_else(|| {
            TensorError::shape("conv2d", format!("kernel {kh}x{kw} too large for input {h}x{w} with pad {}", spec.pad))
        })?;
        let ow = conv_out_dim(w, kw, spec.stride, spec.pad, spec.dilation).unwrap();
        let co_per = co / g;
        let id = self.data(input);
        let wd = self.data(weight);
        let mut out = vec![E::zero(); n * co * oh * ow];
        for b in 0..n {
            for gi in 0..g {
                for ocl in 0..co_per {
                    let oc = gi * co_per + ocl;
                    for y in 0..oh {
                        for x in 0..ow {
                            let mut acc = E::zero();
                            for icl in 0..cig {
                                let ic = gi * cig + icl;
                                for ky in 0..kh {
                                    let iy = (y * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (x * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let iv = id[((b * ci + ic) * h + iy as usize) * w + ix as usize];
                                        let wv = wd[((oc * cig + icl) * kh + ky) * kw + kx];
                                        acc = acc + iv * wv;
                                    }
                                }
                            }
                            out[((b * co + oc) * oh + y) * ow + x] = acc;
                        }
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(vec![n, co, oh, ow], out, rg, Record::Conv2d { input, weight, spec }))
    }

    /// Batch norm over (N, H, W) per channel, batch statistics only, with
    /// learned per-channel affine. No running statistics are kept.
    pub fn batch_norm2d(&mut self, input: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> Result<TensorId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(TensorError::shape("batch_norm2d", format!("input {ishape:?}")));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::shape(
                "batch_norm2d",
                format!(
                    "affine {:?}/{:?} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let m = (n * h * w) as f64;
        let id = self.data(input);
        let gd = self.data(gamma).to_vec();
        let bd = self.data(beta).to_vec();
        let mut xhat = vec![E::zero(); id.len()];
        let mut inv_std = vec![E::zero(); c];
        let mut out = vec![E::zero(); id.len()];
        for ch in 0..c {
            let mut sum = E::zero();
            let mut sumsq = E::zero();
            for b in 0..n {
                for p in 0..h * w {
                    let v = id[(b * c + ch) * h * w + p];
                    sum = sum + v;
                    sumsq = sumsq + v * v;
                }
            }
            let mean = sum / E::from_f64(m);
            let var = sumsq / E::from_f64(m) - mean * mean;
            let var = var.max(E::zero());
            let istd = E::one() / (var + E::from_f64(eps)).sqrt();
            inv_std[ch] = istd;
            for b in 0..n {
                for p in 0..h * w {
                    let idx = (b * c + ch) * h * w + p;
                    let xh = (id[idx] - mean) * istd;
                    xhat[idx] = xh;
                    out[idx] = gd[ch] * xh + bd[ch];
                }
            }
        }
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            ishape,
            out,
            rg,
            Record::BatchNorm2d {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Average pooling; the divisor is the full window size, padding included.
    pub fn avg_pool2d(&mut self, input: TensorId, kernel: usize, stride: usize, pad: usize) -> Result<TensorId> {
        let (shape, oh, ow) = self.pool_shape("avg_pool2d", input, kernel, stride, pad)?;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let id = self.data(input);
        let inv = E::one() / E::from_f64((kernel * kernel) as f64);
        let mut out = vec![E::zero(); n * c * oh * ow];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = E::zero();
                        for ky in 0..kernel {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc = acc + id[((b * c + ch) * h + iy as usize) * w + ix as usize];
                            }
                        }
                        out[((b * c + ch) * oh + y) * ow + x] = acc * inv;
                    }
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            vec![n, c, oh, ow],
            out,
            rg,
            Record::AvgPool2d {
                input,
                kernel,
                stride,
                pad,
            },
        ))
    }

    pub fn max_pool2d(&mut self, input: TensorId, kernel: usize, stride: usize, pad: usize) -> Result<TensorId> {
        let (shape, oh, ow) = self.pool_shape("max_pool2d", input, kernel, stride, pad)?;
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let id = self.data(input);
        let mut out = vec![E::zero(); n * c * oh * ow];
        let mut argmax = vec![usize::MAX; n * c * oh * ow];
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut best = E::neg_infinity();
                        let mut best_idx = usize::MAX;
                        for ky in 0..kernel {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (x * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = ((b * c + ch) * h + iy as usize) * w + ix as usize;
                                if id[idx] > best {
                                    best = id[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((b * c + ch) * oh + y) * ow + x;
                        out[o] = if best_idx == usize::MAX { E::zero() } else { best };
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(
            vec![n, c, oh, ow],
            out,
            rg,
            Record::MaxPool2d { input, argmax },
        ))
    }

    fn pool_shape(
        &self,
        op: &'static str,
        input: TensorId,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<(Vec<usize>, usize, usize)> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::shape(op, format!("input {shape:?}")));
        }
        let oh = conv_out_dim(shape[2], kernel, stride, pad, 1)
            .ok_or_else(|| TensorError::shape(op, format!("window {kernel} too large for {shape:?}")))?;
        let ow = conv_out_dim(shape[3], kernel, stride, pad, 1).unwrap();
        Ok((shape, oh, ow))
    }

    /// Depthwise concatenation along the channel axis.
    pub fn concat_channels(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat_channels", "no inputs"));
        }
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 4 {
            return Err(TensorError::shape("concat_channels", format!("input {first:?}")));
        }
        let (n, h, w) = (first[0], first[2], first[3]);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
                return Err(TensorError::shape(
                    "concat_channels",
                    format!("{first:?} vs {s:?}"),
                ));
            }
            c_total += s[1];
        }
        let mut out = vec![E::zero(); n * c_total * h * w];
        let hw = h * w;
        for b in 0..n {
            let mut c_off = 0;
            for &p in parts {
                let cp = self.shape(p)[1];
                let pd = self.data(p);
                let src = &pd[b * cp * hw..(b + 1) * cp * hw];
                out[(b * c_total + c_off) * hw..(b * c_total + c_off + cp) * hw].copy_from_slice(src);
                c_off += cp;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            vec![n, c_total, h, w],
            out,
            rg,
            Record::ConcatChannels(parts.to_vec()),
        ))
    }

    /// (N, C, H, W) -> (N, C) spatial mean.
    pub fn global_avg_pool(&mut self, input: TensorId) -> Result<TensorId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::shape("global_avg_pool", format!("input {shape:?}")));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = E::from_f64((h * w) as f64);
        let id = self.data(input);
        let mut out = vec![E::zero(); n * c];
        for b in 0..n {
            for ch in 0..c {
                let mut acc = E::zero();
                for p in 0..h * w {
                    acc = acc + id[(b * c + ch) * h * w + p];
                }
                out[b * c + ch] = acc / hw;
            }
        }
        let rg = self.rg(input);
        Ok(self.push(vec![n, c], out, rg, Record::GlobalAvgPool(input)))
    }

    /// Mean cross-entropy of `softmax(logits)` against integer labels.
    pub fn cross_entropy_logits(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::shape(
                "cross_entropy_logits",
                format!("logits {shape:?} vs {} labels", labels.len()),
            ));
        }
        let (n, k) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy_logits",
                index: bad,
                len: k,
            });
        }
        let ld = self.data(logits);
        let mut probs = vec![E::zero(); n * k];
        let mut loss = E::zero();
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let mut sum = E::zero();
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs[i * k + j] = e;
                sum = sum + e;
            }
            for j in 0..k {
                probs[i * k + j] = probs[i * k + j] / sum;
            }
            loss = loss + sum.ln() + max - row[labels[i]];
        }
        loss = loss / E::from_f64(n as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Record::CrossEntropyLogits {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse traversal from a scalar loss; populates `grad` on every
    /// reachable tensor with `requires_grad`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if numel(self.shape(loss)) != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        self.backward_runs += 1;
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        grads[loss.0] = Some(vec![E::one()]);

        fn acc<E: Element>(
            nodes: &[Node<E>],
            grads: &mut [Option<Vec<E>>],
            p: TensorId,
            f: impl FnOnce(&mut [E]),
        ) {
            if !nodes[p.0].requires_grad {
                return;
            }
            let buf = grads[p.0].get_or_insert_with(|| vec![E::zero(); nodes[p.0].data.len()]);
            f(buf);
        }

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &nodes[i].op {
                Record::Leaf => {}
                Record::Add(a, b) => {
                    acc(nodes, grads, *a, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g) {
                            *o = *o + gv;
                        }
                    });
                    acc(nodes, grads, *b, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g) {
                            *o = *o + gv;
                        }
                    });
                }
                Record::Sub(a, b) => {
                    acc(nodes, grads, *a, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g) {
                            *o = *o + gv;
                        }
                    });
                    acc(nodes, grads, *b, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g) {
                            *o = *o - gv;
                        }
                    });
                }
                Record::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    acc(nodes, grads, a, |buf| {
                        for ((o, &gv), &bv) in buf.iter_mut().zip(&g).zip(&nodes[b.0].data) {
                            *o = *o + gv * bv;
                        }
                    });
                    acc(nodes, grads, b, |buf| {
                        for ((o, &gv), &av) in buf.iter_mut().zip(&g).zip(&nodes[a.0].data) {
                            *o = *o + gv * av;
                        }
                    });
                }
                Record::Scale(a, c) => {
                    let k = E::from_f64(*c);
                    acc(nodes, grads, *a, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g) {
                            *o = *o + gv * k;
                        }
                    });
                }
                Record::AddRow(a, b) => {
                    let m = nodes[b.0].data.len();
                    acc(nodes, grads, *a, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g) {
                            *o = *o + gv;
                        }
                    });
                    acc(nodes, grads, *b, |buf| {
                        for (j, &gv) in g.iter().enumerate() {
                            buf[j % m] = buf[j % m] + gv;
                        }
                    });
                }
                Record::ScalarMul(s, a) => {
                    let (s, a) = (*s, *a);
                    let k = nodes[s.0].data[0];
                    acc(nodes, grads, a, |buf| {
                        for (o, &gv) in buf.iter_mut().zip(&g) {
                            *o = *o + gv * k;
                        }
                    });
                    acc(nodes, grads, s, |buf| {
                        let mut dot = E::zero();
                        for (&gv, &av) in g.iter().zip(&nodes[a.0].data) {
                            dot = dot + gv * av;
                        }
                        buf[0] = buf[0] + dot;
                    });
                }
                Record::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let n = nodes[a.0].shape[0];
                    let k = nodes[a.0].shape[1];
                    let m = nodes[b.0].shape[1];
                    acc(nodes, grads, a, |buf| {
                        let bd = &nodes[b.0].data;
                        for i2 in 0..n {
                            for j in 0..m {
                                let gv = g[i2 * m + j];
                                for l in 0..k {
                                    buf[i2 * k + l] = buf[i2 * k + l] + gv * bd[l * m + j];
                                }
                            }
                        }
                    });
                    acc(nodes, grads, b, |buf| {
                        let ad = &nodes[a.0].data;
                        for i2 in 0..n {
                            for l in 0..k {
                                let av = ad[i2 * k + l];
                                for j in 0..m {
                                    buf[l * m + j] = buf[l * m + j] + av * g[i2 * m + j];
                                }
                            }
                        }
                    });
                }
                Record::Relu(a) => {
                    let a = *a;
                    acc(nodes, grads, a, |buf| {
                        for ((o, &gv), &xv) in buf.iter_mut().zip(&g).zip(&nodes[a.0].data) {
                            if xv > E::zero() {
                                *o = *o + gv;
                            }
                        }
                    });
                }
                Record::Log(a) => {
                    let a = *a;
                    acc(nodes, grads, a, |buf| {
                        for ((o, &gv), &xv) in buf.iter_mut().zip(&g).zip(&nodes[a.0].data) {
                            *o = *o + gv / xv;
                        }
                    });
                }
                Record::Exp(a) => {
                    let a = *a;
                    let out = &nodes[i].data;
                    acc(nodes, grads, a, |buf| {
                        for ((o, &gv), &yv) in buf.iter_mut().zip(&g).zip(out) {
                            *o = *o + gv * yv;
                        }
                    });
                }
                Record::Softmax1d(a) => {
                    let p = &nodes[i].data;
                    let mut dot = E::zero();
                    for (&gv, &pv) in g.iter().zip(p) {
                        dot = dot + gv * pv;
                    }
                    acc(nodes, grads, *a, |buf| {
                        for ((o, &gv), &pv) in buf.iter_mut().zip(&g).zip(p) {
                            *o = *o + pv * (gv - dot);
                        }
                    });
                }
                Record::Sum(a) => {
                    let gv = g[0];
                    acc(nodes, grads, *a, |buf| {
                        for o in buf.iter_mut() {
                            *o = *o + gv;
                        }
                    });
                }
                Record::Mean(a) => {
                    let a = *a;
                    let gv = g[0] / E::from_f64(nodes[a.0].data.len() as f64);
                    acc(nodes, grads, a, |buf| {
                        for o in buf.iter_mut() {
                            *o = *o + gv;
                        }
                    });
                }
                Record::Index(a, idx) => {
                    let idx = *idx;
                    let gv = g[0];
                    acc(nodes, grads, *a, |buf| {
                        buf[idx] = buf[idx] + gv;
                    });
                }
                Record::Conv2d { input, weight, spec } => {
                    let (input, weight, spec) = (*input, *weight, *spec);
                    let ish = &nodes[input.0].shape;
                    let wsh = &nodes[weight.0].shape;
                    let (n, ci, h, w) = (ish[0], ish[1], ish[2], ish[3]);
                    let (co, cig, kh, kw) = (wsh[0], wsh[1], wsh[2], wsh[3]);
                    let osh = &nodes[i].shape;
                    let (oh, ow) = (osh[2], osh[3]);
                    let gcount = spec.groups;
                    let co_per = co / gcount;
                    acc(nodes, grads, input, |buf| {
                        let wd = &nodes[weight.0].data;
                        conv2d_backward_input(
                            buf, &g, wd, n, ci, h, w, co, cig, kh, kw, oh, ow, gcount, co_per, spec,
                        );
                    });
                    acc(nodes, grads, weight, |buf| {
                        let id = &nodes[input.0].data;
                        conv2d_backward_weight(
                            buf, &g, id, n, ci, h, w, co, cig, kh, kw, oh, ow, gcount, co_per, spec,
                        );
                    });
                }
                Record::BatchNorm2d {
                    input,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (input, gamma, beta) = (*input, *gamma, *beta);
                    let ish = &nodes[input.0].shape;
                    let (n, c, h, w) = (ish[0], ish[1], ish[2], ish[3]);
                    let hw = h * w;
                    let m = E::from_f64((n * hw) as f64);
                    // Per-channel sums of g and g*xhat, reused by all three parents.
                    let mut sum_g = vec![E::zero(); c];
                    let mut sum_gx = vec![E::zero(); c];
                    for b in 0..n {
                        for ch in 0..c {
                            for p in 0..hw {
                                let idx = (b * c + ch) * hw + p;
                                sum_g[ch] = sum_g[ch] + g[idx];
                                sum_gx[ch] = sum_gx[ch] + g[idx] * xhat[idx];
                            }
                        }
                    }
                    acc(nodes, grads, gamma, |buf| {
                        for ch in 0..c {
                            buf[ch] = buf[ch] + sum_gx[ch];
                        }
                    });
                    acc(nodes, grads, beta, |buf| {
                        for ch in 0..c {
                            buf[ch] = buf[ch] + sum_g[ch];
                        }
                    });
                    acc(nodes, grads, input, |buf| {
                        let gd = &nodes[gamma.0].data;
                        for b in 0..n {
                            for ch in 0..c {
                                let k = gd[ch] * inv_std[ch];
                                let mg = sum_g[ch] / m;
                                let mgx = sum_gx[ch] / m;
                                for p in 0..hw {
                                    let idx = (b * c + ch) * hw + p;
                                    buf[idx] = buf[idx] + k * (g[idx] - mg - xhat[idx] * mgx);
                                }
                            }
                        }
                    });
                }
                Record::AvgPool2d {
                    input,
                    kernel,
                    stride,
                    pad,
                } => {
                    let (input, kernel, stride, pad) = (*input, *kernel, *stride, *pad);
                    let ish = &nodes[input.0].shape;
                    let (n, c, h, w) = (ish[0], ish[1], ish[2], ish[3]);
                    let osh = &nodes[i].shape;
                    let (oh, ow) = (osh[2], osh[3]);
                    let inv = E::one() / E::from_f64((kernel * kernel) as f64);
                    acc(nodes, grads, input, |buf| {
                        for b in 0..n {
                            for ch in 0..c {
                                for y in 0..oh {
                                    for x in 0..ow {
                                        let gv = g[((b * c + ch) * oh + y) * ow + x] * inv;
                                        for ky in 0..kernel {
                                            let iy = (y * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kernel {
                                                let ix = (x * stride + kx) as isize - pad as isize;
                                                if ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                let idx = ((b * c + ch) * h + iy as usize) * w + ix as usize;
                                                buf[idx] = buf[idx] + gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Record::MaxPool2d { input, argmax, .. } => {
                    let input = *input;
                    acc(nodes, grads, input, |buf| {
                        for (o, &gv) in argmax.iter().zip(&g) {
                            if *o != usize::MAX {
                                buf[*o] = buf[*o] + gv;
                            }
                        }
                    });
                }
                Record::ConcatChannels(parts) => {
                    let osh = &nodes[i].shape;
                    let (n, c_total, h, w) = (osh[0], osh[1], osh[2], osh[3]);
                    let hw = h * w;
                    let mut c_off = 0;
                    for &p in parts {
                        let cp = nodes[p.0].shape[1];
                        acc(nodes, grads, p, |buf| {
                            for b in 0..n {
                                let src = &g[(b * c_total + c_off) * hw..(b * c_total + c_off + cp) * hw];
                                let dst = &mut buf[b * cp * hw..(b + 1) * cp * hw];
                                for (o, &gv) in dst.iter_mut().zip(src) {
                                    *o = *o + gv;
                                }
                            }
                        });
                        c_off += cp;
                    }
                }
                Record::GlobalAvgPool(input) => {
                    let input = *input;
                    let ish = &nodes[input.0].shape;
                    let (n, c, h, w) = (ish[0], ish[1], ish[2], ish[3]);
                    let hw = h * w;
                    let inv = E::one() / E::from_f64(hw as f64);
                    acc(nodes, grads, input, |buf| {
                        for b in 0..n {
                            for ch in 0..c {
                                let gv = g[b * c + ch] * inv;
                                for p in 0..hw {
                                    let idx = (b * c + ch) * hw + p;
                                    buf[idx] = buf[idx] + gv;
                                }
                            }
                        }
                    });
                }
                Record::CrossEntropyLogits { logits, labels, probs } => {
                    let logits = *logits;
                    let n = labels.len();
                    let k = nodes[logits.0].shape[1];
                    let gv = g[0] / E::from_f64(n as f64);
                    acc(nodes, grads, logits, |buf| {
                        for i2 in 0..n {
                            for j in 0..k {
                                let onehot = if labels[i2] == j { E::one() } else { E::zero() };
                                buf[i2 * k + j] = buf[i2 * k + j] + gv * (probs[i2 * k + j] - onehot);
                            }
                        }
                    });
                }
            }
            grads[i] = Some(g);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input<E: Element>(
    buf: &mut [E],
    g: &[E],
    wd: &[E],
    n: usize,
    _ci: usize,
    h: usize,
    w: usize,
    _co: usize,
    cig: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    groups: usize,
    co_per: usize,
    spec: ConvSpec,
) {
    let ci = _ci;
    let co = _co;
    for b in 0..n {
        for gi in 0..groups {
            for ocl in 0..co_per {
                let oc = gi * co_per + ocl;
                for y in 0..oh {
                    for x in 0..ow {
                        let gv = g[((b * co + oc) * oh + y) * ow + x];
                        for icl in 0..cig {
                            let ic = gi * cig + icl;
                            for ky in 0..kh {
                                let iy = (y * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (x * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let widx = ((oc * cig + icl) * kh + ky) * kw + kx;
                                    let iidx = ((b * ci + ic) * h + iy as usize) * w + ix as usize;
                                    buf[iidx] = buf[iidx] + gv * wd[widx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight<E: Element>(
    buf: &mut [E],
    g: &[E],
    id: &[E],
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    cig: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    groups: usize,
    co_per: usize,
    spec: ConvSpec,
) {
    for b in 0..n {
        for gi in 0..groups {
            for ocl in 0..co_per {
                let oc = gi * co_per + ocl;
                for y in 0..oh {
                    for x in 0..ow {
                        let gv = g[((b * co + oc) * oh + y) * ow + x];
                        for icl in 0..cig {
                            let ic = gi * cig + icl;
                            for ky in 0..kh {
                                let iy = (y * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (x * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let widx = ((oc * cig + icl) * kh + ky) * kw + kx;
                                    let iidx = ((b * ci + ic) * h + iy as usize) * w + ix as usize;
                                    buf[widx] = buf[widx] + gv * id[iidx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

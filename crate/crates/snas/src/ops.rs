//! Candidate operations selectable at each edge, with a static cost model.
//!
//! Convolutions are applied in the order ReLU-Conv-BN; separable convolutions
//! stack the depthwise+pointwise block twice. Costs follow the analytic
//! parameter/FLOP/MAC formulas with composite ops summing over their
//! constituent convolutions.

use crate::error::TensorError;
use crate::params::{Ctx, Init};
use crate::tensor::{conv_out_dim, ConvSpec, Element, TensorId};

type Result<T> = std::result::Result<T, TensorError>;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    Skip,
    Zero,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::Skip => "skip",
            OpKind::Zero => "zero",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "sep_conv_3x3" => OpKind::SepConv3x3,
            "sep_conv_5x5" => OpKind::SepConv5x5,
            "dil_conv_3x3" => OpKind::DilConv3x3,
            "dil_conv_5x5" => OpKind::DilConv5x5,
            "max_pool_3x3" => OpKind::MaxPool3x3,
            "avg_pool_3x3" => OpKind::AvgPool3x3,
            "skip" => OpKind::Skip,
            "zero" => OpKind::Zero,
            _ => return None,
        })
    }

    pub fn has_params(self) -> bool {
        matches!(
            self,
            OpKind::SepConv3x3 | OpKind::SepConv5x5 | OpKind::DilConv3x3 | OpKind::DilConv5x5
        )
    }
}

/// The full-scale candidate list. `zero` is always a member, encoding edge
/// removal.
pub fn full_candidates() -> Vec<OpKind> {
    vec![
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::Skip,
        OpKind::Zero,
    ]
}

/// Reduced 4-op set for fast tests and desk-scale searches.
pub fn reduced_candidates() -> Vec<OpKind> {
    vec![OpKind::SepConv3x3, OpKind::AvgPool3x3, OpKind::Skip, OpKind::Zero]
}

/// Minimal topology-only set: skip and zero.
pub fn topology_candidates() -> Vec<OpKind> {
    vec![OpKind::Skip, OpKind::Zero]
}

fn conv<E: Element>(
    ctx: &mut Ctx<E>,
    name: &str,
    x: TensorId,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    groups: usize,
) -> Result<TensorId> {
    let cig = in_c / groups;
    let fan_in = cig * kernel * kernel;
    let w = ctx.param(
        &format!("{name}.weight"),
        &[out_c, cig, kernel, kernel],
        Init::HeNormal { fan_in },
    )?;
    ctx.tape.conv2d(
        x,
        w,
        ConvSpec {
            stride,
            pad,
            dilation,
            groups,
        },
    )
}

fn batch_norm<E: Element>(ctx: &mut Ctx<E>, name: &str, x: TensorId, channels: usize) -> Result<TensorId> {
    let gamma = ctx.param(&format!("{name}.gamma"), &[channels], Init::Ones)?;
    let beta = ctx.param(&format!("{name}.beta"), &[channels], Init::Zeros)?;
    ctx.tape.batch_norm2d(x, gamma, beta, BN_EPS)
}

/// ReLU -> depthwise conv -> pointwise conv -> BN.
#[allow(clippy::too_many_arguments)]
fn sep_block<E: Element>(
    ctx: &mut Ctx<E>,
    name: &str,
    x: TensorId,
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
) -> Result<TensorId> {
    let pad = dilation * (kernel - 1) / 2;
    let y = ctx.tape.relu(x)?;
    let y = conv(ctx, &format!("{name}.dw"), y, in_c, in_c, kernel, stride, pad, dilation, in_c)?;
    let y = conv(ctx, &format!("{name}.pw"), y, in_c, out_c, 1, 1, 0, 1, 1)?;
    batch_norm(ctx, &format!("{name}.bn"), y, out_c)
}

/// Apply a candidate operation to `x` of shape (batch, in_c, H, W).
///
/// Stride 1 preserves spatial dims via padding; stride 2 halves them. `zero`
/// returns a constant all-zeros tensor of the output shape; `skip` is identity
/// when shapes allow and a strided 1x1 projection otherwise.
pub fn apply_op<E: Element>(
    ctx: &mut Ctx<E>,
    kind: OpKind,
    x: TensorId,
    prefix: &str,
    in_c: usize,
    out_c: usize,
    stride: usize,
) -> Result<TensorId> {
    let shape = ctx.tape.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != in_c {
        return Err(TensorError::shape(
            "apply_op",
            format!("{}: input {shape:?} vs in_c {in_c}", kind.name()),
        ));
    }
    if stride != 1 && stride != 2 {
        return Err(TensorError::invalid(
            "apply_op",
            format!("{}: unsupported stride {stride}", kind.name()),
        ));
    }
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    match kind {
        OpKind::Zero => {
            let oh = conv_out_dim(h, 1, stride, 0, 1).unwrap();
            let ow = conv_out_dim(w, 1, stride, 0, 1).unwrap();
            Ok(ctx.tape.zeros(&[n, out_c, oh, ow]))
        }
        OpKind::Skip => {
            if stride == 1 && in_c == out_c {
                Ok(x)
            } else {
                conv(ctx, &format!("{prefix}.proj"), x, in_c, out_c, 1, stride, 0, 1, 1)
            }
        }
        OpKind::MaxPool3x3 => {
            let y = ctx.tape.max_pool2d(x, 3, stride, 1)?;
            project_channels(ctx, prefix, y, in_c, out_c)
        }
        OpKind::AvgPool3x3 => {
            let y = ctx.tape.avg_pool2d(x, 3, stride, 1)?;
            project_channels(ctx, prefix, y, in_c, out_c)
        }
        OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
            let k = if kind == OpKind::SepConv3x3 { 3 } else { 5 };
            let y = sep_block(ctx, &format!("{prefix}.b1"), x, in_c, in_c, k, stride, 1)?;
            sep_block(ctx, &format!("{prefix}.b2"), y, in_c, out_c, k, 1, 1)
        }
        OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
            let k = if kind == OpKind::DilConv3x3 { 3 } else { 5 };
            sep_block(ctx, &format!("{prefix}.d1"), x, in_c, out_c, k, stride, 2)
        }
    }
}

/// Pools keep the channel count; insert a 1x1 projection only if the edge
/// changes channels.
fn project_channels<E: Element>(
    ctx: &mut Ctx<E>,
    prefix: &str,
    x: TensorId,
    in_c: usize,
    out_c: usize,
) -> Result<TensorId> {
    if in_c == out_c {
        Ok(x)
    } else {
        conv(ctx, &format!("{prefix}.proj"), x, in_c, out_c, 1, 1, 0, 1, 1)
    }
}

// ── Cost model ──────────────────────────────────────────────────────────

/// (parameter size, FLOPs, memory access cost) of one candidate op on one
/// edge, given the edge's spatial dims and channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OpCost {
    pub params: u64,
    pub flops: u64,
    pub mac: u64,
}

impl OpCost {
    pub fn sum(self, other: OpCost) -> OpCost {
        OpCost {
            params: self.params + other.params,
            flops: self.flops + other.flops,
            mac: self.mac + other.mac,
        }
    }
}

/// Single convolutional layer: params = fkIO/g, FLOPs = HWfkIO/g,
/// MAC = HW(I+O) + fkIO/g. H and W are the layer's output spatial dims.
pub fn conv_cost(f: u64, k: u64, i: u64, o: u64, g: u64, h: u64, w: u64) -> OpCost {
    let params = f * k * i * o / g;
    OpCost {
        params,
        flops: h * w * params,
        mac: h * w * (i + o) + params,
    }
}

/// Pooling: parameter free, FLOPs = HWfkIO, MAC = HW(I+O).
pub fn pool_cost(f: u64, k: u64, i: u64, o: u64, h: u64, w: u64) -> OpCost {
    OpCost {
        params: 0,
        flops: h * w * f * k * i * o,
        mac: h * w * (i + o),
    }
}

/// Exact cost triple of a candidate op on an edge with input spatial dims
/// (h, w), `i` input and `o` output channels, and the given stride.
pub fn op_cost(kind: OpKind, h: usize, w: usize, i: usize, o: usize, stride: usize) -> OpCost {
    let oh = conv_out_dim(h, 1, stride, 0, 1).unwrap() as u64;
    let ow = conv_out_dim(w, 1, stride, 0, 1).unwrap() as u64;
    let (i, o) = (i as u64, o as u64);
    match kind {
        OpKind::Zero => OpCost::default(),
        OpKind::Skip => OpCost {
            params: 0,
            flops: 0,
            mac: oh * ow * (i + o),
        },
        OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => pool_cost(3, 3, i, o, oh, ow),
        OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
            let k = if kind == OpKind::SepConv3x3 { 3 } else { 5 };
            conv_cost(k, k, i, i, i, oh, ow)
                .sum(conv_cost(1, 1, i, i, 1, oh, ow))
                .sum(conv_cost(k, k, i, i, i, oh, ow))
                .sum(conv_cost(1, 1, i, o, 1, oh, ow))
        }
        OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
            let k = if kind == OpKind::DilConv3x3 { 3 } else { 5 };
            conv_cost(k, k, i, i, i, oh, ow).sum(conv_cost(1, 1, i, o, 1, oh, ow))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use crate::params::ParamStore;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plain_conv_reference_triple() {
        // f=k=3, I=O=16, g=1, H=W=8.
        let c = conv_cost(3, 3, 16, 16, 1, 8, 8);
        assert_eq!(c.params, 2304);
        assert_eq!(c.flops, 147_456);
        assert_eq!(c.mac, 2048 + 2304);
    }

    #[test]
    fn skip_and_zero_costs() {
        let skip = op_cost(OpKind::Skip, 8, 8, 16, 16, 1);
        assert_eq!((skip.params, skip.flops, skip.mac), (0, 0, 2048));
        let zero = op_cost(OpKind::Zero, 8, 8, 16, 16, 1);
        assert_eq!((zero.params, zero.flops, zero.mac), (0, 0, 0));
    }

    #[test]
    fn conv_ops_flops_proportional_to_params() {
        for kind in [OpKind::SepConv3x3, OpKind::SepConv5x5, OpKind::DilConv3x3, OpKind::DilConv5x5] {
            let c = op_cost(kind, 8, 8, 16, 16, 1);
            assert_eq!(c.flops, 8 * 8 * c.params, "{kind:?}");
        }
    }

    #[test]
    fn cost_triple_distinguishes_op_classes() {
        // conv vs pool differ in params, pool vs skip in flops, skip vs zero in mac.
        let conv = op_cost(OpKind::SepConv3x3, 8, 8, 16, 16, 1);
        let pool = op_cost(OpKind::AvgPool3x3, 8, 8, 16, 16, 1);
        let skip = op_cost(OpKind::Skip, 8, 8, 16, 16, 1);
        let zero = op_cost(OpKind::Zero, 8, 8, 16, 16, 1);
        assert_ne!(conv.params, pool.params);
        assert_ne!(pool.flops, skip.flops);
        assert_ne!(skip.mac, zero.mac);
        let all = [conv, pool, skip, zero];
        for a in 0..4 {
            for b in a + 1..4 {
                assert_ne!(all[a], all[b], "{a} vs {b}");
            }
        }
    }

    fn run_op(kind: OpKind, in_c: usize, out_c: usize, stride: usize) -> (Vec<usize>, Vec<f64>) {
        let mut store = ParamStore::<f64>::new(11);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x_data: Vec<f64> = (0..2 * in_c * 4 * 4).map(|_| rng.random::<f64>() - 0.5).collect();
        let x = ctx.tape.leaf(&[2, in_c, 4, 4], x_data, false).unwrap();
        let y = apply_op(&mut ctx, kind, x, "op", in_c, out_c, stride).unwrap();
        (ctx.tape.shape(y).to_vec(), ctx.tape.data(y).to_vec())
    }

    #[test]
    fn zero_returns_all_zeros_of_output_shape() {
        let (shape, data) = run_op(OpKind::Zero, 3, 5, 2);
        assert_eq!(shape, vec![2, 5, 2, 2]);
        assert!(data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn skip_stride1_same_channels_is_identity() {
        let mut store = ParamStore::<f64>::new(11);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, false);
        let x_data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| i as f64 * 0.1).collect();
        let x = ctx.tape.leaf(&[2, 3, 4, 4], x_data.clone(), false).unwrap();
        let y = apply_op(&mut ctx, OpKind::Skip, x, "op", 3, 3, 1).unwrap();
        assert_eq!(ctx.tape.data(y), &x_data[..]);
    }

    #[test]
    fn avg_pool_on_constant_is_constant_in_interior() {
        let mut store = ParamStore::<f64>::new(11);
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut store, false);
        let x = ctx.tape.leaf(&[1, 1, 5, 5], vec![3.0; 25], false).unwrap();
        let y = apply_op(&mut ctx, OpKind::AvgPool3x3, x, "op", 1, 1, 1).unwrap();
        let d = ctx.tape.data(y);
        // interior element (2,2)
        assert!((d[2 * 5 + 2] - 3.0).abs() < 1e-12);
        // corner sees 4 of 9 window cells
        assert!((d[0] - 3.0 * 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn parameterized_ops_pass_gradient_checks() {
        for kind in [OpKind::SepConv3x3, OpKind::SepConv5x5, OpKind::DilConv3x3, OpKind::DilConv5x5] {
            for stride in [1, 2] {
                let mut store = ParamStore::<f64>::new(23);
                let mut rng = ChaCha8Rng::seed_from_u64(17);
                let x_data: Vec<f64> = (0..1 * 2 * 6 * 6).map(|_| rng.random::<f64>() - 0.5).collect();
                store.insert_raw("x", vec![1, 2, 6, 6], x_data);
                let report = check_param_gradients(&mut store, 1e-5, &move |ctx| {
                    let x = ctx.param("x", &[1, 2, 6, 6], Init::Zeros)?;
                    let y = apply_op(ctx, kind, x, "op", 2, 3, stride)?;
                    let y2 = ctx.tape.mul(y, y)?;
                    ctx.tape.mean(y2)
                })
                .unwrap();
                assert!(
                    report.max_rel_err < 1e-4,
                    "{kind:?} stride {stride}: {report:?}"
                );
            }
        }
    }
}

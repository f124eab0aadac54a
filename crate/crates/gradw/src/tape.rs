//! Reverse-mode differentiation tape.
//!
//! Ops are recorded during the forward pass; `backward_to` replays them in
//! reverse from a scalar and returns the gradient for every requested tap
//! (flagged intermediate activation) plus one gradient per registered
//! parameter. The tape is rebuilt per forward pass and confined to one
//! thread; distinct tapes may run in parallel.

use std::cell::RefCell;
use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use indexmap::IndexMap;

use crate::conv::{
    conv2d_forward, conv2d_grad_input, conv2d_grad_kernel, conv_out_extent, tconv2d_forward,
    tconv2d_grad_input, tconv2d_grad_kernel, tconv_out_extent, ConvGeom,
};
use crate::error::{Error, Result};
use crate::params::Param;
use crate::tensor::{NodeRef, Precision, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvMode {
    Forward,
    Transposed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsMode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointwiseKind {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    MeanAndStd,
}

/// Broadcast domain for weighting a `[C, T, F]` tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BcastDomain {
    /// Weight indexed by (t, f), applied to every channel.
    TimeFreq,
    /// Weight indexed by channel, applied to every (t, f) bin.
    Channel,
}

/// Per-channel statistics observed by a batch-norm layer in train mode.
#[derive(Clone, Debug)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
enum OpKind {
    Leaf,
    Conv {
        geom: ConvGeom,
        transposed: bool,
    },
    /// saved: [mean per channel, inv_std per channel]
    Norm {
        affine_eval: bool,
    },
    Pointwise(PointwiseKind),
    Softmax {
        axes: Vec<bool>,
    },
    Reduce {
        kind: ReduceKind,
        axes: Vec<bool>,
    },
    Affine,
    Add,
    Sub,
    Mul,
    Abs,
    Scale(f64),
    MulBcast(BcastDomain),
    ConcatC {
        c_first: usize,
    },
    CropPad,
    Reshape,
    /// saved: softmax probabilities
    CrossEntropy {
        target: usize,
    },
    Select {
        index: usize,
    },
}

#[derive(Clone)]
struct ParentRef {
    node: Option<usize>,
    values: Arc<Vec<f64>>,
    shape: Vec<usize>,
}

struct Node {
    op: OpKind,
    parents: Vec<ParentRef>,
    out: Arc<Vec<f64>>,
    out_shape: Vec<usize>,
    saved: Vec<f64>,
}

struct Inner {
    nodes: Vec<Node>,
    params: IndexMap<String, usize>,
    taps: HashSet<usize>,
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub struct Tape {
    id: u64,
    precision: Precision,
    inner: RefCell<Inner>,
}

/// Gradient returned for one tap, shape-matching the tapped activation.
#[derive(Clone, Debug)]
pub struct TapGrad {
    pub values: Vec<f64>,
    pub shape: Vec<usize>,
    /// False when the scalar had no path to this tap; values are then zero.
    pub connected: bool,
}

/// Result of one backward pass.
pub struct BackwardOutput {
    /// Aligned with the `taps` argument of `backward_to`.
    pub tap_grads: Vec<TapGrad>,
    /// One entry per registered parameter, zeros when disconnected.
    pub param_grads: IndexMap<String, Vec<f64>>,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            precision,
            inner: RefCell::new(Inner {
                nodes: Vec::new(),
                params: IndexMap::new(),
                taps: HashSet::new(),
            }),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn quantize(&self, mut values: Vec<f64>) -> Vec<f64> {
        self.precision.quantize_slice(&mut values);
        values
    }

    fn parent_of(&self, t: &Tensor) -> ParentRef {
        let node = t
            .tape_node()
            .filter(|n| n.tape_id == self.id)
            .map(|n| n.index);
        ParentRef {
            node,
            values: t.values_arc(),
            shape: t.shape().to_vec(),
        }
    }

    fn push(
        &self,
        op: OpKind,
        parents: Vec<ParentRef>,
        out: Vec<f64>,
        out_shape: Vec<usize>,
        saved: Vec<f64>,
        requires_grad: bool,
    ) -> Tensor {
        let out = Arc::new(out);
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            parents,
            out: Arc::clone(&out),
            out_shape: out_shape.clone(),
            saved,
        });
        Tensor::new(
            out,
            out_shape,
            Some(NodeRef {
                tape_id: self.id,
                index,
            }),
            requires_grad,
        )
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Off-tape constant; no gradient ever flows to or through it.
    pub fn constant(&self, values: Vec<f64>, shape: &[usize]) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor::new(Arc::new(self.quantize(values)), shape.to_vec(), None, false)
    }

    /// On-tape leaf (can be tapped); not a parameter.
    pub fn leaf(&self, values: Vec<f64>, shape: &[usize]) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.push(
            OpKind::Leaf,
            Vec::new(),
            self.quantize(values),
            shape.to_vec(),
            Vec::new(),
            false,
        )
    }

    /// Binds a named parameter onto the tape. Binding the same name twice
    /// returns the same node, so gradients from repeated uses accumulate.
    pub fn param(&self, name: &str, param: &Param) -> Tensor {
        if let Some(&index) = self.inner.borrow().params.get(name) {
            let inner = self.inner.borrow();
            let node = &inner.nodes[index];
            return Tensor::new(
                Arc::clone(&node.out),
                node.out_shape.clone(),
                Some(NodeRef {
                    tape_id: self.id,
                    index,
                }),
                true,
            );
        }
        let t = self.push(
            OpKind::Leaf,
            Vec::new(),
            param.values().to_vec(),
            param.shape().to_vec(),
            Vec::new(),
            true,
        );
        let index = t.tape_node().unwrap().index;
        self.inner.borrow_mut().params.insert(name.to_string(), index);
        t
    }

    /// Flags a node for gradient capture by `backward_to`.
    pub fn mark_tap(&self, t: &Tensor) -> Result<()> {
        let node = t
            .tape_node()
            .filter(|n| n.tape_id == self.id)
            .ok_or_else(|| Error::InvalidArgument {
                op: "mark_tap",
                msg: "tensor is not on this tape".into(),
            })?;
        self.inner.borrow_mut().taps.insert(node.index);
        Ok(())
    }

    // ── Convolution ─────────────────────────────────────────────────

    /// 2-D convolution over `[C, T, F]`. Forward kernels are
    /// `[C_out, C_in, kT, kF]`; transposed kernels `[C_in, C_out, kT, kF]`.
    pub fn conv_layer(
        &self,
        input: &Tensor,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        mode: ConvMode,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Tensor> {
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidArgument {
                op: "conv_layer",
                msg: "stride must be >= 1".into(),
            });
        }
        let ishape = input.shape();
        if ishape.len() != 3 {
            return Err(Error::InvalidArgument {
                op: "conv_layer",
                msg: format!("input must be [C, T, F], got {} dims", ishape.len()),
            });
        }
        let kshape = kernel.shape();
        if kshape.len() != 4 {
            return Err(Error::InvalidArgument {
                op: "conv_layer",
                msg: format!("kernel must be 4-D, got {} dims", kshape.len()),
            });
        }
        let (c_in, t_in, f_in) = (ishape[0], ishape[1], ishape[2]);
        let transposed = mode == ConvMode::Transposed;
        let (kc_in, c_out) = if transposed {
            (kshape[0], kshape[1])
        } else {
            (kshape[1], kshape[0])
        };
        if kc_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv_layer",
                axis: 0,
                expected: c_in,
                got: kc_in,
            });
        }
        let (kt, kf) = (kshape[2], kshape[3]);
        let extent = |n, k, s, p| {
            if transposed {
                tconv_out_extent(n, k, s, p)
            } else {
                conv_out_extent(n, k, s, p)
            }
        };
        let t_out = extent(t_in, kt, stride.0, padding.0).ok_or(Error::ZeroExtent {
            op: "conv_layer",
            axis: 1,
            input: t_in,
            kernel: kt,
            stride: stride.0,
            pad: padding.0,
        })?;
        let f_out = extent(f_in, kf, stride.1, padding.1).ok_or(Error::ZeroExtent {
            op: "conv_layer",
            axis: 2,
            input: f_in,
            kernel: kf,
            stride: stride.1,
            pad: padding.1,
        })?;
        if let Some(b) = bias {
            if b.len() != c_out {
                return Err(Error::ShapeMismatch {
                    op: "conv_layer",
                    axis: 0,
                    expected: c_out,
                    got: b.len(),
                });
            }
        }
        let geom = ConvGeom {
            c_in,
            c_out,
            t_in,
            f_in,
            t_out,
            f_out,
            kt,
            kf,
            st: stride.0,
            sf: stride.1,
            pt: padding.0,
            pf: padding.1,
        };
        let mut out = vec![0.0; c_out * t_out * f_out];
        if transposed {
            tconv2d_forward(geom, input.values(), kernel.values(), bias.map(|b| b.values()), &mut out);
        } else {
            conv2d_forward(geom, input.values(), kernel.values(), bias.map(|b| b.values()), &mut out);
        }
        let mut parents = vec![self.parent_of(input), self.parent_of(kernel)];
        if let Some(b) = bias {
            parents.push(self.parent_of(b));
        }
        Ok(self.push(
            OpKind::Conv { geom, transposed },
            parents,
            self.quantize(out),
            vec![c_out, t_out, f_out],
            Vec::new(),
            true,
        ))
    }

    // ── Normalization ────────────────────────────────────────────────

    /// Per-channel normalization of a `[C, T, F]` tensor.
    ///
    /// Instance mode (and batch mode in train stats) normalizes with the
    /// statistics of this sample; batch mode in eval stats applies the
    /// running statistics as a fixed affine map. Train-mode batch calls
    /// return the observed per-channel stats so the caller can fold them
    /// into the running buffers in a deterministic order.
    #[allow(clippy::too_many_arguments)]
    pub fn normalize_2d(
        &self,
        input: &Tensor,
        mode: NormMode,
        scale: &Tensor,
        shift: &Tensor,
        stats_mode: StatsMode,
        running: Option<(&[f64], &[f64])>,
        epsilon: f64,
    ) -> Result<(Tensor, Option<ChannelStats>)> {
        if epsilon <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "normalize_2d",
                msg: "epsilon must be positive".into(),
            });
        }
        let ishape = input.shape();
        if ishape.len() != 3 {
            return Err(Error::InvalidArgument {
                op: "normalize_2d",
                msg: format!("input must be [C, T, F], got {} dims", ishape.len()),
            });
        }
        let (c, t, f) = (ishape[0], ishape[1], ishape[2]);
        if scale.len() != c {
            return Err(Error::ShapeMismatch {
                op: "normalize_2d",
                axis: 0,
                expected: c,
                got: scale.len(),
            });
        }
        if shift.len() != c {
            return Err(Error::ShapeMismatch {
                op: "normalize_2d",
                axis: 0,
                expected: c,
                got: shift.len(),
            });
        }
        let n = t * f;
        let x = input.values();
        let use_running = mode == NormMode::Batch && stats_mode == StatsMode::Eval;
        let (mean, var, observed) = if use_running {
            let (rm, rv) = running.ok_or(Error::MissingRunningStats)?;
            if rm.len() != c || rv.len() != c {
                return Err(Error::ShapeMismatch {
                    op: "normalize_2d",
                    axis: 0,
                    expected: c,
                    got: rm.len(),
                });
            }
            (rm.to_vec(), rv.to_vec(), None)
        } else {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let row = &x[ch * n..(ch + 1) * n];
                let m = row.iter().sum::<f64>() / n as f64;
                let v = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                mean[ch] = m;
                var[ch] = v;
            }
            let obs = ChannelStats {
                mean: mean.clone(),
                var: var.clone(),
            };
            (mean, var, Some(obs))
        };
        let gamma = scale.values();
        let beta = shift.values();
        let mut out = vec![0.0; x.len()];
        let mut saved = Vec::with_capacity(2 * c);
        saved.extend_from_slice(&mean);
        for ch in 0..c {
            let istd = 1.0 / (var[ch] + epsilon).sqrt();
            saved.push(istd);
            let (g, b, m) = (gamma[ch], beta[ch], mean[ch]);
            for (o, v) in out[ch * n..(ch + 1) * n].iter_mut().zip(&x[ch * n..(ch + 1) * n]) {
                *o = (v - m) * istd * g + b;
            }
        }
        let parents = vec![
            self.parent_of(input),
            self.parent_of(scale),
            self.parent_of(shift),
        ];
        let t_out = self.push(
            OpKind::Norm {
                affine_eval: use_running,
            },
            parents,
            self.quantize(out),
            ishape.to_vec(),
            saved,
            true,
        );
        Ok((t_out, observed))
    }

    // ── Pointwise ────────────────────────────────────────────────────

    pub fn pointwise(&self, input: &Tensor, kind: PointwiseKind) -> Tensor {
        let out: Vec<f64> = match kind {
            PointwiseKind::Relu => input.values().iter().map(|&v| v.max(0.0)).collect(),
            PointwiseKind::Sigmoid => {
                let lo = self.precision.min_positive();
                let hi = self.precision.below_one();
                input
                    .values()
                    .iter()
                    .map(|&v| {
                        let s = if v >= 0.0 {
                            1.0 / (1.0 + (-v).exp())
                        } else {
                            let e = v.exp();
                            e / (1.0 + e)
                        };
                        self.precision.quantize(s).clamp(lo, hi)
                    })
                    .collect()
            }
        };
        let out = match kind {
            PointwiseKind::Relu => self.quantize(out),
            PointwiseKind::Sigmoid => out, // already quantized and clamped
        };
        self.push(
            OpKind::Pointwise(kind),
            vec![self.parent_of(input)],
            out,
            input.shape().to_vec(),
            Vec::new(),
            true,
        )
    }

    pub fn relu(&self, input: &Tensor) -> Tensor {
        self.pointwise(input, PointwiseKind::Relu)
    }

    pub fn sigmoid(&self, input: &Tensor) -> Tensor {
        self.pointwise(input, PointwiseKind::Sigmoid)
    }

    // ── Softmax over an axis set ─────────────────────────────────────

    /// Softmax normalized jointly over `axes`, per remaining index.
    /// Stabilized by subtracting the per-group maximum.
    pub fn softmax_over(&self, input: &Tensor, axes: &[usize]) -> Result<Tensor> {
        let mask = axes_mask(input.shape(), axes, "softmax_over")?;
        let (outer, inner) = group_offsets(input.shape(), &mask);
        let x = input.values();
        let mut out = vec![0.0; x.len()];
        for &base in &outer {
            let mut max = f64::NEG_INFINITY;
            for &off in &inner {
                max = max.max(x[base + off]);
            }
            let mut sum = 0.0;
            for &off in &inner {
                let e = (x[base + off] - max).exp();
                out[base + off] = e;
                sum += e;
            }
            for &off in &inner {
                out[base + off] /= sum;
            }
        }
        // keep strictly inside (0, 1) at storage precision
        let lo = self.precision.min_positive();
        let hi = self.precision.below_one();
        for v in out.iter_mut() {
            *v = self.precision.quantize(*v).clamp(lo, hi);
        }
        Ok(self.push(
            OpKind::Softmax { axes: mask },
            vec![self.parent_of(input)],
            out,
            input.shape().to_vec(),
            Vec::new(),
            true,
        ))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn reduce(&self, input: &Tensor, kind: ReduceKind, axes: &[usize]) -> Result<Tensor> {
        let mask = axes_mask(input.shape(), axes, "reduce")?;
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                let (outer, inner) = group_offsets(input.shape(), &mask);
                let n = inner.len() as f64;
                let x = input.values();
                let mut out = Vec::with_capacity(outer.len());
                for &base in &outer {
                    let s: f64 = inner.iter().map(|&off| x[base + off]).sum();
                    out.push(if kind == ReduceKind::Mean { s / n } else { s });
                }
                let out_shape = remaining_shape(input.shape(), &mask);
                Ok(self.push(
                    OpKind::Reduce { kind, axes: mask },
                    vec![self.parent_of(input)],
                    self.quantize(out),
                    out_shape,
                    Vec::new(),
                    true,
                ))
            }
            ReduceKind::MeanAndStd => {
                // mean+std pooling of [C, T, F] over (t, f), concatenated
                // along channel: output [2C].
                if input.shape().len() != 3 || !mask[1] || !mask[2] || mask[0] {
                    return Err(Error::InvalidArgument {
                        op: "reduce",
                        msg: "mean_and_std expects a [C, T, F] input reduced over axes (1, 2)"
                            .into(),
                    });
                }
                let (c, t, f) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let n = t * f;
                if n < 2 {
                    return Err(Error::InvalidArgument {
                        op: "reduce",
                        msg: format!("mean_and_std needs reduced extent >= 2, got {n}"),
                    });
                }
                let x = input.values();
                let mut out = vec![0.0; 2 * c];
                let mut saved = vec![0.0; 2 * c];
                for ch in 0..c {
                    let row = &x[ch * n..(ch + 1) * n];
                    let m = row.iter().sum::<f64>() / n as f64;
                    let v = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
                    let s = v.sqrt();
                    out[ch] = m;
                    out[c + ch] = s;
                    saved[ch] = m;
                    saved[c + ch] = s;
                }
                Ok(self.push(
                    OpKind::Reduce { kind, axes: mask },
                    vec![self.parent_of(input)],
                    self.quantize(out),
                    vec![2 * c],
                    saved,
                    true,
                ))
            }
        }
    }

    pub fn sum_all(&self, input: &Tensor) -> Result<Tensor> {
        let axes: Vec<usize> = (0..input.shape().len()).collect();
        self.reduce(input, ReduceKind::Sum, &axes)
    }

    // ── Affine ───────────────────────────────────────────────────────

    /// `weight · input + bias` for a vector input.
    pub fn affine(&self, input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let n = input.len();
        let wshape = weight.shape();
        if wshape.len() != 2 || wshape[1] != n {
            return Err(Error::ShapeMismatch {
                op: "affine",
                axis: 1,
                expected: n,
                got: if wshape.len() == 2 { wshape[1] } else { 0 },
            });
        }
        let m = wshape[0];
        if bias.len() != m {
            return Err(Error::ShapeMismatch {
                op: "affine",
                axis: 0,
                expected: m,
                got: bias.len(),
            });
        }
        let x = input.values();
        let w = weight.values();
        let b = bias.values();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &w[i * n..(i + 1) * n];
            let dot: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            out.push(dot + b[i]);
        }
        Ok(self.push(
            OpKind::Affine,
            vec![
                self.parent_of(input),
                self.parent_of(weight),
                self.parent_of(bias),
            ],
            self.quantize(out),
            vec![m],
            Vec::new(),
            true,
        ))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary(&self, op: OpKind, a: &Tensor, b: &Tensor, name: &'static str) -> Result<Tensor> {
        if a.shape() != b.shape() {
            let axis = a
                .shape()
                .iter()
                .zip(b.shape())
                .position(|(x, y)| x != y)
                .unwrap_or(0);
            return Err(Error::ShapeMismatch {
                op: name,
                axis,
                expected: a.shape().get(axis).copied().unwrap_or(0),
                got: b.shape().get(axis).copied().unwrap_or(0),
            });
        }
        let out: Vec<f64> = match op {
            OpKind::Add => a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect(),
            OpKind::Sub => a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect(),
            OpKind::Mul => a.values().iter().zip(b.values()).map(|(x, y)| x * y).collect(),
            _ => unreachable!(),
        };
        Ok(self.push(
            op,
            vec![self.parent_of(a), self.parent_of(b)],
            self.quantize(out),
            a.shape().to_vec(),
            Vec::new(),
            true,
        ))
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(OpKind::Add, a, b, "add")
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(OpKind::Sub, a, b, "sub")
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(OpKind::Mul, a, b, "mul")
    }

    pub fn abs(&self, input: &Tensor) -> Tensor {
        let out: Vec<f64> = input.values().iter().map(|v| v.abs()).collect();
        self.push(
            OpKind::Abs,
            vec![self.parent_of(input)],
            self.quantize(out),
            input.shape().to_vec(),
            Vec::new(),
            true,
        )
    }

    pub fn scale(&self, input: &Tensor, factor: f64) -> Tensor {
        let out: Vec<f64> = input.values().iter().map(|v| v * factor).collect();
        self.push(
            OpKind::Scale(factor),
            vec![self.parent_of(input)],
            self.quantize(out),
            input.shape().to_vec(),
            Vec::new(),
            true,
        )
    }

    /// Multiply a `[C, T, F]` tensor by a weight map broadcast over the
    /// complementary domain.
    pub fn mul_bcast(&self, input: &Tensor, weight: &Tensor, domain: BcastDomain) -> Result<Tensor> {
        let ishape = input.shape();
        if ishape.len() != 3 {
            return Err(Error::InvalidArgument {
                op: "mul_bcast",
                msg: format!("input must be [C, T, F], got {} dims", ishape.len()),
            });
        }
        let (c, t, f) = (ishape[0], ishape[1], ishape[2]);
        let expected = match domain {
            BcastDomain::TimeFreq => t * f,
            BcastDomain::Channel => c,
        };
        if weight.len() != expected {
            return Err(Error::ShapeMismatch {
                op: "mul_bcast",
                axis: if domain == BcastDomain::Channel { 0 } else { 1 },
                expected,
                got: weight.len(),
            });
        }
        let x = input.values();
        let w = weight.values();
        let plane = t * f;
        let mut out = vec![0.0; x.len()];
        match domain {
            BcastDomain::TimeFreq => {
                for ch in 0..c {
                    for (o, (xv, wv)) in out[ch * plane..(ch + 1) * plane]
                        .iter_mut()
                        .zip(x[ch * plane..(ch + 1) * plane].iter().zip(w))
                    {
                        *o = xv * wv;
                    }
                }
            }
            BcastDomain::Channel => {
                for ch in 0..c {
                    let wv = w[ch];
                    for (o, xv) in out[ch * plane..(ch + 1) * plane]
                        .iter_mut()
                        .zip(&x[ch * plane..(ch + 1) * plane])
                    {
                        *o = xv * wv;
                    }
                }
            }
        }
        Ok(self.push(
            OpKind::MulBcast(domain),
            vec![self.parent_of(input), self.parent_of(weight)],
            self.quantize(out),
            ishape.to_vec(),
            Vec::new(),
            true,
        ))
    }

    /// Concatenate two `[C, T, F]` tensors along the channel axis.
    pub fn concat_channels(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[1] != sb[1] || sa[2] != sb[2] {
            let axis = if sa.len() == 3 && sb.len() == 3 && sa[1] != sb[1] { 1 } else { 2 };
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                axis,
                expected: sa.get(axis).copied().unwrap_or(0),
                got: sb.get(axis).copied().unwrap_or(0),
            });
        }
        let mut out = Vec::with_capacity(a.len() + b.len());
        out.extend_from_slice(a.values());
        out.extend_from_slice(b.values());
        Ok(self.push(
            OpKind::ConcatC { c_first: sa[0] },
            vec![self.parent_of(a), self.parent_of(b)],
            out,
            vec![sa[0] + sb[0], sa[1], sa[2]],
            Vec::new(),
            true,
        ))
    }

    /// Crops (from the origin) or zero-pads (at the end) the time and
    /// frequency axes of a `[C, T, F]` tensor to exact target extents.
    pub fn crop_pad(&self, input: &Tensor, target_t: usize, target_f: usize) -> Result<Tensor> {
        let ishape = input.shape();
        if ishape.len() != 3 {
            return Err(Error::InvalidArgument {
                op: "crop_pad",
                msg: format!("input must be [C, T, F], got {} dims", ishape.len()),
            });
        }
        let (c, t, f) = (ishape[0], ishape[1], ishape[2]);
        let x = input.values();
        let mut out = vec![0.0; c * target_t * target_f];
        let ct = t.min(target_t);
        let cf = f.min(target_f);
        for ch in 0..c {
            for row in 0..ct {
                let src = &x[(ch * t + row) * f..][..cf];
                out[(ch * target_t + row) * target_f..][..cf].copy_from_slice(src);
            }
        }
        Ok(self.push(
            OpKind::CropPad,
            vec![self.parent_of(input)],
            out,
            vec![c, target_t, target_f],
            Vec::new(),
            true,
        ))
    }

    /// Same values under a new shape with equal element count.
    pub fn reshape(&self, input: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != input.len() {
            return Err(Error::InvalidArgument {
                op: "reshape",
                msg: format!("cannot reshape {} elements to {shape:?}", input.len()),
            });
        }
        Ok(self.push(
            OpKind::Reshape,
            vec![self.parent_of(input)],
            input.values().to_vec(),
            shape.to_vec(),
            Vec::new(),
            true,
        ))
    }

    /// Numerically stable cross-entropy of a logit vector against one class.
    pub fn cross_entropy(&self, logits: &Tensor, target: usize) -> Result<Tensor> {
        let n = logits.len();
        if target >= n {
            return Err(Error::InvalidArgument {
                op: "cross_entropy",
                msg: format!("target {target} out of range for {n} logits"),
            });
        }
        let z = logits.values();
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs = vec![0.0; n];
        let mut sum = 0.0;
        for (p, &v) in probs.iter_mut().zip(z) {
            let e = (v - max).exp();
            *p = e;
            sum += e;
        }
        for p in probs.iter_mut() {
            *p /= sum;
        }
        let loss = max + sum.ln() - z[target];
        Ok(self.push(
            OpKind::CrossEntropy { target },
            vec![self.parent_of(logits)],
            self.quantize(vec![loss]),
            vec![1],
            probs,
            true,
        ))
    }

    /// Extracts a single element as a scalar tensor.
    pub fn select(&self, input: &Tensor, index: usize) -> Result<Tensor> {
        if index >= input.len() {
            return Err(Error::InvalidArgument {
                op: "select",
                msg: format!("index {index} out of range for {} elements", input.len()),
            });
        }
        let v = input.values()[index];
        Ok(self.push(
            OpKind::Select { index },
            vec![self.parent_of(input)],
            vec![v],
            vec![1],
            Vec::new(),
            true,
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Replays the tape in reverse from `scalar`, returning the gradient of
    /// the scalar with respect to every requested tap plus one gradient per
    /// registered parameter. Taps must have been flagged with `mark_tap`
    /// beforehand; a tap the scalar cannot reach yields a zero gradient
    /// flagged as disconnected. Repeated calls are independent and produce
    /// identical results.
    pub fn backward_to(&self, scalar: &Tensor, taps: &[&Tensor]) -> Result<BackwardOutput> {
        self.backward_to_with_floor(scalar, taps, None)
    }

    /// `backward_to` with the reverse sweep cut off below `floor`: nodes
    /// recorded before the floor tensor receive no adjoints. Taps must lie
    /// above the floor; parameters below it report zero gradients.
    pub fn backward_to_with_floor(
        &self,
        scalar: &Tensor,
        taps: &[&Tensor],
        floor: Option<&Tensor>,
    ) -> Result<BackwardOutput> {
        let root = scalar
            .tape_node()
            .filter(|n| n.tape_id == self.id)
            .ok_or_else(|| Error::NotAScalar("tensor is not on the active tape".into()))?;
        if scalar.len() != 1 {
            return Err(Error::NotAScalar(format!(
                "expected extent 1, got {} elements",
                scalar.len()
            )));
        }
        let inner = self.inner.borrow();
        let mut tap_indices = Vec::with_capacity(taps.len());
        for t in taps {
            let node = t
                .tape_node()
                .filter(|n| n.tape_id == self.id)
                .ok_or(Error::TapNotRegistered(usize::MAX))?;
            if !inner.taps.contains(&node.index) {
                return Err(Error::TapNotRegistered(node.index));
            }
            tap_indices.push(node.index);
        }

        let floor_index = floor
            .and_then(|t| t.tape_node())
            .filter(|n| n.tape_id == self.id)
            .map_or(0, |n| n.index);
        let mut adjoints: Vec<Option<Vec<f64>>> = vec![None; root.index + 1];
        adjoints[root.index] = Some(vec![1.0]);
        for i in (floor_index..=root.index).rev() {
            let Some(upstream) = adjoints[i].take() else {
                continue;
            };
            let node = &inner.nodes[i];
            // Taps and params below `i` still need this adjoint; put it back
            // unless nothing will read it again.
            backward_node(node, &upstream, &mut adjoints);
            adjoints[i] = Some(upstream);
        }

        let grab = |idx: usize, shape: &[usize]| -> (Vec<f64>, bool) {
            match adjoints.get(idx).and_then(|a| a.clone()) {
                Some(g) => (g, true),
                None => (vec![0.0; shape.iter().product()], false),
            }
        };

        let mut tap_grads = Vec::with_capacity(tap_indices.len());
        for &idx in &tap_indices {
            let shape = inner.nodes[idx].out_shape.clone();
            let (mut values, connected) = grab(idx, &shape);
            self.precision.quantize_slice(&mut values);
            tap_grads.push(TapGrad {
                values,
                shape,
                connected,
            });
        }
        let mut param_grads = IndexMap::new();
        for (name, &idx) in &inner.params {
            let shape = inner.nodes[idx].out_shape.clone();
            let (mut values, _) = grab(idx, &shape);
            self.precision.quantize_slice(&mut values);
            param_grads.insert(name.clone(), values);
        }
        Ok(BackwardOutput {
            tap_grads,
            param_grads,
        })
    }
}

// ── Axis helpers ─────────────────────────────────────────────────────

fn axes_mask(shape: &[usize], axes: &[usize], op: &'static str) -> Result<Vec<bool>> {
    if axes.is_empty() {
        return Err(Error::InvalidArgument {
            op,
            msg: "axis set must be nonempty".into(),
        });
    }
    let mut mask = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::InvalidArgument {
                op,
                msg: format!("axis {a} out of range for {} dims", shape.len()),
            });
        }
        mask[a] = true;
    }
    Ok(mask)
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Flat offsets of every index combination over the selected dims
/// (unselected dims held at 0), enumerated in row-major order.
fn offsets_over(shape: &[usize], strides: &[usize], select: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut offs = vec![0usize];
    for d in 0..shape.len() {
        if select(d) {
            let mut next = Vec::with_capacity(offs.len() * shape[d]);
            for &base in &offs {
                for j in 0..shape[d] {
                    next.push(base + j * strides[d]);
                }
            }
            offs = next;
        }
    }
    offs
}

fn group_offsets(shape: &[usize], reduce_mask: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let strides = strides_of(shape);
    let outer = offsets_over(shape, &strides, |d| !reduce_mask[d]);
    let inner = offsets_over(shape, &strides, |d| reduce_mask[d]);
    (outer, inner)
}

fn remaining_shape(shape: &[usize], reduce_mask: &[bool]) -> Vec<usize> {
    let rem: Vec<usize> = shape
        .iter()
        .zip(reduce_mask)
        .filter(|(_, &m)| !m)
        .map(|(&e, _)| e)
        .collect();
    if rem.is_empty() {
        vec![1]
    } else {
        rem
    }
}

// ── VJPs ─────────────────────────────────────────────────────────────

fn accumulate(adjoints: &mut [Option<Vec<f64>>], idx: usize, grad: Vec<f64>) {
    match &mut adjoints[idx] {
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(&grad) {
                *a += g;
            }
        }
        None => adjoints[idx] = Some(grad),
    }
}

fn backward_node(node: &Node, upstream: &[f64], adjoints: &mut [Option<Vec<f64>>]) {
    let needs: Vec<bool> = node.parents.iter().map(|p| p.node.is_some()).collect();
    if !needs.iter().any(|&n| n) {
        return;
    }
    let mut sink = |parent: usize, grad: Vec<f64>| {
        if let Some(idx) = node.parents[parent].node {
            accumulate(adjoints, idx, grad);
        }
    };
    match &node.op {
        OpKind::Leaf => {}
        OpKind::Conv { geom, transposed } => {
            let g = *geom;
            let input = &node.parents[0].values;
            let kernel = &node.parents[1].values;
            if needs[0] {
                let mut gin = vec![0.0; input.len()];
                if *transposed {
                    tconv2d_grad_input(g, kernel, upstream, &mut gin);
                } else {
                    conv2d_grad_input(g, kernel, upstream, &mut gin);
                }
                sink(0, gin);
            }
            if needs[1] {
                let mut gk = vec![0.0; kernel.len()];
                if *transposed {
                    tconv2d_grad_kernel(g, input, upstream, &mut gk);
                } else {
                    conv2d_grad_kernel(g, input, upstream, &mut gk);
                }
                sink(1, gk);
            }
            if node.parents.len() == 3 && needs[2] {
                let plane = g.t_out * g.f_out;
                let mut gb = vec![0.0; g.c_out];
                for (co, gv) in gb.iter_mut().enumerate() {
                    *gv = upstream[co * plane..(co + 1) * plane].iter().sum();
                }
                sink(2, gb);
            }
        }
        OpKind::Norm { affine_eval } => {
            let shape = &node.out_shape;
            let (c, n) = (shape[0], shape[1] * shape[2]);
            let x = &node.parents[0].values;
            let gamma = &node.parents[1].values;
            let mean = &node.saved[..c];
            let istd = &node.saved[c..];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = if needs[0] { vec![0.0; x.len()] } else { Vec::new() };
            for ch in 0..c {
                let (m, is, g) = (mean[ch], istd[ch], gamma[ch]);
                let xs = &x[ch * n..(ch + 1) * n];
                let dys = &upstream[ch * n..(ch + 1) * n];
                let mut s1 = 0.0;
                let mut s2 = 0.0;
                for (&xv, &dy) in xs.iter().zip(dys) {
                    let xh = (xv - m) * is;
                    s1 += dy;
                    s2 += dy * xh;
                }
                dgamma[ch] = s2;
                dbeta[ch] = s1;
                if needs[0] {
                    let dst = &mut dx[ch * n..(ch + 1) * n];
                    if *affine_eval {
                        for (d, &dy) in dst.iter_mut().zip(dys) {
                            *d = dy * g * is;
                        }
                    } else {
                        let nf = n as f64;
                        for ((d, &xv), &dy) in dst.iter_mut().zip(xs).zip(dys) {
                            let xh = (xv - m) * is;
                            *d = g * is * (dy - s1 / nf - xh * s2 / nf);
                        }
                    }
                }
            }
            if needs[0] {
                sink(0, dx);
            }
            if needs[1] {
                sink(1, dgamma);
            }
            if needs[2] {
                sink(2, dbeta);
            }
        }
        OpKind::Pointwise(kind) => {
            let grad: Vec<f64> = match kind {
                PointwiseKind::Relu => node
                    .parents[0]
                    .values
                    .iter()
                    .zip(upstream)
                    .map(|(&x, &dy)| if x > 0.0 { dy } else { 0.0 })
                    .collect(),
                PointwiseKind::Sigmoid => node
                    .out
                    .iter()
                    .zip(upstream)
                    .map(|(&y, &dy)| dy * y * (1.0 - y))
                    .collect(),
            };
            sink(0, grad);
        }
        OpKind::Softmax { axes } => {
            let (outer, inner) = group_offsets(&node.out_shape, axes);
            let y = &node.out;
            let mut grad = vec![0.0; y.len()];
            for &base in &outer {
                let mut dot = 0.0;
                for &off in &inner {
                    dot += upstream[base + off] * y[base + off];
                }
                for &off in &inner {
                    grad[base + off] = y[base + off] * (upstream[base + off] - dot);
                }
            }
            sink(0, grad);
        }
        OpKind::Reduce { kind, axes } => {
            let in_shape = &node.parents[0].shape;
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    let (outer, inner) = group_offsets(in_shape, axes);
                    let n = inner.len() as f64;
                    let mut grad = vec![0.0; node.parents[0].values.len()];
                    for (g_idx, &base) in outer.iter().enumerate() {
                        let dy = if *kind == ReduceKind::Mean {
                            upstream[g_idx] / n
                        } else {
                            upstream[g_idx]
                        };
                        for &off in &inner {
                            grad[base + off] += dy;
                        }
                    }
                    sink(0, grad);
                }
                ReduceKind::MeanAndStd => {
                    let (c, n) = (in_shape[0], in_shape[1] * in_shape[2]);
                    let x = &node.parents[0].values;
                    let mut grad = vec![0.0; x.len()];
                    for ch in 0..c {
                        let m = node.saved[ch];
                        let s = node.saved[c + ch];
                        let dmean = upstream[ch] / n as f64;
                        let dstd = upstream[c + ch];
                        let dst = &mut grad[ch * n..(ch + 1) * n];
                        if s > 0.0 {
                            let k = dstd / (n as f64 * s);
                            for (d, &xv) in dst.iter_mut().zip(&x[ch * n..(ch + 1) * n]) {
                                *d = dmean + k * (xv - m);
                            }
                        } else {
                            for d in dst.iter_mut() {
                                *d = dmean;
                            }
                        }
                    }
                    sink(0, grad);
                }
            }
        }
        OpKind::Affine => {
            let x = &node.parents[0].values;
            let w = &node.parents[1].values;
            let n = x.len();
            let m = upstream.len();
            if needs[0] {
                let mut dx = vec![0.0; n];
                for i in 0..m {
                    let dy = upstream[i];
                    for (d, &wv) in dx.iter_mut().zip(&w[i * n..(i + 1) * n]) {
                        *d += dy * wv;
                    }
                }
                sink(0, dx);
            }
            if needs[1] {
                let mut dw = vec![0.0; m * n];
                for i in 0..m {
                    let dy = upstream[i];
                    for (d, &xv) in dw[i * n..(i + 1) * n].iter_mut().zip(x.iter()) {
                        *d = dy * xv;
                    }
                }
                sink(1, dw);
            }
            if needs[2] {
                sink(2, upstream.to_vec());
            }
        }
        OpKind::Add => {
            if needs[0] {
                sink(0, upstream.to_vec());
            }
            if needs[1] {
                sink(1, upstream.to_vec());
            }
        }
        OpKind::Sub => {
            if needs[0] {
                sink(0, upstream.to_vec());
            }
            if needs[1] {
                sink(1, upstream.iter().map(|v| -v).collect());
            }
        }
        OpKind::Mul => {
            if needs[0] {
                sink(
                    0,
                    upstream
                        .iter()
                        .zip(node.parents[1].values.iter())
                        .map(|(d, b)| d * b)
                        .collect(),
                );
            }
            if needs[1] {
                sink(
                    1,
                    upstream
                        .iter()
                        .zip(node.parents[0].values.iter())
                        .map(|(d, a)| d * a)
                        .collect(),
                );
            }
        }
        OpKind::Abs => {
            sink(
                0,
                upstream
                    .iter()
                    .zip(node.parents[0].values.iter())
                    .map(|(d, &x)| {
                        if x > 0.0 {
                            *d
                        } else if x < 0.0 {
                            -*d
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            );
        }
        OpKind::Scale(factor) => {
            sink(0, upstream.iter().map(|d| d * factor).collect());
        }
        OpKind::MulBcast(domain) => {
            let shape = &node.out_shape;
            let (c, plane) = (shape[0], shape[1] * shape[2]);
            let x = &node.parents[0].values;
            let w = &node.parents[1].values;
            match domain {
                BcastDomain::TimeFreq => {
                    if needs[0] {
                        let mut dx = vec![0.0; x.len()];
                        for ch in 0..c {
                            for (d, (&dy, &wv)) in dx[ch * plane..(ch + 1) * plane]
                                .iter_mut()
                                .zip(upstream[ch * plane..(ch + 1) * plane].iter().zip(w.iter()))
                            {
                                *d = dy * wv;
                            }
                        }
                        sink(0, dx);
                    }
                    if needs[1] {
                        let mut dw = vec![0.0; plane];
                        for ch in 0..c {
                            for (d, (&dy, &xv)) in dw.iter_mut().zip(
                                upstream[ch * plane..(ch + 1) * plane]
                                    .iter()
                                    .zip(&x[ch * plane..(ch + 1) * plane]),
                            ) {
                                *d += dy * xv;
                            }
                        }
                        sink(1, dw);
                    }
                }
                BcastDomain::Channel => {
                    if needs[0] {
                        let mut dx = vec![0.0; x.len()];
                        for ch in 0..c {
                            let wv = w[ch];
                            for (d, &dy) in dx[ch * plane..(ch + 1) * plane]
                                .iter_mut()
                                .zip(&upstream[ch * plane..(ch + 1) * plane])
                            {
                                *d = dy * wv;
                            }
                        }
                        sink(0, dx);
                    }
                    if needs[1] {
                        let mut dw = vec![0.0; c];
                        for (ch, dwv) in dw.iter_mut().enumerate() {
                            *dwv = upstream[ch * plane..(ch + 1) * plane]
                                .iter()
                                .zip(&x[ch * plane..(ch + 1) * plane])
                                .map(|(dy, xv)| dy * xv)
                                .sum();
                        }
                        sink(1, dw);
                    }
                }
            }
        }
        OpKind::ConcatC { c_first } => {
            let plane = node.out_shape[1] * node.out_shape[2];
            let split = c_first * plane;
            if needs[0] {
                sink(0, upstream[..split].to_vec());
            }
            if needs[1] {
                sink(1, upstream[split..].to_vec());
            }
        }
        OpKind::CropPad => {
            let src = &node.parents[0].shape;
            let (c, ts, fs) = (src[0], src[1], src[2]);
            let (td, fd) = (node.out_shape[1], node.out_shape[2]);
            let ct = ts.min(td);
            let cf = fs.min(fd);
            let mut grad = vec![0.0; c * ts * fs];
            for ch in 0..c {
                for row in 0..ct {
                    let up = &upstream[(ch * td + row) * fd..][..cf];
                    grad[(ch * ts + row) * fs..][..cf].copy_from_slice(up);
                }
            }
            sink(0, grad);
        }
        OpKind::Reshape => {
            sink(0, upstream.to_vec());
        }
        OpKind::CrossEntropy { target } => {
            let dy = upstream[0];
            let mut grad: Vec<f64> = node.saved.iter().map(|&p| p * dy).collect();
            grad[*target] -= dy;
            sink(0, grad);
        }
        OpKind::Select { index } => {
            let mut grad = vec![0.0; node.parents[0].values.len()];
            grad[*index] = upstream[0];
            sink(0, grad);
        }
    }
}

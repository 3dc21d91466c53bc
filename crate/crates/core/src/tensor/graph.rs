use crate::error::{Error, Result};
use crate::tensor::{Mask, Tensor};

/// Elementwise binary operation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Mul,
    Add,
    Sub,
}

enum Node {
    Conv2d {
        input: Tensor,
        weight: Tensor,
        bias: Tensor,
        out: Tensor,
        k: usize,
    },
    AdaptiveAvgPool {
        input: Tensor,
        out: Tensor,
    },
    BilinearResize {
        input: Tensor,
        out: Tensor,
    },
    Sigmoid {
        input: Tensor,
        out: Tensor,
    },
    Relu {
        input: Tensor,
        out: Tensor,
    },
    Binary {
        a: Tensor,
        b: Tensor,
        kind: BinKind,
        out: Tensor,
    },
    OneMinus {
        input: Tensor,
        out: Tensor,
    },
    Scale {
        input: Tensor,
        factor: f64,
        out: Tensor,
    },
    ConcatChannels {
        parts: Vec<Tensor>,
        out: Tensor,
    },
    CrossEntropy {
        logits: Tensor,
        target: Mask,
        out: Tensor,
    },
}

impl Node {
    fn out(&self) -> &Tensor {
        match self {
            Node::Conv2d { out, .. }
            | Node::AdaptiveAvgPool { out, .. }
            | Node::BilinearResize { out, .. }
            | Node::Sigmoid { out, .. }
            | Node::Relu { out, .. }
            | Node::Binary { out, .. }
            | Node::OneMinus { out, .. }
            | Node::Scale { out, .. }
            | Node::ConcatChannels { out, .. }
            | Node::CrossEntropy { out, .. } => out,
        }
    }
}

/// Ordered record of executed operations.
///
/// Recording order is a topological order of the computation, so walking the
/// record once in reverse propagates gradients through every operation
/// exactly once. Dropping the graph frees all recorded nodes; leaf tensors
/// owned by the caller survive. A graph is confined to one thread; separate
/// episodes run on separate graphs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inference: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            inference: false,
        }
    }

    /// A graph that never records; backward is unavailable on its outputs.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            inference: true,
        }
    }

    /// Number of recorded operations.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn record(&mut self, node: Node) {
        if !self.inference && node.out().requires_grad() {
            self.nodes.push(node);
        }
    }

    /// 2D convolution, stride 1. `k = 3` uses zero padding 1 so the spatial
    /// size is preserved; `k = 1` uses no padding.
    pub fn conv2d(
        &mut self,
        input: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
    ) -> Result<Tensor> {
        if input.rank() != 3 || weight.rank() != 4 || bias.rank() != 1 {
            return Err(Error::Dimension(format!(
                "conv2d expects input rank 3, weight rank 4, bias rank 1; got {:?}/{:?}/{:?}",
                input.shape(),
                weight.shape(),
                bias.shape()
            )));
        }
        let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (c_out, wc_in, k, k2) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if wc_in != c_in {
            return Err(Error::Dimension(format!(
                "conv2d weight expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if k != k2 || (k != 1 && k != 3) {
            return Err(Error::Dimension(format!(
                "conv2d kernel must be 1x1 or 3x3, got {k}x{k2}"
            )));
        }
        if bias.shape()[0] != c_out {
            return Err(Error::Dimension(format!(
                "conv2d bias length {} does not match {c_out} output channels",
                bias.shape()[0]
            )));
        }
        let mut out = vec![0.0; c_out * h * w];
        conv2d_fwd(
            &input.read(),
            &weight.read(),
            &bias.read(),
            c_in,
            c_out,
            h,
            w,
            k,
            &mut out,
        );
        let rg = input.requires_grad() || weight.requires_grad() || bias.requires_grad();
        let out = Tensor::result_of(vec![c_out, h, w], out, rg);
        self.record(Node::Conv2d {
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
            out: out.clone(),
            k,
        });
        Ok(out)
    }

    /// Adaptive average pooling to `out_h`×`out_w`. Bin `i` covers input rows
    /// `[floor(i*h/out_h), ceil((i+1)*h/out_h))`; bins may overlap when the
    /// sizes do not divide evenly.
    pub fn adaptive_avg_pool(
        &mut self,
        input: &Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor> {
        if input.rank() != 3 {
            return Err(Error::Dimension(format!(
                "adaptive_avg_pool expects rank 3, got {:?}",
                input.shape()
            )));
        }
        let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::Dimension(format!(
                "adaptive_avg_pool output {out_h}x{out_w} invalid for input {h}x{w}"
            )));
        }
        let mut out = vec![0.0; c * out_h * out_w];
        pool_fwd(&input.read(), c, h, w, out_h, out_w, &mut out);
        let o = Tensor::result_of(vec![c, out_h, out_w], out, input.requires_grad());
        self.record(Node::AdaptiveAvgPool {
            input: input.clone(),
            out: o.clone(),
        });
        Ok(o)
    }

    /// Bilinear resize with corner-aligned sampling: the source coordinate of
    /// output index `i` is `i*(in-1)/(out-1)` when `out > 1`, else the center
    /// of the input axis.
    pub fn bilinear_resize(
        &mut self,
        input: &Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Result<Tensor> {
        if input.rank() != 3 {
            return Err(Error::Dimension(format!(
                "bilinear_resize expects rank 3, got {:?}",
                input.shape()
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Dimension(
                "bilinear_resize output dimensions must be positive".to_string(),
            ));
        }
        let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        if out_h == h && out_w == w {
            // Exact passthrough, still recorded so gradients flow.
            let o = Tensor::result_of(
                vec![c, h, w],
                input.read().clone(),
                input.requires_grad(),
            );
            self.record(Node::BilinearResize {
                input: input.clone(),
                out: o.clone(),
            });
            return Ok(o);
        }
        let mut out = vec![0.0; c * out_h * out_w];
        bilinear_fwd(&input.read(), c, h, w, out_h, out_w, &mut out);
        let o = Tensor::result_of(vec![c, out_h, out_w], out, input.requires_grad());
        self.record(Node::BilinearResize {
            input: input.clone(),
            out: o.clone(),
        });
        Ok(o)
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, input: &Tensor) -> Tensor {
        let out: Vec<f64> = input.read().iter().map(|&x| sigmoid(x)).collect();
        let o = Tensor::result_of(input.shape().to_vec(), out, input.requires_grad());
        self.record(Node::Sigmoid {
            input: input.clone(),
            out: o.clone(),
        });
        o
    }

    /// Elementwise max(x, 0).
    pub fn relu(&mut self, input: &Tensor) -> Tensor {
        let out: Vec<f64> = input.read().iter().map(|&x| x.max(0.0)).collect();
        let o = Tensor::result_of(input.shape().to_vec(), out, input.requires_grad());
        self.record(Node::Relu {
            input: input.clone(),
            out: o.clone(),
        });
        o
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, BinKind::Mul)
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, BinKind::Sub)
    }

    /// Elementwise binary op. Shapes must be equal, except that a 1×h×w
    /// tensor broadcasts across the channels of a c×h×w tensor (either side).
    fn binary(&mut self, a: &Tensor, b: &Tensor, kind: BinKind) -> Result<Tensor> {
        let layout = broadcast_layout(a.shape(), b.shape())?;
        let (ad, bd) = (a.read(), b.read());
        let out = match layout {
            Layout::Same => {
                let mut v = vec![0.0; ad.len()];
                for i in 0..ad.len() {
                    v[i] = apply(kind, ad[i], bd[i]);
                }
                v
            }
            Layout::BroadcastB { c, plane } => {
                let mut v = vec![0.0; c * plane];
                for ch in 0..c {
                    let ap = &ad[ch * plane..(ch + 1) * plane];
                    let vo = &mut v[ch * plane..(ch + 1) * plane];
                    for i in 0..plane {
                        vo[i] = apply(kind, ap[i], bd[i]);
                    }
                }
                v
            }
            Layout::BroadcastA { c, plane } => {
                let mut v = vec![0.0; c * plane];
                for ch in 0..c {
                    let bp = &bd[ch * plane..(ch + 1) * plane];
                    let vo = &mut v[ch * plane..(ch + 1) * plane];
                    for i in 0..plane {
                        vo[i] = apply(kind, ad[i], bp[i]);
                    }
                }
                v
            }
        };
        drop(ad);
        drop(bd);
        let shape = match layout {
            Layout::Same => a.shape().to_vec(),
            Layout::BroadcastB { .. } => a.shape().to_vec(),
            Layout::BroadcastA { .. } => b.shape().to_vec(),
        };
        let rg = a.requires_grad() || b.requires_grad();
        let o = Tensor::result_of(shape, out, rg);
        self.record(Node::Binary {
            a: a.clone(),
            b: b.clone(),
            kind,
            out: o.clone(),
        });
        Ok(o)
    }

    /// Elementwise 1 − x.
    pub fn one_minus(&mut self, input: &Tensor) -> Tensor {
        let out: Vec<f64> = input.read().iter().map(|&x| 1.0 - x).collect();
        let o = Tensor::result_of(input.shape().to_vec(), out, input.requires_grad());
        self.record(Node::OneMinus {
            input: input.clone(),
            out: o.clone(),
        });
        o
    }

    /// Multiply by a constant factor.
    pub fn scale(&mut self, input: &Tensor, factor: f64) -> Tensor {
        let out: Vec<f64> = input.read().iter().map(|&x| x * factor).collect();
        let o = Tensor::result_of(input.shape().to_vec(), out, input.requires_grad());
        self.record(Node::Scale {
            input: input.clone(),
            factor,
            out: o.clone(),
        });
        o
    }

    /// Stack rank-3 tensors along the channel axis, in argument order.
    pub fn concat_channels(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_channels of empty list".to_string()));
        }
        let (h, w) = (parts[0].shape()[1], parts[0].shape()[2]);
        let mut channels = 0;
        for p in parts {
            if p.rank() != 3 || p.shape()[1] != h || p.shape()[2] != w {
                return Err(Error::Dimension(format!(
                    "concat_channels spatial mismatch: expected {h}x{w}, got {:?}",
                    p.shape()
                )));
            }
            channels += p.shape()[0];
        }
        let mut out = Vec::with_capacity(channels * h * w);
        for p in parts {
            out.extend_from_slice(&p.read());
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        let o = Tensor::result_of(vec![channels, h, w], out, rg);
        self.record(Node::ConcatChannels {
            parts: parts.to_vec(),
            out: o.clone(),
        });
        Ok(o)
    }

    /// Mean over pixels of the softmax cross-entropy between 2×h×w logits
    /// (channel 0 = background, channel 1 = object) and a binary target mask.
    /// Numerically stabilized by max-subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: &Tensor, target: &Mask) -> Result<Tensor> {
        if logits.rank() != 3 || logits.shape()[0] != 2 {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy expects 2xhxw logits, got {:?}",
                logits.shape()
            )));
        }
        let (h, w) = (logits.shape()[1], logits.shape()[2]);
        if target.height() != h || target.width() != w {
            return Err(Error::Dimension(format!(
                "softmax_cross_entropy target {}x{} does not match logits {h}x{w}",
                target.height(),
                target.width()
            )));
        }
        let d = logits.read();
        let plane = h * w;
        let mut total = 0.0;
        for i in 0..plane {
            let (l0, l1) = (d[i], d[plane + i]);
            let m = l0.max(l1);
            let z = (l0 - m).exp() + (l1 - m).exp();
            let lt = if target.values()[i] == 1 { l1 } else { l0 };
            total += -(lt - m) + z.ln();
        }
        drop(d);
        let o = Tensor::result_of(vec![], vec![total / plane as f64], logits.requires_grad());
        self.record(Node::CrossEntropy {
            logits: logits.clone(),
            target: target.clone(),
            out: o.clone(),
        });
        Ok(o)
    }

    /// Reverse-mode gradient computation. Consumes the graph: gradients of
    /// `loss` accumulate additively into the grad slot of every tensor with
    /// gradient tracking that participated in the recorded computation.
    pub fn backward(self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !loss.requires_grad() {
            return Err(Error::Usage(
                "backward on a loss with no recorded gradient path".to_string(),
            ));
        }
        loss.accumulate_grad(&[1.0]);
        for node in self.nodes.iter().rev() {
            let gout = match node.out().grad() {
                Some(g) => g,
                None => continue, // not on a path to the loss
            };
            match node {
                Node::Conv2d {
                    input,
                    weight,
                    bias,
                    out,
                    k,
                } => {
                    let (c_in, h, w) =
                        (input.shape()[0], input.shape()[1], input.shape()[2]);
                    let c_out = out.shape()[0];
                    if input.requires_grad() {
                        let mut gi = vec![0.0; c_in * h * w];
                        conv2d_bwd_input(&gout, &weight.read(), c_in, c_out, h, w, *k, &mut gi);
                        input.accumulate_grad(&gi);
                    }
                    if weight.requires_grad() {
                        let mut gw = vec![0.0; weight.numel()];
                        conv2d_bwd_weight(&gout, &input.read(), c_in, c_out, h, w, *k, &mut gw);
                        weight.accumulate_grad(&gw);
                    }
                    if bias.requires_grad() {
                        let plane = h * w;
                        let gb: Vec<f64> = (0..c_out)
                            .map(|o| gout[o * plane..(o + 1) * plane].iter().sum())
                            .collect();
                        bias.accumulate_grad(&gb);
                    }
                }
                Node::AdaptiveAvgPool { input, out } => {
                    if input.requires_grad() {
                        let (c, h, w) =
                            (input.shape()[0], input.shape()[1], input.shape()[2]);
                        let (oh, ow) = (out.shape()[1], out.shape()[2]);
                        let mut gi = vec![0.0; c * h * w];
                        pool_bwd(&gout, c, h, w, oh, ow, &mut gi);
                        input.accumulate_grad(&gi);
                    }
                }
                Node::BilinearResize { input, out } => {
                    if input.requires_grad() {
                        let (c, h, w) =
                            (input.shape()[0], input.shape()[1], input.shape()[2]);
                        let (oh, ow) = (out.shape()[1], out.shape()[2]);
                        let mut gi = vec![0.0; c * h * w];
                        if oh == h && ow == w {
                            gi.copy_from_slice(&gout);
                        } else {
                            bilinear_bwd(&gout, c, h, w, oh, ow, &mut gi);
                        }
                        input.accumulate_grad(&gi);
                    }
                }
                Node::Sigmoid { input, out } => {
                    if input.requires_grad() {
                        let y = out.read();
                        let gi: Vec<f64> = gout
                            .iter()
                            .zip(y.iter())
                            .map(|(&g, &v)| g * v * (1.0 - v))
                            .collect();
                        drop(y);
                        input.accumulate_grad(&gi);
                    }
                }
                Node::Relu { input, .. } => {
                    if input.requires_grad() {
                        let x = input.read();
                        let gi: Vec<f64> = gout
                            .iter()
                            .zip(x.iter())
                            .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                            .collect();
                        drop(x);
                        input.accumulate_grad(&gi);
                    }
                }
                Node::Binary { a, b, kind, .. } => {
                    binary_bwd(a, b, *kind, &gout);
                }
                Node::OneMinus { input, .. } => {
                    if input.requires_grad() {
                        let gi: Vec<f64> = gout.iter().map(|&g| -g).collect();
                        input.accumulate_grad(&gi);
                    }
                }
                Node::Scale { input, factor, .. } => {
                    if input.requires_grad() {
                        let gi: Vec<f64> = gout.iter().map(|&g| g * factor).collect();
                        input.accumulate_grad(&gi);
                    }
                }
                Node::ConcatChannels { parts, .. } => {
                    let (h, w) = (parts[0].shape()[1], parts[0].shape()[2]);
                    let plane = h * w;
                    let mut offset = 0;
                    for p in parts {
                        let n = p.shape()[0] * plane;
                        if p.requires_grad() {
                            p.accumulate_grad(&gout[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Node::CrossEntropy {
                    logits, target, ..
                } => {
                    if logits.requires_grad() {
                        let d = logits.read();
                        let (h, w) = (logits.shape()[1], logits.shape()[2]);
                        let plane = h * w;
                        let scale = gout[0] / plane as f64;
                        let mut gi = vec![0.0; 2 * plane];
                        for i in 0..plane {
                            let (l0, l1) = (d[i], d[plane + i]);
                            let m = l0.max(l1);
                            let (e0, e1) = ((l0 - m).exp(), (l1 - m).exp());
                            let z = e0 + e1;
                            let (p0, p1) = (e0 / z, e1 / z);
                            let t = target.values()[i];
                            gi[i] = scale * (p0 - if t == 0 { 1.0 } else { 0.0 });
                            gi[plane + i] = scale * (p1 - if t == 1 { 1.0 } else { 0.0 });
                        }
                        drop(d);
                        logits.accumulate_grad(&gi);
                    }
                }
            }
        }
        Ok(())
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

#[inline]
fn apply(kind: BinKind, a: f64, b: f64) -> f64 {
    match kind {
        BinKind::Mul => a * b,
        BinKind::Add => a + b,
        BinKind::Sub => a - b,
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Same,
    /// `b` is 1×h×w, broadcast across the channels of `a`.
    BroadcastB { c: usize, plane: usize },
    /// `a` is 1×h×w, broadcast across the channels of `b`.
    BroadcastA { c: usize, plane: usize },
}

fn broadcast_layout(a: &[usize], b: &[usize]) -> Result<Layout> {
    if a == b {
        return Ok(Layout::Same);
    }
    if a.len() == 3 && b.len() == 3 && a[1] == b[1] && a[2] == b[2] {
        let plane = a[1] * a[2];
        if b[0] == 1 && a[0] > 1 {
            return Ok(Layout::BroadcastB { c: a[0], plane });
        }
        if a[0] == 1 && b[0] > 1 {
            return Ok(Layout::BroadcastA { c: b[0], plane });
        }
    }
    Err(Error::Dimension(format!(
        "incompatible shapes {a:?} and {b:?}"
    )))
}

fn binary_bwd(a: &Tensor, b: &Tensor, kind: BinKind, gout: &[f64]) {
    if a.requires_grad() {
        let ga = match kind {
            BinKind::Add | BinKind::Sub => reduce_to(gout, a.shape(), None),
            BinKind::Mul => {
                let bd = b.read();
                reduce_to(gout, a.shape(), Some(&bd))
            }
        };
        a.accumulate_grad(&ga);
    }
    if b.requires_grad() {
        let gb = match kind {
            BinKind::Add => reduce_to(gout, b.shape(), None),
            BinKind::Sub => {
                let g: Vec<f64> = gout.iter().map(|&g| -g).collect();
                reduce_to(&g, b.shape(), None)
            }
            BinKind::Mul => {
                let ad = a.read();
                reduce_to(gout, b.shape(), Some(&ad))
            }
        };
        b.accumulate_grad(&gb);
    }
}

/// Gradient of one operand of a binary op: multiply by the other operand's
/// value when given (Mul), then sum over channels if this operand was the
/// broadcast 1×h×w side.
fn reduce_to(gout: &[f64], target_shape: &[usize], other: Option<&[f64]>) -> Vec<f64> {
    let scaled: Vec<f64> = match other {
        None => gout.to_vec(),
        Some(o) if o.len() == gout.len() => {
            gout.iter().zip(o).map(|(&g, &v)| g * v).collect()
        }
        Some(o) => {
            // The other operand is the single-channel side.
            let plane = o.len();
            let c = gout.len() / plane;
            let mut v = vec![0.0; gout.len()];
            for ch in 0..c {
                for i in 0..plane {
                    v[ch * plane + i] = gout[ch * plane + i] * o[i];
                }
            }
            v
        }
    };
    let target_numel: usize = target_shape.iter().product();
    if scaled.len() == target_numel {
        return scaled;
    }
    let plane = target_numel;
    let c = scaled.len() / plane;
    let mut out = vec![0.0; plane];
    for ch in 0..c {
        for i in 0..plane {
            out[i] += scaled[ch * plane + i];
        }
    }
    out
}

// ── Kernels ──────────────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn conv2d_fwd(
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    out: &mut [f64],
) {
    let plane = h * w;
    for o in 0..c_out {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        out_plane.fill(bias[o]);
        for i in 0..c_in {
            let in_plane = &input[i * plane..(i + 1) * plane];
            if k == 1 {
                let wv = weight[o * c_in + i];
                for (d, s) in out_plane.iter_mut().zip(in_plane) {
                    *d += wv * s;
                }
            } else {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wv = weight[((o * c_in + i) * 3 + dy) * 3 + dx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (y0, y1) = shift_range(dy, h);
                        let (x0, x1) = shift_range(dx, w);
                        for y in y0..y1 {
                            let src = &in_plane[(y + dy - 1) * w + (x0 + dx - 1)
                                ..(y + dy - 1) * w + (x1 + dx - 1)];
                            let dst = &mut out_plane[y * w + x0..y * w + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Valid output range along one axis for a 3×3 tap offset `d` with padding 1:
/// output index `y` reads input index `y + d - 1`.
#[inline]
fn shift_range(d: usize, n: usize) -> (usize, usize) {
    let lo = if d == 0 { 1 } else { 0 };
    let hi = if d == 2 { n - 1 } else { n };
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd_input(
    gout: &[f64],
    weight: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    gin: &mut [f64],
) {
    let plane = h * w;
    for o in 0..c_out {
        let go = &gout[o * plane..(o + 1) * plane];
        for i in 0..c_in {
            let gi = &mut gin[i * plane..(i + 1) * plane];
            if k == 1 {
                let wv = weight[o * c_in + i];
                for (d, g) in gi.iter_mut().zip(go) {
                    *d += wv * g;
                }
            } else {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wv = weight[((o * c_in + i) * 3 + dy) * 3 + dx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (y0, y1) = shift_range(dy, h);
                        let (x0, x1) = shift_range(dx, w);
                        for y in y0..y1 {
                            let src = &go[y * w + x0..y * w + x1];
                            let dst = &mut gi[(y + dy - 1) * w + (x0 + dx - 1)
                                ..(y + dy - 1) * w + (x1 + dx - 1)];
                            for (d, g) in dst.iter_mut().zip(src) {
                                *d += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd_weight(
    gout: &[f64],
    input: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    gw: &mut [f64],
) {
    let plane = h * w;
    for o in 0..c_out {
        let go = &gout[o * plane..(o + 1) * plane];
        for i in 0..c_in {
            let in_plane = &input[i * plane..(i + 1) * plane];
            if k == 1 {
                let mut acc = 0.0;
                for (g, s) in go.iter().zip(in_plane) {
                    acc += g * s;
                }
                gw[o * c_in + i] += acc;
            } else {
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (y0, y1) = shift_range(dy, h);
                        let (x0, x1) = shift_range(dx, w);
                        let mut acc = 0.0;
                        for y in y0..y1 {
                            let src = &in_plane[(y + dy - 1) * w + (x0 + dx - 1)
                                ..(y + dy - 1) * w + (x1 + dx - 1)];
                            let g = &go[y * w + x0..y * w + x1];
                            for (gv, sv) in g.iter().zip(src) {
                                acc += gv * sv;
                            }
                        }
                        gw[((o * c_in + i) * 3 + dy) * 3 + dx] += acc;
                    }
                }
            }
        }
    }
}

/// Bin boundaries of adaptive average pooling along one axis.
#[inline]
pub(crate) fn pool_bin(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let start = i * n_in / n_out;
    let end = ((i + 1) * n_in).div_ceil(n_out);
    (start, end)
}

fn pool_fwd(input: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, out: &mut [f64]) {
    let plane = h * w;
    let oplane = oh * ow;
    for ch in 0..c {
        let ip = &input[ch * plane..(ch + 1) * plane];
        let op = &mut out[ch * oplane..(ch + 1) * oplane];
        for i in 0..oh {
            let (y0, y1) = pool_bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = pool_bin(j, w, ow);
                let mut acc = 0.0;
                for y in y0..y1 {
                    for s in &ip[y * w + x0..y * w + x1] {
                        acc += s;
                    }
                }
                op[i * ow + j] = acc / ((y1 - y0) * (x1 - x0)) as f64;
            }
        }
    }
}

fn pool_bwd(gout: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, gin: &mut [f64]) {
    let plane = h * w;
    let oplane = oh * ow;
    for ch in 0..c {
        let gp = &gout[ch * oplane..(ch + 1) * oplane];
        let gi = &mut gin[ch * plane..(ch + 1) * plane];
        for i in 0..oh {
            let (y0, y1) = pool_bin(i, h, oh);
            for j in 0..ow {
                let (x0, x1) = pool_bin(j, w, ow);
                let g = gp[i * ow + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for y in y0..y1 {
                    for d in &mut gi[y * w + x0..y * w + x1] {
                        *d += g;
                    }
                }
            }
        }
    }
}

/// Corner-aligned source coordinate and interpolation weights along one axis.
#[inline]
pub(crate) fn lerp_coord(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let src = if n_out > 1 {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    } else {
        (n_in - 1) as f64 / 2.0
    };
    let lo = src.floor() as usize;
    let lo = lo.min(n_in - 1);
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, src - lo as f64)
}

fn bilinear_fwd(input: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, out: &mut [f64]) {
    let xs: Vec<(usize, usize, f64)> = (0..ow).map(|j| lerp_coord(j, w, ow)).collect();
    let plane = h * w;
    let oplane = oh * ow;
    for ch in 0..c {
        let ip = &input[ch * plane..(ch + 1) * plane];
        let op = &mut out[ch * oplane..(ch + 1) * oplane];
        for i in 0..oh {
            let (y0, y1, fy) = lerp_coord(i, h, oh);
            let r0 = &ip[y0 * w..y0 * w + w];
            let r1 = &ip[y1 * w..y1 * w + w];
            for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                op[i * ow + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
}

fn bilinear_bwd(gout: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize, gin: &mut [f64]) {
    let xs: Vec<(usize, usize, f64)> = (0..ow).map(|j| lerp_coord(j, w, ow)).collect();
    let plane = h * w;
    let oplane = oh * ow;
    for ch in 0..c {
        let gp = &gout[ch * oplane..(ch + 1) * oplane];
        let gi = &mut gin[ch * plane..(ch + 1) * plane];
        for i in 0..oh {
            let (y0, y1, fy) = lerp_coord(i, h, oh);
            for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = gp[i * ow + j];
                gi[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                gi[y0 * w + x1] += g * (1.0 - fy) * fx;
                gi[y1 * w + x0] += g * fy * (1.0 - fx);
                gi[y1 * w + x1] += g * fy * fx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv1x1_identity_kernel() {
        let mut g = Graph::new();
        let input = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let weight = t(&[1, 1, 1, 1], &[1.0]);
        let bias = t(&[1], &[0.0]);
        let out = g.conv2d(&input, &weight, &bias).unwrap();
        assert_eq!(out.to_vec(), input.to_vec());
    }

    #[test]
    fn conv3x3_centered_delta_is_identity() {
        let mut g = Graph::new();
        let input = t(&[1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0; // center tap
        let weight = t(&[1, 1, 3, 3], &kernel);
        let bias = t(&[1], &[0.0]);
        let out = g.conv2d(&input, &weight, &bias).unwrap();
        assert_eq!(out.to_vec(), input.to_vec());
    }

    #[test]
    fn conv_channel_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let input = t(&[2, 2, 2], &[0.0; 8]);
        let weight = t(&[1, 3, 1, 1], &[0.0; 3]);
        let bias = t(&[1], &[0.0]);
        assert!(matches!(
            g.conv2d(&input, &weight, &bias),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn adaptive_pool_exact_tiling_and_global_mean() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let input = t(&[1, 4, 4], &data);
        let out = g.adaptive_avg_pool(&input, 2, 2).unwrap();
        assert_eq!(out.to_vec(), vec![2.5, 4.5, 10.5, 12.5]);
        let global = g.adaptive_avg_pool(&input, 1, 1).unwrap();
        assert_eq!(global.to_vec(), vec![7.5]);
    }

    #[test]
    fn adaptive_pool_overlapping_bins() {
        // 5 rows into 2 bins: rows {0,1,2} and {2,3,4}.
        assert_eq!(pool_bin(0, 5, 2), (0, 3));
        assert_eq!(pool_bin(1, 5, 2), (2, 5));
        let mut g = Graph::new();
        let data: Vec<f64> = (0..5).map(|v| v as f64).collect();
        let input = t(&[1, 5, 1], &data);
        let out = g.adaptive_avg_pool(&input, 2, 1).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 3.0]);
    }

    #[test]
    fn adaptive_pool_rejects_upsampling() {
        let mut g = Graph::new();
        let input = t(&[1, 2, 2], &[0.0; 4]);
        assert!(matches!(
            g.adaptive_avg_pool(&input, 3, 2),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let mut g = Graph::new();
        let input = t(&[1, 3, 3], &[5.0; 9]);
        let same = g.bilinear_resize(&input, 3, 3).unwrap();
        assert_eq!(same.to_vec(), input.to_vec());
        let up = g.bilinear_resize(&input, 7, 5).unwrap();
        assert!(up.to_vec().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn bilinear_2x2_to_3x3_closed_form() {
        let mut g = Graph::new();
        let input = t(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
        let out = g.bilinear_resize(&input, 3, 3).unwrap();
        let expect = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
        for (a, b) in out.to_vec().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn sigmoid_values() {
        let mut g = Graph::new();
        let x = t(&[4], &[0.0, -30.0, 1.0, -1e9]);
        let y = g.sigmoid(&x).to_vec();
        assert_eq!(y[0], 0.5);
        assert!(y[1] > 0.0 && y[1] < 1e-6);
        assert!((y[2] - 0.7310585786300049).abs() < 1e-12);
        assert!(y[3].is_finite() && y[3] >= 0.0);
    }

    #[test]
    fn cross_entropy_uniform_is_ln2_and_confident_is_small() {
        let mut g = Graph::new();
        let logits = t(&[2, 2, 2], &[0.0; 8]);
        let target = Mask::from_vec(2, 2, vec![0, 1, 1, 0]).unwrap();
        let loss = g.softmax_cross_entropy(&logits, &target).unwrap();
        assert!((loss.scalar_value().unwrap() - (2.0f64).ln()).abs() < 1e-12);

        let mut strong = vec![0.0; 8];
        for i in 0..4 {
            let t0 = target.values()[i];
            strong[i] = if t0 == 0 { 20.0 } else { -20.0 };
            strong[4 + i] = if t0 == 1 { 20.0 } else { -20.0 };
        }
        let logits = t(&[2, 2, 2], &strong);
        let loss = g.softmax_cross_entropy(&logits, &target).unwrap();
        assert!(loss.scalar_value().unwrap() < 1e-3);
    }

    #[test]
    fn elementwise_identities() {
        let mut g = Graph::new();
        let a = t(&[2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let ones = Tensor::filled(vec![2, 2, 2], 1.0);
        assert_eq!(g.mul(&a, &ones).unwrap().to_vec(), a.to_vec());
        let om = g.one_minus(&a);
        let back = g.one_minus(&om);
        assert_eq!(back.to_vec(), a.to_vec());
    }

    #[test]
    fn broadcast_mul_scales_each_channel() {
        let mut g = Graph::new();
        let a = t(&[3, 1, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let m = t(&[1, 1, 2], &[10.0, 100.0]);
        let out = g.mul(&a, &m).unwrap();
        assert_eq!(out.to_vec(), vec![10.0, 200.0, 30.0, 400.0, 50.0, 600.0]);
        // broadcast side first
        let out = g.mul(&m, &a).unwrap();
        assert_eq!(out.to_vec(), vec![10.0, 200.0, 30.0, 400.0, 50.0, 600.0]);
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let mut g = Graph::new();
        let a = t(&[2, 2, 2], &[0.0; 8]);
        let b = t(&[2, 2, 3], &[0.0; 12]);
        assert!(matches!(g.mul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn concat_shapes_and_roundtrip() {
        let mut g = Graph::new();
        let a = t(&[2, 2, 2], &[1.0; 8]);
        let b = t(&[3, 2, 2], &[2.0; 12]);
        let c = t(&[1, 2, 2], &[3.0; 4]);
        let out = g.concat_channels(&[a.clone(), b.clone(), c.clone()]).unwrap();
        assert_eq!(out.shape(), &[6, 2, 2]);
        let v = out.to_vec();
        assert_eq!(&v[0..8], &a.to_vec()[..]);
        assert_eq!(&v[8..20], &b.to_vec()[..]);
        assert_eq!(&v[20..24], &c.to_vec()[..]);
        let single = g.concat_channels(&[a.clone()]).unwrap();
        assert_eq!(single.to_vec(), a.to_vec());
    }

    #[test]
    fn backward_linear_form_gives_input_as_grad() {
        // loss = sum(w ⊙ x) via mul + pool trick: mean * n == sum
        let mut g = Graph::new();
        let w = Tensor::param(vec![1, 2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let x = t(&[1, 2, 2], &[3.0, -1.0, 2.0, 0.5]);
        let prod = g.mul(&w, &x).unwrap();
        let mean = g.adaptive_avg_pool(&prod, 1, 1).unwrap();
        let loss = g.scale(&mean, 4.0);
        // reshape the 1x1x1 mean to a scalar via scalar_value path: loss is 1x1x1
        g.backward(&loss).unwrap();
        assert_eq!(w.grad(), Some(x.to_vec()));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let w = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = g.relu(&w);
        assert!(matches!(g.backward(&y), Err(Error::Usage(_))));
    }

    #[test]
    fn unused_parameter_keeps_zero_grad() {
        let mut g = Graph::new();
        let used = Tensor::param(vec![1, 1, 1], vec![2.0]).unwrap();
        let unused = Tensor::param(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let x = t(&[1, 1, 1], &[5.0]);
        let y = g.mul(&used, &x).unwrap();
        let loss = g.adaptive_avg_pool(&y, 1, 1).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(used.grad(), Some(vec![5.0]));
        assert_eq!(unused.grad(), Some(vec![0.0; 3]));
    }

    #[test]
    fn grad_accumulates_across_two_branches() {
        // y = w*x1 + w*x2 → dy/dw = x1 + x2
        let mut g = Graph::new();
        let w = Tensor::param(vec![1, 1, 1], vec![1.5]).unwrap();
        let x1 = t(&[1, 1, 1], &[2.0]);
        let x2 = t(&[1, 1, 1], &[7.0]);
        let b1 = g.mul(&w, &x1).unwrap();
        let b2 = g.mul(&w, &x2).unwrap();
        let s = g.add(&b1, &b2).unwrap();
        let loss = g.adaptive_avg_pool(&s, 1, 1).unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(w.grad(), Some(vec![9.0]));
    }
}

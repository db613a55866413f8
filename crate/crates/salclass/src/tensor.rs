//! Dense float64 tensors and a tape-based reverse-mode autodiff engine.
//!
//! A [`Graph`] records every operation of a forward pass in topological
//! order; [`Graph::backward`] walks the tape once in reverse, accumulating
//! gradients into every node whose `requires_grad` flag is set. Parameters
//! live outside the graph as plain [`Tensor`]s and are re-inserted as leaf
//! nodes on every forward pass.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Dense N-dimensional array, row-major, float64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        /// flat input index chosen for each output cell
        argmax: Vec<usize>,
    },
    Relu,
    Linear,
    Softmax,
    BatchNorm2d {
        eps: f64,
        /// per-channel batch mean/var saved in train mode; None in eval mode
        batch_stats: Option<(Vec<f64>, Vec<f64>)>,
        /// running stats used in eval mode
        eval_stats: Option<(Vec<f64>, Vec<f64>)>,
    },
    BilinearUpsample,
    ConcatChannels,
    Flatten,
    GlobalAvgPool,
    /// Mean over the batch of -log(clamp(probs[t])).
    CrossEntropyMean {
        targets: Vec<usize>,
    },
    /// Mean of squared differences over all elements.
    MseMean,
    Scale(f64),
    Add,
    Sum,
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of recorded operations. Construction order is topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Running statistics for a batch-norm layer, updated in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Eval,
}

fn log_clamp_floor() -> f64 {
    1e-12
}

/// Output positions `o` in `0..out_extent` whose input index
/// `o*stride + k_off - padding` lands inside `0..in_extent`, as a
/// half-open range; lets conv loops run branch-free over valid pixels.
fn conv_valid_range(
    k_off: usize,
    padding: usize,
    stride: usize,
    in_extent: usize,
    out_extent: usize,
) -> (usize, usize) {
    let lo = if k_off >= padding {
        0
    } else {
        (padding - k_off).div_ceil(stride)
    };
    if in_extent + padding <= k_off {
        return (0, 0);
    }
    let hi = ((in_extent - 1 + padding - k_off) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient accumulated on `id` by the last `backward` call.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        let requires_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            data,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a tensor as a leaf node, copying its data.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let id = self.push(Op::Leaf, vec![], t.shape.clone(), t.data.clone());
        self.nodes[id.0].requires_grad = t.requires_grad;
        id
    }

    /// Leaf that participates in gradient computation regardless of the
    /// source tensor's flag (used for finite-difference probes on inputs).
    pub fn leaf_with_grad(&mut self, t: &Tensor) -> NodeId {
        let id = self.leaf(t);
        self.nodes[id.0].requires_grad = true;
        id
    }

    // ---------------------------------------------------------------- conv2d

    /// 2-D cross-correlation (no kernel flip) with bias.
    ///
    /// input `[N,C,H,W]`, kernel `[K,C,kh,kw]`, bias `[K]` ->
    /// `[N,K,H',W']` with `H' = (H + 2p - kh)/s + 1` (floor).
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 4 || kshape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects 4-D input and kernel, got {:?} and {:?}",
                ishape, kshape
            )));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (k, kc, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
        if kc != c {
            return Err(Error::Shape(format!(
                "conv2d kernel has {} input channels, input has {}",
                kc, c
            )));
        }
        if bshape != [k] {
            return Err(Error::Shape(format!(
                "conv2d bias shape {:?} does not match {} output channels",
                bshape, k
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        if stride == 0 {
            return Err(Error::Shape("conv2d stride must be positive".into()));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;

        let x = &self.nodes[input.0].data;
        let wt = &self.nodes[kernel.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; n * k * oh * ow];

        out.par_chunks_mut(oh * ow).enumerate().for_each(|(nk, o)| {
            let ni = nk / k;
            let ki = nk % k;
            o.fill(b[ki]);
            for ci in 0..c {
                let xin = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                for r in 0..kh {
                    let (oy_lo, oy_hi) = conv_valid_range(r, padding, stride, h, oh);
                    for s in 0..kw {
                        let wv = wt[((ki * c + ci) * kh + r) * kw + s];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = conv_valid_range(s, padding, stride, w, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let len = ox_hi - ox_lo;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + r - padding;
                            let ix0 = ox_lo * stride + s - padding;
                            let orow = &mut o[oy * ow + ox_lo..oy * ow + ox_hi];
                            if stride == 1 {
                                let row = &xin[iy * w + ix0..iy * w + ix0 + len];
                                for (a, &v) in orow.iter_mut().zip(row) {
                                    *a += wv * v;
                                }
                            } else {
                                let row = &xin[iy * w..(iy + 1) * w];
                                for (j, a) in orow.iter_mut().enumerate() {
                                    *a += wv * row[ix0 + j * stride];
                                }
                            }
                        }
                    }
                }
            }
        });

        Ok(self.push(
            Op::Conv2d { stride, padding },
            vec![input, kernel, bias],
            vec![n, k, oh, ow],
            out,
        ))
    }

    // -------------------------------------------------------------- maxpool

    /// Max pooling over square windows. Ties broken by first occurrence in
    /// row-major scan; the winning index is saved for backward routing.
    ///
    /// With `ceil_mode` the output extent is rounded up and border windows
    /// are clipped to the input.
    pub fn maxpool2d(
        &mut self,
        input: NodeId,
        window: usize,
        stride: usize,
        ceil_mode: bool,
    ) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        if ishape.len() != 4 {
            return Err(Error::Shape(format!(
                "maxpool2d expects 4-D input, got {:?}",
                ishape
            )));
        }
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        if window == 0 || stride == 0 {
            return Err(Error::Shape("maxpool2d window/stride must be positive".into()));
        }
        if window > h || window > w {
            return Err(Error::Shape(format!(
                "maxpool2d window {} larger than spatial extent {}x{}",
                window, h, w
            )));
        }
        let out_extent = |e: usize| {
            if ceil_mode {
                (e - window + stride - 1) / stride + 1
            } else {
                (e - window) / stride + 1
            }
        };
        let oh = out_extent(h);
        let ow = out_extent(w);

        let x = &self.nodes[input.0].data;
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for nc in 0..n * c {
            let xin = &x[nc * h * w..(nc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let y0 = oy * stride;
                    let x0 = ox * stride;
                    let y1 = (y0 + window).min(h);
                    let x1 = (x0 + window).min(w);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let v = xin[iy * w + ix];
                            if v > best {
                                best = v;
                                best_idx = iy * w + ix;
                            }
                        }
                    }
                    let oidx = nc * oh * ow + oy * ow + ox;
                    out[oidx] = best;
                    argmax[oidx] = nc * h * w + best_idx;
                }
            }
        }

        Ok(self.push(
            Op::MaxPool2d {
                argmax,
            },
            vec![input],
            vec![n, c, oh, ow],
            out,
        ))
    }

    // ----------------------------------------------------- elementwise etc.

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(input).to_vec();
        self.push(Op::Relu, vec![input], shape, data)
    }

    /// `[N,D] x [M,D] + [M] -> [N,M]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let bshape = self.shape(bias).to_vec();
        if ishape.len() != 2 || wshape.len() != 2 || ishape[1] != wshape[1] || bshape != [wshape[0]]
        {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?} incompatible",
                ishape, wshape, bshape
            )));
        }
        let (n, d) = (ishape[0], ishape[1]);
        let m = wshape[0];
        let x = &self.nodes[input.0].data;
        let wt = &self.nodes[weight.0].data;
        let b = &self.nodes[bias.0].data;
        let mut out = vec![0.0; n * m];
        for ni in 0..n {
            let xrow = &x[ni * d..(ni + 1) * d];
            let orow = &mut out[ni * m..(ni + 1) * m];
            for mi in 0..m {
                let wrow = &wt[mi * d..(mi + 1) * d];
                let mut acc = b[mi];
                for di in 0..d {
                    acc += xrow[di] * wrow[di];
                }
                orow[mi] = acc;
            }
        }
        Ok(self.push(Op::Linear, vec![input, weight, bias], vec![n, m], out))
    }

    /// Row-wise softmax with max subtraction, `[N,n] -> [N,n]`.
    pub fn softmax(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "softmax expects [N,n] input, got {:?}",
                shape
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        let x = &self.nodes[input.0].data;
        let mut out = vec![0.0; n * k];
        for ni in 0..n {
            let row = &x[ni * k..(ni + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[ni * k..(ni + 1) * k];
            let mut sum = 0.0;
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        Ok(self.push(Op::Softmax, vec![input], shape, out))
    }

    // ------------------------------------------------------------ batchnorm

    /// Per-channel batch normalization over `[N,C,H,W]`.
    ///
    /// Train mode normalizes by batch statistics (biased variance) and
    /// updates `running` via `r = (1-momentum)*r + momentum*batch`.
    /// Eval mode normalizes by the running statistics.
    pub fn batchnorm2d(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mode: BatchNormMode,
        running: &mut RunningStats,
        eps: f64,
        momentum: f64,
    ) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "batchnorm2d expects 4-D input, got {:?}",
                shape
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "batchnorm2d gamma/beta must have shape [{}]",
                c
            )));
        }
        if running.mean.len() != c {
            return Err(Error::Shape(format!(
                "batchnorm2d running stats have {} channels, input has {}",
                running.mean.len(),
                c
            )));
        }
        let per_channel = n * h * w;
        if mode == BatchNormMode::Train && per_channel < 2 {
            return Err(Error::Degenerate(
                "batchnorm2d train mode needs at least 2 elements per channel".into(),
            ));
        }

        let x = &self.nodes[input.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut out = vec![0.0; x.len()];
        let plane = h * w;

        let (mean, var) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ci in 0..c {
                    let mut sum = 0.0;
                    for ni in 0..n {
                        let sl = &x[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                        sum += sl.iter().sum::<f64>();
                    }
                    let m = sum / per_channel as f64;
                    let mut ss = 0.0;
                    for ni in 0..n {
                        let sl = &x[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                        ss += sl.iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ci] = m;
                    var[ci] = ss / per_channel as f64;
                }
                for ci in 0..c {
                    running.mean[ci] = (1.0 - momentum) * running.mean[ci] + momentum * mean[ci];
                    running.var[ci] = (1.0 - momentum) * running.var[ci] + momentum * var[ci];
                }
                (mean, var)
            }
            BatchNormMode::Eval => (running.mean.clone(), running.var.clone()),
        };

        for ni in 0..n {
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let sl = &x[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                let ol = &mut out[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                for (o, v) in ol.iter_mut().zip(sl) {
                    *o = g[ci] * (v - mean[ci]) * inv + b[ci];
                }
            }
        }

        let op = match mode {
            BatchNormMode::Train => Op::BatchNorm2d {
                eps,
                batch_stats: Some((mean, var)),
                eval_stats: None,
            },
            BatchNormMode::Eval => Op::BatchNorm2d {
                eps,
                batch_stats: None,
                eval_stats: Some((mean, var)),
            },
        };
        Ok(self.push(op, vec![input, gamma, beta], shape, out))
    }

    // ------------------------------------------------------------- bilinear

    /// Bilinear upsampling with the align-corners convention:
    /// source coordinate = target index * (in-1)/(out-1) when out > 1.
    pub fn bilinear_upsample(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "bilinear_upsample expects 4-D input, got {:?}",
                shape
            )));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Shape("bilinear_upsample output extent must be positive".into()));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let x = &self.nodes[input.0].data;
        let mut out = vec![0.0; n * c * out_h * out_w];
        let ys = axis_samples(h, out_h);
        let xs = axis_samples(w, out_w);
        for nc in 0..n * c {
            let xin = &x[nc * h * w..(nc + 1) * h * w];
            let o = &mut out[nc * out_h * out_w..(nc + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let v00 = xin[y0 * w + x0];
                    let v01 = xin[y0 * w + x1];
                    let v10 = xin[y1 * w + x0];
                    let v11 = xin[y1 * w + x1];
                    let top = v00 + fx * (v01 - v00);
                    let bot = v10 + fx * (v11 - v10);
                    o[oy * out_w + ox] = top + fy * (bot - top);
                }
            }
        }
        Ok(self.push(
            Op::BilinearUpsample,
            vec![input],
            vec![n, c, out_h, out_w],
            out,
        ))
    }

    // ------------------------------------------------------- shape plumbing

    /// Concatenates along the channel axis: `[N,A,H,W] ++ [N,B,H,W] -> [N,A+B,H,W]`.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] {
            return Err(Error::Shape(format!(
                "concat_channels: incompatible shapes {:?} and {:?}",
                sa, sb
            )));
        }
        let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
        let xa = &self.nodes[a.0].data;
        let xb = &self.nodes[b.0].data;
        let mut out = Vec::with_capacity((ca + cb) * n * plane);
        for ni in 0..n {
            out.extend_from_slice(&xa[ni * ca * plane..(ni + 1) * ca * plane]);
            out.extend_from_slice(&xb[ni * cb * plane..(ni + 1) * cb * plane]);
        }
        Ok(self.push(
            Op::ConcatChannels,
            vec![a, b],
            vec![n, ca + cb, sa[2], sa[3]],
            out,
        ))
    }

    /// `[N, C, H, W] -> [N, C]`, each channel averaged over its plane.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 4 {
            return Err(Error::Shape(format!(
                "global_avg_pool expects 4-D input, got {:?}",
                shape
            )));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let data: Vec<f64> = self.nodes[input.0]
            .data
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        Ok(self.push(Op::GlobalAvgPool, vec![input], vec![n, c], data))
    }

    /// `[N, ...] -> [N, D]`.
    pub fn flatten(&mut self, input: NodeId) -> NodeId {
        let shape = self.shape(input).to_vec();
        let n = shape[0];
        let d: usize = shape[1..].iter().product();
        let data = self.nodes[input.0].data.clone();
        self.push(Op::Flatten, vec![input], vec![n, d], data)
    }

    // --------------------------------------------------------------- losses

    /// Mean over the batch of `-log(probs[i, targets[i]])`, probabilities
    /// clamped at 1e-12 before the log.
    pub fn cross_entropy_mean(&mut self, probs: NodeId, targets: &[usize]) -> Result<NodeId> {
        let shape = self.shape(probs).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::Contract(format!(
                "cross_entropy: probs {:?} vs {} targets",
                shape,
                targets.len()
            )));
        }
        let (n, k) = (shape[0], shape[1]);
        for &t in targets {
            if t >= k {
                return Err(Error::Contract(format!(
                    "cross_entropy: class index {} out of range for {} classes",
                    t, k
                )));
            }
        }
        let x = &self.nodes[probs.0].data;
        let mut acc = 0.0;
        for (ni, &t) in targets.iter().enumerate() {
            acc += -x[ni * k + t].max(log_clamp_floor()).ln();
        }
        let v = acc / n as f64;
        Ok(self.push(
            Op::CrossEntropyMean {
                targets: targets.to_vec(),
            },
            vec![probs],
            vec![],
            vec![v],
        ))
    }

    /// Mean of squared differences over all elements of two same-shaped
    /// tensors. For `[N,1,h,w]` maps this is the batch mean of the
    /// per-sample `1/(h*w) * sum((Y-T)^2)` saliency loss.
    pub fn mse_mean(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::Contract(format!(
                "mse: shape mismatch {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let a = &self.nodes[pred.0].data;
        let b = &self.nodes[target.0].data;
        let m = a.len() as f64;
        let v = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / m;
        Ok(self.push(Op::MseMean, vec![pred, target], vec![], vec![v]))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let data: Vec<f64> = self.nodes[input.0].data.iter().map(|v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        self.push(Op::Scale(factor), vec![input], shape, data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add, vec![a, b], shape, data))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let v = self.nodes[input.0].data.iter().sum();
        self.push(Op::Sum, vec![input], vec![], vec![v])
    }

    // ------------------------------------------------------------- backward

    /// Reverse-mode pass from a scalar loss. Gradients accumulate on every
    /// node reachable from `loss` whose `requires_grad` is set.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss.0].shape.is_empty() && self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.ensure_grad(loss);
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = 1.0;
        }

        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx)?;
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: NodeId) {
        if self.nodes[id.0].grad.is_none() {
            let len = self.nodes[id.0].data.len();
            self.nodes[id.0].grad = Some(vec![0.0; len]);
        }
    }

    fn take_grad(&mut self, idx: usize) -> Vec<f64> {
        self.nodes[idx].grad.clone().expect("grad present")
    }

    fn accum(&mut self, id: NodeId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        self.ensure_grad(id);
        let g = self.nodes[id.0].grad.as_mut().unwrap();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    fn backprop_node(&mut self, idx: usize) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        let inputs = self.nodes[idx].inputs.clone();
        let dy = self.take_grad(idx);
        match op {
            Op::Leaf => {}
            Op::Conv2d { stride, padding } => {
                self.backprop_conv2d(idx, &inputs, &dy, stride, padding);
            }
            Op::MaxPool2d { ref argmax, .. } => {
                let input = inputs[0];
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; self.nodes[input.0].data.len()];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += dy[o];
                    }
                    self.accum(input, &dx);
                }
            }
            Op::Relu => {
                let input = inputs[0];
                if self.nodes[input.0].requires_grad {
                    let dx: Vec<f64> = self.nodes[input.0]
                        .data
                        .iter()
                        .zip(&dy)
                        .map(|(x, d)| if *x > 0.0 { *d } else { 0.0 })
                        .collect();
                    self.accum(input, &dx);
                }
            }
            Op::Linear => self.backprop_linear(&inputs, &dy),
            Op::Softmax => {
                let input = inputs[0];
                if self.nodes[input.0].requires_grad {
                    let shape = self.nodes[idx].shape.clone();
                    let (n, k) = (shape[0], shape[1]);
                    let y = &self.nodes[idx].data;
                    let mut dx = vec![0.0; n * k];
                    for ni in 0..n {
                        let yr = &y[ni * k..(ni + 1) * k];
                        let dr = &dy[ni * k..(ni + 1) * k];
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for ki in 0..k {
                            dx[ni * k + ki] = yr[ki] * (dr[ki] - dot);
                        }
                    }
                    self.accum(input, &dx);
                }
            }
            Op::BatchNorm2d {
                eps,
                ref batch_stats,
                ref eval_stats,
            } => {
                self.backprop_batchnorm(idx, &inputs, &dy, eps, batch_stats, eval_stats);
            }
            Op::BilinearUpsample => {
                let input = inputs[0];
                if self.nodes[input.0].requires_grad {
                    let ishape = self.nodes[input.0].shape.clone();
                    let oshape = self.nodes[idx].shape.clone();
                    let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                    let (oh, ow) = (oshape[2], oshape[3]);
                    let ys = axis_samples(h, oh);
                    let xs = axis_samples(w, ow);
                    let mut dx = vec![0.0; n * c * h * w];
                    for nc in 0..n * c {
                        let d = &dy[nc * oh * ow..(nc + 1) * oh * ow];
                        let o = &mut dx[nc * h * w..(nc + 1) * h * w];
                        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                                let g = d[oy * ow + ox];
                                o[y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                                o[y0 * w + x1] += g * (1.0 - fy) * fx;
                                o[y1 * w + x0] += g * fy * (1.0 - fx);
                                o[y1 * w + x1] += g * fy * fx;
                            }
                        }
                    }
                    self.accum(input, &dx);
                }
            }
            Op::ConcatChannels => {
                let sa = self.nodes[inputs[0].0].shape.clone();
                let sb = self.nodes[inputs[1].0].shape.clone();
                let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
                let ctot = ca + cb;
                if self.nodes[inputs[0].0].requires_grad {
                    let mut da = vec![0.0; n * ca * plane];
                    for ni in 0..n {
                        da[ni * ca * plane..(ni + 1) * ca * plane].copy_from_slice(
                            &dy[ni * ctot * plane..ni * ctot * plane + ca * plane],
                        );
                    }
                    self.accum(inputs[0], &da);
                }
                if self.nodes[inputs[1].0].requires_grad {
                    let mut db = vec![0.0; n * cb * plane];
                    for ni in 0..n {
                        db[ni * cb * plane..(ni + 1) * cb * plane].copy_from_slice(
                            &dy[ni * ctot * plane + ca * plane..(ni + 1) * ctot * plane],
                        );
                    }
                    self.accum(inputs[1], &db);
                }
            }
            Op::Flatten => {
                self.accum(inputs[0], &dy);
            }
            Op::GlobalAvgPool => {
                let input = inputs[0];
                if self.nodes[input.0].requires_grad {
                    let shape = self.nodes[input.0].shape.clone();
                    let plane = shape[2] * shape[3];
                    let mut dx = vec![0.0; shape.iter().product()];
                    for (pi, chunk) in dx.chunks_mut(plane).enumerate() {
                        let g = dy[pi] / plane as f64;
                        chunk.fill(g);
                    }
                    self.accum(input, &dx);
                }
            }
            Op::CrossEntropyMean { ref targets } => {
                let input = inputs[0];
                if self.nodes[input.0].requires_grad {
                    let shape = self.nodes[input.0].shape.clone();
                    let (n, k) = (shape[0], shape[1]);
                    let y = &self.nodes[input.0].data;
                    let mut dx = vec![0.0; n * k];
                    let scale = dy[0] / n as f64;
                    for (ni, &t) in targets.iter().enumerate() {
                        let yt = y[ni * k + t].max(log_clamp_floor());
                        dx[ni * k + t] = -scale / yt;
                    }
                    self.accum(input, &dx);
                }
            }
            Op::MseMean => {
                let diff: Vec<f64> = {
                    let a = &self.nodes[inputs[0].0].data;
                    let b = &self.nodes[inputs[1].0].data;
                    let m = a.len() as f64;
                    let scale = 2.0 * dy[0] / m;
                    a.iter().zip(b.iter()).map(|(x, y)| scale * (x - y)).collect()
                };
                if self.nodes[inputs[0].0].requires_grad {
                    self.accum(inputs[0], &diff);
                }
                if self.nodes[inputs[1].0].requires_grad {
                    let db: Vec<f64> = diff.iter().map(|d| -d).collect();
                    self.accum(inputs[1], &db);
                }
            }
            Op::Scale(f) => {
                if self.nodes[inputs[0].0].requires_grad {
                    let dx: Vec<f64> = dy.iter().map(|d| d * f).collect();
                    self.accum(inputs[0], &dx);
                }
            }
            Op::Add => {
                self.accum(inputs[0], &dy);
                self.accum(inputs[1], &dy);
            }
            Op::Sum => {
                if self.nodes[inputs[0].0].requires_grad {
                    let dx = vec![dy[0]; self.nodes[inputs[0].0].data.len()];
                    self.accum(inputs[0], &dx);
                }
            }
        }
        Ok(())
    }

    fn backprop_conv2d(&mut self, idx: usize, inputs: &[NodeId], dy: &[f64], stride: usize, padding: usize) {
        let ishape = self.nodes[inputs[0].0].shape.clone();
        let kshape = self.nodes[inputs[1].0].shape.clone();
        let oshape = self.nodes[idx].shape.clone();
        let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
        let (k, kh, kw) = (kshape[0], kshape[2], kshape[3]);
        let (oh, ow) = (oshape[2], oshape[3]);

        if self.nodes[inputs[0].0].requires_grad {
            let wt = &self.nodes[inputs[1].0].data;
            let mut dx = vec![0.0; n * c * h * w];
            dx.par_chunks_mut(h * w).enumerate().for_each(|(nc, d)| {
                let ni = nc / c;
                let ci = nc % c;
                for ki in 0..k {
                    let dout = &dy[(ni * k + ki) * oh * ow..(ni * k + ki + 1) * oh * ow];
                    for r in 0..kh {
                        let (oy_lo, oy_hi) = conv_valid_range(r, padding, stride, h, oh);
                        for s in 0..kw {
                            let wv = wt[((ki * c + ci) * kh + r) * kw + s];
                            if wv == 0.0 {
                                continue;
                            }
                            let (ox_lo, ox_hi) = conv_valid_range(s, padding, stride, w, ow);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let len = ox_hi - ox_lo;
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + r - padding;
                                let ix0 = ox_lo * stride + s - padding;
                                let drow = &dout[oy * ow + ox_lo..oy * ow + ox_hi];
                                if stride == 1 {
                                    let xrow = &mut d[iy * w + ix0..iy * w + ix0 + len];
                                    for (a, &g) in xrow.iter_mut().zip(drow) {
                                        *a += wv * g;
                                    }
                                } else {
                                    for (j, &g) in drow.iter().enumerate() {
                                        d[iy * w + ix0 + j * stride] += wv * g;
                                    }
                                }
                            }
                        }
                    }
                }
            });
            self.accum(inputs[0], &dx);
        }

        if self.nodes[inputs[1].0].requires_grad {
            let x = &self.nodes[inputs[0].0].data;
            let mut dw = vec![0.0; k * c * kh * kw];
            dw.par_chunks_mut(kh * kw).enumerate().for_each(|(kc, d)| {
                let ki = kc / c;
                let ci = kc % c;
                for ni in 0..n {
                    let xin = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    let dout = &dy[(ni * k + ki) * oh * ow..(ni * k + ki + 1) * oh * ow];
                    for r in 0..kh {
                        let (oy_lo, oy_hi) = conv_valid_range(r, padding, stride, h, oh);
                        for s in 0..kw {
                            let (ox_lo, ox_hi) = conv_valid_range(s, padding, stride, w, ow);
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let len = ox_hi - ox_lo;
                            let mut acc = 0.0;
                            for oy in oy_lo..oy_hi {
                                let iy = oy * stride + r - padding;
                                let ix0 = ox_lo * stride + s - padding;
                                let drow = &dout[oy * ow + ox_lo..oy * ow + ox_hi];
                                if stride == 1 {
                                    let xrow = &xin[iy * w + ix0..iy * w + ix0 + len];
                                    for (&g, &v) in drow.iter().zip(xrow) {
                                        acc += g * v;
                                    }
                                } else {
                                    for (j, &g) in drow.iter().enumerate() {
                                        acc += g * xin[iy * w + ix0 + j * stride];
                                    }
                                }
                            }
                            d[r * kw + s] += acc;
                        }
                    }
                }
            });
            self.accum(inputs[1], &dw);
        }

        if self.nodes[inputs[2].0].requires_grad {
            let mut db = vec![0.0; k];
            for ni in 0..n {
                for ki in 0..k {
                    db[ki] += dy[(ni * k + ki) * oh * ow..(ni * k + ki + 1) * oh * ow]
                        .iter()
                        .sum::<f64>();
                }
            }
            self.accum(inputs[2], &db);
        }
    }

    fn backprop_linear(&mut self, inputs: &[NodeId], dy: &[f64]) {
        let ishape = self.nodes[inputs[0].0].shape.clone();
        let wshape = self.nodes[inputs[1].0].shape.clone();
        let (n, d) = (ishape[0], ishape[1]);
        let m = wshape[0];
        if self.nodes[inputs[0].0].requires_grad {
            let wt = &self.nodes[inputs[1].0].data;
            let mut dx = vec![0.0; n * d];
            for ni in 0..n {
                let drow = &dy[ni * m..(ni + 1) * m];
                let xrow = &mut dx[ni * d..(ni + 1) * d];
                for mi in 0..m {
                    let g = drow[mi];
                    if g == 0.0 {
                        continue;
                    }
                    let wrow = &wt[mi * d..(mi + 1) * d];
                    for di in 0..d {
                        xrow[di] += g * wrow[di];
                    }
                }
            }
            self.accum(inputs[0], &dx);
        }
        if self.nodes[inputs[1].0].requires_grad {
            let x = &self.nodes[inputs[0].0].data;
            let mut dw = vec![0.0; m * d];
            for ni in 0..n {
                let drow = &dy[ni * m..(ni + 1) * m];
                let xrow = &x[ni * d..(ni + 1) * d];
                for mi in 0..m {
                    let g = drow[mi];
                    if g == 0.0 {
                        continue;
                    }
                    let wrow = &mut dw[mi * d..(mi + 1) * d];
                    for di in 0..d {
                        wrow[di] += g * xrow[di];
                    }
                }
            }
            self.accum(inputs[1], &dw);
        }
        if self.nodes[inputs[2].0].requires_grad {
            let mut db = vec![0.0; m];
            for ni in 0..n {
                for mi in 0..m {
                    db[mi] += dy[ni * m + mi];
                }
            }
            self.accum(inputs[2], &db);
        }
    }

    fn backprop_batchnorm(
        &mut self,
        idx: usize,
        inputs: &[NodeId],
        dy: &[f64],
        eps: f64,
        batch_stats: &Option<(Vec<f64>, Vec<f64>)>,
        eval_stats: &Option<(Vec<f64>, Vec<f64>)>,
    ) {
        let shape = self.nodes[idx].shape.clone();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let m = (n * plane) as f64;
        let g = self.nodes[inputs[1].0].data.clone();
        let x = self.nodes[inputs[0].0].data.clone();

        let (mean, var, train) = match (batch_stats, eval_stats) {
            (Some((m, v)), _) => (m.clone(), v.clone(), true),
            (_, Some((m, v))) => (m.clone(), v.clone(), false),
            _ => unreachable!(),
        };

        // xhat and per-channel reductions of dy
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + eps).sqrt();
                let base = (ni * c + ci) * plane;
                for p in 0..plane {
                    let xhat = (x[base + p] - mean[ci]) * inv;
                    let d = dy[base + p];
                    dgamma[ci] += d * xhat;
                    dbeta[ci] += d;
                    sum_dy[ci] += d;
                    sum_dy_xhat[ci] += d * xhat;
                }
            }
        }

        if self.nodes[inputs[0].0].requires_grad {
            let mut dx = vec![0.0; x.len()];
            for ni in 0..n {
                for ci in 0..c {
                    let inv = 1.0 / (var[ci] + eps).sqrt();
                    let base = (ni * c + ci) * plane;
                    for p in 0..plane {
                        let d = dy[base + p];
                        dx[base + p] = if train {
                            let xhat = (x[base + p] - mean[ci]) * inv;
                            g[ci] * inv * (d - sum_dy[ci] / m - xhat * sum_dy_xhat[ci] / m)
                        } else {
                            g[ci] * inv * d
                        };
                    }
                }
            }
            self.accum(inputs[0], &dx);
        }
        if self.nodes[inputs[1].0].requires_grad {
            self.accum(inputs[1], &dgamma);
        }
        if self.nodes[inputs[2].0].requires_grad {
            self.accum(inputs[2], &dbeta);
        }
    }
}

/// Align-corners sample positions for one axis: (lo, hi, frac) per output
/// index. `out == 1` or `in == 1` degenerate to the first source sample.
fn axis_samples(inn: usize, out: usize) -> Vec<(usize, usize, f64)> {
    (0..out)
        .map(|i| {
            if out <= 1 || inn <= 1 {
                (0, 0, 0.0)
            } else {
                let src = i as f64 * (inn - 1) as f64 / (out - 1) as f64;
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inn - 1);
                (lo, hi, src - lo as f64)
            }
        })
        .collect()
}

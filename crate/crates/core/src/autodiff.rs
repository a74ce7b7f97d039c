//! Minimal reverse-mode automatic differentiation on dense f64 tensors.
//!
//! A [`Tape`] is an append-only arena: each op validates shapes eagerly (shape
//! errors are programming errors, so they panic), stores its output value,
//! and [`Tape::backward`] walks the arena once in reverse, accumulating
//! gradients. Tapes are cheap to build, so training constructs one per item
//! and merges gradients outside — that keeps batch parallelism trivial and
//! deterministic.
//!
//! The op set is exactly what the reconstruction network and its losses
//! need: convolutions (zero padding, arbitrary stride, im2col fast path),
//! dense layers, ReLU, channel concat/slice, reductions, nearest-neighbor
//! ×2 upsampling, rank-decomposition outer products, and the masked-L1 /
//! MSE losses.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    fn dims3(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected rank-3 tensor");
        (self.shape[0], self.shape[1], self.shape[2])
    }

    fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank-2 tensor");
        (self.shape[0], self.shape[1])
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub usize);

enum Op {
    Leaf,
    Relu {
        x: VarId,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Sub {
        a: VarId,
        b: VarId,
    },
    Mul {
        a: VarId,
        b: VarId,
    },
    MulScalar {
        x: VarId,
        k: f64,
    },
    Dense {
        x: VarId,
        w: VarId,
        b: VarId,
    },
    Conv2d {
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
    },
    ConcatChannels {
        parts: Vec<VarId>,
    },
    SliceChannels {
        x: VarId,
        start: usize,
        len: usize,
    },
    SumAll {
        x: VarId,
    },
    MeanAll {
        x: VarId,
    },
    MeanAxis {
        x: VarId,
        axis: usize,
    },
    MeanSpatial {
        x: VarId,
    },
    Reshape {
        x: VarId,
    },
    Upsample2 {
        x: VarId,
    },
    Outer3 {
        v: VarId,
        m: VarId,
        axis: usize,
    },
    SumOuter3 {
        factors: [VarId; 6],
    },
    MaskedL1 {
        pred: VarId,
        target: Tensor,
        mask: Tensor,
    },
    Mse {
        a: VarId,
        b: VarId,
    },
}

/// Reverse-mode arena tape.
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

/// Gradients produced by one backward pass, indexed by [`VarId`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the root with respect to `id`; zeros if the node did not
    /// influence the root.
    pub fn get(&self, id: VarId, tape: &Tape) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&tape.values[id.0].shape),
        }
    }

    pub fn get_ref(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id.0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.values.push(value);
        self.ops.push(op);
        VarId(self.values.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let v = Tensor {
            shape: self.values[x.0].shape.clone(),
            data: self.values[x.0].data.iter().map(|&v| v.max(0.0)).collect(),
        };
        self.push(v, Op::Relu { x })
    }

    fn zip_shapes(&self, a: VarId, b: VarId, what: &str) {
        assert_eq!(
            self.values[a.0].shape, self.values[b.0].shape,
            "{what}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_shapes(a, b, "add");
        let v = Tensor {
            shape: self.values[a.0].shape.clone(),
            data: self.values[a.0]
                .data
                .iter()
                .zip(self.values[b.0].data.iter())
                .map(|(x, y)| x + y)
                .collect(),
        };
        self.push(v, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_shapes(a, b, "sub");
        let v = Tensor {
            shape: self.values[a.0].shape.clone(),
            data: self.values[a.0]
                .data
                .iter()
                .zip(self.values[b.0].data.iter())
                .map(|(x, y)| x - y)
                .collect(),
        };
        self.push(v, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_shapes(a, b, "mul");
        let v = Tensor {
            shape: self.values[a.0].shape.clone(),
            data: self.values[a.0]
                .data
                .iter()
                .zip(self.values[b.0].data.iter())
                .map(|(x, y)| x * y)
                .collect(),
        };
        self.push(v, Op::Mul { a, b })
    }

    pub fn mul_scalar(&mut self, x: VarId, k: f64) -> VarId {
        let v = Tensor {
            shape: self.values[x.0].shape.clone(),
            data: self.values[x.0].data.iter().map(|&v| v * k).collect(),
        };
        self.push(v, Op::MulScalar { x, k })
    }

    /// y = W·x + b for a vector x: W is (out, in), b is (out).
    pub fn dense(&mut self, x: VarId, w: VarId, b: VarId) -> VarId {
        let (o, i) = self.values[w.0].dims2();
        assert_eq!(self.values[x.0].numel(), i, "dense: input size mismatch");
        assert_eq!(self.values[b.0].numel(), o, "dense: bias size mismatch");
        let xv = &self.values[x.0].data;
        let wv = &self.values[w.0].data;
        let bv = &self.values[b.0].data;
        let mut out = Vec::with_capacity(o);
        for r in 0..o {
            let row = &wv[r * i..(r + 1) * i];
            let mut acc = bv[r];
            for c in 0..i {
                acc += row[c] * xv[c];
            }
            out.push(acc);
        }
        self.push(Tensor::from_vec(&[o], out), Op::Dense { x, w, b })
    }

    /// 2D convolution on a CHW tensor with zero padding.
    /// Weights are (out_ch, in_ch, kh, kw); output spans must divide evenly.
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> VarId {
        let (cin, h, wd) = self.values[x.0].dims3();
        let ws = &self.values[w.0].shape;
        assert_eq!(ws.len(), 4, "conv2d: weights must be rank 4");
        let (cout, cin2, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(cin, cin2, "conv2d: channel mismatch");
        assert_eq!(self.values[b.0].numel(), cout, "conv2d: bias size mismatch");
        assert!(stride > 0, "conv2d: zero stride");
        assert!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "conv2d: kernel {kh}×{kw} larger than padded input {h}×{wd} (pad {pad})"
        );
        // Floor semantics: trailing rows/columns that don't fit a full
        // stride are dropped, as in the usual convolution arithmetic.
        let hout = (h + 2 * pad - kh) / stride + 1;
        let wout = (wd + 2 * pad - kw) / stride + 1;
        let col = im2col(&self.values[x.0], kh, kw, stride, pad, hout, wout);
        let rows = cin * kh * kw;
        let cols = hout * wout;
        let wv = &self.values[w.0].data;
        let bv = &self.values[b.0].data;
        let mut out = vec![0.0; cout * cols];
        for o in 0..cout {
            let orow = &mut out[o * cols..(o + 1) * cols];
            orow.iter_mut().for_each(|v| *v = bv[o]);
            for r in 0..rows {
                let wv_or = wv[o * rows + r];
                if wv_or == 0.0 {
                    continue;
                }
                let crow = &col[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    orow[c] += wv_or * crow[c];
                }
            }
        }
        self.push(
            Tensor::from_vec(&[cout, hout, wout], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        )
    }

    /// Concatenate rank-3 CHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty(), "concat_channels: no inputs");
        let (_, h, w) = self.values[parts[0].0].dims3();
        let mut channels = 0;
        for &p in parts {
            let (c, ph, pw) = self.values[p.0].dims3();
            assert_eq!((ph, pw), (h, w), "concat_channels: spatial mismatch");
            channels += c;
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for &p in parts {
            data.extend_from_slice(&self.values[p.0].data);
        }
        self.push(
            Tensor::from_vec(&[channels, h, w], data),
            Op::ConcatChannels {
                parts: parts.to_vec(),
            },
        )
    }

    /// Channels `start..start+len` of a rank-2 or rank-3 tensor (axis 0).
    pub fn slice_channels(&mut self, x: VarId, start: usize, len: usize) -> VarId {
        let shape = &self.values[x.0].shape;
        assert!(!shape.is_empty(), "slice_channels: rank-0 input");
        assert!(start + len <= shape[0], "slice_channels: out of range");
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let data = self.values[x.0].data[start * inner..(start + len) * inner].to_vec();
        self.push(
            Tensor::from_vec(&out_shape, data),
            Op::SliceChannels { x, start, len },
        )
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s: f64 = self.values[x.0].data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let n = self.values[x.0].numel();
        assert!(n > 0, "mean_all: empty tensor");
        let s: f64 = self.values[x.0].data.iter().sum();
        self.push(Tensor::scalar(s / n as f64), Op::MeanAll { x })
    }

    /// Mean over one axis of a rank-3 tensor.
    pub fn mean_axis(&mut self, x: VarId, axis: usize) -> VarId {
        let (a, b, c) = self.values[x.0].dims3();
        assert!(axis < 3, "mean_axis: bad axis");
        let xv = &self.values[x.0].data;
        let (out_shape, out) = match axis {
            0 => {
                let mut o = vec![0.0; b * c];
                for i in 0..a {
                    for jk in 0..b * c {
                        o[jk] += xv[i * b * c + jk];
                    }
                }
                o.iter_mut().for_each(|v| *v /= a as f64);
                (vec![b, c], o)
            }
            1 => {
                let mut o = vec![0.0; a * c];
                for i in 0..a {
                    for j in 0..b {
                        for k in 0..c {
                            o[i * c + k] += xv[(i * b + j) * c + k];
                        }
                    }
                }
                o.iter_mut().for_each(|v| *v /= b as f64);
                (vec![a, c], o)
            }
            _ => {
                let mut o = vec![0.0; a * b];
                for ij in 0..a * b {
                    for k in 0..c {
                        o[ij] += xv[ij * c + k];
                    }
                }
                o.iter_mut().for_each(|v| *v /= c as f64);
                (vec![a, b], o)
            }
        };
        self.push(Tensor::from_vec(&out_shape, out), Op::MeanAxis { x, axis })
    }

    /// Mean over H and W of a CHW tensor, producing a C vector.
    pub fn mean_spatial(&mut self, x: VarId) -> VarId {
        let (c, h, w) = self.values[x.0].dims3();
        let xv = &self.values[x.0].data;
        let hw = h * w;
        let out: Vec<f64> = (0..c)
            .map(|ch| xv[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Tensor::from_vec(&[c], out), Op::MeanSpatial { x })
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> VarId {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.values[x.0].numel(),
            "reshape: element count mismatch"
        );
        let v = Tensor::from_vec(shape, self.values[x.0].data.clone());
        self.push(v, Op::Reshape { x })
    }

    /// Nearest-neighbor ×2 upsampling of a CHW tensor.
    pub fn upsample2(&mut self, x: VarId) -> VarId {
        let (c, h, w) = self.values[x.0].dims3();
        let xv = &self.values[x.0].data;
        let mut out = vec![0.0; c * 4 * h * w];
        let (h2, w2) = (2 * h, 2 * w);
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = xv[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::from_vec(&[c, h2, w2], out), Op::Upsample2 { x })
    }

    /// One axis of a vector–matrix rank decomposition:
    /// axis 0 ⇒ out[i,j,k] = Σ_r v[r,i]·m[r,j,k], and cyclically for 1, 2.
    pub fn outer3(&mut self, v: VarId, m: VarId, axis: usize, shape: [usize; 3]) -> VarId {
        let (rv, nv) = self.values[v.0].dims2();
        let (rm, ma, mb) = self.values[m.0].dims3();
        assert_eq!(rv, rm, "outer3: rank mismatch");
        assert!(axis < 3, "outer3: bad axis");
        let (expect_v, expect_m) = match axis {
            0 => (shape[0], (shape[1], shape[2])),
            1 => (shape[1], (shape[0], shape[2])),
            _ => (shape[2], (shape[0], shape[1])),
        };
        assert_eq!(nv, expect_v, "outer3: vector length mismatch");
        assert_eq!((ma, mb), expect_m, "outer3: matrix shape mismatch");
        let mut out = Tensor::zeros(&shape);
        outer3_accumulate(
            &self.values[v.0],
            &self.values[m.0],
            axis,
            shape,
            &mut out.data,
        );
        self.push(out, Op::Outer3 { v, m, axis })
    }

    /// Full three-axis reconstruction Σ_axis outer3 — fused so no
    /// intermediate grids are stored on the tape.
    /// `factors` = [vx, myz, vy, mxz, vz, mxy].
    pub fn sum_outer3(&mut self, factors: [VarId; 6], shape: [usize; 3]) -> VarId {
        let mut out = Tensor::zeros(&shape);
        for axis in 0..3 {
            let v = factors[2 * axis];
            let m = factors[2 * axis + 1];
            let (rv, _) = self.values[v.0].dims2();
            let (rm, _, _) = self.values[m.0].dims3();
            assert_eq!(rv, rm, "sum_outer3: rank mismatch on axis {axis}");
            outer3_accumulate(
                &self.values[v.0],
                &self.values[m.0],
                axis,
                shape,
                &mut out.data,
            );
        }
        self.push(out, Op::SumOuter3 { factors })
    }

    /// Σ mask·|pred − target| / Σ mask — the mean absolute error over the
    /// occupied region, so losses are comparable across occupancies.
    pub fn masked_l1(&mut self, pred: VarId, target: &Tensor, mask: &Tensor) -> VarId {
        assert_eq!(
            self.values[pred.0].shape, target.shape,
            "masked_l1: target shape mismatch"
        );
        assert_eq!(
            self.values[pred.0].shape, mask.shape,
            "masked_l1: mask shape mismatch"
        );
        let occupied: f64 = mask.data.iter().sum();
        assert!(occupied > 0.0, "masked_l1: empty mask");
        let mut acc = 0.0;
        for ((p, t), m) in self.values[pred.0]
            .data
            .iter()
            .zip(target.data.iter())
            .zip(mask.data.iter())
        {
            acc += m * (p - t).abs();
        }
        self.push(
            Tensor::scalar(acc / occupied),
            Op::MaskedL1 {
                pred,
                target: target.clone(),
                mask: mask.clone(),
            },
        )
    }

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: VarId, b: VarId) -> VarId {
        self.zip_shapes(a, b, "mse");
        let n = self.values[a.0].numel();
        assert!(n > 0, "mse: empty tensors");
        let mut acc = 0.0;
        for (x, y) in self.values[a.0].data.iter().zip(self.values[b.0].data.iter()) {
            let d = x - y;
            acc += d * d;
        }
        self.push(Tensor::scalar(acc / n as f64), Op::Mse { a, b })
    }

    /// Backpropagate from a single-element root through the whole tape.
    pub fn backward(&self, root: VarId) -> Grads {
        assert_eq!(
            self.values[root.0].numel(),
            1,
            "backward: root must be a scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[root.0] = Some(Tensor {
            shape: self.values[root.0].shape.clone(),
            data: vec![1.0],
        });
        for idx in (0..self.ops.len()).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_one(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: VarId, add: impl FnOnce(&mut Tensor)) {
        if grads[id.0].is_none() {
            grads[id.0] = Some(Tensor::zeros(&self.values[id.0].shape));
        }
        add(grads[id.0].as_mut().expect("just initialized"));
    }

    fn backprop_one(&self, idx: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::Relu { x } => {
                let xv = &self.values[x.0].data;
                self.accumulate(grads, *x, |g| {
                    for i in 0..g.data.len() {
                        if xv[i] > 0.0 {
                            g.data[i] += gout.data[i];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += gout.data[i];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += gout.data[i];
                    }
                });
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += gout.data[i];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] -= gout.data[i];
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = &self.values[a.0].data;
                let bv = &self.values[b.0].data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += gout.data[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += gout.data[i] * av[i];
                    }
                });
            }
            Op::MulScalar { x, k } => {
                let k = *k;
                self.accumulate(grads, *x, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += gout.data[i] * k;
                    }
                });
            }
            Op::Dense { x, w, b } => {
                let (o, i) = self.values[w.0].dims2();
                let xv = &self.values[x.0].data;
                let wv = &self.values[w.0].data;
                self.accumulate(grads, *b, |g| {
                    for r in 0..o {
                        g.data[r] += gout.data[r];
                    }
                });
                self.accumulate(grads, *w, |g| {
                    for r in 0..o {
                        let gr = gout.data[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..i {
                            g.data[r * i + c] += gr * xv[c];
                        }
                    }
                });
                self.accumulate(grads, *x, |g| {
                    for r in 0..o {
                        let gr = gout.data[r];
                        if gr == 0.0 {
                            continue;
                        }
                        for c in 0..i {
                            g.data[c] += gr * wv[r * i + c];
                        }
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                self.backprop_conv2d(*x, *w, *b, *stride, *pad, gout, grads);
            }
            Op::ConcatChannels { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.values[p.0].numel();
                    let slice = &gout.data[offset..offset + n];
                    self.accumulate(grads, p, |g| {
                        for i in 0..n {
                            g.data[i] += slice[i];
                        }
                    });
                    offset += n;
                }
            }
            Op::SliceChannels { x, start, len } => {
                let inner: usize = self.values[x.0].shape[1..].iter().product();
                let (start, len) = (*start, *len);
                self.accumulate(grads, *x, |g| {
                    for i in 0..len * inner {
                        g.data[start * inner + i] += gout.data[i];
                    }
                });
            }
            Op::SumAll { x } => {
                let g0 = gout.data[0];
                self.accumulate(grads, *x, |g| {
                    for v in g.data.iter_mut() {
                        *v += g0;
                    }
                });
            }
            Op::MeanAll { x } => {
                let g0 = gout.data[0] / self.values[x.0].numel() as f64;
                self.accumulate(grads, *x, |g| {
                    for v in g.data.iter_mut() {
                        *v += g0;
                    }
                });
            }
            Op::MeanAxis { x, axis } => {
                let (a, b, c) = self.values[x.0].dims3();
                let axis = *axis;
                self.accumulate(grads, *x, |g| match axis {
                    0 => {
                        let k = 1.0 / a as f64;
                        for i in 0..a {
                            for jk in 0..b * c {
                                g.data[i * b * c + jk] += gout.data[jk] * k;
                            }
                        }
                    }
                    1 => {
                        let k = 1.0 / b as f64;
                        for i in 0..a {
                            for j in 0..b {
                                for kk in 0..c {
                                    g.data[(i * b + j) * c + kk] += gout.data[i * c + kk] * k;
                                }
                            }
                        }
                    }
                    _ => {
                        let k = 1.0 / c as f64;
                        for ij in 0..a * b {
                            for kk in 0..c {
                                g.data[ij * c + kk] += gout.data[ij] * k;
                            }
                        }
                    }
                });
            }
            Op::MeanSpatial { x } => {
                let (ch, h, w) = self.values[x.0].dims3();
                let hw = h * w;
                self.accumulate(grads, *x, |g| {
                    for c in 0..ch {
                        let gc = gout.data[c] / hw as f64;
                        for i in 0..hw {
                            g.data[c * hw + i] += gc;
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += gout.data[i];
                    }
                });
            }
            Op::Upsample2 { x } => {
                let (c, h, w) = self.values[x.0].dims3();
                let (h2, w2) = (2 * h, 2 * w);
                self.accumulate(grads, *x, |g| {
                    for ch in 0..c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                g.data[(ch * h + y / 2) * w + xx / 2] +=
                                    gout.data[(ch * h2 + y) * w2 + xx];
                            }
                        }
                    }
                });
            }
            Op::Outer3 { v, m, axis } => {
                let shape = {
                    let s = &self.values[idx].shape;
                    [s[0], s[1], s[2]]
                };
                self.backprop_outer3(*v, *m, *axis, shape, gout, grads);
            }
            Op::SumOuter3 { factors } => {
                let shape = {
                    let s = &self.values[idx].shape;
                    [s[0], s[1], s[2]]
                };
                for axis in 0..3 {
                    self.backprop_outer3(
                        factors[2 * axis],
                        factors[2 * axis + 1],
                        axis,
                        shape,
                        gout,
                        grads,
                    );
                }
            }
            Op::MaskedL1 { pred, target, mask } => {
                let occupied: f64 = mask.data.iter().sum();
                let g0 = gout.data[0] / occupied;
                let pv = &self.values[pred.0].data;
                self.accumulate(grads, *pred, |g| {
                    for i in 0..g.data.len() {
                        let d = pv[i] - target.data[i];
                        // Subgradient 0 at the kink.
                        let sgn = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        g.data[i] += g0 * mask.data[i] * sgn;
                    }
                });
            }
            Op::Mse { a, b } => {
                let n = self.values[a.0].numel() as f64;
                let g0 = gout.data[0] * 2.0 / n;
                let av = &self.values[a.0].data;
                let bv = &self.values[b.0].data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] += g0 * (av[i] - bv[i]);
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.data.len() {
                        g.data[i] -= g0 * (av[i] - bv[i]);
                    }
                });
            }
        }
    }

    fn backprop_conv2d(
        &self,
        x: VarId,
        w: VarId,
        b: VarId,
        stride: usize,
        pad: usize,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (cin, h, wd) = self.values[x.0].dims3();
        let ws = &self.values[w.0].shape;
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (hout, wout) = (gout.shape[1], gout.shape[2]);
        let rows = cin * kh * kw;
        let cols = hout * wout;
        // d_b.
        self.accumulate(grads, b, |g| {
            for o in 0..cout {
                g.data[o] += gout.data[o * cols..(o + 1) * cols].iter().sum::<f64>();
            }
        });
        // d_w = gout · colᵀ (col recomputed, not stored on the tape).
        let col = im2col(&self.values[x.0], kh, kw, stride, pad, hout, wout);
        self.accumulate(grads, w, |g| {
            for o in 0..cout {
                let grow = &gout.data[o * cols..(o + 1) * cols];
                for r in 0..rows {
                    let crow = &col[r * cols..(r + 1) * cols];
                    let mut acc = 0.0;
                    for c in 0..cols {
                        acc += grow[c] * crow[c];
                    }
                    g.data[o * rows + r] += acc;
                }
            }
        });
        // d_x = wᵀ · gout, scattered back through im2col.
        let wv = &self.values[w.0].data;
        let mut dcol = vec![0.0; rows * cols];
        for o in 0..cout {
            let grow = &gout.data[o * cols..(o + 1) * cols];
            for r in 0..rows {
                let wv_or = wv[o * rows + r];
                if wv_or == 0.0 {
                    continue;
                }
                let drow = &mut dcol[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    drow[c] += wv_or * grow[c];
                }
            }
        }
        self.accumulate(grads, x, |g| {
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let r = (ci * kh + ky) * kw + kx;
                        let drow = &dcol[r * cols..(r + 1) * cols];
                        for oy in 0..hout {
                            let iy = oy * stride + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            for ox in 0..wout {
                                let ix = ox * stride + kx;
                                if ix < pad || ix - pad >= wd {
                                    continue;
                                }
                                g.data[(ci * h + iy - pad) * wd + ix - pad] +=
                                    drow[oy * wout + ox];
                            }
                        }
                    }
                }
            }
        });
    }

    fn backprop_outer3(
        &self,
        v: VarId,
        m: VarId,
        axis: usize,
        shape: [usize; 3],
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (r, _) = self.values[v.0].dims2();
        let vv = &self.values[v.0].data;
        let mv = &self.values[m.0].data;
        let [ni, nj, nk] = shape;
        // d_v[r,a] = Σ_bc gout[...]·m[r,b,c]; d_m[r,b,c] = Σ_a gout·v[r,a].
        match axis {
            0 => {
                self.accumulate(grads, v, |g| {
                    for rr in 0..r {
                        let mrow = &mv[rr * nj * nk..(rr + 1) * nj * nk];
                        for i in 0..ni {
                            let grow = &gout.data[i * nj * nk..(i + 1) * nj * nk];
                            let mut acc = 0.0;
                            for jk in 0..nj * nk {
                                acc += grow[jk] * mrow[jk];
                            }
                            g.data[rr * ni + i] += acc;
                        }
                    }
                });
                self.accumulate(grads, m, |g| {
                    for rr in 0..r {
                        let grow_m = &mut g.data[rr * nj * nk..(rr + 1) * nj * nk];
                        for i in 0..ni {
                            let vi = vv[rr * ni + i];
                            if vi == 0.0 {
                                continue;
                            }
                            let grow = &gout.data[i * nj * nk..(i + 1) * nj * nk];
                            for jk in 0..nj * nk {
                                grow_m[jk] += vi * grow[jk];
                            }
                        }
                    }
                });
            }
            1 => {
                self.accumulate(grads, v, |g| {
                    for rr in 0..r {
                        for j in 0..nj {
                            let mut acc = 0.0;
                            for i in 0..ni {
                                for k in 0..nk {
                                    acc += gout.data[(i * nj + j) * nk + k]
                                        * mv[(rr * ni + i) * nk + k];
                                }
                            }
                            g.data[rr * nj + j] += acc;
                        }
                    }
                });
                self.accumulate(grads, m, |g| {
                    for rr in 0..r {
                        for i in 0..ni {
                            for k in 0..nk {
                                let mut acc = 0.0;
                                for j in 0..nj {
                                    acc += gout.data[(i * nj + j) * nk + k] * vv[rr * nj + j];
                                }
                                g.data[(rr * ni + i) * nk + k] += acc;
                            }
                        }
                    }
                });
            }
            _ => {
                self.accumulate(grads, v, |g| {
                    for rr in 0..r {
                        for k in 0..nk {
                            let mut acc = 0.0;
                            for ij in 0..ni * nj {
                                acc += gout.data[ij * nk + k] * mv[rr * ni * nj + ij];
                            }
                            g.data[rr * nk + k] += acc;
                        }
                    }
                });
                self.accumulate(grads, m, |g| {
                    for rr in 0..r {
                        for ij in 0..ni * nj {
                            let mut acc = 0.0;
                            for k in 0..nk {
                                acc += gout.data[ij * nk + k] * vv[rr * nk + k];
                            }
                            g.data[rr * ni * nj + ij] += acc;
                        }
                    }
                });
            }
        }
    }
}

/// out[i,j,k] += Σ_r v[r,·]·m[r,·,·] with the vector on `axis`.
fn outer3_accumulate(v: &Tensor, m: &Tensor, axis: usize, shape: [usize; 3], out: &mut [f64]) {
    let (r, nv) = v.dims2();
    let [ni, nj, nk] = shape;
    match axis {
        0 => {
            assert_eq!(nv, ni);
            assert_eq!(m.shape, vec![r, nj, nk]);
            for rr in 0..r {
                let mrow = &m.data[rr * nj * nk..(rr + 1) * nj * nk];
                for i in 0..ni {
                    let vi = v.data[rr * ni + i];
                    if vi == 0.0 {
                        continue;
                    }
                    let orow = &mut out[i * nj * nk..(i + 1) * nj * nk];
                    for jk in 0..nj * nk {
                        orow[jk] += vi * mrow[jk];
                    }
                }
            }
        }
        1 => {
            assert_eq!(nv, nj);
            assert_eq!(m.shape, vec![r, ni, nk]);
            for rr in 0..r {
                for i in 0..ni {
                    let mrow = &m.data[(rr * ni + i) * nk..(rr * ni + i + 1) * nk];
                    for j in 0..nj {
                        let vj = v.data[rr * nj + j];
                        if vj == 0.0 {
                            continue;
                        }
                        let orow = &mut out[(i * nj + j) * nk..(i * nj + j + 1) * nk];
                        for k in 0..nk {
                            orow[k] += vj * mrow[k];
                        }
                    }
                }
            }
        }
        _ => {
            assert_eq!(nv, nk);
            assert_eq!(m.shape, vec![r, ni, nj]);
            for rr in 0..r {
                let vrow = &v.data[rr * nk..(rr + 1) * nk];
                for ij in 0..ni * nj {
                    let mij = m.data[rr * ni * nj + ij];
                    if mij == 0.0 {
                        continue;
                    }
                    let orow = &mut out[ij * nk..(ij + 1) * nk];
                    for k in 0..nk {
                        orow[k] += mij * vrow[k];
                    }
                }
            }
        }
    }
}

/// Unfold a CHW tensor into the (cin·kh·kw) × (hout·wout) patch matrix.
fn im2col(
    x: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hout: usize,
    wout: usize,
) -> Vec<f64> {
    let (cin, h, w) = x.dims3();
    let cols = hout * wout;
    let mut col = vec![0.0; cin * kh * kw * cols];
    for c in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let out_row = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..hout {
                    let iy = oy * stride + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    for ox in 0..wout {
                        let ix = ox * stride + kx;
                        if ix < pad || ix - pad >= w {
                            continue;
                        }
                        out_row[oy * wout + ox] = x.data[(c * h + iy - pad) * w + ix - pad];
                    }
                }
            }
        }
    }
    col
}

// ---------------------------------------------------------------------------
// Finite-difference checking
// ---------------------------------------------------------------------------

/// One verified gradient check.
#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl CheckEntry {
    pub fn pass(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tol
    }
}

/// Results of a gradient-check suite.
#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn all_pass(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(CheckEntry::pass)
    }

    pub fn push(&mut self, name: String, max_rel_err: f64, tol: f64) {
        self.entries.push(CheckEntry {
            name,
            max_rel_err,
            tol,
        });
    }
}

/// Relative error with an absolute floor, used by every FD comparison.
pub fn fd_rel_err(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0)
}

/// Compare analytic gradients of `build` (which must rebuild the same graph
/// from the same leaves every call) against central finite differences on
/// every leaf coordinate, stepping at most `max_probes` per leaf.
pub fn fd_check(
    build: &dyn Fn(&mut Tape, &[Tensor]) -> VarId,
    leaves: &[Tensor],
    max_probes: usize,
) -> f64 {
    let mut tape = Tape::new();
    let root = build(&mut tape, leaves);
    let grads = tape.backward(root);
    // Leaves occupy the first ids in creation order by construction.
    let mut max_err = 0.0f64;
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(VarId(li), &tape);
        let n = leaf.numel();
        let stride = (n / max_probes).max(1);
        let mut idx = li % stride.min(n); // deterministic offset per leaf
        while idx < n {
            let x0 = leaf.data[idx];
            let h = 1e-5 * (1.0 + x0.abs());
            work[li].data[idx] = x0 + h;
            let mut tp = Tape::new();
            let r = build(&mut tp, &work);
            let fp = tp.value(r).item();
            work[li].data[idx] = x0 - h;
            let mut tm = Tape::new();
            let r = build(&mut tm, &work);
            let fm = tm.value(r).item();
            work[li].data[idx] = x0;
            let fd = (fp - fm) / (2.0 * h);
            max_err = max_err.max(fd_rel_err(analytic.data[idx], fd));
            idx += stride;
        }
    }
    max_err
}

fn rng_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut crate::rng::CounterRng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.next_range(lo, hi)).collect())
}

/// Finite-difference verification of every tape op (and a small composite
/// network), each as `max relative error ≤ 1e−4`.
pub fn ops_fd_report(seed: u64) -> CheckReport {
    use crate::rng::CounterRng;
    const TOL: f64 = 1e-4;
    let mut rng = CounterRng::keyed(&[seed, 0xF0]);
    let mut report = CheckReport::default();

    // Shared random read-out vector turns any tensor output into a smooth
    // scalar: loss = Σ out·probe.
    fn readout(tape: &mut Tape, out: VarId, probe: &Tensor) -> VarId {
        let p = tape.leaf(probe.clone());
        let prod = tape.mul(out, p);
        tape.sum_all(prod)
    }

    // relu (inputs kept away from the kink).
    {
        let mut x = rng_tensor(&[4, 5], 0.2, 1.0, &mut rng);
        for (i, v) in x.data.iter_mut().enumerate() {
            if i % 2 == 0 {
                *v = -*v;
            }
        }
        let probe = rng_tensor(&[4, 5], -1.0, 1.0, &mut rng);
        let err = fd_check(
            &move |t, l| {
                let x = t.leaf(l[0].clone());
                let y = t.relu(x);
                readout(t, y, &probe)
            },
            &[x],
            64,
        );
        report.push("relu".into(), err, TOL);
    }

    // add / sub / mul / mul_scalar.
    {
        let a = rng_tensor(&[3, 4], -1.0, 1.0, &mut rng);
        let b = rng_tensor(&[3, 4], -1.0, 1.0, &mut rng);
        let probe = rng_tensor(&[3, 4], -1.0, 1.0, &mut rng);
        let err = fd_check(
            &move |t, l| {
                let a = t.leaf(l[0].clone());
                let b = t.leaf(l[1].clone());
                let s = t.add(a, b);
                let d = t.sub(s, b);
                let m = t.mul(d, b);
                let k = t.mul_scalar(m, -1.7);
                readout(t, k, &probe)
            },
            &[a, b],
            64,
        );
        report.push("add_sub_mul_scalar".into(), err, TOL);
    }

    // dense.
    {
        let x = rng_tensor(&[7], -1.0, 1.0, &mut rng);
        let w = rng_tensor(&[5, 7], -0.5, 0.5, &mut rng);
        let b = rng_tensor(&[5], -0.5, 0.5, &mut rng);
        let probe = rng_tensor(&[5], -1.0, 1.0, &mut rng);
        let err = fd_check(
            &move |t, l| {
                let x = t.leaf(l[0].clone());
                let w = t.leaf(l[1].clone());
                let b = t.leaf(l[2].clone());
                let y = t.dense(x, w, b);
                readout(t, y, &probe)
            },
            &[x, w, b],
            64,
        );
        report.push("dense".into(), err, TOL);
    }

    // conv2d variants.
    for (name, cin, cout, k, stride, pad, h, w) in [
        ("conv2d_s1_p1", 2usize, 3usize, 3usize, 1usize, 1usize, 6usize, 6usize),
        ("conv2d_s2_p1", 2, 4, 3, 2, 1, 7, 7),
        ("conv2d_1x1", 3, 2, 1, 1, 0, 5, 5),
    ] {
        let x = rng_tensor(&[cin, h, w], -1.0, 1.0, &mut rng);
        let wt = rng_tensor(&[cout, cin, k, k], -0.5, 0.5, &mut rng);
        let b = rng_tensor(&[cout], -0.2, 0.2, &mut rng);
        let hout = (h + 2 * pad - k) / stride + 1;
        let probe = rng_tensor(&[cout, hout, hout], -1.0, 1.0, &mut rng);
        let err = fd_check(
            &move |t, l| {
                let x = t.leaf(l[0].clone());
                let w = t.leaf(l[1].clone());
                let b = t.leaf(l[2].clone());
                let y = t.conv2d(x, w, b, stride, pad);
                readout(t, y, &probe)
            },
            &[x, wt, b],
            48,
        );
        report.push(name.into(), err, TOL);
    }

    // concat + slice.
    {
        let a = rng_tensor(&[2, 3, 3], -1.0, 1.0, &mut rng);
        let b = rng_tensor(&[3, 3, 3], -1.0, 1.0, &mut rng);
        let probe = rng_tensor(&[2, 3, 3], -1.0, 1.0, &mut rng);
        let err = fd_check(
            &move |t, l| {
                let a = t.leaf(l[0].clone());
                let b = t.leaf(l[1].clone());
                let cat = t.concat_channels(&[a, b]);
                let sl = t.slice_channels(cat, 1, 2);
                readout(t, sl, &probe)
            },
            &[a, b],
            64,
        );
        report.push("concat_slice_channels".into(), err, TOL);
    }

    // reductions.
    {
        let x = rng_tensor(&[3, 4, 5], -1.0, 1.0, &mut rng);
        let p0 = rng_tensor(&[4, 5], -1.0, 1.0, &mut rng);
        let p1 = rng_tensor(&[3, 5], -1.0, 1.0, &mut rng);
        let p2 = rng_tensor(&[3, 4], -1.0, 1.0, &mut rng);
        let pc = rng_tensor(&[3], -1.0, 1.0, &mut rng);
        let err = fd_check(
            &move |t, l| {
                let x = t.leaf(l[0].clone());
                let m0 = t.mean_axis(x, 0);
                let r0 = readout(t, m0, &p0);
                let m1 = t.mean_axis(x, 1);
                let r1 = readout(t, m1, &p1);
                let m2 = t.mean_axis(x, 2);
                let r2 = readout(t, m2, &p2);
                let ms = t.mean_spatial(x);
                let r3 = readout(t, ms, &pc);
                let ma = t.mean_all(x);
                let sa = t.sum_all(x);
                let t1 = t.add(r0, r1);
                let t2 = t.add(r2, r3);
                let t3 = t.add(t1, t2);
                let t4 = t.add(ma, sa);
                t.add(t3, t4)
            },
            &[x],
            64,
        );
        report.push("reductions".into(), err, TOL);
    }

    // reshape + upsample2.
    {
        let x = rng_tensor(&[2, 3, 4], -1.0, 1.0, &mut rng);
        let probe = rng_tensor(&[2, 6, 8], -1.0, 1.0, &mut rng);
        let err = fd_check(
            &move |t, l| {
                let x = t.leaf(l[0].clone());
                let r = t.reshape(x, &[2, 3, 4]);
                let u = t.upsample2(r);
                readout(t, u, &probe)
            },
            &[x],
            32,
        );
        report.push("reshape_upsample2".into(), err, TOL);
    }

    // outer3 per axis, and the fused three-axis sum.
    {
        let shape = [3usize, 4, 5];
        let r = 2;
        let vx = rng_tensor(&[r, 3], -1.0, 1.0, &mut rng);
        let myz = rng_tensor(&[r, 4, 5], -1.0, 1.0, &mut rng);
        let vy = rng_tensor(&[r, 4], -1.0, 1.0, &mut rng);
        let mxz = rng_tensor(&[r, 3, 5], -1.0, 1.0, &mut rng);
        let vz = rng_tensor(&[r, 5], -1.0, 1.0, &mut rng);
        let mxy = rng_tensor(&[r, 3, 4], -1.0, 1.0, &mut rng);
        let probe = rng_tensor(&[3, 4, 5], -1.0, 1.0, &mut rng);
        {
            let probe = probe.clone();
            let err = fd_check(
                &move |t, l| {
                    let ids: Vec<VarId> = l.iter().map(|x| t.leaf(x.clone())).collect();
                    let o0 = t.outer3(ids[0], ids[1], 0, shape);
                    let o1 = t.outer3(ids[2], ids[3], 1, shape);
                    let o2 = t.outer3(ids[4], ids[5], 2, shape);
                    let s = t.add(o0, o1);
                    let s = t.add(s, o2);
                    readout(t, s, &probe)
                },
                &[
                    vx.clone(),
                    myz.clone(),
                    vy.clone(),
                    mxz.clone(),
                    vz.clone(),
                    mxy.clone(),
                ],
                32,
            );
            report.push("outer3".into(), err, TOL);
        }
        let err = fd_check(
            &move |t, l| {
                let ids: Vec<VarId> = l.iter().map(|x| t.leaf(x.clone())).collect();
                let s = t.sum_outer3([ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]], shape);
                readout(t, s, &probe)
            },
            &[vx, myz, vy, mxz, vz, mxy],
            32,
        );
        report.push("sum_outer3".into(), err, TOL);
    }

    // masked_l1 (differences kept away from the kink).
    {
        let pred = rng_tensor(&[3, 3, 3], 0.5, 1.0, &mut rng);
        let target = rng_tensor(&[3, 3, 3], 0.0, 0.2, &mut rng);
        let mut mask = rng_tensor(&[3, 3, 3], 0.0, 1.0, &mut rng);
        for v in mask.data.iter_mut() {
            *v = if *v > 0.4 { 1.0 } else { 0.0 };
        }
        let err = fd_check(
            &move |t, l| {
                let p = t.leaf(l[0].clone());
                t.masked_l1(p, &target, &mask)
            },
            &[pred],
            32,
        );
        report.push("masked_l1".into(), err, TOL);
    }

    // mse (both sides live).
    {
        let a = rng_tensor(&[4, 4], -1.0, 1.0, &mut rng);
        let b = rng_tensor(&[4, 4], -1.0, 1.0, &mut rng);
        let err = fd_check(
            &move |t, l| {
                let a = t.leaf(l[0].clone());
                let b = t.leaf(l[1].clone());
                t.mse(a, b)
            },
            &[a, b],
            32,
        );
        report.push("mse".into(), err, TOL);
    }

    // Composite: conv → relu → upsample → conv → spatial mean → dense → mse.
    {
        let x = rng_tensor(&[2, 6, 6], -1.0, 1.0, &mut rng);
        let w1 = rng_tensor(&[3, 2, 3, 3], -0.4, 0.4, &mut rng);
        let b1 = rng_tensor(&[3], -0.1, 0.1, &mut rng);
        let w2 = rng_tensor(&[2, 3, 3, 3], -0.4, 0.4, &mut rng);
        let b2 = rng_tensor(&[2], -0.1, 0.1, &mut rng);
        let wd = rng_tensor(&[3, 2], -0.5, 0.5, &mut rng);
        let bd = rng_tensor(&[3], -0.1, 0.1, &mut rng);
        let target = rng_tensor(&[3], -0.5, 0.5, &mut rng);
        let err = fd_check(
            &move |t, l| {
                let x = t.leaf(l[0].clone());
                let w1 = t.leaf(l[1].clone());
                let b1 = t.leaf(l[2].clone());
                let w2 = t.leaf(l[3].clone());
                let b2 = t.leaf(l[4].clone());
                let wd = t.leaf(l[5].clone());
                let bd = t.leaf(l[6].clone());
                let c1 = t.conv2d(x, w1, b1, 2, 1);
                let r1 = t.relu(c1);
                let u = t.upsample2(r1);
                let c2 = t.conv2d(u, w2, b2, 1, 1);
                let r2 = t.relu(c2);
                let f = t.mean_spatial(r2);
                let y = t.dense(f, wd, bd);
                let tt = t.leaf(target.clone());
                t.mse(y, tt)
            },
            &[x, w1, b1, w2, b2, wd, bd],
            24,
        );
        report.push("two_layer_net".into(), err, TOL);
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn forward_values_of_simple_ops() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(&[3], vec![1.0, -2.0, 3.0]));
        let b = t.leaf(Tensor::from_vec(&[3], vec![0.5, 4.0, -1.0]));
        let s = t.add(a, b);
        assert_eq!(t.value(s).data, vec![1.5, 2.0, 2.0]);
        let r = t.relu(a);
        assert_eq!(t.value(r).data, vec![1.0, 0.0, 3.0]);
        let m = t.mul(a, b);
        assert_eq!(t.value(m).data, vec![0.5, -8.0, -3.0]);
        let d = t.sub(a, b);
        assert_eq!(t.value(d).data, vec![0.5, -6.0, 4.0]);
        let k = t.mul_scalar(a, 2.0);
        assert_eq!(t.value(k).data, vec![2.0, -4.0, 6.0]);
        let sm = t.sum_all(a);
        assert_eq!(t.value(sm).item(), 2.0);
        let mn = t.mean_all(a);
        assert!((t.value(mn).item() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn conv2d_identity_kernel_reproduces_input() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(
            &[1, 3, 3],
            (0..9).map(|v| v as f64).collect(),
        ));
        // 3×3 kernel with a single center 1: identity under pad 1.
        let mut kw = vec![0.0; 9];
        kw[4] = 1.0;
        let w = t.leaf(Tensor::from_vec(&[1, 1, 3, 3], kw));
        let b = t.leaf(Tensor::from_vec(&[1], vec![0.0]));
        let y = t.conv2d(x, w, b, 1, 1);
        assert_eq!(t.value(y).shape, vec![1, 3, 3]);
        assert_eq!(t.value(y).data, t.value(x).data);
    }

    #[test]
    fn conv2d_stride_two_downsamples() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(
            &[1, 4, 4],
            (0..16).map(|v| v as f64).collect(),
        ));
        let w = t.leaf(Tensor::from_vec(&[2, 1, 3, 3], vec![0.1; 18]));
        let b = t.leaf(Tensor::from_vec(&[2], vec![1.0, -1.0]));
        let y = t.conv2d(x, w, b, 2, 1);
        assert_eq!(t.value(y).shape, vec![2, 2, 2]);
        // Top-left output of channel 0: bias + 0.1·Σ of the 2×2 valid corner
        // (pad contributes zeros): values 0,1,4,5.
        assert!((t.value(y).data[0] - (1.0 + 0.1 * 10.0)).abs() < 1e-12);
    }

    #[test]
    fn upsample_then_sum_equals_four_times_sum() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let u = t.upsample2(x);
        let s = t.sum_all(u);
        assert_eq!(t.value(s).item(), 40.0);
        let g = t.backward(s);
        assert_eq!(g.get(x, &t).data, vec![4.0; 4]);
    }

    #[test]
    fn sum_outer3_matches_three_outer3() {
        let mut rng = CounterRng::new(7);
        let shape = [4usize, 5, 6];
        let r = 3;
        let vx = rng_tensor(&[r, 4], -1.0, 1.0, &mut rng);
        let myz = rng_tensor(&[r, 5, 6], -1.0, 1.0, &mut rng);
        let vy = rng_tensor(&[r, 5], -1.0, 1.0, &mut rng);
        let mxz = rng_tensor(&[r, 4, 6], -1.0, 1.0, &mut rng);
        let vz = rng_tensor(&[r, 6], -1.0, 1.0, &mut rng);
        let mxy = rng_tensor(&[r, 4, 5], -1.0, 1.0, &mut rng);
        let mut t1 = Tape::new();
        let ids: Vec<VarId> = [&vx, &myz, &vy, &mxz, &vz, &mxy]
            .iter()
            .map(|x| t1.leaf((*x).clone()))
            .collect();
        let o0 = t1.outer3(ids[0], ids[1], 0, shape);
        let o1 = t1.outer3(ids[2], ids[3], 1, shape);
        let o2 = t1.outer3(ids[4], ids[5], 2, shape);
        let s = t1.add(o0, o1);
        let s = t1.add(s, o2);
        let mut t2 = Tape::new();
        let ids2: Vec<VarId> = [&vx, &myz, &vy, &mxz, &vz, &mxy]
            .iter()
            .map(|x| t2.leaf((*x).clone()))
            .collect();
        let f = t2.sum_outer3([ids2[0], ids2[1], ids2[2], ids2[3], ids2[4], ids2[5]], shape);
        for (a, b) in t1.value(s).data.iter().zip(t2.value(f).data.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Gradients agree too (dual-route check on the fused op).
        let l1 = t1.sum_all(s);
        let l2 = t2.sum_all(f);
        let g1 = t1.backward(l1);
        let g2 = t2.backward(l2);
        for i in 0..6 {
            let a = g1.get(ids[i], &t1);
            let b = g2.get(ids2[i], &t2);
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_op_gradients_match_finite_differences() {
        let report = ops_fd_report(42);
        assert!(report.entries.len() >= 12);
        for e in &report.entries {
            assert!(
                e.pass(),
                "{}: max relative error {} exceeds {}",
                e.name,
                e.max_rel_err,
                e.tol
            );
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // ∇(2.5·f) = 2.5·∇f, and gradients through a shared subgraph add.
        let mut rng = CounterRng::new(77);
        let xv = rng_tensor(&[6], -1.0, 1.0, &mut rng);
        let mut t = Tape::new();
        let x = t.leaf(xv.clone());
        let sq = t.mul(x, x);
        let f = t.sum_all(sq);
        let g1 = t.backward(f);
        let scaled = t.mul_scalar(f, 2.5);
        let g2 = t.backward(scaled);
        for i in 0..6 {
            let a = g1.get(x, &t).data[i];
            let b = g2.get(x, &t).data[i];
            assert!((b - 2.5 * a).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_are_deterministic() {
        let run = |seed: u64| -> Vec<u64> {
            let mut rng = CounterRng::new(seed);
            let x = rng_tensor(&[2, 4, 4], -1.0, 1.0, &mut rng);
            let w = rng_tensor(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
            let b = rng_tensor(&[3], -0.1, 0.1, &mut rng);
            let mut t = Tape::new();
            let xi = t.leaf(x);
            let wi = t.leaf(w);
            let bi = t.leaf(b);
            let y = t.conv2d(xi, wi, bi, 1, 1);
            let r = t.relu(y);
            let l = t.mean_all(r);
            let g = t.backward(l);
            g.get(wi, &t).data.iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn unreached_nodes_get_zero_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let b = t.leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let s = t.sum_all(a);
        let g = t.backward(s);
        assert!(g.get_ref(b).is_none());
        assert_eq!(g.get(b, &t).data, vec![0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn mismatched_add_panics() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(&[2]));
        let b = t.leaf(Tensor::zeros(&[3]));
        t.add(a, b);
    }
}

//! Immediate-mode computation graph with reverse-mode differentiation.

use super::conv::{col2im, im2col, matmul, matmul_a_bt, matmul_at_b};
use super::{ParamGrads, ParamId, ParamStore, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

enum Op {
    Leaf,
    Conv2d {
        input: ValueId,
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: usize,
        cols: Vec<f64>,
        cin: usize,
        hin: usize,
        win: usize,
    },
    Linear {
        input: ValueId,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    Upsample2x {
        input: ValueId,
    },
    GlobalMeanPool {
        input: ValueId,
    },
    Silu {
        input: ValueId,
    },
    Sigmoid {
        input: ValueId,
    },
    Exp {
        input: ValueId,
    },
    Clamp {
        input: ValueId,
        lo: f64,
        hi: f64,
    },
    LeakyClamp {
        input: ValueId,
        lo: f64,
        hi: f64,
        slope: f64,
    },
    ScaleShift {
        input: ValueId,
        a: f64,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    AddChannelBias {
        input: ValueId,
        bias: ValueId,
    },
    ConcatChannels {
        a: ValueId,
        b: ValueId,
    },
    Reshape {
        input: ValueId,
    },
    Detach,
    CodebookLookup {
        codebook: ParamId,
        indices: Vec<usize>,
    },
    MseLoss {
        a: ValueId,
        b: ValueId,
    },
    L1Loss {
        a: ValueId,
        b: ValueId,
    },
    KlStdNormal {
        mu: ValueId,
        logvar: ValueId,
    },
    CosSim {
        a: ValueId,
        b: ValueId,
    },
    LogSoftmax {
        input: ValueId,
    },
    Pick {
        input: ValueId,
        index: usize,
    },
}

struct Node {
    shape: Shape,
    data: Vec<f64>,
    op: Op,
}

/// One computation tape over a parameter store. Values are computed eagerly
/// at op creation; `backward` differentiates a scalar node with respect to
/// all parameters and leaves.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

pub struct BackwardResult {
    pub param_grads: ParamGrads,
    node_grads: Vec<Option<Vec<f64>>>,
}

impl BackwardResult {
    /// Gradient with respect to a leaf (or any node), if it was reached.
    pub fn node_grad(&self, id: ValueId) -> Option<&[f64]> {
        self.node_grads[id.0].as_deref()
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::new() }
    }

    fn push(&mut self, shape: Shape, data: Vec<f64>, op: Op) -> ValueId {
        debug_assert_eq!(shape.len(), data.len());
        self.nodes.push(Node { shape, data, op });
        ValueId(self.nodes.len() - 1)
    }

    pub fn data(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: ValueId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: ValueId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn leaf(&mut self, shape: Shape, data: Vec<f64>) -> ValueId {
        self.push(shape, data, Op::Leaf)
    }

    pub fn conv2d(
        &mut self,
        input: ValueId,
        weight: ParamId,
        bias: Option<ParamId>,
        stride: usize,
        pad: usize,
    ) -> ValueId {
        let in_shape = self.shape(input);
        let w = self.params.get(weight);
        let (cout, cin, k) = (w.shape[0], w.shape[1], w.shape[2]);
        debug_assert_eq!(w.shape[3], k);
        debug_assert_eq!(in_shape.c, cin, "conv2d channel mismatch");
        let (cols, ho, wo) = im2col(&self.nodes[input.0].data, cin, in_shape.h, in_shape.w, k, stride, pad);
        let ckk = cin * k * k;
        let n = ho * wo;
        let mut out = vec![0.0; cout * n];
        matmul(&w.data, &cols, &mut out, cout, ckk, n);
        if let Some(bid) = bias {
            let b = &self.params.get(bid).data;
            for c in 0..cout {
                let row = &mut out[c * n..(c + 1) * n];
                for v in row.iter_mut() {
                    *v += b[c];
                }
            }
        }
        self.push(
            Shape::new(cout, ho, wo),
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
                cin,
                hin: in_shape.h,
                win: in_shape.w,
            },
        )
    }

    pub fn linear(&mut self, input: ValueId, weight: ParamId, bias: Option<ParamId>) -> ValueId {
        let x = &self.nodes[input.0];
        let w = self.params.get(weight);
        let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
        debug_assert_eq!(x.data.len(), in_dim, "linear input mismatch");
        let mut out = vec![0.0; out_dim];
        for o in 0..out_dim {
            let row = &w.data[o * in_dim..(o + 1) * in_dim];
            let mut acc = 0.0;
            for (rw, xv) in row.iter().zip(&x.data) {
                acc += rw * xv;
            }
            out[o] = acc;
        }
        if let Some(bid) = bias {
            for (v, b) in out.iter_mut().zip(&self.params.get(bid).data) {
                *v += b;
            }
        }
        self.push(Shape::vec(out_dim), out, Op::Linear { input, weight, bias })
    }

    pub fn upsample2x(&mut self, input: ValueId) -> ValueId {
        let s = self.shape(input);
        let (c, h, w) = (s.c, s.h, s.w);
        let mut out = vec![0.0; c * 4 * h * w];
        let src = &self.nodes[input.0].data;
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = src[(ci * h + y) * w + x];
                    let base = ci * 4 * h * w;
                    let (yy, xx) = (2 * y, 2 * x);
                    out[base + yy * 2 * w + xx] = v;
                    out[base + yy * 2 * w + xx + 1] = v;
                    out[base + (yy + 1) * 2 * w + xx] = v;
                    out[base + (yy + 1) * 2 * w + xx + 1] = v;
                }
            }
        }
        self.push(Shape::new(c, 2 * h, 2 * w), out, Op::Upsample2x { input })
    }

    pub fn global_mean_pool(&mut self, input: ValueId) -> ValueId {
        let s = self.shape(input);
        let hw = (s.h * s.w) as f64;
        let src = &self.nodes[input.0].data;
        let out: Vec<f64> = (0..s.c)
            .map(|c| src[c * s.h * s.w..(c + 1) * s.h * s.w].iter().sum::<f64>() / hw)
            .collect();
        self.push(Shape::vec(s.c), out, Op::GlobalMeanPool { input })
    }

    pub fn silu(&mut self, input: ValueId) -> ValueId {
        let shape = self.shape(input);
        let out: Vec<f64> = self.nodes[input.0]
            .data
            .iter()
            .map(|&x| x / (1.0 + (-x).exp()))
            .collect();
        self.push(shape, out, Op::Silu { input })
    }

    pub fn sigmoid(&mut self, input: ValueId) -> ValueId {
        let shape = self.shape(input);
        let out: Vec<f64> = self.nodes[input.0]
            .data
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(shape, out, Op::Sigmoid { input })
    }

    pub fn exp(&mut self, input: ValueId) -> ValueId {
        let shape = self.shape(input);
        let out: Vec<f64> = self.nodes[input.0].data.iter().map(|&x| x.exp()).collect();
        self.push(shape, out, Op::Exp { input })
    }

    pub fn clamp(&mut self, input: ValueId, lo: f64, hi: f64) -> ValueId {
        let shape = self.shape(input);
        let out: Vec<f64> = self.nodes[input.0].data.iter().map(|&x| x.clamp(lo, hi)).collect();
        self.push(shape, out, Op::Clamp { input, lo, hi })
    }

    /// Clamp whose backward passes `slope` outside the band instead of 0,
    /// so saturated values can still recover during training.
    pub fn leaky_clamp(&mut self, input: ValueId, lo: f64, hi: f64, slope: f64) -> ValueId {
        let shape = self.shape(input);
        let out: Vec<f64> = self.nodes[input.0].data.iter().map(|&x| x.clamp(lo, hi)).collect();
        self.push(shape, out, Op::LeakyClamp { input, lo, hi, slope })
    }

    pub fn scale_shift(&mut self, input: ValueId, a: f64, b: f64) -> ValueId {
        let shape = self.shape(input);
        let out: Vec<f64> = self.nodes[input.0].data.iter().map(|&x| a * x + b).collect();
        self.push(shape, out, Op::ScaleShift { input, a })
    }

    pub fn scale(&mut self, input: ValueId, a: f64) -> ValueId {
        self.scale_shift(input, a, 0.0)
    }

    fn binary_elementwise(
        &mut self,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> ValueId {
        debug_assert_eq!(self.shape(a).len(), self.shape(b).len());
        let shape = self.shape(a);
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(shape, out, op)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a (c,1,1) bias vector to every spatial position of (c,h,w).
    pub fn add_channel_bias(&mut self, input: ValueId, bias: ValueId) -> ValueId {
        let s = self.shape(input);
        debug_assert_eq!(self.shape(bias).len(), s.c);
        let b = &self.nodes[bias.0].data;
        let mut out = self.nodes[input.0].data.clone();
        for c in 0..s.c {
            for v in out[c * s.h * s.w..(c + 1) * s.h * s.w].iter_mut() {
                *v += b[c];
            }
        }
        self.push(s, out, Op::AddChannelBias { input, bias })
    }

    pub fn concat_channels(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let sa = self.shape(a);
        let sb = self.shape(b);
        debug_assert_eq!((sa.h, sa.w), (sb.h, sb.w));
        let mut out = Vec::with_capacity((sa.c + sb.c) * sa.h * sa.w);
        out.extend_from_slice(&self.nodes[a.0].data);
        out.extend_from_slice(&self.nodes[b.0].data);
        self.push(
            Shape::new(sa.c + sb.c, sa.h, sa.w),
            out,
            Op::ConcatChannels { a, b },
        )
    }

    pub fn reshape(&mut self, input: ValueId, shape: Shape) -> ValueId {
        debug_assert_eq!(self.shape(input).len(), shape.len());
        let data = self.nodes[input.0].data.clone();
        self.push(shape, data, Op::Reshape { input })
    }

    /// Forward copy, zero backward (stop-gradient).
    pub fn detach(&mut self, input: ValueId) -> ValueId {
        let shape = self.shape(input);
        let data = self.nodes[input.0].data.clone();
        self.push(shape, data, Op::Detach)
    }

    /// (n_z, h, w) tensor whose cell (y,x) is codebook row `indices[y*w+x]`.
    pub fn codebook_lookup(
        &mut self,
        codebook: ParamId,
        indices: Vec<usize>,
        h: usize,
        w: usize,
    ) -> ValueId {
        let cb = self.params.get(codebook);
        let n_z = cb.shape[1];
        let cells = h * w;
        debug_assert_eq!(indices.len(), cells);
        let mut out = vec![0.0; n_z * cells];
        for (cell, &idx) in indices.iter().enumerate() {
            let row = &cb.data[idx * n_z..(idx + 1) * n_z];
            for z in 0..n_z {
                out[z * cells + cell] = row[z];
            }
        }
        self.push(
            Shape::new(n_z, h, w),
            out,
            Op::CodebookLookup { codebook, indices },
        )
    }

    pub fn mse_loss(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let n = self.shape(a).len() as f64;
        let v = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        self.push(Shape::scalar(), vec![v], Op::MseLoss { a, b })
    }

    pub fn l1_loss(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let n = self.shape(a).len() as f64;
        let v = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| (x - y).abs())
            .sum::<f64>()
            / n;
        self.push(Shape::scalar(), vec![v], Op::L1Loss { a, b })
    }

    /// KL(N(mu, exp(logvar)) || N(0, I)) summed over dimensions.
    pub fn kl_std_normal(&mut self, mu: ValueId, logvar: ValueId) -> ValueId {
        let v = self.nodes[mu.0]
            .data
            .iter()
            .zip(&self.nodes[logvar.0].data)
            .map(|(&m, &lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
            .sum::<f64>();
        self.push(Shape::scalar(), vec![v], Op::KlStdNormal { mu, logvar })
    }

    /// Cosine similarity of the flattened tensors.
    pub fn cos_sim(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (s, na, nb) = self.cos_parts(a, b);
        let denom = na * nb + COS_EPS;
        self.push(Shape::scalar(), vec![s / denom], Op::CosSim { a, b })
    }

    fn cos_parts(&self, a: ValueId, b: ValueId) -> (f64, f64, f64) {
        let xa = &self.nodes[a.0].data;
        let xb = &self.nodes[b.0].data;
        let s: f64 = xa.iter().zip(xb).map(|(&x, &y)| x * y).sum();
        let na = xa.iter().map(|&x| x * x).sum::<f64>().sqrt();
        let nb = xb.iter().map(|&x| x * x).sum::<f64>().sqrt();
        (s, na, nb)
    }

    pub fn log_softmax(&mut self, input: ValueId) -> ValueId {
        let shape = self.shape(input);
        let x = &self.nodes[input.0].data;
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let out: Vec<f64> = x.iter().map(|&v| v - lse).collect();
        self.push(shape, out, Op::LogSoftmax { input })
    }

    pub fn pick(&mut self, input: ValueId, index: usize) -> ValueId {
        let v = self.nodes[input.0].data[index];
        self.push(Shape::scalar(), vec![v], Op::Pick { input, index })
    }

    /// Reverse-mode gradients of scalar `loss` w.r.t. parameters and leaves.
    pub fn backward(&self, loss: ValueId) -> BackwardResult {
        assert_eq!(self.nodes[loss.0].data.len(), 1, "loss must be scalar");
        let mut node_grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut param_grads = ParamGrads::zeros_like(self.params);
        node_grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            let g = match &node_grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            self.backprop_node(i, &g, &mut node_grads, &mut param_grads);
        }

        BackwardResult { param_grads, node_grads }
    }

    fn accumulate(dst: &mut Option<Vec<f64>>, src: &[f64]) {
        match dst {
            Some(d) => {
                for (a, b) in d.iter_mut().zip(src) {
                    *a += b;
                }
            }
            None => *dst = Some(src.to_vec()),
        }
    }

    fn accumulate_indexed(
        dst: &mut Option<Vec<f64>>,
        len: usize,
        f: impl Fn(&mut Vec<f64>),
    ) {
        if dst.is_none() {
            *dst = Some(vec![0.0; len]);
        }
        f(dst.as_mut().unwrap());
    }

    fn backprop_node(
        &self,
        i: usize,
        g: &[f64],
        node_grads: &mut Vec<Option<Vec<f64>>>,
        param_grads: &mut ParamGrads,
    ) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                cols,
                cin,
                hin,
                win,
            } => {
                let w = self.params.get(*weight);
                let (cout, k) = (w.shape[0], w.shape[2]);
                let ckk = cin * k * k;
                let s = node.shape;
                let n = s.h * s.w;
                // dW = g (cout x n) * cols^T (n x ckk)
                let mut dw = vec![0.0; cout * ckk];
                matmul_a_bt(g, cols, &mut dw, cout, n, ckk);
                for (a, b) in param_grads.grads[weight.0].iter_mut().zip(&dw) {
                    *a += b;
                }
                if let Some(bid) = bias {
                    for c in 0..cout {
                        param_grads.grads[bid.0][c] += g[c * n..(c + 1) * n].iter().sum::<f64>();
                    }
                }
                // dcols = W^T (ckk x cout) * g (cout x n)
                let mut dcols = vec![0.0; ckk * n];
                matmul_at_b(&w.data, g, &mut dcols, cout, ckk, n);
                let dx = col2im(&dcols, *cin, *hin, *win, k, *stride, *pad, s.h, s.w);
                Self::accumulate(&mut node_grads[input.0], &dx);
            }
            Op::Linear { input, weight, bias } => {
                let x = &self.nodes[input.0].data;
                let w = self.params.get(*weight);
                let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
                {
                    let dw = &mut param_grads.grads[weight.0];
                    for o in 0..out_dim {
                        let go = g[o];
                        if go == 0.0 {
                            continue;
                        }
                        let row = &mut dw[o * in_dim..(o + 1) * in_dim];
                        for (dwi, xi) in row.iter_mut().zip(x) {
                            *dwi += go * xi;
                        }
                    }
                }
                if let Some(bid) = bias {
                    for (db, go) in param_grads.grads[bid.0].iter_mut().zip(g) {
                        *db += go;
                    }
                }
                let mut dx = vec![0.0; in_dim];
                for o in 0..out_dim {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    let row = &w.data[o * in_dim..(o + 1) * in_dim];
                    for (dxi, wv) in dx.iter_mut().zip(row) {
                        *dxi += go * wv;
                    }
                }
                Self::accumulate(&mut node_grads[input.0], &dx);
            }
            Op::Upsample2x { input } => {
                let s = self.shape(*input);
                let (c, h, w) = (s.c, s.h, s.w);
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let base = ci * 4 * h * w;
                            let (yy, xx) = (2 * y, 2 * x);
                            dx[(ci * h + y) * w + x] = g[base + yy * 2 * w + xx]
                                + g[base + yy * 2 * w + xx + 1]
                                + g[base + (yy + 1) * 2 * w + xx]
                                + g[base + (yy + 1) * 2 * w + xx + 1];
                        }
                    }
                }
                Self::accumulate(&mut node_grads[input.0], &dx);
            }
            Op::GlobalMeanPool { input } => {
                let s = self.shape(*input);
                let hw = s.h * s.w;
                let inv = 1.0 / hw as f64;
                let mut dx = vec![0.0; s.len()];
                for c in 0..s.c {
                    let gc = g[c] * inv;
                    for v in dx[c * hw..(c + 1) * hw].iter_mut() {
                        *v = gc;
                    }
                }
                Self::accumulate(&mut node_grads[input.0], &dx);
            }
            Op::Silu { input } => {
                let x = &self.nodes[input.0].data;
                let dx: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| {
                        let sig = 1.0 / (1.0 + (-xv).exp());
                        gv * sig * (1.0 + xv * (1.0 - sig))
                    })
                    .collect();
                Self::accumulate(&mut node_grads[input.0], &dx);
            }
            Op::Sigmoid { input } => {
                let y = &node.data;
                let dx: Vec<f64> = y.iter().zip(g).map(|(&yv, &gv)| gv * yv * (1.0 - yv)).collect();
                Self::accumulate(&mut node_grads[input.0], &dx);
            }
            Op::Exp { input } => {
                let y = &node.data;
                let dx: Vec<f64> = y.iter().zip(g).map(|(&yv, &gv)| gv * yv).collect();
                Self::accumulate(&mut node_grads[input.0], &dx);
            }
            Op::Clamp { input, lo, hi } => {
                let x = &self.nodes[input.0].data;
                let dx: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > *lo && xv < *hi { gv } else { 0.0 })
                    .collect();
                Self::accumulate(&mut node_grads[input.0], &dx);
            }
            Op::LeakyClamp { input, lo, hi, slope } => {
                let x = &self.nodes[input.0].data;
                let dx: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > *lo && xv < *hi { gv } else { gv * slope })
                    .collect();
                Self::accumulate(&mut node_grads[input.0], &dx);
            }
            Op::ScaleShift { input, a } => {
                let dx: Vec<f64> = g.iter().map(|&gv| gv * a).collect();
                Self::accumulate(&mut node_grads[input.0], &dx);
            }
            Op::Add { a, b } => {
                Self::accumulate(&mut node_grads[a.0], g);
                Self::accumulate(&mut node_grads[b.0], g);
            }
            Op::Sub { a, b } => {
                Self::accumulate(&mut node_grads[a.0], g);
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                Self::accumulate(&mut node_grads[b.0], &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<f64> = self.nodes[b.0].data.iter().zip(g).map(|(&bv, &gv)| bv * gv).collect();
                let db: Vec<f64> = self.nodes[a.0].data.iter().zip(g).map(|(&av, &gv)| av * gv).collect();
                Self::accumulate(&mut node_grads[a.0], &da);
                Self::accumulate(&mut node_grads[b.0], &db);
            }
            Op::AddChannelBias { input, bias } => {
                Self::accumulate(&mut node_grads[input.0], g);
                let s = node.shape;
                let hw = s.h * s.w;
                let db: Vec<f64> = (0..s.c).map(|c| g[c * hw..(c + 1) * hw].iter().sum()).collect();
                Self::accumulate(&mut node_grads[bias.0], &db);
            }
            Op::ConcatChannels { a, b } => {
                let la = self.shape(*a).len();
                Self::accumulate(&mut node_grads[a.0], &g[..la]);
                Self::accumulate(&mut node_grads[b.0], &g[la..]);
            }
            Op::Reshape { input } => {
                Self::accumulate(&mut node_grads[input.0], g);
            }
            Op::CodebookLookup { codebook, indices } => {
                let n_z = self.params.get(*codebook).shape[1];
                let cells = indices.len();
                let dcb = &mut param_grads.grads[codebook.0];
                for (cell, &idx) in indices.iter().enumerate() {
                    for z in 0..n_z {
                        dcb[idx * n_z + z] += g[z * cells + cell];
                    }
                }
            }
            Op::MseLoss { a, b } => {
                let n = self.shape(*a).len() as f64;
                let scale = 2.0 * g[0] / n;
                let xa = &self.nodes[a.0].data;
                let xb = &self.nodes[b.0].data;
                let da: Vec<f64> = xa.iter().zip(xb).map(|(&x, &y)| scale * (x - y)).collect();
                let db: Vec<f64> = da.iter().map(|&v| -v).collect();
                Self::accumulate(&mut node_grads[a.0], &da);
                Self::accumulate(&mut node_grads[b.0], &db);
            }
            Op::L1Loss { a, b } => {
                let n = self.shape(*a).len() as f64;
                let scale = g[0] / n;
                let xa = &self.nodes[a.0].data;
                let xb = &self.nodes[b.0].data;
                let da: Vec<f64> = xa
                    .iter()
                    .zip(xb)
                    .map(|(&x, &y)| scale * (x - y).signum())
                    .collect();
                let db: Vec<f64> = da.iter().map(|&v| -v).collect();
                Self::accumulate(&mut node_grads[a.0], &da);
                Self::accumulate(&mut node_grads[b.0], &db);
            }
            Op::KlStdNormal { mu, logvar } => {
                let gm: Vec<f64> = self.nodes[mu.0].data.iter().map(|&m| g[0] * m).collect();
                let gl: Vec<f64> = self.nodes[logvar.0]
                    .data
                    .iter()
                    .map(|&lv| g[0] * 0.5 * (lv.exp() - 1.0))
                    .collect();
                Self::accumulate(&mut node_grads[mu.0], &gm);
                Self::accumulate(&mut node_grads[logvar.0], &gl);
            }
            Op::CosSim { a, b } => {
                let (s, na, nb) = self.cos_parts(*a, *b);
                let denom = na * nb + COS_EPS;
                let xa = &self.nodes[a.0].data;
                let xb = &self.nodes[b.0].data;
                let ga: Vec<f64> = xa
                    .iter()
                    .zip(xb)
                    .map(|(&av, &bv)| {
                        let norm_term = if na > 1e-12 { s * nb * av / na } else { 0.0 };
                        g[0] * (bv / denom - norm_term / (denom * denom))
                    })
                    .collect();
                let gb: Vec<f64> = xa
                    .iter()
                    .zip(xb)
                    .map(|(&av, &bv)| {
                        let norm_term = if nb > 1e-12 { s * na * bv / nb } else { 0.0 };
                        g[0] * (av / denom - norm_term / (denom * denom))
                    })
                    .collect();
                Self::accumulate(&mut node_grads[a.0], &ga);
                Self::accumulate(&mut node_grads[b.0], &gb);
            }
            Op::LogSoftmax { input } => {
                let y = &node.data; // log-probs
                let gsum: f64 = g.iter().sum();
                let dx: Vec<f64> = y.iter().zip(g).map(|(&lv, &gv)| gv - lv.exp() * gsum).collect();
                Self::accumulate(&mut node_grads[input.0], &dx);
            }
            Op::Pick { input, index } => {
                let len = self.shape(*input).len();
                let idx = *index;
                let gv = g[0];
                Self::accumulate_indexed(&mut node_grads[input.0], len, |d| d[idx] += gv);
            }
        }
    }
}

const COS_EPS: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    /// Central finite differences on a scalar-valued builder.
    fn fd_param_grad(
        store: &mut ParamStore,
        pid: ParamId,
        idx: usize,
        h: f64,
        f: &dyn Fn(&ParamStore) -> f64,
    ) -> f64 {
        let orig = store.get(pid).data[idx];
        store.get_mut(pid).data[idx] = orig + h;
        let fp = f(store);
        store.get_mut(pid).data[idx] = orig - h;
        let fm = f(store);
        store.get_mut(pid).data[idx] = orig;
        (fp - fm) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn conv_silu_mse_grad_matches_fd() {
        let mut rng = Rng::seed_from(11);
        let mut store = ParamStore::new();
        let w = store.add_randn("w", &[3, 2, 3, 3], 18, &mut rng);
        let b = store.add_randn("b", &[3], 3, &mut rng);
        let x: Vec<f64> = (0..2 * 6 * 5).map(|_| rng.normal()).collect();
        let target: Vec<f64> = (0..3 * 3 * 3).map(|_| rng.normal()).collect();

        let loss_of = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let xin = g.leaf(Shape::new(2, 6, 5), x.clone());
            let t = g.leaf(Shape::new(3, 3, 3), target.clone());
            let conv = g.conv2d(xin, w, Some(b), 2, 1);
            let act = g.silu(conv);
            let loss = g.mse_loss(act, t);
            g.scalar_value(loss)
        };

        let mut g = Graph::new(&store);
        let xin = g.leaf(Shape::new(2, 6, 5), x.clone());
        let t = g.leaf(Shape::new(3, 3, 3), target.clone());
        let conv = g.conv2d(xin, w, Some(b), 2, 1);
        let act = g.silu(conv);
        let loss = g.mse_loss(act, t);
        let back = g.backward(loss);

        for (pid, n_check) in [(w, 12), (b, 3)] {
            let len = store.get(pid).data.len();
            for i in 0..n_check {
                let idx = (i * 7) % len;
                let analytic = back.param_grads.get(pid)[idx];
                let fd = fd_param_grad(&mut store, pid, idx, 1e-6, &loss_of);
                assert!(
                    rel_err(analytic, fd) <= 1e-5 || (analytic.abs() < 1e-10 && fd.abs() < 1e-7),
                    "param {pid:?}[{idx}]: analytic {analytic} vs fd {fd}"
                );
            }
        }

        // Input gradient too.
        let analytic_x = back.node_grad(xin).unwrap().to_vec();
        for idx in [0usize, 13, 29, 57] {
            let mut x2 = x.clone();
            let h = 1e-6;
            x2[idx] += h;
            let fp = {
                let mut g = Graph::new(&store);
                let xin = g.leaf(Shape::new(2, 6, 5), x2.clone());
                let t = g.leaf(Shape::new(3, 3, 3), target.clone());
                let conv = g.conv2d(xin, w, Some(b), 2, 1);
                let act = g.silu(conv);
                let loss = g.mse_loss(act, t);
                g.scalar_value(loss)
            };
            x2[idx] -= 2.0 * h;
            let fm = {
                let mut g = Graph::new(&store);
                let xin = g.leaf(Shape::new(2, 6, 5), x2.clone());
                let t = g.leaf(Shape::new(3, 3, 3), target.clone());
                let conv = g.conv2d(xin, w, Some(b), 2, 1);
                let act = g.silu(conv);
                let loss = g.mse_loss(act, t);
                g.scalar_value(loss)
            };
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                rel_err(analytic_x[idx], fd) <= 1e-5,
                "input[{idx}]: {} vs {fd}",
                analytic_x[idx]
            );
        }
    }

    #[test]
    fn composite_ops_grad_matches_fd() {
        // linear -> logsoftmax -> pick, plus upsample/concat/sigmoid branches.
        let mut rng = Rng::seed_from(13);
        let mut store = ParamStore::new();
        let w1 = store.add_randn("w1", &[4, 8], 8, &mut rng);
        let b1 = store.add_randn("b1", &[4], 4, &mut rng);
        let x: Vec<f64> = (0..2 * 2 * 2).map(|_| rng.normal()).collect();

        let loss_of = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let xin = g.leaf(Shape::new(2, 2, 2), x.clone());
            let up = g.upsample2x(xin);
            let pool = g.global_mean_pool(up);
            let sig = g.sigmoid(xin);
            let sig_pool = g.global_mean_pool(sig);
            let cat = g.concat_channels(sig_pool, pool);
            let flat = g.reshape(cat, Shape::vec(4));
            let two = g.concat_channels(flat, flat);
            let lin = g.linear(two, w1, Some(b1));
            let ls = g.log_softmax(lin);
            let picked = g.pick(ls, 2);
            let scaled = g.scale_shift(picked, -1.0, 0.1);
            g.scalar_value(scaled)
        };

        let analytic = {
            let mut g = Graph::new(&store);
            let xin = g.leaf(Shape::new(2, 2, 2), x.clone());
            let up = g.upsample2x(xin);
            let pool = g.global_mean_pool(up);
            let sig = g.sigmoid(xin);
            let sig_pool = g.global_mean_pool(sig);
            let cat = g.concat_channels(sig_pool, pool);
            let flat = g.reshape(cat, Shape::vec(4));
            let two = g.concat_channels(flat, flat);
            let lin = g.linear(two, w1, Some(b1));
            let ls = g.log_softmax(lin);
            let picked = g.pick(ls, 2);
            let scaled = g.scale_shift(picked, -1.0, 0.1);
            let back = g.backward(scaled);
            back.param_grads
        };

        for pid in [w1, b1] {
            let len = store.get(pid).data.len();
            for idx in 0..len {
                let fd = fd_param_grad(&mut store, pid, idx, 1e-6, &loss_of);
                let an = analytic.get(pid)[idx];
                assert!(
                    rel_err(an, fd) <= 1e-6 || (an.abs() < 1e-10 && fd.abs() < 1e-7),
                    "{pid:?}[{idx}]: {an} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn kl_cos_exp_clamp_grads_match_fd() {
        let mut rng = Rng::seed_from(17);
        let mut store = ParamStore::new();
        let mu = store.add_randn("mu", &[5], 5, &mut rng);
        let lv = store.add_randn("lv", &[5], 5, &mut rng);
        let other: Vec<f64> = (0..5).map(|_| rng.normal()).collect();

        let loss_of = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let m = g.leaf(Shape::vec(5), store.get(mu).data.clone());
            let l = g.leaf(Shape::vec(5), store.get(lv).data.clone());
            let o = g.leaf(Shape::vec(5), other.clone());
            let kl = g.kl_std_normal(m, l);
            let cs = g.cos_sim(m, o);
            let one_minus = g.scale_shift(cs, -1.0, 1.0);
            let lc = g.clamp(kl, f64::NEG_INFINITY, 20.0);
            let e = g.exp(lc);
            let el = g.scale(e, 0.01);
            let s1 = g.add(one_minus, el);
            g.scalar_value(s1)
        };

        // Here mu/lv enter as leaves, so check leaf gradients.
        let mut g = Graph::new(&store);
        let m = g.leaf(Shape::vec(5), store.get(mu).data.clone());
        let l = g.leaf(Shape::vec(5), store.get(lv).data.clone());
        let o = g.leaf(Shape::vec(5), other.clone());
        let kl = g.kl_std_normal(m, l);
        let cs = g.cos_sim(m, o);
        let one_minus = g.scale_shift(cs, -1.0, 1.0);
        let lc = g.clamp(kl, f64::NEG_INFINITY, 20.0);
        let e = g.exp(lc);
        let el = g.scale(e, 0.01);
        let s1 = g.add(one_minus, el);
        let back = g.backward(s1);
        let gm = back.node_grad(m).unwrap().to_vec();
        let gl = back.node_grad(l).unwrap().to_vec();

        for idx in 0..5 {
            for (pid, analytic) in [(mu, gm[idx]), (lv, gl[idx])] {
                let fd = fd_param_grad(&mut store, pid, idx, 1e-6, &loss_of);
                assert!(
                    rel_err(analytic, fd) <= 1e-6,
                    "{pid:?}[{idx}]: {analytic} vs {fd}"
                );
            }
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.leaf(Shape::vec(3), vec![1.0, -2.0, 3.0]);
        let d = g.detach(x);
        let y = g.leaf(Shape::vec(3), vec![0.0, 0.0, 0.0]);
        let loss = g.mse_loss(d, y);
        let back = g.backward(loss);
        assert!(back.node_grad(x).is_none());
        assert!(back.node_grad(d).is_some());
    }

    #[test]
    fn straight_through_pattern() {
        // z_q = z + detach(e - z): gradient w.r.t. z equals gradient w.r.t. z_q.
        let mut store = ParamStore::new();
        let cb = store.add("cb", &[2, 2], vec![0.0, 0.0, 1.0, 1.0]);
        let mut g = Graph::new(&store);
        let z = g.leaf(Shape::new(2, 1, 1), vec![0.3, 0.4]);
        let e = g.codebook_lookup(cb, vec![0], 1, 1);
        let diff = g.sub(e, z);
        let sg = g.detach(diff);
        let zq = g.add(z, sg);
        let target = g.leaf(Shape::new(2, 1, 1), vec![1.0, -1.0]);
        let loss = g.mse_loss(zq, target);
        let back = g.backward(loss);
        let gz = back.node_grad(z).unwrap();
        let gzq = back.node_grad(zq).unwrap();
        assert_eq!(gz, gzq);
    }
}

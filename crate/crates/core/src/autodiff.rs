//! Tape-based reverse-mode automatic differentiation.
//!
//! Values are computed eagerly in f64 (parameters are stored as f32 and
//! lifted on entry), which keeps central-difference gradient checks at
//! eps = 1e-3 comfortably inside a 1e-2 relative tolerance. The op set is
//! exactly what the networks and losses need: elementwise arithmetic, 3x3
//! convolutions, nearest upsampling, channel concat, small matmuls, FiLM
//! modulation, separable Gaussian blur and a few scalar reductions.

use crate::tensor::{reflect, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Film { x: Var, scale: Var, shift: Var },
    Silu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Upsample2x(Var),
    ConcatC(Var, Var),
    MatVec { w: Var, x: Var },
    MatMul { a: Var, b: Var },
    Reshape(Var),
    Blur { x: Var, kernel: Vec<f64> },
    Mse(Var, Var),
    MeanAbsDiff(Var, Var),
    InnerMean(Var, Var),
    SumAll(Var),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    rg: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn conv_out(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, rg: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, shape, value, rg });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor, rg: bool) -> Var {
        let value = t.data().iter().map(|&v| v as f64).collect();
        self.push(Op::Leaf, t.shape().to_vec(), value, rg)
    }

    pub fn leaf_f64(&mut self, shape: &[usize], value: Vec<f64>, rg: bool) -> Var {
        self.push(Op::Leaf, shape.to_vec(), value, rg)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(&n.shape, n.value.iter().map(|&x| x as f32).collect()).unwrap()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].rg || self.nodes[b.0].rg
    }

    // ---- op constructors -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let value = self.binary_map(a, b, |x, y| x + y);
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg2(a, b);
        self.push(Op::Add(a, b), shape, value, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape");
        let value = self.binary_map(a, b, |x, y| x - y);
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg2(a, b);
        self.push(Op::Sub(a, b), shape, value, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let value = self.binary_map(a, b, |x, y| x * y);
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.rg2(a, b);
        self.push(Op::Mul(a, b), shape, value, rg)
    }

    fn binary_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| x * k).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].rg;
        self.push(Op::Scale(a, k), shape, value, rg)
    }

    /// x: [C,H,W], b: [C] — per-channel bias.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (c, hw) = self.chw(x);
        assert_eq!(self.shape(b), &[c], "add_bias channels");
        let mut value = self.nodes[x.0].value.clone();
        for ch in 0..c {
            let bv = self.nodes[b.0].value[ch];
            for v in &mut value[ch * hw..(ch + 1) * hw] {
                *v += bv;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg2(x, b);
        self.push(Op::AddBias(x, b), shape, value, rg)
    }

    /// FiLM modulation: y[c,..] = x[c,..] * (1 + scale[c]) + shift[c].
    pub fn film(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (c, hw) = self.chw(x);
        assert_eq!(self.shape(scale), &[c], "film scale");
        assert_eq!(self.shape(shift), &[c], "film shift");
        let mut value = vec![0.0; c * hw];
        for ch in 0..c {
            let s = 1.0 + self.nodes[scale.0].value[ch];
            let sh = self.nodes[shift.0].value[ch];
            let src = &self.nodes[x.0].value[ch * hw..(ch + 1) * hw];
            for (o, &v) in value[ch * hw..(ch + 1) * hw].iter_mut().zip(src) {
                *o = v * s + sh;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].rg || self.nodes[scale.0].rg || self.nodes[shift.0].rg;
        self.push(Op::Film { x, scale, shift }, shape, value, rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0]
            .value
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].rg;
        self.push(Op::Silu(x), shape, value, rg)
    }

    fn chw(&self, x: Var) -> (usize, usize) {
        let s = self.shape(x);
        assert_eq!(s.len(), 3, "expected C,H,W tensor");
        (s[0], s[1] * s[2])
    }

    /// 2-D convolution: x [Ci,H,W], w [Co,Ci,K,K], optional bias [Co].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[0], ws[1], "conv2d in-channels");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let (ci, h, wd) = (xs[0], xs[1], xs[2]);
        let (co, k) = (ws[0], ws[2]);
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let mut value = vec![0.0; co * ho * wo];

        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            conv2d_fwd(xv, wv, &mut value, ci, h, wd, co, k, stride, pad, ho, wo);
            if let Some(bv) = b {
                let bval = &self.nodes[bv.0].value;
                for o in 0..co {
                    let bo = bval[o];
                    for v in &mut value[o * ho * wo..(o + 1) * ho * wo] {
                        *v += bo;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].rg
            || self.nodes[w.0].rg
            || b.map(|bv| self.nodes[bv.0].rg).unwrap_or(false);
        self.push(Op::Conv2d { x, w, b, stride, pad }, vec![co, ho, wo], value, rg)
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut value = vec![0.0; c * oh * ow];
        let xv = &self.nodes[x.0].value;
        for ch in 0..c {
            for y in 0..h {
                let src = &xv[(ch * h + y) * w..(ch * h + y) * w + w];
                for dy in 0..2 {
                    let ob = (ch * oh + 2 * y + dy) * ow;
                    for (j, &v) in src.iter().enumerate() {
                        value[ob + 2 * j] = v;
                        value[ob + 2 * j + 1] = v;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].rg;
        self.push(Op::Upsample2x(x), vec![c, oh, ow], value, rg)
    }

    /// Concatenate along the channel axis.
    pub fn concat_c(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(&sa[1..], &sb[1..], "concat spatial dims");
        let mut value = self.nodes[a.0].value.clone();
        value.extend_from_slice(&self.nodes[b.0].value);
        let rg = self.rg2(a, b);
        self.push(Op::ConcatC(a, b), vec![sa[0] + sb[0], sa[1], sa[2]], value, rg)
    }

    /// w [m,n] * x [n] -> [m].
    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2);
        assert_eq!(self.shape(x), &[ws[1]], "matvec dims");
        let (m, n) = (ws[0], ws[1]);
        let wv = &self.nodes[w.0].value;
        let xv = &self.nodes[x.0].value;
        let value: Vec<f64> = (0..m)
            .map(|i| {
                let row = &wv[i * n..(i + 1) * n];
                row.iter().zip(xv).map(|(&a, &b)| a * b).sum()
            })
            .collect();
        let rg = self.rg2(w, x);
        self.push(Op::MatVec { w, x }, vec![m], value, rg)
    }

    /// a [m,k] * b [k,n] -> [m,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 2);
        assert_eq!(sb.len(), 2);
        assert_eq!(sa[1], sb[0], "matmul dims");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let alv = av[i * k + l];
                let brow = &bv[l * n..(l + 1) * n];
                for (o, &bvv) in value[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += alv * bvv;
                }
            }
        }
        let rg = self.rg2(a, b);
        self.push(Op::MatMul { a, b }, vec![m, n], value, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[x.0].value.len(),
            "reshape numel"
        );
        let value = self.nodes[x.0].value.clone();
        let rg = self.nodes[x.0].rg;
        self.push(Op::Reshape(x), shape.to_vec(), value, rg)
    }

    /// Separable blur with reflect padding; kernel must be normalized.
    pub fn blur(&mut self, x: Var, kernel: &[f64]) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let value = blur_sep(&self.nodes[x.0].value, kernel, c, h, w, false);
        let rg = self.nodes[x.0].rg;
        self.push(
            Op::Blur { x, kernel: kernel.to_vec() },
            s,
            value,
            rg,
        )
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shape");
        let n = self.nodes[a.0].value.len() as f64;
        let v: f64 = self
            .nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.rg2(a, b);
        self.push(Op::Mse(a, b), vec![1], vec![v / n], rg)
    }

    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mad shape");
        let n = self.nodes[a.0].value.len() as f64;
        let v: f64 = self
            .nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let rg = self.rg2(a, b);
        self.push(Op::MeanAbsDiff(a, b), vec![1], vec![v / n], rg)
    }

    /// Mean of the elementwise product: sum(a*b)/numel. With `b` a frozen
    /// residual this is the stop-gradient surrogate whose gradient w.r.t.
    /// `a` is exactly b/numel.
    pub fn inner_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "inner_mean shape");
        let n = self.nodes[a.0].value.len() as f64;
        let v: f64 = self
            .nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| x * y)
            .sum();
        let rg = self.rg2(a, b);
        self.push(Op::InnerMean(a, b), vec![1], vec![v / n], rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v: f64 = self.nodes[a.0].value.iter().sum();
        let rg = self.nodes[a.0].rg;
        self.push(Op::SumAll(a), vec![1], vec![v], rg)
    }

    // ---- backward --------------------------------------------------------

    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "loss must be scalar");
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[loss.0].rg {
            return;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].rg {
                continue;
            }
            let gout = self.grads[id].take().unwrap();
            self.apply_backward(id, &gout);
            self.grads[id] = Some(gout);
        }
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f64> {
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.len()]);
        }
        self.grads[v.0].as_mut().unwrap()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].rg
    }

    fn apply_backward(&mut self, id: usize, gout: &[f64]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(a) {
                    accumulate(self.grad_buf(a), gout, 1.0);
                }
                if self.rg(b) {
                    accumulate(self.grad_buf(b), gout, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(a) {
                    accumulate(self.grad_buf(a), gout, 1.0);
                }
                if self.rg(b) {
                    accumulate(self.grad_buf(b), gout, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let bv = self.nodes[b.0].value.clone();
                    let ga = self.grad_buf(a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * bv[i];
                    }
                }
                if self.rg(b) {
                    let av = self.nodes[a.0].value.clone();
                    let gb = self.grad_buf(b);
                    for i in 0..gout.len() {
                        gb[i] += gout[i] * av[i];
                    }
                }
            }
            Op::Scale(a, k) => {
                if self.rg(a) {
                    accumulate(self.grad_buf(a), gout, k);
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(x) {
                    accumulate(self.grad_buf(x), gout, 1.0);
                }
                if self.rg(b) {
                    let (c, hw) = self.chw(x);
                    let gb = self.grad_buf(b);
                    for ch in 0..c {
                        gb[ch] += gout[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            Op::Film { x, scale, shift } => {
                let (c, hw) = self.chw(x);
                if self.rg(x) {
                    let sv = self.nodes[scale.0].value.clone();
                    let gx = self.grad_buf(x);
                    for ch in 0..c {
                        let s = 1.0 + sv[ch];
                        for (g, &go) in gx[ch * hw..(ch + 1) * hw]
                            .iter_mut()
                            .zip(&gout[ch * hw..(ch + 1) * hw])
                        {
                            *g += go * s;
                        }
                    }
                }
                if self.rg(scale) {
                    let xv = self.nodes[x.0].value.clone();
                    let gs = self.grad_buf(scale);
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for (xi, &go) in xv[ch * hw..(ch + 1) * hw].iter().zip(&gout[ch * hw..(ch + 1) * hw]) {
                            acc += go * xi;
                        }
                        gs[ch] += acc;
                    }
                }
                if self.rg(shift) {
                    let gsh = self.grad_buf(shift);
                    for ch in 0..c {
                        gsh[ch] += gout[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                }
            }
            Op::Silu(x) => {
                if self.rg(x) {
                    let xv = self.nodes[x.0].value.clone();
                    let gx = self.grad_buf(x);
                    for i in 0..gout.len() {
                        let s = sigmoid(xv[i]);
                        gx[i] += gout[i] * s * (1.0 + xv[i] * (1.0 - s));
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs = self.shape(x).to_vec();
                let ws = self.shape(w).to_vec();
                let os = self.nodes[id].shape.clone();
                let (ci, h, wd) = (xs[0], xs[1], xs[2]);
                let (co, k) = (ws[0], ws[2]);
                let (ho, wo) = (os[1], os[2]);
                if self.rg(x) {
                    let wv = self.nodes[w.0].value.clone();
                    let gx = self.grad_buf(x);
                    conv2d_bwd_x(gx, &wv, gout, ci, h, wd, co, k, stride, pad, ho, wo);
                }
                if self.rg(w) {
                    let xv = self.nodes[x.0].value.clone();
                    let gw = self.grad_buf(w);
                    conv2d_bwd_w(&xv, gw, gout, ci, h, wd, co, k, stride, pad, ho, wo);
                }
                if let Some(bv) = b {
                    if self.rg(bv) {
                        let gb = self.grad_buf(bv);
                        for o in 0..co {
                            gb[o] += gout[o * ho * wo..(o + 1) * ho * wo].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Upsample2x(x) => {
                if self.rg(x) {
                    let s = self.shape(x).to_vec();
                    let (c, h, w) = (s[0], s[1], s[2]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let gx = self.grad_buf(x);
                    for ch in 0..c {
                        for y in 0..h {
                            for j in 0..w {
                                let mut acc = 0.0;
                                for dy in 0..2 {
                                    let ob = (ch * oh + 2 * y + dy) * ow + 2 * j;
                                    acc += gout[ob] + gout[ob + 1];
                                }
                                gx[(ch * h + y) * w + j] += acc;
                            }
                        }
                    }
                }
            }
            Op::ConcatC(a, b) => {
                let na = self.nodes[a.0].value.len();
                if self.rg(a) {
                    accumulate(self.grad_buf(a), &gout[..na], 1.0);
                }
                if self.rg(b) {
                    accumulate(self.grad_buf(b), &gout[na..], 1.0);
                }
            }
            Op::MatVec { w, x } => {
                let ws = self.shape(w).to_vec();
                let (m, n) = (ws[0], ws[1]);
                if self.rg(w) {
                    let xv = self.nodes[x.0].value.clone();
                    let gw = self.grad_buf(w);
                    for i in 0..m {
                        let gi = gout[i];
                        for (g, &xj) in gw[i * n..(i + 1) * n].iter_mut().zip(&xv) {
                            *g += gi * xj;
                        }
                    }
                }
                if self.rg(x) {
                    let wv = self.nodes[w.0].value.clone();
                    let gx = self.grad_buf(x);
                    for i in 0..m {
                        let gi = gout[i];
                        for (g, &wij) in gx.iter_mut().zip(&wv[i * n..(i + 1) * n]) {
                            *g += gi * wij;
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(a) {
                    let bv = self.nodes[b.0].value.clone();
                    let ga = self.grad_buf(a);
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += gout[i * n + j] * bv[l * n + j];
                            }
                            ga[i * k + l] += acc;
                        }
                    }
                }
                if self.rg(b) {
                    let av = self.nodes[a.0].value.clone();
                    let gb = self.grad_buf(b);
                    for i in 0..m {
                        for l in 0..k {
                            let ail = av[i * k + l];
                            for j in 0..n {
                                gb[l * n + j] += ail * gout[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.rg(x) {
                    accumulate(self.grad_buf(x), gout, 1.0);
                }
            }
            Op::Blur { x, kernel } => {
                if self.rg(x) {
                    let s = self.shape(x).to_vec();
                    let gin = blur_sep(gout, &kernel, s[0], s[1], s[2], true);
                    accumulate(self.grad_buf(x), &gin, 1.0);
                }
            }
            Op::Mse(a, b) => {
                let g = gout[0];
                let n = self.nodes[a.0].value.len() as f64;
                let diff: Vec<f64> = self
                    .nodes[a.0]
                    .value
                    .iter()
                    .zip(&self.nodes[b.0].value)
                    .map(|(&x, &y)| x - y)
                    .collect();
                if self.rg(a) {
                    let ga = self.grad_buf(a);
                    for i in 0..diff.len() {
                        ga[i] += g * 2.0 * diff[i] / n;
                    }
                }
                if self.rg(b) {
                    let gb = self.grad_buf(b);
                    for i in 0..diff.len() {
                        gb[i] -= g * 2.0 * diff[i] / n;
                    }
                }
            }
            Op::MeanAbsDiff(a, b) => {
                let g = gout[0];
                let n = self.nodes[a.0].value.len() as f64;
                let sgn: Vec<f64> = self
                    .nodes[a.0]
                    .value
                    .iter()
                    .zip(&self.nodes[b.0].value)
                    .map(|(&x, &y)| {
                        if x > y {
                            1.0
                        } else if x < y {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.rg(a) {
                    let ga = self.grad_buf(a);
                    for i in 0..sgn.len() {
                        ga[i] += g * sgn[i] / n;
                    }
                }
                if self.rg(b) {
                    let gb = self.grad_buf(b);
                    for i in 0..sgn.len() {
                        gb[i] -= g * sgn[i] / n;
                    }
                }
            }
            Op::InnerMean(a, b) => {
                let g = gout[0];
                let n = self.nodes[a.0].value.len() as f64;
                if self.rg(a) {
                    let bv = self.nodes[b.0].value.clone();
                    let ga = self.grad_buf(a);
                    for i in 0..bv.len() {
                        ga[i] += g * bv[i] / n;
                    }
                }
                if self.rg(b) {
                    let av = self.nodes[a.0].value.clone();
                    let gb = self.grad_buf(b);
                    for i in 0..av.len() {
                        gb[i] += g * av[i] / n;
                    }
                }
            }
            Op::SumAll(a) => {
                if self.rg(a) {
                    let ga = self.grad_buf(a);
                    for v in ga.iter_mut() {
                        *v += gout[0];
                    }
                }
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s * k;
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    // exp_det is a cheap deterministic polynomial; the libm exp dominates
    // activation cost at image resolution otherwise.
    1.0 / (1.0 + crate::rng::exp_det(-v))
}

#[inline]
fn saxpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Dot product with four independent accumulators (ILP/SIMD friendly).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n4 = a.len() / 4 * 4;
    let mut acc = [0.0f64; 4];
    let mut i = 0;
    while i < n4 {
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
        i += 4;
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in n4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// Gather conv patches into a [Ci*K*K, Ho*Wo] matrix (zero padding).
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let padi = pad as i64;
    let howo = ho * wo;
    let mut cols = vec![0.0f64; ci * k * k * howo];
    let mut row = 0usize;
    for c in 0..ci {
        let xbase = c * h * w;
        for p in 0..k {
            let (ilo, ihi) = valid_range(p as i64 - padi, stride, h, ho);
            for q in 0..k {
                let offq = q as i64 - padi;
                let (jlo, jhi) = valid_range(offq, stride, w, wo);
                let dst_base = row * howo;
                if jlo < jhi {
                    for i in ilo..ihi {
                        let ii = (i * stride) as i64 + p as i64 - padi;
                        let xrow = xbase + ii as usize * w;
                        let dst = dst_base + i * wo;
                        if stride == 1 {
                            let s0 = (xrow as i64 + offq + jlo as i64) as usize;
                            cols[dst + jlo..dst + jhi]
                                .copy_from_slice(&x[s0..s0 + (jhi - jlo)]);
                        } else {
                            for j in jlo..jhi {
                                let jj = (j * stride) as i64 + offq;
                                cols[dst + j] = x[xrow + jj as usize];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back to the input.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    gx: &mut [f64],
    dcols: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let padi = pad as i64;
    let howo = ho * wo;
    let mut row = 0usize;
    for c in 0..ci {
        let xbase = c * h * w;
        for p in 0..k {
            let (ilo, ihi) = valid_range(p as i64 - padi, stride, h, ho);
            for q in 0..k {
                let offq = q as i64 - padi;
                let (jlo, jhi) = valid_range(offq, stride, w, wo);
                let src_base = row * howo;
                if jlo < jhi {
                    for i in ilo..ihi {
                        let ii = (i * stride) as i64 + p as i64 - padi;
                        let xrow = xbase + ii as usize * w;
                        let src = src_base + i * wo;
                        if stride == 1 {
                            let s0 = (xrow as i64 + offq + jlo as i64) as usize;
                            let dst = &mut gx[s0..s0 + (jhi - jlo)];
                            let add = &dcols[src + jlo..src + jhi];
                            for (d, &v) in dst.iter_mut().zip(add) {
                                *d += v;
                            }
                        } else {
                            for j in jlo..jhi {
                                let jj = (j * stride) as i64 + offq;
                                gx[xrow + jj as usize] += dcols[src + j];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_fwd(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let cols = im2col(x, ci, h, wd, k, stride, pad, ho, wo);
    let rows = ci * k * k;
    let howo = ho * wo;
    for o in 0..co {
        let orow = &mut out[o * howo..(o + 1) * howo];
        let wrow = &w[o * rows..(o + 1) * rows];
        for (r, &wv) in wrow.iter().enumerate() {
            if wv != 0.0 {
                saxpy(orow, &cols[r * howo..(r + 1) * howo], wv);
            }
        }
    }
}

/// Output index range [lo, hi) such that idx*stride + off lands in [0, n).
fn valid_range(off: i64, stride: usize, n: usize, out_n: usize) -> (usize, usize) {
    let s = stride as i64;
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    let hi_raw = (n as i64 - 1 - off).div_euclid(s) + 1;
    let lo = lo.max(0) as usize;
    let hi = hi_raw.clamp(0, out_n as i64) as usize;
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd_x(
    gx: &mut [f64],
    w: &[f64],
    gout: &[f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    // dcols = W^T @ dY, then scatter back to input positions
    let rows = ci * k * k;
    let howo = ho * wo;
    let mut dcols = vec![0.0f64; rows * howo];
    for o in 0..co {
        let dyrow = &gout[o * howo..(o + 1) * howo];
        let wrow = &w[o * rows..(o + 1) * rows];
        for (r, &wv) in wrow.iter().enumerate() {
            if wv != 0.0 {
                saxpy(&mut dcols[r * howo..(r + 1) * howo], dyrow, wv);
            }
        }
    }
    col2im_add(gx, &dcols, ci, h, wd, k, stride, pad, ho, wo);
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd_w(
    x: &[f64],
    gw: &mut [f64],
    gout: &[f64],
    ci: usize,
    h: usize,
    wd: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    // dW = dY @ cols^T
    let cols = im2col(x, ci, h, wd, k, stride, pad, ho, wo);
    let rows = ci * k * k;
    let howo = ho * wo;
    for o in 0..co {
        let dyrow = &gout[o * howo..(o + 1) * howo];
        let gwrow = &mut gw[o * rows..(o + 1) * rows];
        for (r, slot) in gwrow.iter_mut().enumerate() {
            *slot += dot(dyrow, &cols[r * howo..(r + 1) * howo]);
        }
    }
}

/// Separable reflect-padded convolution. `adjoint = true` computes the
/// transpose (scatter instead of gather), used by the backward pass.
fn blur_sep(x: &[f64], kernel: &[f64], c: usize, h: usize, w: usize, adjoint: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; c * h * w];
    let mut out = vec![0.0; c * h * w];
    if !adjoint {
        for ch in 0..c {
            for y in 0..h {
                let base = (ch * h + y) * w;
                for xx in 0..w as i64 {
                    let mut acc = 0.0;
                    for (j, &kv) in kernel.iter().enumerate() {
                        acc += kv * x[base + reflect(xx + j as i64 - r, w as i64)];
                    }
                    tmp[base + xx as usize] = acc;
                }
            }
        }
        for ch in 0..c {
            for y in 0..h as i64 {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for (j, &kv) in kernel.iter().enumerate() {
                        acc += kv * tmp[(ch * h + reflect(y + j as i64 - r, h as i64)) * w + xx];
                    }
                    out[(ch * h + y as usize) * w + xx] = acc;
                }
            }
        }
    } else {
        // Adjoint of (vertical ∘ horizontal): horizontal^T ∘ vertical^T.
        for ch in 0..c {
            for y in 0..h as i64 {
                for xx in 0..w {
                    let g = x[(ch * h + y as usize) * w + xx];
                    for (j, &kv) in kernel.iter().enumerate() {
                        tmp[(ch * h + reflect(y + j as i64 - r, h as i64)) * w + xx] += kv * g;
                    }
                }
            }
        }
        for ch in 0..c {
            for y in 0..h {
                let base = (ch * h + y) * w;
                for xx in 0..w as i64 {
                    let g = tmp[base + xx as usize];
                    for (j, &kv) in kernel.iter().enumerate() {
                        out[base + reflect(xx + j as i64 - r, w as i64)] += kv * g;
                    }
                }
            }
        }
    }
    out
}

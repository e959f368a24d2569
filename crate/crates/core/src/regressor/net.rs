//! Residual convolutional network in single precision with hand-written
//! backpropagation. Convolutions are 3x3 with unit padding, lowered to
//! matrix products through im2col.
//!
//! Layout: a strided stem convolution, then stages of (optional strided
//! transition convolution, residual blocks), then concatenated global
//! average and max pooling, a hidden dense layer and a 7-way dense output
//! followed by a logistic. Residual blocks carry no normalization layers;
//! instead the second convolution of every block starts at zero and the
//! first is scaled down with the block count, so the untrained stack is an
//! identity map and signal scale stays stable with depth.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub const OUTPUTS: usize = 7;
const KERNEL: usize = 9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub width: usize,
    pub blocks: usize,
    /// Stride of the transition convolution; 1 with an unchanged width
    /// means the stage has no transition.
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: String,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub stem_width: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageSpec>,
    pub hidden: usize,
}

impl Architecture {
    /// Compact 18-layer stack sized for single-core training: four stages of
    /// two blocks each at 8, 16, 32 and 64 channels.
    pub fn desk() -> Self {
        Self {
            name: "residual-desk".into(),
            input_channels: 3,
            input_height: crate::spherical::MAP_HEIGHT,
            input_width: crate::spherical::MAP_WIDTH,
            stem_width: 8,
            stem_stride: 2,
            stages: vec![
                StageSpec { width: 8, blocks: 2, stride: 1 },
                StageSpec { width: 16, blocks: 2, stride: 2 },
                StageSpec { width: 32, blocks: 2, stride: 2 },
                StageSpec { width: 64, blocks: 2, stride: 2 },
            ],
            hidden: 64,
        }
    }

    /// Wide, deep preset in the spirit of large residual classifiers.
    pub fn wide() -> Self {
        Self {
            name: "residual-wide".into(),
            stem_width: 64,
            stages: vec![
                StageSpec { width: 128, blocks: 3, stride: 1 },
                StageSpec { width: 256, blocks: 4, stride: 2 },
                StageSpec { width: 512, blocks: 6, stride: 2 },
                StageSpec { width: 1024, blocks: 3, stride: 2 },
            ],
            hidden: 512,
            ..Self::desk()
        }
    }

    /// Tiny preset used by tests.
    pub fn tiny() -> Self {
        Self {
            name: "residual-tiny".into(),
            stem_width: 4,
            stages: vec![StageSpec { width: 4, blocks: 1, stride: 1 }, StageSpec { width: 8, blocks: 1, stride: 2 }],
            hidden: 8,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" | "residual-desk" => Some(Self::desk()),
            "wide" | "residual-wide" => Some(Self::wide()),
            "tiny" | "residual-tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_height * self.input_width
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    cin: usize,
    cout: usize,
    stride: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    nin: usize,
    nout: usize,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
enum Op {
    /// `relu(conv(x))`
    Conv(Conv),
    /// `relu(x + conv2(relu(conv1(x))))`
    Block(Conv, Conv),
}

/// One named parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Whether weight decay applies (weights yes, biases no).
    pub decay: bool,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    arch: Architecture,
    ops: Vec<Op>,
    shapes: Vec<(usize, usize, usize)>,
    fc1: Dense,
    fc2: Dense,
    slots: Vec<Slot>,
    n_params: usize,
}

/// Activations kept from a forward pass for the backward pass.
pub struct Trace {
    acts: Vec<Vec<f32>>,
    hidden: Vec<Option<Vec<f32>>>,
    pooled: Vec<f32>,
    argmax: Vec<usize>,
    fc1_out: Vec<f32>,
    pub output: [f32; OUTPUTS],
}

fn out_dim(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

impl Network {
    pub fn new(arch: &Architecture) -> Self {
        let mut slots = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, shape: Vec<usize>, decay: bool| {
            let s = Slot { name, shape, offset, decay };
            offset += s.len();
            let o = s.offset;
            slots.push(s);
            o
        };
        let mut conv = |name: &str, cin: usize, cout: usize, stride: usize| Conv {
            cin,
            cout,
            stride,
            w: add(format!("{name}.weight"), vec![cout, cin, 3, 3], true),
            b: add(format!("{name}.bias"), vec![cout], false),
        };
        let mut ops = Vec::new();
        let (mut c, mut h, mut w) = (arch.input_channels, arch.input_height, arch.input_width);
        let mut shapes = vec![(c, h, w)];
        ops.push(Op::Conv(conv("stem", c, arch.stem_width, arch.stem_stride)));
        (c, h, w) = (arch.stem_width, out_dim(h, arch.stem_stride), out_dim(w, arch.stem_stride));
        shapes.push((c, h, w));
        for (si, st) in arch.stages.iter().enumerate() {
            if st.stride != 1 || st.width != c {
                ops.push(Op::Conv(conv(&format!("stage{si}.transition"), c, st.width, st.stride)));
                (c, h, w) = (st.width, out_dim(h, st.stride), out_dim(w, st.stride));
                shapes.push((c, h, w));
            }
            for bi in 0..st.blocks {
                let c1 = conv(&format!("stage{si}.block{bi}.conv1"), c, c, 1);
                let c2 = conv(&format!("stage{si}.block{bi}.conv2"), c, c, 1);
                ops.push(Op::Block(c1, c2));
                shapes.push((c, h, w));
            }
        }
        let mut dense = |name: &str, nin: usize, nout: usize| Dense {
            nin,
            nout,
            w: add(format!("{name}.weight"), vec![nout, nin], true),
            b: add(format!("{name}.bias"), vec![nout], false),
        };
        let fc1 = dense("fc1", 2 * c, arch.hidden);
        let fc2 = dense("fc2", arch.hidden, OUTPUTS);
        Self { arch: arch.clone(), ops, shapes, fc1, fc2, slots, n_params: offset }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    /// Multiply-accumulates of one forward pass.
    pub fn forward_macs(&self) -> usize {
        let mut total = 0;
        for (i, op) in self.ops.iter().enumerate() {
            let (_, h, w) = self.shapes[i + 1];
            let conv_macs = |c: &Conv| c.cout * c.cin * KERNEL * h * w;
            total += match op {
                Op::Conv(c) => conv_macs(c),
                Op::Block(a, b) => conv_macs(a) + conv_macs(b),
            };
        }
        total + self.fc1.nin * self.fc1.nout + self.fc2.nin * self.fc2.nout
    }

    /// He-normal weights, zero biases, zero-initialized residual outputs.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f32> {
        let mut p = vec![0.0f32; self.n_params];
        let blocks = self.ops.iter().filter(|o| matches!(o, Op::Block(..))).count().max(1);
        let mut fill = |off: usize, len: usize, std: f64, p: &mut Vec<f32>| {
            for v in &mut p[off..off + len] {
                *v = (rng.sample::<f64, _>(StandardNormal) * std) as f32;
            }
        };
        for op in &self.ops {
            match op {
                Op::Conv(c) => fill(c.w, c.cout * c.cin * KERNEL, (2.0 / (c.cin * KERNEL) as f64).sqrt(), &mut p),
                Op::Block(c1, _) => fill(
                    c1.w,
                    c1.cout * c1.cin * KERNEL,
                    (2.0 / (c1.cin * KERNEL) as f64).sqrt() / (blocks as f64).sqrt(),
                    &mut p,
                ),
            }
        }
        fill(self.fc1.w, self.fc1.nin * self.fc1.nout, (2.0 / self.fc1.nin as f64).sqrt(), &mut p);
        fill(self.fc2.w, self.fc2.nin * self.fc2.nout, (1.0 / self.fc2.nin as f64).sqrt(), &mut p);
        p
    }

    /// Forward pass of one normalized input in channel-major layout.
    pub fn forward(&self, params: &[f32], input: &[f32]) -> Trace {
        assert_eq!(input.len(), self.arch.input_len(), "input size does not match the architecture");
        let mut acts = vec![input.to_vec()];
        let mut hidden = Vec::with_capacity(self.ops.len());
        for (i, op) in self.ops.iter().enumerate() {
            let shape = self.shapes[i];
            let x = &acts[i];
            match op {
                Op::Conv(c) => {
                    let mut y = conv_forward(params, c, x, shape);
                    relu(&mut y);
                    acts.push(y);
                    hidden.push(None);
                }
                Op::Block(c1, c2) => {
                    let mut h = conv_forward(params, c1, x, shape);
                    relu(&mut h);
                    let mut y = conv_forward(params, c2, &h, shape);
                    for (yi, xi) in y.iter_mut().zip(x) {
                        *yi += xi;
                    }
                    relu(&mut y);
                    acts.push(y);
                    hidden.push(Some(h));
                }
            }
        }
        let (c, h, w) = *self.shapes.last().unwrap();
        let feat = acts.last().unwrap();
        let n = h * w;
        let mut pooled = vec![0.0f32; 2 * c];
        let mut argmax = vec![0usize; c];
        for ch in 0..c {
            let plane = &feat[ch * n..(ch + 1) * n];
            pooled[ch] = plane.iter().sum::<f32>() / n as f32;
            let (mut best, mut arg) = (f32::NEG_INFINITY, 0);
            for (k, v) in plane.iter().enumerate() {
                if *v > best {
                    best = *v;
                    arg = k;
                }
            }
            pooled[c + ch] = best;
            argmax[ch] = arg;
        }
        let mut fc1_out = dense_forward(params, &self.fc1, &pooled);
        relu(&mut fc1_out);
        let z = dense_forward(params, &self.fc2, &fc1_out);
        let output = std::array::from_fn(|k| 1.0 / (1.0 + (-z[k]).exp()));
        Trace { acts, hidden, pooled, argmax, fc1_out, output }
    }

    pub fn predict(&self, params: &[f32], input: &[f32]) -> [f32; OUTPUTS] {
        self.forward(params, input).output
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative
    /// with respect to the sigmoid outputs is `d_out`.
    pub fn backward(&self, params: &[f32], trace: &Trace, d_out: &[f32; OUTPUTS], grads: &mut [f32]) {
        let dz: Vec<f32> = (0..OUTPUTS).map(|k| d_out[k] * trace.output[k] * (1.0 - trace.output[k])).collect();
        let mut dh = dense_backward(params, &self.fc2, &trace.fc1_out, &dz, grads);
        for (g, v) in dh.iter_mut().zip(&trace.fc1_out) {
            if *v <= 0.0 {
                *g = 0.0;
            }
        }
        let dpooled = dense_backward(params, &self.fc1, &trace.pooled, &dh, grads);

        let (c, h, w) = *self.shapes.last().unwrap();
        let n = h * w;
        let mut dx = vec![0.0f32; c * n];
        for ch in 0..c {
            let g = dpooled[ch] / n as f32;
            for v in &mut dx[ch * n..(ch + 1) * n] {
                *v = g;
            }
            dx[ch * n + trace.argmax[ch]] += dpooled[c + ch];
        }

        for (i, op) in self.ops.iter().enumerate().rev() {
            let shape = self.shapes[i];
            let out = &trace.acts[i + 1];
            for (g, v) in dx.iter_mut().zip(out) {
                if *v <= 0.0 {
                    *g = 0.0;
                }
            }
            let x = &trace.acts[i];
            match op {
                Op::Conv(cv) => {
                    dx = conv_backward(params, cv, x, shape, &dx, grads, i > 0).unwrap_or_default();
                }
                Op::Block(c1, c2) => {
                    let hid = trace.hidden[i].as_ref().expect("blocks keep their hidden activation");
                    let mut dhid = conv_backward(params, c2, hid, shape, &dx, grads, true).unwrap();
                    for (g, v) in dhid.iter_mut().zip(hid) {
                        if *v <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    let dres = conv_backward(params, c1, x, shape, &dhid, grads, true).unwrap();
                    for (a, b) in dx.iter_mut().zip(&dres) {
                        *a += b;
                    }
                }
            }
        }
    }
}

fn relu(v: &mut [f32]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

fn dense_forward(p: &[f32], d: &Dense, x: &[f32]) -> Vec<f32> {
    (0..d.nout)
        .map(|o| {
            let row = &p[d.w + o * d.nin..d.w + (o + 1) * d.nin];
            p[d.b + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>()
        })
        .collect()
}

fn dense_backward(p: &[f32], d: &Dense, x: &[f32], dy: &[f32], grads: &mut [f32]) -> Vec<f32> {
    let mut dx = vec![0.0f32; d.nin];
    for o in 0..d.nout {
        let g = dy[o];
        grads[d.b + o] += g;
        for i in 0..d.nin {
            grads[d.w + o * d.nin + i] += g * x[i];
            dx[i] += g * p[d.w + o * d.nin + i];
        }
    }
    dx
}

/// Patch matrix `[cin * 9, ho * wo]` of a `(c, h, w)` input with unit padding.
fn im2col(x: &[f32], (c, h, w): (usize, usize, usize), stride: usize) -> (Vec<f32>, usize, usize) {
    let (ho, wo) = (out_dim(h, stride), out_dim(w, stride));
    let n = ho * wo;
    let mut cols = vec![0.0f32; c * KERNEL * n];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ch * 3 + ky) * 3 + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, ho, wo)
}

fn col2im(cols: &[f32], (c, h, w): (usize, usize, usize), stride: usize) -> Vec<f32> {
    let (ho, wo) = (out_dim(h, stride), out_dim(w, stride));
    let n = ho * wo;
    let mut x = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ch * 3 + ky) * 3 + kx) * n..][..n];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `c = alpha * a * b + beta * c` on row-major slices with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    // SAFETY: every index reached through the strides lies inside the
    // slices, which the callers size as m*k, k*n and m*n.
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

fn conv_forward(p: &[f32], cv: &Conv, x: &[f32], shape: (usize, usize, usize)) -> Vec<f32> {
    let (cols, ho, wo) = im2col(x, shape, cv.stride);
    let (n, kk) = (ho * wo, cv.cin * KERNEL);
    let mut y = vec![0.0f32; cv.cout * n];
    for o in 0..cv.cout {
        y[o * n..(o + 1) * n].fill(p[cv.b + o]);
    }
    gemm(cv.cout, kk, n, &p[cv.w..cv.w + cv.cout * kk], (kk as isize, 1), &cols, (n as isize, 1), 1.0, &mut y);
    y
}

fn conv_backward(
    p: &[f32],
    cv: &Conv,
    x: &[f32],
    shape: (usize, usize, usize),
    dy: &[f32],
    grads: &mut [f32],
    need_dx: bool,
) -> Option<Vec<f32>> {
    let (cols, ho, wo) = im2col(x, shape, cv.stride);
    let (n, kk) = (ho * wo, cv.cin * KERNEL);
    for o in 0..cv.cout {
        grads[cv.b + o] += dy[o * n..(o + 1) * n].iter().sum::<f32>();
    }
    // dW += dy * cols^T
    gemm(cv.cout, n, kk, dy, (n as isize, 1), &cols, (1, n as isize), 1.0, &mut grads[cv.w..cv.w + cv.cout * kk]);
    if !need_dx {
        return None;
    }
    // dcols = W^T * dy
    let mut dcols = vec![0.0f32; kk * n];
    gemm(kk, cv.cout, n, &p[cv.w..cv.w + cv.cout * kk], (1, kk as isize), dy, (n as isize, 1), 0.0, &mut dcols);
    Some(col2im(&dcols, shape, cv.stride))
}

use super::gemm::{gemm, Layout};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Relu(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f32>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f32>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    ksize: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.channels * self.ksize * self.ksize
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

const BN_EPS: f32 = 1e-5;

/// Computation record for one forward pass.
///
/// Nodes are appended in execution order, so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a copy of `t` as a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        let (shape, data) = (t.shape().to_vec(), t.into_data());
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last `backward` root with respect to `v`.
    ///
    /// `None` for values that do not require a gradient or were not reached.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        let node = &self.nodes[v.0];
        if node.requires_grad {
            node.grad.as_deref()
        } else {
            None
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(&node.shape, node.value.clone()).expect("tape shapes are valid");
        if let Some(g) = self.grad(v) {
            t.accumulate_grad(g).expect("same shape");
        }
        t
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::Mul(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f32 = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            Layout::Normal,
            self.value(b),
            Layout::Normal,
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    /// `x[N×F] + bias[F]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(TensorError::Shape {
                op: "add_row_bias",
                left: sx.to_vec(),
                right: sb.to_vec(),
            });
        }
        let f = sx[1];
        let b = self.value(bias);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % f])
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), value, rg, Op::AddRowBias(x, bias)))
    }

    /// `x[B×C×H×W] + bias[C]` broadcast over batch and space.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 4 || sb != [sx[1]] {
            return Err(TensorError::Shape {
                op: "add_channel_bias",
                left: sx.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (c, hw) = (sx[1], sx[2] * sx[3]);
        let b = self.value(bias);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[(i / hw) % c])
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), value, rg, Op::AddChannelBias(x, bias)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), value, rg, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(TensorError::Shape {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), value, rg, Op::Reshape(x)))
    }

    /// Cross-correlation of `input[B×C×H×W]` with `kernel[F×C×k×k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || sk[2] != sk[3] {
            return Err(TensorError::Shape {
                op: "conv2d",
                left: si,
                right: sk,
            });
        }
        if stride == 0 {
            return Err(TensorError::Config("conv2d stride must be positive".into()));
        }
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let (f, k) = (sk[0], sk[2]);
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if k > ph || k > pw {
            return Err(TensorError::Config(format!(
                "conv2d kernel {k} exceeds padded input {ph}x{pw}"
            )));
        }
        if (ph - k) % stride != 0 || (pw - k) % stride != 0 {
            return Err(TensorError::Config(format!(
                "conv2d output size is not integral: ({ph}-{k})/{stride}, ({pw}-{k})/{stride}"
            )));
        }
        let geom = ConvGeom {
            batch: b,
            channels: c,
            height: h,
            width: w,
            filters: f,
            ksize: k,
            stride,
            padding,
            out_h: (ph - k) / stride + 1,
            out_w: (pw - k) / stride + 1,
        };
        let cols = im2col(self.value(input), &geom);
        let (patch, bp, p) = (geom.patch(), b * geom.positions(), geom.positions());
        let mut out_t = vec![0.0; f * bp];
        gemm(
            f,
            patch,
            bp,
            self.value(kernel),
            Layout::Normal,
            &cols,
            Layout::Normal,
            0.0,
            &mut out_t,
        );
        // [F, B·P] -> [B, F, P]
        let mut out = vec![0.0; b * f * p];
        for fi in 0..f {
            for bi in 0..b {
                let src = &out_t[fi * bp + bi * p..fi * bp + (bi + 1) * p];
                out[(bi * f + fi) * p..(bi * f + fi + 1) * p].copy_from_slice(src);
            }
        }
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(
            vec![b, f, geom.out_h, geom.out_w],
            out,
            rg,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
        ))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(TensorError::Shape {
                op: "max_pool2d",
                left: s,
                right: vec![2, 2],
            });
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(bc * oh * ow);
        let mut argmax = Vec::with_capacity(bc * oh * ow);
        for plane in 0..bc {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![s[0], s[1], oh, ow], out, rg, Op::MaxPool2d { input: x, argmax }))
    }

    /// Mean over the spatial dimensions: `[B×C×H×W] -> [B×C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(TensorError::Shape {
                op: "global_avg_pool",
                left: s,
                right: vec![],
            });
        }
        let hw = s[2] * s[3];
        let value = self
            .value(x)
            .chunks_exact(hw)
            .map(|c| c.iter().sum::<f32>() / hw as f32)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![s[0], s[1]], value, rg, Op::GlobalAvgPool(x)))
    }

    /// Normalizes each channel with the statistics of the current batch.
    ///
    /// Accepts `[B×C×H×W]` or `[B×C]`; there are no running statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if (s.len() != 4 && s.len() != 2) || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(TensorError::Shape {
                op: "batch_norm",
                left: s,
                right: self.shape(gamma).to_vec(),
            });
        }
        let (b, c) = (s[0], s[1]);
        let hw: usize = s[2..].iter().product();
        let n = (b * hw) as f32;
        let xv = self.value(x);
        let (g, be) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; xv.len()];
        for ci in 0..c {
            let idx = |bi: usize, j: usize| (bi * c + ci) * hw + j;
            let mut mean = 0.0f64;
            for bi in 0..b {
                for j in 0..hw {
                    mean += f64::from(xv[idx(bi, j)]);
                }
            }
            mean /= f64::from(n);
            let mut var = 0.0f64;
            for bi in 0..b {
                for j in 0..hw {
                    let d = f64::from(xv[idx(bi, j)]) - mean;
                    var += d * d;
                }
            }
            var /= f64::from(n);
            let is = 1.0 / (var + f64::from(BN_EPS)).sqrt();
            inv_std[ci] = is as f32;
            for bi in 0..b {
                for j in 0..hw {
                    let i = idx(bi, j);
                    xhat[i] = ((f64::from(xv[i]) - mean) * is) as f32;
                    out[i] = g[ci] * xhat[i] + be[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            s,
            out,
            rg,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean softmax cross-entropy of `logits[B×K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::Shape {
                op: "softmax_cross_entropy",
                left: s,
                right: vec![labels.len()],
            });
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Data(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0f64;
        for (row, (&label, p)) in lv.chunks_exact(k).zip(labels.iter().zip(probs.chunks_exact_mut(k))) {
            let (argmax, max) = row
                .iter()
                .copied()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (j, v)| if v > best.1 { (j, v) } else { best });
            // ln Σ exp(v - max) = ln(1 + Σ_{j≠argmax} exp(v_j - max)), kept in f64
            // so that confident rows do not round the loss to zero.
            let mut rest = 0.0f64;
            for (j, &v) in row.iter().enumerate() {
                if j != argmax {
                    rest += f64::from(v - max).exp();
                }
            }
            let z = 1.0 + rest;
            for (pi, &v) in p.iter_mut().zip(row) {
                *pi = (f64::from(v - max).exp() / z) as f32;
            }
            loss += rest.ln_1p() - f64::from(row[label] - max);
        }
        let value = vec![(loss / b as f64) as f32];
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            value,
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    fn accumulate(&mut self, v: Var, g: &[f32]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Back-propagates from a scalar root, filling gradients of every node
    /// that requires one. Gradients from repeated uses add up.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(TensorError::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].shape
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_node(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, op: &Op, g: &[f32]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let ga: Vec<f32> = g.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                    self.accumulate(a, &ga);
                }
                if self.rg(b) {
                    let gb: Vec<f32> = g.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                    self.accumulate(b, &gb);
                }
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.value(a).len()];
                self.accumulate(a, &ga);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.rg(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, Layout::Normal, self.value(b), Layout::Transposed, 0.0, &mut ga);
                    self.accumulate(a, &ga);
                }
                if self.rg(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a), Layout::Transposed, g, Layout::Normal, 0.0, &mut gb);
                    self.accumulate(b, &gb);
                }
            }
            Op::AddRowBias(x, bias) => {
                self.accumulate(x, g);
                if self.rg(bias) {
                    let f = self.shape(bias)[0];
                    let mut gb = vec![0.0; f];
                    for row in g.chunks_exact(f) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    self.accumulate(bias, &gb);
                }
            }
            Op::AddChannelBias(x, bias) => {
                self.accumulate(x, g);
                if self.rg(bias) {
                    let s = self.shape(x);
                    let (c, hw) = (s[1], s[2] * s[3]);
                    let mut gb = vec![0.0; c];
                    for (plane, chunk) in g.chunks_exact(hw).enumerate() {
                        gb[plane % c] += chunk.iter().sum::<f32>();
                    }
                    self.accumulate(bias, &gb);
                }
            }
            Op::Relu(x) => {
                let out = &self.nodes[i].value;
                let gx: Vec<f32> = g
                    .iter()
                    .zip(out)
                    .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::Reshape(x) => self.accumulate(x, g),
            Op::Conv2d {
                input,
                kernel,
                geom,
                ref cols,
            } => {
                let (b, f, p) = (geom.batch, geom.filters, geom.positions());
                let (patch, bp) = (geom.patch(), b * p);
                // [B, F, P] -> [F, B·P]
                let mut g_t = vec![0.0; f * bp];
                for bi in 0..b {
                    for fi in 0..f {
                        g_t[fi * bp + bi * p..fi * bp + (bi + 1) * p]
                            .copy_from_slice(&g[(bi * f + fi) * p..(bi * f + fi + 1) * p]);
                    }
                }
                if self.rg(kernel) {
                    let mut gk = vec![0.0; f * patch];
                    gemm(f, bp, patch, &g_t, Layout::Normal, cols, Layout::Transposed, 0.0, &mut gk);
                    self.accumulate(kernel, &gk);
                }
                if self.rg(input) {
                    let mut gcols = vec![0.0; patch * bp];
                    gemm(
                        patch,
                        f,
                        bp,
                        self.value(kernel),
                        Layout::Transposed,
                        &g_t,
                        Layout::Normal,
                        0.0,
                        &mut gcols,
                    );
                    let gi = col2im(&gcols, &geom);
                    self.accumulate(input, &gi);
                }
            }
            Op::MaxPool2d { input, ref argmax } => {
                let mut gi = vec![0.0; self.value(input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    gi[src as usize] += gv;
                }
                self.accumulate(input, &gi);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let hw = s[2] * s[3];
                let scale = 1.0 / hw as f32;
                let gx: Vec<f32> = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v * scale, hw))
                    .collect();
                self.accumulate(x, &gx);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                ref xhat,
                ref inv_std,
            } => {
                let s = self.shape(input).to_vec();
                let (b, c) = (s[0], s[1]);
                let hw: usize = s[2..].iter().product();
                let n = (b * hw) as f32;
                let gv = self.value(gamma).to_vec();
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut gx = vec![0.0; g.len()];
                for ci in 0..c {
                    let idx = |bi: usize, j: usize| (bi * c + ci) * hw + j;
                    // f64 sums: the bracket below cancels heavily for small batches.
                    let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
                    for bi in 0..b {
                        for j in 0..hw {
                            let k = idx(bi, j);
                            sum_dy += f64::from(g[k]);
                            sum_dy_xhat += f64::from(g[k]) * f64::from(xhat[k]);
                        }
                    }
                    gg[ci] = sum_dy_xhat as f32;
                    gb[ci] = sum_dy as f32;
                    let scale = f64::from(gv[ci]) * f64::from(inv_std[ci]) / f64::from(n);
                    for bi in 0..b {
                        for j in 0..hw {
                            let k = idx(bi, j);
                            let bracket = f64::from(n) * f64::from(g[k])
                                - sum_dy
                                - f64::from(xhat[k]) * sum_dy_xhat;
                            gx[k] = (scale * bracket) as f32;
                        }
                    }
                }
                self.accumulate(input, &gx);
                self.accumulate(gamma, &gg);
                self.accumulate(beta, &gb);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                ref probs,
                ref labels,
            } => {
                let k = self.shape(logits)[1];
                let scale = g[0] / labels.len() as f32;
                let mut gl = probs.clone();
                for (row, &label) in gl.chunks_exact_mut(k).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.accumulate(logits, &gl);
            }
        }
    }
}

fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (p, bp) = (g.positions(), g.batch * g.positions());
    let mut cols = vec![0.0; g.patch() * bp];
    for c in 0..g.channels {
        for ki in 0..g.ksize {
            for kj in 0..g.ksize {
                let row = (c * g.ksize + ki) * g.ksize + kj;
                let dst_row = &mut cols[row * bp..(row + 1) * bp];
                for b in 0..g.batch {
                    let plane = &x[(b * g.channels + c) * g.height * g.width..][..g.height * g.width];
                    for oi in 0..g.out_h {
                        let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                        if ii < 0 || ii >= g.height as isize {
                            continue;
                        }
                        let src_row = &plane[ii as usize * g.width..][..g.width];
                        let dst = &mut dst_row[b * p + oi * g.out_w..][..g.out_w];
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                            if jj >= 0 && jj < g.width as isize {
                                *d = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (p, bp) = (g.positions(), g.batch * g.positions());
    let mut x = vec![0.0; g.batch * g.channels * g.height * g.width];
    for c in 0..g.channels {
        for ki in 0..g.ksize {
            for kj in 0..g.ksize {
                let row = (c * g.ksize + ki) * g.ksize + kj;
                let src_row = &cols[row * bp..(row + 1) * bp];
                for b in 0..g.batch {
                    let base = (b * g.channels + c) * g.height * g.width;
                    for oi in 0..g.out_h {
                        let ii = (oi * g.stride + ki) as isize - g.padding as isize;
                        if ii < 0 || ii >= g.height as isize {
                            continue;
                        }
                        let src = &src_row[b * p + oi * g.out_w..][..g.out_w];
                        for (oj, &v) in src.iter().enumerate() {
                            let jj = (oj * g.stride + kj) as isize - g.padding as isize;
                            if jj >= 0 && jj < g.width as isize {
                                x[base + ii as usize * g.width + jj as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

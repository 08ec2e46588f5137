use super::tensor::{matmul_kernel, transpose_kernel};
use super::{Result, Tensor, TensorError};

/// Floor applied to arguments of on-tape logarithms; keeps KL terms finite
/// when a probability underflows.
pub const LN_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Row-vector broadcast add: `[r, c] + [1, c]`.
    AddRow { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MulElem { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    Relu { x: NodeId },
    /// Row-wise temperature softmax; the node value holds the probabilities.
    SoftmaxRows { x: NodeId, tau: f64 },
    Ln { x: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    /// `[n, d] -> [1, d]` column means.
    MeanRows { x: NodeId },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    GatherRows { x: NodeId, indices: Vec<usize> },
    /// Scatter `src` rows to `visible` positions of an `[n, d]` output, filling
    /// the remaining rows with the broadcast `fill` row.
    AssembleRows { src: NodeId, fill: NodeId, visible: Vec<usize>, n: usize },
    LayerNormRows { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    /// Zero-padded stride-1 2-D convolution over `[h, w, c_in]` with kernel
    /// `[kh, kw, c_in, c_out]` and per-output-channel bias.
    Conv2d { input: NodeId, kernel: NodeId, bias: NodeId, pad: usize },
    /// 2x2 stride-2 average pooling; odd trailing rows/cols are dropped.
    AvgPool2 { x: NodeId },
    Reshape { x: NodeId },
    /// Single element as a scalar node.
    Pick { x: NodeId, index: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Wengert-style arena of recorded operations. Nodes are append-only, so every
/// operation's inputs precede it and a single reverse sweep visits each node
/// once. A tape is built for one forward pass and consumed by one `backward`.
#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Leaves receive gradients like any other node;
    /// callers read back the ones they care about.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a node after `backward` has run.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, op });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::TapeUsage(format!(
                "node {} is not on this tape (len {})",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).transposed()?;
        Ok(self.push(value, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2("add_row")?;
        if self.value(b).numel() != c {
            return Err(TensorError::DimensionMismatch {
                op: "add_row",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let bv = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bv[j];
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(value, Op::AddRow { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), "mul_elem", |x, y| x * y)?;
        Ok(self.push(value, Op::MulElem { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu { x })
    }

    /// Row-wise softmax with temperature `tau` and max-subtraction.
    pub fn softmax_rows(&mut self, x: NodeId, tau: f64) -> Result<NodeId> {
        if tau <= 0.0 {
            return Err(TensorError::InvalidParameter {
                name: "tau",
                reason: format!("temperature must be positive, got {tau}"),
            });
        }
        let (r, c) = self.value(x).dims2("softmax_rows")?;
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            softmax_row_in_place(&mut data[i * c..(i + 1) * c], tau);
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(value, Op::SoftmaxRows { x, tau }))
    }

    /// Elementwise natural log with the argument clamped at [`LN_CLAMP`].
    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(LN_CLAMP).ln());
        self.push(value, Op::Ln { x })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s / n), Op::Mean { x })
    }

    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2("mean_rows")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += xd[i * c + j];
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        let value = Tensor::new(vec![1, c], out)?;
        Ok(self.push(value, Op::MeanRows { x }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2("slice_cols")?;
        if start + len > c {
            return Err(TensorError::InvalidParameter {
                name: "slice_cols",
                reason: format!("columns {start}..{} out of {c}", start + len),
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        Ok(self.push(value, Op::SliceCols { x, start, len }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TensorError::TapeUsage("concat_cols of zero parts".into()));
        }
        let (r, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (rp, cp) = self.value(p).dims2("concat_cols")?;
            if rp != r {
                return Err(TensorError::DimensionMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            widths.push(cp);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pd = self.value(p).data();
                out.extend_from_slice(&pd[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![r, total], out)?;
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2("gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(TensorError::InvalidParameter {
                name: "gather_rows",
                reason: format!("row {bad} out of {r}"),
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![indices.len(), c], out)?;
        Ok(self.push(value, Op::GatherRows { x, indices: indices.to_vec() }))
    }

    pub fn assemble_rows(&mut self, src: NodeId, fill: NodeId, visible: &[usize], n: usize) -> Result<NodeId> {
        let (v, c) = self.value(src).dims2("assemble_rows")?;
        if v != visible.len() || self.value(fill).numel() != c {
            return Err(TensorError::DimensionMismatch {
                op: "assemble_rows",
                left: self.value(src).shape().to_vec(),
                right: self.value(fill).shape().to_vec(),
            });
        }
        let fillv = self.value(fill).data().to_vec();
        let mut out = vec![0.0; n * c];
        for row in out.chunks_mut(c) {
            row.copy_from_slice(&fillv);
        }
        let sd = self.value(src).data();
        for (i, &pos) in visible.iter().enumerate() {
            out[pos * c..(pos + 1) * c].copy_from_slice(&sd[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![n, c], out)?;
        Ok(self.push(
            value,
            Op::AssembleRows { src, fill, visible: visible.to_vec(), n },
        ))
    }

    /// Per-row layer normalization with learned gain and shift.
    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2("layer_norm_rows")?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(TensorError::DimensionMismatch {
                op: "layer_norm_rows",
                left: self.value(x).shape().to_vec(),
                right: self.value(gamma).shape().to_vec(),
            });
        }
        let xd = self.value(x).data().to_vec();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let xh = (row[j] - mean) * is;
                xhat[i * c + j] = xh;
                out[i * c + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::new(vec![r, c], out)?;
        Ok(self.push(value, Op::LayerNormRows { x, gamma, beta, xhat, inv_std }))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, pad: usize) -> Result<NodeId> {
        let (h, w, c_in) = self.value(input).dims3("conv2d")?;
        let kshape = self.value(kernel).shape().to_vec();
        let (kh, kw, kc_in, c_out) = match kshape.as_slice() {
            [a, b, c, d] => (*a, *b, *c, *d),
            _ => {
                return Err(TensorError::ShapeExpected {
                    op: "conv2d kernel",
                    expected: vec![0, 0, 0, 0],
                    got: kshape,
                })
            }
        };
        if kc_in != c_in || self.value(bias).numel() != c_out {
            return Err(TensorError::DimensionMismatch {
                op: "conv2d",
                left: self.value(input).shape().to_vec(),
                right: kshape,
            });
        }
        let xd = self.value(input).data();
        let kd = self.value(kernel).data();
        let bd = self.value(bias).data();
        let out_h = h + 2 * pad + 1 - kh;
        let out_w = w + 2 * pad + 1 - kw;
        let mut out = vec![0.0; out_h * out_w * c_out];
        for oy in 0..out_h {
            for ox in 0..out_w {
                for co in 0..c_out {
                    let mut acc = bd[co];
                    for dy in 0..kh {
                        let iy = (oy + dy) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dx in 0..kw {
                            let ix = (ox + dx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c_in {
                                let xv = xd[(iy as usize * w + ix as usize) * c_in + ci];
                                let kv = kd[((dy * kw + dx) * c_in + ci) * c_out + co];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[(oy * out_w + ox) * c_out + co] = acc;
                }
            }
        }
        let value = Tensor::new(vec![out_h, out_w, c_out], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, pad }))
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.value(x).dims3("avg_pool2")?;
        let oh = h / 2;
        let ow = w / 2;
        if oh == 0 || ow == 0 {
            return Err(TensorError::InvalidParameter {
                name: "avg_pool2",
                reason: format!("input {h}x{w} too small to pool"),
            });
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            acc += xd[((2 * oy + dy) * w + 2 * ox + dx) * c + ch];
                        }
                    }
                    out[(oy * ow + ox) * c + ch] = acc / 4.0;
                }
            }
        }
        let value = Tensor::new(vec![oh, ow, c], out)?;
        Ok(self.push(value, Op::AvgPool2 { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(TensorError::ShapeExpected {
                op: "reshape",
                expected: shape.to_vec(),
                got: self.value(x).shape().to_vec(),
            });
        }
        let value = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        if index >= self.value(x).numel() {
            return Err(TensorError::InvalidParameter {
                name: "pick",
                reason: format!("index {index} out of {}", self.value(x).numel()),
            });
        }
        let v = self.value(x).data()[index];
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }))
    }

    /// Reverse sweep from a scalar loss; every node reachable from it ends up
    /// with its gradient buffer populated. Gradients accumulate additively for
    /// nodes used more than once.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss)?;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::TapeUsage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|node| vec![0.0; node.value.numel()])
            .collect();
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            let g = std::mem::take(&mut grads[i]);
            if g.iter().all(|&v| v == 0.0) {
                grads[i] = g;
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = self.nodes[a.0].value.dims2("matmul")?;
                    let (_, nn) = self.nodes[b.0].value.dims2("matmul")?;
                    let bt = transpose_kernel(self.nodes[b.0].value.data(), k, nn);
                    let da = matmul_kernel(&g, &bt, m, nn, k);
                    let at = transpose_kernel(self.nodes[a.0].value.data(), m, k);
                    let db = matmul_kernel(&at, &g, k, m, nn);
                    axpy(&mut grads[a.0], &da);
                    axpy(&mut grads[b.0], &db);
                }
                Op::Transpose { x } => {
                    let (r, c) = self.nodes[i].value.dims2("transpose")?;
                    let dx = transpose_kernel(&g, r, c);
                    axpy(&mut grads[x.0], &dx);
                }
                Op::Add { a, b } => {
                    axpy(&mut grads[a.0], &g);
                    axpy(&mut grads[b.0], &g);
                }
                Op::AddRow { a, b } => {
                    axpy(&mut grads[a.0], &g);
                    let c = self.nodes[b.0].value.numel();
                    let gb = &mut grads[b.0];
                    for (idx, &gv) in g.iter().enumerate() {
                        gb[idx % c] += gv;
                    }
                }
                Op::Sub { a, b } => {
                    axpy(&mut grads[a.0], &g);
                    for (dst, &gv) in grads[b.0].iter_mut().zip(&g) {
                        *dst -= gv;
                    }
                }
                Op::MulElem { a, b } => {
                    let (a, b) = (*a, *b);
                    for (idx, &gv) in g.iter().enumerate() {
                        grads[a.0][idx] += gv * self.nodes[b.0].value.data()[idx];
                    }
                    for (idx, &gv) in g.iter().enumerate() {
                        grads[b.0][idx] += gv * self.nodes[a.0].value.data()[idx];
                    }
                }
                Op::Scale { x, c } => {
                    let c = *c;
                    for (dst, &gv) in grads[x.0].iter_mut().zip(&g) {
                        *dst += c * gv;
                    }
                }
                Op::AddScalar { x } => {
                    axpy(&mut grads[x.0], &g);
                }
                Op::Relu { x } => {
                    let xv = self.nodes[x.0].value.data();
                    for (idx, &gv) in g.iter().enumerate() {
                        if xv[idx] > 0.0 {
                            grads[x.0][idx] += gv;
                        }
                    }
                }
                Op::SoftmaxRows { x, tau } => {
                    let s = self.nodes[i].value.data();
                    let (r, c) = self.nodes[i].value.dims2("softmax_rows")?;
                    let tau = *tau;
                    for row in 0..r {
                        let srow = &s[row * c..(row + 1) * c];
                        let grow = &g[row * c..(row + 1) * c];
                        let dot: f64 = srow.iter().zip(grow).map(|(&sv, &gv)| sv * gv).sum();
                        let dst = &mut grads[x.0][row * c..(row + 1) * c];
                        for j in 0..c {
                            dst[j] += srow[j] / tau * (grow[j] - dot);
                        }
                    }
                }
                Op::Ln { x } => {
                    let xv = self.nodes[x.0].value.data();
                    for (idx, &gv) in g.iter().enumerate() {
                        if xv[idx] > LN_CLAMP {
                            grads[x.0][idx] += gv / xv[idx];
                        }
                    }
                }
                Op::Sum { x } => {
                    let gv = g[0];
                    for dst in grads[x.0].iter_mut() {
                        *dst += gv;
                    }
                }
                Op::Mean { x } => {
                    let gv = g[0] / self.nodes[x.0].value.numel() as f64;
                    for dst in grads[x.0].iter_mut() {
                        *dst += gv;
                    }
                }
                Op::MeanRows { x } => {
                    let (r, c) = self.nodes[x.0].value.dims2("mean_rows")?;
                    let inv = 1.0 / r as f64;
                    for row in 0..r {
                        for j in 0..c {
                            grads[x.0][row * c + j] += g[j] * inv;
                        }
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (r, c) = self.nodes[x.0].value.dims2("slice_cols")?;
                    let (start, len) = (*start, *len);
                    for row in 0..r {
                        for j in 0..len {
                            grads[x.0][row * c + start + j] += g[row * len + j];
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let parts = parts.clone();
                    let (r, total) = self.nodes[i].value.dims2("concat_cols")?;
                    let mut offset = 0;
                    for p in parts {
                        let (_, w) = self.nodes[p.0].value.dims2("concat_cols")?;
                        for row in 0..r {
                            for j in 0..w {
                                grads[p.0][row * w + j] += g[row * total + offset + j];
                            }
                        }
                        offset += w;
                    }
                }
                Op::GatherRows { x, indices } => {
                    let (_, c) = self.nodes[x.0].value.dims2("gather_rows")?;
                    let indices = indices.clone();
                    for (out_row, &src_row) in indices.iter().enumerate() {
                        for j in 0..c {
                            grads[x.0][src_row * c + j] += g[out_row * c + j];
                        }
                    }
                }
                Op::AssembleRows { src, fill, visible, n } => {
                    let (_, c) = self.nodes[src.0].value.dims2("assemble_rows")?;
                    let visible = visible.clone();
                    let n = *n;
                    let mut is_visible = vec![false; n];
                    for (i_src, &pos) in visible.iter().enumerate() {
                        is_visible[pos] = true;
                        for j in 0..c {
                            grads[src.0][i_src * c + j] += g[pos * c + j];
                        }
                    }
                    for pos in 0..n {
                        if !is_visible[pos] {
                            for j in 0..c {
                                grads[fill.0][j] += g[pos * c + j];
                            }
                        }
                    }
                }
                Op::LayerNormRows { x, gamma, beta, xhat, inv_std } => {
                    let (r, c) = self.nodes[x.0].value.dims2("layer_norm_rows")?;
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let xhat = xhat.clone();
                    let inv_std = inv_std.clone();
                    let gvals = self.nodes[gamma.0].value.data().to_vec();
                    for row in 0..r {
                        let grow = &g[row * c..(row + 1) * c];
                        let xh = &xhat[row * c..(row + 1) * c];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let dxhat = grow[j] * gvals[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xh[j];
                            grads[gamma.0][j] += grow[j] * xh[j];
                            grads[beta.0][j] += grow[j];
                        }
                        let m = c as f64;
                        for j in 0..c {
                            let dxhat = grow[j] * gvals[j];
                            grads[x.0][row * c + j] +=
                                inv_std[row] * (dxhat - sum_dxhat / m - xh[j] * sum_dxhat_xhat / m);
                        }
                    }
                }
                Op::Conv2d { input, kernel, bias, pad } => {
                    let (h, w, c_in) = self.nodes[input.0].value.dims3("conv2d")?;
                    let kshape = self.nodes[kernel.0].value.shape().to_vec();
                    let (kh, kw, _, c_out) = (kshape[0], kshape[1], kshape[2], kshape[3]);
                    let (input, kernel, bias, pad) = (*input, *kernel, *bias, *pad);
                    let (out_h, out_w) = {
                        let s = self.nodes[i].value.shape();
                        (s[0], s[1])
                    };
                    let xd = self.nodes[input.0].value.data().to_vec();
                    let kd = self.nodes[kernel.0].value.data().to_vec();
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            for co in 0..c_out {
                                let gv = g[(oy * out_w + ox) * c_out + co];
                                if gv == 0.0 {
                                    continue;
                                }
                                grads[bias.0][co] += gv;
                                for dy in 0..kh {
                                    let iy = (oy + dy) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..kw {
                                        let ix = (ox + dx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        for ci in 0..c_in {
                                            let xi = (iy as usize * w + ix as usize) * c_in + ci;
                                            let ki = ((dy * kw + dx) * c_in + ci) * c_out + co;
                                            grads[kernel.0][ki] += gv * xd[xi];
                                            grads[input.0][xi] += gv * kd[ki];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::AvgPool2 { x } => {
                    let (h, w, c) = self.nodes[x.0].value.dims3("avg_pool2")?;
                    let (oh, ow) = (h / 2, w / 2);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let gv = g[(oy * ow + ox) * c + ch] / 4.0;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        grads[x.0][((2 * oy + dy) * w + 2 * ox + dx) * c + ch] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    axpy(&mut grads[x.0], &g);
                }
                Op::Pick { x, index } => {
                    grads[x.0][*index] += g[0];
                }
            }
            grads[i] = g;
        }

        for i in 0..n {
            self.nodes[i].grad = Some(std::mem::take(&mut grads[i]));
        }
        Ok(())
    }
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_row_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_square_sum_is_x() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::new(vec![1, 4], vec![1.0, -2.0, 3.0, 0.25]).unwrap());
        let sq = tape.mul_elem(x, x).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, -2.0, 3.0, 0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shared_nodes_accumulate_gradients() {
        // loss = sum(x + x) -> grad 2 everywhere
        let mut tape = GradTape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0]);
    }
}

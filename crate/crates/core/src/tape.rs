//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding the output tensor and a backward
//! rule. Nodes are inherently in topological order (inputs always precede
//! their consumers), so the backward pass is a single reverse sweep that
//! visits each node exactly once and accumulates gradients where a tensor
//! feeds several consumers.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

/// Forward/eval switch for stochastic layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
}

enum Rule<F: Scalar> {
    Leaf,
    Add {
        a: Var,
        b: Var,
    },
    AddRowVec {
        a: Var,
        b: Var,
        cols: usize,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: F,
    },
    Sum {
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    SliceRows {
        a: Var,
        start: usize,
        cols: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
        len: usize,
        src_cols: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    TileRows {
        a: Var,
        reps: usize,
    },
    Reshape {
        a: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dims: ConvDims,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
        cols: usize,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    needs_grad: bool,
    rule: Rule<F>,
}

/// Recorded computation: an ordered list of operation nodes.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record an input tensor. Gradients flow back to it if it was marked
    /// with `requires_grad`.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let needs = t.needs_grad();
        self.push(t, needs, Rule::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of a recorded tensor, available after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor<F>, needs_grad: bool, rule: Rule<F>) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            rule,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<F>, needs: bool, rule: Rule<F>) -> Var {
        let t = Tensor::new(shape, data).expect("op output shape is consistent");
        self.push(t, needs, rule)
    }

    // ---- elementwise and structural ops ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(shape, data, needs, Rule::Add { a, b }))
    }

    /// Add a length-`cols` vector to every row of a matrix-like tensor.
    pub fn add_row_vec(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (_, cols) = self.value(a).as_rows();
        let tb = self.value(b);
        if tb.shape().len() != 1 || tb.numel() != cols {
            return Err(TensorError::shape(
                "add_row_vec",
                format!("expected vector of length {cols}, got {:?}", tb.shape()),
            ));
        }
        let ta = self.value(a);
        let mut data = Vec::with_capacity(ta.numel());
        for row in ta.data().chunks_exact(cols) {
            data.extend(row.iter().zip(self.value(b).data()).map(|(&x, &y)| x + y));
        }
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(shape, data, needs, Rule::AddRowVec { a, b, cols }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(
                "mul",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(shape, data, needs, Rule::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * c).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a);
        self.out(shape, data, needs, Rule::Scale { a, c })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self
            .value(a)
            .data()
            .iter()
            .fold(F::zero(), |acc, &x| acc + x);
        let needs = self.needs(a);
        self.out(vec![1], vec![total], needs, Rule::Sum { a })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != ta.numel() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {:?}", ta.shape(), shape),
            ));
        }
        let data = ta.data().to_vec();
        let needs = self.needs(a);
        Ok(self.out(shape, data, needs, Rule::Reshape { a }))
    }

    // ---- matrix ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::shape(
                "matmul",
                format!("{sa:?} x {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(vec![m, n], data, needs, Rule::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 2 {
            return Err(TensorError::shape("transpose", format!("{s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let data = transpose_raw(ta.data(), rows, cols);
        let needs = self.needs(a);
        Ok(self.out(vec![cols, rows], data, needs, Rule::Transpose { a, rows, cols }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 2 || start + len > s[0] || len == 0 {
            return Err(TensorError::shape(
                "slice_rows",
                format!("rows {start}..{} of {s:?}", start + len),
            ));
        }
        let cols = s[1];
        let data = ta.data()[start * cols..(start + len) * cols].to_vec();
        let needs = self.needs(a);
        Ok(self.out(vec![len, cols], data, needs, Rule::SliceRows { a, start, cols }))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(TensorError::shape(
                "slice_cols",
                format!("cols {start}..{} of {s:?}", start + len),
            ));
        }
        let (rows, src_cols) = (s[0], s[1]);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&ta.data()[r * src_cols + start..r * src_cols + start + len]);
        }
        let needs = self.needs(a);
        Ok(self.out(
            vec![rows, len],
            data,
            needs,
            Rule::SliceCols {
                a,
                start,
                len,
                src_cols,
            },
        ))
    }

    /// Stack matrices vertically. Parts may repeat the same variable.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::param("concat_rows", "no parts"));
        }
        let cols = self.value(parts[0]).shape().last().copied().unwrap_or(0);
        let mut rows = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[1] != cols {
                return Err(TensorError::shape(
                    "concat_rows",
                    format!("part {s:?} vs {cols} cols"),
                ));
            }
            rows += s[0];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.out(
            vec![rows, cols],
            data,
            needs,
            Rule::ConcatRows {
                parts: parts.to_vec(),
                cols,
            },
        ))
    }

    /// Stack matrices side by side (all parts share the row count).
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::param("concat_cols", "no parts"));
        }
        let rows = self.value(parts[0]).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        let mut cols = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::shape(
                    "concat_cols",
                    format!("part {s:?} vs {rows} rows"),
                ));
            }
            widths.push(s[1]);
            cols += s[1];
        }
        let mut data = vec![F::zero(); rows * cols];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data().to_vec();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let tagged = parts.iter().copied().zip(widths).collect();
        Ok(self.out(
            vec![rows, cols],
            data,
            needs,
            Rule::ConcatCols {
                parts: tagged,
                rows,
            },
        ))
    }

    /// Vertically repeat a matrix `reps` times.
    pub fn tile_rows(&mut self, a: Var, reps: usize) -> Result<Var, TensorError> {
        if reps == 0 {
            return Err(TensorError::param("tile_rows", "reps must be positive"));
        }
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 2 {
            return Err(TensorError::shape("tile_rows", format!("{s:?}")));
        }
        let mut data = Vec::with_capacity(ta.numel() * reps);
        for _ in 0..reps {
            data.extend_from_slice(ta.data());
        }
        let shape = vec![s[0] * reps, s[1]];
        let needs = self.needs(a);
        Ok(self.out(shape, data, needs, Rule::TileRows { a, reps }))
    }

    // ---- network layers ----

    /// 3x3 same-padding cross-correlation plus per-channel bias.
    ///
    /// Accepts `[C_in, H, W]` or `[B, C_in, H, W]` input; kernels are
    /// `[C_out, C_in, 3, 3]` and bias is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let xs = tx.shape().to_vec();
        let (batch, c_in, h, wd) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2]),
            4 => (xs[0], xs[1], xs[2], xs[3]),
            _ => return Err(TensorError::shape("conv2d", format!("input {xs:?}"))),
        };
        let ws = tw.shape();
        if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
            return Err(TensorError::shape(
                "conv2d",
                format!("kernels must be [C_out, C_in, 3, 3], got {ws:?}"),
            ));
        }
        if ws[1] != c_in {
            return Err(TensorError::shape(
                "conv2d",
                format!("input has {c_in} channels, kernels expect {}", ws[1]),
            ));
        }
        let c_out = ws[0];
        if tb.shape() != [c_out] {
            return Err(TensorError::shape(
                "conv2d",
                format!("bias must be [{c_out}], got {:?}", tb.shape()),
            ));
        }
        let dims = ConvDims {
            batch,
            c_in,
            h,
            w: wd,
            c_out,
        };
        let data = conv2d_forward(tx.data(), tw.data(), tb.data(), &dims);
        let shape = if xs.len() == 3 {
            vec![c_out, h, wd]
        } else {
            vec![batch, c_out, h, wd]
        };
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.out(shape, data, needs, Rule::Conv2d { x, w, b, dims }))
    }

    /// 2x2 max pooling with stride 2. Spatial dims must be even. The
    /// gradient routes to the first maximal element in row-major order.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let xs = tx.shape().to_vec();
        let (lead, h, w) = match xs.len() {
            3 => (xs[0], xs[1], xs[2]),
            4 => (xs[0] * xs[1], xs[2], xs[3]),
            _ => return Err(TensorError::shape("maxpool2d", format!("input {xs:?}"))),
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::shape(
                "maxpool2d",
                format!("spatial dims must be even, got {h}x{w}"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(lead * oh * ow);
        let mut argmax = Vec::with_capacity(lead * oh * ow);
        let src = tx.data();
        for c in 0..lead {
            let plane = c * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = plane + (2 * oy) * w + 2 * ox;
                    let mut best = src[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = plane + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > best {
                            best = src[idx];
                            best_idx = idx;
                        }
                    }
                    data.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let mut shape = xs.clone();
        let rank = shape.len();
        shape[rank - 2] = oh;
        shape[rank - 1] = ow;
        let needs = self.needs(x);
        Ok(self.out(shape, data, needs, Rule::MaxPool { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let shape = tx.shape().to_vec();
        let needs = self.needs(x);
        self.out(shape, data, needs, Rule::Relu { x })
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu_value(v)).collect();
        let shape = tx.shape().to_vec();
        let needs = self.needs(x);
        self.out(shape, data, needs, Rule::Gelu { x })
    }

    /// Softmax along the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (_, cols) = tx.as_rows();
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(cols) {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let exps: Vec<F> = row.iter().map(|&v| (v - max).exp()).collect();
            let total = exps.iter().fold(F::zero(), |acc, &e| acc + e);
            data.extend(exps.into_iter().map(|e| e / total));
        }
        let shape = tx.shape().to_vec();
        let needs = self.needs(x);
        self.out(shape, data, needs, Rule::Softmax { x, cols })
    }

    /// Per-row normalization over the last axis followed by `gamma*x + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (rows, cols) = tx.as_rows();
        if cols < 2 {
            return Err(TensorError::param(
                "layer_norm",
                format!("normalized width must be >= 2, got {cols}"),
            ));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            let t = self.value(v);
            if t.shape() != [cols] {
                return Err(TensorError::shape(
                    "layer_norm",
                    format!("{name} must be [{cols}], got {:?}", t.shape()),
                ));
            }
        }
        let eps = F::from_f64(LAYER_NORM_EPS);
        let nf = F::from_f64(cols as f64);
        let tg = self.value(gamma).data().to_vec();
        let tb = self.value(beta).data().to_vec();
        let tx = self.value(x);
        let mut data = Vec::with_capacity(tx.numel());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in tx.data().chunks_exact(cols) {
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) / nf;
            let var = row
                .iter()
                .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
                / nf;
            let rstd = (var + eps).sqrt().recip();
            means.push(mean);
            rstds.push(rstd);
            for (j, &v) in row.iter().enumerate() {
                data.push((v - mean) * rstd * tg[j] + tb[j]);
            }
        }
        let shape = tx.shape().to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.out(
            shape,
            data,
            needs,
            Rule::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Inverted dropout. Train mode zeroes each element with probability
    /// `rate` and scales survivors by `1/(1-rate)`; eval mode and rate 0 are
    /// exact identities (no node recorded).
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::param(
                "dropout",
                format!("rate must be in [0, 1), got {rate}"),
            ));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = F::from_f64(1.0 / (1.0 - rate));
        let tx = self.value(x);
        let mask: Vec<F> = (0..tx.numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    F::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = tx
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = tx.shape().to_vec();
        let needs = self.needs(x);
        Ok(self.out(shape, data, needs, Rule::Dropout { x, mask }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        let s = tl.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::shape(
                "cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let (rows, cols) = (s[0], s[1]);
        for &l in labels {
            if l >= cols {
                return Err(TensorError::LabelOutOfRange {
                    label: l,
                    classes: cols,
                });
            }
        }
        let mut probs = Vec::with_capacity(rows * cols);
        let mut total = F::zero();
        for (row, &label) in tl.data().chunks_exact(cols).zip(labels) {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut denom = F::zero();
            for &v in row {
                denom += (v - max).exp();
            }
            let log_denom = denom.ln();
            for &v in row {
                probs.push(((v - max) - log_denom).exp());
            }
            total += log_denom - (row[label] - max);
        }
        let loss = total / F::from_f64(rows as f64);
        let needs = self.needs(logits);
        Ok(self.out(
            vec![1],
            vec![loss],
            needs,
            Rule::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                cols,
            },
        ))
    }

    // ---- backward ----

    /// Reverse-topological gradient accumulation from a scalar loss.
    /// Gradients land on every recorded tensor marked `requires_grad` and
    /// are readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let loss_t = self.value(loss);
        if loss_t.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_t.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for i in (0..self.nodes.len()).rev() {
            let grad = match grads[i].take() {
                Some(g) => g,
                None => {
                    continue;
                }
            };
            self.propagate(i, &grad, &mut grads);
            let node = &mut self.nodes[i];
            if node.value.needs_grad() {
                node.value.set_grad(grad);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, grad: &[F], grads: &mut [Option<Vec<F>>]) {
        // Accumulate `add` into the gradient slot of `target`.
        macro_rules! into {
            ($target:expr, $len:expr, $apply:expr) => {{
                let target: Var = $target;
                if self.needs(target) {
                    let slot =
                        grads[target.0].get_or_insert_with(|| vec![F::zero(); $len]);
                    #[allow(clippy::redundant_closure_call)]
                    ($apply)(slot.as_mut_slice());
                }
            }};
        }

        let node = &self.nodes[i];
        match &node.rule {
            Rule::Leaf => {}
            Rule::Add { a, b } => {
                for &v in [a, b] {
                    into!(v, grad.len(), |s: &mut [F]| add_assign(s, grad));
                }
            }
            Rule::AddRowVec { a, b, cols } => {
                into!(*a, grad.len(), |s: &mut [F]| add_assign(s, grad));
                into!(*b, *cols, |s: &mut [F]| {
                    for row in grad.chunks_exact(*cols) {
                        add_assign(s, row);
                    }
                });
            }
            Rule::Mul { a, b } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                into!(*a, grad.len(), |s: &mut [F]| {
                    for ((sv, &g), &bv) in s.iter_mut().zip(grad).zip(db) {
                        *sv += g * bv;
                    }
                });
                into!(*b, grad.len(), |s: &mut [F]| {
                    for ((sv, &g), &av) in s.iter_mut().zip(grad).zip(da) {
                        *sv += g * av;
                    }
                });
            }
            Rule::Scale { a, c } => {
                into!(*a, grad.len(), |s: &mut [F]| {
                    for (sv, &g) in s.iter_mut().zip(grad) {
                        *sv += g * *c;
                    }
                });
            }
            Rule::Sum { a } => {
                let n = self.value(*a).numel();
                let g = grad[0];
                into!(*a, n, |s: &mut [F]| {
                    for sv in s.iter_mut() {
                        *sv += g;
                    }
                });
            }
            Rule::MatMul { a, b, m, k, n } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                into!(*a, m * k, |s: &mut [F]| {
                    // dA = dC * B^T
                    for i in 0..*m {
                        let gr = &grad[i * n..(i + 1) * n];
                        let srow = &mut s[i * k..(i + 1) * k];
                        for p in 0..*k {
                            let brow = &db[p * n..(p + 1) * n];
                            let mut acc = F::zero();
                            for (&g, &bv) in gr.iter().zip(brow) {
                                acc += g * bv;
                            }
                            srow[p] += acc;
                        }
                    }
                });
                into!(*b, k * n, |s: &mut [F]| {
                    // dB = A^T * dC
                    for i in 0..*m {
                        let gr = &grad[i * n..(i + 1) * n];
                        let arow = &da[i * k..(i + 1) * k];
                        for (p, &av) in arow.iter().enumerate() {
                            let srow = &mut s[p * n..(p + 1) * n];
                            for (sv, &g) in srow.iter_mut().zip(gr) {
                                *sv += av * g;
                            }
                        }
                    }
                });
            }
            Rule::Transpose { a, rows, cols } => {
                into!(*a, rows * cols, |s: &mut [F]| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            s[r * cols + c] += grad[c * rows + r];
                        }
                    }
                });
            }
            Rule::SliceRows { a, start, cols } => {
                let n = self.value(*a).numel();
                into!(*a, n, |s: &mut [F]| {
                    add_assign(&mut s[start * cols..start * cols + grad.len()], grad);
                });
            }
            Rule::SliceCols {
                a,
                start,
                len,
                src_cols,
            } => {
                let n = self.value(*a).numel();
                into!(*a, n, |s: &mut [F]| {
                    for (r, gr) in grad.chunks_exact(*len).enumerate() {
                        add_assign(
                            &mut s[r * src_cols + start..r * src_cols + start + len],
                            gr,
                        );
                    }
                });
            }
            Rule::ConcatRows { parts, cols } => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).shape()[0];
                    let block = &grad[offset * cols..(offset + rows) * cols];
                    into!(p, rows * cols, |s: &mut [F]| add_assign(s, block));
                    offset += rows;
                }
            }
            Rule::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|&(_, w)| w).sum();
                let mut offset = 0;
                for &(p, w) in parts {
                    into!(p, rows * w, |s: &mut [F]| {
                        for r in 0..*rows {
                            add_assign(
                                &mut s[r * w..(r + 1) * w],
                                &grad[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Rule::TileRows { a, reps } => {
                let n = self.value(*a).numel();
                into!(*a, n, |s: &mut [F]| {
                    for rep in 0..*reps {
                        add_assign(s, &grad[rep * n..(rep + 1) * n]);
                    }
                });
            }
            Rule::Reshape { a } => {
                into!(*a, grad.len(), |s: &mut [F]| add_assign(s, grad));
            }
            Rule::Conv2d { x, w, b, dims } => {
                let (dx_src, dw_src) = (self.value(*x).data(), self.value(*w).data());
                into!(*x, dx_src.len(), |s: &mut [F]| {
                    conv2d_backward_input(s, dw_src, grad, dims);
                });
                into!(*w, dw_src.len(), |s: &mut [F]| {
                    conv2d_backward_kernels(s, dx_src, grad, dims);
                });
                into!(*b, dims.c_out, |s: &mut [F]| {
                    let plane = dims.h * dims.w;
                    for bi in 0..dims.batch {
                        for co in 0..dims.c_out {
                            let base = (bi * dims.c_out + co) * plane;
                            for &g in &grad[base..base + plane] {
                                s[co] += g;
                            }
                        }
                    }
                });
            }
            Rule::MaxPool { x, argmax } => {
                let n = self.value(*x).numel();
                into!(*x, n, |s: &mut [F]| {
                    for (&idx, &g) in argmax.iter().zip(grad) {
                        s[idx] += g;
                    }
                });
            }
            Rule::Relu { x } => {
                let src = self.value(*x).data();
                into!(*x, src.len(), |s: &mut [F]| {
                    for ((sv, &g), &v) in s.iter_mut().zip(grad).zip(src) {
                        if v > F::zero() {
                            *sv += g;
                        }
                    }
                });
            }
            Rule::Gelu { x } => {
                let src = self.value(*x).data();
                into!(*x, src.len(), |s: &mut [F]| {
                    for ((sv, &g), &v) in s.iter_mut().zip(grad).zip(src) {
                        *sv += g * gelu_derivative(v);
                    }
                });
            }
            Rule::Softmax { x, cols } => {
                let y = node.value.data();
                let n = y.len();
                into!(*x, n, |s: &mut [F]| {
                    for ((srow, grow), yrow) in s
                        .chunks_exact_mut(*cols)
                        .zip(grad.chunks_exact(*cols))
                        .zip(y.chunks_exact(*cols))
                    {
                        let mut dot = F::zero();
                        for (&g, &yv) in grow.iter().zip(yrow) {
                            dot += g * yv;
                        }
                        for ((sv, &g), &yv) in srow.iter_mut().zip(grow).zip(yrow) {
                            *sv += yv * (g - dot);
                        }
                    }
                });
            }
            Rule::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                mean,
                rstd,
            } => {
                let src = self.value(*x).data();
                let g_data = self.value(*gamma).data();
                let n = src.len();
                let nf = F::from_f64(*cols as f64);
                into!(*beta, *cols, |s: &mut [F]| {
                    for grow in grad.chunks_exact(*cols) {
                        add_assign(s, grow);
                    }
                });
                into!(*gamma, *cols, |s: &mut [F]| {
                    for ((grow, xrow), (&mu, &rs)) in grad
                        .chunks_exact(*cols)
                        .zip(src.chunks_exact(*cols))
                        .zip(mean.iter().zip(rstd))
                    {
                        for ((sv, &g), &xv) in s.iter_mut().zip(grow).zip(xrow) {
                            *sv += g * (xv - mu) * rs;
                        }
                    }
                });
                into!(*x, n, |s: &mut [F]| {
                    for (((srow, grow), xrow), (&mu, &rs)) in s
                        .chunks_exact_mut(*cols)
                        .zip(grad.chunks_exact(*cols))
                        .zip(src.chunks_exact(*cols))
                        .zip(mean.iter().zip(rstd))
                    {
                        // dxhat = g * gamma; dx = rstd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                        let mut sum_dxhat = F::zero();
                        let mut sum_dxhat_xhat = F::zero();
                        for ((&g, &gm), &xv) in grow.iter().zip(g_data).zip(xrow) {
                            let dxhat = g * gm;
                            let xhat = (xv - mu) * rs;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let m1 = sum_dxhat / nf;
                        let m2 = sum_dxhat_xhat / nf;
                        for (((sv, &g), &gm), &xv) in
                            srow.iter_mut().zip(grow).zip(g_data).zip(xrow)
                        {
                            let dxhat = g * gm;
                            let xhat = (xv - mu) * rs;
                            *sv += rs * (dxhat - m1 - xhat * m2);
                        }
                    }
                });
            }
            Rule::Dropout { x, mask } => {
                into!(*x, mask.len(), |s: &mut [F]| {
                    for ((sv, &g), &m) in s.iter_mut().zip(grad).zip(mask) {
                        *sv += g * m;
                    }
                });
            }
            Rule::CrossEntropy {
                logits,
                labels,
                probs,
                cols,
            } => {
                let g = grad[0];
                let inv_batch = F::from_f64(1.0 / labels.len() as f64);
                into!(*logits, probs.len(), |s: &mut [F]| {
                    for ((srow, prow), &label) in s
                        .chunks_exact_mut(*cols)
                        .zip(probs.chunks_exact(*cols))
                        .zip(labels)
                    {
                        for (j, (sv, &p)) in srow.iter_mut().zip(prow).enumerate() {
                            let target = if j == label { F::one() } else { F::zero() };
                            *sv += g * (p - target) * inv_batch;
                        }
                    }
                });
            }
        }
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

fn add_assign<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

fn transpose_raw<F: Scalar>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn gelu_value<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_SQRT_2_OVER_PI);
    let a = F::from_f64(GELU_CUBIC);
    let half = F::from_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (F::one() + inner.tanh())
}

fn gelu_derivative<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_SQRT_2_OVER_PI);
    let a = F::from_f64(GELU_CUBIC);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044715;

fn conv2d_forward<F: Scalar>(x: &[F], w: &[F], bias: &[F], d: &ConvDims) -> Vec<F> {
    let plane = d.h * d.w;
    let mut out = vec![F::zero(); d.batch * d.c_out * plane];
    for bi in 0..d.batch {
        for co in 0..d.c_out {
            let out_base = (bi * d.c_out + co) * plane;
            let b_val = bias[co];
            for v in &mut out[out_base..out_base + plane] {
                *v = b_val;
            }
            for ci in 0..d.c_in {
                let in_base = (bi * d.c_in + ci) * plane;
                let w_base = (co * d.c_in + ci) * 9;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = w[w_base + ky * 3 + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        // output col j reads input col j + kx - 1
                        let (j_lo, j_hi) = kernel_col_range(kx, d.w);
                        for i in 0..d.h {
                            let r = i + ky;
                            if r < 1 || r > d.h {
                                continue;
                            }
                            let in_row = in_base + (r - 1) * d.w;
                            let out_row = out_base + i * d.w;
                            let src = &x[in_row + j_lo + kx - 1..in_row + j_hi + kx - 1];
                            let dst = &mut out[out_row + j_lo..out_row + j_hi];
                            for (o, &v) in dst.iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input<F: Scalar>(dx: &mut [F], w: &[F], dy: &[F], d: &ConvDims) {
    let plane = d.h * d.w;
    for bi in 0..d.batch {
        for co in 0..d.c_out {
            let dy_base = (bi * d.c_out + co) * plane;
            for ci in 0..d.c_in {
                let dx_base = (bi * d.c_in + ci) * plane;
                let w_base = (co * d.c_in + ci) * 9;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let wv = w[w_base + ky * 3 + kx];
                        if wv == F::zero() {
                            continue;
                        }
                        let (j_lo, j_hi) = kernel_col_range(kx, d.w);
                        for i in 0..d.h {
                            let r = i + ky;
                            if r < 1 || r > d.h {
                                continue;
                            }
                            let dx_row = dx_base + (r - 1) * d.w;
                            let dy_row = dy_base + i * d.w;
                            let src = &dy[dy_row + j_lo..dy_row + j_hi];
                            let dst = &mut dx[dx_row + j_lo + kx - 1..dx_row + j_hi + kx - 1];
                            for (o, &g) in dst.iter_mut().zip(src) {
                                *o += wv * g;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_backward_kernels<F: Scalar>(dw: &mut [F], x: &[F], dy: &[F], d: &ConvDims) {
    let plane = d.h * d.w;
    for bi in 0..d.batch {
        for co in 0..d.c_out {
            let dy_base = (bi * d.c_out + co) * plane;
            for ci in 0..d.c_in {
                let in_base = (bi * d.c_in + ci) * plane;
                let w_base = (co * d.c_in + ci) * 9;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let (j_lo, j_hi) = kernel_col_range(kx, d.w);
                        let mut acc = F::zero();
                        for i in 0..d.h {
                            let r = i + ky;
                            if r < 1 || r > d.h {
                                continue;
                            }
                            let in_row = in_base + (r - 1) * d.w;
                            let dy_row = dy_base + i * d.w;
                            let xs = &x[in_row + j_lo + kx - 1..in_row + j_hi + kx - 1];
                            let gs = &dy[dy_row + j_lo..dy_row + j_hi];
                            for (&xv, &g) in xs.iter().zip(gs) {
                                acc += xv * g;
                            }
                        }
                        dw[w_base + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
}

/// Valid output-column range for a kernel column offset under same padding.
fn kernel_col_range(kx: usize, w: usize) -> (usize, usize) {
    let lo = if kx == 0 { 1 } else { 0 };
    let hi = if kx == 2 { w - 1 } else { w };
    (lo, hi)
}

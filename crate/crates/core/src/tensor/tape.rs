use super::{gemm, Layout, Tensor, TensorError};
use crate::par;

/// Variance floor applied inside batch normalization.
pub const BATCHNORM_EPS: f64 = 1e-5;

const BCE_CLAMP: f64 = 1e-7;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Elementwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    /// Negative-side slope in `[0, 1)`.
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(s) => {
                if v >= 0.0 {
                    v
                } else {
                    s * v
                }
            }
            Activation::Sigmoid => sigmoid(v),
        }
    }
}

/// Logistic function kept strictly inside `(0, 1)`: saturated tails are
/// held at the nearest representable values instead of rounding to 0 or 1.
fn sigmoid(v: f64) -> f64 {
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Per-feature batch statistics observed by a training-mode batchnorm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Normalization statistics source for [`Tape::batchnorm`].
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    Train,
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
    fn in_sample(&self) -> usize {
        self.in_ch * self.h * self.w
    }
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        geo: ConvGeometry,
        cols: Vec<f64>,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Reshape {
        x: Var,
    },
    ScaleColumns {
        x: Var,
        factors: Vec<f64>,
    },
    Axpby {
        a: Var,
        b: Var,
        alpha: f64,
        beta: f64,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
    BceLogits {
        x: Var,
        targets: Vec<f64>,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of primitive applications for one forward pass.
///
/// Nodes are appended in evaluation order, so the recording order is a
/// topological order and [`Tape::backward`] visits each node once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Tape::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any reached it) into `param`.
    pub fn accumulate_into(&self, v: Var, param: &mut Tensor) -> Result<(), TensorError> {
        match self.wrt(v) {
            Some(g) => param.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies the tensor's value out as a new tensor (no gradient).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var, TensorError> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a differentiable leaf holding a copy of `t`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), true)
            .expect("tensor invariants hold")
    }

    /// Records a leaf that gradients never flow into.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var, TensorError> {
        self.leaf(shape, data, false)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Var, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        self.push("leaf", shape, data, requires_grad, Op::Leaf)
    }

    /// `out[b, j] = Σ_i x[b, i] · w[i, j] + bias[j]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(shape_err(
                "linear",
                format!("input {xs:?}, weights {ws:?}, bias {bs:?}"),
            ));
        }
        let (batch, fan_in, fan_out) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(batch * fan_out);
        for _ in 0..batch {
            out.extend_from_slice(self.value(b));
        }
        gemm(
            batch,
            fan_in,
            fan_out,
            self.value(x),
            Layout::Normal,
            self.value(w),
            Layout::Normal,
            1.0,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push("linear", vec![batch, fan_out], out, rg, Op::Linear { x, w, b })
    }

    /// Cross-correlation of `[batch, ch, h, w]` input with `[out, ch, kh, kw]`
    /// kernels.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let (xs, ks, bs) = (self.shape(x).to_vec(), self.shape(k).to_vec(), self.shape(b).to_vec());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || bs != [ks[0]] {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?}, kernels {ks:?}, bias {bs:?}"),
            ));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let (h_pad, w_pad) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if ks[2] > h_pad || ks[3] > w_pad {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                detail: format!("kernel {}x{} larger than padded input {h_pad}x{w_pad}", ks[2], ks[3]),
            });
        }
        let geo = ConvGeometry {
            batch: xs[0],
            in_ch: xs[1],
            h: xs[2],
            w: xs[3],
            out_ch: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad: padding,
            oh: (h_pad - ks[2]) / stride + 1,
            ow: (w_pad - ks[3]) / stride + 1,
        };
        let plane = geo.out_plane();
        let patch = geo.patch();
        let mut out = vec![0.0; geo.batch * geo.out_ch * plane];
        let mut cols = vec![0.0; geo.batch * patch * plane];
        {
            let xv = self.value(x);
            let kv = self.value(k);
            let bv = self.value(b);
            par::for_each_chunk_pair_mut(
                &mut out,
                geo.out_ch * plane,
                &mut cols,
                patch * plane,
                |s, out_s, col_s| {
                    let x_s = &xv[s * geo.in_sample()..(s + 1) * geo.in_sample()];
                    im2col(&geo, x_s, col_s);
                    for (o, row) in out_s.chunks_mut(plane).enumerate() {
                        row.fill(bv[o]);
                    }
                    gemm(
                        geo.out_ch,
                        patch,
                        plane,
                        kv,
                        Layout::Normal,
                        col_s,
                        Layout::Normal,
                        1.0,
                        out_s,
                    );
                },
            );
        }
        let rg = self.rg(x) || self.rg(k) || self.rg(b);
        self.push(
            "conv2d",
            vec![geo.batch, geo.out_ch, geo.oh, geo.ow],
            out,
            rg,
            Op::Conv2d { x, k, b, geo, cols },
        )
    }

    /// 2x2 max pooling with stride 2 over `[batch, ch, h, w]`.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[2] < 2 || xs[3] < 2 {
            return Err(shape_err("max_pool2", format!("input {xs:?}")));
        }
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(bc * oh * ow);
        let mut argmax = Vec::with_capacity(bc * oh * ow);
        for p in 0..bc {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            "max_pool2",
            vec![xs[0], xs[1], oh, ow],
            out,
            rg,
            Op::MaxPool2d { x, argmax },
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, TensorError> {
        if let Activation::LeakyRelu(s) = kind {
            if !(0.0..1.0).contains(&s) {
                return Err(TensorError::InvalidArgument {
                    op: "leaky_relu",
                    detail: format!("slope {s} outside [0, 1)"),
                });
            }
        }
        let out: Vec<f64> = self.value(x).iter().map(|&v| kind.apply(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push("activation", shape, out, rg, Op::Activation { x, kind })
    }

    /// Batch normalization over `[batch, features]`.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// update its running averages.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>), TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(shape_err(
                "batchnorm",
                format!(
                    "input {xs:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let (n, f) = (xs[0], xs[1]);
        let xv = self.value(x);
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if n < 2 {
                    return Err(TensorError::InvalidArgument {
                        op: "batchnorm",
                        detail: "training mode needs a batch of at least 2".into(),
                    });
                }
                let mut mean = vec![0.0; f];
                for row in xv.chunks(f) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; f];
                for row in xv.chunks(f) {
                    for j in 0..f {
                        let d = row[j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: n,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != f || running_var.len() != f {
                    return Err(shape_err(
                        "batchnorm",
                        format!("running stats of width {} for {f} features", running_mean.len()),
                    ));
                }
                (running_mean.to_vec(), running_var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let mut xhat = Vec::with_capacity(n * f);
        for row in xv.chunks(f) {
            for j in 0..f {
                xhat.push((row[j] - mean[j]) * inv_std[j]);
            }
        }
        let g = self.value(gamma);
        let bt = self.value(beta);
        let out: Vec<f64> = xhat.iter().enumerate().map(|(i, v)| g[i % f] * v + bt[i % f]).collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let batch_stats = stats.is_some();
        let v = self.push(
            "batchnorm",
            xs,
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )?;
        Ok((v, stats))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push("reshape", shape, value, rg, Op::Reshape { x })
    }

    /// Flattens `[batch, ...]` to `[batch, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.shape(x);
        let batch = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, vec![batch, rest])
    }

    /// Multiplies column `j` of a `[batch, features]` value by `factors[j]`.
    pub fn scale_columns(&mut self, x: Var, factors: Vec<f64>) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[1] != factors.len() {
            return Err(shape_err(
                "scale_columns",
                format!("input {xs:?}, {} factors", factors.len()),
            ));
        }
        let f = xs[1];
        let out: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * factors[i % f])
            .collect();
        let rg = self.rg(x);
        self.push("scale_columns", xs, out, rg, Op::ScaleColumns { x, factors })
    }

    /// `alpha · a + beta · b` for equally shaped values.
    pub fn axpby(&mut self, alpha: f64, a: Var, beta: f64, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "axpby",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| alpha * x + beta * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push("axpby", shape, out, rg, Op::Axpby { a, b, alpha, beta })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.axpby(1.0, a, 1.0, b)
    }

    /// Gathers rows of a `[batch, features]` value.
    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || rows.iter().any(|&r| r >= xs[0]) || rows.is_empty() {
            return Err(shape_err(
                "select_rows",
                format!("input {xs:?}, rows out of range or empty"),
            ));
        }
        let f = xs[1];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * f);
        for &r in &rows {
            out.extend_from_slice(&xv[r * f..(r + 1) * f]);
        }
        let rg = self.rg(x);
        self.push("select_rows", vec![rows.len(), f], out, rg, Op::SelectRows { x, rows })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {ls:?}, {} labels", labels.len()),
            ));
        }
        let (n, c) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange { label: bad, classes: c });
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for (row, &y) in lv.chunks(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_sum = sum.ln();
            loss -= row[y] - max - log_sum;
            probs.extend(row.iter().map(|v| (v - max).exp() / sum));
        }
        loss /= n as f64;
        let rg = self.rg(logits);
        self.push(
            "softmax_cross_entropy",
            vec![1],
            vec![loss],
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mse", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let n = self.value(a).len() as f64;
        let loss = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let rg = self.rg(a) || self.rg(b);
        self.push("mse", vec![1], vec![loss], rg, Op::Mse { a, b })
    }

    /// Mean binary cross-entropy with predictions clamped to `[1e-7, 1-1e-7]`.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[f64]) -> Result<Var, TensorError> {
        let pv = self.value(p);
        if pv.len() != targets.len() || pv.is_empty() {
            return Err(shape_err(
                "binary_cross_entropy",
                format!("{} predictions, {} targets", pv.len(), targets.len()),
            ));
        }
        let n = pv.len() as f64;
        let loss = pv
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.rg(p);
        self.push(
            "binary_cross_entropy",
            vec![1],
            vec![loss],
            rg,
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
        )
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// computed from the logits so the gradient never saturates.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var, TensorError> {
        let xv = self.value(logits);
        if xv.len() != targets.len() || xv.is_empty() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} logits, {} targets", xv.len(), targets.len()),
            ));
        }
        let n = xv.len() as f64;
        let loss = xv
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits);
        self.push(
            "bce_with_logits",
            vec![1],
            vec![loss],
            rg,
            Op::BceLogits {
                x: logits,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push("sum", vec![1], vec![s], rg, Op::Sum { x })
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar { shape: ls.to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (batch, fan_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let fan_out = self.shape(*w)[1];
                if self.rg(*x) {
                    let mut dx = vec![0.0; batch * fan_in];
                    gemm(
                        batch,
                        fan_out,
                        fan_in,
                        g,
                        Layout::Normal,
                        self.value(*w),
                        Layout::Transposed,
                        0.0,
                        &mut dx,
                    );
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; fan_in * fan_out];
                    gemm(
                        fan_in,
                        batch,
                        fan_out,
                        self.value(*x),
                        Layout::Transposed,
                        g,
                        Layout::Normal,
                        0.0,
                        &mut dw,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; fan_out];
                    for row in g.chunks(fan_out) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, k, b, geo, cols } => {
                let plane = geo.out_plane();
                let patch = geo.patch();
                let out_sample = geo.out_ch * plane;
                if self.rg(*x) {
                    let kv = self.value(*k);
                    let mut dx = vec![0.0; geo.batch * geo.in_sample()];
                    par::for_each_chunk_mut(&mut dx, geo.in_sample(), |s, dx_s| {
                        let mut dcol = vec![0.0; patch * plane];
                        gemm(
                            patch,
                            geo.out_ch,
                            plane,
                            kv,
                            Layout::Transposed,
                            &g[s * out_sample..(s + 1) * out_sample],
                            Layout::Normal,
                            0.0,
                            &mut dcol,
                        );
                        col2im(geo, &dcol, dx_s);
                    });
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*k) {
                    let parts = par::map_indexed(geo.batch, |s| {
                        let mut dk = vec![0.0; geo.out_ch * patch];
                        gemm(
                            geo.out_ch,
                            plane,
                            patch,
                            &g[s * out_sample..(s + 1) * out_sample],
                            Layout::Normal,
                            &cols[s * patch * plane..(s + 1) * patch * plane],
                            Layout::Transposed,
                            0.0,
                            &mut dk,
                        );
                        dk
                    });
                    let dk = par::ordered_sum(parts, geo.out_ch * patch);
                    self.accumulate(grads, *k, dk);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; geo.out_ch];
                    for sample in g.chunks(out_sample) {
                        for (o, row) in sample.chunks(plane).enumerate() {
                            db[o] += row.iter().sum::<f64>();
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gv, &idx) in g.iter().zip(argmax) {
                    dx[idx] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Activation { x, kind } => {
                let dx: Vec<f64> = match kind {
                    Activation::Relu => self
                        .value(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v >= 0.0 { gv } else { 0.0 })
                        .collect(),
                    Activation::LeakyRelu(s) => self
                        .value(*x)
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| if v >= 0.0 { gv } else { s * gv })
                        .collect(),
                    Activation::Sigmoid => node.value.iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect(),
                };
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let f = inv_std.len();
                let n = xhat.len() / f;
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                for (gr, xr) in g.chunks(f).zip(xhat.chunks(f)) {
                    for j in 0..f {
                        dbeta[j] += gr[j];
                        dgamma[j] += gr[j] * xr[j];
                    }
                }
                if self.rg(*x) {
                    let gm = self.value(*gamma);
                    let mut dx = vec![0.0; n * f];
                    for (i, d) in dx.iter_mut().enumerate() {
                        let j = i % f;
                        *d = if *batch_stats {
                            gm[j] * inv_std[j] / n as f64 * (n as f64 * g[i] - dbeta[j] - xhat[i] * dgamma[j])
                        } else {
                            g[i] * gm[j] * inv_std[j]
                        };
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::ScaleColumns { x, factors } => {
                let f = factors.len();
                let dx = g.iter().enumerate().map(|(i, v)| v * factors[i % f]).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Axpby { a, b, alpha, beta } => {
                self.accumulate(grads, *a, g.iter().map(|v| alpha * v).collect());
                self.accumulate(grads, *b, g.iter().map(|v| beta * v).collect());
            }
            Op::SelectRows { x, rows } => {
                let f = self.shape(*x)[1];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, gr) in rows.iter().zip(g.chunks(f)) {
                    dx[r * f..(r + 1) * f].iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dl[i * c + y] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::Mse { a, b } => {
                let av = self.value(*a);
                let n = av.len() as f64;
                let da: Vec<f64> = av
                    .iter()
                    .zip(self.value(*b))
                    .map(|(x, y)| 2.0 * (x - y) / n * g[0])
                    .collect();
                if self.rg(*b) {
                    self.accumulate(grads, *b, da.iter().map(|v| -v).collect());
                }
                self.accumulate(grads, *a, da);
            }
            Op::BceLogits { x, targets } => {
                let n = targets.len() as f64;
                let dx = self
                    .value(*x)
                    .iter()
                    .zip(targets)
                    .map(|(&v, &t)| (sigmoid(v) - t) / n * g[0])
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Bce { p, targets } => {
                let n = targets.len() as f64;
                let dp = self
                    .value(*p)
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                            0.0
                        } else {
                            (-t / p + (1.0 - t) / (1.0 - p)) / n * g[0]
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, dp);
            }
            Op::Sum { x } => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
        }
    }
}

fn im2col(geo: &ConvGeometry, x: &[f64], col: &mut [f64]) {
    let plane = geo.out_plane();
    for c in 0..geo.in_ch {
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let row = (c * geo.kh + i) * geo.kw + j;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..geo.oh {
                    let iy = (oy * geo.stride + i) as isize - geo.pad as isize;
                    let line = &mut dst[oy * geo.ow..(oy + 1) * geo.ow];
                    if iy < 0 || iy >= geo.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * geo.h + iy as usize) * geo.w..][..geo.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + j) as isize - geo.pad as isize;
                        *d = if ix < 0 || ix >= geo.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(geo: &ConvGeometry, col: &[f64], dx: &mut [f64]) {
    let plane = geo.out_plane();
    for c in 0..geo.in_ch {
        for i in 0..geo.kh {
            for j in 0..geo.kw {
                let row = (c * geo.kh + i) * geo.kw + j;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..geo.oh {
                    let iy = (oy * geo.stride + i) as isize - geo.pad as isize;
                    if iy < 0 || iy >= geo.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * geo.h + iy as usize) * geo.w..][..geo.w];
                    for ox in 0..geo.ow {
                        let ix = (ox * geo.stride + j) as isize - geo.pad as isize;
                        if ix >= 0 && ix < geo.w as isize {
                            dst[ix as usize] += src[oy * geo.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn leaf(t: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        t.leaf(shape.to_vec(), data.to_vec(), true).unwrap()
    }

    #[test]
    fn linear_identity_and_hand_case() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1, 2], &[1.0, 2.0]);
        let w = leaf(&mut t, &[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut t, &[2], &[0.0, 0.0]);
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0]);

        let x = leaf(&mut t, &[1, 2], &[1.0, 1.0]);
        let w = leaf(&mut t, &[2, 2], &[2.0, 3.0, 4.0, 5.0]);
        let b = leaf(&mut t, &[2], &[1.0, 1.0]);
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.value(y), &[7.0, 9.0]);
    }

    #[test]
    fn linear_rejects_bad_shapes() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1, 3], &[1.0; 3]);
        let w = leaf(&mut t, &[2, 2], &[1.0; 4]);
        let b = leaf(&mut t, &[2], &[0.0; 2]);
        let err = t.linear(x, w, b).unwrap_err();
        assert!(err.to_string().contains("[1, 3]"), "{err}");
    }

    #[test]
    fn conv_of_ones_and_delta_kernel() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1, 1, 3, 3], &[1.0; 9]);
        let k = leaf(&mut t, &[1, 1, 2, 2], &[1.0; 4]);
        let b = leaf(&mut t, &[1], &[0.0]);
        let y = t.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 2, 2]);
        assert_eq!(t.value(y), &[4.0; 4]);

        let data: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let x = leaf(&mut t, &[1, 1, 3, 3], &data);
        let k = leaf(&mut t, &[1, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let y = t.conv2d(x, k, b, 1, 0).unwrap();
        assert_eq!(t.value(y), &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_output_size_and_rejection() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 1, 5, 5], &[0.5; 50]);
        let k = leaf(&mut t, &[3, 1, 3, 3], &[0.1; 27]);
        let b = leaf(&mut t, &[3], &[0.0; 3]);
        let y = t.conv2d(x, k, b, 2, 1).unwrap();
        assert_eq!(t.shape(y), &[2, 3, 3, 3]);
        let big = leaf(&mut t, &[3, 1, 7, 7], &[0.1; 147]);
        assert!(t.conv2d(x, big, b, 1, 0).is_err());
    }

    #[test]
    fn activations_match_definitions() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[-1.0, 3.0, 0.0]);
        let l = t.activation(x, Activation::LeakyRelu(0.2)).unwrap();
        assert_abs_diff_eq!(t.value(l)[0], -0.2, epsilon = 1e-15);
        assert_eq!(t.value(l)[1], 3.0);
        let s = t.activation(x, Activation::Sigmoid).unwrap();
        assert_eq!(t.value(s)[2], 0.5);
        assert!(t.activation(x, Activation::LeakyRelu(1.0)).is_err());
    }

    #[test]
    fn batchnorm_normalizes_and_gamma_zero() {
        let mut t = Tape::new();
        // per-feature mean 5, variance 4
        let x = leaf(&mut t, &[4, 1], &[3.0, 7.0, 3.0, 7.0]);
        let g = leaf(&mut t, &[1], &[1.0]);
        let b = leaf(&mut t, &[1], &[0.0]);
        let (y, stats) = t.batchnorm(x, g, b, NormMode::Train).unwrap();
        let stats = stats.unwrap();
        assert_abs_diff_eq!(stats.mean[0], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(stats.var[0], 4.0, epsilon = 1e-12);
        let v = t.value(y);
        let mean = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
        // eps floor shrinks the variance by 4/(4+1e-5)
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-5);

        let g0 = leaf(&mut t, &[1], &[0.0]);
        let (y0, _) = t.batchnorm(x, g0, b, NormMode::Train).unwrap();
        assert!(t.value(y0).iter().all(|&v| v == 0.0));

        let single = leaf(&mut t, &[1, 1], &[1.0]);
        assert!(t.batchnorm(single, g, b, NormMode::Train).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let mut t = Tape::new();
        let l = leaf(&mut t, &[1, 2], &[0.0, 0.0]);
        let ce = t.softmax_cross_entropy(l, &[0]).unwrap();
        assert_abs_diff_eq!(t.value(ce)[0], std::f64::consts::LN_2, epsilon = 1e-12);
        let l = leaf(&mut t, &[1, 2], &[1000.0, 0.0]);
        let ce = t.softmax_cross_entropy(l, &[0]).unwrap();
        assert!(t.value(ce)[0].abs() < 1e-12);
        assert!(matches!(
            t.softmax_cross_entropy(l, &[2]),
            Err(TensorError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn mse_and_bce_cases() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2], &[1.0, 1.0]);
        let z = leaf(&mut t, &[2], &[0.0, 0.0]);
        let m = t.mse(a, a).unwrap();
        assert_eq!(t.value(m)[0], 0.0);
        let m = t.mse(a, z).unwrap();
        assert_eq!(t.value(m)[0], 1.0);
        let three = leaf(&mut t, &[3], &[0.0; 3]);
        assert!(t.mse(a, three).is_err());

        let p = leaf(&mut t, &[1, 1], &[0.5]);
        let l = t.binary_cross_entropy(p, &[1.0]).unwrap();
        assert_abs_diff_eq!(t.value(l)[0], std::f64::consts::LN_2, epsilon = 1e-12);
        let p = leaf(&mut t, &[1, 1], &[1.0 - 1e-7]);
        let l = t.binary_cross_entropy(p, &[1.0]).unwrap();
        assert_abs_diff_eq!(t.value(l)[0], 1e-7, epsilon = 1e-12);
        let p = leaf(&mut t, &[1, 1], &[1.0]);
        let l = t.binary_cross_entropy(p, &[0.0]).unwrap();
        assert!(t.value(l)[0].is_finite());
    }

    #[test]
    fn backward_sum_and_mse() {
        let mut t = Tape::new();
        let w = leaf(&mut t, &[2, 3], &[0.3; 6]);
        let s = t.sum(w).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(w).unwrap(), &[1.0; 6]);

        let mut t = Tape::new();
        let w = leaf(&mut t, &[1], &[2.0]);
        let z = t.constant(vec![1], vec![0.0]).unwrap();
        let m = t.mse(w, z).unwrap();
        let g = t.backward(m).unwrap();
        assert_eq!(g.wrt(w).unwrap(), &[4.0]);
        assert!(g.wrt(z).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let w = leaf(&mut t, &[2], &[1.0, 2.0]);
        assert!(matches!(t.backward(w), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn gradients_accumulate_across_calls() {
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        for _ in 0..2 {
            let mut t = Tape::new();
            let w = t.param(&p);
            let s = t.sum(w).unwrap();
            let g = t.backward(s).unwrap();
            g.accumulate_into(w, &mut p).unwrap();
        }
        assert_eq!(p.grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[1], &[f64::MAX]);
        assert!(matches!(t.axpby(2.0, x, 2.0, x), Err(TensorError::NonFinite { .. })));
    }
}

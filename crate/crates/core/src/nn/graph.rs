//! Reverse-mode tape over `ndarray` values.
//!
//! A [`Graph`] is rebuilt for every training step. Each op eagerly computes
//! its value on creation and records enough auxiliary state for the backward
//! pass. [`Graph::backward`] walks the tape once in reverse.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Ix2, Ix4, IxDyn, Slice};

use super::conv::{self, ConvSpec};
use super::Arr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct BnAux {
    xhat: Arr,
    invstd: Array1<f32>,
    train: bool,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f32),
    AddScalar(usize, f32),
    Relu(usize),
    LeakyRelu(usize, f32),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    Matmul(usize, usize),
    Transpose(usize),
    SumAll(usize),
    MeanAll(usize),
    SumAxis(usize, usize),
    SoftmaxLast(usize),
    CeRows {
        logits: usize,
        targets: Vec<u32>,
        probs: Array2<f32>,
    },
    BceLogits {
        x: usize,
        y: Arr,
        w: Arr,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    MaxPool {
        x: usize,
        arg: Vec<u32>,
    },
    GlobalAvgPool(usize),
    Upsample2(usize),
    ResizeBilinear(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    SliceAxis {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(usize),
    GatherRows {
        table: usize,
        ids: Vec<u32>,
    },
    Dropout {
        x: usize,
        mask: Arr,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        aux: BnAux,
    },
    StackScalars {
        parts: Vec<usize>,
    },
}

struct Node {
    value: Arr,
    grad: Option<Arr>,
    needs: bool,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Sum `grad` down to `shape` (inverse of implicit broadcasting).
fn unbroadcast(grad: &Arr, shape: &[usize]) -> Arr {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if sd == 1 && gd != 1 {
            let summed = g.sum_axis(Axis(axis));
            g = summed.insert_axis(Axis(axis));
        }
    }
    g
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Arr, needs: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f32 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Arr> {
        self.nodes[v.0].grad.take()
    }

    pub fn leaf(&mut self, value: Arr, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Arr) -> Var {
        self.leaf(value, false)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b).broadcast(self.value(a).raw_dim()).unwrap_or_else(|| {
            panic!(
                "add: cannot broadcast {:?} to {:?}",
                self.value(b).shape(),
                self.value(a).shape()
            )
        });
        let value = self.value(a) + &bv;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b).broadcast(self.value(a).raw_dim()).unwrap();
        let value = self.value(a) - &bv;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b).broadcast(self.value(a).raw_dim()).unwrap();
        let value = self.value(a) * &bv;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b).broadcast(self.value(a).raw_dim()).unwrap();
        let value = self.value(a) / &bv;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, Op::Div(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a) * c;
        let needs = self.needs(a);
        self.push(value, needs, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let value = self.value(a) + c;
        let needs = self.needs(a);
        self.push(value, needs, Op::AddScalar(a.0, c))
    }

    /// 1 - x
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        let needs = self.needs(a);
        self.push(value, needs, Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let value = self.value(a).mapv(|v| if v > 0.0 { v } else { slope * v });
        let needs = self.needs(a);
        self.push(value, needs, Op::LeakyRelu(a.0, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(stable_sigmoid);
        let needs = self.needs(a);
        self.push(value, needs, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f32::tanh);
        let needs = self.needs(a);
        self.push(value, needs, Op::Tanh(a.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        let needs = self.needs(a);
        self.push(value, needs, Op::Softplus(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f32::exp);
        let needs = self.needs(a);
        self.push(value, needs, Op::Exp(a.0))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f32::ln);
        let needs = self.needs(a);
        self.push(value, needs, Op::Log(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f32::sqrt);
        let needs = self.needs(a);
        self.push(value, needs, Op::Sqrt(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v * v);
        let needs = self.needs(a);
        self.push(value, needs, Op::Square(a.0))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.nrows(), "matmul dim mismatch");
        let value = av.dot(&bv).into_dyn();
        let needs = self.needs(a) || self.needs(b);
        self.push(value, needs, Op::Matmul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let value = av.t().as_standard_layout().to_owned().into_dyn();
        let needs = self.needs(a);
        self.push(value, needs, Op::Transpose(a.0))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let needs = self.needs(a);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), needs, Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.len() as f32;
        let needs = self.needs(a);
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), needs, Op::MeanAll(a.0))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let value = self.value(a).sum_axis(Axis(axis));
        let needs = self.needs(a);
        self.push(value, needs, Op::SumAxis(a.0, axis))
    }

    // ---- softmax / losses ----

    /// Row softmax of a 2-d tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let mut out = av.to_owned();
        for mut row in out.rows_mut() {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let needs = self.needs(a);
        self.push(out.into_dyn(), needs, Op::SoftmaxLast(a.0))
    }

    /// Mean cross-entropy of rows against integer targets.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[u32]) -> Var {
        let lv = self
            .value(logits)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        assert_eq!(lv.nrows(), targets.len());
        let mut probs = lv.to_owned();
        let mut loss = 0.0f64;
        for (r, mut row) in probs.rows_mut().into_iter().enumerate() {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0.0f32;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let lse = m + s.ln();
            loss += (lse - lv[[r, targets[r] as usize]]) as f64;
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = ArrayD::from_elem(IxDyn(&[1]), (loss / targets.len() as f64) as f32);
        let needs = self.needs(logits);
        self.push(
            value,
            needs,
            Op::CeRows {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Mean of w * (max(x,0) - x*y + ln(1+exp(-|x|))): binary cross entropy
    /// with logits, stable for very large |x|.
    pub fn bce_with_logits(&mut self, x: Var, y: &Arr, w: &Arr) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), y.shape(), "bce target shape mismatch");
        let wb = w
            .broadcast(xv.raw_dim())
            .expect("bce weight not broadcastable");
        let mut acc = 0.0f64;
        for ((&xi, &yi), &wi) in xv.iter().zip(y.iter()).zip(wb.iter()) {
            let l = xi.max(0.0) - xi * yi + (-xi.abs()).exp().ln_1p();
            acc += (wi * l) as f64;
        }
        let value = ArrayD::from_elem(IxDyn(&[1]), (acc / xv.len() as f64) as f32);
        let needs = self.needs(x);
        self.push(
            value,
            needs,
            Op::BceLogits {
                x: x.0,
                y: y.clone(),
                w: wb.to_owned(),
            },
        )
    }

    // ---- spatial ----

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let spec = ConvSpec { stride, pad };
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let bias = b.map(|bv| {
            self.value(bv)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned()
        });
        let value = conv::conv2d(&xv, &wv, bias.as_ref(), spec).into_dyn();
        let needs = self.needs(x) || self.needs(w) || b.map(|bv| self.needs(bv)).unwrap_or(false);
        self.push(
            value,
            needs,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|v| v.0),
                spec,
            },
        )
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let spec = ConvSpec { stride, pad };
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (value, arg) = conv::maxpool2d(&xv, k, spec);
        let needs = self.needs(x);
        self.push(value.into_dyn(), needs, Op::MaxPool { x: x.0, arg })
    }

    pub fn global_avgpool(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let value = conv::global_avgpool(&xv).into_dyn();
        let needs = self.needs(x);
        self.push(value, needs, Op::GlobalAvgPool(x.0))
    }

    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let value = conv::upsample_nearest2(&xv).into_dyn();
        let needs = self.needs(x);
        self.push(value, needs, Op::Upsample2(x.0))
    }

    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let value = conv::resize_bilinear(&xv, oh, ow).into_dyn();
        let needs = self.needs(x);
        self.push(value, needs, Op::ResizeBilinear(x.0))
    }

    // ---- structure ----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            value.as_standard_layout().to_owned(),
            needs,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
        )
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self
            .value(x)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        let needs = self.needs(x);
        self.push(
            value,
            needs,
            Op::SliceAxis {
                x: x.0,
                axis,
                start,
                len,
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        let needs = self.needs(x);
        self.push(value, needs, Op::Reshape(x.0))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[u32]) -> Var {
        let tv = self
            .value(table)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let cols = tv.ncols();
        let mut out = Array2::<f32>::zeros((ids.len(), cols));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&tv.row(id as usize));
        }
        let needs = self.needs(table);
        self.push(
            out.into_dyn(),
            needs,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
        )
    }

    /// Inverted dropout; `mask` entries are 0 or 1/(1-rate).
    pub fn dropout(&mut self, x: Var, rate: f32, rng: &mut impl rand::Rng) -> Var {
        assert!((0.0..1.0).contains(&rate));
        if rate == 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask = self
            .value(x)
            .mapv(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 });
        let value = self.value(x) * &mask;
        let needs = self.needs(x);
        self.push(value, needs, Op::Dropout { x: x.0, mask })
    }

    /// Batch normalization over (N,*,H,W) per channel axis 1.
    ///
    /// In training mode normalizes with batch statistics and reports them;
    /// in eval mode uses the provided running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Arr, &Arr)>,
    ) -> (Var, Option<(Arr, Arr)>) {
        const EPS: f32 = 1e-5;
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let m = (n * h * w) as f32;

        let (mean, var, train) = match running {
            Some((rm, rv)) => (
                rm.iter().copied().collect::<Array1<f32>>(),
                rv.iter().copied().collect::<Array1<f32>>(),
                false,
            ),
            None => {
                let mut mean = Array1::<f32>::zeros(c);
                let mut var = Array1::<f32>::zeros(c);
                for ci in 0..c {
                    let mut acc = 0.0f64;
                    for i in 0..n {
                        acc += xv
                            .index_axis(Axis(0), i)
                            .index_axis(Axis(0), ci)
                            .iter()
                            .map(|&v| v as f64)
                            .sum::<f64>();
                    }
                    mean[ci] = (acc / m as f64) as f32;
                    let mu = mean[ci];
                    let mut vacc = 0.0f64;
                    for i in 0..n {
                        vacc += xv
                            .index_axis(Axis(0), i)
                            .index_axis(Axis(0), ci)
                            .iter()
                            .map(|&v| {
                                let d = v - mu;
                                (d * d) as f64
                            })
                            .sum::<f64>();
                    }
                    var[ci] = (vacc / m as f64) as f32;
                }
                (mean, var, true)
            }
        };
        let invstd = var.mapv(|v| 1.0 / (v + EPS).sqrt());

        let mut xhat = xv.to_owned();
        for ci in 0..c {
            let mu = mean[ci];
            let is = invstd[ci];
            for i in 0..n {
                xhat.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| (v - mu) * is);
            }
        }
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = xhat.clone();
        for ci in 0..c {
            let ga = gv[[ci]];
            let be = bv[[ci]];
            for i in 0..n {
                out.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| v * ga + be);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let stats = if train {
            Some((mean.clone().into_dyn(), var.clone().into_dyn()))
        } else {
            None
        };
        let v = self.push(
            out.into_dyn(),
            needs,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                aux: BnAux {
                    xhat: xhat.into_dyn(),
                    invstd,
                    train,
                },
            },
        );
        (v, stats)
    }

    /// Assemble scalar vars (shape [1]) into a (rows, cols) matrix, row-major.
    pub fn stack_scalars(&mut self, parts: &[Var], rows: usize, cols: usize) -> Var {
        assert_eq!(parts.len(), rows * cols);
        let mut value = Array2::<f32>::zeros((rows, cols));
        for (i, p) in parts.iter().enumerate() {
            value[[i / cols, i % cols]] = self.scalar(*p);
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            value.into_dyn(),
            needs,
            Op::StackScalars {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        )
    }

    // ---- backward ----

    fn accum(grad: &mut Option<Arr>, delta: Arr) {
        match grad {
            Some(g) => *g += &delta,
            None => *grad = Some(delta),
        }
    }

    fn add_grad(&mut self, idx: usize, delta: Arr) {
        if self.nodes[idx].needs {
            Self::accum(&mut self.nodes[idx].grad, delta);
        }
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&mut self, from: Var) {
        assert_eq!(self.value(from).len(), 1, "backward source must be scalar");
        assert!(self.nodes[from.0].needs, "backward from a constant graph");
        self.nodes[from.0].grad = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));

        for i in (0..=from.0).rev() {
            if !self.nodes[i].needs {
                continue;
            }
            let Some(g) = self.nodes[i].grad.clone() else {
                continue;
            };
            // split borrow: take op out, push grads, put back
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.dispatch(&op, i, &g);
            self.nodes[i].op = op;
        }
    }

    fn dispatch(&mut self, op: &Op, i: usize, g: &Arr) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let bshape = self.nodes[*b].value.shape().to_vec();
                self.add_grad(*a, g.clone());
                self.add_grad(*b, unbroadcast(g, &bshape));
            }
            Op::Sub(a, b) => {
                let bshape = self.nodes[*b].value.shape().to_vec();
                self.add_grad(*a, g.clone());
                self.add_grad(*b, unbroadcast(&(-g.clone()), &bshape));
            }
            Op::Mul(a, b) => {
                let av = self.nodes[*a].value.clone();
                let bv = self.nodes[*b].value.clone();
                let bshape = bv.shape().to_vec();
                let bb = bv.broadcast(av.raw_dim()).unwrap().to_owned();
                self.add_grad(*a, g * &bb);
                self.add_grad(*b, unbroadcast(&(g * &av), &bshape));
            }
            Op::Div(a, b) => {
                let av = self.nodes[*a].value.clone();
                let bv = self.nodes[*b].value.clone();
                let bshape = bv.shape().to_vec();
                let bb = bv.broadcast(av.raw_dim()).unwrap().to_owned();
                self.add_grad(*a, g / &bb);
                let db = -(g * &av) / (&bb * &bb);
                self.add_grad(*b, unbroadcast(&db, &bshape));
            }
            Op::Scale(a, c) => self.add_grad(*a, g * *c),
            Op::AddScalar(a, _) => self.add_grad(*a, g.clone()),
            Op::Relu(a) => {
                let mask = self.nodes[i].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                self.add_grad(*a, g * &mask);
            }
            Op::LeakyRelu(a, s) => {
                let src = self.nodes[*a].value.mapv(|v| if v > 0.0 { 1.0 } else { *s });
                self.add_grad(*a, g * &src);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let d = y * &y.mapv(|v| 1.0 - v);
                self.add_grad(*a, g * &d);
            }
            Op::Tanh(a) => {
                let d = self.nodes[i].value.mapv(|v| 1.0 - v * v);
                self.add_grad(*a, g * &d);
            }
            Op::Softplus(a) => {
                let d = self.nodes[*a].value.mapv(stable_sigmoid);
                self.add_grad(*a, g * &d);
            }
            Op::Exp(a) => {
                let y = self.nodes[i].value.clone();
                self.add_grad(*a, g * &y);
            }
            Op::Log(a) => {
                let d = self.nodes[*a].value.mapv(|v| 1.0 / v);
                self.add_grad(*a, g * &d);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[i].value;
                let d = y.mapv(|v| 0.5 / v.max(1e-12));
                self.add_grad(*a, g * &d);
            }
            Op::Square(a) => {
                let d = self.nodes[*a].value.mapv(|v| 2.0 * v);
                self.add_grad(*a, g * &d);
            }
            Op::Matmul(a, b) => {
                let av = self.nodes[*a].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let bv = self.nodes[*b].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                self.add_grad(*a, gv.dot(&bv.t()).into_dyn());
                self.add_grad(*b, av.t().dot(&gv).into_dyn());
            }
            Op::Transpose(a) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                self.add_grad(*a, gv.t().as_standard_layout().to_owned().into_dyn());
            }
            Op::SumAll(a) => {
                let gs = g[[0]];
                let shape = self.nodes[*a].value.raw_dim();
                self.add_grad(*a, ArrayD::from_elem(shape, gs));
            }
            Op::MeanAll(a) => {
                let n = self.nodes[*a].value.len() as f32;
                let gs = g[[0]] / n;
                let shape = self.nodes[*a].value.raw_dim();
                self.add_grad(*a, ArrayD::from_elem(shape, gs));
            }
            Op::SumAxis(a, axis) => {
                let shape = self.nodes[*a].value.raw_dim();
                let expanded = g.clone().insert_axis(Axis(*axis));
                let bc = expanded.broadcast(shape.clone()).unwrap().to_owned();
                self.add_grad(*a, bc);
            }
            Op::SoftmaxLast(a) => {
                let y = self.nodes[i].value.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = Array2::<f32>::zeros(y.raw_dim());
                for r in 0..y.nrows() {
                    let dot: f32 = gv.row(r).iter().zip(y.row(r).iter()).map(|(a, b)| a * b).sum();
                    for cidx in 0..y.ncols() {
                        dx[[r, cidx]] = (gv[[r, cidx]] - dot) * y[[r, cidx]];
                    }
                }
                self.add_grad(*a, dx.into_dyn());
            }
            Op::CeRows {
                logits,
                targets,
                probs,
            } => {
                let gs = g[[0] ] / targets.len() as f32;
                let mut dx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    dx[[r, t as usize]] -= 1.0;
                }
                self.add_grad(*logits, (dx * gs).into_dyn());
            }
            Op::BceLogits { x, y, w } => {
                let xv = &self.nodes[*x].value;
                let gs = g[[0]] / xv.len() as f32;
                let mut dx = xv.clone();
                for ((d, &yi), &wi) in dx.iter_mut().zip(y.iter()).zip(w.iter()) {
                    *d = wi * (stable_sigmoid(*d) - yi) * gs;
                }
                self.add_grad(*x, dx);
            }
            Op::Conv2d { x, w, b, spec } => {
                let xv = self.nodes[*x].value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let wv = self.nodes[*w].value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let need_dx = self.nodes[*x].needs;
                let (dx, dw, db) = conv::conv2d_backward(&xv.view(), &wv.view(), &gv, *spec, need_dx);
                if let Some(dx) = dx {
                    self.add_grad(*x, dx.into_dyn());
                }
                self.add_grad(*w, dw.into_dyn());
                if let Some(b) = b {
                    self.add_grad(*b, db.into_dyn());
                }
            }
            Op::MaxPool { x, arg } => {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let dim = self.nodes[*x].value.shape().to_vec();
                let dx = conv::maxpool2d_backward(&gv, arg, (dim[0], dim[1], dim[2], dim[3]));
                self.add_grad(*x, dx.into_dyn());
            }
            Op::GlobalAvgPool(x) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let dim = self.nodes[*x].value.shape().to_vec();
                let dx = conv::global_avgpool_backward(&gv, (dim[0], dim[1], dim[2], dim[3]));
                self.add_grad(*x, dx.into_dyn());
            }
            Op::Upsample2(x) => {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                self.add_grad(*x, conv::upsample_nearest2_backward(&gv).into_dyn());
            }
            Op::ResizeBilinear(x) => {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let dim = self.nodes[*x].value.shape().to_vec();
                let dx = conv::resize_bilinear_backward(&gv, (dim[0], dim[1], dim[2], dim[3]));
                self.add_grad(*x, dx.into_dyn());
            }
            Op::Concat { parts, axis } => {
                let mut start = 0usize;
                for p in parts {
                    let len = self.nodes[*p].value.shape()[*axis];
                    let piece = g
                        .slice_axis(Axis(*axis), Slice::from(start..start + len))
                        .as_standard_layout()
                        .to_owned();
                    self.add_grad(*p, piece);
                    start += len;
                }
            }
            Op::SliceAxis {
                x,
                axis,
                start,
                len,
            } => {
                let mut dx = ArrayD::<f32>::zeros(self.nodes[*x].value.raw_dim());
                dx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                    .assign(g);
                self.add_grad(*x, dx);
            }
            Op::Reshape(x) => {
                let shape = self.nodes[*x].value.raw_dim();
                let dx = g
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(shape)
                    .unwrap();
                self.add_grad(*x, dx);
            }
            Op::GatherRows { table, ids } => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let tshape = self.nodes[*table].value.raw_dim();
                let mut dt = Array2::<f32>::zeros((tshape[0], tshape[1]));
                for (r, &id) in ids.iter().enumerate() {
                    let mut row = dt.row_mut(id as usize);
                    row += &gv.row(r);
                }
                self.add_grad(*table, dt.into_dyn());
            }
            Op::Dropout { x, mask } => {
                self.add_grad(*x, g * mask);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                aux,
            } => {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let xhat = aux.xhat.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = gv.dim();
                let m = (n * h * w) as f32;
                let gamma_v = self.nodes[*gamma].value.clone();

                let mut dgamma = Array1::<f32>::zeros(c);
                let mut dbeta = Array1::<f32>::zeros(c);
                for ci in 0..c {
                    let mut sg = 0.0f64;
                    let mut sgx = 0.0f64;
                    for ii in 0..n {
                        let gp = gv.index_axis(Axis(0), ii);
                        let gp = gp.index_axis(Axis(0), ci);
                        let xp = xhat.index_axis(Axis(0), ii);
                        let xp = xp.index_axis(Axis(0), ci);
                        for (a, b) in gp.iter().zip(xp.iter()) {
                            sg += *a as f64;
                            sgx += (*a * *b) as f64;
                        }
                    }
                    dbeta[ci] = sg as f32;
                    dgamma[ci] = sgx as f32;
                }

                if self.nodes[*x].needs {
                    let mut dx = Array4::<f32>::zeros((n, c, h, w));
                    for ci in 0..c {
                        let ga = gamma_v[[ci]];
                        let is = aux.invstd[ci];
                        if aux.train {
                            let sum_dy = dbeta[ci] / m;
                            let sum_dyx = dgamma[ci] / m;
                            for ii in 0..n {
                                let gp = gv.index_axis(Axis(0), ii);
                                let gp = gp.index_axis(Axis(0), ci);
                                let xp = xhat.index_axis(Axis(0), ii);
                                let xp = xp.index_axis(Axis(0), ci);
                                let mut dp = dx.index_axis_mut(Axis(0), ii);
                                let mut dp = dp.index_axis_mut(Axis(0), ci);
                                for ((d, &gy), &xh) in dp.iter_mut().zip(gp.iter()).zip(xp.iter())
                                {
                                    *d = ga * is * (gy - sum_dy - xh * sum_dyx);
                                }
                            }
                        } else {
                            for ii in 0..n {
                                let gp = gv.index_axis(Axis(0), ii);
                                let gp = gp.index_axis(Axis(0), ci);
                                let mut dp = dx.index_axis_mut(Axis(0), ii);
                                let mut dp = dp.index_axis_mut(Axis(0), ci);
                                for (d, &gy) in dp.iter_mut().zip(gp.iter()) {
                                    *d = ga * is * gy;
                                }
                            }
                        }
                    }
                    self.add_grad(*x, dx.into_dyn());
                }
                self.add_grad(*gamma, dgamma.into_dyn());
                self.add_grad(*beta, dbeta.into_dyn());
            }
            Op::StackScalars { parts } => {
                let gs = g.as_standard_layout();
                let flat = gs.as_slice().unwrap();
                for (k, p) in parts.iter().enumerate() {
                    self.add_grad(*p, ArrayD::from_elem(IxDyn(&[1]), flat[k]));
                }
            }
        }
    }
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::super::finite_diff;
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn randn(shape: &[usize], seed: u64) -> Arr {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f32>() * 2.0 - 1.0)
    }

    /// Gradient-check an arbitrary graph construction against finite
    /// differences on one input tensor.
    fn check(
        shape: &[usize],
        seed: u64,
        build: impl Fn(&mut Graph, Var) -> Var,
        tol: f32,
    ) {
        let x0 = randn(shape, seed);
        let mut g = Graph::new();
        let x = g.leaf(x0.clone(), true);
        let out = build(&mut g, x);
        let y = g.mean_all(out);
        g.backward(y);
        let analytic = g.take_grad(x).unwrap();

        let mut f = |a: &Arr| {
            let mut g = Graph::new();
            let x = g.leaf(a.clone(), true);
            let out = build(&mut g, x);
            let y = g.mean_all(out);
            g.scalar(y)
        };
        let numeric = finite_diff(&mut f, &x0, 1e-2);
        for (a, b) in analytic.iter().zip(numeric.iter()) {
            assert!(
                (a - b).abs() <= tol * (1.0 + b.abs()),
                "grad mismatch: analytic {a} vs numeric {b}"
            );
        }
    }

    #[test]
    fn grad_elementwise_chain() {
        check(
            &[3, 4],
            1,
            |g, x| {
                let a = g.tanh(x);
                let b = g.sigmoid(a);
                let c = g.square(b);
                g.scale(c, 3.0)
            },
            1e-2,
        );
    }

    #[test]
    fn grad_matmul() {
        let w0 = randn(&[4, 5], 7);
        check(
            &[3, 4],
            2,
            move |g, x| {
                let w = g.constant(w0.clone());
                g.matmul(x, w)
            },
            1e-2,
        );
    }

    #[test]
    fn grad_softmax_rows() {
        check(&[3, 6], 3, |g, x| g.softmax_rows(x), 1e-2);
    }

    #[test]
    fn grad_conv2d() {
        let w0 = randn(&[3, 2, 3, 3], 11);
        check(
            &[2, 2, 6, 6],
            4,
            move |g, x| {
                let w = g.constant(w0.clone());
                g.conv2d(x, w, None, 1, 1)
            },
            2e-2,
        );
    }

    #[test]
    fn grad_conv2d_weights() {
        let x0 = randn(&[2, 2, 5, 5], 13);
        let w0 = randn(&[4, 2, 3, 3], 17);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let w = g.leaf(w0.clone(), true);
        let y = g.conv2d(x, w, None, 2, 1);
        let l = g.mean_all(y);
        g.backward(l);
        let analytic = g.take_grad(w).unwrap();

        let mut f = |a: &Arr| {
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let w = g.leaf(a.clone(), true);
            let y = g.conv2d(x, w, None, 2, 1);
            let l = g.mean_all(y);
            g.scalar(l)
        };
        let numeric = finite_diff(&mut f, &w0, 1e-2);
        for (a, b) in analytic.iter().zip(numeric.iter()) {
            assert!((a - b).abs() <= 2e-2 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn grad_maxpool_and_pools() {
        check(&[1, 2, 6, 6], 5, |g, x| g.maxpool2d(x, 2, 2, 0), 1e-2);
        check(&[2, 3, 4, 4], 6, |g, x| g.global_avgpool(x), 1e-2);
        check(&[1, 2, 4, 4], 7, |g, x| g.upsample_nearest2(x), 1e-2);
        check(&[1, 2, 5, 5], 8, |g, x| g.resize_bilinear(x, 8, 8), 1e-2);
    }

    #[test]
    fn grad_batchnorm_train() {
        let ga0 = randn(&[3], 21).mapv(|v| v + 1.5);
        let be0 = randn(&[3], 22);
        check(
            &[4, 3, 3, 3],
            9,
            move |g, x| {
                let ga = g.constant(ga0.clone());
                let be = g.constant(be0.clone());
                g.batch_norm(x, ga, be, None).0
            },
            3e-2,
        );
    }

    #[test]
    fn grad_concat_slice_gather() {
        check(
            &[4, 3],
            10,
            |g, x| {
                let a = g.slice_axis(x, 1, 0, 2);
                let b = g.slice_axis(x, 1, 2, 1);
                let c = g.concat(&[a, b], 1);
                g.gather_rows(c, &[3, 1, 1, 0])
            },
            1e-2,
        );
    }

    #[test]
    fn grad_ce_rows() {
        check(&[4, 5], 12, |g, x| g.cross_entropy_rows(x, &[1, 0, 4, 2]), 1e-2);
    }

    #[test]
    fn grad_bce_logits() {
        let y = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let w = ArrayD::from_elem(IxDyn(&[2, 3]), 1.0);
        check(&[2, 3], 13, move |g, x| g.bce_with_logits(x, &y, &w), 1e-2);
    }

    #[test]
    fn grad_stack_scalars_and_transpose() {
        check(
            &[2, 2],
            14,
            |g, x| {
                let t = g.transpose(x);
                let s1 = g.mean_all(t);
                let s2 = g.sum_all(x);
                let s3 = g.mean_all(x);
                let s4 = g.sum_all(t);
                g.stack_scalars(&[s1, s2, s3, s4], 2, 2)
            },
            1e-2,
        );
    }

    #[test]
    fn dropout_scales_kept_values() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[1000]), 1.0), true);
        let d = g.dropout(x, 0.5, &mut rng);
        let mean = g.value(d).mean().unwrap();
        assert!((mean - 1.0).abs() < 0.1, "inverted dropout keeps scale, got {mean}");
    }

    #[test]
    fn parameter_reuse_accumulates() {
        // y = w*2 + w*3 => dy/dw = 5
        let mut g = Graph::new();
        let w = g.leaf(ArrayD::from_elem(IxDyn(&[1]), 1.0), true);
        let a = g.scale(w, 2.0);
        let b = g.scale(w, 3.0);
        let y = g.add(a, b);
        let s = g.sum_all(y);
        g.backward(s);
        assert_eq!(g.take_grad(w).unwrap()[[0]], 5.0);
    }
}

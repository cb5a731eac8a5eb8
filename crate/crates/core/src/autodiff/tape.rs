//! Wengert-list tape and the forward half of every differentiable op.

use std::rc::Rc;

use super::params::{ParamId, ParamStore};
use super::scatter::ScatterPlan;
use super::tensor::{numel, Tensor};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Names of the differentiable operations, used for reports and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Dense,
    Conv2d,
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softmax,
    GruCell,
    ScatterAdd,
    Sum,
    Mean,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Clamp,
    Minimum,
    GaussianLogProb,
    Concat,
    Reshape,
    Slice,
    GatherRows,
    DepthOuter,
    Upsample2x,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 27] = [
        OpKind::Dense,
        OpKind::Conv2d,
        OpKind::Relu,
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Softmax,
        OpKind::GruCell,
        OpKind::ScatterAdd,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Clamp,
        OpKind::Minimum,
        OpKind::GaussianLogProb,
        OpKind::Concat,
        OpKind::Reshape,
        OpKind::Slice,
        OpKind::GatherRows,
        OpKind::DepthOuter,
        OpKind::Upsample2x,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Dense => "dense",
            OpKind::Conv2d => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Softmax => "softmax",
            OpKind::GruCell => "gru_cell",
            OpKind::ScatterAdd => "scatter_add",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Clamp => "clamp",
            OpKind::Minimum => "minimum",
            OpKind::GaussianLogProb => "gaussian_log_prob",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::Slice => "slice",
            OpKind::GatherRows => "gather_rows",
            OpKind::DepthOuter => "depth_outer",
            OpKind::Upsample2x => "upsample2x",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, b: Option<Var>, spec: Conv2dSpec, cols: Vec<T> },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax { x: Var, axis: usize },
    Gru { x: Var, h: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, gates: GruGates<T> },
    ScatterAdd { values: Var, plan: Rc<ScatterPlan> },
    Sum { x: Var, axis: Option<usize> },
    Mean { x: Var, axis: Option<usize> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Clamp { x: Var, lo: T, hi: T },
    Minimum(Var, Var),
    GaussianLogProb { x: Var, mu: Var, log_std: Var },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    DepthOuter { alpha: Var, context: Var },
    Upsample2x(Var),
    CrossEntropy { logits: Var, targets: Rc<[usize]>, weights: Option<Vec<T>>, probs: Vec<T> },
}

#[derive(Debug)]
pub(crate) struct GruGates<T> {
    pub r: Vec<T>,
    pub z: Vec<T>,
    pub n: Vec<T>,
    /// `h·W_hn + b_hn`, needed for the reset-gate gradient.
    pub gh_n: Vec<T>,
}

impl<T> Op<T> {
    pub(crate) fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Dense { .. } => OpKind::Dense,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Gru { .. } => OpKind::GruCell,
            Op::ScatterAdd { .. } => OpKind::ScatterAdd,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Minimum(..) => OpKind::Minimum,
            Op::GaussianLogProb { .. } => OpKind::GaussianLogProb,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Slice { .. } => OpKind::Slice,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::DepthOuter { .. } => OpKind::DepthOuter,
            Op::Upsample2x(_) => OpKind::Upsample2x,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        })
    }
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub needs_grad: bool,
    pub param: Option<ParamId>,
}

/// Records executed operations in topological order.
///
/// Values are kept on the tape; [`Tape::backward`] fills the `grad` of every
/// leaf that requires it.
#[derive(Debug)]
pub struct Tape<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "contract violation: axis {axis} out of range for shape {shape:?}");
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None }
    }

    /// Deliberately corrupts the backward pass of one op kind.
    pub fn with_fault(fault: Option<OpKind>) -> Self {
        Self { nodes: Vec::new(), fault }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value.data
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let needs_grad = t.requires_grad;
        t.grad = None;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Var {
        self.leaf(Tensor::new(shape, data))
    }

    /// Copies a parameter onto the tape as a gradient-tracking leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let src = store.tensor(id);
        let t = Tensor { shape: src.shape.clone(), data: src.data.clone(), requires_grad: true, grad: None };
        let v = self.leaf(t);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Same data as a parameter, but without gradient tracking.
    pub fn frozen_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let src = store.tensor(id);
        self.constant(&src.shape.clone(), src.data.clone())
    }

    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.nodes.iter().filter_map(|n| n.param.map(|p| (p, &n.value)))
    }

    // ---- dense algebra -------------------------------------------------

    /// `x·W + b` with `x: (.., I)`, `W: (I, O)`, `b: (O)`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(
            ws.len() == 2 && !xs.is_empty() && xs[xs.len() - 1] == ws[0],
            "contract violation: dense input {xs:?} incompatible with weight {ws:?}"
        );
        let (i, o) = (ws[0], ws[1]);
        let rows = numel(&xs) / i;
        let mut out = vec![T::zero(); rows * o];
        if let Some(b) = b {
            let bs = self.shape(b);
            assert!(bs == [o], "contract violation: dense bias {bs:?} for output width {o}");
            let bd = self.data(b);
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bd);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(rows, i, o, T::one(), self.data(x), i as isize, 1, self.data(w), o as isize, 1, beta, &mut out, o as isize, 1);
        let mut shape = xs[..xs.len() - 1].to_vec();
        shape.push(o);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(Tensor::new(&shape, out), Op::Dense { x, w, b }, &inputs)
    }

    /// Zero-padded 2D convolution, `x: (B, C, H, W)`, `k: (O, C, kh, kw)`, `b: (O)`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        assert!(
            xs.len() == 4 && ks.len() == 4 && xs[1] == ks[1] && stride > 0,
            "contract violation: conv2d input {xs:?} incompatible with kernel {ks:?} (stride {stride})"
        );
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ks[0], ks[2], ks[3]);
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "contract violation: conv2d kernel {ks:?} larger than padded input {xs:?}"
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let ckk = c * kh * kw;
        let hw = ho * wo;
        let spec = Conv2dSpec { stride, pad };
        let mut cols = vec![T::zero(); batch * ckk * hw];
        let xd = self.data(x);
        for bi in 0..batch {
            im2col(&xd[bi * c * h * w..(bi + 1) * c * h * w], (c, h, w), (kh, kw), spec, (ho, wo), &mut cols[bi * ckk * hw..(bi + 1) * ckk * hw]);
        }
        let mut out = vec![T::zero(); batch * o * hw];
        if let Some(b) = b {
            let bs = self.shape(b);
            assert!(bs == [o], "contract violation: conv2d bias {bs:?} for {o} output channels");
            let bd = self.data(b);
            for bi in 0..batch {
                for oc in 0..o {
                    out[(bi * o + oc) * hw..(bi * o + oc + 1) * hw].fill(bd[oc]);
                }
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        let kd = self.data(k);
        for bi in 0..batch {
            T::gemm(
                o,
                ckk,
                hw,
                T::one(),
                kd,
                ckk as isize,
                1,
                &cols[bi * ckk * hw..(bi + 1) * ckk * hw],
                hw as isize,
                1,
                beta,
                &mut out[bi * o * hw..(bi + 1) * o * hw],
                hw as isize,
                1,
            );
        }
        let mut inputs = vec![x, k];
        inputs.extend(b);
        self.push(Tensor::new(&[batch, o, ho, wo], out), Op::Conv2d { x, k, b, spec, cols }, &inputs)
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(x);
        let out = Tensor::new(&t.shape.clone(), t.data.iter().map(|&v| f(v)).collect());
        self.push(out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), |v| v.ln())
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        assert!(lo <= hi, "contract violation: clamp bounds {lo} > {hi}");
        self.map(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let t = self.value(x);
        let (outer, len, inner) = split_axis(&t.shape, axis);
        let mut out = t.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| out[at(k)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for k in 0..len {
                    let e = (out[at(k)] - m).exp();
                    out[at(k)] = e;
                    s += e;
                }
                for k in 0..len {
                    out[at(k)] /= s;
                }
            }
        }
        let shape = t.shape.clone();
        self.push(Tensor::new(&shape, out), Op::Softmax { x, axis }, &[x])
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, name: &str, f: impl Fn(T, T) -> T) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.shape == tb.shape, "contract violation: {name} shapes {:?} and {:?} differ", ta.shape, tb.shape);
        let out = Tensor::new(&ta.shape.clone(), ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect());
        self.push(out, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Minimum(a, b), "minimum", |x, y| if y < x { y } else { x })
    }

    /// Elementwise Normal log-density of `x` under `(mu, exp(log_std))`.
    pub fn gaussian_log_prob(&mut self, x: Var, mu: Var, log_std: Var) -> Var {
        let (tx, tm, ts) = (self.value(x), self.value(mu), self.value(log_std));
        assert!(
            tx.shape == tm.shape && tx.shape == ts.shape,
            "contract violation: gaussian_log_prob shapes {:?}, {:?}, {:?}",
            tx.shape,
            tm.shape,
            ts.shape
        );
        let half_ln_2pi = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln());
        let data = (0..tx.data.len())
            .map(|i| {
                let z = (tx.data[i] - tm.data[i]) / ts.data[i].exp();
                -T::lit(0.5) * z * z - ts.data[i] - half_ln_2pi
            })
            .collect();
        let shape = tx.shape.clone();
        self.push(Tensor::new(&shape, data), Op::GaussianLogProb { x, mu, log_std }, &[x, mu, log_std])
    }

    // ---- reductions and reshaping ---------------------------------------

    /// Sum over one axis, or everything when `axis` is `None` (scalar result).
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Var {
        let out = reduce_sum(self.value(x), axis);
        self.push(out, Op::Sum { x, axis }, &[x])
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Var {
        let t = self.value(x);
        let count = match axis {
            None => t.data.len(),
            Some(a) => split_axis(&t.shape, a).1,
        };
        let mut out = reduce_sum(t, axis);
        let inv = T::one() / T::lit(count as f64);
        out.data.iter_mut().for_each(|v| *v *= inv);
        self.push(out, Op::Mean { x, axis }, &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Var {
        assert!(!xs.is_empty(), "contract violation: concat of nothing");
        let first = self.shape(xs[0]).to_vec();
        let (outer, _, inner) = split_axis(&first, axis);
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len() && s.iter().enumerate().all(|(d, &n)| d == axis || n == first[d]);
            assert!(ok, "contract violation: concat along {axis} of {first:?} and {s:?}");
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                out.extend_from_slice(&self.data(v)[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::new(&shape, out), Op::Concat { xs: xs.to_vec(), axis }, xs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x);
        assert_eq!(numel(shape), t.data.len(), "contract violation: reshape {:?} to {shape:?}", t.shape);
        let out = Tensor::new(shape, t.data.clone());
        self.push(out, Op::Reshape(x), &[x])
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = split_axis(&shape, axis);
        assert!(start + len <= full, "contract violation: slice {start}..{} of axis {axis} in {shape:?}", start + len);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        self.push(Tensor::new(&s, out), Op::Slice { x, axis, start }, &[x])
    }

    /// Selects rows (entries of axis 0), repeats allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(!shape.is_empty(), "contract violation: gather_rows on a scalar");
        let width = numel(&shape[1..]);
        let d = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            assert!(r < shape[0], "contract violation: row {r} out of range for {shape:?}");
            out.extend_from_slice(&d[r * width..(r + 1) * width]);
        }
        let mut s = shape;
        s[0] = rows.len();
        self.push(Tensor::new(&s, out), Op::GatherRows { x, rows: rows.to_vec() }, &[x])
    }

    // ---- model-specific ops --------------------------------------------

    /// One GRU step; `x: (B, I)`, `h: (B, H)`, `w_ih: (I, 3H)`, `w_hh: (H, 3H)`,
    /// biases `(3H)`. Gate order within the `3H` axis is reset, update, candidate.
    #[allow(clippy::too_many_arguments)]
    pub fn gru_cell(&mut self, x: Var, h: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var) -> Var {
        let (xs, hs) = (self.shape(x).to_vec(), self.shape(h).to_vec());
        let (wis, whs) = (self.shape(w_ih).to_vec(), self.shape(w_hh).to_vec());
        assert!(
            xs.len() == 2 && hs.len() == 2 && xs[0] == hs[0],
            "contract violation: gru_cell input {xs:?} and hidden {hs:?}"
        );
        let (batch, hid) = (hs[0], hs[1]);
        assert!(
            wis == [xs[1], 3 * hid] && whs == [hid, 3 * hid],
            "contract violation: gru_cell weights {wis:?}, {whs:?} for input {xs:?}, hidden {hs:?}"
        );
        assert!(
            self.shape(b_ih) == [3 * hid] && self.shape(b_hh) == [3 * hid],
            "contract violation: gru_cell biases {:?}, {:?} for hidden {hid}",
            self.shape(b_ih),
            self.shape(b_hh)
        );
        let g3 = 3 * hid;
        let mut gi = vec![T::zero(); batch * g3];
        let mut gh = vec![T::zero(); batch * g3];
        for row in gi.chunks_mut(g3) {
            row.copy_from_slice(self.data(b_ih));
        }
        for row in gh.chunks_mut(g3) {
            row.copy_from_slice(self.data(b_hh));
        }
        T::gemm(batch, xs[1], g3, T::one(), self.data(x), xs[1] as isize, 1, self.data(w_ih), g3 as isize, 1, T::one(), &mut gi, g3 as isize, 1);
        T::gemm(batch, hid, g3, T::one(), self.data(h), hid as isize, 1, self.data(w_hh), g3 as isize, 1, T::one(), &mut gh, g3 as isize, 1);
        let hd = self.data(h);
        let n_el = batch * hid;
        let (mut r, mut z, mut n, mut gh_n, mut out) =
            (vec![T::zero(); n_el], vec![T::zero(); n_el], vec![T::zero(); n_el], vec![T::zero(); n_el], vec![T::zero(); n_el]);
        for b in 0..batch {
            for j in 0..hid {
                let e = b * hid + j;
                let base = b * g3;
                r[e] = sigmoid(gi[base + j] + gh[base + j]);
                z[e] = sigmoid(gi[base + hid + j] + gh[base + hid + j]);
                gh_n[e] = gh[base + 2 * hid + j];
                n[e] = (gi[base + 2 * hid + j] + r[e] * gh_n[e]).tanh();
                out[e] = (T::one() - z[e]) * n[e] + z[e] * hd[e];
            }
        }
        let gates = GruGates { r, z, n, gh_n };
        self.push(
            Tensor::new(&[batch, hid], out),
            Op::Gru { x, h, w_ih, w_hh, b_ih, b_hh, gates },
            &[x, h, w_ih, w_hh, b_ih, b_hh],
        )
    }

    /// Sum-pools point features `values: (P, C)` into the grid described by `plan`.
    pub fn scatter_add(&mut self, values: Var, plan: Rc<ScatterPlan>) -> Var {
        let out = plan.forward(self.value(values));
        self.push(out, Op::ScatterAdd { values, plan }, &[values])
    }

    /// Outer product of depth weights `alpha: (N, D, h, w)` with per-cell
    /// context `context: (N, C, h, w)`, giving `(N, D, h, w, C)`.
    pub fn depth_outer(&mut self, alpha: Var, context: Var) -> Var {
        let (sa, sc) = (self.shape(alpha).to_vec(), self.shape(context).to_vec());
        assert!(
            sa.len() == 4 && sc.len() == 4 && sa[0] == sc[0] && sa[2..] == sc[2..],
            "contract violation: depth_outer alpha {sa:?} with context {sc:?}"
        );
        let (nb, nd, nc, cells) = (sa[0], sa[1], sc[1], sa[2] * sa[3]);
        let (ad, cd) = (self.data(alpha), self.data(context));
        let mut out = vec![T::zero(); nb * nd * cells * nc];
        for b in 0..nb {
            for d in 0..nd {
                for cell in 0..cells {
                    let a = ad[(b * nd + d) * cells + cell];
                    let base = ((b * nd + d) * cells + cell) * nc;
                    for c in 0..nc {
                        out[base + c] = a * cd[(b * nc + c) * cells + cell];
                    }
                }
            }
        }
        self.push(Tensor::new(&[nb, nd, sa[2], sa[3], nc], out), Op::DepthOuter { alpha, context }, &[alpha, context])
    }

    /// Nearest-neighbour 2x upsampling of `(B, C, H, W)`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 4, "contract violation: upsample2x expects (B, C, H, W), got {s:?}");
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let d = self.data(x);
        let mut out = vec![T::zero(); planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xx] = d[(p * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out), Op::Upsample2x(x), &[x])
    }

    /// Weighted mean cross-entropy of `logits: (B, K, ..)` against class
    /// indices laid out as `(B, ..)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<[usize]>, weights: Option<&[T]>) -> Var {
        let s = self.shape(logits).to_vec();
        assert!(s.len() >= 2, "contract violation: cross_entropy logits {s:?}");
        let (nb, k, inner) = (s[0], s[1], numel(&s[2..]));
        assert_eq!(targets.len(), nb * inner, "contract violation: {} targets for logits {s:?}", targets.len());
        if let Some(w) = weights {
            assert_eq!(w.len(), k, "contract violation: {} class weights for {k} classes", w.len());
        }
        let d = self.data(logits);
        let mut probs = vec![T::zero(); d.len()];
        let (mut loss, mut norm) = (T::zero(), T::zero());
        for b in 0..nb {
            for i in 0..inner {
                let at = |c: usize| (b * k + c) * inner + i;
                let m = (0..k).map(|c| d[at(c)]).fold(T::neg_infinity(), T::max);
                let lse = (0..k).map(|c| (d[at(c)] - m).exp()).sum::<T>().ln() + m;
                for c in 0..k {
                    probs[at(c)] = (d[at(c)] - lse).exp();
                }
                let t = targets[b * inner + i];
                assert!(t < k, "contract violation: target class {t} with {k} classes");
                let wt = weights.map_or(T::one(), |w| w[t]);
                loss += wt * (lse - d[at(t)]);
                norm += wt;
            }
        }
        let value = if norm > T::zero() { loss / norm } else { T::zero() };
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy { logits, targets, weights: weights.map(<[T]>::to_vec), probs },
            &[logits],
        )
    }
}

fn reduce_sum<T: Scalar>(t: &Tensor<T>, axis: Option<usize>) -> Tensor<T> {
    match axis {
        None => Tensor::scalar(t.data.iter().copied().sum()),
        Some(a) => {
            let (outer, len, inner) = split_axis(&t.shape, a);
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for k in 0..len {
                    let src = &t.data[(o * len + k) * inner..(o * len + k + 1) * inner];
                    for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *dst += v;
                    }
                }
            }
            let mut shape = t.shape.clone();
            shape.remove(a);
            Tensor::new(&shape, out)
        }
    }
}

pub(crate) fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    spec: Conv2dSpec,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    spec: Conv2dSpec,
    (ho, wo): (usize, usize),
    dx: &mut [T],
) {
    let hw = ho * wo;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

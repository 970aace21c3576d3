//! Append-only autodiff tape.
//!
//! Every op pushes one node whose parents already live on the tape, so node
//! ids are a topological order and the backward pass is a single reverse
//! sweep. Values are owned standard-layout `ArrayD`; scalars are 0-d arrays.

use ndarray::{concatenate, Array1, Array2, ArrayD, Axis, Dimension, Ix2, Ix3, Ix4, IxDyn};

use super::conv::{col2im, conv_out_size, im2col};
use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

enum Op<T: Scalar> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Neg(TensorId),
    Scale(TensorId, T),
    Matmul(TensorId, TensorId),
    BatchMatmul(TensorId, TensorId),
    GatherRows(TensorId, Vec<usize>),
    SelectCols(TensorId, Vec<usize>),
    AddRow(TensorId, TensorId),
    AddBias4(TensorId, TensorId),
    AddChan(TensorId, TensorId),
    Relu(TensorId),
    Silu(TensorId),
    SoftmaxLast(TensorId),
    LogSoftmaxLast(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: ArrayD<T>,
        rstd: ArrayD<T>,
    },
    GroupNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        groups: usize,
        xhat: ArrayD<T>,
        rstd: Array2<T>,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        stride: usize,
        pad: usize,
        cols: Vec<Array2<T>>,
    },
    Upsample2x(TensorId),
    Reshape(TensorId),
    Transpose(TensorId, Vec<usize>),
    Concat(usize, Vec<TensorId>),
    MeanAll(TensorId),
    MeanLast(TensorId),
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    grad: Option<ArrayD<T>>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    /// Inference tapes skip the saved context that only backward needs
    /// (im2col buffers, normalization caches).
    recording: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), recording: true }
    }

    /// A tape that can run forward but never backward. Saves the large
    /// per-op caches, which matters when sampling hundreds of steps.
    pub fn new_inference() -> Self {
        Tape { nodes: Vec::new(), recording: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&ArrayD<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient of a parameter after `backward`, zeros if it never
    /// received any flow.
    pub fn grad_or_zeros(&self, id: TensorId) -> ArrayD<T> {
        let n = &self.nodes[id.0];
        n.grad.clone().unwrap_or_else(|| ArrayD::zeros(n.value.raw_dim()))
    }

    pub fn scalar(&self, id: TensorId) -> T {
        let v = self.value(id);
        assert_eq!(v.ndim(), 0, "expected 0-d tensor");
        v[[]]
    }

    fn push(&mut self, value: ArrayD<T>, needs_grad: bool, op: Op<T>) -> TensorId {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    fn wants(&self, ids: &[TensorId]) -> bool {
        self.recording && ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    pub fn param(&mut self, value: ArrayD<T>) -> TensorId {
        let rec = self.recording;
        self.push(value, rec, Op::Leaf)
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> TensorId {
        self.push(value, false, Op::Leaf)
    }

    pub fn scalar_const(&mut self, x: T) -> TensorId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        let ng = self.wants(&[a, b]);
        self.push(v, ng, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        let ng = self.wants(&[a, b]);
        self.push(v, ng, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        let ng = self.wants(&[a, b]);
        self.push(v, ng, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| -x);
        let ng = self.wants(&[a]);
        self.push(v, ng, Op::Neg(a))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let f = T::from_f64(factor);
        let v = self.value(a).mapv(|x| x * f);
        let ng = self.wants(&[a]);
        self.push(v, ng, Op::Scale(a, f))
    }

    /// `[m, k] @ [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("matmul lhs not 2-d");
        let bv = self.value(b).view().into_dimensionality::<Ix2>().expect("matmul rhs not 2-d");
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
        let v = av.dot(&bv).into_dyn();
        let ng = self.wants(&[a, b]);
        self.push(v, ng, Op::Matmul(a, b))
    }

    /// `[b, m, k] @ [b, k, n] -> [b, m, n]`
    pub fn batch_matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let av = self.value(a).view().into_dimensionality::<Ix3>().expect("bmm lhs not 3-d");
        let bv = self.value(b).view().into_dimensionality::<Ix3>().expect("bmm rhs not 3-d");
        let (nb, m, k) = av.dim();
        let (nb2, k2, n) = bv.dim();
        assert_eq!(nb, nb2, "bmm batch mismatch");
        assert_eq!(k, k2, "bmm inner dim mismatch");
        let mut out = ndarray::Array3::<T>::zeros((nb, m, n));
        for i in 0..nb {
            let y = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&y);
        }
        let ng = self.wants(&[a, b]);
        self.push(out.into_dyn(), ng, Op::BatchMatmul(a, b))
    }

    /// Row lookup `[v, d] x idx[n] -> [n, d]`; duplicate indices accumulate
    /// in the backward scatter. This is both the embedding lookup and the
    /// row-subset selection.
    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> TensorId {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().expect("gather_rows input not 2-d");
        let mut out = Array2::<T>::zeros((idx.len(), xv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < xv.nrows(), "gather_rows index out of range");
            out.row_mut(r).assign(&xv.row(i));
        }
        let ng = self.wants(&[x]);
        self.push(out.into_dyn(), ng, Op::GatherRows(x, idx.to_vec()))
    }

    /// Per-row column pick `[m, n] x idx[m] -> [m]`.
    pub fn select_cols(&mut self, x: TensorId, idx: &[usize]) -> TensorId {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().expect("select_cols input not 2-d");
        assert_eq!(xv.nrows(), idx.len(), "select_cols index count mismatch");
        let mut out = Array1::<T>::zeros(idx.len());
        for (r, &c) in idx.iter().enumerate() {
            assert!(c < xv.ncols(), "select_cols index out of range");
            out[r] = xv[[r, c]];
        }
        let ng = self.wants(&[x]);
        self.push(out.into_dyn(), ng, Op::SelectCols(x, idx.to_vec()))
    }

    /// `[m, n] + [n]`, the linear-layer bias broadcast.
    pub fn add_row(&mut self, x: TensorId, bias: TensorId) -> TensorId {
        let xv = self.value(x).view().into_dimensionality::<Ix2>().expect("add_row input not 2-d");
        let bv = self.value(bias).view().into_dimensionality::<ndarray::Ix1>().expect("add_row bias not 1-d");
        assert_eq!(xv.ncols(), bv.len(), "add_row width mismatch");
        let v = (&xv + &bv).into_dyn();
        let ng = self.wants(&[x, bias]);
        self.push(v, ng, Op::AddRow(x, bias))
    }

    /// `[b, c, h, w] + [c]`, the conv bias broadcast.
    pub fn add_bias4(&mut self, x: TensorId, bias: TensorId) -> TensorId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("add_bias4 input not 4-d");
        let bv = self.value(bias).view().into_dimensionality::<ndarray::Ix1>().expect("add_bias4 bias not 1-d");
        assert_eq!(xv.dim().1, bv.len(), "add_bias4 channel mismatch");
        let mut out = xv.to_owned();
        for c in 0..bv.len() {
            out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bv[c]);
        }
        let ng = self.wants(&[x, bias]);
        self.push(out.into_dyn(), ng, Op::AddBias4(x, bias))
    }

    /// `[b, c, h, w] + [b, c]`, the per-sample channel shift used to inject
    /// timestep features into conv blocks.
    pub fn add_chan(&mut self, x: TensorId, shift: TensorId) -> TensorId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("add_chan input not 4-d");
        let sv = self.value(shift).view().into_dimensionality::<Ix2>().expect("add_chan shift not 2-d");
        let (b, c, _, _) = xv.dim();
        assert_eq!((b, c), sv.dim(), "add_chan shape mismatch");
        let mut out = xv.to_owned();
        for bi in 0..b {
            for ci in 0..c {
                let s = sv[[bi, ci]];
                out.index_axis_mut(Axis(0), bi).index_axis_mut(Axis(0), ci).mapv_inplace(|v| v + s);
            }
        }
        let ng = self.wants(&[x, shift]);
        self.push(out.into_dyn(), ng, Op::AddChan(x, shift))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.wants(&[a]);
        self.push(v, ng, Op::Relu(a))
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        let ng = self.wants(&[a]);
        self.push(v, ng, Op::Silu(a))
    }

    pub fn softmax_last(&mut self, a: TensorId) -> TensorId {
        let x = self.value(a);
        let mut v = x.clone();
        let last = Axis(x.ndim() - 1);
        for mut lane in v.lanes_mut(last) {
            let max = lane.iter().cloned().fold(T::neg_infinity(), T::max);
            lane.mapv_inplace(|e| (e - max).exp());
            let sum = lane.sum();
            lane.mapv_inplace(|e| e / sum);
        }
        let ng = self.wants(&[a]);
        self.push(v, ng, Op::SoftmaxLast(a))
    }

    pub fn log_softmax_last(&mut self, a: TensorId) -> TensorId {
        let x = self.value(a);
        let mut v = x.clone();
        let last = Axis(x.ndim() - 1);
        for mut lane in v.lanes_mut(last) {
            let max = lane.iter().cloned().fold(T::neg_infinity(), T::max);
            let logsum = lane.iter().map(|&e| (e - max).exp()).fold(T::zero(), |a, b| a + b).ln() + max;
            lane.mapv_inplace(|e| e - logsum);
        }
        let ng = self.wants(&[a]);
        self.push(v, ng, Op::LogSoftmaxLast(a))
    }

    /// Normalize over the last axis, then scale/shift by per-feature
    /// `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: f64) -> TensorId {
        let xv = self.value(x).clone();
        let d = *xv.shape().last().expect("layer_norm on 0-d");
        let gv = self.value(gamma).view().into_dimensionality::<ndarray::Ix1>().expect("gamma not 1-d");
        let bv = self.value(beta).view().into_dimensionality::<ndarray::Ix1>().expect("beta not 1-d");
        assert_eq!(gv.len(), d, "layer_norm gamma width mismatch");
        assert_eq!(bv.len(), d, "layer_norm beta width mismatch");
        let eps = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let last = Axis(xv.ndim() - 1);

        let mut xhat = xv.clone();
        let mut lane_shape: Vec<usize> = xv.shape().to_vec();
        lane_shape.pop();
        let mut rstd = ArrayD::<T>::zeros(IxDyn(&lane_shape));
        for (mut lane, r) in xhat.lanes_mut(last).into_iter().zip(rstd.iter_mut()) {
            let mean = lane.sum() / dn;
            let var = lane.iter().map(|&e| (e - mean) * (e - mean)).fold(T::zero(), |a, b| a + b) / dn;
            let rs = T::one() / (var + eps).sqrt();
            lane.mapv_inplace(|e| (e - mean) * rs);
            *r = rs;
        }
        let mut out = xhat.clone();
        for mut lane in out.lanes_mut(last) {
            for (e, (&g, &b)) in lane.iter_mut().zip(gv.iter().zip(bv.iter())) {
                *e = *e * g + b;
            }
        }
        let ng = self.wants(&[x, gamma, beta]);
        let (xhat, rstd) = if self.recording {
            (xhat, rstd)
        } else {
            (ArrayD::zeros(IxDyn(&[0])), ArrayD::zeros(IxDyn(&[0])))
        };
        self.push(out, ng, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Normalize `[b, c, h, w]` over channel groups, then scale/shift by
    /// per-channel `gamma`/`beta`. `c` must divide evenly into `groups`.
    pub fn group_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, groups: usize, eps: f64) -> TensorId {
        // Upstream ops (concat on an interior axis, transposes) may hand
        // over non-contiguous values; normalize the layout first.
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("group_norm input not 4-d")
            .as_standard_layout()
            .into_owned();
        let (b, c, h, w) = xv.dim();
        assert!(groups > 0 && c % groups == 0, "group_norm channel/group mismatch");
        let gv = self.value(gamma).view().into_dimensionality::<ndarray::Ix1>().expect("gamma not 1-d");
        let bv = self.value(beta).view().into_dimensionality::<ndarray::Ix1>().expect("beta not 1-d");
        assert_eq!(gv.len(), c, "group_norm gamma width mismatch");
        let eps = T::from_f64(eps);
        let lane = c / groups * h * w;
        let ln = T::from_f64(lane as f64);

        let mut xhat = xv.into_shape_with_order((b, groups, lane)).unwrap();
        let mut rstd = Array2::<T>::zeros((b, groups));
        for bi in 0..b {
            for gi in 0..groups {
                let mut sl = xhat.index_axis_mut(Axis(0), bi);
                let mut sl = sl.index_axis_mut(Axis(0), gi);
                let mean = sl.sum() / ln;
                let var = sl.iter().map(|&e| (e - mean) * (e - mean)).fold(T::zero(), |a, b| a + b) / ln;
                let rs = T::one() / (var + eps).sqrt();
                sl.mapv_inplace(|e| (e - mean) * rs);
                rstd[[bi, gi]] = rs;
            }
        }
        let xhat = xhat.into_shape_with_order((b, c, h, w)).unwrap();
        let mut out = xhat.clone();
        for ci in 0..c {
            let (g, be) = (gv[ci], bv[ci]);
            out.index_axis_mut(Axis(1), ci).mapv_inplace(|e| e * g + be);
        }
        let ng = self.wants(&[x, gamma, beta]);
        let (xhat, rstd) = if self.recording {
            (xhat.into_dyn(), rstd)
        } else {
            (ArrayD::zeros(IxDyn(&[0])), Array2::zeros((0, 0)))
        };
        self.push(out.into_dyn(), ng, Op::GroupNorm { x, gamma, beta, groups, xhat, rstd })
    }

    /// `x: [b, c_in, h, w]`, `w: [c_out, c_in, kh, kw]`, zero padding.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> TensorId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().expect("conv2d input not 4-d");
        let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("conv2d weight not 4-d");
        let (b, c_in, h, wd) = xv.dim();
        let (c_out, c_in2, kh, kw) = wv.dim();
        assert_eq!(c_in, c_in2, "conv2d channel mismatch");
        let ho = conv_out_size(h, kh, stride, pad);
        let wo = conv_out_size(wd, kw, stride, pad);
        let w2 = wv.into_shape_with_order((c_out, c_in * kh * kw)).unwrap();

        let mut out = ndarray::Array4::<T>::zeros((b, c_out, ho, wo));
        let mut cols = Vec::with_capacity(if self.recording { b } else { 0 });
        for bi in 0..b {
            let col = im2col(&xv.index_axis(Axis(0), bi), kh, kw, stride, pad);
            let y = w2.dot(&col);
            out.index_axis_mut(Axis(0), bi)
                .assign(&y.into_shape_with_order((c_out, ho, wo)).unwrap());
            if self.recording {
                cols.push(col);
            }
        }
        let ng = self.wants(&[x, w]);
        self.push(out.into_dyn(), ng, Op::Conv2d { x, w, stride, pad, cols })
    }

    /// Nearest-neighbor 2x upsample of `[b, c, h, w]`.
    pub fn upsample2x(&mut self, a: TensorId) -> TensorId {
        let xv = self.value(a).view().into_dimensionality::<Ix4>().expect("upsample2x input not 4-d");
        let (b, c, h, w) = xv.dim();
        let mut out = ndarray::Array4::<T>::zeros((b, c, h * 2, w * 2));
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = xv[[bi, ci, y, x]];
                        out[[bi, ci, 2 * y, 2 * x]] = v;
                        out[[bi, ci, 2 * y, 2 * x + 1]] = v;
                        out[[bi, ci, 2 * y + 1, 2 * x]] = v;
                        out[[bi, ci, 2 * y + 1, 2 * x + 1]] = v;
                    }
                }
            }
        }
        let ng = self.wants(&[a]);
        self.push(out.into_dyn(), ng, Op::Upsample2x(a))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> TensorId {
        let v = self
            .value(a)
            .to_shape(IxDyn(shape))
            .expect("reshape element count mismatch")
            .to_owned();
        let ng = self.wants(&[a]);
        self.push(v, ng, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: TensorId, perm: &[usize]) -> TensorId {
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        let ng = self.wants(&[a]);
        self.push(v, ng, Op::Transpose(a, perm.to_vec()))
    }

    pub fn concat(&mut self, axis: usize, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let ng = self.wants(parts);
        self.push(v, ng, Op::Concat(axis, parts.to_vec()))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let x = self.value(a);
        let n = T::from_f64(x.len() as f64);
        let v = ArrayD::from_elem(IxDyn(&[]), x.sum() / n);
        let ng = self.wants(&[a]);
        self.push(v, ng, Op::MeanAll(a))
    }

    /// Mean over the last axis: `[..., l] -> [...]`.
    pub fn mean_last(&mut self, a: TensorId) -> TensorId {
        let x = self.value(a);
        let last = Axis(x.ndim() - 1);
        let l = *x.shape().last().expect("mean_last on 0-d");
        assert!(l > 0, "mean_last on empty axis");
        let inv = T::one() / T::from_f64(l as f64);
        let v = x.sum_axis(last).mapv(|e| e * inv);
        let ng = self.wants(&[a]);
        self.push(v, ng, Op::MeanLast(a))
    }

    /// `mean((a - b)^2)` over every element.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean_all(sq)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits [m, v]`.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, targets: &[usize]) -> TensorId {
        let lsm = self.log_softmax_last(logits);
        let picked = self.select_cols(lsm, targets);
        let m = self.mean_all(picked);
        self.neg(m)
    }

    /// Seed the root gradient with 1 and sweep the tape in reverse,
    /// accumulating into every reachable node that wants gradient.
    pub fn backward(&mut self, root: TensorId) {
        assert!(self.recording, "backward on an inference tape");
        assert_eq!(self.value(root).ndim(), 0, "backward root must be 0-d");
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(ArrayD::from_elem(IxDyn(&[]), T::one()));
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let deltas = self.backward_op(i);
            for (pid, d) in deltas {
                let p = &mut self.nodes[pid];
                if !p.needs_grad {
                    continue;
                }
                match &mut p.grad {
                    Some(g) => *g += &d,
                    slot => *slot = Some(d),
                }
            }
        }
    }

    fn backward_op(&self, i: usize) -> Vec<(usize, ArrayD<T>)> {
        let g = self.nodes[i].grad.as_ref().unwrap();
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(a.0, g.clone()), (b.0, g.clone())],
            Op::Sub(a, b) => vec![(a.0, g.clone()), (b.0, g.mapv(|e| -e))],
            Op::Mul(a, b) => vec![
                (a.0, g * self.value(*b)),
                (b.0, g * self.value(*a)),
            ],
            Op::Neg(a) => vec![(a.0, g.mapv(|e| -e))],
            Op::Scale(a, f) => {
                let f = *f;
                vec![(a.0, g.mapv(|e| e * f))]
            }
            Op::Matmul(a, b) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                let bv = self.value(*b).view().into_dimensionality::<Ix2>().unwrap();
                vec![
                    (a.0, gv.dot(&bv.t()).into_dyn()),
                    (b.0, av.t().dot(&gv).into_dyn()),
                ]
            }
            Op::BatchMatmul(a, b) => {
                let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                let av = self.value(*a).view().into_dimensionality::<Ix3>().unwrap();
                let bv = self.value(*b).view().into_dimensionality::<Ix3>().unwrap();
                let (nb, m, k) = av.dim();
                let n = bv.dim().2;
                let mut da = ndarray::Array3::<T>::zeros((nb, m, k));
                let mut db = ndarray::Array3::<T>::zeros((nb, k, n));
                for bi in 0..nb {
                    let gb = gv.index_axis(Axis(0), bi);
                    da.index_axis_mut(Axis(0), bi)
                        .assign(&gb.dot(&bv.index_axis(Axis(0), bi).t()));
                    db.index_axis_mut(Axis(0), bi)
                        .assign(&av.index_axis(Axis(0), bi).t().dot(&gb));
                }
                vec![(a.0, da.into_dyn()), (b.0, db.into_dyn())]
            }
            Op::GatherRows(x, idx) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let shape = self.value(*x).raw_dim();
                let mut dx = ArrayD::<T>::zeros(shape);
                {
                    let mut dxv = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for (r, &srow) in idx.iter().enumerate() {
                        let mut dst = dxv.row_mut(srow);
                        dst += &gv.row(r);
                    }
                }
                vec![(x.0, dx)]
            }
            Op::SelectCols(x, idx) => {
                let gv = g.view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let shape = self.value(*x).raw_dim();
                let mut dx = ArrayD::<T>::zeros(shape);
                {
                    let mut dxv = dx.view_mut().into_dimensionality::<Ix2>().unwrap();
                    for (r, &c) in idx.iter().enumerate() {
                        dxv[[r, c]] = gv[r];
                    }
                }
                vec![(x.0, dx)]
            }
            Op::AddRow(x, bias) => {
                let gv = g.view().into_dimensionality::<Ix2>().unwrap();
                let db = gv.sum_axis(Axis(0));
                vec![(x.0, g.clone()), (bias.0, db.into_dyn())]
            }
            Op::AddBias4(x, bias) => {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let c = gv.dim().1;
                let mut db = Array1::<T>::zeros(c);
                for ci in 0..c {
                    db[ci] = gv.index_axis(Axis(1), ci).sum();
                }
                vec![(x.0, g.clone()), (bias.0, db.into_dyn())]
            }
            Op::AddChan(x, shift) => {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (b, c, _, _) = gv.dim();
                let mut ds = Array2::<T>::zeros((b, c));
                for bi in 0..b {
                    for ci in 0..c {
                        ds[[bi, ci]] = gv.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum();
                    }
                }
                vec![(x.0, g.clone()), (shift.0, ds.into_dyn())]
            }
            Op::Relu(a) => {
                let mask = self.value(*a).mapv(|x| if x > T::zero() { T::one() } else { T::zero() });
                vec![(a.0, g * &mask)]
            }
            Op::Silu(a) => {
                let d = self.value(*a).mapv(|x| {
                    let s = sigmoid(x);
                    s * (T::one() + x * (T::one() - s))
                });
                vec![(a.0, g * &d)]
            }
            Op::SoftmaxLast(a) => {
                let y = &self.nodes[i].value;
                let mut dx = g * y;
                let last = Axis(y.ndim() - 1);
                for (mut dl, yl) in dx.lanes_mut(last).into_iter().zip(y.lanes(last)) {
                    let s = dl.sum();
                    for (d, &yv) in dl.iter_mut().zip(yl.iter()) {
                        *d = *d - yv * s;
                    }
                }
                vec![(a.0, dx)]
            }
            Op::LogSoftmaxLast(a) => {
                let y = &self.nodes[i].value;
                let mut dx = g.clone();
                let last = Axis(y.ndim() - 1);
                for (mut dl, yl) in dx.lanes_mut(last).into_iter().zip(y.lanes(last)) {
                    let s = dl.sum();
                    for (d, &yv) in dl.iter_mut().zip(yl.iter()) {
                        *d = *d - yv.exp() * s;
                    }
                }
                vec![(a.0, dx)]
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *xhat.shape().last().unwrap();
                let dn = T::from_f64(d as f64);
                let gv = self.value(*gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let last = Axis(xhat.ndim() - 1);

                let mut dgamma = Array1::<T>::zeros(d);
                let mut dbeta = Array1::<T>::zeros(d);
                let mut dx = ArrayD::<T>::zeros(xhat.raw_dim());
                for (((gl, xl), mut dl), &rs) in g
                    .lanes(last)
                    .into_iter()
                    .zip(xhat.lanes(last))
                    .zip(dx.lanes_mut(last))
                    .zip(rstd.iter())
                {
                    let mut sum_gy = T::zero();
                    let mut sum_gyx = T::zero();
                    for k in 0..d {
                        let gy = gl[k] * gv[k];
                        sum_gy = sum_gy + gy;
                        sum_gyx = sum_gyx + gy * xl[k];
                        dgamma[k] = dgamma[k] + gl[k] * xl[k];
                        dbeta[k] = dbeta[k] + gl[k];
                    }
                    let m1 = sum_gy / dn;
                    let m2 = sum_gyx / dn;
                    for k in 0..d {
                        let gy = gl[k] * gv[k];
                        dl[k] = rs * (gy - m1 - xl[k] * m2);
                    }
                }
                vec![(x.0, dx), (gamma.0, dgamma.into_dyn()), (beta.0, dbeta.into_dyn())]
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, rstd } => {
                let gv4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let xh4 = xhat.view().into_dimensionality::<Ix4>().unwrap();
                let (b, c, h, w) = xh4.dim();
                let gamma_v = self.value(*gamma).view().into_dimensionality::<ndarray::Ix1>().unwrap();
                let cpg = c / groups;
                let lane = cpg * h * w;
                let ln = T::from_f64(lane as f64);

                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);
                for ci in 0..c {
                    let gs = gv4.index_axis(Axis(1), ci);
                    let xs = xh4.index_axis(Axis(1), ci);
                    dgamma[ci] = (&gs * &xs).sum();
                    dbeta[ci] = gs.sum();
                }
                let mut dx = ndarray::Array4::<T>::zeros((b, c, h, w));
                for bi in 0..b {
                    for gi in 0..*groups {
                        let mut sum_gy = T::zero();
                        let mut sum_gyx = T::zero();
                        for cl in 0..cpg {
                            let ci = gi * cpg + cl;
                            let ga = gamma_v[ci];
                            let gs = gv4.index_axis(Axis(0), bi);
                            let gs = gs.index_axis(Axis(0), ci);
                            let xs = xh4.index_axis(Axis(0), bi);
                            let xs = xs.index_axis(Axis(0), ci);
                            for (&ge, &xe) in gs.iter().zip(xs.iter()) {
                                let gy = ge * ga;
                                sum_gy = sum_gy + gy;
                                sum_gyx = sum_gyx + gy * xe;
                            }
                        }
                        let m1 = sum_gy / ln;
                        let m2 = sum_gyx / ln;
                        let rs = rstd[[bi, gi]];
                        for cl in 0..cpg {
                            let ci = gi * cpg + cl;
                            let ga = gamma_v[ci];
                            for y in 0..h {
                                for xw in 0..w {
                                    let gy = gv4[[bi, ci, y, xw]] * ga;
                                    dx[[bi, ci, y, xw]] = rs * (gy - m1 - xh4[[bi, ci, y, xw]] * m2);
                                }
                            }
                        }
                    }
                }
                vec![(x.0, dx.into_dyn()), (gamma.0, dgamma.into_dyn()), (beta.0, dbeta.into_dyn())]
            }
            Op::Conv2d { x, w, stride, pad, cols } => {
                assert!(!cols.is_empty() || self.value(*x).shape()[0] == 0, "conv2d backward without saved context");
                // Incoming gradients carry whatever layout their producer
                // used; the per-batch reshape below needs standard order.
                let g_std = g.view().into_dimensionality::<Ix4>().unwrap().as_standard_layout().into_owned();
                let gv = g_std.view();
                let wv = self.value(*w).view().into_dimensionality::<Ix4>().unwrap();
                let (c_out, c_in, kh, kw) = wv.dim();
                let (b, _, ho, wo) = gv.dim();
                let w2 = wv.into_shape_with_order((c_out, c_in * kh * kw)).unwrap();

                let mut dw2 = Array2::<T>::zeros((c_out, c_in * kh * kw));
                let mut dx = self.value(*x).mapv(|_| T::zero());
                {
                    let mut dxv = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for bi in 0..b {
                        let gb = gv
                            .index_axis(Axis(0), bi)
                            .into_shape_with_order((c_out, ho * wo))
                            .unwrap();
                        dw2 = dw2 + gb.dot(&cols[bi].t());
                        let dcol = w2.t().dot(&gb);
                        col2im(&dcol, &mut dxv.index_axis_mut(Axis(0), bi), kh, kw, *stride, *pad);
                    }
                }
                let dw = dw2.into_shape_with_order((c_out, c_in, kh, kw)).unwrap();
                vec![(x.0, dx), (w.0, dw.into_dyn())]
            }
            Op::Upsample2x(a) => {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (b, c, h2, w2) = gv.dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut dx = ndarray::Array4::<T>::zeros((b, c, h, w));
                for bi in 0..b {
                    for ci in 0..c {
                        for y in 0..h {
                            for xw in 0..w {
                                dx[[bi, ci, y, xw]] = gv[[bi, ci, 2 * y, 2 * xw]]
                                    + gv[[bi, ci, 2 * y, 2 * xw + 1]]
                                    + gv[[bi, ci, 2 * y + 1, 2 * xw]]
                                    + gv[[bi, ci, 2 * y + 1, 2 * xw + 1]];
                            }
                        }
                    }
                }
                vec![(a.0, dx.into_dyn())]
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).raw_dim();
                vec![(a.0, g.to_shape(shape).unwrap().to_owned())]
            }
            Op::Transpose(a, perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                let dx = g.view().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned();
                vec![(a.0, dx)]
            }
            Op::Concat(axis, parts) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut start = 0usize;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    let sl = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    out.push((p.0, sl));
                    start += len;
                }
                out
            }
            Op::MeanAll(a) => {
                let x = self.value(*a);
                let s = g[[]] / T::from_f64(x.len() as f64);
                vec![(a.0, ArrayD::from_elem(x.raw_dim(), s))]
            }
            Op::MeanLast(a) => {
                let shape = self.value(*a).raw_dim();
                let l = *shape.slice().last().unwrap();
                let inv = T::one() / T::from_f64(l as f64);
                let mut dx = ArrayD::<T>::zeros(shape);
                let last = Axis(dx.ndim() - 1);
                for (mut lane, &gv) in dx.lanes_mut(last).into_iter().zip(g.iter()) {
                    lane.fill(gv * inv);
                }
                vec![(a.0, dx)]
            }
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{fd_grad, max_rel_err};
    use crate::nn::randn;
    use crate::rng::substream;

    /// Builds the graph twice: once for analytic gradients, once inside a
    /// finite-difference probe. The output is contracted against a fixed
    /// random tensor so every element contributes a distinct gradient.
    fn check_op<F>(shapes: &[&[usize]], salt: u64, build: F)
    where
        F: Fn(&mut Tape<f64>, &[TensorId]) -> TensorId,
    {
        let mut rng = substream(0xC0FFEE, "tape/gradcheck", salt);
        let params: Vec<ArrayD<f64>> = shapes.iter().map(|s| randn(s, 1.0, &mut rng)).collect();

        let mut tape = Tape::<f64>::new();
        let ids: Vec<TensorId> = params.iter().map(|p| tape.param(p.clone())).collect();
        let y = build(&mut tape, &ids);
        let probe = randn::<f64, _>(tape.value(y).shape(), 1.0, &mut rng);
        let root = {
            let c = tape.constant(probe.clone());
            let prod = tape.mul(y, c);
            tape.mean_all(prod)
        };
        tape.backward(root);
        let analytic: Vec<ArrayD<f64>> = ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();

        let numeric = fd_grad(
            |ps: &[ArrayD<f64>]| {
                let mut t = Tape::<f64>::new();
                let ids: Vec<TensorId> = ps.iter().map(|p| t.param(p.clone())).collect();
                let y = build(&mut t, &ids);
                let c = t.constant(probe.clone());
                let prod = t.mul(y, c);
                let root = t.mean_all(prod);
                t.scalar(root)
            },
            &params,
            1e-5,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-6, "gradient mismatch: rel err {err:.3e}");
    }

    #[test]
    fn grads_elementwise_arithmetic() {
        check_op(&[&[3, 4], &[3, 4]], 1, |t, p| {
            let s = t.add(p[0], p[1]);
            let d = t.sub(s, p[1]);
            let m = t.mul(d, p[1]);
            let n = t.neg(m);
            t.scale(n, 0.7)
        });
    }

    #[test]
    fn grads_matmul() {
        check_op(&[&[3, 4], &[4, 5]], 2, |t, p| t.matmul(p[0], p[1]));
    }

    #[test]
    fn grads_batch_matmul() {
        check_op(&[&[2, 3, 4], &[2, 4, 5]], 3, |t, p| t.batch_matmul(p[0], p[1]));
    }

    #[test]
    fn grads_gather_rows_accumulates_duplicates() {
        check_op(&[&[5, 3]], 4, |t, p| t.gather_rows(p[0], &[4, 0, 2, 0, 0]));
    }

    #[test]
    fn grads_select_cols() {
        check_op(&[&[4, 6]], 5, |t, p| t.select_cols(p[0], &[5, 0, 3, 3]));
    }

    #[test]
    fn grads_bias_broadcasts() {
        check_op(&[&[3, 4], &[4]], 6, |t, p| t.add_row(p[0], p[1]));
        check_op(&[&[2, 3, 4, 4], &[3]], 7, |t, p| t.add_bias4(p[0], p[1]));
        check_op(&[&[2, 3, 4, 4], &[2, 3]], 8, |t, p| t.add_chan(p[0], p[1]));
    }

    #[test]
    fn grads_activations() {
        // Keep relu inputs away from the kink, where central differences
        // are meaningless.
        check_op(&[&[3, 4]], 9, |t, p| {
            let c = t.constant(ArrayD::from_elem(IxDyn(&[3, 4]), 0.8));
            let off = t.add(p[0], c);
            t.relu(off)
        });
        check_op(&[&[3, 4]], 10, |t, p| t.silu(p[0]));
    }

    #[test]
    fn grads_softmaxes() {
        check_op(&[&[2, 3, 5]], 11, |t, p| t.softmax_last(p[0]));
        check_op(&[&[4, 6]], 12, |t, p| t.log_softmax_last(p[0]));
    }

    #[test]
    fn grads_layer_norm() {
        check_op(&[&[3, 6], &[6], &[6]], 13, |t, p| t.layer_norm(p[0], p[1], p[2], 1e-5));
    }

    #[test]
    fn grads_group_norm() {
        check_op(&[&[2, 4, 3, 3], &[4], &[4]], 14, |t, p| {
            t.group_norm(p[0], p[1], p[2], 2, 1e-5)
        });
    }

    #[test]
    fn grads_conv2d_stride1() {
        check_op(&[&[2, 3, 5, 5], &[4, 3, 3, 3]], 15, |t, p| t.conv2d(p[0], p[1], 1, 1));
    }

    #[test]
    fn grads_conv2d_stride2() {
        check_op(&[&[2, 3, 6, 6], &[4, 3, 3, 3]], 16, |t, p| t.conv2d(p[0], p[1], 2, 1));
    }

    #[test]
    fn grads_upsample() {
        check_op(&[&[2, 3, 3, 3]], 17, |t, p| t.upsample2x(p[0]));
    }

    #[test]
    fn grads_shape_ops() {
        check_op(&[&[2, 3, 4], &[16, 1]], 18, |t, p| {
            let tr = t.transpose(p[0], &[1, 0, 2]);
            let rs = t.reshape(tr, &[3, 8]);
            let cat = t.concat(1, &[rs, rs]);
            t.matmul(cat, p[1])
        });
    }

    #[test]
    fn grads_reductions() {
        check_op(&[&[2, 3, 4]], 19, |t, p| t.mean_last(p[0]));
        check_op(&[&[3, 4], &[3, 4]], 20, |t, p| t.mse(p[0], p[1]));
    }

    #[test]
    fn grads_cross_entropy() {
        check_op(&[&[4, 7]], 21, |t, p| t.cross_entropy_mean(p[0], &[6, 0, 2, 2]));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let a = t.param(ArrayD::from_elem(IxDyn(&[2, 2]), 2.0));
        let c = t.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 3.0));
        let y = t.mul(a, c);
        let root = t.mean_all(y);
        t.backward(root);
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(a).unwrap()[[0, 0]], 3.0 / 4.0);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = substream(0xC0FFEE, "tape/softmax-prop", 0);
        let mut t = Tape::<f64>::new();
        let x = randn::<f64, _>(&[6, 9], 3.0, &mut rng);
        let xi = t.constant(x);
        let y = t.softmax_last(xi);
        for row in t.value(y).rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn inference_tape_matches_recording_forward() {
        let mut rng = substream(0xC0FFEE, "tape/infer", 0);
        let x = randn::<f64, _>(&[2, 3, 8, 8], 1.0, &mut rng);
        let w = randn::<f64, _>(&[4, 3, 3, 3], 0.2, &mut rng);
        let g = ArrayD::from_elem(IxDyn(&[4]), 1.0);
        let b = ArrayD::zeros(IxDyn(&[4]));

        let run = |tape: &mut Tape<f64>| {
            let xi = tape.constant(x.clone());
            let wi = tape.constant(w.clone());
            let gi = tape.constant(g.clone());
            let bi = tape.constant(b.clone());
            let c = tape.conv2d(xi, wi, 2, 1);
            let n = tape.group_norm(c, gi, bi, 2, 1e-5);
            let s = tape.silu(n);
            tape.value(s).clone()
        };
        let full = run(&mut Tape::new());
        let lean = run(&mut Tape::new_inference());
        assert_eq!(full, lean);
    }
}

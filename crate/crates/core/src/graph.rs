//! Reverse-mode automatic differentiation on an eagerly evaluated tape.
//!
//! Each training step builds one [`Graph`] per sample: operations compute
//! their value at insertion time (so intermediate results — e.g. the coarse
//! derained image a segmenter must consume mid-pipeline — are available
//! immediately), and [`Graph::backward`] walks the tape in reverse, freeing
//! node values as soon as they can no longer be needed. Parameters bind into
//! the graph through [`ParamSet`] handles; a binding may be *frozen*, in which
//! case gradients still flow **through** the operation into its inputs but are
//! not reported for the frozen parameters themselves (the contract the
//! semantic-rethinking verification stage relies on).
//!
//! Convolutions are im2col + GEMM with the bias and activation fused; the
//! activation derivatives are all computable from the activated output, so
//! only post-activation values are stored.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Scalar, Tensor};

/// Index of a node on the tape.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Identity of a parameter tensor within a [`ParamSet`].
#[derive(Copy, Clone, PartialEq, Eq, Hash, Debug)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// A bindable collection of parameter values, indexed by [`ParamId`].
///
/// Cloning is cheap (reference-counted tensors). A clone taken before an
/// optimizer update keeps the pre-update values alive — that is exactly how
/// the verification stage's frozen weight snapshot works.
#[derive(Clone)]
pub struct ParamSet<T> {
    values: Vec<Rc<Tensor<T>>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { values: Vec::new() }
    }

    pub fn push(&mut self, t: Tensor<T>) -> ParamId {
        let id = ParamId(self.values.len() as u32);
        self.values.push(Rc::new(t));
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, pid: ParamId) -> &Tensor<T> {
        &self.values[pid.index()]
    }

    pub fn get_rc(&self, pid: ParamId) -> Rc<Tensor<T>> {
        self.values[pid.index()].clone()
    }

    /// Mutable access for the optimizer; copies on write if a snapshot still
    /// holds the old value, which is what keeps snapshots immutable.
    pub fn get_mut(&mut self, pid: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.values[pid.index()])
    }

    /// A copy of this set with a single scalar entry shifted by `delta` —
    /// the probe used by finite-difference gradient checks.
    pub fn perturbed(&self, pid: ParamId, elem: usize, delta: T) -> Self {
        let mut out = self.clone();
        let t = Rc::make_mut(&mut out.values[pid.index()]);
        t.data_mut()[elem] = t.data_mut()[elem] + delta;
        out
    }
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Pointwise nonlinearity fused into a convolution.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Act {
    None,
    Relu,
    Sigmoid,
    /// Softmax across channels, independently at every spatial position.
    SoftmaxCh,
}

/// Static convolution geometry.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ConvConf {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvConf {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        assert!(kernel % 2 == 1, "kernels are odd-sized");
        assert!(stride >= 1);
        ConvConf {
            in_ch,
            out_ch,
            kernel,
            stride,
            padding,
        }
    }

    /// Output spatial size for an input of the given size.
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (ho, wo)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch, self.kernel, self.kernel]
    }
}

enum Op {
    Leaf,
    Param { pid: ParamId, frozen: bool },
    Conv { x: NodeId, w: NodeId, b: NodeId, conf: ConvConf, act: Act },
    MaxPool2 { x: NodeId, argmax: Vec<u8> },
    Upsample2 { x: NodeId },
    Concat { xs: Vec<NodeId> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    MseMean { a: NodeId, b: NodeId },
    L1Mean { a: NodeId, b: NodeId },
    CeMean { p: NodeId, labels: Rc<Vec<u8>> },
    WSum { terms: Vec<(NodeId, f64)> },
}

struct Node<T> {
    op: Op,
    value: Option<Rc<Tensor<T>>>,
    grad: Option<Tensor<T>>,
    requires: bool,
}

/// Gradients keyed by parameter, produced by one backward pass and summed
/// across the samples of a batch.
pub struct Grads<T> {
    by_pid: HashMap<u32, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn new() -> Self {
        Grads {
            by_pid: HashMap::new(),
        }
    }

    pub fn get(&self, pid: ParamId) -> Option<&Tensor<T>> {
        self.by_pid.get(&pid.0)
    }

    pub fn len(&self) -> usize {
        self.by_pid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_pid.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_pid.iter().map(|(k, v)| (ParamId(*k), v))
    }

    fn insert_add(&mut self, pid: ParamId, g: Tensor<T>) {
        match self.by_pid.entry(pid.0) {
            std::collections::hash_map::Entry::Occupied(mut e) => add_in_place(e.get_mut(), &g),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(g);
            }
        }
    }

    /// Accumulates another gradient collection into this one (batch sum).
    pub fn merge(&mut self, other: Grads<T>) {
        for (pid, g) in other.by_pid {
            match self.by_pid.entry(pid) {
                std::collections::hash_map::Entry::Occupied(mut e) => add_in_place(e.get_mut(), &g),
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
            }
        }
    }

    /// Multiplies every gradient by a constant (e.g. 1/batch for averaging).
    pub fn scale(&mut self, s: T) {
        for g in self.by_pid.values_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
}

impl<T: Scalar> Default for Grads<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_in_place<T: Scalar>(dst: &mut Tensor<T>, src: &Tensor<T>) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data().iter()) {
        *d = *d + *s;
    }
}

/// The autodiff tape. See the module docs for the lifecycle.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    // One binding per (parameter, frozen?) pair so a frozen snapshot and the
    // live weights can coexist in a single graph.
    bindings: HashMap<(u32, bool), NodeId>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor<T>, requires: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            value: Some(Rc::new(value)),
            grad: None,
            requires,
        });
        id
    }

    fn push_rc(&mut self, op: Op, value: Rc<Tensor<T>>, requires: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            op,
            value: Some(value),
            grad: None,
            requires,
        });
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.nodes[id.idx()]
            .value
            .as_ref()
            .expect("node value already released by backward")
    }

    pub fn value_rc(&self, id: NodeId) -> Rc<Tensor<T>> {
        self.nodes[id.idx()]
            .value
            .clone()
            .expect("node value already released by backward")
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].requires
    }

    /// Constant input; gradients are not tracked through it.
    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn leaf_rc(&mut self, value: Rc<Tensor<T>>) -> NodeId {
        self.push_rc(Op::Leaf, value, false)
    }

    /// Binds a parameter. Frozen bindings never report gradients, but remain
    /// transparent to gradient flow toward their inputs.
    pub fn param(&mut self, set: &ParamSet<T>, pid: ParamId, frozen: bool) -> NodeId {
        if let Some(&id) = self.bindings.get(&(pid.0, frozen)) {
            return id;
        }
        let id = self.push_rc(Op::Param { pid, frozen }, set.get_rc(pid), !frozen);
        self.bindings.insert((pid.0, frozen), id);
        id
    }

    /// Fused convolution + bias + activation.
    pub fn conv(&mut self, conf: ConvConf, act: Act, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.channels() != conf.in_ch {
            return Err(Error::Shape(format!(
                "conv expects [{}, H, W] input, got {:?}",
                conf.in_ch,
                xv.shape()
            )));
        }
        let wv = self.value(w);
        if wv.shape() != conf.weight_shape() {
            return Err(Error::Shape(format!(
                "conv weight shape {:?} does not match spec {:?}",
                wv.shape(),
                conf.weight_shape()
            )));
        }
        let out = conv_forward(xv, wv, self.value(b), &conf, act);
        let requires = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(Op::Conv { x, w, b, conf, act }, out, requires))
    }

    /// 2×2 max pooling with stride 2; requires even spatial dimensions.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (c, h, w) = (xv.channels(), xv.height(), xv.width());
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "maxpool2 needs even spatial dims, got {}x{}",
                h, w
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[c, ho, wo]);
        let mut argmax = vec![0u8; c * ho * wo];
        let xd = xv.data();
        let od = out.data_mut();
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = (ci * h + oy * 2) * w + ox * 2;
                    let candidates = [xd[base], xd[base + 1], xd[base + w], xd[base + w + 1]];
                    let mut best = 0usize;
                    for (i, cand) in candidates.iter().enumerate().skip(1) {
                        if *cand > candidates[best] {
                            best = i;
                        }
                    }
                    let oi = (ci * ho + oy) * wo + ox;
                    od[oi] = candidates[best];
                    argmax[oi] = best as u8;
                }
            }
        }
        let requires = self.requires(x);
        Ok(self.push(Op::MaxPool2 { x, argmax }, out, requires))
    }

    /// 2× nearest-neighbour upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (c, h, w) = (xv.channels(), xv.height(), xv.width());
        let (ho, wo) = (h * 2, w * 2);
        let mut out = Tensor::zeros(&[c, ho, wo]);
        let xd = xv.data();
        let od = out.data_mut();
        for ci in 0..c {
            for oy in 0..ho {
                let src_row = (ci * h + oy / 2) * w;
                let dst_row = (ci * ho + oy) * wo;
                for ox in 0..wo {
                    od[dst_row + ox] = xd[src_row + ox / 2];
                }
            }
        }
        let requires = self.requires(x);
        Ok(self.push(Op::Upsample2 { x }, out, requires))
    }

    /// Channel concatenation of same-resolution feature volumes.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        assert!(!xs.is_empty());
        let (h, w) = {
            let first = self.value(xs[0]);
            (first.height(), first.width())
        };
        let mut total_c = 0usize;
        for &x in xs {
            let v = self.value(x);
            if v.height() != h || v.width() != w {
                return Err(Error::Shape(format!(
                    "concat spatial mismatch: {}x{} vs {}x{}",
                    v.height(),
                    v.width(),
                    h,
                    w
                )));
            }
            total_c += v.channels();
        }
        let mut data = Vec::with_capacity(total_c * h * w);
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let out = Tensor::from_vec(&[total_c, h, w], data)?;
        let requires = xs.iter().any(|&x| self.requires(x));
        Ok(self.push(Op::Concat { xs: xs.to_vec() }, out, requires))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add { a, b }, out, requires))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub { a, b }, out, requires))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul { a, b }, out, requires))
    }

    /// Mean squared error over all elements → scalar node.
    pub fn mse_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b))?;
        let n = T::from_f64_lossy(self.value(a).len() as f64);
        let sum: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MseMean { a, b }, Tensor::scalar(sum / n), requires))
    }

    /// Mean absolute error over all elements → scalar node.
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b))?;
        let n = T::from_f64_lossy(self.value(a).len() as f64);
        let sum: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let requires = self.requires(a) || self.requires(b);
        Ok(self.push(Op::L1Mean { a, b }, Tensor::scalar(sum / n), requires))
    }

    /// Mean per-pixel cross-entropy of a `[K, H, W]` probability volume
    /// against integer labels (row-major, length H·W) → scalar node.
    pub fn ce_mean(&mut self, p: NodeId, labels: Rc<Vec<u8>>) -> Result<NodeId> {
        let pv = self.value(p);
        let (k, h, w) = (pv.channels(), pv.height(), pv.width());
        if labels.len() != h * w {
            return Err(Error::Shape(format!(
                "label map has {} entries for a {}x{} probability volume",
                labels.len(),
                h,
                w
            )));
        }
        let eps = T::from_f64_lossy(CE_EPS);
        let mut sum = T::zero();
        let pd = pv.data();
        for (pix, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= k {
                return Err(Error::Data(format!(
                    "label id {} out of range for {} classes",
                    l, k
                )));
            }
            sum = sum - (pd[l * h * w + pix] + eps).ln();
        }
        let npix = T::from_f64_lossy((h * w) as f64);
        let requires = self.requires(p);
        Ok(self.push(Op::CeMean { p, labels }, Tensor::scalar(sum / npix), requires))
    }

    /// Weighted sum of scalar nodes → scalar node.
    pub fn wsum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut sum = T::zero();
        for &(id, c) in terms {
            debug_assert_eq!(self.value(id).len(), 1);
            sum = sum + self.value(id).item() * T::from_f64_lossy(c);
        }
        let requires = terms.iter().any(|&(id, _)| self.requires(id));
        self.push(
            Op::WSum {
                terms: terms.to_vec(),
            },
            Tensor::scalar(sum),
            requires,
        )
    }

    /// Reverse pass from a scalar root with seed gradient `seed` (use the
    /// inverse batch size to average per-sample losses). Consumes the tape's
    /// stored values; the graph should be dropped afterwards.
    pub fn backward(&mut self, root: NodeId, seed: T) -> Grads<T> {
        debug_assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads = Grads::new();
        self.nodes[root.idx()].grad = Some(Tensor::scalar(seed));
        for i in (0..=root.idx()).rev() {
            let grad = match self.nodes[i].grad.take() {
                Some(g) if self.nodes[i].requires => g,
                _ => {
                    self.nodes[i].value = None;
                    continue;
                }
            };
            let value = self.nodes[i].value.take().expect("value alive until visited");
            // Split borrows: the op is read while input grads are written.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            match &op {
                Op::Leaf => {}
                Op::Param { pid, frozen } => {
                    if !frozen {
                        grads.insert_add(*pid, grad);
                    }
                    self.nodes[i].op = op;
                    continue;
                }
                Op::Conv { x, w, b, conf, act } => {
                    let xv = self.value_rc(*x);
                    let wv = self.value_rc(*w);
                    let (dx, dw, db) = conv_backward(
                        &xv,
                        &wv,
                        &value,
                        &grad,
                        conf,
                        *act,
                        self.requires(*x),
                        self.requires(*w),
                        self.requires(*b),
                    );
                    if let Some(dx) = dx {
                        self.add_grad(*x, dx);
                    }
                    if let Some(dw) = dw {
                        self.add_grad(*w, dw);
                    }
                    if let Some(db) = db {
                        self.add_grad(*b, db);
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let xv = self.value_rc(*x);
                    let (c, h, w) = (xv.channels(), xv.height(), xv.width());
                    let (ho, wo) = (h / 2, w / 2);
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    let dxd = dx.data_mut();
                    let gd = grad.data();
                    for ci in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let oi = (ci * ho + oy) * wo + ox;
                                let base = (ci * h + oy * 2) * w + ox * 2;
                                let off = match argmax[oi] {
                                    0 => 0,
                                    1 => 1,
                                    2 => w,
                                    _ => w + 1,
                                };
                                dxd[base + off] = dxd[base + off] + gd[oi];
                            }
                        }
                    }
                    self.add_grad(*x, dx);
                }
                Op::Upsample2 { x } => {
                    let xv = self.value_rc(*x);
                    let (c, h, w) = (xv.channels(), xv.height(), xv.width());
                    let (ho, wo) = (h * 2, w * 2);
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    let dxd = dx.data_mut();
                    let gd = grad.data();
                    for ci in 0..c {
                        for oy in 0..ho {
                            let src_row = (ci * ho + oy) * wo;
                            let dst_row = (ci * h + oy / 2) * w;
                            for ox in 0..wo {
                                dxd[dst_row + ox / 2] = dxd[dst_row + ox / 2] + gd[src_row + ox];
                            }
                        }
                    }
                    self.add_grad(*x, dx);
                }
                Op::Concat { xs } => {
                    let gd = grad.data();
                    let mut offset = 0usize;
                    for &x in xs {
                        let xv = self.value_rc(x);
                        let len = xv.len();
                        if self.requires(x) {
                            let slice = gd[offset..offset + len].to_vec();
                            let dx = Tensor::from_vec(xv.shape(), slice).expect("concat slice");
                            self.add_grad(x, dx);
                        }
                        offset += len;
                    }
                }
                Op::Add { a, b } => {
                    if self.requires(*a) {
                        self.add_grad(*a, grad.clone());
                    }
                    if self.requires(*b) {
                        self.add_grad(*b, grad.clone());
                    }
                }
                Op::Sub { a, b } => {
                    if self.requires(*a) {
                        self.add_grad(*a, grad.clone());
                    }
                    if self.requires(*b) {
                        self.add_grad(*b, grad.map(|v| T::zero() - v));
                    }
                }
                Op::Mul { a, b } => {
                    if self.requires(*a) {
                        let bv = self.value_rc(*b);
                        self.add_grad(*a, grad.zip_map(&bv, |g, y| g * y).expect("mul shapes"));
                    }
                    if self.requires(*b) {
                        let av = self.value_rc(*a);
                        self.add_grad(*b, grad.zip_map(&av, |g, x| g * x).expect("mul shapes"));
                    }
                }
                Op::MseMean { a, b } => {
                    let g = grad.item();
                    let av = self.value_rc(*a);
                    let bv = self.value_rc(*b);
                    let n = T::from_f64_lossy(av.len() as f64);
                    let two = T::from_f64_lossy(2.0);
                    if self.requires(*a) {
                        let da = av
                            .zip_map(&bv, |x, y| two * (x - y) / n * g)
                            .expect("mse shapes");
                        self.add_grad(*a, da);
                    }
                    if self.requires(*b) {
                        let db = av
                            .zip_map(&bv, |x, y| two * (y - x) / n * g)
                            .expect("mse shapes");
                        self.add_grad(*b, db);
                    }
                }
                Op::L1Mean { a, b } => {
                    let g = grad.item();
                    let av = self.value_rc(*a);
                    let bv = self.value_rc(*b);
                    let n = T::from_f64_lossy(av.len() as f64);
                    let signed = |x: T, y: T| {
                        let d = x - y;
                        if d > T::zero() {
                            g / n
                        } else if d < T::zero() {
                            T::zero() - g / n
                        } else {
                            T::zero()
                        }
                    };
                    if self.requires(*a) {
                        self.add_grad(*a, av.zip_map(&bv, signed).expect("l1 shapes"));
                    }
                    if self.requires(*b) {
                        self.add_grad(
                            *b,
                            av.zip_map(&bv, |x, y| T::zero() - signed(x, y)).expect("l1 shapes"),
                        );
                    }
                }
                Op::CeMean { p, labels } => {
                    let g = grad.item();
                    let pv = self.value_rc(*p);
                    let (_k, h, w) = (pv.channels(), pv.height(), pv.width());
                    let npix = T::from_f64_lossy((h * w) as f64);
                    let eps = T::from_f64_lossy(CE_EPS);
                    let mut dp = Tensor::zeros(pv.shape());
                    let dpd = dp.data_mut();
                    let pd = pv.data();
                    for (pix, &l) in labels.iter().enumerate() {
                        let idx = (l as usize) * h * w + pix;
                        dpd[idx] = dpd[idx] - g / (npix * (pd[idx] + eps));
                    }
                    self.add_grad(*p, dp);
                }
                Op::WSum { terms } => {
                    let g = grad.item();
                    for &(id, c) in terms {
                        if self.requires(id) {
                            self.add_grad(id, Tensor::scalar(g * T::from_f64_lossy(c)));
                        }
                    }
                }
            }
            drop(value);
        }
        grads
    }

    fn add_grad(&mut self, id: NodeId, g: Tensor<T>) {
        let node = &mut self.nodes[id.idx()];
        if !node.requires {
            return;
        }
        match &mut node.grad {
            Some(existing) => add_in_place(existing, &g),
            slot @ None => *slot = Some(g),
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Additive floor inside the cross-entropy logarithm.
pub const CE_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Convolution kernels
// ---------------------------------------------------------------------------

/// Expands `x` into the `[C·k·k, Ho·Wo]` patch matrix. Out-of-range taps stay
/// zero (zero padding).
fn im2col<T: Scalar>(x: &Tensor<T>, conf: &ConvConf, ho: usize, wo: usize) -> Vec<T> {
    let (c, h, w) = (x.channels(), x.height(), x.width());
    let (k, s, p) = (conf.kernel, conf.stride, conf.padding);
    let n = ho * wo;
    let mut col = vec![T::zero(); c * k * k * n];
    let xd = x.data();
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = (ci * h + iy as usize) * w;
                    let dst_row = row + oy * wo;
                    if s == 1 {
                        // For stride 1 the tap positions form a contiguous run.
                        let shift = kx as isize - p as isize;
                        let ox_start = (-shift).max(0) as usize;
                        let ox_end = wo.min(((w as isize) - shift).max(0) as usize);
                        if ox_start < ox_end {
                            let src = src_row as isize + shift;
                            col[dst_row + ox_start..dst_row + ox_end].copy_from_slice(
                                &xd[(src + ox_start as isize) as usize
                                    ..(src + ox_end as isize) as usize],
                            );
                        }
                    } else {
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                col[dst_row + ox] = xd[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a patch-matrix gradient back onto the input layout.
fn col2im_add<T: Scalar>(
    dcol: &[T],
    conf: &ConvConf,
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let (k, s, p) = (conf.kernel, conf.stride, conf.padding);
    let n = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (ci * h + iy as usize) * w;
                    let src_row = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            let di = dst_row + ix as usize;
                            dx[di] = dx[di] + dcol[src_row + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(conf: &ConvConf) -> bool {
    conf.kernel == 1 && conf.stride == 1 && conf.padding == 0
}

fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    conf: &ConvConf,
    act: Act,
) -> Tensor<T> {
    let (h, width) = (x.height(), x.width());
    let (ho, wo) = conf.out_size(h, width);
    let n = ho * wo;
    let kk = conf.in_ch * conf.kernel * conf.kernel;
    let mut out = Tensor::zeros(&[conf.out_ch, ho, wo]);
    if is_pointwise(conf) {
        crate::tensor::gemm(conf.out_ch, kk, n, T::one(), w.data(), x.data(), T::zero(), out.data_mut());
    } else {
        let col = im2col(x, conf, ho, wo);
        crate::tensor::gemm(conf.out_ch, kk, n, T::one(), w.data(), &col, T::zero(), out.data_mut());
    }
    // Fused bias + activation; only the activated value is kept.
    let od = out.data_mut();
    match act {
        Act::None => {
            for co in 0..conf.out_ch {
                let bias = b.data()[co];
                for v in &mut od[co * n..(co + 1) * n] {
                    *v = *v + bias;
                }
            }
        }
        Act::Relu => {
            for co in 0..conf.out_ch {
                let bias = b.data()[co];
                for v in &mut od[co * n..(co + 1) * n] {
                    let z = *v + bias;
                    *v = if z > T::zero() { z } else { T::zero() };
                }
            }
        }
        Act::Sigmoid => {
            for co in 0..conf.out_ch {
                let bias = b.data()[co];
                for v in &mut od[co * n..(co + 1) * n] {
                    let z = *v + bias;
                    *v = T::one() / (T::one() + (T::zero() - z).exp());
                }
            }
        }
        Act::SoftmaxCh => {
            for co in 0..conf.out_ch {
                let bias = b.data()[co];
                for v in &mut od[co * n..(co + 1) * n] {
                    *v = *v + bias;
                }
            }
            // Numerically stable per-pixel softmax over the channel axis.
            for pix in 0..n {
                let mut m = od[pix];
                for co in 1..conf.out_ch {
                    m = m.max(od[co * n + pix]);
                }
                let mut sum = T::zero();
                for co in 0..conf.out_ch {
                    let e = (od[co * n + pix] - m).exp();
                    od[co * n + pix] = e;
                    sum = sum + e;
                }
                for co in 0..conf.out_ch {
                    od[co * n + pix] = od[co * n + pix] / sum;
                }
            }
        }
    }
    out
}

/// Maps the gradient w.r.t. the activated output to the gradient w.r.t. the
/// pre-activation, using only the activated output.
fn act_backward<T: Scalar>(act: Act, out: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    match act {
        Act::None => dout.clone(),
        Act::Relu => dout
            .zip_map(out, |g, y| if y > T::zero() { g } else { T::zero() })
            .expect("relu shapes"),
        Act::Sigmoid => dout
            .zip_map(out, |g, y| g * y * (T::one() - y))
            .expect("sigmoid shapes"),
        Act::SoftmaxCh => {
            let (c, h, w) = (out.channels(), out.height(), out.width());
            let n = h * w;
            let mut dpre = Tensor::zeros(out.shape());
            let od = out.data();
            let gd = dout.data();
            let dd = dpre.data_mut();
            for pix in 0..n {
                let mut dot = T::zero();
                for co in 0..c {
                    let i = co * n + pix;
                    dot = dot + gd[i] * od[i];
                }
                for co in 0..c {
                    let i = co * n + pix;
                    dd[i] = od[i] * (gd[i] - dot);
                }
            }
            dpre
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[allow(clippy::type_complexity)]
fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    out: &Tensor<T>,
    dout: &Tensor<T>,
    conf: &ConvConf,
    act: Act,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (h, width) = (x.height(), x.width());
    let (ho, wo) = (out.height(), out.width());
    let n = ho * wo;
    let kk = conf.in_ch * conf.kernel * conf.kernel;
    let dpre = act_backward(act, out, dout);
    let dp = dpre.data();

    let db = if need_db {
        let mut db = Tensor::zeros(&[conf.out_ch]);
        for co in 0..conf.out_ch {
            db.data_mut()[co] = dp[co * n..(co + 1) * n].iter().copied().sum();
        }
        Some(db)
    } else {
        None
    };

    // The patch matrix is recomputed rather than cached across the forward
    // pass; that trades a little compute for a much smaller live set.
    let pointwise = is_pointwise(conf);
    let col_owned;
    let col: &[T] = if pointwise {
        x.data()
    } else if need_dw {
        col_owned = im2col(x, conf, ho, wo);
        &col_owned
    } else {
        &[]
    };

    let dw = if need_dw {
        let mut dw = Tensor::zeros(&conf.weight_shape());
        // dW[Cout × kk] = dPre[Cout × N] · colᵀ[N × kk]
        T::gemm_strided(
            conf.out_ch,
            n,
            kk,
            T::one(),
            dp,
            n as isize,
            1,
            col,
            1,
            n as isize,
            T::zero(),
            dw.data_mut(),
            kk as isize,
            1,
        );
        Some(dw)
    } else {
        None
    };

    let dx = if need_dx {
        // dCol[kk × N] = Wᵀ[kk × Cout] · dPre[Cout × N]
        let mut dcol = vec![T::zero(); kk * n];
        T::gemm_strided(
            kk,
            conf.out_ch,
            n,
            T::one(),
            w.data(),
            1,
            kk as isize,
            dp,
            n as isize,
            1,
            T::zero(),
            &mut dcol,
            n as isize,
            1,
        );
        if pointwise {
            Some(Tensor::from_vec(x.shape(), dcol).expect("pointwise dx"))
        } else {
            let mut dx = Tensor::zeros(x.shape());
            col2im_add(&dcol, conf, conf.in_ch, h, width, ho, wo, dx.data_mut());
            Some(dx)
        }
    } else {
        None
    };

    (dx, dw, db)
}

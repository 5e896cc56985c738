//! Reverse-mode automatic differentiation over small dense networks.
//!
//! The tape is eager: each op evaluates when recorded, and `backward`
//! replays nodes in exact reverse order. All reductions run in a fixed
//! sequential order so forward evaluation is bit-identical across
//! processes — the codec's decoder mirrors encoder-side forward passes
//! and relies on this.
//!
//! Everything is f64. Gradient-check tests need the headroom, and a
//! single precision everywhere keeps the encode/decode parity argument
//! simple; transmitted payloads are rounded to f32 and adopted by both
//! sides.

use crate::{Error, Result};
use rand::Rng;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor (1-D tensors count as a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Round every value through f32, as the wire format does.
    pub fn round_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
struct ParamEntry {
    value: Tensor,
    grad: Tensor,
    adam_m: Tensor,
    adam_v: Tensor,
    step_count: u64,
}

/// Owns all trainable parameters of a training session: values, grads
/// and Adam moments.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, value: Tensor) -> ParamId {
        let shape = value.shape.clone();
        self.entries.push(ParamEntry {
            value,
            grad: Tensor::zeros(shape.clone()),
            adam_m: Tensor::zeros(shape.clone()),
            adam_v: Tensor::zeros(shape),
            step_count: 0,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn zero_all_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.data.fill(0.0);
        }
    }

    /// Euclidean norm over the concatenated gradients of `ids`, in id order.
    pub fn grad_norm(&self, ids: &[ParamId]) -> f64 {
        let mut acc = 0.0;
        for id in ids {
            for g in &self.entries[id.0].grad.data {
                acc += g * g;
            }
        }
        acc.sqrt()
    }

    /// Standard Adam update with bias correction. Grads of the listed
    /// params are zeroed afterward and their step counts incremented.
    pub fn adam_step(
        &mut self,
        ids: &[ParamId],
        lr: f64,
        betas: (f64, f64),
        eps: f64,
    ) -> Result<()> {
        let (b1, b2) = betas;
        for id in ids {
            if !self.entries[id.0].grad.all_finite() {
                return Err(Error::NonFiniteGradient(id.0));
            }
        }
        for id in ids {
            let e = &mut self.entries[id.0];
            e.step_count += 1;
            let t = e.step_count as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            for i in 0..e.value.data.len() {
                let g = e.grad.data[i];
                e.adam_m.data[i] = b1 * e.adam_m.data[i] + (1.0 - b1) * g;
                e.adam_v.data[i] = b2 * e.adam_v.data[i] + (1.0 - b2) * g * g;
                let m_hat = e.adam_m.data[i] / c1;
                let v_hat = e.adam_v.data[i] / c2;
                e.value.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            e.grad.data.fill(0.0);
        }
        Ok(())
    }
}

/// Node handle in a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    /// y = x · wᵀ + b, x: [n, in], w: [out, in], b: [out]
    Affine { x: Node, w: Node, b: Option<Node> },
    Sigmoid(Node),
    Tanh(Node),
    Softplus(Node),
    Exp(Node),
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    Scale(Node, f64),
    AddConst(Node),
    Sum(Node),
    Mean(Node),
    ConcatCols(Node, Node),
    SliceCols(Node, usize, usize),
    /// Repeat the column block `times` times: [n, c] -> [n, c*times].
    TileCols(Node, usize),
    /// Normalize each consecutive group of `g` elements per row.
    NormalizeGroups(Node, usize),
    /// Forward sign(x) with ties to +1; backward passes through where |x| <= clip.
    SteSign(Node, f64),
    /// Forward 1[sigmoid(x) > eps]; backward is d/dx sigmoid(x).
    SteGate(Node),
    /// y = s * a with s a scalar node.
    ScalarMul { s: Node, a: Node },
}

/// Eager Wengert tape. Values are computed as ops are recorded; backward
/// traverses the node list in reverse and accumulates into `ParamStore`
/// gradients.
pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Tensor>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softplus ln(1 + e^x).
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { ops: Vec::new(), vals: Vec::new() }
    }

    pub fn value(&self, n: Node) -> &Tensor {
        &self.vals[n.0]
    }

    pub fn scalar_value(&self, n: Node) -> f64 {
        self.vals[n.0].data[0]
    }

    fn push(&mut self, op: Op, val: Tensor) -> Result<Node> {
        if !val.all_finite() {
            return Err(Error::NonFinite {
                node: self.ops.len(),
                context: format!("{op:?}"),
            });
        }
        self.ops.push(op);
        self.vals.push(val);
        Ok(Node(self.vals.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Node> {
        self.push(Op::Constant, t)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Node> {
        let v = store.value(id).clone();
        self.push(Op::Param(id), v)
    }

    pub fn affine(&mut self, x: Node, w: Node, b: Option<Node>) -> Result<Node> {
        let (xv, wv) = (&self.vals[x.0], &self.vals[w.0]);
        let (n, k_in) = (xv.rows(), xv.cols());
        let (k_out, w_in) = (wv.rows(), wv.cols());
        if k_in != w_in {
            return Err(Error::ShapeMismatch(format!(
                "affine: x is [{n},{k_in}], w is [{k_out},{w_in}]"
            )));
        }
        let mut out = vec![0.0; n * k_out];
        for r in 0..n {
            for o in 0..k_out {
                let mut acc = 0.0;
                for i in 0..k_in {
                    acc += xv.data[r * k_in + i] * wv.data[o * w_in + i];
                }
                out[r * k_out + o] = acc;
            }
        }
        if let Some(b) = b {
            let bv = &self.vals[b.0];
            if bv.len() != k_out {
                return Err(Error::ShapeMismatch(format!(
                    "affine bias: expected {k_out}, got {}",
                    bv.len()
                )));
            }
            for r in 0..n {
                for o in 0..k_out {
                    out[r * k_out + o] += bv.data[o];
                }
            }
        }
        self.push(Op::Affine { x, w, b }, Tensor::new(vec![n, k_out], out))
    }

    fn unary(&mut self, x: Node, f: impl Fn(f64) -> f64, op: Op) -> Result<Node> {
        let v = &self.vals[x.0];
        let out = Tensor::new(v.shape.clone(), v.data.iter().map(|&a| f(a)).collect());
        self.push(op, out)
    }

    pub fn sigmoid(&mut self, x: Node) -> Result<Node> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Node) -> Result<Node> {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Node) -> Result<Node> {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Node) -> Result<Node> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn scale(&mut self, x: Node, c: f64) -> Result<Node> {
        self.unary(x, |a| a * c, Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: Node, c: f64) -> Result<Node> {
        self.unary(x, |a| a + c, Op::AddConst(x))
    }

    fn binary(&mut self, a: Node, b: Node, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Node> {
        let (av, bv) = (&self.vals[a.0], &self.vals[b.0]);
        if av.shape != bv.shape {
            return Err(Error::ShapeMismatch(format!(
                "elementwise: {:?} vs {:?}",
                av.shape, bv.shape
            )));
        }
        let data = av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape.clone(), data);
        self.push(op, out)
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Node) -> Result<Node> {
        let mut acc = 0.0;
        for v in &self.vals[x.0].data {
            acc += v;
        }
        self.push(Op::Sum(x), Tensor::scalar(acc))
    }

    pub fn mean(&mut self, x: Node) -> Result<Node> {
        let n = self.vals[x.0].len() as f64;
        let mut acc = 0.0;
        for v in &self.vals[x.0].data {
            acc += v;
        }
        self.push(Op::Mean(x), Tensor::scalar(acc / n))
    }

    pub fn concat_cols(&mut self, a: Node, b: Node) -> Result<Node> {
        let (av, bv) = (&self.vals[a.0], &self.vals[b.0]);
        let n = av.rows();
        if bv.rows() != n {
            return Err(Error::ShapeMismatch("concat_cols rows differ".into()));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            out.extend_from_slice(&av.data[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bv.data[r * cb..(r + 1) * cb]);
        }
        self.push(Op::ConcatCols(a, b), Tensor::new(vec![n, ca + cb], out))
    }

    pub fn slice_cols(&mut self, x: Node, from: usize, to: usize) -> Result<Node> {
        let v = &self.vals[x.0];
        let (n, c) = (v.rows(), v.cols());
        if to > c || from >= to {
            return Err(Error::ShapeMismatch(format!(
                "slice_cols {from}..{to} of {c}"
            )));
        }
        let w = to - from;
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&v.data[r * c + from..r * c + to]);
        }
        self.push(Op::SliceCols(x, from, to), Tensor::new(vec![n, w], out))
    }

    pub fn tile_cols(&mut self, x: Node, times: usize) -> Result<Node> {
        let v = &self.vals[x.0];
        let (n, c) = (v.rows(), v.cols());
        let mut out = Vec::with_capacity(n * c * times);
        for r in 0..n {
            for _ in 0..times {
                out.extend_from_slice(&v.data[r * c..(r + 1) * c]);
            }
        }
        self.push(Op::TileCols(x, times), Tensor::new(vec![n, c * times], out))
    }

    pub fn normalize_groups(&mut self, x: Node, g: usize) -> Result<Node> {
        let v = &self.vals[x.0];
        if v.cols() % g != 0 {
            return Err(Error::ShapeMismatch(format!(
                "normalize_groups: {} cols not divisible by {g}",
                v.cols()
            )));
        }
        let mut out = v.data.clone();
        for chunk in out.chunks_mut(g) {
            let mut nrm = 0.0;
            for c in chunk.iter() {
                nrm += c * c;
            }
            let nrm = nrm.sqrt().max(1e-12);
            for c in chunk.iter_mut() {
                *c /= nrm;
            }
        }
        self.push(Op::NormalizeGroups(x, g), Tensor::new(v.shape.clone(), out))
    }

    pub fn ste_sign(&mut self, x: Node, clip: f64) -> Result<Node> {
        self.unary(x, |a| if a >= 0.0 { 1.0 } else { -1.0 }, Op::SteSign(x, clip))
    }

    pub fn ste_gate(&mut self, x: Node, eps: f64) -> Result<Node> {
        self.unary(
            x,
            |a| if sigmoid(a) > eps { 1.0 } else { 0.0 },
            Op::SteGate(x),
        )
    }

    pub fn scalar_mul(&mut self, s: Node, a: Node) -> Result<Node> {
        let sv = self.vals[s.0].data[0];
        let av = &self.vals[a.0];
        let out = Tensor::new(av.shape.clone(), av.data.iter().map(|&x| sv * x).collect());
        self.push(Op::ScalarMul { s, a }, out)
    }

    /// Reverse pass. `seeds` injects upstream gradients at arbitrary nodes
    /// (used to splice in the analytic renderer/loss gradients); param
    /// gradients accumulate into the store.
    pub fn backward(&mut self, store: &mut ParamStore, seeds: &[(Node, Tensor)]) -> Result<()> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.vals.len()];
        for (node, g) in seeds {
            if g.shape != self.vals[node.0].shape {
                return Err(Error::ShapeMismatch(format!(
                    "seed gradient shape {:?} vs node shape {:?}",
                    g.shape, self.vals[node.0].shape
                )));
            }
            match &mut grads[node.0] {
                Some(acc) => {
                    for (a, b) in acc.data.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
                slot => *slot = Some(g.clone()),
            }
        }

        for idx in (0..self.ops.len()).rev() {
            let gy = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            macro_rules! acc {
                ($node:expr, $i:expr, $v:expr) => {{
                    let node: Node = $node;
                    let slot = &mut grads[node.0];
                    if slot.is_none() {
                        *slot = Some(Tensor::zeros(self.vals[node.0].shape.clone()));
                    }
                    slot.as_mut().unwrap().data[$i] += $v;
                }};
            }
            match self.ops[idx].clone() {
                Op::Constant => {}
                Op::Param(id) => {
                    let pg = &mut store.entries[id.0].grad;
                    for (a, b) in pg.data.iter_mut().zip(&gy.data) {
                        *a += b;
                    }
                }
                Op::Affine { x, w, b } => {
                    let (n, k_in) = (self.vals[x.0].rows(), self.vals[x.0].cols());
                    let k_out = self.vals[w.0].rows();
                    for r in 0..n {
                        for o in 0..k_out {
                            let g = gy.data[r * k_out + o];
                            if g == 0.0 {
                                continue;
                            }
                            for i in 0..k_in {
                                let wv = self.vals[w.0].data[o * k_in + i];
                                let xv = self.vals[x.0].data[r * k_in + i];
                                acc!(x, r * k_in + i, g * wv);
                                acc!(w, o * k_in + i, g * xv);
                            }
                            if let Some(b) = b {
                                acc!(b, o, g);
                            }
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    for i in 0..gy.data.len() {
                        let y = self.vals[idx].data[i];
                        acc!(x, i, gy.data[i] * y * (1.0 - y));
                    }
                }
                Op::Tanh(x) => {
                    for i in 0..gy.data.len() {
                        let y = self.vals[idx].data[i];
                        acc!(x, i, gy.data[i] * (1.0 - y * y));
                    }
                }
                Op::Softplus(x) => {
                    for i in 0..gy.data.len() {
                        let xv = self.vals[x.0].data[i];
                        acc!(x, i, gy.data[i] * sigmoid(xv));
                    }
                }
                Op::Exp(x) => {
                    for i in 0..gy.data.len() {
                        acc!(x, i, gy.data[i] * self.vals[idx].data[i]);
                    }
                }
                Op::Add(a, b) => {
                    for i in 0..gy.data.len() {
                        acc!(a, i, gy.data[i]);
                        acc!(b, i, gy.data[i]);
                    }
                }
                Op::Sub(a, b) => {
                    for i in 0..gy.data.len() {
                        acc!(a, i, gy.data[i]);
                        acc!(b, i, -gy.data[i]);
                    }
                }
                Op::Mul(a, b) => {
                    for i in 0..gy.data.len() {
                        let (av, bv) = (self.vals[a.0].data[i], self.vals[b.0].data[i]);
                        acc!(a, i, gy.data[i] * bv);
                        acc!(b, i, gy.data[i] * av);
                    }
                }
                Op::Scale(x, c) => {
                    for i in 0..gy.data.len() {
                        acc!(x, i, gy.data[i] * c);
                    }
                }
                Op::AddConst(x) => {
                    for i in 0..gy.data.len() {
                        acc!(x, i, gy.data[i]);
                    }
                }
                Op::Sum(x) => {
                    let g = gy.data[0];
                    for i in 0..self.vals[x.0].len() {
                        acc!(x, i, g);
                    }
                }
                Op::Mean(x) => {
                    let n = self.vals[x.0].len();
                    let g = gy.data[0] / n as f64;
                    for i in 0..n {
                        acc!(x, i, g);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let n = self.vals[a.0].rows();
                    let (ca, cb) = (self.vals[a.0].cols(), self.vals[b.0].cols());
                    for r in 0..n {
                        for i in 0..ca {
                            acc!(a, r * ca + i, gy.data[r * (ca + cb) + i]);
                        }
                        for i in 0..cb {
                            acc!(b, r * cb + i, gy.data[r * (ca + cb) + ca + i]);
                        }
                    }
                }
                Op::SliceCols(x, from, to) => {
                    let c = self.vals[x.0].cols();
                    let w = to - from;
                    for r in 0..self.vals[x.0].rows() {
                        for i in 0..w {
                            acc!(x, r * c + from + i, gy.data[r * w + i]);
                        }
                    }
                }
                Op::TileCols(x, times) => {
                    let (n, c) = (self.vals[x.0].rows(), self.vals[x.0].cols());
                    for r in 0..n {
                        for t in 0..times {
                            for i in 0..c {
                                acc!(x, r * c + i, gy.data[r * c * times + t * c + i]);
                            }
                        }
                    }
                }
                Op::NormalizeGroups(x, g) => {
                    let xv = &self.vals[x.0];
                    let yv = &self.vals[idx];
                    let groups = xv.len() / g;
                    for gi in 0..groups {
                        let base = gi * g;
                        let mut nrm = 0.0;
                        for i in 0..g {
                            nrm += xv.data[base + i] * xv.data[base + i];
                        }
                        let nrm = nrm.sqrt().max(1e-12);
                        let mut dot = 0.0;
                        for i in 0..g {
                            dot += yv.data[base + i] * gy.data[base + i];
                        }
                        for i in 0..g {
                            acc!(x, base + i, (gy.data[base + i] - yv.data[base + i] * dot) / nrm);
                        }
                    }
                }
                Op::SteSign(x, clip) => {
                    for i in 0..gy.data.len() {
                        let xv = self.vals[x.0].data[i];
                        if xv.abs() <= clip {
                            acc!(x, i, gy.data[i]);
                        }
                    }
                }
                Op::SteGate(x) => {
                    for i in 0..gy.data.len() {
                        let s = sigmoid(self.vals[x.0].data[i]);
                        acc!(x, i, gy.data[i] * s * (1.0 - s));
                    }
                }
                Op::ScalarMul { s, a } => {
                    let sv = self.vals[s.0].data[0];
                    let mut ds = 0.0;
                    for i in 0..gy.data.len() {
                        ds += gy.data[i] * self.vals[a.0].data[i];
                        acc!(a, i, gy.data[i] * sv);
                    }
                    acc!(s, 0, ds);
                }
            }
        }
        Ok(())
    }

    /// Backward from a scalar loss node with seed 1.
    pub fn backward_scalar(&mut self, store: &mut ParamStore, loss: Node) -> Result<()> {
        if self.vals[loss.0].len() != 1 {
            return Err(Error::ShapeMismatch("backward: loss is not scalar".into()));
        }
        self.backward(store, &[(loss, Tensor::scalar(1.0))])
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Plain dense layer weights, outside any training session.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// [out, in]
    pub w: Tensor,
    /// [out]
    pub b: Tensor,
}

/// A small MLP with tanh hidden activations. The output is raw; heads are
/// applied by the caller.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Xavier-style init over the given layer sizes, e.g. [in, h, out].
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        for win in sizes.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let scale = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Tensor::new(
                vec![fan_out, fan_in],
                (0..fan_out * fan_in)
                    .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale * 1.7320508075688772)
                    .collect(),
            );
            let b = Tensor::zeros(vec![fan_out]);
            layers.push(Linear { w, b });
        }
        Mlp { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Storage cost at 32 bits per parameter.
    pub fn byte_size(&self) -> usize {
        self.param_count() * 4
    }

    pub fn round_f32(&mut self) {
        for l in &mut self.layers {
            l.w.round_f32();
            l.b.round_f32();
        }
    }
}

/// Tape-registered view of an [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl MlpParams {
    pub fn register(store: &mut ParamStore, mlp: &Mlp) -> Self {
        let layers = mlp
            .layers
            .iter()
            .map(|l| (store.add(l.w.clone()), store.add(l.b.clone())))
            .collect();
        MlpParams { layers }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn export(&self, store: &ParamStore) -> Mlp {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|&(w, b)| Linear {
                    w: store.value(w).clone(),
                    b: store.value(b).clone(),
                })
                .collect(),
        }
    }

    /// Forward through all layers: tanh between layers, raw last output.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Node) -> Result<Node> {
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wn = tape.param(store, w)?;
            let bn = tape.param(store, b)?;
            x = tape.affine(x, wn, Some(bn))?;
            if i + 1 < self.layers.len() {
                x = tape.tanh(x)?;
            }
        }
        Ok(x)
    }
}

/// Forward an [`Mlp`] without a store (constant weights), same arithmetic
/// as [`MlpParams::forward`].
pub fn mlp_forward_const(tape: &mut Tape, mlp: &Mlp, mut x: Node) -> Result<Node> {
    for (i, l) in mlp.layers.iter().enumerate() {
        let wn = tape.constant(l.w.clone())?;
        let bn = tape.constant(l.b.clone())?;
        x = tape.affine(x, wn, Some(bn))?;
        if i + 1 < mlp.layers.len() {
            x = tape.tanh(x)?;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn affine_zero_weights_gives_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])).unwrap();
        let w = tape.constant(Tensor::zeros(vec![4, 3])).unwrap();
        let y = tape.affine(x, w, None).unwrap();
        assert!(tape.value(y).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_identity_passes_through() {
        let mut tape = Tape::new();
        let v = vec![0.3, -1.2, 7.5];
        let x = tape.constant(Tensor::new(vec![1, 3], v.clone())).unwrap();
        let w = tape
            .constant(Tensor::new(
                vec![3, 3],
                vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            ))
            .unwrap();
        let b = tape.constant(Tensor::zeros(vec![3])).unwrap();
        let y = tape.affine(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data, v);
    }

    #[test]
    fn two_layer_sigmoid_mlp_matches_hand_evaluation() {
        // Hand-rolled oracle: two matmuls + sigmoids on fixed weights.
        let w1 = [[0.5, -0.3], [0.1, 0.8]];
        let b1 = [0.05, -0.2];
        let w2 = [[1.2, -0.7], [0.4, 0.9]];
        let b2 = [0.0, 0.3];
        let xin = [0.6, -1.1];

        let mut h = [0.0f64; 2];
        for o in 0..2 {
            let z: f64 = w1[o][0] * xin[0] + w1[o][1] * xin[1] + b1[o];
            h[o] = 1.0 / (1.0 + (-z).exp());
        }
        let mut expect = [0.0f64; 2];
        for o in 0..2 {
            let z = w2[o][0] * h[0] + w2[o][1] * h[1] + b2[o];
            expect[o] = 1.0 / (1.0 + (-z).exp());
        }

        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2], xin.to_vec())).unwrap();
        let w1n = tape.constant(Tensor::new(vec![2, 2], w1.concat())).unwrap();
        let b1n = tape.constant(Tensor::new(vec![2], b1.to_vec())).unwrap();
        let w2n = tape.constant(Tensor::new(vec![2, 2], w2.concat())).unwrap();
        let b2n = tape.constant(Tensor::new(vec![2], b2.to_vec())).unwrap();
        let a1 = tape.affine(x, w1n, Some(b1n)).unwrap();
        let s1 = tape.sigmoid(a1).unwrap();
        let a2 = tape.affine(s1, w2n, Some(b2n)).unwrap();
        let s2 = tape.sigmoid(a2).unwrap();
        for (got, want) in tape.value(s2).data.iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_sum_of_param_is_ones() {
        let mut store = ParamStore::new();
        let p = store.add(Tensor::new(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]));
        let mut tape = Tape::new();
        let pn = tape.param(&store, p).unwrap();
        let loss = tape.sum(pn).unwrap();
        tape.backward_scalar(&mut store, loss).unwrap();
        assert_eq!(store.grad(p).data, vec![1.0; 4]);
    }

    #[test]
    fn backward_least_squares_closed_form() {
        // loss = 0.5 * ||W x - y||^2, grad_W = (Wx - y) x^T
        let wv = vec![0.4, -0.2, 0.9, 0.3];
        let xv = vec![1.5, -0.5];
        let yv = vec![0.2, 0.7];
        let mut store = ParamStore::new();
        let w = store.add(Tensor::new(vec![2, 2], wv.clone()));
        let mut tape = Tape::new();
        let wn = tape.param(&store, w).unwrap();
        let x = tape.constant(Tensor::new(vec![1, 2], xv.clone())).unwrap();
        let y = tape.constant(Tensor::new(vec![1, 2], yv.clone())).unwrap();
        let pred = tape.affine(x, wn, None).unwrap();
        let r = tape.sub(pred, y).unwrap();
        let sq = tape.mul(r, r).unwrap();
        let s = tape.sum(sq).unwrap();
        let loss = tape.scale(s, 0.5).unwrap();
        tape.backward_scalar(&mut store, loss).unwrap();

        let r0 = wv[0] * xv[0] + wv[1] * xv[1] - yv[0];
        let r1 = wv[2] * xv[0] + wv[3] * xv[1] - yv[1];
        let expect = [r0 * xv[0], r0 * xv[1], r1 * xv[0], r1 * xv[1]];
        for (g, e) in store.grad(w).data.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    /// Central finite differences on a scalar-valued function of one param.
    pub fn finite_diff(
        store: &mut ParamStore,
        id: ParamId,
        mut eval: impl FnMut(&ParamStore) -> f64,
    ) -> Vec<f64> {
        let h = 1e-5;
        let n = store.value(id).len();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let orig = store.value(id).data[i];
            store.value_mut(id).data[i] = orig + h;
            let fp = eval(store);
            store.value_mut(id).data[i] = orig - h;
            let fm = eval(store);
            store.value_mut(id).data[i] = orig;
            out.push((fp - fm) / (2.0 * h));
        }
        out
    }

    fn assert_grad_close(analytic: &[f64], numeric: &[f64]) {
        for (a, n) in analytic.iter().zip(numeric) {
            let denom = n.abs().max(a.abs());
            if denom < 1e-7 {
                assert!((a - n).abs() < 1e-7, "near-zero grad: {a} vs {n}");
            } else {
                assert!((a - n).abs() / denom < 1e-4, "rel err: {a} vs {n}");
            }
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut r = rng(7);
        let mlp = Mlp::init(&[3, 5, 2], &mut r);
        let mut store = ParamStore::new();
        let params = MlpParams::register(&mut store, &mlp);
        let xin = Tensor::new(vec![2, 3], (0..6).map(|i| (i as f64 - 2.5) * 0.3).collect());

        let eval = |store: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.constant(xin.clone()).unwrap();
            let p2 = params.clone();
            let out = p2.forward(&mut tape, store, x).unwrap();
            let sg = tape.sigmoid(out).unwrap();
            let sq = tape.mul(sg, sg).unwrap();
            let loss = tape.sum(sq).unwrap();
            tape.scalar_value(loss)
        };

        let mut tape = Tape::new();
        let x = tape.constant(xin.clone()).unwrap();
        let out = params.forward(&mut tape, &store, x).unwrap();
        let sg = tape.sigmoid(out).unwrap();
        let sq = tape.mul(sg, sg).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward_scalar(&mut store, loss).unwrap();

        for id in params.ids() {
            let analytic = store.grad(id).data.clone();
            let numeric = finite_diff(&mut store, id, eval);
            assert_grad_close(&analytic, &numeric);
        }
    }

    #[test]
    fn adam_first_step_bias_corrected() {
        let mut store = ParamStore::new();
        let p = store.add(Tensor::scalar(1.0));
        store.entries[p.0].grad.data[0] = 1.0;
        store.adam_step(&[p], 0.1, (0.9, 0.999), 1e-8).unwrap();
        // first bias-corrected step moves by ~lr
        assert!((store.value(p).data[0] - 0.9).abs() < 1e-6);
        assert_eq!(store.entries[p.0].step_count, 1);
        assert_eq!(store.grad(p).data[0], 0.0);
    }

    #[test]
    fn adam_zero_grad_is_noop_on_value() {
        let mut store = ParamStore::new();
        let p = store.add(Tensor::scalar(2.5));
        store.adam_step(&[p], 0.1, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(store.value(p).data[0], 2.5);
        assert_eq!(store.entries[p.0].step_count, 1);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // scalar oracle: minimize (x-3)^2 from x=0
        let mut store = ParamStore::new();
        let p = store.add(Tensor::scalar(0.0));
        for _ in 0..100 {
            let x = store.value(p).data[0];
            store.entries[p.0].grad.data[0] = 2.0 * (x - 3.0);
            store.adam_step(&[p], 0.3, (0.9, 0.999), 1e-8).unwrap();
        }
        assert!((store.value(p).data[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn adam_rejects_non_finite_grad() {
        let mut store = ParamStore::new();
        let p = store.add(Tensor::scalar(1.0));
        store.entries[p.0].grad.data[0] = f64::NAN;
        assert!(store.adam_step(&[p], 0.1, (0.9, 0.999), 1e-8).is_err());
        assert_eq!(store.value(p).data[0], 1.0);
    }

    #[test]
    fn ste_gate_forward_and_backward() {
        // sigmoid(score)=0.9 -> forward 1, backward factor 0.9*0.1
        let score = (0.9f64 / 0.1f64).ln();
        let mut store = ParamStore::new();
        let p = store.add(Tensor::scalar(score));
        let mut tape = Tape::new();
        let pn = tape.param(&store, p).unwrap();
        let g = tape.ste_gate(pn, 0.01).unwrap();
        assert_eq!(tape.value(g).data[0], 1.0);
        let s = tape.sum(g).unwrap();
        tape.backward_scalar(&mut store, s).unwrap();
        assert!((store.grad(p).data[0] - 0.9 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn ste_gate_below_threshold() {
        let score = (0.005f64 / 0.995f64).ln();
        let mut store = ParamStore::new();
        let p = store.add(Tensor::scalar(score));
        let mut tape = Tape::new();
        let pn = tape.param(&store, p).unwrap();
        let g = tape.ste_gate(pn, 0.01).unwrap();
        assert_eq!(tape.value(g).data[0], 0.0);
        let s = tape.sum(g).unwrap();
        tape.backward_scalar(&mut store, s).unwrap();
        assert!((store.grad(p).data[0] - 0.005 * 0.995).abs() < 1e-9);
    }

    #[test]
    fn ste_gate_soft_branch_matches_finite_differences() {
        // numeric grad of sigmoid matches the gate backward to 1e-6
        let mut store = ParamStore::new();
        let p = store.add(Tensor::scalar(0.37));
        let mut tape = Tape::new();
        let pn = tape.param(&store, p).unwrap();
        let g = tape.ste_gate(pn, 0.01).unwrap();
        let s = tape.sum(g).unwrap();
        tape.backward_scalar(&mut store, s).unwrap();
        let analytic = store.grad(p).data[0];

        let h = 1e-6;
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let numeric = (sig(0.37 + h) - sig(0.37 - h)) / (2.0 * h);
        assert!((analytic - numeric).abs() < 1e-6);
    }

    #[test]
    fn ste_sign_convention_and_clip() {
        let mut store = ParamStore::new();
        let p = store.add(Tensor::new(vec![1, 3], vec![-0.3, 0.0, 2.5]));
        let mut tape = Tape::new();
        let pn = tape.param(&store, p).unwrap();
        let s = tape.ste_sign(pn, 1.0).unwrap();
        assert_eq!(tape.value(s).data, vec![-1.0, 1.0, 1.0]);
        let sum = tape.sum(s).unwrap();
        tape.backward_scalar(&mut store, sum).unwrap();
        // pass-through where |x| <= 1
        assert_eq!(store.grad(p).data, vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn binarized_layer_equals_scaled_sign_evaluation() {
        let mut r = rng(11);
        let latent: Vec<f64> = (0..12).map(|_| r.gen::<f64>() - 0.5).collect();
        let xv: Vec<f64> = (0..4).map(|_| r.gen::<f64>() - 0.5).collect();
        let scale = 0.17;

        // scratch evaluation with weights replaced by scale*sign(w)
        let mut expect = [0.0f64; 3];
        for o in 0..3 {
            for i in 0..4 {
                let w = latent[o * 4 + i];
                let sw = if w >= 0.0 { 1.0 } else { -1.0 };
                expect[o] += scale * sw * xv[i];
            }
        }

        let mut tape = Tape::new();
        let wl = tape.constant(Tensor::new(vec![3, 4], latent)).unwrap();
        let sgn = tape.ste_sign(wl, 1.0).unwrap();
        let sc = tape.constant(Tensor::scalar(scale)).unwrap();
        let wb = tape.scalar_mul(sc, sgn).unwrap();
        let x = tape.constant(Tensor::new(vec![1, 4], xv)).unwrap();
        let y = tape.affine(x, wb, None).unwrap();
        for (g, e) in tape.value(y).data.iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic_across_tapes() {
        let mut r = rng(3);
        let mlp = Mlp::init(&[4, 8, 3], &mut r);
        let x = Tensor::new(vec![5, 4], (0..20).map(|i| (i as f64).sin()).collect());
        let run = || {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone()).unwrap();
            let y = mlp_forward_const(&mut tape, &mlp, xn).unwrap();
            tape.value(y).data.clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "bit-identical forward evaluation");
    }

    #[test]
    fn non_finite_forward_reports_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e308)).unwrap();
        let doubled = tape.scale(x, 10.0);
        assert!(matches!(doubled, Err(Error::NonFinite { .. })));
    }
}

//! Dynamic-anchor scene representation: anchors decode to k Gaussians
//! through a small attribute network, and a mask network drives anchor
//! activation with straight-through gating.

use crate::autodiff::{mlp_forward_const, Mlp, MlpParams, Node, ParamStore, Tape, Tensor};
use crate::render::GaussianPrimitive;
use crate::{Error, Result};
use rand::Rng;

/// Values produced per decoded Gaussian: offset(3) color(3) rot(4)
/// scale(3) opacity(1).
pub const ATTRS_PER_GAUSSIAN: usize = 14;

/// Anchor state for a whole scene, tensor-backed so it can move on and
/// off the tape wholesale. Row n of each tensor belongs to anchor n;
/// ordering is stable for the whole sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    /// [N, 3] positions
    pub x: Tensor,
    /// [N, D] latent features
    pub f: Tensor,
    /// [N, 3] positive per-axis offset scalings
    pub l: Tensor,
}

impl AnchorSet {
    pub fn new(x: Tensor, f: Tensor, l: Tensor) -> Result<Self> {
        let n = x.rows();
        if x.cols() != 3 || l.cols() != 3 || f.rows() != n || l.rows() != n {
            return Err(Error::ShapeMismatch(format!(
                "anchor set: x {:?}, f {:?}, l {:?}",
                x.shape, f.shape, l.shape
            )));
        }
        if !x.all_finite() || !f.all_finite() || !l.all_finite() {
            return Err(Error::InvalidConfig("anchor set has non-finite values".into()));
        }
        if l.data.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidConfig("anchor scaling l must be positive".into()));
        }
        Ok(AnchorSet { x, f, l })
    }

    pub fn count(&self) -> usize {
        self.x.rows()
    }

    pub fn feat_dim(&self) -> usize {
        self.f.cols()
    }

    /// Random anchors in a centered box, used for I-frame initialization.
    pub fn random(n: usize, d: usize, extent: f64, l_init: f64, rng: &mut impl Rng) -> Self {
        let x = Tensor::new(
            vec![n, 3],
            (0..n * 3).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * extent).collect(),
        );
        let f = Tensor::new(
            vec![n, d],
            (0..n * d).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * 0.1).collect(),
        );
        let l = Tensor::new(vec![n, 3], vec![l_init; n * 3]);
        AnchorSet { x, f, l }
    }

    pub fn round_f32(&mut self) {
        self.x.round_f32();
        self.f.round_f32();
        self.l.round_f32();
    }
}

/// Attribute network N_G: (f ⊕ d_c) -> k·14 raw values, two hidden layers.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeNet {
    pub mlp: Mlp,
    pub k: usize,
    pub s_base: f64,
}

impl AttributeNet {
    pub fn init(d: usize, h: usize, k: usize, s_base: f64, rng: &mut impl Rng) -> Self {
        AttributeNet {
            mlp: Mlp::init(&[d + 3, h, h, k * ATTRS_PER_GAUSSIAN], rng),
            k,
            s_base,
        }
    }

    pub fn byte_size(&self) -> usize {
        self.mlp.byte_size()
    }
}

/// Mask network N_m: (f ⊕ x) -> scalar significance score, one hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskNet {
    pub mlp: Mlp,
}

impl MaskNet {
    pub fn init(d: usize, h: usize, rng: &mut impl Rng) -> Self {
        MaskNet { mlp: Mlp::init(&[d + 3, h, 1], rng) }
    }

    pub fn byte_size(&self) -> usize {
        self.mlp.byte_size()
    }
}

/// Warm start: carry the previous frame's optimized mask weights into the
/// next frame (optimizer state is fresh because registration creates new
/// param entries).
pub fn warm_start_mask(prev: &MaskNet) -> MaskNet {
    prev.clone()
}

/// Either a trainable tape-registered network or frozen constant weights.
/// Both paths run the same arithmetic, which the codec's encode/decode
/// parity depends on.
pub enum NetHandle<'a> {
    Trained(&'a MlpParams),
    Frozen(&'a Mlp),
}

impl NetHandle<'_> {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Node) -> Result<Node> {
        match self {
            NetHandle::Trained(p) => p.forward(tape, store, x),
            NetHandle::Frozen(m) => mlp_forward_const(tape, m, x),
        }
    }
}

/// Tape handles for the decoded attributes of all k·N Gaussians,
/// one node per attribute per offset slot.
pub struct DecodedGaussians {
    pub n: usize,
    pub k: usize,
    /// each [N,3]
    pub mu: Vec<Node>,
    /// each [N,3], in [0,1]
    pub color: Vec<Node>,
    /// each [N,4], unit rows
    pub rot: Vec<Node>,
    /// each [N,3], positive
    pub scale: Vec<Node>,
    /// each [N,1], in (0,1)
    pub alpha: Vec<Node>,
}

impl DecodedGaussians {
    /// Flatten to renderable primitives, anchor-major: index = n·k + slot.
    pub fn to_primitives(&self, tape: &Tape) -> Vec<GaussianPrimitive> {
        let mut out = Vec::with_capacity(self.n * self.k);
        for a in 0..self.n {
            for i in 0..self.k {
                let mu = tape.value(self.mu[i]);
                let c = tape.value(self.color[i]);
                let r = tape.value(self.rot[i]);
                let s = tape.value(self.scale[i]);
                let al = tape.value(self.alpha[i]);
                out.push(GaussianPrimitive {
                    mu: [mu.data[a * 3], mu.data[a * 3 + 1], mu.data[a * 3 + 2]],
                    color: [c.data[a * 3], c.data[a * 3 + 1], c.data[a * 3 + 2]],
                    rot: [
                        r.data[a * 4],
                        r.data[a * 4 + 1],
                        r.data[a * 4 + 2],
                        r.data[a * 4 + 3],
                    ],
                    s: [s.data[a * 3], s.data[a * 3 + 1], s.data[a * 3 + 2]],
                    alpha: al.data[a],
                });
            }
        }
        out
    }

    /// Convert per-primitive renderer gradients (same ordering as
    /// `to_primitives`) into tape seed gradients.
    pub fn seed_grads(&self, grads: &[crate::render::GaussianGrad]) -> Vec<(Node, Tensor)> {
        assert_eq!(grads.len(), self.n * self.k);
        let mut seeds = Vec::with_capacity(self.k * 5);
        for i in 0..self.k {
            let mut d_mu = Tensor::zeros(vec![self.n, 3]);
            let mut d_c = Tensor::zeros(vec![self.n, 3]);
            let mut d_r = Tensor::zeros(vec![self.n, 4]);
            let mut d_s = Tensor::zeros(vec![self.n, 3]);
            let mut d_a = Tensor::zeros(vec![self.n, 1]);
            for a in 0..self.n {
                let g = &grads[a * self.k + i];
                for d in 0..3 {
                    d_mu.data[a * 3 + d] = g.mu[d];
                    d_c.data[a * 3 + d] = g.color[d];
                    d_s.data[a * 3 + d] = g.s[d];
                }
                for d in 0..4 {
                    d_r.data[a * 4 + d] = g.rot[d];
                }
                d_a.data[a] = g.alpha;
            }
            seeds.push((self.mu[i], d_mu));
            seeds.push((self.color[i], d_c));
            seeds.push((self.rot[i], d_r));
            seeds.push((self.scale[i], d_s));
            seeds.push((self.alpha[i], d_a));
        }
        seeds
    }
}

/// Decode anchors into k Gaussians each: raw = mlp(f ⊕ d_c), then the
/// activation heads, with μᵢ = x + oᵢ ⊙ l.
pub fn decode_anchors(
    tape: &mut Tape,
    store: &ParamStore,
    x: Node,
    f: Node,
    l: Node,
    net: &NetHandle,
    k: usize,
    s_base: f64,
    view_dir: [f64; 3],
) -> Result<DecodedGaussians> {
    let n = tape.value(x).rows();
    let dc = tape.constant(Tensor::new(vec![1, 3], view_dir.to_vec()))?;
    let dc_rows = {
        // broadcast the view direction to one row per anchor
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&tape.value(dc).data.clone());
        }
        tape.constant(Tensor::new(vec![n, 3], data))?
    };
    let input = tape.concat_cols(f, dc_rows)?;
    let raw = net.forward(tape, store, input)?;
    if tape.value(raw).cols() != k * ATTRS_PER_GAUSSIAN {
        return Err(Error::ShapeMismatch(format!(
            "attribute net output {} cols, expected {}",
            tape.value(raw).cols(),
            k * ATTRS_PER_GAUSSIAN
        )));
    }

    let mut out = DecodedGaussians {
        n,
        k,
        mu: Vec::with_capacity(k),
        color: Vec::with_capacity(k),
        rot: Vec::with_capacity(k),
        scale: Vec::with_capacity(k),
        alpha: Vec::with_capacity(k),
    };
    for i in 0..k {
        let b = i * ATTRS_PER_GAUSSIAN;
        let o_raw = tape.slice_cols(raw, b, b + 3)?;
        let scaled_o = tape.mul(o_raw, l)?;
        let mu = tape.add(x, scaled_o)?;
        let c_raw = tape.slice_cols(raw, b + 3, b + 6)?;
        let color = tape.sigmoid(c_raw)?;
        let r_raw = tape.slice_cols(raw, b + 6, b + 10)?;
        let rot = tape.normalize_groups(r_raw, 4)?;
        let s_raw = tape.slice_cols(raw, b + 10, b + 13)?;
        let sp = tape.softplus(s_raw)?;
        let scale = tape.scale(sp, s_base)?;
        let a_raw = tape.slice_cols(raw, b + 13, b + 14)?;
        let alpha = tape.sigmoid(a_raw)?;
        out.mu.push(mu);
        out.color.push(color);
        out.rot.push(rot);
        out.scale.push(scale);
        out.alpha.push(alpha);
    }
    Ok(out)
}

/// Mask scores m = N_m(f ⊕ x), one per anchor: returns an [N,1] node.
pub fn mask_scores(
    tape: &mut Tape,
    store: &ParamStore,
    x: Node,
    f: Node,
    net: &NetHandle,
) -> Result<Node> {
    let input = tape.concat_cols(f, x)?;
    net.forward(tape, store, input)
}

/// Apply straight-through gates to scale and opacity in place of the
/// decoded nodes: ŝ = M·s, α̂ = M·α. Positions, rotations and colors are
/// untouched. Returns the gate node alongside the gated set.
pub fn gate_attributes(
    tape: &mut Tape,
    decoded: DecodedGaussians,
    scores: Node,
    eps_m: f64,
) -> Result<(DecodedGaussians, Node)> {
    let gate = tape.ste_gate(scores, eps_m)?; // [N,1]
    let gate3 = tape.tile_cols(gate, 3)?;
    let mut gated = DecodedGaussians {
        n: decoded.n,
        k: decoded.k,
        mu: decoded.mu.clone(),
        color: decoded.color.clone(),
        rot: decoded.rot.clone(),
        scale: Vec::with_capacity(decoded.k),
        alpha: Vec::with_capacity(decoded.k),
    };
    for i in 0..decoded.k {
        gated.scale.push(tape.mul(decoded.scale[i], gate3)?);
        gated.alpha.push(tape.mul(decoded.alpha[i], gate)?);
    }
    Ok((gated, gate))
}

/// Active/vanished split of the anchor index range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivationPartition {
    pub active: Vec<usize>,
    pub vanished: Vec<usize>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Partition by σ(m) > ε_m; matches the forward decision of the STE gate.
pub fn partition(scores: &Tensor, eps_m: f64) -> ActivationPartition {
    let mut active = Vec::new();
    let mut vanished = Vec::new();
    for (i, &m) in scores.data.iter().enumerate() {
        if sigmoid(m) > eps_m {
            active.push(i);
        } else {
            vanished.push(i);
        }
    }
    ActivationPartition { active, vanished }
}

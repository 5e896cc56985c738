//! Binarized transformation caches: per-frame networks predicting anchor
//! motion, feature residuals and their scaling coefficients from previous
//! anchor positions. Forward always uses layer_scale·sign(latent_w); only
//! the weight signs are entropy coded, biases and scales travel in full
//! (32-bit) precision.

use crate::autodiff::{Node, ParamId, ParamStore, Tape, Tensor};
use crate::Result;
use rand::Rng;

/// Frequency bands of the positional encoding; input dim = 3 + 3·2·BANDS.
pub const POSENC_BANDS: usize = 4;
pub const POSENC_DIM: usize = 3 + 3 * 2 * POSENC_BANDS;

/// Straight-through clip used for latent weights.
pub const STE_CLIP: f64 = 1.0;

/// Sinusoidal positional encoding of anchor positions:
/// [x, sin(2^j π x), cos(2^j π x)] for j = 0..BANDS.
pub fn positional_encoding(x: &Tensor) -> Tensor {
    let n = x.rows();
    assert_eq!(x.cols(), 3);
    let mut out = Vec::with_capacity(n * POSENC_DIM);
    for r in 0..n {
        let row = &x.data[r * 3..(r + 1) * 3];
        out.extend_from_slice(row);
        for j in 0..POSENC_BANDS {
            let freq = std::f64::consts::PI * (1u64 << j) as f64;
            for &v in row {
                out.push((freq * v).sin());
                out.push((freq * v).cos());
            }
        }
    }
    Tensor::new(vec![n, POSENC_DIM], out)
}

/// One binarized layer: full-precision latent weights trained with a
/// straight-through estimator, a single trained full-precision scale, and
/// a full-precision bias.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedLinear {
    /// [out, in] latent weights; the forward view is scale·sign(latent_w)
    pub latent_w: Tensor,
    /// [out]
    pub b: Tensor,
    /// scalar layer scale, kept positive by construction at init
    pub scale: f64,
}

impl BinarizedLinear {
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let spread = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let latent_w = Tensor::new(
            vec![fan_out, fan_in],
            (0..fan_out * fan_in)
                .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * spread)
                .collect(),
        );
        // effective binary weights start at the mean latent magnitude
        let scale = latent_w.data.iter().map(|v| v.abs()).sum::<f64>()
            / latent_w.len() as f64;
        BinarizedLinear { latent_w, b: Tensor::zeros(vec![fan_out]), scale }
    }

    /// Sign bits row-major; ties (0.0) code as +1.
    pub fn signs(&self) -> Vec<bool> {
        self.latent_w.data.iter().map(|&w| w >= 0.0).collect()
    }
}

/// A stack of binarized layers with tanh hidden activations.
#[derive(Debug, Clone, PartialEq)]
pub struct BtcNet {
    pub layers: Vec<BinarizedLinear>,
}

impl BtcNet {
    pub fn init(sizes: &[usize], rng: &mut impl Rng) -> Self {
        BtcNet {
            layers: sizes
                .windows(2)
                .map(|w| BinarizedLinear::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn sign_bits(&self) -> Vec<bool> {
        self.layers.iter().flat_map(|l| l.signs()).collect()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.latent_w.len()).sum()
    }

    /// The wire-equivalent network: latent weights collapsed to ±1 and
    /// scale/bias rounded through f32, exactly what a decoder rebuilds
    /// from the bitstream. The encoder adopts this after coding a frame.
    pub fn quantize_for_wire(&self) -> BtcNet {
        BtcNet {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let mut b = l.b.clone();
                    b.round_f32();
                    BinarizedLinear {
                        latent_w: Tensor::new(
                            l.latent_w.shape.clone(),
                            l.latent_w
                                .data
                                .iter()
                                .map(|&w| if w >= 0.0 { 1.0 } else { -1.0 })
                                .collect(),
                        ),
                        b,
                        scale: l.scale as f32 as f64,
                    }
                })
                .collect(),
        }
    }

    /// Rebuild from transmitted pieces.
    pub fn from_wire(sizes: &[usize], signs: &[bool], scales: &[f64], biases: &[Vec<f64>]) -> Self {
        let mut layers = Vec::new();
        let mut off = 0;
        for (li, w) in sizes.windows(2).enumerate() {
            let count = w[0] * w[1];
            let latent_w = Tensor::new(
                vec![w[1], w[0]],
                signs[off..off + count]
                    .iter()
                    .map(|&s| if s { 1.0 } else { -1.0 })
                    .collect(),
            );
            off += count;
            layers.push(BinarizedLinear {
                latent_w,
                b: Tensor::new(vec![w[1]], biases[li].clone()),
                scale: scales[li],
            });
        }
        BtcNet { layers }
    }
}

/// Tape-registered view of a [`BtcNet`].
#[derive(Debug, Clone)]
pub struct BtcNetParams {
    /// (latent_w, bias, scale) per layer
    pub layers: Vec<(ParamId, ParamId, ParamId)>,
}

impl BtcNetParams {
    pub fn register(store: &mut ParamStore, net: &BtcNet) -> Self {
        BtcNetParams {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        store.add(l.latent_w.clone()),
                        store.add(l.b.clone()),
                        store.add(Tensor::scalar(l.scale)),
                    )
                })
                .collect(),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b, s)| [w, b, s]).collect()
    }

    pub fn export(&self, store: &ParamStore) -> BtcNet {
        BtcNet {
            layers: self
                .layers
                .iter()
                .map(|&(w, b, s)| BinarizedLinear {
                    latent_w: store.value(w).clone(),
                    b: store.value(b).clone(),
                    scale: store.value(s).data[0],
                })
                .collect(),
        }
    }
}

/// Trainable or frozen view of a binarized net; both run the identical
/// scale·sign arithmetic.
pub enum BtcHandle<'a> {
    Trained(&'a BtcNetParams),
    Frozen(&'a BtcNet),
}

impl BtcHandle<'_> {
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Node) -> Result<Node> {
        match self {
            BtcHandle::Trained(p) => {
                for (i, &(w, b, s)) in p.layers.iter().enumerate() {
                    let wn = tape.param(store, w)?;
                    let sg = tape.ste_sign(wn, STE_CLIP)?;
                    let sn = tape.param(store, s)?;
                    let wb = tape.scalar_mul(sn, sg)?;
                    let bn = tape.param(store, b)?;
                    x = tape.affine(x, wb, Some(bn))?;
                    if i + 1 < p.layers.len() {
                        x = tape.tanh(x)?;
                    }
                }
                Ok(x)
            }
            BtcHandle::Frozen(net) => {
                for (i, l) in net.layers.iter().enumerate() {
                    let wn = tape.constant(l.latent_w.clone())?;
                    let sg = tape.ste_sign(wn, STE_CLIP)?;
                    let sn = tape.constant(Tensor::scalar(l.scale))?;
                    let wb = tape.scalar_mul(sn, sg)?;
                    let bn = tape.constant(l.b.clone())?;
                    x = tape.affine(x, wb, Some(bn))?;
                    if i + 1 < net.layers.len() {
                        x = tape.tanh(x)?;
                    }
                }
                Ok(x)
            }
        }
    }
}

/// The per-frame pair: BTC_x (output 5: Δx̃, γ^x, γ^f) and BTC_f (output D).
#[derive(Debug, Clone, PartialEq)]
pub struct BtcPair {
    pub net_x: BtcNet,
    pub net_f: BtcNet,
}

impl BtcPair {
    pub fn init(h_b: usize, d_feat: usize, rng: &mut impl Rng) -> Self {
        BtcPair {
            net_x: BtcNet::init(&[POSENC_DIM, h_b, 5], rng),
            net_f: BtcNet::init(&[POSENC_DIM, h_b, d_feat], rng),
        }
    }

    pub fn quantize_for_wire(&self) -> BtcPair {
        BtcPair {
            net_x: self.net_x.quantize_for_wire(),
            net_f: self.net_f.quantize_for_wire(),
        }
    }
}

/// Registered pair for training.
#[derive(Debug, Clone)]
pub struct BtcPairParams {
    pub net_x: BtcNetParams,
    pub net_f: BtcNetParams,
}

impl BtcPairParams {
    pub fn register(store: &mut ParamStore, pair: &BtcPair) -> Self {
        BtcPairParams {
            net_x: BtcNetParams::register(store, &pair.net_x),
            net_f: BtcNetParams::register(store, &pair.net_f),
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.net_x.ids();
        v.extend(self.net_f.ids());
        v
    }

    /// Parameters of BTC_f only (latent weights, biases, scales), the set
    /// whose gradient norm feeds the recalibration statistic.
    pub fn ids_f(&self) -> Vec<ParamId> {
        self.net_f.ids()
    }

    pub fn export(&self, store: &ParamStore) -> BtcPair {
        BtcPair {
            net_x: self.net_x.export(store),
            net_f: self.net_f.export(store),
        }
    }
}

/// Tape handles of one BTC forward pass over all anchors.
pub struct BtcOutputs {
    /// [N,3] raw position update
    pub dx: Node,
    /// [N,1] position scaling coefficient, tanh-bounded by γ_max
    pub gx: Node,
    /// [N,1] feature scaling coefficient
    pub gf: Node,
    /// [N,D] raw feature residual
    pub df: Node,
}

pub enum PairHandle<'a> {
    Trained(&'a BtcPairParams),
    Frozen(&'a BtcPair),
}

/// Run both caches on the (encoded) previous positions.
pub fn btc_forward(
    tape: &mut Tape,
    store: &ParamStore,
    pair: &PairHandle,
    x_prev: &Tensor,
    gamma_max: f64,
) -> Result<BtcOutputs> {
    let enc = tape.constant(positional_encoding(x_prev))?;
    let (hx, hf) = match pair {
        PairHandle::Trained(p) => (
            BtcHandle::Trained(&p.net_x).forward(tape, store, enc)?,
            BtcHandle::Trained(&p.net_f).forward(tape, store, enc)?,
        ),
        PairHandle::Frozen(p) => (
            BtcHandle::Frozen(&p.net_x).forward(tape, store, enc)?,
            BtcHandle::Frozen(&p.net_f).forward(tape, store, enc)?,
        ),
    };
    let dx = tape.slice_cols(hx, 0, 3)?;
    let gx_raw = tape.slice_cols(hx, 3, 4)?;
    let gx_t = tape.tanh(gx_raw)?;
    let gx = tape.scale(gx_t, gamma_max)?;
    let gf_raw = tape.slice_cols(hx, 4, 5)?;
    let gf_t = tape.tanh(gf_raw)?;
    let gf = tape.scale(gf_t, gamma_max)?;
    Ok(BtcOutputs { dx, gx, gf, df: hf })
}

/// x_t = x_{t-1} + γ^x·Δx̃, f_t = f_{t-1} + γ^f·Δf̃ (l is untouched).
pub fn apply_updates(
    tape: &mut Tape,
    x_prev: Node,
    f_prev: Node,
    out: &BtcOutputs,
) -> Result<(Node, Node)> {
    let gx3 = tape.tile_cols(out.gx, 3)?;
    let step_x = tape.mul(gx3, out.dx)?;
    let x_t = tape.add(x_prev, step_x)?;
    let d = tape.value(out.df).cols();
    let gfd = tape.tile_cols(out.gf, d)?;
    let step_f = tape.mul(gfd, out.df)?;
    let f_t = tape.add(f_prev, step_f)?;
    Ok((x_t, f_t))
}

/// Counts of +1/−1 symbols over the sign bits of both networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymbolCounts {
    pub c_plus: usize,
    pub c_minus: usize,
}

impl SymbolCounts {
    pub fn total(&self) -> usize {
        self.c_plus + self.c_minus
    }

    /// Empirical +1 frequency, clamped away from the degenerate endpoints.
    pub fn p_plus(&self) -> f64 {
        let p = self.c_plus as f64 / self.total().max(1) as f64;
        p.clamp(1e-4, 1.0 - 1e-4)
    }
}

pub fn count_symbols(pair: &BtcPair) -> SymbolCounts {
    let mut c_plus = 0;
    let mut total = 0;
    for net in [&pair.net_x, &pair.net_f] {
        for bit in net.sign_bits() {
            total += 1;
            if bit {
                c_plus += 1;
            }
        }
    }
    SymbolCounts { c_plus, c_minus: total - c_plus }
}

/// Exact coded size of the sign stream under a static Bernoulli model:
/// C₊·(−log₂ p) + C₋·(−log₂(1−p)).
pub fn hard_rate(counts: &SymbolCounts, p_b: f64) -> f64 {
    counts.c_plus as f64 * (-p_b.log2()) + counts.c_minus as f64 * (-(1.0 - p_b).log2())
}

/// Differentiable surrogate of the hard rate, a sigmoid relaxation of the
/// sign counts at temperature τ. Converges to `hard_rate` as τ → 0.
pub fn soft_rate(
    tape: &mut Tape,
    store: &ParamStore,
    pair: &BtcPairParams,
    p_b: f64,
    tau: f64,
) -> Result<Node> {
    let p = p_b.clamp(1e-4, 1.0 - 1e-4);
    let c_plus = -p.log2();
    let c_minus = -(1.0 - p).log2();
    let mut total: Option<Node> = None;
    for net in [&pair.net_x, &pair.net_f] {
        for &(w, _, _) in &net.layers {
            let wn = tape.param(store, w)?;
            let scaled = tape.scale(wn, 1.0 / tau)?;
            let soft = tape.sigmoid(scaled)?;
            // per weight: σ·c₊ + (1−σ)·c₋ = σ·(c₊−c₋) + c₋
            let bits = tape.scale(soft, c_plus - c_minus)?;
            let bits = tape.add_const(bits, c_minus)?;
            let s = tape.sum(bits)?;
            total = Some(match total {
                Some(t) => tape.add(t, s)?,
                None => s,
            });
        }
    }
    Ok(total.expect("btc pair has layers"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn positions(n: usize, seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::new(
            vec![n, 3],
            (0..n * 3).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect(),
        )
    }

    #[test]
    fn posenc_dimensions_and_raw_passthrough() {
        let x = positions(4, 1);
        let e = positional_encoding(&x);
        assert_eq!(e.shape, vec![4, POSENC_DIM]);
        for r in 0..4 {
            for d in 0..3 {
                assert_eq!(e.data[r * POSENC_DIM + d], x.data[r * 3 + d]);
            }
            // first band is sin(pi x), cos(pi x)
            let v = x.data[r * 3];
            assert!((e.data[r * POSENC_DIM + 3] - (std::f64::consts::PI * v).sin()).abs() < 1e-15);
            assert!((e.data[r * POSENC_DIM + 4] - (std::f64::consts::PI * v).cos()).abs() < 1e-15);
        }
    }

    fn forward_frozen(pair: &BtcPair, x_prev: &Tensor, gamma_max: f64) -> (Tape, BtcOutputs) {
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let out = btc_forward(&mut tape, &store, &PairHandle::Frozen(pair), x_prev, gamma_max)
            .unwrap();
        (tape, out)
    }

    #[test]
    fn zero_scale_leaves_anchors_unchanged() {
        let mut pair = BtcPair::init(6, 4, &mut rng(2));
        for net in [&mut pair.net_x, &mut pair.net_f] {
            for l in &mut net.layers {
                l.latent_w.data.fill(0.0); // ties -> all +1 signs
                l.b.data.fill(0.0);
                l.scale = 0.0;
            }
        }
        let x_prev = positions(3, 3);
        let f_prev = Tensor::new(vec![3, 4], (0..12).map(|i| i as f64 * 0.1).collect());
        let (mut tape, out) = forward_frozen(&pair, &x_prev, 1.0);
        assert!(tape.value(out.dx).data.iter().all(|&v| v == 0.0));
        assert!(tape.value(out.gx).data.iter().all(|&v| v == 0.0));
        let xp = tape.constant(x_prev.clone()).unwrap();
        let fp = tape.constant(f_prev.clone()).unwrap();
        let (xt, ft) = apply_updates(&mut tape, xp, fp, &out).unwrap();
        assert_eq!(tape.value(xt).data, x_prev.data);
        assert_eq!(tape.value(ft).data, f_prev.data);
    }

    #[test]
    fn identical_positions_get_identical_outputs() {
        let pair = BtcPair::init(6, 4, &mut rng(4));
        let mut x_prev = positions(3, 5);
        for d in 0..3 {
            x_prev.data[2 * 3 + d] = x_prev.data[d]; // row 2 = row 0
        }
        let (tape, out) = forward_frozen(&pair, &x_prev, 1.0);
        let dx = tape.value(out.dx);
        let df = tape.value(out.df);
        for d in 0..3 {
            assert_eq!(dx.data[2 * 3 + d], dx.data[d]);
        }
        for d in 0..4 {
            assert_eq!(df.data[2 * 4 + d], df.data[d]);
        }
        assert_eq!(tape.value(out.gx).data[2], tape.value(out.gx).data[0]);
    }

    #[test]
    fn forward_matches_scratch_binarized_evaluation() {
        let pair = BtcPair::init(5, 3, &mut rng(6));
        let x_prev = positions(2, 7);
        let (tape, out) = forward_frozen(&pair, &x_prev, 1.0);

        let enc = positional_encoding(&x_prev);
        let eval_net = |net: &BtcNet, row: &[f64]| -> Vec<f64> {
            let mut cur = row.to_vec();
            for (li, l) in net.layers.iter().enumerate() {
                let (rows, cols) = (l.latent_w.rows(), l.latent_w.cols());
                let mut next = vec![0.0; rows];
                for o in 0..rows {
                    let mut acc = l.b.data[o];
                    for i in 0..cols {
                        let sw = if l.latent_w.data[o * cols + i] >= 0.0 { 1.0 } else { -1.0 };
                        acc += l.scale * sw * cur[i];
                    }
                    next[o] = if li + 1 < net.layers.len() { acc.tanh() } else { acc };
                }
                cur = next;
            }
            cur
        };
        for r in 0..2 {
            let row = &enc.data[r * POSENC_DIM..(r + 1) * POSENC_DIM];
            let hx = eval_net(&pair.net_x, row);
            let hf = eval_net(&pair.net_f, row);
            for d in 0..3 {
                assert!((tape.value(out.dx).data[r * 3 + d] - hx[d]).abs() < 1e-12);
                assert!((tape.value(out.df).data[r * 3 + d] - hf[d]).abs() < 1e-12);
            }
            assert!((tape.value(out.gx).data[r] - hx[3].tanh()).abs() < 1e-12);
            assert!((tape.value(out.gf).data[r] - hx[4].tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_updates_feature_cancellation() {
        // γ^f = 1 and Δf̃ = −f_prev zeroes the features
        let mut tape = Tape::new();
        let f_prev = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.1, -0.7]);
        let x_prev = Tensor::zeros(vec![2, 3]);
        let xp = tape.constant(x_prev).unwrap();
        let fp = tape.constant(f_prev.clone()).unwrap();
        let neg: Vec<f64> = f_prev.data.iter().map(|v| -v).collect();
        let out = BtcOutputs {
            dx: tape.constant(Tensor::zeros(vec![2, 3])).unwrap(),
            gx: tape.constant(Tensor::zeros(vec![2, 1])).unwrap(),
            gf: tape.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0])).unwrap(),
            df: tape.constant(Tensor::new(vec![2, 3], neg)).unwrap(),
        };
        let (_, ft) = apply_updates(&mut tape, xp, fp, &out).unwrap();
        assert!(tape.value(ft).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn apply_updates_matches_elementwise_scratch() {
        let mut r = rng(8);
        let n = 3;
        let d = 4;
        let x_prev = positions(n, 9);
        let f_prev = Tensor::new(vec![n, d], (0..n * d).map(|_| r.gen::<f64>()).collect());
        let dx = Tensor::new(vec![n, 3], (0..n * 3).map(|_| r.gen::<f64>() - 0.5).collect());
        let gx = Tensor::new(vec![n, 1], (0..n).map(|_| r.gen::<f64>() - 0.5).collect());
        let gf = Tensor::new(vec![n, 1], (0..n).map(|_| r.gen::<f64>() - 0.5).collect());
        let df = Tensor::new(vec![n, d], (0..n * d).map(|_| r.gen::<f64>() - 0.5).collect());

        let mut tape = Tape::new();
        let xp = tape.constant(x_prev.clone()).unwrap();
        let fp = tape.constant(f_prev.clone()).unwrap();
        let out = BtcOutputs {
            dx: tape.constant(dx.clone()).unwrap(),
            gx: tape.constant(gx.clone()).unwrap(),
            gf: tape.constant(gf.clone()).unwrap(),
            df: tape.constant(df.clone()).unwrap(),
        };
        let (xt, ft) = apply_updates(&mut tape, xp, fp, &out).unwrap();
        for a in 0..n {
            for dd in 0..3 {
                let want = x_prev.data[a * 3 + dd] + gx.data[a] * dx.data[a * 3 + dd];
                assert!((tape.value(xt).data[a * 3 + dd] - want).abs() < 1e-15);
            }
            for dd in 0..d {
                let want = f_prev.data[a * d + dd] + gf.data[a] * df.data[a * d + dd];
                assert!((tape.value(ft).data[a * d + dd] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn updates_are_invertible_from_transmitted_outputs() {
        let pair = BtcPair::init(6, 4, &mut rng(10)).quantize_for_wire();
        let x_prev = positions(4, 11);
        let (tape, out) = forward_frozen(&pair, &x_prev, 1.0);
        let dx = tape.value(out.dx);
        let gx = tape.value(out.gx);
        for a in 0..4 {
            for d in 0..3 {
                let x_t = x_prev.data[a * 3 + d] + gx.data[a] * dx.data[a * 3 + d];
                let back = x_t - gx.data[a] * dx.data[a * 3 + d];
                assert_eq!(back, x_prev.data[a * 3 + d]);
            }
        }
    }

    #[test]
    fn count_symbols_trivials() {
        let mut pair = BtcPair::init(4, 2, &mut rng(12));
        for net in [&mut pair.net_x, &mut pair.net_f] {
            for l in &mut net.layers {
                for w in &mut l.latent_w.data {
                    *w = -0.5;
                }
            }
        }
        let c = count_symbols(&pair);
        assert_eq!(c.c_plus, 0);
        assert_eq!(c.total(), pair.net_x.weight_count() + pair.net_f.weight_count());

        for net in [&mut pair.net_x, &mut pair.net_f] {
            for l in &mut net.layers {
                l.latent_w.data.fill(0.0);
            }
        }
        let c = count_symbols(&pair);
        assert_eq!(c.c_minus, 0, "ties count as +1");
    }

    #[test]
    fn count_symbols_matches_brute_force_scan() {
        let pair = BtcPair::init(7, 5, &mut rng(13));
        let c = count_symbols(&pair);
        let mut plus = 0;
        let mut minus = 0;
        for net in [&pair.net_x, &pair.net_f] {
            for l in &net.layers {
                for &w in &l.latent_w.data {
                    if w >= 0.0 {
                        plus += 1;
                    } else {
                        minus += 1;
                    }
                }
            }
        }
        assert_eq!((c.c_plus, c.c_minus), (plus, minus));
    }

    #[test]
    fn hard_rate_single_weight_half() {
        let c = SymbolCounts { c_plus: 1, c_minus: 0 };
        assert_eq!(hard_rate(&c, 0.5), 1.0);
        let c = SymbolCounts { c_plus: 0, c_minus: 8 };
        assert_eq!(hard_rate(&c, 0.5), 8.0);
    }

    #[test]
    fn hard_rate_matches_shannon_arithmetic() {
        let c = SymbolCounts { c_plus: 37, c_minus: 63 };
        let p: f64 = 37.0 / 100.0;
        let want = 37.0 * -(p.log2()) + 63.0 * -((1.0 - p).log2());
        assert!((hard_rate(&c, p) - want).abs() < 1e-12);
    }

    #[test]
    fn entropy_lower_bound() {
        let c = SymbolCounts { c_plus: 30, c_minus: 70 };
        let p_hat: f64 = 0.3;
        let h2 = -(p_hat * p_hat.log2() + 0.7 * 0.7f64.log2());
        let bound = 100.0 * h2;
        // equality at the empirical frequency
        assert!((hard_rate(&c, p_hat) - bound).abs() < 1e-9);
        // strictly above elsewhere
        for p in [0.1, 0.25, 0.45, 0.8] {
            assert!(hard_rate(&c, p) > bound + 1e-6);
        }
    }

    #[test]
    fn sign_pattern_invariant_under_positive_rescale() {
        let pair = BtcPair::init(6, 3, &mut rng(14));
        let mut scaled = pair.clone();
        for net in [&mut scaled.net_x, &mut scaled.net_f] {
            for l in &mut net.layers {
                for w in &mut l.latent_w.data {
                    *w *= 7.3;
                }
            }
        }
        assert_eq!(pair.net_x.sign_bits(), scaled.net_x.sign_bits());
        assert_eq!(pair.net_f.sign_bits(), scaled.net_f.sign_bits());
        // and therefore identical forward outputs (scales untouched)
        let x_prev = positions(3, 15);
        let (t1, o1) = forward_frozen(&pair, &x_prev, 1.0);
        let (t2, o2) = forward_frozen(&scaled, &x_prev, 1.0);
        assert_eq!(t1.value(o1.dx).data, t2.value(o2.dx).data);
        assert_eq!(t1.value(o1.df).data, t2.value(o2.df).data);
    }

    #[test]
    fn soft_rate_converges_to_hard_rate() {
        let pair = BtcPair::init(5, 3, &mut rng(16));
        let counts = count_symbols(&pair);
        let p = counts.p_plus();
        let hard = hard_rate(&counts, p);

        let mut store = ParamStore::new();
        let params = BtcPairParams::register(&mut store, &pair);
        let mut tape = Tape::new();
        let soft = soft_rate(&mut tape, &store, &params, p, 1e-3).unwrap();
        let soft = tape.scalar_value(soft);
        assert!(
            (soft - hard).abs() / hard < 1e-3,
            "soft {soft} vs hard {hard}"
        );
    }

    #[test]
    fn soft_rate_gradient_matches_finite_differences() {
        let pair = BtcPair::init(4, 2, &mut rng(17));
        let mut store = ParamStore::new();
        let params = BtcPairParams::register(&mut store, &pair);
        let tau = 0.5;
        let p = 0.4;
        let mut tape = Tape::new();
        let soft = soft_rate(&mut tape, &store, &params, p, tau).unwrap();
        tape.backward_scalar(&mut store, soft).unwrap();

        let wid = params.net_x.layers[0].0;
        let analytic = store.grad(wid).data.clone();
        let h = 1e-6;
        for i in (0..analytic.len()).step_by(13) {
            let orig = store.value(wid).data[i];
            let eval = |store: &ParamStore| {
                let mut t = Tape::new();
                let s = soft_rate(&mut t, store, &params, p, tau).unwrap();
                t.scalar_value(s)
            };
            store.value_mut(wid).data[i] = orig + h;
            let fp = eval(&store);
            store.value_mut(wid).data[i] = orig - h;
            let fm = eval(&store);
            store.value_mut(wid).data[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let denom = num.abs().max(analytic[i].abs()).max(1e-9);
            assert!((analytic[i] - num).abs() / denom < 1e-4);
        }
    }

    #[test]
    fn wire_round_trip_reconstructs_forward() {
        let pair = BtcPair::init(6, 4, &mut rng(18));
        let wire = pair.net_x.quantize_for_wire();
        let sizes = [POSENC_DIM, 6, 5];
        let signs = wire.sign_bits();
        let scales: Vec<f64> = wire.layers.iter().map(|l| l.scale).collect();
        let biases: Vec<Vec<f64>> = wire.layers.iter().map(|l| l.b.data.clone()).collect();
        let rebuilt = BtcNet::from_wire(&sizes, &signs, &scales, &biases);
        let x_prev = positions(3, 19);
        let enc = positional_encoding(&x_prev);
        let store = ParamStore::new();
        let run = |net: &BtcNet| {
            let mut tape = Tape::new();
            let e = tape.constant(enc.clone()).unwrap();
            let y = BtcHandle::Frozen(net).forward(&mut tape, &store, e).unwrap();
            tape.value(y).data.clone()
        };
        assert_eq!(run(&wire), run(&rebuilt), "bit-identical reconstruction");
    }
}

//! Latent-discrepancy-aware recalibration: an EMA over BTC feature-branch
//! gradient norms decides, once per frame, whether the attribute network
//! has drifted from the evolving latent features and needs a short
//! rendering-loss-only fine-tune.

use crate::autodiff::{MlpParams, ParamStore};
use crate::btc::BtcPairParams;
use crate::model::AttributeNet;
use crate::{Error, Result};

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

/// EMA of per-step gradient norms, reset to zero at each frame start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientStatistic {
    pub g_current: f64,
    pub ema: f64,
    pub alpha_d: f64,
    pub step: u32,
}

impl GradientStatistic {
    pub fn new(alpha_d: f64) -> Self {
        GradientStatistic { g_current: 0.0, ema: 0.0, alpha_d, step: 0 }
    }

    /// ema' = α·ema + (1−α)·g
    pub fn update(&mut self, g: f64) -> Result<()> {
        if !(g >= 0.0) {
            return Err(Error::Msg(format!("gradient norm must be >= 0, got {g}")));
        }
        self.g_current = g;
        self.ema = self.alpha_d * self.ema + (1.0 - self.alpha_d) * g;
        self.step += 1;
        Ok(())
    }
}

/// Recalibration knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecalConfig {
    pub eps_d: f64,
    pub t_recal: u32,
    pub lr_recal: f64,
}

impl Default for RecalConfig {
    fn default() -> Self {
        RecalConfig { eps_d: 0.002, t_recal: 200, lr_recal: 5e-3 }
    }
}

impl RecalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eps_d <= 0.0 {
            return Err(Error::InvalidConfig("eps_d must be > 0".into()));
        }
        if self.lr_recal <= 0.0 {
            return Err(Error::InvalidConfig("lr_recal must be > 0".into()));
        }
        Ok(())
    }
}

/// ‖∇ L‖₂ over all BTC_f latent weights, biases and layer scales.
pub fn grad_norm_btc_f(store: &ParamStore, pair: &BtcPairParams) -> f64 {
    store.grad_norm(&pair.ids_f())
}

/// Strict threshold: recalibrate iff the end-of-frame EMA exceeds eps_d.
pub fn should_recalibrate(stat: &GradientStatistic, cfg: &RecalConfig) -> bool {
    stat.ema > cfg.eps_d
}

/// What happened during a recalibration attempt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecalOutcome {
    /// true iff a recalibrated network was produced (and must be coded)
    pub ran: bool,
    /// fine-tune aborted due to a non-finite loss (pre-recal net kept)
    pub aborted: bool,
    pub steps: u32,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Fine-tune the attribute network for `t_recal` steps against the
/// rendering loss only, with a fresh optimizer state. `step` evaluates the
/// frame's L_r for the current weights and backpropagates into the store;
/// anchors, BTC and the mask network are outside the store and stay fixed.
pub fn recalibrate(
    ng: &AttributeNet,
    cfg: &RecalConfig,
    mut step: impl FnMut(&mut ParamStore, &MlpParams) -> Result<f64>,
) -> (AttributeNet, RecalOutcome) {
    let noop = RecalOutcome {
        ran: false,
        aborted: false,
        steps: 0,
        loss_before: 0.0,
        loss_after: 0.0,
    };
    if cfg.t_recal == 0 {
        return (ng.clone(), noop);
    }
    let mut store = ParamStore::new();
    let params = MlpParams::register(&mut store, &ng.mlp);
    let ids = params.ids();
    let mut loss_before = 0.0;
    for t in 0..cfg.t_recal {
        let loss = match step(&mut store, &params) {
            Ok(l) if l.is_finite() => l,
            _ => return (ng.clone(), RecalOutcome { aborted: true, steps: t, ..noop }),
        };
        if t == 0 {
            loss_before = loss;
        }
        if store.adam_step(&ids, cfg.lr_recal, ADAM_BETAS, ADAM_EPS).is_err() {
            return (ng.clone(), RecalOutcome { aborted: true, steps: t, ..noop });
        }
    }
    let loss_after = match step(&mut store, &params) {
        Ok(l) if l.is_finite() => l,
        _ => return (ng.clone(), RecalOutcome { aborted: true, steps: cfg.t_recal, ..noop }),
    };
    store.zero_all_grads();
    let recal = AttributeNet {
        mlp: params.export(&store),
        k: ng.k,
        s_base: ng.s_base,
    };
    (
        recal,
        RecalOutcome {
            ran: true,
            aborted: false,
            steps: cfg.t_recal,
            loss_before,
            loss_after,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::btc::{BtcPair, BtcPairParams};
    use crate::losses::rendering_loss;
    use crate::model::{decode_anchors, AnchorSet, NetHandle};
    use crate::render::{render, render_backward, Camera, RenderConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ema_first_step() {
        let mut s = GradientStatistic::new(0.3);
        s.update(1.0).unwrap();
        assert!((s.ema - 0.7).abs() < 1e-15);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn ema_converges_to_constant_input() {
        let mut s = GradientStatistic::new(0.3);
        let c = 2.5;
        for _ in 0..20 {
            s.update(c).unwrap();
        }
        assert!((s.ema - c).abs() < c * 0.3f64.powi(20));
    }

    #[test]
    fn ema_hand_recursion() {
        // [1, 2, 3] with alpha = 0.3:
        // G1 = 0.7, G2 = 0.3*0.7 + 1.4 = 1.61, G3 = 0.3*1.61 + 2.1 = 2.583
        let mut s = GradientStatistic::new(0.3);
        for g in [1.0, 2.0, 3.0] {
            s.update(g).unwrap();
        }
        assert!((s.ema - 2.583).abs() < 1e-12);
    }

    #[test]
    fn ema_is_linear_in_the_trace() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..15).map(|_| r.gen::<f64>()).collect();
        let b: Vec<f64> = (0..15).map(|_| r.gen::<f64>()).collect();
        let run = |xs: &[f64]| {
            let mut s = GradientStatistic::new(0.3);
            for &x in xs {
                s.update(x).unwrap();
            }
            s.ema
        };
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert!((run(&sum) - (run(&a) + run(&b))).abs() < 1e-12);
    }

    #[test]
    fn ema_rejects_negative() {
        let mut s = GradientStatistic::new(0.3);
        assert!(s.update(-0.1).is_err());
        assert!(s.update(f64::NAN).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let cfg = RecalConfig { eps_d: 0.002, ..Default::default() };
        let mut s = GradientStatistic::new(0.3);
        s.ema = 0.002;
        assert!(!should_recalibrate(&s, &cfg));
        s.ema = 0.0021;
        assert!(should_recalibrate(&s, &cfg));
    }

    #[test]
    fn trigger_count_monotone_in_threshold() {
        // fixed EMA trace; higher thresholds can only trigger fewer times
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let emas: Vec<f64> = (0..50).map(|_| r.gen::<f64>() * 0.01).collect();
        let count = |eps: f64| {
            let cfg = RecalConfig { eps_d: eps, ..Default::default() };
            emas.iter()
                .filter(|&&e| {
                    let mut s = GradientStatistic::new(0.3);
                    s.ema = e;
                    should_recalibrate(&s, &cfg)
                })
                .count()
        };
        let mut prev = usize::MAX;
        for eps in [0.001, 0.0015, 0.002, 0.004, 0.008] {
            let c = count(eps);
            assert!(c <= prev);
            prev = c;
        }
    }

    #[test]
    fn grad_norm_trivials_and_scratch() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let pair = BtcPair::init(4, 3, &mut r);
        let mut store = ParamStore::new();
        let params = BtcPairParams::register(&mut store, &pair);
        // no backward yet: zero
        assert_eq!(grad_norm_btc_f(&store, &params), 0.0);

        // drive arbitrary known grads through a linear tape:
        // loss = sum(p * c) has grad c
        let mut tape = Tape::new();
        let mut expected_sq = 0.0;
        let mut total: Option<crate::autodiff::Node> = None;
        for id in params.ids_f() {
            let shape = store.value(id).shape.clone();
            let c: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|_| r.gen::<f64>() - 0.5)
                .collect();
            expected_sq += c.iter().map(|v| v * v).sum::<f64>();
            let pn = tape.param(&store, id).unwrap();
            let cn = tape.constant(Tensor::new(shape, c)).unwrap();
            let prod = tape.mul(pn, cn).unwrap();
            let s = tape.sum(prod).unwrap();
            total = Some(match total {
                Some(t) => tape.add(t, s).unwrap(),
                None => s,
            });
        }
        tape.backward_scalar(&mut store, total.unwrap()).unwrap();
        let got = grad_norm_btc_f(&store, &params);
        assert!((got - expected_sq.sqrt()).abs() < 1e-12);
        // BTC_x grads must not contribute
        assert_eq!(store.grad_norm(&params.net_x.ids()), 0.0);
    }

    #[test]
    fn grad_norm_single_entry() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let pair = BtcPair::init(3, 2, &mut r);
        let mut store = ParamStore::new();
        let params = BtcPairParams::register(&mut store, &pair);
        let id = params.ids_f()[0];
        let mut tape = Tape::new();
        let shape = store.value(id).shape.clone();
        let mut c = vec![0.0; shape.iter().product()];
        c[0] = 3.0;
        let pn = tape.param(&store, id).unwrap();
        let cn = tape.constant(Tensor::new(shape, c)).unwrap();
        let prod = tape.mul(pn, cn).unwrap();
        let s = tape.sum(prod).unwrap();
        tape.backward_scalar(&mut store, s).unwrap();
        assert!((grad_norm_btc_f(&store, &params) - 3.0).abs() < 1e-15);
    }

    // --- recalibration against a real rendered frame ---

    struct Frame {
        anchors: AnchorSet,
        cam: Camera,
        rc: RenderConfig,
        target: crate::render::Image,
    }

    fn make_frame(seed: u64, ng: &AttributeNet) -> Frame {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut anchors = AnchorSet::random(6, 4, 0.3, 0.15, &mut r);
        for a in 0..6 {
            anchors.x.data[a * 3 + 2] = 1.0 + 0.3 * (a as f64 / 6.0);
        }
        let cam = Camera {
            fx: 40.0,
            fy: 40.0,
            cx: 12.0,
            cy: 12.0,
            rot: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            trans: [0.0; 3],
            width: 24,
            height: 24,
            view_dir: [0.0, 0.0, -1.0],
        };
        let rc = RenderConfig::default();
        let target = {
            let store = ParamStore::new();
            let mut tape = Tape::new();
            let x = tape.constant(anchors.x.clone()).unwrap();
            let f = tape.constant(anchors.f.clone()).unwrap();
            let l = tape.constant(anchors.l.clone()).unwrap();
            let d = decode_anchors(
                &mut tape,
                &store,
                x,
                f,
                l,
                &NetHandle::Frozen(&ng.mlp),
                ng.k,
                ng.s_base,
                [0.0, 0.0, 1.0],
            )
            .unwrap();
            render(&d.to_primitives(&tape), &cam, &rc)
        };
        Frame { anchors, cam, rc, target }
    }

    fn frame_step(
        frame: &Frame,
        k: usize,
        s_base: f64,
    ) -> impl FnMut(&mut ParamStore, &MlpParams) -> Result<f64> + '_ {
        move |store, params| {
            let mut tape = Tape::new();
            let x = tape.constant(frame.anchors.x.clone())?;
            let f = tape.constant(frame.anchors.f.clone())?;
            let l = tape.constant(frame.anchors.l.clone())?;
            let d = decode_anchors(
                &mut tape,
                store,
                x,
                f,
                l,
                &NetHandle::Trained(params),
                k,
                s_base,
                [0.0, 0.0, 1.0],
            )?;
            let prims = d.to_primitives(&tape);
            let img = render(&prims, &frame.cam, &frame.rc);
            let (loss, d_img) = rendering_loss(&img, &frame.target, 0.2);
            let grads = render_backward(&prims, &frame.cam, &frame.rc, &d_img);
            let seeds = d.seed_grads(&grads);
            tape.backward(store, &seeds)?;
            Ok(loss)
        }
    }

    #[test]
    fn zero_step_recal_is_identity() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let ng = AttributeNet::init(4, 8, 2, 0.08, &mut r);
        let cfg = RecalConfig { t_recal: 0, ..Default::default() };
        let (out, outcome) = recalibrate(&ng, &cfg, |_, _| unreachable!());
        assert_eq!(out.mlp, ng.mlp);
        assert!(!outcome.ran);
    }

    #[test]
    fn perfect_frame_leaves_weights_untouched() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let ng = AttributeNet::init(4, 8, 2, 0.08, &mut r);
        let frame = make_frame(7, &ng); // target rendered by this very net
        let cfg = RecalConfig { t_recal: 10, ..Default::default() };
        let (out, outcome) = recalibrate(&ng, &cfg, frame_step(&frame, 2, 0.08));
        assert!(outcome.ran);
        assert!(outcome.loss_before.abs() < 1e-12);
        for (a, b) in out.mlp.layers.iter().zip(&ng.mlp.layers) {
            for (x, y) in a.w.data.iter().zip(&b.w.data) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn recal_strictly_decreases_loss_on_mismatch() {
        for seed in [11u64, 12, 13] {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let ng = AttributeNet::init(4, 8, 2, 0.08, &mut r);
            let frame = make_frame(seed + 100, &ng);
            // perturb the net so the frame no longer matches
            let mut bad = ng.clone();
            for l in &mut bad.mlp.layers {
                for w in &mut l.w.data {
                    *w += (r.gen::<f64>() - 0.5) * 0.3;
                }
            }
            let anchors_before = frame.anchors.clone();
            let cfg = RecalConfig { t_recal: 40, ..Default::default() };
            let (_, outcome) = recalibrate(&bad, &cfg, frame_step(&frame, 2, 0.08));
            assert!(outcome.ran);
            assert!(
                outcome.loss_after < outcome.loss_before,
                "seed {seed}: {} !< {}",
                outcome.loss_after,
                outcome.loss_before
            );
            // anchors never touched
            assert_eq!(frame.anchors, anchors_before);
        }
    }

    #[test]
    fn aborted_recal_keeps_original_net() {
        let mut r = ChaCha8Rng::seed_from_u64(20);
        let ng = AttributeNet::init(4, 8, 2, 0.08, &mut r);
        let cfg = RecalConfig { t_recal: 5, ..Default::default() };
        let (out, outcome) =
            recalibrate(&ng, &cfg, |_, _| Err(Error::Msg("boom".into())));
        assert!(outcome.aborted);
        assert!(!outcome.ran);
        assert_eq!(out.mlp, ng.mlp);
    }
}

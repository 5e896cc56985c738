//! The streaming training loop: I-frame optimization, per-frame BTC +
//! mask training with gradient-EMA tracking and optional recalibration,
//! closed-loop state adoption, and the decoder that replays it all.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{MlpParams, Node, ParamStore, Tape, Tensor};
use crate::btc::{
    apply_updates, btc_forward, count_symbols, soft_rate, BtcPair, BtcPairParams, PairHandle,
};
use crate::codec::{
    self, encode_iframe, encode_pframe, measure_rate, FrameKind, FrameRecord, StreamConfig,
    StreamReader,
};
use crate::ladar::{
    grad_norm_btc_f, recalibrate, GradientStatistic, RecalConfig, RecalOutcome, ADAM_BETAS,
    ADAM_EPS,
};
use crate::losses::{psnr, rendering_loss, sparsity_loss_node, ssim};
use crate::model::{
    decode_anchors, gate_attributes, mask_scores, partition, warm_start_mask, ActivationPartition,
    AnchorSet, AttributeNet, MaskNet, NetHandle,
};
use crate::render::{render, render_backward, Camera, Image, RenderConfig};
use crate::{Error, Result};

/// All hyperparameters of a run. Desk-scale defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub n_anchors: usize,
    pub d_feat: usize,
    pub k: usize,
    pub h_g: usize,
    pub h_m: usize,
    pub h_b: usize,
    pub s_base: f64,
    /// half-width of the anchor initialization box
    pub scene_extent: f64,
    pub eps_m: f64,
    pub eps_d: f64,
    pub alpha_d: f64,
    pub lambda_e: f64,
    pub lambda_s: f64,
    pub lambda_ssim: f64,
    pub lr: f64,
    pub gamma_max: f64,
    pub t_btc: u32,
    pub t_iframe: u32,
    pub t_recal: u32,
    pub seed: u64,
    pub enable_aad: bool,
    pub enable_ladar: bool,
    /// 0 = GOP-free streaming; otherwise restart the I-frame every
    /// `gop_size` frames
    pub gop_size: u32,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_anchors: 256,
            d_feat: 16,
            k: 5,
            h_g: 32,
            h_m: 16,
            h_b: 24,
            s_base: 0.05,
            scene_extent: 0.8,
            eps_m: 0.01,
            eps_d: 0.002,
            alpha_d: 0.3,
            lambda_e: 0.004,
            lambda_s: 0.01,
            lambda_ssim: 0.2,
            lr: 5e-3,
            gamma_max: 1.0,
            t_btc: 500,
            t_iframe: 2000,
            t_recal: 200,
            seed: 0,
            enable_aad: true,
            enable_ladar: true,
            gop_size: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("s_base", self.s_base),
            ("scene_extent", self.scene_extent),
            ("eps_m", self.eps_m),
            ("eps_d", self.eps_d),
            ("lr", self.lr),
            ("gamma_max", self.gamma_max),
        ];
        for (name, v) in pos {
            if !(v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.eps_m >= 0.5 {
            // sigma(0) = 0.5: a threshold at or above it would deactivate
            // anchors whose mask net has not yet learned anything
            return Err(Error::InvalidConfig(format!(
                "eps_m must be < 0.5, got {}",
                self.eps_m
            )));
        }
        if !(0.0..1.0).contains(&self.alpha_d) {
            return Err(Error::InvalidConfig(format!(
                "alpha_d must be in [0, 1), got {}",
                self.alpha_d
            )));
        }
        crate::losses::LossWeights {
            lambda_ssim: self.lambda_ssim,
            lambda_e: self.lambda_e,
            lambda_s: self.lambda_s,
        }
        .validate()?;
        for (name, v) in [
            ("n_anchors", self.n_anchors),
            ("d_feat", self.d_feat),
            ("k", self.k),
            ("h_g", self.h_g),
            ("h_m", self.h_m),
            ("h_b", self.h_b),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    fn recal_config(&self) -> RecalConfig {
        RecalConfig { eps_d: self.eps_d, t_recal: self.t_recal, lr_recal: self.lr }
    }
}

/// Per-frame RNG, decoupled across frames so GOP restarts and frame
/// re-runs see stable streams.
fn frame_rng(seed: u64, frame: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (frame as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    )
}

/// The encoder-side state after a frame; closed-loop coding means this is
/// byte-for-byte what a decoder reconstructs.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameState {
    pub anchors: AnchorSet,
    pub ng: AttributeNet,
    pub nm: MaskNet,
    pub stat: GradientStatistic,
    pub partition: ActivationPartition,
}

/// One row of the per-frame report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub frame: u32,
    pub psnr_db: f64,
    pub ssim: f64,
    pub bytes: usize,
    pub grad_ema: f64,
    pub recal: bool,
    pub active_anchors: usize,
}

/// Mask scores of frozen weights over a fixed anchor set.
fn frozen_scores(anchors: &AnchorSet, nm: &MaskNet) -> Result<Tensor> {
    let store = ParamStore::new();
    let mut tape = Tape::new();
    let x = tape.constant(anchors.x.clone())?;
    let f = tape.constant(anchors.f.clone())?;
    let s = mask_scores(&mut tape, &store, x, f, &NetHandle::Frozen(&nm.mlp))?;
    Ok(tape.value(s).clone())
}

fn state_partition(anchors: &AnchorSet, nm: &MaskNet, cfg: &PipelineConfig) -> Result<ActivationPartition> {
    if cfg.enable_aad {
        Ok(partition(&frozen_scores(anchors, nm)?, cfg.eps_m))
    } else {
        Ok(ActivationPartition {
            active: (0..anchors.count()).collect(),
            vanished: Vec::new(),
        })
    }
}

/// Render a reconstructed state from any camera. This is the one code
/// path shared by encoder-side reporting and the decoder, which the
/// bit-identical-render contract rests on.
pub fn render_state(
    anchors: &AnchorSet,
    ng: &AttributeNet,
    nm: &MaskNet,
    enable_aad: bool,
    eps_m: f64,
    cam: &Camera,
    background: [f64; 3],
) -> Result<Image> {
    let store = ParamStore::new();
    let mut tape = Tape::new();
    let x = tape.constant(anchors.x.clone())?;
    let f = tape.constant(anchors.f.clone())?;
    let l = tape.constant(anchors.l.clone())?;
    let decoded = decode_anchors(
        &mut tape,
        &store,
        x,
        f,
        l,
        &NetHandle::Frozen(&ng.mlp),
        ng.k,
        ng.s_base,
        cam.view_dir,
    )?;
    let prims = if enable_aad {
        let s = mask_scores(&mut tape, &store, x, f, &NetHandle::Frozen(&nm.mlp))?;
        let (gated, _) = gate_attributes(&mut tape, decoded, s, eps_m)?;
        gated.to_primitives(&tape)
    } else {
        decoded.to_primitives(&tape)
    };
    let rc = RenderConfig { background, ..RenderConfig::default() };
    Ok(render(&prims, cam, &rc))
}

/// Advance anchors through a wire-quantized BTC pair. Shared verbatim by
/// the encoder's adoption step and the decoder.
pub fn advance_anchors(
    anchors: &AnchorSet,
    pair: &BtcPair,
    gamma_max: f64,
) -> Result<AnchorSet> {
    let store = ParamStore::new();
    let mut tape = Tape::new();
    let x = tape.constant(anchors.x.clone())?;
    let f = tape.constant(anchors.f.clone())?;
    let out = btc_forward(&mut tape, &store, &PairHandle::Frozen(pair), &anchors.x, gamma_max)?;
    let (x_t, f_t) = apply_updates(&mut tape, x, f, &out)?;
    AnchorSet::new(
        tape.value(x_t).clone(),
        tape.value(f_t).clone(),
        anchors.l.clone(),
    )
}

/// Jittered uniform grid of anchors inside the scene box.
fn init_anchors(cfg: &PipelineConfig, rng: &mut ChaCha8Rng) -> AnchorSet {
    let n = cfg.n_anchors;
    let g = (n as f64).cbrt().ceil() as usize;
    let cell = 2.0 * cfg.scene_extent / g as f64;
    let mut x = Vec::with_capacity(n * 3);
    for i in 0..n {
        let (gx, gy, gz) = (i % g, (i / g) % g, i / (g * g));
        for (axis, gi) in [gx, gy, gz].into_iter().enumerate() {
            let base = -cfg.scene_extent + (gi as f64 + 0.5) * cell;
            let _ = axis;
            x.push(base + (rng.gen::<f64>() - 0.5) * cell);
        }
    }
    let f = Tensor::new(
        vec![n, cfg.d_feat],
        (0..n * cfg.d_feat).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * 0.1).collect(),
    );
    let l = Tensor::new(vec![n, 3], vec![cell.max(0.05); n * 3]);
    AnchorSet { x: Tensor::new(vec![n, 3], x), f, l }
}

/// Multi-view ground truth for one run.
pub struct EncodeInput<'a> {
    /// frames[t][cam]
    pub frames: &'a [Vec<Image>],
    pub cameras: &'a [Camera],
    pub background: [f64; 3],
    /// camera index excluded from training and used for quality reports;
    /// None trains on all cameras and reports on camera 0
    pub holdout: Option<usize>,
}

impl EncodeInput<'_> {
    fn train_cams(&self) -> Vec<usize> {
        (0..self.cameras.len())
            .filter(|&c| Some(c) != self.holdout)
            .collect()
    }

    fn report_cam(&self) -> usize {
        self.holdout.unwrap_or(0)
    }

    fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::InvalidConfig("no frames to encode".into()));
        }
        if self.cameras.is_empty() {
            return Err(Error::InvalidConfig("no cameras".into()));
        }
        if let Some(h) = self.holdout {
            if h >= self.cameras.len() {
                return Err(Error::InvalidConfig(format!("holdout camera {h} out of range")));
            }
            if self.cameras.len() < 2 {
                return Err(Error::InvalidConfig("holdout requires >= 2 cameras".into()));
            }
        }
        for (t, f) in self.frames.iter().enumerate() {
            if f.len() != self.cameras.len() {
                return Err(Error::InvalidConfig(format!(
                    "frame {t} has {} images for {} cameras",
                    f.len(),
                    self.cameras.len()
                )));
            }
            for (c, img) in f.iter().enumerate() {
                if img.width != self.cameras[c].width || img.height != self.cameras[c].height {
                    return Err(Error::InvalidConfig(format!(
                        "frame {t} camera {c}: image size mismatch"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Jointly optimize anchors, attribute net and mask net against the
/// frame's training views, emit the I-frame record, and adopt the
/// quantized state.
pub fn train_iframe(
    input: &EncodeInput,
    cfg: &PipelineConfig,
    frame_index: u32,
) -> Result<(FrameState, FrameRecord)> {
    let mut rng = frame_rng(cfg.seed, frame_index);
    let gt = &input.frames[frame_index as usize];
    let train_cams = input.train_cams();
    let rc = RenderConfig { background: input.background, ..RenderConfig::default() };

    let init = init_anchors(cfg, &mut rng);
    let ng0 = AttributeNet::init(cfg.d_feat, cfg.h_g, cfg.k, cfg.s_base, &mut rng);
    let nm0 = MaskNet::init(cfg.d_feat, cfg.h_m, &mut rng);

    let mut store = ParamStore::new();
    let x_id = store.add(init.x.clone());
    let f_id = store.add(init.f.clone());
    // l is trained in log space so it stays positive
    let u_id = store.add(Tensor::new(
        init.l.shape.clone(),
        init.l.data.iter().map(|v| v.ln()).collect(),
    ));
    let ng_params = MlpParams::register(&mut store, &ng0.mlp);
    let nm_params = MlpParams::register(&mut store, &nm0.mlp);
    let mut ids = vec![x_id, f_id, u_id];
    ids.extend(ng_params.ids());
    if cfg.enable_aad {
        ids.extend(nm_params.ids());
    }

    for step in 0..cfg.t_iframe {
        let cam_idx = train_cams[(rng.gen::<u64>() % train_cams.len() as u64) as usize];
        let cam = &input.cameras[cam_idx];
        let mut tape = Tape::new();
        let x = tape.param(&store, x_id)?;
        let f = tape.param(&store, f_id)?;
        let u = tape.param(&store, u_id)?;
        let l = tape.exp(u)?;
        let decoded = decode_anchors(
            &mut tape,
            &store,
            x,
            f,
            l,
            &NetHandle::Trained(&ng_params),
            cfg.k,
            cfg.s_base,
            cam.view_dir,
        )?;
        let mut seeds: Vec<(Node, Tensor)> = Vec::new();
        let loss_r = if cfg.enable_aad {
            let scores = mask_scores(&mut tape, &store, x, f, &NetHandle::Trained(&nm_params))?;
            let (gated, _) = gate_attributes(&mut tape, decoded, scores, cfg.eps_m)?;
            let ls = sparsity_loss_node(&mut tape, scores)?;
            seeds.push((ls, Tensor::scalar(cfg.lambda_s)));
            let prims = gated.to_primitives(&tape);
            let img = render(&prims, cam, &rc);
            let (loss, d_img) = rendering_loss(&img, &gt[cam_idx], cfg.lambda_ssim);
            let grads = render_backward(&prims, cam, &rc, &d_img);
            seeds.extend(gated.seed_grads(&grads));
            loss
        } else {
            let prims = decoded.to_primitives(&tape);
            let img = render(&prims, cam, &rc);
            let (loss, d_img) = rendering_loss(&img, &gt[cam_idx], cfg.lambda_ssim);
            let grads = render_backward(&prims, cam, &rc, &d_img);
            seeds.extend(decoded.seed_grads(&grads));
            loss
        };
        if !loss_r.is_finite() {
            return Err(Error::Diverged { frame: frame_index, step, seed: cfg.seed });
        }
        tape.backward(&mut store, &seeds)?;
        store
            .adam_step(&ids, cfg.lr, ADAM_BETAS, ADAM_EPS)
            .map_err(|_| Error::Diverged { frame: frame_index, step, seed: cfg.seed })?;
    }

    let trained = AnchorSet::new(
        store.value(x_id).clone(),
        store.value(f_id).clone(),
        Tensor::new(
            init.l.shape.clone(),
            store.value(u_id).data.iter().map(|v| v.exp()).collect(),
        ),
    )?;
    let ng = AttributeNet {
        mlp: ng_params.export(&store),
        k: cfg.k,
        s_base: cfg.s_base,
    };
    let nm = MaskNet { mlp: nm_params.export(&store) };

    let (record, adopted) = encode_iframe(&trained, &ng.mlp, &nm.mlp, frame_index);
    let anchors = adopted.anchors;
    let ng = AttributeNet { mlp: adopted.ng, k: cfg.k, s_base: cfg.s_base };
    let nm = MaskNet { mlp: adopted.nm };
    let part = state_partition(&anchors, &nm, cfg)?;
    Ok((
        FrameState {
            anchors,
            ng,
            nm,
            stat: GradientStatistic::new(cfg.alpha_d),
            partition: part,
        },
        record,
    ))
}

/// One P-frame of the streaming loop: train a fresh BTC pair and the
/// warm-started mask net, track the gradient EMA, optionally recalibrate
/// the attribute net, and adopt the wire-quantized state.
pub fn train_pframe(
    input: &EncodeInput,
    state: &FrameState,
    cfg: &PipelineConfig,
    frame_index: u32,
) -> Result<(FrameState, FrameRecord, RecalOutcome)> {
    let mut rng = frame_rng(cfg.seed, frame_index);
    let gt = &input.frames[frame_index as usize];
    let train_cams = input.train_cams();
    let rc = RenderConfig { background: input.background, ..RenderConfig::default() };

    let pair0 = BtcPair::init(cfg.h_b, cfg.d_feat, &mut rng);
    let nm0 = warm_start_mask(&state.nm);

    let mut store = ParamStore::new();
    let pair_params = BtcPairParams::register(&mut store, &pair0);
    let nm_params = MlpParams::register(&mut store, &nm0.mlp);
    let mut ids = pair_params.ids();
    if cfg.enable_aad {
        ids.extend(nm_params.ids());
    }

    let mut stat = GradientStatistic::new(cfg.alpha_d);
    for step in 0..cfg.t_btc {
        let cam_idx = train_cams[(rng.gen::<u64>() % train_cams.len() as u64) as usize];
        let cam = &input.cameras[cam_idx];
        let tau = if cfg.t_btc > 1 {
            1.0 + (1e-2 - 1.0) * step as f64 / (cfg.t_btc - 1) as f64
        } else {
            1e-2
        };
        let p_hat = count_symbols(&pair_params.export(&store)).p_plus();

        let mut tape = Tape::new();
        let x_prev = tape.constant(state.anchors.x.clone())?;
        let f_prev = tape.constant(state.anchors.f.clone())?;
        let out = btc_forward(
            &mut tape,
            &store,
            &PairHandle::Trained(&pair_params),
            &state.anchors.x,
            cfg.gamma_max,
        )?;
        let (x_t, f_t) = apply_updates(&mut tape, x_prev, f_prev, &out)?;
        let l = tape.constant(state.anchors.l.clone())?;
        let decoded = decode_anchors(
            &mut tape,
            &store,
            x_t,
            f_t,
            l,
            &NetHandle::Frozen(&state.ng.mlp),
            cfg.k,
            cfg.s_base,
            cam.view_dir,
        )?;
        let mut seeds: Vec<(Node, Tensor)> = Vec::new();
        let le = soft_rate(&mut tape, &store, &pair_params, p_hat, tau)?;
        seeds.push((le, Tensor::scalar(cfg.lambda_e)));
        let loss_r = if cfg.enable_aad {
            let scores =
                mask_scores(&mut tape, &store, x_t, f_t, &NetHandle::Trained(&nm_params))?;
            let (gated, _) = gate_attributes(&mut tape, decoded, scores, cfg.eps_m)?;
            let ls = sparsity_loss_node(&mut tape, scores)?;
            seeds.push((ls, Tensor::scalar(cfg.lambda_s)));
            let prims = gated.to_primitives(&tape);
            let img = render(&prims, cam, &rc);
            let (loss, d_img) = rendering_loss(&img, &gt[cam_idx], cfg.lambda_ssim);
            let grads = render_backward(&prims, cam, &rc, &d_img);
            seeds.extend(gated.seed_grads(&grads));
            loss
        } else {
            let prims = decoded.to_primitives(&tape);
            let img = render(&prims, cam, &rc);
            let (loss, d_img) = rendering_loss(&img, &gt[cam_idx], cfg.lambda_ssim);
            let grads = render_backward(&prims, cam, &rc, &d_img);
            seeds.extend(decoded.seed_grads(&grads));
            loss
        };
        if !loss_r.is_finite() {
            return Err(Error::Diverged { frame: frame_index, step, seed: cfg.seed });
        }
        tape.backward(&mut store, &seeds)?;
        stat.update(grad_norm_btc_f(&store, &pair_params))?;
        store
            .adam_step(&ids, cfg.lr, ADAM_BETAS, ADAM_EPS)
            .map_err(|_| Error::Diverged { frame: frame_index, step, seed: cfg.seed })?;
    }

    // closed loop: adopt exactly what will be decoded
    let pair_wire = pair_params.export(&store).quantize_for_wire();
    let counts = count_symbols(&pair_wire);
    let nm_trained = MaskNet { mlp: nm_params.export(&store) };
    let new_anchors = advance_anchors(&state.anchors, &pair_wire, cfg.gamma_max)?;

    let mut outcome = RecalOutcome {
        ran: false,
        aborted: false,
        steps: 0,
        loss_before: 0.0,
        loss_after: 0.0,
    };
    let mut recal_mlp = None;
    if cfg.enable_ladar && stat.ema > cfg.eps_d {
        let nm_wire = MaskNet { mlp: codec::mlp_to_wire(&nm_trained.mlp) };
        let anchors = &new_anchors;
        let mut call = 0usize;
        let step_fn = |st: &mut ParamStore, params: &MlpParams| -> Result<f64> {
            let cam_idx = train_cams[call % train_cams.len()];
            call += 1;
            let cam = &input.cameras[cam_idx];
            let mut tape = Tape::new();
            let x = tape.constant(anchors.x.clone())?;
            let f = tape.constant(anchors.f.clone())?;
            let l = tape.constant(anchors.l.clone())?;
            let decoded = decode_anchors(
                &mut tape,
                st,
                x,
                f,
                l,
                &NetHandle::Trained(params),
                cfg.k,
                cfg.s_base,
                cam.view_dir,
            )?;
            let mut seeds: Vec<(Node, Tensor)> = Vec::new();
            let loss = if cfg.enable_aad {
                let scores =
                    mask_scores(&mut tape, st, x, f, &NetHandle::Frozen(&nm_wire.mlp))?;
                let (gated, _) = gate_attributes(&mut tape, decoded, scores, cfg.eps_m)?;
                let prims = gated.to_primitives(&tape);
                let img = render(&prims, cam, &rc);
                let (loss, d_img) = rendering_loss(&img, &gt[cam_idx], cfg.lambda_ssim);
                let grads = render_backward(&prims, cam, &rc, &d_img);
                seeds.extend(gated.seed_grads(&grads));
                loss
            } else {
                let prims = decoded.to_primitives(&tape);
                let img = render(&prims, cam, &rc);
                let (loss, d_img) = rendering_loss(&img, &gt[cam_idx], cfg.lambda_ssim);
                let grads = render_backward(&prims, cam, &rc, &d_img);
                seeds.extend(decoded.seed_grads(&grads));
                loss
            };
            tape.backward(st, &seeds)?;
            Ok(loss)
        };
        let (recal_ng, oc) = recalibrate(&state.ng, &cfg.recal_config(), step_fn);
        outcome = oc;
        if oc.ran {
            recal_mlp = Some(recal_ng.mlp);
        }
    }

    let record = encode_pframe(
        &pair_wire,
        &counts,
        &nm_trained.mlp,
        recal_mlp.as_ref(),
        frame_index,
    );
    let parsed = codec::parse_pframe(&record, &stream_config_for(cfg, input, 0))?;
    let ng = match parsed.recal_ng {
        Some(m) => AttributeNet { mlp: m, k: cfg.k, s_base: cfg.s_base },
        None => state.ng.clone(),
    };
    let nm = MaskNet { mlp: parsed.nm };
    let part = state_partition(&new_anchors, &nm, cfg)?;
    Ok((
        FrameState {
            anchors: new_anchors,
            ng,
            nm,
            stat,
            partition: part,
        },
        record,
        outcome,
    ))
}

fn stream_config_for(cfg: &PipelineConfig, input: &EncodeInput, n_frames: u32) -> StreamConfig {
    StreamConfig {
        n_anchors: cfg.n_anchors as u32,
        d_feat: cfg.d_feat as u16,
        k: cfg.k as u16,
        h_g: cfg.h_g as u16,
        h_m: cfg.h_m as u16,
        h_b: cfg.h_b as u16,
        n_frames,
        s_base: cfg.s_base,
        eps_m: cfg.eps_m,
        eps_d: cfg.eps_d,
        gamma_max: cfg.gamma_max,
        lambda_e: cfg.lambda_e,
        lambda_s: cfg.lambda_s,
        lambda_ssim: cfg.lambda_ssim,
        enable_aad: cfg.enable_aad,
        enable_ladar: cfg.enable_ladar,
        background: input.background,
        cameras: input.cameras.to_vec(),
    }
}

pub struct EncodeOutput {
    pub bitstream: Vec<u8>,
    pub reports: Vec<FrameReport>,
    /// encoder-side state after each frame, for parity checks
    pub states: Vec<FrameState>,
}

/// Encode a whole sequence: I-frame, then P-frames (with GOP restarts if
/// configured), reporting quality on the held-out camera.
pub fn stream_encode(input: &EncodeInput, cfg: &PipelineConfig) -> Result<EncodeOutput> {
    cfg.validate()?;
    input.validate()?;
    let n_frames = input.frames.len() as u32;
    let report_cam = input.report_cam();
    let mut records = Vec::with_capacity(input.frames.len());
    let mut reports = Vec::with_capacity(input.frames.len());
    let mut states: Vec<FrameState> = Vec::with_capacity(input.frames.len());

    for t in 0..n_frames {
        let is_iframe = t == 0 || (cfg.gop_size > 0 && t % cfg.gop_size == 0);
        let (state, record, recal) = if is_iframe {
            let (s, r) = train_iframe(input, cfg, t)?;
            let noop = RecalOutcome {
                ran: false,
                aborted: false,
                steps: 0,
                loss_before: 0.0,
                loss_after: 0.0,
            };
            (s, r, noop)
        } else {
            let prev = states.last().expect("frame 0 is an I-frame");
            train_pframe(input, prev, cfg, t)?
        };
        let rendered = render_state(
            &state.anchors,
            &state.ng,
            &state.nm,
            cfg.enable_aad,
            cfg.eps_m,
            &input.cameras[report_cam],
            input.background,
        )?;
        let gt = &input.frames[t as usize][report_cam];
        reports.push(FrameReport {
            frame: t,
            psnr_db: psnr(&rendered, gt),
            ssim: ssim(&rendered, gt),
            bytes: measure_rate(&record),
            grad_ema: state.stat.ema,
            recal: recal.ran,
            active_anchors: state.partition.active.len(),
        });
        records.push(record);
        states.push(state);
    }

    let stream_cfg = stream_config_for(cfg, input, n_frames);
    Ok(EncodeOutput {
        bitstream: codec::write_stream(&stream_cfg, &records),
        reports,
        states,
    })
}

/// Decoder-side reconstruction of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFrameState {
    pub anchors: AnchorSet,
    pub ng: AttributeNet,
    pub nm: MaskNet,
}

/// Replay a bitstream into per-frame states.
pub fn decode_states(data: &[u8]) -> Result<(StreamConfig, Vec<DecodedFrameState>)> {
    let mut reader = StreamReader::new(data)?;
    let cfg = reader.config.clone();
    let mut states: Vec<DecodedFrameState> = Vec::new();
    while let Some(record) = reader.next_frame()? {
        let state = match record.kind {
            FrameKind::I => {
                let p = codec::parse_iframe(&record, &cfg)?;
                DecodedFrameState {
                    anchors: p.anchors,
                    ng: AttributeNet {
                        mlp: p.ng,
                        k: cfg.k as usize,
                        s_base: cfg.s_base,
                    },
                    nm: MaskNet { mlp: p.nm },
                }
            }
            FrameKind::P => {
                let prev = states.last().ok_or_else(|| {
                    Error::Bitstream("P-frame before any I-frame".into())
                })?;
                let p = codec::parse_pframe(&record, &cfg)?;
                let anchors = advance_anchors(&prev.anchors, &p.pair, cfg.gamma_max)?;
                let ng = match p.recal_ng {
                    Some(m) => AttributeNet {
                        mlp: m,
                        k: cfg.k as usize,
                        s_base: cfg.s_base,
                    },
                    None => prev.ng.clone(),
                };
                DecodedFrameState { anchors, ng, nm: MaskNet { mlp: p.nm } }
            }
        };
        states.push(state);
    }
    Ok((cfg, states))
}

/// Decode and render every frame from the given camera (free viewpoint:
/// any pose works, not only the training cameras).
pub fn stream_decode(data: &[u8], cam: &Camera) -> Result<Vec<Image>> {
    let (cfg, states) = decode_states(data)?;
    states
        .iter()
        .map(|s| {
            render_state(
                &s.anchors,
                &s.ng,
                &s.nm,
                cfg.enable_aad,
                cfg.eps_m,
                cam,
                cfg.background,
            )
        })
        .collect()
}
